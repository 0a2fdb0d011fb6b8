//! Volatile lock registry. Nothing here is persisted; indexes call
//! [`LockTable::reset_all`] on open so a crash can never leave a lock held.

use std::collections::HashMap;
use std::sync::{Mutex, MutexGuard};
use std::thread::{self, ThreadId};

const SHARDS: usize = 64;

pub struct LockTable {
    shards: Box<[Mutex<HashMap<u64, ThreadId>>]>,
}

impl Default for LockTable {
    fn default() -> Self {
        LockTable::new()
    }
}

impl std::fmt::Debug for LockTable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LockTable")
            .field("held", &self.held_count())
            .finish()
    }
}

impl LockTable {
    pub fn new() -> LockTable {
        LockTable {
            shards: (0..SHARDS).map(|_| Mutex::new(HashMap::new())).collect(),
        }
    }

    fn shard(&self, id: u64) -> MutexGuard<'_, HashMap<u64, ThreadId>> {
        let i = (id.wrapping_mul(0x9e37_79b9_7f4a_7c15) >> 58) as usize % SHARDS;
        self.shards[i].lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Never blocks. Re-acquiring a lock the caller already holds fails.
    pub fn try_lock(&self, id: u64) -> bool {
        let mut s = self.shard(id);
        if s.contains_key(&id) {
            return false;
        }
        s.insert(id, thread::current().id());
        true
    }

    /// Acquires `id`, calling `spin` between attempts.
    pub fn lock(&self, id: u64, mut spin: impl FnMut()) {
        while !self.try_lock(id) {
            spin();
        }
    }

    /// Panics if the calling thread does not hold `id`.
    pub fn unlock(&self, id: u64) {
        let me = thread::current().id();
        let mut s = self.shard(id);
        match s.get(&id) {
            Some(holder) if *holder == me => {
                s.remove(&id);
            }
            Some(_) => panic!("lock {id:#x} released by a thread that does not hold it"),
            None => panic!("lock {id:#x} released while not held"),
        }
    }

    pub fn is_locked(&self, id: u64) -> bool {
        self.shard(id).contains_key(&id)
    }

    pub fn held_count(&self) -> usize {
        self.shards
            .iter()
            .map(|s| s.lock().unwrap_or_else(|e| e.into_inner()).len())
            .sum()
    }

    pub fn reset_all(&self) {
        for s in self.shards.iter() {
            s.lock().unwrap_or_else(|e| e.into_inner()).clear();
        }
    }

    pub fn try_guard(&self, id: u64) -> Option<LockGuard<'_>> {
        self.try_lock(id).then(|| LockGuard { table: self, id })
    }

    pub fn guard(&self, id: u64, spin: impl FnMut()) -> LockGuard<'_> {
        self.lock(id, spin);
        LockGuard { table: self, id }
    }
}

/// Releases its lock on drop.
pub struct LockGuard<'a> {
    table: &'a LockTable,
    id: u64,
}

impl LockGuard<'_> {
    pub fn id(&self) -> u64 {
        self.id
    }
}

impl Drop for LockGuard<'_> {
    fn drop(&mut self) {
        self.table.unlock(self.id);
    }
}
