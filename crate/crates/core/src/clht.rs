//! P-CLHT: persistent cache-line hash table.
//!
//! Every bucket is one 64-byte line: a lock word, three key slots, three
//! value slots and a chain link. An insert writes the value and then the
//! key into a free slot; the 8-byte key store is the commit point and both
//! stores share the line, so a single flush and fence persist the update.
//! Rehashing copies into a table twice the size and commits by swapping the
//! root link.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::index::{
    check_key, check_pair, smo_scope, IndexError, IndexKind, IndexOptions, Key, KeyKind, Mutation,
    OpenError, PmIndex, SmoKind, Value,
};
use crate::lock_table::LockTable;
use crate::pm::{
    mix64, reachability_report, Allocation, PmAddr, PmAllocator, PmemPool, ReachabilityReport, Site,
};

const MAGIC: u64 = u64::from_le_bytes(*b"PCLHT001");
const ROOT: PmAddr = PmAddr(0);
const ROOT_TABLE: PmAddr = PmAddr(8);
const ROOT_KIND: PmAddr = PmAddr(16);
const ROOT_SEED: PmAddr = PmAddr(24);

/// 48 KiB of buckets.
pub const INITIAL_BUCKETS: u64 = 48 * 1024 / 64;
/// A chain that reaches this many buckets triggers a rehash.
pub const REHASH_CHAIN: usize = 3;
const SLOTS: u64 = 3;

const W_LOCK: u64 = 0;
const W_KEY: u64 = 1;
const W_VAL: u64 = 4;
const W_NEXT: u64 = 7;

pub const SITE_LOCK: Site = Site::new("clht.lock").volatile().no_preempt();
pub const SITE_GHOST: Site = Site::new("clht.insert.clear");
pub const SITE_VALUE: Site = Site::new("clht.insert.value").hot();
pub const SITE_KEY: Site = Site::new("clht.insert.key").publish();
pub const SITE_DEL_KEY: Site = Site::new("clht.delete.key").publish();
pub const SITE_DEL_VALUE: Site = Site::new("clht.delete.value");
pub const SITE_CHAIN_INIT: Site = Site::new("clht.chain.init");
pub const SITE_CHAIN_LINK: Site = Site::new("clht.chain.link").publish();
pub const SITE_REHASH_COPY: Site = Site::new("clht.rehash.copy");
pub const SITE_REHASH_SWAP: Site = Site::new("clht.rehash.swap").publish();
const SITE_INIT: Site = Site::new("clht.init").no_preempt();

/// Sites a crash sweep should cover.
pub const CRASH_SITES: &[Site] = &[
    SITE_VALUE,
    SITE_KEY,
    SITE_DEL_KEY,
    SITE_DEL_VALUE,
    SITE_CHAIN_INIT,
    SITE_CHAIN_LINK,
    SITE_REHASH_COPY,
    SITE_REHASH_SWAP,
];

const WRITER: u64 = 1 << 63;

/// Volatile writer gate: inserts and deletes share it, rehash takes it
/// exclusively. Readers never touch it.
struct Gate(AtomicU64);

impl Gate {
    fn enter(&self, pool: &PmemPool) {
        loop {
            let s = self.0.load(Ordering::Acquire);
            if s & WRITER == 0
                && self
                    .0
                    .compare_exchange(s, s + 1, Ordering::AcqRel, Ordering::Acquire)
                    .is_ok()
            {
                return;
            }
            pool.spin_hint();
        }
    }

    fn leave(&self) {
        self.0.fetch_sub(1, Ordering::AcqRel);
    }

    fn enter_exclusive(&self, pool: &PmemPool) {
        loop {
            let s = self.0.load(Ordering::Acquire);
            if s & WRITER == 0
                && self
                    .0
                    .compare_exchange(s, s | WRITER, Ordering::AcqRel, Ordering::Acquire)
                    .is_ok()
            {
                break;
            }
            pool.spin_hint();
        }
        while self.0.load(Ordering::Acquire) != WRITER {
            pool.spin_hint();
        }
    }

    fn leave_exclusive(&self) {
        self.0.fetch_and(!WRITER, Ordering::AcqRel);
    }
}

struct GateGuard<'a>(&'a Gate, bool);

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        if self.1 {
            self.0.leave_exclusive();
        } else {
            self.0.leave();
        }
    }
}

pub struct PClht {
    pool: Arc<PmemPool>,
    alloc: PmAllocator,
    locks: LockTable,
    gate: Gate,
    seed: u64,
    mutation: Option<Mutation>,
    rehashes: AtomicU64,
    chains: AtomicU64,
}

#[derive(Clone, Copy)]
struct Table {
    addr: PmAddr,
    n: u64,
}

impl Table {
    fn bucket(&self, i: u64) -> PmAddr {
        self.addr.add(64 * (i + 1))
    }
}

impl PClht {
    pub fn open(pool: Arc<PmemPool>, opts: &IndexOptions) -> Result<PClht, OpenError> {
        let magic = pool.load8(ROOT);
        if magic != 0 && magic != MAGIC {
            return Err(OpenError::BadMagic(magic));
        }
        let alloc = PmAllocator::open(pool.clone(), opts.track_allocations)?;
        alloc.set_recycling(opts.recycle);
        let seed = if magic == 0 {
            if opts.key_kind != KeyKind::Int {
                return Err(OpenError::UnsupportedKeyKind(opts.key_kind));
            }
            let t = new_table(&pool, &alloc, INITIAL_BUCKETS)?;
            pool.persist(t.addr, 64 * (t.n + 1));
            pool.store8(SITE_INIT, ROOT_TABLE, t.addr.0);
            pool.store8(SITE_INIT, ROOT_KIND, KeyKind::Int.code());
            pool.store8(SITE_INIT, ROOT_SEED, opts.seed);
            pool.store8(SITE_INIT, ROOT, MAGIC);
            pool.persist(ROOT, 32);
            opts.seed
        } else {
            if KeyKind::from_code(pool.load8(ROOT_KIND)) != Some(KeyKind::Int) {
                return Err(OpenError::Corrupt("bad key kind".into()));
            }
            pool.load8(ROOT_SEED)
        };
        let idx = PClht {
            pool,
            alloc,
            locks: LockTable::new(),
            gate: Gate(AtomicU64::new(0)),
            seed,
            mutation: opts.mutation,
            rehashes: AtomicU64::new(0),
            chains: AtomicU64::new(0),
        };
        let t = idx.table();
        if t.addr.is_null() || t.n == 0 {
            return Err(OpenError::Corrupt("missing table".into()));
        }
        idx.locks.reset_all();
        idx.clear_lock_words(t);
        Ok(idx)
    }

    /// Lock words are persisted as a side effect of flushing their line but
    /// carry no meaning across a restart.
    fn clear_lock_words(&self, t: Table) {
        for i in 0..t.n {
            let mut b = t.bucket(i);
            while !b.is_null() {
                if self.pool.load8(b.word(W_LOCK)) != 0 {
                    self.pool.store8(SITE_LOCK, b.word(W_LOCK), 0);
                }
                b = PmAddr(self.pool.load8(b.word(W_NEXT)));
            }
        }
    }

    fn table(&self) -> Table {
        let addr = PmAddr(self.pool.load8(ROOT_TABLE));
        let n = if addr.is_null() {
            0
        } else {
            self.pool.load8(addr)
        };
        Table { addr, n }
    }

    fn slot(&self, t: Table, k: u64) -> u64 {
        ((mix64(k ^ self.seed) as u128 * t.n as u128) >> 64) as u64
    }

    pub fn num_buckets(&self) -> u64 {
        self.table().n
    }

    fn lock_bucket(&self, b: PmAddr) {
        self.locks.lock(b.0, || self.pool.spin_hint());
        self.pool.store8(SITE_LOCK, b.word(W_LOCK), 1);
    }

    fn unlock_bucket(&self, b: PmAddr) {
        self.pool.store8(SITE_LOCK, b.word(W_LOCK), 0);
        self.locks.unlock(b.0);
    }

    fn insert_locked(&self, head: PmAddr, k: u64, v: Value) -> Result<usize, IndexError> {
        let pool = &*self.pool;
        let mut free: Option<(PmAddr, u64)> = None;
        let mut b = head;
        let mut last = head;
        let mut len = 0;
        while !b.is_null() {
            len += 1;
            for i in 0..SLOTS {
                let key = pool.load8(b.word(W_KEY + i));
                let val = pool.load8(b.word(W_VAL + i));
                if key == k && val != 0 {
                    return Err(IndexError::Exists);
                }
                if free.is_none() && (key == 0 || val == 0) {
                    free = Some((b, i));
                }
            }
            last = b;
            b = PmAddr(pool.load8(b.word(W_NEXT)));
        }
        let skip = self.mutation == Some(Mutation::ClhtSkipInsertPersist);
        if let Some((b, i)) = free {
            // A key without a value is a crash remnant; clear it so readers
            // never pair it with the value written next.
            if pool.load8(b.word(W_KEY + i)) != 0 {
                pool.store8(SITE_GHOST, b.word(W_KEY + i), 0);
            }
            pool.store8(SITE_VALUE, b.word(W_VAL + i), v);
            pool.store8(SITE_KEY, b.word(W_KEY + i), k);
            if !skip {
                pool.persist(b, 64);
            }
            return Ok(len);
        }
        let scope = smo_scope(
            pool,
            SmoKind::ClhtChain,
            self.chains.fetch_add(1, Ordering::Relaxed),
        );
        let nb = self.alloc.alloc(64, 64, "clht.bucket")?;
        pool.store8(SITE_CHAIN_INIT, nb.word(W_VAL), v);
        pool.store8(SITE_CHAIN_INIT, nb.word(W_KEY), k);
        pool.persist(nb, 64);
        pool.store8(SITE_CHAIN_LINK, last.word(W_NEXT), nb.0);
        if !skip {
            pool.persist(last, 64);
        }
        scope.finish();
        Ok(len + 1)
    }

    fn rehash(&self, old: Table) -> Result<(), IndexError> {
        let pool = &*self.pool;
        self.gate.enter_exclusive(pool);
        let _g = GateGuard(&self.gate, true);
        if self.table().addr != old.addr {
            return Ok(());
        }
        let scope = smo_scope(
            pool,
            SmoKind::ClhtRehash,
            self.rehashes.load(Ordering::Relaxed),
        );
        let new = new_table(pool, &self.alloc, old.n * 2)?;
        let mut dirty = vec![new.addr];
        let mut chains = Vec::new();
        for i in 0..old.n {
            let mut b = old.bucket(i);
            while !b.is_null() {
                for s in 0..SLOTS {
                    let k = pool.load8(b.word(W_KEY + s));
                    let v = pool.load8(b.word(W_VAL + s));
                    if k != 0 && v != 0 {
                        self.copy_entry(new, k, v, &mut dirty)?;
                    }
                }
                b = PmAddr(pool.load8(b.word(W_NEXT)));
                if !b.is_null() {
                    chains.push(b);
                }
            }
        }
        dirty.sort();
        dirty.dedup();
        for line in &dirty {
            pool.flush_line(*line);
        }
        pool.fence();
        pool.store8(SITE_REHASH_SWAP, ROOT_TABLE, new.addr.0);
        pool.persist(ROOT_TABLE, 8);
        self.rehashes.fetch_add(1, Ordering::Relaxed);
        scope.finish();
        self.alloc.free(old.addr, 64 * (old.n + 1), 64);
        for c in chains {
            self.alloc.free(c, 64, 64);
        }
        Ok(())
    }

    fn copy_entry(
        &self,
        t: Table,
        k: u64,
        v: u64,
        dirty: &mut Vec<PmAddr>,
    ) -> Result<(), IndexError> {
        let pool = &*self.pool;
        let mut b = t.bucket(self.slot(t, k));
        loop {
            for s in 0..SLOTS {
                if pool.load8(b.word(W_KEY + s)) == 0 {
                    pool.store8(SITE_REHASH_COPY, b.word(W_VAL + s), v);
                    pool.store8(SITE_REHASH_COPY, b.word(W_KEY + s), k);
                    dirty.push(b);
                    return Ok(());
                }
            }
            let next = PmAddr(pool.load8(b.word(W_NEXT)));
            if next.is_null() {
                let nb = self.alloc.alloc(64, 64, "clht.bucket")?;
                pool.store8(SITE_REHASH_COPY, b.word(W_NEXT), nb.0);
                dirty.push(b);
                b = nb;
            } else {
                b = next;
            }
        }
    }

    fn walk(&self, t: Table, mut f: impl FnMut(u64, u64)) {
        for i in 0..t.n {
            let mut b = t.bucket(i);
            while !b.is_null() {
                for s in 0..SLOTS {
                    let k = self.pool.load8(b.word(W_KEY + s));
                    let v = self.pool.load8(b.word(W_VAL + s));
                    if k != 0 && v != 0 {
                        f(k, v);
                    }
                }
                b = PmAddr(self.pool.load8(b.word(W_NEXT)));
            }
        }
    }

    /// All live pairs, unordered. Quiesced only.
    pub fn entries(&self) -> Vec<(u64, u64)> {
        let mut out = Vec::new();
        self.walk(self.table(), |k, v| out.push((k, v)));
        out
    }
}

fn new_table(pool: &PmemPool, alloc: &PmAllocator, n: u64) -> Result<Table, IndexError> {
    let addr = alloc.alloc(64 * (n + 1), 64, "clht.table")?;
    pool.store8(SITE_REHASH_COPY, addr, n);
    Ok(Table { addr, n })
}

impl PmIndex for PClht {
    fn kind(&self) -> IndexKind {
        IndexKind::Clht
    }

    fn key_kind(&self) -> KeyKind {
        KeyKind::Int
    }

    fn insert(&self, key: &Key, value: Value) -> Result<(), IndexError> {
        check_pair(KeyKind::Int, key, value)?;
        let Key::Int(k) = *key else { unreachable!() };
        let pool = &*self.pool;
        self.gate.enter(pool);
        let guard = GateGuard(&self.gate, false);
        let t = self.table();
        let head = t.bucket(self.slot(t, k));
        self.lock_bucket(head);
        let res = self.insert_locked(head, k, value);
        self.unlock_bucket(head);
        drop(guard);
        match res {
            Ok(len) if len >= REHASH_CHAIN => {
                // The insert itself is already durable; a failed rehash
                // leaves the old table in place.
                let _ = self.rehash(t);
                Ok(())
            }
            Ok(_) => Ok(()),
            Err(e) => Err(e),
        }
    }

    fn lookup(&self, key: &Key) -> Option<Value> {
        let Key::Int(k) = *key else { return None };
        if k == 0 {
            return None;
        }
        let pool = &*self.pool;
        let t = self.table();
        let mut b = t.bucket(self.slot(t, k));
        while !b.is_null() {
            for s in 0..SLOTS {
                if pool.load8(b.word(W_KEY + s)) == k {
                    let v = pool.load8(b.word(W_VAL + s));
                    if v != 0 && pool.load8(b.word(W_KEY + s)) == k {
                        return Some(v);
                    }
                }
            }
            b = PmAddr(pool.load8(b.word(W_NEXT)));
        }
        None
    }

    fn delete(&self, key: &Key) -> Result<(), IndexError> {
        check_key(KeyKind::Int, key)?;
        let Key::Int(k) = *key else { unreachable!() };
        let pool = &*self.pool;
        self.gate.enter(pool);
        let _guard = GateGuard(&self.gate, false);
        let t = self.table();
        let head = t.bucket(self.slot(t, k));
        self.lock_bucket(head);
        let mut b = head;
        'chain: while !b.is_null() {
            for s in 0..SLOTS {
                if pool.load8(b.word(W_KEY + s)) == k && pool.load8(b.word(W_VAL + s)) != 0 {
                    pool.store8(SITE_DEL_KEY, b.word(W_KEY + s), 0);
                    pool.store8(SITE_DEL_VALUE, b.word(W_VAL + s), 0);
                    pool.persist(b, 64);
                    break 'chain;
                }
            }
            b = PmAddr(pool.load8(b.word(W_NEXT)));
        }
        self.unlock_bucket(head);
        Ok(())
    }

    fn range_query(&self, _lo: &Key, _hi: &Key) -> Result<Vec<(Key, Value)>, IndexError> {
        Err(IndexError::Unsupported)
    }

    fn pool(&self) -> &Arc<PmemPool> {
        &self.pool
    }

    fn allocator(&self) -> &PmAllocator {
        &self.alloc
    }

    fn reachability(&self, allocs: &[Allocation]) -> ReachabilityReport {
        let t = self.table();
        let mut roots = vec![t.addr];
        for i in 0..t.n {
            let next = PmAddr(self.pool.load8(t.bucket(i).word(W_NEXT)));
            if !next.is_null() {
                roots.push(next);
            }
        }
        reachability_report(allocs, &roots, |b| {
            if b == t.addr {
                return Vec::new();
            }
            let next = PmAddr(self.pool.load8(b.word(W_NEXT)));
            if next.is_null() {
                Vec::new()
            } else {
                vec![next]
            }
        })
    }

    fn check_structure(&self) -> Result<(), String> {
        let t = self.table();
        if t.n == 0 {
            return Err("empty table".into());
        }
        let mut err = None;
        for i in 0..t.n {
            let mut b = t.bucket(i);
            while !b.is_null() {
                if self.pool.load8(b.word(W_LOCK)) != 0 {
                    err.get_or_insert(format!("bucket {b:?} left locked"));
                }
                for s in 0..SLOTS {
                    let k = self.pool.load8(b.word(W_KEY + s));
                    if k != 0 && self.pool.load8(b.word(W_VAL + s)) != 0 && self.slot(t, k) != i {
                        err.get_or_insert(format!(
                            "key {k} in bucket {i}, hashes to {}",
                            self.slot(t, k)
                        ));
                    }
                }
                b = PmAddr(self.pool.load8(b.word(W_NEXT)));
            }
        }
        err.map_or(Ok(()), Err)
    }

    fn stats(&self) -> Vec<(&'static str, u64)> {
        vec![
            ("rehashes", self.rehashes.load(Ordering::Relaxed)),
            ("chain_appends", self.chains.load(Ordering::Relaxed)),
            ("buckets", self.table().n),
        ]
    }
}
