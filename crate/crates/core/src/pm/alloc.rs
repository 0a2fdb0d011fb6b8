//! Pool-backed bump allocator with allocation tracing and leak reporting.
//!
//! The heap starts at [`HEAP_START`]. Space is reserved from the pool in
//! 1 MiB chunks; the end of the reserved range is a persisted high-water
//! mark in the allocator header, so a reopened pool never re-issues space
//! that a crashed run may have handed out. Frees are deferred and only
//! recycled at [`PmAllocator::quiesce`].

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::pool::{PmAddr, PmemPool, Site};

/// First heap byte. Everything below belongs to root records and the
/// allocator header.
pub const HEAP_START: u64 = 4096;
const HEADER: PmAddr = PmAddr(64);
const MAGIC: u64 = u64::from_le_bytes(*b"PMALLOC1");
const CHUNK: u64 = 1 << 20;
const MAX_ALIGN: u64 = 4096;

const SITE_MAGIC: Site = Site::new("alloc.magic").no_preempt();
const SITE_RESERVE: Site = Site::new("alloc.reserve").no_preempt();

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AllocError {
    #[error("pool exhausted: cannot allocate {len} bytes")]
    OutOfSpace { len: u64 },
    #[error("invalid allocation request: len {len}, align {align}")]
    BadRequest { len: u64, align: u64 },
    #[error("allocator header is corrupt")]
    BadHeader,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Allocation {
    pub addr: PmAddr,
    pub len: u64,
    pub align: u64,
    pub tag: &'static str,
}

/// One row of the JSON leak report.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakEntry {
    pub addr: u64,
    pub len: u64,
    pub tag: String,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

fn align_up(x: u64, a: u64) -> u64 {
    (x + a - 1) & !(a - 1)
}

pub struct PmAllocator {
    pool: Arc<PmemPool>,
    next: AtomicU64,
    limit: AtomicU64,
    reserve: Mutex<()>,
    recycle: AtomicBool,
    deferred: Mutex<Vec<(u64, u64, u64)>>,
    free: Mutex<HashMap<(u64, u64), Vec<u64>>>,
    records: Option<Mutex<BTreeMap<u64, Allocation>>>,
}

impl std::fmt::Debug for PmAllocator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PmAllocator")
            .field("next", &self.next.load(Ordering::Relaxed))
            .field("limit", &self.limit.load(Ordering::Relaxed))
            .finish()
    }
}

impl PmAllocator {
    /// Formats the allocator header on a fresh pool or resumes from the
    /// persisted high-water mark. `track` keeps an in-memory allocation map
    /// for [`PmAllocator::allocations`].
    pub fn open(pool: Arc<PmemPool>, track: bool) -> Result<PmAllocator, AllocError> {
        let magic = pool.load8(HEADER);
        let end = if magic == 0 {
            pool.store8(SITE_MAGIC, HEADER, MAGIC);
            pool.store8(SITE_RESERVE, HEADER.word(1), HEAP_START);
            pool.persist(HEADER, 16);
            pool.log_alloc(PmAddr(0), HEAP_START);
            HEAP_START
        } else if magic == MAGIC {
            let end = pool.load8(HEADER.word(1));
            if end < HEAP_START || end > pool.size() {
                return Err(AllocError::BadHeader);
            }
            // Everything reserved before the restart counts as allocated.
            pool.log_alloc(PmAddr(0), end);
            end
        } else {
            return Err(AllocError::BadHeader);
        };
        Ok(PmAllocator {
            pool,
            next: AtomicU64::new(end),
            limit: AtomicU64::new(end),
            reserve: Mutex::new(()),
            recycle: AtomicBool::new(true),
            deferred: Mutex::new(Vec::new()),
            free: Mutex::new(HashMap::new()),
            records: track.then(|| Mutex::new(BTreeMap::new())),
        })
    }

    pub fn pool(&self) -> &Arc<PmemPool> {
        &self.pool
    }

    /// Enables or disables reuse of freed space. Crash campaigns disable it
    /// so addresses stay stable across replays.
    pub fn set_recycling(&self, on: bool) {
        self.recycle.store(on, Ordering::Release);
    }

    pub fn alloc(&self, len: u64, align: u64, tag: &'static str) -> Result<PmAddr, AllocError> {
        if len == 0 || !align.is_power_of_two() || align > MAX_ALIGN {
            return Err(AllocError::BadRequest { len, align });
        }
        let align = align.max(8);
        let len = align_up(len, 8);
        let addr = match self.take_free(len, align) {
            Some(a) => a,
            None => self.bump(len, align)?,
        };
        self.pool.log_alloc(addr, len);
        if let Some(r) = &self.records {
            lock(r).insert(
                addr.0,
                Allocation {
                    addr,
                    len,
                    align,
                    tag,
                },
            );
        }
        Ok(addr)
    }

    fn take_free(&self, len: u64, align: u64) -> Option<PmAddr> {
        if !self.recycle.load(Ordering::Acquire) {
            return None;
        }
        let mut free = lock(&self.free);
        let addr = free.get_mut(&(len, align))?.pop()?;
        drop(free);
        // Recycled memory is handed out zeroed like fresh memory.
        for i in 0..len / 8 {
            self.pool.store8(
                Site::new("alloc.zero").no_preempt(),
                PmAddr(addr).word(i),
                0,
            );
        }
        Some(PmAddr(addr))
    }

    fn bump(&self, len: u64, align: u64) -> Result<PmAddr, AllocError> {
        loop {
            let cur = self.next.load(Ordering::Acquire);
            let start = align_up(cur, align);
            let end = start + len;
            if end > self.limit.load(Ordering::Acquire) {
                self.reserve_to(end, len)?;
                continue;
            }
            if self
                .next
                .compare_exchange(cur, end, Ordering::AcqRel, Ordering::Acquire)
                .is_ok()
            {
                return Ok(PmAddr(start));
            }
        }
    }

    fn reserve_to(&self, end: u64, len: u64) -> Result<(), AllocError> {
        let _g = lock(&self.reserve);
        if end <= self.limit.load(Ordering::Acquire) {
            return Ok(());
        }
        if end > self.pool.size() {
            return Err(AllocError::OutOfSpace { len });
        }
        let new_limit = align_up(end, CHUNK).min(self.pool.size());
        self.pool.store8(SITE_RESERVE, HEADER.word(1), new_limit);
        self.pool.persist(HEADER.word(1), 8);
        self.limit.store(new_limit, Ordering::Release);
        Ok(())
    }

    /// Defers reuse of `[addr, addr+len)` until the next quiesce point.
    pub fn free(&self, addr: PmAddr, len: u64, align: u64) {
        let align = align.max(8);
        let len = align_up(len, 8);
        if let Some(r) = &self.records {
            lock(r).remove(&addr.0);
        }
        lock(&self.deferred).push((addr.0, len, align));
    }

    /// Moves deferred frees onto the free lists. Callers guarantee no thread
    /// still holds a reference into freed memory.
    pub fn quiesce(&self) {
        if !self.recycle.load(Ordering::Acquire) {
            return;
        }
        let deferred = std::mem::take(&mut *lock(&self.deferred));
        let mut free = lock(&self.free);
        for (addr, len, align) in deferred {
            free.entry((len, align)).or_default().push(addr);
        }
    }

    /// Bytes handed out by the bump pointer so far.
    pub fn high_water(&self) -> u64 {
        self.next.load(Ordering::Acquire)
    }

    /// Live allocations (only when tracking is enabled).
    pub fn allocations(&self) -> Vec<Allocation> {
        self.records
            .as_ref()
            .map(|r| lock(r).values().copied().collect())
            .unwrap_or_default()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ReachabilityReport {
    pub reachable: Vec<Allocation>,
    pub leaked: Vec<Allocation>,
    /// Addresses the walker produced that fall outside every allocation.
    pub corrupt: Vec<PmAddr>,
}

impl ReachabilityReport {
    pub fn leak_report(&self) -> Vec<LeakEntry> {
        self.leaked
            .iter()
            .map(|a| LeakEntry {
                addr: a.addr.0,
                len: a.len,
                tag: a.tag.to_string(),
            })
            .collect()
    }

    pub fn leak_report_json(&self) -> String {
        serde_json::to_string_pretty(&self.leak_report()).expect("leak report serializes")
    }
}

/// Partitions `allocs` into reachable and leaked by walking the object graph
/// from `roots`. `walker` returns the outgoing pointers of the object that
/// contains the given address.
pub fn reachability_report(
    allocs: &[Allocation],
    roots: &[PmAddr],
    mut walker: impl FnMut(PmAddr) -> Vec<PmAddr>,
) -> ReachabilityReport {
    let by_start: BTreeMap<u64, &Allocation> = allocs.iter().map(|a| (a.addr.0, a)).collect();
    let containing = |p: PmAddr| {
        by_start
            .range(..=p.0)
            .next_back()
            .map(|(_, a)| *a)
            .filter(|a| p.0 < a.addr.0 + a.len)
    };
    let mut seen: HashSet<u64> = HashSet::new();
    let mut corrupt = Vec::new();
    let mut stack: Vec<PmAddr> = roots.to_vec();
    while let Some(p) = stack.pop() {
        if p.is_null() {
            continue;
        }
        match containing(p) {
            Some(a) => {
                if seen.insert(a.addr.0) {
                    stack.extend(walker(p));
                }
            }
            None => corrupt.push(p),
        }
    }
    let (reachable, leaked) = allocs.iter().partition(|a| seen.contains(&a.addr.0));
    corrupt.sort();
    corrupt.dedup();
    ReachabilityReport {
        reachable,
        leaked,
        corrupt,
    }
}
