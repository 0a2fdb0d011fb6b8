//! Shadow persistent memory with x86-like persistence semantics.
//!
//! A pool is a flat, zero-initialized array of 8-byte words addressed by
//! byte offset. Index code reads and writes the *volatile* view. When
//! tracking is enabled the pool also maintains a *durable* image that only
//! changes when a thread fences cache lines it flushed earlier:
//!
//! * `store8` / `cas8` are failure-atomic at word granularity and land in the
//!   volatile view only.
//! * `flush_line` (clwb) captures the 64-byte line as it is at that instant
//!   and queues the capture on the calling thread.
//! * `fence` (mfence) makes the calling thread's queued captures durable.
//!
//! With [`Tracking::Traced`] every store, flush, fence, allocation and
//! operation boundary is appended to an ordered event log, from which crash
//! views under the adversarial policy are derived.

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::ops::{Add, AddAssign, Sub};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const WORD_SIZE: u64 = 8;
pub const LINE_SIZE: u64 = 64;
pub const WORDS_PER_LINE: usize = 8;

/// Granularity at which snapshots track touched memory.
pub const PAGE_SIZE: u64 = 64 * 1024;
const PAGE_WORDS: usize = (PAGE_SIZE / WORD_SIZE) as usize;
const PENDING_SHARDS: usize = 64;

/// Default address space: 4 GiB, backed on demand by the OS.
pub const DEFAULT_POOL_SIZE: u64 = 4 << 30;

const SNAPSHOT_MAGIC: &[u8; 8] = b"PMPOOL01";

/// Byte offset into a pool.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PmAddr(pub u64);

impl PmAddr {
    pub const NULL: PmAddr = PmAddr(0);

    pub fn offset(self) -> u64 {
        self.0
    }

    pub fn is_null(self) -> bool {
        self.0 == 0
    }

    /// Cache line index of this address.
    pub fn line(self) -> u64 {
        self.0 / LINE_SIZE
    }

    #[allow(clippy::should_implement_trait)]
    pub fn add(self, bytes: u64) -> PmAddr {
        PmAddr(self.0 + bytes)
    }

    /// Address of the `i`-th word starting at `self`.
    pub fn word(self, i: u64) -> PmAddr {
        PmAddr(self.0 + i * WORD_SIZE)
    }
}

impl fmt::Debug for PmAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "pm:{:#x}", self.0)
    }
}

impl fmt::Display for PmAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

const SITE_VOLATILE: u8 = 1;
const SITE_PUBLISH: u8 = 2;
const SITE_NO_PREEMPT: u8 = 4;
const SITE_HOT: u8 = 8;

/// Static label attached to every store so that traces, crash coverage and
/// the durability checker can reason about where a store came from.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Site {
    pub name: &'static str,
    flags: u8,
}

impl Site {
    pub const fn new(name: &'static str) -> Site {
        Site { name, flags: 0 }
    }

    /// The word is semantically volatile (lock words, obsolete marks) and is
    /// excluded from durability checks.
    pub const fn volatile(self) -> Site {
        Site {
            flags: self.flags | SITE_VOLATILE,
            ..self
        }
    }

    /// The store makes new state reachable to other threads.
    pub const fn publish(self) -> Site {
        Site {
            flags: self.flags | SITE_PUBLISH,
            ..self
        }
    }

    /// Schedulers must not switch threads right after this store.
    pub const fn no_preempt(self) -> Site {
        Site {
            flags: self.flags | SITE_NO_PREEMPT,
            ..self
        }
    }

    /// The store opens a window (first step of a multi-step update) that
    /// schedulers should preempt aggressively.
    pub const fn hot(self) -> Site {
        Site {
            flags: self.flags | SITE_HOT,
            ..self
        }
    }

    pub fn is_volatile(&self) -> bool {
        self.flags & SITE_VOLATILE != 0
    }

    pub fn is_publish(&self) -> bool {
        self.flags & SITE_PUBLISH != 0
    }

    pub fn is_preemptible(&self) -> bool {
        self.flags & SITE_NO_PREEMPT == 0
    }

    pub fn is_hot(&self) -> bool {
        self.flags & SITE_HOT != 0
    }
}

impl fmt::Debug for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name)
    }
}

/// Site used by tests and tools that poke the pool directly.
pub const RAW_SITE: Site = Site::new("raw");

#[derive(Clone, Debug, PartialEq)]
pub enum EventKind {
    Store {
        addr: PmAddr,
        old: u64,
        new: u64,
        site: Site,
    },
    Flush {
        line: u64,
    },
    Fence,
    Alloc {
        addr: PmAddr,
        len: u64,
    },
    OpBegin {
        op_id: u64,
    },
    OpEnd {
        op_id: u64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PmEvent {
    pub seq: u64,
    pub thread: u32,
    pub kind: EventKind,
}

/// How much persistence state a pool maintains.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tracking {
    /// Volatile view and instruction counters only.
    Counters,
    /// Adds the durable image; strict crash views are available.
    Shadow,
    /// Adds the full event log; adversarial crash views are available.
    Traced,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CrashPolicy {
    /// Exactly the stores covered by a fenced flush survive.
    Strict,
    /// Additionally, each store after its line's durable point survives
    /// with probability 1/2, chosen per (seq, word) from `seed`.
    Adversarial { seed: u64 },
}

#[derive(Clone, Copy, Debug)]
pub struct PoolConfig {
    pub size: u64,
    pub tracking: Tracking,
}

impl PoolConfig {
    pub fn new(size: u64, tracking: Tracking) -> PoolConfig {
        PoolConfig { size, tracking }
    }
}

impl Default for PoolConfig {
    fn default() -> PoolConfig {
        PoolConfig {
            size: DEFAULT_POOL_SIZE,
            tracking: Tracking::Counters,
        }
    }
}

#[derive(Debug, Error)]
pub enum PmError {
    #[error("pool was created without shadow tracking")]
    NotTracked,
    #[error("adversarial views need a traced pool")]
    NotTraced,
    #[error("snapshot has a bad magic number")]
    BadMagic,
    #[error("snapshot truncated: expected {expected} bytes of data, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("pool size {0} is not a positive multiple of {PAGE_SIZE}")]
    BadSize(u64),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// clwb / mfence / store instruction counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub clwb: u64,
    pub mfence: u64,
    pub stores: u64,
}

impl Add for Counters {
    type Output = Counters;
    fn add(self, o: Counters) -> Counters {
        Counters {
            clwb: self.clwb + o.clwb,
            mfence: self.mfence + o.mfence,
            stores: self.stores + o.stores,
        }
    }
}

impl AddAssign for Counters {
    fn add_assign(&mut self, o: Counters) {
        *self = *self + o;
    }
}

impl Sub for Counters {
    type Output = Counters;
    fn sub(self, o: Counters) -> Counters {
        Counters {
            clwb: self.clwb - o.clwb,
            mfence: self.mfence - o.mfence,
            stores: self.stores - o.stores,
        }
    }
}

/// Per-line persistence state, derived on demand.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LineState {
    pub line: u64,
    /// Bit `i` set when word `i` of the line differs from the durable image.
    pub dirty_words: u8,
    /// Some thread has flushed the line but not fenced yet.
    pub flush_pending: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HookVerdict {
    Continue,
    Crash,
}

/// Callback run after every logged store. Returning `Crash` unwinds the
/// calling thread without running the rest of its operation.
pub trait CrashHook: Send + Sync {
    fn on_store(&self, event: &PmEvent) -> HookVerdict;

    /// Called from spin-wait loops in index code.
    fn on_spin(&self) -> HookVerdict {
        HookVerdict::Continue
    }

    /// Called once the pool is marked crashed, before the crashing thread
    /// unwinds. Threads parked by the hook may be released from here.
    fn after_crash(&self) {}
}

impl<F> CrashHook for F
where
    F: Fn(&PmEvent) -> HookVerdict + Send + Sync,
{
    fn on_store(&self, event: &PmEvent) -> HookVerdict {
        self(event)
    }
}

/// Unwind payload of a simulated crash.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CrashSignal {
    pub seq: u64,
}

/// True if a `catch_unwind` payload is a simulated crash.
pub fn is_crash_signal(payload: &(dyn std::any::Any + Send)) -> bool {
    payload.is::<CrashSignal>()
}

static NEXT_THREAD: AtomicU32 = AtomicU32::new(0);
static NEXT_POOL: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static THREAD_INDEX: u32 = NEXT_THREAD.fetch_add(1, Ordering::Relaxed);
    static THREAD_COUNTERS: Cell<Counters> = const { Cell::new(Counters { clwb: 0, mfence: 0, stores: 0 }) };
    static SCOPES: RefCell<Vec<(u64, u64)>> = const { RefCell::new(Vec::new()) };
}

/// Small per-thread identifier used in events.
pub fn thread_index() -> u32 {
    THREAD_INDEX.with(|t| *t)
}

/// Instruction counts issued by the calling thread across all pools.
pub fn thread_counters() -> Counters {
    THREAD_COUNTERS.with(|c| c.get())
}

fn bump_thread(f: impl FnOnce(&mut Counters)) {
    THREAD_COUNTERS.with(|c| {
        let mut v = c.get();
        f(&mut v);
        c.set(v);
    });
}

struct Capture {
    line: u64,
    seq: u64,
    words: [u64; WORDS_PER_LINE],
}

struct Shadow {
    durable: Box<[AtomicU64]>,
    /// Seq of the flush whose capture currently backs each durable line.
    line_seq: Box<[AtomicU64]>,
    pending: Box<[Mutex<Vec<Capture>>]>,
    apply: Mutex<()>,
}

fn zeroed_words(n: usize) -> Box<[AtomicU64]> {
    let b = Box::<[AtomicU64]>::new_zeroed_slice(n);
    // SAFETY: the all-zero bit pattern is a valid AtomicU64.
    unsafe { b.assume_init() }
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

/// Deterministic 64-bit mixer (splitmix64 finalizer).
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Whether the adversarial policy with `seed` lets the store `seq` to the
/// word at `addr` reach the persisted view.
pub fn adversarial_keeps(seed: u64, seq: u64, addr: PmAddr) -> bool {
    mix64(seed ^ mix64(seq ^ mix64(addr.0 / WORD_SIZE))) & 1 == 1
}

pub struct PmemPool {
    id: u64,
    size: u64,
    tracking: Tracking,
    words: Box<[AtomicU64]>,
    touched: Box<[AtomicU64]>,
    shadow: Option<Shadow>,
    log: Option<Mutex<Vec<PmEvent>>>,
    seq: AtomicU64,
    clwb: AtomicU64,
    mfence: AtomicU64,
    stores: AtomicU64,
    hook: RwLock<Option<Arc<dyn CrashHook>>>,
    has_hook: AtomicBool,
    crashed: AtomicBool,
    crash_seq: AtomicU64,
}

impl fmt::Debug for PmemPool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PmemPool")
            .field("size", &self.size)
            .field("tracking", &self.tracking)
            .field("crashed", &self.is_crashed())
            .finish()
    }
}

impl PmemPool {
    pub fn new(config: PoolConfig) -> Result<PmemPool, PmError> {
        let size = config.size;
        if size == 0 || !size.is_multiple_of(PAGE_SIZE) {
            return Err(PmError::BadSize(size));
        }
        let nwords = (size / WORD_SIZE) as usize;
        let npages = (size / PAGE_SIZE) as usize;
        let shadow = match config.tracking {
            Tracking::Counters => None,
            Tracking::Shadow | Tracking::Traced => Some(Shadow {
                durable: zeroed_words(nwords),
                line_seq: zeroed_words((size / LINE_SIZE) as usize),
                pending: (0..PENDING_SHARDS)
                    .map(|_| Mutex::new(Vec::new()))
                    .collect(),
                apply: Mutex::new(()),
            }),
        };
        Ok(PmemPool {
            id: NEXT_POOL.fetch_add(1, Ordering::Relaxed),
            size,
            tracking: config.tracking,
            words: zeroed_words(nwords),
            touched: zeroed_words(npages.div_ceil(64)),
            shadow,
            log: (config.tracking == Tracking::Traced).then(|| Mutex::new(Vec::new())),
            seq: AtomicU64::new(1),
            clwb: AtomicU64::new(0),
            mfence: AtomicU64::new(0),
            stores: AtomicU64::new(0),
            hook: RwLock::new(None),
            has_hook: AtomicBool::new(false),
            crashed: AtomicBool::new(false),
            crash_seq: AtomicU64::new(0),
        })
    }

    /// Opens a pool whose volatile and durable contents both equal `image`,
    /// as after a restart from that persisted state.
    pub fn from_image(image: &PoolImage, tracking: Tracking) -> Result<PmemPool, PmError> {
        let pool = PmemPool::new(PoolConfig::new(image.size, tracking))?;
        for (&page, data) in &image.pages {
            let base = page as usize * PAGE_WORDS;
            for (i, &w) in data.iter().enumerate() {
                if w != 0 {
                    pool.words[base + i].store(w, Ordering::Relaxed);
                    if let Some(sh) = &pool.shadow {
                        sh.durable[base + i].store(w, Ordering::Relaxed);
                    }
                }
            }
            pool.mark_touched(page * PAGE_SIZE);
        }
        Ok(pool)
    }

    pub fn size(&self) -> u64 {
        self.size
    }

    pub fn tracking(&self) -> Tracking {
        self.tracking
    }

    #[inline]
    fn index(&self, addr: PmAddr) -> usize {
        assert!(
            addr.0.is_multiple_of(WORD_SIZE) && addr.0 < self.size,
            "pm fault: unaligned or out-of-bounds word access at {addr:?} (pool size {:#x})",
            self.size
        );
        (addr.0 / WORD_SIZE) as usize
    }

    #[inline]
    fn mark_touched(&self, offset: u64) {
        let page = offset / PAGE_SIZE;
        let (w, bit) = ((page / 64) as usize, page % 64);
        let mask = 1u64 << bit;
        if self.touched[w].load(Ordering::Relaxed) & mask == 0 {
            self.touched[w].fetch_or(mask, Ordering::Relaxed);
        }
    }

    fn touched_pages(&self) -> Vec<u64> {
        let mut out = Vec::new();
        for (w, bits) in self.touched.iter().enumerate() {
            let mut b = bits.load(Ordering::Relaxed);
            while b != 0 {
                let t = b.trailing_zeros() as u64;
                out.push(w as u64 * 64 + t);
                b &= b - 1;
            }
        }
        out
    }

    #[inline]
    pub fn load8(&self, addr: PmAddr) -> u64 {
        let i = self.index(addr);
        self.words[i].load(Ordering::Acquire)
    }

    #[inline]
    fn next_seq(&self) -> u64 {
        self.seq.fetch_add(1, Ordering::Relaxed)
    }

    #[inline]
    fn count_store(&self) {
        self.stores.fetch_add(1, Ordering::Relaxed);
        bump_thread(|c| c.stores += 1);
    }

    /// 8-byte failure-atomic store to the volatile view.
    pub fn store8(&self, site: Site, addr: PmAddr, value: u64) {
        let i = self.index(addr);
        if self.is_crashed() {
            self.words[i].store(value, Ordering::Release);
            return;
        }
        self.count_store();
        self.mark_touched(addr.0);
        let event = if let Some(log) = &self.log {
            let mut log = lock(log);
            let old = self.words[i].swap(value, Ordering::AcqRel);
            let ev = PmEvent {
                seq: self.next_seq(),
                thread: thread_index(),
                kind: EventKind::Store {
                    addr,
                    old,
                    new: value,
                    site,
                },
            };
            log.push(ev.clone());
            Some(ev)
        } else {
            let old = self.words[i].swap(value, Ordering::AcqRel);
            self.has_hook.load(Ordering::Acquire).then(|| PmEvent {
                seq: self.next_seq(),
                thread: thread_index(),
                kind: EventKind::Store {
                    addr,
                    old,
                    new: value,
                    site,
                },
            })
        };
        if let Some(ev) = event {
            self.after_store(&ev);
        }
    }

    /// Compare-and-swap on one word. A successful swap is a store event.
    pub fn cas8(&self, site: Site, addr: PmAddr, expected: u64, new: u64) -> Result<u64, u64> {
        let i = self.index(addr);
        if self.is_crashed() {
            return self.words[i].compare_exchange(
                expected,
                new,
                Ordering::AcqRel,
                Ordering::Acquire,
            );
        }
        let event = if let Some(log) = &self.log {
            let mut log = lock(log);
            self.words[i].compare_exchange(expected, new, Ordering::AcqRel, Ordering::Acquire)?;
            let ev = PmEvent {
                seq: self.next_seq(),
                thread: thread_index(),
                kind: EventKind::Store {
                    addr,
                    old: expected,
                    new,
                    site,
                },
            };
            log.push(ev.clone());
            Some(ev)
        } else {
            self.words[i].compare_exchange(expected, new, Ordering::AcqRel, Ordering::Acquire)?;
            self.has_hook.load(Ordering::Acquire).then(|| PmEvent {
                seq: self.next_seq(),
                thread: thread_index(),
                kind: EventKind::Store {
                    addr,
                    old: expected,
                    new,
                    site,
                },
            })
        };
        self.count_store();
        self.mark_touched(addr.0);
        if let Some(ev) = event {
            self.after_store(&ev);
        }
        Ok(expected)
    }

    fn after_store(&self, ev: &PmEvent) {
        if !self.has_hook.load(Ordering::Acquire) {
            return;
        }
        let verdict = {
            let hook = self.hook.read().unwrap_or_else(|e| e.into_inner());
            match hook.as_ref() {
                Some(h) => h.on_store(ev),
                None => HookVerdict::Continue,
            }
        };
        if verdict == HookVerdict::Crash {
            self.crash_now(ev.seq);
        }
    }

    fn crash_now(&self, seq: u64) -> ! {
        if !self.crashed.swap(true, Ordering::AcqRel) {
            self.crash_seq.store(seq, Ordering::Release);
            let hook = self.hook.read().unwrap_or_else(|e| e.into_inner());
            if let Some(h) = hook.as_ref() {
                h.after_crash();
            }
        }
        std::panic::resume_unwind(Box::new(CrashSignal { seq }))
    }

    /// Marks the pool crashed without unwinding: nothing issued afterwards
    /// reaches the durable image or the log.
    pub fn freeze(&self) {
        if !self.crashed.swap(true, Ordering::AcqRel) {
            self.crash_seq
                .store(self.seq.load(Ordering::Acquire), Ordering::Release);
        }
    }

    pub fn is_crashed(&self) -> bool {
        self.crashed.load(Ordering::Acquire)
    }

    /// Seq of the store after which the crash was injected.
    pub fn crash_seq(&self) -> Option<u64> {
        self.is_crashed()
            .then(|| self.crash_seq.load(Ordering::Acquire))
    }

    /// Schedules write-back of the line containing `addr` (clwb).
    pub fn flush_line(&self, addr: PmAddr) {
        assert!(
            addr.0 < self.size,
            "pm fault: flush out of bounds at {addr:?}"
        );
        self.clwb.fetch_add(1, Ordering::Relaxed);
        bump_thread(|c| c.clwb += 1);
        if self.is_crashed() {
            return;
        }
        let Some(sh) = &self.shadow else { return };
        let line = addr.line();
        let base = (line * LINE_SIZE / WORD_SIZE) as usize;
        let capture = |seq| {
            let mut words = [0u64; WORDS_PER_LINE];
            for (j, w) in words.iter_mut().enumerate() {
                *w = self.words[base + j].load(Ordering::Acquire);
            }
            Capture { line, seq, words }
        };
        let shard = &sh.pending[thread_index() as usize % PENDING_SHARDS];
        if let Some(log) = &self.log {
            let mut log = lock(log);
            let seq = self.next_seq();
            log.push(PmEvent {
                seq,
                thread: thread_index(),
                kind: EventKind::Flush { line },
            });
            lock(shard).push(capture(seq));
        } else {
            let seq = self.next_seq();
            lock(shard).push(capture(seq));
        }
    }

    /// Makes every line this thread flushed so far durable (mfence).
    pub fn fence(&self) {
        self.mfence.fetch_add(1, Ordering::Relaxed);
        bump_thread(|c| c.mfence += 1);
        if self.is_crashed() {
            return;
        }
        let Some(sh) = &self.shadow else { return };
        let shard = &sh.pending[thread_index() as usize % PENDING_SHARDS];
        if let Some(log) = &self.log {
            let mut log = lock(log);
            let seq = self.next_seq();
            log.push(PmEvent {
                seq,
                thread: thread_index(),
                kind: EventKind::Fence,
            });
            let caps = std::mem::take(&mut *lock(shard));
            self.apply(sh, caps);
        } else {
            let caps = std::mem::take(&mut *lock(shard));
            if !caps.is_empty() {
                let _g = lock(&sh.apply);
                self.apply(sh, caps);
            }
        }
    }

    fn apply(&self, sh: &Shadow, caps: Vec<Capture>) {
        for cap in caps {
            let l = cap.line as usize;
            if cap.seq > sh.line_seq[l].load(Ordering::Relaxed) {
                let base = l * WORDS_PER_LINE;
                for (j, w) in cap.words.iter().enumerate() {
                    sh.durable[base + j].store(*w, Ordering::Relaxed);
                }
                sh.line_seq[l].store(cap.seq, Ordering::Relaxed);
            }
        }
    }

    /// Flushes every line covering `[addr, addr + len)` and fences once.
    pub fn persist(&self, addr: PmAddr, len: u64) {
        let first = addr.line();
        let last = (addr.0 + len.max(1) - 1) / LINE_SIZE;
        for line in first..=last {
            self.flush_line(PmAddr(line * LINE_SIZE));
        }
        self.fence();
    }

    /// Records an allocation in the trace.
    pub fn log_alloc(&self, addr: PmAddr, len: u64) {
        if self.is_crashed() {
            return;
        }
        if let Some(log) = &self.log {
            let mut log = lock(log);
            let seq = self.next_seq();
            log.push(PmEvent {
                seq,
                thread: thread_index(),
                kind: EventKind::Alloc { addr, len },
            });
        }
    }

    fn log_op(&self, kind: EventKind) {
        if self.is_crashed() {
            return;
        }
        if let Some(log) = &self.log {
            let mut log = lock(log);
            let seq = self.next_seq();
            log.push(PmEvent {
                seq,
                thread: thread_index(),
                kind,
            });
        }
    }

    /// Global instruction counters of this pool.
    pub fn counters(&self) -> Counters {
        Counters {
            clwb: self.clwb.load(Ordering::Relaxed),
            mfence: self.mfence.load(Ordering::Relaxed),
            stores: self.stores.load(Ordering::Relaxed),
        }
    }

    pub fn set_crash_hook(&self, hook: Option<Arc<dyn CrashHook>>) {
        let mut h = self.hook.write().unwrap_or_else(|e| e.into_inner());
        self.has_hook.store(hook.is_some(), Ordering::Release);
        *h = hook;
    }

    /// Spin-wait helper for index code: yields to the scheduler hook, if any.
    pub fn spin_hint(&self) {
        if self.is_crashed() && self.has_hook.load(Ordering::Acquire) {
            // Whatever this thread waits for may never be released.
            std::panic::resume_unwind(Box::new(CrashSignal {
                seq: self.crash_seq.load(Ordering::Acquire),
            }));
        }
        if self.has_hook.load(Ordering::Acquire) {
            let verdict = {
                let hook = self.hook.read().unwrap_or_else(|e| e.into_inner());
                hook.as_ref().map_or(HookVerdict::Continue, |h| h.on_spin())
            };
            if verdict == HookVerdict::Crash {
                self.crash_now(self.seq.load(Ordering::Acquire));
            }
        }
        std::thread::yield_now();
    }

    /// Opens an operation scope on the calling thread. Scopes nest; the
    /// returned guard must be finished in LIFO order.
    pub fn op_scope(&self, op_id: u64) -> OpScope<'_> {
        SCOPES.with(|s| s.borrow_mut().push((self.id, op_id)));
        self.log_op(EventKind::OpBegin { op_id });
        OpScope {
            pool: self,
            op_id,
            start: thread_counters(),
            finished: false,
        }
    }

    /// Runs `f` inside an operation scope and returns its counter delta.
    pub fn scoped<R>(&self, op_id: u64, f: impl FnOnce() -> R) -> (R, Counters) {
        let scope = self.op_scope(op_id);
        let r = f();
        (r, scope.finish())
    }

    /// Copies the event log.
    pub fn events(&self) -> Vec<PmEvent> {
        self.log
            .as_ref()
            .map(|l| lock(l).clone())
            .unwrap_or_default()
    }

    pub fn event_count(&self) -> usize {
        self.log.as_ref().map(|l| lock(l).len()).unwrap_or(0)
    }

    /// Drains the event log.
    pub fn take_events(&self) -> Vec<PmEvent> {
        self.log
            .as_ref()
            .map(|l| std::mem::take(&mut *lock(l)))
            .unwrap_or_default()
    }

    pub fn line_state(&self, addr: PmAddr) -> Result<LineState, PmError> {
        let sh = self.shadow.as_ref().ok_or(PmError::NotTracked)?;
        let line = addr.line();
        let base = (line * LINE_SIZE / WORD_SIZE) as usize;
        let mut dirty = 0u8;
        for j in 0..WORDS_PER_LINE {
            if self.words[base + j].load(Ordering::Acquire)
                != sh.durable[base + j].load(Ordering::Acquire)
            {
                dirty |= 1 << j;
            }
        }
        let flush_pending = sh
            .pending
            .iter()
            .any(|p| lock(p).iter().any(|c| c.line == line));
        Ok(LineState {
            line,
            dirty_words: dirty,
            flush_pending,
        })
    }

    /// Contents of the volatile view.
    pub fn volatile_image(&self) -> PoolImage {
        self.image_of(&self.words)
    }

    fn image_of(&self, words: &[AtomicU64]) -> PoolImage {
        let mut image = PoolImage::zeroed(self.size);
        for page in self.touched_pages() {
            let base = page as usize * PAGE_WORDS;
            let data: Box<[u64]> = words[base..base + PAGE_WORDS]
                .iter()
                .map(|w| w.load(Ordering::Acquire))
                .collect();
            if data.iter().any(|&w| w != 0) {
                image.pages.insert(page, data);
            }
        }
        image
    }

    /// The state a restart would observe if the machine crashed now.
    pub fn persisted_view(&self, policy: CrashPolicy) -> Result<PoolImage, PmError> {
        let sh = self.shadow.as_ref().ok_or(PmError::NotTracked)?;
        let _g = lock(&sh.apply);
        let mut image = self.image_of(&sh.durable);
        if let CrashPolicy::Adversarial { seed } = policy {
            let log = lock(self.log.as_ref().ok_or(PmError::NotTraced)?);
            for ev in log.iter() {
                if let EventKind::Store { addr, new, .. } = ev.kind {
                    let durable_at = sh.line_seq[addr.line() as usize].load(Ordering::Relaxed);
                    if ev.seq > durable_at && adversarial_keeps(seed, ev.seq, addr) {
                        image.set_word(addr, new);
                    }
                }
            }
            image.normalize();
        }
        Ok(image)
    }
}

/// Guard returned by [`PmemPool::op_scope`].
pub struct OpScope<'a> {
    pool: &'a PmemPool,
    op_id: u64,
    start: Counters,
    finished: bool,
}

impl OpScope<'_> {
    pub fn op_id(&self) -> u64 {
        self.op_id
    }

    /// Closes the scope, logging `OpEnd`, and returns the counter delta.
    pub fn finish(mut self) -> Counters {
        let key = (self.pool.id, self.op_id);
        SCOPES.with(|s| {
            let mut s = s.borrow_mut();
            match s.last() {
                Some(top) if *top == key => {
                    s.pop();
                }
                other => panic!(
                    "unbalanced op scope: finishing {key:?} but innermost open scope is {other:?}"
                ),
            }
        });
        self.finished = true;
        self.pool.log_op(EventKind::OpEnd { op_id: self.op_id });
        thread_counters() - self.start
    }
}

impl Drop for OpScope<'_> {
    fn drop(&mut self) {
        if self.finished {
            return;
        }
        let key = (self.pool.id, self.op_id);
        SCOPES.with(|s| {
            let mut s = s.borrow_mut();
            if let Some(pos) = s.iter().rposition(|e| *e == key) {
                s.truncate(pos);
            }
        });
        // An early return ends the op normally. A crash unwinding through
        // the scope abandons it and logs nothing.
        if !std::thread::panicking() {
            self.pool.log_op(EventKind::OpEnd { op_id: self.op_id });
        }
    }
}

/// Sparse word image of a pool: a persisted view or a volatile snapshot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolImage {
    size: u64,
    pages: BTreeMap<u64, Box<[u64]>>,
}

impl PoolImage {
    pub fn zeroed(size: u64) -> PoolImage {
        PoolImage {
            size,
            pages: BTreeMap::new(),
        }
    }

    pub fn size(&self) -> u64 {
        self.size
    }

    pub fn word(&self, addr: PmAddr) -> u64 {
        let w = (addr.0 / WORD_SIZE) as usize;
        self.pages
            .get(&(addr.0 / PAGE_SIZE))
            .map_or(0, |p| p[w % PAGE_WORDS])
    }

    pub fn set_word(&mut self, addr: PmAddr, value: u64) {
        assert!(
            addr.0.is_multiple_of(WORD_SIZE) && addr.0 < self.size,
            "image fault at {addr:?}"
        );
        let w = (addr.0 / WORD_SIZE) as usize;
        let page = self
            .pages
            .entry(addr.0 / PAGE_SIZE)
            .or_insert_with(|| vec![0u64; PAGE_WORDS].into_boxed_slice());
        page[w % PAGE_WORDS] = value;
    }

    /// Drops all-zero pages so equal contents compare equal.
    pub fn normalize(&mut self) {
        self.pages.retain(|_, p| p.iter().any(|&w| w != 0));
    }

    /// Nonzero words in address order.
    pub fn nonzero_words(&self) -> impl Iterator<Item = (PmAddr, u64)> + '_ {
        self.pages.iter().flat_map(|(&page, data)| {
            data.iter()
                .enumerate()
                .filter(|(_, &w)| w != 0)
                .map(move |(i, &w)| (PmAddr(page * PAGE_SIZE + i as u64 * WORD_SIZE), w))
        })
    }

    /// Writes `PMPOOL01`, the pool size as little-endian u64, then the raw
    /// pool bytes.
    pub fn write_to(&self, path: &Path) -> Result<(), PmError> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(SNAPSHOT_MAGIC)?;
        out.write_all(&self.size.to_le_bytes())?;
        let zero = vec![0u8; PAGE_SIZE as usize];
        let mut buf = vec![0u8; PAGE_SIZE as usize];
        for page in 0..self.size / PAGE_SIZE {
            match self.pages.get(&page) {
                Some(data) => {
                    for (i, w) in data.iter().enumerate() {
                        buf[i * 8..i * 8 + 8].copy_from_slice(&w.to_le_bytes());
                    }
                    out.write_all(&buf)?;
                }
                None => out.write_all(&zero)?,
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<PoolImage, PmError> {
        let mut input = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        read_exact_or(&mut input, &mut magic, 8, 0)?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(PmError::BadMagic);
        }
        let mut size = [0u8; 8];
        read_exact_or(&mut input, &mut size, 8, 0)?;
        let size = u64::from_le_bytes(size);
        if size == 0 || !size.is_multiple_of(PAGE_SIZE) {
            return Err(PmError::BadSize(size));
        }
        let mut image = PoolImage::zeroed(size);
        let mut buf = vec![0u8; PAGE_SIZE as usize];
        for page in 0..size / PAGE_SIZE {
            read_exact_or(&mut input, &mut buf, size, page * PAGE_SIZE)?;
            if buf.iter().any(|&b| b != 0) {
                let data: Box<[u64]> = buf
                    .chunks_exact(8)
                    .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                image.pages.insert(page, data);
            }
        }
        Ok(image)
    }
}

fn read_exact_or(
    r: &mut impl Read,
    buf: &mut [u8],
    expected: u64,
    done: u64,
) -> Result<(), PmError> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => {
                return Err(PmError::Truncated {
                    expected,
                    found: done + filled as u64,
                })
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

impl PmemPool {
    /// Persisted view written straight to a snapshot file.
    pub fn snapshot_to_file(&self, policy: CrashPolicy, path: &Path) -> Result<(), PmError> {
        self.persisted_view(policy)?.write_to(path)
    }

    pub fn open_from_file(path: &Path, tracking: Tracking) -> Result<PmemPool, PmError> {
        PmemPool::from_image(&PoolImage::read_from(path)?, tracking)
    }
}
