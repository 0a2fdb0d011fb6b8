//! Simulated persistent memory and its allocator.

pub mod alloc;
pub mod pool;

pub use alloc::{
    reachability_report, AllocError, Allocation, LeakEntry, PmAllocator, ReachabilityReport,
    HEAP_START,
};
pub use pool::{
    adversarial_keeps, is_crash_signal, mix64, thread_counters, thread_index, Counters, CrashHook,
    CrashPolicy, CrashSignal, EventKind, HookVerdict, LineState, OpScope, PmAddr, PmError, PmEvent,
    PmemPool, PoolConfig, PoolImage, Site, Tracking, LINE_SIZE, PAGE_SIZE, RAW_SITE,
    WORDS_PER_LINE, WORD_SIZE,
};
