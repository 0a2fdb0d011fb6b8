//! Simulated persistent memory, three crash-consistent concurrent indexes
//! (P-CLHT, P-BwTree, P-ART), a crash-recovery test harness and a YCSB-style
//! benchmark runner.

pub mod art;
pub mod bench;
pub mod bwtree;
pub mod clht;
pub mod harness;
pub mod index;
pub mod lock_table;
pub mod pm;

pub use index::{
    open_index, IndexError, IndexKind, IndexOptions, Key, KeyKind, Mutation, OpenError, PmIndex,
    Value,
};
pub use pm::{CrashPolicy, PmAddr, PmemPool, PoolConfig, Tracking};
