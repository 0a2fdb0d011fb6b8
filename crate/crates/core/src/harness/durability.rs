//! Durability check over an event trace: every line an operation dirtied
//! must be covered by a fenced flush before the operation ends.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::index::{open_index, IndexKind, IndexOptions, Key, KeyKind, PmIndex};
use crate::pm::{mix64, EventKind, PmEvent, PmemPool, PoolConfig, Tracking, HEAP_START, LINE_SIZE};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DurabilityReport {
    /// Operations that reached their end event.
    pub ops_checked: u64,
    /// (op id, line) for every line still dirty when its op ended.
    pub unflushed_dirty_lines: Vec<(u64, u64)>,
    /// Stores inside ops that fell outside every traced region.
    pub untraced_stores: u64,
    pub pass: bool,
}

#[derive(Default)]
struct ThreadState {
    /// Open op ids, outermost first.
    open: Vec<u64>,
    /// Line -> seq of the latest store to it by the current op.
    dirty: HashMap<u64, u64>,
    /// Line -> seq of the latest unfenced flush.
    pending: HashMap<u64, u64>,
}

/// Incremental checker. Feed events in seq order, possibly in several
/// batches, then call [`DurabilityChecker::finish`].
#[derive(Default)]
pub struct DurabilityChecker {
    /// Traced regions, start -> end.
    regions: BTreeMap<u64, u64>,
    /// Line -> seq of the flush that last made it durable.
    durable: HashMap<u64, u64>,
    threads: HashMap<u32, ThreadState>,
    report: DurabilityReport,
}

impl DurabilityChecker {
    pub fn new() -> DurabilityChecker {
        let mut c = DurabilityChecker::default();
        c.regions.insert(0, HEAP_START);
        c
    }

    fn traced(&self, addr: u64) -> bool {
        self.regions
            .range(..=addr)
            .next_back()
            .is_some_and(|(_, &end)| addr < end)
    }

    pub fn feed(&mut self, events: &[PmEvent]) {
        for ev in events {
            self.event(ev);
        }
    }

    fn event(&mut self, ev: &PmEvent) {
        match &ev.kind {
            EventKind::Alloc { addr, len } => {
                let end = self.regions.entry(addr.0).or_insert(0);
                *end = (*end).max(addr.0 + len);
            }
            EventKind::Store { addr, site, .. } => {
                if site.is_volatile() {
                    return;
                }
                let traced = self.traced(addr.0);
                let t = self.threads.entry(ev.thread).or_default();
                if t.open.is_empty() {
                    return;
                }
                if !traced {
                    self.report.untraced_stores += 1;
                    return;
                }
                t.dirty.insert(addr.0 / LINE_SIZE, ev.seq);
            }
            EventKind::Flush { line } => {
                self.threads
                    .entry(ev.thread)
                    .or_default()
                    .pending
                    .insert(*line, ev.seq);
            }
            EventKind::Fence => {
                let t = self.threads.entry(ev.thread).or_default();
                for (line, seq) in t.pending.drain() {
                    let d = self.durable.entry(line).or_insert(0);
                    *d = (*d).max(seq);
                }
            }
            EventKind::OpBegin { op_id } => {
                let t = self.threads.entry(ev.thread).or_default();
                if t.open.is_empty() {
                    t.dirty.clear();
                }
                t.open.push(*op_id);
            }
            EventKind::OpEnd { op_id } => {
                let t = self.threads.entry(ev.thread).or_default();
                // Inner scopes abandoned without an end close with their parent.
                let Some(pos) = t.open.iter().rposition(|o| o == op_id) else {
                    return;
                };
                let op = t.open[0];
                t.open.truncate(pos);
                if !t.open.is_empty() {
                    return;
                }
                self.report.ops_checked += 1;
                let mut bad: Vec<u64> = t
                    .dirty
                    .drain()
                    .filter(|(line, seq)| self.durable.get(line).is_none_or(|d| d <= seq))
                    .map(|(line, _)| line)
                    .collect();
                bad.sort_unstable();
                self.report
                    .unflushed_dirty_lines
                    .extend(bad.into_iter().map(|l| (op, l)));
            }
        }
    }

    pub fn finish(mut self) -> DurabilityReport {
        self.report.pass = self.report.unflushed_dirty_lines.is_empty();
        self.report
    }
}

pub fn check_durability(events: &[PmEvent]) -> DurabilityReport {
    let mut c = DurabilityChecker::new();
    c.feed(events);
    c.finish()
}

#[derive(Clone, Debug, Serialize)]
pub struct DurabilityRun {
    pub index: IndexKind,
    pub key_kind: KeyKind,
    pub inserts: u64,
    pub test_ops: u64,
    pub events: u64,
    pub report: DurabilityReport,
    /// Acknowledged keys missing or wrong at the end of the run.
    pub readback_failures: u64,
}

fn make_key(kind: KeyKind, n: u64) -> Key {
    match kind {
        KeyKind::Int => Key::Int(n),
        KeyKind::Str => Key::ycsb(n),
    }
}

/// Traces a load phase of `n` inserts followed by a test phase of `n / 2`
/// mixed operations and checks every operation in the trace.
pub fn run_durability(
    index: IndexKind,
    key_kind: KeyKind,
    n: u64,
    threads: usize,
    seed: u64,
) -> DurabilityRun {
    let threads = threads.max(1);
    let size = (256u64 << 20).max(n * 2048).next_power_of_two();
    let pool =
        Arc::new(PmemPool::new(PoolConfig::new(size, Tracking::Traced)).expect("traced pool"));
    let opts = IndexOptions::default().with_key_kind(key_kind);
    let idx = open_index(index, pool.clone(), &opts).expect("open index");
    let mut checker = DurabilityChecker::new();
    checker.feed(&pool.take_events());
    let mut events = 0u64;

    let per = |t: usize, total: u64| {
        total / threads as u64 + u64::from((t as u64) < total % threads as u64)
    };
    // Keys are t + threads * j, so threads never share keys.
    let key_of = |t: usize, j: u64| {
        make_key(
            key_kind,
            1 + mix64(seed) % 1000 + t as u64 + threads as u64 * j,
        )
    };

    let mut failures = 0u64;
    std::thread::scope(|s| {
        for t in 0..threads {
            let idx = &*idx;
            let pool = &*pool;
            s.spawn(move || {
                for j in 0..per(t, n) {
                    let op = (1u64 << 56) | (t as u64) << 40 | j;
                    let (r, _) = pool.scoped(op, || idx.insert(&key_of(t, j), j + 1));
                    r.expect("insert");
                }
            });
        }
    });
    let batch = pool.take_events();
    events += batch.len() as u64;
    checker.feed(&batch);

    let test_ops = n / 2;
    let results: Vec<u64> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let idx: &dyn PmIndex = &*idx;
                let pool = &*pool;
                s.spawn(move || {
                    let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed ^ t as u64));
                    let loaded = per(t, n);
                    let mut next = loaded;
                    let mut bad = 0u64;
                    for j in 0..per(t, test_ops) {
                        let op = (2u64 << 56) | (t as u64) << 40 | j;
                        let roll = rng.gen_range(0..100);
                        let _g = pool.op_scope(op);
                        if roll < 40 || loaded == 0 {
                            idx.insert(&key_of(t, next), next + 1).expect("insert");
                            next += 1;
                        } else if roll < 60 {
                            // Deleted keys are re-inserted so the read-back
                            // below needs no bookkeeping.
                            let i = rng.gen_range(0..loaded);
                            idx.delete(&key_of(t, i)).expect("delete");
                            idx.insert(&key_of(t, i), i + 7).expect("reinsert");
                        } else {
                            let i = rng.gen_range(0..loaded);
                            if idx.lookup(&key_of(t, i)).is_none() {
                                bad += 1;
                            }
                        }
                        _g.finish();
                    }
                    bad
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker"))
            .collect()
    });
    failures += results.iter().sum::<u64>();
    let batch = pool.take_events();
    events += batch.len() as u64;
    checker.feed(&batch);

    for t in 0..threads {
        for j in 0..per(t, n) {
            if idx.lookup(&key_of(t, j)).is_none() {
                failures += 1;
            }
        }
    }
    DurabilityRun {
        index,
        key_kind,
        inserts: n,
        test_ops,
        events,
        report: checker.finish(),
        readback_failures: failures,
    }
}
