//! YCSB-style workloads: a load phase of inserts, then a run phase with the
//! workload's read/insert/scan mix, statically split across threads.

use std::io;
use std::path::Path;
use std::sync::{Arc, Barrier};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::index::{
    open_index, IndexError, IndexKind, IndexOptions, Key, KeyKind, OpenError, PmIndex, Value,
};
use crate::pm::{mix64, Counters, PmError, PmemPool, PoolConfig, Tracking};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Workload {
    /// 100% insert.
    LoadA,
    /// 50% read, 50% insert.
    A,
    /// 95% read, 5% insert.
    B,
    /// 100% read.
    C,
    /// 95% scan, 5% insert.
    E,
}

impl Workload {
    pub const ALL: [Workload; 5] = [
        Workload::LoadA,
        Workload::A,
        Workload::B,
        Workload::C,
        Workload::E,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Workload::LoadA => "loada",
            Workload::A => "a",
            Workload::B => "b",
            Workload::C => "c",
            Workload::E => "e",
        }
    }

    /// Percentage of run-phase operations that insert.
    fn insert_pct(self) -> u64 {
        match self {
            Workload::LoadA => 100,
            Workload::A => 50,
            Workload::B | Workload::E => 5,
            Workload::C => 0,
        }
    }
}

impl std::fmt::Display for Workload {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Workload {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Workload::ALL
            .into_iter()
            .find(|w| w.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown workload {s:?} (expected loada, a, b, c or e)"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub workload: Workload,
    pub key_type: KeyKind,
    /// Keys loaded, and operations in the run phase.
    pub n: usize,
    pub threads: usize,
    pub seed: u64,
    /// Scan lengths are uniform in 1..=scan_max.
    pub scan_max: usize,
}

impl WorkloadSpec {
    pub fn new(workload: Workload, key_type: KeyKind, n: usize) -> WorkloadSpec {
        WorkloadSpec {
            workload,
            key_type,
            n,
            threads: default_threads(),
            seed: 1,
            scan_max: 100,
        }
    }

    /// Rejects combinations an index cannot run.
    pub fn validate(&self, index: IndexKind) -> Result<(), BenchError> {
        if self.threads == 0 {
            return Err(BenchError::Spec("threads must be at least 1".into()));
        }
        if self.workload == Workload::E && self.scan_max == 0 {
            return Err(BenchError::Spec("scan_max must be at least 1".into()));
        }
        if index == IndexKind::Clht && self.workload == Workload::E {
            return Err(BenchError::Spec(
                "clht has no range scans; workload e needs an ordered index".into(),
            ));
        }
        if index == IndexKind::Clht && self.key_type == KeyKind::Str {
            return Err(BenchError::Spec("clht supports randint keys only".into()));
        }
        Ok(())
    }
}

pub const DEFAULT_N: usize = 1_000_000;

/// 16, capped at the available hardware parallelism.
pub fn default_threads() -> usize {
    std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(16)
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid workload: {0}")]
    Spec(String),
    #[error("pool: {0}")]
    Pool(#[from] PmError),
    #[error("open: {0}")]
    Open(#[from] OpenError),
    #[error("{0}")]
    Op(#[from] IndexError),
    #[error("report: {0}")]
    Io(#[from] io::Error),
    #[error("report: {0}")]
    Csv(#[from] csv::Error),
    #[error("report: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchOp {
    Insert(Key, Value),
    Read(Key),
    /// Inclusive range.
    Scan(Key, Key),
}

/// Per-thread operation streams of both phases.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Streams {
    pub load: Vec<Vec<BenchOp>>,
    pub run: Vec<Vec<BenchOp>>,
}

fn key_of(kind: KeyKind, seed: u64, id: u64) -> Key {
    // mix64 is a bijection, so distinct ids give distinct keys.
    let h = mix64(seed.wrapping_add(id));
    match kind {
        KeyKind::Int => Key::Int(h),
        KeyKind::Str => Key::ycsb(h),
    }
}

fn value_of(id: u64) -> Value {
    id + 1
}

/// Splits `ops` into `threads` contiguous chunks of near-equal size.
fn split<T: Clone>(ops: &[T], threads: usize) -> Vec<Vec<T>> {
    let (q, r) = (ops.len() / threads, ops.len() % threads);
    let mut out = Vec::with_capacity(threads);
    let mut at = 0;
    for t in 0..threads {
        let len = q + usize::from(t < r);
        out.push(ops[at..at + len].to_vec());
        at += len;
    }
    out
}

/// Deterministic in `spec`. Keys `0..n` are loaded; run-phase inserts use
/// fresh ids from `n` on; reads and scan starts are uniform over the
/// loaded keys.
pub fn generate(spec: &WorkloadSpec) -> Streams {
    let threads = spec.threads.max(1);
    let n = spec.n as u64;
    let kseed = mix64(spec.seed);
    let load_ops: Vec<BenchOp> = (0..n)
        .map(|i| BenchOp::Insert(key_of(spec.key_type, kseed, i), value_of(i)))
        .collect();
    if spec.workload == Workload::LoadA {
        return Streams {
            load: split(&load_ops, threads),
            run: vec![Vec::new(); threads],
        };
    }

    let mut rng = ChaCha8Rng::seed_from_u64(mix64(spec.seed ^ 0xb0));
    // Exact mix, then shuffled.
    let inserts = (n * spec.workload.insert_pct() + 50) / 100;
    let mut is_insert: Vec<bool> = (0..n).map(|i| i < inserts).collect();
    is_insert.shuffle(&mut rng);

    let sorted: Vec<Key> = if spec.workload == Workload::E {
        let mut v: Vec<Key> = (0..n).map(|i| key_of(spec.key_type, kseed, i)).collect();
        v.sort_unstable();
        v
    } else {
        Vec::new()
    };
    let mut next = n;
    let run_ops: Vec<BenchOp> = is_insert
        .into_iter()
        .map(|ins| {
            if ins || n == 0 {
                let id = next;
                next += 1;
                return BenchOp::Insert(key_of(spec.key_type, kseed, id), value_of(id));
            }
            if spec.workload == Workload::E {
                let s = rng.gen_range(0..sorted.len());
                let len = rng.gen_range(1..=spec.scan_max);
                let e = (s + len - 1).min(sorted.len() - 1);
                BenchOp::Scan(sorted[s], sorted[e])
            } else {
                BenchOp::Read(key_of(spec.key_type, kseed, rng.gen_range(0..n)))
            }
        })
        .collect();
    Streams {
        load: split(&load_ops, threads),
        run: split(&run_ops, threads),
    }
}

/// Counters and timing of one phase.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseStats {
    pub ops: u64,
    pub inserts: u64,
    pub reads: u64,
    pub scans: u64,
    pub seconds: f64,
    /// Sum of per-op scope deltas.
    pub scoped: Counters,
    /// Scope deltas of insert operations alone.
    pub insert_counters: Counters,
    /// Pool counter delta across the phase.
    pub pool: Counters,
    pub per_thread: Vec<Counters>,
    /// Reads of loaded keys that missed, and failed operations.
    pub errors: u64,
}

impl PhaseStats {
    pub fn ops_per_sec(&self) -> f64 {
        if self.seconds > 0.0 {
            self.ops as f64 / self.seconds
        } else {
            0.0
        }
    }

    pub fn clwb_per_insert(&self) -> f64 {
        ratio(self.insert_counters.clwb, self.inserts)
    }

    pub fn mfence_per_insert(&self) -> f64 {
        ratio(self.insert_counters.mfence, self.inserts)
    }

    /// Per-op scope deltas add up to the pool's own counters.
    pub fn conserved(&self) -> bool {
        self.scoped == self.pool
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// One report line. The column set is fixed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub index: IndexKind,
    pub pattern: Workload,
    pub key_type: KeyKind,
    pub threads: usize,
    pub n: usize,
    pub ops_per_sec: f64,
    pub clwb_per_op: f64,
    pub mfence_per_op: f64,
    pub seed: u64,
}

pub const COLUMNS: [&str; 9] = [
    "index",
    "pattern",
    "key_type",
    "threads",
    "n",
    "ops_per_sec",
    "clwb_per_op",
    "mfence_per_op",
    "seed",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub index: IndexKind,
    pub spec: WorkloadSpec,
    pub load: PhaseStats,
    /// Absent for LoadA.
    pub run: Option<PhaseStats>,
    /// Acknowledged keys that did not read back after the run.
    pub verify_failures: u64,
}

impl RunReport {
    /// The load phase row, plus the run phase row for workloads other than
    /// LoadA.
    pub fn rows(&self) -> Vec<ReportRow> {
        let row = |pattern, p: &PhaseStats| ReportRow {
            index: self.index,
            pattern,
            key_type: self.spec.key_type,
            threads: self.spec.threads,
            n: self.spec.n,
            ops_per_sec: p.ops_per_sec(),
            clwb_per_op: ratio(p.scoped.clwb, p.ops),
            mfence_per_op: ratio(p.scoped.mfence, p.ops),
            seed: self.spec.seed,
        };
        let mut rows = vec![row(Workload::LoadA, &self.load)];
        if let Some(r) = &self.run {
            rows.push(row(self.spec.workload, r));
        }
        rows
    }

    pub fn phases(&self) -> impl Iterator<Item = &PhaseStats> {
        std::iter::once(&self.load).chain(self.run.as_ref())
    }

    /// Verification and counter conservation both hold.
    pub fn pass(&self) -> bool {
        self.verify_failures == 0 && self.phases().all(|p| p.errors == 0 && p.conserved())
    }
}

fn pool_size(spec: &WorkloadSpec) -> u64 {
    let per_key: u64 = if spec.key_type == KeyKind::Str {
        1024
    } else {
        512
    };
    (64u64 << 20)
        .max(2 * spec.n as u64 * per_key)
        .next_power_of_two()
}

fn run_phase(
    index: &dyn PmIndex,
    pool: &PmemPool,
    streams: &[Vec<BenchOp>],
    phase: u64,
) -> PhaseStats {
    let barrier = Barrier::new(streams.len() + 1);
    let before = pool.counters();
    let (results, seconds) = std::thread::scope(|s| {
        let handles: Vec<_> = streams
            .iter()
            .enumerate()
            .map(|(t, ops)| {
                let barrier = &barrier;
                s.spawn(move || {
                    let mut st = PhaseStats::default();
                    let mut total = Counters::default();
                    barrier.wait();
                    for (j, op) in ops.iter().enumerate() {
                        let id = phase << 56 | (t as u64) << 40 | j as u64;
                        let (ok, c) = pool.scoped(id, || match op {
                            BenchOp::Insert(k, v) => index.insert(k, *v).is_ok(),
                            BenchOp::Read(k) => index.lookup(k).is_some(),
                            BenchOp::Scan(lo, hi) => {
                                index.range_query(lo, hi).is_ok_and(|r| !r.is_empty())
                            }
                        });
                        total += c;
                        match op {
                            BenchOp::Insert(..) => {
                                st.inserts += 1;
                                st.insert_counters += c;
                            }
                            BenchOp::Read(_) => st.reads += 1,
                            BenchOp::Scan(..) => st.scans += 1,
                        }
                        st.errors += u64::from(!ok);
                    }
                    st.ops = ops.len() as u64;
                    st.scoped = total;
                    st.per_thread = vec![total];
                    st
                })
            })
            .collect();
        barrier.wait();
        let start = Instant::now();
        let results: Vec<PhaseStats> = handles
            .into_iter()
            .map(|h| h.join().expect("bench worker"))
            .collect();
        (results, start.elapsed().as_secs_f64())
    });
    let mut out = PhaseStats {
        seconds,
        pool: pool.counters() - before,
        ..Default::default()
    };
    for r in results {
        out.ops += r.ops;
        out.inserts += r.inserts;
        out.reads += r.reads;
        out.scans += r.scans;
        out.errors += r.errors;
        out.scoped += r.scoped;
        out.insert_counters += r.insert_counters;
        out.per_thread.extend(r.per_thread);
    }
    out
}

/// Loads, runs the workload, then reads back every inserted key.
pub fn run(index: IndexKind, spec: &WorkloadSpec) -> Result<RunReport, BenchError> {
    spec.validate(index)?;
    let streams = generate(spec);
    let pool = Arc::new(PmemPool::new(PoolConfig::new(
        pool_size(spec),
        Tracking::Counters,
    ))?);
    let opts = IndexOptions::default().with_key_kind(spec.key_type);
    let idx = open_index(index, pool.clone(), &opts)?;

    let load = run_phase(&*idx, &pool, &streams.load, 1);
    let run = (spec.workload != Workload::LoadA).then(|| run_phase(&*idx, &pool, &streams.run, 2));

    let mut verify_failures = 0;
    for op in streams.load.iter().chain(&streams.run).flatten() {
        if let BenchOp::Insert(k, v) = op {
            if idx.lookup(k) != Some(*v) {
                verify_failures += 1;
            }
        }
    }
    Ok(RunReport {
        index,
        spec: spec.clone(),
        load,
        run,
        verify_failures,
    })
}

pub fn write_csv<W: io::Write>(rows: &[ReportRow], w: W) -> Result<(), BenchError> {
    let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    wr.write_record(COLUMNS)?;
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_csv<R: io::Read>(r: R) -> Result<Vec<ReportRow>, BenchError> {
    let mut rd = csv::Reader::from_reader(r);
    Ok(rd.deserialize().collect::<Result<Vec<ReportRow>, _>>()?)
}

pub fn write_json<W: io::Write>(rows: &[ReportRow], w: W) -> Result<(), BenchError> {
    serde_json::to_writer_pretty(w, rows)?;
    Ok(())
}

pub fn read_json<R: io::Read>(r: R) -> Result<Vec<ReportRow>, BenchError> {
    Ok(serde_json::from_reader(r)?)
}

/// Writes `rows` as CSV when `path` ends in `.csv`, JSON otherwise.
pub fn write_report(rows: &[ReportRow], path: &Path) -> Result<(), BenchError> {
    let f = io::BufWriter::new(std::fs::File::create(path)?);
    if path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
    {
        write_csv(rows, f)
    } else {
        write_json(rows, f)
    }
}
