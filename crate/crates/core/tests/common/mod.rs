//! Independent oracles shared by integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};

use pmindex::index::{smo_kind, SmoKind};
use pmindex::pm::{
    EventKind, PmAddr, PmEvent, PmemPool, PoolConfig, PoolImage, Tracking, RAW_SITE,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug)]
pub enum ModelOp {
    Store { word: u64, value: u64 },
    Flush { line: u64 },
    Fence,
}

/// Brute-force replay of a single-threaded op sequence: a flush snapshots
/// the line, a fence copies every snapshot taken since the previous fence
/// into the durable image. Returns (durable words, stores that happened
/// after their line's last durable snapshot, in order).
pub fn replay(ops: &[ModelOp]) -> (BTreeMap<u64, u64>, Vec<(u64, u64)>) {
    let mut volatile: HashMap<u64, u64> = HashMap::new();
    let mut durable: BTreeMap<u64, u64> = BTreeMap::new();
    let mut pending: Vec<(u64, usize, [u64; 8])> = Vec::new();
    // Index into `ops` of the snapshot backing each durable line.
    let mut durable_at: HashMap<u64, usize> = HashMap::new();
    for (i, op) in ops.iter().enumerate() {
        match *op {
            ModelOp::Store { word, value } => {
                volatile.insert(word, value);
            }
            ModelOp::Flush { line } => {
                let mut snap = [0u64; 8];
                for (j, s) in snap.iter_mut().enumerate() {
                    *s = volatile.get(&(line * 8 + j as u64)).copied().unwrap_or(0);
                }
                pending.push((line, i, snap));
            }
            ModelOp::Fence => {
                for (line, at, snap) in pending.drain(..) {
                    for (j, s) in snap.iter().enumerate() {
                        durable.insert(line * 8 + j as u64, *s);
                    }
                    durable_at.insert(line, at);
                }
            }
        }
    }
    durable.retain(|_, v| *v != 0);
    let mut late = Vec::new();
    for (i, op) in ops.iter().enumerate() {
        if let ModelOp::Store { word, value } = *op {
            if durable_at.get(&(word / 8)).is_none_or(|&at| i > at) {
                late.push((word, value));
            }
        }
    }
    (durable, late)
}

pub fn random_ops(rng: &mut ChaCha8Rng, lines: u64, len: usize) -> Vec<ModelOp> {
    (0..len)
        .map(|_| match rng.gen_range(0..10) {
            0..=5 => ModelOp::Store {
                word: rng.gen_range(0..lines * 8),
                value: rng.gen_range(1..1000),
            },
            6..=7 => ModelOp::Flush {
                line: rng.gen_range(0..lines),
            },
            _ => ModelOp::Fence,
        })
        .collect()
}

pub fn run_on_pool(ops: &[ModelOp], tracking: Tracking) -> PmemPool {
    let pool = PmemPool::new(PoolConfig::new(64 * 1024, tracking)).unwrap();
    for op in ops {
        match *op {
            ModelOp::Store { word, value } => pool.store8(RAW_SITE, PmAddr(word * 8), value),
            ModelOp::Flush { line } => pool.flush_line(PmAddr(line * 64)),
            ModelOp::Fence => pool.fence(),
        }
    }
    pool
}

pub fn image_words(img: &PoolImage) -> BTreeMap<u64, u64> {
    img.nonzero_words().map(|(a, v)| (a.0 / 8, v)).collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Checks `n` random sequences over `lines` lines against the replayer.
/// Returns the number of mismatches.
pub fn strict_oracle_mismatches(n: usize, lines: u64, seed: u64) -> usize {
    let mut r = rng(seed);
    let mut bad = 0;
    for _ in 0..n {
        let len = r.gen_range(1..200);
        let ops = random_ops(&mut r, lines, len);
        let pool = run_on_pool(&ops, Tracking::Shadow);
        let view = pool.persisted_view(pmindex::CrashPolicy::Strict).unwrap();
        if image_words(&view) != replay(&ops).0 {
            bad += 1;
        }
    }
    bad
}

/// Every state reachable by applying an ordered subset of `late` stores
/// over `durable`.
pub fn enumerate_subsets(
    durable: &BTreeMap<u64, u64>,
    late: &[(u64, u64)],
) -> Vec<BTreeMap<u64, u64>> {
    assert!(late.len() <= 16);
    let mut out = Vec::with_capacity(1 << late.len());
    for mask in 0u32..(1 << late.len()) {
        let mut img = durable.clone();
        for (i, (w, v)) in late.iter().enumerate() {
            if mask & (1 << i) != 0 {
                img.insert(*w, *v);
            }
        }
        img.retain(|_, v| *v != 0);
        out.push(img);
    }
    out.sort();
    out.dedup();
    out
}

/// Runs `n` random 1-line sequences with at most 12 late stores and checks
/// each adversarial view against the enumerated subset space. Returns
/// (mismatches, sequences checked).
pub fn adversarial_oracle_mismatches(n: usize, seed: u64) -> (usize, usize) {
    let mut r = rng(seed);
    let (mut bad, mut checked) = (0, 0);
    while checked < n {
        let len = r.gen_range(1..40);
        let ops = random_ops(&mut r, 1, len);
        let (durable, late) = replay(&ops);
        if late.len() > 12 {
            continue;
        }
        checked += 1;
        let space = enumerate_subsets(&durable, &late);
        let pool = run_on_pool(&ops, Tracking::Traced);
        for s in 0..4u64 {
            let view = pool
                .persisted_view(pmindex::CrashPolicy::Adversarial { seed: s })
                .unwrap();
            if space.binary_search(&image_words(&view)).is_err() {
                bad += 1;
            }
        }
    }
    (bad, checked)
}

/// Publish stores per SMO instance, attributed to the innermost open op of
/// the storing thread.
pub fn smo_publishes(events: &[PmEvent]) -> HashMap<u64, (SmoKind, usize)> {
    let mut stacks: HashMap<u32, Vec<u64>> = HashMap::new();
    let mut out = HashMap::new();
    for e in events {
        let st = stacks.entry(e.thread).or_default();
        match e.kind {
            EventKind::OpBegin { op_id } => st.push(op_id),
            EventKind::OpEnd { .. } => {
                st.pop();
            }
            EventKind::Store { site, .. } if site.is_publish() => {
                if let Some(&op) = st.last() {
                    if let Some(k) = smo_kind(op) {
                        out.entry(op).or_insert((k, 0)).1 += 1;
                    }
                }
            }
            _ => {}
        }
    }
    out
}
