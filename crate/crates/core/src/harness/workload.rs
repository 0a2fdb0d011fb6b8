//! Per-thread operation streams for crash states.

use std::collections::{HashSet, VecDeque};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::index::{Key, KeyKind, Value};
use crate::pm::mix64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum KeyPattern {
    /// Random keys over a wide range.
    Uniform,
    /// Threads take turns on one ascending sequence; every thread works at
    /// the right edge of the index.
    Interleaved,
    /// A shuffled dense range.
    Dense,
    /// Random keys in a few hundred clusters. Keys of a cluster share a
    /// multi-byte tag, so radix nodes carry long prefixes that later keys
    /// split in the middle.
    Clustered,
}

impl KeyPattern {
    pub const ALL: [KeyPattern; 4] = [
        KeyPattern::Uniform,
        KeyPattern::Interleaved,
        KeyPattern::Dense,
        KeyPattern::Clustered,
    ];
}

const CLUSTER_GROUPS: u64 = 32;
const CLUSTER_SUBS: u64 = 4;

/// Key `low` of cluster (`a`, `b`): `a`, `b`, a two-byte tag, then `low`.
fn clustered(a: u64, b: u64, low: u64) -> u64 {
    let h = mix64(a << 8 | b);
    let tag = (0x10 + h % 0xf0) << 8 | (0x10 + (h >> 8) % 0xf0);
    a << 56 | b << 48 | tag << 32 | low
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Op {
    Insert(Key, Value),
    Delete(Key),
    Read(Key),
}

impl Op {
    pub fn key(&self) -> Key {
        match *self {
            Op::Insert(k, _) | Op::Delete(k) | Op::Read(k) => k,
        }
    }
}

/// Fresh keys owned by one thread. Threads never share keys, so each key
/// has a single-threaded history.
pub struct KeySource {
    pattern: KeyPattern,
    kind: KeyKind,
    thread: u64,
    threads: u64,
    next: u64,
    dense: Vec<u64>,
    seen: HashSet<u64>,
    rng: ChaCha8Rng,
}

impl KeySource {
    pub fn new(
        pattern: KeyPattern,
        kind: KeyKind,
        thread: usize,
        threads: usize,
        capacity: usize,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dense = if pattern == KeyPattern::Dense {
            let mut v: Vec<u64> = (0..capacity as u64).collect();
            v.shuffle(&mut rng);
            v
        } else {
            Vec::new()
        };
        KeySource {
            pattern,
            kind,
            thread: thread as u64,
            threads: threads as u64,
            next: 0,
            dense,
            seen: HashSet::new(),
            rng,
        }
    }

    pub fn fresh(&mut self) -> Key {
        let t = self.threads;
        let n = match self.pattern {
            KeyPattern::Uniform => loop {
                let n = self.rng.gen_range(1..1u64 << 40) * t + self.thread;
                if self.seen.insert(n) {
                    break n;
                }
            },
            KeyPattern::Clustered => loop {
                let a = self.rng.gen_range(1..=CLUSTER_GROUPS);
                let b = self.rng.gen_range(0..CLUSTER_SUBS);
                let n = clustered(
                    a,
                    b,
                    self.rng.gen_range(0..(1u64 << 32) / t) * t + self.thread,
                );
                if self.seen.insert(n) {
                    break n;
                }
            },
            KeyPattern::Interleaved => 1000 + self.next * t + self.thread,
            KeyPattern::Dense => {
                let i = self.next as usize;
                let slot = if i < self.dense.len() {
                    self.dense[i]
                } else {
                    i as u64
                };
                1 + slot * t + self.thread
            }
        };
        self.next += 1;
        match (self.kind, self.pattern) {
            (KeyKind::Int, _) => Key::Int(n),
            (KeyKind::Str, KeyPattern::Clustered) => {
                Key::from_bytes(KeyKind::Str, &n.to_be_bytes())
            }
            (KeyKind::Str, _) => Key::ycsb(n),
        }
    }
}

/// Unique nonzero value for operation `i` of `thread` in `phase`.
pub fn value_for(phase: u64, thread: usize, i: u64) -> Value {
    (phase << 56) | ((thread as u64 + 1) << 40) | (i + 1)
}

/// Load stream: `inserts` inserts of fresh keys. Each insert is followed
/// with probability `delete_ratio` by a delete of the thread's oldest live
/// key and with probability `update_ratio` by an overwrite of a random live
/// key.
pub fn load_stream(
    src: &mut KeySource,
    thread: usize,
    inserts: usize,
    delete_ratio: f64,
    update_ratio: f64,
    seed: u64,
) -> Vec<Op> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut live = VecDeque::new();
    let mut ops = Vec::with_capacity(inserts + inserts / 8);
    for _ in 0..inserts {
        let k = src.fresh();
        ops.push(Op::Insert(k, value_for(1, thread, ops.len() as u64)));
        live.push_back(k);
        if delete_ratio > 0.0 && rng.gen_bool(delete_ratio) {
            if let Some(old) = live.pop_front() {
                ops.push(Op::Delete(old));
            }
        }
        if update_ratio > 0.0 && !live.is_empty() && rng.gen_bool(update_ratio) {
            let k = live[rng.gen_range(0..live.len())];
            ops.push(Op::Insert(k, value_for(1, thread, ops.len() as u64)));
        }
    }
    ops
}

/// Post-crash stream: half inserts of fresh keys, half reads of keys the
/// thread owns.
pub fn test_stream(
    src: &mut KeySource,
    thread: usize,
    owned: &[Key],
    n: usize,
    seed: u64,
) -> Vec<Op> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keys = owned.to_vec();
    let mut ops = Vec::with_capacity(n);
    for i in 0..n {
        if keys.is_empty() || rng.gen_bool(0.5) {
            let k = src.fresh();
            ops.push(Op::Insert(k, value_for(2, thread, i as u64)));
            keys.push(k);
        } else {
            ops.push(Op::Read(keys[rng.gen_range(0..keys.len())]));
        }
    }
    ops
}
