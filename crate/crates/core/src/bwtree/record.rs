//! On-PM record encoding for delta records and base nodes.

use crate::pm::{PmAddr, PmemPool};

/// Key as three big-endian words; word-wise order equals key order. The
/// all-zero key doubles as negative infinity.
pub type KeyW = [u64; 3];
pub const NEG_INF: KeyW = [0; 3];

pub const MAPPING_CAPACITY: u64 = 1 << 20;
pub const CONSOLIDATE_DEPTH: u64 = 8;
pub const MAX_PAIRS: usize = 64;
pub const MIN_PAIRS: usize = 16;

pub const BASE_LEAF: u64 = 1;
pub const BASE_INNER: u64 = 2;
pub const INSERT: u64 = 3;
pub const DELETE: u64 = 4;
pub const SPLIT: u64 = 5;
pub const INDEX_INSERT: u64 = 6;
pub const MERGE: u64 = 7;
pub const MERGE_INTENT: u64 = 8;
pub const REMOVE_NODE: u64 = 9;
pub const INDEX_DELETE: u64 = 10;

/// First pair word of a base node.
pub const BASE_PAIRS: u64 = 8;

pub fn header(kind: u64, depth: u64, leaf: bool) -> u64 {
    kind | depth << 8 | (leaf as u64) << 16
}

pub fn base_header(kind: u64, leaf: bool, count: u64, high_inf: bool) -> u64 {
    kind | (leaf as u64) << 16 | count << 24 | (high_inf as u64) << 56
}

#[derive(Clone, Copy, Debug)]
pub struct Rec {
    pub kind: u64,
    pub depth: u64,
    pub leaf: bool,
    pub next: PmAddr,
    pub key: KeyW,
    pub a: u64,
    pub b: u64,
}

impl Rec {
    pub fn load(pool: &PmemPool, at: PmAddr) -> Rec {
        let h = pool.load8(at);
        let kind = h & 0xff;
        let leaf = (h >> 16) & 1 == 1;
        if kind == BASE_LEAF || kind == BASE_INNER {
            return Rec {
                kind,
                depth: 0,
                leaf,
                next: PmAddr::NULL,
                key: NEG_INF,
                a: 0,
                b: 0,
            };
        }
        Rec {
            kind,
            depth: (h >> 8) & 0xff,
            leaf,
            next: PmAddr(pool.load8(at.word(1))),
            key: [
                pool.load8(at.word(2)),
                pool.load8(at.word(3)),
                pool.load8(at.word(4)),
            ],
            a: pool.load8(at.word(5)),
            b: pool.load8(at.word(6)),
        }
    }
}

pub struct Base<'a> {
    pool: &'a PmemPool,
    at: PmAddr,
    head: u64,
    kw: usize,
}

impl<'a> Base<'a> {
    pub fn load(pool: &'a PmemPool, at: PmAddr, kw: usize) -> Base<'a> {
        Base {
            pool,
            at,
            head: pool.load8(at),
            kw,
        }
    }

    pub fn leaf(&self) -> bool {
        (self.head >> 16) & 1 == 1
    }

    pub fn count(&self) -> u64 {
        (self.head >> 24) & 0xff_ffff
    }

    pub fn right(&self) -> u64 {
        self.pool.load8(self.at.word(1))
    }

    fn key_at(&self, off: u64) -> KeyW {
        let mut k = NEG_INF;
        for (i, w) in k.iter_mut().enumerate().take(self.kw) {
            *w = self.pool.load8(self.at.word(off + i as u64));
        }
        k
    }

    pub fn low(&self) -> KeyW {
        self.key_at(2)
    }

    pub fn high(&self) -> Option<KeyW> {
        if (self.head >> 56) & 1 == 1 {
            None
        } else {
            Some(self.key_at(5))
        }
    }

    fn pair(&self, i: u64) -> u64 {
        BASE_PAIRS + i * (self.kw as u64 + 1)
    }

    pub fn key(&self, i: u64) -> KeyW {
        self.key_at(self.pair(i))
    }

    pub fn value(&self, i: u64) -> u64 {
        self.pool.load8(self.at.word(self.pair(i) + self.kw as u64))
    }

    /// Number of pairs with key <= k.
    pub fn upper_bound(&self, k: &KeyW) -> u64 {
        let (mut lo, mut hi) = (0, self.count());
        while lo < hi {
            let mid = (lo + hi) / 2;
            if self.key(mid) <= *k {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        lo
    }

    pub fn find(&self, k: &KeyW) -> Option<u64> {
        let i = self.upper_bound(k);
        (i > 0 && self.key(i - 1) == *k).then(|| self.value(i - 1))
    }
}
