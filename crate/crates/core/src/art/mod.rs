//! P-ART: persistent adaptive radix tree.
//!
//! Node header word 0 packs `kind | level << 8 | count << 16` plus an
//! obsolete bit; word 1 packs the compressed-prefix length (low byte) with up
//! to seven stored prefix bytes. `level` is the key byte a node dispatches
//! on and never changes, so a reader can always tell how much prefix to
//! skip even when a crash left `prefix_len` stale. Writers that find such a
//! stale header take the node lock with `try_lock`; success means no writer
//! is in the middle of a split, so the header is a crash remnant and gets
//! recomputed from a leaf in the subtree.
//!
//! A node installed by an SMO stays locked until the link to it is
//! durable. Otherwise a writer could reach it through the volatile link,
//! acknowledge an insert into it, and lose that insert when a crash drops
//! the link.
//!
//! Layouts in words:
//! * N4: keys in w2, children w3..7
//! * N16: keys in w2..4, children w4..20
//! * N48: 256-byte child index in w2..34 (slot + 1), children w34..82
//! * N256: children w2..258
//! * leaf: value in w0, key words after it. Leaf pointers carry tag bit 0.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::index::{
    check_key, check_pair, smo_scope, IndexError, IndexKind, IndexOptions, Key, KeyKind, Mutation,
    OpenError, PmIndex, SmoKind, Value,
};
use crate::lock_table::{LockGuard, LockTable};
use crate::pm::{
    reachability_report, Allocation, PmAddr, PmAllocator, PmemPool, ReachabilityReport, Site,
};

const MAGIC: u64 = u64::from_le_bytes(*b"PART0001");
const ROOT: PmAddr = PmAddr(0);
const ROOT_NODE: PmAddr = PmAddr(8);
const ROOT_KIND: PmAddr = PmAddr(16);

const N4: u64 = 1;
const N16: u64 = 2;
const N48: u64 = 3;
const N256: u64 = 4;
const OBSOLETE: u64 = 1 << 63;
/// Prefix bytes stored in the header word.
pub const STORED_PREFIX: usize = 7;

const N48_CHILD: u64 = 34;

pub const SITE_LEAF: Site = Site::new("art.leaf.init");
pub const SITE_NODE: Site = Site::new("art.node.init");
pub const SITE_ENTRY: Site = Site::new("art.insert.entry");
pub const SITE_COUNT: Site = Site::new("art.insert.count").publish();
pub const SITE_N48_INDEX: Site = Site::new("art.insert.index").publish();
pub const SITE_N48_COUNT: Site = Site::new("art.insert.hint");
pub const SITE_N256: Site = Site::new("art.insert.n256").publish();
pub const SITE_REVIVE: Site = Site::new("art.insert.revive").publish();
pub const SITE_UPSERT: Site = Site::new("art.upsert").publish();
pub const SITE_EXPAND: Site = Site::new("art.expand.link").publish();
pub const SITE_GROW: Site = Site::new("art.grow.link").publish();
pub const SITE_SHRINK: Site = Site::new("art.shrink.link").publish();
pub const SITE_PRUNE: Site = Site::new("art.prune.link").publish();
pub const SITE_SPLIT_LINK: Site = Site::new("art.split.link").publish().hot();
pub const SITE_SPLIT_HEADER: Site = Site::new("art.split.header").publish();
pub const SITE_FIX: Site = Site::new("art.fix.header").publish();
pub const SITE_DELETE: Site = Site::new("art.delete").publish();
const SITE_OBSOLETE: Site = Site::new("art.obsolete").volatile().no_preempt();
const SITE_INIT: Site = Site::new("art.init").no_preempt();

pub const CRASH_SITES: &[Site] = &[
    SITE_LEAF,
    SITE_NODE,
    SITE_ENTRY,
    SITE_COUNT,
    SITE_N48_INDEX,
    SITE_N48_COUNT,
    SITE_N256,
    SITE_REVIVE,
    SITE_UPSERT,
    SITE_EXPAND,
    SITE_GROW,
    SITE_SHRINK,
    SITE_PRUNE,
    SITE_SPLIT_LINK,
    SITE_SPLIT_HEADER,
    SITE_DELETE,
];

/// Result of [`PArt::detect_and_fix`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FixOutcome {
    /// A crash remnant was repaired.
    Fixed,
    /// Another writer holds the node; the mismatch is its in-flight split.
    Transient,
    /// The header was already consistent once the lock was held.
    Consistent,
    /// No leaf below the node and no fallback key.
    Corrupt,
}

#[derive(Clone, Copy, Debug)]
struct Meta {
    kind: u64,
    level: usize,
    count: u64,
    obsolete: bool,
}

fn meta_word(kind: u64, level: usize, count: u64) -> u64 {
    kind | (level as u64) << 8 | count << 16
}

fn decode(w: u64) -> Meta {
    Meta {
        kind: w & 0xff,
        level: ((w >> 8) & 0xff) as usize,
        count: (w >> 16) & 0xffff,
        obsolete: w & OBSOLETE != 0,
    }
}

fn capacity(kind: u64) -> u64 {
    match kind {
        N4 => 4,
        N16 => 16,
        N48 => 48,
        _ => 256,
    }
}

fn node_words(kind: u64) -> u64 {
    match kind {
        N4 => 7,
        N16 => 20,
        N48 => 82,
        _ => 258,
    }
}

fn kind_for(n: usize) -> u64 {
    match n {
        0..=4 => N4,
        5..=16 => N16,
        17..=48 => N48,
        _ => N256,
    }
}

fn tag_name(kind: u64) -> &'static str {
    match kind {
        N4 => "art.n4",
        N16 => "art.n16",
        N48 => "art.n48",
        _ => "art.n256",
    }
}

fn is_leaf(p: u64) -> bool {
    p & 1 == 1
}

fn leaf_addr(p: u64) -> PmAddr {
    PmAddr(p & !1)
}

fn prefix_word(len: usize, bytes: impl Fn(usize) -> u8) -> u64 {
    let mut w = len as u64;
    for j in 0..len.min(STORED_PREFIX) {
        w |= (bytes(j) as u64) << (8 * (j + 1));
    }
    w
}

fn stored_byte(pw: u64, j: usize) -> u8 {
    (pw >> (8 * (j + 1))) as u8
}

#[derive(Default)]
struct Stats {
    splits: AtomicU64,
    grows: AtomicU64,
    shrinks: AtomicU64,
    prunes: AtomicU64,
    fixes: AtomicU64,
    transient: AtomicU64,
    fix_consistent: AtomicU64,
    fix_fallback: AtomicU64,
    restarts: AtomicU64,
    smo_ids: AtomicU64,
}

pub struct PArt {
    pool: Arc<PmemPool>,
    alloc: PmAllocator,
    locks: LockTable,
    key_kind: KeyKind,
    fix_enabled: bool,
    stats: Stats,
}

/// Entry to place in a node being built.
type Entry = (u8, u64);

impl PArt {
    pub fn open(pool: Arc<PmemPool>, opts: &IndexOptions) -> Result<PArt, OpenError> {
        let magic = pool.load8(ROOT);
        if magic != 0 && magic != MAGIC {
            return Err(OpenError::BadMagic(magic));
        }
        let alloc = PmAllocator::open(pool.clone(), opts.track_allocations)?;
        alloc.set_recycling(opts.recycle);
        let key_kind = if magic == 0 {
            let art = PArt::with(pool.clone(), alloc, opts.key_kind, opts);
            let root = art.build_node(N256, 0, 0, &[])?;
            art.pool.store8(SITE_INIT, ROOT_NODE, root.0);
            art.pool.store8(SITE_INIT, ROOT_KIND, opts.key_kind.code());
            art.pool.store8(SITE_INIT, ROOT, MAGIC);
            art.pool.persist(ROOT, 24);
            return Ok(art);
        } else {
            KeyKind::from_code(pool.load8(ROOT_KIND))
                .ok_or_else(|| OpenError::Corrupt("bad key kind".into()))?
        };
        if pool.load8(ROOT_NODE) == 0 {
            return Err(OpenError::Corrupt("missing root node".into()));
        }
        let art = PArt::with(pool, alloc, key_kind, opts);
        art.locks.reset_all();
        Ok(art)
    }

    fn with(
        pool: Arc<PmemPool>,
        alloc: PmAllocator,
        key_kind: KeyKind,
        opts: &IndexOptions,
    ) -> PArt {
        PArt {
            pool,
            alloc,
            locks: LockTable::new(),
            key_kind,
            fix_enabled: opts.mutation != Some(Mutation::ArtDisableFix),
            stats: Stats::default(),
        }
    }

    fn root(&self) -> PmAddr {
        PmAddr(self.pool.load8(ROOT_NODE))
    }

    fn meta(&self, n: PmAddr) -> Meta {
        decode(self.pool.load8(n))
    }

    fn lock(&self, n: PmAddr) -> LockGuard<'_> {
        self.locks.guard(n.0, || self.pool.spin_hint())
    }

    fn n4_16_key(&self, n: PmAddr, j: u64) -> u8 {
        (self.pool.load8(n.word(2 + j / 8)) >> (8 * (j % 8))) as u8
    }

    fn n48_index(&self, n: PmAddr, b: u8) -> u64 {
        (self.pool.load8(n.word(2 + b as u64 / 8)) >> (8 * (b as u64 % 8))) & 0xff
    }

    fn child_base(kind: u64) -> u64 {
        match kind {
            N4 => 3,
            N16 => 4,
            N48 => N48_CHILD,
            _ => 2,
        }
    }

    /// Address of the child word for byte `b`, whether live or deleted.
    fn child_slot(&self, n: PmAddr, m: Meta, b: u8) -> Option<PmAddr> {
        match m.kind {
            N4 | N16 => (0..m.count.min(capacity(m.kind)))
                .find(|&j| self.n4_16_key(n, j) == b)
                .map(|j| n.word(Self::child_base(m.kind) + j)),
            N48 => match self.n48_index(n, b) {
                0 => None,
                s => Some(n.word(N48_CHILD + s - 1)),
            },
            _ => Some(n.word(2 + b as u64)),
        }
    }

    fn find_child(&self, n: PmAddr, m: Meta, b: u8) -> u64 {
        self.child_slot(n, m, b).map_or(0, |a| self.pool.load8(a))
    }

    /// Live children in byte order.
    fn children(&self, n: PmAddr, m: Meta) -> Vec<Entry> {
        let mut out = Vec::new();
        match m.kind {
            N4 | N16 => {
                for j in 0..m.count.min(capacity(m.kind)) {
                    let c = self.pool.load8(n.word(Self::child_base(m.kind) + j));
                    if c != 0 {
                        out.push((self.n4_16_key(n, j), c));
                    }
                }
                out.sort_by_key(|e| e.0);
            }
            N48 => {
                for b in 0..=255u8 {
                    let s = self.n48_index(n, b);
                    if s != 0 {
                        let c = self.pool.load8(n.word(N48_CHILD + s - 1));
                        if c != 0 {
                            out.push((b, c));
                        }
                    }
                }
            }
            _ => {
                for b in 0..=255u8 {
                    let c = self.pool.load8(n.word(2 + b as u64));
                    if c != 0 {
                        out.push((b, c));
                    }
                }
            }
        }
        out
    }

    fn leaf_key(&self, p: u64) -> Key {
        let a = leaf_addr(p);
        let mut w = [0u64; 3];
        for (i, x) in w.iter_mut().enumerate().take(self.key_kind.words()) {
            *x = self.pool.load8(a.word(1 + i as u64));
        }
        Key::from_words(self.key_kind, &w)
    }

    fn leaf_value(&self, p: u64) -> u64 {
        self.pool.load8(leaf_addr(p))
    }

    /// Key of the leftmost leaf below `n`. Inner nodes emptied by deletes
    /// are skipped.
    fn leftmost_key(&self, n: PmAddr) -> Option<Key> {
        let m = self.meta(n);
        self.children(n, m).into_iter().find_map(|(_, c)| {
            if is_leaf(c) {
                Some(self.leaf_key(c))
            } else {
                self.leftmost_key(PmAddr(c))
            }
        })
    }

    fn persist_words(&self, words: &[PmAddr]) {
        let mut lines: Vec<u64> = words.iter().map(|w| w.line()).collect();
        lines.sort_unstable();
        lines.dedup();
        for l in lines {
            self.pool.flush_line(PmAddr(l * 64));
        }
        self.pool.fence();
    }

    fn new_leaf(&self, k: &Key, v: Value) -> Result<u64, IndexError> {
        let words = self.key_kind.words() as u64;
        let size = 8 * (1 + words);
        let a = self
            .alloc
            .alloc(size, size.next_power_of_two(), "art.leaf")?;
        self.pool.store8(SITE_LEAF, a, v);
        let kw = k.to_words();
        for i in 0..words {
            self.pool.store8(SITE_LEAF, a.word(1 + i), kw[i as usize]);
        }
        self.pool.persist(a, size);
        Ok(a.0 | 1)
    }

    /// Allocates, fills and persists a node. Not yet reachable.
    fn build_node(
        &self,
        kind: u64,
        level: usize,
        pw: u64,
        entries: &[Entry],
    ) -> Result<PmAddr, IndexError> {
        let words = node_words(kind);
        let n = self.alloc.alloc(words * 8, 64, tag_name(kind))?;
        let p = &*self.pool;
        let count = if kind == N256 {
            0
        } else {
            entries.len() as u64
        };
        p.store8(SITE_NODE, n, meta_word(kind, level, count));
        p.store8(SITE_NODE, n.word(1), pw);
        match kind {
            N4 | N16 => {
                let mut kw = [0u64; 2];
                for (j, (b, c)) in entries.iter().enumerate() {
                    kw[j / 8] |= (*b as u64) << (8 * (j % 8));
                    p.store8(SITE_NODE, n.word(Self::child_base(kind) + j as u64), *c);
                }
                for (i, w) in kw.iter().enumerate().take(if kind == N4 { 1 } else { 2 }) {
                    if *w != 0 {
                        p.store8(SITE_NODE, n.word(2 + i as u64), *w);
                    }
                }
            }
            N48 => {
                let mut idx = [0u64; 32];
                for (s, (b, c)) in entries.iter().enumerate() {
                    idx[*b as usize / 8] |= (s as u64 + 1) << (8 * (*b as usize % 8));
                    p.store8(SITE_NODE, n.word(N48_CHILD + s as u64), *c);
                }
                for (i, w) in idx.iter().enumerate() {
                    if *w != 0 {
                        p.store8(SITE_NODE, n.word(2 + i as u64), *w);
                    }
                }
            }
            _ => {
                for (b, c) in entries {
                    p.store8(SITE_NODE, n.word(2 + *b as u64), *c);
                }
            }
        }
        p.persist(n, words * 8);
        Ok(n)
    }

    fn smo_id(&self) -> u64 {
        self.stats.smo_ids.fetch_add(1, Ordering::Relaxed)
    }

    /// Checks the header of `n`, reached at `depth`, and repairs it if it is
    /// a crash remnant. `fallback` supplies prefix bytes when the subtree
    /// holds no leaf.
    pub fn detect_and_fix(&self, n: PmAddr, depth: usize, fallback: Option<&Key>) -> FixOutcome {
        let Some(_g) = self.locks.try_guard(n.0) else {
            self.stats.transient.fetch_add(1, Ordering::Relaxed);
            return FixOutcome::Transient;
        };
        let m = self.meta(n);
        if m.obsolete {
            return FixOutcome::Transient;
        }
        let pw = self.pool.load8(n.word(1));
        if m.level == depth + (pw & 0xff) as usize {
            self.stats.fix_consistent.fetch_add(1, Ordering::Relaxed);
            return FixOutcome::Consistent;
        }
        if m.level < depth {
            return FixOutcome::Corrupt;
        }
        let rk = match (self.leftmost_key(n), fallback) {
            (Some(k), _) => k,
            (None, Some(k)) => {
                self.stats.fix_fallback.fetch_add(1, Ordering::Relaxed);
                *k
            }
            (None, None) => return FixOutcome::Corrupt,
        };
        let scope = smo_scope(&self.pool, SmoKind::ArtFix, self.smo_id());
        let len = m.level - depth;
        let npw = prefix_word(len, |j| rk.byte(depth + j));
        self.pool.store8(SITE_FIX, n.word(1), npw);
        self.pool.persist(n.word(1), 8);
        scope.finish();
        self.stats.fixes.fetch_add(1, Ordering::Relaxed);
        FixOutcome::Fixed
    }

    /// First prefix position where `k` diverges from node `n`, restricted
    /// to positions before the node's level.
    fn prefix_mismatch(
        &self,
        n: PmAddr,
        pw: u64,
        level: usize,
        depth: usize,
        k: &Key,
    ) -> Option<usize> {
        let plen = (pw & 0xff) as usize;
        let mut rk: Option<Option<Key>> = None;
        for i in 0..plen {
            let pos = depth + i;
            if pos >= level {
                break;
            }
            let expect = if i < STORED_PREFIX {
                stored_byte(pw, i)
            } else {
                rk.get_or_insert_with(|| self.leftmost_key(n))
                    .as_ref()?
                    .byte(pos)
            };
            if k.byte(pos) != expect {
                return Some(i);
            }
        }
        None
    }

    fn restart(&self) {
        self.stats.restarts.fetch_add(1, Ordering::Relaxed);
        self.pool.spin_hint();
    }

    /// Writer descent shared by insert and delete. Calls `at` with
    /// (parent, node, node meta, depth) at the node whose child slot for
    /// the key's byte at `level` is the target, or `split` on a prefix
    /// mismatch.
    fn writer_descend<R>(
        &self,
        k: &Key,
        mut at: impl FnMut(Option<(PmAddr, u8)>, PmAddr, Meta) -> Option<R>,
        mut split: impl FnMut((PmAddr, u8), PmAddr, u64, usize, usize) -> Option<R>,
    ) -> R {
        'restart: loop {
            let mut parent: Option<(PmAddr, u8)> = None;
            let mut node = self.root();
            let mut depth = 0usize;
            loop {
                let m = self.meta(node);
                if m.obsolete {
                    self.restart();
                    continue 'restart;
                }
                let pw = self.pool.load8(node.word(1));
                if m.level != depth + (pw & 0xff) as usize && self.fix_enabled {
                    match self.detect_and_fix(node, depth, Some(k)) {
                        FixOutcome::Fixed | FixOutcome::Consistent => continue,
                        FixOutcome::Transient => {
                            self.restart();
                            continue 'restart;
                        }
                        FixOutcome::Corrupt => {}
                    }
                }
                if let Some(i) = self.prefix_mismatch(node, pw, m.level, depth, k) {
                    let p = parent.expect("root has no prefix");
                    match split(p, node, pw, depth, i) {
                        Some(r) => return r,
                        None => {
                            self.restart();
                            continue 'restart;
                        }
                    }
                }
                let c = self.find_child(node, m, k.byte(m.level));
                if c == 0 || is_leaf(c) {
                    match at(parent, node, m) {
                        Some(r) => return r,
                        None => {
                            self.restart();
                            continue 'restart;
                        }
                    }
                }
                parent = Some((node, k.byte(m.level)));
                depth = m.level + 1;
                node = PmAddr(c);
            }
        }
    }

    fn insert_impl(&self, k: &Key, v: Value) -> Result<(), IndexError> {
        self.writer_descend(
            k,
            |parent, node, m| self.insert_at(parent, node, m, k, v),
            |parent, node, pw, depth, i| self.split(parent, node, pw, depth, i, k, v),
        )
    }

    fn insert_at(
        &self,
        parent: Option<(PmAddr, u8)>,
        n: PmAddr,
        seen: Meta,
        k: &Key,
        v: Value,
    ) -> Option<Result<(), IndexError>> {
        let b = k.byte(seen.level);
        let _g = self.lock(n);
        let m = self.meta(n);
        if m.obsolete {
            return None;
        }
        let p = &*self.pool;
        let c = self.find_child(n, m, b);
        if c != 0 && !is_leaf(c) {
            return None;
        }
        if is_leaf(c) {
            let lk = self.leaf_key(c);
            if lk == *k {
                p.store8(SITE_UPSERT, leaf_addr(c), v);
                p.persist(leaf_addr(c), 8);
                return Some(Ok(()));
            }
            let d = (m.level + 1..k.len())
                .find(|&d| lk.byte(d) != k.byte(d))
                .expect("distinct keys differ");
            let leaf = match self.new_leaf(k, v) {
                Ok(l) => l,
                Err(e) => return Some(Err(e)),
            };
            let pw = prefix_word(d - m.level - 1, |j| k.byte(m.level + 1 + j));
            let mut entries = vec![(lk.byte(d), c), (k.byte(d), leaf)];
            entries.sort_by_key(|e| e.0);
            let inner = match self.build_node(N4, d, pw, &entries) {
                Ok(x) => x,
                Err(e) => return Some(Err(e)),
            };
            let _ig = self.lock(inner);
            let slot = self.child_slot(n, m, b).expect("leaf slot exists");
            p.store8(SITE_EXPAND, slot, inner.0);
            p.persist(slot, 8);
            return Some(Ok(()));
        }
        let leaf = match self.new_leaf(k, v) {
            Ok(l) => l,
            Err(e) => return Some(Err(e)),
        };
        // Deleted entry for the same byte: reuse its slot.
        if let Some(slot) = self.child_slot(n, m, b) {
            p.store8(
                if m.kind == N256 {
                    SITE_N256
                } else {
                    SITE_REVIVE
                },
                slot,
                leaf,
            );
            p.persist(slot, 8);
            return Some(Ok(()));
        }
        match m.kind {
            N4 | N16 if m.count < capacity(m.kind) => {
                let j = m.count;
                let kw_addr = n.word(2 + j / 8);
                let kw = p.load8(kw_addr) & !(0xff << (8 * (j % 8))) | (b as u64) << (8 * (j % 8));
                let cw = n.word(Self::child_base(m.kind) + j);
                p.store8(SITE_ENTRY, kw_addr, kw);
                p.store8(SITE_ENTRY, cw, leaf);
                self.persist_words(&[kw_addr, cw]);
                p.store8(SITE_COUNT, n, meta_word(m.kind, m.level, m.count + 1));
                p.persist(n, 8);
                Some(Ok(()))
            }
            N48 => match self.n48_free_slot(n, m) {
                Some(s) => {
                    let cw = n.word(N48_CHILD + s);
                    let iw = n.word(2 + b as u64 / 8);
                    p.store8(SITE_ENTRY, cw, leaf);
                    let idx = p.load8(iw) | (s + 1) << (8 * (b as u64 % 8));
                    p.store8(SITE_N48_INDEX, iw, idx);
                    self.persist_words(&[cw, iw]);
                    p.store8(SITE_N48_COUNT, n, meta_word(N48, m.level, s + 1));
                    p.persist(n, 8);
                    Some(Ok(()))
                }
                None => self.grow(parent, n, m, b, leaf),
            },
            _ => self.grow(parent, n, m, b, leaf),
        }
    }

    /// A slot with no child that no index byte refers to, searched from the
    /// count hint.
    fn n48_free_slot(&self, n: PmAddr, m: Meta) -> Option<u64> {
        let mut used = 0u64;
        for i in 0..32 {
            let w = self.pool.load8(n.word(2 + i));
            for j in 0..8 {
                let s = (w >> (8 * j)) & 0xff;
                if s != 0 {
                    used |= 1 << (s - 1);
                }
            }
        }
        (0..48u64)
            .map(|i| (m.count + i) % 48)
            .find(|&s| used & (1 << s) == 0 && self.pool.load8(n.word(N48_CHILD + s)) == 0)
    }

    /// Copies `n` plus a new entry into a node sized for its live children
    /// and swaps it into the parent. Runs with `n` locked.
    fn grow(
        &self,
        parent: Option<(PmAddr, u8)>,
        n: PmAddr,
        m: Meta,
        b: u8,
        leaf: u64,
    ) -> Option<Result<(), IndexError>> {
        let (pn, pb) = parent.expect("root node never fills");
        let _pg = self.lock(pn);
        let pm = self.meta(pn);
        if pm.obsolete || self.find_child(pn, pm, pb) != n.0 {
            return None;
        }
        let scope = smo_scope(&self.pool, SmoKind::ArtGrow, self.smo_id());
        let mut entries = self.children(n, m);
        entries.push((b, leaf));
        entries.sort_by_key(|e| e.0);
        let pw = self.pool.load8(n.word(1));
        let new = match self.build_node(kind_for(entries.len()), m.level, pw, &entries) {
            Ok(x) => x,
            Err(e) => return Some(Err(e)),
        };
        let _ng = self.lock(new);
        let slot = self.child_slot(pn, pm, pb).expect("parent slot");
        self.pool.store8(SITE_GROW, slot, new.0);
        self.pool.persist(slot, 8);
        self.retire(n, m);
        scope.finish();
        self.stats.grows.fetch_add(1, Ordering::Relaxed);
        Some(Ok(()))
    }

    fn retire(&self, n: PmAddr, m: Meta) {
        self.pool
            .store8(SITE_OBSOLETE, n, self.pool.load8(n) | OBSOLETE);
        self.alloc.free(n, node_words(m.kind) * 8, 64);
    }

    /// Two-step path-compression split: install a new inner node above `n`
    /// holding the shared part of the prefix, then shorten `n`'s header.
    #[allow(clippy::too_many_arguments)]
    fn split(
        &self,
        parent: (PmAddr, u8),
        n: PmAddr,
        pw: u64,
        depth: usize,
        i: usize,
        k: &Key,
        v: Value,
    ) -> Option<Result<(), IndexError>> {
        let (pn, pb) = parent;
        let _g = self.lock(n);
        let _pg = self.lock(pn);
        let m = self.meta(n);
        let pm = self.meta(pn);
        if m.obsolete
            || pm.obsolete
            || self.find_child(pn, pm, pb) != n.0
            || self.pool.load8(n.word(1)) != pw
        {
            return None;
        }
        let plen = (pw & 0xff) as usize;
        let mut rk: Option<Option<Key>> = None;
        let mut old_byte = |j: usize| -> u8 {
            if j < STORED_PREFIX {
                stored_byte(pw, j)
            } else {
                rk.get_or_insert_with(|| self.leftmost_key(n))
                    .map_or(0, |r| r.byte(depth + j))
            }
        };
        let scope = smo_scope(&self.pool, SmoKind::ArtSplit, self.smo_id());
        let leaf = match self.new_leaf(k, v) {
            Ok(l) => l,
            Err(e) => return Some(Err(e)),
        };
        let level = depth + i;
        let mut entries = vec![(old_byte(i), n.0), (k.byte(level), leaf)];
        entries.sort_by_key(|e| e.0);
        let ipw = prefix_word(i, |j| k.byte(depth + j));
        let inner = match self.build_node(N4, level, ipw, &entries) {
            Ok(x) => x,
            Err(e) => return Some(Err(e)),
        };
        let _ig = self.lock(inner);
        let npw = {
            let len = plen - i - 1;
            let bytes: Vec<u8> = (0..len.min(STORED_PREFIX))
                .map(|j| old_byte(i + 1 + j))
                .collect();
            prefix_word(len, |j| bytes[j])
        };
        let slot = self.child_slot(pn, pm, pb).expect("parent slot");
        self.pool.store8(SITE_SPLIT_LINK, slot, inner.0);
        self.pool.persist(slot, 8);
        self.pool.store8(SITE_SPLIT_HEADER, n.word(1), npw);
        self.pool.persist(n.word(1), 8);
        scope.finish();
        self.stats.splits.fetch_add(1, Ordering::Relaxed);
        Some(Ok(()))
    }

    fn delete_impl(&self, k: &Key) {
        self.writer_descend(
            k,
            |parent, node, m| self.delete_at(parent, node, m, k),
            // A key that diverges inside a prefix is absent.
            |_, _, _, _, _| Some(()),
        )
    }

    fn delete_at(
        &self,
        parent: Option<(PmAddr, u8)>,
        n: PmAddr,
        seen: Meta,
        k: &Key,
    ) -> Option<()> {
        let b = k.byte(seen.level);
        let _g = self.lock(n);
        let m = self.meta(n);
        if m.obsolete {
            return None;
        }
        let c = self.find_child(n, m, b);
        if c != 0 && !is_leaf(c) {
            return None;
        }
        if c == 0 || self.leaf_key(c) != *k {
            return Some(());
        }
        let slot = self.child_slot(n, m, b).expect("live slot");
        self.pool.store8(SITE_DELETE, slot, 0);
        self.pool.persist(slot, 8);
        let live = self.children(n, m).len();
        let under = match m.kind {
            N4 => live == 0,
            N16 => live <= 3,
            N48 => live <= 12,
            _ => live <= 37,
        };
        if under {
            if let Some((pn, pb)) = parent {
                self.shrink(pn, pb, n, m);
            }
        }
        let size = 8 * (1 + self.key_kind.words() as u64);
        self.alloc
            .free(leaf_addr(c), size, size.next_power_of_two());
        Some(())
    }

    /// Replaces an underfull `n` by a smaller copy, or unlinks an empty N4.
    /// Runs with `n` locked; gives up quietly if the parent moved.
    fn shrink(&self, pn: PmAddr, pb: u8, n: PmAddr, m: Meta) {
        let _pg = self.lock(pn);
        let pm = self.meta(pn);
        if pm.obsolete || self.find_child(pn, pm, pb) != n.0 {
            return;
        }
        let slot = self.child_slot(pn, pm, pb).expect("parent slot");
        let entries = self.children(n, m);
        if entries.is_empty() {
            let scope = smo_scope(&self.pool, SmoKind::ArtPrune, self.smo_id());
            self.pool.store8(SITE_PRUNE, slot, 0);
            self.pool.persist(slot, 8);
            self.retire(n, m);
            scope.finish();
            self.stats.prunes.fetch_add(1, Ordering::Relaxed);
            return;
        }
        let scope = smo_scope(&self.pool, SmoKind::ArtShrink, self.smo_id());
        let pw = self.pool.load8(n.word(1));
        let Ok(new) = self.build_node(kind_for(entries.len()), m.level, pw, &entries) else {
            return;
        };
        let _ng = self.lock(new);
        self.pool.store8(SITE_SHRINK, slot, new.0);
        self.pool.persist(slot, 8);
        self.retire(n, m);
        scope.finish();
        self.stats.shrinks.fetch_add(1, Ordering::Relaxed);
    }

    fn lookup_impl(&self, k: &Key) -> Option<Value> {
        let mut node = self.root();
        let mut depth = 0usize;
        loop {
            let m = self.meta(node);
            let pw = self.pool.load8(node.word(1));
            let plen = (pw & 0xff) as usize;
            // A header whose length disagrees with the level is stale; skip
            // the prefix and let the leaf comparison decide.
            if m.level == depth + plen {
                for i in 0..plen.min(STORED_PREFIX) {
                    if k.byte(depth + i) != stored_byte(pw, i) {
                        return None;
                    }
                }
            }
            if m.level >= k.len() {
                return None;
            }
            let c = self.find_child(node, m, k.byte(m.level));
            if c == 0 {
                return None;
            }
            if is_leaf(c) {
                return (self.leaf_key(c) == *k).then(|| self.leaf_value(c));
            }
            depth = m.level + 1;
            node = PmAddr(c);
        }
    }

    fn range_from(&self, n: PmAddr, lo: &Key, hi: &Key, out: &mut Vec<(Key, Value)>) -> bool {
        let m = self.meta(n);
        // Bytes before `m.level` are shared by the whole subtree; take them
        // from any leaf rather than from headers, which may be stale.
        let mut base: Option<Option<[u8; crate::index::KEY_BYTES]>> = None;
        let (lb, hb) = (lo.bytes(), hi.bytes());
        for (b, c) in self.children(n, m) {
            if is_leaf(c) {
                let key = self.leaf_key(c);
                if key > *hi {
                    return false;
                }
                if key >= *lo {
                    out.push((key, self.leaf_value(c)));
                }
                continue;
            }
            if let Some(mut p) =
                *base.get_or_insert_with(|| self.leftmost_key(n).map(|k| k.bytes()))
            {
                p[m.level] = b;
                let end = m.level + 1;
                if p[..end] < lb[..end] {
                    continue;
                }
                if p[..end] > hb[..end] {
                    return false;
                }
            }
            if !self.range_from(PmAddr(c), lo, hi, out) {
                return false;
            }
        }
        true
    }

    /// Number of reachable inner nodes whose header disagrees with their
    /// level. Quiesced only.
    pub fn stale_headers(&self) -> usize {
        let mut stale = 0;
        let mut stack = vec![(self.root(), 0usize)];
        while let Some((n, depth)) = stack.pop() {
            let m = self.meta(n);
            let pw = self.pool.load8(n.word(1));
            if m.level != depth + (pw & 0xff) as usize {
                stale += 1;
            }
            for (_, c) in self.children(n, m) {
                if !is_leaf(c) {
                    stack.push((PmAddr(c), m.level + 1));
                }
            }
        }
        stale
    }

    fn check_node(
        &self,
        n: PmAddr,
        depth: usize,
        path: &mut Vec<(usize, u8)>,
    ) -> Result<(), String> {
        let m = self.meta(n);
        if m.obsolete {
            return Err(format!("obsolete node {n:?} is reachable"));
        }
        let pw = self.pool.load8(n.word(1));
        let plen = (pw & 0xff) as usize;
        if m.level != depth + plen {
            return Err(format!(
                "node {n:?}: level {} != depth {depth} + prefix {plen}",
                m.level
            ));
        }
        let children = self.children(n, m);
        if let Some(rk) = self.leftmost_key(n) {
            for j in 0..plen.min(STORED_PREFIX) {
                if stored_byte(pw, j) != rk.byte(depth + j) {
                    return Err(format!(
                        "node {n:?}: stored prefix byte {j} disagrees with its leaves"
                    ));
                }
            }
        }
        for (b, c) in children {
            path.push((m.level, b));
            if is_leaf(c) {
                let key = self.leaf_key(c);
                if let Some((lvl, byte)) = path.iter().find(|(l, x)| key.byte(*l) != *x) {
                    return Err(format!("leaf {key:?} under byte {byte} at level {lvl}"));
                }
            } else {
                self.check_node(PmAddr(c), m.level + 1, path)?;
            }
            path.pop();
        }
        Ok(())
    }
}

impl PmIndex for PArt {
    fn kind(&self) -> IndexKind {
        IndexKind::Art
    }

    fn key_kind(&self) -> KeyKind {
        self.key_kind
    }

    fn insert(&self, key: &Key, value: Value) -> Result<(), IndexError> {
        check_pair(self.key_kind, key, value)?;
        self.insert_impl(key, value)
    }

    fn lookup(&self, key: &Key) -> Option<Value> {
        if key.kind() != self.key_kind || key.is_reserved() {
            return None;
        }
        self.lookup_impl(key)
    }

    fn delete(&self, key: &Key) -> Result<(), IndexError> {
        check_key(self.key_kind, key)?;
        self.delete_impl(key);
        Ok(())
    }

    fn range_query(&self, lo: &Key, hi: &Key) -> Result<Vec<(Key, Value)>, IndexError> {
        if lo.kind() != self.key_kind || hi.kind() != self.key_kind {
            return Err(IndexError::KeyKindMismatch);
        }
        let mut out = Vec::new();
        if lo <= hi {
            self.range_from(self.root(), lo, hi, &mut out);
        }
        Ok(out)
    }

    fn pool(&self) -> &Arc<PmemPool> {
        &self.pool
    }

    fn allocator(&self) -> &PmAllocator {
        &self.alloc
    }

    fn reachability(&self, allocs: &[Allocation]) -> ReachabilityReport {
        reachability_report(allocs, &[self.root()], |a| {
            if is_leaf(a.0) {
                return Vec::new();
            }
            let m = self.meta(a);
            if m.kind == 0 || m.kind > N256 {
                return Vec::new();
            }
            self.children(a, m)
                .into_iter()
                .map(|(_, c)| PmAddr(c))
                .collect()
        })
    }

    fn check_structure(&self) -> Result<(), String> {
        self.check_node(self.root(), 0, &mut Vec::new())
    }

    fn stats(&self) -> Vec<(&'static str, u64)> {
        let s = &self.stats;
        let g = |a: &AtomicU64| a.load(Ordering::Relaxed);
        vec![
            ("splits", g(&s.splits)),
            ("grows", g(&s.grows)),
            ("shrinks", g(&s.shrinks)),
            ("prunes", g(&s.prunes)),
            ("fixes", g(&s.fixes)),
            ("fix_transient", g(&s.transient)),
            ("fix_consistent", g(&s.fix_consistent)),
            ("fix_fallback", g(&s.fix_fallback)),
            ("restarts", g(&s.restarts)),
        ]
    }
}
