//! P-BwTree: a simplified persistent Bw-tree.
//!
//! Every node is a chain of delta records ending in a base node, reachable
//! through a mapping-table slot that is only ever swung by compare-and-swap.
//! Splits follow the two-step B-link scheme (split delta on the left node,
//! then an index entry on the parent) and merges run as four CAS steps
//! (intent on the parent, remove-node on the victim, merge delta on the left
//! neighbour, index delete on the parent). A writer that runs into an
//! unfinished SMO completes it first; before doing so it flushes the slots
//! it loaded so that the state it builds on is durable. Readers never
//! restart: they follow side links and read through merge records.
//!
//! Record layouts (words):
//! * delta: `kind | depth << 8 | leaf << 16`, next, key[3], a, b
//! * base: `kind | leaf << 16 | count << 24 | high_inf << 56`, right id,
//!   low[3], high[3], then `count` pairs of key words and a value word.

mod record;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::index::{
    check_key, check_pair, smo_scope, IndexError, IndexKind, IndexOptions, Key, KeyKind, Mutation,
    OpenError, PmIndex, SmoKind, Value,
};
use crate::pm::{
    reachability_report, Allocation, PmAddr, PmAllocator, PmemPool, ReachabilityReport, Site,
};

use record::*;
pub use record::{CONSOLIDATE_DEPTH, MAPPING_CAPACITY, MAX_PAIRS, MIN_PAIRS};

const MAGIC: u64 = u64::from_le_bytes(*b"PBWT0001");
const ROOT: PmAddr = PmAddr(0);
const ROOT_TABLE: PmAddr = PmAddr(8);
const ROOT_SLOT: PmAddr = PmAddr(16);
const ROOT_KIND: PmAddr = PmAddr(24);
const ROOT_NEXT_ID: PmAddr = PmAddr(32);
const ROOT_CAPACITY: PmAddr = PmAddr(40);

pub const SITE_RECORD: Site = Site::new("bw.record.init");
pub const SITE_SLOT_INIT: Site = Site::new("bw.slot.init");
pub const SITE_ID: Site = Site::new("bw.id");
pub const SITE_UPDATE: Site = Site::new("bw.update.cas").publish();
pub const SITE_CONSOLIDATE: Site = Site::new("bw.consolidate.cas").publish();
pub const SITE_SPLIT: Site = Site::new("bw.split.cas").publish().hot();
pub const SITE_INDEX_INSERT: Site = Site::new("bw.index_insert.cas").publish();
pub const SITE_ROOT: Site = Site::new("bw.root.cas").publish();
pub const SITE_INTENT: Site = Site::new("bw.merge.intent.cas").publish().hot();
pub const SITE_REMOVE: Site = Site::new("bw.merge.remove.cas").publish().hot();
pub const SITE_MERGE: Site = Site::new("bw.merge.delta.cas").publish().hot();
pub const SITE_INDEX_DELETE: Site = Site::new("bw.merge.index_delete.cas").publish();
const SITE_INIT: Site = Site::new("bw.init").no_preempt();

pub const CRASH_SITES: &[Site] = &[
    SITE_RECORD,
    SITE_SLOT_INIT,
    SITE_ID,
    SITE_UPDATE,
    SITE_CONSOLIDATE,
    SITE_SPLIT,
    SITE_INDEX_INSERT,
    SITE_ROOT,
    SITE_INTENT,
    SITE_REMOVE,
    SITE_MERGE,
    SITE_INDEX_DELETE,
];

#[derive(Default)]
struct Stats {
    consolidations: AtomicU64,
    splits: AtomicU64,
    root_splits: AtomicU64,
    merges: AtomicU64,
    help_split: AtomicU64,
    help_merge: AtomicU64,
    cas_failures: AtomicU64,
    read_restarts: AtomicU64,
}

pub struct PBwTree {
    pool: Arc<PmemPool>,
    alloc: PmAllocator,
    table: PmAddr,
    key_kind: KeyKind,
    skip_helper_flush: bool,
    stats: Stats,
}

enum Route {
    Child(u64),
    /// Move right; carries the split delta that sent us there, if any.
    Right(u64, Option<(KeyW, u64)>),
}

enum Probe {
    Found(u64),
    Absent,
    Right(u64, Option<(KeyW, u64)>),
}

/// Fully replayed node state.
#[derive(Clone, Debug)]
struct Node {
    leaf: bool,
    low: KeyW,
    high: Option<KeyW>,
    right: u64,
    entries: Vec<(KeyW, u64)>,
}

impl PBwTree {
    pub fn open(pool: Arc<PmemPool>, opts: &IndexOptions) -> Result<PBwTree, OpenError> {
        let magic = pool.load8(ROOT);
        if magic != 0 && magic != MAGIC {
            return Err(OpenError::BadMagic(magic));
        }
        let alloc = PmAllocator::open(pool.clone(), opts.track_allocations)?;
        alloc.set_recycling(opts.recycle);
        let (table, key_kind) = if magic == 0 {
            let table = alloc.alloc(8 * MAPPING_CAPACITY, 4096, "bw.table")?;
            let t = PBwTree::with(pool.clone(), alloc, table, opts.key_kind, opts);
            let base = t.build_base(&Node {
                leaf: true,
                low: NEG_INF,
                high: None,
                right: 0,
                entries: Vec::new(),
            })?;
            t.pool.store8(SITE_INIT, t.slot_addr(1), base.0);
            t.pool.store8(SITE_INIT, t.slot_addr(0), 1);
            t.pool.persist(t.slot_addr(0), 16);
            t.pool.store8(SITE_INIT, ROOT_TABLE, table.0);
            t.pool.store8(SITE_INIT, ROOT_SLOT, 0);
            t.pool.store8(SITE_INIT, ROOT_KIND, opts.key_kind.code());
            t.pool.store8(SITE_INIT, ROOT_NEXT_ID, 2);
            t.pool.store8(SITE_INIT, ROOT_CAPACITY, MAPPING_CAPACITY);
            t.pool.store8(SITE_INIT, ROOT, MAGIC);
            t.pool.persist(ROOT, 48);
            return Ok(t);
        } else {
            let kind = KeyKind::from_code(pool.load8(ROOT_KIND))
                .ok_or_else(|| OpenError::Corrupt("bad key kind".into()))?;
            (PmAddr(pool.load8(ROOT_TABLE)), kind)
        };
        if table.is_null() || pool.load8(ROOT_CAPACITY) != MAPPING_CAPACITY {
            return Err(OpenError::Corrupt("bad mapping table".into()));
        }
        Ok(PBwTree::with(pool, alloc, table, key_kind, opts))
    }

    fn with(
        pool: Arc<PmemPool>,
        alloc: PmAllocator,
        table: PmAddr,
        key_kind: KeyKind,
        opts: &IndexOptions,
    ) -> PBwTree {
        PBwTree {
            pool,
            alloc,
            table,
            key_kind,
            skip_helper_flush: opts.mutation == Some(Mutation::BwTreeSkipHelperFlush),
            stats: Stats::default(),
        }
    }

    fn kw(&self) -> usize {
        self.key_kind.words()
    }

    fn slot_addr(&self, id: u64) -> PmAddr {
        self.table.word(id)
    }

    fn slot(&self, id: u64) -> PmAddr {
        PmAddr(self.pool.load8(self.slot_addr(id)))
    }

    fn root_id(&self) -> u64 {
        self.pool.load8(self.slot_addr(0))
    }

    fn rec(&self, a: PmAddr) -> Rec {
        Rec::load(&self.pool, a)
    }

    fn base(&self, a: PmAddr) -> Base<'_> {
        Base::load(&self.pool, a, self.kw())
    }

    /// Skips a remove-node record at the head of a merged node's chain.
    fn content(&self, a: PmAddr) -> PmAddr {
        let r = self.rec(a);
        if r.kind == REMOVE_NODE {
            r.next
        } else {
            a
        }
    }

    fn alloc_id(&self) -> Result<u64, IndexError> {
        loop {
            let cur = self.pool.load8(ROOT_NEXT_ID);
            if cur >= MAPPING_CAPACITY {
                return Err(IndexError::PoolFull);
            }
            if self.pool.cas8(SITE_ID, ROOT_NEXT_ID, cur, cur + 1).is_ok() {
                self.pool.persist(ROOT_NEXT_ID, 8);
                return Ok(cur);
            }
        }
    }

    fn new_delta(
        &self,
        kind: u64,
        leaf: bool,
        next: PmAddr,
        key: KeyW,
        a: u64,
        b: u64,
    ) -> Result<PmAddr, IndexError> {
        let depth = if next.is_null() {
            0
        } else {
            self.rec(next).depth + 1
        };
        let d = self.alloc.alloc(64, 64, "bw.delta")?;
        let p = &*self.pool;
        p.store8(SITE_RECORD, d, header(kind, depth, leaf));
        p.store8(SITE_RECORD, d.word(1), next.0);
        for (i, w) in key.iter().enumerate() {
            if *w != 0 {
                p.store8(SITE_RECORD, d.word(2 + i as u64), *w);
            }
        }
        if a != 0 {
            p.store8(SITE_RECORD, d.word(5), a);
        }
        if b != 0 {
            p.store8(SITE_RECORD, d.word(6), b);
        }
        p.persist(d, 56);
        Ok(d)
    }

    fn build_base(&self, n: &Node) -> Result<PmAddr, IndexError> {
        let kw = self.kw() as u64;
        let words = BASE_PAIRS + n.entries.len() as u64 * (kw + 1);
        let a = self.alloc.alloc(words * 8, 64, "bw.base")?;
        let p = &*self.pool;
        let kind = if n.leaf { BASE_LEAF } else { BASE_INNER };
        p.store8(
            SITE_RECORD,
            a,
            base_header(kind, n.leaf, n.entries.len() as u64, n.high.is_none()),
        );
        if n.right != 0 {
            p.store8(SITE_RECORD, a.word(1), n.right);
        }
        let put = |off: u64, w: u64| {
            if w != 0 {
                p.store8(SITE_RECORD, a.word(off), w);
            }
        };
        for i in 0..3 {
            put(2 + i, n.low[i as usize]);
            put(5 + i, n.high.map_or(0, |h| h[i as usize]));
        }
        for (j, (k, v)) in n.entries.iter().enumerate() {
            let off = BASE_PAIRS + j as u64 * (kw + 1);
            for i in 0..kw {
                put(off + i, k[i as usize]);
            }
            put(off + kw, *v);
        }
        p.persist(a, words * 8);
        Ok(a)
    }

    /// CAS a slot and, on success, persist it.
    fn swing(&self, site: Site, id: u64, old: PmAddr, new: PmAddr) -> bool {
        let s = self.slot_addr(id);
        if self.pool.cas8(site, s, old.0, new.0).is_ok() {
            self.pool.persist(s, 8);
            true
        } else {
            self.stats.cas_failures.fetch_add(1, Ordering::Relaxed);
            false
        }
    }

    /// Flush-after-load for helpers: whatever SMO state was read from these
    /// slots must be durable before anything is built on top of it.
    fn helper_flush(&self, ids: &[u64]) {
        if self.skip_helper_flush {
            return;
        }
        for id in ids {
            self.pool.flush_line(self.slot_addr(*id));
        }
        self.pool.fence();
    }

    fn materialize(&self, head: PmAddr) -> Node {
        let mut over: BTreeMap<KeyW, Option<u64>> = BTreeMap::new();
        let mut bound: Option<(Option<KeyW>, u64)> = None;
        // Records older than a split delta only own keys below its separator,
        // even if a later merge widens the node again.
        let mut cap: Option<KeyW> = None;
        let put =
            |over: &mut BTreeMap<KeyW, Option<u64>>, cap: Option<KeyW>, k: KeyW, v: Option<u64>| {
                if cap.is_none_or(|c| k < c) {
                    over.entry(k).or_insert(v);
                }
            };
        let mut cur = head;
        loop {
            let r = self.rec(cur);
            match r.kind {
                INSERT | INDEX_INSERT => put(&mut over, cap, r.key, Some(r.a)),
                DELETE | INDEX_DELETE => put(&mut over, cap, r.key, None),
                SPLIT => {
                    bound.get_or_insert((Some(r.key), r.a));
                    cap = Some(cap.map_or(r.key, |c| c.min(r.key)));
                }
                MERGE => {
                    let c = self.materialize(self.content(PmAddr(r.b)));
                    bound.get_or_insert((c.high, c.right));
                    for (k, v) in c.entries {
                        put(&mut over, cap, k, Some(v));
                    }
                }
                MERGE_INTENT | REMOVE_NODE => {}
                _ => {
                    let b = self.base(cur);
                    let (high, right) = bound.unwrap_or((b.high(), b.right()));
                    for i in 0..b.count() {
                        put(&mut over, cap, b.key(i), Some(b.value(i)));
                    }
                    let low = b.low();
                    let entries = over
                        .into_iter()
                        .filter_map(|(k, v)| v.map(|v| (k, v)))
                        .filter(|(k, _)| *k >= low && high.is_none_or(|h| *k < h))
                        .collect();
                    return Node {
                        leaf: b.leaf(),
                        low,
                        high,
                        right,
                        entries,
                    };
                }
            }
            cur = r.next;
        }
    }

    fn route(&self, head: PmAddr, k: &KeyW) -> Route {
        let mut best: Option<(KeyW, u64)> = None;
        let mut deleted: Vec<KeyW> = Vec::new();
        let mut cur = head;
        loop {
            let r = self.rec(cur);
            match r.kind {
                INDEX_INSERT => {
                    if r.key <= *k
                        && !deleted.contains(&r.key)
                        && best.is_none_or(|(s, _)| r.key > s)
                    {
                        best = Some((r.key, r.a));
                    }
                }
                INDEX_DELETE => deleted.push(r.key),
                SPLIT if *k >= r.key => return Route::Right(r.a, Some((r.key, r.a))),
                SPLIT | MERGE_INTENT | REMOVE_NODE => {}
                _ => {
                    let b = self.base(cur);
                    if b.high().is_some_and(|h| *k >= h) {
                        return Route::Right(b.right(), None);
                    }
                    let mut i = b.upper_bound(k);
                    while i > 0 && deleted.contains(&b.key(i - 1)) {
                        i -= 1;
                    }
                    if i > 0 {
                        let s = b.key(i - 1);
                        if best.is_none_or(|(bs, _)| s > bs) {
                            best = Some((s, b.value(i - 1)));
                        }
                    }
                    return Route::Child(best.expect("inner node covers its low key").1);
                }
            }
            cur = r.next;
        }
    }

    fn probe(&self, head: PmAddr, k: &KeyW) -> Probe {
        let mut cur = head;
        loop {
            let r = self.rec(cur);
            match r.kind {
                INSERT if r.key == *k => return Probe::Found(r.a),
                DELETE if r.key == *k => return Probe::Absent,
                SPLIT if *k >= r.key => return Probe::Right(r.a, Some((r.key, r.a))),
                MERGE if *k >= r.key => {
                    cur = self.content(PmAddr(r.b));
                    continue;
                }
                INSERT | DELETE | SPLIT | MERGE | REMOVE_NODE => {}
                _ => {
                    let b = self.base(cur);
                    if b.high().is_some_and(|h| *k >= h) {
                        return Probe::Right(b.right(), None);
                    }
                    return match b.find(k) {
                        Some(v) => Probe::Found(v),
                        None => Probe::Absent,
                    };
                }
            }
            cur = r.next;
        }
    }

    /// Merge intent on an inner chain without a matching index delete.
    fn pending_intent(&self, head: PmAddr) -> Option<(KeyW, u64, u64)> {
        let mut done: Vec<u64> = Vec::new();
        let mut cur = head;
        loop {
            let r = self.rec(cur);
            match r.kind {
                INDEX_DELETE => done.push(r.a),
                MERGE_INTENT if !done.contains(&r.a) => return Some((r.key, r.a, r.b)),
                BASE_LEAF | BASE_INNER => return None,
                _ => {}
            }
            cur = r.next;
        }
    }

    fn low_of(&self, head: PmAddr) -> KeyW {
        let mut cur = head;
        loop {
            let r = self.rec(cur);
            if r.kind == BASE_LEAF || r.kind == BASE_INNER {
                return self.base(cur).low();
            }
            cur = r.next;
        }
    }

    fn reader_find(&self, k: &KeyW) -> (u64, bool) {
        let mut id = self.root_id();
        let mut via_right = false;
        loop {
            let head = self.slot(id);
            let r = self.rec(head);
            if r.kind == REMOVE_NODE && !via_right {
                id = r.a;
                continue;
            }
            if !r.leaf {
                match self.route(head, k) {
                    Route::Child(c) => {
                        id = c;
                        via_right = false;
                    }
                    Route::Right(rid, _) => {
                        id = rid;
                        via_right = true;
                    }
                }
                continue;
            }
            return (id, via_right);
        }
    }

    fn lookup_impl(&self, k: &KeyW) -> Option<u64> {
        let (mut id, _) = self.reader_find(k);
        loop {
            match self.probe(self.slot(id), k) {
                Probe::Found(v) => return Some(v),
                Probe::Absent => return None,
                Probe::Right(r, _) if r != 0 => id = r,
                Probe::Right(..) => {
                    self.stats.read_restarts.fetch_add(1, Ordering::Relaxed);
                    return None;
                }
            }
        }
    }

    /// Writer descent: completes every unfinished SMO it runs into and
    /// returns the leaf that owns `k` with the head it observed.
    fn writer_find(&self, k: &KeyW) -> (u64, PmAddr, Vec<u64>) {
        'restart: loop {
            let mut path: Vec<u64> = Vec::new();
            let mut id = self.root_id();
            loop {
                let head = self.slot(id);
                let r = self.rec(head);
                if r.kind == REMOVE_NODE {
                    self.complete_merge(r.b, r.key, id, r.a);
                    continue 'restart;
                }
                if !r.leaf {
                    if let Some((sep, v, l)) = self.pending_intent(head) {
                        self.complete_merge(id, sep, v, l);
                        continue 'restart;
                    }
                    match self.route(head, k) {
                        Route::Child(c) => {
                            path.push(id);
                            id = c;
                        }
                        Route::Right(rid, split) => {
                            if let Some((sep, rr)) = split {
                                self.help_split(id, sep, rr, &path);
                            }
                            id = rid;
                        }
                    }
                    continue;
                }
                match self.probe(head, k) {
                    Probe::Right(rid, split) => {
                        if let Some((sep, rr)) = split {
                            self.help_split(id, sep, rr, &path);
                        }
                        id = rid;
                    }
                    _ => return (id, head, path),
                }
            }
        }
    }

    fn update(&self, k: &KeyW, value: Option<u64>) -> Result<(), IndexError> {
        loop {
            let (id, head, path) = self.writer_find(k);
            if value.is_none() && matches!(self.probe(head, k), Probe::Absent) {
                return Ok(());
            }
            let d = match value {
                Some(v) => self.new_delta(INSERT, true, head, *k, v, 0)?,
                None => self.new_delta(DELETE, true, head, *k, 0, 0)?,
            };
            if self.swing(SITE_UPDATE, id, head, d) {
                if self.rec(d).depth >= CONSOLIDATE_DEPTH {
                    self.consolidate(id, &path);
                }
                return Ok(());
            }
            self.alloc.free(d, 64, 64);
            self.pool.spin_hint();
        }
    }

    /// Step two of a split: post the index entry for `r` on the parent, or
    /// grow a new root. Idempotent.
    fn help_split(&self, l: u64, sep: KeyW, r: u64, path: &[u64]) {
        let scope = smo_scope(&self.pool, SmoKind::BwSplit, r);
        self.stats.help_split.fetch_add(1, Ordering::Relaxed);
        self.helper_flush(&[l]);
        match path.last() {
            None => {
                if self.root_id() == l {
                    self.root_swing(l, sep, r);
                }
            }
            Some(&p0) => {
                let mut p = p0;
                loop {
                    let ph = self.slot(p);
                    if self.rec(ph).kind == REMOVE_NODE || sep < self.low_of(ph) {
                        break;
                    }
                    match self.route(ph, &sep) {
                        Route::Right(rid, _) if rid != 0 => p = rid,
                        Route::Right(..) => break,
                        Route::Child(c) if c == r => break,
                        Route::Child(_) => {
                            let Ok(d) = self.new_delta(INDEX_INSERT, false, ph, sep, r, 0) else {
                                break;
                            };
                            if self.swing(SITE_INDEX_INSERT, p, ph, d) {
                                if self.rec(d).depth >= CONSOLIDATE_DEPTH {
                                    let up = &path[..path.len() - 1];
                                    scope.finish();
                                    self.consolidate(p, up);
                                    return;
                                }
                                break;
                            }
                            self.alloc.free(d, 64, 64);
                        }
                    }
                }
            }
        }
        scope.finish();
    }

    fn root_swing(&self, l: u64, sep: KeyW, r: u64) {
        let Ok(nr) = self.alloc_id() else { return };
        let node = Node {
            leaf: false,
            low: NEG_INF,
            high: None,
            right: 0,
            entries: vec![(NEG_INF, l), (sep, r)],
        };
        let Ok(base) = self.build_base(&node) else {
            return;
        };
        self.pool.store8(SITE_SLOT_INIT, self.slot_addr(nr), base.0);
        self.pool.persist(self.slot_addr(nr), 8);
        let s0 = self.slot_addr(0);
        if self.pool.cas8(SITE_ROOT, s0, l, nr).is_ok() {
            self.pool.persist(s0, 8);
            self.stats.root_splits.fetch_add(1, Ordering::Relaxed);
        }
    }

    /// Completes every unfinished SMO recorded in the chain of `id`.
    /// Returns true if it had to act.
    fn finish_smos(&self, id: u64, head: PmAddr, path: &[u64]) -> bool {
        let mut acted = false;
        let leaf = self.rec(head).leaf;
        if !leaf {
            if let Some((sep, v, l)) = self.pending_intent(head) {
                self.complete_merge(id, sep, v, l);
                acted = true;
            }
        }
        let mut cur = head;
        loop {
            let r = self.rec(cur);
            match r.kind {
                SPLIT => {
                    if !self.split_done(id, r.key, r.a, path) {
                        self.help_split(id, r.key, r.a, path);
                        acted = true;
                    }
                }
                MERGE => {
                    let rm = self.rec(PmAddr(r.b));
                    if rm.kind == REMOVE_NODE && !self.merge_done(rm.b, r.key, r.a) {
                        self.complete_merge(rm.b, r.key, r.a, rm.a);
                        acted = true;
                    }
                }
                BASE_LEAF | BASE_INNER => return acted,
                _ => {}
            }
            cur = r.next;
        }
    }

    fn split_done(&self, l: u64, sep: KeyW, r: u64, path: &[u64]) -> bool {
        let Some(&p0) = path.last() else {
            return self.root_id() != l;
        };
        let mut p = p0;
        loop {
            let ph = self.slot(p);
            if self.rec(ph).kind == REMOVE_NODE || sep < self.low_of(ph) {
                return true;
            }
            match self.route(ph, &sep) {
                Route::Right(rid, _) if rid != 0 => p = rid,
                Route::Right(..) => return true,
                Route::Child(c) => return c == r,
            }
        }
    }

    fn merge_done(&self, p: u64, sep: KeyW, v: u64) -> bool {
        !matches!(self.route(self.slot(p), &sep), Route::Child(c) if c == v)
    }

    fn consolidate(&self, id: u64, path: &[u64]) {
        for _ in 0..4 {
            let head = self.slot(id);
            let r = self.rec(head);
            if r.kind == REMOVE_NODE || r.depth < CONSOLIDATE_DEPTH {
                return;
            }
            if self.finish_smos(id, head, path) {
                continue;
            }
            let node = self.materialize(head);
            if node.entries.len() > MAX_PAIRS {
                self.split(id, head, &node, path);
                return;
            }
            let is_root = self.root_id() == id;
            if node.leaf
                && node.entries.len() < MIN_PAIRS
                && !is_root
                && self.try_merge(id, &node, path)
            {
                return;
            }
            let Ok(base) = self.build_base(&node) else {
                return;
            };
            let scope = smo_scope(&self.pool, SmoKind::BwConsolidate, base.0 >> 6);
            if self.swing(SITE_CONSOLIDATE, id, head, base) {
                self.retire_chain(head);
                self.stats.consolidations.fetch_add(1, Ordering::Relaxed);
            } else {
                self.free_base(base, &node);
            }
            scope.finish();
            return;
        }
    }

    fn free_base(&self, a: PmAddr, n: &Node) {
        let kw = self.kw() as u64;
        self.alloc
            .free(a, (BASE_PAIRS + n.entries.len() as u64 * (kw + 1)) * 8, 64);
    }

    /// Defers reuse of a replaced chain. Merge content belongs to the victim
    /// and stays.
    fn retire_chain(&self, head: PmAddr) {
        let kw = self.kw() as u64;
        let mut cur = head;
        loop {
            let r = self.rec(cur);
            if r.kind == BASE_LEAF || r.kind == BASE_INNER {
                let b = self.base(cur);
                self.alloc
                    .free(cur, (BASE_PAIRS + b.count() * (kw + 1)) * 8, 64);
                return;
            }
            self.alloc.free(cur, 64, 64);
            cur = r.next;
        }
    }

    fn split(&self, id: u64, head: PmAddr, node: &Node, path: &[u64]) {
        let mid = node.entries.len() / 2;
        let sep = node.entries[mid].0;
        let Ok(r) = self.alloc_id() else { return };
        let scope = smo_scope(&self.pool, SmoKind::BwSplit, r);
        let right = Node {
            leaf: node.leaf,
            low: sep,
            high: node.high,
            right: node.right,
            entries: node.entries[mid..].to_vec(),
        };
        let Ok(base) = self.build_base(&right) else {
            return;
        };
        self.pool.store8(SITE_SLOT_INIT, self.slot_addr(r), base.0);
        self.pool.persist(self.slot_addr(r), 8);
        let Ok(d) = self.new_delta(SPLIT, node.leaf, head, sep, r, 0) else {
            return;
        };
        if !self.swing(SITE_SPLIT, id, head, d) {
            self.alloc.free(d, 64, 64);
            return;
        }
        self.stats.splits.fetch_add(1, Ordering::Relaxed);
        scope.finish();
        self.help_split(id, sep, r, path);
    }

    /// Starts merging underfull leaf `v` into its left neighbour. Returns
    /// false if the preconditions do not hold.
    fn try_merge(&self, v: u64, node: &Node, path: &[u64]) -> bool {
        let Some(&p) = path.last() else { return false };
        let ph = self.slot(p);
        let pr = self.rec(ph);
        if pr.kind == REMOVE_NODE || pr.leaf || self.pending_intent(ph).is_some() {
            return false;
        }
        let pn = self.materialize(ph);
        let Some(j) = pn.entries.iter().position(|e| e.1 == v) else {
            return false;
        };
        if j == 0 || pn.entries[j].0 != node.low {
            return false;
        }
        let (sep, l) = (pn.entries[j].0, pn.entries[j - 1].1);
        let scope = smo_scope(&self.pool, SmoKind::BwMerge, v);
        let Ok(d) = self.new_delta(MERGE_INTENT, false, ph, sep, v, l) else {
            return false;
        };
        if !self.swing(SITE_INTENT, p, ph, d) {
            self.alloc.free(d, 64, 64);
            return false;
        }
        scope.finish();
        self.stats.merges.fetch_add(1, Ordering::Relaxed);
        self.complete_merge(p, sep, v, l);
        true
    }

    /// Steps two to four of a merge of `v` (separator `sep`, parent `p`,
    /// left neighbour `l`). Idempotent; every step checks whether it already
    /// happened.
    fn complete_merge(&self, p: u64, sep: KeyW, v: u64, l: u64) {
        let scope = smo_scope(&self.pool, SmoKind::BwMerge, v);
        self.stats.help_merge.fetch_add(1, Ordering::Relaxed);
        self.helper_flush(&[p]);
        // Step 2: freeze the victim.
        loop {
            let h = self.slot(v);
            if self.rec(h).kind == REMOVE_NODE {
                break;
            }
            let Ok(d) = self.new_delta(REMOVE_NODE, true, h, sep, l, p) else {
                return;
            };
            if self.swing(SITE_REMOVE, v, h, d) {
                break;
            }
            self.alloc.free(d, 64, 64);
        }
        self.helper_flush(&[v]);
        // Step 3: the node whose right link is the victim absorbs it.
        let content = self.slot(v);
        let mut x = l;
        loop {
            let h = self.slot(x);
            if self.has_merge(h, v) {
                break;
            }
            let n = self.header_view(h);
            if n.1 == v {
                let Ok(d) = self.new_delta(MERGE, true, h, sep, v, content.0) else {
                    return;
                };
                if self.swing(SITE_MERGE, x, h, d) {
                    break;
                }
                self.alloc.free(d, 64, 64);
                continue;
            }
            if n.0.is_none_or(|hi| hi > sep) || n.1 == 0 {
                break;
            }
            x = n.1;
        }
        self.helper_flush(&[x]);
        // Step 4: drop the separator from the parent.
        loop {
            let ph = self.slot(p);
            if !matches!(self.route(ph, &sep), Route::Child(c) if c == v) {
                break;
            }
            let Ok(d) = self.new_delta(INDEX_DELETE, false, ph, sep, v, l) else {
                return;
            };
            if self.swing(SITE_INDEX_DELETE, p, ph, d) {
                break;
            }
            self.alloc.free(d, 64, 64);
        }
        scope.finish();
    }

    fn has_merge(&self, head: PmAddr, v: u64) -> bool {
        let mut cur = head;
        loop {
            let r = self.rec(cur);
            match r.kind {
                MERGE if r.a == v => return true,
                BASE_LEAF | BASE_INNER => return false,
                _ => cur = r.next,
            }
        }
    }

    /// (high, right) of a chain without replaying its entries.
    fn header_view(&self, head: PmAddr) -> (Option<KeyW>, u64) {
        let mut cur = head;
        loop {
            let r = self.rec(cur);
            match r.kind {
                SPLIT => return (Some(r.key), r.a),
                MERGE => return self.header_view(self.content(PmAddr(r.b))),
                BASE_LEAF | BASE_INNER => {
                    let b = self.base(cur);
                    return (b.high(), b.right());
                }
                _ => cur = r.next,
            }
        }
    }

    fn range_impl(&self, lo: &KeyW, hi: &KeyW) -> Vec<(KeyW, u64)> {
        let mut out = Vec::new();
        let (mut id, _) = self.reader_find(lo);
        let mut guard = 0u64;
        while id != 0 {
            guard += 1;
            if guard > MAPPING_CAPACITY {
                self.stats.read_restarts.fetch_add(1, Ordering::Relaxed);
                break;
            }
            let n = self.materialize(self.content(self.slot(id)));
            for (k, v) in &n.entries {
                if k >= lo && k <= hi {
                    out.push((*k, *v));
                }
            }
            match n.high {
                Some(h) if h <= *hi => id = n.right,
                _ => break,
            }
        }
        out
    }

    fn to_kw(&self, k: &Key) -> KeyW {
        k.to_words()
    }

    /// Leaf ids from left to right, following right links from the
    /// leftmost leaf. Quiesced only.
    fn leaf_chain(&self) -> Vec<(u64, Node)> {
        let (mut id, _) = self.reader_find(&NEG_INF);
        let mut out = Vec::new();
        while id != 0 && out.len() as u64 <= MAPPING_CAPACITY {
            let n = self.materialize(self.content(self.slot(id)));
            let next = n.right;
            out.push((id, n));
            id = next;
        }
        out
    }
}

impl PmIndex for PBwTree {
    fn kind(&self) -> IndexKind {
        IndexKind::BwTree
    }

    fn key_kind(&self) -> KeyKind {
        self.key_kind
    }

    fn insert(&self, key: &Key, value: Value) -> Result<(), IndexError> {
        check_pair(self.key_kind, key, value)?;
        self.update(&self.to_kw(key), Some(value))
    }

    fn lookup(&self, key: &Key) -> Option<Value> {
        if key.kind() != self.key_kind || key.is_reserved() {
            return None;
        }
        self.lookup_impl(&self.to_kw(key))
    }

    fn delete(&self, key: &Key) -> Result<(), IndexError> {
        check_key(self.key_kind, key)?;
        self.update(&self.to_kw(key), None)
    }

    fn range_query(&self, lo: &Key, hi: &Key) -> Result<Vec<(Key, Value)>, IndexError> {
        if lo.kind() != self.key_kind || hi.kind() != self.key_kind {
            return Err(IndexError::KeyKindMismatch);
        }
        if lo > hi {
            return Ok(Vec::new());
        }
        let kind = self.key_kind;
        Ok(self
            .range_impl(&self.to_kw(lo), &self.to_kw(hi))
            .into_iter()
            .map(|(k, v)| (Key::from_words(kind, &k), v))
            .collect())
    }

    fn pool(&self) -> &Arc<PmemPool> {
        &self.pool
    }

    fn allocator(&self) -> &PmAllocator {
        &self.alloc
    }

    fn reachability(&self, allocs: &[Allocation]) -> ReachabilityReport {
        let next_id = self.pool.load8(ROOT_NEXT_ID);
        let table = self.table;
        reachability_report(allocs, &[table], |a| {
            if a == table {
                return (1..next_id)
                    .map(|id| self.slot(id))
                    .filter(|h| !h.is_null())
                    .collect();
            }
            let r = self.rec(a);
            match r.kind {
                BASE_LEAF | BASE_INNER => Vec::new(),
                MERGE => vec![r.next, PmAddr(r.b)],
                _ => vec![r.next],
            }
        })
    }

    fn check_structure(&self) -> Result<(), String> {
        let leaves = self.leaf_chain();
        let mut prev: Option<KeyW> = None;
        let mut prev_high: Option<Option<KeyW>> = None;
        for (id, n) in &leaves {
            if !n.leaf {
                return Err(format!("node {id} on the leaf level is not a leaf"));
            }
            if let Some(Some(h)) = prev_high {
                if h != n.low {
                    return Err(format!(
                        "leaf {id}: low key does not match left neighbour's high key"
                    ));
                }
            }
            for (k, _) in &n.entries {
                if prev.is_some_and(|p| p >= *k) {
                    return Err(format!("leaf {id}: keys out of order"));
                }
                prev = Some(*k);
            }
            prev_high = Some(n.high);
        }
        if leaves.last().is_some_and(|(_, n)| n.high.is_some()) {
            return Err("rightmost leaf has a finite high key".into());
        }
        for (id, n) in &leaves {
            for (k, _) in &n.entries {
                if self.reader_find(k).0 != *id && self.lookup_impl(k).is_none() {
                    return Err(format!("key in leaf {id} is unreachable from the root"));
                }
            }
        }
        Ok(())
    }

    fn stats(&self) -> Vec<(&'static str, u64)> {
        let s = &self.stats;
        let g = |a: &AtomicU64| a.load(Ordering::Relaxed);
        vec![
            ("consolidations", g(&s.consolidations)),
            ("splits", g(&s.splits)),
            ("root_splits", g(&s.root_splits)),
            ("merges", g(&s.merges)),
            ("help_split", g(&s.help_split)),
            ("help_merge", g(&s.help_merge)),
            ("cas_failures", g(&s.cas_failures)),
            ("read_restarts", g(&s.read_restarts)),
        ]
    }
}
