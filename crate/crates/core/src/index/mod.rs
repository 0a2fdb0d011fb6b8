//! Common index contract, key encoding and the persist helper.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::pm::{
    AllocError, Allocation, OpScope, PmAddr, PmAllocator, PmemPool, ReachabilityReport,
};

pub type Value = u64;

/// Longest key, in bytes (24-byte YCSB string keys).
pub const KEY_BYTES: usize = 24;

#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
pub enum KeyKind {
    /// 8-byte unsigned integers, compared numerically.
    #[default]
    #[serde(rename = "randint")]
    Int,
    /// 24-byte zero-padded strings, compared bytewise.
    #[serde(rename = "string")]
    Str,
}

impl KeyKind {
    #[allow(clippy::len_without_is_empty)]
    pub fn len(self) -> usize {
        match self {
            KeyKind::Int => 8,
            KeyKind::Str => KEY_BYTES,
        }
    }

    pub fn words(self) -> usize {
        self.len() / 8
    }

    pub(crate) fn code(self) -> u64 {
        match self {
            KeyKind::Int => 1,
            KeyKind::Str => 2,
        }
    }

    pub(crate) fn from_code(c: u64) -> Option<KeyKind> {
        match c {
            1 => Some(KeyKind::Int),
            2 => Some(KeyKind::Str),
            _ => None,
        }
    }
}

impl fmt::Display for KeyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KeyKind::Int => "randint",
            KeyKind::Str => "string",
        })
    }
}

impl FromStr for KeyKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "randint" | "int" => Ok(KeyKind::Int),
            "string" | "str" => Ok(KeyKind::Str),
            _ => Err(format!(
                "unknown key type {s:?} (expected randint or string)"
            )),
        }
    }
}

/// Index key. Integers are encoded big-endian so byte order equals numeric
/// order; the all-zero key of either kind is reserved.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Key {
    Int(u64),
    Str([u8; KEY_BYTES]),
}

impl Key {
    /// Zero-pads `s`; panics if it is longer than 24 bytes.
    pub fn string(s: &str) -> Key {
        Key::from_bytes(KeyKind::Str, s.as_bytes())
    }

    /// Builds a key from its encoded bytes (shorter input is zero-padded).
    pub fn from_bytes(kind: KeyKind, b: &[u8]) -> Key {
        assert!(
            b.len() <= kind.len(),
            "key longer than {} bytes",
            kind.len()
        );
        match kind {
            KeyKind::Int => {
                let mut buf = [0u8; 8];
                buf[..b.len()].copy_from_slice(b);
                Key::Int(u64::from_be_bytes(buf))
            }
            KeyKind::Str => {
                let mut buf = [0u8; KEY_BYTES];
                buf[..b.len()].copy_from_slice(b);
                Key::Str(buf)
            }
        }
    }

    pub fn kind(&self) -> KeyKind {
        match self {
            Key::Int(_) => KeyKind::Int,
            Key::Str(_) => KeyKind::Str,
        }
    }

    pub fn is_reserved(&self) -> bool {
        match self {
            Key::Int(v) => *v == 0,
            Key::Str(b) => b.iter().all(|&c| c == 0),
        }
    }

    pub fn len(&self) -> usize {
        self.kind().len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Encoded bytes; only the first `len()` are meaningful.
    pub fn bytes(&self) -> [u8; KEY_BYTES] {
        let mut out = [0u8; KEY_BYTES];
        match self {
            Key::Int(v) => out[..8].copy_from_slice(&v.to_be_bytes()),
            Key::Str(b) => out = *b,
        }
        out
    }

    #[inline]
    pub fn byte(&self, i: usize) -> u8 {
        match self {
            Key::Int(v) => (v >> (56 - 8 * i)) as u8,
            Key::Str(b) => b[i],
        }
    }

    /// Storage words. Word-wise numeric comparison equals key order.
    pub fn to_words(&self) -> [u64; 3] {
        match self {
            Key::Int(v) => [*v, 0, 0],
            Key::Str(b) => {
                let w = |i: usize| u64::from_be_bytes(b[i * 8..i * 8 + 8].try_into().unwrap());
                [w(0), w(1), w(2)]
            }
        }
    }

    pub fn from_words(kind: KeyKind, w: &[u64]) -> Key {
        match kind {
            KeyKind::Int => Key::Int(w[0]),
            KeyKind::Str => {
                let mut b = [0u8; KEY_BYTES];
                for i in 0..3 {
                    b[i * 8..i * 8 + 8].copy_from_slice(&w[i].to_be_bytes());
                }
                Key::Str(b)
            }
        }
    }

    /// YCSB-style string key `user` followed by 20 zero-padded digits.
    pub fn ycsb(n: u64) -> Key {
        Key::string(&format!("user{n:020}"))
    }
}

impl fmt::Display for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Key::Int(v) => write!(f, "{v}"),
            Key::Str(b) => {
                let end = b.iter().rposition(|&c| c != 0).map_or(0, |p| p + 1);
                write!(f, "{}", String::from_utf8_lossy(&b[..end]).escape_debug())
            }
        }
    }
}

impl fmt::Debug for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Key::Int(v) => write!(f, "Int({v})"),
            Key::Str(_) => write!(f, "Str({self})"),
        }
    }
}

impl Serialize for Key {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Key::Int(v) => s.serialize_u64(*v),
            Key::Str(_) => s.serialize_str(&self.to_string()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IndexKind {
    Clht,
    BwTree,
    Art,
}

impl IndexKind {
    pub const ALL: [IndexKind; 3] = [IndexKind::Clht, IndexKind::BwTree, IndexKind::Art];

    pub fn is_ordered(self) -> bool {
        self != IndexKind::Clht
    }

    /// Whether inserting an existing key overwrites it.
    pub fn upserts(self) -> bool {
        self != IndexKind::Clht
    }

    pub fn name(self) -> &'static str {
        match self {
            IndexKind::Clht => "clht",
            IndexKind::BwTree => "bwtree",
            IndexKind::Art => "art",
        }
    }
}

impl fmt::Display for IndexKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for IndexKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "clht" | "p-clht" => Ok(IndexKind::Clht),
            "bwtree" | "p-bwtree" => Ok(IndexKind::BwTree),
            "art" | "p-art" => Ok(IndexKind::Art),
            _ => Err(format!(
                "unknown index {s:?} (expected clht, art or bwtree)"
            )),
        }
    }
}

/// Deliberately seeded defects used to check that the crash harness notices
/// missing persistence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mutation {
    /// P-CLHT insert skips the persist of its commit line.
    ClhtSkipInsertPersist,
    /// P-BwTree helpers act on loaded SMO state without flushing it first.
    BwTreeSkipHelperFlush,
    /// P-ART writers never repair a stale prefix header.
    ArtDisableFix,
}

#[derive(Clone, Copy, Debug)]
pub struct IndexOptions {
    /// Key kind for a fresh pool. An existing pool keeps its own.
    pub key_kind: KeyKind,
    pub mutation: Option<Mutation>,
    /// Hash seed for P-CLHT.
    pub seed: u64,
    /// Keep an allocation map for reachability reports.
    pub track_allocations: bool,
    /// Reuse freed memory at quiesce points.
    pub recycle: bool,
}

impl Default for IndexOptions {
    fn default() -> Self {
        IndexOptions {
            key_kind: KeyKind::Int,
            mutation: None,
            seed: 0x5eed,
            track_allocations: false,
            recycle: true,
        }
    }
}

impl IndexOptions {
    pub fn with_key_kind(mut self, k: KeyKind) -> Self {
        self.key_kind = k;
        self
    }

    pub fn with_mutation(mut self, m: Option<Mutation>) -> Self {
        self.mutation = m;
        self
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IndexError {
    #[error("key already exists")]
    Exists,
    #[error("persistent pool is full")]
    PoolFull,
    #[error("the all-zero key is reserved")]
    ReservedKey,
    #[error("value 0 is reserved")]
    ReservedValue,
    #[error("key kind does not match the index")]
    KeyKindMismatch,
    #[error("operation not supported by this index")]
    Unsupported,
}

impl From<AllocError> for IndexError {
    fn from(_: AllocError) -> Self {
        IndexError::PoolFull
    }
}

#[derive(Debug, Error)]
pub enum OpenError {
    #[error("unrecognized root record magic {0:#018x}")]
    BadMagic(u64),
    #[error("allocator: {0}")]
    Alloc(#[from] AllocError),
    #[error("root record is corrupt: {0}")]
    Corrupt(String),
    #[error("{0} keys are not supported by this index")]
    UnsupportedKeyKind(KeyKind),
    #[error("pool is too small to format the index")]
    PoolFull,
}

impl From<IndexError> for OpenError {
    fn from(_: IndexError) -> Self {
        OpenError::PoolFull
    }
}

/// Operations shared by all three indexes. Handles are shareable across
/// threads.
pub trait PmIndex: Send + Sync {
    fn kind(&self) -> IndexKind;

    fn key_kind(&self) -> KeyKind;

    /// Returns once everything the insert dirtied is durable.
    fn insert(&self, key: &Key, value: Value) -> Result<(), IndexError>;

    fn lookup(&self, key: &Key) -> Option<Value>;

    /// Deleting an absent key succeeds without changing anything.
    fn delete(&self, key: &Key) -> Result<(), IndexError>;

    /// Pairs with `lo <= key <= hi` in key order.
    fn range_query(&self, lo: &Key, hi: &Key) -> Result<Vec<(Key, Value)>, IndexError>;

    fn pool(&self) -> &Arc<PmemPool>;

    fn allocator(&self) -> &PmAllocator;

    /// Partitions `allocs` by reachability from the index root. Quiesced only.
    fn reachability(&self, allocs: &[Allocation]) -> ReachabilityReport;

    /// Structural invariant check. Quiesced only.
    fn check_structure(&self) -> Result<(), String>;

    /// Named event counters (SMOs, helping, fixes, restarts).
    fn stats(&self) -> Vec<(&'static str, u64)>;

    fn stat(&self, name: &str) -> u64 {
        self.stats()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map_or(0, |(_, v)| v)
    }
}

/// Flushes every line covering `[addr, addr+len)` and issues one fence.
pub fn persist(pool: &PmemPool, addr: PmAddr, len: u64) {
    pool.persist(addr, len);
}

pub(crate) fn check_key(kind: KeyKind, key: &Key) -> Result<(), IndexError> {
    if key.kind() != kind {
        return Err(IndexError::KeyKindMismatch);
    }
    if key.is_reserved() {
        return Err(IndexError::ReservedKey);
    }
    Ok(())
}

pub(crate) fn check_pair(kind: KeyKind, key: &Key, value: Value) -> Result<(), IndexError> {
    check_key(kind, key)?;
    if value == 0 {
        return Err(IndexError::ReservedValue);
    }
    Ok(())
}

/// Op ids with this bit set tag structural modification scopes.
pub const SMO_FLAG: u64 = 1 << 63;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum SmoKind {
    ClhtChain = 1,
    ClhtRehash,
    ArtGrow,
    ArtShrink,
    ArtSplit,
    ArtFix,
    ArtPrune,
    BwConsolidate,
    BwSplit,
    BwRootSplit,
    BwMerge,
}

impl SmoKind {
    const ALL: [SmoKind; 11] = [
        SmoKind::ClhtChain,
        SmoKind::ClhtRehash,
        SmoKind::ArtGrow,
        SmoKind::ArtShrink,
        SmoKind::ArtSplit,
        SmoKind::ArtFix,
        SmoKind::ArtPrune,
        SmoKind::BwConsolidate,
        SmoKind::BwSplit,
        SmoKind::BwRootSplit,
        SmoKind::BwMerge,
    ];
}

/// Op id of one SMO instance. Scopes with equal ids (for example the two
/// steps of a split run by different threads) belong to the same SMO.
pub fn smo_op_id(kind: SmoKind, instance: u64) -> u64 {
    SMO_FLAG | (kind as u64) << 48 | (instance & 0xffff_ffff_ffff)
}

pub fn smo_kind(op_id: u64) -> Option<SmoKind> {
    if op_id & SMO_FLAG == 0 {
        return None;
    }
    let code = (op_id >> 48) & 0x7fff;
    SmoKind::ALL.into_iter().find(|k| *k as u64 == code)
}

pub(crate) fn smo_scope(pool: &PmemPool, kind: SmoKind, instance: u64) -> OpScope<'_> {
    pool.op_scope(smo_op_id(kind, instance))
}

/// Opens (or formats) an index of `kind` on `pool`. No recovery pass runs:
/// only volatile lock state is reinitialized.
pub fn open_index(
    kind: IndexKind,
    pool: Arc<PmemPool>,
    opts: &IndexOptions,
) -> Result<Arc<dyn PmIndex>, OpenError> {
    Ok(match kind {
        IndexKind::Clht => Arc::new(crate::clht::PClht::open(pool, opts)?),
        IndexKind::BwTree => Arc::new(crate::bwtree::PBwTree::open(pool, opts)?),
        IndexKind::Art => Arc::new(crate::art::PArt::open(pool, opts)?),
    })
}

/// Index kind recorded in the root record of `pool`, if any.
pub fn detect_kind(pool: &PmemPool) -> Option<IndexKind> {
    match &pool.load8(PmAddr(0)).to_le_bytes() {
        b"PCLHT001" => Some(IndexKind::Clht),
        b"PBWT0001" => Some(IndexKind::BwTree),
        b"PART0001" => Some(IndexKind::Art),
        _ => None,
    }
}
