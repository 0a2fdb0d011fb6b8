//! Crash-state campaigns: load under a deterministic scheduler until an
//! injected crash, reopen the persisted view, run a post-crash workload and
//! read everything back.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scheduler::{CrashPlan, CrashPoint, Scheduler, SwitchRates};
use super::workload::{load_stream, test_stream, KeyPattern, KeySource, Op};
use crate::index::{
    open_index, IndexError, IndexKind, IndexOptions, Key, KeyKind, Mutation, PmIndex, Value,
};
use crate::pm::{
    is_crash_signal, mix64, CrashPolicy, PmemPool, PoolConfig, PoolImage, Site, Tracking,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Strict,
    Adversarial,
}

impl std::str::FromStr for PolicyKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "strict" => Ok(PolicyKind::Strict),
            "adversarial" => Ok(PolicyKind::Adversarial),
            _ => Err(format!(
                "unknown policy {s:?} (expected strict or adversarial)"
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CrashMode {
    /// No crash injection: every state crashes after its load.
    Off,
    Probabilistic,
    /// Site sweep: each state targets one crash site.
    Sweep,
    /// Alternates probabilistic and sweep states.
    Mixed,
}

impl std::str::FromStr for CrashMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "off" => Ok(CrashMode::Off),
            "probabilistic" => Ok(CrashMode::Probabilistic),
            "sweep" => Ok(CrashMode::Sweep),
            "mixed" => Ok(CrashMode::Mixed),
            _ => Err(format!("unknown crash mode {s:?}")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CampaignConfig {
    pub index: IndexKind,
    pub key_kind: KeyKind,
    pub states: u64,
    pub load_n: usize,
    pub test_ops: usize,
    pub threads: usize,
    pub policy: PolicyKind,
    pub mode: CrashMode,
    pub seed: u64,
    pub mutation: Option<Mutation>,
    pub delete_ratio: f64,
    /// Overwrites of live keys during the load. Zero for P-CLHT, whose
    /// insert rejects existing keys.
    pub update_ratio: f64,
    /// Stop once this many states failed.
    pub stop_after: Option<u64>,
    pub artifacts: Option<PathBuf>,
    pub pool_size: u64,
}

impl CampaignConfig {
    pub fn new(index: IndexKind, policy: PolicyKind) -> CampaignConfig {
        CampaignConfig {
            index,
            key_kind: KeyKind::Int,
            states: 10_000,
            load_n: 10_000,
            test_ops: 10_000,
            threads: 4,
            policy,
            mode: CrashMode::Mixed,
            seed: 1,
            mutation: None,
            delete_ratio: 0.1,
            update_ratio: if index == IndexKind::Clht { 0.0 } else { 0.05 },
            stop_after: None,
            artifacts: None,
            pool_size: 64 << 20,
        }
    }
}

/// Everything needed to replay one crash state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateSpec {
    pub index: IndexKind,
    pub key_kind: KeyKind,
    pub mutation: Option<Mutation>,
    pub policy: PolicyKind,
    pub pattern: KeyPattern,
    pub seed: u64,
    pub load_n: usize,
    pub test_ops: usize,
    pub threads: usize,
    pub delete_ratio: f64,
    pub update_ratio: f64,
    pub plan: CrashPlan,
    pub pool_size: u64,
}

impl StateSpec {
    pub fn crash_policy(&self) -> CrashPolicy {
        match self.policy {
            PolicyKind::Strict => CrashPolicy::Strict,
            PolicyKind::Adversarial => CrashPolicy::Adversarial {
                seed: mix64(self.seed ^ 0xad),
            },
        }
    }

    fn options(&self) -> IndexOptions {
        IndexOptions::default()
            .with_key_kind(self.key_kind)
            .with_mutation(self.mutation)
    }
}

/// What a key may read back as: its last acknowledged state, or the
/// result of an operation that was in flight at the crash.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Expectation {
    pub value: Option<Value>,
    pub alt: Option<Option<Value>>,
}

impl Expectation {
    pub fn acked(value: Option<Value>) -> Expectation {
        Expectation { value, alt: None }
    }

    pub fn allows(&self, got: Option<Value>) -> bool {
        got == self.value || self.alt == Some(got)
    }
}

pub type Expected = BTreeMap<Key, Expectation>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct WrongValue {
    pub key: Key,
    pub expected: Option<Value>,
    pub got: Option<Value>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ConsistencyReport {
    pub lost_keys: Vec<Key>,
    pub wrong_values: Vec<WrongValue>,
    pub post_crash_op_failures: Vec<String>,
    pub load_failures: Vec<String>,
    pub pass: bool,
}

impl ConsistencyReport {
    fn seal(mut self) -> ConsistencyReport {
        self.pass = self.lost_keys.is_empty()
            && self.wrong_values.is_empty()
            && self.post_crash_op_failures.is_empty()
            && self.load_failures.is_empty();
        self
    }
}

/// Smallest and largest user key of a kind.
pub fn key_bounds(kind: KeyKind) -> (Key, Key) {
    match kind {
        KeyKind::Int => (Key::Int(1), Key::Int(u64::MAX)),
        KeyKind::Str => {
            let mut lo = [0u8; 24];
            lo[23] = 1;
            (Key::Str(lo), Key::Str([0xff; 24]))
        }
    }
}

/// Reads back every expected key and, for ordered indexes, compares a full
/// range scan against the expectation.
pub fn check_consistency(index: &dyn PmIndex, expected: &Expected) -> ConsistencyReport {
    let mut lost = BTreeSet::new();
    let mut wrong = BTreeMap::new();
    for (k, e) in expected {
        let got = index.lookup(k);
        if !e.allows(got) {
            if got.is_none() {
                lost.insert(*k);
            } else {
                wrong.insert(
                    *k,
                    WrongValue {
                        key: *k,
                        expected: e.value,
                        got,
                    },
                );
            }
        }
    }
    let mut report = ConsistencyReport::default();
    if index.kind().is_ordered() {
        let (lo, hi) = key_bounds(index.key_kind());
        match index.range_query(&lo, &hi) {
            Ok(scan) => {
                let mut seen = BTreeSet::new();
                for (k, v) in scan {
                    seen.insert(k);
                    let e = expected.get(&k).copied().unwrap_or_default();
                    if !e.allows(Some(v)) {
                        wrong.entry(k).or_insert(WrongValue {
                            key: k,
                            expected: e.value,
                            got: Some(v),
                        });
                    }
                }
                for (k, e) in expected {
                    if !seen.contains(k) && !e.allows(None) {
                        lost.insert(*k);
                    }
                }
            }
            Err(e) => report
                .post_crash_op_failures
                .push(format!("range scan: {e}")),
        }
    }
    report.lost_keys = lost.into_iter().collect();
    report.wrong_values = wrong.into_values().collect();
    report.seal()
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Outcome {
    Acked(Option<Value>),
    InFlight,
    Failed(String),
}

fn exec(index: &dyn PmIndex, op: &Op) -> Result<Option<Value>, IndexError> {
    match op {
        Op::Insert(k, v) => index.insert(k, *v).map(|_| None),
        Op::Delete(k) => index.delete(k).map(|_| None),
        Op::Read(k) => Ok(index.lookup(k)),
    }
}

fn panic_message(p: &(dyn std::any::Any + Send)) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        s.to_string()
    } else if let Some(s) = p.downcast_ref::<String>() {
        s.clone()
    } else {
        "panic".into()
    }
}

/// Runs one stream per worker under `sched`. Returns each worker's ops with
/// their outcomes, stopping at the crash.
fn run_phase(
    index: &dyn PmIndex,
    pool: &PmemPool,
    sched: &Scheduler,
    streams: &[Vec<Op>],
) -> Vec<Vec<(Op, Outcome)>> {
    std::thread::scope(|s| {
        let handles: Vec<_> = streams
            .iter()
            .enumerate()
            .map(|(me, stream)| {
                s.spawn(move || {
                    let mut log = Vec::with_capacity(stream.len());
                    sched.enter(me);
                    for (i, op) in stream.iter().enumerate() {
                        if !sched.begin_op(me, i as u64) {
                            break;
                        }
                        let r = catch_unwind(AssertUnwindSafe(|| exec(index, op)));
                        let (outcome, stop) = match r {
                            Ok(_) if pool.is_crashed() => (Outcome::InFlight, true),
                            Ok(Ok(got)) => (Outcome::Acked(got), false),
                            Ok(Err(e)) => (Outcome::Failed(format!("{op:?}: {e}")), false),
                            Err(p) if is_crash_signal(&*p) => (Outcome::InFlight, true),
                            Err(p) => {
                                pool.freeze();
                                (
                                    Outcome::Failed(format!(
                                        "{op:?}: panic: {}",
                                        panic_message(&*p)
                                    )),
                                    true,
                                )
                            }
                        };
                        log.push((*op, outcome));
                        if stop {
                            break;
                        }
                    }
                    sched.leave(me);
                    log
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker thread"))
            .collect()
    })
}

/// Folds one worker's log into `expected`, checking reads on the way.
fn apply_log(
    log: &[(Op, Outcome)],
    expected: &mut Expected,
    report: &mut ConsistencyReport,
    post: bool,
) {
    for (op, outcome) in log {
        let key = op.key();
        let cur = expected.get(&key).copied().unwrap_or_default();
        match (op, outcome) {
            (Op::Read(_), Outcome::Acked(got)) => {
                if !cur.allows(*got) {
                    if got.is_none() {
                        report.lost_keys.push(key);
                    } else {
                        report.wrong_values.push(WrongValue {
                            key,
                            expected: cur.value,
                            got: *got,
                        });
                    }
                }
            }
            (Op::Read(_), _) => {}
            (_, Outcome::Failed(msg)) => {
                if post {
                    report.post_crash_op_failures.push(msg.clone());
                } else {
                    report.load_failures.push(msg.clone());
                }
            }
            (Op::Insert(_, v), Outcome::Acked(_)) => {
                expected.insert(key, Expectation::acked(Some(*v)));
            }
            (Op::Delete(_), Outcome::Acked(_)) => {
                expected.insert(key, Expectation::acked(None));
            }
            (Op::Insert(_, v), Outcome::InFlight) => {
                expected.insert(
                    key,
                    Expectation {
                        alt: Some(Some(*v)),
                        ..cur
                    },
                );
            }
            (Op::Delete(_), Outcome::InFlight) => {
                expected.insert(
                    key,
                    Expectation {
                        alt: Some(None),
                        ..cur
                    },
                );
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct StateOutcome {
    pub crash: Option<CrashPoint>,
    pub report: ConsistencyReport,
    /// Keys checked after recovery.
    pub checked: usize,
    pub snapshot: Option<PoolImage>,
    pub switches: u64,
}

fn failed_open(msg: String) -> StateOutcome {
    let report = ConsistencyReport {
        post_crash_op_failures: vec![msg],
        ..Default::default()
    }
    .seal();
    StateOutcome {
        crash: None,
        report,
        checked: 0,
        snapshot: None,
        switches: 0,
    }
}

fn per_thread(total: usize, threads: usize, t: usize) -> usize {
    total / threads + usize::from(t < total % threads)
}

/// Runs one crash state end to end. Deterministic in `spec`.
pub fn run_state(spec: &StateSpec) -> StateOutcome {
    let tracking = match spec.policy {
        PolicyKind::Strict => Tracking::Shadow,
        PolicyKind::Adversarial => Tracking::Traced,
    };
    let pool = match PmemPool::new(PoolConfig::new(spec.pool_size, tracking)) {
        Ok(p) => Arc::new(p),
        Err(e) => return failed_open(format!("pool: {e}")),
    };
    let opts = spec.options();
    let index = match open_index(spec.index, pool.clone(), &opts) {
        Ok(i) => i,
        Err(e) => return failed_open(format!("open: {e}")),
    };
    let threads = spec.threads.max(1);
    let mut sources: Vec<KeySource> = (0..threads)
        .map(|t| {
            let cap =
                per_thread(spec.load_n, threads, t) + per_thread(spec.test_ops, threads, t) + 1;
            KeySource::new(
                spec.pattern,
                spec.key_kind,
                t,
                threads,
                cap,
                mix64(spec.seed ^ (t as u64 + 10)),
            )
        })
        .collect();
    let load: Vec<Vec<Op>> = sources
        .iter_mut()
        .enumerate()
        .map(|(t, src)| {
            let n = per_thread(spec.load_n, threads, t);
            load_stream(
                src,
                t,
                n,
                spec.delete_ratio,
                spec.update_ratio,
                mix64(spec.seed ^ (t as u64 + 20)),
            )
        })
        .collect();

    let sched = Arc::new(Scheduler::new(
        threads,
        mix64(spec.seed ^ 1),
        spec.plan.clone(),
        SwitchRates::LOAD,
    ));
    pool.set_crash_hook(Some(sched.clone()));
    let logs = run_phase(&*index, &pool, &sched, &load);
    pool.set_crash_hook(None);
    let crash = sched.crash_point();
    pool.freeze();
    let image = match pool.persisted_view(spec.crash_policy()) {
        Ok(i) => i,
        Err(e) => return failed_open(format!("persisted view: {e}")),
    };
    let switches = sched.switches();
    drop(index);
    drop(pool);

    let mut report = ConsistencyReport::default();
    let mut expected: Vec<Expected> = vec![Expected::new(); threads];
    for (t, log) in logs.iter().enumerate() {
        apply_log(log, &mut expected[t], &mut report, false);
    }

    let pool = match PmemPool::from_image(&image, Tracking::Counters) {
        Ok(p) => Arc::new(p),
        Err(e) => return failed_open(format!("reopen pool: {e}")),
    };
    let index = match open_index(spec.index, pool.clone(), &opts) {
        Ok(i) => i,
        Err(e) => {
            report.post_crash_op_failures.push(format!("reopen: {e}"));
            let report = report.seal();
            return StateOutcome {
                crash,
                report,
                checked: 0,
                snapshot: Some(image),
                switches,
            };
        }
    };
    let tests: Vec<Vec<Op>> = sources
        .iter_mut()
        .enumerate()
        .map(|(t, src)| {
            let owned: Vec<Key> = load[t]
                .iter()
                .filter_map(|op| match op {
                    Op::Insert(k, _) => Some(*k),
                    _ => None,
                })
                .collect();
            let n = per_thread(spec.test_ops, threads, t);
            test_stream(src, t, &owned, n, mix64(spec.seed ^ (t as u64 + 30)))
        })
        .collect();
    let sched2 = Arc::new(Scheduler::new(
        threads,
        mix64(spec.seed ^ 2),
        CrashPlan::Never,
        SwitchRates::QUIET,
    ));
    pool.set_crash_hook(Some(sched2.clone()));
    let logs = run_phase(&*index, &pool, &sched2, &tests);
    pool.set_crash_hook(None);
    for (t, log) in logs.iter().enumerate() {
        apply_log(log, &mut expected[t], &mut report, true);
    }
    let all: Expected = expected.into_iter().flatten().collect();
    let check = check_consistency(&*index, &all);
    report.lost_keys.extend(check.lost_keys);
    report.wrong_values.extend(check.wrong_values);
    report
        .post_crash_op_failures
        .extend(check.post_crash_op_failures);
    report.lost_keys.sort();
    report.lost_keys.dedup();
    let report = report.seal();
    let snapshot = (!report.pass).then_some(image);
    StateOutcome {
        crash,
        report,
        checked: all.len(),
        snapshot,
        switches,
    }
}

/// Static crash sites of an index.
pub fn crash_sites(kind: IndexKind) -> &'static [Site] {
    match kind {
        IndexKind::Clht => crate::clht::CRASH_SITES,
        IndexKind::BwTree => crate::bwtree::CRASH_SITES,
        IndexKind::Art => crate::art::CRASH_SITES,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub state: u64,
    pub spec: StateSpec,
    pub crash: Option<CrashPoint>,
    pub lost_keys: usize,
    pub wrong_values: usize,
    pub post_crash_op_failures: usize,
    pub load_failures: usize,
    pub sample: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub index: IndexKind,
    pub key_kind: KeyKind,
    pub policy: PolicyKind,
    pub mode: CrashMode,
    pub mutation: Option<Mutation>,
    pub seed: u64,
    pub states_requested: u64,
    pub states_run: u64,
    pub load_n: usize,
    pub test_ops: usize,
    pub threads: usize,
    pub expected_load_stores: u64,
    /// States whose crash fired before the load finished.
    pub crashed_states: u64,
    pub keys_checked: u64,
    pub lost_keys: u64,
    pub wrong_values: u64,
    pub post_crash_op_failures: u64,
    pub load_failures: u64,
    pub failing_states: u64,
    pub site_crashes: BTreeMap<String, u64>,
    /// Sites with no crash injected in any state.
    pub uncovered_sites: Vec<String>,
    /// Sites no calibration load reached.
    pub unreachable_sites: Vec<String>,
    pub failures: Vec<FailureRecord>,
    pub pass: bool,
}

impl CampaignReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

const MAX_RECORDS: usize = 16;

fn state_spec(cfg: &CampaignConfig, i: u64, pattern: KeyPattern, plan: CrashPlan) -> StateSpec {
    StateSpec {
        index: cfg.index,
        key_kind: cfg.key_kind,
        mutation: cfg.mutation,
        policy: cfg.policy,
        pattern,
        seed: mix64(cfg.seed ^ mix64(i)),
        load_n: cfg.load_n,
        test_ops: cfg.test_ops,
        threads: cfg.threads,
        delete_ratio: cfg.delete_ratio,
        update_ratio: cfg.update_ratio,
        plan,
        pool_size: cfg.pool_size,
    }
}

/// Store counts of one uninterrupted load.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadProfile {
    pub stores: u64,
    pub sites: BTreeMap<String, u64>,
}

/// Runs the load of `spec` without crashing and counts worker stores.
pub fn profile_load(spec: &StateSpec) -> LoadProfile {
    let spec = StateSpec {
        plan: CrashPlan::Never,
        test_ops: 0,
        policy: PolicyKind::Strict,
        ..spec.clone()
    };
    let pool =
        Arc::new(PmemPool::new(PoolConfig::new(spec.pool_size, Tracking::Counters)).expect("pool"));
    let index = open_index(spec.index, pool.clone(), &spec.options()).expect("open");
    let threads = spec.threads.max(1);
    let load: Vec<Vec<Op>> = (0..threads)
        .map(|t| {
            let cap = per_thread(spec.load_n, threads, t) + 1;
            let mut src = KeySource::new(
                spec.pattern,
                spec.key_kind,
                t,
                threads,
                cap,
                mix64(spec.seed ^ (t as u64 + 10)),
            );
            let n = per_thread(spec.load_n, threads, t);
            load_stream(
                &mut src,
                t,
                n,
                spec.delete_ratio,
                spec.update_ratio,
                mix64(spec.seed ^ (t as u64 + 20)),
            )
        })
        .collect();
    let sched = Arc::new(Scheduler::new(
        threads,
        mix64(spec.seed ^ 1),
        CrashPlan::Never,
        SwitchRates::LOAD,
    ));
    sched.enable_profile();
    pool.set_crash_hook(Some(sched.clone()));
    run_phase(&*index, &pool, &sched, &load);
    pool.set_crash_hook(None);
    LoadProfile {
        stores: sched.stores(),
        sites: sched.profile(),
    }
}

/// Worker stores in an uninterrupted load of `spec`, and how many of them
/// hit `site`.
pub fn count_load_stores(spec: &StateSpec, site: Option<&str>) -> (u64, u64) {
    let p = profile_load(spec);
    let hits = site.map_or(0, |s| p.sites.get(s).copied().unwrap_or(0));
    (p.stores, hits)
}

/// Load profiles of one calibration state per key pattern.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Calibration {
    pub profiles: Vec<(KeyPattern, LoadProfile)>,
}

impl Calibration {
    pub fn run(cfg: &CampaignConfig) -> Calibration {
        let profiles = KeyPattern::ALL
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                (
                    p,
                    profile_load(&state_spec(cfg, u64::MAX - i as u64, p, CrashPlan::Never)),
                )
            })
            .collect();
        Calibration { profiles }
    }

    /// Mean worker stores per load.
    pub fn expected_stores(&self) -> u64 {
        let n = self.profiles.len().max(1) as u64;
        (self.profiles.iter().map(|(_, p)| p.stores).sum::<u64>() / n).max(1)
    }

    /// Patterns whose load reaches `site`, with the hit count.
    fn reaching(&self, site: &str) -> Vec<(KeyPattern, u64)> {
        self.profiles
            .iter()
            .filter_map(|(pat, p)| p.sites.get(site).filter(|&&h| h > 0).map(|&h| (*pat, h)))
            .collect()
    }
}

pub fn expected_load_stores(cfg: &CampaignConfig) -> u64 {
    Calibration::run(cfg).expected_stores()
}

/// Key pattern and crash plan for state `i`. Sweep states name a site and
/// crash at a uniformly chosen store to it, in a pattern whose load reaches
/// the site. Sites no load reaches fall back to a probabilistic state.
pub fn plan_for(cfg: &CampaignConfig, i: u64, cal: &Calibration) -> (KeyPattern, CrashPlan) {
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(cfg.seed ^ mix64(i) ^ 0x5eed));
    let sites = crash_sites(cfg.index);
    let rotating = KeyPattern::ALL[(i % KeyPattern::ALL.len() as u64) as usize];
    let probabilistic = CrashPlan::Probabilistic {
        p: 1.0 / (2.0 * cal.expected_stores() as f64),
    };
    let sweep = |k: u64, rng: &mut ChaCha8Rng| {
        let n = sites.len() as u64;
        let site = sites[(k % n) as usize].name;
        let reach = cal.reaching(site);
        if reach.is_empty() {
            return (rotating, probabilistic.clone());
        }
        let (pattern, hits) = reach[((k / n) % reach.len() as u64) as usize];
        (
            pattern,
            CrashPlan::SiteHit {
                site: site.to_string(),
                hit: rng.gen_range(1..=hits),
            },
        )
    };
    match cfg.mode {
        CrashMode::Off => (rotating, CrashPlan::Never),
        CrashMode::Probabilistic => (rotating, probabilistic),
        CrashMode::Sweep => sweep(i, &mut rng),
        CrashMode::Mixed if i.is_multiple_of(2) => (rotating, probabilistic),
        CrashMode::Mixed => sweep(i / 2, &mut rng),
    }
}

/// Runs a campaign. `progress` is called after every state.
pub fn run_campaign_with(
    cfg: &CampaignConfig,
    mut progress: impl FnMut(u64, &StateOutcome),
) -> CampaignReport {
    let cal = if cfg.mode == CrashMode::Off {
        Calibration::default()
    } else {
        Calibration::run(cfg)
    };
    let expected = cal.expected_stores();
    let sites = crash_sites(cfg.index);
    let mut r = CampaignReport {
        index: cfg.index,
        key_kind: cfg.key_kind,
        policy: cfg.policy,
        mode: cfg.mode,
        mutation: cfg.mutation,
        seed: cfg.seed,
        states_requested: cfg.states,
        states_run: 0,
        load_n: cfg.load_n,
        test_ops: cfg.test_ops,
        threads: cfg.threads,
        expected_load_stores: expected,
        crashed_states: 0,
        keys_checked: 0,
        lost_keys: 0,
        wrong_values: 0,
        post_crash_op_failures: 0,
        load_failures: 0,
        failing_states: 0,
        site_crashes: sites.iter().map(|s| (s.name.to_string(), 0)).collect(),
        uncovered_sites: Vec::new(),
        unreachable_sites: sites
            .iter()
            .filter(|s| cal.reaching(s.name).is_empty())
            .map(|s| s.name.to_string())
            .collect(),
        failures: Vec::new(),
        pass: true,
    };
    for i in 0..cfg.states {
        let (pattern, plan) = plan_for(cfg, i, &cal);
        let spec = state_spec(cfg, i, pattern, plan);
        let out = run_state(&spec);
        r.states_run += 1;
        r.keys_checked += out.checked as u64;
        if let Some(c) = &out.crash {
            r.crashed_states += 1;
            *r.site_crashes.entry(c.site.clone()).or_default() += 1;
        }
        let rep = &out.report;
        r.lost_keys += rep.lost_keys.len() as u64;
        r.wrong_values += rep.wrong_values.len() as u64;
        r.post_crash_op_failures += rep.post_crash_op_failures.len() as u64;
        r.load_failures += rep.load_failures.len() as u64;
        if !rep.pass {
            r.failing_states += 1;
            if r.failures.len() < MAX_RECORDS {
                let rec = failure_record(i, &spec, &out);
                if let Some(dir) = &cfg.artifacts {
                    write_artifact(dir, &rec, out.snapshot.as_ref());
                }
                r.failures.push(rec);
            }
        }
        progress(i, &out);
        if cfg.stop_after.is_some_and(|n| r.failing_states >= n) {
            break;
        }
    }
    r.uncovered_sites = r
        .site_crashes
        .iter()
        .filter(|(_, n)| **n == 0)
        .map(|(s, _)| s.clone())
        .collect();
    r.pass = r.failing_states == 0;
    r
}

pub fn run_campaign(cfg: &CampaignConfig) -> CampaignReport {
    run_campaign_with(cfg, |_, _| {})
}

fn failure_record(i: u64, spec: &StateSpec, out: &StateOutcome) -> FailureRecord {
    let rep = &out.report;
    let mut sample: Vec<String> = Vec::new();
    sample.extend(rep.lost_keys.iter().take(3).map(|k| format!("lost {k:?}")));
    sample.extend(
        rep.wrong_values
            .iter()
            .take(3)
            .map(|w| format!("wrong {:?}: want {:?} got {:?}", w.key, w.expected, w.got)),
    );
    sample.extend(rep.post_crash_op_failures.iter().take(3).cloned());
    sample.extend(rep.load_failures.iter().take(3).cloned());
    FailureRecord {
        state: i,
        spec: spec.clone(),
        crash: out.crash.clone(),
        lost_keys: rep.lost_keys.len(),
        wrong_values: rep.wrong_values.len(),
        post_crash_op_failures: rep.post_crash_op_failures.len(),
        load_failures: rep.load_failures.len(),
        sample,
    }
}

/// Writes `state-<i>.json` and, when available, the crash image as
/// `state-<i>.pool`.
pub fn write_artifact(dir: &std::path::Path, rec: &FailureRecord, image: Option<&PoolImage>) {
    if std::fs::create_dir_all(dir).is_err() {
        return;
    }
    let base = dir.join(format!("state-{}", rec.state));
    let _ = std::fs::write(
        base.with_extension("json"),
        serde_json::to_string_pretty(rec).unwrap_or_default(),
    );
    if let Some(img) = image {
        let _ = img.write_to(&base.with_extension("pool"));
    }
}
