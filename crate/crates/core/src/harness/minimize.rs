//! Shrinks a failing crash state by deterministic replay.

use serde::Serialize;

use super::campaign::{count_load_stores, run_state, ConsistencyReport, StateSpec};
use super::scheduler::{CrashPlan, CrashPoint};

#[derive(Clone, Debug, Serialize)]
pub struct Minimized {
    /// Smallest failing spec found, or the input when nothing was to shrink.
    pub spec: StateSpec,
    pub crash: Option<CrashPoint>,
    /// Workload operations in `spec` (load plus post-crash).
    pub ops: usize,
    /// False when two replays of the input disagreed.
    pub reproducible: bool,
    /// Whether the input failed at all.
    pub failing: bool,
    pub replays: u64,
    pub report: ConsistencyReport,
}

struct Shrinker {
    site: Option<String>,
    replays: u64,
}

impl Shrinker {
    /// Crash plans to try for a resized spec: the last store at the original
    /// crash site, then no injected crash at all.
    fn plans(&self, spec: &StateSpec) -> Vec<CrashPlan> {
        let mut plans = Vec::new();
        if let Some(site) = &self.site {
            let (_, hits) = count_load_stores(spec, Some(site));
            if hits > 0 {
                plans.push(CrashPlan::SiteHit {
                    site: site.clone(),
                    hit: hits,
                });
            }
        }
        plans.push(CrashPlan::Never);
        plans
    }

    /// A failing variant of `spec`, if any candidate plan fails.
    fn fails(&mut self, spec: StateSpec) -> Option<StateSpec> {
        for plan in self.plans(&spec) {
            let s = StateSpec {
                plan,
                ..spec.clone()
            };
            self.replays += 1;
            if !run_state(&s).report.pass {
                return Some(s);
            }
        }
        None
    }

    /// Smallest `n` in `0..=hi` for which `with(n)` fails, given `best`
    /// already fails at `hi`.
    fn bisect(
        &mut self,
        best: &mut StateSpec,
        hi: usize,
        with: impl Fn(&StateSpec, usize) -> StateSpec,
    ) {
        let (mut lo, mut hi) = (0, hi);
        while lo < hi {
            let mid = lo + (hi - lo) / 2;
            match self.fails(with(best, mid)) {
                Some(s) => {
                    *best = s;
                    hi = mid;
                }
                None => lo = mid + 1,
            }
        }
    }
}

pub fn minimize(spec: &StateSpec) -> Minimized {
    let first = run_state(spec);
    let second = run_state(spec);
    let reproducible = first.report == second.report && first.crash == second.crash;
    let done = |spec: &StateSpec, out: &super::campaign::StateOutcome, replays| Minimized {
        spec: spec.clone(),
        crash: out.crash.clone(),
        ops: spec.load_n + spec.test_ops,
        reproducible,
        failing: !out.report.pass,
        replays,
        report: out.report.clone(),
    };
    if first.report.pass || !reproducible {
        return done(spec, &first, 2);
    }

    let mut sh = Shrinker {
        site: first.crash.as_ref().map(|c| c.site.clone()),
        replays: 2,
    };
    let mut best = spec.clone();
    if best.threads > 1 {
        if let Some(s) = sh.fails(StateSpec {
            threads: 1,
            ..best.clone()
        }) {
            best = s;
        }
    }
    if best.delete_ratio > 0.0 {
        if let Some(s) = sh.fails(StateSpec {
            delete_ratio: 0.0,
            ..best.clone()
        }) {
            best = s;
        }
    }
    sh.bisect(&mut best, spec.test_ops, |s, n| StateSpec {
        test_ops: n,
        ..s.clone()
    });
    sh.bisect(&mut best, spec.load_n, |s, n| StateSpec {
        load_n: n,
        ..s.clone()
    });
    let out = run_state(&best);
    sh.replays += 1;
    done(&best, &out, sh.replays)
}
