//! Deterministic cooperative scheduler for worker threads.
//!
//! Exactly one registered worker runs at a time. The running thread hands
//! the token on at store events, chosen by a seeded generator, and whenever
//! it spins on a lock. Because the generator is only advanced by the token
//! holder, a given seed reproduces the same interleaving, the same crash
//! point and therefore the same crash state.

use std::collections::BTreeMap;
use std::sync::{Condvar, Mutex, MutexGuard};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::pm::{mix64, thread_index, CrashHook, EventKind, HookVerdict, PmEvent};

/// When to crash, in terms of store events issued by workers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum CrashPlan {
    Never,
    /// Every store crashes independently with probability `p`.
    Probabilistic {
        p: f64,
    },
    /// First store at `site` once `after` worker stores have happened.
    AtSite {
        site: String,
        after: u64,
    },
    /// The `hit`-th store at `site` (1-based).
    SiteHit {
        site: String,
        hit: u64,
    },
    /// The worker store with this 1-based ordinal.
    AtStore {
        ordinal: u64,
    },
}

/// Where a crash happened.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrashPoint {
    /// 1-based ordinal among worker stores.
    pub ordinal: u64,
    pub site: String,
    pub worker: usize,
    /// Index of the operation the worker was running.
    pub op: u64,
}

#[derive(Clone, Copy, Debug)]
pub struct SwitchRates {
    /// Probability of a switch at an ordinary preemptible store.
    pub normal: f64,
    /// Probability of a switch at a hot site.
    pub hot: f64,
}

impl SwitchRates {
    pub const LOAD: SwitchRates = SwitchRates {
        normal: 1.0 / 64.0,
        hot: 0.25,
    };
    pub const QUIET: SwitchRates = SwitchRates {
        normal: 1.0 / 1024.0,
        hot: 1.0 / 16.0,
    };
}

struct State {
    turn: usize,
    live: Vec<bool>,
    threads: Vec<Option<u32>>,
    ops: Vec<u64>,
    rng: ChaCha8Rng,
    stores: u64,
    site_hits: u64,
    crashed: Option<CrashPoint>,
    switches: u64,
    /// Stores per site, when profiling.
    profile: Option<BTreeMap<&'static str, u64>>,
}

pub struct Scheduler {
    st: Mutex<State>,
    /// One per worker, so a hand-off wakes only the next runner.
    cvs: Vec<Condvar>,
    plan: CrashPlan,
    seed: u64,
    rates: SwitchRates,
}

fn lock(m: &Mutex<State>) -> MutexGuard<'_, State> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

impl Scheduler {
    pub fn new(workers: usize, seed: u64, plan: CrashPlan, rates: SwitchRates) -> Scheduler {
        Scheduler {
            st: Mutex::new(State {
                turn: 0,
                live: vec![true; workers],
                threads: vec![None; workers],
                ops: vec![0; workers],
                rng: ChaCha8Rng::seed_from_u64(seed),
                stores: 0,
                site_hits: 0,
                crashed: None,
                switches: 0,
                profile: None,
            }),
            cvs: (0..workers).map(|_| Condvar::new()).collect(),
            plan,
            seed,
            rates,
        }
    }

    /// Binds the calling thread to worker slot `me` and blocks until it holds
    /// the token.
    pub fn enter(&self, me: usize) {
        let mut st = lock(&self.st);
        st.threads[me] = Some(thread_index());
        while st.turn != me && st.crashed.is_none() {
            st = self.cvs[me].wait(st).unwrap_or_else(|e| e.into_inner());
        }
    }

    /// Records that worker `me` starts its `op`-th operation. Returns false
    /// once a crash has happened; the worker must stop.
    pub fn begin_op(&self, me: usize, op: u64) -> bool {
        let mut st = lock(&self.st);
        st.ops[me] = op;
        st.crashed.is_none()
    }

    /// Worker `me` is done; passes the token on.
    pub fn leave(&self, me: usize) {
        let mut st = lock(&self.st);
        st.live[me] = false;
        if st.turn == me && st.crashed.is_none() {
            self.pass(&mut st, me);
        }
        self.cvs[st.turn].notify_one();
    }

    pub fn crash_point(&self) -> Option<CrashPoint> {
        lock(&self.st).crashed.clone()
    }

    pub fn switches(&self) -> u64 {
        lock(&self.st).switches
    }

    /// Stores seen at the site of a `SiteHit` plan.
    pub fn site_hits(&self) -> u64 {
        lock(&self.st).site_hits
    }

    /// Starts counting worker stores per site.
    pub fn enable_profile(&self) {
        lock(&self.st).profile = Some(BTreeMap::new());
    }

    pub fn profile(&self) -> BTreeMap<String, u64> {
        lock(&self.st)
            .profile
            .iter()
            .flatten()
            .map(|(k, v)| (k.to_string(), *v))
            .collect()
    }

    pub fn stores(&self) -> u64 {
        lock(&self.st).stores
    }

    fn slot(st: &State, thread: u32) -> Option<usize> {
        st.threads.iter().position(|t| *t == Some(thread))
    }

    fn pass(&self, st: &mut State, me: usize) {
        let others: Vec<usize> = (0..st.live.len())
            .filter(|&i| i != me && st.live[i])
            .collect();
        if others.is_empty() {
            return;
        }
        st.turn = others[st.rng.gen_range(0..others.len())];
        st.switches += 1;
    }

    fn switch<'a>(&'a self, mut st: MutexGuard<'a, State>, me: usize) {
        self.pass(&mut st, me);
        if st.turn == me {
            return;
        }
        self.cvs[st.turn].notify_one();
        while st.turn != me && st.crashed.is_none() {
            st = self.cvs[me].wait(st).unwrap_or_else(|e| e.into_inner());
        }
    }

    fn should_crash(&self, st: &mut State, site: &str) -> bool {
        match &self.plan {
            CrashPlan::Never => false,
            CrashPlan::Probabilistic { p } => {
                let u = mix64(self.seed ^ mix64(st.stores)) >> 11;
                (u as f64) < p * (1u64 << 53) as f64
            }
            CrashPlan::AtSite { site: s, after } => st.stores > *after && s == site,
            CrashPlan::SiteHit { site: s, hit } => {
                if s == site {
                    st.site_hits += 1;
                    st.site_hits == *hit
                } else {
                    false
                }
            }
            CrashPlan::AtStore { ordinal } => st.stores == *ordinal,
        }
    }
}

impl CrashHook for Scheduler {
    fn on_store(&self, event: &PmEvent) -> HookVerdict {
        let EventKind::Store { site, .. } = &event.kind else {
            return HookVerdict::Continue;
        };
        let mut st = lock(&self.st);
        let Some(me) = Scheduler::slot(&st, event.thread) else {
            return HookVerdict::Continue;
        };
        if st.crashed.is_some() {
            return HookVerdict::Continue;
        }
        st.stores += 1;
        if let Some(p) = &mut st.profile {
            *p.entry(site.name).or_default() += 1;
        }
        if self.should_crash(&mut st, site.name) {
            st.crashed = Some(CrashPoint {
                ordinal: st.stores,
                site: site.name.to_string(),
                worker: me,
                op: st.ops[me],
            });
            return HookVerdict::Crash;
        }
        if site.is_preemptible() {
            let p = if site.is_hot() {
                self.rates.hot
            } else {
                self.rates.normal
            };
            if st.rng.gen_bool(p) {
                self.switch(st, me);
            }
        }
        HookVerdict::Continue
    }

    fn after_crash(&self) {
        let _st = lock(&self.st);
        self.cvs.iter().for_each(Condvar::notify_all);
    }

    fn on_spin(&self) -> HookVerdict {
        let st = lock(&self.st);
        if let Some(me) = Scheduler::slot(&st, thread_index()) {
            if st.crashed.is_none() {
                self.switch(st, me);
            }
        }
        HookVerdict::Continue
    }
}
