//! Acceptance checks at full scale. Prints one PASS/FAIL line per criterion
//! and fails if any enforced criterion fails. Run with `--nocapture` to see
//! the lines as they are produced.

mod common;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;
use std::time::Instant;

use pmindex::bench::{self, Workload, WorkloadSpec};
use pmindex::clht::PClht;
use pmindex::harness::{run_campaign, run_durability, CampaignConfig, PolicyKind};
use pmindex::index::SmoKind;
use pmindex::*;
use rand::Rng;

const STATES: u64 = 10_000;
const SOFT_MS_PER_STATE: f64 = 20.0;

struct Line {
    name: String,
    pass: bool,
    /// Unenforced lines are printed but do not fail the target.
    enforced: bool,
    detail: String,
}

#[derive(Default)]
struct Results(Vec<Line>);

impl Results {
    fn record(
        &mut self,
        name: impl Into<String>,
        pass: bool,
        enforced: bool,
        detail: impl Into<String>,
    ) {
        let l = Line {
            name: name.into(),
            pass,
            enforced,
            detail: detail.into(),
        };
        let tag = match (l.pass, l.enforced) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "FAIL (not enforced)",
        };
        println!("{tag} {}: {}", l.name, l.detail);
        self.0.push(l);
    }

    fn check(&mut self, name: impl Into<String>, pass: bool, detail: impl Into<String>) {
        self.record(name, pass, true, detail);
    }
}

fn pool(size: u64, tracking: Tracking) -> Arc<PmemPool> {
    Arc::new(PmemPool::new(PoolConfig::new(size, tracking)).unwrap())
}

fn open(kind: IndexKind, key_kind: KeyKind, size: u64, tracking: Tracking) -> Arc<dyn PmIndex> {
    open_index(
        kind,
        pool(size, tracking),
        &IndexOptions::default().with_key_kind(key_kind),
    )
    .unwrap()
}

fn key(kind: KeyKind, n: u64) -> Key {
    match kind {
        KeyKind::Int => Key::Int(n),
        KeyKind::Str => Key::ycsb(n),
    }
}

fn key_kinds(index: IndexKind) -> &'static [KeyKind] {
    if index == IndexKind::Clht {
        &[KeyKind::Int]
    } else {
        &[KeyKind::Int, KeyKind::Str]
    }
}

fn campaigns(res: &mut Results) {
    for index in IndexKind::ALL {
        for policy in [PolicyKind::Strict, PolicyKind::Adversarial] {
            let cfg = CampaignConfig {
                states: STATES,
                ..CampaignConfig::new(index, policy)
            };
            let t = Instant::now();
            let r = run_campaign(&cfg);
            let ms = t.elapsed().as_secs_f64() * 1e3 / r.states_run.max(1) as f64;
            res.check(
                format!("crash campaign {index} {policy:?}"),
                r.pass && r.states_run == STATES && r.uncovered_sites.is_empty(),
                format!(
                    "{} states ({} crashed mid-load), {} keys checked, lost {}, wrong {}, failed post-crash ops {}, uncovered sites {:?}",
                    r.states_run, r.crashed_states, r.keys_checked, r.lost_keys, r.wrong_values, r.post_crash_op_failures, r.uncovered_sites
                ),
            );
            res.record(
                format!("campaign speed {index} {policy:?}"),
                ms <= SOFT_MS_PER_STATE,
                false,
                format!("{ms:.1} ms/state, soft target {SOFT_MS_PER_STATE} ms/state"),
            );
        }
    }
}

fn mutations(res: &mut Results) {
    let cases = [
        (
            IndexKind::Clht,
            Mutation::ClhtSkipInsertPersist,
            PolicyKind::Strict,
        ),
        (
            IndexKind::BwTree,
            Mutation::BwTreeSkipHelperFlush,
            PolicyKind::Adversarial,
        ),
        (IndexKind::Art, Mutation::ArtDisableFix, PolicyKind::Strict),
    ];
    for (index, m, policy) in cases {
        let cfg = CampaignConfig {
            states: STATES,
            mutation: Some(m),
            stop_after: Some(1),
            ..CampaignConfig::new(index, policy)
        };
        let r = run_campaign(&cfg);
        let first = r.failures.first();
        res.check(
            format!("mutation {m:?} detected"),
            r.failing_states > 0,
            match first {
                Some(f) => format!(
                    "first failing state {} of {STATES} ({:?}, crash {:?}): lost {}, wrong {}, failed ops {}",
                    f.state,
                    f.spec.pattern,
                    f.crash.as_ref().map(|c| c.site.clone()),
                    f.lost_keys,
                    f.wrong_values,
                    f.post_crash_op_failures
                ),
                None => format!("no failing state in {} states", r.states_run),
            },
        );
    }
}

fn durability(res: &mut Results) {
    for index in IndexKind::ALL {
        let run = run_durability(index, KeyKind::Int, 100_000, 4, 1);
        let rep = &run.report;
        res.check(
            format!("durability {index}"),
            rep.pass && run.readback_failures == 0 && run.inserts >= 100_000,
            format!(
                "{} inserts, {} ops checked, {} unflushed dirty lines, {} untraced stores, {} read-back failures",
                run.inserts,
                rep.ops_checked,
                rep.unflushed_dirty_lines.len(),
                rep.untraced_stores,
                run.readback_failures
            ),
        );
    }
}

fn flush_counts(res: &mut Results) {
    // Steady state: inserts that neither append a chain bucket nor rehash.
    let t = PClht::open(pool(1 << 30, Tracking::Counters), &IndexOptions::default()).unwrap();
    let mut r = common::rng(11);
    let (mut steady, mut other) = (0u64, BTreeMap::new());
    for i in 0..200_000u64 {
        let k = r.gen_range(1..u64::MAX);
        let before = (t.stat("chain_appends"), t.stat("rehashes"));
        let (out, c) = t.pool().scoped(i + 1, || t.insert(&Key::Int(k), i + 1));
        if out.is_err() || before != (t.stat("chain_appends"), t.stat("rehashes")) {
            continue;
        }
        steady += 1;
        if c.clwb != 1 {
            *other.entry(c.clwb).or_insert(0u64) += 1;
        }
    }
    res.check(
        "clht steady-state insert flushes exactly 1 line",
        other.is_empty() && steady > 0,
        format!("{steady} steady-state inserts, other clwb counts {other:?}"),
    );

    let n = bench::DEFAULT_N;
    // The criterion is the workload B mix. The load phase is shown for
    // reference; it includes every rehash copy of a table grown from 768
    // buckets.
    let b = bench::run(
        IndexKind::Clht,
        &WorkloadSpec::new(Workload::B, KeyKind::Int, n),
    )
    .unwrap();
    let rb = b.run.as_ref().unwrap().clwb_per_insert();
    res.check(
        "clht workload b clwb/insert <= 2",
        rb <= 2.0 && b.pass(),
        format!(
            "workload b {rb:.3} at n={n} (load phase {:.3}, not part of the check)",
            b.load.clwb_per_insert()
        ),
    );

    let mut detail = Vec::new();
    let mut ok = true;
    for kk in [KeyKind::Int, KeyKind::Str] {
        let r = bench::run(IndexKind::Art, &WorkloadSpec::new(Workload::LoadA, kk, n)).unwrap();
        let c = r.load.clwb_per_insert();
        ok &= (2.0..=4.0).contains(&c) && r.pass();
        detail.push(format!("{kk} {c:.3}"));
    }
    res.check(
        "art clwb/insert in [2, 4]",
        ok,
        format!("load a at n={n}: {}", detail.join(", ")),
    );
}

fn oracle_run(index: IndexKind, kk: KeyKind, ops: u64, seed: u64) -> Result<String, String> {
    const SPACE: u64 = 200_000;
    let t = open(index, kk, 1 << 30, Tracking::Counters);
    let mut want: BTreeMap<Key, Value> = BTreeMap::new();
    let mut r = common::rng(seed);
    let (mut inserts, mut deletes, mut lookups) = (0u64, 0u64, 0u64);
    for i in 0..ops {
        let k = key(kk, r.gen_range(1..=SPACE));
        let v = i + 1;
        match r.gen_range(0..10) {
            0..=4 => {
                inserts += 1;
                let got = t.insert(&k, v);
                if index.upserts() || !want.contains_key(&k) {
                    got.map_err(|e| format!("op {i}: insert {k:?}: {e}"))?;
                    want.insert(k, v);
                } else if got != Err(IndexError::Exists) {
                    return Err(format!("op {i}: duplicate insert {k:?} returned {got:?}"));
                }
            }
            5..=6 => {
                deletes += 1;
                t.delete(&k)
                    .map_err(|e| format!("op {i}: delete {k:?}: {e}"))?;
                want.remove(&k);
            }
            _ => {
                lookups += 1;
                let got = t.lookup(&k);
                if got != want.get(&k).copied() {
                    return Err(format!(
                        "op {i}: lookup {k:?} = {got:?}, want {:?}",
                        want.get(&k)
                    ));
                }
            }
        }
    }
    for (k, v) in &want {
        if t.lookup(k) != Some(*v) {
            return Err(format!("final lookup {k:?}"));
        }
    }
    let mut ranges = 0;
    if index.is_ordered() {
        for q in 0..1000 {
            let lo = key(kk, r.gen_range(1..=SPACE));
            let width = r.gen_range(0..1000);
            let hi = want.range(lo..).nth(width).map_or(lo, |(k, _)| *k).max(lo);
            let got = t
                .range_query(&lo, &hi)
                .map_err(|e| format!("range {q}: {e}"))?;
            let exp: Vec<(Key, Value)> = want.range(lo..=hi).map(|(k, v)| (*k, *v)).collect();
            if got != exp {
                return Err(format!(
                    "range {q} [{lo:?}, {hi:?}]: {} pairs, want {}",
                    got.len(),
                    exp.len()
                ));
            }
            ranges += 1;
        }
    }
    t.check_structure()?;
    Ok(format!(
        "{kk}: {inserts} inserts, {deletes} deletes, {lookups} lookups, {ranges} ranges, {} live keys",
        want.len()
    ))
}

fn oracle(res: &mut Results) {
    for index in IndexKind::ALL {
        let mut ok = true;
        let mut detail = Vec::new();
        for (i, kk) in key_kinds(index).iter().enumerate() {
            match oracle_run(index, *kk, 1_000_000, 21 + i as u64) {
                Ok(s) => detail.push(s),
                Err(e) => {
                    ok = false;
                    detail.push(format!("{kk}: {e}"));
                }
            }
        }
        res.check(format!("oracle equivalence {index}"), ok, detail.join("; "));
    }
}

/// Every live key of `t`; CLHT is unordered, so it is read out directly.
fn live_keys(index: IndexKind, t: &Arc<dyn PmIndex>, kk: KeyKind) -> BTreeSet<Key> {
    if index == IndexKind::Clht {
        let c = PClht::open(t.pool().clone(), &IndexOptions::default()).unwrap();
        return c.entries().into_iter().map(|(k, _)| Key::Int(k)).collect();
    }
    let (lo, hi) = pmindex::harness::campaign::key_bounds(kk);
    t.range_query(&lo, &hi)
        .unwrap()
        .into_iter()
        .map(|(k, _)| k)
        .collect()
}

fn concurrency(res: &mut Results) {
    const THREADS: u64 = 8;
    const TOTAL: u64 = 800_000;
    for index in IndexKind::ALL {
        let mut ok = true;
        let mut detail = Vec::new();
        for &kk in key_kinds(index) {
            let t = open(index, kk, 1 << 30, Tracking::Counters);
            let per = TOTAL / THREADS;
            let failed: u64 = std::thread::scope(|s| {
                let hs: Vec<_> = (0..THREADS)
                    .map(|th| {
                        let t = &t;
                        s.spawn(move || {
                            let mut r = common::rng(th);
                            let mut mine: Vec<u64> = (th * per + 1..=(th + 1) * per).collect();
                            for i in (1..mine.len()).rev() {
                                mine.swap(i, r.gen_range(0..=i));
                            }
                            mine.iter()
                                .filter(|&&n| t.insert(&key(kk, n), n).is_err())
                                .count() as u64
                        })
                    })
                    .collect();
                hs.into_iter().map(|h| h.join().unwrap()).sum()
            });
            let union: BTreeSet<Key> = (1..=TOTAL).map(|n| key(kk, n)).collect();
            let got = live_keys(index, &t, kk);
            let phantoms = got.difference(&union).count();
            let missing = union.difference(&got).count();
            let wrong = (1..=TOTAL)
                .filter(|&n| t.lookup(&key(kk, n)) != Some(n))
                .count();
            ok &= failed == 0
                && phantoms == 0
                && missing == 0
                && wrong == 0
                && t.check_structure().is_ok();
            detail.push(format!(
                "{kk}: {} keys, {failed} failed inserts, {missing} missing, {phantoms} phantoms, {wrong} wrong values",
                got.len()
            ));
        }
        res.check(
            format!("8-thread disjoint insert {index}"),
            ok,
            detail.join("; "),
        );
    }

    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    for index in IndexKind::ALL {
        let tput = |threads| {
            let spec = WorkloadSpec {
                threads,
                ..WorkloadSpec::new(Workload::C, KeyKind::Int, bench::DEFAULT_N)
            };
            let r = bench::run(index, &spec).unwrap();
            assert!(r.pass());
            r.run.unwrap().ops_per_sec()
        };
        let (one, eight) = (tput(1), tput(8));
        let speedup = eight / one;
        // With fewer than 8 cores the threads time-share, so the ratio
        // measures the host, not the index.
        res.record(
            format!("workload c scaling {index}"),
            speedup >= 3.0,
            cores >= 8,
            format!("{one:.0} ops/s at 1 thread, {eight:.0} ops/s at 8 threads, {speedup:.2}x (need 3x), {cores} cores available"),
        );
    }
}

fn pm_model(res: &mut Results) {
    let bad = common::strict_oracle_mismatches(10_000, 16, 31);
    res.check(
        "strict persisted view matches log replay",
        bad == 0,
        format!("{bad} mismatches in 10000 sequences over 16 lines"),
    );
    let (bad, n) = common::adversarial_oracle_mismatches(10_000, 32);
    res.check(
        "adversarial views lie in the subset space",
        bad == 0,
        format!("{bad} views outside the enumerated space, {n} sequences x 4 seeds on 1 line"),
    );
}

fn smo_counts(res: &mut Results) {
    let t = open(IndexKind::Art, KeyKind::Str, 1 << 30, Tracking::Traced);
    let mut r = common::rng(41);
    for i in 0..50_000u64 {
        let n = r.gen_range(1..200_000u64);
        if i % 4 == 3 {
            t.delete(&Key::ycsb(n)).unwrap();
        } else {
            t.insert(&Key::ycsb(n), i + 1).unwrap();
        }
    }
    let splits: Vec<usize> = common::smo_publishes(&t.pool().events())
        .values()
        .filter(|(k, _)| *k == SmoKind::ArtSplit)
        .map(|(_, c)| *c)
        .collect();
    let counts: BTreeSet<usize> = splits.iter().copied().collect();
    res.check(
        "art split publish stores = 2",
        !splits.is_empty() && counts == BTreeSet::from([2]),
        format!("{} splits, distinct counts {counts:?}", splits.len()),
    );

    let t = open(IndexKind::BwTree, KeyKind::Int, 1 << 30, Tracking::Traced);
    let mut r = common::rng(42);
    for n in 1..=40_000u64 {
        t.insert(&Key::Int(n), n).unwrap();
    }
    for _ in 0..60_000 {
        let n = r.gen_range(1..=40_000u64);
        if r.gen_bool(0.6) {
            t.delete(&Key::Int(n)).unwrap();
        } else {
            t.insert(&Key::Int(n), n + 1).unwrap();
        }
    }
    for n in 1..=40_000u64 {
        t.delete(&Key::Int(n)).unwrap();
    }
    let mut max: HashMap<SmoKind, (usize, usize)> = HashMap::new();
    for (kind, c) in common::smo_publishes(&t.pool().events()).into_values() {
        let e = max.entry(kind).or_default();
        e.0 += 1;
        e.1 = e.1.max(c);
    }
    let mut kinds: Vec<_> = max.into_iter().collect();
    kinds.sort_by_key(|(k, _)| *k as u32);
    let worst = kinds.iter().map(|(_, (_, m))| *m).max().unwrap_or(0);
    res.check(
        "bwtree smo publish stores <= 5",
        worst <= 5 && kinds.len() >= 3,
        kinds
            .iter()
            .map(|(k, (n, m))| format!("{k:?}: {n} instances, max {m}"))
            .collect::<Vec<_>>()
            .join(", "),
    );
}

#[test]
fn acceptance() {
    let mut res = Results::default();
    let start = Instant::now();
    pm_model(&mut res);
    smo_counts(&mut res);
    oracle(&mut res);
    flush_counts(&mut res);
    durability(&mut res);
    concurrency(&mut res);
    mutations(&mut res);
    campaigns(&mut res);

    let failed: Vec<&str> = res
        .0
        .iter()
        .filter(|l| l.enforced && !l.pass)
        .map(|l| l.name.as_str())
        .collect();
    let waived = res.0.iter().filter(|l| !l.enforced && !l.pass).count();
    println!(
        "{} checks, {} enforced failures, {waived} unenforced failures, {:.0?}",
        res.0.len(),
        failed.len(),
        start.elapsed()
    );
    assert!(failed.is_empty(), "failed: {failed:?}");
}
