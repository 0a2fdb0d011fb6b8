use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::Arc;

use pmindex::harness::*;
use pmindex::pm::{PmEvent, Site, HEAP_START, LINE_SIZE, RAW_SITE};
use pmindex::*;
use proptest::prelude::*;

fn small(index: IndexKind, policy: PolicyKind, states: u64) -> CampaignConfig {
    let mut c = CampaignConfig::new(index, policy);
    c.states = states;
    c.load_n = 600;
    c.test_ops = 600;
    c.seed = 11;
    c
}

fn spec(
    index: IndexKind,
    mutation: Option<Mutation>,
    pattern: KeyPattern,
    load_n: usize,
) -> StateSpec {
    StateSpec {
        index,
        key_kind: KeyKind::Int,
        mutation,
        policy: PolicyKind::Strict,
        pattern,
        seed: 5,
        load_n,
        test_ops: load_n,
        threads: 4,
        delete_ratio: 0.1,
        update_ratio: if index == IndexKind::Clht { 0.0 } else { 0.05 },
        plan: CrashPlan::Never,
        pool_size: 64 << 20,
    }
}

#[test]
fn single_state_without_crashes_passes() {
    for index in IndexKind::ALL {
        let mut cfg = small(index, PolicyKind::Strict, 1);
        cfg.mode = CrashMode::Off;
        let r = run_campaign(&cfg);
        assert!(r.pass, "{r:?}");
        assert_eq!((r.states_run, r.crashed_states), (1, 0));
        assert!(r.keys_checked > 0);
    }
}

#[test]
fn small_campaigns_pass_under_both_policies() {
    for index in IndexKind::ALL {
        for policy in [PolicyKind::Strict, PolicyKind::Adversarial] {
            let r = run_campaign(&small(index, policy, 8));
            assert!(r.pass, "{index} {policy:?}: {:?}", r.failures);
            assert!(r.crashed_states > 0);
            assert_eq!(r.lost_keys + r.wrong_values + r.post_crash_op_failures, 0);
        }
    }
}

#[test]
fn campaign_reports_are_deterministic() {
    let cfg = small(IndexKind::BwTree, PolicyKind::Adversarial, 4);
    assert_eq!(run_campaign(&cfg).to_json(), run_campaign(&cfg).to_json());
    let s = StateSpec {
        plan: CrashPlan::Probabilistic { p: 1e-3 },
        ..spec(IndexKind::Art, None, KeyPattern::Uniform, 800)
    };
    let (a, b) = (run_state(&s), run_state(&s));
    assert_eq!(
        (a.crash, a.report, a.switches),
        (b.crash, b.report, b.switches)
    );
}

#[test]
fn site_sweep_crashes_at_the_named_site() {
    let s = spec(IndexKind::Clht, None, KeyPattern::Uniform, 2000);
    let p = profile_load(&s);
    assert_eq!(p.sites.values().sum::<u64>(), p.stores);
    let hits = p.sites["clht.rehash.swap"];
    assert!(hits > 0);
    let out = run_state(&StateSpec {
        plan: CrashPlan::SiteHit {
            site: "clht.rehash.swap".into(),
            hit: hits,
        },
        ..s
    });
    assert_eq!(out.crash.unwrap().site, "clht.rehash.swap");
    assert!(out.report.pass);
}

#[test]
fn calibration_reaches_every_site_on_full_loads() {
    for index in IndexKind::ALL {
        let cal = Calibration::run(&CampaignConfig::new(index, PolicyKind::Strict));
        assert_eq!(cal.profiles.len(), KeyPattern::ALL.len());
        for site in crash_sites(index) {
            assert!(
                cal.profiles
                    .iter()
                    .any(|(_, p)| p.sites.get(site.name).is_some_and(|&h| h > 0)),
                "{}",
                site.name
            );
        }
    }
}

fn clht(tracking: Tracking, mutation: Option<Mutation>) -> (Arc<PmemPool>, Arc<dyn PmIndex>) {
    let pool = Arc::new(PmemPool::new(PoolConfig::new(16 << 20, tracking)).unwrap());
    let idx = open_index(
        IndexKind::Clht,
        pool.clone(),
        &IndexOptions::default().with_mutation(mutation),
    )
    .unwrap();
    (pool, idx)
}

#[test]
fn empty_expectation_is_a_vacuous_pass() {
    let (_, idx) = clht(Tracking::Counters, None);
    let r = check_consistency(&*idx, &Expected::new());
    assert!(r.pass && r.lost_keys.is_empty() && r.wrong_values.is_empty());
}

#[test]
fn key_lost_from_a_snapshot_is_reported() {
    let (pool, idx) = clht(Tracking::Shadow, None);
    let mut want = Expected::new();
    for i in 1..=20u64 {
        idx.insert(&Key::Int(i * 977), i).unwrap();
        want.insert(Key::Int(i * 977), Expectation::acked(Some(i)));
    }
    drop(idx);
    // Same pool, reopened with an insert that never persists its commit.
    let bad = open_index(
        IndexKind::Clht,
        pool.clone(),
        &IndexOptions::default().with_mutation(Some(Mutation::ClhtSkipInsertPersist)),
    )
    .unwrap();
    bad.insert(&Key::Int(31337), 99).unwrap();
    want.insert(Key::Int(31337), Expectation::acked(Some(99)));
    let img = pool.persisted_view(CrashPolicy::Strict).unwrap();
    let reopened = Arc::new(PmemPool::from_image(&img, Tracking::Counters).unwrap());
    let idx = open_index(IndexKind::Clht, reopened, &IndexOptions::default()).unwrap();
    let r = check_consistency(&*idx, &want);
    assert!(!r.pass);
    assert_eq!(r.lost_keys, vec![Key::Int(31337)]);
    assert!(r.wrong_values.is_empty());
}

#[test]
fn value_mismatch_is_reported() {
    for index in [IndexKind::Clht, IndexKind::Art] {
        let pool = Arc::new(PmemPool::new(PoolConfig::new(16 << 20, Tracking::Counters)).unwrap());
        let idx = open_index(index, pool, &IndexOptions::default()).unwrap();
        idx.insert(&Key::Int(5), 50).unwrap();
        idx.insert(&Key::Int(6), 60).unwrap();
        let mut want = Expected::new();
        want.insert(Key::Int(5), Expectation::acked(Some(51)));
        want.insert(Key::Int(6), Expectation::acked(Some(60)));
        let r = check_consistency(&*idx, &want);
        assert!(!r.pass);
        assert_eq!(
            r.wrong_values,
            vec![WrongValue {
                key: Key::Int(5),
                expected: Some(51),
                got: Some(50)
            }]
        );
        // An in-flight alternative makes either value acceptable.
        want.insert(
            Key::Int(5),
            Expectation {
                value: Some(51),
                alt: Some(Some(50)),
            },
        );
        assert!(check_consistency(&*idx, &want).pass);
    }
}

#[test]
fn ordered_scan_catches_keys_that_should_be_absent() {
    let pool = Arc::new(PmemPool::new(PoolConfig::new(16 << 20, Tracking::Counters)).unwrap());
    let idx = open_index(IndexKind::BwTree, pool, &IndexOptions::default()).unwrap();
    idx.insert(&Key::Int(5), 50).unwrap();
    idx.insert(&Key::Int(9), 90).unwrap();
    let mut want = Expected::new();
    want.insert(Key::Int(5), Expectation::acked(Some(50)));
    let r = check_consistency(&*idx, &want);
    assert_eq!(
        r.wrong_values,
        vec![WrongValue {
            key: Key::Int(9),
            expected: None,
            got: Some(90)
        }]
    );
}

const LOCK: Site = Site::new("test.lock").volatile();

fn traced() -> PmemPool {
    PmemPool::new(PoolConfig::new(1 << 20, Tracking::Traced)).unwrap()
}

#[test]
fn store_without_persist_is_reported() {
    let p = traced();
    let a = PmAddr(HEAP_START + 0x100);
    p.log_alloc(a, 256);
    let s = p.op_scope(7);
    p.store8(RAW_SITE, a, 1);
    p.store8(RAW_SITE, a.add(64), 2);
    p.persist(a.add(64), 8);
    s.finish();
    let s = p.op_scope(8);
    p.store8(RAW_SITE, a.add(128), 3);
    p.flush_line(a.add(128));
    // Flushed but never fenced.
    s.finish();
    let r = check_durability(&p.events());
    assert!(!r.pass);
    assert_eq!(r.ops_checked, 2);
    assert_eq!(
        r.unflushed_dirty_lines,
        vec![(7, a.line()), (8, a.add(128).line())]
    );
}

#[test]
fn volatile_lock_words_are_excluded() {
    let p = traced();
    let a = PmAddr(HEAP_START);
    p.log_alloc(a, 128);
    let s = p.op_scope(1);
    p.store8(LOCK, a, 1);
    p.store8(RAW_SITE, a.add(64), 5);
    p.persist(a.add(64), 8);
    p.store8(LOCK, a, 0);
    s.finish();
    let r = check_durability(&p.events());
    assert!(r.pass, "{r:?}");
    assert_eq!(r.ops_checked, 1);
}

#[test]
fn stores_outside_allocations_are_counted_not_checked() {
    let p = traced();
    let s = p.op_scope(1);
    p.store8(RAW_SITE, PmAddr(HEAP_START + 4096), 1);
    s.finish();
    let r = check_durability(&p.events());
    assert!(r.pass);
    assert_eq!(r.untraced_stores, 1);
}

#[test]
fn nested_scopes_are_checked_at_the_outer_end() {
    let p = traced();
    let a = PmAddr(HEAP_START);
    p.log_alloc(a, 64);
    let outer = p.op_scope(1);
    let inner = p.op_scope(2);
    p.store8(RAW_SITE, a, 1);
    inner.finish();
    p.persist(a, 8);
    outer.finish();
    assert!(check_durability(&p.events()).pass);
}

#[test]
fn index_traces_are_clean() {
    for index in IndexKind::ALL {
        let run = run_durability(index, KeyKind::Int, 3000, 3, 2);
        assert!(
            run.report.pass,
            "{index}: {:?}",
            &run.report.unflushed_dirty_lines[..5.min(run.report.unflushed_dirty_lines.len())]
        );
        assert_eq!(run.report.ops_checked, 4500);
        assert_eq!(run.readback_failures, 0);
    }
    let run = run_durability(IndexKind::Art, KeyKind::Str, 2000, 2, 3);
    assert!(run.report.pass);
}

#[test]
fn clht_trace_has_volatile_lock_stores() {
    let pool = Arc::new(PmemPool::new(PoolConfig::new(16 << 20, Tracking::Traced)).unwrap());
    let idx = open_index(IndexKind::Clht, pool.clone(), &IndexOptions::default()).unwrap();
    for i in 1..200u64 {
        pool.scoped(i, || idx.insert(&Key::Int(i), i).unwrap());
    }
    let events = pool.events();
    let locks = events
        .iter()
        .filter(|e| matches!(&e.kind, pm::EventKind::Store { site, .. } if site.is_volatile()))
        .count();
    assert!(locks > 0);
    let r = check_durability(&events);
    assert!(r.pass);
    assert_eq!(r.ops_checked, 199);
}

#[test]
fn skipped_persist_shows_up_in_the_trace() {
    let (pool, idx) = clht(Tracking::Traced, Some(Mutation::ClhtSkipInsertPersist));
    for i in 1..50u64 {
        pool.scoped(i, || idx.insert(&Key::Int(i * 7919), i).unwrap());
    }
    let r = check_durability(&pool.events());
    assert!(!r.pass);
}

#[test]
fn minimize_shrinks_a_skipped_persist() {
    let s = spec(
        IndexKind::Clht,
        Some(Mutation::ClhtSkipInsertPersist),
        KeyPattern::Uniform,
        300,
    );
    let m = minimize(&s);
    assert!(m.failing && m.reproducible);
    assert!(m.ops <= 10, "{} ops: {:?}", m.ops, m.spec);
    assert!(!m.report.pass);
    assert!(!run_state(&m.spec).report.pass);
}

#[test]
fn minimize_leaves_passing_states_alone() {
    let s = spec(IndexKind::Art, None, KeyPattern::Dense, 300);
    let m = minimize(&s);
    assert!(!m.failing && m.reproducible);
    assert_eq!(m.spec, s);
    assert_eq!(m.replays, 2);
}

#[test]
fn disabled_art_fix_is_caught_after_a_split_crash() {
    let base = spec(IndexKind::Art, None, KeyPattern::Clustered, 2000);
    let hits = profile_load(&base).sites["art.split.header"];
    assert!(hits > 0);
    let crash = |hit, mutation| {
        let s = StateSpec {
            mutation,
            plan: CrashPlan::SiteHit {
                site: "art.split.header".into(),
                hit,
            },
            ..base.clone()
        };
        run_state(&s).report.pass
    };
    let caught = (1..=hits)
        .filter(|&h| !crash(h, Some(Mutation::ArtDisableFix)))
        .count();
    assert!(caught > 0);
    assert!((1..=hits).all(|h| crash(h, None)));
}

#[test]
fn skipped_bwtree_helper_flush_is_caught_under_adversarial() {
    let base = StateSpec {
        policy: PolicyKind::Adversarial,
        ..spec(IndexKind::BwTree, None, KeyPattern::Interleaved, 4000)
    };
    let site = "bw.index_insert.cas";
    let hits = profile_load(&base).sites[site];
    let run = |hit, mutation| {
        let s = StateSpec {
            mutation,
            plan: CrashPlan::SiteHit {
                site: site.into(),
                hit,
            },
            ..base.clone()
        };
        run_state(&s).report.pass
    };
    let caught: Vec<u64> = (1..=hits)
        .filter(|&h| !run(h, Some(Mutation::BwTreeSkipHelperFlush)))
        .collect();
    assert!(!caught.is_empty());
    assert!(caught.iter().all(|&h| run(h, None)));
}

#[test]
fn key_sources_never_repeat() {
    for pattern in KeyPattern::ALL {
        for kind in [KeyKind::Int, KeyKind::Str] {
            let mut seen = HashSet::new();
            for t in 0..3 {
                let mut src = KeySource::new(pattern, kind, t, 3, 2000, 8);
                for _ in 0..2000 {
                    let k = src.fresh();
                    assert!(!k.is_reserved());
                    assert!(seen.insert(k), "{pattern:?} {kind:?} repeated {k:?}");
                }
            }
        }
    }
}

/// Line-level reference for a single thread: a line is left dirty if its
/// last store is not followed by a flush of it and then a fence.
fn reference(ops: &[(u8, u64)]) -> Vec<u64> {
    let mut last_store: HashMap<u64, usize> = HashMap::new();
    for (i, (kind, line)) in ops.iter().enumerate() {
        if *kind == 0 {
            last_store.insert(*line, i);
        }
    }
    let mut bad: Vec<u64> = last_store
        .into_iter()
        .filter(|&(line, s)| {
            !ops.iter().enumerate().any(|(f, (k, l))| {
                f > s && *k == 1 && *l == line && ops[f..].iter().any(|(k2, _)| *k2 == 2)
            })
        })
        .map(|(l, _)| l)
        .collect();
    bad.sort_unstable();
    bad
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn durability_matches_reference(ops in prop::collection::vec((0u8..3, 0u64..6), 0..40)) {
        let p = traced();
        let base = HEAP_START / LINE_SIZE;
        p.log_alloc(PmAddr(HEAP_START), 6 * LINE_SIZE);
        let s = p.op_scope(1);
        for (kind, line) in &ops {
            let a = PmAddr((base + line) * LINE_SIZE);
            match kind {
                0 => p.store8(RAW_SITE, a, 1 + *line),
                1 => p.flush_line(a),
                _ => p.fence(),
            }
        }
        s.finish();
        let events: Vec<PmEvent> = p.events();
        let got: Vec<u64> = check_durability(&events).unflushed_dirty_lines.iter().map(|(_, l)| l - base).collect();
        prop_assert_eq!(got, reference(&ops));
    }

    #[test]
    fn load_stream_ratios(inserts in 0usize..300, d in 0.0f64..0.5, u in 0.0f64..0.5, seed in any::<u64>()) {
        let mut src = KeySource::new(KeyPattern::Uniform, KeyKind::Int, 0, 1, inserts + 1, seed);
        let ops = workload_ops(&mut src, inserts, d, u, seed);
        let mut live: BTreeMap<Key, ()> = BTreeMap::new();
        let mut fresh = 0;
        for op in &ops {
            match op {
                Op::Insert(k, _) => {
                    if live.insert(*k, ()).is_none() {
                        fresh += 1;
                    }
                }
                Op::Delete(k) => prop_assert!(live.remove(k).is_some()),
                Op::Read(_) => prop_assert!(false),
            }
        }
        prop_assert_eq!(fresh, inserts);
    }
}

fn workload_ops(src: &mut KeySource, inserts: usize, d: f64, u: f64, seed: u64) -> Vec<Op> {
    pmindex::harness::workload::load_stream(src, 0, inserts, d, u, seed)
}
