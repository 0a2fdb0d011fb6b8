use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use pmindex::bench::{self, Workload, WorkloadSpec};
use pmindex::harness::{
    minimize, run_campaign_with, run_durability, run_state, CampaignConfig, CrashMode,
    FailureRecord, PolicyKind,
};
use pmindex::{IndexKind, KeyKind, Mutation};

#[derive(Parser)]
#[command(
    name = "pmindex",
    version,
    about = "Persistent index benchmarks and crash-consistency checks"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a YCSB-style workload and report throughput and flush counts.
    Bench(BenchArgs),
    /// Run a crash-state campaign.
    Crashtest(CrashArgs),
    /// Trace a two-phase workload and check every operation's durability.
    Durability(DurabilityArgs),
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    index: IndexKind,
    #[arg(long, default_value = "a")]
    workload: Workload,
    #[arg(long, default_value = "randint")]
    keys: KeyKind,
    #[arg(long, default_value_t = bench::DEFAULT_N)]
    n: usize,
    /// Defaults to 16, capped at the available parallelism.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Longest scan of workload e.
    #[arg(long, default_value_t = 100)]
    scan_max: usize,
    /// Report file; CSV if it ends in .csv, JSON otherwise.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct CrashArgs {
    #[arg(long)]
    index: IndexKind,
    #[arg(long, default_value_t = 10_000)]
    states: u64,
    #[arg(long, default_value = "strict")]
    policy: PolicyKind,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value = "randint")]
    keys: KeyKind,
    /// Entries loaded per state.
    #[arg(long, default_value_t = 10_000)]
    load_n: usize,
    /// Post-crash operations per state.
    #[arg(long, default_value_t = 10_000)]
    test_ops: usize,
    #[arg(long, default_value_t = 4)]
    threads: usize,
    /// off, probabilistic, sweep or mixed.
    #[arg(long, default_value = "mixed")]
    mode: CrashMode,
    /// Seed a known defect: clht-skip-insert-persist,
    /// bwtree-skip-helper-flush or art-disable-fix.
    #[arg(long, value_parser = parse_mutation)]
    mutation: Option<Mutation>,
    /// Stop after this many failing states.
    #[arg(long)]
    stop_after: Option<u64>,
    /// Directory for failure bundles (spec, crash point and pool image).
    #[arg(long)]
    artifacts: Option<PathBuf>,
    /// Campaign report as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Shrink the first failure by replay.
    #[arg(long)]
    minimize: bool,
    /// Replay a failure bundle's JSON instead of running a campaign.
    #[arg(long, conflicts_with = "minimize")]
    replay: Option<PathBuf>,
}

#[derive(Args)]
struct DurabilityArgs {
    #[arg(long)]
    index: IndexKind,
    /// Inserts in the load phase; the test phase runs n/2 more operations.
    #[arg(long, default_value_t = 100_000)]
    n: u64,
    #[arg(long, default_value = "randint")]
    keys: KeyKind,
    #[arg(long, default_value_t = 4)]
    threads: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    report: Option<PathBuf>,
}

fn parse_mutation(s: &str) -> Result<Mutation, String> {
    match s {
        "clht-skip-insert-persist" => Ok(Mutation::ClhtSkipInsertPersist),
        "bwtree-skip-helper-flush" => Ok(Mutation::BwTreeSkipHelperFlush),
        "art-disable-fix" => Ok(Mutation::ArtDisableFix),
        _ => Err(format!("unknown mutation {s:?}")),
    }
}

fn status(ok: bool) -> ExitCode {
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn bench_cmd(a: BenchArgs) -> Result<bool, String> {
    let spec = WorkloadSpec {
        workload: a.workload,
        key_type: a.keys,
        n: a.n,
        threads: a.threads.unwrap_or_else(bench::default_threads),
        seed: a.seed,
        scan_max: a.scan_max,
    };
    let r = bench::run(a.index, &spec).map_err(|e| e.to_string())?;
    let rows = r.rows();
    bench::write_csv(&rows, std::io::stdout()).map_err(|e| e.to_string())?;
    for (name, p) in ["load", "run"].iter().zip(r.phases()) {
        println!(
            "# {name}: {} ops, clwb/insert {:.3}, mfence/insert {:.3}, errors {}, counters conserved {}",
            p.ops,
            p.clwb_per_insert(),
            p.mfence_per_insert(),
            p.errors,
            p.conserved()
        );
    }
    println!("# verify: {} acknowledged keys missing", r.verify_failures);
    if let Some(path) = &a.report {
        bench::write_report(&rows, path).map_err(|e| e.to_string())?;
    }
    Ok(r.pass())
}

fn print_failure(f: &FailureRecord) {
    println!(
        "  state {} seed {:#x} pattern {:?} crash {:?}: {} lost, {} wrong, {} failed ops",
        f.state,
        f.spec.seed,
        f.spec.pattern,
        f.crash,
        f.lost_keys,
        f.wrong_values,
        f.post_crash_op_failures
    );
    for s in &f.sample {
        println!("    {s}");
    }
}

fn crashtest_cmd(a: CrashArgs) -> Result<bool, String> {
    if let Some(path) = &a.replay {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let rec: FailureRecord = serde_json::from_str(&text).map_err(|e| e.to_string())?;
        let out = run_state(&rec.spec);
        println!("crash {:?}", out.crash);
        println!(
            "{}",
            serde_json::to_string_pretty(&out.report).map_err(|e| e.to_string())?
        );
        return Ok(out.report.pass);
    }
    let mut cfg = CampaignConfig::new(a.index, a.policy);
    cfg.key_kind = a.keys;
    cfg.states = a.states;
    cfg.load_n = a.load_n;
    cfg.test_ops = a.test_ops;
    cfg.threads = a.threads;
    cfg.mode = a.mode;
    cfg.seed = a.seed;
    cfg.mutation = a.mutation;
    cfg.stop_after = a.stop_after;
    cfg.artifacts = a.artifacts.clone();
    if a.index == IndexKind::Clht && a.keys == KeyKind::Str {
        return Err("clht supports randint keys only".into());
    }

    let start = Instant::now();
    let every = (a.states / 20).max(1);
    let r = run_campaign_with(&cfg, |i, _| {
        if (i + 1) % every == 0 {
            eprintln!("[{}/{}] {:.0?}", i + 1, a.states, start.elapsed());
        }
    });
    let per_state = start.elapsed().as_secs_f64() * 1e3 / r.states_run.max(1) as f64;
    println!(
        "{} {:?} seed {}: {} states ({} crashed mid-load), {} keys checked, {:.1} ms/state",
        r.index, r.policy, r.seed, r.states_run, r.crashed_states, r.keys_checked, per_state
    );
    println!(
        "lost {} wrong {} failed post-crash ops {} failed load ops {} failing states {}",
        r.lost_keys, r.wrong_values, r.post_crash_op_failures, r.load_failures, r.failing_states
    );
    if !r.uncovered_sites.is_empty() {
        println!("sites never crashed at: {}", r.uncovered_sites.join(", "));
    }
    for f in &r.failures {
        print_failure(f);
    }
    if a.minimize {
        if let Some(f) = r.failures.first() {
            let m = minimize(&f.spec);
            println!(
                "minimized state {}: {} ops, load_n {}, test_ops {}, threads {}, crash {:?}, reproducible {}, {} replays",
                f.state, m.ops, m.spec.load_n, m.spec.test_ops, m.spec.threads, m.crash, m.reproducible, m.replays
            );
        }
    }
    if let Some(path) = &a.report {
        std::fs::write(path, r.to_json()).map_err(|e| format!("{}: {e}", path.display()))?;
    }
    println!("{}", if r.pass { "PASS" } else { "FAIL" });
    Ok(r.pass)
}

fn durability_cmd(a: DurabilityArgs) -> Result<bool, String> {
    if a.index == IndexKind::Clht && a.keys == KeyKind::Str {
        return Err("clht supports randint keys only".into());
    }
    let run = run_durability(a.index, a.keys, a.n, a.threads, a.seed);
    let rep = &run.report;
    println!(
        "{} {}: {} ops checked over {} events, {} unflushed dirty lines, {} untraced stores, {} read-back failures",
        run.index,
        run.key_kind,
        rep.ops_checked,
        run.events,
        rep.unflushed_dirty_lines.len(),
        rep.untraced_stores,
        run.readback_failures
    );
    for (op, line) in rep.unflushed_dirty_lines.iter().take(10) {
        println!("  op {op:#x} left line {line:#x} unflushed");
    }
    if let Some(path) = &a.report {
        let s = serde_json::to_string_pretty(&run).map_err(|e| e.to_string())?;
        std::fs::write(path, s).map_err(|e| format!("{}: {e}", path.display()))?;
    }
    let ok = rep.pass && run.readback_failures == 0;
    println!("{}", if ok { "PASS" } else { "FAIL" });
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match cli.cmd {
        Cmd::Bench(a) => bench_cmd(a),
        Cmd::Crashtest(a) => crashtest_cmd(a),
        Cmd::Durability(a) => durability_cmd(a),
    };
    match r {
        Ok(ok) => status(ok),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
