use std::collections::hash_map::DefaultHasher;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use dfpregel::algorithms::{
    cc_program, mutation_program, pagerank_program, sssp_program, MutationScript, DEFAULT_DAMPING,
};
use dfpregel::ft::{FailureInjector, InjectedFailure};
use dfpregel::graphio::{gen_graph, read_dump, write_graph, GraphKind};
use dfpregel::ops::{Connector, GroupBy, Join, Storage};
use dfpregel::{
    run_job, EngineConfig, Error, JobReport, JobSpec, Mutation, PlanConfig, UserProgram, VertexId,
    VertexTuple,
};

#[derive(Parser, Debug)]
#[command(name = "dfpregel", version, about = "Vertex-centric graph jobs on a relational dataflow engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one job and dump the final vertices.
    Run(RunArgs),
    /// Generate a synthetic graph file.
    Gen(GenArgs),
    /// Run a job under all 16 plan configurations and compare them.
    BenchPlans(BenchArgs),
    /// Run a job with an injected worker failure and compare it to a clean run.
    RecoverTest(RecoverArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Algo {
    Pagerank,
    Sssp,
    Cc,
    MutateTest,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum JoinArg {
    Outer,
    Leftouter,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum GroupByArg {
    Sort,
    Hashsort,
    Preclustered,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ConnectorArg {
    Pipelined,
    Merge,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum StorageArg {
    Btree,
    Lsm,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum KindArg {
    Uniform,
    Powerlaw,
    Path,
    Cycle,
}

#[derive(Args, Debug, Clone)]
struct AlgoArgs {
    #[arg(long, value_enum)]
    algo: Algo,
    /// SSSP source vertex.
    #[arg(long, default_value_t = 0)]
    source: u64,
    /// PageRank update iterations.
    #[arg(long, default_value_t = 10)]
    iterations: u64,
    #[arg(long, default_value_t = DEFAULT_DAMPING)]
    damping: f64,
    /// Mutation script for mutate-test: `superstep<TAB>issuer<TAB>insert|delete<TAB>vid[<TAB>value]`.
    #[arg(long)]
    script: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct JobArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum)]
    join: Option<JoinArg>,
    #[arg(long, value_enum)]
    groupby: Option<GroupByArg>,
    #[arg(long, value_enum)]
    connector: Option<ConnectorArg>,
    #[arg(long, value_enum)]
    storage: Option<StorageArg>,
    /// Defaults to the number of workers.
    #[arg(long)]
    partitions: Option<usize>,
    /// Defaults to the number of logical cores.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, default_value_t = 0)]
    checkpoint_every: u64,
    #[arg(long)]
    max_supersteps: Option<u64>,
    /// Buffer cache size; unbounded when omitted.
    #[arg(long)]
    buffer_cache_mb: Option<f64>,
    #[arg(long, default_value_t = 64.0)]
    groupby_mb: f64,
    /// Multiplies both memory budgets.
    #[arg(long, default_value_t = 1.0)]
    mem_scale: f64,
    /// Working directory; `PREGELIX_WORKDIR` overrides the default temp dir.
    #[arg(long)]
    workdir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    algo: AlgoArgs,
    #[command(flatten)]
    job: JobArgs,
    #[arg(long)]
    output: PathBuf,
    /// Stats CSV path; defaults to `<output>/stats.csv`.
    #[arg(long)]
    stats: Option<PathBuf>,
    /// Inject a failure, as `worker:superstep`. Repeatable.
    #[arg(long = "fail", value_parser = parse_failure)]
    failures: Vec<InjectedFailure>,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, value_enum)]
    kind: KindArg,
    #[arg(long)]
    n: u64,
    #[arg(long, default_value_t = 8)]
    avg_degree: u64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Add reverse edges (for connected components).
    #[arg(long)]
    symmetric: bool,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[command(flatten)]
    algo: AlgoArgs,
    #[command(flatten)]
    job: JobArgs,
    /// Comparison CSV path; stdout when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RecoverArgs {
    #[command(flatten)]
    algo: AlgoArgs,
    #[command(flatten)]
    job: JobArgs,
    #[arg(long, default_value_t = 0)]
    fail_worker: usize,
    #[arg(long)]
    fail_at: u64,
}

fn parse_failure(s: &str) -> Result<InjectedFailure, String> {
    let (w, st) = s
        .split_once(':')
        .ok_or_else(|| format!("expected worker:superstep, got {s:?}"))?;
    Ok(InjectedFailure {
        worker: w.parse().map_err(|e| format!("bad worker {w:?}: {e}"))?,
        superstep: st.parse().map_err(|e| format!("bad superstep {st:?}: {e}"))?,
    })
}

/// Distinguishes bad input (exit 1) from failed jobs (exit 2).
struct Invalid(anyhow::Error);

fn classify(e: anyhow::Error) -> (u8, anyhow::Error) {
    match e.downcast_ref::<Error>() {
        Some(Error::Validation(_)) | Some(Error::Parse { .. }) => (1, e),
        _ => match e.downcast::<Invalid>() {
            Ok(Invalid(inner)) => (1, inner),
            Err(e) => (2, e),
        },
    }
}

impl std::fmt::Debug for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

impl std::error::Error for Invalid {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Invalid(anyhow!(msg.into())))
}

fn parse_script(path: &Path) -> anyhow::Result<MutationScript> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut script = MutationScript::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let bad = || invalid(format!("{}:{}: malformed mutation line", path.display(), i + 1));
        if f.len() < 4 {
            return Err(bad());
        }
        let superstep: u64 = f[0].parse().map_err(|_| bad())?;
        let issuer: u64 = f[1].parse().map_err(|_| bad())?;
        let vid: u64 = f[3].parse().map_err(|_| bad())?;
        let m = match f[2] {
            "delete" => Mutation::delete(vid),
            "insert" => {
                let value: u64 = f.get(4).unwrap_or(&"0").parse().map_err(|_| bad())?;
                Mutation::insert(VertexTuple::new(vid, value.to_be_bytes().to_vec(), vec![]))
            }
            _ => return Err(bad()),
        };
        script.entry(superstep).or_default().push((VertexId(issuer), m));
    }
    Ok(script)
}

fn program(a: &AlgoArgs) -> anyhow::Result<UserProgram> {
    Ok(match a.algo {
        Algo::Pagerank => pagerank_program(a.iterations, a.damping)?,
        Algo::Sssp => sssp_program(VertexId(a.source)),
        Algo::Cc => cc_program(),
        Algo::MutateTest => mutation_program(match &a.script {
            Some(p) => parse_script(p)?,
            None => MutationScript::new(),
        }),
    })
}

fn plan(j: &JobArgs, hint: Option<PlanConfig>) -> PlanConfig {
    let mut p = hint.unwrap_or_default();
    if let Some(x) = j.join {
        p.join = match x {
            JoinArg::Outer => Join::FullOuter,
            JoinArg::Leftouter => Join::LeftOuter,
        };
    }
    if let Some(x) = j.groupby {
        p.group_by = match x {
            GroupByArg::Sort => GroupBy::SortBased,
            GroupByArg::Hashsort => GroupBy::HashSort,
            GroupByArg::Preclustered => GroupBy::Preclustered,
        };
    }
    if let Some(x) = j.connector {
        p.connector = match x {
            ConnectorArg::Pipelined => Connector::PartitionPipelined,
            ConnectorArg::Merge => Connector::PartitionMergeMaterialized,
        };
    }
    if let Some(x) = j.storage {
        p.storage = match x {
            StorageArg::Btree => Storage::BTree,
            StorageArg::Lsm => Storage::Lsm,
        };
    }
    p
}

fn mb(v: f64) -> usize {
    (v * 1024.0 * 1024.0) as usize
}

/// A work directory that is removed when dropped unless the user chose it.
struct WorkDir {
    path: PathBuf,
    owned: bool,
}

impl WorkDir {
    fn new(explicit: Option<&Path>, tag: &str) -> anyhow::Result<Self> {
        let (base, owned) = match explicit {
            Some(p) => (p.to_path_buf(), false),
            None => match std::env::var_os("PREGELIX_WORKDIR") {
                Some(p) => (PathBuf::from(p), false),
                None => (std::env::temp_dir(), true),
            },
        };
        let path = base.join(format!("dfpregel-{}-{tag}", std::process::id()));
        if path.exists() {
            fs::remove_dir_all(&path)?;
        }
        fs::create_dir_all(&path).with_context(|| format!("creating {}", path.display()))?;
        Ok(WorkDir { path, owned })
    }
}

impl Drop for WorkDir {
    fn drop(&mut self) {
        if self.owned {
            let _ = fs::remove_dir_all(&self.path);
        }
    }
}

fn engine_config(j: &JobArgs, workdir: &Path) -> anyhow::Result<EngineConfig> {
    if j.mem_scale.is_nan() || j.mem_scale <= 0.0 {
        return Err(invalid("--mem-scale must be > 0"));
    }
    let mut cfg = EngineConfig::new(workdir.join("state"));
    if let Some(w) = j.workers {
        if w == 0 {
            return Err(invalid("--workers must be at least 1"));
        }
        cfg.num_workers = w;
    }
    cfg.buffer_cache_bytes = j.buffer_cache_mb.map(|m| mb(m * j.mem_scale));
    cfg.groupby_bytes = mb(j.groupby_mb * j.mem_scale).max(4096);
    Ok(cfg)
}

fn job_spec(a: &AlgoArgs, j: &JobArgs, output: PathBuf, workers: usize) -> anyhow::Result<JobSpec> {
    let program = program(a)?;
    let plan = plan(j, program.plan_hint);
    Ok(JobSpec {
        program,
        input_path: j.input.clone(),
        output_path: output,
        num_partitions: j.partitions.unwrap_or(workers),
        plan,
        checkpoint_every: j.checkpoint_every,
        max_supersteps: j.max_supersteps,
    })
}

/// Order-independent digest of a result dump. PageRank values are rounded
/// so plans that fold sums in a different order still agree.
fn checksum(dir: &Path, algo: Algo) -> anyhow::Result<String> {
    let mut h = DefaultHasher::new();
    for line in read_dump(dir)? {
        if algo == Algo::Pagerank {
            let mut f = line.splitn(3, '\t');
            let vid = f.next().unwrap_or_default();
            let value: f64 = f.next().unwrap_or_default().parse().unwrap_or(f64::NAN);
            format!("{vid}\t{value:.8e}").hash(&mut h);
        } else {
            line.hash(&mut h);
        }
    }
    Ok(format!("{:016x}", h.finish()))
}

fn run(args: RunArgs) -> anyhow::Result<()> {
    let work = WorkDir::new(args.job.workdir.as_deref(), "run")?;
    let mut cfg = engine_config(&args.job, &work.path)?;
    cfg.failures = FailureInjector::new(args.failures.iter().copied());
    let spec = job_spec(&args.algo, &args.job, args.output.clone(), cfg.num_workers)?;
    let report = run_job(&spec, cfg)?;
    let stats = args.stats.unwrap_or_else(|| args.output.join("stats.csv"));
    fs::write(&stats, report.stats_csv()).with_context(|| format!("writing {}", stats.display()))?;
    eprintln!(
        "{}: {} vertices, {} edges, {} supersteps ({:?}), plan {}, stats in {}",
        spec.program.name,
        report.vertices,
        report.edges,
        report.final_superstep,
        report.termination,
        spec.plan,
        stats.display()
    );
    Ok(())
}

fn gen(args: GenArgs) -> anyhow::Result<()> {
    if args.n < 1 {
        return Err(invalid("--n must be at least 1"));
    }
    let kind = match args.kind {
        KindArg::Uniform => GraphKind::Uniform,
        KindArg::Powerlaw => GraphKind::Powerlaw,
        KindArg::Path => GraphKind::Path,
        KindArg::Cycle => GraphKind::Cycle,
    };
    let g = gen_graph(kind, args.n, args.avg_degree, args.seed, args.symmetric);
    write_graph(&args.output, &g)?;
    Ok(())
}

const BENCH_HEADER: &str =
    "plan,supersteps,wallMillis,leafReads,spillBytes,channelBytes,messages,checksum";

fn bench_row(cfg: PlanConfig, r: &JobReport, checksum: &str) -> String {
    let sum = |f: fn(&dfpregel::SuperstepStats) -> u64| r.stats.iter().map(f).sum::<u64>();
    format!(
        "{cfg},{},{},{},{},{},{},{checksum}",
        r.final_superstep,
        sum(|s| s.wall_millis),
        sum(|s| s.leaf_reads),
        sum(|s| s.spill_bytes),
        sum(|s| s.channel_bytes),
        sum(|s| s.messages),
    )
}

fn bench_plans(args: BenchArgs) -> anyhow::Result<()> {
    let work = WorkDir::new(args.job.workdir.as_deref(), "bench")?;
    let mut rows = vec![BENCH_HEADER.to_string()];
    let mut sums = std::collections::BTreeSet::new();
    for (i, cfg) in PlanConfig::all().into_iter().enumerate() {
        let run_dir = work.path.join(format!("plan-{i}"));
        let engine = engine_config(&args.job, &run_dir)?;
        let mut spec = job_spec(&args.algo, &args.job, run_dir.join("out"), engine.num_workers)?;
        spec.plan = cfg;
        let report = run_job(&spec, engine).with_context(|| format!("plan {cfg}"))?;
        let sum = checksum(&spec.output_path, args.algo.algo)?;
        rows.push(bench_row(cfg, &report, &sum));
        sums.insert(sum);
        fs::remove_dir_all(&run_dir)?;
    }
    let csv = rows.join("\n") + "\n";
    match &args.output {
        Some(p) => fs::write(p, &csv).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{csv}"),
    }
    if sums.len() != 1 {
        bail!("plans disagree: {} distinct result checksums", sums.len());
    }
    Ok(())
}

fn recover_test(args: RecoverArgs) -> anyhow::Result<()> {
    let work = WorkDir::new(args.job.workdir.as_deref(), "recover")?;
    let mut outputs = Vec::new();
    for (tag, fail) in [("clean", false), ("failed", true)] {
        let dir = work.path.join(tag);
        let mut cfg = engine_config(&args.job, &dir)?;
        if fail {
            cfg.failures.inject(args.fail_worker, args.fail_at);
        }
        let spec = job_spec(&args.algo, &args.job, dir.join("out"), cfg.num_workers)?;
        let report = run_job(&spec, cfg).with_context(|| format!("{tag} run"))?;
        eprintln!("{tag} run: {} supersteps, {} recoveries", report.final_superstep, report.recoveries);
        outputs.push(checksum(&spec.output_path, args.algo.algo)?);
    }
    if outputs[0] != outputs[1] {
        bail!("recovered run differs from the clean run");
    }
    println!("recovered result matches clean run ({})", outputs[0]);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Gen(a) => gen(a),
        Command::BenchPlans(a) => bench_plans(a),
        Command::RecoverTest(a) => recover_test(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, e) = classify(e);
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}
