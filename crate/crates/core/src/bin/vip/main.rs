//! `vip`: batch entry points and the planning service.
//!
//! Exit codes: 0 success, 1 runtime or numerical failure, 2 invalid input or
//! infeasible request.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use vip_core::allocator::{self, check_plan, AllocationPlan, AllocationProblem, CoefficientRecord};
use vip_core::belief::{BatchObservation, BeliefSnapshot, BeliefState, Link, DEFAULT_CLIP_EPS};
use vip_core::io::{read_json, read_jsonl, to_jsonl, write_atomic};
use vip_core::prompt_space::{KernelCache, PromptSet};
use vip_core::service::ServiceConfig;
use vip_core::simulator::{run_experiment, summary_csv, ExperimentConfig};
use vip_core::stats::{run_test, SampleTable, TestKind};
use vip_core::variance::{monte_carlo_grid, EstimatorFamily, MonteCarloGrid, RewardSampler};
use vip_core::{ErrorCode, Result, VipError};

#[derive(Parser)]
#[command(name = "vip", version, about = "Variance-informed rollout allocation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve an allocation problem and write the plan.
    Allocate(AllocateArgs),
    /// Validate a plan against its problem (budget, bounds, KKT residual).
    Check(CheckArgs),
    /// Build a kernel cache from an embedding file.
    Kernel(KernelArgs),
    /// Linked predictions from a belief snapshot (or the prior).
    Predict(PredictArgs),
    /// Apply reward logs to a belief and write the new snapshot.
    Update(UpdateArgs),
    /// Run an assumption test on a sample file.
    Test(TestArgs),
    /// Run a simulator experiment.
    Simulate(SimulateArgs),
    /// Compare closed-form gradient variances against Monte Carlo.
    McValidate(McArgs),
    /// Run the planning service.
    Serve(ServeArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    Drgrpo,
    Rloo,
}

impl From<FamilyArg> for EstimatorFamily {
    fn from(f: FamilyArg) -> Self {
        match f {
            FamilyArg::Drgrpo => EstimatorFamily::DrGrpo,
            FamilyArg::Rloo => EstimatorFamily::Rloo,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum LinkArg {
    Sigmoid,
    Softplus,
}

impl From<LinkArg> for Link {
    fn from(l: LinkArg) -> Self {
        match l {
            LinkArg::Sigmoid => Link::Sigmoid,
            LinkArg::Softplus => Link::Softplus,
        }
    }
}

#[derive(Args)]
struct AllocateArgs {
    /// Problem file `{"family", "budget", "min", "max", "prompts"}`.
    #[arg(
        long,
        conflicts_with = "coefficients",
        required_unless_present = "coefficients"
    )]
    problem: Option<PathBuf>,
    /// Line-delimited coefficient file; needs --family, --budget, --min, --max.
    #[arg(long)]
    coefficients: Option<PathBuf>,
    #[arg(long, value_enum)]
    family: Option<FamilyArg>,
    #[arg(long)]
    budget: Option<u64>,
    #[arg(long)]
    min: Option<u32>,
    #[arg(long)]
    max: Option<u32>,
    /// Plan output; stdout when absent.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long)]
    problem: PathBuf,
    #[arg(long)]
    plan: PathBuf,
    /// Largest accepted KKT residual.
    #[arg(long, default_value_t = 1e-8)]
    kkt_tol: f64,
}

#[derive(Args)]
struct KernelArgs {
    #[arg(long)]
    embeddings: PathBuf,
    /// Bandwidth; the median pairwise distance when absent.
    #[arg(long)]
    bandwidth: Option<f64>,
    #[arg(long, short)]
    output: PathBuf,
}

#[derive(Args)]
struct KernelSource {
    /// Embedding file (kernel built with the median bandwidth).
    #[arg(long, required_unless_present = "kernel_cache")]
    embeddings: Option<PathBuf>,
    /// Kernel cache; checked against --embeddings when both are given.
    #[arg(long)]
    kernel_cache: Option<PathBuf>,
}

impl KernelSource {
    fn load(&self) -> Result<KernelCache> {
        let set = self
            .embeddings
            .as_ref()
            .map(PromptSet::read_jsonl)
            .transpose()?;
        match (&self.kernel_cache, set) {
            (Some(path), set) => {
                let cache = KernelCache::read(path)?;
                if let Some(set) = set {
                    cache.verify(&set)?;
                }
                Ok(cache)
            }
            (None, Some(set)) => KernelCache::build(&set, None),
            (None, None) => Err(VipError::InvalidInput(
                "one of --embeddings or --kernel-cache is required".into(),
            )),
        }
    }
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    kernel: KernelSource,
    /// Belief snapshot; zero prior when absent.
    #[arg(long)]
    belief: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "sigmoid")]
    link: LinkArg,
    /// Line-delimited `{"id", "p_hat"}` output; stdout when absent.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct UpdateArgs {
    #[command(flatten)]
    kernel: KernelSource,
    /// Starting snapshot; zero prior when absent.
    #[arg(long)]
    belief: Option<PathBuf>,
    /// Line-delimited `{"id", "rewards", "step"?}`; consecutive records with
    /// the same step form one batch.
    #[arg(long)]
    rewards: PathBuf,
    /// Link for a fresh belief; a snapshot keeps its own.
    #[arg(long, value_enum, default_value = "sigmoid")]
    link: LinkArg,
    /// Clip level for a fresh belief; a snapshot keeps its own.
    #[arg(long, default_value_t = DEFAULT_CLIP_EPS)]
    clip_eps: f64,
    #[arg(long, short)]
    output: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum TestArg {
    Fisher,
    Edgington,
    Levene,
    Obrien,
}

impl From<TestArg> for TestKind {
    fn from(t: TestArg) -> Self {
        match t {
            TestArg::Fisher => TestKind::Fisher,
            TestArg::Edgington => TestKind::Edgington,
            TestArg::Levene => TestKind::Levene,
            TestArg::Obrien => TestKind::OBrien,
        }
    }
}

#[derive(Args)]
struct TestArgs {
    /// Line-delimited `{"id", "r"?, "z"}` samples.
    #[arg(long)]
    samples: PathBuf,
    #[arg(long, value_enum, num_args = 1.., required = true)]
    test: Vec<TestArg>,
    /// Machine-readable reports (JSON array).
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides `seeds` with 0..N.
    #[arg(long)]
    seeds: Option<u64>,
    /// Overrides `run.steps`.
    #[arg(long)]
    steps: Option<usize>,
    /// Overrides `run.budget`.
    #[arg(long)]
    budget: Option<u64>,
    /// Line-delimited run records.
    #[arg(long)]
    records: Option<PathBuf>,
    /// Summary CSV.
    #[arg(long)]
    summary: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum RewardArg {
    /// ±1 rewards over p ∈ {0.1, 0.3, 0.5, 0.7, 0.9}.
    Binary,
    /// Rewards uniform on [−1, 1].
    Uniform,
}

#[derive(Args)]
struct McArgs {
    /// Both families when absent.
    #[arg(long, value_enum)]
    family: Option<FamilyArg>,
    #[arg(long, value_enum, default_value = "binary")]
    rewards: RewardArg,
    /// Comma-separated success probabilities (binary rewards only).
    #[arg(long, value_delimiter = ',')]
    p: Option<Vec<f64>>,
    /// Comma-separated rollout counts.
    #[arg(long, value_delimiter = ',', default_value = "2,4,8,16")]
    n: Vec<u32>,
    /// Comma-separated means of the projected gradient.
    #[arg(long, value_delimiter = ',', default_value = "0,1,5")]
    z_mean: Vec<f64>,
    #[arg(long, default_value_t = 1_000_000)]
    trials: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 0.05)]
    tolerance: f64,
    /// CSV report; stdout when absent.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    /// Service config (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the bind address.
    #[arg(long)]
    bind: Option<String>,
    /// Overrides the snapshot directory.
    #[arg(long)]
    snapshot_dir: Option<PathBuf>,
}

fn exit_code(e: &VipError) -> u8 {
    match e.code() {
        ErrorCode::Numerical => 1,
        _ => 2,
    }
}

fn json_bytes<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(v).map_err(|e| VipError::Numerical(e.to_string()))?;
    out.push(b'\n');
    Ok(out)
}

fn emit(path: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match path {
        Some(p) => write_atomic(p, bytes),
        None => {
            std::io::stdout().write_all(bytes)?;
            Ok(())
        }
    }
}

fn allocate(args: AllocateArgs) -> Result<()> {
    let mut problem = match (&args.problem, &args.coefficients) {
        (Some(path), _) => read_json::<AllocationProblem>(path)?,
        (None, Some(path)) => {
            let missing = |flag: &str| {
                VipError::InvalidInput(format!("--{flag} is required with --coefficients"))
            };
            let records: Vec<CoefficientRecord> = read_jsonl(path)?;
            AllocationProblem {
                family: args.family.ok_or_else(|| missing("family"))?.into(),
                budget: args.budget.ok_or_else(|| missing("budget"))?,
                min: args.min.ok_or_else(|| missing("min"))?,
                max: args.max.ok_or_else(|| missing("max"))?,
                prompts: records
                    .iter()
                    .map(CoefficientRecord::coefficient)
                    .collect::<Result<_>>()?,
            }
        }
        (None, None) => unreachable!("clap requires one input"),
    };
    if let Some(f) = args.family {
        problem.family = f.into();
    }
    problem.budget = args.budget.unwrap_or(problem.budget);
    problem.min = args.min.unwrap_or(problem.min);
    problem.max = args.max.unwrap_or(problem.max);
    let plan = allocator::plan(&problem)?;
    emit(args.output.as_deref(), &json_bytes(&plan)?)
}

fn check(args: CheckArgs) -> Result<()> {
    let problem: AllocationProblem = read_json(&args.problem)?;
    let plan: AllocationPlan = read_json(&args.plan)?;
    let report = check_plan(&problem, &plan, args.kkt_tol);
    emit(None, &json_bytes(&report)?)?;
    if report.ok {
        Ok(())
    } else {
        Err(VipError::InvalidInput(report.violations.join("; ")))
    }
}

fn kernel(args: KernelArgs) -> Result<()> {
    let set = PromptSet::read_jsonl(&args.embeddings)?;
    let cache = KernelCache::build(&set, args.bandwidth)?;
    cache.write(&args.output)?;
    println!("{}", cache.hash());
    Ok(())
}

fn load_belief(
    cache: &KernelCache,
    path: Option<&Path>,
    link: Link,
    clip_eps: f64,
) -> Result<(BeliefState, u64)> {
    let kernel = Arc::new(cache.kernel()?);
    match path {
        Some(p) => {
            let snap: BeliefSnapshot = read_json(p)?;
            Ok((snap.restore(kernel, &cache.hash())?, snap.iteration))
        }
        None => Ok((BeliefState::new(kernel, link, clip_eps)?, 0)),
    }
}

type BatchEntries = Vec<(usize, Vec<f64>)>;

#[derive(Serialize)]
struct Prediction<'a> {
    id: &'a str,
    p_hat: f64,
}

fn predict(args: PredictArgs) -> Result<()> {
    let cache = args.kernel.load()?;
    let (belief, _) = load_belief(
        &cache,
        args.belief.as_deref(),
        args.link.into(),
        DEFAULT_CLIP_EPS,
    )?;
    let records: Vec<Prediction> = cache
        .ids
        .iter()
        .zip(belief.predict_all())
        .map(|(id, p_hat)| Prediction { id, p_hat })
        .collect();
    emit(args.output.as_deref(), &to_jsonl(&records)?)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RewardLogRecord {
    #[serde(default)]
    step: Option<u64>,
    id: String,
    rewards: Vec<f64>,
}

fn update(args: UpdateArgs) -> Result<()> {
    let cache = args.kernel.load()?;
    let (mut belief, mut iteration) = load_belief(
        &cache,
        args.belief.as_deref(),
        args.link.into(),
        args.clip_eps,
    )?;
    let log: Vec<RewardLogRecord> = read_jsonl(&args.rewards)?;
    let index: std::collections::HashMap<&str, usize> = cache
        .ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let mut batches: Vec<(Option<u64>, BatchEntries)> = Vec::new();
    for rec in log {
        let i = *index
            .get(rec.id.as_str())
            .ok_or_else(|| VipError::NotFound(format!("unknown prompt id '{}'", rec.id)))?;
        match batches.last_mut() {
            Some((step, entries)) if *step == rec.step => entries.push((i, rec.rewards)),
            _ => batches.push((rec.step, vec![(i, rec.rewards)])),
        }
    }
    for (_, entries) in batches {
        belief = belief.update(&BatchObservation::new(entries))?;
        iteration += 1;
    }
    write_atomic(
        &args.output,
        &json_bytes(&belief.snapshot(iteration, cache.hash()))?,
    )
}

fn test(args: TestArgs) -> Result<()> {
    let table = SampleTable::read_jsonl(&args.samples)?;
    let reports = args
        .test
        .iter()
        .map(|&t| run_test(t.into(), &table))
        .collect::<Result<Vec<_>>>()?;
    for r in &reports {
        print!("{}", r.render());
    }
    match &args.output {
        Some(p) => write_atomic(p, &json_bytes(&reports)?),
        None => Ok(()),
    }
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::read(&args.config)?;
    if let Some(n) = args.seeds {
        cfg.seeds = (0..n).collect();
    }
    if let Some(t) = args.steps {
        cfg.run.steps = t;
    }
    if let Some(c) = args.budget {
        cfg.run.budget = c;
    }
    cfg.validate()?;
    let records = run_experiment(&cfg)?;
    let csv = summary_csv(&records)?;
    if let Some(p) = &args.records {
        write_atomic(p, &to_jsonl(&records)?)?;
    }
    write_atomic(&args.summary, &csv)
}

fn mc_validate(args: McArgs) -> Result<()> {
    if args.trials < 10_000 {
        return Err(VipError::InvalidInput(format!(
            "--trials must be at least 10000, got {}",
            args.trials
        )));
    }
    let mut grid = match args.rewards {
        RewardArg::Binary => MonteCarloGrid::binary_default(args.trials, args.seed),
        RewardArg::Uniform => MonteCarloGrid::uniform_default(args.trials, args.seed),
    };
    if let Some(f) = args.family {
        grid.families = vec![f.into()];
    }
    if let Some(ps) = &args.p {
        if matches!(args.rewards, RewardArg::Uniform) {
            return Err(VipError::InvalidInput(
                "--p applies to binary rewards only".into(),
            ));
        }
        grid.samplers = ps.iter().map(|&p| RewardSampler::Bernoulli { p }).collect();
    }
    grid.counts = args.n.clone();
    grid.z_means = args.z_mean.clone();
    let cells = monte_carlo_grid(&grid)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| VipError::Numerical(format!("csv: {e}"));
    w.write_record([
        "family",
        "rewards",
        "n",
        "p",
        "z_mean",
        "closed_form",
        "monte_carlo",
        "rel_error",
    ])
    .map_err(csv_err)?;
    for c in &cells {
        let (kind, p) = match c.sampler {
            RewardSampler::Bernoulli { p } => ("binary", format!("{p}")),
            RewardSampler::Uniform { .. } => ("uniform", String::new()),
        };
        w.write_record([
            c.family.as_str().to_string(),
            kind.to_string(),
            c.n.to_string(),
            p,
            format!("{}", c.z_mean),
            format!("{:e}", c.closed_form),
            format!("{:e}", c.monte_carlo),
            format!("{:e}", c.rel_error),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| VipError::Numerical(format!("csv: {e}")))?;
    emit(args.output.as_deref(), &bytes)?;
    let worst = cells.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    let failing = cells
        .iter()
        .filter(|c| c.rel_error > args.tolerance)
        .count();
    eprintln!(
        "{} cells, worst relative error {worst:.4}, {failing} above {}",
        cells.len(),
        args.tolerance
    );
    if failing > 0 {
        return Err(VipError::Numerical(format!(
            "{failing} cells exceed the tolerance {}",
            args.tolerance
        )));
    }
    Ok(())
}

fn serve(args: ServeArgs) -> Result<()> {
    let mut cfg = ServiceConfig::load(args.config.as_deref())?;
    if let Some(b) = args.bind {
        cfg.bind = b;
    }
    if let Some(d) = args.snapshot_dir {
        cfg.snapshot_dir = Some(d);
    }
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(vip_core::service::serve(cfg))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Allocate(a) => allocate(a),
        Command::Check(a) => check(a),
        Command::Kernel(a) => kernel(a),
        Command::Predict(a) => predict(a),
        Command::Update(a) => update(a),
        Command::Test(a) => test(a),
        Command::Simulate(a) => simulate(a),
        Command::McValidate(a) => mc_validate(a),
        Command::Serve(a) => serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
