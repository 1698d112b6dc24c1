//! Command implementations behind the `kcut` binary.
//!
//! Every command renders its result to a `String` so tests can drive the
//! same code paths as the binary without spawning a process.

use std::collections::BTreeMap;
use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use kcut_core::analysis::{convergence_table, epsilon_ratio, iterate_k, variation_distance_from_uniform, Source};
use kcut_core::audit::{BallotPollingSprt, ContestDefinition};
use kcut_core::distributions::{fit_report, CutRecordSet, CutSizeDistribution};
use kcut_core::model_spec::ModelSpec;
use kcut_core::plan::{
    allocate_draws, build_plan, efficiency_breakeven, efficiency_estimate, parse_manifest,
    DEFAULT_COUNT_RATE, DEFAULT_CUT_SECONDS_PER_DRAW,
};
use kcut_core::risk::{
    adjusted_risk_limit, choose_k_with, risk_adjustment, risk_adjustment_for, BoundForm, DEFAULT_EPS1_TARGET,
};
use kcut_core::rng::GeneratorSpec;
use kcut_core::sim::{
    coupling_experiment, vd_convergence_experiment, AdversarialSwitchModel, CouplingComparator, CouplingConfig,
    Replacement,
};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "kcut", version, about = "k-cut ballot sampling for risk-limiting audits")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Divergence of k-fold cut distributions from uniform.
    Analyze(AnalyzeArgs),
    /// Risk-limit adjustment for a chosen or budgeted k.
    Adjust(AdjustArgs),
    /// Seeded multi-stack sampling plan.
    Plan(PlanArgs),
    /// Monte Carlo checks.
    #[command(subcommand)]
    Simulate(SimulateCommand),
    /// Fit the parametric cut models to cut records.
    Fit(RecordsArg),
    /// Time model comparing k-cut against counting the stack.
    Efficiency(EfficiencyArgs),
    /// Run the audit session service.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RecordsArg {
    /// Cut-record CSV (`cut_size,count`); defaults to the bundled field data.
    #[arg(long, value_name = "PATH")]
    pub records: Option<PathBuf>,
}

impl RecordsArg {
    fn load(&self) -> Result<CutRecordSet> {
        match &self.records {
            None => Ok(CutRecordSet::table1()),
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                Ok(CutRecordSet::parse_csv(&text, None)?)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TableFormat {
    Csv,
    Md,
    Json,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Model spec; repeat for several columns.
    #[arg(long, default_values_t = default_models())]
    pub model: Vec<ModelSpec>,
    #[arg(long, default_value_t = 150)]
    pub n: usize,
    #[arg(long, default_value_t = 16)]
    pub kmax: usize,
    #[arg(long, value_enum, default_value_t = TableFormat::Csv)]
    pub format: TableFormat,
    #[command(flatten)]
    pub records: RecordsArg,
}

fn default_models() -> Vec<ModelSpec> {
    vec![ModelSpec::Empirical, ModelSpec::TruncatedUniformFit, ModelSpec::ExpCubicPublished]
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BoundFormArg {
    MaxRatio,
    VariationDistance,
}

impl From<BoundFormArg> for BoundForm {
    fn from(f: BoundFormArg) -> Self {
        match f {
            BoundFormArg::MaxRatio => BoundForm::MaxRatio,
            BoundFormArg::VariationDistance => BoundForm::VariationDistance,
        }
    }
}

#[derive(Debug, Args)]
pub struct AdjustArgs {
    #[arg(long, default_value_t = 150)]
    pub n: usize,
    #[arg(long)]
    pub s_star: u64,
    #[arg(long)]
    pub alpha: f64,
    /// Pick the smallest k whose bound fits this budget.
    #[arg(long, conflicts_with = "k", required_unless_present = "k")]
    pub budget: Option<f64>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, default_value = "empirical")]
    pub model: ModelSpec,
    #[arg(long, default_value_t = DEFAULT_EPS1_TARGET)]
    pub eps1_target: f64,
    #[arg(long, value_enum, default_value_t = BoundFormArg::MaxRatio)]
    pub bound_form: BoundFormArg,
    /// Use this per-draw variation distance instead of the model's.
    #[arg(long, requires_all = ["eps2", "k"])]
    pub delta: Option<f64>,
    /// Use this max ratio minus one instead of the model's.
    #[arg(long, requires_all = ["delta", "k"])]
    pub eps2: Option<f64>,
    #[command(flatten)]
    pub records: RecordsArg,
}

#[derive(Debug, Serialize)]
pub struct AdjustOutput {
    pub k: usize,
    pub delta: f64,
    pub eps2: f64,
    pub s_prime: u64,
    pub eps1: f64,
    pub bound: f64,
    pub adjusted_alpha: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PlanFormat {
    Json,
    Text,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[arg(long, value_name = "PATH")]
    pub manifest: PathBuf,
    /// Number of draws.
    #[arg(long)]
    pub s: u64,
    #[arg(long)]
    pub k: u32,
    #[arg(long)]
    pub seed: u64,
    /// Draws beyond this become explicit positions; defaults to `s`.
    #[arg(long)]
    pub s_star: Option<u64>,
    #[arg(long, value_enum, default_value_t = PlanFormat::Json)]
    pub format: PlanFormat,
}

#[derive(Debug, Subcommand)]
pub enum SimulateCommand {
    /// Simulated k-cut positions against the exact convolution.
    Convergence(ConvergenceArgs),
    /// Paired audits with and without switched ballots.
    Coupling(CouplingArgs),
}

#[derive(Debug, Args)]
pub struct SimModelArgs {
    #[arg(long, default_value = "empirical")]
    pub model: ModelSpec,
    #[arg(long, default_value_t = 6)]
    pub k: usize,
    #[arg(long)]
    pub trials: u64,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 0)]
    pub stream: u64,
    #[command(flatten)]
    pub records: RecordsArg,
}

#[derive(Debug, Args)]
pub struct ConvergenceArgs {
    #[command(flatten)]
    pub sim: SimModelArgs,
    #[arg(long, default_value_t = 150)]
    pub n: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ComparatorArg {
    VariationDistance,
    MaxRatio,
}

#[derive(Debug, Args)]
pub struct CouplingArgs {
    #[command(flatten)]
    pub sim: SimModelArgs,
    /// Switch probability; defaults to the variation distance of `--model` at `--k`.
    #[arg(long)]
    pub delta: Option<f64>,
    /// Max ratio minus one for the ratio comparator; defaults to the model's.
    #[arg(long)]
    pub eps2: Option<f64>,
    /// Draws per audit.
    #[arg(long, default_value_t = 1000)]
    pub s: u64,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Reported winner and loser tallies.
    #[arg(long, value_delimiter = ',', num_args = 2, default_values_t = [550, 450])]
    pub reported: Vec<u64>,
    /// Actual winner and loser ballots in the population.
    #[arg(long, value_delimiter = ',', num_args = 2, default_values_t = [500, 500])]
    pub truth: Vec<u64>,
    /// `worst-case`, `identity` or `position:N`.
    #[arg(long, default_value = "worst-case", value_parser = parse_replacement)]
    pub replacement: Replacement,
    #[arg(long, value_enum, default_value_t = ComparatorArg::VariationDistance)]
    pub comparator: ComparatorArg,
    #[arg(long, default_value_t = DEFAULT_EPS1_TARGET)]
    pub eps1_target: f64,
}

pub fn parse_replacement(s: &str) -> std::result::Result<Replacement, String> {
    match s {
        "worst-case" => Ok(Replacement::WorstCaseWinner),
        "identity" => Ok(Replacement::Identity),
        _ => s
            .strip_prefix("position:")
            .and_then(|p| p.parse().ok())
            .map(|position| Replacement::FixedPosition { position })
            .ok_or_else(|| format!("unknown replacement {s:?}")),
    }
}

#[derive(Debug, Args)]
pub struct EfficiencyArgs {
    /// Ballots drawn from each stack.
    #[arg(long)]
    pub t: u64,
    /// Stack size for a full time comparison.
    #[arg(long)]
    pub n: Option<u64>,
    #[arg(long, default_value_t = DEFAULT_CUT_SECONDS_PER_DRAW)]
    pub cut_seconds: f64,
    #[arg(long, default_value_t = DEFAULT_COUNT_RATE)]
    pub count_rate: f64,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1")]
    pub host: IpAddr,
    #[arg(long, default_value_t = 8642)]
    pub port: u16,
    #[arg(long, default_value = "kcut-data")]
    pub data_dir: PathBuf,
    /// Built console assets to serve at `/`.
    #[arg(long)]
    pub console_dir: Option<PathBuf>,
    #[command(flatten)]
    pub records: RecordsArg,
}

/// Run any command except `serve`, returning its stdout.
pub fn run(command: &Command) -> Result<String> {
    match command {
        Command::Analyze(a) => analyze(a),
        Command::Adjust(a) => Ok(serde_json::to_string(&adjust(a)?)?),
        Command::Plan(a) => plan(a),
        Command::Simulate(SimulateCommand::Convergence(a)) => convergence(a),
        Command::Simulate(SimulateCommand::Coupling(a)) => coupling(a),
        Command::Fit(r) => Ok(serde_json::to_string(&fit_report(&r.load()?)?)?),
        Command::Efficiency(a) => efficiency(a),
        Command::Serve(_) => bail!("serve runs asynchronously; use `serve` instead"),
    }
}

pub fn analyze(a: &AnalyzeArgs) -> Result<String> {
    let records = a.records.load()?;
    let sources = a
        .model
        .iter()
        .map(|m| Ok(Source::new(m.to_string(), m.resolve_at(&records, a.n)?)))
        .collect::<Result<Vec<_>>>()?;
    let table = convergence_table(&sources, a.kmax)?;
    Ok(match a.format {
        TableFormat::Csv => table.to_csv(),
        TableFormat::Md => table.to_markdown(),
        TableFormat::Json => serde_json::to_string(&table)?,
    })
}

pub fn adjust(a: &AdjustArgs) -> Result<AdjustOutput> {
    let form = a.bound_form.into();
    let (k, adj) = match (a.delta.zip(a.eps2), a.k, a.budget) {
        (Some((delta, eps2)), Some(k), _) => (k, risk_adjustment(a.s_star, delta, eps2, a.eps1_target, a.n, form)?),
        (None, Some(k), _) => {
            let source = a.model.resolve_at(&a.records.load()?, a.n)?;
            (k, risk_adjustment_for(&iterate_k(&source, k)?, a.s_star, a.eps1_target, form)?)
        }
        (None, None, Some(budget)) => {
            let source = a.model.resolve_at(&a.records.load()?, a.n)?;
            choose_k_with(&source, a.s_star, a.eps1_target, budget, form)?
        }
        _ => bail!("give either --budget or --k"),
    };
    Ok(AdjustOutput {
        k,
        delta: adj.delta,
        eps2: adj.eps2,
        s_prime: adj.s_prime,
        eps1: adj.eps1,
        bound: adj.bound,
        adjusted_alpha: adjusted_risk_limit(a.alpha, adj.bound)?,
    })
}

pub fn plan(a: &PlanArgs) -> Result<String> {
    let text = std::fs::read_to_string(&a.manifest).with_context(|| format!("reading {}", a.manifest.display()))?;
    let manifest = parse_manifest(&text)?;
    let seq = allocate_draws(&manifest, a.s, a.seed)?;
    let plan = build_plan(&manifest, &seq, a.k, a.s_star.unwrap_or(a.s))?;
    Ok(match a.format {
        PlanFormat::Json => plan.to_json(),
        PlanFormat::Text => plan.instructions().join("\n"),
    })
}

fn sim_source(a: &SimModelArgs, n: usize) -> Result<CutSizeDistribution> {
    Ok(a.model.resolve_at(&a.records.load()?, n)?)
}

pub fn convergence(a: &ConvergenceArgs) -> Result<String> {
    let source = sim_source(&a.sim, a.n)?;
    let exp = vd_convergence_experiment(&source, a.sim.k, a.sim.trials, GeneratorSpec::new(a.sim.seed, a.sim.stream))?;
    Ok(serde_json::to_string(&exp.report)?)
}

pub fn coupling(a: &CouplingArgs) -> Result<String> {
    let (model_delta, model_eps2) = match (a.delta, a.eps2) {
        (Some(d), Some(e)) => (d, e),
        _ => {
            let records = a.sim.records.load()?;
            let r = iterate_k(&a.sim.model.resolve(&records)?, a.sim.k)?;
            (variation_distance_from_uniform(&r), epsilon_ratio(&r))
        }
    };
    let delta = a.delta.unwrap_or(model_delta);
    let eps2 = a.eps2.unwrap_or(model_eps2);
    let (w, l) = ("winner".to_string(), "loser".to_string());
    let contest = ContestDefinition {
        candidates: vec![w.clone(), l.clone()],
        reported_winner: w.clone(),
        reported_tallies: BTreeMap::from([(w.clone(), a.reported[0]), (l.clone(), a.reported[1])]),
        n_total: a.reported[0] + a.reported[1],
    };
    let truth = BTreeMap::from([(w, a.truth[0]), (l, a.truth[1])]);
    let mut config = CouplingConfig::new(contest, truth, a.alpha, a.s);
    config.eps1_target = a.eps1_target;
    config.comparator = match a.comparator {
        ComparatorArg::VariationDistance => CouplingComparator::VariationDistance,
        ComparatorArg::MaxRatio => CouplingComparator::MaxRatio { eps2 },
    };
    let switch = AdversarialSwitchModel { delta, replacement: a.replacement };
    let report = coupling_experiment(
        &BallotPollingSprt,
        &config,
        switch,
        a.sim.trials,
        GeneratorSpec::new(a.sim.seed, a.sim.stream),
    )?;
    Ok(serde_json::to_string(&report)?)
}

pub fn efficiency(a: &EfficiencyArgs) -> Result<String> {
    let breakeven = efficiency_breakeven(a.t, a.cut_seconds, a.count_rate)?;
    Ok(match a.n {
        None => serde_json::json!({ "draws_per_stack": a.t, "breakeven_n": breakeven }).to_string(),
        Some(n) => serde_json::to_string(&efficiency_estimate(a.t, n, a.cut_seconds, a.count_rate)?)?,
    })
}

pub async fn serve(a: &ServeArgs) -> Result<()> {
    let config = kcut_service::ServeConfig {
        addr: SocketAddr::new(a.host, a.port),
        data_dir: a.data_dir.clone(),
        console_dir: a.console_dir.clone(),
        records: a.records.load()?,
    };
    kcut_service::serve(config).await.map_err(|e| anyhow::anyhow!(e))
}
