//! Command-line surface: run scenarios from a config file, detect over saved
//! checkpoints, and evaluate the cost / guarantee formulas.

use std::io::Write;
use std::path::PathBuf;

use clap::error::ErrorKind as ClapErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::data::{load_dataset, SegmentMap};
use crate::detect::{detect_all, pairwise_distances, FallbackRule};
use crate::distance::{MetricKind, ProbeContext};
use crate::error::{Error, Result};
use crate::harness::{self, report, Scenario, ScenarioConfig};
use crate::nn::Checkpoint;

/// Process exit status. Code 3 is reserved for runs whose verdicts contain
/// at least one malicious finding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitStatus {
    Success,
    Usage,
    Config,
    MaliciousFound,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        match self {
            ExitStatus::Success => 0,
            ExitStatus::Usage => 1,
            ExitStatus::Config => 2,
            ExitStatus::MaliciousFound => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "rttd", version, about = "Replicated-training backdoor detection simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a scenario from a TOML config and write reports to a directory.
    ScenarioRun(ScenarioRunArgs),
    /// Detect malicious servers over saved model checkpoints.
    Detect(DetectArgs),
    /// Print the replication / distance cost model, or the detection
    /// probability.
    Cost(CostArgs),
}

#[derive(Debug, Args)]
struct ScenarioRunArgs {
    /// Scenario config file (TOML).
    config: PathBuf,
    /// Output directory for report, histograms, dataset, and checkpoints.
    #[arg(long, default_value = "rttd-out")]
    out: PathBuf,
    /// Override the config's scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's distance metric.
    #[arg(long)]
    metric: Option<String>,
    /// Print the report as JSON instead of tables.
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct DetectArgs {
    /// At least three checkpoints with identical architectures.
    #[arg(required = true, num_args = 1..)]
    checkpoints: Vec<PathBuf>,
    /// Lower bound on the benign fraction.
    #[arg(long, default_value_t = 0.5)]
    r: f64,
    #[arg(long, default_value = "zest")]
    metric: String,
    /// KS significance level.
    #[arg(long, default_value_t = 0.01)]
    alpha: f64,
    /// Per-server rule: ks or mad.
    #[arg(long, default_value = "ks")]
    fallback: String,
    /// Seed for probe sampling.
    #[arg(long, default_value_t = 0)]
    probe_seed: u64,
    /// Dataset dump to sample probes from (synthetic normal probes if
    /// omitted).
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct CostArgs {
    #[arg(long)]
    n: Option<u64>,
    #[arg(long)]
    m: u64,
    #[arg(long)]
    k: u64,
    #[arg(long = "T", visible_alias = "total-steps")]
    total_steps: u64,
    #[arg(long, default_value = "zest")]
    metric: String,
    /// Mini-batches used per distance evaluation (D).
    #[arg(long, default_value_t = 30)]
    probe_batches: u64,
    #[arg(long)]
    price_per_step: Option<f64>,
    /// Print m*k/T, the chance of catching a single-step insertion.
    #[arg(long)]
    detection_probability: bool,
}

/// Parses and runs one invocation. Output goes to `out`; diagnostics to
/// stderr.
pub fn run<I, S, W>(args: I, out: &mut W) -> ExitStatus
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
    W: Write,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ClapErrorKind::DisplayHelp | ClapErrorKind::DisplayVersion) => {
            let _ = write!(out, "{e}");
            return ExitStatus::Success;
        }
        Err(e) => {
            eprintln!("{e}");
            return ExitStatus::Usage;
        }
    };
    let outcome = match cli.command {
        Command::ScenarioRun(args) => cmd_scenario_run(args, out),
        Command::Detect(args) => cmd_detect(args, out),
        Command::Cost(args) => cmd_cost(args, out),
    };
    match outcome {
        Ok(status) => status,
        Err(e) => {
            eprintln!("error: {e}");
            ExitStatus::Config
        }
    }
}

fn parse_metric(s: &str) -> Result<MetricKind> {
    s.parse()
}

fn cmd_scenario_run<W: Write>(args: ScenarioRunArgs, out: &mut W) -> Result<ExitStatus> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", args.config.display())))?;
    let mut cfg: ScenarioConfig =
        toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", args.config.display())))?;
    if let Some(seed) = args.seed {
        cfg.scenario_seed = seed;
    }
    if let Some(metric) = &args.metric {
        cfg.metric = parse_metric(metric)?;
    }

    let scenario = Scenario::prepare(cfg)?;
    harness::init_thread_pool();
    let checkpoints = scenario.run_primary_training()?;
    let scenario_report = scenario.run()?;

    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join("report.txt"), report::scenario_text(&scenario_report))?;
    std::fs::write(args.out.join("histogram.csv"), report::histograms_csv(&scenario_report))?;
    let json = serde_json::to_string_pretty(&scenario_report)
        .map_err(|e| Error::config(format!("report serialization: {e}")))?;
    std::fs::write(args.out.join("report.json"), json)?;
    crate::data::dump_dataset(scenario.train(), Some(scenario.segments()), &args.out.join("dataset.txt"))?;

    // Save the replicated models so offline detection can reproduce verdicts.
    for outcome in &scenario_report.subruns {
        let dir = args.out.join(format!("subrun_{}", outcome.subrun_index));
        std::fs::create_dir_all(&dir)?;
        let w_t = &checkpoints[outcome.subrun_index as usize];
        w_t.save_text(&dir.join("start.ckpt"))?;
        let replicated = scenario.replicate_subrun(&w_t.weights, outcome.subrun_index)?;
        for (vid, model) in replicated.servers.iter().zip(&replicated.models) {
            let mut ck = Checkpoint::new(model.clone(), outcome.start_step + scenario.cfg().subrun_steps);
            ck.metadata.insert("server".into(), vid.label());
            ck.save_text(&dir.join(format!("server_{}.ckpt", vid.label())))?;
        }
    }

    if args.json {
        let json = serde_json::to_string_pretty(&scenario_report)
            .map_err(|e| Error::config(format!("report serialization: {e}")))?;
        writeln!(out, "{json}")?;
    } else {
        write!(out, "{}", report::scenario_text(&scenario_report))?;
    }
    Ok(if scenario_report.any_malicious_verdict() {
        ExitStatus::MaliciousFound
    } else {
        ExitStatus::Success
    })
}

fn cmd_detect<W: Write>(args: DetectArgs, out: &mut W) -> Result<ExitStatus> {
    if args.checkpoints.len() < 3 {
        eprintln!("error: need at least 3 checkpoints, got {}", args.checkpoints.len());
        return Ok(ExitStatus::Usage);
    }
    let metric = parse_metric(&args.metric)?;
    let fallback = match args.fallback.as_str() {
        "ks" => FallbackRule::Ks,
        "mad" => FallbackRule::Mad,
        other => return Err(Error::invalid(format!("unknown fallback `{other}` (expected ks|mad)"))),
    };
    let mut checkpoints = Vec::with_capacity(args.checkpoints.len());
    for path in &args.checkpoints {
        checkpoints.push(Checkpoint::load(path).map_err(|e| Error::config(format!("{}: {e}", path.display())))?);
    }
    let arch = checkpoints[0].weights.arch().clone();
    if let Some(bad) = checkpoints.iter().find(|c| c.weights.arch() != &arch) {
        return Err(Error::config(format!(
            "checkpoint architecture mismatch: {:?} vs {:?}",
            bad.weights.arch(),
            arch
        )));
    }

    let settings = crate::distance::ProbeSettings::default();
    let ctx = match &args.dataset {
        Some(path) => {
            let (dataset, segments) = load_dataset(path)?;
            let segments = match segments {
                Some(s) => s,
                None => SegmentMap::contiguous(dataset.dim(), 16.min(dataset.dim()))?,
            };
            ProbeContext::from_dataset(&dataset, &segments, &settings, args.probe_seed)?
        }
        None => {
            let segments = SegmentMap::contiguous(arch.input_dim, 16.min(arch.input_dim))?;
            ProbeContext::synthetic(arch.input_dim, segments, &settings, args.probe_seed)?
        }
    };

    harness::init_thread_pool();
    let models: Vec<_> = checkpoints.into_iter().map(|c| c.weights).collect();
    let matrix = pairwise_distances(&models, metric, &ctx, settings.ridge_lambda)?;
    let cfg = crate::detect::DetectionConfig {
        benign_fraction_r: args.r,
        significance: args.alpha,
        window_policy: crate::detect::WindowPolicy::ContiguousSorted,
        fallback,
        mad_quartile: 0.75,
    };
    let detection = detect_all(&matrix, &cfg, None)?;

    if args.json {
        let json = serde_json::to_string_pretty(&detection)
            .map_err(|e| Error::config(format!("report serialization: {e}")))?;
        writeln!(out, "{json}")?;
    } else {
        write!(out, "{}", report::matrix_table(&detection))?;
        write!(out, "{}", report::verdict_table(&detection, None))?;
    }
    Ok(if detection.verdicts.iter().any(|v| !v.is_benign) {
        ExitStatus::MaliciousFound
    } else {
        ExitStatus::Success
    })
}

fn cmd_cost<W: Write>(args: CostArgs, out: &mut W) -> Result<ExitStatus> {
    if args.detection_probability {
        let p = crate::detect::detection_probability(args.m, args.k, args.total_steps)?;
        writeln!(out, "detection probability m*k/T = {p:.4}")?;
        return Ok(ExitStatus::Success);
    }
    let n = args
        .n
        .ok_or_else(|| Error::invalid("--n is required unless --detection-probability is set"))?;
    let metric = parse_metric(&args.metric)?;
    let cost = crate::detect::cost_overhead(
        n,
        args.m,
        args.k,
        metric,
        args.probe_batches,
        args.total_steps,
        args.price_per_step,
    )?;
    writeln!(out, "replication steps       {}", cost.replication_steps)?;
    writeln!(out, "distance step equiv.    {}", cost.distance_step_equivalents)?;
    writeln!(out, "fraction of T           {:.6}", cost.fraction_of_total)?;
    if let Some(money) = cost.money {
        writeln!(out, "money                   {money}")?;
    }
    Ok(ExitStatus::Success)
}

/// Entry point for the `rttd` binary.
pub fn main_entry() -> i32 {
    let mut stdout = std::io::stdout();
    let status = run(std::env::args_os(), &mut stdout);
    status.code()
}
