//! Command-line front end: data generation, training, evaluation, gradient
//! checks and graph export. Every command writes under one output path.

mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

pub use config::{CliConfig, SEED_ENV};

use crate::dataio::container::{read_json, write_json};
use crate::dataio::{synth_generate, windows, DatasetBundle, Normalizer, Split};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::evalkit::{
    baseline_historical_average, baseline_persistence, forecast_split, graph_recovery, metrics, targets,
    write_forecast_csv, GraphRecovery, MetricReport,
};
use crate::graphops::RegionGraph;
use crate::model::{Architecture, ConceptSet, ModelParams};
use crate::objective::acyclicity_value;
use crate::optim::gradcheck::{check_model, tiny_instance, ModelGradCheck};
use crate::optim::{fit, learned_adjacency, load_checkpoint, save_checkpoint, TrainConfig, Variant};

/// Effective configuration echoed into every output directory.
pub const CONFIG_ECHO: &str = "config.json";
/// Training configuration stored next to a checkpoint.
pub const TRAIN_FILE: &str = "train.json";
/// The only file allowed to differ between identical runs.
pub const RUN_INFO: &str = "run_info.json";

#[derive(Debug, Parser)]
#[command(name = "cchmm", version, about = "Causal conditional HMM for multimodal traffic forecasting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with a known causal graph.
    Generate(GenerateArgs),
    /// Train a model (or an ablation variant) on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint or a naive baseline on one split.
    Eval(EvalArgs),
    /// Check analytic gradients of a tiny model against finite differences.
    Gradcheck(GradcheckArgs),
    /// Export the learned causal graph with concept labels.
    ExportGraph(ExportArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON config with optional `scenario` and `train` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config field, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    /// File, then overrides, then the seed environment variable.
    pub fn resolve(&self) -> Result<CliConfig> {
        let base = match &self.config {
            Some(p) => CliConfig::from_file(p)?,
            None => CliConfig::default(),
        };
        let cfg = base.with_overrides(&self.overrides)?.with_env()?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `generate`.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Ablation variant.
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    Persistence,
    HistoricalAverage,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint directory (required unless `--baseline` is given).
    #[arg(long, required_unless_present = "baseline")]
    pub checkpoint: Option<PathBuf>,
    /// Evaluate a naive baseline instead of a model.
    #[arg(long, value_enum, conflicts_with = "checkpoint")]
    pub baseline: Option<Baseline>,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    pub split: Split,
    /// Also write the report here.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Write per-window forecasts and truth as CSV plot data.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GradcheckSize {
    Small,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "small")]
    pub size: GradcheckSize,
    /// Write the report as JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Negative control: corrupt one backward pass.
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GraphFormat {
    Json,
    Csv,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "json")]
    pub format: GraphFormat,
    /// Output file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    Split::parse(s).map_err(|e| e.to_string())
}

/// Outcome of a command that ran to completion.
#[derive(Debug, PartialEq, Eq)]
pub enum Status {
    Ok,
    GradcheckFailed,
}

/// Process exit codes.
pub mod exit {
    pub const OK: u8 = 0;
    pub const CONFIG: u8 = 2;
    pub const NUMERICAL: u8 = 3;
    pub const GRADCHECK: u8 = 4;
}

pub fn exit_code(result: &Result<Status>) -> u8 {
    match result {
        Ok(Status::Ok) => exit::OK,
        Ok(Status::GradcheckFailed) => exit::GRADCHECK,
        Err(e) if e.is_numerical() => exit::NUMERICAL,
        Err(_) => exit::CONFIG,
    }
}

/// Entry point used by the binary.
pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = run(cli);
    if let Err(e) = &result {
        eprintln!("error: {e}");
    }
    ExitCode::from(exit_code(&result))
}

pub fn run(cli: Cli) -> Result<Status> {
    match cli.command {
        Command::Generate(a) => cmd_generate(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::ExportGraph(a) => cmd_export_graph(&a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<Status> {
    let cfg = args.config.resolve()?;
    let scenario = synth_generate(&cfg.scenario)?;
    scenario.bundle.save(&args.out)?;
    write_json(&args.out.join(CONFIG_ECHO), &cfg)?;
    log::info!(
        "wrote {} steps x {} regions to {}",
        scenario.bundle.num_steps(),
        scenario.bundle.num_regions(),
        args.out.display()
    );
    Ok(Status::Ok)
}

#[derive(Serialize)]
struct RunInfo {
    finished_unix_secs: u64,
    elapsed_secs: f64,
    best_epoch: usize,
    best_val_mae: f64,
}

pub fn cmd_train(args: &TrainArgs) -> Result<Status> {
    let started = std::time::Instant::now();
    let mut cfg = args.config.resolve()?;
    if let Some(v) = args.variant {
        cfg.train.variant = cfg.train.variant.with_variant(v)?;
    }
    let bundle = DatasetBundle::load(&args.data)?;
    create_dir(&args.out)?;
    write_json(&args.out.join(CONFIG_ECHO), &cfg)?;

    let result = fit(&bundle, &cfg.train)?;
    let mut log_text = String::new();
    for rec in &result.log {
        log_text.push_str(&rec.to_json_line());
        log_text.push('\n');
    }
    write_text(&args.out.join("log.jsonl"), &log_text)?;
    let best = args.out.join("checkpoint");
    save_checkpoint(&best, &result.best_params)?;
    write_json(&best.join(TRAIN_FILE), &cfg.train)?;
    let last = args.out.join("final");
    save_checkpoint(&last, &result.final_params)?;
    write_json(&last.join(TRAIN_FILE), &cfg.train)?;
    write_json(&args.out.join("A_final.json"), &LabeledGraph::of(&result.final_params))?;

    let finished = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    write_json(
        &args.out.join(RUN_INFO),
        &RunInfo {
            finished_unix_secs: finished,
            elapsed_secs: started.elapsed().as_secs_f64(),
            best_epoch: result.best_epoch,
            best_val_mae: result.best_val_mae,
        },
    )?;
    log::info!(
        "best epoch {} (val MAE {:.4}); run written to {}",
        result.best_epoch,
        result.best_val_mae,
        args.out.display()
    );
    Ok(Status::Ok)
}

/// Training config stored with a checkpoint, or defaults for bare checkpoints.
fn checkpoint_train_config(dir: &Path) -> Result<TrainConfig> {
    let path = dir.join(TRAIN_FILE);
    if path.exists() {
        read_json(&path)
    } else {
        Ok(TrainConfig::default())
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    /// `model` or the baseline name.
    pub source: String,
    pub metrics: MetricReport,
    pub persistence: MetricReport,
    pub historical_average: Option<MetricReport>,
    /// Per-modality MAE relative to persistence (1.0 = equal).
    pub mae_vs_persistence: Vec<(String, f64)>,
    pub graph_recovery: Option<GraphRecovery>,
    pub acyclicity: Option<f64>,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<Status> {
    let bundle = DatasetBundle::load(&args.data)?;
    let (source, history, mask, model) = match (&args.checkpoint, args.baseline) {
        (_, Some(b)) => {
            let name = match b {
                Baseline::Persistence => "persistence",
                Baseline::HistoricalAverage => "historical-average",
            };
            let d = TrainConfig::default();
            (name.to_string(), d.history, d.mape_threshold, None)
        }
        (Some(dir), None) => {
            let params = load_checkpoint(dir)?;
            let train = checkpoint_train_config(dir)?;
            if params.config().cond_dim != bundle.cond_dim() {
                return Err(Error::Validation(format!(
                    "checkpoint expects {} condition channels, data has {}",
                    params.config().cond_dim,
                    bundle.cond_dim()
                )));
            }
            ("model".to_string(), train.history, train.mape_threshold, Some((params, train)))
        }
        (None, None) => return Err(Error::Config("eval needs --checkpoint or --baseline".into())),
    };

    let ws = windows(&bundle.splits, args.split, history)?;
    let truth = targets(&bundle, &ws);
    let persistence_pred = baseline_persistence(&bundle, &ws);
    let persistence = metrics(&persistence_pred, &truth, mask)?;
    // The historical average needs every slot of the day covered by training data.
    let ha_pred = baseline_historical_average(&bundle, &ws).ok();
    let historical_average = ha_pred.as_ref().map(|p| metrics(p, &truth, mask)).transpose()?;

    let (pred, report, graph, acyc) = match &model {
        Some((params, train)) => {
            let graph = RegionGraph::new(bundle.graph.clone())?;
            let normalizer = Normalizer::fit(&bundle)?;
            let data = normalizer.normalize(&bundle)?;
            let f = forecast_split(
                params,
                &graph,
                &bundle,
                &normalizer,
                &data,
                args.split,
                history,
                train.batch_size,
                train.lambda,
                mask,
            )?;
            let a = learned_adjacency(params);
            let recovery = match (&a, &bundle.ground_truth_a) {
                (Some(a), Some(gt)) if a.shape() == gt.shape() => Some(graph_recovery(a, gt)?),
                _ => None,
            };
            let acyc = a.as_ref().map(acyclicity_value).transpose()?;
            (f.pred, f.metrics, recovery, acyc)
        }
        None => {
            let pred = match args.baseline {
                Some(Baseline::HistoricalAverage) => ha_pred
                    .clone()
                    .ok_or_else(|| Error::Validation("historical average does not cover this split".into()))?,
                _ => persistence_pred.clone(),
            };
            let m = metrics(&pred, &truth, mask)?;
            (pred, m, None, None)
        }
    };

    let mae_vs_persistence = report
        .per_modality
        .iter()
        .map(|m| {
            let base = persistence.mae(m.modality);
            (m.modality.name().to_string(), m.mae / base)
        })
        .collect();
    let out = EvalReport {
        split: args.split,
        source,
        metrics: report,
        persistence,
        historical_average,
        mae_vs_persistence,
        graph_recovery: graph,
        acyclicity: acyc,
    };
    let text = serde_json::to_string_pretty(&out).expect("report serializes");
    println!("{text}");
    if let Some(path) = &args.report {
        write_text(path, &format!("{text}\n"))?;
    }
    if let Some(path) = &args.csv {
        write_forecast_csv(path, &ws, &pred, &truth)?;
    }
    Ok(Status::Ok)
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<Status> {
    let GradcheckSize::Small = args.size;
    let inst = tiny_instance(Architecture::default(), 3, 4, 2, 0)?;
    let report = check_model(&inst, args.inject_fault)?;
    print!("{}", format_gradcheck(&report));
    if let Some(path) = &args.report {
        write_json(path, &report)?;
    }
    if report.passed {
        Ok(Status::Ok)
    } else {
        eprintln!(
            "gradient check failed: worst group {} ({}), rel err {:.3e}",
            report.worst_group, report.worst_param, report.max_rel_err
        );
        Ok(Status::GradcheckFailed)
    }
}

pub fn format_gradcheck(report: &ModelGradCheck) -> String {
    let mut s = String::new();
    for g in &report.groups {
        let _ = writeln!(s, "{:<24} {:.3e}  {}", g.group, g.max_rel_err, g.worst_param);
    }
    let _ = writeln!(
        s,
        "max relative error {:.3e} (tolerance {:.0e}): {}",
        report.max_rel_err,
        report.tolerance,
        if report.passed { "PASS" } else { "FAIL" }
    );
    s
}

/// `Ã` with row and column labels; row `i`, column `j` is the effect of
/// concept `i` on concept `j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledGraph {
    pub labels: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
}

impl LabeledGraph {
    /// Learned graph of `params`; all zeros for variants without one.
    pub fn of(params: &ModelParams) -> Self {
        let concepts = ConceptSet::new(params.config().arch.concepts);
        let k = concepts.len();
        let a = learned_adjacency(params).unwrap_or_else(|| Tensor::zeros(&[k, k]));
        LabeledGraph {
            labels: concepts.labels().iter().map(|s| s.to_string()).collect(),
            matrix: (0..k).map(|i| (0..k).map(|j| a.at(&[i, j])).collect()).collect(),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        let k = self.labels.len();
        let data: Vec<f64> = self.matrix.iter().flatten().copied().collect();
        Tensor::new(&[k, k], data)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("from\\to,{}\n", self.labels.join(","));
        for (label, row) in self.labels.iter().zip(&self.matrix) {
            // `{:?}` prints the shortest string that parses back exactly.
            let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(s, "{label},{}", cells.join(","));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |detail: String| Error::Format {
            file: "graph csv".into(),
            detail,
        };
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| bad("empty".into()))?;
        let labels: Vec<String> = header.split(',').skip(1).map(str::to_string).collect();
        let mut matrix = Vec::new();
        for (i, line) in lines.enumerate() {
            let mut cells = line.split(',');
            let label = cells.next().unwrap_or_default();
            if labels.get(i).map(String::as_str) != Some(label) {
                return Err(bad(format!("row {i} is labelled '{label}'")));
            }
            let row = cells
                .map(|c| c.trim().parse::<f64>().map_err(|e| bad(format!("row {label}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            if row.len() != labels.len() {
                return Err(bad(format!("row {label} has {} values", row.len())));
            }
            matrix.push(row);
        }
        if matrix.len() != labels.len() {
            return Err(bad(format!("{} rows for {} labels", matrix.len(), labels.len())));
        }
        Ok(LabeledGraph { labels, matrix })
    }
}

pub fn cmd_export_graph(args: &ExportArgs) -> Result<Status> {
    let params = load_checkpoint(&args.checkpoint)?;
    let graph = LabeledGraph::of(&params);
    let text = match args.format {
        GraphFormat::Json => format!("{}\n", serde_json::to_string_pretty(&graph).expect("graph serializes")),
        GraphFormat::Csv => graph.to_csv(),
    };
    match &args.out {
        Some(path) => write_text(path, &text)?,
        None => print!("{text}"),
    }
    Ok(Status::Ok)
}
