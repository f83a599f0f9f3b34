//! `featrecon` command-line entry point.
//!
//! Every command writes its artifacts under `--output`:
//!
//! | command     | files |
//! |-------------|-------|
//! | `train`     | `config.toml`, `train_log.jsonl`, `final/`, `best/`, `report.json`, `summary.json` |
//! | `eval`      | `config.toml`, `report.json`, `report.csv`, `scores.csv`, optional `maps/`, `heatmaps/` |
//! | `score`     | `invocation.json`, `scores.csv`, `maps/`, `heatmaps/` |
//! | `ablate`    | `config.toml`, `ablation.csv`, `cells/<name>/` |
//! | `synth`     | `synthetic/`, `manifest.json`, `config.toml` |
//! | `aggregate` | `aggregate.json`, `aggregate.csv` |
//!
//! Exit status is 0 on success, 1 on internal failures and 2 on user
//! errors (bad config, missing files).

mod ablate;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use featrecon::checkpoint;
use featrecon::data::{self, DatasetSpec, Layout, Split, SyntheticConfig};
use featrecon::engine::{self, RunConfig, RunSummary, TrainOptions};
use featrecon::metrics::{EvalReport, MetricSet};
use featrecon::par::Exec;
use featrecon::scoring;

/// Environment variable holding the root that relative dataset paths are
/// resolved against.
pub const DATA_ROOT_ENV: &str = "FEATRECON_DATA_ROOT";

#[derive(Debug, Parser)]
#[command(name = "featrecon", version, about = "Feature-reconstruction anomaly detection experiments")]
struct Cli {
    /// Compute device (overrides the config's `device`).
    #[arg(long, global = true)]
    device: Option<String>,
    /// Root for relative dataset paths.
    #[arg(long, global = true, env = DATA_ROOT_ENV)]
    data_root: Option<PathBuf>,
    /// Run data-parallel loops on the calling thread only.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model (one seed, or several with --seeds).
    Train(TrainArgs),
    /// Evaluate a checkpoint on a test split.
    Eval(EvalArgs),
    /// Score individual images with a checkpoint.
    Score(ScoreArgs),
    /// Run a grid of variants or hard-mining thresholds.
    Ablate(AblateArgs),
    /// Generate a synthetic defect dataset.
    Synth(SynthArgs),
    /// Mean and standard deviation over several runs.
    Aggregate(AggregateArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, short)]
    output: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Train once per seed and aggregate (e.g. `--seeds 1,11,111`).
    #[arg(long, value_delimiter = ',', conflicts_with = "seed")]
    seeds: Option<Vec<u64>>,
    /// `key.path=value` config overrides.
    overrides: Vec<String>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Checkpoint directory (e.g. `run/final`).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Config providing the dataset; defaults to the snapshot next to the
    /// checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, short)]
    output: PathBuf,
    /// Write a heatmap PNG per test image.
    #[arg(long)]
    heatmaps: bool,
    /// Write raw score maps per test image.
    #[arg(long)]
    maps: bool,
    /// Ignore pixel annotations; pixel metrics are reported as null.
    #[arg(long)]
    no_masks: bool,
    overrides: Vec<String>,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, short)]
    output: PathBuf,
    images: Vec<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Grid {
    Variants,
    Alpha,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, short)]
    output: PathBuf,
    #[arg(long, value_enum, default_value = "variants")]
    grid: Grid,
    /// Variants for the variant grid (default: all eight).
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<String>>,
    /// Threshold multipliers for the alpha grid.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    alphas: Option<Vec<String>>,
    /// Cells run concurrently, each in its own process.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    seed: Option<u64>,
    overrides: Vec<String>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, short)]
    output: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    n_train: usize,
    #[arg(long, default_value_t = 50)]
    n_test_normal: usize,
    #[arg(long, default_value_t = 50)]
    n_test_anom: usize,
    #[arg(long, default_value_t = 64)]
    image_size: usize,
}

#[derive(Debug, Args)]
struct AggregateArgs {
    #[arg(long, short)]
    output: PathBuf,
    /// `report.json` / `summary.json` files or run directories.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
}

/// Failure classified by exit status.
#[derive(Debug)]
pub enum Failure {
    User(String),
    Internal(String),
}

impl From<featrecon::Error> for Failure {
    fn from(e: featrecon::Error) -> Self {
        if e.is_user_error() {
            Failure::User(e.to_string())
        } else {
            Failure::Internal(e.to_string())
        }
    }
}

pub type CliResult<T> = Result<T, Failure>;

pub fn internal(context: &str, e: impl std::fmt::Display) -> Failure {
    Failure::Internal(format!("{context}: {e}"))
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| Failure::User(format!("cannot write {}: {e}", path.display())))
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| Failure::User(format!("cannot create {}: {e}", path.display())))
}

struct Globals {
    device: Option<String>,
    data_root: Option<PathBuf>,
    exec: Exec,
}

impl Globals {
    fn overrides(&self, mut overrides: Vec<String>, seed: Option<u64>) -> Vec<String> {
        if let Some(d) = &self.device {
            overrides.push(format!("device=\"{d}\""));
        }
        if let Some(s) = seed {
            overrides.push(format!("seed={s}"));
        }
        overrides
    }

    fn resolve_root(&self, spec: &mut DatasetSpec) {
        if let Some(root) = &self.data_root {
            if spec.root.is_relative() {
                spec.root = root.join(&spec.root);
            }
        }
    }

    fn load_config(&self, path: &Path, overrides: Vec<String>, seed: Option<u64>) -> CliResult<RunConfig> {
        let mut cfg = RunConfig::from_file(path, &self.overrides(overrides, seed))?;
        self.resolve_root(&mut cfg.dataset);
        Ok(cfg)
    }
}

fn cmd_train(g: &Globals, a: TrainArgs) -> CliResult<()> {
    let cfg = g.load_config(&a.config, a.overrides, a.seed)?;
    create_dir(&a.output)?;
    let opts = TrainOptions {
        out_dir: Some(a.output.clone()),
        exec: g.exec,
    };
    if let Some(seeds) = a.seeds {
        write_file(&a.output.join(engine::CONFIG_SNAPSHOT), cfg.to_toml()?)?;
        let report = engine::multi_seed(&cfg, &seeds, &opts)?;
        write_file(
            &a.output.join("multi_seed.json"),
            serde_json::to_string_pretty(&report).map_err(|e| internal("serializing", e))?,
        )?;
        for (name, s) in &report.summary {
            println!("{name}\t{:.4} ± {:.4} (n={})", s.mean, s.std, s.n);
        }
        return Ok(());
    }
    let out = engine::train(&cfg, &opts)?;
    println!("final loss\t{:.6}", out.final_loss);
    if let Some(r) = &out.final_report {
        print_metrics("final", &r.overall);
    }
    if let Some(b) = &out.best {
        print_metrics(&format!("best@{}", b.iteration), &b.report.overall);
    }
    Ok(())
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

fn print_metrics(label: &str, m: &MetricSet) {
    println!(
        "{label}\ti_auroc {}\tp_auroc {}\taupro {}\tf1 {}\tacc {}",
        fmt_metric(m.i_auroc),
        fmt_metric(m.p_auroc),
        fmt_metric(m.aupro),
        fmt_metric(m.f1),
        fmt_metric(m.acc)
    );
}

fn file_stem(p: &Path) -> String {
    p.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned())
}

fn cmd_eval(g: &Globals, a: EvalArgs) -> CliResult<()> {
    let meta = checkpoint::read_meta(&a.checkpoint)?;
    let config_path = match a.config {
        Some(p) => p,
        None => {
            let snapshot = a
                .checkpoint
                .parent()
                .map(|d| d.join(engine::CONFIG_SNAPSHOT))
                .filter(|p| p.is_file())
                .ok_or_else(|| {
                    Failure::User(format!(
                        "no --config given and no {} next to {}",
                        engine::CONFIG_SNAPSHOT,
                        a.checkpoint.display()
                    ))
                })?;
            snapshot
        }
    };
    let cfg = g.load_config(&config_path, a.overrides, None)?;
    if cfg.backbone.spec() != meta.backbone || cfg.variant != meta.variant {
        return Err(Failure::User(format!(
            "checkpoint {} ({} {}) does not match config ({} {})",
            a.checkpoint.display(),
            meta.variant,
            meta.backbone.id,
            cfg.variant,
            cfg.backbone.id
        )));
    }
    create_dir(&a.output)?;
    write_file(&a.output.join(engine::CONFIG_SNAPSHOT), cfg.to_toml()?)?;
    let mut samples = data::load_split(&cfg.dataset, Split::Test, g.exec)?;
    if a.no_masks {
        for s in &mut samples {
            s.mask = None;
        }
    }
    let (eval, _) = engine::evaluate_checkpoint(&a.checkpoint, &samples, cfg.fpr_limit, g.exec)?;
    write_report(&a.output, &eval.report)?;
    let mut scores = String::from("image,category,label,score\n");
    for (s, r) in samples.iter().zip(&eval.results) {
        scores.push_str(&format!(
            "{},{},{},{:.6}\n",
            s.path.display(),
            s.category,
            s.label,
            r.image_score
        ));
    }
    write_file(&a.output.join("scores.csv"), scores)?;
    if a.maps || a.heatmaps {
        for (i, (s, r)) in samples.iter().zip(&eval.results).enumerate() {
            let stem = format!("{i:04}_{}", file_stem(&s.path));
            export_map(&a.output, &stem, &s.path.display().to_string(), r, a.maps, a.heatmaps)?;
        }
    }
    print_metrics("eval", &eval.report.overall);
    Ok(())
}

fn export_map(
    out: &Path,
    stem: &str,
    image_id: &str,
    r: &scoring::AnomalyResult,
    raw: bool,
    heatmap: bool,
) -> CliResult<()> {
    if raw {
        let dir = out.join("maps");
        create_dir(&dir)?;
        scoring::write_score_map(&dir, stem, image_id, r.score_map.view())?;
    }
    if heatmap {
        let dir = out.join("heatmaps");
        create_dir(&dir)?;
        scoring::write_heatmap(&dir.join(format!("{stem}.png")), r.score_map.view())?;
    }
    Ok(())
}

fn write_report(out: &Path, report: &EvalReport) -> CliResult<()> {
    write_file(
        &out.join("report.json"),
        serde_json::to_string_pretty(report).map_err(|e| internal("serializing report", e))?,
    )?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    write_file(&out.join("report.csv"), csv)
}

fn cmd_score(g: &Globals, a: ScoreArgs) -> CliResult<()> {
    if a.images.is_empty() {
        return Err(Failure::User("no images given".into()));
    }
    let (bundle, meta) = checkpoint::load(&a.checkpoint, &featrecon::Device::Cpu)?;
    create_dir(&a.output)?;
    let invocation = serde_json::json!({
        "command": "score",
        "checkpoint": a.checkpoint,
        "images": a.images,
        "checkpoint_meta": meta,
    });
    write_file(
        &a.output.join("invocation.json"),
        serde_json::to_string_pretty(&invocation).map_err(|e| internal("serializing", e))?,
    )?;
    let mut spec = DatasetSpec::new(Layout::Mvtec, "");
    spec.image_size = meta.preprocessing.image_size;
    spec.center_crop = meta.preprocessing.center_crop;
    spec.normalization = meta.preprocessing.normalization;
    spec.nonzero_crop = meta.preprocessing.nonzero_crop;
    let opts = engine::ScoringOptions {
        smoothing_sigma: meta.smoothing_sigma,
        reduction: meta.reduction,
        fpr_limit: featrecon::metrics::DEFAULT_FPR_LIMIT,
        batch_size: 1,
    };
    let mut csv = String::from("image,score\n");
    let mut failures = 0;
    for (i, path) in a.images.iter().enumerate() {
        let x = match data::load_image(path, &spec) {
            Ok(x) => x,
            Err(e) => {
                eprintln!("error: {e}");
                failures += 1;
                continue;
            }
        };
        let r = engine::score_images(&bundle, meta.variant, &[&x], &spec.normalization, &opts, g.exec)?;
        let r = &r[0];
        println!("{}\t{:.6}", path.display(), r.image_score);
        csv.push_str(&format!("{},{:.6}\n", path.display(), r.image_score));
        let stem = format!("{i:04}_{}", file_stem(path));
        export_map(&a.output, &stem, &path.display().to_string(), r, true, true)?;
    }
    write_file(&a.output.join("scores.csv"), csv)?;
    if failures == a.images.len() {
        return Err(Failure::User("no image could be scored".into()));
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> CliResult<()> {
    let cfg = SyntheticConfig::new(a.seed, a.n_train, a.n_test_normal, a.n_test_anom, a.image_size);
    create_dir(&a.output)?;
    let (spec, manifest) = data::make_synthetic_dataset(&cfg, &a.output, Exec::Auto)?;
    let mut run = RunConfig::desk_scale(spec);
    run.dataset.image_size = a.image_size - a.image_size % 32;
    write_file(&a.output.join(engine::CONFIG_SNAPSHOT), run.to_toml()?)?;
    println!(
        "wrote {} images to {}",
        manifest.entries.len(),
        a.output.display()
    );
    Ok(())
}

/// Final metrics from a `report.json`, a `summary.json`, or a run
/// directory containing either.
fn read_metrics(path: &Path) -> CliResult<MetricSet> {
    let file = if path.is_dir() {
        [engine::SUMMARY_FILE, engine::REPORT_FILE]
            .iter()
            .map(|f| path.join(f))
            .find(|p| p.is_file())
            .ok_or_else(|| Failure::User(format!("{} holds no summary.json or report.json", path.display())))?
    } else {
        path.to_path_buf()
    };
    let text = fs::read_to_string(&file).map_err(|e| Failure::User(format!("cannot read {}: {e}", file.display())))?;
    if let Ok(s) = serde_json::from_str::<RunSummary>(&text) {
        return s
            .final_metrics
            .ok_or_else(|| Failure::User(format!("{} has no final metrics", file.display())));
    }
    serde_json::from_str::<EvalReport>(&text)
        .map(|r| r.overall)
        .map_err(|e| Failure::User(format!("{} is neither a report nor a run summary: {e}", file.display())))
}

fn cmd_aggregate(a: AggregateArgs) -> CliResult<()> {
    let runs = a.inputs.iter().map(|p| read_metrics(p)).collect::<CliResult<Vec<_>>>()?;
    let summary = engine::aggregate(&runs);
    create_dir(&a.output)?;
    let json = serde_json::json!({
        "inputs": a.inputs,
        "per_run": runs,
        "summary": summary,
    });
    write_file(
        &a.output.join("aggregate.json"),
        serde_json::to_string_pretty(&json).map_err(|e| internal("serializing", e))?,
    )?;
    let mut csv = String::from("metric,mean,std,n\n");
    for (name, s) in &summary {
        csv.push_str(&format!("{name},{:.6},{:.6},{}\n", s.mean, s.std, s.n));
        println!("{name}\t{:.4} ± {:.4} (n={})", s.mean, s.std, s.n);
    }
    write_file(&a.output.join("aggregate.csv"), csv)
}

fn run(cli: Cli) -> CliResult<()> {
    let g = Globals {
        device: cli.device,
        data_root: cli.data_root,
        exec: if cli.sequential { Exec::Sequential } else { Exec::Auto },
    };
    match cli.command {
        Command::Train(a) => cmd_train(&g, a),
        Command::Eval(a) => cmd_eval(&g, a),
        Command::Score(a) => cmd_score(&g, a),
        Command::Ablate(a) => {
            let overrides = g.overrides(a.overrides.clone(), a.seed);
            let mut cfg = RunConfig::from_file(&a.config, &overrides)?;
            g.resolve_root(&mut cfg.dataset);
            ablate::run(&cfg, &a.output, a.grid, a.variants, a.alphas, a.jobs, g.sequential_flag())
        }
        Command::Synth(a) => cmd_synth(a),
        Command::Aggregate(a) => cmd_aggregate(a),
    }
}

impl Globals {
    fn sequential_flag(&self) -> bool {
        self.exec == Exec::Sequential
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::User(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Internal(msg)) => {
            eprintln!("internal error: {msg}");
            ExitCode::from(1)
        }
    }
}
