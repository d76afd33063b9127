//! Command-line front end for the emitter localization pipeline.
//!
//! One TOML config describes the dataset, networks, training, and evaluation
//! settings; subcommands drive generation, training, evaluation, inference,
//! and rendering. Exit codes: 0 success, 2 configuration error, 3 data
//! error, 4 numeric failure.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;

use emloc_core::config::{Method, RunConfig};
use emloc_core::dataset::{self, DatasetManifest, Split, SplitReader};
use emloc_core::loss::preds_from_flat;
use emloc_core::metrics::MetricsReport;
use emloc_core::propagation::ground_truth_map;
use emloc_core::render;
use emloc_core::scene::sample_scene;
use emloc_core::train;
use emloc_core::{Error, ErrorClass};

#[derive(Parser)]
#[command(
    name = "emloc",
    version,
    about = "Multi-emitter localization from sparse spectrum sensors"
)]
struct Cli {
    /// Run configuration file.
    #[arg(short, long, global = true, default_value = "run.toml")]
    config: PathBuf,
    #[command(subcommand)]
    command: Command,
}

/// Config fields that can be overridden from the command line.
#[derive(Args, Clone, Default)]
struct Overrides {
    /// Pipeline variant: single_stage, two_stage_logit, or two_stage_binary.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    #[arg(long)]
    occupancy_checkpoint: Option<PathBuf>,
    #[arg(long)]
    dataset_dir: Option<PathBuf>,
    /// Existence threshold for evaluation and rendering.
    #[arg(long)]
    gamma: Option<f64>,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) -> Result<(), Error> {
        if let Some(m) = &self.method {
            cfg.train.method = m.parse::<Method>()?;
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        if let Some(b) = self.batch_size {
            cfg.train.batch_size = b;
        }
        if let Some(lr) = self.learning_rate {
            cfg.train.learning_rate = lr;
        }
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(d) = &self.checkpoint_dir {
            cfg.train.checkpoint_dir = d.clone();
        }
        if let Some(p) = &self.occupancy_checkpoint {
            cfg.train.occupancy_checkpoint = Some(p.clone());
        }
        if let Some(d) = &self.dataset_dir {
            cfg.dataset.dir = d.clone();
        }
        if let Some(g) = self.gamma {
            cfg.eval.gamma = g;
        }
        Ok(())
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the dataset splits described by the config.
    Generate {
        /// Regenerate even if the directory already holds a dataset.
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train the occupancy encoder-decoder.
    TrainOccupancy {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train the localizer for the configured method.
    TrainLocalizer {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run the trained pipeline over the test split and print the metrics.
    Evaluate {
        /// Replace the network with a ground-truth oracle (self-consistency
        /// probe).
        #[arg(long)]
        oracle: bool,
        /// Where to write the JSON report (default: <checkpoint_dir>/report.json).
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Print slot predictions for one dataset sample.
    Infer {
        #[arg(long, default_value_t = 0)]
        index: u64,
        /// Split to read from: train, val, or test.
        #[arg(long, default_value = "test")]
        split: String,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Render a sample's power map with ground truth and predictions.
    Render {
        #[arg(long, default_value_t = 0)]
        index: u64,
        #[arg(long, default_value = "test")]
        split: String,
        /// Output PNG path.
        #[arg(long, default_value = "scene.png")]
        out: PathBuf,
        /// Pixels per grid cell.
        #[arg(long, default_value_t = render::DEFAULT_SCALE)]
        scale: usize,
        /// Skip predictions and render ground truth only.
        #[arg(long)]
        truth_only: bool,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Print a combined table from saved report files (label=path entries).
    Report {
        /// Entries like single=runs/single/report.json; a bare path uses the
        /// file name as the label.
        #[arg(required = true)]
        reports: Vec<String>,
    },
}

fn parse_split(s: &str) -> Result<Split, Error> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(Error::Config(format!("unknown split {other:?}; expected train, val, or test"))),
    }
}

fn load_config(path: &Path, overrides: &Overrides) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::load(path)?;
    overrides.apply(&mut cfg)?;
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_generate(cfg: &RunConfig, force: bool) -> Result<(), Error> {
    let manifest = cfg.dataset.manifest()?;
    let dir = &cfg.dataset.dir;
    if !force && dir.join("manifest.json").exists() {
        let existing = DatasetManifest::read(dir)?;
        let mut expected = manifest.clone();
        expected.created_unix = existing.created_unix;
        if existing == expected {
            info!("dataset already present at {}", dir.display());
            println!("dataset already present at {}", dir.display());
            return Ok(());
        }
        return Err(Error::Config(format!(
            "{} holds a dataset generated with different settings; pass --force to regenerate",
            dir.display()
        )));
    }
    let summary = dataset::generate(&manifest, dir)?;
    println!(
        "generated {} ({}x{} grid, M={}, {} sensors): {} train / {} val / {} test",
        dir.display(),
        manifest.region.grid_h,
        manifest.region.grid_w,
        manifest.m,
        manifest.n_sensors,
        summary.train,
        summary.val,
        summary.test,
    );
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig, oracle: bool, report_path: Option<PathBuf>) -> Result<(), Error> {
    let outcome = train::evaluate(cfg, oracle)?;
    let label =
        if oracle { "oracle".to_string() } else { cfg.train.method.name().to_string() };
    println!("{}", MetricsReport::table_header());
    println!("{}", outcome.report.table_row(&label));

    let path = report_path.unwrap_or_else(|| cfg.train.checkpoint_dir.join("report.json"));
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let json = serde_json::to_string_pretty(&outcome.report)
        .map_err(|e| Error::Parse { what: "report".to_string(), detail: e.to_string() })?;
    std::fs::write(&path, json)?;
    info!("report written to {}", path.display());
    Ok(())
}

fn cmd_infer(cfg: &RunConfig, split: Split, index: u64) -> Result<(), Error> {
    let manifest = train::ensure_dataset_matches(cfg)?;
    let (h, w) = (manifest.region.grid_h, manifest.region.grid_w);
    let mut reader = SplitReader::open(&cfg.dataset.dir, split)?;
    let example = reader.get(index)?;
    let (localizer, occupancy) = train::load_models(cfg)?;
    let preds = train::predict_slots(cfg, &localizer, occupancy.as_ref(), &example.input, 1, h, w)?;
    let slots = preds_from_flat(&preds, manifest.m)?;
    println!("{}", render::listing(&slots, h, w, cfg.eval.gamma));
    Ok(())
}

fn cmd_render(
    cfg: &RunConfig,
    split: Split,
    index: u64,
    out: &Path,
    scale: usize,
    truth_only: bool,
) -> Result<(), Error> {
    let manifest = train::ensure_dataset_matches(cfg)?;
    let (h, w) = (manifest.region.grid_h, manifest.region.grid_w);
    let mut reader = SplitReader::open(&cfg.dataset.dir, split)?;
    let example = reader.get(index)?;

    // The stored record holds the sparse input; the backdrop is the full
    // ground-truth power map, regenerated deterministically from the seed.
    let scene = sample_scene(&manifest, split, index)?;
    let power = ground_truth_map(&manifest.region, &manifest.propagation, &scene.emitters)?;

    let slots = if truth_only {
        Vec::new()
    } else {
        let (localizer, occupancy) = train::load_models(cfg)?;
        let preds =
            train::predict_slots(cfg, &localizer, occupancy.as_ref(), &example.input, 1, h, w)?;
        preds_from_flat(&preds, manifest.m)?
    };

    let truths = example.labels.true_cells();
    let img = render::render_scene(&power, &truths, &slots, cfg.eval.gamma, scale)?;
    render::save_png(&img, out)?;
    println!("wrote {}", out.display());
    if !slots.is_empty() {
        println!("{}", render::listing(&slots, h, w, cfg.eval.gamma));
    }
    Ok(())
}

fn cmd_report(entries: &[String]) -> Result<(), Error> {
    // Load everything before printing so a bad path cannot leave a
    // half-rendered table behind.
    let mut rows = Vec::with_capacity(entries.len());
    for entry in entries {
        let (label, path) = match entry.split_once('=') {
            Some((l, p)) => (l.to_string(), PathBuf::from(p)),
            None => {
                let p = PathBuf::from(entry);
                let label = p
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| entry.clone());
                (label, p)
            }
        };
        let text = std::fs::read_to_string(&path)?;
        let report: MetricsReport = serde_json::from_str(&text).map_err(|e| Error::Parse {
            what: format!("report {}", path.display()),
            detail: e.to_string(),
        })?;
        rows.push(report.table_row(&label));
    }
    println!("{}", MetricsReport::table_header());
    for row in rows {
        println!("{row}");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match &cli.command {
        Command::Generate { force, overrides } => {
            let cfg = load_config(&cli.config, overrides)?;
            cmd_generate(&cfg, *force)
        }
        Command::TrainOccupancy { overrides } => {
            let mut cfg = load_config(&cli.config, overrides)?;
            // The configured checkpoint_dir belongs to the localizer run;
            // the occupancy run trains into the location the two-stage
            // methods will load from.
            let ckpt = cfg.occupancy_checkpoint_path();
            cfg.train.checkpoint_dir =
                ckpt.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
            let log = train::train_occupancy(&cfg)?;
            println!(
                "occupancy: best epoch {} with validation accuracy {:.4}",
                log.best_epoch, log.best_val
            );
            Ok(())
        }
        Command::TrainLocalizer { overrides } => {
            let cfg = load_config(&cli.config, overrides)?;
            let log = train::train_localizer(&cfg)?;
            println!(
                "{}: best epoch {} with validation loss {:.6}",
                log.network, log.best_epoch, log.best_val
            );
            Ok(())
        }
        Command::Evaluate { oracle, report, overrides } => {
            let cfg = load_config(&cli.config, overrides)?;
            cmd_evaluate(&cfg, *oracle, report.clone())
        }
        Command::Infer { index, split, overrides } => {
            let cfg = load_config(&cli.config, overrides)?;
            cmd_infer(&cfg, parse_split(split)?, *index)
        }
        Command::Render { index, split, out, scale, truth_only, overrides } => {
            let cfg = load_config(&cli.config, overrides)?;
            cmd_render(&cfg, parse_split(split)?, *index, out, *scale, *truth_only)
        }
        Command::Report { reports } => cmd_report(reports),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp_secs()
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e.class() {
                ErrorClass::Config => 2,
                ErrorClass::Data => 3,
                ErrorClass::Numeric => 4,
            };
            std::process::exit(code);
        }
    }
}
