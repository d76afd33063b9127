//! Training loops for the occupancy and localizer networks, plus the
//! evaluation driver that turns a trained pipeline into a metrics report.
//!
//! Both loops follow the same shape: per-epoch seeded shuffle, mini-batch
//! forward/backward through a fresh graph, Adam update, then a full pass over
//! the validation split. The best checkpoint tracks the validation criterion
//! (pixel accuracy for occupancy, set-prediction loss for localizers); the
//! last checkpoint additionally carries optimizer moments so an interrupted
//! run resumes bit-identically to an uninterrupted one.

use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assign::Strategy;
use crate::autodiff::{Adam, Graph};
use crate::checkpoint::{self, CheckpointMeta};
use crate::config::{Method, RunConfig};
use crate::dataset::{DatasetManifest, Example, Split, SplitReader};
use crate::loss::{batch_pit_loss, build_slot_targets, preds_from_flat};
use crate::metrics::{aggregate, evaluate_sample, threshold_predictions, MetricsReport, SampleEval};
use crate::networks::{Model, NetworkSpec};
use crate::propagation::splitmix64;
use crate::scene::LabelMatrix;
use crate::{Error, Result};

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const TRAINING_LOG: &str = "training_log.json";
pub const RESOLVED_CONFIG: &str = "resolved.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Pixel accuracy at the 0.5 threshold; occupancy runs only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_accuracy: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub network: String,
    pub seed: u64,
    /// 1-based epoch whose checkpoint is `best.ckpt`; 0 before any epoch.
    pub best_epoch: usize,
    /// Criterion value at the best epoch: accuracy (higher wins) for
    /// occupancy, validation loss (lower wins) for localizers.
    pub best_val: f64,
    pub epochs: Vec<EpochRecord>,
}

impl TrainingLog {
    fn new(network: &str, seed: u64, maximize: bool) -> Self {
        TrainingLog {
            network: network.to_string(),
            seed,
            best_epoch: 0,
            best_val: if maximize { f64::NEG_INFINITY } else { f64::INFINITY },
            epochs: Vec::new(),
        }
    }

    /// Loss trajectory without wall times, for determinism comparisons.
    pub fn losses(&self) -> Vec<(f64, f64)> {
        self.epochs.iter().map(|r| (r.train_loss, r.val_loss)).collect()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let file = std::fs::File::create(dir.join(TRAINING_LOG))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self)
            .map_err(|e| Error::Parse { what: "training log".to_string(), detail: e.to_string() })?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<TrainingLog> {
        let file = std::fs::File::open(dir.join(TRAINING_LOG))?;
        serde_json::from_reader(std::io::BufReader::new(file))
            .map_err(|e| Error::Parse { what: "training log".to_string(), detail: e.to_string() })
    }
}

/// Read the manifest beside the dataset and require it to match what the
/// config describes (timestamps aside), so training never silently runs on a
/// grid or emitter budget the config did not ask for.
pub fn ensure_dataset_matches(cfg: &RunConfig) -> Result<DatasetManifest> {
    let disk = DatasetManifest::read(&cfg.dataset.dir)?;
    let mut expected = cfg.dataset.manifest()?;
    expected.created_unix = disk.created_unix;
    if disk != expected {
        return Err(Error::Config(format!(
            "dataset at {} does not match the config: found {}x{} grid, M={}, n_sensors={}, \
             tau={} dBm, seed {}; config describes {}x{}, M={}, n_sensors={}, tau={} dBm, seed {}",
            cfg.dataset.dir.display(),
            disk.region.grid_h,
            disk.region.grid_w,
            disk.m,
            disk.n_sensors,
            disk.tau_dbm,
            disk.master_seed,
            expected.region.grid_h,
            expected.region.grid_w,
            expected.m,
            expected.n_sensors,
            expected.tau_dbm,
            expected.master_seed,
        )));
    }
    Ok(disk)
}

/// Deterministic index order for one epoch. Each epoch draws from its own
/// stream so a resumed run shuffles exactly like an uninterrupted one.
fn shuffled_indices(seed: u64, epoch: usize, len: u64) -> Vec<u64> {
    let mut idx: Vec<u64> = (0..len).collect();
    let stream = splitmix64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(stream));
    idx
}

fn stack_inputs(examples: &[Example]) -> Vec<f32> {
    examples.iter().flat_map(|e| e.input.iter().copied()).collect()
}

fn labels_of(examples: &[Example]) -> Vec<LabelMatrix> {
    examples.iter().map(|e| e.labels.clone()).collect()
}

/// Localizer input maps for one batch. Two-stage methods run the frozen
/// occupancy net and feed its logits (or their binarization); the optional
/// concat mode appends the raw transformed map as a second channel, keeping
/// occupancy as channel 0.
fn localizer_batch_inputs(
    method: Method,
    concat: bool,
    occupancy: Option<&Model>,
    raw: &[f32],
    n: usize,
    h: usize,
    w: usize,
) -> Result<Vec<f32>> {
    if method == Method::SingleStage {
        return Ok(raw.to_vec());
    }
    let occ = occupancy.ok_or_else(|| {
        Error::Config(format!("method {method} requires a frozen occupancy checkpoint"))
    })?;
    let mut maps = occ.infer(raw, n, h, w)?;
    if method == Method::TwoStageBinary {
        // Logit 0 (sigmoid exactly 0.5) counts as occupied.
        for v in maps.iter_mut() {
            *v = f32::from(u8::from(*v >= 0.0));
        }
    }
    if !concat {
        return Ok(maps);
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(2 * n * hw);
    for i in 0..n {
        out.extend_from_slice(&maps[i * hw..(i + 1) * hw]);
        out.extend_from_slice(&raw[i * hw..(i + 1) * hw]);
    }
    Ok(out)
}

fn require_finite(value: f64, epoch: usize, batch: usize) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFiniteLoss { epoch, batch })
    }
}

struct RunState {
    model: Model,
    adam: Adam,
    log: TrainingLog,
    /// 0-based index of the next epoch to run.
    start_epoch: usize,
}

/// Train the occupancy encoder-decoder with BCE against ground-truth
/// occupancy maps. Validation criterion: pixel accuracy at the 0.5 sigmoid
/// threshold (logit 0). Returns the completed log; `best.ckpt` holds the
/// weights of the best-accuracy epoch, frozen for downstream stages.
pub fn train_occupancy(cfg: &RunConfig) -> Result<TrainingLog> {
    let manifest = ensure_dataset_matches(cfg)?;
    let (h, w) = (manifest.region.grid_h, manifest.region.grid_w);
    if h % 8 != 0 || w % 8 != 0 {
        return Err(Error::Config(format!(
            "occupancy network needs grid dimensions divisible by 8, got {h}x{w}"
        )));
    }
    let spec = cfg.occupancy_spec();
    spec.validate()?;
    run_training(cfg, &spec, "occupancy", true, |model, examples, train, epoch, batch| {
        let n = examples.len();
        let inputs = stack_inputs(examples);
        let targets: Vec<f64> =
            examples.iter().flat_map(|e| e.occupancy.iter().map(|&v| v as f64)).collect();
        if train {
            let mut g: Graph<f32> = Graph::new();
            let x = g.input(&[n, 1, h, w], inputs)?;
            let params = model.store.register(&mut g)?;
            let logits = model.spec.forward(&mut g, x, &params)?;
            let loss = g.bce_with_logits_mean(logits, &targets)?;
            let value = require_finite(f64::from(g.scalar_value(loss)), epoch, batch)?;
            g.backward(loss)?;
            let grads = model.store.collect_grads(&g, &params)?;
            Ok(BatchOutcome { loss: value, n, grads: Some(grads), correct: None })
        } else {
            let logits = model.infer(&inputs, n, h, w)?;
            let mut bce_sum = 0.0f64;
            let mut correct = 0usize;
            for (&x, &t) in logits.iter().zip(&targets) {
                let x = f64::from(x);
                bce_sum += x.max(0.0) - x * t + (-x.abs()).exp().ln_1p();
                if (x >= 0.0) == (t > 0.5) {
                    correct += 1;
                }
            }
            let pixels = logits.len();
            Ok(BatchOutcome {
                loss: bce_sum / pixels as f64,
                n,
                grads: None,
                correct: Some((correct, pixels)),
            })
        }
    })
}

/// Train a localizer with the permutation-invariant existence+location loss.
/// Two-stage methods consume a frozen occupancy checkpoint on the fly; its
/// parameters are read once and never written. Validation criterion: mean
/// set-prediction loss over the validation split.
pub fn train_localizer(cfg: &RunConfig) -> Result<TrainingLog> {
    let manifest = ensure_dataset_matches(cfg)?;
    let (h, w) = (manifest.region.grid_h, manifest.region.grid_w);
    let spec = cfg.localizer_spec()?;
    spec.validate()?;
    let method = cfg.train.method;

    let occupancy = if method.is_two_stage() {
        Some(load_occupancy(cfg, h)?)
    } else {
        if cfg.train.occupancy_checkpoint.is_some() {
            warn!("method single_stage ignores the configured occupancy checkpoint");
        }
        None
    };
    let concat = cfg.network.stage2_concat_input;
    let loss_cfg = cfg.loss;

    run_training(cfg, &spec, method.name(), false, |model, examples, train, epoch, batch| {
        let n = examples.len();
        let raw = stack_inputs(examples);
        let labels = labels_of(examples);
        let inputs = localizer_batch_inputs(method, concat, occupancy.as_ref(), &raw, n, h, w)?;
        if train {
            let c = model.spec.in_channels();
            let mut g: Graph<f32> = Graph::new();
            let x = g.input(&[n, c, h, w], inputs)?;
            let params = model.store.register(&mut g)?;
            let preds = model.spec.forward(&mut g, x, &params)?;
            let preds64: Vec<f64> = g.data(preds).iter().map(|&v| f64::from(v)).collect();
            let targets = build_slot_targets(&labels, h, w, &preds64, &loss_cfg, Strategy::Auto)?;
            let loss = g.slot_set_loss(preds, targets)?;
            let value = require_finite(f64::from(g.scalar_value(loss)), epoch, batch)?;
            g.backward(loss)?;
            let grads = model.store.collect_grads(&g, &params)?;
            Ok(BatchOutcome { loss: value, n, grads: Some(grads), correct: None })
        } else {
            let preds = model.infer(&inputs, n, h, w)?;
            let preds64: Vec<f64> = preds.iter().map(|&v| f64::from(v)).collect();
            let value = batch_pit_loss(&labels, h, w, &preds64, &loss_cfg, Strategy::Auto)?;
            Ok(BatchOutcome { loss: value, n, grads: None, correct: None })
        }
    })
}

fn load_occupancy(cfg: &RunConfig, grid_h: usize) -> Result<Model> {
    let path = cfg.occupancy_checkpoint_path();
    if !path.exists() {
        return Err(Error::Config(format!(
            "method {} requires a frozen occupancy checkpoint; {} does not exist \
             (train the occupancy network first)",
            cfg.train.method,
            path.display()
        )));
    }
    let loaded = checkpoint::load(&path)?;
    if loaded.meta.spec.kind_name() != "occupancy" {
        return Err(Error::CheckpointMismatch(format!(
            "{} holds a {} network, expected occupancy",
            path.display(),
            loaded.meta.spec.kind_name()
        )));
    }
    if grid_h % 8 != 0 {
        return Err(Error::Config(format!(
            "occupancy stage needs grid dimensions divisible by 8, got {grid_h}"
        )));
    }
    Ok(loaded.into_model())
}

struct BatchOutcome {
    loss: f64,
    n: usize,
    /// Present on training batches.
    grads: Option<Vec<Vec<f32>>>,
    /// Occupancy validation only: (correct pixels, total pixels).
    correct: Option<(usize, usize)>,
}

/// Shared epoch driver. `step` handles one batch in train or validation mode
/// and reports its mean loss; the driver owns shuffling, optimizer updates,
/// best/last checkpointing, logging, and resume.
fn run_training<F>(
    cfg: &RunConfig,
    spec: &NetworkSpec,
    network_label: &str,
    maximize: bool,
    mut step: F,
) -> Result<TrainingLog>
where
    F: FnMut(&Model, &[Example], bool, usize, usize) -> Result<BatchOutcome>,
{
    let dir = cfg.train.checkpoint_dir.clone();
    std::fs::create_dir_all(&dir)?;
    cfg.save(&dir.join(RESOLVED_CONFIG))?;

    let mut train_reader = SplitReader::open(&cfg.dataset.dir, Split::Train)?;
    let mut val_reader = SplitReader::open(&cfg.dataset.dir, Split::Val)?;
    let batch = cfg.train.batch_size;

    let state = init_or_resume(cfg, spec, network_label, maximize)?;
    let RunState { mut model, mut adam, mut log, start_epoch } = state;
    if start_epoch >= cfg.train.epochs {
        info!("{network_label}: all {} epochs already complete", cfg.train.epochs);
        return Ok(log);
    }

    for epoch in start_epoch..cfg.train.epochs {
        let epoch_no = epoch + 1;
        let t0 = Instant::now();

        let order = shuffled_indices(cfg.train.seed, epoch, train_reader.len());
        let mut train_sum = 0.0f64;
        let mut train_count = 0usize;
        for (b, chunk) in order.chunks(batch).enumerate() {
            let examples = train_reader.get_many(chunk)?;
            let out = step(&model, &examples, true, epoch_no, b)?;
            let grads = out.grads.expect("training batch must produce gradients");
            adam.step(&mut model.store, &grads)?;
            train_sum += out.loss * out.n as f64;
            train_count += out.n;
        }
        let train_loss = train_sum / train_count.max(1) as f64;

        let mut val_sum = 0.0f64;
        let mut val_count = 0usize;
        let mut correct = 0usize;
        let mut pixels = 0usize;
        let val_order: Vec<u64> = (0..val_reader.len()).collect();
        for (b, chunk) in val_order.chunks(batch).enumerate() {
            let examples = val_reader.get_many(chunk)?;
            let out = step(&model, &examples, false, epoch_no, b)?;
            val_sum += out.loss * out.n as f64;
            val_count += out.n;
            if let Some((c, p)) = out.correct {
                correct += c;
                pixels += p;
            }
        }
        let val_loss = require_finite(val_sum / val_count.max(1) as f64, epoch_no, usize::MAX)?;
        let val_accuracy = (pixels > 0).then(|| correct as f64 / pixels as f64);
        let criterion = if maximize {
            val_accuracy.expect("maximizing runs report accuracy")
        } else {
            val_loss
        };

        let improved = if maximize { criterion > log.best_val } else { criterion < log.best_val };
        if improved {
            log.best_val = criterion;
            log.best_epoch = epoch_no;
            let meta = CheckpointMeta {
                spec: model.spec.clone(),
                seed: cfg.train.seed,
                epochs_completed: epoch_no as u64,
                best_val: Some(criterion),
                optimizer: None,
            };
            checkpoint::save(&dir.join(BEST_CHECKPOINT), &meta, &model.store, None)?;
        }

        log.epochs.push(EpochRecord {
            epoch: epoch_no,
            train_loss,
            val_loss,
            val_accuracy,
            seconds: t0.elapsed().as_secs_f64(),
        });
        log.write(&dir)?;
        let meta = CheckpointMeta {
            spec: model.spec.clone(),
            seed: cfg.train.seed,
            epochs_completed: epoch_no as u64,
            best_val: Some(log.best_val),
            optimizer: None,
        };
        checkpoint::save(&dir.join(LAST_CHECKPOINT), &meta, &model.store, Some(&adam))?;

        match val_accuracy {
            Some(acc) => info!(
                "{network_label} epoch {epoch_no}/{}: train {train_loss:.5} val {val_loss:.5} \
                 acc {acc:.4} ({:.1}s)",
                cfg.train.epochs,
                t0.elapsed().as_secs_f64()
            ),
            None => info!(
                "{network_label} epoch {epoch_no}/{}: train {train_loss:.5} val {val_loss:.5} \
                 ({:.1}s)",
                cfg.train.epochs,
                t0.elapsed().as_secs_f64()
            ),
        }
    }
    Ok(log)
}

/// Fresh state, or state restored from `last.ckpt` when the directory
/// already holds a compatible partial run.
fn init_or_resume(
    cfg: &RunConfig,
    spec: &NetworkSpec,
    network_label: &str,
    maximize: bool,
) -> Result<RunState> {
    let dir = &cfg.train.checkpoint_dir;
    let last = dir.join(LAST_CHECKPOINT);
    if !last.exists() {
        let model = Model::init(spec.clone(), cfg.train.seed)?;
        let adam = Adam::new(cfg.adam(), &model.store)?;
        return Ok(RunState {
            model,
            adam,
            log: TrainingLog::new(network_label, cfg.train.seed, maximize),
            start_epoch: 0,
        });
    }
    let loaded = checkpoint::load(&last)?;
    if loaded.meta.spec != *spec {
        return Err(Error::CheckpointMismatch(format!(
            "{} holds a {} checkpoint incompatible with the configured {} network",
            last.display(),
            loaded.meta.spec.kind_name(),
            spec.kind_name()
        )));
    }
    let done = loaded.meta.epochs_completed as usize;
    let mut log = TrainingLog::read(dir)?;
    if log.epochs.len() < done {
        return Err(Error::Config(format!(
            "{} records {} epochs but the log has only {}; run directory is damaged",
            last.display(),
            done,
            log.epochs.len()
        )));
    }
    // A crash between the log write and the checkpoint write can leave one
    // extra log record; drop it and replay that epoch.
    log.epochs.truncate(done);
    let adam = loaded.restore_adam()?;
    info!("resuming {network_label} from epoch {done}");
    Ok(RunState { model: loaded.into_model(), adam, log, start_epoch: done })
}

/// Load the trained pipeline described by the config: the localizer's best
/// checkpoint plus, for two-stage methods, the frozen occupancy model.
pub fn load_models(cfg: &RunConfig) -> Result<(Model, Option<Model>)> {
    let manifest = ensure_dataset_matches(cfg)?;
    let spec = cfg.localizer_spec()?;
    let path = cfg.train.checkpoint_dir.join(BEST_CHECKPOINT);
    let loaded = checkpoint::load(&path)?;
    if loaded.meta.spec != spec {
        return Err(Error::CheckpointMismatch(format!(
            "{} was trained as {:?}, config asks for {:?}",
            path.display(),
            loaded.meta.spec,
            spec
        )));
    }
    let occ = if cfg.train.method.is_two_stage() {
        Some(load_occupancy(cfg, manifest.region.grid_h)?)
    } else {
        None
    };
    Ok((loaded.into_model(), occ))
}

/// Slot predictions for a batch of raw transformed maps under the configured
/// pipeline, flattened `[n, 3m]` in f64.
pub fn predict_slots(
    cfg: &RunConfig,
    localizer: &Model,
    occupancy: Option<&Model>,
    raw: &[f32],
    n: usize,
    h: usize,
    w: usize,
) -> Result<Vec<f64>> {
    let inputs = localizer_batch_inputs(
        cfg.train.method,
        cfg.network.stage2_concat_input,
        occupancy,
        raw,
        n,
        h,
        w,
    )?;
    Ok(localizer.infer(&inputs, n, h, w)?.iter().map(|&v| f64::from(v)).collect())
}

/// Evaluation result: the aggregate report plus per-sample records for
/// anyone who wants the distribution.
#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub report: MetricsReport,
    pub samples: Vec<SampleEval>,
}

/// Run the configured pipeline over the test split. With `oracle` set, the
/// network is replaced by a predictor that emits the ground truth through
/// the same thresholding/denormalization path (self-consistency probe).
pub fn evaluate(cfg: &RunConfig, oracle: bool) -> Result<EvalOutcome> {
    let manifest = ensure_dataset_matches(cfg)?;
    let (h, w) = (manifest.region.grid_h, manifest.region.grid_w);
    let m = manifest.m;
    let gamma = cfg.eval.gamma;

    let models = if oracle { None } else { Some(load_models(cfg)?) };

    let mut reader = SplitReader::open(&cfg.dataset.dir, Split::Test)?;
    let indices: Vec<u64> = (0..reader.len()).collect();
    let mut evals = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(cfg.train.batch_size) {
        let examples = reader.get_many(chunk)?;
        let n = examples.len();
        let preds64: Vec<f64> = if let Some((localizer, occupancy)) = &models {
            let raw = stack_inputs(&examples);
            predict_slots(cfg, localizer, occupancy.as_ref(), &raw, n, h, w)?
        } else {
            // Oracle predictor: ground truth pushed through the normal slot
            // encoding, thresholding, and denormalization path.
            let mut flat = Vec::with_capacity(n * 3 * m);
            for ex in &examples {
                for row in &ex.labels.rows {
                    if row.b == 1 {
                        flat.push(1.0);
                        flat.push(row.u as f64 / h as f64);
                        flat.push(row.v as f64 / w as f64);
                    } else {
                        flat.extend_from_slice(&[0.0, 0.0, 0.0]);
                    }
                }
            }
            flat
        };
        for (i, ex) in examples.iter().enumerate() {
            let slots = preds_from_flat(&preds64[i * 3 * m..(i + 1) * 3 * m], m)?;
            let points = threshold_predictions(&slots, h, w, gamma);
            evals.push(evaluate_sample(&ex.labels.true_cells(), &points));
        }
    }
    let report = aggregate(&evals, h)?;
    Ok(EvalOutcome { report, samples: evals })
}
