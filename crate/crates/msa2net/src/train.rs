//! Training, evaluation and checkpointing.
//!
//! One process owns the model during training. Batches run as independent
//! per-sample tapes in parallel; gradients are reduced in batch order so the
//! same config and seed reproduce the training log bit for bit on the same
//! substrate.

use crate::adaptive_conv::Phase;
use crate::data::{self, DatasetManifest, Sample};
use crate::decoder::SegmentationResult;
use crate::encoder::EncoderConfig;
use crate::fingerprint::{self, Fingerprint, FingerprintFile};
use crate::metrics::{self, HausdorffMode, MetricReport};
use crate::model::{Guidance, ModelConfig, Msa2Net};
use crate::rng::Rng;
use crate::tape::Tape;
use crate::tensor::{Param, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Fingerprint(#[from] fingerprint::FingerprintError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("corrupt checkpoint {path}: {message}")]
    CorruptCheckpoint { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub name: String,
    pub lr: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    #[serde(default = "default_grad_clip")]
    pub grad_clip: f64,
    /// Linear learning-rate warmup over this many optimizer steps.
    #[serde(default = "default_warmup")]
    pub warmup_steps: usize,
    /// Fraction of total steps over which selection-logit updates anneal
    /// linearly to zero; the kernel schedule is committed from then on.
    /// 1.0 keeps selection learning active for the whole run.
    #[serde(default = "default_anneal")]
    pub selection_anneal: f64,
}

fn default_warmup() -> usize {
    50
}

fn default_anneal() -> f64 {
    0.4
}

fn default_grad_clip() -> f64 {
    1.0
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            name: "adamw".into(),
            lr: 1e-4,
            weight_decay: 1e-4,
            grad_clip: default_grad_clip(),
            warmup_steps: default_warmup(),
            selection_anneal: default_anneal(),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossWeights {
    pub ce: f64,
    pub dice: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { ce: 0.5, dice: 0.5 }
    }
}

fn default_fingerprint() -> String {
    "auto".into()
}

fn default_epochs() -> usize {
    60
}

fn default_batch() -> usize {
    8
}

fn default_true() -> bool {
    true
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("run")
}

/// Flat run configuration, mirrored by the JSON config file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub manifest: PathBuf,
    /// "auto" to fingerprint the training split, or a fingerprint JSON path.
    #[serde(default = "default_fingerprint")]
    pub fingerprint: String,
    #[serde(default = "default_guidance")]
    pub guidance: Guidance,
    #[serde(default = "default_true")]
    pub use_bridge: bool,
    #[serde(default = "default_true")]
    pub use_msadecoder: bool,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub loss_weights: LossWeights,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

fn default_guidance() -> Guidance {
    Guidance::SelfAdaptive
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.optimizer.lr <= 0.0 {
            return Err(TrainError::InvalidConfig("lr must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.optimizer.name != "adamw" {
            return Err(TrainError::InvalidConfig(format!(
                "unknown optimizer '{}'",
                self.optimizer.name
            )));
        }
        self.encoder
            .validate()
            .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self, TrainError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }
}

/// Decoupled-weight-decay Adam on the parameter set.
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: usize,
    state: BTreeMap<u64, (Tensor, Tensor)>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    /// Apply one update from summed gradients over `batch` samples.
    pub fn step(&mut self, model: &mut Msa2Net, grads: &BTreeMap<u64, Tensor>, batch: usize) {
        self.step_scaled(model, grads, batch, &[], 1.0);
    }

    /// Like [`AdamW::step`], with a learning-rate multiplier for the listed
    /// parameter ids (zero skips their update entirely).
    pub fn step_scaled(
        &mut self,
        model: &mut Msa2Net,
        grads: &BTreeMap<u64, Tensor>,
        batch: usize,
        scaled_ids: &[u64],
        multiplier: f64,
    ) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let scale = 1.0 / batch as f64;
        model.visit_params(&mut |p: &mut Param| {
            let Some(g) = grads.get(&p.id) else {
                return; // parameter did not participate in this step
            };
            let lr_mult = if scaled_ids.contains(&p.id) { multiplier } else { 1.0 };
            if lr_mult == 0.0 {
                return;
            }
            let (m, v) = self
                .state
                .entry(p.id)
                .or_insert_with(|| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())));
            let md = m.data_mut();
            let vd = v.data_mut();
            let pd = p.value.data_mut();
            for i in 0..pd.len() {
                let gi = g.data()[i] * scale;
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gi;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                pd[i] -=
                    self.lr * lr_mult * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * pd[i]);
            }
        });
    }
}

/// One line of the per-epoch CSV log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_dice: Option<f64>,
    pub val_hd95: Option<f64>,
    pub selected_kernels: String,
}

pub fn log_to_csv(records: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,loss,val_dice,val_hd95,selected_kernels\n");
    for r in records {
        out.push_str(&format!(
            "{},{:.17e},{},{},{}\n",
            r.epoch,
            r.loss,
            r.val_dice.map(|v| format!("{:.17e}", v)).unwrap_or_default(),
            r.val_hd95.map(|v| format!("{:.17e}", v)).unwrap_or_default(),
            r.selected_kernels
        ));
    }
    out
}

#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub run_config: RunConfig,
    pub model: Msa2Net,
    pub epoch: usize,
    pub best_metric: f64,
    /// Validation HD95 at the best epoch, when a validation split exists.
    pub best_val_hd95: Option<f64>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let bytes = bincode::serialize(self).map_err(|e| TrainError::CorruptCheckpoint {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        fs::write(path, bytes).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        bincode::deserialize(&bytes).map_err(|e| TrainError::CorruptCheckpoint {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
    pub records: Vec<EpochRecord>,
    pub fingerprint: Fingerprint,
}

/// Fingerprint the training split or read one from disk.
pub fn resolve_fingerprint(
    config: &RunConfig,
    manifest: &DatasetManifest,
    train: &[Sample],
) -> Result<Fingerprint, TrainError> {
    if config.fingerprint == "auto" {
        let masks = train
            .iter()
            .map(|s| (s.stem.clone(), s.mask.as_slice(), s.height, s.width));
        Ok(fingerprint::fingerprint_dataset(
            &manifest
                .class_names
                .get(1)
                .map(|_| config.manifest.display().to_string())
                .unwrap_or_default(),
            masks,
            manifest.num_classes,
        )?)
    } else {
        let path = PathBuf::from(&config.fingerprint);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let file: FingerprintFile = serde_json::from_str(&text)
            .map_err(|e| TrainError::InvalidConfig(format!("bad fingerprint file: {}", e)))?;
        Ok(file.fingerprint())
    }
}

/// Loss for one sample; returns the scalar and per-parameter gradients.
fn sample_loss_and_grads(
    model: &Msa2Net,
    sample: &Sample,
    weights: LossWeights,
    phase: Phase,
) -> (f64, Vec<(u64, Tensor)>) {
    let mut t = Tape::new();
    let x = t.constant(sample.image.clone());
    let logits = model.forward(&mut t, x, phase);
    let ce = t.cross_entropy(logits, &sample.mask);
    let probs = t.softmax_channels(logits);
    let dl = t.dice_loss(probs, &sample.mask, 1e-5);
    let ce_w = t.scale(ce, weights.ce);
    let dl_w = t.scale(dl, weights.dice);
    let loss = t.add(ce_w, dl_w);
    let loss_value = t.value(loss).item();
    let grads = t.backward(loss);
    (loss_value, t.param_grads(&grads))
}

/// Scale summed gradients so the mean-gradient global norm stays below the
/// clip threshold.
fn clip_gradients(grads: &mut BTreeMap<u64, Tensor>, batch: usize, clip: f64) {
    if clip <= 0.0 {
        return;
    }
    let scale = 1.0 / batch as f64;
    let mut sq = 0.0;
    for g in grads.values() {
        sq += g.data().iter().map(|v| (v * scale) * (v * scale)).sum::<f64>();
    }
    let norm = sq.sqrt();
    if norm > clip {
        let factor = clip / norm;
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }
}

/// Mean Dice of hard-mode predictions over a sample set.
pub fn evaluate_samples(
    model: &Msa2Net,
    samples: &[Sample],
    num_classes: usize,
    mode: HausdorffMode,
) -> Result<MetricReport, TrainError> {
    let predictions: Vec<(Vec<u8>, usize, usize)> = samples
        .par_iter()
        .map(|s| {
            let r = model.predict(&s.image);
            (r.labels, r.height, r.width)
        })
        .collect();
    let truths: Vec<(Vec<u8>, usize, usize)> = samples
        .iter()
        .map(|s| (s.mask.clone(), s.height, s.width))
        .collect();
    let classes: Vec<usize> = (1..num_classes).collect();
    Ok(metrics::evaluate(&predictions, &truths, &classes, mode)?)
}

/// Run the full training loop described by the config.
pub fn train(config: &RunConfig) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let (manifest, root) = data::read_manifest(&config.manifest)?;
    let train_samples = data::load_split(&manifest, &root, "train")?;
    if train_samples.is_empty() {
        return Err(TrainError::InvalidConfig("train split is empty".into()));
    }
    let val_samples = data::load_split(&manifest, &root, "val")?;
    for s in &train_samples {
        if (s.height, s.width) != config.encoder.input_size {
            return Err(TrainError::InvalidConfig(format!(
                "sample {} is {}x{} but the encoder expects {:?}",
                s.stem, s.height, s.width, config.encoder.input_size
            )));
        }
    }

    let fingerprint = resolve_fingerprint(config, &manifest, &train_samples)?;
    let matrix = config.guidance.candidate_matrix(&fingerprint);
    let mut model = Msa2Net::new(ModelConfig {
        encoder: config.encoder.clone(),
        num_classes: manifest.num_classes,
        guidance: config.guidance,
        use_bridge: config.use_bridge,
        use_msadecoder: config.use_msadecoder,
        candidate_matrix: matrix,
        seed: config.seed,
    });

    let mut optimizer = AdamW::new(config.optimizer.lr, config.optimizer.weight_decay);
    let mut shuffle_rng = Rng::new(config.seed).derive(0x0,);
    let mut records = Vec::with_capacity(config.epochs);
    let mut best_metric = f64::NEG_INFINITY;
    let mut best_model: Option<(Msa2Net, usize, Option<f64>)> = None;
    let mut step_index = 0usize;
    let logit_ids: Vec<u64> = model
        .selection_logit_params()
        .iter()
        .map(|p| p.id)
        .collect();
    let steps_per_epoch = train_samples.len().div_ceil(config.batch_size);
    let total_steps = (steps_per_epoch * config.epochs).max(1);

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..train_samples.len()).collect();
        shuffle_rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            step_index += 1;
            let warmup = config.optimizer.warmup_steps;
            optimizer.lr = if warmup > 0 && step_index <= warmup {
                config.optimizer.lr * step_index as f64 / warmup as f64
            } else {
                config.optimizer.lr
            };
            let anneal_steps = (config.optimizer.selection_anneal * total_steps as f64).ceil();
            let sel_mult = if config.optimizer.selection_anneal >= 1.0 {
                1.0
            } else {
                (1.0 - (step_index - 1) as f64 / anneal_steps.max(1.0)).max(0.0)
            };
            // While selection still learns, train on the soft mixture; once
            // the schedule is committed, train the deployed hard kernels so
            // evaluation sees the function that was optimized.
            let phase = if sel_mult > 0.0 { Phase::Soft } else { Phase::Hard };
            let results: Vec<(f64, Vec<(u64, Tensor)>)> = chunk
                .par_iter()
                .map(|&i| {
                    sample_loss_and_grads(&model, &train_samples[i], config.loss_weights, phase)
                })
                .collect();
            let mut batch_grads: BTreeMap<u64, Tensor> = BTreeMap::new();
            for (loss, grads) in results {
                epoch_loss += loss;
                for (id, g) in grads {
                    match batch_grads.get_mut(&id) {
                        Some(acc) => {
                            let dst = acc.data_mut();
                            for (d, s) in dst.iter_mut().zip(g.data()) {
                                *d += s;
                            }
                        }
                        None => {
                            batch_grads.insert(id, g);
                        }
                    }
                }
            }
            clip_gradients(&mut batch_grads, chunk.len(), config.optimizer.grad_clip);
            optimizer.step_scaled(&mut model, &batch_grads, chunk.len(), &logit_ids, sel_mult);
        }
        epoch_loss /= train_samples.len() as f64;

        let (val_dice, val_hd95) = if val_samples.is_empty() {
            (None, None)
        } else {
            let report = evaluate_samples(
                &model,
                &val_samples,
                manifest.num_classes,
                HausdorffMode::Percentile95,
            )?;
            (Some(report.mean_dice), report.mean_hd95)
        };

        let metric = val_dice.unwrap_or(-epoch_loss);
        if metric > best_metric {
            best_metric = metric;
            best_model = Some((model.clone(), epoch, val_hd95));
        }

        records.push(EpochRecord {
            epoch,
            loss: epoch_loss,
            val_dice,
            val_hd95,
            selected_kernels: model.kernel_schedule_report().compact(),
        });
    }

    fs::create_dir_all(&config.out_dir).map_err(io_err(&config.out_dir))?;
    let log_path = config.out_dir.join("training_log.csv");
    fs::write(&log_path, log_to_csv(&records)).map_err(io_err(&log_path))?;

    let (best, best_epoch, best_val_hd95) = best_model.expect("at least one epoch");
    let checkpoint = Checkpoint {
        run_config: config.clone(),
        model: best,
        epoch: best_epoch,
        best_metric,
        best_val_hd95,
    };
    let checkpoint_path = config.out_dir.join("best.ckpt");
    checkpoint.save(&checkpoint_path)?;

    Ok(TrainOutcome {
        checkpoint,
        checkpoint_path,
        log_path,
        records,
        fingerprint,
    })
}

/// Predict one image with a checkpointed model.
pub fn predict_image(model: &Msa2Net, image_path: &Path) -> Result<SegmentationResult, TrainError> {
    let (img, ic, iw, ih) = data::read_png(image_path)?;
    let plane = iw * ih;
    let mut chw = vec![0.0; 3 * plane];
    for p in 0..plane {
        for ch in 0..3 {
            let v = match ic {
                1 => img[p],
                _ => img[p * ic + ch.min(ic - 1)],
            };
            chw[ch * plane + p] = v as f64 / 255.0;
        }
    }
    Ok(model.predict(&Tensor::from_vec(&[3, ih, iw], chw)))
}

/// JSON sidecar written next to exported probability arrays.
#[derive(Serialize, Deserialize)]
pub struct ProbsSidecar {
    pub shape: [usize; 3],
    pub dtype: String,
    pub class_names: Vec<String>,
}

/// Write the label map (8-bit PNG) and optionally raw probabilities
/// (little-endian f64, H×W×C row-major) with a JSON sidecar.
pub fn export_prediction(
    result: &SegmentationResult,
    class_names: &[String],
    label_path: &Path,
    probs_path: Option<&Path>,
) -> Result<(), TrainError> {
    data::write_gray_png(label_path, &result.labels, result.width, result.height)?;
    if let Some(pp) = probs_path {
        let mut bytes = Vec::with_capacity(result.probabilities.len() * 8);
        for v in &result.probabilities {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(pp, bytes).map_err(io_err(pp))?;
        let sidecar = ProbsSidecar {
            shape: [result.height, result.width, result.num_classes],
            dtype: "f64le".into(),
            class_names: class_names.to_vec(),
        };
        let sidecar_path = pp.with_extension("json");
        fs::write(
            &sidecar_path,
            serde_json::to_string_pretty(&sidecar)
                .map_err(|e| TrainError::InvalidConfig(e.to_string()))?,
        )
        .map_err(io_err(&sidecar_path))?;
    }
    Ok(())
}

/// CSV series for box plots from a fingerprint file, or training curves from
/// a log file. The input kind is detected by content.
pub fn plot_data(input: &Path) -> Result<String, TrainError> {
    let text = fs::read_to_string(input).map_err(io_err(input))?;
    if let Ok(file) = serde_json::from_str::<FingerprintFile>(&text) {
        let mut out = String::from("series,class_id,q1,q2,q3,p95\n");
        for (class, q) in &file.per_class_quartiles {
            out.push_str(&format!(
                "class_{0},{0},{1:.17e},{2:.17e},{3:.17e},{4:.17e}\n",
                class, q[0], q[1], q[2], q[3]
            ));
        }
        let q = file.pooled_quartiles;
        out.push_str(&format!(
            "pooled,,{:.17e},{:.17e},{:.17e},{:.17e}\n",
            q[0], q[1], q[2], q[3]
        ));
        return Ok(out);
    }
    // training log: pass through the numeric curve columns
    let mut out = String::from("epoch,loss,val_dice,val_hd95\n");
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() >= 4 {
            out.push_str(&format!("{},{},{},{}\n", cols[0], cols[1], cols[2], cols[3]));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, split_stems, write_manifest, OverlapPolicy, ShapeKind, SyntheticSpec};

    fn tiny_encoder() -> EncoderConfig {
        EncoderConfig {
            input_size: (64, 64),
            patch_stride: 4,
            stage_dims: [8, 16, 32, 64],
            blocks_per_stage: [1, 1, 1, 1],
            heads_per_stage: [2, 2, 4, 4],
            stripe_widths: [1, 2, 2, 4],
        }
    }

    fn make_dataset(tag: &str, n: usize) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("msa2net_train_{}_{}", tag, std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        let spec = SyntheticSpec {
            image_size: 64,
            num_classes: 2,
            class_areas: vec![[0.10, 0.30]],
            shapes: ShapeKind::Ellipse,
            overlap: OverlapPolicy::Disjoint,
            noise: 0.05,
            seed: 5,
        };
        let mut manifest = generate(&spec, n, &dir).unwrap();
        let stems = manifest.all_stems();
        manifest.splits = split_stems(stems, (1.0, 0.0, 0.0), 1);
        write_manifest(&dir, &manifest).unwrap();
        dir
    }

    fn quick_config(dir: &Path, epochs: usize, seed: u64) -> RunConfig {
        RunConfig {
            manifest: dir.join("manifest.json"),
            fingerprint: "auto".into(),
            guidance: Guidance::SelfAdaptive,
            use_bridge: true,
            use_msadecoder: true,
            encoder: tiny_encoder(),
            optimizer: OptimizerConfig {
                lr: 1e-3,
                ..OptimizerConfig::default()
            },
            epochs,
            batch_size: 2,
            seed,
            loss_weights: LossWeights::default(),
            out_dir: dir.join(format!("run_{}", seed)),
        }
    }

    #[test]
    fn config_validation() {
        let dir = make_dataset("cfg", 1);
        let mut c = quick_config(&dir, 1, 0);
        c.optimizer.lr = 0.0;
        assert!(matches!(c.validate(), Err(TrainError::InvalidConfig(_))));
        c.optimizer.lr = 1e-3;
        c.batch_size = 0;
        assert!(c.validate().is_err());
        let _ = fs::remove_dir_all(&dir);
    }

    #[test]
    fn config_json_roundtrip_with_defaults() {
        let json = r#"{"manifest": "data/manifest.json"}"#;
        let c: RunConfig = serde_json::from_str(json).unwrap();
        assert_eq!(c.epochs, 60);
        assert_eq!(c.batch_size, 8);
        assert_eq!(c.guidance, Guidance::SelfAdaptive);
        assert!((c.optimizer.lr - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn short_training_runs_and_logs() {
        let dir = make_dataset("short", 4);
        let config = quick_config(&dir, 2, 3);
        let outcome = train(&config).unwrap();
        assert_eq!(outcome.records.len(), 2);
        assert!(outcome.checkpoint_path.exists());
        assert!(outcome.log_path.exists());
        let csv = fs::read_to_string(&outcome.log_path).unwrap();
        assert!(csv.starts_with("epoch,loss,val_dice,val_hd95,selected_kernels"));
        assert!(csv.contains("bridge=["));
        // training should reduce the loss over two epochs on 4 images
        assert!(outcome.records[1].loss <= outcome.records[0].loss * 1.5);
        // selection weights stay normalized after optimizer steps
        for p in outcome.checkpoint.model.selection_logit_params() {
            let logits = p.value.data();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            let total: f64 = logits.iter().map(|l| (l - max).exp() / sum).sum();
            assert!((total - 1.0).abs() < 1e-6);
        }
        let _ = fs::remove_dir_all(&dir);
    }

    #[test]
    fn same_seed_reproduces_log_and_probe_forward() {
        let dir = make_dataset("det", 3);
        let c1 = quick_config(&dir, 2, 9);
        let mut c2 = quick_config(&dir, 2, 9);
        c2.out_dir = dir.join("run_b");
        let a = train(&c1).unwrap();
        let b = train(&c2).unwrap();
        assert_eq!(log_to_csv(&a.records), log_to_csv(&b.records));
        // checkpoint roundtrip probe
        let loaded = Checkpoint::load(&a.checkpoint_path).unwrap();
        let probe = {
            let mut rng = Rng::new(42);
            let mut v = vec![0.0; 3 * 64 * 64];
            rng.fill_uniform(&mut v, 0.5);
            Tensor::from_vec(&[3, 64, 64], v)
        };
        let before = a.checkpoint.model.predict(&probe);
        let after = loaded.model.predict(&probe);
        assert_eq!(before.probabilities, after.probabilities);
        let _ = fs::remove_dir_all(&dir);
    }

    #[test]
    fn fixed_guidance_freezes_selection_logits() {
        let dir = make_dataset("frozen", 3);
        for (guidance, expect_change) in [
            (Guidance::None, false),
            (Guidance::Q2, false),
            (Guidance::SelfAdaptive, true),
        ] {
            let mut config = quick_config(&dir, 1, 11);
            config.guidance = guidance;
            config.out_dir = dir.join(format!("run_{}", guidance));
            // snapshot logits before: a fresh model with identical seed
            let outcome = train(&config).unwrap();
            let trained = &outcome.checkpoint.model;
            let mut change = 0.0;
            for p in trained.selection_logit_params() {
                change += p.value.norm();
            }
            // logits start at zero, so any nonzero norm means they moved
            if expect_change {
                assert!(change > 0.0, "{}: logits should move", guidance);
            } else {
                assert_eq!(change, 0.0, "{}: logits must stay untouched", guidance);
            }
        }
        let _ = fs::remove_dir_all(&dir);
    }

    #[test]
    fn plot_data_from_fingerprint_matches_quartiles() {
        let dir = make_dataset("plot", 3);
        let config = quick_config(&dir, 1, 13);
        let (manifest, root) = data::read_manifest(&config.manifest).unwrap();
        let samples = data::load_split(&manifest, &root, "train").unwrap();
        let fp = resolve_fingerprint(&config, &manifest, &samples).unwrap();
        let file = FingerprintFile::new(&fp);
        let fp_path = dir.join("fp.json");
        fs::write(&fp_path, serde_json::to_string(&file).unwrap()).unwrap();
        let csv = plot_data(&fp_path).unwrap();
        // recompute from raw samples: class 1 quartiles appear in the CSV
        let q = fp.per_class_quartiles.get(&1).unwrap();
        let line = csv.lines().find(|l| l.starts_with("class_1,1,")).unwrap();
        let cols: Vec<f64> = line
            .split(',')
            .skip(2)
            .map(|v| v.parse().unwrap())
            .collect();
        for (a, b) in cols.iter().zip(q) {
            assert_eq!(a, b);
        }
        let _ = fs::remove_dir_all(&dir);
    }
}
