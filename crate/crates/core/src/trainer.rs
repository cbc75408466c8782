//! Two-stage training harness: 2D pre-training on GTV labels, weight
//! inflation, and 2.5D fine-tuning on IGTV labels with early stopping and
//! best-validation-IoU model selection.

use std::collections::BTreeMap;

use ndarray::{s, Array2, Array4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_pipeline, sample_rng, AugmentConfig};
use crate::checkpoint::{restore_network, Checkpoint, CheckpointMeta, OptimizerState};
use crate::data::samples::build_samples;
use crate::data::stack::ProcessedStudy;
use crate::data::{SliceSample, SplitSpec, TargetKind};
use crate::error::{Result, SegError};
use crate::losses::{composite_loss, composite_loss_grad, ProbMap, TargetMask};
use crate::metrics::{
    aggregate, compute_record, format_report, AggregationLevel, BinaryMask, MetricsRecord, Summary,
};
use crate::network::{
    build_network, inflate_2d_to_25d, predict_mask, Mode, NetworkConfig, SegNetwork,
};
use crate::nn::{sigmoid, sigmoid_backward, Visit};
use crate::tensor::FeatureStack;

const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Cosine,
    Constant,
}

/// Optimizer and loop hyperparameters for one training stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    /// Cosine floor; the schedule anneals from `lr` down to this value.
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Round gradients through f32 before the update. Off by default so
    /// runs are exactly reproducible in doubles.
    pub mixed_precision: bool,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-3,
            lr_min: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-2,
            schedule: LrSchedule::Cosine,
            batch_size: 16,
            max_epochs: 20,
            mixed_precision: false,
            grad_clip: None,
        }
    }
}

impl OptimConfig {
    /// Stage-1 defaults: lr 1e-3, batch 16.
    pub fn pretrain() -> Self {
        OptimConfig::default()
    }

    /// Stage-2 defaults: lr 6e-5, batch 4, 30 epochs.
    pub fn finetune() -> Self {
        OptimConfig { lr: 6e-5, batch_size: 4, max_epochs: 30, ..OptimConfig::default() }
    }

    /// A zero learning rate is allowed on purpose: plateau diagnostics and
    /// the weight-decay invariant tests rely on lr = 0 runs.
    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(SegError::config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if !self.lr_min.is_finite() || self.lr_min < 0.0 || self.lr_min > self.lr {
            return Err(SegError::config(format!(
                "lr_min must lie in [0, lr], got {} with lr {}",
                self.lr_min, self.lr
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(SegError::config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(SegError::config(format!(
                "weight_decay must be finite and >= 0, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(SegError::config("batch_size must be at least 1"));
        }
        if self.max_epochs == 0 {
            return Err(SegError::config("max_epochs must be at least 1"));
        }
        if let Some(c) = self.grad_clip {
            if !c.is_finite() || c <= 0.0 {
                return Err(SegError::config(format!("grad_clip must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// Stop once validation IoU has failed to improve for `patience` epochs.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EarlyStopPolicy {
    pub patience: usize,
}

impl Default for EarlyStopPolicy {
    fn default() -> Self {
        EarlyStopPolicy { patience: 10 }
    }
}

impl EarlyStopPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 {
            return Err(SegError::config("patience must be at least 1"));
        }
        Ok(())
    }
}

/// Learning rate for a given epoch under the configured schedule.
pub fn lr_at(optim: &OptimConfig, epoch: usize) -> f64 {
    match optim.schedule {
        LrSchedule::Constant => optim.lr,
        LrSchedule::Cosine => {
            let t = (epoch.min(optim.max_epochs) as f64) / optim.max_epochs as f64;
            optim.lr_min
                + 0.5 * (optim.lr - optim.lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
        }
    }
}

/// Decoupled weight-decay Adam. The decay term is applied directly to the
/// parameters and is deliberately not scaled by the learning rate, so an
/// lr = 0 step still shrinks weights while leaving the update direction
/// untouched.
#[derive(Debug, Clone)]
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    weight_decay: f64,
    mixed_precision: bool,
    grad_clip: Option<f64>,
    state: OptimizerState,
}

impl AdamW {
    pub fn new(optim: &OptimConfig) -> AdamW {
        AdamW::from_state(optim, OptimizerState::default())
    }

    /// Resume from checkpointed moment estimates.
    pub fn from_state(optim: &OptimConfig, state: OptimizerState) -> AdamW {
        AdamW {
            beta1: optim.beta1,
            beta2: optim.beta2,
            weight_decay: optim.weight_decay,
            mixed_precision: optim.mixed_precision,
            grad_clip: optim.grad_clip,
            state,
        }
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    fn effective_grad(&self, g: f64) -> f64 {
        if self.mixed_precision {
            g as f32 as f64
        } else {
            g
        }
    }

    /// Apply one update using the gradients currently accumulated in `net`.
    pub fn step(&mut self, net: &mut SegNetwork, lr: f64) {
        let scale = match self.grad_clip {
            None => 1.0,
            Some(cap) => {
                let mut sq = 0.0;
                net.visit_params("", &mut |_, p| {
                    sq += p.grad.iter().map(|g| {
                        let g = self.effective_grad(*g);
                        g * g
                    }).sum::<f64>();
                });
                let norm = sq.sqrt();
                if norm > cap {
                    cap / norm
                } else {
                    1.0
                }
            }
        };
        self.state.step += 1;
        let t = self.state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, wd) = (self.beta1, self.beta2, self.weight_decay);
        let state = &mut self.state;
        let mixed = self.mixed_precision;
        net.visit_params("", &mut |name, p| {
            let m = state.m.entry(name.to_string()).or_insert_with(|| p.grad.mapv(|_| 0.0));
            let v = state.v.entry(name.to_string()).or_insert_with(|| p.grad.mapv(|_| 0.0));
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|pv, g, mv, vv| {
                    let g = if mixed { *g as f32 as f64 } else { *g } * scale;
                    *mv = b1 * *mv + (1.0 - b1) * g;
                    *vv = b2 * *vv + (1.0 - b2) * g * g;
                    let update = lr * (*mv / bc1) / ((*vv / bc2).sqrt() + ADAM_EPS);
                    *pv -= update + wd * *pv;
                });
        });
    }
}

/// Split a batch of slice samples into the two modality stacks the network
/// consumes plus the target masks. Channel layout per sample is the CT
/// block followed by the PET block; intensities arrive in [0, 255] and are
/// scaled to [0, 1] here.
pub fn assemble_batch(
    samples: &[&SliceSample],
) -> Result<(FeatureStack, FeatureStack, Array4<f64>)> {
    let first = samples.first().ok_or_else(|| SegError::input("cannot batch zero samples"))?;
    let (c, h, w) = first.input.dim();
    if c % 2 != 0 {
        return Err(SegError::input(format!("sample channel count {c} is not even")));
    }
    let depth = c / 2;
    let b = samples.len();
    let mut ct = Array4::zeros((b, depth, h, w));
    let mut pet = Array4::zeros((b, depth, h, w));
    let mut target = Array4::zeros((b, 1, h, w));
    for (i, sample) in samples.iter().enumerate() {
        if sample.input.dim() != (c, h, w) || sample.target.dim() != (h, w) {
            return Err(SegError::input(format!(
                "sample {} ({}/{}) has mismatched shape",
                i, sample.patient_id, sample.slice_index
            )));
        }
        ct.slice_mut(s![i, .., .., ..]).assign(&sample.input.slice(s![0..depth, .., ..]));
        pet.slice_mut(s![i, .., .., ..]).assign(&sample.input.slice(s![depth.., .., ..]));
        target.slice_mut(s![i, 0, .., ..]).assign(&sample.target);
    }
    ct.mapv_inplace(|v| v / 255.0);
    pet.mapv_inplace(|v| v / 255.0);
    Ok((FeatureStack::new(pet)?, FeatureStack::new(ct)?, target))
}

/// Loop-internal bookkeeping, exposed in the final report.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub global_step: u64,
    pub best_val_iou: Option<f64>,
    pub best_epoch: Option<usize>,
    pub epochs_since_improvement: usize,
}

/// One line of the per-epoch metrics log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_iou: Option<f64>,
    pub best_val_iou: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: String,
    pub epochs: Vec<EpochRecord>,
    pub stopped_early: bool,
    pub state: TrainState,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub report: TrainReport,
}

fn check_sample_channels(net: &SegNetwork, samples: &[SliceSample]) -> Result<()> {
    let expected = 2 * net.config.stack_depth;
    if let Some(s) = samples.first() {
        let c = s.input.dim().0;
        if c != expected {
            return Err(SegError::config(format!(
                "network in {} mode expects {expected}-channel samples, dataset provides {c}",
                match net.config.mode {
                    Mode::TwoD => "2d",
                    Mode::TwoPointFiveD => "2.5d",
                }
            )));
        }
    }
    Ok(())
}

/// Mean per-slice IoU of thresholded predictions over `samples`.
pub fn mean_val_iou(
    net: &SegNetwork,
    samples: &[SliceSample],
    batch_size: usize,
    threshold: f64,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(SegError::input("cannot compute validation IoU on zero samples"));
    }
    let preds = predict_samples(net, samples, batch_size, threshold)?;
    let mut total = 0.0;
    for (pred, sample) in preds.iter().zip(samples) {
        let g = sample.target.mapv(|v| v > 0.5);
        let p_mask = BinaryMask::new(pred.clone().into_dyn(), &[1.0, 1.0])?;
        let g_mask = BinaryMask::new(g.into_dyn(), &[1.0, 1.0])?;
        total += crate::metrics::iou(&p_mask, &g_mask)?;
    }
    Ok(total / samples.len() as f64)
}

/// Run eval-mode inference and return one thresholded 2D mask per sample.
pub fn predict_samples(
    net: &SegNetwork,
    samples: &[SliceSample],
    batch_size: usize,
    threshold: f64,
) -> Result<Vec<Array2<bool>>> {
    if batch_size == 0 {
        return Err(SegError::config("batch_size must be at least 1"));
    }
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size) {
        let refs: Vec<&SliceSample> = chunk.iter().collect();
        let (pet, ct, _) = assemble_batch(&refs)?;
        let logits = net.forward(&pet, &ct)?;
        let mask = predict_mask(&logits, threshold);
        for i in 0..chunk.len() {
            out.push(mask.slice(s![i, 0, .., ..]).to_owned());
        }
    }
    Ok(out)
}

struct LoopOptions<'a> {
    optim: &'a OptimConfig,
    stop: Option<&'a EarlyStopPolicy>,
    augment: Option<&'a AugmentConfig>,
    select_best: bool,
    stage: &'a str,
    seed: u64,
}

fn train_loop(
    net: &mut SegNetwork,
    train: &[SliceSample],
    val: &[SliceSample],
    opts: &LoopOptions,
) -> Result<TrainOutcome> {
    opts.optim.validate()?;
    if let Some(stop) = opts.stop {
        stop.validate()?;
    }
    if let Some(aug) = opts.augment {
        aug.validate()?;
    }
    if train.is_empty() {
        return Err(SegError::input("training set is empty"));
    }
    check_sample_channels(net, train)?;
    check_sample_channels(net, val)?;

    let mut optimizer = AdamW::new(opts.optim);
    let mut state = TrainState::default();
    let mut epochs = Vec::new();
    let mut stopped_early = false;
    let mut best_snapshot: Option<(BTreeMap<String, ndarray::ArrayD<f64>>, BTreeMap<String, ndarray::ArrayD<f64>>)> =
        None;

    for epoch in 0..opts.optim.max_epochs {
        state.epoch = epoch;
        let lr = lr_at(opts.optim, epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(opts.seed);
        shuffle_rng.set_stream(epoch as u64);
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        for (chunk_i, chunk) in order.chunks(opts.optim.batch_size).enumerate() {
            let augmented: Vec<SliceSample>;
            let refs: Vec<&SliceSample> = match opts.augment {
                None => chunk.iter().map(|&i| &train[i]).collect(),
                Some(aug) => {
                    let base = epoch as u64 * train.len() as u64
                        + chunk_i as u64 * opts.optim.batch_size as u64;
                    augmented = chunk
                        .iter()
                        .enumerate()
                        .map(|(j, &i)| {
                            let mut rng = sample_rng(aug.seed, base + j as u64);
                            apply_pipeline(&train[i], aug, &mut rng)
                        })
                        .collect();
                    augmented.iter().collect()
                }
            };
            let (pet, ct, target) = assemble_batch(&refs)?;
            let (logits, cache) = net.forward_train(&pet, &ct)?;
            let probs = sigmoid(&logits);
            let p = ProbMap::from_trusted(probs.clone());
            let y = TargetMask::from_trusted(target);
            let loss = composite_loss(&p, &y)?;
            let g_probs = composite_loss_grad(&p, &y)?;
            let g_logits = sigmoid_backward(&probs, &g_probs);
            net.zero_grad();
            net.backward(&cache, &g_logits);
            optimizer.step(net, lr);
            state.global_step += 1;
            loss_sum += loss * chunk.len() as f64;
        }
        let train_loss = loss_sum / train.len() as f64;

        let val_iou = if val.is_empty() {
            None
        } else {
            Some(mean_val_iou(net, val, opts.optim.batch_size, 0.5)?)
        };
        let improved = match (val_iou, state.best_val_iou) {
            (Some(v), Some(best)) => v > best,
            (Some(_), None) => true,
            (None, _) => false,
        };
        if improved {
            state.best_val_iou = val_iou;
            state.best_epoch = Some(epoch);
            state.epochs_since_improvement = 0;
            if opts.select_best {
                best_snapshot = Some((net.param_map(), net.buffer_map()));
            }
        } else if val_iou.is_some() {
            state.epochs_since_improvement += 1;
        }
        epochs.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            val_iou,
            best_val_iou: state.best_val_iou,
        });
        if let Some(stop) = opts.stop {
            if state.epochs_since_improvement >= stop.patience {
                stopped_early = true;
                break;
            }
        }
    }

    let checkpoint_epoch = if opts.select_best {
        if let Some((params, buffers)) = best_snapshot {
            net.visit_params("", &mut |name, p| {
                p.value.assign(&params[name]);
            });
            net.visit_buffers("", &mut |name, b| {
                b.assign(&buffers[name]);
            });
            state.best_epoch.unwrap_or(state.epoch)
        } else {
            state.epoch
        }
    } else {
        state.epoch
    };

    let checkpoint = Checkpoint {
        config: net.config.clone(),
        params: net.param_map(),
        buffers: net.buffer_map(),
        optimizer: Some(optimizer.state().clone()),
        meta: CheckpointMeta {
            stage: opts.stage.to_string(),
            epoch: checkpoint_epoch,
            best_val_iou: state.best_val_iou,
        },
    };
    Ok(TrainOutcome {
        checkpoint,
        report: TrainReport { stage: opts.stage.to_string(), epochs, stopped_early, state },
    })
}

/// Stage 1: train a 2D network on GTV labels. Keeps the final-epoch
/// weights; validation (when provided) is logged for monitoring only.
pub fn pretrain_gtv(
    net: &mut SegNetwork,
    train: &[SliceSample],
    val: &[SliceSample],
    optim: &OptimConfig,
    augment: Option<&AugmentConfig>,
    seed: u64,
) -> Result<TrainOutcome> {
    if net.config.mode != Mode::TwoD {
        return Err(SegError::config("stage-1 pre-training requires a network in 2d mode"));
    }
    train_loop(
        net,
        train,
        val,
        &LoopOptions { optim, stop: None, augment, select_best: false, stage: "pretrain", seed },
    )
}

/// Stage 2: inflate a stage-1 checkpoint to 2.5D and fine-tune on IGTV
/// labels, keeping the weights of the best validation-IoU epoch.
pub fn finetune_igtv(
    ckpt2d: &Checkpoint,
    cfg25d: &NetworkConfig,
    train: &[SliceSample],
    val: &[SliceSample],
    optim: &OptimConfig,
    stop: &EarlyStopPolicy,
    augment: Option<&AugmentConfig>,
    seed: u64,
) -> Result<TrainOutcome> {
    if ckpt2d.meta.stage != "pretrain" {
        return Err(SegError::config(format!(
            "fine-tuning expects a stage-1 checkpoint, got stage {:?}",
            ckpt2d.meta.stage
        )));
    }
    let mut net2d = restore_network(ckpt2d)?;
    let mut net = inflate_2d_to_25d(&mut net2d, cfg25d, seed)?;
    train_loop(
        &mut net,
        train,
        val,
        &LoopOptions {
            optim,
            stop: Some(stop),
            augment,
            select_best: true,
            stage: "finetune",
            seed,
        },
    )
}

/// Train a freshly initialized network (ablation baseline rows). Model
/// selection mirrors the fine-tuning stage when a validation set exists.
pub fn train_scratch(
    cfg: &NetworkConfig,
    train: &[SliceSample],
    val: &[SliceSample],
    optim: &OptimConfig,
    stop: Option<&EarlyStopPolicy>,
    augment: Option<&AugmentConfig>,
    seed: u64,
) -> Result<TrainOutcome> {
    let mut net = build_network(cfg, seed)?;
    let select_best = !val.is_empty();
    train_loop(
        &mut net,
        train,
        val,
        &LoopOptions { optim, stop, augment, select_best, stage: "scratch", seed },
    )
}

/// Per-sample evaluation records plus both aggregation levels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: Vec<MetricsRecord>,
    pub per_slice: Summary,
    pub per_patient: Summary,
}

/// Metrics records for precomputed prediction masks. Spacing is looked up
/// per patient; patients absent from the map fall back to pixel units.
pub fn records_from_masks(
    preds: &[Array2<bool>],
    samples: &[SliceSample],
    spacing: &BTreeMap<String, [f64; 2]>,
) -> Result<Vec<MetricsRecord>> {
    if preds.len() != samples.len() {
        return Err(SegError::input(format!(
            "{} predictions for {} samples",
            preds.len(),
            samples.len()
        )));
    }
    preds
        .par_iter()
        .zip(samples.par_iter())
        .map(|(pred, sample)| {
            let sp = spacing.get(&sample.patient_id).copied().unwrap_or([1.0, 1.0]);
            let p = BinaryMask::new(pred.clone().into_dyn(), &sp)?;
            let g = BinaryMask::new(sample.target.mapv(|v| v > 0.5).into_dyn(), &sp)?;
            compute_record(&p, &g, &sample.patient_id, Some(sample.slice_index))
        })
        .collect()
}

/// Evaluate a network on a sample set at the given probability threshold.
pub fn evaluate(
    net: &SegNetwork,
    samples: &[SliceSample],
    spacing: &BTreeMap<String, [f64; 2]>,
    threshold: f64,
    batch_size: usize,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(SegError::input("cannot evaluate an empty sample set"));
    }
    check_sample_channels_eval(net, samples)?;
    let preds = predict_samples(net, samples, batch_size, threshold)?;
    let records = records_from_masks(&preds, samples, spacing)?;
    let per_slice = aggregate(&records, AggregationLevel::PerSlice)?;
    let per_patient = aggregate(&records, AggregationLevel::PerPatient)?;
    Ok(EvalReport { records, per_slice, per_patient })
}

fn check_sample_channels_eval(net: &SegNetwork, samples: &[SliceSample]) -> Result<()> {
    let expected = 2 * net.config.stack_depth;
    if let Some(s) = samples.first() {
        let c = s.input.dim().0;
        if c != expected {
            return Err(SegError::input(format!(
                "network expects {expected}-channel samples, evaluation set provides {c}"
            )));
        }
    }
    Ok(())
}

/// Everything one ablation run needs beyond the dataset itself.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSpec {
    /// The full 2.5D configuration; the 2D row is derived from it.
    pub network: NetworkConfig,
    pub pretrain: OptimConfig,
    pub finetune: OptimConfig,
    pub stop: EarlyStopPolicy,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for AblationSpec {
    fn default() -> Self {
        AblationSpec {
            network: NetworkConfig::default(),
            pretrain: OptimConfig::pretrain(),
            finetune: OptimConfig::finetune(),
            stop: EarlyStopPolicy::default(),
            threshold: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub seed: u64,
    pub per_slice: Summary,
    pub per_patient: Summary,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub split: SplitSpec,
    pub rows: Vec<AblationRow>,
    pub table: String,
}

fn zero_sim(cfg: &NetworkConfig) -> NetworkConfig {
    let mut out = cfg.clone();
    out.sim.alpha = 0.0;
    out.sim.beta = 0.0;
    out.sim.gamma = 0.0;
    out.sim.learnable_weights = false;
    out
}

fn filter_studies(studies: &[ProcessedStudy], ids: &[String]) -> Vec<ProcessedStudy> {
    studies.iter().filter(|s| ids.contains(&s.patient_id)).cloned().collect()
}

/// The four-row ablation: 2D baseline, 2.5D trained from scratch, 2.5D
/// fine-tuned from the 2D checkpoint, and 2.5D fine-tuned with the slice
/// interaction branches active. Rows share the pre-training checkpoint
/// where applicable and differ only in the row's declared knob; each row
/// trains and evaluates under a fixed per-row seed.
pub fn run_ablation(
    studies: &[ProcessedStudy],
    split: &SplitSpec,
    spec: &AblationSpec,
) -> Result<AblationReport> {
    spec.network.validate()?;
    if spec.network.mode != Mode::TwoPointFiveD {
        return Err(SegError::config("ablation spec requires a 2.5d base configuration"));
    }
    let known: Vec<&str> = studies.iter().map(|s| s.patient_id.as_str()).collect();
    for id in split.all_ids() {
        if !known.contains(&id) {
            return Err(SegError::data(format!("split references unknown patient {id}")));
        }
    }
    if split.train.is_empty() || split.test.is_empty() {
        return Err(SegError::data("ablation needs nonempty train and test partitions"));
    }
    let train_studies = filter_studies(studies, &split.train);
    let val_studies = filter_studies(studies, &split.val);
    let test_studies = filter_studies(studies, &split.test);

    let gtv_train_2d = build_samples(&train_studies, TargetKind::Gtv, 1)?;
    let gtv_val_2d = build_samples(&val_studies, TargetKind::Gtv, 1)?;
    let igtv_train_2d = build_samples(&train_studies, TargetKind::Igtv, 1)?;
    let igtv_val_2d = build_samples(&val_studies, TargetKind::Igtv, 1)?;
    let igtv_test_2d = build_samples(&test_studies, TargetKind::Igtv, 1)?;
    let depth = spec.network.stack_depth;
    let igtv_train = build_samples(&train_studies, TargetKind::Igtv, depth)?;
    let igtv_val = build_samples(&val_studies, TargetKind::Igtv, depth)?;
    let igtv_test = build_samples(&test_studies, TargetKind::Igtv, depth)?;

    let spacing: BTreeMap<String, [f64; 2]> =
        studies.iter().map(|s| (s.patient_id.clone(), s.slice_spacing())).collect();

    let cfg_2d =
        NetworkConfig { mode: Mode::TwoD, stack_depth: 1, ..spec.network.clone() };
    let cfg_25d_plain = zero_sim(&spec.network);
    let cfg_25d_sim = spec.network.clone();

    // One shared stage-1 checkpoint feeds both fine-tuned rows; the 2D
    // network carries no slice-interaction parameters, so the rows diverge
    // only at inflation time.
    let pretrain_seed = spec.seed.wrapping_add(101);
    let mut net2d = build_network(&cfg_2d, pretrain_seed)?;
    let pretrained =
        pretrain_gtv(&mut net2d, &gtv_train_2d, &gtv_val_2d, &spec.pretrain, None, pretrain_seed)?;

    let mut rows = Vec::new();
    let mut summaries = Vec::new();

    for (i, name) in ["2d", "2.5d", "2.5d+ft", "2.5d+ft+sim"].iter().enumerate() {
        let row_seed = spec.seed.wrapping_add(1 + i as u64);
        let outcome = match i {
            0 => train_scratch(
                &cfg_2d,
                &igtv_train_2d,
                &igtv_val_2d,
                &spec.finetune,
                Some(&spec.stop),
                None,
                row_seed,
            )?,
            1 => train_scratch(
                &cfg_25d_plain,
                &igtv_train,
                &igtv_val,
                &spec.finetune,
                Some(&spec.stop),
                None,
                row_seed,
            )?,
            2 => finetune_igtv(
                &pretrained.checkpoint,
                &cfg_25d_plain,
                &igtv_train,
                &igtv_val,
                &spec.finetune,
                &spec.stop,
                None,
                row_seed,
            )?,
            _ => finetune_igtv(
                &pretrained.checkpoint,
                &cfg_25d_sim,
                &igtv_train,
                &igtv_val,
                &spec.finetune,
                &spec.stop,
                None,
                row_seed,
            )?,
        };
        let net = restore_network(&outcome.checkpoint)?;
        let test = if i == 0 { &igtv_test_2d } else { &igtv_test };
        let eval =
            evaluate(&net, test, &spacing, spec.threshold, spec.finetune.batch_size)?;
        summaries.push((name.to_string(), eval.per_slice.clone()));
        rows.push(AblationRow {
            name: name.to_string(),
            seed: row_seed,
            per_slice: eval.per_slice,
            per_patient: eval.per_patient,
        });
    }

    let table = format_report(&summaries);
    Ok(AblationReport { split: split.clone(), rows, table })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::stack::RoiMeta;
    use ndarray::Array3;

    fn tiny_cfg(mode: Mode) -> NetworkConfig {
        NetworkConfig {
            mode,
            stack_depth: if mode == Mode::TwoD { 1 } else { 3 },
            base_width: 4,
            depth: 2,
            ..NetworkConfig::default()
        }
    }

    fn fast_optim(epochs: usize) -> OptimConfig {
        OptimConfig {
            lr: 1e-2,
            batch_size: 4,
            max_epochs: epochs,
            schedule: LrSchedule::Constant,
            weight_decay: 0.0,
            ..OptimConfig::default()
        }
    }

    /// Synthetic 16x16 samples with a bright square target.
    fn square_samples(n: usize, channels: usize) -> Vec<SliceSample> {
        (0..n)
            .map(|i| {
                let off = i % 6;
                let mut input = Array3::zeros((channels, 16, 16));
                let mut target = Array2::zeros((16, 16));
                for y in 4..12 {
                    for x in (2 + off)..(10 + off) {
                        for c in 0..channels {
                            input[[c, y, x]] = 200.0;
                        }
                        target[[y, x]] = 1.0;
                    }
                }
                SliceSample {
                    input,
                    target,
                    patient_id: format!("p{:03}", i / 3),
                    slice_index: i % 3,
                }
            })
            .collect()
    }

    #[test]
    fn cosine_schedule_hits_endpoints_and_decreases() {
        let optim = OptimConfig { lr: 1e-3, lr_min: 1e-5, max_epochs: 10, ..OptimConfig::default() };
        assert!((lr_at(&optim, 0) - 1e-3).abs() < 1e-15);
        assert!((lr_at(&optim, 10) - 1e-5).abs() < 1e-15);
        for e in 0..10 {
            assert!(lr_at(&optim, e + 1) <= lr_at(&optim, e));
        }
        let constant = OptimConfig { schedule: LrSchedule::Constant, ..optim };
        assert_eq!(lr_at(&constant, 7), constant.lr);
    }

    #[test]
    fn optim_validation_rejects_bad_values() {
        assert!(OptimConfig { lr: -1.0, ..OptimConfig::default() }.validate().is_err());
        assert!(OptimConfig { beta1: 1.0, ..OptimConfig::default() }.validate().is_err());
        assert!(OptimConfig { batch_size: 0, ..OptimConfig::default() }.validate().is_err());
        assert!(OptimConfig { grad_clip: Some(0.0), ..OptimConfig::default() }.validate().is_err());
        assert!(OptimConfig { lr_min: 2e-3, ..OptimConfig::default() }.validate().is_err());
        assert!(EarlyStopPolicy { patience: 0 }.validate().is_err());
        assert!(OptimConfig { lr: 0.0, ..OptimConfig::default() }.validate().is_ok());
    }

    #[test]
    fn zero_lr_zero_decay_step_is_bitwise_identity() {
        let mut net = build_network(&tiny_cfg(Mode::TwoD), 3).unwrap();
        let samples = square_samples(2, 2);
        let refs: Vec<&SliceSample> = samples.iter().collect();
        let (pet, ct, y) = assemble_batch(&refs).unwrap();
        let (logits, cache) = net.forward_train(&pet, &ct).unwrap();
        let probs = sigmoid(&logits);
        let g = sigmoid_backward(
            &probs,
            &composite_loss_grad(
                &ProbMap::from_trusted(probs.clone()),
                &TargetMask::from_trusted(y),
            )
            .unwrap(),
        );
        net.zero_grad();
        net.backward(&cache, &g);
        let before = net.param_map();
        let optim = OptimConfig { weight_decay: 0.0, ..OptimConfig::default() };
        let mut opt = AdamW::new(&optim);
        opt.step(&mut net, 0.0);
        assert_eq!(net.param_map(), before);
    }

    #[test]
    fn zero_lr_step_applies_only_weight_decay() {
        let mut net = build_network(&tiny_cfg(Mode::TwoD), 3).unwrap();
        let samples = square_samples(2, 2);
        let refs: Vec<&SliceSample> = samples.iter().collect();
        let (pet, ct, y) = assemble_batch(&refs).unwrap();
        let (logits, cache) = net.forward_train(&pet, &ct).unwrap();
        let probs = sigmoid(&logits);
        let g = sigmoid_backward(
            &probs,
            &composite_loss_grad(
                &ProbMap::from_trusted(probs.clone()),
                &TargetMask::from_trusted(y),
            )
            .unwrap(),
        );
        net.zero_grad();
        net.backward(&cache, &g);
        let before = net.param_map();
        let wd = 1e-2;
        let optim = OptimConfig { weight_decay: wd, ..OptimConfig::default() };
        let mut opt = AdamW::new(&optim);
        opt.step(&mut net, 0.0);
        for (name, after) in net.param_map() {
            let expected = before[&name].mapv(|v| v - wd * v);
            let diff = (&after - &expected).iter().map(|d| d.abs()).fold(0.0, f64::max);
            assert!(diff < 1e-15, "{name}: max dev {diff}");
        }
    }

    #[test]
    fn grad_clip_rescales_the_global_norm() {
        let mut net = build_network(&tiny_cfg(Mode::TwoD), 3).unwrap();
        net.zero_grad();
        let mut sq = 0.0;
        net.visit_params("", &mut |_, p| {
            p.grad.fill(2.0);
            sq += p.grad.iter().map(|g| g * g).sum::<f64>();
        });
        let norm = sq.sqrt();
        let cap = norm / 10.0;
        let optim = OptimConfig {
            weight_decay: 0.0,
            grad_clip: Some(cap),
            ..OptimConfig::default()
        };
        let mut opt = AdamW::new(&optim);
        opt.step(&mut net, 1e-3);
        // After one step m = (1-beta1) * g_clipped for every entry.
        let expected_m = (1.0 - optim.beta1) * 2.0 * (cap / norm);
        for (name, m) in &opt.state().m {
            let dev = m.iter().map(|v| (v - expected_m).abs()).fold(0.0, f64::max);
            assert!(dev < 1e-12, "{name}: {dev}");
        }
    }

    #[test]
    fn mixed_precision_rounds_gradients_through_f32() {
        let mut net = build_network(&tiny_cfg(Mode::TwoD), 3).unwrap();
        net.zero_grad();
        net.visit_params("", &mut |_, p| p.grad.fill(1e-60));
        let before = net.param_map();
        let optim = OptimConfig {
            weight_decay: 0.0,
            mixed_precision: true,
            ..OptimConfig::default()
        };
        let mut opt = AdamW::new(&optim);
        opt.step(&mut net, 1e-3);
        // 1e-60 underflows to zero in f32, so the update vanishes entirely.
        assert_eq!(net.param_map(), before);
        let mut full = AdamW::new(&OptimConfig { mixed_precision: false, ..optim });
        net.zero_grad();
        net.visit_params("", &mut |_, p| p.grad.fill(1e-60));
        full.step(&mut net, 1e-3);
        assert_ne!(net.param_map(), before);
    }

    #[test]
    fn batch_layout_splits_modalities_and_scales() {
        let samples = square_samples(3, 6);
        let refs: Vec<&SliceSample> = samples.iter().collect();
        let (pet, ct, y) = assemble_batch(&refs).unwrap();
        assert_eq!(pet.values().dim(), (3, 3, 16, 16));
        assert_eq!(ct.values().dim(), (3, 3, 16, 16));
        assert_eq!(y.dim(), (3, 1, 16, 16));
        assert!((ct.values()[[0, 0, 4, 2]] - 200.0 / 255.0).abs() < 1e-12);
        assert_eq!(pet.values()[[0, 2, 4, 2]], ct.values()[[0, 0, 4, 2]]);
        assert_eq!(y[[0, 0, 4, 2]], 1.0);
        assert_eq!(y[[0, 0, 0, 0]], 0.0);
    }

    #[test]
    fn training_reduces_loss_on_a_small_set() {
        let samples = square_samples(8, 2);
        let mut net = build_network(&tiny_cfg(Mode::TwoD), 7).unwrap();
        let outcome =
            pretrain_gtv(&mut net, &samples, &[], &fast_optim(12), None, 11).unwrap();
        let first = outcome.report.epochs.first().unwrap().train_loss;
        let last = outcome.report.epochs.last().unwrap().train_loss;
        assert!(last < first, "loss did not decrease: {first} -> {last}");
        assert_eq!(outcome.checkpoint.meta.stage, "pretrain");
    }

    #[test]
    fn pretrain_rejects_25d_network() {
        let mut net = build_network(&tiny_cfg(Mode::TwoPointFiveD), 7).unwrap();
        let samples = square_samples(4, 6);
        let err = pretrain_gtv(&mut net, &samples, &[], &fast_optim(1), None, 0).unwrap_err();
        assert_eq!(err.category(), "config");
    }

    #[test]
    fn channel_mismatch_is_a_config_error() {
        let mut net = build_network(&tiny_cfg(Mode::TwoD), 7).unwrap();
        let samples = square_samples(4, 6);
        let err = pretrain_gtv(&mut net, &samples, &[], &fast_optim(1), None, 0).unwrap_err();
        assert_eq!(err.category(), "config");
        assert!(err.to_string().contains("channel"));
    }

    #[test]
    fn finetune_rejects_non_pretrain_checkpoint() {
        let samples = square_samples(6, 6);
        let cfg = tiny_cfg(Mode::TwoPointFiveD);
        let outcome = train_scratch(&cfg, &samples, &samples, &fast_optim(1), None, None, 5).unwrap();
        let err = finetune_igtv(
            &outcome.checkpoint,
            &cfg,
            &samples,
            &samples,
            &fast_optim(1),
            &EarlyStopPolicy::default(),
            None,
            5,
        )
        .unwrap_err();
        assert_eq!(err.category(), "config");
        assert!(err.to_string().contains("stage"));
    }

    #[test]
    fn plateau_with_patience_two_stops_after_three_epochs() {
        let samples = square_samples(6, 2);
        let mut net = build_network(&tiny_cfg(Mode::TwoD), 7).unwrap();
        let optim = OptimConfig {
            lr: 0.0,
            weight_decay: 0.0,
            batch_size: 4,
            max_epochs: 10,
            ..OptimConfig::default()
        };
        let outcome = train_loop(
            &mut net,
            &samples,
            &samples,
            &LoopOptions {
                optim: &optim,
                stop: Some(&EarlyStopPolicy { patience: 2 }),
                augment: None,
                select_best: true,
                stage: "finetune",
                seed: 1,
            },
        )
        .unwrap();
        assert!(outcome.report.stopped_early);
        assert_eq!(outcome.report.epochs.len(), 3);
    }

    #[test]
    fn checkpoint_records_max_validation_iou() {
        let train = square_samples(8, 2);
        let val = square_samples(4, 2);
        let mut net = build_network(&tiny_cfg(Mode::TwoD), 7).unwrap();
        let optim = fast_optim(6);
        let outcome = train_loop(
            &mut net,
            &train,
            &val,
            &LoopOptions {
                optim: &optim,
                stop: Some(&EarlyStopPolicy::default()),
                augment: None,
                select_best: true,
                stage: "finetune",
                seed: 2,
            },
        )
        .unwrap();
        let max_iou = outcome
            .report
            .epochs
            .iter()
            .filter_map(|e| e.val_iou)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(outcome.checkpoint.meta.best_val_iou, Some(max_iou));
        // Running best is monotone non-decreasing.
        let bests: Vec<f64> =
            outcome.report.epochs.iter().filter_map(|e| e.best_val_iou).collect();
        assert!(bests.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn fixed_seed_reproduces_first_epoch_exactly() {
        let samples = square_samples(10, 2);
        let run = |seed| {
            let mut net = build_network(&tiny_cfg(Mode::TwoD), seed).unwrap();
            pretrain_gtv(&mut net, &samples, &[], &fast_optim(2), None, seed).unwrap()
        };
        let a = run(9);
        let b = run(9);
        assert_eq!(a.report.epochs[0].train_loss, b.report.epochs[0].train_loss);
        assert_eq!(a.checkpoint.params, b.checkpoint.params);
        let c = run(10);
        assert_ne!(a.report.epochs[0].train_loss, c.report.epochs[0].train_loss);
    }

    #[test]
    fn evaluation_is_deterministic_and_resummable() {
        let samples = square_samples(6, 2);
        let net = build_network(&tiny_cfg(Mode::TwoD), 7).unwrap();
        let spacing = BTreeMap::new();
        let a = evaluate(&net, &samples, &spacing, 0.5, 4).unwrap();
        let b = evaluate(&net, &samples, &spacing, 0.5, 4).unwrap();
        assert_eq!(a.records.len(), samples.len());
        for (ra, rb) in a.records.iter().zip(&b.records) {
            assert_eq!(ra.iou, rb.iou);
            assert_eq!(ra.hd95, rb.hd95);
        }
        let mean_dice = a.records.iter().map(|r| r.dice).sum::<f64>() / a.records.len() as f64;
        assert!((a.per_slice.mean_dice - mean_dice).abs() < 1e-12);
    }

    #[test]
    fn ground_truth_predictions_score_perfectly() {
        let samples = square_samples(5, 2);
        let preds: Vec<Array2<bool>> =
            samples.iter().map(|s| s.target.mapv(|v| v > 0.5)).collect();
        let records = records_from_masks(&preds, &samples, &BTreeMap::new()).unwrap();
        for r in &records {
            assert_eq!(r.iou, 1.0);
            assert_eq!(r.dice, 1.0);
            assert_eq!(r.acc, 1.0);
            assert_eq!(r.hd95, Some(0.0));
        }
    }

    #[test]
    fn augmented_training_stays_deterministic() {
        let samples = square_samples(8, 2);
        let aug = AugmentConfig::default();
        let run = || {
            let mut net = build_network(&tiny_cfg(Mode::TwoD), 4).unwrap();
            pretrain_gtv(&mut net, &samples, &[], &fast_optim(2), Some(&aug), 4).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.checkpoint.params, b.checkpoint.params);
    }

    fn study_from_samples(id: &str, peak: f64) -> ProcessedStudy {
        let nz = 6;
        let (ny, nx) = (16, 16);
        let mut ct = Array3::zeros((nz, ny, nx));
        let mut pet = Array3::zeros((nz, ny, nx));
        let mut gtv = Array3::from_elem((nz, ny, nx), false);
        for z in 1..5 {
            for y in 4..12 {
                for x in 4..12 {
                    ct[[z, y, x]] = 180.0;
                    pet[[z, y, x]] = peak;
                    gtv[[z, y, x]] = true;
                }
            }
        }
        let igtv = gtv.clone();
        let meta = RoiMeta { volume_cc: 5.0, suv_max: 8.0, n_slices: 4, z_min: 1, z_max: 4 };
        ProcessedStudy {
            patient_id: id.into(),
            scanner: "sim-a".into(),
            spacing_mm: [1.0, 1.0, 2.0],
            ct,
            pet,
            gtv_mask: gtv,
            igtv_mask: igtv,
            gtv_meta: meta,
            igtv_meta: meta,
            suv_norm_max: 8.0,
        }
    }

    #[test]
    fn ablation_produces_four_controlled_rows() {
        // Eight patients so the default ratios yield one val and one test
        // patient after flooring.
        let studies: Vec<ProcessedStudy> =
            (0..8).map(|i| study_from_samples(&format!("p{i:03}"), 200.0)).collect();
        let ids: Vec<String> = studies.iter().map(|s| s.patient_id.clone()).collect();
        let split =
            crate::data::split::patient_split(&ids, crate::data::split::DEFAULT_RATIOS, 3)
                .unwrap();
        let spec = AblationSpec {
            network: tiny_cfg(Mode::TwoPointFiveD),
            pretrain: fast_optim(1),
            finetune: fast_optim(1),
            stop: EarlyStopPolicy { patience: 1 },
            seed: 3,
            ..AblationSpec::default()
        };
        let report = run_ablation(&studies, &split, &spec).unwrap();
        assert_eq!(report.rows.len(), 4);
        let names: Vec<&str> = report.rows.iter().map(|r| r.name.as_str()).collect();
        assert_eq!(names, ["2d", "2.5d", "2.5d+ft", "2.5d+ft+sim"]);
        assert_eq!(report.table.lines().count(), 5);
        let again = run_ablation(&studies, &split, &spec).unwrap();
        assert_eq!(report.table, again.table);
        for (a, b) in report.rows.iter().zip(&again.rows) {
            assert_eq!(a.per_slice.mean_dice, b.per_slice.mean_dice);
        }
    }
}
