//! Gradient-descent training in the three supported configurations:
//!
//! * `unsegmented`: CTC objective on label sequences only;
//! * `frame_wise`: classic LDCRF likelihood on per-frame labels;
//! * `pretrain_finetune`: frame-wise training on single-segment
//!   subsequences, then CTC training on the full sequences from those
//!   weights.

mod evaluate;
mod objective;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureConfig, Model, ModelParams};
use crate::ldcrf::{ldcrf_frame_loss, ldcrf_frame_objective};
use crate::seqdata::{Dataset, Sequence};

pub use evaluate::{
    align_frames, evaluate, kfold, predict_frames, remap_blanks, BlankPolicy, EvalReport, FoldMetrics, FoldResult,
    KFoldReport,
};
pub use objective::{ctc_ldcrf_loss, ctc_ldcrf_loss_and_grad, local_gradients, BatchObjective, GradMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    #[default]
    Unsegmented,
    FrameWise,
    PretrainFinetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub grad_mode: GradMode,
    pub learning_rate: f64,
    /// Epoch `e` steps with `learning_rate / (1 + lr_decay · e)`.
    pub lr_decay: f64,
    pub momentum: f64,
    /// Epochs of the main stage (the CTC stage for `pretrain_finetune`).
    pub epochs: usize,
    /// Frame-wise epochs on segment subsequences before the CTC stage; only
    /// used by `pretrain_finetune`.
    pub pretrain_epochs: usize,
    pub batch_size: usize,
    pub l2: f64,
    pub seed: u64,
    pub window: usize,
    pub hidden_per_label: usize,
    pub bias: bool,
    /// Fraction of the training sequences held out for early stopping;
    /// `0` disables it.
    pub validation_fraction: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Record wall-clock time in the report. Off by default so reports are
    /// reproducible byte for byte.
    pub record_timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Unsegmented,
            grad_mode: GradMode::Exact,
            learning_rate: 0.3,
            lr_decay: 0.02,
            momentum: 0.5,
            epochs: 100,
            pretrain_epochs: 20,
            batch_size: 8,
            l2: 0.1,
            seed: 0,
            window: 1,
            hidden_per_label: 2,
            bias: true,
            validation_fraction: 0.0,
            patience: 5,
            record_timing: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be positive");
        }
        if !(self.lr_decay >= 0.0 && self.lr_decay.is_finite()) {
            return fail("lr_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail("momentum must be in [0, 1)");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return fail("l2 must be non-negative");
        }
        if self.hidden_per_label == 0 {
            return fail("hidden_per_label must be positive");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return fail("validation_fraction must be in [0, 1)");
        }
        Ok(())
    }

    /// Checks that the dataset carries what the mode trains on.
    pub fn check_dataset(&self, dataset: &Dataset) -> Result<()> {
        let need_frames = matches!(self.mode, TrainMode::FrameWise | TrainMode::PretrainFinetune);
        let need_seq = matches!(self.mode, TrainMode::Unsegmented | TrainMode::PretrainFinetune);
        for seq in &dataset.sequences {
            if need_frames && seq.frame_labels.is_none() {
                return Err(Error::Missing(format!(
                    "mode {:?} needs frame labels; sequence {} has none",
                    self.mode, seq.id
                )));
            }
            if need_seq && seq.label_seq.is_none() {
                return Err(Error::Missing(format!(
                    "mode {:?} needs label sequences; sequence {} has none",
                    self.mode, seq.id
                )));
            }
            if self.mode == TrainMode::PretrainFinetune && dataset.segment_bounds(&seq.id).is_none() {
                return Err(Error::Missing(format!(
                    "pretrain_finetune needs segment boundaries; sequence {} has none",
                    seq.id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    FrameWise,
    Ctc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: Stage,
    /// Objective over the stage's training set after the epoch.
    pub loss: f64,
    /// Norm of the last full-batch-equivalent gradient step direction.
    pub grad_norm: f64,
    /// Sequences skipped for zero CTC probability during the epoch.
    pub skipped: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validation_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    pub early_stopped: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_clock_secs: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub evaluation: Option<EvalReport>,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub report: TrainReport,
}

#[derive(Debug, Clone, Copy)]
enum Objective {
    FrameWise,
    Ctc(GradMode),
}

impl Objective {
    fn stage(self) -> Stage {
        match self {
            Objective::FrameWise => Stage::FrameWise,
            Objective::Ctc(_) => Stage::Ctc,
        }
    }

    /// Data term only, summed over `batch`; returns (loss, grad, skipped).
    fn eval(self, batch: &[&Sequence], model: &Model) -> Result<(f64, ModelParams, usize)> {
        match self {
            Objective::FrameWise => {
                let (loss, grad) =
                    ldcrf_frame_objective(batch, &model.params, &model.map, &model.features, 0.0)?;
                Ok((loss, grad, 0))
            }
            Objective::Ctc(mode) => {
                let out = ctc_ldcrf_loss_and_grad(batch, &model.params, &model.map, &model.features, mode, 0.0)?;
                Ok((out.loss, out.grad, out.skipped.len()))
            }
        }
    }

    /// Data term only, without the gradient; returns (loss, skipped).
    fn loss(self, batch: &[&Sequence], model: &Model) -> Result<(f64, usize)> {
        match self {
            Objective::FrameWise => Ok((
                ldcrf_frame_loss(batch, &model.params, &model.map, &model.features, 0.0)?,
                0,
            )),
            Objective::Ctc(_) => {
                let (loss, skipped) = ctc_ldcrf_loss(batch, &model.params, &model.map, &model.features, 0.0)?;
                Ok((loss, skipped.len()))
            }
        }
    }
}

/// Builds the initial model for a dataset and config: θ uniform in
/// `[−0.1, 0.1]` from the config seed.
pub fn initial_model(dataset: &Dataset, config: &TrainConfig) -> Result<Model> {
    let features = FeatureConfig {
        window: config.window,
        input_dim: dataset.dim(),
        bias: config.bias,
    };
    Model::random(dataset.label_set.clone(), config.hidden_per_label, features, config.seed)
}

/// Trains a fresh model according to `config.mode`.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    config.check_dataset(dataset)?;
    if config.mode == TrainMode::PretrainFinetune {
        return pretrain_finetune(dataset, config);
    }
    let started = Instant::now();
    let mut model = initial_model(dataset, config)?;
    let mut report = TrainReport {
        config: config.clone(),
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0001);
    let objective = match config.mode {
        TrainMode::FrameWise => Objective::FrameWise,
        _ => Objective::Ctc(config.grad_mode),
    };
    run_stage(&mut model, dataset, objective, config.epochs, config, &mut rng, &mut report)?;
    if config.record_timing {
        report.wall_clock_secs = Some(started.elapsed().as_secs_f64());
    }
    Ok(TrainOutcome { model, report })
}

/// Stage 1: frame-wise training on segment subsequences for
/// `pretrain_epochs`. Stage 2: CTC training on the full sequences for
/// `epochs`, starting from the stage-1 weights.
pub fn pretrain_finetune(dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let mut cfg = config.clone();
    cfg.mode = TrainMode::PretrainFinetune;
    cfg.check_dataset(dataset)?;
    let started = Instant::now();
    let segments = dataset.split_segments()?;
    let mut model = initial_model(dataset, &cfg)?;
    let mut report = TrainReport {
        config: cfg.clone(),
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0001);
    run_stage(&mut model, &segments, Objective::FrameWise, cfg.pretrain_epochs, &cfg, &mut rng, &mut report)?;
    report.early_stopped = false;
    run_stage(&mut model, dataset, Objective::Ctc(cfg.grad_mode), cfg.epochs, &cfg, &mut rng, &mut report)?;
    if cfg.record_timing {
        report.wall_clock_secs = Some(started.elapsed().as_secs_f64());
    }
    Ok(TrainOutcome { model, report })
}

fn grad_norm(g: &ModelParams) -> f64 {
    g.norm_sq().sqrt()
}

/// Total objective (data + λ‖θ‖²) over a sequence set.
fn full_objective(seqs: &[&Sequence], model: &Model, objective: Objective, l2: f64) -> Result<(f64, usize)> {
    if seqs.is_empty() {
        return Ok((l2 * model.params.norm_sq(), 0));
    }
    let (loss, skipped) = objective.loss(seqs, model)?;
    Ok((loss + l2 * model.params.norm_sq(), skipped))
}

/// Mini-batch gradient descent with momentum.
///
/// Each step uses `(1/|B|) Σ_B ∇ℓ_i + (2λ/N) θ`, an unbiased estimate of
/// `∇J / N`, so the learning rate is on a per-sequence scale.
fn run_stage(
    model: &mut Model,
    dataset: &Dataset,
    objective: Objective,
    epochs: usize,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
    report: &mut TrainReport,
) -> Result<()> {
    if epochs == 0 {
        return Ok(());
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut validation: Vec<usize> = Vec::new();
    if config.validation_fraction > 0.0 {
        order.shuffle(rng);
        let n_val = ((dataset.len() as f64) * config.validation_fraction).round() as usize;
        let n_val = n_val.min(dataset.len().saturating_sub(1));
        validation = order.split_off(dataset.len() - n_val);
        validation.sort_unstable();
        order.sort_unstable();
    }
    let train_refs: Vec<&Sequence> = order.iter().map(|&i| &dataset.sequences[i]).collect();
    let val_refs: Vec<&Sequence> = validation.iter().map(|&i| &dataset.sequences[i]).collect();
    let n = train_refs.len() as f64;

    let mut velocity = ModelParams::zeros(model.params.num_states(), model.params.obs_dim());
    let mut best: Option<(f64, ModelParams)> = None;
    let mut since_best = 0;
    let mut batch_order: Vec<usize> = (0..train_refs.len()).collect();

    for epoch in 0..epochs {
        batch_order.shuffle(rng);
        let step = config.learning_rate / (1.0 + config.lr_decay * epoch as f64);
        let mut skipped = 0;
        let mut last_norm = 0.0;
        for chunk in batch_order.chunks(config.batch_size) {
            let batch: Vec<&Sequence> = chunk.iter().map(|&i| train_refs[i]).collect();
            let (_, mut grad, skip) = match objective.eval(&batch, model) {
                Ok(v) => v,
                Err(Error::InvalidInput(msg)) => {
                    log::warn!("epoch {epoch}: batch skipped: {msg}");
                    skipped += batch.len();
                    continue;
                }
                Err(Error::NonFinite(what)) => {
                    log::error!("epoch {epoch}: non-finite {what}");
                    return Err(Error::Diverged {
                        epoch,
                        report: Box::new(report.clone()),
                    });
                }
                Err(e) => return Err(e),
            };
            skipped += skip;
            let used = (batch.len() - skip).max(1) as f64;
            grad.state_weights.mapv_inplace(|v| v / used);
            grad.trans_weights.mapv_inplace(|v| v / used);
            grad.add_scaled(2.0 * config.l2 / n, &model.params);
            last_norm = grad_norm(&grad);

            velocity.state_weights.mapv_inplace(|v| v * config.momentum);
            velocity.trans_weights.mapv_inplace(|v| v * config.momentum);
            velocity.add_scaled(-step, &grad);
            model.params.add_scaled(1.0, &velocity);
        }

        let loss = match full_objective(&train_refs, model, objective, config.l2) {
            Ok((loss, _)) => loss,
            Err(Error::NonFinite(_)) => f64::NAN,
            Err(e) => return Err(e),
        };
        let validation_loss = if val_refs.is_empty() {
            None
        } else {
            match full_objective(&val_refs, model, objective, 0.0) {
                Ok((v, _)) => Some(v),
                Err(Error::NonFinite(_)) => Some(f64::NAN),
                Err(e) => return Err(e),
            }
        };
        report.epochs.push(EpochRecord {
            stage: objective.stage(),
            loss,
            grad_norm: last_norm,
            skipped,
            validation_loss,
        });
        log::info!("epoch {epoch}: loss {loss:.6} |g| {last_norm:.4e} skipped {skipped}");

        if !loss.is_finite() || !model.params.is_finite() {
            return Err(Error::Diverged {
                epoch,
                report: Box::new(report.clone()),
            });
        }

        if let Some(v) = validation_loss {
            match &best {
                Some((b, _)) if v >= *b => {
                    since_best += 1;
                    if since_best >= config.patience {
                        report.early_stopped = true;
                        break;
                    }
                }
                _ => {
                    best = Some((v, model.params.clone()));
                    since_best = 0;
                }
            }
        }
    }
    if let Some((_, params)) = best {
        model.params = params;
    }
    Ok(())
}
