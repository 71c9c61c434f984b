//! Finite-difference checks of the analytic gradients on small random
//! instances.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ctc::min_frames;
use crate::error::{Error, Result};
use crate::features::{FeatureConfig, HiddenStateMap, ModelParams};
use crate::ldcrf::ldcrf_frame_objective;
use crate::seqdata::{LabelId, Sequence};
use crate::trainer::{ctc_ldcrf_loss_and_grad, GradMode};

/// Denominator floor of [`relative_error`].
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Objective {
    /// CTC on top of the LDCRF label marginals.
    Composite(GradMode),
    /// Frame-wise LDCRF likelihood.
    FrameWise,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub trials: usize,
    pub seed: u64,
    pub step: f64,
    pub objective: Objective,
    pub l2: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            trials: 100,
            seed: 1,
            step: 1e-5,
            objective: Objective::Composite(GradMode::Exact),
            l2: 1e-2,
        }
    }
}

/// A random problem: one or two sequences plus parameters.
#[derive(Debug, Clone)]
pub struct Instance {
    pub map: HiddenStateMap,
    pub features: FeatureConfig,
    pub params: ModelParams,
    pub sequences: Vec<Sequence>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: usize,
    pub frames: usize,
    pub states: usize,
    pub obs_dim: usize,
    pub max_relative_error: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub trials: Vec<TrialResult>,
    pub max_relative_error: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_relative_error < tol
    }
}

/// `|a − n| / max(|a|, |n|, 1e-4)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Central differences of `f` at `theta`, one coordinate at a time.
pub fn central_difference(
    theta: &[f64],
    step: f64,
    mut f: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<Vec<f64>> {
    let mut x = theta.to_vec();
    let mut out = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        x[i] = theta[i] + step;
        let plus = f(&x)?;
        x[i] = theta[i] - step;
        let minus = f(&x)?;
        x[i] = theta[i];
        out.push((plus - minus) / (2.0 * step));
    }
    Ok(out)
}

const SHAPES: [(usize, usize); 4] = [(2, 1), (3, 1), (4, 1), (2, 2)];

/// Draws a problem with `T ≤ 6`, `|H| ≤ 4` and `D ≤ 4`. Every sequence has
/// frame labels and a label sequence that fits its length.
pub fn random_instance(rng: &mut impl Rng) -> Instance {
    let (labels, h) = SHAPES[rng.random_range(0..SHAPES.len())];
    let features = if rng.random_bool(0.5) {
        FeatureConfig {
            window: 0,
            input_dim: rng.random_range(1..=3),
            bias: true,
        }
    } else {
        FeatureConfig {
            window: 1,
            input_dim: 1,
            bias: rng.random_bool(0.5),
        }
    };
    let map = HiddenStateMap::new(labels, h).expect("valid shape");
    let states = map.num_states();
    let d = features.obs_dim();
    let theta: Vec<f64> = (0..states * d + states * states)
        .map(|_| rng.random_range(-1.0..=1.0))
        .collect();
    let params = ModelParams::from_flat(states, d, &theta).expect("length matches");

    let classes = labels - 1;
    let n_seq = rng.random_range(1..=2);
    let sequences = (0..n_seq)
        .map(|k| {
            let t_len = rng.random_range(2..=6);
            let frames = Array2::from_shape_fn((t_len, features.input_dim), |_| rng.random_range(-1.0..=1.0));
            let frame_labels: Vec<LabelId> = (0..t_len).map(|_| rng.random_range(0..classes)).collect();
            let z = loop {
                let m = rng.random_range(1..=t_len.min(3));
                let z: Vec<LabelId> = (0..m).map(|_| rng.random_range(0..classes)).collect();
                if min_frames(&z) <= t_len {
                    break z;
                }
            };
            Sequence::new(format!("gc-{k}"), frames)
                .with_frame_labels(frame_labels)
                .with_label_seq(z)
        })
        .collect();
    Instance {
        map,
        features,
        params,
        sequences,
    }
}

/// Loss and analytic gradient of `objective` at `params`.
pub fn evaluate(
    instance: &Instance,
    params: &ModelParams,
    objective: Objective,
    l2: f64,
) -> Result<(f64, ModelParams)> {
    let batch: Vec<&Sequence> = instance.sequences.iter().collect();
    match objective {
        Objective::Composite(mode) => {
            let out = ctc_ldcrf_loss_and_grad(&batch, params, &instance.map, &instance.features, mode, l2)?;
            if !out.skipped.is_empty() {
                return Err(Error::InvalidInput(format!("skipped sequences {:?}", out.skipped)));
            }
            Ok((out.loss, out.grad))
        }
        Objective::FrameWise => ldcrf_frame_objective(&batch, params, &instance.map, &instance.features, l2),
    }
}

/// Largest coordinate-wise relative error between the analytic gradient and
/// central differences of the loss.
pub fn check_instance(instance: &Instance, objective: Objective, l2: f64, step: f64) -> Result<f64> {
    let states = instance.params.num_states();
    let d = instance.params.obs_dim();
    let (_, grad) = evaluate(instance, &instance.params, objective, l2)?;
    let numeric = central_difference(&instance.params.flatten(), step, |theta| {
        let p = ModelParams::from_flat(states, d, theta)?;
        Ok(evaluate(instance, &p, objective, l2)?.0)
    })?;
    Ok(grad
        .flatten()
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max))
}

pub fn run(config: &GradCheckConfig) -> Result<GradCheckReport> {
    if !(config.step > 0.0 && config.step.is_finite()) {
        return Err(Error::Config(format!("step must be positive, got {}", config.step)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trials = Vec::with_capacity(config.trials);
    for trial in 0..config.trials {
        let instance = random_instance(&mut rng);
        let err = check_instance(&instance, config.objective, config.l2, config.step)?;
        trials.push(TrialResult {
            trial,
            frames: instance.sequences.iter().map(Sequence::len).max().unwrap_or(0),
            states: instance.map.num_states(),
            obs_dim: instance.features.obs_dim(),
            max_relative_error: err,
        });
    }
    let max_relative_error = trials.iter().map(|t| t.max_relative_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        trials,
        max_relative_error,
    })
}

/// The composite CTC-LDCRF check in exact mode.
pub fn check_composite_gradient(trials: usize, seed: u64) -> Result<GradCheckReport> {
    run(&GradCheckConfig {
        trials,
        seed,
        ..GradCheckConfig::default()
    })
}
