//! Windowed observation features, the hidden-state layout, and the flat
//! parameter vector θ shared by every model variant.
//!
//! State features are linear: hidden state `s` scores frame `j` with
//! `state_weights[s] · obs_j`, where `obs_j` concatenates frames `j−w..=j+w`
//! (zero outside the sequence) and an optional trailing constant 1. Pairwise
//! features are position-independent indicators, one weight per ordered
//! state pair `(previous, next)`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqdata::{LabelId, LabelSet, Sequence};

/// Half-width of the initialization interval for θ.
pub const INIT_RANGE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub window: usize,
    pub input_dim: usize,
    pub bias: bool,
}

impl FeatureConfig {
    pub fn new(window: usize, input_dim: usize) -> Self {
        Self {
            window,
            input_dim,
            bias: true,
        }
    }

    /// `D = d·(2w + 1) + bias`.
    pub fn obs_dim(&self) -> usize {
        self.input_dim * (2 * self.window + 1) + usize::from(self.bias)
    }
}

/// Windowed observation vector at frame `j`.
pub fn windowed_obs(frames: ArrayView2<'_, f64>, j: usize, config: &FeatureConfig) -> Array1<f64> {
    let mut out = Array1::zeros(config.obs_dim());
    fill_windowed_obs(frames, j, config, out.as_slice_mut().expect("contiguous"));
    out
}

fn fill_windowed_obs(frames: ArrayView2<'_, f64>, j: usize, config: &FeatureConfig, out: &mut [f64]) {
    let d = config.input_dim;
    let t_len = frames.nrows() as isize;
    let w = config.window as isize;
    for (slot, offset) in (-w..=w).enumerate() {
        let pos = j as isize + offset;
        let dst = &mut out[slot * d..(slot + 1) * d];
        if (0..t_len).contains(&pos) {
            for (o, v) in dst.iter_mut().zip(frames.row(pos as usize)) {
                *o = *v;
            }
        } else {
            dst.fill(0.0);
        }
    }
    if config.bias {
        out[out.len() - 1] = 1.0;
    }
}

/// All windowed observations of a sequence as a `T × D` matrix.
pub fn observation_matrix(seq: &Sequence, config: &FeatureConfig) -> Result<Array2<f64>> {
    if seq.dim() != config.input_dim {
        return Err(Error::DimensionMismatch {
            expected: config.input_dim,
            found: seq.dim(),
        });
    }
    let mut obs = Array2::zeros((seq.len(), config.obs_dim()));
    for (j, mut row) in obs.rows_mut().into_iter().enumerate() {
        fill_windowed_obs(
            seq.frames.view(),
            j,
            config,
            row.as_slice_mut().expect("contiguous"),
        );
    }
    Ok(obs)
}

/// Contiguous hidden-state blocks, `h` states per label (blank included).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HiddenStateMap {
    pub states_per_label: usize,
    pub labels: usize,
}

impl HiddenStateMap {
    pub fn new(labels: usize, states_per_label: usize) -> Result<Self> {
        if labels == 0 || states_per_label == 0 {
            return Err(Error::Config(
                "hidden-state map needs at least one label and one state per label".into(),
            ));
        }
        Ok(Self {
            states_per_label,
            labels,
        })
    }

    pub fn num_states(&self) -> usize {
        self.labels * self.states_per_label
    }

    pub fn block(&self, label: LabelId) -> Range<usize> {
        label * self.states_per_label..(label + 1) * self.states_per_label
    }

    pub fn label_of(&self, state: usize) -> LabelId {
        state / self.states_per_label
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// `|ℋ| × D`.
    pub state_weights: Array2<f64>,
    /// `|ℋ| × |ℋ|`, indexed `[previous][next]`.
    pub trans_weights: Array2<f64>,
}

impl ModelParams {
    pub fn zeros(states: usize, obs_dim: usize) -> Self {
        Self {
            state_weights: Array2::zeros((states, obs_dim)),
            trans_weights: Array2::zeros((states, states)),
        }
    }

    /// Uniform draws in `[−0.1, 0.1]`.
    pub fn random(states: usize, obs_dim: usize, rng: &mut impl Rng) -> Self {
        let mut draw = |_| rng.random_range(-INIT_RANGE..=INIT_RANGE);
        let state_weights = Array2::from_shape_fn((states, obs_dim), &mut draw);
        let trans_weights = Array2::from_shape_fn((states, states), &mut draw);
        Self {
            state_weights,
            trans_weights,
        }
    }

    pub fn num_states(&self) -> usize {
        self.trans_weights.nrows()
    }

    pub fn obs_dim(&self) -> usize {
        self.state_weights.ncols()
    }

    /// `|ℋ|·D + |ℋ|²`.
    pub fn len(&self) -> usize {
        self.state_weights.len() + self.trans_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// State weights row-major, then transition weights row-major.
    pub fn flatten(&self) -> Vec<f64> {
        self.state_weights
            .iter()
            .chain(self.trans_weights.iter())
            .copied()
            .collect()
    }

    pub fn from_flat(states: usize, obs_dim: usize, theta: &[f64]) -> Result<Self> {
        let n_state = states * obs_dim;
        let expected = n_state + states * states;
        if theta.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                found: theta.len(),
            });
        }
        Ok(Self {
            state_weights: Array2::from_shape_vec((states, obs_dim), theta[..n_state].to_vec())
                .expect("length checked"),
            trans_weights: Array2::from_shape_vec((states, states), theta[n_state..].to_vec())
                .expect("length checked"),
        })
    }

    pub fn norm_sq(&self) -> f64 {
        self.state_weights.iter().chain(self.trans_weights.iter()).map(|v| v * v).sum()
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, scale: f64, other: &ModelParams) {
        self.state_weights.scaled_add(scale, &other.state_weights);
        self.trans_weights.scaled_add(scale, &other.trans_weights);
    }

    pub fn is_finite(&self) -> bool {
        self.state_weights.iter().chain(self.trans_weights.iter()).all(|v| v.is_finite())
    }
}

/// `T × |ℋ|` linear state scores; entry `(j, s)` is `state_weights[s] · obs_j`.
pub fn node_scores(seq: &Sequence, params: &ModelParams, config: &FeatureConfig) -> Result<Array2<f64>> {
    if params.obs_dim() != config.obs_dim() {
        return Err(Error::DimensionMismatch {
            expected: config.obs_dim(),
            found: params.obs_dim(),
        });
    }
    let obs = observation_matrix(seq, config)?;
    Ok(node_scores_from_obs(&obs, params))
}

pub(crate) fn node_scores_from_obs(obs: &Array2<f64>, params: &ModelParams) -> Array2<f64> {
    obs.dot(&params.state_weights.t())
}

/// A complete model: labels, hidden-state layout, feature layout and θ.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub labels: LabelSet,
    pub map: HiddenStateMap,
    pub features: FeatureConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn zeros(labels: LabelSet, states_per_label: usize, features: FeatureConfig) -> Result<Self> {
        let map = HiddenStateMap::new(labels.len(), states_per_label)?;
        let params = ModelParams::zeros(map.num_states(), features.obs_dim());
        Ok(Self {
            labels,
            map,
            features,
            params,
        })
    }

    pub fn random(
        labels: LabelSet,
        states_per_label: usize,
        features: FeatureConfig,
        seed: u64,
    ) -> Result<Self> {
        let mut model = Self::zeros(labels, states_per_label, features)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        model.params = ModelParams::random(model.map.num_states(), features.obs_dim(), &mut rng);
        Ok(model)
    }

    pub fn node_scores(&self, seq: &Sequence) -> Result<Array2<f64>> {
        node_scores(seq, &self.params, &self.features)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            labels: self.labels.class_names().to_vec(),
            hidden_per_label: self.map.states_per_label,
            window: self.features.window,
            dim: self.features.input_dim,
            bias: self.features.bias,
            theta: self.params.flatten(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let labels = LabelSet::new(ckpt.labels.iter().cloned())?;
        let features = FeatureConfig {
            window: ckpt.window,
            input_dim: ckpt.dim,
            bias: ckpt.bias,
        };
        let map = HiddenStateMap::new(labels.len(), ckpt.hidden_per_label)?;
        let params = ModelParams::from_flat(map.num_states(), features.obs_dim(), &ckpt.theta)?;
        Ok(Self {
            labels,
            map,
            features,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io_err = |source| Error::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
        serde_json::to_writer_pretty(&mut w, &self.to_checkpoint())?;
        w.write_all(b"\n").map_err(io_err)?;
        w.flush().map_err(io_err)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let ckpt: Checkpoint = serde_json::from_reader(BufReader::new(file))?;
        Self::from_checkpoint(&ckpt)
    }
}

/// On-disk model. Label names exclude the blank, which is implied last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub labels: Vec<String>,
    pub hidden_per_label: usize,
    pub window: usize,
    pub dim: usize,
    pub bias: bool,
    pub theta: Vec<f64>,
}
