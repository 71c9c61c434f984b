//! The latent-dynamic layer: hidden-state posteriors regrouped into per-frame
//! label probabilities, and the frame-wise LDCRF likelihood. With one hidden
//! state per label this is an ordinary linear-chain CRF.

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;

use crate::chain::{forward_backward, forward_backward_masked, node_posteriors, viterbi, ChainPosteriors};
use crate::error::{Error, Result};
use crate::features::{node_scores_from_obs, observation_matrix, FeatureConfig, HiddenStateMap, Model, ModelParams};
use crate::math::argmax;
use crate::seqdata::{LabelId, Sequence};

/// `q[j, a] = Σ_{s ∈ block(a)} μ_j(s)`, a `T × |labels|` table.
pub fn frame_label_marginals(posteriors: &ChainPosteriors, map: &HiddenStateMap) -> Array2<f64> {
    block_sums(posteriors.node_marginals.view(), map)
}

pub(crate) fn block_sums(node: ArrayView2<'_, f64>, map: &HiddenStateMap) -> Array2<f64> {
    Array2::from_shape_fn((node.nrows(), map.labels), |(j, a)| {
        map.block(a).map(|s| node[[j, s]]).sum()
    })
}

fn masked_scores(scores: &Array2<f64>, labels: &[LabelId], map: &HiddenStateMap) -> Array2<f64> {
    let mut masked = scores.clone();
    for (j, mut row) in masked.rows_mut().into_iter().enumerate() {
        let keep = map.block(labels[j]);
        for (s, v) in row.iter_mut().enumerate() {
            if !keep.contains(&s) {
                *v = f64::NEG_INFINITY;
            }
        }
    }
    masked
}

fn frame_labels(seq: &Sequence) -> Result<&[LabelId]> {
    seq.frame_labels
        .as_deref()
        .ok_or_else(|| Error::Missing(format!("sequence {} has no frame labels", seq.id)))
}

/// `log P(y | x)`: the chain restricted to the labels' blocks, minus the
/// unrestricted `log Z`.
pub fn sequence_label_likelihood(
    seq: &Sequence,
    params: &ModelParams,
    map: &HiddenStateMap,
    config: &FeatureConfig,
) -> Result<f64> {
    let labels = frame_labels(seq)?;
    let obs = observation_matrix(seq, config)?;
    let scores = node_scores_from_obs(&obs, params);
    let trans = params.trans_weights.view();
    let free = crate::chain::log_partition(scores.view(), trans)?;
    let restricted = crate::chain::log_partition(masked_scores(&scores, labels, map).view(), trans)?;
    Ok(restricted - free)
}

/// Negative frame-wise log-likelihood of one sequence and its gradient
/// `E_free[F] − E_restricted[F]`.
fn frame_nll_and_grad(
    seq: &Sequence,
    params: &ModelParams,
    map: &HiddenStateMap,
    config: &FeatureConfig,
) -> Result<(f64, ModelParams)> {
    let labels = frame_labels(seq)?;
    if labels.iter().any(|&a| a >= map.labels) {
        return Err(Error::InvalidSequence {
            id: seq.id.clone(),
            message: "frame label outside the model's label set".into(),
        });
    }
    let obs = observation_matrix(seq, config)?;
    let scores = node_scores_from_obs(&obs, params);
    let trans = params.trans_weights.view();
    let free = forward_backward(scores.view(), trans)?;
    let restricted = forward_backward_masked(masked_scores(&scores, labels, map).view(), trans)?;

    let nll = free.log_z - restricted.log_z;
    let node_diff = &free.node_marginals - &restricted.node_marginals;
    let grad = ModelParams {
        state_weights: node_diff.t().dot(&obs),
        trans_weights: free.edge_totals() - restricted.edge_totals(),
    };
    Ok((nll, grad))
}

/// `−Σ log P(y|x) + λ‖θ‖²` without the gradient.
pub fn ldcrf_frame_loss(
    batch: &[&Sequence],
    params: &ModelParams,
    map: &HiddenStateMap,
    config: &FeatureConfig,
    l2: f64,
) -> Result<f64> {
    let parts: Vec<Result<f64>> = batch
        .par_iter()
        .map(|seq| sequence_label_likelihood(seq, params, map, config))
        .collect();
    let mut loss = l2 * params.norm_sq();
    for part in parts {
        loss -= part?;
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("frame-wise loss"));
    }
    Ok(loss)
}

/// `−Σ log P(y|x) + λ‖θ‖²` over a batch of frame-labelled sequences, with
/// its exact gradient. Per-sequence terms are summed in batch order.
pub fn ldcrf_frame_objective(
    batch: &[&Sequence],
    params: &ModelParams,
    map: &HiddenStateMap,
    config: &FeatureConfig,
    l2: f64,
) -> Result<(f64, ModelParams)> {
    let parts: Vec<Result<(f64, ModelParams)>> = batch
        .par_iter()
        .map(|seq| frame_nll_and_grad(seq, params, map, config))
        .collect();

    let mut loss = l2 * params.norm_sq();
    let mut grad = ModelParams::zeros(params.num_states(), params.obs_dim());
    grad.add_scaled(2.0 * l2, params);
    for part in parts {
        let (l, g) = part?;
        loss += l;
        grad.add_scaled(1.0, &g);
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("frame-wise loss"));
    }
    Ok((loss, grad))
}

impl Model {
    pub fn posteriors(&self, seq: &Sequence) -> Result<ChainPosteriors> {
        let scores = self.node_scores(seq)?;
        forward_backward(scores.view(), self.params.trans_weights.view())
    }

    /// Per-frame label distribution, blank included as the last column.
    pub fn label_marginals(&self, seq: &Sequence) -> Result<Array2<f64>> {
        let scores = self.node_scores(seq)?;
        let post = node_posteriors(scores.view(), self.params.trans_weights.view())?;
        Ok(frame_label_marginals(&post, &self.map))
    }

    /// Per-frame argmax of the label marginals (lower label wins ties). May
    /// return the blank id.
    pub fn decode_frames(&self, seq: &Sequence) -> Result<Vec<LabelId>> {
        let q = self.label_marginals(seq)?;
        Ok(decode_marginals(q.view()))
    }

    /// Labels of the single best hidden path.
    pub fn decode_viterbi(&self, seq: &Sequence) -> Result<Vec<LabelId>> {
        let scores = self.node_scores(seq)?;
        let (path, _) = viterbi(scores.view(), self.params.trans_weights.view());
        Ok(path.into_iter().map(|s| self.map.label_of(s)).collect())
    }
}

/// Row-wise argmax of a marginal table.
pub fn decode_marginals(q: ArrayView2<'_, f64>) -> Vec<LabelId> {
    q.rows()
        .into_iter()
        .map(|row| argmax(row.as_slice().expect("standard layout")))
        .collect()
}
