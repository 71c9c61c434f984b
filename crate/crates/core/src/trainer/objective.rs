//! The composite CTC-LDCRF objective `J = −Σ log P(z | x) + λ‖θ‖²`.
//!
//! Per sequence the CTC layer supplies `e[j, a] = ∂ log P(z|x) / ∂ q[j, a]`.
//! Since `q[j, a]` sums the node marginals of label `a`'s block,
//! `∂J/∂μ_j(s) = −e[j, label(s)]`. That upstream table is pushed into the
//! node scores and transition weights in one of two ways, see [`GradMode`].

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chain::{forward_backward, node_posteriors, posterior_adjoint, ChainPosteriors};
use crate::ctc::{ctc_error_table, ctc_forward_backward};
use crate::error::{Error, Result};
use crate::features::{node_scores_from_obs, observation_matrix, FeatureConfig, HiddenStateMap, ModelParams};
use crate::ldcrf::block_sums;
use crate::seqdata::{LabelId, Sequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradMode {
    /// Exact reverse-mode derivative through forward-backward.
    #[default]
    Exact,
    /// Per-frame softmax Jacobian of the node marginals, ignoring coupling
    /// between positions. Transition weights get the analogous treatment on
    /// the edge marginals. Agrees with `Exact` when transitions are zero.
    #[serde(rename = "local_eq8")]
    Local,
}

/// Loss and gradient summed over the usable sequences of a batch.
#[derive(Debug, Clone)]
pub struct BatchObjective {
    pub loss: f64,
    pub grad: ModelParams,
    /// Sequences that contributed.
    pub used: usize,
    /// Ids of sequences skipped because `P(z | x)` was zero or `z` cannot
    /// fit in the frames.
    pub skipped: Vec<String>,
}

enum SeqOutcome {
    Used(f64, ModelParams),
    Skipped(String),
}

/// Composite loss and gradient over a batch of sequences with label
/// sequences. Infeasible or zero-probability sequences are skipped with a
/// warning; a batch in which every sequence is skipped is an error.
pub fn ctc_ldcrf_loss_and_grad(
    batch: &[&Sequence],
    params: &ModelParams,
    map: &HiddenStateMap,
    features: &FeatureConfig,
    grad_mode: GradMode,
    l2: f64,
) -> Result<BatchObjective> {
    let outcomes: Vec<Result<SeqOutcome>> = batch
        .par_iter()
        .map(|seq| sequence_term(seq, params, map, features, grad_mode))
        .collect();

    let mut out = BatchObjective {
        loss: l2 * params.norm_sq(),
        grad: ModelParams::zeros(params.num_states(), params.obs_dim()),
        used: 0,
        skipped: Vec::new(),
    };
    out.grad.add_scaled(2.0 * l2, params);
    for outcome in outcomes {
        match outcome? {
            SeqOutcome::Used(loss, grad) => {
                out.loss += loss;
                out.grad.add_scaled(1.0, &grad);
                out.used += 1;
            }
            SeqOutcome::Skipped(id) => out.skipped.push(id),
        }
    }
    if out.used == 0 && !batch.is_empty() {
        return Err(Error::InvalidInput(
            "every sequence in the batch has zero CTC probability".into(),
        ));
    }
    Ok(out)
}

/// The composite loss alone, with the ids of skipped sequences.
pub fn ctc_ldcrf_loss(
    batch: &[&Sequence],
    params: &ModelParams,
    map: &HiddenStateMap,
    features: &FeatureConfig,
    l2: f64,
) -> Result<(f64, Vec<String>)> {
    let outcomes: Vec<Result<Option<f64>>> = batch
        .par_iter()
        .map(|seq| {
            let z = target(seq)?;
            let obs = observation_matrix(seq, features)?;
            let scores = node_scores_from_obs(&obs, params);
            let post = node_posteriors(scores.view(), params.trans_weights.view())?;
            let q = block_sums(post.node_marginals.view(), map);
            match ctc_forward_backward(q.view(), z, map.labels - 1) {
                Ok(t) if t.log_prob.is_finite() => Ok(Some(-t.log_prob)),
                Ok(_) | Err(Error::Infeasible { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect();
    let mut loss = l2 * params.norm_sq();
    let mut skipped = Vec::new();
    for (seq, outcome) in batch.iter().zip(outcomes) {
        match outcome? {
            Some(l) => loss += l,
            None => skipped.push(seq.id.clone()),
        }
    }
    Ok((loss, skipped))
}

fn target(seq: &Sequence) -> Result<&[LabelId]> {
    seq.label_seq
        .as_deref()
        .ok_or_else(|| Error::Missing(format!("sequence {} has no label sequence", seq.id)))
}

fn sequence_term(
    seq: &Sequence,
    params: &ModelParams,
    map: &HiddenStateMap,
    features: &FeatureConfig,
    grad_mode: GradMode,
) -> Result<SeqOutcome> {
    let z = target(seq)?;
    let blank: LabelId = map.labels - 1;
    let obs = observation_matrix(seq, features)?;
    let scores = node_scores_from_obs(&obs, params);
    let trans = params.trans_weights.view();
    let post = forward_backward(scores.view(), trans)?;
    let q = block_sums(post.node_marginals.view(), map);

    let tables = match ctc_forward_backward(q.view(), z, blank) {
        Ok(t) => t,
        Err(Error::Infeasible { .. }) => {
            log::warn!("skipping {}: label sequence cannot fit in {} frames", seq.id, seq.len());
            return Ok(SeqOutcome::Skipped(seq.id.clone()));
        }
        Err(e) => return Err(e),
    };
    if !tables.log_prob.is_finite() {
        log::warn!("skipping {}: CTC probability underflowed", seq.id);
        return Ok(SeqOutcome::Skipped(seq.id.clone()));
    }
    let errors = ctc_error_table(&tables, q.view())?;
    let upstream = Array2::from_shape_fn(scores.dim(), |(j, s)| -errors[[j, map.label_of(s)]]);

    let (grad_scores, grad_trans) = match grad_mode {
        GradMode::Exact => posterior_adjoint(&post, upstream.view())?,
        GradMode::Local => local_gradients(&post, upstream.view()),
    };
    let grad = ModelParams {
        state_weights: grad_scores.t().dot(&obs),
        trans_weights: grad_trans,
    };
    Ok(SeqOutcome::Used(-tables.log_prob, grad))
}

/// Per-position softmax Jacobians applied to the upstream table.
///
/// Node scores: `Σ_a g_j(a) μ_j(a) (δ_{a,k} − μ_j(k)) = μ_j(k)(g_j(k) − ⟨g_j⟩)`.
/// Transitions: the edge marginal `ξ_j(p, s)` receives upstream `g_{j+1}(s)`,
/// giving `Σ_j ξ_j(p, s)(g_{j+1}(s) − ⟨g_{j+1}⟩)`.
pub fn local_gradients(post: &ChainPosteriors, upstream: ArrayView2<'_, f64>) -> (Array2<f64>, Array2<f64>) {
    let mu = &post.node_marginals;
    let (t_len, states) = mu.dim();
    let mean: Vec<f64> = (0..t_len)
        .map(|j| (0..states).map(|a| upstream[[j, a]] * mu[[j, a]]).sum())
        .collect();
    let grad_scores = Array2::from_shape_fn((t_len, states), |(j, k)| mu[[j, k]] * (upstream[[j, k]] - mean[j]));
    let mut grad_trans = Array2::zeros((states, states));
    for j in 0..t_len.saturating_sub(1) {
        for p in 0..states {
            for s in 0..states {
                grad_trans[[p, s]] += post.edge_marginals[[j, p, s]] * (upstream[[j + 1, s]] - mean[j + 1]);
            }
        }
    }
    (grad_scores, grad_trans)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(rng: &mut impl Rng, t_len: usize) -> (Sequence, ModelParams, HiddenStateMap, FeatureConfig) {
        let map = HiddenStateMap::new(3, 2).unwrap();
        let features = FeatureConfig::new(1, 1);
        let frames = Array2::from_shape_fn((t_len, 1), |_| rng.random_range(-1.0..1.0));
        let seq = Sequence::new("s", frames).with_label_seq(vec![0, 1]);
        let mut params = ModelParams::random(6, features.obs_dim(), rng);
        params.state_weights.mapv_inplace(|v| v * 10.0);
        (seq, params, map, features)
    }

    #[test]
    fn missing_label_seq_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (mut seq, params, map, features) = setup(&mut rng, 4);
        seq.label_seq = None;
        let r = ctc_ldcrf_loss_and_grad(&[&seq], &params, &map, &features, GradMode::Exact, 0.0);
        assert!(matches!(r, Err(Error::Missing(_))));
    }

    #[test]
    fn infeasible_batch_fails_but_mixed_batch_skips() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (seq, params, map, features) = setup(&mut rng, 4);
        let short = Sequence::new("short", array![[0.1]]).with_label_seq(vec![0, 1]);
        assert!(ctc_ldcrf_loss_and_grad(&[&short], &params, &map, &features, GradMode::Exact, 0.0).is_err());
        let out = ctc_ldcrf_loss_and_grad(&[&seq, &short], &params, &map, &features, GradMode::Exact, 0.0).unwrap();
        assert_eq!(out.used, 1);
        assert_eq!(out.skipped, vec!["short".to_string()]);
    }

    #[test]
    fn certain_target_leaves_only_regularizer() {
        // One label owning all mass except a blank it can never reach: with a
        // single real label and T = 1 the only alignment is that label, and
        // if q puts probability 1 on it the data gradient vanishes.
        let map = HiddenStateMap::new(2, 1).unwrap();
        let features = FeatureConfig::new(0, 1);
        let mut params = ModelParams::zeros(2, features.obs_dim());
        params.state_weights[[0, 1]] = 800.0; // bias for label 0
        params.state_weights[[1, 0]] = 0.3;
        let seq = Sequence::new("s", array![[0.5]]).with_label_seq(vec![0]);
        let l2 = 0.1;
        let out = ctc_ldcrf_loss_and_grad(&[&seq], &params, &map, &features, GradMode::Exact, l2).unwrap();
        for (g, p) in out.grad.flatten().iter().zip(params.flatten()) {
            assert!((g - 2.0 * l2 * p).abs() < 1e-12);
        }
    }

    #[test]
    fn local_equals_exact_without_transitions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let (seq, mut params, map, features) = setup(&mut rng, 6);
            params.trans_weights.fill(0.0);
            let exact = ctc_ldcrf_loss_and_grad(&[&seq], &params, &map, &features, GradMode::Exact, 0.0).unwrap();
            let local = ctc_ldcrf_loss_and_grad(&[&seq], &params, &map, &features, GradMode::Local, 0.0).unwrap();
            assert_eq!(exact.loss, local.loss);
            for (a, b) in exact.grad.state_weights.iter().zip(local.grad.state_weights.iter()) {
                assert!((a - b).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn small_step_decreases_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (seq, params, map, features) = setup(&mut rng, 6);
        let base = ctc_ldcrf_loss_and_grad(&[&seq], &params, &map, &features, GradMode::Exact, 0.0).unwrap();
        for lr in [1e-4, 1e-5] {
            let mut stepped = params.clone();
            stepped.add_scaled(-lr, &base.grad);
            let after = ctc_ldcrf_loss_and_grad(&[&seq], &stepped, &map, &features, GradMode::Exact, 0.0).unwrap();
            assert!(after.loss < base.loss, "lr {lr}: {} !< {}", after.loss, base.loss);
        }
    }
}
