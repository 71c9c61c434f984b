//! Log-domain inference over a linear chain of hidden states.
//!
//! A path `h` scores `Σ_j node[j, h_j] + Σ_j trans[h_j, h_{j+1}]` and the
//! chain is the Gibbs distribution over those scores. Everything here works
//! on raw score matrices; building them from features is done elsewhere.

use ndarray::{Array2, Array3, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::math::{argmax, logsumexp};

/// Upper bound on the number of paths [`brute_force_posteriors`] enumerates.
pub const MAX_ENUMERATED_PATHS: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
pub struct ChainPosteriors {
    pub log_z: f64,
    /// `T × |ℋ|`, `P(h_j = s | x)`.
    pub node_marginals: Array2<f64>,
    /// `(T−1) × |ℋ| × |ℋ|`, `[j, prev, next] = P(h_j = prev, h_{j+1} = next | x)`.
    pub edge_marginals: Array3<f64>,
}

impl ChainPosteriors {
    /// Edge marginals summed over positions, `|ℋ| × |ℋ|`.
    pub fn edge_totals(&self) -> Array2<f64> {
        self.edge_marginals.sum_axis(Axis(0))
    }
}

fn check_shapes(scores: &ArrayView2<'_, f64>, trans: &ArrayView2<'_, f64>) -> Result<()> {
    let states = scores.ncols();
    if scores.nrows() == 0 || states == 0 {
        return Err(Error::InvalidInput("empty score matrix".into()));
    }
    if trans.nrows() != states || trans.ncols() != states {
        return Err(Error::DimensionMismatch {
            expected: states,
            found: trans.nrows(),
        });
    }
    Ok(())
}

fn check_finite(scores: &ArrayView2<'_, f64>, trans: &ArrayView2<'_, f64>) -> Result<()> {
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("node scores"));
    }
    if trans.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("transition weights"));
    }
    Ok(())
}

/// `log α_j(s)`: log-sum of all prefixes ending in `s` at `j`, emission included.
fn log_forward(scores: &ArrayView2<'_, f64>, trans: &ArrayView2<'_, f64>) -> Array2<f64> {
    let (t_len, states) = scores.dim();
    let mut alpha = Array2::from_elem((t_len, states), f64::NEG_INFINITY);
    alpha.row_mut(0).assign(&scores.row(0));
    let mut buf = vec![0.0; states];
    for j in 1..t_len {
        for s in 0..states {
            for (p, b) in buf.iter_mut().enumerate() {
                *b = alpha[[j - 1, p]] + trans[[p, s]];
            }
            alpha[[j, s]] = logsumexp(buf.iter().copied()) + scores[[j, s]];
        }
    }
    alpha
}

/// `log β_j(s)`: log-sum of all suffixes after `j` given `h_j = s`, emission
/// at `j` excluded.
fn log_backward(scores: &ArrayView2<'_, f64>, trans: &ArrayView2<'_, f64>) -> Array2<f64> {
    let (t_len, states) = scores.dim();
    let mut beta = Array2::zeros((t_len, states));
    let mut buf = vec![0.0; states];
    for j in (0..t_len - 1).rev() {
        for p in 0..states {
            for (s, b) in buf.iter_mut().enumerate() {
                *b = trans[[p, s]] + scores[[j + 1, s]] + beta[[j + 1, s]];
            }
            beta[[j, p]] = logsumexp(buf.iter().copied());
        }
    }
    beta
}

/// Log partition function via the forward pass alone.
pub fn log_partition(scores: ArrayView2<'_, f64>, trans: ArrayView2<'_, f64>) -> Result<f64> {
    check_shapes(&scores, &trans)?;
    if scores.iter().chain(trans.iter()).any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::NonFinite("chain scores"));
    }
    let alpha = log_forward(&scores, &trans);
    Ok(logsumexp(alpha.row(scores.nrows() - 1).iter().copied()))
}

/// Exact node and edge marginals and `log Z`.
pub fn forward_backward(scores: ArrayView2<'_, f64>, trans: ArrayView2<'_, f64>) -> Result<ChainPosteriors> {
    check_shapes(&scores, &trans)?;
    check_finite(&scores, &trans)?;
    Ok(posteriors_unchecked(&scores, &trans, true))
}

/// `log Z` and node marginals only; `edge_marginals` is left empty.
pub fn node_posteriors(scores: ArrayView2<'_, f64>, trans: ArrayView2<'_, f64>) -> Result<ChainPosteriors> {
    check_shapes(&scores, &trans)?;
    check_finite(&scores, &trans)?;
    Ok(posteriors_unchecked(&scores, &trans, false))
}

/// Like [`forward_backward`] but accepts `-inf` node scores, which remove
/// states from the chain. Fails if no path survives.
pub(crate) fn forward_backward_masked(
    scores: ArrayView2<'_, f64>,
    trans: ArrayView2<'_, f64>,
) -> Result<ChainPosteriors> {
    check_shapes(&scores, &trans)?;
    if scores.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::NonFinite("node scores"));
    }
    if trans.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("transition weights"));
    }
    let post = posteriors_unchecked(&scores, &trans, true);
    if !post.log_z.is_finite() {
        return Err(Error::InvalidInput("every path is masked out".into()));
    }
    Ok(post)
}

fn posteriors_unchecked(scores: &ArrayView2<'_, f64>, trans: &ArrayView2<'_, f64>, edges: bool) -> ChainPosteriors {
    let (t_len, states) = scores.dim();
    let alpha = log_forward(scores, trans);
    let beta = log_backward(scores, trans);
    let log_z = logsumexp(alpha.row(t_len - 1).iter().copied());

    let node_marginals = Array2::from_shape_fn((t_len, states), |(j, s)| {
        (alpha[[j, s]] + beta[[j, s]] - log_z).exp()
    });
    let edge_marginals = if edges {
        Array3::from_shape_fn((t_len.saturating_sub(1), states, states), |(j, p, s)| {
            (alpha[[j, p]] + trans[[p, s]] + scores[[j + 1, s]] + beta[[j + 1, s]] - log_z).exp()
        })
    } else {
        Array3::zeros((0, states, states))
    };
    ChainPosteriors {
        log_z,
        node_marginals,
        edge_marginals,
    }
}

/// Visits every hidden path of a `t_len × states` chain in lexicographic order.
pub(crate) fn for_each_path(t_len: usize, states: usize, mut visit: impl FnMut(&[usize])) {
    let mut path = vec![0usize; t_len];
    loop {
        visit(&path);
        let mut pos = t_len;
        loop {
            if pos == 0 {
                return;
            }
            pos -= 1;
            path[pos] += 1;
            if path[pos] < states {
                break;
            }
            path[pos] = 0;
        }
    }
}

/// Unnormalized log weight of one hidden path.
pub fn path_score(scores: &ArrayView2<'_, f64>, trans: &ArrayView2<'_, f64>, path: &[usize]) -> f64 {
    let mut total = 0.0;
    for (j, &s) in path.iter().enumerate() {
        total += scores[[j, s]];
        if j > 0 {
            total += trans[[path[j - 1], s]];
        }
    }
    total
}

/// Posteriors by explicit enumeration of all `|ℋ|^T` paths. Reference
/// implementation for testing; refuses instances above
/// [`MAX_ENUMERATED_PATHS`].
pub fn brute_force_posteriors(
    scores: ArrayView2<'_, f64>,
    trans: ArrayView2<'_, f64>,
) -> Result<ChainPosteriors> {
    check_shapes(&scores, &trans)?;
    let (t_len, states) = scores.dim();
    let paths = (states as f64).powi(t_len as i32);
    if paths > MAX_ENUMERATED_PATHS {
        return Err(Error::TooLarge { paths });
    }

    let mut log_weights = Vec::with_capacity(paths as usize);
    for_each_path(t_len, states, |p| log_weights.push(path_score(&scores, &trans, p)));
    let log_z = logsumexp(log_weights.iter().copied());

    let mut node = Array2::zeros((t_len, states));
    let mut edge = Array3::zeros((t_len.saturating_sub(1), states, states));
    let mut k = 0;
    for_each_path(t_len, states, |p| {
        let prob = (log_weights[k] - log_z).exp();
        k += 1;
        for (j, &s) in p.iter().enumerate() {
            node[[j, s]] += prob;
            if j > 0 {
                edge[[j - 1, p[j - 1], s]] += prob;
            }
        }
    });
    Ok(ChainPosteriors {
        log_z,
        node_marginals: node,
        edge_marginals: edge,
    })
}

/// Highest-scoring hidden path and its score. Ties go to the lower state
/// index, both for back-pointers and the final state.
pub fn viterbi(scores: ArrayView2<'_, f64>, trans: ArrayView2<'_, f64>) -> (Vec<usize>, f64) {
    let (t_len, states) = scores.dim();
    if t_len == 0 {
        return (Vec::new(), 0.0);
    }
    let mut delta = scores.row(0).to_vec();
    let mut back = Array2::<usize>::zeros((t_len, states));
    let mut next = vec![0.0; states];
    for j in 1..t_len {
        for s in 0..states {
            let mut best = 0;
            let mut best_val = delta[0] + trans[[0, s]];
            for p in 1..states {
                let v = delta[p] + trans[[p, s]];
                if v > best_val {
                    best = p;
                    best_val = v;
                }
            }
            back[[j, s]] = best;
            next[s] = best_val + scores[[j, s]];
        }
        std::mem::swap(&mut delta, &mut next);
    }
    let last = argmax(&delta);
    let score = delta[last];
    let mut path = vec![0; t_len];
    path[t_len - 1] = last;
    for j in (1..t_len).rev() {
        path[j - 1] = back[[j, path[j]]];
    }
    (path, score)
}

/// Reverse-mode derivative through forward-backward.
///
/// Given `upstream[j, b] = ∂L/∂μ_j(b)` for some scalar loss `L` of the node
/// marginals, returns `(∂L/∂node_scores, ∂L/∂trans)`.
///
/// With `G(h) = Σ_j upstream[j, h_j]`, the chain rule gives covariances
/// under the chain distribution: `∂L/∂score_i(c) = Cov(G, 1[h_i = c])` and
/// `∂L/∂trans(p, s) = Cov(G, #{j : h_j = p, h_{j+1} = s})`. Both need
/// `E[G | h_i = c]`, which splits into a prefix part (frames `≤ i`) and a
/// suffix part (frames `> i`), each carried by one extra linear sweep. Cost
/// is `O(T·|ℋ|²)`.
pub fn fb_adjoint(
    scores: ArrayView2<'_, f64>,
    trans: ArrayView2<'_, f64>,
    upstream: ArrayView2<'_, f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    check_shapes(&scores, &trans)?;
    check_finite(&scores, &trans)?;
    if upstream.dim() != scores.dim() {
        return Err(Error::DimensionMismatch {
            expected: scores.len(),
            found: upstream.len(),
        });
    }
    if upstream.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("upstream gradient"));
    }

    let post = posteriors_unchecked(&scores, &trans, true);
    posterior_adjoint(&post, upstream)
}

/// [`fb_adjoint`] from already computed posteriors. The conditional
/// transition probabilities the sweeps need are ratios `ξ / μ` of the
/// marginals, so no further exponentials are taken.
pub fn posterior_adjoint(
    post: &ChainPosteriors,
    upstream: ArrayView2<'_, f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let mu = &post.node_marginals;
    let xi = &post.edge_marginals;
    if upstream.dim() != mu.dim() {
        return Err(Error::DimensionMismatch {
            expected: mu.len(),
            found: upstream.len(),
        });
    }
    if upstream.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("upstream gradient"));
    }
    let (t_len, states) = mu.dim();

    // prefix[j, c] = E[Σ_{i≤j} g_i(h_i) | h_j = c]
    let mut prefix = Array2::<f64>::zeros((t_len, states));
    prefix.row_mut(0).assign(&upstream.row(0));
    for j in 1..t_len {
        for c in 0..states {
            let m = mu[[j, c]];
            let mut acc = 0.0;
            if m > 0.0 {
                for p in 0..states {
                    acc += xi[[j - 1, p, c]] * prefix[[j - 1, p]];
                }
                acc /= m;
            }
            prefix[[j, c]] = upstream[[j, c]] + acc;
        }
    }

    // suffix[j, c] = E[Σ_{i>j} g_i(h_i) | h_j = c]
    let mut suffix = Array2::<f64>::zeros((t_len, states));
    for j in (0..t_len - 1).rev() {
        for c in 0..states {
            let m = mu[[j, c]];
            if m > 0.0 {
                let mut acc = 0.0;
                for s in 0..states {
                    acc += xi[[j, c, s]] * (upstream[[j + 1, s]] + suffix[[j + 1, s]]);
                }
                suffix[[j, c]] = acc / m;
            }
        }
    }

    // E[G] from the last frame, where the suffix part vanishes.
    let expected_g: f64 = (0..states).map(|c| mu[[t_len - 1, c]] * prefix[[t_len - 1, c]]).sum();

    let grad_scores = Array2::from_shape_fn((t_len, states), |(j, c)| {
        mu[[j, c]] * (prefix[[j, c]] + suffix[[j, c]] - expected_g)
    });

    let mut grad_trans = Array2::<f64>::zeros((states, states));
    for j in 0..t_len.saturating_sub(1) {
        for p in 0..states {
            for s in 0..states {
                let conditional = prefix[[j, p]] + upstream[[j + 1, s]] + suffix[[j + 1, s]];
                grad_trans[[p, s]] += xi[[j, p, s]] * (conditional - expected_g);
            }
        }
    }
    Ok((grad_scores, grad_trans))
}
