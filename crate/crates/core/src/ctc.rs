//! Connectionist temporal classification over a per-frame label table.
//!
//! The target `z` is extended to `z′ = (blank, z₁, blank, …, z_m, blank)` and
//! the forward/backward variables run over `z′` in the log domain. `α_j(s)`
//! includes the emission at frame `j`; `β_j(s)` does not, so
//! `Σ_s α_j(s)·β_j(s) = P(z | x)` at every frame.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::math::{argmax, logsumexp};
use crate::seqdata::{collapse, LabelId};

/// Floor applied to table entries before dividing by them.
pub const MIN_PROB: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq)]
pub struct CtcTables {
    /// Blank-interleaved target, length `2m + 1`.
    pub augmented: Vec<LabelId>,
    /// `T × (2m + 1)`.
    pub log_alpha: Array2<f64>,
    /// `T × (2m + 1)`.
    pub log_beta: Array2<f64>,
    /// `log P(z | x)`; `-inf` when no alignment has positive probability.
    pub log_prob: f64,
}

/// `(blank, z₁, blank, z₂, …, z_m, blank)`.
pub fn augment(z: &[LabelId], blank: LabelId) -> Vec<LabelId> {
    let mut out = Vec::with_capacity(2 * z.len() + 1);
    out.push(blank);
    for &a in z {
        out.push(a);
        out.push(blank);
    }
    out
}

/// Fewest frames that can emit `z`: one per label plus a separating blank
/// between equal neighbours.
pub fn min_frames(z: &[LabelId]) -> usize {
    z.len() + z.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Whether position `s` of `z′` may be entered from `s − 2`.
fn can_skip(augmented: &[LabelId], s: usize, blank: LabelId) -> bool {
    s >= 2 && augmented[s] != blank && augmented[s] != augmented[s - 2]
}

fn validate(q: &ArrayView2<'_, f64>, z: &[LabelId], blank: LabelId) -> Result<()> {
    let labels = q.ncols();
    if q.nrows() == 0 {
        return Err(Error::InvalidInput("empty probability table".into()));
    }
    if blank >= labels {
        return Err(Error::InvalidInput(format!("blank id {blank} outside table of {labels} labels")));
    }
    if q.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::NonFinite("label probabilities"));
    }
    if let Some(&bad) = z.iter().find(|&&a| a == blank || a >= labels) {
        return Err(Error::InvalidInput(format!("invalid target label {bad}")));
    }
    let needed = min_frames(z);
    if needed > q.nrows() {
        return Err(Error::Infeasible {
            label_len: z.len(),
            needed,
            frames: q.nrows(),
        });
    }
    Ok(())
}

/// Forward-backward over all alignments of `z` to the `T` frames of `q`.
pub fn ctc_forward_backward(q: ArrayView2<'_, f64>, z: &[LabelId], blank: LabelId) -> Result<CtcTables> {
    validate(&q, z, blank)?;
    let t_len = q.nrows();
    let augmented = augment(z, blank);
    let n = augmented.len();
    let log_q = q.mapv(f64::ln);
    let emit = |j: usize, s: usize| log_q[[j, augmented[s]]];

    let mut alpha = Array2::from_elem((t_len, n), f64::NEG_INFINITY);
    alpha[[0, 0]] = emit(0, 0);
    if n > 1 {
        alpha[[0, 1]] = emit(0, 1);
    }
    for j in 1..t_len {
        for s in 0..n {
            let stay = alpha[[j - 1, s]];
            let step = if s >= 1 { alpha[[j - 1, s - 1]] } else { f64::NEG_INFINITY };
            let skip = if can_skip(&augmented, s, blank) {
                alpha[[j - 1, s - 2]]
            } else {
                f64::NEG_INFINITY
            };
            alpha[[j, s]] = logsumexp([stay, step, skip]) + emit(j, s);
        }
    }

    let mut beta = Array2::from_elem((t_len, n), f64::NEG_INFINITY);
    beta[[t_len - 1, n - 1]] = 0.0;
    if n > 1 {
        beta[[t_len - 1, n - 2]] = 0.0;
    }
    for j in (0..t_len - 1).rev() {
        for s in 0..n {
            let stay = beta[[j + 1, s]] + emit(j + 1, s);
            let step = if s + 1 < n {
                beta[[j + 1, s + 1]] + emit(j + 1, s + 1)
            } else {
                f64::NEG_INFINITY
            };
            let skip = if s + 2 < n && can_skip(&augmented, s + 2, blank) {
                beta[[j + 1, s + 2]] + emit(j + 1, s + 2)
            } else {
                f64::NEG_INFINITY
            };
            beta[[j, s]] = logsumexp([stay, step, skip]);
        }
    }

    let last = alpha.row(t_len - 1);
    let log_prob = if n > 1 {
        logsumexp([last[n - 1], last[n - 2]])
    } else {
        last[0]
    };
    Ok(CtcTables {
        augmented,
        log_alpha: alpha,
        log_beta: beta,
        log_prob,
    })
}

/// `e[j, a] = ∂ log P(z|x) / ∂ q[j, a]`, treating the entries of `q` as free
/// variables.
pub fn ctc_error_table(tables: &CtcTables, q: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if !tables.log_prob.is_finite() {
        return Err(Error::NonFinite("CTC log-probability"));
    }
    let (t_len, labels) = q.dim();
    if tables.log_alpha.nrows() != t_len {
        return Err(Error::DimensionMismatch {
            expected: tables.log_alpha.nrows(),
            found: t_len,
        });
    }
    let mut e = Array2::zeros((t_len, labels));
    let mut per_label = vec![f64::NEG_INFINITY; labels];
    for j in 0..t_len {
        per_label.fill(f64::NEG_INFINITY);
        for (s, &a) in tables.augmented.iter().enumerate() {
            let v = tables.log_alpha[[j, s]] + tables.log_beta[[j, s]];
            per_label[a] = crate::math::logaddexp(per_label[a], v);
        }
        for (a, &mass) in per_label.iter().enumerate() {
            if mass == f64::NEG_INFINITY {
                continue;
            }
            let mut qa = q[[j, a]];
            if qa < MIN_PROB {
                log::warn!("clamping label probability {qa:e} at frame {j}, label {a}");
                qa = MIN_PROB;
            }
            e[[j, a]] = (mass - tables.log_prob - qa.ln()).exp();
        }
    }
    Ok(e)
}

/// Collapse of the per-frame argmax path (blank included in the argmax).
pub fn best_path_decode(q: ArrayView2<'_, f64>, blank: LabelId) -> Vec<LabelId> {
    let path: Vec<LabelId> = q
        .rows()
        .into_iter()
        .map(|row| argmax(&row.to_vec()))
        .collect();
    collapse(&path, blank)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::for_each_path;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_table(rng: &mut impl Rng, t_len: usize, labels: usize) -> Array2<f64> {
        let mut q = Array2::from_shape_fn((t_len, labels), |_| rng.random_range(0.05..1.0));
        for mut row in q.rows_mut() {
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        q
    }

    /// Σ over every frame path `π` with `collapse(π) = z` of `Π_j q[j, π_j]`.
    fn brute_force_prob(q: &Array2<f64>, z: &[usize], blank: usize) -> f64 {
        let mut total = 0.0;
        for_each_path(q.nrows(), q.ncols(), |p| {
            if collapse(p, blank) == z {
                total += p.iter().enumerate().map(|(j, &a)| q[[j, a]]).product::<f64>();
            }
        });
        total
    }

    #[test]
    fn single_frame_single_label() {
        let q = array![[0.3, 0.7]];
        let t = ctc_forward_backward(q.view(), &[0], 1).unwrap();
        assert!((t.log_prob - 0.3f64.ln()).abs() < 1e-15);
        let e = ctc_error_table(&t, q.view()).unwrap();
        assert!((e[[0, 0]] - 1.0 / 0.3).abs() < 1e-12);
        assert_eq!(e[[0, 1]], 0.0);
    }

    #[test]
    fn two_frames_three_alignments() {
        let q = array![[0.2, 0.5, 0.3], [0.6, 0.1, 0.3]];
        let b = 2;
        let t = ctc_forward_backward(q.view(), &[0], b).unwrap();
        let expected = 0.2 * 0.6 + 0.2 * 0.3 + 0.3 * 0.6;
        assert!((t.log_prob.exp() - expected).abs() < 1e-15);
    }

    #[test]
    fn matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let q = random_table(&mut rng, 6, 4);
        let (a, b, blank) = (0, 1, 3);
        for z in [vec![a, b, a], vec![a, a], vec![], vec![b], vec![a, b, 2, a]] {
            let t = ctc_forward_backward(q.view(), &z, blank).unwrap();
            let bf = brute_force_prob(&q, &z, blank);
            assert!((t.log_prob.exp() - bf).abs() < 1e-10, "z = {z:?}");
        }
    }

    #[test]
    fn alpha_beta_reproduce_log_prob_at_every_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = random_table(&mut rng, 7, 3);
        let t = ctc_forward_backward(q.view(), &[0, 1, 1], 2).unwrap();
        for j in 0..7 {
            let total = logsumexp((0..t.augmented.len()).map(|s| t.log_alpha[[j, s]] + t.log_beta[[j, s]]));
            assert!((total - t.log_prob).abs() < 1e-8);
        }
        let n = t.augmented.len();
        let last = t.log_alpha.row(6);
        assert_eq!(t.log_prob, logsumexp([last[n - 1], last[n - 2]]));
    }

    #[test]
    fn infeasible_targets() {
        let q = Array2::from_elem((2, 3), 1.0 / 3.0);
        assert_eq!(min_frames(&[0, 0]), 3);
        assert!(matches!(
            ctc_forward_backward(q.view(), &[0, 0], 2),
            Err(Error::Infeasible { needed: 3, frames: 2, .. })
        ));
        assert!(ctc_forward_backward(q.view(), &[0, 1], 2).is_ok());
        assert!(ctc_forward_backward(q.view(), &[2], 2).is_err());
    }

    #[test]
    fn zero_probability_yields_neg_infinity() {
        let q = array![[0.0, 1.0], [0.0, 1.0]];
        let t = ctc_forward_backward(q.view(), &[0], 1).unwrap();
        assert_eq!(t.log_prob, f64::NEG_INFINITY);
        assert!(ctc_error_table(&t, q.view()).is_err());
    }

    #[test]
    fn unused_label_column_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = random_table(&mut rng, 5, 4);
        let t = ctc_forward_backward(q.view(), &[0, 2], 3).unwrap();
        let e = ctc_error_table(&t, q.view()).unwrap();
        assert!(e.column(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn error_table_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let step = 1e-6;
        let mut worst: f64 = 0.0;
        for _ in 0..20 {
            let t_len = rng.random_range(2..=6);
            let q = random_table(&mut rng, t_len, 3);
            let m = rng.random_range(0..=2.min(t_len));
            let z: Vec<usize> = (0..m).map(|_| rng.random_range(0..2)).collect();
            if min_frames(&z) > t_len {
                continue;
            }
            let t = ctc_forward_backward(q.view(), &z, 2).unwrap();
            let e = ctc_error_table(&t, q.view()).unwrap();
            for idx in ndarray::indices(q.dim()) {
                let mut plus = q.clone();
                plus[idx] += step;
                let mut minus = q.clone();
                minus[idx] -= step;
                let fd = (ctc_forward_backward(plus.view(), &z, 2).unwrap().log_prob
                    - ctc_forward_backward(minus.view(), &z, 2).unwrap().log_prob)
                    / (2.0 * step);
                worst = worst.max((fd - e[idx]).abs() / fd.abs().max(e[idx].abs()).max(1e-4));
            }
        }
        assert!(worst < 1e-6, "max relative error {worst:e}");
    }

    #[test]
    fn error_table_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let q = random_table(&mut rng, 6, 3);
        let t = ctc_forward_backward(q.view(), &[1, 0], 2).unwrap();
        let e = ctc_error_table(&t, q.view()).unwrap();
        for j in 0..6 {
            let s: f64 = (0..3).map(|a| q[[j, a]] * e[[j, a]]).sum();
            assert!((s - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn collapsed_sequences_form_a_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for t_len in 1..=5 {
            let q = random_table(&mut rng, t_len, 3);
            let mut total = 0.0;
            for m in 0..=t_len {
                for_each_path(m, 2, |z| {
                    if let Ok(t) = ctc_forward_backward(q.view(), z, 2) {
                        total += t.log_prob.exp();
                    }
                });
            }
            assert!((total - 1.0).abs() < 1e-8, "T = {t_len}: {total}");
        }
    }

    #[test]
    fn best_path_cases() {
        let (a, b, blank) = (0, 1, 2);
        let peaked = |labels: &[usize]| {
            let mut q = Array2::from_elem((labels.len(), 3), 0.1);
            for (j, &l) in labels.iter().enumerate() {
                q[[j, l]] = 0.8;
            }
            q
        };
        assert_eq!(best_path_decode(peaked(&[a, a, blank, b]).view(), blank), vec![a, b]);
        assert_eq!(best_path_decode(peaked(&[blank, blank]).view(), blank), Vec::<usize>::new());
    }
}
