//! Frame-accuracy evaluation and the k-fold protocol.
//!
//! Models may predict the blank label, which never appears in ground truth.
//! [`BlankPolicy`] decides how such frames are scored. The default keeps the
//! label order read off the argmax path and places each boundary where the
//! non-blank marginals favour it.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::{train, TrainConfig, TrainReport};
use crate::error::{Error, Result};
use crate::features::Model;
use crate::ldcrf::decode_marginals;
use crate::math::argmax;
use crate::seqdata::{collapse, confusion_matrix, frame_accuracy, make_folds, roc_curve, Dataset, FoldPlan, LabelId, Roc, Sequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlankPolicy {
    /// Collapse the argmax path to a label sequence, then segment the frames
    /// into consecutive runs of those labels maximising
    /// `Σ_j log q̃_j(label_j)`, where `q̃` renormalises the marginals over
    /// the non-blank labels.
    #[default]
    Align,
    /// Blank frames take the nearest preceding non-blank prediction (the
    /// nearest following one for a leading run).
    Preceding,
    /// Argmax over the non-blank labels only.
    Exclude,
    /// Blank predictions are kept and therefore count as errors.
    Keep,
}

/// Rewrites blank predictions in place. `Keep` leaves them; every other
/// policy fills them from the nearest preceding non-blank (`Align` and
/// `Exclude` need the marginals, see [`predict_frames`]). A sequence
/// predicted entirely blank is left unchanged.
pub fn remap_blanks(pred: &mut [LabelId], blank: LabelId, policy: BlankPolicy) {
    if policy == BlankPolicy::Keep {
        return;
    }
    let Some(first) = pred.iter().copied().find(|&a| a != blank) else {
        return;
    };
    let mut last = first;
    for a in pred.iter_mut() {
        if *a == blank {
            *a = last;
        } else {
            last = *a;
        }
    }
}

/// Per-frame label predictions with blanks handled per `policy`.
pub fn predict_frames(model: &Model, seq: &Sequence, policy: BlankPolicy) -> Result<Vec<LabelId>> {
    let q = model.label_marginals(seq)?;
    let blank = model.labels.blank_id();
    Ok(match policy {
        BlankPolicy::Exclude => q
            .rows()
            .into_iter()
            .map(|row| argmax(&row.as_slice().expect("standard layout")[..blank]))
            .collect(),
        BlankPolicy::Align => {
            let path = collapse(&decode_marginals(q.view()), blank);
            if path.is_empty() {
                return predict_frames(model, seq, BlankPolicy::Exclude);
            }
            align_frames(q.view(), &path, blank)
        }
        _ => {
            let mut pred = decode_marginals(q.view());
            remap_blanks(&mut pred, blank, policy);
            pred
        }
    })
}

/// Best monotone segmentation of the frames into consecutive runs of
/// `labels` (each run non-empty) under per-frame scores
/// `log(q[j, a] / Σ_{b≠blank} q[j, b])`. Requires `1 ≤ labels.len() ≤ T`.
pub fn align_frames(q: ArrayView2<'_, f64>, labels: &[LabelId], blank: LabelId) -> Vec<LabelId> {
    let t_len = q.nrows();
    let k = labels.len();
    assert!(k >= 1 && k <= t_len, "alignment needs between 1 and T labels");
    let score = |j: usize, a: LabelId| {
        let total: f64 = (0..q.ncols()).filter(|&b| b != blank).map(|b| q[[j, b]]).sum();
        if total > 0.0 {
            (q[[j, a]] / total).max(f64::MIN_POSITIVE).ln()
        } else {
            0.0
        }
    };
    let mut best = Array2::from_elem((t_len, k), f64::NEG_INFINITY);
    let mut advanced = Array2::from_elem((t_len, k), false);
    best[[0, 0]] = score(0, labels[0]);
    for j in 1..t_len {
        for i in 0..k.min(j + 1) {
            let stay = best[[j - 1, i]];
            let adv = if i > 0 { best[[j - 1, i - 1]] } else { f64::NEG_INFINITY };
            // Ties advance here, which on backtracking puts boundaries as late as allowed.
            let (v, moved) = if adv >= stay { (adv, true) } else { (stay, false) };
            best[[j, i]] = v + score(j, labels[i]);
            advanced[[j, i]] = moved;
        }
    }
    let mut out = vec![0; t_len];
    let mut i = k - 1;
    for j in (0..t_len).rev() {
        out[j] = labels[i];
        if j > 0 && advanced[[j, i]] {
            i -= 1;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub sequences: usize,
    pub frames: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub blank_policy: BlankPolicy,
    pub labels: Vec<String>,
    pub folds: Vec<FoldMetrics>,
    /// Unweighted mean of the fold accuracies.
    pub mean_accuracy: f64,
    /// Accuracy over all evaluated frames at once.
    pub pooled_accuracy: f64,
    /// `confusion[truth][predicted]`, blank included as the last label.
    pub confusion: Vec<Vec<usize>>,
    /// Present for two-class label sets: scores are `P(class 1)` normalised
    /// over the two real classes.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub roc: Option<Roc>,
}

/// Scores `model` on every frame-labelled sequence of `dataset`, grouped by
/// `fold_plan` when given (otherwise as a single fold 0).
pub fn evaluate(
    dataset: &Dataset,
    model: &Model,
    fold_plan: Option<&FoldPlan>,
    policy: BlankPolicy,
) -> Result<EvalReport> {
    if model.labels != dataset.label_set {
        return Err(Error::InvalidInput("model and dataset label sets differ".into()));
    }
    let k = fold_plan.map_or(1, |p| p.k);
    let mut preds: Vec<Vec<Vec<LabelId>>> = vec![Vec::new(); k];
    let mut truths: Vec<Vec<Vec<LabelId>>> = vec![Vec::new(); k];
    let mut scores = Vec::new();
    let mut positives = Vec::new();
    let binary = dataset.label_set.num_classes() == 2;

    for seq in &dataset.sequences {
        let truth = seq
            .frame_labels
            .clone()
            .ok_or_else(|| Error::Missing(format!("sequence {} has no frame labels to score", seq.id)))?;
        let fold = match fold_plan {
            Some(plan) => plan
                .fold_of(&seq.id)
                .ok_or_else(|| Error::Missing(format!("sequence {} is not in the fold plan", seq.id)))?,
            None => 0,
        };
        if binary {
            let q = model.label_marginals(seq)?;
            for (j, &t) in truth.iter().enumerate() {
                let (p0, p1) = (q[[j, 0]], q[[j, 1]]);
                scores.push(if p0 + p1 > 0.0 { p1 / (p0 + p1) } else { 0.5 });
                positives.push(t == 1);
            }
        }
        preds[fold].push(predict_frames(model, seq, policy)?);
        truths[fold].push(truth);
    }

    let mut folds = Vec::new();
    for fold in 0..k {
        if truths[fold].is_empty() {
            continue;
        }
        folds.push(FoldMetrics {
            fold,
            sequences: truths[fold].len(),
            frames: truths[fold].iter().map(Vec::len).sum(),
            accuracy: frame_accuracy(&preds[fold], &truths[fold])?,
        });
    }
    let all_pred: Vec<Vec<LabelId>> = preds.into_iter().flatten().collect();
    let all_truth: Vec<Vec<LabelId>> = truths.into_iter().flatten().collect();
    let roc = if binary && positives.iter().any(|&p| p) && positives.iter().any(|&p| !p) {
        Some(roc_curve(&scores, &positives)?)
    } else {
        None
    };
    Ok(EvalReport {
        blank_policy: policy,
        labels: (0..dataset.label_set.len())
            .map(|a| dataset.label_set.name(a).to_string())
            .collect(),
        mean_accuracy: folds.iter().map(|f| f.accuracy).sum::<f64>() / folds.len() as f64,
        pooled_accuracy: frame_accuracy(&all_pred, &all_truth)?,
        confusion: confusion_matrix(&all_pred, &all_truth, dataset.label_set.len())?,
        folds,
        roc,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub train_sequences: usize,
    pub test_sequences: usize,
    pub accuracy: f64,
    pub train: TrainReport,
    pub eval: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KFoldReport {
    pub k: usize,
    pub fold_seed: u64,
    pub folds: Vec<FoldResult>,
    /// Mean of the per-fold held-out accuracies.
    pub mean_accuracy: f64,
}

/// Trains on `k − 1` folds and evaluates on the held-out fold, `k` times.
/// Returns the report and the per-fold models.
pub fn kfold(
    dataset: &Dataset,
    config: &TrainConfig,
    k: usize,
    fold_seed: u64,
    policy: BlankPolicy,
) -> Result<(KFoldReport, Vec<Model>)> {
    config.validate()?;
    config.check_dataset(dataset)?;
    let plan = make_folds(dataset, k, fold_seed)?;
    let mut folds = Vec::with_capacity(k);
    let mut models = Vec::with_capacity(k);
    for fold in 0..k {
        let (train_idx, test_idx) = plan.split(dataset, fold)?;
        let train_set = dataset.subset(&train_idx);
        let test_set = dataset.subset(&test_idx);
        let outcome = train(&train_set, config)?;
        let eval = evaluate(&test_set, &outcome.model, None, policy)?;
        log::info!("fold {fold}: held-out accuracy {:.2}%", eval.pooled_accuracy);
        folds.push(FoldResult {
            fold,
            train_sequences: train_idx.len(),
            test_sequences: test_idx.len(),
            accuracy: eval.pooled_accuracy,
            train: outcome.report,
            eval,
        });
        models.push(outcome.model);
    }
    let mean_accuracy = folds.iter().map(|f| f.accuracy).sum::<f64>() / k as f64;
    Ok((
        KFoldReport {
            k,
            fold_seed,
            folds,
            mean_accuracy,
        },
        models,
    ))
}
