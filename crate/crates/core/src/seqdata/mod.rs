//! Sequences, label sets and datasets, plus everything that consumes them
//! without a model: file I/O, the synthetic generator, fold plans and
//! scoring metrics.

mod folds;
mod generate;
mod io;
mod metrics;

use std::collections::BTreeMap;

use ndarray::Array2;

use crate::error::{Error, Result};

pub use folds::{make_folds, FoldPlan};
pub use generate::{generate_synthetic, GeneratorConfig, Prototypes, SyntheticGenerator};
pub use io::{load_dataset, read_dataset, save_dataset, write_dataset};
pub use metrics::{confusion_matrix, frame_accuracy, roc_curve, Roc};

/// Name reserved for the blank ("non-gesture") label.
pub const BLANK_NAME: &str = "<blank>";

/// Label id. The blank is always the last id of a [`LabelSet`].
pub type LabelId = usize;

/// Ordered label names with the blank appended as the last entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSet {
    names: Vec<String>,
}

impl LabelSet {
    /// Builds a label set from dataset label names. The blank is appended
    /// here; datasets never name it.
    pub fn new<I, S>(names: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut out: Vec<String> = Vec::new();
        for name in names {
            let name = name.into();
            if name == BLANK_NAME {
                return Err(Error::InvalidInput(format!(
                    "label name {BLANK_NAME:?} is reserved"
                )));
            }
            if out.contains(&name) {
                return Err(Error::InvalidInput(format!("duplicate label {name:?}")));
            }
            out.push(name);
        }
        if out.is_empty() {
            return Err(Error::InvalidInput("label set is empty".into()));
        }
        out.push(BLANK_NAME.to_string());
        Ok(Self { names: out })
    }

    /// Number of labels including the blank.
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Number of real (non-blank) labels.
    pub fn num_classes(&self) -> usize {
        self.names.len() - 1
    }

    pub fn blank_id(&self) -> LabelId {
        self.names.len() - 1
    }

    pub fn is_blank(&self, id: LabelId) -> bool {
        id == self.blank_id()
    }

    pub fn name(&self, id: LabelId) -> &str {
        &self.names[id]
    }

    /// Real label names, blank excluded.
    pub fn class_names(&self) -> &[String] {
        &self.names[..self.names.len() - 1]
    }

    pub fn id_of(&self, name: &str) -> Result<LabelId> {
        self.class_names()
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownLabel(name.to_string()))
    }
}

/// One observation sequence: `T × d` frames and optional labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub id: String,
    pub frames: Array2<f64>,
    /// One label per frame.
    pub frame_labels: Option<Vec<LabelId>>,
    /// Segment-level label sequence with unknown alignment.
    pub label_seq: Option<Vec<LabelId>>,
}

impl Sequence {
    pub fn new(id: impl Into<String>, frames: Array2<f64>) -> Self {
        Self {
            id: id.into(),
            frames,
            frame_labels: None,
            label_seq: None,
        }
    }

    pub fn with_frame_labels(mut self, labels: Vec<LabelId>) -> Self {
        self.frame_labels = Some(labels);
        self
    }

    pub fn with_label_seq(mut self, labels: Vec<LabelId>) -> Self {
        self.label_seq = Some(labels);
        self
    }

    /// Number of frames `T`.
    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    /// Feature dimension `d`.
    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }

    /// The declared label sequence, or the collapse of the frame labels.
    pub fn target_labels(&self, blank: LabelId) -> Option<Vec<LabelId>> {
        match (&self.label_seq, &self.frame_labels) {
            (Some(z), _) => Some(z.clone()),
            (None, Some(y)) => Some(collapse(y, blank)),
            (None, None) => None,
        }
    }

    /// Checks the per-sequence invariants against a label set and dimension.
    pub fn validate(&self, labels: &LabelSet, dim: usize) -> Result<()> {
        let bad = |message: String| Error::InvalidSequence {
            id: self.id.clone(),
            message,
        };
        if self.len() == 0 {
            return Err(bad("sequence has no frames".into()));
        }
        if self.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: self.dim(),
            });
        }
        if self.frames.iter().any(|v| !v.is_finite()) {
            return Err(bad("frames contain a non-finite value".into()));
        }
        let blank = labels.blank_id();
        if let Some(y) = &self.frame_labels {
            if y.len() != self.len() {
                return Err(bad(format!(
                    "{} frame labels for {} frames",
                    y.len(),
                    self.len()
                )));
            }
            if y.iter().any(|&a| a >= blank) {
                return Err(bad("frame label out of range".into()));
            }
        }
        if let Some(z) = &self.label_seq {
            if z.len() > self.len() {
                return Err(bad(format!(
                    "label sequence longer ({}) than the frames ({})",
                    z.len(),
                    self.len()
                )));
            }
            if z.iter().any(|&a| a >= blank) {
                return Err(bad("label sequence entry out of range".into()));
            }
        }
        if let (Some(y), Some(z)) = (&self.frame_labels, &self.label_seq) {
            if &collapse(y, blank) != z {
                return Err(bad(
                    "frame labels do not collapse to the declared label sequence".into(),
                ));
            }
        }
        Ok(())
    }
}

/// A labelled collection of sequences sharing one feature dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub label_set: LabelSet,
    pub sequences: Vec<Sequence>,
    pub meta: BTreeMap<String, String>,
}

const SEGMENT_META_PREFIX: &str = "segments.";

impl Dataset {
    pub fn new(label_set: LabelSet, sequences: Vec<Sequence>) -> Result<Self> {
        let ds = Self {
            label_set,
            sequences,
            meta: BTreeMap::new(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn dim(&self) -> usize {
        self.sequences.first().map_or(0, Sequence::dim)
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let first = self.sequences.first().ok_or(Error::EmptyDataset)?;
        let dim = first.dim();
        let mut seen = std::collections::HashSet::new();
        for seq in &self.sequences {
            if !seen.insert(seq.id.as_str()) {
                return Err(Error::InvalidSequence {
                    id: seq.id.clone(),
                    message: "duplicate sequence id".into(),
                });
            }
            seq.validate(&self.label_set, dim)?;
        }
        Ok(())
    }

    /// Segment boundaries recorded for a sequence: `[0, e₁, e₂, …, T]`.
    pub fn segment_bounds(&self, id: &str) -> Option<Vec<usize>> {
        let raw = self.meta.get(&format!("{SEGMENT_META_PREFIX}{id}"))?;
        raw.split(',').map(|s| s.trim().parse().ok()).collect()
    }

    pub fn set_segment_bounds(&mut self, id: &str, bounds: &[usize]) {
        let joined = bounds
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(",");
        self.meta
            .insert(format!("{SEGMENT_META_PREFIX}{id}"), joined);
    }

    /// Returns a dataset holding the sequences at `indices`, in that order.
    /// Segment metadata for the kept sequences is carried along.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let sequences: Vec<Sequence> = indices.iter().map(|&i| self.sequences[i].clone()).collect();
        let mut meta = BTreeMap::new();
        for (k, v) in &self.meta {
            match k.strip_prefix(SEGMENT_META_PREFIX) {
                Some(id) if !sequences.iter().any(|s| s.id == id) => {}
                _ => {
                    meta.insert(k.clone(), v.clone());
                }
            }
        }
        Dataset {
            label_set: self.label_set.clone(),
            sequences,
            meta,
        }
    }

    /// Cuts every sequence at its recorded segment boundaries, yielding
    /// single-class subsequences with frame labels.
    pub fn split_segments(&self) -> Result<Dataset> {
        let mut out = Vec::new();
        for seq in &self.sequences {
            let bounds = self.segment_bounds(&seq.id).ok_or_else(|| {
                Error::Missing(format!("no segment boundaries for sequence {}", seq.id))
            })?;
            let labels = seq.frame_labels.as_ref().ok_or_else(|| {
                Error::Missing(format!("sequence {} has no frame labels", seq.id))
            })?;
            if bounds.first() != Some(&0) || bounds.last() != Some(&seq.len()) {
                return Err(Error::InvalidSequence {
                    id: seq.id.clone(),
                    message: "segment boundaries do not span the sequence".into(),
                });
            }
            for (k, w) in bounds.windows(2).enumerate() {
                let (start, end) = (w[0], w[1]);
                if start >= end {
                    return Err(Error::InvalidSequence {
                        id: seq.id.clone(),
                        message: "segment boundaries are not increasing".into(),
                    });
                }
                let frames = seq.frames.slice(ndarray::s![start..end, ..]).to_owned();
                let y = labels[start..end].to_vec();
                let z = collapse(&y, self.label_set.blank_id());
                out.push(
                    Sequence::new(format!("{}#{k}", seq.id), frames)
                        .with_frame_labels(y)
                        .with_label_seq(z),
                );
            }
        }
        Dataset::new(self.label_set.clone(), out)
    }
}

/// The CTC collapse map: merge runs of identical labels, then drop blanks.
pub fn collapse(labels: &[LabelId], blank: LabelId) -> Vec<LabelId> {
    let mut out = Vec::new();
    let mut prev = None;
    for &a in labels {
        if prev != Some(a) && a != blank {
            out.push(a);
        }
        prev = Some(a);
    }
    out
}
