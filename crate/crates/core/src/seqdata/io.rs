//! JSON Lines dataset format.
//!
//! The first non-empty line is a header `{"labels": [...], "dim": d}` with an
//! optional `"meta"` string map. Every following line is one sequence:
//! `{"id": ..., "frames": [[...], ...], "frame_labels": [...], "label_seq": [...]}`
//! where both label fields are optional and hold label names.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Dataset, LabelSet, Sequence};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderLine {
    labels: Vec<String>,
    dim: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    meta: BTreeMap<String, String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SequenceLine {
    id: String,
    frames: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    frame_labels: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label_seq: Option<Vec<String>>,
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_dataset(BufReader::new(file))
}

pub fn read_dataset<R: BufRead>(reader: R) -> Result<Dataset> {
    let mut header: Option<(LabelSet, usize, BTreeMap<String, String>)> = None;
    let mut sequences = Vec::new();

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |e: serde_json::Error| Error::Parse {
            line: line_no,
            message: e.to_string(),
        };
        match &header {
            None => {
                let h: HeaderLine = serde_json::from_str(&line).map_err(parse_err)?;
                if h.dim == 0 {
                    return Err(Error::Parse {
                        line: line_no,
                        message: "dim must be at least 1".into(),
                    });
                }
                let labels = LabelSet::new(h.labels).map_err(|e| Error::Parse {
                    line: line_no,
                    message: e.to_string(),
                })?;
                header = Some((labels, h.dim, h.meta));
            }
            Some((labels, dim, _)) => {
                let raw: SequenceLine = serde_json::from_str(&line).map_err(parse_err)?;
                sequences.push(sequence_from_line(raw, labels, *dim, line_no)?);
            }
        }
    }

    let (label_set, _, meta) = header.ok_or(Error::Parse {
        line: 0,
        message: "missing header line".into(),
    })?;
    if sequences.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut ds = Dataset::new(label_set, sequences)?;
    ds.meta = meta;
    Ok(ds)
}

fn sequence_from_line(
    raw: SequenceLine,
    labels: &LabelSet,
    dim: usize,
    line: usize,
) -> Result<Sequence> {
    if raw.frames.is_empty() {
        return Err(Error::InvalidSequence {
            id: raw.id,
            message: format!("line {line}: no frames"),
        });
    }
    let mut flat = Vec::with_capacity(raw.frames.len() * dim);
    for row in &raw.frames {
        if row.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: row.len(),
            });
        }
        flat.extend_from_slice(row);
    }
    let frames = Array2::from_shape_vec((raw.frames.len(), dim), flat)
        .expect("row lengths were checked");
    let map_ids = |names: Vec<String>| -> Result<Vec<usize>> {
        names.iter().map(|n| labels.id_of(n)).collect()
    };
    let seq = Sequence {
        id: raw.id,
        frames,
        frame_labels: raw.frame_labels.map(map_ids).transpose()?,
        label_seq: raw.label_seq.map(map_ids).transpose()?,
    };
    seq.validate(labels, dim)?;
    Ok(seq)
}

pub fn write_dataset<W: Write>(dataset: &Dataset, mut writer: W) -> Result<()> {
    let header = HeaderLine {
        labels: dataset.label_set.class_names().to_vec(),
        dim: dataset.dim(),
        meta: dataset.meta.clone(),
    };
    let io_err = |source| Error::Io {
        path: "<writer>".into(),
        source,
    };
    serde_json::to_writer(&mut writer, &header)?;
    writer.write_all(b"\n").map_err(io_err)?;
    let names = |ids: &Vec<usize>| -> Vec<String> {
        ids.iter()
            .map(|&i| dataset.label_set.name(i).to_string())
            .collect()
    };
    for seq in &dataset.sequences {
        let line = SequenceLine {
            id: seq.id.clone(),
            frames: seq.frames.rows().into_iter().map(|r| r.to_vec()).collect(),
            frame_labels: seq.frame_labels.as_ref().map(names),
            label_seq: seq.label_seq.as_ref().map(names),
        };
        serde_json::to_writer(&mut writer, &line)?;
        writer.write_all(b"\n").map_err(io_err)?;
    }
    writer.flush().map_err(io_err)
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    write_dataset(dataset, BufWriter::new(file))
}
