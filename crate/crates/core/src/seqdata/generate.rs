//! Synthetic continuous-gesture data.
//!
//! Each class owns a smooth prototype trajectory in `ℝᵈ` (a random quadratic
//! plus a sinusoid per dimension, over normalized time `τ ∈ [0, 1]`). A
//! sequence concatenates several class segments, each a resampled prototype
//! with additive Gaussian noise. Adjacent segments never share a class, so
//! the label sequence has one entry per segment.

use std::f64::consts::PI;

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, LabelSet, Sequence};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub classes: usize,
    pub dim: usize,
    /// Inclusive range of frames per segment.
    pub segment_len: (usize, usize),
    /// Inclusive range of segments per sequence.
    pub segments: (usize, usize),
    /// Standard deviation of the additive frame noise.
    pub noise: f64,
    pub sequences: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            classes: 6,
            dim: 4,
            segment_len: (18, 28),
            segments: (3, 5),
            noise: 0.3,
            sequences: 182,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("at least 2 classes are required".into()));
        }
        if self.dim == 0 {
            return Err(Error::Config("dim must be at least 1".into()));
        }
        let check = |name: &str, (lo, hi): (usize, usize)| {
            if lo == 0 || lo > hi {
                Err(Error::Config(format!("invalid {name} range {lo}..{hi}")))
            } else {
                Ok(())
            }
        };
        check("segment length", self.segment_len)?;
        check("segments per sequence", self.segments)?;
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config("noise must be a finite non-negative number".into()));
        }
        if self.sequences == 0 {
            return Err(Error::Config("sequence count must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Curve {
    offset: f64,
    slope: f64,
    curvature: f64,
    amplitude: f64,
    frequency: f64,
    phase: f64,
}

impl Curve {
    fn at(&self, tau: f64) -> f64 {
        self.offset
            + self.slope * tau
            + self.curvature * tau * tau
            + self.amplitude * (2.0 * PI * self.frequency * tau + self.phase).sin()
    }
}

/// Per-class prototype trajectories.
#[derive(Debug, Clone)]
pub struct Prototypes {
    curves: Vec<Vec<Curve>>,
}

impl Prototypes {
    fn random(classes: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let curves = (0..classes)
            .map(|_| {
                (0..dim)
                    .map(|_| Curve {
                        offset: rng.random_range(-1.5..=1.5),
                        slope: rng.random_range(-1.0..=1.0),
                        curvature: rng.random_range(-1.0..=1.0),
                        amplitude: rng.random_range(0.3..=1.0),
                        frequency: rng.random_range(0.5..=1.5),
                        phase: rng.random_range(0.0..2.0 * PI),
                    })
                    .collect()
            })
            .collect();
        Self { curves }
    }

    pub fn classes(&self) -> usize {
        self.curves.len()
    }

    /// The noiseless prototype of `class` resampled to `len` frames.
    pub fn sample(&self, class: usize, len: usize) -> Array2<f64> {
        let curves = &self.curves[class];
        Array2::from_shape_fn((len, curves.len()), |(i, e)| {
            let tau = if len > 1 {
                i as f64 / (len - 1) as f64
            } else {
                0.0
            };
            curves[e].at(tau)
        })
    }
}

/// Seeded generator; prototypes are drawn first, then sequences, from one
/// ChaCha stream.
pub struct SyntheticGenerator {
    config: GeneratorConfig,
    prototypes: Prototypes,
    rng: ChaCha8Rng,
}

impl SyntheticGenerator {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prototypes = Prototypes::random(config.classes, config.dim, &mut rng);
        Ok(Self {
            config,
            prototypes,
            rng,
        })
    }

    pub fn prototypes(&self) -> &Prototypes {
        &self.prototypes
    }

    pub fn generate(mut self) -> Result<Dataset> {
        let cfg = self.config.clone();
        let labels = LabelSet::new((0..cfg.classes).map(|c| format!("c{c}")))?;
        let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::Config(e.to_string()))?;
        let rng = &mut self.rng;

        let mut sequences = Vec::with_capacity(cfg.sequences);
        let mut bounds_by_id = Vec::with_capacity(cfg.sequences);
        for n in 0..cfg.sequences {
            let n_segments = rng.random_range(cfg.segments.0..=cfg.segments.1);
            let mut classes = Vec::with_capacity(n_segments);
            let mut lens = Vec::with_capacity(n_segments);
            for k in 0..n_segments {
                let class = match classes.last() {
                    None => rng.random_range(0..cfg.classes),
                    Some(&prev) => {
                        let c = rng.random_range(0..cfg.classes - 1);
                        if c >= prev {
                            c + 1
                        } else {
                            c
                        }
                    }
                };
                debug_assert!(k == 0 || classes[k - 1] != class);
                classes.push(class);
                lens.push(rng.random_range(cfg.segment_len.0..=cfg.segment_len.1));
            }

            let total: usize = lens.iter().sum();
            let mut frames = Array2::zeros((total, cfg.dim));
            let mut frame_labels = Vec::with_capacity(total);
            let mut bounds = vec![0];
            let mut start = 0;
            for (&class, &len) in classes.iter().zip(&lens) {
                let proto = self.prototypes.sample(class, len);
                frames.slice_mut(s![start..start + len, ..]).assign(&proto);
                frame_labels.extend(std::iter::repeat_n(class, len));
                start += len;
                bounds.push(start);
            }
            if cfg.noise > 0.0 {
                frames.mapv_inplace(|v| v + noise.sample(rng));
            }

            let id = format!("seq-{n:04}");
            sequences.push(
                Sequence::new(id.clone(), frames)
                    .with_frame_labels(frame_labels)
                    .with_label_seq(classes),
            );
            bounds_by_id.push((id, bounds));
        }

        let mut ds = Dataset::new(labels, sequences)?;
        ds.meta.insert("generator".into(), "synthetic".into());
        for (id, bounds) in bounds_by_id {
            ds.set_segment_bounds(&id, &bounds);
        }
        Ok(ds)
    }
}

pub fn generate_synthetic(config: GeneratorConfig, seed: u64) -> Result<Dataset> {
    SyntheticGenerator::new(config, seed)?.generate()
}
