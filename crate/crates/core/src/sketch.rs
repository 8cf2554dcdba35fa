//! Gradient summaries sent in the summary-transmission phase.
//!
//! A summary is either the exact gradient or a Rademacher projection
//! `v ↦ M v / √p` where `M` is a `p × d` matrix of ±1 entries. The matrix is
//! regenerated from `(seed, round, segment id)` on every client, so it is
//! never transmitted and summaries from different clients are comparable.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{FedselError, Result};
use crate::numerics::{cos_p_multilayer, GradientVector, Polarization, Segment};
use crate::rng;

pub const DEFAULT_SKETCH_DIM: usize = 256;
pub const BYTES_PER_VALUE: u64 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SketchMode {
    #[default]
    Exact,
    SignProjection { sketch_dim: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SketchConfig {
    #[serde(flatten)]
    pub mode: SketchMode,
    #[serde(default = "default_per_segment")]
    pub per_segment: bool,
}

fn default_per_segment() -> bool {
    true
}

impl Default for SketchConfig {
    fn default() -> Self {
        Self {
            mode: SketchMode::Exact,
            per_segment: true,
        }
    }
}

impl SketchConfig {
    /// Checks the projection fits every segment (or the whole vector) of a
    /// gradient with the given segment lengths.
    pub fn validate_for(&self, segment_lens: &[usize]) -> Result<()> {
        if let SketchMode::SignProjection { sketch_dim, .. } = self.mode {
            if sketch_dim < 8 {
                return Err(FedselError::Config(format!(
                    "sketch_dim must be >= 8, got {sketch_dim}"
                )));
            }
            let dims: Vec<usize> = if self.per_segment {
                segment_lens.to_vec()
            } else {
                vec![segment_lens.iter().sum()]
            };
            if let Some(d) = dims.iter().find(|&&d| d < sketch_dim) {
                return Err(FedselError::Config(format!(
                    "sketch_dim {sketch_dim} exceeds segment dimension {d}"
                )));
            }
        }
        Ok(())
    }

    /// Bytes one client sends in the summary phase.
    pub fn summary_bytes(&self, segment_lens: &[usize]) -> u64 {
        let entries = match self.mode {
            SketchMode::Exact => segment_lens.iter().sum::<usize>(),
            SketchMode::SignProjection { sketch_dim, .. } => {
                if self.per_segment {
                    sketch_dim * segment_lens.len()
                } else {
                    sketch_dim
                }
            }
        };
        BYTES_PER_VALUE * entries as u64
    }
}

/// Bytes one selected client sends in the full-gradient phase.
pub fn full_gradient_bytes(num_params: usize) -> u64 {
    BYTES_PER_VALUE * num_params as u64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientSummary {
    pub client_id: usize,
    pub round: usize,
    pub config: SketchConfig,
    pub values: GradientVector,
    pub byte_cost: u64,
}

/// Rademacher projection of `v` to `dim` coordinates, scaled by `1/√dim`.
fn project(v: &[f64], dim: usize, seed: u64, round: usize, label: &str) -> Vec<f64> {
    let mut rng = rng::labeled_stream(seed, rng::STREAM_SKETCH, round, label);
    let scale = 1.0 / (dim as f64).sqrt();
    let mut out = Vec::with_capacity(dim);
    for _ in 0..dim {
        let mut acc = 0.0;
        let mut bits = 0u64;
        for (j, x) in v.iter().enumerate() {
            if j % 64 == 0 {
                bits = rng.next_u64();
            }
            if bits & 1 == 1 {
                acc += x;
            } else {
                acc -= x;
            }
            bits >>= 1;
        }
        out.push(acc * scale);
    }
    out
}

/// Summary `φ(g)` of one client's gradient at `round`.
pub fn sketch(g: &GradientVector, cfg: &SketchConfig, client_id: usize, round: usize) -> Result<GradientSummary> {
    let lens: Vec<usize> = g.segments().iter().map(|s| s.values.len()).collect();
    cfg.validate_for(&lens)?;
    let values = match cfg.mode {
        SketchMode::Exact => g.clone(),
        SketchMode::SignProjection { sketch_dim, seed } => {
            if cfg.per_segment {
                GradientVector::new(
                    g.segments()
                        .iter()
                        .map(|s| Segment {
                            id: s.id.clone(),
                            values: project(&s.values, sketch_dim, seed, round, &s.id),
                        })
                        .collect(),
                )?
            } else {
                GradientVector::from_flat(project(&g.flatten(), sketch_dim, seed, round, "all"))?
            }
        }
    };
    let byte_cost = BYTES_PER_VALUE * values.total_dim() as u64;
    Ok(GradientSummary {
        client_id,
        round,
        config: *cfg,
        values,
        byte_cost,
    })
}

/// Checks that two summaries were produced under the same round, projection
/// and layout.
pub fn check_comparable(a: &GradientSummary, b: &GradientSummary) -> Result<()> {
    if a.round != b.round {
        return Err(FedselError::Comparability(format!(
            "rounds {} and {} differ",
            a.round, b.round
        )));
    }
    if a.config != b.config {
        return Err(FedselError::Comparability(
            "summaries use different sketch configurations".into(),
        ));
    }
    if !a.values.same_layout(&b.values) {
        return Err(FedselError::Comparability(
            "summaries have different segment layouts".into(),
        ));
    }
    Ok(())
}

/// cos_p between two clients estimated from their summaries; in exact mode
/// this is the true cos_p.
pub fn estimate_cos_p(
    a: &GradientSummary,
    b: &GradientSummary,
    p: f64,
    variant: Polarization,
    weights: Option<&[f64]>,
) -> Result<f64> {
    check_comparable(a, b)?;
    cos_p_multilayer(&a.values, &b.values, p, variant, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::cos_p;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn random_gradient(d: usize, seed: u64) -> GradientVector {
        let mut r = rng::stream(seed, "test-gradient");
        GradientVector::from_flat((0..d).map(|_| r.sample(StandardNormal)).collect()).unwrap()
    }

    fn proj(dim: usize, seed: u64) -> SketchConfig {
        SketchConfig {
            mode: SketchMode::SignProjection { sketch_dim: dim, seed },
            per_segment: true,
        }
    }

    #[test]
    fn exact_mode_is_identity() {
        let g = random_gradient(40, 1);
        let s = sketch(&g, &SketchConfig::default(), 3, 7).unwrap();
        assert_eq!(s.values, g);
        assert_eq!(s.byte_cost, 8 * 40);
    }

    #[test]
    fn projection_is_linear_and_seeded() {
        let g = random_gradient(100, 1);
        let h = random_gradient(100, 2);
        let cfg = proj(16, 5);
        let sg = sketch(&g, &cfg, 0, 3).unwrap();
        let sh = sketch(&h, &cfg, 1, 3).unwrap();
        let sum = GradientVector::from_flat(
            g.flatten().iter().zip(h.flatten()).map(|(a, b)| a + b).collect(),
        )
        .unwrap();
        let ssum = sketch(&sum, &cfg, 2, 3).unwrap();
        for ((a, b), c) in sg.values.flatten().iter().zip(sh.values.flatten()).zip(ssum.values.flatten()) {
            assert!((a + b - c).abs() < 1e-12);
        }
        let scaled = sketch(&g.scaled(-2.5).unwrap(), &cfg, 0, 3).unwrap();
        for (a, b) in sg.values.flatten().iter().zip(scaled.values.flatten()) {
            assert!((-2.5 * a - b).abs() < 1e-12);
        }
        // same seed/round/segment -> same matrix regardless of client
        assert_eq!(sketch(&g, &cfg, 9, 3).unwrap().values, sg.values);
        assert_ne!(sketch(&g, &cfg, 0, 4).unwrap().values, sg.values);
        assert_eq!(sg.byte_cost, 8 * 16);
    }

    #[test]
    fn oversized_sketch_is_config_error() {
        let g = random_gradient(10, 0);
        assert!(matches!(sketch(&g, &proj(16, 0), 0, 0), Err(FedselError::Config(_))));
        let whole = SketchConfig { per_segment: false, ..proj(8, 0) };
        let two = GradientVector::new(vec![
            Segment { id: "a".into(), values: vec![1.0; 5] },
            Segment { id: "b".into(), values: vec![1.0; 5] },
        ])
        .unwrap();
        assert!(sketch(&two, &proj(8, 0), 0, 0).is_err());
        let s = sketch(&two, &whole, 0, 0).unwrap();
        assert_eq!(s.values.segments().len(), 1);
    }

    #[test]
    fn estimate_matches_exact_and_checks_comparability() {
        let g = random_gradient(64, 1);
        let h = random_gradient(64, 2);
        let ex = SketchConfig::default();
        let (a, b) = (sketch(&g, &ex, 0, 0).unwrap(), sketch(&h, &ex, 1, 0).unwrap());
        let est = estimate_cos_p(&a, &b, 4.0, Polarization::Powered, None).unwrap();
        let truth = cos_p(&g.flatten(), &h.flatten(), 4.0, Polarization::Powered).unwrap();
        assert_eq!(est.to_bits(), truth.to_bits());
        let self_sim = estimate_cos_p(&a, &a, 4.0, Polarization::Powered, None).unwrap();
        assert!((self_sim - 1.0).abs() < 1e-12);

        let later = sketch(&h, &ex, 1, 1).unwrap();
        assert!(matches!(
            estimate_cos_p(&a, &later, 2.0, Polarization::Powered, None),
            Err(FedselError::Comparability(_))
        ));
        let other_seed = sketch(&h, &proj(16, 1), 1, 0).unwrap();
        let seeded = sketch(&g, &proj(16, 2), 0, 0).unwrap();
        assert!(estimate_cos_p(&seeded, &other_seed, 2.0, Polarization::Powered, None).is_err());
    }

    #[test]
    fn byte_accounting() {
        let lens = [100, 30];
        assert_eq!(SketchConfig::default().summary_bytes(&lens), 8 * 130);
        assert_eq!(proj(16, 0).summary_bytes(&lens), 8 * 32);
        let whole = SketchConfig { per_segment: false, ..proj(16, 0) };
        assert_eq!(whole.summary_bytes(&lens), 8 * 16);
        assert_eq!(full_gradient_bytes(130), 1040);
    }
}
