//! Vector math for gradients: L_p norms, power-norm polarization inner
//! products, cos_p similarities and coordinate moments.

use serde::{Deserialize, Serialize};

use crate::error::{FedselError, Result};

/// Polarization form used to build the L_p inner product.
///
/// `Powered` computes `(‖u+v‖_p^p − ‖u−v‖_p^p) / 2^p` and normalizes by
/// `‖u‖_p^(p/2)·‖v‖_p^(p/2)`, so p = 2 is the Euclidean dot product and
/// `cos_p(u, u) = 1`. `Literal` computes `(‖u+v‖_p − ‖u−v‖_p) / 4` and
/// normalizes by `‖u‖_p·‖v‖_p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Polarization {
    #[default]
    Powered,
    Literal,
}

/// One named block of a gradient (one model layer).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub id: String,
    pub values: Vec<f64>,
}

/// Flat gradient split into ordered, uniquely named segments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientVector {
    segments: Vec<Segment>,
    total_dim: usize,
}

impl GradientVector {
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        if segments.is_empty() {
            return Err(FedselError::Dimension(
                "gradient needs at least one segment".into(),
            ));
        }
        for (i, s) in segments.iter().enumerate() {
            if s.values.is_empty() {
                return Err(FedselError::Dimension(format!("segment '{}' is empty", s.id)));
            }
            if segments[..i].iter().any(|o| o.id == s.id) {
                return Err(FedselError::Layout(format!("duplicate segment id '{}'", s.id)));
            }
            if let Some(pos) = s.values.iter().position(|v| !v.is_finite()) {
                return Err(FedselError::Numeric(format!(
                    "segment '{}' has non-finite value at {pos}",
                    s.id
                )));
            }
        }
        let total_dim = segments.iter().map(|s| s.values.len()).sum();
        Ok(Self {
            segments,
            total_dim,
        })
    }

    /// Single-segment gradient with id `"all"`.
    pub fn from_flat(values: Vec<f64>) -> Result<Self> {
        Self::new(vec![Segment {
            id: "all".into(),
            values,
        }])
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, id: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.id == id)
    }

    pub fn total_dim(&self) -> usize {
        self.total_dim
    }

    /// Concatenation of all segments in order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_dim);
        for s in &self.segments {
            out.extend_from_slice(&s.values);
        }
        out
    }

    pub fn same_layout(&self, other: &GradientVector) -> bool {
        self.segments.len() == other.segments.len()
            && self
                .segments
                .iter()
                .zip(&other.segments)
                .all(|(a, b)| a.id == b.id && a.values.len() == b.values.len())
    }

    /// Restricts the gradient to the listed segments, in the listed order.
    pub fn select_segments(&self, ids: &[String]) -> Result<GradientVector> {
        let mut out = Vec::with_capacity(ids.len());
        for id in ids {
            let seg = self
                .segment(id)
                .ok_or_else(|| FedselError::Layout(format!("unknown segment '{id}'")))?;
            out.push(seg.clone());
        }
        GradientVector::new(out)
    }

    pub fn scaled(&self, alpha: f64) -> Result<GradientVector> {
        GradientVector::new(
            self.segments
                .iter()
                .map(|s| Segment {
                    id: s.id.clone(),
                    values: s.values.iter().map(|v| v * alpha).collect(),
                })
                .collect(),
        )
    }

    /// Arithmetic mean `(1/J) Σ g_s`, summed in the given order. Non-finite
    /// results are returned as-is so the caller can report divergence.
    pub fn mean(parts: &[&GradientVector]) -> Result<GradientVector> {
        let first = parts
            .first()
            .ok_or_else(|| FedselError::Dimension("mean of zero gradients".into()))?;
        if parts.iter().any(|g| !g.same_layout(first)) {
            return Err(FedselError::Layout(
                "cannot average gradients with different layouts".into(),
            ));
        }
        let n = parts.len() as f64;
        let segments = first
            .segments
            .iter()
            .enumerate()
            .map(|(si, seg)| {
                let mut acc = vec![0.0; seg.values.len()];
                for g in parts {
                    for (a, v) in acc.iter_mut().zip(&g.segments[si].values) {
                        *a += v;
                    }
                }
                acc.iter_mut().for_each(|a| *a /= n);
                Segment {
                    id: seg.id.clone(),
                    values: acc,
                }
            })
            .collect();
        Ok(Self::from_parts_unchecked(segments))
    }

    pub fn is_all_finite(&self) -> bool {
        self.segments
            .iter()
            .all(|s| s.values.iter().all(|v| v.is_finite()))
    }

    /// Unchecked constructor for internal aggregation; may hold non-finite
    /// values that the caller is expected to inspect.
    pub(crate) fn from_parts_unchecked(segments: Vec<Segment>) -> Self {
        let total_dim = segments.iter().map(|s| s.values.len()).sum();
        Self {
            segments,
            total_dim,
        }
    }
}

fn check_p(p: f64) -> Result<()> {
    if !(p.is_finite() && p > 0.0) {
        return Err(FedselError::Numeric(format!("norm order must be positive, got {p}")));
    }
    Ok(())
}

fn check_vector(v: &[f64]) -> Result<()> {
    if v.is_empty() {
        return Err(FedselError::Dimension("empty vector".into()));
    }
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return Err(FedselError::Numeric(format!("non-finite entry at index {i}")));
    }
    Ok(())
}

fn check_pair(u: &[f64], v: &[f64]) -> Result<()> {
    if u.len() != v.len() {
        return Err(FedselError::Dimension(format!(
            "length mismatch: {} vs {}",
            u.len(),
            v.len()
        )));
    }
    check_vector(u)?;
    check_vector(v)
}

#[inline]
fn abs_pow(x: f64, p: f64) -> f64 {
    let a = x.abs();
    if p == 1.0 {
        a
    } else if p == 2.0 {
        a * a
    } else if p == 4.0 {
        let s = a * a;
        s * s
    } else {
        a.powf(p)
    }
}

/// Σ |x_i|^p, the p-th power of the L_p norm.
fn power_sum<I: Iterator<Item = f64>>(it: I, p: f64) -> f64 {
    it.map(|x| abs_pow(x, p)).sum()
}

fn root(s: f64, p: f64) -> f64 {
    if p == 1.0 {
        s
    } else if p == 2.0 {
        s.sqrt()
    } else if p == 4.0 {
        s.sqrt().sqrt()
    } else {
        s.powf(1.0 / p)
    }
}

/// (Σ |v_i|^p)^(1/p).
pub fn lp_norm(v: &[f64], p: f64) -> Result<f64> {
    check_p(p)?;
    check_vector(v)?;
    Ok(root(power_sum(v.iter().copied(), p), p))
}

/// L_p polarization inner product in the requested form.
pub fn power_inner(u: &[f64], v: &[f64], p: f64, variant: Polarization) -> Result<f64> {
    check_p(p)?;
    check_pair(u, v)?;
    let plus = power_sum(u.iter().zip(v).map(|(a, b)| a + b), p);
    let minus = power_sum(u.iter().zip(v).map(|(a, b)| a - b), p);
    Ok(match variant {
        Polarization::Powered => (plus - minus) / 2f64.powf(p),
        Polarization::Literal => (root(plus, p) - root(minus, p)) / 4.0,
    })
}

/// Power-norm cosine similarity. Zero-norm inputs are a
/// [`FedselError::DegenerateGradient`].
pub fn cos_p(u: &[f64], v: &[f64], p: f64, variant: Polarization) -> Result<f64> {
    let inner = power_inner(u, v, p, variant)?;
    let su = power_sum(u.iter().copied(), p);
    let sv = power_sum(v.iter().copied(), p);
    if su == 0.0 || sv == 0.0 {
        return Err(FedselError::DegenerateGradient(
            "zero-norm vector in cos_p".into(),
        ));
    }
    let denom = match variant {
        Polarization::Powered => su.sqrt() * sv.sqrt(),
        Polarization::Literal => root(su, p) * root(sv, p),
    };
    Ok(inner / denom)
}

/// Weighted sum of per-segment cos_p. `weights = None` means uniform.
/// Segments with weight zero are skipped entirely.
pub fn cos_p_multilayer(
    a: &GradientVector,
    b: &GradientVector,
    p: f64,
    variant: Polarization,
    weights: Option<&[f64]>,
) -> Result<f64> {
    if !a.same_layout(b) {
        return Err(FedselError::Layout(
            "gradients do not share a segment layout".into(),
        ));
    }
    let n = a.segments().len();
    let uniform;
    let w = match weights {
        Some(w) => {
            validate_weights(w, n)?;
            w
        }
        None => {
            uniform = vec![1.0 / n as f64; n];
            &uniform[..]
        }
    };
    let mut total = 0.0;
    for ((sa, sb), &wi) in a.segments().iter().zip(b.segments()).zip(w) {
        if wi == 0.0 {
            continue;
        }
        total += wi * cos_p(&sa.values, &sb.values, p, variant)?;
    }
    Ok(total)
}

/// Checks that `w` has one non-negative entry per segment summing to 1.
pub fn validate_weights(w: &[f64], segments: usize) -> Result<()> {
    if w.len() != segments {
        return Err(FedselError::Layout(format!(
            "{} segment weights for {segments} segments",
            w.len()
        )));
    }
    if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(FedselError::Config("segment weights must be non-negative".into()));
    }
    let s: f64 = w.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(FedselError::Config(format!("segment weights sum to {s}, not 1")));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn check_stat_len(v: &[f64]) -> Result<()> {
    if v.len() < 2 {
        return Err(FedselError::Dimension(format!(
            "moments need at least 2 coordinates, got {}",
            v.len()
        )));
    }
    check_vector(v)
}

/// Population variance over coordinates.
pub fn variance(v: &[f64]) -> Result<f64> {
    covariance(v, v)
}

/// Raw fourth standardized moment m4 / m2² (population moments).
pub fn kurtosis(v: &[f64]) -> Result<f64> {
    check_stat_len(v)?;
    let m = mean(v);
    let n = v.len() as f64;
    let (m2, m4) = v.iter().fold((0.0, 0.0), |(m2, m4), &x| {
        let d = (x - m) * (x - m);
        (m2 + d, m4 + d * d)
    });
    let (m2, m4) = (m2 / n, m4 / n);
    if m2 == 0.0 {
        return Err(FedselError::DegenerateStatistic(
            "kurtosis of a constant vector".into(),
        ));
    }
    Ok(m4 / (m2 * m2))
}

/// Population covariance of coordinates.
pub fn covariance(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(FedselError::Dimension(format!(
            "length mismatch: {} vs {}",
            u.len(),
            v.len()
        )));
    }
    check_stat_len(u)?;
    check_stat_len(v)?;
    let (mu, mv) = (mean(u), mean(v));
    let s: f64 = u.iter().zip(v).map(|(a, b)| (a - mu) * (b - mv)).sum();
    Ok(s / u.len() as f64)
}

/// Pearson correlation of coordinates.
pub fn pearson(u: &[f64], v: &[f64]) -> Result<f64> {
    let c = covariance(u, v)?;
    let (vu, vv) = (variance(u)?, variance(v)?);
    if vu == 0.0 || vv == 0.0 {
        return Err(FedselError::DegenerateStatistic(
            "pearson correlation with a constant vector".into(),
        ));
    }
    Ok(c / (vu.sqrt() * vv.sqrt()))
}
