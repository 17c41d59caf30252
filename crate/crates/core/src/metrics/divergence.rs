//! KL divergence and 1-Wasserstein distance between categorical
//! distributions.

use crate::domain::MeanField;
use crate::error::{Error, Result};

/// Additive smoothing applied to the second argument of [`kl_divergence`].
pub const KL_SMOOTHING: f64 = 1e-10;

/// `KL(p || q~)` in nats on raw slices, with
/// `q~ = (q + eps) / (1 + n * eps)` and `0 * ln(0 / .) = 0`.
pub fn kl_smoothed(p: &[f64], q: &[f64]) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    let n = q.len() as f64;
    let denom = 1.0 + n * KL_SMOOTHING;
    let mut kl = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            let qs = (qi + KL_SMOOTHING) / denom;
            kl += pi * (pi / qs).ln();
        }
    }
    kl.max(0.0)
}

/// `KL(p || q)` with the smoothing rule above. Order is (real || simulated).
pub fn kl_divergence(p: &MeanField, q: &MeanField) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    Ok(kl_smoothed(p.probs(), q.probs()))
}

/// Ground metric for [`wasserstein_distance`]: the coordinates of the ordered
/// labels on a line. `None` means unit spacing.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundMetric {
    pub positions: Option<Vec<f64>>,
}

impl GroundMetric {
    pub fn unit() -> Self {
        GroundMetric { positions: None }
    }

    pub fn with_positions(positions: Vec<f64>) -> Result<Self> {
        if positions.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config(
                "ground-metric positions must be strictly increasing".into(),
            ));
        }
        Ok(GroundMetric {
            positions: Some(positions),
        })
    }

    fn gap(&self, i: usize) -> f64 {
        match &self.positions {
            Some(x) => x[i + 1] - x[i],
            None => 1.0,
        }
    }
}

/// 1-Wasserstein distance on ordered labels: `sum_i |CDF_p(i) - CDF_q(i)| * gap_i`.
pub fn wasserstein_with(p: &[f64], q: &[f64], metric: &GroundMetric) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    if let Some(x) = &metric.positions {
        if x.len() != p.len() {
            return Err(Error::LengthMismatch {
                left: x.len(),
                right: p.len(),
            });
        }
    }
    let (mut cp, mut cq, mut w) = (0.0, 0.0, 0.0);
    for i in 0..p.len().saturating_sub(1) {
        cp += p[i];
        cq += q[i];
        w += (cp - cq).abs() * metric.gap(i);
    }
    Ok(w)
}

pub fn wasserstein_distance(p: &MeanField, q: &MeanField) -> Result<f64> {
    wasserstein_with(p.probs(), q.probs(), &GroundMetric::unit())
}
