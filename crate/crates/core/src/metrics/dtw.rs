//! Dynamic time warping between series of distributions.

use serde::{Deserialize, Serialize};

use crate::domain::MeanField;
use crate::error::{Error, Result};

/// Local cost between two distribution vectors.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepCost {
    #[default]
    L1,
    L2,
}

impl StepCost {
    pub fn eval(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            StepCost::L1 => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
            StepCost::L2 => a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt(),
        }
    }
}

/// Classic unconstrained DTW:
/// `D(i,j) = c(i,j) + min(D(i-1,j), D(i,j-1), D(i-1,j-1))`, `D(0,0) = c(0,0)`.
pub fn dtw<T, F>(a: &[T], b: &[T], cost: F) -> Result<f64>
where
    F: Fn(&T, &T) -> f64,
{
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySeries);
    }
    let mut prev = vec![f64::INFINITY; b.len()];
    let mut cur = vec![f64::INFINITY; b.len()];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            let c = cost(x, y);
            let best = if i == 0 && j == 0 {
                0.0
            } else {
                let up = prev[j];
                let left = if j > 0 { cur[j - 1] } else { f64::INFINITY };
                let diag = if j > 0 { prev[j - 1] } else { f64::INFINITY };
                up.min(left).min(diag)
            };
            cur[j] = c + best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[b.len() - 1])
}

pub fn dtw_distance(a: &[MeanField], b: &[MeanField], step_cost: StepCost) -> Result<f64> {
    dtw(a, b, |x, y| step_cost.eval(x.probs(), y.probs()))
}

/// Keep every `stride`-th element (stride 0 or 1 keeps everything).
pub fn downsample<T: Clone>(series: &[T], stride: usize) -> Vec<T> {
    series.iter().step_by(stride.max(1)).cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn scalar_reference_table() {
        let a = [0.0, 1.0, 2.0];
        let b = [0.0, 2.0, 4.0];
        assert_eq!(dtw(&a, &b, |x: &f64, y: &f64| (x - y).abs()).unwrap(), 3.0);
    }

    #[test]
    fn degenerate_series() {
        let m = |v: &[f64]| MeanField::new(v.to_vec()).unwrap();
        let a = [m(&[1.0, 0.0])];
        let b = [m(&[0.25, 0.75])];
        assert_eq!(dtw_distance(&a, &b, StepCost::L1).unwrap(), 1.5);
        assert!(matches!(
            dtw_distance(&a, &[], StepCost::L1),
            Err(Error::EmptySeries)
        ));
        assert_eq!(dtw_distance(&a, &a, StepCost::L2).unwrap(), 0.0);
    }

    #[test]
    fn downsample_keeps_every_kth() {
        assert_eq!(downsample(&[1, 2, 3, 4, 5], 2), vec![1, 3, 5]);
        assert_eq!(downsample(&[1, 2], 0), vec![1, 2]);
    }

    proptest! {
        #[test]
        fn dtw_basic_properties(
            a in proptest::collection::vec(-5.0f64..5.0, 1..12),
            b in proptest::collection::vec(-5.0f64..5.0, 1..12),
            tail in proptest::collection::vec(-5.0f64..5.0, 0..5),
        ) {
            let c = |x: &f64, y: &f64| (x - y).abs();
            prop_assert_eq!(dtw(&a, &a, c).unwrap(), 0.0);
            let d = dtw(&a, &b, c).unwrap();
            prop_assert!(d >= 0.0);
            let mut at = a.clone();
            let mut bt = b.clone();
            at.extend(&tail);
            bt.extend(&tail);
            prop_assert!(dtw(&at, &bt, c).unwrap() <= d + 1e-12);
        }
    }
}
