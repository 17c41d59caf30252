//! Macro and micro F1 over single-label classifications.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Scores {
    pub macro_f1: f64,
    pub micro_f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let p = ratio(tp, tp + fp);
    let r = ratio(tp, tp + fn_);
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Per-class F1 averaged over classes that occur in either sequence, and
/// F1 from pooled counts.
pub fn f1_scores<S: AsRef<str>>(truth: &[S], predicted: &[S], label_set: &[S]) -> Result<F1Scores> {
    if truth.len() != predicted.len() {
        return Err(Error::LengthMismatch {
            left: truth.len(),
            right: predicted.len(),
        });
    }
    let k = label_set.len();
    let index = |l: &str| {
        label_set
            .iter()
            .position(|x| x.as_ref() == l)
            .ok_or_else(|| Error::UnknownLabel {
                label: l.to_string(),
                context: "f1 label set".into(),
            })
    };
    let (mut tp, mut fp, mut fn_) = (vec![0usize; k], vec![0usize; k], vec![0usize; k]);
    for (t, p) in truth.iter().zip(predicted) {
        let (ti, pi) = (index(t.as_ref())?, index(p.as_ref())?);
        if ti == pi {
            tp[ti] += 1;
        } else {
            fp[pi] += 1;
            fn_[ti] += 1;
        }
    }
    let present: Vec<usize> = (0..k).filter(|&c| tp[c] + fp[c] + fn_[c] > 0).collect();
    let macro_f1 = if present.is_empty() {
        0.0
    } else {
        present
            .iter()
            .map(|&c| f1(tp[c], fp[c], fn_[c]))
            .sum::<f64>()
            / present.len() as f64
    };
    let micro_f1 = f1(tp.iter().sum(), fp.iter().sum(), fn_.iter().sum());
    Ok(F1Scores { macro_f1, micro_f1 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn reference_cases() {
        let s = f1_scores(&["A", "A", "B"], &["A", "B", "B"], &["A", "B", "C"]).unwrap();
        assert!((s.macro_f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.micro_f1 - 2.0 / 3.0).abs() < 1e-12);
        let s = f1_scores(&["A", "B"], &["A", "B"], &["A", "B", "C", "D"]).unwrap();
        assert_eq!((s.macro_f1, s.micro_f1), (1.0, 1.0));
        assert!(matches!(
            f1_scores(&["A"], &[], &["A"]),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(matches!(
            f1_scores(&["A"], &["Z"], &["A"]),
            Err(Error::UnknownLabel { .. })
        ));
    }

    /// Builds the full confusion matrix and derives every count from it.
    fn oracle(truth: &[usize], pred: &[usize], k: usize) -> (f64, f64) {
        let mut cm = vec![vec![0usize; k]; k];
        for (&t, &p) in truth.iter().zip(pred) {
            cm[t][p] += 1;
        }
        let mut per_class = Vec::new();
        let (mut stp, mut sfp, mut sfn) = (0, 0, 0);
        for c in 0..k {
            let tp = cm[c][c];
            let fp: usize = (0..k).filter(|&r| r != c).map(|r| cm[r][c]).sum();
            let fn_: usize = (0..k).filter(|&q| q != c).map(|q| cm[c][q]).sum();
            stp += tp;
            sfp += fp;
            sfn += fn_;
            if tp + fp + fn_ > 0 {
                let prec = if tp + fp > 0 {
                    tp as f64 / (tp + fp) as f64
                } else {
                    0.0
                };
                let rec = if tp + fn_ > 0 {
                    tp as f64 / (tp + fn_) as f64
                } else {
                    0.0
                };
                per_class.push(if prec + rec > 0.0 {
                    2.0 * prec * rec / (prec + rec)
                } else {
                    0.0
                });
            }
        }
        let macro_f1 = if per_class.is_empty() {
            0.0
        } else {
            per_class.iter().sum::<f64>() / per_class.len() as f64
        };
        let prec = if stp + sfp > 0 {
            stp as f64 / (stp + sfp) as f64
        } else {
            0.0
        };
        let rec = if stp + sfn > 0 {
            stp as f64 / (stp + sfn) as f64
        } else {
            0.0
        };
        let micro = if prec + rec > 0.0 {
            2.0 * prec * rec / (prec + rec)
        } else {
            0.0
        };
        (macro_f1, micro)
    }

    #[test]
    fn matches_confusion_matrix_oracle_and_micro_is_accuracy() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let names = ["a", "b", "c", "d", "e"];
        for _ in 0..1000 {
            let k = rng.random_range(1..=5);
            let n = rng.random_range(1..=20);
            let t: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            let p: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            let ts: Vec<&str> = t.iter().map(|&i| names[i]).collect();
            let ps: Vec<&str> = p.iter().map(|&i| names[i]).collect();
            let got = f1_scores(&ts, &ps, &names[..k]).unwrap();
            let (ma, mi) = oracle(&t, &p, k);
            assert_eq!(got.macro_f1, ma);
            assert_eq!(got.micro_f1, mi);
            let acc = t.iter().zip(&p).filter(|(a, b)| a == b).count() as f64 / n as f64;
            assert!((got.micro_f1 - acc).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&got.macro_f1));
        }
    }
}
