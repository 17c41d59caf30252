//! Named parameter tensors and the AdamW optimizer.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Tensor {
            name: name.into(),
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(name: impl Into<String>, rows: usize, cols: usize, v: f64) -> Self {
        Tensor {
            name: name.into(),
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }
}

/// Global L2 norm over a set of gradient buffers.
pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Rescale `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads
            .iter_mut()
            .flat_map(|g| g.iter_mut())
            .for_each(|x| *x *= s);
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adaptive moments with decoupled weight decay:
/// `θ ← θ − lr·(m̂ / (√v̂ + ε) + λ·θ)`.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, shapes: &[usize]) -> Self {
        AdamW {
            config,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Vec<f64>]) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..p.data.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let update =
                    (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps) + c.weight_decay * p.data[i];
                p.data[i] -= c.lr * update;
            }
        }
    }
}

/// Settings of a central finite-difference gradient check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tolerance: f64,
    /// Entries checked per tensor.
    pub per_tensor: usize,
    pub seed: u64,
    /// Multiplies the analytic gradient; anything but 1 is a deliberate
    /// corruption for negative controls.
    pub backward_scale: f64,
    /// Denominator floor of the relative error, so that gradients at
    /// round-off level are compared absolutely.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-5,
            tolerance: 1e-4,
            per_tensor: 2,
            seed: 0,
            backward_scale: 1.0,
            floor: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
    pub worst: Option<(String, usize)>,
    pub pass: bool,
}

/// Compare `analytic` against `(L(θ+h) − L(θ−h)) / 2h` on a random subset
/// of entries of every tensor. Relative error is
/// `|a − n| / max(|a|, |n|, floor)`.
pub fn check_gradients(
    params: &[Tensor],
    analytic: &[Vec<f64>],
    opts: &GradCheckOptions,
    mut loss: impl FnMut(&[Tensor]) -> f64,
) -> GradCheckReport {
    use rand::Rng as _;
    let mut rng = crate::rng::substream(opts.seed, "gradient-check");
    let mut work = params.to_vec();
    let mut max_err = 0.0f64;
    let mut worst = None;
    let mut checked = 0;
    for (ti, t) in params.iter().enumerate() {
        if t.data.is_empty() {
            continue;
        }
        for _ in 0..opts.per_tensor.min(t.data.len()) {
            let j = rng.random_range(0..t.data.len());
            let orig = t.data[j];
            work[ti].data[j] = orig + opts.h;
            let up = loss(&work);
            work[ti].data[j] = orig - opts.h;
            let down = loss(&work);
            work[ti].data[j] = orig;
            let numeric = (up - down) / (2.0 * opts.h);
            let a = analytic[ti][j] * opts.backward_scale;
            let denom = a.abs().max(numeric.abs()).max(opts.floor);
            let err = (a - numeric).abs() / denom;
            if !(err <= max_err) {
                max_err = if err.is_nan() { f64::INFINITY } else { err };
                worst = Some((t.name.clone(), j));
            }
            checked += 1;
        }
    }
    GradCheckReport {
        max_relative_error: max_err,
        checked,
        worst,
        pass: max_err <= opts.tolerance,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_in_sign_direction() {
        let mut p = vec![Tensor::filled("w", 1, 2, 1.0)];
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: 0.1,
                ..Default::default()
            },
            &[2],
        );
        opt.step(&mut p, &[vec![3.0, -0.5]]);
        assert!((p[0].data[0] - 0.9).abs() < 1e-6);
        assert!((p[0].data[1] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut p = vec![Tensor::filled("w", 1, 1, 2.0)];
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: 0.1,
                weight_decay: 0.5,
                ..Default::default()
            },
            &[1],
        );
        opt.step(&mut p, &[vec![0.0]]);
        assert!((p[0].data[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn zero_rate_is_a_null_update() {
        let mut p = vec![Tensor::filled("w", 2, 2, 0.3)];
        let before = p.clone();
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: 0.0,
                weight_decay: 0.1,
                ..Default::default()
            },
            &[4],
        );
        opt.step(&mut p, &[vec![1.0, -2.0, 3.0, 0.0]]);
        assert_eq!(p, before);
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = vec![vec![3.0], vec![4.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-12);
        let mut small = vec![vec![0.1]];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0][0], 0.1);
    }
}
