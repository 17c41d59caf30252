//! Causal self-attention transition model: parameters, checkpoints and the
//! differentiable forward pass used for training.

use std::path::Path;
use std::sync::Arc;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::TransitionConfig;
use super::context::{ContextLayout, EventContexts};
use crate::error::{Error, Result};
use crate::optim::Tensor;
use crate::rng::{self, Rng};
use crate::tape::{AttnEntry, AttnPlan, Mat, Tape, Var};

/// Smoothing inside the log-space skip from the previous mean field.
pub const SKIP_EPS: f64 = 1e-6;

pub(crate) const W_IN: usize = 0;
pub(crate) const B_IN: usize = 1;
const HEAD_OFFSET: usize = 2;
pub(crate) const PER_LAYER: usize = 14;

/// Per-layer tensor slots.
pub(crate) mod slot {
    pub const LN1_G: usize = 0;
    pub const LN1_B: usize = 1;
    pub const WQ: usize = 2;
    pub const WK: usize = 3;
    pub const WV: usize = 4;
    pub const WO: usize = 5;
    pub const BO: usize = 6;
    pub const ATTN_BIAS: usize = 7;
    pub const LN2_G: usize = 8;
    pub const LN2_B: usize = 9;
    pub const W1: usize = 10;
    pub const B1: usize = 11;
    pub const W2: usize = 12;
    pub const B2: usize = 13;
}

/// Output-head tensor slots, after the layers.
pub(crate) mod head {
    pub const LNF_G: usize = 0;
    pub const LNF_B: usize = 1;
    pub const W_OUT: usize = 2;
    pub const B_OUT: usize = 3;
    pub const GATE: usize = 4;
}

const CHECKPOINT_FORMAT: &str = "mfmdp-transition";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionModel {
    pub config: TransitionConfig,
    pub layout: ContextLayout,
    pub params: Vec<Tensor>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    #[serde(flatten)]
    model: TransitionModel,
}

fn shapes(c: &TransitionConfig, layout: &ContextLayout) -> Vec<(String, usize, usize)> {
    let (d, s) = (c.d_model, layout.n_states);
    let mut out = vec![
        ("w_in".to_string(), layout.width(), d),
        ("b_in".to_string(), 1, d),
    ];
    for l in 0..c.layers {
        let p = |n: &str| format!("layer{l}.{n}");
        out.extend([
            (p("ln1_g"), 1, d),
            (p("ln1_b"), 1, d),
            (p("wq"), d, d),
            (p("wk"), d, d),
            (p("wv"), d, d),
            (p("wo"), d, d),
            (p("bo"), 1, d),
            (p("attn_bias"), c.heads, c.window),
            (p("ln2_g"), 1, d),
            (p("ln2_b"), 1, d),
            (p("w1"), d, c.d_ff),
            (p("b1"), 1, c.d_ff),
            (p("w2"), c.d_ff, d),
            (p("b2"), 1, d),
        ]);
    }
    out.extend([
        ("lnf_g".to_string(), 1, d),
        ("lnf_b".to_string(), 1, d),
        ("w_out".to_string(), d, s),
        ("b_out".to_string(), 1, s),
        ("gate".to_string(), 1, 1),
    ]);
    out
}

impl TransitionModel {
    /// Fresh model. Weight matrices are Gaussian with std `1/√fan_in`
    /// (residual projections further shrunk by `1/√(2·layers)`); layer-norm
    /// gains are one; the output head starts at zero, so the initial
    /// prediction is uniform.
    pub fn new(config: TransitionConfig, layout: ContextLayout) -> Result<Self> {
        config.validate()?;
        if layout.n_states == 0 {
            return Err(Error::Config("state space is empty".into()));
        }
        let mut rng = rng::substream(config.seed, "transition-init");
        let residual = 1.0 / (2.0 * config.layers as f64).sqrt();
        let params = shapes(&config, &layout)
            .into_iter()
            .map(|(name, rows, cols)| {
                let leaf = name.rsplit('.').next().unwrap_or(&name).to_string();
                let mut t = Tensor::zeros(name, rows, cols);
                match leaf.as_str() {
                    "ln1_g" | "ln2_g" | "lnf_g" => t.data.fill(1.0),
                    "w_in" | "wq" | "wk" | "wv" | "wo" | "w1" | "w2" => {
                        let mut std = 1.0 / (rows as f64).sqrt();
                        if leaf == "wo" || leaf == "w2" {
                            std *= residual;
                        }
                        let normal = Normal::new(0.0, std).expect("finite std");
                        t.data.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
                    }
                    _ => {}
                }
                t
            })
            .collect();
        Ok(TransitionModel {
            config,
            layout,
            params,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|t| t.data.len()).sum()
    }

    pub(crate) fn layer_slot(l: usize, s: usize) -> usize {
        HEAD_OFFSET + l * PER_LAYER + s
    }

    pub(crate) fn head_slot(&self, s: usize) -> usize {
        HEAD_OFFSET + self.config.layers * PER_LAYER + s
    }

    pub(crate) fn data(&self, idx: usize) -> &[f64] {
        &self.params[idx].data
    }

    /// Overwrite every parameter with `N(0, scale²)` draws (layer-norm gains
    /// centred on one). Used by gradient checks and robustness tests.
    pub fn randomize(&mut self, seed: u64, scale: f64) {
        let mut rng = rng::substream(seed, "transition-randomize");
        for t in &mut self.params {
            let gain = t.name.ends_with("_g");
            for v in &mut t.data {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                *v = if gain { 1.0 + scale * z } else { scale * z };
            }
        }
    }

    fn check_shapes(&self) -> Result<()> {
        self.config.validate()?;
        let expected = shapes(&self.config, &self.layout);
        if expected.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                expected.len(),
                self.params.len()
            )));
        }
        for ((name, rows, cols), t) in expected.iter().zip(&self.params) {
            if *name != t.name || *rows != t.rows || *cols != t.cols || t.data.len() != rows * cols
            {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` {}x{} ({} values) does not match `{name}` {rows}x{cols}",
                    t.name,
                    t.rows,
                    t.cols,
                    t.data.len()
                )));
            }
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has non-finite values"
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            model: self.clone(),
        };
        serde_json::to_string(&ck).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        ck.model.check_shapes()?;
        Ok(ck.model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Inputs of one event split into the parts the forward pass treats
/// differently: everything but the mean-field and action blocks, and those
/// two blocks separately.
#[derive(Debug, Clone)]
pub(crate) struct EventInputs {
    pub fixed: Mat,
    pub mean_field: Mat,
    pub actions: Mat,
    pub targets: Option<Arc<Mat>>,
}

impl EventInputs {
    pub fn new(ctx: &EventContexts) -> Self {
        let l = ctx.layout;
        let t = ctx.len();
        let mut fixed = ctx.inputs.clone();
        let mut mean_field = Mat::zeros(t, l.n_states);
        let mut actions = Mat::zeros(t, l.n_states);
        for r in 0..t {
            let row = fixed.row_mut(r);
            mean_field.row_mut(r).copy_from_slice(&row[l.mean_field()]);
            actions.row_mut(r).copy_from_slice(&row[l.actions()]);
            row[l.mean_field()].fill(0.0);
            row[l.actions()].fill(0.0);
        }
        EventInputs {
            fixed,
            mean_field,
            actions,
            targets: ctx.targets.clone().map(Arc::new),
        }
    }

    pub fn len(&self) -> usize {
        self.fixed.rows
    }
}

/// Residual dropout, only present while training.
pub(crate) struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut Rng,
}

impl Dropout<'_> {
    fn apply(&mut self, tape: &mut Tape, x: Var) -> Var {
        if self.rate <= 0.0 {
            return x;
        }
        let n = tape.value(x).data.len();
        let keep = 1.0 / (1.0 - self.rate);
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if self.rng.random::<f64>() < self.rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        tape.mul_const(x, Arc::new(mask))
    }
}

fn drop(d: &mut Option<Dropout<'_>>, tape: &mut Tape, x: Var) -> Var {
    match d {
        Some(d) => d.apply(tape, x),
        None => x,
    }
}

/// Outputs of the main-sequence pass: per-layer keys and values (reused by
/// rollout branches) and the predicted mean fields.
pub(crate) struct SeqOut {
    pub kv: Vec<(Var, Var)>,
    pub preds: Var,
}

/// Model parameters bound to a tape.
pub(crate) struct Bound<'m> {
    pub model: &'m TransitionModel,
    pub vars: Vec<Var>,
}

impl<'m> Bound<'m> {
    /// Bind every tensor as a leaf; `trainable = false` freezes them.
    pub fn new(model: &'m TransitionModel, tape: &mut Tape, trainable: bool) -> Self {
        let vars = model
            .params
            .iter()
            .map(|t| tape.leaf(Mat::from_vec(t.rows, t.cols, t.data.clone()), trainable))
            .collect();
        Bound { model, vars }
    }

    fn layer(&self, l: usize, s: usize) -> Var {
        self.vars[TransitionModel::layer_slot(l, s)]
    }

    fn head(&self, s: usize) -> Var {
        self.vars[self.model.head_slot(s)]
    }

    fn affine_norm(&self, tape: &mut Tape, x: Var, g: Var, b: Var) -> Var {
        let n = tape.layer_norm(x);
        let n = tape.mul_row(n, g);
        tape.add_row(n, b)
    }

    fn embed(&self, tape: &mut Tape, fixed: Var, m: Var, a: Var) -> Var {
        let l = self.model.layout;
        let w = self.vars[W_IN];
        let e = tape.matmul(fixed, w);
        let wm = tape.slice_rows(w, l.mean_field().start, l.n_states);
        let wa = tape.slice_rows(w, l.actions().start, l.n_states);
        let em = tape.matmul(m, wm);
        let ea = tape.matmul(a, wa);
        let e = tape.add(e, em);
        let e = tape.add(e, ea);
        tape.add_row(e, self.vars[B_IN])
    }

    /// One pre-norm block. `prior` holds this layer's key/value sources that
    /// precede the current rows; the current rows' own keys/values are
    /// appended as the last source.
    fn block(
        &self,
        tape: &mut Tape,
        l: usize,
        h: Var,
        prior: &[(Var, Var)],
        plan: Arc<AttnPlan>,
        d: &mut Option<Dropout<'_>>,
    ) -> (Var, (Var, Var)) {
        let a = self.affine_norm(
            tape,
            h,
            self.layer(l, slot::LN1_G),
            self.layer(l, slot::LN1_B),
        );
        let q = tape.matmul(a, self.layer(l, slot::WQ));
        let k = tape.matmul(a, self.layer(l, slot::WK));
        let v = tape.matmul(a, self.layer(l, slot::WV));
        let mut sources = prior.to_vec();
        sources.push((k, v));
        let o = tape.attention(
            q,
            sources,
            self.layer(l, slot::ATTN_BIAS),
            self.model.config.heads,
            plan,
        );
        let o = tape.matmul(o, self.layer(l, slot::WO));
        let o = tape.add_row(o, self.layer(l, slot::BO));
        let o = drop(d, tape, o);
        let h = tape.add(h, o);
        let a = self.affine_norm(
            tape,
            h,
            self.layer(l, slot::LN2_G),
            self.layer(l, slot::LN2_B),
        );
        let f = tape.matmul(a, self.layer(l, slot::W1));
        let f = tape.add_row(f, self.layer(l, slot::B1));
        let f = tape.gelu(f);
        let f = tape.matmul(f, self.layer(l, slot::W2));
        let f = tape.add_row(f, self.layer(l, slot::B2));
        let f = drop(d, tape, f);
        (tape.add(h, f), (k, v))
    }

    fn output(&self, tape: &mut Tape, h: Var, m: Var) -> Var {
        let z = self.affine_norm(tape, h, self.head(head::LNF_G), self.head(head::LNF_B));
        let logits = tape.matmul(z, self.head(head::W_OUT));
        let logits = tape.add_row(logits, self.head(head::B_OUT));
        let skip = tape.log_eps(m, SKIP_EPS);
        let skip = tape.scale_by(skip, self.head(head::GATE));
        let logits = tape.add(logits, skip);
        tape.softmax_rows(logits)
    }

    /// Causal pass over a whole event.
    pub fn sequence(
        &self,
        tape: &mut Tape,
        inputs: &EventInputs,
        d: &mut Option<Dropout<'_>>,
    ) -> SeqOut {
        let t = inputs.len();
        let w = self.model.config.window;
        let mut plan = AttnPlan::new();
        for i in 0..t {
            for delta in 0..w.min(i + 1) {
                plan.push(AttnEntry {
                    src: 0,
                    row: (i - delta) as u32,
                    delta: delta as u32,
                });
            }
            plan.end_row();
        }
        let plan = Arc::new(plan);
        let fixed = tape.constant(inputs.fixed.clone());
        let m = tape.constant(inputs.mean_field.clone());
        let a = tape.constant(inputs.actions.clone());
        let mut h = self.embed(tape, fixed, m, a);
        let mut kv = Vec::with_capacity(self.model.config.layers);
        for l in 0..self.model.config.layers {
            let (next, pair) = self.block(tape, l, h, &[], plan.clone(), d);
            h = next;
            kv.push(pair);
        }
        let preds = self.output(tape, h, m);
        SeqOut { kv, preds }
    }

    /// Lockstep rollouts branching off the main sequence. Branch `b` starts
    /// from the real mean field at `starts[b]`; its step `k` (1-based)
    /// predicts position `starts[b] + k`, reading its own previous
    /// prediction as mean-field and action block and keeping the synopsis of
    /// its first step. Positions past the event end reuse the last row.
    /// `step1_actions` overrides the first step's action block.
    pub fn branches(
        &self,
        tape: &mut Tape,
        inputs: &EventInputs,
        main: &SeqOut,
        starts: &[usize],
        steps: usize,
        step1_actions: Option<Var>,
        d: &mut Option<Dropout<'_>>,
    ) -> Vec<Var> {
        let lay = self.model.layout;
        let last = inputs.len() - 1;
        let w = self.model.config.window;
        let nb = starts.len();
        let mut layer_sources: Vec<Vec<(Var, Var)>> = main.kv.iter().map(|kv| vec![*kv]).collect();
        let mut preds = Vec::with_capacity(steps);
        let (syn, m_range, a_range) = (lay.synopsis(), lay.mean_field(), lay.actions());
        for k in 1..=steps {
            let mut fixed = Mat::zeros(nb, lay.width());
            for (b, &tb) in starts.iter().enumerate() {
                let row = fixed.row_mut(b);
                row.copy_from_slice(inputs.fixed.row((tb + k).min(last)));
                row[syn.clone()]
                    .copy_from_slice(&inputs.fixed.row((tb + 1).min(last))[syn.clone()]);
                row[m_range.clone()].fill(0.0);
                row[a_range.clone()].fill(0.0);
            }
            let fixed = tape.constant(fixed);
            let (m, a) = if k == 1 {
                let mut m = Mat::zeros(nb, lay.n_states);
                let mut a = Mat::zeros(nb, lay.n_states);
                for (b, &tb) in starts.iter().enumerate() {
                    m.row_mut(b)
                        .copy_from_slice(inputs.mean_field.row((tb + 1).min(last)));
                    a.row_mut(b)
                        .copy_from_slice(inputs.actions.row((tb + 1).min(last)));
                }
                let m = tape.constant(m);
                let a = step1_actions.unwrap_or_else(|| tape.constant(a));
                (m, a)
            } else {
                let p = preds[k - 2];
                (p, p)
            };
            // Source 0 is the main sequence; source j holds branch step j,
            // one row per branch.
            let mut plan = AttnPlan::new();
            for (b, &tb) in starts.iter().enumerate() {
                let p = tb + k;
                for delta in 0..w.min(p + 1) {
                    let key = p - delta;
                    let (src, row) = if key > tb {
                        ((key - tb) as u32, b as u32)
                    } else {
                        (0, key as u32)
                    };
                    plan.push(AttnEntry {
                        src,
                        row,
                        delta: delta as u32,
                    });
                }
                plan.end_row();
            }
            let plan = Arc::new(plan);
            let mut h = self.embed(tape, fixed, m, a);
            for (l, sources) in layer_sources.iter_mut().enumerate() {
                let (next, pair) = self.block(tape, l, h, sources, plan.clone(), d);
                h = next;
                sources.push(pair);
            }
            preds.push(self.output(tape, h, m));
        }
        preds
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> ContextLayout {
        ContextLayout {
            hash_dims: 4,
            n_states: 3,
        }
    }

    #[test]
    fn parameter_shapes_follow_the_config() {
        let c = TransitionConfig::default();
        let m = TransitionModel::new(c.clone(), layout()).unwrap();
        assert_eq!(m.params.len(), 2 + 14 * c.layers + 5);
        assert_eq!(m.params[W_IN].rows, layout().width());
        assert_eq!(m.params[m.head_slot(head::GATE)].name, "gate");
        assert_eq!(
            m.params[TransitionModel::layer_slot(1, slot::ATTN_BIAS)].name,
            "layer1.attn_bias"
        );
    }

    #[test]
    fn checkpoint_round_trip_and_shape_validation() {
        let m = TransitionModel::new(
            TransitionConfig {
                layers: 1,
                ..Default::default()
            },
            layout(),
        )
        .unwrap();
        let back = TransitionModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
        let mut bad = m.clone();
        bad.params[3].data.pop();
        assert!(matches!(
            TransitionModel::from_json(&bad.to_json().unwrap()),
            Err(Error::Checkpoint(_))
        ));
        let mut v: serde_json::Value = serde_json::from_str(&m.to_json().unwrap()).unwrap();
        v["version"] = 9.into();
        assert!(TransitionModel::from_json(&v.to_string()).is_err());
    }
}
