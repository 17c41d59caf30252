//! Incremental inference with per-layer key/value ring buffers, and the
//! model-agnostic prediction interface used by the policy and simulator.

use super::context::{ContextEncoder, ContextLayout, TransitionContext};
use super::model::{head, slot, TransitionModel, B_IN, SKIP_EPS, W_IN};
use crate::domain::MeanField;
use crate::error::{Error, Result};
use crate::tape::{fast_exp, gelu, gemm_acc, layer_norm_in_place, row_mat_acc, softmax_in_place};

/// Anything that maps a context history to the next mean field.
pub trait MeanFieldModel: Sync {
    fn layout(&self) -> ContextLayout;

    /// Encoder producing contexts this model expects.
    fn encoder(&self) -> ContextEncoder {
        ContextEncoder {
            layout: self.layout(),
            seed: 0,
        }
    }

    /// Empty incremental state.
    fn start(&self) -> Box<dyn ModelState + '_>;

    /// Prediction at the last position of `history`.
    fn predict(&self, history: &[TransitionContext]) -> Result<MeanField> {
        if history.is_empty() {
            return Err(Error::Shape("empty history".into()));
        }
        let mut state = self.start();
        let mut out = None;
        for ctx in history {
            out = Some(state.push(ctx)?);
        }
        Ok(out.expect("non-empty history"))
    }

    /// `k` predictions after `history`, starting from `start` and feeding
    /// each prediction back as the next context's mean field.
    fn rollout(
        &self,
        history: &[TransitionContext],
        start: &MeanField,
        future: &[TransitionContext],
        k: usize,
    ) -> Result<Vec<MeanField>> {
        let mut state = self.start();
        for ctx in history {
            state.push(ctx)?;
        }
        rollout_from(state.as_mut(), start, future, k)
    }
}

/// Incremental model state: push one context, get that position's
/// prediction.
pub trait ModelState {
    fn push(&mut self, ctx: &TransitionContext) -> Result<MeanField>;
    fn fork(&self) -> Box<dyn ModelState + '_>;
    /// Number of contexts pushed so far.
    fn position(&self) -> usize;

    /// Roll several branches forward from this state, `k` steps each.
    /// Branch `b` starts with `first[b]` (its mean-field block replaced by
    /// `start`); steps `2..=k` use `future[0..k−1]` with the branch's own
    /// previous prediction as mean-field and action block and the synopsis
    /// of `first[b]`. Equivalent to forking and calling [`rollout_from`]
    /// per branch.
    fn rollout_batch(
        &self,
        start: &MeanField,
        first: &[TransitionContext],
        future: &[TransitionContext],
        k: usize,
    ) -> Result<Vec<Vec<MeanField>>> {
        if k > 0 && future.len() < k - 1 {
            return Err(Error::Horizon(format!(
                "rollout of {k} steps with {} future contexts",
                future.len() + 1
            )));
        }
        first
            .iter()
            .map(|f| {
                let mut state = self.fork();
                let mut ctxs = Vec::with_capacity(k);
                if k > 0 {
                    ctxs.push(f.clone());
                    ctxs.extend_from_slice(&future[..k - 1]);
                }
                rollout_from(state.as_mut(), start, &ctxs, k)
            })
            .collect()
    }
}

/// Roll `state` forward `k` steps over `future`. Step 1 keeps the action
/// block of `future[0]`; later steps read the previous prediction as both
/// mean-field and action block and keep the synopsis of `future[0]`.
pub fn rollout_from(
    state: &mut dyn ModelState,
    start: &MeanField,
    future: &[TransitionContext],
    k: usize,
) -> Result<Vec<MeanField>> {
    if future.len() < k {
        return Err(Error::Horizon(format!(
            "rollout of {k} steps with {} future contexts",
            future.len()
        )));
    }
    let mut out: Vec<MeanField> = Vec::with_capacity(k);
    for (i, ctx) in future[..k].iter().enumerate() {
        let mut c = ctx.clone();
        let prev = out.last().unwrap_or(start);
        if prev.len() != c.layout.n_states {
            return Err(Error::Shape(format!(
                "mean field of {} states for {}",
                prev.len(),
                c.layout.n_states
            )));
        }
        c.set_mean_field(prev.probs());
        if i > 0 {
            c.set_actions(prev.probs());
            c.set_synopsis(future[0].synopsis());
        }
        out.push(state.push(&c)?);
    }
    Ok(out)
}

/// Returns its context's mean-field block unchanged.
#[derive(Debug, Clone, Copy)]
pub struct IdentityModel {
    pub layout: ContextLayout,
}

struct IdentityState {
    pos: usize,
}

impl ModelState for IdentityState {
    fn push(&mut self, ctx: &TransitionContext) -> Result<MeanField> {
        self.pos += 1;
        MeanField::new(ctx.mean_field().to_vec())
    }

    fn fork(&self) -> Box<dyn ModelState + '_> {
        Box::new(IdentityState { pos: self.pos })
    }

    fn position(&self) -> usize {
        self.pos
    }
}

impl MeanFieldModel for IdentityModel {
    fn layout(&self) -> ContextLayout {
        self.layout
    }

    fn start(&self) -> Box<dyn ModelState + '_> {
        Box::new(IdentityState { pos: 0 })
    }
}

fn affine_norm_rows(x: &[f64], d: usize, g: &[f64], b: &[f64]) -> Vec<f64> {
    let mut y = x.to_vec();
    for row in y.chunks_exact_mut(d) {
        layer_norm_in_place(row);
        row.iter_mut()
            .zip(g)
            .zip(b)
            .for_each(|((v, g), b)| *v = *v * g + b);
    }
    y
}

fn broadcast(row: &[f64], n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(row.len() * n);
    for _ in 0..n {
        out.extend_from_slice(row);
    }
    out
}

/// Softmax that stays on the simplex for any input: NaN logits get no mass,
/// infinite ones share it, and a fully degenerate row becomes uniform.
pub(crate) fn robust_softmax(logits: &[f64]) -> Vec<f64> {
    let n = logits.len();
    let max = logits
        .iter()
        .copied()
        .filter(|v| !v.is_nan())
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return vec![1.0 / n as f64; n];
    }
    if max == f64::INFINITY {
        let hits = logits.iter().filter(|v| **v == f64::INFINITY).count() as f64;
        return logits
            .iter()
            .map(|v| if *v == f64::INFINITY { 1.0 / hits } else { 0.0 })
            .collect();
    }
    let mut p: Vec<f64> = logits
        .iter()
        .map(|v| if v.is_nan() { 0.0 } else { fast_exp(v - max) })
        .collect();
    let sum: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= sum);
    p
}

/// Keys and values of one layer for the last `window` positions, `rows`
/// sequences side by side: slot-major, then row.
#[derive(Clone)]
struct Ring {
    rows: usize,
    d: usize,
    keys: Vec<f64>,
    values: Vec<f64>,
}

impl Ring {
    fn new(window: usize, rows: usize, d: usize) -> Self {
        Ring {
            rows,
            d,
            keys: vec![0.0; window * rows * d],
            values: vec![0.0; window * rows * d],
        }
    }

    fn at(&self, slot: usize, row: usize) -> (&[f64], &[f64]) {
        let o = (slot * self.rows + row) * self.d;
        (&self.keys[o..o + self.d], &self.values[o..o + self.d])
    }

    fn write(&mut self, slot: usize, k: &[f64], v: &[f64]) {
        let o = slot * self.rows * self.d;
        let n = self.rows * self.d;
        self.keys[o..o + n].copy_from_slice(k);
        self.values[o..o + n].copy_from_slice(v);
    }
}

/// Attention of one query row over `span` keys; `key_at(delta)` returns the
/// key and value at relative distance `delta`.
#[allow(clippy::too_many_arguments)]
fn attend<'r>(
    q: &[f64],
    heads: usize,
    window: usize,
    bias: &[f64],
    span: usize,
    scores: &mut Vec<f64>,
    out: &mut [f64],
    key_at: impl Fn(usize) -> (&'r [f64], &'r [f64]),
) {
    let dh = q.len() / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    for hd in 0..heads {
        let qh = &q[hd * dh..(hd + 1) * dh];
        scores.clear();
        for delta in 0..span {
            let kh = &key_at(delta).0[hd * dh..(hd + 1) * dh];
            let dot: f64 = qh.iter().zip(kh).map(|(a, b)| a * b).sum();
            scores.push(dot * scale + bias[hd * window + delta]);
        }
        softmax_in_place(scores);
        let oh = &mut out[hd * dh..(hd + 1) * dh];
        for (delta, &pr) in scores.iter().enumerate() {
            let vh = &key_at(delta).1[hd * dh..(hd + 1) * dh];
            oh.iter_mut().zip(vh).for_each(|(o, v)| *o += pr * v);
        }
    }
}

/// Evaluate `n` positions (one per sequence) through the stack. `h` holds
/// their input embeddings; `attn(layer, q, k, v, out)` stores the new keys
/// and values and writes the attention output.
fn stack_rows(
    model: &TransitionModel,
    mut h: Vec<f64>,
    m: &[f64],
    n: usize,
    mut attn: impl FnMut(usize, &[f64], &[f64], &[f64], &mut [f64]),
) -> Vec<Vec<f64>> {
    let c = &model.config;
    let (d, s) = (c.d_model, model.layout.n_states);
    for layer in 0..c.layers {
        let p = |s: usize| model.data(TransitionModel::layer_slot(layer, s));
        let x = affine_norm_rows(&h, d, p(slot::LN1_G), p(slot::LN1_B));
        let mut q = vec![0.0; n * d];
        let mut k = vec![0.0; n * d];
        let mut v = vec![0.0; n * d];
        gemm_acc(&x, p(slot::WQ), &mut q, n, d, d);
        gemm_acc(&x, p(slot::WK), &mut k, n, d, d);
        gemm_acc(&x, p(slot::WV), &mut v, n, d, d);
        let mut o = vec![0.0; n * d];
        attn(layer, &q, &k, &v, &mut o);
        let mut proj = broadcast(p(slot::BO), n);
        gemm_acc(&o, p(slot::WO), &mut proj, n, d, d);
        h.iter_mut().zip(&proj).for_each(|(h, v)| *h += v);

        let x = affine_norm_rows(&h, d, p(slot::LN2_G), p(slot::LN2_B));
        let mut f = broadcast(p(slot::B1), n);
        gemm_acc(&x, p(slot::W1), &mut f, n, d, c.d_ff);
        f.iter_mut().for_each(|v| *v = gelu(*v));
        let mut g = broadcast(p(slot::B2), n);
        gemm_acc(&f, p(slot::W2), &mut g, n, c.d_ff, d);
        h.iter_mut().zip(&g).for_each(|(h, v)| *h += v);
    }
    let hp = |s: usize| model.data(model.head_slot(s));
    let z = affine_norm_rows(&h, d, hp(head::LNF_G), hp(head::LNF_B));
    let mut logits = broadcast(hp(head::B_OUT), n);
    gemm_acc(&z, hp(head::W_OUT), &mut logits, n, d, s);
    let gate = hp(head::GATE)[0];
    logits
        .chunks_exact_mut(s)
        .zip(m.chunks_exact(s))
        .map(|(row, m)| {
            row.iter_mut()
                .zip(m)
                .for_each(|(v, m)| *v += gate * (m + SKIP_EPS).ln());
            robust_softmax(row)
        })
        .collect()
}

/// Input embedding of `n` rows from their fixed projections and mean-field
/// and action blocks.
fn embed_rows(model: &TransitionModel, fixed: &[f64], m: &[f64], a: &[f64], n: usize) -> Vec<f64> {
    let l = model.layout;
    let d = model.config.d_model;
    let s = l.n_states;
    let w = model.data(W_IN);
    let mut h = fixed.to_vec();
    gemm_acc(
        m,
        &w[l.mean_field().start * d..l.mean_field().end * d],
        &mut h,
        n,
        s,
        d,
    );
    gemm_acc(
        a,
        &w[l.actions().start * d..l.actions().end * d],
        &mut h,
        n,
        s,
        d,
    );
    for row in h.chunks_exact_mut(d) {
        row.iter_mut()
            .zip(model.data(B_IN))
            .for_each(|(v, b)| *v += b);
    }
    h
}

/// Incremental evaluation of a [`TransitionModel`]; matches the training
/// forward pass position by position.
#[derive(Clone)]
pub struct Session<'m> {
    model: &'m TransitionModel,
    pos: usize,
    rings: Vec<Ring>,
}

impl<'m> Session<'m> {
    pub fn new(model: &'m TransitionModel) -> Self {
        let c = &model.config;
        Session {
            model,
            pos: 0,
            rings: vec![Ring::new(c.window, 1, c.d_model); c.layers],
        }
    }

    pub fn model(&self) -> &'m TransitionModel {
        self.model
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    /// Projection of the synopsis block alone.
    pub fn project_synopsis(&self, features: &[f64]) -> Vec<f64> {
        let l = self.model.layout;
        self.project(features, &[l.synopsis()])
    }

    /// Projection of the persona and signal blocks.
    pub fn project_exogenous(&self, features: &[f64]) -> Vec<f64> {
        let l = self.model.layout;
        self.project(features, &[l.personas(), l.signal()])
    }

    /// Projection of every block except mean field and actions.
    pub fn project_fixed(&self, features: &[f64]) -> Vec<f64> {
        let l = self.model.layout;
        self.project(features, &[l.synopsis(), l.personas(), l.signal()])
    }

    fn project(&self, features: &[f64], blocks: &[std::ops::Range<usize>]) -> Vec<f64> {
        let d = self.model.config.d_model;
        let w = self.model.data(W_IN);
        let mut out = vec![0.0; d];
        for r in blocks {
            row_mat_acc(
                &features[r.clone()],
                &w[r.start * d..r.end * d],
                d,
                &mut out,
            );
        }
        out
    }

    /// Push a full context vector and return the predicted distribution.
    pub fn push_features(&mut self, features: &[f64]) -> Result<Vec<f64>> {
        let l = self.model.layout;
        if features.len() != l.width() {
            return Err(Error::Shape(format!(
                "context width {} vs model {}",
                features.len(),
                l.width()
            )));
        }
        let fixed = self.project_fixed(features);
        Ok(self.push_parts(&fixed, &features[l.mean_field()], &features[l.actions()]))
    }

    /// Push a position given its precomputed fixed projection and its
    /// mean-field and action blocks.
    pub fn push_parts(&mut self, fixed: &[f64], m: &[f64], a: &[f64]) -> Vec<f64> {
        let model = self.model;
        let c = &model.config;
        let h = embed_rows(model, fixed, m, a, 1);
        let (pos, window) = (self.pos, c.window);
        let slot_now = pos % window;
        let span = window.min(pos + 1);
        let slots: Vec<usize> = (0..span).map(|delta| (pos - delta) % window).collect();
        let rings = &mut self.rings;
        let mut scores = Vec::with_capacity(window);
        let mut out = stack_rows(model, h, m, 1, |layer, q, k, v, o| {
            let ring = &mut rings[layer];
            ring.write(slot_now, k, v);
            let ring = &*ring;
            let bias = model.data(TransitionModel::layer_slot(layer, slot::ATTN_BIAS));
            attend(q, c.heads, window, bias, span, &mut scores, o, |delta| {
                ring.at(slots[delta], 0)
            });
        });
        self.pos += 1;
        out.pop().expect("one row")
    }

    /// Start `n` lockstep branches continuing this session.
    pub fn branches(&self, n: usize) -> Branches<'_, 'm> {
        let c = &self.model.config;
        Branches {
            parent: self,
            n,
            step: 0,
            rings: vec![Ring::new(c.window, n, c.d_model); c.layers],
        }
    }
}

/// Several continuations of one [`Session`] advanced together; the parent's
/// cached history is shared, not copied.
pub struct Branches<'s, 'm> {
    parent: &'s Session<'m>,
    n: usize,
    step: usize,
    rings: Vec<Ring>,
}

impl Branches<'_, '_> {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Advance every branch by one position. `fixed`, `m` and `a` hold one
    /// row per branch.
    pub fn push_parts(&mut self, fixed: &[f64], m: &[f64], a: &[f64]) -> Vec<Vec<f64>> {
        let parent = self.parent;
        let model = parent.model;
        let c = &model.config;
        let n = self.n;
        let h = embed_rows(model, fixed, m, a, n);
        let (step, window) = (self.step, c.window);
        let pos = parent.pos + step;
        let span = window.min(pos + 1);
        let d = c.d_model;
        // (own ring?, slot) of every key in the window.
        let slots: Vec<(bool, usize)> = (0..span)
            .map(|delta| {
                if delta <= step {
                    (true, (step - delta) % window)
                } else {
                    (false, (pos - delta) % window)
                }
            })
            .collect();
        let rings = &mut self.rings;
        let mut scores = Vec::with_capacity(window);
        let out = stack_rows(model, h, m, n, |layer, q, k, v, o| {
            let ring = &mut rings[layer];
            ring.write(step % window, k, v);
            let ring = &*ring;
            let main = &parent.rings[layer];
            let bias = model.data(TransitionModel::layer_slot(layer, slot::ATTN_BIAS));
            for b in 0..n {
                let key_at = |delta: usize| {
                    let (own, slot) = slots[delta];
                    if own {
                        ring.at(slot, b)
                    } else {
                        main.at(slot, 0)
                    }
                };
                attend(
                    &q[b * d..(b + 1) * d],
                    c.heads,
                    window,
                    bias,
                    span,
                    &mut scores,
                    &mut o[b * d..(b + 1) * d],
                    key_at,
                );
            }
        });
        self.step += 1;
        out
    }
}

impl ModelState for Session<'_> {
    fn push(&mut self, ctx: &TransitionContext) -> Result<MeanField> {
        let p = self.push_features(&ctx.features)?;
        MeanField::new(p)
    }

    fn fork(&self) -> Box<dyn ModelState + '_> {
        Box::new(self.clone())
    }

    fn position(&self) -> usize {
        self.pos
    }

    fn rollout_batch(
        &self,
        start: &MeanField,
        first: &[TransitionContext],
        future: &[TransitionContext],
        k: usize,
    ) -> Result<Vec<Vec<MeanField>>> {
        check_batch(self.model.layout, start, first, future, k)?;
        let n = first.len();
        if k == 0 || n == 0 {
            return Ok(vec![Vec::new(); n]);
        }
        let l = self.model.layout;
        let (d, s) = (self.model.config.d_model, l.n_states);
        let mut fixed = Vec::with_capacity(n * d);
        let mut synopses = Vec::with_capacity(n);
        let mut m = Vec::with_capacity(n * s);
        let mut a = Vec::with_capacity(n * s);
        for ctx in first {
            fixed.extend(self.project_fixed(&ctx.features));
            synopses.push(self.project_synopsis(&ctx.features));
            m.extend_from_slice(start.probs());
            a.extend_from_slice(ctx.actions());
        }
        let mut branches = self.branches(n);
        let mut out: Vec<Vec<MeanField>> = vec![Vec::with_capacity(k); n];
        let mut preds = branches.push_parts(&fixed, &m, &a);
        for step in 1..=k {
            m.clear();
            for (b, p) in preds.into_iter().enumerate() {
                m.extend_from_slice(&p);
                out[b].push(MeanField::new(p)?);
            }
            if step == k {
                break;
            }
            let exo = self.project_exogenous(&future[step - 1].features);
            fixed.clear();
            for syn in &synopses {
                fixed.extend(syn.iter().zip(&exo).map(|(x, y)| x + y));
            }
            preds = branches.push_parts(&fixed, &m, &m);
        }
        Ok(out)
    }
}

fn check_batch(
    layout: ContextLayout,
    start: &MeanField,
    first: &[TransitionContext],
    future: &[TransitionContext],
    k: usize,
) -> Result<()> {
    if k > 0 && future.len() < k - 1 {
        return Err(Error::Horizon(format!(
            "rollout of {k} steps with {} future contexts",
            future.len() + 1
        )));
    }
    if start.len() != layout.n_states {
        return Err(Error::Shape(format!(
            "mean field of {} states for {}",
            start.len(),
            layout.n_states
        )));
    }
    for c in first.iter().chain(future) {
        if c.features.len() != layout.width() {
            return Err(Error::Shape(format!(
                "context width {} vs model {}",
                c.features.len(),
                layout.width()
            )));
        }
    }
    Ok(())
}

impl MeanFieldModel for TransitionModel {
    fn layout(&self) -> ContextLayout {
        self.layout
    }

    fn encoder(&self) -> ContextEncoder {
        super::train::model_encoder(self)
    }

    fn start(&self) -> Box<dyn ModelState + '_> {
        Box::new(Session::new(self))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn robust_softmax_handles_degenerate_logits() {
        assert_eq!(robust_softmax(&[f64::NAN, f64::NAN]), vec![0.5, 0.5]);
        assert_eq!(
            robust_softmax(&[f64::INFINITY, 0.0, f64::INFINITY]),
            vec![0.5, 0.0, 0.5]
        );
        assert_eq!(robust_softmax(&[f64::NAN, 1.0]), vec![0.0, 1.0]);
        let p = robust_softmax(&[0.0, 0.0, 0.0]);
        assert!(p.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    }
}
