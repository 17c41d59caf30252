//! Reverse-mode automatic differentiation over dense row-major matrices.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! replays them in reverse and returns the gradient of a scalar node with
//! respect to every node that requires one.

use std::sync::Arc;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Mat { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn scalar(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
    }
}

#[inline(always)]
fn fmadd(a: f64, b: f64, c: f64) -> f64 {
    #[cfg(target_feature = "fma")]
    {
        a.mul_add(b, c)
    }
    #[cfg(not(target_feature = "fma"))]
    {
        a * b + c
    }
}

/// `out += x · w` for a row `x: 1×k` and row-major `w: k×m`. Columns go in
/// register-sized blocks with even and odd rows of `w` summed separately,
/// which keeps two independent dependency chains per block.
pub fn row_mat_acc(x: &[f64], w: &[f64], m: usize, out: &mut [f64]) {
    const B: usize = 16;
    debug_assert_eq!(out.len(), m);
    debug_assert!(w.len() >= x.len() * m);
    let k = x.len();
    let mut j = 0;
    while j + B <= m {
        let mut even = [0.0f64; B];
        let mut odd = [0.0f64; B];
        for p in 0..k / 2 {
            let (s0, s1) = (x[2 * p], x[2 * p + 1]);
            let r0: &[f64; B] = w[2 * p * m + j..2 * p * m + j + B]
                .try_into()
                .expect("block");
            let r1: &[f64; B] = w[(2 * p + 1) * m + j..(2 * p + 1) * m + j + B]
                .try_into()
                .expect("block");
            for t in 0..B {
                even[t] = fmadd(s0, r0[t], even[t]);
                odd[t] = fmadd(s1, r1[t], odd[t]);
            }
        }
        if k % 2 == 1 {
            let s0 = x[k - 1];
            let r0: &[f64; B] = w[(k - 1) * m + j..(k - 1) * m + j + B]
                .try_into()
                .expect("block");
            for t in 0..B {
                even[t] = fmadd(s0, r0[t], even[t]);
            }
        }
        for t in 0..B {
            out[j + t] += even[t] + odd[t];
        }
        j += B;
    }
    for jj in j..m {
        let mut acc = 0.0;
        for (p, &s) in x.iter().enumerate() {
            acc = fmadd(s, w[p * m + jj], acc);
        }
        out[jj] += acc;
    }
}

/// Four rows at once over 8-column blocks: each block of `w` is loaded once
/// for all four rows.
fn rows4_mat_acc(x: &[f64], w: &[f64], k: usize, m: usize, out: &mut [f64]) {
    const B: usize = 8;
    assert!(x.len() >= 4 * k && w.len() >= k * m && out.len() >= 4 * m);
    let blocks = m / B;
    for jb in 0..blocks {
        // SAFETY: bounds asserted above; block `jb` covers columns
        // `8·jb..8·jb+8 ≤ m`.
        unsafe { simd::rows4_block8(x.as_ptr(), w.as_ptr(), out.as_mut_ptr(), k, m, jb * B) };
    }
    let j = blocks * B;
    if j < m {
        for r in 0..4 {
            let xr = &x[r * k..(r + 1) * k];
            for jj in j..m {
                let mut acc = 0.0;
                for (p, &s) in xr.iter().enumerate() {
                    acc = fmadd(s, w[p * m + jj], acc);
                }
                out[r * m + jj] += acc;
            }
        }
    }
}

mod simd {
    /// `out[r][j..j+8] += Σ_p x[r][p] · w[p][j..j+8]` for rows `r < 4`.
    ///
    /// # Safety
    /// `x` must hold `4·k`, `w` `k·m` and `out` `4·m` values, with
    /// `j + 8 ≤ m`.
    #[cfg(all(
        target_arch = "x86_64",
        target_feature = "avx2",
        target_feature = "fma"
    ))]
    pub unsafe fn rows4_block8(
        x: *const f64,
        w: *const f64,
        out: *mut f64,
        k: usize,
        m: usize,
        j: usize,
    ) {
        use std::arch::x86_64::*;
        let mut acc = [_mm256_setzero_pd(); 8];
        for p in 0..k {
            let w0 = _mm256_loadu_pd(w.add(p * m + j));
            let w1 = _mm256_loadu_pd(w.add(p * m + j + 4));
            for r in 0..4 {
                let s = _mm256_broadcast_sd(&*x.add(r * k + p));
                acc[2 * r] = _mm256_fmadd_pd(s, w0, acc[2 * r]);
                acc[2 * r + 1] = _mm256_fmadd_pd(s, w1, acc[2 * r + 1]);
            }
        }
        for r in 0..4 {
            for h in 0..2 {
                let o = out.add(r * m + j + 4 * h);
                _mm256_storeu_pd(o, _mm256_add_pd(_mm256_loadu_pd(o), acc[2 * r + h]));
            }
        }
    }

    /// Portable version of the block above.
    ///
    /// # Safety
    /// As above.
    #[cfg(not(all(
        target_arch = "x86_64",
        target_feature = "avx2",
        target_feature = "fma"
    )))]
    pub unsafe fn rows4_block8(
        x: *const f64,
        w: *const f64,
        out: *mut f64,
        k: usize,
        m: usize,
        j: usize,
    ) {
        let mut acc = [[0.0f64; 8]; 4];
        for p in 0..k {
            for (r, a) in acc.iter_mut().enumerate() {
                let s = *x.add(r * k + p);
                for (t, v) in a.iter_mut().enumerate() {
                    *v = super::fmadd(s, *w.add(p * m + j + t), *v);
                }
            }
        }
        for (r, a) in acc.iter().enumerate() {
            for (t, v) in a.iter().enumerate() {
                *out.add(r * m + j + t) += v;
            }
        }
    }
}

/// `out += a · b` for row-major `a: n×k`, `b: k×m`, `out: n×m`.
pub fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    let mut i = 0;
    while i + 4 <= n {
        rows4_mat_acc(
            &a[i * k..(i + 4) * k],
            b,
            k,
            m,
            &mut out[i * m..(i + 4) * m],
        );
        i += 4;
    }
    for i in i..n {
        row_mat_acc(&a[i * k..(i + 1) * k], b, m, &mut out[i * m..(i + 1) * m]);
    }
}

/// `out += a · bᵀ` for `a: n×k`, `b: m×k`.
fn gemm_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let br = &b[j * k..(j + 1) * k];
            out[i * m + j] += ar.iter().zip(br).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out += aᵀ · b` for `a: n×k`, `b: n×m`, `out: k×m`.
fn gemm_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let br = &b[i * m..(i + 1) * m];
        for p in 0..k {
            let s = a[i * k + p];
            if s == 0.0 {
                continue;
            }
            let o = &mut out[p * m..(p + 1) * m];
            for (x, y) in o.iter_mut().zip(br) {
                *x += s * y;
            }
        }
    }
}

pub const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Branch-free `e^x`: power-of-two range reduction, degree-13 Taylor
/// polynomial on `|r| ≤ ln2/2`, and the exponent assembled from bits.
/// Relative error stays within a few ulps; it vectorizes where `f64::exp`
/// cannot. Saturates at `e^±708`.
#[inline(always)]
pub fn fast_exp(x: f64) -> f64 {
    const LOG2E: f64 = std::f64::consts::LOG2_E;
    const LN2_HI: f64 = 6.931_471_803_691_238e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    const SHIFT: f64 = 6_755_399_441_055_744.0; // 1.5 · 2^52
    let x = x.clamp(-708.0, 708.0);
    let kf = x * LOG2E + SHIFT;
    let k_bits = kf.to_bits();
    let kf = kf - SHIFT;
    let r = (x - kf * LN2_HI) - kf * LN2_LO;
    let mut p = 1.0 / 6_227_020_800.0;
    for c in [
        1.0 / 479_001_600.0,
        1.0 / 39_916_800.0,
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
        1.0,
    ] {
        p = fmadd(p, r, c);
    }
    // The low mantissa bits of `kf + SHIFT` hold k in two's complement.
    let k = k_bits.wrapping_sub(SHIFT.to_bits());
    f64::from_bits(p.to_bits().wrapping_add(k << 52))
}

// `1 − 2/(e^{2u}+1)`.
fn tanh_exp(u: f64) -> f64 {
    1.0 - 2.0 / (fast_exp(2.0 * u.clamp(-20.0, 20.0)) + 1.0)
}

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + tanh_exp(GELU_C * (x + GELU_A * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    let t = tanh_exp(GELU_C * (x + GELU_A * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// In-place row softmax with max shift.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = fast_exp(*v - max);
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// In-place layer normalization without affine terms; returns `1/σ`.
pub fn layer_norm_in_place(row: &mut [f64]) -> f64 {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
    inv
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// One key reached by an attention query: `row` of source `src`, at
/// relative distance `delta` (query position minus key position).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnEntry {
    pub src: u32,
    pub row: u32,
    pub delta: u32,
}

/// Which keys every query row attends to.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttnPlan {
    offsets: Vec<usize>,
    entries: Vec<AttnEntry>,
}

impl AttnPlan {
    pub fn new() -> Self {
        AttnPlan {
            offsets: vec![0],
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, e: AttnEntry) {
        self.entries.push(e);
    }

    /// Close the current query row.
    pub fn end_row(&mut self) {
        self.offsets.push(self.entries.len());
    }

    pub fn rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn row(&self, i: usize) -> &[AttnEntry] {
        &self.entries[self.offsets[i]..self.offsets[i + 1]]
    }
}

struct AttnOp {
    q: Var,
    sources: Vec<(Var, Var)>,
    bias: Var,
    heads: usize,
    plan: Arc<AttnPlan>,
    /// Attention probabilities, `[entry][head]` flattened in plan order.
    probs: Vec<f64>,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    MulConst(Var, Arc<Vec<f64>>),
    LayerNorm(Var, Vec<f64>),
    Gelu(Var),
    Softmax(Var),
    LogEps(Var, f64),
    SliceRows(Var, usize),
    GroupMean(Var, Vec<usize>),
    Attention(Box<AttnOp>),
    KlRows {
        target: Arc<Mat>,
        pred: Var,
        weights: Vec<f64>,
        eps: f64,
    },
    NllRows {
        probs: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        floor: f64,
    },
    DotConst(Var, Arc<Mat>),
    LinComb(Vec<(Var, f64)>),
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads(Vec<Option<Mat>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.0[v.0].as_ref()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Mat, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols, bv.rows, "matmul shape");
        let mut out = Mat::zeros(av.rows, bv.cols);
        gemm_acc(&av.data, &bv.data, &mut out.data, av.rows, av.cols, bv.cols);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!((av.rows, av.cols), (bv.rows, bv.cols), "add shape");
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x + y).collect();
        let out = Mat::from_vec(av.rows, av.cols, data);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    /// `a + 1·row`, broadcasting a `1×m` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!((rv.rows, rv.cols), (1, av.cols), "add_row shape");
        let mut out = av.clone();
        for r in 0..out.rows {
            out.row_mut(r)
                .iter_mut()
                .zip(&rv.data)
                .for_each(|(x, y)| *x += y);
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(out, Op::AddRow(a, row), rg)
    }

    /// Elementwise product with a broadcast `1×m` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!((rv.rows, rv.cols), (1, av.cols), "mul_row shape");
        let mut out = av.clone();
        for r in 0..out.rows {
            out.row_mut(r)
                .iter_mut()
                .zip(&rv.data)
                .for_each(|(x, y)| *x *= y);
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(out, Op::MulRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let av = self.value(a);
        let out = Mat::from_vec(av.rows, av.cols, av.data.iter().map(|x| x * c).collect());
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// `a · s` for a `1×1` node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let sv = self.value(s).scalar();
        let av = self.value(a);
        let out = Mat::from_vec(av.rows, av.cols, av.data.iter().map(|x| x * sv).collect());
        let rg = self.rg(a) || self.rg(s);
        self.push(out, Op::ScaleBy(a, s), rg)
    }

    /// Elementwise product with a constant of the same shape (dropout masks).
    pub fn mul_const(&mut self, a: Var, c: Arc<Vec<f64>>) -> Var {
        let av = self.value(a);
        assert_eq!(av.data.len(), c.len(), "mul_const shape");
        let out = Mat::from_vec(
            av.rows,
            av.cols,
            av.data.iter().zip(c.iter()).map(|(x, y)| x * y).collect(),
        );
        let rg = self.rg(a);
        self.push(out, Op::MulConst(a, c), rg)
    }

    /// Per-row standardization, `(x - mean) / sqrt(var + 1e-5)`.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let inv: Vec<f64> = (0..out.rows)
            .map(|r| layer_norm_in_place(out.row_mut(r)))
            .collect();
        let rg = self.rg(a);
        self.push(out, Op::LayerNorm(a, inv), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = Mat::from_vec(av.rows, av.cols, av.data.iter().map(|&x| gelu(x)).collect());
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows {
            softmax_in_place(out.row_mut(r));
        }
        let rg = self.rg(a);
        self.push(out, Op::Softmax(a), rg)
    }

    /// Elementwise `ln(a + eps)`.
    pub fn log_eps(&mut self, a: Var, eps: f64) -> Var {
        let av = self.value(a);
        let out = Mat::from_vec(
            av.rows,
            av.cols,
            av.data.iter().map(|x| (x + eps).ln()).collect(),
        );
        let rg = self.rg(a);
        self.push(out, Op::LogEps(a, eps), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.rows, "slice_rows range");
        let out = Mat::from_vec(
            len,
            av.cols,
            av.data[start * av.cols..(start + len) * av.cols].to_vec(),
        );
        let rg = self.rg(a);
        self.push(out, Op::SliceRows(a, start), rg)
    }

    /// Mean of consecutive row groups of the given sizes.
    pub fn group_mean(&mut self, a: Var, sizes: Vec<usize>) -> Var {
        let av = self.value(a);
        assert_eq!(sizes.iter().sum::<usize>(), av.rows, "group sizes");
        let mut out = Mat::zeros(sizes.len(), av.cols);
        let mut r = 0;
        for (g, &n) in sizes.iter().enumerate() {
            assert!(n > 0, "empty group");
            for _ in 0..n {
                let src = av.row(r);
                out.row_mut(g)
                    .iter_mut()
                    .zip(src)
                    .for_each(|(o, x)| *o += x / n as f64);
                r += 1;
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::GroupMean(a, sizes), rg)
    }

    /// Multi-head attention with a learned per-head relative-position bias
    /// `bias: heads × window`. Query `i` attends to the keys listed in
    /// `plan.row(i)`; keys and values come from `sources[src]`.
    pub fn attention(
        &mut self,
        q: Var,
        sources: Vec<(Var, Var)>,
        bias: Var,
        heads: usize,
        plan: Arc<AttnPlan>,
    ) -> Var {
        let qv = self.value(q);
        let (n, d) = (qv.rows, qv.cols);
        assert_eq!(plan.rows(), n, "attention plan rows");
        assert_eq!(d % heads, 0, "heads must divide width");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let bv = self.value(bias);
        let mut out = Mat::zeros(n, d);
        let mut probs = vec![0.0; plan.entries.len() * heads];
        let mut scores = Vec::new();
        for i in 0..n {
            let entries = plan.row(i);
            let base = plan.offsets[i];
            let qi = qv.row(i);
            for h in 0..heads {
                let qh = &qi[h * dh..(h + 1) * dh];
                scores.clear();
                for e in entries {
                    let kv = self.value(sources[e.src as usize].0);
                    let kh = &kv.row(e.row as usize)[h * dh..(h + 1) * dh];
                    let s: f64 = qh.iter().zip(kh).map(|(a, b)| a * b).sum();
                    scores.push(s * scale + bv.data[h * bv.cols + e.delta as usize]);
                }
                softmax_in_place(&mut scores);
                let oh = &mut out.data[i * d + h * dh..i * d + (h + 1) * dh];
                for (j, e) in entries.iter().enumerate() {
                    let p = scores[j];
                    probs[(base + j) * heads + h] = p;
                    let vv = self.value(sources[e.src as usize].1);
                    let vh = &vv.row(e.row as usize)[h * dh..(h + 1) * dh];
                    oh.iter_mut().zip(vh).for_each(|(o, v)| *o += p * v);
                }
            }
        }
        let rg =
            self.rg(q) || self.rg(bias) || sources.iter().any(|(k, v)| self.rg(*k) || self.rg(*v));
        self.push(
            out,
            Op::Attention(Box::new(AttnOp {
                q,
                sources,
                bias,
                heads,
                plan,
                probs,
            })),
            rg,
        )
    }

    /// `Σ_r w_r KL(target_r ‖ pred~_r)` with `pred~ = (pred + eps) / (1 + n·eps)`.
    pub fn kl_rows(&mut self, target: Arc<Mat>, pred: Var, weights: Vec<f64>, eps: f64) -> Var {
        let pv = self.value(pred);
        assert_eq!((target.rows, target.cols), (pv.rows, pv.cols), "kl shape");
        assert_eq!(weights.len(), pv.rows, "kl weights");
        let denom = 1.0 + pv.cols as f64 * eps;
        let mut total = 0.0;
        for r in 0..pv.rows {
            if weights[r] == 0.0 {
                continue;
            }
            let mut kl = 0.0;
            for (p, q) in target.row(r).iter().zip(pv.row(r)) {
                if *p > 0.0 {
                    kl += p * (p * denom / (q + eps)).ln();
                }
            }
            total += weights[r] * kl;
        }
        let rg = self.rg(pred);
        self.push(
            Mat::from_vec(1, 1, vec![total]),
            Op::KlRows {
                target,
                pred,
                weights,
                eps,
            },
            rg,
        )
    }

    /// `Σ_r w_r · (−ln max(probs[r][targets[r]], floor))`.
    pub fn nll_rows(
        &mut self,
        probs: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        floor: f64,
    ) -> Var {
        let pv = self.value(probs);
        assert_eq!(targets.len(), pv.rows, "nll targets");
        let total: f64 = targets
            .iter()
            .enumerate()
            .map(|(r, &t)| -weights[r] * pv.row(r)[t].max(floor).ln())
            .sum();
        let rg = self.rg(probs);
        self.push(
            Mat::from_vec(1, 1, vec![total]),
            Op::NllRows {
                probs,
                targets,
                weights,
                floor,
            },
            rg,
        )
    }

    /// `Σ a ⊙ c` for a constant `c` of the same shape.
    pub fn dot_const(&mut self, a: Var, c: Arc<Mat>) -> Var {
        let av = self.value(a);
        assert_eq!(av.data.len(), c.data.len(), "dot_const shape");
        let s = av.data.iter().zip(&c.data).map(|(x, y)| x * y).sum();
        let rg = self.rg(a);
        self.push(Mat::from_vec(1, 1, vec![s]), Op::DotConst(a, c), rg)
    }

    /// `Σ c_i · x_i` over `1×1` nodes.
    pub fn lin_comb(&mut self, terms: Vec<(Var, f64)>) -> Var {
        let s = terms.iter().map(|(v, c)| c * self.value(*v).scalar()).sum();
        let rg = terms.iter().any(|(v, _)| self.rg(*v));
        self.push(Mat::from_vec(1, 1, vec![s]), Op::LinComb(terms), rg)
    }

    /// Gradients of the scalar `root` with respect to every node that
    /// requires one.
    pub fn backward(&self, root: Var) -> Grads {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Mat::from_vec(1, 1, vec![1.0]));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Grads(grads)
    }

    fn acc(&self, grads: &mut [Option<Mat>], v: Var, f: impl FnOnce(&mut Mat)) {
        if !self.rg(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            let val = &self.nodes[v.0].value;
            *slot = Some(Mat::zeros(val.rows, val.cols));
        }
        f(slot.as_mut().expect("just set"));
    }

    fn propagate(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, |ga| {
                    gemm_nt_acc(&g.data, &bv.data, &mut ga.data, g.rows, g.cols, bv.rows)
                });
                self.acc(grads, *b, |gb| {
                    gemm_tn_acc(&av.data, &g.data, &mut gb.data, av.rows, av.cols, g.cols)
                });
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |ga| ga.add_assign(g));
                self.acc(grads, *b, |gb| gb.add_assign(g));
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, |ga| ga.add_assign(g));
                self.acc(grads, *row, |gr| {
                    for r in 0..g.rows {
                        gr.data.iter_mut().zip(g.row(r)).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::MulRow(a, row) => {
                let (av, rv) = (self.value(*a), self.value(*row));
                self.acc(grads, *a, |ga| {
                    for r in 0..g.rows {
                        let gr = g.row(r);
                        ga.row_mut(r)
                            .iter_mut()
                            .enumerate()
                            .for_each(|(j, x)| *x += gr[j] * rv.data[j]);
                    }
                });
                self.acc(grads, *row, |grow| {
                    for r in 0..g.rows {
                        let (gr, ar) = (g.row(r), av.row(r));
                        grow.data
                            .iter_mut()
                            .enumerate()
                            .for_each(|(j, x)| *x += gr[j] * ar[j]);
                    }
                });
            }
            Op::Scale(a, c) => self.acc(grads, *a, |ga| {
                ga.data
                    .iter_mut()
                    .zip(&g.data)
                    .for_each(|(x, y)| *x += c * y)
            }),
            Op::ScaleBy(a, s) => {
                let sv = self.value(*s).scalar();
                let av = self.value(*a);
                self.acc(grads, *a, |ga| {
                    ga.data
                        .iter_mut()
                        .zip(&g.data)
                        .for_each(|(x, y)| *x += sv * y)
                });
                self.acc(grads, *s, |gs| {
                    gs.data[0] += av.data.iter().zip(&g.data).map(|(x, y)| x * y).sum::<f64>()
                });
            }
            Op::MulConst(a, c) => self.acc(grads, *a, |ga| {
                ga.data
                    .iter_mut()
                    .zip(g.data.iter().zip(c.iter()))
                    .for_each(|(x, (y, m))| *x += y * m)
            }),
            Op::LayerNorm(a, inv) => {
                let y = &node.value;
                self.acc(grads, *a, |ga| {
                    let n = y.cols as f64;
                    for r in 0..y.rows {
                        let (gr, yr) = (g.row(r), y.row(r));
                        let mg = gr.iter().sum::<f64>() / n;
                        let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                        ga.row_mut(r)
                            .iter_mut()
                            .enumerate()
                            .for_each(|(j, x)| *x += inv[r] * (gr[j] - mg - yr[j] * mgy));
                    }
                });
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                self.acc(grads, *a, |ga| {
                    ga.data
                        .iter_mut()
                        .zip(g.data.iter().zip(&av.data))
                        .for_each(|(x, (y, v))| *x += y * gelu_grad(*v))
                });
            }
            Op::Softmax(a) => {
                let y = &node.value;
                self.acc(grads, *a, |ga| {
                    for r in 0..y.rows {
                        let (gr, yr) = (g.row(r), y.row(r));
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        ga.row_mut(r)
                            .iter_mut()
                            .enumerate()
                            .for_each(|(j, x)| *x += yr[j] * (gr[j] - dot));
                    }
                });
            }
            Op::LogEps(a, eps) => {
                let av = self.value(*a);
                self.acc(grads, *a, |ga| {
                    ga.data
                        .iter_mut()
                        .zip(g.data.iter().zip(&av.data))
                        .for_each(|(x, (y, v))| *x += y / (v + eps))
                });
            }
            Op::SliceRows(a, start) => {
                let cols = g.cols;
                self.acc(grads, *a, |ga| {
                    ga.data[start * cols..start * cols + g.data.len()]
                        .iter_mut()
                        .zip(&g.data)
                        .for_each(|(x, y)| *x += y)
                });
            }
            Op::GroupMean(a, sizes) => {
                self.acc(grads, *a, |ga| {
                    let mut r = 0;
                    for (grp, &n) in sizes.iter().enumerate() {
                        let gr = g.row(grp);
                        for _ in 0..n {
                            ga.row_mut(r)
                                .iter_mut()
                                .zip(gr)
                                .for_each(|(x, y)| *x += y / n as f64);
                            r += 1;
                        }
                    }
                });
            }
            Op::Attention(op) => self.attention_backward(op, g, grads),
            Op::KlRows {
                target,
                pred,
                weights,
                eps,
            } => {
                let gs = g.scalar();
                let pv = self.value(*pred);
                self.acc(grads, *pred, |gp| {
                    for r in 0..pv.rows {
                        if weights[r] == 0.0 {
                            continue;
                        }
                        let c = gs * weights[r];
                        let (tr, qr) = (target.row(r), pv.row(r));
                        gp.row_mut(r).iter_mut().enumerate().for_each(|(j, x)| {
                            if tr[j] > 0.0 {
                                *x -= c * tr[j] / (qr[j] + eps)
                            }
                        });
                    }
                });
            }
            Op::NllRows {
                probs,
                targets,
                weights,
                floor,
            } => {
                let gs = g.scalar();
                let pv = self.value(*probs);
                self.acc(grads, *probs, |gp| {
                    for (r, &t) in targets.iter().enumerate() {
                        let p = pv.row(r)[t];
                        if p > *floor {
                            gp.row_mut(r)[t] -= gs * weights[r] / p;
                        }
                    }
                });
            }
            Op::DotConst(a, c) => {
                let gs = g.scalar();
                self.acc(grads, *a, |ga| {
                    ga.data
                        .iter_mut()
                        .zip(&c.data)
                        .for_each(|(x, y)| *x += gs * y)
                });
            }
            Op::LinComb(terms) => {
                let gs = g.scalar();
                for (v, c) in terms {
                    self.acc(grads, *v, |gv| gv.data[0] += gs * c);
                }
            }
        }
    }

    fn attention_backward(&self, op: &AttnOp, g: &Mat, grads: &mut [Option<Mat>]) {
        let qv = self.value(op.q);
        let (n, d) = (qv.rows, qv.cols);
        let heads = op.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let bias_cols = self.value(op.bias).cols;
        let mut gq = Mat::zeros(n, d);
        let mut gk: Vec<Mat> = op
            .sources
            .iter()
            .map(|(k, _)| Mat::zeros(self.value(*k).rows, d))
            .collect();
        let mut gv: Vec<Mat> = op
            .sources
            .iter()
            .map(|(_, v)| Mat::zeros(self.value(*v).rows, d))
            .collect();
        let mut gbias = vec![0.0; heads * bias_cols];
        let mut ds = Vec::new();
        for i in 0..n {
            let entries = op.plan.row(i);
            let base = op.plan.offsets[i];
            let gi = g.row(i);
            for h in 0..heads {
                let goh = &gi[h * dh..(h + 1) * dh];
                ds.clear();
                let mut dot = 0.0;
                for (j, e) in entries.iter().enumerate() {
                    let vv = self.value(op.sources[e.src as usize].1);
                    let vh = &vv.row(e.row as usize)[h * dh..(h + 1) * dh];
                    let dp: f64 = goh.iter().zip(vh).map(|(a, b)| a * b).sum();
                    let p = op.probs[(base + j) * heads + h];
                    dot += p * dp;
                    ds.push(dp);
                    let gvh = &mut gv[e.src as usize].row_mut(e.row as usize)[h * dh..(h + 1) * dh];
                    gvh.iter_mut().zip(goh).for_each(|(x, y)| *x += p * y);
                }
                let qh = &qv.row(i)[h * dh..(h + 1) * dh];
                for (j, e) in entries.iter().enumerate() {
                    let p = op.probs[(base + j) * heads + h];
                    let s = p * (ds[j] - dot);
                    gbias[h * bias_cols + e.delta as usize] += s;
                    let kv = self.value(op.sources[e.src as usize].0);
                    let kh = &kv.row(e.row as usize)[h * dh..(h + 1) * dh];
                    let gqh = &mut gq.data[i * d + h * dh..i * d + (h + 1) * dh];
                    gqh.iter_mut()
                        .zip(kh)
                        .for_each(|(x, k)| *x += s * scale * k);
                    let gkh = &mut gk[e.src as usize].row_mut(e.row as usize)[h * dh..(h + 1) * dh];
                    gkh.iter_mut()
                        .zip(qh)
                        .for_each(|(x, q)| *x += s * scale * q);
                }
            }
        }
        self.acc(grads, op.q, |x| x.add_assign(&gq));
        self.acc(grads, op.bias, |x| {
            x.data.iter_mut().zip(&gbias).for_each(|(a, b)| *a += b)
        });
        for (s, (k, v)) in op.sources.iter().enumerate() {
            self.acc(grads, *k, |x| x.add_assign(&gk[s]));
            self.acc(grads, *v, |x| x.add_assign(&gv[s]));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_exp_tracks_the_library_exp() {
        let mut worst = 0.0f64;
        for i in 0..200_001 {
            let x = -700.0 + 1400.0 * i as f64 / 200_000.0;
            let rel = (fast_exp(x) - x.exp()).abs() / x.exp();
            worst = worst.max(rel);
        }
        assert!(worst < 1e-15, "{worst:e}");
        assert_eq!(fast_exp(0.0), 1.0);
        assert!(fast_exp(f64::NAN).is_nan());
        assert!(fast_exp(f64::NEG_INFINITY) < 1e-300);
    }

    #[test]
    fn blocked_gemm_matches_naive_product() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for (n, k, m) in [
            (1, 1, 1),
            (3, 5, 7),
            (4, 32, 32),
            (9, 17, 24),
            (6, 64, 3),
            (5, 33, 19),
        ] {
            let a: Vec<f64> = (0..n * k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..k * m).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut out = vec![0.5; n * m];
            gemm_acc(&a, &b, &mut out, n, k, m);
            for i in 0..n {
                for j in 0..m {
                    let naive: f64 = 0.5 + (0..k).map(|p| a[i * k + p] * b[p * m + j]).sum::<f64>();
                    assert!((out[i * m + j] - naive).abs() < 1e-12);
                }
            }
        }
    }
    use rand::{Rng, SeedableRng};

    fn rand_mat(rng: &mut impl Rng, rows: usize, cols: usize) -> Mat {
        Mat::from_vec(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
    }

    /// Compare the analytic gradient of every leaf entry with central
    /// differences of the rebuilt graph.
    fn check<F>(leaves: Vec<Mat>, build: F)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let eval = |ls: &[Mat]| {
            let mut t = Tape::new();
            let vars: Vec<Var> = ls.iter().map(|m| t.leaf(m.clone(), true)).collect();
            let out = build(&mut t, &vars);
            (t, vars, out)
        };
        let (tape, vars, out) = eval(&leaves);
        let grads = tape.backward(out);
        let h = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            for e in 0..leaf.data.len() {
                let mut plus = leaves.clone();
                plus[li].data[e] += h;
                let mut minus = leaves.clone();
                minus[li].data[e] -= h;
                let (tp, _, op) = eval(&plus);
                let (tm, _, om) = eval(&minus);
                let fd = (tp.value(op).scalar() - tm.value(om).scalar()) / (2.0 * h);
                let an = grads.get(vars[li]).map_or(0.0, |g| g.data[e]);
                let err = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
                assert!(
                    err < 1e-5,
                    "leaf {li} entry {e}: analytic {an} vs numeric {fd}"
                );
            }
        }
    }

    fn probe(rng: &mut impl Rng, rows: usize, cols: usize) -> Arc<Mat> {
        Arc::new(rand_mat(rng, rows, cols))
    }

    #[test]
    fn dense_ops() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let c = probe(&mut rng, 3, 4);
        let leaves = vec![
            rand_mat(&mut rng, 3, 5),
            rand_mat(&mut rng, 5, 4),
            rand_mat(&mut rng, 1, 4),
            rand_mat(&mut rng, 1, 1),
        ];
        let mask = Arc::new((0..12).map(|i| (i % 3) as f64).collect::<Vec<_>>());
        check(leaves, move |t, v| {
            let x = t.matmul(v[0], v[1]);
            let x = t.add_row(x, v[2]);
            let x = t.mul_row(x, v[2]);
            let x = t.scale_by(x, v[3]);
            let y = t.scale(x, -0.7);
            let x = t.add(x, y);
            let x = t.mul_const(x, mask.clone());
            t.dot_const(x, c.clone())
        });
    }

    #[test]
    fn nonlinear_ops() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let leaves = vec![rand_mat(&mut rng, 4, 6), rand_mat(&mut rng, 6, 3)];
        check(leaves, move |t, v| {
            let x = t.layer_norm(v[0]);
            let x = t.gelu(x);
            let x = t.matmul(x, v[1]);
            let x = t.softmax_rows(x);
            let l = t.log_eps(x, 1e-6);
            let s = t.slice_rows(l, 1, 3);
            let w = t.slice_rows(v[1], 2, 3);
            let s = t.matmul(s, w);
            let m = t.group_mean(s, vec![1, 2]);
            let target = Arc::new(Mat::from_vec(2, 3, vec![0.2, 0.0, 0.8, 0.5, 0.5, 0.0]));
            let sm = t.softmax_rows(m);
            let kl = t.kl_rows(target, sm, vec![1.0, 0.5], 1e-10);
            let nll = t.nll_rows(sm, vec![2, 0], vec![0.3, 0.7], 1e-10);
            t.lin_comb(vec![(kl, 1.0), (nll, 2.0)])
        });
    }

    #[test]
    fn attention_op() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let c = probe(&mut rng, 3, 4);
        // Query rows 0..3 attend into a 4-row source and a 3-row source.
        let mut plan = AttnPlan::new();
        for i in 0..3u32 {
            for delta in 0..3u32 {
                plan.push(AttnEntry {
                    src: 0,
                    row: (i + 3 - delta).min(3),
                    delta,
                });
            }
            plan.push(AttnEntry {
                src: 1,
                row: i,
                delta: 0,
            });
            plan.end_row();
        }
        let plan = Arc::new(plan);
        let leaves = vec![
            rand_mat(&mut rng, 3, 4),
            rand_mat(&mut rng, 4, 4),
            rand_mat(&mut rng, 4, 4),
            rand_mat(&mut rng, 3, 4),
            rand_mat(&mut rng, 3, 4),
            rand_mat(&mut rng, 2, 3),
        ];
        check(leaves, move |t, v| {
            let a = t.attention(
                v[0],
                vec![(v[1], v[2]), (v[3], v[4])],
                v[5],
                2,
                plan.clone(),
            );
            t.dot_const(a, c.clone())
        });
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let a = t.constant(Mat::from_vec(1, 2, vec![1.0, 2.0]));
        let b = t.leaf(Mat::from_vec(2, 1, vec![3.0, 4.0]), true);
        let y = t.matmul(a, b);
        let g = t.backward(y);
        assert!(g.get(a).is_none());
        assert_eq!(g.get(b).unwrap().data, vec![1.0, 2.0]);
        assert_eq!(t.value(y).scalar(), 11.0);
    }
}
