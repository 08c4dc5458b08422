//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Every tensor is a dense `Array2<f64>`; scalars are 1x1, row vectors 1xN.
//! Operations evaluate eagerly and push one node each. [`Tape::backward`]
//! walks the tape in reverse, accumulating gradients into parent slots, so a
//! value used k times receives the sum of its k partials.
//!
//! Sequence ops that would otherwise expand into hundreds of nodes per sample
//! (GRU scan, layer norm) are fused single nodes with hand-written backward
//! passes; the unit tests check every op against central finite differences.
//!
//! Masking contract: masked positions are excluded before exponentiation,
//! which is numerically identical to adding -1e30 to their logits (the exp
//! underflows to exactly 0.0 in f64), so masked positions receive exactly
//! zero attention weight and exactly zero gradient.

use std::rc::Rc;

use ndarray::{s, Array1, Array2, Axis};

/// Handle to a tape node. Only meaningful for the tape that produced it.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(u32);

impl Var {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

/// Per-step intermediates of a fused GRU scan, kept for the backward pass.
struct GruCache {
    /// Input row visited at scan step k (identity order, or reversed).
    order: Vec<usize>,
    r: Array2<f64>,
    z: Array2<f64>,
    n: Array2<f64>,
    /// Candidate pre-activation contribution `h_prev @ W_hh` (n-gate third).
    ghn: Array2<f64>,
    hprev: Array2<f64>,
}

/// Per-row normalized values and reciprocal stddev of a fused layer norm.
struct LnCache {
    xhat: Array2<f64>,
    rstd: Vec<f64>,
}

// Each op records its full argument list even where backward recovers what it
// needs from cached node values.
#[allow(dead_code)]
enum Op {
    Leaf,
    Add(u32, u32),
    Sub(u32, u32),
    Mul(u32, u32),
    /// Matrix plus broadcast row vector.
    AddRow(u32, u32),
    MatMul(u32, u32),
    /// `a.dot(b.t())` without materializing the transpose.
    MatMulNt(u32, u32),
    Scale(u32, f64),
    AddScalar(u32, f64),
    /// 1x1 scalar variable times matrix.
    ScalarMul(u32, u32),
    Sigmoid(u32),
    Tanh(u32),
    Gelu(u32),
    Softplus(u32),
    SumAll(u32),
    HStack(Vec<u32>),
    VStack(Vec<u32>),
    SliceRows(u32, usize, usize),
    SliceCols(u32, usize, usize),
    /// Row r of the output is row r-offset of the input, zero when out of range.
    ShiftRows(u32, i64),
    Reshape(u32, usize, usize),
    SoftmaxRowsMasked(u32, Rc<Vec<bool>>),
    MeanPoolMasked(u32, Rc<Vec<bool>>),
    /// Per-column argmax over valid rows, recorded at forward time.
    MaxPoolMasked(u32, Vec<usize>),
    /// (x, gamma, beta) with cached normalization statistics.
    LayerNorm(u32, u32, u32, Rc<LnCache>),
    GruSeq {
        x: u32,
        w_ih: u32,
        w_hh: u32,
        b_ih: u32,
        b_hh: u32,
        cache: Rc<GruCache>,
    },
    /// Logits 1xC against a class index; stable log-softmax inside.
    CrossEntropy(u32, usize),
    /// Elementwise product with a fixed (already inverse-keep-scaled) mask.
    Dropout(u32, Rc<Array2<f64>>),
    /// Identity value, no gradient to the parent.
    StopGradient(u32),
}

/// Gradients of one backward pass, indexed by the originating [`Var`].
pub struct Grads {
    g: Vec<Option<Array2<f64>>>,
}

impl Grads {
    /// Gradient of the backward root with respect to `v`, if `v` is a leaf
    /// that the root depends on.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.g[v.idx()].as_ref()
    }
}

/// Flat autodiff tape. Build forward with the op methods, then call
/// [`Tape::backward`] on a 1x1 result.
#[derive(Default)]
pub struct Tape {
    vals: Vec<Array2<f64>>,
    ops: Vec<Op>,
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_scalar(x: f64) -> f64 {
    // max(x,0) + ln(1+exp(-|x|)) avoids overflow on both tails.
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of nodes currently on the tape.
    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.vals[v.idx()]
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let a = self.value(v);
        assert_eq!(a.dim(), (1, 1), "scalar() on a non-1x1 node");
        a[[0, 0]]
    }

    fn push(&mut self, val: Array2<f64>, op: Op) -> Var {
        let id = self.ops.len() as u32;
        self.vals.push(val);
        self.ops.push(op);
        Var(id)
    }

    pub fn leaf(&mut self, val: Array2<f64>) -> Var {
        self.push(val, Op::Leaf)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.leaf(Array2::zeros((rows, cols)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.vals[a.idx()].dim(), self.vals[b.idx()].dim(), "add shape mismatch");
        let v = &self.vals[a.idx()] + &self.vals[b.idx()];
        self.push(v, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.vals[a.idx()].dim(), self.vals[b.idx()].dim(), "sub shape mismatch");
        let v = &self.vals[a.idx()] - &self.vals[b.idx()];
        self.push(v, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.vals[a.idx()].dim(), self.vals[b.idx()].dim(), "mul shape mismatch");
        let v = &self.vals[a.idx()] * &self.vals[b.idx()];
        self.push(v, Op::Mul(a.0, b.0))
    }

    /// `a + row` where `row` is 1xN broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (_, n) = self.vals[a.idx()].dim();
        assert_eq!(self.vals[row.idx()].dim(), (1, n), "add_row shape mismatch");
        let v = &self.vals[a.idx()] + &self.vals[row.idx()].row(0);
        self.push(v, Op::AddRow(a.0, row.0))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (_, k1) = self.vals[a.idx()].dim();
        let (k2, _) = self.vals[b.idx()].dim();
        assert_eq!(k1, k2, "matmul inner dim mismatch");
        let v = self.vals[a.idx()].dot(&self.vals[b.idx()]);
        self.push(v, Op::MatMul(a.0, b.0))
    }

    /// `a @ b.T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (_, k1) = self.vals[a.idx()].dim();
        let (_, k2) = self.vals[b.idx()].dim();
        assert_eq!(k1, k2, "matmul_nt inner dim mismatch");
        let v = self.vals[a.idx()].dot(&self.vals[b.idx()].t());
        self.push(v, Op::MatMulNt(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = &self.vals[a.idx()] * c;
        self.push(v, Op::Scale(a.0, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = &self.vals[a.idx()] + c;
        self.push(v, Op::AddScalar(a.0, c))
    }

    /// 1x1 variable `s` times matrix `a`.
    pub fn scalar_mul(&mut self, s: Var, a: Var) -> Var {
        assert_eq!(self.vals[s.idx()].dim(), (1, 1), "scalar_mul needs a 1x1 scalar");
        let sv = self.vals[s.idx()][[0, 0]];
        let v = &self.vals[a.idx()] * sv;
        self.push(v, Op::ScalarMul(s.0, a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.vals[a.idx()].mapv(sigmoid_scalar);
        self.push(v, Op::Sigmoid(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.vals[a.idx()].mapv(f64::tanh);
        self.push(v, Op::Tanh(a.0))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.vals[a.idx()].mapv(gelu_scalar);
        self.push(v, Op::Gelu(a.0))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.vals[a.idx()].mapv(softplus_scalar);
        self.push(v, Op::Softplus(a.0))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.vals[a.idx()].sum());
        self.push(v, Op::SumAll(a.0))
    }

    pub fn hstack(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.vals[parts[0].idx()].nrows();
        let cols: usize = parts.iter().map(|p| self.vals[p.idx()].ncols()).sum();
        let mut v = Array2::zeros((rows, cols));
        let mut c0 = 0;
        for p in parts {
            let pv = &self.vals[p.idx()];
            assert_eq!(pv.nrows(), rows, "hstack row mismatch");
            v.slice_mut(s![.., c0..c0 + pv.ncols()]).assign(pv);
            c0 += pv.ncols();
        }
        self.push(v, Op::HStack(parts.iter().map(|p| p.0).collect()))
    }

    pub fn vstack(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.vals[parts[0].idx()].ncols();
        let rows: usize = parts.iter().map(|p| self.vals[p.idx()].nrows()).sum();
        let mut v = Array2::zeros((rows, cols));
        let mut r0 = 0;
        for p in parts {
            let pv = &self.vals[p.idx()];
            assert_eq!(pv.ncols(), cols, "vstack col mismatch");
            v.slice_mut(s![r0..r0 + pv.nrows(), ..]).assign(pv);
            r0 += pv.nrows();
        }
        self.push(v, Op::VStack(parts.iter().map(|p| p.0).collect()))
    }

    pub fn slice_rows(&mut self, a: Var, r0: usize, r1: usize) -> Var {
        assert!(r0 < r1 && r1 <= self.vals[a.idx()].nrows(), "slice_rows out of range");
        let v = self.vals[a.idx()].slice(s![r0..r1, ..]).to_owned();
        self.push(v, Op::SliceRows(a.0, r0, r1))
    }

    pub fn slice_cols(&mut self, a: Var, c0: usize, c1: usize) -> Var {
        assert!(c0 < c1 && c1 <= self.vals[a.idx()].ncols(), "slice_cols out of range");
        let v = self.vals[a.idx()].slice(s![.., c0..c1]).to_owned();
        self.push(v, Op::SliceCols(a.0, c0, c1))
    }

    /// Shift rows down by `offset` (up when negative), filling with zeros.
    pub fn shift_rows(&mut self, a: Var, offset: i64) -> Var {
        let av = &self.vals[a.idx()];
        let (rows, cols) = av.dim();
        let mut v = Array2::zeros((rows, cols));
        for r in 0..rows as i64 {
            let src = r - offset;
            if src >= 0 && src < rows as i64 {
                v.row_mut(r as usize).assign(&av.row(src as usize));
            }
        }
        self.push(v, Op::ShiftRows(a.0, offset))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let av = &self.vals[a.idx()];
        assert_eq!(av.len(), rows * cols, "reshape element count mismatch");
        let v = Array2::from_shape_vec((rows, cols), av.iter().cloned().collect())
            .expect("reshape");
        self.push(v, Op::Reshape(a.0, rows, cols))
    }

    /// Row-wise softmax over the columns flagged valid in `mask`.
    /// Masked columns get exactly zero. At least one column must be valid.
    pub fn softmax_rows_masked(&mut self, a: Var, mask: Rc<Vec<bool>>) -> Var {
        let av = &self.vals[a.idx()];
        let (rows, cols) = av.dim();
        assert_eq!(mask.len(), cols, "softmax mask length mismatch");
        assert!(mask.iter().any(|&m| m), "softmax over an all-masked row");
        let mut v = Array2::zeros((rows, cols));
        for r in 0..rows {
            let mut mx = f64::NEG_INFINITY;
            for c in 0..cols {
                if mask[c] {
                    mx = mx.max(av[[r, c]]);
                }
            }
            let mut z = 0.0;
            for c in 0..cols {
                if mask[c] {
                    let e = (av[[r, c]] - mx).exp();
                    v[[r, c]] = e;
                    z += e;
                }
            }
            for c in 0..cols {
                v[[r, c]] /= z;
            }
        }
        self.push(v, Op::SoftmaxRowsMasked(a.0, mask))
    }

    /// Softmax over all columns of each row.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let cols = self.vals[a.idx()].ncols();
        self.softmax_rows_masked(a, Rc::new(vec![true; cols]))
    }

    /// Mean over the rows flagged valid in `mask`, producing 1xN.
    pub fn mean_pool_masked(&mut self, a: Var, mask: Rc<Vec<bool>>) -> Var {
        let av = &self.vals[a.idx()];
        assert_eq!(mask.len(), av.nrows(), "mean pool mask length mismatch");
        let k = mask.iter().filter(|&&m| m).count();
        assert!(k > 0, "mean pool over an empty mask");
        let mut acc = Array1::zeros(av.ncols());
        for (r, &m) in mask.iter().enumerate() {
            if m {
                acc += &av.row(r);
            }
        }
        acc /= k as f64;
        self.push(acc.insert_axis(Axis(0)), Op::MeanPoolMasked(a.0, mask))
    }

    /// Column-wise max over the rows flagged valid in `mask`, producing 1xN.
    /// Ties resolve to the earliest row, so the backward pass is deterministic.
    pub fn max_pool_masked(&mut self, a: Var, mask: Rc<Vec<bool>>) -> Var {
        let av = &self.vals[a.idx()];
        assert_eq!(mask.len(), av.nrows(), "max pool mask length mismatch");
        assert!(mask.iter().any(|&m| m), "max pool over an empty mask");
        let cols = av.ncols();
        let mut out = Array2::zeros((1, cols));
        let mut argmax = vec![0usize; cols];
        for c in 0..cols {
            let mut best = f64::NEG_INFINITY;
            let mut best_r = 0;
            for (r, &m) in mask.iter().enumerate() {
                if m && av[[r, c]] > best {
                    best = av[[r, c]];
                    best_r = r;
                }
            }
            out[[0, c]] = best;
            argmax[c] = best_r;
        }
        self.push(out, Op::MaxPoolMasked(a.0, argmax))
    }

    /// Row-wise layer normalization with learnable 1xN `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f64 = 1e-5;
        let xv = &self.vals[x.idx()];
        let (rows, cols) = xv.dim();
        assert_eq!(self.vals[gamma.idx()].dim(), (1, cols), "layer_norm gamma shape");
        assert_eq!(self.vals[beta.idx()].dim(), (1, cols), "layer_norm beta shape");
        let mut xhat = Array2::zeros((rows, cols));
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.mean().unwrap();
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + EPS).sqrt();
            rstd.push(rs);
            for c in 0..cols {
                xhat[[r, c]] = (xv[[r, c]] - mean) * rs;
            }
        }
        let gv = self.vals[gamma.idx()].row(0).to_owned();
        let bv = self.vals[beta.idx()].row(0).to_owned();
        let mut v = Array2::zeros((rows, cols));
        for r in 0..rows {
            for c in 0..cols {
                v[[r, c]] = xhat[[r, c]] * gv[c] + bv[c];
            }
        }
        let cache = Rc::new(LnCache { xhat, rstd });
        self.push(v, Op::LayerNorm(x.0, gamma.0, beta.0, cache))
    }

    /// Fused GRU scan over the rows of `x` (gate layout `[r, z, n]`, matching
    /// the usual `W_ih: in x 3h`, `W_hh: h x 3h` packing). Output row t is the
    /// hidden state after consuming row t. With `reverse` the scan runs
    /// right-to-left and the output stays aligned with the input rows.
    pub fn gru_seq(
        &mut self,
        x: Var,
        w_ih: Var,
        w_hh: Var,
        b_ih: Var,
        b_hh: Var,
        reverse: bool,
    ) -> Var {
        let xv = &self.vals[x.idx()];
        let (n, din) = xv.dim();
        let h = self.vals[w_hh.idx()].nrows();
        assert_eq!(self.vals[w_ih.idx()].dim(), (din, 3 * h), "gru W_ih shape");
        assert_eq!(self.vals[w_hh.idx()].dim(), (h, 3 * h), "gru W_hh shape");
        assert_eq!(self.vals[b_ih.idx()].dim(), (1, 3 * h), "gru b_ih shape");
        assert_eq!(self.vals[b_hh.idx()].dim(), (1, 3 * h), "gru b_hh shape");
        assert!(n > 0, "gru on an empty sequence");

        let gx_all = xv.dot(&self.vals[w_ih.idx()]) + &self.vals[b_ih.idx()].row(0);
        let w_hh_v = self.vals[w_hh.idx()].clone();
        let b_hh_v = self.vals[b_hh.idx()].row(0).to_owned();

        let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
        let mut out = Array2::zeros((n, h));
        let mut cache = GruCache {
            order: order.clone(),
            r: Array2::zeros((n, h)),
            z: Array2::zeros((n, h)),
            n: Array2::zeros((n, h)),
            ghn: Array2::zeros((n, h)),
            hprev: Array2::zeros((n, h)),
        };
        let mut hs: Array1<f64> = Array1::zeros(h);
        for (k, &pos) in order.iter().enumerate() {
            let gx = gx_all.row(pos);
            let gh = hs.dot(&w_hh_v) + &b_hh_v;
            cache.hprev.row_mut(k).assign(&hs);
            for j in 0..h {
                let r = sigmoid_scalar(gx[j] + gh[j]);
                let z = sigmoid_scalar(gx[h + j] + gh[h + j]);
                let nn = (gx[2 * h + j] + r * gh[2 * h + j]).tanh();
                cache.r[[k, j]] = r;
                cache.z[[k, j]] = z;
                cache.n[[k, j]] = nn;
                cache.ghn[[k, j]] = gh[2 * h + j];
                hs[j] = (1.0 - z) * nn + z * hs[j];
            }
            out.row_mut(pos).assign(&hs);
        }
        self.push(
            out,
            Op::GruSeq { x: x.0, w_ih: w_ih.0, w_hh: w_hh.0, b_ih: b_ih.0, b_hh: b_hh.0, cache: Rc::new(cache) },
        )
    }

    /// Cross-entropy of 1xC logits against a class index, as a 1x1 loss.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Var {
        let lv = &self.vals[logits.idx()];
        assert_eq!(lv.nrows(), 1, "cross_entropy expects 1xC logits");
        assert!(label < lv.ncols(), "cross_entropy label out of range");
        let row = lv.row(0);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln() + mx;
        let loss = lse - row[label];
        self.push(Array2::from_elem((1, 1), loss), Op::CrossEntropy(logits.0, label))
    }

    /// Elementwise product with a fixed mask (inverse keep-probability scaling
    /// baked in by the caller). The mask is data, not a differentiable input.
    pub fn dropout_mask(&mut self, a: Var, mask: Rc<Array2<f64>>) -> Var {
        assert_eq!(self.vals[a.idx()].dim(), mask.dim(), "dropout mask shape mismatch");
        let v = &self.vals[a.idx()] * &*mask;
        self.push(v, Op::Dropout(a.0, mask))
    }

    /// Identity on the value; the backward pass stops here.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let v = self.vals[a.idx()].clone();
        self.push(v, Op::StopGradient(a.0))
    }

    /// Backpropagate from a 1x1 `root`. Returns gradients for every leaf the
    /// root depends on; intermediate gradients are dropped as they are consumed.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.vals[root.idx()].dim(), (1, 1), "backward root must be 1x1");
        let mut g: Vec<Option<Array2<f64>>> = (0..self.ops.len()).map(|_| None).collect();
        g[root.idx()] = Some(Array2::from_elem((1, 1), 1.0));

        for i in (0..=root.idx()).rev() {
            let Some(gi) = g[i].take() else { continue };
            match &self.ops[i] {
                Op::Leaf => {
                    g[i] = Some(gi);
                }
                Op::Add(a, b) => {
                    acc(&mut g, *b, gi.clone());
                    acc(&mut g, *a, gi);
                }
                Op::Sub(a, b) => {
                    acc(&mut g, *b, -&gi);
                    acc(&mut g, *a, gi);
                }
                Op::Mul(a, b) => {
                    let da = &gi * &self.vals[*b as usize];
                    let db = &gi * &self.vals[*a as usize];
                    acc(&mut g, *a, da);
                    acc(&mut g, *b, db);
                }
                Op::AddRow(a, row) => {
                    let dr = gi.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut g, *row, dr);
                    acc(&mut g, *a, gi);
                }
                Op::MatMul(a, b) => {
                    let da = gi.dot(&self.vals[*b as usize].t());
                    let db = self.vals[*a as usize].t().dot(&gi);
                    acc(&mut g, *a, da);
                    acc(&mut g, *b, db);
                }
                Op::MatMulNt(a, b) => {
                    let da = gi.dot(&self.vals[*b as usize]);
                    let db = gi.t().dot(&self.vals[*a as usize]);
                    acc(&mut g, *a, da);
                    acc(&mut g, *b, db);
                }
                Op::Scale(a, c) => {
                    acc(&mut g, *a, &gi * *c);
                }
                Op::AddScalar(a, _) => {
                    acc(&mut g, *a, gi);
                }
                Op::ScalarMul(sv, a) => {
                    let s = self.vals[*sv as usize][[0, 0]];
                    let ds = (&gi * &self.vals[*a as usize]).sum();
                    acc(&mut g, *sv, Array2::from_elem((1, 1), ds));
                    acc(&mut g, *a, &gi * s);
                }
                Op::Sigmoid(a) => {
                    let y = &self.vals[i];
                    let da = &gi * &(y * &(1.0 - y));
                    acc(&mut g, *a, da);
                }
                Op::Tanh(a) => {
                    let y = &self.vals[i];
                    let da = &gi * &(1.0 - y * y);
                    acc(&mut g, *a, da);
                }
                Op::Gelu(a) => {
                    let da = &gi * &self.vals[*a as usize].mapv(gelu_grad_scalar);
                    acc(&mut g, *a, da);
                }
                Op::Softplus(a) => {
                    let da = &gi * &self.vals[*a as usize].mapv(sigmoid_scalar);
                    acc(&mut g, *a, da);
                }
                Op::SumAll(a) => {
                    let da = Array2::from_elem(self.vals[*a as usize].dim(), gi[[0, 0]]);
                    acc(&mut g, *a, da);
                }
                Op::HStack(parts) => {
                    let mut c0 = 0;
                    for p in parts {
                        let w = self.vals[*p as usize].ncols();
                        acc(&mut g, *p, gi.slice(s![.., c0..c0 + w]).to_owned());
                        c0 += w;
                    }
                }
                Op::VStack(parts) => {
                    let mut r0 = 0;
                    for p in parts {
                        let h = self.vals[*p as usize].nrows();
                        acc(&mut g, *p, gi.slice(s![r0..r0 + h, ..]).to_owned());
                        r0 += h;
                    }
                }
                Op::SliceRows(a, r0, _) => {
                    let mut da = Array2::zeros(self.vals[*a as usize].dim());
                    da.slice_mut(s![*r0..*r0 + gi.nrows(), ..]).assign(&gi);
                    acc(&mut g, *a, da);
                }
                Op::SliceCols(a, c0, _) => {
                    let mut da = Array2::zeros(self.vals[*a as usize].dim());
                    da.slice_mut(s![.., *c0..*c0 + gi.ncols()]).assign(&gi);
                    acc(&mut g, *a, da);
                }
                Op::ShiftRows(a, offset) => {
                    let (rows, cols) = gi.dim();
                    let mut da = Array2::zeros((rows, cols));
                    for r in 0..rows as i64 {
                        let dst = r + offset;
                        if dst >= 0 && dst < rows as i64 {
                            da.row_mut(r as usize).assign(&gi.row(dst as usize));
                        }
                    }
                    acc(&mut g, *a, da);
                }
                Op::Reshape(a, _, _) => {
                    let dim = self.vals[*a as usize].dim();
                    let da = Array2::from_shape_vec(dim, gi.iter().cloned().collect())
                        .expect("reshape grad");
                    acc(&mut g, *a, da);
                }
                Op::SoftmaxRowsMasked(a, _) => {
                    let p = &self.vals[i];
                    let (rows, cols) = p.dim();
                    let mut da = Array2::zeros((rows, cols));
                    for r in 0..rows {
                        let dot: f64 = (0..cols).map(|c| gi[[r, c]] * p[[r, c]]).sum();
                        for c in 0..cols {
                            da[[r, c]] = p[[r, c]] * (gi[[r, c]] - dot);
                        }
                    }
                    acc(&mut g, *a, da);
                }
                Op::MeanPoolMasked(a, mask) => {
                    let av_dim = self.vals[*a as usize].dim();
                    let k = mask.iter().filter(|&&m| m).count() as f64;
                    let mut da = Array2::zeros(av_dim);
                    for (r, &m) in mask.iter().enumerate() {
                        if m {
                            let mut row = da.row_mut(r);
                            row.assign(&gi.row(0));
                            row.mapv_inplace(|v| v / k);
                        }
                    }
                    acc(&mut g, *a, da);
                }
                Op::MaxPoolMasked(a, argmax) => {
                    let mut da = Array2::zeros(self.vals[*a as usize].dim());
                    for (c, &r) in argmax.iter().enumerate() {
                        da[[r, c]] += gi[[0, c]];
                    }
                    acc(&mut g, *a, da);
                }
                Op::LayerNorm(x, gamma, beta, cache) => {
                    let (rows, cols) = gi.dim();
                    let gv = self.vals[*gamma as usize].row(0).to_owned();
                    let mut dx = Array2::zeros((rows, cols));
                    let mut dgamma = Array2::zeros((1, cols));
                    let mut dbeta = Array2::zeros((1, cols));
                    for r in 0..rows {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for c in 0..cols {
                            let dxhat = gi[[r, c]] * gv[c];
                            m1 += dxhat;
                            m2 += dxhat * cache.xhat[[r, c]];
                            dgamma[[0, c]] += gi[[r, c]] * cache.xhat[[r, c]];
                            dbeta[[0, c]] += gi[[r, c]];
                        }
                        m1 /= cols as f64;
                        m2 /= cols as f64;
                        for c in 0..cols {
                            let dxhat = gi[[r, c]] * gv[c];
                            dx[[r, c]] = cache.rstd[r] * (dxhat - m1 - cache.xhat[[r, c]] * m2);
                        }
                    }
                    acc(&mut g, *x, dx);
                    acc(&mut g, *gamma, dgamma);
                    acc(&mut g, *beta, dbeta);
                }
                Op::GruSeq { x, w_ih, w_hh, b_ih, b_hh, cache } => {
                    let xv = &self.vals[*x as usize];
                    let (n, _din) = xv.dim();
                    let h = self.vals[*w_hh as usize].nrows();
                    let w_hh_v = &self.vals[*w_hh as usize];
                    let mut d_gx = Array2::zeros((n, 3 * h));
                    let mut d_whh = Array2::zeros((h, 3 * h));
                    let mut d_bhh = Array2::zeros((1, 3 * h));
                    let mut carry: Array1<f64> = Array1::zeros(h);
                    let mut dgh: Array1<f64> = Array1::zeros(3 * h);
                    for k in (0..n).rev() {
                        let pos = cache.order[k];
                        for j in 0..h {
                            carry[j] += gi[[pos, j]];
                        }
                        for j in 0..h {
                            let r = cache.r[[k, j]];
                            let z = cache.z[[k, j]];
                            let nn = cache.n[[k, j]];
                            let ghn = cache.ghn[[k, j]];
                            let hp = cache.hprev[[k, j]];
                            let dh = carry[j];
                            let dz = dh * (hp - nn);
                            let dn = dh * (1.0 - z);
                            let dan = dn * (1.0 - nn * nn);
                            let dr = dan * ghn;
                            let dar = dr * r * (1.0 - r);
                            let daz = dz * z * (1.0 - z);
                            dgh[j] = dar;
                            dgh[h + j] = daz;
                            dgh[2 * h + j] = dan * r;
                            d_gx[[pos, j]] = dar;
                            d_gx[[pos, h + j]] = daz;
                            d_gx[[pos, 2 * h + j]] = dan;
                            // Carry through the z-gated skip; the W_hh path is
                            // added below once dgh for all j is complete.
                            carry[j] = dh * z;
                        }
                        for j in 0..h {
                            let hp = cache.hprev[[k, j]];
                            for c in 0..3 * h {
                                d_whh[[j, c]] += hp * dgh[c];
                            }
                        }
                        for c in 0..3 * h {
                            d_bhh[[0, c]] += dgh[c];
                        }
                        carry += &dgh.dot(&w_hh_v.t());
                    }
                    let d_x = d_gx.dot(&self.vals[*w_ih as usize].t());
                    let d_wih = xv.t().dot(&d_gx);
                    let d_bih = d_gx.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut g, *x, d_x);
                    acc(&mut g, *w_ih, d_wih);
                    acc(&mut g, *w_hh, d_whh);
                    acc(&mut g, *b_ih, d_bih);
                    acc(&mut g, *b_hh, d_bhh);
                }
                Op::CrossEntropy(logits, label) => {
                    let lv = &self.vals[*logits as usize];
                    let row = lv.row(0);
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Array1<f64> = row.mapv(|v| (v - mx).exp());
                    let z = exps.sum();
                    let mut da = (exps / z).insert_axis(Axis(0));
                    da[[0, *label]] -= 1.0;
                    acc(&mut g, *logits, da * gi[[0, 0]]);
                }
                Op::Dropout(a, mask) => {
                    acc(&mut g, *a, &gi * &**mask);
                }
                Op::StopGradient(_) => {}
            }
        }
        Grads { g }
    }
}

fn acc(g: &mut [Option<Array2<f64>>], idx: u32, delta: Array2<f64>) {
    match &mut g[idx as usize] {
        Some(cur) => *cur += &delta,
        slot => *slot = Some(delta),
    }
}
