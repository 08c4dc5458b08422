//! Neural building blocks over the autodiff tape: parameter registry with
//! learning-rate groups, the per-forward context (tape + parameter cache +
//! dropout), and the shared differentiable modules (linear, layer norm,
//! multi-head attention, feed-forward, BiGRU, convolutional gate, pooling).

use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Grads, Tape, Var};

/// Learning-rate group of a parameter: the acoustic/visual encoders train at
/// one rate, the text encoder and everything else at another.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum LrGroup {
    Nonverbal,
    Rest,
}

/// Handle into a [`ParamStore`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ParamId(pub(crate) usize);

pub struct ParamEntry {
    pub name: String,
    pub value: Array2<f64>,
    pub group: LrGroup,
}

/// Registry of all trainable parameters of one model instance.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique; they key checkpoints.
    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>, group: LrGroup) -> ParamId {
        let name = name.into();
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name '{name}'"
        );
        self.entries.push(ParamEntry { name, value, group });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.entries[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Array2<f64>) {
        assert_eq!(
            self.entries[id.0].value.dim(),
            value.dim(),
            "set_value shape mismatch for '{}'",
            self.entries[id.0].name
        );
        self.entries[id.0].value = value;
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Total scalar count across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

/// Xavier-uniform init for a (rows x cols) weight.
pub fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-limit..limit))
}

/// One forward pass's working state: the tape, memoized parameter leaves
/// (so a parameter used k times accumulates all k gradient contributions in
/// one slot), and train-mode dropout.
pub struct Ctx<'s> {
    pub tape: Tape,
    store: &'s ParamStore,
    cached: Vec<Option<Var>>,
    train_mode: bool,
    dropout_rate: f64,
    rng: Option<ChaCha8Rng>,
}

impl<'s> Ctx<'s> {
    /// Deterministic evaluation context: dropout off.
    pub fn eval(store: &'s ParamStore) -> Self {
        Ctx {
            tape: Tape::new(),
            store,
            cached: vec![None; store.len()],
            train_mode: false,
            dropout_rate: 0.0,
            rng: None,
        }
    }

    /// Training context with dropout driven by the given RNG.
    pub fn train(store: &'s ParamStore, dropout_rate: f64, rng: ChaCha8Rng) -> Self {
        Ctx {
            tape: Tape::new(),
            store,
            cached: vec![None; store.len()],
            train_mode: true,
            dropout_rate,
            rng: Some(rng),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train_mode
    }

    /// Tape leaf for a parameter, memoized per context.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.cached[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.store.value(id).clone());
        self.cached[id.0] = Some(v);
        v
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.tape.leaf(value)
    }

    /// Inverted dropout on a tensor; identity in eval mode or at rate 0.
    pub fn dropout(&mut self, x: Var) -> Var {
        if !self.train_mode || self.dropout_rate == 0.0 {
            return x;
        }
        let rate = self.dropout_rate;
        let keep = 1.0 - rate;
        let dim = self.tape.value(x).dim();
        let rng = self.rng.as_mut().expect("train ctx has rng");
        let mask = Array2::from_shape_fn(dim, |_| {
            if rng.gen::<f64>() < rate {
                0.0
            } else {
                1.0 / keep
            }
        });
        self.tape.dropout_mask(x, Rc::new(mask))
    }

    /// Adds this pass's parameter gradients into `acc` (indexed like the
    /// store, shapes matching each parameter). Missing gradients add nothing.
    pub fn accumulate_param_grads(&self, grads: &Grads, acc: &mut [Array2<f64>]) {
        for (i, slot) in self.cached.iter().enumerate() {
            if let Some(var) = slot {
                if let Some(g) = grads.get(*var) {
                    acc[i] += g;
                }
            }
        }
    }

    /// Gradient of the most recent backward pass for one parameter, if any.
    pub fn param_grad<'g>(&self, grads: &'g Grads, id: ParamId) -> Option<&'g Array2<f64>> {
        self.cached[id.0].and_then(|v| grads.get(v))
    }
}

/// Mean over valid rows; errors on an empty mask instead of dividing by zero.
pub fn masked_mean_pool(ctx: &mut Ctx, x: Var, mask: &Rc<Vec<bool>>) -> Result<Var> {
    if !mask.iter().any(|&m| m) {
        return Err(Error::Numerical("pooling: mean over an empty mask".to_string()));
    }
    Ok(ctx.tape.mean_pool_masked(x, mask.clone()))
}

/// Per-dimension max over valid rows; errors on an empty mask.
pub fn seq_max_pool(ctx: &mut Ctx, x: Var, mask: &Rc<Vec<bool>>) -> Result<Var> {
    if !mask.iter().any(|&m| m) {
        return Err(Error::Numerical("pooling: max over an empty mask".to_string()));
    }
    Ok(ctx.tape.max_pool_masked(x, mask.clone()))
}

// ============================================================
// Linear / layer norm / feed-forward
// ============================================================

/// Affine map `x @ W (+ b)` with `W: d_in x d_out`.
#[derive(Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        group: LrGroup,
    ) -> Self {
        let w = store.add(format!("{name}.w"), xavier(rng, d_in, d_out), group);
        let b = bias.then(|| store.add(format!("{name}.b"), Array2::zeros((1, d_out)), group));
        Linear { w, b }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let w = ctx.p(self.w);
        let y = ctx.tape.matmul(x, w);
        match self.b {
            Some(b) => {
                let bv = ctx.p(b);
                ctx.tape.add_row(y, bv)
            }
            None => y,
        }
    }
}

/// Learnable row-wise layer normalization.
#[derive(Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, group: LrGroup) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Array2::from_elem((1, d), 1.0), group);
        let beta = store.add(format!("{name}.beta"), Array2::zeros((1, d)), group);
        LayerNorm { gamma, beta }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let g = ctx.p(self.gamma);
        let b = ctx.p(self.beta);
        ctx.tape.layer_norm(x, g, b)
    }
}

/// Two-layer GELU feed-forward block.
#[derive(Clone)]
pub struct FeedForward {
    pub lin1: Linear,
    pub lin2: Linear,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d: usize,
        hidden: usize,
        group: LrGroup,
    ) -> Self {
        FeedForward {
            lin1: Linear::new(store, rng, &format!("{name}.lin1"), d, hidden, true, group),
            lin2: Linear::new(store, rng, &format!("{name}.lin2"), hidden, d, true, group),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let h = self.lin1.forward(ctx, x);
        let h = ctx.tape.gelu(h);
        self.lin2.forward(ctx, h)
    }
}

// ============================================================
// Multi-head attention
// ============================================================

/// Shape/head configuration for an attention module.
#[derive(Clone, Copy, Debug)]
pub struct AttentionConfig {
    pub d: usize,
    pub num_heads: usize,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.num_heads == 0 || self.d % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "attention: model dim {} must be a positive multiple of num_heads {}",
                self.d, self.num_heads
            )));
        }
        Ok(())
    }
}

/// Multi-head scaled-dot-product attention with query/key/value/output
/// projections. Masked key positions are excluded from normalization and
/// receive exactly zero weight.
#[derive(Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub num_heads: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: AttentionConfig,
        group: LrGroup,
    ) -> Self {
        let d = cfg.d;
        MultiHeadAttention {
            wq: Linear::new(store, rng, &format!("{name}.wq"), d, d, true, group),
            wk: Linear::new(store, rng, &format!("{name}.wk"), d, d, true, group),
            wv: Linear::new(store, rng, &format!("{name}.wv"), d, d, true, group),
            wo: Linear::new(store, rng, &format!("{name}.wo"), d, d, true, group),
            num_heads: cfg.num_heads,
        }
    }

    /// Attention output for `query_seq` over `key_value_seq`.
    pub fn forward(
        &self,
        ctx: &mut Ctx,
        query_seq: Var,
        key_value_seq: Var,
        kv_mask: &Rc<Vec<bool>>,
    ) -> Result<Var> {
        self.forward_with_weights(ctx, query_seq, key_value_seq, kv_mask).map(|(out, _)| out)
    }

    /// Like [`Self::forward`], also returning each head's weight matrix
    /// (rows = queries, cols = keys) for telemetry and tests.
    pub fn forward_with_weights(
        &self,
        ctx: &mut Ctx,
        query_seq: Var,
        key_value_seq: Var,
        kv_mask: &Rc<Vec<bool>>,
    ) -> Result<(Var, Vec<Array2<f64>>)> {
        if !kv_mask.iter().any(|&m| m) {
            return Err(Error::Numerical(
                "attention: every key position is masked".to_string(),
            ));
        }
        let kv_len = ctx.tape.value(key_value_seq).nrows();
        if kv_mask.len() != kv_len {
            return Err(Error::Config(format!(
                "attention: mask length {} does not match {} key positions",
                kv_mask.len(),
                kv_len
            )));
        }
        let d = ctx.tape.value(query_seq).ncols();
        let dh = d / self.num_heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let q = self.wq.forward(ctx, query_seq);
        let k = self.wk.forward(ctx, key_value_seq);
        let v = self.wv.forward(ctx, key_value_seq);

        let mut head_outs = Vec::with_capacity(self.num_heads);
        let mut head_weights = Vec::with_capacity(self.num_heads);
        for h in 0..self.num_heads {
            let (c0, c1) = (h * dh, (h + 1) * dh);
            let qh = ctx.tape.slice_cols(q, c0, c1);
            let kh = ctx.tape.slice_cols(k, c0, c1);
            let vh = ctx.tape.slice_cols(v, c0, c1);
            let scores = ctx.tape.matmul_nt(qh, kh);
            let scores = ctx.tape.scale(scores, scale);
            let weights = ctx.tape.softmax_rows_masked(scores, kv_mask.clone());
            head_weights.push(ctx.tape.value(weights).clone());
            let weights = ctx.dropout(weights);
            head_outs.push(ctx.tape.matmul(weights, vh));
        }
        let concat = ctx.tape.hstack(&head_outs);
        Ok((self.wo.forward(ctx, concat), head_weights))
    }
}

/// Post-norm transformer encoder layer: masked self-attention and a GELU
/// feed-forward sublayer, each wrapped residual-then-layer-norm.
#[derive(Clone)]
pub struct TransformerLayer {
    pub attn: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub ffn: FeedForward,
    pub ln2: LayerNorm,
}

impl TransformerLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: AttentionConfig,
        ffn_hidden: usize,
        group: LrGroup,
    ) -> Self {
        TransformerLayer {
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), cfg, group),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), cfg.d, group),
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), cfg.d, ffn_hidden, group),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), cfg.d, group),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var, mask: &Rc<Vec<bool>>) -> Result<Var> {
        let att = self.attn.forward(ctx, x, x, mask)?;
        let att = ctx.dropout(att);
        let sum = ctx.tape.add(x, att);
        let x1 = self.ln1.forward(ctx, sum);
        let f = self.ffn.forward(ctx, x1);
        let f = ctx.dropout(f);
        let sum2 = ctx.tape.add(x1, f);
        Ok(self.ln2.forward(ctx, sum2))
    }
}

// ============================================================
// BiGRU and convolutional gate
// ============================================================

/// Bidirectional GRU with hidden size d/2 per direction, so the concatenated
/// output matches the input width d. Runs over the valid prefix only and
/// zero-fills padding rows.
#[derive(Clone)]
pub struct BiGru {
    w_ih_f: ParamId,
    w_hh_f: ParamId,
    b_ih_f: ParamId,
    b_hh_f: ParamId,
    w_ih_b: ParamId,
    w_hh_b: ParamId,
    b_ih_b: ParamId,
    b_hh_b: ParamId,
    hidden: usize,
}

impl BiGru {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d: usize,
        group: LrGroup,
    ) -> Result<Self> {
        if d % 2 != 0 {
            return Err(Error::Config(format!(
                "bigru: model dim {d} must be even to split across directions"
            )));
        }
        let h = d / 2;
        let dir = |rng: &mut ChaCha8Rng, store: &mut ParamStore, suffix: &str| {
            (
                store.add(format!("{name}.{suffix}.w_ih"), xavier(rng, d, 3 * h), group),
                store.add(format!("{name}.{suffix}.w_hh"), xavier(rng, h, 3 * h), group),
                store.add(format!("{name}.{suffix}.b_ih"), Array2::zeros((1, 3 * h)), group),
                store.add(format!("{name}.{suffix}.b_hh"), Array2::zeros((1, 3 * h)), group),
            )
        };
        let (w_ih_f, w_hh_f, b_ih_f, b_hh_f) = dir(rng, store, "fwd");
        let (w_ih_b, w_hh_b, b_ih_b, b_hh_b) = dir(rng, store, "bwd");
        Ok(BiGru { w_ih_f, w_hh_f, b_ih_f, b_hh_f, w_ih_b, w_hh_b, b_ih_b, b_hh_b, hidden: h })
    }

    /// `x` is the full padded sequence; only rows `0..n_valid` feed the scan.
    pub fn forward(&self, ctx: &mut Ctx, x: Var, n_valid: usize) -> Result<Var> {
        let (rows, _d) = ctx.tape.value(x).dim();
        if n_valid == 0 || n_valid > rows {
            return Err(Error::Numerical(format!(
                "bigru: valid prefix {n_valid} out of range for {rows} rows"
            )));
        }
        let prefix = if n_valid == rows { x } else { ctx.tape.slice_rows(x, 0, n_valid) };
        let (wf, whf, bf, bhf) =
            (ctx.p(self.w_ih_f), ctx.p(self.w_hh_f), ctx.p(self.b_ih_f), ctx.p(self.b_hh_f));
        let fwd = ctx.tape.gru_seq(prefix, wf, whf, bf, bhf, false);
        let (wb, whb, bb, bhb) =
            (ctx.p(self.w_ih_b), ctx.p(self.w_hh_b), ctx.p(self.b_ih_b), ctx.p(self.b_hh_b));
        let bwd = ctx.tape.gru_seq(prefix, wb, whb, bb, bhb, true);
        let both = ctx.tape.hstack(&[fwd, bwd]);
        if n_valid == rows {
            Ok(both)
        } else {
            let pad = ctx.tape.zeros(rows - n_valid, 2 * self.hidden);
            Ok(ctx.tape.vstack(&[both, pad]))
        }
    }
}

/// Width-3 same-padded convolutional sigmoid gate applied elementwise:
/// `out = sigmoid(conv1d(x)) * x`. Zero rows stay zero, so padding is inert.
#[derive(Clone)]
pub struct ConvGate {
    w_prev: ParamId,
    w_self: ParamId,
    w_next: ParamId,
    bias: ParamId,
}

impl ConvGate {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d: usize,
        group: LrGroup,
    ) -> Self {
        ConvGate {
            w_prev: store.add(format!("{name}.w_prev"), xavier(rng, d, d), group),
            w_self: store.add(format!("{name}.w_self"), xavier(rng, d, d), group),
            w_next: store.add(format!("{name}.w_next"), xavier(rng, d, d), group),
            bias: store.add(format!("{name}.b"), Array2::zeros((1, d)), group),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let prev = ctx.tape.shift_rows(x, 1);
        let next = ctx.tape.shift_rows(x, -1);
        let (wp, ws, wn) = (ctx.p(self.w_prev), ctx.p(self.w_self), ctx.p(self.w_next));
        let a = ctx.tape.matmul(prev, wp);
        let b = ctx.tape.matmul(x, ws);
        let c = ctx.tape.matmul(next, wn);
        let ab = ctx.tape.add(a, b);
        let abc = ctx.tape.add(ab, c);
        let bv = ctx.p(self.bias);
        let pre = ctx.tape.add_row(abc, bv);
        let gate = ctx.tape.sigmoid(pre);
        ctx.tape.mul(gate, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn eye(d: usize) -> Array2<f64> {
        Array2::from_shape_fn((d, d), |(r, c)| f64::from(u8::from(r == c)))
    }

    fn rand_mat(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| r.gen_range(-1.0..1.0))
    }

    /// Zeroes biases and sets all four projections to identity.
    fn make_identity_attention(store: &mut ParamStore, mha: &MultiHeadAttention, d: usize) {
        for lin in [&mha.wq, &mha.wk, &mha.wv, &mha.wo] {
            store.set_value(lin.w, eye(d));
            store.set_value(lin.b.unwrap(), Array2::zeros((1, d)));
        }
    }

    #[test]
    fn attention_single_valid_key_returns_that_value_row() {
        let mut store = ParamStore::new();
        let mut r = rng(1);
        let d = 4;
        let mha = MultiHeadAttention::new(
            &mut store,
            &mut r,
            "mha",
            AttentionConfig { d, num_heads: 1 },
            LrGroup::Rest,
        );
        make_identity_attention(&mut store, &mha, d);
        let mut ctx = Ctx::eval(&store);
        let q = ctx.leaf(rand_mat(&mut r, 2, d));
        let kv = ctx.leaf(rand_mat(&mut r, 3, d));
        let mask = Rc::new(vec![false, true, false]);
        let out = mha.forward(&mut ctx, q, kv, &mask).unwrap();
        let kv_val = ctx.tape.value(kv).clone();
        let out_val = ctx.tape.value(out);
        for row in 0..2 {
            for c in 0..d {
                assert!((out_val[[row, c]] - kv_val[[1, c]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_matches_loop_oracle_single_head() {
        let mut store = ParamStore::new();
        let mut r = rng(2);
        let d = 4;
        let mha = MultiHeadAttention::new(
            &mut store,
            &mut r,
            "mha",
            AttentionConfig { d, num_heads: 1 },
            LrGroup::Rest,
        );
        make_identity_attention(&mut store, &mha, d);
        let q_val = rand_mat(&mut r, 2, d);
        let kv_val = rand_mat(&mut r, 3, d);
        let mut ctx = Ctx::eval(&store);
        let q = ctx.leaf(q_val.clone());
        let kv = ctx.leaf(kv_val.clone());
        let mask = Rc::new(vec![true, true, true]);
        let (out, weights) = mha.forward_with_weights(&mut ctx, q, kv, &mask).unwrap();
        let out_val = ctx.tape.value(out);

        // Hand-rolled softmax(q k^T / sqrt(d)) v.
        let scale = 1.0 / (d as f64).sqrt();
        for i in 0..2 {
            let scores: Vec<f64> =
                (0..3).map(|j| scale * q_val.row(i).dot(&kv_val.row(j))).collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            for c in 0..d {
                let expect: f64 = (0..3).map(|j| exps[j] / z * kv_val[[j, c]]).sum();
                assert!((out_val[[i, c]] - expect).abs() < 1e-6, "row {i} col {c}");
            }
            for j in 0..3 {
                assert!((weights[0][[i, j]] - exps[j] / z).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn attention_weights_are_row_stochastic_and_mask_sound() {
        let mut store = ParamStore::new();
        let mut r = rng(3);
        let d = 8;
        let mha = MultiHeadAttention::new(
            &mut store,
            &mut r,
            "mha",
            AttentionConfig { d, num_heads: 2 },
            LrGroup::Rest,
        );
        let q_val = rand_mat(&mut r, 3, d);
        let mut kv_val = rand_mat(&mut r, 5, d);
        let mask = Rc::new(vec![true, false, true, true, false]);

        let run = |store: &ParamStore, kv_val: &Array2<f64>| -> (Array2<f64>, Vec<Array2<f64>>) {
            let mut ctx = Ctx::eval(store);
            let q = ctx.leaf(q_val.clone());
            let kv = ctx.leaf(kv_val.clone());
            let (out, w) = mha.forward_with_weights(&mut ctx, q, kv, &mask).unwrap();
            (ctx.tape.value(out).clone(), w)
        };
        let (out_a, weights) = run(&store, &kv_val);
        for w in &weights {
            for row in w.rows() {
                let s: f64 = row.sum();
                assert!((s - 1.0).abs() <= 1e-6, "weights row sums to {s}");
            }
            assert_eq!(w[[0, 1]], 0.0);
            assert_eq!(w[[2, 4]], 0.0);
        }
        // Perturbing masked rows changes nothing, not even in the last bit.
        kv_val[[1, 0]] += 1000.0;
        kv_val[[4, 3]] -= 55.5;
        let (out_b, _) = run(&store, &kv_val);
        assert_eq!(out_a, out_b);
    }

    #[test]
    fn attention_output_invariant_under_valid_key_permutation() {
        let mut store = ParamStore::new();
        let mut r = rng(4);
        let d = 8;
        let mha = MultiHeadAttention::new(
            &mut store,
            &mut r,
            "mha",
            AttentionConfig { d, num_heads: 2 },
            LrGroup::Rest,
        );
        let q_val = rand_mat(&mut r, 2, d);
        let kv_val = rand_mat(&mut r, 4, d);
        let perms: [[usize; 4]; 3] = [[1, 0, 2, 3], [3, 2, 1, 0], [2, 3, 0, 1]];
        let base = {
            let mut ctx = Ctx::eval(&store);
            let q = ctx.leaf(q_val.clone());
            let kv = ctx.leaf(kv_val.clone());
            let mask = Rc::new(vec![true; 4]);
            let out = mha.forward(&mut ctx, q, kv, &mask).unwrap();
            ctx.tape.value(out).clone()
        };
        for perm in perms {
            let mut permuted = Array2::zeros((4, d));
            for (to, &from) in perm.iter().enumerate() {
                permuted.row_mut(to).assign(&kv_val.row(from));
            }
            let mut ctx = Ctx::eval(&store);
            let q = ctx.leaf(q_val.clone());
            let kv = ctx.leaf(permuted);
            let mask = Rc::new(vec![true; 4]);
            let out = mha.forward(&mut ctx, q, kv, &mask).unwrap();
            let out_val = ctx.tape.value(out);
            for (a, b) in base.iter().zip(out_val.iter()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn attention_rejects_all_masked_keys() {
        let mut store = ParamStore::new();
        let mut r = rng(5);
        let mha = MultiHeadAttention::new(
            &mut store,
            &mut r,
            "mha",
            AttentionConfig { d: 4, num_heads: 1 },
            LrGroup::Rest,
        );
        let mut ctx = Ctx::eval(&store);
        let q = ctx.leaf(rand_mat(&mut r, 1, 4));
        let kv = ctx.leaf(rand_mat(&mut r, 3, 4));
        let err = mha.forward(&mut ctx, q, kv, &Rc::new(vec![false; 3])).unwrap_err();
        assert!(err.to_string().contains("masked"), "{err}");
    }

    #[test]
    fn pooling_wrappers_match_loop_oracles_and_reject_empty_masks() {
        let store = ParamStore::new();
        let mut r = rng(6);
        let x_val = rand_mat(&mut r, 7, 4);
        let mask = Rc::new(vec![true, false, true, true, false, true, false]);
        let mut ctx = Ctx::eval(&store);
        let x = ctx.leaf(x_val.clone());
        let mean = masked_mean_pool(&mut ctx, x, &mask).unwrap();
        let maxp = seq_max_pool(&mut ctx, x, &mask).unwrap();
        let mean_val = ctx.tape.value(mean);
        let max_val = ctx.tape.value(maxp);
        let valid: Vec<usize> = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
        for c in 0..4 {
            let m: f64 = valid.iter().map(|&i| x_val[[i, c]]).sum::<f64>() / valid.len() as f64;
            let mx: f64 = valid.iter().map(|&i| x_val[[i, c]]).fold(f64::NEG_INFINITY, f64::max);
            assert!((mean_val[[0, c]] - m).abs() < 1e-7);
            assert_eq!(max_val[[0, c]], mx);
        }
        let empty = Rc::new(vec![false; 7]);
        assert!(masked_mean_pool(&mut ctx, x, &empty).is_err());
        assert!(seq_max_pool(&mut ctx, x, &empty).is_err());
    }

    #[test]
    fn bigru_zero_fills_padding_and_conv_gate_keeps_zero_rows_zero() {
        let mut store = ParamStore::new();
        let mut r = rng(7);
        let d = 6;
        let gru = BiGru::new(&mut store, &mut r, "gru", d, LrGroup::Rest).unwrap();
        let gate = ConvGate::new(&mut store, &mut r, "gate", d, LrGroup::Rest);
        let mut ctx = Ctx::eval(&store);
        let mut x_val = rand_mat(&mut r, 5, d);
        for c in 0..d {
            x_val[[3, c]] = 0.0;
            x_val[[4, c]] = 0.0;
        }
        let x = ctx.leaf(x_val);
        let states = gru.forward(&mut ctx, x, 3).unwrap();
        let gated = gate.forward(&mut ctx, states);
        let sv = ctx.tape.value(states);
        assert_eq!(sv.dim(), (5, d));
        assert!(sv.row(3).iter().all(|&v| v == 0.0));
        assert!(sv.row(4).iter().all(|&v| v == 0.0));
        let gv = ctx.tape.value(gated);
        assert!(gv.row(3).iter().all(|&v| v == 0.0));
        assert!(gv.row(4).iter().all(|&v| v == 0.0));
        // Valid rows are state * sigmoid(conv), hence bounded by the state.
        for t in 0..3 {
            for c in 0..d {
                assert!(gv[[t, c]].abs() <= sv[[t, c]].abs() + 1e-12);
            }
        }
    }

    #[test]
    fn conv_gate_at_zero_params_halves_its_input() {
        let mut store = ParamStore::new();
        let mut r = rng(8);
        let d = 4;
        let gate = ConvGate::new(&mut store, &mut r, "gate", d, LrGroup::Rest);
        store.set_value(gate.w_prev, Array2::zeros((d, d)));
        store.set_value(gate.w_self, Array2::zeros((d, d)));
        store.set_value(gate.w_next, Array2::zeros((d, d)));
        let mut ctx = Ctx::eval(&store);
        let x_val = rand_mat(&mut r, 3, d);
        let x = ctx.leaf(x_val.clone());
        let out = gate.forward(&mut ctx, x);
        let out_val = ctx.tape.value(out);
        for (o, i) in out_val.iter().zip(x_val.iter()) {
            assert!((o - 0.5 * i).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_is_identity_in_eval_and_scales_in_train() {
        let mut store = ParamStore::new();
        let _ = store.add("dummy", array![[1.0]], LrGroup::Rest);
        let mut ctx = Ctx::eval(&store);
        let x = ctx.leaf(array![[2.0, 4.0], [6.0, 8.0]]);
        let y = ctx.dropout(x);
        assert_eq!(x, y);

        let mut ctx = Ctx::train(&store, 0.5, rng(9));
        let x = ctx.leaf(Array2::from_elem((50, 20), 1.0));
        let y = ctx.dropout(x);
        let y_val = ctx.tape.value(y);
        let kept: Vec<f64> = y_val.iter().cloned().filter(|&v| v != 0.0).collect();
        assert!(!kept.is_empty() && kept.len() < 1000);
        for v in kept {
            assert!((v - 2.0).abs() < 1e-12, "inverted scaling at rate 0.5 doubles survivors");
        }
    }

    #[test]
    fn param_store_rejects_duplicates_and_tracks_groups() {
        let mut store = ParamStore::new();
        let a = store.add("w1", array![[1.0]], LrGroup::Nonverbal);
        let b = store.add("w2", array![[2.0]], LrGroup::Rest);
        assert_eq!(store.entry(a).group, LrGroup::Nonverbal);
        assert_eq!(store.entry(b).group, LrGroup::Rest);
        assert_eq!(store.find("w2"), Some(b));
        assert_eq!(store.num_scalars(), 2);
        let dup = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            let mut s2 = ParamStore::new();
            s2.add("x", array![[1.0]], LrGroup::Rest);
            s2.add("x", array![[1.0]], LrGroup::Rest);
        }));
        assert!(dup.is_err());
    }
}
