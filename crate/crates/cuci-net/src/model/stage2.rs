//! Stage 2: interpretation-cue construction. Each structure-preserving
//! stream is refined by a gated sequence encoder and fused into a local
//! summary; pairwise summaries plus a context-query global readout form the
//! interpretation cue `u_f`.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use crate::data::{JointSequenceSet, Modality};
use crate::error::{Error, Result};
use crate::nn::{
    masked_mean_pool, seq_max_pool, AttentionConfig, BiGru, ConvGate, Ctx, LayerNorm, Linear,
    LrGroup, MultiHeadAttention, ParamStore,
};
use crate::tape::Var;

use super::{AblationFlags, ModelConfig, Pair};

/// BiGRU over the valid prefix followed by a convolutional sigmoid gate on
/// its states. Padding rows stay exactly zero.
pub struct GateEnc {
    gru: BiGru,
    conv: ConvGate,
}

impl GateEnc {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize) -> Result<Self> {
        Ok(GateEnc {
            gru: BiGru::new(store, rng, &format!("{name}.gru"), d, LrGroup::Rest)?,
            conv: ConvGate::new(store, rng, &format!("{name}.conv"), d, LrGroup::Rest),
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, h: Var, n_valid: usize) -> Result<Var> {
        let states = self.gru.forward(ctx, h, n_valid)?;
        Ok(self.conv.forward(ctx, states))
    }
}

/// Sigmoid-gated fusion of a stream with its refined states, then a
/// projection and max pool over valid positions.
pub struct FusePool {
    pub w_g: Linear,
    pub w_p: Linear,
}

impl FusePool {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize) -> Self {
        FusePool {
            w_g: Linear::new(store, rng, &format!("{name}.w_g"), 2 * d, d, true, LrGroup::Rest),
            w_p: Linear::new(store, rng, &format!("{name}.w_p"), d, d, true, LrGroup::Rest),
        }
    }

    pub fn forward(
        &self,
        ctx: &mut Ctx,
        h: Var,
        refined: Var,
        mask: &Rc<Vec<bool>>,
    ) -> Result<Var> {
        let cat = ctx.tape.hstack(&[h, refined]);
        let gate_pre = self.w_g.forward(ctx, cat);
        let g = ctx.tape.sigmoid(gate_pre);
        let picked_refined = ctx.tape.mul(g, refined);
        let neg_g = ctx.tape.scale(g, -1.0);
        let inv_g = ctx.tape.add_scalar(neg_g, 1.0);
        let picked_h = ctx.tape.mul(inv_g, h);
        let mixed = ctx.tape.add(picked_refined, picked_h);
        let fused = self.w_p.forward(ctx, mixed);
        seq_max_pool(ctx, fused, mask)
    }
}

/// Everything stage 2 exposes about one sample's cue.
pub struct CueOutput {
    /// The interpretation cue `[p_ta; p_tv; p_av; g_f]`, `1 x 7d`.
    pub u_f: Var,
    pub p_ta: Var,
    pub p_tv: Var,
    pub p_av: Var,
    /// Fused global readout, `1 x d`.
    pub g_f: Var,
    /// Local per-modality summaries in shared space, when computed.
    pub z_hat: Option<[Var; 3]>,
    /// Context-pooled global query, when computed.
    pub q_hat: Option<Var>,
}

pub struct CueConstructor {
    gate_enc: [GateEnc; 3],
    fuse: [FusePool; 3],
    /// Shared-space projections, one per modality.
    proj: [Linear; 3],
    ln_ta: LayerNorm,
    ln_tv: LayerNorm,
    ln_av: LayerNorm,
    w_q: Linear,
    /// One readout attention serves all three modalities.
    pub readout: MultiHeadAttention,
    w_o: Linear,
    d: usize,
}

impl CueConstructor {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, config: &ModelConfig) -> Result<Self> {
        let d = config.d;
        let group = LrGroup::Rest;
        let gate_enc = [
            GateEnc::new(store, rng, "s2.gate_t", d)?,
            GateEnc::new(store, rng, "s2.gate_a", d)?,
            GateEnc::new(store, rng, "s2.gate_v", d)?,
        ];
        let fuse = [
            FusePool::new(store, rng, "s2.fuse_t", d),
            FusePool::new(store, rng, "s2.fuse_a", d),
            FusePool::new(store, rng, "s2.fuse_v", d),
        ];
        let proj = [
            Linear::new(store, rng, "s2.proj_t", d, d, true, group),
            Linear::new(store, rng, "s2.proj_a", d, d, true, group),
            Linear::new(store, rng, "s2.proj_v", d, d, true, group),
        ];
        let ln_ta = LayerNorm::new(store, "s2.pair_ta.ln", d, group);
        let ln_tv = LayerNorm::new(store, "s2.pair_tv.ln", d, group);
        let ln_av = LayerNorm::new(store, "s2.pair_av.ln", d, group);
        let w_q = Linear::new(store, rng, "s2.w_q", d, d, true, group);
        let readout = MultiHeadAttention::new(
            store,
            rng,
            "s2.readout",
            AttentionConfig { d, num_heads: config.num_heads },
            group,
        );
        let w_o = Linear::new(store, rng, "s2.w_o", 3 * d, d, true, group);
        Ok(CueConstructor { gate_enc, fuse, proj, ln_ta, ln_tv, ln_av, w_q, readout, w_o, d })
    }

    /// The gated sequence encoder for one modality.
    pub fn gate_encoder(&self, modality: Modality) -> &GateEnc {
        &self.gate_enc[modality as usize]
    }

    /// Local summary of one stream in the shared cue space.
    pub fn local_summary(
        &self,
        ctx: &mut Ctx,
        modality: Modality,
        h: Var,
        n_valid: usize,
        mask: &Rc<Vec<bool>>,
    ) -> Result<Var> {
        let m = modality as usize;
        let refined = self.gate_enc[m].forward(ctx, h, n_valid)?;
        let z = self.fuse[m].forward(ctx, h, refined, mask)?;
        Ok(self.proj[m].forward(ctx, z))
    }

    /// Stacks two summaries, normalizes each d-length slot independently,
    /// and flattens row-major: slot order is preserved in the output.
    pub fn pair_cue(&self, ctx: &mut Ctx, ln: &LayerNorm, first: Var, second: Var) -> Var {
        let stacked = ctx.tape.vstack(&[first, second]);
        let normed = ln.forward(ctx, stacked);
        ctx.tape.reshape(normed, 1, 2 * self.d)
    }

    /// Attention readout of one stream's utterance block under the global
    /// context query.
    pub fn global_readout(
        &self,
        ctx: &mut Ctx,
        q_hat: Var,
        h: Var,
        utterance_mask: &Rc<Vec<bool>>,
    ) -> Result<Var> {
        self.readout.forward(ctx, q_hat, h, utterance_mask)
    }

    /// Builds the cue from the three structure-preserving streams
    /// (text, audio, visual order).
    pub fn forward(
        &self,
        ctx: &mut Ctx,
        streams: [Var; 3],
        joint: &JointSequenceSet,
        masks: &[Rc<Vec<bool>>; 3],
        flags: &AblationFlags,
    ) -> Result<CueOutput> {
        let d = self.d;
        let (mut p_ta, mut p_tv, mut p_av) = (None, None, None);
        let mut z_hat_out = None;
        if !flags.no_local_cue {
            let mut z_hat = Vec::with_capacity(3);
            for &m in &Modality::ALL {
                let i = m as usize;
                let n_valid = joint.get(m).seq_len;
                z_hat.push(self.local_summary(ctx, m, streams[i], n_valid, &masks[i])?);
            }
            if flags.drop_pair != Some(Pair::TextAudio) {
                p_ta = Some(self.pair_cue(ctx, &self.ln_ta, z_hat[0], z_hat[1]));
            }
            if flags.drop_pair != Some(Pair::TextVisual) {
                p_tv = Some(self.pair_cue(ctx, &self.ln_tv, z_hat[0], z_hat[2]));
            }
            if flags.drop_pair != Some(Pair::AudioVisual) {
                p_av = Some(self.pair_cue(ctx, &self.ln_av, z_hat[1], z_hat[2]));
            }
            z_hat_out = Some([z_hat[0], z_hat[1], z_hat[2]]);
        }
        let p_ta = p_ta.unwrap_or_else(|| ctx.tape.zeros(1, 2 * d));
        let p_tv = p_tv.unwrap_or_else(|| ctx.tape.zeros(1, 2 * d));
        let p_av = p_av.unwrap_or_else(|| ctx.tape.zeros(1, 2 * d));

        let (g_f, q_hat) = if flags.no_global_cue {
            (ctx.tape.zeros(1, d), None)
        } else {
            let text = joint.get(Modality::Text);
            let ctx_mask = Rc::new(text.context_token_mask());
            if !ctx_mask.iter().any(|&m| m) {
                return Err(Error::Data(format!(
                    "cue: sample '{}' has no valid context tokens; \
                     substitute a pseudo-context first",
                    joint.sample_id
                )));
            }
            let pooled = masked_mean_pool(ctx, streams[0], &ctx_mask)?;
            let q_hat = self.w_q.forward(ctx, pooled);
            let mut readouts = Vec::with_capacity(3);
            for &m in &Modality::ALL {
                let utt_mask = Rc::new(joint.get(m).utterance_token_mask());
                readouts.push(self.global_readout(ctx, q_hat, streams[m as usize], &utt_mask)?);
            }
            let cat = ctx.tape.hstack(&readouts);
            (self.w_o.forward(ctx, cat), Some(q_hat))
        };

        let u_f = ctx.tape.hstack(&[p_ta, p_tv, p_av, g_f]);
        Ok(CueOutput { u_f, p_ta, p_tv, p_av, g_f, z_hat: z_hat_out, q_hat })
    }
}
