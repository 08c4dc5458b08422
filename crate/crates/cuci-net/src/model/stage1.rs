//! Stage 1: context-utterance structure encoding. A shared text encoder
//! produces a text-anchored relation representation and a scalar relation
//! score; two architecture-identical acoustic/visual branch instances
//! (primary and structure-preserving) encode the nonverbal streams with
//! relation-guided dual-expert feed-forward layers.

use std::rc::Rc;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::data::{JointSequence, JointSequenceSet, Modality};
use crate::error::{Error, Result};
use crate::nn::{
    masked_mean_pool, AttentionConfig, Ctx, FeedForward, LayerNorm, Linear, LrGroup,
    MultiHeadAttention, ParamId, ParamStore, TransformerLayer,
};
use crate::tape::Var;

use super::{AblationFlags, ModelConfig};

/// Which branch instance a routing coefficient came from.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Branch {
    Primary,
    Structure,
}

/// One router activation: the coefficient, its pre-activation, and where in
/// the network it fired.
pub struct RhoTrace {
    pub branch: Branch,
    pub modality: Modality,
    pub layer: usize,
    pub rho: Var,
    pub preact: Var,
}

/// Learned role and separator embeddings added in input feature space.
pub struct StructureEmbeddings {
    /// Per modality: two rows (context role, utterance role) of width d_in.
    role: [ParamId; 3],
    /// Three rows for the text separator slots, in positional order.
    text_special: ParamId,
}

impl StructureEmbeddings {
    fn new(store: &mut ParamStore, config: &ModelConfig) -> Self {
        let dims = &config.input_dims;
        let role = [
            store.add("emb.role_t", Array2::zeros((2, dims.t)), LrGroup::Rest),
            store.add("emb.role_a", Array2::zeros((2, dims.a)), LrGroup::Nonverbal),
            store.add("emb.role_v", Array2::zeros((2, dims.v)), LrGroup::Nonverbal),
        ];
        let text_special =
            store.add("emb.text_special", Array2::zeros((3, dims.t)), LrGroup::Rest);
        StructureEmbeddings { role, text_special }
    }
}

/// Post-norm transformer layer whose feed-forward sublayer mixes two experts
/// under a relation-conditioned router.
pub struct DualExpertLayer {
    pub attn: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub expert_con: FeedForward,
    pub expert_dis: FeedForward,
    pub router: Linear,
    pub ln2: LayerNorm,
}

impl Clone for DualExpertLayer {
    fn clone(&self) -> Self {
        DualExpertLayer {
            attn: self.attn.clone(),
            ln1: self.ln1.clone(),
            expert_con: self.expert_con.clone(),
            expert_dis: self.expert_dis.clone(),
            router: Linear { w: self.router.w, b: self.router.b },
            ln2: self.ln2.clone(),
        }
    }
}

impl DualExpertLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        config: &ModelConfig,
        group: LrGroup,
    ) -> Self {
        let d = config.d;
        let cfg = AttentionConfig { d, num_heads: config.num_heads };
        let attn = MultiHeadAttention::new(store, rng, &format!("{name}.attn"), cfg, group);
        let ln1 = LayerNorm::new(store, &format!("{name}.ln1"), d, group);
        let expert_con =
            FeedForward::new(store, rng, &format!("{name}.e_con"), d, config.ffn_hidden, group);
        let expert_dis =
            FeedForward::new(store, rng, &format!("{name}.e_dis"), d, config.ffn_hidden, group);
        // The discrepancy expert starts as an exact copy of the consistency
        // expert; only training separates them.
        for (dst, src) in [
            (expert_dis.lin1.w, expert_con.lin1.w),
            (expert_dis.lin1.b.unwrap(), expert_con.lin1.b.unwrap()),
            (expert_dis.lin2.w, expert_con.lin2.w),
            (expert_dis.lin2.b.unwrap(), expert_con.lin2.b.unwrap()),
        ] {
            let v = store.value(src).clone();
            store.set_value(dst, v);
        }
        let router = Linear::new(store, rng, &format!("{name}.router"), 2 * d, 1, true, group);
        let ln2 = LayerNorm::new(store, &format!("{name}.ln2"), d, group);
        DualExpertLayer { attn, ln1, expert_con, expert_dis, router, ln2 }
    }

    /// Runs the layer. Returns the new states and, when routing is active,
    /// the `(rho, preact)` pair. `rho_override` substitutes a fixed
    /// coefficient for endpoint probes.
    pub fn forward(
        &self,
        ctx: &mut Ctx,
        x: Var,
        mask: &Rc<Vec<bool>>,
        rel_guide: Var,
        no_dual_expert: bool,
        rho_override: Option<f64>,
    ) -> Result<(Var, Option<(Var, Var)>)> {
        let att = self.attn.forward(ctx, x, x, mask)?;
        let att = ctx.dropout(att);
        let sum = ctx.tape.add(x, att);
        let x1 = self.ln1.forward(ctx, sum);

        if no_dual_expert {
            let f = self.expert_con.forward(ctx, x1);
            let f = ctx.dropout(f);
            let sum2 = ctx.tape.add(x1, f);
            return Ok((self.ln2.forward(ctx, sum2), None));
        }

        let summary = masked_mean_pool(ctx, x1, mask)?;
        let router_in = ctx.tape.hstack(&[summary, rel_guide]);
        let preact = self.router.forward(ctx, router_in);
        let rho = match rho_override {
            Some(v) => ctx.leaf(Array2::from_elem((1, 1), v)),
            None => ctx.tape.sigmoid(preact),
        };
        let f_con = self.expert_con.forward(ctx, x1);
        let f_dis = self.expert_dis.forward(ctx, x1);
        let weighted_con = ctx.tape.scalar_mul(rho, f_con);
        let neg_rho = ctx.tape.scale(rho, -1.0);
        let one_minus_rho = ctx.tape.add_scalar(neg_rho, 1.0);
        let weighted_dis = ctx.tape.scalar_mul(one_minus_rho, f_dis);
        let mix = ctx.tape.add(weighted_con, weighted_dis);
        let mix = ctx.dropout(mix);
        let sum2 = ctx.tape.add(x1, mix);
        Ok((self.ln2.forward(ctx, sum2), Some((rho, preact))))
    }
}

/// Relation-guided encoder for one nonverbal modality.
#[derive(Clone)]
pub struct NonverbalEncoder {
    proj: Linear,
    layers: Vec<DualExpertLayer>,
}

impl NonverbalEncoder {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        n_layers: usize,
        config: &ModelConfig,
    ) -> Self {
        let group = LrGroup::Nonverbal;
        let proj = Linear::new(store, rng, &format!("{name}.proj"), d_in, config.d, true, group);
        let layers = (0..n_layers)
            .map(|l| DualExpertLayer::new(store, rng, &format!("{name}.layer{l}"), config, group))
            .collect();
        NonverbalEncoder { proj, layers }
    }

    fn forward(
        &self,
        ctx: &mut Ctx,
        embedded: Var,
        mask: &Rc<Vec<bool>>,
        rel_guide: Var,
        branch: Branch,
        modality: Modality,
        flags: &AblationFlags,
        traces: &mut Vec<RhoTrace>,
    ) -> Result<Var> {
        let mut h = self.proj.forward(ctx, embedded);
        for (l, layer) in self.layers.iter().enumerate() {
            let (next, trace) =
                layer.forward(ctx, h, mask, rel_guide, flags.no_dual_expert, None)?;
            if let Some((rho, preact)) = trace {
                traces.push(RhoTrace { branch, modality, layer: l, rho, preact });
            }
            h = next;
        }
        Ok(h)
    }
}

/// Text encoder: input projection plus standard post-norm layers.
pub struct TextEncoder {
    proj: Linear,
    layers: Vec<TransformerLayer>,
}

impl TextEncoder {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, config: &ModelConfig) -> Self {
        let group = LrGroup::Rest;
        let cfg = AttentionConfig { d: config.d, num_heads: config.num_heads };
        let proj = Linear::new(store, rng, "s1.text.proj", config.input_dims.t, config.d, true, group);
        let layers = (0..config.n_text_layers)
            .map(|l| {
                TransformerLayer::new(
                    store,
                    rng,
                    &format!("s1.text.layer{l}"),
                    cfg,
                    config.ffn_hidden,
                    group,
                )
            })
            .collect();
        TextEncoder { proj, layers }
    }

    fn forward(&self, ctx: &mut Ctx, embedded: Var, mask: &Rc<Vec<bool>>) -> Result<Var> {
        let mut h = self.proj.forward(ctx, embedded);
        for layer in &self.layers {
            h = layer.forward(ctx, h, mask)?;
        }
        Ok(h)
    }
}

/// All stage-1 streams and relation telemetry for one sample.
pub struct Stage1Output {
    pub h_text: Var,
    pub h_audio_primary: Var,
    pub h_visual_primary: Var,
    pub h_audio_structure: Var,
    pub h_visual_structure: Var,
    /// Text-anchored relation representation, `1 x 3d`.
    pub relation: Var,
    /// Scalar relation prior score in (0, 1), `1 x 1`.
    pub relation_score: Var,
    pub rho_traces: Vec<RhoTrace>,
}

pub struct Stage1 {
    pub embeddings: StructureEmbeddings,
    pub text: TextEncoder,
    pub audio_primary: NonverbalEncoder,
    pub visual_primary: NonverbalEncoder,
    pub audio_structure: NonverbalEncoder,
    pub visual_structure: NonverbalEncoder,
    pub rel_proj_a: Linear,
    pub rel_proj_v: Linear,
    pub scorer: Linear,
}

impl Stage1 {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, config: &ModelConfig) -> Result<Self> {
        let embeddings = StructureEmbeddings::new(store, config);
        let text = TextEncoder::new(store, rng, config);
        let dims = &config.input_dims;

        // Both branch instances replay the same RNG stream, so they start
        // from identical values whether or not parameters are shared.
        let branch_rng = rng.clone();
        let audio_primary =
            NonverbalEncoder::new(store, rng, "s1.audio_p", dims.a, config.n_audio_layers, config);
        let visual_primary =
            NonverbalEncoder::new(store, rng, "s1.visual_p", dims.v, config.n_visual_layers, config);
        let (audio_structure, visual_structure) = if config.ablation.shared_branches {
            (audio_primary.clone(), visual_primary.clone())
        } else {
            let mut replay = branch_rng;
            let a = NonverbalEncoder::new(
                store,
                &mut replay,
                "s1.audio_s",
                dims.a,
                config.n_audio_layers,
                config,
            );
            let v = NonverbalEncoder::new(
                store,
                &mut replay,
                "s1.visual_s",
                dims.v,
                config.n_visual_layers,
                config,
            );
            (a, v)
        };

        let d = config.d;
        let rel_proj_a = Linear::new(store, rng, "s1.rel_proj_a", 3 * d, d, true, LrGroup::Rest);
        let rel_proj_v = Linear::new(store, rng, "s1.rel_proj_v", 3 * d, d, true, LrGroup::Rest);
        let scorer = Linear::new(store, rng, "s1.scorer", 3 * d, 1, true, LrGroup::Rest);
        Ok(Stage1 {
            embeddings,
            text,
            audio_primary,
            visual_primary,
            audio_structure,
            visual_structure,
            rel_proj_a,
            rel_proj_v,
            scorer,
        })
    }

    /// Input features plus role embeddings (and, for text, separator
    /// embeddings). Padding rows pass through untouched.
    pub fn embed(
        &self,
        ctx: &mut Ctx,
        joint: &JointSequence,
        modality: Modality,
        flags: &AblationFlags,
    ) -> Var {
        let rows = joint.features.nrows();
        let mut x = ctx.leaf(joint.features.clone());
        if !flags.no_role_embeddings {
            let mut selector = Array2::zeros((rows, 2));
            for i in 0..rows {
                if joint.validity[i] {
                    selector[[i, joint.partition[i] as usize]] = 1.0;
                }
            }
            let sel = ctx.leaf(selector);
            let role = ctx.p(self.embeddings.role[modality as usize]);
            let role_rows = ctx.tape.matmul(sel, role);
            x = ctx.tape.add(x, role_rows);
        }
        if modality == Modality::Text {
            let mut selector = Array2::zeros((rows, 3));
            let mut next_special = 0;
            for i in 0..rows {
                if joint.special[i] {
                    selector[[i, next_special]] = 1.0;
                    next_special += 1;
                }
            }
            let sel = ctx.leaf(selector);
            let special = ctx.p(self.embeddings.text_special);
            let special_rows = ctx.tape.matmul(sel, special);
            x = ctx.tape.add(x, special_rows);
        }
        x
    }

    /// Pools the encoded text stream into the relation representation
    /// `[h_c; h_u; h_c - h_u]` and its sigmoid prior score.
    pub fn relation(
        &self,
        ctx: &mut Ctx,
        h_text: Var,
        joint_text: &JointSequence,
        sample_id: &str,
    ) -> Result<(Var, Var)> {
        let ctx_mask = Rc::new(joint_text.context_token_mask());
        if !ctx_mask.iter().any(|&m| m) {
            return Err(Error::Data(format!(
                "relation: sample '{sample_id}' has no valid context tokens; \
                 substitute a pseudo-context first"
            )));
        }
        let utt_mask = Rc::new(joint_text.utterance_token_mask());
        let h_c = masked_mean_pool(ctx, h_text, &ctx_mask)?;
        let h_u = masked_mean_pool(ctx, h_text, &utt_mask)?;
        let diff = ctx.tape.sub(h_c, h_u);
        let relation = ctx.tape.hstack(&[h_c, h_u, diff]);
        let preact = self.scorer.forward(ctx, relation);
        let score = ctx.tape.sigmoid(preact);
        Ok((relation, score))
    }

    pub fn forward(
        &self,
        ctx: &mut Ctx,
        joint: &JointSequenceSet,
        masks: &[Rc<Vec<bool>>; 3],
        flags: &AblationFlags,
    ) -> Result<Stage1Output> {
        let emb_t = self.embed(ctx, joint.get(Modality::Text), Modality::Text, flags);
        let h_text = self.text.forward(ctx, emb_t, &masks[0])?;
        let (relation, relation_score) =
            self.relation(ctx, h_text, joint.get(Modality::Text), &joint.sample_id)?;
        let rel_a = self.rel_proj_a.forward(ctx, relation);
        let rel_v = self.rel_proj_v.forward(ctx, relation);

        let emb_a = self.embed(ctx, joint.get(Modality::Audio), Modality::Audio, flags);
        let emb_v = self.embed(ctx, joint.get(Modality::Visual), Modality::Visual, flags);

        let mut traces = Vec::new();
        if flags.shared_branches {
            // One encoding serves both streams; each router instance
            // contributes a single trace, labeled with the branch that
            // feeds cue construction.
            let h_a = self.audio_structure.forward(
                ctx,
                emb_a,
                &masks[1],
                rel_a,
                Branch::Structure,
                Modality::Audio,
                flags,
                &mut traces,
            )?;
            let h_v = self.visual_structure.forward(
                ctx,
                emb_v,
                &masks[2],
                rel_v,
                Branch::Structure,
                Modality::Visual,
                flags,
                &mut traces,
            )?;
            return Ok(Stage1Output {
                h_text,
                h_audio_primary: h_a,
                h_visual_primary: h_v,
                h_audio_structure: h_a,
                h_visual_structure: h_v,
                relation,
                relation_score,
                rho_traces: traces,
            });
        }

        let h_audio_primary = self.audio_primary.forward(
            ctx,
            emb_a,
            &masks[1],
            rel_a,
            Branch::Primary,
            Modality::Audio,
            flags,
            &mut traces,
        )?;
        let h_visual_primary = self.visual_primary.forward(
            ctx,
            emb_v,
            &masks[2],
            rel_v,
            Branch::Primary,
            Modality::Visual,
            flags,
            &mut traces,
        )?;
        let h_audio_structure = self.audio_structure.forward(
            ctx,
            emb_a,
            &masks[1],
            rel_a,
            Branch::Structure,
            Modality::Audio,
            flags,
            &mut traces,
        )?;
        let h_visual_structure = self.visual_structure.forward(
            ctx,
            emb_v,
            &masks[2],
            rel_v,
            Branch::Structure,
            Modality::Visual,
            flags,
            &mut traces,
        )?;
        Ok(Stage1Output {
            h_text,
            h_audio_primary,
            h_visual_primary,
            h_audio_structure,
            h_visual_structure,
            relation,
            relation_score,
            rho_traces: traces,
        })
    }
}

/// Routing regularizer: binary cross-entropy of every coefficient against
/// the stop-gradient relation score, plus a decayed pull toward 1/2.
///
/// The BCE term uses the numerically exact logit form
/// `softplus(a) - sg(s) * a` for `rho = sigmoid(a)`, so the score parameters
/// receive no gradient through this loss.
pub fn gate_loss(ctx: &mut Ctx, traces: &[RhoTrace], relation_score: Var, lambda_bias: f64) -> Var {
    let target = ctx.tape.stop_gradient(relation_score);
    gate_loss_against(ctx, traces, target, lambda_bias)
}

/// [`gate_loss`] with an explicit target node. Finite-difference sweeps pass
/// a constant leaf here: gradients of the frozen-target loss coincide with
/// the stop-gradient loss's gradients at the freezing point.
pub fn gate_loss_against(
    ctx: &mut Ctx,
    traces: &[RhoTrace],
    target: Var,
    lambda_bias: f64,
) -> Var {
    if traces.is_empty() {
        return ctx.tape.zeros(1, 1);
    }
    let mut bce_sum: Option<Var> = None;
    let mut bias_sum: Option<Var> = None;
    for trace in traces {
        let sp = ctx.tape.softplus(trace.preact);
        let ta = ctx.tape.mul(target, trace.preact);
        let term = ctx.tape.sub(sp, ta);
        bce_sum = Some(match bce_sum {
            Some(acc) => ctx.tape.add(acc, term),
            None => term,
        });
        let centered = ctx.tape.add_scalar(trace.rho, -0.5);
        let sq = ctx.tape.mul(centered, centered);
        bias_sum = Some(match bias_sum {
            Some(acc) => ctx.tape.add(acc, sq),
            None => sq,
        });
    }
    let bce = bce_sum.unwrap();
    let bias = ctx.tape.scale(bias_sum.unwrap(), lambda_bias);
    ctx.tape.add(bce, bias)
}
