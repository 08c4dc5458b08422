//! Stage 3: cue-guided multimodal interaction. The interpretation cue is
//! compressed into a guidance vector injected into every stream at every
//! layer; streams then exchange cross-modal responses, integrate them through
//! an elementwise gate, and refine the result, all under outer residuals.
//! A final adaptive aggregation weighs the three pooled streams for
//! classification.

use std::rc::Rc;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::data::Modality;
use crate::error::Result;
use crate::nn::{
    masked_mean_pool, AttentionConfig, Ctx, LayerNorm, Linear, LrGroup, MultiHeadAttention,
    ParamStore,
};
use crate::tape::Var;

use super::{AblationFlags, ModelConfig};

/// Guidance-conditioned update: cross-attention onto the single guidance
/// token, then masked self-attention, each residual + layer norm. The caller
/// adds the outer residual.
pub struct GuidedUpdate {
    pub cross: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub slf: MultiHeadAttention,
    pub ln2: LayerNorm,
}

impl GuidedUpdate {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: AttentionConfig,
    ) -> Self {
        let group = LrGroup::Rest;
        GuidedUpdate {
            cross: MultiHeadAttention::new(store, rng, &format!("{name}.cross"), cfg, group),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), cfg.d, group),
            slf: MultiHeadAttention::new(store, rng, &format!("{name}.self"), cfg, group),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), cfg.d, group),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, h: Var, guidance: Var, mask: &Rc<Vec<bool>>) -> Result<Var> {
        let single = Rc::new(vec![true]);
        let att = self.cross.forward(ctx, h, guidance, &single)?;
        let att = ctx.dropout(att);
        let sum = ctx.tape.add(h, att);
        let x1 = self.ln1.forward(ctx, sum);
        let att2 = self.slf.forward(ctx, x1, x1, mask)?;
        let att2 = ctx.dropout(att2);
        let sum2 = ctx.tape.add(x1, att2);
        Ok(self.ln2.forward(ctx, sum2))
    }
}

/// Elementwise sigmoid gate between two cross-modal responses; the output is
/// a convex combination, so it stays inside their elementwise envelope.
pub struct GatedIntegration {
    pub w1: Linear,
    pub w2: Linear,
}

impl GatedIntegration {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize) -> Self {
        let group = LrGroup::Rest;
        GatedIntegration {
            w1: Linear::new(store, rng, &format!("{name}.w1"), d, d, false, group),
            w2: Linear::new(store, rng, &format!("{name}.w2"), d, d, true, group),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, r1: Var, r2: Var) -> (Var, Var) {
        let pre1 = self.w1.forward(ctx, r1);
        let pre2 = self.w2.forward(ctx, r2);
        let pre = ctx.tape.add(pre1, pre2);
        let beta = ctx.tape.sigmoid(pre);
        let picked1 = ctx.tape.mul(beta, r1);
        let neg = ctx.tape.scale(beta, -1.0);
        let inv = ctx.tape.add_scalar(neg, 1.0);
        let picked2 = ctx.tape.mul(inv, r2);
        (ctx.tape.add(picked1, picked2), beta)
    }
}

/// Self-attentive refinement with a final output projection; the caller adds
/// the outer residual, so zeroing the projection makes this block inert.
pub struct Refinement {
    pub slf: MultiHeadAttention,
    pub ln: LayerNorm,
    pub out: Linear,
}

impl Refinement {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: AttentionConfig,
    ) -> Self {
        let group = LrGroup::Rest;
        Refinement {
            slf: MultiHeadAttention::new(store, rng, &format!("{name}.self"), cfg, group),
            ln: LayerNorm::new(store, &format!("{name}.ln"), cfg.d, group),
            out: Linear::new(store, rng, &format!("{name}.out"), cfg.d, cfg.d, true, group),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, c: Var, mask: &Rc<Vec<bool>>) -> Result<Var> {
        let att = self.slf.forward(ctx, c, c, mask)?;
        let att = ctx.dropout(att);
        let sum = ctx.tape.add(c, att);
        let x1 = self.ln.forward(ctx, sum);
        Ok(self.out.forward(ctx, x1))
    }
}

/// One modality's interaction sublayers at one depth.
pub struct InteractionLayer {
    pub phi: GuidedUpdate,
    /// Cross-attention onto the first partner in canonical order.
    pub cross_first: MultiHeadAttention,
    pub cross_second: MultiHeadAttention,
    pub gate: GatedIntegration,
    pub psi: Refinement,
}

impl InteractionLayer {
    pub(crate) fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: AttentionConfig,
    ) -> Self {
        let group = LrGroup::Rest;
        InteractionLayer {
            phi: GuidedUpdate::new(store, rng, &format!("{name}.phi"), cfg),
            cross_first: MultiHeadAttention::new(store, rng, &format!("{name}.x1"), cfg, group),
            cross_second: MultiHeadAttention::new(store, rng, &format!("{name}.x2"), cfg, group),
            gate: GatedIntegration::new(store, rng, &format!("{name}.gate"), cfg.d),
            psi: Refinement::new(store, rng, &format!("{name}.psi"), cfg),
        }
    }
}

/// Stream states around one interaction layer, for telemetry and structural
/// checks.
pub struct LayerIo {
    pub modality: Modality,
    pub layer: usize,
    pub h_in: Var,
    pub h_tilde: Var,
    pub h_out: Var,
}

/// The stacked interaction layers plus the guidance projection.
pub struct InteractionStack {
    /// Compresses the cue `u_f` into the `1 x d` guidance vector.
    pub guidance: Linear,
    layers: Vec<[InteractionLayer; 3]>,
}

impl InteractionStack {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, config: &ModelConfig) -> Self {
        let cfg = AttentionConfig { d: config.d, num_heads: config.num_heads };
        let guidance =
            Linear::new(store, rng, "s3.guidance", 7 * config.d, config.d, true, LrGroup::Rest);
        let layers = (0..config.interaction_depth)
            .map(|l| {
                [
                    InteractionLayer::new(store, rng, &format!("s3.layer{l}.t"), cfg),
                    InteractionLayer::new(store, rng, &format!("s3.layer{l}.a"), cfg),
                    InteractionLayer::new(store, rng, &format!("s3.layer{l}.v"), cfg),
                ]
            })
            .collect();
        InteractionStack { guidance, layers }
    }

    /// Runs the stack over the (text, audio, visual) streams.
    pub fn forward(
        &self,
        ctx: &mut Ctx,
        u_f: Var,
        streams: [Var; 3],
        masks: &[Rc<Vec<bool>>; 3],
        flags: &AblationFlags,
    ) -> Result<([Var; 3], Vec<LayerIo>)> {
        let mut telemetry = Vec::with_capacity(3 * self.layers.len());
        if self.layers.is_empty() {
            return Ok((streams, telemetry));
        }
        let guidance =
            if flags.no_guidance { None } else { Some(self.guidance.forward(ctx, u_f)) };

        let mut h = streams;
        for (l, layer) in self.layers.iter().enumerate() {
            // All three guided updates complete before any cross-modal
            // response reads a partner stream.
            let mut tilde = [h[0], h[1], h[2]];
            if let Some(g) = guidance {
                for m in 0..3 {
                    let phi = layer[m].phi.forward(ctx, h[m], g, &masks[m])?;
                    tilde[m] = ctx.tape.add(h[m], phi);
                }
            }
            let mut next = [tilde[0], tilde[1], tilde[2]];
            for m in 0..3 {
                let (p1, p2) = match m {
                    0 => (1, 2),
                    1 => (0, 2),
                    _ => (0, 1),
                };
                let r1 = layer[m].cross_first.forward(ctx, tilde[m], tilde[p1], &masks[p1])?;
                let r2 = layer[m].cross_second.forward(ctx, tilde[m], tilde[p2], &masks[p2])?;
                let (c, _beta) = layer[m].gate.forward(ctx, r1, r2);
                let refined = layer[m].psi.forward(ctx, c, &masks[m])?;
                next[m] = ctx.tape.add(tilde[m], refined);
                telemetry.push(LayerIo {
                    modality: Modality::ALL[m],
                    layer: l,
                    h_in: h[m],
                    h_tilde: tilde[m],
                    h_out: next[m],
                });
            }
            h = next;
        }
        Ok((h, telemetry))
    }
}

/// Adaptive aggregation over the pooled streams plus the classifier head.
pub struct Aggregator {
    pub scores: [Linear; 3],
    pub classifier: Linear,
}

impl Aggregator {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, config: &ModelConfig) -> Self {
        let d = config.d;
        let group = LrGroup::Rest;
        Aggregator {
            scores: [
                Linear::new(store, rng, "s3.agg.score_t", d, 1, true, group),
                Linear::new(store, rng, "s3.agg.score_a", d, 1, true, group),
                Linear::new(store, rng, "s3.agg.score_v", d, 1, true, group),
            ],
            classifier: Linear::new(
                store,
                rng,
                "s3.classifier",
                d,
                config.num_classes,
                true,
                group,
            ),
        }
    }

    /// Returns `(logits, fused representation, modality weights)`.
    pub fn forward(
        &self,
        ctx: &mut Ctx,
        streams: [Var; 3],
        masks: &[Rc<Vec<bool>>; 3],
        uniform: bool,
    ) -> Result<(Var, Var, Var)> {
        let mut pooled = Vec::with_capacity(3);
        for m in 0..3 {
            pooled.push(masked_mean_pool(ctx, streams[m], &masks[m])?);
        }
        let alpha = if uniform {
            ctx.leaf(Array2::from_elem((1, 3), 1.0 / 3.0))
        } else {
            let scores: Vec<Var> =
                (0..3).map(|m| self.scores[m].forward(ctx, pooled[m])).collect();
            let cat = ctx.tape.hstack(&scores);
            ctx.tape.softmax_rows(cat)
        };
        let mut fused: Option<Var> = None;
        for m in 0..3 {
            let w = ctx.tape.slice_cols(alpha, m, m + 1);
            let contrib = ctx.tape.scalar_mul(w, pooled[m]);
            fused = Some(match fused {
                Some(acc) => ctx.tape.add(acc, contrib),
                None => contrib,
            });
        }
        let fused = fused.unwrap();
        let dropped = ctx.dropout(fused);
        let logits = self.classifier.forward(ctx, dropped);
        Ok((logits, fused, alpha))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};
    use crate::model::{prepare_joint, CuciNet, ForwardOutput, ModelConfig};
    use crate::nn::xavier;
    use rand::{Rng, SeedableRng};

    fn build(
        mutate: impl FnOnce(&mut ModelConfig),
    ) -> (ModelConfig, ParamStore, CuciNet, crate::data::JointSequenceSet) {
        let mut config = ModelConfig::default();
        mutate(&mut config);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let net = CuciNet::new(&mut store, &mut rng, &config).unwrap();
        let data = generate_synthetic(
            &SyntheticConfig { n_train: 1, n_val: 1, n_test: 1, ..SyntheticConfig::default() },
            41,
        )
        .unwrap();
        let joint = prepare_joint(&data.samples[0], &config).unwrap();
        (config, store, net, joint)
    }

    fn run<'s>(
        store: &'s ParamStore,
        net: &CuciNet,
        joint: &crate::data::JointSequenceSet,
    ) -> (Ctx<'s>, ForwardOutput) {
        let mut ctx = Ctx::eval(store);
        let out = net.forward(&mut ctx, joint).unwrap();
        (ctx, out)
    }

    #[test]
    fn no_guidance_passes_inputs_through_the_update_untouched() {
        let (_, store, net, joint) =
            build(|c| c.ablation.no_guidance = true);
        let (_, out) = run(&store, &net, &joint);
        assert!(!out.layer_io.is_empty());
        for io in &out.layer_io {
            assert_eq!(io.h_in, io.h_tilde, "guided update must be skipped exactly");
        }
    }

    #[test]
    fn guidance_changes_the_updated_streams() {
        let (_, store, net, joint) = build(|_| {});
        let (_, out) = run(&store, &net, &joint);
        for io in &out.layer_io {
            assert_ne!(io.h_in, io.h_tilde);
        }
    }

    #[test]
    fn zeroed_refinement_projection_makes_layers_residual_only() {
        let (_, mut store, net, joint) = build(|_| {});
        for (id, entry) in net_out_projection_ids(&store) {
            let shape = entry;
            store.set_value(id, Array2::zeros(shape));
        }
        let (ctx, out) = run(&store, &net, &joint);
        for io in &out.layer_io {
            assert_eq!(
                ctx.tape.value(io.h_out),
                ctx.tape.value(io.h_tilde),
                "zeroed refinement output must leave the stream unchanged"
            );
        }
    }

    /// Ids and shapes of every refinement output projection parameter.
    fn net_out_projection_ids(store: &ParamStore) -> Vec<(crate::nn::ParamId, (usize, usize))> {
        store
            .iter()
            .filter(|(_, e)| e.name.contains(".psi.out."))
            .map(|(id, e)| (id, e.value.dim()))
            .collect()
    }

    #[test]
    fn gated_integration_stays_inside_the_elementwise_envelope() {
        let d = 6;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gate = GatedIntegration::new(&mut store, &mut rng, "g", d);
        let w = store.value(gate.w1.w).clone();
        store.set_value(gate.w1.w, w.mapv(|v| v * 3.0));
        let r1_val = xavier(&mut rng, 4, d).mapv(|v| v * 2.0);
        let r2_val = xavier(&mut rng, 4, d).mapv(|v| v * 2.0);
        let mut ctx = Ctx::eval(&store);
        let r1 = ctx.leaf(r1_val.clone());
        let r2 = ctx.leaf(r2_val.clone());
        let (c, beta) = gate.forward(&mut ctx, r1, r2);
        let c_val = ctx.tape.value(c);
        let beta_val = ctx.tape.value(beta);
        for i in 0..4 {
            for j in 0..d {
                let (lo, hi) = (r1_val[[i, j]].min(r2_val[[i, j]]), r1_val[[i, j]].max(r2_val[[i, j]]));
                assert!(c_val[[i, j]] >= lo - 1e-12 && c_val[[i, j]] <= hi + 1e-12);
                assert!(beta_val[[i, j]] > 0.0 && beta_val[[i, j]] < 1.0);
            }
        }
    }

    #[test]
    fn aggregation_weights_form_a_simplex_and_uniform_ablation_pins_them() {
        let (_, store, net, joint) = build(|_| {});
        let (ctx, out) = run(&store, &net, &joint);
        let alpha = ctx.tape.value(out.alpha);
        let sum: f64 = alpha.row(0).sum();
        assert!((sum - 1.0).abs() <= 1e-6);
        for &a in alpha.row(0) {
            assert!(a > 0.0 && a < 1.0);
        }

        let (_, store, net, joint) = build(|c| c.ablation.uniform_aggregation = true);
        let (ctx, out) = run(&store, &net, &joint);
        let alpha = ctx.tape.value(out.alpha);
        for &a in alpha.row(0) {
            assert_eq!(a, 1.0 / 3.0);
        }
    }

    #[test]
    fn zero_depth_classifies_the_encoder_streams_directly() {
        let (_, store, net, joint) = build(|c| c.interaction_depth = 0);
        let (ctx, out) = run(&store, &net, &joint);
        assert!(out.layer_io.is_empty());
        let logits = ctx.tape.value(out.logits);
        assert_eq!(logits.dim(), (1, 2));
        assert!(logits.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn guidance_reaches_the_prediction() {
        let (_, store, net, joint) = build(|_| {});
        let (ctx, out) = run(&store, &net, &joint);
        let with_guidance = ctx.tape.value(out.logits).clone();

        let (_, store2, net2, joint2) = build(|c| c.ablation.no_guidance = true);
        let (ctx2, out2) = run(&store2, &net2, &joint2);
        let without = ctx2.tape.value(out2.logits).clone();
        // Same seed, same data: the only difference is the guidance path.
        assert_ne!(with_guidance, without);
    }

    #[test]
    fn interaction_needs_partner_streams_with_valid_tokens() {
        // Degenerate masks cannot arise from well-formed joint sequences;
        // the attention layer is the backstop.
        let d = 8;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let cfg = AttentionConfig { d, num_heads: 2 };
        let layer = InteractionLayer::new(&mut store, &mut rng, "l", cfg);
        let mut ctx = Ctx::eval(&store);
        let h = ctx.leaf(Array2::from_shape_fn((3, d), |_| rng.gen_range(-1.0..1.0)));
        let partner = ctx.leaf(Array2::from_shape_fn((3, d), |_| rng.gen_range(-1.0..1.0)));
        let empty = Rc::new(vec![false; 3]);
        let err = layer.cross_first.forward(&mut ctx, h, partner, &empty);
        assert!(err.is_err());
    }
}
