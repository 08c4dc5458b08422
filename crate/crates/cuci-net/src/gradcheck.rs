//! Finite-difference verification of the analytic gradients, block by block
//! and through the whole network.
//!
//! Central differences with eps = 1e-5; relative error is
//! `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`. Comparisons
//! where both sides sit below the cancellation-noise floor are skipped:
//! differencing an O(1) loss at this eps carries ~1e-10 of rounding noise,
//! so magnitudes under the floor are indistinguishable from zero.
//!
//! The routing regularizer's target is stop-gradient detached, which makes
//! naive differencing of the true loss invalid for any parameter upstream of
//! the relation score: the difference quotient sees the loss move through
//! the detached target. The full-network sweep therefore freezes the target
//! at its baseline value; gradients of the frozen-target loss equal the true
//! loss's gradients at that point. The relation scorer itself stays excluded
//! (its gradient is zero by design and asserted exactly elsewhere).

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{generate_synthetic, SyntheticConfig};
use crate::error::{Error, Result};
use crate::model::{prepare_joint, CuciNet, ModelConfig};
use crate::nn::{Ctx, LrGroup, ParamStore};
use crate::tape::Var;

const FD_EPS: f64 = 1e-5;
/// Both-sides-below means "numerically zero": ~1000x the difference noise.
const NOISE_FLOOR: f64 = 1e-7;
pub const UNIT_TOL: f64 = 1e-4;
pub const FULL_TOL: f64 = 1e-3;

/// Outcome of one sweep.
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    /// Scalars swept.
    pub checked_scalars: usize,
    /// Scalars whose gradient rose above the noise floor.
    pub live_scalars: usize,
}

impl CheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// A loss builder: constructs the scalar loss and returns it along with the
/// tape leaves of any extra non-parameter inputs that should be swept.
type Build<'a> = dyn Fn(&mut Ctx, &[Array2<f64>]) -> Result<(Var, Vec<Var>)> + 'a;

fn eval_loss(store: &ParamStore, inputs: &[Array2<f64>], build: &Build) -> Result<f64> {
    let mut ctx = Ctx::eval(store);
    let (loss, _) = build(&mut ctx, inputs)?;
    Ok(ctx.tape.value(loss)[[0, 0]])
}

/// Sweeps every scalar of every accepted parameter and every input,
/// comparing analytic gradients against central differences. Returns the
/// worst relative error seen.
pub fn check(
    name: &str,
    store: &mut ParamStore,
    inputs: &mut [Array2<f64>],
    param_filter: &dyn Fn(&str) -> bool,
    build: &Build,
) -> Result<CheckReport> {
    let (param_grads, input_grads) = {
        let mut ctx = Ctx::eval(store);
        let (loss, input_vars) = build(&mut ctx, inputs)?;
        let grads = ctx.tape.backward(loss);
        let mut param_grads = Vec::new();
        for (id, entry) in store.iter() {
            if !param_filter(&entry.name) {
                continue;
            }
            let g = match ctx.param_grad(&grads, id) {
                Some(g) => g.clone(),
                None => Array2::zeros(entry.value.dim()),
            };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "gradcheck: non-finite gradient for parameter '{}'",
                    entry.name
                )));
            }
            param_grads.push((id, entry.name.clone(), g));
        }
        let input_grads: Vec<Array2<f64>> = input_vars
            .iter()
            .zip(inputs.iter())
            .map(|(v, arr)| grads.get(*v).cloned().unwrap_or_else(|| Array2::zeros(arr.dim())))
            .collect();
        for (k, g) in input_grads.iter().enumerate() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "gradcheck: non-finite gradient for input {k}"
                )));
            }
        }
        (param_grads, input_grads)
    };

    let mut max_err: f64 = 0.0;
    let mut checked = 0;
    let mut live = 0;
    for (id, pname, analytic) in &param_grads {
        let dim = analytic.dim();
        for r in 0..dim.0 {
            for c in 0..dim.1 {
                let orig = store.value(*id)[[r, c]];
                let mut bumped = store.value(*id).clone();
                bumped[[r, c]] = orig + FD_EPS;
                store.set_value(*id, bumped);
                let plus = eval_loss(store, inputs, build)?;
                let mut bumped = store.value(*id).clone();
                bumped[[r, c]] = orig - FD_EPS;
                store.set_value(*id, bumped);
                let minus = eval_loss(store, inputs, build)?;
                let mut restored = store.value(*id).clone();
                restored[[r, c]] = orig;
                store.set_value(*id, restored);

                let numeric = (plus - minus) / (2.0 * FD_EPS);
                checked += 1;
                if analytic[[r, c]].abs() < NOISE_FLOOR && numeric.abs() < NOISE_FLOOR {
                    continue;
                }
                live += 1;
                let err = relative_error(analytic[[r, c]], numeric);
                if err > max_err {
                    max_err = err;
                    if err >= FULL_TOL {
                        eprintln!(
                            "gradcheck[{name}]: {pname}[{r},{c}] analytic {:.6e} numeric {:.6e}",
                            analytic[[r, c]],
                            numeric
                        );
                    }
                }
            }
        }
    }
    for (k, analytic) in input_grads.iter().enumerate() {
        let dim = analytic.dim();
        for r in 0..dim.0 {
            for c in 0..dim.1 {
                let orig = inputs[k][[r, c]];
                inputs[k][[r, c]] = orig + FD_EPS;
                let plus = eval_loss(store, inputs, build)?;
                inputs[k][[r, c]] = orig - FD_EPS;
                let minus = eval_loss(store, inputs, build)?;
                inputs[k][[r, c]] = orig;
                let numeric = (plus - minus) / (2.0 * FD_EPS);
                checked += 1;
                if analytic[[r, c]].abs() < NOISE_FLOOR && numeric.abs() < NOISE_FLOOR {
                    continue;
                }
                live += 1;
                max_err = max_err.max(relative_error(analytic[[r, c]], numeric));
            }
        }
    }
    Ok(CheckReport {
        name: name.to_string(),
        max_rel_err: max_err,
        checked_scalars: checked,
        live_scalars: live,
    })
}

fn rand_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-0.9..0.9))
}

/// Probe-weighted scalar loss. A plain sum is blind behind LayerNorm —
/// standardized rows sum to a constant at gamma = 1 — so every block loss
/// weights the output by a fixed random matrix before reducing.
fn probe_loss(ctx: &mut Ctx, out: Var, probe: &Array2<f64>) -> Var {
    let p = ctx.leaf(probe.clone());
    let weighted = ctx.tape.mul(out, p);
    ctx.tape.sum_all(weighted)
}

fn micro_config() -> ModelConfig {
    ModelConfig {
        d: 8,
        num_heads: 2,
        ffn_hidden: 12,
        n_text_layers: 1,
        n_audio_layers: 1,
        n_visual_layers: 1,
        interaction_depth: 1,
        input_dims: crate::data::ModalityDims { t: 6, a: 5, v: 5 },
        num_classes: 2,
        max_len: 8,
        dropout: 0.0,
        ablation: Default::default(),
    }
}

/// Unit-level sweeps: each architectural block in isolation at micro dims.
pub fn run_unit_checks() -> Result<Vec<CheckReport>> {
    use crate::nn::{
        AttentionConfig, FeedForward, LayerNorm, Linear, MultiHeadAttention, TransformerLayer,
    };
    use std::rc::Rc;

    let mut reports = Vec::new();
    let d = 8;
    let cfg = AttentionConfig { d, num_heads: 2 };
    let rows = 5;
    let mask: Rc<Vec<bool>> = Rc::new(vec![true, true, true, true, false]);

    // Attention block.
    {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let mha = MultiHeadAttention::new(&mut store, &mut rng, "attn", cfg, LrGroup::Rest);
        let mut inputs = vec![rand_mat(&mut rng, rows, d)];
        let probe = rand_mat(&mut rng, rows, d);
        let mask_c = mask.clone();
        reports.push(check(
            "attention",
            &mut store,
            &mut inputs,
            &|_| true,
            &move |ctx, ins| {
                let x = ctx.leaf(ins[0].clone());
                let out = mha.forward(ctx, x, x, &mask_c)?;
                Ok((probe_loss(ctx, out, &probe), vec![x]))
            },
        )?);
    }

    // Transformer layer (attention + FFN under post-norm residuals).
    {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(102);
        let layer = TransformerLayer::new(&mut store, &mut rng, "layer", cfg, 12, LrGroup::Rest);
        let mut inputs = vec![rand_mat(&mut rng, rows, d)];
        let probe = rand_mat(&mut rng, rows, d);
        let mask_c = mask.clone();
        reports.push(check(
            "transformer_layer",
            &mut store,
            &mut inputs,
            &|_| true,
            &move |ctx, ins| {
                let x = ctx.leaf(ins[0].clone());
                let out = layer.forward(ctx, x, &mask_c)?;
                Ok((probe_loss(ctx, out, &probe), vec![x]))
            },
        )?);
    }

    // Gated sequence encoder.
    {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(103);
        let config = micro_config();
        let cue = crate::model::stage2::CueConstructor::new(&mut store, &mut rng, &config)?;
        let mut inputs = vec![rand_mat(&mut rng, rows, d)];
        let probe = rand_mat(&mut rng, rows, d);
        let n_valid = 4;
        let cue = Rc::new(cue);
        let cue_c = cue.clone();
        reports.push(check(
            "gate_enc",
            &mut store,
            &mut inputs,
            &|name| name.starts_with("s2.gate_a."),
            &move |ctx, ins| {
                let x = ctx.leaf(ins[0].clone());
                let out = cue_c.gate_encoder(crate::data::Modality::Audio).forward(
                    ctx,
                    x,
                    n_valid,
                )?;
                Ok((probe_loss(ctx, out, &probe), vec![x]))
            },
        )?);

        // Fused local summary (gate encoder + sigmoid fusion + max pool).
        let mut rng2 = ChaCha8Rng::seed_from_u64(104);
        let mut inputs = vec![rand_mat(&mut rng2, rows, d)];
        let probe = rand_mat(&mut rng2, 1, d);
        let mask_c = mask.clone();
        let cue_c = cue.clone();
        reports.push(check(
            "fuse_pool",
            &mut store,
            &mut inputs,
            &|name| name.starts_with("s2.fuse_a.") || name.starts_with("s2.proj_a."),
            &move |ctx, ins| {
                let x = ctx.leaf(ins[0].clone());
                let z = cue_c.local_summary(ctx, crate::data::Modality::Audio, x, 4, &mask_c)?;
                Ok((probe_loss(ctx, z, &probe), vec![x]))
            },
        )?);
    }

    // Dual-expert layer with live routing; experts are separated first so
    // the router path carries gradient.
    {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(105);
        let config = micro_config();
        let layer = crate::model::stage1::DualExpertLayer::new(
            &mut store,
            &mut rng,
            "dual",
            &config,
            LrGroup::Nonverbal,
        );
        for pid in [
            layer.expert_dis.lin1.w,
            layer.expert_dis.lin1.b.unwrap(),
            layer.expert_dis.lin2.w,
            layer.expert_dis.lin2.b.unwrap(),
        ] {
            let dim = store.value(pid).dim();
            store.set_value(pid, rand_mat(&mut rng, dim.0, dim.1));
        }
        let mut inputs = vec![rand_mat(&mut rng, rows, d), rand_mat(&mut rng, 1, d)];
        let probe = rand_mat(&mut rng, rows, d);
        let mask_c = mask.clone();
        let layer = Rc::new(layer);
        for (report_name, filter) in [
            ("dual_expert_ffn", (|name: &str| !name.contains("router")) as fn(&str) -> bool),
            ("router", |name: &str| name.contains("router")),
        ] {
            let layer_c = layer.clone();
            let mask_cc = mask_c.clone();
            let probe_c = probe.clone();
            reports.push(check(
                report_name,
                &mut store,
                &mut inputs,
                &filter,
                &move |ctx, ins| {
                    let x = ctx.leaf(ins[0].clone());
                    let rel = ctx.leaf(ins[1].clone());
                    let (out, _) = layer_c.forward(ctx, x, &mask_cc, rel, false, None)?;
                    Ok((probe_loss(ctx, out, &probe_c), vec![x, rel]))
                },
            )?);
        }
    }

    // Guided update, refinement, gated integration.
    {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(106);
        let layer = crate::model::stage3::InteractionLayer::new(&mut store, &mut rng, "ia", cfg);
        let layer = Rc::new(layer);
        let mut inputs = vec![rand_mat(&mut rng, rows, d), rand_mat(&mut rng, 1, d)];
        let probe = rand_mat(&mut rng, rows, d);
        let mask_c = mask.clone();
        let layer_c = layer.clone();
        reports.push(check(
            "guided_update",
            &mut store,
            &mut inputs,
            &|name| name.contains(".phi."),
            &move |ctx, ins| {
                let h = ctx.leaf(ins[0].clone());
                let g = ctx.leaf(ins[1].clone());
                let out = layer_c.phi.forward(ctx, h, g, &mask_c)?;
                Ok((probe_loss(ctx, out, &probe), vec![h, g]))
            },
        )?);

        let mut inputs = vec![rand_mat(&mut rng, rows, d)];
        let probe = rand_mat(&mut rng, rows, d);
        let mask_c = mask.clone();
        let layer_c = layer.clone();
        reports.push(check(
            "refinement",
            &mut store,
            &mut inputs,
            &|name| name.contains(".psi."),
            &move |ctx, ins| {
                let c = ctx.leaf(ins[0].clone());
                let out = layer_c.psi.forward(ctx, c, &mask_c)?;
                Ok((probe_loss(ctx, out, &probe), vec![c]))
            },
        )?);

        let mut inputs = vec![rand_mat(&mut rng, rows, d), rand_mat(&mut rng, rows, d)];
        let probe = rand_mat(&mut rng, rows, d);
        let layer_c = layer.clone();
        reports.push(check(
            "gated_integration",
            &mut store,
            &mut inputs,
            &|name| name.contains(".gate."),
            &move |ctx, ins| {
                let r1 = ctx.leaf(ins[0].clone());
                let r2 = ctx.leaf(ins[1].clone());
                let (c, _) = layer_c.gate.forward(ctx, r1, r2);
                Ok((probe_loss(ctx, c, &probe), vec![r1, r2]))
            },
        )?);
    }

    // Adaptive aggregation and classifier, through the cross-entropy.
    {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(107);
        let config = micro_config();
        let agg = Rc::new(crate::model::stage3::Aggregator::new(&mut store, &mut rng, &config));
        let mut inputs = vec![
            rand_mat(&mut rng, rows, d),
            rand_mat(&mut rng, rows, d),
            rand_mat(&mut rng, rows, d),
        ];
        let mask_c = mask.clone();
        for (report_name, filter) in [
            ("aggregation", (|name: &str| name.contains(".score_")) as fn(&str) -> bool),
            ("classifier", |name: &str| name.contains("classifier")),
        ] {
            let agg_c = agg.clone();
            let masks = [mask_c.clone(), mask_c.clone(), mask_c.clone()];
            reports.push(check(
                report_name,
                &mut store,
                &mut inputs,
                &filter,
                &move |ctx, ins| {
                    let streams =
                        [ctx.leaf(ins[0].clone()), ctx.leaf(ins[1].clone()), ctx.leaf(ins[2].clone())];
                    let (logits, _, _) = agg_c.forward(ctx, streams, &masks, false)?;
                    let loss = ctx.tape.cross_entropy(logits, 1);
                    Ok((loss, vec![streams[0], streams[1], streams[2]]))
                },
            )?);
        }
    }

    // Layer norm and feed-forward as standalone blocks.
    {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(108);
        let ln = LayerNorm::new(&mut store, "ln", d, LrGroup::Rest);
        let ffn = FeedForward::new(&mut store, &mut rng, "ffn", d, 12, LrGroup::Rest);
        let proj = Linear::new(&mut store, &mut rng, "proj", d, 3, true, LrGroup::Rest);
        let mut inputs = vec![rand_mat(&mut rng, rows, d)];
        let probe = rand_mat(&mut rng, rows, 3);
        reports.push(check(
            "norm_ffn_linear",
            &mut store,
            &mut inputs,
            &|_| true,
            &move |ctx, ins| {
                let x = ctx.leaf(ins[0].clone());
                let a = ln.forward(ctx, x);
                let b = ffn.forward(ctx, a);
                let c = proj.forward(ctx, b);
                Ok((probe_loss(ctx, c, &probe), vec![x]))
            },
        )?);
    }

    Ok(reports)
}

/// Full-network sweep: every parameter except the detached relation scorer,
/// through the complete three-stage forward and total loss.
pub fn run_full_check() -> Result<CheckReport> {
    let config = micro_config();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(301);
    let net = CuciNet::new(&mut store, &mut rng, &config)?;
    // Separate the duplicated experts so routing carries cross-entropy
    // gradient as well as the regularizer's.
    for (id, entry) in store
        .iter()
        .filter(|(_, e)| e.name.contains(".e_dis."))
        .map(|(id, e)| (id, e.value.dim()))
        .collect::<Vec<_>>()
    {
        store.set_value(id, rand_mat(&mut rng, entry.0, entry.1));
    }

    let data = generate_synthetic(
        &SyntheticConfig {
            n_train: 1,
            n_val: 1,
            n_test: 1,
            dims: config.input_dims.clone(),
            len_ctx: 2,
            len_utt: 2,
            snr: 4.0,
        },
        302,
    )?;
    let joint = prepare_joint(&data.samples[0], &config)?;

    // Baseline relation score: the frozen BCE target for all difference
    // quotients below.
    let baseline_target = {
        let mut ctx = Ctx::eval(&store);
        let out = net.forward(&mut ctx, &joint)?;
        ctx.tape.value(out.stage1.relation_score)[[0, 0]]
    };

    let net = std::rc::Rc::new(net);
    let net_c = net.clone();
    let joint = std::rc::Rc::new(joint);
    let joint_c = joint.clone();
    let mut inputs: Vec<Array2<f64>> = Vec::new();
    let (lambda_gate, lambda_bias) = (0.05, 0.5);
    check(
        "full_network",
        &mut store,
        &mut inputs,
        &|name| !name.starts_with("s1.scorer"),
        &move |ctx, _| {
            let label = joint_c.label;
            let out = net_c.forward(ctx, &joint_c)?;
            let ce = ctx.tape.cross_entropy(out.logits, label);
            let target = ctx.leaf(Array2::from_elem((1, 1), baseline_target));
            let gate = crate::model::stage1::gate_loss_against(
                ctx,
                &out.stage1.rho_traces,
                target,
                lambda_bias,
            );
            let weighted = ctx.tape.scale(gate, lambda_gate);
            let total = ctx.tape.add(ce, weighted);
            Ok((total, Vec::new()))
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_block_passes_the_unit_tolerance() {
        let reports = run_unit_checks().unwrap();
        assert!(reports.len() >= 10);
        for r in &reports {
            assert!(
                r.passes(UNIT_TOL),
                "{}: max rel err {:.3e} over {} scalars",
                r.name,
                r.max_rel_err,
                r.checked_scalars
            );
            assert!(r.live_scalars > 0, "{}: no gradient above the noise floor", r.name);
        }
    }

    #[test]
    fn the_full_network_passes_the_end_to_end_tolerance() {
        let report = run_full_check().unwrap();
        assert!(
            report.passes(FULL_TOL),
            "full network: max rel err {:.3e} over {} scalars",
            report.max_rel_err,
            report.checked_scalars
        );
    }
}
