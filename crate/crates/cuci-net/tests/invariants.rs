//! Algebraic invariants of the public building blocks, checked as
//! properties over randomized inputs: attention stochasticity and mask
//! soundness, simplex constraints, expert-mixing endpoints, regularizer
//! fixed points, scorer isolation, and branch independence.

use std::rc::Rc;

use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cuci_net::data::{generate_synthetic, Modality, SyntheticConfig};
use cuci_net::model::stage1::{gate_loss, Branch, DualExpertLayer, RhoTrace};
use cuci_net::model::{
    argmax_row, prepare_joint, sample_loss, AblationFlags, CuciNet, ModelConfig,
};
use cuci_net::nn::{AttentionConfig, Ctx, LrGroup, MultiHeadAttention, ParamStore};
use cuci_net::train::{cosine_lr, lambda_bias_at};

const D: usize = 8;

fn deterministic_matrix(seed: u64, rows: usize, cols: usize) -> Array2<f64> {
    // Cheap LCG keeps proptest shrinking deterministic without threading rngs.
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    Array2::from_shape_fn((rows, cols), |_| {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    })
}

fn attention_fixture(seed: u64) -> (ParamStore, MultiHeadAttention) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let attn = MultiHeadAttention::new(
        &mut store,
        &mut rng,
        "attn",
        AttentionConfig { d: D, num_heads: 2 },
        LrGroup::Rest,
    );
    (store, attn)
}

fn tiny_model(flags: AblationFlags) -> ModelConfig {
    ModelConfig {
        d: D,
        num_heads: 2,
        ffn_hidden: 12,
        n_text_layers: 1,
        n_audio_layers: 1,
        n_visual_layers: 1,
        interaction_depth: 1,
        input_dims: cuci_net::data::ModalityDims { t: 6, a: 5, v: 5 },
        num_classes: 2,
        max_len: 8,
        dropout: 0.0,
        ablation: flags,
    }
}

fn tiny_sample(seed: u64) -> cuci_net::data::ConversationalSample {
    let bundle = generate_synthetic(
        &SyntheticConfig {
            n_train: 1,
            n_val: 1,
            n_test: 1,
            dims: cuci_net::data::ModalityDims { t: 6, a: 5, v: 5 },
            len_ctx: 2,
            len_utt: 2,
            snr: 2.0,
        },
        seed,
    )
    .unwrap();
    bundle.samples[0].clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn attention_rows_are_stochastic_and_ignore_masked_positions(
        seed in 0u64..1000,
        len in 2usize..9,
        mask_bits in prop::collection::vec(prop::bool::ANY, 9),
    ) {
        let mut mask: Vec<bool> = mask_bits[..len].to_vec();
        mask[0] = true; // at least one live key
        let mask = Rc::new(mask);

        let (store, attn) = attention_fixture(seed);
        let x = deterministic_matrix(seed, len, D);

        let mut ctx = Ctx::eval(&store);
        let xv = ctx.leaf(x.clone());
        let (out, weights) = attn.forward_with_weights(&mut ctx, xv, xv, &mask).unwrap();

        for head in &weights {
            for r in 0..head.nrows() {
                let sum: f64 = head.row(r).sum();
                prop_assert!((sum - 1.0).abs() <= 1e-9, "row {r} sums to {sum}");
                for (c, &m) in mask.iter().enumerate() {
                    if !m {
                        prop_assert!(head[[r, c]].abs() <= 1e-12);
                    }
                }
            }
        }

        // Perturbing features at masked positions must not move any output.
        let mut x2 = x.clone();
        for (r, &m) in mask.iter().enumerate() {
            if !m {
                for c in 0..D {
                    x2[[r, c]] += 7.5;
                }
            }
        }
        let mut ctx2 = Ctx::eval(&store);
        let xv2 = ctx2.leaf(x2);
        let (out2, _) = attn.forward_with_weights(&mut ctx2, xv2, xv2, &mask).unwrap();
        let (a, b) = (ctx.tape.value(out), ctx2.tape.value(out2));
        for (r, &m) in mask.iter().enumerate() {
            if m {
                for c in 0..D {
                    prop_assert!((a[[r, c]] - b[[r, c]]).abs() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn masked_softmax_is_shift_invariant(
        seed in 0u64..1000,
        shift in -30.0f64..30.0,
        len in 2usize..8,
    ) {
        let store = ParamStore::new();
        let mut mask = vec![true; len];
        mask[len - 1] = false;
        let mask = Rc::new(mask);
        let x = deterministic_matrix(seed, 2, len);

        let mut ctx = Ctx::eval(&store);
        let a = ctx.leaf(x.clone());
        let sa = ctx.tape.softmax_rows_masked(a, mask.clone());
        let b = ctx.leaf(x + shift);
        let sb = ctx.tape.softmax_rows_masked(b, mask.clone());
        let (va, vb) = (ctx.tape.value(sa).clone(), ctx.tape.value(sb));
        for r in 0..2 {
            for c in 0..len {
                prop_assert!((va[[r, c]] - vb[[r, c]]).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn logit_shifts_never_move_the_argmax(
        seed in 0u64..1000,
        shift in -100.0f64..100.0,
    ) {
        let logits = deterministic_matrix(seed, 1, 5);
        let shifted = &logits + shift;
        prop_assert_eq!(argmax_row(&logits), argmax_row(&shifted));
    }

    #[test]
    fn schedules_hit_their_endpoints(base in 1e-6f64..1.0, t_total in 2usize..5000) {
        prop_assert_eq!(cosine_lr(base, 0, t_total), base);
        prop_assert_eq!(cosine_lr(base, t_total, t_total), 0.0);
        prop_assert_eq!(cosine_lr(base, t_total + 7, t_total), 0.0);
        let mut prev = f64::INFINITY;
        for t in 0..=t_total.min(64) {
            let lr = cosine_lr(base, t * t_total.max(64) / 64, t_total);
            prop_assert!(lr <= prev + 1e-15);
            prev = lr;
        }
        prop_assert_eq!(lambda_bias_at(base, 0, t_total as f64), base);
        prop_assert_eq!(lambda_bias_at(base, t_total, t_total as f64), 0.0);
        prop_assert_eq!(lambda_bias_at(base, t_total + 3, t_total as f64), 0.0);
    }
}

#[test]
fn aggregation_weights_lie_on_the_simplex() {
    let config = tiny_model(AblationFlags::default());
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let net = CuciNet::new(&mut store, &mut rng, &config).unwrap();

    for seed in 0..6 {
        let sample = tiny_sample(seed);
        let joint = prepare_joint(&sample, &config).unwrap();
        let mut ctx = Ctx::eval(&store);
        let out = net.forward(&mut ctx, &joint).unwrap();
        let alpha = ctx.tape.value(out.alpha);
        let sum: f64 = alpha.row(0).sum();
        assert!((sum - 1.0).abs() <= 1e-9, "alpha sums to {sum}");
        assert!(alpha.iter().all(|&a| a >= 0.0));
    }

    let uniform = tiny_model(AblationFlags { uniform_aggregation: true, ..Default::default() });
    let mut store_u = ParamStore::new();
    let mut rng_u = ChaCha8Rng::seed_from_u64(5);
    let net_u = CuciNet::new(&mut store_u, &mut rng_u, &uniform).unwrap();
    let joint = prepare_joint(&tiny_sample(0), &uniform).unwrap();
    let mut ctx = Ctx::eval(&store_u);
    let out = net_u.forward(&mut ctx, &joint).unwrap();
    let alpha = ctx.tape.value(out.alpha);
    for m in 0..3 {
        assert_eq!(alpha[[0, m]], 1.0 / 3.0);
    }
}

#[test]
fn expert_endpoints_coincide_at_init_and_use_disjoint_parameters() {
    let config = tiny_model(AblationFlags::default());
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let layer = DualExpertLayer::new(&mut store, &mut rng, "probe", &config, LrGroup::Rest);

    let x = deterministic_matrix(3, 4, D);
    let rel = deterministic_matrix(4, 1, D);
    let mask = Rc::new(vec![true, true, true, false]);

    let run = |store: &ParamStore, rho: f64| -> Array2<f64> {
        let mut ctx = Ctx::eval(store);
        let xv = ctx.leaf(x.clone());
        let rv = ctx.leaf(rel.clone());
        let (out, trace) = layer.forward(&mut ctx, xv, &mask, rv, false, Some(rho)).unwrap();
        assert!(trace.is_some());
        ctx.tape.value(out).clone()
    };

    // The discrepancy expert starts as an exact copy of the consistency
    // expert, so the two pure-expert paths agree at initialization.
    let at_one = run(&store, 1.0);
    let at_zero = run(&store, 0.0);
    assert_eq!(at_one, at_zero);

    // rho = 1 must not read the discrepancy expert; rho = 0 must.
    let dis_w = store.find("probe.e_dis.lin1.w").expect("expert parameter name");
    let mut bumped = store.value(dis_w).clone();
    bumped[[0, 0]] += 1.0;
    store.set_value(dis_w, bumped);

    assert_eq!(run(&store, 1.0), at_one);
    assert_ne!(run(&store, 0.0), at_zero);

    // Interior rho is a strict convex mixture: it moves when either expert moves.
    let mid = run(&store, 0.5);
    assert_ne!(mid, at_one);
}

#[test]
fn gate_loss_fixed_point_is_ln_two_per_router() {
    let store = ParamStore::new();
    let mut ctx = Ctx::eval(&store);

    let mk_trace = |ctx: &mut Ctx, layer: usize| {
        let preact = ctx.leaf(Array2::zeros((1, 1)));
        let rho = ctx.tape.sigmoid(preact);
        RhoTrace { branch: Branch::Primary, modality: Modality::Audio, layer, rho, preact }
    };

    let t0 = mk_trace(&mut ctx, 0);
    let score = ctx.leaf(Array2::from_elem((1, 1), 0.8));
    let one = gate_loss(&mut ctx, &[t0], score, 0.0);
    assert!((ctx.tape.scalar(one) - std::f64::consts::LN_2).abs() <= 1e-12);

    let t1 = mk_trace(&mut ctx, 0);
    let t2 = mk_trace(&mut ctx, 1);
    let two = gate_loss(&mut ctx, &[t1, t2], score, 0.0);
    assert!((ctx.tape.scalar(two) - 2.0 * std::f64::consts::LN_2).abs() <= 1e-12);

    // The bias term adds lambda * (rho - 1/2)^2 per router; at preact 0 the
    // coefficient sits exactly at 1/2, so the bias contributes nothing.
    let t3 = mk_trace(&mut ctx, 0);
    let biased = gate_loss(&mut ctx, &[t3], score, 123.0);
    assert!((ctx.tape.scalar(biased) - std::f64::consts::LN_2).abs() <= 1e-12);
}

#[test]
fn relation_scorer_receives_no_gradient_from_the_total_loss() {
    let config = tiny_model(AblationFlags::default());
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let net = CuciNet::new(&mut store, &mut rng, &config).unwrap();
    let joint = prepare_joint(&tiny_sample(2), &config).unwrap();

    let mut ctx = Ctx::eval(&store);
    let loss = sample_loss(&mut ctx, &net, &joint, 0.05, 0.7).unwrap();
    let grads = ctx.tape.backward(loss.total);
    let mut acc: Vec<Array2<f64>> =
        store.iter().map(|(_, e)| Array2::zeros(e.value.dim())).collect();
    ctx.accumulate_param_grads(&grads, &mut acc);

    let mut scorer_params = 0;
    let mut live_params = 0;
    for (i, (_, entry)) in store.iter().enumerate() {
        let zero = acc[i].iter().all(|&g| g == 0.0);
        if entry.name.starts_with("s1.scorer") {
            scorer_params += 1;
            assert!(zero, "{} received gradient through the detached target", entry.name);
        }
        live_params += usize::from(!zero);
    }
    assert!(scorer_params >= 2, "scorer weight and bias expected in the store");
    assert!(live_params > store.len() / 2, "most parameters train");
}

#[test]
fn branch_instances_start_identical_but_train_independently() {
    let config = tiny_model(AblationFlags::default());
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let net = CuciNet::new(&mut store, &mut rng, &config).unwrap();
    let joint = prepare_joint(&tiny_sample(4), &config).unwrap();

    let streams = |store: &ParamStore| {
        let mut ctx = Ctx::eval(store);
        let out = net.forward(&mut ctx, &joint).unwrap();
        (
            ctx.tape.value(out.stage1.h_audio_primary).clone(),
            ctx.tape.value(out.stage1.h_audio_structure).clone(),
        )
    };

    // Identical initialization by RNG replay: the branches coincide exactly.
    let (primary, structure) = streams(&store);
    assert_eq!(primary, structure);

    // And they are distinct parameters: nudging the structure copy moves
    // only the structure stream.
    let id = store.find("s1.audio_s.layer0.router.w").expect("structure branch parameter");
    let mut w = store.value(id).clone();
    w[[0, 0]] += 0.5;
    store.set_value(id, w);
    let (primary2, structure2) = streams(&store);
    assert_eq!(primary, primary2);
    assert_ne!(structure, structure2);

    // Shared-branch variant: one parameter set serves both streams.
    let shared_cfg = tiny_model(AblationFlags { shared_branches: true, ..Default::default() });
    let mut shared_store = ParamStore::new();
    let mut rng2 = ChaCha8Rng::seed_from_u64(41);
    let shared = CuciNet::new(&mut shared_store, &mut rng2, &shared_cfg).unwrap();
    assert!(shared_store.find("s1.audio_s.layer0.router.w").is_none());
    let joint2 = prepare_joint(&tiny_sample(4), &shared_cfg).unwrap();
    let mut ctx = Ctx::eval(&shared_store);
    let out = shared.forward(&mut ctx, &joint2).unwrap();
    assert_eq!(
        ctx.tape.value(out.stage1.h_audio_primary),
        ctx.tape.value(out.stage1.h_audio_structure)
    );
}

#[test]
fn ablated_cue_slots_are_exactly_zero() {
    // Each pair variant zeroes one 2d-wide slot of the 7d cue; no-local-cue
    // zeroes all three pair slots; no-global-cue zeroes the last d columns.
    let d = D;
    let cases: [(&str, AblationFlags, Vec<std::ops::Range<usize>>); 3] = [
        (
            "pair-ta-av drops text-visual",
            AblationFlags {
                drop_pair: Some(cuci_net::model::Pair::TextVisual),
                ..Default::default()
            },
            vec![2 * d..4 * d],
        ),
        (
            "no-local-cue",
            AblationFlags { no_local_cue: true, ..Default::default() },
            vec![0..6 * d],
        ),
        (
            "no-global-cue",
            AblationFlags { no_global_cue: true, ..Default::default() },
            vec![6 * d..7 * d],
        ),
    ];

    for (what, flags, zero_ranges) in cases {
        let config = tiny_model(flags);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let net = CuciNet::new(&mut store, &mut rng, &config).unwrap();
        let joint = prepare_joint(&tiny_sample(6), &config).unwrap();
        let mut ctx = Ctx::eval(&store);
        let out = net.forward(&mut ctx, &joint).unwrap();
        let u_f = ctx.tape.value(out.cue.u_f);
        assert_eq!(u_f.dim(), (1, 7 * d));
        for range in &zero_ranges {
            for c in range.clone() {
                assert_eq!(u_f[[0, c]], 0.0, "{what}: column {c} should be zeroed");
            }
        }
        let live: usize = (0..7 * d)
            .filter(|&c| zero_ranges.iter().all(|r| !r.contains(&c)))
            .filter(|&c| u_f[[0, c]] != 0.0)
            .count();
        assert!(live > 0, "{what}: the surviving slots must carry signal");
    }
}
