//! One sample, one forward pass, every stage opened up.
//!
//! Shows the joint-sequence layout, the relation prior between context and
//! utterance, the per-layer expert routing weights, the aggregation weights
//! over modalities, and the final logits.
//!
//!     cargo run --example forward_anatomy

use cuci_net::data::{generate_synthetic, Modality, SyntheticConfig};
use cuci_net::model::{prepare_joint, CuciNet, ModelConfig};
use cuci_net::nn::{Ctx, ParamStore};
use cuci_net::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let config = ModelConfig::default();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let net = CuciNet::new(&mut store, &mut rng, &config)?;
    println!(
        "model: d={}, heads={}, encoder layers t/a/v = {}/{}/{}, interaction depth {}",
        config.d,
        config.num_heads,
        config.n_text_layers,
        config.n_audio_layers,
        config.n_visual_layers,
        config.interaction_depth
    );
    println!("parameters: {} tensors\n", store.len());

    let bundle = generate_synthetic(
        &SyntheticConfig { n_train: 1, n_val: 1, n_test: 1, ..Default::default() },
        3,
    )?;
    let sample = &bundle.samples[0];
    let joint = prepare_joint(sample, &config)?;

    println!("sample '{}', label {}", sample.sample_id, sample.label);
    for m in Modality::ALL {
        let seq = joint.get(m);
        let specials: Vec<usize> =
            seq.special.iter().enumerate().filter(|(_, &s)| s).map(|(i, _)| i).collect();
        println!(
            "  {} joint sequence: {} real of {} slots, special slots at {:?}",
            m.short_name(),
            seq.seq_len,
            seq.features.nrows(),
            specials
        );
    }

    let mut ctx = Ctx::eval(&store);
    let out = net.forward(&mut ctx, &joint)?;

    let score = ctx.tape.value(out.stage1.relation_score)[[0, 0]];
    println!("\nrelation prior (context-utterance dependency score): {score:.4}");

    println!("expert routing weights (rho -> consistency expert share):");
    for trace in out.rho_traces() {
        let rho = ctx.tape.value(trace.rho)[[0, 0]];
        println!(
            "  {:?} branch, {} layer {}: rho = {:.4}",
            trace.branch,
            trace.modality.short_name(),
            trace.layer,
            rho
        );
    }

    let alpha = ctx.tape.value(out.alpha);
    println!(
        "\naggregation weights (t, a, v): {:.4}, {:.4}, {:.4}",
        alpha[[0, 0]],
        alpha[[0, 1]],
        alpha[[0, 2]]
    );

    let logits = ctx.tape.value(out.logits);
    let pred = net.predict(&store, &joint)?;
    println!("logits: {:.4}, {:.4} -> predicted class {pred}", logits[[0, 0]], logits[[0, 1]]);
    println!("(untrained parameters; the prediction is arbitrary, the plumbing is not)");
    Ok(())
}
