//! Generate a synthetic incongruity dataset, save it, and reload it.
//!
//! The task plants a context polarity into the text context block and an
//! utterance polarity into the audio/visual utterance blocks; the label is
//! 1 iff they disagree. No single block predicts the label on its own.
//!
//!     cargo run --example generate_data

use cuci_net::data::{generate_synthetic, load_dataset, save_dataset, Split, SyntheticConfig};
use cuci_net::Result;

fn main() -> Result<()> {
    let config = SyntheticConfig {
        n_train: 48,
        n_val: 8,
        n_test: 16,
        ..Default::default()
    };
    let bundle = generate_synthetic(&config, 42)?;

    println!(
        "generated {} samples, dims (t={}, a={}, v={}), {} classes",
        bundle.samples.len(),
        bundle.dims.t,
        bundle.dims.a,
        bundle.dims.v,
        bundle.num_classes
    );
    for split in [Split::Train, Split::Val, Split::Test] {
        let idx = bundle.split_indices(split);
        let positives = idx.iter().filter(|&&i| bundle.samples[i].label == 1).count();
        println!("  {:?}: {} samples, {} incongruent", split, idx.len(), positives);
    }

    let first = &bundle.samples[0];
    println!(
        "first sample '{}': label {}, t_ctx {:?}, a_utt {:?}",
        first.sample_id,
        first.label,
        first.t_ctx.dim(),
        first.a_utt.dim()
    );

    let dir = std::env::temp_dir().join("cuci-examples/generate_data");
    save_dataset(&bundle, &dir)?;
    let reloaded = load_dataset(&dir)?;
    let exact = bundle
        .samples
        .iter()
        .zip(&reloaded.samples)
        .all(|(a, b)| a.t_ctx == b.t_ctx && a.a_utt == b.a_utt && a.label == b.label);
    println!("saved to {} and reloaded: bit-exact = {exact}", dir.display());
    Ok(())
}
