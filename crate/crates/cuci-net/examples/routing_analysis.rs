//! Inspect how the dual-expert routers split traffic across subsets.
//!
//! Trains briefly, reloads the best checkpoint, and aggregates eval-mode
//! routing weights into a 2x2 subset-by-expert matrix whose diagonal mean
//! is the expert-consistency score (0.5 = indifferent, 1.0 = perfectly
//! subset-aligned experts).
//!
//!     cargo run --example routing_analysis

use cuci_net::analysis::export_routing;
use cuci_net::checkpoint;
use cuci_net::data::{generate_synthetic, Modality, Split, SyntheticConfig};
use cuci_net::train::{train, OptimConfig, RunConfig};
use cuci_net::Result;

fn main() -> Result<()> {
    let bundle = generate_synthetic(
        &SyntheticConfig { n_train: 160, n_val: 24, n_test: 48, ..Default::default() },
        47,
    )?;
    let config = RunConfig {
        optim: OptimConfig { max_epochs: 4, patience: 4, ..Default::default() },
        seed: 47,
        ..Default::default()
    };
    let out_dir = std::env::temp_dir().join("cuci-examples/routing_analysis");
    let run = train(&bundle, &config, &out_dir)?;

    let loaded = checkpoint::load(&run.checkpoint)?;
    let test = bundle.subset(&bundle.split_indices(Split::Test));

    for modality in [Modality::Audio, Modality::Visual] {
        let (matrix, csv) =
            export_routing(&loaded.net, &loaded.store, &test, modality, 0)?;
        println!("{} branch, layer 0:", modality.short_name());
        println!("           consistency  discrepancy");
        println!("  S     {:>12.4} {:>12.4}", matrix.0[0][0], matrix.0[0][1]);
        println!("  NS    {:>12.4} {:>12.4}", matrix.0[1][0], matrix.0[1][1]);
        println!("  consistency score: {:.4}\n", matrix.consistency_score());
        let path = out_dir.join(format!("routing_{}.csv", modality.short_name()));
        std::fs::write(&path, csv)?;
        println!("  written to {}", path.display());
    }

    println!("per-epoch router telemetry from training: {}", out_dir.join("rho_trace.csv").display());
    Ok(())
}
