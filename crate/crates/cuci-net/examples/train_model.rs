//! Train a small model on the synthetic incongruity task and inspect the
//! artifacts a run leaves behind.
//!
//!     cargo run --example train_model

use cuci_net::data::{generate_synthetic, SyntheticConfig};
use cuci_net::train::{train, OptimConfig, RunConfig};
use cuci_net::Result;

fn main() -> Result<()> {
    let bundle = generate_synthetic(
        &SyntheticConfig { n_train: 160, n_val: 24, n_test: 48, ..Default::default() },
        11,
    )?;
    let config = RunConfig {
        optim: OptimConfig { max_epochs: 6, patience: 6, ..Default::default() },
        seed: 11,
        ..Default::default()
    };

    let out_dir = std::env::temp_dir().join("cuci-examples/train_model");
    let run = train(&bundle, &config, &out_dir)?;

    println!("epoch  train_loss  val_f1");
    for rec in &run.history {
        println!("{:>5}  {:>10.6}  {:>6.2}", rec.epoch, rec.train_loss, 100.0 * rec.val_f1);
    }
    println!(
        "\nbest epoch {} with validation F1 {:.2}",
        run.best_epoch,
        100.0 * run.best_val_f1
    );

    println!("test metrics from the reloaded best checkpoint:");
    for row in &run.test {
        match row.metrics {
            Some(m) => println!(
                "  {:<8} precision {:.2}  recall {:.2}  f1 {:.2}  (n={})",
                row.scope.name(),
                100.0 * m.precision,
                100.0 * m.recall,
                100.0 * m.f1,
                row.n
            ),
            None => println!("  {:<8} absent", row.scope.name()),
        }
    }

    println!("\nartifacts under {}:", run.out_dir.display());
    for name in ["config.json", "history.csv", "rho_trace.csv", "best.ckpt", "metrics.csv"] {
        let exists = run.out_dir.join(name).exists();
        println!("  {name:<14} {}", if exists { "written" } else { "missing" });
    }
    Ok(())
}
