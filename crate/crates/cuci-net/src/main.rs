//! `cuci` — train, evaluate, and dissect context-aware multimodal
//! classifiers from the command line. Every subcommand is a thin wrapper
//! over the library; exit codes: 2 config/usage, 3 data/io, 4 numerical.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use cuci_net::analysis;
use cuci_net::checkpoint;
use cuci_net::data::{
    generate_synthetic, load_dataset, save_dataset, DatasetBundle, Modality, ModalityDims, Split,
    SyntheticConfig,
};
use cuci_net::gradcheck;
use cuci_net::model::VARIANTS;
use cuci_net::train::{self, RunConfig, Scope, ScopeRow};
use cuci_net::{Error, Result};

#[derive(Parser)]
#[command(name = "cuci", version, about = "Context-aware multimodal understanding toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic context-incongruity dataset.
    ///
    /// Writes manifest.json plus records.jsonl under --out. The split sizes
    /// are N train, N/8 validation, N/4 test (at least one each).
    GenSynth {
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Number of training samples.
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Signal-to-noise ratio of the polarity prototypes.
        #[arg(long, default_value_t = 4.0)]
        snr: f64,
        /// Raw feature widths as "t,a,v" (default 12,10,10).
        #[arg(long)]
        dims: Option<String>,
        /// Context turns per sample.
        #[arg(long, default_value_t = 3)]
        len_ctx: usize,
        /// Utterance frames per sample.
        #[arg(long, default_value_t = 3)]
        len_utt: usize,
    },
    /// Train a model and write run artifacts (checkpoint, history, metrics).
    Train {
        /// Run-config JSON; desk-scale defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory (or manifest.json path).
        #[arg(long)]
        data: PathBuf,
        /// Run output directory.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on a dataset's test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// entire | subset1 | subset2 | all
        #[arg(long, default_value = "entire")]
        scope: String,
    },
    /// Train the full model and one named variant side by side.
    #[command(after_help = variant_help())]
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Variant id (see the list below).
        #[arg(long)]
        variant: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model per interaction depth and tabulate test F1.
    SweepDepth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated depths, e.g. "0,1,2,3".
        #[arg(long)]
        depths: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export subset-by-expert mean routing weights at one router.
    ExportRouting {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// a (acoustic) or v (visual).
        #[arg(long)]
        modality: String,
        /// Encoder layer index, 0-based.
        #[arg(long)]
        layer: usize,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Export the fused representation of every sample as CSV.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients against central differences.
    Gradcheck {
        /// unit | full; both when omitted.
        #[arg(long)]
        level: Option<String>,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenSynth { out, n, seed, snr, dims, len_ctx, len_utt } => {
            gen_synth(&out, n, seed, snr, dims.as_deref(), len_ctx, len_utt)
        }
        Command::Train { config, data, out, seed } => {
            let mut config = read_run_config(config.as_deref())?;
            if let Some(seed) = seed {
                config.seed = seed;
            }
            let bundle = load_dataset(&data)?;
            let run = train::train(&bundle, &config, &out)?;
            for rec in &run.history {
                println!(
                    "epoch {:>3}  train_loss {:.6}  val_f1 {:.2}  lambda_bias {:.4}",
                    rec.epoch,
                    rec.train_loss,
                    100.0 * rec.val_f1,
                    rec.lambda_bias
                );
            }
            println!(
                "best epoch {} (val_f1 {:.2}); checkpoint at {}",
                run.best_epoch,
                100.0 * run.best_val_f1,
                run.checkpoint.display()
            );
            print_scope_rows(&run.test);
            Ok(())
        }
        Command::Eval { checkpoint, data, scope } => {
            let scopes = parse_scopes(&scope)?;
            let loaded = checkpoint::load(&checkpoint)?;
            let bundle = load_test_bundle(&data, &loaded.config.input_dims)?;
            let rows = train::evaluate(&loaded.net, &loaded.store, &bundle, &scopes)?;
            print_scope_rows(&rows);
            Ok(())
        }
        Command::Ablate { config, data, variant, out } => {
            let config = read_run_config(config.as_deref())?;
            let bundle = load_dataset(&data)?;
            let result = train::run_ablation(&bundle, &config, &variant, &out)?;
            println!("full:");
            print_scope_rows(&result.full.test);
            println!("{variant}:");
            print_scope_rows(&result.variant.test);
            println!("comparison at {}", result.comparison_csv.display());
            Ok(())
        }
        Command::SweepDepth { config, data, depths, out } => {
            let config = read_run_config(config.as_deref())?;
            let depths = parse_depths(&depths)?;
            let bundle = load_dataset(&data)?;
            let (results, csv_path) = analysis::depth_sweep(&bundle, &config, &depths, &out)?;
            for (depth, rows) in &results {
                let f1 = rows
                    .iter()
                    .find(|r| r.scope == Scope::Entire)
                    .and_then(|r| r.metrics)
                    .map_or_else(|| "absent".to_string(), |m| format!("{:.2}", 100.0 * m.f1));
                println!("depth {depth}: entire f1 {f1}");
            }
            println!("sweep table at {}", csv_path.display());
            Ok(())
        }
        Command::ExportRouting { checkpoint, data, modality, layer, out } => {
            let modality = parse_modality(&modality)?;
            let loaded = checkpoint::load(&checkpoint)?;
            let bundle = load_test_bundle(&data, &loaded.config.input_dims)?;
            let (matrix, csv) =
                analysis::export_routing(&loaded.net, &loaded.store, &bundle, modality, layer)?;
            fs::write(&out, csv)?;
            println!(
                "routing matrix [[{:.4}, {:.4}], [{:.4}, {:.4}]], consistency {:.4}",
                matrix.0[0][0],
                matrix.0[0][1],
                matrix.0[1][0],
                matrix.0[1][1],
                matrix.consistency_score()
            );
            println!("written to {}", out.display());
            Ok(())
        }
        Command::ExportEmbeddings { checkpoint, data, out } => {
            let loaded = checkpoint::load(&checkpoint)?;
            let bundle = load_test_bundle(&data, &loaded.config.input_dims)?;
            let csv = analysis::export_embeddings(&loaded.net, &loaded.store, &bundle)?;
            let rows = csv.lines().count() - 1;
            fs::write(&out, csv)?;
            println!("{rows} embeddings written to {}", out.display());
            Ok(())
        }
        Command::Gradcheck { level } => gradcheck_cmd(level.as_deref()),
    }
}

fn gen_synth(
    out: &Path,
    n: usize,
    seed: u64,
    snr: f64,
    dims: Option<&str>,
    len_ctx: usize,
    len_utt: usize,
) -> Result<()> {
    let mut config = SyntheticConfig {
        n_train: n,
        n_val: (n / 8).max(1),
        n_test: (n / 4).max(1),
        len_ctx,
        len_utt,
        snr,
        ..Default::default()
    };
    if let Some(spec) = dims {
        config.dims = parse_dims(spec)?;
    }
    let bundle = generate_synthetic(&config, seed)?;
    save_dataset(&bundle, out)?;
    println!(
        "wrote {} samples (train {} / val {} / test {}) to {}",
        bundle.samples.len(),
        config.n_train,
        config.n_val,
        config.n_test,
        out.display()
    );
    Ok(())
}

fn gradcheck_cmd(level: Option<&str>) -> Result<()> {
    let (unit, full) = match level {
        None => (true, true),
        Some("unit") => (true, false),
        Some("full") => (false, true),
        Some(other) => {
            return Err(Error::Config(format!("level '{other}' is not one of unit|full")))
        }
    };
    let mut failures = 0usize;
    if unit {
        for report in gradcheck::run_unit_checks()? {
            let ok = report.passes(gradcheck::UNIT_TOL);
            failures += usize::from(!ok);
            println!(
                "{:<24} max rel err {:.3e} over {} scalars ({} live) .. {}",
                report.name,
                report.max_rel_err,
                report.checked_scalars,
                report.live_scalars,
                if ok { "ok" } else { "FAIL" }
            );
        }
    }
    if full {
        let report = gradcheck::run_full_check()?;
        let ok = report.passes(gradcheck::FULL_TOL);
        failures += usize::from(!ok);
        println!(
            "{:<24} max rel err {:.3e} over {} scalars ({} live) .. {}",
            report.name,
            report.max_rel_err,
            report.checked_scalars,
            report.live_scalars,
            if ok { "ok" } else { "FAIL" }
        );
    }
    if failures > 0 {
        return Err(Error::Numerical(format!("{failures} gradient check(s) failed")));
    }
    Ok(())
}

/// Parses the run config, or falls back to desk-scale defaults.
fn read_run_config(path: Option<&Path>) -> Result<RunConfig> {
    let config = match path {
        None => RunConfig::default(),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| {
                Error::Config(format!("cannot read config {}: {e}", p.display()))
            })?;
            serde_json::from_str(&text).map_err(|e| {
                Error::Config(format!("cannot parse config {}: {e}", p.display()))
            })?
        }
    };
    config.validate()?;
    Ok(config)
}

/// Loads a dataset and narrows it to its test split, which evaluation-style
/// subcommands operate on.
fn load_test_bundle(data: &Path, expected_dims: &ModalityDims) -> Result<DatasetBundle> {
    let bundle = load_dataset(data)?;
    if bundle.dims != *expected_dims {
        return Err(Error::Config(format!(
            "dataset dims ({},{},{}) do not match the checkpoint's input dims ({},{},{})",
            bundle.dims.t,
            bundle.dims.a,
            bundle.dims.v,
            expected_dims.t,
            expected_dims.a,
            expected_dims.v
        )));
    }
    let test = bundle.subset(&bundle.split_indices(Split::Test));
    if test.samples.is_empty() {
        return Err(Error::Data("the dataset's test split is empty".to_string()));
    }
    Ok(test)
}

fn print_scope_rows(rows: &[ScopeRow]) {
    for row in rows {
        match row.metrics {
            Some(m) => println!(
                "{:<8} precision {:>6.2}  recall {:>6.2}  f1 {:>6.2}  (n={})",
                row.scope.name(),
                100.0 * m.precision,
                100.0 * m.recall,
                100.0 * m.f1,
                row.n
            ),
            None => println!("{:<8} absent (n=0)", row.scope.name()),
        }
    }
}

fn parse_scopes(s: &str) -> Result<Vec<Scope>> {
    if s == "all" {
        return Ok(Scope::ALL.to_vec());
    }
    Ok(vec![Scope::parse(s)?])
}

fn parse_modality(s: &str) -> Result<Modality> {
    match s {
        "a" => Ok(Modality::Audio),
        "v" => Ok(Modality::Visual),
        other => Err(Error::Config(format!("modality '{other}' is not one of a|v"))),
    }
}

fn parse_dims(spec: &str) -> Result<ModalityDims> {
    let parts: Vec<&str> = spec.split(',').collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!("dims '{spec}' must be three integers \"t,a,v\"")));
    }
    let mut vals = [0usize; 3];
    for (slot, part) in vals.iter_mut().zip(&parts) {
        *slot = part
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("dims '{spec}' must be three integers \"t,a,v\"")))?;
    }
    Ok(ModalityDims { t: vals[0], a: vals[1], v: vals[2] })
}

fn parse_depths(spec: &str) -> Result<Vec<usize>> {
    spec.split(',')
        .map(|part| {
            part.trim().parse().map_err(|_| {
                Error::Config(format!("depths '{spec}' must be comma-separated integers"))
            })
        })
        .collect()
}

fn variant_help() -> String {
    let list: String = VARIANTS.iter().map(|(id, what)| format!("  {id:<20} {what}\n")).collect();
    format!("Variants:\n{list}")
}
