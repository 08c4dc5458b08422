//! Post-training analysis: routing telemetry aggregation, expert-consistency
//! scoring, the interaction-depth sweep, and fused-embedding export.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{DatasetBundle, Modality};
use crate::error::{Error, Result};
use crate::model::stage1::Branch;
use crate::model::{prepare_joint, CuciNet};
use crate::nn::{Ctx, ParamStore};
use crate::train::{train, RunConfig, ScopeRow};

/// Subset-by-expert mean routing weights. Rows: subset S (flag 1), subset NS
/// (flag 0). Columns: consistency expert (mean rho), discrepancy expert
/// (mean 1-rho). Each row sums to 1 by construction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoutingMatrix(pub [[f64; 2]; 2]);

impl RoutingMatrix {
    /// Mean of the diagonal entries: 0.5 under indifferent routing, 1 under
    /// perfectly subset-aligned experts.
    pub fn consistency_score(&self) -> f64 {
        (self.0[0][0] + self.0[1][1]) / 2.0
    }
}

/// Averages a routing-weight stream into the 2x2 subset-by-expert matrix.
/// `in_subset1[i]` marks sample `i` as subset S. Both subsets must be
/// populated: a mean over an empty subset has no value.
pub fn accumulate_routing(rho: &[f64], in_subset1: &[bool]) -> Result<RoutingMatrix> {
    if rho.len() != in_subset1.len() {
        return Err(Error::Data(format!(
            "routing: {} weights vs {} subset marks",
            rho.len(),
            in_subset1.len()
        )));
    }
    let mut sums = [0.0f64; 2];
    let mut counts = [0usize; 2];
    for (&r, &s) in rho.iter().zip(in_subset1) {
        let row = usize::from(!s);
        sums[row] += r;
        counts[row] += 1;
    }
    for (row, name) in [(0usize, "S"), (1, "NS")] {
        if counts[row] == 0 {
            return Err(Error::Data(format!("routing: subset {name} is empty")));
        }
    }
    let s_mean = sums[0] / counts[0] as f64;
    let ns_mean = sums[1] / counts[1] as f64;
    Ok(RoutingMatrix([[s_mean, 1.0 - s_mean], [ns_mean, 1.0 - ns_mean]]))
}

/// How samples are assigned to the S/NS axis of a routing matrix.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum SubsetAxis {
    SarcasmFlag,
    BinaryLabel,
}

impl SubsetAxis {
    fn name(self) -> &'static str {
        match self {
            SubsetAxis::SarcasmFlag => "sarcasm_flag",
            SubsetAxis::BinaryLabel => "binary_label",
        }
    }
}

/// Subset membership per sample: sarcasm flags when every sample carries
/// one, else the binary label as a stand-in.
fn subset_marks(bundle: &DatasetBundle) -> Result<(Vec<bool>, SubsetAxis)> {
    if bundle.samples.iter().all(|s| matches!(s.sarcasm_flag, Some(0) | Some(1))) {
        let marks = bundle.samples.iter().map(|s| s.sarcasm_flag == Some(1)).collect();
        return Ok((marks, SubsetAxis::SarcasmFlag));
    }
    if bundle.num_classes == 2 {
        let marks = bundle.samples.iter().map(|s| s.label == 1).collect();
        return Ok((marks, SubsetAxis::BinaryLabel));
    }
    Err(Error::Data(
        "routing: samples lack sarcasm flags and the task is not binary, so no \
         subset axis exists"
            .to_string(),
    ))
}

/// Eval-mode routing weights of the structure-preserving branch at one
/// (modality, layer), accumulated per subset over the whole bundle.
/// Returns the matrix and a CSV rendering (subset axis documented in a
/// header comment).
pub fn export_routing(
    net: &CuciNet,
    store: &ParamStore,
    bundle: &DatasetBundle,
    modality: Modality,
    layer: usize,
) -> Result<(RoutingMatrix, String)> {
    if modality == Modality::Text {
        return Err(Error::Config(
            "routing export: only the acoustic and visual branches carry routers".to_string(),
        ));
    }
    if net.config.ablation.no_dual_expert {
        return Err(Error::Config(
            "routing export: this model was built without dual experts".to_string(),
        ));
    }
    let n_layers = match modality {
        Modality::Audio => net.config.n_audio_layers,
        Modality::Visual => net.config.n_visual_layers,
        Modality::Text => unreachable!(),
    };
    if layer >= n_layers {
        return Err(Error::Config(format!(
            "routing export: layer {layer} out of range, the {} branch has {} layers",
            modality.short_name(),
            n_layers
        )));
    }

    let (marks, axis) = subset_marks(bundle)?;
    let mut rhos = Vec::with_capacity(bundle.samples.len());
    for sample in &bundle.samples {
        let joint = prepare_joint(sample, &net.config)?;
        let mut ctx = Ctx::eval(store);
        let out = net.forward(&mut ctx, &joint)?;
        let trace = out
            .rho_traces()
            .iter()
            .find(|t| t.branch == Branch::Structure && t.modality == modality && t.layer == layer)
            .ok_or_else(|| {
                Error::Data(format!(
                    "routing export: no telemetry for {} layer {layer}",
                    modality.short_name()
                ))
            })?;
        rhos.push(ctx.tape.value(trace.rho)[[0, 0]]);
    }
    let matrix = accumulate_routing(&rhos, &marks)?;

    let mut csv = String::new();
    let _ = writeln!(csv, "# subset axis: {}", axis.name());
    let _ = writeln!(csv, "# modality: {}, layer: {layer}, branch: structure", modality.short_name());
    csv.push_str("subset,expert_con,expert_dis\n");
    let _ = writeln!(csv, "S,{:.6},{:.6}", matrix.0[0][0], matrix.0[0][1]);
    let _ = writeln!(csv, "NS,{:.6},{:.6}", matrix.0[1][0], matrix.0[1][1]);
    Ok((matrix, csv))
}

fn annotate(e: Error, depth: usize) -> Error {
    match e {
        Error::Config(m) => Error::Config(format!("depth {depth}: {m}")),
        Error::Data(m) => Error::Data(format!("depth {depth}: {m}")),
        Error::Numerical(m) => Error::Numerical(format!("depth {depth}: {m}")),
        Error::Io(io) => Error::Data(format!("depth {depth}: io: {io}")),
    }
}

/// One trained model per interaction depth, identical seed and config
/// otherwise. Each run lands in `out_dir/depth-N/`; `out_dir/sweep.csv`
/// collects `depth,scope,f1` rows (percent). Returns per-depth test rows.
pub fn depth_sweep(
    bundle: &DatasetBundle,
    base: &RunConfig,
    depths: &[usize],
    out_dir: &Path,
) -> Result<(Vec<(usize, Vec<ScopeRow>)>, PathBuf)> {
    if depths.is_empty() {
        return Err(Error::Config("depth sweep: at least one depth is required".to_string()));
    }
    fs::create_dir_all(out_dir)?;
    let mut results = Vec::with_capacity(depths.len());
    for &depth in depths {
        let mut config = base.clone();
        config.model.interaction_depth = depth;
        let run = train(bundle, &config, &out_dir.join(format!("depth-{depth}")))
            .map_err(|e| annotate(e, depth))?;
        results.push((depth, run.test));
    }
    let mut csv = String::from("depth,scope,f1\n");
    for (depth, rows) in &results {
        for row in rows {
            if let Some(m) = row.metrics {
                let _ = writeln!(csv, "{},{},{:.2}", depth, row.scope.name(), 100.0 * m.f1);
            }
        }
    }
    let csv_path = out_dir.join("sweep.csv");
    fs::write(&csv_path, csv)?;
    Ok((results, csv_path))
}

/// Eval-mode fused representation of every sample, in bundle order:
/// `sample_id,label,z0..z{d-1}`. Deterministic, so repeated exports are
/// byte-identical.
pub fn export_embeddings(
    net: &CuciNet,
    store: &ParamStore,
    bundle: &DatasetBundle,
) -> Result<String> {
    let mut csv = String::from("sample_id,label");
    for j in 0..net.config.d {
        let _ = write!(csv, ",z{j}");
    }
    csv.push('\n');
    for sample in &bundle.samples {
        let joint = prepare_joint(sample, &net.config)?;
        let mut ctx = Ctx::eval(store);
        let out = net.forward(&mut ctx, &joint)?;
        let fused = ctx.tape.value(out.fused);
        let _ = write!(csv, "{},{}", sample.sample_id, sample.label);
        for j in 0..net.config.d {
            let _ = write!(csv, ",{:.9e}", fused[[0, j]]);
        }
        csv.push('\n');
    }
    Ok(csv)
}
