//! Training harness: grouped adaptive-moment updates under per-step cosine
//! decay, epoch-linear decay of the routing-bias coefficient, early stopping
//! on validation macro-F1, and CSV run artifacts.
//!
//! A run directory receives `config.json` (the resolved run configuration),
//! `history.csv` (per-epoch loss, validation F1, learning rates, bias
//! coefficient), `rho_trace.csv` (per-epoch mean routing coefficients), the
//! best checkpoint `best.ckpt`, and `metrics.csv` (test metrics of the best
//! checkpoint, one row per scope).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{DatasetBundle, Modality, Split};
use crate::error::{Error, Result};
use crate::model::{apply_variant, prepare_joint, sample_loss, CuciNet, ModelConfig};
use crate::nn::{Ctx, LrGroup, ParamStore};

// ============================================================
// Configuration
// ============================================================

/// Optimization hyperparameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    /// Base rate for the acoustic/visual encoder group.
    pub lr_nonverbal: f64,
    /// Base rate for the text encoder and every remaining module.
    pub lr_rest: f64,
    /// Weight of the routing regularizer in the total loss.
    pub lambda_gate: f64,
    /// Initial centering coefficient inside the routing regularizer.
    pub lambda_bias0: f64,
    /// Epochs until the centering coefficient reaches zero;
    /// `None` means `max_epochs`.
    pub tau_end: Option<f64>,
    /// Epochs without validation-F1 improvement before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr_nonverbal: 3e-3,
            lr_rest: 3e-3,
            lambda_gate: 0.05,
            lambda_bias0: 1.0,
            tau_end: None,
            patience: 10,
            max_epochs: 20,
            batch_size: 16,
        }
    }
}

impl OptimConfig {
    /// The full-scale recipe: modality-split rates 3e-3 / 2e-6, regularizer
    /// weight 0.05, patience 10.
    pub fn mustard() -> Self {
        OptimConfig {
            lr_nonverbal: 3e-3,
            lr_rest: 2e-6,
            lambda_gate: 0.05,
            lambda_bias0: 1.0,
            tau_end: None,
            patience: 10,
            max_epochs: 50,
            batch_size: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lr_nonverbal", self.lr_nonverbal), ("lr_rest", self.lr_rest)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("optim: {name} must be a positive real")));
            }
        }
        for (name, v) in [("lambda_gate", self.lambda_gate), ("lambda_bias0", self.lambda_bias0)]
        {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("optim: {name} must be >= 0")));
            }
        }
        if let Some(tau) = self.tau_end {
            if !(tau.is_finite() && tau > 0.0) {
                return Err(Error::Config("optim: tau_end must be a positive real".to_string()));
            }
        }
        if self.patience == 0 {
            return Err(Error::Config("optim: patience must be >= 1".to_string()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("optim: max_epochs must be >= 1".to_string()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("optim: batch_size must be >= 1".to_string()));
        }
        Ok(())
    }
}

/// Everything a training run depends on: architecture, optimization, seed.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub seed: u64,
}

impl RunConfig {
    /// Full-scale preset.
    pub fn mustard() -> Self {
        RunConfig { model: ModelConfig::mustard(), optim: OptimConfig::mustard(), seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optim.validate()
    }

    fn tau_end(&self) -> f64 {
        self.optim.tau_end.unwrap_or(self.optim.max_epochs as f64)
    }
}

// ============================================================
// Schedules
// ============================================================

/// Per-step cosine decay: exactly `base` at step 0, exactly zero from
/// `t_total` on, `base/2` at the midpoint.
pub fn cosine_lr(base: f64, t: usize, t_total: usize) -> f64 {
    if t >= t_total {
        return 0.0;
    }
    base * 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / t_total as f64).cos())
}

/// Epoch-linear decay of the routing-bias coefficient: `lambda_bias0` at
/// epoch 0, zero from `tau_end` on.
pub fn lambda_bias_at(lambda_bias0: f64, epoch: usize, tau_end: f64) -> f64 {
    let frac = 1.0 - epoch as f64 / tau_end;
    lambda_bias0 * frac.max(0.0)
}

// ============================================================
// Optimizer
// ============================================================

/// Adaptive-moment estimation over the parameter store, with one base rate
/// per learning-rate group and no weight decay.
pub struct Adam {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    steps: usize,
}

impl Adam {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(store: &ParamStore) -> Adam {
        Adam {
            m: store.iter().map(|(_, e)| Array2::zeros(e.value.dim())).collect(),
            v: store.iter().map(|(_, e)| Array2::zeros(e.value.dim())).collect(),
            steps: 0,
        }
    }

    /// Applies one update. `grads` is indexed like the store;
    /// `lr` holds the current (nonverbal, rest) rates.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Array2<f64>], lr: (f64, f64)) {
        assert_eq!(grads.len(), store.len());
        self.steps += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.steps as i32);
        let bc2 = 1.0 - Self::BETA2.powi(self.steps as i32);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for (i, &id) in ids.iter().enumerate() {
            let g = &grads[i];
            self.m[i] = &self.m[i] * Self::BETA1 + g * (1.0 - Self::BETA1);
            self.v[i] = &self.v[i] * Self::BETA2 + &(g * g) * (1.0 - Self::BETA2);
            let rate = match store.entry(id).group {
                LrGroup::Nonverbal => lr.0,
                LrGroup::Rest => lr.1,
            };
            let m_hat = &self.m[i] / bc1;
            let v_hat = &self.v[i] / bc2;
            let update = m_hat / (v_hat.mapv(f64::sqrt) + Self::EPS) * rate;
            store.set_value(id, store.value(id) - update);
        }
    }
}

/// Per-group parameter counts (nonverbal, rest). Groups are total by
/// construction; the pair lets callers assert both are populated.
pub fn group_counts(store: &ParamStore) -> (usize, usize) {
    let mut counts = (0usize, 0usize);
    for (_, e) in store.iter() {
        match e.group {
            LrGroup::Nonverbal => counts.0 += 1,
            LrGroup::Rest => counts.1 += 1,
        }
    }
    counts
}

// ============================================================
// Metrics
// ============================================================

/// Macro-averaged classification metrics, stored as fractions in `[0,1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn safe_div(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

fn f1_of(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Macro precision/recall/F1 over `num_classes`. Degenerate classes
/// contribute zeros rather than faulting.
pub fn macro_metrics(labels: &[usize], preds: &[usize], num_classes: usize) -> Result<Metrics> {
    if labels.len() != preds.len() {
        return Err(Error::Data(format!(
            "metrics: {} labels vs {} predictions",
            labels.len(),
            preds.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Data("metrics: empty evaluation set".to_string()));
    }
    if let Some(&bad) = labels.iter().chain(preds.iter()).find(|&&v| v >= num_classes) {
        return Err(Error::Data(format!("metrics: class index {bad} >= {num_classes}")));
    }
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fn_ = vec![0usize; num_classes];
    for (&l, &p) in labels.iter().zip(preds) {
        if l == p {
            tp[l] += 1;
        } else {
            fp[p] += 1;
            fn_[l] += 1;
        }
    }
    let (mut sp, mut sr, mut sf) = (0.0, 0.0, 0.0);
    for c in 0..num_classes {
        let p = safe_div(tp[c] as f64, (tp[c] + fp[c]) as f64);
        let r = safe_div(tp[c] as f64, (tp[c] + fn_[c]) as f64);
        sp += p;
        sr += r;
        sf += f1_of(p, r);
    }
    let n = num_classes as f64;
    Ok(Metrics { precision: sp / n, recall: sr / n, f1: sf / n })
}

/// F1 of class 1 in a binary task.
pub fn binary_positive_f1(labels: &[usize], preds: &[usize]) -> Result<f64> {
    if labels.len() != preds.len() || labels.is_empty() {
        return Err(Error::Data("metrics: empty or mismatched binary inputs".to_string()));
    }
    let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
    for (&l, &p) in labels.iter().zip(preds) {
        match (l, p) {
            (1, 1) => tp += 1.0,
            (0, 1) => fp += 1.0,
            (1, 0) => fn_ += 1.0,
            (0, 0) => {}
            _ => return Err(Error::Data("metrics: binary task saw class > 1".to_string())),
        }
    }
    let p = safe_div(tp, tp + fp);
    let r = safe_div(tp, tp + fn_);
    Ok(f1_of(p, r))
}

// ============================================================
// Evaluation
// ============================================================

/// Evaluation partition: everything, flag=1 samples, or flag=0 samples.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Scope {
    Entire,
    Subset1,
    Subset2,
}

impl Scope {
    pub const ALL: [Scope; 3] = [Scope::Entire, Scope::Subset1, Scope::Subset2];

    pub fn name(self) -> &'static str {
        match self {
            Scope::Entire => "entire",
            Scope::Subset1 => "subset1",
            Scope::Subset2 => "subset2",
        }
    }

    pub fn parse(s: &str) -> Result<Scope> {
        match s {
            "entire" => Ok(Scope::Entire),
            "subset1" => Ok(Scope::Subset1),
            "subset2" => Ok(Scope::Subset2),
            other => Err(Error::Config(format!(
                "scope '{other}' is not one of entire|subset1|subset2|all"
            ))),
        }
    }
}

/// Metrics for one scope; `metrics` is `None` when the scope holds no
/// samples (absent, not zero).
#[derive(Clone, Copy, Debug)]
pub struct ScopeRow {
    pub scope: Scope,
    pub metrics: Option<Metrics>,
    pub n: usize,
}

/// Eval-mode predictions for every sample of a bundle, in bundle order.
pub fn predict_all(net: &CuciNet, store: &ParamStore, bundle: &DatasetBundle) -> Result<Vec<usize>> {
    bundle
        .samples
        .iter()
        .map(|s| {
            let joint = prepare_joint(s, &net.config)?;
            net.predict(store, &joint)
        })
        .collect()
}

/// Index partition by sarcasm flag: (flag=1, flag=0), bundle order. Mirrors
/// the subset splitter's strictness: every sample must carry a 0/1 flag.
fn flag_partition(bundle: &DatasetBundle) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut ones = Vec::new();
    let mut zeros = Vec::new();
    for (i, s) in bundle.samples.iter().enumerate() {
        match s.sarcasm_flag {
            Some(1) => ones.push(i),
            Some(0) => zeros.push(i),
            Some(other) => {
                return Err(Error::Data(format!(
                    "evaluate: sample '{}' has sarcasm flag {other} (want 0 or 1)",
                    s.sample_id
                )))
            }
            None => {
                return Err(Error::Data(format!(
                    "evaluate: sample '{}' is missing its sarcasm flag",
                    s.sample_id
                )))
            }
        }
    }
    Ok((ones, zeros))
}

/// One eval-mode pass over a bundle, reported per requested scope.
pub fn evaluate(
    net: &CuciNet,
    store: &ParamStore,
    bundle: &DatasetBundle,
    scopes: &[Scope],
) -> Result<Vec<ScopeRow>> {
    let preds = predict_all(net, store, bundle)?;
    let labels: Vec<usize> = bundle.samples.iter().map(|s| s.label).collect();
    let subset_indices = if scopes.iter().any(|s| *s != Scope::Entire) {
        Some(flag_partition(bundle)?)
    } else {
        None
    };
    let mut rows = Vec::with_capacity(scopes.len());
    for &scope in scopes {
        let indices: Vec<usize> = match (scope, &subset_indices) {
            (Scope::Entire, _) => (0..labels.len()).collect(),
            (Scope::Subset1, Some((ones, _))) => ones.clone(),
            (Scope::Subset2, Some((_, zeros))) => zeros.clone(),
            (_, None) => unreachable!("subset indices computed above"),
        };
        let metrics = if indices.is_empty() {
            None
        } else {
            let l: Vec<usize> = indices.iter().map(|&i| labels[i]).collect();
            let p: Vec<usize> = indices.iter().map(|&i| preds[i]).collect();
            Some(macro_metrics(&l, &p, bundle.num_classes)?)
        };
        rows.push(ScopeRow { scope, metrics, n: indices.len() });
    }
    Ok(rows)
}

// ============================================================
// Early stopping
// ============================================================

/// What one observed validation score means for the run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopSignal {
    /// Score strictly improved on the best seen so far.
    pub improved: bool,
    /// The run should stop after this epoch.
    pub stop: bool,
}

/// Strict-improvement early stopping: stops once the monitored score has
/// gone `patience` consecutive epochs without exceeding its best.
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> EarlyStopper {
        assert!(patience >= 1);
        EarlyStopper { patience, best: f64::NEG_INFINITY, best_epoch: 0, stale: 0 }
    }

    pub fn observe(&mut self, epoch: usize, score: f64) -> StopSignal {
        if score > self.best {
            self.best = score;
            self.best_epoch = epoch;
            self.stale = 0;
            StopSignal { improved: true, stop: false }
        } else {
            self.stale += 1;
            StopSignal { improved: false, stop: self.stale >= self.patience }
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

// ============================================================
// Training loop
// ============================================================

/// One epoch's history row. Learning rates are the values at the epoch's
/// first step; `val_f1` is a fraction.
#[derive(Clone, Copy, Debug)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_f1: f64,
    pub lr_nonverbal: f64,
    pub lr_rest: f64,
    pub lambda_bias: f64,
}

/// Everything a finished run leaves behind.
pub struct RunArtifacts {
    pub out_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub best_epoch: usize,
    /// Best validation macro-F1, as a fraction.
    pub best_val_f1: f64,
    pub epochs_run: usize,
    pub history: Vec<EpochRecord>,
    /// Test metrics of the best checkpoint (empty when the bundle has no
    /// test split).
    pub test: Vec<ScopeRow>,
}

fn percent(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut out = String::from("epoch,train_loss,val_f1,lr_nonverbal,lr_rest,lambda_bias\n");
    for r in history {
        let _ = writeln!(
            out,
            "{},{:.6},{},{:.8e},{:.8e},{:.6}",
            r.epoch,
            r.train_loss,
            percent(r.val_f1),
            r.lr_nonverbal,
            r.lr_rest,
            r.lambda_bias
        );
    }
    fs::write(path, out)?;
    Ok(())
}

fn write_metrics_csv(path: &Path, rows: &[ScopeRow], epoch: usize) -> Result<()> {
    let mut out = String::from("scope,precision,recall,f1,epoch\n");
    for row in rows {
        if let Some(m) = row.metrics {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                row.scope.name(),
                percent(m.precision),
                percent(m.recall),
                percent(m.f1),
                epoch
            );
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Mean routing coefficient per (branch, modality, layer) for one epoch.
struct RhoAccumulator {
    sums: std::collections::BTreeMap<(u8, u8, usize), (f64, usize)>,
}

impl RhoAccumulator {
    fn new() -> Self {
        RhoAccumulator { sums: Default::default() }
    }

    fn add(&mut self, branch_idx: u8, modality_idx: u8, layer: usize, rho: f64) {
        let e = self.sums.entry((branch_idx, modality_idx, layer)).or_insert((0.0, 0));
        e.0 += rho;
        e.1 += 1;
    }
}

fn branch_label(idx: u8) -> &'static str {
    if idx == 0 {
        "primary"
    } else {
        "structure"
    }
}

fn modality_label(idx: u8) -> &'static str {
    ["t", "a", "v"][idx as usize]
}

fn modality_index(m: Modality) -> u8 {
    match m {
        Modality::Text => 0,
        Modality::Audio => 1,
        Modality::Visual => 2,
    }
}

/// Trains on the bundle's train split, monitoring macro-F1 on its val split.
/// Returns the run artifacts; all file outputs land in `out_dir`.
pub fn train(bundle: &DatasetBundle, config: &RunConfig, out_dir: &Path) -> Result<RunArtifacts> {
    config.validate()?;
    if bundle.dims != config.model.input_dims {
        return Err(Error::Config(format!(
            "train: bundle dims ({},{},{}) do not match the configured input dims ({},{},{})",
            bundle.dims.t,
            bundle.dims.a,
            bundle.dims.v,
            config.model.input_dims.t,
            config.model.input_dims.a,
            config.model.input_dims.v
        )));
    }
    if bundle.num_classes != config.model.num_classes {
        return Err(Error::Config(format!(
            "train: bundle has {} classes, config declares {}",
            bundle.num_classes, config.model.num_classes
        )));
    }
    let train_idx = bundle.split_indices(Split::Train);
    let val_idx = bundle.split_indices(Split::Val);
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::Data("train: train and val splits must be non-empty".to_string()));
    }

    fs::create_dir_all(out_dir)?;
    let echo = serde_json::to_string_pretty(config)
        .map_err(|e| Error::Config(format!("train: config echo failed: {e}")))?;
    fs::write(out_dir.join("config.json"), echo + "\n")?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut store = ParamStore::new();
    let net = CuciNet::new(&mut store, &mut rng, &config.model)?;

    let joints: Vec<_> = bundle
        .samples
        .iter()
        .map(|s| prepare_joint(s, &config.model))
        .collect::<Result<_>>()?;
    let val_bundle = bundle.subset(&val_idx);

    let optim = &config.optim;
    let steps_per_epoch = train_idx.len().div_ceil(optim.batch_size);
    let t_total = optim.max_epochs * steps_per_epoch;
    let tau_end = config.tau_end();

    let mut adam = Adam::new(&store);
    let mut grad_acc: Vec<Array2<f64>> =
        store.iter().map(|(_, e)| Array2::zeros(e.value.dim())).collect();
    let mut stopper = EarlyStopper::new(optim.patience);
    let mut history = Vec::new();
    let mut rho_csv = String::from("epoch,branch,modality,layer,mean_rho\n");
    let checkpoint_path = out_dir.join("best.ckpt");

    let mut global_step = 0usize;
    let mut order = train_idx.clone();
    let mut epochs_run = 0usize;
    for epoch in 0..optim.max_epochs {
        epochs_run = epoch + 1;
        let lambda_bias = lambda_bias_at(optim.lambda_bias0, epoch, tau_end);
        let epoch_lr =
            (cosine_lr(optim.lr_nonverbal, global_step, t_total), cosine_lr(optim.lr_rest, global_step, t_total));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut rho_acc = RhoAccumulator::new();
        for batch in order.chunks(optim.batch_size) {
            let lr = (
                cosine_lr(optim.lr_nonverbal, global_step, t_total),
                cosine_lr(optim.lr_rest, global_step, t_total),
            );
            let batch_rng = ChaCha8Rng::seed_from_u64(rng.gen());
            let mut ctx = Ctx::train(&store, config.model.dropout, batch_rng);
            let mut total: Option<crate::tape::Var> = None;
            for &i in batch {
                let loss = sample_loss(&mut ctx, &net, &joints[i], optim.lambda_gate, lambda_bias)?;
                for trace in loss.output.rho_traces() {
                    rho_acc.add(
                        if trace.branch == crate::model::stage1::Branch::Primary { 0 } else { 1 },
                        modality_index(trace.modality),
                        trace.layer,
                        ctx.tape.value(trace.rho)[[0, 0]],
                    );
                }
                total = Some(match total {
                    None => loss.total,
                    Some(t) => ctx.tape.add(t, loss.total),
                });
            }
            let total = total.expect("batches are non-empty");
            let mean = ctx.tape.scale(total, 1.0 / batch.len() as f64);
            let loss_value = ctx.tape.value(mean)[[0, 0]];
            if !loss_value.is_finite() {
                return Err(Error::Numerical(format!(
                    "training diverged at step {global_step}: loss is not finite"
                )));
            }
            loss_sum += loss_value * batch.len() as f64;

            let grads = ctx.tape.backward(mean);
            for g in &mut grad_acc {
                g.fill(0.0);
            }
            ctx.accumulate_param_grads(&grads, &mut grad_acc);
            drop(ctx);
            adam.step(&mut store, &grad_acc, lr);
            global_step += 1;
        }

        let val_rows = evaluate(&net, &store, &val_bundle, &[Scope::Entire])?;
        let val_f1 = val_rows[0].metrics.expect("val split is non-empty").f1;
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train_idx.len() as f64,
            val_f1,
            lr_nonverbal: epoch_lr.0,
            lr_rest: epoch_lr.1,
            lambda_bias,
        });
        for ((b, m, l), (sum, count)) in &rho_acc.sums {
            let _ = writeln!(
                rho_csv,
                "{},{},{},{},{:.6}",
                epoch,
                branch_label(*b),
                modality_label(*m),
                l,
                sum / *count as f64
            );
        }

        let signal = stopper.observe(epoch, val_f1);
        if signal.improved {
            checkpoint::save(&checkpoint_path, &config.model, epoch, &store)?;
        }
        if signal.stop {
            break;
        }
    }

    write_history_csv(&out_dir.join("history.csv"), &history)?;
    fs::write(out_dir.join("rho_trace.csv"), rho_csv)?;

    // Test metrics come from the best checkpoint, not the final parameters.
    let best = checkpoint::load(&checkpoint_path)?;
    let test_idx = bundle.split_indices(Split::Test);
    let test = if test_idx.is_empty() {
        Vec::new()
    } else {
        let test_bundle = bundle.subset(&test_idx);
        let rows = evaluate(&best.net, &best.store, &test_bundle, &Scope::ALL)?;
        write_metrics_csv(&out_dir.join("metrics.csv"), &rows, best.epoch)?;
        rows
    };

    Ok(RunArtifacts {
        out_dir: out_dir.to_path_buf(),
        checkpoint: checkpoint_path,
        best_epoch: stopper.best_epoch(),
        best_val_f1: stopper.best(),
        epochs_run,
        history,
        test,
    })
}

// ============================================================
// Ablation runner
// ============================================================

/// Artifacts of a side-by-side ablation comparison.
pub struct AblationArtifacts {
    pub full: RunArtifacts,
    pub variant: RunArtifacts,
    pub comparison_csv: PathBuf,
}

/// Trains the unmodified config and the named variant under the same seed,
/// writing `full/` and `variant/` run directories plus `comparison.csv`.
pub fn run_ablation(
    bundle: &DatasetBundle,
    base: &RunConfig,
    variant_id: &str,
    out_dir: &Path,
) -> Result<AblationArtifacts> {
    let variant_model = apply_variant(&base.model, variant_id)?;
    fs::create_dir_all(out_dir)?;

    let full = train(bundle, base, &out_dir.join("full"))?;
    let variant_config = RunConfig { model: variant_model, ..base.clone() };
    let variant = train(bundle, &variant_config, &out_dir.join("variant"))?;

    let mut out = String::from("model,scope,precision,recall,f1\n");
    for (name, run) in [("full", &full), (variant_id, &variant)] {
        for row in &run.test {
            if let Some(m) = row.metrics {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{}",
                    name,
                    row.scope.name(),
                    percent(m.precision),
                    percent(m.recall),
                    percent(m.f1)
                );
            }
        }
    }
    let comparison_csv = out_dir.join("comparison.csv");
    fs::write(&comparison_csv, out)?;
    Ok(AblationArtifacts { full, variant, comparison_csv })
}
