//! Joint optimization: supervised source loss, class-conditional alignment
//! against ensembled pseudo-labels, and augmentation consistency, under Adam.

mod adam;
mod grid;

pub use adam::Adam;
pub use grid::{grid_search, Grid, GridPoint, GridResult, WindowParams};

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::augment::{augment_batch, AugmentConfig};
use crate::autodiff::{Array, BatchStats, Tape, Var};
use crate::data::{PreparedData, WindowedDataset};
use crate::ensemble::{EnsembleConfig, EnsembleState};
use crate::error::{ensure, Error, Result, Warning};
use crate::eval::MetricReport;
use crate::losses::{ce_loss, consistency_loss, kcmmd_loss, KcmmdInput, KernelConfig, LossWeights};
use crate::model::{Architecture, Mode, Model, Parameters};
use crate::seeds;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    /// Initial learning rate, decayed along a half cosine.
    pub learning_rate: f64,
    /// Learning rate reached at the last epoch (capped at `learning_rate`).
    pub final_learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 0.001,
            final_learning_rate: 0.0003,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 64,
            max_epochs: 128,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.learning_rate.is_finite() && self.learning_rate >= 0.0,
            "learning rate must be finite and non-negative"
        );
        ensure!(
            self.final_learning_rate.is_finite() && self.final_learning_rate >= 0.0,
            "final learning rate must be finite and non-negative"
        );
        ensure!(
            (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0,
            "invalid Adam moment parameters"
        );
        ensure!(self.batch_size >= 2, "batch size must be at least 2");
        ensure!(self.max_epochs >= 1, "need at least one epoch");
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let hi = self.learning_rate;
        let lo = self.final_learning_rate.min(hi);
        if self.max_epochs <= 1 {
            return hi;
        }
        let frac = epoch.min(self.max_epochs - 1) as f64 / (self.max_epochs - 1) as f64;
        lo + 0.5 * (hi - lo) * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

/// Which loss terms are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// Supervised source loss only.
    Baseline,
    /// Adds pseudo-label bookkeeping; the objective is unchanged.
    Te,
    /// Adds the class-conditional alignment term.
    TeKcmmd,
    /// Adds the consistency term.
    Full,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] = [
        AblationMode::Baseline,
        AblationMode::Te,
        AblationMode::TeKcmmd,
        AblationMode::Full,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::Baseline => "baseline",
            AblationMode::Te => "te",
            AblationMode::TeKcmmd => "te_kcmmd",
            AblationMode::Full => "full",
        }
    }

    fn aligns(self) -> bool {
        matches!(self, AblationMode::TeKcmmd | AblationMode::Full)
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingOptions {
    pub mode: AblationMode,
    /// Epochs without a strict validation improvement before stopping.
    pub patience: usize,
    /// Treat the un-augmented prediction as a fixed target in the
    /// consistency term.
    pub consistency_stop_grad: bool,
    /// Maintain the prediction ensemble (required for alignment).
    pub ensembling: bool,
}

impl Default for TrainingOptions {
    fn default() -> Self {
        TrainingOptions {
            mode: AblationMode::Full,
            patience: 20,
            consistency_stop_grad: true,
            ensembling: true,
        }
    }
}

/// Everything a training run needs apart from the data.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub training: TrainingOptions,
    pub model: Architecture,
    pub kernel: KernelConfig,
    pub weights: LossWeights,
    pub ensemble: EnsembleConfig,
    pub augment: AugmentConfig,
    pub optimizer: OptimizerConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        self.weights.validate()?;
        self.ensemble.validate()?;
        self.augment.validate()?;
        self.optimizer.validate()
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Windows a run trains and validates on.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainData {
    pub source_train: WindowedDataset,
    pub source_val: WindowedDataset,
    /// Unlabeled target windows.
    pub target: WindowedDataset,
    /// Hidden target labels, used only for reporting.
    pub target_labels: Option<Vec<usize>>,
}

impl From<&PreparedData> for TrainData {
    fn from(p: &PreparedData) -> Self {
        TrainData {
            source_train: p.source_train.clone(),
            source_val: p.source_val.clone(),
            target: p.target.unlabeled(),
            target_labels: p.target_labels.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub l_sl: f64,
    /// Mean over the batches where the alignment term was computed.
    pub l_kcmmd: f64,
    pub l_c: f64,
    pub total: f64,
    pub val_f1: Option<f64>,
    pub target_f1: Option<f64>,
    pub mean_entropy: Option<f64>,
    /// Batches in which the alignment term was computed.
    pub kcmmd_batches: usize,
    /// Mean number of classes entering the alignment term per such batch.
    pub kcmmd_classes: f64,
    /// Batches that ran an optimizer step.
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_f1: Option<f64>,
    pub stopped_early: bool,
    pub warnings: Vec<String>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

impl TrainReport {
    pub const CSV_HEADER: &'static str = "epoch,learning_rate,l_sl,l_kcmmd,l_c,total,val_f1,target_f1,mean_entropy,kcmmd_batches,kcmmd_classes,steps";

    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for r in &self.epochs {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                r.epoch,
                r.learning_rate,
                r.l_sl,
                r.l_kcmmd,
                r.l_c,
                r.total,
                opt(r.val_f1),
                opt(r.target_f1),
                opt(r.mean_entropy),
                r.kcmmd_batches,
                r.kcmmd_classes,
                r.steps
            )?;
        }
        Ok(())
    }

    pub fn final_target_f1(&self) -> Option<f64> {
        self.epochs.get(self.best_epoch).and_then(|r| r.target_f1)
    }
}

pub struct TrainOutcome {
    pub model: Model,
    /// Parameters from the best validation epoch.
    pub params: Parameters,
    /// Parameters after the last completed epoch.
    pub last_params: Parameters,
    pub ensemble: Option<EnsembleState>,
    pub report: TrainReport,
}

/// Called after every epoch with the new record and the ensemble, if any.
pub type EpochObserver<'a> = dyn FnMut(&EpochRecord, Option<&EnsembleState>) -> Result<()> + 'a;

pub fn train(data: &TrainData, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(data, cfg, &mut |_, _| Ok(()))
}

fn positions(perm: &[usize], batch: usize, size: usize) -> Vec<usize> {
    (0..size).map(|i| perm[(batch * size + i) % perm.len()]).collect()
}

fn shuffled(n: usize, seed: u64, tag: &str, epoch: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut seeds::rng(seed, tag, epoch as u64, 0));
    p
}

fn all_indices(ds: &WindowedDataset) -> Vec<usize> {
    (0..ds.len()).collect()
}

fn check_data(data: &TrainData) -> Result<()> {
    let s = &data.source_train;
    ensure!(s.len() >= 2, "need at least 2 source training windows");
    ensure!(data.target.len() >= 2, "need at least 2 target windows");
    for d in [&data.source_val, &data.target] {
        ensure!(
            d.channels == s.channels && d.window_len == s.window_len,
            "domains disagree on shape: [{}, {}] vs [{}, {}]",
            d.channels,
            d.window_len,
            s.channels,
            s.window_len
        );
    }
    ensure!(
        s.windows.iter().all(|w| w.label.is_some()),
        "source training windows must be labeled"
    );
    ensure!(
        data.target.windows.iter().all(|w| w.label.is_none()),
        "target windows must be unlabeled; pass labels separately"
    );
    if let Some(l) = &data.target_labels {
        ensure!(l.len() == data.target.len(), "hidden target label count mismatch");
    }
    Ok(())
}

/// Train with a per-epoch observer.
pub fn train_with(
    data: &TrainData,
    cfg: &TrainConfig,
    observer: &mut EpochObserver<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_data(data)?;
    let src = &data.source_train;
    let tgt = &data.target;
    let model = Model::new(cfg.model.build(src.channels, src.window_len, src.num_classes))?;
    let seed = cfg.optimizer.seed;
    let mut params = model.init(seeds::derive(seed, "init", 0, 0))?;
    let mut adam = Adam::new(&params, &cfg.optimizer);
    let mode = cfg.training.mode;
    let ensembling = mode != AblationMode::Baseline && cfg.training.ensembling;
    let mut ensemble = if ensembling {
        Some(EnsembleState::new(tgt.len(), src.num_classes, cfg.ensemble.alpha)?)
    } else {
        None
    };
    let mut report = TrainReport::default();
    if mode.aligns() && !ensembling && cfg.weights.beta0 > 0.0 {
        report.warnings.push(
            Warning::emit("alignment requested without ensembling; the term stays inactive").0,
        );
    }
    let src_labels: Vec<usize> = src.windows.iter().map(|w| w.label.unwrap()).collect();
    let val_labels = data.source_val.labels();
    if data.source_val.is_empty() {
        report.warnings.push(
            Warning::emit("empty validation split; keeping the last epoch").0,
        );
    }
    let val_x = (!data.source_val.is_empty()).then(|| data.source_val.batch(&all_indices(&data.source_val)));
    let tgt_x = tgt.batch(&all_indices(tgt));

    let bs = cfg.optimizer.batch_size.min(src.len());
    let bt = cfg.optimizer.batch_size.min(tgt.len());
    let batches = src.len().div_ceil(bs).max(tgt.len().div_ceil(bt));
    let mut pseudo: Option<(Vec<usize>, Vec<bool>)> = None;
    let mut best: Option<(f64, Parameters, usize)> = None;
    let mut since_improvement = 0;

    for epoch in 0..cfg.optimizer.max_epochs {
        let lr = cfg.optimizer.learning_rate_at(epoch);
        let ps = shuffled(src.len(), seed, "shuffle-source", epoch);
        let pt = shuffled(tgt.len(), seed, "shuffle-target", epoch);
        let beta0 = cfg.weights.effective_beta0(epoch);
        let align = mode.aligns() && beta0 > 0.0 && pseudo.is_some();
        let consist = mode == AblationMode::Full && cfg.weights.beta1 > 0.0;
        let mut sums = [0.0f64; 4];
        let mut kcmmd_batches = 0;
        let mut kcmmd_classes = 0usize;
        let mut steps = 0;

        for b in 0..batches {
            let (b64, e64) = (b as u64, epoch as u64);
            let si = positions(&ps, b, bs);
            let ys: Vec<usize> = si.iter().map(|&i| src_labels[i]).collect();
            let mut tape = Tape::new();
            let vars = params.register(&mut tape)?;
            let mut stats: Vec<Vec<BatchStats>> = Vec::new();
            let mut pass = |tape: &mut Tape, x: Var, tag: &str| {
                let out = model.forward(tape, &params, &vars, x, Mode::Train, seeds::derive(seed, tag, e64, b64))?;
                stats.push(out.bn_stats.clone());
                Ok::<_, Error>(out)
            };
            let xs_arr = src.batch(&si);
            let xs = tape.constant(xs_arr.clone())?;
            let out_s = pass(&mut tape, xs, "dropout-source")?;
            let l_sl = ce_loss(&mut tape, out_s.probs, &ys)?;
            let mut total = l_sl;
            let (mut v_k, mut v_c) = (0.0, 0.0);
            if align || consist {
                let ti = positions(&pt, b, bt);
                let xt_arr = tgt.batch(&ti);
                let xt = tape.constant(xt_arr.clone())?;
                let out_t = pass(&mut tape, xt, "dropout-target")?;
                if align {
                    let (pl, mask) = pseudo.as_ref().unwrap();
                    let yt: Vec<usize> = ti.iter().map(|&i| pl[i]).collect();
                    let mt: Vec<bool> = ti.iter().map(|&i| mask[i]).collect();
                    let input = KcmmdInput {
                        source: out_s.embedding,
                        source_labels: &ys,
                        target: out_t.embedding,
                        target_labels: &yt,
                        target_mask: &mt,
                        num_classes: src.num_classes,
                    };
                    let (lk, diag) = kcmmd_loss(&mut tape, &input, &cfg.kernel)?;
                    v_k = tape.scalar(lk)?;
                    kcmmd_batches += 1;
                    kcmmd_classes += diag.classes_used();
                    let w = tape.scale(lk, beta0)?;
                    total = tape.add(total, w)?;
                }
                if consist {
                    let stop = cfg.training.consistency_stop_grad;
                    let mut terms = Vec::new();
                    for (x_arr, out, tag) in [
                        (&xs_arr, &out_s, "source"),
                        (&xt_arr, &out_t, "target"),
                    ] {
                        let mut rng = seeds::rng(seed, &format!("augment-{tag}"), e64, b64);
                        let xa = tape.constant(augment_batch(x_arr, &cfg.augment, &mut rng)?)?;
                        // Same dropout mask as the original pass, so the term
                        // only sees the augmentation.
                        let out_a = pass(&mut tape, xa, &format!("dropout-{tag}"))?;
                        terms.push(consistency_loss(&mut tape, out.probs, out_a.probs, stop)?);
                    }
                    let lc = tape.add(terms[0], terms[1])?;
                    v_c = tape.scalar(lc)?;
                    let w = tape.scale(lc, cfg.weights.beta1)?;
                    total = tape.add(total, w)?;
                }
            }
            let v_sl = tape.scalar(l_sl)?;
            let v_total = tape.scalar(total)?;
            let grads = tape.grad(total, &vars.trainable())?;
            if grads.iter().any(|g| !g.is_finite()) {
                report.warnings.push(
                    Warning::emit(format!(
                        "non-finite gradient at epoch {epoch}, batch {b}; epoch aborted"
                    ))
                    .0,
                );
                break;
            }
            adam.step(&mut params, &grads, lr)?;
            for s in &stats {
                params.update_running_stats(s, model.config.bn_momentum);
            }
            for (acc, v) in sums.iter_mut().zip([v_sl, v_k, v_c, v_total]) {
                *acc += v;
            }
            steps += 1;
        }
        if align && kcmmd_batches > 0 && kcmmd_classes == 0 {
            report.warnings.push(
                Warning::emit(format!(
                    "epoch {epoch}: every class was skipped by the alignment term"
                ))
                .0,
            );
        }

        let needs_target_pass = ensemble.is_some() || data.target_labels.is_some();
        let target_probs = if needs_target_pass {
            Some(model.predict(&params, &tgt_x)?.probs)
        } else {
            None
        };
        let mut mean_entropy = None;
        if let (Some(ens), Some(p)) = (ensemble.as_mut(), target_probs.as_ref()) {
            ens.update(p)?;
            pseudo = Some(ens.pseudo_labels(cfg.ensemble.confidence_threshold)?);
            mean_entropy = Some(ens.mean_entropy()?);
        }
        let target_f1 = match (&data.target_labels, &target_probs) {
            (Some(l), Some(p)) => Some(MetricReport::from_probs(l, p)?.macro_f1),
            _ => None,
        };
        let val_f1 = match (&val_x, &val_labels) {
            (Some(x), Some(l)) => Some(MetricReport::from_probs(l, &model.predict(&params, x)?.probs)?.macro_f1),
            _ => None,
        };
        let n = steps.max(1) as f64;
        let record = EpochRecord {
            epoch,
            learning_rate: lr,
            l_sl: sums[0] / n,
            l_kcmmd: if kcmmd_batches > 0 { sums[1] / kcmmd_batches as f64 } else { 0.0 },
            l_c: sums[2] / n,
            total: sums[3] / n,
            val_f1,
            target_f1,
            mean_entropy,
            kcmmd_batches,
            kcmmd_classes: if kcmmd_batches > 0 {
                kcmmd_classes as f64 / kcmmd_batches as f64
            } else {
                0.0
            },
            steps,
        };
        observer(&record, ensemble.as_ref())?;
        report.epochs.push(record);

        let score = val_f1.unwrap_or(f64::NEG_INFINITY);
        match &best {
            Some((b, _, _)) if score < *b => since_improvement += 1,
            Some((b, _, _)) => {
                since_improvement = if score > *b { 0 } else { since_improvement + 1 };
                best = Some((score, params.clone(), epoch));
            }
            None => best = Some((score, params.clone(), epoch)),
        }
        if val_f1.is_some() && since_improvement >= cfg.training.patience {
            report.stopped_early = epoch + 1 < cfg.optimizer.max_epochs;
            break;
        }
    }
    let (score, best_params, best_epoch) = best.expect("at least one epoch");
    report.best_epoch = best_epoch;
    report.best_val_f1 = score.is_finite().then_some(score);
    Ok(TrainOutcome {
        model,
        params: best_params,
        last_params: params,
        ensemble,
        report,
    })
}

/// Target predictions of a trained model, row-aligned with `ds`.
pub fn predict_dataset(model: &Model, params: &Parameters, ds: &WindowedDataset) -> Result<Array> {
    ensure!(!ds.is_empty(), "empty dataset");
    Ok(model.predict(params, &ds.batch(&all_indices(ds)))?.probs)
}
