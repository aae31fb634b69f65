//! Training losses: supervised cross-entropy, class-conditional kernel mean
//! discrepancy between domains, and KL consistency under augmentation.

use serde::{Deserialize, Serialize};

use crate::autodiff::{pairwise_sq_dists, Array, Tape, Var};
use crate::error::{ensure, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bandwidth {
    /// Per-batch median heuristic over the union of both domains.
    Median,
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub bandwidth: Bandwidth,
    /// Added to the diagonals of the within-domain kernel matrices.
    pub lambda: f64,
    /// Classes with fewer samples in either domain are skipped.
    pub min_class_count: usize,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            bandwidth: Bandwidth::Median,
            lambda: 0.30,
            min_class_count: 2,
        }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<()> {
        if let Bandwidth::Fixed(g) = self.bandwidth {
            ensure!(g.is_finite() && g > 0.0, "fixed kernel bandwidth must be positive");
        }
        ensure!(self.lambda.is_finite() && self.lambda >= 0.0, "lambda must be non-negative");
        ensure!(self.min_class_count >= 1, "min class count must be at least 1");
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub beta0: f64,
    pub beta1: f64,
    /// Linear warm-up length for `beta0`; 0 keeps it constant.
    pub ramp_epochs: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            beta0: 1.0,
            beta1: 1.0,
            ramp_epochs: 0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.beta0.is_finite() && self.beta0 >= 0.0 && self.beta1.is_finite() && self.beta1 >= 0.0,
            "loss weights must be non-negative"
        );
        Ok(())
    }

    pub fn effective_beta0(&self, epoch: usize) -> f64 {
        if self.ramp_epochs == 0 {
            self.beta0
        } else {
            self.beta0 * (epoch as f64 / self.ramp_epochs as f64).min(1.0)
        }
    }
}

fn check_labels(rows: usize, labels: &[usize], num_classes: usize) -> Result<()> {
    ensure!(rows > 0, "empty batch");
    ensure!(
        labels.len() == rows,
        "{} labels for {rows} rows",
        labels.len()
    );
    ensure!(
        labels.iter().all(|&y| y < num_classes),
        "label out of range for {num_classes} classes"
    );
    Ok(())
}

/// `-(1/B) sum_i log p_i[y_i]` with probabilities clamped at the log floor.
pub fn ce_loss(tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<Var> {
    let (b, c) = {
        let p = tape.value(probs);
        ensure!(p.ndim() == 2, "probabilities must be [B, c]");
        (p.rows(), p.cols())
    };
    check_labels(b, labels, c)?;
    let mut onehot = Array::zeros(&[b, c]);
    for (i, &y) in labels.iter().enumerate() {
        onehot.data_mut()[i * c + y] = 1.0;
    }
    let lp = tape.log(probs)?;
    let picked = tape.mul_const(lp, onehot)?;
    let s = tape.sum(picked)?;
    tape.scale(s, -1.0 / b as f64)
}

/// `exp(-gamma |a_i - b_j|^2)` for every pair of rows.
pub fn rbf_kernel(tape: &mut Tape, a: Var, b: Var, gamma: f64) -> Result<Var> {
    ensure!(gamma > 0.0 && gamma.is_finite(), "kernel bandwidth must be positive");
    let d = tape.pairwise_sq_dists(a, b)?;
    let s = tape.scale(d, -gamma)?;
    tape.exp(s)
}

pub fn rbf_kernel_values(a: &Array, b: &Array, gamma: f64) -> Result<Array> {
    ensure!(gamma > 0.0 && gamma.is_finite(), "kernel bandwidth must be positive");
    Ok(pairwise_sq_dists(a, b)?.map(|d| (-gamma * d).exp()))
}

/// `1 / (2 median(d))` over the non-zero pairwise squared distances; 1 when
/// every point coincides.
pub fn median_heuristic_gamma(points: &Array) -> Result<f64> {
    ensure!(
        points.ndim() == 2 && points.rows() >= 2,
        "median heuristic needs at least 2 points"
    );
    let d = pairwise_sq_dists(points, points)?;
    let n = points.rows();
    let mut vals: Vec<f64> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .map(|(i, j)| d.get2(i, j))
        .filter(|&v| v > 0.0)
        .collect();
    if vals.is_empty() {
        return Ok(1.0);
    }
    vals.sort_by(f64::total_cmp);
    let m = vals.len();
    let med = if m % 2 == 1 {
        vals[m / 2]
    } else {
        0.5 * (vals[m / 2 - 1] + vals[m / 2])
    };
    Ok(1.0 / (2.0 * med))
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct KcmmdDiagnostics {
    pub gamma: f64,
    /// `(class, discrepancy)` for every class that entered the loss.
    pub per_class: Vec<(usize, f64)>,
    pub skipped: Vec<usize>,
}

impl KcmmdDiagnostics {
    pub fn classes_used(&self) -> usize {
        self.per_class.len()
    }
}

/// Source and target embeddings with their (pseudo-)labels.
pub struct KcmmdInput<'a> {
    pub source: Var,
    pub source_labels: &'a [usize],
    pub target: Var,
    pub target_labels: &'a [usize],
    /// Target rows with `false` are ignored.
    pub target_mask: &'a [bool],
    pub num_classes: usize,
}

fn class_rows(labels: &[usize], mask: Option<&[bool]>, class: usize) -> Vec<usize> {
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| y == class && mask.is_none_or(|m| m[i]))
        .map(|(i, _)| i)
        .collect()
}

/// Mean over qualifying classes of
/// `mean(K_ss + lambda I) + mean(K_tt + lambda I) - 2 mean(K_st)`.
pub fn kcmmd_loss(
    tape: &mut Tape,
    input: &KcmmdInput<'_>,
    cfg: &KernelConfig,
) -> Result<(Var, KcmmdDiagnostics)> {
    cfg.validate()?;
    let (zs, zt) = (tape.value(input.source).clone(), tape.value(input.target).clone());
    ensure!(
        zs.ndim() == 2 && zt.ndim() == 2 && zs.cols() == zt.cols(),
        "embedding dimensions differ: {:?} vs {:?}",
        zs.shape(),
        zt.shape()
    );
    check_labels(zs.rows(), input.source_labels, input.num_classes)?;
    check_labels(zt.rows(), input.target_labels, input.num_classes)?;
    ensure!(input.target_mask.len() == zt.rows(), "mask length mismatch");

    let gamma = match cfg.bandwidth {
        Bandwidth::Fixed(g) => g,
        Bandwidth::Median => {
            let mut all = zs.data().to_vec();
            all.extend_from_slice(zt.data());
            median_heuristic_gamma(&Array::new(vec![zs.rows() + zt.rows(), zs.cols()], all)?)?
        }
    };
    let mut diag = KcmmdDiagnostics {
        gamma,
        ..Default::default()
    };
    let mut total: Option<Var> = None;
    for c in 0..input.num_classes {
        let si = class_rows(input.source_labels, None, c);
        let ti = class_rows(input.target_labels, Some(input.target_mask), c);
        if si.len() < cfg.min_class_count || ti.len() < cfg.min_class_count {
            diag.skipped.push(c);
            continue;
        }
        let s = tape.select_rows(input.source, &si)?;
        let t = tape.select_rows(input.target, &ti)?;
        let kss = rbf_kernel(tape, s, s, gamma)?;
        let ktt = rbf_kernel(tape, t, t, gamma)?;
        let kst = rbf_kernel(tape, s, t, gamma)?;
        let mss = tape.mean(kss)?;
        let mtt = tape.mean(ktt)?;
        let mst = tape.mean(kst)?;
        let within = tape.add(mss, mtt)?;
        let cross = tape.scale(mst, 2.0)?;
        let d = tape.sub(within, cross)?;
        // The regularized diagonal adds lambda * n to a sum of n^2 entries.
        let reg = cfg.lambda / si.len() as f64 + cfg.lambda / ti.len() as f64;
        let d = tape.add_scalar(d, reg)?;
        diag.per_class.push((c, tape.scalar(d)?));
        total = Some(match total {
            None => d,
            Some(acc) => tape.add(acc, d)?,
        });
    }
    let loss = match total {
        None => tape.constant(Array::scalar(0.0))?,
        Some(sum) => tape.scale(sum, 1.0 / diag.per_class.len() as f64)?,
    };
    Ok((loss, diag))
}

/// Value-only evaluation of [`kcmmd_loss`].
pub fn kcmmd_value(
    source: &Array,
    source_labels: &[usize],
    target: &Array,
    target_labels: &[usize],
    target_mask: &[bool],
    num_classes: usize,
    cfg: &KernelConfig,
) -> Result<(f64, KcmmdDiagnostics)> {
    let mut tape = Tape::new();
    let s = tape.constant(source.clone())?;
    let t = tape.constant(target.clone())?;
    let input = KcmmdInput {
        source: s,
        source_labels,
        target: t,
        target_labels,
        target_mask,
        num_classes,
    };
    let (l, d) = kcmmd_loss(&mut tape, &input, cfg)?;
    Ok((tape.scalar(l)?, d))
}

/// Unbiased per-class estimator (self-pairs excluded, no regularization),
/// averaged over classes with at least 2 samples in both domains. For
/// diagnostics only.
pub fn kcmmd_unbiased(
    source: &Array,
    source_labels: &[usize],
    target: &Array,
    target_labels: &[usize],
    num_classes: usize,
    gamma: f64,
) -> Result<f64> {
    ensure!(source.cols() == target.cols(), "embedding dimensions differ");
    check_labels(source.rows(), source_labels, num_classes)?;
    check_labels(target.rows(), target_labels, num_classes)?;
    let off_diag_mean = |k: &Array| {
        let n = k.rows();
        let s: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| k.get2(i, j))
            .sum();
        s / (n * (n - 1)) as f64
    };
    let mut acc = 0.0;
    let mut used = 0;
    for c in 0..num_classes {
        let si = class_rows(source_labels, None, c);
        let ti = class_rows(target_labels, None, c);
        if si.len() < 2 || ti.len() < 2 {
            continue;
        }
        let s = source.select_rows(&si)?;
        let t = target.select_rows(&ti)?;
        acc += off_diag_mean(&rbf_kernel_values(&s, &s, gamma)?)
            + off_diag_mean(&rbf_kernel_values(&t, &t, gamma)?)
            - 2.0 * rbf_kernel_values(&s, &t, gamma)?.mean();
        used += 1;
    }
    Ok(if used == 0 { 0.0 } else { acc / used as f64 })
}

/// Mean over rows of `KL(p_orig || p_aug)`. With `stop_grad` the original
/// predictions act as a fixed target.
pub fn consistency_loss(tape: &mut Tape, p_orig: Var, p_aug: Var, stop_grad: bool) -> Result<Var> {
    let (a, b) = (tape.value(p_orig), tape.value(p_aug));
    if a.shape() != b.shape() || a.ndim() != 2 {
        return Err(Error::Shape {
            op: "consistency_loss",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let rows = a.rows();
    let p = if stop_grad { tape.detach(p_orig) } else { p_orig };
    let lp = tape.log(p)?;
    let lq = tape.log(p_aug)?;
    let diff = tape.sub(lp, lq)?;
    let kl = tape.mul(p, diff)?;
    let s = tape.sum(kl)?;
    tape.scale(s, 1.0 / rows as f64)
}

/// `L_SL + beta0(epoch) L_kCMMD + beta1 L_C`.
pub fn overall_loss(l_sl: f64, l_kcmmd: f64, l_c: f64, w: &LossWeights, epoch: usize) -> f64 {
    l_sl + w.effective_beta0(epoch) * l_kcmmd + w.beta1 * l_c
}
