//! Classification metrics, pseudo-label uncertainty analysis and embedding
//! export.

use std::io::Write;

use serde::Serialize;

use crate::autodiff::Array;
use crate::data::WindowedDataset;
use crate::ensemble::entropy;
use crate::error::{ensure, Result};
use crate::model::{Model, Parameters};

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn support(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    pub fn predicted(&self, class: usize) -> u64 {
        self.counts.iter().map(|r| r[class]).sum()
    }

    /// `true\pred,0,1,...` header then one row per true class.
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        let cols: Vec<String> = (0..self.num_classes).map(|c| c.to_string()).collect();
        writeln!(w, "true\\pred,{}", cols.join(","))?;
        for (i, row) in self.counts.iter().enumerate() {
            let vals: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{i},{}", vals.join(","))?;
        }
        Ok(())
    }
}

pub fn confusion(truth: &[usize], pred: &[usize], num_classes: usize) -> Result<ConfusionMatrix> {
    ensure!(
        truth.len() == pred.len(),
        "{} true labels but {} predictions",
        truth.len(),
        pred.len()
    );
    ensure!(
        truth.iter().chain(pred).all(|&y| y < num_classes),
        "label out of range for {num_classes} classes"
    );
    let mut counts = vec![vec![0u64; num_classes]; num_classes];
    for (&t, &p) in truth.iter().zip(pred) {
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix {
        num_classes,
        counts,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

pub fn per_class(cm: &ConfusionMatrix) -> Vec<ClassMetrics> {
    (0..cm.num_classes)
        .map(|c| {
            let tp = cm.counts[c][c] as f64;
            let support = cm.support(c);
            let predicted = cm.predicted(c);
            let precision = if predicted > 0 { tp / predicted as f64 } else { 0.0 };
            let recall = if support > 0 { tp / support as f64 } else { 0.0 };
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassMetrics {
                class: c,
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect()
}

/// Unweighted mean F1 over classes with non-zero support.
pub fn macro_f1(cm: &ConfusionMatrix) -> Result<f64> {
    let present: Vec<f64> = per_class(cm)
        .into_iter()
        .filter(|m| m.support > 0)
        .map(|m| m.f1)
        .collect();
    ensure!(!present.is_empty(), "macro-F1 of an empty evaluation set");
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    pub mean_entropy: f64,
    pub confusion: ConfusionMatrix,
}

impl MetricReport {
    /// Score probability rows against true labels.
    pub fn from_probs(truth: &[usize], probs: &Array) -> Result<Self> {
        ensure!(probs.ndim() == 2 && probs.rows() == truth.len(), "probabilities do not match labels");
        let pred: Vec<usize> = (0..probs.rows()).map(|r| crate::model::argmax(probs.row(r))).collect();
        let cm = confusion(truth, &pred, probs.cols())?;
        let mut h = 0.0;
        for r in 0..probs.rows() {
            h += entropy(probs.row(r))?;
        }
        Ok(MetricReport {
            macro_f1: macro_f1(&cm)?,
            per_class: per_class(&cm),
            mean_entropy: h / probs.rows() as f64,
            confusion: cm,
        })
    }

    /// `class,precision,recall,f1,support`, then a `macro` row.
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "class,precision,recall,f1,support")?;
        for m in &self.per_class {
            writeln!(w, "{},{},{},{},{}", m.class, m.precision, m.recall, m.f1, m.support)?;
        }
        writeln!(w, "macro,,,{},{}", self.macro_f1, self.confusion.total())?;
        Ok(())
    }
}

/// Evaluate a trained model on a labeled set of windows.
pub fn evaluate(
    model: &Model,
    params: &Parameters,
    ds: &WindowedDataset,
    labels: &[usize],
) -> Result<MetricReport> {
    ensure!(!ds.is_empty(), "nothing to evaluate");
    let idx: Vec<usize> = (0..ds.len()).collect();
    let p = model.predict(params, &ds.batch(&idx))?;
    MetricReport::from_probs(labels, &p.probs)
}

/// Epoch at which the trace settles: the start of the first stretch of
/// `run` consecutive per-epoch changes below `tol`.
pub fn plateau_epoch(trace: &[f64], tol: f64, run: usize) -> Option<usize> {
    let mut streak = 0;
    for e in 1..trace.len() {
        if (trace[e] - trace[e - 1]).abs() < tol {
            streak += 1;
            if streak == run {
                return Some(e - run);
            }
        } else {
            streak = 0;
        }
    }
    None
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AlphaRow {
    pub alpha: f64,
    pub mean_entropy: f64,
    pub plateau_epoch: Option<usize>,
}

/// Run `train(alpha)` for each grid value. It must return the per-epoch
/// mean pseudo-label entropy.
pub fn alpha_uncertainty_sweep(
    alphas: &[f64],
    mut train: impl FnMut(f64) -> Result<Vec<f64>>,
) -> Result<Vec<AlphaRow>> {
    ensure!(!alphas.is_empty(), "empty alpha grid");
    ensure!(
        alphas.iter().all(|&a| a > 0.0 && a < 1.0),
        "alpha values must lie in (0, 1)"
    );
    alphas
        .iter()
        .map(|&alpha| {
            let trace = train(alpha)?;
            ensure!(!trace.is_empty(), "run for alpha {alpha} produced no epochs");
            Ok(AlphaRow {
                alpha,
                mean_entropy: *trace.last().unwrap(),
                plateau_epoch: plateau_epoch(&trace, 1e-3, 3),
            })
        })
        .collect()
}

pub fn write_alpha_rows(rows: &[AlphaRow], w: &mut impl Write) -> Result<()> {
    writeln!(w, "alpha,mean_entropy,plateau_epoch")?;
    for r in rows {
        let p = r.plateau_epoch.map_or(String::new(), |e| e.to_string());
        writeln!(w, "{},{},{}", r.alpha, r.mean_entropy, p)?;
    }
    Ok(())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties. `None` when either
/// side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Eval-mode embeddings, one CSV row per window:
/// `window,e_0..e_{d-1},true_label,pseudo_label` (empty when unknown).
pub fn export_embeddings(
    model: &Model,
    params: &Parameters,
    ds: &WindowedDataset,
    true_labels: Option<&[usize]>,
    pseudo_labels: Option<&[usize]>,
    w: &mut impl Write,
) -> Result<()> {
    for l in [true_labels, pseudo_labels].into_iter().flatten() {
        ensure!(l.len() == ds.len(), "label count does not match window count");
    }
    let dim = model.config.embedding_dim()?;
    let cols: Vec<String> = (0..dim).map(|k| format!("e_{k}")).collect();
    writeln!(w, "window,{},true_label,pseudo_label", cols.join(","))?;
    if ds.is_empty() {
        return Ok(());
    }
    let idx: Vec<usize> = (0..ds.len()).collect();
    let p = model.predict(params, &ds.batch(&idx))?;
    for i in 0..ds.len() {
        let vals: Vec<String> = p.embedding.row(i).iter().map(|v| format!("{v:.17e}")).collect();
        let t = true_labels
            .map(|l| l[i])
            .or(ds.windows[i].label)
            .map_or(String::new(), |v| v.to_string());
        let s = pseudo_labels.map_or(String::new(), |l| l[i].to_string());
        writeln!(w, "{i},{},{t},{s}", vals.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cm(rows: &[&[u64]]) -> ConfusionMatrix {
        ConfusionMatrix {
            num_classes: rows.len(),
            counts: rows.iter().map(|r| r.to_vec()).collect(),
        }
    }

    #[test]
    fn confusion_examples() {
        let c = confusion(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        assert_eq!(c.counts, vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 1]]);
        assert_eq!(confusion(&[0, 0, 1], &[0, 1, 1], 2).unwrap(), cm(&[&[1, 1], &[0, 1]]));
        let e = confusion(&[], &[], 3).unwrap();
        assert_eq!(e.total(), 0);
        assert!(confusion(&[0], &[0, 1], 2).is_err());
    }

    #[test]
    fn macro_f1_examples() {
        assert_eq!(macro_f1(&cm(&[&[3, 0], &[0, 5]])).unwrap(), 1.0);
        let v = macro_f1(&cm(&[&[1, 1], &[0, 2]])).unwrap();
        let f0 = 2.0 * 1.0 * 0.5 / 1.5;
        let f1 = 2.0 * (2.0 / 3.0) * 1.0 / (5.0 / 3.0);
        assert!((v - (f0 + f1) / 2.0).abs() < 1e-15);
        assert!((v - 0.73333).abs() < 1e-5);
        assert!(macro_f1(&cm(&[&[0, 0], &[0, 0]])).is_err());
    }

    #[test]
    fn zero_support_classes_are_excluded() {
        // Class 2 never occurs and is never predicted.
        let v = macro_f1(&cm(&[&[2, 0, 0], &[0, 2, 0], &[0, 0, 0]])).unwrap();
        assert_eq!(v, 1.0);
        // A present class that is never predicted counts as zero.
        let v = macro_f1(&cm(&[&[2, 0], &[2, 0]])).unwrap();
        assert!((v - (2.0 * 0.5 / 1.5) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn plateau_detection() {
        assert_eq!(plateau_epoch(&[1.0, 0.5, 0.4, 0.4, 0.4, 0.4], 1e-3, 3), Some(2));
        assert_eq!(plateau_epoch(&[1.0, 0.5, 0.2], 1e-3, 3), None);
    }

    #[test]
    fn sweep_rows() {
        assert!(alpha_uncertainty_sweep(&[], |_| Ok(vec![1.0])).is_err());
        let rows = alpha_uncertainty_sweep(&[0.6], |a| Ok(vec![1.0, a])).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].mean_entropy, 0.6);
        let again = alpha_uncertainty_sweep(&[0.6], |a| Ok(vec![1.0, a])).unwrap();
        assert_eq!(rows, again);
    }

    #[test]
    fn spearman_values() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), None);
        // ties get average ranks: x ranks (1.5,1.5,3), y ranks (1,2,3)
        let r = spearman(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((r - 1.5f64 / (1.5f64 * 2.0).sqrt()).abs() < 1e-12);
    }

    fn brute_macro(truth: &[usize], pred: &[usize], c: usize) -> f64 {
        let mut f = Vec::new();
        for k in 0..c {
            let tp = truth.iter().zip(pred).filter(|&(&t, &p)| t == k && p == k).count() as f64;
            let fp = truth.iter().zip(pred).filter(|&(&t, &p)| t != k && p == k).count() as f64;
            let fnn = truth.iter().zip(pred).filter(|&(&t, &p)| t == k && p != k).count() as f64;
            if tp + fnn == 0.0 {
                continue;
            }
            f.push(if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fnn) });
        }
        f.iter().sum::<f64>() / f.len() as f64
    }

    proptest! {
        #[test]
        fn macro_f1_matches_recount(pairs in proptest::collection::vec((0usize..4, 0usize..4), 1..60)) {
            let (t, p): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let v = macro_f1(&confusion(&t, &p, 4).unwrap()).unwrap();
            prop_assert!((v - brute_macro(&t, &p, 4)).abs() <= 1e-12);
        }

        #[test]
        fn duplication_keeps_macro_f1(pairs in proptest::collection::vec((0usize..3, 0usize..3), 1..40)) {
            let (t, p): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let a = macro_f1(&confusion(&t, &p, 3).unwrap()).unwrap();
            let t2: Vec<usize> = t.iter().chain(&t).copied().collect();
            let p2: Vec<usize> = p.iter().chain(&p).copied().collect();
            prop_assert!((a - macro_f1(&confusion(&t2, &p2, 3).unwrap()).unwrap()).abs() <= 1e-12);
        }

        #[test]
        fn confusion_follows_relabeling(pairs in proptest::collection::vec((0usize..3, 0usize..3), 0..40), shift in 0usize..3) {
            let (t, p): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let perm = |y: usize| (y + shift) % 3;
            let a = confusion(&t, &p, 3).unwrap();
            let t2: Vec<usize> = t.iter().map(|&y| perm(y)).collect();
            let p2: Vec<usize> = p.iter().map(|&y| perm(y)).collect();
            let b = confusion(&t2, &p2, 3).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    prop_assert_eq!(a.counts[i][j], b.counts[perm(i)][perm(j)]);
                }
            }
            prop_assert_eq!(a.total() as usize, t.len());
        }
    }
}
