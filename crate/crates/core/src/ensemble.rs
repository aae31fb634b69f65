//! Temporal ensembling of target predictions into pseudo-labels.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autodiff::Array;
use crate::error::{ensure, Result};
use crate::model::argmax;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    /// Weight on the accumulated history, in (0, 1).
    pub alpha: f64,
    /// Pseudo-labels whose corrected confidence falls below this are masked.
    pub confidence_threshold: f64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            alpha: 0.60,
            confidence_threshold: 0.0,
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.alpha > 0.0 && self.alpha < 1.0, "alpha must lie in (0, 1)");
        ensure!(
            (0.0..=1.0).contains(&self.confidence_threshold),
            "confidence threshold must lie in [0, 1]"
        );
        Ok(())
    }
}

/// Exponential moving average `Z` of per-epoch predictions. Row `i` belongs
/// to target window `order[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleState {
    z: Array,
    t: u32,
    alpha: f64,
    order: Vec<usize>,
}

impl EnsembleState {
    pub fn new(num_windows: usize, num_classes: usize, alpha: f64) -> Result<Self> {
        ensure!(num_windows > 0 && num_classes >= 2, "empty ensemble");
        ensure!(alpha > 0.0 && alpha < 1.0, "alpha must lie in (0, 1)");
        Ok(EnsembleState {
            z: Array::zeros(&[num_windows, num_classes]),
            t: 0,
            alpha,
            order: (0..num_windows).collect(),
        })
    }

    pub fn epochs(&self) -> u32 {
        self.t
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn raw(&self) -> &Array {
        &self.z
    }

    /// `Z <- alpha Z + (1 - alpha) p`.
    pub fn update(&mut self, probs: &Array) -> Result<()> {
        ensure!(
            probs.shape() == self.z.shape(),
            "prediction shape {:?} does not match ensemble {:?}",
            probs.shape(),
            self.z.shape()
        );
        ensure!(probs.is_finite(), "non-finite predictions");
        let a = self.alpha;
        for (z, &p) in self.z.data_mut().iter_mut().zip(probs.data()) {
            *z = a * *z + (1.0 - a) * p;
        }
        self.t += 1;
        Ok(())
    }

    /// Bias-corrected `Z / (1 - alpha^t)`.
    pub fn corrected(&self) -> Result<Array> {
        ensure!(self.t >= 1, "ensemble has no predictions yet");
        let k = 1.0 - self.alpha.powi(self.t as i32);
        Ok(self.z.map(|v| v / k))
    }

    /// Argmax labels of the corrected predictions and a confidence mask.
    pub fn pseudo_labels(&self, threshold: f64) -> Result<(Vec<usize>, Vec<bool>)> {
        let zc = self.corrected()?;
        Ok((0..zc.rows())
            .map(|r| {
                let row = zc.row(r);
                let l = argmax(row);
                (l, row[l] >= threshold)
            })
            .unzip())
    }

    pub fn entropies(&self) -> Result<Vec<f64>> {
        let zc = self.corrected()?;
        (0..zc.rows()).map(|r| entropy(zc.row(r))).collect()
    }

    pub fn mean_entropy(&self) -> Result<f64> {
        let e = self.entropies()?;
        Ok(e.iter().sum::<f64>() / e.len() as f64)
    }

    /// Append one row per window: `epoch,window,z_0..z_{c-1},entropy`.
    pub fn write_dump(&self, w: &mut impl Write, with_header: bool) -> Result<()> {
        let zc = self.corrected()?;
        if with_header {
            let cols: Vec<String> = (0..zc.cols()).map(|k| format!("z_{k}")).collect();
            writeln!(w, "epoch,window,{},entropy", cols.join(","))?;
        }
        for r in 0..zc.rows() {
            let vals: Vec<String> = zc.row(r).iter().map(|v| format!("{v:.17e}")).collect();
            writeln!(
                w,
                "{},{},{},{:.17e}",
                self.t,
                self.order[r],
                vals.join(","),
                entropy(zc.row(r))?
            )?;
        }
        Ok(())
    }
}

/// Natural-log entropy with `0 log 0 = 0`.
pub fn entropy(p: &[f64]) -> Result<f64> {
    ensure!(
        p.iter().all(|&v| v >= 0.0 && v.is_finite()),
        "entropy of a row with negative or non-finite entries"
    );
    let s: f64 = p.iter().sum();
    ensure!((s - 1.0).abs() <= 1e-6, "entropy of a row summing to {s}");
    Ok(-p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rows(r: &[&[f64]]) -> Array {
        Array::from_rows(r).unwrap()
    }

    #[test]
    fn first_update_is_bias_corrected() {
        let mut s = EnsembleState::new(1, 2, 0.6).unwrap();
        s.update(&rows(&[&[1.0, 0.0]])).unwrap();
        assert!((s.raw().data()[0] - 0.4).abs() < 1e-15);
        assert_eq!(s.raw().data()[1], 0.0);
        let z = s.corrected().unwrap();
        assert!((z.data()[0] - 1.0).abs() < 1e-15);
        assert_eq!(s.epochs(), 1);
    }

    #[test]
    fn constant_input_is_a_fixed_point() {
        let p = rows(&[&[0.2, 0.3, 0.5], &[0.6, 0.1, 0.3]]);
        let mut s = EnsembleState::new(2, 3, 0.7).unwrap();
        for _ in 0..25 {
            s.update(&p).unwrap();
            let z = s.corrected().unwrap();
            for (a, b) in z.data().iter().zip(p.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tiny_alpha_tracks_latest() {
        let mut s = EnsembleState::new(1, 2, 1e-9).unwrap();
        s.update(&rows(&[&[0.9, 0.1]])).unwrap();
        s.update(&rows(&[&[0.3, 0.7]])).unwrap();
        let z = s.corrected().unwrap();
        assert!((z.data()[0] - 0.3).abs() < 1e-6);
        assert!((z.data()[1] - 0.7).abs() < 1e-6);
    }

    #[test]
    fn update_rejects_wrong_shape() {
        let mut s = EnsembleState::new(2, 2, 0.6).unwrap();
        assert!(s.update(&rows(&[&[0.5, 0.5]])).is_err());
        assert_eq!(s.epochs(), 0);
    }

    #[test]
    fn pseudo_labels_and_mask() {
        let mut s = EnsembleState::new(3, 3, 0.6).unwrap();
        assert!(s.pseudo_labels(0.0).is_err());
        s.update(&rows(&[&[0.1, 0.7, 0.2], &[0.5, 0.5, 0.0], &[0.2, 0.1, 0.7]]))
            .unwrap();
        let (l, m) = s.pseudo_labels(0.5).unwrap();
        assert_eq!(l, vec![1, 0, 2]);
        assert_eq!(m, vec![true, true, true]);
        let (_, m) = s.pseudo_labels(0.9).unwrap();
        assert_eq!(m, vec![false, false, false]);
    }

    #[test]
    fn entropy_values() {
        assert_eq!(entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert!((entropy(&[0.25; 4]).unwrap() - 4f64.ln()).abs() < 1e-12);
        let want = -(0.5 * 0.5f64.ln() + 2.0 * 0.25 * 0.25f64.ln());
        assert!((entropy(&[0.5, 0.25, 0.25]).unwrap() - want).abs() < 1e-12);
        assert!((want - 1.03972).abs() < 1e-5);
        assert!(entropy(&[1.2, -0.2]).is_err());
    }

    #[test]
    fn dump_has_a_row_per_window() {
        let mut s = EnsembleState::new(2, 2, 0.6).unwrap();
        s.update(&rows(&[&[0.5, 0.5], &[1.0, 0.0]])).unwrap();
        let mut buf = Vec::new();
        s.write_dump(&mut buf, true).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "epoch,window,z_0,z_1,entropy");
        assert_eq!(lines.len(), 3);
        assert!(lines[2].starts_with("1,1,"));
    }

    fn random_probs(m: usize, c: usize, rng: &mut ChaCha8Rng) -> Array {
        let mut data = Vec::with_capacity(m * c);
        for _ in 0..m {
            let row: Vec<f64> = (0..c).map(|_| rng.random_range(0.0..1.0)).collect();
            let s: f64 = row.iter().sum();
            data.extend(row.iter().map(|v| v / s));
        }
        Array::new(vec![m, c], data).unwrap()
    }

    #[test]
    fn smoothing_grows_with_alpha() {
        // Inputs alternate between two fixed distributions plus noise.
        for seed in 0..10u64 {
            let mut variances = Vec::new();
            for &alpha in &[0.55, 0.65, 0.75] {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a = random_probs(5, 3, &mut rng);
                let b = random_probs(5, 3, &mut rng);
                let mut s = EnsembleState::new(5, 3, alpha).unwrap();
                let mut traj = Vec::new();
                for t in 0..60 {
                    s.update(if t % 2 == 0 { &a } else { &b }).unwrap();
                    traj.push(s.corrected().unwrap());
                }
                let mut var = 0.0;
                for i in 0..15 {
                    let xs: Vec<f64> = traj.iter().map(|z| z.data()[i]).collect();
                    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
                    var += xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>();
                }
                variances.push(var);
            }
            assert!(
                variances.windows(2).all(|w| w[1] <= w[0]),
                "seed {seed}: {variances:?}"
            );
        }
    }

    proptest! {
        #[test]
        fn corrected_rows_stay_distributions(seed in any::<u64>(), steps in 1usize..30, alpha in 0.01f64..0.99) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut s = EnsembleState::new(4, 3, alpha).unwrap();
            for _ in 0..steps {
                s.update(&random_probs(4, 3, &mut rng)).unwrap();
            }
            let z = s.corrected().unwrap();
            for r in 0..4 {
                prop_assert!(z.row(r).iter().all(|&v| v >= 0.0));
                prop_assert!((z.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            }
            prop_assert_eq!(s.epochs() as usize, steps);
        }

        #[test]
        fn labels_ignore_positive_row_scaling(row in proptest::collection::vec(0.0f64..1.0, 2..6), k in 0.01f64..100.0) {
            let scaled: Vec<f64> = row.iter().map(|v| v * k).collect();
            prop_assert_eq!(argmax(&row), argmax(&scaled));
        }
    }
}
