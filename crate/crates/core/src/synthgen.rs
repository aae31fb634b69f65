//! Synthetic paired source/target corpora with a controllable conditional
//! shift between domains.
//!
//! Each class is a DC offset along a class direction plus a sinusoid at a
//! class frequency along a second class direction, on every tri-axial group.
//! Every subject wears the sensor with a small random rotation; the target
//! domain adds a fixed-angle rotation about a per-subject axis, an amplitude
//! change and extra noise.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::{rotate, Rotation};
use crate::data::{make_windows, Domain, SensorRecording, WindowedDataset};
use crate::error::{ensure, Result};
use crate::seeds;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftConfig {
    pub num_classes: usize,
    /// Multiple of 3.
    pub channels: usize,
    pub window_len: usize,
    pub samples_per_class: usize,
    pub subjects_per_domain: usize,
    /// Range of the per-subject placement rotation, both domains.
    pub subject_rotation_deg: f64,
    /// Fixed rotation applied to the whole target domain.
    pub rotation_shift_deg: f64,
    /// Target windows are scaled by a factor drawn from this range.
    pub target_amplitude: [f64; 2],
    /// Noise added in both domains.
    pub base_noise_std: f64,
    /// Extra noise added in the target domain.
    pub target_noise_std: f64,
    pub dc_magnitude: f64,
    pub sine_amplitude: f64,
    pub sample_rate_hz: f64,
    pub seed: u64,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        ShiftConfig {
            num_classes: 4,
            channels: 6,
            window_len: 24,
            samples_per_class: 200,
            subjects_per_domain: 3,
            subject_rotation_deg: 10.0,
            rotation_shift_deg: 45.0,
            target_amplitude: [0.8, 1.0],
            base_noise_std: 0.15,
            target_noise_std: 0.1,
            dc_magnitude: 1.0,
            sine_amplitude: 1.0,
            sample_rate_hz: 50.0,
            seed: 0,
        }
    }
}

impl ShiftConfig {
    /// Same corpus size with every shift parameter zeroed.
    pub fn without_shift(&self) -> Self {
        ShiftConfig {
            subject_rotation_deg: 0.0,
            rotation_shift_deg: 0.0,
            target_amplitude: [1.0, 1.0],
            target_noise_std: 0.0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.num_classes >= 2, "need at least 2 classes");
        ensure!(
            self.channels > 0 && self.channels.is_multiple_of(3),
            "channel count {} is not a multiple of 3",
            self.channels
        );
        ensure!(self.window_len >= 4, "window length must be at least 4");
        ensure!(self.samples_per_class >= 1, "need at least one sample per class");
        ensure!(self.subjects_per_domain >= 1, "need at least one subject per domain");
        let [lo, hi] = self.target_amplitude;
        ensure!(lo > 0.0 && lo <= hi && hi.is_finite(), "invalid target amplitude range");
        for (name, v) in [
            ("subject rotation", self.subject_rotation_deg),
            ("rotation shift", self.rotation_shift_deg),
        ] {
            ensure!((0.0..=180.0).contains(&v), "{name} must lie in [0, 180] degrees");
        }
        for (name, v) in [
            ("base noise", self.base_noise_std),
            ("target noise", self.target_noise_std),
            ("dc magnitude", self.dc_magnitude),
            ("sine amplitude", self.sine_amplitude),
        ] {
            ensure!(v.is_finite() && v >= 0.0, "{name} must be finite and non-negative");
        }
        ensure!(self.sample_rate_hz > 0.0, "sample rate must be positive");
        Ok(())
    }
}

/// Generated recordings plus their windowed views.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    /// Labeled source recordings, one per subject.
    pub source_recordings: Vec<SensorRecording>,
    /// Target recordings without labels.
    pub target_recordings: Vec<SensorRecording>,
    /// Per-sample labels of each target recording, for evaluation only.
    pub target_row_labels: Vec<Vec<usize>>,
    pub source: WindowedDataset,
    /// Unlabeled target windows.
    pub target: WindowedDataset,
    pub target_labels: Vec<usize>,
}

/// `n` roughly even directions on the unit sphere (golden spiral).
fn spiral(n: usize, twist: f64) -> Vec<[f64; 3]> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64 + twist;
            [r * phi.cos(), r * phi.sin(), z]
        })
        .collect()
}

struct Signal {
    dc: Vec<[f64; 3]>,
    axis: Vec<[f64; 3]>,
    cycles: Vec<f64>,
}

impl Signal {
    fn new(cfg: &ShiftConfig) -> Self {
        let c = cfg.num_classes;
        let max_cycles = (cfg.window_len as f64 / 4.0).max(1.0);
        Signal {
            dc: spiral(c, 0.0),
            axis: spiral(c, 1.3),
            cycles: (0..c)
                .map(|y| 1.0 + (max_cycles - 1.0) * y as f64 / (c - 1) as f64)
                .collect(),
        }
    }

    /// One `[C, W]` segment of class `y`.
    fn segment(&self, cfg: &ShiftConfig, y: usize, rng: &mut impl Rng) -> Vec<f64> {
        let w = cfg.window_len;
        let mut out = vec![0.0; cfg.channels * w];
        for g in 0..cfg.channels / 3 {
            let phase = rng.random_range(0.0..2.0 * PI);
            let amp = cfg.sine_amplitude * rng.random_range(0.8..1.2);
            let cycles = self.cycles[y] * rng.random_range(0.95..1.05);
            for t in 0..w {
                let s = amp * (2.0 * PI * cycles * t as f64 / w as f64 + phase).sin();
                for k in 0..3 {
                    out[(3 * g + k) * w + t] = cfg.dc_magnitude * self.dc[y][k] + s * self.axis[y][k];
                }
            }
        }
        out
    }
}

fn recording(
    cfg: &ShiftConfig,
    signal: &Signal,
    domain: Domain,
    subject: usize,
    domain_rot: Option<&Rotation>,
) -> Result<(SensorRecording, Vec<usize>)> {
    let tag = domain.as_str();
    let mut rng = seeds::rng(cfg.seed, &format!("synth-{tag}"), subject as u64, 0);
    let placement = Rotation::random(cfg.subject_rotation_deg, &mut rng);
    // Spread each class over the subjects; earlier subjects take the remainder.
    let (n, s) = (cfg.samples_per_class, cfg.subjects_per_domain);
    let per_class = n / s + usize::from(subject < n % s);
    let mut labels: Vec<usize> = (0..cfg.num_classes)
        .flat_map(|y| std::iter::repeat_n(y, per_class))
        .collect();
    labels.shuffle(&mut rng);
    let base = Normal::new(0.0, cfg.base_noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let extra = Normal::new(0.0, cfg.target_noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let w = cfg.window_len;
    let mut channels = vec![Vec::with_capacity(labels.len() * w); cfg.channels];
    let mut row_labels = Vec::with_capacity(labels.len() * w);
    for &y in &labels {
        let mut seg = signal.segment(cfg, y, &mut rng);
        if cfg.subject_rotation_deg > 0.0 {
            rotate(&mut seg, cfg.channels, &placement)?;
        }
        if let Some(r) = domain_rot {
            rotate(&mut seg, cfg.channels, r)?;
            let [lo, hi] = cfg.target_amplitude;
            let a = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            seg.iter_mut().for_each(|v| *v *= a);
            if cfg.target_noise_std > 0.0 {
                seg.iter_mut().for_each(|v| *v += extra.sample(&mut rng));
            }
        }
        if cfg.base_noise_std > 0.0 {
            seg.iter_mut().for_each(|v| *v += base.sample(&mut rng));
        }
        for (c, ch) in channels.iter_mut().enumerate() {
            ch.extend_from_slice(&seg[c * w..(c + 1) * w]);
        }
        row_labels.extend(std::iter::repeat_n(y, w));
    }
    let rec = SensorRecording {
        subject_id: format!("{tag}{subject:02}"),
        domain,
        sample_rate_hz: cfg.sample_rate_hz,
        channels,
        labels: (domain == Domain::Source).then(|| row_labels.clone()),
    };
    Ok((rec, row_labels))
}

fn windows_of(
    recs: &[SensorRecording],
    row_labels: &[Vec<usize>],
    cfg: &ShiftConfig,
) -> Result<(WindowedDataset, Vec<usize>)> {
    let mut windows = Vec::new();
    let mut labels = Vec::new();
    for (rec, rows) in recs.iter().zip(row_labels) {
        let labeled = SensorRecording {
            labels: Some(rows.clone()),
            ..rec.clone()
        };
        let (ws, _) = make_windows(&labeled, cfg.window_len, 0.0)?;
        for mut w in ws {
            labels.push(w.label.expect("labeled"));
            if rec.labels.is_none() {
                w.label = None;
            }
            windows.push(w);
        }
    }
    Ok((
        WindowedDataset {
            windows,
            num_classes: cfg.num_classes,
            channels: cfg.channels,
            window_len: cfg.window_len,
        },
        labels,
    ))
}

/// Deterministic in `cfg.seed`.
pub fn generate(cfg: &ShiftConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let signal = Signal::new(cfg);
    let mut source_recordings = Vec::new();
    let mut source_rows = Vec::new();
    let mut target_recordings = Vec::new();
    let mut target_row_labels = Vec::new();
    for s in 0..cfg.subjects_per_domain {
        let (r, l) = recording(cfg, &signal, Domain::Source, s, None)?;
        source_recordings.push(r);
        source_rows.push(l);
        // Each target subject is rotated by the same angle about its own axis.
        let mut rng = seeds::rng(cfg.seed, "synth-domain", s as u64, 0);
        let axis = Rotation::random(0.0, &mut rng).axis;
        let shift = Rotation::new(cfg.rotation_shift_deg, axis)?;
        let (r, l) = recording(cfg, &signal, Domain::Target, s, Some(&shift))?;
        target_recordings.push(r);
        target_row_labels.push(l);
    }
    let (source, _) = windows_of(&source_recordings, &source_rows, cfg)?;
    let (target, target_labels) = windows_of(&target_recordings, &target_row_labels, cfg)?;
    Ok(SynthCorpus {
        source_recordings,
        target_recordings,
        target_row_labels,
        source,
        target,
        target_labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ShiftConfig {
        ShiftConfig {
            samples_per_class: 12,
            ..ShiftConfig::default()
        }
    }

    #[test]
    fn rejects_ungrouped_channels() {
        let cfg = ShiftConfig {
            channels: 4,
            ..small()
        };
        assert!(matches!(generate(&cfg), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn same_seed_same_corpus() {
        assert_eq!(generate(&small()).unwrap(), generate(&small()).unwrap());
        let other = ShiftConfig { seed: 1, ..small() };
        assert_ne!(generate(&small()).unwrap().source, generate(&other).unwrap().source);
    }

    #[test]
    fn priors_match_across_domains() {
        let c = generate(&small()).unwrap();
        let count = |l: &[usize], y| l.iter().filter(|&&v| v == y).count();
        let src = c.source.labels().unwrap();
        for y in 0..4 {
            assert_eq!(count(&src, y), 12);
            assert_eq!(count(&c.target_labels, y), 12);
        }
    }

    #[test]
    fn target_labels_are_hidden() {
        let c = generate(&small()).unwrap();
        assert!(c.target.windows.iter().all(|w| w.label.is_none()));
        assert!(c.target_recordings.iter().all(|r| r.labels.is_none()));
        assert!(c.source_recordings.iter().all(|r| r.labels.is_some()));
        assert_eq!(c.target_labels.len(), c.target.len());
    }

    fn class_means(ds: &WindowedDataset, labels: &[usize], y: usize) -> Vec<f64> {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == y).collect();
        let mut m = vec![0.0; ds.channels * ds.window_len];
        for &i in &idx {
            for (a, b) in m.iter_mut().zip(ds.windows[i].data.data()) {
                *a += b / idx.len() as f64;
            }
        }
        // average over time: the per-channel mean vector
        m.chunks(ds.window_len)
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect()
    }

    #[test]
    fn rotation_shift_moves_class_means() {
        let cfg = ShiftConfig {
            rotation_shift_deg: 30.0,
            ..small()
        };
        let c = generate(&cfg).unwrap();
        let src = c.source.labels().unwrap();
        for y in 0..4 {
            let a = class_means(&c.source, &src, y);
            let b = class_means(&c.target, &c.target_labels, y);
            let d: f64 = a.iter().zip(&b).map(|(x, z)| (x - z).powi(2)).sum::<f64>().sqrt();
            assert!(d > 0.0);
        }
    }

    #[test]
    fn no_shift_means_are_close() {
        let cfg = ShiftConfig {
            samples_per_class: 200,
            ..small().without_shift()
        };
        let c = generate(&cfg).unwrap();
        let src = c.source.labels().unwrap();
        for y in 0..4 {
            let a = class_means(&c.source, &src, y);
            let b = class_means(&c.target, &c.target_labels, y);
            let d: f64 = a.iter().zip(&b).map(|(x, z)| (x - z).powi(2)).sum::<f64>().sqrt();
            assert!(d < 0.2, "class {y}: {d}");
        }
    }

    #[test]
    fn recordings_window_back_to_segments() {
        let c = generate(&small()).unwrap();
        let rows: usize = c.source_recordings.iter().map(|r| r.len()).sum();
        assert_eq!(rows, c.source.len() * 24);
    }
}
