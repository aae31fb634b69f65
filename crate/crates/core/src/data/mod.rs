//! Recordings, preprocessing, windowing and dataset splits.
//!
//! The preprocessing order is median filter, then windowing, then min-max
//! scaling with statistics frozen from the source training split. Scaling
//! is a per-channel affine map, so applying it after windowing gives the
//! same values as scaling the recordings first.

pub mod csv_io;
mod prepare;
pub mod store;

pub use prepare::{prepare, PrepareOptions};
pub use store::{PreparedData, PreparedMeta};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Array;
use crate::error::{ensure, Error, Result, Warning};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(Error::contract(format!("unknown domain tag {other:?}"))),
        }
    }
}

/// One subject's continuous multichannel recording.
#[derive(Clone, Debug, PartialEq)]
pub struct SensorRecording {
    pub subject_id: String,
    pub domain: Domain,
    pub sample_rate_hz: f64,
    /// `channels[c][t]`
    pub channels: Vec<Vec<f64>>,
    pub labels: Option<Vec<usize>>,
}

impl SensorRecording {
    pub fn new(
        subject_id: impl Into<String>,
        domain: Domain,
        sample_rate_hz: f64,
        channels: Vec<Vec<f64>>,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        let rec = SensorRecording {
            subject_id: subject_id.into(),
            domain,
            sample_rate_hz,
            channels,
            labels,
        };
        rec.validate(None)?;
        Ok(rec)
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Check shape invariants, and label range when `num_classes` is known.
    pub fn validate(&self, num_classes: Option<usize>) -> Result<()> {
        ensure!(
            self.sample_rate_hz.is_finite() && self.sample_rate_hz > 0.0,
            "sample rate must be positive, got {}",
            self.sample_rate_hz
        );
        ensure!(!self.channels.is_empty(), "recording has no channels");
        let t = self.len();
        ensure!(t >= 1, "recording {} has no samples", self.subject_id);
        ensure!(
            self.channels.iter().all(|c| c.len() == t),
            "recording {} has ragged channels",
            self.subject_id
        );
        if let Some(labels) = &self.labels {
            ensure!(
                labels.len() == t,
                "recording {} has {} labels for {} samples",
                self.subject_id,
                labels.len(),
                t
            );
            if let Some(c) = num_classes {
                ensure!(
                    labels.iter().all(|&l| l < c),
                    "recording {} has labels outside [0, {c})",
                    self.subject_id
                );
            }
        }
        Ok(())
    }
}

/// A fixed-length slice of a recording. `data` is `[C, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub data: Array,
    pub label: Option<usize>,
    pub subject_id: String,
    pub domain: Domain,
    /// Sample offset into the originating recording.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowedDataset {
    pub windows: Vec<Window>,
    pub num_classes: usize,
    pub channels: usize,
    pub window_len: usize,
}

impl WindowedDataset {
    pub fn new(
        windows: Vec<Window>,
        num_classes: usize,
        channels: usize,
        window_len: usize,
    ) -> Result<Self> {
        ensure!(num_classes >= 1, "num_classes must be positive");
        for w in &windows {
            ensure!(
                w.data.shape() == [channels, window_len],
                "window shape {:?} does not match [{channels}, {window_len}]",
                w.data.shape()
            );
            if let Some(l) = w.label {
                ensure!(l < num_classes, "label {l} outside [0, {num_classes})");
            }
        }
        Ok(WindowedDataset {
            windows,
            num_classes,
            channels,
            window_len,
        })
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn count(&self, domain: Domain) -> usize {
        self.windows.iter().filter(|w| w.domain == domain).count()
    }

    /// Labels of every window; `None` if any window is unlabeled.
    pub fn labels(&self) -> Option<Vec<usize>> {
        self.windows.iter().map(|w| w.label).collect()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        WindowedDataset {
            windows: idx.iter().map(|&i| self.windows[i].clone()).collect(),
            ..self.empty_like()
        }
    }

    pub fn empty_like(&self) -> Self {
        WindowedDataset {
            windows: Vec::new(),
            num_classes: self.num_classes,
            channels: self.channels,
            window_len: self.window_len,
        }
    }

    /// Copy with every label removed.
    pub fn unlabeled(&self) -> Self {
        let mut out = self.clone();
        out.windows.iter_mut().for_each(|w| w.label = None);
        out
    }

    /// Stack the selected windows into a `[B, C, W]` batch.
    pub fn batch(&self, idx: &[usize]) -> Array {
        let per = self.channels * self.window_len;
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(self.windows[i].data.data());
        }
        Array::from_parts(vec![idx.len(), self.channels, self.window_len], data)
    }
}

/// Sliding median per channel with edge-value padding.
pub fn median_filter(rec: &SensorRecording, kernel_size: usize) -> Result<SensorRecording> {
    ensure!(
        kernel_size % 2 == 1,
        "median filter kernel must be odd, got {kernel_size}"
    );
    ensure!(
        kernel_size <= rec.len(),
        "median filter kernel {kernel_size} exceeds recording length {}",
        rec.len()
    );
    let half = kernel_size / 2;
    let mut out = rec.clone();
    let mut buf = Vec::with_capacity(kernel_size);
    for (src, dst) in rec.channels.iter().zip(out.channels.iter_mut()) {
        let t = src.len();
        for (i, d) in dst.iter_mut().enumerate() {
            buf.clear();
            for k in 0..kernel_size {
                let j = (i + k).saturating_sub(half).min(t - 1);
                buf.push(src[j]);
            }
            buf.sort_by(f64::total_cmp);
            *d = buf[half];
        }
    }
    Ok(out)
}

/// Per-channel `(min, max)` used for min-max scaling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl NormStats {
    pub fn fit(ds: &WindowedDataset) -> Result<Self> {
        ensure!(!ds.is_empty(), "cannot fit normalization on an empty dataset");
        let mut min = vec![f64::INFINITY; ds.channels];
        let mut max = vec![f64::NEG_INFINITY; ds.channels];
        for w in &ds.windows {
            for c in 0..ds.channels {
                for &v in &w.data.data()[c * ds.window_len..][..ds.window_len] {
                    min[c] = min[c].min(v);
                    max[c] = max[c].max(v);
                }
            }
        }
        Ok(NormStats { min, max })
    }

    /// `(x - min) / (max - min)`; a constant channel maps to 0.
    pub fn scale(&self, channel: usize, x: f64) -> f64 {
        let (lo, hi) = (self.min[channel], self.max[channel]);
        if hi > lo {
            (x - lo) / (hi - lo)
        } else {
            0.0
        }
    }

    pub fn apply(&self, ds: &WindowedDataset) -> Result<WindowedDataset> {
        ensure!(
            self.min.len() == ds.channels,
            "normalization has {} channels, dataset has {}",
            self.min.len(),
            ds.channels
        );
        let mut out = ds.clone();
        for w in &mut out.windows {
            let wl = ds.window_len;
            for (i, v) in w.data.data_mut().iter_mut().enumerate() {
                *v = self.scale(i / wl, *v);
            }
        }
        Ok(out)
    }
}

/// Fit scaling statistics on `fit_on` and apply them to `fit_on` itself.
pub fn minmax_normalize(fit_on: &WindowedDataset) -> Result<(WindowedDataset, NormStats)> {
    let stats = NormStats::fit(fit_on)?;
    Ok((stats.apply(fit_on)?, stats))
}

/// Most frequent id; ties go to the lowest id.
pub fn majority_vote(labels: &[usize]) -> Result<usize> {
    ensure!(!labels.is_empty(), "majority vote over an empty label list");
    let mut counts = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    let best = counts.values().copied().max().unwrap_or(0);
    Ok(*counts
        .iter()
        .find(|(_, &c)| c == best)
        .map(|(l, _)| l)
        .expect("non-empty"))
}

pub fn window_stride(window_len: usize, overlap: f64) -> usize {
    ((window_len as f64 * (1.0 - overlap)).round() as usize).max(1)
}

/// Window length in samples for a duration at a sample rate.
pub fn window_len_for(window_ms: f64, sample_rate_hz: f64) -> usize {
    (window_ms * sample_rate_hz / 1000.0).round() as usize
}

pub fn make_windows(
    rec: &SensorRecording,
    window_len: usize,
    overlap: f64,
) -> Result<(Vec<Window>, Vec<Warning>)> {
    ensure!(window_len >= 1, "window length must be positive");
    ensure!(
        (0.0..1.0).contains(&overlap),
        "overlap must lie in [0, 1), got {overlap}"
    );
    let t = rec.len();
    if window_len > t {
        let w = Warning::emit(format!(
            "recording {} has {t} samples, shorter than window length {window_len}; no windows",
            rec.subject_id
        ));
        return Ok((Vec::new(), vec![w]));
    }
    let stride = window_stride(window_len, overlap);
    let c = rec.num_channels();
    let mut out = Vec::new();
    let mut offset = 0;
    while offset + window_len <= t {
        let mut data = Vec::with_capacity(c * window_len);
        for ch in &rec.channels {
            data.extend_from_slice(&ch[offset..offset + window_len]);
        }
        let label = match &rec.labels {
            Some(l) => Some(majority_vote(&l[offset..offset + window_len])?),
            None => None,
        };
        out.push(Window {
            data: Array::from_parts(vec![c, window_len], data),
            label,
            subject_id: rec.subject_id.clone(),
            domain: rec.domain,
            offset,
        });
        offset += stride;
    }
    Ok((out, Vec::new()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 0.6,
            val: 0.2,
            test: 0.2,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.train > 0.0 && self.val > 0.0 && self.test > 0.0,
            "split fractions must be positive"
        );
        ensure!(
            (self.train + self.val + self.test - 1.0).abs() <= 1e-9,
            "split fractions must sum to 1"
        );
        Ok(())
    }
}

/// Window indices per split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

fn cut(idx: &[usize], spec: &SplitSpec) -> (usize, usize) {
    let n = idx.len() as f64;
    let n_train = (spec.train * n).round() as usize;
    let n_val = ((spec.val * n).round() as usize).min(idx.len() - n_train.min(idx.len()));
    (n_train.min(idx.len()), n_val)
}

/// Seeded partition into train/val/test, stratified by class when every
/// window is labeled.
pub fn split_indices(ds: &WindowedDataset, spec: &SplitSpec) -> Result<(SplitIndices, Vec<Warning>)> {
    spec.validate()?;
    ensure!(!ds.is_empty(), "cannot split an empty dataset");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = SplitIndices {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    let mut warnings = Vec::new();
    let stratified = ds.labels().is_some();
    let groups: Vec<Vec<usize>> = match ds.labels() {
        Some(labels) => {
            let mut by_class = vec![Vec::new(); ds.num_classes];
            for (i, l) in labels.into_iter().enumerate() {
                by_class[l].push(i);
            }
            by_class
        }
        None => vec![(0..ds.len()).collect()],
    };
    for (class, mut idx) in groups.into_iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        idx.shuffle(&mut rng);
        if stratified && idx.len() < 3 {
            warnings.push(Warning::emit(format!(
                "class {class} has {} windows, fewer than 3 splits; assigned to train",
                idx.len()
            )));
            out.train.extend(idx);
            continue;
        }
        let (n_train, n_val) = cut(&idx, spec);
        out.train.extend_from_slice(&idx[..n_train]);
        out.val.extend_from_slice(&idx[n_train..n_train + n_val]);
        out.test.extend_from_slice(&idx[n_train + n_val..]);
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok((out, warnings))
}

pub fn split(
    ds: &WindowedDataset,
    spec: &SplitSpec,
) -> Result<(WindowedDataset, WindowedDataset, WindowedDataset)> {
    let (idx, _) = split_indices(ds, spec)?;
    Ok((ds.subset(&idx.train), ds.subset(&idx.val), ds.subset(&idx.test)))
}
