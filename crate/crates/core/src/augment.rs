//! Geometric augmentation: a random 3-D rotation of every tri-axial channel
//! group followed by additive Gaussian jitter.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Array;
use crate::data::WindowedDataset;
use crate::error::{ensure, Result};
use crate::seeds;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub jitter_sigma: f64,
    /// Angles are drawn uniformly from `[-rotation_deg, rotation_deg]`.
    pub rotation_deg: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            jitter_sigma: 0.055,
            rotation_deg: 25.0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.jitter_sigma.is_finite() && self.jitter_sigma >= 0.0,
            "jitter sigma must be finite and non-negative"
        );
        ensure!(
            (0.0..=180.0).contains(&self.rotation_deg),
            "rotation range must lie in [0, 180] degrees"
        );
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.jitter_sigma == 0.0 && self.rotation_deg == 0.0
    }
}

/// Rotation by `angle_deg` about a unit `axis`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation {
    pub angle_deg: f64,
    pub axis: [f64; 3],
}

impl Rotation {
    pub fn new(angle_deg: f64, axis: [f64; 3]) -> Result<Self> {
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        ensure!(n.is_finite() && n > 0.0, "rotation axis must be a non-zero vector");
        Ok(Rotation {
            angle_deg,
            axis: [axis[0] / n, axis[1] / n, axis[2] / n],
        })
    }

    /// Uniform angle in `[-range, range]` about an isotropic random axis.
    pub fn random(range_deg: f64, rng: &mut impl Rng) -> Self {
        let angle_deg = if range_deg > 0.0 {
            rng.random_range(-range_deg..=range_deg)
        } else {
            0.0
        };
        loop {
            let v: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(rng));
            if let Ok(r) = Rotation::new(angle_deg, v) {
                return r;
            }
        }
    }

    /// Rodrigues form `I + sin(t) K + (1 - cos(t)) K^2`.
    pub fn matrix(&self) -> [[f64; 3]; 3] {
        let t = self.angle_deg.to_radians();
        let (s, c) = t.sin_cos();
        let [x, y, z] = self.axis;
        let k = [[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]];
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let k2: f64 = (0..3).map(|m| k[i][m] * k[m][j]).sum();
                r[i][j] = f64::from(u8::from(i == j)) + s * k[i][j] + (1.0 - c) * k2;
            }
        }
        r
    }
}

fn check_groups(channels: usize) -> Result<()> {
    ensure!(
        channels.is_multiple_of(3) && channels > 0,
        "rotation needs tri-axial channel groups, got {channels} channels"
    );
    Ok(())
}

/// Rotate every 3-channel group of a `[C, W]` window in place.
pub fn rotate(window: &mut [f64], channels: usize, rot: &Rotation) -> Result<()> {
    check_groups(channels)?;
    ensure!(
        window.len().is_multiple_of(channels),
        "window of {} values does not split into {channels} channels",
        window.len()
    );
    let w = window.len() / channels;
    let r = rot.matrix();
    for g in 0..channels / 3 {
        let base = 3 * g * w;
        for t in 0..w {
            let v = [window[base + t], window[base + w + t], window[base + 2 * w + t]];
            for (i, row) in r.iter().enumerate() {
                window[base + i * w + t] = row[0] * v[0] + row[1] * v[1] + row[2] * v[2];
            }
        }
    }
    Ok(())
}

/// Add i.i.d. `N(0, sigma^2)` noise to every value.
pub fn jitter(window: &mut [f64], sigma: f64, rng: &mut impl Rng) -> Result<()> {
    ensure!(sigma.is_finite() && sigma >= 0.0, "jitter sigma must be non-negative");
    if sigma == 0.0 {
        return Ok(());
    }
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    for v in window.iter_mut() {
        *v += normal.sample(rng);
    }
    Ok(())
}

/// Rotate then jitter one window with draws taken from `rng`.
pub fn augment_window(
    window: &mut [f64],
    channels: usize,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<()> {
    if cfg.rotation_deg > 0.0 {
        let rot = Rotation::random(cfg.rotation_deg, rng);
        rotate(window, channels, &rot)?;
    }
    jitter(window, cfg.jitter_sigma, rng)
}

/// Random stream used for sample `index` of a batch whose base seed is `base`.
pub fn sample_stream(base: u64, index: usize) -> ChaCha8Rng {
    seeds::rng(base, "augment-sample", index as u64, 0)
}

/// Augment each sample of a `[B, C, W]` batch with its own substream. One
/// base seed is drawn from `rng`.
pub fn augment_batch(batch: &Array, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<Array> {
    cfg.validate()?;
    ensure!(batch.ndim() == 3, "expected a [B, C, W] batch, got {:?}", batch.shape());
    let channels = batch.shape()[1];
    if cfg.rotation_deg > 0.0 {
        check_groups(channels)?;
    }
    let base: u64 = rng.random();
    let mut out = batch.clone();
    let per = channels * batch.shape()[2];
    for (i, w) in out.data_mut().chunks_mut(per).enumerate() {
        augment_window(w, channels, cfg, &mut sample_stream(base, i))?;
    }
    Ok(out)
}

/// Augment the signal of every window; labels and tags are untouched.
pub fn augment_dataset(
    ds: &WindowedDataset,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<WindowedDataset> {
    let mut out = ds.clone();
    if out.windows.is_empty() {
        return Ok(out);
    }
    let idx: Vec<usize> = (0..ds.len()).collect();
    let aug = augment_batch(&ds.batch(&idx), cfg, rng)?;
    let per = ds.channels * ds.window_len;
    for (w, chunk) in out.windows.iter_mut().zip(aug.data().chunks(per)) {
        w.data = Array::new(vec![ds.channels, ds.window_len], chunk.to_vec())?;
    }
    Ok(out)
}
