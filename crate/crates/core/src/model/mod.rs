//! The window classifier: convolution blocks (conv, batchnorm, ReLU, max
//! pool), fully connected hidden layers with dropout, and a softmax head.

mod checkpoint;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, Checkpoint, CHECKPOINT_VERSION};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, BatchStats, Tape, Var};
use crate::error::{ensure, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// No padding; each convolution shortens the sequence by `k - 1`.
    Valid,
    /// `k / 2` zeros on both ends (odd kernels keep the length).
    Same,
}

/// Which activation is exposed as the embedding for distribution alignment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingLayer {
    /// Activation of the last hidden fully connected layer.
    Penultimate,
    /// Flattened output of the last convolution block.
    Flatten,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: usize,
    pub window_len: usize,
    pub num_classes: usize,
    pub filters: Vec<usize>,
    pub kernel_sizes: Vec<usize>,
    pub pool: usize,
    /// Hidden fully connected widths; the softmax head is separate.
    pub fc: Vec<usize>,
    pub dropout: f64,
    pub padding: Padding,
    pub embedding: EmbeddingLayer,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

/// Data-independent architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub filters: Vec<usize>,
    pub kernel_sizes: Vec<usize>,
    pub pool: usize,
    pub fc: Vec<usize>,
    pub dropout: f64,
    pub padding: Padding,
    pub embedding: EmbeddingLayer,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for Architecture {
    /// Filters 32/128/64 with width-5 kernels, pool 2, hidden widths 8/4,
    /// dropout 0.3.
    fn default() -> Self {
        Architecture {
            filters: vec![32, 128, 64],
            kernel_sizes: vec![5, 5, 5],
            pool: 2,
            fc: vec![8, 4],
            dropout: 0.3,
            padding: Padding::Same,
            embedding: EmbeddingLayer::Penultimate,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl Architecture {
    pub fn build(&self, channels: usize, window_len: usize, num_classes: usize) -> ModelConfig {
        ModelConfig {
            channels,
            window_len,
            num_classes,
            filters: self.filters.clone(),
            kernel_sizes: self.kernel_sizes.clone(),
            pool: self.pool,
            fc: self.fc.clone(),
            dropout: self.dropout,
            padding: self.padding,
            embedding: self.embedding,
            bn_momentum: self.bn_momentum,
            bn_eps: self.bn_eps,
        }
    }
}

impl ModelConfig {
    pub fn new(channels: usize, window_len: usize, num_classes: usize) -> Self {
        Architecture::default().build(channels, window_len, num_classes)
    }

    fn pad_for(&self, kernel: usize) -> usize {
        match self.padding {
            Padding::Valid => 0,
            Padding::Same => kernel / 2,
        }
    }

    /// Sequence length after each conv block, or `None` if it collapses.
    fn trace(&self, window_len: usize) -> Option<Vec<usize>> {
        let mut len = window_len;
        let mut out = Vec::new();
        for &k in &self.kernel_sizes {
            let padded = len.checked_add(self.pad_for(k).checked_mul(2)?)?;
            if padded < k {
                return None;
            }
            len = (padded + 1 - k) / self.pool;
            if len == 0 {
                return None;
            }
            out.push(len);
        }
        Some(out)
    }

    pub fn min_window_len(&self) -> Option<usize> {
        (1..=1 << 16).find(|&w| self.trace(w).is_some())
    }

    pub fn flatten_len(&self) -> Result<usize> {
        let lens = self.trace(self.window_len).ok_or_else(|| {
            Error::contract(format!(
                "window length {} too short for this architecture; minimum is {}",
                self.window_len,
                self.min_window_len()
                    .map_or_else(|| "unbounded".to_string(), |w| w.to_string())
            ))
        })?;
        lens.last()
            .copied()
            .unwrap_or(self.window_len)
            .checked_mul(self.filters.last().copied().unwrap_or(self.channels))
            .ok_or_else(|| Error::contract("flattened feature size overflows"))
    }

    pub fn embedding_dim(&self) -> Result<usize> {
        match self.embedding {
            EmbeddingLayer::Penultimate => Ok(*self.fc.last().expect("validated")),
            EmbeddingLayer::Flatten => self.flatten_len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.num_classes >= 2, "need at least 2 classes");
        ensure!(self.channels >= 1, "need at least 1 channel");
        ensure!(
            !self.filters.is_empty() && self.filters.len() == self.kernel_sizes.len(),
            "filters and kernel_sizes must be non-empty and equally long"
        );
        ensure!(
            self.filters.iter().chain(&self.kernel_sizes).all(|&v| v >= 1),
            "filter counts and kernel sizes must be positive"
        );
        ensure!(!self.fc.is_empty() && self.fc.iter().all(|&v| v >= 1), "fc widths must be positive");
        ensure!(self.pool >= 1, "pool size must be positive");
        ensure!((0.0..1.0).contains(&self.dropout), "dropout must lie in [0, 1)");
        ensure!(
            self.bn_momentum > 0.0 && self.bn_momentum <= 1.0 && self.bn_eps > 0.0,
            "invalid batchnorm momentum/epsilon"
        );
        self.flatten_len().map(|_| ())
    }
}

/// One named parameter array.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Array,
    /// Running batchnorm statistics are stored here too, untrained.
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameters {
    pub entries: Vec<Param>,
}

impl Parameters {
    pub fn get(&self, name: &str) -> Option<&Array> {
        self.entries.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    fn index(&self, name: &str) -> usize {
        self.entries
            .iter()
            .position(|p| p.name == name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn trainable(&self) -> impl Iterator<Item = &Param> {
        self.entries.iter().filter(|p| p.trainable)
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|p| p.value.is_finite())
    }

    /// Record every trainable array on `tape`, in entry order.
    pub fn register(&self, tape: &mut Tape) -> Result<ParamVars> {
        let mut vars = Vec::with_capacity(self.entries.len());
        for p in &self.entries {
            vars.push(if p.trainable {
                Some(tape.param(p.value.clone())?)
            } else {
                None
            });
        }
        Ok(ParamVars { vars })
    }

    /// Fold train-mode batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, stats: &[BatchStats], momentum: f64) {
        for (i, s) in stats.iter().enumerate() {
            let unbias = if s.count > 1 {
                s.count as f64 / (s.count - 1) as f64
            } else {
                1.0
            };
            let m = self.index(&format!("bn{i}.running_mean"));
            for (r, &v) in self.entries[m].value.data_mut().iter_mut().zip(&s.mean) {
                *r = (1.0 - momentum) * *r + momentum * v;
            }
            let v = self.index(&format!("bn{i}.running_var"));
            for (r, &x) in self.entries[v].value.data_mut().iter_mut().zip(&s.var) {
                *r = (1.0 - momentum) * *r + momentum * x * unbias;
            }
        }
    }
}

/// Tape handles for the trainable entries of a [`Parameters`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: Vec<Option<Var>>,
}

impl ParamVars {
    /// Rebuild handles from trainable vars given in entry order.
    pub fn from_trainable(params: &Parameters, vars: &[Var]) -> Result<Self> {
        let mut it = vars.iter().copied();
        let out = ParamVars {
            vars: params
                .entries
                .iter()
                .map(|p| if p.trainable { it.next() } else { None })
                .collect(),
        };
        ensure!(
            it.next().is_none() && out.vars.iter().flatten().count() == params.trainable().count(),
            "expected {} trainable vars, got {}",
            params.trainable().count(),
            vars.len()
        );
        Ok(out)
    }

    /// Trainable handles in entry order, matching [`Parameters::trainable`].
    pub fn trainable(&self) -> Vec<Var> {
        self.vars.iter().flatten().copied().collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub embedding: Var,
    pub logits: Var,
    pub probs: Var,
    /// Train mode only: one entry per batchnorm layer.
    pub bn_stats: Vec<BatchStats>,
}

/// Plain values from an eval-mode pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub embedding: Array,
    pub probs: Array,
}

impl Predictions {
    pub fn argmax(&self) -> Vec<usize> {
        (0..self.probs.rows()).map(|r| argmax(self.probs.row(r))).collect()
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Model { config })
    }

    /// Name, shape, trainable flag and fan-in (0 for non-weights) of every
    /// parameter array, in storage order.
    pub fn layout(&self) -> Result<Vec<(String, Vec<usize>, bool, usize)>> {
        let cfg = &self.config;
        cfg.validate()?;
        let mut out = Vec::new();
        let mut c_in = cfg.channels;
        for (i, (&f, &k)) in cfg.filters.iter().zip(&cfg.kernel_sizes).enumerate() {
            out.push((format!("conv{i}.weight"), vec![f, c_in, k], true, c_in * k));
            for (suffix, trainable) in [
                ("gamma", true),
                ("beta", true),
                ("running_mean", false),
                ("running_var", false),
            ] {
                out.push((format!("bn{i}.{suffix}"), vec![f], trainable, 0));
            }
            c_in = f;
        }
        let mut width = cfg.flatten_len()?;
        let layers = cfg
            .fc
            .iter()
            .enumerate()
            .map(|(i, &w)| (format!("fc{i}"), w))
            .chain(std::iter::once(("head".to_string(), cfg.num_classes)));
        for (name, w) in layers {
            out.push((format!("{name}.weight"), vec![width, w], true, width));
            out.push((format!("{name}.bias"), vec![w], true, 0));
            width = w;
        }
        Ok(out)
    }

    /// Fan-in scaled uniform weights, zero biases, unit batchnorm scale.
    pub fn init(&self, seed: u64) -> Result<Parameters> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = self
            .layout()?
            .into_iter()
            .map(|(name, shape, trainable, fan_in)| {
                let n: usize = shape.iter().product();
                let data = if fan_in > 0 {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                } else if name.ends_with("gamma") || name.ends_with("running_var") {
                    vec![1.0; n]
                } else {
                    vec![0.0; n]
                };
                Param {
                    name,
                    value: Array::from_parts(shape, data),
                    trainable,
                }
            })
            .collect();
        Ok(Parameters { entries })
    }

    pub fn check_params(&self, params: &Parameters) -> Result<()> {
        let layout = self.layout()?;
        ensure!(
            layout.len() == params.entries.len(),
            "parameter set has {} arrays, model expects {}",
            params.entries.len(),
            layout.len()
        );
        for ((name, shape, trainable, _), p) in layout.iter().zip(&params.entries) {
            ensure!(
                *name == p.name && shape.as_slice() == p.value.shape() && *trainable == p.trainable,
                "parameter {} does not match the model layout",
                p.name
            );
            ensure!(p.value.is_finite(), "parameter {} is not finite", p.name);
        }
        Ok(())
    }

    /// Forward pass on `batch: [B, C, W]` (a tape value).
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &Parameters,
        vars: &ParamVars,
        batch: Var,
        mode: Mode,
        dropout_seed: u64,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let shape = tape.value(batch).shape().to_vec();
        ensure!(
            shape.len() == 3 && shape[1] == cfg.channels && shape[2] == cfg.window_len,
            "batch shape {shape:?} does not match [B, {}, {}]",
            cfg.channels,
            cfg.window_len
        );
        let b = shape[0];
        ensure!(
            mode == Mode::Eval || b >= 2,
            "train mode needs a batch of at least 2 for batchnorm, got {b}"
        );
        let var = |name: &str| -> Result<Var> {
            let i = params.index(name);
            vars.vars[i].ok_or_else(|| Error::contract(format!("{name} is not registered")))
        };
        let mut h = batch;
        let mut bn_stats = Vec::new();
        for (i, &k) in cfg.kernel_sizes.iter().enumerate() {
            h = tape.conv1d(h, var(&format!("conv{i}.weight"))?, cfg.pad_for(k))?;
            let (g, bt) = (var(&format!("bn{i}.gamma"))?, var(&format!("bn{i}.beta"))?);
            h = match mode {
                Mode::Train => {
                    let (y, s) = tape.batchnorm_train(h, g, bt, cfg.bn_eps)?;
                    bn_stats.push(s);
                    y
                }
                Mode::Eval => {
                    let mean = params.get(&format!("bn{i}.running_mean")).expect("layout");
                    let var = params.get(&format!("bn{i}.running_var")).expect("layout");
                    tape.batchnorm_eval(h, g, bt, mean.data(), var.data(), cfg.bn_eps)?
                }
            };
            h = tape.relu(h)?;
            h = tape.maxpool1d(h, cfg.pool)?;
        }
        let flat = cfg.flatten_len()?;
        h = tape.reshape(h, &[b, flat])?;
        let mut embedding = h;
        let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
        for i in 0..cfg.fc.len() {
            h = tape.matmul(h, var(&format!("fc{i}.weight"))?)?;
            h = tape.add_bias(h, var(&format!("fc{i}.bias"))?)?;
            h = tape.relu(h)?;
            if i + 1 == cfg.fc.len() && cfg.embedding == EmbeddingLayer::Penultimate {
                embedding = h;
            }
            if mode == Mode::Train && cfg.dropout > 0.0 {
                let mask = dropout_mask(tape.value(h).shape(), cfg.dropout, &mut rng);
                h = tape.mul_const(h, mask)?;
            }
        }
        let logits = tape.matmul(h, var("head.weight")?)?;
        let logits = tape.add_bias(logits, var("head.bias")?)?;
        let probs = tape.softmax(logits)?;
        Ok(ForwardOutput {
            embedding,
            logits,
            probs,
            bn_stats,
        })
    }

    /// Eval-mode predictions, computed in chunks.
    pub fn predict(&self, params: &Parameters, batch: &Array) -> Result<Predictions> {
        let n = batch.rows();
        let per = batch.len() / n.max(1);
        let mut emb = Vec::new();
        let mut probs = Vec::new();
        let mut emb_dim = 0;
        for start in (0..n).step_by(256) {
            let end = (start + 256).min(n);
            let chunk = Array::new(
                vec![end - start, self.config.channels, self.config.window_len],
                batch.data()[start * per..end * per].to_vec(),
            )?;
            let mut tape = Tape::new();
            let vars = params.register(&mut tape)?;
            let x = tape.constant(chunk)?;
            let out = self.forward(&mut tape, params, &vars, x, Mode::Eval, 0)?;
            let e = tape.value(out.embedding);
            emb_dim = e.cols();
            emb.extend_from_slice(e.data());
            probs.extend_from_slice(tape.value(out.probs).data());
        }
        Ok(Predictions {
            embedding: Array::new(vec![n, emb_dim], emb)?,
            probs: Array::new(vec![n, self.config.num_classes], probs)?,
        })
    }
}

/// Inverted-dropout mask: `1 / (1 - rate)` with probability `1 - rate`, else 0.
pub fn dropout_mask(shape: &[usize], rate: f64, rng: &mut impl Rng) -> Array {
    let keep = 1.0 - rate;
    let n = shape.iter().product();
    Array::from_parts(
        shape.to_vec(),
        (0..n)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect(),
    )
}

#[cfg(test)]
mod tests;
