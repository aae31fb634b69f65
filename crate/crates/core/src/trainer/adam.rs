use super::OptimizerConfig;
use crate::autodiff::Array;
use crate::error::{ensure, Error, Result};
use crate::model::Parameters;

/// Adam with bias-corrected moments, one state slot per trainable array.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    m: Vec<Array>,
    v: Vec<Array>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(params: &Parameters, cfg: &OptimizerConfig) -> Self {
        let zeros: Vec<Array> = params
            .trainable()
            .map(|p| Array::zeros(p.value.shape()))
            .collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Apply one update. `grads` follows [`Parameters::trainable`] order.
    /// Nothing changes when a gradient is non-finite.
    pub fn step(&mut self, params: &mut Parameters, grads: &[Array], lr: f64) -> Result<()> {
        ensure!(
            grads.len() == self.m.len(),
            "{} gradients for {} trainable arrays",
            grads.len(),
            self.m.len()
        );
        for (g, m) in grads.iter().zip(&self.m) {
            if g.shape() != m.shape() {
                return Err(Error::Shape {
                    op: "adam",
                    left: m.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(Error::NonFinite { op: "adam" });
            }
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powf(self.t as f64);
        let c2 = 1.0 - self.beta2.powf(self.t as f64);
        let trainable = params.entries.iter_mut().filter(|p| p.trainable);
        for (((p, g), m), v) in trainable.zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let it = p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((w, &g), (m, v)) in it {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
