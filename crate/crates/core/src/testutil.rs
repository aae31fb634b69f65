//! Shared helpers for unit tests.

use crate::autodiff::{Array, Tape, Var};
use crate::error::Result;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Array {
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn eval(build: &Build<'_>, inputs: &[Array]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.param(a.clone()).unwrap()).collect();
    let out = build(&mut tape, &vars).unwrap();
    tape.scalar(out).unwrap()
}

/// Largest per-input relative error `|g - fd| / (|g| + 1e-8)` in L2 norm.
pub fn fd_check(build: &Build<'_>, inputs: &[Array]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.param(a.clone()).unwrap()).collect();
    let out = build(&mut tape, &vars).unwrap();
    let grads = tape.grad(out, &vars).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (p, g) in grads.iter().enumerate() {
        let mut diff = 0.0;
        let mut norm = 0.0;
        for i in 0..inputs[p].len() {
            let mut plus = inputs.to_vec();
            plus[p].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[p].data_mut()[i] -= h;
            let fd = (eval(build, &plus) - eval(build, &minus)) / (2.0 * h);
            diff += (g.data()[i] - fd).powi(2);
            norm += g.data()[i].powi(2);
        }
        worst = worst.max(diff.sqrt() / (norm.sqrt() + 1e-8));
    }
    worst
}

