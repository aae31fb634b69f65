use super::array::Array;
use super::kernels::{self, ConvDims};
use crate::error::{Error, Result};

/// Probability floor applied before every logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Array),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    AddBias {
        x: Var,
        bias: Var,
        inner: usize,
    },
    Conv1d {
        x: Var,
        w: Var,
        dims: ConvDims,
        cols: Vec<f64>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        dims: (usize, usize, usize),
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        dims: (usize, usize, usize),
    },
    Reshape(Var),
    SelectRows(Var, Vec<usize>),
    PairwiseSqDists(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Array,
    op: Op,
    needs_grad: bool,
}

/// Batch statistics observed by a train-mode batchnorm, per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    /// Number of values each statistic was computed from.
    pub count: usize,
}

/// Reverse-mode recording of primitive operations.
///
/// Every operation appends a node holding its forward value; [`Tape::grad`]
/// replays the record backwards. Values are immutable once recorded.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dims3(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [b, c] => Ok((b, c, 1)),
        [b, c, l] => Ok((b, c, l)),
        _ => Err(Error::contract(format!(
            "expected a [B, C] or [B, C, L] array, got {shape:?}"
        ))),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array, op: Op, needs_grad: bool, name: &'static str) -> Result<Var> {
        value.require_finite(name)?;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Register a differentiable leaf.
    pub fn param(&mut self, value: Array) -> Result<Var> {
        self.push(value, Op::Leaf, true, "param")
    }

    /// Register a leaf that receives no gradient.
    pub fn constant(&mut self, value: Array) -> Result<Var> {
        self.push(value, Op::Leaf, false, "constant")
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        let a = self.value(v);
        if a.is_scalar() {
            Ok(a.data()[0])
        } else {
            Err(Error::contract(format!(
                "expected a scalar, got shape {:?}",
                a.shape()
            )))
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ndim() != 2 || bv.ndim() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::Shape {
                op: "matmul",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, false);
        let ng = self.ng(a) || self.ng(b);
        self.push(Array::from_parts(vec![m, n], out), Op::MatMul(a, b), ng, "matmul")
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: fn(f64, f64) -> f64) -> Result<Array> {
        let (av, bv) = (self.value(a), self.value(b));
        av.same_shape(bv, name)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Array::from_parts(av.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "add", |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "sub", |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "mul", |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng, "mul")
    }

    /// Elementwise product with a fixed array (masks, one-hot selectors).
    pub fn mul_const(&mut self, a: Var, c: Array) -> Result<Var> {
        let av = self.value(a);
        av.same_shape(&c, "mul_const")?;
        c.require_finite("mul_const")?;
        let data = av.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        let out = Array::from_parts(av.shape().to_vec(), data);
        let ng = self.ng(a);
        self.push(out, Op::MulConst(a, c), ng, "mul_const")
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        if !k.is_finite() {
            return Err(Error::NonFinite { op: "scale" });
        }
        let out = self.value(a).map(|x| x * k);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, k), ng, "scale")
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Result<Var> {
        if !k.is_finite() {
            return Err(Error::NonFinite { op: "add_scalar" });
        }
        let out = self.value(a).map(|x| x + k);
        let ng = self.ng(a);
        self.push(out, Op::AddScalar(a), ng, "add_scalar")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        let ng = self.ng(a);
        self.push(out, Op::Exp(a), ng, "exp")
    }

    /// Natural log with inputs clamped to `[LOG_FLOOR, inf)`.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(LOG_FLOOR).ln());
        let ng = self.ng(a);
        self.push(out, Op::Log(a), ng, "log")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng, "relu")
    }

    /// Row-wise softmax over the last axis of a 2-D array.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.ndim() != 2 {
            return Err(Error::contract(format!(
                "softmax expects [B, K], got {:?}",
                av.shape()
            )));
        }
        let out = softmax_rows(av);
        let ng = self.ng(a);
        self.push(out, Op::Softmax(a), ng, "softmax")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Array::scalar(s), Op::Sum(a), ng, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).mean();
        let ng = self.ng(a);
        self.push(Array::scalar(s), Op::Mean(a), ng, "mean")
    }

    /// Add a per-feature bias: `[B, F] + [F]` or per-channel `[B, C, L] + [C]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let (b, c, l) = dims3(xv.shape())?;
        if bv.len() != c {
            return Err(Error::Shape {
                op: "add_bias",
                left: xv.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let mut out = xv.data().to_vec();
        for bi in 0..b {
            for ci in 0..c {
                let k = bv.data()[ci];
                out[(bi * c + ci) * l..][..l].iter_mut().for_each(|v| *v += k);
            }
        }
        let out = Array::from_parts(xv.shape().to_vec(), out);
        let ng = self.ng(x) || self.ng(bias);
        self.push(out, Op::AddBias { x, bias, inner: l }, ng, "add_bias")
    }

    /// 1-D convolution, stride 1, with `pad` zeros on both ends
    /// (`pad = 0` is valid padding). `x: [B, C_in, L]`, `w: [C_out, C_in, K]`.
    pub fn conv1d(&mut self, x: Var, w: Var, pad: usize) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let bad = || Error::Shape {
            op: "conv1d",
            left: xv.shape().to_vec(),
            right: wv.shape().to_vec(),
        };
        let (&[batch, c_in, len], &[c_out, wc, kernel]) = (xv.shape(), wv.shape()) else {
            return Err(bad());
        };
        if wc != c_in || len + 2 * pad < kernel {
            return Err(bad());
        }
        let dims = ConvDims {
            batch,
            c_in,
            len,
            c_out,
            kernel,
            pad,
        };
        let (out, cols) = kernels::conv1d_forward(xv.data(), wv.data(), dims);
        let out = Array::from_parts(vec![batch, c_out, dims.out_len()], out);
        let ng = self.ng(x) || self.ng(w);
        let cols = if ng { cols } else { Vec::new() };
        self.push(out, Op::Conv1d { x, w, dims, cols }, ng, "conv1d")
    }

    /// Non-overlapping max pooling along the last axis, floor mode.
    pub fn maxpool1d(&mut self, x: Var, size: usize) -> Result<Var> {
        let xv = self.value(x);
        let len = *xv.shape().last().unwrap_or(&0);
        if size == 0 || xv.ndim() < 2 || len < size {
            return Err(Error::contract(format!(
                "maxpool1d: size {size} does not fit shape {:?}",
                xv.shape()
            )));
        }
        let outer = xv.len() / len;
        let (out, argmax) = kernels::maxpool1d_forward(xv.data(), outer, len, size);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = len / size;
        let ng = self.ng(x);
        self.push(Array::from_parts(shape, out), Op::MaxPool { x, argmax }, ng, "maxpool1d")
    }

    /// Train-mode batch normalization over every axis but the channel axis.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let xv = self.value(x);
        let dims = dims3(xv.shape())?;
        let (b, c, l) = dims;
        if b * l < 2 {
            return Err(Error::contract(
                "batchnorm in train mode needs at least 2 values per channel",
            ));
        }
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.len() != c || bv.len() != c {
            return Err(Error::Shape {
                op: "batchnorm",
                left: xv.shape().to_vec(),
                right: gv.shape().to_vec(),
            });
        }
        let f = kernels::batchnorm_train_forward(xv.data(), b, c, l, gv.data(), bv.data(), eps);
        let out = Array::from_parts(xv.shape().to_vec(), f.out);
        let stats = BatchStats {
            mean: f.mean,
            var: f.var,
            count: b * l,
        };
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let op = Op::BatchNormTrain {
            x,
            gamma,
            beta,
            xhat: f.xhat,
            inv_std: f.inv_std,
            dims,
        };
        Ok((self.push(out, op, ng, "batchnorm")?, stats))
    }

    /// Eval-mode batch normalization using fixed statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let xv = self.value(x);
        let dims = dims3(xv.shape())?;
        let (b, c, l) = dims;
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.len() != c || bv.len() != c || mean.len() != c || var.len() != c {
            return Err(Error::Shape {
                op: "batchnorm",
                left: xv.shape().to_vec(),
                right: vec![mean.len()],
            });
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * l;
                for i in off..off + l {
                    xhat[i] = (xv.data()[i] - mean[ci]) * inv_std[ci];
                    out[i] = gv.data()[ci] * xhat[i] + bv.data()[ci];
                }
            }
        }
        let out = Array::from_parts(xv.shape().to_vec(), out);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let op = Op::BatchNormEval {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            dims,
        };
        self.push(out, op, ng, "batchnorm")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let ng = self.ng(x);
        self.push(out, Op::Reshape(x), ng, "reshape")
    }

    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let out = self.value(x).select_rows(idx)?;
        let ng = self.ng(x);
        self.push(out, Op::SelectRows(x, idx.to_vec()), ng, "select_rows")
    }

    /// Squared Euclidean distances between the rows of `a: [n, d]` and `b: [m, d]`.
    pub fn pairwise_sq_dists(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = pairwise_sq_dists(self.value(a), self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::PairwiseSqDists(a, b), ng, "pairwise_sq_dists")
    }

    /// Gradients of the scalar `loss` with respect to each of `wrt`.
    pub fn grad(&self, loss: Var, wrt: &[Var]) -> Result<Vec<Array>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "grad needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            self.backward_node(node, &g, &mut grads);
            // Leaves keep their gradient for the caller.
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        wrt.iter()
            .map(|&v| {
                let shape = self.value(v).shape().to_vec();
                let data = match grads.get(v.0).and_then(|g| g.clone()) {
                    Some(d) => d,
                    None => vec![0.0; self.value(v).len()],
                };
                let out = Array::from_parts(shape, data);
                out.require_finite("grad")?;
                Ok(out)
            })
            .collect()
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, delta: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(delta).for_each(|(e, d)| *e += d),
                slot @ None => *slot = Some(delta),
            }
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.ng(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g, false, val(*b), true, &mut da, false);
                    acc(*a, da);
                }
                if self.ng(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(k, m, n, val(*a), true, g, false, &mut db, false);
                    acc(*b, db);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, g.iter().zip(bv).map(|(g, y)| g * y).collect());
                acc(*b, g.iter().zip(av).map(|(g, x)| g * x).collect());
            }
            Op::MulConst(a, c) => {
                acc(*a, g.iter().zip(c.data()).map(|(g, y)| g * y).collect());
            }
            Op::Scale(a, k) => acc(*a, g.iter().map(|g| g * k).collect()),
            Op::AddScalar(a) => acc(*a, g.to_vec()),
            Op::Exp(a) => {
                let y = node.value.data();
                acc(*a, g.iter().zip(y).map(|(g, y)| g * y).collect());
            }
            Op::Log(a) => {
                let x = val(*a);
                acc(
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(g, &x)| if x > LOG_FLOOR { g / x } else { 0.0 })
                        .collect(),
                );
            }
            Op::Relu(a) => {
                let x = val(*a);
                acc(
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect(),
                );
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let k = y.cols();
                let mut dx = vec![0.0; y.len()];
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = &g[r * k..(r + 1) * k];
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..k {
                        dx[r * k + j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*a, dx);
            }
            Op::Sum(a) => acc(*a, vec![g[0]; self.value(*a).len()]),
            Op::Mean(a) => {
                let n = self.value(*a).len();
                acc(*a, vec![g[0] / n as f64; n]);
            }
            Op::AddBias { x, bias, inner } => {
                acc(*x, g.to_vec());
                if self.ng(*bias) {
                    let c = self.value(*bias).len();
                    let mut db = vec![0.0; c];
                    for (i, gv) in g.iter().enumerate() {
                        db[(i / inner) % c] += gv;
                    }
                    acc(*bias, db);
                }
            }
            Op::Conv1d { x, w, dims, cols } => {
                let (dx, dw) = kernels::conv1d_backward(g, cols, val(*w), *dims);
                acc(*x, dx);
                acc(*w, dw);
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![0.0; self.value(*x).len()];
                for (gv, &i) in g.iter().zip(argmax) {
                    dx[i] += gv;
                }
                acc(*x, dx);
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                dims: (b, c, l),
            } => {
                let (dx, dgamma, dbeta) = kernels::batchnorm_train_backward(
                    g,
                    xhat,
                    inv_std,
                    val(*gamma),
                    *b,
                    *c,
                    *l,
                );
                acc(*x, dx);
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                dims: (b, c, l),
            } => {
                let gam = val(*gamma);
                let mut dx = vec![0.0; g.len()];
                let mut dgamma = vec![0.0; *c];
                let mut dbeta = vec![0.0; *c];
                for bi in 0..*b {
                    for ci in 0..*c {
                        let off = (bi * c + ci) * l;
                        for i in off..off + l {
                            dx[i] = g[i] * gam[ci] * inv_std[ci];
                            dgamma[ci] += g[i] * xhat[i];
                            dbeta[ci] += g[i];
                        }
                    }
                }
                acc(*x, dx);
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::SelectRows(x, idx) => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = vec![0.0; xv.len()];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        dx[i * c + j] += g[r * c + j];
                    }
                }
                acc(*x, dx);
            }
            Op::PairwiseSqDists(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, m, d) = (av.rows(), bv.rows(), av.cols());
                let mut da = vec![0.0; n * d];
                let mut db = vec![0.0; m * d];
                for i in 0..n {
                    for j in 0..m {
                        let gij = 2.0 * g[i * m + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for k in 0..d {
                            let diff = av.data()[i * d + k] - bv.data()[j * d + k];
                            da[i * d + k] += gij * diff;
                            db[j * d + k] -= gij * diff;
                        }
                    }
                }
                acc(*a, da);
                acc(*b, db);
            }
        }
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(a: &Array) -> Array {
    let k = a.cols();
    let mut out = a.data().to_vec();
    for row in out.chunks_mut(k) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    Array::from_parts(a.shape().to_vec(), out)
}

/// Squared Euclidean distances between rows, computed directly so that
/// identical rows give exactly zero.
pub fn pairwise_sq_dists(a: &Array, b: &Array) -> Result<Array> {
    if a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.cols() {
        return Err(Error::Shape {
            op: "pairwise_sq_dists",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let (n, m) = (a.rows(), b.rows());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let ai = a.row(i);
        for j in 0..m {
            out[i * m + j] = ai
                .iter()
                .zip(b.row(j))
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
        }
    }
    Ok(Array::from_parts(vec![n, m], out))
}
