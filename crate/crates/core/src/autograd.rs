//! Reverse-mode automatic differentiation over a recorded computation.
//!
//! A [`Graph`] is an append-only record: every op pushes one node whose inputs
//! were pushed earlier, so node order is already a topological order and
//! [`Graph::backward`] is a single reverse sweep.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{Real, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Reduction applied by [`Graph::mse_loss`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Total sum of squared differences.
    Sum,
    /// Sum over each sample, averaged over the leading (batch) axis.
    SumPerSample,
    /// Mean over all elements.
    Mean,
}

/// Running statistics owned by a batch-normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub epsilon: T,
}

impl<T: Real> BatchNormState<T> {
    pub fn new(features: usize) -> Self {
        BatchNormState {
            running_mean: vec![T::zero(); features],
            running_var: vec![T::one(); features],
            momentum: T::lit(0.1),
            epsilon: T::lit(1e-5),
        }
    }
}

/// Cross-entropy clamps probabilities at this floor before taking the log.
pub const LOG_EPSILON: f64 = 1e-12;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Reshape(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
        batch: usize,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
        batch: usize,
        n: usize,
        m: usize,
    },
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        x_hat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Dropout {
        input: Var,
        mask: Vec<T>,
    },
    Upsample2x {
        input: Var,
        planes: usize,
        h: usize,
        w: usize,
    },
    Concat {
        a: Var,
        b: Var,
        rows: usize,
        na: usize,
        nb: usize,
    },
    Mse {
        a: Var,
        b: Var,
        scale: T,
    },
    CrossEntropy {
        probs: Var,
        target: Var,
        rows: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// The computation record: tensors plus the ops that produced them.
#[derive(Debug, Default)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `v`; zeros when `v` was not reachable from the root.
    pub fn get(&self, v: Var) -> Tensor<T> {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

fn split_rows(shape: &[usize]) -> (usize, usize) {
    match shape {
        [k] => (1, *k),
        [n, k] => (*n, *k),
        _ => (0, 0),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let value = self.value(a).map(|x| x * factor);
        self.push(value, Op::Scale(a, factor), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    /// 2-D convolution with zero half-padding (`k/2`), so the output extent is
    /// `ceil(H/stride) × ceil(W/stride)`. Accepts `[C,H,W]` or `[N,C,H,W]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ks = self.shape(kernel).to_vec();
        let (batch, c_in, h, w, batched) = match xs.as_slice() {
            &[c, h, w] => (1, c, h, w, false),
            &[n, c, h, w] => (n, c, h, w, true),
            _ => return Err(Error::shape("conv2d", &xs, &ks)),
        };
        let &[c_out, kc, kh, kw] = ks.as_slice() else {
            return Err(Error::shape("conv2d", &xs, &ks));
        };
        if kc != c_in || kh != kw {
            return Err(Error::shape("conv2d", &xs, &ks));
        }
        if kh % 2 == 0 || !(1..=2).contains(&stride) {
            return Err(Error::invalid(format!(
                "conv2d needs an odd kernel and stride 1 or 2, got kernel {kh} stride {stride}"
            )));
        }
        if h < kh || w < kh {
            return Err(Error::shape("conv2d", &xs, &ks));
        }
        if self.shape(bias) != [c_out] {
            return Err(Error::shape("conv2d bias", self.shape(bias), &[c_out]));
        }
        let geom = ConvGeom::new(c_in, h, w, c_out, kh, stride);
        let out = kernels::conv2d_forward(
            &geom,
            batch,
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
        );
        let shape = if batched {
            vec![batch, c_out, geom.h_out, geom.w_out]
        } else {
            vec![c_out, geom.h_out, geom.w_out]
        };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                batch,
            },
            &[input, kernel, bias],
        ))
    }

    /// Affine map `W·x + b`. Accepts `[n]` or `[N,n]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let (batch, n) = split_rows(&xs);
        let &[m, wn] = ws.as_slice() else {
            return Err(Error::shape("dense", &xs, &ws));
        };
        if batch == 0 || wn != n {
            return Err(Error::shape("dense", &xs, &ws));
        }
        if self.shape(bias) != [m] {
            return Err(Error::shape("dense bias", self.shape(bias), &[m]));
        }
        let out = kernels::dense_forward(
            batch,
            n,
            m,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let shape = if xs.len() == 1 { vec![m] } else { vec![batch, m] };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Dense {
                input,
                weight,
                bias,
                batch,
                n,
                m,
            },
            &[input, weight, bias],
        ))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Var {
        match kind {
            Activation::Relu => {
                let value = self.value(input).map(|x| x.max(T::zero()));
                self.push(value, Op::Relu(input), &[input])
            }
            Activation::Sigmoid => {
                let value = self.value(input).map(|x| T::one() / (T::one() + (-x).exp()));
                self.push(value, Op::Sigmoid(input), &[input])
            }
        }
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Relu)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Sigmoid)
    }

    /// Softmax over the last axis of `[k]` or `[N,k]`, with max subtraction.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let (rows, k) = split_rows(&xs);
        if rows == 0 || k == 0 {
            return Err(Error::shape("softmax", &xs, &[]));
        }
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(x.len());
        for r in 0..rows {
            let row = &x[r * k..(r + 1) * k];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
            let total: T = exps.iter().copied().sum();
            out.extend(exps.into_iter().map(|e| e / total));
        }
        let value = Tensor::new(xs, out)?;
        Ok(self.push(value, Op::Softmax(input), &[input]))
    }

    /// Batch normalization over the leading axis of `[N,D]` followed by the
    /// learnable scale/shift. Train mode uses batch statistics and updates
    /// `state`; eval mode uses the running statistics.
    pub fn batchnorm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState<T>,
        mode: Mode,
    ) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let (batch, d) = split_rows(&xs);
        if batch == 0 || self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("batchnorm", &xs, self.shape(gamma)));
        }
        if state.running_mean.len() != d {
            return Err(Error::shape("batchnorm state", &xs, &[state.running_mean.len()]));
        }
        let x = self.value(input).data();
        let (mean, inv_std, batch_stats) = match mode {
            Mode::Train => {
                if batch < 2 {
                    return Err(Error::invalid(
                        "batchnorm in train mode needs a batch of at least 2",
                    ));
                }
                let nf = T::lit(batch as f64);
                let mut mean = vec![T::zero(); d];
                for r in 0..batch {
                    for (m, &v) in mean.iter_mut().zip(&x[r * d..(r + 1) * d]) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= nf);
                let mut var = vec![T::zero(); d];
                for r in 0..batch {
                    for j in 0..d {
                        let c = x[r * d + j] - mean[j];
                        var[j] += c * c;
                    }
                }
                var.iter_mut().for_each(|v| *v /= nf);
                let unbias = nf / T::lit((batch - 1) as f64);
                let mo = state.momentum;
                for j in 0..d {
                    state.running_mean[j] = (T::one() - mo) * state.running_mean[j] + mo * mean[j];
                    state.running_var[j] =
                        (T::one() - mo) * state.running_var[j] + mo * var[j] * unbias;
                }
                let inv_std: Vec<T> = var
                    .iter()
                    .map(|&v| T::one() / (v + state.epsilon).sqrt())
                    .collect();
                (mean, inv_std, true)
            }
            Mode::Eval => {
                let inv_std = state
                    .running_var
                    .iter()
                    .map(|&v| T::one() / (v + state.epsilon).sqrt())
                    .collect();
                (state.running_mean.clone(), inv_std, false)
            }
        };
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut x_hat = Vec::with_capacity(x.len());
        let mut out = Vec::with_capacity(x.len());
        for r in 0..batch {
            for j in 0..d {
                let h = (x[r * d + j] - mean[j]) * inv_std[j];
                x_hat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let value = Tensor::new(xs, out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                x_hat,
                inv_std,
                batch_stats,
            },
            &[input, gamma, beta],
        ))
    }

    /// Inverted dropout: in train mode each element is zeroed with probability
    /// `rate` and survivors are scaled by `1/(1-rate)`. Eval mode and rate 0
    /// return `input` unchanged without drawing from `rng`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        input: Var,
        rate: f64,
        rng: &mut R,
        mode: Mode,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate {rate} outside [0,1)")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(input);
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let x = self.value(input);
        let mask: Vec<T> = (0..x.len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Dropout { input, mask }, &[input]))
    }

    /// Nearest-neighbour ×2 upsampling of `[C,H,W]` or `[N,C,H,W]`.
    pub fn upsample2x(&mut self, input: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() < 3 || xs.len() > 4 {
            return Err(Error::shape("upsample2x", &xs, &[]));
        }
        let rank = xs.len();
        let (h, w) = (xs[rank - 2], xs[rank - 1]);
        let planes: usize = xs[..rank - 2].iter().product();
        let out = kernels::upsample2x_forward(planes, h, w, self.value(input).data());
        let mut shape = xs.clone();
        shape[rank - 2] = 2 * h;
        shape[rank - 1] = 2 * w;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Upsample2x { input, planes, h, w }, &[input]))
    }

    /// Concatenation along the last axis of `[n]`/`[m]` or `[N,n]`/`[N,m]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (ra, na) = split_rows(&sa);
        let (rb, nb) = split_rows(&sb);
        if sa.len() != sb.len() || ra != rb || ra == 0 {
            return Err(Error::shape("concat", &sa, &sb));
        }
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(xa.len() + xb.len());
        for r in 0..ra {
            out.extend_from_slice(&xa[r * na..(r + 1) * na]);
            out.extend_from_slice(&xb[r * nb..(r + 1) * nb]);
        }
        let shape = if sa.len() == 1 {
            vec![na + nb]
        } else {
            vec![ra, na + nb]
        };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                a,
                b,
                rows: ra,
                na,
                nb,
            },
            &[a, b],
        ))
    }

    /// Squared L2 reconstruction loss `||recon - target||²` with the given reduction.
    pub fn mse_loss(&mut self, recon: Var, target: Var, reduction: Reduction) -> Result<Var> {
        let sa = self.shape(recon).to_vec();
        if sa != self.shape(target) {
            return Err(Error::shape("mse_loss", &sa, self.shape(target)));
        }
        let n = self.value(recon).len().max(1);
        let scale = match reduction {
            Reduction::Sum => T::one(),
            Reduction::SumPerSample if sa.len() >= 2 => T::one() / T::lit(sa[0] as f64),
            Reduction::SumPerSample => T::one(),
            Reduction::Mean => T::one() / T::lit(n as f64),
        };
        let total: T = self
            .value(recon)
            .data()
            .iter()
            .zip(self.value(target).data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        Ok(self.push(
            Tensor::scalar(total * scale),
            Op::Mse {
                a: recon,
                b: target,
                scale,
            },
            &[recon, target],
        ))
    }

    /// `-Σ target·log(max(pred, 1e-12))`, averaged over rows for `[N,k]`.
    /// Every target row must lie on the probability simplex.
    pub fn cross_entropy(&mut self, probs: Var, target: Var) -> Result<Var> {
        let sp = self.shape(probs).to_vec();
        if sp != self.shape(target) {
            return Err(Error::shape("cross_entropy", &sp, self.shape(target)));
        }
        let (rows, k) = split_rows(&sp);
        if rows == 0 || k == 0 {
            return Err(Error::shape("cross_entropy", &sp, &[]));
        }
        let t = self.value(target).data();
        for r in 0..rows {
            let row = &t[r * k..(r + 1) * k];
            let total: f64 = row.iter().map(|v| v.as_f64()).sum();
            if row.iter().any(|&v| v < T::zero()) || (total - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!(
                    "cross_entropy target row {r} is not on the simplex (sum {total})"
                )));
            }
        }
        let p = self.value(probs).data();
        let eps = T::lit(LOG_EPSILON);
        let total: T = p
            .iter()
            .zip(t)
            .map(|(&pv, &tv)| -tv * pv.max(eps).ln())
            .sum();
        let loss = total / T::lit(rows as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                probs,
                target,
                rows,
            },
            &[probs, target],
        ))
    }

    /// Reverse sweep from a scalar root. Gradients accumulate over every use of
    /// a node.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return Err(Error::invalid(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[id].take() else { continue };
            self.propagate(node, &dy, &mut grads);
            grads[id] = Some(dy);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn take_buf(&self, grads: &mut [Option<Vec<T>>], v: Var) -> Option<Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        Some(
            grads[v.0]
                .take()
                .unwrap_or_else(|| vec![T::zero(); self.nodes[v.0].value.len()]),
        )
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if let Some(mut buf) = self.take_buf(grads, v) {
            f(&mut buf);
            grads[v.0] = Some(buf);
        }
    }

    fn propagate(&self, node: &Node<T>, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    self.accumulate(grads, v, |g| {
                        g.iter_mut().zip(dy).for_each(|(g, &d)| *g += d)
                    });
                }
            }
            Op::Scale(a, f) => self.accumulate(grads, *a, |g| {
                g.iter_mut().zip(dy).for_each(|(g, &d)| *g += d * *f)
            }),
            Op::Sum(a) => self.accumulate(grads, *a, |g| g.iter_mut().for_each(|g| *g += dy[0])),
            Op::Reshape(a) => self.accumulate(grads, *a, |g| {
                g.iter_mut().zip(dy).for_each(|(g, &d)| *g += d)
            }),
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                batch,
            } => {
                let mut dx = self.take_buf(grads, *input);
                let mut dk = self.take_buf(grads, *kernel);
                let mut db = self.take_buf(grads, *bias);
                kernels::conv2d_backward(
                    geom,
                    *batch,
                    val(*input),
                    val(*kernel),
                    dy,
                    dx.as_deref_mut(),
                    dk.as_deref_mut(),
                    db.as_deref_mut(),
                );
                grads[input.0] = dx.or(grads[input.0].take());
                grads[kernel.0] = dk.or(grads[kernel.0].take());
                grads[bias.0] = db.or(grads[bias.0].take());
            }
            Op::Dense {
                input,
                weight,
                bias,
                batch,
                n,
                m,
            } => {
                let (batch, n, m) = (*batch, *n, *m);
                self.accumulate(grads, *input, |g| {
                    kernels::gemm_acc(batch, m, n, dy, val(*weight), g)
                });
                self.accumulate(grads, *weight, |g| {
                    let dyt = kernels::transpose(batch, m, dy);
                    kernels::gemm_acc(m, batch, n, &dyt, val(*input), g)
                });
                self.accumulate(grads, *bias, |g| {
                    for r in 0..batch {
                        for (g, &d) in g.iter_mut().zip(&dy[r * m..(r + 1) * m]) {
                            *g += d;
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let y = node.value.data();
                self.accumulate(grads, *a, |g| {
                    for ((g, &d), &yv) in g.iter_mut().zip(dy).zip(y) {
                        if yv > T::zero() {
                            *g += d;
                        }
                    }
                })
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                self.accumulate(grads, *a, |g| {
                    for ((g, &d), &yv) in g.iter_mut().zip(dy).zip(y) {
                        *g += d * yv * (T::one() - yv);
                    }
                })
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let (rows, k) = split_rows(node.value.shape());
                self.accumulate(grads, *a, |g| {
                    for r in 0..rows {
                        let yr = &y[r * k..(r + 1) * k];
                        let dr = &dy[r * k..(r + 1) * k];
                        let dot: T = yr.iter().zip(dr).map(|(&a, &b)| a * b).sum();
                        for j in 0..k {
                            g[r * k + j] += yr[j] * (dr[j] - dot);
                        }
                    }
                })
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                x_hat,
                inv_std,
                batch_stats,
            } => {
                let (batch, d) = split_rows(node.value.shape());
                let gm = val(*gamma);
                let mut sum_dy = vec![T::zero(); d];
                let mut sum_dy_xhat = vec![T::zero(); d];
                for r in 0..batch {
                    for j in 0..d {
                        sum_dy[j] += dy[r * d + j];
                        sum_dy_xhat[j] += dy[r * d + j] * x_hat[r * d + j];
                    }
                }
                self.accumulate(grads, *gamma, |g| {
                    g.iter_mut().zip(&sum_dy_xhat).for_each(|(g, &s)| *g += s)
                });
                self.accumulate(grads, *beta, |g| {
                    g.iter_mut().zip(&sum_dy).for_each(|(g, &s)| *g += s)
                });
                self.accumulate(grads, *input, |g| {
                    let nf = T::lit(batch as f64);
                    for r in 0..batch {
                        for j in 0..d {
                            let i = r * d + j;
                            g[i] += if *batch_stats {
                                gm[j] * inv_std[j] / nf
                                    * (nf * dy[i] - sum_dy[j] - x_hat[i] * sum_dy_xhat[j])
                            } else {
                                dy[i] * gm[j] * inv_std[j]
                            };
                        }
                    }
                });
            }
            Op::Dropout { input, mask } => self.accumulate(grads, *input, |g| {
                for ((g, &d), &m) in g.iter_mut().zip(dy).zip(mask) {
                    *g += d * m;
                }
            }),
            Op::Upsample2x { input, planes, h, w } => self.accumulate(grads, *input, |g| {
                kernels::upsample2x_backward(*planes, *h, *w, dy, g)
            }),
            Op::Concat { a, b, rows, na, nb } => {
                let width = na + nb;
                self.accumulate(grads, *a, |g| {
                    for r in 0..*rows {
                        for j in 0..*na {
                            g[r * na + j] += dy[r * width + j];
                        }
                    }
                });
                self.accumulate(grads, *b, |g| {
                    for r in 0..*rows {
                        for j in 0..*nb {
                            g[r * nb + j] += dy[r * width + na + j];
                        }
                    }
                });
            }
            Op::Mse { a, b, scale } => {
                let two = T::lit(2.0) * *scale * dy[0];
                let (xa, xb) = (val(*a), val(*b));
                self.accumulate(grads, *a, |g| {
                    for ((g, &p), &q) in g.iter_mut().zip(xa).zip(xb) {
                        *g += two * (p - q);
                    }
                });
                self.accumulate(grads, *b, |g| {
                    for ((g, &p), &q) in g.iter_mut().zip(xa).zip(xb) {
                        *g -= two * (p - q);
                    }
                });
            }
            Op::CrossEntropy {
                probs,
                target,
                rows,
            } => {
                let scale = dy[0] / T::lit(*rows as f64);
                let eps = T::lit(LOG_EPSILON);
                let (p, t) = (val(*probs), val(*target));
                self.accumulate(grads, *probs, |g| {
                    for ((g, &pv), &tv) in g.iter_mut().zip(p).zip(t) {
                        if pv > eps {
                            *g -= scale * tv / pv;
                        }
                    }
                });
                self.accumulate(grads, *target, |g| {
                    for (g, &pv) in g.iter_mut().zip(p) {
                        *g -= scale * pv.max(eps).ln();
                    }
                });
            }
        }
    }
}

/// Central-difference gradient of a scalar function.
pub fn finite_diff_gradient<T: Real>(
    mut f: impl FnMut(&Tensor<T>) -> T,
    x: &Tensor<T>,
    eps: T,
) -> Tensor<T> {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.push((up - down) / (T::lit(2.0) * eps));
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape as x")
}

/// Largest norm-wise relative error `|a - n| / max(|a|, |n|)` between the
/// analytic and central-difference gradients of `build` over every input.
/// A pair of all-zero gradients counts as error 0.
pub fn gradient_check<T: Real>(
    build: impl Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
    inputs: &[Tensor<T>],
    eps: T,
) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let root = build(&mut g, &vars)?;
    let grads = g.backward(root)?;
    let mut worst = 0.0f64;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]);
        let numeric = finite_diff_gradient(
            |probe| {
                let mut g = Graph::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| g.param(if j == i { probe.clone() } else { t.clone() }))
                    .collect();
                let root = build(&mut g, &vars).expect("forward succeeded once");
                g.value(root).item()
            },
            x,
            eps,
        );
        let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|e| e * e).sum::<f64>().sqrt();
        let diff = norm(&mut analytic.data().iter().zip(numeric.data()).map(|(a, n)| a.as_f64() - n.as_f64()));
        let scale = norm(&mut analytic.data().iter().map(|a| a.as_f64()))
            .max(norm(&mut numeric.data().iter().map(|n| n.as_f64())));
        if scale > 0.0 {
            worst = worst.max(diff / scale);
        } else if diff > 0.0 {
            worst = f64::INFINITY;
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_gives_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_f64([3], &[1.0, -2.0, 5.0]).unwrap());
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn reused_input_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_f64([2], &[0.5, 1.5]).unwrap());
        let y = g.add(x, x).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).data(), &[2.0, 2.0]);
    }

    #[test]
    fn unreachable_param_gets_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_f64([2], &[1.0, 2.0]).unwrap());
        let unused = g.param(Tensor::from_f64([3], &[1.0, 2.0, 3.0]).unwrap());
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(unused).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_f64([2], &[1.0, 2.0]).unwrap());
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_f64([3], &[-1.0, 0.0, 2.0]).unwrap());
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = g.input(Tensor::scalar(0.0));
        let s = g.sigmoid(z);
        assert_eq!(g.value(s).item(), 0.5);
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_f64([4], &[3.0; 4]).unwrap());
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.25; 4]);
        let x = g.input(Tensor::from_f64([2], &[1000.0, 0.0]).unwrap());
        let y = g.softmax(x).unwrap();
        let v = g.value(y).data();
        assert!(v.iter().all(|p| p.is_finite()));
        assert!((v[0] - 1.0).abs() < 1e-12 && v[1] < 1e-300);
    }

    #[test]
    fn concat_with_empty_is_identity() {
        let mut g = Graph::<f32>::new();
        let a = g.param(Tensor::vector(vec![1.0, 2.0]));
        let b = g.input(Tensor::vector(vec![]));
        let c = g.concat(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0]);
    }

    #[test]
    fn concat_backward_splits_ones() {
        let mut g = Graph::<f32>::new();
        let a = g.param(Tensor::vector(vec![1.0; 3]));
        let b = g.param(Tensor::vector(vec![2.0; 2]));
        let c = g.concat(a, b).unwrap();
        let s = g.sum(c);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(a).data(), &[1.0; 3]);
        assert_eq!(grads.get(b).data(), &[1.0; 2]);
    }

    #[test]
    fn concat_rank_mismatch() {
        let mut g = Graph::<f32>::new();
        let a = g.input(Tensor::vector(vec![1.0; 4]));
        let b = g.input(Tensor::new([2, 2], vec![1.0; 4]).unwrap());
        assert!(matches!(g.concat(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn mse_values() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::from_f64([2], &[1.0, 2.0]).unwrap());
        let b = g.input(Tensor::from_f64([2], &[0.0, 0.0]).unwrap());
        let l = g.mse_loss(a, b, Reduction::Sum).unwrap();
        assert_eq!(g.value(l).item(), 5.0);
        let l = g.mse_loss(a, a, Reduction::Sum).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let c = g.input(Tensor::from_f64([3], &[0.0; 3]).unwrap());
        assert!(g.mse_loss(a, c, Reduction::Sum).is_err());
    }

    #[test]
    fn cross_entropy_values() {
        let mut g = Graph::<f64>::new();
        let p = g.input(Tensor::from_f64([4], &[0.0, 1.0, 0.0, 0.0]).unwrap());
        let l = g.cross_entropy(p, p).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let u = g.input(Tensor::from_f64([4], &[0.25; 4]).unwrap());
        let l = g.cross_entropy(u, u).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);
        let bad = g.input(Tensor::from_f64([4], &[0.5, 0.6, 0.0, 0.0]).unwrap());
        assert!(matches!(g.cross_entropy(u, bad), Err(Error::Invalid(_))));
    }

    #[test]
    fn batchnorm_eval_identity_and_train_constant() {
        let mut g = Graph::<f64>::new();
        let mut state = BatchNormState::<f64>::new(3);
        let x = g.input(Tensor::from_f64([2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, -1.0]).unwrap());
        let gamma = g.param(Tensor::full([3], 1.0));
        let beta = g.param(Tensor::zeros([3]));
        let y = g.batchnorm(x, gamma, beta, &mut state, Mode::Eval).unwrap();
        assert!(g.value(y).max_abs_diff(g.value(x)) < 1e-4);

        let c = g.input(Tensor::full([4, 3], 7.0));
        let shift = g.param(Tensor::from_f64([3], &[0.5, -1.0, 2.0]).unwrap());
        let y = g.batchnorm(c, gamma, shift, &mut state, Mode::Train).unwrap();
        for row in g.value(y).unstack() {
            assert_eq!(row.data(), &[0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn batchnorm_train_rejects_single_sample() {
        let mut g = Graph::<f32>::new();
        let mut state = BatchNormState::<f32>::new(2);
        let x = g.input(Tensor::new([1, 2], vec![1.0, 2.0]).unwrap());
        let gm = g.param(Tensor::full([2], 1.0));
        let bt = g.param(Tensor::zeros([2]));
        assert!(g.batchnorm(x, gm, bt, &mut state, Mode::Train).is_err());
    }

    #[test]
    fn dropout_rate_zero_and_eval_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let y = g.dropout(x, 0.0, &mut rng, Mode::Train).unwrap();
        assert_eq!(g.value(y), g.value(x));
        let y = g.dropout(x, 0.5, &mut rng, Mode::Eval).unwrap();
        assert_eq!(g.value(y), g.value(x));
        assert!(g.dropout(x, 1.0, &mut rng, Mode::Train).is_err());
    }

    #[test]
    fn upsample_single_value() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::new([1, 1, 1], vec![4.5]).unwrap());
        let y = g.upsample2x(x).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 2, 2]);
        assert_eq!(g.value(y).data(), &[4.5; 4]);
    }

    #[test]
    fn conv_channel_mismatch_names_both_shapes() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros([2, 5, 5]));
        let k = g.param(Tensor::zeros([3, 1, 3, 3]));
        let b = g.param(Tensor::zeros([3]));
        match g.conv2d(x, k, b, 1) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 5, 5]);
                assert_eq!(rhs, vec![3, 1, 3, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn finite_diff_simple_functions() {
        let x = Tensor::<f64>::from_f64([2], &[1.0, 2.0]).unwrap();
        let g = finite_diff_gradient(|t| t.data().iter().sum(), &x, 1e-5);
        assert!(g.data().iter().all(|v| (v - 1.0).abs() < 1e-9));
        let g = finite_diff_gradient(|t| t.data().iter().map(|v| v * v).sum(), &x, 1e-5);
        assert!((g.data()[0] - 2.0).abs() < 1e-6 && (g.data()[1] - 4.0).abs() < 1e-6);
    }
}
