//! Gradient and brute-force oracle suites shared by the integration tests and
//! the acceptance runner.
#![allow(dead_code)]

use factormix::autograd::{gradient_check, BatchNormState, Graph, Mode, Reduction, Var};
use factormix::mixture::{mix_codes, nearest_cross_class_codes, BankEntry, CodeBank};
use factormix::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRAD_EPS: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

pub struct SuiteReport {
    pub name: &'static str,
    pub cases: usize,
    /// Largest error seen; relative for gradients, absolute for oracles.
    pub worst: f64,
}

fn rng(op: &str, case: usize) -> ChaCha8Rng {
    let h = op.bytes().fold(0xcbf29ce484222325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3));
    ChaCha8Rng::seed_from_u64(h ^ (case as u64) << 32)
}

fn uniform(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = r.random_range(0.05..1.5);
            if r.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn simplex_rows(r: &mut ChaCha8Rng, rows: usize, k: usize) -> Tensor<f64> {
    let mut data = Vec::with_capacity(rows * k);
    for _ in 0..rows {
        let raw: Vec<f64> = (0..k).map(|_| r.random_range(0.05..1.0)).collect();
        let s: f64 = raw.iter().sum();
        data.extend(raw.iter().map(|v| v / s));
    }
    let shape = if rows == 1 { vec![k] } else { vec![rows, k] };
    Tensor::new(shape, data).unwrap()
}

/// Scalarizes a non-scalar output against a fixed random target so every
/// output element gets a distinct upstream weight.
fn against(g: &mut Graph<f64>, y: Var, target: &Tensor<f64>) -> Result<Var> {
    let t = g.input(target.clone());
    g.mse_loss(y, t, Reduction::Sum)
}

type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

fn case(op: &'static str, i: usize) -> (Vec<Tensor<f64>>, Build) {
    let mut r = rng(op, i);
    match op {
        "add" => {
            let shape = [r.random_range(1..4), r.random_range(1..6)];
            let a = uniform(&mut r, &shape, -1.0, 1.0);
            let b = uniform(&mut r, &shape, -1.0, 1.0);
            let t = uniform(&mut r, &shape, -1.0, 1.0);
            (vec![a, b], Box::new(move |g, v| {
                let y = g.add(v[0], v[1])?;
                against(g, y, &t)
            }))
        }
        "scale" => {
            let shape = [r.random_range(1..8)];
            let x = uniform(&mut r, &shape, -1.0, 1.0);
            let t = uniform(&mut r, &shape, -1.0, 1.0);
            let f = r.random_range(-3.0..3.0);
            (vec![x], Box::new(move |g, v| {
                let y = g.scale(v[0], f);
                against(g, y, &t)
            }))
        }
        "sum" => {
            let shape = [r.random_range(1..4), r.random_range(1..5)];
            let x = uniform(&mut r, &shape, -1.0, 1.0);
            (vec![x], Box::new(move |g, v| {
                let s = g.sum(v[0]);
                let s2 = g.add(s, s)?;
                let t = g.input(Tensor::scalar(0.3));
                g.mse_loss(s2, t, Reduction::Sum)
            }))
        }
        "reshape" => {
            let (a, b) = (r.random_range(1..4), r.random_range(1..5));
            let x = uniform(&mut r, &[a, b], -1.0, 1.0);
            let t = uniform(&mut r, &[b, a], -1.0, 1.0);
            (vec![x], Box::new(move |g, v| {
                let y = g.reshape(v[0], &[b, a])?;
                against(g, y, &t)
            }))
        }
        "conv2d" => {
            let c_in = r.random_range(1..4);
            let c_out = r.random_range(1..4);
            let k = if r.random_bool(0.7) { 3 } else { 1 };
            let stride = r.random_range(1..3);
            let (h, w) = (r.random_range(3..7), r.random_range(3..7));
            let batched = r.random_bool(0.5);
            let shape: Vec<usize> = if batched { vec![2, c_in, h, w] } else { vec![c_in, h, w] };
            let x = uniform(&mut r, &shape, -1.0, 1.0);
            let kern = uniform(&mut r, &[c_out, c_in, k, k], -1.0, 1.0);
            let bias = uniform(&mut r, &[c_out], -1.0, 1.0);
            let (ho, wo) = (h.div_ceil(stride), w.div_ceil(stride));
            let out: Vec<usize> = if batched { vec![2, c_out, ho, wo] } else { vec![c_out, ho, wo] };
            let t = uniform(&mut r, &out, -1.0, 1.0);
            (vec![x, kern, bias], Box::new(move |g, v| {
                let y = g.conv2d(v[0], v[1], v[2], stride)?;
                against(g, y, &t)
            }))
        }
        "dense" => {
            let (n, m) = (r.random_range(1..7), r.random_range(1..6));
            let batch = r.random_range(0..4);
            let xs: Vec<usize> = if batch == 0 { vec![n] } else { vec![batch, n] };
            let ts: Vec<usize> = if batch == 0 { vec![m] } else { vec![batch, m] };
            let x = uniform(&mut r, &xs, -1.0, 1.0);
            let wt = uniform(&mut r, &[m, n], -1.0, 1.0);
            let b = uniform(&mut r, &[m], -1.0, 1.0);
            let t = uniform(&mut r, &ts, -1.0, 1.0);
            (vec![x, wt, b], Box::new(move |g, v| {
                let y = g.dense(v[0], v[1], v[2])?;
                against(g, y, &t)
            }))
        }
        "relu" => {
            let shape = [r.random_range(1..4), r.random_range(2..7)];
            let x = away_from_zero(&mut r, &shape);
            let t = uniform(&mut r, &shape, -1.0, 1.0);
            (vec![x], Box::new(move |g, v| {
                let y = g.relu(v[0]);
                against(g, y, &t)
            }))
        }
        "sigmoid" => {
            let shape = [r.random_range(1..10)];
            let x = uniform(&mut r, &shape, -4.0, 4.0);
            let t = uniform(&mut r, &shape, 0.0, 1.0);
            (vec![x], Box::new(move |g, v| {
                let y = g.sigmoid(v[0]);
                against(g, y, &t)
            }))
        }
        "softmax" => {
            let k = r.random_range(2..7);
            let rows = r.random_range(1..4);
            let shape: Vec<usize> = if rows == 1 { vec![k] } else { vec![rows, k] };
            let x = uniform(&mut r, &shape, -3.0, 3.0);
            let t = uniform(&mut r, &shape, 0.0, 1.0);
            (vec![x], Box::new(move |g, v| {
                let y = g.softmax(v[0])?;
                against(g, y, &t)
            }))
        }
        "batchnorm_train" | "batchnorm_eval" => {
            let train = op == "batchnorm_train";
            let (n, d) = (r.random_range(2..6), r.random_range(1..5));
            let x = uniform(&mut r, &[n, d], -2.0, 2.0);
            let gamma = uniform(&mut r, &[d], 0.5, 1.5);
            let beta = uniform(&mut r, &[d], -0.5, 0.5);
            let t = uniform(&mut r, &[n, d], -1.0, 1.0);
            let mean: Vec<f64> = (0..d).map(|_| r.random_range(-0.5..0.5)).collect();
            let var: Vec<f64> = (0..d).map(|_| r.random_range(0.5..2.0)).collect();
            (vec![x, gamma, beta], Box::new(move |g, v| {
                let mut st = BatchNormState::new(d);
                st.running_mean = mean.clone();
                st.running_var = var.clone();
                let mode = if train { Mode::Train } else { Mode::Eval };
                let y = g.batchnorm(v[0], v[1], v[2], &mut st, mode)?;
                against(g, y, &t)
            }))
        }
        "dropout" => {
            let shape = [r.random_range(2..5), r.random_range(2..6)];
            let x = uniform(&mut r, &shape, -1.0, 1.0);
            let t = uniform(&mut r, &shape, -1.0, 1.0);
            let rate = r.random_range(0.1..0.7);
            let seed = r.random::<u64>();
            (vec![x], Box::new(move |g, v| {
                // same seed on every evaluation, so the mask is fixed
                let mut mask_rng = ChaCha8Rng::seed_from_u64(seed);
                let y = g.dropout(v[0], rate, &mut mask_rng, Mode::Train)?;
                against(g, y, &t)
            }))
        }
        "upsample2x" => {
            let (c, h, w) = (r.random_range(1..3), r.random_range(1..4), r.random_range(1..4));
            let x = uniform(&mut r, &[c, h, w], -1.0, 1.0);
            let t = uniform(&mut r, &[c, 2 * h, 2 * w], -1.0, 1.0);
            (vec![x], Box::new(move |g, v| {
                let y = g.upsample2x(v[0])?;
                against(g, y, &t)
            }))
        }
        "concat" => {
            let rows = r.random_range(0..3);
            let (na, nb) = (r.random_range(1..5), r.random_range(1..5));
            let sh = |n: usize| -> Vec<usize> { if rows == 0 { vec![n] } else { vec![rows, n] } };
            let a = uniform(&mut r, &sh(na), -1.0, 1.0);
            let b = uniform(&mut r, &sh(nb), -1.0, 1.0);
            let t = uniform(&mut r, &sh(na + nb), -1.0, 1.0);
            (vec![a, b], Box::new(move |g, v| {
                let y = g.concat(v[0], v[1])?;
                against(g, y, &t)
            }))
        }
        "mse_loss" => {
            let shape = [r.random_range(1..4), r.random_range(1..6)];
            let a = uniform(&mut r, &shape, -1.0, 1.0);
            let b = uniform(&mut r, &shape, -1.0, 1.0);
            let red = [Reduction::Sum, Reduction::SumPerSample, Reduction::Mean][i % 3];
            (vec![a, b], Box::new(move |g, v| g.mse_loss(v[0], v[1], red)))
        }
        "cross_entropy" => {
            let k = r.random_range(2..6);
            let rows = r.random_range(1..4);
            let p = simplex_rows(&mut r, rows, k);
            let t = simplex_rows(&mut r, rows, k);
            (vec![p], Box::new(move |g, v| {
                let tv = g.input(t.clone());
                g.cross_entropy(v[0], tv)
            }))
        }
        "mse_of_dense" => {
            let (n, m) = (r.random_range(2..6), r.random_range(2..5));
            let x = uniform(&mut r, &[n], -1.0, 1.0);
            let wt = uniform(&mut r, &[m, n], -1.0, 1.0);
            let b = uniform(&mut r, &[m], -1.0, 1.0);
            let t = uniform(&mut r, &[m], -1.0, 1.0);
            (vec![x, wt, b], Box::new(move |g, v| {
                let y = g.dense(v[0], v[1], v[2])?;
                let y = g.relu(y);
                let y = g.sigmoid(y);
                against(g, y, &t)
            }))
        }
        other => panic!("no gradient case for {other}"),
    }
}

pub const GRADIENT_OPS: [&str; 17] = [
    "add",
    "scale",
    "sum",
    "reshape",
    "conv2d",
    "dense",
    "relu",
    "sigmoid",
    "softmax",
    "batchnorm_train",
    "batchnorm_eval",
    "dropout",
    "upsample2x",
    "concat",
    "mse_loss",
    "cross_entropy",
    "mse_of_dense",
];

/// Worst relative gradient error per op over `cases` seeded cases each.
pub fn gradient_suite(cases: usize) -> Vec<SuiteReport> {
    GRADIENT_OPS
        .iter()
        .map(|&name| {
            let worst = (0..cases)
                .map(|i| {
                    let (inputs, build) = case(name, i);
                    gradient_check(build, &inputs, GRAD_EPS).unwrap_or(f64::INFINITY)
                })
                .fold(0.0, f64::max);
            SuiteReport { name, cases, worst }
        })
        .collect()
}

pub fn conv_reference<T: factormix::Real>(x: &[T], c_in: usize, h: usize, w: usize, k: &[T], c_out: usize, ks: usize, b: &[T], stride: usize) -> Vec<T> {
    let pad = (ks / 2) as isize;
    let (ho, wo) = (h.div_ceil(stride), w.div_ceil(stride));
    let mut out = vec![T::zero(); c_out * ho * wo];
    for o in 0..c_out {
        for i in 0..ho {
            for j in 0..wo {
                let mut acc = b[o];
                for c in 0..c_in {
                    for di in 0..ks {
                        for dj in 0..ks {
                            let y = (i * stride + di) as isize - pad;
                            let xx = (j * stride + dj) as isize - pad;
                            if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                continue;
                            }
                            acc = acc + k[((o * c_in + c) * ks + di) * ks + dj] * x[(c * h + y as usize) * w + xx as usize];
                        }
                    }
                }
                out[(o * ho + i) * wo + j] = acc;
            }
        }
    }
    out
}

fn f32_tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0f32..1.0)).collect()).unwrap()
}

fn max_abs(a: impl IntoIterator<Item = f64>, b: impl IntoIterator<Item = f64>) -> f64 {
    a.into_iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Same-precision loop references at 32 and 64 bit; the larger deviation.
fn oracle_conv(i: usize) -> f64 {
    let mut r = rng("oracle conv2d", i);
    let c_in = r.random_range(1..4);
    let c_out = r.random_range(1..5);
    let ks = [1, 3, 5][r.random_range(0..3)];
    let stride = r.random_range(1..3);
    let (h, w) = (r.random_range(ks..ks + 5), r.random_range(ks..ks + 5));
    let x = f32_tensor(&mut r, &[c_in, h, w]);
    let k = f32_tensor(&mut r, &[c_out, c_in, ks, ks]);
    let b = f32_tensor(&mut r, &[c_out]);
    fn run<T: factormix::Real>(x: &Tensor<T>, k: &Tensor<T>, b: &Tensor<T>, stride: usize) -> Vec<f64> {
        let mut g = Graph::<T>::new();
        let (xv, kv, bv) = (g.input(x.clone()), g.input(k.clone()), g.input(b.clone()));
        let y = g.conv2d(xv, kv, bv, stride).unwrap();
        g.value(y).data().iter().map(|v| v.as_f64()).collect()
    }
    let want32 = conv_reference(x.data(), c_in, h, w, k.data(), c_out, ks, b.data(), stride);
    let e32 = max_abs(run(&x, &k, &b, stride), want32.iter().map(|&v| v as f64));
    let (x64, k64, b64) = (x.cast::<f64>(), k.cast::<f64>(), b.cast::<f64>());
    let want64 = conv_reference(x64.data(), c_in, h, w, k64.data(), c_out, ks, b64.data(), stride);
    let e64 = max_abs(run(&x64, &k64, &b64, stride), want64);
    e32.max(e64)
}

fn oracle_dense(i: usize) -> f64 {
    let mut r = rng("oracle dense", i);
    let (n, m) = (r.random_range(1..12), r.random_range(1..9));
    let x = f32_tensor(&mut r, &[n]);
    let wt = f32_tensor(&mut r, &[m, n]);
    let b = f32_tensor(&mut r, &[m]);
    fn run<T: factormix::Real>(x: &Tensor<T>, wt: &Tensor<T>, b: &Tensor<T>) -> f64 {
        let (n, m) = (x.len(), b.len());
        let mut g = Graph::<T>::new();
        let (xv, wv, bv) = (g.input(x.clone()), g.input(wt.clone()), g.input(b.clone()));
        let y = g.dense(xv, wv, bv).unwrap();
        let (xd, wd, bd) = (x.data(), wt.data(), b.data());
        let want = (0..m).map(|o| {
            let mut acc = bd[o];
            for j in 0..n {
                acc = acc + wd[o * n + j] * xd[j];
            }
            acc.as_f64()
        });
        max_abs(g.value(y).data().iter().map(|v| v.as_f64()), want)
    }
    run(&x, &wt, &b).max(run(&x.cast::<f64>(), &wt.cast::<f64>(), &b.cast::<f64>()))
}

fn oracle_mse(i: usize) -> f64 {
    let mut r = rng("oracle mse", i);
    let shape = [r.random_range(1..5), r.random_range(1..9)];
    let a = uniform(&mut r, &shape, -2.0, 2.0);
    let b = uniform(&mut r, &shape, -2.0, 2.0);
    let mut g = Graph::<f64>::new();
    let (av, bv) = (g.input(a.clone()), g.input(b.clone()));
    let l = g.mse_loss(av, bv, Reduction::Sum).unwrap();
    let mut want = 0.0;
    for j in 0..a.len() {
        let d = a.data()[j] - b.data()[j];
        want += d * d;
    }
    (g.value(l).item() - want).abs()
}

fn oracle_cross_entropy(i: usize) -> f64 {
    let mut r = rng("oracle cross entropy", i);
    let k = r.random_range(2..7);
    let logits = uniform(&mut r, &[k], -3.0, 3.0);
    let target = simplex_rows(&mut r, 1, k);
    let mut g = Graph::<f64>::new();
    let (lv, tv) = (g.input(logits.clone()), g.input(target.clone()));
    let p = g.softmax(lv).unwrap();
    let l = g.cross_entropy(p, tv).unwrap();
    let probs = g.value(p).data().to_vec();
    let mut want = 0.0;
    for j in 0..k {
        want -= target.data()[j] * probs[j].max(1e-12).ln();
    }
    (g.value(l).item() - want).abs()
}

fn oracle_mix(i: usize) -> f64 {
    let mut r = rng("oracle mix_codes", i);
    let (n, dim) = (r.random_range(1..6), r.random_range(1..40));
    let codes: Vec<Vec<f32>> = (0..n).map(|_| (0..dim).map(|_| r.random_range(-3.0f32..3.0)).collect()).collect();
    let raw: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
    let s: f64 = raw.iter().sum();
    let props: Vec<f64> = raw.iter().map(|v| v / s).collect();
    let comps: Vec<(&[f32], f64)> = codes.iter().map(|c| c.as_slice()).zip(props.iter().copied()).collect();
    let got = mix_codes(&comps).unwrap();
    let mut want = vec![0.0f64; dim];
    for (c, p) in codes.iter().zip(&props) {
        for d in 0..dim {
            want[d] += p * c[d] as f64;
        }
    }
    max_abs(got.iter().map(|&v| v as f64), want.iter().map(|&v| v as f32 as f64))
}

/// 1.0 if the fast path disagrees with the exhaustive scan in any choice.
fn oracle_nearest(i: usize) -> f64 {
    let mut r = rng("oracle nearest", i);
    let classes = r.random_range(2..6);
    let dim = r.random_range(1..33);
    let mut next_id = 0u64;
    let mut bank = CodeBank { code_dim: dim, classes: vec![Vec::new(); classes] };
    let mut pool: Vec<Vec<f32>> = Vec::new();
    for class in bank.classes.iter_mut() {
        for _ in 0..r.random_range(1..51) {
            // coarse grid values force exact distance ties
            let code: Vec<f32> = if !pool.is_empty() && r.random_bool(0.15) {
                pool[r.random_range(0..pool.len())].clone()
            } else {
                (0..dim).map(|_| r.random_range(-2..3) as f32 * 0.5).collect()
            };
            pool.push(code.clone());
            class.push(BankEntry { id: next_id, code });
            next_id += 1;
        }
        // ids need not follow insertion order
        class.reverse();
    }
    let source = r.random_range(0..classes);
    let query: Vec<f32> = if r.random_bool(0.3) {
        pool[r.random_range(0..pool.len())].clone()
    } else {
        (0..dim).map(|_| r.random_range(-2..3) as f32 * 0.5).collect()
    };
    let got = nearest_cross_class_codes(&query, source, &bank).unwrap();
    let mut want = Vec::new();
    for (k, entries) in bank.classes.iter().enumerate() {
        if k == source {
            continue;
        }
        let mut best: Option<(f64, u64)> = None;
        for e in entries {
            let d: f64 = e.code.iter().zip(&query).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
            let better = match best {
                None => true,
                Some((bd, bid)) => d < bd || (d == bd && e.id < bid),
            };
            if better {
                best = Some((d, e.id));
            }
        }
        want.push((k, best.unwrap().1));
    }
    let got: Vec<(usize, u64)> = got.iter().map(|n| (n.class, n.id)).collect();
    if got == want {
        0.0
    } else {
        1.0
    }
}

pub struct OracleSpec {
    pub name: &'static str,
    pub tolerance: f64,
    run: fn(usize) -> f64,
}

pub const ORACLES: [OracleSpec; 6] = [
    OracleSpec { name: "conv2d", tolerance: 1e-6, run: oracle_conv },
    OracleSpec { name: "dense", tolerance: 1e-6, run: oracle_dense },
    OracleSpec { name: "mse_loss", tolerance: 1e-10, run: oracle_mse },
    OracleSpec { name: "cross_entropy", tolerance: 1e-10, run: oracle_cross_entropy },
    OracleSpec { name: "mix_codes", tolerance: 1e-10, run: oracle_mix },
    OracleSpec { name: "nearest_cross_class_codes", tolerance: 0.0, run: oracle_nearest },
];

pub fn oracle_suite(cases: usize) -> Vec<(SuiteReport, f64)> {
    ORACLES
        .iter()
        .map(|o| {
            let worst = (0..cases).map(o.run).fold(0.0, f64::max);
            (SuiteReport { name: o.name, cases, worst }, o.tolerance)
        })
        .collect()
}

/// First protocol violation for a seeded random dataset shape, if any:
/// partition, stratification, validation size and views per sample.
pub fn protocol_violation(seed: u64) -> Option<String> {
    use factormix::dataset::{epoch_views, generate_synthetic, kfold_split, AffineRanges};
    use std::collections::BTreeSet;

    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let k = r.random_range(2..6);
    let classes = r.random_range(2..6);
    let counts: Vec<usize> = (0..classes).map(|_| r.random_range(k..k + 60)).collect();
    let ds = generate_synthetic(&counts, 32, seed).ok()?;
    let plan = match kfold_split(&ds, k, 0.3, seed) {
        Ok(p) => p,
        Err(e) => return Some(format!("seed {seed}: split failed: {e}")),
    };
    let all: BTreeSet<usize> = (0..ds.len()).collect();
    let mut seen = BTreeSet::new();
    for (f, fold) in plan.folds.iter().enumerate() {
        for &i in &fold.test {
            if !seen.insert(i) {
                return Some(format!("seed {seed}: sample {i} in two test folds"));
            }
        }
        let mut parts: Vec<usize> = fold.train.iter().chain(&fold.val).chain(&fold.test).copied().collect();
        parts.sort_unstable();
        if parts != all.iter().copied().collect::<Vec<_>>() {
            return Some(format!("seed {seed}: fold {f} train/val/test do not partition the data"));
        }
        let portion = fold.train.len() + fold.val.len();
        let want = (0.3 * portion as f64).round() as usize;
        if fold.val.len() != want {
            return Some(format!("seed {seed}: fold {f} val {} != round(0.3*{portion}) = {want}", fold.val.len()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ f as u64);
        let views = epoch_views(&ds, &fold.train, 10, &AffineRanges::default(), &mut rng);
        let mut per = vec![0usize; ds.len()];
        views.iter().for_each(|v| per[v.index] += 1);
        if views.len() != 10 * fold.train.len() || fold.train.iter().any(|&i| per[i] != 10) {
            return Some(format!("seed {seed}: fold {f} epoch does not give 10 views per sample"));
        }
    }
    if seen != all {
        return Some(format!("seed {seed}: test folds miss samples"));
    }
    for c in 0..classes {
        let per_fold: Vec<usize> = plan
            .folds
            .iter()
            .map(|f| f.test.iter().filter(|&&i| ds.samples[i].label == c).count())
            .collect();
        let (lo, hi) = (per_fold.iter().min()?, per_fold.iter().max()?);
        if hi - lo > 1 {
            return Some(format!("seed {seed}: class {c} fold counts {per_fold:?}"));
        }
    }
    None
}

/// Table 3 of the paper, classic scheme (rows: ground truth cyst, met, hem, healthy).
pub const TABLE3_CLASSIC: [[u64; 4]; 4] = [[60, 5, 1, 0], [13, 43, 19, 6], [3, 19, 34, 9], [0, 0, 2, 25]];
/// Table 3, proposed scheme.
pub const TABLE3_PROPOSED: [[u64; 4]; 4] = [[62, 3, 1, 0], [5, 50, 23, 3], [3, 20, 41, 1], [0, 0, 0, 27]];
/// Table 2 per-fold accuracies in percent.
pub const TABLE2_BASELINE: [f64; 3] = [64.8, 69.5, 68.6];
pub const TABLE2_PROPOSED: [f64; 3] = [67.8, 75.6, 81.9];

pub fn table3(m: &[[u64; 4]; 4]) -> factormix::harness::ConfusionMatrix {
    factormix::harness::ConfusionMatrix::from_counts(m.iter().map(|r| r.to_vec()).collect()).expect("square")
}

/// Table 2/3 fixture failures; empty when every number reproduces.
pub fn table_fixture_failures() -> Vec<String> {
    use factormix::harness::aggregate_folds;
    let mut out = Vec::new();
    for (name, m, trace, mean, sd, folds) in [
        ("classic", &TABLE3_CLASSIC, 162, 67.6, 2.0, &TABLE2_BASELINE),
        ("proposed", &TABLE3_PROPOSED, 180, 75.0, 5.8, &TABLE2_PROPOSED),
    ] {
        let cm = table3(m);
        if cm.trace() != trace || cm.total() != 239 || cm.accuracy() != trace as f64 / 239.0 {
            out.push(format!("{name}: {}/{}", cm.trace(), cm.total()));
        }
        if cm.row_sums() != vec![66, 81, 65, 27] {
            out.push(format!("{name}: row sums {:?}", cm.row_sums()));
        }
        match aggregate_folds(folds) {
            Ok(a) if (a.mean - mean).abs() <= 0.1 && (a.population_sd - sd).abs() <= 0.1 => {}
            Ok(a) => out.push(format!("{name}: {:.3} ± {:.3}", a.mean, a.population_sd)),
            Err(e) => out.push(format!("{name}: {e}")),
        }
    }
    out
}

/// Mixtures forced to the source code alone, compared with plain
/// reconstruction on the first `n` benchmark samples. Returns the ids whose
/// image or target differs.
pub fn degenerate_mixture_mismatches(models: &factormix::models::ModelSet<f32>, ds: &factormix::dataset::Dataset, n: usize) -> Result<Vec<u64>> {
    use factormix::mixture::{build_code_bank, synthesize_mixture_sample, MixtureConfig, SoftTarget};
    use factormix::trainer::reconstruct;

    let bank = build_code_bank(ds, &models.encoder_c)?;
    let cfg = MixtureConfig::default();
    let k = ds.class_count();
    let mut forced = vec![0.0; k];
    forced[0] = 1.0;
    let mut r = factormix::rng::stream(17, &[]);
    let mut bad = Vec::new();
    for s in ds.samples.iter().take(n) {
        let syn = synthesize_mixture_sample(&s.image, s.label, s.id, &bank, models, &cfg, Some(&forced), &mut r)?;
        let rec = reconstruct(&models.encoder_c, &models.encoder_r, &models.decoder, &s.image)?;
        let same_image = syn.image.shape() == rec.shape()
            && syn.image.data().iter().zip(rec.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        if !same_image || syn.target != SoftTarget::one_hot(s.label, k) {
            bad.push(s.id);
        }
    }
    Ok(bad)
}

pub const SMALL_RUN_TOML: &str = "counts = [6, 8, 6, 4]\nepochs_step1 = 2\nepochs_step2 = 1\nviews_per_epoch = 1\nstep2_batch_size = 8\n";

fn files_under(root: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).expect("readable run dir") {
            let p = e.expect("dir entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).expect("under root").to_path_buf());
            }
        }
    }
    out.sort();
    out
}

/// Runs `factormix train` twice with one config into the same output path
/// and compares every produced file. Returns the compared file names.
pub fn cli_runs_identical(bin: &str, config_toml: &str) -> std::result::Result<Vec<String>, String> {
    use std::process::Command;
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = tmp.path().join("run.toml");
    std::fs::write(&cfg, config_toml).map_err(|e| e.to_string())?;
    let out = tmp.path().join("out");
    let mut snapshots = Vec::new();
    for _ in 0..2 {
        let _ = std::fs::remove_dir_all(&out);
        let st = Command::new(bin)
            .args(["train", "--config"])
            .arg(&cfg)
            .arg("--out-dir")
            .arg(&out)
            .output()
            .map_err(|e| e.to_string())?;
        if !st.status.success() {
            return Err(format!("train failed: {}", String::from_utf8_lossy(&st.stderr)));
        }
        let files = files_under(&out);
        let bytes: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(out.join(f)).expect("readable")).collect();
        snapshots.push((files, bytes, st.stdout));
    }
    let (b, a) = (snapshots.pop().expect("two runs"), snapshots.pop().expect("two runs"));
    if a.0 != b.0 {
        return Err(format!("file sets differ: {:?} vs {:?}", a.0, b.0));
    }
    let names: Vec<String> = a.0.iter().map(|p| p.display().to_string()).collect();
    for (i, n) in names.iter().enumerate() {
        if a.1[i] != b.1[i] {
            return Err(format!("{n} differs"));
        }
    }
    for needed in ["report.md", "results.json", "fold0/train_log.jsonl", "fold0/disentangle.ffck", "fold0/proposed.ffck"] {
        if !names.iter().any(|n| n == needed) {
            return Err(format!("{needed} was not written"));
        }
    }
    if a.2 != b.2 {
        return Err("stdout differs".into());
    }
    Ok(names)
}
