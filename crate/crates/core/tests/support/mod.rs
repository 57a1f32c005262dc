//! Finite-difference oracle shared by the gradient tests and the acceptance suite.
#![allow(dead_code)]

use care_core::autodiff::{ParamId, Tape, Var};
use care_core::loss::{combine_losses, CombineSettings, ConfidenceObjective};
use care_core::targets::TargetGranularity;
use care_core::tensor::Tensor;
use care_core::Result;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central-difference step.
pub const H: f32 = 1e-3;
/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
    (analytic - numeric).abs() / scale
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Uniform values that keep at least `margin` away from every kink.
pub fn avoiding(rng: &mut impl Rng, shape: &[usize], lo: f32, hi: f32, kinks: &[f32], margin: f32) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = rng.random_range(lo..hi);
            if kinks.iter().all(|k| (v - k).abs() > margin) {
                break v;
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Pairwise distinct values on a shuffled grid, so max-pool winners never swap under a step of `H`.
pub fn distinct(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f32> = (0..n).map(|i| (i as f32 - n as f32 / 2.0) * 0.01).collect();
    v.shuffle(rng);
    Tensor::new(shape, v).unwrap()
}

/// Gradients from the tape, every input registered as `ParamId(i)`.
pub fn analytic(inputs: &[Tensor], build: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>) -> Vec<Vec<f64>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().enumerate().map(|(i, t)| tape.param(ParamId(i), t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    let g = tape.backward(out).unwrap();
    (0..inputs.len())
        .map(|i| g.get(ParamId(i)).unwrap().data().iter().map(|&v| v as f64).collect())
        .collect()
}

/// Central differences of `f`, dividing by the step actually representable in f32.
pub fn numeric(inputs: &[Tensor], f: &dyn Fn(&[Tensor]) -> f64) -> Vec<Vec<f64>> {
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut grads = Vec::with_capacity(inputs[i].numel());
        for j in 0..inputs[i].numel() {
            let x = inputs[i].data()[j];
            let (xp, xm) = (x + H, x - H);
            work[i].data_mut()[j] = xp;
            let fp = f(&work);
            work[i].data_mut()[j] = xm;
            let fm = f(&work);
            work[i].data_mut()[j] = x;
            grads.push((fp - fm) / (xp as f64 - xm as f64));
        }
        out.push(grads);
    }
    out
}

pub fn max_rel_err(a: &[Vec<f64>], n: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(n.iter().flatten())
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

fn forward_value(inputs: &[Tensor], forward: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>) -> Tensor {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = forward(&mut tape, &vars).unwrap();
    tape.value(out).clone()
}

/// Checks a tensor-valued op through the scalar `sum(w * op(inputs))` with random
/// weights. The oracle side reduces in f64 so unaffected outputs cancel exactly.
pub fn check_op(seed: u64, inputs: &[Tensor], forward: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>) -> f64 {
    check_op_with(seed, inputs, forward, None)
}

/// As [`check_op`], with an optional f64 reference forward for the oracle side.
pub fn check_op_with(
    seed: u64,
    inputs: &[Tensor],
    forward: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>,
    reference: Option<&dyn Fn(&[Tensor]) -> Vec<f64>>,
) -> f64 {
    let shape = forward_value(inputs, forward).shape().to_vec();
    let mut r = rng(seed ^ 0x5EED);
    let n: usize = shape.iter().product();
    let w: Vec<f32> = (0..n)
        .map(|_| {
            let m = r.random_range(0.5f32..1.5);
            if r.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    let wt = Tensor::new(&shape, w.clone()).unwrap();
    let a = analytic(inputs, &|tape, vars| {
        let out = forward(tape, vars)?;
        let wv = tape.constant(wt.clone());
        let p = tape.mul(out, wv)?;
        tape.sum(p)
    });
    let num = numeric(inputs, &|xs| match reference {
        Some(f) => f(xs).iter().zip(&w).map(|(&o, &w)| o * w as f64).sum(),
        None => {
            let out = forward_value(xs, forward);
            out.data().iter().zip(&w).map(|(&o, &w)| o as f64 * w as f64).sum()
        }
    });
    max_rel_err(&a, &num)
}

/// A two-layer conv net: conv3x3(pad 1) + bias, relu, conv3x3(stride 2), summed with weights.
pub struct ConvNetCase {
    pub inputs: Vec<Tensor>,
}

/// Direct f64 convolution of `x: B×C×H×W` with `w: O×C×K×K`.
pub fn conv2d_ref(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Vec<f64> {
    let shape = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let xs: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    conv2d_f64(&xs, shape, w, bias, stride, pad)
}

/// f64 reference of [`conv_net_forward`].
pub fn conv_net_ref(v: &[Tensor]) -> Vec<f64> {
    let x = &v[0];
    let shape = [x.shape()[0], v[1].shape()[0], x.shape()[2], x.shape()[3]];
    let h: Vec<f64> = conv2d_ref(x, &v[1], Some(&v[2]), 1, 1).into_iter().map(|v| v.max(0.0)).collect();
    conv2d_f64(&h, shape, &v[3], Some(&v[4]), 2, 0)
}

fn conv2d_f64(x: &[f64], shape: [usize; 4], w: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Vec<f64> {
    let [b, c, h, wd] = shape;
    let [o, _, kh, kw] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0f64; b * o * oh * ow];
    for bi in 0..b {
        for oc in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = bias.map(|t| t.data()[oc] as f64).unwrap_or(0.0);
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x[((bi * c + ic) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((oc * c + ic) * kh + ky) * kw + kx] as f64;
                            }
                        }
                    }
                    out[((bi * o + oc) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    out
}

pub fn conv_net_forward(tape: &mut Tape, v: &[Var]) -> Result<Var> {
    let h = tape.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
    let h = tape.relu(h)?;
    tape.conv2d(h, v[3], Some(v[4]), 2, 0)
}

/// Draws net inputs whose hidden pre-activations stay clear of the relu kink.
pub fn conv_net_case(seed: u64) -> ConvNetCase {
    let mut r = rng(seed);
    loop {
        let inputs = vec![
            uniform(&mut r, &[2, 2, 6, 6], -1.0, 1.0),
            uniform(&mut r, &[3, 2, 3, 3], -0.5, 0.5),
            uniform(&mut r, &[3], -0.2, 0.2),
            uniform(&mut r, &[2, 3, 3, 3], -0.5, 0.5),
            uniform(&mut r, &[2], -0.2, 0.2),
        ];
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let pre = tape.conv2d(vars[0], vars[1], Some(vars[2]), 1, 1).unwrap();
        if tape.value(pre).data().iter().all(|v| v.abs() > 0.02) {
            return ConvNetCase { inputs };
        }
    }
}

/// Two-pixel toy model: `y_i = sigmoid(a x_i + b)`, `c_i = sigmoid(d x_i + e)`,
/// trained with the combined objective at `eta = 0.5`, `lambda = 1`.
pub struct ToyCase {
    pub x: [f32; 2],
    pub y_star: [f32; 2],
    /// `[a, b, d, e]`
    pub params: [f32; 4],
}

pub fn toy_case(seed: u64) -> ToyCase {
    let mut r = rng(seed);
    loop {
        let case = ToyCase {
            x: [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)],
            y_star: [r.random_range(0.0..1.0), r.random_range(0.0..1.0)],
            params: [
                r.random_range(-2.0..2.0),
                r.random_range(-1.0..1.0),
                r.random_range(-2.0..2.0),
                r.random_range(-1.0..1.0),
            ],
        };
        let (y, _) = toy_forward_f64(&case, &case.params.map(|v| v as f64));
        let e = [(y[0] - case.y_star[0] as f64).abs(), (y[1] - case.y_star[1] as f64).abs()];
        // clear of the |.| kink and of a rank swap under a step of H
        if e[0] > 0.01 && e[1] > 0.01 && (e[0] - e[1]).abs() > 0.01 {
            return case;
        }
    }
}

fn sig(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn toy_forward_f64(case: &ToyCase, p: &[f64; 4]) -> ([f64; 2], [f64; 2]) {
    let y = case.x.map(|x| sig(p[0] * x as f64 + p[1]));
    let c = case.x.map(|x| sig(p[2] * x as f64 + p[3]));
    (y, c)
}

/// Independent f64 evaluation of the combined objective for the toy model.
pub fn toy_loss_f64(case: &ToyCase, p: &[f64; 4]) -> f64 {
    let (y, c) = toy_forward_f64(case, p);
    let e = [(y[0] - case.y_star[0] as f64).abs(), (y[1] - case.y_star[1] as f64).abs()];
    // eta = 0.5 over two pixels keeps exactly the lower-error one
    let c_star = if e[0] <= e[1] { [1.0, 0.0] } else { [0.0, 1.0] };
    let l0 = (e[0] * e[0] + e[1] * e[1]) / 2.0;
    let l1 = (e[0] * (c[0] - c_star[0]).powi(2) + e[1] * (c[1] - c_star[1]).powi(2)) / 2.0;
    l0 + l1
}

pub fn toy_settings() -> CombineSettings {
    CombineSettings {
        objective: ConfidenceObjective::Care,
        eta: 0.5,
        lambda: 1.0,
        granularity: TargetGranularity::Pixel,
    }
}

/// Tape gradients of the toy objective against central differences of the f64 oracle.
pub fn check_toy(case: &ToyCase) -> f64 {
    let inputs: Vec<Tensor> = case.params.iter().map(|&v| Tensor::scalar(v)).collect();
    let a = analytic(&inputs, &|tape, v| {
        let x = tape.constant(Tensor::new(&[2], case.x.to_vec()).unwrap());
        let ys = tape.constant(Tensor::new(&[2], case.y_star.to_vec()).unwrap());
        let ax = tape.mul(v[0], x)?;
        let zy = tape.add(ax, v[1])?;
        let y = tape.sigmoid(zy)?;
        let dx = tape.mul(v[2], x)?;
        let zc = tape.add(dx, v[3])?;
        let c = tape.sigmoid(zc)?;
        Ok(combine_losses(tape, y, c, ys, &toy_settings())?.total)
    });
    let n = numeric(&inputs, &|xs| {
        let p = [0, 1, 2, 3].map(|i| xs[i].item().unwrap() as f64);
        toy_loss_f64(case, &p)
    });
    max_rel_err(&a, &n)
}

type Forward = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

pub struct OpCase {
    pub name: &'static str,
    pub seed: u64,
    pub inputs: Vec<Tensor>,
    pub forward: Forward,
    pub reference: Option<Box<dyn Fn(&[Tensor]) -> Vec<f64>>>,
}

impl OpCase {
    pub fn max_rel_err(&self) -> f64 {
        check_op_with(self.seed, &self.inputs, &*self.forward, self.reference.as_deref())
    }
}

fn dims(r: &mut impl Rng, rank: usize, lo: usize, hi: usize) -> Vec<usize> {
    (0..rank).map(|_| r.random_range(lo..=hi)).collect()
}

/// One seeded case of every primitive kind.
pub fn op_cases_for_seed(seed: u64) -> Vec<OpCase> {
    let mut r = rng(seed);
    let mut cases: Vec<OpCase> = Vec::new();
    let mut push = |name: &'static str, inputs: Vec<Tensor>, forward: Forward| {
        cases.push(OpCase {
            name,
            seed,
            inputs,
            forward,
            reference: None,
        })
    };

    let s = dims(&mut r, 3, 1, 4);
    push("add", vec![uniform(&mut r, &s, -1.0, 1.0), uniform(&mut r, &s, -1.0, 1.0)], Box::new(|t, v| t.add(v[0], v[1])));
    push("add_scalar_broadcast", vec![Tensor::scalar(r.random_range(-1.0..1.0)), uniform(&mut r, &s, -1.0, 1.0)], Box::new(|t, v| t.add(v[0], v[1])));
    push("sub", vec![uniform(&mut r, &s, -1.0, 1.0), uniform(&mut r, &s, -1.0, 1.0)], Box::new(|t, v| t.sub(v[0], v[1])));
    push("mul", vec![uniform(&mut r, &s, -1.0, 1.0), uniform(&mut r, &s, -1.0, 1.0)], Box::new(|t, v| t.mul(v[0], v[1])));
    push("mul_scalar_broadcast", vec![uniform(&mut r, &s, -1.0, 1.0), Tensor::scalar(r.random_range(-1.0..1.0))], Box::new(|t, v| t.mul(v[0], v[1])));
    let k: f32 = r.random_range(-2.0..2.0);
    push("scalar_mul", vec![uniform(&mut r, &s, -1.0, 1.0)], Box::new(move |t, v| t.scalar_mul(v[0], k)));
    push("scalar_add", vec![uniform(&mut r, &s, -1.0, 1.0)], Box::new(move |t, v| t.scalar_add(v[0], k)));
    let (m, kk, n) = (r.random_range(1..=5), r.random_range(1..=5), r.random_range(1..=5));
    push("matmul", vec![uniform(&mut r, &[m, kk], -1.0, 1.0), uniform(&mut r, &[kk, n], -1.0, 1.0)], Box::new(|t, v| t.matmul(v[0], v[1])));

    let (b, ci, co) = (r.random_range(1..=2), r.random_range(1..=3), r.random_range(1..=3));
    let (kh, stride, pad) = (r.random_range(1..=3), r.random_range(1..=2), r.random_range(0..=1));
    let (h, w) = (r.random_range(kh.max(3)..=7), r.random_range(kh.max(3)..=7));
    let with_bias = r.random_bool(0.5);
    let mut conv_in = vec![uniform(&mut r, &[b, ci, h, w], -1.0, 1.0), uniform(&mut r, &[co, ci, kh, kh], -0.5, 0.5)];
    if with_bias {
        conv_in.push(uniform(&mut r, &[co], -0.5, 0.5));
    }
    push(
        "conv2d",
        conv_in,
        Box::new(move |t, v| t.conv2d(v[0], v[1], v.get(2).copied(), stride, pad)),
    );

    push("relu", vec![avoiding(&mut r, &s, -1.0, 1.0, &[0.0], 0.01)], Box::new(|t, v| t.relu(v[0])));
    push("sigmoid", vec![uniform(&mut r, &s, -3.0, 3.0)], Box::new(|t, v| t.sigmoid(v[0])));
    push("exp", vec![uniform(&mut r, &s, -2.0, 2.0)], Box::new(|t, v| t.exp(v[0])));
    push("square", vec![uniform(&mut r, &s, -1.0, 1.0)], Box::new(|t, v| t.square(v[0])));
    push("abs", vec![avoiding(&mut r, &s, -1.0, 1.0, &[0.0], 0.01)], Box::new(|t, v| t.abs(v[0])));
    push("clamp", vec![avoiding(&mut r, &s, -1.0, 1.0, &[-0.5, 0.5], 0.01)], Box::new(|t, v| t.clamp(v[0], -0.5, 0.5)));
    push("mean", vec![uniform(&mut r, &s, -1.0, 1.0)], Box::new(|t, v| t.mean(v[0])));
    let axis = r.random_range(0..s.len());
    push("mean_axis", vec![uniform(&mut r, &s, -1.0, 1.0)], Box::new(move |t, v| t.mean_axis(v[0], axis)));
    push("sum", vec![uniform(&mut r, &s, -1.0, 1.0)], Box::new(|t, v| t.sum(v[0])));

    let (hh, ww) = (2 * r.random_range(1..=3), 2 * r.random_range(1..=3));
    let parts: Vec<Tensor> = (0..r.random_range(2..=3)).map(|_| {
        let c = r.random_range(1..=3);
        uniform(&mut r, &[b, c, hh, ww], -1.0, 1.0)
    }).collect();
    push("concat", parts, Box::new(|t, v| t.concat(v)));
    push("upsample2x", vec![uniform(&mut r, &[b, ci, hh / 2, ww / 2], -1.0, 1.0)], Box::new(|t, v| t.upsample2x(v[0])));
    push("maxpool2x", vec![distinct(&mut r, &[b, ci, hh, ww])], Box::new(|t, v| t.maxpool2x(v[0])));
    let map64 = |f: fn(f64) -> f64| -> Box<dyn Fn(&[Tensor]) -> Vec<f64>> {
        Box::new(move |xs: &[Tensor]| xs[0].data().iter().map(|&v| f(v as f64)).collect())
    };
    for case in cases.iter_mut() {
        case.reference = match case.name {
            "conv2d" => Some(Box::new(move |xs: &[Tensor]| conv2d_ref(&xs[0], &xs[1], xs.get(2), stride, pad))),
            "sigmoid" => Some(map64(sig)),
            "exp" => Some(map64(f64::exp)),
            _ => None,
        };
    }
    cases
}

pub const GRAD_SEEDS: [u64; 3] = [11, 23, 47];
/// Relative-error bound for every gradient comparison.
pub const GRAD_TOL: f64 = 1e-3;
