#![allow(dead_code)]

use hesslens::nn::{BnMode, LayerSpec, Model, ModelConfig, ParamVector};
use hesslens::{Rng, Tensor};

/// Activation-pattern distance required before finite differences are
/// compared with exact second derivatives.
pub const KINK_MARGIN: f64 = 1e-3;

pub fn uniform_input(rng: &mut Rng, shape: [usize; 3], n: usize) -> Tensor {
    let [c, h, w] = shape;
    Tensor::new(vec![n, c, h, w], (0..n * c * h * w).map(|_| rng.uniform()).collect()).unwrap()
}

/// Small conv net with pooling and batch norm, ReLU everywhere.
pub fn small_conv(classes: usize) -> ModelConfig {
    use LayerSpec::*;
    ModelConfig {
        name: "small-conv".into(),
        input: [1, 6, 6],
        classes,
        layers: vec![
            Conv { kernel: 3, channels: 3, stride: 1 },
            Relu,
            MaxPool { size: 2, stride: 2 },
            BatchNorm,
            FullyConnected { out: 8 },
            Relu,
            FullyConnected { out: classes },
            SoftmaxCe,
        ],
    }
}

/// Logistic regression on `d` inputs: `s = Wᵀx + b` with `W` stored `[d, c]`.
pub fn logistic(shape: [usize; 3], classes: usize) -> Model {
    Model::new(ModelConfig::mlp("logreg", shape, &[], classes)).unwrap()
}

pub fn logistic_logits(theta: &ParamVector, x: &[f64], classes: usize) -> Vec<f64> {
    let d = x.len();
    (0..classes)
        .map(|j| (0..d).map(|i| theta.0[i * classes + j] * x[i]).sum::<f64>() + theta.0[d * classes + j])
        .collect()
}

/// `W H Wᵀ` for a `c × c` matrix `h`, giving the `d × d` input Hessian.
pub fn logistic_input_hessian(theta: &ParamVector, h: &[f64], d: usize, c: usize) -> Vec<f64> {
    let w = &theta.0[..d * c];
    let mut out = vec![0.0; d * d];
    for a in 0..d {
        for b in 0..d {
            let mut s = 0.0;
            for i in 0..c {
                for j in 0..c {
                    s += w[a * c + i] * h[i * c + j] * w[b * c + j];
                }
            }
            out[a * d + b] = s;
        }
    }
    out
}

pub fn shift(theta: &ParamVector, v: &[f64], h: f64) -> ParamVector {
    ParamVector(theta.0.iter().zip(v).map(|(t, d)| t + h * d).collect())
}

pub fn shift_tensor(x: &Tensor, v: &[f64], h: f64) -> Tensor {
    Tensor::new(x.shape().to_vec(), x.data().iter().zip(v).map(|(t, d)| t + h * d).collect()).unwrap()
}

pub fn theta_grad(model: &Model, theta: &ParamVector, x: &Tensor, y: &[usize]) -> Vec<f64> {
    model.loss_and_grad(theta, x, y, BnMode::Eval).unwrap().1 .0
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|q| q * q).sum::<f64>().sqrt();
    diff / scale.max(f64::MIN_POSITIVE)
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

/// One kink-free random point: parameters, a single input, its label and
/// unit directions in θ and in x, such that the activation pattern is the
/// same at the point and at both central-difference offsets.
pub struct SmoothPoint {
    pub theta: ParamVector,
    pub x: Tensor,
    pub y: usize,
    pub v: Vec<f64>,
    pub u: Vec<f64>,
}

pub fn find_smooth_point(model: &Model, h: f64, rng: &mut Rng, max_tries: usize) -> Option<SmoothPoint> {
    let shape = model.input_shape();
    for _ in 0..max_tries {
        let theta = model.init_params(rng);
        let x = uniform_input(rng, shape, 1);
        if model.kink_margin(&theta, &x).unwrap() < KINK_MARGIN {
            continue;
        }
        let v = rng.unit_vector(theta.len());
        let u = rng.unit_vector(x.len());
        let y = rng.below(model.classes());
        let smooth = [-h, h].iter().all(|&s| {
            model.kink_margin(&shift(&theta, &v, s), &x).unwrap() >= KINK_MARGIN
                && model.kink_margin(&theta, &shift_tensor(&x, &u, s)).unwrap() >= KINK_MARGIN
        });
        if smooth {
            return Some(SmoothPoint { theta, x, y, v, u });
        }
    }
    None
}

/// Relative error of `hvp_theta` and `hvp_input` against central
/// differences of the exact gradients.
pub fn fd_errors(model: &Model, p: &SmoothPoint, h: f64) -> (f64, f64) {
    let ys = [p.y];
    let hv = model.hvp_theta(&p.theta, &p.x, &ys, &p.v).unwrap();
    let gp = theta_grad(model, &shift(&p.theta, &p.v, h), &p.x, &ys);
    let gm = theta_grad(model, &shift(&p.theta, &p.v, -h), &p.x, &ys);
    let fd: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
    let e_theta = rel_err(&fd, &hv);

    let [c, hh, w] = model.input_shape();
    let u = Tensor::new(vec![c, hh, w], p.u.clone()).unwrap();
    let hu = model.hvp_input(&p.theta, &p.x, p.y, &u).unwrap();
    let gxp = model.input_grad(&p.theta, &shift_tensor(&p.x, &p.u, h), &ys).unwrap().1;
    let gxm = model.input_grad(&p.theta, &shift_tensor(&p.x, &p.u, -h), &ys).unwrap().1;
    let fdx: Vec<f64> = gxp.data().iter().zip(gxm.data()).map(|(a, b)| (a - b) / (2.0 * h)).collect();
    let e_x = rel_err(&fdx, hu.data());
    (e_theta, e_x)
}

/// `|⟨a, Hb⟩ − ⟨b, Ha⟩|` for unit `a`, `b`, relative to `max(‖Ha‖, ‖Hb‖)`,
/// for θ and x.
pub fn symmetry_errors(model: &Model, p: &SmoothPoint, rng: &mut Rng) -> (f64, f64) {
    let ys = [p.y];
    let a = rng.unit_vector(p.theta.len());
    let ha = model.hvp_theta(&p.theta, &p.x, &ys, &a).unwrap();
    let hv = model.hvp_theta(&p.theta, &p.x, &ys, &p.v).unwrap();
    let (l, r) = (dot(&a, &hv), dot(&p.v, &ha));
    let e_theta = (l - r).abs() / norm(&ha).max(norm(&hv)).max(1e-300);

    let shape = model.input_shape().to_vec();
    let b = rng.unit_vector(p.x.len());
    let hb = model.hvp_input(&p.theta, &p.x, p.y, &Tensor::new(shape.clone(), b.clone()).unwrap()).unwrap();
    let hu = model.hvp_input(&p.theta, &p.x, p.y, &Tensor::new(shape, p.u.clone()).unwrap()).unwrap();
    let (l, r) = (dot(&b, hu.data()), dot(&p.u, hb.data()));
    let e_x = (l - r).abs() / norm(hb.data()).max(norm(hu.data())).max(1e-300);
    (e_theta, e_x)
}
