//! Top-k eigenpairs of θ- and x-Hessians by power iteration with deflation.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{ensure_dim, Error, Result};
use crate::nn::{Model, ParamVector};
use crate::tensor::{dot_unchecked, norm, orthonormalize_against, Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PowerIterParams {
    pub k: usize,
    /// Relative change of the Rayleigh quotient between iterations.
    pub tol: f64,
    pub max_iter: usize,
    /// When set, a pair only counts as converged once additionally
    /// `‖Hv − λv‖ ≤ factor · tol · |λ₁|`.
    pub residual_factor: Option<f64>,
}

impl Default for PowerIterParams {
    fn default() -> Self {
        PowerIterParams {
            k: 20,
            tol: 1e-4,
            max_iter: 500,
            residual_factor: None,
        }
    }
}

impl PowerIterParams {
    pub fn top1(tol: f64) -> Self {
        PowerIterParams {
            k: 1,
            tol,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EigenPair {
    /// Rayleigh quotient, signed.
    pub value: f64,
    pub vector: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Last relative change of the Rayleigh quotient.
    pub rel_change: f64,
    /// `‖Hv − λv‖` at the last iteration.
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subsample {
    pub size: usize,
    pub seed: u64,
    pub indices: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SpectrumResult {
    /// Ordered by |value| descending.
    pub pairs: Vec<EigenPair>,
    pub subsample: Option<Subsample>,
    /// ‖∇J‖ at the analysed point, when the caller computed it.
    pub grad_norm: Option<f64>,
    pub wall_time: Duration,
}

impl SpectrumResult {
    pub fn top(&self) -> Option<&EigenPair> {
        self.pairs.first()
    }

    pub fn all_converged(&self) -> bool {
        self.pairs.iter().all(|p| p.converged)
    }

    pub fn values(&self) -> Vec<f64> {
        self.pairs.iter().map(|p| p.value).collect()
    }
}

const START_ATTEMPTS: usize = 5;

fn check_finite(w: &[f64]) -> Result<()> {
    if w.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric("matrix-vector product returned a non-finite value".into()))
    }
}

/// Power iteration for the `k` largest-magnitude eigenpairs of a symmetric
/// operator given only as a matrix-vector product.
pub fn power_iteration_topk(
    mut hvp: impl FnMut(&[f64]) -> Result<Vec<f64>>,
    dim: usize,
    params: &PowerIterParams,
    rng: &mut Rng,
) -> Result<SpectrumResult> {
    ensure_dim!(
        params.k <= dim,
        "requested {} eigenpairs of a {dim}-dimensional operator",
        params.k
    );
    if !(params.tol > 0.0) {
        return Err(Error::Contract(format!("tolerance must be positive, got {}", params.tol)));
    }
    let started = Instant::now();
    let mut pairs: Vec<EigenPair> = Vec::with_capacity(params.k);

    for index in 0..params.k {
        let found: Vec<&[f64]> = pairs.iter().map(|p| p.vector.as_slice()).collect();
        let mut start = None;
        for _ in 0..START_ATTEMPTS {
            match orthonormalize_against(&rng.unit_vector(dim), &found) {
                Ok(v) => {
                    start = Some(v);
                    break;
                }
                Err(Error::DegenerateDirection(_)) => continue,
                Err(e) => return Err(e),
            }
        }
        let mut v = start.ok_or(Error::DegenerateSpectrum { index })?;

        let mut lambda = f64::NAN;
        let mut rel_change = f64::INFINITY;
        let mut residual = f64::INFINITY;
        let mut converged = false;
        let mut iterations = 0;
        while iterations < params.max_iter {
            iterations += 1;
            let mut w = hvp(&v)?;
            ensure_dim!(w.len() == dim, "matvec returned {} values, expected {dim}", w.len());
            check_finite(&w)?;
            let next = dot_unchecked(&v, &w);
            residual = w
                .iter()
                .zip(&v)
                .map(|(a, b)| (a - next * b).powi(2))
                .sum::<f64>()
                .sqrt();
            for p in &pairs {
                let c = p.value * dot_unchecked(&p.vector, &v);
                crate::tensor::axpy(-c, &p.vector, &mut w);
            }
            if lambda.is_finite() {
                rel_change = (next - lambda).abs() / next.abs().max(1e-12);
            }
            lambda = next;
            let reference = pairs.first().map_or(lambda.abs(), |p| p.value.abs());
            let residual_ok = params
                .residual_factor
                .is_none_or(|f| residual <= f * params.tol * reference);
            if rel_change <= params.tol && residual_ok {
                converged = true;
                break;
            }
            match orthonormalize_against(&w, &found) {
                Ok(u) => v = u,
                // v spans an exact null direction of the deflated operator.
                Err(Error::DegenerateDirection(_)) => {
                    rel_change = 0.0;
                    converged = residual_ok;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        pairs.push(EigenPair {
            value: lambda,
            vector: v,
            iterations,
            converged,
            rel_change,
            residual,
        });
    }

    pairs.sort_by(|a, b| b.value.abs().total_cmp(&a.value.abs()));
    Ok(SpectrumResult {
        pairs,
        subsample: None,
        grad_norm: None,
        wall_time: started.elapsed(),
    })
}

/// Spectrum of the θ-Hessian of the mean loss over a random subset of
/// `b_h` samples, drawn once without replacement.
pub fn theta_spectrum(
    model: &Model,
    theta: &ParamVector,
    dataset: &Dataset,
    b_h: usize,
    params: &PowerIterParams,
    rng: &mut Rng,
) -> Result<SpectrumResult> {
    ensure_dim!(
        b_h >= 1 && b_h <= dataset.len(),
        "subsample size {b_h} outside [1, {}]",
        dataset.len()
    );
    let indices = if b_h == dataset.len() {
        (0..b_h).collect()
    } else {
        rng.sample_indices(dataset.len(), b_h)
    };
    let (x, y) = dataset.batch(&indices);
    let mut result = power_iteration_topk(
        |v| model.hvp_theta(theta, &x, &y, v),
        model.num_params(),
        params,
        rng,
    )?;
    result.subsample = Some(Subsample {
        size: b_h,
        seed: rng.seed(),
        indices,
    });
    Ok(result)
}

/// Spectrum of the input Hessian for one sample, with ‖∇ₓJ‖.
pub fn input_spectrum(
    model: &Model,
    theta: &ParamVector,
    x: &Tensor,
    y: usize,
    params: &PowerIterParams,
    rng: &mut Rng,
) -> Result<SpectrumResult> {
    let [c, h, w] = model.input_shape();
    let x4 = x.clone().reshape(&[1, c, h, w])?;
    let (_, gx) = model.input_grad(theta, &x4, &[y])?;
    let shape = x.shape().to_vec();
    let mut result = power_iteration_topk(
        |v| {
            let u = Tensor::new(shape.clone(), v.to_vec())?;
            Ok(model.hvp_input(theta, x, y, &u)?.into_data())
        },
        x.len(),
        params,
        rng,
    )?;
    result.grad_norm = Some(gx.norm());
    Ok(result)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Summary {
        if values.is_empty() {
            return Summary {
                mean: f64::NAN,
                median: f64::NAN,
                max: f64::NAN,
            };
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        let mut sum = 0.0;
        for v in values {
            sum += v;
        }
        Summary {
            mean: sum / n as f64,
            median,
            max: sorted[n - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InputStats {
    pub indices: Vec<usize>,
    pub lambda: Vec<f64>,
    pub grad_norm: Vec<f64>,
    pub lambda_summary: Summary,
    pub grad_norm_summary: Summary,
    pub all_converged: bool,
}

/// Per-sample λ₁ˣ and ‖∇ₓJ‖ over a random subset, with mean/median/max.
pub fn dataset_input_stats(
    model: &Model,
    theta: &ParamVector,
    dataset: &Dataset,
    sample_count: usize,
    params: &PowerIterParams,
    rng: &mut Rng,
) -> Result<InputStats> {
    ensure_dim!(
        sample_count >= 1 && sample_count <= dataset.len(),
        "sample count {sample_count} outside [1, {}]",
        dataset.len()
    );
    let indices = if sample_count == dataset.len() {
        (0..sample_count).collect::<Vec<_>>()
    } else {
        rng.sample_indices(dataset.len(), sample_count)
    };
    let params = PowerIterParams { k: 1, ..*params };
    let mut lambda = Vec::with_capacity(sample_count);
    let mut grad_norm = Vec::with_capacity(sample_count);
    let mut all_converged = true;
    for &i in &indices {
        let (x, y) = dataset.sample(i);
        let r = input_spectrum(model, theta, &x, y, &params, rng)?;
        let top = r.top().expect("k = 1");
        all_converged &= top.converged;
        lambda.push(top.value);
        grad_norm.push(r.grad_norm.unwrap_or(0.0));
    }
    Ok(InputStats {
        lambda_summary: Summary::of(&lambda),
        grad_norm_summary: Summary::of(&grad_norm),
        indices,
        lambda,
        grad_norm,
        all_converged,
    })
}

/// Explicit matrix from `dim` unit-vector products; row `i` is `H e_i`.
pub fn assemble_dense(
    mut hvp: impl FnMut(&[f64]) -> Result<Vec<f64>>,
    dim: usize,
) -> Result<Tensor> {
    let mut data = Vec::with_capacity(dim * dim);
    let mut e = vec![0.0; dim];
    for i in 0..dim {
        e[i] = 1.0;
        data.extend(hvp(&e)?);
        e[i] = 0.0;
    }
    Tensor::new(vec![dim, dim], data)
}

pub fn rayleigh_residual(hv: &[f64], v: &[f64], lambda: f64) -> f64 {
    let r: Vec<f64> = hv.iter().zip(v).map(|(a, b)| a - lambda * b).collect();
    norm(&r)
}
