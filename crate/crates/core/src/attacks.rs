//! White-box attacks: FGSM, iterated FGSM, L2 gradient, and the two damped
//! Newton variants solved with conjugate gradients.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{AdversarialManifest, Dataset, Provenance};
use crate::error::{ensure_dim, Error, Result};
use crate::nn::{Model, ParamVector};
use crate::spectrum::{power_iteration_topk, PowerIterParams};
use crate::tensor::{dot, norm, Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Fgsm,
    Fgsm10,
    L2grad,
    Fhsm,
    L2hess,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    Linf,
    L2,
}

impl AttackKind {
    pub const ALL: [AttackKind; 5] = [
        AttackKind::Fgsm,
        AttackKind::Fgsm10,
        AttackKind::L2grad,
        AttackKind::Fhsm,
        AttackKind::L2hess,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Fgsm10 => "fgsm10",
            AttackKind::L2grad => "l2grad",
            AttackKind::Fhsm => "fhsm",
            AttackKind::L2hess => "l2hess",
        }
    }

    pub fn norm(self) -> Norm {
        match self {
            AttackKind::Fgsm | AttackKind::Fgsm10 | AttackKind::Fhsm => Norm::Linf,
            AttackKind::L2grad | AttackKind::L2hess => Norm::L2,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// Dataset scale selecting the default ε.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Mnist,
    Cifar,
}

impl Scale {
    pub fn epsilon(self, norm: Norm) -> f64 {
        match (self, norm) {
            (Scale::Mnist, Norm::Linf) => 0.1,
            (Scale::Mnist, Norm::L2) => 2.8,
            (Scale::Cifar, Norm::Linf) => 0.02,
            (Scale::Cifar, Norm::L2) => 1.2,
        }
    }
}

/// Damping `μ` of the Newton system `(H_x + μI) z = g`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Damping {
    Fixed(f64),
    /// `relative · λ₁ˣ`, at least `floor`; λ₁ˣ is estimated per sample.
    Relative { relative: f64, floor: f64 },
}

impl Default for Damping {
    fn default() -> Self {
        Damping::Relative {
            relative: 1e-3,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CgParams {
    pub damping: Damping,
    /// Relative residual target `‖(H+μI)z − g‖ ≤ tol·‖g‖`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for CgParams {
    fn default() -> Self {
        CgParams {
            damping: Damping::default(),
            tol: 1e-6,
            max_iter: 200,
        }
    }
}

impl CgParams {
    pub fn fixed(mu: f64) -> Self {
        CgParams {
            damping: Damping::Fixed(mu),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.damping {
            Damping::Fixed(mu) => mu > 0.0 && mu.is_finite(),
            Damping::Relative { relative, floor } => relative >= 0.0 && floor > 0.0 && floor.is_finite(),
        };
        if !ok {
            return Err(Error::Contract(
                "CG damping must be positive: the input Hessian is rank deficient".into(),
            ));
        }
        if !(self.tol > 0.0) || self.max_iter == 0 {
            return Err(Error::Contract("CG needs a positive tolerance and at least one iteration".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub epsilon: f64,
    /// Step count for FGSM10.
    #[serde(default = "AttackSpec::default_iterations")]
    pub iterations: usize,
    #[serde(default)]
    pub cg: CgParams,
}

impl AttackSpec {
    fn default_iterations() -> usize {
        10
    }

    pub fn new(kind: AttackKind, epsilon: f64) -> Self {
        AttackSpec {
            kind,
            epsilon,
            iterations: Self::default_iterations(),
            cg: CgParams::default(),
        }
    }

    pub fn preset(kind: AttackKind, scale: Scale) -> Self {
        Self::new(kind, scale.epsilon(kind.norm()))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Contract(format!("epsilon {} must be finite and ≥ 0", self.epsilon)));
        }
        if self.iterations == 0 {
            return Err(Error::Contract("attack needs at least one iteration".into()));
        }
        if matches!(self.kind, AttackKind::Fhsm | AttackKind::L2hess) {
            self.cg.validate()?;
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        format!("{}@{}", self.kind.name(), self.epsilon)
    }
}

/// `sign(0) = 0`.
pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgOutcome {
    pub z: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Final `‖(H+μI)z − g‖ / ‖g‖`.
    pub rel_residual: f64,
}

/// Solves `(H + μI) z = g` for a symmetric PSD black box `H`.
///
/// Every search direction's curvature `⟨p, Hp⟩/‖p‖²` is checked; a value
/// below `−1e-8·max(1, largest curvature seen)` is reported as a PSD
/// violation.
pub fn cg_solve(
    mut matvec: impl FnMut(&[f64]) -> Result<Vec<f64>>,
    g: &[f64],
    mu: f64,
    tol: f64,
    max_iter: usize,
) -> Result<CgOutcome> {
    if !(mu > 0.0) {
        return Err(Error::Contract(format!("damping {mu} must be positive")));
    }
    let n = g.len();
    let gnorm = norm(g);
    if gnorm == 0.0 {
        return Ok(CgOutcome {
            z: vec![0.0; n],
            iterations: 0,
            converged: true,
            rel_residual: 0.0,
        });
    }
    let mut z = vec![0.0; n];
    let mut r = g.to_vec();
    let mut p = r.clone();
    let mut rr = dot(&r, &r)?;
    let mut max_curv: f64 = 0.0;
    let mut iterations = 0;
    while iterations < max_iter {
        let hp = matvec(&p)?;
        ensure_dim!(hp.len() == n, "matvec returned {} values for {n}", hp.len());
        let pp = dot(&p, &p)?;
        let php = dot(&p, &hp)?;
        let curvature = php / pp;
        max_curv = max_curv.max(curvature);
        if curvature < -1e-8 * max_curv.max(1.0) {
            return Err(Error::PsdViolation { curvature });
        }
        let denom = php + mu * pp;
        let alpha = rr / denom;
        for i in 0..n {
            z[i] += alpha * p[i];
            r[i] -= alpha * (hp[i] + mu * p[i]);
        }
        iterations += 1;
        if !alpha.is_finite() || z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite CG iterate at step {iterations}")));
        }
        let rr_new = dot(&r, &r)?;
        if rr_new.sqrt() <= tol * gnorm {
            rr = rr_new;
            break;
        }
        let beta = rr_new / rr;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_new;
    }
    let rel_residual = rr.sqrt() / gnorm;
    Ok(CgOutcome {
        z,
        iterations,
        converged: rel_residual <= tol,
        rel_residual,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutcome {
    /// Perturbed input, same shape as the clean one, inside `[0, 1]`.
    pub x: Tensor,
    /// Norm of the step in the attack's own norm, before clamping.
    pub pre_clamp_norm: f64,
    /// Gradient or Newton direction vanished; input returned unchanged.
    pub zero_direction: bool,
    /// CG stopped at its iteration cap.
    pub cg_unconverged: bool,
    /// Damping actually used by the second-order attacks.
    pub damping: Option<f64>,
}

fn clamp_unit(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

fn linf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m: f64, a| m.max(a.abs()))
}

fn apply_step(x: &Tensor, delta: &[f64]) -> Tensor {
    let data = x.data().iter().zip(delta).map(|(a, d)| clamp_unit(a + d)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

fn unchanged(x: &Tensor, zero_direction: bool) -> AttackOutcome {
    AttackOutcome {
        x: x.clone(),
        pre_clamp_norm: 0.0,
        zero_direction,
        cg_unconverged: false,
        damping: None,
    }
}

fn single_grad(model: &Model, theta: &ParamVector, x: &Tensor, y: usize) -> Result<Vec<f64>> {
    let [c, h, w] = model.input_shape();
    let x4 = x.clone().reshape(&[1, c, h, w])?;
    Ok(model.input_grad(theta, &x4, &[y])?.1.into_data())
}

pub fn fgsm(model: &Model, theta: &ParamVector, x: &Tensor, y: usize, epsilon: f64) -> Result<AttackOutcome> {
    let g = single_grad(model, theta, x, y)?;
    Ok(fgsm_from_grad(x, &g, epsilon))
}

fn fgsm_from_grad(x: &Tensor, g: &[f64], epsilon: f64) -> AttackOutcome {
    let delta: Vec<f64> = g.iter().map(|&v| epsilon * sign(v)).collect();
    AttackOutcome {
        x: apply_step(x, &delta),
        pre_clamp_norm: linf(&delta),
        zero_direction: g.iter().all(|&v| v == 0.0),
        cg_unconverged: false,
        damping: None,
    }
}

/// `iters` signed steps of `ε/iters`, each projected onto the ε-ball around
/// the clean input and onto `[0, 1]`.
pub fn fgsm_iterative(
    model: &Model,
    theta: &ParamVector,
    x: &Tensor,
    y: usize,
    epsilon: f64,
    iters: usize,
) -> Result<AttackOutcome> {
    ensure_dim!(iters >= 1, "iterative FGSM needs at least one step");
    let step = epsilon / iters as f64;
    let mut delta = vec![0.0; x.len()];
    let mut cur = x.clone();
    for _ in 0..iters {
        let g = single_grad(model, theta, &cur, y)?;
        projected_step(x.data(), &mut delta, &g, step, epsilon);
        cur = apply_step(x, &delta);
    }
    Ok(AttackOutcome {
        pre_clamp_norm: linf(&delta),
        zero_direction: delta.iter().all(|&v| v == 0.0),
        x: cur,
        cg_unconverged: false,
        damping: None,
    })
}

/// One signed step on the perturbation, projected onto the ε-ball and onto
/// the set keeping `x + δ` inside `[0, 1]`.
fn projected_step(x: &[f64], delta: &mut [f64], g: &[f64], step: f64, epsilon: f64) {
    for ((d, &xi), &gi) in delta.iter_mut().zip(x).zip(g) {
        *d = (*d + step * sign(gi)).clamp(-epsilon, epsilon).clamp(-xi, 1.0 - xi);
    }
}

const ZERO_DIRECTION: f64 = 1e-12;

pub fn l2grad(model: &Model, theta: &ParamVector, x: &Tensor, y: usize, epsilon: f64) -> Result<AttackOutcome> {
    let g = single_grad(model, theta, x, y)?;
    Ok(l2_from_direction(x, &g, epsilon))
}

fn l2_from_direction(x: &Tensor, d: &[f64], epsilon: f64) -> AttackOutcome {
    let n = norm(d);
    if n <= ZERO_DIRECTION {
        return unchanged(x, true);
    }
    let mut delta: Vec<f64> = d.iter().map(|v| epsilon * v / n).collect();
    // Rounding can leave the norm an ulp above ε.
    while norm(&delta) > epsilon {
        delta.iter_mut().for_each(|v| *v *= 1.0 - f64::EPSILON);
    }
    AttackOutcome {
        x: apply_step(x, &delta),
        pre_clamp_norm: norm(&delta),
        zero_direction: false,
        cg_unconverged: false,
        damping: None,
    }
}

/// Damping for one sample: fixed, or relative to a quick λ₁ˣ estimate.
pub fn resolve_damping(model: &Model, theta: &ParamVector, x: &Tensor, y: usize, cg: &CgParams) -> Result<f64> {
    match cg.damping {
        Damping::Fixed(mu) => Ok(mu),
        Damping::Relative { relative, floor } => {
            let params = PowerIterParams {
                k: 1,
                tol: 1e-3,
                max_iter: 100,
                residual_factor: None,
            };
            let shape = x.shape().to_vec();
            let r = power_iteration_topk(
                |v| Ok(model.hvp_input(theta, x, y, &Tensor::new(shape.clone(), v.to_vec())?)?.into_data()),
                x.len(),
                &params,
                &mut Rng::new(0),
            );
            let lambda = match r {
                Ok(r) => r.top().map_or(0.0, |p| p.value.abs()),
                // A vanishing input Hessian has no direction to converge to.
                Err(Error::DegenerateDirection(_)) => 0.0,
                Err(e) => return Err(e),
            };
            Ok((relative * lambda).max(floor))
        }
    }
}

/// Newton direction `z = (H_x + μI)⁻¹ g_x` for one sample.
pub fn newton_direction(
    model: &Model,
    theta: &ParamVector,
    x: &Tensor,
    y: usize,
    cg: &CgParams,
) -> Result<(Vec<f64>, CgOutcome, f64)> {
    cg.validate()?;
    let g = single_grad(model, theta, x, y)?;
    let mu = resolve_damping(model, theta, x, y, cg)?;
    let shape = x.shape().to_vec();
    let out = cg_solve(
        |v| Ok(model.hvp_input(theta, x, y, &Tensor::new(shape.clone(), v.to_vec())?)?.into_data()),
        &g,
        mu,
        cg.tol,
        cg.max_iter,
    )?;
    Ok((g, out, mu))
}

pub fn fhsm(model: &Model, theta: &ParamVector, x: &Tensor, y: usize, epsilon: f64, cg: &CgParams) -> Result<AttackOutcome> {
    let (_, out, mu) = newton_direction(model, theta, x, y, cg)?;
    let mut res = fgsm_from_grad(x, &out.z, epsilon);
    res.cg_unconverged = !out.converged;
    res.damping = Some(mu);
    Ok(res)
}

pub fn l2hess(model: &Model, theta: &ParamVector, x: &Tensor, y: usize, epsilon: f64, cg: &CgParams) -> Result<AttackOutcome> {
    let (_, out, mu) = newton_direction(model, theta, x, y, cg)?;
    let mut res = l2_from_direction(x, &out.z, epsilon);
    res.cg_unconverged = !out.converged;
    res.damping = Some(mu);
    Ok(res)
}

/// Runs `spec` on one sample `x` shaped `[C, H, W]`.
pub fn attack_sample(model: &Model, theta: &ParamVector, x: &Tensor, y: usize, spec: &AttackSpec) -> Result<AttackOutcome> {
    spec.validate()?;
    if spec.epsilon == 0.0 {
        return Ok(unchanged(x, false));
    }
    match spec.kind {
        AttackKind::Fgsm => fgsm(model, theta, x, y, spec.epsilon),
        AttackKind::Fgsm10 => fgsm_iterative(model, theta, x, y, spec.epsilon, spec.iterations),
        AttackKind::L2grad => l2grad(model, theta, x, y, spec.epsilon),
        AttackKind::Fhsm => fhsm(model, theta, x, y, spec.epsilon, &spec.cg),
        AttackKind::L2hess => l2hess(model, theta, x, y, spec.epsilon, &spec.cg),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchAttack {
    /// `[N, C, H, W]`
    pub inputs: Tensor,
    pub pre_clamp_max_norm: f64,
    pub zero_direction: usize,
    pub cg_unconverged: usize,
}

/// Attacks every sample of a batch. FGSM and L2GRAD share one batched
/// gradient pass; the other attacks run per sample in parallel.
pub fn attack_batch(model: &Model, theta: &ParamVector, x: &Tensor, labels: &[usize], spec: &AttackSpec) -> Result<BatchAttack> {
    spec.validate()?;
    ensure_dim!(
        x.shape().len() == 4 && x.shape()[0] == labels.len(),
        "batch {:?} for {} labels",
        x.shape(),
        labels.len()
    );
    let n = labels.len();
    if spec.epsilon == 0.0 {
        return Ok(BatchAttack {
            inputs: x.clone(),
            pre_clamp_max_norm: 0.0,
            zero_direction: 0,
            cg_unconverged: 0,
        });
    }
    let d = x.len() / n.max(1);
    let sample_shape = x.shape()[1..].to_vec();
    let sample = |i: usize| Tensor::new(sample_shape.clone(), x.data()[i * d..(i + 1) * d].to_vec()).expect("shape");
    let outcomes: Vec<AttackOutcome> = match spec.kind {
        AttackKind::Fgsm | AttackKind::L2grad => {
            let (_, grads) = model.input_grad(theta, x, labels)?;
            (0..n)
                .map(|i| {
                    let g = &grads.data()[i * d..(i + 1) * d];
                    if spec.kind == AttackKind::Fgsm {
                        fgsm_from_grad(&sample(i), g, spec.epsilon)
                    } else {
                        l2_from_direction(&sample(i), g, spec.epsilon)
                    }
                })
                .collect()
        }
        AttackKind::Fgsm10 => {
            let step = spec.epsilon / spec.iterations as f64;
            let mut delta = vec![0.0; x.len()];
            let mut cur = x.clone();
            for _ in 0..spec.iterations {
                let (_, grads) = model.input_grad(theta, &cur, labels)?;
                projected_step(x.data(), &mut delta, grads.data(), step, spec.epsilon);
                cur = apply_step(x, &delta);
            }
            (0..n)
                .map(|i| {
                    let di = &delta[i * d..(i + 1) * d];
                    AttackOutcome {
                        pre_clamp_norm: linf(di),
                        zero_direction: di.iter().all(|&v| v == 0.0),
                        x: Tensor::new(sample_shape.clone(), cur.data()[i * d..(i + 1) * d].to_vec()).expect("shape"),
                        cg_unconverged: false,
                        damping: None,
                    }
                })
                .collect()
        }
        AttackKind::Fhsm | AttackKind::L2hess => (0..n)
            .into_par_iter()
            .map(|i| attack_sample(model, theta, &sample(i), labels[i], spec))
            .collect::<Result<Vec<_>>>()?,
    };
    let mut data = Vec::with_capacity(x.len());
    let mut out = BatchAttack {
        inputs: Tensor::zeros(&[0]),
        pre_clamp_max_norm: 0.0,
        zero_direction: 0,
        cg_unconverged: 0,
    };
    for o in outcomes {
        data.extend_from_slice(o.x.data());
        out.pre_clamp_max_norm = out.pre_clamp_max_norm.max(o.pre_clamp_norm);
        out.zero_direction += o.zero_direction as usize;
        out.cg_unconverged += o.cg_unconverged as usize;
    }
    out.inputs = Tensor::new(x.shape().to_vec(), data)?;
    Ok(out)
}

/// Perturbs every sample of `dataset` against `(model, theta)`.
pub fn adversarial_dataset(
    model: &Model,
    theta: &ParamVector,
    dataset: &Dataset,
    spec: &AttackSpec,
    source_checkpoint: &str,
    seed: u64,
) -> Result<(Dataset, BatchAttack)> {
    let r = attack_batch(model, theta, &dataset.inputs, &dataset.labels, spec)?;
    let ds = dataset.with_inputs(
        r.inputs.clone(),
        Provenance::Adversarial(AdversarialManifest {
            attack: spec.kind.name().into(),
            epsilon: spec.epsilon,
            seed,
            source_checkpoint: source_checkpoint.into(),
            pre_clamp_max_norm: r.pre_clamp_max_norm,
        }),
    )?;
    Ok((ds, r))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialEval {
    pub accuracy: f64,
    pub loss: f64,
    pub attack: BatchAttack,
}

/// Accuracy of `(model, theta)` on adversarial inputs generated against
/// `source` (defaults to the model under test).
pub fn evaluate_adversarial(
    model: &Model,
    theta: &ParamVector,
    dataset: &Dataset,
    spec: &AttackSpec,
    source: Option<(&Model, &ParamVector)>,
) -> Result<AdversarialEval> {
    let (sm, st) = source.unwrap_or((model, theta));
    let attack = attack_batch(sm, st, &dataset.inputs, &dataset.labels, spec)?;
    let (loss, accuracy) = model.evaluate(theta, &attack.inputs, &dataset.labels)?;
    Ok(AdversarialEval { accuracy, loss, attack })
}
