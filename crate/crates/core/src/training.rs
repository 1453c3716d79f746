//! Heavy-ball SGD, min-max robust training, and per-epoch metrics.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attacks::{attack_batch, AttackKind, AttackSpec};
use crate::data::{Cell, Dataset, Report};
use crate::error::{ensure_dim, Error, Result};
use crate::nn::{BnMode, Model, ParamVector};
use crate::spectrum::{theta_spectrum, PowerIterParams};
use crate::tensor::{norm, Rng};

const DIVERGENCE_LOSS: f64 = 1e6;

// Independent random streams derived from the run seed.
const STREAM_INIT: u64 = 0;
const STREAM_METRICS: u64 = 1;
const STREAM_SHUFFLE: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobustConfig {
    pub attack: AttackSpec,
    /// Ascent steps per minibatch. More than one is only defined for FGSM,
    /// where it becomes the projected iteration with that many steps.
    #[serde(default = "RobustConfig::default_inner_steps")]
    pub inner_steps: usize,
}

impl RobustConfig {
    fn default_inner_steps() -> usize {
        1
    }

    pub fn new(attack: AttackSpec) -> Self {
        RobustConfig {
            attack,
            inner_steps: 1,
        }
    }

    /// The attack actually run inside each step.
    pub fn effective_attack(&self) -> Result<AttackSpec> {
        match (self.inner_steps, self.attack.kind) {
            (0, _) => Err(Error::Contract("robust training needs at least one inner step".into())),
            (1, _) => Ok(self.attack),
            (n, AttackKind::Fgsm | AttackKind::Fgsm10) => Ok(AttackSpec {
                kind: AttackKind::Fgsm10,
                iterations: n,
                ..self.attack
            }),
            (n, k) => Err(Error::Contract(format!(
                "{n} inner steps are not defined for {}",
                k.name()
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// Compute λ₁ᶿ every this many epochs (0: never during training).
    pub spectrum_every: usize,
    /// Subsample size for λ₁ᶿ, capped at the training-set size.
    pub b_h: usize,
    pub spectrum_tol: f64,
    pub spectrum_max_iter: usize,
    /// Full-data gradient norm at each epoch end.
    pub grad_norm: bool,
    /// Record wall-clock time. Off by default so reruns are byte-identical.
    pub timing: bool,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            spectrum_every: 1,
            b_h: 320,
            spectrum_tol: 1e-3,
            spectrum_max_iter: 500,
            grad_norm: true,
            timing: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Halve the learning rate after every this many epochs.
    pub lr_halve_every: Option<usize>,
    pub max_epochs: usize,
    /// Stop once the full-data training loss is at or below this.
    pub target_loss: Option<f64>,
    /// Set by the caller rather than read from configuration files.
    #[serde(skip)]
    pub seed: u64,
    pub robust: Option<RobustConfig>,
    pub metrics: MetricsConfig,
    /// Drivers write an intermediate checkpoint every this many epochs.
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            lr: 0.01,
            momentum: 0.9,
            lr_halve_every: Some(5),
            max_epochs: 20,
            target_loss: None,
            seed: 0,
            robust: None,
            metrics: MetricsConfig::default(),
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.batch_size == 0 || self.batch_size > n {
            return Err(Error::Contract(format!(
                "batch size {} must lie in [1, {n}]",
                self.batch_size
            )));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Contract(format!("learning rate {} must be finite and ≥ 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Contract(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.lr_halve_every == Some(0) {
            return Err(Error::Contract("lr_halve_every must be positive".into()));
        }
        if let Some(r) = &self.robust {
            r.effective_attack()?.validate()?;
        }
        Ok(())
    }

    /// Learning rate used during the zero-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_halve_every {
            Some(m) => self.lr * 0.5f64.powi((epoch / m) as i32),
            None => self.lr,
        }
    }
}

/// One metrics row, written at the end of an epoch (1-based).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: Option<f64>,
    pub test_acc: Option<f64>,
    pub lambda1: Option<f64>,
    pub lambda1_converged: Option<bool>,
    pub grad_norm: Option<f64>,
    pub elapsed: Option<f64>,
}

impl EpochRecord {
    pub const COLUMNS: [&'static str; 10] = [
        "epoch",
        "lr",
        "train_loss",
        "test_loss",
        "train_acc",
        "test_acc",
        "lambda1_theta",
        "lambda1_converged",
        "grad_norm",
        "elapsed_s",
    ];

    pub fn cells(&self) -> Vec<Cell> {
        vec![
            self.epoch.into(),
            self.lr.into(),
            self.train_loss.into(),
            self.test_loss.into(),
            self.train_acc.into(),
            self.test_acc.into(),
            self.lambda1.into(),
            self.lambda1_converged.map_or(Cell::Missing, Cell::Bool),
            self.grad_norm.into(),
            self.elapsed.into(),
        ]
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<EpochRecord>,
}

impl MetricsLog {
    pub fn push(&mut self, row: EpochRecord) -> Result<()> {
        if let Some(last) = self.rows.last() {
            ensure_dim!(row.epoch > last.epoch, "epoch {} after {}", row.epoch, last.epoch);
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.rows.last()
    }

    pub fn to_report(&self) -> Report {
        let mut r = Report::new(&EpochRecord::COLUMNS);
        for row in &self.rows {
            r.push(row.cells());
        }
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    TargetLoss,
    EpochCap,
}

/// Optimizer state, enough to resume a run exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub theta: ParamVector,
    pub momentum: Vec<f64>,
    pub epochs_completed: usize,
}

impl TrainState {
    pub fn fresh(model: &Model, seed: u64) -> Self {
        TrainState {
            theta: model.init_params(&mut Rng::derive(seed, STREAM_INIT)),
            momentum: vec![0.0; model.num_params()],
            epochs_completed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub log: MetricsLog,
    pub stop: StopReason,
}

/// Loss, accuracy, λ₁ᶿ and gradient norm for one parameter vector.
pub fn epoch_metrics(
    model: &Model,
    theta: &ParamVector,
    train: &Dataset,
    test: Option<&Dataset>,
    metrics: &MetricsConfig,
    with_spectrum: bool,
    seed: u64,
) -> Result<EpochRecord> {
    let (train_loss, train_acc) = model.evaluate(theta, &train.inputs, &train.labels)?;
    let (test_loss, test_acc) = match test {
        Some(t) => {
            let (l, a) = model.evaluate(theta, &t.inputs, &t.labels)?;
            (Some(l), Some(a))
        }
        None => (None, None),
    };
    let grad_norm = if metrics.grad_norm {
        let (_, g, _) = model.loss_and_grad(theta, &train.inputs, &train.labels, BnMode::Eval)?;
        Some(norm(g.as_slice()))
    } else {
        None
    };
    let (lambda1, lambda1_converged) = if with_spectrum {
        let params = PowerIterParams {
            k: 1,
            tol: metrics.spectrum_tol,
            max_iter: metrics.spectrum_max_iter,
            residual_factor: None,
        };
        let b_h = metrics.b_h.min(train.len());
        let r = theta_spectrum(model, theta, train, b_h, &params, &mut Rng::derive(seed, STREAM_METRICS))?;
        let top = r.top().expect("k = 1");
        (Some(top.value), Some(top.converged))
    } else {
        (None, None)
    };
    Ok(EpochRecord {
        epoch: 0,
        lr: 0.0,
        train_loss,
        train_acc,
        test_loss,
        test_acc,
        lambda1,
        lambda1_converged,
        grad_norm,
        elapsed: None,
    })
}

/// Trains from `state` (fresh or resumed) until the loss target or the
/// epoch cap. `on_epoch` sees every row and the state after that epoch;
/// running batch-norm statistics live in `model`.
pub fn train(
    model: &mut Model,
    state: TrainState,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &TrainState, &Model) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate(train_set.len())?;
    ensure_dim!(
        state.theta.len() == model.num_params() && state.momentum.len() == model.num_params(),
        "state does not match the model layout"
    );
    let attack = config.robust.as_ref().map(RobustConfig::effective_attack).transpose()?;
    let started = Instant::now();
    let n = train_set.len();
    let mut state = state;
    let mut log = MetricsLog::default();
    let mut stop = StopReason::EpochCap;
    if let Some(target) = config.target_loss {
        if state.epochs_completed > 0 {
            let (loss, _) = model.evaluate(&state.theta, &train_set.inputs, &train_set.labels)?;
            if loss <= target {
                return Ok(TrainOutcome { state, log, stop: StopReason::TargetLoss });
            }
        }
    }
    while state.epochs_completed < config.max_epochs {
        let epoch = state.epochs_completed;
        let lr = config.lr_at(epoch);
        let last_good = state.theta.clone();
        let diverged = |loss: f64| Error::Divergence {
            epoch: epoch + 1,
            loss,
            last_good: Box::new(last_good.0.clone()),
        };
        let mut order: Vec<usize> = (0..n).collect();
        Rng::derive(config.seed, STREAM_SHUFFLE + epoch as u64).shuffle(&mut order);
        for idx in order.chunks(config.batch_size) {
            let (mut x, y) = train_set.batch(idx);
            if let Some(spec) = &attack {
                x = attack_batch(model, &state.theta, &x, &y, spec)?.inputs;
            }
            let (loss, grad, stats) = match model.loss_and_grad(&state.theta, &x, &y, BnMode::Train) {
                Ok(r) => r,
                Err(Error::NonFinite { .. }) => return Err(diverged(f64::NAN)),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() || loss > DIVERGENCE_LOSS {
                return Err(diverged(loss));
            }
            if let Some(s) = stats {
                model.set_bn_stats(s)?;
            }
            for ((t, m), g) in state.theta.0.iter_mut().zip(&mut state.momentum).zip(grad.as_slice()) {
                *m = config.momentum * *m + g;
                *t -= lr * *m;
            }
        }
        state.epochs_completed += 1;
        let e = state.epochs_completed;
        let every = config.metrics.spectrum_every;
        let with_spectrum = every > 0 && e % every == 0;
        let mut row = epoch_metrics(model, &state.theta, train_set, test_set, &config.metrics, with_spectrum, config.seed)?;
        if !row.train_loss.is_finite() || row.train_loss > DIVERGENCE_LOSS {
            return Err(diverged(row.train_loss));
        }
        row.epoch = e;
        row.lr = lr;
        if config.metrics.timing {
            row.elapsed = Some(started.elapsed().as_secs_f64());
        }
        on_epoch(&row, &state, model)?;
        let reached = config.target_loss.is_some_and(|t| row.train_loss <= t);
        log.push(row)?;
        if reached {
            stop = StopReason::TargetLoss;
            break;
        }
    }
    Ok(TrainOutcome { state, log, stop })
}

/// Fresh run from the configured seed.
pub fn sgd_train(
    model: &mut Model,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let state = TrainState::fresh(model, config.seed);
    train(model, state, train_set, test_set, config, |_, _, _| Ok(()))
}

/// Fresh min-max run: each minibatch is attacked against the current θ
/// before the SGD step.
pub fn robust_train(
    model: &mut Model,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    if config.robust.is_none() {
        return Err(Error::Contract("robust training needs an attack".into()));
    }
    sgd_train(model, train_set, test_set, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_blobs, BlobSpec};
    use crate::nn::ModelConfig;

    fn small() -> (Model, Dataset) {
        let ds = synth_blobs(&BlobSpec::new(20, 3, [1, 2, 2], 0.8, 1)).unwrap();
        let model = Model::new(ModelConfig::mlp("t", [1, 2, 2], &[6], 3)).unwrap();
        (model, ds)
    }

    fn quiet(b: usize) -> TrainConfig {
        TrainConfig {
            batch_size: b,
            lr: 0.05,
            max_epochs: 4,
            metrics: MetricsConfig {
                spectrum_every: 2,
                b_h: 16,
                ..MetricsConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_lr_keeps_theta() {
        let (mut model, ds) = small();
        let cfg = TrainConfig { lr: 0.0, ..quiet(8) };
        let out = sgd_train(&mut model, &ds, None, &cfg).unwrap();
        assert_eq!(out.state.theta, TrainState::fresh(&model, 0).theta);
        let losses: Vec<f64> = out.log.rows.iter().map(|r| r.train_loss).collect();
        assert!(losses.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn replay_and_resume_are_exact() {
        let (mut model, ds) = small();
        let cfg = quiet(7);
        let a = sgd_train(&mut model, &ds, Some(&ds), &cfg).unwrap();
        let b = sgd_train(&mut model, &ds, Some(&ds), &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.log.rows[1].lambda1.is_some() && a.log.rows[0].lambda1.is_none());

        let half = TrainConfig { max_epochs: 2, ..cfg };
        let first = sgd_train(&mut model, &ds, Some(&ds), &half).unwrap();
        let resumed = train(&mut model, first.state, &ds, Some(&ds), &cfg, |_, _, _| Ok(())).unwrap();
        assert_eq!(resumed.state, a.state);
        assert_eq!(resumed.log.rows, a.log.rows[2..]);
    }

    #[test]
    fn zero_epsilon_robust_equals_plain() {
        let (mut model, ds) = small();
        let plain = sgd_train(&mut model, &ds, None, &quiet(8)).unwrap();
        let cfg = TrainConfig {
            robust: Some(RobustConfig::new(AttackSpec::new(AttackKind::Fgsm, 0.0))),
            ..quiet(8)
        };
        let robust = robust_train(&mut model, &ds, None, &cfg).unwrap();
        assert_eq!(plain, robust);
    }

    #[test]
    fn full_batch_without_momentum_is_gradient_descent() {
        let (mut model, ds) = small();
        let cfg = TrainConfig {
            batch_size: ds.len(),
            momentum: 0.0,
            max_epochs: 1,
            lr_halve_every: None,
            ..quiet(1)
        };
        let start = TrainState::fresh(&model, cfg.seed);
        let (_, g, _) = model.loss_and_grad(&start.theta, &ds.inputs, &ds.labels, BnMode::Train).unwrap();
        let out = sgd_train(&mut model, &ds, None, &cfg).unwrap();
        // The epoch visits samples in shuffled order, so sums differ by rounding.
        for ((t, t0), gi) in out.state.theta.0.iter().zip(&start.theta.0).zip(g.as_slice()) {
            assert!((t - (t0 - cfg.lr * gi)).abs() <= 1e-15 * (1.0 + t0.abs()));
        }
    }

    #[test]
    fn target_loss_stops_early() {
        let (mut model, ds) = small();
        let cfg = TrainConfig {
            target_loss: Some(10.0),
            ..quiet(8)
        };
        let out = sgd_train(&mut model, &ds, None, &cfg).unwrap();
        assert_eq!(out.stop, StopReason::TargetLoss);
        assert_eq!(out.log.rows.len(), 1);
        assert!(out.log.rows[0].train_loss <= 10.0);
    }

    #[test]
    fn divergence_carries_last_good() {
        let (mut model, ds) = small();
        let cfg = TrainConfig {
            lr: 1e6,
            momentum: 0.0,
            max_epochs: 50,
            ..quiet(8)
        };
        match sgd_train(&mut model, &ds, None, &cfg) {
            Err(Error::Divergence { last_good, .. }) => {
                assert_eq!(last_good.len(), model.num_params());
                assert!(last_good.iter().all(|v| v.is_finite()));
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn config_validation_and_schedule() {
        let cfg = TrainConfig::default();
        assert!(cfg.validate(100).is_ok());
        assert!(TrainConfig { batch_size: 101, ..cfg }.validate(100).is_err());
        assert!(TrainConfig { momentum: 1.0, ..cfg }.validate(100).is_err());
        assert_eq!(cfg.lr_at(4), 0.01);
        assert_eq!(cfg.lr_at(5), 0.005);
        assert_eq!(cfg.lr_at(10), 0.0025);
        let multi = RobustConfig {
            attack: AttackSpec::new(AttackKind::L2grad, 1.0),
            inner_steps: 3,
        };
        assert!(multi.effective_attack().is_err());
    }
}
