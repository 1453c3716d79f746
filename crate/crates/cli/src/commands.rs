//! The five subcommands. Each validates its configuration and inputs before
//! computing anything and writes only below the configured output directory.

use std::fs;
use std::path::{Path, PathBuf};

use hesslens::attacks::{adversarial_dataset, AttackSpec};
use hesslens::data::{
    file_sha256, load_checkpoint, read_container, save_checkpoint, save_idx, write_container, write_report, Cell,
    Checkpoint, CheckpointMeta, CsvAppender, Dataset, Report, VECTORS_MAGIC,
};
use hesslens::landscape::{
    default_grid_1d, default_grid_2d, default_interpolation_grid, interpolate_models, scan_1d, scan_2d, LossTarget,
};
use hesslens::nn::{Model, ModelConfig, ParamVector};
use hesslens::spectrum::{dataset_input_stats, theta_spectrum, InputStats, PowerIterParams, SpectrumResult, Summary};
use hesslens::training::{train, EpochRecord, TrainConfig, TrainState};
use hesslens::{Error, Rng};
use serde::{Deserialize, Serialize};

use crate::config::{Datasets, ExperimentConfig, LandscapeMode, Stage};
use crate::error::CliError;

pub const TOOL: &str = concat!("hesslens ", env!("CARGO_PKG_VERSION"));

/// Result of a command that ran to completion.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    /// Some eigenpair stopped at its iteration cap (exit code 3).
    pub nonconverged: bool,
}

pub struct Context {
    pub cfg: ExperimentConfig,
    pub model: ModelConfig,
    pub data: Datasets,
    pub hash: String,
}

impl Context {
    /// Validates the configuration, loads the data and validates again
    /// against its size. Nothing is written.
    pub fn prepare(cfg: ExperimentConfig, stage: Stage) -> Result<Self, CliError> {
        let model = cfg.validate()?;
        let data = cfg.data.load(&model)?;
        cfg.validate_with_data(data.train.len(), stage)?;
        let hash = cfg.hash();
        Ok(Context { cfg, model, data, hash })
    }

    fn header(&self, extra: &[(&str, String)]) -> Vec<String> {
        let mut h = vec![
            format!("tool: {TOOL}"),
            format!("config_sha256: {}", self.hash),
            format!("seed: {}", self.cfg.seed),
        ];
        h.extend(extra.iter().map(|(k, v)| format!("{k}: {v}")));
        h
    }

    fn out_dir(&self) -> Result<&Path, CliError> {
        let d = self.cfg.out.as_path();
        fs::create_dir_all(d).map_err(|e| CliError::Io {
            path: d.to_path_buf(),
            msg: e.to_string(),
        })?;
        Ok(d)
    }

    /// The test set, or the training set when none is configured.
    fn eval_set(&self) -> &Dataset {
        self.data.test.as_ref().unwrap_or(&self.data.train)
    }
}

fn report(path: &Path, comments: Vec<String>, columns: &[&str], rows: Vec<Vec<Cell>>) -> Result<PathBuf, CliError> {
    let mut r = Report::new(columns);
    r.comments = comments;
    r.rows = rows;
    write_report(&r, path)?;
    Ok(path.to_path_buf())
}

pub struct LoadedModel {
    pub model: Model,
    pub theta: ParamVector,
    pub hash: String,
}

/// Loads a checkpoint; a missing file names the command that produces it.
pub fn load_model(path: &Path, expected: &ModelConfig) -> Result<LoadedModel, CliError> {
    if !path.exists() {
        return Err(CliError::Dependency {
            path: path.to_path_buf(),
            command: "train",
        });
    }
    let (ck, hash) = load_checkpoint(path)?;
    if &ck.meta.model != expected {
        return Err(CliError::Config(format!(
            "{} holds model `{}`, configuration expects `{}`",
            path.display(),
            ck.meta.model.name,
            expected.name
        )));
    }
    let mut model = Model::new(ck.meta.model)?;
    model.set_bn_stats(ck.bn_stats)?;
    Ok(LoadedModel {
        model,
        theta: ck.theta,
        hash,
    })
}

fn train_info(ctx: &Context, config: &TrainConfig) -> serde_json::Value {
    serde_json::json!({
        "tool": TOOL,
        "config_sha256": ctx.hash,
        "train": config,
    })
}

fn checkpoint_of(ctx: &Context, config: &TrainConfig, state: &TrainState, model: &Model) -> Checkpoint {
    Checkpoint {
        meta: CheckpointMeta {
            model: ctx.model.clone(),
            seed: config.seed,
            epochs_completed: state.epochs_completed,
            info: train_info(ctx, config),
        },
        theta: state.theta.clone(),
        momentum: state.momentum.clone(),
        bn_stats: model.bn_stats().to_vec(),
    }
}

/// Trains one model into `dir`: streamed `metrics.csv`, `checkpoint.bin`,
/// and `last_good.bin` if training diverges.
fn train_into(ctx: &Context, config: &TrainConfig, dir: &Path) -> Result<(Model, TrainState, String), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io {
        path: dir.to_path_buf(),
        msg: e.to_string(),
    })?;
    let mut model = Model::new(ctx.model.clone())?;
    let state = TrainState::fresh(&model, config.seed);
    let metrics_path = dir.join("metrics.csv");
    let header = ctx.header(&[
        ("batch_size", config.batch_size.to_string()),
        ("train_data", serde_json::to_string(&ctx.data.train.provenance).expect("json")),
    ]);
    let mut csv = CsvAppender::create(&metrics_path, &header, &EpochRecord::COLUMNS)?;
    let result = train(
        &mut model,
        state,
        &ctx.data.train,
        ctx.data.test.as_ref(),
        config,
        |row, state, model| {
            csv.row(&row.cells())?;
            if let Some(every) = config.checkpoint_every {
                if every > 0 && state.epochs_completed % every == 0 {
                    let path = dir.join(format!("checkpoint_epoch{}.bin", state.epochs_completed));
                    save_checkpoint(&path, &checkpoint_of(ctx, config, state, model))?;
                }
            }
            Ok(())
        },
    );
    match result {
        Ok(out) => {
            let hash = save_checkpoint(&dir.join("checkpoint.bin"), &checkpoint_of(ctx, config, &out.state, &model))?;
            Ok((model, out.state, hash))
        }
        Err(Error::Divergence { epoch, loss, last_good }) => {
            let state = TrainState {
                theta: ParamVector(last_good.to_vec()),
                momentum: vec![0.0; model.num_params()],
                epochs_completed: epoch - 1,
            };
            save_checkpoint(&dir.join("last_good.bin"), &checkpoint_of(ctx, config, &state, &model))?;
            Err(Error::Divergence { epoch, loss, last_good }.into())
        }
        Err(e) => Err(e.into()),
    }
}

pub fn cmd_train(ctx: &Context) -> Result<Outcome, CliError> {
    let out = ctx.out_dir()?.to_path_buf();
    train_into(ctx, &ctx.cfg.train, &out)?;
    Ok(Outcome {
        files: vec![out.join("metrics.csv"), out.join("checkpoint.bin")],
        nonconverged: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorsMeta {
    pub checkpoint_sha256: String,
    pub b_h: usize,
    pub eigenvalues: Vec<f64>,
}

pub fn eigvec_path(out: &Path, b_h: usize) -> PathBuf {
    out.join(format!("eigvecs_bh{b_h}.bin"))
}

fn spectrum_rows(r: &SpectrumResult) -> Vec<Vec<Cell>> {
    r.pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            vec![
                (i + 1).into(),
                p.value.into(),
                p.converged.into(),
                p.iterations.into(),
                p.rel_change.into(),
                p.residual.into(),
            ]
        })
        .collect()
}

fn input_stats_rows(s: &InputStats) -> Vec<Vec<Cell>> {
    let row = |name: &str, a: Summary, b: Summary, pick: fn(Summary) -> f64| -> Vec<Cell> {
        vec![name.into(), pick(a).into(), pick(b).into()]
    };
    vec![
        row("mean", s.lambda_summary, s.grad_norm_summary, |s| s.mean),
        row("median", s.lambda_summary, s.grad_norm_summary, |s| s.median),
        row("max", s.lambda_summary, s.grad_norm_summary, |s| s.max),
    ]
}

pub fn cmd_spectrum(ctx: &Context) -> Result<Outcome, CliError> {
    let s = &ctx.cfg.spectrum;
    let ck = s.checkpoint.clone().unwrap_or_else(|| ctx.cfg.default_checkpoint());
    let m = load_model(&ck, &ctx.model)?;
    let out = ctx.out_dir()?.to_path_buf();
    let params = s.params();
    let mut outcome = Outcome::default();
    for &b in &s.b_h {
        let b_h = if b == 0 { ctx.data.train.len() } else { b };
        let mut rng = Rng::derive(ctx.cfg.seed, b_h as u64);
        let r = theta_spectrum(&m.model, &m.theta, &ctx.data.train, b_h, &params, &mut rng)?;
        outcome.nonconverged |= !r.all_converged();
        let header = ctx.header(&[
            ("checkpoint_sha256", m.hash.clone()),
            ("b_h", b_h.to_string()),
            ("k", s.k.to_string()),
            ("tol", format!("{:?}", s.tol)),
            ("bn_mode", "eval".into()),
        ]);
        outcome.files.push(report(
            &out.join(format!("spectrum_bh{b_h}.csv")),
            header,
            &["rank", "eigenvalue", "converged", "iterations", "rel_change", "residual"],
            spectrum_rows(&r),
        )?);
        let vectors: Vec<&[f64]> = r.pairs.iter().map(|p| p.vector.as_slice()).collect();
        let path = eigvec_path(&out, b_h);
        write_container(
            &path,
            VECTORS_MAGIC,
            &VectorsMeta {
                checkpoint_sha256: m.hash.clone(),
                b_h,
                eigenvalues: r.values(),
            },
            &vectors,
        )?;
        outcome.files.push(path);
    }
    if s.input_samples > 0 {
        let set = ctx.eval_set();
        let n = s.input_samples.min(set.len());
        let mut rng = Rng::derive(ctx.cfg.seed, u64::MAX);
        let stats = dataset_input_stats(&m.model, &m.theta, set, n, &params, &mut rng)?;
        outcome.nonconverged |= !stats.all_converged;
        let header = ctx.header(&[("checkpoint_sha256", m.hash.clone()), ("samples", n.to_string())]);
        let rows = stats
            .indices
            .iter()
            .zip(&stats.lambda)
            .zip(&stats.grad_norm)
            .map(|((&i, &l), &g)| vec![i.into(), l.into(), g.into()])
            .collect();
        outcome.files.push(report(
            &out.join("input_spectrum.csv"),
            header.clone(),
            &["sample", "lambda1_x", "grad_x_norm"],
            rows,
        )?);
        outcome.files.push(report(
            &out.join("input_summary.csv"),
            header,
            &["statistic", "lambda1_x", "grad_x_norm"],
            input_stats_rows(&stats),
        )?);
    }
    Ok(outcome)
}

fn attack_set(ctx: &Context) -> Result<Dataset, CliError> {
    let set = ctx.eval_set();
    match ctx.cfg.attack.samples {
        Some(n) if n < set.len() => Ok(set.subset(n, ctx.cfg.seed)?),
        _ => Ok(set.clone()),
    }
}

pub fn cmd_attack(ctx: &Context) -> Result<Outcome, CliError> {
    let a = &ctx.cfg.attack;
    let src_path = a.checkpoint.clone().unwrap_or_else(|| ctx.cfg.default_checkpoint());
    let source = load_model(&src_path, &ctx.model)?;
    let targets: Vec<LoadedModel> = if a.targets.is_empty() {
        vec![load_model(&src_path, &ctx.model)?]
    } else {
        a.targets
            .iter()
            .map(|p| load_model(p, &ctx.model))
            .collect::<Result<_, _>>()?
    };
    let set = attack_set(ctx)?;
    let specs = a.specs();
    let out = ctx.out_dir()?.to_path_buf();
    let mut outcome = Outcome::default();
    let mut header = ctx.header(&[("source_checkpoint_sha256", source.hash.clone()), ("samples", set.len().to_string())]);
    for (i, t) in targets.iter().enumerate() {
        header.push(format!("target_{i}_sha256: {}", t.hash));
    }
    // acc[target][0] is clean accuracy, then one entry per attack.
    let mut acc: Vec<Vec<f64>> = targets
        .iter()
        .map(|t| Ok(vec![t.model.evaluate(&t.theta, &set.inputs, &set.labels)?.1]))
        .collect::<Result<_, CliError>>()?;
    for spec in &specs {
        let (adv, stats) = adversarial_dataset(&source.model, &source.theta, &set, spec, &source.hash, ctx.cfg.seed)?;
        header.push(format!(
            "{}: pre_clamp_max_norm={:?} zero_direction={} cg_unconverged={}",
            spec.label(),
            stats.pre_clamp_max_norm,
            stats.zero_direction,
            stats.cg_unconverged
        ));
        for (t, row) in targets.iter().zip(&mut acc) {
            row.push(t.model.evaluate(&t.theta, &adv.inputs, &adv.labels)?.1);
        }
        if a.export {
            outcome.files.extend(export_adversarial(&out, spec, &adv)?);
        }
    }
    let labels: Vec<String> = specs.iter().map(AttackSpec::label).collect();
    let mut columns = vec!["model", "clean"];
    columns.extend(labels.iter().map(String::as_str));
    columns.push("mean_adv");
    let rows = targets
        .iter()
        .zip(&acc)
        .enumerate()
        .map(|(i, (t, row))| {
            let mut cells: Vec<Cell> = vec![Cell::Text(format!("{i}:{}", &t.hash[..12]))];
            cells.extend(row.iter().map(|&v| Cell::Real(v)));
            cells.push(mean(&row[1..]).into());
            cells
        })
        .collect();
    outcome
        .files
        .push(report(&out.join("attack_matrix.csv"), header, &columns, rows)?);
    Ok(outcome)
}

fn mean(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = 0.0;
    for x in v {
        s += x;
    }
    Some(s / v.len() as f64)
}

fn export_adversarial(out: &Path, spec: &AttackSpec, adv: &Dataset) -> Result<Vec<PathBuf>, CliError> {
    let dir = out.join("adversarial").join(format!("{}_{}", spec.kind.name(), spec.epsilon));
    let images = dir.join("images.idx");
    let labels = dir.join("labels.idx");
    save_idx(adv, &images, &labels)?;
    let manifest = dir.join("manifest.json");
    let json = serde_json::json!({
        "provenance": adv.provenance,
        "images_sha256": file_sha256(&images)?,
        "labels_sha256": file_sha256(&labels)?,
    });
    fs::write(&manifest, serde_json::to_string_pretty(&json).expect("json") + "\n").map_err(|e| CliError::Io {
        path: manifest.clone(),
        msg: e.to_string(),
    })?;
    Ok(vec![images, labels, manifest])
}

fn load_directions(path: &Path, checkpoint_hash: &str) -> Result<(Vec<Vec<f64>>, String), CliError> {
    if !path.exists() {
        return Err(CliError::Dependency {
            path: path.to_path_buf(),
            command: "spectrum",
        });
    }
    let c = read_container::<VectorsMeta>(path, VECTORS_MAGIC)?;
    if c.meta.checkpoint_sha256 != checkpoint_hash {
        return Err(CliError::Config(format!(
            "{} was computed for another checkpoint",
            path.display()
        )));
    }
    Ok((c.arrays, c.hash))
}

pub fn cmd_landscape(ctx: &Context) -> Result<Outcome, CliError> {
    let l = &ctx.cfg.landscape;
    let ck = l.checkpoint.clone().unwrap_or_else(|| ctx.cfg.default_checkpoint());
    let base = load_model(&ck, &ctx.model)?;
    let batch = match l.batch {
        Some(n) => Some(ctx.data.train.subset(n.min(ctx.data.train.len()), ctx.cfg.seed)?),
        None => None,
    };
    let mut targets = vec![LossTarget::dataset("train", &ctx.data.train)];
    if let Some(t) = &ctx.data.test {
        targets.push(LossTarget::dataset("test", t));
    }
    if let Some(b) = &batch {
        targets.push(LossTarget::dataset("batch", b));
    }
    let mut extra = vec![("checkpoint_sha256", base.hash.clone()), ("bn_mode", "eval".to_string())];
    let directions = |extra: &mut Vec<(&str, String)>| -> Result<Vec<Vec<f64>>, CliError> {
        let b_h = ctx.cfg.spectrum.b_h[0];
        let b_h = if b_h == 0 { ctx.data.train.len() } else { b_h };
        let path = l.directions.clone().unwrap_or_else(|| eigvec_path(&ctx.cfg.out, b_h));
        let (v, hash) = load_directions(&path, &base.hash)?;
        extra.push(("directions_sha256", hash));
        Ok(v)
    };
    let (scan, name) = match l.mode {
        LandscapeMode::OneD => {
            let v = directions(&mut extra)?;
            let grid = l.grid.clone().unwrap_or_else(default_grid_1d);
            (scan_1d(&base.model, &base.theta, &v[0], &grid, &targets)?, "landscape_1d.csv")
        }
        LandscapeMode::TwoD => {
            let v = directions(&mut extra)?;
            if v.len() < 2 {
                return Err(CliError::Config("landscape 2d needs spectrum.k ≥ 2".into()));
            }
            let g1 = l.grid.clone().unwrap_or_else(default_grid_2d);
            let g2 = l.grid2.clone().unwrap_or_else(|| g1.clone());
            (
                scan_2d(&base.model, &base.theta, &v[0], &v[1], &g1, &g2, &targets)?,
                "landscape_2d.csv",
            )
        }
        LandscapeMode::Interpolate => {
            let other = l
                .other
                .as_ref()
                .ok_or_else(|| CliError::Config("landscape.other is required for interpolation".into()))?;
            let b = load_model(other, &ctx.model)?;
            extra.push(("other_checkpoint_sha256", b.hash.clone()));
            let grid = l.grid.clone().unwrap_or_else(default_interpolation_grid);
            (
                interpolate_models(&base.model, &base.theta, &b.theta, &grid, &targets)?,
                "interpolation.csv",
            )
        }
    };
    let out = ctx.out_dir()?.to_path_buf();
    let mut r = scan.to_report();
    r.comments = ctx.header(&extra);
    let path = out.join(name);
    write_report(&r, &path)?;
    Ok(Outcome {
        files: vec![path],
        nonconverged: false,
    })
}

/// Metrics of one trained sweep leg.
#[derive(Debug, Clone, PartialEq)]
pub struct LegResult {
    pub batch: usize,
    pub seed: u64,
    pub epochs: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub lambda1_train: f64,
    pub lambda1_test: f64,
    pub input: Option<InputStats>,
    pub adv_acc: Vec<f64>,
    pub converged: bool,
}

impl LegResult {
    fn numbers(&self) -> Vec<f64> {
        let s = |f: fn(&InputStats) -> f64| self.input.as_ref().map_or(f64::NAN, f);
        let mut v = vec![
            self.epochs as f64,
            self.train_loss,
            self.train_acc,
            self.test_acc,
            self.lambda1_train,
            self.lambda1_test,
            s(|i| i.lambda_summary.mean),
            s(|i| i.lambda_summary.median),
            s(|i| i.lambda_summary.max),
            s(|i| i.grad_norm_summary.mean),
            s(|i| i.grad_norm_summary.median),
            s(|i| i.grad_norm_summary.max),
        ];
        v.extend(&self.adv_acc);
        v
    }
}

const LEG_COLUMNS: [&str; 12] = [
    "epochs",
    "train_loss",
    "train_acc",
    "test_acc",
    "lambda1_theta_train",
    "lambda1_theta_test",
    "lambda1_x_mean",
    "lambda1_x_median",
    "lambda1_x_max",
    "grad_x_mean",
    "grad_x_median",
    "grad_x_max",
];

/// Trains one (batch size, seed) leg into `dir` and measures it.
pub fn run_leg(ctx: &Context, batch: usize, seed: u64, dir: &Path) -> Result<LegResult, CliError> {
    let config = TrainConfig {
        batch_size: batch,
        seed,
        ..ctx.cfg.train
    };
    let (model, state, _) = train_into(ctx, &config, dir)?;
    let theta = &state.theta;
    let s = &ctx.cfg.spectrum;
    let params = PowerIterParams { k: 1, ..s.params() };
    let test = ctx.eval_set();
    let b_h = match s.b_h[0] {
        0 => usize::MAX,
        b => b,
    };
    let mut rng = Rng::derive(seed, 1 << 40);
    let tr = theta_spectrum(&model, theta, &ctx.data.train, b_h.min(ctx.data.train.len()), &params, &mut rng)?;
    let te = theta_spectrum(&model, theta, test, b_h.min(test.len()), &params, &mut rng)?;
    let input = if s.input_samples > 0 {
        Some(dataset_input_stats(&model, theta, test, s.input_samples.min(test.len()), &params, &mut rng)?)
    } else {
        None
    };
    let (train_loss, train_acc) = model.evaluate(theta, &ctx.data.train.inputs, &ctx.data.train.labels)?;
    let (_, test_acc) = model.evaluate(theta, &test.inputs, &test.labels)?;
    let set = attack_set(ctx)?;
    let adv_acc = ctx
        .cfg
        .attack
        .specs()
        .iter()
        .map(|spec| Ok(hesslens::attacks::evaluate_adversarial(&model, theta, &set, spec, None)?.accuracy))
        .collect::<Result<Vec<_>, CliError>>()?;
    Ok(LegResult {
        batch,
        seed,
        epochs: state.epochs_completed,
        train_loss,
        train_acc,
        test_acc,
        lambda1_train: tr.pairs[0].value,
        lambda1_test: te.pairs[0].value,
        converged: tr.all_converged() && te.all_converged() && input.as_ref().is_none_or(|i| i.all_converged),
        input,
        adv_acc,
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    Summary::of(&{
        v.retain(|x| !x.is_nan());
        v
    })
    .median
}

pub fn cmd_sweep(ctx: &Context) -> Result<Outcome, CliError> {
    let out = ctx.out_dir()?.to_path_buf();
    let seeds = if ctx.cfg.sweep.seeds.is_empty() {
        vec![ctx.cfg.seed]
    } else {
        ctx.cfg.sweep.seeds.clone()
    };
    let labels: Vec<String> = ctx.cfg.attack.specs().iter().map(|s| format!("adv_acc_{}", s.label())).collect();
    let mut leg_cols = vec!["batch", "seed", "status"];
    leg_cols.extend(LEG_COLUMNS);
    leg_cols.extend(labels.iter().map(String::as_str));
    let mut sum_cols = vec!["batch", "seeds"];
    sum_cols.extend(LEG_COLUMNS);
    sum_cols.extend(labels.iter().map(String::as_str));
    let width = LEG_COLUMNS.len() + labels.len();

    let mut legs: Vec<Vec<Cell>> = Vec::new();
    let mut summary: Vec<Vec<Cell>> = Vec::new();
    let mut outcome = Outcome::default();
    let mut failure = None;
    'outer: for &b in &ctx.cfg.sweep.batch_sizes {
        let mut done: Vec<LegResult> = Vec::new();
        for &seed in &seeds {
            let dir = out.join(format!("b{b}_s{seed}"));
            match run_leg(ctx, b, seed, &dir) {
                Ok(r) => {
                    outcome.nonconverged |= !r.converged;
                    let mut row: Vec<Cell> = vec![b.into(), Cell::Int(seed as i64), "ok".into()];
                    row.extend(r.numbers().into_iter().map(|v| if v.is_nan() { Cell::Missing } else { Cell::Real(v) }));
                    legs.push(row);
                    done.push(r);
                }
                Err(e) => {
                    let mut row: Vec<Cell> = vec![b.into(), Cell::Int(seed as i64), Cell::Text(format!("failed: {e}"))];
                    row.extend(std::iter::repeat_n(Cell::Missing, width));
                    legs.push(row);
                    failure = Some(e);
                    break 'outer;
                }
            }
        }
        let mut row: Vec<Cell> = vec![b.into(), done.len().into()];
        for j in 0..width {
            let m = median(done.iter().map(|r| r.numbers()[j]).collect());
            row.push(if m.is_nan() { Cell::Missing } else { Cell::Real(m) });
        }
        summary.push(row);
    }
    let header = ctx.header(&[("seeds", format!("{seeds:?}")), ("aggregate", "median over seeds".into())]);
    outcome.files.push(report(&out.join("sweep_legs.csv"), header.clone(), &leg_cols, legs)?);
    outcome.files.push(report(&out.join("sweep.csv"), header, &sum_cols, summary)?);
    match failure {
        Some(e) => Err(e),
        None => Ok(outcome),
    }
}
