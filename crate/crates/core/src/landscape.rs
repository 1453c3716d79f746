//! Loss along eigenvector directions and along the segment between two
//! parameter vectors.

use rayon::prelude::*;

use crate::data::{Cell, Dataset, Report};
use crate::error::{ensure_dim, Error, Result};
use crate::nn::{Model, ParamVector};
use crate::tensor::{dot, norm, Tensor};

/// A named set of samples the loss is evaluated on.
#[derive(Debug, Clone, Copy)]
pub struct LossTarget<'a> {
    pub name: &'a str,
    pub x: &'a Tensor,
    pub labels: &'a [usize],
}

impl<'a> LossTarget<'a> {
    pub fn dataset(name: &'a str, d: &'a Dataset) -> Self {
        LossTarget {
            name,
            x: &d.inputs,
            labels: &d.labels,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanPoint {
    pub coords: Vec<f64>,
    /// One loss per target; NaN or ±inf when the forward pass overflowed.
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LandscapeScan {
    /// Column name per coordinate (`eps`, `eps2`, `lambda`).
    pub axes: Vec<String>,
    pub targets: Vec<String>,
    pub points: Vec<ScanPoint>,
}

impl LandscapeScan {
    pub fn to_report(&self) -> Report {
        let mut cols: Vec<String> = self.axes.clone();
        cols.extend(self.targets.iter().map(|t| format!("{t}_loss")));
        let mut r = Report {
            columns: cols,
            ..Report::default()
        };
        for p in &self.points {
            r.push(p.coords.iter().chain(&p.losses).map(|&v| Cell::Real(v)).collect());
        }
        r
    }

    /// Losses at the point whose coordinates are all zero.
    pub fn at_origin(&self) -> Option<&[f64]> {
        self.points
            .iter()
            .find(|p| p.coords.iter().all(|&c| c == 0.0))
            .map(|p| p.losses.as_slice())
    }
}

/// `n` evenly spaced points from `lo` to `hi` inclusive; a symmetric range
/// with odd `n` contains an exact zero.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|i| {
                let t = i as f64 / (n - 1) as f64;
                lo * (1.0 - t) + hi * t
            })
            .collect(),
    }
}

pub fn default_grid_1d() -> Vec<f64> {
    linspace(-0.5, 0.5, 41)
}

pub fn default_grid_2d() -> Vec<f64> {
    linspace(-0.5, 0.5, 21)
}

pub fn default_interpolation_grid() -> Vec<f64> {
    linspace(-0.25, 1.25, 26)
}

fn loss_at(model: &Model, theta: &ParamVector, t: &LossTarget) -> Result<f64> {
    match model.evaluate(theta, t.x, t.labels) {
        Ok((loss, _)) => Ok(loss),
        Err(Error::NonFinite { .. }) => Ok(f64::NAN),
        Err(e) => Err(e),
    }
}

fn losses(model: &Model, theta: &ParamVector, targets: &[LossTarget]) -> Result<Vec<f64>> {
    targets.iter().map(|t| loss_at(model, theta, t)).collect()
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() || grid.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract("scan grid must be nonempty and finite".into()));
    }
    if !grid.contains(&0.0) {
        return Err(Error::Contract("scan grid must contain 0".into()));
    }
    Ok(())
}

fn check_unit(v: &[f64], n: usize) -> Result<()> {
    ensure_dim!(v.len() == n, "direction has {} entries for {n} parameters", v.len());
    let len = norm(v);
    if (len - 1.0).abs() > 1e-10 {
        return Err(Error::Contract(format!("direction norm {len} is not 1")));
    }
    Ok(())
}

fn shifted(theta: &ParamVector, steps: &[(f64, &[f64])]) -> ParamVector {
    let mut t = theta.0.clone();
    for &(eps, v) in steps {
        for (a, b) in t.iter_mut().zip(v) {
            *a += eps * b;
        }
    }
    ParamVector(t)
}

fn verify_origin(scan: &LandscapeScan, model: &Model, theta: &ParamVector, targets: &[LossTarget]) -> Result<()> {
    let direct = losses(model, theta, targets)?;
    let at0 = scan.at_origin().expect("grid contains 0");
    for (a, b) in at0.iter().zip(&direct) {
        if !((a - b).abs() <= 1e-12 || (a.is_nan() && b.is_nan())) {
            return Err(Error::Numeric(format!("loss at the origin {a} differs from direct loss {b}")));
        }
    }
    Ok(())
}

/// Loss of `θ + ε v` for each `ε` (BN in eval mode with the model's stored
/// statistics).
pub fn scan_1d(
    model: &Model,
    theta: &ParamVector,
    v: &[f64],
    grid: &[f64],
    targets: &[LossTarget],
) -> Result<LandscapeScan> {
    check_grid(grid)?;
    check_unit(v, model.num_params())?;
    let points = grid
        .par_iter()
        .map(|&eps| {
            Ok(ScanPoint {
                coords: vec![eps],
                losses: losses(model, &shifted(theta, &[(eps, v)]), targets)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let scan = LandscapeScan {
        axes: vec!["eps".into()],
        targets: targets.iter().map(|t| t.name.to_string()).collect(),
        points,
    };
    verify_origin(&scan, model, theta, targets)?;
    Ok(scan)
}

/// Loss of `θ + ε₁ v₁ + ε₂ v₂` over the grid product, `ε₁` outer.
pub fn scan_2d(
    model: &Model,
    theta: &ParamVector,
    v1: &[f64],
    v2: &[f64],
    grid1: &[f64],
    grid2: &[f64],
    targets: &[LossTarget],
) -> Result<LandscapeScan> {
    check_grid(grid1)?;
    check_grid(grid2)?;
    check_unit(v1, model.num_params())?;
    check_unit(v2, model.num_params())?;
    let overlap = dot(v1, v2)?;
    if overlap.abs() > 1e-8 {
        return Err(Error::Contract(format!("directions overlap by {overlap}")));
    }
    let cells: Vec<(f64, f64)> = grid1
        .iter()
        .flat_map(|&a| grid2.iter().map(move |&b| (a, b)))
        .collect();
    let points = cells
        .par_iter()
        .map(|&(a, b)| {
            Ok(ScanPoint {
                coords: vec![a, b],
                losses: losses(model, &shifted(theta, &[(a, v1), (b, v2)]), targets)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let scan = LandscapeScan {
        axes: vec!["eps1".into(), "eps2".into()],
        targets: targets.iter().map(|t| t.name.to_string()).collect(),
        points,
    };
    verify_origin(&scan, model, theta, targets)?;
    Ok(scan)
}

/// Loss of `(1 − λ) θ_a + λ θ_b` for each `λ`.
pub fn interpolate_models(
    model: &Model,
    theta_a: &ParamVector,
    theta_b: &ParamVector,
    grid: &[f64],
    targets: &[LossTarget],
) -> Result<LandscapeScan> {
    if theta_a.len() != theta_b.len() || theta_a.len() != model.num_params() {
        return Err(Error::Contract(format!(
            "parameter vectors of length {} and {} for a model with {}",
            theta_a.len(),
            theta_b.len(),
            model.num_params()
        )));
    }
    if grid.is_empty() || grid.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract("interpolation grid must be nonempty and finite".into()));
    }
    let points = grid
        .par_iter()
        .map(|&lam| {
            let theta = ParamVector(
                theta_a
                    .0
                    .iter()
                    .zip(&theta_b.0)
                    .map(|(a, b)| lerp(*a, *b, lam))
                    .collect(),
            );
            Ok(ScanPoint {
                coords: vec![lam],
                losses: losses(model, &theta, targets)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LandscapeScan {
        axes: vec!["lambda".into()],
        targets: targets.iter().map(|t| t.name.to_string()).collect(),
        points,
    })
}

/// Exact at both endpoints and constant when `a == b`.
fn lerp(a: f64, b: f64, lam: f64) -> f64 {
    if lam <= 0.5 {
        a + lam * (b - a)
    } else {
        b - (1.0 - lam) * (b - a)
    }
}

/// Least-squares fit `a + b ε + c ε²`; returns the curvature `2c`.
pub fn quadratic_curvature(eps: &[f64], loss: &[f64]) -> Result<f64> {
    ensure_dim!(eps.len() == loss.len() && eps.len() >= 3, "need at least three points");
    // Normal equations in the monomial basis, solved by Gaussian elimination.
    let mut m = [[0.0f64; 4]; 3];
    for (&e, &l) in eps.iter().zip(loss) {
        let basis = [1.0, e, e * e];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] += basis[i] * basis[j];
            }
            m[i][3] += basis[i] * l;
        }
    }
    for col in 0..3 {
        let piv = (col..3)
            .max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))
            .expect("rows");
        m.swap(col, piv);
        if m[col][col].abs() < 1e-300 {
            return Err(Error::Numeric("degenerate quadratic fit".into()));
        }
        for r in 0..3 {
            if r != col {
                let f = m[r][col] / m[col][col];
                for c in col..4 {
                    m[r][c] -= f * m[col][c];
                }
            }
        }
    }
    Ok(2.0 * m[2][3] / m[2][2])
}
