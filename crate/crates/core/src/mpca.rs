//! Stage 1 factorization: mean + column basis `A` + row basis `B`, fitted by
//! the alternating generalized low-rank approximation (GLRAM).

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    center, mode_scatter_identity, mode_scatter_with_basis, sym_eig, ImageStack, Mode,
};

/// Relative eigen-gap below which a rank boundary counts as a tie.
const TIE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcaModel {
    pub mean: DMatrix<f64>,
    /// `p x p0`, orthonormal columns.
    pub a: DMatrix<f64>,
    /// `q x q0`, orthonormal columns.
    pub b: DMatrix<f64>,
    /// All `p` eigenvalues of the final column-mode covariance, non-increasing.
    pub lambda: Vec<f64>,
    /// All `q` eigenvalues of the final row-mode covariance, non-increasing.
    pub xi: Vec<f64>,
    /// Noise variance, filled in by rank selection.
    pub sigma2: Option<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Captured variance `n^-1 sum ||A^T (X_i - mean) B||^2` after every half-step.
    pub captured_trace: Vec<f64>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlramOptions {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for GlramOptions {
    fn default() -> Self {
        Self {
            max_iter: 30,
            tol: 1e-6,
        }
    }
}

/// Reduced `p0 x q0` representations `U_i = A^T (X_i - mean) B`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoreStack {
    cores: Vec<DMatrix<f64>>,
    p0: usize,
    q0: usize,
}

impl CoreStack {
    pub fn new(cores: Vec<DMatrix<f64>>) -> Result<Self> {
        let (p0, q0) = cores
            .first()
            .map(|c| c.shape())
            .ok_or_else(|| Error::invalid("core stack must not be empty"))?;
        if cores.iter().any(|c| c.shape() != (p0, q0)) {
            return Err(Error::invalid("cores must share one shape"));
        }
        if cores.iter().any(|c| c.iter().any(|v| !v.is_finite())) {
            return Err(Error::invalid("cores must be finite"));
        }
        Ok(Self { cores, p0, q0 })
    }

    pub fn len(&self) -> usize {
        self.cores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cores.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.p0, self.q0)
    }

    pub fn cores(&self) -> &[DMatrix<f64>] {
        &self.cores
    }

    /// `n^-1 sum ||U_i||_F^2`
    pub fn mean_energy(&self) -> f64 {
        self.cores.iter().map(|c| c.norm_squared()).sum::<f64>() / self.len() as f64
    }
}

impl MpcaModel {
    pub fn ranks(&self) -> (usize, usize) {
        (self.a.ncols(), self.b.ncols())
    }

    pub fn dims(&self) -> (usize, usize) {
        self.mean.shape()
    }

    /// Keeps the first `p0` columns of `A` and `q0` of `B`; spectra are unchanged.
    pub fn truncate(&self, p0: usize, q0: usize) -> Result<MpcaModel> {
        let (pu, qu) = self.ranks();
        if p0 == 0 || q0 == 0 || p0 > pu || q0 > qu {
            return Err(Error::invalid(format!(
                "cannot truncate a rank ({pu}, {qu}) model to ({p0}, {q0})"
            )));
        }
        Ok(MpcaModel {
            a: self.a.columns(0, p0).into_owned(),
            b: self.b.columns(0, q0).into_owned(),
            ..self.clone()
        })
    }
}

fn boundary_tie(values: &[f64], k: usize) -> bool {
    k < values.len() && values[k - 1] - values[k] <= TIE_TOL * values[0].abs()
}

/// Fits `A` (`p x p0`) and `B` (`q x q0`) by alternating eigen-updates.
///
/// `B` starts as the leading `q0` eigenvectors of `n^-1 sum X_i^T X_i`; each
/// sweep then refreshes `A` given `B` and `B` given `A`. The loop stops once the
/// captured variance changes by less than `tol` relatively, or after `max_iter`
/// sweeps (the model is then flagged as not converged).
pub fn fit_glram(
    stack: &ImageStack,
    p0: usize,
    q0: usize,
    opts: GlramOptions,
) -> Result<MpcaModel> {
    let (p, q) = stack.dims();
    if p0 == 0 || p0 > p || q0 == 0 || q0 > q {
        return Err(Error::invalid(format!(
            "ranks ({p0}, {q0}) out of range for {p}x{q} images"
        )));
    }
    if opts.max_iter == 0 || !(opts.tol > 0.0) {
        return Err(Error::invalid("max_iter must be >= 1 and tol > 0"));
    }
    let (mean, centered) = center(stack)?;
    let total = centered.mean_energy();
    if total <= f64::MIN_POSITIVE {
        return Err(Error::DegenerateData("all samples are identical".into()));
    }

    let mut b = sym_eig(&mode_scatter_identity(&centered, Mode::Row), q0)?.vectors;
    let mut captured_trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut lambda = Vec::new();
    let mut xi = Vec::new();
    let mut a = DMatrix::zeros(p, p0);
    let mut prev = f64::NEG_INFINITY;

    while iterations < opts.max_iter {
        iterations += 1;
        let col = sym_eig(&mode_scatter_with_basis(&centered, &b, Mode::Column), p)?;
        a = col.vectors.columns(0, p0).into_owned();
        captured_trace.push(col.values[..p0].iter().sum());
        lambda = col.values;

        let row = sym_eig(&mode_scatter_with_basis(&centered, &a, Mode::Row), q)?;
        b = row.vectors.columns(0, q0).into_owned();
        let cur: f64 = row.values[..q0].iter().sum();
        captured_trace.push(cur);
        xi = row.values;

        if (cur - prev).abs() <= opts.tol * cur.abs().max(f64::MIN_POSITIVE) {
            converged = true;
            break;
        }
        prev = cur;
    }

    let mut warnings = Vec::new();
    if boundary_tie(&lambda, p0) {
        warnings.push(format!("column-mode eigenvalues tie at rank boundary {p0}"));
    }
    if boundary_tie(&xi, q0) {
        warnings.push(format!("row-mode eigenvalues tie at rank boundary {q0}"));
    }
    if !converged {
        warnings.push(format!(
            "GLRAM did not converge within {} iterations",
            opts.max_iter
        ));
    }

    Ok(MpcaModel {
        mean,
        a,
        b,
        lambda,
        xi,
        sigma2: None,
        converged,
        iterations,
        captured_trace,
        warnings,
    })
}

/// `U_i = A^T (X_i - mean) B`.
pub fn project(model: &MpcaModel, stack: &ImageStack) -> Result<CoreStack> {
    let (p, q) = model.dims();
    stack.check_dims(p, q)?;
    let at = model.a.transpose();
    let cores = stack
        .samples()
        .iter()
        .map(|x| &at * (x - &model.mean) * &model.b)
        .collect();
    CoreStack::new(cores)
}

/// `X_i = mean + A U_i B^T`.
pub fn reconstruct(model: &MpcaModel, cores: &CoreStack) -> Result<ImageStack> {
    if cores.shape() != model.ranks() {
        return Err(Error::invalid(format!(
            "cores are {:?}, model ranks are {:?}",
            cores.shape(),
            model.ranks()
        )));
    }
    let bt = model.b.transpose();
    let samples = cores
        .cores()
        .iter()
        .map(|u| &model.mean + &model.a * u * &bt)
        .collect();
    ImageStack::new(samples)
}
