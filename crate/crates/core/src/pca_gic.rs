//! Stage 2: PCA on vectorized cores with rank chosen by the generalized
//! information criterion (GIC), plus AIC/BIC baselines on the same spiked
//! covariance fit term, and a plain vectorized-PCA baseline.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{center, sym_eig, vectorized_top_eigen, ImageStack};
use crate::mpca::CoreStack;

/// Relative floor applied to non-positive eigenvalues inside the fit term.
const EIGEN_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    /// `m x r` orthonormal eigenvectors (`m = p0 q0`); all `m` columns until a rank is set.
    pub basis: DMatrix<f64>,
    /// All `m` eigenvalues, non-increasing.
    pub kappa: Vec<f64>,
    pub r: Option<usize>,
    /// Mean of `kappa[r..]` once `r` is set.
    pub c_tail: Option<f64>,
}

impl PcaModel {
    pub fn dim(&self) -> usize {
        self.kappa.len()
    }

    /// Keeps the leading `r` eigenvectors and records the tail level.
    pub fn with_rank(&self, r: usize) -> Result<PcaModel> {
        let m = self.dim();
        if r == 0 || r > m || r > self.basis.ncols() {
            return Err(Error::invalid(format!(
                "rank {r} out of range for dimension {m}"
            )));
        }
        let c_tail = if r < m {
            Some(self.kappa[r..].iter().sum::<f64>() / (m - r) as f64)
        } else {
            None
        };
        Ok(PcaModel {
            basis: self.basis.columns(0, r).into_owned(),
            kappa: self.kappa.clone(),
            r: Some(r),
            c_tail,
        })
    }
}

/// Full eigen-decomposition of `S = n^-1 sum vec(U_i) vec(U_i)^T`. Cores are not re-centered.
pub fn pca_on_cores(cores: &CoreStack) -> Result<PcaModel> {
    let n = cores.len();
    if n < 2 {
        return Err(Error::DegenerateData(
            "stage-2 PCA needs at least two cores".into(),
        ));
    }
    let (p0, q0) = cores.shape();
    let m = p0 * q0;
    let mut s = DMatrix::<f64>::zeros(m, m);
    for u in cores.cores() {
        let v = DVector::from_column_slice(u.as_slice());
        s.ger(1.0, &v, &v, 1.0);
    }
    s /= n as f64;
    let eig = sym_eig(&s, m)?;
    Ok(PcaModel {
        basis: eig.vectors,
        kappa: eig.values,
        r: None,
        c_tail: None,
    })
}

fn check_spectrum(delta: &[f64]) -> Result<()> {
    if delta.iter().any(|d| !d.is_finite()) {
        return Err(Error::invalid("spectrum must be finite"));
    }
    Ok(())
}

/// Asymptotic bias correction
/// `C(r,2) + sum_{j<=r<l} d_l (d_j - d_r) / (d_r (d_j - d_l)) + r + mean(d_tail^2)/mean(d_tail)^2`.
pub fn gic_bias(delta: &[f64], r: usize) -> Result<f64> {
    check_spectrum(delta)?;
    let m = delta.len();
    if r == 0 || r >= m {
        return Err(Error::invalid(format!(
            "GIC bias needs 1 <= r < m, got r={r}, m={m}"
        )));
    }
    if delta.iter().any(|d| *d <= 0.0) {
        return Err(Error::invalid(
            "GIC bias needs a strictly positive spectrum",
        ));
    }
    let dr = delta[r - 1];
    let pairs = (r * (r - 1) / 2) as f64;
    let mut cross = 0.0;
    for &dj in &delta[..r] {
        for &dl in &delta[r..] {
            let num = dl * (dj - dr);
            let den = dr * (dj - dl);
            if den == 0.0 {
                if num == 0.0 {
                    continue;
                }
                return Err(Error::DegenerateSpectrum(format!(
                    "equal eigenvalues {dj} across the rank-{r} boundary"
                )));
            }
            cross += num / den;
        }
    }
    let tail = &delta[r..];
    let k = tail.len() as f64;
    let mean = tail.iter().sum::<f64>() / k;
    let mean_sq = tail.iter().map(|d| d * d).sum::<f64>() / k;
    Ok(pairs + cross + r as f64 + mean_sq / (mean * mean))
}

/// `sum_{j<=r} log k_j + (m - r) log(mean(k_{r+1..m}))`.
pub fn log_det_spiked(kappa: &[f64], r: usize) -> Result<f64> {
    let m = kappa.len();
    if r >= m {
        return Err(Error::invalid(format!(
            "spiked model needs r < m, got r={r}, m={m}"
        )));
    }
    let head: f64 = kappa[..r].iter().map(|k| k.ln()).sum();
    let tail_mean = kappa[r..].iter().sum::<f64>() / (m - r) as f64;
    if !(tail_mean > 0.0) {
        return Err(Error::DegenerateSpectrum(
            "tail of the spectrum has zero mean".into(),
        ));
    }
    Ok(head + (m - r) as f64 * tail_mean.ln())
}

/// Per-rank criterion values and the argmin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GicCurve {
    pub criterion_name: String,
    /// Ranks `1..=r_max`.
    pub ranks: Vec<usize>,
    pub log_det: Vec<f64>,
    /// GIC bias `b_r`, or the parameter count `k_r` for AIC/BIC.
    pub penalty_terms: Vec<f64>,
    pub criterion: Vec<f64>,
    pub argmin: usize,
    pub warnings: Vec<String>,
}

impl GicCurve {
    pub fn value_at(&self, r: usize) -> Option<f64> {
        self.criterion.get(r.checked_sub(1)?).copied()
    }
}

fn floored(kappa: &[f64], r_max: usize) -> Result<(Vec<f64>, Vec<String>)> {
    check_spectrum(kappa)?;
    let mut warnings = Vec::new();
    let top = kappa.first().copied().unwrap_or(0.0);
    if !(top > 0.0) {
        return Err(Error::DegenerateSpectrum(
            "leading eigenvalue is not positive".into(),
        ));
    }
    let floor = EIGEN_FLOOR * top;
    let mut out = kappa.to_vec();
    for (j, v) in out.iter_mut().enumerate() {
        if *v <= floor {
            if j < r_max {
                warnings.push(format!("eigenvalue {} clamped to floor {floor:e}", j + 1));
            }
            *v = floor;
        }
    }
    Ok((out, warnings))
}

fn check_select_args(kappa: &[f64], n: usize, r_max: usize) -> Result<()> {
    let m = kappa.len();
    if r_max == 0 || r_max >= m {
        return Err(Error::invalid(format!(
            "r_max must satisfy 1 <= r_max < m = {m}, got {r_max}"
        )));
    }
    if n < 2 {
        return Err(Error::invalid("n must be at least 2"));
    }
    Ok(())
}

fn argmin_of(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v < values[best] {
            best = i;
        }
    }
    best + 1
}

/// `argmin_r log|Sigma_r| + (log n / n) b_r` over `r = 1..=r_max`.
pub fn gic_select(kappa: &[f64], n: usize, r_max: usize) -> Result<GicCurve> {
    check_select_args(kappa, n, r_max)?;
    let (delta, warnings) = floored(kappa, r_max)?;
    let weight = (n as f64).ln() / n as f64;
    let mut log_det = Vec::with_capacity(r_max);
    let mut bias = Vec::with_capacity(r_max);
    let mut criterion = Vec::with_capacity(r_max);
    for r in 1..=r_max {
        let ld = log_det_spiked(&delta, r)?;
        let b = gic_bias(&delta, r)?;
        log_det.push(ld);
        bias.push(b);
        criterion.push(ld + weight * b);
    }
    Ok(GicCurve {
        criterion_name: "GIC".into(),
        ranks: (1..=r_max).collect(),
        argmin: argmin_of(&criterion),
        log_det,
        penalty_terms: bias,
        criterion,
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InfoCriterion {
    Aic,
    Bic,
}

/// Free parameters of a rank-`r` simple spiked model in `m` dimensions:
/// `r` spikes, one tail level and `sum_{j<=r} (m - j)` rotation parameters.
pub fn spiked_parameter_count(m: usize, r: usize) -> f64 {
    (r + 1) as f64 + (1..=r).map(|j| (m - j) as f64).sum::<f64>()
}

/// `argmin_r log|Sigma_r| + (penalty / n) k_r` with penalty 2 (AIC) or `log n` (BIC).
pub fn aic_bic_select(
    kappa: &[f64],
    n: usize,
    r_max: usize,
    mode: InfoCriterion,
) -> Result<GicCurve> {
    check_select_args(kappa, n, r_max)?;
    let (delta, warnings) = floored(kappa, r_max)?;
    let m = kappa.len();
    let penalty = match mode {
        InfoCriterion::Aic => 2.0,
        InfoCriterion::Bic => (n as f64).ln(),
    };
    let mut log_det = Vec::with_capacity(r_max);
    let mut counts = Vec::with_capacity(r_max);
    let mut criterion = Vec::with_capacity(r_max);
    for r in 1..=r_max {
        let ld = log_det_spiked(&delta, r)?;
        let k = spiked_parameter_count(m, r);
        log_det.push(ld);
        counts.push(k);
        criterion.push(ld + penalty / n as f64 * k);
    }
    Ok(GicCurve {
        criterion_name: match mode {
            InfoCriterion::Aic => "AIC".into(),
            InfoCriterion::Bic => "BIC".into(),
        },
        ranks: (1..=r_max).collect(),
        argmin: argmin_of(&criterion),
        log_det,
        penalty_terms: counts,
        criterion,
        warnings,
    })
}

/// PCA on `vec(X_i)` directly, the baseline that skips the MPCA stage.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorPca {
    pub mean: DMatrix<f64>,
    /// `pq x r`
    pub basis: DMatrix<f64>,
    pub values: Vec<f64>,
}

impl VectorPca {
    /// Leading `r` principal directions of the vectorized stack.
    pub fn fit(stack: &ImageStack, r: usize) -> Result<Self> {
        let (mean, centered) = center(stack)?;
        let eig = vectorized_top_eigen(&centered, r)?;
        Ok(Self {
            mean,
            basis: eig.vectors,
            values: eig.values,
        })
    }

    pub fn reconstruct(&self, stack: &ImageStack) -> Result<ImageStack> {
        let (p, q) = self.mean.shape();
        stack.check_dims(p, q)?;
        let bt = self.basis.transpose();
        let out = stack
            .samples()
            .iter()
            .map(|x| {
                let v = DVector::from_column_slice((x - &self.mean).as_slice());
                let proj = &self.basis * (&bt * v);
                &self.mean + DMatrix::from_column_slice(p, q, proj.as_slice())
            })
            .collect();
        ImageStack::new(out)
    }
}
