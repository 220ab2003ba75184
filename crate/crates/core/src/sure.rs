//! Stage 1 rank selection: noise variance, spectral degrees of freedom and the
//! SURE score over the `(p0, q0)` grid beneath the surrogate ranks `(p_u, q_u)`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Stage};
use crate::linalg::{
    center, mode_scatter_identity, sym_eigvals, vectorized_spectrum, ImageStack, Mode,
};
use crate::mpca::{fit_glram, GlramOptions, MpcaModel};

/// Fraction of the spectrum, counted from the small end, used for the noise level.
pub const TAIL_FRACTION: f64 = 7.0 / 8.0;

/// Largest `pq` for which the vectorized sample spectrum is used for `sigma^2`.
pub const VECTORIZED_SPECTRUM_LIMIT: usize = 4096;

const MP_GRID: usize = 4000;

/// Unit-variance Marchenko-Pastur law with aspect ratio `y` in `(0, 1]`.
#[derive(Debug, Clone, Copy)]
struct MarchenkoPastur {
    y: f64,
    lo: f64,
    hi: f64,
}

impl MarchenkoPastur {
    fn new(y: f64) -> Self {
        let s = y.sqrt();
        Self {
            y,
            lo: (1.0 - s).powi(2),
            hi: (1.0 + s).powi(2),
        }
    }

    /// Substituting `x = lo + (hi - lo)(1 - cos t)/2` removes the square-root
    /// endpoint singularities; returns `(x, density * dx/dt)` at `t`.
    fn integrand(&self, t: f64) -> (f64, f64) {
        let half = 0.5 * (self.hi - self.lo);
        let x = self.lo + half * (1.0 - t.cos());
        let s = t.sin();
        if x <= 0.0 {
            // y == 1 endpoint: the ratio sin^2(t)/x tends to 4/hi
            return (
                0.0,
                half * half * 4.0 / self.hi / (2.0 * std::f64::consts::PI * self.y),
            );
        }
        (
            x,
            half * half * s * s / (2.0 * std::f64::consts::PI * self.y * x),
        )
    }

    /// Mean of the lower `mass` quantile region: `E[x | x <= F^-1(mass)]`.
    fn lower_quantile_mean(&self, mass: f64) -> f64 {
        let h = std::f64::consts::PI / MP_GRID as f64;
        let mut cdf = vec![0.0; MP_GRID + 1];
        let mut first = vec![0.0; MP_GRID + 1];
        let mut prev = self.integrand(0.0);
        for k in 1..=MP_GRID {
            let cur = self.integrand(k as f64 * h);
            let mid = self.integrand((k as f64 - 0.5) * h);
            // Simpson on each panel
            cdf[k] = cdf[k - 1] + h / 6.0 * (prev.1 + 4.0 * mid.1 + cur.1);
            first[k] =
                first[k - 1] + h / 6.0 * (prev.0 * prev.1 + 4.0 * mid.0 * mid.1 + cur.0 * cur.1);
            prev = cur;
        }
        // normalize away quadrature error in the total mass
        let total = cdf[MP_GRID];
        let target = mass * total;
        let k = cdf.partition_point(|c| *c < target).clamp(1, MP_GRID);
        let frac = (target - cdf[k - 1]) / (cdf[k] - cdf[k - 1]).max(f64::MIN_POSITIVE);
        let partial_first = first[k - 1] + frac * (first[k] - first[k - 1]);
        partial_first / target
    }
}

/// Noise variance from the smallest `floor(7/8 * m)` eigenvalues of an
/// unbiased sample covariance, where `m = min(dim, dof)`.
///
/// The tail mean is divided by the mean of the matching lower-quantile region
/// of the Marchenko-Pastur law, which undoes the downward bias of a plain tail
/// average. When `dim > dof` only the `dof` nonzero eigenvalues are used; they
/// follow `sigma^2 * gamma * MP(1/gamma)`.
pub(crate) fn noise_variance_unbiased(eigvals: &[f64], dof: usize, dim: usize) -> Result<f64> {
    if dof == 0 || dim == 0 {
        return Err(Error::invalid("noise variance needs dof >= 1 and dim >= 1"));
    }
    let m = dim.min(dof).min(eigvals.len());
    let k = (TAIL_FRACTION * m as f64).floor() as usize;
    if k == 0 {
        return Err(Error::invalid(format!(
            "tail of a spectrum with {m} usable values is empty"
        )));
    }
    let mut usable: Vec<f64> = eigvals[..m].iter().map(|v| v.max(0.0)).collect();
    usable.sort_by(|a, b| b.total_cmp(a));
    let tail_mean = usable[m - k..].iter().sum::<f64>() / k as f64;

    let gamma = dim as f64 / dof as f64;
    let mass = k as f64 / m as f64;
    let expected = if gamma < 1e-12 {
        1.0
    } else if gamma <= 1.0 {
        MarchenkoPastur::new(gamma).lower_quantile_mean(mass)
    } else {
        gamma * MarchenkoPastur::new(1.0 / gamma).lower_quantile_mean(mass)
    };
    Ok(tail_mean / expected)
}

/// Estimates `sigma^2` from the non-increasing spectrum of a `1/n`-normalized
/// sample covariance of `n` centered samples in `dim` dimensions.
pub fn estimate_noise_variance(eigvals: &[f64], n: usize, dim: usize) -> Result<f64> {
    if n < 2 {
        return Err(Error::invalid("noise variance needs n >= 2"));
    }
    if eigvals
        .iter()
        .any(|v| !v.is_finite() || *v < -1e-10 * eigvals[0].abs())
    {
        return Err(Error::invalid(
            "eigenvalues must be finite and non-negative",
        ));
    }
    let scale = n as f64 / (n - 1) as f64;
    let unbiased: Vec<f64> = eigvals.iter().map(|v| v * scale).collect();
    noise_variance_unbiased(&unbiased, n - 1, dim)
}

/// Which sample spectrum feeds the noise-variance estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseEstimator {
    /// Average of the column- and row-mode estimates.
    #[default]
    Modes,
    /// Spectrum of the vectorized sample covariance.
    Vectorized,
    /// `Vectorized` when `pq <= VECTORIZED_SPECTRUM_LIMIT`, otherwise `Modes`.
    Auto,
}

impl std::str::FromStr for NoiseEstimator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "modes" => Ok(NoiseEstimator::Modes),
            "vectorized" => Ok(NoiseEstimator::Vectorized),
            "auto" => Ok(NoiseEstimator::Auto),
            other => Err(Error::invalid(format!("unknown noise estimator '{other}'"))),
        }
    }
}

/// Noise variance of an image stack.
///
/// The mode route treats each mode scatter with `P = I` as a Wishart matrix
/// over `(n-1) q`, resp. `(n-1) p`, pooled samples scaled by `q`, resp. `p`,
/// and averages the two estimates. Signal spread evenly over all pixels is
/// indistinguishable from noise on this route.
pub fn stack_noise_variance(stack: &ImageStack, estimator: NoiseEstimator) -> Result<f64> {
    let (p, q) = stack.dims();
    let n = stack.len();
    let (_, centered) = center(stack)?;
    let vectorized = match estimator {
        NoiseEstimator::Modes => false,
        NoiseEstimator::Vectorized => true,
        NoiseEstimator::Auto => p * q <= VECTORIZED_SPECTRUM_LIMIT,
    };
    if vectorized {
        let spec = vectorized_spectrum(&centered)?;
        return estimate_noise_variance(&spec, n, p * q);
    }
    let scale = n as f64 / (n - 1) as f64;
    let col: Vec<f64> = sym_eigvals(&mode_scatter_identity(&centered, Mode::Column))?
        .iter()
        .map(|v| v * scale / q as f64)
        .collect();
    let row: Vec<f64> = sym_eigvals(&mode_scatter_identity(&centered, Mode::Row))?
        .iter()
        .map(|v| v * scale / p as f64)
        .collect();
    let sc = noise_variance_unbiased(&col, (n - 1) * q, p)?;
    let sr = noise_variance_unbiased(&row, (n - 1) * p, q)?;
    Ok(0.5 * (sc + sr))
}

fn interaction_sum(values: &[f64], k: usize) -> Result<f64> {
    if k >= values.len() {
        return Ok(0.0);
    }
    let gap = values[k - 1] - values[k];
    if !(gap > TIE_SCALE * values[0].abs()) {
        return Err(Error::DegenerateSpectrum(format!(
            "eigenvalues {} and {} tie at the rank boundary",
            k,
            k + 1
        )));
    }
    let mut sum = 0.0;
    for i in 0..k {
        for l in k..values.len() {
            sum += (values[i] + values[l]) / (values[i] - values[l]);
        }
    }
    Ok(sum)
}

const TIE_SCALE: f64 = 1e-12;

/// Degrees of freedom of a rank-`(p0, q0)` MPCA fit:
/// `pq + (n-1) p0 q0 + sum_{i<=p0<l} (l_i + l_l)/(l_i - l_l) + (same over xi)`.
pub fn degrees_of_freedom(
    lambda: &[f64],
    xi: &[f64],
    p0: usize,
    q0: usize,
    n: usize,
) -> Result<f64> {
    let (p, q) = (lambda.len(), xi.len());
    if p0 == 0 || p0 > p || q0 == 0 || q0 > q {
        return Err(Error::invalid(format!(
            "ranks ({p0}, {q0}) out of range for ({p}, {q})"
        )));
    }
    if n == 0 {
        return Err(Error::invalid("n must be positive"));
    }
    let base = (p * q) as f64 + (n - 1) as f64 * (p0 * q0) as f64;
    Ok(base + interaction_sum(lambda, p0)? + interaction_sum(xi, q0)?)
}

/// `n^-1 sum ||X_i - mean - A U_i B^T||^2 + 2 n^-1 sigma^2 df - pq sigma^2`
/// for bases `a_sub`, `b_sub` (the leading columns of the oversized fit).
#[allow(clippy::too_many_arguments)]
pub fn sure_score(
    stack: &ImageStack,
    a_sub: &DMatrix<f64>,
    b_sub: &DMatrix<f64>,
    p0: usize,
    q0: usize,
    sigma2: f64,
    lambda: &[f64],
    xi: &[f64],
    n: usize,
) -> Result<f64> {
    let (p, q) = stack.dims();
    if a_sub.shape() != (p, p0) || b_sub.shape() != (q, q0) {
        return Err(Error::invalid(
            "basis shapes do not match (p, p0) / (q, q0)",
        ));
    }
    let df = degrees_of_freedom(lambda, xi, p0, q0, n)?;
    let (_, centered) = center(stack)?;
    let pa = a_sub * a_sub.transpose();
    let pb = b_sub * b_sub.transpose();
    let resid = centered
        .samples()
        .iter()
        .map(|x| (x - &pa * x * &pb).norm_squared())
        .sum::<f64>()
        / stack.len() as f64;
    Ok(sure_from_parts(resid, df, sigma2, n, p * q))
}

fn sure_from_parts(resid: f64, df: f64, sigma2: f64, n: usize, pq: usize) -> f64 {
    resid + 2.0 * sigma2 * df / n as f64 - pq as f64 * sigma2
}

/// Scores of every `(p0, q0)` cell beneath the surrogate ranks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SureGrid {
    pub p_u: usize,
    pub q_u: usize,
    pub sigma2: f64,
    /// `scores[p0-1][q0-1]`; `None` marks a cell skipped for a degenerate spectrum.
    pub scores: Vec<Vec<Option<f64>>>,
    pub argmin: (usize, usize),
}

impl SureGrid {
    pub fn score(&self, p0: usize, q0: usize) -> Option<f64> {
        self.scores.get(p0 - 1)?.get(q0 - 1).copied().flatten()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SureOptions {
    pub glram: GlramOptions,
    /// Known noise variance; estimated from the data when `None`.
    pub sigma2: Option<f64>,
    pub noise: NoiseEstimator,
}

/// Fits one GLRAM at `(p_u, q_u)`, scores every `(p0, q0) <= (p_u, q_u)` by
/// column truncation and returns the model truncated to the argmin together
/// with the full grid. Ties go to the smaller `p0 q0`, then the smaller `p0`.
pub fn select_mpca_rank(
    stack: &ImageStack,
    p_u: usize,
    q_u: usize,
    opts: SureOptions,
) -> Result<(MpcaModel, SureGrid)> {
    let (p, q) = stack.dims();
    if p_u == 0 || p_u > p || q_u == 0 || q_u > q {
        return Err(Error::invalid(format!(
            "surrogate ranks ({p_u}, {q_u}) out of range for {p}x{q}"
        )));
    }
    let n = stack.len();
    let mut model = fit_glram(stack, p_u, q_u, opts.glram).map_err(|e| e.at(Stage::Mpca))?;
    let sigma2 = match opts.sigma2 {
        Some(s) if s.is_finite() && s >= 0.0 => s,
        Some(s) => {
            return Err(Error::invalid(format!(
                "sigma2 must be finite and >= 0, got {s}"
            )))
        }
        None => stack_noise_variance(stack, opts.noise).map_err(|e| e.at(Stage::NoiseVariance))?,
    };

    // residual(p0, q0) = total - sum of squared core entries in the leading
    // p0 x q0 block, via a 2-D prefix sum of the oversized cores
    let (_, centered) = center(stack)?;
    let total = centered.mean_energy();
    let at = model.a.transpose();
    let mut energy = DMatrix::<f64>::zeros(p_u, q_u);
    for x in centered.samples() {
        let u = &at * x * &model.b;
        energy += u.component_mul(&u);
    }
    energy /= n as f64;
    let mut prefix = DMatrix::<f64>::zeros(p_u + 1, q_u + 1);
    for i in 0..p_u {
        for j in 0..q_u {
            prefix[(i + 1, j + 1)] =
                energy[(i, j)] + prefix[(i, j + 1)] + prefix[(i + 1, j)] - prefix[(i, j)];
        }
    }

    let mut scores = vec![vec![None; q_u]; p_u];
    let mut best: Option<(f64, usize, usize)> = None;
    for p0 in 1..=p_u {
        for q0 in 1..=q_u {
            let df = match degrees_of_freedom(&model.lambda, &model.xi, p0, q0, n) {
                Ok(df) => df,
                Err(Error::DegenerateSpectrum(_)) => continue,
                Err(e) => return Err(e.at(Stage::Sure)),
            };
            let resid = (total - prefix[(p0, q0)]).max(0.0);
            let s = sure_from_parts(resid, df, sigma2, n, p * q);
            scores[p0 - 1][q0 - 1] = Some(s);
            let better = match best {
                None => true,
                Some((bs, bp, bq)) => s < bs || (s == bs && (p0 * q0, p0) < (bp * bq, bp)),
            };
            if better {
                best = Some((s, p0, q0));
            }
        }
    }
    let (_, p_hat, q_hat) = best.ok_or_else(|| {
        Error::SelectionFailed("every (p0, q0) cell hit a degenerate spectrum".into())
            .at(Stage::Sure)
    })?;
    model.sigma2 = Some(sigma2);
    let truncated = model.truncate(p_hat, q_hat)?;
    Ok((
        truncated,
        SureGrid {
            p_u,
            q_u,
            sigma2,
            scores,
            argmin: (p_hat, q_hat),
        },
    ))
}

/// Smallest mode ranks whose leading `P = I` mode eigenvalues capture `fraction`
/// of the total variance in each mode.
pub fn variance_surrogate_ranks(stack: &ImageStack, fraction: f64) -> Result<(usize, usize)> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid("variance fraction must lie in (0, 1]"));
    }
    let (_, centered) = center(stack)?;
    let pick = |vals: Vec<f64>| {
        let total: f64 = vals.iter().map(|v| v.max(0.0)).sum();
        let mut acc = 0.0;
        for (i, v) in vals.iter().enumerate() {
            acc += v.max(0.0);
            if acc >= fraction * total {
                return i + 1;
            }
        }
        vals.len()
    };
    let col = sym_eigvals(&mode_scatter_identity(&centered, Mode::Column))?;
    let row = sym_eigvals(&mode_scatter_identity(&centered, Mode::Row))?;
    Ok((pick(col), pick(row)))
}
