//! Two-stage dimension reduction: MPCA with SURE-selected ranks, then PCA on
//! the vectorized cores with a GIC-selected rank.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Stage};
use crate::linalg::ImageStack;
use crate::mpca::{fit_glram, project, CoreStack, GlramOptions, MpcaModel};
use crate::pca_gic::{aic_bic_select, gic_select, pca_on_cores, GicCurve, InfoCriterion, PcaModel};
use crate::sure::{
    select_mpca_rank, stack_noise_variance, variance_surrogate_ranks, NoiseEstimator, SureGrid,
    SureOptions,
};

/// Core means above this multiple of the core scale trigger a warning.
const CORE_MEAN_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// Surrogate ranks; picked from `surrogate_fraction` of mode variance when unset.
    pub p_u: Option<usize>,
    pub q_u: Option<usize>,
    pub surrogate_fraction: f64,
    pub sigma2: Option<f64>,
    pub noise: NoiseEstimator,
    pub r_max: Option<usize>,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            p_u: None,
            q_u: None,
            surrogate_fraction: 0.35,
            sigma2: None,
            noise: NoiseEstimator::default(),
            r_max: None,
            max_iter: GlramOptions::default().max_iter,
            tol: GlramOptions::default().tol,
        }
    }
}

impl FitConfig {
    fn glram(&self) -> GlramOptions {
        GlramOptions {
            max_iter: self.max_iter,
            tol: self.tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hybrid2SdrModel {
    /// Stage-1 model truncated to the selected `(p0, q0)`.
    pub mpca: MpcaModel,
    /// Stage-2 model with its rank set.
    pub pca: PcaModel,
    pub sure: Option<SureGrid>,
    pub gic: Option<GicCurve>,
    pub warnings: Vec<String>,
}

impl Hybrid2SdrModel {
    /// `(p0, q0, r)`
    pub fn ranks(&self) -> (usize, usize, usize) {
        let (p0, q0) = self.mpca.ranks();
        (p0, q0, self.rank())
    }

    pub fn rank(&self) -> usize {
        self.pca.basis.ncols()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.mpca.dims()
    }

    pub fn sigma2(&self) -> Option<f64> {
        self.mpca.sigma2
    }

    /// Checks the cross-stage shape invariants, used after deserialization.
    pub fn validate(&self) -> Result<()> {
        let (p, q) = self.mpca.dims();
        let (p0, q0) = self.mpca.ranks();
        if self.mpca.a.nrows() != p || self.mpca.b.nrows() != q {
            return Err(Error::invalid("mode bases do not match the mean shape"));
        }
        if self.pca.basis.nrows() != p0 * q0 {
            return Err(Error::invalid("stage-2 basis rows must equal p0 q0"));
        }
        if self.rank() == 0 || self.rank() > p0 * q0 || self.pca.kappa.len() != p0 * q0 {
            return Err(Error::invalid("stage-2 rank out of range"));
        }
        Ok(())
    }
}

fn core_mean_warning(cores: &CoreStack) -> Option<String> {
    let (p0, q0) = cores.shape();
    let mean = cores
        .cores()
        .iter()
        .fold(DMatrix::zeros(p0, q0), |acc, u| acc + u)
        / cores.len() as f64;
    let scale = cores.mean_energy().sqrt().max(f64::MIN_POSITIVE);
    let dev = mean.norm();
    (dev > CORE_MEAN_TOL * scale).then(|| format!("stage-2 cores have mean norm {dev:e}"))
}

fn default_r_max(m: usize, n: usize) -> usize {
    (m - 1).min(n - 1)
}

/// Runs both stages: SURE over the `(p_u, q_u)` grid, projection, PCA on the
/// cores and GIC rank choice. A `1 x 1` core has rank 1 without a GIC search.
pub fn fit_2sdr(stack: &ImageStack, config: &FitConfig) -> Result<Hybrid2SdrModel> {
    let (p, q) = stack.dims();
    let n = stack.len();
    if n < 2 {
        return Err(Error::invalid("fitting needs at least two samples"));
    }
    let (p_u, q_u) = match (config.p_u, config.q_u) {
        (Some(a), Some(b)) => (a, b),
        (a, b) => {
            let (sp, sq) = variance_surrogate_ranks(stack, config.surrogate_fraction)?;
            (a.unwrap_or(sp), b.unwrap_or(sq))
        }
    };
    if p_u == 0 || p_u > p || q_u == 0 || q_u > q {
        return Err(Error::invalid(format!(
            "surrogate ranks ({p_u}, {q_u}) out of range for {p}x{q}"
        )));
    }
    let opts = SureOptions {
        glram: config.glram(),
        sigma2: config.sigma2,
        noise: config.noise,
    };
    let (mpca, grid) = select_mpca_rank(stack, p_u, q_u, opts)?;
    let mut model = finish_stage_two(stack, mpca, config.r_max, None)?;
    model.sure = Some(grid);
    Ok(model)
}

/// Both stages at caller-fixed ranks `(p0, q0, r)` with no selection.
pub fn fit_2sdr_fixed(
    stack: &ImageStack,
    p0: usize,
    q0: usize,
    r: usize,
    config: &FitConfig,
) -> Result<Hybrid2SdrModel> {
    let mut mpca = fit_glram(stack, p0, q0, config.glram()).map_err(|e| e.at(Stage::Mpca))?;
    mpca.sigma2 = match config.sigma2 {
        Some(s) => Some(s),
        None => Some(
            stack_noise_variance(stack, config.noise).map_err(|e| e.at(Stage::NoiseVariance))?,
        ),
    };
    finish_stage_two(stack, mpca, None, Some(r))
}

fn finish_stage_two(
    stack: &ImageStack,
    mpca: MpcaModel,
    r_max: Option<usize>,
    fixed_r: Option<usize>,
) -> Result<Hybrid2SdrModel> {
    let n = stack.len();
    let cores = project(&mpca, stack).map_err(|e| e.at(Stage::Pca))?;
    let mut warnings = mpca.warnings.clone();
    warnings.extend(core_mean_warning(&cores));
    let full = pca_on_cores(&cores).map_err(|e| e.at(Stage::Pca))?;
    let m = full.dim();
    let (r, gic) = match fixed_r {
        Some(r) => (r, None),
        None if m == 1 => (1, None),
        None => {
            let r_max = r_max.unwrap_or_else(|| default_r_max(m, n));
            let curve = gic_select(&full.kappa, n, r_max).map_err(|e| e.at(Stage::Gic))?;
            warnings.extend(curve.warnings.iter().cloned());
            (curve.argmin, Some(curve))
        }
    };
    let pca = full.with_rank(r).map_err(|e| e.at(Stage::Pca))?;
    Ok(Hybrid2SdrModel {
        mpca,
        pca,
        sure: None,
        gic,
        warnings,
    })
}

fn check_model_dims(model: &Hybrid2SdrModel, stack: &ImageStack) -> Result<()> {
    let (p, q) = model.dims();
    stack.check_dims(p, q)
}

/// `n x r` matrix with row `i` equal to `G^T vec(U_i)`.
pub fn scores(model: &Hybrid2SdrModel, stack: &ImageStack) -> Result<DMatrix<f64>> {
    check_model_dims(model, stack)?;
    let at = model.mpca.a.transpose();
    let gt = model.pca.basis.transpose();
    let rows: Vec<DVector<f64>> = stack
        .samples()
        .par_iter()
        .map(|x| {
            let u = &at * (x - &model.mpca.mean) * &model.mpca.b;
            &gt * DVector::from_column_slice(u.as_slice())
        })
        .collect();
    let mut out = DMatrix::zeros(stack.len(), model.rank());
    for (i, row) in rows.iter().enumerate() {
        out.set_row(i, &row.transpose());
    }
    Ok(out)
}

/// `X_i = mean + A fold(G G^T vec(U_i)) B^T`.
pub fn denoise(model: &Hybrid2SdrModel, stack: &ImageStack) -> Result<ImageStack> {
    check_model_dims(model, stack)?;
    let (p0, q0) = model.mpca.ranks();
    let at = model.mpca.a.transpose();
    let bt = model.mpca.b.transpose();
    let g = &model.pca.basis;
    let gt = g.transpose();
    let out = stack
        .samples()
        .par_iter()
        .map(|x| {
            let u = &at * (x - &model.mpca.mean) * &model.mpca.b;
            let v = g * (&gt * DVector::from_column_slice(u.as_slice()));
            let core = DMatrix::from_column_slice(p0, q0, v.as_slice());
            &model.mpca.mean + &model.mpca.a * core * &bt
        })
        .collect();
    ImageStack::new(out)
}

/// Every criterion value behind a fitted model's ranks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankSelectionReport {
    pub ranks: (usize, usize, usize),
    pub sigma2: Option<f64>,
    pub sure: Option<SureGrid>,
    pub gic: Option<GicCurve>,
    /// AIC and BIC over the same ranks as GIC, for comparison only.
    pub aic: Option<GicCurve>,
    pub bic: Option<GicCurve>,
}

/// Collects the SURE grid and GIC curve of `model` and adds AIC/BIC curves on
/// the same stage-2 spectrum. `n` is the sample count the model was fitted on.
pub fn rank_selection_report(model: &Hybrid2SdrModel, n: usize) -> Result<RankSelectionReport> {
    let (aic, bic) = match &model.gic {
        Some(g) => {
            let r_max = g.ranks.last().copied().unwrap_or(1);
            let kappa = &model.pca.kappa;
            (
                Some(aic_bic_select(kappa, n, r_max, InfoCriterion::Aic)?),
                Some(aic_bic_select(kappa, n, r_max, InfoCriterion::Bic)?),
            )
        }
        None => (None, None),
    };
    Ok(RankSelectionReport {
        ranks: model.ranks(),
        sigma2: model.sigma2(),
        sure: model.sure.clone(),
        gic: model.gic.clone(),
        aic,
        bic,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::center;
    use crate::mpca::reconstruct;
    use crate::synth::{
        gen_hmpca_data, random_orthonormal, rng_from_seed, HmpcaSynthSpec, NoiseFamily,
    };
    use rand::Rng;

    fn small_hmpca(n: usize, seed: u64) -> crate::synth::HmpcaSynthData {
        let mut spec = HmpcaSynthSpec::standard(0.3, n, NoiseFamily::Gaussian, seed);
        spec.p = 16;
        spec.q = 14;
        spec.p0_star = 4;
        spec.q0_star = 3;
        spec.r_star = 3;
        spec.kappa = vec![60.0, 40.0, 25.0];
        spec.c = 0.301;
        gen_hmpca_data(&spec).unwrap()
    }

    #[test]
    fn noiseless_rank_one() {
        let mut rng = rng_from_seed(4);
        let u = random_orthonormal(9, 1, &mut rng);
        let v = random_orthonormal(7, 1, &mut rng);
        let m = DMatrix::from_fn(9, 7, |i, j| (i + j) as f64);
        let samples = (0..40)
            .map(|_| &m + &u * v.transpose() * rng.random_range(-3.0..3.0))
            .collect();
        let stack = ImageStack::new(samples).unwrap();
        let cfg = FitConfig {
            p_u: Some(3),
            q_u: Some(3),
            sigma2: Some(0.0),
            ..Default::default()
        };
        let model = fit_2sdr(&stack, &cfg).unwrap();
        assert_eq!(model.ranks(), (1, 1, 1));
        let rec = denoise(&model, &stack).unwrap();
        for (a, b) in rec.samples().iter().zip(stack.samples()) {
            assert!((a - b).amax() < 1e-9);
        }
    }

    #[test]
    fn recovers_small_hybrid_ranks() {
        let data = small_hmpca(400, 2);
        let cfg = FitConfig {
            p_u: Some(8),
            q_u: Some(8),
            ..Default::default()
        };
        let model = fit_2sdr(&data.stack, &cfg).unwrap();
        assert_eq!(model.ranks(), (4, 3, 3));
        model.validate().unwrap();
        assert!(model.gic.is_some() && model.sure.is_some());
    }

    #[test]
    fn full_rank_stage_two_matches_mpca() {
        let data = small_hmpca(60, 3);
        let model = fit_2sdr_fixed(&data.stack, 4, 3, 12, &FitConfig::default()).unwrap();
        let via_mpca =
            reconstruct(&model.mpca, &project(&model.mpca, &data.stack).unwrap()).unwrap();
        let via_2sdr = denoise(&model, &data.stack).unwrap();
        for (a, b) in via_mpca.samples().iter().zip(via_2sdr.samples()) {
            assert!((a - b).amax() < 1e-9);
        }
    }

    #[test]
    fn denoise_idempotent_and_scores_spectrum() {
        let data = small_hmpca(120, 5);
        let cfg = FitConfig {
            p_u: Some(6),
            q_u: Some(6),
            ..Default::default()
        };
        let model = fit_2sdr(&data.stack, &cfg).unwrap();
        let once = denoise(&model, &data.stack).unwrap();
        let twice = denoise(&model, &once).unwrap();
        for (a, b) in once.samples().iter().zip(twice.samples()) {
            assert!((a - b).amax() < 1e-9);
        }
        let s = scores(&model, &data.stack).unwrap();
        let gram = s.transpose() * &s / data.stack.len() as f64;
        let vals = crate::linalg::sym_eigvals(&gram).unwrap();
        for (v, k) in vals.iter().zip(&model.pca.kappa) {
            assert!((v - k).abs() < 1e-8 * k.abs().max(1.0));
        }
    }

    #[test]
    fn pythagoras_chain() {
        let data = small_hmpca(80, 6);
        let model = fit_2sdr_fixed(&data.stack, 4, 3, 2, &FitConfig::default()).unwrap();
        let (_, centered) = center(&data.stack).unwrap();
        let total = centered.mean_energy();
        let cores = project(&model.mpca, &data.stack).unwrap();
        let s = scores(&model, &data.stack).unwrap();
        let last = s.norm_squared() / data.stack.len() as f64;
        assert!(total + 1e-9 >= cores.mean_energy());
        assert!(cores.mean_energy() + 1e-9 >= last);
    }

    #[test]
    fn scores_reproduce_latent_gram() {
        let mut spec = HmpcaSynthSpec::standard(0.0, 30, NoiseFamily::Gaussian, 8);
        spec.p = 10;
        spec.q = 9;
        spec.p0_star = 3;
        spec.q0_star = 3;
        spec.r_star = 2;
        spec.kappa = vec![9.0, 4.0];
        spec.c = 0.0;
        let data = gen_hmpca_data(&spec).unwrap();
        let model = fit_2sdr_fixed(
            &data.stack,
            3,
            3,
            2,
            &FitConfig {
                sigma2: Some(0.0),
                ..Default::default()
            },
        )
        .unwrap();
        let s = scores(&model, &data.stack).unwrap();
        let nu = DMatrix::from_fn(30, 2, |i, j| {
            let u = &data.cores.cores()[i];
            (data.g.column(j).transpose() * DVector::from_column_slice(u.as_slice()))[0]
        });
        let nu_c = {
            let mean = nu.row_mean();
            DMatrix::from_fn(30, 2, |i, j| nu[(i, j)] - mean[j])
        };
        let g1 = &s * s.transpose();
        let g2 = &nu_c * nu_c.transpose();
        assert!((g1 - g2).norm() < 1e-8 * (1.0 + s.norm_squared()));
    }

    #[test]
    fn zero_variance_stack_is_degenerate_and_dims_checked() {
        let stack = ImageStack::new(vec![DMatrix::from_element(4, 4, 2.0); 5]).unwrap();
        let cfg = FitConfig {
            p_u: Some(2),
            q_u: Some(2),
            sigma2: Some(0.0),
            ..Default::default()
        };
        let err = fit_2sdr(&stack, &cfg).unwrap_err();
        assert!(matches!(err.root(), Error::DegenerateData(_)));

        let data = small_hmpca(40, 9);
        let model = fit_2sdr_fixed(&data.stack, 2, 2, 1, &FitConfig::default()).unwrap();
        let wrong = ImageStack::new(vec![DMatrix::zeros(3, 3)]).unwrap();
        assert!(denoise(&model, &wrong).is_err());
        assert!(scores(&model, &wrong).is_err());
        let mean_stack = ImageStack::new(vec![model.mpca.mean.clone(); 3]).unwrap();
        let out = denoise(&model, &mean_stack).unwrap();
        assert!((out.sample(0) - &model.mpca.mean).amax() < 1e-12);
        assert!(scores(&model, &mean_stack).unwrap().amax() < 1e-12);
    }
}
