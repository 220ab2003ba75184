//! Replication experiments: reconstruction error of PCA, MPCA and 2SDR on the
//! two simulation designs, and rank-selection accuracy of GIC, AIC and BIC.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::eval::{mse, replicate, ReplicateTable, ReplicateValues};
use crate::linalg::ImageStack;
use crate::mpca::{fit_glram, project, reconstruct, GlramOptions};
use crate::pca_gic::{aic_bic_select, gic_select, pca_on_cores, InfoCriterion, VectorPca};
use crate::pipeline::{denoise, fit_2sdr, fit_2sdr_fixed, FitConfig};
use crate::sure::{select_mpca_rank, SureOptions};
use crate::synth::{gen_hmpca_data, gen_pca_data, HmpcaSynthSpec, NoiseFamily, PcaSynthSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "lowercase")]
pub enum Table1Setting {
    /// Vectorized spiked PCA data on `40 x 40` images.
    Pca { c: f64, n: usize },
    /// Hybrid MPCA data on `50 x 50` images.
    Hmpca {
        sigma2: f64,
        n: usize,
        noise: NoiseFamily,
    },
}

impl Table1Setting {
    pub fn label(&self) -> String {
        match self {
            Table1Setting::Pca { c, n } => format!("pca c={c} n={n}"),
            Table1Setting::Hmpca { sigma2, n, noise } => {
                format!("hmpca sigma2={sigma2} n={n} noise={noise:?}")
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Table1Options {
    /// Surrogate ranks for the SURE grid.
    pub p_u: usize,
    pub q_u: usize,
    /// Working ranks `(p0, q0, r)` for MPCA and 2SDR on PCA-model data.
    pub nominal: (usize, usize, usize),
}

impl Default for Table1Options {
    fn default() -> Self {
        Self {
            p_u: 16,
            q_u: 16,
            nominal: (10, 10, 25),
        }
    }
}

/// Per-replicate result of a reconstruction experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Table1Outcome {
    pub mse_pca: f64,
    pub mse_mpca: f64,
    pub mse_2sdr: f64,
    /// Ranks chosen by SURE on the replicate.
    pub sure_ranks: (usize, usize),
    /// Stage-2 rank used by 2SDR.
    pub r_2sdr: usize,
}

impl Table1Outcome {
    pub fn values(&self) -> ReplicateValues {
        vec![
            ("PCA".into(), self.mse_pca),
            ("MPCA".into(), self.mse_mpca),
            ("2SDR".into(), self.mse_2sdr),
            ("p0_hat".into(), self.sure_ranks.0 as f64),
            ("q0_hat".into(), self.sure_ranks.1 as f64),
            ("r_hat".into(), self.r_2sdr as f64),
        ]
    }
}

fn vector_pca_mse(stack: &ImageStack, truth: &ImageStack, r: usize) -> Result<f64> {
    let pca = VectorPca::fit(stack, r)?;
    mse(&pca.reconstruct(stack)?, truth)
}

/// One replicate. The PCA baseline fits the generating rank; on PCA-model data
/// MPCA and 2SDR run at the nominal working ranks while SURE is still recorded.
pub fn table1_replicate(
    setting: Table1Setting,
    seed: u64,
    opts: &Table1Options,
) -> Result<Table1Outcome> {
    match setting {
        Table1Setting::Hmpca { sigma2, n, noise } => {
            let spec = HmpcaSynthSpec::standard(sigma2, n, noise, seed);
            let data = gen_hmpca_data(&spec)?;
            let config = FitConfig {
                p_u: Some(opts.p_u),
                q_u: Some(opts.q_u),
                ..Default::default()
            };
            let model = fit_2sdr(&data.stack, &config)?;
            let mpca_rec = reconstruct(&model.mpca, &project(&model.mpca, &data.stack)?)?;
            Ok(Table1Outcome {
                mse_pca: vector_pca_mse(&data.stack, &data.truth, spec.r_star)?,
                mse_mpca: mse(&mpca_rec, &data.truth)?,
                mse_2sdr: mse(&denoise(&model, &data.stack)?, &data.truth)?,
                sure_ranks: model.mpca.ranks(),
                r_2sdr: model.rank(),
            })
        }
        Table1Setting::Pca { c, n } => {
            let spec = PcaSynthSpec::standard(c, n, seed);
            let data = gen_pca_data(&spec)?;
            let (sure_model, _) =
                select_mpca_rank(&data.stack, opts.p_u, opts.q_u, SureOptions::default())?;
            let (p0, q0, r) = opts.nominal;
            let model = fit_2sdr_fixed(&data.stack, p0, q0, r, &FitConfig::default())?;
            let mpca_rec = reconstruct(&model.mpca, &project(&model.mpca, &data.stack)?)?;
            Ok(Table1Outcome {
                mse_pca: vector_pca_mse(&data.stack, &data.truth, spec.r_star)?,
                mse_mpca: mse(&mpca_rec, &data.truth)?,
                mse_2sdr: mse(&denoise(&model, &data.stack)?, &data.truth)?,
                sure_ranks: sure_model.ranks(),
                r_2sdr: r,
            })
        }
    }
}

pub fn table1(
    setting: Table1Setting,
    reps: usize,
    seed: u64,
    opts: &Table1Options,
) -> Result<ReplicateTable> {
    replicate(&setting.label(), seed, reps, |s| {
        table1_replicate(setting, s, opts).map(|o| o.values())
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Table2Setting {
    pub sigma2: f64,
    pub n: usize,
    pub noise: NoiseFamily,
}

/// Per-replicate result of a rank-selection experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Table2Outcome {
    pub sure_ranks: (usize, usize),
    pub r_gic: usize,
    pub r_aic: usize,
    pub r_bic: usize,
}

impl Table2Outcome {
    pub fn values(&self, spec: &HmpcaSynthSpec) -> ReplicateValues {
        let hit = |b: bool| if b { 1.0 } else { 0.0 };
        vec![
            (
                "SURE".into(),
                hit(self.sure_ranks == (spec.p0_star, spec.q0_star)),
            ),
            ("GIC".into(), hit(self.r_gic == spec.r_star)),
            ("AIC".into(), hit(self.r_aic == spec.r_star)),
            ("BIC".into(), hit(self.r_bic == spec.r_star)),
        ]
    }
}

/// One replicate: SURE over the `(p_u, q_u)` grid, then with the true core
/// ranks known, GIC, AIC and BIC on the stage-2 spectrum.
pub fn table2_replicate(
    setting: Table2Setting,
    seed: u64,
    p_u: usize,
    q_u: usize,
) -> Result<(HmpcaSynthSpec, Table2Outcome)> {
    let spec = HmpcaSynthSpec::standard(setting.sigma2, setting.n, setting.noise, seed);
    let data = gen_hmpca_data(&spec)?;
    let (sure_model, _) = select_mpca_rank(&data.stack, p_u, q_u, SureOptions::default())?;
    let model = fit_glram(
        &data.stack,
        spec.p0_star,
        spec.q0_star,
        GlramOptions::default(),
    )?;
    let cores = project(&model, &data.stack)?;
    let kappa = pca_on_cores(&cores)?.kappa;
    let m = kappa.len();
    let r_max = (m - 1).min(setting.n - 1);
    let outcome = Table2Outcome {
        sure_ranks: sure_model.ranks(),
        r_gic: gic_select(&kappa, setting.n, r_max)?.argmin,
        r_aic: aic_bic_select(&kappa, setting.n, r_max, InfoCriterion::Aic)?.argmin,
        r_bic: aic_bic_select(&kappa, setting.n, r_max, InfoCriterion::Bic)?.argmin,
    };
    Ok((spec, outcome))
}

pub fn table2(
    setting: Table2Setting,
    reps: usize,
    seed: u64,
    p_u: usize,
    q_u: usize,
) -> Result<ReplicateTable> {
    let label = format!(
        "{:?} sigma2={} n={}",
        setting.noise, setting.sigma2, setting.n
    );
    replicate(&label, seed, reps, |s| {
        table2_replicate(setting, s, p_u, q_u).map(|(spec, o)| o.values(&spec))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_are_distinct() {
        let a = Table1Setting::Pca { c: 4.0, n: 10 }.label();
        let b = Table1Setting::Hmpca {
            sigma2: 4.0,
            n: 10,
            noise: NoiseFamily::Gaussian,
        }
        .label();
        assert_ne!(a, b);
    }

    #[test]
    fn small_table1_runs() {
        let setting = Table1Setting::Hmpca {
            sigma2: 1.1,
            n: 60,
            noise: NoiseFamily::Gaussian,
        };
        let t = table1(setting, 2, 1, &Table1Options::default()).unwrap();
        assert!(t.failures.is_empty());
        for m in ["PCA", "MPCA", "2SDR"] {
            let s = t.summary(m).unwrap();
            assert!(s.mean > 0.0 && s.mean.is_finite());
        }
    }
}
