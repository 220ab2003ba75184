//! Seeded generators for the PCA and hybrid MPCA simulation designs and for
//! a multi-class projection-template stack.
//!
//! Every generator draws from `ChaCha20Rng`; a spec plus seed fully determines
//! the output bytes on every platform.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::ImageStack;
use crate::mpca::CoreStack;

/// Name of the generator algorithm, recorded in manifests.
pub const RNG_ALGORITHM: &str = "ChaCha20Rng (rand_chacha 0.9)";

pub fn rng_from_seed(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// Seed for replicate `index` of an experiment with base seed `seed`, taken
/// from stream `index` of the base generator.
pub fn replicate_seed(seed: u64, index: u64) -> u64 {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_add(1));
    rng.random()
}

fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Uniformly distributed `p x k` orthonormal frame: QR of a Gaussian matrix
/// with column signs fixed so that `R` has a positive diagonal.
pub fn random_orthonormal<R: Rng + ?Sized>(p: usize, k: usize, rng: &mut R) -> DMatrix<f64> {
    assert!(k <= p && k > 0, "random_orthonormal needs 0 < k <= p");
    let g = gaussian_matrix(p, k, rng);
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..k {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseFamily {
    Gaussian,
    T5,
}

impl std::str::FromStr for NoiseFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" | "normal" => Ok(NoiseFamily::Gaussian),
            "t5" => Ok(NoiseFamily::T5),
            other => Err(Error::invalid(format!("unknown noise family '{other}'"))),
        }
    }
}

/// One draw of a `dim`-vector with identity covariance from the given family.
/// The t family shares one chi-square scale across all coordinates.
fn noise_vector<R: Rng + ?Sized>(family: NoiseFamily, dim: usize, rng: &mut R) -> Vec<f64> {
    let mut z: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    if let NoiseFamily::T5 = family {
        let dof: f64 = 5.0;
        let w = ChiSquared::new(dof).expect("valid dof").sample(rng);
        let scale = ((dof - 2.0) / w).sqrt();
        z.iter_mut().for_each(|v| *v *= scale);
    }
    z
}

/// `n x dim` multivariate t sample with `dof` degrees of freedom, rescaled to unit marginal variance.
pub fn gen_multivariate_t(dim: usize, dof: f64, n: usize, seed: u64) -> Result<DMatrix<f64>> {
    if !(dof > 2.0) {
        return Err(Error::invalid(format!(
            "multivariate t needs dof > 2, got {dof}"
        )));
    }
    let chi = ChiSquared::new(dof).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = rng_from_seed(seed);
    let mut out = DMatrix::zeros(n, dim);
    for i in 0..n {
        let scale = ((dof - 2.0) / chi.sample(&mut rng)).sqrt();
        for j in 0..dim {
            let z: f64 = rng.sample(StandardNormal);
            out[(i, j)] = z * scale;
        }
    }
    Ok(out)
}

fn check_spikes(name: &str, spikes: &[f64], count: usize) -> Result<()> {
    if spikes.len() != count {
        return Err(Error::invalid(format!(
            "{name} has {} entries, expected {count}",
            spikes.len()
        )));
    }
    if spikes.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::invalid(format!("{name} must be strictly positive")));
    }
    if spikes.windows(2).any(|w| w[1] > w[0]) {
        return Err(Error::invalid(format!("{name} must be non-increasing")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaSynthSpec {
    pub p: usize,
    pub q: usize,
    pub r_star: usize,
    pub delta: Vec<f64>,
    pub c: f64,
    pub n: usize,
    pub seed: u64,
}

impl PcaSynthSpec {
    /// The `40 x 40`, rank-25 design with `delta_i = 10 (26 - i)`.
    pub fn standard(c: f64, n: usize, seed: u64) -> Self {
        Self {
            p: 40,
            q: 40,
            r_star: 25,
            delta: (1..=25).map(|i| 10.0 * (26 - i) as f64).collect(),
            c,
            n,
            seed,
        }
    }

    pub fn snr(&self) -> f64 {
        self.delta.iter().sum::<f64>() / ((self.p * self.q) as f64 * self.c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.q == 0 || self.n == 0 {
            return Err(Error::invalid("p, q and n must be positive"));
        }
        if self.r_star == 0 || self.r_star > self.p * self.q {
            return Err(Error::invalid("r_star must lie in 1..=pq"));
        }
        check_spikes("delta", &self.delta, self.r_star)?;
        if !(self.c.is_finite() && self.c >= 0.0) {
            return Err(Error::invalid("c must be a non-negative number"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PcaSynthData {
    pub stack: ImageStack,
    /// Noiseless `fold(Gamma nu_i)`.
    pub truth: ImageStack,
    /// `pq x r*` frame
    pub gamma: DMatrix<f64>,
    /// `n x r*` latent scores
    pub nu: DMatrix<f64>,
}

fn fold(v: &DVector<f64>, p: usize, q: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(p, q, v.as_slice())
}

pub fn gen_pca_data(spec: &PcaSynthSpec) -> Result<PcaSynthData> {
    spec.validate()?;
    let (p, q, r) = (spec.p, spec.q, spec.r_star);
    let mut rng = rng_from_seed(spec.seed);
    let gamma = random_orthonormal(p * q, r, &mut rng);
    let sd: Vec<f64> = spec.delta.iter().map(|d| d.sqrt()).collect();
    let noise_sd = spec.c.sqrt();
    let mut nu = DMatrix::zeros(spec.n, r);
    let mut truth = Vec::with_capacity(spec.n);
    let mut obs = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        for j in 0..r {
            let z: f64 = rng.sample(StandardNormal);
            nu[(i, j)] = z * sd[j];
        }
        let signal = &gamma * nu.row(i).transpose();
        let mut x = signal.clone();
        for v in x.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += noise_sd * z;
        }
        truth.push(fold(&signal, p, q));
        obs.push(fold(&x, p, q));
    }
    Ok(PcaSynthData {
        stack: ImageStack::new(obs)?,
        truth: ImageStack::new(truth)?,
        gamma,
        nu,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmpcaSynthSpec {
    pub p: usize,
    pub q: usize,
    pub p0_star: usize,
    pub q0_star: usize,
    pub r_star: usize,
    /// Population eigenvalues of `vec(U)`; the latent spikes have variance `kappa_i - c`.
    pub kappa: Vec<f64>,
    pub c: f64,
    pub sigma2: f64,
    pub n: usize,
    pub noise_family: NoiseFamily,
    pub seed: u64,
    /// Reject specs with `c <= sigma2`.
    #[serde(default)]
    pub require_c_above_sigma2: bool,
}

impl HmpcaSynthSpec {
    /// `50 x 50` images, `8 x 8` cores, 8 spikes `kappa_i = 40 (9 - i)`, `c = 1.001 sigma2`.
    pub fn standard(sigma2: f64, n: usize, noise_family: NoiseFamily, seed: u64) -> Self {
        Self {
            p: 50,
            q: 50,
            p0_star: 8,
            q0_star: 8,
            r_star: 8,
            kappa: (1..=8).map(|i| 40.0 * (9 - i) as f64).collect(),
            c: 1.001 * sigma2,
            sigma2,
            n,
            noise_family,
            seed,
            require_c_above_sigma2: false,
        }
    }

    pub fn snr(&self) -> f64 {
        let signal: f64 = self.kappa.iter().map(|k| k - self.c).sum();
        signal
            / ((self.p * self.q) as f64 * self.sigma2
                + (self.p0_star * self.q0_star) as f64 * self.c)
    }

    /// Population eigenvalues of `Cov(vec X)`: spikes `kappa_i + sigma2`, a plateau `c + sigma2`, then `sigma2`.
    pub fn population_spectrum(&self) -> Vec<f64> {
        let m0 = self.p0_star * self.q0_star;
        let mut out: Vec<f64> = self.kappa.iter().map(|k| k + self.sigma2).collect();
        out.extend(std::iter::repeat_n(self.c + self.sigma2, m0 - self.r_star));
        out.extend(std::iter::repeat_n(self.sigma2, self.p * self.q - m0));
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.q == 0 || self.n == 0 {
            return Err(Error::invalid("p, q and n must be positive"));
        }
        if self.p0_star == 0 || self.p0_star > self.p || self.q0_star == 0 || self.q0_star > self.q
        {
            return Err(Error::invalid(
                "core ranks must satisfy 1 <= p0* <= p and 1 <= q0* <= q",
            ));
        }
        if self.r_star == 0 || self.r_star > self.p0_star * self.q0_star {
            return Err(Error::invalid("r_star must lie in 1..=p0* q0*"));
        }
        check_spikes("kappa", &self.kappa, self.r_star)?;
        if !(self.c.is_finite() && self.c >= 0.0 && self.sigma2.is_finite() && self.sigma2 >= 0.0) {
            return Err(Error::invalid("c and sigma2 must be non-negative numbers"));
        }
        if self.kappa.iter().any(|k| *k < self.c) {
            return Err(Error::invalid("every kappa_i must be at least c"));
        }
        if self.require_c_above_sigma2 && self.c <= self.sigma2 {
            return Err(Error::invalid("c must exceed sigma2"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct HmpcaSynthData {
    pub stack: ImageStack,
    /// Signal part `M + A fold(G nu_i) B^T`, the reconstruction target.
    pub truth: ImageStack,
    /// `M + A U_i B^T`, which still carries the core noise.
    pub z: ImageStack,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// `p0* q0* x r*` frame
    pub g: DMatrix<f64>,
    pub cores: CoreStack,
}

pub fn gen_hmpca_data(spec: &HmpcaSynthSpec) -> Result<HmpcaSynthData> {
    spec.validate()?;
    let (p, q, p0, q0, r) = (spec.p, spec.q, spec.p0_star, spec.q0_star, spec.r_star);
    let m0 = p0 * q0;
    let mut rng = rng_from_seed(spec.seed);
    let a = random_orthonormal(p, p0, &mut rng);
    let b = random_orthonormal(q, q0, &mut rng);
    let g = random_orthonormal(m0, r, &mut rng);
    let bt = b.transpose();
    let spike_sd: Vec<f64> = spec.kappa.iter().map(|k| (k - spec.c).sqrt()).collect();
    let (c_sd, e_sd) = (spec.c.sqrt(), spec.sigma2.sqrt());

    let mut obs = Vec::with_capacity(spec.n);
    let mut truth = Vec::with_capacity(spec.n);
    let mut z_all = Vec::with_capacity(spec.n);
    let mut cores = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let nu = DVector::from_fn(r, |j, _| {
            let z: f64 = rng.sample(StandardNormal);
            z * spike_sd[j]
        });
        let signal_core = fold(&(&g * nu), p0, q0);
        let eps = noise_vector(spec.noise_family, m0, &mut rng);
        let core = &signal_core + DMatrix::from_column_slice(p0, q0, &eps) * c_sd;
        let t = &a * &signal_core * &bt;
        let z = &a * &core * &bt;
        let err = noise_vector(spec.noise_family, p * q, &mut rng);
        let x = &z + DMatrix::from_column_slice(p, q, &err) * e_sd;
        truth.push(t);
        z_all.push(z);
        obs.push(x);
        cores.push(core);
    }
    Ok(HmpcaSynthData {
        stack: ImageStack::new(obs)?,
        truth: ImageStack::new(truth)?,
        z: ImageStack::new(z_all)?,
        a,
        b,
        g,
        cores: CoreStack::new(cores)?,
    })
}

/// Projection-style class templates. Each class is its own random 3-D cloud of
/// `atoms` weighted points, rotated at random and rendered as a sum of Gaussian blobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateSynthSpec {
    pub size: usize,
    pub classes: usize,
    pub per_class: usize,
    pub atoms: usize,
    /// Blob width in pixels.
    pub blob_sigma: f64,
    pub snr: f64,
    pub seed: u64,
}

impl Default for TemplateSynthSpec {
    fn default() -> Self {
        Self {
            size: 64,
            classes: 50,
            per_class: 20,
            atoms: 12,
            blob_sigma: 3.0,
            snr: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TemplateSynthData {
    pub stack: ImageStack,
    pub truth: ImageStack,
    pub templates: Vec<DMatrix<f64>>,
    pub labels: Vec<usize>,
    pub noise_variance: f64,
}

fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> DMatrix<f64> {
    let mut q = random_orthonormal(3, 3, rng);
    if q.determinant() < 0.0 {
        q.column_mut(2).neg_mut();
    }
    q
}

pub fn gen_template_classes(spec: &TemplateSynthSpec) -> Result<TemplateSynthData> {
    if spec.size < 4 || spec.classes == 0 || spec.per_class == 0 || spec.atoms == 0 {
        return Err(Error::invalid(
            "template spec needs size >= 4 and positive counts",
        ));
    }
    if !(spec.snr > 0.0 && spec.blob_sigma > 0.0) {
        return Err(Error::invalid("snr and blob_sigma must be positive"));
    }
    let mut rng = rng_from_seed(spec.seed);
    let s = spec.size;
    let half = (s as f64 - 1.0) / 2.0;
    let radius = 0.35 * s as f64;
    let inv2s2 = 1.0 / (2.0 * spec.blob_sigma * spec.blob_sigma);
    let mut templates = Vec::with_capacity(spec.classes);
    for _ in 0..spec.classes {
        let rot = random_rotation(&mut rng);
        let mut img = DMatrix::zeros(s, s);
        for _ in 0..spec.atoms {
            let atom = loop {
                let v = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
                if v.norm_squared() <= 1.0 {
                    break v * radius;
                }
            };
            let w: f64 = rng.random_range(0.5..1.5);
            let v = &rot * atom;
            let (cy, cx) = (v[0] + half, v[1] + half);
            for x in 0..s {
                for y in 0..s {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    img[(y, x)] += w * (-d2 * inv2s2).exp();
                }
            }
        }
        templates.push(img);
    }
    let count = templates.len() as f64;
    let grand = templates
        .iter()
        .fold(DMatrix::zeros(s, s), |acc, t| acc + t)
        / count;
    let signal_power = templates
        .iter()
        .map(|t| (t - &grand).norm_squared())
        .sum::<f64>()
        / (count * (s * s) as f64);
    let noise_variance = signal_power / spec.snr;
    let sd = noise_variance.sqrt();

    let mut obs = Vec::with_capacity(spec.classes * spec.per_class);
    let mut truth = Vec::with_capacity(obs.capacity());
    let mut labels = Vec::with_capacity(obs.capacity());
    for _ in 0..spec.per_class {
        for (k, t) in templates.iter().enumerate() {
            let noise = gaussian_matrix(s, s, &mut rng) * sd;
            obs.push(t + noise);
            truth.push(t.clone());
            labels.push(k);
        }
    }
    Ok(TemplateSynthData {
        stack: ImageStack::new(obs)?,
        truth: ImageStack::new(truth)?,
        templates,
        labels,
        noise_variance,
    })
}
