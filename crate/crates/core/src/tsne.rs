//! Exact t-SNE: Gaussian input affinities calibrated to a target perplexity,
//! a Student-t output kernel, and momentum gradient descent on `KL(P || Q)`.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::rng_from_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsneConfig {
    pub out_dim: usize,
    pub perplexity: f64,
    /// Learning rate.
    pub eta: f64,
    pub iters: usize,
    pub momentum_initial: f64,
    pub momentum_final: f64,
    /// Iteration at which the momentum switches to `momentum_final`.
    pub momentum_switch: usize,
    /// P is multiplied by this factor for the first `exaggeration_iters` iterations.
    pub exaggeration: f64,
    pub exaggeration_iters: usize,
    /// Record the KL divergence every this many iterations.
    pub kl_every: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            out_dim: 2,
            perplexity: 30.0,
            eta: 200.0,
            iters: 1000,
            momentum_initial: 0.5,
            momentum_final: 0.8,
            momentum_switch: 250,
            exaggeration: 12.0,
            exaggeration_iters: 250,
            kl_every: 10,
            seed: 0,
        }
    }
}

impl TsneConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.out_dim == 0 || self.kl_every == 0 {
            return Err(Error::invalid("out_dim and kl_every must be positive"));
        }
        if !(self.perplexity > 1.0 && self.perplexity < n as f64) {
            return Err(Error::invalid(format!(
                "perplexity must lie in (1, n) = (1, {n}), got {}",
                self.perplexity
            )));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::invalid("eta must be positive"));
        }
        let momentum_ok = |a: f64| (0.0..1.0).contains(&a);
        if !momentum_ok(self.momentum_initial) || !momentum_ok(self.momentum_final) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if !(self.exaggeration >= 1.0 && self.exaggeration.is_finite()) {
            return Err(Error::invalid("exaggeration must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TsneResult {
    pub embedding: DMatrix<f64>,
    /// `(iteration, KL(P || Q))` before every `kl_every`-th step and after the
    /// last one, always against the unexaggerated P.
    pub kl_trace: Vec<(usize, f64)>,
}

fn squared_distances(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let rows: Vec<_> = (0..n).map(|i| x.row(i).into_owned()).collect();
    DMatrix::from_fn(n, n, |i, j| (&rows[i] - &rows[j]).norm_squared())
}

/// Row of conditional probabilities `exp(-beta d) / sum` and its entropy (nats).
fn conditional_row(d2: &[f64], skip: usize, beta: f64) -> (Vec<f64>, f64) {
    let dmin = d2
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != skip)
        .map(|(_, v)| *v)
        .fold(f64::INFINITY, f64::min);
    let mut row: Vec<f64> = d2
        .iter()
        .enumerate()
        .map(|(j, v)| {
            if j == skip {
                0.0
            } else {
                (-beta * (v - dmin)).exp()
            }
        })
        .collect();
    let total: f64 = row.iter().sum();
    row.iter_mut().for_each(|v| *v /= total);
    let entropy = -row
        .iter()
        .filter(|v| **v > 0.0)
        .map(|v| v * v.ln())
        .sum::<f64>();
    (row, entropy)
}

/// Conditional affinities `pi_{j|i}` (row `i`) with each row's precision
/// `beta_i = 1 / (2 sigma_i^2)` found by bisection so that the row entropy equals
/// `ln(perplexity)`. Returns the row-stochastic matrix and the precisions.
pub fn conditional_affinities(
    x: &DMatrix<f64>,
    perplexity: f64,
) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let n = x.nrows();
    if n < 3 {
        return Err(Error::invalid(format!(
            "t-SNE needs at least 3 points, got {n}"
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("points must be finite"));
    }
    if !(perplexity > 1.0 && perplexity < n as f64) {
        return Err(Error::invalid(format!(
            "perplexity must lie in (1, {n}), got {perplexity}"
        )));
    }
    let d2 = squared_distances(x);
    let target = perplexity.ln();
    let rows: Vec<Result<(Vec<f64>, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let row: Vec<f64> = d2.row(i).iter().copied().collect();
            let mean = row.iter().sum::<f64>() / (n - 1) as f64;
            if mean <= 0.0 {
                return Err(Error::DegenerateData(format!(
                    "point {i} coincides with every other point"
                )));
            }
            let (mut lo, mut hi) = (-60.0f64, 60.0f64);
            let mut best = None;
            for _ in 0..200 {
                let t = 0.5 * (lo + hi);
                let beta = t.exp() / mean;
                let (p, h) = conditional_row(&row, i, beta);
                let gap = h - target;
                best = Some((p, beta, gap));
                if gap.abs() < 1e-12 {
                    break;
                }
                if gap > 0.0 {
                    lo = t;
                } else {
                    hi = t;
                }
            }
            let (p, beta, gap) = best.expect("bisection ran");
            if gap.abs() > 1e-8 {
                return Err(Error::DegenerateData(format!(
                    "could not calibrate point {i} to perplexity {perplexity} (entropy gap {gap:e})"
                )));
            }
            Ok((p, beta))
        })
        .collect();
    let mut cond = DMatrix::zeros(n, n);
    let mut betas = Vec::with_capacity(n);
    for (i, r) in rows.into_iter().enumerate() {
        let (p, beta) = r?;
        for (j, v) in p.into_iter().enumerate() {
            cond[(i, j)] = v;
        }
        betas.push(beta);
    }
    Ok((cond, betas))
}

/// Symmetric joint affinities `p_ij = (pi_{j|i} + pi_{i|j}) / (2n)`.
pub fn affinities(x: &DMatrix<f64>, perplexity: f64) -> Result<DMatrix<f64>> {
    let (cond, _) = conditional_affinities(x, perplexity)?;
    let n = cond.nrows() as f64;
    Ok((&cond + cond.transpose()) / (2.0 * n))
}

fn row_major(y: &DMatrix<f64>) -> Vec<f64> {
    y.transpose().as_slice().to_vec()
}

/// Student-t kernel `(1 + ||y_i - y_j||^2)^-1` (zero diagonal) as a flat
/// row-major `n x n` buffer, and its sum.
struct Kernel {
    n: usize,
    num: Vec<f64>,
    z: f64,
}

impl Kernel {
    fn new(y: &DMatrix<f64>) -> Self {
        let n = y.nrows();
        let mut kernel = Self {
            n,
            num: vec![0.0; n * n],
            z: 0.0,
        };
        kernel.update(y);
        kernel
    }

    fn update(&mut self, y: &DMatrix<f64>) {
        let n = self.n;
        let d = y.ncols();
        let flat = row_major(y);
        self.num.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
            let yi = &flat[i * d..(i + 1) * d];
            for (j, slot) in row.iter_mut().enumerate() {
                if j != i {
                    let yj = &flat[j * d..(j + 1) * d];
                    let d2: f64 = yi.iter().zip(yj).map(|(a, b)| (a - b) * (a - b)).sum();
                    *slot = 1.0 / (1.0 + d2);
                }
            }
        });
        self.z = self.num.iter().sum();
    }

    fn kl(&self, p: &DMatrix<f64>) -> f64 {
        let n = self.n;
        (0..n)
            .into_par_iter()
            .map(|i| {
                let row = &self.num[i * n..(i + 1) * n];
                p.column(i)
                    .iter()
                    .zip(row)
                    .enumerate()
                    .filter(|(j, (pv, _))| *j != i && **pv > 0.0)
                    .map(|(_, (pv, w))| pv * (pv * self.z / w).ln())
                    .sum::<f64>()
            })
            .sum()
    }

    /// Gradient of `KL(scale P || Q)` in the form `4 sum_j (scale p_ij - q_ij) w_ij (y_i - y_j)`.
    /// `p` must be symmetric.
    fn gradient(&self, p: &DMatrix<f64>, y: &DMatrix<f64>, scale: f64) -> DMatrix<f64> {
        let n = self.n;
        let d = y.ncols();
        let flat = row_major(y);
        let inv_z = 1.0 / self.z;
        let rows: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut g = vec![0.0; d];
                let yi = &flat[i * d..(i + 1) * d];
                let row = &self.num[i * n..(i + 1) * n];
                for (j, (pv, w)) in p.column(i).iter().zip(row).enumerate() {
                    if i == j {
                        continue;
                    }
                    let force = (scale * pv - w * inv_z) * w;
                    let yj = &flat[j * d..(j + 1) * d];
                    for ((gk, a), b) in g.iter_mut().zip(yi).zip(yj) {
                        *gk += force * (a - b);
                    }
                }
                g.iter_mut().for_each(|v| *v *= 4.0);
                g
            })
            .collect();
        DMatrix::from_fn(n, d, |i, k| rows[i][k])
    }
}

/// `KL(P || Q)` with `q_ij = (1 + ||y_i - y_j||^2)^-1 / sum_{k != l} (1 + ||y_k - y_l||^2)^-1`.
pub fn kl_divergence(p: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    Kernel::new(y).kl(p)
}

/// `dKL/dy_i = 4 sum_j (p_ij - q_ij)(y_i - y_j)(1 + ||y_i - y_j||^2)^-1`.
pub fn kl_gradient(p: &DMatrix<f64>, y: &DMatrix<f64>) -> DMatrix<f64> {
    Kernel::new(y).gradient(p, y, 1.0)
}

pub fn tsne(x: &DMatrix<f64>, config: &TsneConfig) -> Result<TsneResult> {
    let n = x.nrows();
    config.validate(n)?;
    let p = affinities(x, config.perplexity)?;
    let mut rng = rng_from_seed(config.seed);
    let mut y = DMatrix::from_fn(n, config.out_dim, |_, _| {
        1e-2 * rng.sample::<f64, _>(StandardNormal)
    });
    let mut prev = y.clone();
    let mut kl_trace = Vec::with_capacity(config.iters / config.kl_every + 2);
    let mut kernel = Kernel::new(&y);
    for t in 0..config.iters {
        if t > 0 {
            kernel.update(&y);
        }
        if t % config.kl_every == 0 {
            kl_trace.push((t, kernel.kl(&p)));
        }
        let scale = if t < config.exaggeration_iters {
            config.exaggeration
        } else {
            1.0
        };
        let grad = kernel.gradient(&p, &y, scale);
        let alpha = if t < config.momentum_switch {
            config.momentum_initial
        } else {
            config.momentum_final
        };
        let next = &y - grad * config.eta + (&y - &prev) * alpha;
        prev = y;
        y = next;
        let mean = y.row_mean();
        for mut row in y.row_iter_mut() {
            row -= &mean;
        }
        // keep the momentum term translation-free as well
        for mut row in prev.row_iter_mut() {
            row -= &mean;
        }
    }
    kernel.update(&y);
    kl_trace.push((config.iters, kernel.kl(&p)));
    Ok(TsneResult {
        embedding: y,
        kl_trace,
    })
}

/// Mean silhouette width of `points` under `labels` (Euclidean distance).
pub fn silhouette(points: &DMatrix<f64>, labels: &[usize]) -> Result<f64> {
    let n = points.nrows();
    if labels.len() != n || n < 2 {
        return Err(Error::invalid(
            "silhouette needs one label per point and n >= 2",
        ));
    }
    let d2 = squared_distances(points);
    let classes: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
    if classes.len() < 2 {
        return Err(Error::invalid("silhouette needs at least two classes"));
    }
    let mut total = 0.0;
    for i in 0..n {
        let mut own = (0.0, 0usize);
        let mut other = std::collections::BTreeMap::new();
        for j in 0..n {
            if i == j {
                continue;
            }
            let d = d2[(i, j)].sqrt();
            if labels[j] == labels[i] {
                own.0 += d;
                own.1 += 1;
            } else {
                let e = other.entry(labels[j]).or_insert((0.0, 0usize));
                e.0 += d;
                e.1 += 1;
            }
        }
        if own.1 == 0 {
            continue;
        }
        let a = own.0 / own.1 as f64;
        let b = other
            .values()
            .map(|(s, c)| s / *c as f64)
            .fold(f64::INFINITY, f64::min);
        total += (b - a) / a.max(b);
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn random_points(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, d, |_, _| rng.sample(StandardNormal))
    }

    #[test]
    fn equidistant_triangle() {
        let h = 3f64.sqrt() / 2.0;
        let x = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, 0.0, 0.5, h]);
        let p = affinities(&x, 2.0).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 0.0 } else { 1.0 / 6.0 };
                assert!((p[(i, j)] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn joint_affinities_symmetric_normalized() {
        let x = random_points(40, 5, 1);
        let p = affinities(&x, 10.0).unwrap();
        assert!((p.sum() - 1.0).abs() < 1e-12);
        assert!((&p - p.transpose()).amax() < 1e-15);
        assert!((0..40).all(|i| p[(i, i)] == 0.0));
        assert!(p.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn calibrated_perplexity_from_recomputed_entropy() {
        let x = random_points(50, 4, 2);
        let d2 = squared_distances(&x);
        let (_, betas) = conditional_affinities(&x, 15.0).unwrap();
        for (i, beta) in betas.iter().enumerate() {
            // recompute the row from scratch without the min shift
            let w: Vec<f64> = (0..50)
                .filter(|j| *j != i)
                .map(|j| (-beta * d2[(i, j)]).exp())
                .collect();
            let total: f64 = w.iter().sum();
            let h: f64 = -w.iter().map(|v| v / total).map(|p| p * p.ln()).sum::<f64>();
            assert!((h.exp() - 15.0).abs() < 1e-4, "row {i}: {}", h.exp());
        }
    }

    #[test]
    fn input_guards() {
        assert!(affinities(&random_points(2, 2, 0), 1.5).is_err());
        assert!(affinities(&random_points(10, 2, 0), 10.0).is_err());
        assert!(affinities(&DMatrix::zeros(5, 2), 2.0).is_err());
        let cfg = TsneConfig {
            eta: 0.0,
            ..Default::default()
        };
        assert!(cfg.validate(100).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let x = random_points(9, 3, 3);
        let p = affinities(&x, 3.0).unwrap();
        let y = random_points(9, 2, 4);
        let g = kl_gradient(&p, &y);
        let h = 1e-5;
        for i in 0..9 {
            for k in 0..2 {
                let mut plus = y.clone();
                plus[(i, k)] += h;
                let mut minus = y.clone();
                minus[(i, k)] -= h;
                let fd = (kl_divergence(&p, &plus) - kl_divergence(&p, &minus)) / (2.0 * h);
                let rel = (fd - g[(i, k)]).abs() / g.amax();
                assert!(rel < 1e-5, "({i},{k}) fd {fd} analytic {}", g[(i, k)]);
            }
        }
    }

    #[test]
    fn separated_blobs_embed_separably() {
        let mut x = random_points(60, 5, 5);
        let labels: Vec<usize> = (0..60).map(|i| i / 30).collect();
        for i in 30..60 {
            x[(i, 0)] += 25.0;
        }
        let cfg = TsneConfig {
            perplexity: 10.0,
            iters: 400,
            seed: 3,
            eta: 10.0,
            ..Default::default()
        };
        let res = tsne(&x, &cfg).unwrap();
        let a = tsne(&x, &cfg).unwrap();
        assert_eq!(res, a);
        assert!(res.kl_trace.iter().all(|(_, v)| *v >= 0.0));
        assert!(res.kl_trace.last().unwrap().1 <= res.kl_trace[0].1);
        assert_eq!(res.kl_trace.len(), 400 / 10 + 1);
        assert!(res.embedding.row_mean().amax() < 1e-9);
        assert!(silhouette(&res.embedding, &labels).unwrap() > 0.5);
    }
}
