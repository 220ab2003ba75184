//! γ-SUP clustering: every point moves to a q-exponential weighted mean of
//! the current configuration until the configuration stops moving, and the
//! resting places define the clusters.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// `{1 + (1 - q) u}_+^{1 / (1 - q)}`, or `exp(u)` at `q = 1`.
pub fn qexp(u: f64, q: f64) -> f64 {
    if q == 1.0 {
        return u.exp();
    }
    let base = 1.0 + (1.0 - q) * u;
    if base <= 0.0 {
        return if q < 1.0 { 0.0 } else { f64::INFINITY };
    }
    base.powf(1.0 / (1.0 - q))
}

/// Normalizing constant `c_{p,q} = (1-q)^{p/2} Γ(1 + p/2 + 1/(1-q)) / Γ(1 + 1/(1-q))` of the
/// `p`-variate q-Gaussian with `q < 1`.
pub fn q_gaussian_constant(p: usize, q: f64) -> Result<f64> {
    if !(q < 1.0) {
        return Err(Error::invalid(
            "the q-Gaussian constant is defined here for q < 1",
        ));
    }
    let a = 1.0 / (1.0 - q);
    let half = p as f64 / 2.0;
    Ok((half * (1.0 - q).ln() + ln_gamma(1.0 + half + a) - ln_gamma(1.0 + a)).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaSupConfig {
    pub s: f64,
    pub tau: f64,
    pub max_iter: usize,
    /// Stop once no point moves farther than this. Relative to the data diameter when `relative`.
    pub move_tol: f64,
    /// Points whose final positions are closer than this share a cluster.
    pub merge_tol: f64,
    /// Interpret both tolerances as fractions of the data diameter.
    pub relative: bool,
}

impl GammaSupConfig {
    pub fn new(tau: f64) -> Self {
        Self {
            s: 0.025,
            tau,
            max_iter: 1000,
            move_tol: 1e-9,
            merge_tol: 1e-6,
            relative: true,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = [self.s, self.tau, self.move_tol, self.merge_tol]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0);
        if !ok || self.max_iter == 0 {
            return Err(Error::invalid(
                "s, tau, tolerances and max_iter must be positive",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterResult {
    pub labels: Vec<usize>,
    /// One row per cluster: the mean of the members' final positions.
    pub centers: Vec<Vec<f64>>,
    pub iterations: usize,
    pub converged: bool,
}

impl ClusterResult {
    pub fn n_clusters(&self) -> usize {
        self.centers.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.centers.len()];
        for l in &self.labels {
            sizes[*l] += 1;
        }
        sizes
    }
}

fn rows(points: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..points.nrows())
        .map(|i| points.row(i).iter().copied().collect())
        .collect()
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Largest pairwise distance, or 0 for fewer than two points.
pub fn diameter(points: &DMatrix<f64>) -> f64 {
    let r = rows(points);
    let mut best: f64 = 0.0;
    for i in 0..r.len() {
        for j in i + 1..r.len() {
            best = best.max(dist2(&r[i], &r[j]));
        }
    }
    best.sqrt()
}

fn check_points(points: &DMatrix<f64>) -> Result<()> {
    if points.nrows() == 0 || points.ncols() == 0 {
        return Err(Error::invalid(
            "γ-SUP needs n >= 1 points of dimension >= 1",
        ));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("points must be finite"));
    }
    Ok(())
}

/// Groups indices whose positions are within `tol` by single linkage; labels
/// are numbered in order of first appearance.
fn link(positions: &[Vec<f64>], tol: f64) -> Vec<usize> {
    let n = positions.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    let tol2 = tol * tol;
    for i in 0..n {
        for j in i + 1..n {
            if dist2(&positions[i], &positions[j]) <= tol2 {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut next = 0;
    let mut root_label = vec![usize::MAX; n];
    (0..n)
        .map(|i| {
            let r = find(&mut parent, i);
            if root_label[r] == usize::MAX {
                root_label[r] = next;
                next += 1;
            }
            root_label[r]
        })
        .collect()
}

/// Weight matrix `w_ij = exp_{1-s}(-||(mu_j - mu_i) / tau||^2)` for the rows of `positions`.
pub fn sup_weights(positions: &DMatrix<f64>, tau: f64, s: f64) -> DMatrix<f64> {
    let n = positions.nrows();
    let q = 1.0 - s;
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            1.0
        } else {
            qexp(
                -(positions.row(j) - positions.row(i)).norm_squared() / (tau * tau),
                q,
            )
        }
    })
}

/// One synchronous update: row `j` becomes `sum_i w_ij mu_i / sum_i w_ij`.
pub fn sup_step(positions: &DMatrix<f64>, tau: f64, s: f64) -> DMatrix<f64> {
    let w = sup_weights(positions, tau, s);
    let mut next = w.transpose() * positions;
    for j in 0..next.nrows() {
        let total: f64 = w.column(j).sum();
        next.row_mut(j).scale_mut(1.0 / total);
    }
    next
}

/// `exp_q(-d2 * inv_tau2)` with an integer-power fast path for the exponent `1/s`.
struct Kernel {
    inv_tau2: f64,
    s: f64,
    int_exp: Option<i32>,
}

impl Kernel {
    fn new(tau: f64, s: f64) -> Self {
        let e = 1.0 / s;
        let int_exp = ((e - e.round()).abs() < 1e-9 && e <= 256.0).then_some(e.round() as i32);
        Self {
            inv_tau2: 1.0 / (tau * tau),
            s,
            int_exp,
        }
    }

    fn weight(&self, d2: f64) -> f64 {
        let base = 1.0 - self.s * d2 * self.inv_tau2;
        if base <= 0.0 {
            return 0.0;
        }
        match self.int_exp {
            Some(k) => base.powi(k),
            None => base.powf(1.0 / self.s),
        }
    }
}

fn neighbor_lists(pos: &[Vec<f64>], radius2: f64) -> Vec<Vec<usize>> {
    (0..pos.len())
        .into_par_iter()
        .map(|j| {
            (0..pos.len())
                .filter(|&i| i != j && dist2(&pos[i], &pos[j]) <= radius2)
                .collect()
        })
        .collect()
}

/// Runs the synchronous γ-SUP recursion from `mu_i = points_i`.
///
/// Positions that coincide to within `1e-3 merge_tol` are carried as one
/// weighted position, which leaves the recursion unchanged up to that
/// tolerance and makes late iterations cheap. Each position only looks at
/// candidates within the kernel support plus a skin; the candidate lists are
/// rebuilt once accumulated motion could have let an outsider enter.
pub fn gamma_sup(points: &DMatrix<f64>, config: &GammaSupConfig) -> Result<ClusterResult> {
    check_points(points)?;
    config.validate()?;
    let n = points.nrows();
    let scale = if config.relative {
        diameter(points).max(f64::MIN_POSITIVE)
    } else {
        1.0
    };
    let (move_tol, merge_tol) = (config.move_tol * scale, config.merge_tol * scale);
    let collapse_tol = 1e-3 * merge_tol;
    let kernel = Kernel::new(config.tau, config.s);
    let support = config.tau / config.s.sqrt();
    let skin = 0.5 * support;
    let list_radius2 = (support + skin).powi(2);

    // position of each compressed group, its multiplicity, and each point's group
    let mut pos = rows(points);
    let mut mult = vec![1.0; n];
    let mut owner: Vec<usize> = (0..n).collect();
    let mut lists = neighbor_lists(&pos, list_radius2);
    let mut drift = 0.0;
    let mut iterations = 0;
    let mut converged = false;

    while iterations < config.max_iter {
        iterations += 1;
        let next: Vec<Vec<f64>> = (0..pos.len())
            .into_par_iter()
            .map(|j| {
                let pj = &pos[j];
                let mut acc: Vec<f64> = pj.iter().map(|v| mult[j] * v).collect();
                let mut total = mult[j];
                for &i in &lists[j] {
                    let pi = &pos[i];
                    let w = kernel.weight(dist2(pi, pj));
                    if w > 0.0 {
                        let wm = w * mult[i];
                        total += wm;
                        acc.iter_mut().zip(pi).for_each(|(a, v)| *a += wm * v);
                    }
                }
                acc.iter_mut().for_each(|a| *a /= total);
                acc
            })
            .collect();
        let moved = pos
            .iter()
            .zip(&next)
            .map(|(a, b)| dist2(a, b))
            .fold(0.0f64, f64::max)
            .sqrt();
        pos = next;
        drift += moved;

        let groups = link(&pos, collapse_tol);
        let k = groups.iter().max().map_or(0, |m| m + 1);
        if k < pos.len() {
            let mut new_pos = vec![vec![0.0; pos[0].len()]; k];
            let mut new_mult = vec![0.0; k];
            for (g, (p, m)) in groups.iter().zip(pos.iter().zip(&mult)) {
                new_mult[*g] += m;
                new_pos[*g].iter_mut().zip(p).for_each(|(a, v)| *a += m * v);
            }
            for (p, m) in new_pos.iter_mut().zip(&new_mult) {
                p.iter_mut().for_each(|v| *v /= m);
            }
            let mut new_lists: Vec<Vec<usize>> = vec![Vec::new(); k];
            for (j, list) in lists.iter().enumerate() {
                let g = groups[j];
                new_lists[g].extend(list.iter().map(|i| groups[*i]).filter(|h| *h != g));
            }
            for list in &mut new_lists {
                list.sort_unstable();
                list.dedup();
            }
            owner.iter_mut().for_each(|o| *o = groups[*o]);
            pos = new_pos;
            mult = new_mult;
            lists = new_lists;
            drift += collapse_tol;
        }
        if moved < move_tol {
            converged = true;
            break;
        }
        if 2.0 * drift > skin {
            lists = neighbor_lists(&pos, list_radius2);
            drift = 0.0;
        }
    }

    let group_labels = link(&pos, merge_tol);
    let k = group_labels.iter().max().map_or(0, |m| m + 1);
    // relabel by first point index so labels do not depend on group order
    let mut remap = vec![usize::MAX; k];
    let mut next = 0;
    let labels: Vec<usize> = owner
        .iter()
        .map(|o| {
            let g = group_labels[*o];
            if remap[g] == usize::MAX {
                remap[g] = next;
                next += 1;
            }
            remap[g]
        })
        .collect();
    let d = points.ncols();
    let mut centers = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (i, l) in labels.iter().enumerate() {
        counts[*l] += 1;
        centers[*l]
            .iter_mut()
            .zip(&pos[owner[i]])
            .for_each(|(c, v)| *c += v);
    }
    for (c, m) in centers.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= *m as f64);
    }
    Ok(ClusterResult {
        labels,
        centers,
        iterations,
        converged,
    })
}

/// Centers the points and divides by their global standard deviation.
pub fn normalize(points: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_points(points)?;
    let n = points.nrows();
    let mean = points.row_mean();
    let mut out = points.clone();
    for i in 0..n {
        let mut row = out.row_mut(i);
        row -= &mean;
    }
    let sd = (out.norm_squared() / out.len() as f64).sqrt();
    if sd > 0.0 {
        out /= sd;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRow {
    pub tau: f64,
    pub clusters: usize,
    /// Clusters with more than `min_size` members.
    pub large_clusters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTransition {
    pub s: f64,
    pub min_size: usize,
    pub rows: Vec<PhaseRow>,
    pub recommended_tau: f64,
}

impl PhaseTransition {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("tau,clusters,large_clusters\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.tau, r.clusters, r.large_clusters));
        }
        out
    }
}

fn run_count(points: &DMatrix<f64>, s: f64, tau: f64, min_size: usize) -> Result<PhaseRow> {
    let res = gamma_sup(
        points,
        &GammaSupConfig {
            s,
            ..GammaSupConfig::new(tau)
        },
    )?;
    Ok(PhaseRow {
        tau,
        clusters: res.n_clusters(),
        large_clusters: res.sizes().iter().filter(|c| **c > min_size).count(),
    })
}

/// Cluster counts over `tau_grid`. The recommended τ maximizes the number of
/// clusters larger than `min_size`; among tied τ values the middle one is taken.
pub fn phase_transition_scan(
    points: &DMatrix<f64>,
    s: f64,
    tau_grid: &[f64],
    min_size: usize,
) -> Result<PhaseTransition> {
    if tau_grid.is_empty() {
        return Err(Error::invalid("τ grid must not be empty"));
    }
    let mut rows = Vec::with_capacity(tau_grid.len());
    for &tau in tau_grid {
        rows.push(run_count(points, s, tau, min_size)?);
    }
    let best = rows.iter().map(|r| r.large_clusters).max().unwrap_or(0);
    let ties: Vec<&PhaseRow> = rows.iter().filter(|r| r.large_clusters == best).collect();
    let recommended_tau = ties[ties.len() / 2].tau;
    Ok(PhaseTransition {
        s,
        min_size,
        rows,
        recommended_tau,
    })
}

/// `(lower, upper)` τ bracket: the upper bound is doubled from the data
/// diameter until everything merges into one cluster, then halved until every
/// point is its own cluster.
pub fn tau_bracket(points: &DMatrix<f64>, s: f64) -> Result<(f64, f64)> {
    check_points(points)?;
    let n = points.nrows();
    let start = diameter(points);
    if start == 0.0 || n == 1 {
        return Ok((1.0, 1.0));
    }
    let mut hi = start;
    for _ in 0..60 {
        if run_count(points, s, hi, 0)?.clusters == 1 {
            break;
        }
        hi *= 2.0;
    }
    let mut lo = hi;
    for _ in 0..200 {
        if run_count(points, s, lo, 0)?.clusters == n {
            break;
        }
        lo /= 2.0;
    }
    Ok((lo, hi))
}

/// Bracket, then a geometric grid of `grid_len` values between the bounds.
pub fn auto_phase_transition(
    points: &DMatrix<f64>,
    s: f64,
    grid_len: usize,
    min_size: usize,
) -> Result<PhaseTransition> {
    if grid_len < 2 {
        return Err(Error::invalid("τ grid needs at least two points"));
    }
    let (lo, hi) = tau_bracket(points, s)?;
    let ratio = (hi / lo).ln();
    let grid: Vec<f64> = (0..grid_len)
        .map(|k| lo * (ratio * k as f64 / (grid_len - 1) as f64).exp())
        .collect();
    phase_transition_scan(points, s, &grid, min_size)
}
