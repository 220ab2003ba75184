//! Numeric substrate shared by every stage: image stacks, centering, mode-wise
//! scatter matrices and a deterministic symmetric eigen-decomposition.
//!
//! Matrices are `nalgebra::DMatrix<f64>`, which is column-major, so
//! `m.as_slice()` is exactly the column-stacking `vec(m)` used throughout.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered collection of `n` real `p x q` images.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageStack {
    p: usize,
    q: usize,
    samples: Vec<DMatrix<f64>>,
}

impl ImageStack {
    pub fn new(samples: Vec<DMatrix<f64>>) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::invalid("image stack must contain at least one sample"))?;
        let (p, q) = first.shape();
        if p == 0 || q == 0 {
            return Err(Error::invalid("image dimensions must be at least 1x1"));
        }
        for (i, s) in samples.iter().enumerate() {
            if s.shape() != (p, q) {
                return Err(Error::invalid(format!(
                    "sample {i} has shape {:?}, expected ({p}, {q})",
                    s.shape()
                )));
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!(
                    "sample {i} contains a non-finite entry"
                )));
            }
        }
        Ok(Self { p, q, samples })
    }

    /// Builds a stack from `n*p*q` values, each sample stored row-major.
    pub fn from_row_major(n: usize, p: usize, q: usize, data: &[f64]) -> Result<Self> {
        if data.len() != n * p * q {
            return Err(Error::invalid(format!(
                "expected {} values for a {n}x{p}x{q} stack, got {}",
                n * p * q,
                data.len()
            )));
        }
        let samples = data
            .chunks_exact(p * q)
            .map(|chunk| DMatrix::from_row_slice(p, q, chunk))
            .collect();
        Self::new(samples)
    }

    /// All samples flattened row-major, sample after sample.
    pub fn to_row_major(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len() * self.p * self.q);
        for s in &self.samples {
            for r in 0..self.p {
                for c in 0..self.q {
                    out.push(s[(r, c)]);
                }
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.p, self.q)
    }

    pub fn samples(&self) -> &[DMatrix<f64>] {
        &self.samples
    }

    pub fn sample(&self, i: usize) -> &DMatrix<f64> {
        &self.samples[i]
    }

    pub fn into_samples(self) -> Vec<DMatrix<f64>> {
        self.samples
    }

    /// Entrywise sample mean.
    pub fn mean(&self) -> DMatrix<f64> {
        let mut mean = DMatrix::zeros(self.p, self.q);
        for s in &self.samples {
            mean += s;
        }
        mean / self.len() as f64
    }

    /// `n^-1 sum ||X_i||_F^2`.
    pub fn mean_energy(&self) -> f64 {
        self.samples.iter().map(|s| s.norm_squared()).sum::<f64>() / self.len() as f64
    }

    /// `n x pq` matrix whose rows are `vec(X_i)` (column stacking).
    pub fn vectorized(&self) -> DMatrix<f64> {
        let d = self.p * self.q;
        DMatrix::from_fn(self.len(), d, |i, k| self.samples[i].as_slice()[k])
    }

    pub fn check_dims(&self, p: usize, q: usize) -> Result<()> {
        if self.dims() != (p, q) {
            return Err(Error::invalid(format!(
                "stack has {:?} images, expected ({p}, {q})",
                self.dims()
            )));
        }
        Ok(())
    }
}

/// Subtracts the entrywise sample mean. Requires at least two samples.
pub fn center(stack: &ImageStack) -> Result<(DMatrix<f64>, ImageStack)> {
    if stack.len() < 2 {
        return Err(Error::invalid("centering needs at least two samples"));
    }
    let mean = stack.mean();
    let centered = stack.samples.iter().map(|s| s - &mean).collect();
    Ok((
        mean,
        ImageStack {
            p: stack.p,
            q: stack.q,
            samples: centered,
        },
    ))
}

/// Eigenpairs of a symmetric matrix, values non-increasing, one column of
/// `vectors` per value.
#[derive(Debug, Clone, PartialEq)]
pub struct SymEigen {
    pub values: Vec<f64>,
    pub vectors: DMatrix<f64>,
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(Error::invalid(format!(
            "matrix is {:?}, not square",
            m.shape()
        )));
    }
    let scale = m.norm();
    let asym = (m - m.transpose()).amax();
    if asym > 1e-10 * scale.max(f64::MIN_POSITIVE) && asym > 0.0 {
        return Err(Error::invalid(format!(
            "matrix is not symmetric (max asymmetry {asym:e}, norm {scale:e})"
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("matrix contains a non-finite entry"));
    }
    Ok(())
}

/// Flips `v` so its largest-magnitude entry is positive (first index wins ties).
pub(crate) fn normalize_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|x| *x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

fn descending_order(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order
}

/// Top-`k` eigenpairs of a symmetric matrix.
///
/// The input is symmetrized as `(M + M^T)/2` first. Each returned vector has
/// its largest-magnitude entry positive, ties going to the lowest index.
pub fn sym_eig(m: &DMatrix<f64>, k: usize) -> Result<SymEigen> {
    check_symmetric(m)?;
    let dim = m.nrows();
    if k > dim {
        return Err(Error::invalid(format!(
            "requested {k} eigenpairs of a {dim}x{dim} matrix"
        )));
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let order = descending_order(eig.eigenvalues.as_slice());
    let mut vectors = DMatrix::zeros(dim, k);
    let mut values = Vec::with_capacity(k);
    for (col, &idx) in order.iter().take(k).enumerate() {
        values.push(eig.eigenvalues[idx]);
        let mut v: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        normalize_sign(&mut v);
        vectors.column_mut(col).copy_from_slice(&v);
    }
    Ok(SymEigen { values, vectors })
}

/// All eigenvalues of a symmetric matrix in non-increasing order, without vectors.
pub fn sym_eigvals(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    check_symmetric(m)?;
    let sym = (m + m.transpose()) * 0.5;
    let mut vals: Vec<f64> = sym.symmetric_eigenvalues().iter().copied().collect();
    vals.sort_by(|a, b| b.total_cmp(a));
    Ok(vals)
}

/// Which side of the images a mode-wise scatter matrix lives on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// `p x p`: `n^-1 sum X_i P X_i^T`
    Column,
    /// `q x q`: `n^-1 sum X_i^T P X_i`
    Row,
}

/// `n^-1 sum X_i P X_i^T` (column mode) or `n^-1 sum X_i^T P X_i` (row mode)
/// for an already-centered stack and a symmetric idempotent projector.
pub fn mode_covariance(
    centered: &ImageStack,
    projector: &DMatrix<f64>,
    mode: Mode,
) -> Result<DMatrix<f64>> {
    let (p, q) = centered.dims();
    let need = match mode {
        Mode::Column => q,
        Mode::Row => p,
    };
    if projector.shape() != (need, need) {
        return Err(Error::invalid(format!(
            "projector is {:?}, expected {need}x{need}",
            projector.shape()
        )));
    }
    check_symmetric(projector)?;
    let idem = (projector * projector - projector).amax();
    if idem > 1e-10 * projector.norm().max(1.0) {
        return Err(Error::invalid(format!(
            "projector is not idempotent (residual {idem:e})"
        )));
    }
    let out_dim = if mode == Mode::Column { p } else { q };
    let mut acc = DMatrix::zeros(out_dim, out_dim);
    for x in centered.samples() {
        match mode {
            Mode::Column => acc += x * projector * x.transpose(),
            Mode::Row => acc += x.transpose() * projector * x,
        }
    }
    acc /= centered.len() as f64;
    Ok((&acc + acc.transpose()) * 0.5)
}

/// Mode scatter with the projector given through an orthonormal basis `W`
/// (`P = W W^T`). Same result as [`mode_covariance`] at lower cost.
pub(crate) fn mode_scatter_with_basis(
    centered: &ImageStack,
    basis: &DMatrix<f64>,
    mode: Mode,
) -> DMatrix<f64> {
    let (p, q) = centered.dims();
    let out_dim = if mode == Mode::Column { p } else { q };
    let mut acc = DMatrix::zeros(out_dim, out_dim);
    for x in centered.samples() {
        let y = match mode {
            Mode::Column => x * basis,
            Mode::Row => x.transpose() * basis,
        };
        acc.gemm(1.0, &y, &y.transpose(), 1.0);
    }
    acc /= centered.len() as f64;
    (&acc + acc.transpose()) * 0.5
}

/// Mode scatter with `P = I`.
pub(crate) fn mode_scatter_identity(centered: &ImageStack, mode: Mode) -> DMatrix<f64> {
    let (p, q) = centered.dims();
    let out_dim = if mode == Mode::Column { p } else { q };
    let mut acc = DMatrix::zeros(out_dim, out_dim);
    for x in centered.samples() {
        match mode {
            Mode::Column => acc.gemm(1.0, x, &x.transpose(), 1.0),
            Mode::Row => acc.gemm(1.0, &x.transpose(), x, 1.0),
        }
    }
    acc /= centered.len() as f64;
    (&acc + acc.transpose()) * 0.5
}

/// Spectrum of `n^-1 sum vec(X_i) vec(X_i)^T` for a centered stack, non-increasing,
/// truncated to `min(n, pq)` values. Uses the `n x n` Gram matrix when that is smaller.
pub fn vectorized_spectrum(centered: &ImageStack) -> Result<Vec<f64>> {
    let y = centered.vectorized();
    let n = centered.len() as f64;
    let small = if y.nrows() <= y.ncols() {
        &y * y.transpose()
    } else {
        y.transpose() * &y
    } / n;
    sym_eigvals(&small)
}

/// Leading `k` eigenpairs of `n^-1 sum vec(X_i) vec(X_i)^T` for a centered stack,
/// going through the Gram matrix when `n < pq`.
pub fn vectorized_top_eigen(centered: &ImageStack, k: usize) -> Result<SymEigen> {
    let y = centered.vectorized();
    let n = centered.len();
    let d = y.ncols();
    if k > d.min(n) {
        return Err(Error::invalid(format!(
            "requested {k} components from rank <= {}",
            d.min(n)
        )));
    }
    if d <= n {
        let cov = y.transpose() * &y / n as f64;
        return sym_eig(&cov, k);
    }
    let gram = &y * y.transpose() / n as f64;
    let eg = sym_eig(&gram, k)?;
    let mut vectors = DMatrix::zeros(d, k);
    for j in 0..k {
        let lam = eg.values[j];
        if lam <= 0.0 {
            return Err(Error::DegenerateData(format!(
                "component {j} has non-positive variance {lam:e}"
            )));
        }
        let mut v: Vec<f64> = (y.transpose() * eg.vectors.column(j))
            .iter()
            .copied()
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        normalize_sign(&mut v);
        vectors.column_mut(j).copy_from_slice(&v);
    }
    Ok(SymEigen {
        values: eg.values,
        vectors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn random_stack(n: usize, p: usize, q: usize, seed: u64) -> ImageStack {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let samples = (0..n)
            .map(|_| DMatrix::from_fn(p, q, |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        ImageStack::new(samples).unwrap()
    }

    #[test]
    fn center_symmetric_pair() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, -2.0, 3.0, 0.5]);
        let stack = ImageStack::new(vec![m.clone(), -m.clone()]).unwrap();
        let (mean, centered) = center(&stack).unwrap();
        assert_eq!(mean, DMatrix::zeros(2, 2));
        assert_eq!(centered, stack);
    }

    #[test]
    fn center_identical_samples() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let stack = ImageStack::new(vec![m.clone(); 4]).unwrap();
        let (mean, centered) = center(&stack).unwrap();
        assert!((mean - m).amax() < 1e-15);
        assert!(centered.samples().iter().all(|s| s.amax() < 1e-15));
    }

    #[test]
    fn centered_samples_sum_to_zero() {
        let stack = random_stack(3, 4, 4, 1);
        let (_, centered) = center(&stack).unwrap();
        // direct summation
        for r in 0..4 {
            for c in 0..4 {
                let s: f64 = centered.samples().iter().map(|x| x[(r, c)]).sum();
                assert!(s.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn center_rejects_single_sample() {
        let stack = random_stack(1, 2, 2, 0);
        assert!(matches!(center(&stack), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn stack_rejects_nan_and_ragged() {
        let a = DMatrix::from_element(2, 2, 1.0);
        let b = DMatrix::from_element(2, 3, 1.0);
        assert!(ImageStack::new(vec![a.clone(), b]).is_err());
        let mut c = a.clone();
        c[(0, 1)] = f64::NAN;
        assert!(ImageStack::new(vec![a, c]).is_err());
        assert!(ImageStack::new(vec![]).is_err());
    }

    #[test]
    fn row_major_round_trip() {
        let stack = random_stack(3, 2, 5, 9);
        let flat = stack.to_row_major();
        assert_eq!(flat[1], stack.sample(0)[(0, 1)]);
        assert_eq!(ImageStack::from_row_major(3, 2, 5, &flat).unwrap(), stack);
    }

    #[test]
    fn eig_identity() {
        let e = sym_eig(&DMatrix::identity(3, 3), 3).unwrap();
        assert_eq!(e.values.len(), 3);
        for v in e.values {
            assert!((v - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn eig_diagonal_top_two() {
        let m = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![5.0, 2.0, 1.0]));
        let e = sym_eig(&m, 2).unwrap();
        assert_eq!(e.values, vec![5.0, 2.0]);
        let expect = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        assert!((e.vectors - expect).amax() < 1e-14);
    }

    #[test]
    fn eig_residuals_random() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let a = DMatrix::from_fn(6, 6, |_, _| rng.random_range(-1.0..1.0));
        let m = &a + a.transpose();
        let e = sym_eig(&m, 6).unwrap();
        let norm = m.norm();
        for j in 0..6 {
            let v = e.vectors.column(j);
            let r = &m * v - v * e.values[j];
            assert!(r.norm() <= 1e-8 * norm);
        }
        let gram = e.vectors.transpose() * &e.vectors;
        assert!((gram - DMatrix::identity(6, 6)).amax() < 1e-10);
        for w in e.values.windows(2) {
            assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn eig_sign_convention_and_determinism() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let a = DMatrix::from_fn(5, 5, |_, _| rng.random_range(-1.0..1.0));
        let m = &a * a.transpose();
        let e1 = sym_eig(&m, 5).unwrap();
        let e2 = sym_eig(&m, 5).unwrap();
        assert_eq!(e1, e2);
        for j in 0..5 {
            let col: Vec<f64> = e1.vectors.column(j).iter().copied().collect();
            let imax = (0..5).fold(0, |b, i| if col[i].abs() > col[b].abs() { i } else { b });
            assert!(col[imax] > 0.0);
        }
    }

    #[test]
    fn eig_errors() {
        let mut m = DMatrix::identity(3, 3);
        m[(0, 1)] = 1.0;
        assert!(matches!(sym_eig(&m, 2), Err(Error::InvalidInput(_))));
        assert!(matches!(
            sym_eig(&DMatrix::identity(3, 3), 4),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn mode_covariance_identity_and_zero() {
        let stack = random_stack(5, 3, 4, 5);
        let (_, c) = center(&stack).unwrap();
        let col = mode_covariance(&c, &DMatrix::identity(4, 4), Mode::Column).unwrap();
        let mut expect = DMatrix::zeros(3, 3);
        for x in c.samples() {
            expect += x * x.transpose();
        }
        expect /= 5.0;
        assert!((col - expect).amax() < 1e-13);
        let zero = mode_covariance(&c, &DMatrix::zeros(3, 3), Mode::Row).unwrap();
        assert_eq!(zero, DMatrix::zeros(4, 4));
    }

    #[test]
    fn mode_covariance_rank_one_kronecker_oracle() {
        let stack = random_stack(3, 4, 3, 6);
        let (_, c) = center(&stack).unwrap();
        let b = nalgebra::DVector::from_vec(vec![1.0, 2.0, -2.0]) / 3.0;
        let proj = &b * b.transpose();
        let got = mode_covariance(&c, &proj, Mode::Column).unwrap();
        // (b^T (x) I_p) vec(X) = X b, through the vectorized sample covariance
        let (p, q) = (4, 3);
        let y = c.vectorized();
        let sigma = y.transpose() * &y / 3.0;
        let mut kron = DMatrix::zeros(p, p * q);
        for j in 0..q {
            for i in 0..p {
                kron[(i, j * p + i)] = b[j];
            }
        }
        let expect = &kron * sigma * kron.transpose();
        assert!((got - expect).amax() < 1e-12);
    }

    #[test]
    fn mode_covariance_dimension_mismatch() {
        let stack = random_stack(3, 4, 3, 6);
        assert!(mode_covariance(&stack, &DMatrix::identity(4, 4), Mode::Column).is_err());
        let not_idem = DMatrix::identity(3, 3) * 2.0;
        assert!(mode_covariance(&stack, &not_idem, Mode::Column).is_err());
    }

    #[test]
    fn basis_scatter_matches_projector_form() {
        let stack = random_stack(6, 5, 4, 8);
        let (_, c) = center(&stack).unwrap();
        let e = sym_eig(&mode_scatter_identity(&c, Mode::Row), 2).unwrap();
        let proj = &e.vectors * e.vectors.transpose();
        let a = mode_covariance(&c, &proj, Mode::Column).unwrap();
        let b = mode_scatter_with_basis(&c, &e.vectors, Mode::Column);
        assert!((a - b).amax() < 1e-12);
    }

    #[test]
    fn vectorized_spectrum_gram_route() {
        let stack = random_stack(4, 3, 3, 10);
        let (_, c) = center(&stack).unwrap();
        let s = vectorized_spectrum(&c).unwrap();
        assert_eq!(s.len(), 4);
        let y = c.vectorized();
        let full = sym_eigvals(&(y.transpose() * &y / 4.0)).unwrap();
        for i in 0..4 {
            assert!((s[i] - full[i]).abs() < 1e-12);
        }
        let top = vectorized_top_eigen(&c, 2).unwrap();
        let cov = y.transpose() * &y / 4.0;
        for j in 0..2 {
            let v = top.vectors.column(j);
            assert!((&cov * v - v * top.values[j]).norm() < 1e-10);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn mode_covariance_psd_and_trace_match(seed in 0u64..10_000, n in 2usize..6, p in 1usize..5, q in 1usize..5) {
                let stack = random_stack(n, p, q, seed);
                let (_, c) = center(&stack).unwrap();
                let col = mode_covariance(&c, &DMatrix::identity(q, q), Mode::Column).unwrap();
                let row = mode_covariance(&c, &DMatrix::identity(p, p), Mode::Row).unwrap();
                let tr = c.mean_energy();
                prop_assert!((col.trace() - tr).abs() <= 1e-10 * tr.max(1e-300));
                prop_assert!((row.trace() - tr).abs() <= 1e-10 * tr.max(1e-300));
                let vals = sym_eigvals(&col).unwrap();
                prop_assert!(vals.iter().all(|v| *v >= -1e-10 * tr));
            }
        }
    }
}
