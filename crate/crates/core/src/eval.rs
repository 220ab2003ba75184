//! Reconstruction and clustering metrics, and a seeded replication harness
//! that aggregates per-method means and sample standard deviations.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::ImageStack;
use crate::synth::replicate_seed;

/// `sum_i ||vec(recon_i) - vec(truth_i)||^2 / (p q n)`.
pub fn mse(recon: &ImageStack, truth: &ImageStack) -> Result<f64> {
    let (p, q) = truth.dims();
    recon.check_dims(p, q)?;
    if recon.len() != truth.len() {
        return Err(Error::invalid(format!(
            "sample counts differ: {} vs {}",
            recon.len(),
            truth.len()
        )));
    }
    let sum: f64 = recon
        .samples()
        .iter()
        .zip(truth.samples())
        .map(|(a, b)| (a - b).norm_squared())
        .sum();
    Ok(sum / (p * q * truth.len()) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Psnr {
    Db(f64),
    /// `MSE = 0`: PSNR is unbounded.
    Perfect,
}

impl Psnr {
    pub fn db(self) -> Option<f64> {
        match self {
            Psnr::Db(v) => Some(v),
            Psnr::Perfect => None,
        }
    }
}

/// `10 log10(range^2 / MSE)`; `range` defaults to `max - min` of `truth`.
pub fn psnr(truth: &ImageStack, recon: &ImageStack, range: Option<f64>) -> Result<Psnr> {
    let range = match range {
        Some(r) => r,
        None => {
            let (lo, hi) = truth
                .samples()
                .iter()
                .flat_map(|m| m.iter())
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                    (lo.min(*v), hi.max(*v))
                });
            hi - lo
        }
    };
    if !(range > 0.0 && range.is_finite()) {
        return Err(Error::invalid(format!(
            "PSNR range must be positive, got {range}"
        )));
    }
    let e = mse(recon, truth)?;
    if e == 0.0 {
        return Ok(Psnr::Perfect);
    }
    Ok(Psnr::Db(10.0 * (range * range / e).log10()))
}

fn contingency(truth: &[usize], pred: &[usize]) -> Result<HashMap<(usize, usize), usize>> {
    if truth.len() != pred.len() {
        return Err(Error::invalid(format!(
            "label vectors differ in length: {} vs {}",
            truth.len(),
            pred.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::invalid("label vectors must not be empty"));
    }
    let mut table = HashMap::new();
    for (t, p) in truth.iter().zip(pred) {
        *table.entry((*t, *p)).or_insert(0) += 1;
    }
    Ok(table)
}

fn one_minus_best_share(table: &HashMap<(usize, usize), usize>, n: usize, by_pred: bool) -> f64 {
    let mut best: HashMap<usize, usize> = HashMap::new();
    for (&(t, p), &count) in table {
        let key = if by_pred { p } else { t };
        let slot = best.entry(key).or_insert(0);
        *slot = (*slot).max(count);
    }
    1.0 - best.values().sum::<usize>() as f64 / n as f64
}

/// `1 - n^-1 sum_j max_i |c_i & w_j|`: zero when every predicted cluster is pure.
pub fn impurity(truth: &[usize], pred: &[usize]) -> Result<f64> {
    let table = contingency(truth, pred)?;
    Ok(one_minus_best_share(&table, truth.len(), true))
}

/// `1 - n^-1 sum_i max_j |c_i & w_j|`: zero when every true class lands in one cluster.
pub fn c_impurity(truth: &[usize], pred: &[usize]) -> Result<f64> {
    let table = contingency(truth, pred)?;
    Ok(one_minus_best_share(&table, truth.len(), false))
}

/// Mean, sample standard deviation and counts for one method in one setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub reps: usize,
    pub failures: usize,
}

impl Summary {
    pub fn from_values(values: &[f64], failures: usize) -> Self {
        let k = values.len();
        let mean = if k == 0 {
            f64::NAN
        } else {
            values.iter().sum::<f64>() / k as f64
        };
        let std = if k < 2 {
            f64::NAN
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1) as f64).sqrt()
        };
        Self {
            mean,
            std,
            reps: k,
            failures,
        }
    }
}

/// Outcome of one replicate: a value per method name.
pub type ReplicateValues = Vec<(String, f64)>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateTable {
    pub setting: String,
    pub base_seed: u64,
    /// Per-replicate values keyed by method, in replicate order.
    pub values: BTreeMap<String, Vec<f64>>,
    /// `(replicate index, message)` for replicates that failed.
    pub failures: Vec<(usize, String)>,
}

impl ReplicateTable {
    pub fn summary(&self, method: &str) -> Option<Summary> {
        self.values
            .get(method)
            .map(|v| Summary::from_values(v, self.failures.len()))
    }

    pub fn methods(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(|s| s.as_str())
    }

    pub fn csv_header() -> &'static str {
        "setting,method,mean,std,reps,failures"
    }

    /// One row per method, without header.
    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        for m in self.methods() {
            let s = self.summary(m).expect("method present");
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                self.setting, m, s.mean, s.std, s.reps, s.failures
            );
        }
        out
    }
}

/// Runs `reps` replicates of `experiment`, each fed the derived seed for its
/// index. Failures are recorded per replicate and do not abort the batch.
/// Results do not depend on scheduling order.
pub fn replicate<F>(
    setting: &str,
    base_seed: u64,
    reps: usize,
    experiment: F,
) -> Result<ReplicateTable>
where
    F: Fn(u64) -> Result<ReplicateValues> + Sync,
{
    if reps < 2 {
        return Err(Error::invalid("replication needs at least 2 replicates"));
    }
    let outcomes: Vec<Result<ReplicateValues>> = (0..reps)
        .into_par_iter()
        .map(|i| experiment(replicate_seed(base_seed, i as u64)))
        .collect();
    let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut failures = Vec::new();
    for (i, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(vals) => {
                for (name, v) in vals {
                    values.entry(name).or_default().push(v);
                }
            }
            Err(e) => failures.push((i, e.to_string())),
        }
    }
    Ok(ReplicateTable {
        setting: setting.to_string(),
        base_seed,
        values,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn random_stack(seed: u64, n: usize) -> ImageStack {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        ImageStack::new(
            (0..n)
                .map(|_| DMatrix::from_fn(3, 4, |_, _| rng.random_range(-1.0..1.0)))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn mse_examples() {
        let t = random_stack(1, 5);
        assert_eq!(mse(&t, &t).unwrap(), 0.0);
        let shifted =
            ImageStack::new(t.samples().iter().map(|m| m.add_scalar(0.1)).collect()).unwrap();
        assert!((mse(&shifted, &t).unwrap() - 0.01).abs() < 1e-12);
        let r = random_stack(2, 5);
        let (a, b) = (r.to_row_major(), t.to_row_major());
        let naive = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / a.len() as f64;
        assert!((mse(&r, &t).unwrap() - naive).abs() < 1e-12);
        assert_eq!(mse(&r, &t).unwrap(), mse(&t, &r).unwrap());
        assert!(mse(&random_stack(3, 4), &t).is_err());
    }

    #[test]
    fn psnr_examples() {
        let truth = ImageStack::new(vec![DMatrix::zeros(2, 2)]).unwrap();
        let recon = ImageStack::new(vec![DMatrix::from_element(2, 2, 0.1)]).unwrap();
        assert!((psnr(&truth, &recon, Some(1.0)).unwrap().db().unwrap() - 20.0).abs() < 1e-9);
        let recon2 = ImageStack::new(vec![DMatrix::from_element(2, 2, 0.1 / 2f64.sqrt())]).unwrap();
        let gain = psnr(&truth, &recon2, Some(1.0)).unwrap().db().unwrap() - 20.0;
        assert!((gain - 10.0 * 2f64.log10()).abs() < 1e-9);
        assert_eq!(psnr(&truth, &truth, Some(1.0)).unwrap(), Psnr::Perfect);
        assert!(psnr(&truth, &recon, None).is_err());
    }

    #[test]
    fn impurity_examples() {
        let t = vec![0, 0, 1, 1];
        assert_eq!(impurity(&t, &t).unwrap(), 0.0);
        assert_eq!(c_impurity(&t, &t).unwrap(), 0.0);
        let one = vec![7; 4];
        assert_eq!(impurity(&t, &one).unwrap(), 0.5);
        assert_eq!(c_impurity(&t, &one).unwrap(), 0.0);
        let each = vec![0, 1, 2, 3];
        assert_eq!(impurity(&t, &each).unwrap(), 0.0);
        assert_eq!(c_impurity(&t, &each).unwrap(), 1.0 - 2.0 / 4.0);
        assert!(impurity(&t, &[0]).is_err());
        assert!(impurity(&[], &[]).is_err());
    }

    #[test]
    fn replicate_is_deterministic_and_records_failures() {
        let run = |seed: u64| -> Result<ReplicateValues> {
            if seed.is_multiple_of(5) {
                return Err(Error::DegenerateData("bad seed".into()));
            }
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            Ok(vec![("a".into(), rng.random()), ("b".into(), 0.0)])
        };
        let t1 = replicate("demo", 9, 20, run).unwrap();
        let t2 = replicate("demo", 9, 20, run).unwrap();
        assert_eq!(t1, t2);
        let b = t1.summary("b").unwrap();
        assert_eq!((b.mean, b.std), (0.0, 0.0));
        assert_eq!(b.reps + t1.failures.len(), 20);
        assert!(t1.csv_rows().lines().count() == 2);
        assert!(replicate("x", 0, 1, run).is_err());
    }

    #[test]
    fn sample_std() {
        let s = Summary::from_values(&[1.0, 2.0, 3.0, 4.0], 0);
        assert_eq!(s.mean, 2.5);
        assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn bounds_and_relabel_invariance(
                labels in proptest::collection::vec((0usize..5, 0usize..6), 1..60),
                shift in 1usize..20,
            ) {
                let (t, p): (Vec<usize>, Vec<usize>) = labels.into_iter().unzip();
                let i = impurity(&t, &p).unwrap();
                let c = c_impurity(&t, &p).unwrap();
                prop_assert!((0.0..=1.0).contains(&i) && (0.0..=1.0).contains(&c));
                let p2: Vec<usize> = p.iter().map(|l| (l * 7 + shift) % 1000).collect();
                let t2: Vec<usize> = t.iter().map(|l| l + shift).collect();
                prop_assert_eq!(impurity(&t2, &p2).unwrap(), i);
                prop_assert_eq!(c_impurity(&t2, &p2).unwrap(), c);
            }
        }
    }
}
