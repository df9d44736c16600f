//! Clustering metrics and a finite-mixture EM reference fit.

use std::collections::HashMap;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::log_sum_exp;

/// Cluster assignments paired with ground-truth labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledAssignment {
    pub assignments: Vec<u64>,
    pub labels: Vec<u64>,
}

impl LabeledAssignment {
    pub fn new(assignments: Vec<u64>, labels: Vec<u64>) -> Result<Self> {
        if assignments.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} assignments but {} labels",
                assignments.len(),
                labels.len()
            )));
        }
        Ok(Self {
            assignments,
            labels,
        })
    }

    /// Majority label of every cluster; ties go to the smallest label.
    pub fn majority_labels(&self) -> HashMap<u64, u64> {
        let mut counts: HashMap<u64, HashMap<u64, usize>> = HashMap::new();
        for (&a, &l) in self.assignments.iter().zip(&self.labels) {
            *counts.entry(a).or_default().entry(l).or_default() += 1;
        }
        counts
            .into_iter()
            .map(|(cluster, hist)| {
                let best = hist
                    .into_iter()
                    .max_by(|x, y| x.1.cmp(&y.1).then(y.0.cmp(&x.0)))
                    .map(|(label, _)| label)
                    .unwrap_or_default();
                (cluster, best)
            })
            .collect()
    }
}

/// Unsupervised clustering accuracy, max over maps f: cluster → label of the
/// fraction with `label == f(cluster)`. With f unconstrained the optimum
/// sends every cluster to its majority label.
pub fn clustering_accuracy(la: &LabeledAssignment) -> Result<f64> {
    if la.assignments.len() != la.labels.len() {
        return Err(Error::Shape("assignment/label length mismatch".into()));
    }
    if la.labels.is_empty() {
        return Err(Error::Contract("accuracy of an empty assignment".into()));
    }
    let mut counts: HashMap<u64, HashMap<u64, usize>> = HashMap::new();
    for (&a, &l) in la.assignments.iter().zip(&la.labels) {
        *counts.entry(a).or_default().entry(l).or_default() += 1;
    }
    let correct: usize = counts
        .values()
        .map(|hist| hist.values().copied().max().unwrap_or(0))
        .sum();
    Ok(correct as f64 / la.labels.len() as f64)
}

/// k-nearest-neighbour misclassification rate of `test` against `train`.
///
/// Votes are counted per label; ties go to the label with the smaller mean
/// distance among its voters, then to the lower label id.
pub fn knn_error(
    train: ArrayView2<f64>,
    train_labels: &[u64],
    test: ArrayView2<f64>,
    test_labels: &[u64],
    k: usize,
) -> Result<f64> {
    if train.nrows() == 0 {
        return Err(Error::Contract("kNN needs a non-empty training set".into()));
    }
    if k == 0 || k > train.nrows() {
        return Err(Error::Contract(format!(
            "k = {k} must lie in 1..={}",
            train.nrows()
        )));
    }
    if train.nrows() != train_labels.len() || test.nrows() != test_labels.len() {
        return Err(Error::Shape("latent/label row counts differ".into()));
    }
    if train.ncols() != test.ncols() {
        return Err(Error::Shape("train and test latent widths differ".into()));
    }
    if test.nrows() == 0 {
        return Ok(0.0);
    }
    let mut wrong = 0usize;
    let mut dists: Vec<(f64, usize)> = Vec::with_capacity(train.nrows());
    for (q, &truth) in test.rows().into_iter().zip(test_labels) {
        dists.clear();
        for (i, t) in train.rows().into_iter().enumerate() {
            let d: f64 = q
                .iter()
                .zip(t.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            dists.push((d, i));
        }
        dists.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut votes: HashMap<u64, (usize, f64)> = HashMap::new();
        for &(d, i) in &dists[..k] {
            let e = votes.entry(train_labels[i]).or_insert((0, 0.0));
            e.0 += 1;
            e.1 += d;
        }
        let predicted = votes
            .into_iter()
            .min_by(|(la, (ca, sa)), (lb, (cb, sb))| {
                cb.cmp(ca)
                    .then((sa / *ca as f64).total_cmp(&(sb / *cb as f64)))
                    .then(la.cmp(lb))
            })
            .map(|(l, _)| l)
            .expect("k >= 1 neighbours");
        if predicted != truth {
            wrong += 1;
        }
    }
    Ok(wrong as f64 / test.nrows() as f64)
}

/// Result of a diagonal Gaussian mixture fit by EM.
#[derive(Debug, Clone)]
pub struct EmFit {
    pub means: Array2<f64>,
    pub variances: Array2<f64>,
    pub weights: Array1<f64>,
    pub responsibilities: Array2<f64>,
    /// Log-likelihood before each M-step.
    pub log_likelihoods: Vec<f64>,
}

const EM_VARIANCE_FLOOR: f64 = 1e-6;

/// Expectation-maximization for a K-component diagonal Gaussian mixture.
/// Means start at K distinct rows chosen with `seed`, variances at the
/// pooled per-dimension variance, weights uniform.
pub fn em_oracle(data: ArrayView2<f64>, k: usize, iters: usize, seed: u64) -> Result<EmFit> {
    let (n, d) = data.dim();
    if n == 0 {
        return Err(Error::Contract("EM on empty data".into()));
    }
    if k == 0 || k > n {
        return Err(Error::Contract(format!("K = {k} must lie in 1..={n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = sample(&mut rng, n, k).into_vec();
    picks.sort_unstable();
    let mut means = data.select(Axis(0), &picks);
    let pooled = data.var_axis(Axis(0), 0.0).mapv(|v| v.max(EM_VARIANCE_FLOOR));
    let mut variances = Array2::zeros((k, d));
    for mut row in variances.rows_mut() {
        row.assign(&pooled);
    }
    let mut weights = Array1::from_elem(k, 1.0 / k as f64);
    let mut resp = Array2::zeros((n, k));
    let mut log_likelihoods = Vec::with_capacity(iters);
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();

    for _ in 0..iters.max(1) {
        // E-step
        let mut total = 0.0;
        let mut logw = vec![0.0; k];
        for (i, x) in data.rows().into_iter().enumerate() {
            for c in 0..k {
                let mut lp = weights[c].ln();
                for j in 0..d {
                    let v = variances[(c, j)];
                    let diff = x[j] - means[(c, j)];
                    lp -= 0.5 * (ln_2pi + v.ln() + diff * diff / v);
                }
                logw[c] = lp;
            }
            let lse = log_sum_exp(&logw)?;
            total += lse;
            for c in 0..k {
                resp[(i, c)] = (logw[c] - lse).exp();
            }
        }
        log_likelihoods.push(total);
        // M-step
        let nk = resp.sum_axis(Axis(0));
        for c in 0..k {
            let mass = nk[c];
            weights[c] = mass / n as f64;
            if mass <= 0.0 {
                continue;
            }
            for j in 0..d {
                let mean = (0..n).map(|i| resp[(i, c)] * data[(i, j)]).sum::<f64>() / mass;
                let var = (0..n)
                    .map(|i| resp[(i, c)] * (data[(i, j)] - mean).powi(2))
                    .sum::<f64>()
                    / mass;
                means[(c, j)] = mean;
                variances[(c, j)] = var.max(EM_VARIANCE_FLOOR);
            }
        }
    }
    Ok(EmFit {
        means,
        variances,
        weights,
        responsibilities: resp,
        log_likelihoods,
    })
}
