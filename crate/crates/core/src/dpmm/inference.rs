use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use super::stats::{Responsibilities, SufficientStats};
use super::{DpmmModel, DpmmPrior, StickPosterior};
use crate::error::{Error, Result};
use crate::numerics::{digamma, log_beta, log_gamma, LogWeightVector};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Fresh model with a single prior-valued cluster.
pub fn init_model(prior: DpmmPrior) -> Result<DpmmModel> {
    DpmmModel::with_components(prior, 1)
}

/// E_q[log π_k] = E[log β_k] + Σ_{j<k} E[log(1 − β_j)].
pub fn expected_log_pi(stick: &StickPosterior) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(stick.len());
    let mut remaining = 0.0;
    for (&a1, &a0) in stick.alpha1.iter().zip(&stick.alpha0) {
        let total = digamma(a1 + a0)?;
        out.push(digamma(a1)? - total + remaining);
        remaining += digamma(a0)? - total;
    }
    Ok(out)
}

/// Quantities of each cluster that the per-datum log-likelihood needs.
struct ClusterTerms {
    /// E_q[log π_k] + ½ Σ_d (E[log τ_kd] − log 2π − 1/λ̂_k)
    offset: Vec<f64>,
    /// E[τ_kd] = â/b̂
    e_tau: Array2<f64>,
}

impl ClusterTerms {
    fn new(model: &DpmmModel, include_log_pi: bool) -> Result<Self> {
        let k = model.k();
        let d = model.dim();
        let log_pi = if include_log_pi {
            expected_log_pi(&model.stick)?
        } else {
            vec![0.0; k]
        };
        let mut offset = Vec::with_capacity(k);
        let mut e_tau = Array2::zeros((k, d));
        for c in 0..k {
            let inv_lambda = 1.0 / model.nw.lambda_hat[c];
            let mut acc = 0.0;
            for j in 0..d {
                let a = model.nw.a_hat[(c, j)];
                let b = model.nw.b_hat[(c, j)];
                acc += digamma(a)? - b.ln() - LN_2PI - inv_lambda;
                e_tau[(c, j)] = a / b;
            }
            offset.push(log_pi[c] + 0.5 * acc);
        }
        Ok(Self { offset, e_tau })
    }

    fn log_weight(&self, model: &DpmmModel, x: ArrayView1<f64>, c: usize) -> f64 {
        let mu = model.nw.mu_hat.row(c);
        let tau = self.e_tau.row(c);
        let mut quad = 0.0;
        for j in 0..x.len() {
            let diff = x[j] - mu[j];
            quad += tau[j] * diff * diff;
        }
        self.offset[c] - 0.5 * quad
    }
}

/// E_q[log N(x | μ_k, Σ_k)] under the Normal-Gamma factors of cluster `k`.
pub fn expected_log_lik(x: &[f64], model: &DpmmModel, k: usize) -> Result<f64> {
    if k >= model.k() {
        return Err(Error::IndexOutOfRange {
            index: k,
            len: model.k(),
        });
    }
    check_dim(x.len(), model.dim())?;
    let mut total = 0.0;
    let inv_lambda = 1.0 / model.nw.lambda_hat[k];
    for (j, &xv) in x.iter().enumerate() {
        let a = model.nw.a_hat[(k, j)];
        let b = model.nw.b_hat[(k, j)];
        let diff = xv - model.nw.mu_hat[(k, j)];
        total += digamma(a)? - b.ln() - LN_2PI - (a / b) * diff * diff - inv_lambda;
    }
    Ok(0.5 * total)
}

fn check_dim(got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Shape(format!(
            "data has {got} columns, model dimension is {want}"
        )));
    }
    Ok(())
}

/// Local coordinate-ascent update: r_nk ∝ exp(E[log π_k] + E[log p(x_n | θ_k)]).
pub fn local_step(batch: ArrayView2<f64>, model: &DpmmModel) -> Result<Responsibilities> {
    if batch.nrows() == 0 {
        return Err(Error::Contract("local step on an empty batch".into()));
    }
    check_dim(batch.ncols(), model.dim())?;
    let terms = ClusterTerms::new(model, true)?;
    let k = model.k();
    let mut r = Array2::zeros((batch.nrows(), k));
    let mut weights = LogWeightVector::new(vec![0.0; k]);
    for (x, mut out) in batch.rows().into_iter().zip(r.rows_mut()) {
        for c in 0..k {
            weights.values[c] = terms.log_weight(model, x, c);
        }
        let probs = weights.probabilities()?;
        if probs.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numeric("responsibility is not finite".into()));
        }
        for (o, p) in out.iter_mut().zip(probs) {
            *o = p;
        }
    }
    Ok(Responsibilities { r })
}

/// Sufficient statistics of `batch` under `resp`.
pub fn summarize(batch: ArrayView2<f64>, resp: &Responsibilities) -> Result<SufficientStats> {
    if batch.nrows() != resp.rows() {
        return Err(Error::Shape(format!(
            "{} data rows but {} responsibility rows",
            batch.nrows(),
            resp.rows()
        )));
    }
    let mut stats = SufficientStats::zeros(resp.k(), batch.ncols());
    for (x, r) in batch.rows().into_iter().zip(resp.r.rows()) {
        stats.accumulate_row(x, r);
    }
    Ok(stats)
}

fn check_k(model: &DpmmModel, stats: &SufficientStats) -> Result<()> {
    if model.k() != stats.k() {
        return Err(Error::Shape(format!(
            "model has K = {} but stats have K = {}",
            model.k(),
            stats.k()
        )));
    }
    check_dim(stats.dim(), model.dim())
}

/// Global coordinate-ascent update: conjugate prior-plus-statistics posteriors.
pub fn global_step(model: &DpmmModel, stats: &SufficientStats) -> Result<DpmmModel> {
    check_k(model, stats)?;
    let prior = &model.prior;
    let k = model.k();
    let d = model.dim();
    let mut out = model.clone();

    let mut tail = 0.0;
    for c in (0..k).rev() {
        out.stick.alpha1[c] = 1.0 + stats.n_hat[c];
        out.stick.alpha0[c] = prior.alpha + tail;
        tail += stats.n_hat[c];
    }

    let lambda0 = prior.lambda_scale;
    let (a0, b0) = (prior.a0(), prior.b0());
    for c in 0..k {
        let n = stats.n_hat[c];
        let lambda = lambda0 + n;
        out.nw.lambda_hat[c] = lambda;
        for j in 0..d {
            let m0 = prior.mu0[j];
            let s1 = stats.s1[(c, j)];
            let s2 = stats.s2[(c, j)];
            let m = (lambda0 * m0 + s1) / lambda;
            out.nw.mu_hat[(c, j)] = m;
            out.nw.a_hat[(c, j)] = a0 + 0.5 * n;
            // b0 + ½ [Σ r (x − x̄)² + λ₀ N (x̄ − m₀)² / (λ₀ + N)] ≥ b0
            let b = b0 + 0.5 * (s2 + lambda0 * m0 * m0 - lambda * m * m);
            out.nw.b_hat[(c, j)] = b.max(b0);
        }
    }
    Ok(out)
}

fn kl_beta(a: f64, b: f64, a0: f64, b0: f64) -> Result<f64> {
    let total = digamma(a + b)?;
    Ok(log_beta(a0, b0)? - log_beta(a, b)?
        + (a - a0) * (digamma(a)? - total)
        + (b - b0) * (digamma(b)? - total))
}

/// KL of one Normal-Gamma factor against the prior Normal-Gamma.
fn kl_normal_gamma(
    m: f64,
    lambda: f64,
    a: f64,
    b: f64,
    m0: f64,
    lambda0: f64,
    a0: f64,
    b0: f64,
) -> Result<f64> {
    let gamma = (a - a0) * digamma(a)? - log_gamma(a)? + log_gamma(a0)?
        + a0 * (b.ln() - b0.ln())
        + a * (b0 - b) / b;
    let diff = m - m0;
    let normal = 0.5 * ((lambda / lambda0).ln() + lambda0 / lambda - 1.0 + lambda0 * (a / b) * diff * diff);
    Ok(gamma + normal)
}

/// Evidence lower bound from full-data summaries.
pub fn elbo(model: &DpmmModel, stats: &SufficientStats) -> Result<f64> {
    check_k(model, stats)?;
    let prior = &model.prior;
    let log_pi = expected_log_pi(&model.stick)?;
    let d = model.dim();
    let (a0, b0) = (prior.a0(), prior.b0());
    let mut total = stats.entropy();
    for c in 0..model.k() {
        let n = stats.n_hat[c];
        let lambda = model.nw.lambda_hat[c];
        let mut data = 0.0;
        let mut kl = kl_beta(model.stick.alpha1[c], model.stick.alpha0[c], 1.0, prior.alpha)?;
        for j in 0..d {
            let a = model.nw.a_hat[(c, j)];
            let b = model.nw.b_hat[(c, j)];
            let m = model.nw.mu_hat[(c, j)];
            let e_log_tau = digamma(a)? - b.ln();
            let sq = stats.s2[(c, j)] - 2.0 * m * stats.s1[(c, j)] + n * m * m;
            data += n * (e_log_tau - LN_2PI - 1.0 / lambda) - (a / b) * sq;
            kl += kl_normal_gamma(m, lambda, a, b, prior.mu0[j], prior.lambda_scale, a0, b0)?;
        }
        total += 0.5 * data + n * log_pi[c] - kl;
    }
    if !total.is_finite() {
        return Err(Error::Numeric(format!("ELBO evaluated to {total}")));
    }
    Ok(total)
}

/// Cluster probabilities for a single latent vector.
pub fn soft_assign(z: &[f64], model: &DpmmModel) -> Result<Vec<f64>> {
    check_dim(z.len(), model.dim())?;
    let view = ArrayView2::from_shape((1, z.len()), z).expect("row vector");
    let resp = local_step(view, model)?;
    Ok(resp.r.row(0).to_vec())
}

/// Posterior mean and posterior-expected variance b̂/(â − 1) of cluster `k`.
pub fn cluster_moments(model: &DpmmModel, k: usize) -> Result<(Array1<f64>, Array1<f64>)> {
    if k >= model.k() {
        return Err(Error::IndexOutOfRange {
            index: k,
            len: model.k(),
        });
    }
    let a = model.nw.a_hat.row(k);
    if let Some(bad) = a.iter().find(|&&v| v <= 1.0) {
        return Err(Error::Degenerate(format!(
            "cluster {k} has Gamma shape {bad} <= 1; expected variance undefined"
        )));
    }
    let var = Array1::from_iter(
        a.iter()
            .zip(model.nw.b_hat.row(k))
            .map(|(&a, &b)| b / (a - 1.0)),
    );
    Ok((model.nw.mu_hat.row(k).to_owned(), var))
}
