//! Dirichlet-process mixture of diagonal Gaussians fit by coordinate-ascent
//! variational inference over memoized sufficient statistics.
//!
//! Each cluster carries a stick-breaking Beta factor and one Normal-Gamma
//! factor per dimension (the diagonal Normal-Wishart factorizes exactly into
//! these). The Normal-Gamma for dimension `d` of cluster `k` is
//!
//! ```text
//! τ_kd ~ Gamma(a_hat[k,d], b_hat[k,d])        (rate parameterization)
//! μ_kd | τ_kd ~ N(mu_hat[k,d], 1 / (lambda_hat[k] τ_kd))
//! ```

mod checkpoint;
mod inference;
mod stats;

pub use checkpoint::{load_checkpoint, save_checkpoint, DpmmCheckpoint};
pub use inference::{
    cluster_moments, elbo, expected_log_lik, expected_log_pi, global_step, init_model, local_step,
    soft_assign, summarize,
};
pub use stats::{Responsibilities, SufficientStats, ENTROPY_FLOOR};

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stable identifier of a mixture component across moves.
pub type ComponentId = u64;

/// Fixed prior hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpmmPrior {
    /// DP concentration α.
    pub alpha: f64,
    /// Prior mean μ₀; its length fixes the dimensionality.
    pub mu0: Vec<f64>,
    /// Prior precision scale λ.
    pub lambda_scale: f64,
    /// Prior expected per-dimension variance.
    pub s_f: f64,
    /// Degrees of freedom ν; the per-dimension Gamma shape is ν/2.
    pub nu: f64,
}

impl DpmmPrior {
    pub fn new(dim: usize, alpha: f64, lambda_scale: f64, s_f: f64, nu: f64) -> Result<Self> {
        let prior = Self {
            alpha,
            mu0: vec![0.0; dim],
            lambda_scale,
            s_f,
            nu,
        };
        prior.validate()?;
        Ok(prior)
    }

    pub fn dim(&self) -> usize {
        self.mu0.len()
    }

    pub fn a0(&self) -> f64 {
        0.5 * self.nu
    }

    pub fn b0(&self) -> f64 {
        0.5 * self.nu * self.s_f
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("prior {name} must be positive, got {v}")))
            }
        };
        positive("alpha", self.alpha)?;
        positive("lambda_scale", self.lambda_scale)?;
        positive("s_f", self.s_f)?;
        positive("nu", self.nu)?;
        if self.mu0.is_empty() {
            return Err(Error::Config("prior mean must have at least one dimension".into()));
        }
        if self.mu0.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("prior mean must be finite".into()));
        }
        Ok(())
    }
}

/// Beta(alpha1[k], alpha0[k]) factors of the stick-breaking proportions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StickPosterior {
    pub alpha1: Vec<f64>,
    pub alpha0: Vec<f64>,
}

impl StickPosterior {
    pub fn len(&self) -> usize {
        self.alpha1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha1.is_empty()
    }
}

/// Per-cluster, per-dimension Normal-Gamma factors.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalWishartPosterior {
    pub mu_hat: Array2<f64>,
    pub lambda_hat: Array1<f64>,
    pub a_hat: Array2<f64>,
    pub b_hat: Array2<f64>,
}

impl NormalWishartPosterior {
    fn from_prior(prior: &DpmmPrior, k: usize) -> Self {
        let d = prior.dim();
        let mu0 = Array1::from(prior.mu0.clone());
        let mut mu_hat = Array2::zeros((k, d));
        for mut row in mu_hat.rows_mut() {
            row.assign(&mu0);
        }
        Self {
            mu_hat,
            lambda_hat: Array1::from_elem(k, prior.lambda_scale),
            a_hat: Array2::from_elem((k, d), prior.a0()),
            b_hat: Array2::from_elem((k, d), prior.b0()),
        }
    }
}

/// Full variational posterior over the active clusters.
#[derive(Debug, Clone, PartialEq)]
pub struct DpmmModel {
    pub prior: DpmmPrior,
    pub stick: StickPosterior,
    pub nw: NormalWishartPosterior,
    pub component_ids: Vec<ComponentId>,
    next_component_id: ComponentId,
}

impl DpmmModel {
    /// `k` clusters, every factor equal to its prior.
    pub fn with_components(prior: DpmmPrior, k: usize) -> Result<Self> {
        prior.validate()?;
        if k == 0 {
            return Err(Error::Contract("a model needs at least one component".into()));
        }
        Ok(Self {
            stick: StickPosterior {
                alpha1: vec![1.0; k],
                alpha0: vec![prior.alpha; k],
            },
            nw: NormalWishartPosterior::from_prior(&prior, k),
            component_ids: (0..k as ComponentId).collect(),
            next_component_id: k as ComponentId,
            prior,
        })
    }

    pub fn k(&self) -> usize {
        self.component_ids.len()
    }

    pub fn dim(&self) -> usize {
        self.prior.dim()
    }

    pub fn next_component_id(&self) -> ComponentId {
        self.next_component_id
    }

    /// Index of the cluster currently holding `id`.
    pub fn index_of(&self, id: ComponentId) -> Option<usize> {
        self.component_ids.iter().position(|&c| c == id)
    }

    /// Append `extra` prior-valued clusters with freshly minted identifiers.
    pub fn append_components(&mut self, extra: usize) -> Vec<ComponentId> {
        let fresh = NormalWishartPosterior::from_prior(&self.prior, extra);
        self.stick.alpha1.extend(std::iter::repeat_n(1.0, extra));
        self.stick.alpha0.extend(std::iter::repeat_n(self.prior.alpha, extra));
        self.nw.mu_hat = concat_rows(&self.nw.mu_hat, &fresh.mu_hat);
        self.nw.a_hat = concat_rows(&self.nw.a_hat, &fresh.a_hat);
        self.nw.b_hat = concat_rows(&self.nw.b_hat, &fresh.b_hat);
        self.nw.lambda_hat = Array1::from_iter(
            self.nw
                .lambda_hat
                .iter()
                .copied()
                .chain(fresh.lambda_hat.iter().copied()),
        );
        let ids: Vec<ComponentId> =
            (self.next_component_id..self.next_component_id + extra as ComponentId).collect();
        self.next_component_id += extra as ComponentId;
        self.component_ids.extend_from_slice(&ids);
        ids
    }

    /// Keep only the clusters at `keep` (in that order). Retired identifiers
    /// are never reissued.
    pub fn select_components(&self, keep: &[usize]) -> Self {
        Self {
            prior: self.prior.clone(),
            stick: StickPosterior {
                alpha1: keep.iter().map(|&i| self.stick.alpha1[i]).collect(),
                alpha0: keep.iter().map(|&i| self.stick.alpha0[i]).collect(),
            },
            nw: NormalWishartPosterior {
                mu_hat: self.nw.mu_hat.select(Axis(0), keep),
                lambda_hat: self.nw.lambda_hat.select(Axis(0), keep),
                a_hat: self.nw.a_hat.select(Axis(0), keep),
                b_hat: self.nw.b_hat.select(Axis(0), keep),
            },
            component_ids: keep.iter().map(|&i| self.component_ids[i]).collect(),
            next_component_id: self.next_component_id,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        let d = self.dim();
        let shape_ok = self.stick.alpha1.len() == k
            && self.stick.alpha0.len() == k
            && self.nw.mu_hat.dim() == (k, d)
            && self.nw.a_hat.dim() == (k, d)
            && self.nw.b_hat.dim() == (k, d)
            && self.nw.lambda_hat.len() == k;
        if !shape_ok {
            return Err(Error::Shape(format!(
                "per-cluster arrays disagree with K = {k}, D = {d}"
            )));
        }
        let mut seen = std::collections::HashSet::new();
        if !self.component_ids.iter().all(|id| seen.insert(*id)) {
            return Err(Error::Contract("duplicate component identifiers".into()));
        }
        if self.component_ids.iter().any(|&id| id >= self.next_component_id) {
            return Err(Error::Contract("component identifier beyond mint counter".into()));
        }
        let positive = self.stick.alpha1.iter().all(|v| *v > 0.0)
            && self.stick.alpha0.iter().all(|v| *v > 0.0)
            && self.nw.a_hat.iter().all(|v| *v > 0.0)
            && self.nw.b_hat.iter().all(|v| *v > 0.0)
            && self.nw.lambda_hat.iter().all(|v| *v > 0.0);
        if !positive {
            return Err(Error::Degenerate("non-positive posterior parameter".into()));
        }
        Ok(())
    }
}

pub(crate) fn concat_rows(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    ndarray::concatenate(Axis(0), &[a.view(), b.view()]).expect("column counts agree")
}
