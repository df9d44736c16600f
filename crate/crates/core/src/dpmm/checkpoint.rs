//! Self-describing JSON checkpoint of a [`DpmmModel`].
//!
//! Floats are written in shortest round-trip form, so a save/load cycle is
//! bit-exact.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{ComponentId, DpmmModel, DpmmPrior, NormalWishartPosterior, StickPosterior};
use crate::error::{Error, Result};

const FORMAT: &str = "diva-dpmm";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRecord {
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

impl MatrixRecord {
    fn from_array(a: &Array2<f64>) -> Self {
        Self {
            shape: [a.nrows(), a.ncols()],
            data: a.iter().copied().collect(),
        }
    }

    fn to_array(&self, name: &str) -> Result<Array2<f64>> {
        Array2::from_shape_vec((self.shape[0], self.shape[1]), self.data.clone())
            .map_err(|e| Error::Parse(format!("{name}: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpmmCheckpoint {
    pub format: String,
    pub version: u32,
    pub prior: DpmmPrior,
    pub k: usize,
    pub dim: usize,
    pub component_ids: Vec<ComponentId>,
    pub next_component_id: ComponentId,
    pub stick_alpha1: Vec<f64>,
    pub stick_alpha0: Vec<f64>,
    pub mu_hat: MatrixRecord,
    pub lambda_hat: Vec<f64>,
    pub a_hat: MatrixRecord,
    pub b_hat: MatrixRecord,
}

impl From<&DpmmModel> for DpmmCheckpoint {
    fn from(m: &DpmmModel) -> Self {
        Self {
            format: FORMAT.to_string(),
            version: VERSION,
            prior: m.prior.clone(),
            k: m.k(),
            dim: m.dim(),
            component_ids: m.component_ids.clone(),
            next_component_id: m.next_component_id(),
            stick_alpha1: m.stick.alpha1.clone(),
            stick_alpha0: m.stick.alpha0.clone(),
            mu_hat: MatrixRecord::from_array(&m.nw.mu_hat),
            lambda_hat: m.nw.lambda_hat.to_vec(),
            a_hat: MatrixRecord::from_array(&m.nw.a_hat),
            b_hat: MatrixRecord::from_array(&m.nw.b_hat),
        }
    }
}

impl DpmmCheckpoint {
    pub fn into_model(self) -> Result<DpmmModel> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(Error::Parse(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let model = DpmmModel {
            prior: self.prior,
            stick: StickPosterior {
                alpha1: self.stick_alpha1,
                alpha0: self.stick_alpha0,
            },
            nw: NormalWishartPosterior {
                mu_hat: self.mu_hat.to_array("mu_hat")?,
                lambda_hat: Array1::from(self.lambda_hat),
                a_hat: self.a_hat.to_array("a_hat")?,
                b_hat: self.b_hat.to_array("b_hat")?,
            },
            component_ids: self.component_ids,
            next_component_id: self.next_component_id,
        };
        if model.k() != self.k || model.dim() != self.dim {
            return Err(Error::Parse(format!(
                "checkpoint declares K = {}, D = {} but holds K = {}, D = {}",
                self.k,
                self.dim,
                model.k(),
                model.dim()
            )));
        }
        model.validate()?;
        Ok(model)
    }
}

pub fn save_checkpoint(model: &DpmmModel, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(&DpmmCheckpoint::from(model))?;
    fs::write(path, json)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<DpmmModel> {
    let text = fs::read_to_string(path)?;
    let ckpt: DpmmCheckpoint = serde_json::from_str(&text)?;
    ckpt.into_model()
}
