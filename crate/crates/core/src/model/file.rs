//! The MODEL document: one self-describing JSON file per trained model set.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::context::ContextDictionary;
use crate::error::{Error, Result};
use crate::vmf::VmfDictionary;

use super::{ClassModel, Lattice, Mixture, ModelSet, OutlierModel};

pub const MODEL_FILE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureRecord {
    /// `R_H x R_W x K`.
    pub fg_coeffs: Vec<Vec<Vec<f64>>>,
    pub ctx_coeffs: Vec<Vec<Vec<f64>>>,
    /// `R_H x R_W`.
    pub prior: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassRecord {
    pub class_id: usize,
    pub mixtures: Vec<MixtureRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextRecord {
    pub class_id: usize,
    pub e: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub version: u32,
    pub config_hash: String,
    pub lattice: Lattice,
    #[serde(rename = "K")]
    pub k: usize,
    pub sigma: f64,
    #[serde(rename = "M")]
    pub m: usize,
    pub epsilon: f64,
    pub mu: Vec<Vec<f64>>,
    pub context: Vec<ContextRecord>,
    pub classes: Vec<ClassRecord>,
    pub outliers: OutlierModel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<usize>,
}

fn to_grid3(flat: &[f64], lattice: Lattice, k: usize) -> Vec<Vec<Vec<f64>>> {
    flat.chunks_exact(lattice.width * k)
        .map(|row| row.chunks_exact(k).map(|c| c.to_vec()).collect())
        .collect()
}

fn to_grid2(flat: &[f64], lattice: Lattice) -> Vec<Vec<f64>> {
    flat.chunks_exact(lattice.width).map(|r| r.to_vec()).collect()
}

fn flatten3(grid: &[Vec<Vec<f64>>], lattice: Lattice, k: usize, what: &str) -> Result<Vec<f64>> {
    let ok = grid.len() == lattice.height
        && grid
            .iter()
            .all(|row| row.len() == lattice.width && row.iter().all(|c| c.len() == k));
    if !ok {
        return Err(Error::InvalidDimensions(format!(
            "{what} must be {}x{}x{k}",
            lattice.height, lattice.width
        )));
    }
    Ok(grid.iter().flatten().flatten().copied().collect())
}

impl ModelFile {
    pub fn from_models(models: &ModelSet, config_hash: &str, epoch: Option<usize>) -> Self {
        let lattice = models.lattice;
        let k = models.kernels();
        Self {
            version: MODEL_FILE_VERSION,
            config_hash: config_hash.to_string(),
            lattice,
            k,
            sigma: models.dictionary.sigma(),
            m: models.mixtures(),
            epsilon: models.epsilon,
            mu: models.dictionary.means().to_vec(),
            context: models
                .contexts
                .iter()
                .zip(&models.classes)
                .map(|(c, cls)| ContextRecord {
                    class_id: cls.class_id,
                    e: c.centers.clone(),
                })
                .collect(),
            classes: models
                .classes
                .iter()
                .map(|c| ClassRecord {
                    class_id: c.class_id,
                    mixtures: c
                        .mixtures
                        .iter()
                        .map(|mix| MixtureRecord {
                            fg_coeffs: to_grid3(&mix.fg, lattice, k),
                            ctx_coeffs: to_grid3(&mix.ctx, lattice, k),
                            prior: to_grid2(&mix.prior, lattice),
                        })
                        .collect(),
                })
                .collect(),
            outliers: models.outliers.clone(),
            epoch,
        }
    }

    pub fn into_models(self) -> Result<ModelSet> {
        if self.version != MODEL_FILE_VERSION {
            return Err(Error::Config(format!(
                "MODEL version {} (expected {MODEL_FILE_VERSION})",
                self.version
            )));
        }
        let dictionary = VmfDictionary::new(self.mu, self.sigma)?;
        if dictionary.kernels() != self.k {
            return Err(Error::DimensionMismatch {
                expected: self.k,
                found: dictionary.kernels(),
            });
        }
        let lattice = self.lattice;
        let mut classes = Vec::with_capacity(self.classes.len());
        for c in self.classes {
            if c.mixtures.len() != self.m {
                return Err(Error::DimensionMismatch {
                    expected: self.m,
                    found: c.mixtures.len(),
                });
            }
            let mixtures = c
                .mixtures
                .into_iter()
                .map(|mix| {
                    let prior_ok = mix.prior.len() == lattice.height
                        && mix.prior.iter().all(|r| r.len() == lattice.width);
                    if !prior_ok {
                        return Err(Error::InvalidDimensions("prior grid".into()));
                    }
                    Ok(Mixture {
                        fg: flatten3(&mix.fg_coeffs, lattice, self.k, "fg_coeffs")?,
                        ctx: flatten3(&mix.ctx_coeffs, lattice, self.k, "ctx_coeffs")?,
                        prior: mix.prior.into_iter().flatten().collect(),
                    })
                })
                .collect::<Result<_>>()?;
            classes.push(ClassModel {
                class_id: c.class_id,
                lattice,
                kernels: self.k,
                mixtures,
            });
        }
        let contexts = self
            .context
            .into_iter()
            .map(|c| ContextDictionary::new(c.e))
            .collect::<Result<_>>()?;
        let models = ModelSet {
            lattice,
            epsilon: self.epsilon,
            dictionary,
            classes,
            contexts,
            outliers: self.outliers,
        };
        models.validate()?;
        Ok(models)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut s = serde_json::to_string(self)?;
        s.push('\n');
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}
