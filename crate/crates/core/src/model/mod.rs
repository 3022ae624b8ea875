//! Per-class compositional representation: foreground coefficients `A`,
//! context coefficients `chi` and a spatial prior for each of `M` pose
//! mixtures, on a fixed representation lattice.

mod estimate;
mod file;
mod likelihood;

pub use estimate::{
    estimate_coefficients, init_mixture_assignment, learn_outlier_models, CoefficientEstimate,
};
pub(crate) use estimate::refit_coefficients;
pub use file::{ModelFile, MODEL_FILE_VERSION};
pub use likelihood::{
    cell_log_likelihood, classify, classify_responses, map_log_likelihood,
    map_log_likelihood_responses, position_log_likelihood, prior_weighted_log_likelihood,
    prior_weighted_terms, Classification,
};

use serde::{Deserialize, Serialize};

use crate::context::ContextDictionary;
use crate::error::{Error, Result};
use crate::math::weighted_log_sum_exp;
use crate::vmf::VmfDictionary;

pub const DEFAULT_MIXTURES: usize = 8;
pub const DEFAULT_EPSILON: f64 = 1e-3;
pub const DEFAULT_OUTLIER_MODELS: usize = 5;
pub const DEFAULT_LATTICE: usize = 28;
pub const SIMPLEX_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lattice {
    pub height: usize,
    pub width: usize,
}

impl Lattice {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    /// Geometric center in continuous lattice coordinates.
    pub fn center(&self) -> (f64, f64) {
        (self.height as f64 / 2.0, self.width as f64 / 2.0)
    }

    pub fn check(&self, height: usize, width: usize) -> Result<()> {
        if height != self.height || width != self.width {
            return Err(Error::LatticeMismatch {
                expected_h: self.height,
                expected_w: self.width,
                found_h: height,
                found_w: width,
            });
        }
        Ok(())
    }
}

/// One pose mixture: per-cell simplex vectors for foreground and context,
/// and the per-cell foreground prior.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    /// `cells x K`, row-major cells.
    pub fg: Vec<f64>,
    /// `cells x K`.
    pub ctx: Vec<f64>,
    /// `cells`, values in `[eps, 1 - eps]`.
    pub prior: Vec<f64>,
}

impl Mixture {
    pub fn uniform(cells: usize, kernels: usize, prior: f64) -> Self {
        let u = 1.0 / kernels as f64;
        Self {
            fg: vec![u; cells * kernels],
            ctx: vec![u; cells * kernels],
            prior: vec![prior; cells],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassModel {
    pub class_id: usize,
    pub lattice: Lattice,
    pub kernels: usize,
    pub mixtures: Vec<Mixture>,
}

impl ClassModel {
    pub fn mixture_count(&self) -> usize {
        self.mixtures.len()
    }

    #[inline]
    pub fn fg(&self, m: usize, cell: usize) -> &[f64] {
        &self.mixtures[m].fg[cell * self.kernels..(cell + 1) * self.kernels]
    }

    #[inline]
    pub fn ctx(&self, m: usize, cell: usize) -> &[f64] {
        &self.mixtures[m].ctx[cell * self.kernels..(cell + 1) * self.kernels]
    }

    #[inline]
    pub fn prior(&self, m: usize, cell: usize) -> f64 {
        self.mixtures[m].prior[cell]
    }

    /// Copy with every prior replaced by the constant `omega`.
    pub fn with_constant_prior(&self, omega: f64) -> Self {
        let mut out = self.clone();
        for mix in &mut out.mixtures {
            mix.prior.fill(omega);
        }
        out
    }

    /// `Psi^m = p * A^m + (1 - p) * chi^m`, per cell.
    pub fn combined(&self) -> CombinedRepresentation {
        let k = self.kernels;
        let psi = self
            .mixtures
            .iter()
            .map(|mix| {
                let mut out = vec![0.0; mix.fg.len()];
                for (cell, &p) in mix.prior.iter().enumerate() {
                    for j in cell * k..(cell + 1) * k {
                        out[j] = p * mix.fg[j] + (1.0 - p) * mix.ctx[j];
                    }
                }
                out
            })
            .collect();
        CombinedRepresentation {
            lattice: self.lattice,
            kernels: k,
            psi,
        }
    }

    /// Checks the simplex and prior-range invariants.
    pub fn validate(&self, epsilon: f64) -> Result<()> {
        let cells = self.lattice.cells();
        for (m, mix) in self.mixtures.iter().enumerate() {
            if mix.fg.len() != cells * self.kernels
                || mix.ctx.len() != cells * self.kernels
                || mix.prior.len() != cells
            {
                return Err(Error::InvalidDimensions(format!(
                    "class {} mixture {m} arrays do not match the lattice",
                    self.class_id
                )));
            }
            for coeffs in [&mix.fg, &mix.ctx] {
                for cell in coeffs.chunks_exact(self.kernels) {
                    let s: f64 = cell.iter().sum();
                    if (s - 1.0).abs() > SIMPLEX_TOLERANCE || cell.iter().any(|&c| c < 0.0) {
                        return Err(Error::Config(format!(
                            "class {} mixture {m}: coefficients off the simplex (sum {s})",
                            self.class_id
                        )));
                    }
                }
            }
            if mix
                .prior
                .iter()
                .any(|&p| !(p >= epsilon - 1e-15 && p <= 1.0 - epsilon + 1e-15))
            {
                return Err(Error::Config(format!(
                    "class {} mixture {m}: prior outside [eps, 1 - eps]",
                    self.class_id
                )));
            }
        }
        Ok(())
    }
}

/// Prior-weighted blend of foreground and context coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinedRepresentation {
    pub lattice: Lattice,
    pub kernels: usize,
    pub psi: Vec<Vec<f64>>,
}

impl CombinedRepresentation {
    #[inline]
    pub fn cell(&self, m: usize, cell: usize) -> &[f64] {
        &self.psi[m][cell * self.kernels..(cell + 1) * self.kernels]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutlierCombine {
    /// Best single outlier model.
    #[default]
    Max,
    /// Uniform mixture of the outlier models.
    Mixture,
}

/// Position-independent outlier likelihood: `n` simplex vectors over the
/// kernel dictionary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierModel {
    pub models: Vec<Vec<f64>>,
    #[serde(default)]
    pub combine: OutlierCombine,
}

impl OutlierModel {
    /// Outlier log-likelihood of a cell given its kernel responses.
    #[inline]
    pub fn log_likelihood(&self, responses: &[f64]) -> f64 {
        let mut best = f64::NEG_INFINITY;
        let mut acc = f64::NEG_INFINITY;
        for o in &self.models {
            let ll = weighted_log_sum_exp(o, responses);
            best = best.max(ll);
            acc = crate::math::log_add_exp(acc, ll);
        }
        match self.combine {
            OutlierCombine::Max => best,
            OutlierCombine::Mixture => acc - (self.models.len() as f64).ln(),
        }
    }
}

/// Everything a segmentation run needs: kernels, per-class models and
/// context dictionaries, and the outlier model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSet {
    pub lattice: Lattice,
    pub epsilon: f64,
    pub dictionary: VmfDictionary,
    pub classes: Vec<ClassModel>,
    pub contexts: Vec<ContextDictionary>,
    pub outliers: OutlierModel,
}

impl ModelSet {
    pub fn kernels(&self) -> usize {
        self.dictionary.kernels()
    }

    pub fn mixtures(&self) -> usize {
        self.classes.first().map_or(0, |c| c.mixtures.len())
    }

    pub fn validate(&self) -> Result<()> {
        for c in &self.classes {
            self.lattice.check(c.lattice.height, c.lattice.width)?;
            if c.kernels != self.kernels() {
                return Err(Error::DimensionMismatch {
                    expected: self.kernels(),
                    found: c.kernels,
                });
            }
            c.validate(self.epsilon)?;
        }
        for o in &self.outliers.models {
            if o.len() != self.kernels() {
                return Err(Error::DimensionMismatch {
                    expected: self.kernels(),
                    found: o.len(),
                });
            }
        }
        Ok(())
    }

    /// Copy whose priors are all `omega` (the no-prior ablation).
    pub fn with_constant_prior(&self, omega: f64) -> Self {
        Self {
            classes: self.classes.iter().map(|c| c.with_constant_prior(omega)).collect(),
            ..self.clone()
        }
    }
}
