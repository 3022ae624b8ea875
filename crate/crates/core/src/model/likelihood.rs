use crate::error::{Error, Result};
use crate::math::{ln_guarded, log_add_exp, weighted_log_sum_exp};
use crate::tensor::FeatureMap;
use crate::vmf::{Responses, VmfDictionary};

use super::ClassModel;

/// `ln sum_k coeffs_k exp(responses_k)`.
#[inline]
pub fn cell_log_likelihood(coeffs: &[f64], responses: &[f64]) -> f64 {
    weighted_log_sum_exp(coeffs, responses)
}

/// Mixture log-likelihood of a unit feature under simplex coefficients.
pub fn position_log_likelihood(f: &[f64], coeffs: &[f64], dict: &VmfDictionary) -> Result<f64> {
    if coeffs.len() != dict.kernels() {
        return Err(Error::DimensionMismatch {
            expected: dict.kernels(),
            found: coeffs.len(),
        });
    }
    if f.len() != dict.dim() {
        return Err(Error::DimensionMismatch {
            expected: dict.dim(),
            found: f.len(),
        });
    }
    let mut r = vec![0.0; dict.kernels()];
    dict.log_likelihoods_into(f, &mut r);
    Ok(cell_log_likelihood(coeffs, &r))
}

/// The two prior-weighted log terms of a cell:
/// `(ln p + ln p(f|A), ln(1 - p) + ln p(f|chi))`.
#[inline]
pub fn prior_weighted_terms(responses: &[f64], cell: usize, m: usize, model: &ClassModel) -> (f64, f64) {
    let p = model.prior(m, cell);
    let fg = ln_guarded(p) + cell_log_likelihood(model.fg(m, cell), responses);
    let ctx = ln_guarded(1.0 - p) + cell_log_likelihood(model.ctx(m, cell), responses);
    (fg, ctx)
}

pub fn prior_weighted_log_likelihood(
    f: &[f64],
    row: usize,
    col: usize,
    m: usize,
    model: &ClassModel,
    dict: &VmfDictionary,
) -> Result<(f64, f64)> {
    if row >= model.lattice.height || col >= model.lattice.width {
        return Err(Error::IndexOutOfRange {
            index: row * model.lattice.width + col,
            len: model.lattice.cells(),
        });
    }
    if m >= model.mixtures.len() {
        return Err(Error::IndexOutOfRange {
            index: m,
            len: model.mixtures.len(),
        });
    }
    if f.len() != dict.dim() {
        return Err(Error::DimensionMismatch {
            expected: dict.dim(),
            found: f.len(),
        });
    }
    let mut r = vec![0.0; dict.kernels()];
    dict.log_likelihoods_into(f, &mut r);
    Ok(prior_weighted_terms(&r, row * model.lattice.width + col, m, model))
}

/// Sum over cells of the log of the prior-weighted two-component mixture.
pub fn map_log_likelihood_responses(responses: &Responses, m: usize, model: &ClassModel) -> f64 {
    (0..responses.cells())
        .map(|i| {
            let (fg, ctx) = prior_weighted_terms(responses.cell(i), i, m, model);
            log_add_exp(fg, ctx)
        })
        .sum()
}

pub fn map_log_likelihood(
    map: &FeatureMap,
    m: usize,
    model: &ClassModel,
    dict: &VmfDictionary,
) -> Result<f64> {
    model.lattice.check(map.height(), map.width())?;
    if m >= model.mixtures.len() {
        return Err(Error::IndexOutOfRange {
            index: m,
            len: model.mixtures.len(),
        });
    }
    let r = dict.responses(map)?;
    Ok(map_log_likelihood_responses(&r, m, model))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Classification {
    /// Position in the model slice.
    pub class_index: usize,
    pub class_id: usize,
    pub mixture: usize,
    pub score: f64,
}

/// Hard argmax over `(class, mixture)`; ties go to the lowest index pair.
pub fn classify_responses(responses: &Responses, models: &[ClassModel]) -> Result<Classification> {
    let mut best: Option<Classification> = None;
    for (ci, model) in models.iter().enumerate() {
        model.lattice.check(responses.height, responses.width)?;
        for m in 0..model.mixtures.len() {
            let score = map_log_likelihood_responses(responses, m, model);
            if best.is_none_or(|b| score > b.score) {
                best = Some(Classification {
                    class_index: ci,
                    class_id: model.class_id,
                    mixture: m,
                    score,
                });
            }
        }
    }
    best.ok_or(Error::Empty("model set"))
}

pub fn classify(map: &FeatureMap, models: &[ClassModel], dict: &VmfDictionary) -> Result<Classification> {
    if models.is_empty() {
        return Err(Error::Empty("model set"));
    }
    classify_responses(&dict.responses(map)?, models)
}
