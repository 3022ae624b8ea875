//! Context feature centers and the cosine-threshold foreground test used to
//! bootstrap spatial priors.

use serde::{Deserialize, Serialize};

use crate::cluster::{kmeans, Metric, DEFAULT_MAX_ITERS};
use crate::error::{Error, Result};
use crate::math::rng;
use crate::tensor::{dot, normalize, Label};

/// A feature is foreground when its best cosine to any context center is
/// strictly below this value.
pub const CONTEXT_COSINE_THRESHOLD: f64 = 0.5;

pub const DEFAULT_CONTEXT_CENTERS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextDictionary {
    pub centers: Vec<Vec<f64>>,
}

impl ContextDictionary {
    pub fn new(centers: Vec<Vec<f64>>) -> Result<Self> {
        if centers.is_empty() {
            return Err(Error::Empty("context dictionary"));
        }
        if centers
            .iter()
            .any(|c| c.iter().any(|x| !x.is_finite()) || dot(c, c) == 0.0)
        {
            return Err(Error::Config("context centers must be finite and nonzero".into()));
        }
        Ok(Self { centers })
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    /// Largest cosine similarity between `f` and any center.
    pub fn max_cosine(&self, f: &[f64]) -> f64 {
        let nf = dot(f, f).sqrt();
        self.centers
            .iter()
            .map(|e| dot(e, f) / (dot(e, e).sqrt() * nf))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// k-means (k-means++ seeding, Euclidean) over unit-normalized samples drawn
/// from outside the annotated boxes.
pub fn learn_context_dictionary(samples: &[Vec<f64>], q: usize, seed: u64) -> Result<ContextDictionary> {
    if samples.len() < q {
        return Err(Error::InsufficientSamples {
            needed: q,
            got: samples.len(),
        });
    }
    let unit: Vec<Vec<f64>> = samples.iter().map(|s| normalize(s)).collect::<Result<_>>()?;
    let res = kmeans(&unit, q, Metric::Euclidean, DEFAULT_MAX_ITERS, &mut rng(seed))?;
    ContextDictionary::new(res.centers)
}

/// Foreground iff `max_q cos(e_q, f) < 0.5`, context otherwise.
pub fn classify_context(f: &[f64], dict: &ContextDictionary) -> Label {
    if dict.max_cosine(f) < CONTEXT_COSINE_THRESHOLD {
        Label::Foreground
    } else {
        Label::Context
    }
}
