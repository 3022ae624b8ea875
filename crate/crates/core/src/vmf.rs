//! von Mises-Fisher kernel dictionary.
//!
//! All likelihoods here omit the normalizer `log Z(sigma)`. The concentration
//! is shared by every kernel, so the constant cancels in each likelihood ratio
//! and argmax computed downstream. Compare against other implementations with
//! the same convention.

use serde::{Deserialize, Serialize};

use crate::cluster::{kmeans, Metric, DEFAULT_MAX_ITERS};
use crate::error::{Error, Result};
use crate::math::rng;
use crate::tensor::{dot, normalize_with_tolerance, FeatureMap};

pub const DEFAULT_CONCENTRATION: f64 = 65.0;

/// Tolerance used when (re-)normalizing kernel means.
pub const MEAN_NORM_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VmfDictionary {
    means: Vec<Vec<f64>>,
    sigma: f64,
}

impl VmfDictionary {
    pub fn new(means: Vec<Vec<f64>>, sigma: f64) -> Result<Self> {
        if means.is_empty() {
            return Err(Error::Empty("vMF dictionary"));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Config(format!("concentration must be positive, got {sigma}")));
        }
        let dim = means[0].len();
        if dim < 2 {
            return Err(Error::InvalidDimensions(format!("kernel dimension {dim}")));
        }
        let means = means
            .into_iter()
            .map(|m| {
                if m.len() != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        found: m.len(),
                    });
                }
                normalize_with_tolerance(&m, MEAN_NORM_TOLERANCE)
            })
            .collect::<Result<_>>()?;
        Ok(Self { means, sigma })
    }

    pub fn kernels(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn mean(&self, k: usize) -> &[f64] {
        &self.means[k]
    }

    /// Replaces the means (re-normalized); used by the optimizer.
    pub fn set_means(&mut self, means: Vec<Vec<f64>>) -> Result<()> {
        *self = Self::new(means, self.sigma)?;
        Ok(())
    }

    /// `sigma * mu_k^T f`.
    pub fn log_likelihood(&self, f: &[f64], k: usize) -> Result<f64> {
        let mu = self.means.get(k).ok_or(Error::IndexOutOfRange {
            index: k,
            len: self.means.len(),
        })?;
        if f.len() != mu.len() {
            return Err(Error::DimensionMismatch {
                expected: mu.len(),
                found: f.len(),
            });
        }
        Ok(self.sigma * dot(mu, f))
    }

    /// Log-likelihoods of `f` under every kernel, written into `out`.
    #[inline]
    pub fn log_likelihoods_into(&self, f: &[f64], out: &mut [f64]) {
        for (o, mu) in out.iter_mut().zip(&self.means) {
            *o = self.sigma * dot(mu, f);
        }
    }

    /// Per-cell log-likelihoods for a whole map.
    pub fn responses(&self, map: &FeatureMap) -> Result<Responses> {
        if map.depth() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: map.depth(),
            });
        }
        let k = self.kernels();
        let mut values = vec![0.0; map.cells() * k];
        for (cell, out) in map.iter_cells().zip(values.chunks_exact_mut(k)) {
            self.log_likelihoods_into(cell, out);
        }
        Ok(Responses {
            height: map.height(),
            width: map.width(),
            kernels: k,
            values,
        })
    }
}

/// Per-cell kernel log-likelihoods `sigma * mu_k^T f_i` for one feature map.
///
/// This is the working form of every likelihood computation; a map is
/// projected once and then scored against any number of models.
#[derive(Debug, Clone, PartialEq)]
pub struct Responses {
    pub height: usize,
    pub width: usize,
    pub kernels: usize,
    pub values: Vec<f64>,
}

impl Responses {
    #[inline]
    pub fn cell(&self, index: usize) -> &[f64] {
        &self.values[index * self.kernels..(index + 1) * self.kernels]
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> &[f64] {
        self.cell(row * self.width + col)
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    /// Posterior over kernels with uniform mixing weights, per cell.
    pub fn posteriors(&self) -> Vec<f64> {
        let mut out = self.values.clone();
        for cell in out.chunks_exact_mut(self.kernels) {
            crate::math::softmax_in_place(cell);
        }
        out
    }

    /// Adds `shift` to every log-likelihood (a change of the dropped
    /// normalizer).
    pub fn shifted(&self, shift: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v + shift).collect(),
            ..self.clone()
        }
    }

    /// Sub-rectangle of the lattice.
    pub fn crop(&self, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Self {
        let mut values = Vec::with_capacity(rows.len() * cols.len() * self.kernels);
        for r in rows.clone() {
            for c in cols.clone() {
                values.extend_from_slice(self.at(r, c));
            }
        }
        Self {
            height: rows.len(),
            width: cols.len(),
            kernels: self.kernels,
            values,
        }
    }
}

/// vMF activations rescaled so the best attainable value is 1:
/// `exp(sigma * mu_k^T f - sigma)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMap {
    pub height: usize,
    pub width: usize,
    pub kernels: usize,
    pub values: Vec<f64>,
}

impl ActivationMap {
    pub fn get(&self, row: usize, col: usize, k: usize) -> f64 {
        self.values[(row * self.width + col) * self.kernels + k]
    }

    pub fn cell(&self, index: usize) -> &[f64] {
        &self.values[index * self.kernels..(index + 1) * self.kernels]
    }
}

pub fn activation_map(map: &FeatureMap, dict: &VmfDictionary) -> Result<ActivationMap> {
    let r = dict.responses(map)?;
    let sigma = dict.sigma();
    Ok(ActivationMap {
        height: r.height,
        width: r.width,
        kernels: r.kernels,
        values: r.values.iter().map(|v| (v - sigma).exp()).collect(),
    })
}

/// Spherical k-means with k-means++ seeding over unit feature samples.
pub fn init_dictionary(samples: &[Vec<f64>], k: usize, sigma: f64, seed: u64) -> Result<VmfDictionary> {
    if samples.len() < k {
        return Err(Error::InsufficientSamples {
            needed: k,
            got: samples.len(),
        });
    }
    let res = kmeans(samples, k, Metric::Cosine, DEFAULT_MAX_ITERS, &mut rng(seed))?;
    VmfDictionary::new(res.centers, sigma)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dict() -> VmfDictionary {
        VmfDictionary::new(
            vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]],
            65.0,
        )
        .unwrap()
    }

    #[test]
    fn log_likelihood_examples() {
        let d = dict();
        assert_eq!(d.log_likelihood(&[1.0, 0.0, 0.0], 0).unwrap(), 65.0);
        assert_eq!(d.log_likelihood(&[0.0, 1.0, 0.0], 0).unwrap(), 0.0);
        assert_eq!(d.log_likelihood(&[-1.0, 0.0, 0.0], 0).unwrap(), -65.0);
        assert!(matches!(
            d.log_likelihood(&[1.0, 0.0, 0.0], 3),
            Err(Error::IndexOutOfRange { index: 3, len: 3 })
        ));
    }

    #[test]
    fn activation_peaks_at_one() {
        let d = dict();
        let map = FeatureMap::new(1, 2, 3, vec![0.0, 0.0, 1.0, 0.6, 0.8, 0.0]).unwrap();
        let a = activation_map(&map, &d).unwrap();
        assert_eq!(a.get(0, 0, 2), 1.0);
        assert!(a.values.iter().all(|&v| v > 0.0 && v <= 1.0));
        let bad = FeatureMap::new(1, 1, 2, vec![1.0, 0.0]).unwrap();
        assert!(activation_map(&bad, &d).is_err());
    }

    #[test]
    fn too_few_samples() {
        assert!(init_dictionary(&[vec![1.0, 0.0]], 2, 65.0, 0).is_err());
    }
}
