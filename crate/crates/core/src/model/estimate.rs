use crate::cluster::{kmeans, Metric, DEFAULT_MAX_ITERS};
use crate::error::{Error, Result};
use crate::math::rng;
use crate::tensor::{FeatureMap, Label, LabelGrid};
use crate::vmf::{Responses, VmfDictionary};

use super::{Mixture, OutlierCombine, OutlierModel};

/// Initial pose clusters: k-means++ over flattened per-cell posteriors
/// (cell-normalized activations) of one class's training maps.
/// k-means runs per class; the lowest within-cluster cost wins.
pub const MIXTURE_RESTARTS: usize = 10;

pub fn init_mixture_assignment(responses: &[&Responses], mixtures: usize, seed: u64) -> Result<Vec<usize>> {
    if responses.len() < mixtures {
        return Err(Error::InsufficientSamples {
            needed: mixtures,
            got: responses.len(),
        });
    }
    if mixtures == 1 {
        return Ok(vec![0; responses.len()]);
    }
    let vectors: Vec<Vec<f64>> = responses.iter().map(|r| r.posteriors()).collect();
    let mut r = rng(seed);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..MIXTURE_RESTARTS {
        let res = kmeans(&vectors, mixtures, Metric::Euclidean, DEFAULT_MAX_ITERS, &mut r)?;
        let cost = res.objective_history.last().copied().unwrap_or(f64::INFINITY);
        if best.as_ref().is_none_or(|b| cost < b.0) {
            best = Some((cost, res.assignment));
        }
    }
    Ok(best.unwrap().1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientEstimate {
    /// Per mixture, `cells x K`.
    pub fg: Vec<Vec<f64>>,
    pub ctx: Vec<Vec<f64>>,
    /// Assignment after re-seeding empty mixtures.
    pub assignment: Vec<usize>,
    /// Mixtures that were empty and received a re-seeded image.
    pub reseeded: Vec<usize>,
}

/// Moves the member farthest from its cluster mean out of the largest cluster
/// into each empty mixture.
fn reseed_empty(assignment: &mut [usize], vectors: &[Vec<f64>], mixtures: usize) -> Vec<usize> {
    let mut reseeded = Vec::new();
    for empty in 0..mixtures {
        if assignment.contains(&empty) {
            continue;
        }
        let mut counts = vec![0usize; mixtures];
        for &a in assignment.iter() {
            counts[a] += 1;
        }
        let largest = (0..mixtures).max_by_key(|&m| (counts[m], std::cmp::Reverse(m))).unwrap();
        if counts[largest] < 2 {
            break;
        }
        let members: Vec<usize> = (0..assignment.len()).filter(|&i| assignment[i] == largest).collect();
        let dim = vectors[members[0]].len();
        let mut mean = vec![0.0; dim];
        for &i in &members {
            for (m, v) in mean.iter_mut().zip(&vectors[i]) {
                *m += v / members.len() as f64;
            }
        }
        let far = members
            .iter()
            .copied()
            .map(|i| {
                let d: f64 = vectors[i].iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum();
                (i, d)
            })
            .fold((members[0], f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc })
            .0;
        assignment[far] = empty;
        reseeded.push(empty);
    }
    reseeded
}

/// Per-cell normalized mean of uniform-weight kernel posteriors over the
/// images assigned to each mixture, split by label: foreground cells feed
/// `A`, context cells inside the image's box mask feed `chi`. Unsupported
/// cells get the uniform simplex point.
pub fn estimate_coefficients(
    responses: &[&Responses],
    assignment: &[usize],
    labels: &[&LabelGrid],
    in_box: &[&[bool]],
    mixtures: usize,
) -> Result<CoefficientEstimate> {
    if responses.is_empty() {
        return Err(Error::Empty("training maps"));
    }
    if responses.len() != assignment.len() || responses.len() != labels.len() || responses.len() != in_box.len() {
        return Err(Error::DimensionMismatch {
            expected: responses.len(),
            found: assignment.len().min(labels.len()).min(in_box.len()),
        });
    }
    let posteriors: Vec<Vec<f64>> = responses.iter().map(|r| r.posteriors()).collect();
    let mut assignment = assignment.to_vec();
    let reseeded = reseed_empty(&mut assignment, &posteriors, mixtures);
    if !reseeded.is_empty() {
        log::warn!("re-seeded empty mixtures {reseeded:?}");
    }
    let (h, w, k) = (responses[0].height, responses[0].width, responses[0].kernels);
    let cells = h * w;
    let mut fg = vec![vec![0.0; cells * k]; mixtures];
    let mut ctx = vec![vec![0.0; cells * k]; mixtures];
    for (((post, &m), lab), inside) in posteriors.iter().zip(&assignment).zip(labels).zip(in_box) {
        if lab.height() != h || lab.width() != w || inside.len() != cells {
            return Err(Error::LatticeMismatch {
                expected_h: h,
                expected_w: w,
                found_h: lab.height(),
                found_w: lab.width(),
            });
        }
        for (cell, &label) in lab.labels().iter().enumerate() {
            let target = match label {
                Label::Foreground => &mut fg[m],
                Label::Context if inside[cell] => &mut ctx[m],
                _ => continue,
            };
            for j in cell * k..(cell + 1) * k {
                target[j] += post[j];
            }
        }
    }
    for coeffs in fg.iter_mut().chain(ctx.iter_mut()) {
        normalize_cells(coeffs, k, None);
    }
    Ok(CoefficientEstimate {
        fg,
        ctx,
        assignment,
        reseeded,
    })
}

/// Divides each cell by its sum. Cells with zero mass take `fallback`'s cell
/// when given, the uniform point otherwise.
pub(crate) fn normalize_cells(coeffs: &mut [f64], k: usize, fallback: Option<&[f64]>) {
    for (cell, chunk) in coeffs.chunks_exact_mut(k).enumerate() {
        let s: f64 = chunk.iter().sum();
        if s > 0.0 {
            chunk.iter_mut().for_each(|c| *c /= s);
        } else if let Some(fb) = fallback {
            chunk.copy_from_slice(&fb[cell * k..(cell + 1) * k]);
        } else {
            chunk.fill(1.0 / k as f64);
        }
    }
}

/// One EM step for the mixture weights of every (mixture, cell): the
/// posterior uses the current coefficients as weights. Every labeled cell
/// contributes, matching the refinement objective. Cells without any
/// supporting image keep their current coefficients.
pub(crate) fn refit_coefficients(
    mixtures: &mut [Mixture],
    responses: &[&Responses],
    assignment: &[usize],
    labels: &[&LabelGrid],
) {
    let k = responses[0].kernels;
    let cells = responses[0].cells();
    let mut fg = vec![vec![0.0; cells * k]; mixtures.len()];
    let mut ctx = vec![vec![0.0; cells * k]; mixtures.len()];
    let mut post = vec![0.0; k];
    for ((r, &m), lab) in responses.iter().zip(assignment).zip(labels) {
        for (cell, &label) in lab.labels().iter().enumerate() {
            let (weights, target) = match label {
                Label::Foreground => (&mixtures[m].fg[cell * k..(cell + 1) * k], &mut fg[m]),
                Label::Context => (&mixtures[m].ctx[cell * k..(cell + 1) * k], &mut ctx[m]),
                Label::Occluded => continue,
            };
            let resp = r.cell(cell);
            let mx = weights
                .iter()
                .zip(resp)
                .filter(|(&w, _)| w > 0.0)
                .map(|(_, &v)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..k {
                post[j] = if weights[j] > 0.0 { weights[j] * (resp[j] - mx).exp() } else { 0.0 };
                total += post[j];
            }
            for j in 0..k {
                target[cell * k + j] += post[j] / total;
            }
        }
    }
    for (mix, (f, c)) in mixtures.iter_mut().zip(fg.iter_mut().zip(ctx.iter_mut())) {
        normalize_cells(f, k, Some(&mix.fg));
        normalize_cells(c, k, Some(&mix.ctx));
        mix.fg.copy_from_slice(f);
        mix.ctx.copy_from_slice(c);
    }
}

/// Clusters pooled background cells into `n` groups (spherical k-means on
/// the features); each outlier model is the normalized mean posterior of
/// its group.
pub fn learn_outlier_models(
    background: &[FeatureMap],
    n: usize,
    dict: &VmfDictionary,
    seed: u64,
) -> Result<OutlierModel> {
    let samples: Vec<Vec<f64>> = background
        .iter()
        .flat_map(|m| m.iter_cells().map(|c| c.to_vec()))
        .collect();
    if samples.len() < n {
        return Err(Error::InsufficientSamples {
            needed: n,
            got: samples.len(),
        });
    }
    let res = kmeans(&samples, n, Metric::Cosine, DEFAULT_MAX_ITERS, &mut rng(seed))?;
    let k = dict.kernels();
    let mut sums = vec![vec![0.0; k]; n];
    let mut r = vec![0.0; k];
    for (s, &a) in samples.iter().zip(&res.assignment) {
        if s.len() != dict.dim() {
            return Err(Error::DimensionMismatch {
                expected: dict.dim(),
                found: s.len(),
            });
        }
        dict.log_likelihoods_into(s, &mut r);
        crate::math::softmax_in_place(&mut r);
        for (acc, p) in sums[a].iter_mut().zip(&r) {
            *acc += p;
        }
    }
    for (j, sum) in sums.iter_mut().enumerate() {
        if sum.iter().sum::<f64>() == 0.0 {
            dict.log_likelihoods_into(&res.centers[j], &mut r);
            crate::math::softmax_in_place(&mut r);
            sum.copy_from_slice(&r);
        }
        let t: f64 = sum.iter().sum();
        sum.iter_mut().for_each(|v| *v /= t);
    }
    Ok(OutlierModel {
        models: sums,
        combine: OutlierCombine::Max,
    })
}
