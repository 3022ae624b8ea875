//! Spatial priors `p(i | m, y)`: learning from per-image labels and the
//! classification-EM refinement loop.
//!
//! The loop maximizes the complete-data objective
//! `J = sum_images sum_cells ln(term selected by z_i)` where the two terms are
//! `ln p + ln p(f|A)` and `ln(1 - p) + ln p(f|chi)`. Each iteration runs, in
//! order: reassignment of images to mixtures, relabeling by the likelihood
//! ratio, prior re-estimation, and (optionally) one EM step on the
//! coefficients. With clamping disabled every step is a maximizer given the
//! others, so `J` never decreases.

use serde::{Deserialize, Serialize};

use crate::dataset::{project, TrainingExample, TrainingState};
use crate::error::{Error, Result};
use crate::model::{prior_weighted_terms, ClassModel, ModelSet};
use crate::tensor::{Label, LabelGrid};
use crate::vmf::Responses;

pub const DEFAULT_MAX_ITERS: usize = 10;
pub const DEFAULT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct PriorGrid {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub epsilon: f64,
}

/// Fraction of images with `z_i = 1` at each cell, clamped to
/// `[eps, 1 - eps]`.
pub fn learn_prior(labels: &[&LabelGrid], epsilon: f64) -> Result<PriorGrid> {
    let first = labels.first().ok_or(Error::Empty("prior label set"))?;
    let (h, w) = (first.height(), first.width());
    let mut counts = vec![0usize; h * w];
    for (i, g) in labels.iter().enumerate() {
        if g.height() != h || g.width() != w {
            return Err(Error::LatticeMismatch {
                expected_h: h,
                expected_w: w,
                found_h: g.height(),
                found_w: g.width(),
            });
        }
        if g.labels().contains(&Label::Occluded) {
            return Err(Error::OccludedInTraining(i));
        }
        for (c, &l) in counts.iter_mut().zip(g.labels()) {
            if l == Label::Foreground {
                *c += 1;
            }
        }
    }
    let n = labels.len() as f64;
    let values = counts
        .iter()
        .map(|&c| (c as f64 / n).clamp(epsilon, 1.0 - epsilon))
        .collect();
    Ok(PriorGrid {
        height: h,
        width: w,
        values,
        epsilon,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmOptions {
    pub max_iters: usize,
    /// Stop once the relative objective improvement falls below this.
    pub tolerance: f64,
    /// Re-estimate coefficients inside the loop.
    pub refit_coeffs: bool,
    /// Prior clamp; 0 disables clamping. Taken from the model set's
    /// configuration, not from the serialized options.
    #[serde(skip)]
    pub epsilon: f64,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            max_iters: DEFAULT_MAX_ITERS,
            tolerance: DEFAULT_TOLERANCE,
            refit_coeffs: true,
            epsilon: crate::model::DEFAULT_EPSILON,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmIteration {
    pub iteration: usize,
    pub objective: f64,
    pub label_changes: usize,
    pub assignment_changes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmHistory {
    /// Objective of the incoming state.
    pub initial_objective: f64,
    pub iterations: Vec<EmIteration>,
    pub converged: bool,
}

impl EmHistory {
    pub fn objectives(&self) -> Vec<f64> {
        std::iter::once(self.initial_objective)
            .chain(self.iterations.iter().map(|i| i.objective))
            .collect()
    }

    /// `iteration,objective,label_changes,assignment_changes` rows, with
    /// iteration 0 for the incoming state.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,objective,label_changes,assignment_changes\n");
        s.push_str(&format!("0,{},0,0\n", self.initial_objective));
        for it in &self.iterations {
            s.push_str(&format!(
                "{},{},{},{}\n",
                it.iteration, it.objective, it.label_changes, it.assignment_changes
            ));
        }
        s
    }
}

/// Complete-data objective of one image under mixture `m` and labels `z`.
pub fn image_objective(responses: &Responses, labels: &LabelGrid, m: usize, model: &ClassModel) -> f64 {
    labels
        .labels()
        .iter()
        .enumerate()
        .map(|(i, &z)| {
            let (fg, ctx) = prior_weighted_terms(responses.cell(i), i, m, model);
            if z == Label::Foreground {
                fg
            } else {
                ctx
            }
        })
        .sum()
}

/// Total complete-data objective of a training state.
pub fn cem_objective(
    examples: &[TrainingExample],
    responses: &[Responses],
    models: &ModelSet,
    state: &TrainingState,
) -> f64 {
    examples
        .iter()
        .zip(responses)
        .enumerate()
        .map(|(n, (e, r))| {
            image_objective(r, &state.labels[n], state.assignments[n], &models.classes[e.class_index])
        })
        .sum()
}

/// Profile score of an image under mixture `m` (labels maximized out, cells
/// outside the box fixed to context) together with the maximizing labels.
fn best_labels(responses: &Responses, in_box: &[bool], m: usize, model: &ClassModel) -> (f64, Vec<Label>) {
    let mut score = 0.0;
    let labels = in_box
        .iter()
        .enumerate()
        .map(|(i, &inside)| {
            let (fg, ctx) = prior_weighted_terms(responses.cell(i), i, m, model);
            if inside && fg > ctx {
                score += fg;
                Label::Foreground
            } else {
                score += ctx;
                Label::Context
            }
        })
        .collect();
    (score, labels)
}

/// Classification-EM refinement of priors (and coefficients) for every class.
pub fn refine_priors_em(
    examples: &[TrainingExample],
    models: &mut ModelSet,
    state: &mut TrainingState,
    options: &EmOptions,
) -> Result<EmHistory> {
    if examples.len() != state.assignments.len() || examples.len() != state.labels.len() {
        return Err(Error::DimensionMismatch {
            expected: examples.len(),
            found: state.assignments.len(),
        });
    }
    for (i, l) in state.labels.iter().enumerate() {
        if l.labels().contains(&Label::Occluded) {
            return Err(Error::OccludedInTraining(i));
        }
    }
    let responses = project(examples, &models.dictionary)?;
    let boxes: Vec<Vec<bool>> = examples.iter().map(|e| e.box_mask()).collect();
    let eps = options.epsilon;
    let initial_objective = cem_objective(examples, &responses, models, state);
    let mut history = EmHistory {
        initial_objective,
        iterations: Vec::new(),
        converged: false,
    };
    let mut previous = initial_objective;

    for iteration in 1..=options.max_iters.max(1) {
        let mut label_changes = 0;
        let mut assignment_changes = 0;
        for (ci, model) in models.classes.iter_mut().enumerate() {
            let members: Vec<usize> = (0..examples.len())
                .filter(|&n| examples[n].class_index == ci)
                .collect();
            if members.is_empty() {
                continue;
            }
            // reassignment and relabeling
            for &n in &members {
                let mut best: Option<(f64, usize, Vec<Label>)> = None;
                for m in 0..model.mixtures.len() {
                    let (score, labels) = best_labels(&responses[n], &boxes[n], m, model);
                    if best.as_ref().is_none_or(|b| score > b.0) {
                        best = Some((score, m, labels));
                    }
                }
                let (_, m, labels) = best.unwrap();
                if m != state.assignments[n] {
                    assignment_changes += 1;
                    state.assignments[n] = m;
                }
                let grid = &mut state.labels[n];
                label_changes += grid.labels().iter().zip(&labels).filter(|(a, b)| a != b).count();
                *grid = LabelGrid::from_labels(grid.height(), grid.width(), labels)?;
            }
            // priors; empty mixtures keep their parameters
            for (m, mix) in model.mixtures.iter_mut().enumerate() {
                let grids: Vec<&LabelGrid> = members
                    .iter()
                    .filter(|&&n| state.assignments[n] == m)
                    .map(|&n| &state.labels[n])
                    .collect();
                if grids.is_empty() {
                    log::debug!("class {ci} mixture {m} empty at iteration {iteration}");
                    continue;
                }
                mix.prior = learn_prior(&grids, eps)?.values;
            }
            if options.refit_coeffs {
                let rs: Vec<&Responses> = members.iter().map(|&n| &responses[n]).collect();
                let asg: Vec<usize> = members.iter().map(|&n| state.assignments[n]).collect();
                let labs: Vec<&LabelGrid> = members.iter().map(|&n| &state.labels[n]).collect();
                crate::model::refit_coefficients(&mut model.mixtures, &rs, &asg, &labs);
            }
        }
        let objective = cem_objective(examples, &responses, models, state);
        history.iterations.push(EmIteration {
            iteration,
            objective,
            label_changes,
            assignment_changes,
        });
        let improvement = objective - previous;
        previous = objective;
        if (label_changes == 0 && assignment_changes == 0)
            || improvement.abs() < options.tolerance * objective.abs().max(1.0)
        {
            history.converged = true;
            break;
        }
    }
    models.epsilon = eps;
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(labels: &[i8]) -> LabelGrid {
        LabelGrid::from_labels(
            1,
            labels.len(),
            labels.iter().map(|&v| Label::from_value(v as i64).unwrap()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn expectation_and_clamp() {
        let a = grid(&[1, 1, 0]);
        let b = grid(&[1, 0, 0]);
        let p = learn_prior(&[&a, &b], 1e-3).unwrap();
        assert_eq!(p.values, vec![1.0 - 1e-3, 0.5, 1e-3]);
    }

    #[test]
    fn rejects_empty_and_occluded() {
        assert!(matches!(learn_prior(&[], 1e-3), Err(Error::Empty(_))));
        let occ = grid(&[1, -1]);
        assert!(matches!(learn_prior(&[&occ], 1e-3), Err(Error::OccludedInTraining(0))));
    }
}
