//! End-to-end wiring: model initialization from box-labeled maps, prior
//! refinement, and per-proposal segmentation.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::context::{classify_context, learn_context_dictionary};
use crate::dataset::{project, TrainingExample, TrainingState};
use crate::error::{Error, Result};
use crate::eval::EvalRecord;
use crate::geometry::{align_partial, complete_amodal_box, object_center, AlignOptions, Alignment, CenterMode, FrameTransform};
use crate::math::{derive_seed, rng};
use crate::model::{
    estimate_coefficients, init_mixture_assignment, learn_outlier_models, ClassModel, CombinedRepresentation, Mixture,
    ModelSet,
};
use crate::prior::{learn_prior, refine_priors_em, EmHistory};
use crate::segmentation::amodal_segment_responses;
use crate::synth::{generate_world, make_backgrounds, make_benchmark, make_training_set, SceneRecord, World};
use crate::tensor::{BBox, FeatureMap, Frame, Label, LabelGrid};
use crate::vmf::{init_dictionary, Responses};

/// Context samples drawn per class for the context dictionary.
pub const CONTEXT_SAMPLES: usize = 2000;

/// Builds training examples from `(map, class_id, modal box)` triples. Class
/// ids map to indices in sorted order; the boxes are taken in lattice units.
pub fn examples_from_records(records: &[(FeatureMap, usize, BBox)]) -> Result<(Vec<TrainingExample>, Vec<usize>)> {
    let mut ids: Vec<usize> = records.iter().map(|r| r.1).collect();
    ids.sort_unstable();
    ids.dedup();
    let examples = records
        .iter()
        .map(|(map, id, b)| {
            let idx = ids.binary_search(id).expect("id collected above");
            let rep = BBox::new(b.cx, b.cy, b.h, b.w, Frame::Representation)?;
            TrainingExample::new(map.clone(), idx, rep)
        })
        .collect::<Result<_>>()?;
    Ok((examples, ids))
}

fn draw(pool: &[&[f64]], n: usize, seed: u64) -> Vec<Vec<f64>> {
    if pool.len() <= n {
        return pool.iter().map(|c| c.to_vec()).collect();
    }
    let mut idx = sample(&mut rng(seed), pool.len(), n).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| pool[i].to_vec()).collect()
}

/// Initial labels: cells outside the box are context; inside, a cell is
/// foreground unless it is close to a context center.
pub fn initial_labels(example: &TrainingExample, context: &crate::context::ContextDictionary) -> Result<LabelGrid> {
    let inside = example.box_mask();
    let labels = example
        .map
        .iter_cells()
        .zip(&inside)
        .map(|(f, &b)| if b { classify_context(f, context) } else { Label::Context })
        .collect();
    LabelGrid::from_labels(example.map.height(), example.map.width(), labels)
}

/// Dictionary, context centers, initial labels and pose clusters,
/// coefficients, priors and the outlier model.
pub fn initialize(
    examples: &[TrainingExample],
    class_ids: &[usize],
    background: &[FeatureMap],
    cfg: &RunConfig,
) -> Result<(ModelSet, TrainingState)> {
    if examples.is_empty() {
        return Err(Error::Empty("training maps"));
    }
    for e in examples {
        cfg.lattice.check(e.map.height(), e.map.width())?;
    }
    let seed = cfg.seed;
    let pool: Vec<&[f64]> = examples.iter().flat_map(|e| e.map.iter_cells()).collect();
    let samples = draw(&pool, cfg.dictionary_samples, derive_seed(seed, &[10]));
    let dictionary = init_dictionary(&samples, cfg.kernels, cfg.sigma, derive_seed(seed, &[11]))?;
    let responses = project(examples, &dictionary)?;
    let masks: Vec<Vec<bool>> = examples.iter().map(|e| e.box_mask()).collect();

    let mut contexts = Vec::with_capacity(class_ids.len());
    let mut classes = Vec::with_capacity(class_ids.len());
    let mut labels: Vec<Option<LabelGrid>> = vec![None; examples.len()];
    let mut assignments = vec![0usize; examples.len()];
    for (ci, &class_id) in class_ids.iter().enumerate() {
        let members: Vec<usize> = (0..examples.len()).filter(|&n| examples[n].class_index == ci).collect();
        if members.is_empty() {
            return Err(Error::Empty("class without training maps"));
        }
        let outside: Vec<&[f64]> = members
            .iter()
            .flat_map(|&n| {
                examples[n]
                    .map
                    .iter_cells()
                    .zip(&masks[n])
                    .filter(|(_, &b)| !b)
                    .map(|(f, _)| f)
            })
            .collect();
        let ctx_samples = draw(&outside, CONTEXT_SAMPLES, derive_seed(seed, &[12, ci as u64]));
        let context = learn_context_dictionary(&ctx_samples, cfg.context_centers, derive_seed(seed, &[13, ci as u64]))?;
        for &n in &members {
            labels[n] = Some(initial_labels(&examples[n], &context)?);
        }
        contexts.push(context);

        let rs: Vec<&Responses> = members.iter().map(|&n| &responses[n]).collect();
        let labs: Vec<&LabelGrid> = members.iter().map(|&n| labels[n].as_ref().unwrap()).collect();
        let all = vec![true; cfg.lattice.cells()];
        let boxes: Vec<&[bool]> = members.iter().map(|_| all.as_slice()).collect();
        let asg = init_mixture_assignment(&rs, cfg.mixtures, derive_seed(seed, &[14, ci as u64]))?;
        let est = estimate_coefficients(&rs, &asg, &labs, &boxes, cfg.mixtures)?;
        let mut mixtures = Vec::with_capacity(cfg.mixtures);
        for m in 0..cfg.mixtures {
            let grids: Vec<&LabelGrid> = labs
                .iter()
                .zip(&est.assignment)
                .filter(|(_, &a)| a == m)
                .map(|(l, _)| *l)
                .collect();
            let prior = if grids.is_empty() {
                vec![0.5; cfg.lattice.cells()]
            } else {
                learn_prior(&grids, cfg.epsilon)?.values
            };
            mixtures.push(Mixture {
                fg: est.fg[m].clone(),
                ctx: est.ctx[m].clone(),
                prior,
            });
        }
        for (&n, &a) in members.iter().zip(&est.assignment) {
            assignments[n] = a;
        }
        classes.push(ClassModel {
            class_id,
            lattice: cfg.lattice,
            kernels: cfg.kernels,
            mixtures,
        });
    }
    if background.is_empty() {
        return Err(Error::Empty("background maps"));
    }
    let mut outliers = learn_outlier_models(background, cfg.outlier_models, &dictionary, derive_seed(seed, &[15]))?;
    outliers.combine = cfg.outlier_combine;
    let models = ModelSet {
        lattice: cfg.lattice,
        epsilon: cfg.epsilon,
        dictionary,
        classes,
        contexts,
        outliers,
    };
    models.validate()?;
    let state = TrainingState {
        assignments,
        labels: labels.into_iter().map(|l| l.expect("every example labeled")).collect(),
    };
    Ok((models, state))
}

/// Initialization followed by prior refinement.
pub fn fit(
    examples: &[TrainingExample],
    class_ids: &[usize],
    background: &[FeatureMap],
    cfg: &RunConfig,
) -> Result<(ModelSet, TrainingState, EmHistory)> {
    let (mut models, mut state) = initialize(examples, class_ids, background, cfg)?;
    let history = refine_priors_em(examples, &mut models, &mut state, &cfg.em_options())?;
    Ok((models, state, history))
}

/// A generated world with its training, benchmark and background sets.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub world: World,
    pub train: Vec<SceneRecord>,
    pub bench: Vec<SceneRecord>,
    pub backgrounds: Vec<FeatureMap>,
    pub examples: Vec<TrainingExample>,
    pub class_ids: Vec<usize>,
}

impl Fixture {
    /// Everything derives from `cfg.world` and `cfg.seed`.
    pub fn build(cfg: &RunConfig) -> Result<Self> {
        let world = generate_world(&cfg.world)?;
        let train = make_training_set(&world, cfg.data.train_per_class, derive_seed(cfg.seed, &[20]))?;
        let bench = make_benchmark(&world, cfg.data.per_level, derive_seed(cfg.seed, &[21]))?;
        let backgrounds = make_backgrounds(&world, cfg.data.background_maps, derive_seed(cfg.seed, &[22]))?;
        let records: Vec<(FeatureMap, usize, BBox)> =
            train.iter().map(|r| (r.map.clone(), r.class_id, r.modal_box)).collect();
        let (examples, class_ids) = examples_from_records(&records)?;
        Ok(Self {
            world,
            train,
            bench,
            backgrounds,
            examples,
            class_ids,
        })
    }

    pub fn gt_labels(&self) -> Vec<LabelGrid> {
        self.train.iter().map(|r| r.labels.clone()).collect()
    }

    pub fn eval_records(&self) -> Vec<EvalRecord> {
        self.bench
            .iter()
            .map(|r| EvalRecord {
                id: r.id.clone(),
                fg_level: r.fg_level,
                bg_level: r.bg_level,
                gt: r.labels.clone(),
            })
            .collect()
    }

    /// Mean IoU between each training image's thresholded prior (its
    /// assigned mixture) and the true pose template.
    pub fn prior_template_iou(&self, models: &ModelSet, state: &TrainingState) -> f64 {
        let total: f64 = self
            .train
            .iter()
            .enumerate()
            .map(|(n, r)| {
                let prior = &models.classes[self.examples[n].class_index].mixtures[state.assignments[n]].prior;
                let mask: Vec<bool> = prior.iter().map(|&p| p > 0.5).collect();
                crate::eval::iou(&mask, &self.world.template(r.class_id, r.pose).mask)
            })
            .sum();
        total / self.train.len().max(1) as f64
    }
}

/// Priors learned from ground-truth object masks under the given mixture
/// assignment; occluded cells count as object.
pub fn with_gt_priors(
    models: &ModelSet,
    examples: &[TrainingExample],
    assignments: &[usize],
    gt: &[LabelGrid],
) -> Result<ModelSet> {
    let mut out = models.clone();
    for (ci, class) in out.classes.iter_mut().enumerate() {
        for (m, mix) in class.mixtures.iter_mut().enumerate() {
            let grids: Vec<LabelGrid> = (0..examples.len())
                .filter(|&n| examples[n].class_index == ci && assignments[n] == m)
                .map(|n| {
                    let l = gt[n].labels().iter().map(|&l| if l == Label::Context { l } else { Label::Foreground });
                    LabelGrid::from_labels(gt[n].height(), gt[n].width(), l.collect())
                })
                .collect::<Result<_>>()?;
            if grids.is_empty() {
                continue;
            }
            let refs: Vec<&LabelGrid> = grids.iter().collect();
            mix.prior = learn_prior(&refs, models.epsilon)?.values;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Supervision {
    /// Only the visible box is given; the amodal box is completed.
    #[default]
    Modal,
    /// The amodal box is given and segmentation stays inside it.
    Amodal,
}

impl std::str::FromStr for Supervision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "modal" => Ok(Self::Modal),
            "amodal" => Ok(Self::Amodal),
            _ => Err(Error::Config(format!("unknown supervision mode {s:?}"))),
        }
    }
}

/// Segmentation of one proposal at image-lattice resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub labels: LabelGrid,
    /// Foreground posterior per image cell; zero outside the window.
    pub posterior: Vec<f64>,
    pub alignment: Alignment,
    /// Representation cell = image cell + this translation.
    pub image_to_rep: (isize, isize),
    /// Amodal box in the image frame (completed or given), clipped.
    pub amodal_box: BBox,
    pub clipped: bool,
}

impl Prediction {
    pub fn predicted_class(&self) -> usize {
        self.alignment.class_id
    }
}

/// Immutable models plus their combined representations.
#[derive(Debug, Clone)]
pub struct Segmenter {
    pub models: ModelSet,
    pub combined: Vec<CombinedRepresentation>,
    pub align: AlignOptions,
    pub center: CenterMode,
}

fn cell_box(rows: &std::ops::Range<usize>, cols: &std::ops::Range<usize>) -> Result<BBox> {
    BBox::from_edges(rows.start as f64, rows.end as f64, cols.start as f64, cols.end as f64, Frame::Image)
}

impl Segmenter {
    pub fn new(models: ModelSet, cfg: &RunConfig) -> Self {
        let combined = models.classes.iter().map(|c| c.combined()).collect();
        Self {
            models,
            combined,
            align: AlignOptions {
                stride: cfg.align.stride,
                scoring: cfg.align.scoring,
                fixed: None,
            },
            center: cfg.align.center,
        }
    }

    /// Aligns the crop of `responses` given by `proposal` (image frame).
    fn align(&self, responses: &Responses, proposal: &BBox, fixed_shift: Option<(isize, isize)>) -> Result<(Alignment, FrameTransform)> {
        let (rows, cols) = proposal.cell_ranges(responses.height, responses.width);
        if rows.is_empty() || cols.is_empty() {
            return Err(Error::InvalidBox(format!("proposal {:?} covers no cells", proposal.as_array())));
        }
        let crop = responses.crop(rows.clone(), cols.clone());
        let mut options = self.align;
        if let Some(t) = fixed_shift {
            let d = (
                rows.start as isize + t.0 + (crop.height / 2) as isize,
                cols.start as isize + t.1 + (crop.width / 2) as isize,
            );
            let lat = self.models.lattice;
            if d.0 < 0 || d.1 < 0 || d.0 as usize >= lat.height || d.1 as usize >= lat.width {
                return Err(Error::MisalignedWindow(format!("anchor lands at {d:?}")));
            }
            options.fixed = Some((d.0 as usize, d.1 as usize));
        }
        let alignment = align_partial(&crop, &self.models.classes, &self.combined, &options)?;
        let transform = FrameTransform::from_alignment(&alignment, crop.height, crop.width, &cell_box(&rows, &cols)?)?;
        Ok((alignment, transform))
    }

    /// Classify and align, complete the amodal box when only the modal box
    /// is known, then label every image cell inside the amodal box.
    pub fn segment(
        &self,
        map: &FeatureMap,
        modal_box: &BBox,
        amodal_box: Option<&BBox>,
        supervision: Supervision,
    ) -> Result<Prediction> {
        modal_box.expect_frame(Frame::Image)?;
        let responses = self.models.dictionary.responses(map)?;
        let (h, w) = (map.height(), map.width());
        let (alignment, transform, amodal, clipped) = match supervision {
            Supervision::Amodal => {
                let b = amodal_box.ok_or_else(|| Error::Config("amodal supervision needs an amodal box".into()))?;
                b.expect_frame(Frame::Image)?;
                let c = self.models.lattice.center();
                let t = ((c.0 - b.cx).round() as isize, (c.1 - b.cy).round() as isize);
                let (alignment, transform) = self.align(&responses, b, Some(t))?;
                let (b, clipped) = b.clipped(h as f64, w as f64)?;
                (alignment, transform, b, clipped)
            }
            Supervision::Modal => {
                let (alignment, transform) = self.align(&responses, modal_box, None)?;
                let model = &self.models.classes[alignment.class_index];
                let center = object_center(model, alignment.mixture, self.center);
                let rep = complete_amodal_box(&transform.to_representation(modal_box)?, center)?;
                let (b, clipped) = crate::geometry::to_image_frame(&rep, &transform, h as f64, w as f64)?;
                (alignment, transform, b, clipped)
            }
        };
        if transform.row_scale != 1.0 || transform.col_scale != 1.0 {
            return Err(Error::MisalignedWindow("proposal resampling is not supported".into()));
        }
        let t = (-transform.row_offset.round() as isize, -transform.col_offset.round() as isize);
        let lat = self.models.lattice;
        let (rows, cols) = amodal.cell_ranges(h, w);
        let clamp = |r: std::ops::Range<usize>, off: isize, n: usize| {
            let lo = (r.start as isize).max(-off).max(0) as usize;
            let hi = ((r.end as isize).min(n as isize - off)).max(lo as isize) as usize;
            lo..hi
        };
        let rows = clamp(rows, t.0, lat.height);
        let cols = clamp(cols, t.1, lat.width);
        let mut labels = LabelGrid::filled(h, w, Label::Context);
        let mut posterior = vec![0.0; h * w];
        if !rows.is_empty() && !cols.is_empty() {
            let window = responses.crop(rows.clone(), cols.clone());
            let origin = (rows.start as isize + t.0, cols.start as isize + t.1);
            let seg = amodal_segment_responses(
                &window,
                origin,
                alignment.mixture,
                &self.models.classes[alignment.class_index],
                &self.models.outliers,
            )?;
            for (a, r) in rows.clone().enumerate() {
                for (b, c) in cols.clone().enumerate() {
                    labels.set(r, c, seg.labels.get(a, b));
                    posterior[r * w + c] = seg.masks.posterior[a * window.width + b];
                }
            }
        }
        Ok(Prediction {
            labels,
            posterior,
            alignment,
            image_to_rep: t,
            amodal_box: amodal,
            clipped,
        })
    }
}
