//! Compositional part models with spatial priors for weakly-supervised
//! amodal instance segmentation.
//!
//! Feature maps are unit-norm grids on a fixed representation lattice. Each
//! class holds `M` pose mixtures of foreground and context coefficients over
//! a vMF kernel dictionary plus a per-cell spatial prior. Segmentation
//! compares foreground, context and outlier explanations per cell.
//!
//! Coordinates: `x` is the row axis and `y` the column axis throughout.

pub mod cluster;
pub mod config;
pub mod context;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod math;
pub mod model;
pub mod pipeline;
pub mod prior;
pub mod segmentation;
pub mod synth;
pub mod tensor;
pub mod training;
pub mod vmf;

pub use config::RunConfig;
pub use dataset::{TrainingExample, TrainingState};
pub use error::{Error, FormatError, Result};
pub use eval::{evaluate, iou, EvalRecord, EvalReport};
pub use geometry::{align_partial, complete_amodal_box, AlignOptions, Alignment, CenterMode, Scoring};
pub use model::{ClassModel, CombinedRepresentation, Lattice, Mixture, ModelFile, ModelSet, OutlierCombine, OutlierModel};
pub use pipeline::{Prediction, Segmenter, Supervision};
pub use prior::{refine_priors_em, EmHistory, EmOptions, PriorGrid};
pub use segmentation::{amodal_segment, modal_segment, MaskSet, Segmentation};
pub use synth::{Manifest, SceneRecord, World, WorldSpec};
pub use tensor::{BBox, FeatureMap, Frame, Label, LabelGrid};
pub use training::{LossHistory, ParamView, TrainConfig};
pub use vmf::{Responses, VmfDictionary};
