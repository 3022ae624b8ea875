//! Run configuration: one JSON document, unknown keys rejected, every
//! default materialized.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{CenterMode, Scoring};
use crate::model::{Lattice, OutlierCombine};
use crate::prior::EmOptions;
use crate::synth::WorldSpec;
use crate::training::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignConfig {
    pub stride: usize,
    pub scoring: Scoring,
    pub center: CenterMode,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            stride: 1,
            scoring: Scoring::Sum,
            center: CenterMode::Geometric,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_per_class: usize,
    pub per_level: usize,
    pub background_maps: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_per_class: 40,
            per_level: 20,
            background_maps: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub lattice: Lattice,
    #[serde(rename = "K")]
    pub kernels: usize,
    pub sigma: f64,
    #[serde(rename = "M")]
    pub mixtures: usize,
    pub epsilon: f64,
    #[serde(rename = "Q")]
    pub context_centers: usize,
    #[serde(rename = "n")]
    pub outlier_models: usize,
    pub outlier_combine: OutlierCombine,
    /// Samples drawn for dictionary learning.
    pub dictionary_samples: usize,
    pub align: AlignConfig,
    pub em: EmOptions,
    pub train: TrainConfig,
    pub world: WorldSpec,
    pub data: DataConfig,
    /// Constant prior of the no-prior ablation.
    pub omega: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let lattice = Lattice::new(crate::model::DEFAULT_LATTICE, crate::model::DEFAULT_LATTICE);
        Self {
            seed: 0,
            lattice,
            kernels: 32,
            sigma: crate::vmf::DEFAULT_CONCENTRATION,
            mixtures: crate::model::DEFAULT_MIXTURES,
            epsilon: crate::model::DEFAULT_EPSILON,
            context_centers: crate::context::DEFAULT_CONTEXT_CENTERS,
            outlier_models: crate::model::DEFAULT_OUTLIER_MODELS,
            outlier_combine: OutlierCombine::Max,
            dictionary_samples: 4000,
            align: AlignConfig::default(),
            em: EmOptions::default(),
            train: TrainConfig::default(),
            world: WorldSpec {
                lattice,
                ..WorldSpec::default()
            },
            data: DataConfig::default(),
            omega: 0.5,
        }
    }
}

impl RunConfig {
    /// The standard synthetic benchmark on a 20x20 lattice. Twice as many
    /// mixtures as poses keeps mixtures pure; 64 kernels keeps the
    /// dictionary from splitting on context features.
    pub fn standard() -> Self {
        let world = WorldSpec::default();
        Self {
            lattice: world.lattice,
            kernels: 64,
            mixtures: 2 * world.poses,
            world,
            ..Self::default()
        }
    }

    /// A 10x10 world with two classes and two poses; seconds to fit. Meant
    /// for smoke runs and tests, not for measuring accuracy.
    pub fn small() -> Self {
        let lattice = Lattice::new(10, 10);
        let world = WorldSpec {
            dim: 16,
            classes: 2,
            poses: 2,
            lattice,
            max_shift: 2,
            parts_per_class: 4,
            ..WorldSpec::default()
        };
        Self {
            lattice,
            kernels: 16,
            mixtures: 2,
            outlier_models: 2,
            dictionary_samples: 800,
            world,
            data: DataConfig {
                train_per_class: 8,
                per_level: 2,
                background_maps: 3,
            },
            ..Self::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Seeds the run, the world generator and the training shuffle.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.world.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.lattice != self.world.lattice {
            return bad("world lattice must equal the representation lattice");
        }
        if self.lattice.height == 0 || self.lattice.width == 0 {
            return bad("lattice must be non-empty");
        }
        if self.kernels == 0 || self.mixtures == 0 || self.context_centers == 0 || self.outlier_models == 0 {
            return bad("K, M, Q and n must be positive");
        }
        if !(self.sigma > 0.0) {
            return bad("sigma must be positive");
        }
        if !(0.0..0.5).contains(&self.epsilon) {
            return bad("epsilon must lie in [0, 0.5)");
        }
        if !(self.omega > 0.0 && self.omega < 1.0) {
            return bad("omega must lie in (0, 1)");
        }
        if self.align.stride == 0 {
            return bad("alignment stride must be positive");
        }
        self.train.validate()
    }

    /// Resolved document with every default filled in.
    pub fn resolved_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact resolved document, hex encoded.
    pub fn hash(&self) -> String {
        let compact = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(compact.as_bytes()))
    }

    pub fn em_options(&self) -> EmOptions {
        EmOptions {
            epsilon: self.epsilon,
            ..self.em
        }
    }
}
