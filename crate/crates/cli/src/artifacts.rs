//! On-disk artifacts shared by the subcommands and their consistency checks.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use compseg_core::pipeline::{examples_from_records, Supervision};
use compseg_core::synth::Manifest;
use compseg_core::{BBox, FeatureMap, LabelGrid, ModelFile, ModelSet, RunConfig, TrainingExample, TrainingState};

pub const TRAIN_MANIFEST: &str = "train.json";
pub const BENCH_MANIFEST: &str = "bench.json";
pub const CONFIG_FILE: &str = "config.json";

/// Per-record segmentation metadata written next to each PGM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub id: String,
    pub config_hash: String,
    pub supervision: Supervision,
    /// `learned`, `no-prior` or `gt-prior`.
    pub prior: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega: Option<f64>,
    pub class_id: usize,
    pub mixture: usize,
    /// Representation cell holding the proposal anchor.
    pub d: [usize; 2],
    pub score: f64,
    /// Representation cell = image cell + this translation.
    pub image_to_rep: [isize; 2],
    /// `[cx, cy, h, w]`, image frame.
    pub amodal_box: [f64; 4],
    pub clipped: bool,
}

impl Sidecar {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Resolved configuration: file or standard preset, then `--seed`.
pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::read(p).with_context(|| format!("config {}", p.display()))?,
        None => RunConfig::standard(),
    };
    Ok(match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

pub fn read_manifest(data: &Path, name: &str, cfg: &RunConfig) -> Result<Manifest> {
    let path = data.join(name);
    let m = Manifest::read(&path).with_context(|| format!("manifest {}", path.display()))?;
    if m.lattice != cfg.lattice {
        bail!(
            "{}: lattice {}x{} does not match the configured {}x{}",
            path.display(),
            m.lattice.height,
            m.lattice.width,
            cfg.lattice.height,
            cfg.lattice.width
        );
    }
    if m.config_hash != cfg.hash() {
        log::warn!("{} was generated under config {}, running under {}", path.display(), m.config_hash, cfg.hash());
    }
    Ok(m)
}

fn check_map(map: &FeatureMap, cfg: &RunConfig, what: &str) -> Result<()> {
    if (map.height(), map.width()) != (cfg.lattice.height, cfg.lattice.width) {
        bail!(
            "{what}: map is {}x{} but the lattice is {}x{}",
            map.height(),
            map.width(),
            cfg.lattice.height,
            cfg.lattice.width
        );
    }
    Ok(())
}

/// Training examples and sorted class ids, ground-truth labels and the
/// background maps of the training manifest.
pub struct TrainData {
    pub examples: Vec<TrainingExample>,
    pub class_ids: Vec<usize>,
    pub labels: Vec<LabelGrid>,
    pub backgrounds: Vec<FeatureMap>,
}

pub fn load_train(data: &Path, cfg: &RunConfig) -> Result<TrainData> {
    let m = read_manifest(data, TRAIN_MANIFEST, cfg)?;
    let mut records = Vec::with_capacity(m.records.len());
    let mut labels = Vec::with_capacity(m.records.len());
    for r in &m.records {
        let (map, gt) = r.load(data).with_context(|| format!("record {}", r.id))?;
        check_map(&map, cfg, &r.id)?;
        let b = r.modal()?;
        records.push((map, r.class_id, b));
        labels.push(gt);
    }
    let (examples, class_ids) = examples_from_records(&records)?;
    let backgrounds = m
        .background
        .iter()
        .map(|p| {
            let (map, _) = compseg_core::tensor::load_feature_map(data.join(p)).with_context(|| p.clone())?;
            check_map(&map, cfg, p)?;
            Ok(map)
        })
        .collect::<Result<_>>()?;
    Ok(TrainData {
        examples,
        class_ids,
        labels,
        backgrounds,
    })
}

/// One benchmark record loaded from disk.
pub struct BenchItem {
    pub id: String,
    pub map: FeatureMap,
    pub gt: LabelGrid,
    pub modal: BBox,
    pub amodal: BBox,
    pub fg_level: u8,
    pub bg_level: u8,
}

pub fn load_bench(data: &Path, cfg: &RunConfig) -> Result<(Manifest, Vec<BenchItem>)> {
    let m = read_manifest(data, BENCH_MANIFEST, cfg)?;
    let items = m
        .records
        .iter()
        .map(|r| {
            let (map, gt) = r.load(data).with_context(|| format!("record {}", r.id))?;
            Ok(BenchItem {
                id: r.id.clone(),
                map,
                gt,
                modal: r.modal()?,
                amodal: r.amodal()?,
                fg_level: r.fg_level,
                bg_level: r.bg_level,
            })
        })
        .collect::<Result<_>>()?;
    Ok((m, items))
}

/// Model file with its embedded hash; checked against the run lattice.
pub fn read_model(path: &Path, cfg: &RunConfig) -> Result<(ModelSet, String)> {
    let file = ModelFile::read(path).with_context(|| format!("model {}", path.display()))?;
    if file.lattice != cfg.lattice {
        bail!(
            "{}: model lattice {}x{} does not match the configured {}x{}",
            path.display(),
            file.lattice.height,
            file.lattice.width,
            cfg.lattice.height,
            cfg.lattice.width
        );
    }
    let hash = file.config_hash.clone();
    let models = file.into_models().with_context(|| format!("model {}", path.display()))?;
    Ok((models, hash))
}

pub fn write_model(models: &ModelSet, hash: &str, epoch: Option<usize>, path: &Path) -> Result<()> {
    ModelFile::from_models(models, hash, epoch)
        .write(path)
        .with_context(|| format!("writing {}", path.display()))
}

pub fn read_state(path: &Path) -> Result<TrainingState> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(TrainingState::from_json(&text)?)
}

pub fn write_state(state: &TrainingState, path: &Path) -> Result<()> {
    std::fs::write(path, state.to_json()? + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn stage_paths(run: &Path, stage: &str) -> (PathBuf, PathBuf) {
    (run.join(format!("{stage}.model.json")), run.join(format!("{stage}.state.json")))
}
