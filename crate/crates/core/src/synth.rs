//! Synthetic compositional worlds: pose templates built from part kernels,
//! context and clutter kernels, unseen occluders, and occluded scenes
//! bucketed by foreground/background occlusion level.

use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{derive_seed, rng};
use crate::model::Lattice;
use crate::tensor::{dot, normalize, BBox, FeatureMap, Frame, Label, LabelGrid};

pub const TEMPLATE_MAX_IOU: f64 = 0.7;
const WORLD_ATTEMPTS: usize = 1000;
const SCENE_ATTEMPTS: usize = 100;

/// Foreground occlusion bands (fraction of object cells), levels 0..=3.
pub const FG_BANDS: [(f64, f64); 4] = [(0.0, 0.0), (0.2, 0.4), (0.4, 0.6), (0.6, 0.8)];
/// Background occlusion bands (fraction of context cells), levels 0..=3.
pub const BG_BANDS: [(f64, f64); 4] = [(0.0, 0.0), (0.01, 0.2), (0.2, 0.4), (0.4, 0.6)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    pub seed: u64,
    #[serde(rename = "D")]
    pub dim: usize,
    pub classes: usize,
    pub poses: usize,
    pub lattice: Lattice,
    /// Largest benchmark shift per axis; templates leave this margin.
    pub max_shift: usize,
    pub parts_per_class: usize,
    pub context_kernels: usize,
    pub clutter_kernels: usize,
    pub occluder_kernels: usize,
    /// Voronoi seeds for the context layout of a scene.
    pub context_patches: usize,
    /// vMF concentration of sampled features; `None` is noiseless.
    pub sigma_gen: Option<f64>,
    /// Cosine between each part kernel and a context kernel.
    pub part_context_similarity: f64,
    /// Cosine between each occluder kernel and a context kernel.
    pub occluder_context_similarity: f64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            dim: 32,
            classes: 3,
            poses: 4,
            lattice: Lattice::new(20, 20),
            max_shift: 4,
            parts_per_class: 6,
            context_kernels: 4,
            clutter_kernels: 8,
            occluder_kernels: 4,
            context_patches: 5,
            sigma_gen: Some(40.0),
            part_context_similarity: 0.4,
            occluder_context_similarity: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub class_id: usize,
    pub pose: usize,
    /// Row-major foreground mask on the representation lattice.
    pub mask: Vec<bool>,
    /// World kernel index of each foreground cell.
    pub kernels: Vec<Option<usize>>,
    /// Tight box of `mask`, centered on the lattice center.
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub spec: WorldSpec,
    /// All generator kernel means.
    pub means: Vec<Vec<f64>>,
    pub part_kernels: Vec<Vec<usize>>,
    pub context_kernels: Vec<usize>,
    pub clutter_kernels: Vec<usize>,
    pub occluder_kernels: Vec<usize>,
    /// `templates[class][pose]`.
    pub templates: Vec<Vec<Template>>,
}

impl World {
    pub fn template(&self, class_id: usize, pose: usize) -> &Template {
        &self.templates[class_id][pose]
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)? + "\n")?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

fn random_unit<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = dot(&v, &v).sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Unit vector orthogonal to the unit vector `mu`.
fn random_tangent<R: Rng>(mu: &[f64], rng: &mut R) -> Vec<f64> {
    loop {
        let mut v = random_unit(mu.len(), rng);
        let p = dot(&v, mu);
        v.iter_mut().zip(mu).for_each(|(x, m)| *x -= p * m);
        let n = dot(&v, &v).sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Unit vector at cosine `c` from `base`.
fn blend<R: Rng>(base: &[f64], c: f64, rng: &mut R) -> Vec<f64> {
    let u = random_tangent(base, rng);
    let s = (1.0 - c * c).max(0.0).sqrt();
    let v: Vec<f64> = base.iter().zip(&u).map(|(b, x)| c * b + s * x).collect();
    normalize(&v).expect("finite blend")
}

/// One draw from vMF(`mu`, `kappa`) by Wood's rejection sampler for the
/// cosine, composed with a uniform tangent direction.
pub fn sample_vmf<R: Rng>(mu: &[f64], kappa: f64, rng: &mut R) -> Vec<f64> {
    let d = mu.len() as f64;
    let b = (-2.0 * kappa + (4.0 * kappa * kappa + (d - 1.0).powi(2)).sqrt()) / (d - 1.0);
    let x0 = (1.0 - b) / (1.0 + b);
    let c = kappa * x0 + (d - 1.0) * (1.0 - x0 * x0).ln();
    let beta = Beta::new((d - 1.0) / 2.0, (d - 1.0) / 2.0).expect("valid beta");
    let w = loop {
        let z: f64 = beta.sample(rng);
        let w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z);
        let u: f64 = rng.random();
        if kappa * w + (d - 1.0) * (1.0 - x0 * w).ln() - c >= u.ln() {
            break w;
        }
    };
    let v = random_tangent(mu, rng);
    let s = (1.0 - w * w).max(0.0).sqrt();
    mu.iter().zip(&v).map(|(m, t)| w * m + s * t).collect()
}

fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    crate::eval::iou(a, b)
}

/// Superellipse filling a centered `h x w` box; the box is tight.
fn superellipse(lattice: Lattice, h: usize, w: usize, q: f64) -> Vec<bool> {
    let (cr, cc) = lattice.center();
    let mut mask = vec![false; lattice.cells()];
    for r in 0..lattice.height {
        for c in 0..lattice.width {
            let u = ((r as f64 + 0.5 - cr) / (h as f64 / 2.0)).abs();
            let v = ((c as f64 + 0.5 - cc) / (w as f64 / 2.0)).abs();
            mask[r * lattice.width + c] = u < 1.0 && v < 1.0 && u.powf(q) + v.powf(q) <= 1.0;
        }
    }
    mask
}

/// Extents in `[lo, hi]` with the lattice's parity, so boxes center exactly.
fn extents(n: usize, hi: usize) -> Vec<usize> {
    let lo = (hi / 2).max(2);
    (lo..=hi).filter(|e| (n - e).is_multiple_of(2)).collect()
}

fn voronoi<R: Rng>(cells: &[usize], width: usize, seeds: usize, rng: &mut R) -> Vec<(usize, usize)> {
    // returns (cell, seed index) for every cell in `cells`
    let mut picks: Vec<usize> = cells.to_vec();
    picks.shuffle(rng);
    picks.truncate(seeds.max(1));
    cells
        .iter()
        .map(|&i| {
            let (r, c) = ((i / width) as f64, (i % width) as f64);
            let nearest = picks
                .iter()
                .enumerate()
                .map(|(s, &p)| {
                    let (pr, pc) = ((p / width) as f64, (p % width) as f64);
                    (s, (pr - r).powi(2) + (pc - c).powi(2))
                })
                .fold((0, f64::INFINITY), |a, x| if x.1 < a.1 { x } else { a })
                .0;
            (i, nearest)
        })
        .collect()
}

pub fn generate_world(spec: &WorldSpec) -> Result<World> {
    let lat = spec.lattice;
    if spec.dim < 2 || spec.classes == 0 || spec.poses == 0 || spec.parts_per_class == 0 {
        return Err(Error::Config("world needs D >= 2 and at least one class, pose and part".into()));
    }
    if spec.context_kernels == 0 || spec.occluder_kernels == 0 || spec.clutter_kernels == 0 {
        return Err(Error::Config("world needs context, occluder and clutter kernels".into()));
    }
    let max_h = lat.height.checked_sub(2 * spec.max_shift).filter(|&e| e >= 2);
    let max_w = lat.width.checked_sub(2 * spec.max_shift).filter(|&e| e >= 2);
    let (Some(max_h), Some(max_w)) = (max_h, max_w) else {
        return Err(Error::Infeasible("lattice too small for the shift margin".into()));
    };
    let mut rng = rng(derive_seed(spec.seed, &[1]));
    let mut means = Vec::new();
    let push = |v: Vec<f64>, means: &mut Vec<Vec<f64>>| {
        means.push(v);
        means.len() - 1
    };
    let context_kernels: Vec<usize> = (0..spec.context_kernels)
        .map(|_| {
            let v = random_unit(spec.dim, &mut rng);
            push(v, &mut means)
        })
        .collect();
    let part_kernels: Vec<Vec<usize>> = (0..spec.classes)
        .map(|_| {
            (0..spec.parts_per_class)
                .map(|_| {
                    let base = means[*context_kernels.choose(&mut rng).unwrap()].clone();
                    let v = blend(&base, spec.part_context_similarity, &mut rng);
                    push(v, &mut means)
                })
                .collect()
        })
        .collect();
    let occluder_kernels: Vec<usize> = (0..spec.occluder_kernels)
        .map(|_| {
            let base = means[*context_kernels.choose(&mut rng).unwrap()].clone();
            let v = blend(&base, spec.occluder_context_similarity, &mut rng);
            push(v, &mut means)
        })
        .collect();
    let clutter_kernels: Vec<usize> = (0..spec.clutter_kernels)
        .map(|_| {
            let v = random_unit(spec.dim, &mut rng);
            push(v, &mut means)
        })
        .collect();

    let hs = extents(lat.height, max_h);
    let ws = extents(lat.width, max_w);
    let mut templates = Vec::with_capacity(spec.classes);
    for class_id in 0..spec.classes {
        let mut masks: Vec<(Vec<bool>, usize, usize)> = Vec::new();
        let mut attempts = 0;
        while masks.len() < spec.poses {
            attempts += 1;
            if attempts > WORLD_ATTEMPTS {
                return Err(Error::Infeasible(format!(
                    "could not find {} distinct templates for class {class_id}",
                    spec.poses
                )));
            }
            let h = *hs.choose(&mut rng).unwrap();
            let w = *ws.choose(&mut rng).unwrap();
            let q = rng.random_range(2.5..5.0);
            let mask = superellipse(lat, h, w, q);
            if masks.iter().all(|(m, _, _)| mask_iou(m, &mask) <= TEMPLATE_MAX_IOU) {
                masks.push((mask, h, w));
            }
        }
        let mut poses = Vec::with_capacity(spec.poses);
        for (pose, (mask, h, w)) in masks.into_iter().enumerate() {
            let cells: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
            let mut kernels = vec![None; mask.len()];
            for (cell, s) in voronoi(&cells, lat.width, spec.parts_per_class, &mut rng) {
                kernels[cell] = Some(part_kernels[class_id][s % spec.parts_per_class]);
            }
            let top = (lat.height - h) / 2;
            let left = (lat.width - w) / 2;
            poses.push(Template {
                class_id,
                pose,
                mask,
                kernels,
                bbox: BBox::from_cells(top..top + h, left..left + w, Frame::Representation)?,
            });
        }
        templates.push(poses);
    }
    Ok(World {
        spec: spec.clone(),
        means,
        part_kernels,
        context_kernels,
        clutter_kernels,
        occluder_kernels,
        templates,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneRequest {
    pub class_id: usize,
    pub pose: usize,
    /// `(rows, cols)` translation of the template.
    pub shift: (i32, i32),
    pub fg_level: u8,
    pub bg_level: u8,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub id: String,
    pub map: FeatureMap,
    pub class_id: usize,
    pub pose: usize,
    pub shift: (i32, i32),
    pub modal_box: BBox,
    pub amodal_box: BBox,
    /// 1 visible object, -1 occluded object, 0 everything else.
    pub labels: LabelGrid,
    pub fg_level: u8,
    pub bg_level: u8,
    pub fg_fraction: f64,
    pub bg_fraction: f64,
    /// Generator kernel of every cell.
    pub kernels: Vec<usize>,
}

fn neighbours(i: usize, h: usize, w: usize) -> impl Iterator<Item = usize> {
    let (r, c) = (i / w, i % w);
    let mut out = [usize::MAX; 4];
    if r > 0 {
        out[0] = i - w;
    }
    if r + 1 < h {
        out[1] = i + w;
    }
    if c > 0 {
        out[2] = i - 1;
    }
    if c + 1 < w {
        out[3] = i + 1;
    }
    out.into_iter().filter(|&x| x != usize::MAX)
}

/// Grows a 4-connected blob from `seed` over cells allowed by `allowed`,
/// picking frontier cells with `weight`, until `done` holds.
fn grow<R: Rng>(
    seed: usize,
    h: usize,
    w: usize,
    blob: &mut [bool],
    allowed: impl Fn(usize) -> bool,
    weight: impl Fn(usize) -> f64,
    mut done: impl FnMut(&[bool]) -> bool,
    rng: &mut R,
) {
    blob[seed] = true;
    let mut frontier: Vec<usize> = Vec::new();
    let add = |i: usize, blob: &[bool], frontier: &mut Vec<usize>| {
        for n in neighbours(i, h, w) {
            if !blob[n] && allowed(n) && !frontier.contains(&n) {
                frontier.push(n);
            }
        }
    };
    add(seed, blob, &mut frontier);
    while !done(blob) && !frontier.is_empty() {
        let total: f64 = frontier.iter().map(|&i| weight(i)).sum();
        let mut x = rng.random::<f64>() * total;
        let mut pick = frontier.len() - 1;
        for (j, &i) in frontier.iter().enumerate() {
            x -= weight(i);
            if x < 0.0 {
                pick = j;
                break;
            }
        }
        let i = frontier.swap_remove(pick);
        blob[i] = true;
        add(i, blob, &mut frontier);
    }
}

fn in_band(x: f64, band: (f64, f64)) -> bool {
    x >= band.0 - 1e-12 && x <= band.1 + 1e-12
}

fn sample_feature<R: Rng>(world: &World, kernel: usize, rng: &mut R) -> Vec<f64> {
    let mu = &world.means[kernel];
    match world.spec.sigma_gen {
        Some(kappa) => sample_vmf(mu, kappa, rng),
        None => mu.clone(),
    }
}

/// Rounds through single precision, as files store it.
fn to_feature_map(h: usize, w: usize, d: usize, cells: Vec<Vec<f64>>) -> Result<FeatureMap> {
    let raw: Vec<f64> = cells.into_iter().flatten().map(|x| x as f32 as f64).collect();
    FeatureMap::new(h, w, d, raw)
}

pub fn render_scene(world: &World, req: &SceneRequest) -> Result<SceneRecord> {
    let spec = &world.spec;
    let lat = spec.lattice;
    let (h, w) = (lat.height, lat.width);
    let fg_band = *FG_BANDS
        .get(req.fg_level as usize)
        .ok_or_else(|| Error::Config(format!("foreground level {}", req.fg_level)))?;
    let bg_band = *BG_BANDS
        .get(req.bg_level as usize)
        .ok_or_else(|| Error::Config(format!("background level {}", req.bg_level)))?;
    let template = world
        .templates
        .get(req.class_id)
        .and_then(|t| t.get(req.pose))
        .ok_or_else(|| Error::Config(format!("no template for class {} pose {}", req.class_id, req.pose)))?;
    let mut rng = rng(req.seed);

    // object cells after the shift
    let mut object = vec![false; lat.cells()];
    let mut kernels = vec![0usize; lat.cells()];
    let mut template_cells = 0usize;
    for (i, &on) in template.mask.iter().enumerate() {
        if !on {
            continue;
        }
        template_cells += 1;
        let r = (i / w) as i64 + req.shift.0 as i64;
        let c = (i % w) as i64 + req.shift.1 as i64;
        if r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w {
            let j = r as usize * w + c as usize;
            object[j] = true;
            kernels[j] = template.kernels[i].expect("template cell has a kernel");
        }
    }
    let n_obj = object.iter().filter(|&&o| o).count();
    if (n_obj as f64) < 0.2 * template_cells as f64 {
        return Err(Error::Config(format!("shift {:?} leaves less than 20% of the object", req.shift)));
    }
    let n_ctx = lat.cells() - n_obj;

    // context layout
    let all: Vec<usize> = (0..lat.cells()).collect();
    let patch_kernels: Vec<usize> = (0..spec.context_patches.max(1))
        .map(|_| *world.context_kernels.choose(&mut rng).unwrap())
        .collect();
    for (cell, s) in voronoi(&all, w, spec.context_patches, &mut rng) {
        if !object[cell] {
            kernels[cell] = patch_kernels[s];
        }
    }

    // occluders
    let mut occluded = vec![false; lat.cells()];
    let mut fg_fraction = 0.0;
    let mut bg_fraction = 0.0;
    let mut ok = req.fg_level == 0 && req.bg_level == 0;
    let obj_cells: Vec<usize> = (0..lat.cells()).filter(|&i| object[i]).collect();
    let fraction = |occ: &[bool], want_obj: bool| {
        let n = (0..occ.len()).filter(|&i| occ[i] && object[i] == want_obj).count();
        n as f64 / if want_obj { n_obj } else { n_ctx }.max(1) as f64
    };
    let mut attempts = 0;
    while !ok {
        attempts += 1;
        if attempts > SCENE_ATTEMPTS {
            return Err(Error::Infeasible(format!(
                "occlusion bands FG{} BG{} not reached for class {} pose {}",
                req.fg_level, req.bg_level, req.class_id, req.pose
            )));
        }
        occluded.fill(false);
        if req.fg_level > 0 {
            let target = rng.random_range(fg_band.0..fg_band.1);
            let seed = *obj_cells.choose(&mut rng).unwrap();
            let restrict = req.bg_level == 0;
            grow(
                seed,
                h,
                w,
                &mut occluded,
                |i| !restrict || object[i],
                |i| if object[i] { 4.0 } else { 1.0 },
                |b| fraction(b, true) >= target,
                &mut rng,
            );
        }
        if req.bg_level > 0 {
            let target = rng.random_range(bg_band.0..bg_band.1);
            let mut guard = 0;
            while fraction(&occluded, false) < target && guard < 1000 {
                guard += 1;
                let free: Vec<usize> = (0..lat.cells()).filter(|&i| !object[i] && !occluded[i]).collect();
                let Some(&seed) = free.choose(&mut rng) else { break };
                let cap = rng.random_range(4..=24);
                let mut grown = 0usize;
                let base = occluded.clone();
                grow(
                    seed,
                    h,
                    w,
                    &mut occluded,
                    |i| !object[i],
                    |_| 1.0,
                    |b| {
                        grown = (0..b.len()).filter(|&i| b[i] && !base[i]).count();
                        grown >= cap || fraction(b, false) >= target
                    },
                    &mut rng,
                );
            }
        }
        fg_fraction = fraction(&occluded, true);
        bg_fraction = fraction(&occluded, false);
        ok = in_band(fg_fraction, fg_band) && in_band(bg_fraction, bg_band);
    }
    let occluder = *world.occluder_kernels.choose(&mut rng).unwrap();
    for i in 0..lat.cells() {
        if occluded[i] {
            kernels[i] = occluder;
        }
    }

    let labels: Vec<Label> = (0..lat.cells())
        .map(|i| match (object[i], occluded[i]) {
            (true, false) => Label::Foreground,
            (true, true) => Label::Occluded,
            _ => Label::Context,
        })
        .collect();
    let visible: Vec<bool> = labels.iter().map(|&l| l == Label::Foreground).collect();
    let modal_box = BBox::of_mask(&visible, h, w, Frame::Image)
        .ok_or_else(|| Error::Infeasible("object fully occluded".into()))?;
    let amodal_box = BBox {
        frame: Frame::Image,
        ..template.bbox.translated(req.shift.0 as f64, req.shift.1 as f64)
    };
    let cells: Vec<Vec<f64>> = kernels.iter().map(|&k| sample_feature(world, k, &mut rng)).collect();
    Ok(SceneRecord {
        id: String::new(),
        map: to_feature_map(h, w, spec.dim, cells)?,
        class_id: req.class_id,
        pose: req.pose,
        shift: req.shift,
        modal_box,
        amodal_box,
        labels: LabelGrid::from_labels(h, w, labels)?,
        fg_level: req.fg_level,
        bg_level: req.bg_level,
        fg_fraction,
        bg_fraction,
        kernels,
    })
}

/// A "natural image" without objects: clutter kernels on a Voronoi layout.
pub fn render_background(world: &World, seed: u64) -> Result<FeatureMap> {
    let spec = &world.spec;
    let lat = spec.lattice;
    let mut rng = rng(seed);
    let all: Vec<usize> = (0..lat.cells()).collect();
    let patches: Vec<usize> = (0..spec.context_patches.max(1))
        .map(|_| *world.clutter_kernels.choose(&mut rng).unwrap())
        .collect();
    let mut kernels = vec![0; lat.cells()];
    for (cell, s) in voronoi(&all, lat.width, spec.context_patches, &mut rng) {
        kernels[cell] = patches[s];
    }
    let cells = kernels.iter().map(|&k| sample_feature(world, k, &mut rng)).collect();
    to_feature_map(lat.height, lat.width, spec.dim, cells)
}

/// Unoccluded, centered training scenes; poses cycle within each class.
pub fn make_training_set(world: &World, per_class: usize, seed: u64) -> Result<Vec<SceneRecord>> {
    let mut out = Vec::with_capacity(per_class * world.spec.classes);
    for class_id in 0..world.spec.classes {
        for n in 0..per_class {
            let req = SceneRequest {
                class_id,
                pose: n % world.spec.poses,
                shift: (0, 0),
                fg_level: 0,
                bg_level: 0,
                seed: derive_seed(seed, &[2, class_id as u64, n as u64]),
            };
            let mut rec = render_scene(world, &req)?;
            rec.id = format!("train-{class_id}-{n:04}");
            out.push(rec);
        }
    }
    Ok(out)
}

pub fn make_backgrounds(world: &World, count: usize, seed: u64) -> Result<Vec<FeatureMap>> {
    (0..count)
        .map(|n| render_background(world, derive_seed(seed, &[3, n as u64])))
        .collect()
}

/// Level pairs of the benchmark: unoccluded, then every FG x BG combination.
pub fn benchmark_levels() -> Vec<(u8, u8)> {
    let mut v = vec![(0, 0)];
    for f in 1..=3 {
        for b in 1..=3 {
            v.push((f, b));
        }
    }
    v
}

/// `per_level` scenes for every level pair with random class, pose and shift.
pub fn make_benchmark(world: &World, per_level: usize, seed: u64) -> Result<Vec<SceneRecord>> {
    let s = world.spec.max_shift as i32;
    let mut out = Vec::new();
    for (li, (fg, bg)) in benchmark_levels().into_iter().enumerate() {
        for n in 0..per_level {
            let mut pick = rng(derive_seed(seed, &[4, li as u64, n as u64]));
            let req = SceneRequest {
                class_id: pick.random_range(0..world.spec.classes),
                pose: pick.random_range(0..world.spec.poses),
                shift: (pick.random_range(-s..=s), pick.random_range(-s..=s)),
                fg_level: fg,
                bg_level: bg,
                seed: derive_seed(seed, &[5, li as u64, n as u64]),
            };
            let mut rec = render_scene(world, &req)?;
            rec.id = format!("fg{fg}-bg{bg}-{n:04}");
            out.push(rec);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub fmap: String,
    pub labels: String,
    pub class_id: usize,
    pub pose: usize,
    pub shift: [i32; 2],
    /// `[cx, cy, h, w]`, image frame.
    pub modal_box: [f64; 4],
    pub amodal_box: [f64; 4],
    pub fg_level: u8,
    pub bg_level: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub config_hash: String,
    pub lattice: Lattice,
    pub records: Vec<ManifestRecord>,
    #[serde(default)]
    pub background: Vec<String>,
}

pub const MANIFEST_VERSION: u32 = 1;

impl Manifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let m: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Config(format!(
                "manifest version {} (expected {MANIFEST_VERSION})",
                m.version
            )));
        }
        Ok(m)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

impl ManifestRecord {
    pub fn modal(&self) -> Result<BBox> {
        let [cx, cy, h, w] = self.modal_box;
        BBox::new(cx, cy, h, w, Frame::Image)
    }

    pub fn amodal(&self) -> Result<BBox> {
        let [cx, cy, h, w] = self.amodal_box;
        BBox::new(cx, cy, h, w, Frame::Image)
    }

    /// Feature map and ground-truth labels, paths relative to `root`.
    pub fn load(&self, root: &Path) -> Result<(FeatureMap, LabelGrid)> {
        let (map, _) = crate::tensor::load_feature_map(root.join(&self.fmap))?;
        let labels = LabelGrid::from_text(&std::fs::read_to_string(root.join(&self.labels))?)?;
        if !labels.same_shape(&map) {
            return Err(Error::LatticeMismatch {
                expected_h: map.height(),
                expected_w: map.width(),
                found_h: labels.height(),
                found_w: labels.width(),
            });
        }
        Ok((map, labels))
    }
}

/// Writes FMAP and label files under `root/<subdir>/` and returns the
/// manifest (paths relative to `root`).
pub fn write_dataset(
    root: &Path,
    subdir: &str,
    records: &[SceneRecord],
    background: &[FeatureMap],
    lattice: Lattice,
    config_hash: &str,
) -> Result<Manifest> {
    std::fs::create_dir_all(root.join(subdir))?;
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let fmap = format!("{subdir}/{}.fmap", r.id);
        let labels = format!("{subdir}/{}.labels", r.id);
        crate::tensor::save_feature_map(&r.map, root.join(&fmap))?;
        std::fs::write(root.join(&labels), r.labels.to_text())?;
        out.push(ManifestRecord {
            id: r.id.clone(),
            fmap,
            labels,
            class_id: r.class_id,
            pose: r.pose,
            shift: [r.shift.0, r.shift.1],
            modal_box: r.modal_box.as_array(),
            amodal_box: r.amodal_box.as_array(),
            fg_level: r.fg_level,
            bg_level: r.bg_level,
        });
    }
    let mut bg = Vec::with_capacity(background.len());
    for (n, m) in background.iter().enumerate() {
        let p = format!("{subdir}/background-{n:04}.fmap");
        crate::tensor::save_feature_map(m, root.join(&p))?;
        bg.push(p);
    }
    Ok(Manifest {
        version: MANIFEST_VERSION,
        config_hash: config_hash.to_string(),
        lattice,
        records: out,
        background: bg,
    })
}
