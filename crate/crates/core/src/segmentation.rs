//! Modal (two-way) and amodal (three-way) per-cell segmentation, mask sets,
//! and nearest-neighbour rasterization between lattice and pixel grids.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::math::ln_guarded;
use crate::model::{cell_log_likelihood, prior_weighted_terms, ClassModel, OutlierModel};
use crate::tensor::{BBox, FeatureMap, Frame, Label, LabelGrid};
use crate::vmf::{Responses, VmfDictionary};

/// Derived mask sets of a tri-state segmentation plus the continuous
/// foreground posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    pub height: usize,
    pub width: usize,
    pub modal: Vec<bool>,
    pub occluded: Vec<bool>,
    pub amodal: Vec<bool>,
    pub posterior: Vec<f64>,
}

impl MaskSet {
    pub fn from_labels(labels: &LabelGrid, posterior: Vec<f64>) -> Self {
        let modal: Vec<bool> = labels.labels().iter().map(|&l| l == Label::Foreground).collect();
        let occluded: Vec<bool> = labels.labels().iter().map(|&l| l == Label::Occluded).collect();
        let amodal = modal.iter().zip(&occluded).map(|(&a, &b)| a || b).collect();
        Self {
            height: labels.height(),
            width: labels.width(),
            modal,
            occluded,
            amodal,
            posterior,
        }
    }
}

/// Likelihood-ratio rule: foreground iff the foreground term strictly wins.
#[inline]
pub fn modal_label(fg: f64, ctx: f64) -> Label {
    if fg > ctx {
        Label::Foreground
    } else {
        Label::Context
    }
}

/// Three-way rule on log terms `(F, C, O)`: a label is assigned only when
/// its term strictly exceeds both others; everything else, ties included,
/// is occluded. Returns the label and `F / (F + C + O)`.
#[inline]
pub fn tri_state(lf: f64, lc: f64, lo: f64) -> (Label, f64) {
    let label = if lf > lc.max(lo) {
        Label::Foreground
    } else if lc > lf.max(lo) {
        Label::Context
    } else {
        Label::Occluded
    };
    let mx = lf.max(lc).max(lo);
    let posterior = if mx == f64::NEG_INFINITY {
        0.0
    } else {
        let (a, b, c) = ((lf - mx).exp(), (lc - mx).exp(), (lo - mx).exp());
        a / (a + b + c)
    };
    (label, posterior)
}

pub fn modal_segment_responses(responses: &Responses, m: usize, model: &ClassModel) -> Result<LabelGrid> {
    model.lattice.check(responses.height, responses.width)?;
    let labels = (0..responses.cells())
        .map(|i| {
            let (fg, ctx) = prior_weighted_terms(responses.cell(i), i, m, model);
            modal_label(fg, ctx)
        })
        .collect();
    LabelGrid::from_labels(responses.height, responses.width, labels)
}

pub fn modal_segment(map: &FeatureMap, m: usize, model: &ClassModel, dict: &VmfDictionary) -> Result<LabelGrid> {
    model.lattice.check(map.height(), map.width())?;
    modal_segment_responses(&dict.responses(map)?, m, model)
}

/// The three log terms of one representation cell.
#[inline]
pub fn amodal_terms(
    responses: &[f64],
    rep_cell: usize,
    m: usize,
    model: &ClassModel,
    outliers: &OutlierModel,
) -> (f64, f64, f64) {
    let p = model.prior(m, rep_cell);
    let lp = ln_guarded(p);
    let lf = lp + cell_log_likelihood(model.fg(m, rep_cell), responses);
    let lc = ln_guarded(1.0 - p) + cell_log_likelihood(model.ctx(m, rep_cell), responses);
    let lo = lp + outliers.log_likelihood(responses);
    (lf, lc, lo)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub labels: LabelGrid,
    pub masks: MaskSet,
}

/// Tri-state segmentation of a window whose cell `(0, 0)` sits at
/// representation cell `origin`. The window must lie inside the lattice.
pub fn amodal_segment_responses(
    responses: &Responses,
    origin: (isize, isize),
    m: usize,
    model: &ClassModel,
    outliers: &OutlierModel,
) -> Result<Segmentation> {
    let (rh, rw) = (model.lattice.height as isize, model.lattice.width as isize);
    let (h, w) = (responses.height as isize, responses.width as isize);
    if origin.0 < 0 || origin.1 < 0 || origin.0 + h > rh || origin.1 + w > rw {
        return Err(Error::MisalignedWindow(format!(
            "{h}x{w} window at ({}, {}) leaves the {rh}x{rw} lattice",
            origin.0, origin.1
        )));
    }
    if m >= model.mixtures.len() {
        return Err(Error::IndexOutOfRange {
            index: m,
            len: model.mixtures.len(),
        });
    }
    let mut labels = Vec::with_capacity(responses.cells());
    let mut posterior = Vec::with_capacity(responses.cells());
    for r in 0..responses.height {
        for c in 0..responses.width {
            let rep = (r as isize + origin.0) as usize * model.lattice.width + (c as isize + origin.1) as usize;
            let (lf, lc, lo) = amodal_terms(responses.at(r, c), rep, m, model, outliers);
            let (l, p) = tri_state(lf, lc, lo);
            labels.push(l);
            posterior.push(p);
        }
    }
    let labels = LabelGrid::from_labels(responses.height, responses.width, labels)?;
    let masks = MaskSet::from_labels(&labels, posterior);
    Ok(Segmentation { labels, masks })
}

pub fn amodal_segment(
    window: &FeatureMap,
    origin: (isize, isize),
    m: usize,
    model: &ClassModel,
    outliers: &OutlierModel,
    dict: &VmfDictionary,
) -> Result<Segmentation> {
    amodal_segment_responses(&dict.responses(window)?, origin, m, model, outliers)
}

/// Nearest-neighbour upsampling of lattice labels into the pixel footprint
/// of `box_image`; pixels outside the (clipped) box are context.
pub fn rasterize(
    labels: &LabelGrid,
    box_image: &BBox,
    image_height: usize,
    image_width: usize,
) -> Result<LabelGrid> {
    box_image.expect_frame(Frame::Image)?;
    let (clipped, was_clipped) = box_image.clipped(image_height as f64, image_width as f64)?;
    if was_clipped {
        log::info!("rasterize: box {:?} clipped to the image", box_image.as_array());
    }
    let mut out = LabelGrid::filled(image_height, image_width, Label::Context);
    let (rows, cols) = clipped.cell_ranges(image_height, image_width);
    let (lh, lw) = (labels.height() as f64, labels.width() as f64);
    for py in rows {
        let u = ((py as f64 + 0.5 - box_image.top()) / box_image.h * lh).floor();
        if u < 0.0 || u >= lh {
            continue;
        }
        for px in cols.clone() {
            let v = ((px as f64 + 0.5 - box_image.left()) / box_image.w * lw).floor();
            if v < 0.0 || v >= lw {
                continue;
            }
            out.set(py, px, labels.get(u as usize, v as usize));
        }
    }
    Ok(out)
}

/// Inverse of [`rasterize`] for a lattice of `height x width` cells spanning
/// `box_image`: each cell takes the pixel under its center.
pub fn downsample(pixels: &LabelGrid, box_image: &BBox, height: usize, width: usize) -> Result<LabelGrid> {
    box_image.expect_frame(Frame::Image)?;
    let mut out = LabelGrid::filled(height, width, Label::Context);
    for r in 0..height {
        let py = (box_image.top() + (r as f64 + 0.5) / height as f64 * box_image.h).floor();
        if py < 0.0 || py >= pixels.height() as f64 {
            continue;
        }
        for c in 0..width {
            let px = (box_image.left() + (c as f64 + 0.5) / width as f64 * box_image.w).floor();
            if px < 0.0 || px >= pixels.width() as f64 {
                continue;
            }
            out.set(r, c, pixels.get(py as usize, px as usize));
        }
    }
    Ok(out)
}

pub fn pgm_value(label: Label) -> u8 {
    match label {
        Label::Context => 0,
        Label::Occluded => 128,
        Label::Foreground => 255,
    }
}

/// Binary PGM (P5): 0 context, 128 occluded, 255 visible foreground.
pub fn write_pgm(labels: &LabelGrid, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{} {}\n255\n", labels.width(), labels.height())?;
    let bytes: Vec<u8> = labels.labels().iter().map(|&l| pgm_value(l)).collect();
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

/// Reads a mask written by [`write_pgm`].
pub fn read_pgm(path: impl AsRef<Path>) -> Result<LabelGrid> {
    parse_pgm(&std::fs::read(path)?)
}

fn parse_pgm(bytes: &[u8]) -> Result<LabelGrid> {
    let bad = |m: &str| Error::from(FormatError::MalformedHeader(format!("PGM: {m}")));
    // Four whitespace-separated header tokens, then one whitespace byte.
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("expected P5 with maxval 255"));
    }
    let dim = |s: &str| s.parse::<usize>().map_err(|_| bad("bad dimension"));
    let (w, h) = (dim(fields[1])?, dim(fields[2])?);
    let body = bytes.get(pos..).unwrap_or_default();
    if body.len() != h * w {
        return Err(FormatError::Truncated {
            expected: h * w,
            found: body.len(),
        }
        .into());
    }
    let labels = body
        .iter()
        .map(|&b| match b {
            0 => Ok(Label::Context),
            128 => Ok(Label::Occluded),
            255 => Ok(Label::Foreground),
            v => Err(bad(&format!("pixel value {v} is not a label"))),
        })
        .collect::<Result<_>>()?;
    LabelGrid::from_labels(h, w, labels)
}
