//! Proposal alignment on the combined representation and amodal box
//! completion.
//!
//! Coordinates: `x`/`h` run along rows, `y`/`w` along columns. Cell `(r, c)`
//! covers `[r, r + 1) x [c, c + 1)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ClassModel, CombinedRepresentation, Lattice};
use crate::tensor::{BBox, Frame};
use crate::vmf::Responses;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scoring {
    /// Mean log-likelihood over overlapping cells.
    Mean,
    /// Sum over overlapping cells. A cell outside the crop contributes
    /// zero, which is exactly zero padding when log Z is dropped.
    #[default]
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CenterMode {
    /// Geometric center of the lattice.
    #[default]
    Geometric,
    /// Centroid of the selected mixture's prior.
    Centroid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignOptions {
    pub stride: usize,
    pub scoring: Scoring,
    /// Evaluate only this placement (representation cell) when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed: Option<(usize, usize)>,
}

impl Default for AlignOptions {
    fn default() -> Self {
        Self {
            stride: 1,
            scoring: Scoring::Sum,
            fixed: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    /// Representation cell holding the proposal's anchor cell.
    pub d: (usize, usize),
    /// Proposal cell placed at `d`: `(h / 2, w / 2)`, floored.
    pub anchor: (usize, usize),
    pub class_index: usize,
    pub class_id: usize,
    pub mixture: usize,
    pub score: f64,
}

impl Alignment {
    /// Representation cell = proposal cell + offset.
    pub fn offset(&self) -> (isize, isize) {
        (
            self.d.0 as isize - self.anchor.0 as isize,
            self.d.1 as isize - self.anchor.1 as isize,
        )
    }
}

/// Per proposal cell: `exp(s - max s)` and `max s`, so that each weighted
/// log-sum-exp reduces to a dot product.
struct Shifted {
    k: usize,
    exps: Vec<f64>,
    maxes: Vec<f64>,
}

impl Shifted {
    fn new(r: &Responses) -> Self {
        let k = r.kernels;
        let mut exps = Vec::with_capacity(r.values.len());
        let mut maxes = Vec::with_capacity(r.cells());
        for cell in r.values.chunks_exact(k) {
            let mx = cell.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            exps.extend(cell.iter().map(|&s| (s - mx).exp()));
            maxes.push(mx);
        }
        Self { k, exps, maxes }
    }

    #[inline]
    fn ll(&self, cell: usize, weights: &[f64]) -> f64 {
        let e = &self.exps[cell * self.k..(cell + 1) * self.k];
        let s: f64 = weights.iter().zip(e).map(|(w, x)| w * x).sum();
        s.ln() + self.maxes[cell]
    }
}

fn check_proposal(r: &Responses, lattice: Lattice) -> Result<()> {
    if r.height > lattice.height || r.width > lattice.width {
        return Err(Error::ProposalTooLarge {
            proposal_h: r.height,
            proposal_w: r.width,
            lattice_h: lattice.height,
            lattice_w: lattice.width,
        });
    }
    Ok(())
}

/// Alignment score of one placement: proposal cell `(a, b)` is compared with
/// representation cell `(a + off.0, b + off.1)`; cells falling off the
/// lattice are skipped.
fn placement_score(
    shifted: &Shifted,
    h: usize,
    w: usize,
    off: (isize, isize),
    psi: &CombinedRepresentation,
    m: usize,
    scoring: Scoring,
) -> f64 {
    let (rh, rw) = (psi.lattice.height as isize, psi.lattice.width as isize);
    let a0 = (-off.0).max(0) as usize;
    let a1 = ((rh - off.0).min(h as isize)).max(0) as usize;
    let b0 = (-off.1).max(0) as usize;
    let b1 = ((rw - off.1).min(w as isize)).max(0) as usize;
    let mut total = 0.0;
    let mut n = 0usize;
    for a in a0..a1 {
        let rr = (a as isize + off.0) as usize;
        for b in b0..b1 {
            let rc = (b as isize + off.1) as usize;
            total += shifted.ll(a * w + b, psi.cell(m, rr * psi.lattice.width + rc));
            n += 1;
        }
    }
    match scoring {
        Scoring::Mean if n > 0 => total / n as f64,
        Scoring::Mean => f64::NEG_INFINITY,
        Scoring::Sum => total,
    }
}

/// Exhaustive search over placements and `(class, mixture)` pairs.
/// Placements are visited row-major, then classes, then mixtures; the first
/// strict maximum wins.
pub fn align_partial(
    proposal: &Responses,
    models: &[ClassModel],
    combined: &[CombinedRepresentation],
    options: &AlignOptions,
) -> Result<Alignment> {
    let first = models.first().ok_or(Error::Empty("model set"))?;
    let lattice = first.lattice;
    check_proposal(proposal, lattice)?;
    if options.stride == 0 {
        return Err(Error::Config("alignment stride must be positive".into()));
    }
    let (h, w) = (proposal.height, proposal.width);
    let anchor = (h / 2, w / 2);
    let shifted = Shifted::new(proposal);
    let placements: Vec<(usize, usize)> = match options.fixed {
        Some(d) => {
            if d.0 >= lattice.height || d.1 >= lattice.width {
                return Err(Error::IndexOutOfRange {
                    index: d.0 * lattice.width + d.1,
                    len: lattice.cells(),
                });
            }
            vec![d]
        }
        None => (0..lattice.height)
            .step_by(options.stride)
            .flat_map(|r| (0..lattice.width).step_by(options.stride).map(move |c| (r, c)))
            .collect(),
    };
    let mut best: Option<Alignment> = None;
    for &d in &placements {
        let off = (d.0 as isize - anchor.0 as isize, d.1 as isize - anchor.1 as isize);
        for (ci, (model, psi)) in models.iter().zip(combined).enumerate() {
            for m in 0..psi.psi.len() {
                let score = placement_score(&shifted, h, w, off, psi, m, options.scoring);
                if best.is_none_or(|b| score > b.score) {
                    best = Some(Alignment {
                        d,
                        anchor,
                        class_index: ci,
                        class_id: model.class_id,
                        mixture: m,
                        score,
                    });
                }
            }
        }
    }
    best.ok_or(Error::Empty("placements"))
}

/// Object center `c'` used for box completion.
pub fn object_center(model: &ClassModel, m: usize, mode: CenterMode) -> (f64, f64) {
    match mode {
        CenterMode::Geometric => model.lattice.center(),
        CenterMode::Centroid => {
            let w = model.lattice.width;
            let prior = &model.mixtures[m].prior;
            let total: f64 = prior.iter().sum();
            let (mut r, mut c) = (0.0, 0.0);
            for (i, &p) in prior.iter().enumerate() {
                r += p * ((i / w) as f64 + 0.5);
                c += p * ((i % w) as f64 + 0.5);
            }
            (r / total, c / total)
        }
    }
}

/// Per-axis maximum distance from `center` to the modal box edges.
pub fn displacement(modal: &BBox, center: (f64, f64)) -> (f64, f64) {
    let jh = (center.0 - modal.top()).max(modal.bottom() - center.0);
    let jw = (center.1 - modal.left()).max(modal.right() - center.1);
    (jh, jw)
}

/// `[c'_x, c'_y, 2 j_h, 2 j_w]` in the representation frame (never clipped).
pub fn complete_amodal_box(modal: &BBox, center: (f64, f64)) -> Result<BBox> {
    modal.expect_frame(Frame::Representation)?;
    if !(modal.h > 0.0 && modal.w > 0.0) {
        return Err(Error::InvalidBox("non-positive modal extents".into()));
    }
    let (jh, jw) = displacement(modal, center);
    BBox::new(center.0, center.1, 2.0 * jh, 2.0 * jw, Frame::Representation)
}

/// Affine map between the representation frame and the image frame of one
/// proposal: `image = rep * scale + offset`, per axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameTransform {
    pub row_scale: f64,
    pub col_scale: f64,
    pub row_offset: f64,
    pub col_offset: f64,
}

impl FrameTransform {
    /// The proposal box (image frame) was resampled to `crop_h x crop_w`
    /// cells, and the alignment placed crop cell `anchor` at rep cell `d`.
    pub fn from_alignment(alignment: &Alignment, crop_h: usize, crop_w: usize, proposal: &BBox) -> Result<Self> {
        proposal.expect_frame(Frame::Image)?;
        if crop_h == 0 || crop_w == 0 || !(proposal.h > 0.0 && proposal.w > 0.0) {
            return Err(Error::InvalidBox("degenerate proposal box".into()));
        }
        let row_scale = proposal.h / crop_h as f64;
        let col_scale = proposal.w / crop_w as f64;
        let (or, oc) = alignment.offset();
        Ok(Self {
            row_scale,
            col_scale,
            row_offset: proposal.top() - or as f64 * row_scale,
            col_offset: proposal.left() - oc as f64 * col_scale,
        })
    }

    pub fn to_image(&self, b: &BBox) -> Result<BBox> {
        b.expect_frame(Frame::Representation)?;
        BBox::new(
            b.cx * self.row_scale + self.row_offset,
            b.cy * self.col_scale + self.col_offset,
            b.h * self.row_scale,
            b.w * self.col_scale,
            Frame::Image,
        )
    }

    pub fn to_representation(&self, b: &BBox) -> Result<BBox> {
        b.expect_frame(Frame::Image)?;
        BBox::new(
            (b.cx - self.row_offset) / self.row_scale,
            (b.cy - self.col_offset) / self.col_scale,
            b.h / self.row_scale,
            b.w / self.col_scale,
            Frame::Representation,
        )
    }
}

/// Maps a representation-frame box into the image and clips it to the image
/// bounds; the flag reports clipping.
pub fn to_image_frame(
    box_rep: &BBox,
    transform: &FrameTransform,
    image_height: f64,
    image_width: f64,
) -> Result<(BBox, bool)> {
    let b = transform.to_image(box_rep)?;
    let (c, clipped) = b.clipped(image_height, image_width)?;
    if clipped {
        log::info!("amodal box {:?} clipped to {image_height}x{image_width}", b.as_array());
    }
    Ok((c, clipped))
}
