//! Mean IoU per occlusion level.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Label, LabelGrid};

/// `|a & b| / |a | b|`; two empty sets score 1.
pub fn iou(a: &[bool], b: &[bool]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn mask(g: &LabelGrid, f: impl Fn(Label) -> bool) -> Vec<bool> {
    g.labels().iter().map(|&l| f(l)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskScores {
    pub amodal: f64,
    pub modal: f64,
    pub occluded: f64,
}

pub fn score_masks(pred: &LabelGrid, gt: &LabelGrid) -> Result<MaskScores> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::LatticeMismatch {
            expected_h: gt.height(),
            expected_w: gt.width(),
            found_h: pred.height(),
            found_w: pred.width(),
        });
    }
    let amodal = |l: Label| l != Label::Context;
    let modal = |l: Label| l == Label::Foreground;
    let occ = |l: Label| l == Label::Occluded;
    Ok(MaskScores {
        amodal: iou(&mask(pred, amodal), &mask(gt, amodal)),
        modal: iou(&mask(pred, modal), &mask(gt, modal)),
        occluded: iou(&mask(pred, occ), &mask(gt, occ)),
    })
}

#[derive(Debug, Clone)]
pub struct EvalRecord {
    pub id: String,
    pub fg_level: u8,
    pub bg_level: u8,
    pub gt: LabelGrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelRow {
    pub fg_level: u8,
    pub bg_level: u8,
    pub count: usize,
    pub amodal: f64,
    pub modal: f64,
    pub occluded: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Sorted by `(fg_level, bg_level)`.
    pub rows: Vec<LevelRow>,
    pub grand: LevelRow,
    pub missing: Vec<String>,
}

fn mean_row(fg: u8, bg: u8, scores: &[MaskScores]) -> LevelRow {
    let n = scores.len();
    let avg = |f: fn(&MaskScores) -> f64| {
        if n == 0 {
            0.0
        } else {
            scores.iter().map(f).sum::<f64>() / n as f64
        }
    };
    LevelRow {
        fg_level: fg,
        bg_level: bg,
        count: n,
        amodal: avg(|s| s.amodal),
        modal: avg(|s| s.modal),
        occluded: avg(|s| s.occluded),
    }
}

/// Scores every record that has a prediction; records without one are
/// listed in `missing`.
pub fn evaluate(records: &[EvalRecord], predictions: &BTreeMap<String, LabelGrid>) -> Result<EvalReport> {
    let mut by_level: BTreeMap<(u8, u8), Vec<MaskScores>> = BTreeMap::new();
    let mut all = Vec::new();
    let mut missing = Vec::new();
    for r in records {
        match predictions.get(&r.id) {
            Some(p) => {
                let s = score_masks(p, &r.gt)?;
                by_level.entry((r.fg_level, r.bg_level)).or_default().push(s);
                all.push(s);
            }
            None => missing.push(r.id.clone()),
        }
    }
    missing.sort();
    let rows = by_level.iter().map(|(&(f, b), s)| mean_row(f, b, s)).collect();
    Ok(EvalReport {
        rows,
        grand: mean_row(u8::MAX, u8::MAX, &all),
        missing,
    })
}

impl EvalReport {
    /// Count-weighted means over background levels, one per foreground level.
    pub fn by_fg_level(&self) -> Vec<LevelRow> {
        let mut groups: BTreeMap<u8, Vec<&LevelRow>> = BTreeMap::new();
        for r in &self.rows {
            groups.entry(r.fg_level).or_default().push(r);
        }
        groups
            .into_iter()
            .map(|(fg, rs)| {
                let n: usize = rs.iter().map(|r| r.count).sum();
                let w = |f: fn(&LevelRow) -> f64| {
                    rs.iter().map(|r| f(r) * r.count as f64).sum::<f64>() / n.max(1) as f64
                };
                LevelRow {
                    fg_level: fg,
                    bg_level: u8::MAX,
                    count: n,
                    amodal: w(|r| r.amodal),
                    modal: w(|r| r.modal),
                    occluded: w(|r| r.occluded),
                }
            })
            .collect()
    }

    /// Amodal columns per (FG, BG) level plus per-FG and grand means, in
    /// percent.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<8}{:<8}{:>7}{:>9}{:>9}{:>9}", "FG", "BG", "n", "amodal", "modal", "occl");
        let level = |l: u8| if l == u8::MAX { "all".to_string() } else { format!("L{l}") };
        for r in self.rows.iter().chain(self.by_fg_level().iter()).chain([&self.grand]) {
            let _ = writeln!(
                s,
                "{:<8}{:<8}{:>7}{:>9.1}{:>9.1}{:>9.1}",
                level(r.fg_level),
                level(r.bg_level),
                r.count,
                100.0 * r.amodal,
                100.0 * r.modal,
                100.0 * r.occluded
            );
        }
        if !self.missing.is_empty() {
            let _ = writeln!(s, "missing predictions: {}", self.missing.join(", "));
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("fg_level,bg_level,count,amodal,modal,occluded\n");
        let level = |l: u8| if l == u8::MAX { "all".to_string() } else { l.to_string() };
        for r in self.rows.iter().chain([&self.grand]) {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                level(r.fg_level),
                level(r.bg_level),
                r.count,
                r.amodal,
                r.modal,
                r.occluded
            );
        }
        s
    }
}
