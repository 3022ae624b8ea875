//! Feature-map and label-grid containers, unit normalization and the FMAP
//! binary format.
//!
//! Coordinates follow one convention everywhere: `x` is the row axis and `y`
//! the column axis. Cell `(r, c)` covers `[r, r + 1) x [c, c + 1)`, so a box
//! `[cx, cy, h, w]` spans rows `cx - h/2 .. cx + h/2`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};

/// Vectors whose norm is within this distance of 1 are left untouched by
/// [`normalize`]. It exceeds the worst-case norm drift of an f32-rounded unit
/// vector (2^-24), which makes save/load a byte-exact fixpoint.
pub const UNIT_NORM_TOLERANCE: f64 = 2.0e-7;

/// Norm below which a vector is treated as zero.
pub const ZERO_NORM: f64 = 1e-12;

pub const FMAP_MAGIC: [u8; 4] = *b"FMAP";
pub const FMAP_VERSION: u16 = 1;
pub const FMAP_HEADER_LEN: usize = 20;
pub const MAX_AXIS: u64 = 4096;

/// Normalizes `v` to unit length.
///
/// Near-unit inputs are returned unchanged, so `normalize(normalize(v))` is
/// bitwise equal to `normalize(v)`. Zero vectors map to `e1`.
pub fn normalize(v: &[f64]) -> Result<Vec<f64>> {
    normalize_with_tolerance(v, UNIT_NORM_TOLERANCE)
}

pub fn normalize_with_tolerance(v: &[f64], tolerance: f64) -> Result<Vec<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite);
    }
    let scale = v.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
    let mut out = vec![0.0; v.len()];
    if scale == 0.0 {
        if let Some(first) = out.first_mut() {
            *first = 1.0;
        }
        return Ok(out);
    }
    let scaled_norm = v.iter().map(|&x| (x / scale).powi(2)).sum::<f64>().sqrt();
    let norm = scale * scaled_norm;
    if norm <= ZERO_NORM {
        out[0] = 1.0;
        return Ok(out);
    }
    if (norm - 1.0).abs() <= tolerance {
        out.copy_from_slice(v);
        return Ok(out);
    }
    for (o, &x) in out.iter_mut().zip(v) {
        *o = x / scale / scaled_norm;
    }
    Ok(out)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// H x W lattice of D-dimensional unit vectors, row-major, channel innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    depth: usize,
    data: Vec<f64>,
}

/// Summary of what normalization did while constructing a map.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    /// Cells whose raw vector was zero and were replaced by `e1`.
    pub zero_vectors: usize,
    /// Cells whose vector had to be rescaled.
    pub renormalized: usize,
}

fn check_axis(axis: &'static str, value: u64, min: u64) -> std::result::Result<(), FormatError> {
    if value < min || value > MAX_AXIS {
        return Err(FormatError::Dimension {
            axis,
            value,
            max: MAX_AXIS,
        });
    }
    Ok(())
}

impl FeatureMap {
    /// Builds a map from raw vectors, normalizing every cell.
    pub fn new(height: usize, width: usize, depth: usize, raw: Vec<f64>) -> Result<Self> {
        Self::with_report(height, width, depth, raw).map(|(m, _)| m)
    }

    pub fn with_report(
        height: usize,
        width: usize,
        depth: usize,
        mut raw: Vec<f64>,
    ) -> Result<(Self, LoadReport)> {
        check_axis("height", height as u64, 1)?;
        check_axis("width", width as u64, 1)?;
        check_axis("depth", depth as u64, 2)?;
        if raw.len() != height * width * depth {
            return Err(Error::DimensionMismatch {
                expected: height * width * depth,
                found: raw.len(),
            });
        }
        let mut report = LoadReport::default();
        for cell in raw.chunks_exact_mut(depth) {
            let unit = normalize(cell)?;
            if cell.iter().all(|&x| x.abs() <= ZERO_NORM) && norm(cell) <= ZERO_NORM {
                report.zero_vectors += 1;
            } else if unit.as_slice() != &*cell {
                report.renormalized += 1;
            }
            cell.copy_from_slice(&unit);
        }
        Ok((
            Self {
                height,
                width,
                depth,
                data: raw,
            },
            report,
        ))
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn vector(&self, row: usize, col: usize) -> &[f64] {
        self.cell(row * self.width + col)
    }

    pub fn cell(&self, index: usize) -> &[f64] {
        &self.data[index * self.depth..(index + 1) * self.depth]
    }

    pub fn iter_cells(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.depth)
    }

    /// Copies the rectangle `rows x cols` into a new map. Ranges must lie
    /// inside the lattice.
    pub fn crop(&self, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Result<Self> {
        if rows.is_empty() || cols.is_empty() || rows.end > self.height || cols.end > self.width {
            return Err(Error::InvalidDimensions(format!(
                "crop {rows:?} x {cols:?} outside {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(rows.len() * cols.len() * self.depth);
        for r in rows.clone() {
            for c in cols.clone() {
                data.extend_from_slice(self.vector(r, c));
            }
        }
        Ok(Self {
            height: rows.len(),
            width: cols.len(),
            depth: self.depth,
            data,
        })
    }
}

/// Writes the FMAP encoding of `map`.
pub fn write_feature_map<W: Write>(map: &FeatureMap, mut out: W) -> Result<(), FormatError> {
    let mut header = [0u8; FMAP_HEADER_LEN];
    header[0..4].copy_from_slice(&FMAP_MAGIC);
    header[4..6].copy_from_slice(&FMAP_VERSION.to_le_bytes());
    header[6..10].copy_from_slice(&(map.height as u32).to_le_bytes());
    header[10..14].copy_from_slice(&(map.width as u32).to_le_bytes());
    header[14..18].copy_from_slice(&(map.depth as u32).to_le_bytes());
    out.write_all(&header)?;
    let mut payload = Vec::with_capacity(map.data.len() * 4);
    for &x in &map.data {
        payload.extend_from_slice(&(x as f32).to_le_bytes());
    }
    out.write_all(&payload)?;
    out.flush()?;
    Ok(())
}

/// Parses an FMAP stream and normalizes its vectors.
pub fn read_feature_map<R: Read>(mut input: R) -> Result<(FeatureMap, LoadReport)> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes).map_err(FormatError::from)?;
    if bytes.len() < FMAP_HEADER_LEN {
        return Err(FormatError::MalformedHeader(format!(
            "{} bytes, header needs {FMAP_HEADER_LEN}",
            bytes.len()
        ))
        .into());
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != FMAP_MAGIC {
        return Err(FormatError::BadMagic { found: magic }.into());
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FMAP_VERSION {
        return Err(FormatError::UnsupportedVersion(version).into());
    }
    let read_u32 = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as u64;
    let (h, w, d) = (read_u32(6), read_u32(10), read_u32(14));
    if bytes[18] != 0 || bytes[19] != 0 {
        return Err(FormatError::MalformedHeader("non-zero padding".into()).into());
    }
    check_axis("height", h, 1)?;
    check_axis("width", w, 1)?;
    check_axis("depth", d, 2)?;
    let count = (h * w * d) as usize;
    let expected = FMAP_HEADER_LEN + count * 4;
    if bytes.len() < expected {
        return Err(FormatError::Truncated {
            expected,
            found: bytes.len(),
        }
        .into());
    }
    if bytes.len() > expected {
        return Err(FormatError::TrailingBytes.into());
    }
    let mut raw = Vec::with_capacity(count);
    for (i, chunk) in bytes[FMAP_HEADER_LEN..].chunks_exact(4).enumerate() {
        let x = f32::from_le_bytes(chunk.try_into().unwrap());
        if !x.is_finite() {
            return Err(FormatError::NonFinite(i).into());
        }
        raw.push(x as f64);
    }
    FeatureMap::with_report(h as usize, w as usize, d as usize, raw)
}

pub fn load_feature_map(path: impl AsRef<Path>) -> Result<(FeatureMap, LoadReport)> {
    let file = File::open(path).map_err(FormatError::from)?;
    read_feature_map(BufReader::new(file))
}

pub fn save_feature_map(map: &FeatureMap, path: impl AsRef<Path>) -> Result<(), FormatError> {
    let file = File::create(path)?;
    write_feature_map(map, BufWriter::new(file))
}

/// Per-cell segmentation label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(i8)]
pub enum Label {
    Occluded = -1,
    Context = 0,
    Foreground = 1,
}

impl Label {
    pub fn value(self) -> i8 {
        self as i8
    }

    pub fn from_value(v: i64) -> Option<Self> {
        match v {
            -1 => Some(Label::Occluded),
            0 => Some(Label::Context),
            1 => Some(Label::Foreground),
            _ => None,
        }
    }
}

/// Tri-state labels on a lattice.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelGrid {
    height: usize,
    width: usize,
    labels: Vec<Label>,
}

impl LabelGrid {
    pub fn filled(height: usize, width: usize, label: Label) -> Self {
        Self {
            height,
            width,
            labels: vec![label; height * width],
        }
    }

    pub fn from_labels(height: usize, width: usize, labels: Vec<Label>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::DimensionMismatch {
                expected: height * width,
                found: labels.len(),
            });
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> Label {
        self.labels[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, label: Label) {
        self.labels[row * self.width + col] = label;
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn same_shape(&self, map: &FeatureMap) -> bool {
        self.height == map.height() && self.width == map.width()
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{} {}\n", self.height, self.width);
        for row in self.labels.chunks(self.width) {
            let line: Vec<String> = row.iter().map(|l| l.value().to_string()).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, FormatError> {
        let bad = |m: String| FormatError::LabelGrid(m);
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| bad("empty input".into()))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| bad(format!("bad header token {t:?}"))))
            .collect::<std::result::Result<_, _>>()?;
        let [h, w] = dims[..] else {
            return Err(bad(format!("header must be \"H W\", got {header:?}")));
        };
        if h == 0 || w == 0 {
            return Err(bad("zero dimension".into()));
        }
        let mut labels = Vec::with_capacity(h * w);
        for r in 0..h {
            let line = lines.next().ok_or_else(|| bad(format!("missing row {r}")))?;
            let row: Vec<Label> = line
                .split_whitespace()
                .map(|t| {
                    t.parse::<i64>()
                        .ok()
                        .and_then(Label::from_value)
                        .ok_or_else(|| bad(format!("invalid label {t:?} in row {r}")))
                })
                .collect::<std::result::Result<_, _>>()?;
            if row.len() != w {
                return Err(bad(format!("row {r} has {} entries, expected {w}", row.len())));
            }
            labels.extend(row);
        }
        if lines.next().is_some() {
            return Err(bad("extra rows".into()));
        }
        Ok(Self {
            height: h,
            width: w,
            labels,
        })
    }
}

/// Which lattice a box lives on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Frame {
    Image,
    Representation,
}

/// Center/size rectangle `[cx, cy, h, w]`; `cx`/`h` run along rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub h: f64,
    pub w: f64,
    pub frame: Frame,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, h: f64, w: f64, frame: Frame) -> Result<Self> {
        if !(h > 0.0 && w > 0.0) || ![cx, cy, h, w].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidBox(format!("[{cx}, {cy}, {h}, {w}]")));
        }
        Ok(Self { cx, cy, h, w, frame })
    }

    /// Box from half-open edge coordinates.
    pub fn from_edges(top: f64, bottom: f64, left: f64, right: f64, frame: Frame) -> Result<Self> {
        Self::new(
            (top + bottom) / 2.0,
            (left + right) / 2.0,
            bottom - top,
            right - left,
            frame,
        )
    }

    /// Tight box around cells `rows x cols` (half-open ranges).
    pub fn from_cells(
        rows: std::ops::Range<usize>,
        cols: std::ops::Range<usize>,
        frame: Frame,
    ) -> Result<Self> {
        Self::from_edges(
            rows.start as f64,
            rows.end as f64,
            cols.start as f64,
            cols.end as f64,
            frame,
        )
    }

    /// Bounding box of the `true` cells of a row-major mask, `None` if empty.
    pub fn of_mask(mask: &[bool], height: usize, width: usize, frame: Frame) -> Option<Self> {
        let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            let (r, c) = (i / width, i % width);
            r0 = r0.min(r);
            r1 = r1.max(r + 1);
            c0 = c0.min(c);
            c1 = c1.max(c + 1);
        }
        debug_assert!(mask.len() == height * width);
        if r0 == usize::MAX {
            return None;
        }
        Self::from_cells(r0..r1, c0..c1, frame).ok()
    }

    pub fn top(&self) -> f64 {
        self.cx - self.h / 2.0
    }

    pub fn bottom(&self) -> f64 {
        self.cx + self.h / 2.0
    }

    pub fn left(&self) -> f64 {
        self.cy - self.w / 2.0
    }

    pub fn right(&self) -> f64 {
        self.cy + self.w / 2.0
    }

    pub fn area(&self) -> f64 {
        self.h * self.w
    }

    pub fn expect_frame(&self, frame: Frame) -> Result<()> {
        if self.frame != frame {
            return Err(Error::FrameMismatch {
                expected: frame,
                found: self.frame,
            });
        }
        Ok(())
    }

    pub fn translated(&self, drow: f64, dcol: f64) -> Self {
        Self {
            cx: self.cx + drow,
            cy: self.cy + dcol,
            ..*self
        }
    }

    /// Interval containment on both axes.
    pub fn contains(&self, other: &BBox) -> bool {
        self.top() <= other.top()
            && self.bottom() >= other.bottom()
            && self.left() <= other.left()
            && self.right() >= other.right()
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let dh = (self.bottom().min(other.bottom()) - self.top().max(other.top())).max(0.0);
        let dw = (self.right().min(other.right()) - self.left().max(other.left())).max(0.0);
        dh * dw
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            return 0.0;
        }
        inter / union
    }

    /// Cells whose centers lie inside the box, clamped to `0..height` and
    /// `0..width`.
    pub fn cell_ranges(
        &self,
        height: usize,
        width: usize,
    ) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let span = |lo: f64, hi: f64, n: usize| {
            let start = (lo - 0.5).ceil().max(0.0) as usize;
            let end = ((hi - 0.5).ceil().max(0.0) as usize).min(n);
            start.min(end)..end
        };
        (
            span(self.top(), self.bottom(), height),
            span(self.left(), self.right(), width),
        )
    }

    /// Intersection with `[0, height) x [0, width)`; second value reports
    /// whether anything was cut.
    pub fn clipped(&self, height: f64, width: f64) -> Result<(Self, bool)> {
        let top = self.top().max(0.0);
        let bottom = self.bottom().min(height);
        let left = self.left().max(0.0);
        let right = self.right().min(width);
        let clipped =
            top > self.top() || bottom < self.bottom() || left > self.left() || right < self.right();
        if bottom <= top || right <= left {
            return Err(Error::InvalidBox(format!(
                "box [{}, {}, {}, {}] lies outside {height}x{width}",
                self.cx, self.cy, self.h, self.w
            )));
        }
        Ok((Self::from_edges(top, bottom, left, right, self.frame)?, clipped))
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.h, self.w]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize(&[3.0, 4.0]).unwrap(), vec![0.6, 0.8]);
        assert_eq!(normalize(&[0.0, 0.0]).unwrap(), vec![1.0, 0.0]);
        assert!(matches!(normalize(&[f64::NAN, 1.0]), Err(Error::NonFinite)));
        let huge = normalize(&[1e300, 1e300]).unwrap();
        assert!((norm(&huge) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_vectors_normalize_to_half() {
        let (map, report) = FeatureMap::with_report(2, 2, 4, vec![7.0; 16]).unwrap();
        assert!(map.data().iter().all(|&x| x == 0.5));
        assert_eq!(report.zero_vectors, 0);
    }

    #[test]
    fn zero_vectors_are_reported() {
        let mut raw = vec![1.0; 12];
        raw[3..6].fill(0.0);
        let (map, report) = FeatureMap::with_report(2, 2, 3, raw).unwrap();
        assert_eq!(report.zero_vectors, 1);
        assert_eq!(map.vector(0, 1), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn header_layout() {
        let map = FeatureMap::new(3, 5, 8, vec![1.0; 120]).unwrap();
        let mut bytes = Vec::new();
        write_feature_map(&map, &mut bytes).unwrap();
        assert_eq!(&bytes[0..4], b"FMAP");
        assert_eq!(bytes.len(), FMAP_HEADER_LEN + 3 * 5 * 8 * 4);
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(&bytes[18..20], &[0, 0]);
    }

    fn header(h: u32, w: u32, d: u32) -> Vec<u8> {
        let mut b = b"FMAP".to_vec();
        b.extend_from_slice(&1u16.to_le_bytes());
        for v in [h, w, d] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.extend_from_slice(&[0, 0]);
        b
    }

    #[test]
    fn distinct_format_errors() {
        let zero_h = header(0, 2, 4);
        assert!(matches!(
            read_feature_map(&zero_h[..]),
            Err(Error::Format(FormatError::Dimension { axis: "height", .. }))
        ));
        let big = header(4097, 2, 4);
        assert!(matches!(
            read_feature_map(&big[..]),
            Err(Error::Format(FormatError::Dimension { value: 4097, .. }))
        ));
        let mut truncated = header(2, 2, 2);
        truncated.extend_from_slice(&[0u8; 12]);
        assert!(matches!(
            read_feature_map(&truncated[..]),
            Err(Error::Format(FormatError::Truncated { .. }))
        ));
        let mut magic = header(1, 1, 2);
        magic[0] = b'X';
        assert!(matches!(
            read_feature_map(&magic[..]),
            Err(Error::Format(FormatError::BadMagic { .. }))
        ));
        assert!(matches!(
            read_feature_map(&b"FMA"[..]),
            Err(Error::Format(FormatError::MalformedHeader(_)))
        ));
        let mut version = header(1, 1, 2);
        version[4] = 2;
        assert!(matches!(
            read_feature_map(&version[..]),
            Err(Error::Format(FormatError::UnsupportedVersion(2)))
        ));
    }

    #[test]
    fn label_grid_text() {
        let text = "2 3\n1 0 -1\n0 0 1\n";
        let grid = LabelGrid::from_text(text).unwrap();
        assert_eq!(grid.get(0, 2), Label::Occluded);
        assert_eq!(grid.to_text(), text);
        assert!(LabelGrid::from_text("1 2\n1 2\n").is_err());
        assert!(LabelGrid::from_text("2 2\n1 0\n").is_err());
    }

    #[test]
    fn box_geometry() {
        let b = BBox::from_cells(2..6, 3..5, Frame::Image).unwrap();
        assert_eq!(b.as_array(), [4.0, 4.0, 4.0, 2.0]);
        assert_eq!(b.cell_ranges(10, 10), (2..6, 3..5));
        let shifted = b.translated(0.0, 1.0);
        assert!((b.iou(&shifted) - 1.0 / 3.0).abs() < 1e-12);
        assert!(BBox::new(0.0, 0.0, 0.0, 1.0, Frame::Image).is_err());
        let (c, clipped) = BBox::new(1.0, 1.0, 4.0, 4.0, Frame::Image)
            .unwrap()
            .clipped(10.0, 10.0)
            .unwrap();
        assert!(clipped);
        assert_eq!(c.as_array(), [1.5, 1.5, 3.0, 3.0]);
    }
}
