//! Box-labeled training examples and the per-image state the prior
//! refinement loop carries between iterations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BBox, FeatureMap, Frame, Label, LabelGrid};
use crate::vmf::{Responses, VmfDictionary};

/// One weakly labeled training image: a representation-lattice feature map,
/// its class, and its modal box (representation frame).
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub map: FeatureMap,
    pub class_index: usize,
    pub modal_box: BBox,
}

impl TrainingExample {
    pub fn new(map: FeatureMap, class_index: usize, modal_box: BBox) -> Result<Self> {
        modal_box.expect_frame(Frame::Representation)?;
        Ok(Self {
            map,
            class_index,
            modal_box,
        })
    }

    /// Row-major mask of cells whose centers lie inside the modal box.
    pub fn box_mask(&self) -> Vec<bool> {
        let (h, w) = (self.map.height(), self.map.width());
        let (rows, cols) = self.modal_box.cell_ranges(h, w);
        let mut mask = vec![false; h * w];
        for r in rows {
            for c in cols.clone() {
                mask[r * w + c] = true;
            }
        }
        mask
    }
}

/// Mixture assignment and current labels for every training example, in
/// example order.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState {
    pub assignments: Vec<usize>,
    pub labels: Vec<LabelGrid>,
}

#[derive(Serialize, Deserialize)]
struct StateFile {
    assignments: Vec<usize>,
    labels: Vec<Vec<Vec<i8>>>,
}

impl TrainingState {
    pub fn to_json(&self) -> Result<String> {
        let labels = self
            .labels
            .iter()
            .map(|g| {
                g.labels()
                    .chunks(g.width())
                    .map(|r| r.iter().map(|l| l.value()).collect())
                    .collect()
            })
            .collect();
        Ok(serde_json::to_string(&StateFile {
            assignments: self.assignments.clone(),
            labels,
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: StateFile = serde_json::from_str(text)?;
        let labels = f
            .labels
            .into_iter()
            .map(|rows| {
                let h = rows.len();
                let w = rows.first().map_or(0, |r| r.len());
                let flat = rows
                    .into_iter()
                    .flatten()
                    .map(|v| Label::from_value(v as i64).ok_or(Error::Config(format!("bad label {v}"))))
                    .collect::<Result<Vec<_>>>()?;
                LabelGrid::from_labels(h, w, flat)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            assignments: f.assignments,
            labels,
        })
    }
}

/// Projects every example once against the dictionary.
pub fn project(examples: &[TrainingExample], dict: &VmfDictionary) -> Result<Vec<Responses>> {
    examples.iter().map(|e| dict.responses(&e.map)).collect()
}
