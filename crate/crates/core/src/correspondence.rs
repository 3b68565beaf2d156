//! Observations the fitter is driven by: dense pixel-to-surface
//! correspondences and sparse 2D keypoints.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::NUM_JOINTS;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObservationError {
    #[error("correspondence map has no records")]
    Empty,
    #[error("record {index}: face {face} out of range (model has {num_faces})")]
    FaceOutOfRange {
        index: usize,
        face: u32,
        num_faces: usize,
    },
    #[error("record {index}: barycentric coordinates {bary:?} are not a convex combination")]
    BadBarycentric { index: usize, bary: [f64; 3] },
    #[error("record {index}: pixel ({u}, {v}) lies outside the {width}×{height} image")]
    PixelOutOfFrame {
        index: usize,
        u: f64,
        v: f64,
        width: u32,
        height: u32,
    },
    #[error("keypoint {index}: confidence {conf} outside [0, 1]")]
    BadConfidence { index: usize, conf: f64 },
    #[error("keypoint {index}: non-finite coordinate")]
    NonFiniteKeypoint { index: usize },
}

impl ObservationError {
    /// Index of the offending record, for correspondence-map failures.
    pub fn record_index(&self) -> Option<usize> {
        match self {
            Self::FaceOutOfRange { index, .. } | Self::BadBarycentric { index, .. } | Self::PixelOutOfFrame { index, .. } => {
                Some(*index)
            }
            _ => None,
        }
    }
}

/// One pixel linked to a point on the mesh surface.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceRecord {
    pub pixel: [f64; 2],
    pub face: u32,
    pub bary: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DenseCorrespondenceMap {
    pub image_size: (u32, u32),
    pub records: Vec<CorrespondenceRecord>,
}

impl DenseCorrespondenceMap {
    pub fn new(image_size: (u32, u32), records: Vec<CorrespondenceRecord>) -> Self {
        Self { image_size, records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Check record invariants against a model with `num_faces` faces.
    /// An empty map is structurally valid; losses reject it separately.
    pub fn validate(&self, num_faces: usize) -> Result<(), ObservationError> {
        let (w, h) = self.image_size;
        for (index, r) in self.records.iter().enumerate() {
            if r.face as usize >= num_faces {
                return Err(ObservationError::FaceOutOfRange {
                    index,
                    face: r.face,
                    num_faces,
                });
            }
            let sum: f64 = r.bary.iter().sum();
            if r.bary.iter().any(|b| !(*b >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return Err(ObservationError::BadBarycentric { index, bary: r.bary });
            }
            let [u, v] = r.pixel;
            if !(u >= 0.0 && u < w as f64 && v >= 0.0 && v < h as f64) {
                return Err(ObservationError::PixelOutOfFrame {
                    index,
                    u,
                    v,
                    width: w,
                    height: h,
                });
            }
        }
        Ok(())
    }

    /// Concatenate two maps over the same image.
    pub fn union(&self, other: &Self) -> Self {
        let mut records = self.records.clone();
        records.extend_from_slice(&other.records);
        Self {
            image_size: self.image_size,
            records,
        }
    }
}

/// 24 joints as `(x, y, confidence)`; absent joints have confidence 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Keypoints2D {
    pub joints: [[f64; 3]; NUM_JOINTS],
}

impl Keypoints2D {
    pub fn absent() -> Self {
        Self {
            joints: [[0.0; 3]; NUM_JOINTS],
        }
    }

    pub fn validate(&self) -> Result<(), ObservationError> {
        for (index, &[x, y, conf]) in self.joints.iter().enumerate() {
            if !(0.0..=1.0).contains(&conf) {
                return Err(ObservationError::BadConfidence { index, conf });
            }
            if !(x.is_finite() && y.is_finite()) {
                return Err(ObservationError::NonFiniteKeypoint { index });
            }
        }
        Ok(())
    }
}
