//! Shape and silhouette evaluation metrics.

use nalgebra::Vector3;
use thiserror::Error;

use crate::model::{ParamError, SmplModel};
use crate::raster::{MaskError, SilhouetteMask};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error(transparent)]
    Params(#[from] ParamError),
    #[error("vertex counts differ: {0} vs {1}")]
    VertexCount(usize, usize),
    #[error("predicted mesh has zero spread after centering")]
    Degenerate,
    #[error(transparent)]
    Mask(#[from] MaskError),
}

fn centered(vertices: &[[f64; 3]]) -> Vec<Vector3<f64>> {
    let n = vertices.len() as f64;
    let mean = vertices.iter().fold(Vector3::zeros(), |acc, v| acc + Vector3::from(*v)) / n;
    vertices.iter().map(|v| Vector3::from(*v) - mean).collect()
}

/// Mean per-vertex distance in millimeters after mean-centering both vertex
/// sets and scaling `pred` by the least-squares scalar onto `gt`.
pub fn scale_corrected_vertex_error(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<f64, MetricError> {
    if pred.len() != gt.len() {
        return Err(MetricError::VertexCount(pred.len(), gt.len()));
    }
    if pred.is_empty() {
        return Err(MetricError::Degenerate);
    }
    let p = centered(pred);
    let g = centered(gt);
    let pp: f64 = p.iter().map(|v| v.norm_squared()).sum();
    if !(pp > 0.0) {
        return Err(MetricError::Degenerate);
    }
    let pg: f64 = p.iter().zip(&g).map(|(a, b)| a.dot(b)).sum();
    let s = pg / pp;
    let total: f64 = p.iter().zip(&g).map(|(a, b)| (a * s - b).norm()).sum();
    Ok(total / p.len() as f64 * 1000.0)
}

/// T-pose per-vertex error with scale correction, in millimeters.
pub fn pve_t_sc(model: &SmplModel, beta_pred: &[f64], beta_gt: &[f64]) -> Result<f64, MetricError> {
    let pred = model.tpose_mesh(beta_pred)?;
    let gt = model.tpose_mesh(beta_gt)?;
    scale_corrected_vertex_error(&pred.vertices, &gt.vertices)
}

/// Intersection over union of two masks; two empty masks score 1.
pub fn miou(pred: &SilhouetteMask, gt: &SilhouetteMask) -> Result<f64, MetricError> {
    if pred.size() != gt.size() {
        return Err(MaskError::SizeMismatch(pred.size(), gt.size()).into());
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (a, b) in pred.bits().iter().zip(gt.bits()) {
        inter += (*a && *b) as usize;
        union += (*a || *b) as usize;
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}
