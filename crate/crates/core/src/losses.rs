//! Fitting and supervision energies with analytic gradients.
//!
//! Every loss is a plain sum of squared residuals; weights are applied only
//! when terms are combined into a [`LossReport`].

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{Camera, Intrinsics, ProjectionError};
use crate::correspondence::{DenseCorrespondenceMap, Keypoints2D, ObservationError};
use crate::model::{BodyParams, ParamError, SmplModel, NUM_JOINTS};
use crate::skinning::{ParamGrad, PoseState};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    Params(#[from] ParamError),
    #[error(transparent)]
    Observation(#[from] ObservationError),
    #[error("{term}: {source}")]
    Projection {
        term: &'static str,
        source: ProjectionError,
    },
    #[error("loss weight `{0}` must be a finite non-negative number")]
    BadWeight(&'static str),
}

/// Term weights; all non-negative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub mesh: f64,
    pub joints_3d: f64,
    pub keypoints_2d: f64,
    pub tpose: f64,
    pub dp: f64,
    pub prior_theta: f64,
    pub prior_beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::zero()
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            mesh: 0.0,
            joints_3d: 0.0,
            keypoints_2d: 0.0,
            tpose: 0.0,
            dp: 0.0,
            prior_theta: 0.0,
            prior_beta: 0.0,
        }
    }

    /// Regression-stage weights: mesh 0.1, 3D 1.0, 2D 1.0, T-pose 0.1.
    pub fn regression() -> Self {
        Self {
            mesh: 0.1,
            joints_3d: 1.0,
            keypoints_2d: 1.0,
            tpose: 0.1,
            ..Self::zero()
        }
    }

    /// Training-time refinement weights: dp 99.9, pose prior 1.0, shape prior 5.0.
    pub fn refinement_training() -> Self {
        Self {
            dp: 99.9,
            prior_theta: 1.0,
            prior_beta: 5.0,
            ..Self::zero()
        }
    }

    /// Test-time refinement weights: dp 99.9, both priors 25.0.
    pub fn refinement_test() -> Self {
        Self {
            dp: 99.9,
            prior_theta: 25.0,
            prior_beta: 25.0,
            ..Self::zero()
        }
    }

    pub fn named(&self) -> [(&'static str, f64); 7] {
        [
            ("mesh", self.mesh),
            ("3d", self.joints_3d),
            ("2d", self.keypoints_2d),
            ("tpose", self.tpose),
            ("dp", self.dp),
            ("prior_theta", self.prior_theta),
            ("prior_beta", self.prior_beta),
        ]
    }

    pub fn validate(&self) -> Result<(), LossError> {
        match self.named().into_iter().find(|(_, w)| !(w.is_finite() && *w >= 0.0)) {
            Some((name, _)) => Err(LossError::BadWeight(name)),
            None => Ok(()),
        }
    }

    /// Set a weight by its short name (`dp`, `prior_theta`, `2d`, ...).
    pub fn set(&mut self, name: &str, value: f64) -> bool {
        let slot = match name {
            "mesh" => &mut self.mesh,
            "3d" | "joints_3d" => &mut self.joints_3d,
            "2d" | "keypoints_2d" => &mut self.keypoints_2d,
            "tpose" => &mut self.tpose,
            "dp" => &mut self.dp,
            "prior_theta" | "ptheta" => &mut self.prior_theta,
            "prior_beta" | "pbeta" => &mut self.prior_beta,
            _ => return false,
        };
        *slot = value;
        true
    }
}

/// Whether the correspondence energy is a sum over records or a mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DpNormalize {
    #[default]
    Sum,
    Mean,
}

/// A loss value with its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Scalar {
    pub value: f64,
    pub grad: ParamGrad,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossTerm {
    pub name: &'static str,
    /// Unweighted value.
    pub value: f64,
    pub weight: f64,
}

impl LossTerm {
    pub fn weighted(&self) -> f64 {
        self.weight * self.value
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub terms: Vec<LossTerm>,
    /// Present when the report was evaluated with gradients.
    pub gradient: Option<ParamGrad>,
}

impl LossReport {
    pub fn term(&self, name: &str) -> Option<&LossTerm> {
        self.terms.iter().find(|t| t.name == name)
    }

    /// Total is accumulated in term order.
    fn from_terms(terms: Vec<LossTerm>, gradient: Option<ParamGrad>) -> Self {
        let total = terms.iter().fold(0.0, |acc, t| acc + t.weighted());
        LossReport { total, terms, gradient }
    }
}

/// Lazily evaluated posed vertices plus a sparse gradient accumulator.
///
/// Several terms can share one field so each vertex is skinned once and a
/// single backward pass serves their weighted sum.
struct VertexField<'a> {
    model: &'a SmplModel,
    state: PoseState,
    posed: Vec<Option<Vector3<f64>>>,
    grads: Vec<Vector3<f64>>,
    touched: Vec<bool>,
    /// Gradient with respect to the camera translation.
    d_cam: Vector3<f64>,
}

impl<'a> VertexField<'a> {
    fn new(model: &'a SmplModel, params: &BodyParams) -> Self {
        let n = model.num_vertices();
        Self {
            model,
            state: PoseState::new(model, params),
            posed: vec![None; n],
            grads: Vec::new(),
            touched: Vec::new(),
            d_cam: Vector3::zeros(),
        }
    }

    fn get(&mut self, v: usize) -> Vector3<f64> {
        if let Some(p) = self.posed[v] {
            return p;
        }
        let p = self.state.vertex(self.model, v);
        self.posed[v] = Some(p);
        p
    }

    fn accumulate(&mut self, v: usize, g: Vector3<f64>) {
        if self.grads.is_empty() {
            self.grads = vec![Vector3::zeros(); self.posed.len()];
            self.touched = vec![false; self.posed.len()];
        }
        self.grads[v] += g;
        self.touched[v] = true;
    }

    fn backward(&self) -> ParamGrad {
        let list: Vec<(usize, Vector3<f64>)> = self
            .touched
            .iter()
            .enumerate()
            .filter(|(_, &t)| t)
            .map(|(v, _)| (v, self.grads[v]))
            .collect();
        let mut g = if list.is_empty() {
            ParamGrad::zeros(self.model.num_betas())
        } else {
            self.state.backward(self.model, &list)
        };
        g.cam_t = self.d_cam.into();
        g
    }

    fn regressed_joint(&mut self, k: usize) -> Vector3<f64> {
        let model = self.model;
        let mut x = Vector3::zeros();
        for &(i, w) in &model.regressor_rows[k] {
            x += self.get(i) * w;
        }
        x
    }

    fn accumulate_joint(&mut self, k: usize, g: Vector3<f64>) {
        let model = self.model;
        for &(i, w) in &model.regressor_rows[k] {
            self.accumulate(i, g * w);
        }
    }
}

/// A supervision target posed once, for reuse across many evaluations.
#[derive(Debug, Clone)]
pub struct PosedTarget {
    pub params: BodyParams,
    vertices: Vec<Vector3<f64>>,
    joints: Vec<Vector3<f64>>,
}

impl PosedTarget {
    pub fn new(model: &SmplModel, target: &BodyParams) -> Result<Self, LossError> {
        check_params(model, target)?;
        let mut field = VertexField::new(model, target);
        let vertices: Vec<_> = (0..model.num_vertices()).map(|v| field.get(v)).collect();
        let joints = (0..NUM_JOINTS).map(|k| field.regressed_joint(k)).collect();
        Ok(Self {
            params: target.clone(),
            vertices,
            joints,
        })
    }
}

fn check_params(model: &SmplModel, params: &BodyParams) -> Result<(), LossError> {
    params.validate(model.num_betas()).map_err(LossError::from)
}

// Term kernels. Each returns its unweighted value and, when `weight` is
// non-zero and gradients are wanted, accumulates `weight` times its gradient
// into the field.

fn dp_term(
    field: &mut VertexField,
    cam: &Camera,
    corr: &DenseCorrespondenceMap,
    weight: f64,
    want_grad: bool,
) -> Result<f64, LossError> {
    let backprop = want_grad && weight != 0.0;
    let faces = field.model.faces().clone();
    let mut value = 0.0;
    for (i, rec) in corr.records.iter().enumerate() {
        let face = faces[rec.face as usize];
        let mut point = Vector3::zeros();
        for c in 0..3 {
            point += field.get(face[c] as usize) * rec.bary[c];
        }
        let (px, jac) = cam
            .project_with_jacobian(&point, i)
            .map_err(|source| LossError::Projection { term: "dp", source })?;
        let r = px - nalgebra::Vector2::from(rec.pixel);
        value += r.norm_squared();
        if backprop {
            let d_point = jac.transpose() * r * (2.0 * weight);
            field.d_cam += d_point;
            for c in 0..3 {
                field.accumulate(face[c] as usize, d_point * rec.bary[c]);
            }
        }
    }
    Ok(value)
}

fn keypoints_term(field: &mut VertexField, cam: &Camera, kp: &Keypoints2D, weight: f64, want_grad: bool) -> Result<f64, LossError> {
    let backprop = want_grad && weight != 0.0;
    let mut value = 0.0;
    for (k, &[x, y, conf]) in kp.joints.iter().enumerate() {
        if conf == 0.0 {
            continue;
        }
        let joint = field.regressed_joint(k);
        let (px, jac) = cam
            .project_with_jacobian(&joint, k)
            .map_err(|source| LossError::Projection { term: "2d", source })?;
        let r = px - nalgebra::Vector2::new(x, y);
        value += conf * r.norm_squared();
        if backprop {
            let d_joint = jac.transpose() * r * (2.0 * conf * weight);
            field.d_cam += d_joint;
            field.accumulate_joint(k, d_joint);
        }
    }
    Ok(value)
}

fn joints_term(field: &mut VertexField, target: &PosedTarget, weight: f64, want_grad: bool) -> f64 {
    let backprop = want_grad && weight != 0.0;
    let mut value = 0.0;
    for (k, goal) in target.joints.iter().enumerate() {
        let r = field.regressed_joint(k) - goal;
        value += r.norm_squared();
        if backprop {
            field.accumulate_joint(k, r * (2.0 * weight));
        }
    }
    value
}

fn mesh_term(field: &mut VertexField, target: &PosedTarget, weight: f64, want_grad: bool) -> f64 {
    let backprop = want_grad && weight != 0.0;
    let mut value = 0.0;
    for (v, goal) in target.vertices.iter().enumerate() {
        let r = field.get(v) - goal;
        value += r.norm_squared();
        if backprop {
            field.accumulate(v, r * (2.0 * weight));
        }
    }
    value
}

fn dp_scale(normalize: DpNormalize, corr: &DenseCorrespondenceMap) -> f64 {
    match normalize {
        DpNormalize::Sum => 1.0,
        DpNormalize::Mean => 1.0 / corr.len() as f64,
    }
}

fn check_corr(model: &SmplModel, corr: &DenseCorrespondenceMap) -> Result<(), LossError> {
    if corr.is_empty() {
        return Err(ObservationError::Empty.into());
    }
    corr.validate(model.faces().len())?;
    Ok(())
}

pub(crate) fn dp_impl(
    model: &SmplModel,
    params: &BodyParams,
    intrinsics: &Intrinsics,
    corr: &DenseCorrespondenceMap,
    normalize: DpNormalize,
    want_grad: bool,
) -> Result<(f64, Option<ParamGrad>), LossError> {
    check_params(model, params)?;
    check_corr(model, corr)?;
    let cam = Camera::new(*intrinsics, params.cam_t);
    let mut field = VertexField::new(model, params);
    let scale = dp_scale(normalize, corr);
    let value = dp_term(&mut field, &cam, corr, scale, want_grad)?;
    Ok((value * scale, want_grad.then(|| field.backward())))
}

/// Dense correspondence energy: squared reprojection error of every
/// record's surface point, summed over records (pixels²).
pub fn loss_dp(
    model: &SmplModel,
    params: &BodyParams,
    intrinsics: &Intrinsics,
    corr: &DenseCorrespondenceMap,
) -> Result<Scalar, LossError> {
    let (value, grad) = dp_impl(model, params, intrinsics, corr, DpNormalize::Sum, true)?;
    Ok(Scalar {
        value,
        grad: grad.unwrap(),
    })
}

/// Squared vertex distance between the T-pose meshes of two shapes and its
/// gradient with respect to `beta`. Pose cannot enter this loss.
pub fn loss_tpose(model: &SmplModel, beta: &[f64], beta_hat: &[f64]) -> Result<(f64, Vec<f64>), LossError> {
    let nb = model.num_betas();
    for (field, b) in [("beta", beta), ("beta_hat", beta_hat)] {
        if b.len() != nb {
            return Err(ParamError::Dimension {
                field,
                expected: nb,
                found: b.len(),
            }
            .into());
        }
    }
    let delta: Vec<f64> = beta.iter().zip(beta_hat).map(|(a, b)| a - b).collect();
    let mut value = 0.0;
    let mut grad = vec![0.0; nb];
    for row in model.shapedirs.chunks_exact(nb) {
        let d: f64 = row.iter().zip(&delta).map(|(s, x)| s * x).sum();
        value += d * d;
        for (g, s) in grad.iter_mut().zip(row) {
            *g += 2.0 * d * s;
        }
    }
    Ok((value, grad))
}

/// Unweighted prior terms `(pose, shape)` with gradients.
pub(crate) fn prior_terms(model: &SmplModel, params: &BodyParams) -> Result<(Scalar, Scalar), LossError> {
    check_params(model, params)?;
    let nb = model.num_betas();
    let (pv, pg) = model.pose_prior().mahalanobis_sq(&params.theta);
    let (sv, sg) = model.shape_prior().mahalanobis_sq(&params.beta);
    let mut pose = ParamGrad::zeros(nb);
    pose.theta = pg;
    let mut shape = ParamGrad::zeros(nb);
    shape.beta = sg;
    Ok((Scalar { value: pv, grad: pose }, Scalar { value: sv, grad: shape }))
}

/// Weighted Gaussian priors over pose (`theta` only) and shape.
pub fn loss_prior(model: &SmplModel, params: &BodyParams, weight_theta: f64, weight_beta: f64) -> Result<Scalar, LossError> {
    let (pose, shape) = prior_terms(model, params)?;
    let mut grad = pose.grad.scaled(weight_theta);
    grad.add_scaled(&shape.grad, weight_beta);
    Ok(Scalar {
        value: weight_theta * pose.value + weight_beta * shape.value,
        grad,
    })
}

pub(crate) fn keypoints_impl(
    model: &SmplModel,
    params: &BodyParams,
    intrinsics: &Intrinsics,
    kp: &Keypoints2D,
    want_grad: bool,
) -> Result<(f64, Option<ParamGrad>), LossError> {
    check_params(model, params)?;
    kp.validate()?;
    let cam = Camera::new(*intrinsics, params.cam_t);
    let mut field = VertexField::new(model, params);
    let value = keypoints_term(&mut field, &cam, kp, 1.0, want_grad)?;
    Ok((value, want_grad.then(|| field.backward())))
}

/// Pixel positions of the regressed joints, computed exactly as the
/// keypoint energy computes them.
pub fn projected_joints(
    model: &SmplModel,
    params: &BodyParams,
    intrinsics: &Intrinsics,
) -> Result<[[f64; 2]; NUM_JOINTS], LossError> {
    check_params(model, params)?;
    let cam = Camera::new(*intrinsics, params.cam_t);
    let mut field = VertexField::new(model, params);
    let mut out = [[0.0; 2]; NUM_JOINTS];
    for (k, px) in out.iter_mut().enumerate() {
        let (p, _) = cam
            .project_with_jacobian(&field.regressed_joint(k), k)
            .map_err(|source| LossError::Projection { term: "2d", source })?;
        *px = [p.x, p.y];
    }
    Ok(out)
}

/// Confidence-weighted squared reprojection error of the regressed joints.
pub fn loss_2d(model: &SmplModel, params: &BodyParams, intrinsics: &Intrinsics, kp: &Keypoints2D) -> Result<Scalar, LossError> {
    let (value, grad) = keypoints_impl(model, params, intrinsics, kp, true)?;
    Ok(Scalar {
        value,
        grad: grad.unwrap(),
    })
}

pub(crate) fn joints_3d_impl(
    model: &SmplModel,
    params: &BodyParams,
    target: &PosedTarget,
    want_grad: bool,
) -> Result<(f64, Option<ParamGrad>), LossError> {
    check_params(model, params)?;
    let mut field = VertexField::new(model, params);
    let value = joints_term(&mut field, target, 1.0, want_grad);
    Ok((value, want_grad.then(|| field.backward())))
}

/// Squared distance between regressed joints of two posed meshes.
pub fn loss_3d(model: &SmplModel, params: &BodyParams, target: &BodyParams) -> Result<Scalar, LossError> {
    let (value, grad) = joints_3d_impl(model, params, &PosedTarget::new(model, target)?, true)?;
    Ok(Scalar {
        value,
        grad: grad.unwrap(),
    })
}

pub(crate) fn mesh_impl(
    model: &SmplModel,
    params: &BodyParams,
    target: &PosedTarget,
    want_grad: bool,
) -> Result<(f64, Option<ParamGrad>), LossError> {
    check_params(model, params)?;
    let mut field = VertexField::new(model, params);
    let value = mesh_term(&mut field, target, 1.0, want_grad);
    Ok((value, want_grad.then(|| field.backward())))
}

/// Squared distance between all posed vertices of two parameter sets.
pub fn loss_mesh(model: &SmplModel, params: &BodyParams, target: &BodyParams) -> Result<Scalar, LossError> {
    let (value, grad) = mesh_impl(model, params, &PosedTarget::new(model, target)?, true)?;
    Ok(Scalar {
        value,
        grad: grad.unwrap(),
    })
}

pub(crate) fn reg_impl(
    model: &SmplModel,
    params: &BodyParams,
    target: &PosedTarget,
    intrinsics: &Intrinsics,
    kp: &Keypoints2D,
    weights: &LossWeights,
    want_grad: bool,
) -> Result<LossReport, LossError> {
    weights.validate()?;
    check_params(model, params)?;
    kp.validate()?;
    let cam = Camera::new(*intrinsics, params.cam_t);
    let mut field = VertexField::new(model, params);
    let mesh = mesh_term(&mut field, target, weights.mesh, want_grad);
    let j3 = joints_term(&mut field, target, weights.joints_3d, want_grad);
    let k2 = keypoints_term(&mut field, &cam, kp, weights.keypoints_2d, want_grad)?;
    let (tp, tp_beta) = loss_tpose(model, &params.beta, &target.params.beta)?;
    let gradient = want_grad.then(|| {
        let mut g = field.backward();
        if weights.tpose != 0.0 {
            for (acc, d) in g.beta.iter_mut().zip(&tp_beta) {
                *acc += weights.tpose * d;
            }
        }
        g
    });
    let term = |name, weight, value| LossTerm { name, value, weight };
    Ok(LossReport::from_terms(
        vec![
            term("mesh", weights.mesh, mesh),
            term("3d", weights.joints_3d, j3),
            term("2d", weights.keypoints_2d, k2),
            term("tpose", weights.tpose, tp),
        ],
        gradient,
    ))
}

/// Regression supervision: weighted mesh, 3D joint, 2D keypoint and
/// T-pose terms against refined parameters `target`.
pub fn loss_reg(
    model: &SmplModel,
    params: &BodyParams,
    target: &BodyParams,
    intrinsics: &Intrinsics,
    kp: &Keypoints2D,
    weights: &LossWeights,
) -> Result<LossReport, LossError> {
    reg_impl(model, params, &PosedTarget::new(model, target)?, intrinsics, kp, weights, true)
}

/// The refinement objective: weighted correspondence energy plus priors,
/// optionally with a confidence-weighted keypoint term.
#[derive(Debug, Clone, Copy)]
pub struct IterObjective<'a> {
    pub model: &'a SmplModel,
    pub intrinsics: &'a Intrinsics,
    pub corr: &'a DenseCorrespondenceMap,
    pub keypoints: Option<&'a Keypoints2D>,
    pub weights: LossWeights,
    pub dp_normalize: DpNormalize,
}

impl IterObjective<'_> {
    pub fn evaluate(&self, params: &BodyParams, want_grad: bool) -> Result<LossReport, LossError> {
        let w = &self.weights;
        w.validate()?;
        check_params(self.model, params)?;
        check_corr(self.model, self.corr)?;
        if let Some(kp) = self.keypoints {
            kp.validate()?;
        }
        let cam = Camera::new(*self.intrinsics, params.cam_t);
        let mut field = VertexField::new(self.model, params);
        let scale = dp_scale(self.dp_normalize, self.corr);
        let dp = scale * dp_term(&mut field, &cam, self.corr, w.dp * scale, want_grad)?;
        let (pose, shape) = prior_terms(self.model, params)?;
        let mut terms = vec![
            LossTerm {
                name: "dp",
                value: dp,
                weight: w.dp,
            },
            LossTerm {
                name: "prior_theta",
                value: pose.value,
                weight: w.prior_theta,
            },
            LossTerm {
                name: "prior_beta",
                value: shape.value,
                weight: w.prior_beta,
            },
        ];
        if let Some(kp) = self.keypoints {
            let value = keypoints_term(&mut field, &cam, kp, w.keypoints_2d, want_grad)?;
            terms.push(LossTerm {
                name: "2d",
                value,
                weight: w.keypoints_2d,
            });
        }
        let gradient = want_grad.then(|| {
            let mut g = field.backward();
            for (prior, weight) in [(&pose.grad, w.prior_theta), (&shape.grad, w.prior_beta)] {
                if weight != 0.0 {
                    g.add_scaled(prior, weight);
                }
            }
            g
        });
        Ok(LossReport::from_terms(terms, gradient))
    }
}

/// Weighted correspondence energy plus Gaussian priors.
pub fn loss_iter(
    model: &SmplModel,
    params: &BodyParams,
    intrinsics: &Intrinsics,
    corr: &DenseCorrespondenceMap,
    weights: &LossWeights,
) -> Result<LossReport, LossError> {
    IterObjective {
        model,
        intrinsics,
        corr,
        keypoints: None,
        weights: *weights,
        dp_normalize: DpNormalize::Sum,
    }
    .evaluate(params, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correspondence::CorrespondenceRecord;
    use crate::fixture;

    fn setup() -> (&'static SmplModel, Intrinsics, BodyParams) {
        let model = fixture::model();
        let mut params = model.zero_params();
        params.gamma = [std::f64::consts::PI, 0.0, 0.0];
        params.cam_t = [0.0, -0.95, 45.0];
        (model, Intrinsics::default(), params)
    }

    fn self_consistent(model: &SmplModel, params: &BodyParams, intr: &Intrinsics, faces: &[u32]) -> DenseCorrespondenceMap {
        let mesh = model.skin(params).unwrap();
        let cam = Camera::new(*intr, params.cam_t);
        let bary = [0.2, 0.3, 0.5];
        let records = faces
            .iter()
            .map(|&f| {
                let tri = model.faces()[f as usize];
                let mut p = Vector3::zeros();
                for c in 0..3 {
                    p += Vector3::from(mesh.vertices[tri[c] as usize]) * bary[c];
                }
                let px = cam.project_point(&p, 0).unwrap();
                CorrespondenceRecord {
                    pixel: [px.x, px.y],
                    face: f,
                    bary,
                }
            })
            .collect();
        DenseCorrespondenceMap::new(intr.image_size, records)
    }

    #[test]
    fn dp_zero_when_self_consistent() {
        let (model, intr, params) = setup();
        let corr = self_consistent(model, &params, &intr, &[10, 500, 7000]);
        let s = loss_dp(model, &params, &intr, &corr).unwrap();
        assert!(s.value < 1e-12, "{}", s.value);
    }

    #[test]
    fn dp_single_record_three_pixels_off() {
        let (model, intr, params) = setup();
        let mut corr = self_consistent(model, &params, &intr, &[3000]);
        corr.records[0].pixel[0] += 3.0;
        let s = loss_dp(model, &params, &intr, &corr).unwrap();
        assert!((s.value - 9.0).abs() < 1e-9, "{}", s.value);
    }

    #[test]
    fn dp_rejects_empty_and_reports_behind_camera() {
        let (model, intr, mut params) = setup();
        let empty = DenseCorrespondenceMap::new(intr.image_size, vec![]);
        assert!(matches!(
            loss_dp(model, &params, &intr, &empty),
            Err(LossError::Observation(ObservationError::Empty))
        ));
        let corr = self_consistent(model, &params, &intr, &[1, 2]);
        params.cam_t[2] = -10.0;
        let err = loss_dp(model, &params, &intr, &corr).unwrap_err();
        assert!(matches!(
            err,
            LossError::Projection {
                term: "dp",
                source: ProjectionError::BehindCamera { index: 0, .. }
            }
        ));
    }

    #[test]
    fn dp_mean_normalization() {
        let (model, intr, params) = setup();
        let mut corr = self_consistent(model, &params, &intr, &[3000, 4000]);
        corr.records[0].pixel[1] += 2.0;
        let sum = dp_impl(model, &params, &intr, &corr, DpNormalize::Sum, false).unwrap().0;
        let mean = dp_impl(model, &params, &intr, &corr, DpNormalize::Mean, false).unwrap().0;
        assert!((sum - 4.0).abs() < 1e-9);
        assert!((mean - 2.0).abs() < 1e-9);
    }

    #[test]
    fn tpose_identities() {
        let model = fixture::model();
        let beta_hat = vec![0.3, -0.2, 0.1, 0.0, 0.5, 0.0, 0.0, 0.2, -0.4, 1.0];
        assert_eq!(loss_tpose(model, &beta_hat, &beta_hat).unwrap().0, 0.0);
        let mut beta = beta_hat.clone();
        beta[0] += 1.0;
        let expected: f64 = (0..model.num_vertices())
            .map(|v| model.shape_direction(v, 0).iter().map(|x| x * x).sum::<f64>())
            .sum();
        let (value, _) = loss_tpose(model, &beta, &beta_hat).unwrap();
        assert!((value - expected).abs() <= 1e-12 * expected);
        assert!(loss_tpose(model, &beta[..3], &beta_hat).is_err());
    }

    #[test]
    fn prior_hand_value() {
        let model = fixture::model();
        // The fixture's shape prior is the standard normal.
        let mut params = model.zero_params();
        params.beta[0] = 2.0;
        let s = loss_prior(model, &params, 1.0, 5.0).unwrap();
        assert!((s.value - 20.0).abs() < 1e-12);
        assert!((s.grad.beta[0] - 20.0).abs() < 1e-12);
        assert_eq!(loss_prior(model, &model.zero_params(), 1.0, 5.0).unwrap().value, 0.0);
    }

    #[test]
    fn keypoint_loss_cases() {
        let (model, intr, params) = setup();
        let mesh = model.skin(&params).unwrap();
        let joints = model.regress_joints(&mesh).unwrap();
        let cam = Camera::new(intr, params.cam_t);
        let mut kp = Keypoints2D::absent();
        for (k, j) in joints.joints.iter().enumerate() {
            let p = cam.project(&[*j]).unwrap()[0];
            kp.joints[k] = [p[0], p[1], 1.0];
        }
        assert!(loss_2d(model, &params, &intr, &kp).unwrap().value < 1e-18);

        let mut one = Keypoints2D::absent();
        one.joints[5] = kp.joints[5];
        one.joints[5][1] += 2.0;
        assert!((loss_2d(model, &params, &intr, &one).unwrap().value - 4.0).abs() < 1e-9);

        let mut far = model.zero_params();
        far.cam_t = [5.0, 5.0, 3.0];
        assert_eq!(loss_2d(model, &far, &intr, &Keypoints2D::absent()).unwrap().value, 0.0);
    }

    #[test]
    fn mesh_and_joint_losses() {
        let model = fixture::model();
        let a = model.zero_params();
        assert_eq!(loss_mesh(model, &a, &a).unwrap().value, 0.0);
        assert_eq!(loss_3d(model, &a, &a).unwrap().value, 0.0);
        let mut b = a.clone();
        b.gamma = [0.0, 0.0, std::f64::consts::PI];
        assert!(loss_mesh(model, &a, &b).unwrap().value > 0.0);
        assert!(loss_3d(model, &a, &b).unwrap().value > 0.0);
    }

    #[test]
    fn reg_weighting_is_linear() {
        let (model, intr, params) = setup();
        let mut target = params.clone();
        target.beta[1] = 0.7;
        target.theta[10] = 0.2;
        let mut kp = Keypoints2D::absent();
        kp.joints[0] = [100.0, 90.0, 1.0];
        let w = LossWeights::regression();
        let report = loss_reg(model, &params, &target, &intr, &kp, &w).unwrap();
        let mesh = loss_mesh(model, &params, &target).unwrap().value;
        let j3 = loss_3d(model, &params, &target).unwrap().value;
        let k2 = loss_2d(model, &params, &intr, &kp).unwrap().value;
        let tp = loss_tpose(model, &params.beta, &target.beta).unwrap().0;
        let hand = 0.1 * mesh + 1.0 * j3 + 1.0 * k2 + 0.1 * tp;
        assert!((report.total - hand).abs() <= 1e-12 * hand);

        let mut no_tpose = w;
        no_tpose.tpose = 0.0;
        let without = loss_reg(model, &params, &target, &intr, &kp, &no_tpose).unwrap();
        let diff = report.total - without.total;
        assert!((diff - 0.1 * tp).abs() <= 1e-9 * report.total);
    }

    #[test]
    fn iter_weighting_matches_hand_sum() {
        let (model, intr, mut params) = setup();
        let corr = self_consistent(model, &params, &intr, &[100, 2000, 9000]);
        params.beta[2] = 0.4;
        params.theta[5] = 0.1;
        let w = LossWeights::refinement_training();
        let report = loss_iter(model, &params, &intr, &corr, &w).unwrap();
        let dp = loss_dp(model, &params, &intr, &corr).unwrap().value;
        let (pose, shape) = prior_terms(model, &params).unwrap();
        let hand = 99.9 * dp + 1.0 * pose.value + 5.0 * shape.value;
        assert!((report.total - hand).abs() <= 1e-12 * hand);
        let weighted: f64 = report.terms.iter().map(LossTerm::weighted).sum();
        assert!((report.total - weighted).abs() <= 1e-12 * report.total);
    }

    #[test]
    fn negative_weight_rejected() {
        let mut w = LossWeights::regression();
        w.tpose = -1.0;
        assert_eq!(w.validate(), Err(LossError::BadWeight("tpose")));
    }
}
