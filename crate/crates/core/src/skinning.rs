//! Linear blend skinning with reverse-mode derivatives.
//!
//! Forward pass for one vertex `v`:
//!
//! ```text
//! shaped   = T_v + S_v β
//! rest     = shaped + P_v · vec(R_k − I), k = 1..23
//! posed    = Σ_k w_vk (G_k · rest + g_k)
//! ```
//!
//! where `G_k, g_k` are the world rotation and translation of joint `k`
//! composed along the kinematic tree and re-centered on the rest joints.
//! The root joint uses `gamma`, so the whole body rotates about the
//! root joint location.

use nalgebra::{Matrix3, Vector3};

use crate::model::{BodyParams, SmplModel, NUM_JOINTS, POSE_DIM, POSE_FEATURE_DIM};
use crate::rotation::{rodrigues_vjp, rodrigues_with_jacobian};

/// Gradient with respect to every entry of [`BodyParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    pub beta: Vec<f64>,
    pub theta: Vec<f64>,
    pub gamma: [f64; 3],
    pub cam_t: [f64; 3],
}

impl ParamGrad {
    pub fn zeros(num_betas: usize) -> Self {
        Self {
            beta: vec![0.0; num_betas],
            theta: vec![0.0; POSE_DIM],
            gamma: [0.0; 3],
            cam_t: [0.0; 3],
        }
    }

    /// `self += s · other`
    pub fn add_scaled(&mut self, other: &ParamGrad, s: f64) {
        for (a, b) in self.beta.iter_mut().zip(&other.beta) {
            *a += s * b;
        }
        for (a, b) in self.theta.iter_mut().zip(&other.theta) {
            *a += s * b;
        }
        for c in 0..3 {
            self.gamma[c] += s * other.gamma[c];
            self.cam_t[c] += s * other.cam_t[c];
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = ParamGrad::zeros(self.beta.len());
        out.add_scaled(self, s);
        out
    }

    /// Entries in the flat order `beta, theta, gamma, cam_t`.
    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.beta
            .iter()
            .chain(&self.theta)
            .chain(&self.gamma)
            .chain(&self.cam_t)
            .copied()
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(f64::is_finite)
    }
}

/// Per-call intermediates that do not depend on which vertices are queried.
#[derive(Debug, Clone)]
pub struct PoseState {
    beta: Vec<f64>,
    rest_joints: [Vector3<f64>; NUM_JOINTS],
    local_rot: [Matrix3<f64>; NUM_JOINTS],
    rot_jac: [[Matrix3<f64>; 3]; NUM_JOINTS],
    pose_feature: [f64; POSE_FEATURE_DIM],
    world_rot: [Matrix3<f64>; NUM_JOINTS],
    world_trans: [Vector3<f64>; NUM_JOINTS],
    skin_trans: [Vector3<f64>; NUM_JOINTS],
}

impl PoseState {
    /// `params` must already be validated against `model`.
    pub fn new(model: &SmplModel, params: &BodyParams) -> Self {
        let nb = model.num_betas;
        let mut rest_joints = model.joint_template;
        for (k, joint) in rest_joints.iter_mut().enumerate() {
            for c in 0..3 {
                let dirs = &model.joint_shapedirs[(k * 3 + c) * nb..(k * 3 + c + 1) * nb];
                joint[c] += dot(dirs, &params.beta);
            }
        }

        let mut local_rot = [Matrix3::identity(); NUM_JOINTS];
        let mut rot_jac = [[Matrix3::zeros(); 3]; NUM_JOINTS];
        for k in 0..NUM_JOINTS {
            let (r, j) = rodrigues_with_jacobian(&params.joint_rotation(k));
            local_rot[k] = r;
            rot_jac[k] = j;
        }

        let mut pose_feature = [0.0; POSE_FEATURE_DIM];
        for k in 1..NUM_JOINTS {
            let r = local_rot[k] - Matrix3::identity();
            for row in 0..3 {
                for col in 0..3 {
                    pose_feature[9 * (k - 1) + 3 * row + col] = r[(row, col)];
                }
            }
        }

        let mut world_rot = [Matrix3::identity(); NUM_JOINTS];
        let mut world_trans = [Vector3::zeros(); NUM_JOINTS];
        for k in 0..NUM_JOINTS {
            match model.parents[k] {
                None => {
                    world_rot[k] = local_rot[k];
                    world_trans[k] = rest_joints[k];
                }
                Some(p) => {
                    world_rot[k] = world_rot[p] * local_rot[k];
                    world_trans[k] = world_rot[p] * (rest_joints[k] - rest_joints[p]) + world_trans[p];
                }
            }
        }
        let mut skin_trans = [Vector3::zeros(); NUM_JOINTS];
        for k in 0..NUM_JOINTS {
            skin_trans[k] = world_trans[k] - world_rot[k] * rest_joints[k];
        }

        PoseState {
            beta: params.beta.clone(),
            rest_joints,
            local_rot,
            rot_jac,
            pose_feature,
            world_rot,
            world_trans,
            skin_trans,
        }
    }

    /// Rest-pose joint locations for the current shape.
    pub fn rest_joints(&self) -> &[Vector3<f64>; NUM_JOINTS] {
        &self.rest_joints
    }

    /// Posed joint locations (the kinematic-chain origins, not regressed joints).
    pub fn posed_joints(&self) -> &[Vector3<f64>; NUM_JOINTS] {
        &self.world_trans
    }

    fn rest_vertex(&self, model: &SmplModel, v: usize) -> Vector3<f64> {
        let nb = model.num_betas;
        let mut out = Vector3::from(model.v_template[v]);
        for c in 0..3 {
            let row = (v * 3 + c) * nb;
            out[c] += dot(&model.shapedirs[row..row + nb], &self.beta);
            let row = (v * 3 + c) * POSE_FEATURE_DIM;
            out[c] += dot(&model.posedirs[row..row + POSE_FEATURE_DIM], &self.pose_feature);
        }
        out
    }

    fn blend(&self, model: &SmplModel, v: usize) -> (Matrix3<f64>, Vector3<f64>) {
        let mut rot = Matrix3::zeros();
        let mut trans = Vector3::zeros();
        for &(k, w) in &model.vertex_weights[v] {
            rot += self.world_rot[k] * w;
            trans += self.skin_trans[k] * w;
        }
        (rot, trans)
    }

    /// Posed position of vertex `v`.
    pub fn vertex(&self, model: &SmplModel, v: usize) -> Vector3<f64> {
        let (rot, trans) = self.blend(model, v);
        rot * self.rest_vertex(model, v) + trans
    }

    /// Pull per-vertex gradients `∂L/∂posed_v` back onto the parameters.
    /// `cam_t` of the result is left at zero.
    pub fn backward(&self, model: &SmplModel, vertex_grads: &[(usize, Vector3<f64>)]) -> ParamGrad {
        let nb = model.num_betas;
        let mut grad = ParamGrad::zeros(nb);
        let mut d_world_rot = [Matrix3::zeros(); NUM_JOINTS];
        let mut d_skin_trans = [Vector3::zeros(); NUM_JOINTS];
        let mut d_feature = [0.0; POSE_FEATURE_DIM];

        for &(v, g) in vertex_grads {
            let rest = self.rest_vertex(model, v);
            let (rot, _) = self.blend(model, v);
            let outer = g * rest.transpose();
            for &(k, w) in &model.vertex_weights[v] {
                d_world_rot[k] += outer * w;
                d_skin_trans[k] += g * w;
            }
            let d_rest = rot.transpose() * g;
            for c in 0..3 {
                let row = (v * 3 + c) * nb;
                axpy(&mut grad.beta, d_rest[c], &model.shapedirs[row..row + nb]);
                let row = (v * 3 + c) * POSE_FEATURE_DIM;
                axpy(&mut d_feature, d_rest[c], &model.posedirs[row..row + POSE_FEATURE_DIM]);
            }
        }

        // skin_trans = world_trans − world_rot · rest_joint
        let mut d_world_trans = d_skin_trans;
        let mut d_joint = [Vector3::zeros(); NUM_JOINTS];
        for k in 0..NUM_JOINTS {
            d_world_rot[k] -= d_skin_trans[k] * self.rest_joints[k].transpose();
            d_joint[k] -= self.world_rot[k].transpose() * d_skin_trans[k];
        }

        let mut d_local = [Matrix3::zeros(); NUM_JOINTS];
        for k in (0..NUM_JOINTS).rev() {
            match model.parents[k] {
                None => {
                    d_local[k] += d_world_rot[k];
                    d_joint[k] += d_world_trans[k];
                }
                Some(p) => {
                    let offset = self.rest_joints[k] - self.rest_joints[p];
                    let parent_rot_t = self.world_rot[p].transpose();
                    let d_rot = d_world_rot[k];
                    let d_trans = d_world_trans[k];
                    d_world_rot[p] += d_rot * self.local_rot[k].transpose() + d_trans * offset.transpose();
                    d_local[k] += parent_rot_t * d_rot;
                    d_world_trans[p] += d_trans;
                    let d_offset = parent_rot_t * d_trans;
                    d_joint[k] += d_offset;
                    d_joint[p] -= d_offset;
                }
            }
        }

        for k in 1..NUM_JOINTS {
            for row in 0..3 {
                for col in 0..3 {
                    d_local[k][(row, col)] += d_feature[9 * (k - 1) + 3 * row + col];
                }
            }
        }

        for (k, dj) in d_joint.iter().enumerate() {
            for c in 0..3 {
                let row = (k * 3 + c) * nb;
                axpy(&mut grad.beta, dj[c], &model.joint_shapedirs[row..row + nb]);
            }
        }

        for k in 0..NUM_JOINTS {
            let d_omega = rodrigues_vjp(&self.rot_jac[k], &d_local[k]);
            if k == 0 {
                grad.gamma = d_omega.into();
            } else {
                grad.theta[3 * (k - 1)..3 * k].copy_from_slice(d_omega.as_slice());
            }
        }
        grad
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(dst: &mut [f64], s: f64, src: &[f64]) {
    if s == 0.0 {
        return;
    }
    for (d, x) in dst.iter_mut().zip(src) {
        *d += s * x;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixture;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::Xoshiro256PlusPlus;

    // Scalar probe: L = Σ_v c_v · posed_v for a fixed random set of vertices.
    fn probe(model: &SmplModel, params: &BodyParams, weights: &[(usize, Vector3<f64>)]) -> f64 {
        let state = PoseState::new(model, params);
        weights.iter().map(|(v, c)| c.dot(&state.vertex(model, *v))).sum()
    }

    #[test]
    fn backward_matches_finite_differences() {
        let model = fixture::model();
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(3);
        let mut params = model.zero_params();
        params.beta.iter_mut().for_each(|b| *b = rng.random_range(-1.0..1.0));
        params.theta.iter_mut().for_each(|t| *t = rng.random_range(-0.4..0.4));
        params.gamma = [0.3, -2.0, 0.5];
        let weights: Vec<(usize, Vector3<f64>)> = (0..40)
            .map(|_| {
                (
                    rng.random_range(0..model.num_vertices()),
                    Vector3::new(rng.random(), rng.random(), rng.random()),
                )
            })
            .collect();
        let grad = PoseState::new(model, &params).backward(model, &weights);

        let h = 1e-6;
        let check = |analytic: f64, bump: &dyn Fn(&mut BodyParams, f64)| {
            let mut p = params.clone();
            bump(&mut p, h);
            let up = probe(model, &p, &weights);
            let mut p = params.clone();
            bump(&mut p, -h);
            let down = probe(model, &p, &weights);
            let fd = (up - down) / (2.0 * h);
            let scale = analytic.abs().max(fd.abs()).max(1e-3);
            assert!((analytic - fd).abs() / scale < 1e-6, "analytic {analytic} vs fd {fd}");
        };
        for i in 0..model.num_betas() {
            check(grad.beta[i], &|p, d| p.beta[i] += d);
        }
        for i in 0..POSE_DIM {
            check(grad.theta[i], &|p, d| p.theta[i] += d);
        }
        for i in 0..3 {
            check(grad.gamma[i], &|p, d| p.gamma[i] += d);
        }
    }
}
