//! A procedurally generated stand-in for the official body model.
//!
//! The mesh is a closed genus-0 surface with SMPL's exact topology counts
//! (6890 vertices, 13776 faces): an 84-ring × 82-segment latitude/longitude
//! sphere whose cross-sections follow a rough human profile 1.7 m tall. The
//! skeleton uses SMPL's 24-joint tree; skinning weights, the joint regressor,
//! shape and pose-corrective directions and the priors are all synthesized
//! deterministically from a seed. Every model invariant holds, so the file
//! loads through the normal validation path.

use std::f64::consts::TAU;
use std::sync::OnceLock;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::model::{
    ModelParts, SmplModel, NUM_FACES, NUM_JOINTS, NUM_VERTICES, POSE_DIM, POSE_FEATURE_DIM, ROOT_PARENT,
};

pub const DEFAULT_SEED: u64 = 0x0059_4f55;
pub const NUM_BETAS: usize = 10;
pub const HEIGHT: f64 = 1.7;

const RINGS: usize = 84;
const SEGMENTS: usize = 82;

/// SMPL kinematic tree.
pub const PARENTS: [u32; NUM_JOINTS] = [
    ROOT_PARENT, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21,
];

/// Target joint locations; the regressor reproduces them approximately.
const JOINT_TARGETS: [[f64; 3]; NUM_JOINTS] = [
    [0.0, 0.95, 0.0],     // pelvis
    [0.09, 0.88, 0.0],    // left hip
    [-0.09, 0.88, 0.0],   // right hip
    [0.0, 1.05, 0.0],     // spine 1
    [0.09, 0.50, 0.0],    // left knee
    [-0.09, 0.50, 0.0],   // right knee
    [0.0, 1.18, 0.0],     // spine 2
    [0.08, 0.10, 0.0],    // left ankle
    [-0.08, 0.10, 0.0],   // right ankle
    [0.0, 1.30, 0.0],     // spine 3
    [0.08, 0.04, 0.04],   // left foot
    [-0.08, 0.04, 0.04],  // right foot
    [0.0, 1.47, 0.0],     // neck
    [0.07, 1.40, 0.0],    // left collar
    [-0.07, 1.40, 0.0],   // right collar
    [0.0, 1.58, 0.0],     // head
    [0.17, 1.37, 0.0],    // left shoulder
    [-0.17, 1.37, 0.0],   // right shoulder
    [0.19, 1.15, 0.0],    // left elbow
    [-0.19, 1.15, 0.0],   // right elbow
    [0.19, 0.93, 0.0],    // left wrist
    [-0.19, 0.93, 0.0],   // right wrist
    [0.19, 0.86, 0.0],    // left hand
    [-0.19, 0.86, 0.0],   // right hand
];

/// `(height, half-width, half-depth)` control points of the body profile.
const PROFILE: [(f64, f64, f64); 15] = [
    (0.00, 0.000, 0.000),
    (0.02, 0.100, 0.080),
    (0.06, 0.150, 0.110),
    (0.12, 0.140, 0.080),
    (0.50, 0.170, 0.100),
    (0.85, 0.200, 0.130),
    (1.00, 0.170, 0.120),
    (1.20, 0.240, 0.130),
    (1.38, 0.260, 0.120),
    (1.44, 0.160, 0.090),
    (1.50, 0.070, 0.070),
    (1.56, 0.090, 0.100),
    (1.63, 0.095, 0.105),
    (1.68, 0.060, 0.070),
    (1.70, 0.000, 0.000),
];

fn profile(y: f64) -> (f64, f64) {
    let y = y.clamp(0.0, HEIGHT);
    for w in PROFILE.windows(2) {
        let (y0, a0, b0) = w[0];
        let (y1, a1, b1) = w[1];
        if y <= y1 {
            let t = (y - y0) / (y1 - y0);
            let s = t * t * (3.0 - 2.0 * t);
            return (a0 + (a1 - a0) * s, b0 + (b1 - b0) * s);
        }
    }
    (0.0, 0.0)
}

fn ring_height(i: usize) -> f64 {
    HEIGHT * (i + 1) as f64 / (RINGS + 1) as f64
}

fn ring_vertex(i: usize, j: usize) -> u32 {
    (1 + i * SEGMENTS + j % SEGMENTS) as u32
}

fn build_surface() -> (Vec<[f64; 3]>, Vec<[f64; 2]>, Vec<u32>) {
    // Also returns per-vertex (height, longitude) for the regressor.
    let mut verts = Vec::with_capacity(NUM_VERTICES);
    let mut coords = Vec::with_capacity(NUM_VERTICES);
    verts.push([0.0, 0.0, 0.0]);
    coords.push([0.0, 0.0]);
    for i in 0..RINGS {
        let y = ring_height(i);
        let (a, b) = profile(y);
        for j in 0..SEGMENTS {
            let phi = TAU * j as f64 / SEGMENTS as f64;
            verts.push([a * phi.cos(), y, b * phi.sin()]);
            coords.push([y, phi]);
        }
    }
    verts.push([0.0, HEIGHT, 0.0]);
    coords.push([HEIGHT, 0.0]);
    debug_assert_eq!(verts.len(), NUM_VERTICES);

    let top = (NUM_VERTICES - 1) as u32;
    let mut faces = Vec::with_capacity(NUM_FACES * 3);
    for j in 0..SEGMENTS {
        faces.extend_from_slice(&[0, ring_vertex(0, j), ring_vertex(0, j + 1)]);
    }
    for i in 0..RINGS - 1 {
        for j in 0..SEGMENTS {
            let a = ring_vertex(i, j);
            let b = ring_vertex(i, j + 1);
            let c = ring_vertex(i + 1, j + 1);
            let d = ring_vertex(i + 1, j);
            faces.extend_from_slice(&[a, d, c, a, c, b]);
        }
    }
    for j in 0..SEGMENTS {
        faces.extend_from_slice(&[top, ring_vertex(RINGS - 1, j + 1), ring_vertex(RINGS - 1, j)]);
    }
    debug_assert_eq!(faces.len(), NUM_FACES * 3);
    (verts, coords, faces)
}

fn build_regressor(coords: &[[f64; 2]]) -> Vec<f64> {
    let mut reg = vec![0.0; NUM_JOINTS * NUM_VERTICES];
    for (k, target) in JOINT_TARGETS.iter().enumerate() {
        let (a, b) = profile(target[1]);
        let nx = target[0] / a.max(1e-3);
        let nz = target[2] / b.max(1e-3);
        let rho = (nx * nx + nz * nz).sqrt().min(0.9);
        // Von Mises concentration whose mean resultant length is rho.
        let kappa = rho * (2.0 - rho * rho) / (1.0 - rho * rho);
        let phi0 = nz.atan2(nx);
        let row = &mut reg[k * NUM_VERTICES..(k + 1) * NUM_VERTICES];
        // Poles carry no longitude and are skipped.
        for v in 1..NUM_VERTICES - 1 {
            let [y, phi] = coords[v];
            let dy = (y - target[1]) / 0.025;
            if dy.abs() > 2.5 {
                continue;
            }
            row[v] = (-dy * dy).exp() * (kappa * ((phi - phi0).cos() - 1.0)).exp();
        }
        let max = row.iter().cloned().fold(0.0, f64::max);
        row.iter_mut().filter(|w| **w < 1e-4 * max).for_each(|w| *w = 0.0);
        let sum: f64 = row.iter().sum();
        row.iter_mut().for_each(|w| *w /= sum);
    }
    reg
}

fn regress(reg: &[f64], verts: &[[f64; 3]]) -> Vec<Vector3<f64>> {
    (0..NUM_JOINTS)
        .map(|k| {
            reg[k * NUM_VERTICES..(k + 1) * NUM_VERTICES]
                .iter()
                .zip(verts)
                .map(|(&w, v)| Vector3::from(*v) * w)
                .sum()
        })
        .collect()
}

fn segment_distance_sq(p: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    let t = if len2 > 0.0 { ((p - a).dot(&ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
    (p - (a + ab * t)).norm_squared()
}

fn build_skin_weights(verts: &[[f64; 3]], joints: &[Vector3<f64>]) -> Vec<f64> {
    let mut bone_end = joints.to_vec();
    for k in 0..NUM_JOINTS {
        let children: Vec<usize> = (0..NUM_JOINTS).filter(|&c| PARENTS[c] == k as u32).collect();
        if !children.is_empty() {
            bone_end[k] = children.iter().map(|&c| joints[c]).sum::<Vector3<f64>>() / children.len() as f64;
        }
    }
    let sigma2 = 2.0 * 0.05f64.powi(2);
    let mut weights = vec![0.0; NUM_VERTICES * NUM_JOINTS];
    for (v, pos) in verts.iter().enumerate() {
        let p = Vector3::from(*pos);
        let mut d: Vec<(usize, f64)> = (0..NUM_JOINTS)
            .map(|k| (k, segment_distance_sq(&p, &joints[k], &bone_end[k])))
            .collect();
        d.sort_by(|x, y| x.1.total_cmp(&y.1).then(x.0.cmp(&y.0)));
        let d_min = d[0].1;
        let kept: Vec<(usize, f64)> = d[..4].iter().map(|&(k, dk)| (k, (-(dk - d_min) / sigma2).exp())).collect();
        let sum: f64 = kept.iter().map(|x| x.1).sum();
        for (k, w) in kept {
            weights[v * NUM_JOINTS + k] = w / sum;
        }
    }
    weights
}

fn bump(y: f64, center: f64, width: f64) -> f64 {
    (-((y - center) / width).powi(2)).exp()
}

fn build_shapedirs(verts: &[[f64; 3]]) -> Vec<f64> {
    let mut dirs = vec![0.0; NUM_VERTICES * 3 * NUM_BETAS];
    for (v, &[x, y, z]) in verts.iter().enumerate() {
        let (a, b) = profile(y);
        let (nx, nz) = (x / a.max(1e-3), z / b.max(1e-3));
        let u = y / HEIGHT;
        let fields: [[f64; 3]; NUM_BETAS] = [
            // stature
            [0.0, 0.05 * (y - 0.95), 0.0],
            // overall girth
            [0.12 * x, 0.0, 0.12 * z],
            // belly
            [0.0, 0.0, 0.05 * bump(y, 1.02, 0.12) * nz.max(0.0).powi(2)],
            // shoulder breadth
            [0.035 * bump(y, 1.35, 0.1) * nx, 0.0, 0.0],
            // hip breadth
            [0.03 * bump(y, 0.9, 0.1) * nx, 0.0, 0.01 * bump(y, 0.9, 0.1) * nz],
            // leg length
            [0.0, 0.035 * (y.min(0.9) - 0.9) / 0.9, 0.0],
            // chest depth
            [0.0, 0.0, 0.035 * bump(y, 1.25, 0.1) * nz],
            // head size
            [0.25 * bump(y, 1.6, 0.06) * x, 0.25 * bump(y, 1.6, 0.06) * (y - 1.6), 0.25 * bump(y, 1.6, 0.06) * z],
            // thigh girth
            [0.03 * bump(y, 0.7, 0.12) * nx, 0.0, 0.02 * bump(y, 0.7, 0.12) * nz],
            // low-frequency asymmetry
            [0.015 * (3.0 * std::f64::consts::PI * u).sin() * nx, 0.0, 0.015 * (TAU * u).cos() * nz],
        ];
        for (bi, f) in fields.iter().enumerate() {
            for c in 0..3 {
                dirs[(v * 3 + c) * NUM_BETAS + bi] = f[c];
            }
        }
    }
    dirs
}

fn build_posedirs(verts: &[[f64; 3]], skin: &[f64], rng: &mut Xoshiro256PlusPlus) -> Vec<f64> {
    let waves: Vec<[f64; 4]> = (0..3 * POSE_FEATURE_DIM)
        .map(|_| {
            [
                rng.random_range(-8.0..8.0),
                rng.random_range(-8.0..8.0),
                rng.random_range(-8.0..8.0),
                rng.random_range(0.0..TAU),
            ]
        })
        .collect();
    let mut dirs = vec![0.0; NUM_VERTICES * 3 * POSE_FEATURE_DIM];
    for (v, &[x, y, z]) in verts.iter().enumerate() {
        for f in 0..POSE_FEATURE_DIM {
            let k = f / 9 + 1;
            let influence = skin[v * NUM_JOINTS + k] + skin[v * NUM_JOINTS + PARENTS[k] as usize];
            if influence == 0.0 {
                continue;
            }
            for c in 0..3 {
                let [wa, wb, wc, wd] = waves[c * POSE_FEATURE_DIM + f];
                dirs[(v * 3 + c) * POSE_FEATURE_DIM + f] = 0.02 * influence * (wa * x + wb * y + wc * z + wd).sin();
            }
        }
    }
    dirs
}

fn build_pose_cov(rng: &mut Xoshiro256PlusPlus) -> Vec<f64> {
    const RANK: usize = 5;
    let sigma: Vec<f64> = (0..POSE_DIM).map(|_| rng.random_range(0.15..0.45)).collect();
    let factors: Vec<f64> = (0..POSE_DIM * RANK)
        .map(|_| 0.05 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut cov = vec![0.0; POSE_DIM * POSE_DIM];
    for i in 0..POSE_DIM {
        for j in 0..POSE_DIM {
            let low_rank: f64 = (0..RANK).map(|r| factors[i * RANK + r] * factors[j * RANK + r]).sum();
            cov[i * POSE_DIM + j] = low_rank + if i == j { sigma[i] * sigma[i] } else { 0.0 };
        }
    }
    cov
}

/// Raw arrays of the fixture model for `seed`.
pub fn parts(seed: u64) -> ModelParts {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let (verts, coords, faces) = build_surface();
    let joint_regressor = build_regressor(&coords);
    let joints = regress(&joint_regressor, &verts);
    let skin_weights = build_skin_weights(&verts, &joints);
    let shapedirs = build_shapedirs(&verts);
    let posedirs = build_posedirs(&verts, &skin_weights, &mut rng);
    let pose_prior_cov = build_pose_cov(&mut rng);
    let mut shape_prior_cov = vec![0.0; NUM_BETAS * NUM_BETAS];
    for i in 0..NUM_BETAS {
        shape_prior_cov[i * NUM_BETAS + i] = 1.0;
    }
    ModelParts {
        v_template: verts.iter().flatten().copied().collect(),
        shapedirs,
        posedirs,
        joint_regressor,
        skin_weights,
        parents: PARENTS.to_vec(),
        faces,
        shape_prior_mean: vec![0.0; NUM_BETAS],
        shape_prior_cov,
        pose_prior_mean: vec![0.0; POSE_DIM],
        pose_prior_cov,
        num_betas: NUM_BETAS,
    }
}

pub fn build(seed: u64) -> SmplModel {
    SmplModel::from_parts(parts(seed)).expect("fixture model satisfies all invariants")
}

/// SMF bytes of the fixture model for `seed`.
pub fn smf_bytes(seed: u64) -> Vec<u8> {
    parts(seed).to_smf_bytes()
}

/// Shared fixture model for the default seed.
pub fn model() -> &'static SmplModel {
    static MODEL: OnceLock<SmplModel> = OnceLock::new();
    MODEL.get_or_init(|| build(DEFAULT_SEED))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn topology_counts() {
        let m = model();
        assert_eq!(m.num_vertices(), NUM_VERTICES);
        assert_eq!(m.faces().len(), NUM_FACES);
        assert_eq!(m.num_betas(), NUM_BETAS);
    }

    #[test]
    fn closed_surface() {
        // Every edge of a closed manifold is shared by exactly two faces.
        let mut edges = std::collections::HashMap::new();
        for f in model().faces().iter() {
            for e in 0..3 {
                let (a, b) = (f[e], f[(e + 1) % 3]);
                *edges.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        assert!(edges.values().all(|&n| n == 2));
        assert_eq!(NUM_VERTICES + NUM_FACES - edges.len(), 2);
    }

    #[test]
    fn rest_joints_near_targets() {
        let m = model();
        let joints = m.rest_joints(&[0.0; NUM_BETAS]).unwrap();
        for (k, j) in joints.joints.iter().enumerate() {
            let d = (Vector3::from(*j) - Vector3::from(JOINT_TARGETS[k])).norm();
            assert!(d < 0.06, "joint {k} is {d} m from its target");
        }
    }

    #[test]
    fn deterministic_bytes() {
        assert_eq!(smf_bytes(7), smf_bytes(7));
    }
}
