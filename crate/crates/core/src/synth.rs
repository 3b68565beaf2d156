//! Synthetic scenes with known ground truth.
//!
//! A scene poses the model with seeded random parameters, frames it with a
//! camera, renders it, and samples dense correspondences from visible
//! surface points. All randomness flows from one xoshiro256++ stream seeded
//! through splitmix64, so scenes are reproducible bit for bit.

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{Camera, Intrinsics};
use crate::correspondence::{CorrespondenceRecord, DenseCorrespondenceMap, Keypoints2D};
use crate::losses::projected_joints;
use crate::model::{BodyParams, Mesh, ParamError, SmplModel, POSE_DIM};
use crate::raster::{rasterize, DepthBuffer, SilhouetteMask};
use crate::rotation::canonicalize_all;

/// Framing margin applied to the bounding-sphere depth.
pub const FRAMING_MARGIN: f64 = 1.15;

/// Global orientation that turns the model's y-up frame into the camera's
/// y-down image frame.
pub const UPRIGHT_GAMMA: [f64; 3] = [PI, 0.0, 0.0];

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("n_records must be at least 1")]
    NoRecords,
    #[error("requested {requested} records but only {available} foreground pixels are visible")]
    TooFewPixels { requested: usize, available: usize },
    #[error("theta_sigma and noise_px must be finite and non-negative")]
    BadScale,
    #[error("fixed beta has {found} coefficients, model has {expected}")]
    BetaLength { expected: usize, found: usize },
    #[error("mesh does not fit in the frame at the framing depth")]
    NotFramed,
    #[error(transparent)]
    Params(#[from] ParamError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode", content = "beta")]
pub enum BetaMode {
    Zero,
    Fixed(Vec<f64>),
    Prior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub beta_mode: BetaMode,
    pub theta_sigma: f64,
    pub n_records: usize,
    pub noise_px: f64,
    pub intrinsics: Intrinsics,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            beta_mode: BetaMode::Prior,
            theta_sigma: 0.2,
            n_records: 2000,
            noise_px: 0.0,
            intrinsics: Intrinsics::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub gt_params: BodyParams,
    pub camera: Camera,
    pub corr: DenseCorrespondenceMap,
    pub keypoints: Keypoints2D,
    pub mask: SilhouetteMask,
    pub depth: DepthBuffer,
    pub spec: SceneSpec,
}

impl SynthScene {
    pub fn seed(&self) -> u64 {
        self.spec.seed
    }
}

/// Camera translation that centers the mesh's bounding sphere on the optical
/// axis, far enough away for the sphere to fit the shorter image side.
pub fn frame_mesh(mesh: &Mesh, intrinsics: &Intrinsics) -> [f64; 3] {
    let (lo, hi) = mesh.bounds();
    let center = (Vector3::from(lo) + Vector3::from(hi)) / 2.0;
    let radius = mesh
        .vertices
        .iter()
        .map(|v| (Vector3::from(*v) - center).norm())
        .fold(0.0, f64::max);
    let (w, h) = intrinsics.image_size;
    let half = w.min(h) as f64 / 2.0;
    let depth = FRAMING_MARGIN * radius * intrinsics.focal / half;
    [-center.x, -center.y, depth - center.z]
}

/// Ray–triangle intersection from the camera origin; returns barycentric
/// weights of the hit point with respect to `(a, b, c)`.
pub fn ray_triangle(dir: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>) -> Option<[f64; 3]> {
    let e1 = b - a;
    let e2 = c - a;
    let p = dir.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-300 {
        return None;
    }
    let inv = 1.0 / det;
    let s = -a;
    let u = s.dot(&p) * inv;
    let q = s.cross(&e1);
    let v = dir.dot(&q) * inv;
    let t = e2.dot(&q) * inv;
    if !(t > 0.0) {
        return None;
    }
    Some([1.0 - u - v, u, v])
}

fn clamp_bary(b: [f64; 3]) -> [f64; 3] {
    let c = b.map(|x| x.max(0.0));
    let sum: f64 = c.iter().sum();
    c.map(|x| x / sum)
}

pub fn generate_scene(model: &SmplModel, spec: &SceneSpec) -> Result<SynthScene, SynthError> {
    if spec.n_records == 0 {
        return Err(SynthError::NoRecords);
    }
    let scale_ok = |s: f64| s.is_finite() && s >= 0.0;
    if !scale_ok(spec.theta_sigma) || !scale_ok(spec.noise_px) {
        return Err(SynthError::BadScale);
    }
    let nb = model.num_betas();
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(spec.seed);

    let beta = match &spec.beta_mode {
        BetaMode::Zero => vec![0.0; nb],
        BetaMode::Fixed(b) if b.len() != nb => {
            return Err(SynthError::BetaLength {
                expected: nb,
                found: b.len(),
            })
        }
        BetaMode::Fixed(b) => b.clone(),
        BetaMode::Prior => {
            let prior = model.shape_prior();
            let z = nalgebra::DVector::from_fn(nb, |_, _| StandardNormal.sample(&mut rng));
            let draw = prior.factor() * z;
            prior.mean().iter().zip(draw.iter()).map(|(m, d)| m + d).collect()
        }
    };
    let mut theta: Vec<f64> = (0..POSE_DIM)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * spec.theta_sigma
        })
        .collect();
    canonicalize_all(&mut theta);

    let mut params = BodyParams {
        theta,
        beta,
        gamma: UPRIGHT_GAMMA,
        cam_t: [0.0; 3],
    };
    let mesh = model.skin(&params)?;
    params.cam_t = frame_mesh(&mesh, &spec.intrinsics);
    let camera = Camera::new(spec.intrinsics, params.cam_t);

    let (w, h) = spec.intrinsics.image_size;
    let in_frame = |p: [f64; 2]| p[0] >= 0.0 && p[0] < w as f64 && p[1] >= 0.0 && p[1] < h as f64;
    match camera.project(&mesh.vertices) {
        Ok(px) if px.iter().all(|p| in_frame(*p)) => {}
        _ => return Err(SynthError::NotFramed),
    }

    let (mask, depth) = rasterize(&mesh, &camera);
    let foreground = mask.foreground();
    if spec.n_records > foreground.len() {
        return Err(SynthError::TooFewPixels {
            requested: spec.n_records,
            available: foreground.len(),
        });
    }
    let mut picked = rand::seq::index::sample(&mut rng, foreground.len(), spec.n_records).into_vec();
    picked.sort_unstable();

    let noise = Normal::new(0.0, spec.noise_px).map_err(|_| SynthError::BadScale)?;
    let t = Vector3::from(params.cam_t);
    let max_u = (w as f64).next_down();
    let max_v = (h as f64).next_down();
    let mut records = Vec::with_capacity(picked.len());
    for i in picked {
        let (x, y) = foreground[i];
        let face = depth.face(x, y).expect("foreground pixel without a face");
        let tri = model.faces()[face as usize].map(|v| Vector3::from(mesh.vertices[v as usize]) + t);
        let ray = camera.pixel_ray(x as f64, y as f64);
        // The rasterizer found this face under the pixel, so a miss can only
        // be a grazing-angle rounding failure; fall back to the centroid.
        let bary = ray_triangle(&ray, &tri[0], &tri[1], &tri[2]).map_or([1.0 / 3.0; 3], clamp_bary);
        let mut pixel = [x as f64, y as f64];
        if spec.noise_px > 0.0 {
            pixel[0] = (pixel[0] + noise.sample(&mut rng)).clamp(0.0, max_u);
            pixel[1] = (pixel[1] + noise.sample(&mut rng)).clamp(0.0, max_v);
        }
        records.push(CorrespondenceRecord { pixel, face, bary });
    }

    let joints = projected_joints(model, &params, &spec.intrinsics).map_err(|_| SynthError::NotFramed)?;
    let mut keypoints = Keypoints2D::absent();
    for (k, [x, y]) in joints.into_iter().enumerate() {
        keypoints.joints[k] = [x, y, 1.0];
    }

    Ok(SynthScene {
        gt_params: params,
        camera,
        corr: DenseCorrespondenceMap::new(spec.intrinsics.image_size, records),
        keypoints,
        mask,
        depth,
        spec: spec.clone(),
    })
}
