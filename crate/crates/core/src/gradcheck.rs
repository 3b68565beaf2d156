//! Central finite-difference verification of every analytic loss gradient.

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;
use thiserror::Error;

use crate::correspondence::Keypoints2D;
use crate::losses::{self, DpNormalize, IterObjective, LossError, LossWeights, PosedTarget};
use crate::model::{BodyParams, SmplModel};
use crate::skinning::ParamGrad;
use crate::synth::{generate_scene, BetaMode, SceneSpec, SynthError};

pub const DEFAULT_TRIALS: usize = 20;
pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const LOSS_NAMES: [&str; 8] = ["dp", "tpose", "prior", "2d", "3d", "mesh", "iter", "reg"];

#[derive(Debug, Error)]
pub enum GradcheckError {
    #[error("at least one trial is required")]
    NoTrials,
    #[error("unknown loss `{0}`")]
    UnknownLoss(String),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

#[derive(Debug, Clone, Default)]
pub struct GradcheckOptions {
    pub trials: usize,
    pub seed: u64,
    /// Corrupt the analytic gradient of this loss; used to prove the check
    /// can fail.
    pub corrupt: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossCheck {
    pub name: &'static str,
    pub worst_rel_error: f64,
    /// Flattened coordinate (order beta, theta, gamma, cam_t) of the worst error.
    pub worst_coordinate: usize,
    pub worst_trial: usize,
}

impl LossCheck {
    pub fn passed(&self) -> bool {
        self.worst_rel_error < TOLERANCE
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub checks: Vec<LossCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(LossCheck::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &LossCheck> {
        self.checks.iter().filter(|c| !c.passed())
    }
}

/// Per-coordinate relative error. The denominator is floored relative to
/// the gradient's overall scale so coordinates the loss barely depends on
/// are judged against the gradient's magnitude instead of their own.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> (f64, usize) {
    let scale = numeric.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1.0);
    let floor = 1e-6 * scale;
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
        .enumerate()
        .fold((0.0, 0), |best, (i, e)| if e > best.0 { (e, i) } else { best })
}

fn flatten(p: &BodyParams) -> Vec<f64> {
    p.beta.iter().chain(&p.theta).chain(&p.gamma).chain(&p.cam_t).copied().collect()
}

fn unflatten(x: &[f64], nb: usize) -> BodyParams {
    let (beta, rest) = x.split_at(nb);
    let (theta, rest) = rest.split_at(crate::model::POSE_DIM);
    BodyParams {
        beta: beta.to_vec(),
        theta: theta.to_vec(),
        gamma: [rest[0], rest[1], rest[2]],
        cam_t: [rest[3], rest[4], rest[5]],
    }
}

/// Central differences of `f` at `p` over every coordinate.
pub fn numeric_gradient<F>(p: &BodyParams, h: f64, f: F) -> Result<Vec<f64>, LossError>
where
    F: Fn(&BodyParams) -> Result<f64, LossError> + Sync,
{
    let x = flatten(p);
    let nb = p.beta.len();
    (0..x.len())
        .into_par_iter()
        .map(|i| {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            Ok((f(&unflatten(&xp, nb))? - f(&unflatten(&xm, nb))?) / (2.0 * h))
        })
        .collect()
}

struct Trial {
    params: BodyParams,
    target: PosedTarget,
    scene: crate::synth::SynthScene,
    keypoints: Keypoints2D,
}

fn make_trial(model: &SmplModel, rng: &mut Xoshiro256PlusPlus) -> Result<Trial, GradcheckError> {
    let nb = model.num_betas();
    let beta_dist = Normal::new(0.0, 0.5).unwrap();
    let beta: Vec<f64> = (0..nb).map(|_| beta_dist.sample(rng)).collect();
    let spec = SceneSpec {
        beta_mode: BetaMode::Fixed(beta),
        theta_sigma: 0.2,
        n_records: 200,
        noise_px: 1.0,
        seed: rng.random(),
        ..Default::default()
    };
    let scene = generate_scene(model, &spec)?;
    let small = Normal::new(0.0, 0.05).unwrap();
    let theta_dist = Normal::new(0.0, 0.2).unwrap();
    let mut target = scene.gt_params.clone();
    for x in target.beta.iter_mut() {
        *x += beta_dist.sample(rng);
    }
    for x in target.theta.iter_mut() {
        *x += theta_dist.sample(rng);
    }
    let mut params = scene.gt_params.clone();
    for x in params.gamma.iter_mut() {
        *x += small.sample(rng);
    }
    let px_noise = Normal::new(0.0, 3.0).unwrap();
    let mut keypoints = scene.keypoints.clone();
    for j in keypoints.joints.iter_mut() {
        j[0] += px_noise.sample(rng);
        j[1] += px_noise.sample(rng);
        j[2] = rng.random_range(0.0..=1.0);
    }
    Ok(Trial {
        params,
        target: PosedTarget::new(model, &target)?,
        scene,
        keypoints,
    })
}

fn evaluate(
    name: &str,
    model: &SmplModel,
    trial: &Trial,
    p: &BodyParams,
    want_grad: bool,
) -> Result<(f64, Option<ParamGrad>), LossError> {
    let nb = model.num_betas();
    let intr = &trial.scene.spec.intrinsics;
    let corr = &trial.scene.corr;
    let iter = IterObjective {
        model,
        intrinsics: intr,
        corr,
        keypoints: Some(&trial.keypoints),
        weights: LossWeights {
            keypoints_2d: 0.5,
            ..LossWeights::refinement_training()
        },
        dp_normalize: DpNormalize::Sum,
    };
    Ok(match name {
        "dp" => losses::dp_impl(model, p, intr, corr, DpNormalize::Sum, want_grad)?,
        "tpose" => {
            let (v, g) = losses::loss_tpose(model, &p.beta, &trial.target.params.beta)?;
            let mut grad = ParamGrad::zeros(nb);
            grad.beta = g;
            (v, Some(grad))
        }
        "prior" => {
            let s = losses::loss_prior(model, p, 1.0, 5.0)?;
            (s.value, Some(s.grad))
        }
        "2d" => losses::keypoints_impl(model, p, intr, &trial.keypoints, want_grad)?,
        "3d" => losses::joints_3d_impl(model, p, &trial.target, want_grad)?,
        "mesh" => losses::mesh_impl(model, p, &trial.target, want_grad)?,
        "iter" => {
            let r = iter.evaluate(p, want_grad)?;
            (r.total, r.gradient)
        }
        "reg" => {
            let r = losses::reg_impl(model, p, &trial.target, intr, &trial.keypoints, &LossWeights::regression(), want_grad)?;
            (r.total, r.gradient)
        }
        other => unreachable!("unknown loss {other}"),
    })
}

/// Run the suite over every loss in [`LOSS_NAMES`].
pub fn run(model: &SmplModel, options: &GradcheckOptions) -> Result<GradcheckReport, GradcheckError> {
    if options.trials == 0 {
        return Err(GradcheckError::NoTrials);
    }
    if let Some(name) = &options.corrupt {
        if !LOSS_NAMES.contains(&name.as_str()) {
            return Err(GradcheckError::UnknownLoss(name.clone()));
        }
    }
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(options.seed);
    let trials = (0..options.trials)
        .map(|_| make_trial(model, &mut rng))
        .collect::<Result<Vec<_>, _>>()?;

    let mut checks = Vec::with_capacity(LOSS_NAMES.len());
    for name in LOSS_NAMES {
        let mut check = LossCheck {
            name,
            worst_rel_error: 0.0,
            worst_coordinate: 0,
            worst_trial: 0,
        };
        for (t, trial) in trials.iter().enumerate() {
            let (_, grad) = evaluate(name, model, trial, &trial.params, true)?;
            let mut analytic: Vec<f64> = grad.expect("gradient requested").iter().collect();
            if options.corrupt.as_deref() == Some(name) {
                for (i, g) in analytic.iter_mut().enumerate() {
                    *g = *g * 1.01 + if i % 2 == 0 { 1e-3 } else { -1e-3 };
                }
            }
            let numeric = numeric_gradient(&trial.params, STEP, |p| Ok(evaluate(name, model, trial, p, false)?.0))?;
            let (err, coord) = relative_error(&analytic, &numeric);
            if err > check.worst_rel_error || err.is_nan() {
                check.worst_rel_error = if err.is_nan() { f64::INFINITY } else { err };
                check.worst_coordinate = coord;
                check.worst_trial = t;
            }
        }
        checks.push(check);
    }
    Ok(GradcheckReport { checks })
}
