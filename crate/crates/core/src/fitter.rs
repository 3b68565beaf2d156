//! Staged energy minimization of the refinement objective.
//!
//! A fit starts from an initial parameter estimate, evaluates the weighted
//! correspondence + prior energy, and takes Adam steps over the free subset
//! of parameters. The lowest-energy iterate seen is what gets returned.

use std::time::Instant;

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::Intrinsics;
use crate::correspondence::{DenseCorrespondenceMap, Keypoints2D};
use crate::losses::{self, DpNormalize, IterObjective, LossError, LossReport, LossTerm, LossWeights, PosedTarget};
use crate::model::{BodyParams, ParamError, SmplModel};
use crate::optim::{Adam, AdamConfig};
use crate::skinning::ParamGrad;

pub const DEFAULT_ITERATIONS: usize = 250;

/// Stage fitting learning rate. Shape coefficients get the full rate; pose
/// gets [`STAGE_THETA_LR_SCALE`] of it, because Adam's early steps move every
/// coordinate by about `lr` regardless of gradient size and pose that far
/// off its start trades against shape.
pub const STAGE_LR: f64 = 0.2;
pub const STAGE_THETA_LR_SCALE: f64 = 0.1;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("invalid fit configuration: {0}")]
    Config(String),
    #[error("unknown stage {0}; expected 2 or 3")]
    UnknownStage(u32),
    #[error(transparent)]
    Params(#[from] ParamError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("non-finite value in term `{term}` at iteration {iteration}")]
    NonFinite { term: &'static str, iteration: usize },
    #[error("candidate and incumbent were scored under different objectives")]
    ObjectiveMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Refinement inside the training loop.
    Two,
    /// Test-time refinement.
    Three,
    Custom,
}

/// Which parameter groups the optimizer may move.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreeParams {
    pub beta: bool,
    pub theta: bool,
    pub gamma: bool,
    pub cam_t: bool,
}

impl FreeParams {
    pub const SHAPE_AND_POSE: FreeParams = FreeParams {
        beta: true,
        theta: true,
        gamma: false,
        cam_t: false,
    };

    pub fn any(&self) -> bool {
        self.beta || self.theta || self.gamma || self.cam_t
    }

    /// Parse a comma-separated list such as `beta,theta`.
    pub fn parse(list: &str) -> Result<Self, String> {
        let mut out = FreeParams {
            beta: false,
            theta: false,
            gamma: false,
            cam_t: false,
        };
        for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match item {
                "beta" => out.beta = true,
                "theta" => out.theta = true,
                "gamma" => out.gamma = true,
                "t" | "cam_t" => out.cam_t = true,
                other => return Err(format!("unknown parameter group `{other}`")),
            }
        }
        Ok(out)
    }

    fn pack(&self, p: &BodyParams) -> Vec<f64> {
        let mut out = Vec::new();
        if self.beta {
            out.extend_from_slice(&p.beta);
        }
        if self.theta {
            out.extend_from_slice(&p.theta);
        }
        if self.gamma {
            out.extend_from_slice(&p.gamma);
        }
        if self.cam_t {
            out.extend_from_slice(&p.cam_t);
        }
        out
    }

    fn pack_grad(&self, g: &ParamGrad) -> Vec<f64> {
        let mut out = Vec::new();
        if self.beta {
            out.extend_from_slice(&g.beta);
        }
        if self.theta {
            out.extend_from_slice(&g.theta);
        }
        if self.gamma {
            out.extend_from_slice(&g.gamma);
        }
        if self.cam_t {
            out.extend_from_slice(&g.cam_t);
        }
        out
    }

    /// Per-coordinate multipliers matching [`FreeParams::pack`].
    fn pack_scales(&self, scales: &GroupLr, num_betas: usize) -> Vec<f64> {
        let mut out = Vec::new();
        if self.beta {
            out.extend(std::iter::repeat_n(scales.beta, num_betas));
        }
        if self.theta {
            out.extend(std::iter::repeat_n(scales.theta, crate::model::POSE_DIM));
        }
        if self.gamma {
            out.extend([scales.gamma; 3]);
        }
        if self.cam_t {
            out.extend([scales.cam_t; 3]);
        }
        out
    }

    fn unpack(&self, flat: &[f64], p: &mut BodyParams) {
        let mut rest = flat;
        let mut take = |dst: &mut [f64]| {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        };
        if self.beta {
            take(&mut p.beta);
        }
        if self.theta {
            take(&mut p.theta);
        }
        if self.gamma {
            take(&mut p.gamma);
        }
        if self.cam_t {
            take(&mut p.cam_t);
        }
    }
}

/// Learning-rate multipliers per parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupLr {
    pub beta: f64,
    pub theta: f64,
    pub gamma: f64,
    pub cam_t: f64,
}

impl Default for GroupLr {
    fn default() -> Self {
        Self {
            beta: 1.0,
            theta: 1.0,
            gamma: 1.0,
            cam_t: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    /// Relative decrease of the best loss below which an iteration counts as stalled.
    pub rel_tol: f64,
    /// Consecutive stalled iterations before the run is declared converged.
    pub patience: usize,
    /// Stop as soon as the run converges.
    pub early_stop: bool,
}

impl Default for Convergence {
    fn default() -> Self {
        Self {
            rel_tol: 1e-7,
            patience: 20,
            early_stop: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub stage: Stage,
    pub iterations: usize,
    pub weights: LossWeights,
    pub dp_normalize: DpNormalize,
    pub optimizer: AdamConfig,
    pub group_lr: GroupLr,
    pub free: FreeParams,
    pub convergence: Convergence,
    pub seed: u64,
}

impl FitConfig {
    pub fn validate(&self) -> Result<(), FitError> {
        if self.iterations < 1 {
            return Err(FitError::Config("iterations must be at least 1".into()));
        }
        if !(self.optimizer.lr > 0.0 && self.optimizer.lr.is_finite()) {
            return Err(FitError::Config("learning rate must be positive".into()));
        }
        let g = self.group_lr;
        if [g.beta, g.theta, g.gamma, g.cam_t].iter().any(|m| !(m.is_finite() && *m > 0.0)) {
            return Err(FitError::Config("group learning-rate multipliers must be positive".into()));
        }
        if !self.free.any() {
            return Err(FitError::Config("no free parameters".into()));
        }
        if matches!(self.stage, Stage::Two | Stage::Three) && (self.free.gamma || self.free.cam_t) {
            return Err(FitError::Config("stages 2 and 3 keep gamma and cam_t fixed".into()));
        }
        self.weights.validate()?;
        Ok(())
    }

    fn objective_key(&self, with_keypoints: bool) -> ObjectiveKey {
        ObjectiveKey {
            weights: self.weights,
            dp_normalize: self.dp_normalize,
            keypoints: with_keypoints,
        }
    }
}

/// The paper-prescribed configuration for refinement stage 2 or 3.
pub fn make_stage_config(stage: u32) -> Result<FitConfig, FitError> {
    let (stage, weights) = match stage {
        2 => (Stage::Two, LossWeights::refinement_training()),
        3 => (Stage::Three, LossWeights::refinement_test()),
        other => return Err(FitError::UnknownStage(other)),
    };
    Ok(FitConfig {
        stage,
        iterations: DEFAULT_ITERATIONS,
        weights,
        dp_normalize: DpNormalize::Sum,
        optimizer: AdamConfig {
            lr: STAGE_LR,
            ..AdamConfig::default()
        },
        group_lr: GroupLr {
            theta: STAGE_THETA_LR_SCALE,
            ..GroupLr::default()
        },
        free: FreeParams::SHAPE_AND_POSE,
        convergence: Convergence::default(),
        seed: 0,
    })
}

/// Identifies the energy a loss value was measured under.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveKey {
    pub weights: LossWeights,
    pub dp_normalize: DpNormalize,
    pub keypoints: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceEntry {
    pub iteration: usize,
    /// Energy of the iterate produced by this iteration's step.
    pub total: f64,
    /// Lowest energy seen so far, including the initial estimate.
    pub best_total: f64,
    pub terms: Vec<LossTerm>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    /// Lowest-energy iterate, axis-angles canonicalized.
    pub params: BodyParams,
    pub initial_total: f64,
    /// Energy of `params`; equals the last trace entry's `best_total`.
    pub final_total: f64,
    pub trace: Vec<TraceEntry>,
    pub iterations_run: usize,
    pub converged: bool,
    /// The run stopped early after an iterate left the valid region
    /// (a surface point moved behind the camera).
    pub rolled_back: bool,
    pub wall_time: f64,
    pub objective: ObjectiveKey,
}

/// Inputs shared by every fit of one image.
#[derive(Debug, Clone, Copy)]
pub struct FitInputs<'a> {
    pub model: &'a SmplModel,
    pub intrinsics: &'a Intrinsics,
    pub corr: &'a DenseCorrespondenceMap,
    pub keypoints: Option<&'a Keypoints2D>,
}

fn locate_nonfinite(objective: &IterObjective, params: &BodyParams) -> &'static str {
    let finite = |r: &Result<(f64, Option<ParamGrad>), LossError>| {
        matches!(r, Ok((v, g)) if v.is_finite() && g.as_ref().is_some_and(ParamGrad::is_finite))
    };
    let dp = losses::dp_impl(objective.model, params, objective.intrinsics, objective.corr, objective.dp_normalize, true);
    if !finite(&dp) {
        return "dp";
    }
    if let Ok((pose, shape)) = losses::prior_terms(objective.model, params) {
        if !(pose.value.is_finite() && pose.grad.is_finite()) {
            return "prior_theta";
        }
        if !(shape.value.is_finite() && shape.grad.is_finite()) {
            return "prior_beta";
        }
    }
    if objective.keypoints.is_some() {
        return "2d";
    }
    "total"
}

fn check_report(report: LossReport, iteration: usize, diagnose: impl FnOnce() -> &'static str) -> Result<LossReport, FitError> {
    let grad_ok = report.gradient.as_ref().is_some_and(ParamGrad::is_finite);
    if report.total.is_finite() && grad_ok {
        return Ok(report);
    }
    let term = report
        .terms
        .iter()
        .find(|t| !t.value.is_finite())
        .map_or_else(diagnose, |t| t.name);
    Err(FitError::NonFinite { term, iteration })
}

/// Minimize the refinement energy starting from `init`.
pub fn fit(inputs: FitInputs, init: &BodyParams, config: &FitConfig) -> Result<FitResult, FitError> {
    init.validate(inputs.model.num_betas())?;
    let objective = IterObjective {
        model: inputs.model,
        intrinsics: inputs.intrinsics,
        corr: inputs.corr,
        keypoints: inputs.keypoints,
        weights: config.weights,
        dp_normalize: config.dp_normalize,
    };
    minimize(init, config, config.objective_key(inputs.keypoints.is_some()), |p, iteration| {
        check_report(objective.evaluate(p, true)?, iteration, || locate_nonfinite(&objective, p))
    })
}

/// Minimize the supervised energy (mesh, 3D joint, 2D keypoint and T-pose
/// terms, weighted by `config.weights`) toward `target`.
pub fn fit_supervised(
    model: &SmplModel,
    init: &BodyParams,
    target: &BodyParams,
    intrinsics: &Intrinsics,
    keypoints: Option<&Keypoints2D>,
    config: &FitConfig,
) -> Result<FitResult, FitError> {
    init.validate(model.num_betas())?;
    let absent = Keypoints2D::absent();
    let kp = keypoints.unwrap_or(&absent);
    let target = PosedTarget::new(model, target)?;
    minimize(init, config, config.objective_key(keypoints.is_some()), |p, iteration| {
        let report = losses::reg_impl(model, p, &target, intrinsics, kp, &config.weights, true)?;
        check_report(report, iteration, || "total")
    })
}

/// Adam over the free parameters with best-iterate tracking.
fn minimize<F>(init: &BodyParams, config: &FitConfig, objective: ObjectiveKey, evaluate: F) -> Result<FitResult, FitError>
where
    F: Fn(&BodyParams, usize) -> Result<LossReport, FitError>,
{
    let started = Instant::now();
    config.validate()?;
    let free = config.free;

    let first = evaluate(init, 0)?;
    let initial_total = first.total;
    let mut best_total = initial_total;
    let mut best = init.clone();
    let mut current = init.clone();
    let mut grad = first.gradient.unwrap();
    let mut flat = free.pack(&current);
    let scales = free.pack_scales(&config.group_lr, init.beta.len());
    let mut adam = Adam::new(config.optimizer, flat.len()).with_lr_scales(scales);

    let mut trace = Vec::with_capacity(config.iterations);
    let mut stalled = 0usize;
    let mut converged = false;
    let mut rolled_back = false;

    for iteration in 1..=config.iterations {
        adam.step(&mut flat, &free.pack_grad(&grad));
        let mut candidate = current.clone();
        free.unpack(&flat, &mut candidate);
        let report = match evaluate(&candidate, iteration) {
            Ok(r) => r,
            Err(FitError::Loss(LossError::Projection { term, source })) => {
                warn!("iteration {iteration}: {term}: {source}; rolling back");
                rolled_back = true;
                break;
            }
            Err(e) => return Err(e),
        };
        current = candidate;
        grad = report.gradient.unwrap();

        let previous_best = best_total;
        if report.total < best_total {
            best_total = report.total;
            best = current.clone();
        }
        let decrease = (previous_best - best_total) / previous_best.abs().max(f64::MIN_POSITIVE);
        if decrease < config.convergence.rel_tol {
            stalled += 1;
        } else {
            stalled = 0;
        }
        trace.push(TraceEntry {
            iteration,
            total: report.total,
            best_total,
            terms: report.terms,
        });
        if stalled >= config.convergence.patience {
            converged = true;
            if config.convergence.early_stop {
                debug!("converged after {iteration} iterations");
                break;
            }
        }
    }

    Ok(FitResult {
        params: best.canonicalized(),
        initial_total,
        final_total: best_total,
        iterations_run: trace.len(),
        trace,
        converged,
        rolled_back,
        wall_time: started.elapsed().as_secs_f64(),
        objective,
    })
}

/// Parameters together with the energy they scored.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredParams {
    pub params: BodyParams,
    pub loss: f64,
    pub objective: ObjectiveKey,
}

impl From<&FitResult> for ScoredParams {
    fn from(r: &FitResult) -> Self {
        ScoredParams {
            params: r.params.clone(),
            loss: r.final_total,
            objective: r.objective,
        }
    }
}

/// Keep-best update of a pseudo ground-truth target across epochs. Ties keep
/// the incumbent.
pub fn pseudo_gt_update(current_best: &ScoredParams, candidate: &FitResult) -> Result<ScoredParams, FitError> {
    if current_best.objective != candidate.objective {
        return Err(FitError::ObjectiveMismatch);
    }
    if candidate.final_total < current_best.loss {
        Ok(candidate.into())
    } else {
        Ok(current_best.clone())
    }
}
