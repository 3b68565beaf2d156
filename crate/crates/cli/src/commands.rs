use std::borrow::Cow;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{anyhow, Context};
use serde_json::json;
use soy_core::fitter::{FitError, TraceEntry};
use soy_core::gradcheck::{self, GradcheckError, GradcheckOptions};
use soy_core::io::{self, ParamsFile};
use soy_core::losses::{DpNormalize, LossError};
use soy_core::synth::{BetaMode, SynthError};
use soy_core::{fixture, metrics, raster, FitInputs, Intrinsics, SceneSpec, SmplModel};

use crate::failure::{Failure, Tag};
use crate::{BetaModeArg, DpNormalizeArg, FitArgs, FixtureArgs, GradcheckArgs, MiouArgs, ModelArg, PveArgs, SynthArgs};

type Outcome = Result<(), Failure>;

fn load_model(arg: &ModelArg) -> Result<Cow<'static, SmplModel>, Failure> {
    let Some(path) = &arg.model else {
        log::warn!("no --model given; using the bundled procedural model");
        return Ok(Cow::Borrowed(fixture::model()));
    };
    let (model, warnings) = SmplModel::load_with_warnings(path)
        .with_context(|| format!("loading model {}", path.display()))
        .input()?;
    for w in warnings {
        log::warn!("{}: {w}", path.display());
    }
    Ok(Cow::Owned(model))
}

fn read_params_for(path: &Path, model: &SmplModel) -> Result<ParamsFile, Failure> {
    let file = io::read_params(path).input()?;
    file.params()
        .validate(model.num_betas())
        .with_context(|| path.display().to_string())
        .input()?;
    Ok(file)
}

fn intrinsics_for(focal: f64, requested: Option<(u32, u32)>, recorded: (u32, u32), source: &Path) -> Result<Intrinsics, Failure> {
    if let Some(size) = requested.filter(|s| *s != recorded) {
        return Err(anyhow!(
            "--size {}x{} does not match the {}x{} recorded in {}",
            size.0,
            size.1,
            recorded.0,
            recorded.1,
            source.display()
        ))
        .input();
    }
    Intrinsics::centered(focal, recorded).input()
}

/// Shortest round-trip decimal, always with a fractional part.
fn decimal(x: f64) -> String {
    if x.is_finite() && x.fract() == 0.0 {
        format!("{x:.1}")
    } else {
        format!("{x}")
    }
}

fn write_text(path: &Path, text: &str) -> Outcome {
    std::fs::write(path, text)
        .with_context(|| format!("writing {}", path.display()))
        .input()
}

pub fn fit(a: FitArgs) -> Outcome {
    let model = load_model(&a.model)?;
    let corr = io::read_dcm_for_model(&a.corr, model.faces().len()).input()?;
    let intrinsics = intrinsics_for(a.camera.focal, a.camera.size, corr.image_size, &a.corr)?;
    let init = read_params_for(&a.init, &model)?.params();

    let mut config = soy_core::make_stage_config(a.stage).input()?;
    if let Some(n) = a.iters {
        config.iterations = n;
    }
    if let Some(lr) = a.lr {
        config.optimizer.lr = lr;
    }
    for (name, value) in &a.weights {
        if !config.weights.set(name, *value) {
            return Err(anyhow!("unknown loss weight `{name}`")).input();
        }
    }
    config.convergence.early_stop = !a.no_early_stop;
    config.dp_normalize = match a.dp_normalize {
        DpNormalizeArg::Sum => DpNormalize::Sum,
        DpNormalizeArg::Mean => DpNormalize::Mean,
    };

    let keypoints = match &a.keypoints {
        Some(path) => {
            let kp = io::read_keypoints(path).input()?;
            kp.validate().with_context(|| path.display().to_string()).input()?;
            Some(kp)
        }
        None => None,
    };
    let use_keypoints = config.weights.keypoints_2d > 0.0;
    if use_keypoints && keypoints.is_none() {
        return Err(anyhow!("weight `2d` is set but no --keypoints file was given")).input();
    }
    if !use_keypoints && keypoints.is_some() {
        log::warn!("--keypoints ignored: set a positive `2d` weight to use them");
    }

    let inputs = FitInputs {
        model: &model,
        intrinsics: &intrinsics,
        corr: &corr,
        keypoints: keypoints.as_ref().filter(|_| use_keypoints),
    };
    let result = soy_core::fit(inputs, &init, &config).map_err(|e| match e {
        FitError::NonFinite { .. } | FitError::ObjectiveMismatch => Failure::numerical(e),
        FitError::Loss(LossError::Projection { .. }) => Failure::input(anyhow!(e).context("initial parameters")),
        other => Failure::input(other),
    })?;
    if result.rolled_back {
        log::warn!("an update left the visible region; kept the best iterate before it");
    }
    eprintln!(
        "fit: {} iterations, loss {} -> {}, {:.2} s",
        result.iterations_run, result.initial_total, result.final_total, result.wall_time
    );

    // Wall time stays on stderr so output files are reproducible byte for byte.
    let meta = json!({
        "stage": a.stage,
        "iterations_run": result.iterations_run,
        "converged": result.converged,
        "rolled_back": result.rolled_back,
        "initial_total": result.initial_total,
        "final_total": result.final_total,
        "weights": config.weights,
        "dp_normalize": config.dp_normalize,
    });
    io::write_params(&a.out, &ParamsFile::new(&result.params, Some(meta))).input()?;

    if let Some(path) = &a.mesh_out {
        let mesh = model.skin(&result.params).input()?;
        io::export_obj(&mesh, path).input()?;
    }
    if let Some(path) = &a.trace {
        write_text(path, &trace_csv(&result.trace))?;
    }
    Ok(())
}

/// One row per iteration; each term contributes its unweighted value and its
/// weighted contribution to the total.
fn trace_csv(trace: &[TraceEntry]) -> String {
    let mut s = String::from("iteration,total,best_total");
    if let Some(first) = trace.first() {
        for t in &first.terms {
            let _ = write!(s, ",{0},{0}_weighted", t.name);
        }
    }
    s.push('\n');
    for e in trace {
        let _ = write!(s, "{},{},{}", e.iteration, e.total, e.best_total);
        for t in &e.terms {
            let _ = write!(s, ",{},{}", t.value, t.weighted());
        }
        s.push('\n');
    }
    s
}

pub fn synth(a: SynthArgs) -> Outcome {
    let model = load_model(&a.model)?;
    let spec = SceneSpec {
        beta_mode: match a.beta_mode {
            BetaModeArg::Prior => BetaMode::Prior,
            BetaModeArg::Zero => BetaMode::Zero,
        },
        theta_sigma: a.theta_sigma,
        n_records: a.n_records,
        noise_px: a.noise_px,
        intrinsics: Intrinsics::centered(a.focal, a.size).input()?,
        seed: a.seed,
    };
    let scene = soy_core::generate_scene(&model, &spec).map_err(|e| match e {
        SynthError::Params(_) => Failure::numerical(e),
        other => Failure::input(other),
    })?;
    let invocation = json!({
        "command": "synth",
        "model": a.model.model.as_ref().map(|p| p.display().to_string()),
        "seed": a.seed,
        "n_records": a.n_records,
        "noise_px": a.noise_px,
        "beta_mode": match a.beta_mode {
            BetaModeArg::Prior => "prior",
            BetaModeArg::Zero => "zero",
        },
        "theta_sigma": a.theta_sigma,
        "focal": a.focal,
        "size": format!("{}x{}", a.size.0, a.size.1),
    });
    io::write_scene(&scene, &a.out, Some(invocation)).input()
}

pub fn pve_t_sc(a: PveArgs) -> Outcome {
    let model = load_model(&a.model)?;
    let pred = read_params_for(&a.pred, &model)?;
    let gt = read_params_for(&a.gt, &model)?;
    let value = metrics::pve_t_sc(&model, &pred.beta, &gt.beta).numerical()?;
    println!("{}", decimal(value));
    Ok(())
}

pub fn miou(a: MiouArgs) -> Outcome {
    let model = load_model(&a.model)?;
    let pred = read_params_for(&a.pred, &model)?;
    let gt = io::read_pgm(&a.mask).input()?;
    let intrinsics = intrinsics_for(a.camera.focal, a.camera.size, gt.size(), &a.mask)?;
    let (mask, _) = raster::render(&model, &pred.params(), &intrinsics).input()?;
    let value = metrics::miou(&mask, &gt).input()?;
    println!("{}", decimal(value));
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> Outcome {
    let model = load_model(&a.model)?;
    let options = GradcheckOptions {
        trials: a.trials,
        seed: a.seed,
        corrupt: a.inject_fault,
    };
    let report = gradcheck::run(&model, &options).map_err(|e| match e {
        GradcheckError::Loss(_) => Failure::numerical(e),
        other => Failure::input(other),
    })?;
    for c in &report.checks {
        println!(
            "{:<6} {:.3e} {}",
            c.name,
            c.worst_rel_error,
            if c.passed() { "ok" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = report.failures().map(|c| c.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::check(format!(
            "gradient check failed for {} (tolerance {:e})",
            failed.join(", "),
            gradcheck::TOLERANCE
        )))
    }
}

pub fn fixture(a: FixtureArgs) -> Outcome {
    let bytes = fixture::smf_bytes(a.seed);
    std::fs::write(&a.out, bytes)
        .with_context(|| format!("writing {}", a.out.display()))
        .input()
}
