use std::fs;
use std::path::Path;

use clap::Args;
use nasdip::evolve::{resume_search, run_search, SearchState};
use nasdip::fleet::{Fleet, Problem};
use nasdip::quality::{psnr, ssim};
use serde_json::{json, Value};

use crate::config::{load_config, ConfigArgs, RunConfig};
use crate::report::{checkpoint_path, latest_checkpoint, load_state, write_reports, CHECKPOINT_DIR};
use crate::{imageio, write_json, write_text, CliError};

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Continue from the latest checkpoint in the output directory, using
    /// the run.json stored there; only --gens may be changed.
    #[arg(long)]
    pub resume: bool,
}

/// Restoration quality against the reference, when one is available.
pub fn quality_against(problem: &Problem, restored: &nasdip::autodiff::Tensor<f32>) -> Value {
    let Some(r) = &problem.reference else {
        return Value::Null;
    };
    let mut q = json!({
        "psnr": psnr(restored, r).ok(),
        "ssim": ssim(restored, r).ok(),
    });
    if problem.task.observed.shape == r.shape {
        q["observed_psnr"] = json!(psnr(&problem.task.observed, r).ok());
        q["observed_ssim"] = json!(ssim(&problem.task.observed, r).ok());
    }
    q
}

fn start(args: &SearchArgs) -> Result<(RunConfig, Option<SearchState>), CliError> {
    let flags = args.cfg.resolve()?;
    if !args.resume {
        return Ok((flags, None));
    }
    let mut cfg = load_config(&flags.out.join("run.json"))?;
    cfg.out = flags.out.clone();
    let Some(path) = latest_checkpoint(&cfg.out)? else {
        return Err(CliError::Usage(format!("{} holds no checkpoint to resume", cfg.out.display())));
    };
    let mut state = load_state(&path)?;
    // the generation limit may be raised to extend a finished run
    if let Some(g) = args.cfg.generations {
        cfg.generations = g;
        state.config.max_generations = g;
    }
    Ok((cfg, Some(state)))
}

pub fn run(args: &SearchArgs) -> Result<(), CliError> {
    let (cfg, resume) = start(args)?;
    cfg.check_usage()?;
    cfg.check_fitness()?;
    let ga = cfg.ga();
    ga.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let problem = cfg.problem()?;
    let backend = cfg.backend()?;

    let out = cfg.out.clone();
    fs::create_dir_all(out.join(CHECKPOINT_DIR))
        .map_err(|e| CliError::Run(format!("cannot create {}: {e}", out.display())))?;
    write_json(&out.join("run.json"), &serde_json::to_value(&cfg).expect("config json"))?;

    let mut fleet = Fleet::new(problem.clone(), backend);
    fleet.timeout = Some(cfg.job_timeout());
    let mut last: Option<SearchState> = None;
    let mut observe = |s: &SearchState| -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(s).map_err(std::io::Error::other)? + "\n";
        fs::write(checkpoint_path(&out, s.generation), text)?;
        if let Some(h) = s.history.last() {
            say!(
                "generation {:>3}  max {:.6}  mean {:.6}  valid {}/{}",
                h.generation,
                h.max,
                h.mean,
                h.valid,
                s.population.len()
            );
        }
        last = Some(s.clone());
        Ok(())
    };
    let result = match resume {
        Some(state) => resume_search(state, &mut fleet, &mut observe),
        None => run_search(ga, &mut fleet, &mut observe),
    }
    .map_err(|e| CliError::Run(e.to_string()))?;
    let state = last.ok_or_else(|| CliError::Run("search produced no generation".into()))?;
    write_reports(&out, &state)?;

    let best = result.best;
    write_text(&out.join("best.genome"), &(best.genome.to_hex() + "\n"))?;
    let arch = best.genome.decode().map_err(|e| CliError::Run(e.to_string()))?;
    let outcome = problem.train_genome(&best.genome).map_err(CliError::Run)?;
    write_text(&out.join("trace.csv"), &outcome.trace.to_csv())?;
    let quality = match &outcome.restored {
        Some(img) => {
            imageio::write_image(&out.join("best.png"), img)?;
            quality_against(&problem, img)
        }
        None => Value::Null,
    };
    write_json(
        &out.join("best.json"),
        &json!({
            "genome": best.genome,
            "fitness": best.fitness,
            "architecture": arch,
            "graph": nasdip::dip::compile_for_task(&arch.units, &problem.task, problem.train.noise_channels, &problem.compile)
                .graph()
                .map(|g| g.to_json()),
        }),
    )?;
    write_json(
        &out.join("summary.json"),
        &json!({
            "task": cfg.task,
            "fitness_plugin": cfg.fitness,
            "best_genome": best.genome.to_hex(),
            "best_fitness": best.value(),
            "best_valid": best.fitness.as_ref().is_some_and(|f| f.valid),
            "generations": result.history.len(),
            "converged": result.converged,
            "quality": quality,
        }),
    )?;
    say!("best {} fitness {:.6}", best.genome.to_hex(), best.value());
    if outcome.restored.is_none() {
        return Err(CliError::Run(no_image_reason(&outcome.trace)));
    }
    log_quality(&out, &quality);
    Ok(())
}

pub fn no_image_reason(trace: &nasdip::dip::TrainTrace) -> String {
    match &trace.invalid {
        Some(r) => format!("invalid architecture: {r}"),
        None => "training diverged: loss became non-finite".into(),
    }
}

fn log_quality(out: &Path, q: &Value) {
    if let Some(p) = q.get("psnr").and_then(Value::as_f64) {
        say!("restored PSNR {p:.3} dB ({})", out.join("best.png").display());
    }
}
