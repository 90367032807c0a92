use std::fs;

use clap::{ArgGroup, Args};
use nasdip::dip::baseline_genome;
use nasdip::genome::Genome;
use serde_json::json;

use crate::config::ConfigArgs;
use crate::search::{no_image_reason, quality_against};
use crate::{imageio, write_json, write_text, CliError};

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("architecture").required(true).args(["genome", "baseline_dip"])))]
pub struct TrainArgs {
    /// Genome hex; its layout comes from --units and --variant.
    #[arg(long)]
    pub genome: Option<String>,
    /// Use the built-in hourglass baseline genome.
    #[arg(long)]
    pub baseline_dip: bool,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

pub fn run(args: &TrainArgs) -> Result<(), CliError> {
    let cfg = args.cfg.resolve()?;
    cfg.check_usage()?;
    let genome = match &args.genome {
        Some(hex) => Genome::from_hex(cfg.space().layout(), hex)
            .map_err(|e| CliError::Usage(format!("bad genome: {e}")))?,
        None => baseline_genome(),
    };
    let problem = cfg.problem()?;
    let out = &cfg.out;
    fs::create_dir_all(out).map_err(|e| CliError::Run(format!("cannot create {}: {e}", out.display())))?;

    let outcome = problem.train_genome(&genome).map_err(CliError::Run)?;
    let Some(restored) = &outcome.restored else {
        if outcome.trace.invalid.is_none() {
            write_text(&out.join("trace.csv"), &outcome.trace.to_csv())?;
        }
        return Err(CliError::Run(no_image_reason(&outcome.trace)));
    };
    write_text(&out.join("trace.csv"), &outcome.trace.to_csv())?;
    let image = out.join("restored.png");
    imageio::write_image(&image, restored)?;
    let quality = quality_against(&problem, restored);
    let label = if args.baseline_dip {
        "baseline hourglass (hand-fixed approximation of the standard deep-image-prior network)"
    } else {
        "user genome"
    };
    write_json(
        &out.join("summary.json"),
        &json!({
            "architecture": label,
            "genome": genome,
            "epochs": outcome.trace.losses.len(),
            "final_loss": outcome.trace.final_loss(),
            "quality": quality,
        }),
    )?;
    say!("wrote {}", image.display());
    if let Some(p) = quality.get("psnr").and_then(|v| v.as_f64()) {
        say!("PSNR {p:.3} dB");
    }
    Ok(())
}
