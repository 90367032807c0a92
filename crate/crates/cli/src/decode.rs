use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use clap::Args;
use nasdip::archgraph::{compile, CompileOptions, Shape};
use nasdip::genome::{Architecture, Genome, Layout, Variant};

use crate::CliError;

#[derive(Debug, Args)]
pub struct DecodeArgs {
    /// Genome as hex.
    pub genome: String,
    #[arg(long, default_value_t = 5)]
    pub units: usize,
    #[arg(long, default_value = "asymmetric")]
    pub variant: Variant,
    /// Square image side used for the validity check.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Output image channels used for the validity check.
    #[arg(long, default_value_t = 3)]
    pub channels: usize,
    #[arg(long, default_value_t = 32)]
    pub noise_channels: usize,
    #[arg(long)]
    pub max_macs: Option<u64>,
    /// Write the compiled graph as JSON to this file, or `-` for stdout.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

/// One row per encoder stage, one per decoder stage, one per open skip.
pub fn unit_table(arch: &Architecture) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<8} {:<8} {:>6} {:>8}", "row", "state", "filter", "channels");
    for (i, u) in arch.units.iter().enumerate() {
        for (name, skip, f, c) in [
            (format!("E{}", i + 1), u.enc_skip, u.enc_filter_size(), u.enc_channels()),
            (format!("D{}", i + 1), u.dec_skip, u.dec_filter_size(), u.dec_channels()),
        ] {
            let state = if skip { "skipped" } else { "active" };
            let _ = writeln!(out, "{name:<8} {state:<8} {:>6} {c:>8}", format!("{f}x{f}"));
        }
    }
    for (i, u) in arch.units.iter().enumerate() {
        for (j, &g) in u.skip_gates.iter().enumerate() {
            if g > 0 {
                let _ = writeln!(out, "{:<8} {:<8} {:>6} {g:>8}", format!("S{}>D{}", i + 1, j + 1), "skip", "1x1");
            }
        }
    }
    out
}

pub fn run(args: &DecodeArgs) -> Result<(), CliError> {
    let layout = Layout::new(args.units, args.variant);
    let genome = Genome::from_hex(layout, &args.genome).map_err(|e| CliError::Usage(e.to_string()))?;
    let arch = genome.decode().map_err(|e| CliError::Usage(e.to_string()))?;
    say!("genome {} ({} bits, {layout})", genome.to_hex(), genome.len());
    if let Some(e) = arch.epochs() {
        say!("epochs {e}");
    }
    say_raw!("{}", unit_table(&arch));

    let opts = CompileOptions {
        max_macs: args.max_macs,
        ..CompileOptions::default()
    };
    let input = Shape::new(args.noise_channels, args.size, args.size);
    let target = Shape::new(args.channels, args.size, args.size);
    let compiled = compile(&arch.units, input, target, &opts);
    match compiled.graph() {
        Some(g) => {
            say!("VALID");
            say!("parameters {}", g.param_count());
            say!("multiply-adds {}", g.macs());
            if let Some(path) = &args.json {
                let text = serde_json::to_string_pretty(&g.to_json()).expect("graph json");
                if path.as_os_str() == "-" {
                    say!("{text}");
                } else {
                    fs::write(path, text + "\n")
                        .map_err(|e| CliError::Run(format!("cannot write {}: {e}", path.display())))?;
                }
            }
        }
        None => {
            say!("INVALID: {}", compiled.invalid_reason().expect("invalid"));
            say!("parameters 0");
        }
    }
    Ok(())
}
