//! Run-directory artifacts derived from search checkpoints: convergence CSV,
//! final-population architecture vectors and an HTML summary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use nasdip::evolve::{GenerationStats, SearchState};
use nasdip::genome::Genome;

use crate::CliError;

pub const CHECKPOINT_DIR: &str = "generations";

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directory written by `search`.
    pub run_dir: PathBuf,
}

pub fn checkpoint_path(dir: &Path, generation: usize) -> PathBuf {
    dir.join(CHECKPOINT_DIR).join(format!("gen{generation:03}.json"))
}

/// The checkpoint with the highest generation number, if any.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>, CliError> {
    let gens = dir.join(CHECKPOINT_DIR);
    if !gens.is_dir() {
        return Ok(None);
    }
    let mut best: Option<(usize, PathBuf)> = None;
    let entries = fs::read_dir(&gens)
        .map_err(|e| CliError::Run(format!("cannot list {}: {e}", gens.display())))?;
    for entry in entries.flatten() {
        let name = entry.file_name();
        let Some(n) = name
            .to_str()
            .and_then(|s| s.strip_prefix("gen"))
            .and_then(|s| s.strip_suffix(".json"))
            .and_then(|s| s.parse::<usize>().ok())
        else {
            continue;
        };
        if best.as_ref().map_or(true, |(b, _)| n > *b) {
            best = Some((n, entry.path()));
        }
    }
    Ok(best.map(|(_, p)| p))
}

pub fn load_state(path: &Path) -> Result<SearchState, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Run(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Run(format!("corrupt checkpoint {}: {e}", path.display())))
}

pub fn generations_csv(history: &[GenerationStats]) -> String {
    let mut out = String::from("generation,max,mean,best_ever,valid\n");
    for h in history {
        let _ = writeln!(out, "{},{},{},{},{}", h.generation, h.max, h.mean, h.best_ever, h.valid);
    }
    out
}

fn vector(genome: &Genome) -> Vec<String> {
    let arch = genome.decode().expect("population genomes have the configured layout");
    let mut v = Vec::new();
    for u in &arch.units {
        v.push(u8::from(u.enc_skip).to_string());
        v.push(u.enc_filter_size().to_string());
        v.push(u.enc_channels().to_string());
        v.push(u8::from(u.dec_skip).to_string());
        v.push(u.dec_filter_size().to_string());
        v.push(u.dec_channels().to_string());
        v.extend(u.skip_gates.iter().map(|g| g.to_string()));
    }
    if let Some(e) = arch.epochs() {
        v.push(e.to_string());
    }
    v
}

/// Final population, best first, with each architecture flattened into
/// numeric columns for external clustering.
pub fn population_csv(state: &SearchState) -> String {
    let layout = state.config.space.layout();
    let mut header = vec!["rank".to_string(), "fitness".into(), "valid".into(), "genome".into()];
    for i in 1..=layout.units {
        for f in ["enc_skip", "enc_filter", "enc_channels", "dec_skip", "dec_filter", "dec_channels"] {
            header.push(format!("u{i}_{f}"));
        }
        header.extend((1..=layout.units).map(|j| format!("u{i}_gate{j}")));
    }
    if layout.variant == nasdip::genome::Variant::AsymmetricWithEpochs {
        header.push("epochs".into());
    }
    let mut out = header.join(",") + "\n";
    for (rank, &i) in state.ranking().iter().enumerate() {
        let ind = &state.population[i];
        let valid = ind.fitness.as_ref().is_some_and(|f| f.valid);
        let mut row = vec![
            rank.to_string(),
            ind.value().to_string(),
            u8::from(valid).to_string(),
            ind.genome.to_hex(),
        ];
        row.extend(vector(&ind.genome));
        out += &(row.join(",") + "\n");
    }
    out
}

fn svg_plot(history: &[GenerationStats]) -> String {
    let (w, h, pad) = (480.0, 240.0, 30.0);
    let top = history
        .iter()
        .map(|s| s.max)
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let n = history.len().max(2) - 1;
    let pt = |i: usize, v: f64| {
        (
            pad + (w - 2.0 * pad) * i as f64 / n as f64,
            h - pad - (h - 2.0 * pad) * v / top,
        )
    };
    let line = |f: fn(&GenerationStats) -> f64| {
        history
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let (x, y) = pt(i, f(s));
                format!("{x:.1},{y:.1}")
            })
            .collect::<Vec<_>>()
            .join(" ")
    };
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\
<rect width=\"{w}\" height=\"{h}\" fill=\"white\" stroke=\"#ccc\"/>\
<polyline fill=\"none\" stroke=\"#c33\" stroke-width=\"2\" points=\"{}\"/>\
<polyline fill=\"none\" stroke=\"#36c\" stroke-width=\"2\" points=\"{}\"/>\
<text x=\"{pad}\" y=\"18\" font-size=\"12\" fill=\"#c33\">max</text>\
<text x=\"{}\" y=\"18\" font-size=\"12\" fill=\"#36c\">mean</text>\
<text x=\"4\" y=\"{}\" font-size=\"10\">0</text>\
<text x=\"4\" y=\"{pad}\" font-size=\"10\">{top:.3}</text></svg>",
        line(|s| s.max),
        line(|s| s.mean),
        pad + 40.0,
        h - pad,
    )
}

pub fn html(state: &SearchState) -> String {
    let mut rows = String::new();
    for s in &state.history {
        let _ = write!(
            rows,
            "<tr><td>{}</td><td>{:.6}</td><td>{:.6}</td><td>{:.6}</td><td>{}</td></tr>",
            s.generation, s.max, s.mean, s.best_ever, s.valid
        );
    }
    let best = state
        .best
        .as_ref()
        .map(|b| format!("<p>Best genome <code>{}</code>, fitness {:.6}</p>", b.genome.to_hex(), b.value()))
        .unwrap_or_default();
    format!(
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>Search report</title></head><body>\n\
<h1>Search report</h1>\n<p>Population {}, generations evaluated {}, converged: {}.</p>\n{best}\n{}\n\
<table border=\"1\"><tr><th>generation</th><th>max</th><th>mean</th><th>best ever</th><th>valid</th></tr>{rows}</table>\n\
<p>Final-population architecture vectors: <a href=\"population.csv\">population.csv</a></p>\n</body></html>\n",
        state.config.population,
        state.history.len(),
        state.converged(),
        svg_plot(&state.history),
    )
}

fn write(path: PathBuf, text: &str) -> Result<(), CliError> {
    fs::write(&path, text).map_err(|e| CliError::Run(format!("cannot write {}: {e}", path.display())))
}

/// Writes `generations.csv`, `population.csv` and `report.html` into `dir`.
pub fn write_reports(dir: &Path, state: &SearchState) -> Result<(), CliError> {
    write(dir.join("generations.csv"), &generations_csv(&state.history))?;
    write(dir.join("population.csv"), &population_csv(state))?;
    write(dir.join("report.html"), &html(state))
}

pub fn run(args: &ReportArgs) -> Result<(), CliError> {
    let dir = &args.run_dir;
    if !dir.is_dir() {
        return Err(CliError::Usage(format!("run directory {} does not exist", dir.display())));
    }
    let Some(path) = latest_checkpoint(dir)? else {
        return Err(CliError::Usage(format!("{} holds no search checkpoints", dir.display())));
    };
    let state = load_state(&path)?;
    write_reports(dir, &state)?;
    say!("generation      max     mean  best_ever  valid");
    for s in &state.history {
        say!(
            "{:>10} {:>8.4} {:>8.4} {:>10.4} {:>6}",
            s.generation, s.max, s.mean, s.best_ever, s.valid
        );
    }
    if let Some(b) = &state.best {
        say!("best {} fitness {:.6}", b.genome.to_hex(), b.value());
    }
    Ok(())
}
