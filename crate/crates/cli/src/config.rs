//! Run configuration: a flat JSON object whose keys mirror the long flags.
//! Values from the file are overridden by flags given on the command line.

use std::fs;
use std::net::{SocketAddr, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::Args;
use nasdip::archgraph::CompileOptions;
use nasdip::autodiff::LossNorm;
use nasdip::dip::{TaskKind, TaskSpec, TrainConfig};
use nasdip::evolve::GAConfig;
use nasdip::fleet::{Backend, DispatchOptions, Problem};
use nasdip::genome::{SearchSpaceConfig, Variant};
use nasdip::quality::FitnessKind;
use serde::{Deserialize, Serialize};

use crate::imageio;
use crate::CliError;

pub const WORKERS_ENV: &str = "NASDIP_WORKERS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskKind,
    pub image: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    /// Clean image for full-reference fitness and reporting.
    pub reference: Option<PathBuf>,
    pub scale: Option<u32>,
    pub loss: LossNorm,

    pub units: usize,
    pub variant: Variant,
    pub mutation_rate: f64,
    pub population: usize,
    pub generations: usize,
    pub elite_frac: f64,
    pub cull_frac: f64,
    pub window: usize,
    pub threshold: f64,
    pub seed: u64,

    pub epochs: u32,
    pub learning_rate: f64,
    pub noise_channels: usize,
    pub noise_amplitude: f64,
    pub train_seed: u64,
    pub normalize: bool,
    pub max_macs: Option<u64>,
    pub fitness: FitnessKind,

    pub out: PathBuf,
    pub workers: Vec<String>,
    pub parallelism: usize,
    pub job_timeout_secs: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let ga = GAConfig::default();
        let train = TrainConfig::default();
        let compile = CompileOptions::default();
        Self {
            task: TaskKind::Denoise,
            image: None,
            mask: None,
            reference: None,
            scale: None,
            loss: LossNorm::L2,
            units: ga.space.units,
            variant: ga.space.variant,
            mutation_rate: ga.space.mutation_rate,
            population: ga.population,
            generations: ga.max_generations,
            elite_frac: ga.elite_frac,
            cull_frac: ga.cull_frac,
            window: ga.window,
            threshold: ga.threshold,
            seed: ga.seed,
            epochs: train.epochs,
            learning_rate: train.learning_rate,
            noise_channels: train.noise_channels,
            noise_amplitude: train.noise_amplitude,
            train_seed: train.seed,
            normalize: compile.normalize,
            max_macs: compile.max_macs,
            fitness: FitnessKind::OraclePsnr,
            out: PathBuf::from("run"),
            workers: Vec::new(),
            parallelism: 1,
            job_timeout_secs: nasdip::fleet::DEFAULT_JOB_TIMEOUT.as_secs(),
        }
    }
}

/// Flags shared by `search` and `train`. Every flag is optional so that
/// unset ones fall through to the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// Flat JSON config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// denoise | inpaint | upscale
    #[arg(long)]
    pub task: Option<TaskKind>,
    /// Degraded input image (PNG, PPM or PGM).
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Inpainting mask; nonzero pixels are known, zero pixels are holes.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Clean reference image.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Upscaling factor: 2, 4 or 8.
    #[arg(long)]
    pub scale: Option<u32>,
    /// Reconstruction loss: l1 | l2
    #[arg(long, value_parser = parse_loss)]
    pub loss: Option<LossNorm>,
    /// Encoder/decoder units per genome.
    #[arg(long)]
    pub units: Option<usize>,
    /// asymmetric | symmetric | asymmetric_with_epochs
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub mutation_rate: Option<f64>,
    /// Population size.
    #[arg(long = "pop")]
    pub population: Option<usize>,
    /// Generation limit, counting the initial one.
    #[arg(long = "gens")]
    pub generations: Option<usize>,
    #[arg(long)]
    pub elite_frac: Option<f64>,
    #[arg(long)]
    pub cull_frac: Option<f64>,
    /// Convergence window in generations.
    #[arg(long)]
    pub window: Option<usize>,
    /// Convergence threshold (relative change).
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Search seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<u32>,
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub noise_channels: Option<usize>,
    #[arg(long)]
    pub noise_amplitude: Option<f64>,
    /// Seed for network weights and the input noise field.
    #[arg(long)]
    pub train_seed: Option<u64>,
    /// Disable per-channel normalization after stage convolutions.
    #[arg(long)]
    pub no_normalize: bool,
    /// Reject architectures above this many forward multiply-adds.
    #[arg(long)]
    pub max_macs: Option<u64>,
    /// oracle-psnr | recon-proxy | proxy-perceptual
    #[arg(long)]
    pub fitness: Option<FitnessKind>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker addresses (host:port), comma separated.
    #[arg(long, env = WORKERS_ENV, value_delimiter = ',')]
    pub workers: Option<Vec<String>>,
    /// Local evaluation threads.
    #[arg(long)]
    pub parallelism: Option<usize>,
    /// Per-job time limit in seconds.
    #[arg(long)]
    pub job_timeout: Option<u64>,
}

fn parse_loss(s: &str) -> Result<LossNorm, String> {
    match s {
        "l1" | "L1" => Ok(LossNorm::L1),
        "l2" | "L2" => Ok(LossNorm::L2),
        other => Err(format!("unknown loss `{other}` (expected l1 or l2)")),
    }
}

macro_rules! overlay {
    ($cfg:ident, $args:ident; $($field:ident),* $(,)?) => {
        $(if let Some(v) = $args.$field.clone() { $cfg.$field = v; })*
    };
}

impl ConfigArgs {
    /// Loads the config file (if any) and applies the flags on top.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => load_config(path)?,
            None => RunConfig::default(),
        };
        overlay!(cfg, self; task, units, variant, mutation_rate, population, generations,
            elite_frac, cull_frac, window, threshold, seed, epochs, learning_rate,
            noise_channels, noise_amplitude, train_seed, fitness, out, workers, parallelism, loss);
        if self.image.is_some() {
            cfg.image = self.image.clone();
        }
        if self.mask.is_some() {
            cfg.mask = self.mask.clone();
        }
        if self.reference.is_some() {
            cfg.reference = self.reference.clone();
        }
        if self.scale.is_some() {
            cfg.scale = self.scale;
        }
        if self.max_macs.is_some() {
            cfg.max_macs = self.max_macs;
        }
        if self.no_normalize {
            cfg.normalize = false;
        }
        if let Some(t) = self.job_timeout {
            cfg.job_timeout_secs = t;
        }
        cfg.workers.retain(|w| !w.trim().is_empty());
        Ok(cfg)
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("bad config {}: {e}", path.display())))
}

impl RunConfig {
    pub fn space(&self) -> SearchSpaceConfig {
        SearchSpaceConfig {
            units: self.units,
            variant: self.variant,
            mutation_rate: self.mutation_rate,
        }
    }

    pub fn ga(&self) -> GAConfig {
        GAConfig {
            population: self.population,
            elite_frac: self.elite_frac,
            cull_frac: self.cull_frac,
            window: self.window,
            threshold: self.threshold,
            max_generations: self.generations,
            space: self.space(),
            seed: self.seed,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            noise_channels: self.noise_channels,
            noise_amplitude: self.noise_amplitude,
            seed: self.train_seed,
        }
    }

    pub fn compile(&self) -> CompileOptions {
        CompileOptions {
            normalize: self.normalize,
            max_macs: self.max_macs,
            ..CompileOptions::default()
        }
    }

    /// Checks flag combinations that do not need any file access.
    pub fn check_usage(&self) -> Result<(), CliError> {
        let usage = |m: &str| Err(CliError::Usage(m.to_string()));
        if self.image.is_none() {
            return usage("--image is required");
        }
        match self.task {
            TaskKind::Inpaint if self.mask.is_none() => {
                return usage("--task inpaint requires --mask")
            }
            TaskKind::Upscale if self.scale.is_none() => {
                return usage("--task upscale requires --scale")
            }
            _ => {}
        }
        self.space()
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        self.train()
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(())
    }

    /// Search needs a reference image for full-reference fitness plugins.
    pub fn check_fitness(&self) -> Result<(), CliError> {
        if self.fitness.plugin().needs_reference() && self.reference.is_none() {
            return Err(CliError::Usage(format!(
                "fitness {} requires --reference",
                self.fitness.name()
            )));
        }
        Ok(())
    }

    /// Reads the images and builds the evaluation problem.
    pub fn problem(&self) -> Result<Problem, CliError> {
        self.check_usage()?;
        let image = imageio::read_image(self.image.as_deref().expect("checked"))?;
        let task = match self.task {
            TaskKind::Denoise => TaskSpec::denoise(image),
            TaskKind::Inpaint => {
                let mask = imageio::read_mask(self.mask.as_deref().expect("checked"))?;
                TaskSpec::inpaint(image, mask).map_err(|e| CliError::Usage(e.to_string()))?
            }
            TaskKind::Upscale => TaskSpec::upscale(image, self.scale.expect("checked"))
                .map_err(|e| CliError::Usage(e.to_string()))?,
        }
        .with_loss(self.loss);
        let reference = match &self.reference {
            Some(p) => {
                let r = imageio::read_image(p)?;
                if r.shape != task.target_shape() {
                    return Err(CliError::Usage(format!(
                        "reference is {} but the restored image will be {}",
                        r.shape,
                        task.target_shape()
                    )));
                }
                Some(r)
            }
            None => None,
        };
        Ok(Problem {
            task,
            reference,
            train: self.train(),
            fitness: self.fitness,
            compile: self.compile(),
        })
    }

    pub fn job_timeout(&self) -> Duration {
        Duration::from_secs(self.job_timeout_secs)
    }

    pub fn backend(&self) -> Result<Backend, CliError> {
        if self.workers.is_empty() {
            return Ok(Backend::Local {
                parallelism: self.parallelism.max(1),
            });
        }
        let workers = self
            .workers
            .iter()
            .map(|w| resolve_addr(w))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Backend::Remote(DispatchOptions {
            workers,
            local_parallelism: self.parallelism.max(1),
            job_timeout: self.job_timeout(),
            ..DispatchOptions::default()
        }))
    }
}

pub fn resolve_addr(text: &str) -> Result<SocketAddr, CliError> {
    text.trim()
        .to_socket_addrs()
        .map_err(|e| CliError::Usage(format!("bad worker address `{text}`: {e}")))?
        .next()
        .ok_or_else(|| CliError::Usage(format!("worker address `{text}` did not resolve")))
}
