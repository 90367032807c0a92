//! Parallel candidate evaluation: self-contained jobs, an in-process worker
//! pool, and a master/worker TCP protocol with retry and local fallback.

mod dispatch;
pub mod wire;
mod worker;

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::archgraph::CompileOptions;
use crate::autodiff::{LossNorm, Tensor};
use crate::dip::{compile_for_task, train_until, TaskKind, TaskSpec, TrainConfig, TrainOutcome};
use crate::evolve::Evaluator;
use crate::genome::Genome;
use crate::quality::{fitness, FitnessKind, FitnessScore};

pub use dispatch::{dispatch, DispatchError, DispatchOptions, DispatchReport};
pub use worker::{serve_worker, Worker, WorkerOptions};

/// Default per-job wall-clock limit.
pub const DEFAULT_JOB_TIMEOUT: Duration = Duration::from_secs(600);

/// Task with images replaced by content digests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskDescriptor {
    pub kind: TaskKind,
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<u32>,
    pub loss_norm: LossNorm,
    /// Ground truth, for reference-based fitness only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
}

impl TaskDescriptor {
    pub fn digests(&self) -> impl Iterator<Item = &String> {
        std::iter::once(&self.image)
            .chain(self.mask.as_ref())
            .chain(self.reference.as_ref())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalJob {
    pub job_id: u64,
    pub genome: Genome,
    pub task: TaskDescriptor,
    pub train: TrainConfig,
    pub fitness: FitnessKind,
    #[serde(default)]
    pub compile: CompileOptions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalStatus {
    Ok,
    Invalid,
    Diverged,
    Timeout,
    Error,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalResult {
    pub job_id: u64,
    pub fitness: f64,
    #[serde(default)]
    pub components: BTreeMap<String, f64>,
    pub status: EvalStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
    pub wall_ms: f64,
}

/// Equality ignores wall time.
impl PartialEq for EvalResult {
    fn eq(&self, other: &Self) -> bool {
        self.job_id == other.job_id
            && self.fitness.to_bits() == other.fitness.to_bits()
            && self.components == other.components
            && self.status == other.status
            && self.detail == other.detail
    }
}

impl EvalResult {
    pub fn failed(job_id: u64, status: EvalStatus, detail: impl Into<String>) -> Self {
        Self {
            job_id,
            fitness: 0.0,
            components: BTreeMap::new(),
            status,
            detail: Some(detail.into()),
            wall_ms: 0.0,
        }
    }

    pub fn score(&self) -> FitnessScore {
        if self.status == EvalStatus::Ok {
            FitnessScore {
                value: self.fitness,
                components: self.components.clone(),
                valid: true,
            }
        } else {
            FitnessScore::invalid()
        }
    }
}

/// Content-addressed image store.
#[derive(Debug, Clone, Default)]
pub struct BlobStore {
    blobs: HashMap<String, Arc<Tensor<f32>>>,
}

impl BlobStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, image: Tensor<f32>) -> String {
        let d = wire::image_digest(&image);
        self.blobs.entry(d.clone()).or_insert_with(|| Arc::new(image));
        d
    }

    /// Inserts under a digest already verified by the caller.
    pub(crate) fn insert_verified(&mut self, digest: String, image: Tensor<f32>) {
        self.blobs.insert(digest, Arc::new(image));
    }

    pub fn get(&self, digest: &str) -> Option<&Arc<Tensor<f32>>> {
        self.blobs.get(digest)
    }

    pub fn contains(&self, digest: &str) -> bool {
        self.blobs.contains_key(digest)
    }

    pub fn len(&self) -> usize {
        self.blobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blobs.is_empty()
    }
}

/// Everything fixed across the candidates of one search.
#[derive(Debug, Clone)]
pub struct Problem {
    pub task: TaskSpec,
    pub reference: Option<Tensor<f32>>,
    pub train: TrainConfig,
    pub fitness: FitnessKind,
    pub compile: CompileOptions,
}

impl Problem {
    /// Registers the images in `blobs` and returns the descriptor.
    pub fn descriptor(&self, blobs: &mut BlobStore) -> TaskDescriptor {
        TaskDescriptor {
            kind: self.task.kind,
            image: blobs.insert(self.task.observed.clone()),
            mask: self.task.mask.clone().map(|m| blobs.insert(m)),
            scale: self.task.scale,
            loss_norm: self.task.loss_norm,
            reference: self.reference.clone().map(|r| blobs.insert(r)),
        }
    }

    pub fn job(&self, job_id: u64, genome: Genome, task: TaskDescriptor) -> EvalJob {
        EvalJob {
            job_id,
            genome,
            task,
            train: self.train,
            fitness: self.fitness,
            compile: self.compile,
        }
    }

    /// Trains `genome` and returns its restored image, or `None` for
    /// invalid or failed candidates.
    pub fn restore(&self, genome: &Genome) -> Option<Tensor<f32>> {
        self.train_genome(genome).ok()?.restored
    }

    /// Trains `genome` on the task and returns the restored image together
    /// with its trace. Invalid graphs come back as a flagged trace.
    pub fn train_genome(&self, genome: &Genome) -> Result<TrainOutcome, String> {
        let arch = genome.decode().map_err(|e| e.to_string())?;
        let mut train = self.train;
        if let Some(e) = arch.epochs() {
            train.epochs = e;
        }
        let compiled =
            compile_for_task(&arch.units, &self.task, train.noise_channels, &self.compile);
        train_until(&compiled, &self.task, &train, None).map_err(|e| e.to_string())
    }
}

fn rebuild_task(d: &TaskDescriptor, blobs: &BlobStore) -> Result<(TaskSpec, Option<Tensor<f32>>), String> {
    let fetch = |digest: &String| {
        blobs
            .get(digest)
            .map(|t| (**t).clone())
            .ok_or_else(|| format!("blob missing: {digest}"))
    };
    let task = TaskSpec {
        kind: d.kind,
        observed: fetch(&d.image)?,
        mask: d.mask.as_ref().map(fetch).transpose()?,
        scale: d.scale,
        loss_norm: d.loss_norm,
    };
    task.validate().map_err(|e| e.to_string())?;
    let reference = d.reference.as_ref().map(fetch).transpose()?;
    Ok((task, reference))
}

/// Runs one job to completion. Never panics on bad input; failures are
/// reported through the status.
pub fn evaluate_job(job: &EvalJob, blobs: &BlobStore, timeout: Option<Duration>) -> EvalResult {
    let start = Instant::now();
    let mut r = run_job(job, blobs, timeout.map(|t| start + t));
    r.wall_ms = start.elapsed().as_secs_f64() * 1e3;
    r
}

fn run_job(job: &EvalJob, blobs: &BlobStore, deadline: Option<Instant>) -> EvalResult {
    let id = job.job_id;
    let (task, reference) = match rebuild_task(&job.task, blobs) {
        Ok(t) => t,
        Err(e) => return EvalResult::failed(id, EvalStatus::Error, e),
    };
    let arch = match job.genome.decode() {
        Ok(a) => a,
        Err(e) => return EvalResult::failed(id, EvalStatus::Error, e.to_string()),
    };
    let mut train = job.train;
    if let Some(e) = arch.epochs() {
        train.epochs = e;
    }
    let compiled = compile_for_task(&arch.units, &task, train.noise_channels, &job.compile);
    if let Some(reason) = compiled.invalid_reason() {
        return EvalResult::failed(id, EvalStatus::Invalid, reason.to_string());
    }
    let outcome = match train_until(&compiled, &task, &train, deadline) {
        Ok(o) => o,
        Err(e) => return EvalResult::failed(id, EvalStatus::Error, e.to_string()),
    };
    if outcome.trace.timed_out {
        return EvalResult::failed(id, EvalStatus::Timeout, "job exceeded its time limit");
    }
    let Some(restored) = outcome.restored else {
        return EvalResult::failed(id, EvalStatus::Diverged, "loss became non-finite");
    };
    let plugin = job.fitness.plugin();
    match fitness(Some(&restored), &task, reference.as_ref(), plugin.as_ref()) {
        Ok(s) => EvalResult {
            job_id: id,
            fitness: s.value,
            components: s.components,
            status: EvalStatus::Ok,
            detail: None,
            wall_ms: 0.0,
        },
        Err(e) => EvalResult::failed(id, EvalStatus::Error, e.to_string()),
    }
}

/// Evaluates `jobs` on `parallelism` threads. Results are in job order and
/// independent of the thread count.
pub fn evaluate_local(
    jobs: &[EvalJob],
    blobs: &BlobStore,
    parallelism: usize,
    timeout: Option<Duration>,
) -> Vec<EvalResult> {
    let threads = parallelism.max(1);
    if threads == 1 || jobs.len() <= 1 {
        return jobs.iter().map(|j| evaluate_job(j, blobs, timeout)).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool");
    pool.install(|| {
        jobs.par_iter()
            .map(|j| evaluate_job(j, blobs, timeout))
            .collect()
    })
}

/// Where jobs run.
#[derive(Debug, Clone)]
pub enum Backend {
    Local { parallelism: usize },
    Remote(DispatchOptions),
}

/// GA evaluator that turns genomes into jobs, runs them on a backend, and
/// memoizes fitness per genome.
pub struct Fleet {
    pub problem: Problem,
    pub backend: Backend,
    pub timeout: Option<Duration>,
    blobs: BlobStore,
    descriptor: TaskDescriptor,
    cache: HashMap<Genome, FitnessScore>,
    next_id: u64,
    /// Jobs actually run (cache misses).
    pub jobs_run: usize,
}

impl Fleet {
    pub fn new(problem: Problem, backend: Backend) -> Self {
        let mut blobs = BlobStore::new();
        let descriptor = problem.descriptor(&mut blobs);
        Self {
            problem,
            backend,
            timeout: Some(DEFAULT_JOB_TIMEOUT),
            blobs,
            descriptor,
            cache: HashMap::new(),
            next_id: 0,
            jobs_run: 0,
        }
    }

    pub fn blobs(&self) -> &BlobStore {
        &self.blobs
    }

    pub fn cached(&self, genome: &Genome) -> Option<&FitnessScore> {
        self.cache.get(genome)
    }

    fn run(&self, jobs: &[EvalJob]) -> Vec<EvalResult> {
        match &self.backend {
            Backend::Local { parallelism } => {
                evaluate_local(jobs, &self.blobs, *parallelism, self.timeout)
            }
            Backend::Remote(opts) => match dispatch(jobs, &self.blobs, opts) {
                Ok(report) => report.results,
                Err(e) => {
                    log::error!("dispatch failed: {e}");
                    jobs.iter()
                        .map(|j| EvalResult::failed(j.job_id, EvalStatus::Error, e.to_string()))
                        .collect()
                }
            },
        }
    }
}

impl Evaluator for Fleet {
    fn evaluate(&mut self, genomes: &[Genome]) -> Vec<FitnessScore> {
        let mut todo: Vec<Genome> = Vec::new();
        for g in genomes {
            if !self.cache.contains_key(g) && !todo.contains(g) {
                todo.push(g.clone());
            }
        }
        let jobs: Vec<EvalJob> = todo
            .iter()
            .map(|g| {
                self.next_id += 1;
                self.problem.job(self.next_id, g.clone(), self.descriptor.clone())
            })
            .collect();
        let results = self.run(&jobs);
        self.jobs_run += jobs.len();
        for (g, r) in todo.into_iter().zip(results) {
            log::debug!("{} -> {:?} {}", r.job_id, r.status, r.fitness);
            self.cache.insert(g, r.score());
        }
        genomes.iter().map(|g| self.cache[g].clone()).collect()
    }
}
