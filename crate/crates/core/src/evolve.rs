//! Genetic algorithm over genomes: fitness-proportionate selection with
//! elitism and culling, splice crossover, bit-flip mutation, and a
//! sliding-window convergence test.

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::genome::{Genome, SearchSpaceConfig};
use crate::quality::FitnessScore;

#[derive(Debug, Error)]
pub enum EvolveError {
    #[error("invalid GA configuration: {0}")]
    Config(String),
    #[error("evaluator returned {actual} scores for {expected} genomes")]
    EvaluatorCount { expected: usize, actual: usize },
    #[error("checkpoint failed: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GAConfig {
    pub population: usize,
    pub elite_frac: f64,
    pub cull_frac: f64,
    /// Convergence window W, in generations.
    pub window: usize,
    /// Relative convergence threshold.
    pub threshold: f64,
    /// Generations evaluated in total, counting the initial one.
    pub max_generations: usize,
    pub space: SearchSpaceConfig,
    pub seed: u64,
}

impl Default for GAConfig {
    fn default() -> Self {
        Self {
            population: 24,
            elite_frac: 0.05,
            cull_frac: 0.05,
            window: 5,
            threshold: 1e-3,
            max_generations: 20,
            space: SearchSpaceConfig::default(),
            seed: 0,
        }
    }
}

impl GAConfig {
    pub fn validate(&self) -> Result<(), EvolveError> {
        let bad = |m: &str| Err(EvolveError::Config(m.to_string()));
        if self.population == 0 {
            return bad("population must be at least 1");
        }
        if !(0.0..1.0).contains(&self.elite_frac) || !(0.0..1.0).contains(&self.cull_frac) {
            return bad("elite and cull fractions must lie in [0, 1)");
        }
        if self.elite_frac + self.cull_frac >= 1.0 {
            return bad("elite and cull fractions must sum below 1");
        }
        if self.window == 0 {
            return bad("convergence window must be at least 1");
        }
        if !(self.threshold >= 0.0) {
            return bad("convergence threshold must be non-negative");
        }
        if self.max_generations == 0 {
            return bad("at least one generation is required");
        }
        self.space
            .validate()
            .map_err(|e| EvolveError::Config(e.to_string()))
    }

    pub fn elite_count(&self) -> usize {
        ((self.elite_frac * self.population as f64).ceil() as usize).min(self.population)
    }

    /// Culled individuals; never eats into the elites.
    pub fn cull_count(&self) -> usize {
        ((self.cull_frac * self.population as f64).ceil() as usize)
            .min(self.population - self.elite_count())
    }
}

/// How an individual entered its generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Origin {
    Initial,
    /// Copied unchanged from index `from` of the previous generation.
    Elite { from: usize },
    /// Child of two previous-generation survivors.
    Bred { parents: [usize; 2], splice: usize },
    /// Fresh random genome, used only when no parent has positive fitness.
    Immigrant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    pub genome: Genome,
    pub fitness: Option<FitnessScore>,
    pub origin: Origin,
}

impl Individual {
    /// Fitness value, zero while pending.
    pub fn value(&self) -> f64 {
        self.fitness.as_ref().map_or(0.0, |f| f.value)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub generation: usize,
    pub max: f64,
    pub mean: f64,
    pub best_ever: f64,
    pub valid: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchState {
    pub generation: usize,
    pub population: Vec<Individual>,
    pub history: Vec<GenerationStats>,
    pub config: GAConfig,
    pub best: Option<Individual>,
    rng: ChaCha8Rng,
}

/// Scores genomes. Must be deterministic per genome and return one score
/// per input, in order.
pub trait Evaluator {
    fn evaluate(&mut self, genomes: &[Genome]) -> Vec<FitnessScore>;
}

impl<F: FnMut(&Genome) -> FitnessScore> Evaluator for F {
    fn evaluate(&mut self, genomes: &[Genome]) -> Vec<FitnessScore> {
        genomes.iter().map(self).collect()
    }
}

fn sanitize(s: FitnessScore) -> FitnessScore {
    if s.valid && s.value.is_finite() && s.value >= 0.0 {
        s
    } else {
        FitnessScore::invalid()
    }
}

/// Descending fitness; ties broken by ascending hex.
fn rank(pop: &[Individual]) -> Vec<usize> {
    let hex: Vec<String> = pop.iter().map(|i| i.genome.to_hex()).collect();
    let mut idx: Vec<usize> = (0..pop.len()).collect();
    idx.sort_by(|&a, &b| {
        pop[b]
            .value()
            .partial_cmp(&pop[a].value())
            .unwrap_or(Ordering::Equal)
            .then_with(|| hex[a].cmp(&hex[b]))
    });
    idx
}

/// Selection probabilities `f_i / sum f`, uniform when the sum is zero.
pub fn selection_probabilities(fitness: &[f64]) -> Vec<f64> {
    let sum: f64 = fitness.iter().sum();
    if sum > 0.0 {
        fitness.iter().map(|f| f / sum).collect()
    } else {
        vec![1.0 / fitness.len() as f64; fitness.len()]
    }
}

/// Samples an index with probability proportional to fitness. Falls back to
/// uniform sampling when every fitness is zero.
pub fn select_parent<R: Rng>(fitness: &[f64], rng: &mut R) -> usize {
    assert!(!fitness.is_empty(), "selection from an empty pool");
    let sum: f64 = fitness.iter().sum();
    if !(sum > 0.0) {
        return rng.gen_range(0..fitness.len());
    }
    let mut r = rng.gen::<f64>() * sum;
    let mut last = 0;
    for (i, &f) in fitness.iter().enumerate() {
        if f > 0.0 {
            if r < f {
                return i;
            }
            r -= f;
            last = i;
        }
    }
    last
}

/// True when both the mean and the max fitness moved by less than
/// `threshold` (relative to the latest value) over the last `window`
/// generations.
pub fn has_converged(history: &[GenerationStats], window: usize, threshold: f64) -> bool {
    if history.len() < window + 1 {
        return false;
    }
    let tail = &history[history.len() - window - 1..];
    let flat = |series: &dyn Fn(&GenerationStats) -> f64| {
        let now = series(&tail[window]);
        let scale = now.abs().max(f64::MIN_POSITIVE);
        tail.iter().all(|s| (series(s) - now).abs() / scale < threshold)
    };
    flat(&|s| s.mean) && flat(&|s| s.max)
}

impl SearchState {
    /// Random initial population with fitness pending.
    pub fn init(config: GAConfig) -> Result<Self, EvolveError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let layout = config.space.layout();
        let population = (0..config.population)
            .map(|_| Individual {
                genome: Genome::random_with(layout, &mut rng),
                fitness: None,
                origin: Origin::Initial,
            })
            .collect();
        Ok(Self {
            generation: 0,
            population,
            history: Vec::new(),
            config,
            best: None,
            rng,
        })
    }

    pub fn is_evaluated(&self) -> bool {
        self.population.iter().all(|i| i.fitness.is_some())
    }

    /// Scores every pending individual and records this generation's stats.
    pub fn evaluate(&mut self, evaluator: &mut dyn Evaluator) -> Result<(), EvolveError> {
        let pending: Vec<usize> = (0..self.population.len())
            .filter(|&i| self.population[i].fitness.is_none())
            .collect();
        if !pending.is_empty() {
            let genomes: Vec<Genome> = pending
                .iter()
                .map(|&i| self.population[i].genome.clone())
                .collect();
            let scores = evaluator.evaluate(&genomes);
            if scores.len() != genomes.len() {
                return Err(EvolveError::EvaluatorCount {
                    expected: genomes.len(),
                    actual: scores.len(),
                });
            }
            for (i, s) in pending.into_iter().zip(scores) {
                self.population[i].fitness = Some(sanitize(s));
            }
        }
        if self.history.len() == self.generation {
            self.record();
        }
        Ok(())
    }

    fn record(&mut self) {
        let values: Vec<f64> = self.population.iter().map(Individual::value).collect();
        let max = values.iter().copied().fold(0.0, f64::max);
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let top = &self.population[rank(&self.population)[0]];
        let improved = self.best.as_ref().is_none_or(|b| top.value() > b.value());
        if improved {
            self.best = Some(top.clone());
        }
        let best_ever = self.best.as_ref().map_or(0.0, Individual::value);
        self.history.push(GenerationStats {
            generation: self.generation,
            max,
            mean,
            best_ever,
            valid: self
                .population
                .iter()
                .filter(|i| i.fitness.as_ref().is_some_and(|f| f.valid))
                .count(),
        });
    }

    /// Indices of the current population in rank order.
    pub fn ranking(&self) -> Vec<usize> {
        rank(&self.population)
    }

    /// Indices allowed to breed: elites plus the middle, culled excluded.
    pub fn parent_pool(&self) -> Vec<usize> {
        let r = self.ranking();
        let keep = self.population.len() - self.config.cull_count();
        r[..keep].to_vec()
    }

    /// Builds and evaluates the next generation.
    pub fn next_generation(&mut self, evaluator: &mut dyn Evaluator) -> Result<(), EvolveError> {
        if !self.is_evaluated() {
            self.evaluate(evaluator)?;
        }
        let k = self.population.len();
        let ranking = self.ranking();
        let elites = self.config.elite_count();
        let pool = self.parent_pool();
        let weights: Vec<f64> = pool.iter().map(|&i| self.population[i].value()).collect();
        let can_breed = weights.iter().sum::<f64>() > 0.0;
        let rate = self.config.space.mutation_rate;
        let layout = self.config.space.layout();

        let mut next = Vec::with_capacity(k);
        for &i in &ranking[..elites] {
            next.push(Individual {
                origin: Origin::Elite { from: i },
                ..self.population[i].clone()
            });
        }
        while next.len() < k {
            if !can_breed {
                next.push(Individual {
                    genome: Genome::random_with(layout, &mut self.rng),
                    fitness: None,
                    origin: Origin::Immigrant,
                });
                continue;
            }
            let a = pool[select_parent(&weights, &mut self.rng)];
            let b = pool[select_parent(&weights, &mut self.rng)];
            let (child, splice) = Genome::crossover(
                &self.population[a].genome,
                &self.population[b].genome,
                &mut self.rng,
            )
            .expect("one layout per population");
            let child = child.mutate(rate, &mut self.rng);
            next.push(Individual {
                genome: child,
                fitness: None,
                origin: Origin::Bred {
                    parents: [a, b],
                    splice,
                },
            });
        }
        self.population = next;
        self.generation += 1;
        self.evaluate(evaluator)
    }

    pub fn converged(&self) -> bool {
        has_converged(&self.history, self.config.window, self.config.threshold)
    }

    /// True when the search should stop.
    pub fn finished(&self) -> bool {
        self.history.len() >= self.config.max_generations || self.converged()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchResult {
    pub best: Individual,
    pub history: Vec<GenerationStats>,
    pub final_population: Vec<Individual>,
    pub converged: bool,
}

/// Runs the GA from scratch. `observe` sees every evaluated generation and
/// may persist it.
pub fn run_search(
    config: GAConfig,
    evaluator: &mut dyn Evaluator,
    observe: &mut dyn FnMut(&SearchState) -> std::io::Result<()>,
) -> Result<SearchResult, EvolveError> {
    resume_search(SearchState::init(config)?, evaluator, observe)
}

/// Continues a search from a saved state.
pub fn resume_search(
    mut state: SearchState,
    evaluator: &mut dyn Evaluator,
    observe: &mut dyn FnMut(&SearchState) -> std::io::Result<()>,
) -> Result<SearchResult, EvolveError> {
    if !state.is_evaluated() || state.history.len() <= state.generation {
        state.evaluate(evaluator)?;
        observe(&state)?;
    }
    while !state.finished() {
        state.next_generation(evaluator)?;
        observe(&state)?;
    }
    Ok(SearchResult {
        best: state.best.clone().expect("evaluated at least once"),
        converged: state.converged(),
        history: state.history,
        final_population: state.population,
    })
}
