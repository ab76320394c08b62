//! Genetic search over binary neuron masks.
//!
//! A genome is a candidate mask for the hidden layer of an already trained
//! network. Fitness is the task score of the network gated by the genome,
//! minus a penalty per neuron shared with masks owned by earlier tasks.
//! Selection is a size-3 tournament, recombination is single-point
//! crossover, and the best genomes survive unchanged (elitism), so the best
//! fitness never decreases from one generation to the next.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AfmError, Result};
use crate::mask::NeuronMask;

#[derive(Debug, Clone, PartialEq)]
pub struct Genome {
    pub bits: NeuronMask,
    /// `Some` once evaluated.
    pub fitness: Option<f64>,
}

impl Genome {
    pub fn new(bits: NeuronMask) -> Self {
        Self { bits, fitness: None }
    }

    pub fn is_evaluated(&self) -> bool {
        self.fitness.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvoConfig {
    pub population_size: usize,
    pub generations: usize,
    /// Per-bit flip probability; `None` means `1 / width`.
    pub mutation_rate: Option<f64>,
    /// Best genomes copied unchanged into the next generation.
    pub elitism: usize,
    pub tournament_size: usize,
    /// Fitness cost per neuron shared with earlier tasks' masks.
    pub overlap_penalty: f64,
    /// Never switch on a neuron owned by an earlier task.
    pub hard_exclusion: bool,
    /// Probability that a free bit starts switched on.
    pub target_active_fraction: f64,
    /// Fitness cost of the active fraction of the mask; 0 disables it.
    pub sparsity_weight: f64,
    /// Stop after this many generations without a better best genome.
    pub plateau_generations: usize,
}

impl Default for EvoConfig {
    fn default() -> Self {
        Self {
            population_size: 100,
            generations: 100,
            mutation_rate: None,
            elitism: 2,
            tournament_size: 3,
            overlap_penalty: 0.01,
            hard_exclusion: false,
            target_active_fraction: 0.5,
            sparsity_weight: 0.0,
            plateau_generations: 10,
        }
    }
}

impl EvoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population_size < 2 {
            return Err(AfmError::Config(format!(
                "population_size {} must be at least 2",
                self.population_size
            )));
        }
        if let Some(rate) = self.mutation_rate {
            if !(0.0..=1.0).contains(&rate) {
                return Err(AfmError::Config(format!("mutation_rate {rate} outside [0, 1]")));
            }
        }
        if !(0.0..=1.0).contains(&self.target_active_fraction) {
            return Err(AfmError::Config(format!(
                "target_active_fraction {} outside [0, 1]",
                self.target_active_fraction
            )));
        }
        if self.elitism >= self.population_size {
            return Err(AfmError::Config("elitism must be smaller than population_size".into()));
        }
        if self.tournament_size == 0 {
            return Err(AfmError::Config("tournament_size must be positive".into()));
        }
        if self.overlap_penalty < 0.0 || self.sparsity_weight < 0.0 {
            return Err(AfmError::Config("penalties must be non-negative".into()));
        }
        Ok(())
    }

    pub fn mutation_rate_for(&self, width: usize) -> f64 {
        self.mutation_rate.unwrap_or(1.0 / width.max(1) as f64)
    }
}

/// Task score of a network gated by a candidate mask: accuracy for a
/// classifier, mean episode reward for an agent.
pub trait FitnessEvaluator {
    fn score(&self, mask: &NeuronMask) -> Result<f64>;
}

impl<F: Fn(&NeuronMask) -> Result<f64>> FitnessEvaluator for F {
    fn score(&self, mask: &NeuronMask) -> Result<f64> {
        self(mask)
    }
}

fn owned_union(width: usize, prev_masks: &[NeuronMask]) -> Result<NeuronMask> {
    NeuronMask::union_of(width, prev_masks)
}

/// `population_size` random genomes. Free bits are on with probability
/// `target_active_fraction`; bits owned by earlier masks start off.
pub fn initialize_population<R: Rng + ?Sized>(
    width: usize,
    cfg: &EvoConfig,
    prev_masks: &[NeuronMask],
    rng: &mut R,
) -> Result<Vec<Genome>> {
    if width == 0 {
        return Err(AfmError::Config("mask width must be positive".into()));
    }
    cfg.validate()?;
    let owned = owned_union(width, prev_masks)?;
    Ok((0..cfg.population_size)
        .map(|_| {
            let bits = (0..width)
                .map(|j| {
                    let draw = rng.random_bool(cfg.target_active_fraction);
                    draw && !owned.get(j)
                })
                .collect();
            Genome::new(NeuronMask::from_bools(bits))
        })
        .collect())
}

/// `score(genome) − λ·|genome ∧ owned| − sparsity_weight·active/width`;
/// stores the result in the genome.
pub fn evaluate_fitness(
    genome: &mut Genome,
    evaluator: &dyn FitnessEvaluator,
    owned: &NeuronMask,
    cfg: &EvoConfig,
) -> Result<f64> {
    let score = evaluator.score(&genome.bits)?;
    let overlap = genome.bits.overlap(owned)? as f64;
    let active = genome.bits.count_active() as f64 / genome.bits.len() as f64;
    let fitness = score - cfg.overlap_penalty * overlap - cfg.sparsity_weight * active;
    genome.fitness = Some(fitness);
    Ok(fitness)
}

/// Child taking `a[..cut]` and `b[cut..]`.
pub fn single_point_crossover(a: &NeuronMask, b: &NeuronMask, cut: usize) -> Result<NeuronMask> {
    if a.len() != b.len() {
        return Err(AfmError::dim(0, format!("parent widths {} and {}", a.len(), b.len())));
    }
    let cut = cut.min(a.len());
    let bits = a.bits()[..cut].iter().chain(&b.bits()[cut..]).copied().collect();
    Ok(NeuronMask::from_bools(bits))
}

/// Flips each bit with probability `rate`; under `locked`, locked bits are
/// left off.
pub fn mutate<R: Rng + ?Sized>(mask: &mut NeuronMask, rate: f64, locked: Option<&NeuronMask>, rng: &mut R) {
    for j in 0..mask.len() {
        if rng.random_bool(rate) {
            mask.set(j, !mask.get(j));
        }
        if locked.is_some_and(|l| l.get(j)) {
            mask.set(j, false);
        }
    }
}

fn tournament<'a, R: Rng + ?Sized>(population: &'a [Genome], size: usize, rng: &mut R) -> &'a Genome {
    let mut best: Option<&Genome> = None;
    for _ in 0..size {
        let g = &population[rng.random_range(0..population.len())];
        if best.is_none_or(|b| g.fitness > b.fitness) {
            best = Some(g);
        }
    }
    best.expect("tournament size is positive")
}

fn sort_by_fitness(population: &mut [Genome]) {
    // stable: earlier genomes win ties
    population.sort_by(|a, b| b.fitness.partial_cmp(&a.fitness).unwrap_or(std::cmp::Ordering::Equal));
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvoOutcome {
    pub best: NeuronMask,
    pub best_fitness: f64,
    /// Best fitness after each generation, starting with the initial
    /// population.
    pub trace: Vec<f64>,
    pub generations_run: usize,
}

/// Runs the search and returns the best mask found.
pub fn evolve<R: Rng + ?Sized>(
    width: usize,
    evaluator: &dyn FitnessEvaluator,
    prev_masks: &[NeuronMask],
    cfg: &EvoConfig,
    rng: &mut R,
) -> Result<EvoOutcome> {
    let owned = owned_union(width, prev_masks)?;
    let locked = cfg.hard_exclusion.then_some(&owned);
    let rate = cfg.mutation_rate_for(width);
    let mut cache: HashMap<Vec<bool>, f64> = HashMap::new();
    let mut eval = |g: &mut Genome| -> Result<()> {
        if let Some(&f) = cache.get(g.bits.bits()) {
            g.fitness = Some(f);
            return Ok(());
        }
        let f = evaluate_fitness(g, evaluator, &owned, cfg)?;
        if !f.is_finite() {
            return Err(AfmError::Numeric(format!("fitness {f} for mask {}", g.bits)));
        }
        cache.insert(g.bits.bits().to_vec(), f);
        Ok(())
    };

    let mut population = initialize_population(width, cfg, prev_masks, rng)?;
    for g in population.iter_mut() {
        eval(g)?;
    }
    sort_by_fitness(&mut population);
    let mut trace = vec![population[0].fitness.expect("evaluated")];
    let mut since_improvement = 0;
    let mut generations_run = 0;
    for _ in 0..cfg.generations {
        let mut next: Vec<Genome> = population[..cfg.elitism].to_vec();
        while next.len() < cfg.population_size {
            let a = tournament(&population, cfg.tournament_size, rng);
            let b = tournament(&population, cfg.tournament_size, rng);
            let cut = rng.random_range(0..=width);
            let mut child = Genome::new(single_point_crossover(&a.bits, &b.bits, cut)?);
            mutate(&mut child.bits, rate, locked, rng);
            eval(&mut child)?;
            next.push(child);
        }
        sort_by_fitness(&mut next);
        population = next;
        generations_run += 1;
        let best = population[0].fitness.expect("evaluated");
        if best > *trace.last().expect("non-empty") {
            since_improvement = 0;
        } else {
            since_improvement += 1;
        }
        trace.push(best);
        if since_improvement >= cfg.plateau_generations {
            break;
        }
    }
    let best = &population[0];
    if best.bits.is_all_zero() {
        return Err(AfmError::DegenerateMask(format!(
            "best mask after {generations_run} generations has no active neuron ({} of {width} owned by earlier tasks)",
            owned.count_active()
        )));
    }
    Ok(EvoOutcome {
        best: best.bits.clone(),
        best_fitness: best.fitness.expect("evaluated"),
        trace,
        generations_run,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn initialization_edge_cases() {
        let cfg = EvoConfig {
            target_active_fraction: 1.0,
            ..Default::default()
        };
        let pop = initialize_population(8, &cfg, &[], &mut rng::stream(1, 0)).unwrap();
        assert!(pop.iter().all(|g| g.bits.is_all_ones() && !g.is_evaluated()));
        let pop = initialize_population(8, &cfg, &[NeuronMask::ones(8)], &mut rng::stream(1, 0)).unwrap();
        assert!(pop.iter().all(|g| g.bits.is_all_zero()));
    }

    #[test]
    fn initial_active_fraction_near_target() {
        let cfg = EvoConfig {
            target_active_fraction: 0.3,
            ..Default::default()
        };
        let pop = initialize_population(50, &cfg, &[], &mut rng::stream(2, 0)).unwrap();
        let mean = pop.iter().map(|g| g.bits.count_active()).sum::<usize>() as f64 / (50.0 * pop.len() as f64);
        assert!((mean - 0.3).abs() <= 0.1, "{mean}");
    }

    #[test]
    fn crossover_takes_each_segment_from_one_parent() {
        let a = NeuronMask::ones(6);
        let b = NeuronMask::zeros(6);
        assert_eq!(single_point_crossover(&a, &b, 2).unwrap().to_u8(), vec![1, 1, 0, 0, 0, 0]);
        assert_eq!(single_point_crossover(&a, &b, 0).unwrap(), b);
        assert_eq!(single_point_crossover(&a, &b, 6).unwrap(), a);
    }

    #[test]
    fn overlap_penalty_is_linear() {
        let owned = NeuronMask::from_bits(&[1, 1, 0, 0]).unwrap();
        let cfg = EvoConfig {
            overlap_penalty: 0.25,
            ..Default::default()
        };
        let score = |_: &NeuronMask| Ok(1.0);
        let mut a = Genome::new(NeuronMask::from_bits(&[0, 0, 1, 0]).unwrap());
        let mut b = Genome::new(NeuronMask::from_bits(&[1, 0, 1, 0]).unwrap());
        let fa = evaluate_fitness(&mut a, &score, &owned, &cfg).unwrap();
        let fb = evaluate_fitness(&mut b, &score, &owned, &cfg).unwrap();
        assert_eq!(fb - fa, -0.25);
    }

    #[test]
    fn invalid_configs_rejected() {
        for cfg in [
            EvoConfig {
                population_size: 1,
                elitism: 0,
                ..Default::default()
            },
            EvoConfig {
                mutation_rate: Some(1.5),
                ..Default::default()
            },
        ] {
            assert!(matches!(cfg.validate(), Err(AfmError::Config(_))));
        }
    }

    #[test]
    fn all_zero_optimum_is_degenerate() {
        let score = |m: &NeuronMask| Ok(-(m.count_active() as f64));
        let err = evolve(6, &score, &[], &EvoConfig::default(), &mut rng::stream(3, 0)).unwrap_err();
        assert!(matches!(err, AfmError::DegenerateMask(_)));
    }
}
