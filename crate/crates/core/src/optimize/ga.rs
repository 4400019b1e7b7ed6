//! Fixed-cardinality bitstring genetic algorithm.
//!
//! A chromosome has one bit per grid candidate and exactly `N` ones. Each
//! generation keeps the elite, fills half of the remainder with one-point
//! crossover children of top-half parents (repaired back to `N` ones) and
//! the rest with swap mutations that exchange one set bit for one clear bit.

use std::cmp::Ordering;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{CoverageProblem, Method, SelectionResult};
use crate::bitset::BitSet;
use crate::coverage::{CoverageEvaluator, CoverageParams};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaParams {
    pub population_size: usize,
    pub iterations: usize,
    pub elitism: usize,
    /// Share of each new generation produced by crossover.
    pub crossover_fraction: f64,
    /// One neighbour-swap pass over the elite per generation.
    pub local_improvement: bool,
    pub seed: u64,
}

impl Default for GaParams {
    fn default() -> Self {
        GaParams {
            population_size: 250,
            iterations: 500,
            elitism: 1,
            crossover_fraction: 0.5,
            local_improvement: true,
            seed: 0,
        }
    }
}

impl GaParams {
    pub fn validate(&self) -> Result<()> {
        if self.population_size < 4 {
            return Err(Error::param(format!(
                "GA population must be at least 4, got {}",
                self.population_size
            )));
        }
        if self.iterations < 1 {
            return Err(Error::param("GA needs at least one iteration"));
        }
        if self.elitism < 1 || self.elitism >= self.population_size {
            return Err(Error::param(format!(
                "elitism must be in 1..{}, got {}",
                self.population_size, self.elitism
            )));
        }
        if !(0.0..=1.0).contains(&self.crossover_fraction) {
            return Err(Error::param("crossover fraction must lie in [0, 1]"));
        }
        Ok(())
    }
}

fn indices_of(chrom: &BitSet) -> Vec<usize> {
    chrom.ones().collect()
}

/// Population coverage, then covered variation mass as a tie-break so the
/// search still has a gradient while no user reaches the threshold.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct Fitness {
    coverage: f64,
    mass: f64,
}

impl Fitness {
    fn better_than(&self, other: &Fitness) -> bool {
        self.cmp(other) == Ordering::Greater
    }

    fn cmp(&self, other: &Fitness) -> Ordering {
        self.coverage
            .total_cmp(&other.coverage)
            .then(self.mass.total_cmp(&other.mass))
    }
}

fn score(eval: &mut CoverageEvaluator<'_>, idx: &[usize], params: &CoverageParams) -> Fitness {
    let (coverage, mass) = eval.coverage_and_mass(idx, params);
    Fitness { coverage, mass }
}

fn evaluate_all(problem: &CoverageProblem<'_>, population: &[BitSet]) -> Vec<Fitness> {
    let matrix = problem.matrix();
    let params = problem.params;
    population
        .par_iter()
        .map_init(
            || (matrix.evaluator(), Vec::new()),
            |(eval, buf), chrom| {
                buf.clear();
                buf.extend(chrom.ones());
                score(eval, buf, &params)
            },
        )
        .collect()
}

/// Adds or removes random bits until exactly `n` are set.
fn repair(chrom: &mut BitSet, n: usize, rng: &mut ChaCha8Rng) {
    let mut ones = chrom.count_ones();
    while ones > n {
        let set: Vec<usize> = chrom.ones().collect();
        chrom.remove(set[rng.random_range(0..set.len())]);
        ones -= 1;
    }
    while ones < n {
        let clear: Vec<usize> = chrom.zeros().collect();
        chrom.insert(clear[rng.random_range(0..clear.len())]);
        ones += 1;
    }
}

fn crossover(a: &BitSet, b: &BitSet, n: usize, rng: &mut ChaCha8Rng) -> BitSet {
    let g = a.len();
    let cut = rng.random_range(0..=g);
    let mut child = BitSet::from_indices(g, a.ones().take_while(|&i| i < cut));
    for i in b.ones().filter(|&i| i >= cut) {
        child.insert(i);
    }
    repair(&mut child, n, rng);
    child
}

fn mutate(parent: &BitSet, rng: &mut ChaCha8Rng) -> BitSet {
    let mut child = parent.clone();
    let set: Vec<usize> = child.ones().collect();
    let clear: Vec<usize> = child.zeros().collect();
    if !set.is_empty() && !clear.is_empty() {
        child.remove(set[rng.random_range(0..set.len())]);
        child.insert(clear[rng.random_range(0..clear.len())]);
    }
    child
}

/// For each selected candidate, tries swapping it with each unselected grid
/// neighbour and keeps the best strictly improving swap.
fn local_improve(
    problem: &CoverageProblem<'_>,
    eval: &mut CoverageEvaluator<'_>,
    params: &CoverageParams,
    chrom: &mut BitSet,
    mut fitness: Fitness,
) -> Fitness {
    for s in indices_of(chrom) {
        let mut best: Option<(usize, Fitness)> = None;
        for nb in problem.grid.neighbors(s) {
            if chrom.contains(nb) {
                continue;
            }
            chrom.remove(s);
            chrom.insert(nb);
            let f = score(eval, &indices_of(chrom), params);
            chrom.remove(nb);
            chrom.insert(s);
            if f.better_than(&best.map_or(fitness, |b| b.1)) {
                best = Some((nb, f));
            }
        }
        if let Some((nb, f)) = best {
            chrom.remove(s);
            chrom.insert(nb);
            fitness = f;
        }
    }
    fitness
}

/// Rank order: fitness descending, population position ascending.
fn ranking(fitness: &[Fitness]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..fitness.len()).collect();
    order.sort_by(|&a, &b| fitness[b].cmp(&fitness[a]).then(a.cmp(&b)));
    order
}

pub fn ga_select(problem: &CoverageProblem<'_>, n: usize, ga: &GaParams) -> Result<SelectionResult> {
    ga.validate()?;
    problem.check_n(n)?;
    let g = problem.n_candidates();
    let params = problem.params;
    let mut rng = ChaCha8Rng::seed_from_u64(ga.seed);
    let mut local_eval = problem.matrix().evaluator();

    let mut population: Vec<BitSet> = (0..ga.population_size)
        .map(|_| BitSet::from_indices(g, sample(&mut rng, g, n).into_iter()))
        .collect();

    let n_cross = ((ga.population_size - ga.elitism) as f64 * ga.crossover_fraction).round() as usize;
    let n_mut = ga.population_size - ga.elitism - n_cross;
    let parent_pool = (ga.population_size / 2).max(1);

    let mut best: Option<(BitSet, Fitness)> = None;
    let mut trace = Vec::with_capacity(ga.iterations);

    for iter in 0..ga.iterations {
        let mut fitness = evaluate_all(problem, &population);
        let order = ranking(&fitness);

        if ga.local_improvement {
            let top = order[0];
            fitness[top] = local_improve(problem, &mut local_eval, &params, &mut population[top], fitness[top]);
        }
        let order = ranking(&fitness);
        let top = order[0];
        if best.as_ref().is_none_or(|(_, f)| fitness[top].better_than(f)) {
            best = Some((population[top].clone(), fitness[top]));
        }
        trace.push(best.as_ref().map_or(0.0, |b| b.1.coverage));

        if iter + 1 == ga.iterations {
            break;
        }

        let mut next = Vec::with_capacity(ga.population_size);
        next.extend(order[..ga.elitism].iter().map(|&i| population[i].clone()));
        for _ in 0..n_cross {
            let a = &population[order[rng.random_range(0..parent_pool)]];
            let b = &population[order[rng.random_range(0..parent_pool)]];
            next.push(crossover(a, b, n, &mut rng));
        }
        for _ in 0..n_mut {
            let parent = &population[rng.random_range(0..population.len())];
            next.push(mutate(parent, &mut rng));
        }
        population = next;
    }

    let (chrom, _) = best.expect("at least one generation ran");
    Ok(problem.result(Method::Ga, Some(ga.seed), indices_of(&chrom), trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn repair_restores_cardinality() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for target in [0, 3, 10] {
            let mut c = BitSet::from_indices(10, [0, 2, 4, 6, 8]);
            repair(&mut c, target, &mut rng);
            assert_eq!(c.count_ones(), target);
        }
    }

    #[test]
    fn crossover_and_mutation_keep_n_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = BitSet::from_indices(30, [0, 1, 2, 3]);
        let b = BitSet::from_indices(30, [26, 27, 28, 29]);
        for _ in 0..200 {
            assert_eq!(crossover(&a, &b, 4, &mut rng).count_ones(), 4);
            let m = mutate(&a, &mut rng);
            assert_eq!(m.count_ones(), 4);
            assert_eq!(m.ones().filter(|i| !a.contains(*i)).count(), 1);
        }
    }

    #[test]
    fn crossover_of_identical_parents_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = BitSet::from_indices(20, [1, 5, 9, 17]);
        for _ in 0..50 {
            assert_eq!(crossover(&a, &a, 4, &mut rng), a);
        }
    }

    #[test]
    fn params_are_validated() {
        assert!(GaParams { population_size: 3, ..GaParams::default() }.validate().is_err());
        assert!(GaParams { iterations: 0, ..GaParams::default() }.validate().is_err());
        assert!(GaParams::default().validate().is_ok());
    }
}
