use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::space::{BlockChoice, ElasticSpace, StageOptions, SubNetConfig};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub population: usize,
    pub generations: usize,
    pub mutation: f64,
    pub parent_fraction: f64,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            population: 100,
            generations: 30,
            mutation: 0.1,
            parent_fraction: 0.25,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population < 2 {
            return Err(Error::Spec(format!("population must be at least 2, got {}", self.population)));
        }
        if !(0.0..=1.0).contains(&self.mutation) {
            return Err(Error::Spec(format!("mutation probability {} outside [0, 1]", self.mutation)));
        }
        if !(self.parent_fraction > 0.0 && self.parent_fraction <= 1.0) {
            return Err(Error::Spec(format!("parent fraction {} outside (0, 1]", self.parent_fraction)));
        }
        Ok(())
    }
}

/// Every configuration scored during a search, with the winner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub best: SubNetConfig,
    pub best_score: f64,
    pub evaluated: usize,
}

fn fresh_block(o: &StageOptions, rng: &mut ChaCha8Rng) -> BlockChoice {
    BlockChoice {
        kernel: *o.kernel.choose(rng).expect("nonempty"),
        expand: *o.expand.choose(rng).expect("nonempty"),
        lite_groups: *o.lite_groups.choose(rng).expect("nonempty"),
        lite_kernel: *o.lite_kernel.choose(rng).expect("nonempty"),
    }
}

fn maybe(rng: &mut ChaCha8Rng, p: f64, opts: &[usize], cur: usize) -> usize {
    if rng.gen_bool(p) {
        *opts.choose(rng).expect("nonempty")
    } else {
        cur
    }
}

fn mutate(space: &ElasticSpace, c: &SubNetConfig, p: f64, rng: &mut ChaCha8Rng) -> SubNetConfig {
    let stages = space
        .stages
        .iter()
        .zip(&c.stages)
        .map(|(o, blocks)| {
            let depth = maybe(rng, p, &o.depth, blocks.len());
            (0..depth)
                .map(|slot| match blocks.get(slot) {
                    Some(b) => BlockChoice {
                        kernel: maybe(rng, p, &o.kernel, b.kernel),
                        expand: maybe(rng, p, &o.expand, b.expand),
                        lite_groups: maybe(rng, p, &o.lite_groups, b.lite_groups),
                        lite_kernel: maybe(rng, p, &o.lite_kernel, b.lite_kernel),
                    },
                    None => fresh_block(o, rng),
                })
                .collect()
        })
        .collect();
    SubNetConfig {
        stages,
        resolution: maybe(rng, p, &space.resolutions, c.resolution),
    }
}

fn crossover(a: &SubNetConfig, b: &SubNetConfig, rng: &mut ChaCha8Rng) -> SubNetConfig {
    let mut pick = |x: usize, y: usize| if rng.gen_bool(0.5) { x } else { y };
    let stages = a
        .stages
        .iter()
        .zip(&b.stages)
        .map(|(sa, sb)| {
            let depth = pick(sa.len(), sb.len());
            (0..depth)
                .map(|slot| match (sa.get(slot), sb.get(slot)) {
                    (Some(x), Some(y)) => BlockChoice {
                        kernel: pick(x.kernel, y.kernel),
                        expand: pick(x.expand, y.expand),
                        lite_groups: pick(x.lite_groups, y.lite_groups),
                        lite_kernel: pick(x.lite_kernel, y.lite_kernel),
                    },
                    (Some(x), None) | (None, Some(x)) => *x,
                    (None, None) => unreachable!("depth is one of the parents'"),
                })
                .collect()
        })
        .collect();
    SubNetConfig {
        stages,
        resolution: pick(a.resolution, b.resolution),
    }
}

/// Evolutionary search maximizing `fitness`.
///
/// Each generation keeps the top parent fraction and refills the population
/// alternately by mutation and uniform crossover. The result is the best of
/// every configuration ever scored; ties go to the smallest configuration.
pub fn evolve(
    space: &ElasticSpace,
    config: &SearchConfig,
    mut fitness: impl FnMut(&SubNetConfig) -> Result<f64>,
) -> Result<SearchOutcome> {
    space.validate()?;
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut seen: BTreeMap<SubNetConfig, f64> = BTreeMap::new();
    let mut score = |c: &SubNetConfig, seen: &mut BTreeMap<SubNetConfig, f64>| -> Result<f64> {
        if let Some(&s) = seen.get(c) {
            return Ok(s);
        }
        let s = fitness(c)?;
        if !s.is_finite() {
            return Err(Error::Numeric(format!("fitness {s} for {c:?}")));
        }
        seen.insert(c.clone(), s);
        Ok(s)
    };
    let mut population: Vec<SubNetConfig> = (0..config.population).map(|_| space.sample(&mut rng)).collect();
    let n_parents = ((config.population as f64 * config.parent_fraction).ceil() as usize).clamp(1, config.population);
    for _ in 0..config.generations {
        let mut ranked = Vec::with_capacity(population.len());
        for c in population.drain(..) {
            let s = score(&c, &mut seen)?;
            ranked.push((s, c));
        }
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        ranked.dedup_by(|a, b| a.1 == b.1);
        let parents: Vec<SubNetConfig> = ranked.into_iter().take(n_parents).map(|x| x.1).collect();
        population = parents.clone();
        let mut toggle = false;
        while population.len() < config.population {
            let child = if toggle && parents.len() > 1 {
                let a = parents.choose(&mut rng).expect("nonempty");
                let b = parents.choose(&mut rng).expect("nonempty");
                crossover(a, b, &mut rng)
            } else {
                mutate(space, parents.choose(&mut rng).expect("nonempty"), config.mutation, &mut rng)
            };
            toggle = !toggle;
            population.push(child);
        }
    }
    for c in &population {
        score(c, &mut seen)?;
    }
    let (best, best_score) = seen
        .iter()
        .fold(None::<(&SubNetConfig, f64)>, |acc, (c, &s)| match acc {
            Some((_, bs)) if bs >= s => acc,
            _ => Some((c, s)),
        })
        .expect("population is nonempty");
    Ok(SearchOutcome {
        best: best.clone(),
        best_score,
        evaluated: seen.len(),
    })
}
