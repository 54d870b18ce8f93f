//! Budgeted bit-width allocation: one choice per layer minimizing total
//! sensitivity under a size or BitOps budget.

mod brute;
mod dp;

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{count_macs, count_params, LayerId, ModelGraph};
use crate::quant::{BitConfig, BitSet, LayerBits};
use crate::seed::{self, tag};
use crate::sensitivity::SensitivityTable;

pub use brute::brute_force_solve;

/// Exhaustive search is preferred below this many configurations.
pub const EXHAUSTIVE_LIMIT: u128 = 1_000_000;
/// Hard ceiling for the brute-force oracle.
pub const BRUTE_FORCE_LIMIT: u128 = 10_000_000;
/// Upper bound on DP table cells before costs are scaled coarser.
pub const DP_CELL_LIMIT: u128 = 10_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostKind {
    ModelSize,
    Bitops,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModel {
    pub kind: CostKind,
    pub layers: Vec<LayerId>,
    pub params: Vec<u64>,
    pub macs: Vec<u64>,
}

impl CostModel {
    pub fn from_model(model: &ModelGraph, kind: CostKind) -> Self {
        let (p, m) = (count_params(model), count_macs(model));
        let layers = model.quantizable().to_vec();
        CostModel {
            kind,
            params: layers.iter().map(|l| p[l]).collect(),
            macs: layers.iter().map(|l| m[l]).collect(),
            layers,
        }
    }

    pub fn from_table(table: &SensitivityTable, kind: CostKind) -> Self {
        CostModel {
            kind,
            layers: table.layers.clone(),
            params: table.params.clone(),
            macs: table.macs.clone(),
        }
    }

    fn layer_cost(&self, i: usize, bits: LayerBits) -> u128 {
        match self.kind {
            CostKind::ModelSize => self.params[i] as u128 * bits.weight as u128,
            CostKind::Bitops => self.macs[i] as u128 * bits.weight as u128 * bits.activation as u128,
        }
    }
}

/// Bits for size, bit-operations for BitOps.
pub fn cost_of_config(config: &BitConfig, cost: &CostModel) -> Result<f64> {
    let mut total = 0u128;
    for (i, &l) in cost.layers.iter().enumerate() {
        let b = config
            .get(l)
            .ok_or_else(|| Error::InvalidArgument(format!("config lacks layer {l}")))?;
        total += cost.layer_cost(i, b);
    }
    Ok(total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationProblem {
    pub table: SensitivityTable,
    pub alpha: f64,
    pub cost: CostKind,
    pub budget: f64,
    /// Minimize the negated scores instead; used as a baseline.
    #[serde(default)]
    pub reversed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverKind {
    ExactDp,
    BruteForce,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SolverStrategy {
    /// Exhaustive below [`EXHAUSTIVE_LIMIT`] configurations, DP otherwise.
    #[default]
    Auto,
    Dp,
    Exhaustive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationResult {
    pub config: BitConfig,
    pub objective: f64,
    pub cost: f64,
    pub budget: f64,
    pub solver: SolverKind,
    /// Upper bound on the distance to the true optimum; zero when exact.
    pub gap_bound: f64,
    pub solve_seconds: f64,
}

/// One selectable option for a layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Choice {
    pub bits: LayerBits,
    pub score: f64,
    pub cost: u128,
}

impl Choice {
    fn total_bits(&self) -> u32 {
        self.bits.weight as u32 + self.bits.activation as u32
    }
}

/// Per-layer options. Under the size model only `b_w` varies and activations
/// stay at the widest bit width.
pub(crate) fn choices(problem: &AllocationProblem) -> Result<Vec<Vec<Choice>>> {
    let t = &problem.table;
    t.validate()?;
    if !(problem.alpha.is_finite() && problem.alpha >= 0.0) {
        return Err(Error::InvalidArgument(format!("alpha {} must be nonnegative", problem.alpha)));
    }
    if !(problem.budget.is_finite() && problem.budget > 0.0) {
        return Err(Error::InvalidArgument(format!("budget {} must be positive", problem.budget)));
    }
    let cost = CostModel::from_table(t, problem.cost);
    let sign = if problem.reversed { -1.0 } else { 1.0 };
    let bits = t.bits.bits();
    let b_max = t.bits.max();
    let score = |i: usize, wi: usize, ai: usize| sign * (t.weight[i][wi] + problem.alpha * t.activation[i][ai]);
    let a_fixed = bits.len() - 1;
    Ok((0..t.layers.len())
        .map(|i| {
            let mut opts = Vec::new();
            for (wi, &bw) in bits.iter().enumerate() {
                match problem.cost {
                    CostKind::ModelSize => {
                        let lb = LayerBits::new(bw, b_max);
                        opts.push(Choice {
                            bits: lb,
                            score: score(i, wi, a_fixed),
                            cost: cost.layer_cost(i, lb),
                        });
                    }
                    CostKind::Bitops => {
                        for (ai, &ba) in bits.iter().enumerate() {
                            let lb = LayerBits::new(bw, ba);
                            opts.push(Choice {
                                bits: lb,
                                score: score(i, wi, ai),
                                cost: cost.layer_cost(i, lb),
                            });
                        }
                    }
                }
            }
            opts
        })
        .collect())
}

/// Sum of scores accumulated from the last layer to the first. Both solvers
/// evaluate objectives in this order so their results compare exactly.
pub(crate) fn nested_sum(scores: impl DoubleEndedIterator<Item = f64>) -> f64 {
    scores.rev().fold(0.0, |acc, s| s + acc)
}

/// Orders complete assignments: lower objective, then more total bits, then
/// higher bits at earlier layers.
pub(crate) fn compare_assignments(a: (f64, u32, &[LayerBits]), b: (f64, u32, &[LayerBits])) -> Ordering {
    a.0.total_cmp(&b.0)
        .then(b.1.cmp(&a.1))
        .then_with(|| {
            let key = |v: &[LayerBits]| v.iter().flat_map(|x| [x.weight, x.activation]).collect::<Vec<u8>>();
            key(b.2).cmp(&key(a.2))
        })
}

pub(crate) fn budget_floor(budget: f64) -> u128 {
    budget.floor().min(u128::MAX as f64) as u128
}

fn min_cost(opts: &[Vec<Choice>]) -> u128 {
    opts.iter().map(|o| o.iter().map(|c| c.cost).min().unwrap_or(0)).sum()
}

pub(crate) fn check_feasible(problem: &AllocationProblem, opts: &[Vec<Choice>]) -> Result<u128> {
    let min = min_cost(opts);
    let cap = budget_floor(problem.budget);
    if min > cap {
        return Err(Error::Infeasible {
            budget: problem.budget,
            min_cost: min as f64,
        });
    }
    Ok(cap)
}

fn config_count(opts: &[Vec<Choice>]) -> u128 {
    opts.iter().fold(1u128, |acc, o| acc.saturating_mul(o.len() as u128))
}

pub(crate) fn build_result(
    problem: &AllocationProblem,
    opts: &[Vec<Choice>],
    picks: &[usize],
    solver: SolverKind,
    gap_bound: f64,
    start: Instant,
) -> AllocationResult {
    let chosen: Vec<Choice> = picks.iter().zip(opts).map(|(&p, o)| o[p]).collect();
    let config = BitConfig::new(
        problem
            .table
            .layers
            .iter()
            .zip(&chosen)
            .map(|(&l, c)| (l, c.bits))
            .collect::<BTreeMap<_, _>>(),
    );
    AllocationResult {
        config,
        objective: nested_sum(chosen.iter().map(|c| c.score)),
        cost: chosen.iter().map(|c| c.cost).sum::<u128>() as f64,
        budget: problem.budget,
        solver,
        gap_bound,
        solve_seconds: start.elapsed().as_secs_f64(),
    }
}

pub fn solve(problem: &AllocationProblem) -> Result<AllocationResult> {
    solve_with(problem, SolverStrategy::Auto)
}

pub fn solve_with(problem: &AllocationProblem, strategy: SolverStrategy) -> Result<AllocationResult> {
    let opts = choices(problem)?;
    let exhaustive = match strategy {
        SolverStrategy::Auto => config_count(&opts) <= EXHAUSTIVE_LIMIT,
        SolverStrategy::Dp => false,
        SolverStrategy::Exhaustive => true,
    };
    if exhaustive {
        brute_force_solve(problem)
    } else {
        dp::solve_dp(problem, &opts)
    }
}

/// Objective of an arbitrary configuration under `problem`'s scores.
pub fn objective_of(config: &BitConfig, problem: &AllocationProblem) -> Result<f64> {
    let opts = choices(problem)?;
    let mut scores = Vec::with_capacity(opts.len());
    for (&l, o) in problem.table.layers.iter().zip(&opts) {
        let b = config
            .get(l)
            .ok_or_else(|| Error::InvalidArgument(format!("config lacks layer {l}")))?;
        let c = o
            .iter()
            .find(|c| c.bits == b)
            .ok_or_else(|| Error::InvalidArgument(format!("layer {l}: bits {b:?} not a choice")))?;
        scores.push(c.score);
    }
    Ok(nested_sum(scores.into_iter()))
}

/// `count` configurations drawn uniformly, then repaired by lowering the
/// bits of random layers until the budget holds.
pub fn random_feasible_configs(problem: &AllocationProblem, count: usize, seed: u64) -> Result<Vec<BitConfig>> {
    let opts = choices(problem)?;
    let cap = check_feasible(problem, &opts)?;
    let bits: &BitSet = &problem.table.bits;
    let set = bits.bits();
    let layers = &problem.table.layers;
    let cost = CostModel::from_table(&problem.table, problem.cost);
    (0..count)
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &[tag::RANDOM_CONFIG, r as u64]));
            let mut picks: Vec<(usize, usize)> = (0..layers.len())
                .map(|_| {
                    let w = rng.random_range(0..set.len());
                    let a = match problem.cost {
                        CostKind::ModelSize => set.len() - 1,
                        CostKind::Bitops => rng.random_range(0..set.len()),
                    };
                    (w, a)
                })
                .collect();
            let total = |p: &[(usize, usize)]| -> u128 {
                p.iter()
                    .enumerate()
                    .map(|(i, &(w, a))| cost.layer_cost(i, LayerBits::new(set[w], set[a])))
                    .sum()
            };
            while total(&picks) > cap {
                let lowerable: Vec<(usize, bool)> = picks
                    .iter()
                    .enumerate()
                    .flat_map(|(i, &(w, a))| {
                        let act = problem.cost == CostKind::Bitops && a > 0;
                        [(w > 0).then_some((i, false)), act.then_some((i, true))]
                    })
                    .flatten()
                    .collect();
                let (i, act) = lowerable[rng.random_range(0..lowerable.len())];
                if act {
                    picks[i].1 -= 1;
                } else {
                    picks[i].0 -= 1;
                }
            }
            Ok(BitConfig::new(
                layers
                    .iter()
                    .zip(&picks)
                    .map(|(&l, &(w, a))| (l, LayerBits::new(set[w], set[a])))
                    .collect(),
            ))
        })
        .collect()
}
