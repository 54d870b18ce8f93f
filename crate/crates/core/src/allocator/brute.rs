//! Exhaustive enumeration; the reference the DP is checked against.

use std::cmp::Ordering;
use std::time::Instant;

use super::{
    build_result, check_feasible, choices, compare_assignments, config_count, nested_sum, AllocationProblem,
    AllocationResult, SolverKind, BRUTE_FORCE_LIMIT,
};
use crate::error::{Error, Result};
use crate::quant::LayerBits;

pub fn brute_force_solve(problem: &AllocationProblem) -> Result<AllocationResult> {
    let start = Instant::now();
    let opts = choices(problem)?;
    let total = config_count(&opts);
    if total > BRUTE_FORCE_LIMIT {
        return Err(Error::TooLarge(total));
    }
    let cap = check_feasible(problem, &opts)?;
    let l = opts.len();
    let mut idx = vec![0usize; l];
    let mut best: Option<(f64, u32, Vec<LayerBits>, Vec<usize>)> = None;
    loop {
        let cost: u128 = idx.iter().zip(&opts).map(|(&i, o)| o[i].cost).sum();
        if cost <= cap {
            let obj = nested_sum(idx.iter().zip(&opts).map(|(&i, o)| o[i].score));
            let bits: Vec<LayerBits> = idx.iter().zip(&opts).map(|(&i, o)| o[i].bits).collect();
            let tb = bits.iter().map(|b| b.weight as u32 + b.activation as u32).sum();
            let better = match &best {
                None => true,
                Some((bo, bt, bb, _)) => compare_assignments((obj, tb, &bits), (*bo, *bt, bb)) == Ordering::Less,
            };
            if better {
                best = Some((obj, tb, bits, idx.clone()));
            }
        }
        // Mixed-radix increment.
        let mut pos = 0;
        loop {
            if pos == l {
                let (_, _, _, picks) = best.expect("all-minimum assignment fits");
                return Ok(build_result(problem, &opts, &picks, SolverKind::BruteForce, 0.0, start));
            }
            idx[pos] += 1;
            if idx[pos] < opts[pos].len() {
                break;
            }
            idx[pos] = 0;
            pos += 1;
        }
    }
}
