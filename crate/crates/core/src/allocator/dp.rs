//! Exact multiple-choice knapsack by dynamic programming over integer cost
//! units, processing layers from last to first.

use std::cmp::Ordering;
use std::time::Instant;

use super::{build_result, check_feasible, compare_assignments, AllocationProblem, AllocationResult, Choice, SolverKind, DP_CELL_LIMIT};
use crate::error::{Error, Result};
use crate::quant::LayerBits;

const NONE: u8 = u8::MAX;

fn gcd(a: u128, b: u128) -> u128 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lex_ge(a: LayerBits, b: LayerBits) -> bool {
    (a.weight, a.activation) >= (b.weight, b.activation)
}

/// Indices of options not dominated by another option that costs no more
/// and scores strictly better, or scores equal and wins the bit tie-break.
fn prune(opts: &[Choice]) -> Vec<usize> {
    (0..opts.len())
        .filter(|&i| {
            let x = &opts[i];
            !opts.iter().enumerate().any(|(j, y)| {
                j != i
                    && y.cost <= x.cost
                    && (y.score < x.score
                        || (y.score == x.score && y.total_bits() >= x.total_bits() && lex_ge(y.bits, x.bits)))
            })
        })
        .collect()
}

pub(super) fn solve_dp(problem: &AllocationProblem, opts: &[Vec<Choice>]) -> Result<AllocationResult> {
    let start = Instant::now();
    let cap = check_feasible(problem, opts)?;
    let l = opts.len();
    let kept: Vec<Vec<usize>> = opts.iter().map(|o| prune(o)).collect();
    if kept.iter().any(|k| k.len() >= NONE as usize) {
        return Err(Error::InvalidArgument("too many choices per layer".into()));
    }
    let base: Vec<u128> = opts.iter().map(|o| o.iter().map(|c| c.cost).min().unwrap_or(0)).collect();
    let avail = cap - base.iter().sum::<u128>();

    let g = kept
        .iter()
        .zip(opts)
        .zip(&base)
        .flat_map(|((k, o), &b)| k.iter().map(move |&i| o[i].cost - b))
        .fold(0u128, gcd)
        .max(1);
    let per_layer = DP_CELL_LIMIT / l.max(1) as u128;
    let exact = (avail / g + 1) <= per_layer;
    let unit = if exact {
        g
    } else {
        let room = per_layer.saturating_sub(l as u128 + 2).max(1);
        avail.div_ceil(room).max(g)
    };
    let scaled = |e: u128| if exact { e / unit } else { e.div_ceil(unit) };
    let capacity = (avail / unit) as usize;
    let width = if exact { capacity } else { capacity + l } + 1;

    let extra: Vec<Vec<usize>> = kept
        .iter()
        .zip(opts)
        .zip(&base)
        .map(|((k, o), &b)| k.iter().map(|&i| scaled(o[i].cost - b) as usize).collect())
        .collect();

    // obj/bits of the best suffix with exactly `c` units.
    let mut obj = vec![f64::NAN; width];
    let mut tb = vec![0u32; width];
    obj[0] = 0.0;
    let mut pick = vec![vec![NONE; width]; l];
    for layer in (0..l).rev() {
        let mut nobj = vec![f64::NAN; width];
        let mut ntb = vec![0u32; width];
        for c in 0..width {
            for (ki, &oi) in kept[layer].iter().enumerate() {
                let e = extra[layer][ki];
                if e > c || obj[c - e].is_nan() {
                    continue;
                }
                let ch = &opts[layer][oi];
                let v = ch.score + obj[c - e];
                let t = ch.total_bits() + tb[c - e];
                let better = match pick[layer][c] {
                    NONE => true,
                    prev => {
                        let pb = opts[layer][kept[layer][prev as usize]].bits;
                        v.total_cmp(&nobj[c])
                            .then(ntb[c].cmp(&t))
                            .then((pb.weight, pb.activation).cmp(&(ch.bits.weight, ch.bits.activation)))
                            == Ordering::Less
                    }
                };
                if better {
                    nobj[c] = v;
                    ntb[c] = t;
                    pick[layer][c] = ki as u8;
                }
            }
        }
        obj = nobj;
        tb = ntb;
    }

    let walk = |c0: usize| -> (Vec<usize>, Vec<LayerBits>) {
        let mut c = c0;
        let mut picks = Vec::with_capacity(l);
        let mut bits = Vec::with_capacity(l);
        for layer in 0..l {
            let ki = pick[layer][c] as usize;
            let oi = kept[layer][ki];
            picks.push(oi);
            bits.push(opts[layer][oi].bits);
            c -= extra[layer][ki];
        }
        (picks, bits)
    };
    let best_within = |limit: usize| -> Option<usize> {
        let mut best: Option<usize> = None;
        for c in 0..=limit.min(width - 1) {
            if obj[c].is_nan() {
                continue;
            }
            let replace = match best {
                None => true,
                Some(b) => match obj[c].total_cmp(&obj[b]).then(tb[b].cmp(&tb[c])) {
                    Ordering::Equal => {
                        let (_, x) = walk(c);
                        let (_, y) = walk(b);
                        compare_assignments((obj[c], tb[c], &x), (obj[b], tb[b], &y)) == Ordering::Less
                    }
                    o => o == Ordering::Less,
                },
            };
            if replace {
                best = Some(c);
            }
        }
        best
    };

    let c = best_within(capacity).expect("all-minimum assignment fits");
    let gap = if exact {
        0.0
    } else {
        let relaxed = best_within(width - 1).expect("relaxation contains the optimum");
        (obj[c] - obj[relaxed]).max(0.0)
    };
    let (picks, _) = walk(c);
    Ok(build_result(problem, opts, &picks, SolverKind::ExactDp, gap, start))
}
