//! Kraskov–Stögbauer–Grassberger estimators under the max-norm.
//!
//! Neighbor counts use strict `<` against the k-th neighbor distance. The
//! digamma averages are accumulated through a histogram over integer counts,
//! so the result depends only on the multiset of sample points: it is exactly
//! invariant to sample order and to swapping the two variables.

use std::borrow::Cow;
use std::collections::BTreeMap;

use statrs::function::gamma::digamma;

use super::{Estimator, MiEstimate, SampleMatrix};
use crate::error::{Error, Result};
use crate::seed;

const JITTER_REL: f64 = 1e-10;

/// Continuous–continuous KSG estimate (algorithm 1) for two scalar variables.
pub fn ksg_mi_cc(x: &SampleMatrix, y: &SampleMatrix, k: usize) -> Result<MiEstimate> {
    if x.cols() != 1 || y.cols() != 1 {
        return Err(Error::Estimator(format!(
            "ksg_mi_cc takes scalar variables, got {} and {} columns",
            x.cols(),
            y.cols()
        )));
    }
    let value = ksg_cc(&x.column(0), &y.column(0), k)?;
    Ok(MiEstimate {
        value,
        estimator: Estimator::KsgCc,
        k,
        n: x.rows(),
    })
}

/// Continuous–discrete kNN estimate: k-th neighbor distances are taken
/// within each sample's class, then all points inside that radius counted.
pub fn ksg_mi_cd(x: &SampleMatrix, labels: &[u32], k: usize) -> Result<MiEstimate> {
    if x.cols() != 1 {
        return Err(Error::Estimator(format!(
            "ksg_mi_cd takes a scalar variable, got {} columns",
            x.cols()
        )));
    }
    let value = ksg_cd(&x.column(0), labels, k)?;
    Ok(MiEstimate {
        value,
        estimator: Estimator::KsgCd,
        k,
        n: x.rows(),
    })
}

fn check_common(n: usize, other: usize, k: usize) -> Result<()> {
    if n != other {
        return Err(Error::Estimator(format!("sample counts differ: {n} vs {other}")));
    }
    if n < 2 {
        return Err(Error::Estimator(format!("need at least 2 samples, got {n}")));
    }
    if k == 0 || k >= n {
        return Err(Error::Estimator(format!("k = {k} must satisfy 1 <= k < N = {n}")));
    }
    Ok(())
}

fn value_range(v: &[f64]) -> f64 {
    let (lo, hi) = v
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    hi - lo
}

fn has_duplicates(v: &[f64]) -> bool {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s.windows(2).any(|w| w[0] == w[1])
}

/// Breaks ties with a perturbation of magnitude `1e-10 × range`. The offset
/// of each point is a hash of its own magnitude, its partner's magnitude and
/// its rank among identical pairs, and it carries the point's sign. That keeps
/// the estimate invariant to sample order and to negating either variable.
fn jitter<'a>(values: &'a [f64], partner: &[f64]) -> Cow<'a, [f64]> {
    if !has_duplicates(values) {
        return Cow::Borrowed(values);
    }
    let mag = JITTER_REL * value_range(values);
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[a]
            .total_cmp(&values[b])
            .then(partner[a].total_cmp(&partner[b]))
    });
    let mut out = values.to_vec();
    let mut rank = 0u64;
    for (pos, &i) in order.iter().enumerate() {
        if pos > 0 {
            let prev = order[pos - 1];
            let same = values[prev].to_bits() == values[i].to_bits()
                && partner[prev].to_bits() == partner[i].to_bits();
            rank = if same { rank + 1 } else { 0 };
        }
        let h = seed::derive(
            seed::tag::JITTER,
            &[values[i].abs().to_bits(), partner[i].abs().to_bits(), rank],
        );
        let offset = mag * (2.0 * seed::unit_f64(h) - 1.0);
        out[i] = if values[i].is_sign_negative() {
            values[i] - offset
        } else {
            values[i] + offset
        };
    }
    Cow::Owned(out)
}

fn sorted_order(v: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
    order
}

/// For each point, the number of other points with `|v_j - v_i| < radius_i`.
fn count_within(v: &[f64], radius: &[f64]) -> Vec<usize> {
    let order = sorted_order(v);
    let sorted: Vec<f64> = order.iter().map(|&i| v[i]).collect();
    let mut counts = vec![0usize; v.len()];
    for (p, &i) in order.iter().enumerate() {
        let (c, r) = (sorted[p], radius[i]);
        let left = p - sorted[..p].partition_point(|&s| c - s >= r);
        let right = sorted[p + 1..].partition_point(|&s| s - c < r);
        counts[i] = left + right;
    }
    counts
}

/// Sum of `digamma(n + shift)` over all counts, accumulated in count order.
fn digamma_sum<I: IntoIterator<Item = usize>>(counts: I, shift: usize) -> f64 {
    let mut hist: BTreeMap<usize, usize> = BTreeMap::new();
    for c in counts {
        *hist.entry(c).or_default() += 1;
    }
    hist.into_iter()
        .map(|(c, times)| times as f64 * digamma((c + shift) as f64))
        .sum()
}

pub(crate) fn ksg_cc(x: &[f64], y: &[f64], k: usize) -> Result<f64> {
    let n = x.len();
    check_common(n, y.len(), k)?;
    if value_range(x) == 0.0 || value_range(y) == 0.0 {
        return Err(Error::Degenerate("constant variable has no estimable MI".into()));
    }
    let xj = jitter(x, y);
    let yj = jitter(y, x);
    let (x, y) = (&xj[..], &yj[..]);

    // k-th neighbor distance in the joint space, scanning outward along x.
    let order = sorted_order(x);
    let xs: Vec<f64> = order.iter().map(|&i| x[i]).collect();
    let ys: Vec<f64> = order.iter().map(|&i| y[i]).collect();
    let mut eps = vec![0.0f64; n];
    let mut best: Vec<f64> = Vec::with_capacity(k + 1);
    for p in 0..n {
        best.clear();
        let (mut l, mut r) = (p as isize - 1, p + 1);
        loop {
            let dl = if l >= 0 { xs[p] - xs[l as usize] } else { f64::INFINITY };
            let dr = if r < n { xs[r] - xs[p] } else { f64::INFINITY };
            if dl.is_infinite() && dr.is_infinite() {
                break;
            }
            let (j, dx) = if dl <= dr {
                l -= 1;
                ((l + 1) as usize, dl)
            } else {
                r += 1;
                (r - 1, dr)
            };
            if best.len() == k && dx >= best[k - 1] {
                break;
            }
            let d = dx.max((ys[j] - ys[p]).abs());
            if best.len() < k || d < best[k - 1] {
                let at = best.partition_point(|&b| b <= d);
                best.insert(at, d);
                best.truncate(k);
            }
        }
        eps[order[p]] = best[k - 1];
    }

    let nx = count_within(x, &eps);
    let ny = count_within(y, &eps);
    let total = digamma_sum(nx.into_iter().chain(ny), 1);
    Ok(digamma(k as f64) + digamma(n as f64) - total / n as f64)
}

pub(crate) fn ksg_cd(x: &[f64], labels: &[u32], k: usize) -> Result<f64> {
    let n = x.len();
    check_common(n, labels.len(), k)?;
    let mut classes: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        classes.entry(l).or_default().push(i);
    }
    if classes.len() < 2 {
        return Err(Error::Estimator(format!(
            "need at least 2 distinct labels, found {}",
            classes.len()
        )));
    }
    if let Some((label, members)) = classes.iter().find(|(_, m)| m.len() <= k) {
        return Err(Error::Estimator(format!(
            "class {label} has {} members, needs more than k = {k}",
            members.len()
        )));
    }
    if value_range(x) == 0.0 {
        return Err(Error::Degenerate("constant variable has no estimable MI".into()));
    }
    let partner: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
    let xj = jitter(x, &partner);
    let x = &xj[..];

    let mut radius = vec![0.0f64; n];
    for members in classes.values() {
        let mut vals: Vec<f64> = members.iter().map(|&i| x[i]).collect();
        let mut idx = members.clone();
        let ord = sorted_order(&vals);
        idx = ord.iter().map(|&o| idx[o]).collect();
        vals = ord.iter().map(|&o| vals[o]).collect();
        let m = vals.len();
        for p in 0..m {
            let (mut l, mut r) = (p as isize - 1, p + 1);
            let mut d = 0.0;
            for _ in 0..k {
                let dl = if l >= 0 { vals[p] - vals[l as usize] } else { f64::INFINITY };
                let dr = if r < m { vals[r] - vals[p] } else { f64::INFINITY };
                if dl <= dr {
                    d = dl;
                    l -= 1;
                } else {
                    d = dr;
                    r += 1;
                }
            }
            radius[idx[p]] = d;
        }
    }

    let within = count_within(x, &radius);
    let class_sum: f64 = classes
        .values()
        .map(|m| m.len() as f64 * digamma(m.len() as f64))
        .sum();
    let m_sum = digamma_sum(within, 1);
    Ok(digamma(n as f64) - class_sum / n as f64 + digamma(k as f64) - m_sum / n as f64)
}
