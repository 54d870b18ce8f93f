//! Sliced mutual information: the mean KSG estimate over random
//! one-dimensional projections of each variable.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::ksg::{ksg_cc, ksg_cd};
use super::{Estimator, MiEstimate, SampleMatrix};
use crate::error::{Error, Result};

/// Second argument to [`smi`].
#[derive(Debug, Clone, Copy)]
pub enum SmiTarget<'a> {
    Continuous(&'a SampleMatrix),
    Labels(&'a [u32]),
}

/// `count` random unit directions for each variable, regenerable from `seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSet {
    seed: u64,
    u_dirs: Vec<Vec<f64>>,
    v_dirs: Option<Vec<Vec<f64>>>,
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

impl ProjectionSet {
    /// Pass `v_dim = None` when the second variable is a label vector.
    pub fn generate(count: usize, u_dim: usize, v_dim: Option<usize>, seed: u64) -> Result<Self> {
        if count == 0 || u_dim == 0 || v_dim == Some(0) {
            return Err(Error::InvalidArgument(
                "projection count and dimensions must be positive".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut u_dirs = Vec::with_capacity(count);
        let mut v_dirs = v_dim.map(|_| Vec::with_capacity(count));
        for _ in 0..count {
            u_dirs.push(unit_vector(&mut rng, u_dim));
            if let (Some(dirs), Some(p)) = (v_dirs.as_mut(), v_dim) {
                dirs.push(unit_vector(&mut rng, p));
            }
        }
        Ok(ProjectionSet { seed, u_dirs, v_dirs })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn count(&self) -> usize {
        self.u_dirs.len()
    }

    pub fn u_directions(&self) -> &[Vec<f64>] {
        &self.u_dirs
    }

    pub fn v_directions(&self) -> Option<&[Vec<f64>]> {
        self.v_dirs.as_deref()
    }
}

pub(crate) fn project(m: &SampleMatrix, dir: &[f64]) -> Vec<f64> {
    (0..m.rows())
        .map(|i| {
            m.row(i)
                .iter()
                .zip(dir)
                .fold(0.0f64, |acc, (&x, &t)| acc + x as f64 * t)
        })
        .collect()
}

fn is_constant(v: &[f64]) -> bool {
    v.iter().all(|&x| x == v[0])
}

pub fn smi(u: &SampleMatrix, v: SmiTarget<'_>, proj: &ProjectionSet, k: usize) -> Result<MiEstimate> {
    let n = u.rows();
    if proj.u_dirs[0].len() != u.cols() {
        return Err(Error::InvalidArgument(format!(
            "projection dimension {} does not match {} columns",
            proj.u_dirs[0].len(),
            u.cols()
        )));
    }
    let estimator = match v {
        SmiTarget::Continuous(vm) => {
            if vm.rows() != n {
                return Err(Error::Estimator(format!(
                    "sample counts differ: {n} vs {}",
                    vm.rows()
                )));
            }
            match proj.v_directions() {
                Some(d) if d[0].len() == vm.cols() => {}
                _ => {
                    return Err(Error::InvalidArgument(
                        "projection set lacks matching directions for the second variable".into(),
                    ))
                }
            }
            Estimator::KsgCc
        }
        SmiTarget::Labels(labels) => {
            if labels.len() != n {
                return Err(Error::Estimator(format!(
                    "sample counts differ: {n} vs {}",
                    labels.len()
                )));
            }
            Estimator::KsgCd
        }
    };

    let per_projection: Vec<Result<Option<f64>>> = (0..proj.count())
        .into_par_iter()
        .map(|i| {
            let pu = project(u, &proj.u_dirs[i]);
            if is_constant(&pu) {
                return Ok(None);
            }
            match v {
                SmiTarget::Continuous(vm) => {
                    let pv = project(vm, &proj.v_directions().expect("checked")[i]);
                    if is_constant(&pv) {
                        return Ok(None);
                    }
                    ksg_cc(&pu, &pv, k).map(Some)
                }
                SmiTarget::Labels(labels) => ksg_cd(&pu, labels, k).map(Some),
            }
        })
        .collect();

    let mut mean = 0.0f64;
    let mut used = 0usize;
    for (i, r) in per_projection.into_iter().enumerate() {
        match r? {
            Some(value) => {
                mean += (value - mean) / (used + 1) as f64;
                used += 1;
            }
            None => log::warn!("projection {i} has zero sample variance; skipped"),
        }
    }
    if used == 0 {
        return Err(Error::Degenerate(format!(
            "all {} projections have zero sample variance",
            proj.count()
        )));
    }
    Ok(MiEstimate {
        value: mean,
        estimator,
        k,
        n,
    })
}
