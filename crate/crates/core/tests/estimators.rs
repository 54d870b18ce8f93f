use infoq_core::fixture::{reference_dataset, FixtureConfig};
use infoq_core::{fit_compressor, ksg_mi_cc, ksg_mi_cd, pearson, smi, Error, ProjectionSet, SampleMatrix, SmiTarget};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn col(v: &[f64]) -> SampleMatrix {
    SampleMatrix::from_column(v).unwrap()
}

fn gaussian_pair(n: usize, rho: f64, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut r = rng(seed);
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let a: f64 = StandardNormal.sample(&mut r);
        let b: f64 = StandardNormal.sample(&mut r);
        x.push(a);
        y.push(rho * a + (1.0 - rho * rho).sqrt() * b);
    }
    (x, y)
}

fn gaussian_matrix(n: usize, d: usize, seed: u64) -> SampleMatrix {
    let mut r = rng(seed);
    let v: Vec<f32> = (0..n * d).map(|_| StandardNormal.sample(&mut r)).collect();
    SampleMatrix::new(n, d, v).unwrap()
}

#[test]
fn gaussian_closed_form() {
    let (x, y) = gaussian_pair(5000, 0.9, 1);
    let est = ksg_mi_cc(&col(&x), &col(&y), 3).unwrap().value;
    let exact = -0.5 * (1.0f64 - 0.81).ln();
    assert!((est - exact).abs() <= 0.1, "{est} vs {exact}");
}

#[test]
fn independent_uniforms_near_zero() {
    let mut r = rng(2);
    let x: Vec<f64> = (0..5000).map(|_| r.random()).collect();
    let y: Vec<f64> = (0..5000).map(|_| r.random()).collect();
    let est = ksg_mi_cc(&col(&x), &col(&y), 3).unwrap().value;
    assert!(est.abs() <= 0.05, "{est}");
}

#[test]
fn identical_variables_score_high_and_grow() {
    let mut r = rng(3);
    let x: Vec<f64> = (0..5000).map(|_| r.random()).collect();
    let big = ksg_mi_cc(&col(&x), &col(&x), 3).unwrap().value;
    let small = ksg_mi_cc(&col(&x[..500]), &col(&x[..500]), 3).unwrap().value;
    assert!(big > 2.0, "{big}");
    assert!(big > small);
}

#[test]
fn monotone_transform_changes_little() {
    let (x, y) = gaussian_pair(5000, 0.9, 1);
    let ex: Vec<f64> = x.iter().map(|v| v.exp()).collect();
    let a = ksg_mi_cc(&col(&x), &col(&y), 3).unwrap().value;
    let b = ksg_mi_cc(&col(&ex), &col(&y), 3).unwrap().value;
    assert!((a - b).abs() <= 0.05, "{a} vs {b}");
}

#[test]
fn cc_is_exactly_symmetric_with_duplicates() {
    let (x, y) = gaussian_pair(800, 0.5, 4);
    // Coarse rounding forces heavy ties in both marginals.
    let xq: Vec<f64> = x.iter().map(|v| (v * 4.0).round() / 4.0).collect();
    let yq: Vec<f64> = y.iter().map(|v| (v * 2.0).round() / 2.0).collect();
    for (a, b) in [(&x, &y), (&xq, &yq)] {
        let fwd = ksg_mi_cc(&col(a), &col(b), 3).unwrap().value;
        let rev = ksg_mi_cc(&col(b), &col(a), 3).unwrap().value;
        assert_eq!(fwd.to_bits(), rev.to_bits());
    }
}

#[test]
fn cc_rejects_bad_inputs() {
    assert!(SampleMatrix::from_column(&[1.0]).is_err());
    assert!(matches!(ksg_mi_cc(&col(&[1.0, 2.0]), &col(&[2.0, 1.0, 0.0]), 1), Err(Error::Estimator(_))));
    assert!(matches!(
        ksg_mi_cc(&col(&[1.0, 2.0, 3.0]), &col(&[3.0, 1.0, 2.0]), 3),
        Err(Error::Estimator(_))
    ));
}

#[test]
fn cd_shuffled_labels_near_zero() {
    let mut r = rng(5);
    let x: Vec<f64> = (0..5000).map(|_| StandardNormal.sample(&mut r)).collect();
    let labels: Vec<u32> = (0..5000).map(|_| r.random_range(0..4)).collect();
    let est = ksg_mi_cd(&col(&x), &labels, 3).unwrap().value;
    assert!(est.abs() <= 0.05, "{est}");
}

/// Plug-in discrete MI between labels and the thresholded variable.
fn plug_in_mi(x: &[f64], labels: &[u32], threshold: f64) -> f64 {
    let n = x.len() as f64;
    let mut joint = [[0.0f64; 2]; 2];
    for (&v, &l) in x.iter().zip(labels) {
        joint[(v > threshold) as usize][l as usize] += 1.0;
    }
    let px = [joint[0][0] + joint[0][1], joint[1][0] + joint[1][1]];
    let py = [joint[0][0] + joint[1][0], joint[0][1] + joint[1][1]];
    let mut mi = 0.0;
    for a in 0..2 {
        for b in 0..2 {
            if joint[a][b] > 0.0 {
                mi += joint[a][b] / n * (joint[a][b] * n / (px[a] * py[b])).ln();
            }
        }
    }
    mi
}

#[test]
fn cd_separable_classes_reach_ln2() {
    let mut r = rng(6);
    let labels: Vec<u32> = (0..4000).map(|i| (i % 2) as u32).collect();
    let x: Vec<f64> = labels.iter().map(|&l| l as f64 + 1e-3 * r.random::<f64>()).collect();
    let est = ksg_mi_cd(&col(&x), &labels, 3).unwrap().value;
    let oracle = plug_in_mi(&x, &labels, 0.5);
    assert!((oracle - std::f64::consts::LN_2).abs() < 1e-9);
    assert!((est - oracle).abs() <= 0.1, "{est} vs {oracle}");
}

#[test]
fn cd_single_class_rejected() {
    let x: Vec<f64> = (0..50).map(|i| i as f64).collect();
    assert!(ksg_mi_cd(&col(&x), &[0; 50], 3).is_err());
    let mut labels = vec![0u32; 50];
    labels[..3].fill(1);
    match ksg_mi_cd(&col(&x), &labels, 3) {
        Err(Error::Estimator(msg)) => assert!(msg.contains('1'), "{msg}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn smi_in_one_dimension_equals_ksg() {
    let (x, y) = gaussian_pair(600, 0.7, 7);
    let direct = ksg_mi_cc(&col(&x), &col(&y), 3).unwrap().value;
    for m in [1, 5, 16] {
        let p = ProjectionSet::generate(m, 1, Some(1), 9).unwrap();
        let s = smi(&col(&x), SmiTarget::Continuous(&col(&y)), &p, 3).unwrap().value;
        assert_eq!(s.to_bits(), direct.to_bits(), "m = {m}");
    }
}

#[test]
fn smi_independent_gaussians_near_zero() {
    let u = gaussian_matrix(2000, 8, 10);
    let v = gaussian_matrix(2000, 8, 11);
    let p = ProjectionSet::generate(64, 8, Some(8), 12).unwrap();
    let s = smi(&u, SmiTarget::Continuous(&v), &p, 3).unwrap().value;
    assert!(s.abs() <= 0.05, "{s}");
}

/// Two independent directions on the plane meet at a uniform angle, and the
/// Gaussian MI averages E[-ln|sin t|] = ln 2 over it.
#[test]
fn smi_of_a_planar_copy_is_ln_two() {
    let u = gaussian_matrix(4000, 2, 13);
    let p = ProjectionSet::generate(256, 2, Some(2), 42).unwrap();
    let s = smi(&u, SmiTarget::Continuous(&u), &p, 3).unwrap().value;
    assert!((s - std::f64::consts::LN_2).abs() <= 0.15, "{s}");
}

#[test]
fn smi_ignores_thread_count() {
    let u = gaussian_matrix(1000, 6, 14);
    let labels: Vec<u32> = (0..1000).map(|i| (u.row(i)[0] > 0.0) as u32).collect();
    let p = ProjectionSet::generate(32, 6, None, 15).unwrap();
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| smi(&u, SmiTarget::Labels(&labels), &p, 3).unwrap().value)
    };
    let one = run(1);
    assert_eq!(one.to_bits(), run(4).to_bits());
    assert!(one > 0.02, "{one}");
}

#[test]
fn smi_ignores_sample_order() {
    let u = gaussian_matrix(700, 4, 16);
    let v = gaussian_matrix(700, 3, 17);
    let p = ProjectionSet::generate(16, 4, Some(3), 18).unwrap();
    let base = smi(&u, SmiTarget::Continuous(&v), &p, 3).unwrap().value;
    let perm: Vec<usize> = (0..700).rev().collect();
    let pu = u.select_rows(&perm).unwrap();
    let pv = v.select_rows(&perm).unwrap();
    let shuffled = smi(&pu, SmiTarget::Continuous(&pv), &p, 3).unwrap().value;
    assert!((base - shuffled).abs() <= 1e-12, "{base} vs {shuffled}");
}

/// Cyclic Jacobi rotations; eigenvalues in descending order.
fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-22 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

#[test]
fn pca_eigenvalues_match_jacobi_on_fixture_images() {
    let cfg = FixtureConfig {
        samples: 400,
        ..FixtureConfig::default()
    };
    let data = reference_dataset(&cfg).unwrap();
    let flat = SampleMatrix::from_tensor(data.inputs()).unwrap();
    let (n, d) = (flat.rows(), flat.cols());
    let mean: Vec<f64> = (0..d).map(|j| flat.column(j).iter().sum::<f64>() / n as f64).collect();
    let mut cov = vec![vec![0.0f64; d]; d];
    for i in 0..n {
        let r = flat.row(i);
        for a in 0..d {
            let da = r[a] as f64 - mean[a];
            for b in 0..d {
                cov[a][b] += da * (r[b] as f64 - mean[b]);
            }
        }
    }
    cov.iter_mut().flatten().for_each(|v| *v /= (n - 1) as f64);
    let oracle = jacobi_eigenvalues(cov);
    let c = fit_compressor(&flat, 8).unwrap();
    for (got, want) in c.eigenvalues.iter().zip(&oracle[..8]) {
        assert!((got - want).abs() <= 1e-4 * want.abs(), "{got} vs {want}");
    }
    for (i, a) in c.components.iter().enumerate() {
        for (j, b) in c.components.iter().enumerate() {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            assert!((dot - (i == j) as u8 as f64).abs() <= 1e-5);
        }
        let lead = a.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        assert!(lead > 0.0);
    }
}

#[test]
fn full_rank_pca_preserves_distances() {
    let x = gaussian_matrix(50, 5, 19);
    let c = fit_compressor(&x, 5).unwrap();
    let z = c.compress(&x).unwrap();
    let dist = |m: &SampleMatrix, i: usize, j: usize| -> f64 {
        m.row(i).iter().zip(m.row(j)).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum::<f64>().sqrt()
    };
    for i in 0..50 {
        for j in 0..50 {
            assert!((dist(&x, i, j) - dist(&z, i, j)).abs() <= 1e-4);
        }
    }
}

#[test]
fn pca_rank_error_suggests_smaller_dim() {
    let v: Vec<f32> = (0..40).flat_map(|i| [i as f32, 2.0 * i as f32, -(i as f32)]).collect();
    let x = SampleMatrix::new(40, 3, v).unwrap();
    let msg = fit_compressor(&x, 2).unwrap_err().to_string();
    assert!(msg.contains("d_E <= 1"), "{msg}");
}

fn textbook_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (sx, sy): (f64, f64) = (x.iter().sum(), y.iter().sum());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

#[test]
fn pearson_matches_textbook_formula() {
    let x = [1.0, 2.5, 3.1, 4.7, 5.0, 6.2, 7.9, 8.1, 9.4, 10.0];
    let y = [2.1, 2.9, 3.7, 3.2, 6.0, 5.1, 8.8, 7.4, 9.9, 12.3];
    let got = pearson(&x, &y).unwrap();
    assert!((got - textbook_pearson(&x, &y)).abs() <= 1e-12);
    assert_eq!(pearson(&x, &x).unwrap(), 1.0);
    let neg: Vec<f64> = x.iter().map(|v| -2.0 * v + 3.0).collect();
    assert_eq!(pearson(&x, &neg).unwrap(), -1.0);
}

proptest! {
    #[test]
    fn pearson_ignores_affine_rescaling(
        xs in prop::collection::vec(-100i32..100, 3..30),
        ys in prop::collection::vec(-100i32..100, 3..30),
        a_exp in -3i32..4,
        negate in any::<bool>(),
        b in -50i32..50,
    ) {
        let n = xs.len().min(ys.len());
        let x: Vec<f64> = xs[..n].iter().map(|&v| v as f64).collect();
        let y: Vec<f64> = ys[..n].iter().map(|&v| v as f64).collect();
        prop_assume!(x.iter().any(|&v| v != x[0]) && y.iter().any(|&v| v != y[0]));
        // Power-of-two scales and integer shifts keep the transform exact.
        let a = 2f64.powi(a_exp) * if negate { -1.0 } else { 1.0 };
        let ax: Vec<f64> = x.iter().map(|v| a * v + b as f64).collect();
        let base = pearson(&x, &y).unwrap();
        let moved = pearson(&ax, &y).unwrap();
        prop_assert_eq!(moved, base * a.signum());
        prop_assert!((-1.0..=1.0).contains(&base));
    }
}
