use nalgebra::{DMatrix, DVector};
use occgen_core::metrics::{
    clip_controllability, composite_score, controllability_iou, fid_analog, frechet_distance, fvd_analog,
    gaussian_stats, mask_iou, GaussianStats, ScoreConstants,
};
use occgen_core::reward::FeatureExtractor;
use occgen_core::rng;
use occgen_core::tensor::Tensor;
use proptest::prelude::*;

fn stats(mean: &[f64], cov: &[f64]) -> GaussianStats {
    let d = mean.len();
    GaussianStats {
        mean: DVector::from_column_slice(mean),
        cov: DMatrix::from_row_slice(d, d, cov),
    }
}

#[test]
fn gaussian_stats_fixtures() {
    let s = gaussian_stats(&[vec![0.0], vec![2.0]]).unwrap();
    assert_eq!(s.mean[0], 1.0);
    assert_eq!(s.cov[(0, 0)], 2.0);
    let s = gaussian_stats(&[vec![1.5, -2.0], vec![1.5, -2.0]]).unwrap();
    assert!(s.cov.iter().all(|&v| v == 0.0));
    let s = gaussian_stats(&[vec![0.3, -4.0], vec![-0.3, 4.0]]).unwrap();
    assert!(s.mean.iter().all(|&v| v == 0.0));
    assert!(gaussian_stats(&[vec![1.0]]).is_err());
    assert!(gaussian_stats(&[vec![1.0], vec![1.0, 2.0]]).is_err());
}

#[test]
fn frechet_closed_forms() {
    let d = frechet_distance(&stats(&[0.0], &[1.0]), &stats(&[1.0], &[1.0])).unwrap();
    assert!((d - 1.0).abs() < 1e-8);
    // 1-D: (Δμ)² + (σp − σq)²
    let d = frechet_distance(&stats(&[0.5], &[4.0]), &stats(&[-1.0], &[0.25])).unwrap();
    assert!((d - (2.25 + 1.5f64.powi(2))).abs() < 1e-12);
    assert!(frechet_distance(&stats(&[0.0], &[1.0]), &stats(&[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0])).is_err());
}

/// Hand composition for 2-D: `Tr((Σp Σq)^½) = √(tr(Σp Σq) + 2·√det(Σp Σq))`
/// since the product's eigenvalues are real and non-negative.
fn frechet_2d(p: &[Vec<f64>], q: &[Vec<f64>]) -> f64 {
    let moments = |x: &[Vec<f64>]| {
        let n = x.len() as f64;
        let m = [x.iter().map(|r| r[0]).sum::<f64>() / n, x.iter().map(|r| r[1]).sum::<f64>() / n];
        let mut c = [[0.0; 2]; 2];
        for r in x {
            for i in 0..2 {
                for j in 0..2 {
                    c[i][j] += (r[i] - m[i]) * (r[j] - m[j]) / (n - 1.0);
                }
            }
        }
        (m, c)
    };
    let ((mp, cp), (mq, cq)) = (moments(p), moments(q));
    let mut prod = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            prod[i][j] = cp[i][0] * cq[0][j] + cp[i][1] * cq[1][j];
        }
    }
    let tr = prod[0][0] + prod[1][1];
    let det = (prod[0][0] * prod[1][1] - prod[0][1] * prod[1][0]).max(0.0);
    let cross = (tr + 2.0 * det.sqrt()).max(0.0).sqrt();
    (mp[0] - mq[0]).powi(2) + (mp[1] - mq[1]).powi(2) + cp[0][0] + cp[1][1] + cq[0][0] + cq[1][1] - 2.0 * cross
}

#[test]
fn frechet_matches_hand_composition_in_2d() {
    let p = vec![vec![0.0, 1.0], vec![2.0, -1.0], vec![1.0, 3.0]];
    let q = vec![vec![0.5, 0.5], vec![-1.0, 2.0], vec![3.0, 0.0]];
    let d = frechet_distance(&gaussian_stats(&p).unwrap(), &gaussian_stats(&q).unwrap()).unwrap();
    assert!((d - frechet_2d(&p, &q)).abs() < 1e-10, "{d} vs {}", frechet_2d(&p, &q));
}

fn random_spd(seed: u64, d: usize) -> GaussianStats {
    let mut r = rng::prng(seed);
    let a = DMatrix::from_fn(d, d, |_, _| rng::normal(&mut r));
    GaussianStats {
        mean: DVector::from_fn(d, |_, _| rng::normal(&mut r)),
        cov: &a * a.transpose() * 0.5,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn frechet_is_a_symmetric_nonnegative_divergence(s1 in any::<u64>(), s2 in any::<u64>(), d in 1usize..6) {
        let (p, q) = (random_spd(s1, d), random_spd(s2, d));
        let pq = frechet_distance(&p, &q).unwrap();
        let qp = frechet_distance(&q, &p).unwrap();
        prop_assert!(pq >= 0.0);
        prop_assert!((pq - qp).abs() < 1e-8 * (1.0 + pq));
        prop_assert!(frechet_distance(&p, &p).unwrap() < 1e-8);
    }

    #[test]
    fn composite_is_monotone(f in 0.0f64..400.0, m in 0.0f64..40.0, i in 0.0f64..40.0, delta in 0.01f64..10.0) {
        let k = ScoreConstants::default();
        let s = composite_score(f, m, i, &k);
        prop_assert!(composite_score(f + delta, m, i, &k) < s);
        prop_assert!(composite_score(f, m + delta, i, &k) > s);
        prop_assert!(composite_score(f, m, i + delta, &k) > s);
    }
}

#[test]
fn composite_score_fixtures() {
    let k = ScoreConstants::default();
    assert!(composite_score(218.12, 11.8617, 18.3429, &k).abs() < 1e-9);
    assert!((composite_score(220.01, 13.32, 22.22, &k) - 0.32).abs() < 0.01);
    assert_eq!(composite_score(k.a, k.b, k.c, &k), 0.0);
}

fn clip(seed: u64) -> Tensor {
    rng::normal_tensor(&mut rng::prng(seed), vec![2, 8, 8, 3], 0.5)
}

#[test]
fn fid_and_fvd_analogs() {
    let frame = FeatureExtractor::new(17);
    let temporal = FeatureExtractor::new(99);
    let a: Vec<Tensor> = (0..4).map(clip).collect();
    let b: Vec<Tensor> = (10..14).map(clip).collect();
    assert!(fid_analog(&a, &a, &frame).unwrap().abs() < 1e-6);
    assert!(fvd_analog(&a, &a, &temporal).unwrap().abs() < 1e-6);
    let ab = fid_analog(&a, &b, &frame).unwrap();
    assert!(ab > 0.0);
    let mut shuffled = a.clone();
    shuffled.reverse();
    // rank-deficient covariances: clamped near-zero eigenvalues carry round-off
    let sh = fid_analog(&shuffled, &b, &frame).unwrap();
    assert!((sh - ab).abs() < 1e-6 * ab, "{sh} vs {ab}");
    let zeros: Vec<Tensor> = (0..3).map(|_| Tensor::zeros(vec![2, 8, 8, 3])).collect();
    let ones: Vec<Tensor> = (0..3).map(|_| Tensor::ones(vec![2, 8, 8, 3])).collect();
    assert!(fid_analog(&zeros, &ones, &frame).unwrap() > 0.0);
    assert!(fvd_analog(&zeros, &ones, &temporal).unwrap() > 0.0);
    assert!(fvd_analog(&a[..1], &b, &temporal).is_err());
}

fn image_from(mask: &[bool]) -> Tensor {
    let data = mask.iter().flat_map(|&m| [if m { 0.9 } else { 0.1 }, 0.5, 0.5]).collect();
    Tensor::new(vec![2, 4, 3], data).unwrap()
}

fn weights(mask: &[bool]) -> Tensor {
    Tensor::new(vec![2, 4], mask.iter().map(|&m| if m { 1.6 } else { 1.0 }).collect()).unwrap()
}

#[test]
fn controllability_fixtures() {
    let a = [true, true, false, false, true, true, false, false];
    let half = [false, true, true, false, false, true, true, false];
    let disjoint = [false, false, true, true, false, false, true, true];
    let none = [false; 8];
    let iou = |img: &[bool], m: &[bool]| controllability_iou(&image_from(img), &weights(m), 0.3).unwrap();
    assert_eq!(iou(&a, &a), 1.0);
    assert_eq!(iou(&a, &disjoint), 0.0);
    assert!((iou(&a, &half) - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(iou(&none, &none), 1.0);
    assert_eq!(iou(&a, &none), 0.0);
    assert_eq!(mask_iou(&none, &a), 0.0);
    assert!(controllability_iou(&image_from(&a), &Tensor::ones(vec![4, 2]), 0.3).is_err());

    let video = Tensor::new(vec![2, 2, 4, 3], [image_from(&a).into_data(), image_from(&half).into_data()].concat()).unwrap();
    let masks = Tensor::new(vec![2, 2, 4], [weights(&a).into_data(), weights(&a).into_data()].concat()).unwrap();
    assert!((clip_controllability(&video, &masks, 0.3).unwrap() - (1.0 + 1.0 / 3.0) / 2.0).abs() < 1e-15);
}
