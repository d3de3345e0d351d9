use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use segrenorm::eval::metrics::{dice_iou, fid, gdc, kid, mmd2_unbiased, spearman, ssim, FeatureSet};
use segrenorm::LabelMap;

fn normal_set(m: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((m, d), |_| StandardNormal.sample(&mut rng))
}

/// Unbiased MMD² written out as three explicit double sums.
fn brute_mmd2(x: &Array2<f64>, y: &Array2<f64>) -> f64 {
    let d = x.ncols() as f64;
    let k = |u: ndarray::ArrayView1<f64>, v: ndarray::ArrayView1<f64>| {
        let mut dot = 0.0;
        for i in 0..u.len() {
            dot += u[i] * v[i];
        }
        (dot / d + 1.0).powi(3)
    };
    let m = x.nrows();
    let (mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0);
    for i in 0..m {
        for j in 0..m {
            if i != j {
                xx += k(x.row(i), x.row(j));
                yy += k(y.row(i), y.row(j));
            }
        }
    }
    for i in 0..m {
        for j in 0..m {
            xy += k(x.row(i), y.row(j));
        }
    }
    let mf = m as f64;
    xx / (mf * (mf - 1.0)) + yy / (mf * (mf - 1.0)) - 2.0 * xy / (mf * mf)
}

#[test]
fn kid_matches_brute_force_on_small_sets() {
    for m in 2..=8 {
        for d in [1, 3, 8] {
            let x = normal_set(m, d, (m * 10 + d) as u64);
            let y = normal_set(m, d, (m * 10 + d) as u64 + 1000).mapv(|v| v * 1.3 + 0.4);
            let want = brute_mmd2(&x, &y);
            let got = kid(&FeatureSet::new(x.clone(), "x"), &FeatureSet::new(y.clone(), "y"), m, 3, 7).unwrap();
            assert!((got.mean - want).abs() < 1e-8, "m={m} d={d}: {} vs {want}", got.mean);
            assert!(got.std < 1e-8);
            assert!((mmd2_unbiased(x.view(), y.view()).unwrap() - want).abs() < 1e-8);
        }
    }
}

#[test]
fn kid_same_distribution_is_near_zero() {
    let a = FeatureSet::new(normal_set(2000, 8, 1), "a");
    let b = FeatureSet::new(normal_set(2000, 8, 2), "b");
    let s = kid(&a, &b, 1000, 10, 0).unwrap();
    assert!(s.mean.abs() < 0.01, "{}", s.mean);
}

#[test]
fn kid_separates_shifted_sets() {
    let a = FeatureSet::new(normal_set(200, 8, 3), "a");
    let b = FeatureSet::new(normal_set(200, 8, 4).mapv(|v| v + 1.0), "b");
    let c = FeatureSet::new(normal_set(200, 8, 5), "c");
    assert!(kid(&a, &b, 100, 20, 0).unwrap().mean > 10.0 * kid(&a, &c, 100, 20, 0).unwrap().mean.abs());
}

#[test]
fn fid_identity_and_analytic_shift() {
    let a = FeatureSet::new(normal_set(500, 4, 6), "a");
    assert!(fid(&a, &a).unwrap().abs() < 1e-6);

    let x = normal_set(5000, 8, 7);
    let mut y = normal_set(5000, 8, 8);
    y.column_mut(0).mapv_inplace(|v| v + 1.0);
    let f = fid(&FeatureSet::new(x, "x"), &FeatureSet::new(y, "y")).unwrap();
    assert!((0.85..=1.15).contains(&f), "{f}");
}

#[test]
fn fid_one_dimensional_closed_form() {
    let x = normal_set(50, 1, 9).mapv(|v| 2.0 * v + 1.0);
    let y = normal_set(70, 1, 10).mapv(|v| 0.5 * v - 3.0);
    let stats = |a: &Array2<f64>| {
        let n = a.nrows() as f64;
        let mu = a.sum() / n;
        let var = a.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n - 1.0);
        (mu, var.sqrt())
    };
    let ((ma, sa), (mb, sb)) = (stats(&x), stats(&y));
    let want = (ma - mb).powi(2) + (sa - sb).powi(2);
    let got = fid(&FeatureSet::new(x, "x"), &FeatureSet::new(y, "y")).unwrap();
    assert!((got - want).abs() < 1e-6, "{got} vs {want}");
}

#[test]
fn fid_rejects_dimension_mismatch() {
    assert!(fid(&FeatureSet::new(normal_set(5, 2, 0), "a"), &FeatureSet::new(normal_set(5, 3, 0), "b")).is_err());
}

/// SSIM with the 2-D window built directly and every statistic summed per
/// window position.
fn naive_ssim(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let k = 11;
    let mut w = Array2::<f64>::zeros((k, k));
    for i in 0..k {
        for j in 0..k {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            w[[i, j]] = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
        }
    }
    let s = w.sum();
    w.mapv_inplace(|v| v / s);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (h, wd) = a.dim();
    let mut total = 0.0;
    let mut count = 0;
    for y in 0..=h - k {
        for x in 0..=wd - k {
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    ma += w[[i, j]] * a[[y + i, x + j]];
                    mb += w[[i, j]] * b[[y + i, x + j]];
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    let (da, db) = (a[[y + i, x + j]] - ma, b[[y + i, x + j]] - mb);
                    va += w[[i, j]] * da * da;
                    vb += w[[i, j]] * db * db;
                    cov += w[[i, j]] * da * db;
                }
            }
            total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}

#[test]
fn ssim_matches_naive_windowing() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let u = Uniform::new(0.0f64, 1.0).unwrap();
    let a = Array2::from_shape_fn((19, 23), |_| u.sample(&mut rng));
    let b = a.mapv(|v| (v * 0.7 + 0.1 + 0.2 * u.sample(&mut rng)).clamp(0.0, 1.0));
    let got = ssim(&a, &b).unwrap();
    let want = naive_ssim(&a, &b);
    assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    assert!(got < 1.0);
}

#[test]
fn ssim_identity_and_constants() {
    let a = normal_set(16, 16, 12).mapv(|v| (v * 0.2 + 0.5).clamp(0.0, 1.0));
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
    let (p, q) = (0.3, 0.6);
    let c1 = 0.01f64.powi(2);
    let want = (2.0 * p * q + c1) / (p * p + q * q + c1);
    let got = ssim(&Array2::from_elem((12, 12), p), &Array2::from_elem((12, 12), q)).unwrap();
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn gdc_weights_small_structures() {
    let truth = LabelMap::new(Array2::from_shape_fn((10, 10), |(i, j)| u8::from(i < 2 && j < 2)), 2).unwrap();
    let miss = LabelMap::new(Array2::zeros((10, 10)), 2).unwrap();
    assert!((gdc(&truth, &truth).unwrap() - 1.0).abs() < 1e-12);
    // Missing the 4-pixel structure costs far more than its share of pixels.
    assert!(gdc(&miss, &truth).unwrap() < 0.6);
}

#[test]
fn spearman_on_curves() {
    let s = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5];
    assert!((spearman(&s, &[0.0, 0.01, 0.05, 0.06, 0.2, 0.3]).unwrap() - 1.0).abs() < 1e-12);
    assert!((spearman(&s, &[1.0, 0.9, 0.8, 0.7, 0.6, 0.5]).unwrap() + 1.0).abs() < 1e-12);
}

fn label_map(n: usize, classes: u8) -> impl Strategy<Value = Array2<u8>> {
    proptest::collection::vec(0..classes, n * n).prop_map(move |v| Array2::from_shape_vec((n, n), v).unwrap())
}

proptest! {
    #[test]
    fn iou_follows_from_dice(p in label_map(6, 3), t in label_map(6, 3), c in 0u8..3) {
        let (p, t) = (LabelMap::new(p, 3).unwrap(), LabelMap::new(t, 3).unwrap());
        let (dc, iou) = dice_iou(&p, &t, c).unwrap();
        prop_assert!((iou - dc / (2.0 - dc)).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&dc));
        let (dc2, _) = dice_iou(&t, &p, c).unwrap();
        prop_assert_eq!(dc, dc2);
    }

    #[test]
    fn gdc_is_bounded_and_perfect_on_self(p in label_map(5, 3), t in label_map(5, 3)) {
        let (p, t) = (LabelMap::new(p, 3).unwrap(), LabelMap::new(t, 3).unwrap());
        let g = gdc(&p, &t).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&g));
        prop_assert!((gdc(&t, &t).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_symmetric_and_bounded(v in proptest::collection::vec(0.0f64..1.0, 2 * 144)) {
        let a = Array2::from_shape_vec((12, 12), v[..144].to_vec()).unwrap();
        let b = Array2::from_shape_vec((12, 12), v[144..].to_vec()).unwrap();
        let ab = ssim(&a, &b).unwrap();
        prop_assert!((ab - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!(ab <= 1.0 + 1e-12 && ab >= -1.0 - 1e-12);
    }

    #[test]
    fn mmd_is_symmetric(seed in 0u64..1000, m in 2usize..7) {
        let x = normal_set(m, 3, seed);
        let y = normal_set(m, 3, seed + 1);
        let a = mmd2_unbiased(x.view(), y.view()).unwrap();
        let b = mmd2_unbiased(y.view(), x.view()).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
    }
}
