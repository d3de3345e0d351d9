//! Distribution distances, overlap scores and SSIM.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::LabelMap;

/// One embedding per row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub features: Array2<f64>,
    pub source: String,
}

impl FeatureSet {
    pub fn new(features: Array2<f64>, source: impl Into<String>) -> Self {
        Self {
            features,
            source: source.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }
}

fn check_pair(a: &FeatureSet, b: &FeatureSet) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!(
            "feature dimensions differ: {} ({}) vs {} ({})",
            a.dim(),
            a.source,
            b.dim(),
            b.source
        )));
    }
    for s in [a, b] {
        if s.len() < 2 {
            return Err(Error::invalid(format!("feature set `{}` needs at least 2 rows", s.source)));
        }
    }
    Ok(())
}

fn mean_cov(x: ArrayView2<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let (m, d) = x.dim();
    let mu = x.mean_axis(Axis(0)).expect("non-empty");
    let centered = &x - &mu;
    let c = centered.t().dot(&centered) / (m as f64 - 1.0);
    (
        DVector::from_iterator(d, mu.iter().copied()),
        DMatrix::from_fn(d, d, |i, j| c[[i, j]]),
    )
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians fitted to the two sets.
///
/// `Tr((Σa Σb)^½)` is evaluated as `Tr((Σa^½ Σb Σa^½)^½)`, which has the same
/// eigenvalues but is symmetric.
pub fn fid(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    check_pair(a, b)?;
    for s in [a, b] {
        if s.len() <= s.dim() {
            log::warn!(
                "FID on `{}` uses {} samples for {} dimensions; the estimate is strongly biased",
                s.source,
                s.len(),
                s.dim()
            );
        }
    }
    let (mu_a, cov_a) = mean_cov(a.features.view());
    let (mu_b, cov_b) = mean_cov(b.features.view());
    let sa = psd_sqrt(&cov_a);
    let inner = &sa * &cov_b * &sa;
    let sym = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(sym).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let diff = mu_a - mu_b;
    Ok(diff.dot(&diff) + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt)
}

/// `(uᵀv / D + 1)³`
pub fn poly_kernel(u: &[f64], v: &[f64]) -> f64 {
    let d = u.len() as f64;
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    (dot / d + 1.0).powi(3)
}

/// Unbiased MMD² between two equally sized sets under [`poly_kernel`].
pub fn mmd2_unbiased(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<f64> {
    let m = x.nrows();
    if m < 2 || y.nrows() != m {
        return Err(Error::invalid(format!(
            "unbiased MMD² needs two sets of equal size >= 2, got {} and {}",
            m,
            y.nrows()
        )));
    }
    let k = |a: ArrayView2<f64>, i: usize, b: ArrayView2<f64>, j: usize| {
        let g = a.row(i).dot(&b.row(j)) / a.ncols() as f64 + 1.0;
        g * g * g
    };
    let (mut kxx, mut kyy, mut kxy) = (0.0, 0.0, 0.0);
    for i in 0..m {
        for j in 0..m {
            if i != j {
                kxx += k(x, i, x, j);
                kyy += k(y, i, y, j);
            }
            kxy += k(x, i, y, j);
        }
    }
    let mf = m as f64;
    Ok((kxx + kyy) / (mf * (mf - 1.0)) - 2.0 * kxy / (mf * mf))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KidScore {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KidParams {
    /// `None` uses `min(M_a, M_b, 100)`.
    pub subset_size: Option<usize>,
    pub n_subsets: usize,
    pub seed: u64,
}

impl Default for KidParams {
    fn default() -> Self {
        Self {
            subset_size: None,
            n_subsets: 100,
            seed: 0,
        }
    }
}

/// Unbiased MMD² averaged over random equal-size subsets; `std` is the
/// population spread across subsets.
pub fn kid(a: &FeatureSet, b: &FeatureSet, subset_size: usize, n_subsets: usize, seed: u64) -> Result<KidScore> {
    check_pair(a, b)?;
    if subset_size < 2 {
        return Err(Error::invalid(format!("KID subset size must be >= 2, got {subset_size}")));
    }
    if subset_size > a.len().min(b.len()) {
        return Err(Error::invalid(format!(
            "KID subset size {subset_size} exceeds the smaller set ({})",
            a.len().min(b.len())
        )));
    }
    if n_subsets == 0 {
        return Err(Error::invalid("KID needs at least one subset"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vals = Vec::with_capacity(n_subsets);
    for _ in 0..n_subsets {
        let ia = sample(&mut rng, a.len(), subset_size).into_vec();
        let ib = sample(&mut rng, b.len(), subset_size).into_vec();
        let xa = a.features.select(Axis(0), &ia);
        let xb = b.features.select(Axis(0), &ib);
        vals.push(mmd2_unbiased(xa.view(), xb.view())?);
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(KidScore { mean, std: var.sqrt() })
}

pub fn kid_with(a: &FeatureSet, b: &FeatureSet, params: &KidParams) -> Result<KidScore> {
    let size = params.subset_size.unwrap_or_else(|| a.len().min(b.len()).min(100));
    kid(a, b, size, params.n_subsets, params.seed)
}

fn check_masks(pred: &LabelMap, truth: &LabelMap) -> Result<()> {
    if pred.dims() != truth.dims() {
        return Err(Error::shape(format!(
            "mask shapes differ: {:?} vs {:?}",
            pred.dims(),
            truth.dims()
        )));
    }
    Ok(())
}

/// Dice and IoU of the `class_id` foreground. Two empty sets score 1.
pub fn dice_iou(pred: &LabelMap, truth: &LabelMap, class_id: u8) -> Result<(f64, f64)> {
    check_masks(pred, truth)?;
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.labels.iter().zip(truth.labels.iter()) {
        let (pa, tb) = (p == class_id, t == class_id);
        a += pa as usize;
        b += tb as usize;
        inter += (pa && tb) as usize;
    }
    if a + b == 0 {
        return Ok((1.0, 1.0));
    }
    let dc = 2.0 * inter as f64 / (a + b) as f64;
    let iou = inter as f64 / (a + b - inter) as f64;
    Ok((dc, iou))
}

pub const GDC_EPS: f64 = 1e-8;

/// Generalized Dice over all classes with weights `1 / (|truth_c|² + ε)`.
pub fn gdc(pred: &LabelMap, truth: &LabelMap) -> Result<f64> {
    check_masks(pred, truth)?;
    let n = pred.n_classes.max(truth.n_classes);
    let mut inter = vec![0usize; n];
    let mut sum = vec![0usize; n];
    let mut vol = vec![0usize; n];
    for (&p, &t) in pred.labels.iter().zip(truth.labels.iter()) {
        sum[p as usize] += 1;
        sum[t as usize] += 1;
        vol[t as usize] += 1;
        if p == t {
            inter[p as usize] += 1;
        }
    }
    let (mut num, mut den) = (0.0, 0.0);
    for c in 0..n {
        let w = 1.0 / ((vol[c] as f64).powi(2) + GDC_EPS);
        num += w * inter[c] as f64;
        den += w * sum[c] as f64;
    }
    if den == 0.0 {
        return Ok(1.0);
    }
    Ok(2.0 * num / den)
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Normalized 1-D Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

fn filter_valid(img: &Array2<f64>, taps: &[f64]) -> Array2<f64> {
    let k = taps.len();
    let (h, w) = img.dim();
    let rows: Array2<f64> = Array2::from_shape_fn((h, w + 1 - k), |(i, j)| (0..k).map(|t| taps[t] * img[[i, j + t]]).sum());
    Array2::from_shape_fn((h + 1 - k, w + 1 - k), |(i, j)| (0..k).map(|t| taps[t] * rows[[i + t, j]]).sum::<f64>())
}

/// Mean SSIM over every fully contained 11×11 Gaussian window, for images
/// with dynamic range 1.
pub fn ssim(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!("SSIM inputs differ in shape: {:?} vs {:?}", a.dim(), b.dim())));
    }
    let (h, w) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}")));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mu_a = filter_valid(a, &taps);
    let mu_b = filter_valid(b, &taps);
    let aa = filter_valid(&(a * a), &taps);
    let bb = filter_valid(&(b * b), &taps);
    let ab = filter_valid(&(a * b), &taps);
    let mut total = 0.0;
    for i in 0..mu_a.nrows() {
        for j in 0..mu_a.ncols() {
            let (ma, mb) = (mu_a[[i, j]], mu_b[[i, j]]);
            let va = aa[[i, j]] - ma * ma;
            let vb = bb[[i, j]] - mb * mb;
            let cov = ab[[i, j]] - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    Ok(total / mu_a.len() as f64)
}

/// SSIM of two images in `[-1, 1]`, rescaled to `[0, 1]` first.
pub fn ssim_signed(a: &Array2<f32>, b: &Array2<f32>) -> Result<f64> {
    let to01 = |x: &Array2<f32>| x.mapv(|v| (f64::from(v) + 1.0) / 2.0);
    ssim(&to01(a), &to01(b))
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::invalid("spearman needs two equal-length series of length >= 2"));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_of_unit_vector() {
        let mut u = vec![0.0; 8];
        u[3] = 1.0;
        assert_eq!(poly_kernel(&u, &u), 1.423828125);
    }

    #[test]
    fn dice_closed_forms() {
        let m = |v: [u8; 4]| LabelMap::new(Array2::from_shape_vec((2, 2), v.to_vec()).unwrap(), 2).unwrap();
        let (dc, iou) = dice_iou(&m([1, 1, 0, 0]), &m([1, 0, 1, 0]), 1).unwrap();
        assert_eq!(dc, 0.5);
        assert!((iou - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(dice_iou(&m([1, 1, 0, 0]), &m([0, 0, 1, 1]), 1).unwrap(), (0.0, 0.0));
        assert_eq!(dice_iou(&m([0; 4]), &m([0; 4]), 1).unwrap(), (1.0, 1.0));
        assert_eq!(gdc(&m([1, 0, 1, 0]), &m([1, 0, 1, 0])).unwrap(), 1.0);
        assert!(dice_iou(&m([0; 4]), &LabelMap::new(Array2::zeros((1, 4)), 2).unwrap(), 1).is_err());
    }

    #[test]
    fn spearman_basics() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert_eq!(ranks(&[5.0, 1.0, 5.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = Array2::zeros((10, 20));
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn kid_argument_checks() {
        let a = FeatureSet::new(Array2::zeros((4, 3)), "a");
        let b = FeatureSet::new(Array2::zeros((4, 2)), "b");
        assert!(kid(&a, &b, 2, 1, 0).is_err());
        assert!(kid(&a, &a, 1, 1, 0).is_err());
        assert!(kid(&a, &a, 5, 1, 0).is_err());
    }
}
