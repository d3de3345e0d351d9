use ndarray::Array2;

pub const CLIP_LOW_PCT: f64 = 0.5;
pub const CLIP_HIGH_PCT: f64 = 99.5;

/// Percentile with linear interpolation between order statistics.
/// `sorted` must be ascending and non-empty.
pub fn percentile(sorted: &[f64], pct: f64) -> f64 {
    let rank = (pct / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Clips to the 0.5/99.5 percentiles, then maps the clipped range onto
/// `[-1, 1]`. A slice whose clipped range is empty becomes all zeros.
pub fn normalize_slice(raw: &Array2<f64>) -> Array2<f32> {
    if raw.is_empty() {
        return Array2::zeros(raw.dim());
    }
    let mut sorted: Vec<f64> = raw.iter().copied().collect();
    sorted.sort_by(f64::total_cmp);
    let lo = percentile(&sorted, CLIP_LOW_PCT);
    let hi = percentile(&sorted, CLIP_HIGH_PCT);
    if !(hi > lo) {
        return Array2::zeros(raw.dim());
    }
    let scale = 2.0 / (hi - lo);
    raw.mapv(|v| {
        let c = v.clamp(lo, hi);
        if c == hi {
            1.0
        } else {
            ((c - lo) * scale - 1.0) as f32
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_slice_is_zero() {
        let out = normalize_slice(&Array2::from_elem((8, 8), 1234.0));
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn percentile_matches_linear_interpolation() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert_eq!(percentile(&v, 100.0), 5.0);
        assert_eq!(percentile(&v, 50.0), 3.0);
        assert!((percentile(&v, 10.0) - 1.4).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn non_constant_hits_both_endpoints(v in proptest::collection::vec(0u16..4000, 64)) {
            let raw = Array2::from_shape_vec((8, 8), v.iter().map(|&x| x as f64).collect()).unwrap();
            let out = normalize_slice(&raw);
            let min = out.iter().cloned().fold(f32::INFINITY, f32::min);
            let max = out.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            prop_assert!(out.iter().all(|&x| (-1.0..=1.0).contains(&x)));
            if out.iter().any(|&x| x != 0.0) {
                prop_assert_eq!(min, -1.0);
                prop_assert_eq!(max, 1.0);
            }
        }
    }
}
