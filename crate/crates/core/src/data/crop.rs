use ndarray::s;
use rand::Rng;

use crate::error::{Error, Result};
use crate::types::{ImageSlice, LabelMap, Sample};

/// Crops image and mask at the same uniformly drawn offset. Returns the crop
/// and its `(row, col)` offset.
pub fn random_paired_crop<R: Rng + ?Sized>(sample: &Sample, size: usize, rng: &mut R) -> Result<(Sample, (usize, usize))> {
    let (h, w) = sample.image.dims();
    if size == 0 || size > h || size > w {
        return Err(Error::invalid(format!("crop size {size} does not fit a {h}x{w} sample")));
    }
    let oy = rng.random_range(0..=h - size);
    let ox = rng.random_range(0..=w - size);
    Ok((crop_at(sample, size, oy, ox), (oy, ox)))
}

pub fn crop_at(sample: &Sample, size: usize, oy: usize, ox: usize) -> Sample {
    let window = s![oy..oy + size, ox..ox + size];
    Sample {
        image: ImageSlice {
            data: sample.image.data.slice(window).to_owned(),
            ..sample.image.clone()
        },
        mask: LabelMap {
            labels: sample.mask.labels.slice(window).to_owned(),
            n_classes: sample.mask.n_classes,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Domain;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Sample {
        let img = Array2::from_shape_fn((12, 10), |(i, j)| (i * 10 + j) as f32);
        let mask = Array2::from_shape_fn((12, 10), |(i, j)| ((i * 7 + j * 3) % 2) as u8);
        Sample::new(ImageSlice::new(img, Domain::Source, "a", 0), LabelMap::new(mask, 2).unwrap()).unwrap()
    }

    #[test]
    fn full_size_is_identity() {
        let s = sample();
        let sq = crop_at(&s, 10, 0, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (c, off) = random_paired_crop(&sq, 10, &mut rng).unwrap();
        assert_eq!(off, (0, 0));
        assert_eq!(c, sq);
    }

    #[test]
    fn alignment_and_determinism() {
        let s = sample();
        let (a, (oy, ox)) = random_paired_crop(&s, 4, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let (b, off_b) = random_paired_crop(&s, 4, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
        assert_eq!((oy, ox), off_b);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(a.mask.labels[[i, j]], s.mask.labels[[i + oy, j + ox]]);
                assert_eq!(a.image.data[[i, j]], s.image.data[[i + oy, j + ox]]);
            }
        }
    }

    #[test]
    fn oversize_rejected() {
        assert!(random_paired_crop(&sample(), 11, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
