//! Deterministic two-scanner phantom generator.
//!
//! Both domains share one geometry stream: sample `i` has the same mask in
//! domain A and domain B and differs only in appearance (contrast lookup,
//! blur, noise).

use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::io::{write_mask_png, write_u16_png, DatasetManifest, ManifestEntry, Split};
use crate::data::normalize::normalize_slice;
use crate::error::{Error, Result};
use crate::types::{Domain, ImageSlice, LabelMap, Sample};

const BACKGROUND_LEVEL: f64 = 0.0;
const TISSUE_LEVEL: f64 = 0.45;
const TISSUE_JITTER: f64 = 0.08;
const SHADING: f64 = 0.05;
const LESION_LEVEL: f64 = 0.9;

/// Scanner appearance: a monotone piecewise-linear lookup over `[0, 1]`
/// followed by Gaussian blur and additive Gaussian noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Appearance {
    /// `(input, output)` knots with strictly increasing inputs.
    pub contrast: Vec<(f64, f64)>,
    #[serde(default)]
    pub blur_sigma: f64,
    #[serde(default)]
    pub noise_std: f64,
}

impl Appearance {
    pub fn validate(&self, which: &str) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(format!("{which}: {m}")));
        if self.contrast.len() < 2 {
            return bad("contrast lookup needs at least two knots".into());
        }
        if self.contrast.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return bad("contrast knots must be finite".into());
        }
        if self.contrast.windows(2).any(|w| w[1].0 <= w[0].0) {
            return bad("contrast knot inputs must be strictly increasing".into());
        }
        let rising = self.contrast.windows(2).all(|w| w[1].1 >= w[0].1);
        let falling = self.contrast.windows(2).all(|w| w[1].1 <= w[0].1);
        if !(rising || falling) {
            return bad("contrast lookup must be monotone".into());
        }
        if !(self.blur_sigma.is_finite() && (0.0..=16.0).contains(&self.blur_sigma)) {
            return bad(format!("blur_sigma must be in [0, 16], got {}", self.blur_sigma));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return bad(format!("noise_std must be >= 0, got {}", self.noise_std));
        }
        Ok(())
    }

    pub fn lookup(&self, x: f64) -> f64 {
        let k = &self.contrast;
        if x <= k[0].0 {
            return k[0].1;
        }
        for w in k.windows(2) {
            let ((x0, y0), (x1, y1)) = (w[0], w[1]);
            if x <= x1 {
                return y0 + (y1 - y0) * (x - x0) / (x1 - x0);
            }
        }
        k[k.len() - 1].1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub image_size: usize,
    pub n_samples: usize,
    /// Fraction of samples (taken from the end) assigned to the test split.
    pub test_fraction: f64,
    pub lesion_probability: f64,
    /// 2 folds lesions into the foreground class; 3 keeps them separate.
    pub n_classes: usize,
    pub domain_a: Appearance,
    pub domain_b: Appearance,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            n_samples: 200,
            test_fraction: 0.2,
            lesion_probability: 0.7,
            n_classes: 2,
            domain_a: Appearance {
                contrast: vec![(0.0, 0.0), (0.45, 0.35), (1.0, 1.0)],
                blur_sigma: 0.0,
                noise_std: 0.02,
            },
            domain_b: Appearance {
                contrast: vec![(0.0, 0.95), (0.45, 0.5), (1.0, 0.15)],
                blur_sigma: 1.0,
                noise_std: 0.04,
            },
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: PhantomSpec =
            serde_json::from_str(text).map_err(|e| Error::invalid(format!("malformed phantom spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(8..=1024).contains(&self.image_size) || self.image_size % 4 != 0 {
            return Err(Error::invalid(format!(
                "image_size must be a multiple of 4 in [8, 1024], got {}",
                self.image_size
            )));
        }
        if self.n_samples > 100_000 {
            return Err(Error::invalid("n_samples must be at most 100000"));
        }
        if !(0.0..=1.0).contains(&self.test_fraction) {
            return Err(Error::invalid("test_fraction must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.lesion_probability) {
            return Err(Error::invalid("lesion_probability must lie in [0, 1]"));
        }
        if !(2..=3).contains(&self.n_classes) {
            return Err(Error::invalid("n_classes must be 2 or 3"));
        }
        self.domain_a.validate("domain_a")?;
        self.domain_b.validate("domain_b")
    }

    pub fn n_test(&self) -> usize {
        ((self.n_samples as f64) * self.test_fraction).round() as usize
    }

    fn split_of(&self, i: usize) -> Split {
        if i >= self.n_samples - self.n_test() {
            Split::Test
        } else {
            Split::Train
        }
    }
}

/// Geometry shared by both domains for one sample index.
#[derive(Debug, Clone)]
pub struct PhantomGeometry {
    /// Noise-free base intensity in `[0, 1]`.
    pub base: Array2<f64>,
    pub mask: LabelMap,
    pub has_lesion: bool,
}

/// One generated slice as stored on disk: raw 16-bit intensities.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomItem {
    pub raw: Array2<u16>,
    pub mask: LabelMap,
    pub subject: String,
    pub split: Split,
    pub has_lesion: bool,
}

impl PhantomItem {
    /// The item as the loader would return it.
    pub fn to_sample(&self, domain: Domain) -> Sample {
        let image = ImageSlice::new(normalize_slice(&self.raw.mapv(f64::from)), domain, self.subject.clone(), 0);
        Sample {
            image,
            mask: self.mask.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomDataset {
    pub domain: Domain,
    pub n_classes: usize,
    pub items: Vec<PhantomItem>,
}

impl PhantomDataset {
    pub fn samples(&self, split: Option<Split>) -> Vec<Sample> {
        self.items
            .iter()
            .filter(|it| split.is_none_or(|s| it.split == s))
            .map(|it| it.to_sample(self.domain))
            .collect()
    }

    /// Writes `images/`, `masks/` and `manifest.json` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<DatasetManifest> {
        let mut manifest = DatasetManifest::new(self.domain, self.n_classes, dir);
        for sub in ["images", "masks"] {
            let d = dir.join(sub);
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        for it in &self.items {
            let image = format!("images/{}.png", it.subject);
            let mask = format!("masks/{}.png", it.subject);
            write_u16_png(&dir.join(&image), &it.raw)?;
            write_mask_png(&dir.join(&mask), &it.mask)?;
            manifest.samples.push(ManifestEntry {
                image,
                mask: Some(mask),
                subject: it.subject.clone(),
                split: it.split,
                slice: 0,
            });
        }
        manifest.save()?;
        Ok(manifest)
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn fill_ellipse(size: usize, cy: f64, cx: f64, ry: f64, rx: f64, theta: f64, mut f: impl FnMut(usize, usize)) {
    let (s, c) = theta.sin_cos();
    for i in 0..size {
        for j in 0..size {
            let (dy, dx) = (i as f64 + 0.5 - cy, j as f64 + 0.5 - cx);
            let u = c * dx + s * dy;
            let v = -s * dx + c * dy;
            if (u / rx).powi(2) + (v / ry).powi(2) <= 1.0 {
                f(i, j);
            }
        }
    }
}

/// Draws the geometry of sample `index`.
pub fn phantom_geometry(spec: &PhantomSpec, index: usize) -> PhantomGeometry {
    let n = spec.image_size;
    let sz = n as f64;
    let mut rng = stream_rng(spec.seed, 3 * index as u64);
    let mut base = Array2::from_elem((n, n), BACKGROUND_LEVEL);
    let mut labels = Array2::<u8>::zeros((n, n));

    // Smooth shading shared by every tissue region of this sample.
    let (gy, gx): (f64, f64) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let n_tissue = rng.random_range(1..=3);
    for _ in 0..n_tissue {
        let cy = rng.random_range(0.3..0.7) * sz;
        let cx = rng.random_range(0.3..0.7) * sz;
        let ry = rng.random_range(0.15..0.35) * sz;
        let rx = rng.random_range(0.15..0.35) * sz;
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let level = TISSUE_LEVEL + rng.random_range(-TISSUE_JITTER..TISSUE_JITTER);
        fill_ellipse(n, cy, cx, ry, rx, theta, |i, j| {
            let shade = SHADING * (gy * (i as f64 / sz - 0.5) + gx * (j as f64 / sz - 0.5));
            base[[i, j]] = level + shade;
            labels[[i, j]] = 1;
        });
    }

    let has_lesion = rng.random_bool(spec.lesion_probability);
    if has_lesion {
        let tissue: Vec<(usize, usize)> = labels.indexed_iter().filter(|(_, &l)| l == 1).map(|(p, _)| p).collect();
        let lesion_label = if spec.n_classes >= 3 { 2 } else { 1 };
        let n_lesions = rng.random_range(1..=2);
        for _ in 0..n_lesions {
            let (cy, cx) = if tissue.is_empty() {
                (rng.random_range(0.3..0.7) * sz, rng.random_range(0.3..0.7) * sz)
            } else {
                let (i, j) = tissue[rng.random_range(0..tissue.len())];
                (i as f64 + 0.5, j as f64 + 0.5)
            };
            let r = rng.random_range(0.04..0.08) * sz;
            let ratio = rng.random_range(0.7..1.0);
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            fill_ellipse(n, cy, cx, r, r * ratio, theta, |i, j| {
                base[[i, j]] = LESION_LEVEL;
                labels[[i, j]] = lesion_label;
            });
        }
    }

    PhantomGeometry {
        base,
        mask: LabelMap {
            labels,
            n_classes: spec.n_classes,
        },
        has_lesion,
    }
}

/// Separable Gaussian blur with edge replication.
pub fn gaussian_blur(img: &Array2<f64>, sigma: f64) -> Array2<f64> {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let (h, w) = img.dim();
    let pass = |src: &Array2<f64>, horizontal: bool| {
        Array2::from_shape_fn((h, w), |(i, j)| {
            kernel
                .iter()
                .enumerate()
                .map(|(k, &wt)| {
                    let d = k as isize - radius;
                    let (ii, jj) = if horizontal {
                        (i as isize, (j as isize + d).clamp(0, w as isize - 1))
                    } else {
                        ((i as isize + d).clamp(0, h as isize - 1), j as isize)
                    };
                    wt * src[[ii as usize, jj as usize]]
                })
                .sum()
        })
    };
    pass(&pass(img, true), false)
}

fn render(geom: &PhantomGeometry, look: &Appearance, rng: &mut ChaCha8Rng) -> Array2<u16> {
    let mapped = geom.base.mapv(|v| look.lookup(v));
    let blurred = gaussian_blur(&mapped, look.blur_sigma);
    let noise = Normal::new(0.0, look.noise_std.max(0.0)).expect("validated noise std");
    blurred.mapv(|v| {
        let v = if look.noise_std > 0.0 { v + noise.sample(rng) } else { v };
        (v.clamp(0.0, 1.0) * 65535.0).round() as u16
    })
}

/// Generates domain A (source) and domain B (target) from one seed.
pub fn generate_phantoms(spec: &PhantomSpec) -> Result<(PhantomDataset, PhantomDataset)> {
    spec.validate()?;
    let mut a = PhantomDataset {
        domain: Domain::Source,
        n_classes: spec.n_classes,
        items: Vec::with_capacity(spec.n_samples),
    };
    let mut b = PhantomDataset {
        domain: Domain::Target,
        n_classes: spec.n_classes,
        items: Vec::with_capacity(spec.n_samples),
    };
    for i in 0..spec.n_samples {
        let geom = phantom_geometry(spec, i);
        let subject = format!("p{i:05}");
        let split = spec.split_of(i);
        for (ds, look, stream) in [(&mut a, &spec.domain_a, 1), (&mut b, &spec.domain_b, 2)] {
            let mut rng = stream_rng(spec.seed, 3 * i as u64 + stream);
            ds.items.push(PhantomItem {
                raw: render(&geom, look, &mut rng),
                mask: geom.mask.clone(),
                subject: subject.clone(),
                split,
                has_lesion: geom.has_lesion,
            });
        }
    }
    Ok((a, b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PhantomSpec {
        PhantomSpec {
            n_samples: 12,
            image_size: 32,
            ..PhantomSpec::default()
        }
    }

    #[test]
    fn masks_shared_across_domains() {
        let (a, b) = generate_phantoms(&small()).unwrap();
        assert_eq!(a.items.len(), 12);
        for (x, y) in a.items.iter().zip(&b.items) {
            assert_eq!(x.mask, y.mask);
            assert_ne!(x.raw, y.raw);
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(generate_phantoms(&small()).unwrap(), generate_phantoms(&small()).unwrap());
        let other = PhantomSpec { seed: 1, ..small() };
        assert_ne!(generate_phantoms(&small()).unwrap().0, generate_phantoms(&other).unwrap().0);
    }

    #[test]
    fn lesion_frequency_tracks_probability() {
        let spec = PhantomSpec {
            n_samples: 1000,
            image_size: 16,
            ..PhantomSpec::default()
        };
        let hits = (0..spec.n_samples).filter(|&i| phantom_geometry(&spec, i).has_lesion).count();
        let freq = hits as f64 / 1000.0;
        assert!((freq - 0.7).abs() <= 0.05, "{freq}");
    }

    #[test]
    fn split_is_tail_fraction() {
        let (a, _) = generate_phantoms(&PhantomSpec { n_samples: 10, ..small() }).unwrap();
        let test = a.items.iter().filter(|i| i.split == Split::Test).count();
        assert_eq!(test, 2);
        assert_eq!(a.items[9].split, Split::Test);
        assert_eq!(a.items[0].split, Split::Train);
    }

    #[test]
    fn three_class_keeps_lesions_separate() {
        let spec = PhantomSpec {
            n_classes: 3,
            lesion_probability: 1.0,
            ..small()
        };
        let (a, _) = generate_phantoms(&spec).unwrap();
        assert!(a.items.iter().all(|it| it.mask.count(2) > 0));
    }

    #[test]
    fn blur_preserves_constant() {
        let img = Array2::from_elem((9, 7), 0.25);
        let out = gaussian_blur(&img, 1.5);
        assert!(out.iter().all(|v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn spec_json_defaults_and_rejection() {
        let spec = PhantomSpec::from_json(r#"{"n_samples": 5, "seed": 3}"#).unwrap();
        assert_eq!(spec.image_size, 64);
        assert_eq!(spec.seed, 3);
        assert!(PhantomSpec::from_json(r#"{"image_size": 30}"#).is_err());
        assert!(PhantomSpec::from_json(r#"{"bogus": 1}"#).is_err());
        assert!(PhantomSpec::from_json(r#"{"domain_a": {"contrast": [[0,0],[0.5,1],[1,0]]}}"#).is_err());
    }

    #[test]
    fn empty_dataset_is_valid() {
        let (a, b) = generate_phantoms(&PhantomSpec { n_samples: 0, ..small() }).unwrap();
        assert!(a.items.is_empty() && b.items.is_empty());
    }
}
