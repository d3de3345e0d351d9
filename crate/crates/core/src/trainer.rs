//! End-to-end optimization of the translator bundle and harmonization
//! inference.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::data::crop::random_paired_crop;
use crate::error::{Error, Result};
use crate::losses::{
    cycle_loss, lsgan_discriminator_loss, lsgan_generator_loss, scalar, total_objective, weighted_ce_seg_loss, LabelBatch,
    LossBreakdown, LossParts, SegPredictions,
};
use crate::model::{BundleShape, ModelBundle, DISC_PREFIXES, GEN_PREFIXES, SEG_PREFIXES};
use crate::nets::segmentor::{argmax_labels, SIZE_MULTIPLE};
use crate::nets::DiscMode;
use crate::optim::Adam;
use crate::types::{Domain, ImageSlice, LabelMap, Sample};

pub const TRANSLATOR_KIND: &str = "translator";
pub const LOSS_LOG: &str = "losses.csv";
pub const FINAL_CHECKPOINT: &str = "final.srnm";
pub const DEFAULT_SAVE_EVERY: u64 = 500;

const PARAM_PREFIX: &str = "param.";
const OPT_PREFIXES: [&str; 3] = ["opt.seg", "opt.gen", "opt.disc"];

/// Stacks equally sized slices into an `N × 1 × H × W` tensor.
pub fn images_to_tensor(images: &[&Array2<f32>], dtype: DType) -> Result<Tensor> {
    let Some(first) = images.first() else {
        return Err(Error::shape("empty image batch"));
    };
    let (h, w) = first.dim();
    let mut flat = Vec::with_capacity(images.len() * h * w);
    for img in images {
        if img.dim() != (h, w) {
            return Err(Error::shape(format!("batch mixes {h}x{w} and {:?} images", img.dim())));
        }
        flat.extend(img.iter().copied());
    }
    Ok(Tensor::from_vec(flat, (images.len(), 1, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Inverse of [`images_to_tensor`].
pub fn tensor_to_images(t: &Tensor) -> Result<Vec<Array2<f32>>> {
    let (n, c, h, w) = t.dims4()?;
    if c != 1 {
        return Err(Error::shape(format!("expected 1 channel, got {c}")));
    }
    let flat = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok(flat
        .chunks(h * w)
        .take(n)
        .map(|c| Array2::from_shape_vec((h, w), c.to_vec()).expect("chunk size"))
        .collect())
}

/// Images and one-hot labels for one domain.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor,
    pub labels: LabelBatch,
}

impl Batch {
    pub fn from_samples(samples: &[Sample], n_classes: usize, dtype: DType) -> Result<Self> {
        let imgs: Vec<&Array2<f32>> = samples.iter().map(|s| &s.image.data).collect();
        let masks: Vec<&LabelMap> = samples.iter().map(|s| &s.mask).collect();
        Ok(Self {
            images: images_to_tensor(&imgs, dtype)?,
            labels: LabelBatch::new(&masks, n_classes, dtype)?,
        })
    }

    pub fn len(&self) -> usize {
        self.images.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Fakes and segmentations from the first half of a step.
struct Forward {
    gx: Tensor,
    fy: Tensor,
    m_x: Option<Tensor>,
    m_y: Option<Tensor>,
}

fn needs_segmentors(cfg: &TrainConfig) -> bool {
    cfg.ablation_renorm || cfg.ablation_segloss
}

fn forward_translate(bundle: &ModelBundle, cfg: &TrainConfig, x: &Tensor, y: &Tensor) -> Result<Forward> {
    if !needs_segmentors(cfg) {
        return Ok(Forward {
            gx: bundle.g.translate(x, None)?,
            fy: bundle.f.translate(y, None)?,
            m_x: None,
            m_y: None,
        });
    }
    let tx = bundle.translate(Domain::Source, x, cfg.detach_embedding)?;
    let ty = bundle.translate(Domain::Target, y, cfg.detach_embedding)?;
    Ok(Forward {
        gx: tx.output,
        fy: ty.output,
        m_x: Some(tx.mask_probs),
        m_y: Some(ty.mask_probs),
    })
}

/// Discriminator losses on `[real; fake]` stacked along the batch, so the
/// power iteration advances once per step.
fn discriminator_losses(bundle: &ModelBundle, x: &Tensor, y: &Tensor, fwd: &Forward) -> Result<(Tensor, Tensor)> {
    let n = x.dims()[0];
    let score = |d: &crate::nets::Discriminator, real: &Tensor, fake: &Tensor| -> Result<Tensor> {
        let both = Tensor::cat(&[real, &fake.detach()], 0)?;
        let out = d.discriminate(&both, DiscMode::TRAIN)?;
        lsgan_discriminator_loss(&out.narrow(0, 0, n)?, &out.narrow(0, n, n)?)
    };
    Ok((score(&bundle.d_x, x, &fwd.fy)?, score(&bundle.d_y, y, &fwd.gx)?))
}

/// Generator-side objective: λ-weighted adversarial, cycle and segmentation
/// terms with the discriminators frozen.
pub struct GeneratorObjective {
    pub objective: Tensor,
    pub gan_g: Tensor,
    pub gan_f: Tensor,
    pub cyc: Tensor,
    /// `None` when the segmentation loss is disabled.
    pub seg: Option<Tensor>,
}

fn generator_side(bundle: &ModelBundle, cfg: &TrainConfig, x: &Batch, y: &Batch, fwd: &Forward) -> Result<GeneratorObjective> {
    let gan_g = lsgan_generator_loss(&bundle.d_y.discriminate(&fwd.gx, DiscMode::FROZEN)?)?;
    let gan_f = lsgan_generator_loss(&bundle.d_x.discriminate(&fwd.fy, DiscMode::FROZEN)?)?;

    let (fgx, gfy, seg) = if needs_segmentors(cfg) {
        let seg_input = |t: &Tensor| if cfg.detach_translated_for_seg { t.detach() } else { t.clone() };
        let m_gx = bundle.q.segment(&seg_input(&fwd.gx))?;
        let m_fy = bundle.s.segment(&seg_input(&fwd.fy))?;
        let back_x = bundle.translate_with_mask(Domain::Target, &fwd.gx, m_gx.clone(), cfg.detach_embedding)?;
        let back_y = bundle.translate_with_mask(Domain::Source, &fwd.fy, m_fy.clone(), cfg.detach_embedding)?;
        let seg = if cfg.ablation_segloss {
            let pred = SegPredictions {
                s_x: fwd.m_x.as_ref().expect("segmentors ran"),
                q_gx: &m_gx,
                q_y: fwd.m_y.as_ref().expect("segmentors ran"),
                s_fy: &m_fy,
            };
            Some(weighted_ce_seg_loss(pred, &x.labels, &y.labels, &cfg.loss_weights.class_weights)?)
        } else {
            None
        };
        (back_x.output, back_y.output, seg)
    } else {
        (bundle.f.translate(&fwd.gx, None)?, bundle.g.translate(&fwd.fy, None)?, None)
    };
    let cyc = cycle_loss(&x.images, &fgx, &y.images, &gfy)?;

    let w = &cfg.loss_weights;
    let mut objective = (((&gan_g + &gan_f)? * w.lambda_gan)? + (&cyc * w.lambda_cyc)?)?;
    if let Some(seg) = &seg {
        objective = (objective + (seg * cfg.effective_lambda_seg())?)?;
    }
    Ok(GeneratorObjective {
        objective,
        gan_g,
        gan_f,
        cyc,
        seg,
    })
}

/// Builds the generator-side objective for one pair of batches without
/// touching any state. Used to inspect gradient routing.
pub fn generator_objective(bundle: &ModelBundle, cfg: &TrainConfig, x: &Batch, y: &Batch) -> Result<GeneratorObjective> {
    let fwd = forward_translate(bundle, cfg, &x.images, &y.images)?;
    generator_side(bundle, cfg, x, y, &fwd)
}

fn finite_or_abort(step: u64, terms: &[(&'static str, f64)]) -> Result<()> {
    for &(term, v) in terms {
        if !v.is_finite() {
            return Err(Error::NonFinite { term, step });
        }
    }
    Ok(())
}

/// Bundle, optimizer moments and sampling state.
#[derive(Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub bundle: ModelBundle,
    pub step: u64,
    pub opt_seg: Adam,
    pub opt_gen: Adam,
    pub opt_disc: Adam,
    pub rng: ChaCha8Rng,
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    config: TrainConfig,
    shape: BundleShape,
    rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        Self::with_dtype(config, DType::F32)
    }

    pub fn with_dtype(config: &TrainConfig, dtype: DType) -> Result<Self> {
        config.validate()?;
        let bundle = ModelBundle::from_config(config, dtype)?;
        let (b1, b2) = (config.adam_beta1, config.adam_beta2);
        let opt_seg = Adam::new(bundle.store.trainable_with_prefix(&SEG_PREFIXES), config.lr_seg, b1, b2)?;
        let opt_gen = Adam::new(bundle.store.trainable_with_prefix(&GEN_PREFIXES), config.lr_gen, b1, b2)?;
        let opt_disc = Adam::new(bundle.store.trainable_with_prefix(&DISC_PREFIXES), config.lr_disc, b1, b2)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            config: config.clone(),
            bundle,
            step: 0,
            opt_seg,
            opt_gen,
            opt_disc,
            rng,
        })
    }

    /// One full update: discriminators on the current fakes, then a joint
    /// step of generators, extractors and segmentors.
    pub fn train_step(&mut self, x: &Batch, y: &Batch) -> Result<LossBreakdown> {
        if x.len() != y.len() {
            return Err(Error::shape(format!("batch sizes differ: {} vs {}", x.len(), y.len())));
        }
        let step = self.step + 1;
        let cfg = &self.config;
        let fwd = forward_translate(&self.bundle, cfg, &x.images, &y.images)?;

        let (dx, dy) = discriminator_losses(&self.bundle, &x.images, &y.images, &fwd)?;
        let (gan_dx, gan_dy) = (scalar(&dx)?, scalar(&dy)?);
        finite_or_abort(step, &[("gan_dx", gan_dx), ("gan_dy", gan_dy)])?;
        let grads = (dx + dy)?.backward()?;
        self.opt_disc.step(&grads)?;

        let obj = generator_side(&self.bundle, cfg, x, y, &fwd)?;
        let parts = LossParts {
            gan_g: scalar(&obj.gan_g)?,
            gan_f: scalar(&obj.gan_f)?,
            gan_dx,
            gan_dy,
            cyc: scalar(&obj.cyc)?,
            seg: obj.seg.as_ref().map(scalar).transpose()?.unwrap_or(0.0),
        };
        finite_or_abort(
            step,
            &[("gan_g", parts.gan_g), ("gan_f", parts.gan_f), ("cyc", parts.cyc), ("seg", parts.seg)],
        )?;
        let mut weights = cfg.loss_weights.clone();
        weights.lambda_seg = cfg.effective_lambda_seg();
        let breakdown = total_objective(&parts, &weights)?;

        let grads = obj.objective.backward()?;
        self.opt_gen.step(&grads)?;
        self.opt_seg.step(&grads)?;
        self.step = step;
        Ok(breakdown)
    }

    /// Draws `batch_size` paired crops from each domain independently.
    pub fn sample_batches(&mut self, xs: &[Sample], ys: &[Sample]) -> Result<(Batch, Batch)> {
        let cfg = &self.config;
        let draw = |pool: &[Sample], rng: &mut ChaCha8Rng| -> Result<Batch> {
            let picks = (0..cfg.batch_size)
                .map(|_| {
                    let s = &pool[rng.random_range(0..pool.len())];
                    random_paired_crop(s, cfg.crop_size, rng).map(|(c, _)| c)
                })
                .collect::<Result<Vec<_>>>()?;
            Batch::from_samples(&picks, cfg.n_classes, self.bundle.store.dtype())
        };
        let bx = draw(xs, &mut self.rng)?;
        let by = draw(ys, &mut self.rng)?;
        Ok((bx, by))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = StateMeta {
            config: self.config.clone(),
            shape: self.bundle.shape,
            rng: self.rng.clone(),
        };
        let meta = serde_json::to_value(&meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut ckpt = Checkpoint::new(TRANSLATOR_KIND, self.step, meta);
        self.bundle.store.write_to(&mut ckpt, PARAM_PREFIX)?;
        for (opt, prefix) in [&self.opt_seg, &self.opt_gen, &self.opt_disc].into_iter().zip(OPT_PREFIXES) {
            opt.write_to(&mut ckpt, prefix)?;
        }
        Ok(ckpt)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(TRANSLATOR_KIND)?;
        let meta: StateMeta =
            serde_json::from_value(ckpt.metadata.clone()).map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
        if meta.shape != BundleShape::from_config(&meta.config) {
            return Err(Error::Checkpoint("stored shape disagrees with stored config".into()));
        }
        let mut state = Self::new(&meta.config)?;
        state.bundle.store.read_from(ckpt, PARAM_PREFIX)?;
        for (opt, prefix) in [&mut state.opt_seg, &mut state.opt_gen, &mut state.opt_disc].into_iter().zip(OPT_PREFIXES) {
            opt.read_from(ckpt, prefix, ckpt.step)?;
        }
        state.step = ckpt.step;
        state.rng = meta.rng;
        Ok(state)
    }
}

/// Loads just the networks of a translator checkpoint.
pub fn load_bundle(path: &Path) -> Result<ModelBundle> {
    let ckpt = Checkpoint::load(path)?;
    Ok(TrainState::from_checkpoint(&ckpt)?.bundle)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// `G: X → Y`
    Forward,
    /// `F: Y → X`
    Backward,
}

impl Direction {
    pub fn from_domain(self) -> Domain {
        match self {
            Direction::Forward => Domain::Source,
            Direction::Backward => Domain::Target,
        }
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(Direction::Forward),
            "backward" => Ok(Direction::Backward),
            other => Err(Error::invalid(format!("direction must be `forward` or `backward`, got `{other}`"))),
        }
    }
}

/// A translated slice with the predicted mask that conditioned it.
#[derive(Debug, Clone)]
pub struct Harmonized {
    pub image: ImageSlice,
    pub mask: LabelMap,
}

/// Segments `image` (`1 × 1 × H × W`), padding by edge replication up to the
/// segmentor's size multiple and cropping the probabilities back.
pub fn segment_padded(segmentor: &crate::nets::Segmentor, image: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = image.dims4()?;
    let pad = |n: usize| (SIZE_MULTIPLE - n % SIZE_MULTIPLE) % SIZE_MULTIPLE;
    let (ph, pw) = (pad(h), pad(w));
    let padded = image.pad_with_same(2, 0, ph)?.pad_with_same(3, 0, pw)?;
    let probs = segmentor.segment(&padded)?;
    Ok(probs.narrow(2, 0, h)?.narrow(3, 0, w)?)
}

/// Translates each slice with the conditioning mask predicted from the slice
/// itself.
pub fn harmonize_with_masks(bundle: &ModelBundle, slices: &[ImageSlice], direction: Direction) -> Result<Vec<Harmonized>> {
    let from = direction.from_domain();
    let (segmentor, _) = bundle.conditioner(from);
    slices
        .iter()
        .map(|slice| {
            slice.check_translatable()?;
            let x = images_to_tensor(&[&slice.data], bundle.store.dtype())?;
            let probs = segment_padded(segmentor, &x)?;
            let t = bundle.translate_with_mask(from, &x, probs, true)?;
            let data = tensor_to_images(&t.output)?.remove(0);
            let labels = argmax_labels(&t.mask_probs)?.remove(0);
            Ok(Harmonized {
                image: ImageSlice {
                    data,
                    domain: from.other(),
                    subject_id: slice.subject_id.clone(),
                    slice_index: slice.slice_index,
                },
                mask: LabelMap::new(labels, bundle.shape.n_classes)?,
            })
        })
        .collect()
}

pub fn harmonize(bundle: &ModelBundle, slices: &[ImageSlice], direction: Direction) -> Result<Vec<ImageSlice>> {
    Ok(harmonize_with_masks(bundle, slices, direction)?.into_iter().map(|h| h.image).collect())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub loss_log: PathBuf,
    pub losses: Vec<LossBreakdown>,
}

fn save_state(state: &TrainState, path: &Path) -> Result<()> {
    state.to_checkpoint()?.save(path)
}

/// Runs `config.iterations` steps over random paired crops. Writes
/// `losses.csv`, `step_XXXXXX.srnm` every `save_every` steps (0 disables) and
/// `final.srnm`.
pub fn train(config: &TrainConfig, xs: &[Sample], ys: &[Sample], out_dir: &Path, save_every: u64) -> Result<TrainOutcome> {
    train_with_progress(config, xs, ys, out_dir, save_every, |_, _| {})
}

pub fn train_with_progress(
    config: &TrainConfig,
    xs: &[Sample],
    ys: &[Sample],
    out_dir: &Path,
    save_every: u64,
    mut progress: impl FnMut(u64, &LossBreakdown),
) -> Result<TrainOutcome> {
    let iterations = config
        .iterations
        .ok_or_else(|| Error::invalid("`iterations` must be set in the config to train"))?;
    config.validate()?;
    if config.crop_size % SIZE_MULTIPLE != 0 {
        return Err(Error::invalid(format!(
            "crop_size must be a multiple of {SIZE_MULTIPLE} for the segmentors, got {}",
            config.crop_size
        )));
    }
    for (name, set) in [("source", xs), ("target", ys)] {
        if set.is_empty() {
            return Err(Error::Dataset(format!("{name} dataset is empty")));
        }
        if let Some(s) = set.iter().find(|s| s.mask.n_classes != config.n_classes) {
            return Err(Error::Dataset(format!(
                "{name} sample `{}` has {} classes, config expects {}",
                s.image.subject_id, s.mask.n_classes, config.n_classes
            )));
        }
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut state = TrainState::new(config)?;
    let loss_log = out_dir.join(LOSS_LOG);
    let file = File::create(&loss_log).map_err(|e| Error::io(&loss_log, e))?;
    let mut log = BufWriter::new(file);
    writeln!(log, "{}", LossBreakdown::CSV_HEADER).map_err(|e| Error::io(&loss_log, e))?;

    let mut losses = Vec::with_capacity(iterations as usize);
    for _ in 0..iterations {
        let (bx, by) = state.sample_batches(xs, ys)?;
        let l = state.train_step(&bx, &by)?;
        writeln!(log, "{}", l.csv_row(state.step)).map_err(|e| Error::io(&loss_log, e))?;
        progress(state.step, &l);
        losses.push(l);
        if save_every > 0 && state.step % save_every == 0 && state.step != iterations {
            save_state(&state, &out_dir.join(format!("step_{:06}.srnm", state.step)))?;
        }
    }
    log.flush().map_err(|e| Error::io(&loss_log, e))?;
    if !state.bundle.store.all_finite()? {
        return Err(Error::NonFinite {
            term: "parameters",
            step: state.step,
        });
    }
    let final_checkpoint = out_dir.join(FINAL_CHECKPOINT);
    save_state(&state, &final_checkpoint)?;
    Ok(TrainOutcome {
        final_checkpoint,
        loss_log,
        losses,
    })
}
