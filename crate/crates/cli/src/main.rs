use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;

use segrenorm::data::io::{load_dataset, load_slices, write_image_png, write_mask_png, LoadedSlice};
use segrenorm::data::phantom::{generate_phantoms, PhantomSpec};
use segrenorm::data::{DatasetManifest, ManifestEntry, Split};
use segrenorm::eval::autoencoder::{train_feature_extractor, AutoencoderConfig, FeatureExtractor};
use segrenorm::eval::metrics::{dice_iou, KidParams};
use segrenorm::eval::posthoc::{train_segmentor, PosthocSegmentor, SegmentorConfig};
use segrenorm::eval::report::{evaluate_harmonization, EvaluationInputs};
use segrenorm::eval::sensitivity::sensitivity_curve;
use segrenorm::trainer::{harmonize_with_masks, load_bundle, train_with_progress, Direction, DEFAULT_SAVE_EVERY};
use segrenorm::{parse_config, Domain, Error};

mod plot;

pub const SEED_ENV: &str = "SEGRENORM_SEED";

#[derive(Debug, Parser)]
#[command(name = "segrenorm", version, about = "Segmentation-renormalized image harmonization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a two-scanner phantom dataset.
    Synth {
        /// Phantom spec JSON; defaults are used when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the translator.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "data-x")]
        data_x: PathBuf,
        #[arg(long = "data-y")]
        data_y: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "save-every", default_value_t = DEFAULT_SAVE_EVERY)]
        save_every: u64,
    },
    /// Translate every slice of a dataset.
    Harmonize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "forward")]
        direction: String,
        #[command(flatten)]
        split: SplitArg,
    },
    /// Distribution distances and segmentation scores before and after
    /// harmonization.
    Evaluate {
        /// Translator used to harmonize `--source` when `--harmonized` is
        /// not given.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        extractor: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        harmonized: Option<PathBuf>,
        /// Post-hoc target segmentor; segmentation scores are skipped without it.
        #[arg(long)]
        segmentor: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        split: SplitArg,
        #[arg(long = "kid-subset-size")]
        kid_subset_size: Option<usize>,
        #[arg(long = "kid-subsets", default_value_t = 100)]
        kid_subsets: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Reconstruction sensitivity to noise on the intermediate translation.
    Sensitivity {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        /// Comma-separated noise standard deviations.
        #[arg(long, default_value = "0,0.1,0.2,0.3,0.4,0.5", allow_hyphen_values = true)]
        sigmas: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        split: SplitArg,
        /// Use at most this many slices.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Train the multitask autoencoder used for FID and KID features.
    TrainExtractor {
        #[arg(long = "data-x")]
        data_x: PathBuf,
        #[arg(long = "data-y")]
        data_y: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: ExtractorOpts,
    },
    /// Train a standalone segmentor on one domain.
    TrainSegmentor {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: SegmentorOpts,
    },
}

#[derive(Debug, Args)]
struct SplitArg {
    /// `train`, `test` or `all`.
    #[arg(long = "split", default_value = "all")]
    split: String,
}

impl SplitArg {
    fn parse(&self) -> Result<Option<Split>, CliError> {
        match self.split.as_str() {
            "all" => Ok(None),
            s => s.parse().map(Some).map_err(CliError::from),
        }
    }
}

#[derive(Debug, Args)]
struct ExtractorOpts {
    #[arg(long, default_value_t = AutoencoderConfig::default().width)]
    width: usize,
    #[arg(long, default_value_t = AutoencoderConfig::default().levels)]
    levels: usize,
    #[arg(long = "batch-size", default_value_t = AutoencoderConfig::default().batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = AutoencoderConfig::default().lr)]
    lr: f64,
    #[arg(long = "constant-epochs", default_value_t = AutoencoderConfig::default().constant_epochs)]
    constant_epochs: usize,
    #[arg(long = "decay-epochs", default_value_t = AutoencoderConfig::default().decay_epochs)]
    decay_epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct SegmentorOpts {
    #[arg(long, default_value_t = SegmentorConfig::default().width)]
    width: usize,
    #[arg(long, default_value_t = SegmentorConfig::default().epochs)]
    epochs: usize,
    #[arg(long = "batch-size", default_value_t = SegmentorConfig::default().batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = SegmentorConfig::default().lr)]
    lr: f64,
    /// Comma-separated; uniform when omitted.
    #[arg(long = "class-weights")]
    class_weights: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Exit code and one-line message.
#[derive(Debug)]
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn user(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let flat: String = self.message.split_whitespace().collect::<Vec<_>>().join(" ");
        write!(f, "ERROR {}: {}", self.code, flat)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Tensor(_) | Error::Shape(_) | Error::NonFinite { .. } => 2,
            _ => 1,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn seed_override(default: u64) -> CliResult<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::user(format!("{SEED_ENV} must be a non-negative integer, got `{v}`"))),
        Err(_) => Ok(default),
    }
}

fn create_dir(p: &Path) -> CliResult<()> {
    std::fs::create_dir_all(p).map_err(|e| CliError::user(format!("cannot create {}: {e}", p.display())))
}

fn write_text(p: &Path, text: &str) -> CliResult<()> {
    std::fs::write(p, text).map_err(|e| CliError::user(format!("cannot write {}: {e}", p.display())))?;
    println!("wrote {}", p.display());
    Ok(())
}

fn load_manifest(p: &Path) -> CliResult<DatasetManifest> {
    Ok(DatasetManifest::load(p)?)
}

fn cmd_synth(spec: Option<PathBuf>, out: PathBuf) -> CliResult<()> {
    let mut spec = match spec {
        Some(p) => {
            let text = std::fs::read_to_string(&p).map_err(|e| CliError::user(format!("cannot read {}: {e}", p.display())))?;
            PhantomSpec::from_json(&text)?
        }
        None => PhantomSpec::default(),
    };
    spec.seed = seed_override(spec.seed)?;
    spec.validate()?;
    let (a, b) = generate_phantoms(&spec)?;
    for (ds, name) in [(&a, "source"), (&b, "target")] {
        let dir = out.join(name);
        ds.write(&dir)?;
        println!("wrote {} ({} samples)", dir.display(), ds.items.len());
    }
    let spec_json = serde_json::to_string_pretty(&spec).expect("spec serializes") + "\n";
    write_text(&out.join("phantom_spec.json"), &spec_json)
}

fn cmd_train(config: PathBuf, data_x: PathBuf, data_y: PathBuf, out: PathBuf, save_every: u64) -> CliResult<()> {
    let text = std::fs::read_to_string(&config).map_err(|e| CliError::user(format!("cannot read {}: {e}", config.display())))?;
    let mut cfg = parse_config(&text)?;
    cfg.seed = seed_override(cfg.seed)?;
    if cfg.iterations.is_none() {
        return Err(CliError::user("config must set `iterations` to train"));
    }
    let load = |p: &Path| -> CliResult<Vec<segrenorm::Sample>> {
        let m = load_manifest(p)?;
        if !m.has_masks() {
            return Err(CliError::user(format!(
                "{}: every training image needs a segmentation mask; the cross-supervised segmentation loss requires them",
                p.display()
            )));
        }
        if m.n_classes != cfg.n_classes {
            return Err(CliError::user(format!(
                "{}: dataset has {} classes but the config has n_classes = {}",
                p.display(),
                m.n_classes,
                cfg.n_classes
            )));
        }
        Ok(load_dataset(&m, Some(Split::Train))?)
    };
    let xs = load(&data_x)?;
    let ys = load(&data_y)?;

    println!("segrenorm train");
    println!(
        "lr_seg={} lr_gen={} lr_disc={} batch_size={} crop_size={} iterations={} class_weights={}",
        cfg.lr_seg,
        cfg.lr_gen,
        cfg.lr_disc,
        cfg.batch_size,
        cfg.crop_size,
        cfg.iterations.unwrap_or(0),
        cfg.loss_weights.class_weights.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(",")
    );
    print!("{}", cfg.to_text());
    println!("source slices={} target slices={}", xs.len(), ys.len());

    create_dir(&out)?;
    write_text(&out.join("config.txt"), &cfg.to_text())?;
    let outcome = train_with_progress(&cfg, &xs, &ys, &out, save_every, |step, l| {
        if step == 1 || step % 50 == 0 {
            eprintln!("step {step}: total={:.4} cyc={:.4} seg={:.4}", l.total, l.cyc, l.seg);
        }
    })?;
    println!("wrote {}", outcome.loss_log.display());
    println!("wrote {}", outcome.final_checkpoint.display());
    Ok(())
}

fn cmd_harmonize(checkpoint: PathBuf, input: PathBuf, out: PathBuf, direction: String, split: SplitArg) -> CliResult<()> {
    let direction: Direction = direction.parse()?;
    let split = split.parse()?;
    let bundle = load_bundle(&checkpoint)?;
    let m = load_manifest(&input)?;
    if m.domain != direction.from_domain() {
        log::warn!(
            "input domain is {} but direction {:?} expects {}",
            m.domain.as_str(),
            direction,
            direction.from_domain().as_str()
        );
    }
    let slices = load_slices(&m, split)?;
    let images: Vec<_> = slices.iter().map(|s| s.image.clone()).collect();
    let results = harmonize_with_masks(&bundle, &images, direction)?;

    let mut manifest = DatasetManifest::new(direction.from_domain().other(), bundle.shape.n_classes, &out);
    manifest.normalized = true;
    for sub in ["images", "conditioning"] {
        create_dir(&out.join(sub))?;
    }
    let entries: Vec<&ManifestEntry> = m.entries(split).collect();
    for ((src, res), entry) in slices.iter().zip(&results).zip(entries) {
        let image = format!("images/{}", src.file_name);
        write_image_png(&out.join(&image), &res.image.data)?;
        write_mask_png(&out.join("conditioning").join(&src.file_name), &res.mask)?;
        manifest.samples.push(ManifestEntry {
            image,
            mask: None,
            subject: entry.subject.clone(),
            split: entry.split,
            slice: entry.slice,
        });
    }
    manifest.save()?;
    println!("wrote {} ({} slices)", out.display(), results.len());
    Ok(())
}

fn key(s: &LoadedSlice) -> (String, usize) {
    (s.image.subject_id.clone(), s.image.slice_index)
}

#[allow(clippy::too_many_arguments)]
fn cmd_evaluate(
    checkpoint: Option<PathBuf>,
    extractor: PathBuf,
    source: PathBuf,
    target: PathBuf,
    harmonized: Option<PathBuf>,
    segmentor: Option<PathBuf>,
    out: PathBuf,
    split: SplitArg,
    kid: KidParams,
) -> CliResult<()> {
    let split = split.parse()?;
    let ae = FeatureExtractor::load(&extractor)?;
    let src = load_slices(&load_manifest(&source)?, split)?;
    let tgt = load_slices(&load_manifest(&target)?, split)?;
    let har: Vec<Array2<f32>> = match (&harmonized, &checkpoint) {
        (Some(h), _) => {
            let loaded = load_slices(&load_manifest(h)?, split)?;
            let mut by_key: HashMap<(String, usize), Array2<f32>> = loaded.into_iter().map(|s| (key(&s), s.image.data)).collect();
            src.iter()
                .map(|s| {
                    by_key.remove(&key(s)).ok_or_else(|| {
                        CliError::user(format!(
                            "harmonized set has no slice for subject `{}` slice {}",
                            s.image.subject_id, s.image.slice_index
                        ))
                    })
                })
                .collect::<CliResult<_>>()?
        }
        (None, Some(c)) => {
            let bundle = load_bundle(c)?;
            let images: Vec<_> = src.iter().map(|s| s.image.clone()).collect();
            harmonize_with_masks(&bundle, &images, Direction::Forward)?
                .into_iter()
                .map(|h| h.image.data)
                .collect()
        }
        (None, None) => return Err(CliError::user("give --harmonized or --checkpoint")),
    };
    let seg = segmentor.as_deref().map(PosthocSegmentor::load).transpose()?;
    let truth: Option<Vec<_>> = src.iter().map(|s| s.mask.clone()).collect();
    if seg.is_some() && truth.is_none() {
        eprintln!("warning: source masks missing; segmentation scores omitted");
    }
    if seg.is_none() {
        eprintln!("warning: no --segmentor given; segmentation scores omitted");
    }

    let s: Vec<&Array2<f32>> = src.iter().map(|s| &s.image.data).collect();
    let t: Vec<&Array2<f32>> = tgt.iter().map(|s| &s.image.data).collect();
    let h: Vec<&Array2<f32>> = har.iter().collect();
    let report = evaluate_harmonization(
        &ae,
        &EvaluationInputs {
            source: &s,
            target: &t,
            harmonized: &h,
            truth_masks: truth.as_deref(),
        },
        seg.as_ref(),
        &kid,
    )?;
    create_dir(&out)?;
    write_text(&out.join("report.json"), &report.to_json())?;
    write_text(&out.join("report.csv"), &report.to_csv())?;
    for r in &report.rows {
        println!("{}: kid={:.6}±{:.2e} fid={:.4}", r.pair, r.kid.mean, r.kid.std, r.fid);
    }
    Ok(())
}

fn parse_sigmas(s: &str) -> CliResult<Vec<f64>> {
    let sigmas = s
        .split(',')
        .map(|p| {
            let p = p.trim();
            p.parse::<f64>().map_err(|_| CliError::user(format!("invalid sigma `{p}`")))
        })
        .collect::<CliResult<Vec<_>>>()?;
    if let Some(bad) = sigmas.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(CliError::user(format!("sigmas must be finite and >= 0, got {bad}")));
    }
    Ok(sigmas)
}

#[allow(clippy::too_many_arguments)]
fn cmd_sensitivity(
    checkpoint: PathBuf,
    input: PathBuf,
    sigmas: String,
    seed: u64,
    out: PathBuf,
    split: SplitArg,
    limit: Option<usize>,
) -> CliResult<()> {
    let sigmas = parse_sigmas(&sigmas)?;
    let seed = seed_override(seed)?;
    let split = split.parse()?;
    let bundle = load_bundle(&checkpoint)?;
    let mut slices: Vec<_> = load_slices(&load_manifest(&input)?, split)?.into_iter().map(|s| s.image).collect();
    if let Some(n) = limit {
        slices.truncate(n);
    }
    let report = sensitivity_curve(&bundle, &slices, &sigmas, seed)?;
    create_dir(&out)?;
    write_text(&out.join("sensitivity.csv"), &report.to_csv())?;
    for (name, ys, label) in [
        ("s_mse.svg", &report.s_mse, "S_MSE"),
        ("s_ssim.svg", &report.s_ssim, "S_SSIM"),
    ] {
        let p = out.join(name);
        plot::line_plot(&p, &report.sigmas, ys, "sigma", label).map_err(|e| CliError {
            code: 2,
            message: format!("cannot draw {}: {e}", p.display()),
        })?;
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn cmd_train_extractor(data_x: PathBuf, data_y: PathBuf, out: PathBuf, o: ExtractorOpts) -> CliResult<()> {
    let cfg = AutoencoderConfig {
        width: o.width,
        levels: o.levels,
        batch_size: o.batch_size,
        lr: o.lr,
        constant_epochs: o.constant_epochs,
        decay_epochs: o.decay_epochs,
        seed: seed_override(o.seed)?,
    };
    cfg.validate()?;
    let xs = load_slices(&load_manifest(&data_x)?, Some(Split::Train))?;
    let ys = load_slices(&load_manifest(&data_y)?, Some(Split::Train))?;
    let mut images: Vec<(&Array2<f32>, Domain)> = xs.iter().map(|s| (&s.image.data, Domain::Source)).collect();
    images.extend(ys.iter().map(|s| (&s.image.data, Domain::Target)));
    if xs.is_empty() || ys.is_empty() {
        return Err(CliError::user("the extractor needs training images from both domains"));
    }
    println!("segrenorm train-extractor");
    println!(
        "lr={} batch={} epochs={}+{} width={} levels={} feature_dim={}",
        cfg.lr,
        cfg.batch_size,
        cfg.constant_epochs,
        cfg.decay_epochs,
        cfg.width,
        cfg.levels,
        cfg.feature_dim()
    );
    let (ae, log) = train_feature_extractor(&cfg, &images, |e| {
        eprintln!("epoch {}: lr={:.2e} l1={:.4} bce={:.4}", e.epoch, e.lr, e.l1, e.bce)
    })?;
    create_dir(&out)?;
    let ckpt = out.join("extractor.srnm");
    ae.to_checkpoint()?.save(&ckpt)?;
    println!("wrote {}", ckpt.display());
    let mut csv = String::from("epoch,lr,l1,bce\n");
    for e in &log {
        csv += &format!("{},{},{},{}\n", e.epoch, e.lr, e.l1, e.bce);
    }
    write_text(&out.join("extractor_log.csv"), &csv)
}

fn cmd_train_segmentor(data: PathBuf, out: PathBuf, o: SegmentorOpts) -> CliResult<()> {
    let m = load_manifest(&data)?;
    let class_weights = match &o.class_weights {
        Some(s) => s
            .split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|_| CliError::user(format!("invalid class weight `{p}`"))))
            .collect::<CliResult<Vec<_>>>()?,
        None => vec![1.0 / m.n_classes as f64; m.n_classes],
    };
    let cfg = SegmentorConfig {
        n_classes: m.n_classes,
        width: o.width,
        epochs: o.epochs,
        batch_size: o.batch_size,
        lr: o.lr,
        class_weights,
        seed: seed_override(o.seed)?,
    };
    cfg.validate()?;
    if !m.has_masks() {
        return Err(CliError::user(format!("{}: segmentor training needs masks", data.display())));
    }
    let train = load_dataset(&m, Some(Split::Train))?;
    println!("segrenorm train-segmentor");
    println!(
        "lr={} batch={} epochs={} width={} n_classes={} train slices={}",
        cfg.lr,
        cfg.batch_size,
        cfg.epochs,
        cfg.width,
        cfg.n_classes,
        train.len()
    );
    let (seg, losses) = train_segmentor(&cfg, &train, |e, l| eprintln!("epoch {e}: loss={l:.4}"))?;
    create_dir(&out)?;
    let ckpt = out.join("segmentor.srnm");
    seg.to_checkpoint()?.save(&ckpt)?;
    println!("wrote {}", ckpt.display());
    let csv: String = std::iter::once("epoch,loss\n".to_string())
        .chain(losses.iter().enumerate().map(|(e, l)| format!("{e},{l}\n")))
        .collect();
    write_text(&out.join("segmentor_log.csv"), &csv)?;

    let test = load_dataset(&m, Some(Split::Test))?;
    if !test.is_empty() {
        let mut dice = vec![0.0; cfg.n_classes];
        for s in &test {
            let p = seg.predict(&s.image.data)?;
            for (c, d) in dice.iter_mut().enumerate() {
                *d += dice_iou(&p, &s.mask, c as u8)?.0;
            }
        }
        let dice: Vec<f64> = dice.into_iter().map(|d| d / test.len() as f64).collect();
        let json = serde_json::json!({ "test_slices": test.len(), "dice": dice });
        println!("held-out dice per class: {dice:?}");
        write_text(&out.join("segmentor_eval.json"), &(serde_json::to_string_pretty(&json).expect("json") + "\n"))?;
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth { spec, out } => cmd_synth(spec, out),
        Command::Train {
            config,
            data_x,
            data_y,
            out,
            save_every,
        } => cmd_train(config, data_x, data_y, out, save_every),
        Command::Harmonize {
            checkpoint,
            input,
            out,
            direction,
            split,
        } => cmd_harmonize(checkpoint, input, out, direction, split),
        Command::Evaluate {
            checkpoint,
            extractor,
            source,
            target,
            harmonized,
            segmentor,
            out,
            split,
            kid_subset_size,
            kid_subsets,
            seed,
        } => {
            let kid = KidParams {
                subset_size: kid_subset_size,
                n_subsets: kid_subsets,
                seed: seed_override(seed)?,
            };
            cmd_evaluate(checkpoint, extractor, source, target, harmonized, segmentor, out, split, kid)
        }
        Command::Sensitivity {
            checkpoint,
            input,
            sigmas,
            seed,
            out,
            split,
            limit,
        } => cmd_sensitivity(checkpoint, input, sigmas, seed, out, split, limit),
        Command::TrainExtractor { data_x, data_y, out, opts } => cmd_train_extractor(data_x, data_y, out, opts),
        Command::TrainSegmentor { data, out, opts } => cmd_train_segmentor(data, out, opts),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", CliError::user(e.to_string()));
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code)
        }
    }
}
