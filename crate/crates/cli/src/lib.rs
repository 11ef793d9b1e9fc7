//! `coatnet` command-line runs.
//!
//! Every subcommand resolves its settings into one flat `key=value` map:
//! values from `--config` first, then command-line flags on top. The resolved
//! map is written to `run-meta.txt` in the output directory, and passing that
//! file back through `--config` repeats the run.
//!
//! Exit status is 0 on success, 1 for invalid input (bad flags, config,
//! manifest or missing files) and 2 when the work itself fails.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use coatnet_core::config::KeyValues;
use coatnet_core::data::{
    assign_splits, augment, decode_image, load_manifest, load_subset, make_batches,
    resize_bilinear, save_png, AugmentationConfig, DatasetManifest, Split, DEFAULT_TEST_PER_GROUP,
    DEFAULT_VAL_FRACTION,
};
use coatnet_core::gradcam::{compute_gradcam, render_overlay};
use coatnet_core::plot::{save_confusion, save_pr_curves};
use coatnet_core::taxonomy::LesionClass;
use coatnet_core::train::{evaluate, fit, TrainConfig};
use coatnet_core::{build_model, load_checkpoint, Error, Model, ModelConfig, Result};

pub const RUN_META: &str = "run-meta.txt";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_LOG: &str = "train_log.csv";

#[derive(Parser)]
#[command(name = "coatnet", version, about = "Train, evaluate and explain the hybrid lesion classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// key=value file; flags given on the command line take precedence
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Assign train/val/test splits and rewrite the manifest in place
    Split {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        test_per_group: Option<usize>,
        #[arg(long)]
        val_fraction: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Fit a model on the manifest's train split, validating on its val split
    Train {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Augment training images
        #[arg(long)]
        augment: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Metrics report, confusion matrix and PR curves for one split
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Split to evaluate (default: test)
        #[arg(long)]
        split: Option<String>,
        /// Score the three lesion groups instead of the seven classes
        #[arg(long)]
        map3: bool,
        /// Also draw PR curves and the confusion matrix as PNG
        #[arg(long)]
        plots: bool,
        #[arg(long)]
        batch_size: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Class probabilities for individual images
    Predict {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        images: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Grad-CAM heatmap overlay for each image
    Gradcam {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Class name or index to explain (default: the predicted class)
        #[arg(long)]
        target: Option<String>,
        images: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Write augmented variants of one image
    AugmentPreview {
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(short = 'n', long = "count")]
        n: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
}

/// Parses `args` (program name first), runs the command and returns the exit
/// status. Diagnostics go to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("coatnet: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

/// Keys any command may read from a config file, besides `image.<i>` and
/// the `augment.*` family.
const KNOWN_KEYS: &[&str] = &[
    "command", "seed", "out", "manifest", "checkpoint", "split", "map3", "plots", "target",
    "test_per_group", "val_fraction", "n", "image", "epochs", "batch_size", "lr", "momentum",
    "weight_decay", "class_weighting", "augment", "stages", "num_classes", "input_channels",
    "input_height", "input_width",
];

/// Settings for one run: config-file values overlaid with flags.
struct Settings {
    command: &'static str,
    kv: KeyValues,
}

impl Settings {
    fn load(command: &'static str, common: &Common) -> Result<Self> {
        let mut kv = match &common.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| Error::Usage(format!("cannot read config {}: {e}", path.display())))?;
                KeyValues::parse(&text)?
            }
            None => KeyValues::new(),
        };
        for key in kv.keys() {
            let known = KNOWN_KEYS.contains(&key)
                || key.starts_with("augment.")
                || key.strip_prefix("image.").is_some_and(|i| i.parse::<usize>().is_ok());
            if !known {
                return Err(Error::Config(format!("unknown config key {key:?}")));
            }
        }
        if let Some(c) = kv.get("command") {
            if c != command {
                return Err(Error::Usage(format!("config was written by `{c}`, not `{command}`")));
            }
        }
        kv.set("command", command);
        let mut s = Settings { command, kv };
        s.flag("seed", common.seed);
        s.flag("out", common.out.as_ref().map(|p| p.display()));
        Ok(s)
    }

    fn flag(&mut self, key: &str, value: Option<impl std::fmt::Display>) {
        if let Some(v) = value {
            self.kv.set(key, v);
        }
    }

    fn switch(&mut self, key: &str, on: bool) {
        if on {
            self.kv.set(key, true);
        }
    }

    fn images(&mut self, images: &[PathBuf]) {
        if images.is_empty() {
            return;
        }
        let stale: Vec<String> = self.kv.keys().filter(|k| k.starts_with("image.")).map(String::from).collect();
        for k in stale {
            self.kv.remove(&k);
        }
        for (i, p) in images.iter().enumerate() {
            self.kv.set(&format!("image.{i}"), p.display());
        }
    }

    fn image_list(&self) -> Result<Vec<PathBuf>> {
        let mut indexed: Vec<(usize, PathBuf)> = self
            .kv
            .keys()
            .filter_map(|k| k.strip_prefix("image.").and_then(|i| i.parse().ok()))
            .map(|i: usize| (i, PathBuf::from(self.kv.get(&format!("image.{i}")).unwrap())))
            .collect();
        indexed.sort_by_key(|(i, _)| *i);
        if indexed.is_empty() {
            return Err(Error::Usage(format!("`{}` needs at least one image", self.command)));
        }
        indexed.into_iter().map(|(_, p)| existing(p)).collect()
    }

    fn seed(&self) -> Result<u64> {
        self.kv.parse_or("seed", 0)
    }

    fn bool(&self, key: &str) -> Result<bool> {
        self.kv.parse_or(key, false)
    }

    fn path(&self, key: &str) -> Result<PathBuf> {
        match self.kv.get(key) {
            Some(p) => existing(PathBuf::from(p)),
            None => Err(Error::Usage(format!("`{}` needs --{key}", self.command))),
        }
    }

    fn out_dir(&self) -> Result<PathBuf> {
        let out = PathBuf::from(self.kv.get("out").unwrap_or("."));
        fs::create_dir_all(&out)
            .map_err(|e| Error::Usage(format!("cannot create {}: {e}", out.display())))?;
        Ok(out)
    }

    fn write_meta(&self, dir: &Path) -> Result<()> {
        write(dir.join(RUN_META), self.kv.render())
    }
}

fn existing(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::Usage(format!("{} does not exist", path.display())))
    }
}

fn write(path: impl AsRef<Path>, contents: impl AsRef<[u8]>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Manifest problems are bad input, whatever stage reports them.
fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    load_manifest(path).map_err(|e| match e {
        Error::Format(m) | Error::Corruption(m) => Error::Usage(format!("{}: {m}", path.display())),
        Error::Io { path, source } => Error::Usage(format!("{}: {source}", path.display())),
        other => other,
    })
}

fn read_checkpoint(path: &Path) -> Result<Model> {
    load_checkpoint(path).map_err(|e| match e {
        Error::Format(m) | Error::Integrity(m) => Error::Usage(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn class_names(model: &Model) -> Vec<String> {
    if model.num_classes() == LesionClass::ALL.len() {
        LesionClass::names()
    } else {
        (0..model.num_classes()).map(|c| format!("class{c}")).collect()
    }
}

fn require_lesion_classes(model: &Model) -> Result<()> {
    if model.num_classes() != LesionClass::ALL.len() {
        return Err(Error::Config(format!(
            "manifest labels use the seven lesion classes; the model has {}",
            model.num_classes()
        )));
    }
    Ok(())
}

/// Decodes `path` and resizes it to the model's input extent.
fn model_input(model: &Model, path: &Path) -> Result<coatnet_core::Tensor> {
    let (_, h, w) = model.config().input;
    resize_bilinear(&decode_image(path)?, h, w)
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Split { manifest, test_per_group, val_fraction, common } => {
            let mut s = Settings::load("split", &common)?;
            s.flag("manifest", manifest.map(|p| p.display().to_string()));
            s.flag("test_per_group", test_per_group);
            s.flag("val_fraction", val_fraction);
            split(&s)
        }
        Command::Train { manifest, epochs, batch_size, lr, augment, common } => {
            let mut s = Settings::load("train", &common)?;
            s.flag("manifest", manifest.map(|p| p.display().to_string()));
            s.flag("epochs", epochs);
            s.flag("batch_size", batch_size);
            s.flag("lr", lr);
            s.switch("augment", augment);
            train(s)
        }
        Command::Eval { checkpoint, manifest, split, map3, plots, batch_size, common } => {
            let mut s = Settings::load("eval", &common)?;
            s.flag("checkpoint", checkpoint.map(|p| p.display().to_string()));
            s.flag("manifest", manifest.map(|p| p.display().to_string()));
            s.flag("split", split);
            s.switch("map3", map3);
            s.switch("plots", plots);
            s.flag("batch_size", batch_size);
            eval(&s)
        }
        Command::Predict { checkpoint, images, common } => {
            let mut s = Settings::load("predict", &common)?;
            s.flag("checkpoint", checkpoint.map(|p| p.display().to_string()));
            s.images(&images);
            predict(&s)
        }
        Command::Gradcam { checkpoint, target, images, common } => {
            let mut s = Settings::load("gradcam", &common)?;
            s.flag("checkpoint", checkpoint.map(|p| p.display().to_string()));
            s.flag("target", target);
            s.images(&images);
            gradcam(&s)
        }
        Command::AugmentPreview { image, n, common } => {
            let mut s = Settings::load("augment-preview", &common)?;
            s.flag("image", image.map(|p| p.display().to_string()));
            s.flag("n", n);
            augment_preview(&s)
        }
    }
}

fn split(s: &Settings) -> Result<()> {
    let path = s.path("manifest")?;
    let manifest = read_manifest(&path)?;
    let per_group = s.kv.parse_or("test_per_group", DEFAULT_TEST_PER_GROUP)?;
    let val_fraction = s.kv.parse_or("val_fraction", DEFAULT_VAL_FRACTION)?;
    let assigned = assign_splits(&manifest, per_group, val_fraction, s.seed()?)?;
    assigned.write(&path)?;
    let mut meta = Settings { command: s.command, kv: s.kv.clone() };
    meta.kv.set("test_per_group", per_group);
    meta.kv.set("val_fraction", val_fraction);
    meta.kv.set("seed", s.seed()?);
    let out = match s.kv.get("out") {
        Some(_) => s.out_dir()?,
        None => path.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    meta.write_meta(&out)
}

fn train(mut s: Settings) -> Result<()> {
    let manifest = read_manifest(&s.path("manifest")?)?;
    let out = s.out_dir()?;
    let seed = s.seed()?;
    s.kv.set("seed", seed);

    let model_cfg = ModelConfig::from_key_values(&s.kv, &ModelConfig::desk(LesionClass::ALL.len(), seed))?;
    let defaults = TrainConfig {
        seed,
        checkpoint: Some(out.join(CHECKPOINT_FILE)),
        augmentation: Some(AugmentationConfig { seed, ..AugmentationConfig::default() }),
        ..TrainConfig::default()
    };
    // `augment` is off unless asked for, but the augmentation defaults above
    // seed from the run seed when it is
    let mut kv = s.kv.clone();
    if !kv.contains("augment") {
        kv.set("augment", false);
    }
    let train_cfg = TrainConfig::from_key_values(&kv, &defaults)?;
    model_cfg.write_key_values(&mut s.kv);
    train_cfg.write_key_values(&mut s.kv);

    let mut model = build_model(&model_cfg)?;
    require_lesion_classes(&model)?;
    let (_, h, w) = model_cfg.input;
    let train = load_subset(&manifest, Split::Train, h, w)?;
    if train.is_empty() {
        return Err(Error::Usage("manifest has no train records; run `split` first".into()));
    }
    let val = load_subset(&manifest, Split::Val, h, w)?;
    let outcome = fit(&mut model, &train, (!val.is_empty()).then_some(&val), &train_cfg)?;
    write(out.join(TRAIN_LOG), outcome.log.to_csv())?;
    s.write_meta(&out)
}

fn eval(s: &Settings) -> Result<()> {
    let model = read_checkpoint(&s.path("checkpoint")?)?;
    let manifest = read_manifest(&s.path("manifest")?)?;
    let out = s.out_dir()?;
    require_lesion_classes(&model)?;
    let split: Split = s.kv.get("split").unwrap_or("test").parse().map_err(|e| match e {
        Error::Format(m) => Error::Usage(m),
        other => other,
    })?;
    let batch_size = s.kv.parse_or("batch_size", TrainConfig::default().batch_size)?;
    let map3 = s.bool("map3")?;
    let (_, h, w) = model.config().input;
    let subset = load_subset(&manifest, split, h, w)?;
    if subset.is_empty() {
        return Err(Error::Usage(format!("manifest has no {split} records")));
    }
    let batches = make_batches(&subset, batch_size, None, None)?;
    let result = evaluate(&model, &batches, &class_names(&model), map3)?;

    write(out.join("report.csv"), result.report.to_csv())?;
    write(out.join("confusion.csv"), result.confusion.to_csv())?;
    for curve in &result.curves {
        write(out.join(format!("pr_{}.csv", curve.class)), curve.to_csv())?;
    }
    if s.bool("plots")? {
        save_pr_curves(&result.curves, out.join("pr_curves.png"))?;
        save_confusion(&result.confusion, out.join("confusion.png"))?;
    }
    let mut meta = Settings { command: s.command, kv: s.kv.clone() };
    meta.kv.set("split", split);
    meta.kv.set("batch_size", batch_size);
    meta.write_meta(&out)
}

fn predict(s: &Settings) -> Result<()> {
    let model = read_checkpoint(&s.path("checkpoint")?)?;
    let images = s.image_list()?;
    let out = s.out_dir()?;
    let names = class_names(&model);
    let mut csv = String::from("image,predicted");
    for n in &names {
        let _ = write!(csv, ",{n}");
    }
    csv.push('\n');
    for path in &images {
        let probs = model.predict_proba(&model_input(&model, path)?)?;
        let best = (0..probs.len()).fold(0, |b, i| if probs[i] > probs[b] { i } else { b });
        let _ = write!(csv, "{},{}", path.display(), names[best]);
        for p in probs {
            let _ = write!(csv, ",{p:.6}");
        }
        csv.push('\n');
    }
    write(out.join("predictions.csv"), csv)?;
    s.write_meta(&out)
}

fn resolve_target(target: Option<&str>, names: &[String]) -> Result<Option<usize>> {
    let Some(t) = target else { return Ok(None) };
    if let Some(i) = names.iter().position(|n| n == t) {
        return Ok(Some(i));
    }
    match t.parse::<usize>() {
        Ok(i) if i < names.len() => Ok(Some(i)),
        _ => Err(Error::Usage(format!("unknown target class {t:?}"))),
    }
}

fn gradcam(s: &Settings) -> Result<()> {
    let model = read_checkpoint(&s.path("checkpoint")?)?;
    let images = s.image_list()?;
    let out = s.out_dir()?;
    let names = class_names(&model);
    let fixed = resolve_target(s.kv.get("target"), &names)?;
    for (i, path) in images.iter().enumerate() {
        let input = model_input(&model, path)?;
        let target = match fixed {
            Some(t) => t,
            None => {
                let p = model.predict_proba(&input)?;
                (0..p.len()).fold(0, |b, c| if p[c] > p[b] { c } else { b })
            }
        };
        let map = compute_gradcam(&model, &input, target)?;
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let base = format!("{i:03}_{stem}_{}", names[target]);
        render_overlay(&map, &decode_image(path)?, out.join(format!("{base}.png")))?;
        write(out.join(format!("{base}.csv")), map.to_csv())?;
    }
    s.write_meta(&out)
}

fn augment_preview(s: &Settings) -> Result<()> {
    let path = s.path("image")?;
    let out = s.out_dir()?;
    let seed = s.seed()?;
    let cfg = AugmentationConfig::from_key_values(
        &s.kv,
        &AugmentationConfig { seed, ..AugmentationConfig::default() },
    )?;
    let n: usize = s.kv.parse_or("n", 5)?;
    let image = decode_image(&path)?;
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    for i in 0..n {
        save_png(&augment(&image, &cfg, i as u64)?, out.join(format!("{stem}_aug{i}.png")))?;
    }
    let mut meta = Settings { command: s.command, kv: s.kv.clone() };
    meta.kv.set("n", n);
    meta.kv.set("seed", seed);
    cfg.write_key_values(&mut meta.kv);
    meta.write_meta(&out)
}
