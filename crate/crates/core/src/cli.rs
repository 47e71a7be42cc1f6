//! Command-line front end: `train`, `attack`, `evaluate`, `export`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::attack::{blv1_attack, blv2_attack, mi_face, AttackConfig, AttackResult, Method, Reconstruction};
use crate::checkpoint::{load_checkpoint, save_checkpoint, TrainMeta};
use crate::config::{ConfigFile, Settings};
use crate::data::{load_event_dir, load_mnist_idx, shuffle_split, synth_dataset, synth_event_dataset, Geometry, SYNTH_SIDE};
use crate::encoding::{bin_events, bin_events_pooled, EventStream, StaticImage};
use crate::error::{Error, Result};
use crate::io::{matrix_from_csv, matrix_to_csv, read_raster, to_gray, write_pgm, write_raster};
use crate::metrics::{score, MetricsReport};
use crate::model::{build_model, Model, ModelKind, ModelSpec, Scale};
use crate::train::{derive_seed, train, Sample, TrainConfig};

const SECTIONS: &[&str] = &["train", "attack", "evaluate", "export"];

#[derive(Debug, Parser)]
#[command(name = "spikeinv", version, about = "Train spiking/conventional networks, invert them, score the leakage")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a target or evaluation model and write a checkpoint.
    Train(TrainArgs),
    /// Run a model-inversion attack against a checkpoint.
    Attack(AttackArgs),
    /// Score attack results with an evaluation model.
    Evaluate(EvaluateArgs),
    /// Write a grid image of rate-decoded reconstructions.
    Export(ExportArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Config file with a [train] section; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// snn-mlp, ann-mlp, snn-cnn or ann-cnn.
    #[arg(long)]
    pub preset: Option<String>,
    /// mnist, synth, synth-events or events.
    #[arg(long)]
    pub dataset: Option<String>,
    /// desk or full.
    #[arg(long)]
    pub scale: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Seed of the train/validation split and synthetic data.
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[arg(long)]
    pub data_dir: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Time steps (rate-encoding length or event windows).
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub train_samples: Option<usize>,
    #[arg(long)]
    pub val_samples: Option<usize>,
    /// Synthetic samples per class.
    #[arg(long)]
    pub per_class: Option<usize>,
    /// Event polarity kept when binning (1 or -1).
    #[arg(long, allow_hyphen_values = true)]
    pub polarity: Option<i8>,
    /// Spatial pooling factor for event binning.
    #[arg(long)]
    pub pool: Option<usize>,
    /// Event sensor extents for `--dataset events`.
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub out: Option<String>,
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// miface, blv1 or blv2.
    #[arg(long)]
    pub method: Option<String>,
    /// Target checkpoint.
    #[arg(long)]
    pub target: Option<String>,
    /// `all` or a comma-separated class list.
    #[arg(long)]
    pub classes: Option<String>,
    #[arg(long)]
    pub iterations: Option<usize>,
    /// NES population size.
    #[arg(long = "K", alias = "population")]
    pub population: Option<usize>,
    #[arg(long)]
    pub xi: Option<f64>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub init: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub stop_confidence: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<String>,
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Evaluation checkpoint.
    #[arg(long)]
    pub evaluator: Option<String>,
    /// Attack output directory.
    #[arg(long)]
    pub results: Option<String>,
    /// Report directory (defaults to the results directory).
    #[arg(long)]
    pub out: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub results: Option<String>,
    /// Output image (defaults to `<results>/grid.pgm`).
    #[arg(long)]
    pub out: Option<String>,
    /// Which emitted sample of each class to show.
    #[arg(long)]
    pub sample: Option<usize>,
}

/// Parses arguments, runs the command and maps failures to exit codes.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Attack(a) => cmd_attack(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Export(a) => cmd_export(a),
    }
}

fn settings(command: &str, defaults: &[(&str, &str)], config: Option<&Path>, flags: Vec<(&str, Option<String>)>) -> Result<Settings> {
    let mut s = Settings::new(command, defaults);
    if let Some(path) = config {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        s.apply_file(&ConfigFile::parse(&text)?, SECTIONS)?;
    }
    for (k, v) in flags {
        if let Some(v) = v {
            s.set(k, &v)?;
        }
    }
    Ok(s)
}

fn opt<T: ToString>(v: Option<T>) -> Option<String> {
    v.map(|x| x.to_string())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn with_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))?;
    Ok(pool.install(f))
}

const TRAIN_DEFAULTS: &[(&str, &str)] = &[
    ("preset", "snn-mlp"),
    ("dataset", "mnist"),
    ("scale", "desk"),
    ("seed", "0"),
    ("data_seed", "1"),
    ("data_dir", "data/mnist"),
    ("epochs", ""),
    ("batch_size", ""),
    ("lr", ""),
    ("steps", ""),
    ("train_samples", ""),
    ("val_samples", ""),
    ("per_class", "100"),
    ("polarity", "1"),
    ("pool", "1"),
    ("width", "16"),
    ("height", "16"),
    ("out", "out/train"),
    ("workers", "1"),
];

/// Labelled data ready for a model: image side lengths, class count and split.
pub struct Prepared {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub steps: usize,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

fn find_mnist(dir: &Path) -> Result<(PathBuf, PathBuf)> {
    for (i, l) in [
        ("images-idx3-ubyte", "labels-idx1-ubyte"),
        ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    ] {
        let (i, l) = (dir.join(i), dir.join(l));
        if i.is_file() && l.is_file() {
            return Ok((i, l));
        }
    }
    Err(Error::Format(format!("no MNIST IDX files in {}", dir.display())))
}

fn split(samples: Vec<Sample>, val: usize, limit: Option<usize>, seed: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if val >= samples.len() {
        return Err(Error::Config(format!(
            "validation size {val} leaves no training data out of {}",
            samples.len()
        )));
    }
    let (tr, va) = shuffle_split(samples.len(), val, seed);
    let tr = tr.iter().take(limit.unwrap_or(usize::MAX)).map(|&i| samples[i].clone()).collect();
    let va = va.iter().map(|&i| samples[i].clone()).collect();
    Ok((tr, va))
}

fn bin(ev: &EventStream, steps: usize, polarity: i8, pool: usize) -> Result<crate::encoding::SpikeTrain> {
    if pool > 1 {
        bin_events_pooled(ev, steps, polarity, pool)
    } else {
        bin_events(ev, steps, polarity)
    }
}

/// Loads and splits the dataset named in `[train]` settings.
pub fn prepare_dataset(s: &Settings) -> Result<Prepared> {
    let data_seed: u64 = s.parse("data_seed")?;
    let per_class: usize = s.parse("per_class")?;
    let limit: Option<usize> = s.optional("train_samples")?;
    let val: Option<usize> = s.optional("val_samples")?;
    let steps: Option<usize> = s.optional("steps")?;
    let images = |imgs: Vec<StaticImage>| imgs.into_iter().map(Sample::Image).collect::<Vec<_>>();
    match s.get("dataset") {
        "mnist" => {
            let (i, l) = find_mnist(Path::new(s.get("data_dir")))?;
            let all = images(load_mnist_idx(&i, &l)?);
            let (train, val) = split(all, val.unwrap_or(1000), limit, data_seed)?;
            Ok(Prepared {
                height: 28,
                width: 28,
                classes: 10,
                steps: steps.unwrap_or(25),
                train,
                val,
            })
        }
        "synth" => {
            let all = images(synth_dataset(10, per_class, Geometry::Shapes, data_seed)?);
            let n = all.len();
            let (train, val) = split(all, val.unwrap_or(n / 5), limit, data_seed)?;
            Ok(Prepared {
                height: SYNTH_SIDE,
                width: SYNTH_SIDE,
                classes: 10,
                steps: steps.unwrap_or(25),
                train,
                val,
            })
        }
        name @ ("synth-events" | "events") => {
            let steps = steps.unwrap_or(10);
            let polarity: i8 = s.parse("polarity")?;
            let pool: usize = s.parse("pool")?;
            let streams = if name == "events" {
                load_event_dir(Path::new(s.get("data_dir")), s.parse("width")?, s.parse("height")?)?
            } else {
                synth_event_dataset(4, per_class, data_seed)?
            };
            let (w, h) = streams
                .first()
                .map(|(e, _)| (e.width, e.height))
                .ok_or_else(|| Error::Format("event dataset is empty".into()))?;
            let classes = streams.iter().map(|(_, y)| y + 1).max().unwrap_or(0);
            let all = streams
                .iter()
                .map(|(e, y)| Ok(Sample::Spikes(bin(e, steps, polarity, pool)?, *y)))
                .collect::<Result<Vec<_>>>()?;
            let n = all.len();
            let (train, val) = split(all, val.unwrap_or(n / 5), limit, data_seed)?;
            Ok(Prepared {
                height: h / pool.max(1),
                width: w / pool.max(1),
                classes,
                steps,
                train,
                val,
            })
        }
        other => Err(Error::Config(format!("unknown dataset `{other}`"))),
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let s = settings(
        "train",
        TRAIN_DEFAULTS,
        a.config.as_deref(),
        vec![
            ("preset", a.preset),
            ("dataset", a.dataset),
            ("scale", a.scale),
            ("seed", opt(a.seed)),
            ("data_seed", opt(a.data_seed)),
            ("data_dir", a.data_dir),
            ("epochs", opt(a.epochs)),
            ("batch_size", opt(a.batch_size)),
            ("lr", opt(a.lr)),
            ("steps", opt(a.steps)),
            ("train_samples", opt(a.train_samples)),
            ("val_samples", opt(a.val_samples)),
            ("per_class", opt(a.per_class)),
            ("polarity", opt(a.polarity)),
            ("pool", opt(a.pool)),
            ("width", opt(a.width)),
            ("height", opt(a.height)),
            ("out", a.out),
            ("workers", opt(a.workers)),
        ],
    )?;
    let kind = ModelKind::parse(s.get("preset"))?;
    let scale = Scale::parse(s.get("scale"))?;
    let seed: u64 = s.parse("seed")?;
    let workers: usize = s.parse("workers")?;
    let data = prepare_dataset(&s)?;
    let mut spec = ModelSpec::preset(kind, data.height, data.width, data.classes, scale);
    if kind.is_spiking() {
        spec.steps = data.steps;
    }
    let cfg = TrainConfig {
        epochs: s.optional("epochs")?.unwrap_or(match (s.get("dataset"), kind) {
            ("mnist", ModelKind::SnnCnn) => 2,
            ("mnist", ModelKind::AnnCnn) => 3,
            _ => 10,
        }),
        batch_size: s.optional("batch_size")?.unwrap_or(if kind.is_conv() { 32 } else { 64 }),
        learning_rate: s.optional("lr")?.unwrap_or(if kind.is_conv() { 2e-3 } else { 1e-3 }),
        seed,
    };
    let out = PathBuf::from(s.get("out"));
    create_dir(&out)?;
    write(&out.join("train_config.txt"), &s.render())?;
    let mut model = build_model(&spec, seed)?;
    println!(
        "training {kind} ({} parameters) on {} samples, {} validation",
        spec.param_count()?,
        data.train.len(),
        data.val.len()
    );
    let history = with_pool(workers, || train(&mut model, &data.train, &data.val, &cfg))??;
    let mut csv = String::from("epoch,train_loss,val_accuracy\n");
    for h in &history {
        csv.push_str(&format!("{},{:?},{:?}\n", h.epoch, h.train_loss, h.val_accuracy));
        println!("epoch {:>3}  loss {:.4}  val acc {:.2}%", h.epoch, h.train_loss, 100.0 * h.val_accuracy);
    }
    write(&out.join("history.csv"), &csv)?;
    let meta = TrainMeta {
        seed,
        epochs: cfg.epochs,
        val_accuracy: history.last().map_or(f64::NAN, |h| h.val_accuracy),
    };
    save_checkpoint(&model, &meta, &out.join("model.ckpt"))?;
    println!("wrote {}", out.join("model.ckpt").display());
    Ok(())
}

const ATTACK_DEFAULTS: &[(&str, &str)] = &[
    ("method", "blv2"),
    ("target", ""),
    ("classes", "all"),
    ("iterations", "2000"),
    ("population", "8"),
    ("xi", ""),
    ("eta", ""),
    ("rho", "0.9"),
    ("beta", "0.9"),
    ("samples", "20"),
    ("init", "0.5"),
    ("patience", "20"),
    ("stop_confidence", "0.99"),
    ("seed", "0"),
    ("out", "out/attack"),
    ("workers", "1"),
];

fn parse_classes(text: &str, classes: usize) -> Result<Vec<usize>> {
    if text == "all" {
        return Ok((0..classes).collect());
    }
    let mut out = Vec::new();
    for part in text.split(',') {
        let c: usize = part
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad class `{part}`")))?;
        if c >= classes {
            return Err(Error::Config(format!("class {c} out of range for {classes} classes")));
        }
        if !out.contains(&c) {
            out.push(c);
        }
    }
    Ok(out)
}

fn read_kv(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect())
}

fn kv_get<'a>(kv: &'a [(String, String)], key: &str, path: &Path) -> Result<&'a str> {
    kv.iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| Error::Format(format!("{} is missing `{key}`", path.display())))
}

fn time_mean(values: &[f64], steps: usize, features: usize) -> Vec<f64> {
    (0..features)
        .map(|f| (0..steps).map(|t| values[t * features + f]).sum::<f64>() / steps as f64)
        .collect()
}

fn write_result(dir: &Path, model: &Model, r: &AttackResult, seed: u64) -> Result<()> {
    create_dir(dir)?;
    let spec = &model.spec;
    let (h, w) = (spec.height, spec.width);
    let gray = |v: &[f64]| v.iter().map(|&x| to_gray(x)).collect::<Vec<_>>();
    for (i, s) in r.spike_samples.iter().enumerate() {
        write_raster(&dir.join(format!("sample_{i}.csv")), s)?;
        write_pgm(&dir.join(format!("sample_{i}.pgm")), w, h, &gray(&s.rate_decode()))?;
    }
    for (i, img) in r.image_samples.iter().enumerate() {
        write(&dir.join(format!("image_{i}.csv")), &matrix_to_csv(h, w, img))?;
        write_pgm(&dir.join(format!("sample_{i}.pgm")), w, h, &gray(img))?;
    }
    match &r.reconstruction {
        Reconstruction::Params(xp) => {
            write(&dir.join("xp.csv"), &matrix_to_csv(spec.steps, spec.features(), xp))?;
            write_pgm(&dir.join("reconstruction.pgm"), w, h, &gray(&time_mean(xp, spec.steps, spec.features())))?;
        }
        Reconstruction::Spikes(s) => write_pgm(&dir.join("reconstruction.pgm"), w, h, &gray(&s.rate_decode()))?,
        Reconstruction::Image(img) => write_pgm(&dir.join("reconstruction.pgm"), w, h, &gray(img))?,
    }
    let mut trace = String::from("iteration,loss,best_loss\n");
    for (i, (l, b)) in r.loss_trace.iter().zip(&r.best_trace).enumerate() {
        trace.push_str(&format!("{},{l:?},{b:?}\n", i + 1));
    }
    write(&dir.join("loss_trace.csv"), &trace)?;
    let samples = r.spike_samples.len() + r.image_samples.len();
    write(
        &dir.join("result.txt"),
        &format!(
            "class = {}\nmethod = {}\niterations = {}\nconfidence = {:?}\nfinal_best_confidence = {:?}\nsamples = {samples}\nseed = {seed}\n",
            r.target,
            r.method,
            r.iterations(),
            r.confidence,
            r.final_best_confidence
        ),
    )
}

fn cmd_attack(a: AttackArgs) -> Result<()> {
    let s = settings(
        "attack",
        ATTACK_DEFAULTS,
        a.config.as_deref(),
        vec![
            ("method", a.method),
            ("target", a.target),
            ("classes", a.classes),
            ("iterations", opt(a.iterations)),
            ("population", opt(a.population)),
            ("xi", opt(a.xi)),
            ("eta", opt(a.eta)),
            ("rho", opt(a.rho)),
            ("beta", opt(a.beta)),
            ("samples", opt(a.samples)),
            ("init", opt(a.init)),
            ("patience", opt(a.patience)),
            ("stop_confidence", opt(a.stop_confidence)),
            ("seed", opt(a.seed)),
            ("out", a.out),
            ("workers", opt(a.workers)),
        ],
    )?;
    let method = Method::parse(s.get("method"))?;
    if s.get("target").is_empty() {
        return Err(Error::Config("attack needs --target".into()));
    }
    let target_path = PathBuf::from(s.get("target"));
    let model = load_checkpoint(&target_path)?.model;
    if method.needs_spiking_target() != model.is_spiking() {
        return Err(Error::Config(format!(
            "{method} cannot attack a {} checkpoint",
            model.spec.kind
        )));
    }
    let classes = parse_classes(s.get("classes"), model.spec.classes)?;
    let seed: u64 = s.parse("seed")?;
    let defaults = AttackConfig::for_method(method);
    let base = AttackConfig {
        iterations: s.parse("iterations")?,
        population: s.parse("population")?,
        xi: s.optional("xi")?.unwrap_or(defaults.xi),
        eta: s.optional("eta")?.unwrap_or(defaults.eta),
        rho: s.parse("rho")?,
        beta: s.parse("beta")?,
        samples: s.parse("samples")?,
        init: s.parse("init")?,
        patience: s.parse("patience")?,
        stop_confidence: s.parse("stop_confidence")?,
        ..defaults
    };
    base.validate(model.spec.classes)?;
    let out = PathBuf::from(s.get("out"));
    create_dir(&out)?;
    write(&out.join("attack_config.txt"), &s.render())?;
    let workers: usize = s.parse("workers")?;
    let results = with_pool(workers, || {
        classes
            .par_iter()
            .map(|&c| {
                let cfg = AttackConfig {
                    target: c,
                    seed: derive_seed(seed, c as u64),
                    ..base.clone()
                };
                let r = match method {
                    Method::MiFace => mi_face(&model, &cfg),
                    Method::Blv1 => blv1_attack(&model, &cfg),
                    Method::Blv2 => blv2_attack(&model, &cfg),
                }?;
                if !r.is_finite() {
                    return Err(Error::AttackNan(format!("{method} produced NaN for class {c}")));
                }
                Ok((r, cfg.seed))
            })
            .collect::<Vec<Result<_>>>()
    })?;
    let file_name = target_path.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
    let class_list = classes.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
    for r in results {
        let (r, cseed) = r?;
        write_result(&out.join(format!("class_{}", r.target)), &model, &r, cseed)?;
        println!(
            "class {:>2}: {} iterations, target confidence {:.4}",
            r.target,
            r.iterations(),
            r.confidence
        );
    }
    let spec = &model.spec;
    write(
        &out.join("meta.txt"),
        &format!(
            "method = {method}\ntarget = {file_name}\nkind = {}\nheight = {}\nwidth = {}\nsteps = {}\nclasses = {class_list}\nseed = {seed}\n",
            spec.kind, spec.height, spec.width, spec.steps
        ),
    )?;
    println!("wrote results for {} classes to {}", classes.len(), out.display());
    Ok(())
}

/// Attack results read back from an `attack` output directory.
pub struct ResultSet {
    pub method: Method,
    pub meta: Vec<(String, String)>,
    pub height: usize,
    pub width: usize,
    pub steps: usize,
    pub classes: Vec<usize>,
    pub samples: Vec<Sample>,
}

pub fn load_results(dir: &Path) -> Result<ResultSet> {
    let meta_path = dir.join("meta.txt");
    if !meta_path.is_file() {
        return Err(Error::Format(format!("{} has no meta.txt", dir.display())));
    }
    let meta = read_kv(&meta_path)?;
    let num = |k: &str| -> Result<usize> {
        kv_get(&meta, k, &meta_path)?
            .parse()
            .map_err(|_| Error::Format(format!("bad `{k}` in {}", meta_path.display())))
    };
    let method = Method::parse(kv_get(&meta, "method", &meta_path)?).map_err(|e| Error::Format(e.to_string()))?;
    let (height, width, steps) = (num("height")?, num("width")?, num("steps")?);
    let classes: Vec<usize> = kv_get(&meta, "classes", &meta_path)?
        .split(',')
        .map(|c| c.trim().parse().map_err(|_| Error::Format("bad class list in meta.txt".into())))
        .collect::<Result<_>>()?;
    let mut samples = Vec::new();
    for &c in &classes {
        let cdir = dir.join(format!("class_{c}"));
        let result = cdir.join("result.txt");
        if !result.is_file() {
            return Err(Error::Format(format!("missing results for class {c} ({})", cdir.display())));
        }
        let kv = read_kv(&result)?;
        let n: usize = kv_get(&kv, "samples", &result)?
            .parse()
            .map_err(|_| Error::Format(format!("bad sample count in {}", result.display())))?;
        for i in 0..n {
            let raster = cdir.join(format!("sample_{i}.csv"));
            let image = cdir.join(format!("image_{i}.csv"));
            let sample = if raster.is_file() {
                Sample::Spikes(read_raster(&raster)?, c)
            } else if image.is_file() {
                let text = fs::read_to_string(&image).map_err(|e| Error::io(&image, e))?;
                let (_, _, px) = matrix_from_csv(&text)?;
                Sample::Image(StaticImage::new(height, width, px, c).map_err(|e| Error::Format(e.to_string()))?)
            } else {
                return Err(Error::Format(format!("class {c} is missing sample {i}")));
            };
            samples.push(sample);
        }
    }
    Ok(ResultSet {
        method,
        meta,
        height,
        width,
        steps,
        classes,
        samples,
    })
}

const EVALUATE_DEFAULTS: &[(&str, &str)] = &[("evaluator", ""), ("results", "out/attack"), ("out", ""), ("seed", "0")];

/// Scores a result directory; shared by `evaluate` and library callers.
pub fn evaluate_results(evaluator: &Model, evaluator_name: &str, results: &ResultSet, seed: u64) -> Result<MetricsReport> {
    let spec = &evaluator.spec;
    let max_class = results.classes.iter().copied().max().unwrap_or(0);
    if spec.height != results.height || spec.width != results.width || max_class >= spec.classes {
        return Err(Error::Config(format!(
            "evaluator expects {}x{} inputs over {} classes; results are {}x{} up to class {max_class}",
            spec.height, spec.width, spec.classes, results.height, results.width
        )));
    }
    if spec.kind.is_spiking() && results.method.needs_spiking_target() && spec.steps != results.steps {
        return Err(Error::Config(format!(
            "evaluator uses {} steps, reconstructions have {}",
            spec.steps, results.steps
        )));
    }
    let scored = score(evaluator, &results.samples, seed)?;
    let mut meta: Vec<(String, String)> = results
        .meta
        .iter()
        .filter(|(k, _)| matches!(k.as_str(), "method" | "target" | "seed"))
        .map(|(k, v)| (if k == "seed" { "attack_seed".into() } else { k.clone() }, v.clone()))
        .collect();
    meta.push(("evaluator".into(), evaluator_name.into()));
    meta.push(("eval_seed".into(), seed.to_string()));
    MetricsReport::build(&scored, &results.classes, meta)
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let s = settings(
        "evaluate",
        EVALUATE_DEFAULTS,
        a.config.as_deref(),
        vec![
            ("evaluator", a.evaluator),
            ("results", a.results),
            ("out", a.out),
            ("seed", opt(a.seed)),
        ],
    )?;
    if s.get("evaluator").is_empty() {
        return Err(Error::Config("evaluate needs --evaluator".into()));
    }
    let eval_path = PathBuf::from(s.get("evaluator"));
    let evaluator = load_checkpoint(&eval_path)?.model;
    let results_dir = PathBuf::from(s.get("results"));
    let results = load_results(&results_dir)?;
    let name = eval_path.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
    let report = evaluate_results(&evaluator, &name, &results, s.parse("seed")?)?;
    let out = s.optional::<PathBuf>("out")?.unwrap_or(results_dir);
    create_dir(&out)?;
    write(&out.join("evaluate_config.txt"), &s.render())?;
    write(&out.join("report.csv"), &report.to_csv())?;
    write(&out.join("report.txt"), &report.to_text())?;
    write(&out.join("report.kv"), &report.to_kv())?;
    print!("{}", report.to_text());
    Ok(())
}

const EXPORT_DEFAULTS: &[(&str, &str)] = &[("results", "out/attack"), ("out", ""), ("sample", "0")];

/// Row of per-class cells, each the time-mean of one reconstruction scaled to 0–255.
pub fn export_grid(results: &ResultSet, sample: usize) -> Result<(usize, usize, Vec<u8>)> {
    let (h, w) = (results.height, results.width);
    let n = results.classes.len();
    if n == 0 {
        return Err(Error::Format("no classes to export".into()));
    }
    let mut grid = vec![0u8; n * h * w];
    for (cell, &c) in results.classes.iter().enumerate() {
        let picked = results
            .samples
            .iter()
            .filter(|s| s.label() == c)
            .nth(sample)
            .ok_or_else(|| Error::Format(format!("class {c} has no sample {sample}")))?;
        let pixels = match picked {
            Sample::Spikes(s, _) => s.rate_decode(),
            Sample::Image(img) => img.pixels.clone(),
        };
        for y in 0..h {
            for x in 0..w {
                grid[y * n * w + cell * w + x] = to_gray(pixels[y * w + x]);
            }
        }
    }
    Ok((n * w, h, grid))
}

fn cmd_export(a: ExportArgs) -> Result<()> {
    let s = settings(
        "export",
        EXPORT_DEFAULTS,
        a.config.as_deref(),
        vec![("results", a.results), ("out", a.out), ("sample", opt(a.sample))],
    )?;
    let dir = PathBuf::from(s.get("results"));
    let results = load_results(&dir)?;
    let (gw, gh, px) = export_grid(&results, s.parse("sample")?)?;
    let out = s.optional::<PathBuf>("out")?.unwrap_or_else(|| dir.join("grid.pgm"));
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
        write(&parent.join("export_config.txt"), &s.render())?;
    }
    write_pgm(&out, gw, gh, &px)?;
    println!("wrote {gw}x{gh} grid to {}", out.display());
    Ok(())
}
