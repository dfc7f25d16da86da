//! Command-line front end. [`run`] maps outcomes to exit codes: 0 success, 1 usage
//! error, 2 runtime error.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::dataset::{
    class_names, load_split, resize_image, DatasetKind, LabeledImageSet, SemanticNeighborGraph, Split, MODEL_SIDE,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    centroid_geometry, classify_interpolations, embed_dataset, hallucinate, interpolate_images, neighbor_pairs,
    read_png_image, run_few_shot_experiment, sample_shots, write_embeddings_csv, write_json_report, write_png_grid,
    ClassifierKind, CnnConfig, EncoderProbe, FewShotProtocol, ImageClassifier, JsonReport, LinearProbe,
    NearestNeighbor, SmallCnn, INTERP_PAIRS_PER_CLASS,
};
use crate::geometry::InterpolationMode;
use crate::selftest::run_selftest;
use crate::training::{train_with, Checkpoint, TrainingConfig, Variant};

pub const VERSION: &str = env!("ATNL_BUILD_VERSION");

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "atnl", version = VERSION, about = "Train and probe hypersphere VAEs with angular triplet-neighbor loss")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model; writes checkpoint.ckpt, loss_log.csv, history.csv and manifest.json.
    Train(TrainArgs),
    /// Export noise-free normalized embeddings of a split as CSV.
    Embed(EmbedArgs),
    /// Fit a linear probe on train-split embeddings and report test accuracy as JSON.
    Probe(EvalArgs),
    /// Decode an interpolation between two images into a PNG strip.
    Interpolate(InterpolateArgs),
    /// Classify images decoded from neighbor-class interpolations; JSON report.
    ClassifyInterp(ClassifyInterpArgs),
    /// Decode hallucinated images from few-shot neighbor pairs into a PNG gallery.
    Hallucinate(HallucinateArgs),
    /// Few-shot accuracy with hallucinated versus augmented data; JSON report.
    Fewshot(FewshotArgs),
    /// Run the randomized geometry and loss invariant checks.
    Selftest(SelftestArgs),
}

/// Options shared by every subcommand that reads data or a config.
#[derive(Debug, Args)]
struct Common {
    /// key=value config file; flags given on the command line override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (created if absent).
    #[arg(long)]
    out: PathBuf,
    /// Random seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset: mnist or poses.
    #[arg(long)]
    dataset: Option<DatasetKind>,
    /// Dataset root [default: $ATNL_DATA_DIR, else data/mnist].
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// ae, vae, vae_tl or vae_atnl.
    #[arg(long)]
    variant: Option<Variant>,
    /// Number of epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Train on the first N training images only (0 = all).
    #[arg(long)]
    train_subset: Option<usize>,
}

/// Options shared by subcommands that evaluate a trained checkpoint.
#[derive(Debug, Args)]
struct EvalArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output file; a manifest is written next to it as <out>.manifest.json.
    #[arg(long)]
    out: PathBuf,
    /// Random seed [default: the checkpoint's training seed].
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset root [default: the checkpoint's, else $ATNL_DATA_DIR, else data/mnist].
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EmbedArgs {
    #[command(flatten)]
    eval: EvalArgs,
    /// Split to embed: train or test.
    #[arg(long, default_value = "test", value_parser = ["train", "test"])]
    split: String,
}

#[derive(Debug, Args)]
struct InterpolateArgs {
    #[command(flatten)]
    eval: EvalArgs,
    /// First image: a PNG path, or test:N / train:N for a dataset image.
    #[arg(long)]
    image_a: String,
    /// Second image, same forms as --image-a.
    #[arg(long)]
    image_b: String,
    /// Number of frames, endpoints included.
    #[arg(long, default_value_t = 11)]
    steps: usize,
    /// linear or spherical.
    #[arg(long, default_value = "spherical")]
    mode: InterpolationMode,
}

#[derive(Debug, Args)]
struct ClassifyInterpArgs {
    #[command(flatten)]
    eval: EvalArgs,
    /// linear or spherical [default: both, on the same pairs].
    #[arg(long)]
    mode: Option<InterpolationMode>,
    /// Neighbor pairs per class.
    #[arg(long, default_value_t = INTERP_PAIRS_PER_CLASS)]
    pairs: usize,
    /// Interpolation weight.
    #[arg(long, default_value_t = 0.5)]
    omega: f64,
    /// probe (encoder plus linear probe), knn or cnn, trained on the train split.
    #[arg(long, default_value = "probe")]
    classifier: ClassifierKind,
}

#[derive(Debug, Args)]
struct HallucinateArgs {
    #[command(flatten)]
    eval: EvalArgs,
    /// Real images drawn per class.
    #[arg(long, default_value_t = 5)]
    shots: usize,
    /// Hallucinated images per class.
    #[arg(long, default_value_t = 20)]
    count: usize,
}

#[derive(Debug, Args)]
struct FewshotArgs {
    #[command(flatten)]
    eval: EvalArgs,
    /// Real images drawn per class.
    #[arg(long, default_value_t = 5)]
    shots: usize,
    /// Hallucinated (and augmented) images per class.
    #[arg(long, default_value_t = 20)]
    count: usize,
    /// Episodes to average over.
    #[arg(long, default_value_t = 5)]
    trials: usize,
    /// knn or cnn.
    #[arg(long, default_value = "knn")]
    classifier: ClassifierKind,
}

#[derive(Debug, Args)]
struct SelftestArgs {
    /// Random seed for the generated cases.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optional JSON results file (with <out>.manifest.json beside it).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    /// Config file (or defaults), then flag overrides.
    fn config(&self) -> Result<TrainingConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainingConfig::load(p)?,
            None => TrainingConfig::for_dataset(self.dataset.unwrap_or(DatasetKind::Mnist)),
        };
        if let Some(d) = self.dataset {
            if self.config.is_some() && d != cfg.dataset {
                cfg.override_value("dataset", &d.to_string())?;
            }
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(d) = &self.data_dir {
            cfg.data_dir = d.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    argv: &'a [String],
    version: &'a str,
    seed: u64,
    config: &'a TrainingConfig,
    extra: serde_json::Value,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_manifest(dir: &Path, command: &str, argv: &[String], cfg: &TrainingConfig, extra: serde_json::Value) -> Result<()> {
    write_manifest_to(&dir.join("manifest.json"), command, argv, cfg, extra)
}

fn write_manifest_to(path: &Path, command: &str, argv: &[String], cfg: &TrainingConfig, extra: serde_json::Value) -> Result<()> {
    let m = Manifest { command, argv, version: VERSION, seed: cfg.seed, config: cfg, extra };
    let text = serde_json::to_string_pretty(&m).expect("manifest serializes");
    write_file(path, text + "\n")
}

/// `<out>.manifest.json`
fn manifest_beside(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

fn create_parent(out: &Path) -> Result<()> {
    match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

fn cmd_train(args: &TrainArgs, argv: &[String]) -> Result<()> {
    let mut cfg = args.common.config()?;
    if let Some(v) = args.variant {
        cfg.variant = v;
    }
    if let Some(e) = args.epochs {
        cfg.override_value("epochs", &e.to_string())?;
    }
    if let Some(n) = args.train_subset {
        cfg.train_subset = n;
    }
    let out = &args.common.out;
    create_dir(out)?;
    write_manifest(out, "train", argv, &cfg, json!({}))?;
    write_file(&out.join("config.txt"), cfg.to_text())?;
    let (train, graph) = load_split(cfg.dataset, &cfg.resolved_data_dir(), Split::Train)?;
    eprintln!(
        "training {} on {} {} images for {} epochs",
        cfg.variant,
        if cfg.train_subset > 0 { cfg.train_subset.min(train.len()) } else { train.len() },
        cfg.dataset,
        cfg.epochs
    );
    let log_path = out.join("loss_log.csv");
    let mut logged = 0;
    write_file(&log_path, "step,epoch,rec,kl,atn,total,active,grad_norm\n")?;
    let ckpt = train_with(&cfg, train, graph, |t| {
        let mut log = fs::OpenOptions::new().append(true).open(&log_path).map_err(|e| Error::io(&log_path, e))?;
        for r in &t.step_log()[logged..] {
            let l = &r.losses;
            let active = if l.triplets > 0 { l.active as f64 / l.triplets as f64 } else { 0.0 };
            writeln!(log, "{},{},{},{},{},{},{},{}", r.step, r.epoch, l.rec, l.kl, l.atn, l.total, active, r.grad_norm)
                .map_err(|e| Error::io(&log_path, e))?;
        }
        logged = t.step_log().len();
        let h = t.history().last().expect("an epoch finished");
        eprintln!(
            "epoch {:>3}: total {:.5} rec {:.5} kl {:.3} triplet {:.5} active {:.3}",
            h.epoch, h.total, h.rec, h.kl, h.atn, h.active
        );
        write_history(out, t.history())?;
        t.checkpoint().save(&out.join("checkpoint.ckpt"))
    })?;
    eprintln!("wrote {}", out.join("checkpoint.ckpt").display());
    drop(ckpt);
    Ok(())
}

fn write_history(out: &Path, history: &[crate::training::EpochRecord]) -> Result<()> {
    let mut text = String::from("epoch,rec,kl,atn,total,active\n");
    for h in history {
        text += &format!("{},{},{},{},{},{}\n", h.epoch, h.rec, h.kl, h.atn, h.total, h.active);
    }
    write_file(&out.join("history.csv"), text)
}

/// A loaded checkpoint with its config after `--seed` / `--data-dir` overrides.
struct Loaded {
    ckpt: Checkpoint,
    cfg: TrainingConfig,
}

impl EvalArgs {
    fn load(&self) -> Result<Loaded> {
        let ckpt = Checkpoint::load(&self.checkpoint)?;
        let mut cfg = ckpt.config.clone();
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(d) = &self.data_dir {
            cfg.data_dir = d.clone();
        }
        create_parent(&self.out)?;
        Ok(Loaded { ckpt, cfg })
    }

    fn split(&self, cfg: &TrainingConfig, split: Split) -> Result<(LabeledImageSet, SemanticNeighborGraph)> {
        load_split(cfg.dataset, &cfg.resolved_data_dir(), split)
    }

    fn manifest(&self, command: &str, argv: &[String], cfg: &TrainingConfig, mut extra: serde_json::Value) -> Result<()> {
        extra["checkpoint"] = json!(self.checkpoint.display().to_string());
        write_manifest_to(&manifest_beside(&self.out), command, argv, cfg, extra)
    }
}

fn write_report(out: &Path, experiment: &str, cfg: &TrainingConfig, per_class: serde_json::Value, aggregate: serde_json::Value) -> Result<()> {
    let report = JsonReport { experiment: experiment.into(), config: cfg.clone(), seed: cfg.seed, per_class, aggregate };
    write_json_report(out, &report)
}

fn cmd_embed(args: &EmbedArgs, argv: &[String]) -> Result<()> {
    let e = &args.eval;
    let Loaded { ckpt, cfg } = e.load()?;
    let split = if args.split == "train" { Split::Train } else { Split::Test };
    e.manifest("embed", argv, &cfg, json!({ "split": args.split }))?;
    let (data, _) = e.split(&cfg, split)?;
    let emb = embed_dataset(&ckpt, &data)?;
    write_embeddings_csv(&e.out, &emb)?;
    eprintln!("wrote {} embeddings to {}", emb.len(), e.out.display());
    Ok(())
}

fn cmd_probe(args: &EvalArgs, argv: &[String]) -> Result<()> {
    let Loaded { ckpt, cfg } = args.load()?;
    args.manifest("probe", argv, &cfg, json!({}))?;
    let (train, _) = args.split(&cfg, Split::Train)?;
    let (test, graph) = args.split(&cfg, Split::Test)?;
    let train_emb = embed_dataset(&ckpt, &train)?;
    let test_emb = embed_dataset(&ckpt, &test)?;
    let probe = LinearProbe::fit(&train_emb.points(), &train_emb.labels(), train.class_count(), cfg.seed)?;
    let mut hits = vec![(0usize, 0usize); test.class_count()];
    for r in &test_emb.rows {
        hits[r.label].1 += 1;
        if probe.predict(&r.z) == r.label {
            hits[r.label].0 += 1;
        }
    }
    let names = class_names(cfg.dataset, test.class_count());
    let per_class: Vec<_> = hits
        .iter()
        .enumerate()
        .map(|(k, &(h, n))| json!({ "class": k, "name": names[k], "samples": n, "accuracy": percent(h, n) }))
        .collect();
    let accuracy = probe.accuracy(&test_emb.points(), &test_emb.labels());
    let geometry = centroid_geometry(&test_emb, &graph)?;
    let aggregate = json!({
        "accuracy": accuracy,
        "train_images": train.len(),
        "test_images": test.len(),
        "centroid_neighbor_angle": geometry.neighbor_mean,
        "centroid_non_neighbor_angle": geometry.non_neighbor_mean,
    });
    write_report(&args.out, "probe", &cfg, json!(per_class), aggregate)?;
    println!("probe accuracy {accuracy:.2}%");
    Ok(())
}

fn percent(hits: usize, n: usize) -> Option<f64> {
    (n > 0).then(|| 100.0 * hits as f64 / n as f64)
}

/// `test:N`, `train:N`, or a PNG path; returns a model-resolution image.
fn resolve_image(spec: &str, args: &EvalArgs, cfg: &TrainingConfig) -> Result<Vec<f32>> {
    let dataset_ref = spec
        .split_once(':')
        .and_then(|(s, n)| Some((match s { "test" => Split::Test, "train" => Split::Train, _ => return None }, n)));
    let (side, pixels) = match dataset_ref {
        Some((split, n)) => {
            let i: usize = n.parse().map_err(|_| Error::InvalidArgument(format!("bad image index in {spec:?}")))?;
            let (data, _) = args.split(cfg, split)?;
            if i >= data.len() {
                return Err(Error::InvalidArgument(format!("{spec}: split has {} images", data.len())));
            }
            (data.side(), data.image(i).to_vec())
        }
        None => read_png_image(Path::new(spec))?,
    };
    Ok(if side == MODEL_SIDE { pixels } else { resize_image(&pixels, side, MODEL_SIDE) })
}

fn cmd_interpolate(args: &InterpolateArgs, argv: &[String]) -> Result<()> {
    let e = &args.eval;
    let Loaded { ckpt, cfg } = e.load()?;
    e.manifest(
        "interpolate",
        argv,
        &cfg,
        json!({ "image_a": args.image_a, "image_b": args.image_b, "steps": args.steps, "mode": args.mode }),
    )?;
    let a = resolve_image(&args.image_a, e, &cfg)?;
    let b = resolve_image(&args.image_b, e, &cfg)?;
    let strip = interpolate_images(&ckpt, &a, &b, args.steps, args.mode)?;
    write_png_grid(&e.out, &strip.frames, strip.side, strip.frames.len())?;
    eprintln!("wrote {}-frame {} strip to {}", strip.frames.len(), args.mode, e.out.display());
    Ok(())
}

fn cmd_classify_interp(args: &ClassifyInterpArgs, argv: &[String]) -> Result<()> {
    let e = &args.eval;
    let Loaded { ckpt, cfg } = e.load()?;
    let modes = match args.mode {
        Some(m) => vec![m],
        None => vec![InterpolationMode::Spherical, InterpolationMode::Linear],
    };
    e.manifest(
        "classify-interp",
        argv,
        &cfg,
        json!({ "modes": modes, "pairs_per_class": args.pairs, "omega": args.omega, "classifier": args.classifier }),
    )?;
    let (train, graph) = e.split(&cfg, Split::Train)?;
    let (test, _) = e.split(&cfg, Split::Test)?;
    let emb = embed_dataset(&ckpt, &test)?;
    let pairs = neighbor_pairs(&emb, &graph, args.pairs, cfg.seed);
    let classifier: Box<dyn ImageClassifier + '_> = match args.classifier {
        ClassifierKind::Probe => Box::new(EncoderProbe::fit(&ckpt.model, &train, cfg.seed)?),
        ClassifierKind::Knn => Box::new(NearestNeighbor::new(train)?),
        ClassifierKind::Cnn => Box::new(SmallCnn::train(&train, &CnnConfig::default(), cfg.seed)?),
    };
    let reports = modes
        .iter()
        .map(|&m| classify_interpolations(&ckpt, &emb, &graph, &pairs, m, args.omega, classifier.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    let per_class: Vec<_> = (0..graph.class_count())
        .map(|k| {
            let mut row = json!({ "class": k, "neighbors": reports[0].per_class[k].neighbors, "samples": reports[0].per_class[k].samples });
            for r in &reports {
                row[r.mode.to_string()] = json!(r.per_class[k].accuracy);
            }
            row
        })
        .collect();
    let mut aggregate = json!({});
    for r in &reports {
        aggregate[format!("{}_mean", r.mode)] = json!(r.mean_accuracy);
        aggregate[format!("{}_classes_above_40", r.mode)] = json!(r.classes_above(40.0));
        println!("{} mean accuracy {:.2}% over {} classes", r.mode, r.mean_accuracy, r.evaluated_classes());
    }
    if reports.len() == 2 {
        aggregate["spherical_minus_linear"] = json!(reports[0].mean_accuracy - reports[1].mean_accuracy);
    }
    write_report(&e.out, "classify-interp", &cfg, json!(per_class), aggregate)
}

fn cmd_hallucinate(args: &HallucinateArgs, argv: &[String]) -> Result<()> {
    let e = &args.eval;
    let Loaded { ckpt, cfg } = e.load()?;
    e.manifest("hallucinate", argv, &cfg, json!({ "shots": args.shots, "count": args.count }))?;
    let proto = FewShotProtocol { shots: args.shots, hallucinated_per_class: args.count, seed: cfg.seed, ..Default::default() };
    proto.validate()?;
    let (train, graph) = e.split(&cfg, Split::Train)?;
    let few = sample_shots(&train, args.shots, cfg.seed)?;
    let set = hallucinate(&ckpt, &few, &graph, &proto, cfg.seed)?;
    // One row per class: the real shots, then the hallucinated images.
    let tiles: Vec<Vec<f32>> =
        set.class_indices().iter().flatten().map(|&i| set.image(i).to_vec()).collect();
    write_png_grid(&e.out, &tiles, set.side(), args.shots + args.count)?;
    eprintln!("wrote {} images to {}", tiles.len(), e.out.display());
    Ok(())
}

fn cmd_fewshot(args: &FewshotArgs, argv: &[String]) -> Result<()> {
    let e = &args.eval;
    let Loaded { ckpt, cfg } = e.load()?;
    let proto = FewShotProtocol {
        shots: args.shots,
        hallucinated_per_class: args.count,
        classifier: args.classifier,
        trials: args.trials,
        seed: cfg.seed,
    };
    proto.validate()?;
    e.manifest("fewshot", argv, &cfg, json!({ "protocol": proto }))?;
    let (train, graph) = e.split(&cfg, Split::Train)?;
    let (test, _) = e.split(&cfg, Split::Test)?;
    let report = run_few_shot_experiment(&ckpt, &train, &test, &graph, &proto)?;
    println!(
        "{}: hallucinated {:.2} ± {:.2}, augmented {:.2} ± {:.2}, real only {:.2} ± {:.2}",
        proto.classifier,
        report.hallucinated.mean,
        report.hallucinated.std,
        report.augmented.mean,
        report.augmented.std,
        report.real_only.mean,
        report.real_only.std
    );
    let aggregate = serde_json::to_value(&report).expect("report serializes");
    write_report(&e.out, "fewshot", &cfg, serde_json::Value::Null, aggregate)
}

fn cmd_selftest(args: &SelftestArgs, argv: &[String]) -> Result<()> {
    let checks = run_selftest(args.seed);
    for c in &checks {
        println!("{} {} ({} cases, worst {:.3e})", if c.passed() { "PASS" } else { "FAIL" }, c.name, c.cases, c.worst);
    }
    if let Some(out) = &args.out {
        create_parent(out)?;
        let cfg = TrainingConfig { seed: args.seed, ..TrainingConfig::default() };
        write_manifest_to(&manifest_beside(out), "selftest", argv, &cfg, json!({}))?;
        let text = serde_json::to_string_pretty(&checks).expect("checks serialize");
        write_file(out, text + "\n")?;
    }
    let failed = checks.iter().filter(|c| !c.passed()).count();
    if failed > 0 {
        return Err(Error::InvalidArgument(format!("{failed} self-test check(s) failed")));
    }
    Ok(())
}

/// Parses `argv` (including the program name) and runs the subcommand.
pub fn run(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a, argv),
        Command::Embed(a) => cmd_embed(a, argv),
        Command::Probe(a) => cmd_probe(a, argv),
        Command::Interpolate(a) => cmd_interpolate(a, argv),
        Command::ClassifyInterp(a) => cmd_classify_interp(a, argv),
        Command::Hallucinate(a) => cmd_hallucinate(a, argv),
        Command::Fewshot(a) => cmd_fewshot(a, argv),
        Command::Selftest(a) => cmd_selftest(a, argv),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

