//! Acceptance criteria A1-A6, one PASS / FAIL / SKIP line each.
//!
//! Trained checkpoints come from `scripts/run_experiments.sh`, read from `$ATNL_RUNS_DIR`
//! (default `<workspace>/runs`); MNIST from `$ATNL_DATA_DIR` (default `<workspace>/data/mnist`).
//! Criteria whose inputs are missing print SKIP. Positional arguments select criteria by id.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use atnl::dataset::{
    build_digit_neighbor_graph, load_split, mnist_available, parse_idx_images, write_idx_images, DatasetKind,
    LabeledImageSet, SemanticNeighborGraph, Split,
};
use atnl::error::Result;
use atnl::evaluation::{
    classify_interpolations, embed_dataset, linear_probe, neighbor_pairs, run_few_shot_experiment, ClassifierKind,
    EncoderProbe, FewShotProtocol, InterpolationReport, INTERP_PAIRS_PER_CLASS,
};
use atnl::geometry::InterpolationMode;
use atnl::model::{Vae, IMAGE_PIXELS};
use atnl::selftest::run_selftest;
use atnl::training::{
    accumulate_gradients, forward_pass, train_with, Checkpoint, Trainer, TrainingConfig, Variant,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

struct Ctx {
    data: PathBuf,
    runs: PathBuf,
    splits: OnceLock<Result<(LabeledImageSet, LabeledImageSet, SemanticNeighborGraph)>>,
    probes: Mutex<HashMap<PathBuf, f64>>,
    interp: OnceLock<Result<(InterpolationReport, InterpolationReport)>>,
}

impl Ctx {
    fn new() -> Self {
        let env = |k: &str| std::env::var_os(k).map(PathBuf::from);
        Self {
            data: env("ATNL_DATA_DIR").unwrap_or_else(|| workspace().join("data/mnist")),
            runs: env("ATNL_RUNS_DIR").unwrap_or_else(|| workspace().join("runs")),
            splits: OnceLock::new(),
            probes: Mutex::new(HashMap::new()),
            interp: OnceLock::new(),
        }
    }

    fn have_data(&self) -> bool {
        mnist_available(&self.data)
    }

    fn splits(&self) -> Result<&(LabeledImageSet, LabeledImageSet, SemanticNeighborGraph)> {
        let r = self.splits.get_or_init(|| {
            let (train, graph) = load_split(DatasetKind::Mnist, &self.data, Split::Train)?;
            let (test, _) = load_split(DatasetKind::Mnist, &self.data, Split::Test)?;
            Ok((train, test, graph))
        });
        r.as_ref().map_err(|e| atnl::error::Error::InvalidArgument(e.to_string()))
    }

    /// Finished run's checkpoint, if the run has completed.
    fn run(&self, name: &str) -> Option<PathBuf> {
        let dir = self.runs.join(name);
        let ckpt = dir.join("checkpoint.ckpt");
        (dir.join("done").is_file() && ckpt.is_file()).then_some(ckpt)
    }

    fn missing(&self, names: &[&str]) -> Option<Outcome> {
        let absent: Vec<&str> = names.iter().copied().filter(|n| self.run(n).is_none()).collect();
        if !self.have_data() {
            return Some(Outcome::Skip(format!("MNIST not found under {}", self.data.display())));
        }
        (!absent.is_empty()).then(|| {
            Outcome::Skip(format!("no finished run for {} under {}", absent.join(", "), self.runs.display()))
        })
    }

    /// Linear-probe test accuracy of the checkpoint at `path`, cached.
    fn probe(&self, path: &Path) -> Result<f64> {
        if let Some(&a) = self.probes.lock().unwrap().get(path) {
            return Ok(a);
        }
        let ckpt = Checkpoint::load(path)?;
        let (train, test, _) = self.splits()?;
        let acc = linear_probe(&embed_dataset(&ckpt, train)?, &embed_dataset(&ckpt, test)?, ckpt.config.seed)?;
        self.probes.lock().unwrap().insert(path.to_path_buf(), acc);
        Ok(acc)
    }

    /// Spherical and linear midpoint reports on the same pairs of test embeddings.
    fn interpolation(&self) -> Result<&(InterpolationReport, InterpolationReport)> {
        let r = self.interp.get_or_init(|| {
            let ckpt = Checkpoint::load(&self.run("vae_atnl").expect("checked by caller"))?;
            let (train, test, graph) = self.splits()?;
            let emb = embed_dataset(&ckpt, test)?;
            let pairs = neighbor_pairs(&emb, graph, INTERP_PAIRS_PER_CLASS, ckpt.config.seed);
            let probe = EncoderProbe::fit(&ckpt.model, train, ckpt.config.seed)?;
            let run = |mode| classify_interpolations(&ckpt, &emb, graph, &pairs, mode, 0.5, &probe);
            Ok((run(InterpolationMode::Spherical)?, run(InterpolationMode::Linear)?))
        });
        r.as_ref().map_err(|e| atnl::error::Error::InvalidArgument(e.to_string()))
    }
}

fn a1_full(ctx: &Ctx) -> Result<Outcome> {
    if let Some(skip) = ctx.missing(&["vae_atnl", "vae"]) {
        return Ok(skip);
    }
    let atnl = ctx.probe(&ctx.run("vae_atnl").unwrap())?;
    let vae = ctx.probe(&ctx.run("vae").unwrap())?;
    Ok(verdict(
        atnl >= 98.0 && atnl - vae >= 1.5,
        format!("vae_atnl probe {atnl:.2}% (need >= 98.0), vae {vae:.2}%, gap {:.2} (need >= 1.5)", atnl - vae),
    ))
}

fn a1_smoke(ctx: &Ctx) -> Result<Outcome> {
    if !ctx.have_data() {
        return Ok(Outcome::Skip(format!("MNIST not found under {}", ctx.data.display())));
    }
    let (path, minutes) = match ctx.run("smoke") {
        Some(p) => (p, None),
        None => {
            let cfg = TrainingConfig {
                variant: Variant::VaeAtnl,
                epochs: 10,
                train_subset: 10_000,
                ..TrainingConfig::for_dataset(DatasetKind::Mnist)
            };
            let (train, _, graph) = ctx.splits()?;
            let start = Instant::now();
            let ckpt = train_with(&cfg, train.clone(), graph.clone(), |_| Ok(()))?;
            let dir = tempfile::tempdir().expect("temp dir").keep();
            let p = dir.join("smoke.ckpt");
            ckpt.save(&p)?;
            (p, Some(start.elapsed().as_secs_f64() / 60.0))
        }
    };
    let acc = ctx.probe(&path)?;
    let timing = minutes.map_or(String::from("trained earlier by the experiment script"), |m| format!("trained in {m:.1} min"));
    Ok(verdict(acc >= 96.0, format!("10 epochs on 10k images: probe {acc:.2}% (need >= 96.0), {timing}")))
}

fn a2(ctx: &Ctx) -> Result<Outcome> {
    if let Some(skip) = ctx.missing(&["vae_atnl"]) {
        return Ok(skip);
    }
    let (sph, _) = ctx.interpolation()?;
    let above = sph.classes_above(40.0);
    let per_class: Vec<String> =
        sph.per_class.iter().map(|c| format!("{}:{:.0}", c.class, c.accuracy.unwrap_or(f64::NAN))).collect();
    Ok(verdict(
        sph.mean_accuracy >= 60.0 && above >= 8,
        format!(
            "slerp midpoints labeled as the middle class {:.1}% (need >= 60), {above}/10 classes above 40% (need >= 8) [{}]",
            sph.mean_accuracy,
            per_class.join(" ")
        ),
    ))
}

fn a3(ctx: &Ctx) -> Result<Outcome> {
    if let Some(skip) = ctx.missing(&["vae_atnl"]) {
        return Ok(skip);
    }
    let (sph, lin) = ctx.interpolation()?;
    let gap = sph.mean_accuracy - lin.mean_accuracy;
    Ok(verdict(
        gap >= 15.0,
        format!("spherical {:.1}% vs linear {:.1}%: gap {gap:.1} points (need >= 15)", sph.mean_accuracy, lin.mean_accuracy),
    ))
}

fn a4(ctx: &Ctx) -> Result<Outcome> {
    if let Some(skip) = ctx.missing(&["vae_atnl"]) {
        return Ok(skip);
    }
    let ckpt = Checkpoint::load(&ctx.run("vae_atnl").unwrap())?;
    let (train, test, graph) = ctx.splits()?;
    let mut ok = true;
    let mut parts = Vec::new();
    for (classifier, need) in [(ClassifierKind::Knn, 8.0), (ClassifierKind::Cnn, 4.0)] {
        let proto = FewShotProtocol { classifier, ..FewShotProtocol::default() };
        let r = run_few_shot_experiment(&ckpt, train, test, graph, &proto)?;
        ok &= r.margin() >= need;
        parts.push(format!(
            "{classifier}: hallucinated {:.1}±{:.1} vs augmented {:.1}±{:.1} (real only {:.1}), margin {:.1} (need >= {need})",
            r.hallucinated.mean,
            r.hallucinated.std,
            r.augmented.mean,
            r.augmented.std,
            r.real_only.mean,
            r.margin()
        ));
    }
    Ok(verdict(ok, parts.join("; ")))
}

/// Ten images per class, class `c` a bright bar at row `2 + 3c`.
fn toy_set(per_class: usize, seed: u64) -> LabeledImageSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for i in 0..per_class * 10 {
        let c = i % 10;
        let mut img = vec![0.0f32; IMAGE_PIXELS];
        for y in 2 + 3 * c..4 + 3 * c {
            for x in 4..28 {
                img[y * 32 + x] = rng.random_range(0.6..1.0);
            }
        }
        pixels.extend(img);
        labels.push(c);
    }
    LabeledImageSet::new(pixels, labels, 10, 32).unwrap()
}

fn zero_weight_trajectories_agree() -> Result<bool> {
    let cfg = |variant| TrainingConfig {
        variant,
        lambda_atn: 0.0,
        classes_per_batch: 4,
        samples_per_class: 2,
        seed: 5,
        ..TrainingConfig::default()
    };
    let graph = build_digit_neighbor_graph();
    let mut a = Trainer::new(cfg(Variant::VaeAtnl), toy_set(4, 3), graph.clone())?;
    let mut b = Trainer::new(cfg(Variant::Vae), toy_set(4, 3), graph)?;
    let (mut ta, mut tb) = (Vec::new(), Vec::new());
    while a.steps_taken() < 50 {
        a.run_epoch_with(|_, l| ta.push(l.total))?;
        b.run_epoch_with(|_, l| tb.push(l.total))?;
    }
    Ok(a.steps_taken() == 50 && ta == tb && a.model() == b.model())
}

/// Worst relative error of the analytic gradient of the full objective against central
/// differences on 10 random parameters (probes straddling a rectifier kink are redrawn).
fn end_to_end_gradient_error() -> Result<f64> {
    let cfg = TrainingConfig::default();
    let graph = build_digit_neighbor_graph();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let pixels: Vec<f64> = (0..4 * IMAGE_PIXELS).map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect();
    let labels = [0, 1, 3, 6];
    let noise: Vec<f64> = (0..4 * cfg.d_z).map(|_| rng.sample(StandardNormal)).collect();
    let mut model: Vae<f64> = Vae::<f32>::new(cfg.d_z, 12)?.cast();
    model.zero_grad();
    let loss = accumulate_gradients(&mut model, &cfg, &graph, &pixels, &labels, &noise, 0)?.total;
    let sizes: Vec<usize> = model.named_params().iter().map(|(_, p)| p.len()).collect();
    let h = 1e-4;
    let resolvable = 1e4 * f64::EPSILON * loss.abs() / h;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    while checked < 10 {
        let block = rng.random_range(0..sizes.len());
        let idx = rng.random_range(0..sizes[block]);
        let analytic = model.named_params()[block].1.grad[idx];
        if analytic.abs() < resolvable {
            continue;
        }
        let eval = |delta: f64| {
            let mut m = model.clone();
            m.params_mut()[block].value[idx] += delta;
            forward_pass(&m, &cfg, &graph, &pixels, &labels, &noise, 0)
        };
        let (plus, minus) = (eval(h)?, eval(-h)?);
        if plus.activation_signs() != minus.activation_signs() {
            continue;
        }
        let numeric = (plus.losses.total - minus.losses.total) / (2.0 * h);
        worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8));
        checked += 1;
    }
    Ok(worst)
}

fn a5(_: &Ctx) -> Result<Outcome> {
    let start = Instant::now();
    let mut failed = Vec::new();
    let checks = run_selftest(0);
    failed.extend(checks.iter().filter(|c| !c.passed()).map(|c| c.name.to_string()));

    let dir = tempfile::tempdir().expect("temp dir");
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pixels: Vec<u8> = (0..7 * 28 * 28).map(|_| rng.random()).collect();
    let idx_path = dir.path().join("images");
    write_idx_images(&idx_path, 28, &pixels)?;
    if parse_idx_images(&std::fs::read(&idx_path).unwrap())?.pixels != pixels {
        failed.push("idx round trip".into());
    }

    let config = TrainingConfig::default();
    let ckpt = Checkpoint { model: Vae::new(config.d_z, 4)?, config, epoch: 0, history: Vec::new() };
    let ckpt_path = dir.path().join("c.ckpt");
    ckpt.save(&ckpt_path)?;
    let back = Checkpoint::load(&ckpt_path)?;
    if back.model != ckpt.model || back.to_bytes() != std::fs::read(&ckpt_path).unwrap() {
        failed.push("checkpoint round trip".into());
    }

    if !zero_weight_trajectories_agree()? {
        failed.push("zero triplet weight trajectory".into());
    }
    let fd = end_to_end_gradient_error()?;
    if fd >= 1e-3 {
        failed.push(format!("end-to-end gradient (rel err {fd:.2e})"));
    }
    let secs = start.elapsed().as_secs_f64();
    if secs > 60.0 {
        failed.push(format!("runtime {secs:.0}s over 60s"));
    }
    let detail = format!(
        "{} invariant checks, idx and checkpoint round trips, 50-step trajectory equality, end-to-end gradient rel err {fd:.1e}, {secs:.1}s",
        checks.len()
    );
    Ok(if failed.is_empty() { Outcome::Pass(detail) } else { Outcome::Fail(format!("{detail}; failed: {}", failed.join(", "))) })
}

fn a6(ctx: &Ctx) -> Result<Outcome> {
    let names = ["vae_atnl", "vae_tl", "vae", "ae"];
    if let Some(skip) = ctx.missing(&names) {
        return Ok(skip);
    }
    let accs = names.iter().map(|n| ctx.probe(&ctx.run(n).unwrap())).collect::<Result<Vec<f64>>>()?;
    let ok = accs.windows(2).all(|w| w[0] - w[1] >= 0.3);
    let listed: Vec<String> = names.iter().zip(&accs).map(|(n, a)| format!("{n} {a:.2}")).collect();
    Ok(verdict(ok, format!("{} (each consecutive gap must be >= 0.3)", listed.join(" > "))))
}

type Criterion = (&'static str, fn(&Ctx) -> Result<Outcome>);

fn main() {
    let criteria: [Criterion; 7] = [
        ("A5", a5),
        ("A1-smoke", a1_smoke),
        ("A1", a1_full),
        ("A6", a6),
        ("A2", a2),
        ("A3", a3),
        ("A4", a4),
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let ctx = Ctx::new();
    let mut failures = 0;
    for (id, run) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| f == id) {
            continue;
        }
        let start = Instant::now();
        let (tag, detail) = match run(&ctx) {
            Ok(Outcome::Pass(d)) => ("PASS", d),
            Ok(Outcome::Skip(d)) => ("SKIP", d),
            Ok(Outcome::Fail(d)) => ("FAIL", d),
            Err(e) => ("FAIL", format!("error: {e}")),
        };
        if tag == "FAIL" {
            failures += 1;
        }
        println!("{id} {tag}: {detail} ({:.0}s)", start.elapsed().as_secs_f64());
    }
    if failures > 0 {
        std::process::exit(1);
    }
}
