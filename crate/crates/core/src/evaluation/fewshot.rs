use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{embed_pixels, ClassifierKind, CnnConfig, ImageClassifier, NearestNeighbor, SmallCnn};
use crate::dataset::{bilinear_sample, LabeledImageSet, SemanticNeighborGraph};
use crate::error::{Error, Result};
use crate::geometry::slerp;
use crate::model::IMAGE_SIDE;
use crate::training::Checkpoint;

/// Interpolation weights for hallucinated codes are drawn from this range.
pub const HALLUCINATION_OMEGA: (f64, f64) = (0.4, 0.6);

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FewShotProtocol {
    pub shots: usize,
    pub hallucinated_per_class: usize,
    pub classifier: ClassifierKind,
    pub trials: usize,
    pub seed: u64,
}

impl Default for FewShotProtocol {
    fn default() -> Self {
        Self { shots: 5, hallucinated_per_class: 20, classifier: ClassifierKind::Knn, trials: 5, seed: 0 }
    }
}

impl FewShotProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.shots == 0 || self.trials == 0 {
            return Err(Error::InvalidArgument("few-shot protocol needs shots >= 1 and trials >= 1".into()));
        }
        if self.classifier == ClassifierKind::Probe {
            return Err(Error::InvalidArgument("few-shot classifier must be knn or cnn".into()));
        }
        Ok(())
    }

    fn trial_seed(&self, trial: usize) -> u64 {
        self.seed.wrapping_add((trial as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15))
    }
}

/// Draws `shots` distinct images per class (with replacement when a class is smaller).
pub fn sample_shots(data: &LabeledImageSet, shots: usize, seed: u64) -> Result<LabeledImageSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = Vec::with_capacity(shots * data.class_count());
    for (class, idx) in data.class_indices().iter().enumerate() {
        if idx.is_empty() {
            return Err(Error::InvalidArgument(format!("class {class} has no images to draw shots from")));
        }
        if idx.len() >= shots {
            picked.extend(idx.choose_multiple(&mut rng, shots).copied());
        } else {
            picked.extend((0..shots).map(|_| *idx.choose(&mut rng).expect("non-empty")));
        }
    }
    Ok(data.subset(&picked))
}

/// Appends `hallucinated_per_class` decoded slerp points per class to the real shots.
///
/// A class with two or more neighbor classes is synthesized between two distinct neighbors.
/// Classes with fewer (chain endpoints) interpolate between their own shots.
pub fn hallucinate(
    ckpt: &Checkpoint,
    few: &LabeledImageSet,
    graph: &SemanticNeighborGraph,
    proto: &FewShotProtocol,
    seed: u64,
) -> Result<LabeledImageSet> {
    if few.side() != IMAGE_SIDE {
        return Err(Error::Shape(format!("expected {IMAGE_SIDE}x{IMAGE_SIDE} shots, got side {}", few.side())));
    }
    if graph.class_count() != few.class_count() {
        return Err(Error::Shape(format!(
            "graph has {} classes, shots have {}",
            graph.class_count(),
            few.class_count()
        )));
    }
    let codes = embed_pixels(&ckpt.model, few.pixels(), few.side())?;
    let by_class = few.class_indices();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = few.clone();
    for k in 0..few.class_count() {
        let nb: Vec<usize> = graph.neighbors(k).iter().copied().collect();
        let sources: Vec<usize> = if nb.len() >= 2 { nb } else { vec![k] };
        if let Some(&c) = sources.iter().find(|&&c| by_class[c].is_empty()) {
            return Err(Error::MissingNeighbor { target: k, class: c });
        }
        let mut points = Vec::with_capacity(proto.hallucinated_per_class);
        for _ in 0..proto.hallucinated_per_class {
            let (ca, cb) = match sources[..] {
                [only] => (only, only),
                _ => {
                    let two: Vec<&usize> = sources.choose_multiple(&mut rng, 2).collect();
                    (*two[0], *two[1])
                }
            };
            let a = *by_class[ca].choose(&mut rng).expect("non-empty");
            let b = *by_class[cb].choose(&mut rng).expect("non-empty");
            let omega = rng.random_range(HALLUCINATION_OMEGA.0..=HALLUCINATION_OMEGA.1);
            points.extend(slerp(&codes[a], &codes[b], omega)?.into_inner());
        }
        let images = ckpt.model.decode_raw(&points)?;
        for img in images.chunks(few.pixels_per_image()) {
            out.push(img, k)?;
        }
    }
    Ok(out)
}

/// One random scale / brightness / crop variant of a square image.
fn augment_image(img: &[f32], side: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let scale = rng.random_range(0.9..=1.1);
    let brightness = rng.random_range(-0.1..=0.1f32);
    let crop = side.saturating_sub(4).max(1);
    let (ox, oy) = (rng.random_range(0..=side - crop), rng.random_range(0..=side - crop));
    let pad = (side - crop) / 2;
    let c = (side as f64 - 1.0) / 2.0;
    let mut out = vec![0.0f32; side * side];
    for y in 0..crop {
        for x in 0..crop {
            let (sx, sy) = ((ox + x) as f64, (oy + y) as f64);
            let v = bilinear_sample(img, side, c + (sx - c) / scale, c + (sy - c) / scale);
            out[(y + pad) * side + x + pad] = (v + brightness).clamp(0.0, 1.0);
        }
    }
    out
}

/// The real shots plus `per_class` conventionally augmented copies per class.
pub fn augment_baseline(few: &LabeledImageSet, per_class: usize, seed: u64) -> Result<LabeledImageSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = few.clone();
    for (k, idx) in few.class_indices().iter().enumerate() {
        if idx.is_empty() {
            return Err(Error::InvalidArgument(format!("class {k} has no shots to augment")));
        }
        for _ in 0..per_class {
            let i = *idx.choose(&mut rng).expect("non-empty");
            let img = augment_image(few.image(i), few.side(), &mut rng);
            out.push(&img, k)?;
        }
    }
    Ok(out)
}

/// Trains the protocol's classifier on `train` and returns test accuracy in percent.
pub fn few_shot_eval(train: &LabeledImageSet, test: &LabeledImageSet, proto: &FewShotProtocol, seed: u64) -> Result<f64> {
    proto.validate()?;
    if let Some(k) = train.class_indices().iter().position(Vec::is_empty) {
        return Err(Error::InvalidArgument(format!("class {k} has no training images")));
    }
    match proto.classifier {
        ClassifierKind::Knn => NearestNeighbor::new(train.clone())?.accuracy(test),
        ClassifierKind::Cnn => SmallCnn::train(train, &CnnConfig::default(), seed)?.accuracy(test),
        ClassifierKind::Probe => unreachable!("rejected by validate"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialSummary {
    pub mean: f64,
    /// Sample standard deviation (zero for a single trial).
    pub std: f64,
    pub trials: Vec<f64>,
}

impl TrialSummary {
    fn new(trials: Vec<f64>) -> Self {
        let n = trials.len() as f64;
        let mean = trials.iter().sum::<f64>() / n;
        let var = if trials.len() > 1 { trials.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        Self { mean, std: var.sqrt(), trials }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FewShotReport {
    pub protocol: FewShotProtocol,
    /// Shots plus decoded neighbor interpolations.
    pub hallucinated: TrialSummary,
    /// Shots plus scale / brightness / crop variants, same count.
    pub augmented: TrialSummary,
    /// Shots alone.
    pub real_only: TrialSummary,
}

impl FewShotReport {
    pub fn margin(&self) -> f64 {
        self.hallucinated.mean - self.augmented.mean
    }
}

/// Runs `proto.trials` episodes; each draws fresh shots from `train` and evaluates on `test`.
pub fn run_few_shot_experiment(
    ckpt: &Checkpoint,
    train: &LabeledImageSet,
    test: &LabeledImageSet,
    graph: &SemanticNeighborGraph,
    proto: &FewShotProtocol,
) -> Result<FewShotReport> {
    proto.validate()?;
    let (mut hal, mut aug, mut real) = (Vec::new(), Vec::new(), Vec::new());
    for t in 0..proto.trials {
        let s = proto.trial_seed(t);
        let few = sample_shots(train, proto.shots, s)?;
        let h = hallucinate(ckpt, &few, graph, proto, s ^ 1)?;
        let a = augment_baseline(&few, proto.hallucinated_per_class, s ^ 2)?;
        hal.push(few_shot_eval(&h, test, proto, s ^ 3)?);
        aug.push(few_shot_eval(&a, test, proto, s ^ 3)?);
        real.push(few_shot_eval(&few, test, proto, s ^ 3)?);
    }
    Ok(FewShotReport {
        protocol: *proto,
        hallucinated: TrialSummary::new(hal),
        augmented: TrialSummary::new(aug),
        real_only: TrialSummary::new(real),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_digit_neighbor_graph, build_pose_neighbor_graph};
    use crate::model::{Vae, IMAGE_PIXELS};
    use crate::training::TrainingConfig;

    fn ckpt() -> Checkpoint {
        let config = TrainingConfig::default();
        Checkpoint { model: Vae::new(config.d_z, 2).unwrap(), config, epoch: 0, history: Vec::new() }
    }

    fn random_set(n: usize, classes: usize, seed: u64) -> LabeledImageSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pixels = (0..n * IMAGE_PIXELS).map(|_| rng.random()).collect();
        LabeledImageSet::new(pixels, (0..n).map(|i| i % classes).collect(), classes, 32).unwrap()
    }

    #[test]
    fn shots_are_balanced_and_seeded() {
        let data = random_set(100, 10, 1);
        let few = sample_shots(&data, 5, 3).unwrap();
        assert_eq!(few.len(), 50);
        assert!(few.class_indices().iter().all(|c| c.len() == 5));
        assert_eq!(few, sample_shots(&data, 5, 3).unwrap());
        // Classes smaller than the shot count are drawn with replacement.
        assert_eq!(sample_shots(&data, 12, 0).unwrap().len(), 120);
    }

    #[test]
    fn hallucination_count_range_and_labels() {
        let c = ckpt();
        let few = sample_shots(&random_set(100, 10, 1), 5, 0).unwrap();
        let proto = FewShotProtocol::default();
        let out = hallucinate(&c, &few, &build_digit_neighbor_graph(), &proto, 7).unwrap();
        assert_eq!(out.len(), 10 * (5 + 20));
        assert!(out.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(out.class_indices().iter().all(|c| c.len() == 25));
        assert_eq!(&out.pixels()[..few.pixels().len()], few.pixels());
        assert_eq!(out, hallucinate(&c, &few, &build_digit_neighbor_graph(), &proto, 7).unwrap());
    }

    #[test]
    fn hallucination_of_one_from_zero_and_two_is_an_image() {
        let c = ckpt();
        let set = random_set(3, 3, 4);
        let few = set.subset(&[0, 2]);
        let graph = SemanticNeighborGraph::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        let mut three = LabeledImageSet::empty(3, 32);
        three.extend_from(&few).unwrap();
        three.push(set.image(1), 1).unwrap();
        let proto = FewShotProtocol { hallucinated_per_class: 1, ..FewShotProtocol::default() };
        let out = hallucinate(&c, &three, &graph, &proto, 0).unwrap();
        let img = out.image(3 + 1);
        assert_eq!(out.label(4), 1);
        assert_eq!(img.len(), 32 * 32);
        assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn missing_neighbor_is_reported() {
        let c = ckpt();
        let data = random_set(30, 10, 2);
        let keep: Vec<usize> = (0..30).filter(|&i| data.label(i) != 4).collect();
        let few = data.subset(&keep);
        let err = hallucinate(&c, &few, &build_digit_neighbor_graph(), &FewShotProtocol::default(), 0).unwrap_err();
        assert!(matches!(err, Error::MissingNeighbor { target: 3, class: 4 }), "{err}");
        assert!(err.to_string().contains("class 4"));
    }

    #[test]
    fn pose_endpoints_use_their_own_shots() {
        let c = ckpt();
        let few = sample_shots(&random_set(70, 7, 3), 2, 0).unwrap();
        let graph = build_pose_neighbor_graph(&[-90.0, -60.0, -30.0, 0.0, 30.0, 60.0, 90.0]).unwrap();
        let proto = FewShotProtocol { hallucinated_per_class: 3, ..FewShotProtocol::default() };
        let out = hallucinate(&c, &few, &graph, &proto, 1).unwrap();
        assert_eq!(out.len(), 7 * 5);
    }

    #[test]
    fn augmentation_count_range_and_determinism() {
        let few = sample_shots(&random_set(50, 10, 5), 3, 0).unwrap();
        let a = augment_baseline(&few, 4, 9).unwrap();
        assert_eq!(a.len(), 10 * 7);
        assert!(a.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a, augment_baseline(&few, 4, 9).unwrap());
        assert_ne!(a, augment_baseline(&few, 4, 10).unwrap());
    }

    #[test]
    fn augmented_image_keeps_a_blank_border() {
        let img = vec![1.0f32; 32 * 32];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = augment_image(&img, 32, &mut rng);
        assert!(out[..2 * 32].iter().all(|&v| v == 0.0));
        assert!(out[16 * 32 + 16] > 0.8);
    }

    #[test]
    fn knn_on_its_own_training_set_is_perfect() {
        let data = random_set(40, 10, 6);
        assert_eq!(few_shot_eval(&data, &data, &FewShotProtocol::default(), 0).unwrap(), 100.0);
    }

    #[test]
    fn empty_training_class_is_an_error() {
        let data = random_set(20, 10, 7);
        let keep: Vec<usize> = (0..20).filter(|&i| data.label(i) != 9).collect();
        assert!(few_shot_eval(&data.subset(&keep), &data, &FewShotProtocol::default(), 0).is_err());
    }

    #[test]
    fn experiment_reports_every_trial() {
        let c = ckpt();
        let train = random_set(60, 10, 8);
        let test = random_set(20, 10, 9);
        let proto = FewShotProtocol { shots: 2, hallucinated_per_class: 2, trials: 3, ..FewShotProtocol::default() };
        let r = run_few_shot_experiment(&c, &train, &test, &build_digit_neighbor_graph(), &proto).unwrap();
        assert_eq!(r.hallucinated.trials.len(), 3);
        assert!(r.augmented.std >= 0.0);
        assert_eq!(r, run_few_shot_experiment(&c, &train, &test, &build_digit_neighbor_graph(), &proto).unwrap());
    }
}
