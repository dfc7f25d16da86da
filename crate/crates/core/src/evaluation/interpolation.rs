use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{embed_pixels, EmbeddingTable, ImageClassifier};
use crate::dataset::SemanticNeighborGraph;
use crate::error::{Error, Result};
use crate::geometry::{interpolation_sweep, lerp, normalize_to_sphere, slerp, InterpolationMode, InterpolationRequest};
use crate::model::{Vae, IMAGE_SIDE};
use crate::training::Checkpoint;

/// Default number of neighbor pairs drawn per class when classifying interpolations.
pub const INTERP_PAIRS_PER_CLASS: usize = 50;

/// Decoded frames of one interpolation sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageStrip {
    pub side: usize,
    pub mode: InterpolationMode,
    pub omegas: Vec<f64>,
    /// Linear-mode points were projected back onto the sphere before decoding.
    pub renormalized_linear: bool,
    #[serde(skip)]
    pub frames: Vec<Vec<f32>>,
}

fn decode_points(model: &Vae<f32>, points: &[Vec<f64>]) -> Result<Vec<Vec<f32>>> {
    let flat: Vec<f64> = points.iter().flatten().copied().collect();
    let pixels = model.decode_raw(&flat)?;
    Ok(pixels.chunks(IMAGE_SIDE * IMAGE_SIDE).map(<[f32]>::to_vec).collect())
}

/// Embeds both images (noise-free, normalized), sweeps `steps` points between them, and decodes.
///
/// With `decode_normalized` set in the checkpoint's config, linear-mode points are
/// renormalized first so every decoded code lies where the decoder was trained.
pub fn interpolate_images(
    ckpt: &Checkpoint,
    image_a: &[f32],
    image_b: &[f32],
    steps: usize,
    mode: InterpolationMode,
) -> Result<ImageStrip> {
    let model = &ckpt.model;
    let mut pixels = image_a.to_vec();
    pixels.extend_from_slice(image_b);
    let mut codes = embed_pixels(model, &pixels, IMAGE_SIDE)?;
    if codes.len() != 2 {
        return Err(Error::Shape(format!("expected two {IMAGE_SIDE}x{IMAGE_SIDE} images")));
    }
    let zb = codes.pop().expect("two codes");
    let za = codes.pop().expect("two codes");
    let req = InterpolationRequest::new(za, zb, 0.0, mode)?;
    let mut points = interpolation_sweep(&req, steps)?;
    let renormalize = mode == InterpolationMode::Linear && ckpt.config.decode_normalized;
    if renormalize {
        points = points
            .iter()
            .map(|p| normalize_to_sphere(p).map(|u| u.into_inner()))
            .collect::<Result<_>>()?;
    }
    let omegas = (0..steps)
        .map(|k| if k + 1 == steps { 1.0 } else { k as f64 / (steps - 1) as f64 })
        .collect();
    Ok(ImageStrip {
        side: IMAGE_SIDE,
        mode,
        omegas,
        renormalized_linear: renormalize,
        frames: decode_points(model, &points)?,
    })
}

/// Accuracy of the images synthesized for one target class.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassInterpolationResult {
    pub class: usize,
    /// `None` when the class lacks two neighbor classes with embeddings.
    pub accuracy: Option<f64>,
    pub samples: usize,
    pub neighbors: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InterpolationReport {
    pub mode: InterpolationMode,
    pub omega: f64,
    pub per_class: Vec<ClassInterpolationResult>,
    /// Mean accuracy over classes that were not skipped.
    pub mean_accuracy: f64,
}

impl InterpolationReport {
    pub fn classes_above(&self, threshold: f64) -> usize {
        self.per_class.iter().filter(|c| c.accuracy.is_some_and(|a| a > threshold)).count()
    }

    pub fn evaluated_classes(&self) -> usize {
        self.per_class.iter().filter(|c| c.accuracy.is_some()).count()
    }
}

/// For every class with exactly two neighbor classes, `count` random (row, row) pairs drawing
/// one embedding from each neighbor. Other classes get `None`.
pub fn neighbor_pairs(
    emb: &EmbeddingTable,
    graph: &SemanticNeighborGraph,
    count: usize,
    seed: u64,
) -> Vec<Option<Vec<(usize, usize)>>> {
    let by_class = emb.class_rows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..emb.class_count)
        .map(|k| {
            let nb: Vec<usize> = graph.neighbors(k).iter().copied().collect();
            let [lo, hi] = nb[..] else { return None };
            let (a, b) = (by_class.get(lo)?, by_class.get(hi)?);
            if a.is_empty() || b.is_empty() {
                return None;
            }
            Some(
                (0..count)
                    .map(|_| (a[rng.random_range(0..a.len())], b[rng.random_range(0..b.len())]))
                    .collect(),
            )
        })
        .collect()
}

/// Decodes the interpolation of each neighbor pair at `omega` and reports the fraction the
/// classifier assigns to the target class.
///
/// Linear mode decodes the chord point itself (it is not projected back onto the sphere),
/// so it measures what leaving the sphere does to the decoder.
pub fn classify_interpolations(
    ckpt: &Checkpoint,
    emb: &EmbeddingTable,
    graph: &SemanticNeighborGraph,
    pairs: &[Option<Vec<(usize, usize)>>],
    mode: InterpolationMode,
    omega: f64,
    classifier: &dyn ImageClassifier,
) -> Result<InterpolationReport> {
    let mut per_class = Vec::with_capacity(pairs.len());
    for (k, class_pairs) in pairs.iter().enumerate() {
        let neighbors: Vec<usize> = graph.neighbors(k).iter().copied().collect();
        let Some(class_pairs) = class_pairs.as_ref().filter(|p| !p.is_empty()) else {
            per_class.push(ClassInterpolationResult { class: k, accuracy: None, samples: 0, neighbors });
            continue;
        };
        let points = class_pairs
            .iter()
            .map(|&(a, b)| {
                let (za, zb) = (&emb.rows[a].z, &emb.rows[b].z);
                match mode {
                    InterpolationMode::Spherical => slerp(za, zb, omega).map(|u| u.into_inner()),
                    InterpolationMode::Linear => Ok(lerp(za, zb, omega)),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let images: Vec<f32> = decode_points(&ckpt.model, &points)?.concat();
        let predicted = classifier.predict(&images, IMAGE_SIDE)?;
        let hits = predicted.iter().filter(|&&p| p == k).count();
        per_class.push(ClassInterpolationResult {
            class: k,
            accuracy: Some(100.0 * hits as f64 / predicted.len() as f64),
            samples: predicted.len(),
            neighbors,
        });
    }
    let scored: Vec<f64> = per_class.iter().filter_map(|c| c.accuracy).collect();
    let mean_accuracy = if scored.is_empty() { f64::NAN } else { scored.iter().sum::<f64>() / scored.len() as f64 };
    Ok(InterpolationReport { mode, omega, per_class, mean_accuracy })
}
