//! Measurements on trained checkpoints: latent probing, interpolation strips,
//! classification of interpolated images, and few-shot hallucination.

mod classifiers;
mod export;
mod fewshot;
mod interpolation;

pub use classifiers::{
    ClassifierKind, CnnConfig, EncoderProbe, ImageClassifier, NearestNeighbor, SmallCnn,
};
pub use export::{grid_image, read_png_image, write_embeddings_csv, write_json_report, write_png_grid, JsonReport, GUTTER};
pub use fewshot::{
    augment_baseline, few_shot_eval, hallucinate, run_few_shot_experiment, sample_shots, FewShotProtocol,
    FewShotReport, TrialSummary, HALLUCINATION_OMEGA,
};
pub use interpolation::{
    classify_interpolations, interpolate_images, neighbor_pairs, ClassInterpolationResult, ImageStrip,
    InterpolationReport, INTERP_PAIRS_PER_CLASS,
};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dataset::{LabeledImageSet, SemanticNeighborGraph};
use crate::error::{Error, Result};
use crate::geometry::{angular_distance, normalize_to_sphere, UnitVector};
use crate::model::Vae;
use crate::training::Checkpoint;

/// Images encoded per forward pass during evaluation.
pub const EVAL_BATCH: usize = 250;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub index: usize,
    pub label: usize,
    pub z: UnitVector,
}

/// Normalized posterior means, one row per image.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub d_z: usize,
    pub class_count: usize,
    pub rows: Vec<EmbeddingRow>,
}

impl EmbeddingTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.label).collect()
    }

    pub fn points(&self) -> Vec<&[f64]> {
        self.rows.iter().map(|r| r.z.as_slice()).collect()
    }

    /// Row positions grouped by label.
    pub fn class_rows(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.class_count];
        for (i, r) in self.rows.iter().enumerate() {
            out[r.label].push(i);
        }
        out
    }
}

/// Normalized posterior means of raw 32x32 pixel rows.
pub fn embed_pixels(model: &Vae<f32>, pixels: &[f32], side: usize) -> Result<Vec<UnitVector>> {
    let per = side * side;
    let mut out = Vec::with_capacity(pixels.len() / per.max(1));
    for chunk in pixels.chunks(EVAL_BATCH * per) {
        let post = model.encode(chunk, side)?;
        for i in 0..post.len() {
            out.push(normalize_to_sphere(post.mu_row(i))?);
        }
    }
    Ok(out)
}

/// Noise-free embedding `normalize(mu)` of every image.
pub fn embed_with_model(model: &Vae<f32>, data: &LabeledImageSet) -> Result<EmbeddingTable> {
    let codes = embed_pixels(model, data.pixels(), data.side())?;
    Ok(EmbeddingTable {
        d_z: model.d_z(),
        class_count: data.class_count(),
        rows: codes
            .into_iter()
            .enumerate()
            .map(|(index, z)| EmbeddingRow { index, label: data.label(index), z })
            .collect(),
    })
}

pub fn embed_dataset(ckpt: &Checkpoint, data: &LabeledImageSet) -> Result<EmbeddingTable> {
    embed_with_model(&ckpt.model, data)
}

/// Softmax regression on fixed features, trained by shuffled mini-batch gradient descent.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    dim: usize,
    classes: usize,
    /// `classes x (dim + 1)`, bias last.
    weights: Vec<f64>,
}

pub const PROBE_EPOCHS: usize = 100;
pub const PROBE_LEARNING_RATE: f64 = 0.1;
pub const PROBE_BATCH: usize = 250;

impl LinearProbe {
    /// Fits on `points` with `labels` in `0..classes`; needs at least two distinct labels.
    pub fn fit(points: &[&[f64]], labels: &[usize], classes: usize, seed: u64) -> Result<Self> {
        Self::fit_with(points, labels, classes, seed, PROBE_EPOCHS, PROBE_LEARNING_RATE)
    }

    pub fn fit_with(
        points: &[&[f64]],
        labels: &[usize],
        classes: usize,
        seed: u64,
        epochs: usize,
        lr: f64,
    ) -> Result<Self> {
        if points.len() != labels.len() || points.is_empty() {
            return Err(Error::Shape(format!("{} points but {} labels", points.len(), labels.len())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!("label {l} outside {classes} classes")));
        }
        if labels.iter().all(|&l| l == labels[0]) {
            return Err(Error::InvalidArgument("linear probe needs at least two classes in training".into()));
        }
        let dim = points[0].len();
        let cols = dim + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut probe = Self {
            dim,
            classes,
            weights: (0..classes * cols).map(|_| rng.random_range(-0.01..0.01)).collect(),
        };
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut grad = vec![0.0; classes * cols];
        let mut p = vec![0.0; classes];
        for _ in 0..epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(PROBE_BATCH) {
                grad.iter_mut().for_each(|g| *g = 0.0);
                for &i in chunk {
                    let (x, y) = (points[i], labels[i]);
                    probe.softmax(x, &mut p);
                    p[y] -= 1.0;
                    for (c, &pc) in p.iter().enumerate() {
                        let row = &mut grad[c * cols..(c + 1) * cols];
                        for (g, &xi) in row.iter_mut().zip(x.iter()) {
                            *g += pc * xi;
                        }
                        row[dim] += pc;
                    }
                }
                let step = lr / chunk.len() as f64;
                for (w, g) in probe.weights.iter_mut().zip(&grad) {
                    *w -= step * g;
                }
            }
        }
        Ok(probe)
    }

    fn logits(&self, x: &[f64], out: &mut [f64]) {
        let cols = self.dim + 1;
        for (c, o) in out.iter_mut().enumerate() {
            let row = &self.weights[c * cols..(c + 1) * cols];
            *o = row[..self.dim].iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + row[self.dim];
        }
    }

    fn softmax(&self, x: &[f64], out: &mut [f64]) {
        self.logits(x, out);
        let m = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for o in out.iter_mut() {
            *o = (*o - m).exp();
            s += *o;
        }
        out.iter_mut().for_each(|o| *o /= s);
    }

    /// Arg-max class; ties go to the lower index.
    pub fn predict(&self, x: &[f64]) -> usize {
        let mut l = vec![0.0; self.classes];
        self.logits(x, &mut l);
        argmax(&l)
    }

    /// Percentage of `points` predicted as their label.
    pub fn accuracy(&self, points: &[&[f64]], labels: &[usize]) -> f64 {
        if points.is_empty() {
            return 0.0;
        }
        let hits = points.iter().zip(labels).filter(|(x, &y)| self.predict(x) == y).count();
        100.0 * hits as f64 / points.len() as f64
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Trains a probe on `train_emb` and returns its test accuracy in percent.
pub fn linear_probe(train_emb: &EmbeddingTable, test_emb: &EmbeddingTable, seed: u64) -> Result<f64> {
    if train_emb.d_z != test_emb.d_z {
        return Err(Error::Shape(format!("train d_z {} vs test d_z {}", train_emb.d_z, test_emb.d_z)));
    }
    let classes = train_emb.class_count.max(test_emb.class_count);
    let probe = LinearProbe::fit(&train_emb.points(), &train_emb.labels(), classes, seed)?;
    Ok(probe.accuracy(&test_emb.points(), &test_emb.labels()))
}

/// Mean angular distance between class centroids, split by neighbor relation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CentroidGeometry {
    /// `distances[a][b]`: angle between normalized class-mean embeddings.
    pub distances: Vec<Vec<f64>>,
    pub neighbor_mean: f64,
    pub non_neighbor_mean: f64,
}

pub fn centroid_geometry(emb: &EmbeddingTable, graph: &SemanticNeighborGraph) -> Result<CentroidGeometry> {
    let mut sums = vec![vec![0.0; emb.d_z]; emb.class_count];
    for r in &emb.rows {
        for (s, v) in sums[r.label].iter_mut().zip(r.z.iter()) {
            *s += v;
        }
    }
    let centroids: Vec<UnitVector> = sums.iter().map(|s| normalize_to_sphere(s)).collect::<Result<_>>()?;
    let k = centroids.len();
    let mut distances = vec![vec![0.0; k]; k];
    let (mut nb, mut nn) = (Vec::new(), Vec::new());
    for a in 0..k {
        for b in 0..k {
            distances[a][b] = angular_distance(&centroids[a], &centroids[b]);
            if a < b {
                if graph.are_neighbors(a, b) {
                    nb.push(distances[a][b]);
                } else {
                    nn.push(distances[a][b]);
                }
            }
        }
    }
    let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
    Ok(CentroidGeometry { neighbor_mean: mean(&nb), non_neighbor_mean: mean(&nn), distances })
}
