use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{argmax, embed_pixels, embed_with_model, LinearProbe};
use crate::dataset::LabeledImageSet;
use crate::error::{Error, Result};
use crate::model::Vae;
use crate::nn::{
    gemm, leaky_relu, leaky_relu_backward, to_channel_major, to_sample_major, Adam, Conv2d, ConvGeometry, Linear,
    Param,
};

/// Labels batches of images (row-major, `side * side` pixels each).
pub trait ImageClassifier {
    fn predict(&self, pixels: &[f32], side: usize) -> Result<Vec<usize>>;

    fn accuracy(&self, data: &LabeledImageSet) -> Result<f64> {
        if data.is_empty() {
            return Ok(0.0);
        }
        let pred = self.predict(data.pixels(), data.side())?;
        let hits = pred.iter().zip(data.labels()).filter(|(p, y)| p == y).count();
        Ok(100.0 * hits as f64 / data.len() as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierKind {
    /// Linear probe on the encoder's normalized means.
    Probe,
    /// 1-nearest neighbor on pixels.
    Knn,
    /// Two-stage convolutional network.
    Cnn,
}

impl FromStr for ClassifierKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "probe" => Ok(Self::Probe),
            "knn" => Ok(Self::Knn),
            "cnn" => Ok(Self::Cnn),
            _ => Err(Error::InvalidArgument(format!("unknown classifier {s:?} (expected probe, knn or cnn)"))),
        }
    }
}

impl fmt::Display for ClassifierKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Probe => "probe",
            Self::Knn => "knn",
            Self::Cnn => "cnn",
        })
    }
}

/// Encode, normalize, then apply a linear probe fitted on real embeddings.
pub struct EncoderProbe<'a> {
    pub model: &'a Vae<f32>,
    pub probe: LinearProbe,
}

impl<'a> EncoderProbe<'a> {
    pub fn fit(model: &'a Vae<f32>, train: &LabeledImageSet, seed: u64) -> Result<Self> {
        let emb = embed_with_model(model, train)?;
        let probe = LinearProbe::fit(&emb.points(), &emb.labels(), train.class_count(), seed)?;
        Ok(Self { model, probe })
    }
}

impl ImageClassifier for EncoderProbe<'_> {
    fn predict(&self, pixels: &[f32], side: usize) -> Result<Vec<usize>> {
        Ok(embed_pixels(self.model, pixels, side)?.iter().map(|z| self.probe.predict(z)).collect())
    }
}

/// 1-nearest neighbor under Euclidean pixel distance; ties go to the lowest training index.
pub struct NearestNeighbor {
    train: LabeledImageSet,
    sq_norms: Vec<f32>,
}

impl NearestNeighbor {
    pub fn new(train: LabeledImageSet) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::InvalidArgument("nearest-neighbor classifier needs training images".into()));
        }
        let sq_norms = (0..train.len()).map(|i| train.image(i).iter().map(|v| v * v).sum()).collect();
        Ok(Self { train, sq_norms })
    }
}

impl ImageClassifier for NearestNeighbor {
    fn predict(&self, pixels: &[f32], side: usize) -> Result<Vec<usize>> {
        if side != self.train.side() {
            return Err(Error::Shape(format!("query side {side} vs training side {}", self.train.side())));
        }
        let p = self.train.pixels_per_image();
        let n = self.train.len();
        let mut out = Vec::with_capacity(pixels.len() / p);
        for chunk in pixels.chunks(256 * p) {
            let q = chunk.len() / p;
            let mut dots = vec![0.0f32; q * n];
            gemm(false, true, q, n, p, 1.0, chunk, self.train.pixels(), 0.0, &mut dots);
            for row in dots.chunks(n) {
                // |q|^2 is constant per query, so it is left out of the comparison.
                let mut best = (f32::INFINITY, 0);
                for (j, &d) in row.iter().enumerate() {
                    let dist = self.sq_norms[j] - 2.0 * d;
                    if dist < best.0 {
                        best = (dist, j);
                    }
                }
                out.push(self.train.label(best.1));
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CnnConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self { epochs: 20, batch_size: 32, learning_rate: 1e-3 }
    }
}

/// conv(1->16) -> conv(16->32) -> dense(2048 -> classes), 4x4 stride-2 kernels on 32x32 input.
#[derive(Debug, Clone)]
pub struct SmallCnn {
    conv: [Conv2d<f32>; 2],
    fc: Linear<f32>,
    classes: usize,
}

const CNN_SIDE: usize = 32;

struct CnnTrace {
    input: Vec<f32>,
    a: [Vec<f32>; 2],
    flat: Vec<f32>,
}

impl SmallCnn {
    pub fn new(classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g1 = ConvGeometry::new(4, 2, 1, 32, 32);
        let g2 = ConvGeometry::new(4, 2, 1, 16, 16);
        Self {
            conv: [Conv2d::new(1, 16, g1, &mut rng), Conv2d::new(16, 32, g2, &mut rng)],
            fc: Linear::new(32 * 8 * 8, classes, &mut rng),
            classes,
        }
    }

    fn forward(&self, x: &[f32], batch: usize) -> (CnnTrace, Vec<f32>) {
        let mut a0 = self.conv[0].forward(x, batch);
        leaky_relu(&mut a0);
        let mut a1 = self.conv[1].forward(&a0, batch);
        leaky_relu(&mut a1);
        let flat = to_sample_major(&a1, 32, batch, 64);
        let logits = self.fc.forward(&flat, batch);
        (CnnTrace { input: x.to_vec(), a: [a0, a1], flat }, logits)
    }

    fn params_mut(&mut self) -> Vec<&mut Param<f32>> {
        let [c0, c1] = &mut self.conv;
        let mut v: Vec<&mut Param<f32>> = Vec::new();
        v.extend(c0.params_mut());
        v.extend(c1.params_mut());
        v.extend(self.fc.params_mut());
        v
    }

    /// Trains with softmax cross-entropy and Adam on shuffled minibatches.
    pub fn train(data: &LabeledImageSet, cfg: &CnnConfig, seed: u64) -> Result<Self> {
        if data.side() != CNN_SIDE {
            return Err(Error::Shape(format!("classifier expects {CNN_SIDE}x{CNN_SIDE} images, got {}", data.side())));
        }
        if data.is_empty() {
            return Err(Error::InvalidArgument("classifier needs training images".into()));
        }
        let mut net = Self::new(data.class_count(), seed);
        let mut opt = Adam::new(cfg.learning_rate);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x636e_6e00);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let p = data.pixels_per_image();
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for idx in order.chunks(cfg.batch_size.max(1)) {
                let b = idx.len();
                let mut x = Vec::with_capacity(b * p);
                for &i in idx {
                    x.extend_from_slice(data.image(i));
                }
                let (trace, logits) = net.forward(&x, b);
                let mut d = softmax_rows(&logits, net.classes);
                for (k, &i) in idx.iter().enumerate() {
                    d[k * net.classes + data.label(i)] -= 1.0;
                }
                d.iter_mut().for_each(|v| *v /= b as f32);
                for param in net.params_mut() {
                    param.zero_grad();
                }
                net.backward(&trace, &d, b);
                opt.step(&mut net.params_mut());
            }
        }
        Ok(net)
    }

    fn backward(&mut self, t: &CnnTrace, d_logits: &[f32], b: usize) {
        let g = self.fc.backward(&t.flat, d_logits, b, true);
        let mut g = to_channel_major(&g, 32, b, 64);
        leaky_relu_backward(&t.a[1], &mut g);
        let mut g = self.conv[1].backward(&t.a[0], &g, b, true);
        leaky_relu_backward(&t.a[0], &mut g);
        self.conv[0].backward(&t.input, &g, b, false);
    }
}

fn softmax_rows(logits: &[f32], classes: usize) -> Vec<f32> {
    let mut out = logits.to_vec();
    for row in out.chunks_mut(classes) {
        let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    out
}

impl ImageClassifier for SmallCnn {
    fn predict(&self, pixels: &[f32], side: usize) -> Result<Vec<usize>> {
        if side != CNN_SIDE {
            return Err(Error::Shape(format!("classifier expects {CNN_SIDE}x{CNN_SIDE} images, got {side}")));
        }
        let p = side * side;
        let mut out = Vec::with_capacity(pixels.len() / p);
        for chunk in pixels.chunks(256 * p) {
            let b = chunk.len() / p;
            let (_, logits) = self.forward(chunk, b);
            for row in logits.chunks(self.classes) {
                let row: Vec<f64> = row.iter().map(|&v| v as f64).collect();
                out.push(argmax(&row));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Two classes: bright top half vs bright bottom half, with noise.
    fn halves(n: usize, seed: u64) -> LabeledImageSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = LabeledImageSet::empty(2, 32);
        for i in 0..n {
            let c = i % 2;
            let img: Vec<f32> = (0..1024)
                .map(|k| {
                    let top = k < 512;
                    let on = (c == 0) == top;
                    (if on { 0.7 } else { 0.1 }) + rng.random_range(-0.1..0.1f32)
                })
                .collect();
            set.push(&img, c).unwrap();
        }
        set
    }

    #[test]
    fn knn_self_match_is_perfect() {
        let data = halves(40, 1);
        let knn = NearestNeighbor::new(data.clone()).unwrap();
        assert_eq!(knn.accuracy(&data).unwrap(), 100.0);
    }

    #[test]
    fn cnn_learns_a_separable_task() {
        let train = halves(64, 2);
        let test = halves(40, 3);
        let cfg = CnnConfig { epochs: 3, ..CnnConfig::default() };
        let net = SmallCnn::train(&train, &cfg, 4).unwrap();
        assert!(net.accuracy(&test).unwrap() >= 95.0);
    }

    #[test]
    fn cnn_training_is_seeded() {
        let train = halves(16, 5);
        let cfg = CnnConfig { epochs: 1, ..CnnConfig::default() };
        let a = SmallCnn::train(&train, &cfg, 1).unwrap();
        let b = SmallCnn::train(&train, &cfg, 1).unwrap();
        assert_eq!(a.fc, b.fc);
    }
}
