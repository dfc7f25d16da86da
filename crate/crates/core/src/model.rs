//! Convolutional VAE: three stride-2 convolutions and three dense layers on each side.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{normalize_to_sphere, UnitVector};
use crate::losses::{GaussianPosterior, LOG_VAR_MAX, LOG_VAR_MIN};
use crate::nn::{
    leaky_relu, leaky_relu_backward, sigmoid, sigmoid_backward, to_channel_major, to_sample_major, Conv2d,
    ConvGeometry, ConvTranspose2d, Linear, Param, Real,
};

pub const IMAGE_SIDE: usize = 32;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;
pub const DEFAULT_LATENT_DIM: usize = 16;
/// Initial bias of the output layer: `sigmoid(-2) ~ 0.12`, close to the mean intensity of
/// digit images. Starting near 0.5 lets the first Adam steps drive the sigmoid into
/// saturation, where the L1 gradient vanishes and the decoder never recovers.
pub const OUTPUT_BIAS_INIT: f64 = -2.0;

const CHANNELS: [usize; 4] = [1, 32, 64, 128];
const FLAT: usize = 128 * 4 * 4;
const HIDDEN: [usize; 2] = [512, 256];

fn stage(in_side: usize) -> ConvGeometry {
    ConvGeometry::new(4, 2, 1, in_side, in_side)
}

/// Encoder/decoder parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Vae<T> {
    d_z: usize,
    enc_conv: [Conv2d<T>; 3],
    enc_fc: [Linear<T>; 3],
    dec_fc: [Linear<T>; 3],
    dec_conv: [ConvTranspose2d<T>; 3],
}

/// A posterior with its sample `z` and the sample projected onto the unit sphere.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub posterior: GaussianPosterior,
    /// Row-major `len * d_z`.
    pub z: Vec<f64>,
    pub z_tilde: Vec<UnitVector>,
}

/// Activations kept by [`Vae::encoder_forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct EncoderTrace<T> {
    batch: usize,
    input: Vec<T>,
    conv_out: [Vec<T>; 3],
    flat: Vec<T>,
    hidden: [Vec<T>; 2],
    /// Raw last-layer output, rows `[mu | log_var]` before clamping.
    head: Vec<T>,
}

/// Activations kept by [`Vae::decoder_forward`].
#[derive(Debug, Clone)]
pub struct DecoderTrace<T> {
    batch: usize,
    input: Vec<T>,
    hidden: [Vec<T>; 2],
    flat_cm: Vec<T>,
    deconv_out: [Vec<T>; 3],
}

impl<T: Real> EncoderTrace<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Splits the head into `mu` and the clamped `log_var`.
    pub fn posterior(&self, d_z: usize) -> Result<GaussianPosterior> {
        let mut mu = Vec::with_capacity(self.batch * d_z);
        let mut log_var = Vec::with_capacity(self.batch * d_z);
        for row in self.head.chunks(2 * d_z) {
            mu.extend(row[..d_z].iter().map(|v| v.f64()));
            log_var.extend(row[d_z..].iter().map(|v| v.f64().clamp(LOG_VAR_MIN, LOG_VAR_MAX)));
        }
        GaussianPosterior::new(d_z, mu, log_var)
    }

    /// Sign pattern of every leaky-rectified unit and every log-variance clamp.
    pub fn activation_signs(&self) -> Vec<bool> {
        let units = self.conv_out.iter().chain(&self.hidden).flatten();
        let clamps = self.head.iter().map(|v| v.f64() >= LOG_VAR_MIN && v.f64() <= LOG_VAR_MAX);
        units.map(|v| *v < T::zero()).chain(clamps).collect()
    }
}

impl<T: Real> DecoderTrace<T> {
    /// Decoded images, `batch * 32 * 32`, in `[0, 1]`.
    pub fn output(&self) -> &[T] {
        &self.deconv_out[2]
    }

    /// Sign pattern of every leaky-rectified unit.
    pub fn activation_signs(&self) -> Vec<bool> {
        let units = self.hidden.iter().chain([&self.flat_cm]).chain(&self.deconv_out[..2]).flatten();
        units.map(|v| *v < T::zero()).collect()
    }
}

impl<T: Real> Vae<T> {
    pub fn new(d_z: usize, seed: u64) -> Result<Self> {
        if d_z == 0 {
            return Err(Error::InvalidArgument("latent dimension must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = [stage(32), stage(16), stage(8)];
        let enc_conv = [0, 1, 2].map(|i| Conv2d::new(CHANNELS[i], CHANNELS[i + 1], g[i], &mut rng));
        let enc_fc = [
            Linear::new(FLAT, HIDDEN[0], &mut rng),
            Linear::new(HIDDEN[0], HIDDEN[1], &mut rng),
            Linear::new(HIDDEN[1], 2 * d_z, &mut rng),
        ];
        let dec_fc = [
            Linear::new(d_z, HIDDEN[1], &mut rng),
            Linear::new(HIDDEN[1], HIDDEN[0], &mut rng),
            Linear::new(HIDDEN[0], FLAT, &mut rng),
        ];
        let mut dec_conv = [2, 1, 0].map(|i| ConvTranspose2d::new(CHANNELS[i + 1], CHANNELS[i], g[i], &mut rng));
        dec_conv[2].bias.value.fill(T::c(OUTPUT_BIAS_INIT));
        Ok(Self { d_z, enc_conv, enc_fc, dec_fc, dec_conv })
    }

    pub fn d_z(&self) -> usize {
        self.d_z
    }

    fn check_images(&self, pixels: usize, side: usize) -> Result<usize> {
        if side != IMAGE_SIDE {
            return Err(Error::Shape(format!("encoder expects {IMAGE_SIDE}x{IMAGE_SIDE} images, got {side}x{side}")));
        }
        if !pixels.is_multiple_of(IMAGE_PIXELS) {
            return Err(Error::Shape(format!("{pixels} pixels is not a whole number of {IMAGE_SIDE}x{IMAGE_SIDE} images")));
        }
        Ok(pixels / IMAGE_PIXELS)
    }

    fn check_codes(&self, len: usize) -> Result<usize> {
        if !len.is_multiple_of(self.d_z) {
            return Err(Error::Shape(format!("{len} latent values is not a multiple of d_z={}", self.d_z)));
        }
        Ok(len / self.d_z)
    }

    /// Runs the encoder on `batch` images (`[B, 32*32]`, equal to channel-major for one channel).
    pub fn encoder_forward(&self, pixels: &[T], side: usize) -> Result<EncoderTrace<T>> {
        let batch = self.check_images(pixels.len(), side)?;
        let input = pixels.to_vec();
        let mut conv_out: [Vec<T>; 3] = Default::default();
        for i in 0..3 {
            let x = if i == 0 { &input } else { &conv_out[i - 1] };
            let mut y = self.enc_conv[i].forward(x, batch);
            leaky_relu(&mut y);
            conv_out[i] = y;
        }
        let flat = to_sample_major(&conv_out[2], CHANNELS[3], batch, 16);
        let mut h0 = self.enc_fc[0].forward(&flat, batch);
        leaky_relu(&mut h0);
        let mut h1 = self.enc_fc[1].forward(&h0, batch);
        leaky_relu(&mut h1);
        let head = self.enc_fc[2].forward(&h1, batch);
        Ok(EncoderTrace { batch, input, conv_out, flat, hidden: [h0, h1], head })
    }

    /// Accumulates encoder gradients from `dL/dmu` and `dL/dlog_var` (row-major `B * d_z`).
    ///
    /// Log-variance gradients are dropped where the clamp was active.
    pub fn encoder_backward(&mut self, trace: &EncoderTrace<T>, d_mu: &[f64], d_log_var: &[f64]) {
        let (b, d) = (trace.batch, self.d_z);
        let mut dhead = vec![T::zero(); b * 2 * d];
        for i in 0..b {
            for j in 0..d {
                dhead[i * 2 * d + j] = T::c(d_mu[i * d + j]);
                let lv = trace.head[i * 2 * d + d + j].f64();
                if (LOG_VAR_MIN..=LOG_VAR_MAX).contains(&lv) {
                    dhead[i * 2 * d + d + j] = T::c(d_log_var[i * d + j]);
                }
            }
        }
        let mut g = self.enc_fc[2].backward(&trace.hidden[1], &dhead, b, true);
        leaky_relu_backward(&trace.hidden[1], &mut g);
        let mut g = self.enc_fc[1].backward(&trace.hidden[0], &g, b, true);
        leaky_relu_backward(&trace.hidden[0], &mut g);
        let g = self.enc_fc[0].backward(&trace.flat, &g, b, true);
        let mut g = to_channel_major(&g, CHANNELS[3], b, 16);
        for i in (0..3).rev() {
            leaky_relu_backward(&trace.conv_out[i], &mut g);
            let x = if i == 0 { &trace.input } else { &trace.conv_out[i - 1] };
            g = self.enc_conv[i].backward(x, &g, b, i > 0);
        }
    }

    /// Runs the decoder on row-major codes (`B * d_z`).
    pub fn decoder_forward(&self, codes: &[T]) -> Result<DecoderTrace<T>> {
        let batch = self.check_codes(codes.len())?;
        let input = codes.to_vec();
        let mut h0 = self.dec_fc[0].forward(&input, batch);
        leaky_relu(&mut h0);
        let mut h1 = self.dec_fc[1].forward(&h0, batch);
        leaky_relu(&mut h1);
        let mut flat = self.dec_fc[2].forward(&h1, batch);
        leaky_relu(&mut flat);
        let flat_cm = to_channel_major(&flat, CHANNELS[3], batch, 16);
        let mut deconv_out: [Vec<T>; 3] = Default::default();
        for i in 0..3 {
            let x = if i == 0 { &flat_cm } else { &deconv_out[i - 1] };
            let mut y = self.dec_conv[i].forward(x, batch);
            if i < 2 {
                leaky_relu(&mut y);
            } else {
                sigmoid(&mut y);
            }
            deconv_out[i] = y;
        }
        Ok(DecoderTrace { batch, input, hidden: [h0, h1], flat_cm, deconv_out })
    }

    /// Accumulates decoder gradients from `dL/dimage`; returns `dL/dcode`.
    pub fn decoder_backward(&mut self, trace: &DecoderTrace<T>, d_out: &[T]) -> Vec<T> {
        let b = trace.batch;
        let mut g = d_out.to_vec();
        sigmoid_backward(&trace.deconv_out[2], &mut g);
        for i in (0..3).rev() {
            if i < 2 {
                leaky_relu_backward(&trace.deconv_out[i], &mut g);
            }
            let x = if i == 0 { &trace.flat_cm } else { &trace.deconv_out[i - 1] };
            g = self.dec_conv[i].backward(x, &g, b, true);
        }
        leaky_relu_backward(&trace.flat_cm, &mut g);
        let g = to_sample_major(&g, CHANNELS[3], b, 16);
        let mut g = self.dec_fc[2].backward(&trace.hidden[1], &g, b, true);
        leaky_relu_backward(&trace.hidden[1], &mut g);
        let mut g = self.dec_fc[1].backward(&trace.hidden[0], &g, b, true);
        leaky_relu_backward(&trace.hidden[0], &mut g);
        self.dec_fc[0].backward(&trace.input, &g, b, true)
    }

    /// Posterior for a batch of 32x32 images with intensities in `[0, 1]`.
    pub fn encode(&self, pixels: &[f32], side: usize) -> Result<GaussianPosterior> {
        let x: Vec<T> = pixels.iter().map(|&p| T::c(p as f64)).collect();
        self.encoder_forward(&x, side)?.posterior(self.d_z)
    }

    /// Decodes row-major codes (`B * d_z`) to `B` images in `[0, 1]`.
    pub fn decode_raw(&self, codes: &[f64]) -> Result<Vec<f32>> {
        let z: Vec<T> = codes.iter().map(|&v| T::c(v)).collect();
        let trace = self.decoder_forward(&z)?;
        Ok(trace.output().iter().map(|v| v.f64() as f32).collect())
    }

    pub fn decode(&self, codes: &[UnitVector]) -> Result<Vec<f32>> {
        if let Some(c) = codes.iter().find(|c| c.dim() != self.d_z) {
            return Err(Error::Shape(format!("code of dimension {} for a d_z={} decoder", c.dim(), self.d_z)));
        }
        let flat: Vec<f64> = codes.iter().flat_map(|c| c.iter().copied()).collect();
        self.decode_raw(&flat)
    }

    /// Parameters in a fixed order with stable names.
    pub fn named_params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.enc_conv.iter().enumerate() {
            out.push((format!("encoder/conv{i}/weight"), &l.weight));
            out.push((format!("encoder/conv{i}/bias"), &l.bias));
        }
        for (i, l) in self.enc_fc.iter().enumerate() {
            out.push((format!("encoder/fc{i}/weight"), &l.weight));
            out.push((format!("encoder/fc{i}/bias"), &l.bias));
        }
        for (i, l) in self.dec_fc.iter().enumerate() {
            out.push((format!("decoder/fc{i}/weight"), &l.weight));
            out.push((format!("decoder/fc{i}/bias"), &l.bias));
        }
        for (i, l) in self.dec_conv.iter().enumerate() {
            out.push((format!("decoder/deconv{i}/weight"), &l.weight));
            out.push((format!("decoder/deconv{i}/bias"), &l.bias));
        }
        out
    }

    /// Same order as [`Vae::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::new();
        for l in &mut self.enc_conv {
            out.extend(l.params_mut());
        }
        for l in &mut self.enc_fc {
            out.extend(l.params_mut());
        }
        for l in &mut self.dec_fc {
            out.extend(l.params_mut());
        }
        for l in &mut self.dec_conv {
            out.extend(l.params_mut());
        }
        out
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    pub fn parameter_count(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named_params().iter().all(|(_, p)| p.value.iter().all(|v| v.is_finite()))
    }

    /// Rebuilds a model from named value blocks; every block must be present with its exact size.
    pub fn from_named_values(d_z: usize, blocks: &[(String, Vec<T>)]) -> Result<Self> {
        let mut model = Self::new(d_z, 0)?;
        let names: Vec<(String, usize)> = model.named_params().iter().map(|(n, p)| (n.clone(), p.len())).collect();
        for ((name, len), param) in names.into_iter().zip(model.params_mut()) {
            let (_, values) = blocks
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| Error::Shape(format!("missing parameter block {name}")))?;
            if values.len() != len {
                return Err(Error::Shape(format!(
                    "parameter block {name} has {} values, a d_z={d_z} model needs {len}",
                    values.len()
                )));
            }
            param.value.clone_from(values);
        }
        Ok(model)
    }

    /// Converts parameter precision.
    pub fn cast<U: Real>(&self) -> Vae<U> {
        let blocks: Vec<(String, Vec<U>)> = self
            .named_params()
            .into_iter()
            .map(|(n, p)| (n, p.cast::<U>().value))
            .collect();
        Vae::from_named_values(self.d_z, &blocks).expect("same architecture")
    }
}

/// `z = mu + exp(log_var / 2) * noise`, plus its projection onto the unit sphere.
pub fn reparameterize(post: &GaussianPosterior, noise: &[f64]) -> Result<LatentCode> {
    if noise.len() != post.mu().len() {
        return Err(Error::Shape(format!(
            "{} noise values for {} posterior means",
            noise.len(),
            post.mu().len()
        )));
    }
    let z: Vec<f64> = post
        .mu()
        .iter()
        .zip(post.log_var())
        .zip(noise)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect();
    let z_tilde = z.chunks(post.d_z()).map(normalize_to_sphere).collect::<Result<_>>()?;
    Ok(LatentCode { posterior: post.clone(), z, z_tilde })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn images(n: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n * IMAGE_PIXELS).map(|_| rng.random::<f32>()).collect()
    }

    #[test]
    fn encoder_shapes_and_determinism() {
        let m = Vae::<f32>::new(16, 1).unwrap();
        let mut x = images(7, 2);
        x.copy_within(IMAGE_PIXELS..2 * IMAGE_PIXELS, 0);
        let post = m.encode(&x, 32).unwrap();
        assert_eq!(post.len(), 7);
        assert_eq!(post.mu().len(), 7 * 16);
        assert_eq!(post.mu_row(0), post.mu_row(1));
        assert_eq!(post.log_var_row(0), post.log_var_row(1));
        assert_eq!(post, m.encode(&x, 32).unwrap());
        assert!(matches!(m.encode(&images(1, 0)[..784], 28), Err(Error::Shape(_))));
    }

    #[test]
    fn fresh_model_means_are_bounded() {
        let m = Vae::<f32>::new(16, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<f32> = (0..4 * IMAGE_PIXELS).map(|_| rng.sample(StandardNormal)).collect();
        let post = m.encode(&x, 32).unwrap();
        assert!(post.mu().iter().all(|v| v.is_finite() && v.abs() < 100.0));
    }

    #[test]
    fn decoder_shapes_range_and_determinism() {
        let m = Vae::<f32>::new(16, 5).unwrap();
        let codes: Vec<UnitVector> = (0..5).map(|i| UnitVector::axis(16, i % 2)).collect();
        let out = m.decode(&codes).unwrap();
        assert_eq!(out.len(), 5 * IMAGE_PIXELS);
        assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(out[..IMAGE_PIXELS], out[2 * IMAGE_PIXELS..3 * IMAGE_PIXELS]);
        assert!(matches!(m.decode(&[UnitVector::axis(8, 0)]), Err(Error::Shape(_))));
    }

    #[test]
    fn slerp_endpoint_decodes_like_the_endpoint() {
        let m = Vae::<f32>::new(16, 6).unwrap();
        let a = normalize_to_sphere(&[0.3; 16]).unwrap();
        let b = UnitVector::axis(16, 3);
        let s = crate::geometry::slerp(&a, &b, 0.0).unwrap();
        assert_eq!(m.decode(&[s]).unwrap(), m.decode(&[a]).unwrap());
    }

    #[test]
    fn reparameterization() {
        let post = GaussianPosterior::new(1, vec![0.0], vec![0.0]).unwrap();
        assert_eq!(reparameterize(&post, &[1.0]).unwrap().z, vec![1.0]);
        let post = GaussianPosterior::new(2, vec![0.5, -2.0], vec![0.3, -1.0]).unwrap();
        let code = reparameterize(&post, &[0.0, 0.0]).unwrap();
        assert_eq!(code.z, post.mu());
        assert!((crate::geometry::norm(&code.z_tilde[0]) - 1.0).abs() < 1e-9);
        let zero = GaussianPosterior::new(2, vec![0.0, 0.0], vec![0.0, 0.0]).unwrap();
        assert!(matches!(reparameterize(&zero, &[0.0, 0.0]), Err(Error::Degenerate(_))));
        assert!(reparameterize(&post, &[0.0]).is_err());
    }

    #[test]
    fn reparameterized_mean_matches_mu() {
        let (mu, lv) = (0.7, 0.4f64);
        let post = GaussianPosterior::new(1, vec![mu], vec![lv]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let mean = (0..n)
            .map(|_| reparameterize(&post, &[rng.sample(StandardNormal)]).unwrap().z[0])
            .sum::<f64>()
            / n as f64;
        let sigma = (0.5 * lv).exp();
        assert!((mean - mu).abs() < 3.0 * sigma / (n as f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn named_value_round_trip_and_shape_errors() {
        let m = Vae::<f32>::new(16, 8).unwrap();
        let blocks: Vec<(String, Vec<f32>)> = m.named_params().into_iter().map(|(n, p)| (n, p.value.clone())).collect();
        assert_eq!(Vae::from_named_values(16, &blocks).unwrap(), m);
        assert!(matches!(Vae::<f32>::from_named_values(32, &blocks), Err(Error::Shape(_))));
        assert!(matches!(Vae::<f32>::from_named_values(16, &blocks[1..]), Err(Error::Shape(_))));
        assert_eq!(m.cast::<f64>().cast::<f32>(), m);
    }
}
