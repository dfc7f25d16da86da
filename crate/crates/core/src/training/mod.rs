//! Optimization loop for the VAE and its ablation variants.

mod checkpoint;
mod config;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, EpochRecord, MAGIC, VERSION};
pub use config::{TrainingConfig, Variant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dataset::{BalancedSampler, Batch, LabeledImageSet, SemanticNeighborGraph};
use crate::error::{Error, Result};
use crate::geometry::{dot, norm};
use crate::losses::{
    kl_standard_normal_with_grad, mine_triplets_with, reconstruction_l1_with_grad, total_loss,
    triplet_hinge_with_grad, Metric, TripletLoss,
};
use crate::model::{DecoderTrace, EncoderTrace, Vae, IMAGE_SIDE};
use crate::nn::{clip_global_norm, Adam, Real};

/// Derives an independent generator seed for one purpose from the run seed.
pub fn stream_seed(seed: u64, purpose: u64) -> u64 {
    seed ^ purpose.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

const MODEL_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;

/// Loss terms of one step (unweighted) and their weighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepLosses {
    pub rec: f64,
    pub kl: f64,
    pub atn: f64,
    pub total: f64,
    pub triplets: usize,
    pub active: usize,
}

fn finite(value: f64, component: &'static str, step: usize) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFiniteLoss { component, step })
    }
}

/// Everything the backward pass needs from one forward pass.
pub struct ForwardPass<T> {
    pub losses: StepLosses,
    enc: EncoderTrace<T>,
    dec: DecoderTrace<T>,
    sigma: Vec<f64>,
    noise: Vec<f64>,
    z_tilde: Vec<f64>,
    norms: Vec<f64>,
    rec_grad: Vec<T>,
    kl_grad: (Vec<f64>, Vec<f64>),
    triplet_grad: Vec<Vec<f64>>,
    triplet_on_sphere: bool,
}

impl<T: Real> ForwardPass<T> {
    /// Which side of every kink (rectifier, clamp) the pass landed on.
    pub fn activation_signs(&self) -> Vec<bool> {
        let mut s = self.enc.activation_signs();
        s.extend(self.dec.activation_signs());
        s
    }
}

/// Encodes, samples, decodes, and evaluates every active loss term for one batch.
///
/// `noise` holds the standard-normal draws for the reparameterization (`B * d_z`); it is
/// ignored by the `ae` variant. `step` only labels diagnostics.
pub fn forward_pass<T: Real>(
    model: &Vae<T>,
    cfg: &TrainingConfig,
    graph: &SemanticNeighborGraph,
    pixels: &[T],
    labels: &[usize],
    noise: &[f64],
    step: usize,
) -> Result<ForwardPass<T>> {
    let d = model.d_z();
    let enc = model.encoder_forward(pixels, IMAGE_SIDE)?;
    let b = enc.batch();
    if labels.len() != b {
        return Err(Error::Shape(format!("{b} images but {} labels", labels.len())));
    }
    let post = enc.posterior(d).map_err(|_| Error::NonFiniteLoss { component: "encoder output", step })?;
    let sampling = cfg.variant.samples();
    if sampling && noise.len() != b * d {
        return Err(Error::Shape(format!("{} noise values for {b} codes of size {d}", noise.len())));
    }

    let sigma: Vec<f64> = post.log_var().iter().map(|lv| (0.5 * lv).exp()).collect();
    let z: Vec<f64> = if sampling {
        (0..b * d).map(|i| post.mu()[i] + sigma[i] * noise[i]).collect()
    } else {
        post.mu().to_vec()
    };
    let norms: Vec<f64> = z.chunks(d).map(norm).collect();
    if let Some(i) = norms.iter().position(|&n| n < crate::geometry::NORM_EPS) {
        return Err(Error::Degenerate(format!("latent code {i} has zero norm at step {step}")));
    }
    let z_tilde: Vec<f64> = z.chunks(d).zip(&norms).flat_map(|(row, &n)| row.iter().map(move |v| v / n)).collect();

    let decoder_input = if cfg.decode_normalized { &z_tilde } else { &z };
    let dec_in: Vec<T> = decoder_input.iter().map(|&v| T::c(v)).collect();
    let dec = model.decoder_forward(&dec_in)?;
    let (rec, rec_grad) = reconstruction_l1_with_grad(pixels, dec.output())?;
    finite(rec, "reconstruction loss", step)?;

    let (kl, kl_dmu, kl_dlv) = if sampling {
        let (v, dm, dl) = kl_standard_normal_with_grad(&post)?;
        (finite(v, "KL loss", step)?, dm, dl)
    } else {
        (0.0, vec![0.0; b * d], vec![0.0; b * d])
    };

    // Angular on the unit sphere, or Euclidean on raw codes with class-only positives.
    let (trip, triplet_grad, triplet_on_sphere, mined) = match cfg.variant {
        Variant::VaeAtnl => {
            let rows: Vec<&[f64]> = z_tilde.chunks(d).collect();
            let set = mine_triplets_with(&rows, labels, graph, Metric::Angular, cfg.mining)?;
            let (l, g) = triplet_hinge_with_grad(&rows, &set, cfg.margin, Metric::Angular)?;
            (l, g, true, set.count())
        }
        Variant::VaeTl => {
            let rows: Vec<&[f64]> = z.chunks(d).collect();
            let class_only = SemanticNeighborGraph::class_only(graph.class_count());
            let set = mine_triplets_with(&rows, labels, &class_only, Metric::Euclidean, cfg.mining)?;
            let (l, g) = triplet_hinge_with_grad(&rows, &set, cfg.margin, Metric::Euclidean)?;
            (l, g, false, set.count())
        }
        Variant::Ae | Variant::Vae => (TripletLoss { value: 0.0, active: 0, no_triplets: true }, Vec::new(), false, 0),
    };
    finite(trip.value, "triplet loss", step)?;
    let total = finite(total_loss(rec, kl, trip.value, &cfg.weights()), "total loss", step)?;

    Ok(ForwardPass {
        losses: StepLosses { rec, kl, atn: trip.value, total, triplets: mined, active: trip.active },
        enc,
        dec,
        sigma,
        noise: if sampling { noise.to_vec() } else { Vec::new() },
        z_tilde,
        norms,
        rec_grad,
        kl_grad: (kl_dmu, kl_dlv),
        triplet_grad,
        triplet_on_sphere,
    })
}

/// Adds the gradient of the weighted total loss of `pass` to the model's parameters.
pub fn backward_pass<T: Real>(model: &mut Vae<T>, cfg: &TrainingConfig, pass: &ForwardPass<T>) {
    let d = model.d_z();
    let b = pass.enc.batch();
    let w_rec = T::c(cfg.lambda_rec);
    let d_out: Vec<T> = pass.rec_grad.iter().map(|&g| g * w_rec).collect();
    let d_code: Vec<f64> = model.decoder_backward(&pass.dec, &d_out).iter().map(|v| v.f64()).collect();
    let mut g_tilde = vec![0.0; b * d];
    let mut g_z = vec![0.0; b * d];
    if cfg.decode_normalized {
        g_tilde.copy_from_slice(&d_code);
    } else {
        g_z.copy_from_slice(&d_code);
    }
    for (i, row) in pass.triplet_grad.iter().enumerate() {
        let target = if pass.triplet_on_sphere { &mut g_tilde } else { &mut g_z };
        for (t, g) in target[i * d..(i + 1) * d].iter_mut().zip(row) {
            *t += cfg.lambda_atn * g;
        }
    }
    // Through z / |z|: dz = (g - u (u . g)) / |z|.
    for i in 0..b {
        let u = &pass.z_tilde[i * d..(i + 1) * d];
        let g = &g_tilde[i * d..(i + 1) * d];
        let ug = dot(u, g);
        for j in 0..d {
            g_z[i * d + j] += (g[j] - u[j] * ug) / pass.norms[i];
        }
    }
    let (kl_dmu, kl_dlv) = &pass.kl_grad;
    let mut d_mu = vec![0.0; b * d];
    let mut d_lv = vec![0.0; b * d];
    for i in 0..b * d {
        d_mu[i] = g_z[i] + cfg.lambda_kl * kl_dmu[i];
        if !pass.noise.is_empty() {
            // z = mu + exp(lv / 2) * eps.
            d_lv[i] = g_z[i] * pass.noise[i] * pass.sigma[i] * 0.5 + cfg.lambda_kl * kl_dlv[i];
        }
    }
    model.encoder_backward(&pass.enc, &d_mu, &d_lv);
}

/// Forward and backward pass for one batch; gradients are *added* to the model.
pub fn accumulate_gradients<T: Real>(
    model: &mut Vae<T>,
    cfg: &TrainingConfig,
    graph: &SemanticNeighborGraph,
    pixels: &[T],
    labels: &[usize],
    noise: &[f64],
    step: usize,
) -> Result<StepLosses> {
    let pass = forward_pass(model, cfg, graph, pixels, labels, noise, step)?;
    backward_pass(model, cfg, &pass);
    Ok(pass.losses)
}

/// One logged optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub losses: StepLosses,
    pub grad_norm: f64,
}

/// Stateful training run over a fixed dataset and batch schedule.
pub struct Trainer {
    cfg: TrainingConfig,
    model: Vae<f32>,
    optimizer: Adam<f32>,
    sampler: BalancedSampler,
    data: LabeledImageSet,
    graph: SemanticNeighborGraph,
    noise_rng: ChaCha8Rng,
    epoch: usize,
    step: usize,
    history: Vec<EpochRecord>,
    log: Vec<StepRecord>,
}

impl Trainer {
    pub fn new(cfg: TrainingConfig, data: LabeledImageSet, graph: SemanticNeighborGraph) -> Result<Self> {
        cfg.validate()?;
        if data.side() != IMAGE_SIDE {
            return Err(Error::Shape(format!("training images must be {IMAGE_SIDE}x{IMAGE_SIDE}, got {}", data.side())));
        }
        if graph.class_count() < data.class_count() {
            return Err(Error::Shape(format!(
                "neighbor graph covers {} classes, data has {}",
                graph.class_count(),
                data.class_count()
            )));
        }
        let data = if cfg.train_subset > 0 && cfg.train_subset < data.len() {
            data.subset(&(0..cfg.train_subset).collect::<Vec<_>>())
        } else {
            data
        };
        let sampler = BalancedSampler::new(&data, cfg.classes_per_batch, cfg.samples_per_class, cfg.seed)?;
        Ok(Self {
            model: Vae::new(cfg.d_z, stream_seed(cfg.seed, MODEL_STREAM))?,
            optimizer: Adam::new(cfg.learning_rate),
            noise_rng: ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, NOISE_STREAM)),
            cfg,
            sampler,
            data,
            graph,
            epoch: 0,
            step: 0,
            history: Vec::new(),
            log: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainingConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Vae<f32> {
        &self.model
    }

    /// For fault-injection and warm starts.
    pub fn model_mut(&mut self) -> &mut Vae<f32> {
        &mut self.model
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.sampler.batches_per_epoch()
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    pub fn step_log(&self) -> &[StepRecord] {
        &self.log
    }

    /// The batches of the next epoch.
    pub fn next_epoch_batches(&self) -> Vec<Batch> {
        self.sampler.epoch(self.epoch)
    }

    /// One optimizer update on `batch`.
    pub fn step(&mut self, batch: &Batch) -> Result<StepLosses> {
        let ppi = self.data.pixels_per_image();
        let mut pixels = Vec::with_capacity(batch.len() * ppi);
        for &i in &batch.indices {
            pixels.extend_from_slice(self.data.image(i));
        }
        let labels: Vec<usize> = batch.indices.iter().map(|&i| self.data.label(i)).collect();
        let noise: Vec<f64> = if self.cfg.variant.samples() {
            (0..batch.len() * self.cfg.d_z).map(|_| self.noise_rng.sample(StandardNormal)).collect()
        } else {
            Vec::new()
        };
        self.model.zero_grad();
        let losses = accumulate_gradients(&mut self.model, &self.cfg, &self.graph, &pixels, &labels, &noise, self.step)?;
        let mut params = self.model.params_mut();
        let grad_norm = clip_global_norm(&mut params, self.cfg.grad_clip);
        if !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss { component: "gradient", step: self.step });
        }
        self.optimizer.step(&mut params);
        if self.step.is_multiple_of(self.cfg.log_every) {
            self.log.push(StepRecord { step: self.step, epoch: self.epoch, losses, grad_norm });
        }
        self.step += 1;
        Ok(losses)
    }

    /// Runs one full epoch and returns its mean losses.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        self.run_epoch_with(|_, _| {})
    }

    /// Like [`Trainer::run_epoch`], calling `on_step(step_index_in_epoch, losses)` after each step.
    pub fn run_epoch_with(&mut self, mut on_step: impl FnMut(usize, &StepLosses)) -> Result<EpochRecord> {
        let batches = self.next_epoch_batches();
        let mut sums = [0.0f64; 4];
        let (mut triplets, mut active) = (0usize, 0usize);
        for (k, batch) in batches.iter().enumerate() {
            let l = self.step(batch)?;
            for (s, v) in sums.iter_mut().zip([l.rec, l.kl, l.atn, l.total]) {
                *s += v;
            }
            triplets += l.triplets;
            active += l.active;
            on_step(k, &l);
        }
        self.epoch += 1;
        let n = batches.len().max(1) as f64;
        let record = EpochRecord {
            epoch: self.epoch,
            rec: sums[0] / n,
            kl: sums[1] / n,
            atn: sums[2] / n,
            total: sums[3] / n,
            active: if triplets > 0 { active as f64 / triplets as f64 } else { 0.0 },
        };
        self.history.push(record);
        Ok(record)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            model: self.model.clone(),
            epoch: self.epoch,
            history: self.history.clone(),
        }
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }
}

/// Trains for `cfg.epochs` epochs, calling `on_epoch` with a checkpoint after each.
pub fn train_with(
    cfg: &TrainingConfig,
    data: LabeledImageSet,
    graph: SemanticNeighborGraph,
    mut on_epoch: impl FnMut(&Trainer) -> Result<()>,
) -> Result<Checkpoint> {
    let mut trainer = Trainer::new(cfg.clone(), data, graph)?;
    for _ in 0..cfg.epochs {
        trainer.run_epoch()?;
        on_epoch(&trainer)?;
    }
    Ok(trainer.checkpoint())
}

pub fn train(cfg: &TrainingConfig, data: LabeledImageSet, graph: SemanticNeighborGraph) -> Result<Checkpoint> {
    train_with(cfg, data, graph, |_| Ok(()))
}
