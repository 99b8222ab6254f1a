//! Adversarial training loops: the minimax objective with label smoothing,
//! dense generator/discriminator pairs, and the associative coupling that
//! trains a Boltzmann machine on the discriminator's feature layer and draws
//! generator latents from it.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::data::{bernoulli_round, bits_to_spins, SpinVector};
use crate::error::{Error, Result};
use crate::nn::{
    log_one_minus_sigmoid, log_sigmoid, sigmoid, smoothed_targets, Activation, AdamState,
    DenseNet,
};
use crate::pimc::{population_anneal, sample_visible, TrotterConfig};
use crate::qbm::{QbmParams, QbmTrainConfig, QbmTrainer};
use crate::rbm::{
    pcd_gradient, sample_annealed, AnnealSchedule, RbmParams, RbmTrainConfig, RbmTrainer,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GanMode {
    /// Plain dense GAN with uniform noise latents.
    DcganDense,
    /// Associative memory is a classical RBM.
    Aan,
    /// Associative memory is a transverse-field Boltzmann machine sampled by
    /// population-annealed path-integral Monte Carlo.
    Qaan,
}

impl GanMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            GanMode::DcganDense => "dcgan",
            GanMode::Aan => "aan",
            GanMode::Qaan => "qaan",
        }
    }
}

#[derive(Debug, Clone)]
pub struct GanConfig {
    pub mode: GanMode,
    /// Latent dimension; equals the memory's visible count in AAN/QAAN modes.
    pub latent_dim: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_gan: f64,
    pub lr_bm: f64,
    pub gibbs_steps: usize,
    /// Fake labels drawn uniformly from this interval.
    pub smooth_fake: (f64, f64),
    /// Real labels drawn uniformly from this interval.
    pub smooth_real: (f64, f64),
    /// Use `-<ln D(G(z))>` for the generator instead of the literal minimax
    /// term.
    pub non_saturating: bool,
    pub generator_hidden: usize,
    pub discriminator_hidden: usize,
    pub memory_hidden: usize,
    /// Transverse field for QAAN memories.
    pub gamma: f64,
    /// Annealed-sampling schedule length for AAN latents.
    pub anneal_rungs: usize,
    /// Sampler settings for QAAN memories.
    pub trotter: TrotterConfig,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            mode: GanMode::DcganDense,
            latent_dim: 32,
            batch_size: 64,
            epochs: 30,
            lr_gan: 2e-4,
            lr_bm: 1e-3,
            gibbs_steps: 5,
            smooth_fake: (0.0, 0.1),
            smooth_real: (0.9, 1.0),
            non_saturating: false,
            generator_hidden: 64,
            discriminator_hidden: 64,
            memory_hidden: 8,
            gamma: 2.0,
            anneal_rungs: 50,
            trotter: TrotterConfig::default(),
        }
    }
}

/// The associative memory attached to the discriminator's feature layer.
#[derive(Debug, Clone)]
pub enum Memory {
    None,
    Rbm(RbmTrainer),
    Qbm(QbmTrainer),
}

/// Minimax losses of one batch. `j_g` is the literal two-term objective,
/// `j_d = -j_g` by the zero-sum definition; `d_smoothed_bce` is the
/// cross-entropy the discriminator actually minimizes under label smoothing.
#[derive(Debug, Clone, Copy)]
pub struct GanLosses {
    pub j_d: f64,
    pub j_g: f64,
    pub d_smoothed_bce: f64,
}

/// Losses from discriminator probabilities. Probabilities must be strictly
/// inside (0, 1); the logit-domain path used in training never produces the
/// endpoints.
pub fn gan_losses(
    d_real: &[f64],
    d_fake: &[f64],
    real_targets: &[f64],
    fake_targets: &[f64],
) -> Result<GanLosses> {
    if d_real.iter().chain(d_fake).any(|&p| p <= 0.0 || p >= 1.0) {
        return Err(Error::OutOfRange(
            "discriminator probabilities must lie strictly in (0, 1)".into(),
        ));
    }
    if real_targets.len() != d_real.len() || fake_targets.len() != d_fake.len() {
        return Err(Error::DimMismatch {
            context: "gan_losses targets",
            expected: d_real.len(),
            got: real_targets.len(),
        });
    }
    let mean_ln_real = d_real.iter().map(|&p| p.ln()).sum::<f64>() / d_real.len() as f64;
    let mean_ln_one_minus_fake =
        d_fake.iter().map(|&p| (1.0 - p).ln()).sum::<f64>() / d_fake.len() as f64;
    let j_g = mean_ln_real + mean_ln_one_minus_fake;
    let bce = |p: f64, t: f64| -(t * p.ln() + (1.0 - t) * (1.0 - p).ln());
    let d_smoothed_bce = d_real
        .iter()
        .zip(real_targets)
        .map(|(&p, &t)| bce(p, t))
        .sum::<f64>()
        / d_real.len() as f64
        + d_fake
            .iter()
            .zip(fake_targets)
            .map(|(&p, &t)| bce(p, t))
            .sum::<f64>()
            / d_fake.len() as f64;
    Ok(GanLosses {
        j_d: -j_g,
        j_g,
        d_smoothed_bce,
    })
}

fn losses_from_logits(real_logits: &[f64], fake_logits: &[f64]) -> (f64, f64) {
    let mean_ln_real =
        real_logits.iter().map(|&s| log_sigmoid(s)).sum::<f64>() / real_logits.len() as f64;
    let mean_ln_one_minus_fake = fake_logits
        .iter()
        .map(|&s| log_one_minus_sigmoid(s))
        .sum::<f64>()
        / fake_logits.len() as f64;
    let j_g = mean_ln_real + mean_ln_one_minus_fake;
    (-j_g, j_g)
}

/// Per-step diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub j_d: f64,
    pub j_g: f64,
    pub d_smoothed_bce: f64,
    pub memory_grad_norm: f64,
}

/// Generator, discriminator, optional associative memory, and their
/// optimizer states.
#[derive(Debug, Clone)]
pub struct GanTrainer {
    pub generator: DenseNet,
    pub discriminator: DenseNet,
    pub g_adam: AdamState,
    pub d_adam: AdamState,
    pub memory: Memory,
    pub config: GanConfig,
    pub epoch: usize,
}

impl GanTrainer {
    /// Build the dense pair for `data_dim`-wide records in [-1, 1]. The
    /// discriminator's feature layer has the latent width and a sigmoid
    /// activation; its head is a single dense layer with a sigmoid output.
    pub fn new(config: GanConfig, data_dim: usize, rng: &mut ChaCha12Rng) -> Result<Self> {
        let generator = DenseNet::xavier(
            &[config.latent_dim, config.generator_hidden, data_dim],
            &[Activation::LeakyRelu(0.2), Activation::Tanh],
            None,
            rng,
        )?;
        let discriminator = DenseNet::xavier(
            &[
                data_dim,
                config.discriminator_hidden,
                config.latent_dim,
                1,
            ],
            &[
                Activation::LeakyRelu(0.2),
                Activation::Sigmoid,
                Activation::Sigmoid,
            ],
            Some(1),
            rng,
        )?;
        let g_adam = AdamState::new(generator.param_count(), config.lr_gan, 0.5, 0.999);
        let d_adam = AdamState::new(discriminator.param_count(), config.lr_gan, 0.5, 0.999);
        let memory = match config.mode {
            GanMode::DcganDense => Memory::None,
            GanMode::Aan => {
                let params = RbmParams::xavier(config.latent_dim, config.memory_hidden, rng);
                let bm_config = RbmTrainConfig {
                    learning_rate: config.lr_bm,
                    gibbs_steps: config.gibbs_steps,
                    batch_size: config.batch_size,
                    ..Default::default()
                };
                Memory::Rbm(RbmTrainer::new(params, bm_config, rng)?)
            }
            GanMode::Qaan => {
                let params =
                    QbmParams::xavier(config.latent_dim, config.memory_hidden, config.gamma, rng)?;
                let bm_config = QbmTrainConfig {
                    learning_rate: config.lr_bm,
                    batch_size: config.batch_size,
                    sampler: crate::qbm::NegativeSampler::Pimc(config.trotter.clone()),
                    ..Default::default()
                };
                Memory::Qbm(QbmTrainer::new(params, bm_config))
            }
        };
        Ok(Self {
            generator,
            discriminator,
            g_adam,
            d_adam,
            memory,
            config,
            epoch: 0,
        })
    }

    /// Draw a latent batch in the generator's input convention (entries in
    /// [-1, 1]; binary +-1 in the associative modes).
    pub fn latent_batch(&self, count: usize, rng: &mut ChaCha12Rng) -> Result<DMatrix<f64>> {
        let dim = self.config.latent_dim;
        match (&self.memory, self.config.mode) {
            (_, GanMode::DcganDense) => Ok(DMatrix::from_fn(count, dim, |_, _| {
                rng.random_range(-1.0..1.0)
            })),
            (Memory::Rbm(trainer), GanMode::Aan) => {
                let schedule = AnnealSchedule::linear(self.config.anneal_rungs.max(2));
                let samples = sample_annealed(&trainer.params, count, &schedule, rng)?;
                Ok(DMatrix::from_fn(count, dim, |i, j| {
                    bits_to_spins(&samples[i]).as_slice()[j] as f64
                }))
            }
            (Memory::Qbm(trainer), GanMode::Qaan) => {
                let (pop, _) = population_anneal(&trainer.params, &self.config.trotter, rng)?;
                let samples = sample_visible(&pop, dim, count, rng);
                Ok(DMatrix::from_fn(count, dim, |i, j| {
                    samples[i].as_slice()[j] as f64
                }))
            }
            _ => Err(Error::InvalidConfig(
                "associative memory missing for the configured mode".into(),
            )),
        }
    }

    /// One adversarial step on a real batch (rows in [-1, 1]).
    pub fn train_step(&mut self, real: &DMatrix<f64>, rng: &mut ChaCha12Rng) -> Result<StepStats> {
        let latents = self.latent_batch(real.nrows(), rng)?;
        self.train_step_with_latents(real, &latents, rng)
    }

    /// [`train_step`](Self::train_step) with injected latents; the seam used
    /// by the mode-isolation tests.
    pub fn train_step_with_latents(
        &mut self,
        real: &DMatrix<f64>,
        latents: &DMatrix<f64>,
        rng: &mut ChaCha12Rng,
    ) -> Result<StepStats> {
        if real.nrows() != latents.nrows() {
            return Err(Error::DimMismatch {
                context: "train_step batch",
                expected: real.nrows(),
                got: latents.nrows(),
            });
        }
        let batch = real.nrows();

        // (1) Forge a batch.
        let gen_cache = self.generator.forward(latents)?;
        let fake = gen_cache.output().clone();

        // (2) Discriminator update on smoothed labels; the real-batch
        // features are read from the pre-update forward pass.
        let real_cache = self.discriminator.forward(real)?;
        let fake_cache = self.discriminator.forward(&fake)?;
        let real_logits: Vec<f64> = real_cache.logits().iter().cloned().collect();
        let fake_logits: Vec<f64> = fake_cache.logits().iter().cloned().collect();
        let (j_d, j_g) = losses_from_logits(&real_logits, &fake_logits);

        let real_targets = smoothed_targets(
            batch,
            self.config.smooth_real.0,
            self.config.smooth_real.1,
            rng,
        );
        let fake_targets = smoothed_targets(
            batch,
            self.config.smooth_fake.0,
            self.config.smooth_fake.1,
            rng,
        );
        let d_smoothed_bce = {
            let bce = |s: f64, t: f64| -(t * log_sigmoid(s) + (1.0 - t) * log_one_minus_sigmoid(s));
            real_logits
                .iter()
                .zip(&real_targets)
                .map(|(&s, &t)| bce(s, t))
                .sum::<f64>()
                / batch as f64
                + fake_logits
                    .iter()
                    .zip(&fake_targets)
                    .map(|(&s, &t)| bce(s, t))
                    .sum::<f64>()
                    / batch as f64
        };
        let d_real_seed = DMatrix::from_fn(batch, 1, |i, _| {
            (sigmoid(real_logits[i]) - real_targets[i]) / batch as f64
        });
        let d_fake_seed = DMatrix::from_fn(batch, 1, |i, _| {
            (sigmoid(fake_logits[i]) - fake_targets[i]) / batch as f64
        });
        let (mut d_grads, _) = self
            .discriminator
            .backward_from_logits(&real_cache, &d_real_seed)?;
        let (d_grads_fake, _) = self
            .discriminator
            .backward_from_logits(&fake_cache, &d_fake_seed)?;
        d_grads.add(&d_grads_fake);

        // (3) Feature readout before the update: firing probabilities of the
        // clamped layer on the real batch.
        let features = real_cache
            .features(&self.discriminator)
            .expect("discriminator always carries a feature tap")
            .clone();
        debug_assert!(features.iter().all(|&f| f > 0.0 && f < 1.0));

        let mut d_flat = self.discriminator.flatten_params();
        self.d_adam.apply(&mut d_flat, &d_grads.flatten())?;
        self.discriminator.set_params(&d_flat)?;

        // (4) One associative-memory gradient step on the feature batch.
        let memory_grad_norm = self.memory_step(&features, rng)?;

        // (5) Generator update through the refreshed discriminator.
        let fake_cache = self.discriminator.forward(&fake)?;
        let g_seed = DMatrix::from_fn(batch, 1, |i, _| {
            let p = sigmoid(fake_cache.logits()[(i, 0)]);
            if self.config.non_saturating {
                (p - 1.0) / batch as f64
            } else {
                -p / batch as f64
            }
        });
        let (_, d_fake_input) = self
            .discriminator
            .backward_from_logits(&fake_cache, &g_seed)?;
        let (g_grads, _) = self.generator.backward(&gen_cache, &d_fake_input)?;
        let mut g_flat = self.generator.flatten_params();
        self.g_adam.apply(&mut g_flat, &g_grads.flatten())?;
        self.generator.set_params(&g_flat)?;

        Ok(StepStats {
            j_d,
            j_g,
            d_smoothed_bce,
            memory_grad_norm,
        })
    }

    /// Train the associative memory on a batch of feature rows in (0, 1).
    /// Returns the gradient norm (0 in plain GAN mode).
    fn memory_step(&mut self, features: &DMatrix<f64>, rng: &mut ChaCha12Rng) -> Result<f64> {
        match &mut self.memory {
            Memory::None => Ok(0.0),
            Memory::Rbm(trainer) => {
                let minibatch: Vec<Vec<f64>> = features
                    .row_iter()
                    .map(|r| r.iter().cloned().collect())
                    .collect();
                // Persistent chains keep the configured batch size; ragged
                // final batches reuse a chain prefix.
                let full = std::mem::take(&mut trainer.pcd.chains);
                let take = minibatch.len().min(full.len());
                trainer.pcd.chains = full[..take].to_vec();
                let grad = pcd_gradient(&trainer.params, &mut trainer.pcd, &minibatch, rng)?;
                let mut restored = full;
                restored[..take].clone_from_slice(&trainer.pcd.chains);
                trainer.pcd.chains = restored;
                let mut flat = trainer.params.flatten();
                trainer.adam.apply(&mut flat, &grad.flatten())?;
                trainer.params.set_from_flat(&flat)?;
                Ok(grad.norm())
            }
            Memory::Qbm(trainer) => {
                let minibatch: Vec<SpinVector> = features
                    .row_iter()
                    .map(|r| {
                        let row: Vec<f64> = r.iter().cloned().collect();
                        Ok(bits_to_spins(&bernoulli_round(&row, rng)?))
                    })
                    .collect::<Result<_>>()?;
                let (_, neg) = population_anneal(&trainer.params, &self.config.trotter, rng)?;
                let grad = trainer.params.bound_gradient(&minibatch, &neg)?;
                let mut flat = trainer.params.flatten_trainable();
                trainer.adam.apply(&mut flat, &grad.flatten())?;
                trainer.params.set_trainable(&flat)?;
                Ok(grad.norm())
            }
        }
    }

    /// One pass over the dataset in shuffled batches; returns the mean step
    /// diagnostics of the epoch.
    pub fn run_epoch(&mut self, data: &DMatrix<f64>, rng: &mut ChaCha12Rng) -> Result<StepStats> {
        if data.nrows() == 0 {
            return Err(Error::EmptyDataset);
        }
        let mut order: Vec<usize> = (0..data.nrows()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut totals = StepStats {
            j_d: 0.0,
            j_g: 0.0,
            d_smoothed_bce: 0.0,
            memory_grad_norm: 0.0,
        };
        let mut steps = 0usize;
        for chunk in order.chunks(self.config.batch_size) {
            let batch = DMatrix::from_fn(chunk.len(), data.ncols(), |i, j| data[(chunk[i], j)]);
            let stats = self.train_step(&batch, rng)?;
            totals.j_d += stats.j_d;
            totals.j_g += stats.j_g;
            totals.d_smoothed_bce += stats.d_smoothed_bce;
            totals.memory_grad_norm += stats.memory_grad_norm;
            steps += 1;
        }
        self.epoch += 1;
        let n = steps as f64;
        Ok(StepStats {
            j_d: totals.j_d / n,
            j_g: totals.j_g / n,
            d_smoothed_bce: totals.d_smoothed_bce / n,
            memory_grad_norm: totals.memory_grad_norm / n,
        })
    }

    /// Mean discriminator output over a set of rows.
    pub fn discriminator_mean(&self, rows: &DMatrix<f64>) -> Result<f64> {
        let cache = self.discriminator.forward(rows)?;
        Ok(cache.output().iter().sum::<f64>() / rows.nrows() as f64)
    }

    /// Generate `count` records from latent samples, drawing latents in
    /// batch-sized chunks so associative modes refresh their sampler state.
    pub fn generate(&self, count: usize, rng: &mut ChaCha12Rng) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(count, self.generator.output_dim());
        let mut done = 0;
        while done < count {
            let take = self.config.batch_size.min(count - done);
            let latents = self.latent_batch(take, rng)?;
            let fake = self.generator.forward(&latents)?;
            out.rows_mut(done, take).copy_from(fake.output());
            done += take;
        }
        Ok(out)
    }

    /// Post-activation feature rows of the clamped layer for given records.
    pub fn feature_rows(&self, rows: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let cache = self.discriminator.forward(rows)?;
        Ok(cache
            .features(&self.discriminator)
            .expect("discriminator always carries a feature tap")
            .clone())
    }
}

/// Epoch-driven training: `epoch_hook(epoch, trainer)` runs after every
/// epoch for metric evaluation and checkpointing.
pub fn train<F>(
    trainer: &mut GanTrainer,
    data: &DMatrix<f64>,
    rng: &mut ChaCha12Rng,
    mut epoch_hook: F,
) -> Result<()>
where
    F: FnMut(usize, &GanTrainer, &StepStats) -> Result<()>,
{
    for _ in 0..trainer.config.epochs {
        let stats = trainer.run_epoch(data, rng)?;
        epoch_hook(trainer.epoch, trainer, &stats)?;
    }
    Ok(())
}
