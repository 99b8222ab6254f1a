//! Training drivers behind the CLI verbs: synthetic Boltzmann-machine
//! comparison, toy adversarial runs in all three modes, and the exact-oracle
//! validation suite. Every driver writes a manifest, per-epoch metric rows,
//! and per-epoch checkpoints that resume bitwise.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::adversarial::{GanConfig, GanMode, GanTrainer, Memory};
use crate::cli::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::cli::config::{Experiment, ExperimentConfig};
use crate::data::{bits_to_spins, BernoulliMixture, BitVector, Dataset, SpinVector};
use crate::error::{Error, Result};
use crate::metrics::{
    feature_summary_from_matrix, frechet_distance, inception_score_from_probs, kl_divergence,
};
use crate::nn::{Activation, AdamState, DenseNet};
use crate::pimc::TrotterConfig;
use crate::qbm::{NegativeSampler, QbmParams, QbmTrainConfig, QbmTrainer};
use crate::rbm::{RbmParams, RbmTrainConfig, RbmTrainer};
use crate::rng;

/// One row of the metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub epoch: u64,
    pub mode: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
}

impl MetricRow {
    pub fn format(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.epoch, self.mode, self.metric, self.mean, self.std
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 5 {
            return Err(Error::Malformed(format!("bad metric row `{line}`")));
        }
        Ok(Self {
            epoch: parts[0]
                .parse()
                .map_err(|_| Error::Malformed(format!("bad epoch in `{line}`")))?,
            mode: parts[1].to_string(),
            metric: parts[2].to_string(),
            mean: parts[3]
                .parse()
                .map_err(|_| Error::Malformed(format!("bad mean in `{line}`")))?,
            std: parts[4]
                .parse()
                .map_err(|_| Error::Malformed(format!("bad std in `{line}`")))?,
        })
    }
}

pub const METRICS_HEADER: &str = "epoch,mode,metric,mean,std";

fn write_metrics_csv(dir: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut text = String::from(METRICS_HEADER);
    text.push('\n');
    for row in rows {
        text.push_str(&row.format());
        text.push('\n');
    }
    fs::write(dir.join("metrics.csv"), text)?;
    Ok(())
}

pub fn read_metrics_csv(dir: &Path) -> Result<Vec<MetricRow>> {
    let path = dir.join("metrics.csv");
    let text = fs::read_to_string(&path)
        .map_err(|_| Error::Malformed(format!("missing metrics.csv in {}", dir.display())))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != METRICS_HEADER {
                return Err(Error::Malformed("unexpected metrics.csv header".into()));
            }
            continue;
        }
        if !line.is_empty() {
            rows.push(MetricRow::parse(line)?);
        }
    }
    Ok(rows)
}

fn checkpoint_path(dir: &Path, seq: u64) -> PathBuf {
    dir.join(format!("ckpt_{seq:05}.ckpt"))
}

fn latest_checkpoint(dir: &Path) -> Result<PathBuf> {
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if let Some(seq) = name
            .strip_prefix("ckpt_")
            .and_then(|s| s.strip_suffix(".ckpt"))
            .and_then(|s| s.parse::<u64>().ok())
        {
            if best.as_ref().map(|(b, _)| seq > *b).unwrap_or(true) {
                best = Some((seq, path));
            }
        }
    }
    best.map(|(_, p)| p)
        .ok_or_else(|| Error::Checkpoint(format!("no checkpoints in {}", dir.display())))
}

/// Run an experiment from scratch into `config.output_dir`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(&config.output_dir)?;
    fs::write(config.output_dir.join("manifest.json"), config.manifest_json())?;
    fs::write(config.output_dir.join("config.txt"), config.to_text())?;
    match config.experiment {
        Experiment::SyntheticBm => SyntheticDriver::fresh(config)?.run(),
        Experiment::GanToy | Experiment::AanToy | Experiment::QaanToy => {
            GanDriver::fresh(config)?.run()
        }
        Experiment::OracleSuite => run_oracle_suite(config),
    }
}

/// Continue a run from its latest checkpoint; the finished run reproduces an
/// uninterrupted run byte for byte.
pub fn resume_experiment(run_dir: &Path) -> Result<()> {
    let ckpt = load_checkpoint(&latest_checkpoint(run_dir)?)?;
    let mut config = ExperimentConfig::parse(&ckpt.config_text)?;
    config.output_dir = run_dir.to_path_buf();
    match config.experiment {
        Experiment::SyntheticBm => SyntheticDriver::from_checkpoint(&config, &ckpt)?.run(),
        Experiment::GanToy | Experiment::AanToy | Experiment::QaanToy => {
            GanDriver::from_checkpoint(&config, &ckpt)?.run()
        }
        Experiment::OracleSuite => Err(Error::InvalidConfig(
            "oracle-suite runs are not resumable".into(),
        )),
    }
}

// --- synthetic Boltzmann-machine comparison -------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Rbm,
    Qbm,
    Done,
}

impl Phase {
    fn as_str(&self) -> &'static str {
        match self {
            Phase::Rbm => "rbm",
            Phase::Qbm => "qbm",
            Phase::Done => "done",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "rbm" => Ok(Phase::Rbm),
            "qbm" => Ok(Phase::Qbm),
            "done" => Ok(Phase::Done),
            other => Err(Error::Checkpoint(format!("unknown phase `{other}`"))),
        }
    }
}

struct SyntheticDriver {
    config: ExperimentConfig,
    data_table: Vec<f64>,
    dataset: Dataset,
    spins: Vec<SpinVector>,
    rbm: RbmTrainer,
    qbm: QbmTrainer,
    phase: Phase,
    rows: Vec<MetricRow>,
    seq: u64,
    rbm_rng: ChaCha12Rng,
    qbm_rng: ChaCha12Rng,
    pimc_rng: ChaCha12Rng,
}

struct SyntheticSetup {
    data_table: Vec<f64>,
    dataset: Dataset,
    spins: Vec<SpinVector>,
    rbm: RbmTrainer,
    qbm: QbmTrainer,
    rbm_rng: ChaCha12Rng,
    qbm_rng: ChaCha12Rng,
    pimc_rng: ChaCha12Rng,
}

impl SyntheticDriver {
    /// Deterministic setup shared by fresh runs and resume replays.
    fn setup(config: &ExperimentConfig) -> Result<SyntheticSetup> {
        let mut data_rng = rng::stream(config.seed, "data");
        let mixture = BernoulliMixture::random(
            config.data.modes,
            config.data.dim,
            config.data.q,
            &mut data_rng,
        )?;
        let data_table = mixture.prob_table()?;
        let samples = mixture.sample(config.data.samples, &mut data_rng);
        let dataset = Dataset::from_bits(&samples, None)?;
        let spins: Vec<SpinVector> = samples.iter().map(bits_to_spins).collect();

        let mut rbm_rng = rng::stream(config.seed, "rbm");
        let rbm_params = RbmParams::xavier(config.data.dim, config.rbm.hidden, &mut rbm_rng);
        let rbm = RbmTrainer::new(
            rbm_params,
            RbmTrainConfig {
                learning_rate: config.rbm.learning_rate,
                gibbs_steps: config.rbm.gibbs_steps,
                epochs: config.rbm.epochs,
                batch_size: config.rbm.batch_size,
                ..Default::default()
            },
            &mut rbm_rng,
        )?;

        let mut qbm_rng = rng::stream(config.seed, "qbm");
        let qbm_params = QbmParams::xavier(
            config.data.dim,
            config.qbm.hidden,
            config.qbm.gamma,
            &mut qbm_rng,
        )?;
        let trotter = TrotterConfig::linear(
            config.pimc.slices,
            config.pimc.replicas,
            config.pimc.anneal_steps,
            config.pimc.sweeps_per_step,
        )?;
        let qbm = QbmTrainer::new(
            qbm_params,
            QbmTrainConfig {
                learning_rate: config.qbm.learning_rate,
                epochs: config.qbm.epochs,
                batch_size: config.qbm.batch_size,
                sampler: NegativeSampler::Pimc(trotter),
                ..Default::default()
            },
        );
        let pimc_rng = rng::stream(config.seed, "pimc");
        Ok(SyntheticSetup {
            data_table,
            dataset,
            spins,
            rbm,
            qbm,
            rbm_rng,
            qbm_rng,
            pimc_rng,
        })
    }

    fn fresh(config: &ExperimentConfig) -> Result<Self> {
        let setup = Self::setup(config)?;
        Ok(Self {
            config: config.clone(),
            data_table: setup.data_table,
            dataset: setup.dataset,
            spins: setup.spins,
            rbm: setup.rbm,
            qbm: setup.qbm,
            phase: Phase::Rbm,
            rows: Vec::new(),
            seq: 0,
            rbm_rng: setup.rbm_rng,
            qbm_rng: setup.qbm_rng,
            pimc_rng: setup.pimc_rng,
        })
    }

    fn from_checkpoint(config: &ExperimentConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut driver = Self::fresh(config)?;
        driver.phase = Phase::parse(ckpt.string("phase")?)?;
        driver.seq = ckpt.scalar("seq")? as u64;
        driver.rows = ckpt
            .string("metrics")?
            .lines()
            .map(MetricRow::parse)
            .collect::<Result<_>>()?;

        driver.rbm.epoch = ckpt.scalar("rbm.epoch")? as usize;
        driver.rbm.params.visible_bias = ckpt.vector("rbm.visible_bias")?;
        driver.rbm.params.hidden_bias = ckpt.vector("rbm.hidden_bias")?;
        driver.rbm.params.weights = ckpt.matrix("rbm.weights")?;
        driver.rbm.adam = ckpt.adam("rbm.adam")?;
        let (dims, chains) = ckpt.u8s("rbm.chains")?;
        let (n_chains, nv, nh) = (dims[0] as usize, dims[1] as usize, dims[2] as usize);
        driver.rbm.pcd.chains = (0..n_chains)
            .map(|c| {
                let base = c * (nv + nh);
                let v = BitVector::new(chains[base..base + nv].to_vec()).unwrap();
                let h = BitVector::new(chains[base + nv..base + nv + nh].to_vec()).unwrap();
                (v, h)
            })
            .collect();

        driver.qbm.epoch = ckpt.scalar("qbm.epoch")? as usize;
        driver.qbm.params.bias = ckpt.vector("qbm.bias")?;
        driver.qbm.params.weights = ckpt.matrix("qbm.weights")?;
        driver.qbm.params.transverse_field = ckpt.vector("qbm.transverse_field")?;
        driver.qbm.adam = ckpt.adam("qbm.adam")?;

        driver.rbm_rng = ckpt.restore_rng(config.seed, "rbm")?;
        driver.qbm_rng = ckpt.restore_rng(config.seed, "qbm")?;
        driver.pimc_rng = ckpt.restore_rng(config.seed, "pimc")?;
        Ok(driver)
    }

    fn checkpoint(&mut self) -> Result<()> {
        self.seq += 1;
        let mut ckpt = Checkpoint::new(
            self.config.experiment.as_str(),
            self.seq,
            &self.config.to_text(),
        );
        ckpt.push_string("phase", self.phase.as_str());
        ckpt.push_scalar("seq", self.seq as f64);
        let metrics: String = self
            .rows
            .iter()
            .map(|r| r.format() + "\n")
            .collect::<String>();
        ckpt.push_string("metrics", metrics.trim_end());

        ckpt.push_scalar("rbm.epoch", self.rbm.epoch as f64);
        ckpt.push_vector("rbm.visible_bias", &self.rbm.params.visible_bias);
        ckpt.push_vector("rbm.hidden_bias", &self.rbm.params.hidden_bias);
        ckpt.push_matrix("rbm.weights", &self.rbm.params.weights);
        ckpt.push_adam("rbm.adam", &self.rbm.adam);
        let nv = self.rbm.params.n_visible();
        let nh = self.rbm.params.n_hidden();
        let mut chains = Vec::with_capacity(self.rbm.pcd.chains.len() * (nv + nh));
        for (v, h) in &self.rbm.pcd.chains {
            chains.extend_from_slice(v.as_slice());
            chains.extend_from_slice(h.as_slice());
        }
        ckpt.push_u8s(
            "rbm.chains",
            vec![self.rbm.pcd.chains.len() as u64, nv as u64, nh as u64],
            chains,
        );

        ckpt.push_scalar("qbm.epoch", self.qbm.epoch as f64);
        ckpt.push_vector("qbm.bias", &self.qbm.params.bias);
        ckpt.push_matrix("qbm.weights", &self.qbm.params.weights);
        ckpt.push_vector("qbm.transverse_field", &self.qbm.params.transverse_field);
        ckpt.push_adam("qbm.adam", &self.qbm.adam);

        ckpt.push_rng("rbm", &self.rbm_rng);
        ckpt.push_rng("qbm", &self.qbm_rng);
        ckpt.push_rng("pimc", &self.pimc_rng);
        save_checkpoint(&checkpoint_path(&self.config.output_dir, self.seq), &ckpt)
    }

    fn log(&mut self, row: MetricRow) -> Result<()> {
        self.rows.push(row);
        write_metrics_csv(&self.config.output_dir, &self.rows)
    }

    fn run(mut self) -> Result<()> {
        while self.phase == Phase::Rbm {
            if self.rbm.epoch >= self.config.rbm.epochs {
                self.phase = Phase::Qbm;
                break;
            }
            let mut epoch_rng = self.rbm_rng.clone();
            self.rbm.run_epoch(&self.dataset, &mut epoch_rng)?;
            self.rbm_rng = epoch_rng;
            let epoch = self.rbm.epoch as u64;
            let kl = kl_divergence(&self.data_table, &self.rbm.params.exact_marginal()?)?;
            self.log(MetricRow {
                epoch,
                mode: "rbm".into(),
                metric: "kl".into(),
                mean: kl,
                std: 0.0,
            })?;
            self.checkpoint()?;
        }
        while self.phase == Phase::Qbm {
            if self.qbm.epoch >= self.config.qbm.epochs {
                self.phase = Phase::Done;
                break;
            }
            let mut epoch_rng = self.qbm_rng.clone();
            let mut pimc_rng = self.pimc_rng.clone();
            self.qbm.run_epoch(&self.spins, &mut epoch_rng, &mut pimc_rng)?;
            self.qbm_rng = epoch_rng;
            self.pimc_rng = pimc_rng;
            let epoch = self.qbm.epoch as u64;
            // Exact evaluation costs a dense diagonalization; keep the
            // configured cadence but always evaluate the final epoch.
            let due = epoch.is_multiple_of(self.config.eval.every.max(1) as u64)
                || epoch == self.config.qbm.epochs as u64;
            if due {
                let marginal = self.qbm.params.exact_thermal()?.visible_marginal;
                let kl = kl_divergence(&self.data_table, &marginal)?;
                self.log(MetricRow {
                    epoch,
                    mode: "qbm".into(),
                    metric: "kl".into(),
                    mean: kl,
                    std: 0.0,
                })?;
            }
            self.checkpoint()?;
        }
        // Final checkpoint marks completion.
        self.checkpoint()?;
        Ok(())
    }
}

// --- toy adversarial runs ---------------------------------------------------

struct GanDriver {
    config: ExperimentConfig,
    gan_data: DMatrix<f64>,
    holdout: DMatrix<f64>,
    holdout_raw: DMatrix<f64>,
    classifier: DenseNet,
    trainer: GanTrainer,
    rows: Vec<MetricRow>,
    seq: u64,
    nn_rng: ChaCha12Rng,
}

struct GanSetup {
    gan_data: DMatrix<f64>,
    holdout: DMatrix<f64>,
    holdout_raw: DMatrix<f64>,
    classifier: DenseNet,
    trainer: GanTrainer,
    nn_rng: ChaCha12Rng,
}

fn gan_mode(experiment: Experiment) -> GanMode {
    match experiment {
        Experiment::AanToy => GanMode::Aan,
        Experiment::QaanToy => GanMode::Qaan,
        _ => GanMode::DcganDense,
    }
}

/// Train a small softmax classifier on labeled records in [0, 1]; it powers
/// the score and feature-distance metrics.
fn train_classifier(
    records: &DMatrix<f64>,
    labels: &[u32],
    classes: usize,
    epochs: usize,
    rng: &mut ChaCha12Rng,
) -> Result<DenseNet> {
    let dim = records.ncols();
    let hidden = 32;
    let mut net = DenseNet::xavier(
        &[dim, hidden, classes],
        &[Activation::LeakyRelu(0.2), Activation::Softmax],
        None,
        rng,
    )?;
    let mut adam = AdamState::new(net.param_count(), 1e-3, 0.5, 0.999);
    let batch = 64usize;
    let n = records.nrows();
    for _ in 0..epochs {
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(batch) {
            let x = DMatrix::from_fn(chunk.len(), dim, |i, j| records[(chunk[i], j)]);
            let cache = net.forward(&x)?;
            let seed = DMatrix::from_fn(chunk.len(), classes, |i, j| {
                let target = f64::from(labels[chunk[i]] as usize == j);
                (cache.output()[(i, j)] - target) / chunk.len() as f64
            });
            let (grads, _) = net.backward_from_logits(&cache, &seed)?;
            let mut flat = net.flatten_params();
            adam.apply(&mut flat, &grads.flatten())?;
            net.set_params(&flat)?;
        }
    }
    Ok(net)
}

impl GanDriver {
    fn setup(config: &ExperimentConfig) -> Result<GanSetup> {
        let mut data_rng = rng::stream(config.seed, "data");
        let dataset = match &config.data.path {
            Some(path) => crate::data::ingest_images(path, 0.0, 1.0)?,
            None => {
                let mixture = BernoulliMixture::random(
                    config.data.modes,
                    config.data.dim,
                    config.data.q,
                    &mut data_rng,
                )?;
                let (samples, labels) = mixture.sample_labeled(config.data.samples, &mut data_rng);
                Dataset::from_bits(&samples, Some(labels))?
            }
        };
        let dim = dataset.dim();
        let n = dataset.len();
        let holdout_n = config.eval.holdout.min(n / 4);
        let train_n = n - holdout_n;

        let raw = DMatrix::from_fn(n, dim, |i, j| dataset.records[i][j]);
        let scaled = raw.map(|x| 2.0 * x - 1.0);
        let gan_data = scaled.rows(0, train_n).into_owned();
        let holdout = scaled.rows(train_n, holdout_n).into_owned();
        let holdout_raw = raw.rows(train_n, holdout_n).into_owned();

        let mut nn_rng = rng::stream(config.seed, "nn");
        let labels = dataset
            .labels
            .clone()
            .ok_or_else(|| Error::InvalidConfig("toy adversarial runs need labeled data".into()))?;
        let classes = labels.iter().copied().max().unwrap_or(0) as usize + 1;
        let classifier = train_classifier(
            &raw,
            &labels,
            classes,
            config.eval.classifier_epochs,
            &mut nn_rng,
        )?;

        let gan_config = GanConfig {
            mode: gan_mode(config.experiment),
            latent_dim: config.gan.latent_dim,
            batch_size: config.gan.batch_size,
            epochs: config.gan.epochs,
            lr_gan: config.gan.learning_rate,
            lr_bm: config.gan.lr_bm,
            gibbs_steps: config.gan.gibbs_steps,
            smooth_fake: config.gan.smooth_fake,
            smooth_real: config.gan.smooth_real,
            non_saturating: config.gan.non_saturating,
            generator_hidden: config.gan.generator_hidden,
            discriminator_hidden: config.gan.discriminator_hidden,
            memory_hidden: config.gan.memory_hidden,
            gamma: config.qbm.gamma,
            anneal_rungs: config.gan.anneal_rungs,
            trotter: TrotterConfig::linear(
                config.pimc.slices,
                config.pimc.replicas,
                config.pimc.anneal_steps,
                config.pimc.sweeps_per_step,
            )?,
        };
        let trainer = GanTrainer::new(gan_config, dim, &mut nn_rng)?;
        Ok(GanSetup {
            gan_data,
            holdout,
            holdout_raw,
            classifier,
            trainer,
            nn_rng,
        })
    }

    fn fresh(config: &ExperimentConfig) -> Result<Self> {
        let setup = Self::setup(config)?;
        Ok(Self {
            config: config.clone(),
            gan_data: setup.gan_data,
            holdout: setup.holdout,
            holdout_raw: setup.holdout_raw,
            classifier: setup.classifier,
            trainer: setup.trainer,
            rows: Vec::new(),
            seq: 0,
            nn_rng: setup.nn_rng,
        })
    }

    fn from_checkpoint(config: &ExperimentConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut driver = Self::fresh(config)?;
        driver.seq = ckpt.scalar("seq")? as u64;
        driver.rows = ckpt
            .string("metrics")?
            .lines()
            .map(MetricRow::parse)
            .collect::<Result<_>>()?;
        driver.trainer.epoch = ckpt.scalar("gan.epoch")? as usize;
        ckpt.load_net("generator", &mut driver.trainer.generator)?;
        ckpt.load_net("discriminator", &mut driver.trainer.discriminator)?;
        driver.trainer.g_adam = ckpt.adam("g.adam")?;
        driver.trainer.d_adam = ckpt.adam("d.adam")?;
        match &mut driver.trainer.memory {
            Memory::None => {}
            Memory::Rbm(t) => {
                t.params.visible_bias = ckpt.vector("mem.visible_bias")?;
                t.params.hidden_bias = ckpt.vector("mem.hidden_bias")?;
                t.params.weights = ckpt.matrix("mem.weights")?;
                t.adam = ckpt.adam("mem.adam")?;
                let (dims, chains) = ckpt.u8s("mem.chains")?;
                let (n_chains, nv, nh) = (dims[0] as usize, dims[1] as usize, dims[2] as usize);
                t.pcd.chains = (0..n_chains)
                    .map(|c| {
                        let base = c * (nv + nh);
                        let v = BitVector::new(chains[base..base + nv].to_vec()).unwrap();
                        let h = BitVector::new(chains[base + nv..base + nv + nh].to_vec()).unwrap();
                        (v, h)
                    })
                    .collect();
            }
            Memory::Qbm(t) => {
                t.params.bias = ckpt.vector("mem.bias")?;
                t.params.weights = ckpt.matrix("mem.weights")?;
                t.params.transverse_field = ckpt.vector("mem.transverse_field")?;
                t.adam = ckpt.adam("mem.adam")?;
            }
        }
        driver.nn_rng = ckpt.restore_rng(config.seed, "nn")?;
        Ok(driver)
    }

    fn checkpoint(&mut self) -> Result<()> {
        self.seq += 1;
        let mut ckpt = Checkpoint::new(
            self.config.experiment.as_str(),
            self.seq,
            &self.config.to_text(),
        );
        ckpt.push_scalar("seq", self.seq as f64);
        let metrics: String = self
            .rows
            .iter()
            .map(|r| r.format() + "\n")
            .collect::<String>();
        ckpt.push_string("metrics", metrics.trim_end());
        ckpt.push_scalar("gan.epoch", self.trainer.epoch as f64);
        ckpt.push_net("generator", &self.trainer.generator);
        ckpt.push_net("discriminator", &self.trainer.discriminator);
        ckpt.push_adam("g.adam", &self.trainer.g_adam);
        ckpt.push_adam("d.adam", &self.trainer.d_adam);
        match &self.trainer.memory {
            Memory::None => {}
            Memory::Rbm(t) => {
                ckpt.push_vector("mem.visible_bias", &t.params.visible_bias);
                ckpt.push_vector("mem.hidden_bias", &t.params.hidden_bias);
                ckpt.push_matrix("mem.weights", &t.params.weights);
                ckpt.push_adam("mem.adam", &t.adam);
                let nv = t.params.n_visible();
                let nh = t.params.n_hidden();
                let mut chains = Vec::with_capacity(t.pcd.chains.len() * (nv + nh));
                for (v, h) in &t.pcd.chains {
                    chains.extend_from_slice(v.as_slice());
                    chains.extend_from_slice(h.as_slice());
                }
                ckpt.push_u8s(
                    "mem.chains",
                    vec![t.pcd.chains.len() as u64, nv as u64, nh as u64],
                    chains,
                );
            }
            Memory::Qbm(t) => {
                ckpt.push_vector("mem.bias", &t.params.bias);
                ckpt.push_matrix("mem.weights", &t.params.weights);
                ckpt.push_vector("mem.transverse_field", &t.params.transverse_field);
                ckpt.push_adam("mem.adam", &t.adam);
            }
        }
        ckpt.push_rng("nn", &self.nn_rng);
        save_checkpoint(&checkpoint_path(&self.config.output_dir, self.seq), &ckpt)
    }

    fn log(&mut self, row: MetricRow) -> Result<()> {
        self.rows.push(row);
        Ok(())
    }

    /// Exact distribution of feature-layer firings on the holdout set: the
    /// mixture of per-row Bernoulli products over the feature cube.
    fn feature_table(&self) -> Result<Vec<f64>> {
        let features = self.trainer.feature_rows(&self.holdout)?;
        let f = features.ncols();
        let mut table = vec![0.0; 1 << f];
        for row in features.row_iter() {
            for (z, slot) in table.iter_mut().enumerate() {
                let mut p = 1.0;
                for j in 0..f {
                    let pj = row[j];
                    p *= if (z >> j) & 1 == 1 { pj } else { 1.0 - pj };
                }
                *slot += p;
            }
        }
        let total: f64 = table.iter().sum();
        for t in &mut table {
            *t /= total;
        }
        Ok(table)
    }

    /// Exact memory marginal when the model is small enough to enumerate;
    /// the metric is skipped (not an error) past the bound.
    fn memory_marginal(&self) -> Result<Option<Vec<f64>>> {
        let result = match &self.trainer.memory {
            Memory::None => return Ok(None),
            Memory::Rbm(t) => t.params.exact_marginal(),
            Memory::Qbm(t) => t.params.exact_thermal().map(|th| th.visible_marginal),
        };
        match result {
            Ok(marginal) => Ok(Some(marginal)),
            Err(Error::EnumerationBound { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn evaluate(&mut self, epoch: u64) -> Result<()> {
        let mode = gan_mode(self.config.experiment).as_str().to_string();
        // Deterministic per-epoch evaluation stream: independent of the
        // training stream so checkpoints do not need its position.
        let mut eval_rng = rng::substream(self.config.seed, "eval", epoch);

        let d_mean = self.trainer.discriminator_mean(&self.holdout)?;
        self.log(MetricRow {
            epoch,
            mode: mode.clone(),
            metric: "d_real_mean".into(),
            mean: d_mean,
            std: 0.0,
        })?;

        let due = epoch.is_multiple_of(self.config.eval.every.max(1) as u64)
            || epoch == self.config.gan.epochs as u64;
        if !due {
            return Ok(());
        }

        // Generated records arrive in [-1, 1]; the classifier consumes [0, 1].
        let generated = self.trainer.generate(self.config.eval.samples, &mut eval_rng)?;
        let generated01 = generated.map(|x| (x + 1.0) * 0.5);
        let probs_cache = self.classifier.forward(&generated01)?;
        let probs = probs_cache.output();
        let report = inception_score_from_probs(probs, self.config.eval.batches)?;
        self.log(MetricRow {
            epoch,
            mode: mode.clone(),
            metric: "is".into(),
            mean: report.mean,
            std: report.std_of_mean,
        })?;

        // Frechet distance in the classifier's hidden feature space.
        let gen_features = self.classifier.forward(&generated01)?.post[0].clone();
        let real_features = self.classifier.forward(&self.holdout_raw)?.post[0].clone();
        let fid = frechet_distance(
            &feature_summary_from_matrix(&gen_features)?,
            &feature_summary_from_matrix(&real_features)?,
        )?;
        self.log(MetricRow {
            epoch,
            mode: mode.clone(),
            metric: "fid".into(),
            mean: fid,
            std: 0.0,
        })?;

        if self.trainer.config.latent_dim <= 12 {
            if let Some(marginal) = self.memory_marginal()? {
                let features = self.feature_table()?;
                let kl = kl_divergence(&features, &marginal)?;
                self.log(MetricRow {
                    epoch,
                    mode,
                    metric: "bm_feature_kl".into(),
                    mean: kl,
                    std: 0.0,
                })?;
            }
        }
        Ok(())
    }

    fn run(mut self) -> Result<()> {
        let mode = gan_mode(self.config.experiment).as_str().to_string();
        while self.trainer.epoch < self.config.gan.epochs {
            let mut epoch_rng = self.nn_rng.clone();
            let stats = self.trainer.run_epoch(&self.gan_data, &mut epoch_rng)?;
            self.nn_rng = epoch_rng;
            let epoch = self.trainer.epoch as u64;
            self.log(MetricRow {
                epoch,
                mode: mode.clone(),
                metric: "j_g".into(),
                mean: stats.j_g,
                std: 0.0,
            })?;
            self.evaluate(epoch)?;
            write_metrics_csv(&self.config.output_dir, &self.rows)?;
            self.checkpoint()?;
        }
        Ok(())
    }
}

// --- oracle validation suite ------------------------------------------------

struct OracleReport {
    lines: Vec<String>,
    failures: usize,
}

impl OracleReport {
    fn check(&mut self, name: &str, pass: bool, detail: String) {
        let status = if pass { "OK  " } else { "FAIL" };
        let line = format!("{status} {name}: {detail}");
        println!("{line}");
        self.lines.push(line);
        if !pass {
            self.failures += 1;
        }
    }
}

/// Quick exact-oracle validation battery behind the `oracle` CLI verb.
pub fn run_oracle_suite(config: &ExperimentConfig) -> Result<()> {
    let mut report = OracleReport {
        lines: Vec::new(),
        failures: 0,
    };
    let seed = config.seed;

    // RBM gradient against central finite differences.
    {
        let mut r = rng::stream(seed, "rbm");
        let mut p = RbmParams::xavier(5, 3, &mut r);
        for x in p.visible_bias.iter_mut() {
            *x = r.random::<f64>() - 0.5;
        }
        let mut data = vec![0.0; 32];
        for d in &mut data {
            *d = r.random::<f64>();
        }
        let total: f64 = data.iter().sum();
        for d in &mut data {
            *d /= total;
        }
        let grad = p.exact_grad(&data)?.flatten();
        let mut flat = p.flatten();
        let h = 1e-5;
        let mut diff2 = 0.0;
        let mut norm2 = 0.0;
        for i in 0..flat.len() {
            let orig = flat[i];
            let mut probe = p.clone();
            flat[i] = orig + h;
            probe.set_from_flat(&flat)?;
            let up = probe.exact_nll(&data)?;
            flat[i] = orig - h;
            probe.set_from_flat(&flat)?;
            let down = probe.exact_nll(&data)?;
            flat[i] = orig;
            let fd = (up - down) / (2.0 * h);
            diff2 += (grad[i] - fd) * (grad[i] - fd);
            norm2 += fd * fd;
        }
        let rel = (diff2 / norm2).sqrt();
        report.check(
            "rbm gradient vs finite differences",
            rel < 1e-6,
            format!("relative error {rel:.3e} (tolerance 1e-6)"),
        );
    }

    // QBM bound gradient against finite differences of the bound loss.
    {
        let mut r = rng::stream(seed, "qbm");
        let mut p = QbmParams::xavier(3, 2, 2.0, &mut r)?;
        for x in p.bias.iter_mut() {
            *x = r.random::<f64>() - 0.5;
        }
        let mut table = vec![0.0; 8];
        let mut minibatch = Vec::new();
        for (idx, t) in table.iter_mut().enumerate() {
            let copies = 2 + (idx % 3);
            *t = copies as f64;
            for _ in 0..copies {
                minibatch.push(crate::qbm::spin_from_index(idx, 3));
            }
        }
        let total: f64 = table.iter().sum();
        for t in &mut table {
            *t /= total;
        }
        let neg = p.exact_thermal()?.to_moment_estimate(3, 2);
        let grad = p.bound_gradient(&minibatch, &neg)?.flatten();
        let mut flat = p.flatten_trainable();
        let h = 1e-5;
        let mut diff2 = 0.0;
        let mut norm2 = 0.0;
        for i in 0..flat.len() {
            let orig = flat[i];
            let mut probe = p.clone();
            flat[i] = orig + h;
            probe.set_trainable(&flat)?;
            let up = probe.exact_bound_loss(&table)?;
            flat[i] = orig - h;
            probe.set_trainable(&flat)?;
            let down = probe.exact_bound_loss(&table)?;
            flat[i] = orig;
            let fd = (up - down) / (2.0 * h);
            diff2 += (grad[i] - fd) * (grad[i] - fd);
            norm2 += fd * fd;
        }
        let rel = (diff2 / norm2).sqrt();
        report.check(
            "qbm bound gradient vs finite differences",
            rel < 1e-5,
            format!("relative error {rel:.3e} (tolerance 1e-5)"),
        );
    }

    // Dense-net reverse mode against finite differences.
    {
        let mut r = rng::stream(seed, "nn");
        let net = DenseNet::xavier(
            &[4, 5, 3],
            &[Activation::LeakyRelu(0.2), Activation::Sigmoid],
            None,
            &mut r,
        )?;
        let x = DMatrix::from_fn(4, 4, |i, j| 0.21 + 0.13 * i as f64 - 0.3 * j as f64);
        let coeff = DMatrix::from_fn(4, 3, |i, j| 0.5 - 0.2 * i as f64 + 0.1 * j as f64);
        let cache = net.forward(&x)?;
        let (grads, _) = net.backward(&cache, &coeff)?;
        let analytic = grads.flatten();
        let mut flat = net.flatten_params();
        let h = 1e-5;
        let mut max_rel: f64 = 0.0;
        for i in 0..flat.len() {
            let orig = flat[i];
            let mut probe = net.clone();
            flat[i] = orig + h;
            probe.set_params(&flat)?;
            let up = probe.forward(&x)?.output().zip_map(&coeff, |y, c| y * c).sum();
            flat[i] = orig - h;
            probe.set_params(&flat)?;
            let down = probe.forward(&x)?.output().zip_map(&coeff, |y, c| y * c).sum();
            flat[i] = orig;
            let fd: f64 = (up - down) / (2.0 * h);
            let denom = fd.abs().max(analytic[i].abs()).max(1e-6);
            max_rel = max_rel.max((fd - analytic[i]).abs() / denom);
        }
        report.check(
            "dense-net backward vs finite differences",
            max_rel < 1e-5,
            format!("max relative error {max_rel:.3e} (tolerance 1e-5)"),
        );
    }

    // Clamped hidden expectations against clamped-Hamiltonian factorization.
    {
        let mut r = rng::stream(seed, "qbm");
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let mut p = QbmParams::xavier(3, 2, 0.5 + 2.0 * r.random::<f64>(), &mut r)?;
            for x in p.bias.iter_mut() {
                *x = r.random::<f64>() * 2.0 - 1.0;
            }
            let v = SpinVector::new(
                (0..3)
                    .map(|_| if r.random::<f64>() < 0.5 { -1 } else { 1 })
                    .collect(),
            )?;
            let formula = p.clamped_hidden_expect(&v)?;
            // Independent route: each hidden unit is a 2x2 thermal problem.
            for (h, &m) in formula.iter().enumerate() {
                let b_eff: f64 = p.bias[3 + h]
                    + v.as_slice()
                        .iter()
                        .enumerate()
                        .map(|(vu, &s)| s as f64 * p.weights[(vu, h)])
                        .sum::<f64>();
                let gamma = p.transverse_field[3 + h];
                let d = (gamma * gamma + b_eff * b_eff).sqrt();
                let mat = DMatrix::from_row_slice(2, 2, &[-b_eff, -gamma, -gamma, b_eff]);
                let eig = mat.symmetric_eigen();
                let w: Vec<f64> = eig.eigenvalues.iter().map(|&l| (-l).exp()).collect();
                let z: f64 = w.iter().sum();
                let mut expect = 0.0;
                for (k, &wk) in w.iter().enumerate() {
                    let col = eig.eigenvectors.column(k);
                    expect += (col[0] * col[0] - col[1] * col[1]) * wk / z;
                }
                worst = worst.max((m - expect).abs());
                let _ = d;
            }
        }
        report.check(
            "clamped expectations vs diagonalization",
            worst < 1e-12,
            format!("max abs deviation {worst:.3e} (tolerance 1e-12)"),
        );
    }

    // Bound dominance on random instances.
    {
        let mut r = rng::stream(seed, "qbm");
        let mut violations = 0usize;
        let mut margin = f64::INFINITY;
        for _ in 0..50 {
            let mut p = QbmParams::xavier(3, 2, 0.2 + 3.0 * r.random::<f64>(), &mut r)?;
            for x in p.bias.iter_mut() {
                *x = r.random::<f64>() * 2.0 - 1.0;
            }
            let mut data = vec![0.0; 8];
            for d in &mut data {
                *d = r.random::<f64>();
            }
            let total: f64 = data.iter().sum();
            for d in &mut data {
                *d /= total;
            }
            let bound = p.exact_bound_loss(&data)?;
            let nll = p.exact_nll(&data)?;
            margin = margin.min(bound - nll);
            if bound < nll - 1e-10 {
                violations += 1;
            }
        }
        report.check(
            "variational bound dominates the exact loss",
            violations == 0,
            format!("0 violations allowed, found {violations}; smallest margin {margin:.3e}"),
        );
    }

    // Metric identities.
    {
        let p = vec![0.25, 0.5, 0.25];
        let kl_self = kl_divergence(&p, &p)?;
        // Classes repeat with period 4, so batches of 4 are exactly
        // balanced and the confident classifier attains the class count.
        let probs = DMatrix::from_fn(40, 4, |i, j| f64::from(i % 4 == j));
        let is_max = inception_score_from_probs(&probs, 10)?.mean;
        let flat = DMatrix::from_fn(40, 4, |_, _| 0.25);
        let is_min = inception_score_from_probs(&flat, 10)?.mean;
        let a = crate::metrics::GaussianSummary {
            mean: nalgebra::DVector::from_row_slice(&[0.0]),
            cov: DMatrix::from_row_slice(1, 1, &[4.0]),
        };
        let b = crate::metrics::GaussianSummary {
            mean: nalgebra::DVector::from_row_slice(&[0.0]),
            cov: DMatrix::from_row_slice(1, 1, &[1.0]),
        };
        let fid = frechet_distance(&a, &b)?;
        let pass = kl_self == 0.0
            && (is_max - 4.0).abs() < 1e-9
            && (is_min - 1.0).abs() < 1e-12
            && (fid - 1.0).abs() < 1e-10;
        report.check(
            "metric identities (KL, score endpoints, scalar Frechet)",
            pass,
            format!("KL(p||p) = {kl_self}, score range [{is_min:.6}, {is_max:.6}], 1-d Frechet {fid:.6}"),
        );
    }

    // Sampler moments against exact diagonalization on one instance.
    {
        let mut r = rng::stream(seed, "pimc");
        let mut p = QbmParams::new(3, 2, 2.0)?;
        for x in p.bias.iter_mut() {
            *x = r.random::<f64>() * 2.0 - 1.0;
        }
        for x in p.weights.iter_mut() {
            *x = r.random::<f64>() * 2.0 - 1.0;
        }
        let th = p.exact_thermal()?;
        let cfg = TrotterConfig::linear(32, 512, 30, 8)?;
        let (_, stats) = crate::pimc::population_anneal(&p, &cfg, &mut r)?;
        let mut err: f64 = 0.0;
        for a in 0..5 {
            err = err.max((stats.first_moments[a] - th.first[a]).abs());
        }
        for v in 0..3 {
            for h in 0..2 {
                err = err.max((stats.second_moments[(v, h)] - th.second[(v, 3 + h)]).abs());
            }
        }
        report.check(
            "population-annealed moments vs exact thermal state",
            err < 0.05,
            format!("max moment error {err:.4} (tolerance 0.05)"),
        );
    }

    fs::create_dir_all(&config.output_dir)?;
    let mut text = String::new();
    for line in &report.lines {
        writeln!(text, "{line}").unwrap();
    }
    fs::write(config.output_dir.join("oracle.txt"), text)?;
    if report.failures > 0 {
        return Err(Error::InvalidConfig(format!(
            "{} oracle check(s) failed",
            report.failures
        )));
    }
    Ok(())
}
