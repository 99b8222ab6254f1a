//! Python bindings for the boltzgen engine: Bernoulli mixtures, both
//! Boltzmann machines with their exact oracles, the population-annealed
//! sampler, the distance metrics, and the experiment runner.

use nalgebra::DMatrix;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use boltzgen::cli::{ExperimentConfig, run_experiment};
use boltzgen::data;
use boltzgen::metrics;
use boltzgen::pimc::{population_anneal, sample_visible, TrotterConfig};
use boltzgen::qbm::{NegativeSampler, QbmParams, QbmTrainConfig};
use boltzgen::rbm::{AnnealSchedule, GradientEstimator, RbmParams, RbmTrainConfig};
use boltzgen::rng;

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// (first moments, second-moment block rows, effective sample size or log
/// trace, log partition).
type MomentsTuple = (Vec<f64>, Vec<Vec<f64>>, f64, f64);
/// (first moments, second-moment rows, visible marginal, log trace).
type ThermalTuple = (Vec<f64>, Vec<Vec<f64>>, Vec<f64>, f64);

fn bitvec(bits: Vec<u8>) -> PyResult<data::BitVector> {
    data::BitVector::new(bits).map_err(err)
}

/// Mixture of Bernoulli product distributions over the binary cube.
#[pyclass]
struct BernoulliMixture {
    inner: data::BernoulliMixture,
}

#[pymethods]
impl BernoulliMixture {
    #[new]
    fn new(modes: Vec<Vec<u8>>, q: f64) -> PyResult<Self> {
        let modes = modes
            .into_iter()
            .map(bitvec)
            .collect::<PyResult<Vec<_>>>()?;
        Ok(Self {
            inner: data::BernoulliMixture::new(modes, q).map_err(err)?,
        })
    }

    /// Draw `count` random modes of dimension `dim` from a seeded stream.
    #[staticmethod]
    fn random(count: usize, dim: usize, q: f64, seed: u64) -> PyResult<Self> {
        let mut rng = rng::stream(seed, "data");
        Ok(Self {
            inner: data::BernoulliMixture::random(count, dim, q, &mut rng).map_err(err)?,
        })
    }

    fn prob(&self, bits: Vec<u8>) -> PyResult<f64> {
        self.inner.prob(&bitvec(bits)?).map_err(err)
    }

    /// Full probability table indexed by packed bits (unit a at bit a).
    fn prob_table(&self) -> PyResult<Vec<f64>> {
        self.inner.prob_table().map_err(err)
    }

    fn sample(&self, count: usize, seed: u64) -> Vec<Vec<u32>> {
        let mut rng = rng::stream(seed, "data");
        self.inner
            .sample(count, &mut rng)
            .into_iter()
            .map(|s| s.as_slice().iter().map(|&b| b as u32).collect())
            .collect()
    }

    fn modes(&self) -> Vec<Vec<u32>> {
        self.inner
            .modes()
            .iter()
            .map(|m| m.as_slice().iter().map(|&b| b as u32).collect())
            .collect()
    }
}

/// Classical restricted Boltzmann machine over binary units.
#[pyclass]
struct Rbm {
    inner: RbmParams,
}

#[pymethods]
impl Rbm {
    /// Xavier weights and zero biases when a seed is given, all-zero
    /// parameters otherwise.
    #[new]
    #[pyo3(signature = (n_visible, n_hidden, seed=None))]
    fn new(n_visible: usize, n_hidden: usize, seed: Option<u64>) -> Self {
        let inner = match seed {
            Some(seed) => RbmParams::xavier(n_visible, n_hidden, &mut rng::stream(seed, "rbm")),
            None => RbmParams::zeros(n_visible, n_hidden),
        };
        Self { inner }
    }

    fn energy(&self, v: Vec<u8>, h: Vec<u8>) -> PyResult<f64> {
        self.inner.energy(&bitvec(v)?, &bitvec(h)?).map_err(err)
    }

    fn cond_hidden(&self, v: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self
            .inner
            .cond_hidden(&v)
            .map_err(err)?
            .as_slice()
            .to_vec())
    }

    fn cond_visible(&self, h: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self
            .inner
            .cond_visible(&h)
            .map_err(err)?
            .as_slice()
            .to_vec())
    }

    fn exact_marginal(&self) -> PyResult<Vec<f64>> {
        self.inner.exact_marginal().map_err(err)
    }

    fn exact_nll(&self, data_dist: Vec<f64>) -> PyResult<f64> {
        self.inner.exact_nll(&data_dist).map_err(err)
    }

    /// Train with persistent contrastive divergence and Adam; records are
    /// Bernoulli means in [0, 1]. Returns the per-epoch exact-NLL trace
    /// (NaN beyond the enumeration bound).
    #[pyo3(signature = (records, epochs=30, learning_rate=1e-3, gibbs_steps=5, batch_size=64, seed=0, persistent=true))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        &mut self,
        records: Vec<Vec<f64>>,
        epochs: usize,
        learning_rate: f64,
        gibbs_steps: usize,
        batch_size: usize,
        seed: u64,
        persistent: bool,
    ) -> PyResult<Vec<f64>> {
        let dataset = data::Dataset::new(records, None).map_err(err)?;
        let config = RbmTrainConfig {
            learning_rate,
            gibbs_steps,
            epochs,
            batch_size,
            estimator: if persistent {
                GradientEstimator::Pcd
            } else {
                GradientEstimator::Cd
            },
            ..Default::default()
        };
        let mut rng = rng::stream(seed, "rbm");
        let (trained, trace) =
            boltzgen::rbm::train_rbm(self.inner.clone(), &dataset, &config, &mut rng)
                .map_err(err)?;
        self.inner = trained;
        Ok(trace)
    }

    /// Annealed sampling: a linear schedule from beta 0 to 1 with the given
    /// rung count.
    #[pyo3(signature = (count, rungs=50, seed=0))]
    fn sample(&self, count: usize, rungs: usize, seed: u64) -> PyResult<Vec<Vec<u32>>> {
        let schedule = AnnealSchedule::linear(rungs);
        let mut rng = rng::stream(seed, "rbm");
        Ok(
            boltzgen::rbm::sample_annealed(&self.inner, count, &schedule, &mut rng)
                .map_err(err)?
                .into_iter()
                .map(|s| s.as_slice().iter().map(|&b| b as u32).collect())
                .collect(),
        )
    }

    #[getter]
    fn visible_bias(&self) -> Vec<f64> {
        self.inner.visible_bias.as_slice().to_vec()
    }

    #[getter]
    fn hidden_bias(&self) -> Vec<f64> {
        self.inner.hidden_bias.as_slice().to_vec()
    }

    /// Weights as rows over visible units.
    #[getter]
    fn weights(&self) -> Vec<Vec<f64>> {
        (0..self.inner.n_visible())
            .map(|v| {
                (0..self.inner.n_hidden())
                    .map(|h| self.inner.weights[(v, h)])
                    .collect()
            })
            .collect()
    }
}

/// Transverse-field Boltzmann machine over spin units.
#[pyclass]
struct Qbm {
    inner: QbmParams,
}

fn spinvec(spins: Vec<i8>) -> PyResult<data::SpinVector> {
    data::SpinVector::new(spins).map_err(err)
}

#[pymethods]
impl Qbm {
    #[new]
    #[pyo3(signature = (n_visible, n_hidden, gamma=2.0, seed=None))]
    fn new(n_visible: usize, n_hidden: usize, gamma: f64, seed: Option<u64>) -> PyResult<Self> {
        let inner = match seed {
            Some(seed) => {
                QbmParams::xavier(n_visible, n_hidden, gamma, &mut rng::stream(seed, "qbm"))
                    .map_err(err)?
            }
            None => QbmParams::new(n_visible, n_hidden, gamma).map_err(err)?,
        };
        Ok(Self { inner })
    }

    fn clamped_hidden_expect(&self, v: Vec<i8>) -> PyResult<Vec<f64>> {
        self.inner.clamped_hidden_expect(&spinvec(v)?).map_err(err)
    }

    /// Exact thermal observables: (first moments, second-moment rows,
    /// visible marginal, log trace).
    fn exact_thermal(&self) -> PyResult<ThermalTuple> {
        let th = self.inner.exact_thermal().map_err(err)?;
        let n = self.inner.n_units();
        let second = (0..n)
            .map(|a| (0..n).map(|b| th.second[(a, b)]).collect())
            .collect();
        Ok((
            th.first.as_slice().to_vec(),
            second,
            th.visible_marginal,
            th.log_trace,
        ))
    }

    fn visible_marginal(&self) -> PyResult<Vec<f64>> {
        Ok(self.inner.exact_thermal().map_err(err)?.visible_marginal)
    }

    fn exact_bound_loss(&self, data_dist: Vec<f64>) -> PyResult<f64> {
        self.inner.exact_bound_loss(&data_dist).map_err(err)
    }

    fn exact_nll(&self, data_dist: Vec<f64>) -> PyResult<f64> {
        self.inner.exact_nll(&data_dist).map_err(err)
    }

    /// Train on visible bit records with the population-annealed sampler
    /// providing the negative phase.
    #[pyo3(signature = (records, epochs=30, learning_rate=1e-3, batch_size=64, slices=10, replicas=64, anneal_steps=5, sweeps_per_step=5, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        &mut self,
        records: Vec<Vec<u8>>,
        epochs: usize,
        learning_rate: f64,
        batch_size: usize,
        slices: usize,
        replicas: usize,
        anneal_steps: usize,
        sweeps_per_step: usize,
        seed: u64,
    ) -> PyResult<()> {
        let spins: Vec<data::SpinVector> = records
            .into_iter()
            .map(|bits| Ok(data::bits_to_spins(&bitvec(bits)?)))
            .collect::<PyResult<_>>()?;
        let trotter = TrotterConfig::linear(slices, replicas, anneal_steps, sweeps_per_step)
            .map_err(err)?;
        let config = QbmTrainConfig {
            learning_rate,
            epochs,
            batch_size,
            sampler: NegativeSampler::Pimc(trotter),
            ..Default::default()
        };
        let (trained, _) = boltzgen::qbm::train_qbm(
            self.inner.clone(),
            &spins,
            &config,
            &mut rng::stream(seed, "qbm"),
            &mut rng::stream(seed, "pimc"),
        )
        .map_err(err)?;
        self.inner = trained;
        Ok(())
    }

    /// Population-annealed free-phase estimates: (first moments,
    /// visible-hidden second moments, effective sample size, log partition).
    #[pyo3(signature = (slices=10, replicas=64, anneal_steps=5, sweeps_per_step=5, seed=0))]
    fn population_moments(
        &self,
        slices: usize,
        replicas: usize,
        anneal_steps: usize,
        sweeps_per_step: usize,
        seed: u64,
    ) -> PyResult<MomentsTuple> {
        let cfg = TrotterConfig::linear(slices, replicas, anneal_steps, sweeps_per_step)
            .map_err(err)?;
        let mut rng = rng::stream(seed, "pimc");
        let (_, stats) = population_anneal(&self.inner, &cfg, &mut rng).map_err(err)?;
        let second = (0..self.inner.n_visible)
            .map(|v| {
                (0..self.inner.n_hidden())
                    .map(|h| stats.second_moments[(v, h)])
                    .collect()
            })
            .collect();
        Ok((
            stats.first_moments.as_slice().to_vec(),
            second,
            stats.effective_sample_size,
            stats.log_partition,
        ))
    }

    /// Visible spin samples read from an annealed replica population.
    #[pyo3(signature = (count, slices=10, replicas=64, anneal_steps=5, sweeps_per_step=5, seed=0))]
    fn sample(
        &self,
        count: usize,
        slices: usize,
        replicas: usize,
        anneal_steps: usize,
        sweeps_per_step: usize,
        seed: u64,
    ) -> PyResult<Vec<Vec<i32>>> {
        let cfg = TrotterConfig::linear(slices, replicas, anneal_steps, sweeps_per_step)
            .map_err(err)?;
        let mut rng = rng::stream(seed, "pimc");
        let (pop, _) = population_anneal(&self.inner, &cfg, &mut rng).map_err(err)?;
        Ok(sample_visible(&pop, self.inner.n_visible, count, &mut rng)
            .into_iter()
            .map(|s| s.as_slice().iter().map(|&v| v as i32).collect())
            .collect())
    }

    #[getter]
    fn bias(&self) -> Vec<f64> {
        self.inner.bias.as_slice().to_vec()
    }

    #[getter]
    fn transverse_field(&self) -> Vec<f64> {
        self.inner.transverse_field.as_slice().to_vec()
    }

    #[getter]
    fn weights(&self) -> Vec<Vec<f64>> {
        (0..self.inner.n_visible)
            .map(|v| {
                (0..self.inner.n_hidden())
                    .map(|h| self.inner.weights[(v, h)])
                    .collect()
            })
            .collect()
    }
}

/// `sum p ln(p/q)` in nats; `inf` when q vanishes on p's support.
#[pyfunction]
fn kl_divergence(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    metrics::kl_divergence(&p, &q).map_err(err)
}

/// Inception-style score from class-probability rows; returns (mean,
/// std of the mean).
#[pyfunction]
fn inception_score(probs: Vec<Vec<f64>>, batches: usize) -> PyResult<(f64, f64)> {
    if probs.is_empty() {
        return Err(PyValueError::new_err("empty probability matrix"));
    }
    let rows = probs.len();
    let cols = probs[0].len();
    if probs.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("ragged probability matrix"));
    }
    let m = DMatrix::from_fn(rows, cols, |i, j| probs[i][j]);
    let report = metrics::inception_score_from_probs(&m, batches).map_err(err)?;
    Ok((report.mean, report.std_of_mean))
}

/// Squared Frechet distance between Gaussian summaries given as (mean,
/// row-major covariance) pairs.
#[pyfunction]
fn frechet_distance(
    mean_a: Vec<f64>,
    cov_a: Vec<Vec<f64>>,
    mean_b: Vec<f64>,
    cov_b: Vec<Vec<f64>>,
) -> PyResult<f64> {
    let summary = |mean: Vec<f64>, cov: Vec<Vec<f64>>| -> PyResult<metrics::GaussianSummary> {
        let f = mean.len();
        if cov.len() != f || cov.iter().any(|r| r.len() != f) {
            return Err(PyValueError::new_err("covariance shape mismatch"));
        }
        Ok(metrics::GaussianSummary {
            mean: nalgebra::DVector::from_row_slice(&mean),
            cov: DMatrix::from_fn(f, f, |i, j| cov[i][j]),
        })
    };
    metrics::frechet_distance(&summary(mean_a, cov_a)?, &summary(mean_b, cov_b)?).map_err(err)
}

/// Sample mean and unbiased covariance of feature rows.
#[pyfunction]
fn feature_summary(rows: Vec<Vec<f64>>) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
    let summary = metrics::feature_summary(&rows, |r: &Vec<f64>| r.clone()).map_err(err)?;
    let f = summary.mean.len();
    let cov = (0..f)
        .map(|i| (0..f).map(|j| summary.cov[(i, j)]).collect())
        .collect();
    Ok((summary.mean.as_slice().to_vec(), cov))
}

#[pyfunction]
fn bits_to_spins(bits: Vec<u8>) -> PyResult<Vec<i32>> {
    Ok(data::bits_to_spins(&bitvec(bits)?)
        .as_slice()
        .iter()
        .map(|&v| v as i32)
        .collect())
}

#[pyfunction]
fn spins_to_bits(spins: Vec<i8>) -> PyResult<Vec<u32>> {
    Ok(data::spins_to_bits(&spinvec(spins)?)
        .as_slice()
        .iter()
        .map(|&b| b as u32)
        .collect())
}

/// Canonical config text for an experiment's defaults.
#[pyfunction]
fn default_config(experiment: &str) -> PyResult<String> {
    let experiment = boltzgen::cli::Experiment::parse(experiment).map_err(err)?;
    Ok(ExperimentConfig::default_for(experiment).to_text())
}

/// Run a full experiment from flat `key = value` config text; artifacts land
/// in `output_dir`. Returns the resolved config text.
#[pyfunction]
fn run_experiment_from_text(config_text: &str, output_dir: &str) -> PyResult<String> {
    let mut config = ExperimentConfig::parse(config_text).map_err(err)?;
    config.output_dir = std::path::PathBuf::from(output_dir);
    run_experiment(&config).map_err(err)?;
    Ok(config.to_text())
}

#[pymodule]
fn boltzgen_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<BernoulliMixture>()?;
    m.add_class::<Rbm>()?;
    m.add_class::<Qbm>()?;
    m.add_function(wrap_pyfunction!(kl_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(inception_score, m)?)?;
    m.add_function(wrap_pyfunction!(frechet_distance, m)?)?;
    m.add_function(wrap_pyfunction!(feature_summary, m)?)?;
    m.add_function(wrap_pyfunction!(bits_to_spins, m)?)?;
    m.add_function(wrap_pyfunction!(spins_to_bits, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment_from_text, m)?)?;
    Ok(())
}
