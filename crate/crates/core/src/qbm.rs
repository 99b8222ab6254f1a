//! Transverse-field (quantum) Boltzmann machine on spin units: exact
//! small-instance thermal oracle by dense diagonalization, analytically exact
//! clamped positive phase, and training on the variational bound of the
//! negative log-likelihood.
//!
//! The Hamiltonian is `H = -sum_a G_a X_a - sum_a b_a Z_a - sum_(v,h) W_vh
//! Z_v Z_h` over `n_visible + n_hidden` spins with bipartite couplings only.
//! The transverse field `G` is a fixed hyperparameter: training the bound
//! would drive it to zero, so it receives no gradient.

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha12Rng;

use crate::data::SpinVector;
use crate::error::{Error, Result};
use crate::nn::{xavier_init, AdamState};
use crate::pimc::{population_anneal, MomentEstimate, TrotterConfig};

/// Diagonalization limit (total spin count; Hilbert dimension `2^n`).
pub const DIAG_BOUND: usize = 12;

#[derive(Debug, Clone, PartialEq)]
pub struct QbmParams {
    /// Transverse field per unit, fixed during training. Entries must be
    /// nonnegative.
    pub transverse_field: DVector<f64>,
    /// Longitudinal bias per unit (visible units first).
    pub bias: DVector<f64>,
    /// `n_visible x n_hidden` couplings; no visible-visible or hidden-hidden
    /// terms exist.
    pub weights: DMatrix<f64>,
    pub n_visible: usize,
}

impl QbmParams {
    pub fn new(n_visible: usize, n_hidden: usize, gamma: f64) -> Result<Self> {
        if gamma < 0.0 {
            return Err(Error::OutOfRange("transverse field must be nonnegative".into()));
        }
        Ok(Self {
            transverse_field: DVector::from_element(n_visible + n_hidden, gamma),
            bias: DVector::zeros(n_visible + n_hidden),
            weights: DMatrix::zeros(n_visible, n_hidden),
            n_visible,
        })
    }

    /// Xavier couplings, zero biases, uniform transverse field.
    pub fn xavier(
        n_visible: usize,
        n_hidden: usize,
        gamma: f64,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self> {
        let mut p = Self::new(n_visible, n_hidden, gamma)?;
        p.weights = xavier_init(n_visible, n_hidden, rng);
        Ok(p)
    }

    pub fn n_hidden(&self) -> usize {
        self.bias.len() - self.n_visible
    }

    pub fn n_units(&self) -> usize {
        self.bias.len()
    }

    fn check_diag_bound(&self) -> Result<()> {
        if self.n_units() > DIAG_BOUND {
            return Err(Error::EnumerationBound {
                units: self.n_units(),
                bound: DIAG_BOUND,
            });
        }
        Ok(())
    }

    /// Classical energy of a spin configuration packed into a basis index
    /// (bit 1 means spin +1).
    pub(crate) fn diagonal_energy(&self, state: usize) -> f64 {
        let spin = |a: usize| -> f64 {
            if (state >> a) & 1 == 1 {
                1.0
            } else {
                -1.0
            }
        };
        let mut e = 0.0;
        for a in 0..self.n_units() {
            e -= self.bias[a] * spin(a);
        }
        for v in 0..self.n_visible {
            let sv = spin(v);
            for h in 0..self.n_hidden() {
                e -= self.weights[(v, h)] * sv * spin(self.n_visible + h);
            }
        }
        e
    }

    /// Dense Hamiltonian in the computational basis.
    fn hamiltonian(&self) -> DMatrix<f64> {
        let n = self.n_units();
        let dim = 1usize << n;
        let mut h = DMatrix::zeros(dim, dim);
        for s in 0..dim {
            h[(s, s)] = self.diagonal_energy(s);
            for a in 0..n {
                // X_a flips bit a.
                h[(s ^ (1 << a), s)] -= self.transverse_field[a];
            }
        }
        h
    }

    /// Exact thermal observables of `rho = e^{-H} / tr e^{-H}`.
    pub fn exact_thermal(&self) -> Result<ThermalObservables> {
        self.check_diag_bound()?;
        let n = self.n_units();
        let dim = 1usize << n;
        let eig = self.hamiltonian().symmetric_eigen();
        let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        let weights: Vec<f64> = eig.eigenvalues.iter().map(|&l| (-(l - min)).exp()).collect();
        let z: f64 = weights.iter().sum();
        let log_trace = -min + z.ln();

        // Diagonal of rho in the computational basis; all Z observables and
        // the visible marginal follow from it.
        let mut diag = vec![0.0; dim];
        for (k, &w) in weights.iter().enumerate() {
            let col = eig.eigenvectors.column(k);
            let scale = w / z;
            for s in 0..dim {
                diag[s] += col[s] * col[s] * scale;
            }
        }

        let spin = |s: usize, a: usize| -> f64 {
            if (s >> a) & 1 == 1 {
                1.0
            } else {
                -1.0
            }
        };
        let mut first = DVector::zeros(n);
        let mut second = DMatrix::zeros(n, n);
        for (s, &p) in diag.iter().enumerate() {
            for a in 0..n {
                let za = spin(s, a);
                first[a] += p * za;
                for b in 0..n {
                    second[(a, b)] += p * za * spin(s, b);
                }
            }
        }
        let mut visible_marginal = vec![0.0; 1 << self.n_visible];
        let mask = (1 << self.n_visible) - 1;
        for (s, &p) in diag.iter().enumerate() {
            visible_marginal[s & mask] += p;
        }
        Ok(ThermalObservables {
            first,
            second,
            visible_marginal,
            log_trace,
        })
    }

    fn check_clamped(&self, v: &SpinVector) -> Result<()> {
        if v.len() != self.n_visible {
            return Err(Error::DimMismatch {
                context: "clamped context",
                expected: self.n_visible,
                got: v.len(),
            });
        }
        Ok(())
    }

    /// Effective longitudinal field on hidden unit `h` with the visible layer
    /// clamped to `v`.
    pub(crate) fn effective_field(&self, v: &SpinVector, h: usize) -> f64 {
        let mut b = self.bias[self.n_visible + h];
        for (vu, &s) in v.as_slice().iter().enumerate() {
            b += s as f64 * self.weights[(vu, h)];
        }
        b
    }

    /// Exact clamped expectation `<Z_h>_v = (b_eff / D) tanh(D)` with
    /// `D = sqrt(G_h^2 + b_eff^2)`; the `D = 0` point continues to 0.
    pub fn clamped_hidden_expect(&self, v: &SpinVector) -> Result<Vec<f64>> {
        self.check_clamped(v)?;
        Ok((0..self.n_hidden())
            .map(|h| {
                let b_eff = self.effective_field(v, h);
                let gamma = self.transverse_field[self.n_visible + h];
                let d = (gamma * gamma + b_eff * b_eff).sqrt();
                if d == 0.0 {
                    0.0
                } else {
                    (b_eff / d) * d.tanh()
                }
            })
            .collect())
    }

    /// `ln tr e^{-H_v}` where the clamped Hamiltonian replaces visible
    /// operators by the numbers `v` and drops their transverse field. The
    /// hidden units decouple, so the trace factorizes into `2 cosh(D_h)`
    /// terms.
    pub fn log_clamped_trace(&self, v: &SpinVector) -> Result<f64> {
        self.check_clamped(v)?;
        let mut lt = 0.0;
        for (vu, &s) in v.as_slice().iter().enumerate() {
            lt += self.bias[vu] * s as f64;
        }
        for h in 0..self.n_hidden() {
            let b_eff = self.effective_field(v, h);
            let gamma = self.transverse_field[self.n_visible + h];
            let d = (gamma * gamma + b_eff * b_eff).sqrt();
            // ln(2 cosh d) = |d| + ln(1 + e^{-2|d|}), saturation-free.
            lt += d.abs() + (-2.0 * d.abs()).exp().ln_1p();
        }
        Ok(lt)
    }

    /// Variational upper bound on the negative log-likelihood:
    /// `-sum_v P_data(v) ln( tr e^{-H_v} / tr e^{-H} )`.
    pub fn exact_bound_loss(&self, data_dist: &[f64]) -> Result<f64> {
        let expected = 1usize << self.n_visible;
        if data_dist.len() != expected {
            return Err(Error::SupportMismatch(data_dist.len(), expected));
        }
        let log_trace = self.exact_thermal()?.log_trace;
        let mut loss = 0.0;
        for (idx, &p) in data_dist.iter().enumerate() {
            if p > 0.0 {
                let v = spin_from_index(idx, self.n_visible);
                loss -= p * (self.log_clamped_trace(&v)? - log_trace);
            }
        }
        Ok(loss)
    }

    /// Exact negative log-likelihood from the thermal visible marginal.
    pub fn exact_nll(&self, data_dist: &[f64]) -> Result<f64> {
        let marginal = self.exact_thermal()?.visible_marginal;
        if data_dist.len() != marginal.len() {
            return Err(Error::SupportMismatch(data_dist.len(), marginal.len()));
        }
        let mut nll = 0.0;
        for (&p, &m) in data_dist.iter().zip(&marginal) {
            if p > 0.0 {
                nll -= p * m.ln();
            }
        }
        Ok(nll)
    }

    /// Gradient of the bound over `(bias, weights)`.
    ///
    /// The clamped positive phase is exact: visible expectations equal the
    /// data spins, hidden expectations come from
    /// [`clamped_hidden_expect`](Self::clamped_hidden_expect), cross terms
    /// are their product. The free negative phase comes from `neg_stats`
    /// (population-annealed Monte Carlo or the exact oracle). The returned
    /// direction is free minus clamped, the true derivative of the bound; the
    /// transverse field receives no gradient.
    pub fn bound_gradient(
        &self,
        minibatch: &[SpinVector],
        neg_stats: &MomentEstimate,
    ) -> Result<QbmGrad> {
        if minibatch.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let n = self.n_units();
        if neg_stats.first_moments.len() != n {
            return Err(Error::DimMismatch {
                context: "negative first moments",
                expected: n,
                got: neg_stats.first_moments.len(),
            });
        }
        if neg_stats.second_moments.nrows() != self.n_visible
            || neg_stats.second_moments.ncols() != self.n_hidden()
        {
            return Err(Error::DimMismatch {
                context: "negative second moments",
                expected: self.n_visible * self.n_hidden(),
                got: neg_stats.second_moments.len(),
            });
        }
        let mut pos_bias = DVector::zeros(n);
        let mut pos_w = DMatrix::zeros(self.n_visible, self.n_hidden());
        for v in minibatch {
            self.check_clamped(v)?;
            let hidden = self.clamped_hidden_expect(v)?;
            for (vu, &s) in v.as_slice().iter().enumerate() {
                pos_bias[vu] += s as f64;
            }
            for (h, &m) in hidden.iter().enumerate() {
                pos_bias[self.n_visible + h] += m;
                for (vu, &s) in v.as_slice().iter().enumerate() {
                    pos_w[(vu, h)] += s as f64 * m;
                }
            }
        }
        let scale = 1.0 / minibatch.len() as f64;
        pos_bias *= scale;
        pos_w *= scale;
        Ok(QbmGrad {
            bias: &neg_stats.first_moments - pos_bias,
            weights: &neg_stats.second_moments - pos_w,
        })
    }

    pub fn flatten_trainable(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.bias.len() + self.weights.len());
        out.extend_from_slice(self.bias.as_slice());
        out.extend_from_slice(self.weights.as_slice());
        out
    }

    pub fn set_trainable(&mut self, flat: &[f64]) -> Result<()> {
        let expected = self.bias.len() + self.weights.len();
        if flat.len() != expected {
            return Err(Error::DimMismatch {
                context: "set_trainable",
                expected,
                got: flat.len(),
            });
        }
        let nb = self.bias.len();
        self.bias.as_mut_slice().copy_from_slice(&flat[..nb]);
        self.weights.as_mut_slice().copy_from_slice(&flat[nb..]);
        Ok(())
    }
}

pub(crate) fn spin_from_index(idx: usize, n: usize) -> SpinVector {
    SpinVector::new(
        (0..n)
            .map(|a| if (idx >> a) & 1 == 1 { 1 } else { -1 })
            .collect(),
    )
    .unwrap()
}

/// Exact thermal expectations and visible marginal of a small instance.
#[derive(Debug, Clone)]
pub struct ThermalObservables {
    pub first: DVector<f64>,
    /// Full `n x n` table of `<Z_a Z_b>`.
    pub second: DMatrix<f64>,
    pub visible_marginal: Vec<f64>,
    pub log_trace: f64,
}

impl ThermalObservables {
    /// Repackage as negative-phase statistics (exact, infinite effective
    /// sample size).
    pub fn to_moment_estimate(&self, n_visible: usize, n_hidden: usize) -> MomentEstimate {
        let second = DMatrix::from_fn(n_visible, n_hidden, |v, h| {
            self.second[(v, n_visible + h)]
        });
        MomentEstimate {
            first_moments: self.first.clone(),
            second_moments: second,
            effective_sample_size: f64::INFINITY,
            log_partition: self.log_trace,
        }
    }
}

/// Gradient container for the trainable QBM parameters.
#[derive(Debug, Clone)]
pub struct QbmGrad {
    pub bias: DVector<f64>,
    pub weights: DMatrix<f64>,
}

impl QbmGrad {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(self.bias.as_slice());
        out.extend_from_slice(self.weights.as_slice());
        out
    }

    pub fn norm(&self) -> f64 {
        self.flatten().iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// Source of negative-phase statistics during training.
#[derive(Debug, Clone)]
pub enum NegativeSampler {
    /// Population-annealed path-integral Monte Carlo.
    Pimc(TrotterConfig),
    /// Exact diagonalization (small instances only).
    Exact,
}

#[derive(Debug, Clone)]
pub struct QbmTrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub sampler: NegativeSampler,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    /// Record the exact bound loss per epoch (costs one diagonalization per
    /// epoch; only valid within the diagonalization bound).
    pub trace_bound: bool,
}

impl Default for QbmTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 30,
            batch_size: 64,
            sampler: NegativeSampler::Pimc(TrotterConfig::default()),
            adam_beta1: 0.5,
            adam_beta2: 0.9,
            trace_bound: false,
        }
    }
}

/// Stateful trainer; see [`crate::rbm::RbmTrainer`] for the rationale.
#[derive(Debug, Clone)]
pub struct QbmTrainer {
    pub params: QbmParams,
    pub adam: AdamState,
    pub config: QbmTrainConfig,
    pub epoch: usize,
}

impl QbmTrainer {
    pub fn new(params: QbmParams, config: QbmTrainConfig) -> Self {
        let adam = AdamState::new(
            params.bias.len() + params.weights.len(),
            config.learning_rate,
            config.adam_beta1,
            config.adam_beta2,
        );
        Self {
            params,
            adam,
            config,
            epoch: 0,
        }
    }

    /// One pass over the dataset of visible spin configurations in shuffled
    /// mini-batches. `pimc_rng` drives the negative-phase sampler, `rng` the
    /// shuffling.
    pub fn run_epoch(
        &mut self,
        data: &[SpinVector],
        rng: &mut ChaCha12Rng,
        pimc_rng: &mut ChaCha12Rng,
    ) -> Result<()> {
        use rand::Rng;
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let gamma_before = self.params.transverse_field.clone();
        let mut order: Vec<usize> = (0..data.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(self.config.batch_size) {
            let minibatch: Vec<SpinVector> = chunk.iter().map(|&i| data[i].clone()).collect();
            let neg = match &self.config.sampler {
                NegativeSampler::Pimc(cfg) => {
                    let (_, stats) = population_anneal(&self.params, cfg, pimc_rng)?;
                    stats
                }
                NegativeSampler::Exact => self
                    .params
                    .exact_thermal()?
                    .to_moment_estimate(self.params.n_visible, self.params.n_hidden()),
            };
            let grad = self.params.bound_gradient(&minibatch, &neg)?;
            let mut flat = self.params.flatten_trainable();
            self.adam.apply(&mut flat, &grad.flatten())?;
            self.params.set_trainable(&flat)?;
        }
        debug_assert_eq!(self.params.transverse_field, gamma_before);
        self.epoch += 1;
        Ok(())
    }
}

/// Train to completion, returning the trained parameters and a per-epoch
/// bound-loss trace (NaN when tracing is disabled or out of bound).
pub fn train_qbm(
    params: QbmParams,
    data: &[SpinVector],
    config: &QbmTrainConfig,
    rng: &mut ChaCha12Rng,
    pimc_rng: &mut ChaCha12Rng,
) -> Result<(QbmParams, Vec<f64>)> {
    let mut trainer = QbmTrainer::new(params, config.clone());
    let data_table = if config.trace_bound && trainer.params.n_units() <= DIAG_BOUND {
        let mut table = vec![0.0; 1 << trainer.params.n_visible];
        for v in data {
            let mut idx = 0usize;
            for (a, &s) in v.as_slice().iter().enumerate() {
                if s == 1 {
                    idx |= 1 << a;
                }
            }
            table[idx] += 1.0;
        }
        let total: f64 = table.iter().sum();
        for t in &mut table {
            *t /= total;
        }
        Some(table)
    } else {
        None
    };
    let mut trace = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        trainer.run_epoch(data, rng, pimc_rng)?;
        match &data_table {
            Some(table) => trace.push(trainer.params.exact_bound_loss(table)?),
            None => trace.push(f64::NAN),
        }
    }
    Ok((trainer.params, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{bits_to_spins, BitVector};
    use crate::rng;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn sv(spins: &[i8]) -> SpinVector {
        SpinVector::new(spins.to_vec()).unwrap()
    }

    fn random_qbm(nv: usize, nh: usize, gamma: f64, scale: f64, seed: u64) -> QbmParams {
        let mut r = rng::stream(seed, "qbm");
        let mut p = QbmParams::new(nv, nh, gamma).unwrap();
        for x in p.bias.iter_mut() {
            *x = (r.random::<f64>() - 0.5) * scale;
        }
        for x in p.weights.iter_mut() {
            *x = (r.random::<f64>() - 0.5) * scale;
        }
        p
    }

    /// Classical +-1-spin Boltzmann expectations by enumeration.
    fn classical_moments(p: &QbmParams) -> (DVector<f64>, DMatrix<f64>) {
        let n = p.n_units();
        let dim = 1usize << n;
        let mut weights = vec![0.0; dim];
        let mut z = 0.0;
        for (s, w) in weights.iter_mut().enumerate() {
            *w = (-p.diagonal_energy(s)).exp();
            z += *w;
        }
        let spin = |s: usize, a: usize| if (s >> a) & 1 == 1 { 1.0 } else { -1.0 };
        let mut first = DVector::zeros(n);
        let mut second = DMatrix::zeros(n, n);
        for (s, &w) in weights.iter().enumerate() {
            let prob = w / z;
            for a in 0..n {
                first[a] += prob * spin(s, a);
                for b in 0..n {
                    second[(a, b)] += prob * spin(s, a) * spin(s, b);
                }
            }
        }
        (first, second)
    }

    #[test]
    fn zero_field_thermal_matches_classical_enumeration() {
        let p = random_qbm(3, 2, 0.0, 2.0, 1);
        let th = p.exact_thermal().unwrap();
        let (first, second) = classical_moments(&p);
        for a in 0..5 {
            assert_abs_diff_eq!(th.first[a], first[a], epsilon = 1e-10);
            for b in 0..5 {
                assert_abs_diff_eq!(th.second[(a, b)], second[(a, b)], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn single_spin_symmetry_and_tanh() {
        // Pure transverse field: <Z> = 0 by symmetry.
        let p = QbmParams::new(1, 0, 1.7).unwrap();
        let th = p.exact_thermal().unwrap();
        assert_abs_diff_eq!(th.first[0], 0.0, epsilon = 1e-12);

        // Pure longitudinal field: <Z> = tanh(b).
        for t in [-1.5, 0.4, 2.0] {
            let mut p = QbmParams::new(1, 0, 0.0).unwrap();
            p.bias[0] = t;
            let th = p.exact_thermal().unwrap();
            assert_abs_diff_eq!(th.first[0], t.tanh(), epsilon = 1e-12);
        }
    }

    #[test]
    fn visible_marginal_sums_to_one() {
        let p = random_qbm(4, 3, 2.0, 1.5, 2);
        let th = p.exact_thermal().unwrap();
        let total: f64 = th.visible_marginal.iter().sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-10);
    }

    #[test]
    fn exact_thermal_rejects_large_instances() {
        let p = QbmParams::new(10, 4, 2.0).unwrap();
        assert!(matches!(
            p.exact_thermal(),
            Err(Error::EnumerationBound { .. })
        ));
    }

    #[test]
    fn clamped_expectation_limits() {
        // Zero transverse field reduces to tanh of the effective field.
        let mut p = QbmParams::new(2, 1, 0.0).unwrap();
        p.bias[2] = 0.3;
        p.weights[(0, 0)] = 0.7;
        p.weights[(1, 0)] = -0.2;
        let v = sv(&[1, -1]);
        let b_eff: f64 = 0.3 + 0.7 + 0.2;
        let e = p.clamped_hidden_expect(&v).unwrap();
        assert_abs_diff_eq!(e[0], b_eff.tanh(), epsilon = 1e-14);

        // Zero effective field gives zero expectation, including at D = 0.
        let p = QbmParams::new(2, 1, 0.0).unwrap();
        assert_eq!(p.clamped_hidden_expect(&sv(&[1, -1])).unwrap()[0], 0.0);
        let p = QbmParams::new(2, 1, 2.0).unwrap();
        assert_eq!(p.clamped_hidden_expect(&sv(&[1, -1])).unwrap()[0], 0.0);
    }

    #[test]
    fn clamped_expectation_direct_value() {
        // G = 2, b_eff = 1: (1/sqrt(5)) tanh(sqrt(5)).
        let mut p = QbmParams::new(1, 1, 2.0).unwrap();
        p.bias[1] = 1.0;
        let e = p.clamped_hidden_expect(&sv(&[1])).unwrap();
        let d = 5.0f64.sqrt();
        assert_abs_diff_eq!(e[0], (1.0 / d) * d.tanh(), epsilon = 1e-14);
        assert_abs_diff_eq!(e[0], 0.43711, epsilon = 1e-5);
    }

    /// Diagonalize the clamped Hamiltonian directly: hidden units under the
    /// transverse field plus their effective longitudinal fields.
    fn clamped_expect_by_diag(p: &QbmParams, v: &SpinVector) -> Vec<f64> {
        let nh = p.n_hidden();
        let dim = 1usize << nh;
        let mut h = DMatrix::zeros(dim, dim);
        for s in 0..dim {
            let mut e = 0.0;
            for b in 0..nh {
                let spin = if (s >> b) & 1 == 1 { 1.0 } else { -1.0 };
                e -= p.effective_field(v, b) * spin;
            }
            h[(s, s)] = e;
            for b in 0..nh {
                h[(s ^ (1 << b), s)] -= p.transverse_field[p.n_visible + b];
            }
        }
        let eig = h.symmetric_eigen();
        let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        let w: Vec<f64> = eig.eigenvalues.iter().map(|&l| (-(l - min)).exp()).collect();
        let z: f64 = w.iter().sum();
        let mut out = vec![0.0; nh];
        for (k, &wk) in w.iter().enumerate() {
            let col = eig.eigenvectors.column(k);
            for s in 0..dim {
                let amp = col[s] * col[s] * wk / z;
                for (b, o) in out.iter_mut().enumerate() {
                    *o += amp * if (s >> b) & 1 == 1 { 1.0 } else { -1.0 };
                }
            }
        }
        out
    }

    #[test]
    fn clamped_expectation_matches_clamped_diagonalization() {
        let mut r = rng::stream(30, "qbm");
        for seed in 0..20u64 {
            let p = random_qbm(3, 3, 0.5 + 2.0 * (seed as f64 % 3.0), 2.0, 40 + seed);
            let v = sv(&(0..3)
                .map(|_| if r.random::<f64>() < 0.5 { -1 } else { 1 })
                .collect::<Vec<i8>>());
            let formula = p.clamped_hidden_expect(&v).unwrap();
            let diag = clamped_expect_by_diag(&p, &v);
            for (f, d) in formula.iter().zip(&diag) {
                assert_abs_diff_eq!(f, d, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn bound_loss_equals_classical_nll_at_zero_field() {
        let p = random_qbm(3, 2, 0.0, 1.5, 3);
        let mut r = rng::stream(31, "qbm");
        let mut data = vec![0.0; 8];
        for d in &mut data {
            *d = r.random::<f64>();
        }
        let total: f64 = data.iter().sum();
        for d in &mut data {
            *d /= total;
        }
        let bound = p.exact_bound_loss(&data).unwrap();
        let nll = p.exact_nll(&data).unwrap();
        assert_abs_diff_eq!(bound, nll, epsilon = 1e-10);
    }

    #[test]
    fn bound_dominates_nll() {
        let mut r = rng::stream(32, "qbm");
        for seed in 0..40u64 {
            let p = random_qbm(3, 2, 0.3 + r.random::<f64>() * 3.0, 2.0, 100 + seed);
            let mut data = vec![0.0; 8];
            for d in &mut data {
                *d = r.random::<f64>();
            }
            let total: f64 = data.iter().sum();
            for d in &mut data {
                *d /= total;
            }
            let bound = p.exact_bound_loss(&data).unwrap();
            let nll = p.exact_nll(&data).unwrap();
            assert!(
                bound >= nll - 1e-10,
                "bound {bound} below NLL {nll} at seed {seed}"
            );
        }
    }

    #[test]
    fn bound_is_tight_for_fully_visible_diagonal_model() {
        // With every unit clamped and no transverse field the clamped trace
        // equals the projected trace, so the bound is exact. A transverse
        // field on the clamped unit breaks this: tr e^{-H_v} = e^{b v} while
        // the projected trace is <v| e^{-H} |v>, and the bound is strict.
        let mut p = QbmParams::new(1, 0, 0.0).unwrap();
        p.bias[0] = 0.8;
        let data = vec![0.3, 0.7];
        let bound = p.exact_bound_loss(&data).unwrap();
        let nll = p.exact_nll(&data).unwrap();
        assert_abs_diff_eq!(bound, nll, epsilon = 1e-12);

        let mut p = QbmParams::new(1, 0, 1.3).unwrap();
        p.bias[0] = 0.8;
        let bound = p.exact_bound_loss(&data).unwrap();
        let nll = p.exact_nll(&data).unwrap();
        assert!(bound > nll + 1e-3, "bound {bound} vs nll {nll}");
    }

    #[test]
    fn bound_gradient_matches_finite_differences() {
        let p = random_qbm(3, 2, 2.0, 1.0, 4);
        let mut r = rng::stream(33, "qbm");
        let mut data = vec![0.0; 8];
        for d in &mut data {
            *d = r.random::<f64>();
        }
        let total: f64 = data.iter().sum();
        for d in &mut data {
            *d /= total;
        }
        // Mini-batch realizing the data distribution via integer
        // multiplicities; rebuild the effective table so the gradient and the
        // loss see exactly the same distribution.
        let mut minibatch = Vec::new();
        for (idx, &prob) in data.iter().enumerate() {
            let copies = (prob * 4096.0).round() as usize;
            for _ in 0..copies {
                minibatch.push(spin_from_index(idx, 3));
            }
        }
        let mut eff = vec![0.0; 8];
        for v in &minibatch {
            let mut idx = 0;
            for (a, &s) in v.as_slice().iter().enumerate() {
                if s == 1 {
                    idx |= 1 << a;
                }
            }
            eff[idx] += 1.0;
        }
        let total: f64 = eff.iter().sum();
        for e in &mut eff {
            *e /= total;
        }

        let neg = p.exact_thermal().unwrap().to_moment_estimate(3, 2);
        let grad = p.bound_gradient(&minibatch, &neg).unwrap().flatten();

        let h = 1e-5;
        let mut flat = p.flatten_trainable();
        let mut fd = vec![0.0; flat.len()];
        for i in 0..flat.len() {
            let orig = flat[i];
            let mut probe = p.clone();
            flat[i] = orig + h;
            probe.set_trainable(&flat).unwrap();
            let up = probe.exact_bound_loss(&eff).unwrap();
            flat[i] = orig - h;
            probe.set_trainable(&flat).unwrap();
            let down = probe.exact_bound_loss(&eff).unwrap();
            flat[i] = orig;
            fd[i] = (up - down) / (2.0 * h);
        }
        let diff: f64 = grad
            .iter()
            .zip(&fd)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = fd.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(diff / norm < 1e-5, "rel err {}", diff / norm);
    }

    #[test]
    fn bound_gradient_zero_at_classical_stationarity() {
        let p = random_qbm(3, 2, 0.0, 1.0, 5);
        let marginal = p.exact_thermal().unwrap().visible_marginal;
        let mut minibatch = Vec::new();
        for (idx, &prob) in marginal.iter().enumerate() {
            let copies = (prob * 8192.0).round() as usize;
            for _ in 0..copies {
                minibatch.push(spin_from_index(idx, 3));
            }
        }
        let neg = p.exact_thermal().unwrap().to_moment_estimate(3, 2);
        let grad = p.bound_gradient(&minibatch, &neg).unwrap();
        // At zero transverse field the bound coincides with the NLL, whose
        // gradient vanishes at the model's own distribution; the residual is
        // the rounding of the table into integer multiplicities.
        assert!(grad.norm() < 2e-3, "gradient norm {}", grad.norm());
    }

    #[test]
    fn bound_gradient_sign_on_point_mass_at_zero_params() {
        let p = QbmParams::new(3, 2, 2.0).unwrap();
        let v = sv(&[1, -1, 1]);
        let neg = p.exact_thermal().unwrap().to_moment_estimate(3, 2);
        let grad = p.bound_gradient(std::slice::from_ref(&v), &neg).unwrap();
        // Zero-parameter free phase is symmetric, so the visible-bias
        // derivative is minus the clamped value.
        for (a, &s) in v.as_slice().iter().enumerate() {
            assert_abs_diff_eq!(grad.bias[a], -(s as f64), epsilon = 1e-10);
        }
    }

    #[test]
    fn training_with_exact_stats_descends_the_bound() {
        let mut r = rng::stream(34, "qbm");
        let mut p = QbmParams::xavier(3, 2, 2.0, &mut r).unwrap();
        let mixture =
            crate::data::BernoulliMixture::random(2, 3, 0.9, &mut rng::stream(35, "data")).unwrap();
        let table = mixture.prob_table().unwrap();
        let mut minibatch = Vec::new();
        for (idx, &prob) in table.iter().enumerate() {
            let copies = (prob * 1024.0).round() as usize;
            for _ in 0..copies {
                minibatch.push(spin_from_index(idx, 3));
            }
        }
        let mut eff = vec![0.0; 8];
        for v in &minibatch {
            let mut idx = 0;
            for (a, &s) in v.as_slice().iter().enumerate() {
                if s == 1 {
                    idx |= 1 << a;
                }
            }
            eff[idx] += 1.0;
        }
        let total: f64 = eff.iter().sum();
        for e in &mut eff {
            *e /= total;
        }

        let mut adam = AdamState::new(p.bias.len() + p.weights.len(), 2e-2, 0.5, 0.9);
        let mut previous = p.exact_bound_loss(&eff).unwrap();
        for _ in 0..50 {
            let neg = p.exact_thermal().unwrap().to_moment_estimate(3, 2);
            let grad = p.bound_gradient(&minibatch, &neg).unwrap();
            let mut flat = p.flatten_trainable();
            adam.apply(&mut flat, &grad.flatten()).unwrap();
            p.set_trainable(&flat).unwrap();
            let now = p.exact_bound_loss(&eff).unwrap();
            assert!(now < previous + 1e-9, "bound rose from {previous} to {now}");
            previous = now;
        }
    }

    #[test]
    fn transverse_field_is_constant_through_training() {
        let mut r = rng::stream(36, "qbm");
        let p = QbmParams::xavier(4, 2, 2.0, &mut r).unwrap();
        let gamma = p.transverse_field.clone();
        let data: Vec<SpinVector> = (0..64)
            .map(|i| bits_to_spins(&BitVector::from_index(i % 16, 4)))
            .collect();
        let config = QbmTrainConfig {
            epochs: 3,
            batch_size: 16,
            sampler: NegativeSampler::Exact,
            ..Default::default()
        };
        let (trained, _) = train_qbm(
            p,
            &data,
            &config,
            &mut rng::stream(37, "qbm"),
            &mut rng::stream(37, "pimc"),
        )
        .unwrap();
        assert_eq!(trained.transverse_field, gamma);
        assert!(trained.transverse_field.iter().all(|&g| g == 2.0));
    }

    #[test]
    fn classical_reduction_matches_rbm_family_optimum() {
        // At zero transverse field the QBM visible marginal is a classical
        // +-1-spin model's; trained to convergence on the same data, the QBM
        // and an RBM reach the same KL because the families coincide up to
        // reparameterization.
        use crate::metrics::kl_divergence;
        let mixture =
            crate::data::BernoulliMixture::random(3, 4, 0.88, &mut rng::stream(40, "data")).unwrap();
        let table = mixture.prob_table().unwrap();

        let mut q = QbmParams::new(4, 2, 0.0).unwrap();
        let mut minibatch = Vec::new();
        for (idx, &prob) in table.iter().enumerate() {
            let copies = (prob * 2048.0).round() as usize;
            for _ in 0..copies {
                minibatch.push(spin_from_index(idx, 4));
            }
        }
        let mut adam = AdamState::new(q.bias.len() + q.weights.len(), 3e-2, 0.5, 0.9);
        for _ in 0..1500 {
            let neg = q.exact_thermal().unwrap().to_moment_estimate(4, 2);
            let grad = q.bound_gradient(&minibatch, &neg).unwrap();
            let mut flat = q.flatten_trainable();
            adam.apply(&mut flat, &grad.flatten()).unwrap();
            q.set_trainable(&flat).unwrap();
        }
        let kl_q = kl_divergence(&table, &q.exact_thermal().unwrap().visible_marginal).unwrap();

        // The parameter map z = 2x - 1 sends the spin model onto the bit
        // model exactly: W01 = 4 W, b01 = 2 b - 2 (row/column sums of W).
        let mut mapped = crate::rbm::RbmParams::zeros(4, 2);
        for v in 0..4 {
            for h in 0..2 {
                mapped.weights[(v, h)] = 4.0 * q.weights[(v, h)];
            }
        }
        for v in 0..4 {
            mapped.visible_bias[v] =
                2.0 * q.bias[v] - 2.0 * (0..2).map(|h| q.weights[(v, h)]).sum::<f64>();
        }
        for h in 0..2 {
            mapped.hidden_bias[h] =
                2.0 * q.bias[4 + h] - 2.0 * (0..4).map(|v| q.weights[(v, h)]).sum::<f64>();
        }
        let kl_mapped = kl_divergence(&table, &mapped.exact_marginal().unwrap()).unwrap();
        assert!(
            (kl_q - kl_mapped).abs() < 1e-9,
            "reparameterization changed the distribution: {kl_q} vs {kl_mapped}"
        );

        // An independently trained RBM converges to the same family optimum
        // (from a non-degenerate init; the all-zero point sits in a worse
        // basin of the bit parameterization).
        let mut rbm = crate::rbm::RbmParams::xavier(4, 2, &mut rng::stream(2, "rbm"));
        let mut adam = AdamState::new(rbm.param_count(), 3e-2, 0.5, 0.9);
        for _ in 0..1500 {
            let grad = rbm.exact_grad(&table).unwrap();
            let mut flat = rbm.flatten();
            adam.apply(&mut flat, &grad.flatten()).unwrap();
            rbm.set_from_flat(&flat).unwrap();
        }
        let kl_r = kl_divergence(&table, &rbm.exact_marginal().unwrap()).unwrap();

        assert!(
            (kl_q - kl_r).abs() < 0.05,
            "classical-limit KL {kl_q} vs RBM KL {kl_r}"
        );
    }
}
