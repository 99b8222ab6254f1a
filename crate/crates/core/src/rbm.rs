//! Classical restricted Boltzmann machine over binary units: energy,
//! Gibbs conditionals, exact small-instance oracles, persistent contrastive
//! divergence training, and annealed sampling.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::data::{BitVector, Dataset};
use crate::error::{Error, Result};
use crate::nn::{sigmoid, softplus, xavier_init, AdamState};

/// Enumeration limit for the exact oracles (total unit count).
pub const ENUMERATION_BOUND: usize = 20;

/// Bipartite model parameters. The type has no visible-visible or
/// hidden-hidden couplings anywhere: `weights[(v, h)]` is the only
/// interaction.
#[derive(Debug, Clone, PartialEq)]
pub struct RbmParams {
    pub visible_bias: DVector<f64>,
    pub hidden_bias: DVector<f64>,
    /// `n_visible x n_hidden`.
    pub weights: DMatrix<f64>,
}

impl RbmParams {
    pub fn zeros(n_visible: usize, n_hidden: usize) -> Self {
        Self {
            visible_bias: DVector::zeros(n_visible),
            hidden_bias: DVector::zeros(n_hidden),
            weights: DMatrix::zeros(n_visible, n_hidden),
        }
    }

    /// Xavier weights, zero biases.
    pub fn xavier(n_visible: usize, n_hidden: usize, rng: &mut ChaCha12Rng) -> Self {
        Self {
            visible_bias: DVector::zeros(n_visible),
            hidden_bias: DVector::zeros(n_hidden),
            weights: xavier_init(n_visible, n_hidden, rng),
        }
    }

    pub fn n_visible(&self) -> usize {
        self.visible_bias.len()
    }

    pub fn n_hidden(&self) -> usize {
        self.hidden_bias.len()
    }

    fn check_dims(&self, v_len: usize, h_len: usize, context: &'static str) -> Result<()> {
        if v_len != self.n_visible() {
            return Err(Error::DimMismatch {
                context,
                expected: self.n_visible(),
                got: v_len,
            });
        }
        if h_len != self.n_hidden() {
            return Err(Error::DimMismatch {
                context,
                expected: self.n_hidden(),
                got: h_len,
            });
        }
        Ok(())
    }

    /// `E(v, h) = -b_v . v - b_h . h - v^T W h`.
    pub fn energy(&self, v: &BitVector, h: &BitVector) -> Result<f64> {
        self.check_dims(v.len(), h.len(), "energy")?;
        let mut e = 0.0;
        for (a, &bit) in v.as_slice().iter().enumerate() {
            if bit == 1 {
                e -= self.visible_bias[a];
                for (b, &hbit) in h.as_slice().iter().enumerate() {
                    if hbit == 1 {
                        e -= self.weights[(a, b)];
                    }
                }
            }
        }
        for (b, &hbit) in h.as_slice().iter().enumerate() {
            if hbit == 1 {
                e -= self.hidden_bias[b];
            }
        }
        Ok(e)
    }

    /// `P(h = 1 | v)` componentwise; `v` may hold Bernoulli means in [0, 1].
    pub fn cond_hidden(&self, v: &[f64]) -> Result<DVector<f64>> {
        if v.len() != self.n_visible() {
            return Err(Error::DimMismatch {
                context: "cond_hidden",
                expected: self.n_visible(),
                got: v.len(),
            });
        }
        let v = DVector::from_row_slice(v);
        let mut act = self.weights.tr_mul(&v);
        act += &self.hidden_bias;
        Ok(act.map(sigmoid))
    }

    /// `P(v = 1 | h)` componentwise.
    pub fn cond_visible(&self, h: &[f64]) -> Result<DVector<f64>> {
        if h.len() != self.n_hidden() {
            return Err(Error::DimMismatch {
                context: "cond_visible",
                expected: self.n_hidden(),
                got: h.len(),
            });
        }
        let h = DVector::from_row_slice(h);
        let mut act = &self.weights * h;
        act += &self.visible_bias;
        Ok(act.map(sigmoid))
    }

    fn check_enumeration(&self) -> Result<()> {
        let units = self.n_visible() + self.n_hidden();
        if units > ENUMERATION_BOUND {
            return Err(Error::EnumerationBound {
                units,
                bound: ENUMERATION_BOUND,
            });
        }
        Ok(())
    }

    /// Unnormalized log marginal weight of a visible configuration with the
    /// hidden units summed out analytically.
    fn log_weight(&self, v_idx: usize) -> f64 {
        let mut lw = 0.0;
        for a in 0..self.n_visible() {
            if (v_idx >> a) & 1 == 1 {
                lw += self.visible_bias[a];
            }
        }
        for b in 0..self.n_hidden() {
            let mut act = self.hidden_bias[b];
            for a in 0..self.n_visible() {
                if (v_idx >> a) & 1 == 1 {
                    act += self.weights[(a, b)];
                }
            }
            lw += softplus(act);
        }
        lw
    }

    /// Exact marginal probability table over `{0,1}^{n_visible}`.
    pub fn exact_marginal(&self) -> Result<Vec<f64>> {
        self.check_enumeration()?;
        let n = 1usize << self.n_visible();
        let log_weights: Vec<f64> = (0..n).map(|idx| self.log_weight(idx)).collect();
        let max = log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut table: Vec<f64> = log_weights.iter().map(|&lw| (lw - max).exp()).collect();
        let z: f64 = table.iter().sum();
        for t in &mut table {
            *t /= z;
        }
        Ok(table)
    }

    /// Exact joint probability table over `{0,1}^{n_visible + n_hidden}`,
    /// indexed `(h_idx << n_visible) | v_idx`.
    pub fn exact_joint(&self) -> Result<Vec<f64>> {
        self.check_enumeration()?;
        let nv = self.n_visible();
        let nh = self.n_hidden();
        let mut table = Vec::with_capacity(1 << (nv + nh));
        for idx in 0..1usize << (nv + nh) {
            let v = BitVector::from_index(idx & ((1 << nv) - 1), nv);
            let h = BitVector::from_index(idx >> nv, nh);
            table.push(-self.energy(&v, &h).unwrap());
        }
        let max = table.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for t in &mut table {
            *t = (*t - max).exp();
            z += *t;
        }
        for t in &mut table {
            *t /= z;
        }
        Ok(table)
    }

    /// Exact negative log-likelihood of a data distribution given as a
    /// probability table over the visible cube.
    pub fn exact_nll(&self, data_dist: &[f64]) -> Result<f64> {
        let marginal = self.exact_marginal()?;
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

    /// Exact gradient of [`exact_nll`](Self::exact_nll): free-phase
    /// expectation minus data-clamped expectation for every parameter, with
    /// hidden units marginalized analytically on both sides.
    pub fn exact_grad(&self, data_dist: &[f64]) -> Result<RbmGrad> {
        let marginal = self.exact_marginal()?;
        if data_dist.len() != marginal.len() {
            return Err(Error::SupportMismatch(data_dist.len(), marginal.len()));
        }
        let nv = self.n_visible();
        let nh = self.n_hidden();
        let mut grad = RbmGrad::zeros(nv, nh);
        let phases = [(&marginal, 1.0), (&data_dist.to_vec(), -1.0)];
        for (dist, sign) in phases {
            for (v_idx, &p) in dist.iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                let v: Vec<f64> = (0..nv).map(|a| ((v_idx >> a) & 1) as f64).collect();
                let h_mean = self.cond_hidden(&v)?;
                for (a, &va) in v.iter().enumerate() {
                    grad.visible_bias[a] += sign * p * va;
                }
                for b in 0..nh {
                    grad.hidden_bias[b] += sign * p * h_mean[b];
                    for (a, &va) in v.iter().enumerate() {
                        grad.weights[(a, b)] += sign * p * va * h_mean[b];
                    }
                }
            }
        }
        Ok(grad)
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        out.extend_from_slice(self.visible_bias.as_slice());
        out.extend_from_slice(self.hidden_bias.as_slice());
        out.extend_from_slice(self.weights.as_slice());
        out
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::DimMismatch {
                context: "set_from_flat",
                expected: self.param_count(),
                got: flat.len(),
            });
        }
        let nv = self.n_visible();
        let nh = self.n_hidden();
        self.visible_bias.as_mut_slice().copy_from_slice(&flat[..nv]);
        self.hidden_bias
            .as_mut_slice()
            .copy_from_slice(&flat[nv..nv + nh]);
        self.weights
            .as_mut_slice()
            .copy_from_slice(&flat[nv + nh..]);
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.n_visible() + self.n_hidden() + self.weights.len()
    }
}

/// Gradient container shaped like [`RbmParams`].
#[derive(Debug, Clone)]
pub struct RbmGrad {
    pub visible_bias: DVector<f64>,
    pub hidden_bias: DVector<f64>,
    pub weights: DMatrix<f64>,
}

impl RbmGrad {
    pub fn zeros(n_visible: usize, n_hidden: usize) -> Self {
        Self {
            visible_bias: DVector::zeros(n_visible),
            hidden_bias: DVector::zeros(n_hidden),
            weights: DMatrix::zeros(n_visible, n_hidden),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(self.visible_bias.as_slice());
        out.extend_from_slice(self.hidden_bias.as_slice());
        out.extend_from_slice(self.weights.as_slice());
        out
    }

    pub fn norm(&self) -> f64 {
        self.flatten().iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// Persistent Gibbs chains carried across optimizer steps.
#[derive(Debug, Clone)]
pub struct PcdState {
    pub chains: Vec<(BitVector, BitVector)>,
    pub gibbs_steps: usize,
}

impl PcdState {
    pub fn new(
        chain_count: usize,
        n_visible: usize,
        n_hidden: usize,
        gibbs_steps: usize,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self> {
        if gibbs_steps == 0 {
            return Err(Error::InvalidConfig("gibbs_steps must be at least 1".into()));
        }
        let chains = (0..chain_count)
            .map(|_| {
                let v = BitVector::new((0..n_visible).map(|_| rng.random_range(0..2u8)).collect())
                    .unwrap();
                let h = BitVector::new((0..n_hidden).map(|_| rng.random_range(0..2u8)).collect())
                    .unwrap();
                (v, h)
            })
            .collect();
        Ok(Self {
            chains,
            gibbs_steps,
        })
    }
}

fn sample_bits(means: &DVector<f64>, rng: &mut ChaCha12Rng) -> BitVector {
    BitVector::new(
        means
            .iter()
            .map(|&p| if rng.random::<f64>() < p { 1 } else { 0 })
            .collect(),
    )
    .unwrap()
}

fn bits_as_f64(bits: &BitVector) -> Vec<f64> {
    bits.as_slice().iter().map(|&b| b as f64).collect()
}

/// Accumulate the clamped (positive) phase over a mini-batch of Bernoulli
/// means, using mean-field hidden probabilities.
fn positive_phase(params: &RbmParams, minibatch: &[Vec<f64>]) -> Result<RbmGrad> {
    let mut acc = RbmGrad::zeros(params.n_visible(), params.n_hidden());
    for row in minibatch {
        if row.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
            return Err(Error::OutOfRange("mini-batch entries must be in [0, 1]".into()));
        }
        let h_mean = params.cond_hidden(row)?;
        for (a, &ra) in row.iter().enumerate() {
            acc.visible_bias[a] += ra;
        }
        for b in 0..params.n_hidden() {
            acc.hidden_bias[b] += h_mean[b];
            for (a, &ra) in row.iter().enumerate() {
                acc.weights[(a, b)] += ra * h_mean[b];
            }
        }
    }
    let scale = 1.0 / minibatch.len() as f64;
    acc.visible_bias *= scale;
    acc.hidden_bias *= scale;
    acc.weights *= scale;
    Ok(acc)
}

/// Negative phase from a set of chains advanced by `k` block-Gibbs steps.
/// Hidden statistics use the conditional mean given the final visible state.
fn negative_phase(
    params: &RbmParams,
    chains: &mut [(BitVector, BitVector)],
    k: usize,
    rng: &mut ChaCha12Rng,
) -> Result<RbmGrad> {
    let mut acc = RbmGrad::zeros(params.n_visible(), params.n_hidden());
    for (v, h) in chains.iter_mut() {
        for _ in 0..k {
            let h_mean = params.cond_hidden(&bits_as_f64(v))?;
            *h = sample_bits(&h_mean, rng);
            let v_mean = params.cond_visible(&bits_as_f64(h))?;
            *v = sample_bits(&v_mean, rng);
        }
        let vf = bits_as_f64(v);
        let h_mean = params.cond_hidden(&vf)?;
        for (a, &va) in vf.iter().enumerate() {
            acc.visible_bias[a] += va;
        }
        for b in 0..params.n_hidden() {
            acc.hidden_bias[b] += h_mean[b];
            for (a, &va) in vf.iter().enumerate() {
                acc.weights[(a, b)] += va * h_mean[b];
            }
        }
    }
    let scale = 1.0 / chains.len() as f64;
    acc.visible_bias *= scale;
    acc.hidden_bias *= scale;
    acc.weights *= scale;
    Ok(acc)
}

/// Persistent contrastive divergence estimate of the loss gradient. The
/// positive phase clamps the mini-batch (rows are Bernoulli means); the
/// negative phase continues the persistent chains for `state.gibbs_steps`
/// block-Gibbs steps. Returns free-phase minus clamped-phase statistics,
/// matching the sign of the exact gradient.
pub fn pcd_gradient(
    params: &RbmParams,
    state: &mut PcdState,
    minibatch: &[Vec<f64>],
    rng: &mut ChaCha12Rng,
) -> Result<RbmGrad> {
    if minibatch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let pos = positive_phase(params, minibatch)?;
    let neg = negative_phase(params, &mut state.chains, state.gibbs_steps, rng)?;
    Ok(RbmGrad {
        visible_bias: neg.visible_bias - pos.visible_bias,
        hidden_bias: neg.hidden_bias - pos.hidden_bias,
        weights: neg.weights - pos.weights,
    })
}

/// Contrastive divergence: like [`pcd_gradient`] but chains restart from the
/// mini-batch itself at every call.
pub fn cd_gradient(
    params: &RbmParams,
    k: usize,
    minibatch: &[Vec<f64>],
    rng: &mut ChaCha12Rng,
) -> Result<RbmGrad> {
    if minibatch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if k == 0 {
        return Err(Error::InvalidConfig("gibbs_steps must be at least 1".into()));
    }
    let pos = positive_phase(params, minibatch)?;
    let mut chains: Vec<(BitVector, BitVector)> = minibatch
        .iter()
        .map(|row| {
            let v = bernoulli_from_means(row, rng);
            let h = BitVector::new(vec![0; params.n_hidden()]).unwrap();
            (v, h)
        })
        .collect();
    let neg = negative_phase(params, &mut chains, k, rng)?;
    Ok(RbmGrad {
        visible_bias: neg.visible_bias - pos.visible_bias,
        hidden_bias: neg.hidden_bias - pos.hidden_bias,
        weights: neg.weights - pos.weights,
    })
}

fn bernoulli_from_means(row: &[f64], rng: &mut ChaCha12Rng) -> BitVector {
    BitVector::new(
        row.iter()
            .map(|&p| if rng.random::<f64>() < p { 1 } else { 0 })
            .collect(),
    )
    .unwrap()
}

/// Rising inverse-temperature schedule from 0 to 1.
#[derive(Debug, Clone)]
pub struct AnnealSchedule {
    betas: Vec<f64>,
}

impl AnnealSchedule {
    pub fn new(betas: Vec<f64>) -> Result<Self> {
        if betas.len() < 2 {
            return Err(Error::InvalidSchedule("need at least two rungs".into()));
        }
        if betas[0] != 0.0 || *betas.last().unwrap() != 1.0 {
            return Err(Error::InvalidSchedule(
                "schedule must start at beta = 0 and end at beta = 1".into(),
            ));
        }
        if betas.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidSchedule("schedule must be strictly increasing".into()));
        }
        Ok(Self { betas })
    }

    /// Evenly spaced schedule over `rungs >= 2` rungs.
    pub fn linear(rungs: usize) -> Self {
        assert!(rungs >= 2, "a schedule needs at least two rungs");
        let betas = (0..rungs)
            .map(|i| i as f64 / (rungs - 1) as f64)
            .collect();
        Self::new(betas).unwrap()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }
}

/// Draw visible samples by simulated annealing: chains start uniform at
/// beta = 0, parameters are scaled by beta at each rung, one block-Gibbs
/// sweep per rung, final states read at beta = 1.
pub fn sample_annealed(
    params: &RbmParams,
    count: usize,
    schedule: &AnnealSchedule,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<BitVector>> {
    let nv = params.n_visible();
    let nh = params.n_hidden();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut v = BitVector::new((0..nv).map(|_| rng.random_range(0..2u8)).collect()).unwrap();
        for &beta in schedule.betas() {
            // Scaling every parameter by beta scales both activations.
            let h_act = {
                let vv = DVector::from_row_slice(&bits_as_f64(&v));
                let mut act = params.weights.tr_mul(&vv);
                act += &params.hidden_bias;
                act * beta
            };
            let h = BitVector::new(
                (0..nh)
                    .map(|b| if rng.random::<f64>() < sigmoid(h_act[b]) { 1 } else { 0 })
                    .collect(),
            )
            .unwrap();
            let v_act = {
                let hh = DVector::from_row_slice(&bits_as_f64(&h));
                let mut act = &params.weights * hh;
                act += &params.visible_bias;
                act * beta
            };
            v = BitVector::new(
                (0..nv)
                    .map(|a| if rng.random::<f64>() < sigmoid(v_act[a]) { 1 } else { 0 })
                    .collect(),
            )
            .unwrap();
        }
        out.push(v);
    }
    Ok(out)
}

/// Which negative-phase estimator the trainer uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientEstimator {
    Pcd,
    Cd,
}

#[derive(Debug, Clone)]
pub struct RbmTrainConfig {
    pub learning_rate: f64,
    pub gibbs_steps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub estimator: GradientEstimator,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    /// Record exact NLL per epoch when within the enumeration bound.
    pub trace_nll: bool,
}

impl Default for RbmTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            gibbs_steps: 5,
            epochs: 30,
            batch_size: 64,
            estimator: GradientEstimator::Pcd,
            adam_beta1: 0.5,
            adam_beta2: 0.9,
            trace_nll: true,
        }
    }
}

/// Stateful trainer so that callers can checkpoint and resume between epochs.
#[derive(Debug, Clone)]
pub struct RbmTrainer {
    pub params: RbmParams,
    pub adam: AdamState,
    pub pcd: PcdState,
    pub config: RbmTrainConfig,
    pub epoch: usize,
}

impl RbmTrainer {
    pub fn new(params: RbmParams, config: RbmTrainConfig, rng: &mut ChaCha12Rng) -> Result<Self> {
        let adam = AdamState::new(
            params.param_count(),
            config.learning_rate,
            config.adam_beta1,
            config.adam_beta2,
        );
        let pcd = PcdState::new(
            config.batch_size,
            params.n_visible(),
            params.n_hidden(),
            config.gibbs_steps,
            rng,
        )?;
        Ok(Self {
            params,
            adam,
            pcd,
            config,
            epoch: 0,
        })
    }

    /// One pass over the dataset in shuffled mini-batches.
    pub fn run_epoch(&mut self, data: &Dataset, rng: &mut ChaCha12Rng) -> Result<()> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(self.config.batch_size) {
            let minibatch: Vec<Vec<f64>> = chunk.iter().map(|&i| data.records[i].clone()).collect();
            let grad = match self.config.estimator {
                GradientEstimator::Pcd => {
                    // Persistent chains track the batch size; shrink gracefully
                    // on the final ragged chunk by using a chain prefix.
                    let full = std::mem::take(&mut self.pcd.chains);
                    let take = minibatch.len().min(full.len());
                    self.pcd.chains = full[..take].to_vec();
                    let g = pcd_gradient(&self.params, &mut self.pcd, &minibatch, rng)?;
                    let mut restored = full;
                    restored[..take].clone_from_slice(&self.pcd.chains);
                    self.pcd.chains = restored;
                    g
                }
                GradientEstimator::Cd => {
                    cd_gradient(&self.params, self.config.gibbs_steps, &minibatch, rng)?
                }
            };
            let mut flat = self.params.flatten();
            self.adam.apply(&mut flat, &grad.flatten())?;
            self.params.set_from_flat(&flat)?;
        }
        self.epoch += 1;
        Ok(())
    }
}

/// Train to completion, returning the trained parameters and a per-epoch
/// exact-NLL trace (NaN entries when the model exceeds the enumeration
/// bound or tracing is disabled).
pub fn train_rbm(
    params: RbmParams,
    data: &Dataset,
    config: &RbmTrainConfig,
    rng: &mut ChaCha12Rng,
) -> Result<(RbmParams, Vec<f64>)> {
    let mut trainer = RbmTrainer::new(params, config.clone(), rng)?;
    let traceable = config.trace_nll
        && trainer.params.n_visible() + trainer.params.n_hidden() <= ENUMERATION_BOUND;
    let data_table = if traceable {
        let samples: Vec<BitVector> = data
            .records
            .iter()
            .map(|r| {
                BitVector::new(r.iter().map(|&x| if x >= 0.5 { 1 } else { 0 }).collect()).unwrap()
            })
            .collect();
        Some(crate::data::empirical_table(&samples, trainer.params.n_visible()))
    } else {
        None
    };
    let mut trace = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        trainer.run_epoch(data, rng)?;
        match &data_table {
            Some(table) => trace.push(trainer.params.exact_nll(table)?),
            None => trace.push(f64::NAN),
        }
    }
    Ok((trainer.params, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{empirical_table, BitVector};
    use crate::metrics::kl_divergence;
    use crate::rng;
    use approx::assert_abs_diff_eq;

    fn bv(bits: &[u8]) -> BitVector {
        BitVector::new(bits.to_vec()).unwrap()
    }

    fn random_params(nv: usize, nh: usize, scale: f64, seed: u64) -> RbmParams {
        let mut r = rng::stream(seed, "rbm");
        let mut p = RbmParams::zeros(nv, nh);
        for x in p.visible_bias.iter_mut() {
            *x = (r.random::<f64>() - 0.5) * scale;
        }
        for x in p.hidden_bias.iter_mut() {
            *x = (r.random::<f64>() - 0.5) * scale;
        }
        for x in p.weights.iter_mut() {
            *x = (r.random::<f64>() - 0.5) * scale;
        }
        p
    }

    #[test]
    fn energy_zero_params_is_zero() {
        let p = RbmParams::zeros(3, 2);
        for v_idx in 0..8 {
            for h_idx in 0..4 {
                let e = p
                    .energy(&BitVector::from_index(v_idx, 3), &BitVector::from_index(h_idx, 2))
                    .unwrap();
                assert_eq!(e, 0.0);
            }
        }
    }

    #[test]
    fn energy_single_pair_example() {
        let mut p = RbmParams::zeros(1, 1);
        p.visible_bias[0] = 1.0;
        p.weights[(0, 0)] = 1.0;
        assert_abs_diff_eq!(p.energy(&bv(&[1]), &bv(&[1])).unwrap(), -2.0);
    }

    #[test]
    fn energy_zero_visible_leaves_hidden_bias_terms() {
        let p = random_params(4, 3, 2.0, 1);
        let v = bv(&[0, 0, 0, 0]);
        for h_idx in 0..8 {
            let h = BitVector::from_index(h_idx, 3);
            let expected: f64 = -(0..3)
                .filter(|&b| (h_idx >> b) & 1 == 1)
                .map(|b| p.hidden_bias[b])
                .sum::<f64>();
            assert_abs_diff_eq!(p.energy(&v, &h).unwrap(), expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn energy_rejects_dimension_mismatch() {
        let p = RbmParams::zeros(3, 2);
        assert!(p.energy(&bv(&[1, 0]), &bv(&[0, 1])).is_err());
    }

    #[test]
    fn energy_is_linear_in_each_layer() {
        // Bipartite structure: for fixed h, flipping one visible bit changes
        // the energy by an amount independent of the other visible bits.
        let p = random_params(4, 3, 1.5, 2);
        for h_idx in 0..8 {
            let h = BitVector::from_index(h_idx, 3);
            for a in 0..4 {
                let mut deltas = Vec::new();
                for v_idx in 0..16usize {
                    if (v_idx >> a) & 1 == 1 {
                        continue;
                    }
                    let lo = p.energy(&BitVector::from_index(v_idx, 4), &h).unwrap();
                    let hi = p
                        .energy(&BitVector::from_index(v_idx | (1 << a), 4), &h)
                        .unwrap();
                    deltas.push(hi - lo);
                }
                for d in &deltas {
                    assert_abs_diff_eq!(*d, deltas[0], epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn cond_hidden_decoupled_and_in_range() {
        let mut p = RbmParams::zeros(3, 2);
        p.hidden_bias[0] = 0.0;
        p.hidden_bias[1] = -1.3;
        let probs = p.cond_hidden(&[1.0, 0.0, 1.0]).unwrap();
        assert_abs_diff_eq!(probs[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(probs[1], sigmoid(-1.3), epsilon = 1e-15);

        let p = random_params(5, 4, 6.0, 3);
        let probs = p.cond_hidden(&[1.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        for &x in probs.iter() {
            assert!(x > 0.0 && x < 1.0);
        }
    }

    #[test]
    fn cond_hidden_direct_value() {
        let mut p = RbmParams::zeros(2, 1);
        p.weights[(0, 0)] = 1.0;
        p.weights[(1, 0)] = 1.0;
        p.hidden_bias[0] = -1.0;
        let probs = p.cond_hidden(&[1.0, 1.0]).unwrap();
        assert_abs_diff_eq!(probs[0], 0.7310585786, epsilon = 1e-9);
    }

    #[test]
    fn exact_marginal_uniform_and_normalized() {
        let p = RbmParams::zeros(4, 2);
        let table = p.exact_marginal().unwrap();
        for &x in &table {
            assert_abs_diff_eq!(x, 1.0 / 16.0, epsilon = 1e-14);
        }

        let p = random_params(4, 3, 2.0, 4);
        let total: f64 = p.exact_marginal().unwrap().iter().sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn exact_marginal_single_unit_is_sigmoid_of_bias() {
        for t in [-2.0, -0.3, 0.0, 1.7] {
            let mut p = RbmParams::zeros(1, 0);
            p.visible_bias[0] = t;
            let table = p.exact_marginal().unwrap();
            assert_abs_diff_eq!(table[1], sigmoid(t), epsilon = 1e-12);
        }
    }

    #[test]
    fn exact_marginal_rejects_large_models() {
        let p = RbmParams::zeros(16, 8);
        assert!(matches!(
            p.exact_marginal(),
            Err(Error::EnumerationBound { .. })
        ));
    }

    #[test]
    fn exact_grad_vanishes_at_the_model_distribution() {
        let p = random_params(4, 2, 1.0, 5);
        let data = p.exact_marginal().unwrap();
        let grad = p.exact_grad(&data).unwrap();
        assert!(grad.norm() < 1e-12, "gradient norm {}", grad.norm());
    }

    #[test]
    fn exact_grad_point_mass_zero_params() {
        let p = RbmParams::zeros(3, 2);
        let mut data = vec![0.0; 8];
        data[7] = 1.0; // all-ones visible configuration
        let grad = p.exact_grad(&data).unwrap();
        // Free phase is uniform (mean 0.5); clamped phase sees 1.
        for a in 0..3 {
            assert_abs_diff_eq!(grad.visible_bias[a], -0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn exact_grad_matches_finite_differences() {
        let p = random_params(5, 3, 1.2, 6);
        let mut r = rng::stream(60, "rbm");
        let mut data = vec![0.0; 32];
        for d in &mut data {
            *d = r.random::<f64>();
        }
        let total: f64 = data.iter().sum();
        for d in &mut data {
            *d /= total;
        }
        let grad = p.exact_grad(&data).unwrap().flatten();
        let h = 1e-5;
        let mut flat = p.flatten();
        let mut fd = vec![0.0; flat.len()];
        for i in 0..flat.len() {
            let orig = flat[i];
            let mut probe = p.clone();
            flat[i] = orig + h;
            probe.set_from_flat(&flat).unwrap();
            let up = probe.exact_nll(&data).unwrap();
            flat[i] = orig - h;
            probe.set_from_flat(&flat).unwrap();
            let down = probe.exact_nll(&data).unwrap();
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
        assert!(diff / norm < 1e-6, "rel err {}", diff / norm);
    }

    #[test]
    fn block_gibbs_preserves_the_joint_distribution() {
        // Transition matrix of one h-then-v block-Gibbs step on the joint
        // state space must leave the exact Boltzmann distribution invariant.
        let p = random_params(3, 2, 1.5, 7);
        let nv = 3;
        let nh = 2;
        let joint = p.exact_joint().unwrap();
        let dim = 1usize << (nv + nh);
        let mut kernel = vec![vec![0.0; dim]; dim];
        for (from, kernel_row) in kernel.iter_mut().enumerate() {
            let v_idx = from & ((1 << nv) - 1);
            let v: Vec<f64> = (0..nv).map(|a| ((v_idx >> a) & 1) as f64).collect();
            let h_probs = p.cond_hidden(&v).unwrap();
            for h_new in 0..1usize << nh {
                let mut ph = 1.0;
                let hbits: Vec<f64> = (0..nh).map(|b| ((h_new >> b) & 1) as f64).collect();
                for b in 0..nh {
                    ph *= if hbits[b] == 1.0 { h_probs[b] } else { 1.0 - h_probs[b] };
                }
                let v_probs = p.cond_visible(&hbits).unwrap();
                for v_new in 0..1usize << nv {
                    let mut pv = 1.0;
                    for a in 0..nv {
                        let bit = (v_new >> a) & 1;
                        pv *= if bit == 1 { v_probs[a] } else { 1.0 - v_probs[a] };
                    }
                    kernel_row[(h_new << nv) | v_new] += ph * pv;
                }
            }
        }
        for to in 0..dim {
            let mass: f64 = joint
                .iter()
                .zip(&kernel)
                .map(|(p, row)| p * row[to])
                .sum();
            assert_abs_diff_eq!(mass, joint[to], epsilon = 1e-10);
        }
    }

    #[test]
    fn pcd_gradient_is_deterministic_given_state_and_seed() {
        let p = random_params(4, 2, 1.0, 8);
        let minibatch: Vec<Vec<f64>> = vec![vec![1.0, 0.0, 1.0, 0.0], vec![0.0, 1.0, 0.0, 1.0]];
        let mut s1 = PcdState::new(2, 4, 2, 3, &mut rng::stream(9, "rbm")).unwrap();
        let mut s2 = s1.clone();
        let g1 = pcd_gradient(&p, &mut s1, &minibatch, &mut rng::stream(10, "rbm")).unwrap();
        let g2 = pcd_gradient(&p, &mut s2, &minibatch, &mut rng::stream(10, "rbm")).unwrap();
        assert_eq!(g1.flatten(), g2.flatten());
        assert_eq!(s1.chains, s2.chains);
    }

    #[test]
    fn pcd_gradient_approaches_exact_gradient_with_long_chains() {
        let p = random_params(4, 2, 1.0, 11);
        let mut r = rng::stream(12, "rbm");
        // Deterministic bit data: the data table and the mini-batch describe
        // the same empirical distribution.
        let samples: Vec<BitVector> = (0..64).map(|i| BitVector::from_index(i % 16, 4)).collect();
        let minibatch: Vec<Vec<f64>> = samples
            .iter()
            .map(|s| s.as_slice().iter().map(|&b| b as f64).collect())
            .collect();
        let table = empirical_table(&samples, 4);
        let exact = p.exact_grad(&table).unwrap().flatten();

        let mut state = PcdState::new(64, 4, 2, 500, &mut r).unwrap();
        let est = pcd_gradient(&p, &mut state, &minibatch, &mut r)
            .unwrap()
            .flatten();
        // Monte Carlo error over 64 chains: bound each component by 3 sigma
        // of a Bernoulli mean estimate.
        let sigma = 0.5 / (64.0f64).sqrt();
        for (e, x) in exact.iter().zip(&est) {
            assert!(
                (e - x).abs() < 3.5 * sigma,
                "component off: exact {e}, estimate {x}"
            );
        }
    }

    #[test]
    fn pcd_gradient_statistically_zero_at_stationarity() {
        let p = random_params(3, 2, 0.8, 13);
        let mut r = rng::stream(14, "rbm");
        let marginal = p.exact_marginal().unwrap();
        // Mini-batch equal to the exact marginal as Bernoulli means is not a
        // sample; instead enumerate configurations weighted by repetition.
        let mut minibatch = Vec::new();
        for (idx, &prob) in marginal.iter().enumerate() {
            let copies = (prob * 512.0).round() as usize;
            for _ in 0..copies {
                minibatch.push(
                    BitVector::from_index(idx, 3)
                        .as_slice()
                        .iter()
                        .map(|&b| b as f64)
                        .collect(),
                );
            }
        }
        let mut state = PcdState::new(minibatch.len(), 3, 2, 200, &mut r).unwrap();
        let grad = pcd_gradient(&p, &mut state, &minibatch, &mut r).unwrap();
        let n = minibatch.len() as f64;
        assert!(
            grad.norm() < 4.0 * (grad.flatten().len() as f64).sqrt() * 0.5 / n.sqrt() + 0.02,
            "gradient norm {}",
            grad.norm()
        );
    }

    #[test]
    fn anneal_schedule_validation() {
        assert!(AnnealSchedule::new(vec![0.0, 0.5, 1.0]).is_ok());
        assert!(AnnealSchedule::new(vec![0.1, 0.5, 1.0]).is_err());
        assert!(AnnealSchedule::new(vec![0.0, 0.5, 0.9]).is_err());
        assert!(AnnealSchedule::new(vec![0.0, 0.6, 0.4, 1.0]).is_err());
        assert!(AnnealSchedule::new(vec![1.0]).is_err());
    }

    #[test]
    fn annealed_samples_from_zero_model_are_uniform() {
        let p = RbmParams::zeros(4, 2);
        let mut r = rng::stream(15, "rbm");
        let samples = sample_annealed(&p, 20_000, &AnnealSchedule::linear(10), &mut r).unwrap();
        let n = samples.len() as f64;
        let sigma = 0.5 / n.sqrt();
        for a in 0..4 {
            let mean = samples
                .iter()
                .map(|s| s.as_slice()[a] as f64)
                .sum::<f64>()
                / n;
            assert!((mean - 0.5).abs() < 3.0 * sigma, "unit {a} mean {mean}");
        }
    }

    #[test]
    fn annealed_samples_follow_strong_bias() {
        let mut p = RbmParams::zeros(4, 1);
        for a in 0..4 {
            p.visible_bias[a] = 5.0;
        }
        let mut r = rng::stream(16, "rbm");
        let samples = sample_annealed(&p, 4000, &AnnealSchedule::linear(50), &mut r).unwrap();
        for a in 0..4 {
            let mean = samples
                .iter()
                .map(|s| s.as_slice()[a] as f64)
                .sum::<f64>()
                / samples.len() as f64;
            assert!(mean > 0.95, "unit {a} mean {mean}");
        }
    }

    #[test]
    fn annealed_distribution_matches_exact_marginal() {
        let p = random_params(4, 2, 1.0, 17);
        let mut r = rng::stream(18, "rbm");
        let samples = sample_annealed(&p, 100_000, &AnnealSchedule::linear(50), &mut r).unwrap();
        let emp = empirical_table(&samples, 4);
        let exact = p.exact_marginal().unwrap();
        let kl = kl_divergence(&exact, &emp).unwrap();
        assert!(kl < 0.02, "KL(exact || empirical) = {kl}");
    }

    #[test]
    fn training_on_point_mass_concentrates_probability() {
        let mut r = rng::stream(19, "rbm");
        let target = bv(&[1, 0, 1]);
        let data = Dataset::from_bits(&vec![target.clone(); 256], None).unwrap();
        let params = RbmParams::xavier(3, 2, &mut r);
        let config = RbmTrainConfig {
            learning_rate: 5e-2,
            epochs: 60,
            batch_size: 32,
            ..Default::default()
        };
        let (trained, trace) = train_rbm(params, &data, &config, &mut r).unwrap();
        let table = trained.exact_marginal().unwrap();
        assert!(
            table[target.index()] > 0.9,
            "mass on target {}",
            table[target.index()]
        );
        assert!(trace.last().unwrap() < &trace[0]);
    }

    #[test]
    fn exact_gradient_descent_decreases_nll() {
        let mut r = rng::stream(21, "rbm");
        let mut p = RbmParams::xavier(4, 2, &mut r);
        let mixture =
            crate::data::BernoulliMixture::random(3, 4, 0.85, &mut rng::stream(22, "data")).unwrap();
        let data = mixture.prob_table().unwrap();
        let mut adam = AdamState::new(p.param_count(), 5e-2, 0.5, 0.9);
        let mut previous = p.exact_nll(&data).unwrap();
        for _ in 0..50 {
            let grad = p.exact_grad(&data).unwrap();
            let mut flat = p.flatten();
            adam.apply(&mut flat, &grad.flatten()).unwrap();
            p.set_from_flat(&flat).unwrap();
            let now = p.exact_nll(&data).unwrap();
            assert!(now < previous + 1e-6, "NLL rose from {previous} to {now}");
            previous = now;
        }
    }

    #[test]
    fn train_rejects_empty_dataset() {
        let mut r = rng::stream(23, "rbm");
        let params = RbmParams::zeros(3, 2);
        let data = Dataset {
            records: Vec::new(),
            labels: None,
        };
        let mut trainer = RbmTrainer::new(params, RbmTrainConfig::default(), &mut r).unwrap();
        assert!(matches!(trainer.run_epoch(&data, &mut r), Err(Error::EmptyDataset)));
    }
}
