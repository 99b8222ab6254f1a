//! Path-integral Monte Carlo estimation of free-phase QBM expectations.
//!
//! The transverse-field model on `n` spins maps to a classical system of
//! `M x n` spins (M imaginary-time slices, periodic in the slice index) with
//! action
//!
//! `S({z^m}) = (beta / M) sum_m E(z^m) + t_a sum_(a,m) z_a^m z_a^(m+1)`,
//!
//! where `E` is the classical Ising energy of one slice and
//! `t_a = ln(tanh(beta G_a / M)) / 2 < 0` couples neighboring slices
//! ferromagnetically. Sampling uses single-spin Metropolis sweeps inside a
//! population-annealing loop over a rising beta schedule, with systematic
//! resampling of replicas by relative Boltzmann weight.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::data::SpinVector;
use crate::error::{Error, Result};
use crate::qbm::QbmParams;

/// Discretization and annealing settings for the mapped system.
#[derive(Debug, Clone, PartialEq)]
pub struct TrotterConfig {
    /// Imaginary-time slices M (>= 1).
    pub slices: usize,
    /// Initial replica population R0 (>= 1).
    pub replicas: usize,
    /// Inverse-temperature schedule, strictly increasing from exactly 0 to
    /// exactly 1.
    pub beta_schedule: Vec<f64>,
    /// Equilibration sweeps after each resampling step.
    pub sweeps_per_step: usize,
}

impl TrotterConfig {
    pub fn new(
        slices: usize,
        replicas: usize,
        beta_schedule: Vec<f64>,
        sweeps_per_step: usize,
    ) -> Result<Self> {
        if slices == 0 {
            return Err(Error::InvalidConfig("slices must be at least 1".into()));
        }
        if replicas == 0 {
            return Err(Error::InvalidConfig("replicas must be at least 1".into()));
        }
        if sweeps_per_step == 0 {
            return Err(Error::InvalidConfig("sweeps_per_step must be at least 1".into()));
        }
        if beta_schedule.len() < 2
            || beta_schedule[0] != 0.0
            || *beta_schedule.last().unwrap() != 1.0
            || beta_schedule.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(Error::InvalidSchedule(
                "beta schedule must rise strictly from 0 to 1".into(),
            ));
        }
        Ok(Self {
            slices,
            replicas,
            beta_schedule,
            sweeps_per_step,
        })
    }

    /// Linear schedule with `anneal_steps` steps from beta 0 to 1.
    pub fn linear(
        slices: usize,
        replicas: usize,
        anneal_steps: usize,
        sweeps_per_step: usize,
    ) -> Result<Self> {
        if anneal_steps == 0 {
            return Err(Error::InvalidSchedule("need at least one annealing step".into()));
        }
        let schedule = (0..=anneal_steps)
            .map(|k| k as f64 / anneal_steps as f64)
            .collect();
        Self::new(slices, replicas, schedule, sweeps_per_step)
    }

    pub fn anneal_steps(&self) -> usize {
        self.beta_schedule.len() - 1
    }
}

impl Default for TrotterConfig {
    fn default() -> Self {
        // Reference settings: 64 replicas (one mini-batch), 5 annealing
        // steps, 10 imaginary-time slices.
        Self::linear(10, 64, 5, 5).unwrap()
    }
}

/// Population of Trotter-extended spin configurations at a common beta.
/// Spins are stored slice-major: `spins[replica][m * sites + a]`.
#[derive(Debug, Clone)]
pub struct ReplicaPopulation {
    pub spins: Vec<Vec<i8>>,
    pub slices: usize,
    pub sites: usize,
    pub beta: f64,
}

impl ReplicaPopulation {
    fn spin(&self, replica: usize, m: usize, a: usize) -> i8 {
        self.spins[replica][m * self.sites + a]
    }
}

/// Free-phase moment estimates from a replica population.
#[derive(Debug, Clone)]
pub struct MomentEstimate {
    /// `<Z_a>` per unit.
    pub first_moments: DVector<f64>,
    /// `<Z_v Z_h>` on the bipartite block, `n_visible x n_hidden`.
    pub second_moments: DMatrix<f64>,
    /// Minimum effective sample size across resampling events.
    pub effective_sample_size: f64,
    /// Accumulated estimate of `ln sum_z e^{-S(z)}` at beta = 1.
    pub log_partition: f64,
}

/// Slice-coupling constant `t_a = ln(tanh(beta G_a / M)) / 2`, or `None` for
/// a classical site (zero transverse field), whose slices are locked.
fn slice_coupling(gamma: f64, beta: f64, slices: usize) -> Option<f64> {
    if gamma == 0.0 {
        None
    } else {
        Some(0.5 * (beta * gamma / slices as f64).tanh().ln())
    }
}

/// Classical Ising energy of one slice.
fn slice_energy(params: &QbmParams, slice: &[i8]) -> f64 {
    let n_v = params.n_visible;
    let n_h = params.n_hidden();
    let mut e = 0.0;
    for (a, &s) in slice.iter().enumerate() {
        e -= params.bias[a] * s as f64;
    }
    for (v, &sv) in slice.iter().take(n_v).enumerate() {
        for h in 0..n_h {
            e -= params.weights[(v, h)] * sv as f64 * slice[n_v + h] as f64;
        }
    }
    e
}

/// Action of one replica configuration at inverse temperature `beta > 0`.
///
/// The Boltzmann weight of the mapped system is `exp(-action)`. Sites with
/// zero transverse field must have all slices aligned; a misaligned
/// configuration has infinite action. With a single slice the self-coupling
/// term is a constant and is dropped.
pub fn mapped_action(params: &QbmParams, config: &[i8], slices: usize, beta: f64) -> f64 {
    debug_assert!(beta > 0.0, "the action is undefined at beta = 0");
    let n = params.n_units();
    debug_assert_eq!(config.len(), slices * n);
    let mut classical = 0.0;
    for m in 0..slices {
        classical += slice_energy(params, &config[m * n..(m + 1) * n]);
    }
    let mut action = beta / slices as f64 * classical;
    if slices > 1 {
        for a in 0..n {
            match slice_coupling(params.transverse_field[a], beta, slices) {
                Some(t) => {
                    for m in 0..slices {
                        let next = (m + 1) % slices;
                        action += t * (config[m * n + a] as f64) * (config[next * n + a] as f64);
                    }
                }
                None => {
                    for m in 0..slices {
                        let next = (m + 1) % slices;
                        if config[m * n + a] != config[next * n + a] {
                            return f64::INFINITY;
                        }
                    }
                }
            }
        }
    }
    action
}

/// Action change from flipping spin `(m, a)` of a replica. For classical
/// sites (zero transverse field) this is the collective flip of site `a`
/// across all slices.
fn flip_delta(
    params: &QbmParams,
    config: &[i8],
    slices: usize,
    beta: f64,
    m: usize,
    a: usize,
) -> f64 {
    let n = params.n_units();
    let slice = &config[m * n..(m + 1) * n];
    let local = local_field(params, slice, a);
    let z = config[m * n + a] as f64;
    match slice_coupling(params.transverse_field[a], beta, slices) {
        Some(t) if slices > 1 => {
            let prev = config[((m + slices - 1) % slices) * n + a] as f64;
            let next = config[((m + 1) % slices) * n + a] as f64;
            // Classical part: 2 z * local scaled to the slice; quantum part:
            // both imaginary-time bonds of (m, a) change sign.
            beta / slices as f64 * 2.0 * z * local - 2.0 * t * z * (prev + next)
        }
        _ => {
            // Collective flip of site a in every slice: the quantum bonds are
            // untouched, each slice contributes its own local field.
            let mut total = 0.0;
            for mm in 0..slices {
                let s = &config[mm * n..(mm + 1) * n];
                total += 2.0 * (s[a] as f64) * local_field(params, s, a);
            }
            beta / slices as f64 * total
        }
    }
}

/// Per-slice conditional means of one site's imaginary-time ring given every
/// other site's configuration. The ring is a periodic 1-D Ising chain with
/// slice fields `(beta/M) * local_field` and uniform coupling `-t_a`, so its
/// marginals follow from 2x2 transfer-matrix prefix/suffix products.
/// Measuring these means instead of raw spins removes the slow ring modes
/// from the estimator variance without bias.
fn ring_marginals(
    params: &QbmParams,
    config: &[i8],
    slices: usize,
    beta: f64,
    a: usize,
    out: &mut [f64],
) {
    let n = params.n_units();
    let fields: Vec<f64> = (0..slices)
        .map(|m| beta / slices as f64 * local_field(params, &config[m * n..(m + 1) * n], a))
        .collect();
    let coupling = slice_coupling(params.transverse_field[a], beta, slices);
    match coupling {
        Some(t) if slices > 1 => {
            let k = -t; // ferromagnetic, positive
            // T_m(y, y') = exp(phi_m y + K y y'), y indexed (+1, -1).
            let t_mat = |phi: f64| -> [f64; 4] {
                [
                    (phi + k).exp(),
                    (phi - k).exp(),
                    (-phi - k).exp(),
                    (-phi + k).exp(),
                ]
            };
            let mul = |x: &[f64; 4], y: &[f64; 4]| -> [f64; 4] {
                [
                    x[0] * y[0] + x[1] * y[2],
                    x[0] * y[1] + x[1] * y[3],
                    x[2] * y[0] + x[3] * y[2],
                    x[2] * y[1] + x[3] * y[3],
                ]
            };
            let normalize = |x: &mut [f64; 4]| {
                let m = x.iter().cloned().fold(0.0f64, f64::max);
                for v in x.iter_mut() {
                    *v /= m;
                }
            };
            // Normalized prefix products P_j = T_0 ... T_{j-1} and suffix
            // products S_j = T_j ... T_{M-1}; the normalization factors
            // cancel in the marginal ratios.
            let mats: Vec<[f64; 4]> = fields.iter().map(|&phi| t_mat(phi)).collect();
            let mut prefix = vec![[1.0, 0.0, 0.0, 1.0]; slices + 1];
            for j in 0..slices {
                prefix[j + 1] = mul(&prefix[j], &mats[j]);
                normalize(&mut prefix[j + 1]);
            }
            let mut suffix = vec![[1.0, 0.0, 0.0, 1.0]; slices + 1];
            for j in (0..slices).rev() {
                suffix[j] = mul(&mats[j], &suffix[j + 1]);
                normalize(&mut suffix[j]);
            }
            for j in 0..slices {
                // tr(P_j D S_j) / tr(P_j S_j) with D = diag(1, -1); the
                // field of slice j is attached to the left index of T_j.
                let p = &prefix[j];
                let s = &suffix[j];
                let plus = p[0] * s[0] + p[2] * s[1];
                let minus = p[1] * s[2] + p[3] * s[3];
                out[j] = (plus - minus) / (plus + minus);
            }
        }
        _ => {
            // Classical site or single slice: the ring is one collective
            // spin with the summed field.
            let total: f64 = fields.iter().sum();
            let mean = total.tanh();
            for o in out.iter_mut() {
                *o = mean;
            }
        }
    }
}

/// `b_a + sum_partners W z_partner` on one slice.
fn local_field(params: &QbmParams, slice: &[i8], a: usize) -> f64 {
    let n_v = params.n_visible;
    let mut f = params.bias[a];
    if a < n_v {
        for h in 0..params.n_hidden() {
            f += params.weights[(a, h)] * slice[n_v + h] as f64;
        }
    } else {
        for (v, &sv) in slice.iter().take(n_v).enumerate() {
            f += params.weights[(v, a - n_v)] * sv as f64;
        }
    }
    f
}

/// One full Metropolis sweep over every replica: a single-spin-flip proposal
/// at every (slice, site), accepted with probability `min(1, e^{-dS})`.
/// Classical sites are proposed once per sweep as a collective flip.
pub fn mh_sweep(pop: &mut ReplicaPopulation, params: &QbmParams, rng: &mut ChaCha12Rng) {
    let n = pop.sites;
    let slices = pop.slices;
    let beta = pop.beta;
    for config in &mut pop.spins {
        for m in 0..slices {
            for a in 0..n {
                let classical = params.transverse_field[a] == 0.0 || slices == 1;
                if classical && m > 0 {
                    continue;
                }
                let delta = flip_delta(params, config, slices, beta, m, a);
                if delta <= 0.0 || rng.random::<f64>() < (-delta).exp() {
                    if classical {
                        for mm in 0..slices {
                            config[mm * n + a] = -config[mm * n + a];
                        }
                    } else {
                        config[m * n + a] = -config[m * n + a];
                    }
                }
            }
        }
    }
}

/// Exact sample of the mapped distribution in the beta -> 0 limit: the
/// imaginary-time coupling diverges there, so each site takes one uniform
/// value replicated across all slices.
fn infinite_temperature_population(
    params: &QbmParams,
    cfg: &TrotterConfig,
    rng: &mut ChaCha12Rng,
) -> ReplicaPopulation {
    let n = params.n_units();
    let spins = (0..cfg.replicas)
        .map(|_| {
            let mut config = vec![0i8; cfg.slices * n];
            for a in 0..n {
                let s: i8 = if rng.random::<f64>() < 0.5 { -1 } else { 1 };
                for m in 0..cfg.slices {
                    config[m * n + a] = s;
                }
            }
            config
        })
        .collect();
    ReplicaPopulation {
        spins,
        slices: cfg.slices,
        sites: n,
        beta: 0.0,
    }
}

/// Systematic resampling to a fixed population size: low-variance, unbiased
/// in expectation.
fn systematic_resample(weights: &[f64], target: usize, rng: &mut ChaCha12Rng) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let step = total / target as f64;
    let mut offset = rng.random::<f64>() * step;
    let mut picks = Vec::with_capacity(target);
    let mut cumulative = 0.0;
    let mut idx = 0;
    for _ in 0..target {
        // The last index absorbs any floating-point shortfall in `total`.
        while idx + 1 < weights.len() && cumulative + weights[idx] < offset {
            cumulative += weights[idx];
            idx += 1;
        }
        picks.push(idx);
        offset += step;
    }
    picks
}

/// Anneal a replica population from infinite temperature to beta = 1 and
/// return it together with free-phase moment estimates.
///
/// At each schedule step replicas are reweighted by
/// `exp(-[S_beta'(z) - S_beta(z)])` (the first step reweights from the
/// slice-aligned uniform reference, `S_0 = 0`), systematically resampled back
/// to the configured population size, and equilibrated with Metropolis
/// sweeps. Moments average over the population and all slices, measured
/// after every sweep of the final rung. An effective sample size below 2 at
/// any resampling is reported as a degeneracy warning on stderr.
pub fn population_anneal(
    params: &QbmParams,
    cfg: &TrotterConfig,
    rng: &mut ChaCha12Rng,
) -> Result<(ReplicaPopulation, MomentEstimate)> {
    let n = params.n_units();
    let mut pop = infinite_temperature_population(params, cfg, rng);
    // The beta -> 0 reference measure is uniform over the 2^n slice-aligned
    // configurations.
    let mut log_partition = n as f64 * std::f64::consts::LN_2;
    let n_v = params.n_visible;
    let n_h = params.n_hidden();
    let mut first = DVector::zeros(n);
    let mut second = DMatrix::zeros(n_v, n_h);
    let mut measurements = 0usize;

    let mut min_ess = f64::INFINITY;
    let mut prev_beta = 0.0;
    let last_beta = *cfg.beta_schedule.last().unwrap();
    for &beta in &cfg.beta_schedule[1..] {
        let log_w: Vec<f64> = pop
            .spins
            .iter()
            .map(|config| {
                let s_new = mapped_action(params, config, cfg.slices, beta);
                let s_old = if prev_beta == 0.0 {
                    0.0
                } else {
                    mapped_action(params, config, cfg.slices, prev_beta)
                };
                s_old - s_new
            })
            .collect();
        let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::InvalidConfig(
                "all replica weights vanished during annealing".into(),
            ));
        }
        let weights: Vec<f64> = log_w.iter().map(|&w| (w - max).exp()).collect();
        let sum: f64 = weights.iter().sum();
        let sum_sq: f64 = weights.iter().map(|w| w * w).sum();
        let ess = sum * sum / sum_sq;
        min_ess = min_ess.min(ess);
        log_partition += max + (sum / pop.spins.len() as f64).ln();

        let picks = systematic_resample(&weights, cfg.replicas, rng);
        pop.spins = picks.iter().map(|&i| pop.spins[i].clone()).collect();
        pop.beta = beta;
        let measuring = beta == last_beta;
        for _ in 0..cfg.sweeps_per_step {
            mh_sweep(&mut pop, params, rng);
            if measuring {
                // Accumulate moments after every sweep of the final rung.
                // First moments use the exact ring-conditional means; second
                // moments the symmetrized one-sided conditioning, both
                // unbiased with far less slow-mode variance than raw spins.
                let mut means = vec![0.0; n * cfg.slices];
                for config in &pop.spins {
                    for a in 0..n {
                        ring_marginals(
                            params,
                            config,
                            cfg.slices,
                            beta,
                            a,
                            &mut means[a * cfg.slices..(a + 1) * cfg.slices],
                        );
                    }
                    for m in 0..cfg.slices {
                        let slice = &config[m * n..(m + 1) * n];
                        for a in 0..n {
                            first[a] += means[a * cfg.slices + m];
                        }
                        for v in 0..n_v {
                            for h in 0..n_h {
                                second[(v, h)] += 0.5
                                    * (means[v * cfg.slices + m] * slice[n_v + h] as f64
                                        + slice[v] as f64 * means[(n_v + h) * cfg.slices + m]);
                            }
                        }
                    }
                }
                measurements += pop.spins.len() * cfg.slices;
            }
        }
        prev_beta = beta;
    }
    if min_ess < 2.0 {
        eprintln!("warning: population degeneracy during annealing (min ESS {min_ess:.2})");
    }

    first /= measurements as f64;
    second /= measurements as f64;
    Ok((
        pop,
        MomentEstimate {
            first_moments: first,
            second_moments: second,
            effective_sample_size: min_ess,
            log_partition,
        },
    ))
}

/// Read visible spin configurations from randomly chosen (replica, slice)
/// pairs of a population at beta = 1. Draws are with replacement, so `count`
/// may exceed the population size.
pub fn sample_visible(
    pop: &ReplicaPopulation,
    n_visible: usize,
    count: usize,
    rng: &mut ChaCha12Rng,
) -> Vec<SpinVector> {
    debug_assert!((pop.beta - 1.0).abs() < 1e-12, "population not at beta = 1");
    (0..count)
        .map(|_| {
            let r = rng.random_range(0..pop.spins.len());
            let m = rng.random_range(0..pop.slices);
            SpinVector::new((0..n_visible).map(|a| pop.spin(r, m, a)).collect()).unwrap()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use approx::assert_abs_diff_eq;

    fn random_qbm(nv: usize, nh: usize, gamma: f64, scale: f64, seed: u64) -> QbmParams {
        let mut r = rng::stream(seed, "pimc");
        let mut p = QbmParams::new(nv, nh, gamma).unwrap();
        for x in p.bias.iter_mut() {
            *x = (r.random::<f64>() - 0.5) * scale;
        }
        for x in p.weights.iter_mut() {
            *x = (r.random::<f64>() - 0.5) * scale;
        }
        p
    }

    #[test]
    fn config_validation() {
        assert!(TrotterConfig::linear(10, 64, 5, 5).is_ok());
        assert!(TrotterConfig::linear(0, 64, 5, 5).is_err());
        assert!(TrotterConfig::new(4, 8, vec![0.0, 0.5, 0.4, 1.0], 1).is_err());
        assert!(TrotterConfig::new(4, 8, vec![0.1, 1.0], 1).is_err());
        let default = TrotterConfig::default();
        assert_eq!(default.slices, 10);
        assert_eq!(default.replicas, 64);
        assert_eq!(default.anneal_steps(), 5);
    }

    #[test]
    fn classical_limit_action_is_scaled_slice_energy() {
        // Zero transverse field: aligned slices carry the classical energy,
        // misaligned ones are forbidden.
        let p = random_qbm(2, 1, 0.0, 2.0, 1);
        let slices = 4;
        let n = 3;
        let mut config = vec![0i8; slices * n];
        let spins = [1i8, -1, 1];
        for m in 0..slices {
            config[m * n..(m + 1) * n].copy_from_slice(&spins);
        }
        let beta = 0.7;
        let expected = beta * slice_energy(&p, &spins);
        assert_abs_diff_eq!(
            mapped_action(&p, &config, slices, beta),
            expected,
            epsilon = 1e-12
        );

        config[n] = -config[n];
        assert!(mapped_action(&p, &config, slices, beta).is_infinite());
    }

    #[test]
    fn single_slice_action_drops_self_coupling() {
        let p = random_qbm(2, 1, 2.0, 1.5, 2);
        let spins = [1i8, 1, -1];
        let beta = 0.9;
        assert_abs_diff_eq!(
            mapped_action(&p, &spins, 1, beta),
            beta * slice_energy(&p, &spins),
            epsilon = 1e-12
        );
    }

    /// Trotter product `tr(T^M)` route to slice moments for n = 2, M = 2:
    /// the mapped Boltzmann distribution must reproduce it exactly.
    #[test]
    fn mapped_distribution_matches_analytic_trotter_formula() {
        let p = random_qbm(1, 1, 1.3, 1.0, 3);
        let slices = 2;
        let n = 2;
        let beta = 1.0;

        // Exhaustive moments of the mapped distribution.
        let dim = 1usize << (slices * n);
        let mut z_map = 0.0;
        let mut m0 = [0.0; 2]; // <z_a> on slice 0
        for state in 0..dim {
            let config: Vec<i8> = (0..slices * n)
                .map(|i| if (state >> i) & 1 == 1 { 1 } else { -1 })
                .collect();
            let w = (-mapped_action(&p, &config, slices, beta)).exp();
            z_map += w;
            for (a, m) in m0.iter_mut().enumerate() {
                *m += w * config[a] as f64;
            }
        }
        for m in &mut m0 {
            *m /= z_map;
        }

        // Analytic route: T = e^{-(beta/M) H_z} e^{-(beta/M) H_x} as a 4x4
        // matrix; slice-0 moments are tr(Z_a T^M) / tr(T^M).
        let tau = beta / slices as f64;
        let mut t = DMatrix::<f64>::zeros(4, 4);
        for s in 0..4usize {
            let diag = (-tau * p.diagonal_energy(s)).exp();
            for s2 in 0..4usize {
                // <s | e^{tau G X} | s2> factorizes per site.
                let mut x_elem = 1.0;
                for a in 0..2 {
                    let arg = tau * p.transverse_field[a];
                    let same = ((s >> a) & 1) == ((s2 >> a) & 1);
                    x_elem *= if same { arg.cosh() } else { arg.sinh() };
                }
                t[(s, s2)] += diag * x_elem;
            }
        }
        let t2 = &t * &t;
        let trace: f64 = (0..4).map(|s| t2[(s, s)]).sum();
        for (a, &m) in m0.iter().enumerate() {
            let weighted: f64 = (0..4)
                .map(|s| {
                    let z = if (s >> a) & 1 == 1 { 1.0 } else { -1.0 };
                    z * t2[(s, s)]
                })
                .sum();
            assert_abs_diff_eq!(m, weighted / trace, epsilon = 1e-10);
        }
    }

    #[test]
    fn flip_delta_matches_full_action_recomputation() {
        let p = random_qbm(2, 2, 1.7, 1.4, 4);
        let slices = 6;
        let n = 4;
        let beta = 0.8;
        let mut r = rng::stream(5, "pimc");
        let mut config: Vec<i8> = (0..slices * n)
            .map(|_| if r.random::<f64>() < 0.5 { -1 } else { 1 })
            .collect();
        for trial in 0..200 {
            let m = r.random_range(0..slices);
            let a = r.random_range(0..n);
            let before = mapped_action(&p, &config, slices, beta);
            let delta = flip_delta(&p, &config, slices, beta, m, a);
            config[m * n + a] = -config[m * n + a];
            let after = mapped_action(&p, &config, slices, beta);
            assert_abs_diff_eq!(after - before, delta, epsilon = 1e-10);
            if trial % 3 == 0 {
                // Leave some flips in place to vary the background.
                continue;
            }
            config[m * n + a] = -config[m * n + a];
        }
    }

    #[test]
    fn collective_flip_delta_matches_recomputation_for_classical_site() {
        let mut p = random_qbm(2, 1, 1.5, 1.2, 6);
        p.transverse_field[0] = 0.0; // site 0 classical, others quantum
        let slices = 4;
        let n = 3;
        let beta = 0.9;
        let mut r = rng::stream(7, "pimc");
        let mut config = vec![0i8; slices * n];
        let s0: i8 = 1;
        for m in 0..slices {
            config[m * n] = s0;
            for a in 1..n {
                config[m * n + a] = if r.random::<f64>() < 0.5 { -1 } else { 1 };
            }
        }
        let before = mapped_action(&p, &config, slices, beta);
        let delta = flip_delta(&p, &config, slices, beta, 0, 0);
        for m in 0..slices {
            config[m * n] = -config[m * n];
        }
        let after = mapped_action(&p, &config, slices, beta);
        assert_abs_diff_eq!(after - before, delta, epsilon = 1e-10);
    }

    #[test]
    fn classical_site_sweep_is_single_site_metropolis() {
        // One classical spin with a bias: the chain must converge to
        // <z> = tanh(beta b).
        let mut p = QbmParams::new(1, 0, 0.0).unwrap();
        p.bias[0] = 0.8;
        let slices = 4;
        let mut pop = ReplicaPopulation {
            spins: vec![vec![1; slices]; 256],
            slices,
            sites: 1,
            beta: 1.0,
        };
        let mut r = rng::stream(8, "pimc");
        let mut mean = 0.0;
        let burn = 50;
        let measure = 400;
        for sweep in 0..burn + measure {
            mh_sweep(&mut pop, &p, &mut r);
            if sweep >= burn {
                let m: f64 = pop
                    .spins
                    .iter()
                    .map(|c| c[0] as f64)
                    .sum::<f64>()
                    / pop.spins.len() as f64;
                mean += m;
            }
        }
        mean /= measure as f64;
        let expected = 0.8f64.tanh();
        assert!(
            (mean - expected).abs() < 0.02,
            "magnetization {mean} vs {expected}"
        );
    }

    #[test]
    fn sweep_stationarity_on_exact_mapped_distribution() {
        // n = 2, M = 2: compose the per-spin Metropolis kernels in raster
        // order and verify that the exact mapped Boltzmann vector is a fixed
        // point of the full sweep.
        let p = random_qbm(1, 1, 1.1, 1.3, 9);
        let slices = 2;
        let n = 2;
        let beta = 1.0;
        let dim = 1usize << (slices * n);

        let config_of = |state: usize| -> Vec<i8> {
            (0..slices * n)
                .map(|i| if (state >> i) & 1 == 1 { 1 } else { -1 })
                .collect()
        };
        let mut pi = vec![0.0; dim];
        let mut z = 0.0;
        for (state, prob) in pi.iter_mut().enumerate() {
            *prob = (-mapped_action(&p, &config_of(state), slices, beta)).exp();
            z += *prob;
        }
        for prob in &mut pi {
            *prob /= z;
        }

        let mut kernel = DMatrix::<f64>::identity(dim, dim);
        for m in 0..slices {
            for a in 0..n {
                let mut step = DMatrix::<f64>::zeros(dim, dim);
                for state in 0..dim {
                    let config = config_of(state);
                    let delta = flip_delta(&p, &config, slices, beta, m, a);
                    let accept = (-delta).exp().min(1.0);
                    let flipped = state ^ (1 << (m * n + a));
                    step[(flipped, state)] += accept;
                    step[(state, state)] += 1.0 - accept;
                }
                kernel = step * kernel;
            }
        }
        for to in 0..dim {
            let mut mass = 0.0;
            for from in 0..dim {
                mass += kernel[(to, from)] * pi[from];
            }
            assert_abs_diff_eq!(mass, pi[to], epsilon = 1e-10);
        }
    }

    #[test]
    fn long_ferromagnet_run_matches_exact_thermal() {
        let mut p = QbmParams::new(1, 1, 1.0).unwrap();
        p.weights[(0, 0)] = 0.8;
        p.bias[0] = 0.3;
        let th = p.exact_thermal().unwrap();
        let cfg = TrotterConfig::linear(16, 256, 8, 10).unwrap();
        let mut r = rng::stream(10, "pimc");
        let (mut pop, _) = population_anneal(&p, &cfg, &mut r).unwrap();
        // Extra equilibration and a long measurement average at beta = 1.
        let mut first = DVector::zeros(2);
        let mut cross = 0.0;
        let rounds = 300;
        for _ in 0..rounds {
            mh_sweep(&mut pop, &p, &mut r);
            let denom = (pop.spins.len() * pop.slices) as f64;
            for config in &pop.spins {
                for m in 0..pop.slices {
                    let s = &config[m * 2..(m + 1) * 2];
                    first[0] += s[0] as f64 / denom;
                    first[1] += s[1] as f64 / denom;
                    cross += (s[0] * s[1]) as f64 / denom;
                }
            }
        }
        first /= rounds as f64;
        cross /= rounds as f64;
        // Allow Trotter bias at M = 16 plus Monte Carlo error.
        assert!((first[0] - th.first[0]).abs() < 0.03, "m0 {first:?} vs {:?}", th.first);
        assert!((first[1] - th.first[1]).abs() < 0.03);
        assert!((cross - th.second[(0, 1)]).abs() < 0.03);
    }

    #[test]
    fn zero_model_moments_vanish_with_full_ess() {
        // All parameters zero (including the transverse field): the action
        // is identically zero, every weight is equal, ESS stays at R0.
        let p = QbmParams::new(3, 2, 0.0).unwrap();
        let cfg = TrotterConfig::linear(8, 512, 5, 5).unwrap();
        let mut r = rng::stream(11, "pimc");
        let (_, stats) = population_anneal(&p, &cfg, &mut r).unwrap();
        let sigma = 1.0 / (512f64).sqrt();
        for &m in stats.first_moments.iter() {
            assert!(m.abs() < 4.0 * sigma, "moment {m}");
        }
        assert!(
            (stats.effective_sample_size - 512.0).abs() < 1e-9,
            "ESS {}",
            stats.effective_sample_size
        );

        // Transverse field only: the conditional ring means are exactly zero
        // in the absence of longitudinal fields.
        let p = QbmParams::new(3, 2, 2.0).unwrap();
        let (_, stats) = population_anneal(&p, &cfg, &mut rng::stream(12, "pimc")).unwrap();
        for &m in stats.first_moments.iter() {
            assert_eq!(m, 0.0);
        }
        assert!(stats.effective_sample_size > 100.0);
    }

    #[test]
    fn moments_stay_in_range_and_match_exact_with_generous_settings() {
        for seed in 0..3u64 {
            let p = random_qbm(3, 2, 2.0, 2.0, 20 + seed);
            let th = p.exact_thermal().unwrap();
            let cfg = TrotterConfig::linear(32, 512, 20, 8).unwrap();
            let mut r = rng::stream(12 + seed, "pimc");
            let (_, stats) = population_anneal(&p, &cfg, &mut r).unwrap();
            for a in 0..5 {
                assert!(stats.first_moments[a].abs() <= 1.0 + 1e-12);
                assert!(
                    (stats.first_moments[a] - th.first[a]).abs() < 0.08,
                    "seed {seed} unit {a}: {} vs {}",
                    stats.first_moments[a],
                    th.first[a]
                );
            }
            for v in 0..3 {
                for h in 0..2 {
                    assert!(stats.second_moments[(v, h)].abs() <= 1.0 + 1e-12);
                    assert!(
                        (stats.second_moments[(v, h)] - th.second[(v, 3 + h)]).abs() < 0.08,
                        "seed {seed} pair ({v},{h})"
                    );
                }
            }
        }
    }

    #[test]
    fn trotter_error_decreases_with_more_slices() {
        let p = random_qbm(2, 2, 2.0, 1.0, 30);
        let th = p.exact_thermal().unwrap();
        let mut errors = Vec::new();
        for slices in [4usize, 16, 64] {
            let cfg = TrotterConfig::linear(slices, 1024, 20, 8).unwrap();
            let mut r = rng::stream(13, "pimc");
            let (_, stats) = population_anneal(&p, &cfg, &mut r).unwrap();
            let err: f64 = (0..4)
                .map(|a| (stats.first_moments[a] - th.first[a]).abs())
                .fold(0.0, f64::max);
            errors.push(err);
        }
        // Monotone within a Monte Carlo cushion.
        assert!(
            errors[2] <= errors[0] + 0.02,
            "errors did not shrink: {errors:?}"
        );
    }

    #[test]
    fn log_partition_estimate_brackets_exhaustive_value() {
        let p = random_qbm(2, 1, 1.5, 1.0, 40);
        let slices = 4;
        let n = 3;
        // Exhaustive ln Z of the mapped system at beta = 1.
        let dim = 1usize << (slices * n);
        let mut z = 0.0;
        for state in 0..dim {
            let config: Vec<i8> = (0..slices * n)
                .map(|i| if (state >> i) & 1 == 1 { 1 } else { -1 })
                .collect();
            z += (-mapped_action(&p, &config, slices, 1.0)).exp();
        }
        let exact = z.ln();

        // The telescoped estimator is unbiased for Z, so ln-domain runs
        // carry a small dissipation bias that vanishes with a long, well
        // equilibrated schedule; generous settings bring it under the noise.
        let cfg = TrotterConfig::linear(slices, 512, 80, 20).unwrap();
        let runs: Vec<f64> = (0..20)
            .map(|k| {
                let mut r = rng::substream(41, "pimc", k);
                population_anneal(&p, &cfg, &mut r).unwrap().1.log_partition
            })
            .collect();
        let mean = runs.iter().sum::<f64>() / runs.len() as f64;
        let var = runs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>()
            / (runs.len() as f64 - 1.0);
        let se = (var / runs.len() as f64).sqrt();
        assert!(
            (mean - exact).abs() < 3.0 * se + 0.01,
            "lnZ estimate {mean} +- {se} vs exact {exact}"
        );
    }

    #[test]
    fn biased_spin_samples_follow_the_marginal() {
        let mut p = QbmParams::new(1, 0, 0.1).unwrap();
        p.bias[0] = 5.0;
        let cfg = TrotterConfig::linear(10, 256, 5, 5).unwrap();
        let mut r = rng::stream(14, "pimc");
        let (pop, _) = population_anneal(&p, &cfg, &mut r).unwrap();
        let samples = sample_visible(&pop, 1, 2000, &mut r);
        let mean: f64 = samples
            .iter()
            .map(|s| s.as_slice()[0] as f64)
            .sum::<f64>()
            / samples.len() as f64;
        assert!(mean > 0.98, "mean {mean}");
    }

    #[test]
    fn visible_sampling_is_deterministic_and_unbiased_for_zero_model() {
        let p = QbmParams::new(2, 1, 2.0).unwrap();
        let cfg = TrotterConfig::default();
        let (pop, _) = population_anneal(&p, &cfg, &mut rng::stream(15, "pimc")).unwrap();
        let a = sample_visible(&pop, 2, 64, &mut rng::stream(16, "pimc"));
        let b = sample_visible(&pop, 2, 64, &mut rng::stream(16, "pimc"));
        assert_eq!(a, b);

        let mut r = rng::stream(17, "pimc");
        let (pop, _) =
            population_anneal(&p, &TrotterConfig::linear(8, 512, 5, 5).unwrap(), &mut r).unwrap();
        let samples = sample_visible(&pop, 2, 20_000, &mut r);
        for a in 0..2 {
            let mean: f64 = samples
                .iter()
                .map(|s| s.as_slice()[a] as f64)
                .sum::<f64>()
                / samples.len() as f64;
            assert!(mean.abs() < 0.08, "site {a} mean {mean}");
        }
    }

    #[test]
    fn same_site_same_slice_second_moment_is_one() {
        let p = random_qbm(2, 2, 1.0, 1.0, 50);
        let cfg = TrotterConfig::default();
        let mut r = rng::stream(18, "pimc");
        let (pop, _) = population_anneal(&p, &cfg, &mut r).unwrap();
        for config in pop.spins.iter().take(8) {
            for m in 0..pop.slices {
                for a in 0..pop.sites {
                    let z = config[m * pop.sites + a] as f64;
                    assert_eq!(z * z, 1.0);
                }
            }
        }
    }
}
