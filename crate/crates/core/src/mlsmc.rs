//! Multilevel sequential Monte Carlo for posterior expectations.
//!
//! The target measures eta_l reweight the prior by exp(-Phi_l), where Phi_l
//! is the data misfit of the level-l forward map. One particle population
//! walks up the level ladder: weight by G_l = exp(Phi_l - Phi_{l+1}),
//! resample, rejuvenate with random-walk Metropolis, repeat. Because
//! consecutive levels nearly agree, the weights stay close to one and each
//! correction term
//!   eta_l(Q_{l+1} G_l)/eta_l(G_l) - eta_l(Q_l)
//! can be estimated with far fewer particles than the level above needed.
//! Every particle caches its forward evaluation at the population's level
//! and the next one, so the corrections reuse solves that the weighting
//! already paid for.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::KernelParams;
use crate::mlmc::{LevelSchedule, RateTriple};
use crate::model::ForwardModel;
use crate::rng::{substream, Purpose};

/// Observed data for the inverse problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observations {
    pub y: Vec<f64>,
    /// Locations the observation operator reads; must match the model's.
    pub locations: Vec<f64>,
    /// Variance of the iid Gaussian observation noise.
    pub sigma2: f64,
}

/// One cached forward evaluation at a fixed level.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PotentialEval {
    pub params: KernelParams,
    pub level: usize,
    /// Model values at the observation locations.
    pub obs: Vec<f64>,
    /// Data misfit Phi of those values.
    pub phi: f64,
    /// Quantity of interest at this level; the correction terms read it.
    pub qoi: f64,
    pub cost: f64,
}

/// A parameter draw with its evaluation at the population level and, when
/// the sampler still has levels to climb, at the next finer one.
#[derive(Debug, Clone)]
pub struct Particle {
    pub cur: PotentialEval,
    pub next: Option<PotentialEval>,
}

/// Equally weighted after construction; the type keeps explicit weights so
/// intermediate reweighted states share the representation.
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub level: usize,
    pub particles: Vec<Particle>,
    /// Normalized weights, summing to 1.
    pub weights: Vec<f64>,
    pub ess: f64,
}

/// Random-walk Metropolis settings for the rejuvenation sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MutationConfig {
    /// Sweeps per level transition.
    pub n_steps: usize,
    /// Sweeps when seeding the level-0 population from the prior.
    pub n_steps_init: usize,
    /// Proposal covariance = scale * (empirical covariance + floor * I),
    /// taken over the unbounded parameterization of the population.
    pub scale: f64,
    pub floor: f64,
}

impl Default for MutationConfig {
    fn default() -> Self {
        MutationConfig {
            n_steps: 5,
            n_steps_init: 10,
            scale: 2.38 * 2.38 / 3.0,
            floor: 1e-8,
        }
    }
}

/// Tuning for the posterior pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlsmcOptions {
    pub mutation: MutationConfig,
    /// Floor on every level's particle count.
    pub n_floor: usize,
    pub rates: RateTriple,
    /// Multiplies h_L^alpha in the stopping rule for the finest level.
    pub bias_constant: f64,
    /// Multiplies the particle-count formula; calibrate_mlsmc sets it from
    /// a pilot variance.
    pub scale_constant: f64,
    /// Bootstrap replicates behind the reported standard error.
    pub bootstrap_b: usize,
}

impl Default for MlsmcOptions {
    fn default() -> Self {
        MlsmcOptions {
            mutation: MutationConfig::default(),
            n_floor: 16,
            rates: RateTriple::default(),
            bias_constant: 1.0,
            scale_constant: 1.0,
            bootstrap_b: 200,
        }
    }
}

/// Data misfit Phi = sum_i (y_i - g_i)^2 / (2 sigma2).
pub fn phi(obs: &[f64], data: &Observations) -> Result<f64> {
    if obs.len() != data.y.len() {
        return Err(Error::DimensionMismatch { got: obs.len(), expected: data.y.len() });
    }
    let ss: f64 = obs.iter().zip(&data.y).map(|(g, y)| (y - g) * (y - g)).sum();
    Ok(ss / (2.0 * data.sigma2))
}

/// Log incremental weight log G_l = Phi_l - Phi_{l+1} of one particle.
pub fn log_weight(p: &Particle) -> f64 {
    let next = p.next.as_ref().expect("particle carries no next-level evaluation");
    p.cur.phi - next.phi
}

fn evaluate<M: ForwardModel>(
    model: &M,
    params: &KernelParams,
    level: usize,
    data: &Observations,
) -> Result<PotentialEval> {
    let out = model.forward(params, level)?;
    let phi = phi(&out.obs, data)?;
    Ok(PotentialEval {
        params: params.clone(),
        level,
        obs: out.obs,
        phi,
        qoi: out.qoi,
        cost: out.cost,
    })
}

/// Systematic resampling: one uniform stratifies all slots, so the copy
/// count of particle i is floor(n_out w_i) or ceil(n_out w_i). With uniform
/// weights and n_out equal to the population size it returns the identity.
pub fn resample_systematic<R: Rng + ?Sized>(
    weights: &[f64],
    n_out: usize,
    rng: &mut R,
) -> Vec<usize> {
    assert!(!weights.is_empty() && n_out > 0);
    let u: f64 = rng.random::<f64>();
    let mut ancestors = Vec::with_capacity(n_out);
    let mut cum = 0.0;
    let mut i = 0usize;
    for s in 0..n_out {
        let target = (s as f64 + u) / n_out as f64;
        while cum + weights[i] <= target && i + 1 < weights.len() {
            cum += weights[i];
            i += 1;
        }
        ancestors.push(i);
    }
    ancestors
}

/// Diagnostics of one rejuvenation pass.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MutationReport {
    /// Accepted proposals over all particles and sweeps.
    pub acceptance: f64,
    pub cost: f64,
}

/// Runs `n_steps` random-walk Metropolis sweeps on every state, leaving the
/// tempered posterior prior(dl) exp(-Phi_level) invariant. Proposals walk
/// the unbounded coordinates with a covariance fitted to the population;
/// each proposal costs one forward solve at the states' level.
pub fn mutate<M: ForwardModel>(
    model: &M,
    states: &mut [PotentialEval],
    data: &Observations,
    n_steps: usize,
    cfg: &MutationConfig,
    seed: u64,
    stream_tag: u64,
) -> Result<MutationReport> {
    use nalgebra::{Matrix3, Vector3};

    let prior = model.prior();
    let level = states[0].level;
    let n = states.len();

    let coords: Vec<Vector3<f64>> = states
        .iter()
        .map(|s| prior.to_unbounded(&s.params).map(Vector3::from))
        .collect::<Result<_>>()?;
    let mean: Vector3<f64> = coords.iter().sum::<Vector3<f64>>() / n as f64;
    let mut cov = Matrix3::zeros();
    for u in &coords {
        let d = u - mean;
        cov += d * d.transpose();
    }
    cov /= (n as f64 - 1.0).max(1.0);
    let proposal = (cov + Matrix3::identity() * cfg.floor) * cfg.scale;
    let chol = proposal
        .cholesky()
        .expect("ridged proposal covariance is positive definite");
    let step = chol.l();

    let moved: Result<Vec<(PotentialEval, usize)>> = states
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = substream(seed, Purpose::Mutation, &[stream_tag, i as u64]);
            let mut cur = s.clone();
            let mut u = Vector3::from(prior.to_unbounded(&cur.params)?);
            let mut log_tgt = prior.logpdf(&cur.params)
                + prior.unbounded_log_jacobian(u.as_ref() as &[f64; 3])
                - cur.phi;
            let mut accepts = 0usize;
            for _ in 0..n_steps {
                let z = Vector3::new(
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                );
                let cand_u = u + step * z;
                let cand_params = prior.from_unbounded(cand_u.as_ref() as &[f64; 3]);
                let cand = evaluate(model, &cand_params, level, data)?;
                let cand_tgt = prior.logpdf(&cand_params)
                    + prior.unbounded_log_jacobian(cand_u.as_ref() as &[f64; 3])
                    - cand.phi;
                if rng.random::<f64>().ln() < cand_tgt - log_tgt {
                    cur = cand;
                    u = cand_u;
                    log_tgt = cand_tgt;
                    accepts += 1;
                }
            }
            Ok((cur, accepts))
        })
        .collect();
    let moved = moved?;

    let total_accepts: usize = moved.iter().map(|(_, a)| a).sum();
    let cost = (n * n_steps) as f64 * model.solve_cost(level);
    for (slot, (state, _)) in states.iter_mut().zip(moved) {
        *slot = state;
    }
    Ok(MutationReport {
        acceptance: total_accepts as f64 / (n * n_steps) as f64,
        cost,
    })
}

/// Normalized weights, effective sample size, and the log mean weight of a
/// vector of log weights. Sums run in index order.
fn normalize_logs(logs: &[f64]) -> (Vec<f64>, f64, f64) {
    let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = logs.iter().map(|&l| (l - m).exp()).collect();
    let total: f64 = scaled.iter().sum();
    let sq: f64 = scaled.iter().map(|s| s * s).sum();
    let ess = total * total / sq;
    let log_mean = m + (total / logs.len() as f64).ln();
    (scaled.iter().map(|s| s / total).collect(), ess, log_mean)
}

/// How the level-0 population was seeded.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct InitDiag {
    /// Effective sample size of the prior-to-eta_0 importance weights.
    pub ess: f64,
    pub acceptance: f64,
    /// Log of the mean prior weight exp(-Phi_0), the first factor of Z.
    pub log_z0: f64,
    pub cost: f64,
}

/// Seeds the level-0 population: prior draws, importance weighting by
/// exp(-Phi_0), systematic resampling, then a longer rejuvenation pass.
/// The result is equally weighted.
pub fn init_level0<M: ForwardModel>(
    model: &M,
    data: &Observations,
    n0: usize,
    with_next: bool,
    opts: &MlsmcOptions,
    seed: u64,
) -> Result<(Ensemble, InitDiag)> {
    assert!(n0 >= 2);
    let evals: Result<Vec<PotentialEval>> = (0..n0 as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(seed, Purpose::PriorDraw, &[i]);
            let params = model.prior().sample(&mut rng);
            evaluate(model, &params, 0, data)
        })
        .collect();
    let evals = evals?;
    let mut cost: f64 = evals.iter().map(|e| e.cost).sum();

    let logs: Vec<f64> = evals.iter().map(|e| -e.phi).collect();
    let (weights, ess, log_z0) = normalize_logs(&logs);
    if !ess.is_finite() || ess < 2.0 {
        let min_phi = evals.iter().map(|e| e.phi).fold(f64::INFINITY, f64::min);
        return Err(Error::Degenerate { ess, min_phi });
    }

    let mut rng = substream(seed, Purpose::InitResample, &[]);
    let ancestors = resample_systematic(&weights, n0, &mut rng);
    let mut states: Vec<PotentialEval> =
        ancestors.into_iter().map(|a| evals[a].clone()).collect();

    let report = mutate(
        model,
        &mut states,
        data,
        opts.mutation.n_steps_init,
        &opts.mutation,
        seed,
        0,
    )?;
    cost += report.cost;

    let particles = attach_next(model, data, states, with_next, &mut cost)?;
    let ensemble = Ensemble {
        level: 0,
        weights: vec![1.0 / n0 as f64; n0],
        ess: n0 as f64,
        particles,
    };
    Ok((ensemble, InitDiag { ess, acceptance: report.acceptance, log_z0, cost }))
}

fn attach_next<M: ForwardModel>(
    model: &M,
    data: &Observations,
    states: Vec<PotentialEval>,
    with_next: bool,
    cost: &mut f64,
) -> Result<Vec<Particle>> {
    if !with_next {
        return Ok(states.into_iter().map(|cur| Particle { cur, next: None }).collect());
    }
    let level = states[0].level;
    let nexts: Result<Vec<PotentialEval>> = states
        .par_iter()
        .map(|s| evaluate(model, &s.params, level + 1, data))
        .collect();
    let nexts = nexts?;
    *cost += nexts.iter().map(|e| e.cost).sum::<f64>();
    Ok(states
        .into_iter()
        .zip(nexts)
        .map(|(cur, next)| Particle { cur, next: Some(next) })
        .collect())
}

/// Smallest level with bias_constant * h^alpha at or below eps.
fn finest_level_for<M: ForwardModel>(
    model: &M,
    eps: f64,
    bias_constant: f64,
    alpha: f64,
) -> Result<usize> {
    assert!(eps > 0.0 && eps.is_finite(), "accuracy target must be positive");
    match (0..=model.max_level())
        .find(|&l| bias_constant * model.spacing(l).powf(alpha) <= eps)
    {
        Some(l) => Ok(l),
        None => {
            let worst = bias_constant * model.spacing(model.max_level()).powf(alpha);
            let extra = ((worst / eps).log2() / alpha).ceil() as usize;
            Err(Error::Infeasible {
                eps,
                needed: model.max_level() + extra,
                max_level: model.max_level(),
            })
        }
    }
}

/// Picks the finest level from bias_constant * h_L^alpha <= eps and sizes
/// the populations as N_l = ceil(scale eps^-2 K_L h_l^(beta+zeta)/2) with
/// K_L = sum_l h_l^(beta-zeta)/2, floored and never increasing.
pub fn allocate_mlsmc<M: ForwardModel>(
    model: &M,
    eps: f64,
    opts: &MlsmcOptions,
) -> Result<LevelSchedule> {
    let rates = opts.rates;
    let finest = finest_level_for(model, eps, opts.bias_constant, rates.alpha)?;

    let half_sum = 0.5 * (rates.beta - rates.zeta);
    let half_cost = 0.5 * (rates.beta + rates.zeta);
    let k_l: f64 = (0..=finest).map(|l| model.spacing(l).powf(half_sum)).sum();
    let mut counts = Vec::with_capacity(finest + 1);
    for l in 0..=finest {
        let ideal = opts.scale_constant * eps.powi(-2) * k_l * model.spacing(l).powf(half_cost);
        let mut n = (ideal.ceil() as usize).max(opts.n_floor).max(2);
        if let Some(&prev) = counts.last() {
            n = n.min(prev);
        }
        counts.push(n);
    }
    Ok(LevelSchedule::new(eps, rates, counts))
}

/// Replaces the allocation constants with pilot-calibrated values: the bias
/// constant from Richardson extrapolation of coupled prior increments, the
/// scale constant so that level 0 receives the plain Monte Carlo count
/// 2 Var(Q_0) eps^-2.
pub fn calibrate_mlsmc<M: ForwardModel>(
    model: &M,
    eps: f64,
    opts: &MlsmcOptions,
    n_pilot: usize,
    seed: u64,
) -> Result<MlsmcOptions> {
    let stats = crate::mlmc::pilot(model, 1, n_pilot, seed)?;
    let rates = opts.rates;
    let h1 = model.spacing(1);
    let bias_constant = stats.levels[1].mean.abs()
        / (h1.powf(rates.alpha) * (1.0 - 0.5f64.powf(rates.alpha)));
    let v0 = stats.levels[0].var.max(f64::MIN_POSITIVE);

    let finest = finest_level_for(model, eps, bias_constant, rates.alpha)?;
    let half_sum = 0.5 * (rates.beta - rates.zeta);
    let half_cost = 0.5 * (rates.beta + rates.zeta);
    let k_l: f64 = (0..=finest).map(|l| model.spacing(l).powf(half_sum)).sum();
    let scale_constant = 2.0 * v0 / (k_l * model.spacing(0).powf(half_cost));
    Ok(MlsmcOptions { bias_constant, scale_constant, ..*opts })
}

/// One level transition's diagnostics, recorded on the population that
/// computed the correction into the next level.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LevelDiag {
    /// Population level l; the row describes the l -> l+1 step.
    pub level: usize,
    pub n: usize,
    /// Effective sample size of the G_l weights before resampling.
    pub ess: f64,
    /// Rejuvenation acceptance rate that produced this population.
    pub acceptance: f64,
    pub log_weight_min: f64,
    pub log_weight_max: f64,
    /// Estimated correction eta_l(Q_{l+1} G_l)/eta_l(G_l) - eta_l(Q_l).
    pub increment: f64,
}

/// Full output of one posterior estimator run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlsmcReport {
    /// Multilevel estimate of the posterior QoI mean at the finest level.
    pub value: f64,
    /// Log of the normalizing-constant estimate, the product of mean
    /// weights across the ladder starting from the prior stage.
    pub log_z: f64,
    pub init: InitDiag,
    /// One row per population level 0..L-1; empty when L = 0.
    pub levels: Vec<LevelDiag>,
    pub schedule: LevelSchedule,
    /// Linearized variance of the estimator, summed over stages.
    pub variance_proxy: f64,
    /// Bootstrap standard error over per-level resamples.
    pub bootstrap_se: f64,
    pub total_cost: f64,
    pub seed: u64,
}

struct Stage {
    log_g: Vec<f64>,
    qoi_cur: Vec<f64>,
    qoi_next: Vec<f64>,
}

/// Correction estimate on one population. The ratio and the base term use
/// the same summation order, so a level-independent forward map yields an
/// exactly zero correction.
fn stage_increment(st: &Stage) -> f64 {
    let m = st.log_g.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut wsum = 0.0;
    let mut wq = 0.0;
    let mut base = 0.0;
    for i in 0..st.log_g.len() {
        let s = (st.log_g[i] - m).exp();
        wsum += s;
        wq += s * st.qoi_next[i];
        base += st.qoi_cur[i];
    }
    wq / wsum - base / st.log_g.len() as f64
}

/// Delta-method variance of one correction term, over particle index.
fn stage_variance(st: &Stage) -> f64 {
    let n = st.log_g.len() as f64;
    let m = st.log_g.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let gs: Vec<f64> = st.log_g.iter().map(|&l| (l - m).exp()).collect();
    let g_mean = gs.iter().sum::<f64>() / n;
    let ratio = gs.iter().zip(&st.qoi_next).map(|(g, q)| g * q).sum::<f64>()
        / gs.iter().sum::<f64>();
    let base = st.qoi_cur.iter().sum::<f64>() / n;
    let mut acc = 0.0;
    for i in 0..st.log_g.len() {
        let infl = gs[i] * (st.qoi_next[i] - ratio) / g_mean - (st.qoi_cur[i] - base);
        acc += infl * infl;
    }
    acc / (n - 1.0) / n
}

fn ensemble_stage(ens: &Ensemble) -> Stage {
    Stage {
        log_g: ens.particles.iter().map(log_weight).collect(),
        qoi_cur: ens.particles.iter().map(|p| p.cur.qoi).collect(),
        qoi_next: ens
            .particles
            .iter()
            .map(|p| p.next.as_ref().expect("transition needs next-level evals").qoi)
            .collect(),
    }
}

fn check_ess(ens: &Ensemble, ess: f64) -> Result<()> {
    if !ess.is_finite() || ess < 2.0 {
        let min_phi = ens
            .particles
            .iter()
            .map(|p| p.next.as_ref().map_or(p.cur.phi, |n| n.phi))
            .fold(f64::INFINITY, f64::min);
        return Err(Error::Degenerate { ess, min_phi });
    }
    Ok(())
}

/// Builds the next population: resample `n_out` ancestors by the G_l
/// weights, rejuvenate at the finer level, and cache its next evaluation
/// when another transition follows.
fn advance<M: ForwardModel>(
    model: &M,
    data: &Observations,
    ens: &Ensemble,
    weights: &[f64],
    n_out: usize,
    with_next: bool,
    opts: &MlsmcOptions,
    seed: u64,
) -> Result<(Ensemble, MutationReport, f64)> {
    let new_level = ens.level + 1;
    let mut rng = substream(seed, Purpose::Resample, &[new_level as u64]);
    let ancestors = resample_systematic(weights, n_out, &mut rng);
    let mut states: Vec<PotentialEval> = ancestors
        .into_iter()
        .map(|a| {
            ens.particles[a]
                .next
                .clone()
                .expect("transition needs next-level evals")
        })
        .collect();

    let report = mutate(
        model,
        &mut states,
        data,
        opts.mutation.n_steps,
        &opts.mutation,
        seed,
        new_level as u64,
    )?;
    let mut cost = report.cost;
    let particles = attach_next(model, data, states, with_next, &mut cost)?;
    let ensemble = Ensemble {
        level: new_level,
        weights: vec![1.0 / n_out as f64; n_out],
        ess: n_out as f64,
        particles,
    };
    Ok((ensemble, report, cost))
}

/// Runs the multilevel sampler over a schedule. Population l holds
/// counts[l] particles; the correction into level l+1 is computed on it,
/// then the population is resampled and rejuvenated. With L = 0 the value
/// is the plain eta_0 average.
pub fn run_mlsmc<M: ForwardModel>(
    model: &M,
    data: &Observations,
    schedule: &LevelSchedule,
    opts: &MlsmcOptions,
    seed: u64,
) -> Result<MlsmcReport> {
    let l_max = schedule.finest_level();
    let (mut ens, init) = init_level0(model, data, schedule.counts[0], l_max >= 1, opts, seed)?;
    let mut total_cost = init.cost;
    let mut log_z = init.log_z0;
    let mut acceptance = init.acceptance;

    let n0 = ens.particles.len() as f64;
    let eta0: f64 = ens.particles.iter().map(|p| p.cur.qoi).sum::<f64>() / n0;
    let eta0_var = ens
        .particles
        .iter()
        .map(|p| (p.cur.qoi - eta0) * (p.cur.qoi - eta0))
        .sum::<f64>()
        / (n0 - 1.0).max(1.0);
    let mut value = eta0;
    let mut variance_proxy = eta0_var / n0;

    let mut stages: Vec<Stage> = Vec::with_capacity(l_max);
    let mut rows: Vec<LevelDiag> = Vec::with_capacity(l_max);

    for l in 0..l_max {
        let stage = ensemble_stage(&ens);
        let (weights, ess, log_mean_g) = normalize_logs(&stage.log_g);
        check_ess(&ens, ess)?;
        let increment = stage_increment(&stage);
        value += increment;
        variance_proxy += stage_variance(&stage);
        log_z += log_mean_g;
        let lw_min = stage.log_g.iter().cloned().fold(f64::INFINITY, f64::min);
        let lw_max = stage.log_g.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        rows.push(LevelDiag {
            level: l,
            n: ens.particles.len(),
            ess,
            acceptance,
            log_weight_min: lw_min,
            log_weight_max: lw_max,
            increment,
        });
        stages.push(stage);

        if l + 1 < l_max {
            let (next_ens, report, cost) =
                advance(model, data, &ens, &weights, schedule.counts[l + 1], true, opts, seed)?;
            ens = next_ens;
            acceptance = report.acceptance;
            total_cost += cost;
        }
    }

    let bootstrap_se = bootstrap_se(&stages, opts.bootstrap_b, seed);
    Ok(MlsmcReport {
        value,
        log_z,
        init,
        levels: rows,
        schedule: schedule.clone(),
        variance_proxy,
        bootstrap_se,
        total_cost,
        seed,
    })
}

/// Bootstrap standard error of the multilevel value: every stage is
/// resampled independently, preserving the coupling between a stage's
/// ratio and base terms. Stage 0's resample also re-evaluates the eta_0
/// average, which shares that population.
fn bootstrap_se(stages: &[Stage], b: usize, seed: u64) -> f64 {
    if b < 2 || stages.is_empty() {
        return 0.0;
    }
    let mut totals = vec![0.0f64; b];
    for (l, stage) in stages.iter().enumerate() {
        let n = stage.log_g.len();
        let mut rng = substream(seed, Purpose::Bootstrap, &[l as u64]);
        for t in totals.iter_mut() {
            let mut re = Stage {
                log_g: Vec::with_capacity(n),
                qoi_cur: Vec::with_capacity(n),
                qoi_next: Vec::with_capacity(n),
            };
            for _ in 0..n {
                let j = rng.random_range(0..n);
                re.log_g.push(stage.log_g[j]);
                re.qoi_cur.push(stage.qoi_cur[j]);
                re.qoi_next.push(stage.qoi_next[j]);
            }
            *t += re.stage_total(l == 0);
        }
    }
    let mean = totals.iter().sum::<f64>() / b as f64;
    (totals.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / (b as f64 - 1.0)).sqrt()
}

impl Stage {
    /// Correction term of this stage, plus the eta_0 average when the
    /// stage owns the base population.
    fn stage_total(&self, with_eta0: bool) -> f64 {
        let inc = stage_increment(self);
        if with_eta0 {
            inc + self.qoi_cur.iter().sum::<f64>() / self.qoi_cur.len() as f64
        } else {
            inc
        }
    }
}

/// Single-level baseline: the same ladder of weight/resample/rejuvenate
/// steps with a constant population size, estimating eta_L(Q_L) directly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SmcReport {
    pub value: f64,
    pub level: usize,
    pub n: usize,
    pub total_cost: f64,
    pub seed: u64,
}

pub fn run_single_level<M: ForwardModel>(
    model: &M,
    data: &Observations,
    level: usize,
    n: usize,
    opts: &MlsmcOptions,
    seed: u64,
) -> Result<SmcReport> {
    let (mut ens, init) = init_level0(model, data, n, level >= 1, opts, seed)?;
    let mut total_cost = init.cost;
    for l in 0..level {
        let stage_logs: Vec<f64> = ens.particles.iter().map(log_weight).collect();
        let (weights, ess, _) = normalize_logs(&stage_logs);
        check_ess(&ens, ess)?;
        let with_next = l + 1 < level;
        let (next_ens, _, cost) =
            advance(model, data, &ens, &weights, n, with_next, opts, seed)?;
        ens = next_ens;
        total_cost += cost;
    }
    let value = ens.particles.iter().map(|p| p.cur.qoi).sum::<f64>() / n as f64;
    Ok(SmcReport { value, level, n, total_cost, seed })
}

/// Modeled cost of carrying one particle from the prior stage to `level`,
/// including its share of rejuvenation solves and next-level caches.
pub fn chain_cost_per_particle<M: ForwardModel>(
    model: &M,
    level: usize,
    opts: &MlsmcOptions,
) -> f64 {
    let mut cost = model.solve_cost(0) * (1.0 + opts.mutation.n_steps_init as f64);
    if level >= 1 {
        cost += model.solve_cost(1);
    }
    for l in 1..=level {
        cost += model.solve_cost(l) * opts.mutation.n_steps as f64;
        if l < level {
            cost += model.solve_cost(l + 1);
        }
    }
    cost
}

/// Population size for a single-level run matching a cost budget.
pub fn matched_single_level_n<M: ForwardModel>(
    model: &M,
    level: usize,
    budget: f64,
    opts: &MlsmcOptions,
) -> usize {
    let per = chain_cost_per_particle(model, level, opts);
    ((budget / per).floor() as usize).max(opts.n_floor)
}

/// Repeats the posterior pipeline per accuracy target and scores it
/// against a reference. Calibration runs once per row, so repeats share
/// their schedule and differ only in sample streams.
pub fn mlsmc_mse_study<M: ForwardModel>(
    model: &M,
    data: &Observations,
    eps_list: &[f64],
    n_repeats: usize,
    reference: f64,
    opts: &MlsmcOptions,
    n_pilot: usize,
    seed: u64,
) -> Result<Vec<crate::mlmc::MseRow>> {
    assert!(n_repeats >= 1);
    let mut rows = Vec::with_capacity(eps_list.len());
    for (row, &eps) in eps_list.iter().enumerate() {
        let calibrated = calibrate_mlsmc(model, eps, opts, n_pilot, seed)?;
        let schedule = allocate_mlsmc(model, eps, &calibrated)?;
        let mut sq_sum = 0.0;
        let mut cost_sum = 0.0;
        for rep in 0..n_repeats {
            let run_seed =
                substream(seed, Purpose::Study, &[row as u64, rep as u64]).random::<u64>();
            let report = run_mlsmc(model, data, &schedule, &calibrated, run_seed)?;
            sq_sum += (report.value - reference) * (report.value - reference);
            cost_sum += report.total_cost;
        }
        rows.push(crate::mlmc::MseRow {
            eps,
            mean_cost: cost_sum / n_repeats as f64,
            mse: sq_sum / n_repeats as f64,
        });
    }
    Ok(rows)
}

/// Calibrate, allocate, run: the full posterior pipeline for one eps.
pub fn mlsmc_pipeline<M: ForwardModel>(
    model: &M,
    data: &Observations,
    eps: f64,
    opts: &MlsmcOptions,
    n_pilot: usize,
    seed: u64,
) -> Result<MlsmcReport> {
    let calibrated = calibrate_mlsmc(model, eps, opts, n_pilot, seed)?;
    let schedule = allocate_mlsmc(model, eps, &calibrated)?;
    run_mlsmc(model, data, &schedule, &calibrated, seed)
}
