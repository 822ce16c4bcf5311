//! Multilevel Monte Carlo estimation of prior expectations.
//!
//! The estimator telescopes E[Q_L] = E[Q_0] + sum_l E[Q_l - Q_{l-1}], with
//! both solves of an increment sharing one parameter draw. Increment
//! variance decays like h^beta while solve cost grows like h^-zeta, so
//! nearly all samples land on coarse levels. With beta > zeta the cost of
//! reaching mean-square error eps^2 scales like eps^-2, the plain Monte
//! Carlo rate without paying the fine-level bias on every sample.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ForwardModel;
use crate::rng::{substream, Purpose};

/// Assumed decay/growth exponents: bias ~ h^alpha, increment variance
/// ~ h^beta, solve cost ~ h^-zeta.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RateTriple {
    pub alpha: f64,
    pub beta: f64,
    pub zeta: f64,
}

impl Default for RateTriple {
    fn default() -> Self {
        RateTriple { alpha: 2.0, beta: 4.0, zeta: 3.0 }
    }
}

/// One coupled increment draw and the cost of the solves behind it.
#[derive(Debug, Clone, Copy)]
pub struct IncrementSample {
    pub y: f64,
    pub cost: f64,
}

/// Moments of one increment level over a batch of coupled draws.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LevelStat {
    pub level: usize,
    pub n: usize,
    /// Sample mean of Y_l.
    pub mean: f64,
    /// Unbiased sample variance of Y_l.
    pub var: f64,
    /// Cost of one coupled sample at this level.
    pub cost: f64,
}

impl LevelStat {
    /// Raw second moment of Y_l, recovered from mean and unbiased variance.
    pub fn moment2(&self) -> f64 {
        self.mean * self.mean + self.var * (self.n - 1) as f64 / self.n as f64
    }
}

/// Increment table over levels 0..=L, in level order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IncrementStats {
    pub levels: Vec<LevelStat>,
}

/// Sample counts per level for one accuracy target.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LevelSchedule {
    pub eps: f64,
    pub rates: RateTriple,
    /// counts[l] = N_l; never increasing in l.
    pub counts: Vec<usize>,
}

impl LevelSchedule {
    /// Validates the schedule shape; counts must be >= 2 and non-increasing.
    pub fn new(eps: f64, rates: RateTriple, counts: Vec<usize>) -> Self {
        assert!(!counts.is_empty(), "schedule needs at least level 0");
        assert!(
            counts.windows(2).all(|w| w[0] >= w[1]),
            "sample counts must not increase with level"
        );
        assert!(counts.iter().all(|&n| n >= 2), "variance estimates need N_l >= 2");
        LevelSchedule { eps, rates, counts }
    }

    /// Index of the finest level the schedule touches.
    pub fn finest_level(&self) -> usize {
        self.counts.len() - 1
    }

    /// Modeled cost of running the schedule once.
    pub fn total_cost<M: ForwardModel>(&self, model: &M) -> f64 {
        self.counts
            .iter()
            .enumerate()
            .map(|(l, &n)| n as f64 * coupled_cost(model, l))
            .sum()
    }
}

/// Tuning for the pilot/allocate/run pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlmcOptions {
    /// Coupled draws per pilot level.
    pub n_pilot: usize,
    /// Finest increment level the pilot probes.
    pub pilot_levels: usize,
    /// Fraction of eps granted to the discretization bias; the rest is
    /// left for sampling error.
    pub bias_fraction: f64,
    pub rates: RateTriple,
    /// Floor on every N_l so level variances stay estimable.
    pub n_min: usize,
}

impl Default for MlmcOptions {
    fn default() -> Self {
        MlmcOptions {
            n_pilot: 64,
            pilot_levels: 3,
            bias_fraction: std::f64::consts::FRAC_1_SQRT_2,
            rates: RateTriple::default(),
            n_min: 2,
        }
    }
}

fn coupled_cost<M: ForwardModel>(model: &M, level: usize) -> f64 {
    model.solve_cost(level) + if level > 0 { model.solve_cost(level - 1) } else { 0.0 }
}

/// Draws one coupled increment: Y_0 = Q_0, Y_l = Q_l - Q_{l-1} for l >= 1,
/// both solves sharing the parameter draw so the difference telescopes.
pub fn sample_increment<M, R>(model: &M, level: usize, rng: &mut R) -> Result<IncrementSample>
where
    M: ForwardModel,
    R: Rng + ?Sized,
{
    let params = model.prior().sample(rng);
    let fine = model.forward(&params, level)?;
    if level == 0 {
        return Ok(IncrementSample { y: fine.qoi, cost: fine.cost });
    }
    let coarse = model.forward(&params, level - 1)?;
    Ok(IncrementSample { y: fine.qoi - coarse.qoi, cost: fine.cost + coarse.cost })
}

/// Runs one level's batch in parallel. Each sample owns the stream
/// `(seed, purpose, level, i)`, and the reduction runs in index order, so
/// the result is independent of thread scheduling.
fn level_batch<M: ForwardModel>(
    model: &M,
    level: usize,
    n: usize,
    seed: u64,
    purpose: Purpose,
) -> Result<LevelStat> {
    let samples: Result<Vec<IncrementSample>> = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(seed, purpose, &[level as u64, i]);
            sample_increment(model, level, &mut rng)
        })
        .collect();
    let samples = samples?;

    let n_f = n as f64;
    let mean = samples.iter().map(|s| s.y).sum::<f64>() / n_f;
    let var = if n > 1 {
        samples.iter().map(|s| (s.y - mean) * (s.y - mean)).sum::<f64>() / (n_f - 1.0)
    } else {
        0.0
    };
    let cost = samples.iter().map(|s| s.cost).sum::<f64>() / n_f;
    if !(mean.is_finite() && var.is_finite()) {
        return Err(Error::NonFinite("increment batch moments"));
    }
    Ok(LevelStat { level, n, mean, var, cost })
}

/// Coupled pilot batches at levels 0..=levels, n draws each.
pub fn pilot<M: ForwardModel>(
    model: &M,
    levels: usize,
    n: usize,
    seed: u64,
) -> Result<IncrementStats> {
    assert!(levels >= 1, "the bias fit needs at least one increment level");
    assert!(n >= 50, "pilot moment estimates need n >= 50");
    let levels = (0..=levels)
        .map(|l| level_batch(model, l, n, seed, Purpose::Pilot))
        .collect::<Result<Vec<_>>>()?;
    Ok(IncrementStats { levels })
}

/// Picks the finest level from the observed bias decay and splits samples
/// by the optimal sqrt(V/C) rule.
///
/// The bias constant is Richardson-extrapolated from pilot increment means,
/// |E Y_l| = c_alpha h_l^alpha (1 - 2^-alpha), maximized over l >= 1. L is
/// the smallest level with c_alpha h_L^alpha <= bias_fraction * eps. Pilot
/// variances extrapolate at rate 2^-beta past the deepest probed level.
pub fn allocate_mlmc<M: ForwardModel>(
    model: &M,
    eps: f64,
    stats: &IncrementStats,
    opts: &MlmcOptions,
) -> Result<LevelSchedule> {
    assert!(eps > 0.0 && eps.is_finite(), "accuracy target must be positive");
    let rates = opts.rates;

    let mut c_alpha: f64 = 0.0;
    for s in stats.levels.iter().filter(|s| s.level >= 1) {
        let h = model.spacing(s.level);
        let scale = h.powf(rates.alpha) * (1.0 - 0.5f64.powf(rates.alpha));
        c_alpha = c_alpha.max(s.mean.abs() / scale);
    }

    let budget = opts.bias_fraction * eps;
    let finest = (0..=model.max_level())
        .find(|&l| c_alpha * model.spacing(l).powf(rates.alpha) <= budget);
    let finest = match finest {
        Some(l) => l,
        None => {
            // spacing halves per level, so the shortfall is log2-linear
            let worst = c_alpha * model.spacing(model.max_level()).powf(rates.alpha);
            let extra = ((worst / budget).log2() / rates.alpha).ceil() as usize;
            return Err(Error::Infeasible {
                eps,
                needed: model.max_level() + extra,
                max_level: model.max_level(),
            });
        }
    };

    let deepest = stats.levels.last().expect("pilot stats are nonempty");
    let var_at = |l: usize| -> f64 {
        match stats.levels.iter().find(|s| s.level == l) {
            Some(s) => s.var.max(0.0),
            None => {
                let gap = (l - deepest.level) as f64;
                deepest.var.max(0.0) * 0.5f64.powf(rates.beta * gap)
            }
        }
    };

    let costs: Vec<f64> = (0..=finest).map(|l| coupled_cost(model, l)).collect();
    let vars: Vec<f64> = (0..=finest).map(var_at).collect();
    let weight_sum: f64 = vars.iter().zip(&costs).map(|(v, c)| (v * c).sqrt()).sum();
    if !weight_sum.is_finite() {
        return Err(Error::NonFinite("allocation weights"));
    }

    let mut counts: Vec<usize> = Vec::with_capacity(finest + 1);
    for l in 0..=finest {
        let ideal = 2.0 * eps.powi(-2) * (vars[l] / costs[l]).sqrt() * weight_sum;
        let mut n = (ideal.ceil() as usize).max(opts.n_min);
        if let Some(&prev) = counts.last() {
            n = n.min(prev);
        }
        counts.push(n);
    }
    Ok(LevelSchedule::new(eps, rates, counts))
}

/// One estimator run with everything needed to audit it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimateReport {
    /// Telescoped estimate of E[Q_L].
    pub value: f64,
    pub schedule: LevelSchedule,
    /// Realized per-level statistics.
    pub stats: IncrementStats,
    /// Cost spent across all levels.
    pub total_cost: f64,
    /// Estimator variance estimate, sum of V_l / N_l.
    pub variance_proxy: f64,
    pub seed: u64,
}

impl EstimateReport {
    /// Standard error implied by the per-level variance estimates.
    pub fn standard_error(&self) -> f64 {
        self.variance_proxy.sqrt()
    }
}

/// Runs a schedule and sums the per-level increment means.
pub fn run_mlmc<M: ForwardModel>(
    model: &M,
    schedule: &LevelSchedule,
    seed: u64,
) -> Result<EstimateReport> {
    let mut levels = Vec::with_capacity(schedule.counts.len());
    for (l, &n) in schedule.counts.iter().enumerate() {
        levels.push(level_batch(model, l, n, seed, Purpose::Increment)?);
    }
    let value = levels.iter().map(|s| s.mean).sum();
    let variance_proxy = levels.iter().map(|s| s.var / s.n as f64).sum();
    let total_cost = levels.iter().map(|s| s.cost * s.n as f64).sum();
    Ok(EstimateReport {
        value,
        schedule: schedule.clone(),
        stats: IncrementStats { levels },
        total_cost,
        variance_proxy,
        seed,
    })
}

/// Pilot, allocate, run: the full prior-expectation pipeline for one eps.
pub fn mlmc_pipeline<M: ForwardModel>(
    model: &M,
    eps: f64,
    opts: &MlmcOptions,
    seed: u64,
) -> Result<EstimateReport> {
    let stats = pilot(model, opts.pilot_levels, opts.n_pilot, seed)?;
    let schedule = allocate_mlmc(model, eps, &stats, opts)?;
    run_mlmc(model, &schedule, seed)
}

/// One accuracy row of the cost-versus-error study.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MseRow {
    pub eps: f64,
    /// Cost per run; the schedule fixes it, so repeats agree.
    pub mean_cost: f64,
    /// Mean squared error against the reference value.
    pub mse: f64,
}

/// Repeats the pipeline per accuracy target and scores it against a
/// reference. One pilot fixes the schedule for all repeats of a row, so
/// repeats differ only in their sample streams, not in cost.
pub fn mse_study<M: ForwardModel>(
    model: &M,
    eps_list: &[f64],
    n_repeats: usize,
    reference: f64,
    opts: &MlmcOptions,
    seed: u64,
) -> Result<Vec<MseRow>> {
    assert!(n_repeats >= 1);
    let stats = pilot(model, opts.pilot_levels, opts.n_pilot, seed)?;
    let mut rows = Vec::with_capacity(eps_list.len());
    for (row, &eps) in eps_list.iter().enumerate() {
        let schedule = allocate_mlmc(model, eps, &stats, opts)?;
        let mut sq_sum = 0.0;
        let mut cost_sum = 0.0;
        for rep in 0..n_repeats {
            let run_seed =
                substream(seed, Purpose::Study, &[row as u64, rep as u64]).random::<u64>();
            let report = run_mlmc(model, &schedule, run_seed)?;
            sq_sum += (report.value - reference) * (report.value - reference);
            cost_sum += report.total_cost;
        }
        rows.push(MseRow {
            eps,
            mean_cost: cost_sum / n_repeats as f64,
            mse: sq_sum / n_repeats as f64,
        });
    }
    Ok(rows)
}
