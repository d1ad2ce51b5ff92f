//! Full-path Monte Carlo estimators for the up-and-out call: the discretely
//! monitored baseline, the Brownian-bridge estimator and the one-step-survival
//! Brownian-bridge estimator.
//!
//! Path `i` of a run draws its uniforms from stream `stream_base + i` of the
//! run seed, one uniform per time step. Paths are grouped in fixed chunks whose
//! partial moments are merged in chunk order, so a report does not depend on
//! the number of worker threads.

use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{Model, OptionSpec};
use crate::rng::{clamped_quantile, RngStream, UniformSource};
use crate::schemes::{
    bb_crossing_prob, milstein_step, oss_crossing_prob_unchecked, oss_step_with, survival_split, Branch, Scheme,
    StepInput,
};
use crate::stats::RunningStats;

/// Paths per chunk. Part of the reproducibility contract: changing it changes
/// the floating-point merge order.
pub const CHUNK_PATHS: u64 = 1024;

/// Survival weights below this are treated as a knockout.
const KNOCKOUT_WEIGHT: f64 = 1e-300;

/// Survival probabilities below this switch the weight product to log space.
const LOG_SPACE_THRESHOLD: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub n_steps: usize,
    pub n_paths: u64,
    pub scheme: Scheme,
    pub seed: u64,
    /// Multiply payoffs by `exp(-r (T - t0))`.
    pub discount: bool,
    /// Stream index of the first path.
    pub stream_base: u64,
    /// Worker threads; `None` uses the global rayon pool.
    pub threads: Option<usize>,
}

impl SimConfig {
    pub fn new(n_steps: usize, n_paths: u64) -> Result<Self> {
        let cfg = Self {
            n_steps,
            n_paths,
            scheme: Scheme::Milstein,
            seed: 0,
            discount: true,
            stream_base: 0,
            threads: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_scheme(mut self, scheme: Scheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn with_discount(mut self, discount: bool) -> Self {
        self.discount = discount;
        self
    }

    pub fn with_threads(mut self, threads: Option<usize>) -> Self {
        self.threads = threads;
        self
    }

    pub fn with_stream_base(mut self, base: u64) -> Self {
        self.stream_base = base;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::invalid("n_steps", "must be at least 1"));
        }
        if self.n_paths == 0 {
            return Err(Error::invalid("n_paths", "must be at least 1"));
        }
        if self.threads == Some(0) {
            return Err(Error::invalid("threads", "must be at least 1"));
        }
        Ok(())
    }

    pub fn step_size(&self, opt: &OptionSpec) -> f64 {
        opt.tenor() / self.n_steps as f64
    }
}

/// Event counters collected along the simulated paths.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Diagnostics {
    /// Quantile arguments pushed back into the representable open interval.
    pub clamped_quantiles: u64,
    /// Steps whose survival set had zero mass.
    pub degenerate_survival: u64,
    /// Paths stopped early because the survival weight vanished.
    pub early_knockouts: u64,
    /// Paths whose weight product moved to log space.
    pub log_space_paths: u64,
}

impl Diagnostics {
    pub fn merge(&mut self, other: &Diagnostics) {
        self.clamped_quantiles += other.clamped_quantiles;
        self.degenerate_survival += other.degenerate_survival;
        self.early_knockouts += other.early_knockouts;
        self.log_space_paths += other.log_space_paths;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorReport {
    pub mean: f64,
    pub sample_variance: f64,
    pub std_error: f64,
    pub n_paths: u64,
    pub n_steps: usize,
    pub wall_time: Duration,
    pub diagnostics: Diagnostics,
}

impl EstimatorReport {
    pub fn from_stats(stats: &RunningStats, n_steps: usize, wall_time: Duration, diagnostics: Diagnostics) -> Self {
        Self {
            mean: stats.mean(),
            sample_variance: stats.variance(),
            std_error: stats.std_error(),
            n_paths: stats.count(),
            n_steps,
            wall_time,
            diagnostics,
        }
    }

    /// Pools two reports over disjoint path sets of the same grid.
    pub fn merge(&mut self, other: &EstimatorReport) {
        let moments = |r: &EstimatorReport| RunningStats::from_moments(r.n_paths, r.mean, r.sample_variance);
        let mut a = moments(self);
        a.merge(&moments(other));
        self.mean = a.mean();
        self.sample_variance = a.variance();
        self.std_error = a.std_error();
        self.n_paths = a.count();
        self.wall_time += other.wall_time;
        self.diagnostics.merge(&other.diagnostics);
    }

    /// Same numbers, ignoring wall time.
    pub fn same_estimate(&self, other: &EstimatorReport) -> bool {
        self.mean.to_bits() == other.mean.to_bits()
            && self.sample_variance.to_bits() == other.sample_variance.to_bits()
            && self.std_error.to_bits() == other.std_error.to_bits()
            && self.n_paths == other.n_paths
            && self.n_steps == other.n_steps
            && self.diagnostics == other.diagnostics
    }
}

/// Runs `kernel` once per path and accumulates the `width` values it writes.
///
/// The kernel receives the path's own stream. Errors are reported for the
/// first failing chunk in chunk order.
pub fn simulate<K>(
    seed: u64,
    stream_base: u64,
    n_paths: u64,
    width: usize,
    threads: Option<usize>,
    kernel: K,
) -> Result<(Vec<RunningStats>, Diagnostics)>
where
    K: Fn(&mut RngStream, &mut [f64], &mut Diagnostics) -> Result<()> + Sync,
{
    let n_chunks = n_paths.div_ceil(CHUNK_PATHS);
    let run_chunk = |c: u64| -> Result<(Vec<RunningStats>, Diagnostics)> {
        let mut stats = vec![RunningStats::new(); width];
        let mut diag = Diagnostics::default();
        let mut out = vec![0.0; width];
        let first = c * CHUNK_PATHS;
        let last = (first + CHUNK_PATHS).min(n_paths);
        for i in first..last {
            let mut rng = RngStream::new(seed, stream_base + i);
            kernel(&mut rng, &mut out, &mut diag)?;
            for (s, &x) in stats.iter_mut().zip(&out) {
                s.push(x);
            }
        }
        Ok((stats, diag))
    };
    let run_all = || (0..n_chunks).into_par_iter().map(run_chunk).collect::<Vec<_>>();
    let parts = match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::invalid("threads", e.to_string()))?
            .install(run_all),
        None => run_all(),
    };
    let mut stats = vec![RunningStats::new(); width];
    let mut diag = Diagnostics::default();
    for part in parts {
        let (s, d) = part?;
        for (acc, x) in stats.iter_mut().zip(&s) {
            acc.merge(x);
        }
        diag.merge(&d);
    }
    Ok((stats, diag))
}

/// Discount factor applied to payoffs under `cfg`.
pub fn discount_factor<M: Model>(model: &M, opt: &OptionSpec, cfg: &SimConfig) -> f64 {
    if cfg.discount {
        (-model.rate() * opt.tenor()).exp()
    } else {
        1.0
    }
}

fn run_scalar<K>(cfg: &SimConfig, disc: f64, kernel: K) -> Result<EstimatorReport>
where
    K: Fn(&mut RngStream, &mut Diagnostics) -> Result<f64> + Sync,
{
    cfg.validate()?;
    let start = Instant::now();
    let (stats, diag) = simulate(cfg.seed, cfg.stream_base, cfg.n_paths, 1, cfg.threads, |rng, out, d| {
        out[0] = disc * kernel(rng, d)?;
        Ok(())
    })?;
    Ok(EstimatorReport::from_stats(&stats[0], cfg.n_steps, start.elapsed(), diag))
}

/// Plain European call under the same scheme and streams, ignoring the barrier.
pub fn price_european<M: Model>(model: &M, opt: &OptionSpec, cfg: &SimConfig) -> Result<EstimatorReport> {
    opt.validate()?;
    let disc = discount_factor(model, opt, cfg);
    run_scalar(cfg, disc, |rng, _| Ok(european_path(model, opt, cfg.scheme, cfg.n_steps, rng)))
}

pub fn price_discrete_baseline<M: Model>(model: &M, opt: &OptionSpec, cfg: &SimConfig) -> Result<EstimatorReport> {
    opt.validate()?;
    let disc = discount_factor(model, opt, cfg);
    run_scalar(cfg, disc, |rng, d| Ok(discrete_path(model, opt, cfg.scheme, cfg.n_steps, rng, d)))
}

pub fn price_bb<M: Model>(model: &M, opt: &OptionSpec, cfg: &SimConfig) -> Result<EstimatorReport> {
    opt.validate()?;
    let disc = discount_factor(model, opt, cfg);
    run_scalar(cfg, disc, |rng, d| Ok(bb_path(model, opt, cfg.scheme, cfg.n_steps, rng, d)))
}

pub fn price_oss_bb<M: Model>(model: &M, opt: &OptionSpec, cfg: &SimConfig) -> Result<EstimatorReport> {
    opt.validate()?;
    if !(opt.spot < opt.barrier) {
        return Err(Error::AboveBarrier {
            state: opt.spot,
            barrier: opt.barrier,
        });
    }
    let disc = discount_factor(model, opt, cfg);
    run_scalar(cfg, disc, |rng, d| oss_path(model, opt, cfg.scheme, cfg.n_steps, rng, d))
}

/// Which price estimator to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PriceEstimator {
    European,
    Baseline,
    Bb,
    OssBb,
}

impl PriceEstimator {
    pub fn name(&self) -> &'static str {
        match self {
            PriceEstimator::European => "european",
            PriceEstimator::Baseline => "baseline",
            PriceEstimator::Bb => "bb",
            PriceEstimator::OssBb => "oss_bb",
        }
    }

    pub fn run<M: Model>(&self, model: &M, opt: &OptionSpec, cfg: &SimConfig) -> Result<EstimatorReport> {
        match self {
            PriceEstimator::European => price_european(model, opt, cfg),
            PriceEstimator::Baseline => price_discrete_baseline(model, opt, cfg),
            PriceEstimator::Bb => price_bb(model, opt, cfg),
            PriceEstimator::OssBb => price_oss_bb(model, opt, cfg),
        }
    }
}

impl std::str::FromStr for PriceEstimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "european" => PriceEstimator::European,
            "baseline" | "discrete" => PriceEstimator::Baseline,
            "bb" => PriceEstimator::Bb,
            "oss_bb" => PriceEstimator::OssBb,
            other => return Err(Error::invalid("estimator", format!("unknown estimator `{other}`"))),
        })
    }
}

#[inline]
fn normal_draw<U: UniformSource>(src: &mut U) -> f64 {
    clamped_quantile(src.next_uniform()).0
}

/// Undiscounted payoff `q(S_N)` of one unconstrained path.
pub fn european_path<M: Model, U: UniformSource>(
    model: &M,
    opt: &OptionSpec,
    scheme: Scheme,
    n_steps: usize,
    src: &mut U,
) -> f64 {
    let h = opt.tenor() / n_steps as f64;
    let mut s = opt.spot;
    for n in 0..n_steps {
        let t = opt.t0 + n as f64 * h;
        let inp = StepInput::new(model, s, t, h, opt.barrier, scheme);
        s = milstein_step(&inp, normal_draw(src));
    }
    opt.payoff(s)
}

/// Undiscounted payoff knocked out when any grid value exceeds the barrier.
pub fn discrete_path<M: Model, U: UniformSource>(
    model: &M,
    opt: &OptionSpec,
    scheme: Scheme,
    n_steps: usize,
    src: &mut U,
    diag: &mut Diagnostics,
) -> f64 {
    let h = opt.tenor() / n_steps as f64;
    let mut s = opt.spot;
    if s > opt.barrier {
        diag.early_knockouts += 1;
        return 0.0;
    }
    for n in 0..n_steps {
        let t = opt.t0 + n as f64 * h;
        let inp = StepInput::new(model, s, t, h, opt.barrier, scheme);
        s = milstein_step(&inp, normal_draw(src));
        if s > opt.barrier {
            diag.early_knockouts += 1;
            return 0.0;
        }
    }
    opt.payoff(s)
}

/// Undiscounted Brownian-bridge payoff `q(S_N) prod (1 - p_n)`.
pub fn bb_path<M: Model, U: UniformSource>(
    model: &M,
    opt: &OptionSpec,
    scheme: Scheme,
    n_steps: usize,
    src: &mut U,
    diag: &mut Diagnostics,
) -> f64 {
    let h = opt.tenor() / n_steps as f64;
    let mut s = opt.spot;
    let mut weight = 1.0;
    for n in 0..n_steps {
        let t = opt.t0 + n as f64 * h;
        let inp = StepInput::new(model, s, t, h, opt.barrier, scheme);
        let next = milstein_step(&inp, normal_draw(src));
        weight *= 1.0 - bb_crossing_prob(s, next, inp.coeffs.sigma, h, opt.barrier);
        if weight < KNOCKOUT_WEIGHT {
            diag.early_knockouts += 1;
            return 0.0;
        }
        s = next;
    }
    opt.payoff(s) * weight
}

/// Undiscounted one-step-survival payoff `q(S_N) prod (1 - p*_n) prod p_n`.
pub fn oss_path<M: Model, U: UniformSource>(
    model: &M,
    opt: &OptionSpec,
    scheme: Scheme,
    n_steps: usize,
    src: &mut U,
    diag: &mut Diagnostics,
) -> Result<f64> {
    let h = opt.tenor() / n_steps as f64;
    let mut s = opt.spot;
    let mut weight: f64 = 1.0;
    let mut log_weight: Option<f64> = None;
    for n in 0..n_steps {
        let t = opt.t0 + n as f64 * h;
        let inp = StepInput::new(model, s, t, h, opt.barrier, scheme);
        let split = survival_split(&inp)?;
        if split.branch == Branch::Empty || split.p <= 0.0 {
            diag.degenerate_survival += 1;
            return Ok(0.0);
        }
        let step = oss_step_with(&inp, &split, src.next_uniform())?;
        if step.clamped {
            diag.clamped_quantiles += 1;
        }
        let survive = 1.0 - oss_crossing_prob_unchecked(s, step.next, inp.coeffs.sigma, h, opt.barrier);
        match log_weight.as_mut() {
            Some(lw) => *lw += split.p.ln() + survive.ln(),
            None if split.p < LOG_SPACE_THRESHOLD => {
                diag.log_space_paths += 1;
                log_weight = Some(weight.ln() + split.p.ln() + survive.ln());
            }
            None => weight *= split.p * survive,
        }
        s = step.next;
    }
    let q = opt.payoff(s);
    Ok(match log_weight {
        Some(lw) if q > 0.0 => (q.ln() + lw).exp(),
        Some(_) => 0.0,
        None => q * weight,
    })
}
