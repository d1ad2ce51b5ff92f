//! Multilevel Monte Carlo for the one-step-survival estimator.
//!
//! Level `l` uses `N0 * 2^l` steps. Its correction `Y_l = P_l - P_{l-1}`
//! couples the fine path with a coarse path built from the same uniforms: each
//! coarse step consumes the two uniforms of the fine steps it covers and
//! splits itself into two constrained half-steps with the coefficients frozen
//! at the start of the coarse step.

use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::estimators::{discount_factor, oss_path, simulate, Diagnostics, SimConfig};
use crate::model::{Model, OptionSpec};
use crate::rng::{ReplayUniforms, UniformSource};
use crate::schemes::{sample_survival, survival_set, Branch, Scheme, StepInput};
use crate::stats::{linear_fit, RunningStats};

/// Streams of level `l >= 1` start at `l << LEVEL_STREAM_SHIFT` above the run's base.
const LEVEL_STREAM_SHIFT: u32 = 40;

#[derive(Clone, Debug, PartialEq)]
pub struct MlmcConfig {
    /// Target root-mean-square error.
    pub epsilon: f64,
    pub n0: usize,
    pub max_level: usize,
    pub initial_samples: u64,
    pub scheme: Scheme,
    pub seed: u64,
    pub discount: bool,
    pub stream_base: u64,
    pub threads: Option<usize>,
}

impl MlmcConfig {
    pub fn new(epsilon: f64) -> Result<Self> {
        let cfg = Self {
            epsilon,
            n0: 4,
            max_level: 12,
            initial_samples: 1_000,
            scheme: Scheme::Milstein,
            seed: 0,
            discount: true,
            stream_base: 0,
            threads: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid("epsilon", format!("must be positive, got {}", self.epsilon)));
        }
        if self.n0 == 0 {
            return Err(Error::invalid("n0", "must be at least 1"));
        }
        if self.initial_samples < 2 {
            return Err(Error::invalid("initial_samples", "must be at least 2"));
        }
        if self.max_level >= 24 {
            return Err(Error::invalid("max_level", "must be below 24"));
        }
        Ok(())
    }

    /// Single-level configuration of the fine grid of level `l`.
    pub fn sim_config(&self, level: usize, n_paths: u64) -> SimConfig {
        SimConfig {
            n_steps: self.n0 << level,
            n_paths,
            scheme: self.scheme,
            seed: self.seed,
            discount: self.discount,
            stream_base: self.level_stream_base(level),
            threads: self.threads,
        }
    }

    pub fn level_stream_base(&self, level: usize) -> u64 {
        if level == 0 {
            self.stream_base
        } else {
            self.stream_base + ((level as u64) << LEVEL_STREAM_SHIFT)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelStats {
    pub level: usize,
    /// Fine step width `(T - t0) / (N0 2^l)`.
    pub h: f64,
    pub samples: u64,
    /// Moments of `Y_l`.
    pub mean: f64,
    pub variance: f64,
    /// Moments of the fine estimator `P_l` alone.
    pub fine_mean: f64,
    pub fine_variance: f64,
    /// Fine steps per sample.
    pub cost_per_sample: f64,
    pub diagnostics: Diagnostics,
    pub wall_time: Duration,
}

/// Coarse path of level `l` (steps of width `2h`) driven by the fine path's
/// uniforms. Returns the undiscounted payoff.
pub fn coarse_path_oss<M: Model, U: UniformSource>(
    model: &M,
    opt: &OptionSpec,
    scheme: Scheme,
    n_coarse: usize,
    src: &mut U,
    diag: &mut Diagnostics,
) -> Result<f64> {
    let h = opt.tenor() / (2 * n_coarse) as f64;
    let sqrt_h = h.sqrt();
    let barrier = opt.barrier;
    let mut s = opt.spot;
    let mut weight = 1.0;
    for n in 0..n_coarse {
        let t = opt.t0 + (2 * n) as f64 * h;
        let inp = StepInput::new(model, s, t, h, barrier, scheme);
        if !(s < barrier) {
            return Err(Error::AboveBarrier { state: s, barrier });
        }
        let (mu, sigma) = (inp.coeffs.mu, inp.coeffs.sigma);
        let nu = sigma * inp.coeffs.sigma_prime * h;
        let (u1, u2) = (src.next_uniform(), src.next_uniform());

        let first = if barrier == f64::INFINITY {
            survival_set(0.0, 1.0, f64::NEG_INFINITY)
        } else {
            survival_set(0.5 * nu, sigma * sqrt_h, s + mu * h - 0.5 * nu - barrier)
        };
        if first.branch == Branch::Empty || first.p <= 0.0 {
            diag.degenerate_survival += 1;
            return Ok(0.0);
        }
        let (z1, c1) = sample_survival(&first, u1)?;
        let mut half = s + mu * h + sigma * sqrt_h * z1 + 0.5 * nu * (z1 * z1 - 1.0);
        if half >= barrier {
            half = barrier.next_down();
        }

        let second = if barrier == f64::INFINITY {
            survival_set(0.0, 1.0, f64::NEG_INFINITY)
        } else {
            survival_set(0.5 * nu, sigma * sqrt_h + nu * z1, half + mu * h - 0.5 * nu - barrier)
        };
        if second.branch == Branch::Empty || second.p <= 0.0 {
            diag.degenerate_survival += 1;
            return Ok(0.0);
        }
        let (z2, c2) = sample_survival(&second, u2)?;
        let mut next = half + mu * h + sigma * sqrt_h * z2 + 0.5 * nu * (2.0 * z1 * z2 + z2 * z2 - 1.0);
        if next >= barrier {
            next = barrier.next_down();
        }
        diag.clamped_quantiles += c1 as u64 + c2 as u64;

        let s2h = sigma * sigma * h;
        let survive_a = 1.0 - (-2.0 * (barrier - s) * (barrier - half) / s2h).exp();
        let survive_b = 1.0 - (-2.0 * (barrier - half) * (barrier - next) / s2h).exp();
        weight *= first.p * second.p * survive_a * survive_b;
        s = next;
    }
    Ok(opt.payoff(s) * weight)
}

/// Moments of `Y_l` from `n_paths` coupled samples drawn from streams
/// `level_stream_base(l) + offset ..`.
pub fn level_estimator<M: Model>(
    model: &M,
    opt: &OptionSpec,
    cfg: &MlmcConfig,
    level: usize,
    n_paths: u64,
    offset: u64,
) -> Result<(RunningStats, RunningStats, Diagnostics)> {
    cfg.validate()?;
    opt.validate()?;
    if !(opt.spot < opt.barrier) {
        return Err(Error::AboveBarrier {
            state: opt.spot,
            barrier: opt.barrier,
        });
    }
    let sim = cfg.sim_config(level, n_paths);
    let disc = discount_factor(model, opt, &sim);
    let n_fine = sim.n_steps;
    let base = cfg.level_stream_base(level) + offset;
    let (stats, diag) = simulate(cfg.seed, base, n_paths, 2, cfg.threads, |rng, out, d| {
        if level == 0 {
            let p = disc * oss_path(model, opt, cfg.scheme, n_fine, rng, d)?;
            out[0] = p;
            out[1] = p;
            return Ok(());
        }
        let mut u = vec![0.0; n_fine];
        rng.fill_uniform(&mut u);
        let fine = disc * oss_path(model, opt, cfg.scheme, n_fine, &mut ReplayUniforms::new(&u), d)?;
        let coarse = disc * coarse_path_oss(model, opt, cfg.scheme, n_fine / 2, &mut ReplayUniforms::new(&u), d)?;
        out[0] = fine - coarse;
        out[1] = fine;
        Ok(())
    })?;
    Ok((stats[0], stats[1], diag))
}

/// Runs level `l` with `n_paths` samples from the start of its streams.
pub fn level_stats<M: Model>(
    model: &M,
    opt: &OptionSpec,
    cfg: &MlmcConfig,
    level: usize,
    n_paths: u64,
) -> Result<LevelStats> {
    let start = Instant::now();
    let (y, fine, diag) = level_estimator(model, opt, cfg, level, n_paths, 0)?;
    Ok(assemble(opt, cfg, level, &y, &fine, diag, start.elapsed()))
}

fn assemble(
    opt: &OptionSpec,
    cfg: &MlmcConfig,
    level: usize,
    y: &RunningStats,
    fine: &RunningStats,
    diagnostics: Diagnostics,
    wall_time: Duration,
) -> LevelStats {
    let n = cfg.n0 << level;
    LevelStats {
        level,
        h: opt.tenor() / n as f64,
        samples: y.count(),
        mean: y.mean(),
        variance: y.variance(),
        fine_mean: fine.mean(),
        fine_variance: fine.variance(),
        cost_per_sample: n as f64,
        diagnostics,
        wall_time,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlmcResult {
    pub price: f64,
    pub levels: Vec<LevelStats>,
    /// Total fine steps simulated, `sum M_l N0 2^l`.
    pub total_cost: f64,
    pub epsilon: f64,
    pub wall_time: Duration,
}

impl MlmcResult {
    /// Sampling standard error of the telescoped sum.
    pub fn std_error(&self) -> f64 {
        self.levels
            .iter()
            .map(|l| l.variance / l.samples as f64)
            .sum::<f64>()
            .sqrt()
    }
}

struct LevelAccum {
    y: RunningStats,
    fine: RunningStats,
    diag: Diagnostics,
    wall: Duration,
}

/// Adaptive multilevel estimate with weak-order parameter 1: levels are added
/// until `|E[Y_L]| < epsilon / sqrt(2)` and samples are allocated so the
/// sampling variance stays below `epsilon^2 / 2`.
pub fn mlmc_price<M: Model>(model: &M, opt: &OptionSpec, cfg: &MlmcConfig) -> Result<MlmcResult> {
    cfg.validate()?;
    let start = Instant::now();
    let weak_rate = 1.0f64;
    let mut acc: Vec<LevelAccum> = Vec::new();
    let extend = |acc: &mut Vec<LevelAccum>, level: usize, extra: u64| -> Result<()> {
        let t = Instant::now();
        let drawn = acc.get(level).map_or(0, |a| a.y.count());
        let (y, fine, diag) = level_estimator(model, opt, cfg, level, extra, drawn)?;
        if level == acc.len() {
            acc.push(LevelAccum {
                y: RunningStats::new(),
                fine: RunningStats::new(),
                diag: Diagnostics::default(),
                wall: Duration::ZERO,
            });
        }
        let a = &mut acc[level];
        a.y.merge(&y);
        a.fine.merge(&fine);
        a.diag.merge(&diag);
        a.wall += t.elapsed();
        Ok(())
    };
    extend(&mut acc, 0, cfg.initial_samples)?;
    let mut top = 0;
    loop {
        let cost = |l: usize| (cfg.n0 << l) as f64;
        let root_sum: f64 = acc
            .iter()
            .enumerate()
            .map(|(l, a)| (a.y.variance() * cost(l)).sqrt())
            .sum();
        for l in 0..=top {
            let v = acc[l].y.variance();
            let target = (2.0 / (cfg.epsilon * cfg.epsilon) * (v / cost(l)).sqrt() * root_sum).ceil() as u64;
            let have = acc[l].y.count();
            if target > have {
                extend(&mut acc, l, target - have)?;
            }
        }
        let bias = acc[top].y.mean().abs() / (2f64.powf(weak_rate) - 1.0);
        if bias < cfg.epsilon / std::f64::consts::SQRT_2 {
            break;
        }
        if top == cfg.max_level {
            return Err(Error::MaxLevelExceeded(top));
        }
        top += 1;
        extend(&mut acc, top, cfg.initial_samples)?;
    }
    let levels: Vec<LevelStats> = acc
        .iter()
        .enumerate()
        .map(|(l, a)| assemble(opt, cfg, l, &a.y, &a.fine, a.diag, a.wall))
        .collect();
    let price = levels.iter().map(|l| l.mean).sum();
    let total_cost = levels.iter().map(|l| l.samples as f64 * l.cost_per_sample).sum();
    Ok(MlmcResult {
        price,
        levels,
        total_cost,
        epsilon: cfg.epsilon,
        wall_time: start.elapsed(),
    })
}

/// Decay rate `beta` from a fit of `log2 Var[Y_l]` against `l`.
pub fn variance_decay_rate(levels: &[LevelStats]) -> Option<f64> {
    let x: Vec<f64> = levels.iter().map(|l| l.level as f64).collect();
    let y: Vec<f64> = levels.iter().map(|l| l.variance.log2()).collect();
    linear_fit(&x, &y).map(|f| -f.slope)
}
