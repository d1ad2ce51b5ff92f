//! Pathwise sensitivities and common-random-number finite differences.
//!
//! Pathwise estimates propagate forward-mode tangents of every simulated
//! quantity alongside the path: the state, the survival split, the crossing
//! probability and the two weight products. Finite differences re-simulate
//! each path at bumped inputs from the same stream and difference per path,
//! so the reported variance is that of the differenced payoff.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::estimators::{bb_path, discount_factor, oss_path, simulate, Diagnostics, EstimatorReport, SimConfig};
use crate::model::{Coefficients, Component, Model, OptionSpec};
use crate::rng::{clamped_quantile, UniformSource};
use crate::schemes::{
    bb_crossing_prob, milstein_step, oss_crossing_prob_unchecked, oss_step_with, survival_split, Branch, Scheme,
    StepInput, SurvivalSplit,
};
use crate::stats::{linear_fit, LinearFit, RunningStats};

/// Tangents of one step's quantities with respect to one input.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TangentState {
    pub ds: f64,
    pub dp_minus: f64,
    pub dp: f64,
    pub dpstar: f64,
    pub dmu: f64,
    pub dsigma: f64,
    pub dsigma_prime: f64,
}

impl TangentState {
    fn seeded(component: Component) -> Self {
        Self {
            ds: if component == Component::Spot { 1.0 } else { 0.0 },
            ..Self::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GreekMethod {
    FirstPathwise,
    FirstFd,
    SecondFd,
    SecondFdOfPathwise,
}

impl GreekMethod {
    pub fn name(&self) -> &'static str {
        match self {
            GreekMethod::FirstPathwise => "first_pathwise",
            GreekMethod::FirstFd => "first_fd",
            GreekMethod::SecondFd => "second_fd",
            GreekMethod::SecondFdOfPathwise => "second_fd_of_pathwise",
        }
    }

    pub fn order(&self) -> u8 {
        match self {
            GreekMethod::FirstPathwise | GreekMethod::FirstFd => 1,
            GreekMethod::SecondFd | GreekMethod::SecondFdOfPathwise => 2,
        }
    }
}

impl std::str::FromStr for GreekMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "first_pathwise" | "pathwise" => GreekMethod::FirstPathwise,
            "first_fd" => GreekMethod::FirstFd,
            "second_fd" => GreekMethod::SecondFd,
            "second_fd_of_pathwise" => GreekMethod::SecondFdOfPathwise,
            other => return Err(Error::invalid("method", format!("unknown method `{other}`"))),
        })
    }
}

/// Estimator a sensitivity is computed from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Estimator {
    Bb,
    OssBb,
}

impl Estimator {
    pub fn name(&self) -> &'static str {
        match self {
            Estimator::Bb => "bb",
            Estimator::OssBb => "oss_bb",
        }
    }
}

impl std::str::FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bb" => Ok(Estimator::Bb),
            "oss_bb" => Ok(Estimator::OssBb),
            other => Err(Error::invalid("estimator", format!("unknown estimator `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GreekRequest {
    pub components: Vec<Component>,
    pub method: GreekMethod,
    pub estimator: Estimator,
    /// Finite-difference step per component; ignored by pathwise estimates.
    pub steps: Vec<f64>,
}

impl GreekRequest {
    pub fn validate<M: Model>(&self, model: &M) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::invalid("components", "at least one component is required"));
        }
        for c in &self.components {
            if let Component::Model(i) = c {
                if *i >= model.param_names().len() {
                    return Err(Error::UnknownComponent(format!("parameter #{i}")));
                }
            }
        }
        if self.method != GreekMethod::FirstPathwise {
            if self.steps.len() != self.components.len() {
                return Err(Error::invalid("steps", "one step per component is required"));
            }
            if let Some(h) = self.steps.iter().find(|h| !(**h > 0.0 && h.is_finite())) {
                return Err(Error::invalid("step", format!("must be positive, got {h}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GreekEstimate {
    pub method: GreekMethod,
    pub estimator: Estimator,
    pub component: String,
    pub step: Option<f64>,
    pub report: EstimatorReport,
}

/// Runs every component of `req`.
pub fn compute_greeks<M: Model>(
    model: &M,
    opt: &OptionSpec,
    cfg: &SimConfig,
    req: &GreekRequest,
) -> Result<Vec<GreekEstimate>> {
    req.validate(model)?;
    let name = |c: &Component| c.name(model);
    match req.method {
        GreekMethod::FirstPathwise => {
            let reports = match req.estimator {
                Estimator::Bb => bb_pathwise_greeks(model, opt, cfg, &req.components)?,
                Estimator::OssBb => oss_pathwise_greeks(model, opt, cfg, &req.components)?,
            };
            Ok(req
                .components
                .iter()
                .zip(reports)
                .map(|(c, report)| GreekEstimate {
                    method: req.method,
                    estimator: req.estimator,
                    component: name(c),
                    step: None,
                    report,
                })
                .collect())
        }
        method => req
            .components
            .iter()
            .zip(&req.steps)
            .map(|(c, &h)| {
                let report = match method {
                    GreekMethod::FirstFd => fd_greek(model, opt, cfg, req.estimator, *c, 1, h)?,
                    GreekMethod::SecondFd => fd_greek(model, opt, cfg, req.estimator, *c, 2, h)?,
                    _ => fd_of_pathwise(model, opt, cfg, req.estimator, *c, *c, h)?,
                };
                Ok(GreekEstimate {
                    method,
                    estimator: req.estimator,
                    component: name(c),
                    step: Some(h),
                    report,
                })
            })
            .collect(),
    }
}

#[derive(Clone, Copy, Debug)]
struct Seed {
    component: Component,
    dstrike: f64,
    dbarrier: f64,
}

impl Seed {
    fn new(component: Component) -> Self {
        Self {
            component,
            dstrike: if component == Component::Strike { 1.0 } else { 0.0 },
            dbarrier: if component == Component::Barrier { 1.0 } else { 0.0 },
        }
    }

    #[inline]
    fn param_partials<M: Model>(&self, model: &M, s: f64, t: f64, scheme: Scheme) -> Coefficients {
        match self.component {
            Component::Model(i) => {
                let mut d = model.param_partials(s, t, i);
                if scheme == Scheme::Euler {
                    d.sigma_prime = 0.0;
                }
                d
            }
            _ => Coefficients::default(),
        }
    }
}

#[inline]
fn spatial<M: Model>(model: &M, s: f64, t: f64, scheme: Scheme) -> Coefficients {
    let mut d = model.spatial_partials(s, t);
    if scheme == Scheme::Euler {
        d.sigma_prime = 0.0;
    }
    d
}

/// Coefficient tangents from the state tangent and the direct partials.
#[inline]
fn coefficient_tangents(ts: &mut TangentState, sp: &Coefficients, tp: &Coefficients) {
    ts.dmu = sp.mu * ts.ds + tp.mu;
    ts.dsigma = sp.sigma * ts.ds + tp.sigma;
    ts.dsigma_prime = sp.sigma_prime * ts.ds + tp.sigma_prime;
}

/// Tangent of a root `r` of `a z^2 + b z + c` under perturbed coefficients.
#[inline]
fn root_tangent(r: f64, a: f64, b: f64, da: f64, db: f64, dc: f64) -> f64 {
    if !r.is_finite() {
        return 0.0;
    }
    -(da * r * r + db * r + dc) / (2.0 * a * r + b)
}

/// `phi(e) / phi(z)` computed without underflow; zero for infinite `e`.
#[inline]
fn pdf_ratio(e: f64, z: f64) -> f64 {
    if !e.is_finite() {
        return 0.0;
    }
    (0.5 * (z - e) * (z + e)).exp()
}

#[inline]
fn pdf(e: f64) -> f64 {
    if e.is_finite() {
        crate::rng::normal_pdf(e)
    } else {
        0.0
    }
}

/// Tangents `(dz, dp_minus, dp)` of the sampled draw and the split masses.
#[allow(clippy::too_many_arguments)]
#[inline]
fn split_tangent(sp: &SurvivalSplit, a: f64, b: f64, da: f64, db: f64, dc: f64, z: f64, u: f64) -> (f64, f64, f64) {
    match sp.branch {
        Branch::WholeLine | Branch::Empty => (0.0, 0.0, 0.0),
        Branch::Interval => {
            let dlo = root_tangent(sp.z_lo, a, b, da, db, dc);
            let dhi = root_tangent(sp.z_hi, a, b, da, db, dc);
            let dp_minus = pdf(sp.z_lo) * dlo;
            let dp = pdf(sp.z_hi) * dhi - dp_minus;
            let dz = (1.0 - u) * pdf_ratio(sp.z_lo, z) * dlo + u * pdf_ratio(sp.z_hi, z) * dhi;
            (dz, dp_minus, dp)
        }
        Branch::TwoTail => {
            let dlo = root_tangent(sp.z_lo, a, b, da, db, dc);
            let dhi = root_tangent(sp.z_hi, a, b, da, db, dc);
            let dp_minus = pdf(sp.z_lo) * dlo;
            let dp = dp_minus - pdf(sp.z_hi) * dhi;
            let rel = pdf_ratio(sp.z_lo, z) * dlo - pdf_ratio(sp.z_hi, z) * dhi;
            let dz = if u * sp.p < sp.p_minus { u * rel } else { -(1.0 - u) * rel };
            (dz, dp_minus, dp)
        }
    }
}

/// Tangent of `exp(-2 X Y / (sigma^2 h))` with `X = B - s`, `Y = B - s1`.
#[allow(clippy::too_many_arguments)]
#[inline]
fn crossing_tangent(pstar: f64, x: f64, y: f64, dx: f64, dy: f64, sigma: f64, dsigma: f64, h: f64) -> f64 {
    if pstar == 0.0 {
        return 0.0;
    }
    let s2h = sigma * sigma * h;
    let de = -2.0 * (dx * y + x * dy) / s2h + 4.0 * x * y * dsigma / (s2h * sigma);
    pstar * de
}

fn check_finite<M: Model>(model: &M, seed: &Seed, step: usize, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteTangent {
            component: seed.component.name(model),
            step,
        })
    }
}

/// One-step-survival path with tangents. Returns the undiscounted payoff and
/// writes its derivative with respect to each of `comps` into `grad`.
#[allow(clippy::too_many_arguments)]
pub fn oss_path_tangents<M: Model, U: UniformSource>(
    model: &M,
    opt: &OptionSpec,
    scheme: Scheme,
    n_steps: usize,
    comps: &[Component],
    src: &mut U,
    diag: &mut Diagnostics,
    grad: &mut [f64],
) -> Result<f64> {
    let h = opt.tenor() / n_steps as f64;
    let sqrt_h = h.sqrt();
    let barrier = opt.barrier;
    let seeds: Vec<Seed> = comps.iter().map(|c| Seed::new(*c)).collect();
    let mut tan: Vec<TangentState> = comps.iter().map(|c| TangentState::seeded(*c)).collect();
    let mut dw = vec![0.0; comps.len()];
    let mut dv = vec![0.0; comps.len()];
    let (mut w, mut v) = (1.0, 1.0);
    let mut s = opt.spot;
    for n in 0..n_steps {
        let t = opt.t0 + n as f64 * h;
        let inp = StepInput::new(model, s, t, h, barrier, scheme);
        let split = survival_split(&inp)?;
        if split.branch == Branch::Empty || split.p <= 0.0 {
            diag.degenerate_survival += 1;
            grad.iter_mut().for_each(|g| *g = 0.0);
            return Ok(0.0);
        }
        let u = src.next_uniform();
        let step = oss_step_with(&inp, &split, u)?;
        if step.clamped {
            diag.clamped_quantiles += 1;
        }
        let Coefficients {
            sigma,
            sigma_prime,
            ..
        } = inp.coeffs;
        let (a, b, _) = inp.survival_quadratic();
        let (z, s1) = (step.z, step.next);
        let pstar = oss_crossing_prob_unchecked(s, s1, sigma, h, barrier);
        let sp = spatial(model, s, t, scheme);
        for (j, seed) in seeds.iter().enumerate() {
            let ts = &mut tan[j];
            coefficient_tangents(ts, &sp, &seed.param_partials(model, s, t, scheme));
            let ds = ts.ds;
            let dnu = h * (ts.dsigma * sigma_prime + sigma * ts.dsigma_prime);
            let da = 0.5 * dnu;
            let db = sqrt_h * ts.dsigma;
            let dc = ds + h * ts.dmu - da - seed.dbarrier;
            let (dz, dp_minus, dp) = split_tangent(&split, a, b, da, db, dc, z, u);
            let ds1 = ds
                + h * ts.dmu
                + sqrt_h * (ts.dsigma * z + sigma * dz)
                + 0.5 * dnu * (z * z - 1.0)
                + sigma * sigma_prime * h * z * dz;
            let dpstar = crossing_tangent(
                pstar,
                barrier - s,
                barrier - s1,
                seed.dbarrier - ds,
                seed.dbarrier - ds1,
                sigma,
                ts.dsigma,
                h,
            );
            dw[j] = dw[j] * split.p + w * dp;
            dv[j] = dv[j] * (1.0 - pstar) - v * dpstar;
            ts.ds = ds1;
            ts.dp_minus = dp_minus;
            ts.dp = dp;
            ts.dpstar = dpstar;
            check_finite(model, seed, n, &[ds1, dw[j], dv[j]])?;
        }
        w *= split.p;
        v *= 1.0 - pstar;
        s = s1;
    }
    let q = opt.payoff(s);
    let in_money = if s > opt.strike { 1.0 } else { 0.0 };
    for (j, seed) in seeds.iter().enumerate() {
        grad[j] = in_money * (tan[j].ds - seed.dstrike) * w * v + q * (dw[j] * v + w * dv[j]);
    }
    Ok(q * w * v)
}

/// Brownian-bridge path with tangents; see [`oss_path_tangents`].
#[allow(clippy::too_many_arguments)]
pub fn bb_path_tangents<M: Model, U: UniformSource>(
    model: &M,
    opt: &OptionSpec,
    scheme: Scheme,
    n_steps: usize,
    comps: &[Component],
    src: &mut U,
    diag: &mut Diagnostics,
    grad: &mut [f64],
) -> Result<f64> {
    let h = opt.tenor() / n_steps as f64;
    let sqrt_h = h.sqrt();
    let barrier = opt.barrier;
    let seeds: Vec<Seed> = comps.iter().map(|c| Seed::new(*c)).collect();
    let mut tan: Vec<TangentState> = comps.iter().map(|c| TangentState::seeded(*c)).collect();
    let mut dv = vec![0.0; comps.len()];
    let mut v = 1.0;
    let mut s = opt.spot;
    for n in 0..n_steps {
        let t = opt.t0 + n as f64 * h;
        let inp = StepInput::new(model, s, t, h, barrier, scheme);
        let z = clamped_quantile(src.next_uniform()).0;
        let s1 = milstein_step(&inp, z);
        let Coefficients {
            sigma,
            sigma_prime,
            ..
        } = inp.coeffs;
        let phat = bb_crossing_prob(s, s1, sigma, h, barrier);
        let inside = s < barrier && s1 < barrier;
        let sp = spatial(model, s, t, scheme);
        for (j, seed) in seeds.iter().enumerate() {
            let ts = &mut tan[j];
            coefficient_tangents(ts, &sp, &seed.param_partials(model, s, t, scheme));
            let ds = ts.ds;
            let dnu = h * (ts.dsigma * sigma_prime + sigma * ts.dsigma_prime);
            let ds1 = ds + h * ts.dmu + sqrt_h * ts.dsigma * z + 0.5 * dnu * (z * z - 1.0);
            let dphat = if inside {
                crossing_tangent(
                    phat,
                    barrier - s,
                    barrier - s1,
                    seed.dbarrier - ds,
                    seed.dbarrier - ds1,
                    sigma,
                    ts.dsigma,
                    h,
                )
            } else {
                0.0
            };
            dv[j] = dv[j] * (1.0 - phat) - v * dphat;
            ts.ds = ds1;
            ts.dpstar = dphat;
            check_finite(model, seed, n, &[ds1, dv[j]])?;
        }
        v *= 1.0 - phat;
        if v < 1e-300 {
            diag.early_knockouts += 1;
            grad.iter_mut().for_each(|g| *g = 0.0);
            return Ok(0.0);
        }
        s = s1;
    }
    let q = opt.payoff(s);
    let in_money = if s > opt.strike { 1.0 } else { 0.0 };
    for (j, seed) in seeds.iter().enumerate() {
        grad[j] = in_money * (tan[j].ds - seed.dstrike) * v + q * dv[j];
    }
    Ok(q * v)
}

/// Unconstrained path with tangents of the plain call payoff.
pub fn european_path_tangents<M: Model, U: UniformSource>(
    model: &M,
    opt: &OptionSpec,
    scheme: Scheme,
    n_steps: usize,
    comps: &[Component],
    src: &mut U,
    grad: &mut [f64],
) -> f64 {
    let h = opt.tenor() / n_steps as f64;
    let sqrt_h = h.sqrt();
    let seeds: Vec<Seed> = comps.iter().map(|c| Seed::new(*c)).collect();
    let mut tan: Vec<TangentState> = comps.iter().map(|c| TangentState::seeded(*c)).collect();
    let mut s = opt.spot;
    for n in 0..n_steps {
        let t = opt.t0 + n as f64 * h;
        let inp = StepInput::new(model, s, t, h, opt.barrier, scheme);
        let z = clamped_quantile(src.next_uniform()).0;
        let s1 = milstein_step(&inp, z);
        let sp = spatial(model, s, t, scheme);
        for (j, seed) in seeds.iter().enumerate() {
            let ts = &mut tan[j];
            coefficient_tangents(ts, &sp, &seed.param_partials(model, s, t, scheme));
            let dnu = h * (ts.dsigma * inp.coeffs.sigma_prime + inp.coeffs.sigma * ts.dsigma_prime);
            ts.ds = ts.ds + h * ts.dmu + sqrt_h * ts.dsigma * z + 0.5 * dnu * (z * z - 1.0);
        }
        s = s1;
    }
    let in_money = if s > opt.strike { 1.0 } else { 0.0 };
    for (j, seed) in seeds.iter().enumerate() {
        grad[j] = in_money * (tan[j].ds - seed.dstrike);
    }
    opt.payoff(s)
}

/// `d disc / d theta` for each component: only the rate parameter moves it.
fn discount_tangents<M: Model>(model: &M, opt: &OptionSpec, cfg: &SimConfig, comps: &[Component]) -> Vec<f64> {
    let disc = discount_factor(model, opt, cfg);
    comps
        .iter()
        .map(|c| match (c, model.rate_param()) {
            (Component::Model(i), Some(r)) if cfg.discount && *i == r => -opt.tenor() * disc,
            _ => 0.0,
        })
        .collect()
}

fn run_pathwise<M, K>(model: &M, opt: &OptionSpec, cfg: &SimConfig, comps: &[Component], kernel: K) -> Result<Vec<EstimatorReport>>
where
    M: Model,
    K: Fn(&mut crate::rng::RngStream, &mut Diagnostics, &mut [f64]) -> Result<f64> + Sync,
{
    cfg.validate()?;
    opt.validate()?;
    let disc = discount_factor(model, opt, cfg);
    let ddisc = discount_tangents(model, opt, cfg, comps);
    let k = comps.len();
    let start = Instant::now();
    let (stats, diag) = simulate(cfg.seed, cfg.stream_base, cfg.n_paths, k, cfg.threads, |rng, out, d| {
        let value = kernel(rng, d, out)?;
        for j in 0..k {
            out[j] = disc * out[j] + ddisc[j] * value;
        }
        Ok(())
    })?;
    let elapsed = start.elapsed();
    Ok(stats
        .iter()
        .map(|s| EstimatorReport::from_stats(s, cfg.n_steps, elapsed, diag))
        .collect())
}

pub fn oss_pathwise_greeks<M: Model>(
    model: &M,
    opt: &OptionSpec,
    cfg: &SimConfig,
    comps: &[Component],
) -> Result<Vec<EstimatorReport>> {
    if !(opt.spot < opt.barrier) {
        return Err(Error::AboveBarrier {
            state: opt.spot,
            barrier: opt.barrier,
        });
    }
    run_pathwise(model, opt, cfg, comps, |rng, d, g| {
        oss_path_tangents(model, opt, cfg.scheme, cfg.n_steps, comps, rng, d, g)
    })
}

pub fn bb_pathwise_greeks<M: Model>(
    model: &M,
    opt: &OptionSpec,
    cfg: &SimConfig,
    comps: &[Component],
) -> Result<Vec<EstimatorReport>> {
    run_pathwise(model, opt, cfg, comps, |rng, d, g| {
        bb_path_tangents(model, opt, cfg.scheme, cfg.n_steps, comps, rng, d, g)
    })
}

pub fn european_pathwise_greeks<M: Model>(
    model: &M,
    opt: &OptionSpec,
    cfg: &SimConfig,
    comps: &[Component],
) -> Result<Vec<EstimatorReport>> {
    run_pathwise(model, opt, cfg, comps, |rng, _, g| {
        Ok(european_path_tangents(model, opt, cfg.scheme, cfg.n_steps, comps, rng, g))
    })
}

/// Discounted payoff of one path of `estimator` for the given inputs.
fn path_value<M: Model>(
    estimator: Estimator,
    model: &M,
    opt: &OptionSpec,
    cfg: &SimConfig,
    rng: &mut crate::rng::RngStream,
    d: &mut Diagnostics,
) -> Result<f64> {
    let disc = discount_factor(model, opt, cfg);
    let raw = match estimator {
        Estimator::Bb => bb_path(model, opt, cfg.scheme, cfg.n_steps, rng, d),
        Estimator::OssBb => oss_path(model, opt, cfg.scheme, cfg.n_steps, rng, d)?,
    };
    Ok(disc * raw)
}

/// Central finite difference of order 1 or 2 with common random numbers.
pub fn fd_greek<M: Model>(
    model: &M,
    opt: &OptionSpec,
    cfg: &SimConfig,
    estimator: Estimator,
    component: Component,
    order: u8,
    step: f64,
) -> Result<EstimatorReport> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::invalid("step", format!("must be positive, got {step}")));
    }
    if order != 1 && order != 2 {
        return Err(Error::invalid("order", format!("must be 1 or 2, got {order}")));
    }
    cfg.validate()?;
    let x = component.value(model, opt);
    let up = component.with_value(model, opt, x + step)?;
    let down = component.with_value(model, opt, x - step)?;
    let start = Instant::now();
    let (stats, diag) = simulate(cfg.seed, cfg.stream_base, cfg.n_paths, 1, cfg.threads, |rng, out, d| {
        let first = rng.clone();
        let f_up = path_value(estimator, &up.0, &up.1, cfg, rng, d)?;
        *rng = first.clone();
        let f_down = path_value(estimator, &down.0, &down.1, cfg, rng, d)?;
        out[0] = if order == 1 {
            (f_up - f_down) / (2.0 * step)
        } else {
            *rng = first;
            let f_mid = path_value(estimator, model, opt, cfg, rng, d)?;
            (f_up - 2.0 * f_mid + f_down) / (step * step)
        };
        Ok(())
    })?;
    Ok(EstimatorReport::from_stats(&stats[0], cfg.n_steps, start.elapsed(), diag))
}

/// Central difference in `by` of the pathwise derivative in `of`.
pub fn fd_of_pathwise<M: Model>(
    model: &M,
    opt: &OptionSpec,
    cfg: &SimConfig,
    estimator: Estimator,
    of: Component,
    by: Component,
    step: f64,
) -> Result<EstimatorReport> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::invalid("step", format!("must be positive, got {step}")));
    }
    cfg.validate()?;
    let x = by.value(model, opt);
    let bumped = [by.with_value(model, opt, x + step)?, by.with_value(model, opt, x - step)?];
    let scaled: Vec<(f64, f64)> = bumped
        .iter()
        .map(|(m, o)| {
            let disc = discount_factor(m, o, cfg);
            (disc, discount_tangents(m, o, cfg, &[of])[0])
        })
        .collect();
    let start = Instant::now();
    let (stats, diag) = simulate(cfg.seed, cfg.stream_base, cfg.n_paths, 1, cfg.threads, |rng, out, d| {
        let first = rng.clone();
        let mut derivs = [0.0; 2];
        for (k, ((m, o), (disc, ddisc))) in bumped.iter().zip(&scaled).enumerate() {
            *rng = first.clone();
            let mut g = [0.0];
            let value = match estimator {
                Estimator::Bb => bb_path_tangents(m, o, cfg.scheme, cfg.n_steps, &[of], rng, d, &mut g)?,
                Estimator::OssBb => oss_path_tangents(m, o, cfg.scheme, cfg.n_steps, &[of], rng, d, &mut g)?,
            };
            derivs[k] = disc * g[0] + ddisc * value;
        }
        out[0] = (derivs[0] - derivs[1]) / (2.0 * step);
        Ok(())
    })?;
    Ok(EstimatorReport::from_stats(&stats[0], cfg.n_steps, start.elapsed(), diag))
}

/// One row of a stability scan.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StabilityRow {
    pub n_paths: u64,
    /// Estimated `Var(D_h P_M)`: sample variance of the replicate estimates.
    pub variance: f64,
    /// Mean over the replicates.
    pub estimate: f64,
    pub std_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StabilityScan {
    pub rows: Vec<StabilityRow>,
    /// Fit of `log10 Var` against `log10 M`.
    pub fit: LinearFit,
}

/// Variance of the M-path finite-difference estimator across an increasing
/// path-count grid, measured over `replicates` independent copies per grid
/// point. Every copy uses its own block of streams.
#[allow(clippy::too_many_arguments)]
pub fn stability_scan<M: Model>(
    model: &M,
    opt: &OptionSpec,
    cfg: &SimConfig,
    estimator: Estimator,
    component: Component,
    order: u8,
    step: f64,
    path_grid: &[u64],
    replicates: usize,
) -> Result<StabilityScan> {
    if path_grid.len() < 2 || path_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("path_grid", "needs at least two strictly increasing entries"));
    }
    if replicates < 2 {
        return Err(Error::invalid("replicates", "at least two are needed for a variance"));
    }
    let mut rows = Vec::with_capacity(path_grid.len());
    let mut base = cfg.stream_base;
    for &m in path_grid {
        let mut means = RunningStats::new();
        for _ in 0..replicates {
            let mut c = cfg.clone();
            c.n_paths = m;
            c.stream_base = base;
            base += m;
            means.push(fd_greek(model, opt, &c, estimator, component, order, step)?.mean);
        }
        rows.push(StabilityRow {
            n_paths: m,
            variance: means.variance(),
            estimate: means.mean(),
            std_error: means.std_error(),
        });
    }
    let x: Vec<f64> = rows.iter().map(|r| (r.n_paths as f64).log10()).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.variance.max(f64::MIN_POSITIVE).log10()).collect();
    let fit = linear_fit(&x, &y).ok_or_else(|| Error::InsufficientPrecision("degenerate stability fit".into()))?;
    Ok(StabilityScan { rows, fit })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Cev, Gbm};
    use crate::rng::{ReplayUniforms, RngStream};

    fn table1() -> (Gbm, OptionSpec) {
        (Gbm::new(0.05, 0.2).unwrap(), OptionSpec::new(1.0, 1.0, 1.1, 0.0, 1.0).unwrap())
    }

    fn oss_value<M: Model>(m: &M, o: &OptionSpec, n: usize, u: &[f64]) -> f64 {
        let mut d = Diagnostics::default();
        oss_path(m, o, Scheme::Milstein, n, &mut ReplayUniforms::new(u), &mut d).unwrap()
    }

    fn bumped<M: Model>(m: &M, o: &OptionSpec, c: Component, x: f64) -> (M, OptionSpec) {
        c.with_value(m, o, x).unwrap()
    }

    /// Per-path tangents against central differences of the same path.
    fn check_tangents<M: Model>(model: &M, opt: &OptionSpec, n: usize, seed: u64, paths: u64) -> (usize, usize) {
        let comps = [Component::Spot, Component::Model(1), Component::Barrier, Component::Strike];
        let mut checked = 0;
        let mut skipped = 0;
        let eps = 1e-6;
        for i in 0..paths {
            let mut u = vec![0.0; n];
            RngStream::new(seed, i).fill_uniform(&mut u);
            let mut g = [0.0; 4];
            let mut d = Diagnostics::default();
            let value =
                oss_path_tangents(model, opt, Scheme::Milstein, n, &comps, &mut ReplayUniforms::new(&u), &mut d, &mut g)
                    .unwrap();
            let plain = oss_value(model, opt, n, &u);
            assert!((value - plain).abs() <= 1e-12 * plain.abs());
            for (j, c) in comps.iter().enumerate() {
                let x = c.value(model, opt);
                let (mu, ou) = bumped(model, opt, *c, x + eps);
                let (md, od) = bumped(model, opt, *c, x - eps);
                let fd = (oss_value(&mu, &ou, n, &u) - oss_value(&md, &od, n, &u)) / (2.0 * eps);
                // a path finishing next to the strike kink has no derivative to compare
                let mut probe = ReplayUniforms::new(&u);
                let mut s = opt.spot;
                for k in 0..n {
                    let inp = StepInput::new(model, s, k as f64 / n as f64, 1.0 / n as f64, opt.barrier, Scheme::Milstein);
                    s = crate::schemes::oss_step(&inp, probe.next_uniform()).unwrap().next;
                }
                if (s - opt.strike).abs() < 1e-4 {
                    skipped += 1;
                    continue;
                }
                let tol = 1e-4 * g[j].abs().max(fd.abs()) + 1e-9;
                assert!((g[j] - fd).abs() <= tol, "path {i} comp {c:?}: pathwise {} fd {fd}", g[j]);
                checked += 1;
            }
        }
        (checked, skipped)
    }

    #[test]
    fn per_path_tangents_match_finite_differences_gbm() {
        let (m, opt) = table1();
        let (checked, skipped) = check_tangents(&m, &opt, 16, 5, 1000);
        assert!(checked >= 3900, "checked {checked} skipped {skipped}");
    }

    #[test]
    fn per_path_tangents_match_finite_differences_cev() {
        let m = Cev::new(0.05, 0.2, 0.5).unwrap();
        let opt = OptionSpec::new(1.0, 0.9, 1.15, 0.0, 1.0).unwrap();
        let (checked, _) = check_tangents(&m, &opt, 8, 6, 300);
        assert!(checked >= 1150);
        let steep = Cev::new(0.02, 0.3, 1.3).unwrap();
        let (checked, _) = check_tangents(&steep, &opt, 8, 7, 300);
        assert!(checked >= 1150);
    }

    #[test]
    fn bb_tangents_match_finite_differences_away_from_kinks() {
        let (m, opt) = table1();
        let comps = [Component::Spot, Component::Model(1)];
        let n = 16;
        let eps = 1e-7;
        let mut checked = 0;
        for i in 0..500 {
            let mut u = vec![0.0; n];
            RngStream::new(8, i).fill_uniform(&mut u);
            let mut g = [0.0; 2];
            let mut d = Diagnostics::default();
            bb_path_tangents(&m, &opt, Scheme::Milstein, n, &comps, &mut ReplayUniforms::new(&u), &mut d, &mut g).unwrap();
            for (j, c) in comps.iter().enumerate() {
                let x = c.value(&m, &opt);
                let mut f = |v: f64| {
                    let (mm, oo) = bumped(&m, &opt, *c, v);
                    bb_path(&mm, &oo, Scheme::Milstein, n, &mut ReplayUniforms::new(&u), &mut d)
                };
                let (lo, mid, hi) = (f(x - eps), f(x), f(x + eps));
                // skip paths sitting on a kink (one-sided slopes disagree)
                let (left, right) = ((mid - lo) / eps, (hi - mid) / eps);
                if (left - right).abs() > 1e-3 * left.abs().max(right.abs()) + 1e-9 {
                    continue;
                }
                let fd = (hi - lo) / (2.0 * eps);
                assert!((g[j] - fd).abs() <= 1e-4 * g[j].abs().max(fd.abs()) + 1e-7, "path {i} {c:?}: {} vs {fd}", g[j]);
                checked += 1;
            }
        }
        assert!(checked > 900);
    }

    #[test]
    fn oss_payoff_is_continuous_in_spot() {
        let (m, opt) = table1();
        let n = 16;
        let eps = 1e-7;
        for i in 0..1000 {
            let mut u = vec![0.0; n];
            RngStream::new(21, i).fill_uniform(&mut u);
            let x = 0.8 + 0.29 * (i as f64 / 1000.0);
            let f = |v: f64| oss_value(&m, &OptionSpec { spot: v, ..opt }, n, &u);
            // the per-path payoff is Lipschitz with a constant well below 10
            assert!((f(x + eps) - f(x - eps)).abs() <= 10.0 * 2.0 * eps);
        }
    }

    #[test]
    fn unconstrained_limit_matches_european_delta() {
        let (m, _) = table1();
        let opt = OptionSpec::new(1.0, 1.0, f64::INFINITY, 0.0, 1.0).unwrap();
        let cfg = SimConfig::new(16, 4000).unwrap().with_seed(2);
        let comps = [Component::Spot, Component::Model(1)];
        let eu = european_pathwise_greeks(&m, &opt, &cfg, &comps).unwrap();
        let oss = oss_pathwise_greeks(&m, &opt, &cfg, &comps).unwrap();
        let bb = bb_pathwise_greeks(&m, &opt, &cfg, &comps).unwrap();
        for j in 0..2 {
            assert!((eu[j].mean - oss[j].mean).abs() < 1e-12);
            assert!((eu[j].mean - bb[j].mean).abs() < 1e-12);
        }
    }

    #[test]
    fn inert_components_give_zero() {
        let (m, _) = table1();
        let far = OptionSpec::new(1.0, 1.0, 1e12, 0.0, 1.0).unwrap();
        let cfg = SimConfig::new(8, 2000).unwrap();
        for r in [
            oss_pathwise_greeks(&m, &far, &cfg, &[Component::Barrier]).unwrap(),
            bb_pathwise_greeks(&m, &far, &cfg, &[Component::Barrier]).unwrap(),
        ] {
            assert_eq!((r[0].mean, r[0].sample_variance), (0.0, 0.0));
        }
        let fd = fd_greek(&m, &far, &cfg, Estimator::Bb, Component::Barrier, 1, 1e-3).unwrap();
        assert_eq!((fd.mean, fd.sample_variance), (0.0, 0.0));
        let fd2 = fd_greek(&m, &far, &cfg, Estimator::OssBb, Component::Barrier, 2, 1e-3).unwrap();
        assert_eq!((fd2.mean, fd2.sample_variance), (0.0, 0.0));
    }

    #[test]
    fn knocked_out_bb_greeks_vanish() {
        let (m, _) = table1();
        let opt = OptionSpec::new(1.2, 1.0, 1.1, 0.0, 1.0).unwrap();
        let cfg = SimConfig::new(8, 1000).unwrap();
        let r = bb_pathwise_greeks(&m, &opt, &cfg, &[Component::Spot, Component::Model(1)]).unwrap();
        assert!(r.iter().all(|x| x.mean == 0.0 && x.sample_variance == 0.0));
    }

    #[test]
    fn pathwise_agrees_with_fd_of_the_mean() {
        let (m, opt) = table1();
        let cfg = SimConfig::new(16, 40_000).unwrap().with_seed(9);
        for (c, step) in [(Component::Spot, 1e-4), (Component::Model(1), 1e-4), (Component::Model(0), 1e-4)] {
            let pw = oss_pathwise_greeks(&m, &opt, &cfg, &[c]).unwrap().remove(0);
            let fd = fd_greek(&m, &opt, &cfg, Estimator::OssBb, c, 1, step).unwrap();
            let se = (pw.std_error.powi(2) + fd.std_error.powi(2)).sqrt();
            assert!((pw.mean - fd.mean).abs() <= (3.0 * se).max(1e-3), "{c:?}: {} vs {}", pw.mean, fd.mean);
        }
    }

    #[test]
    fn fd_rejects_bad_steps() {
        let (m, opt) = table1();
        let cfg = SimConfig::new(4, 10).unwrap();
        assert!(fd_greek(&m, &opt, &cfg, Estimator::Bb, Component::Spot, 1, 0.0).is_err());
        assert!(fd_greek(&m, &opt, &cfg, Estimator::Bb, Component::Spot, 1, -1e-3).is_err());
        assert!(fd_greek(&m, &opt, &cfg, Estimator::Bb, Component::Spot, 3, 1e-3).is_err());
        let req = GreekRequest {
            components: vec![Component::Spot],
            method: GreekMethod::FirstFd,
            estimator: Estimator::Bb,
            steps: vec![0.0],
        };
        assert!(compute_greeks(&m, &opt, &cfg, &req).is_err());
    }

    #[test]
    fn stability_scan_requires_increasing_grid() {
        let (m, opt) = table1();
        let cfg = SimConfig::new(4, 10).unwrap();
        assert!(stability_scan(&m, &opt, &cfg, Estimator::OssBb, Component::Spot, 2, 1e-3, &[100, 100], 4).is_err());
        assert!(stability_scan(&m, &opt, &cfg, Estimator::OssBb, Component::Spot, 2, 1e-3, &[100, 200], 1).is_err());
        let scan = stability_scan(&m, &opt, &cfg, Estimator::OssBb, Component::Spot, 1, 1e-3, &[500, 5000], 8).unwrap();
        assert_eq!(scan.rows.len(), 2);
        assert!(scan.fit.slope < 0.0);
        assert!(scan.rows.iter().all(|r| r.std_error > 0.0));
    }
}
