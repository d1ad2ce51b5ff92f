//! Empirical weak convergence order against a reference price.

use crate::error::{Error, Result};
use crate::estimators::{EstimatorReport, PriceEstimator, SimConfig};
use crate::model::{Model, OptionSpec};
use crate::schemes::Scheme;
use crate::stats::{weighted_linear_fit, LinearFit};

/// Streams of grid point `k` start at `k << GRID_STREAM_SHIFT`.
const GRID_STREAM_SHIFT: u32 = 44;
/// Offset of the confirmation run inside a grid block.
const CONFIRM_OFFSET: u64 = 1 << 40;

#[derive(Clone, Debug, PartialEq)]
pub struct WeakOrderConfig {
    pub n_grid: Vec<usize>,
    pub initial_paths: u64,
    pub max_paths: u64,
    /// A grid point counts once `|bias| > resolution * std_error`.
    pub resolution: f64,
    /// The reported estimate at each grid point comes from a fresh run with
    /// `confirm_factor` times the pilot path count, capped at `max_paths`.
    pub confirm_factor: u64,
    pub scheme: Scheme,
    pub seed: u64,
    pub discount: bool,
    pub threads: Option<usize>,
}

impl WeakOrderConfig {
    pub fn new(n_grid: Vec<usize>) -> Self {
        Self {
            n_grid,
            initial_paths: 100_000,
            max_paths: 50_000_000,
            resolution: 5.0,
            confirm_factor: 4,
            scheme: Scheme::Milstein,
            seed: 0,
            discount: true,
            threads: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_grid.len() < 2 || self.n_grid.windows(2).any(|w| w[1] <= w[0]) || self.n_grid[0] == 0 {
            return Err(Error::invalid("n_grid", "needs at least two strictly increasing positive entries"));
        }
        if self.initial_paths < 2 || self.max_paths < self.initial_paths {
            return Err(Error::invalid("paths", "need 2 <= initial_paths <= max_paths"));
        }
        if self.confirm_factor == 0 {
            return Err(Error::invalid("confirm_factor", "must be positive"));
        }
        if !(self.resolution > 0.0) {
            return Err(Error::invalid("resolution", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeakRow {
    pub n_steps: usize,
    pub h: f64,
    pub bias: f64,
    pub resolved: bool,
    pub report: EstimatorReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeakOrderResult {
    pub estimator: PriceEstimator,
    pub rows: Vec<WeakRow>,
    /// Fit of `ln|bias|` against `ln h` over the resolved rows.
    pub fit: LinearFit,
}

impl WeakOrderResult {
    pub fn slope(&self) -> f64 {
        self.fit.slope
    }
}

/// Runs `estimator` over the step grid and fits the order. At each grid point
/// a pilot doubles its path count until the bias against `reference` is
/// resolved or `max_paths` is reached. An independent run sized from the pilot
/// then supplies the reported bias. Rows are weighted by `(bias / se)^2`, the
/// inverse variance of `ln|bias|`.
pub fn weak_order<M: Model>(
    estimator: PriceEstimator,
    model: &M,
    opt: &OptionSpec,
    reference: f64,
    cfg: &WeakOrderConfig,
) -> Result<WeakOrderResult> {
    cfg.validate()?;
    let mut rows = Vec::with_capacity(cfg.n_grid.len());
    for (k, &n) in cfg.n_grid.iter().enumerate() {
        let base = (k as u64 + 1) << GRID_STREAM_SHIFT;
        let sim = |paths: u64, offset: u64| SimConfig {
            n_steps: n,
            n_paths: paths,
            scheme: cfg.scheme,
            seed: cfg.seed,
            discount: cfg.discount,
            stream_base: base + offset,
            threads: cfg.threads,
        };
        let mut pilot = estimator.run(model, opt, &sim(cfg.initial_paths, 0))?;
        while (pilot.mean - reference).abs() <= cfg.resolution * pilot.std_error && pilot.n_paths < cfg.max_paths {
            let extra = pilot.n_paths.min(cfg.max_paths - pilot.n_paths);
            let more = estimator.run(model, opt, &sim(extra, pilot.n_paths))?;
            pilot.merge(&more);
        }
        let paths = pilot.n_paths.saturating_mul(cfg.confirm_factor).min(cfg.max_paths);
        let report = estimator.run(model, opt, &sim(paths, CONFIRM_OFFSET))?;
        let bias = report.mean - reference;
        rows.push(WeakRow {
            n_steps: n,
            h: opt.tenor() / n as f64,
            bias,
            resolved: bias.abs() > cfg.resolution * report.std_error,
            report,
        });
    }
    let used: Vec<&WeakRow> = rows.iter().filter(|r| r.resolved).collect();
    if used.len() < 3 {
        return Err(Error::InsufficientPrecision(format!(
            "only {} of {} grid points resolved their bias within {} paths",
            used.len(),
            rows.len(),
            cfg.max_paths
        )));
    }
    let x: Vec<f64> = used.iter().map(|r| r.h.ln()).collect();
    let y: Vec<f64> = used.iter().map(|r| r.bias.abs().ln()).collect();
    let w: Vec<f64> = used.iter().map(|r| (r.bias / r.report.std_error).powi(2)).collect();
    let fit = weighted_linear_fit(&x, &y, &w).ok_or_else(|| Error::InsufficientPrecision("degenerate fit".into()))?;
    Ok(WeakOrderResult {
        estimator,
        rows,
        fit,
    })
}
