//! Subcommand bodies. Each returns the table to emit.

use std::time::Duration;

use ossbb::analytic::{bs_barrier_greeks, bs_up_and_out_call, BsInput, BsParams};
use ossbb::convergence::{weak_order, WeakOrderConfig};
use ossbb::estimators::{price_bb, EstimatorReport, PriceEstimator, SimConfig};
use ossbb::greeks::{compute_greeks, fd_greek, Estimator, GreekMethod, GreekRequest};
use ossbb::mlmc::{level_stats, mlmc_price, MlmcConfig};
use ossbb::model::{Component, Model, OptionSpec};

use crate::config::{parse_list, AnyModel, RunConfig};
use crate::output::{num, Table};
use crate::{CliError, Command, Figure};

macro_rules! with_model {
    ($model:expr, |$m:ident| $body:expr) => {
        match $model {
            AnyModel::Gbm($m) => $body,
            AnyModel::Cev($m) => $body,
        }
    };
}

pub fn dispatch(command: &Command, cfg: &RunConfig) -> Result<(&'static str, Table), CliError> {
    let model = cfg.build_model()?;
    let opt = cfg.build_option()?;
    let table = match command {
        Command::Price(_) => with_model!(&model, |m| price(m, &opt, cfg))?,
        Command::Greeks(_) => with_model!(&model, |m| greeks(m, &model, &opt, cfg))?,
        Command::Mlmc(_) => with_model!(&model, |m| mlmc(m, &model, &opt, cfg))?,
        Command::Converge(_) => with_model!(&model, |m| converge(m, &model, &opt, cfg))?,
        Command::Oracle(_) => oracle(&model, &opt, cfg)?,
        Command::Figures(a) => match a.figure {
            Figure::Fig1 => with_model!(&model, |m| fig1(m, &model, &opt, cfg))?,
            Figure::Fig2 => with_model!(&model, |m| fig2(m, &model, &opt, cfg))?,
            Figure::Fig3 => with_model!(&model, |m| fig3(m, &model, &opt, cfg))?,
            Figure::Fig4 => with_model!(&model, |m| fig4(m, &opt, cfg))?,
        },
    };
    Ok((command_name(command), table))
}

fn command_name(command: &Command) -> &'static str {
    match command {
        Command::Price(_) => "price",
        Command::Greeks(_) => "greeks",
        Command::Mlmc(_) => "mlmc",
        Command::Converge(_) => "converge",
        Command::Oracle(_) => "oracle",
        Command::Figures(a) => match a.figure {
            Figure::Fig1 => "figures fig1",
            Figure::Fig2 => "figures fig2",
            Figure::Fig3 => "figures fig3",
            Figure::Fig4 => "figures fig4",
        },
    }
}

/// Closed-form inputs when the model is GBM.
fn closed_form(model: &AnyModel, opt: &OptionSpec) -> Option<BsParams> {
    match model {
        AnyModel::Gbm(g) => BsParams::from_contract(g, opt).ok(),
        AnyModel::Cev(_) => None,
    }
}

/// Price reference in the run's discounting convention.
fn reference_price(model: &AnyModel, opt: &OptionSpec, cfg: &RunConfig) -> Result<f64, CliError> {
    if let Some(v) = cfg.converge.reference {
        return Ok(v);
    }
    let p = closed_form(model, opt)
        .ok_or_else(|| CliError::Config("no closed form for this model; set `converge.reference`".into()))?;
    let v = bs_up_and_out_call(&p);
    Ok(if cfg.sim.discount { v } else { v / p.discount() })
}

fn reference_greek(model: &AnyModel, opt: &OptionSpec, cfg: &RunConfig, component: &str, order: u8) -> Option<f64> {
    let p = closed_form(model, opt)?;
    let input = BsInput::parse(component).ok()?;
    let v = bs_barrier_greeks(&p, input, order).ok()?;
    cfg.sim.discount.then_some(v)
}

fn opt_num(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

fn secs(d: Duration) -> String {
    num(d.as_secs_f64())
}

fn with_timing(mut header: Vec<&'static str>, cfg: &RunConfig) -> Vec<&'static str> {
    if cfg.sim.timing {
        header.push("wall_time_s");
    }
    header
}

fn report_cells(r: &EstimatorReport) -> Vec<String> {
    let d = &r.diagnostics;
    vec![
        r.n_steps.to_string(),
        r.n_paths.to_string(),
        num(r.mean),
        num(r.std_error),
        num(r.sample_variance),
        d.clamped_quantiles.to_string(),
        d.degenerate_survival.to_string(),
        d.early_knockouts.to_string(),
        d.log_space_paths.to_string(),
    ]
}

const REPORT_COLUMNS: [&str; 9] = [
    "n_steps",
    "n_paths",
    "mean",
    "std_error",
    "sample_variance",
    "clamped_quantiles",
    "degenerate_survival",
    "early_knockouts",
    "log_space_paths",
];

fn price<M: Model>(m: &M, opt: &OptionSpec, cfg: &RunConfig) -> Result<Table, CliError> {
    let estimators = cfg.price_estimators()?;
    let sim = cfg.build_sim()?;
    let mut header = vec!["estimator", "scheme"];
    header.extend(REPORT_COLUMNS);
    let mut table = Table::new(&with_timing(header, cfg));
    for e in estimators {
        let r = e.run(m, opt, &sim)?;
        let mut row = vec![e.name().to_string(), sim.scheme.name().to_string()];
        row.extend(report_cells(&r));
        if cfg.sim.timing {
            row.push(secs(r.wall_time));
        }
        table.push(row);
    }
    Ok(table)
}

fn greeks<M: Model>(m: &M, any: &AnyModel, opt: &OptionSpec, cfg: &RunConfig) -> Result<Table, CliError> {
    let sim = cfg.build_sim()?;
    let method = cfg.greek_method()?;
    let components = cfg
        .greeks
        .components
        .iter()
        .map(|c| Component::parse(c, m))
        .collect::<ossbb::Result<Vec<_>>>()?;
    let req = GreekRequest {
        steps: vec![cfg.greeks.step; components.len()],
        components,
        method,
        estimator: cfg.greek_estimator()?,
    };
    let header = vec![
        "estimator",
        "method",
        "component",
        "step",
        "n_steps",
        "n_paths",
        "estimate",
        "std_error",
        "sample_variance",
        "reference",
    ];
    let mut table = Table::new(&with_timing(header, cfg));
    for g in compute_greeks(m, opt, &sim, &req)? {
        let r = &g.report;
        let mut row = vec![
            g.estimator.name().to_string(),
            g.method.name().to_string(),
            g.component.clone(),
            opt_num(g.step),
            r.n_steps.to_string(),
            r.n_paths.to_string(),
            num(r.mean),
            num(r.std_error),
            num(r.sample_variance),
            opt_num(reference_greek(any, opt, cfg, &g.component, method.order())),
        ];
        if cfg.sim.timing {
            row.push(secs(r.wall_time));
        }
        table.push(row);
    }
    Ok(table)
}

fn mlmc_config(cfg: &RunConfig) -> Result<MlmcConfig, CliError> {
    let mut c = MlmcConfig::new(cfg.mlmc.epsilon)?;
    c.n0 = cfg.mlmc.n0;
    c.max_level = cfg.mlmc.max_level;
    c.initial_samples = cfg.mlmc.initial_samples;
    c.scheme = cfg.scheme()?;
    c.seed = cfg.sim.seed;
    c.discount = cfg.sim.discount;
    c.threads = cfg.sim.threads;
    c.validate()?;
    Ok(c)
}

fn mlmc<M: Model>(m: &M, any: &AnyModel, opt: &OptionSpec, cfg: &RunConfig) -> Result<Table, CliError> {
    let c = mlmc_config(cfg)?;
    let res = mlmc_price(m, opt, &c)?;
    let header = vec![
        "level",
        "n_steps",
        "samples",
        "mean",
        "variance",
        "fine_mean",
        "fine_variance",
        "cost_per_sample",
    ];
    let mut table = Table::new(&with_timing(header, cfg));
    for l in &res.levels {
        let mut row = vec![
            l.level.to_string(),
            (c.n0 << l.level).to_string(),
            l.samples.to_string(),
            num(l.mean),
            num(l.variance),
            num(l.fine_mean),
            num(l.fine_variance),
            num(l.cost_per_sample),
        ];
        if cfg.sim.timing {
            row.push(secs(l.wall_time));
        }
        table.push(row);
    }
    table.summary.push(format!("price: {}", num(res.price)));
    table.summary.push(format!("std_error: {}", num(res.std_error())));
    table.summary.push(format!("total_cost: {}", num(res.total_cost)));
    if let Ok(v) = reference_price(any, opt, cfg) {
        table.summary.push(format!("reference: {}", num(v)));
    }
    Ok(table)
}

fn converge<M: Model>(m: &M, any: &AnyModel, opt: &OptionSpec, cfg: &RunConfig) -> Result<Table, CliError> {
    let estimators: Vec<PriceEstimator> = parse_list(&cfg.converge.estimators, "converge.estimators")?;
    let reference = reference_price(any, opt, cfg)?;
    let c = &cfg.converge;
    let wcfg = WeakOrderConfig {
        n_grid: c.n_grid.clone(),
        initial_paths: c.initial_paths,
        max_paths: c.max_paths,
        resolution: c.resolution,
        confirm_factor: c.confirm_factor,
        scheme: cfg.scheme()?,
        seed: cfg.sim.seed,
        discount: cfg.sim.discount,
        threads: cfg.sim.threads,
    };
    wcfg.validate()?;
    let header = vec!["estimator", "n_steps", "h", "n_paths", "mean", "bias", "std_error", "resolved"];
    let mut table = Table::new(&with_timing(header, cfg));
    for e in estimators {
        let res = weak_order(e, m, opt, reference, &wcfg)?;
        for row in &res.rows {
            let r = &row.report;
            let mut cells = vec![
                e.name().to_string(),
                row.n_steps.to_string(),
                num(row.h),
                r.n_paths.to_string(),
                num(r.mean),
                num(row.bias),
                num(r.std_error),
                row.resolved.to_string(),
            ];
            if cfg.sim.timing {
                cells.push(secs(r.wall_time));
            }
            table.push(cells);
        }
        table
            .summary
            .push(format!("{} slope: {} (std error {})", e.name(), num(res.slope()), num(res.fit.slope_std_error)));
    }
    table.summary.push(format!("reference: {}", num(reference)));
    Ok(table)
}

fn oracle(any: &AnyModel, opt: &OptionSpec, cfg: &RunConfig) -> Result<Table, CliError> {
    let AnyModel::Gbm(m) = any else {
        return Err(CliError::Config("the closed-form oracle needs kind = \"gbm\"".into()));
    };
    let p = BsParams::from_contract(m, opt)?;
    let mut sim = SimConfig::new(cfg.oracle.check_steps, cfg.oracle.check_paths)?
        .with_seed(cfg.sim.seed)
        .with_scheme(cfg.scheme()?)
        .with_discount(cfg.sim.discount);
    sim.threads = cfg.sim.threads;
    let check = price_bb(m, opt, &sim)?;
    let armed = ossbb::analytic::arm_oracle(&p, cfg.sim.discount, &check, cfg.oracle.tolerance)?;
    let greek = |input, order| bs_barrier_greeks(&p, input, order);
    let header = vec![
        "price",
        "check_estimate",
        "check_std_error",
        "z_score",
        "check_steps",
        "check_paths",
        "delta",
        "gamma",
        "vega",
    ];
    let mut table = Table::new(&with_timing(header, cfg));
    let mut row = vec![
        num(armed.price),
        num(armed.check_estimate),
        num(armed.check_std_error),
        num(armed.z_score()),
        check.n_steps.to_string(),
        check.n_paths.to_string(),
        num(greek(BsInput::Spot, 1)?),
        num(greek(BsInput::Spot, 2)?),
        num(greek(BsInput::Vol, 1)?),
    ];
    if cfg.sim.timing {
        row.push(secs(check.wall_time));
    }
    table.push(row);
    Ok(table)
}

/// Mean squared error over independent repetitions at each path count.
fn mse_sweep<M: Model>(
    m: &M,
    opt: &OptionSpec,
    cfg: &RunConfig,
    reference: f64,
    run: impl Fn(&M, &OptionSpec, &SimConfig, Estimator) -> ossbb::Result<EstimatorReport>,
) -> Result<Table, CliError> {
    let f = &cfg.figures;
    if f.repeats == 0 || f.path_grid.is_empty() {
        return Err(CliError::Config("`figures.repeats` and `figures.path_grid` must be non-empty".into()));
    }
    let base = cfg.build_sim()?;
    let header = vec!["estimator", "n_paths", "n_steps", "repeats", "mse", "mean_variance", "cost"];
    let mut table = Table::new(&with_timing(header, cfg));
    for est in [Estimator::Bb, Estimator::OssBb] {
        for &paths in &f.path_grid {
            let mut sq = 0.0;
            let mut var = 0.0;
            let mut wall = Duration::ZERO;
            for rep in 0..f.repeats {
                let mut sim = base.clone();
                sim.n_paths = paths;
                sim.stream_base = rep * paths;
                sim.validate()?;
                let r = run(m, opt, &sim, est)?;
                sq += (r.mean - reference).powi(2);
                var += r.sample_variance / paths as f64;
                wall += r.wall_time;
            }
            let k = f.repeats as f64;
            let mut row = vec![
                est.name().to_string(),
                paths.to_string(),
                base.n_steps.to_string(),
                f.repeats.to_string(),
                num(sq / k),
                num(var / k),
                (paths * base.n_steps as u64).to_string(),
            ];
            if cfg.sim.timing {
                row.push(secs(wall / f.repeats as u32));
            }
            table.push(row);
        }
    }
    table.summary.push(format!("reference: {}", num(reference)));
    Ok(table)
}

fn fig1<M: Model>(m: &M, any: &AnyModel, opt: &OptionSpec, cfg: &RunConfig) -> Result<Table, CliError> {
    let reference = reference_price(any, opt, cfg)?;
    mse_sweep(m, opt, cfg, reference, |m, o, sim, est| {
        let e = match est {
            Estimator::Bb => PriceEstimator::Bb,
            Estimator::OssBb => PriceEstimator::OssBb,
        };
        e.run(m, o, sim)
    })
}

fn fig2<M: Model>(m: &M, any: &AnyModel, opt: &OptionSpec, cfg: &RunConfig) -> Result<Table, CliError> {
    let reference = reference_greek(any, opt, cfg, "S0", 1)
        .ok_or_else(|| CliError::Config("fig2 needs the closed-form Delta: kind = \"gbm\" with discounting".into()))?;
    mse_sweep(m, opt, cfg, reference, |m, o, sim, est| {
        let req = GreekRequest {
            components: vec![Component::Spot],
            method: GreekMethod::FirstPathwise,
            estimator: est,
            steps: vec![],
        };
        Ok(compute_greeks(m, o, sim, &req)?.remove(0).report)
    })
}

fn fig3<M: Model>(m: &M, any: &AnyModel, opt: &OptionSpec, cfg: &RunConfig) -> Result<Table, CliError> {
    let f = &cfg.figures;
    if f.s0_points < 2 || !(f.s0_min < f.s0_max) {
        return Err(CliError::Config("fig3 needs `figures.s0_min < s0_max` and at least two points".into()));
    }
    let mut sim = cfg.build_sim()?;
    sim.n_paths = f.gamma_paths;
    sim.validate()?;
    let header = vec!["S0", "gamma_bb", "gamma_oss", "reference_gamma", "std_error_bb", "std_error_oss"];
    let mut table = Table::new(&header);
    for i in 0..f.s0_points {
        let s0 = f.s0_min + (f.s0_max - f.s0_min) * i as f64 / (f.s0_points - 1) as f64;
        let mut o = *opt;
        o.spot = s0;
        let bb = fd_greek(m, &o, &sim, Estimator::Bb, Component::Spot, 2, f.fd_step)?;
        let oss = fd_greek(m, &o, &sim, Estimator::OssBb, Component::Spot, 2, f.fd_step)?;
        table.push(vec![
            num(s0),
            num(bb.mean),
            num(oss.mean),
            opt_num(reference_greek(any, &o, cfg, "S0", 2)),
            num(bb.std_error),
            num(oss.std_error),
        ]);
    }
    table.summary.push(format!("fd_step: {}", num(f.fd_step)));
    Ok(table)
}

fn fig4<M: Model>(m: &M, opt: &OptionSpec, cfg: &RunConfig) -> Result<Table, CliError> {
    let c = mlmc_config(cfg)?;
    let f = &cfg.figures;
    let header = vec!["level", "n_steps", "samples", "log2_var_fine", "log2_var_diff", "mean_fine", "mean_diff"];
    let mut table = Table::new(&with_timing(header, cfg));
    let mut levels = Vec::with_capacity(f.max_level + 1);
    for l in 0..=f.max_level {
        let s = level_stats(m, opt, &c, l, f.level_paths)?;
        let mut row = vec![
            l.to_string(),
            (c.n0 << l).to_string(),
            s.samples.to_string(),
            num(s.fine_variance.log2()),
            num(s.variance.log2()),
            num(s.fine_mean),
            num(s.mean),
        ];
        if cfg.sim.timing {
            row.push(secs(s.wall_time));
        }
        table.push(row);
        levels.push(s);
    }
    if levels.len() > 4 {
        if let Some(beta) = ossbb::mlmc::variance_decay_rate(&levels[3.min(levels.len() - 2)..]) {
            table.summary.push(format!("beta (levels 3..{}): {}", f.max_level, num(beta)));
        }
    }
    Ok(table)
}
