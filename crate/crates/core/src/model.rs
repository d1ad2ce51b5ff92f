//! Scalar SDE models, the barrier contract and the differentiable parameter set.
//!
//! A model supplies drift `mu(s, t)`, volatility `sigma(s, t)` and the explicit
//! spatial derivative `sigma_prime(s, t)`, together with their partials in `s`
//! and in each model parameter. Declaring `sigma_prime` identically zero routes
//! every step through the Euler form of the schemes.

use std::fmt;

use crate::error::{Error, Result};

/// Drift, volatility and the spatial volatility derivative at one point.
/// The same layout carries partial derivatives of the three coefficients.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Coefficients {
    pub mu: f64,
    pub sigma: f64,
    pub sigma_prime: f64,
}

impl Coefficients {
    pub fn new(mu: f64, sigma: f64, sigma_prime: f64) -> Self {
        Self {
            mu,
            sigma,
            sigma_prime,
        }
    }
}

pub trait Model: Clone + Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;

    fn param_names(&self) -> &'static [&'static str];

    fn param(&self, idx: usize) -> f64;

    fn set_param(&mut self, idx: usize, value: f64) -> Result<()>;

    fn coefficients(&self, s: f64, t: f64) -> Coefficients;

    /// Partials of `(mu, sigma, sigma_prime)` with respect to `s`.
    fn spatial_partials(&self, s: f64, t: f64) -> Coefficients;

    /// Partials of `(mu, sigma, sigma_prime)` with respect to parameter `idx`.
    fn param_partials(&self, s: f64, t: f64, idx: usize) -> Coefficients;

    /// Continuously compounded rate used when discounting is enabled.
    fn rate(&self) -> f64;

    /// Index of the parameter that is the discount rate, if any.
    fn rate_param(&self) -> Option<usize>;

    fn param_index(&self, name: &str) -> Option<usize> {
        self.param_names().iter().position(|n| *n == name)
    }
}

/// Geometric Brownian motion `dS = r S dt + sigma S dW`.
///
/// `sigma_prime` is `sigma` by default. [`Gbm::with_zero_sigma_prime`] builds
/// the variant that declares it zero, which turns Milstein into Euler.
#[derive(Clone, Debug, PartialEq)]
pub struct Gbm {
    rate: f64,
    vol: f64,
    milstein_term: bool,
}

impl Gbm {
    const PARAMS: [&'static str; 2] = ["r", "sigma"];

    pub fn new(rate: f64, vol: f64) -> Result<Self> {
        check_vol("sigma", vol)?;
        check_finite("r", rate)?;
        Ok(Self {
            rate,
            vol,
            milstein_term: true,
        })
    }

    pub fn with_zero_sigma_prime(rate: f64, vol: f64) -> Result<Self> {
        let mut m = Self::new(rate, vol)?;
        m.milstein_term = false;
        Ok(m)
    }

    pub fn vol(&self) -> f64 {
        self.vol
    }

    pub fn has_milstein_term(&self) -> bool {
        self.milstein_term
    }
}

impl Model for Gbm {
    fn name(&self) -> &'static str {
        "gbm"
    }

    fn param_names(&self) -> &'static [&'static str] {
        &Self::PARAMS
    }

    fn param(&self, idx: usize) -> f64 {
        match idx {
            0 => self.rate,
            1 => self.vol,
            _ => panic!("gbm has no parameter {idx}"),
        }
    }

    fn set_param(&mut self, idx: usize, value: f64) -> Result<()> {
        match idx {
            0 => {
                check_finite("r", value)?;
                self.rate = value;
            }
            1 => {
                check_vol("sigma", value)?;
                self.vol = value;
            }
            _ => return Err(Error::UnknownComponent(format!("gbm parameter #{idx}"))),
        }
        Ok(())
    }

    #[inline]
    fn coefficients(&self, s: f64, _t: f64) -> Coefficients {
        let sp = if self.milstein_term { self.vol } else { 0.0 };
        Coefficients::new(self.rate * s, self.vol * s, sp)
    }

    #[inline]
    fn spatial_partials(&self, _s: f64, _t: f64) -> Coefficients {
        Coefficients::new(self.rate, self.vol, 0.0)
    }

    #[inline]
    fn param_partials(&self, s: f64, _t: f64, idx: usize) -> Coefficients {
        match idx {
            0 => Coefficients::new(s, 0.0, 0.0),
            1 => Coefficients::new(0.0, s, if self.milstein_term { 1.0 } else { 0.0 }),
            _ => Coefficients::default(),
        }
    }

    fn rate(&self) -> f64 {
        self.rate
    }

    fn rate_param(&self) -> Option<usize> {
        Some(0)
    }
}

/// Constant-elasticity local volatility `dS = r S dt + v S^gamma dW`,
/// so `sigma'(s) = gamma v s^(gamma - 1)` varies with the state.
#[derive(Clone, Debug, PartialEq)]
pub struct Cev {
    rate: f64,
    scale: f64,
    elasticity: f64,
}

impl Cev {
    const PARAMS: [&'static str; 3] = ["r", "v", "gamma"];

    pub fn new(rate: f64, scale: f64, elasticity: f64) -> Result<Self> {
        check_finite("r", rate)?;
        check_vol("v", scale)?;
        check_finite("gamma", elasticity)?;
        Ok(Self {
            rate,
            scale,
            elasticity,
        })
    }
}

impl Model for Cev {
    fn name(&self) -> &'static str {
        "cev"
    }

    fn param_names(&self) -> &'static [&'static str] {
        &Self::PARAMS
    }

    fn param(&self, idx: usize) -> f64 {
        match idx {
            0 => self.rate,
            1 => self.scale,
            2 => self.elasticity,
            _ => panic!("cev has no parameter {idx}"),
        }
    }

    fn set_param(&mut self, idx: usize, value: f64) -> Result<()> {
        match idx {
            0 => {
                check_finite("r", value)?;
                self.rate = value;
            }
            1 => {
                check_vol("v", value)?;
                self.scale = value;
            }
            2 => {
                check_finite("gamma", value)?;
                self.elasticity = value;
            }
            _ => return Err(Error::UnknownComponent(format!("cev parameter #{idx}"))),
        }
        Ok(())
    }

    #[inline]
    fn coefficients(&self, s: f64, _t: f64) -> Coefficients {
        let g = self.elasticity;
        let pow = s.powf(g - 1.0);
        Coefficients::new(self.rate * s, self.scale * pow * s, g * self.scale * pow)
    }

    #[inline]
    fn spatial_partials(&self, s: f64, _t: f64) -> Coefficients {
        let g = self.elasticity;
        let pow = s.powf(g - 1.0);
        Coefficients::new(
            self.rate,
            g * self.scale * pow,
            g * (g - 1.0) * self.scale * pow / s,
        )
    }

    #[inline]
    fn param_partials(&self, s: f64, _t: f64, idx: usize) -> Coefficients {
        let g = self.elasticity;
        let pow = s.powf(g - 1.0);
        match idx {
            0 => Coefficients::new(s, 0.0, 0.0),
            1 => Coefficients::new(0.0, pow * s, g * pow),
            2 => {
                let ln = s.ln();
                Coefficients::new(
                    0.0,
                    self.scale * pow * s * ln,
                    self.scale * pow * (1.0 + g * ln),
                )
            }
            _ => Coefficients::default(),
        }
    }

    fn rate(&self) -> f64 {
        self.rate
    }

    fn rate_param(&self) -> Option<usize> {
        Some(0)
    }
}

fn check_vol(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(name, format!("volatility must be positive, got {v}")))
    }
}

fn check_finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(name, format!("must be finite, got {v}")))
    }
}

/// Continuously monitored up-and-out call on the path started at `spot`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptionSpec {
    pub spot: f64,
    pub strike: f64,
    pub barrier: f64,
    pub t0: f64,
    pub maturity: f64,
}

impl OptionSpec {
    pub fn new(spot: f64, strike: f64, barrier: f64, t0: f64, maturity: f64) -> Result<Self> {
        let spec = Self {
            spot,
            strike,
            barrier,
            t0,
            maturity,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.spot.is_finite() && self.spot > 0.0) {
            return Err(Error::invalid("S0", format!("must be positive, got {}", self.spot)));
        }
        if !(self.strike.is_finite() && self.strike >= 0.0) {
            return Err(Error::invalid("K", format!("must be non-negative, got {}", self.strike)));
        }
        // B = +inf is allowed and switches the barrier off.
        if self.barrier.is_nan() || self.barrier <= self.strike {
            return Err(Error::invalid(
                "B",
                format!("barrier {} must exceed strike {}", self.barrier, self.strike),
            ));
        }
        if !(self.maturity.is_finite() && self.t0.is_finite() && self.maturity > self.t0) {
            return Err(Error::invalid(
                "T",
                format!("maturity {} must exceed t0 {}", self.maturity, self.t0),
            ));
        }
        Ok(())
    }

    pub fn tenor(&self) -> f64 {
        self.maturity - self.t0
    }

    #[inline]
    pub fn payoff(&self, s_t: f64) -> f64 {
        payoff_q(s_t, self)
    }
}

/// Call payoff `(s_T - K)^+`; knockout is handled by the estimators.
#[inline]
pub fn payoff_q(s_t: f64, opt: &OptionSpec) -> f64 {
    (s_t - opt.strike).max(0.0)
}

/// A differentiable input: spot, strike, barrier or a model parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Component {
    Spot,
    Strike,
    Barrier,
    Model(usize),
}

impl Component {
    pub fn name<M: Model>(&self, model: &M) -> String {
        match self {
            Component::Spot => "S0".into(),
            Component::Strike => "K".into(),
            Component::Barrier => "B".into(),
            Component::Model(i) => model.param_names()[*i].into(),
        }
    }

    pub fn parse<M: Model>(name: &str, model: &M) -> Result<Self> {
        match name {
            "S0" | "s0" | "spot" => Ok(Component::Spot),
            "K" | "strike" => Ok(Component::Strike),
            "B" | "barrier" => Ok(Component::Barrier),
            other => model
                .param_index(other)
                .map(Component::Model)
                .ok_or_else(|| Error::UnknownComponent(other.to_string())),
        }
    }

    pub fn value<M: Model>(&self, model: &M, opt: &OptionSpec) -> f64 {
        match self {
            Component::Spot => opt.spot,
            Component::Strike => opt.strike,
            Component::Barrier => opt.barrier,
            Component::Model(i) => model.param(*i),
        }
    }

    /// Copies of `(model, opt)` with this component set to `value`.
    pub fn with_value<M: Model>(&self, model: &M, opt: &OptionSpec, value: f64) -> Result<(M, OptionSpec)> {
        let mut m = model.clone();
        let mut o = *opt;
        match self {
            Component::Spot => o.spot = value,
            Component::Strike => o.strike = value,
            Component::Barrier => o.barrier = value,
            Component::Model(i) => m.set_param(*i, value)?,
        }
        o.validate()?;
        Ok((m, o))
    }
}

/// Named view of every differentiable input of a `(model, option)` pair.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    entries: Vec<(Component, String, f64)>,
}

impl ParamVector {
    pub fn new<M: Model>(model: &M, opt: &OptionSpec) -> Self {
        let mut comps = vec![Component::Spot, Component::Strike, Component::Barrier];
        comps.extend((0..model.param_names().len()).map(Component::Model));
        let entries = comps
            .into_iter()
            .map(|c| (c, c.name(model), c.value(model, opt)))
            .collect();
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|e| e.1 == name).map(|e| e.2)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Component, &str, f64)> {
        self.entries.iter().map(|(c, n, v)| (*c, n.as_str(), *v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-6 * a.abs().max(b.abs()).max(1e-3)
    }

    fn central<F: Fn(f64) -> f64>(f: F, x: f64) -> f64 {
        let h = 1e-5 * x.abs().max(1e-2);
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    fn check_model_derivatives<M: Model>(model: &M, states: &[f64], check_sigma_prime: bool) {
        for &s in states {
            for &t in &[0.0, 0.5, 1.0] {
                let c = model.coefficients(s, t);
                let ds = model.spatial_partials(s, t);
                if check_sigma_prime {
                    let fd = central(|x| model.coefficients(x, t).sigma, s);
                    assert!(close(c.sigma_prime, fd), "sigma' at s={s}: {} vs {fd}", c.sigma_prime);
                }
                let fd_mu = central(|x| model.coefficients(x, t).mu, s);
                let fd_sig = central(|x| model.coefficients(x, t).sigma, s);
                let fd_sp = central(|x| model.coefficients(x, t).sigma_prime, s);
                assert!(close(ds.mu, fd_mu) && close(ds.sigma, fd_sig) && close(ds.sigma_prime, fd_sp));
                for i in 0..model.param_names().len() {
                    let p = model.param_partials(s, t, i);
                    let bumped = |v: f64| {
                        let mut m = model.clone();
                        m.set_param(i, v).unwrap();
                        m.coefficients(s, t)
                    };
                    let x = model.param(i);
                    let fd_mu = central(|v| bumped(v).mu, x);
                    let fd_sig = central(|v| bumped(v).sigma, x);
                    let fd_sp = central(|v| bumped(v).sigma_prime, x);
                    assert!(close(p.mu, fd_mu), "{}: dmu {} vs {fd_mu}", model.param_names()[i], p.mu);
                    assert!(close(p.sigma, fd_sig), "{}: dsigma {} vs {fd_sig}", model.param_names()[i], p.sigma);
                    assert!(close(p.sigma_prime, fd_sp), "{}: dsigma' {} vs {fd_sp}", model.param_names()[i], p.sigma_prime);
                }
            }
        }
    }

    #[test]
    fn payoff_branches() {
        let opt = OptionSpec::new(1.0, 1.0, 1.1, 0.0, 1.0).unwrap();
        assert_eq!(payoff_q(1.0, &opt), 0.0);
        assert!((payoff_q(1.1, &opt) - 0.1).abs() < 1e-15);
        assert_eq!(payoff_q(0.5, &opt), 0.0);
    }

    #[test]
    fn gbm_direct_evaluation() {
        let m = Gbm::new(0.05, 0.2).unwrap();
        let c = m.coefficients(1.0, 0.0);
        assert_eq!((c.mu, c.sigma, c.sigma_prime), (0.05, 0.2, 0.2));
        let z = Gbm::new(0.0, 0.2).unwrap();
        assert_eq!(z.coefficients(2.0, 0.0).mu, 0.0);
        assert_eq!(m.param_partials(2.0, 0.0, 1).sigma, 2.0);
    }

    #[test]
    fn gbm_rejects_non_positive_vol() {
        assert!(Gbm::new(0.05, 0.0).is_err());
        assert!(Gbm::new(0.05, -0.2).is_err());
        let mut m = Gbm::new(0.05, 0.2).unwrap();
        assert!(m.set_param(1, 0.0).is_err());
    }

    #[test]
    fn gbm_zero_sigma_prime_variant_is_distinct() {
        let a = Gbm::new(0.05, 0.2).unwrap();
        let b = Gbm::with_zero_sigma_prime(0.05, 0.2).unwrap();
        assert_ne!(a, b);
        assert_eq!(b.coefficients(1.3, 0.0).sigma_prime, 0.0);
        assert_eq!(a.coefficients(1.3, 0.0).sigma, b.coefficients(1.3, 0.0).sigma);
    }

    #[test]
    fn bundled_models_have_consistent_partials() {
        let states = [0.5, 0.8, 1.0, 1.05, 1.2, 2.0];
        for (r, v) in [(0.05, 0.2), (0.0, 0.35), (-0.01, 0.1)] {
            check_model_derivatives(&Gbm::new(r, v).unwrap(), &states, true);
            check_model_derivatives(&Gbm::with_zero_sigma_prime(r, v).unwrap(), &states, false);
        }
        for (r, v, g) in [(0.05, 0.2, 0.5), (0.02, 0.3, 1.3), (0.0, 0.25, -0.4)] {
            check_model_derivatives(&Cev::new(r, v, g).unwrap(), &states, true);
        }
    }

    #[test]
    fn option_validation() {
        assert!(OptionSpec::new(1.0, 1.0, 1.1, 0.0, 1.0).is_ok());
        assert!(OptionSpec::new(1.0, 1.2, 1.1, 0.0, 1.0).is_err());
        assert!(OptionSpec::new(1.0, -1.0, 1.1, 0.0, 1.0).is_err());
        assert!(OptionSpec::new(1.0, 1.0, 1.1, 1.0, 1.0).is_err());
        assert!(OptionSpec::new(1.0, 1.0, f64::INFINITY, 0.0, 1.0).is_ok());
    }

    #[test]
    fn components_round_trip_through_names() {
        let m = Cev::new(0.05, 0.2, 0.7).unwrap();
        let opt = OptionSpec::new(1.0, 1.0, 1.1, 0.0, 1.0).unwrap();
        let pv = ParamVector::new(&m, &opt);
        assert_eq!(pv.len(), 6);
        let names: Vec<&str> = pv.iter().map(|e| e.1).collect();
        assert_eq!(names, ["S0", "K", "B", "r", "v", "gamma"]);
        for (c, name, v) in pv.iter() {
            assert_eq!(Component::parse(name, &m).unwrap(), c);
            assert_eq!(c.value(&m, &opt), v);
        }
        assert!(Component::parse("nope", &m).is_err());
        let (m2, _) = Component::Model(2).with_value(&m, &opt, 0.9).unwrap();
        assert_eq!(m2.param(2), 0.9);
        assert!(Component::Strike.with_value(&m, &opt, 1.2).is_err());
    }
}
