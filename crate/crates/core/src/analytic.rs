//! Black–Scholes closed forms: European call and put, the continuously
//! monitored up-and-out call, and finite-difference Greeks of the latter.

use crate::error::{Error, Result};
use crate::estimators::EstimatorReport;
use crate::model::{Gbm, Model, OptionSpec};
use crate::rng::normal_cdf;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BsParams {
    pub spot: f64,
    pub strike: f64,
    pub barrier: f64,
    pub rate: f64,
    pub vol: f64,
    /// Time to maturity `T - t0`.
    pub tenor: f64,
}

impl BsParams {
    pub fn new(spot: f64, strike: f64, barrier: f64, rate: f64, vol: f64, tenor: f64) -> Result<Self> {
        let p = Self {
            spot,
            strike,
            barrier,
            rate,
            vol,
            tenor,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn from_contract(model: &Gbm, opt: &OptionSpec) -> Result<Self> {
        Self::new(opt.spot, opt.strike, opt.barrier, model.rate(), model.vol(), opt.tenor())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.vol > 0.0 && self.vol.is_finite()) {
            return Err(Error::invalid("sigma", format!("must be positive, got {}", self.vol)));
        }
        if !(self.tenor > 0.0 && self.tenor.is_finite()) {
            return Err(Error::invalid("T", format!("tenor must be positive, got {}", self.tenor)));
        }
        if !(self.spot > 0.0 && self.spot.is_finite()) {
            return Err(Error::invalid("S0", format!("must be positive, got {}", self.spot)));
        }
        if !(self.strike >= 0.0 && self.barrier > self.strike) {
            return Err(Error::invalid(
                "B",
                format!("need B > K >= 0, got B={} K={}", self.barrier, self.strike),
            ));
        }
        if !self.rate.is_finite() {
            return Err(Error::invalid("r", "must be finite"));
        }
        Ok(())
    }

    pub fn discount(&self) -> f64 {
        (-self.rate * self.tenor).exp()
    }
}

pub fn bs_call(p: &BsParams) -> f64 {
    let df = p.discount();
    if p.strike == 0.0 {
        return p.spot;
    }
    let sd = p.vol * p.tenor.sqrt();
    let d1 = ((p.spot / p.strike).ln() + p.rate * p.tenor) / sd + 0.5 * sd;
    p.spot * normal_cdf(d1) - p.strike * df * normal_cdf(d1 - sd)
}

pub fn bs_put(p: &BsParams) -> f64 {
    let df = p.discount();
    if p.strike == 0.0 {
        return 0.0;
    }
    let sd = p.vol * p.tenor.sqrt();
    let d1 = ((p.spot / p.strike).ln() + p.rate * p.tenor) / sd + 0.5 * sd;
    p.strike * df * normal_cdf(sd - d1) - p.spot * normal_cdf(-d1)
}

/// Continuously monitored up-and-out call (strike below barrier).
pub fn bs_up_and_out_call(p: &BsParams) -> f64 {
    if p.spot >= p.barrier {
        return 0.0;
    }
    if p.barrier == f64::INFINITY {
        return bs_call(p);
    }
    let (s, k, h) = (p.spot, p.strike, p.barrier);
    let sd = p.vol * p.tenor.sqrt();
    let df = p.discount();
    let mu = (p.rate - 0.5 * p.vol * p.vol) / (p.vol * p.vol);
    let lift = (1.0 + mu) * sd;

    // vanilla call minus the part finishing above the barrier
    let x1 = (s / k).ln() / sd + lift;
    let x2 = (s / h).ln() / sd + lift;
    let a = s * normal_cdf(x1) - k * df * normal_cdf(x1 - sd);
    let b = s * normal_cdf(x2) - k * df * normal_cdf(x2 - sd);
    // reflected paths
    let ratio = h / s;
    let y1 = (h * h / (s * k)).ln() / sd + lift;
    let y2 = (h / s).ln() / sd + lift;
    let pow_s = ratio.powf(2.0 * (mu + 1.0));
    let pow_k = ratio.powf(2.0 * mu);
    let c = s * pow_s * normal_cdf(-y1) - k * df * pow_k * normal_cdf(sd - y1);
    let d = s * pow_s * normal_cdf(-y2) - k * df * pow_k * normal_cdf(sd - y2);
    (a - b + c - d).max(0.0)
}

/// Inputs of [`BsParams`] that the closed-form Greeks can differentiate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BsInput {
    Spot,
    Strike,
    Barrier,
    Rate,
    Vol,
    Tenor,
}

impl BsInput {
    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "S0" | "s0" | "spot" => BsInput::Spot,
            "K" | "strike" => BsInput::Strike,
            "B" | "barrier" => BsInput::Barrier,
            "r" | "rate" => BsInput::Rate,
            "sigma" | "vol" => BsInput::Vol,
            "T" | "tenor" => BsInput::Tenor,
            other => return Err(Error::UnknownComponent(other.to_string())),
        })
    }

    fn get(&self, p: &BsParams) -> f64 {
        match self {
            BsInput::Spot => p.spot,
            BsInput::Strike => p.strike,
            BsInput::Barrier => p.barrier,
            BsInput::Rate => p.rate,
            BsInput::Vol => p.vol,
            BsInput::Tenor => p.tenor,
        }
    }

    fn set(&self, p: &BsParams, v: f64) -> BsParams {
        let mut q = *p;
        match self {
            BsInput::Spot => q.spot = v,
            BsInput::Strike => q.strike = v,
            BsInput::Barrier => q.barrier = v,
            BsInput::Rate => q.rate = v,
            BsInput::Vol => q.vol = v,
            BsInput::Tenor => q.tenor = v,
        }
        q
    }
}

/// First or second derivative of the up-and-out price by central differences
/// with one Richardson step; base step `1e-5` times the input's scale.
pub fn bs_barrier_greeks(p: &BsParams, input: BsInput, order: u8) -> Result<f64> {
    p.validate()?;
    let x = input.get(p);
    let step = 1e-5 * x.abs().max(1.0);
    let f = |v: f64| bs_up_and_out_call(&input.set(p, v));
    let diff = |h: f64| match order {
        1 => Ok((f(x + h) - f(x - h)) / (2.0 * h)),
        2 => Ok((f(x + h) - 2.0 * f(x) + f(x - h)) / (h * h)),
        _ => Err(Error::invalid("order", format!("must be 1 or 2, got {order}"))),
    };
    let coarse = diff(step)?;
    let fine = diff(0.5 * step)?;
    Ok((4.0 * fine - coarse) / 3.0)
}

/// A closed-form price that agreed with an independent Monte Carlo estimate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArmedOracle {
    pub price: f64,
    pub check_estimate: f64,
    pub check_std_error: f64,
}

impl ArmedOracle {
    /// Standardised distance between the closed form and the check run.
    pub fn z_score(&self) -> f64 {
        (self.price - self.check_estimate) / self.check_std_error
    }
}

/// Arms the up-and-out closed form against a fine-grid estimate of the same
/// contract and discounting convention. Fails unless they agree within
/// `tolerance` standard errors.
pub fn arm_oracle(p: &BsParams, discounted: bool, check: &EstimatorReport, tolerance: f64) -> Result<ArmedOracle> {
    let mut price = bs_up_and_out_call(p);
    if !discounted {
        price /= p.discount();
    }
    let armed = ArmedOracle {
        price,
        check_estimate: check.mean,
        check_std_error: check.std_error,
    };
    if (price - check.mean).abs() <= tolerance * check.std_error {
        Ok(armed)
    } else {
        Err(Error::OracleMismatch {
            closed_form: price,
            estimate: check.mean,
            std_error: check.std_error,
        })
    }
}
