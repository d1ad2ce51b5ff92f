//! Single-step kernels: Euler–Maruyama, Milstein, the one-step-survival
//! modified step and the Brownian-bridge crossing probabilities.
//!
//! Everything here works on frozen coefficients. The one-step image of a
//! Milstein step is a quadratic in the normal draw `z`,
//!
//! ```text
//! S(z) = s + mu h - sigma sigma' h / 2 + sigma sqrt(h) z + sigma sigma' h z^2 / 2,
//! ```
//!
//! so the set of draws that keep the path below the barrier is the solution
//! set of `a z^2 + b z + c < 0`, which [`survival_set`] classifies.

use crate::error::{Error, Result};
use crate::model::{Coefficients, Model};
use crate::rng::{clamped_quantile, normal_cdf};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scheme {
    Euler,
    Milstein,
}

impl Scheme {
    pub fn name(&self) -> &'static str {
        match self {
            Scheme::Euler => "euler",
            Scheme::Milstein => "milstein",
        }
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Scheme::Euler),
            "milstein" => Ok(Scheme::Milstein),
            other => Err(Error::invalid("scheme", format!("unknown scheme `{other}`"))),
        }
    }
}

/// State and frozen coefficients of one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInput {
    pub s: f64,
    pub t: f64,
    pub h: f64,
    pub barrier: f64,
    pub coeffs: Coefficients,
}

impl StepInput {
    /// Evaluates the model at `(s, t)`. Under [`Scheme::Euler`] the Milstein
    /// correction is dropped by zeroing `sigma_prime`.
    #[inline]
    pub fn new<M: Model>(model: &M, s: f64, t: f64, h: f64, barrier: f64, scheme: Scheme) -> Self {
        let mut coeffs = model.coefficients(s, t);
        if scheme == Scheme::Euler {
            coeffs.sigma_prime = 0.0;
        }
        Self {
            s,
            t,
            h,
            barrier,
            coeffs,
        }
    }

    pub fn from_coefficients(s: f64, t: f64, h: f64, barrier: f64, coeffs: Coefficients) -> Self {
        Self {
            s,
            t,
            h,
            barrier,
            coeffs,
        }
    }

    /// Coefficients `(a, b, c)` of the survival quadratic `a z^2 + b z + c < 0`.
    #[inline]
    pub fn survival_quadratic(&self) -> (f64, f64, f64) {
        let Coefficients {
            mu,
            sigma,
            sigma_prime,
        } = self.coeffs;
        let half_nu = 0.5 * sigma * sigma_prime * self.h;
        (half_nu, sigma * self.h.sqrt(), self.s + mu * self.h - half_nu - self.barrier)
    }
}

#[inline]
pub fn milstein_step(inp: &StepInput, z: f64) -> f64 {
    let c = &inp.coeffs;
    inp.s + c.mu * inp.h + c.sigma * inp.h.sqrt() * z + 0.5 * c.sigma * c.sigma_prime * inp.h * (z * z - 1.0)
}

#[inline]
pub fn euler_step(inp: &StepInput, z: f64) -> f64 {
    let c = &inp.coeffs;
    inp.s + c.mu * inp.h + c.sigma * inp.h.sqrt() * z
}

/// Shape of the set of normal draws that keep the next state below the barrier.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    /// `lo < z < hi`; either end may be infinite (linear case).
    Interval,
    /// `z < lo` or `z > hi` (negative leading coefficient).
    TwoTail,
    WholeLine,
    Empty,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurvivalSplit {
    /// Normal mass below the lower root.
    pub p_minus: f64,
    /// Normal mass of the survival set.
    pub p: f64,
    pub branch: Branch,
    pub z_lo: f64,
    pub z_hi: f64,
}

/// Leading coefficients smaller than this multiple of the linear one are
/// treated as zero.
const LINEAR_CUTOFF: f64 = 1e-12;

/// Normal measure of `{z : a z^2 + b z + c < 0}`.
pub fn survival_set(a: f64, b: f64, c: f64) -> SurvivalSplit {
    if a.abs() <= LINEAR_CUTOFF * b.abs() {
        return linear_set(b, c);
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return if a > 0.0 {
            SurvivalSplit {
                p_minus: 0.0,
                p: 0.0,
                branch: Branch::Empty,
                z_lo: f64::NAN,
                z_hi: f64::NAN,
            }
        } else {
            whole_line()
        };
    }
    let root = disc.sqrt();
    let q = -0.5 * (b + b.signum() * root);
    let (r1, r2) = if q == 0.0 { (0.0, 0.0) } else { (q / a, c / q) };
    let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
    if a > 0.0 {
        interval(lo, hi)
    } else {
        let p_minus = normal_cdf(lo);
        SurvivalSplit {
            p_minus,
            p: (p_minus + normal_cdf(-hi)).clamp(0.0, 1.0),
            branch: Branch::TwoTail,
            z_lo: lo,
            z_hi: hi,
        }
    }
}

fn linear_set(b: f64, c: f64) -> SurvivalSplit {
    if b > 0.0 {
        interval(f64::NEG_INFINITY, -c / b)
    } else if b < 0.0 {
        interval(-c / b, f64::INFINITY)
    } else if c < 0.0 {
        whole_line()
    } else {
        SurvivalSplit {
            p_minus: 0.0,
            p: 0.0,
            branch: Branch::Empty,
            z_lo: f64::NAN,
            z_hi: f64::NAN,
        }
    }
}

fn whole_line() -> SurvivalSplit {
    SurvivalSplit {
        p_minus: 0.0,
        p: 1.0,
        branch: Branch::WholeLine,
        z_lo: f64::NEG_INFINITY,
        z_hi: f64::INFINITY,
    }
}

#[inline]
fn interval(lo: f64, hi: f64) -> SurvivalSplit {
    let p_minus = normal_cdf(lo);
    // Upper-tail intervals are measured from the right to avoid cancellation.
    let p = if lo > 0.0 {
        normal_cdf(-lo) - normal_cdf(-hi)
    } else {
        normal_cdf(hi) - p_minus
    };
    SurvivalSplit {
        p_minus,
        p: p.clamp(0.0, 1.0),
        branch: Branch::Interval,
        z_lo: lo,
        z_hi: hi,
    }
}

/// Survival split of one step started strictly below the barrier.
#[inline]
pub fn survival_split(inp: &StepInput) -> Result<SurvivalSplit> {
    if !(inp.s < inp.barrier) {
        return Err(Error::AboveBarrier {
            state: inp.s,
            barrier: inp.barrier,
        });
    }
    if !(inp.coeffs.sigma > 0.0) {
        return Err(Error::invalid("sigma", format!("volatility must be positive, got {}", inp.coeffs.sigma)));
    }
    if inp.barrier == f64::INFINITY {
        return Ok(whole_line());
    }
    let (a, b, c) = inp.survival_quadratic();
    Ok(survival_set(a, b, c))
}

/// Draw inside the survival set for a uniform `u`, mapped monotonically.
/// The flag reports whether the quantile argument had to be clamped.
#[inline]
pub fn sample_survival(split: &SurvivalSplit, u: f64) -> Result<(f64, bool)> {
    let (z, clamped) = match split.branch {
        Branch::Empty => return Err(Error::DegenerateSurvival),
        _ if split.p <= 0.0 => return Err(Error::DegenerateSurvival),
        Branch::WholeLine => clamped_quantile(u),
        Branch::Interval if split.z_lo > 0.0 => {
            let tail = normal_cdf(-split.z_hi) + (1.0 - u) * split.p;
            let (x, c) = clamped_quantile(tail);
            (-x, c)
        }
        Branch::Interval => clamped_quantile(split.p_minus + u * split.p),
        Branch::TwoTail => {
            let v = u * split.p;
            if v < split.p_minus {
                clamped_quantile(v)
            } else {
                let (x, c) = clamped_quantile(split.p - v);
                (-x, c)
            }
        }
    };
    let z = match split.branch {
        Branch::Interval => z.clamp(split.z_lo, split.z_hi),
        _ => z,
    };
    Ok((z, clamped))
}

/// Result of a one-step-survival step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OssStep {
    pub next: f64,
    pub z: f64,
    pub split: SurvivalSplit,
    pub clamped: bool,
}

/// Modified Milstein step conditioned on staying below the barrier.
#[inline]
pub fn oss_step(inp: &StepInput, u: f64) -> Result<OssStep> {
    let split = survival_split(inp)?;
    oss_step_with(inp, &split, u)
}

/// As [`oss_step`] with a precomputed split.
#[inline]
pub fn oss_step_with(inp: &StepInput, split: &SurvivalSplit, u: f64) -> Result<OssStep> {
    let (z, clamped) = sample_survival(split, u)?;
    let mut next = milstein_step(inp, z);
    // A draw on the boundary of the set can round onto the barrier.
    if next >= inp.barrier {
        next = inp.barrier.next_down();
    }
    Ok(OssStep {
        next,
        z,
        split: *split,
        clamped,
    })
}

/// Probability that the Brownian bridge between `s_n` and `s_next` touched `barrier`.
#[inline]
pub fn bb_crossing_prob(s_n: f64, s_next: f64, sigma_n: f64, h: f64, barrier: f64) -> f64 {
    let x = (barrier - s_n).max(0.0);
    let y = (barrier - s_next).max(0.0);
    (-2.0 * x * y / (sigma_n * sigma_n * h)).exp()
}

/// Crossing probability for states known to be below the barrier.
pub fn oss_crossing_prob(s_n: f64, s_next: f64, sigma_n: f64, h: f64, barrier: f64) -> Result<f64> {
    for s in [s_n, s_next] {
        if !(s < barrier) {
            return Err(Error::AboveBarrier { state: s, barrier });
        }
    }
    Ok(oss_crossing_prob_unchecked(s_n, s_next, sigma_n, h, barrier))
}

#[inline]
pub(crate) fn oss_crossing_prob_unchecked(s_n: f64, s_next: f64, sigma_n: f64, h: f64, barrier: f64) -> f64 {
    (-2.0 * (barrier - s_n) * (barrier - s_next) / (sigma_n * sigma_n * h)).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Cev, Gbm};
    use crate::rng::{inverse_normal_cdf, normal_pdf, RngStream};

    // 5-point Gauss–Legendre on [-1, 1].
    const GL_X: [f64; 5] = [
        0.0,
        -0.538_469_310_105_683_1,
        0.538_469_310_105_683_1,
        -0.906_179_845_938_664,
        0.906_179_845_938_664,
    ];
    const GL_W: [f64; 5] = [
        0.568_888_888_888_888_9,
        0.478_628_670_499_366_5,
        0.478_628_670_499_366_5,
        0.236_926_885_056_189_1,
        0.236_926_885_056_189_1,
    ];

    fn gl<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> f64 {
        let m = 0.5 * (a + b);
        let r = 0.5 * (b - a);
        GL_X.iter().zip(GL_W).map(|(x, w)| w * f(m + r * x)).sum::<f64>() * r
    }

    /// Integrates `phi(z) g(z)` over `{z : image(z) < barrier}` by scanning a
    /// fine grid on [-40, 40], bisecting every sign change of
    /// `image - barrier` and applying Gauss–Legendre on each piece. Knows
    /// nothing about the closed-form roots.
    fn brute_force_survival<I: Fn(f64) -> f64, G: Fn(f64) -> f64>(image: I, barrier: f64, g: G, cells: usize) -> f64 {
        let below = |z: f64| image(z) < barrier;
        let f = |z: f64| normal_pdf(z) * g(z);
        let (lo, hi) = (-40.0, 40.0);
        let dz = (hi - lo) / cells as f64;
        let mut total = 0.0;
        for i in 0..cells {
            let a = lo + i as f64 * dz;
            let b = a + dz;
            let (ba, bb) = (below(a), below(b));
            if ba && bb {
                total += gl(&f, a, b);
            } else if ba != bb {
                let (mut l, mut r) = (a, b);
                for _ in 0..200 {
                    let m = 0.5 * (l + r);
                    if below(m) == ba {
                        l = m;
                    } else {
                        r = m;
                    }
                }
                let cut = 0.5 * (l + r);
                total += if ba { gl(&f, a, cut) } else { gl(&f, cut, b) };
            }
        }
        total
    }

    fn unit_milstein() -> StepInput {
        // mu = 0, sigma(s) = s, sigma' = 1 at s = 1, h = 1.
        StepInput::from_coefficients(1.0, 0.0, 1.0, 10.0, Coefficients::new(0.0, 1.0, 1.0))
    }

    #[test]
    fn milstein_examples() {
        let inp = unit_milstein();
        assert_eq!(milstein_step(&inp, 1.0), 2.0);
        assert_eq!(milstein_step(&inp, 0.0), 0.5);
    }

    #[test]
    fn euler_examples() {
        let inp = StepInput::from_coefficients(1.0, 0.0, 0.01, 10.0, Coefficients::new(0.0, 0.2, 0.0));
        assert!((euler_step(&inp, 1.0) - 1.02).abs() < 1e-15);
        let drift = StepInput::from_coefficients(1.0, 0.0, 0.01, 10.0, Coefficients::new(0.3, 0.2, 0.0));
        assert_eq!(euler_step(&drift, 0.0), 1.0 + 0.3 * 0.01);
        for z in [-2.0, -0.3, 0.0, 1.7] {
            assert_eq!(euler_step(&drift, z), milstein_step(&drift, z));
        }
    }

    #[test]
    fn euler_scheme_drops_the_correction() {
        let m = Gbm::new(0.05, 0.2).unwrap();
        let inp = StepInput::new(&m, 1.0, 0.0, 0.1, 1.1, Scheme::Euler);
        assert_eq!(inp.coeffs.sigma_prime, 0.0);
        assert_eq!(milstein_step(&inp, 0.7), euler_step(&inp, 0.7));
    }

    #[test]
    fn linear_split_examples() {
        let h = 0.04;
        let coeffs = Coefficients::new(0.1, 0.3, 0.0);
        // B - s - mu h = 0
        let inp = StepInput::from_coefficients(1.0, 0.0, h, 1.0 + 0.1 * h, coeffs);
        let sp = survival_split(&inp).unwrap();
        assert_eq!(sp.branch, Branch::Interval);
        assert_eq!(sp.p_minus, 0.0);
        assert!((sp.p - 0.5).abs() < 1e-15);
        // B - s - mu h = sigma sqrt(h)
        let inp = StepInput::from_coefficients(1.0, 0.0, h, 1.0 + 0.1 * h + 0.3 * 0.2, coeffs);
        let sp = survival_split(&inp).unwrap();
        assert!((sp.p - 0.841_344_746_068_542_9).abs() < 1e-12);
    }

    #[test]
    fn split_rejects_invalid_inputs() {
        let m = Gbm::new(0.05, 0.2).unwrap();
        assert!(survival_split(&StepInput::new(&m, 1.1, 0.0, 0.1, 1.1, Scheme::Milstein)).is_err());
        let bad = StepInput::from_coefficients(1.0, 0.0, 0.1, 1.1, Coefficients::new(0.0, 0.0, 0.0));
        assert!(survival_split(&bad).is_err());
    }

    #[test]
    fn split_matches_brute_force_measure_gbm() {
        let mut rng = RngStream::new(3, 0);
        for _ in 0..40 {
            let r = 0.2 * rng.next_uniform() - 0.05;
            let v = 0.05 + 0.6 * rng.next_uniform();
            let h = 10f64.powf(-3.0 + 3.0 * rng.next_uniform());
            let b = 1.1;
            let s = b * (0.6 + 0.399 * rng.next_uniform());
            let m = Gbm::new(r, v).unwrap();
            let inp = StepInput::new(&m, s, 0.0, h, b, Scheme::Milstein);
            let sp = survival_split(&inp).unwrap();
            let oracle = brute_force_survival(|z| milstein_step(&inp, z), b, |_| 1.0, 10_000);
            assert!((sp.p - oracle).abs() < 1e-6, "r={r} v={v} h={h} s={s}: {} vs {oracle}", sp.p);
        }
    }

    #[test]
    fn split_matches_brute_force_measure_degenerate_branches() {
        // negative sigma' gives the two-tail set; large drift leaves it empty
        let cases = [
            Coefficients::new(0.0, 0.3, -0.8),
            Coefficients::new(0.2, 0.5, -2.0),
            Coefficients::new(0.0, 0.3, 0.8),
            Coefficients::new(5.0, 0.3, 0.8),
            Coefficients::new(-0.5, 0.4, -3.0),
        ];
        for coeffs in cases {
            for h in [0.01, 0.25, 1.0] {
                for s in [0.5, 0.9, 1.05, 1.099] {
                    let inp = StepInput::from_coefficients(s, 0.0, h, 1.1, coeffs);
                    let sp = survival_split(&inp).unwrap();
                    let oracle = brute_force_survival(|z| milstein_step(&inp, z), 1.1, |_| 1.0, 10_000);
                    assert!((sp.p - oracle).abs() < 1e-6, "{coeffs:?} h={h} s={s}: {:?} vs {oracle}", sp);
                    if sp.branch == Branch::Interval {
                        assert!(sp.p_minus + sp.p <= 1.0 + 1e-15);
                    }
                }
            }
        }
    }

    #[test]
    fn classification_of_parabola_shapes() {
        assert_eq!(survival_set(1.0, 1.0, 1.0).branch, Branch::Empty);
        assert_eq!(survival_set(-1.0, 1.0, -1.0).branch, Branch::WholeLine);
        assert_eq!(survival_set(-1.0, 1.0, 1.0).branch, Branch::TwoTail);
        assert_eq!(survival_set(1.0, 1.0, -1.0).branch, Branch::Interval);
        let lin = survival_set(1e-20, 1.0, -0.5);
        assert_eq!((lin.branch, lin.z_lo), (Branch::Interval, f64::NEG_INFINITY));
        assert!((lin.p - normal_cdf(0.5)).abs() < 1e-15);
    }

    #[test]
    fn one_step_conditioning_identity() {
        // E[f(S(Z)) 1{S(Z) < B}] = p * E[f(S~(U))] for f(s) = s and f(s) = s^2.
        let m = Cev::new(0.05, 0.25, 0.6).unwrap();
        for (s, h) in [(1.0, 0.25), (1.08, 0.0625), (0.7, 1.0)] {
            let inp = StepInput::new(&m, s, 0.0, h, 1.1, Scheme::Milstein);
            let sp = survival_split(&inp).unwrap();
            for power in [1, 2] {
                let f = |x: f64| x.powi(power);
                let lhs = brute_force_survival(|z| milstein_step(&inp, z), 1.1, |z| f(milstein_step(&inp, z)), 10_000);
                // u = t^3 (10 - 15 t + 6 t^2) clusters nodes at both ends.
                let g = |t: f64| {
                    let u = t * t * t * (10.0 - 15.0 * t + 6.0 * t * t);
                    let du = 30.0 * t * t * (1.0 - t) * (1.0 - t);
                    if u <= 0.0 || u >= 1.0 {
                        return 0.0;
                    }
                    f(oss_step_with(&inp, &sp, u).unwrap().next) * du
                };
                let cells = 10_000;
                let rhs = sp.p * (0..cells).map(|i| gl(&g, i as f64 / cells as f64, (i + 1) as f64 / cells as f64)).sum::<f64>();
                assert!((lhs - rhs).abs() < 1e-6, "s={s} h={h} f=s^{power}: {lhs} vs {rhs}");
            }
        }
    }

    #[test]
    fn oss_step_stays_below_barrier() {
        let mut rng = RngStream::new(9, 1);
        for _ in 0..100_000 {
            let v = 0.02 + 0.8 * rng.next_uniform();
            let g = -1.0 + 2.5 * rng.next_uniform();
            let m = Cev::new(0.3 * rng.next_uniform() - 0.1, v, g).unwrap();
            let b = 1.1;
            let s = b * (0.5 + 0.5 * rng.next_uniform()).min(1.0 - 1e-12);
            let h = 10f64.powf(-4.0 + 4.0 * rng.next_uniform());
            let inp = StepInput::new(&m, s, 0.0, h, b, Scheme::Milstein);
            let u = rng.next_uniform();
            match oss_step(&inp, u) {
                Ok(st) => assert!(st.next < b, "{inp:?} u={u} -> {}", st.next),
                Err(Error::DegenerateSurvival) => {}
                Err(e) => panic!("{e}"),
            }
        }
    }

    #[test]
    fn oss_step_unconstrained_limit() {
        let m = Gbm::new(0.05, 0.2).unwrap();
        let inp = StepInput::new(&m, 1.0, 0.0, 1.0 / 64.0, 1e12, Scheme::Milstein);
        for u in [1e-6, 0.1, 0.5, 0.9, 1.0 - 1e-6] {
            let st = oss_step(&inp, u).unwrap();
            assert_eq!(st.split.p, 1.0);
            let plain = milstein_step(&inp, inverse_normal_cdf(u));
            assert!((st.next - plain).abs() < 1e-14);
        }
    }

    #[test]
    fn oss_step_linear_closed_form() {
        let m = Gbm::with_zero_sigma_prime(0.05, 0.2).unwrap();
        let (s, h) = (1.05, 0.01);
        let inp = StepInput::new(&m, s, 0.0, h, 1.1, Scheme::Milstein);
        let st = oss_step(&inp, 0.5).unwrap();
        let p = normal_cdf((1.1 - s - 0.05 * s * h) / (0.2 * s * h.sqrt()));
        let want = s + 0.05 * s * h + 0.2 * s * h.sqrt() * inverse_normal_cdf(0.5 * p);
        assert!((st.next - want).abs() < 1e-14);
    }

    #[test]
    fn degenerate_survival_is_signalled() {
        let inp = StepInput::from_coefficients(1.0, 0.0, 1.0, 1.1, Coefficients::new(50.0, 0.1, 0.5));
        assert_eq!(survival_split(&inp).unwrap().branch, Branch::Empty);
        assert_eq!(oss_step(&inp, 0.5), Err(Error::DegenerateSurvival));
    }

    #[test]
    fn crossing_probability_examples() {
        let (sigma, h, b) = (0.2, 0.01, 1.1);
        assert_eq!(bb_crossing_prob(1.0, 1.2, sigma, h, b), 1.0);
        assert_eq!(bb_crossing_prob(b, b, sigma, h, b), 1.0);
        let d = sigma * h.sqrt() / 2f64.sqrt();
        let sym = bb_crossing_prob(b - d, b - d, sigma, h, b);
        assert!((sym - (-1f64).exp()).abs() < 1e-12);
        assert!((oss_crossing_prob(b - d, b - d, sigma, h, b).unwrap() - (-1f64).exp()).abs() < 1e-12);
        assert!(oss_crossing_prob(0.5, 0.6, sigma, h, b).unwrap() < 1e-12);
        assert!(oss_crossing_prob(b, 1.0, sigma, h, b).is_err());
        assert!(oss_crossing_prob(1.0, 1.2, sigma, h, b).is_err());
        let mut rng = RngStream::new(1, 1);
        for _ in 0..1000 {
            let x = b - 0.3 * rng.next_uniform();
            let y = b - 0.3 * rng.next_uniform();
            assert_eq!(bb_crossing_prob(x, y, sigma, h, b), oss_crossing_prob(x, y, sigma, h, b).unwrap());
        }
    }
}
