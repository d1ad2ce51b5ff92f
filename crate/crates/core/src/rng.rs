//! Reproducible uniform streams and the standard normal distribution.
//!
//! Every Monte Carlo path owns a [`RngStream`] addressed by `(seed, stream_id)`.
//! The stream is a ChaCha8 keystream, so any position can be reached directly
//! and results do not depend on how paths are scheduled across workers.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::Error;

pub const SQRT_2PI: f64 = 2.506_628_274_631_000_5;

/// Arguments of [`clamped_quantile`] are forced into this range.
pub const QUANTILE_FLOOR: f64 = f64::MIN_POSITIVE;
pub const QUANTILE_CEIL: f64 = 1.0 - f64::EPSILON / 2.0;

/// Source of uniforms on (0,1). Implemented by [`RngStream`] and by
/// pre-drawn buffers so a path can be replayed with fixed draws.
pub trait UniformSource {
    fn next_uniform(&mut self) -> f64;
}

/// Counter-based uniform stream.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    core: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut core = ChaCha8Rng::seed_from_u64(seed);
        core.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            core,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Index of the next uniform to be drawn.
    pub fn position(&self) -> u64 {
        (self.core.get_word_pos() / 2) as u64
    }

    /// Jump so that the next draw is the `index`-th uniform of the stream.
    pub fn seek(&mut self, index: u64) {
        self.core.set_word_pos(2 * index as u128);
    }

    /// The `index`-th uniform of stream `(seed, stream_id)`.
    pub fn uniform_at(seed: u64, stream_id: u64, index: u64) -> f64 {
        let mut s = Self::new(seed, stream_id);
        s.seek(index);
        s.next_uniform()
    }

    /// Uniform on the open interval (0,1): 53 random bits centred in their cell.
    #[inline]
    pub fn next_uniform(&mut self) -> f64 {
        let bits = self.core.next_u64() >> 11;
        (bits as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    pub fn fill_uniform(&mut self, out: &mut [f64]) {
        for u in out {
            *u = self.next_uniform();
        }
    }
}

impl UniformSource for RngStream {
    #[inline]
    fn next_uniform(&mut self) -> f64 {
        RngStream::next_uniform(self)
    }
}

/// Replays a fixed slice of uniforms. Panics if the path asks for more draws
/// than were supplied.
#[derive(Clone, Debug)]
pub struct ReplayUniforms<'a> {
    draws: &'a [f64],
    next: usize,
}

impl<'a> ReplayUniforms<'a> {
    pub fn new(draws: &'a [f64]) -> Self {
        Self { draws, next: 0 }
    }

    pub fn consumed(&self) -> usize {
        self.next
    }
}

impl UniformSource for ReplayUniforms<'_> {
    #[inline]
    fn next_uniform(&mut self) -> f64 {
        let u = self.draws[self.next];
        self.next += 1;
        u
    }
}

#[inline]
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / SQRT_2PI
}

/// Standard normal distribution function.
///
/// Cephes rational approximations for erf/erfc; the tail keeps full relative
/// accuracy because `exp(-t^2)` is evaluated with a split argument.
pub fn normal_cdf(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    // The upper tail is below half an ulp of 1 from here on.
    if x >= 8.3 {
        return 1.0;
    }
    let t = x * std::f64::consts::FRAC_1_SQRT_2;
    if t.abs() < 1.0 {
        0.5 + 0.5 * erf_small(t)
    } else {
        let tail = 0.5 * erfc_large(t.abs());
        if x > 0.0 {
            1.0 - tail
        } else {
            tail
        }
    }
}

/// `1 - Φ(x)` without cancellation for large positive `x`.
pub fn normal_sf(x: f64) -> f64 {
    normal_cdf(-x)
}

#[inline]
fn polevl(x: f64, coeffs: &[f64]) -> f64 {
    coeffs.iter().fold(0.0, |acc, &c| acc * x + c)
}

#[inline]
fn p1evl(x: f64, coeffs: &[f64]) -> f64 {
    coeffs.iter().fold(1.0, |acc, &c| acc * x + c)
}

// erf(x) for |x| < 1.
#[allow(clippy::excessive_precision)]
fn erf_small(x: f64) -> f64 {
    const T: [f64; 5] = [
        9.60497373987051638749e0,
        9.00260197203842689217e1,
        2.23200534594684319226e3,
        7.00332514112805075473e3,
        5.55923013010394962768e4,
    ];
    const U: [f64; 5] = [
        3.35617141647503099647e1,
        5.21357949780152679795e2,
        4.59432382970980127987e3,
        2.26290000613890934246e4,
        4.92673942608635921086e4,
    ];
    let z = x * x;
    x * polevl(z, &T) / p1evl(z, &U)
}

// erfc(x) for x >= 1.
#[allow(clippy::excessive_precision)]
fn erfc_large(x: f64) -> f64 {
    const P: [f64; 9] = [
        2.46196981473530512524e-10,
        5.64189564831068821977e-1,
        7.46321056442269912687e0,
        4.86371970985681366614e1,
        1.96520832956077098242e2,
        5.26445194995477358631e2,
        9.34528527171957607540e2,
        1.02755188689515710272e3,
        5.57535335369399327526e2,
    ];
    const Q: [f64; 8] = [
        1.32281951154744992508e1,
        8.67072140885989742329e1,
        3.54937778887819891062e2,
        9.75708501743205489753e2,
        1.82390916687909736289e3,
        2.24633760818710981792e3,
        1.65666309194161350182e3,
        5.57535340817727675546e2,
    ];
    const R: [f64; 6] = [
        5.64189583547755073984e-1,
        1.27536670759978104416e0,
        5.01905042251180477414e0,
        6.16021097993053585195e0,
        7.40974269950448939160e0,
        2.97886665372100240670e0,
    ];
    const S: [f64; 6] = [
        2.26052863220117276590e0,
        9.39603524938001434673e0,
        1.20489539808096656605e1,
        1.70814450747565897222e1,
        9.60896809063285878198e0,
        3.36907645100081516050e0,
    ];
    if x * x > 745.2 {
        return 0.0;
    }
    let e = exp_neg_square(x);
    let (p, q) = if x < 8.0 {
        (polevl(x, &P), p1evl(x, &Q))
    } else {
        (polevl(x, &R), p1evl(x, &S))
    };
    e * p / q
}

// exp(-x^2) with x^2 split into an exactly representable head and a small tail.
fn exp_neg_square(x: f64) -> f64 {
    let head = (x * 128.0).floor() / 128.0;
    let tail = x - head;
    let big = head * head;
    let small = 2.0 * head * tail + tail * tail;
    (-big).exp() * (-small).exp()
}

/// Checked standard normal quantile.
pub fn normal_quantile(p: f64) -> Result<f64, Error> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::ProbabilityOutOfRange(p));
    }
    Ok(inverse_normal_cdf(p))
}

/// Quantile with the argument clamped into `[QUANTILE_FLOOR, QUANTILE_CEIL]`.
/// Returns the value and whether the clamp was active.
#[inline]
pub fn clamped_quantile(p: f64) -> (f64, bool) {
    if p < QUANTILE_FLOOR {
        (inverse_normal_cdf(QUANTILE_FLOOR), true)
    } else if p > QUANTILE_CEIL {
        (inverse_normal_cdf(QUANTILE_CEIL), true)
    } else {
        (inverse_normal_cdf(p), false)
    }
}

// Rational minimax approximations after P. Jäckel, "Inverse normal" (2024).
// Relative accuracy near machine precision on every branch.
const U_MAX: f64 = 0.3413447460685429; // Φ(1) - 1/2

/// Unchecked quantile: `p <= 0` gives `-inf`, `p >= 1` gives `+inf`.
#[inline]
pub fn inverse_normal_cdf(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let u = p - 0.5;
    if u.abs() < U_MAX {
        quantile_central(u)
    } else if u > 0.0 {
        -quantile_lower_tail(1.0 - p)
    } else {
        quantile_lower_tail(p)
    }
}


// x = Φ⁻¹(p) for p <= Φ(-1).
fn quantile_lower_tail(p: f64) -> f64 {
    // Five branches on r = sqrt(-ln p).
    let r = (-p.ln()).sqrt();


    if r < 6.7 {
        if r < 3.41 {
            if r < 2.05 {
                // Branch I. Accuracy better than 7.6E-17 in perfect arithmetic
                (3.691562302945566191
                    + r * (4.7170590600740689449e1
                        + r * (6.5451292110261454609e1
                            + r * (-7.4594687726045926821e1
                                + r * (-8.3383894003636969722e1 - 1.3054072340494093704e1 * r)))))
                    / (1.0
                        + r * (2.0837211328697753726e1
                            + r * (7.1813812182579255459e1
                                + r * (5.9270122556046077717e1
                                    + r * (9.2216887978737432303 + 1.8295174852053530579e-4 * r)))))
            } else {
                // Branch II. Accuracy better than 9.4E-17 in perfect arithmetic
                (3.2340179116317970288
                    + r * (1.449177828689122096e1
                        + r * (6.8397370256591532878e-1
                            + r * (-1.81254427791789183e1
                                + r * (-1.005916339568646151e1 - 1.2013147879435525574 * r)))))
                    / (1.0
                        + r * (8.8820931773304337525
                            + r * (1.4656370665176799712e1
                                + r * (7.1369811056109768745
                                    + r * (8.4884892199149255469e-1
                                        + 1.0957576098829595323e-5 * r)))))
            }
        } else {
            // Branch III. Accuracy better than 9.1E-17 in perfect arithmetic
            (3.1252235780087584807
                + r * (9.9483724317036560676
                    + r * (-5.1633929115525534628
                        + r * (-1.1070534689309368061e1
                            + r * (-2.8699061335882526744 - 1.5414319494013597492e-1 * r)))))
                / (1.0
                    + r * (7.076769154309171622
                        + r * (8.1086341122361532407
                            + r * (2.0307076064309043613
                                + r * (1.0897972234131828901e-1 + 1.3565983564441297634e-7 * r)))))
        }
    } else {
        if r < 12.9 {
            // Branch IV. Accuracy better than 9E-17 in perfect arithmetic
            (2.6161264950897283681
                + r * (2.250881388987032271
                    + r * (-3.688196041019692267
                        + r * (-2.9644251353150605663
                            + r * (-4.7595169546783216436e-1 - 1.612303318390145052e-2 * r)))))
                / (1.0
                    + r * (3.2517455169035921495
                        + r * (2.1282030272153188194
                            + r * (3.3663746405626400164e-1
                                + r * (1.1400087282177594359e-2 + 3.0848093570966787291e-9 * r)))))
        } else {
            // Branch V. Accuracy better than 9.5E-17 in perfect arithmetic
            (2.3226849047872302955
                + r * (-4.2799650734502094297e-2
                    + r * (-2.5894451568465728432
                        + r * (-8.6385181219213758847e-1
                            + r * (-6.5127593753781672404e-2 - 1.0566357727202585402e-3 * r)))))
                / (1.0
                    + r * (1.9361316119254412206
                        + r * (6.1320841329197493341e-1
                            + r * (4.6054974512474443189e-2
                                + r * (7.471447992167225483e-4 + 2.3135343206304887818e-11 * r)))))
        }
    }
}

// Inverse of Φ(x) - 1/2 on [-U_MAX, U_MAX].
fn quantile_central(u: f64) -> f64 {
    // Accuracy better than 9.8E-17 in perfect arithmetic within this branch
    let s = U_MAX * U_MAX - u * u;
    u * ((2.92958954698308805
        + s * (5.0260572167303103e1
            + s * (3.01870541922933937e2
                + s * (7.4997781456657924e2
                    + s * (6.90489242061408612e2
                        + s * (1.34233243502653864e2 - 7.58939881401259242 * s))))))
        / (1.0
            + s * (1.8918538074574598e1
                + s * (1.29404120448755281e2
                    + s * (3.86821208540417453e2
                        + s * (4.79123914509756757e2 + 1.79227008508102628e2 * s))))))
}

#[cfg(test)]
mod tests {
    use super::*;

    // Reference values evaluated with 60-digit arithmetic (mpmath).
    const CDF_TABLE: [(f64, f64); 10] = [
        (-38.0, 2.885_428_360_068_784_308e-316),
        (-20.0, 2.753_624_118_606_233_695e-89),
        (-10.0, 7.619_853_024_160_526_066e-24),
        (-5.0, 2.866_515_718_791_939_117e-7),
        (-1.5, 0.066_807_201_268_858_066_00),
        (-0.5, 0.308_537_538_725_986_896_4),
        (0.3, 0.617_911_422_188_952_637_3),
        (1.0, 0.841_344_746_068_542_948_6),
        (2.5, 0.993_790_334_674_223_864_8),
        (7.0, 0.999_999_999_998_720_187_5),
    ];

    // Quantiles of the exact binary64 inputs.
    const QUANTILE_TABLE: [(f64, f64); 7] = [
        (1e-100, -21.273_453_560_965_324_30),
        (1e-10, -6.361_340_902_404_056_205),
        (0.02, -2.053_748_910_631_823_053),
        (0.3, -0.524_400_512_708_040_816_0),
        (0.841344746, 0.999_999_999_716_730_311_0),
        (0.975, 1.959_963_984_540_053_856),
        (0.999999, 4.753_424_308_817_087_766),
    ];

    #[test]
    fn cdf_matches_high_precision_table() {
        for (x, want) in CDF_TABLE {
            let got = normal_cdf(x);
            assert!((got - want).abs() <= 1e-15, "x={x}: {got} vs {want}");
            if x < -5.0 {
                assert!(((got - want) / want).abs() < 1e-12, "tail relative error at x={x}");
            }
        }
    }

    #[test]
    fn cdf_symmetry() {
        assert_eq!(normal_cdf(0.0), 0.5);
        for i in 0..200 {
            let x = -8.0 + 0.08 * i as f64;
            assert!((normal_cdf(-x) - (1.0 - normal_cdf(x))).abs() <= 1e-14);
        }
    }

    #[test]
    fn quantile_matches_high_precision_table() {
        for (p, want) in QUANTILE_TABLE {
            let got = normal_quantile(p).unwrap();
            assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "p={p}: {got} vs {want}");
        }
        assert_eq!(normal_quantile(0.5).unwrap(), 0.0);
        assert!((normal_quantile(0.841344746).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn quantile_rejects_out_of_range() {
        for p in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(normal_quantile(p).is_err(), "accepted {p}");
        }
    }

    #[test]
    fn round_trip_including_extreme_tails() {
        for p in [1e-300, 1e-100, 1e-12, 1e-10, 1e-3, 0.3, 0.5, 0.7, 0.999, 1.0 - 1e-10, 1.0 - 1e-12] {
            let x = inverse_normal_cdf(p);
            assert!((normal_cdf(x) - p).abs() <= 1e-12 * p.max(1e-300).min(1.0).max(1e-12), "p={p}");
        }
        let mut prev = f64::NEG_INFINITY;
        for i in 1..10_000 {
            let p = i as f64 / 10_000.0;
            let x = inverse_normal_cdf(p);
            assert!((normal_cdf(x) - p).abs() <= 1e-12);
            assert!(x > prev);
            prev = x;
        }
    }

    #[test]
    fn clamp_is_reported() {
        assert!(clamped_quantile(0.0).1);
        assert!(clamped_quantile(1.0).1);
        assert!(!clamped_quantile(0.25).1);
        assert!(clamped_quantile(0.0).0.is_finite());
    }

    #[test]
    fn uniforms_are_open_interval_and_reproducible() {
        let mut a = RngStream::new(7, 3);
        let mut b = RngStream::new(7, 3);
        for _ in 0..10_000 {
            let u = a.next_uniform();
            assert!(u > 0.0 && u < 1.0);
            assert_eq!(u.to_bits(), b.next_uniform().to_bits());
        }
    }

    #[test]
    fn seek_addresses_the_counter() {
        let mut s = RngStream::new(11, 5);
        let draws: Vec<f64> = (0..100).map(|_| s.next_uniform()).collect();
        assert_eq!(s.position(), 100);
        for idx in [0u64, 1, 17, 63, 64, 99] {
            assert_eq!(RngStream::uniform_at(11, 5, idx), draws[idx as usize]);
        }
    }

    #[test]
    fn uniform_mean_within_clt_bound() {
        // 3 sigma with sigma^2 = 1/12 and M = 1e6 gives 8.7e-4; the contract is 2e-3.
        let mut s = RngStream::new(0, 0);
        let m = 1_000_000;
        let mean = (0..m).map(|_| s.next_uniform()).sum::<f64>() / m as f64;
        assert!((mean - 0.5).abs() < 0.002, "mean {mean}");
    }

    #[test]
    fn neighbouring_streams_are_uncorrelated() {
        let n = 100_000;
        for k in [0u64, 1, 1000] {
            let mut a = RngStream::new(42, k);
            let mut b = RngStream::new(42, k + 1);
            let (mut sa, mut sb, mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for _ in 0..n {
                let x = a.next_uniform();
                let y = b.next_uniform();
                sa += x;
                sb += y;
                sab += x * y;
                saa += x * x;
                sbb += y * y;
            }
            let nf = n as f64;
            let cov = sab / nf - sa * sb / nf / nf;
            let corr = cov / ((saa / nf - (sa / nf).powi(2)) * (sbb / nf - (sb / nf).powi(2))).sqrt();
            assert!(corr.abs() < 0.01, "stream {k}: corr {corr}");
        }
    }

    #[test]
    fn replay_source_returns_draws_in_order() {
        let draws = [0.1, 0.2, 0.3];
        let mut r = ReplayUniforms::new(&draws);
        assert_eq!(r.next_uniform(), 0.1);
        assert_eq!(r.next_uniform(), 0.2);
        assert_eq!(r.consumed(), 2);
    }
}
