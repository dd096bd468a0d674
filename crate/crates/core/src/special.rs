//! Special-function kernels used by the channel equations.
//!
//! Two complementary error functions live here: [`erfc_exact`], accurate to
//! about 1e-13 relative over the whole real line, and [`erfc_approx`], the
//! sixteenth-power rational form `(1 + a1 x + ... + a6 x^6)^-16` whose
//! closed-form derivative makes the analytical impulse response possible.
//! The model evaluates the approximation; the exact function serves as the
//! oracle and as the reference kernel for the numeric impulse response.
//!
//! [`expint_ei`] evaluates the exponential integral `Ei(x) = -E1(-x)` for
//! negative arguments, which is the only branch the cone terms need.

use crate::error::{domain, Result};

/// Coefficients `a1..a6` of the sixteenth-power rational erfc form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErfcCoefficients(pub [f64; 6]);

/// Six-term coefficient set giving `|erfc_approx(x) - erfc(x)| <= 3e-7` on `x >= 0`.
pub const ERFC_COEFFICIENTS: ErfcCoefficients = ErfcCoefficients([
    0.070_523_078_4,
    0.042_282_012_3,
    0.009_270_527_2,
    0.000_152_014_3,
    0.000_276_567_2,
    0.000_043_063_8,
]);

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;
pub(crate) const FRAC_1_SQRT_PI: f64 = 0.564_189_583_547_756_3;

impl ErfcCoefficients {
    /// `p(x) = 1 + a1 x + ... + a6 x^6` and its derivative, by Horner's rule.
    #[inline]
    fn poly_and_slope(&self, x: f64) -> (f64, f64) {
        let a = &self.0;
        let mut p = a[5];
        let mut dp = 6.0 * a[5];
        for i in (0..5).rev() {
            p = p * x + a[i];
            dp = dp * x + (i as f64 + 1.0) * a[i];
        }
        (p * x + 1.0, dp)
    }
}

#[inline]
fn pow_neg16(p: f64) -> f64 {
    let p2 = p * p;
    let p4 = p2 * p2;
    let p8 = p4 * p4;
    1.0 / (p8 * p8)
}

/// Complementary error function, relative error below 1e-13.
pub fn erfc_exact(x: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(domain("erfc_exact", "x", x));
    }
    Ok(if x < 0.0 {
        2.0 - erfc_nonneg(-x)
    } else {
        erfc_nonneg(x)
    })
}

/// Derivative of the exact complementary error function, `-2/sqrt(pi) exp(-x^2)`.
pub fn erfc_exact_derivative(x: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(domain("erfc_exact_derivative", "x", x));
    }
    Ok(-2.0 * FRAC_1_SQRT_PI * exp_neg_square(x.abs()))
}

pub(crate) fn erfc_nonneg(x: f64) -> f64 {
    if x < 0.5 {
        1.0 - erf_series(x)
    } else {
        exp_neg_square(x) * FRAC_1_SQRT_PI * erfc_continued_fraction(x)
    }
}

/// `exp(-x^2)` without the relative error that rounding `x*x` would add for
/// large `x`: the square is split into an exact high part and a small tail.
fn exp_neg_square(x: f64) -> f64 {
    let hi = f64::from_bits(x.to_bits() & 0xffff_ffff_0000_0000);
    let lo_term = (x - hi) * (x + hi);
    (-hi * hi).exp() * (-lo_term).exp()
}

/// Maclaurin series of erf, used below 0.5 where it converges in a few terms.
fn erf_series(x: f64) -> f64 {
    let x2 = x * x;
    let mut term = x;
    let mut sum = x;
    for n in 1..60 {
        term *= -x2 / n as f64;
        let contrib = term / (2 * n + 1) as f64;
        sum += contrib;
        if contrib.abs() <= 1e-17 * sum.abs() {
            break;
        }
    }
    2.0 * FRAC_1_SQRT_PI * sum
}

/// Laplace continued fraction `1/(x + (1/2)/(x + 1/(x + (3/2)/(x + ...))))`,
/// evaluated with the modified Lentz algorithm.
fn erfc_continued_fraction(x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut f = x;
    let mut c = x;
    let mut d = 0.0;
    for n in 1..20_000 {
        let a = 0.5 * n as f64;
        d = x + a * d;
        if d.abs() < TINY {
            d = TINY;
        }
        d = 1.0 / d;
        c = x + a / c;
        if c.abs() < TINY {
            c = TINY;
        }
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    1.0 / f
}

/// Rational approximation `(1 + a1 x + ... + a6 x^6)^-16` of erfc for `x >= 0`.
pub fn erfc_approx(x: f64) -> Result<f64> {
    if !(x >= 0.0) || x.is_infinite() {
        return Err(domain("erfc_approx", "x", x));
    }
    Ok(erfc_approx_unchecked(x))
}

#[inline]
pub(crate) fn erfc_approx_unchecked(x: f64) -> f64 {
    let (p, _) = ERFC_COEFFICIENTS.poly_and_slope(x);
    pow_neg16(p)
}

/// Closed-form derivative of [`erfc_approx`]: `-16 p(x)^-17 p'(x)`.
pub fn erfc_approx_derivative(x: f64) -> Result<f64> {
    if !(x >= 0.0) || x.is_infinite() {
        return Err(domain("erfc_approx_derivative", "x", x));
    }
    Ok(erfc_approx_with_derivative(x).1)
}

/// Value and derivative of the approximation in one polynomial pass.
#[inline]
pub(crate) fn erfc_approx_with_derivative(x: f64) -> (f64, f64) {
    let (p, dp) = ERFC_COEFFICIENTS.poly_and_slope(x);
    let h = pow_neg16(p);
    (h, -16.0 * h * dp / p)
}

/// Exponential integral `Ei(x)` for `x < 0`, i.e. `-E1(-x)`.
///
/// Arguments below about -745 underflow to `-0.0`.
pub fn expint_ei(x: f64) -> Result<f64> {
    if !(x < 0.0) || x.is_infinite() {
        if x == f64::NEG_INFINITY {
            return Ok(-0.0);
        }
        return Err(domain("expint_ei", "x", x));
    }
    Ok(-expint_e1(-x))
}

/// `E1(z)` for `z > 0`: power series up to 1, continued fraction beyond.
fn expint_e1(z: f64) -> f64 {
    if z <= 1.0 {
        let mut sum = -EULER_GAMMA - z.ln();
        let mut fact = 1.0;
        for k in 1..100 {
            let k = k as f64;
            fact *= -z / k;
            let term = -fact / k;
            sum += term;
            if term.abs() < 1e-17 * sum.abs() {
                break;
            }
        }
        sum
    } else {
        if z > 746.0 {
            return 0.0;
        }
        const FPMIN: f64 = 1e-300;
        let mut b = z + 1.0;
        let mut c = 1.0 / FPMIN;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..10_000 {
            let an = -((i * i) as f64);
            b += 2.0;
            d = 1.0 / (an * d + b);
            c = b + an / c;
            let del = c * d;
            h *= del;
            if (del - 1.0).abs() < 1e-16 {
                break;
            }
        }
        h * (-z).exp()
    }
}

/// `1/sqrt(2 pi)`, shared by the prefactor conventions.
pub(crate) const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // 40-digit reference values.
    const ERFC_TABLE: &[(f64, f64)] = &[
        (0.1, 0.887_537_083_981_715_107_8),
        (0.3, 0.671_373_240_540_872_572_36),
        (0.5, 0.479_500_122_186_953_462_32),
        (0.75, 0.288_844_366_346_484_868_4),
        (1.0, 0.157_299_207_050_285_130_66),
        (1.5, 0.033_894_853_524_689_272_933),
        (2.0, 0.004_677_734_981_047_265_837_9),
        (3.0, 2.209_049_699_858_544_137_3e-5),
        (4.0, 1.541_725_790_028_001_885_2e-8),
        (5.0, 1.537_459_794_428_034_850_2e-12),
        (7.5, 2.776_649_386_030_569_100_7e-26),
        (10.0, 2.088_487_583_762_544_757e-45),
        (15.0, 7.212_994_172_451_206_666_6e-100),
        (20.0, 5.395_865_611_607_900_928_9e-176),
        (26.0, 5.663_192_408_856_142_846_5e-296),
    ];

    const EI_TABLE: &[(f64, f64)] = &[
        (-1e-6, -13.238_295_893_062_491_244),
        (-0.01, -4.037_929_576_538_113_831_8),
        (-0.5, -0.559_773_594_776_160_811_75),
        (-1.0, -0.219_383_934_395_520_273_68),
        (-2.0, -0.048_900_510_708_061_119_567),
        (-5.0, -0.001_148_295_591_275_325_797_3),
        (-10.0, -4.156_968_929_685_324_277_4e-6),
        (-30.0, -3.021_552_010_688_812_544_8e-15),
        (-100.0, -3.683_597_761_682_032_180_2e-46),
        (-600.0, -4.409_989_794_509_837_971_6e-264),
    ];

    #[test]
    fn erfc_exact_matches_reference_table() {
        assert_eq!(erfc_exact(0.0).unwrap(), 1.0);
        for &(x, want) in ERFC_TABLE {
            let got = erfc_exact(x).unwrap();
            let rel = ((got - want) / want).abs();
            assert!(rel <= 1e-13, "erfc({x}) = {got:e}, want {want:e}, rel {rel:e}");
        }
    }

    #[test]
    fn erfc_exact_reflection() {
        let e1 = erfc_exact(1.0).unwrap();
        assert!((erfc_exact(-1.0).unwrap() - (2.0 - e1)).abs() < 1e-15);
    }

    // statrs is only good to about 1e-10 here (erfc(0.51) is off in the tenth
    // digit against mpmath); the tight checks are the table above
    #[test]
    fn erfc_exact_agrees_with_statrs() {
        for i in 0..=600 {
            let x = -3.0 + i as f64 * 0.015;
            let want = statrs::function::erf::erfc(x);
            let got = erfc_exact(x).unwrap();
            assert!(((got - want) / want).abs() < 5e-10, "x = {x}: {got:e} vs statrs {want:e}");
        }
    }

    #[test]
    fn erfc_exact_rejects_non_finite() {
        assert!(erfc_exact(f64::NAN).is_err());
        assert!(erfc_exact(f64::INFINITY).is_err());
    }

    #[test]
    fn erfc_approx_endpoints_and_errors() {
        assert_eq!(erfc_approx(0.0).unwrap(), 1.0);
        assert!((erfc_approx(1.0).unwrap() - 0.157_299_207_050_285_13).abs() <= 3e-7);
        assert!((erfc_approx(5.0).unwrap() - 1.537_459_794_428_035e-12).abs() <= 3e-7);
        assert!(erfc_approx(-1e-9).is_err());
        assert!(erfc_approx(f64::NAN).is_err());
    }

    #[test]
    fn erfc_approx_derivative_at_zero_is_minus_16_a1() {
        let want = -16.0 * ERFC_COEFFICIENTS.0[0];
        assert!((erfc_approx_derivative(0.0).unwrap() - want).abs() < 1e-15);
        assert!(erfc_approx_derivative(-0.5).is_err());
    }

    fn central(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn erfc_approx_derivative_matches_finite_differences() {
        let h_fn = |x: f64| erfc_approx(x).unwrap();
        for x in [1.0, 3.0] {
            let fd = central(h_fn, x, 1e-5);
            let an = erfc_approx_derivative(x).unwrap();
            assert!(((an - fd) / fd).abs() < 1e-6, "x = {x}: {an} vs {fd}");
        }
        for i in 0..100 {
            let x = 0.05 + i as f64 * 0.06;
            let an = erfc_approx_derivative(x).unwrap();
            let e1 = (central(h_fn, x, 1e-3) - an).abs();
            let e2 = (central(h_fn, x, 5e-4) - an).abs();
            assert!(((central(h_fn, x, 1e-5) - an) / an).abs() < 1e-6, "x = {x}");
            // second-order convergence: halving h cuts the error about four times
            if e1 > 1e-13 {
                let order = (e1 / e2).log2();
                assert!(order > 1.8 && order < 2.2, "x = {x}, order {order}");
            }
        }
    }

    #[test]
    fn erfc_approx_within_bound_on_log_grid() {
        let n = 100_000;
        let (lo, hi) = (1e-6f64.ln(), 10f64.ln());
        let mut worst = 0.0f64;
        for i in 0..n {
            let x = (lo + (hi - lo) * i as f64 / (n - 1) as f64).exp();
            let err = (erfc_approx(x).unwrap() - erfc_exact(x).unwrap()).abs();
            worst = worst.max(err);
        }
        assert!(worst <= 3e-7, "worst error {worst:e}");
    }

    #[test]
    fn erfc_approx_is_decreasing() {
        let mut prev = erfc_approx(0.0).unwrap();
        for i in 1..=20_000 {
            let v = erfc_approx(i as f64 * 5e-4).unwrap();
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn expint_ei_matches_reference_table() {
        for &(x, want) in EI_TABLE {
            let got = expint_ei(x).unwrap();
            let rel = ((got - want) / want).abs();
            assert!(rel <= 1e-12, "Ei({x}) = {got:e}, want {want:e}, rel {rel:e}");
        }
        assert!((expint_ei(-10.0).unwrap() + 4.15697e-6).abs() / 4.15697e-6 < 1e-5);
    }

    #[test]
    fn expint_ei_limits_and_domain() {
        assert_eq!(expint_ei(-1e4).unwrap(), 0.0);
        assert_eq!(expint_ei(f64::NEG_INFINITY).unwrap(), 0.0);
        assert!(expint_ei(0.0).is_err());
        assert!(expint_ei(1.0).is_err());
        assert!(expint_ei(f64::NAN).is_err());
    }

    #[test]
    fn expint_ei_derivative_identity() {
        // d/dx Ei(x) = e^x / x
        for i in 0..50 {
            let x = -(0.02 + i as f64 * 0.4);
            let h = 1e-5 * x.abs();
            let fd = (expint_ei(x + h).unwrap() - expint_ei(x - h).unwrap()) / (2.0 * h);
            let want = x.exp() / x;
            assert!(((fd - want) / want).abs() < 1e-6, "x = {x}");
        }
    }

    proptest! {
        #[test]
        fn erfc_exact_reflection_symmetry(x in -6.0f64..6.0) {
            let lhs = erfc_exact(-x).unwrap();
            let rhs = 2.0 - erfc_exact(x).unwrap();
            prop_assert!((lhs - rhs).abs() <= 4.0 * f64::EPSILON);
        }

        #[test]
        fn expint_ei_negative_and_shrinking(a in 1e-4f64..200.0, b in 1e-4f64..200.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let e_lo = expint_ei(-lo).unwrap();
            let e_hi = expint_ei(-hi).unwrap();
            prop_assert!(e_lo < 0.0 && e_hi < 0.0);
            prop_assert!(e_hi.abs() <= e_lo.abs());
        }

        #[test]
        fn erfc_approx_in_unit_interval(x in 0.0f64..10.0) {
            let v = erfc_approx(x).unwrap();
            prop_assert!(v > 0.0 && v <= 1.0);
            prop_assert!(erfc_approx_derivative(x).unwrap() <= 0.0);
        }
    }
}
