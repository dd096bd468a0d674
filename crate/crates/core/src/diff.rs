//! Central finite differences with step-halving verification.
//!
//! Each derivative is evaluated at step `h` and `h/2`. The two estimates must
//! agree to `AGREEMENT_TOL` relative to the largest component of the output
//! vector, otherwise the stencil is reported as unstable. Components far
//! below that scale (a derivative crossing zero in one slot, say) are not
//! held to a tighter test. The returned value is the Richardson combination
//! `(4 D(h/2) - D(h)) / 3`.

use crate::error::{Error, Result};

/// Relative step for first derivatives.
pub const FIRST_STEP: f64 = 1e-5;
/// Relative step for second and mixed derivatives.
pub const SECOND_STEP: f64 = 1e-3;
/// Allowed disagreement between the `h` and `h/2` estimates.
pub const AGREEMENT_TOL: f64 = 1e-3;

fn step(x: f64, rel: f64) -> f64 {
    rel * x.abs().max(1e-12)
}

fn richardson(coarse: Vec<f64>, fine: Vec<f64>, what: &str, at: f64) -> Result<Vec<f64>> {
    let scale = fine
        .iter()
        .chain(coarse.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    for (i, (c, f)) in coarse.iter().zip(&fine).enumerate() {
        if !c.is_finite() || !f.is_finite() {
            return Err(Error::NumericalInstability(format!(
                "{what} at {at}: non-finite difference in component {i}"
            )));
        }
        if (c - f).abs() > AGREEMENT_TOL * scale {
            return Err(Error::NumericalInstability(format!(
                "{what} at {at}: halved-step estimates disagree in component {i} ({c:e} vs {f:e})"
            )));
        }
    }
    Ok(coarse
        .into_iter()
        .zip(fine)
        .map(|(c, f)| (4.0 * f - c) / 3.0)
        .collect())
}

fn combine(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// First derivative of a vector-valued function of one variable.
pub fn first<F>(f: F, x: f64, rel_step: f64) -> Result<Vec<f64>>
where
    F: Fn(f64) -> Result<Vec<f64>>,
{
    let h = step(x, rel_step);
    let coarse = combine(&f(x + h)?, &f(x - h)?, |p, m| (p - m) / (2.0 * h));
    let fine = combine(&f(x + 0.5 * h)?, &f(x - 0.5 * h)?, |p, m| (p - m) / h);
    richardson(coarse, fine, "first derivative", x)
}

/// Second derivative; `center` is `f(x)`, passed in so callers can share it.
pub fn second<F>(f: F, x: f64, center: &[f64], rel_step: f64) -> Result<Vec<f64>>
where
    F: Fn(f64) -> Result<Vec<f64>>,
{
    let h = step(x, rel_step);
    let curv = |p: &[f64], m: &[f64], h: f64| -> Vec<f64> {
        p.iter()
            .zip(m)
            .zip(center)
            .map(|((p, m), c)| (p - 2.0 * c + m) / (h * h))
            .collect()
    };
    let coarse = curv(&f(x + h)?, &f(x - h)?, h);
    let fine = curv(&f(x + 0.5 * h)?, &f(x - 0.5 * h)?, 0.5 * h);
    richardson(coarse, fine, "second derivative", x)
}

/// Mixed partial `d^2 f / dx dy` from the four-point cross stencil.
pub fn mixed<F>(f: F, x: f64, y: f64, rel_step: f64) -> Result<Vec<f64>>
where
    F: Fn(f64, f64) -> Result<Vec<f64>>,
{
    let hx = step(x, rel_step);
    let hy = step(y, rel_step);
    let cross = |hx: f64, hy: f64| -> Result<Vec<f64>> {
        let pp = f(x + hx, y + hy)?;
        let pm = f(x + hx, y - hy)?;
        let mp = f(x - hx, y + hy)?;
        let mm = f(x - hx, y - hy)?;
        Ok((0..pp.len())
            .map(|i| (pp[i] - pm[i] - mp[i] + mm[i]) / (4.0 * hx * hy))
            .collect())
    };
    let coarse = cross(hx, hy)?;
    let fine = cross(0.5 * hx, 0.5 * hy)?;
    richardson(coarse, fine, "mixed derivative", x)
}

/// Scalar convenience wrapper around [`first`] and [`second`].
pub fn scalar_partials<F>(f: F, x: f64) -> Result<(f64, f64)>
where
    F: Fn(f64) -> Result<f64>,
{
    let g = |v: f64| f(v).map(|r| vec![r]);
    let d1 = first(g, x, FIRST_STEP)?[0];
    let center = [f(x)?];
    let d2 = second(g, x, &center, SECOND_STEP)?[0];
    Ok((d1, d2))
}
