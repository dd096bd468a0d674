//! Closed-form channel equations.
//!
//! Units: lengths in µm, time in s, diffusion coefficient in µm²/s.
//!
//! The corrected cumulative reception fraction is
//!
//! ```text
//! F'(t) = b1 * R/(d+R) * h(d/yn) * Ω(t, yn, β) / U(t, yn),    yn = (4D)^b2 * t^b3
//! ```
//!
//! where `h` is the complementary error function (the rational approximation
//! by default), `Ω` restricts reception to the cone of half-angle `β` and `U`
//! is the same bracket taken over the whole receiver (`x = d + 2R`). The
//! impulse response `f = dF'/dt` is assembled analytically through the
//! product and quotient rules; [`ChannelModel::impulse`] documents the terms.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::diff;
use crate::error::{domain, Error, Result};
use crate::special::{self, FRAC_1_SQRT_2PI};

/// Physical channel: Tx and Rx spheres separated by `distance` (surface to surface).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelGeometry {
    /// Tx-surface to Rx-surface distance `d` [µm].
    pub distance: f64,
    /// Receiver radius `R` [µm].
    pub rx_radius: f64,
    /// Transmitter radius `r` [µm].
    pub tx_radius: f64,
    /// Diffusion coefficient `D` [µm²/s].
    pub diffusion: f64,
    /// Number of released molecules.
    pub molecules: u32,
}

impl ChannelGeometry {
    pub fn new(
        distance: f64,
        rx_radius: f64,
        tx_radius: f64,
        diffusion: f64,
        molecules: u32,
    ) -> Result<Self> {
        let g = Self {
            distance,
            rx_radius,
            tx_radius,
            diffusion,
            molecules,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("distance", self.distance),
            ("rx_radius", self.rx_radius),
            ("tx_radius", self.tx_radius),
            ("diffusion", self.diffusion),
        ];
        for (name, v) in checks {
            if !(v > 0.0) || !v.is_finite() {
                return Err(domain("ChannelGeometry", name, v));
            }
        }
        if self.molecules == 0 {
            return Err(domain("ChannelGeometry", "molecules", 0.0));
        }
        Ok(())
    }

    pub fn with_distance(mut self, distance: f64) -> Self {
        self.distance = distance;
        self
    }

    pub fn with_diffusion(mut self, diffusion: f64) -> Self {
        self.diffusion = diffusion;
        self
    }

    /// `R / (d + R)`, the long-time absorbed fraction of a fully absorbing receiver.
    pub fn capture_ratio(&self) -> f64 {
        self.rx_radius / (self.distance + self.rx_radius)
    }
}

/// Fitted model parameters: cone half-angle and the three corrections.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrectionParams {
    /// Reception-cone half-angle β [rad], in `(0, π]`.
    pub beta: f64,
    /// Global scale factor.
    pub b1: f64,
    /// Exponent of `4D` in `yn`.
    pub b2: f64,
    /// Exponent of `t` in `yn`.
    pub b3: f64,
}

impl CorrectionParams {
    /// Full receiver, no correction: `yn = sqrt(4Dt)`.
    pub const IDEAL: Self = Self {
        beta: PI,
        b1: 1.0,
        b2: 0.5,
        b3: 0.5,
    };

    pub fn new(beta: f64, b1: f64, b2: f64, b3: f64) -> Result<Self> {
        let p = Self { beta, b1, b2, b3 };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta <= PI) {
            return Err(domain("CorrectionParams", "beta", self.beta));
        }
        for (name, v) in [("b1", self.b1), ("b2", self.b2), ("b3", self.b3)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(domain("CorrectionParams", name, v));
            }
        }
        Ok(())
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.beta, self.b1, self.b2, self.b3]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self {
            beta: a[0],
            b1: a[1],
            b2: a[2],
            b3: a[3],
        }
    }
}

/// Time-indexed cumulative absorbed fraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CumulativeHitCurve {
    times: Vec<f64>,
    values: Vec<f64>,
}

impl CumulativeHitCurve {
    /// Builds a curve, checking that times are positive and strictly
    /// increasing and values are non-decreasing within `[0, 1]`.
    pub fn new(times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        let c = Self::new_unchecked_monotone(times, values)?;
        if c.values.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config("curve values must be non-decreasing".into()));
        }
        Ok(c)
    }

    /// Like [`new`](Self::new) but accepts non-monotone values in `[0, 1]`,
    /// as produced by evaluating a model that is not guaranteed monotone.
    pub fn new_unchecked_monotone(times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if times.is_empty() || times.len() != values.len() {
            return Err(Error::Config(format!(
                "curve needs matching non-empty columns (got {} times, {} values)",
                times.len(),
                values.len()
            )));
        }
        if !(times[0] > 0.0) || times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config(
                "curve times must be positive and strictly increasing".into(),
            ));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Config("curve values must lie in [0, 1]".into()));
        }
        Ok(Self { times, values })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last_value(&self) -> f64 {
        *self.values.last().expect("curve is non-empty")
    }

    /// Value at the last sample time not after `t` (0 before the first sample).
    ///
    /// A relative slack of 1e-9 absorbs rounding in computed sample times.
    pub fn value_at(&self, t: f64) -> f64 {
        let slack = 1e-9 * t.abs().max(1e-12);
        let idx = self.times.partition_point(|&s| s <= t + slack);
        if idx == 0 {
            0.0
        } else {
            self.values[idx - 1]
        }
    }

    /// Every `stride`-th sample, ending on a stride boundary.
    pub fn subsample(&self, stride: usize) -> Self {
        let stride = stride.max(1);
        let idx = (stride - 1..self.len()).step_by(stride);
        Self {
            times: idx.clone().map(|i| self.times[i]).collect(),
            values: idx.map(|i| self.values[i]).collect(),
        }
    }
}

/// Prefactor convention for the `Ei` bracket of the full-receiver term `U`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prefactor {
    /// `Ω` uses `1/sqrt(2πDt)` while `U` uses `1/sqrt(Dt)`.
    #[default]
    AsPrinted,
    /// Both brackets use `1/sqrt(2πDt)`, so `U = Ω(β = π)`.
    Consistent,
}

/// Which complementary error function the model evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErfcKernel {
    /// Sixteenth-power rational approximation (closed-form derivative).
    #[default]
    Approx,
    /// High-accuracy erfc.
    Exact,
}

impl ErfcKernel {
    #[inline]
    fn eval(self, x: f64) -> (f64, f64) {
        match self {
            ErfcKernel::Approx => special::erfc_approx_with_derivative(x),
            ErfcKernel::Exact => {
                let v = special::erfc_nonneg(x);
                let g = -2.0 * special::FRAC_1_SQRT_PI * (-x * x).exp();
                (v, g)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ModelOptions {
    pub prefactor: Prefactor,
    pub erfc: ErfcKernel,
}

impl ModelOptions {
    pub fn consistent() -> Self {
        Self {
            prefactor: Prefactor::Consistent,
            erfc: ErfcKernel::Approx,
        }
    }

    pub fn with_erfc(mut self, erfc: ErfcKernel) -> Self {
        self.erfc = erfc;
        self
    }
}

/// Channel parameter selected for differentiation or estimation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ChannelParam {
    Distance,
    Diffusion,
}

impl ChannelParam {
    pub fn get(self, g: &ChannelGeometry) -> f64 {
        match self {
            ChannelParam::Distance => g.distance,
            ChannelParam::Diffusion => g.diffusion,
        }
    }

    pub fn set(self, g: ChannelGeometry, v: f64) -> ChannelGeometry {
        match self {
            ChannelParam::Distance => g.with_distance(v),
            ChannelParam::Diffusion => g.with_diffusion(v),
        }
    }
}

fn check_time(function: &'static str, t: f64) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(domain(function, "t", t));
    }
    Ok(())
}

/// Largest ratio between neighbouring times in the pole scan.
pub const POLE_SCAN_RATIO: f64 = 1.02;

/// Fully absorbing receiver: `R/(d+R) * erfc(d / sqrt(4Dt))`.
pub fn f_ideal(geom: &ChannelGeometry, t: f64, kernel: ErfcKernel) -> Result<f64> {
    check_time("f_ideal", t)?;
    let y = (4.0 * geom.diffusion * t).sqrt();
    Ok(geom.capture_ratio() * kernel.eval(geom.distance / y).0)
}

/// Distance from the release point to the rim of the reception cone.
pub fn x_of_beta(geom: &ChannelGeometry, beta: f64) -> Result<f64> {
    if !(0.0..=PI).contains(&beta) {
        return Err(domain("x_of_beta", "beta", beta));
    }
    let (d, r) = (geom.distance, geom.rx_radius);
    // endpoints are pinned so that the cone collapses (β = 0) or covers the
    // whole receiver (β = π) without rounding
    if beta == 0.0 {
        return Ok(d);
    }
    if beta == PI {
        return Ok(d + 2.0 * r);
    }
    let s = (0.5 * beta).sin();
    Ok((d * d + 4.0 * r * (d + r) * s * s).sqrt())
}

/// Value and time-derivative of one cone bracket
/// `h(near/y)/near - h(far/y)/far + P(t) [Ei(-near²/y²) - Ei(-far²/y²)]`.
#[derive(Debug, Clone, Copy)]
struct Bracket {
    value: f64,
    rate: f64,
}

/// Shared pieces of a bracket evaluation at one time.
#[derive(Debug, Clone, Copy)]
struct Scale {
    y: f64,
    dy_dt: f64,
    pref: f64,
    dpref_dt: f64,
}

fn bracket(kernel: ErfcKernel, near: f64, far: f64, s: Scale) -> Result<Bracket> {
    let (hn, dhn) = kernel.eval(near / s.y);
    let (hf, dhf) = kernel.eval(far / s.y);
    let zn = -(near * near) / (s.y * s.y);
    let zf = -(far * far) / (s.y * s.y);
    let ei_n = special::expint_ei(zn)?;
    let ei_f = special::expint_ei(zf)?;
    let ei_diff = ei_n - ei_f;
    let value = hn / near - hf / far + s.pref * ei_diff;
    // d/dt h(a/y)/a = -h'(a/y) y'/y² ; d/dt Ei(-a²/y²) = -2 exp(-a²/y²) y'/y
    let rate = -(s.dy_dt / (s.y * s.y)) * (dhn - dhf)
        + s.dpref_dt * ei_diff
        - 2.0 * s.pref * (s.dy_dt / s.y) * (zn.exp() - zf.exp());
    Ok(Bracket { value, rate })
}

fn prefactor(diffusion: f64, t: f64, coeff: f64) -> (f64, f64) {
    let p = coeff / (diffusion * t).sqrt();
    (p, -0.5 * p / t)
}

/// Cone-restricted bracket `Ω(t, y, β)`.
pub fn omega(geom: &ChannelGeometry, t: f64, y: f64, beta: f64, kernel: ErfcKernel) -> Result<f64> {
    check_time("omega", t)?;
    if !(y > 0.0) || !y.is_finite() {
        return Err(domain("omega", "y", y));
    }
    if !(beta > 0.0) {
        return Err(domain("omega", "beta", beta));
    }
    let x = x_of_beta(geom, beta)?;
    let (pref, _) = prefactor(geom.diffusion, t, FRAC_1_SQRT_2PI);
    let s = Scale {
        y,
        dy_dt: 0.0,
        pref,
        dpref_dt: 0.0,
    };
    Ok(bracket(kernel, geom.distance, x, s)?.value)
}

/// Full-receiver bracket `U(t, y)`, with `x = d + 2R`.
pub fn u_denominator(geom: &ChannelGeometry, t: f64, y: f64, opts: ModelOptions) -> Result<f64> {
    check_time("u_denominator", t)?;
    if !(y > 0.0) || !y.is_finite() {
        return Err(domain("u_denominator", "y", y));
    }
    let coeff = match opts.prefactor {
        Prefactor::AsPrinted => 1.0,
        Prefactor::Consistent => FRAC_1_SQRT_2PI,
    };
    let (pref, _) = prefactor(geom.diffusion, t, coeff);
    let far = geom.distance + 2.0 * geom.rx_radius;
    let s = Scale {
        y,
        dy_dt: 0.0,
        pref,
        dpref_dt: 0.0,
    };
    Ok(bracket(opts.erfc, geom.distance, far, s)?.value)
}

/// Geometry, fitted parameters and evaluation options bundled together.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelModel {
    pub geom: ChannelGeometry,
    pub params: CorrectionParams,
    pub opts: ModelOptions,
}

/// Cumulative value and its time-derivative at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelPoint {
    pub cumulative: f64,
    pub rate: f64,
}

impl ChannelModel {
    pub fn new(geom: ChannelGeometry, params: CorrectionParams, opts: ModelOptions) -> Self {
        Self { geom, params, opts }
    }

    pub fn with_geometry(mut self, geom: ChannelGeometry) -> Self {
        self.geom = geom;
        self
    }

    /// `yn = (4D)^b2 t^b3` and its time-derivative `b3 (4D)^b2 t^(b3-1)`.
    pub fn scale(&self, t: f64) -> (f64, f64) {
        let y = (4.0 * self.geom.diffusion).powf(self.params.b2) * t.powf(self.params.b3);
        (y, self.params.b3 * y / t)
    }

    /// Corrected cumulative fraction `F'(t)`.
    pub fn cumulative(&self, t: f64) -> Result<f64> {
        Ok(self.evaluate(t)?.cumulative)
    }

    /// Analytical impulse response `f(t) = dF'/dt` [1/s].
    ///
    /// With `u = d/yn`:
    ///
    /// ```text
    /// f = b1 R/(d+R) [ h'(u) (-d yn'/yn²) Ω/U + h(u) (Ω' U - Ω U') / U² ]
    /// ```
    ///
    /// `Ω'` and `U'` differentiate the explicit `t` in the `Ei` prefactor as
    /// well as `t` through `yn`.
    pub fn impulse(&self, t: f64) -> Result<f64> {
        Ok(self.evaluate(t)?.rate)
    }

    /// `F'` and `f` at one time, sharing the bracket evaluations.
    pub fn evaluate(&self, t: f64) -> Result<ModelPoint> {
        check_time("f_corrected", t)?;
        let g = &self.geom;
        let p = &self.params;
        let d = g.distance;
        let (y, dy_dt) = self.scale(t);
        if !(y > 0.0) || !y.is_finite() {
            return Err(domain("f_corrected", "yn", y));
        }
        let u = d / y;
        let (h, dh) = self.opts.erfc.eval(u);
        if h == 0.0 && dh == 0.0 {
            return Ok(ModelPoint {
                cumulative: 0.0,
                rate: 0.0,
            });
        }

        let (p_omega, dp_omega) = prefactor(g.diffusion, t, FRAC_1_SQRT_2PI);
        let (p_u, dp_u) = match self.opts.prefactor {
            Prefactor::AsPrinted => prefactor(g.diffusion, t, 1.0),
            Prefactor::Consistent => (p_omega, dp_omega),
        };
        let x = x_of_beta(g, p.beta)?;
        let far = d + 2.0 * g.rx_radius;
        let om = bracket(
            self.opts.erfc,
            d,
            x,
            Scale {
                y,
                dy_dt,
                pref: p_omega,
                dpref_dt: dp_omega,
            },
        )?;
        let un = bracket(
            self.opts.erfc,
            d,
            far,
            Scale {
                y,
                dy_dt,
                pref: p_u,
                dpref_dt: dp_u,
            },
        )?;
        let lead = p.b1 * g.capture_ratio();
        let (ratio, dratio) = if self.cone_is_full() {
            // Ω and U are the same expression here; dividing would only turn
            // a joint underflow deep in the tail into 0/0
            (1.0, 0.0)
        } else if un.value == 0.0 {
            if h < 1e-290 {
                return Ok(ModelPoint {
                    cumulative: 0.0,
                    rate: 0.0,
                });
            }
            return Err(Error::NumericalInstability(format!(
                "full-receiver bracket vanishes at t = {t}"
            )));
        } else {
            let ratio = om.value / un.value;
            (ratio, (om.rate - ratio * un.rate) / un.value)
        };
        let du_dt = -d * dy_dt / (y * y);
        let point = ModelPoint {
            cumulative: lead * h * ratio,
            rate: lead * (dh * du_dt * ratio + h * dratio),
        };
        if !point.cumulative.is_finite() || !point.rate.is_finite() {
            return Err(Error::NumericalInstability(format!(
                "non-finite model value at t = {t}"
            )));
        }
        Ok(point)
    }

    /// `F'` on every time of a grid.
    /// Full-receiver bracket at the model's scale.
    pub fn denominator(&self, t: f64) -> Result<f64> {
        check_time("u_denominator", t)?;
        let (y, _) = self.scale(t);
        u_denominator(&self.geom, t, y, self.opts)
    }

    /// True when the cone covers the whole receiver and the ratio is identically one.
    pub fn cone_is_full(&self) -> bool {
        self.params.beta >= PI && self.opts.prefactor == Prefactor::Consistent
    }

    /// Errors if the cone ratio has a pole anywhere in `[times[0], times[last]]`,
    /// as detected by a sign change of `U` on a geometric scan.
    pub fn check_pole_free(&self, times: &[f64]) -> Result<()> {
        if self.cone_is_full() {
            return Ok(());
        }
        // a pair of crossings can hide between two sample times, so scan a
        // geometric grid no coarser than POLE_SCAN_RATIO in between
        let mut prev: Option<(f64, f64)> = None;
        let mut scan = Vec::with_capacity(times.len());
        for w in times.windows(2) {
            let n = ((w[1] / w[0]).ln() / POLE_SCAN_RATIO.ln()).ceil().max(1.0) as usize;
            scan.extend((0..n).map(|k| w[0] * (w[1] / w[0]).powf(k as f64 / n as f64)));
        }
        scan.extend(times.last());
        for t in scan {
            let u = self.denominator(t)?;
            if let Some((t0, u0)) = prev {
                if u0.signum() != u.signum() || u == 0.0 {
                    return Err(Error::NumericalInstability(format!(
                        "cone ratio has a pole between t = {t0} and t = {t}"
                    )));
                }
            }
            prev = Some((t, u));
        }
        Ok(())
    }

    pub fn cumulative_on(&self, times: &[f64]) -> Result<Vec<f64>> {
        times.iter().map(|&t| self.cumulative(t)).collect()
    }

    /// First and second partial derivatives of `f(t)` with respect to `d` or `D`,
    /// by verified central differences.
    pub fn param_partials(&self, t: f64, which: ChannelParam) -> Result<(f64, f64)> {
        let theta = which.get(&self.geom);
        diff::scalar_partials(
            |v| self.with_geometry(which.set(self.geom, v)).impulse(t),
            theta,
        )
    }

    /// Mixed partial `d²f / dd dD` at time `t`.
    pub fn mixed_partial(&self, t: f64) -> Result<f64> {
        let f = |d: f64, dc: f64| {
            let g = self.geom.with_distance(d).with_diffusion(dc);
            self.with_geometry(g).impulse(t).map(|v| vec![v])
        };
        Ok(diff::mixed(f, self.geom.distance, self.geom.diffusion, diff::SECOND_STEP)?[0])
    }
}
