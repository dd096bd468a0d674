//! Brownian-motion Monte Carlo of the Tx/Rx pair.
//!
//! The Tx sphere sits at the origin and the Rx centre lies on the +x axis at
//! `r + d + R`. Every molecule takes Gaussian steps of per-axis deviation
//! `sqrt(2 D dt)` and is absorbed the first time a step ends inside the Rx.
//! Absorption is checked at step ends only.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{ChannelGeometry, CumulativeHitCurve};
use crate::error::{Error, Result};
use crate::estimator::ObservationSet;
use crate::seed;

/// Molecules per work unit. Each chunk owns a seed stream, so the result does
/// not depend on how chunks are spread over threads.
const CHUNK: u32 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReleaseMode {
    /// All molecules start at the Tx surface point facing the Rx.
    #[default]
    AxisPoint,
    /// Start points drawn uniformly over the Tx surface.
    UniformSurface,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReflectionMode {
    /// A step ending inside the Tx is redrawn once; if the redraw also lands
    /// inside, the molecule stays put for that step.
    #[default]
    RejectStep,
    /// The endpoint is mirrored across the Tx surface along the radius.
    RadialMirror,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub geom: ChannelGeometry,
    /// Time step [µs].
    pub dt_us: f64,
    /// Horizon [s].
    pub t_end: f64,
    pub seed: u64,
    pub release_mode: ReleaseMode,
    pub reflection_mode: ReflectionMode,
}

impl SimulationConfig {
    pub const DEFAULT_DT_US: f64 = 50.0;
    pub const DEFAULT_T_END: f64 = 1.0;
    pub const DEFAULT_MOLECULES: u32 = 3000;

    pub fn new(geom: ChannelGeometry, seed: u64) -> Self {
        Self {
            geom,
            dt_us: Self::DEFAULT_DT_US,
            t_end: Self::DEFAULT_T_END,
            seed,
            release_mode: ReleaseMode::default(),
            reflection_mode: ReflectionMode::default(),
        }
    }

    pub fn dt(&self) -> f64 {
        self.dt_us / 1e6
    }

    pub fn steps(&self) -> usize {
        (self.t_end / self.dt()).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        self.geom.validate()?;
        if !(self.dt_us > 0.0) || !self.dt_us.is_finite() {
            return Err(Error::Config(format!("dt_us must be positive, got {}", self.dt_us)));
        }
        if !(self.t_end >= 100.0 * self.dt()) || !self.t_end.is_finite() {
            return Err(Error::Config(format!(
                "t_end = {} s must cover at least 100 steps of {} µs",
                self.t_end, self.dt_us
            )));
        }
        // centre separation r + d + R must exceed r + R; d > 0 is already checked,
        // but a tiny d relative to the radii collapses in floating point
        let g = &self.geom;
        if !(g.tx_radius + g.distance + g.rx_radius > g.tx_radius + g.rx_radius) {
            return Err(Error::Config("Tx and Rx spheres overlap".into()));
        }
        Ok(())
    }
}

struct Scene {
    tx_r2: f64,
    tx_r: f64,
    rx_x: f64,
    rx_r2: f64,
    sigma: f64,
    steps: usize,
    release: ReleaseMode,
    reflection: ReflectionMode,
}

impl Scene {
    fn start(&self, rng: &mut ChaCha8Rng) -> [f64; 3] {
        match self.release {
            ReleaseMode::AxisPoint => [self.tx_r, 0.0, 0.0],
            ReleaseMode::UniformSurface => loop {
                let v: [f64; 3] = [
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                ];
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if n > 1e-12 {
                    break [self.tx_r * v[0] / n, self.tx_r * v[1] / n, self.tx_r * v[2] / n];
                }
            },
        }
    }

    fn propose(&self, p: &[f64; 3], rng: &mut ChaCha8Rng) -> [f64; 3] {
        let s = self.sigma;
        [
            p[0] + s * rng.sample::<f64, _>(StandardNormal),
            p[1] + s * rng.sample::<f64, _>(StandardNormal),
            p[2] + s * rng.sample::<f64, _>(StandardNormal),
        ]
    }

    fn step(&self, p: &[f64; 3], rng: &mut ChaCha8Rng) -> [f64; 3] {
        let q = self.propose(p, rng);
        let rho2 = norm2(&q);
        if rho2 >= self.tx_r2 {
            return q;
        }
        match self.reflection {
            ReflectionMode::RejectStep => {
                let q = self.propose(p, rng);
                if norm2(&q) >= self.tx_r2 {
                    q
                } else {
                    *p
                }
            }
            ReflectionMode::RadialMirror => {
                let rho = rho2.sqrt();
                if rho < 1e-12 {
                    return *p;
                }
                let k = (2.0 * self.tx_r - rho) / rho;
                [q[0] * k, q[1] * k, q[2] * k]
            }
        }
    }

    fn absorbed(&self, p: &[f64; 3]) -> bool {
        let dx = p[0] - self.rx_x;
        dx * dx + p[1] * p[1] + p[2] * p[2] <= self.rx_r2
    }

    /// Step index (1-based) at which the molecule is absorbed, if any.
    fn run_one(&self, rng: &mut ChaCha8Rng) -> Result<Option<usize>> {
        let mut p = self.start(rng);
        for k in 1..=self.steps {
            p = self.step(&p, rng);
            if self.absorbed(&p) {
                return Ok(Some(k));
            }
        }
        if !p.iter().all(|v| v.is_finite()) {
            return Err(Error::Internal(format!("non-finite molecule position {p:?}")));
        }
        Ok(None)
    }
}

fn norm2(p: &[f64; 3]) -> f64 {
    p[0] * p[0] + p[1] * p[1] + p[2] * p[2]
}

/// Per-step absorption counts; entry `k - 1` counts molecules absorbed at step `k`.
pub fn simulate_counts(config: &SimulationConfig) -> Result<Vec<u32>> {
    config.validate()?;
    let g = &config.geom;
    let scene = Scene {
        tx_r2: g.tx_radius * g.tx_radius,
        tx_r: g.tx_radius,
        rx_x: g.tx_radius + g.distance + g.rx_radius,
        rx_r2: g.rx_radius * g.rx_radius,
        sigma: (2.0 * g.diffusion * config.dt()).sqrt(),
        steps: config.steps(),
        release: config.release_mode,
        reflection: config.reflection_mode,
    };
    let n = g.molecules;
    let chunks: Vec<u32> = (0..n.div_ceil(CHUNK)).collect();
    let partial: Vec<Vec<u32>> = chunks
        .par_iter()
        .map(|&c| {
            let mut rng = seed::stream(config.seed, &[c as u64]);
            let mut hist = vec![0u32; scene.steps];
            for _ in (c * CHUNK)..((c + 1) * CHUNK).min(n) {
                if let Some(k) = scene.run_one(&mut rng)? {
                    hist[k - 1] += 1;
                }
            }
            Ok(hist)
        })
        .collect::<Result<_>>()?;
    let mut total = vec![0u32; scene.steps];
    for h in &partial {
        for (t, v) in total.iter_mut().zip(h) {
            *t += v;
        }
    }
    Ok(total)
}

/// Cumulative absorbed fraction at every step boundary `k * dt`, `k = 1..=steps`.
pub fn simulate(config: &SimulationConfig) -> Result<CumulativeHitCurve> {
    let counts = simulate_counts(config)?;
    let n = config.geom.molecules as f64;
    let mut acc = 0u64;
    let mut values = Vec::with_capacity(counts.len());
    for c in &counts {
        acc += *c as u64;
        values.push(acc as f64 / n);
    }
    // scale in microseconds first so whole-µs steps land on exact times
    let times = (1..=counts.len()).map(|k| k as f64 * config.dt_us / 1e6).collect();
    CumulativeHitCurve::new(times, values)
}

/// Equally spaced sample grid `t1 .. t_end` with `m` points.
pub fn sample_grid(t1: f64, m: usize, t_end: f64) -> Result<Vec<f64>> {
    if m < 2 || !(t1 > 0.0 && t1 < t_end) {
        return Err(Error::Config(format!(
            "sample grid needs M >= 2 and 0 < t1 < t_end (got M = {m}, t1 = {t1}, t_end = {t_end})"
        )));
    }
    let step = (t_end - t1) / (m - 1) as f64;
    Ok((0..m)
        .map(|i| if i + 1 == m { t_end } else { t1 + i as f64 * step })
        .collect())
}

/// Counts newly absorbed in each slot `(t_{m-1}, t_m]`, with `t_0 = 0`.
pub fn observe_increments(
    curve: &CumulativeHitCurve,
    n_tx: u32,
    t1: f64,
    m: usize,
    t_end: f64,
) -> Result<ObservationSet> {
    let times = sample_grid(t1, m, t_end)?;
    let resolution = match curve.times() {
        [a, b, ..] => b - a,
        [a] => *a,
        [] => unreachable!("curves are non-empty"),
    };
    let spacing = times[1] - times[0];
    if spacing < resolution * (1.0 - 1e-9) || t1 < resolution * (1.0 - 1e-9) {
        return Err(Error::Config(format!(
            "sample spacing {spacing} s is finer than the simulation step {resolution} s"
        )));
    }
    let absorbed = |t: f64| (curve.value_at(t) * n_tx as f64).round();
    let mut prev = 0.0;
    let counts = times
        .iter()
        .map(|&t| {
            let now = absorbed(t);
            let s = now - prev;
            prev = now;
            s
        })
        .collect();
    ObservationSet::new(times, counts, n_tx)
}
