//! Global-best particle swarm fit of `(β, b1, b2, b3)` to a cumulative curve.
//!
//! After the swarm finishes, an optional refine stage runs a bounded
//! Nelder–Mead search from the best few personal bests, once in the full box
//! and once on the `β = β_max` face with the start projected onto it. The face
//! gets its own search because, whenever the full-receiver bracket changes
//! sign inside the fit window, every `β < π` puts a pole into the model and
//! the face is all that is left of the admissible set nearby. Set
//! `refine_starts = 0` for the plain swarm.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::channel::{ChannelGeometry, ChannelModel, CorrectionParams, CumulativeHitCurve, ModelOptions};
use crate::error::{Error, Result};
use crate::seed;

const DIM: usize = 4;

/// Closed box for `[β, b1, b2, b3]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lo: [f64; DIM],
    pub hi: [f64; DIM],
}

impl Default for Bounds {
    fn default() -> Self {
        Self {
            lo: [0.05, 0.1, 0.1, 0.1],
            hi: [PI, 10.0, 1.5, 1.5],
        }
    }
}

impl Bounds {
    fn width(&self, i: usize) -> f64 {
        self.hi[i] - self.lo[i]
    }

    fn clamp(&self, x: &mut [f64; DIM]) {
        for (i, v) in x.iter_mut().enumerate() {
            *v = v.clamp(self.lo[i], self.hi[i]);
        }
    }

    pub fn contains(&self, x: &[f64; DIM]) -> bool {
        (0..DIM).all(|i| (self.lo[i]..=self.hi[i]).contains(&x[i]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsoConfig {
    pub cognitive: f64,
    pub social: f64,
    pub inertia: f64,
    pub iterations: usize,
    pub swarm_size: usize,
    pub bounds: Bounds,
    pub seed: u64,
    /// Nelder–Mead restarts after the swarm (0 disables the stage).
    pub refine_starts: usize,
    /// Function-evaluation budget per restart.
    pub refine_evaluations: usize,
    pub model: ModelOptions,
}

impl Default for PsoConfig {
    fn default() -> Self {
        Self {
            cognitive: 0.5,
            social: 0.3,
            inertia: 0.9,
            iterations: 200,
            swarm_size: 50,
            bounds: Bounds::default(),
            seed: 0,
            refine_starts: 5,
            refine_evaluations: 1500,
            model: ModelOptions::default(),
        }
    }
}

impl PsoConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("cognitive", self.cognitive),
            ("social", self.social),
            ("inertia", self.inertia),
        ] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Config(format!("PSO {name} weight must be >= 0, got {w}")));
            }
        }
        if self.iterations < 1 {
            return Err(Error::Config("PSO needs at least one iteration".into()));
        }
        if self.swarm_size < 2 {
            return Err(Error::Config("PSO swarm needs at least two particles".into()));
        }
        for i in 0..DIM {
            let (lo, hi) = (self.bounds.lo[i], self.bounds.hi[i]);
            if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Config(format!("degenerate bound [{lo}, {hi}] for parameter {i}")));
            }
        }
        if !(self.bounds.lo[0] > 0.0 && self.bounds.hi[0] <= PI) {
            return Err(Error::Config("β bounds must lie in (0, π]".into()));
        }
        if (1..DIM).any(|i| !(self.bounds.lo[i] > 0.0)) {
            return Err(Error::Config("b1..b3 bounds must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: CorrectionParams,
    /// `sqrt(loss / M)` over the `M` fitted samples.
    pub rmse: f64,
    pub loss: f64,
    /// Global-best loss after each swarm iteration, followed by one entry for
    /// the refine stage when it runs.
    pub loss_trace: Vec<f64>,
    pub evaluations: usize,
    pub iterations: usize,
    pub seed: u64,
}

/// Sum of squared differences between the model and `target` on its grid.
///
/// Parameter vectors whose cone ratio has a pole inside the grid are rejected:
/// the model is singular there even if no sample lands on the pole.
pub fn loss(geom: &ChannelGeometry, p: CorrectionParams, target: &CumulativeHitCurve, opts: ModelOptions) -> Result<f64> {
    let wrap = |e: Error| Error::ModelAt {
        params: p.to_array(),
        source: Box::new(e),
    };
    p.validate().map_err(wrap)?;
    let model = ChannelModel::new(*geom, p, opts);
    model.check_pole_free(target.times()).map_err(wrap)?;
    let mut sum = 0.0;
    for (&t, &s) in target.times().iter().zip(target.values()) {
        let f = model.cumulative(t).map_err(wrap)?;
        sum += (f - s) * (f - s);
    }
    if !sum.is_finite() {
        return Err(wrap(Error::NumericalInstability("non-finite loss".into())));
    }
    Ok(sum)
}

struct Objective<'a> {
    geom: &'a ChannelGeometry,
    target: &'a CumulativeHitCurve,
    opts: ModelOptions,
}

impl Objective<'_> {
    fn eval(&self, x: &[f64; DIM]) -> (f64, Option<Error>) {
        match loss(self.geom, CorrectionParams::from_array(*x), self.target, self.opts) {
            Ok(v) => (v, None),
            Err(e) => (f64::INFINITY, Some(e)),
        }
    }
}

pub fn fit(geom: &ChannelGeometry, target: &CumulativeHitCurve, config: &PsoConfig) -> Result<FitResult> {
    config.validate()?;
    geom.validate()?;
    if target.is_empty() {
        return Err(Error::Config("empty fit target".into()));
    }
    let b = &config.bounds;
    let obj = Objective {
        geom,
        target,
        opts: config.model,
    };
    let n = config.swarm_size;

    let mut pos: Vec<[f64; DIM]> = (0..n)
        .map(|i| {
            let mut rng = seed::stream(config.seed, &[i as u64, 0]);
            std::array::from_fn(|k| b.lo[k] + rng.random::<f64>() * b.width(k))
        })
        .collect();
    let mut vel = vec![[0.0; DIM]; n];
    let first: Vec<(f64, Option<Error>)> = pos.par_iter().map(|x| obj.eval(x)).collect();
    let mut evaluations = n;
    let mut last_error = first.iter().find_map(|(_, e)| e.clone());
    let mut pbest = pos.clone();
    let mut pbest_loss: Vec<f64> = first.iter().map(|r| r.0).collect();
    let mut g = argmin(&pbest_loss);
    let mut trace = Vec::with_capacity(config.iterations + 1);

    for it in 1..=config.iterations {
        let (gpos, gloss) = (pbest[g], pbest_loss[g]);
        for i in 0..n {
            let mut rng = seed::stream(config.seed, &[i as u64, it as u64]);
            for k in 0..DIM {
                let (r1, r2): (f64, f64) = (rng.random(), rng.random());
                let vmax = 0.5 * b.width(k);
                let v = config.inertia * vel[i][k]
                    + config.cognitive * r1 * (pbest[i][k] - pos[i][k])
                    + config.social * r2 * (gpos[k] - pos[i][k]);
                vel[i][k] = v.clamp(-vmax, vmax);
                pos[i][k] += vel[i][k];
            }
            b.clamp(&mut pos[i]);
        }
        let evals: Vec<(f64, Option<Error>)> = pos.par_iter().map(|x| obj.eval(x)).collect();
        evaluations += n;
        for (i, (l, e)) in evals.into_iter().enumerate() {
            if let Some(e) = e {
                last_error = Some(e);
            }
            if l < pbest_loss[i] {
                pbest_loss[i] = l;
                pbest[i] = pos[i];
            }
        }
        g = argmin(&pbest_loss);
        debug_assert!(pbest_loss[g] <= gloss);
        trace.push(pbest_loss[g]);
    }

    if !pbest_loss[g].is_finite() {
        return Err(Error::FitFailure(format!(
            "every particle stayed in a region where the model fails; last error: {}",
            last_error.map_or_else(|| "none".into(), |e| e.to_string())
        )));
    }

    let mut best = (pbest[g], pbest_loss[g]);
    if config.refine_starts > 0 {
        let mut order: Vec<usize> = (0..n).filter(|&i| pbest_loss[i].is_finite()).collect();
        order.sort_by(|&a, &c| pbest_loss[a].total_cmp(&pbest_loss[c]).then(a.cmp(&c)));
        order.dedup_by(|a, c| pbest[*a] == pbest[*c]);
        let starts: Vec<[f64; DIM]> = order.iter().take(config.refine_starts).map(|&i| pbest[i]).collect();
        let mut jobs: Vec<([f64; DIM], [bool; DIM])> = Vec::with_capacity(2 * starts.len());
        for s in &starts {
            jobs.push((*s, [true; DIM]));
            let mut face = *s;
            face[0] = b.hi[0];
            jobs.push((face, [false, true, true, true]));
        }
        let runs: Vec<([f64; DIM], f64, usize)> = jobs
            .par_iter()
            .map(|(s, free)| nelder_mead(|x| obj.eval(x).0, *s, b, *free, config.refine_evaluations))
            .collect();
        for (x, l, used) in runs {
            evaluations += used;
            if l < best.1 {
                best = (x, l);
            }
        }
        trace.push(best.1);
    }

    Ok(FitResult {
        params: CorrectionParams::from_array(best.0),
        rmse: (best.1 / target.len() as f64).sqrt(),
        loss: best.1,
        loss_trace: trace,
        evaluations,
        iterations: config.iterations,
        seed: config.seed,
    })
}

fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x < v[best] {
            best = i;
        }
    }
    best
}

/// Nelder–Mead over the `free` coordinates, with every trial point projected
/// onto the box. Returns the best point, its value and the evaluations used.
fn nelder_mead<F>(f: F, start: [f64; DIM], b: &Bounds, free: [bool; DIM], budget: usize) -> ([f64; DIM], f64, usize)
where
    F: Fn(&[f64; DIM]) -> f64,
{
    let used = std::cell::Cell::new(0usize);
    let eval = |x: &[f64; DIM]| {
        used.set(used.get() + 1);
        f(x)
    };
    let dims: Vec<usize> = (0..DIM).filter(|&k| free[k]).collect();
    let n = dims.len();
    let mut simplex: Vec<([f64; DIM], f64)> = Vec::with_capacity(n + 1);
    let f0 = eval(&start);
    simplex.push((start, f0));
    if n == 0 {
        return (start, f0, used.get());
    }
    for &k in &dims {
        let mut x = start;
        let h = 0.05 * b.width(k);
        // step inward if the start sits on the upper face
        x[k] = if x[k] + h <= b.hi[k] { x[k] + h } else { x[k] - h };
        let fx = eval(&x);
        simplex.push((x, fx));
    }
    let project = |mut x: [f64; DIM]| {
        b.clamp(&mut x);
        x
    };
    while used.get() < budget {
        simplex.sort_by(|a, c| a.1.total_cmp(&c.1));
        let (fb, fw) = (simplex[0].1, simplex[n].1);
        let spread = (0..DIM)
            .map(|k| {
                simplex
                    .iter()
                    .map(|s| ((s.0[k] - simplex[0].0[k]) / b.width(k)).abs())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        if fw.is_finite() && (fw - fb) <= 1e-15 * fb.abs() + 1e-30 && spread < 1e-10 {
            break;
        }
        let mut centroid = [0.0; DIM];
        for s in &simplex[..n] {
            for k in 0..DIM {
                centroid[k] += s.0[k] / n as f64;
            }
        }
        let worst = simplex[n].0;
        let along = |t: f64| project(std::array::from_fn(|k| centroid[k] + t * (worst[k] - centroid[k])));
        let xr = along(-1.0);
        let fr = eval(&xr);
        if fr < fb {
            let xe = along(-2.0);
            let fe = eval(&xe);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
        } else {
            let (xc, fc) = if fr < fw {
                let x = along(-0.5);
                (x, eval(&x))
            } else {
                let x = along(0.5);
                (x, eval(&x))
            };
            if fc < fw.min(fr) {
                simplex[n] = (xc, fc);
            } else {
                let best = simplex[0].0;
                for s in simplex.iter_mut().skip(1) {
                    let x = project(std::array::from_fn(|k| best[k] + 0.5 * (s.0[k] - best[k])));
                    *s = (x, eval(&x));
                }
            }
        }
    }
    simplex.sort_by(|a, c| a.1.total_cmp(&c.1));
    (simplex[0].0, simplex[0].1, used.get())
}
