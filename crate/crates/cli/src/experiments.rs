//! Experiment drivers behind the subcommands.
//!
//! Every driver computes in memory first and writes its artifacts only after
//! all cells are done. Seeds are derived from the master seed and the bit
//! patterns of the cell's geometry, so a cell gets the same stream whether it
//! runs alone or as part of a grid.

use rayon::prelude::*;
use serde::Serialize;

use molcomm::channel::ChannelParam;
use molcomm::estimator::{self, Range, TrialSummary, Unknown};
use molcomm::pso::{self, FitResult};
use molcomm::simulator;
use molcomm::{
    seed, ChannelGeometry, ChannelModel, CorrectionParams, CumulativeHitCurve, ErfcKernel, ModelOptions,
};

use crate::config::{CalibrationMode, ExperimentConfig};
use crate::output::{Artifacts, Cell};
use crate::HarnessError;

const TAG_SIMULATE: u64 = 1;
const TAG_FIT: u64 = 2;
const TAG_TRIALS: u64 = 3;

fn geometry_key(g: &ChannelGeometry) -> [u64; 4] {
    [
        g.distance.to_bits(),
        g.rx_radius.to_bits(),
        g.tx_radius.to_bits(),
        g.diffusion.to_bits(),
    ]
}

fn cell_seed(cfg: &ExperimentConfig, tag: u64, g: &ChannelGeometry) -> u64 {
    let k = geometry_key(g);
    seed::derive(cfg.seed, &[tag, k[0], k[1], k[2], k[3]])
}

pub fn simulate_cell(cfg: &ExperimentConfig, g: &ChannelGeometry) -> Result<CumulativeHitCurve, HarnessError> {
    let sc = cfg.simulation_config(*g, cell_seed(cfg, TAG_SIMULATE, g));
    Ok(simulator::simulate(&sc)?)
}

/// The curve samples the loss is evaluated on.
pub fn fit_target(cfg: &ExperimentConfig, curve: &CumulativeHitCurve) -> CumulativeHitCurve {
    let stride = (curve.len() / cfg.pso.fit_samples).max(1);
    curve.subsample(stride)
}

pub fn fit_cell(cfg: &ExperimentConfig, g: &ChannelGeometry, curve: &CumulativeHitCurve) -> Result<FitResult, HarnessError> {
    let target = fit_target(cfg, curve);
    Ok(pso::fit(g, &target, &cfg.pso_config(cell_seed(cfg, TAG_FIT, g)))?)
}

/// Per-sample RMSE of `params` against the fit samples of `curve`.
pub fn rmse_against(cfg: &ExperimentConfig, g: &ChannelGeometry, params: CorrectionParams, curve: &CumulativeHitCurve) -> Result<f64, HarnessError> {
    let target = fit_target(cfg, curve);
    let l = pso::loss(g, params, &target, cfg.model_options())?;
    Ok((l / target.len() as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellFit {
    pub distance: f64,
    pub rx_radius: f64,
    pub rmse: f64,
    pub baseline_rmse: f64,
    pub params: CorrectionParams,
    pub terminal_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridSummary {
    pub cells: usize,
    pub failed: usize,
    pub rmse_mean: f64,
    pub rmse_cv: f64,
    /// `[b1, b2, b3]` means over the fitted cells.
    pub b_mean: [f64; 3],
    pub b_cv: [f64; 3],
    pub beats_baseline_everywhere: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table2 {
    pub cells: Vec<CellFit>,
    pub failures: Vec<String>,
    pub summary: GridSummary,
}

fn mean_cv(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt() / mean.abs())
}

fn fit_one_cell(cfg: &ExperimentConfig, d: f64, r: f64) -> Result<CellFit, HarnessError> {
    let g = cfg.geometry(d, r, cfg.grid.diffusion)?;
    let curve = simulate_cell(cfg, &g)?;
    let fit = fit_cell(cfg, &g, &curve)?;
    let baseline_rmse = rmse_against(cfg, &g, CorrectionParams::IDEAL, &curve)?;
    Ok(CellFit {
        distance: d,
        rx_radius: r,
        rmse: fit.rmse,
        baseline_rmse,
        params: fit.params,
        terminal_fraction: curve.last_value(),
    })
}

/// Simulates and fits every `(d, R)` cell of the grid.
pub fn table2(cfg: &ExperimentConfig) -> Result<Table2, HarnessError> {
    let cells: Vec<(f64, f64)> = cfg
        .grid
        .distances
        .iter()
        .flat_map(|&d| cfg.grid.rx_radii.iter().map(move |&r| (d, r)))
        .collect();
    let results: Vec<Result<CellFit, HarnessError>> = cells.par_iter().map(|&(d, r)| fit_one_cell(cfg, d, r)).collect();
    let mut ok = Vec::new();
    let mut failures = Vec::new();
    for ((d, r), res) in cells.iter().zip(results) {
        match res {
            Ok(c) => ok.push(c),
            Err(e) => failures.push(format!("table2 cell d={d} R={r}: {e}")),
        }
    }
    if ok.is_empty() {
        return Err(HarnessError::Run(format!("every table2 cell failed: {failures:?}")));
    }
    let col = |f: fn(&CellFit) -> f64| ok.iter().map(f).collect::<Vec<f64>>();
    let (rmse_mean, rmse_cv) = mean_cv(&col(|c| c.rmse));
    let b1 = mean_cv(&col(|c| c.params.b1));
    let b2 = mean_cv(&col(|c| c.params.b2));
    let b3 = mean_cv(&col(|c| c.params.b3));
    let summary = GridSummary {
        cells: cells.len(),
        failed: failures.len(),
        rmse_mean,
        rmse_cv,
        b_mean: [b1.0, b2.0, b3.0],
        b_cv: [b1.1, b2.1, b3.1],
        beats_baseline_everywhere: failures.is_empty() && ok.iter().all(|c| c.rmse < c.baseline_rmse),
    };
    Ok(Table2 {
        cells: ok,
        failures,
        summary,
    })
}

pub fn write_table2(out: &mut Artifacts, t: &Table2) -> Result<(), HarnessError> {
    let rows: Vec<Vec<Cell>> = t
        .cells
        .iter()
        .map(|c| {
            let p = c.params;
            vec![c.distance.into(), c.rx_radius.into(), c.rmse.into(), p.beta.into(), p.b1.into(), p.b2.into(), p.b3.into()]
        })
        .collect();
    out.csv("table2.csv", &["d", "R", "rmse", "beta", "b1", "b2", "b3"], &rows)?;
    let base: Vec<Vec<Cell>> = t
        .cells
        .iter()
        .map(|c| vec![c.distance.into(), c.rx_radius.into(), c.baseline_rmse.into()])
        .collect();
    out.csv("table2_baseline.csv", &["d", "R", "rmse"], &base)?;
    out.json("table2_summary.json", &t.summary)
}

/// Correction parameters used by the estimator and the analytic comparisons.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Calibration {
    pub mode: CalibrationMode,
    pub params: CorrectionParams,
    #[serde(skip)]
    pub grid: Option<Table2>,
}

pub fn calibrate(cfg: &ExperimentConfig) -> Result<Calibration, HarnessError> {
    let cal = &cfg.calibration;
    let reference = || fit_one_cell(cfg, cal.reference_distance, cal.reference_rx_radius);
    let (params, grid) = match cal.mode {
        CalibrationMode::Fixed => {
            let p = cal.fixed.ok_or_else(|| HarnessError::Config("calibration.fixed missing".into()))?;
            (CorrectionParams::from_array(p), None)
        }
        CalibrationMode::ReferenceFit => (reference()?.params, None),
        CalibrationMode::GridAverage => {
            let t = table2(cfg)?;
            let beta = match t
                .cells
                .iter()
                .find(|c| c.distance == cal.reference_distance && c.rx_radius == cal.reference_rx_radius)
            {
                Some(c) => c.params.beta,
                None => reference()?.params.beta,
            };
            let [b1, b2, b3] = t.summary.b_mean;
            (CorrectionParams { beta, b1, b2, b3 }, Some(t))
        }
    };
    params.validate()?;
    Ok(Calibration {
        mode: cal.mode,
        params,
        grid,
    })
}

/// `(t, numeric, analytic)` per bin: the bin-averaged slope of the cumulative
/// model evaluated with the exact erfc, and the analytic impulse response
/// with the approximate kernel at the bin centre.
pub fn impulse_comparison(g: &ChannelGeometry, params: CorrectionParams, opts: ModelOptions, t_end: f64, bins: usize) -> Result<Vec<(f64, f64, f64)>, HarnessError> {
    let exact = ChannelModel::new(*g, params, opts.with_erfc(ErfcKernel::Exact));
    let approx = ChannelModel::new(*g, params, opts.with_erfc(ErfcKernel::Approx));
    let w = t_end / bins as f64;
    let mut prev = 0.0;
    (1..=bins)
        .map(|k| {
            let right = if k == bins { t_end } else { k as f64 * w };
            let f = exact.cumulative(right)?;
            let numeric = (f - prev) / w;
            prev = f;
            let centre = right - 0.5 * w;
            Ok((centre, numeric, approx.impulse(centre)?))
        })
        .collect()
}

pub fn comparison_rmse(rows: &[(f64, f64, f64)]) -> f64 {
    (rows.iter().map(|r| (r.1 - r.2).powi(2)).sum::<f64>() / rows.len() as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Table4Cell {
    pub distance: f64,
    pub diffusion: f64,
    pub rmse: f64,
}

/// RMSE in expected molecules per second, i.e. the rate RMSE scaled by n_tx.
pub fn table4(cfg: &ExperimentConfig, params: CorrectionParams) -> Result<(Vec<Table4Cell>, Vec<String>), HarnessError> {
    let t4 = &cfg.table4;
    let mut cells = Vec::new();
    let mut failures = Vec::new();
    for &d in &t4.distances {
        for &dc in &t4.diffusions {
            let g = cfg.geometry(d, t4.rx_radius, dc)?;
            match impulse_comparison(&g, params, cfg.model_options(), cfg.simulation.t_end, t4.bins) {
                Ok(rows) => cells.push(Table4Cell {
                    distance: d,
                    diffusion: dc,
                    rmse: g.molecules as f64 * comparison_rmse(&rows),
                }),
                Err(e) => failures.push(format!("table4 cell d={d} D={dc}: {e}")),
            }
        }
    }
    Ok((cells, failures))
}

pub fn write_table4(out: &mut Artifacts, cells: &[Table4Cell]) -> Result<(), HarnessError> {
    let rows: Vec<Vec<Cell>> = cells
        .iter()
        .map(|c| vec![c.distance.into(), c.diffusion.into(), c.rmse.into()])
        .collect();
    out.csv("table4.csv", &["d", "D", "rmse"], &rows)
}

/// Simulation vs fitted model rates, and numeric vs analytic model rates.
pub fn impulse(cfg: &ExperimentConfig, out: &mut Artifacts) -> Result<(), HarnessError> {
    let im = &cfg.impulse;
    let g = cfg.geometry(im.distance, im.rx_radius, cfg.channel.diffusion)?;
    let curve = simulate_cell(cfg, &g)?;
    let fit = fit_cell(cfg, &g, &curve)?;
    let model = ChannelModel::new(g, fit.params, cfg.model_options());
    let t_end = cfg.simulation.t_end;
    let w = t_end / im.bins as f64;
    let mut prev = 0.0;
    let mut sim_rows = Vec::with_capacity(im.bins);
    for k in 1..=im.bins {
        let right = if k == im.bins { t_end } else { k as f64 * w };
        let s = curve.value_at(right);
        let centre = right - 0.5 * w;
        sim_rows.push(vec![centre.into(), ((s - prev) / w).into(), model.impulse(centre)?.into()]);
        prev = s;
    }
    out.csv("impulse_sim.csv", &["t", "sim_rate", "model_rate"], &sim_rows)?;
    let cmp = impulse_comparison(&g, fit.params, cfg.model_options(), t_end, im.bins)?;
    let rows: Vec<Vec<Cell>> = cmp.iter().map(|r| vec![r.0.into(), r.1.into(), r.2.into()]).collect();
    out.csv("impulse_model.csv", &["t", "numeric_rate", "analytic_rate"], &rows)?;
    out.json("impulse_fit.json", &fit_json(&fit))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitJson {
    pub beta: f64,
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
    pub rmse: f64,
    pub iterations: usize,
    pub seed: u64,
}

pub fn fit_json(f: &FitResult) -> FitJson {
    FitJson {
        beta: f.params.beta,
        b1: f.params.b1,
        b2: f.params.b2,
        b3: f.params.b3,
        rmse: f.rmse,
        iterations: f.iterations,
        seed: f.seed,
    }
}

pub fn simulate(cfg: &ExperimentConfig, out: &mut Artifacts) -> Result<(), HarnessError> {
    let g = cfg.channel_geometry()?;
    let curve = simulate_cell(cfg, &g)?;
    let rows: Vec<Vec<Cell>> = curve
        .times()
        .iter()
        .zip(curve.values())
        .map(|(&t, &v)| vec![t.into(), v.into()])
        .collect();
    out.csv("curve.csv", &["t_seconds", "cumulative_fraction"], &rows)?;
    let e = &cfg.estimation;
    for &m in &e.m_values {
        let obs = simulator::observe_increments(&curve, g.molecules, e.t1, m, e.t_end)?;
        let rows: Vec<Vec<Cell>> = obs
            .times()
            .iter()
            .zip(obs.counts())
            .map(|(&t, &s)| vec![t.into(), s.into()])
            .collect();
        out.csv(&format!("observations_M{m}.csv"), &["t_seconds", "count"], &rows)?;
    }
    Ok(())
}

pub fn fit(cfg: &ExperimentConfig, out: &mut Artifacts) -> Result<FitResult, HarnessError> {
    let g = cfg.channel_geometry()?;
    let curve = simulate_cell(cfg, &g)?;
    let f = fit_cell(cfg, &g, &curve)?;
    out.json("fit.json", &fit_json(&f))?;
    let rows: Vec<Vec<Cell>> = f
        .loss_trace
        .iter()
        .enumerate()
        .map(|(i, &l)| vec![(i + 1).into(), l.into()])
        .collect();
    out.csv("fit_trace.csv", &["iteration", "best_loss"], &rows)?;
    Ok(f)
}

fn case_names(which: Unknown) -> &'static [&'static str] {
    match which {
        Unknown::Distance => &["d"],
        Unknown::Diffusion => &["D"],
        Unknown::Joint => &["joint_d", "joint_D"],
    }
}

const CASES: [Unknown; 3] = [Unknown::Distance, Unknown::Diffusion, Unknown::Joint];

fn ranges_for(cfg: &ExperimentConfig, which: Unknown) -> Result<Vec<Range>, HarnessError> {
    Ok(match which {
        Unknown::Distance => vec![cfg.distance_range()?],
        Unknown::Diffusion => vec![cfg.diffusion_range()?],
        Unknown::Joint => vec![cfg.distance_range()?, cfg.diffusion_range()?],
    })
}

fn truth(g: &ChannelGeometry, which: Unknown) -> Vec<f64> {
    which.params().iter().map(|p: &ChannelParam| p.get(g)).collect()
}

/// Estimates from one particle simulation of the configured channel.
pub fn estimate(cfg: &ExperimentConfig, params: CorrectionParams, out: &mut Artifacts) -> Result<Vec<String>, HarnessError> {
    let g = cfg.channel_geometry()?;
    let model = ChannelModel::new(g, params, cfg.model_options());
    let curve = simulate_cell(cfg, &g)?;
    let e = &cfg.estimation;
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for &m in &e.m_values {
        let obs = simulator::observe_increments(&curve, g.molecules, e.t1, m, e.t_end)?;
        for which in CASES {
            match estimator::estimate(&obs, &model, which, &ranges_for(cfg, which)?) {
                Ok(r) => {
                    for ((name, est), tru) in case_names(which).iter().zip(&r.theta_hat).zip(truth(&g, which)) {
                        rows.push(vec![
                            m.into(),
                            (*name).into(),
                            tru.into(),
                            (*est).into(),
                            r.iterations.into(),
                            (r.converged as usize).into(),
                        ]);
                    }
                }
                Err(err) => failures.push(format!("estimate M={m} {which:?}: {err}")),
            }
        }
    }
    out.csv("estimate.csv", &["M", "case", "truth", "estimate", "iterations", "converged"], &rows)?;
    Ok(failures)
}

pub fn crlb(cfg: &ExperimentConfig, params: CorrectionParams, out: &mut Artifacts) -> Result<Vec<String>, HarnessError> {
    let g = cfg.channel_geometry()?;
    let model = ChannelModel::new(g, params, cfg.model_options());
    let e = &cfg.estimation;
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for &m in &e.m_values {
        let times = simulator::sample_grid(e.t1, m, e.t_end)?;
        for which in CASES {
            match estimator::fisher_crlb(&model, &times, which) {
                Ok(f) => {
                    let norm = f.normalized(&truth(&g, which));
                    for ((name, c), n) in case_names(which).iter().zip(&f.crlb).zip(norm) {
                        rows.push(vec![m.into(), (*name).into(), (*c).into(), n.into()]);
                    }
                }
                Err(err) => failures.push(format!("crlb M={m} {which:?}: {err}")),
            }
        }
    }
    out.csv("crlb.csv", &["M", "case", "crlb", "normalized_crlb"], &rows)?;
    Ok(failures)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Fig4Row {
    pub m: usize,
    pub case: Unknown,
    pub summary: TrialSummary,
    pub normalized_crlb: Vec<f64>,
}

/// Monte Carlo NMSE and normalized CRLB for every M and case.
///
/// Trials draw independent Poisson counts from the calibrated model's slot
/// means at the configured channel.
pub fn fig4(cfg: &ExperimentConfig, params: CorrectionParams) -> Result<(Vec<Fig4Row>, Vec<String>), HarnessError> {
    let g = cfg.channel_geometry()?;
    let model = ChannelModel::new(g, params, cfg.model_options());
    let e = &cfg.estimation;
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for &m in &e.m_values {
        let times = simulator::sample_grid(e.t1, m, e.t_end)?;
        for (ci, which) in CASES.into_iter().enumerate() {
            let s = seed::derive(cfg.seed, &[TAG_TRIALS, ci as u64, m as u64]);
            let res = estimator::run_trials(&model, &times, which, &ranges_for(cfg, which)?, e.trials, s)
                .and_then(|summary| {
                    let f = estimator::fisher_crlb(&model, &times, which)?;
                    Ok((summary, f.normalized(&truth(&g, which))))
                });
            match res {
                Ok((summary, normalized_crlb)) => {
                    if summary.failures > 0 {
                        failures.push(format!("fig4 M={m} {which:?}: {} of {} trials failed", summary.failures, summary.trials));
                    }
                    rows.push(Fig4Row {
                        m,
                        case: which,
                        summary,
                        normalized_crlb,
                    });
                }
                Err(err) => failures.push(format!("fig4 M={m} {which:?}: {err}")),
            }
        }
    }
    Ok((rows, failures))
}

pub fn write_fig4(out: &mut Artifacts, rows: &[Fig4Row]) -> Result<(), HarnessError> {
    for (which, file) in [(Unknown::Distance, "fig4_d.csv"), (Unknown::Diffusion, "fig4_D.csv"), (Unknown::Joint, "fig4_joint.csv")] {
        // the joint panel reports the mean of the two normalized errors and bounds
        let data: Vec<Vec<Cell>> = rows
            .iter()
            .filter(|r| r.case == which)
            .map(|r| {
                let k = r.summary.nmse.len() as f64;
                let nmse = r.summary.nmse.iter().sum::<f64>() / k;
                let crlb = r.normalized_crlb.iter().sum::<f64>() / k;
                vec![r.m.into(), nmse.into(), crlb.into()]
            })
            .collect();
        out.csv(file, &["M", "nmse", "crlb"], &data)?;
    }
    let mut report = Vec::new();
    for r in rows {
        for (u, name) in case_names(r.case).iter().enumerate() {
            report.push(vec![
                r.m.into(),
                (*name).into(),
                r.summary.trials.into(),
                r.summary.nmse[u].into(),
                r.normalized_crlb[u].into(),
                r.summary.mean_iterations.into(),
                r.summary.convergence_rate.into(),
            ]);
        }
    }
    out.csv(
        "estimation_report.csv",
        &["M", "case", "trial_count", "nmse", "normalized_crlb", "mean_iterations", "convergence_rate"],
        &report,
    )
}
