//! Experiment configuration (TOML). Unknown keys are rejected.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use molcomm::estimator::Range;
use molcomm::pso::Bounds;
use molcomm::simulator::{ReflectionMode, ReleaseMode, SimulationConfig};
use molcomm::{ChannelGeometry, CorrectionParams, ErfcKernel, ModelOptions, Prefactor, PsoConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Master seed; every stochastic stage derives its stream from it.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub channel: ChannelSettings,
    pub grid: GridSettings,
    pub simulation: SimulationSettings,
    pub model: ModelSettings,
    pub pso: PsoSettings,
    pub calibration: CalibrationSettings,
    pub estimation: EstimationSettings,
    pub table4: Table4Settings,
    pub impulse: ImpulseSettings,
}

/// Single channel used by `simulate`, `fit`, `estimate`, `crlb` and `fig4`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelSettings {
    pub distance: f64,
    pub rx_radius: f64,
    pub tx_radius: f64,
    pub diffusion: f64,
    pub molecules: u32,
}

/// `(d, R)` grid swept by `table2` and averaged by the calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSettings {
    pub distances: Vec<f64>,
    pub rx_radii: Vec<f64>,
    pub diffusion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationSettings {
    pub dt_us: f64,
    pub t_end: f64,
    pub release_mode: ReleaseMode,
    pub reflection_mode: ReflectionMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSettings {
    /// Use `1/sqrt(2πDt)` in both brackets instead of the printed `1/sqrt(Dt)` in U.
    pub consistent_prefactor: bool,
    pub erfc: ErfcKernel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PsoSettings {
    pub cognitive: f64,
    pub social: f64,
    pub inertia: f64,
    pub iterations: usize,
    pub swarm_size: usize,
    pub refine_starts: usize,
    pub refine_evaluations: usize,
    /// Number of curve samples the loss is evaluated on.
    pub fit_samples: usize,
    pub beta_bounds: [f64; 2],
    pub b1_bounds: [f64; 2],
    pub b2_bounds: [f64; 2],
    pub b3_bounds: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationMode {
    /// β from the reference cell, b1..b3 averaged over the grid.
    GridAverage,
    /// All four parameters from the reference cell.
    ReferenceFit,
    /// Parameters taken from `fixed`.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationSettings {
    pub mode: CalibrationMode,
    pub reference_distance: f64,
    pub reference_rx_radius: f64,
    /// `[beta, b1, b2, b3]` for `mode = "fixed"`.
    pub fixed: Option<[f64; 4]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimationSettings {
    pub m_values: Vec<usize>,
    pub trials: usize,
    pub t1: f64,
    pub t_end: f64,
    pub distance_range: [f64; 2],
    pub diffusion_range: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Table4Settings {
    pub distances: Vec<f64>,
    pub diffusions: Vec<f64>,
    pub rx_radius: f64,
    /// Bins of equal width over `(0, t_end]`.
    pub bins: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImpulseSettings {
    pub distance: f64,
    pub rx_radius: f64,
    pub bins: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out_dir: PathBuf::from("out"),
            channel: ChannelSettings::default(),
            grid: GridSettings::default(),
            simulation: SimulationSettings::default(),
            model: ModelSettings::default(),
            pso: PsoSettings::default(),
            calibration: CalibrationSettings::default(),
            estimation: EstimationSettings::default(),
            table4: Table4Settings::default(),
            impulse: ImpulseSettings::default(),
        }
    }
}

impl Default for ChannelSettings {
    fn default() -> Self {
        Self {
            distance: 6.0,
            rx_radius: 5.0,
            tx_radius: 5.0,
            diffusion: 100.0,
            molecules: SimulationConfig::DEFAULT_MOLECULES,
        }
    }
}

impl Default for GridSettings {
    fn default() -> Self {
        Self {
            distances: vec![2.0, 4.0, 6.0, 8.0, 10.0],
            rx_radii: vec![5.0, 7.5, 10.0],
            diffusion: 100.0,
        }
    }
}

impl Default for SimulationSettings {
    fn default() -> Self {
        Self {
            dt_us: SimulationConfig::DEFAULT_DT_US,
            t_end: SimulationConfig::DEFAULT_T_END,
            release_mode: ReleaseMode::default(),
            reflection_mode: ReflectionMode::default(),
        }
    }
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            consistent_prefactor: true,
            erfc: ErfcKernel::Approx,
        }
    }
}

impl Default for PsoSettings {
    fn default() -> Self {
        let c = PsoConfig::default();
        let b = Bounds::default();
        Self {
            cognitive: c.cognitive,
            social: c.social,
            inertia: c.inertia,
            iterations: c.iterations,
            swarm_size: c.swarm_size,
            refine_starts: c.refine_starts,
            refine_evaluations: c.refine_evaluations,
            fit_samples: 200,
            beta_bounds: [b.lo[0], b.hi[0]],
            b1_bounds: [b.lo[1], b.hi[1]],
            b2_bounds: [b.lo[2], b.hi[2]],
            b3_bounds: [b.lo[3], b.hi[3]],
        }
    }
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        Self {
            mode: CalibrationMode::GridAverage,
            reference_distance: 6.0,
            reference_rx_radius: 5.0,
            fixed: None,
        }
    }
}

impl Default for EstimationSettings {
    fn default() -> Self {
        Self {
            m_values: vec![5, 10, 15, 20, 30],
            trials: 1000,
            t1: 0.02,
            t_end: 1.0,
            distance_range: [1.0, 12.0],
            diffusion_range: [25.0, 150.0],
        }
    }
}

impl Default for Table4Settings {
    fn default() -> Self {
        Self {
            distances: vec![2.0, 4.0, 6.0, 8.0, 10.0],
            diffusions: vec![5.0, 7.5, 10.0],
            rx_radius: 5.0,
            bins: 1000,
        }
    }
}

impl Default for ImpulseSettings {
    fn default() -> Self {
        Self {
            distance: 2.0,
            rx_radius: 5.0,
            bins: 100,
        }
    }
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub distance: Option<f64>,
    pub rx_radius: Option<f64>,
    pub diffusion: Option<f64>,
    pub m: Option<usize>,
}

fn cfg_err(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let c: Self = toml::from_str(text).map_err(|e| cfg_err(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| cfg_err(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form of the effective configuration.
    /// The output directory is left out so relocated reruns hash the same.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<(), HarnessError> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(p) = &o.out {
            self.out_dir = p.clone();
        }
        if let Some(d) = o.distance {
            self.channel.distance = d;
            self.grid.distances = vec![d];
            self.table4.distances = vec![d];
            self.impulse.distance = d;
        }
        if let Some(r) = o.rx_radius {
            self.channel.rx_radius = r;
            self.grid.rx_radii = vec![r];
            self.table4.rx_radius = r;
            self.impulse.rx_radius = r;
        }
        if let Some(dc) = o.diffusion {
            self.channel.diffusion = dc;
            self.grid.diffusion = dc;
            self.table4.diffusions = vec![dc];
        }
        if let Some(m) = o.m {
            self.estimation.m_values = vec![m];
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(cfg_err(format!("{name} must be positive, got {v}")))
            }
        };
        let c = &self.channel;
        self.geometry(c.distance, c.rx_radius, c.diffusion)?;
        if self.grid.distances.is_empty() || self.grid.rx_radii.is_empty() {
            return Err(cfg_err("grid needs at least one distance and one radius"));
        }
        for &d in &self.grid.distances {
            for &r in &self.grid.rx_radii {
                self.geometry(d, r, self.grid.diffusion)?;
            }
        }
        self.simulation_config(self.channel_geometry()?, 0)
            .validate()
            .map_err(|e| cfg_err(e.to_string()))?;
        self.pso_config(0).validate().map_err(|e| cfg_err(e.to_string()))?;
        if self.pso.fit_samples == 0 {
            return Err(cfg_err("pso.fit_samples must be at least 1"));
        }
        let cal = &self.calibration;
        self.geometry(cal.reference_distance, cal.reference_rx_radius, self.grid.diffusion)?;
        match (cal.mode, cal.fixed) {
            (CalibrationMode::Fixed, None) => {
                return Err(cfg_err("calibration.mode = \"fixed\" needs calibration.fixed"))
            }
            (_, Some(p)) => {
                CorrectionParams::from_array(p)
                    .validate()
                    .map_err(|e| cfg_err(e.to_string()))?;
            }
            _ => {}
        }
        let e = &self.estimation;
        if e.m_values.is_empty() || e.m_values.iter().any(|&m| m < 2) {
            return Err(cfg_err("estimation.m_values must be non-empty with every M >= 2"));
        }
        if e.trials == 0 {
            return Err(cfg_err("estimation.trials must be at least 1"));
        }
        positive("estimation.t1", e.t1)?;
        if !(e.t_end > e.t1) {
            return Err(cfg_err("estimation.t_end must exceed t1"));
        }
        self.distance_range()?;
        self.diffusion_range()?;
        let t4 = &self.table4;
        if t4.distances.is_empty() || t4.diffusions.is_empty() || t4.bins < 2 {
            return Err(cfg_err("table4 needs distances, diffusions and at least 2 bins"));
        }
        for &d in &t4.distances {
            for &dc in &t4.diffusions {
                self.geometry(d, t4.rx_radius, dc)?;
            }
        }
        if self.impulse.bins < 2 {
            return Err(cfg_err("impulse.bins must be at least 2"));
        }
        self.geometry(self.impulse.distance, self.impulse.rx_radius, c.diffusion)?;
        Ok(())
    }

    pub fn geometry(&self, d: f64, r: f64, diffusion: f64) -> Result<ChannelGeometry, HarnessError> {
        ChannelGeometry::new(d, r, self.channel.tx_radius, diffusion, self.channel.molecules)
            .map_err(|e| cfg_err(e.to_string()))
    }

    pub fn channel_geometry(&self) -> Result<ChannelGeometry, HarnessError> {
        let c = &self.channel;
        self.geometry(c.distance, c.rx_radius, c.diffusion)
    }

    pub fn model_options(&self) -> ModelOptions {
        ModelOptions {
            prefactor: if self.model.consistent_prefactor {
                Prefactor::Consistent
            } else {
                Prefactor::AsPrinted
            },
            erfc: self.model.erfc,
        }
    }

    pub fn simulation_config(&self, geom: ChannelGeometry, seed: u64) -> SimulationConfig {
        SimulationConfig {
            geom,
            dt_us: self.simulation.dt_us,
            t_end: self.simulation.t_end,
            seed,
            release_mode: self.simulation.release_mode,
            reflection_mode: self.simulation.reflection_mode,
        }
    }

    pub fn pso_config(&self, seed: u64) -> PsoConfig {
        let p = &self.pso;
        let pairs = [p.beta_bounds, p.b1_bounds, p.b2_bounds, p.b3_bounds];
        PsoConfig {
            cognitive: p.cognitive,
            social: p.social,
            inertia: p.inertia,
            iterations: p.iterations,
            swarm_size: p.swarm_size,
            bounds: Bounds {
                lo: pairs.map(|b| b[0]),
                hi: pairs.map(|b| b[1]),
            },
            seed,
            refine_starts: p.refine_starts,
            refine_evaluations: p.refine_evaluations,
            model: self.model_options(),
        }
    }

    pub fn distance_range(&self) -> Result<Range, HarnessError> {
        let [lo, hi] = self.estimation.distance_range;
        Range::new(lo, hi).map_err(|e| cfg_err(format!("estimation.distance_range: {e}")))
    }

    pub fn diffusion_range(&self) -> Result<Range, HarnessError> {
        let [lo, hi] = self.estimation.diffusion_range;
        Range::new(lo, hi).map_err(|e| cfg_err(format!("estimation.diffusion_range: {e}")))
    }
}

/// Upper β bound used when a config omits it.
pub const BETA_MAX: f64 = PI;
