//! Exogenous demand generation and scenario files.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::Variant;
use crate::estimator::LinkNoise;
use crate::network::{BlockingConvention, TrafficNetwork};
use crate::simulator::{SensorConfig, SimParams};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("demand profile covers {covered} s but the horizon is {horizon} s")]
    ProfileTooShort { covered: f64, horizon: f64 },
    #[error("scenario does not match the network: {0}")]
    NetworkMismatch(String),
    #[error("cannot parse scenario: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

fn invalid(msg: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid(msg.into())
}

/// Per-link exogenous demand sampled at every simulation tick.
#[derive(Debug, Clone, PartialEq)]
pub struct DemandProfile {
    /// `e[k]` is the demand (veh/s) held over tick `k`, for `k = 0..=N`.
    pub e: Vec<DVector<f64>>,
    pub e_hist: DVector<f64>,
    pub horizon: f64,
    pub tick: f64,
    pub seed: u64,
}

impl DemandProfile {
    /// Demand equal to the historic demand at every tick.
    pub fn constant(e_hist: &DVector<f64>, horizon: f64, tick: f64) -> Result<Self, ScenarioError> {
        let n = tick_count(horizon, tick)?;
        Ok(Self {
            e: vec![e_hist.clone(); n + 1],
            e_hist: e_hist.clone(),
            horizon,
            tick,
            seed: 0,
        })
    }

    pub fn ticks(&self) -> usize {
        self.e.len() - 1
    }

    pub fn links(&self) -> usize {
        self.e_hist.len()
    }

    pub fn at_tick(&self, k: usize) -> &DVector<f64> {
        &self.e[k.min(self.e.len() - 1)]
    }
}

/// Number of ticks `N = horizon / tick`, which must be integral.
pub fn tick_count(horizon: f64, tick: f64) -> Result<usize, ScenarioError> {
    if !(horizon > 0.0 && tick > 0.0 && horizon.is_finite()) {
        return Err(invalid(format!("horizon {horizon} s and tick {tick} s must be positive")));
    }
    let ratio = horizon / tick;
    if (ratio - ratio.round()).abs() > 1e-9 * ratio.max(1.0) {
        return Err(invalid(format!("horizon {horizon} s is not a multiple of the tick {tick} s")));
    }
    Ok(ratio.round() as usize)
}

fn historic(e_hist: &[f64]) -> Result<DVector<f64>, ScenarioError> {
    if let Some(v) = e_hist.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
        return Err(invalid(format!("historic demand must be non-negative, got {v}")));
    }
    Ok(DVector::from_column_slice(e_hist))
}

fn link_rng(seed: u64, z: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(z as u64 + 1);
    rng
}

fn check_range(name: &str, range: [f64; 2]) -> Result<(), ScenarioError> {
    if !(range[0] >= 0.0 && range[1] >= range[0] && range[1].is_finite()) {
        return Err(invalid(format!("{name} range [{}, {}] must satisfy 0 <= low <= high", range[0], range[1])));
    }
    Ok(())
}

fn check_links(links: &[usize], count: usize) -> Result<(), ScenarioError> {
    match links.iter().find(|&&z| z == 0 || z > count) {
        Some(z) => Err(invalid(format!("pulse link {z} outside 1..={count}"))),
        None => Ok(()),
    }
}

/// Additional demand on a set of links over `[start_s, end_s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PulseSpec {
    pub links: Vec<usize>,
    pub start_s: f64,
    pub end_s: f64,
    /// Added demand (veh/s); the peak value for smooth pulses.
    pub amplitude: f64,
}

impl PulseSpec {
    fn validate(&self, links: usize) -> Result<(), ScenarioError> {
        check_links(&self.links, links)?;
        if !(self.start_s >= 0.0 && self.end_s > self.start_s && self.amplitude.is_finite()) {
            return Err(invalid(format!(
                "pulse window [{}, {}] must be non-empty and start at or after 0",
                self.start_s, self.end_s
            )));
        }
        Ok(())
    }

    fn rectangular(&self, t: f64) -> f64 {
        if t >= self.start_s && t < self.end_s {
            self.amplitude
        } else {
            0.0
        }
    }

    /// Raised-cosine window peaking at the middle of the pulse.
    fn raised_cosine(&self, t: f64) -> f64 {
        if t <= self.start_s || t >= self.end_s {
            return 0.0;
        }
        let phase = (t - self.start_s) / (self.end_s - self.start_s);
        self.amplitude * 0.5 * (1.0 - (2.0 * PI * phase).cos())
    }
}

/// Sinusoidal variation around the historic demand with optional pulses and
/// an end-of-horizon taper.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDemand {
    /// Historic demand per link (veh/s).
    pub e_hist: Vec<f64>,
    /// Amplitude range as fractions of the historic demand.
    #[serde(default = "default_amplitude")]
    pub amplitude_frac: [f64; 2],
    #[serde(default = "default_period")]
    pub period_s: [f64; 2],
    #[serde(default)]
    pub pulses: Vec<PulseSpec>,
    /// Length of the final window over which demand falls linearly to zero.
    #[serde(default)]
    pub taper_s: f64,
}

fn default_amplitude() -> [f64; 2] {
    [0.25, 0.5]
}

fn default_period() -> [f64; 2] {
    [1800.0, 7200.0]
}

impl Default for SyntheticDemand {
    fn default() -> Self {
        Self {
            e_hist: Vec::new(),
            amplitude_frac: default_amplitude(),
            period_s: default_period(),
            pulses: Vec::new(),
            taper_s: 0.0,
        }
    }
}

fn taper(t: f64, horizon: f64, window: f64) -> f64 {
    if window <= 0.0 || t <= horizon - window {
        1.0
    } else {
        ((horizon - t) / window).clamp(0.0, 1.0)
    }
}

/// Sinusoid parameters `(amplitude, phase, period)` drawn for one link.
fn draw_sinusoid(rng: &mut ChaCha8Rng, e_hist: f64, spec: &SyntheticDemand) -> (f64, f64, f64) {
    let [a_lo, a_hi] = spec.amplitude_frac;
    let [p_lo, p_hi] = spec.period_s;
    let amplitude = e_hist * (a_lo + (a_hi - a_lo) * rng.random::<f64>());
    let phase = 2.0 * PI * rng.random::<f64>();
    let period = p_lo + (p_hi - p_lo) * rng.random::<f64>();
    (amplitude, phase, period)
}

pub fn synthetic_demand(
    spec: &SyntheticDemand,
    horizon: f64,
    tick: f64,
    seed: u64,
) -> Result<DemandProfile, ScenarioError> {
    check_range("amplitude", spec.amplitude_frac)?;
    check_range("period", spec.period_s)?;
    if spec.period_s[0] <= 0.0 {
        return Err(invalid("sinusoid periods must be positive"));
    }
    if !(spec.taper_s >= 0.0 && spec.taper_s <= horizon) {
        return Err(invalid(format!("taper window {} s outside [0, horizon]", spec.taper_s)));
    }
    let e_hist = historic(&spec.e_hist)?;
    let z_count = e_hist.len();
    for p in &spec.pulses {
        p.validate(z_count)?;
    }
    let n = tick_count(horizon, tick)?;
    let params: Vec<_> = (0..z_count)
        .map(|z| draw_sinusoid(&mut link_rng(seed, z), e_hist[z], spec))
        .collect();
    let e = (0..=n)
        .map(|k| {
            let t = k as f64 * tick;
            DVector::from_fn(z_count, |z, _| {
                let (amplitude, phase, period) = params[z];
                let mut v = e_hist[z] + amplitude * (2.0 * PI * t / period + phase).sin();
                for p in spec.pulses.iter().filter(|p| p.links.contains(&(z + 1))) {
                    v += p.rectangular(t);
                }
                v * taper(t, horizon, spec.taper_s)
            })
        })
        .collect();
    Ok(DemandProfile {
        e,
        e_hist: e_hist.clone(),
        horizon,
        tick,
        seed,
    })
}

/// Base daily profile as a shape multiplying the historic demand, perturbed
/// multiplicatively and with smooth pulses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileDemand {
    /// Historic demand per link (veh/s).
    pub e_hist: Vec<f64>,
    /// Sample times (s, increasing, starting at 0) of the shape.
    pub times_s: Vec<f64>,
    /// Shape values; demand on link `z` is `e_hist_z * shape(t)`.
    pub shape: Vec<f64>,
    /// Bound on the multiplicative deviation.
    #[serde(default)]
    pub delta_max: f64,
    /// Spacing of the random deviation knots.
    #[serde(default = "default_knot_spacing")]
    pub knot_spacing_s: f64,
    #[serde(default)]
    pub pulses: Vec<PulseSpec>,
}

fn default_knot_spacing() -> f64 {
    600.0
}

fn interpolate(times: &[f64], values: &[f64], t: f64) -> f64 {
    let i = times.partition_point(|&s| s <= t);
    if i == 0 {
        return values[0];
    }
    if i == times.len() {
        return values[times.len() - 1];
    }
    let (t0, t1) = (times[i - 1], times[i]);
    let w = (t - t0) / (t1 - t0);
    values[i - 1] * (1.0 - w) + values[i] * w
}

pub fn profile_demand(
    spec: &ProfileDemand,
    horizon: f64,
    tick: f64,
    seed: u64,
) -> Result<DemandProfile, ScenarioError> {
    if spec.times_s.is_empty() || spec.times_s.len() != spec.shape.len() {
        return Err(invalid("profile needs matching, non-empty times_s and shape"));
    }
    if spec.times_s[0] != 0.0 || spec.times_s.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(invalid("profile times must start at 0 and increase strictly"));
    }
    let covered = *spec.times_s.last().expect("non-empty");
    if covered < horizon {
        return Err(ScenarioError::ProfileTooShort { covered, horizon });
    }
    if !(spec.delta_max >= 0.0 && spec.delta_max < 1.0) {
        return Err(invalid(format!("delta_max {} outside [0, 1)", spec.delta_max)));
    }
    if !(spec.knot_spacing_s > 0.0) {
        return Err(invalid("knot spacing must be positive"));
    }
    let e_hist = historic(&spec.e_hist)?;
    let z_count = e_hist.len();
    for p in &spec.pulses {
        p.validate(z_count)?;
    }
    let n = tick_count(horizon, tick)?;
    let knots = (horizon / spec.knot_spacing_s).ceil() as usize + 1;
    let knot_times: Vec<f64> = (0..knots).map(|i| i as f64 * spec.knot_spacing_s).collect();
    let deviations: Vec<Vec<f64>> = (0..z_count)
        .map(|z| {
            let mut rng = link_rng(seed, z);
            (0..knots)
                .map(|_| spec.delta_max * (2.0 * rng.random::<f64>() - 1.0))
                .collect()
        })
        .collect();
    let e = (0..=n)
        .map(|k| {
            let t = k as f64 * tick;
            let shape = interpolate(&spec.times_s, &spec.shape, t);
            DVector::from_fn(z_count, |z, _| {
                let delta = interpolate(&knot_times, &deviations[z], t);
                let mut v = e_hist[z] * shape * (1.0 + delta);
                for p in spec.pulses.iter().filter(|p| p.links.contains(&(z + 1))) {
                    v += p.raised_cosine(t);
                }
                v
            })
        })
        .collect();
    Ok(DemandProfile {
        e,
        e_hist: e_hist.clone(),
        horizon,
        tick,
        seed,
    })
}

/// Demand held at the historic value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistoricDemand {
    pub e_hist: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum DemandSpec {
    Synthetic(SyntheticDemand),
    Profile(ProfileDemand),
    Historic(HistoricDemand),
}

impl DemandSpec {
    pub fn e_hist(&self) -> &[f64] {
        match self {
            DemandSpec::Synthetic(s) => &s.e_hist,
            DemandSpec::Profile(p) => &p.e_hist,
            DemandSpec::Historic(h) => &h.e_hist,
        }
    }

    pub fn generate(&self, horizon: f64, tick: f64, seed: u64) -> Result<DemandProfile, ScenarioError> {
        match self {
            DemandSpec::Synthetic(spec) => synthetic_demand(spec, horizon, tick, seed),
            DemandSpec::Profile(spec) => profile_demand(spec, horizon, tick, seed),
            DemandSpec::Historic(h) => DemandProfile::constant(&historic(&h.e_hist)?, horizon, tick),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorSettings {
    #[serde(default = "default_estimation_period")]
    pub period_s: f64,
    /// Explicit per-link covariances; the default tuning rule when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<Vec<LinkNoise>>,
}

fn default_estimation_period() -> f64 {
    20.0
}

impl Default for EstimatorSettings {
    fn default() -> Self {
        Self {
            period_s: default_estimation_period(),
            noise: None,
        }
    }
}

/// Default covariances: `R = (0.05 x_max / 4)^2`, `Qx = (S E / 10)^2`,
/// `Qe = (S E / 1000)^2`.
pub fn default_noise(net: &TrafficNetwork, period: f64) -> Vec<LinkNoise> {
    (0..net.links())
        .map(|z| {
            let s = net.sat_flow()[z];
            LinkNoise {
                qx: (s * period / 10.0).powi(2),
                qe: (s * period / 1e3).powi(2),
                r: (0.05 * net.x_max()[z] / 4.0).powi(2),
            }
        })
        .collect()
}

impl EstimatorSettings {
    pub fn noise_for(&self, net: &TrafficNetwork) -> Result<Vec<LinkNoise>, ScenarioError> {
        match &self.noise {
            Some(n) if n.len() != net.links() => Err(ScenarioError::NetworkMismatch(format!(
                "{} estimator noise entries for {} links",
                n.len(),
                net.links()
            ))),
            Some(n) => Ok(n.clone()),
            None => Ok(default_noise(net, self.period_s)),
        }
    }
}

pub const DEFAULT_R_WEIGHT: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSettings {
    #[serde(default = "default_variant")]
    pub variant: Variant,
    #[serde(default = "default_r_weight")]
    pub r_weight: f64,
}

fn default_variant() -> Variant {
    Variant::TucFf
}

fn default_r_weight() -> f64 {
    DEFAULT_R_WEIGHT
}

impl Default for ControllerSettings {
    fn default() -> Self {
        Self {
            variant: default_variant(),
            r_weight: default_r_weight(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSettings {
    #[serde(default = "default_tick")]
    pub tick_s: f64,
    #[serde(default = "default_c_ug")]
    pub c_ug: f64,
    #[serde(default)]
    pub blocking: BlockingConvention,
    /// Initial occupancies; empty links when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_x: Option<Vec<f64>>,
}

fn default_tick() -> f64 {
    SimParams::default().tick
}

fn default_c_ug() -> f64 {
    SimParams::default().c_ug
}

impl Default for SimulationSettings {
    fn default() -> Self {
        Self {
            tick_s: default_tick(),
            c_ug: default_c_ug(),
            blocking: BlockingConvention::default(),
            initial_x: None,
        }
    }
}

impl SimulationSettings {
    pub fn params(&self) -> SimParams {
        SimParams {
            tick: self.tick_s,
            c_ug: self.c_ug,
            blocking: self.blocking,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    #[serde(default = "default_demand_seed")]
    pub demand: u64,
    #[serde(default = "default_sensor_seed")]
    pub sensor: u64,
}

fn default_demand_seed() -> u64 {
    1
}

fn default_sensor_seed() -> u64 {
    2
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            demand: default_demand_seed(),
            sensor: default_sensor_seed(),
        }
    }
}

/// Complete description of one experiment apart from the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub horizon_s: f64,
    pub demand: DemandSpec,
    #[serde(default)]
    pub sensor: SensorConfig,
    #[serde(default)]
    pub estimator: EstimatorSettings,
    #[serde(default)]
    pub controller: ControllerSettings,
    #[serde(default)]
    pub simulation: SimulationSettings,
    #[serde(default)]
    pub seeds: Seeds,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let scenario: Scenario = serde_json::from_str(text)?;
        scenario.validate()?;
        Ok(scenario)
    }

    /// Canonical form: pretty JSON with every default spelled out.
    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("scenario serializes");
        text.push('\n');
        text
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ScenarioError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Checks that do not need the network.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        tick_count(self.horizon_s, self.simulation.tick_s)?;
        self.sensor.validate().map_err(|e| invalid(e.to_string()))?;
        self.simulation.params().validate().map_err(|e| invalid(e.to_string()))?;
        if !(self.estimator.period_s > 0.0) {
            return Err(invalid("estimation period must be positive"));
        }
        if !(self.controller.r_weight > 0.0 && self.controller.r_weight.is_finite()) {
            return Err(invalid(format!("r_weight must be positive, got {}", self.controller.r_weight)));
        }
        Ok(())
    }

    /// Checks that the per-link data matches `net`.
    pub fn check_network(&self, net: &TrafficNetwork) -> Result<(), ScenarioError> {
        let z = net.links();
        if self.demand.e_hist().len() != z {
            return Err(ScenarioError::NetworkMismatch(format!(
                "{} historic demands for {} links",
                self.demand.e_hist().len(),
                z
            )));
        }
        if let Some(x0) = &self.simulation.initial_x {
            if x0.len() != z {
                return Err(ScenarioError::NetworkMismatch(format!(
                    "{} initial occupancies for {z} links",
                    x0.len()
                )));
            }
            if let Some(i) = (0..z).find(|&i| !(x0[i] >= 0.0 && x0[i] <= net.x_max()[i])) {
                return Err(ScenarioError::NetworkMismatch(format!(
                    "initial occupancy of link {} outside [0, x_max]",
                    i + 1
                )));
            }
        }
        self.estimator.noise_for(net)?;
        Ok(())
    }

    pub fn e_hist(&self) -> DVector<f64> {
        DVector::from_column_slice(self.demand.e_hist())
    }

    pub fn demand_profile(&self) -> Result<DemandProfile, ScenarioError> {
        self.demand
            .generate(self.horizon_s, self.simulation.tick_s, self.seeds.demand)
    }

    pub fn initial_x(&self, links: usize) -> DVector<f64> {
        match &self.simulation.initial_x {
            Some(x) => DVector::from_vec(x.clone()),
            None => DVector::zeros(links),
        }
    }
}
