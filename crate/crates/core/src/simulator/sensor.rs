//! Loop-detector occupancy measurements with occupancy-proportional white
//! and band-limited noise.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SensorError {
    #[error("invalid sensor configuration: {0}")]
    Invalid(String),
}

/// `y = x + white_coef * x * psi + colored_coef * x * phi`, where `psi` is
/// unit white noise and `phi` unit-variance noise limited to the band
/// `[band_cycles[0] / C, band_cycles[1] / C]` Hz.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorConfig {
    pub white_coef: f64,
    pub colored_coef: f64,
    pub band_cycles: [f64; 2],
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            white_coef: 0.05,
            colored_coef: 0.4,
            band_cycles: [1.0, 2.0],
        }
    }
}

impl SensorConfig {
    pub fn noiseless() -> Self {
        Self {
            white_coef: 0.0,
            colored_coef: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SensorError> {
        if !(self.white_coef >= 0.0 && self.colored_coef >= 0.0) {
            return Err(SensorError::Invalid(
                "noise coefficients must be non-negative".into(),
            ));
        }
        let [lo, hi] = self.band_cycles;
        if !(lo > 0.0 && hi > lo) {
            return Err(SensorError::Invalid(format!(
                "band [{lo}, {hi}] must satisfy 0 < low < high"
            )));
        }
        Ok(())
    }
}

/// Measurement from the ground-truth occupancy and the two noise samples.
pub fn simulate_sensor(x: f64, psi: f64, phi: f64, cfg: &SensorConfig) -> f64 {
    x + cfg.white_coef * x * psi + cfg.colored_coef * x * phi
}

/// Second-order band-pass IIR (bilinear transform, unit peak gain) driven by
/// white Gaussian noise and scaled to unit stationary variance.
#[derive(Debug, Clone)]
pub struct BandPassNoise {
    b0: f64,
    b2: f64,
    a1: f64,
    a2: f64,
    x1: f64,
    x2: f64,
    y1: f64,
    y2: f64,
    scale: f64,
}

impl BandPassNoise {
    /// Band `[low_hz, high_hz]` sampled every `period` seconds.
    pub fn new(low_hz: f64, high_hz: f64, period: f64) -> Result<Self, SensorError> {
        let nyquist = 0.5 / period;
        if !(low_hz > 0.0 && high_hz > low_hz && high_hz < nyquist) {
            return Err(SensorError::Invalid(format!(
                "band [{low_hz}, {high_hz}] Hz must lie below the Nyquist frequency {nyquist} Hz"
            )));
        }
        let center = (low_hz * high_hz).sqrt();
        let w0 = 2.0 * std::f64::consts::PI * center * period;
        let octaves = (high_hz / low_hz).log2();
        let alpha = w0.sin() * (std::f64::consts::LN_2 / 2.0 * octaves * w0 / w0.sin()).sinh();
        let a0 = 1.0 + alpha;
        let mut filter = Self {
            b0: alpha / a0,
            b2: -alpha / a0,
            a1: -2.0 * w0.cos() / a0,
            a2: (1.0 - alpha) / a0,
            x1: 0.0,
            x2: 0.0,
            y1: 0.0,
            y2: 0.0,
            scale: 1.0,
        };
        filter.scale = 1.0 / filter.impulse_energy().sqrt();
        Ok(filter)
    }

    /// Sum of the squared impulse response, i.e. the output variance for
    /// unit-variance white input.
    fn impulse_energy(&self) -> f64 {
        let mut probe = self.clone();
        probe.reset();
        let mut energy = 0.0;
        let mut input = 1.0;
        for n in 0..1_000_000 {
            let y = probe.filter(input);
            input = 0.0;
            energy += y * y;
            if n > 64 && probe.y1.abs() < 1e-18 && probe.y2.abs() < 1e-18 {
                break;
            }
        }
        energy
    }

    fn reset(&mut self) {
        self.x1 = 0.0;
        self.x2 = 0.0;
        self.y1 = 0.0;
        self.y2 = 0.0;
    }

    fn filter(&mut self, input: f64) -> f64 {
        let y = self.b0 * input + self.b2 * self.x2 - self.a1 * self.y1 - self.a2 * self.y2;
        self.x2 = self.x1;
        self.x1 = input;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }

    /// Next unit-variance sample for white input `w`.
    pub fn next(&mut self, w: f64) -> f64 {
        self.scale * self.filter(w)
    }
}

/// One noisy detector per link, each with its own random stream.
#[derive(Debug, Clone)]
pub struct SensorArray {
    cfg: SensorConfig,
    rngs: Vec<ChaCha8Rng>,
    filters: Vec<BandPassNoise>,
}

impl SensorArray {
    /// Sensors sampled every `period` seconds on a network with cycle `cycle`.
    pub fn new(cfg: &SensorConfig, links: usize, period: f64, cycle: f64, seed: u64) -> Result<Self, SensorError> {
        cfg.validate()?;
        let filter = BandPassNoise::new(cfg.band_cycles[0] / cycle, cfg.band_cycles[1] / cycle, period)?;
        let rngs = (0..links)
            .map(|z| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(z as u64 + 1);
                rng
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            rngs,
            filters: vec![filter; links],
        })
    }

    /// Draws one measurement per link.
    pub fn measure(&mut self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(x.len(), |z, _| {
            let rng = &mut self.rngs[z];
            let psi: f64 = rng.sample(StandardNormal);
            let w: f64 = rng.sample(StandardNormal);
            let phi = self.filters[z].next(w);
            simulate_sensor(x[z], psi, phi, &self.cfg)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_sensor_is_exact() {
        let mut s = SensorArray::new(&SensorConfig::noiseless(), 3, 20.0, 100.0, 1).unwrap();
        let x = DVector::from_vec(vec![0.0, 12.5, 40.0]);
        for _ in 0..10 {
            assert_eq!(s.measure(&x), x);
        }
    }

    #[test]
    fn empty_link_reads_zero() {
        let mut s = SensorArray::new(&SensorConfig::default(), 2, 20.0, 100.0, 9).unwrap();
        for _ in 0..50 {
            assert_eq!(s.measure(&DVector::zeros(2)), DVector::zeros(2));
        }
    }

    #[test]
    fn relative_noise_variance() {
        let cfg = SensorConfig::default();
        let mut s = SensorArray::new(&cfg, 1, 20.0, 100.0, 42).unwrap();
        let x = DVector::from_vec(vec![50.0]);
        let n = 100_000;
        let samples: Vec<f64> = (0..n).map(|_| (s.measure(&x)[0] - 50.0) / 50.0).collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let expected = cfg.white_coef.powi(2) + cfg.colored_coef.powi(2);
        assert!((var / expected - 1.0).abs() < 0.05, "variance {var} vs {expected}");
    }

    /// Averaged periodogram value of `xs` at frequency `f` (cycles/sample).
    fn power_at(xs: &[f64], f: f64, segment: usize) -> f64 {
        let w = 2.0 * std::f64::consts::PI * f;
        let segments = xs.len() / segment;
        (0..segments)
            .map(|s| {
                let chunk = &xs[s * segment..(s + 1) * segment];
                let (re, im) = chunk.iter().enumerate().fold((0.0, 0.0), |(re, im), (n, v)| {
                    (re + v * (w * n as f64).cos(), im - v * (w * n as f64).sin())
                });
                (re * re + im * im) / segment as f64
            })
            .sum::<f64>()
            / segments as f64
    }

    #[test]
    fn colored_noise_is_band_limited() {
        let period = 20.0;
        let mut f = BandPassNoise::new(0.01, 0.02, period).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs: Vec<f64> = (0..50_000).map(|_| f.next(rng.sample(StandardNormal))).collect();
        let var = xs.iter().map(|v| v * v).sum::<f64>() / xs.len() as f64;
        assert!((var - 1.0).abs() < 0.05, "variance {var}");
        let in_band = power_at(&xs, 0.014 * period, 500);
        let low = power_at(&xs, 0.001 * period, 500);
        let high = power_at(&xs, 0.0245 * period, 500);
        assert!(in_band > 10.0 * low && in_band > 10.0 * high, "{low} {in_band} {high}");
    }

    #[test]
    fn same_seed_same_measurements() {
        let x = DVector::from_vec(vec![10.0, 20.0]);
        let mut a = SensorArray::new(&SensorConfig::default(), 2, 20.0, 100.0, 5).unwrap();
        let mut b = SensorArray::new(&SensorConfig::default(), 2, 20.0, 100.0, 5).unwrap();
        for _ in 0..100 {
            assert_eq!(a.measure(&x), b.measure(&x));
        }
    }

    #[test]
    fn band_above_nyquist_rejected() {
        assert!(BandPassNoise::new(0.01, 0.03, 20.0).is_err());
        assert!(SensorConfig {
            white_coef: -1.0,
            ..SensorConfig::default()
        }
        .validate()
        .is_err());
    }
}
