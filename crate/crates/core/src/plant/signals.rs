use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Independent seed for sub-stream `stream` of a master seed (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Multilevel pseudorandom excitation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MprbsConfig {
    pub levels: usize,
    pub lo: f64,
    pub hi: f64,
    /// Minimum number of steps a level is held.
    pub hold: usize,
    pub seed: u64,
}

impl MprbsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::Config(format!("MPRBS needs at least 2 levels, got {}", self.levels)));
        }
        if !(self.hi > self.lo) || !self.lo.is_finite() || !self.hi.is_finite() {
            return Err(Error::Config(format!("MPRBS range [{}, {}] is empty", self.lo, self.hi)));
        }
        if self.hold == 0 {
            return Err(Error::Config("MPRBS hold must be at least 1 step".into()));
        }
        Ok(())
    }

    pub fn level_values(&self) -> Vec<f64> {
        let step = (self.hi - self.lo) / (self.levels - 1) as f64;
        (0..self.levels)
            .map(|i| if i + 1 == self.levels { self.hi } else { self.lo + step * i as f64 })
            .collect()
    }
}

/// A new level is drawn every `hold` steps; a trailing partial block keeps
/// the previous level so no segment is shorter than `hold`.
pub fn generate_mprbs(config: &MprbsConfig, length: usize) -> Result<Vec<f64>> {
    config.validate()?;
    if length < config.hold {
        return Err(Error::Config(format!(
            "MPRBS length {length} is shorter than the hold time {}",
            config.hold
        )));
    }
    let values = config.level_values();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut out = Vec::with_capacity(length);
    let mut level = values[0];
    while out.len() < length {
        if length - out.len() >= config.hold {
            level = values[rng.random_range(0..values.len())];
        }
        let n = config.hold.min(length - out.len());
        out.extend(std::iter::repeat_n(level, n));
    }
    Ok(out)
}

/// Operating regime of the network: light (summer-like) or heavy
/// (winter-like) demand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Low,
    High,
}

impl Regime {
    /// Total demand envelope across all loads, W.
    pub fn band(self) -> (f64, f64) {
        match self {
            Regime::Low => (100e3, 300e3),
            Regime::High => (150e3, 350e3),
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Regime::Low => "low",
            Regime::High => "high",
        }
    }

    pub fn index(self) -> usize {
        match self {
            Regime::Low => 0,
            Regime::High => 1,
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "low" | "1" => Ok(Regime::Low),
            "high" | "2" => Ok(Regime::High),
            other => Err(Error::Config(format!("unknown regime `{other}`"))),
        }
    }
}

fn bump(hour: f64, center: f64, width: f64) -> f64 {
    // periodic distance on the 24 h clock
    let mut d = (hour - center).rem_euclid(24.0);
    if d > 12.0 {
        d -= 24.0;
    }
    (-0.5 * (d / width).powi(2)).exp()
}

/// Normalized daily demand shape in roughly `[0, 1]`.
fn daily_shape(regime: Regime, hour: f64) -> f64 {
    match regime {
        // light demand sitting near the bottom of the band with short
        // morning and evening peaks
        Regime::Low => 0.05 + 0.95 * bump(hour, 7.5, 0.5) + 0.7 * bump(hour, 19.5, 0.6),
        // heavy demand near the top of the band with a night trough
        Regime::High => {
            0.8 + 0.2 * bump(hour, 7.5, 2.0) + 0.15 * bump(hour, 18.5, 2.5)
                - 0.3 * bump(hour, 3.0, 1.5)
        }
    }
}

/// Daily-periodic demand for each load (`result[j][k]`, W): two peaks and a
/// night trough plus AR(1) noise, with each load's realized range stretched
/// to `band / n_loads`.
pub fn generate_load_profile(
    regime: Regime,
    days: f64,
    n_loads: usize,
    sample_time: f64,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if n_loads == 0 {
        return Err(Error::InvalidInput("need at least one load".into()));
    }
    if !(days > 0.0) || !(sample_time > 0.0) {
        return Err(Error::InvalidInput("duration and sample time must be positive".into()));
    }
    let steps = (days * 86_400.0 / sample_time).round() as usize;
    if steps < 2 {
        return Err(Error::InvalidInput("load profile needs at least two samples".into()));
    }
    let (lo, hi) = regime.band();
    let (lo, hi) = (lo / n_loads as f64, hi / n_loads as f64);
    let noise = Normal::new(0.0, 0.02).expect("valid normal");
    let mut profiles = Vec::with_capacity(n_loads);
    for j in 0..n_loads {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 100 + j as u64));
        let phase = 0.75 * j as f64 + rng.random_range(-0.25..0.25);
        let mut ar = 0.0;
        let raw: Vec<f64> = (0..steps)
            .map(|k| {
                let hour = (k as f64 * sample_time / 3600.0) % 24.0;
                ar = 0.9 * ar + noise.sample(&mut rng);
                daily_shape(regime, hour - phase) + ar + 0.02 * (2.0 * PI * hour / 24.0).sin()
            })
            .collect();
        let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
        let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        profiles.push(raw.iter().map(|r| lo + (hi - lo) * (r - min) / (max - min)).collect());
    }
    Ok(profiles)
}
