use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::model::PlantModel;
use super::signals::{derive_seed, generate_load_profile, generate_mprbs, MprbsConfig, Regime};
use crate::data::IoDataset;
use crate::error::{check_dim, Error, Result};
use crate::io;

/// Upper limit on every substation supply temperature, °C.
pub const SUPPLY_UPPER: f64 = 85.0;
/// Upper limit on the network return temperature, °C.
pub const RETURN_UPPER: f64 = 75.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub sample_time: f64,
    pub days: f64,
    pub n_loads: usize,
    pub initial_regime: Regime,
    /// Fraction of the run after which the regime flips; `None` keeps it fixed.
    pub switch_fraction: Option<f64>,
    /// Night, shoulder and peak electricity price, €/kWh.
    pub price_levels: [f64; 3],
    pub day_start_hour: f64,
    pub day_end_hour: f64,
    pub supply_lower_day: f64,
    pub supply_lower_night: f64,
    pub return_lower_day: f64,
    pub return_lower_night: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            sample_time: 300.0,
            days: 1.0,
            n_loads: 2,
            initial_regime: Regime::Low,
            switch_fraction: Some(0.5),
            price_levels: [0.10, 0.15, 0.20],
            day_start_hour: 6.0,
            day_end_hour: 22.0,
            supply_lower_day: 68.0,
            supply_lower_night: 62.0,
            return_lower_day: 45.0,
            return_lower_night: 40.0,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    /// A fixed-regime scenario, as used for data collection.
    pub fn single_regime(regime: Regime, days: f64, seed: u64) -> Self {
        Self {
            days,
            initial_regime: regime,
            switch_fraction: None,
            seed,
            ..Self::default()
        }
    }

    pub fn steps(&self) -> usize {
        (self.days * 86_400.0 / self.sample_time).round() as usize
    }

    fn validate(&self) -> Result<()> {
        if !(self.sample_time > 0.0) || !(self.days > 0.0) || self.steps() < 2 {
            return Err(Error::Config("scenario needs a positive duration of at least two steps".into()));
        }
        if let Some(f) = self.switch_fraction {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("switch fraction {f} outside [0, 1]")));
            }
        }
        if self.price_levels.iter().any(|c| !(*c > 0.0)) {
            return Err(Error::Config("prices must be positive".into()));
        }
        if !(0.0 <= self.day_start_hour && self.day_start_hour < self.day_end_hour && self.day_end_hour <= 24.0) {
            return Err(Error::Config("day window must satisfy 0 ≤ start < end ≤ 24".into()));
        }
        if !(self.supply_lower_day > self.supply_lower_night) || !(self.return_lower_day > self.return_lower_night) {
            return Err(Error::Config("day lower bounds must exceed night lower bounds".into()));
        }
        if self.supply_lower_day > SUPPLY_UPPER || self.return_lower_day > RETURN_UPPER {
            return Err(Error::Config("lower bounds exceed the physical upper limits".into()));
        }
        Ok(())
    }

    fn price_at_hour(&self, hour: f64) -> f64 {
        let [night, shoulder, peak] = self.price_levels;
        match hour {
            h if h < 6.0 => night,
            h if h < 8.0 => shoulder,
            h if h < 12.0 => peak,
            h if h < 17.0 => shoulder,
            h if h < 21.0 => peak,
            _ => night,
        }
    }
}

/// Exogenous data of a run: loads (the measured disturbance), price and
/// lower output bounds per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub sample_time: f64,
    /// `loads[k][j]`, W.
    pub loads: Vec<Vec<f64>>,
    /// €/kWh.
    pub price: Vec<f64>,
    pub supply_lower: Vec<f64>,
    pub return_lower: Vec<f64>,
    pub regime: Vec<Regime>,
}

impl Scenario {
    pub fn len(&self) -> usize {
        self.price.len()
    }

    pub fn is_empty(&self) -> bool {
        self.price.is_empty()
    }

    pub fn n_loads(&self) -> usize {
        self.loads.first().map_or(0, Vec::len)
    }

    // beyond the end every series holds its last value
    fn clamp(&self, k: usize) -> usize {
        k.min(self.len() - 1)
    }

    pub fn loads_at(&self, k: usize) -> &[f64] {
        &self.loads[self.clamp(k)]
    }

    pub fn price_at(&self, k: usize) -> f64 {
        self.price[self.clamp(k)]
    }

    pub fn supply_lower_at(&self, k: usize) -> f64 {
        self.supply_lower[self.clamp(k)]
    }

    pub fn return_lower_at(&self, k: usize) -> f64 {
        self.return_lower[self.clamp(k)]
    }

    pub fn regime_at(&self, k: usize) -> Regime {
        self.regime[self.clamp(k)]
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.len();
        if t == 0 {
            return Err(Error::InvalidInput("empty scenario".into()));
        }
        check_dim("scenario loads", t, self.loads.len())?;
        check_dim("scenario supply bounds", t, self.supply_lower.len())?;
        check_dim("scenario return bounds", t, self.return_lower.len())?;
        check_dim("scenario regimes", t, self.regime.len())?;
        let n = self.n_loads();
        for l in &self.loads {
            check_dim("scenario load width", n, l.len())?;
            if l.iter().any(|p| !(*p > 0.0)) {
                return Err(Error::InvalidInput("loads must be positive".into()));
            }
        }
        if self.price.iter().any(|c| !(*c > 0.0)) {
            return Err(Error::InvalidInput("prices must be positive".into()));
        }
        if self.supply_lower.iter().any(|b| !(*b <= SUPPLY_UPPER)) || self.return_lower.iter().any(|b| !(*b <= RETURN_UPPER)) {
            return Err(Error::InvalidInput("lower bounds above physical limits".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        io::write_json(path, self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s: Scenario = io::read_json(path)?;
        s.validate().map_err(|e| Error::format(path, e))?;
        Ok(s)
    }
}

pub fn generate_scenario(config: &ScenarioConfig) -> Result<Scenario> {
    config.validate()?;
    let steps = config.steps();
    let switch_at = config
        .switch_fraction
        .map_or(usize::MAX, |f| (f * steps as f64).round() as usize);
    let other = match config.initial_regime {
        Regime::Low => Regime::High,
        Regime::High => Regime::Low,
    };
    let regime: Vec<Regime> = (0..steps)
        .map(|k| if k < switch_at { config.initial_regime } else { other })
        .collect();
    let profiles = [Regime::Low, Regime::High].map(|r| {
        generate_load_profile(
            r,
            config.days,
            config.n_loads,
            config.sample_time,
            derive_seed(config.seed, 1 + r.index() as u64),
        )
    });
    let [low, high] = profiles;
    let (low, high) = (low?, high?);
    let mut loads = Vec::with_capacity(steps);
    let mut price = Vec::with_capacity(steps);
    let mut supply_lower = Vec::with_capacity(steps);
    let mut return_lower = Vec::with_capacity(steps);
    for (k, r) in regime.iter().enumerate() {
        let source = match r {
            Regime::Low => &low,
            Regime::High => &high,
        };
        loads.push(source.iter().map(|load| load[k]).collect());
        let hour = (k as f64 * config.sample_time / 3600.0) % 24.0;
        price.push(config.price_at_hour(hour));
        let day = hour >= config.day_start_hour && hour < config.day_end_hour;
        supply_lower.push(if day { config.supply_lower_day } else { config.supply_lower_night });
        return_lower.push(if day { config.return_lower_day } else { config.return_lower_night });
    }
    let scenario = Scenario {
        sample_time: config.sample_time,
        loads,
        price,
        supply_lower,
        return_lower,
        regime,
    };
    scenario.validate()?;
    Ok(scenario)
}

/// Excitation used while collecting identification data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcitationConfig {
    pub supply: MprbsConfig,
    pub storage: MprbsConfig,
}

impl ExcitationConfig {
    /// Five supply levels over [65, 85] °C held ≥ 30 min, and low-amplitude
    /// storage flow in [−5, 5] kg/s held ≥ 1 h.
    pub fn default_for_seed(seed: u64) -> Self {
        Self {
            supply: MprbsConfig {
                levels: 5,
                lo: 65.0,
                hi: 85.0,
                hold: 6,
                seed: derive_seed(seed, 11),
            },
            storage: MprbsConfig {
                levels: 5,
                lo: -5.0,
                hi: 5.0,
                hold: 12,
                seed: derive_seed(seed, 12),
            },
        }
    }
}

/// Drives the plant with the excitation and the scenario's loads, recording
/// `[T0_s, q_tes, P_c…]` and the plant outputs at every step.
pub fn collect_dataset(
    plant: &PlantModel,
    scenario: &Scenario,
    excitation: &ExcitationConfig,
) -> Result<IoDataset> {
    scenario.validate()?;
    check_dim("scenario loads", plant.n_loads(), scenario.n_loads())?;
    let steps = scenario.len();
    let supply = generate_mprbs(&excitation.supply, steps)?;
    let storage = generate_mprbs(&excitation.storage, steps)?;
    let mut x = plant.initial_state(supply[0]);
    let mut inputs = Vec::with_capacity(steps);
    let mut outputs = Vec::with_capacity(steps);
    for k in 0..steps {
        let mut u = vec![supply[k], storage[k]];
        u.extend_from_slice(&scenario.loads[k]);
        let (xn, y) = plant.step(x.as_slice(), &u)?;
        inputs.push(DVector::from_vec(u));
        outputs.push(y);
        x = xn;
    }
    IoDataset::new(inputs, outputs, plant.input_names(), plant.output_names(), scenario.sample_time)
}

/// One regime's identification experiment with the default excitation.
pub fn collect_regime(plant: &PlantModel, regime: Regime, days: f64, seed: u64) -> Result<IoDataset> {
    let mut config = ScenarioConfig::single_regime(regime, days, seed);
    config.n_loads = plant.n_loads();
    config.sample_time = plant.params().sample_time;
    let scenario = generate_scenario(&config)?;
    collect_dataset(plant, &scenario, &ExcitationConfig::default_for_seed(seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::PlantParams;

    #[test]
    fn three_days_is_864_steps() {
        let s = generate_scenario(&ScenarioConfig {
            days: 3.0,
            ..ScenarioConfig::default()
        })
        .unwrap();
        assert_eq!(s.len(), 864);
        assert_eq!(s.loads.len(), 864);
    }

    #[test]
    fn bounds_switch_between_day_and_night() {
        let s = generate_scenario(&ScenarioConfig::default()).unwrap();
        // 03:00 is night, 12:00 is day
        assert!(s.supply_lower[144] > s.supply_lower[36]);
        assert!(s.return_lower[144] > s.return_lower[36]);
        let c = ScenarioConfig::default();
        assert!(c.supply_lower_day > c.supply_lower_night && c.return_lower_day > c.return_lower_night);
    }

    #[test]
    fn regime_switches_exactly_once() {
        let s = generate_scenario(&ScenarioConfig::default()).unwrap();
        let changes = s.regime.windows(2).filter(|w| w[0] != w[1]).count();
        assert_eq!(changes, 1);
        assert_eq!(s.regime[143], Regime::Low);
        assert_eq!(s.regime[144], Regime::High);
    }

    #[test]
    fn price_straddles_rule_thresholds() {
        let s = generate_scenario(&ScenarioConfig::default()).unwrap();
        assert!(s.price.iter().any(|c| *c < 0.125));
        assert!(s.price.iter().any(|c| *c > 0.175));
        assert!(s.price.iter().any(|c| (0.125..=0.175).contains(c)));
    }

    #[test]
    fn series_hold_last_value_past_the_end() {
        let s = generate_scenario(&ScenarioConfig::default()).unwrap();
        assert_eq!(s.price_at(10_000), *s.price.last().unwrap());
        assert_eq!(s.loads_at(10_000), s.loads.last().unwrap().as_slice());
    }

    #[test]
    fn one_week_dataset_shape_and_replay() {
        let plant = PlantModel::new(PlantParams::default()).unwrap();
        let data = collect_regime(&plant, Regime::High, 7.0, 3).unwrap();
        assert_eq!(data.len(), 2016);
        assert_eq!(data.input_size(), 4);
        assert_eq!(data.output_size(), 8);
        let replay = plant.simulate(plant.initial_state(data.inputs[0][0]).as_slice(), &data.inputs).unwrap();
        assert_eq!(replay, data.outputs);
        // temperatures stay physical
        for y in &data.outputs {
            for i in [0, 2, 3, 4, 5] {
                assert!((0.0..=120.0).contains(&y[i]));
            }
        }
    }

    #[test]
    fn scenario_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scenario.json");
        let s = generate_scenario(&ScenarioConfig::default()).unwrap();
        s.save(&path).unwrap();
        assert_eq!(Scenario::load(&path).unwrap(), s);
    }
}
