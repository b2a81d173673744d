use std::collections::BTreeMap;
use std::f64::consts::PI;

use chrono::{Datelike, NaiveDate, NaiveDateTime, Timelike};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::household::{HouseholdProfile, HOURS_PER_YEAR};
use crate::series::{HourlySeries, Unit};
use crate::tariff::{Calendar, DayType, SeasonKind};

use super::cluster::cluster_representatives;
use super::solar::{irradiance, Sky};
use super::{apportion, pv_from_irradiance};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZoneConfig {
    pub name: String,
    pub weight: f64,
    pub latitude_deg: f64,
    /// Extra summer afternoon load relative to the base shape.
    pub cooling_amplitude: f64,
    /// Probability that a summer / winter day is cloudy.
    pub cloudy_day_summer: f64,
    pub cloudy_day_winter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoadShapeParams {
    /// Range of the hour at which the evening peak is centred.
    pub evening_peak_hour: (f64, f64),
    /// Range of the evening peak height relative to the base load.
    pub evening_amplitude: (f64, f64),
    pub morning_amplitude: (f64, f64),
    /// Fraction by which the evening peak shrinks on weekends and holidays.
    pub weekend_flattening: f64,
    /// Extra mid-winter load relative to the base shape.
    pub heating_amplitude: f64,
    /// Log-scale standard deviation of hour-to-hour noise.
    pub hourly_noise: f64,
    /// Log-scale standard deviation of day-to-day level changes.
    pub daily_noise: f64,
}

impl Default for LoadShapeParams {
    fn default() -> Self {
        Self {
            evening_peak_hour: (17.5, 20.5),
            evening_amplitude: (0.6, 1.6),
            morning_amplitude: (0.2, 0.6),
            weekend_flattening: 0.3,
            heating_amplitude: 0.25,
            hourly_noise: 0.2,
            daily_noise: 0.1,
        }
    }
}

/// Lognormal annual consumption, parametrized by its median (kWh/yr) and
/// log-scale standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnualKwh {
    pub median: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RepresentativeConfig {
    /// Number of households synthesized before clustering.
    pub pool_size: usize,
    pub clusters_per_zone: usize,
}

impl Default for RepresentativeConfig {
    fn default() -> Self {
        Self {
            pool_size: 10_000,
            clusters_per_zone: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortConfig {
    pub n_households: usize,
    pub climate_zones: Vec<ZoneConfig>,
    pub load_shape: LoadShapeParams,
    pub annual_kwh: AnnualKwh,
    /// Size rooftop PV so yearly generation equals yearly consumption.
    pub zero_net_energy: bool,
    /// Draw a larger pool and keep representatives chosen by clustering.
    pub representatives: Option<RepresentativeConfig>,
    pub seed: u64,
    pub start: NaiveDateTime,
    pub hours: usize,
}

impl Default for CohortConfig {
    fn default() -> Self {
        let zone = |name: &str, weight, latitude_deg, cooling_amplitude, cloudy_day_summer, cloudy_day_winter| ZoneConfig {
            name: name.into(),
            weight,
            latitude_deg,
            cooling_amplitude,
            cloudy_day_summer,
            cloudy_day_winter,
        };
        Self {
            n_households: 1000,
            climate_zones: vec![
                zone("CZ03", 0.40, 37.8, 0.15, 0.15, 0.45),
                zone("CZ12", 0.35, 38.5, 0.60, 0.05, 0.40),
                zone("CZ13", 0.25, 36.7, 1.00, 0.03, 0.35),
            ],
            load_shape: LoadShapeParams::default(),
            annual_kwh: AnnualKwh {
                median: 7000.0,
                sigma: 0.4,
            },
            zero_net_energy: true,
            representatives: None,
            seed: 1,
            start: NaiveDate::from_ymd_opt(2010, 8, 1).unwrap().and_hms_opt(0, 0, 0).unwrap(),
            hours: 8760,
        }
    }
}

impl CohortConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.n_households == 0 {
            errs.push("cohort.n_households must be >= 1".to_string());
        }
        if self.hours == 0 {
            errs.push("cohort.hours must be >= 1".to_string());
        }
        if self.climate_zones.is_empty() {
            errs.push("cohort.climate_zones must not be empty".to_string());
        }
        let total: f64 = self.climate_zones.iter().map(|z| z.weight).sum();
        if !self.climate_zones.is_empty() && (total - 1.0).abs() > 1e-6 {
            errs.push(format!("cohort.climate_zones weights must sum to 1, got {total}"));
        }
        for z in &self.climate_zones {
            if !(z.weight >= 0.0) {
                errs.push(format!("zone {}: weight must be >= 0", z.name));
            }
            if !(-90.0..=90.0).contains(&z.latitude_deg) {
                errs.push(format!("zone {}: latitude must be within [-90, 90]", z.name));
            }
            if !(0.0..=1.0).contains(&z.cloudy_day_summer) || !(0.0..=1.0).contains(&z.cloudy_day_winter) {
                errs.push(format!("zone {}: cloudy-day probabilities must be in [0, 1]", z.name));
            }
            if !(z.cooling_amplitude >= 0.0) {
                errs.push(format!("zone {}: cooling amplitude must be >= 0", z.name));
            }
        }
        let mut names: Vec<&str> = self.climate_zones.iter().map(|z| z.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            errs.push("cohort.climate_zones names must be unique".to_string());
        }
        if !(self.annual_kwh.median > 0.0) || !(self.annual_kwh.sigma >= 0.0) {
            errs.push("cohort.annual_kwh needs median > 0 and sigma >= 0".to_string());
        }
        let s = &self.load_shape;
        let ranges = [
            ("evening_peak_hour", s.evening_peak_hour),
            ("evening_amplitude", s.evening_amplitude),
            ("morning_amplitude", s.morning_amplitude),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo <= hi) || lo < 0.0 {
                errs.push(format!("cohort.load_shape.{name} must be an ordered non-negative range"));
            }
        }
        if !(0.0..=1.0).contains(&s.weekend_flattening) {
            errs.push("cohort.load_shape.weekend_flattening must be in [0, 1]".to_string());
        }
        if !(s.hourly_noise >= 0.0 && s.daily_noise >= 0.0 && s.heating_amplitude >= 0.0) {
            errs.push("cohort.load_shape noise and heating terms must be >= 0".to_string());
        }
        if let Some(r) = &self.representatives {
            if r.pool_size < self.n_households {
                errs.push("cohort.representatives.pool_size must be >= n_households".to_string());
            }
            if r.clusters_per_zone == 0 {
                errs.push("cohort.representatives.clusters_per_zone must be >= 1".to_string());
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }
}

/// Synthetic households plus the normalized irradiance of each zone.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCohort {
    pub profiles: Vec<HouseholdProfile>,
    pub irradiance: BTreeMap<String, HourlySeries>,
}

fn bump(hour: f64, centre: f64, width: f64) -> f64 {
    let d = hour - centre;
    (-(d * d) / (2.0 * width * width)).exp()
}

/// Per-household shape parameters.
struct Household {
    annual: f64,
    base: f64,
    daytime: f64,
    morning_hour: f64,
    morning: f64,
    evening_hour: f64,
    evening: f64,
    cooling: f64,
}

impl Household {
    fn draw<R: Rng>(cfg: &CohortConfig, zone: &ZoneConfig, rng: &mut R) -> Result<Self> {
        let s = &cfg.load_shape;
        let annual_dist = LogNormal::new(cfg.annual_kwh.median.ln(), cfg.annual_kwh.sigma)
            .map_err(|e| Error::Config(format!("annual kWh distribution: {e}")))?;
        let range = |rng: &mut R, (lo, hi): (f64, f64)| if hi > lo { rng.random_range(lo..hi) } else { lo };
        Ok(Self {
            annual: annual_dist.sample(rng),
            base: rng.random_range(0.35..0.6),
            daytime: rng.random_range(0.0..0.4),
            morning_hour: rng.random_range(6.5..8.5),
            morning: range(rng, s.morning_amplitude),
            evening_hour: range(rng, s.evening_peak_hour),
            evening: range(rng, s.evening_amplitude),
            cooling: zone.cooling_amplitude * rng.random_range(0.5..1.5),
        })
    }

    fn shape(&self, hour: f64, day: DayType, flattening: f64) -> f64 {
        match day {
            DayType::Weekday => {
                self.base
                    + self.daytime * bump(hour, 13.0, 3.0)
                    + self.morning * bump(hour, self.morning_hour, 1.2)
                    + self.evening * bump(hour, self.evening_hour, 1.8)
            }
            DayType::WeekendHoliday => {
                self.base
                    + (self.daytime + 0.3) * bump(hour, 13.0, 3.0)
                    + 0.6 * self.morning * bump(hour, self.morning_hour + 1.5, 1.5)
                    + (1.0 - flattening) * self.evening * bump(hour, self.evening_hour, 2.2)
            }
        }
    }
}

fn season_wave(ts: NaiveDateTime, peak_doy: f64) -> f64 {
    (2.0 * PI * (ts.ordinal() as f64 - peak_doy) / 365.0).cos().max(0.0)
}

fn synth_load(cfg: &CohortConfig, zone: &ZoneConfig, calendar: &Calendar, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let hh = Household::draw(cfg, zone, rng)?;
    let s = &cfg.load_shape;
    let hourly = LogNormal::new(0.0, s.hourly_noise).map_err(|e| Error::Config(e.to_string()))?;
    let daily = LogNormal::new(0.0, s.daily_noise).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Vec::with_capacity(cfg.hours);
    let mut level = 1.0;
    for h in 0..cfg.hours {
        let ts = cfg.start + chrono::Duration::hours(h as i64);
        if h == 0 || ts.hour() == 0 {
            level = daily.sample(rng);
        }
        let hour = ts.hour() as f64 + 0.5;
        let day = calendar.day_type(ts.date());
        let heating = s.heating_amplitude * season_wave(ts, 15.0);
        let cooling = hh.cooling * season_wave(ts, 205.0) * bump(hour, 17.0, 3.5);
        let v = level * (hh.shape(hour, day, s.weekend_flattening) * (1.0 + heating) + cooling) * hourly.sample(rng);
        out.push(v);
    }
    let total: f64 = out.iter().sum();
    let target = hh.annual * cfg.hours as f64 / HOURS_PER_YEAR;
    let k = target / total;
    out.iter_mut().for_each(|v| *v *= k);
    Ok(out)
}

/// Stream 0 draws zone weather; household `i` uses stream `i + 1`.
fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn zone_irradiance(cfg: &CohortConfig, calendar: &Calendar) -> Result<BTreeMap<String, HourlySeries>> {
    let mut rng = rng_for(cfg.seed, 0);
    let mut out = BTreeMap::new();
    for z in &cfg.climate_zones {
        let sky = Sky {
            latitude_deg: z.latitude_deg,
            cloudy_day_summer: z.cloudy_day_summer,
            cloudy_day_winter: z.cloudy_day_winter,
        };
        let v = irradiance(sky, cfg.start, cfg.hours, |ts| calendar.season(ts.date()) == SeasonKind::Summer, &mut rng);
        out.insert(z.name.clone(), HourlySeries::new(cfg.start, v, Unit::Kwh)?);
    }
    Ok(out)
}

fn synth_loads(cfg: &CohortConfig, n: usize) -> Result<Vec<HouseholdProfile>> {
    let calendar = Calendar::default();
    let weights: Vec<f64> = cfg.climate_zones.iter().map(|z| z.weight).collect();
    let counts = apportion(n, &weights);
    let zone_of: Vec<usize> = counts.iter().enumerate().flat_map(|(z, &c)| std::iter::repeat_n(z, c)).collect();
    let width = n.to_string().len().max(4);
    zone_of
        .par_iter()
        .enumerate()
        .map(|(i, &z)| {
            let zone = &cfg.climate_zones[z];
            let mut rng = rng_for(cfg.seed, i as u64 + 1);
            let load = HourlySeries::new(cfg.start, synth_load(cfg, zone, &calendar, &mut rng)?, Unit::Kwh)?;
            let pv = HourlySeries::zeros(cfg.start, cfg.hours, Unit::Kwh)?;
            HouseholdProfile::new(format!("H{i:0width$}"), load, pv, zone.name.clone())
        })
        .collect()
}

/// Deterministic synthetic cohort. Rooftop PV, if enabled, is sized after
/// representative selection.
pub fn synth_cohort(config: &CohortConfig) -> Result<SynthCohort> {
    config.validate()?;
    let calendar = Calendar::default();
    let irradiance = zone_irradiance(config, &calendar)?;
    let mut profiles = match &config.representatives {
        None => synth_loads(config, config.n_households)?,
        Some(r) => {
            let pool = synth_loads(config, r.pool_size)?;
            cluster_representatives(&pool, r.clusters_per_zone, config.n_households, config.seed)?
        }
    };
    if config.zero_net_energy {
        profiles = profiles
            .into_par_iter()
            .map(|p| {
                let pv = pv_from_irradiance(&p, &irradiance[&p.climate_zone])?;
                p.with_pv(pv)
            })
            .collect::<Result<Vec<_>>>()?;
    }
    Ok(SynthCohort { profiles, irradiance })
}
