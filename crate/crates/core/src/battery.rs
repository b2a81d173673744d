use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::{HourlySeries, Unit};

/// Tolerance on the state-of-charge recursion and on bound checks.
pub const DISPATCH_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatterySpec {
    /// Energy capacity, kWh.
    pub capacity: f64,
    /// Charge/discharge power limit, kW.
    pub rate: f64,
    /// State of charge before the first step, kWh.
    pub initial_soc: f64,
}

impl BatterySpec {
    pub fn new(capacity: f64, rate: f64, initial_soc: f64) -> Result<Self> {
        let b = Self {
            capacity,
            rate,
            initial_soc,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn empty(capacity: f64, rate: f64) -> Result<Self> {
        Self::new(capacity, rate, 0.0)
    }

    /// Battery of `capacity` with `rate = capacity / ratio`.
    pub fn with_ratio(capacity: f64, ratio: f64, initial_soc: f64) -> Result<Self> {
        if !(ratio > 0.0) {
            return Err(Error::Config(format!("energy/power ratio must be positive, got {ratio}")));
        }
        Self::new(capacity, capacity / ratio, initial_soc)
    }

    pub fn none() -> Self {
        Self {
            capacity: 0.0,
            rate: 0.0,
            initial_soc: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.capacity.is_finite() && self.rate.is_finite() && self.initial_soc.is_finite();
        if !finite || self.capacity < 0.0 || self.rate < 0.0 {
            return Err(Error::Domain(format!(
                "battery needs finite capacity >= 0 and rate >= 0 (got {} kWh, {} kW)",
                self.capacity, self.rate
            )));
        }
        if self.initial_soc < 0.0 || self.initial_soc > self.capacity {
            return Err(Error::Domain(format!(
                "initial soc {} outside [0, {}]",
                self.initial_soc, self.capacity
            )));
        }
        Ok(())
    }
}

/// A battery schedule (kW, + charge / - discharge), its state-of-charge
/// trajectory (kWh) and the per-step mismatch against the command it was
/// asked to follow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchResult {
    pub schedule: HourlySeries,
    pub soc: HourlySeries,
    pub mismatch: HourlySeries,
}

impl DispatchResult {
    pub fn from_parts(schedule: HourlySeries, soc: HourlySeries, mismatch: HourlySeries) -> Result<Self> {
        schedule.check_aligned(&soc)?;
        schedule.check_aligned(&mismatch)?;
        Ok(Self {
            schedule,
            soc,
            mismatch,
        })
    }

    /// Build from a schedule by integrating from `initial_soc`; mismatch is zero.
    pub fn integrate(schedule: HourlySeries, initial_soc: f64) -> Result<Self> {
        let mut s = initial_soc;
        let soc = schedule
            .values()
            .iter()
            .map(|a| {
                s += a;
                s
            })
            .collect();
        let soc = schedule.with_values(soc, Unit::Kwh)?;
        let mismatch = schedule.with_values(vec![0.0; schedule.len()], Unit::Kw)?;
        Self::from_parts(schedule, soc, mismatch)
    }

    pub fn len(&self) -> usize {
        self.schedule.len()
    }

    pub fn is_empty(&self) -> bool {
        self.schedule.is_empty()
    }

    /// Check the dynamics `soc[t] = soc[t-1] + schedule[t]` and the static
    /// bounds `0 <= soc <= capacity`, `|schedule| <= rate`.
    pub fn check(&self, battery: &BatterySpec) -> Result<()> {
        self.check_with(battery.initial_soc, |_| (0.0, battery.capacity), |_| battery.rate)
    }

    /// Same as [`check`](Self::check) with per-step SoC bands and rate limits.
    pub fn check_with(
        &self,
        initial_soc: f64,
        soc_band: impl Fn(usize) -> (f64, f64),
        rate: impl Fn(usize) -> f64,
    ) -> Result<()> {
        let mut prev = initial_soc;
        let sched = self.schedule.values();
        for (t, &s) in self.soc.values().iter().enumerate() {
            let a = sched[t];
            if (s - (prev + a)).abs() > DISPATCH_TOL * (1.0 + prev.abs()) {
                return Err(Error::Data(format!("soc recursion broken at step {t}: {prev} + {a} != {s}")));
            }
            let (lo, hi) = soc_band(t);
            if s < lo - DISPATCH_TOL * (1.0 + lo.abs()) || s > hi + DISPATCH_TOL * (1.0 + hi.abs()) {
                return Err(Error::Data(format!("soc {s} outside [{lo}, {hi}] at step {t}")));
            }
            let r = rate(t);
            if a.abs() > r + DISPATCH_TOL * (1.0 + r) {
                return Err(Error::Data(format!("|action| {} exceeds rate {r} at step {t}", a.abs())));
            }
            prev = s;
        }
        Ok(())
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["timestamp", "schedule_kw", "soc_kwh", "mismatch_kw"])?;
        for (t, ts) in self.schedule.timestamps().enumerate() {
            w.write_record([
                ts.format(crate::series::TIMESTAMP_FORMAT).to_string(),
                self.schedule.values()[t].to_string(),
                self.soc.values()[t].to_string(),
                self.mismatch.values()[t].to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(reader: R, origin: &str) -> Result<Self> {
        use crate::series::{parse_err, parse_timestamp};
        let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        if header != ["timestamp", "schedule_kw", "soc_kwh", "mismatch_kw"] {
            return Err(parse_err(origin, 1, "expected header `timestamp,schedule_kw,soc_kwh,mismatch_kw`"));
        }
        let mut start = None;
        let (mut a, mut s, mut m) = (Vec::new(), Vec::new(), Vec::new());
        for rec in r.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            let ts = parse_timestamp(&rec[0]).map_err(|e| parse_err(origin, line, &e))?;
            let st = *start.get_or_insert(ts);
            if ts != st + chrono::Duration::hours(a.len() as i64) {
                return Err(parse_err(origin, line, &format!("timestamp {ts} breaks the hourly sequence")));
            }
            let num = |i: usize| -> Result<f64> {
                rec[i]
                    .parse()
                    .map_err(|_| parse_err(origin, line, &format!("bad number `{}`", &rec[i])))
            };
            a.push(num(1)?);
            s.push(num(2)?);
            m.push(num(3)?);
        }
        let start = start.ok_or_else(|| parse_err(origin, 1, "dispatch file has no rows"))?;
        Self::from_parts(
            HourlySeries::new(start, a, Unit::Kw)?,
            HourlySeries::new(start, s, Unit::Kwh)?,
            HourlySeries::new(start, m, Unit::Kw)?,
        )
    }
}
