//! Hourly time series with a unit tag.
//!
//! The timebase is fixed at one hour, so a kWh-per-step series and an
//! average-kW series hold the same numbers; the unit records intent and is
//! used to reject nonsensical combinations such as adding a price to an
//! energy.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::{Duration, NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Unit {
    #[serde(rename = "kWh")]
    Kwh,
    #[serde(rename = "kW")]
    Kw,
    #[serde(rename = "$/kWh")]
    UsdPerKwh,
    #[serde(rename = "$")]
    Usd,
}

impl Unit {
    fn is_energy_like(self) -> bool {
        matches!(self, Unit::Kwh | Unit::Kw)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Unit::Kwh => "kWh",
            Unit::Kw => "kW",
            Unit::UsdPerKwh => "$/kWh",
            Unit::Usd => "$",
        }
    }
}

impl fmt::Display for Unit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Unit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "kWh" => Ok(Unit::Kwh),
            "kW" => Ok(Unit::Kw),
            "$/kWh" => Ok(Unit::UsdPerKwh),
            "$" => Ok(Unit::Usd),
            other => Err(Error::Unit(format!("unknown unit `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CombineOp {
    Add,
    Sub,
    Mul,
}

impl CombineOp {
    fn result_unit(self, a: Unit, b: Unit) -> Result<Unit> {
        match self {
            CombineOp::Add | CombineOp::Sub => {
                if a == b {
                    Ok(a)
                } else if a.is_energy_like() && b.is_energy_like() {
                    Ok(Unit::Kwh)
                } else {
                    Err(Error::Unit(format!("cannot add or subtract {a} and {b}")))
                }
            }
            CombineOp::Mul => match (a, b) {
                (e, Unit::UsdPerKwh) | (Unit::UsdPerKwh, e) if e.is_energy_like() => Ok(Unit::Usd),
                _ => Err(Error::Unit(format!("cannot multiply {a} by {b}"))),
            },
        }
    }
}

/// A fixed-step (1 h) sequence of finite values starting at an hour-aligned
/// timestamp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HourlySeries {
    start: NaiveDateTime,
    values: Vec<f64>,
    unit: Unit,
}

impl HourlySeries {
    pub fn new(start: NaiveDateTime, values: Vec<f64>, unit: Unit) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Domain("series must have at least one value".into()));
        }
        if start.minute() != 0 || start.second() != 0 || start.nanosecond() != 0 {
            return Err(Error::Alignment(format!("start {start} is not hour-aligned")));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite value at step {i}")));
        }
        Ok(Self { start, values, unit })
    }

    pub fn constant(start: NaiveDateTime, len: usize, value: f64, unit: Unit) -> Result<Self> {
        Self::new(start, vec![value; len], unit)
    }

    pub fn zeros(start: NaiveDateTime, len: usize, unit: Unit) -> Result<Self> {
        Self::constant(start, len, 0.0, unit)
    }

    pub fn start(&self) -> NaiveDateTime {
        self.start
    }

    pub fn unit(&self) -> Unit {
        self.unit
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn timestamp(&self, step: usize) -> NaiveDateTime {
        self.start + Duration::hours(step as i64)
    }

    pub fn timestamps(&self) -> impl Iterator<Item = NaiveDateTime> + '_ {
        (0..self.len()).map(move |i| self.timestamp(i))
    }

    /// Same start and length, new values.
    pub fn with_values(&self, values: Vec<f64>, unit: Unit) -> Result<Self> {
        if values.len() != self.len() {
            return Err(Error::Alignment(format!(
                "expected {} values, got {}",
                self.len(),
                values.len()
            )));
        }
        Self::new(self.start, values, unit)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.start, self.values.iter().map(|&v| f(v)).collect(), self.unit)
    }

    pub fn scale(&self, k: f64) -> Result<Self> {
        self.map(|v| v * k)
    }

    pub fn check_aligned(&self, other: &HourlySeries) -> Result<()> {
        if self.start != other.start || self.len() != other.len() {
            return Err(Error::Alignment(format!(
                "[{} +{}h] vs [{} +{}h]",
                self.start,
                self.len(),
                other.start,
                other.len()
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &HourlySeries) -> Result<Self> {
        align_and_combine(self, other, CombineOp::Add)
    }

    pub fn sub(&self, other: &HourlySeries) -> Result<Self> {
        align_and_combine(self, other, CombineOp::Sub)
    }

    pub fn mul(&self, other: &HourlySeries) -> Result<Self> {
        align_and_combine(self, other, CombineOp::Mul)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["timestamp", "value", "unit"])?;
        for (ts, v) in self.timestamps().zip(&self.values) {
            w.write_record([
                ts.format(TIMESTAMP_FORMAT).to_string(),
                v.to_string(),
                self.unit.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R, origin: &str) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = r.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["timestamp", "value", "unit"] {
            return Err(parse_err(origin, 1, "expected header `timestamp,value,unit`"));
        }
        let mut start = None;
        let mut unit = None;
        let mut values = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            let ts = parse_timestamp(&rec[0]).map_err(|m| parse_err(origin, line, &m))?;
            let value: f64 = rec[1]
                .parse()
                .map_err(|_| parse_err(origin, line, &format!("bad value `{}`", &rec[1])))?;
            let u: Unit = rec[2].parse().map_err(|e: Error| parse_err(origin, line, &e.to_string()))?;
            let s = *start.get_or_insert(ts);
            if ts != s + Duration::hours(values.len() as i64) {
                return Err(parse_err(origin, line, &format!("timestamp {ts} breaks the hourly sequence")));
            }
            if *unit.get_or_insert(u) != u {
                return Err(parse_err(origin, line, "mixed units in one series"));
            }
            values.push(value);
        }
        match (start, unit) {
            (Some(s), Some(u)) => HourlySeries::new(s, values, u),
            _ => Err(parse_err(origin, 1, "series file has no rows")),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(f), &path.display().to_string())
    }
}

/// Elementwise combination of two aligned series with unit checking.
pub fn align_and_combine(a: &HourlySeries, b: &HourlySeries, op: CombineOp) -> Result<HourlySeries> {
    let unit = op.result_unit(a.unit, b.unit)?;
    a.check_aligned(b)?;
    let values = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(&x, &y)| match op {
            CombineOp::Add => x + y,
            CombineOp::Sub => x - y,
            CombineOp::Mul => x * y,
        })
        .collect();
    HourlySeries::new(a.start, values, unit)
}

pub fn parse_timestamp(s: &str) -> std::result::Result<NaiveDateTime, String> {
    let s = s.trim();
    NaiveDateTime::parse_from_str(s, TIMESTAMP_FORMAT)
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M"))
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S"))
        .map_err(|_| format!("bad timestamp `{s}`"))
}

pub(crate) fn parse_err(origin: &str, line: u64, message: &str) -> Error {
    Error::Parse {
        path: origin.to_string(),
        line,
        message: message.to_string(),
    }
}
