//! Seasonal time-of-use tariffs and the calendar rules they depend on.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use chrono::{Datelike, Duration, NaiveDate, NaiveDateTime, Timelike, Weekday};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::series::{HourlySeries, Unit};

/// A recurring calendar day, written `MM-DD`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MonthDay {
    pub month: u32,
    pub day: u32,
}

impl MonthDay {
    pub fn new(month: u32, day: u32) -> Result<Self> {
        // 2000 is a leap year, so 02-29 is accepted.
        if NaiveDate::from_ymd_opt(2000, month, day).is_none() {
            return Err(Error::Config(format!("invalid month-day {month:02}-{day:02}")));
        }
        Ok(Self { month, day })
    }

    pub fn of(date: NaiveDate) -> Self {
        Self {
            month: date.month(),
            day: date.day(),
        }
    }
}

impl fmt::Display for MonthDay {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:02}-{:02}", self.month, self.day)
    }
}

impl FromStr for MonthDay {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("expected MM-DD, got `{s}`"));
        let (m, d) = s.trim().split_once('-').ok_or_else(bad)?;
        MonthDay::new(m.parse().map_err(|_| bad())?, d.parse().map_err(|_| bad())?)
    }
}

impl Serialize for MonthDay {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MonthDay {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Inclusive recurring date range; `start > end` wraps over the new year.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateRange {
    pub start: MonthDay,
    pub end: MonthDay,
}

impl DateRange {
    pub fn contains(&self, day: MonthDay) -> bool {
        if self.start <= self.end {
            self.start <= day && day <= self.end
        } else {
            day >= self.start || day <= self.end
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HolidayRule {
    /// Fixed-date US federal holidays of whatever year is simulated.
    #[default]
    FixedFederal,
    List(Vec<NaiveDate>),
}

impl HolidayRule {
    pub fn is_holiday(&self, date: NaiveDate) -> bool {
        match self {
            HolidayRule::FixedFederal => {
                let md = (date.month(), date.day());
                matches!(md, (1, 1) | (7, 4) | (11, 11) | (12, 25))
                    || (md == (6, 19) && date.year() >= 2021)
            }
            HolidayRule::List(days) => days.contains(&date),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DayType {
    Weekday,
    WeekendHoliday,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeasonKind {
    Summer,
    Winter,
}

/// Season and day-type classification of hours, used for slicing statistics.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Calendar {
    pub summer: DateRange,
    #[serde(default)]
    pub holidays: HolidayRule,
}

impl Default for Calendar {
    fn default() -> Self {
        Self {
            summer: DateRange {
                start: MonthDay { month: 6, day: 1 },
                end: MonthDay { month: 9, day: 30 },
            },
            holidays: HolidayRule::FixedFederal,
        }
    }
}

impl Calendar {
    pub fn day_type(&self, date: NaiveDate) -> DayType {
        if matches!(date.weekday(), Weekday::Sat | Weekday::Sun) || self.holidays.is_holiday(date) {
            DayType::WeekendHoliday
        } else {
            DayType::Weekday
        }
    }

    pub fn season(&self, date: NaiveDate) -> SeasonKind {
        if self.summer.contains(MonthDay::of(date)) {
            SeasonKind::Summer
        } else {
            SeasonKind::Winter
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Season {
    pub name: String,
    #[serde(flatten)]
    pub range: DateRange,
    pub off_peak: f64,
    pub peak: f64,
}

/// Daily peak window `[start, end)` in local clock hours.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeakWindow {
    pub start: u32,
    pub end: u32,
}

impl PeakWindow {
    pub fn contains(&self, hour: u32) -> bool {
        self.start <= hour && hour < self.end
    }

    pub fn hours(&self) -> u32 {
        self.end.saturating_sub(self.start)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tariff {
    #[serde(default)]
    pub name: String,
    pub seasons: Vec<Season>,
    pub peak_hours: PeakWindow,
    pub weekend_holiday_flat: bool,
    #[serde(default)]
    pub injection_price: f64,
    #[serde(default)]
    pub holidays: HolidayRule,
}

impl Tariff {
    /// PG&E E-TOU Option B energy rates, peak 4pm-9pm, weekends and holidays
    /// at the off-peak rate, uncompensated injection.
    pub fn pge_etou_b() -> Self {
        Self {
            name: "PG&E E-TOU Option B".into(),
            seasons: vec![
                Season {
                    name: "summer".into(),
                    range: DateRange {
                        start: MonthDay { month: 6, day: 1 },
                        end: MonthDay { month: 9, day: 30 },
                    },
                    off_peak: 0.25511,
                    peak: 0.35817,
                },
                Season {
                    name: "winter".into(),
                    range: DateRange {
                        start: MonthDay { month: 10, day: 1 },
                        end: MonthDay { month: 5, day: 31 },
                    },
                    off_peak: 0.20191,
                    peak: 0.22071,
                },
            ],
            peak_hours: PeakWindow { start: 16, end: 21 },
            weekend_holiday_flat: true,
            injection_price: 0.0,
            holidays: HolidayRule::FixedFederal,
        }
    }

    /// Single all-year season; `off_peak == peak` gives a flat tariff.
    pub fn two_level(off_peak: f64, peak: f64, peak_hours: PeakWindow, weekend_holiday_flat: bool) -> Self {
        Self {
            name: "two-level".into(),
            seasons: vec![Season {
                name: "all-year".into(),
                range: DateRange {
                    start: MonthDay { month: 1, day: 1 },
                    end: MonthDay { month: 12, day: 31 },
                },
                off_peak,
                peak,
            }],
            peak_hours,
            weekend_holiday_flat,
            injection_price: 0.0,
            holidays: HolidayRule::FixedFederal,
        }
    }

    pub fn flat(price: f64) -> Self {
        Self::two_level(price, price, PeakWindow { start: 0, end: 0 }, false)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tariff: Tariff = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        tariff.validate()?;
        Ok(tariff)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seasons.is_empty() {
            return Err(Error::Config("tariff has no seasons".into()));
        }
        if !(self.injection_price >= 0.0) || !self.injection_price.is_finite() {
            return Err(Error::Config("injection price must be finite and >= 0".into()));
        }
        for s in &self.seasons {
            if !(s.off_peak >= 0.0 && s.peak >= 0.0) || !s.off_peak.is_finite() || !s.peak.is_finite() {
                return Err(Error::Config(format!("season `{}`: prices must be finite and >= 0", s.name)));
            }
            if s.peak < s.off_peak {
                return Err(Error::Config(format!("season `{}`: peak price below off-peak", s.name)));
            }
            if s.off_peak < self.injection_price {
                return Err(Error::Config(format!(
                    "season `{}`: purchase price below injection price",
                    s.name
                )));
            }
        }
        if self.peak_hours.start > self.peak_hours.end || self.peak_hours.end > 24 {
            return Err(Error::Config(format!(
                "peak window {}..{} is not within one day",
                self.peak_hours.start, self.peak_hours.end
            )));
        }
        // Seasons must partition the (leap) year.
        let mut day = NaiveDate::from_ymd_opt(2000, 1, 1).unwrap();
        while day.year() == 2000 {
            let md = MonthDay::of(day);
            let n = self.seasons.iter().filter(|s| s.range.contains(md)).count();
            if n != 1 {
                return Err(Error::Config(format!(
                    "day {md} is covered by {n} seasons (expected exactly one)"
                )));
            }
            day = day.succ_opt().unwrap();
        }
        Ok(())
    }

    pub fn calendar(&self) -> Calendar {
        Calendar {
            holidays: self.holidays.clone(),
            ..Calendar::default()
        }
    }

    fn season_at(&self, date: NaiveDate) -> Result<&Season> {
        let md = MonthDay::of(date);
        self.seasons
            .iter()
            .find(|s| s.range.contains(md))
            .ok_or_else(|| Error::Config(format!("no tariff season covers {date}")))
    }

    pub fn is_peak(&self, ts: NaiveDateTime) -> bool {
        let flat_day = self.weekend_holiday_flat
            && self.calendar().day_type(ts.date()) == DayType::WeekendHoliday;
        !flat_day && self.peak_hours.contains(ts.hour())
    }

    pub fn purchase_price(&self, ts: NaiveDateTime) -> Result<f64> {
        let season = self.season_at(ts.date())?;
        Ok(if self.is_peak(ts) { season.peak } else { season.off_peak })
    }
}

/// Hourly purchase and injection price series over `hours` steps from `start`.
pub fn expand_tariff(tariff: &Tariff, start: NaiveDateTime, hours: usize) -> Result<(HourlySeries, HourlySeries)> {
    if hours == 0 {
        return Err(Error::Domain("tariff expansion needs at least one hour".into()));
    }
    tariff.validate()?;
    let purchase = (0..hours)
        .map(|h| tariff.purchase_price(start + Duration::hours(h as i64)))
        .collect::<Result<Vec<_>>>()?;
    Ok((
        HourlySeries::new(start, purchase, Unit::UsdPerKwh)?,
        HourlySeries::constant(start, hours, tariff.injection_price, Unit::UsdPerKwh)?,
    ))
}

/// Hourly prices aligned with `like`.
pub fn prices_for(tariff: &Tariff, like: &HourlySeries) -> Result<(HourlySeries, HourlySeries)> {
    expand_tariff(tariff, like.start(), like.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn at(y: i32, m: u32, d: u32, h: u32) -> NaiveDateTime {
        NaiveDate::from_ymd_opt(y, m, d).unwrap().and_hms_opt(h, 0, 0).unwrap()
    }

    #[test]
    fn july_weekday_peak() {
        // 2010-07-07 is a Wednesday
        let (p, _) = expand_tariff(&Tariff::pge_etou_b(), at(2010, 7, 7, 17), 1).unwrap();
        assert_eq!(p.values(), &[0.35817]);
    }

    #[test]
    fn january_sunday_is_off_peak() {
        // 2011-01-02 is a Sunday
        assert_eq!(at(2011, 1, 2, 0).date().weekday(), Weekday::Sun);
        let (p, inj) = expand_tariff(&Tariff::pge_etou_b(), at(2011, 1, 2, 17), 1).unwrap();
        assert_eq!(p.values(), &[0.20191]);
        assert_eq!(inj.values(), &[0.0]);
    }

    #[test]
    fn holiday_is_off_peak() {
        // 2010-11-11 is a Thursday and Veterans Day
        let t = Tariff::pge_etou_b();
        assert_eq!(t.purchase_price(at(2010, 11, 11, 17)).unwrap(), 0.20191);
        assert_eq!(t.purchase_price(at(2010, 11, 10, 17)).unwrap(), 0.22071);
    }

    #[test]
    fn peak_window_edges() {
        let t = Tariff::pge_etou_b();
        assert_eq!(t.purchase_price(at(2010, 7, 7, 15)).unwrap(), 0.25511);
        assert_eq!(t.purchase_price(at(2010, 7, 7, 16)).unwrap(), 0.35817);
        assert_eq!(t.purchase_price(at(2010, 7, 7, 20)).unwrap(), 0.35817);
        assert_eq!(t.purchase_price(at(2010, 7, 7, 21)).unwrap(), 0.25511);
    }

    #[test]
    fn flat_tariff_is_constant() {
        let (p, _) = expand_tariff(&Tariff::flat(0.3), at(2010, 8, 1, 0), 24 * 9).unwrap();
        assert!(p.values().iter().all(|&v| v == 0.3));
    }

    #[test]
    fn overlapping_or_gapped_seasons_rejected() {
        let mut t = Tariff::pge_etou_b();
        t.seasons[1].range.end = MonthDay { month: 5, day: 30 };
        assert!(matches!(t.validate(), Err(Error::Config(_))));
        let mut t = Tariff::pge_etou_b();
        t.seasons[1].range.end = MonthDay { month: 6, day: 1 };
        assert!(matches!(t.validate(), Err(Error::Config(_))));
        assert!(expand_tariff(&t, at(2010, 6, 1, 0), 1).is_err());
    }

    #[test]
    fn price_invariants_rejected() {
        let mut t = Tariff::pge_etou_b();
        t.injection_price = 0.21;
        assert!(t.validate().is_err());
        let mut t = Tariff::pge_etou_b();
        t.seasons[0].peak = 0.1;
        assert!(t.validate().is_err());
    }

    #[test]
    fn json_round_trip() {
        let t = Tariff::pge_etou_b();
        let text = serde_json::to_string_pretty(&t).unwrap();
        let back: Tariff = serde_json::from_str(&text).unwrap();
        assert_eq!(t, back);
        assert!(text.contains("\"start\": \"06-01\""));
    }
}
