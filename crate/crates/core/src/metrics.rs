//! Multiplexing gain, blocking probability and blocking distributions.

use serde::{Deserialize, Serialize};

use crate::aggregate::{follow_step, CsoScenario};
use crate::battery::BatterySpec;
use crate::error::{Error, Result};
use crate::series::HourlySeries;
use crate::tariff::{Calendar, DayType, SeasonKind};

/// Mismatch magnitude (kW) at or below which a step counts as unblocked.
pub const DEFAULT_ZERO_TOL: f64 = 1e-6;
pub const DEFAULT_BINS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceAllocation {
    /// `(service name, allocated capacity kWh)`.
    pub services: Vec<(String, f64)>,
    pub physical_capacity: f64,
}

impl ServiceAllocation {
    pub fn new(services: Vec<(String, f64)>, physical_capacity: f64) -> Result<Self> {
        let a = Self {
            services,
            physical_capacity,
        };
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<()> {
        if self.services.is_empty() {
            return Err(Error::Domain("allocation needs at least one service".into()));
        }
        if let Some((name, c)) = self.services.iter().find(|(_, c)| !(c.is_finite() && *c >= 0.0)) {
            return Err(Error::Domain(format!("allocation of service {name} must be >= 0, got {c}")));
        }
        if !(self.physical_capacity.is_finite() && self.physical_capacity >= 0.0) {
            return Err(Error::Domain(format!(
                "physical capacity must be >= 0, got {}",
                self.physical_capacity
            )));
        }
        Ok(())
    }

    pub fn total_allocated(&self) -> f64 {
        self.services.iter().map(|(_, c)| c).sum()
    }
}

/// `(sum of allocations - physical) / sum of allocations`.
pub fn multiplexing_gain(alloc: &ServiceAllocation) -> Result<f64> {
    alloc.validate()?;
    let total = alloc.total_allocated();
    if total <= 0.0 {
        return Err(Error::Domain("total allocated capacity is zero".into()));
    }
    Ok((total - alloc.physical_capacity) / total)
}

/// Gain of a single Cloud Storage service with `virtual_capacity` sold on
/// `physical_capacity`.
pub fn cloud_storage_gain(virtual_capacity: f64, physical_capacity: f64) -> Result<f64> {
    multiplexing_gain(&ServiceAllocation::new(
        vec![("cloud_storage".into(), virtual_capacity)],
        physical_capacity,
    )?)
}

/// Fraction of steps with `|mismatch| > zero_tol`.
pub fn blocking_probability(mismatch: &HourlySeries, zero_tol: f64) -> Result<f64> {
    if !(zero_tol >= 0.0) {
        return Err(Error::Domain(format!("zero tolerance must be >= 0, got {zero_tol}")));
    }
    if mismatch.is_empty() {
        return Err(Error::Domain("blocking probability of an empty series".into()));
    }
    let blocked = mismatch.values().iter().filter(|m| m.abs() > zero_tol).count();
    Ok(blocked as f64 / mismatch.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionStats {
    pub hours: usize,
    pub probability: f64,
    pub mean: f64,
    pub std: f64,
    /// First bin is the zero bin `[0, 0]`, counting steps within the zero
    /// tolerance. The rest are uniform over the range of blocked values.
    pub histogram: Vec<HistogramBin>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceStats {
    pub season: SeasonKind,
    pub day_type: DayType,
    #[serde(flatten)]
    pub stats: DistributionStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockingStats {
    #[serde(flatten)]
    pub overall: DistributionStats,
    pub by_slice: Vec<SliceStats>,
}

impl BlockingStats {
    pub fn probability(&self) -> f64 {
        self.overall.probability
    }

    pub fn slice(&self, season: SeasonKind, day_type: DayType) -> Option<&DistributionStats> {
        self.by_slice
            .iter()
            .find(|s| s.season == season && s.day_type == day_type)
            .map(|s| &s.stats)
    }

    /// Overall histogram as CSV `lower_kw,upper_kw,count`.
    pub fn write_histogram_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["lower_kw", "upper_kw", "count"])?;
        for b in &self.overall.histogram {
            w.write_record([b.lower.to_string(), b.upper.to_string(), b.count.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

struct Binning {
    lo: f64,
    width: f64,
    bins: usize,
}

impl Binning {
    fn new(values: &[f64], zero_tol: f64, bins: usize) -> Self {
        let blocked = values.iter().filter(|v| v.abs() > zero_tol);
        let (lo, hi) = blocked.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        if lo > hi {
            return Self { lo: 0.0, width: 0.0, bins: 0 };
        }
        Self {
            lo,
            width: (hi - lo) / bins as f64,
            bins,
        }
    }

    fn index(&self, v: f64) -> usize {
        if self.width <= 0.0 {
            return 0;
        }
        (((v - self.lo) / self.width) as usize).min(self.bins - 1)
    }

    fn empty_histogram(&self) -> Vec<HistogramBin> {
        let mut h = vec![HistogramBin {
            lower: 0.0,
            upper: 0.0,
            count: 0,
        }];
        // A single blocked value collapses to one bin.
        let n = if self.width > 0.0 { self.bins } else { self.bins.min(1) };
        h.extend((0..n).map(|i| HistogramBin {
            lower: self.lo + i as f64 * self.width,
            upper: if i + 1 == n && self.width > 0.0 {
                self.lo + self.bins as f64 * self.width
            } else {
                self.lo + (i + 1) as f64 * self.width
            },
            count: 0,
        }));
        h
    }
}

fn describe<'a>(values: impl Iterator<Item = &'a f64> + Clone, binning: &Binning, zero_tol: f64) -> DistributionStats {
    let mut histogram = binning.empty_histogram();
    let (mut n, mut sum, mut blocked) = (0usize, 0.0, 0usize);
    for &v in values.clone() {
        n += 1;
        sum += v;
        if v.abs() > zero_tol {
            blocked += 1;
            histogram[1 + binning.index(v)].count += 1;
        } else {
            histogram[0].count += 1;
        }
    }
    if n == 0 {
        return DistributionStats {
            hours: 0,
            probability: 0.0,
            mean: 0.0,
            std: 0.0,
            histogram,
        };
    }
    let mean = sum / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    DistributionStats {
        hours: n,
        probability: blocked as f64 / n as f64,
        mean,
        std: var.sqrt(),
        histogram,
    }
}

/// Blocking statistics overall and per (season, day type) slice. Slice
/// histograms share the overall bin edges.
pub fn blocking_distribution(mismatch: &HourlySeries, calendar: &Calendar, zero_tol: f64, bins: usize) -> Result<BlockingStats> {
    if bins == 0 {
        return Err(Error::Domain("histogram needs at least one bin".into()));
    }
    if !(zero_tol >= 0.0) {
        return Err(Error::Domain(format!("zero tolerance must be >= 0, got {zero_tol}")));
    }
    let values = mismatch.values();
    let binning = Binning::new(values, zero_tol, bins);
    let overall = describe(values.iter(), &binning, zero_tol);
    let keys: Vec<(SeasonKind, DayType)> = mismatch
        .timestamps()
        .map(|ts| (calendar.season(ts.date()), calendar.day_type(ts.date())))
        .collect();
    let mut by_slice = Vec::with_capacity(4);
    for season in [SeasonKind::Summer, SeasonKind::Winter] {
        for day_type in [DayType::Weekday, DayType::WeekendHoliday] {
            let sel = values
                .iter()
                .zip(&keys)
                .filter(move |(_, k)| **k == (season, day_type))
                .map(|(v, _)| v);
            by_slice.push(SliceStats {
                season,
                day_type,
                stats: describe(sel, &binning, zero_tol),
            });
        }
    }
    Ok(BlockingStats { overall, by_slice })
}

/// Which constraint stopped the battery from following the command.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockCauses {
    pub rate_limited: bool,
    pub full: bool,
    pub empty: bool,
}

impl BlockCauses {
    pub fn any(&self) -> bool {
        self.rate_limited || self.full || self.empty
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintBreakdown {
    pub rate_limited: usize,
    pub full: usize,
    pub empty: usize,
    /// Steps where at least one cause fired.
    pub blocked: usize,
    #[serde(skip)]
    pub per_step: Vec<BlockCauses>,
}

/// Replays the myopic projection and tags each step with every bound
/// that would push the mismatch beyond `zero_tol`. A step is blocked in
/// the projection exactly when at least one cause is tagged.
pub fn constraint_decomposition(aggregate: &HourlySeries, battery: &BatterySpec, zero_tol: f64) -> Result<ConstraintBreakdown> {
    battery.validate()?;
    let (cap, r) = (battery.capacity, battery.rate);
    let mut soc = battery.initial_soc;
    let mut per_step = Vec::with_capacity(aggregate.len());
    for &cmd in aggregate.values() {
        let step = follow_step(soc, cmd, 0.0, cap, -r, r);
        per_step.push(BlockCauses {
            rate_limited: (cmd - step.rate_clamped).abs() > zero_tol,
            full: cmd - (cap - soc) > zero_tol,
            empty: (0.0 - soc) - cmd > zero_tol,
        });
        soc += step.action;
    }
    let count = |f: fn(&BlockCauses) -> bool| per_step.iter().filter(|c| f(c)).count();
    Ok(ConstraintBreakdown {
        rate_limited: count(|c| c.rate_limited),
        full: count(|c| c.full),
        empty: count(|c| c.empty),
        blocked: count(BlockCauses::any),
        per_step,
    })
}

/// Convenience for a scenario already built for projection.
pub fn scenario_decomposition(scenario: &CsoScenario) -> Result<ConstraintBreakdown> {
    constraint_decomposition(&scenario.aggregate_command, &scenario.battery, DEFAULT_ZERO_TOL)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregate::project_follow;
    use crate::series::Unit;
    use chrono::{NaiveDate, NaiveDateTime};
    use proptest::prelude::*;

    fn t0() -> NaiveDateTime {
        NaiveDate::from_ymd_opt(2010, 7, 5).unwrap().and_hms_opt(0, 0, 0).unwrap()
    }

    fn kw(v: &[f64]) -> HourlySeries {
        HourlySeries::new(t0(), v.to_vec(), Unit::Kw).unwrap()
    }

    #[test]
    fn gain_endpoints() {
        assert_eq!(cloud_storage_gain(5970.0, 0.0).unwrap(), 1.0);
        assert_eq!(cloud_storage_gain(5970.0, 5970.0).unwrap(), 0.0);
        assert!((cloud_storage_gain(5970.0, 5730.0).unwrap() - 0.040).abs() < 0.001);
        assert!(cloud_storage_gain(0.0, 0.0).is_err());
        let two = ServiceAllocation::new(vec![("a".into(), 3.0), ("b".into(), 1.0)], 2.0).unwrap();
        assert_eq!(multiplexing_gain(&two).unwrap(), 0.5);
        assert!(ServiceAllocation::new(vec![], 1.0).is_err());
    }

    #[test]
    fn probability_examples() {
        assert_eq!(blocking_probability(&kw(&[0.0; 4]), DEFAULT_ZERO_TOL).unwrap(), 0.0);
        assert_eq!(blocking_probability(&kw(&[1.0, -2.0]), DEFAULT_ZERO_TOL).unwrap(), 1.0);
        assert_eq!(blocking_probability(&kw(&[1e-9, 2.0]), DEFAULT_ZERO_TOL).unwrap(), 0.5);
        assert!(blocking_probability(&kw(&[1.0]), -1.0).is_err());
    }

    #[test]
    fn distribution_examples() {
        let cal = Calendar::default();
        let zero = blocking_distribution(&kw(&[0.0; 48]), &cal, DEFAULT_ZERO_TOL, DEFAULT_BINS).unwrap();
        assert_eq!((zero.overall.mean, zero.overall.std), (0.0, 0.0));
        assert_eq!(zero.overall.histogram.len(), 1);
        assert_eq!(zero.overall.histogram[0].count, 48);

        let c = blocking_distribution(&kw(&[3.0; 48]), &cal, DEFAULT_ZERO_TOL, DEFAULT_BINS).unwrap();
        assert_eq!((c.overall.mean, c.overall.std), (3.0, 0.0));
        assert_eq!(c.overall.histogram[1].count, 48);
        let summer_weekday = c.slice(SeasonKind::Summer, DayType::Weekday).unwrap();
        assert_eq!(summer_weekday.hours, 48);
        assert_eq!(c.slice(SeasonKind::Winter, DayType::Weekday).unwrap().hours, 0);
    }

    #[test]
    fn decomposition_examples() {
        let empty = BatterySpec::new(10.0, 5.0, 0.0).unwrap();
        let d = constraint_decomposition(&kw(&[-1.0]), &empty, DEFAULT_ZERO_TOL).unwrap();
        assert_eq!((d.empty, d.full, d.rate_limited), (1, 0, 0));
        let mid = BatterySpec::new(100.0, 5.0, 50.0).unwrap();
        let d = constraint_decomposition(&kw(&[8.0]), &mid, DEFAULT_ZERO_TOL).unwrap();
        assert_eq!((d.empty, d.full, d.rate_limited), (0, 0, 1));
        let full = BatterySpec::new(10.0, 5.0, 9.0).unwrap();
        let d = constraint_decomposition(&kw(&[8.0]), &full, DEFAULT_ZERO_TOL).unwrap();
        assert_eq!((d.full, d.rate_limited, d.blocked), (1, 1, 1));
    }

    proptest! {
        #[test]
        fn histogram_counts_cover_horizon(v in prop::collection::vec(-100.0f64..100.0, 1..300), bins in 1usize..60) {
            let s = blocking_distribution(&kw(&v), &Calendar::default(), DEFAULT_ZERO_TOL, bins).unwrap();
            prop_assert_eq!(s.overall.histogram.iter().map(|b| b.count).sum::<usize>(), v.len());
            prop_assert!((0.0..=1.0).contains(&s.overall.probability));
            let slice_hours: usize = s.by_slice.iter().map(|x| x.stats.hours).sum();
            prop_assert_eq!(slice_hours, v.len());
        }

        #[test]
        fn decomposition_union_matches_blocking(
            agg in prop::collection::vec(-20.0f64..20.0, 1..200),
            cap in 0.0f64..60.0, frac in 0.0f64..=1.0, ratio in prop_oneof![Just(2.0), Just(4.0)],
        ) {
            let b = BatterySpec::with_ratio(cap, ratio, cap * frac).unwrap();
            let a = kw(&agg);
            let n = agg.len();
            let sc = CsoScenario::new(
                a.clone(), b,
                HourlySeries::constant(t0(), n, 0.3, Unit::UsdPerKwh).unwrap(),
                HourlySeries::zeros(t0(), n, Unit::UsdPerKwh).unwrap(), true,
            ).unwrap();
            let d = project_follow(&sc).unwrap();
            let causes = constraint_decomposition(&a, &b, DEFAULT_ZERO_TOL).unwrap();
            for (m, c) in d.mismatch.values().iter().zip(&causes.per_step) {
                prop_assert_eq!(m.abs() > DEFAULT_ZERO_TOL, c.any());
            }
            let p = blocking_probability(&d.mismatch, DEFAULT_ZERO_TOL).unwrap();
            prop_assert_eq!(p, causes.blocked as f64 / n as f64);
        }
    }
}
