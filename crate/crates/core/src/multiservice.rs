//! Cloud Storage sharing the physical battery with congestion management.
//!
//! Congestion management is modelled by a residual envelope: per hour a
//! state-of-charge band and a rate limit left for Cloud Storage. Congestion
//! windows come with high renewable output, when the grid needs the battery
//! to absorb energy, so the envelope lowers `soc_max` to keep charging room
//! free. Energy held above a falling `soc_max` is pushed out by a forced
//! correction and the deviation shows up as mismatch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::path::Path;

use chrono::NaiveDateTime;

use crate::aggregate::{assemble_outcome, blocking_cost, check_prices, follow_band, follow_constant, CsoOutcome};
use crate::battery::{BatterySpec, DispatchResult, DISPATCH_TOL};
use crate::costmodel::{annual_cost, CostParameters};
use crate::error::{Error, Result};
use crate::household::horizon_years;
use crate::metrics::{blocking_probability, DEFAULT_ZERO_TOL};
use crate::series::{parse_err, parse_timestamp, HourlySeries, Unit, TIMESTAMP_FORMAT};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualEnvelope {
    pub soc_min: HourlySeries,
    pub soc_max: HourlySeries,
    pub rate_limit: HourlySeries,
}

impl ResidualEnvelope {
    pub fn new(soc_min: HourlySeries, soc_max: HourlySeries, rate_limit: HourlySeries) -> Result<Self> {
        soc_min.check_aligned(&soc_max)?;
        soc_min.check_aligned(&rate_limit)?;
        Ok(Self {
            soc_min,
            soc_max,
            rate_limit,
        })
    }

    /// The whole battery, every hour.
    pub fn full(like: &HourlySeries, battery: &BatterySpec) -> Result<Self> {
        let n = like.len();
        Self::new(
            HourlySeries::zeros(like.start(), n, Unit::Kwh)?,
            HourlySeries::constant(like.start(), n, battery.capacity, Unit::Kwh)?,
            HourlySeries::constant(like.start(), n, battery.rate, Unit::Kw)?,
        )
    }

    pub fn len(&self) -> usize {
        self.soc_min.len()
    }

    pub fn is_empty(&self) -> bool {
        self.soc_min.is_empty()
    }

    /// Envelope invariants against a battery.
    pub fn validate(&self, battery: &BatterySpec) -> Result<()> {
        let tol = DISPATCH_TOL * (1.0 + battery.capacity);
        let rtol = DISPATCH_TOL * (1.0 + battery.rate);
        let rows = self
            .soc_min
            .values()
            .iter()
            .zip(self.soc_max.values())
            .zip(self.rate_limit.values());
        for (t, ((&lo, &hi), &r)) in rows.enumerate() {
            if !(lo >= -tol && lo <= hi + tol && hi <= battery.capacity + tol) {
                return Err(Error::Config(format!(
                    "envelope step {t}: need 0 <= soc_min ({lo}) <= soc_max ({hi}) <= capacity ({})",
                    battery.capacity
                )));
            }
            if !(r >= -rtol && r <= battery.rate + rtol) {
                return Err(Error::Config(format!(
                    "envelope step {t}: rate limit {r} outside [0, {}]",
                    battery.rate
                )));
            }
        }
        Ok(())
    }

    /// CSV with header `timestamp,soc_min_kwh,soc_max_kwh,rate_kw`.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["timestamp", "soc_min_kwh", "soc_max_kwh", "rate_kw"])?;
        for t in 0..self.len() {
            w.write_record([
                self.soc_min.timestamp(t).format(TIMESTAMP_FORMAT).to_string(),
                self.soc_min.values()[t].to_string(),
                self.soc_max.values()[t].to_string(),
                self.rate_limit.values()[t].to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(reader: R, origin: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        if header.iter().collect::<Vec<_>>() != ["timestamp", "soc_min_kwh", "soc_max_kwh", "rate_kw"] {
            return Err(parse_err(origin, 1, "expected header timestamp,soc_min_kwh,soc_max_kwh,rate_kw"));
        }
        let mut start: Option<NaiveDateTime> = None;
        let (mut lo, mut hi, mut rate) = (Vec::new(), Vec::new(), Vec::new());
        for (i, rec) in r.records().enumerate() {
            let line = (i + 2) as u64;
            let rec = rec?;
            if rec.len() != 4 {
                return Err(parse_err(origin, line, "expected 4 fields"));
            }
            let ts = parse_timestamp(&rec[0]).map_err(|m| parse_err(origin, line, &m))?;
            let expected = start.map(|s| s + chrono::Duration::hours(lo.len() as i64));
            match expected {
                None => start = Some(ts),
                Some(e) if e != ts => {
                    return Err(parse_err(origin, line, &format!("expected timestamp {e}, found {ts}")));
                }
                _ => {}
            }
            let num = |k: usize| -> Result<f64> {
                rec[k]
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| parse_err(origin, line, &format!("field {k}: {e}")))
            };
            lo.push(num(1)?);
            hi.push(num(2)?);
            rate.push(num(3)?);
        }
        let start = start.ok_or_else(|| parse_err(origin, 1, "envelope has no rows"))?;
        Self::new(
            HourlySeries::new(start, lo, Unit::Kwh)?,
            HourlySeries::new(start, hi, Unit::Kwh)?,
            HourlySeries::new(start, rate, Unit::Kw)?,
        )
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

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeStats {
    pub full_availability_fraction: f64,
    pub zero_availability_fraction: f64,
    pub mean_residual_fraction: f64,
}

impl EnvelopeStats {
    /// Targets for synthesis; the mean residual is an output only.
    pub fn target(full: f64, zero: f64) -> Self {
        Self {
            full_availability_fraction: full,
            zero_availability_fraction: zero,
            mean_residual_fraction: f64::NAN,
        }
    }
}

/// Share of hours with the whole battery available, with none of it, and
/// the mean residual capacity as a fraction of the battery.
pub fn envelope_stats(envelope: &ResidualEnvelope, battery: &BatterySpec) -> Result<EnvelopeStats> {
    envelope.validate(battery)?;
    if envelope.is_empty() {
        return Err(Error::Domain("envelope is empty".into()));
    }
    let n = envelope.len() as f64;
    if battery.capacity <= 0.0 {
        return Ok(EnvelopeStats {
            full_availability_fraction: 1.0,
            zero_availability_fraction: 0.0,
            mean_residual_fraction: 1.0,
        });
    }
    let tol = DISPATCH_TOL * (1.0 + battery.capacity);
    let rtol = DISPATCH_TOL * (1.0 + battery.rate);
    let (mut full, mut zero, mut sum) = (0usize, 0usize, 0.0);
    let rows = envelope
        .soc_min
        .values()
        .iter()
        .zip(envelope.soc_max.values())
        .zip(envelope.rate_limit.values());
    for ((&lo, &hi), &r) in rows {
        let residual = (hi - lo).max(0.0);
        sum += (residual / battery.capacity).min(1.0);
        if residual >= battery.capacity - tol && r >= battery.rate - rtol {
            full += 1;
        } else if residual <= tol {
            zero += 1;
        }
    }
    Ok(EnvelopeStats {
        full_availability_fraction: full as f64 / n,
        zero_availability_fraction: zero as f64 / n,
        mean_residual_fraction: sum / n,
    })
}

/// Command following inside the envelope. The envelope must be valid for
/// `battery`, and consecutive drops of `soc_max` must not exceed its rate.
pub fn project_follow_envelope(aggregate: &HourlySeries, battery: &BatterySpec, envelope: &ResidualEnvelope) -> Result<DispatchResult> {
    aggregate.check_aligned(&envelope.soc_min)?;
    envelope.validate(battery)?;
    let (lo, hi, rl) = (
        envelope.soc_min.values(),
        envelope.soc_max.values(),
        envelope.rate_limit.values(),
    );
    follow_band(aggregate, battery, |t| (lo[t], hi[t], rl[t]))
}

/// Autocorrelated lognormal wind-like series (AR(1) in log space), kW
/// normalized to a median of 1.
pub fn synth_wind_driver(start: NaiveDateTime, hours: usize, seed: u64) -> Result<HourlySeries> {
    const PHI: f64 = 0.97;
    const SIGMA: f64 = 0.6;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let innovation = (1.0 - PHI * PHI).sqrt();
    let mut z: f64 = StandardNormal.sample(&mut rng);
    let values = (0..hours)
        .map(|_| {
            let e: f64 = StandardNormal.sample(&mut rng);
            z = PHI * z + innovation * e;
            (SIGMA * z).exp()
        })
        .collect();
    HourlySeries::new(start, values, Unit::Kw)
}

/// Residual fractions of partially congested hours shrink from this value
/// toward the floor as the driver approaches the fully congested quantiles.
const PARTIAL_CEILING: f64 = 0.95;
const PARTIAL_FLOOR: f64 = 0.05;
const PARTIAL_WIDTH: f64 = 0.10;

struct EnvelopeDraft {
    /// Driver quantile of each hour in `[0, 1)`, ties broken by time.
    quantile: Vec<f64>,
    /// Hour indices sorted by descending driver.
    order: Vec<usize>,
    jitter: Vec<f64>,
    n_zero: usize,
}

impl EnvelopeDraft {
    /// `soc_max` as a fraction of capacity with `congested` hours reduced.
    fn soc_max_fraction(&self, congested: usize, ramp: f64) -> Vec<f64> {
        let n = self.quantile.len();
        let zero_q = 1.0 - self.n_zero as f64 / n as f64;
        let mut frac = vec![1.0; n];
        for (rank, &t) in self.order.iter().enumerate().take(congested) {
            frac[t] = if rank < self.n_zero {
                0.0
            } else {
                let f = ((zero_q - self.quantile[t]) / PARTIAL_WIDTH).clamp(PARTIAL_FLOOR, PARTIAL_CEILING);
                f * self.jitter[t]
            };
        }
        // Announce reductions early enough for the battery to get there.
        for t in (0..n.saturating_sub(1)).rev() {
            frac[t] = frac[t].min(frac[t + 1] + ramp);
        }
        // The horizon opens from a fully available battery.
        let mut prev = 1.0;
        for f in frac.iter_mut() {
            *f = f.max(prev - ramp);
            prev = *f;
        }
        frac
    }
}

fn full_share(frac: &[f64]) -> f64 {
    frac.iter().filter(|&&f| f >= 1.0).count() as f64 / frac.len() as f64
}

/// Stochastic envelope with congestion windows where `driver` is high.
/// The number of congested hours is calibrated so the realized full
/// availability matches the target; the highest-driver hours get zero
/// residual.
pub fn synth_envelope(battery: &BatterySpec, stats: EnvelopeStats, driver: &HourlySeries, seed: u64) -> Result<ResidualEnvelope> {
    battery.validate()?;
    let (full, zero) = (stats.full_availability_fraction, stats.zero_availability_fraction);
    if !(0.0..=1.0).contains(&full) || !(0.0..=1.0).contains(&zero) || full + zero > 1.0 + 1e-12 {
        return Err(Error::Domain(format!(
            "envelope targets need fractions in [0, 1] with full + zero <= 1 (full {full}, zero {zero})"
        )));
    }
    if let Some(v) = driver.values().iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::Domain(format!("congestion driver must be >= 0, found {v}")));
    }
    if full >= 1.0 || battery.capacity <= 0.0 {
        return ResidualEnvelope::full(driver, battery);
    }
    if battery.rate <= 0.0 {
        return Err(Error::Domain("a battery with zero rate cannot follow a varying envelope".into()));
    }
    let n = driver.len();
    let v = driver.values();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    let mut quantile = vec![0.0; n];
    for (rank, &t) in order.iter().enumerate() {
        quantile[t] = (n - 1 - rank) as f64 / n as f64;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = (0..n).map(|_| rng.random_range(0.85..=1.0)).collect();
    let n_zero = ((zero * n as f64).round() as usize).min(n);
    let draft = EnvelopeDraft {
        quantile,
        order,
        jitter,
        n_zero,
    };
    let ramp = battery.rate / battery.capacity;

    // Full share is nonincreasing in the number of congested hours.
    let (mut lo, mut hi) = (n_zero, n);
    let best_at_lo = full_share(&draft.soc_max_fraction(lo, ramp));
    if best_at_lo < full - 0.02 {
        return Err(Error::Domain(format!(
            "full availability {full} is unreachable: zero-residual windows and their ramps leave at most {best_at_lo:.3}"
        )));
    }
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if full_share(&draft.soc_max_fraction(mid, ramp)) >= full {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let pick = [lo, hi]
        .into_iter()
        .min_by(|&a, &b| {
            let da = (full_share(&draft.soc_max_fraction(a, ramp)) - full).abs();
            let db = (full_share(&draft.soc_max_fraction(b, ramp)) - full).abs();
            da.total_cmp(&db).then(a.cmp(&b))
        })
        .unwrap_or(lo);
    let frac = draft.soc_max_fraction(pick, ramp);
    let soc_max = frac.iter().map(|f| f * battery.capacity).collect();
    let rate = frac.iter().map(|f| f * battery.rate).collect();
    ResidualEnvelope::new(
        HourlySeries::zeros(driver.start(), n, Unit::Kwh)?,
        driver.with_values(soc_max, Unit::Kwh)?,
        driver.with_values(rate, Unit::Kw)?,
    )
}

/// Yearly value credited for congestion service, reported as a range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CongestionCredit {
    pub annual_low: f64,
    pub annual_high: f64,
}

impl Default for CongestionCredit {
    fn default() -> Self {
        Self {
            annual_low: 20_000.0,
            annual_high: 30_000.0,
        }
    }
}

impl CongestionCredit {
    pub fn validate(&self) -> Result<()> {
        if !(self.annual_low >= 0.0 && self.annual_low <= self.annual_high) {
            return Err(Error::Config(format!(
                "congestion credit needs 0 <= low <= high (got {}..{})",
                self.annual_low, self.annual_high
            )));
        }
        Ok(())
    }
}

/// Same battery with and without the envelope. Money over the horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiServiceOutcome {
    pub envelope: EnvelopeStats,
    /// Cloud Storage alone on the whole battery.
    pub full_availability: CsoOutcome,
    pub full_availability_p_block: f64,
    /// Cloud Storage inside the envelope.
    pub cloud_storage: CsoOutcome,
    pub p_block: f64,
    pub total_cost: f64,
    pub congestion_credit_low: f64,
    pub congestion_credit_high: f64,
    pub profit_with_credit_low: f64,
    pub profit_with_credit_high: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn multiservice_outcome(
    aggregate: &HourlySeries,
    battery: &BatterySpec,
    envelope: &ResidualEnvelope,
    buy: &HourlySeries,
    sell: &HourlySeries,
    annual_revenue: f64,
    cost_params: &CostParameters,
    credit: &CongestionCredit,
) -> Result<MultiServiceOutcome> {
    cost_params.validate()?;
    credit.validate()?;
    aggregate.check_aligned(buy)?;
    aggregate.check_aligned(sell)?;
    check_prices(buy, sell)?;
    let years = horizon_years(aggregate.len());
    let revenue = annual_revenue * years;
    let investment = annual_cost(battery.capacity, battery.rate, cost_params)? * years;

    let base = follow_constant(aggregate, battery)?;
    let base_cost = blocking_cost(&base.mismatch, buy, sell)?;
    let base_p = blocking_probability(&base.mismatch, DEFAULT_ZERO_TOL)?;

    let dispatch = project_follow_envelope(aggregate, battery, envelope)?;
    let cost = blocking_cost(&dispatch.mismatch, buy, sell)?;
    let p_block = blocking_probability(&dispatch.mismatch, DEFAULT_ZERO_TOL)?;
    let cs = assemble_outcome(*battery, Some(dispatch), revenue, investment, cost);
    let (low, high) = (credit.annual_low * years, credit.annual_high * years);
    Ok(MultiServiceOutcome {
        envelope: envelope_stats(envelope, battery)?,
        full_availability: assemble_outcome(*battery, Some(base), revenue, investment, base_cost),
        full_availability_p_block: base_p,
        p_block,
        total_cost: cs.total_cost(),
        congestion_credit_low: low,
        congestion_credit_high: high,
        profit_with_credit_low: cs.profit + low,
        profit_with_credit_high: cs.profit + high,
        cloud_storage: cs,
    })
}
