//! Operator side: follow the aggregate of the households' virtual schedules
//! with one physical battery, size it, and account for profit.
//!
//! The operator may not arbitrage. Each hour it applies the aggregate
//! command to the battery and deviates only when the battery cannot
//! absorb or deliver it (rate limit, full, empty). The deviation is the
//! mismatch `command - action`: positive mismatch is surplus the operator
//! sells, negative mismatch is missing energy it buys.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::battery::{BatterySpec, DispatchResult, DISPATCH_TOL};
use crate::costmodel::{annual_cost, CostParameters, StorageRatio};
use crate::error::{Error, Result};
use crate::household::horizon_years;
use crate::metrics::{blocking_probability, cloud_storage_gain, DEFAULT_ZERO_TOL};
use crate::series::{HourlySeries, Unit};
use crate::tariff::{prices_for, Tariff};

/// Sum of virtual schedules, kW.
pub fn aggregate_schedules(dispatches: &[DispatchResult]) -> Result<HourlySeries> {
    let first = dispatches
        .first()
        .ok_or_else(|| Error::Domain("cannot aggregate an empty set of schedules".into()))?;
    let mut total = vec![0.0; first.len()];
    for d in dispatches {
        first.schedule.check_aligned(&d.schedule)?;
        for (acc, a) in total.iter_mut().zip(d.schedule.values()) {
            *acc += a;
        }
    }
    first.schedule.with_values(total, Unit::Kw)
}

/// Initial state of charge that lets a battery follow `aggregate` without
/// ever going negative: the depth of the lowest cumulative dip.
pub fn ideal_initial_soc(aggregate: &HourlySeries) -> f64 {
    let mut cum = 0.0_f64;
    let mut lowest = 0.0_f64;
    for a in aggregate.values() {
        cum += a;
        lowest = lowest.min(cum);
    }
    -lowest
}

/// Smallest battery at `ratio` that follows `aggregate` exactly.
pub fn min_tracking_size(aggregate: &HourlySeries, ratio: StorageRatio) -> BatterySpec {
    let mut cum = 0.0_f64;
    let (mut lowest, mut highest) = (0.0_f64, 0.0_f64);
    let mut peak_rate = 0.0_f64;
    for &a in aggregate.values() {
        cum += a;
        lowest = lowest.min(cum);
        highest = highest.max(cum);
        peak_rate = peak_rate.max(a.abs());
    }
    let energy = highest - lowest;
    let capacity = energy.max(ratio.hours() * peak_rate);
    BatterySpec {
        capacity,
        rate: ratio.rate_for(capacity),
        initial_soc: -lowest,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsoScenario {
    /// Aggregate virtual command, kW.
    pub aggregate_command: HourlySeries,
    pub battery: BatterySpec,
    /// Price paid for missing energy, $/kWh.
    pub external_buy_price: HourlySeries,
    /// Price received for surplus energy, $/kWh.
    pub external_sell_price: HourlySeries,
    pub allow_external: bool,
}

impl CsoScenario {
    pub fn new(
        aggregate_command: HourlySeries,
        battery: BatterySpec,
        external_buy_price: HourlySeries,
        external_sell_price: HourlySeries,
        allow_external: bool,
    ) -> Result<Self> {
        let s = Self {
            aggregate_command,
            battery,
            external_buy_price,
            external_sell_price,
            allow_external,
        };
        s.validate()?;
        Ok(s)
    }

    /// External prices equal to the retail tariff: buy at the purchase
    /// price, sell at the injection price.
    pub fn at_retail(aggregate_command: HourlySeries, battery: BatterySpec, tariff: &Tariff, allow_external: bool) -> Result<Self> {
        let (buy, sell) = prices_for(tariff, &aggregate_command)?;
        Self::new(aggregate_command, battery, buy, sell, allow_external)
    }

    pub fn validate(&self) -> Result<()> {
        self.battery.validate()?;
        self.aggregate_command.check_aligned(&self.external_buy_price)?;
        self.aggregate_command.check_aligned(&self.external_sell_price)?;
        check_prices(&self.external_buy_price, &self.external_sell_price)
    }

    /// Storage ratio implied by the battery, if it is one of the modelled ones.
    pub fn ratio(&self) -> Option<StorageRatio> {
        StorageRatio::of(self.battery.capacity, self.battery.rate)
    }
}

pub(crate) fn check_prices(buy: &HourlySeries, sell: &HourlySeries) -> Result<()> {
    for (t, (&b, &s)) in buy.values().iter().zip(sell.values()).enumerate() {
        if b < 0.0 || s < 0.0 || b < s {
            return Err(Error::Config(format!(
                "external prices at step {t} must satisfy buy >= sell >= 0 (buy {b}, sell {s})"
            )));
        }
    }
    Ok(())
}

#[inline]
pub(crate) fn clamp(x: f64, lo: f64, hi: f64) -> f64 {
    if x < lo {
        lo
    } else if x > hi {
        hi
    } else {
        x
    }
}

/// One hour of myopic command following inside `[lo, hi]` with rate limit
/// `rate`, starting from `soc` which must already lie in the band.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct FollowStep {
    /// Command after the rate clamp alone.
    pub rate_clamped: f64,
    /// Action actually applied.
    pub action: f64,
}

#[inline]
pub(crate) fn follow_step(soc: f64, command: f64, lo: f64, hi: f64, rate_lo: f64, rate_hi: f64) -> FollowStep {
    let rate_clamped = clamp(command, rate_lo, rate_hi);
    FollowStep {
        rate_clamped,
        action: clamp(rate_clamped, lo - soc, hi - soc),
    }
}

/// Myopic projection of the aggregate command onto the battery.
pub fn project_follow(scenario: &CsoScenario) -> Result<DispatchResult> {
    scenario.validate()?;
    let b = &scenario.battery;
    let dispatch = follow_constant(&scenario.aggregate_command, b)?;
    if !scenario.allow_external {
        if let Some(t) = dispatch.mismatch.values().iter().position(|m| m.abs() > DEFAULT_ZERO_TOL) {
            return Err(Error::Infeasible(format!(
                "battery of {} kWh / {} kW cannot follow the aggregate command at step {t} \
                 (mismatch {} kW) and external resources are not allowed",
                b.capacity,
                b.rate,
                dispatch.mismatch.values()[t]
            )));
        }
        // What is left is rounding residue below the tolerance.
        let zeros = dispatch.mismatch.with_values(vec![0.0; dispatch.len()], Unit::Kw)?;
        return DispatchResult::from_parts(dispatch.schedule, dispatch.soc, zeros);
    }
    Ok(dispatch)
}

pub(crate) fn follow_constant(aggregate: &HourlySeries, b: &BatterySpec) -> Result<DispatchResult> {
    follow_band(aggregate, b, |_| (0.0, b.capacity, b.rate))
}

/// Myopic following inside a per-step band `(soc_min, soc_max, rate_limit)`.
///
/// If the state of charge starts a step above the band (or below it) it is
/// first corrected toward the band, which takes priority over the command
/// and uses the physical rate. The command is then followed with what is
/// left of the rate. Everything not applied to the command is mismatch.
pub(crate) fn follow_band(
    aggregate: &HourlySeries,
    b: &BatterySpec,
    band: impl Fn(usize) -> (f64, f64, f64),
) -> Result<DispatchResult> {
    b.validate()?;
    let n = aggregate.len();
    let (mut sched, mut soc_out, mut mismatch) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    let r = b.rate;
    let slack = DISPATCH_TOL * (1.0 + b.capacity);
    let mut soc = b.initial_soc;
    for (t, &cmd) in aggregate.values().iter().enumerate() {
        let (lo, hi, limit) = band(t);
        let forced = if soc > hi + slack {
            hi - soc
        } else if soc < lo - slack {
            lo - soc
        } else {
            0.0
        };
        if forced.abs() > r + slack {
            return Err(Error::Config(format!(
                "band at step {t} moves {} kWh in one hour, beyond the battery rate {r} kW",
                forced.abs()
            )));
        }
        let soc_c = soc + forced;
        let rate_lo = (-limit).max(-r - forced).min(0.0);
        let rate_hi = limit.min(r - forced).max(0.0);
        let step = follow_step(soc_c, cmd, lo, hi, rate_lo, rate_hi);
        let action = forced + step.action;
        soc = soc_c + step.action;
        sched.push(action);
        soc_out.push(soc);
        mismatch.push(cmd - action);
    }
    DispatchResult::from_parts(
        aggregate.with_values(sched, Unit::Kw)?,
        aggregate.with_values(soc_out, Unit::Kwh)?,
        aggregate.with_values(mismatch, Unit::Kw)?,
    )
}

/// Cost of settling mismatches externally, $:
/// `sum buy[t] * [m]^- - sell[t] * [m]^+`.
pub fn blocking_cost(mismatch: &HourlySeries, buy: &HourlySeries, sell: &HourlySeries) -> Result<f64> {
    mismatch.check_aligned(buy)?;
    mismatch.check_aligned(sell)?;
    Ok(mismatch
        .values()
        .iter()
        .zip(buy.values().iter().zip(sell.values()))
        .map(|(&m, (&b, &s))| if m < 0.0 { -b * m } else { -s * m })
        .sum())
}

/// Operator result. Money is over the simulated horizon; annual amounts
/// (contract revenue, battery cost) are prorated by `hours / 8760`, so a
/// one-year horizon reads directly in $/yr.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsoOutcome {
    pub battery: BatterySpec,
    #[serde(skip)]
    pub dispatch: Option<DispatchResult>,
    pub revenue: f64,
    pub investment: f64,
    pub blocking_cost: f64,
    pub profit: f64,
}

impl CsoOutcome {
    pub fn total_cost(&self) -> f64 {
        self.investment + self.blocking_cost
    }

    pub fn dispatch(&self) -> &DispatchResult {
        self.dispatch.as_ref().expect("outcome built without dispatch")
    }
}

/// Profit identity from given parts: `revenue - investment - blocking`.
pub fn assemble_outcome(battery: BatterySpec, dispatch: Option<DispatchResult>, revenue: f64, investment: f64, blocking_cost: f64) -> CsoOutcome {
    CsoOutcome {
        battery,
        dispatch,
        revenue,
        investment,
        blocking_cost,
        profit: revenue - investment - blocking_cost,
    }
}

/// `annual_revenue` is the yearly sum of contract fees.
pub fn cso_profit(scenario: &CsoScenario, annual_revenue: f64, cost_params: &CostParameters) -> Result<CsoOutcome> {
    cost_params.validate()?;
    let dispatch = project_follow(scenario)?;
    let years = horizon_years(scenario.aggregate_command.len());
    let blocking = blocking_cost(&dispatch.mismatch, &scenario.external_buy_price, &scenario.external_sell_price)?;
    let investment = annual_cost(scenario.battery.capacity, scenario.battery.rate, cost_params)? * years;
    Ok(assemble_outcome(
        scenario.battery,
        Some(dispatch),
        annual_revenue * years,
        investment,
        blocking,
    ))
}

/// `n_steps + 1` evenly spaced capacities from 0 to `virtual_capacity`.
pub fn default_grid(virtual_capacity: f64, n_steps: usize) -> Vec<f64> {
    let n = n_steps.max(1);
    (0..=n).map(|i| virtual_capacity * i as f64 / n as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub capacity_kwh: f64,
    pub rate_kw: f64,
    pub investment: f64,
    pub blocking_cost: f64,
    pub profit: f64,
    pub p_block: f64,
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub ratio: StorageRatio,
    pub revenue: f64,
    pub virtual_capacity: f64,
    pub points: Vec<SweepPoint>,
    /// Index of the profit maximizer (smallest capacity among ties).
    pub best: usize,
    pub best_battery: BatterySpec,
}

impl SweepResult {
    pub fn best_point(&self) -> &SweepPoint {
        &self.points[self.best]
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["capacity_kwh", "investment", "blocking_cost", "profit", "p_block", "gain"])?;
        for p in &self.points {
            w.write_record([
                p.capacity_kwh.to_string(),
                p.investment.to_string(),
                p.blocking_cost.to_string(),
                p.profit.to_string(),
                p.p_block.to_string(),
                p.gain.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Battery used at a sweep point: rate from the ratio, initial state of
/// charge at the ideal tracking offset clamped into the battery.
pub fn sweep_battery(aggregate: &HourlySeries, capacity: f64, ratio: StorageRatio) -> Result<BatterySpec> {
    BatterySpec::with_ratio(capacity, ratio.hours(), clamp(ideal_initial_soc(aggregate), 0.0, capacity))
}

/// Profit over a grid of physical capacities with external resources allowed.
#[allow(clippy::too_many_arguments)]
pub fn sweep_sizes(
    aggregate: &HourlySeries,
    annual_revenue: f64,
    virtual_capacity: f64,
    ratio: StorageRatio,
    grid: &[f64],
    cost_params: &CostParameters,
    buy: &HourlySeries,
    sell: &HourlySeries,
) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(Error::Domain("sweep grid is empty".into()));
    }
    if grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Domain("sweep grid must be sorted ascending".into()));
    }
    let tol = 1e-9 * (1.0 + virtual_capacity);
    if grid[0] < -tol || grid[grid.len() - 1] > virtual_capacity + tol {
        return Err(Error::Domain(format!("sweep grid must lie within [0, {virtual_capacity}]")));
    }
    let outcomes = grid
        .par_iter()
        .map(|&c| {
            let battery = sweep_battery(aggregate, c.max(0.0), ratio)?;
            let scenario = CsoScenario::new(aggregate.clone(), battery, buy.clone(), sell.clone(), true)?;
            let outcome = cso_profit(&scenario, annual_revenue, cost_params)?;
            let p_block = blocking_probability(&outcome.dispatch().mismatch, DEFAULT_ZERO_TOL)?;
            let gain = if virtual_capacity > 0.0 {
                cloud_storage_gain(virtual_capacity, battery.capacity)?
            } else {
                0.0
            };
            Ok((
                SweepPoint {
                    capacity_kwh: battery.capacity,
                    rate_kw: battery.rate,
                    investment: outcome.investment,
                    blocking_cost: outcome.blocking_cost,
                    profit: outcome.profit,
                    p_block,
                    gain,
                },
                battery,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    for (i, (p, _)) in outcomes.iter().enumerate() {
        if p.profit > outcomes[best].0.profit {
            best = i;
        }
    }
    let best_battery = outcomes[best].1;
    Ok(SweepResult {
        ratio,
        revenue: annual_revenue * horizon_years(aggregate.len()),
        virtual_capacity,
        points: outcomes.into_iter().map(|(p, _)| p).collect(),
        best,
        best_battery,
    })
}
