//! Household side: pick a virtual battery contract and operate it to
//! minimize contract fee plus electricity bill.
//!
//! Operation is solved exactly (see [`pwl`]): the household has perfect
//! hindsight over the simulated horizon, the battery starts empty and may
//! end at any state of charge. Arbitrage beyond the household's own net
//! load is allowed; excess discharge is injected at the injection price.
//!
//! Contract fees are annual. For horizons other than one year
//! (8760 h) they are prorated by `hours / 8760` so that fee and bill cover
//! the same period.

mod oracle;
mod pwl;

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::battery::DispatchResult;
use crate::billing::{bill_amount, compute_bill_with_prices};
use crate::costmodel::{contract_price, CostParameters, StorageRatio};
use crate::error::{Error, Result};
use crate::series::{HourlySeries, Unit};
use crate::tariff::{prices_for, Tariff};

pub use oracle::{dp_oracle, lattice_min_bill};

pub const HOURS_PER_YEAR: f64 = 8760.0;

/// Fraction of a year covered by `hours` steps.
pub fn horizon_years(hours: usize) -> f64 {
    hours as f64 / HOURS_PER_YEAR
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HouseholdProfile {
    pub id: String,
    /// Consumption, kWh per hour.
    pub load: HourlySeries,
    /// Rooftop PV generation, kWh per hour.
    pub pv: HourlySeries,
    pub climate_zone: String,
}

impl HouseholdProfile {
    pub fn new(id: impl Into<String>, load: HourlySeries, pv: HourlySeries, climate_zone: impl Into<String>) -> Result<Self> {
        let p = Self {
            id: id.into(),
            load,
            pv,
            climate_zone: climate_zone.into(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.load.check_aligned(&self.pv)?;
        if let Some(t) = self.load.values().iter().position(|&v| v < 0.0) {
            return Err(Error::Data(format!("household {}: negative load at step {t}", self.id)));
        }
        if let Some(t) = self.pv.values().iter().position(|&v| v < 0.0) {
            return Err(Error::Data(format!("household {}: negative pv at step {t}", self.id)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.load.len()
    }

    pub fn is_empty(&self) -> bool {
        self.load.is_empty()
    }

    /// load - pv, kWh.
    pub fn net_load(&self) -> Result<HourlySeries> {
        let n = self.load.sub(&self.pv)?;
        n.with_values(n.values().to_vec(), Unit::Kwh)
    }

    pub fn with_pv(&self, pv: HourlySeries) -> Result<Self> {
        Self::new(self.id.clone(), self.load.clone(), pv, self.climate_zone.clone())
    }
}

/// One menu line: an annual fee for a virtual battery.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContractOffer {
    /// $/yr.
    pub fee: f64,
    /// kWh.
    pub capacity: f64,
    /// kW.
    pub rate: f64,
}

impl ContractOffer {
    pub const NULL: ContractOffer = ContractOffer {
        fee: 0.0,
        capacity: 0.0,
        rate: 0.0,
    };

    pub fn is_null(&self) -> bool {
        self.capacity == 0.0 && self.rate == 0.0
    }
}

/// Contract menu. The null contract (no battery, no fee) is always
/// available and is not listed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractMenu {
    entries: Vec<ContractOffer>,
}

impl ContractMenu {
    pub fn new(entries: Vec<ContractOffer>) -> Result<Self> {
        for (i, e) in entries.iter().enumerate() {
            let finite = e.fee.is_finite() && e.capacity.is_finite() && e.rate.is_finite();
            if !finite || e.fee < 0.0 || e.capacity < 0.0 || e.rate < 0.0 {
                return Err(Error::Config(format!("menu entry {i} has negative or non-finite values: {e:?}")));
            }
            if e.is_null() {
                return Err(Error::Config(format!("menu entry {i} duplicates the implicit null contract")));
            }
            if entries[..i].iter().any(|o| o.capacity == e.capacity && o.rate == e.rate) {
                return Err(Error::Config(format!(
                    "menu lists ({} kWh, {} kW) twice",
                    e.capacity, e.rate
                )));
            }
        }
        Ok(Self { entries })
    }

    /// Every `size x ratio` combination priced at the large-battery cost.
    pub fn priced(sizes_kwh: &[f64], ratios: &[StorageRatio], params: &CostParameters) -> Result<Self> {
        let mut entries = Vec::new();
        for &c in sizes_kwh {
            for &r in ratios {
                entries.push(ContractOffer {
                    fee: contract_price(c, r, params)?,
                    capacity: c,
                    rate: r.rate_for(c),
                });
            }
        }
        Self::new(entries)
    }

    /// 10, 20 and 30 kWh at two- and four-hour ratios.
    pub fn standard(params: &CostParameters) -> Result<Self> {
        Self::priced(&[10.0, 20.0, 30.0], &StorageRatio::ALL, params)
    }

    pub fn entries(&self) -> &[ContractOffer] {
        &self.entries
    }

    pub fn load(path: &Path, params: &CostParameters) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: MenuFile =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        file.build(params)
    }
}

/// On-disk menu: either explicit entries or sizes priced by the cost model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MenuFile {
    Explicit { entries: Vec<ContractOffer> },
    Priced { sizes_kwh: Vec<f64>, ratios: Vec<StorageRatio> },
}

impl MenuFile {
    pub fn build(&self, params: &CostParameters) -> Result<ContractMenu> {
        match self {
            MenuFile::Explicit { entries } => ContractMenu::new(entries.clone()),
            MenuFile::Priced { sizes_kwh, ratios } => ContractMenu::priced(sizes_kwh, ratios, params),
        }
    }
}

impl Default for MenuFile {
    fn default() -> Self {
        MenuFile::Priced {
            sizes_kwh: vec![10.0, 20.0, 30.0],
            ratios: StorageRatio::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HouseholdDecision {
    pub id: String,
    pub chosen: ContractOffer,
    pub dispatch: DispatchResult,
    /// Bill under the chosen contract, $ over the horizon.
    pub bill: f64,
    /// Prorated fee plus bill, $ over the horizon.
    pub annual_cost: f64,
    /// Bill without any battery, $ over the horizon.
    pub baseline_bill: f64,
}

impl HouseholdDecision {
    pub fn savings(&self) -> f64 {
        self.baseline_bill - self.bill
    }

    pub fn prorated_fee(&self) -> f64 {
        self.annual_cost - self.bill
    }
}

/// Hourly prices for a profile, reused across battery sizes.
#[derive(Debug, Clone)]
pub struct PricedProfile<'a> {
    pub profile: &'a HouseholdProfile,
    net: HourlySeries,
    buy: HourlySeries,
    sell: HourlySeries,
}

impl<'a> PricedProfile<'a> {
    pub fn new(profile: &'a HouseholdProfile, tariff: &Tariff) -> Result<Self> {
        profile.validate()?;
        let net = profile.net_load()?;
        let (buy, sell) = prices_for(tariff, &net)?;
        Ok(Self {
            profile,
            net,
            buy,
            sell,
        })
    }

    pub fn baseline_bill(&self) -> f64 {
        bill_amount(self.net.values(), self.buy.values(), self.sell.values())
    }

    pub fn optimize(&self, capacity: f64, rate: f64) -> Result<(DispatchResult, f64)> {
        if !(capacity >= 0.0) || !(rate >= 0.0) || !capacity.is_finite() || !rate.is_finite() {
            return Err(Error::Infeasible(format!(
                "virtual battery needs capacity >= 0 and rate >= 0 (got {capacity} kWh, {rate} kW)"
            )));
        }
        let (actions, _) = pwl::solve(self.net.values(), self.buy.values(), self.sell.values(), capacity, rate);
        let schedule = self.net.with_values(actions, Unit::Kw)?;
        let dispatch = DispatchResult::integrate(schedule, 0.0)?;
        let net = self.net.add(&dispatch.schedule)?;
        let bill = compute_bill_with_prices(&net, &self.buy, &self.sell)?.total;
        Ok((dispatch, bill))
    }
}

/// Minimum-bill operation of a virtual battery of the given size.
pub fn optimize_operation(profile: &HouseholdProfile, tariff: &Tariff, capacity: f64, rate: f64) -> Result<(DispatchResult, f64)> {
    PricedProfile::new(profile, tariff)?.optimize(capacity, rate)
}

/// Cheapest menu entry (fee + bill); ties go to the smaller capacity, then
/// the smaller rate. The null contract always competes.
pub fn select_contract(profile: &HouseholdProfile, tariff: &Tariff, menu: &ContractMenu) -> Result<HouseholdDecision> {
    let priced = PricedProfile::new(profile, tariff)?;
    let years = horizon_years(profile.len());
    let baseline_bill = priced.baseline_bill();

    let (null_dispatch, _) = priced.optimize(0.0, 0.0)?;
    let mut best = HouseholdDecision {
        id: profile.id.clone(),
        chosen: ContractOffer::NULL,
        dispatch: null_dispatch,
        bill: baseline_bill,
        annual_cost: baseline_bill,
        baseline_bill,
    };

    let mut offers = menu.entries().to_vec();
    offers.sort_by(|a, b| a.capacity.total_cmp(&b.capacity).then(a.rate.total_cmp(&b.rate)));
    for offer in offers {
        let fee = offer.fee * years;
        // Savings can never exceed what the baseline bill leaves on the table
        // when injection is unpaid; skip hopeless offers.
        if priced.sell.values().iter().all(|&p| p == 0.0) && fee > baseline_bill {
            continue;
        }
        let (dispatch, bill) = priced.optimize(offer.capacity, offer.rate)?;
        let cost = fee + bill;
        if cost < best.annual_cost - 1e-9 * (1.0 + best.annual_cost.abs()) {
            best = HouseholdDecision {
                id: profile.id.clone(),
                chosen: offer,
                dispatch,
                bill,
                annual_cost: cost,
                baseline_bill,
            };
        }
    }
    Ok(best)
}

/// Independent per-household decisions, returned in id order.
pub fn cohort_decisions(profiles: &[HouseholdProfile], tariff: &Tariff, menu: &ContractMenu) -> Result<Vec<HouseholdDecision>> {
    let mut decisions = profiles
        .par_iter()
        .map(|p| {
            select_contract(p, tariff, menu).map_err(|e| Error::Household {
                id: p.id.clone(),
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    decisions.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(decisions)
}

/// Write decisions as `id,capacity_kwh,rate_kw,fee,bill,baseline_bill,savings`.
/// `fee` is the annual contract fee.
pub fn write_decisions_csv<W: std::io::Write>(decisions: &[HouseholdDecision], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["id", "capacity_kwh", "rate_kw", "fee", "bill", "baseline_bill", "savings"])?;
    for d in decisions {
        w.write_record([
            d.id.clone(),
            d.chosen.capacity.to_string(),
            d.chosen.rate.to_string(),
            d.chosen.fee.to_string(),
            d.bill.to_string(),
            d.baseline_bill.to_string(),
            d.savings().to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Row of a decisions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub id: String,
    pub capacity_kwh: f64,
    pub rate_kw: f64,
    pub fee: f64,
    pub bill: f64,
    pub baseline_bill: f64,
    pub savings: f64,
}

pub fn read_decisions_csv(path: &Path) -> Result<Vec<DecisionRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    })?;
    let mut out = Vec::new();
    for rec in r.deserialize() {
        let rec: DecisionRecord = rec.map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tariff::PeakWindow;
    use chrono::{NaiveDate, NaiveDateTime};
    use proptest::prelude::*;

    fn t0() -> NaiveDateTime {
        // a Monday, so both toy days are weekdays
        NaiveDate::from_ymd_opt(2010, 8, 2).unwrap().and_hms_opt(0, 0, 0).unwrap()
    }

    fn profile(load: Vec<f64>, pv: Vec<f64>) -> HouseholdProfile {
        HouseholdProfile::new(
            "h",
            HourlySeries::new(t0(), load, Unit::Kwh).unwrap(),
            HourlySeries::new(t0(), pv, Unit::Kwh).unwrap(),
            "z",
        )
        .unwrap()
    }

    fn toy_tariff() -> Tariff {
        Tariff::two_level(0.20, 0.30, PeakWindow { start: 16, end: 20 }, false)
    }

    #[test]
    fn zero_capacity_is_baseline() {
        let p = profile(vec![1.0; 48], vec![0.0; 48]);
        let (d, bill) = optimize_operation(&p, &toy_tariff(), 0.0, 0.0).unwrap();
        assert!(d.schedule.values().iter().all(|&a| a == 0.0));
        let baseline = PricedProfile::new(&p, &toy_tariff()).unwrap().baseline_bill();
        assert_eq!(bill, baseline);
    }

    #[test]
    fn flat_tariff_without_pv_does_nothing() {
        let p = profile((0..72).map(|h| 0.5 + (h % 7) as f64 * 0.3).collect(), vec![0.0; 72]);
        let tariff = Tariff::flat(0.25);
        let (d, bill) = optimize_operation(&p, &tariff, 10.0, 2.5).unwrap();
        assert!(d.schedule.values().iter().all(|&a| a == 0.0));
        let baseline = PricedProfile::new(&p, &tariff).unwrap().baseline_bill();
        assert!((bill - baseline).abs() < 1e-9);
    }

    #[test]
    fn two_day_toy_matches_lattice_oracle() {
        // Savings frozen from `lattice_min_bill` with a 0.1 kWh grid: only
        // 4 kWh of peak load per day can be displaced (injection is unpaid),
        // so each day saves 4 kWh x $0.10.
        const TOY_SAVINGS: f64 = 0.80;
        let p = profile(vec![1.0; 48], vec![0.0; 48]);
        let tariff = toy_tariff();
        let baseline = PricedProfile::new(&p, &tariff).unwrap().baseline_bill();
        let oracle = dp_oracle(&p, &tariff, 10.0, 2.5, 0.1).unwrap();
        assert!((baseline - oracle - TOY_SAVINGS).abs() < 1e-9, "{}", baseline - oracle);
        let (d, bill) = optimize_operation(&p, &tariff, 10.0, 2.5).unwrap();
        assert!((baseline - bill - TOY_SAVINGS).abs() < 1e-9, "{}", baseline - bill);
        d.check(&crate::battery::BatterySpec::empty(10.0, 2.5).unwrap()).unwrap();
    }

    #[test]
    fn oracle_edge_cases() {
        let p = profile(vec![1.0; 24], vec![0.0; 24]);
        let tariff = toy_tariff();
        let baseline = PricedProfile::new(&p, &tariff).unwrap().baseline_bill();
        assert!((dp_oracle(&p, &tariff, 0.0, 0.0, 0.1).unwrap() - baseline).abs() < 1e-9);
        assert!(dp_oracle(&p, &tariff, 10.0, 2.5, 0.0).is_err());
        let coarse = dp_oracle(&p, &tariff, 10.0, 10.0, 10.0).unwrap();
        let fine = dp_oracle(&p, &tariff, 10.0, 10.0, 0.5).unwrap();
        assert!(coarse >= fine - 1e-12);
    }

    #[test]
    fn negative_capacity_is_infeasible() {
        let p = profile(vec![1.0; 24], vec![0.0; 24]);
        assert!(matches!(optimize_operation(&p, &toy_tariff(), -1.0, 1.0), Err(Error::Infeasible(_))));
    }

    #[test]
    fn empty_household_takes_null_contract() {
        let p = profile(vec![0.0; 8760], vec![0.0; 8760]);
        let menu = ContractMenu::standard(&CostParameters::default()).unwrap();
        let d = select_contract(&p, &Tariff::pge_etou_b(), &menu).unwrap();
        assert!(d.chosen.is_null());
        assert_eq!(d.annual_cost, 0.0);
    }

    #[test]
    fn dominated_offer_is_refused() {
        let p = profile(vec![1.0; 48], vec![0.0; 48]);
        let tariff = toy_tariff();
        let baseline = PricedProfile::new(&p, &tariff).unwrap().baseline_bill();
        let fee = (baseline + 1.0) / horizon_years(48);
        let menu = ContractMenu::new(vec![ContractOffer {
            fee,
            capacity: 10.0,
            rate: 2.5,
        }])
        .unwrap();
        let d = select_contract(&p, &tariff, &menu).unwrap();
        assert!(d.chosen.is_null());
        assert_eq!(d.bill, baseline);
    }

    #[test]
    fn ties_go_to_smaller_battery() {
        // No price spread and no PV: every battery is worthless, free offers tie with null.
        let p = profile(vec![1.0; 24], vec![0.0; 24]);
        let menu = ContractMenu::new(vec![
            ContractOffer { fee: 0.0, capacity: 20.0, rate: 5.0 },
            ContractOffer { fee: 0.0, capacity: 10.0, rate: 5.0 },
        ])
        .unwrap();
        let d = select_contract(&p, &Tariff::flat(0.2), &menu).unwrap();
        assert!(d.chosen.is_null());
    }

    #[test]
    fn menu_rejects_duplicates_and_null() {
        let e = ContractOffer { fee: 1.0, capacity: 10.0, rate: 2.5 };
        assert!(ContractMenu::new(vec![e, e]).is_err());
        assert!(ContractMenu::new(vec![ContractOffer::NULL]).is_err());
        assert!(ContractMenu::new(vec![ContractOffer { fee: -1.0, ..e }]).is_err());
    }

    #[test]
    fn cohort_edge_cases() {
        let menu = ContractMenu::standard(&CostParameters::default()).unwrap();
        assert!(cohort_decisions(&[], &Tariff::pge_etou_b(), &menu).unwrap().is_empty());
        let p = profile(vec![1.0; 48], vec![0.0; 48]);
        let one = cohort_decisions(std::slice::from_ref(&p), &toy_tariff(), &menu).unwrap();
        assert_eq!(one, vec![select_contract(&p, &toy_tariff(), &menu).unwrap()]);
    }

    #[test]
    fn cohort_error_names_household() {
        let mut p = profile(vec![1.0; 48], vec![0.0; 48]);
        p.id = "bad-house".into();
        p.pv = HourlySeries::new(t0(), vec![0.0; 24], Unit::Kwh).unwrap();
        let menu = ContractMenu::standard(&CostParameters::default()).unwrap();
        let err = cohort_decisions(&[p], &toy_tariff(), &menu).unwrap_err();
        assert!(err.to_string().contains("bad-house"), "{err}");
    }

    fn random_case() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, f64, f64)> {
        (24usize..=48).prop_flat_map(|h| {
            (
                prop::collection::vec(0.0f64..3.0, h),
                prop::collection::vec(prop_oneof![Just(0.0), 0.0f64..4.0], h),
                0.0f64..8.0,
                0.5f64..4.0,
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn more_capacity_never_hurts((load, pv, c, r) in random_case(), dc in 0.0f64..4.0, dr in 0.0f64..2.0) {
            let p = profile(load, pv);
            let tariff = Tariff::pge_etou_b();
            let (_, small) = optimize_operation(&p, &tariff, c, r).unwrap();
            let (_, big) = optimize_operation(&p, &tariff, c + dc, r + dr).unwrap();
            prop_assert!(big <= small + 1e-9);
        }

        #[test]
        fn dispatch_is_feasible_and_optimal_vs_lattice((load, pv, c, r) in random_case()) {
            let p = profile(load, pv);
            let tariff = toy_tariff();
            let (d, bill) = optimize_operation(&p, &tariff, c, r).unwrap();
            d.check(&crate::battery::BatterySpec::empty(c, r).unwrap()).unwrap();
            let oracle = dp_oracle(&p, &tariff, c, r, 0.05).unwrap();
            prop_assert!(bill <= oracle + 1e-9, "continuous {bill} worse than lattice {oracle}");
        }

        #[test]
        fn clipping_discharge_at_net_load_keeps_bill((load, pv, c, r) in random_case()) {
            let p = profile(load, pv);
            let tariff = Tariff::pge_etou_b();
            let (d, bill) = optimize_operation(&p, &tariff, c, r).unwrap();
            let net = p.net_load().unwrap();
            let clipped: Vec<f64> = d.schedule.values().iter().zip(net.values())
                .map(|(&a, &n)| a.max(-n.max(0.0)))
                .collect();
            let clipped = d.schedule.with_values(clipped, Unit::Kw).unwrap();
            let rebilled = crate::billing::compute_bill(
                &crate::billing::net_demand(&p.load, &p.pv, &clipped).unwrap(), &tariff).unwrap().total;
            prop_assert!((rebilled - bill).abs() <= 1e-6 * (1.0 + bill.abs()));
        }
    }
}
