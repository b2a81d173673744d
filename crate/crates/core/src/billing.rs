//! Energy part of a household bill. Fixed charges and grid fees are not
//! billed here; `purchased_energy` is reported so they can be layered on.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::{HourlySeries, Unit};
use crate::tariff::{prices_for, Tariff};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BillBreakdown {
    /// Purchases minus injection credit, $.
    pub total: f64,
    /// Energy drawn from the grid, kWh.
    pub purchased_energy: f64,
    /// Energy pushed to the grid, kWh.
    pub injected_energy: f64,
    /// Net metered energy per step, kWh (positive = import).
    pub per_step_net: HourlySeries,
}

impl BillBreakdown {
    /// Recompute the total from the per-step net and the tariff.
    pub fn verify(&self, tariff: &Tariff) -> Result<()> {
        let (buy, sell) = prices_for(tariff, &self.per_step_net)?;
        let recomputed = bill_amount(self.per_step_net.values(), buy.values(), sell.values());
        if (recomputed - self.total).abs() > 1e-6 * (1.0 + self.total.abs()) {
            return Err(Error::Data(format!(
                "bill total {} does not match recomputation {recomputed}",
                self.total
            )));
        }
        Ok(())
    }
}

/// Net metered energy: load - pv + battery action.
pub fn net_demand(load: &HourlySeries, pv: &HourlySeries, battery_action: &HourlySeries) -> Result<HourlySeries> {
    let net = load.sub(pv)?.add(battery_action)?;
    net.with_values(net.values().to_vec(), Unit::Kwh)
}

pub fn compute_bill(net: &HourlySeries, tariff: &Tariff) -> Result<BillBreakdown> {
    let (buy, sell) = prices_for(tariff, net)?;
    compute_bill_with_prices(net, &buy, &sell)
}

pub fn compute_bill_with_prices(net: &HourlySeries, buy: &HourlySeries, sell: &HourlySeries) -> Result<BillBreakdown> {
    net.check_aligned(buy)?;
    net.check_aligned(sell)?;
    if !matches!(net.unit(), Unit::Kwh | Unit::Kw) {
        return Err(Error::Unit(format!("net demand must be energy, got {}", net.unit())));
    }
    let v = net.values();
    Ok(BillBreakdown {
        total: bill_amount(v, buy.values(), sell.values()),
        purchased_energy: v.iter().map(|x| x.max(0.0)).sum(),
        injected_energy: v.iter().map(|x| (-x).max(0.0)).sum(),
        per_step_net: net.with_values(v.to_vec(), Unit::Kwh)?,
    })
}

/// `sum buy[t] * net[t]^+ - sell[t] * net[t]^-`
pub fn bill_amount(net: &[f64], buy: &[f64], sell: &[f64]) -> f64 {
    net.iter()
        .zip(buy.iter().zip(sell))
        .map(|(&n, (&b, &s))| step_cost(n, b, s))
        .sum()
}

#[inline]
pub fn step_cost(net: f64, buy: f64, sell: f64) -> f64 {
    if net >= 0.0 {
        buy * net
    } else {
        sell * net
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{NaiveDate, NaiveDateTime};
    use proptest::prelude::*;

    fn t(y: i32, m: u32, d: u32, h: u32) -> NaiveDateTime {
        NaiveDate::from_ymd_opt(y, m, d).unwrap().and_hms_opt(h, 0, 0).unwrap()
    }

    fn kwh(start: NaiveDateTime, v: &[f64]) -> HourlySeries {
        HourlySeries::new(start, v.to_vec(), Unit::Kwh).unwrap()
    }

    #[test]
    fn net_demand_formula() {
        let t0 = t(2010, 8, 1, 0);
        let load = kwh(t0, &[2.0, 1.0]);
        let pv = kwh(t0, &[1.0, 3.0]);
        let act = HourlySeries::new(t0, vec![0.5, 0.0], Unit::Kw).unwrap();
        let n = net_demand(&load, &pv, &act).unwrap();
        assert_eq!(n.values(), &[1.5, -2.0]);
        assert_eq!(n.unit(), Unit::Kwh);
        let zero = HourlySeries::zeros(t0, 2, Unit::Kw).unwrap();
        assert_eq!(net_demand(&load, &pv, &zero).unwrap().values(), load.sub(&pv).unwrap().values());
        let short = kwh(t0, &[1.0]);
        assert!(matches!(net_demand(&load, &short, &act), Err(Error::Alignment(_))));
    }

    #[test]
    fn peak_purchase() {
        let b = compute_bill(&kwh(t(2010, 7, 7, 17), &[1.0]), &Tariff::pge_etou_b()).unwrap();
        assert_eq!(b.total, 0.35817);
        assert_eq!(b.purchased_energy, 1.0);
    }

    #[test]
    fn injection_earns_nothing_at_zero_price() {
        let b = compute_bill(&kwh(t(2010, 7, 7, 12), &[-5.0]), &Tariff::pge_etou_b()).unwrap();
        assert_eq!(b.total, 0.0);
        assert_eq!(b.injected_energy, 5.0);
    }

    #[test]
    fn zero_net_zero_bill() {
        let b = compute_bill(&kwh(t(2010, 8, 1, 0), &[0.0; 48]), &Tariff::pge_etou_b()).unwrap();
        assert_eq!(b.total, 0.0);
    }

    #[test]
    fn injection_credit_applies() {
        let mut tariff = Tariff::flat(0.3);
        tariff.injection_price = 0.1;
        let b = compute_bill(&kwh(t(2010, 8, 1, 0), &[2.0, -1.0]), &tariff).unwrap();
        assert!((b.total - 0.5).abs() < 1e-12);
        b.verify(&tariff).unwrap();
    }

    proptest! {
        #[test]
        fn recompute_identity(v in prop::collection::vec(-10.0f64..10.0, 1..200)) {
            let tariff = Tariff::pge_etou_b();
            let b = compute_bill(&kwh(t(2010, 9, 28, 5), &v), &tariff).unwrap();
            b.verify(&tariff).unwrap();
        }

        #[test]
        fn linear_on_positive_branch(v in prop::collection::vec(0.0f64..10.0, 1..48), i in 0usize..48, d in 0.0f64..5.0) {
            let tariff = Tariff::pge_etou_b();
            let start = t(2010, 7, 6, 0);
            let i = i % v.len();
            let base = compute_bill(&kwh(start, &v), &tariff).unwrap().total;
            let mut w = v.clone();
            w[i] += d;
            let bumped = compute_bill(&kwh(start, &w), &tariff).unwrap().total;
            let p = tariff.purchase_price(start + chrono::Duration::hours(i as i64)).unwrap();
            prop_assert!((bumped - base - p * d).abs() < 1e-9);
        }
    }
}
