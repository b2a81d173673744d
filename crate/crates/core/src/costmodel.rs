//! Large-scale battery investment cost and its annualized equivalent.
//!
//! Investment is linear in power and energy: `power_cost * rate +
//! energy_cost * capacity`. The annualization factor converts that one-off
//! cost into an equivalent yearly cost; running costs are taken as zero.
//!
//! The default factor 0.1328 is calibrated, not derived from a stated
//! lifetime and discount rate: it is the value for which a 5.73 MWh and a
//! 5.97 MWh four-hour battery annualize to about $334k/yr and $347k/yr
//! respectively. A ten-year capital recovery factor at roughly 5.7 %
//! lands in the same place (see [`capital_recovery_factor`]).

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostParameters {
    /// $/kW of power rating.
    pub power_cost: f64,
    /// $/kWh of energy capacity.
    pub energy_cost: f64,
    /// Fraction of the investment charged per year.
    pub annualization_factor: f64,
}

impl Default for CostParameters {
    fn default() -> Self {
        Self {
            power_cost: 175.0,
            energy_cost: 395.0,
            annualization_factor: 0.1328,
        }
    }
}

impl CostParameters {
    pub fn validate(&self) -> Result<()> {
        let ok = self.power_cost > 0.0
            && self.energy_cost > 0.0
            && self.annualization_factor > 0.0
            && self.annualization_factor <= 1.0
            && self.power_cost.is_finite()
            && self.energy_cost.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "cost parameters must be positive with annualization factor in (0, 1]: {self:?}"
            )))
        }
    }
}

/// Energy-to-power ratio (hours of storage at full rate). Only two- and
/// four-hour batteries are modelled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum StorageRatio {
    TwoHour,
    FourHour,
}

impl StorageRatio {
    pub const ALL: [StorageRatio; 2] = [StorageRatio::TwoHour, StorageRatio::FourHour];

    pub fn hours(self) -> f64 {
        match self {
            StorageRatio::TwoHour => 2.0,
            StorageRatio::FourHour => 4.0,
        }
    }

    pub fn rate_for(self, capacity: f64) -> f64 {
        capacity / self.hours()
    }

    /// Classify a (capacity, rate) pair, if it matches one of the ratios.
    pub fn of(capacity: f64, rate: f64) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|r| (r.rate_for(capacity) - rate).abs() <= 1e-9 * (1.0 + rate.abs()))
    }
}

impl TryFrom<u32> for StorageRatio {
    type Error = Error;

    fn try_from(h: u32) -> Result<Self> {
        match h {
            2 => Ok(StorageRatio::TwoHour),
            4 => Ok(StorageRatio::FourHour),
            other => Err(Error::Config(format!("unsupported energy/power ratio {other} (supported: 2, 4)"))),
        }
    }
}

impl TryFrom<f64> for StorageRatio {
    type Error = Error;

    fn try_from(h: f64) -> Result<Self> {
        if h == 2.0 {
            Ok(StorageRatio::TwoHour)
        } else if h == 4.0 {
            Ok(StorageRatio::FourHour)
        } else {
            Err(Error::Config(format!("unsupported energy/power ratio {h} (supported: 2, 4)")))
        }
    }
}

impl From<StorageRatio> for u32 {
    fn from(r: StorageRatio) -> u32 {
        r.hours() as u32
    }
}

impl fmt::Display for StorageRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", u32::from(*self))
    }
}

/// One-off investment, $.
pub fn capex(capacity: f64, rate: f64, params: &CostParameters) -> Result<f64> {
    if !(capacity >= 0.0) || !(rate >= 0.0) {
        return Err(Error::Domain(format!(
            "capex needs capacity and rate >= 0 (got {capacity} kWh, {rate} kW)"
        )));
    }
    Ok(params.power_cost * rate + params.energy_cost * capacity)
}

/// Equivalent annual cost of an investment, $/yr.
pub fn annualize(capex: f64, params: &CostParameters) -> Result<f64> {
    if !(capex >= 0.0) {
        return Err(Error::Domain(format!("capex must be >= 0, got {capex}")));
    }
    Ok(capex * params.annualization_factor)
}

/// Annualized cost of a battery, $/yr.
pub fn annual_cost(capacity: f64, rate: f64, params: &CostParameters) -> Result<f64> {
    annualize(capex(capacity, rate, params)?, params)
}

/// Yearly fee for a virtual battery of `capacity`: what the same battery
/// would cost per year at large-scale battery prices.
pub fn contract_price(capacity: f64, ratio: StorageRatio, params: &CostParameters) -> Result<f64> {
    annual_cost(capacity, ratio.rate_for(capacity), params)
}

/// Capital recovery factor for `years` at `discount_rate`.
pub fn capital_recovery_factor(discount_rate: f64, years: u32) -> f64 {
    if years == 0 {
        return 1.0;
    }
    if discount_rate == 0.0 {
        return 1.0 / years as f64;
    }
    let g = (1.0 + discount_rate).powi(years as i32);
    discount_rate * g / (g - 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn capex_by_hand() {
        let p = CostParameters::default();
        // 175 * 1492.5 + 395 * 5970 = 261187.5 + 2358150
        assert_eq!(capex(5970.0, 1492.5, &p).unwrap(), 2_619_337.5);
        // 175 * 1432.5 + 395 * 5730 = 250687.5 + 2263350
        assert_eq!(capex(5730.0, 1432.5, &p).unwrap(), 2_514_037.5);
        assert_eq!(capex(0.0, 0.0, &p).unwrap(), 0.0);
        assert!(capex(-1.0, 0.0, &p).is_err());
    }

    #[test]
    fn annualized_values() {
        let p = CostParameters::default();
        let a = annualize(2_619_337.5, &p).unwrap();
        assert!((a - 347_000.0).abs() / 347_000.0 < 0.01, "{a}");
        let b = annualize(2_514_037.5, &p).unwrap();
        assert!((b - 334_000.0).abs() / 334_000.0 < 0.01, "{b}");
        assert_eq!(annualize(0.0, &p).unwrap(), 0.0);
    }

    #[test]
    fn contract_prices() {
        let p = CostParameters::default();
        let q = contract_price(10.0, StorageRatio::FourHour, &p).unwrap();
        // (395 * 10 + 175 * 2.5) * 0.1328
        assert!((q - 582.66).abs() < 1e-9, "{q}");
        assert_eq!(contract_price(0.0, StorageRatio::TwoHour, &p).unwrap(), 0.0);
        assert!(StorageRatio::try_from(3u32).is_err());
        assert!(StorageRatio::try_from(3.0).is_err());
    }

    #[test]
    fn revenue_of_adoption_table_equals_battery_cost() {
        let p = CostParameters::default();
        let adopted = [(10.0, 537), (20.0, 27), (30.0, 2)];
        let revenue: f64 = adopted
            .iter()
            .map(|&(c, n)| n as f64 * contract_price(c, StorageRatio::FourHour, &p).unwrap())
            .sum();
        let total: f64 = adopted.iter().map(|&(c, n)| n as f64 * c).sum();
        assert_eq!(total, 5970.0);
        let battery = contract_price(total, StorageRatio::FourHour, &p).unwrap();
        assert!((revenue - battery).abs() < 1e-6 * battery);
        assert!((revenue - 347_000.0).abs() / 347_000.0 < 0.01);
    }

    #[test]
    fn crf_near_default_factor() {
        let crf = capital_recovery_factor(0.057, 10);
        assert!((crf - 0.1328).abs() < 0.002, "{crf}");
        assert_eq!(capital_recovery_factor(0.0, 10), 0.1);
    }

    #[test]
    fn ratio_serde() {
        assert_eq!(serde_json::to_string(&StorageRatio::FourHour).unwrap(), "4");
        assert!(serde_json::from_str::<StorageRatio>("3").is_err());
        assert_eq!(StorageRatio::of(10.0, 5.0), Some(StorageRatio::TwoHour));
        assert_eq!(StorageRatio::of(10.0, 3.0), None);
    }

    proptest! {
        #[test]
        fn capex_is_linear(c in 0.0f64..1e5, r in 0.0f64..1e5, k in 0.0f64..10.0) {
            let p = CostParameters::default();
            let lhs = capex(k * c, k * r, &p).unwrap();
            let rhs = k * capex(c, r, &p).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + rhs.abs()));
        }

        #[test]
        fn contract_revenue_is_additive(sizes in prop::collection::vec(0.0f64..50.0, 1..30)) {
            let p = CostParameters::default();
            let total: f64 = sizes.iter().sum();
            let revenue: f64 = sizes.iter().map(|&c| contract_price(c, StorageRatio::FourHour, &p).unwrap()).sum();
            let whole = contract_price(total, StorageRatio::FourHour, &p).unwrap();
            prop_assert!((revenue - whole).abs() <= 1e-9 * (1.0 + whole));
        }
    }
}
