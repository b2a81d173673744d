//! Brute-force reference for the household optimizer: exhaustive dynamic
//! programming over a uniform state-of-charge lattice. Only lattice
//! actions are explored, so the result is an upper bound on the
//! continuous optimum that tightens as the step shrinks. Intended for
//! tests and small instances.

use crate::billing::step_cost;
use crate::error::{Error, Result};
use crate::tariff::{prices_for, Tariff};

use super::HouseholdProfile;

/// Optimal bill over the SoC lattice `{0, step, 2 step, ...} ∩ [0, capacity]`.
pub fn dp_oracle(profile: &HouseholdProfile, tariff: &Tariff, capacity: f64, rate: f64, soc_grid_step: f64) -> Result<f64> {
    let net = profile.net_load()?;
    let (buy, sell) = prices_for(tariff, &net)?;
    lattice_min_bill(net.values(), buy.values(), sell.values(), capacity, rate, soc_grid_step)
}

pub fn lattice_min_bill(net: &[f64], buy: &[f64], sell: &[f64], capacity: f64, rate: f64, step: f64) -> Result<f64> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::Domain(format!("grid step must be positive, got {step}")));
    }
    if capacity < 0.0 || rate < 0.0 {
        return Err(Error::Domain("capacity and rate must be >= 0".into()));
    }
    let states = (capacity / step + 1e-9).floor() as usize;
    let max_jump = (rate / step + 1e-9).floor() as usize;
    let mut value = vec![0.0_f64; states + 1];
    let mut next = vec![0.0_f64; states + 1];
    for t in (0..net.len()).rev() {
        for (k, slot) in next.iter_mut().enumerate() {
            let lo = k.saturating_sub(max_jump);
            let hi = (k + max_jump).min(states);
            let mut best = f64::INFINITY;
            for (j, v) in value.iter().enumerate().take(hi + 1).skip(lo) {
                let action = (j as f64 - k as f64) * step;
                let c = step_cost(net[t] + action, buy[t], sell[t]) + v;
                if c < best {
                    best = c;
                }
            }
            *slot = best;
        }
        std::mem::swap(&mut value, &mut next);
    }
    Ok(value[0])
}
