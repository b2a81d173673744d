//! Household data: smart-meter ingestion, synthetic cohorts, rooftop PV
//! sizing and representative selection.

mod cluster;
mod meter;
mod solar;
mod synth;

pub use cluster::{cluster_representatives, cluster_representatives_with, ClusterParams};
pub use meter::{load_meter_csv, read_meter_csv, write_meter_csv, MeterIngest, SkipReport};
pub use solar::{clear_sky, cos_zenith};
pub use synth::{synth_cohort, AnnualKwh, CohortConfig, LoadShapeParams, RepresentativeConfig, SynthCohort, ZoneConfig};

use crate::error::{Error, Result};
use crate::household::HouseholdProfile;
use crate::series::{HourlySeries, Unit};

/// Rooftop PV output `k * irradiance` with `k` chosen so generation equals
/// consumption over the horizon.
pub fn pv_from_irradiance(profile: &HouseholdProfile, irradiance: &HourlySeries) -> Result<HourlySeries> {
    profile.load.check_aligned(irradiance)?;
    if let Some(v) = irradiance.values().iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::Domain(format!("irradiance must be >= 0, found {v}")));
    }
    let total = irradiance.sum();
    if total <= 0.0 {
        return Err(Error::Domain("irradiance sums to zero; PV cannot be sized".into()));
    }
    let k = profile.load.sum() / total;
    irradiance.with_values(irradiance.values().iter().map(|v| k * v).collect(), Unit::Kwh)
}

/// Split `n` items by `weights` with the largest-remainder rule. Ties go to
/// the earlier entry.
pub fn apportion(n: usize, weights: &[f64]) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    if weights.is_empty() || total <= 0.0 {
        return vec![0; weights.len()];
    }
    let quotas: Vec<f64> = weights.iter().map(|w| n as f64 * w / total).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut rest = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        counts[i] += 1;
        rest -= 1;
    }
    counts
}
