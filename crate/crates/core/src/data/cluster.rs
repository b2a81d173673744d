use std::collections::BTreeMap;

use chrono::Timelike;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::household::HouseholdProfile;
use crate::tariff::{Calendar, DayType};

use super::apportion;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterParams {
    pub max_iterations: usize,
    /// Stop when inertia changes by less than this fraction.
    pub tolerance: f64,
    /// Allowed relative gap between the selection's and the full set's
    /// mean and standard deviation of hourly load.
    pub coherence: f64,
}

impl Default for ClusterParams {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            tolerance: 1e-6,
            coherence: 0.10,
        }
    }
}

type Shape = [f64; 24];

/// Mean weekday load per hour of day, scaled to sum to one.
fn weekday_shape(p: &HouseholdProfile, calendar: &Calendar) -> Shape {
    let mut sum = [0.0; 24];
    let mut n = [0usize; 24];
    for (t, &v) in p.load.values().iter().enumerate() {
        let ts = p.load.timestamp(t);
        if calendar.day_type(ts.date()) == DayType::Weekday {
            let h = ts.hour() as usize;
            sum[h] += v;
            n[h] += 1;
        }
    }
    let mut shape = [0.0; 24];
    for h in 0..24 {
        shape[h] = if n[h] > 0 { sum[h] / n[h] as f64 } else { 0.0 };
    }
    let total: f64 = shape.iter().sum();
    if total > 0.0 {
        shape.iter_mut().for_each(|v| *v /= total);
    } else {
        shape = [1.0 / 24.0; 24];
    }
    shape
}

fn dist2(a: &Shape, b: &Shape) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &Shape, centers: &[Shape]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centers.iter().enumerate() {
        let d = dist2(x, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// Lloyd's k-means with farthest-point seeding. Returns the label of
/// each point.
fn kmeans(points: &[Shape], k: usize, params: &ClusterParams, rng: &mut ChaCha8Rng, zone: &str) -> Result<Vec<usize>> {
    use rand::Rng;
    let n = points.len();
    let k = k.min(n).max(1);
    let mut centers = vec![points[rng.random_range(0..n)]];
    while centers.len() < k {
        let far = (0..n)
            .map(|i| (i, nearest(&points[i], &centers).1))
            .fold((0, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        centers.push(points[far.0]);
    }
    let mut labels = vec![0; n];
    let mut prev = f64::INFINITY;
    for _ in 0..params.max_iterations {
        let mut inertia = 0.0;
        for (l, x) in labels.iter_mut().zip(points) {
            let (c, d) = nearest(x, &centers);
            *l = c;
            inertia += d;
        }
        let mut sums = vec![[0.0; 24]; k];
        let mut counts = vec![0usize; k];
        for (&l, x) in labels.iter().zip(points) {
            counts[l] += 1;
            sums[l].iter_mut().zip(x).for_each(|(s, v)| *s += v);
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Re-seed an empty cluster at the worst-fitted point.
                let worst = (0..n)
                    .map(|i| (i, dist2(&points[i], &centers[labels[i]])))
                    .fold((0, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
                centers[c] = points[worst.0];
                labels[worst.0] = c;
            } else {
                for h in 0..24 {
                    centers[c][h] = sums[c][h] / counts[c] as f64;
                }
            }
        }
        if inertia == 0.0 || (prev - inertia).abs() <= params.tolerance * prev {
            return Ok(labels);
        }
        prev = inertia;
    }
    Err(Error::Convergence(format!(
        "zone {zone}: {k} clusters over {n} households after {} iterations, last inertia {prev}",
        params.max_iterations
    )))
}

fn hourly_moments<'a>(profiles: impl Iterator<Item = &'a HouseholdProfile>) -> (f64, f64) {
    let (mut n, mut s, mut s2) = (0usize, 0.0, 0.0);
    for p in profiles {
        for &v in p.load.values() {
            n += 1;
            s += v;
            s2 += v * v;
        }
    }
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = s / n as f64;
    (mean, (s2 / n as f64 - mean * mean).max(0.0).sqrt())
}

/// Pick `target_n` households whose load shapes represent `profiles`:
/// cluster normalized weekday shapes within each zone, then sample each
/// cluster in proportion to its size. The selection keeps input order.
pub fn cluster_representatives(profiles: &[HouseholdProfile], clusters_per_zone: usize, target_n: usize, seed: u64) -> Result<Vec<HouseholdProfile>> {
    cluster_representatives_with(profiles, clusters_per_zone, target_n, seed, &ClusterParams::default())
}

pub fn cluster_representatives_with(
    profiles: &[HouseholdProfile],
    clusters_per_zone: usize,
    target_n: usize,
    seed: u64,
    params: &ClusterParams,
) -> Result<Vec<HouseholdProfile>> {
    if target_n > profiles.len() {
        return Err(Error::Domain(format!(
            "cannot select {target_n} representatives from {} households",
            profiles.len()
        )));
    }
    if clusters_per_zone == 0 {
        return Err(Error::Domain("clusters_per_zone must be >= 1".into()));
    }
    if target_n == profiles.len() {
        return Ok(profiles.to_vec());
    }
    let calendar = Calendar::default();
    let mut zones: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, p) in profiles.iter().enumerate() {
        zones.entry(p.climate_zone.as_str()).or_default().push(i);
    }
    let sizes: Vec<f64> = zones.values().map(|v| v.len() as f64).collect();
    let zone_targets = apportion(target_n, &sizes);
    let mut chosen = Vec::with_capacity(target_n);
    for (z, ((name, members), &want)) in zones.iter().zip(&zone_targets).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(z as u64 + 1);
        let shapes: Vec<Shape> = members.iter().map(|&i| weekday_shape(&profiles[i], &calendar)).collect();
        let labels = kmeans(&shapes, clusters_per_zone, params, &mut rng, name)?;
        let k = labels.iter().max().map_or(0, |m| m + 1);
        let mut clusters: Vec<Vec<usize>> = vec![Vec::new(); k];
        for (&l, &i) in labels.iter().zip(members) {
            clusters[l].push(i);
        }
        let weights: Vec<f64> = clusters.iter().map(|c| c.len() as f64).collect();
        for (c, take) in clusters.iter().zip(apportion(want, &weights)) {
            let take = take.min(c.len());
            chosen.extend(rand::seq::index::sample(&mut rng, c.len(), take).into_iter().map(|j| c[j]));
        }
    }
    chosen.sort_unstable();
    let selected: Vec<HouseholdProfile> = chosen.iter().map(|&i| profiles[i].clone()).collect();

    let (m_all, s_all) = hourly_moments(profiles.iter());
    let (m_sel, s_sel) = hourly_moments(selected.iter());
    let off = |a: f64, b: f64| if b > 0.0 { (a - b).abs() / b } else { a.abs() };
    if off(m_sel, m_all) > params.coherence || off(s_sel, s_all) > params.coherence {
        return Err(Error::Data(format!(
            "representatives are not coherent with the full set: mean {m_sel:.4} vs {m_all:.4}, std {s_sel:.4} vs {s_all:.4}"
        )));
    }
    Ok(selected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_cohort, CohortConfig};

    fn pool(n: usize) -> Vec<HouseholdProfile> {
        synth_cohort(&CohortConfig {
            n_households: n,
            hours: 24 * 28,
            zero_net_energy: false,
            ..CohortConfig::default()
        })
        .unwrap()
        .profiles
    }

    #[test]
    fn full_target_is_identity() {
        let p = pool(30);
        assert_eq!(cluster_representatives(&p, 5, 30, 1).unwrap(), p);
    }

    #[test]
    fn single_cluster_is_stratified_sample() {
        let p = pool(200);
        let sel = cluster_representatives(&p, 1, 50, 3).unwrap();
        assert_eq!(sel.len(), 50);
        let per_zone = |v: &[HouseholdProfile], z: &str| v.iter().filter(|x| x.climate_zone == z).count();
        assert_eq!(per_zone(&sel, "CZ03"), 20);
        assert_eq!(per_zone(&sel, "CZ12"), 18);
        assert_eq!(per_zone(&sel, "CZ13"), 12);
    }

    #[test]
    fn deterministic_selection() {
        let p = pool(300);
        let a = cluster_representatives(&p, 8, 60, 9).unwrap();
        let b = cluster_representatives(&p, 8, 60, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 60);
        let ids: Vec<&str> = a.iter().map(|x| x.id.as_str()).collect();
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        assert_eq!(ids, sorted);
    }

    #[test]
    fn too_many_requested() {
        assert!(cluster_representatives(&pool(3), 2, 4, 1).is_err());
    }

    #[test]
    fn kmeans_separates_obvious_groups() {
        let mut a = [0.0; 24];
        a[8] = 1.0;
        let mut b = [0.0; 24];
        b[19] = 1.0;
        let pts = vec![a, a, b, b, a];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = kmeans(&pts, 2, &ClusterParams::default(), &mut rng, "t").unwrap();
        assert_eq!(l[0], l[1]);
        assert_eq!(l[0], l[4]);
        assert_ne!(l[0], l[2]);
        assert_eq!(l[2], l[3]);
    }
}
