//! Clear-sky irradiance from solar geometry with random daily cloud cover.

use chrono::{Datelike, NaiveDateTime, Timelike};
use rand::Rng;

/// Cosine of the solar zenith angle at the middle of the hour starting at
/// `ts`, local solar time.
pub fn cos_zenith(latitude_deg: f64, ts: NaiveDateTime) -> f64 {
    let doy = ts.ordinal() as f64;
    let decl = 23.45_f64.to_radians() * (2.0 * std::f64::consts::PI * (284.0 + doy) / 365.0).sin();
    let hour_angle = (15.0 * (ts.hour() as f64 + 0.5 - 12.0)).to_radians();
    let lat = latitude_deg.to_radians();
    lat.sin() * decl.sin() + lat.cos() * decl.cos() * hour_angle.cos()
}

/// Normalized clear-sky output (1 at a zenith sun).
pub fn clear_sky(latitude_deg: f64, ts: NaiveDateTime) -> f64 {
    cos_zenith(latitude_deg, ts).max(0.0).powf(1.15)
}

/// Cloud parameters of a zone.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Sky {
    pub latitude_deg: f64,
    pub cloudy_day_summer: f64,
    pub cloudy_day_winter: f64,
}

/// Hourly irradiance: clear sky times a daily clearness index, with mild
/// hour-to-hour variation on cloudy days.
pub(crate) fn irradiance<R: Rng>(sky: Sky, start: NaiveDateTime, hours: usize, summer: impl Fn(NaiveDateTime) -> bool, rng: &mut R) -> Vec<f64> {
    let mut out = Vec::with_capacity(hours);
    let mut clearness = 1.0;
    let mut cloudy = false;
    for h in 0..hours {
        let ts = start + chrono::Duration::hours(h as i64);
        if h == 0 || ts.hour() == 0 {
            let p = if summer(ts) { sky.cloudy_day_summer } else { sky.cloudy_day_winter };
            cloudy = rng.random_bool(p);
            clearness = if cloudy {
                rng.random_range(0.2..0.7)
            } else {
                rng.random_range(0.85..1.0)
            };
        }
        let jitter = if cloudy { rng.random_range(0.7..1.3) } else { 1.0 };
        out.push((clear_sky(sky.latitude_deg, ts) * clearness * jitter).min(1.0));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn at(m: u32, d: u32, h: u32) -> NaiveDateTime {
        NaiveDate::from_ymd_opt(2010, m, d).unwrap().and_hms_opt(h, 0, 0).unwrap()
    }

    #[test]
    fn sun_is_up_at_noon_and_down_at_midnight() {
        assert!(clear_sky(37.8, at(6, 21, 12)) > 0.8);
        assert_eq!(clear_sky(37.8, at(6, 21, 0)), 0.0);
        assert!(clear_sky(37.8, at(12, 21, 12)) < clear_sky(37.8, at(6, 21, 12)));
    }

    #[test]
    fn solar_noon_is_symmetric() {
        let a = cos_zenith(37.8, at(3, 1, 9));
        let b = cos_zenith(37.8, at(3, 1, 14));
        assert!((a - b).abs() < 1e-12);
    }
}
