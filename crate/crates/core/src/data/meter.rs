use std::collections::BTreeMap;
use std::path::Path;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::household::HouseholdProfile;
use crate::series::{parse_err, parse_timestamp, HourlySeries, Unit, TIMESTAMP_FORMAT};

/// A household dropped during ingestion and why.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipReport {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeterIngest {
    pub profiles: Vec<HouseholdProfile>,
    pub skipped: Vec<SkipReport>,
}

struct Rows {
    zone: String,
    first_line: u64,
    rows: Vec<(NaiveDateTime, f64, f64)>,
}

/// Read `id,zone,timestamp,kwh[,pv_kwh]` rows. Rows of a household may
/// come in any order. Households with missing or duplicate hours are
/// skipped and reported; malformed rows and negative energy are errors.
pub fn read_meter_csv<R: std::io::Read>(reader: R, origin: &str) -> Result<MeterIngest> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let with_pv = match header.iter().map(String::as_str).collect::<Vec<_>>()[..] {
        ["id", "zone", "timestamp", "kwh"] => false,
        ["id", "zone", "timestamp", "kwh", "pv_kwh"] => true,
        _ => return Err(parse_err(origin, 1, "expected header id,zone,timestamp,kwh[,pv_kwh]")),
    };
    let mut by_id: BTreeMap<String, Rows> = BTreeMap::new();
    for (i, rec) in r.records().enumerate() {
        let line = i as u64 + 2;
        let rec = rec.map_err(|e| parse_err(origin, line, &e.to_string()))?;
        if rec.len() != header.len() {
            return Err(parse_err(origin, line, &format!("expected {} fields, found {}", header.len(), rec.len())));
        }
        let ts = parse_timestamp(&rec[2]).map_err(|m| parse_err(origin, line, &m))?;
        let num = |k: usize, name: &str| -> Result<f64> {
            let v: f64 = rec[k]
                .parse()
                .map_err(|e| parse_err(origin, line, &format!("{name}: {e}")))?;
            if !v.is_finite() {
                return Err(parse_err(origin, line, &format!("{name} is not finite")));
            }
            if v < 0.0 {
                return Err(Error::Data(format!("{origin}:{line}: negative {name} {v} for household {}", &rec[0])));
            }
            Ok(v)
        };
        let kwh = num(3, "kwh")?;
        let pv = if with_pv { num(4, "pv_kwh")? } else { 0.0 };
        let id = rec[0].to_string();
        if id.is_empty() {
            return Err(parse_err(origin, line, "empty household id"));
        }
        let entry = by_id.entry(id.clone()).or_insert_with(|| Rows {
            zone: rec[1].to_string(),
            first_line: line,
            rows: Vec::new(),
        });
        if entry.zone != rec[1] {
            return Err(parse_err(
                origin,
                line,
                &format!("household {id} changes zone from {} (line {}) to {}", entry.zone, entry.first_line, &rec[1]),
            ));
        }
        entry.rows.push((ts, kwh, pv));
    }
    let mut profiles = Vec::new();
    let mut skipped = Vec::new();
    for (id, mut h) in by_id {
        h.rows.sort_by_key(|r| r.0);
        let start = h.rows[0].0;
        let problem = h.rows.iter().enumerate().find_map(|(k, r)| {
            let expected = start + chrono::Duration::hours(k as i64);
            (r.0 != expected).then(|| {
                if r.0 < expected {
                    format!("duplicate hour {}", r.0.format(TIMESTAMP_FORMAT))
                } else {
                    format!("missing hour {}", expected.format(TIMESTAMP_FORMAT))
                }
            })
        });
        if let Some(reason) = problem {
            log::warn!("skipping household {id}: {reason}");
            skipped.push(SkipReport { id, reason });
            continue;
        }
        let load = HourlySeries::new(start, h.rows.iter().map(|r| r.1).collect(), Unit::Kwh)?;
        let pv = HourlySeries::new(start, h.rows.iter().map(|r| r.2).collect(), Unit::Kwh)?;
        profiles.push(HouseholdProfile::new(id, load, pv, h.zone)?);
    }
    Ok(MeterIngest { profiles, skipped })
}

pub fn load_meter_csv(path: &Path) -> Result<MeterIngest> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_meter_csv(std::io::BufReader::new(f), &path.display().to_string())
}

/// Write profiles with the `pv_kwh` column.
pub fn write_meter_csv<W: std::io::Write>(profiles: &[HouseholdProfile], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["id", "zone", "timestamp", "kwh", "pv_kwh"])?;
    for p in profiles {
        for (t, (l, s)) in p.load.values().iter().zip(p.pv.values()).enumerate() {
            w.write_record([
                p.id.clone(),
                p.climate_zone.clone(),
                p.load.timestamp(t).format(TIMESTAMP_FORMAT).to_string(),
                l.to_string(),
                s.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_cohort, CohortConfig};

    #[test]
    fn two_households() {
        let csv = "id,zone,timestamp,kwh\n\
                   a,CZ03,2010-01-01T00:00:00,1.0\n\
                   b,CZ12,2010-01-01T00:00:00,2.0\n\
                   a,CZ03,2010-01-01T01:00:00,1.5\n\
                   b,CZ12,2010-01-01T01:00:00,2.5\n";
        let got = read_meter_csv(csv.as_bytes(), "mem").unwrap();
        assert_eq!(got.profiles.len(), 2);
        assert!(got.skipped.is_empty());
        assert_eq!(got.profiles[0].load.values(), &[1.0, 1.5]);
        assert_eq!(got.profiles[1].climate_zone, "CZ12");
    }

    #[test]
    fn negative_energy_is_rejected() {
        let csv = "id,zone,timestamp,kwh\na,z,2010-01-01T00:00:00,-1\n";
        assert!(matches!(read_meter_csv(csv.as_bytes(), "mem"), Err(Error::Data(_))));
    }

    #[test]
    fn malformed_row_reports_line() {
        let csv = "id,zone,timestamp,kwh\na,z,2010-01-01T00:00:00,1\na,z,nope,1\n";
        match read_meter_csv(csv.as_bytes(), "mem") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn gaps_skip_the_household() {
        let csv = "id,zone,timestamp,kwh\n\
                   a,z,2010-01-01T00:00:00,1\n\
                   a,z,2010-01-01T02:00:00,1\n\
                   b,z,2010-01-01T00:00:00,1\n";
        let got = read_meter_csv(csv.as_bytes(), "mem").unwrap();
        assert_eq!(got.profiles.len(), 1);
        assert_eq!(got.skipped[0].id, "a");
        assert!(got.skipped[0].reason.contains("missing hour"));
    }

    #[test]
    fn full_year_and_round_trip() {
        let c = synth_cohort(&CohortConfig {
            n_households: 1,
            ..CohortConfig::default()
        })
        .unwrap();
        let mut buf = Vec::new();
        write_meter_csv(&c.profiles, &mut buf).unwrap();
        let back = read_meter_csv(&buf[..], "mem").unwrap();
        assert_eq!(back.profiles.len(), 1);
        assert_eq!(back.profiles[0].len(), 8760);
        assert_eq!(back.profiles, c.profiles);
    }
}
