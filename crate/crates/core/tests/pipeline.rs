use std::collections::BTreeMap;
use std::fs;

use cloudstor_core::data::{synth_cohort, write_meter_csv, CohortConfig};
use cloudstor_core::experiment::{execute, CohortSource, EnvelopeSource, ExperimentConfig, MeterSource, Mode};

fn cohort() -> CohortConfig {
    CohortConfig {
        n_households: 40,
        hours: 24 * 21,
        ..CohortConfig::default()
    }
}

fn config(json: &str) -> ExperimentConfig {
    ExperimentConfig::from_json(json, std::path::Path::new(".")).unwrap()
}

/// Meter and irradiance files exported from a synthetic cohort reproduce
/// the synthetic run exactly once PV is re-sized from the irradiance.
#[test]
fn csv_cohort_matches_synthetic_cohort() {
    let dir = tempfile::tempdir().unwrap();
    let raw = synth_cohort(&CohortConfig {
        zero_net_energy: false,
        ..cohort()
    })
    .unwrap();
    let mut meter = Vec::new();
    write_meter_csv(&raw.profiles, &mut meter).unwrap();
    fs::write(dir.path().join("meter.csv"), meter).unwrap();
    let mut irradiance = BTreeMap::new();
    for (zone, s) in &raw.irradiance {
        let name = format!("irr_{zone}.csv");
        s.save(&dir.path().join(&name)).unwrap();
        irradiance.insert(zone.clone(), name.into());
    }

    let mut synth = config(r#"{"cohort": {"synth": {}}, "mode": "external", "sweep": {"steps": 10}}"#);
    synth.cohort = CohortSource::Synth(cohort());
    let mut from_csv = synth.clone();
    from_csv.cohort = CohortSource::Csv(MeterSource {
        path: "meter.csv".into(),
        irradiance,
    });
    from_csv.base_dir = dir.path().to_path_buf();

    let a = execute(&synth).unwrap();
    let b = execute(&from_csv).unwrap();
    assert_eq!(a.decisions.len(), 40);
    for (x, y) in a.decisions.iter().zip(&b.decisions) {
        assert_eq!(x.id, y.id);
        assert_eq!(x.chosen, y.chosen);
    }
    assert_eq!(a.aggregate, b.aggregate);
    assert_eq!(a.outcome.profit, b.outcome.profit);
}

/// Re-reading the synthesized envelope from CSV gives the same outcome.
#[test]
fn envelope_csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(r#"{"cohort": {"synth": {}}, "mode": "multiservice", "capacity_kwh": 60.0, "envelope": {"synth": {"full": 0.8, "zero": 0.1}}}"#);
    c.cohort = CohortSource::Synth(cohort());
    let a = execute(&c).unwrap();
    let env = a.envelope.as_ref().unwrap();
    env.save(&dir.path().join("env.csv")).unwrap();

    let mut c2 = c.clone();
    c2.envelope = Some(EnvelopeSource::Csv { path: "env.csv".into() });
    c2.base_dir = dir.path().to_path_buf();
    let b = execute(&c2).unwrap();
    assert_eq!(b.outcome.mode, Mode::Multiservice);
    assert_eq!(a.multiservice, b.multiservice);
    let m = a.multiservice.unwrap();
    assert!(m.p_block >= m.full_availability_p_block);
}

/// Every mode on one cohort: the no-external battery never blocks and
/// is at least as large as the swept optimum.
#[test]
fn modes_on_one_cohort() {
    let mut c = config(r#"{"cohort": {"synth": {}}, "mode": "no_external"}"#);
    c.cohort = CohortSource::Synth(cohort());
    let none = execute(&c).unwrap();
    assert_eq!(none.outcome.p_block, 0.0);
    assert_eq!(none.outcome.blocking_cost, 0.0);
    c.mode = Mode::External;
    let ext = execute(&c).unwrap();
    assert!(ext.outcome.battery.capacity <= none.outcome.battery.capacity + 1e-9);
    assert!(ext.outcome.profit >= none.outcome.profit - 1e-9);
}
