use std::path::Path;
use std::process::{Command, Output};

fn cloudstor(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cloudstor"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn cloudstor")
}

fn ok(dir: &Path, args: &[&str]) {
    let o = cloudstor(dir, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn pipeline_of_subcommands() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["--out", "s", "--seed", "5", "synth", "--households", "12", "--hours", "336"]);
    ok(d, &["--out", "h", "household", "--profiles", "s"]);
    ok(d, &["--out", "c", "cso", "--decisions", "h/decisions.csv", "--sweep", "--steps", "8"]);
    ok(d, &["--out", "n", "cso", "--decisions", "h/decisions.csv", "--mode", "no-external"]);
    ok(d, &["--out", "m", "metrics", "--dispatch", "c/dispatch.csv"]);
    ok(d, &["--out", "b", "bill", "--meter", "s/meter.csv"]);
    ok(
        d,
        &[
            "--out", "ms", "multiservice", "--decisions", "h/decisions.csv",
            "--capacity", "20", "--synth",
        ],
    );
    for f in [
        "s/meter.csv",
        "h/decisions.csv",
        "h/aggregate.csv",
        "c/curve.csv",
        "c/outcome.json",
        "n/outcome.json",
        "m/metrics.json",
        "m/blocking_histogram.csv",
        "b/bills.csv",
        "ms/envelope.csv",
        "ms/multiservice.json",
    ] {
        assert!(d.join(f).is_file(), "missing {f}");
    }
    let curve = std::fs::read_to_string(d.join("c/curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 1 + 9);
    let bills = std::fs::read_to_string(d.join("b/bills.csv")).unwrap();
    assert_eq!(bills.lines().count(), 1 + 12);
}

#[test]
fn synth_is_seeded() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    for (out, seed) in [("a", "3"), ("b", "3"), ("c", "4")] {
        ok(d, &["--out", out, "--seed", seed, "synth", "--households", "3", "--hours", "48"]);
    }
    let read = |p: &str| std::fs::read(d.join(p)).unwrap();
    assert_eq!(read("a/meter.csv"), read("b/meter.csv"));
    assert_ne!(read("a/meter.csv"), read("c/meter.csv"));
}

#[test]
fn config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("bad.json"), r#"{"mode":"sideways"}"#).unwrap();
    let o = cloudstor(d, &["--config", "bad.json", "validate"]);
    assert_eq!(o.status.code(), Some(2));
    let o = cloudstor(d, &["run"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn shipped_configs_validate() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["external.json", "no_external.json", "multiservice.json"] {
        let p = root.join(name);
        let o = cloudstor(&root, &["--config", p.to_str().unwrap(), "validate"]);
        assert!(o.status.success(), "{name}: {}", String::from_utf8_lossy(&o.stderr));
        assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), "ok");
    }
}

#[test]
fn bad_meter_data_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("m.csv"), "id,zone,timestamp,kwh\na,CZ03,2010-01-01T00:00:00,-2\n").unwrap();
    let o = cloudstor(d, &["bill", "--meter", "m.csv"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn run_writes_bundle() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = r#"{
        "cohort": {"synth": {"n_households": 8, "hours": 168}},
        "mode": "external",
        "sweep": {"steps": 4}
    }"#;
    std::fs::write(d.join("exp.json"), cfg).unwrap();
    ok(d, &["--config", "exp.json", "--out", "bundle", "--threads", "2", "run"]);
    for f in ["decisions.csv", "aggregate.csv", "outcome.json", "curve.csv", "metrics.json", "manifest.json"] {
        assert!(d.join("bundle").join(f).is_file(), "missing {f}");
    }
}

#[test]
fn single_household_bill() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    // Two weekday summer hours: one off-peak import, one peak export.
    std::fs::write(
        d.join("load.csv"),
        "timestamp,value,unit\n2010-08-02T15:00:00,2,kWh\n2010-08-02T16:00:00,1,kWh\n",
    )
    .unwrap();
    std::fs::write(
        d.join("pv.csv"),
        "timestamp,value,unit\n2010-08-02T15:00:00,0,kWh\n2010-08-02T16:00:00,3,kWh\n",
    )
    .unwrap();
    ok(d, &["--out", ".", "bill", "--load", "load.csv", "--pv", "pv.csv"]);
    let b: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("bill.json")).unwrap()).unwrap();
    assert_eq!(b["purchased_energy"], 2.0);
    assert_eq!(b["injected_energy"], 2.0);
}

#[test]
fn no_external_rejects_sweep() {
    let tmp = tempfile::tempdir().unwrap();
    let o = cloudstor(tmp.path(), &["cso", "--decisions", "x.csv", "--mode", "no-external", "--sweep"]);
    assert_eq!(o.status.code(), Some(2));
}
