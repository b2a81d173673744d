//! End-to-end experiment: cohort, household decisions, operator battery,
//! metrics and (optionally) congestion-management envelope, written as a
//! report bundle of CSV and JSON files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregate::{
    aggregate_schedules, cso_profit, default_grid, min_tracking_size, sweep_battery,
    sweep_sizes, CsoScenario, SweepResult,
};
use crate::battery::{BatterySpec, DispatchResult};
use crate::costmodel::{CostParameters, StorageRatio};
use crate::data::{load_meter_csv, pv_from_irradiance, synth_cohort, CohortConfig};
use crate::error::{Error, Result};
use crate::household::{cohort_decisions, write_decisions_csv, ContractMenu, HouseholdDecision, HouseholdProfile, MenuFile};
use crate::metrics::{blocking_distribution, cloud_storage_gain, constraint_decomposition, BlockingStats, ConstraintBreakdown, DEFAULT_BINS, DEFAULT_ZERO_TOL};
use crate::multiservice::{multiservice_outcome, synth_envelope, synth_wind_driver, CongestionCredit, EnvelopeStats, MultiServiceOutcome, ResidualEnvelope};
use crate::series::{HourlySeries, TIMESTAMP_FORMAT};
use crate::tariff::{prices_for, Tariff};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Battery sized to follow the aggregate exactly.
    NoExternal,
    /// Smaller battery; mismatches settled at the external prices.
    External,
    /// As `External`, inside a congestion-management envelope.
    Multiservice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum CohortSource {
    Synth(CohortConfig),
    Csv(MeterSource),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeterSource {
    pub path: PathBuf,
    /// Zone name to irradiance series; when given, PV is sized for zero
    /// net energy and replaces any `pv_kwh` column.
    #[serde(default)]
    pub irradiance: BTreeMap<String, PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Number of equal steps between 0 and the total virtual capacity.
    pub steps: usize,
    /// Explicit capacities (kWh); overrides `steps`.
    pub capacities: Option<Vec<f64>>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            steps: 40,
            capacities: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvelopeSource {
    Synth { full: f64, zero: f64 },
    Csv { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub cohort: CohortSource,
    /// Tariff JSON; the built-in PG&E E-TOU-B schedule when absent.
    #[serde(default)]
    pub tariff: Option<PathBuf>,
    /// Menu JSON; 10/20/30 kWh at 2 and 4 hours priced by the cost model
    /// when absent.
    #[serde(default)]
    pub menu: Option<PathBuf>,
    #[serde(default)]
    pub cost_model: CostParameters,
    pub mode: Mode,
    #[serde(default = "default_ratio")]
    pub ratio: f64,
    /// Capacity sweep for `external` and `multiservice`; the battery is the
    /// profit maximizer.
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    /// Fixed battery for `external` and `multiservice` instead of a sweep.
    #[serde(default)]
    pub capacity_kwh: Option<f64>,
    #[serde(default)]
    pub envelope: Option<EnvelopeSource>,
    #[serde(default)]
    pub congestion_credit: CongestionCredit,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Drives every random draw of the run; replaces `cohort.synth.seed`.
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_ratio() -> f64 {
    4.0
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

fn default_seed() -> u64 {
    1
}

impl ExperimentConfig {
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self> {
        let mut c: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Validation(vec![format!("config: {e}")]))?;
        c.base_dir = base_dir.to_path_buf();
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_json(&text, &base)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_path(&self) -> PathBuf {
        self.resolve(&self.output_dir)
    }

    pub fn storage_ratio(&self) -> Result<StorageRatio> {
        StorageRatio::try_from(self.ratio)
    }

    /// Every problem found, without running anything.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let mut need_file = |field: &str, p: &Path| {
            let full = self.resolve(p);
            if !full.is_file() {
                errs.push(format!("{field}: file {} does not exist", full.display()));
                false
            } else {
                true
            }
        };
        let tariff_ok = self.tariff.as_ref().is_none_or(|p| need_file("tariff", p));
        let menu_ok = self.menu.as_ref().is_none_or(|p| need_file("menu", p));
        match &self.cohort {
            CohortSource::Csv(m) => {
                need_file("cohort.csv.path", &m.path);
                for (zone, p) in &m.irradiance {
                    need_file(&format!("cohort.csv.irradiance.{zone}"), p);
                }
            }
            CohortSource::Synth(_) => {}
        }
        if let Some(EnvelopeSource::Csv { path }) = &self.envelope {
            need_file("envelope.csv.path", path);
        }
        if let CohortSource::Synth(c) = &self.cohort {
            if let Err(e) = c.validate() {
                errs.extend(cohort_problems(e));
            }
        }
        if let Err(e) = self.storage_ratio() {
            errs.push(format!("ratio: {e}"));
        }
        if let Err(e) = self.cost_model.validate() {
            errs.push(format!("cost_model: {e}"));
        }
        if let Err(e) = self.congestion_credit.validate() {
            errs.push(format!("congestion_credit: {e}"));
        }
        if tariff_ok {
            if let Err(e) = self.tariff() {
                errs.push(format!("tariff: {e}"));
            }
        }
        if menu_ok {
            if let Err(e) = self.menu() {
                errs.push(format!("menu: {e}"));
            }
        }
        match self.mode {
            Mode::NoExternal => {
                if self.sweep.is_some() || self.capacity_kwh.is_some() {
                    errs.push("mode no_external sizes the battery itself; remove sweep and capacity_kwh".into());
                }
            }
            Mode::External | Mode::Multiservice => {
                if self.sweep.is_some() && self.capacity_kwh.is_some() {
                    errs.push("give either sweep or capacity_kwh, not both".into());
                }
                if let Some(c) = self.capacity_kwh {
                    if !(c.is_finite() && c >= 0.0) {
                        errs.push(format!("capacity_kwh must be >= 0, got {c}"));
                    }
                }
                if let Some(s) = &self.sweep {
                    match &s.capacities {
                        Some(v) if v.is_empty() => errs.push("sweep.capacities must not be empty".into()),
                        Some(v) if v.windows(2).any(|w| w[1] < w[0]) || v.iter().any(|c| !(*c >= 0.0)) => {
                            errs.push("sweep.capacities must be non-negative and ascending".into())
                        }
                        None if s.steps == 0 => errs.push("sweep.steps must be >= 1".into()),
                        _ => {}
                    }
                }
            }
        }
        match (self.mode, &self.envelope) {
            (Mode::Multiservice, None) => errs.push("mode multiservice needs an envelope".into()),
            (Mode::Multiservice, Some(EnvelopeSource::Synth { full, zero })) => {
                if !(0.0..=1.0).contains(full) || !(0.0..=1.0).contains(zero) || full + zero > 1.0 {
                    errs.push(format!("envelope.synth: need fractions in [0, 1] with full + zero <= 1 (full {full}, zero {zero})"));
                }
            }
            (Mode::NoExternal | Mode::External, Some(_)) => errs.push("envelope is only used in mode multiservice".into()),
            _ => {}
        }
        if self.output_dir.as_os_str().is_empty() {
            errs.push("output_dir must not be empty".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }

    pub fn tariff(&self) -> Result<Tariff> {
        match &self.tariff {
            Some(p) => Tariff::load(&self.resolve(p)),
            None => Ok(Tariff::pge_etou_b()),
        }
    }

    pub fn menu(&self) -> Result<ContractMenu> {
        match &self.menu {
            Some(p) => ContractMenu::load(&self.resolve(p), &self.cost_model),
            None => MenuFile::default().build(&self.cost_model),
        }
    }

    fn input_files(&self) -> Vec<PathBuf> {
        let mut v: Vec<PathBuf> = self.tariff.iter().chain(self.menu.iter()).cloned().collect();
        if let CohortSource::Csv(m) = &self.cohort {
            v.push(m.path.clone());
            v.extend(m.irradiance.values().cloned());
        }
        if let Some(EnvelopeSource::Csv { path }) = &self.envelope {
            v.push(path.clone());
        }
        v
    }
}

fn cohort_problems(e: Error) -> Vec<String> {
    match e {
        Error::Validation(v) => v.into_iter().map(|m| format!("cohort.synth: {m}")).collect(),
        other => vec![format!("cohort.synth: {other}")],
    }
}

/// Parse and check a config file, collecting every problem.
pub fn validate_config(path: &Path) -> Result<ExperimentConfig> {
    let c = ExperimentConfig::load(path)?;
    c.validate()?;
    Ok(c)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: name,
        source: Box::new(e),
    })
}

fn load_cohort(config: &ExperimentConfig) -> Result<Vec<HouseholdProfile>> {
    match &config.cohort {
        CohortSource::Synth(c) => {
            let c = CohortConfig {
                seed: config.seed,
                ..c.clone()
            };
            Ok(synth_cohort(&c)?.profiles)
        }
        CohortSource::Csv(m) => {
            let ingest = load_meter_csv(&config.resolve(&m.path))?;
            for s in &ingest.skipped {
                log::warn!("household {} skipped: {}", s.id, s.reason);
            }
            if ingest.profiles.is_empty() {
                return Err(Error::Data("meter file has no usable households".into()));
            }
            if m.irradiance.is_empty() {
                return Ok(ingest.profiles);
            }
            let mut irr = BTreeMap::new();
            for (zone, p) in &m.irradiance {
                irr.insert(zone.clone(), HourlySeries::load(&config.resolve(p))?);
            }
            ingest
                .profiles
                .into_iter()
                .map(|p| {
                    let series = irr
                        .get(&p.climate_zone)
                        .ok_or_else(|| Error::Data(format!("no irradiance for zone {} of household {}", p.climate_zone, p.id)))?;
                    let pv = pv_from_irradiance(&p, series)?;
                    p.with_pv(pv)
                })
                .collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdoptionCount {
    pub capacity_kwh: f64,
    pub rate_kw: f64,
    pub count: usize,
}

/// Households per chosen contract, null contract first.
pub fn adoption_histogram(decisions: &[HouseholdDecision]) -> Vec<AdoptionCount> {
    let mut out: Vec<AdoptionCount> = Vec::new();
    for d in decisions {
        match out
            .iter_mut()
            .find(|a| a.capacity_kwh == d.chosen.capacity && a.rate_kw == d.chosen.rate)
        {
            Some(a) => a.count += 1,
            None => out.push(AdoptionCount {
                capacity_kwh: d.chosen.capacity,
                rate_kw: d.chosen.rate,
                count: 1,
            }),
        }
    }
    out.sort_by(|a, b| a.capacity_kwh.total_cmp(&b.capacity_kwh).then(a.rate_kw.total_cmp(&b.rate_kw)));
    out
}

/// Contents of `outcome.json`. Money is over the simulated horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub mode: Mode,
    pub ratio: f64,
    pub hours: usize,
    pub households: usize,
    pub virtual_capacity_kwh: f64,
    /// Sum of the chosen contracts' annual fees, $/yr.
    pub annual_revenue: f64,
    pub battery: BatterySpec,
    pub min_tracking_battery: BatterySpec,
    pub revenue: f64,
    pub investment: f64,
    pub blocking_cost: f64,
    pub profit: f64,
    pub gain: Option<f64>,
    pub p_block: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub adoption: Vec<AdoptionCount>,
    /// Gain of the smallest battery that never blocks.
    pub gain_no_external: Option<f64>,
    pub gain: Option<f64>,
    pub blocking: BlockingStats,
    /// Only for a battery with a constant band.
    pub constraints: Option<ConstraintBreakdown>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    /// Hash of the canonical config (without `output_dir`) plus the
    /// content of every input file.
    pub config_sha256: String,
    pub inputs: Vec<ManifestFile>,
    pub outputs: Vec<ManifestFile>,
}

/// In-memory result of a run, before it is written out.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub decisions: Vec<HouseholdDecision>,
    pub aggregate: HourlySeries,
    pub buy: HourlySeries,
    pub sell: HourlySeries,
    pub dispatch: DispatchResult,
    pub outcome: RunOutcome,
    pub metrics: RunMetrics,
    pub sweep: Option<SweepResult>,
    pub envelope: Option<ResidualEnvelope>,
    pub multiservice: Option<MultiServiceOutcome>,
}

/// Execute every stage in memory.
pub fn execute(config: &ExperimentConfig) -> Result<RunResult> {
    stage("config", config.validate())?;
    let ratio = stage("config", config.storage_ratio())?;
    let tariff = stage("tariff", config.tariff())?;
    let menu = stage("menu", config.menu())?;
    let profiles = stage("cohort", load_cohort(config))?;
    log::info!("cohort: {} households", profiles.len());
    let decisions = stage("household", cohort_decisions(&profiles, &tariff, &menu))?;
    log::info!("household: {} contracts taken", decisions.iter().filter(|d| !d.chosen.is_null()).count());

    let (aggregate, buy, sell, virtual_capacity, annual_revenue, tracking) = stage("aggregate", {
        (|| {
            let schedules: Vec<DispatchResult> = decisions.iter().map(|d| d.dispatch.clone()).collect();
            let aggregate = aggregate_schedules(&schedules)?;
            let (buy, sell) = prices_for(&tariff, &aggregate)?;
            let virtual_capacity: f64 = decisions.iter().map(|d| d.chosen.capacity).sum();
            let annual_revenue: f64 = decisions.iter().map(|d| d.chosen.fee).sum();
            let tracking = min_tracking_size(&aggregate, ratio);
            Ok((aggregate, buy, sell, virtual_capacity, annual_revenue, tracking))
        })()
    })?;
    let gain_of = |c: f64| (virtual_capacity > 0.0).then(|| cloud_storage_gain(virtual_capacity, c)).transpose();

    let (battery, sweep) = stage("cso", {
        (|| match config.mode {
            Mode::NoExternal => Ok((tracking, None)),
            Mode::External | Mode::Multiservice => match config.capacity_kwh {
                Some(c) => Ok((sweep_battery(&aggregate, c, ratio)?, None)),
                None => {
                    let sc = config.sweep.clone().unwrap_or_default();
                    let grid = sc.capacities.clone().unwrap_or_else(|| default_grid(virtual_capacity, sc.steps));
                    let s = sweep_sizes(&aggregate, annual_revenue, virtual_capacity, ratio, &grid, &config.cost_model, &buy, &sell)?;
                    Ok((s.best_battery, Some(s)))
                }
            },
        })()
    })?;

    log::info!("cso: battery {:.1} kWh / {:.1} kW", battery.capacity, battery.rate);

    let (dispatch, revenue, investment, blocking, envelope, multi) = match config.mode {
        Mode::NoExternal | Mode::External => {
            let allow = config.mode == Mode::External;
            let scenario = stage("cso", CsoScenario::new(aggregate.clone(), battery, buy.clone(), sell.clone(), allow))?;
            let o = stage("cso", cso_profit(&scenario, annual_revenue, &config.cost_model))?;
            let d = o.dispatch().clone();
            (d, o.revenue, o.investment, o.blocking_cost, None, None)
        }
        Mode::Multiservice => stage("multiservice", {
            (|| {
                let env = match config.envelope.as_ref().expect("validated") {
                    EnvelopeSource::Synth { full, zero } => {
                        let driver = synth_wind_driver(aggregate.start(), aggregate.len(), config.seed)?;
                        synth_envelope(&battery, EnvelopeStats::target(*full, *zero), &driver, config.seed)?
                    }
                    EnvelopeSource::Csv { path } => ResidualEnvelope::load(&config.resolve(path))?,
                };
                let m = multiservice_outcome(
                    &aggregate,
                    &battery,
                    &env,
                    &buy,
                    &sell,
                    annual_revenue,
                    &config.cost_model,
                    &config.congestion_credit,
                )?;
                let cs = &m.cloud_storage;
                let d = cs.dispatch().clone();
                Ok((d, cs.revenue, cs.investment, cs.blocking_cost, Some(env), Some(m)))
            })()
        })?,
    };

    let (outcome, metrics) = stage("metrics", {
        (|| {
            let blocking_stats = blocking_distribution(&dispatch.mismatch, &tariff.calendar(), DEFAULT_ZERO_TOL, DEFAULT_BINS)?;
            let constraints = match config.mode {
                Mode::Multiservice => None,
                _ => Some(constraint_decomposition(&aggregate, &battery, DEFAULT_ZERO_TOL)?),
            };
            let gain = gain_of(battery.capacity)?;
            let outcome = RunOutcome {
                mode: config.mode,
                ratio: ratio.hours(),
                hours: aggregate.len(),
                households: decisions.len(),
                virtual_capacity_kwh: virtual_capacity,
                annual_revenue,
                battery,
                min_tracking_battery: tracking,
                revenue,
                investment,
                blocking_cost: blocking,
                profit: revenue - investment - blocking,
                gain,
                p_block: blocking_stats.probability(),
            };
            let metrics = RunMetrics {
                adoption: adoption_histogram(&decisions),
                gain_no_external: gain_of(tracking.capacity)?,
                gain,
                blocking: blocking_stats,
                constraints,
            };
            Ok((outcome, metrics))
        })()
    })?;

    Ok(RunResult {
        decisions,
        aggregate,
        buy,
        sell,
        dispatch,
        outcome,
        metrics,
        sweep,
        envelope,
        multiservice: multi,
    })
}

fn write_aggregate_csv<W: std::io::Write>(r: &RunResult, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "timestamp",
        "aggregate_kw",
        "schedule_kw",
        "soc_kwh",
        "mismatch_kw",
        "buy_price",
        "sell_price",
    ])?;
    for t in 0..r.aggregate.len() {
        w.write_record([
            r.aggregate.timestamp(t).format(TIMESTAMP_FORMAT).to_string(),
            r.aggregate.values()[t].to_string(),
            r.dispatch.schedule.values()[t].to_string(),
            r.dispatch.soc.values()[t].to_string(),
            r.dispatch.mismatch.values()[t].to_string(),
            r.buy.values()[t].to_string(),
            r.sell.values()[t].to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

fn to_json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_vec_pretty(v)?;
    s.push(b'\n');
    Ok(s)
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

/// Serialized report files in a fixed order.
pub fn render_bundle(config: &ExperimentConfig, r: &RunResult) -> Result<Vec<(String, Vec<u8>)>> {
    let mut files = vec![
        ("decisions.csv".to_string(), csv_bytes(|b| write_decisions_csv(&r.decisions, b))?),
        ("aggregate.csv".to_string(), csv_bytes(|b| write_aggregate_csv(r, b))?),
        ("outcome.json".to_string(), to_json(&r.outcome)?),
    ];
    if let Some(s) = &r.sweep {
        files.push(("curve.csv".into(), csv_bytes(|b| s.write_csv(b))?));
    }
    files.push(("metrics.json".into(), to_json(&r.metrics)?));
    files.push((
        "blocking_histogram.csv".into(),
        csv_bytes(|b| r.metrics.blocking.write_histogram_csv(b))?,
    ));
    if let Some(env) = &r.envelope {
        files.push(("envelope.csv".into(), csv_bytes(|b| env.write_csv(b))?));
    }
    if let Some(m) = &r.multiservice {
        files.push(("multiservice.json".into(), to_json(m)?));
    }

    // The destination does not change the results, so it is not hashed.
    let mut effective = config.clone();
    effective.output_dir = PathBuf::new();
    if let CohortSource::Synth(c) = &mut effective.cohort {
        c.seed = config.seed;
    }
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(&effective)?);
    let mut inputs = Vec::new();
    for p in config.input_files() {
        let full = config.resolve(&p);
        let bytes = fs::read(&full).map_err(|e| Error::io(&full, e))?;
        hasher.update(&bytes);
        inputs.push(ManifestFile {
            file: p.display().to_string(),
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = Manifest {
        tool: "cloudstor".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: config.seed,
        config_sha256: hex::encode(hasher.finalize()),
        inputs,
        outputs: files
            .iter()
            .map(|(f, b)| ManifestFile {
                file: f.clone(),
                sha256: sha256_hex(b),
            })
            .collect(),
    };
    files.push(("manifest.json".into(), to_json(&manifest)?));
    Ok(files)
}

/// Run the experiment and write the bundle into the output directory.
/// Files are staged in a sibling directory and moved in only when every
/// stage succeeded, so a failed run leaves no partial outputs.
pub fn run_experiment(config: &ExperimentConfig) -> Result<(RunResult, Vec<PathBuf>)> {
    let result = execute(config)?;
    let files = stage("report", render_bundle(config, &result))?;
    let out = config.output_path();
    let written = stage("report", write_bundle(&out, &files))?;
    Ok((result, written))
}

fn write_bundle(out: &Path, files: &[(String, Vec<u8>)]) -> Result<Vec<PathBuf>> {
    let name = out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into());
    let parent = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let staging = parent.join(format!(".{name}.partial"));
    let cleanup = |e: Error| {
        let _ = fs::remove_dir_all(&staging);
        e
    };
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    for (f, bytes) in files {
        let p = staging.join(f);
        fs::write(&p, bytes).map_err(|e| cleanup(Error::io(&p, e)))?;
    }
    fs::create_dir_all(out).map_err(|e| cleanup(Error::io(out, e)))?;
    let mut written = Vec::with_capacity(files.len());
    for (f, _) in files {
        let dst = out.join(f);
        fs::rename(staging.join(f), &dst).map_err(|e| cleanup(Error::io(&dst, e)))?;
        written.push(dst);
    }
    let _ = fs::remove_dir_all(&staging);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(mode: &str, extra: &str) -> String {
        format!(
            r#"{{"cohort": {{"synth": {{"n_households": 2, "hours": 72}}}}, "mode": "{mode}", "output_dir": "o"{extra}}}"#
        )
    }

    #[test]
    fn validation_collects_problems() {
        let c = ExperimentConfig::from_json(&toy("external", r#", "ratio": 3, "tariff": "missing.json""#), Path::new("/nonexistent")).unwrap();
        match c.validate() {
            Err(Error::Validation(v)) => {
                assert!(v.iter().any(|m| m.starts_with("tariff")), "{v:?}");
                assert!(v.iter().any(|m| m.starts_with("ratio")), "{v:?}");
            }
            other => panic!("{other:?}"),
        }
        let ok = ExperimentConfig::from_json(&toy("external", ""), Path::new(".")).unwrap();
        ok.validate().unwrap();
        let ms = ExperimentConfig::from_json(&toy("multiservice", ""), Path::new(".")).unwrap();
        assert!(ms.validate().is_err());
        assert!(ExperimentConfig::from_json("{", Path::new(".")).is_err());
    }

    #[test]
    fn toy_no_external_has_no_blocking() {
        let c = ExperimentConfig::from_json(&toy("no_external", ""), Path::new(".")).unwrap();
        let r = execute(&c).unwrap();
        assert_eq!(r.outcome.blocking_cost, 0.0);
        assert_eq!(r.outcome.p_block, 0.0);
        let lhs = r.outcome.profit + r.outcome.investment + r.outcome.blocking_cost;
        assert!((lhs - r.outcome.revenue).abs() <= 1e-9 * (1.0 + r.outcome.revenue.abs()));
    }

    #[test]
    fn bundle_is_deterministic_and_atomic() {
        let dir = tempfile::tempdir().unwrap();
        let text = toy("multiservice", r#", "envelope": {"synth": {"full": 0.8, "zero": 0.1}}, "sweep": {"steps": 4}"#);
        let c = ExperimentConfig::from_json(&text, dir.path()).unwrap();
        let (_, files) = run_experiment(&c).unwrap();
        let first: Vec<Vec<u8>> = files.iter().map(|p| fs::read(p).unwrap()).collect();
        let (_, again) = run_experiment(&c).unwrap();
        let second: Vec<Vec<u8>> = again.iter().map(|p| fs::read(p).unwrap()).collect();
        assert_eq!(first, second);
        assert!(files.iter().any(|p| p.ends_with("envelope.csv")));

        let bad = ExperimentConfig::from_json(
            &toy("external", r#", "output_dir": "bad", "capacity_kwh": 5.0"#).replace(r#", "output_dir": "o""#, ""),
            dir.path(),
        )
        .unwrap();
        let mut broken = bad.clone();
        broken.cohort = CohortSource::Csv(MeterSource {
            path: "nope.csv".into(),
            irradiance: BTreeMap::new(),
        });
        assert!(run_experiment(&broken).is_err());
        assert!(!dir.path().join("bad").exists());
        assert!(!dir.path().join(".bad.partial").exists());
    }
}
