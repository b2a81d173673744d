use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use cloudstor_core::aggregate::{
    aggregate_schedules, cso_profit, default_grid, min_tracking_size, sweep_battery, sweep_sizes, CsoScenario,
};
use cloudstor_core::billing::{compute_bill, net_demand};
use cloudstor_core::costmodel::{CostParameters, StorageRatio};
use cloudstor_core::data::{load_meter_csv, synth_cohort, write_meter_csv, CohortConfig};
use cloudstor_core::experiment::{adoption_histogram, run_experiment, validate_config, ExperimentConfig};
use cloudstor_core::household::{cohort_decisions, read_decisions_csv, write_decisions_csv, ContractMenu, MenuFile};
use cloudstor_core::metrics::{blocking_distribution, DEFAULT_BINS, DEFAULT_ZERO_TOL};
use cloudstor_core::multiservice::{
    multiservice_outcome, synth_envelope, synth_wind_driver, CongestionCredit, EnvelopeStats, ResidualEnvelope,
};
use cloudstor_core::tariff::prices_for;
use cloudstor_core::{DispatchResult, Error, ErrorKind, HourlySeries, Result, Tariff};

#[derive(Parser)]
#[command(name = "cloudstor", version, about = "Shared-battery (cloud storage) experiments")]
struct Cli {
    /// JSON configuration (experiment for `run`/`validate`, cohort for `synth`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random draw; overrides the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort: meter.csv plus per-zone irradiance.
    Synth(SynthArgs),
    /// Choose contracts and schedules for every household of a meter file.
    Household(HouseholdArgs),
    /// Size and run the operator battery on an aggregate schedule.
    Cso(CsoArgs),
    /// Blocking statistics of a dispatch file.
    Metrics(MetricsArgs),
    /// Run the operator battery inside a congestion-management envelope.
    Multiservice(MultiserviceArgs),
    /// Baseline bills of every household of a meter file.
    Bill(BillArgs),
    /// Run a full experiment from --config.
    Run,
    /// Check --config without running it.
    Validate,
}

#[derive(Args)]
struct SynthArgs {
    /// Number of households (overrides the configuration).
    #[arg(long)]
    households: Option<usize>,
    /// Horizon in hours (overrides the configuration).
    #[arg(long)]
    hours: Option<usize>,
}

#[derive(Args)]
struct TariffArg {
    /// Tariff JSON (default: built-in PG&E E-TOU-B).
    #[arg(long)]
    tariff: Option<PathBuf>,
}

#[derive(Args)]
struct HouseholdArgs {
    /// Meter CSV, or a directory holding `meter.csv`.
    #[arg(long, alias = "meter")]
    profiles: PathBuf,
    #[command(flatten)]
    tariff: TariffArg,
    /// Menu JSON (default: 10/20/30 kWh at 2 and 4 hours).
    #[arg(long)]
    menu: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum CsoMode {
    NoExternal,
    External,
}

#[derive(Args)]
struct CsoArgs {
    /// Household decisions; supply revenue and virtual capacity.
    #[arg(long)]
    decisions: PathBuf,
    /// Aggregate schedule (default: aggregate.csv next to the decisions).
    #[arg(long)]
    aggregate: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "external")]
    mode: CsoMode,
    #[arg(long, default_value_t = 4.0)]
    ratio: f64,
    /// Sweep capacities between 0 and the virtual capacity and keep the
    /// most profitable. Without it the battery is the minimum tracking
    /// size, or `--capacity`.
    #[arg(long)]
    sweep: bool,
    /// Sweep steps.
    #[arg(long, default_value_t = 40, requires = "sweep")]
    steps: usize,
    /// Fixed battery capacity, kWh (external mode only).
    #[arg(long, conflicts_with = "sweep")]
    capacity: Option<f64>,
    #[command(flatten)]
    tariff: TariffArg,
}

#[derive(Args)]
struct MetricsArgs {
    /// Dispatch file (timestamp,schedule_kw,soc_kwh,mismatch_kw).
    #[arg(long)]
    dispatch: PathBuf,
    #[arg(long, default_value_t = DEFAULT_ZERO_TOL)]
    zero_tol: f64,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    bins: usize,
    #[command(flatten)]
    tariff: TariffArg,
}

#[derive(Args)]
struct MultiserviceArgs {
    #[arg(long)]
    decisions: PathBuf,
    /// Aggregate schedule (default: aggregate.csv next to the decisions).
    #[arg(long)]
    aggregate: Option<PathBuf>,
    /// Physical battery capacity, kWh.
    #[arg(long)]
    capacity: f64,
    #[arg(long, default_value_t = 4.0)]
    ratio: f64,
    /// Envelope CSV (timestamp,soc_min_kwh,soc_max_kwh,rate_kw).
    #[arg(long, required_unless_present = "synth", conflicts_with = "synth")]
    envelope: Option<PathBuf>,
    /// Synthesize the envelope from a wind-like congestion driver.
    #[arg(long)]
    synth: bool,
    #[arg(long, default_value_t = 0.87)]
    full: f64,
    #[arg(long, default_value_t = 0.05)]
    zero: f64,
    #[arg(long, default_value_t = 20_000.0)]
    credit_low: f64,
    #[arg(long, default_value_t = 30_000.0)]
    credit_high: f64,
    #[command(flatten)]
    tariff: TariffArg,
}

#[derive(Args)]
struct BillArgs {
    /// Meter CSV: baseline bill of every household into bills.csv.
    #[arg(long, required_unless_present = "load", conflicts_with = "load")]
    meter: Option<PathBuf>,
    /// Single household load (timestamp,value,unit), kWh per hour.
    #[arg(long)]
    load: Option<PathBuf>,
    /// PV generation aligned with `--load` (default: none).
    #[arg(long, requires = "load")]
    pv: Option<PathBuf>,
    /// Battery action aligned with `--load`, positive = charging (default: none).
    #[arg(long, requires = "load")]
    action: Option<PathBuf>,
    #[command(flatten)]
    tariff: TariffArg,
}

fn tariff_of(arg: &TariffArg) -> Result<Tariff> {
    match &arg.tariff {
        Some(p) => Tariff::load(p),
        None => Ok(Tariff::pge_etou_b()),
    }
}

fn out_dir(cli: &Cli) -> Result<PathBuf> {
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    Ok(out)
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    let p = dir.join(name);
    fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
    println!("wrote {}", p.display());
    Ok(())
}

fn write_json<T: Serialize>(dir: &Path, name: &str, v: &T) -> Result<()> {
    let mut s = serde_json::to_vec_pretty(v)?;
    s.push(b'\n');
    write_file(dir, name, &s)
}

fn write_with(dir: &Path, name: &str, f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    write_file(dir, name, &buf)
}

fn synth(cli: &Cli, args: &SynthArgs) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str::<CohortConfig>(&text)?
        }
        None => CohortConfig::default(),
    };
    if let Some(n) = args.households {
        cfg.n_households = n;
    }
    if let Some(h) = args.hours {
        cfg.hours = h;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let cohort = synth_cohort(&cfg)?;
    let out = out_dir(cli)?;
    write_with(&out, "meter.csv", |b| write_meter_csv(&cohort.profiles, b))?;
    for (zone, irr) in &cohort.irradiance {
        write_with(&out, &format!("irradiance_{zone}.csv"), |b| irr.write_csv(b))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct HouseholdSummary {
    households: usize,
    skipped: Vec<cloudstor_core::data::SkipReport>,
    virtual_capacity_kwh: f64,
    annual_revenue: f64,
    adoption: Vec<cloudstor_core::experiment::AdoptionCount>,
}

fn household(cli: &Cli, args: &HouseholdArgs) -> Result<()> {
    let tariff = tariff_of(&args.tariff)?;
    let params = CostParameters::default();
    let menu = match &args.menu {
        Some(p) => ContractMenu::load(p, &params)?,
        None => MenuFile::default().build(&params)?,
    };
    let meter = if args.profiles.is_dir() {
        args.profiles.join("meter.csv")
    } else {
        args.profiles.clone()
    };
    let ingest = load_meter_csv(&meter)?;
    if ingest.profiles.is_empty() {
        return Err(Error::Data("meter file has no usable households".into()));
    }
    let decisions = cohort_decisions(&ingest.profiles, &tariff, &menu)?;
    let schedules: Vec<DispatchResult> = decisions.iter().map(|d| d.dispatch.clone()).collect();
    let aggregate = aggregate_schedules(&schedules)?;
    let out = out_dir(cli)?;
    write_with(&out, "decisions.csv", |b| write_decisions_csv(&decisions, b))?;
    write_with(&out, "aggregate.csv", |b| aggregate.write_csv(b))?;
    write_json(
        &out,
        "household_summary.json",
        &HouseholdSummary {
            households: decisions.len(),
            skipped: ingest.skipped,
            virtual_capacity_kwh: decisions.iter().map(|d| d.chosen.capacity).sum(),
            annual_revenue: decisions.iter().map(|d| d.chosen.fee).sum(),
            adoption: adoption_histogram(&decisions),
        },
    )
}

fn aggregate_of(explicit: &Option<PathBuf>, decisions: &Path) -> Result<HourlySeries> {
    let path = match explicit {
        Some(p) => p.clone(),
        None => decisions.with_file_name("aggregate.csv"),
    };
    HourlySeries::load(&path)
}

/// Annual revenue and virtual capacity from a decisions file.
fn contracts(path: &Path) -> Result<(f64, f64)> {
    let recs = read_decisions_csv(path)?;
    Ok((recs.iter().map(|r| r.fee).sum(), recs.iter().map(|r| r.capacity_kwh).sum()))
}

fn cso(cli: &Cli, args: &CsoArgs) -> Result<()> {
    let external = args.mode == CsoMode::External;
    if !external && (args.sweep || args.capacity.is_some()) {
        return Err(Error::Config("no-external mode always uses the minimum tracking size".into()));
    }
    let tariff = tariff_of(&args.tariff)?;
    let params = CostParameters::default();
    let ratio = StorageRatio::try_from(args.ratio)?;
    let aggregate = aggregate_of(&args.aggregate, &args.decisions)?;
    let (revenue, virtual_capacity) = contracts(&args.decisions)?;
    let (buy, sell) = prices_for(&tariff, &aggregate)?;
    let out = out_dir(cli)?;
    let battery = if let Some(c) = args.capacity {
        sweep_battery(&aggregate, c, ratio)?
    } else if !args.sweep {
        min_tracking_size(&aggregate, ratio)
    } else {
        let grid = default_grid(virtual_capacity, args.steps);
        let s = sweep_sizes(&aggregate, revenue, virtual_capacity, ratio, &grid, &params, &buy, &sell)?;
        write_with(&out, "curve.csv", |b| s.write_csv(b))?;
        s.best_battery
    };
    let scenario = CsoScenario::new(aggregate, battery, buy, sell, external)?;
    let outcome = cso_profit(&scenario, revenue, &params)?;
    write_with(&out, "dispatch.csv", |b| outcome.dispatch().write_csv(b))?;
    write_json(&out, "outcome.json", &outcome)
}

fn metrics(cli: &Cli, args: &MetricsArgs) -> Result<()> {
    let tariff = tariff_of(&args.tariff)?;
    let f = fs::File::open(&args.dispatch).map_err(|e| Error::io(&args.dispatch, e))?;
    let d = DispatchResult::read_csv(std::io::BufReader::new(f), &args.dispatch.display().to_string())?;
    let stats = blocking_distribution(&d.mismatch, &tariff.calendar(), args.zero_tol, args.bins)?;
    let out = out_dir(cli)?;
    write_json(&out, "metrics.json", &stats)?;
    write_with(&out, "blocking_histogram.csv", |b| stats.write_histogram_csv(b))
}

fn multiservice(cli: &Cli, args: &MultiserviceArgs) -> Result<()> {
    let tariff = tariff_of(&args.tariff)?;
    let params = CostParameters::default();
    let ratio = StorageRatio::try_from(args.ratio)?;
    let aggregate = aggregate_of(&args.aggregate, &args.decisions)?;
    let (revenue, _) = contracts(&args.decisions)?;
    let (buy, sell) = prices_for(&tariff, &aggregate)?;
    let battery = sweep_battery(&aggregate, args.capacity, ratio)?;
    let envelope = match &args.envelope {
        Some(p) => ResidualEnvelope::load(p)?,
        None => {
            let seed = cli.seed.unwrap_or(1);
            let driver = synth_wind_driver(aggregate.start(), aggregate.len(), seed)?;
            synth_envelope(&battery, EnvelopeStats::target(args.full, args.zero), &driver, seed)?
        }
    };
    let credit = CongestionCredit {
        annual_low: args.credit_low,
        annual_high: args.credit_high,
    };
    let m = multiservice_outcome(&aggregate, &battery, &envelope, &buy, &sell, revenue, &params, &credit)?;
    let out = out_dir(cli)?;
    write_with(&out, "envelope.csv", |b| envelope.write_csv(b))?;
    write_with(&out, "dispatch.csv", |b| m.cloud_storage.dispatch().write_csv(b))?;
    write_json(&out, "multiservice.json", &m)
}

fn bill(cli: &Cli, args: &BillArgs) -> Result<()> {
    let tariff = tariff_of(&args.tariff)?;
    let out = out_dir(cli)?;
    let Some(meter) = &args.meter else {
        let load = HourlySeries::load(args.load.as_ref().expect("clap enforces --load"))?;
        let aligned = |p: &Option<PathBuf>| match p {
            Some(p) => HourlySeries::load(p),
            None => load.with_values(vec![0.0; load.len()], load.unit()),
        };
        let net = net_demand(&load, &aligned(&args.pv)?, &aligned(&args.action)?)?;
        return write_json(&out, "bill.json", &compute_bill(&net, &tariff)?);
    };
    let ingest = load_meter_csv(meter)?;
    write_with(&out, "bills.csv", |b| {
        let mut w = csv::Writer::from_writer(b);
        w.write_record(["id", "bill", "purchased_kwh", "injected_kwh"])?;
        for p in &ingest.profiles {
            let br = compute_bill(&p.net_load()?, &tariff)?;
            w.write_record([
                p.id.clone(),
                br.total.to_string(),
                br.purchased_energy.to_string(),
                br.injected_energy.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    })
}

fn experiment_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut c = ExperimentConfig::load(path)?;
    if let Some(s) = cli.seed {
        c.seed = s;
    }
    if let Some(o) = &cli.out {
        c.output_dir = std::env::current_dir().map_err(|e| Error::io(".", e))?.join(o);
    }
    Ok(c)
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("--threads: {e}")))?;
    }
    match &cli.command {
        Command::Synth(a) => synth(cli, a),
        Command::Household(a) => household(cli, a),
        Command::Cso(a) => cso(cli, a),
        Command::Metrics(a) => metrics(cli, a),
        Command::Multiservice(a) => multiservice(cli, a),
        Command::Bill(a) => bill(cli, a),
        Command::Run => {
            let c = experiment_config(cli)?;
            let (result, files) = run_experiment(&c)?;
            for f in files {
                println!("wrote {}", f.display());
            }
            let o = &result.outcome;
            println!(
                "battery {:.1} kWh / {:.1} kW, profit {:.2}, blocking probability {:.3}",
                o.battery.capacity, o.battery.rate, o.profit, o.p_block
            );
            Ok(())
        }
        Command::Validate => {
            let path = cli
                .config
                .as_ref()
                .ok_or_else(|| Error::Config("--config is required".into()))?;
            validate_config(path)?;
            println!("ok");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Data => 3,
                ErrorKind::Infeasible => 4,
            })
        }
    }
}
