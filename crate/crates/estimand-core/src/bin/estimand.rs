//! Batch command-line front end: simulation, ICE classification, estimand
//! analysis, and Monte-Carlo validation.
//!
//! Flag precedence is CLI > config file > defaults; the config file is flat
//! `key = value` text. The only environment variable honoured is
//! `ESTIMAND_OUT_DIR` (default output directory).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use estimand_core::data::{
    read_dataset_csv_path, write_dataset_csv_path, Dataset, DatasetMeta,
};
use estimand_core::error::{Error, Result};
use estimand_core::estimand::{estimate, EstimandKind, EstimandSpec};
use estimand_core::ice::{classify_dataset, summarize};
use estimand_core::report::{
    estimand_result_text, ice_summary_csv, ice_summary_text, mc_report_text,
};
use estimand_core::sim::{scenario_by_name, simulate, TruthBundle, SCENARIO_NAMES};
use estimand_core::validate::{run_mc_validation, McConfig};

#[derive(Parser)]
#[command(name = "estimand", version, about = "Estimands for longitudinal trials with intercurrent events", arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a trial scenario; writes dataset.csv and truth.csv.
    Simulate(SimulateArgs),
    /// Classify intercurrent events and write the per-arm summary table.
    Classify(ClassifyArgs),
    /// Estimate one estimand on a dataset; writes analysis.txt/.json.
    Analyze(AnalyzeArgs),
    /// Monte-Carlo validation of the pipelines against exact oracles.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario name: award1_like, imagine3_like, null_mar, j2r_correct.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Flat key=value config file (CLI flags win).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct ClassifyArgs {
    /// Dataset CSV (subject-visit schema).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// theoretic, defacto, or hybrid.
    #[arg(long)]
    estimand: Option<String>,
    /// Non-inferiority margin (0 = superiority).
    #[arg(long)]
    delta: Option<f64>,
    /// 1-based analysis visit (default: last scheduled visit).
    #[arg(long)]
    visit: Option<u32>,
    /// Number of imputations for MI pipelines.
    #[arg(long)]
    m: Option<usize>,
    /// Master seed; required for MI pipelines.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Larger outcomes mean better efficacy (default: smaller is better).
    #[arg(long)]
    larger_is_better: bool,
    /// Outcome column holds raw values rather than change from baseline.
    #[arg(long)]
    values_are_raw: bool,
    #[arg(long)]
    endpoint_name: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    /// Scenario name (see `simulate --preset`).
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    replications: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated subset of theoretic,defacto,hybrid.
    #[arg(long)]
    pipelines: Option<String>,
    /// Run replications sequentially (results are identical either way).
    #[arg(long)]
    sequential: bool,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn load_config_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)?;
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "{}:{}: expected `key = value`, got `{raw}`",
                path.display(),
                i + 1
            )));
        };
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

/// CLI > config file > default.
fn resolve<T: FromStr + Clone>(
    cli: Option<T>,
    file: &BTreeMap<String, String>,
    key: &str,
    default: Option<T>,
) -> Result<Option<T>> {
    if cli.is_some() {
        return Ok(cli);
    }
    if let Some(raw) = file.get(key) {
        return raw
            .parse::<T>()
            .map(Some)
            .map_err(|_| Error::Config(format!("config key `{key}`: cannot parse `{raw}`")));
    }
    Ok(default)
}

fn out_dir(cli: Option<PathBuf>, file: &BTreeMap<String, String>) -> PathBuf {
    cli.or_else(|| file.get("out").map(PathBuf::from))
        .or_else(|| std::env::var_os("ESTIMAND_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."))
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    std::fs::write(&path, text)?;
    Ok(path)
}

fn truth_csv(truth: &TruthBundle) -> String {
    let pos = truth.analysis_position();
    let mut header = vec!["subject_id".to_string(), "arm".into(), "baseline".into()];
    for arm in &truth.arms {
        header.push(format!("y_final_arm{arm}"));
    }
    for arm in &truth.arms[1..] {
        header.push(format!("s_cat1_arm{arm}"));
    }
    for arm in &truth.arms {
        header.push(format!("policy_final_arm{arm}"));
    }
    header.push("ice_onset".into());
    header.push("ice_category".into());
    let mut out = header.join(",") + "\n";
    for s in &truth.subjects {
        let mut row = vec![s.id.clone(), s.assigned.to_string(), format!("{}", s.baseline)];
        for z in 0..truth.arms.len() {
            row.push(format!("{}", s.y_complete[z][pos]));
        }
        for z in 1..truth.arms.len() {
            row.push(if s.cat1[z] { "1".into() } else { "0".into() });
        }
        for z in 0..truth.arms.len() {
            row.push(format!("{}", s.policy[z][pos]));
        }
        let assigned = s.assigned.0 as usize;
        match s.ice[assigned] {
            Some((onset, category)) => {
                row.push(onset.to_string());
                row.push(category.label().replace(' ', "_").to_lowercase());
            }
            None => {
                row.push(String::new());
                row.push(String::new());
            }
        }
        out += &(row.join(",") + "\n");
    }
    out
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let file = match &args.config {
        Some(p) => load_config_file(p)?,
        None => BTreeMap::new(),
    };
    let preset = resolve(args.preset, &file, "preset", None)?
        .ok_or_else(|| Error::Config(format!("--preset required (one of {SCENARIO_NAMES:?})")))?;
    let mut scenario = scenario_by_name(&preset)?;
    if let Some(seed) = resolve(args.seed, &file, "seed", None)? {
        scenario = scenario.with_seed(seed);
    }
    let dir = out_dir(args.out, &file);
    let (dataset, truth) = simulate(&scenario)?;
    std::fs::create_dir_all(&dir)?;
    write_dataset_csv_path(&dataset, &dir.join("dataset.csv"))?;
    std::fs::write(dir.join("truth.csv"), truth_csv(&truth))?;
    std::fs::write(
        dir.join("scenario.json"),
        serde_json::to_string_pretty(&scenario)? + "\n",
    )?;
    println!(
        "simulated `{}` (seed {}): {} subjects, {} visits -> {}",
        scenario.name,
        scenario.master_seed,
        dataset.subjects.len(),
        dataset.n_visits(),
        dir.display()
    );
    Ok(())
}

fn load_dataset(path: &Path, meta: &DatasetMeta) -> Result<Dataset> {
    let dataset = read_dataset_csv_path(path, meta)?;
    let report = dataset.validate();
    if !report.is_clean() {
        return Err(Error::Validation(format!(
            "{}: {} violation(s); first: {}",
            path.display(),
            report.violations.len(),
            report.violations[0].message
        )));
    }
    Ok(dataset)
}

fn cmd_classify(args: ClassifyArgs) -> Result<()> {
    let file = match &args.config {
        Some(p) => load_config_file(p)?,
        None => BTreeMap::new(),
    };
    let data = resolve(args.data, &file, "data", None)?
        .ok_or_else(|| Error::Config("--data required".into()))?;
    let dir = out_dir(args.out, &file);
    let dataset = classify_dataset(&load_dataset(&data, &DatasetMeta::default())?);
    let table = summarize(&dataset)?;
    let text = ice_summary_text(&table);
    write_text(&dir, "ice_summary.txt", &text)?;
    write_text(&dir, "ice_summary.csv", &ice_summary_csv(&table))?;
    print!("{text}");
    Ok(())
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<()> {
    let file = match &args.config {
        Some(p) => load_config_file(p)?,
        None => BTreeMap::new(),
    };
    let data = resolve(args.data, &file, "data", None)?
        .ok_or_else(|| Error::Config("--data required".into()))?;
    let kind_raw = resolve(args.estimand, &file, "estimand", None)?
        .ok_or_else(|| Error::Config("--estimand required (theoretic|defacto|hybrid)".into()))?;
    let kind = EstimandKind::parse(&kind_raw)
        .ok_or_else(|| Error::Config(format!("unknown estimand `{kind_raw}`")))?;
    let delta = resolve(args.delta, &file, "delta", Some(0.0))?.unwrap();
    let visit = resolve(args.visit, &file, "visit", None)?;
    let m = resolve(args.m, &file, "m", Some(100))?.unwrap();
    let alpha = resolve(args.alpha, &file, "alpha", Some(0.05))?.unwrap();
    let seed = resolve(args.seed, &file, "seed", None)?;
    let larger = args.larger_is_better
        || file.get("larger_is_better").map(|v| v == "true" || v == "1") == Some(true);
    let raw_values = args.values_are_raw
        || file.get("values_are_raw").map(|v| v == "true" || v == "1") == Some(true);
    let endpoint = resolve(args.endpoint_name, &file, "endpoint_name", None)?
        .unwrap_or_else(|| "change".to_string());
    let dir = out_dir(args.out, &file);

    // no silent nondeterminism: MI pipelines must be given a seed
    let seed = match (kind, seed) {
        (EstimandKind::Theoretic, s) => s.unwrap_or(0),
        (_, Some(s)) => s,
        (_, None) => {
            return Err(Error::Config(
                "--seed is required for multiple-imputation pipelines".into(),
            ))
        }
    };

    let meta = DatasetMeta {
        endpoint_name: endpoint,
        smaller_is_better: !larger,
        values_are_change: !raw_values,
    };
    let dataset = load_dataset(&data, &meta)?;
    let mut spec = EstimandSpec::new(kind, delta);
    spec.smaller_is_better = !larger;
    spec.analysis_visit = visit;
    spec.alpha = alpha;
    let result = estimate(&dataset, &spec, m, seed)?;
    let text = estimand_result_text(&result);
    write_text(&dir, "analysis.txt", &text)?;
    write_text(
        &dir,
        "analysis.json",
        &(serde_json::to_string_pretty(&result)? + "\n"),
    )?;
    print!("{text}");
    Ok(())
}

fn cmd_validate(args: ValidateArgs) -> Result<()> {
    let file = match &args.config {
        Some(p) => load_config_file(p)?,
        None => BTreeMap::new(),
    };
    let preset = resolve(args.preset, &file, "preset", None)?
        .ok_or_else(|| Error::Config(format!("--preset required (one of {SCENARIO_NAMES:?})")))?;
    let replications = resolve(args.replications, &file, "replications", Some(200))?.unwrap();
    let m = resolve(args.m, &file, "m", Some(20))?.unwrap();
    let seed = resolve(args.seed, &file, "seed", Some(1))?.unwrap();
    let alpha = resolve(args.alpha, &file, "alpha", Some(0.05))?.unwrap();
    let pipelines_raw = resolve(args.pipelines, &file, "pipelines", None)?
        .unwrap_or_else(|| "theoretic,defacto,hybrid".to_string());
    let mut pipelines = Vec::new();
    for name in pipelines_raw.split(',') {
        let kind = EstimandKind::parse(name.trim())
            .ok_or_else(|| Error::Config(format!("unknown pipeline `{name}`")))?;
        pipelines.push(kind);
    }
    let sequential =
        args.sequential || file.get("sequential").map(|v| v == "true" || v == "1") == Some(true);
    let dir = out_dir(args.out, &file);

    let config = McConfig {
        scenario: scenario_by_name(&preset)?,
        replications,
        m,
        master_seed: seed,
        pipelines,
        parallel: !sequential,
        alpha,
    };
    let report = run_mc_validation(&config)?;
    let text = mc_report_text(&report);
    write_text(&dir, "validation.txt", &text)?;
    write_text(
        &dir,
        "validation.json",
        &(serde_json::to_string_pretty(&report)? + "\n"),
    )?;
    print!("{text}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Classify(args) => cmd_classify(args),
        Command::Analyze(args) => cmd_analyze(args),
        Command::Validate(args) => cmd_validate(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
