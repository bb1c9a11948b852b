use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use gridtrack::engine::{Algorithm, RhoMode};
use gridtrack::metrics::DEFAULT_BURN_IN;
use gridtrack::model::{curvature_bounds, Scenario};
use gridtrack::oracle::{delta_max, drift_stats, solve_scenario, write_oracle_csv};
use gridtrack::scenario::{
    build_scenario, load_scenario, save_scenario, scenario_hash, ScenarioConfig,
};
use gridtrack::sim::{run_tracking, RunOptions};
use gridtrack::verify::{format_table, run_suite, Suite, DEFAULT_CASES, DEFAULT_SEED};

const DEFAULT_OUT: &str = "gridtrack-out";
const EXIT_CHECK_FAILED: u8 = 2;

#[derive(Parser)]
#[command(
    name = "gridtrack",
    version,
    about = "Online tracking of time-varying dispatch optima with ADMM"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a tracking engine over a scenario and write metrics, plot, transcript and bound report.
    Run(RunArgs),
    /// Run the randomized property suites and print a pass/fail table.
    Verify(VerifyArgs),
    /// Solve every time slice exactly and dump the optimal series.
    Oracle(OracleArgs),
    /// Build a scenario from a config and write it as JSON.
    GenScenario(GenArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
enum AlgoArg {
    Partial,
    Total,
}

impl From<AlgoArg> for Algorithm {
    fn from(a: AlgoArg) -> Self {
        match a {
            AlgoArg::Partial => Algorithm::Partial,
            AlgoArg::Total => Algorithm::Total,
        }
    }
}

/// `formula` or a positive number.
fn parse_rho(s: &str) -> Result<RhoMode, String> {
    if s == "formula" {
        return Ok(RhoMode::Formula);
    }
    match s.parse::<f64>() {
        Ok(x) if x > 0.0 && x.is_finite() => Ok(RhoMode::Fixed(x)),
        _ => Err(format!(
            "expected `formula` or a positive number, got `{s}`"
        )),
    }
}

#[derive(Args)]
struct ScenarioArgs {
    /// Scenario config JSON, or a scenario written by `gen-scenario`.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Run config JSON; flags take precedence over its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    algo: Option<AlgoArg>,
    /// Penalty parameter: `formula` or a positive number.
    #[arg(long, value_parser = parse_rho)]
    rho: Option<RhoMode>,
    #[arg(long, env = "GRIDTRACK_OUT_DIR")]
    out: Option<PathBuf>,
    #[arg(long)]
    burn_in: Option<usize>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Suite to run; repeat for several. All suites by default.
    #[arg(long, value_parser = parse_suite)]
    suite: Vec<Suite>,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_CASES)]
    cases: usize,
}

fn parse_suite(s: &str) -> Result<Suite, String> {
    s.parse().map_err(|e: gridtrack::Error| e.to_string())
}

#[derive(Args)]
struct OracleArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Step size used for the tracking constants in `drift.json`.
    #[arg(long, value_parser = parse_rho)]
    rho: Option<RhoMode>,
    #[arg(long, env = "GRIDTRACK_OUT_DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Output JSON file.
    #[arg(long)]
    out: PathBuf,
}

/// Keys accepted in a run config file.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunFile {
    scenario: Option<PathBuf>,
    algo: Option<AlgoArg>,
    rho: Option<RhoFile>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    burn_in: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum RhoFile {
    Value(f64),
    Name(String),
}

impl RhoFile {
    fn resolve(&self) -> Result<RhoMode> {
        let text = match self {
            RhoFile::Value(x) => x.to_string(),
            RhoFile::Name(s) => s.clone(),
        };
        parse_rho(&text).map_err(|e| anyhow::anyhow!("config key `rho`: {e}"))
    }
}

fn read_run_file(path: &Path) -> Result<RunFile> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read run config {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("invalid run config {}", path.display()))
}

/// Loads a scenario config or a saved scenario. The seed override only
/// applies to configs.
fn load_any_scenario(path: Option<&Path>, seed: Option<u64>) -> Result<Scenario> {
    let Some(path) = path else {
        let mut cfg = ScenarioConfig::default();
        if let Some(s) = seed {
            cfg.seed = s;
        }
        return Ok(build_scenario(&cfg)?);
    };
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read scenario {}", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .with_context(|| format!("{} is not valid JSON", path.display()))?;
    if value.get("instances").is_some() {
        if seed.is_some() {
            bail!(
                "--seed cannot be applied to a saved scenario ({})",
                path.display()
            );
        }
        return load_scenario(path).with_context(|| format!("invalid scenario {}", path.display()));
    }
    let mut cfg: ScenarioConfig = serde_json::from_value(value)
        .with_context(|| format!("invalid scenario config {}", path.display()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()
        .with_context(|| format!("invalid scenario config {}", path.display()))?;
    // relative CSV paths resolve against the config's directory
    let base = path.parent().unwrap_or(Path::new("."));
    rebase_paths(&mut cfg, base);
    build_scenario(&cfg).with_context(|| format!("cannot build scenario from {}", path.display()))
}

fn rebase_paths(cfg: &mut ScenarioConfig, base: &Path) {
    use gridtrack::scenario::{BoxPolicy, SupplySource};
    if let SupplySource::Csv { path } = &mut cfg.supply {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
    if let BoxPolicy::Csv { path } = &mut cfg.boxes {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

fn scenario_rho(path: Option<&Path>) -> Result<Option<RhoMode>> {
    let Some(path) = path else { return Ok(None) };
    let value: serde_json::Value = serde_json::from_str(&fs::read_to_string(path)?)?;
    if value.get("instances").is_some() {
        return Ok(None);
    }
    Ok(value
        .get("rho")
        .map(|r| serde_json::from_value(r.clone()))
        .transpose()?)
}

fn cmd_run(args: RunArgs) -> Result<ExitCode> {
    let file = match &args.config {
        Some(p) => read_run_file(p)?,
        None => RunFile::default(),
    };
    let scenario_path = args.scenario.scenario.or(file.scenario);
    let seed = args.scenario.seed.or(file.seed);
    let algorithm: Algorithm = args.algo.or(file.algo).unwrap_or(AlgoArg::Total).into();
    let scenario = load_any_scenario(scenario_path.as_deref(), seed)?;
    let rho = match (args.rho, &file.rho) {
        (Some(r), _) => r,
        (None, Some(r)) => r.resolve()?,
        (None, None) => {
            scenario_rho(scenario_path.as_deref())?.unwrap_or(ScenarioConfig::default().rho)
        }
    };
    let out = args
        .out
        .or(file.out)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    let burn_in = args.burn_in.or(file.burn_in).unwrap_or(DEFAULT_BURN_IN);

    let output = run_tracking(
        &scenario,
        &RunOptions {
            algorithm,
            rho,
            burn_in,
        },
    )?;
    output
        .write_artifacts(&out)
        .with_context(|| format!("cannot write outputs to {}", out.display()))?;

    println!(
        "{} steps, algorithm {:?}, rho {}, scenario {}",
        output.records.len(),
        algorithm,
        output.rho,
        &output.scenario_hash[..16]
    );
    println!("outputs in {}", out.display());
    let Some(b) = &output.bounds else {
        println!("bound check skipped: run shorter than burn-in {burn_in}");
        return Ok(ExitCode::SUCCESS);
    };
    println!(
        "sup ||u - u*||_G = {:.6} vs c1 = {:.6}: {}",
        b.sup_u_err_g,
        b.c1,
        pass_word(b.pass_c1)
    );
    if let (Some(s), Some(p)) = (b.sup_q_err_sq, b.pass_c2) {
        println!(
            "sup ||q - q*||^2 = {:.6} vs c2 = {:.6}: {}",
            s,
            b.c2,
            pass_word(p)
        );
    }
    for (j, e) in b.sup_abs_e.iter().enumerate() {
        println!(
            "resource {}: sup |e| = {e:.3e}, excess steps {}, shortage steps {}",
            j + 1,
            b.excess_steps[j],
            b.shortage_steps[j]
        );
    }
    // the tracking bound is only asserted for the feasible scheme
    if algorithm == Algorithm::Total && !b.pass {
        return Ok(ExitCode::from(EXIT_CHECK_FAILED));
    }
    Ok(ExitCode::SUCCESS)
}

fn pass_word(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

fn cmd_verify(args: VerifyArgs) -> Result<ExitCode> {
    let suites = if args.suite.is_empty() {
        Suite::ALL.to_vec()
    } else {
        args.suite
    };
    let outcomes = suites
        .into_iter()
        .map(|s| run_suite(s, args.seed, args.cases))
        .collect::<gridtrack::Result<Vec<_>>>()?;
    print!("{}", format_table(&outcomes));
    Ok(if outcomes.iter().all(|o| o.pass) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_CHECK_FAILED)
    })
}

fn cmd_oracle(args: OracleArgs) -> Result<ExitCode> {
    let path = args.scenario.scenario.as_deref();
    let scenario = load_any_scenario(path, args.scenario.seed)?;
    let rho_mode = match args.rho {
        Some(r) => r,
        None => scenario_rho(path)?.unwrap_or(ScenarioConfig::default().rho),
    };
    let first = &scenario.instances()[0];
    let rho = rho_mode.resolve(first)?;
    let (sigma, l) = scenario
        .instances()
        .iter()
        .map(curvature_bounds)
        .fold((f64::INFINITY, 0.0f64), |(s, m), (a, b)| {
            (s.min(a), m.max(b))
        });
    let solutions = solve_scenario(&scenario)?;
    let drift = drift_stats(&solutions, rho, delta_max(sigma, l))?;
    let mut csv = Vec::new();
    write_oracle_csv(&solutions, &mut csv)?;
    let mut set = gridtrack::metrics::ArtifactSet::default();
    set.add("oracle.csv", csv);
    set.add("drift.json", serde_json::to_vec_pretty(&drift)?);
    let out = args.out.unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    set.commit(&out)
        .with_context(|| format!("cannot write outputs to {}", out.display()))?;
    println!(
        "{} slices, delta_p {:.6}, delta_lambda {:.6}, g {:.6}, c1 {:.6}, c2 {:.6}",
        solutions.len(),
        drift.delta_p,
        drift.delta_lambda,
        drift.constants.g,
        drift.constants.c1,
        drift.constants.c2
    );
    println!("outputs in {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_gen(args: GenArgs) -> Result<ExitCode> {
    let scenario = load_any_scenario(args.scenario.scenario.as_deref(), args.scenario.seed)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    save_scenario(&scenario, &args.out)
        .with_context(|| format!("cannot write {}", args.out.display()))?;
    println!(
        "{} steps, {} nodes, sha256 {}",
        scenario.len(),
        scenario.n_nodes(),
        scenario_hash(&scenario)
    );
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // usage errors exit 1; 2 is reserved for failed checks
            return if e.use_stderr() {
                ExitCode::FAILURE
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Oracle(a) => cmd_oracle(a),
        Command::GenScenario(a) => cmd_gen(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
