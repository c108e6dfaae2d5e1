//! Command-line front end: fit models on CSV panels, generate synthetic data,
//! and run replicate studies. Every behavior is a thin shell over the library.
//!
//! Exit codes: 0 ok, 1 runtime/numerical failure, 2 data contract violation,
//! 3 configuration violation.

mod config;
mod data;
mod output;

use clap::{Args, Parser, Subcommand};
use config::{check_version, load_json, RunConfigFile, SimSpecFile, StudyFile};
use panel_glmm::{ridge_em, sc_em, simulate, Error as CoreError};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug)]
pub enum CliError {
    /// Exit code 2.
    Data(String),
    /// Exit code 3.
    Config(String),
    /// Exit code 1.
    Runtime(String),
}

impl CliError {
    fn data(msg: impl Into<String>) -> Self {
        CliError::Data(msg.into())
    }

    fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    fn runtime(msg: impl Into<String>) -> Self {
        CliError::Runtime(msg.into())
    }

    fn data_from(e: impl std::fmt::Display) -> Self {
        CliError::Data(e.to_string())
    }

    fn config_from(e: impl std::fmt::Display) -> Self {
        CliError::Config(e.to_string())
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Data(_) => 2,
            CliError::Config(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Data(m) | CliError::Config(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Config(_) | CoreError::SimSpec(_) => CliError::Config(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "panel-glmm",
    about = "GLMMs on balanced panels with an i.i.d. individual effect and an AR(1) time effect: \
             ridge-penalized EM with per-iteration GCV, and supervised-component EM for p >> n",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonFitArgs {
    /// Dataset CSV (columns id, time, y, features)
    #[arg(long)]
    data: PathBuf,
    /// JSON run configuration
    #[arg(long)]
    config: PathBuf,
    /// Output path for fit.json
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (fits are deterministic regardless)
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Ridge-penalized EM fit with GCV-selected penalty
    Fit(CommonFitArgs),
    /// Supervised-component EM fit for high-dimensional regressor sets
    FitHd(CommonFitArgs),
    /// Generate a synthetic panel dataset plus its realized truth
    Simulate {
        /// JSON simulation spec
        #[arg(long)]
        config: PathBuf,
        /// Output CSV path
        #[arg(long)]
        out: PathBuf,
        /// Output path for the realized truth (default: `<out>.truth.json`)
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Overrides the config seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a replicate study over a grid of cells
    Study {
        /// JSON study spec
        #[arg(long)]
        config: PathBuf,
        /// Output path for study_result.json
        #[arg(long)]
        out: PathBuf,
        /// Output path for the flattened CSV (default: `<out>.csv`)
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Overrides the config seed
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads for replicates (output is thread-count invariant)
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Fit(args) => cmd_fit(args),
        Command::FitHd(args) => cmd_fit_hd(args),
        Command::Simulate {
            config,
            out,
            truth,
            seed,
        } => cmd_simulate(&config, &out, truth.as_deref(), seed),
        Command::Study {
            config,
            out,
            csv,
            seed,
            threads,
        } => cmd_study(&config, &out, csv.as_deref(), seed, threads),
    }
}

fn write_json<T: serde::Serialize>(path: &std::path::Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::runtime(format!("serialization failed: {e}")))?;
    text.push('\n');
    std::fs::write(path, text)
        .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))
}

fn cmd_fit(args: CommonFitArgs) -> Result<(), CliError> {
    let file: RunConfigFile = load_json(&args.config)?;
    check_version(file.format_version)?;
    if file.sc.is_some() {
        return Err(CliError::config(
            "`sc` settings belong to the fit-hd command",
        ));
    }
    let family = file.family_link()?;
    let fit_config = file.fit.to_core(file.intercept)?;
    let dataset = data::read_dataset(&args.data)?;
    family
        .check_response(&dataset.y.view())
        .map_err(CliError::data_from)?;

    let x = if file.intercept {
        let mut x = ndarray::Array2::<f64>::ones((dataset.layout.n_rows(), dataset.x.ncols() + 1));
        x.slice_mut(ndarray::s![.., 1..]).assign(&dataset.x);
        x
    } else {
        dataset.x.clone()
    };
    let designs = panel_glmm::build_designs(dataset.layout, x).map_err(CliError::data_from)?;
    let result = ridge_em::fit(&dataset.y.view(), &designs, &family, &fit_config, None)?;
    let json = output::fit_json(
        "fit",
        &file,
        &fit_config,
        &dataset,
        &result,
        None,
    );
    write_json(&args.out, &json)
}

fn cmd_fit_hd(args: CommonFitArgs) -> Result<(), CliError> {
    let file: RunConfigFile = load_json(&args.config)?;
    check_version(file.format_version)?;
    if !file.intercept {
        return Err(CliError::config(
            "fit-hd always carries an unpenalized intercept; set intercept = true",
        ));
    }
    let family = file.family_link()?;
    let fit_config = file.fit.to_core(false)?;
    let sc_settings = file.sc.clone().unwrap_or_default();
    let seed = args.seed.unwrap_or(file.seed);
    let sc = sc_settings.to_core(seed)?;
    let dataset = data::read_dataset(&args.data)?;
    family
        .check_response(&dataset.y.view())
        .map_err(CliError::data_from)?;

    let (sc_active, selection) = if sc_settings.n_candidates() > 1 {
        let sel = sc_em::cv_tune(
            &dataset.y.view(),
            dataset.layout,
            &dataset.x,
            &family,
            &sc,
            &fit_config,
        )?;
        let active = panel_glmm::ScConfig64 {
            s: sel.s,
            l: sel.l,
            n_components: sel.n_components,
            ..sc.clone()
        };
        (active, Some(sel))
    } else {
        (sc.clone(), None)
    };
    let hd = sc_em::fit_hd(
        &dataset.y.view(),
        dataset.layout,
        &dataset.x,
        &family,
        &sc_active,
        &fit_config,
    )?;
    let json = output::fit_json(
        "fit-hd",
        &file,
        &fit_config,
        &dataset,
        &hd.fit,
        Some(output::hd_json(&hd, selection)),
    );
    write_json(&args.out, &json)
}

fn cmd_simulate(
    config_path: &std::path::Path,
    out: &std::path::Path,
    truth: Option<&std::path::Path>,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let file: SimSpecFile = load_json(config_path)?;
    check_version(file.format_version)?;
    let seed = seed.unwrap_or(file.seed);
    let spec = file.to_core(seed)?;
    let panel = simulate::gen_panel(&spec)?;
    // features only: the intercept column is declared in config, not stored
    let offset = usize::from(spec.x_gen.intercept);
    let features = panel.x.slice(ndarray::s![.., offset..]).to_owned();
    let mut csv_bytes = Vec::new();
    data::write_dataset(&mut csv_bytes, spec.layout, &panel.y, &features)
        .map_err(|e| CliError::runtime(format!("cannot format CSV: {e}")))?;
    std::fs::write(out, csv_bytes)
        .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", out.display())))?;

    let truth_path = match truth {
        Some(p) => p.to_path_buf(),
        None => {
            let mut p = out.as_os_str().to_owned();
            p.push(".truth.json");
            PathBuf::from(p)
        }
    };
    let truth_json = output::truth_json(&file, seed, &panel.truth);
    write_json(&truth_path, &truth_json)
}

fn cmd_study(
    config_path: &std::path::Path,
    out: &std::path::Path,
    csv: Option<&std::path::Path>,
    seed: Option<u64>,
    threads: usize,
) -> Result<(), CliError> {
    let file: StudyFile = load_json(config_path)?;
    check_version(file.format_version)?;
    let seed = seed.unwrap_or(file.seed);
    let spec = file.to_core(seed)?;
    let result = simulate::run_study(&spec, threads.max(1))?;
    // partial replicate failures are reported in the JSON; only a study in
    // which every replicate failed is a runtime failure
    let total: usize = result.cells.iter().map(|c| c.replicates.len()).sum();
    let failures: usize = result.cells.iter().map(|c| c.n_failures).sum();
    if total > 0 && failures == total {
        return Err(CliError::runtime("every replicate failed"));
    }
    write_json(out, &result)?;
    let csv_path = match csv {
        Some(p) => p.to_path_buf(),
        None => {
            let mut p = out.as_os_str().to_owned();
            p.push(".csv");
            PathBuf::from(p)
        }
    };
    let mut csv_bytes = Vec::new();
    result
        .write_csv(&mut csv_bytes)
        .map_err(|e| CliError::runtime(format!("cannot format CSV: {e}")))?;
    std::fs::write(&csv_path, csv_bytes)
        .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", csv_path.display())))?;
    Ok(())
}
