//! Command-line front end: sampling, spectra, moment tables, cumulant
//! condition checks, exact finite-size oracles, and the replica flow.
//!
//! Exit codes: 0 success, 2 invalid configuration or spec, 3 numeric
//! backend failure, 4 enumeration budget or size limit exceeded.

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use wigner_core::cumulant::CumulantSpec;
use wigner_core::ensemble::EnsembleSpec;
use wigner_core::experiment::{self, ExperimentConfig};
use wigner_core::flow::Truncation;

#[derive(Parser)]
#[command(name = "wigner", version, about = "Spectra of Hermitian random matrices with dependent entries")]
struct Cli {
    /// Worker threads for sampling and spectra (0 = all cores)
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct EnsembleArgs {
    /// Path to an ensemble spec JSON
    #[arg(long)]
    ensemble: PathBuf,
    /// Matrix dimension
    #[arg(long)]
    n: usize,
    /// Base RNG seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of samples
    #[arg(long, default_value_t = 1)]
    count: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Draw matrices and dump them in the binary format
    Sample {
        #[command(flatten)]
        ensemble: EnsembleArgs,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Eigenvalue histogram against the semicircle density
    Spectrum {
        #[command(flatten)]
        ensemble: EnsembleArgs,
        /// Histogram bins
        #[arg(long, default_value_t = 61)]
        bins: usize,
        /// Offset above the real axis for the resolvent boundary column
        #[arg(long, default_value_t = 1e-6)]
        eps: f64,
        /// Output CSV path
        #[arg(long)]
        out: PathBuf,
    },
    /// Normalized trace moments with semicircle reference and z-scores
    Moments {
        #[command(flatten)]
        ensemble: EnsembleArgs,
        /// Comma-separated moment orders
        #[arg(long, value_delimiter = ',', default_value = "2,4,6")]
        k: Vec<u32>,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Check the scaling conditions of a cumulant spec graph by graph
    CheckCumulants {
        /// Path to a cumulant spec JSON
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = 4)]
        max_vertices: usize,
        #[arg(long, default_value_t = 4)]
        max_edges: usize,
        /// Comma-separated N grid
        #[arg(long, value_delimiter = ',', default_value = "64,128,256,512")]
        n_grid: Vec<u64>,
        /// Output JSON path
        #[arg(long)]
        out: PathBuf,
    },
    /// Exact finite-size trace moments and their extrapolated limits
    Oracle {
        #[arg(long)]
        spec: PathBuf,
        /// Comma-separated N grid
        #[arg(long, alias = "N", value_delimiter = ',', default_value = "2,3,4,5,6")]
        n: Vec<u64>,
        /// Comma-separated moment orders
        #[arg(long, value_delimiter = ',', default_value = "2,4")]
        k: Vec<u32>,
        /// Output CSV path
        #[arg(long)]
        out: PathBuf,
    },
    /// Iterate the replica flow; emit the resolvent series and ledger
    Flow {
        #[arg(long)]
        spec: PathBuf,
        /// t-orders to iterate
        #[arg(long, default_value_t = 4)]
        orders: usize,
        /// Graph limits as vertices,edges
        #[arg(long, value_delimiter = ',', default_value = "4,4")]
        truncation: Vec<usize>,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Full convergence experiment from a config file
    Convergence {
        /// Experiment config JSON
        #[arg(long)]
        config: PathBuf,
        /// Override the config seed
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (overrides the config)
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_ensemble(path: &PathBuf) -> Result<EnsembleSpec> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading ensemble spec {}", path.display()))?;
    let spec: EnsembleSpec =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    spec.validate()?;
    Ok(spec)
}

fn load_cumulant_spec(path: &PathBuf) -> Result<CumulantSpec> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading cumulant spec {}", path.display()))?;
    let spec: CumulantSpec =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(spec)
}

fn run(cli: Cli) -> Result<()> {
    if cli.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.workers)
            .build_global()
            .context("configuring the worker pool")?;
    }
    match cli.command {
        Command::Sample { ensemble, out } => {
            let spec = load_ensemble(&ensemble.ensemble)?;
            let files =
                experiment::run_sample_dump(&spec, ensemble.n, ensemble.seed, ensemble.count, &out)?;
            println!("wrote {} files under {}", files.len(), out.display());
        }
        Command::Spectrum {
            ensemble,
            bins,
            eps,
            out,
        } => {
            let spec = load_ensemble(&ensemble.ensemble)?;
            experiment::run_spectrum(
                &spec,
                ensemble.n,
                ensemble.seed,
                ensemble.count,
                bins,
                eps,
                &out,
            )?;
            println!("wrote {}", out.display());
        }
        Command::Moments { ensemble, k, out } => {
            let spec = load_ensemble(&ensemble.ensemble)?;
            let config = ExperimentConfig {
                ensemble: spec,
                n_grid: vec![ensemble.n],
                samples_per_n: ensemble.count,
                moments: k,
                seed: ensemble.seed,
                output_dir: None,
                report_formats: vec![
                    experiment::ReportFormat::Csv,
                    experiment::ReportFormat::Json,
                ],
                bins: 61,
            };
            let summary = experiment::run_convergence(&config, &out)?;
            for row in &summary.rows {
                println!(
                    "N={} k={}: {:.6} +- {:.2e} (semicircle {:.6}, z = {:+.2})",
                    row.n, row.k, row.estimate, row.stderr, row.semicircle, row.z_score
                );
            }
        }
        Command::CheckCumulants {
            spec,
            max_vertices,
            max_edges,
            n_grid,
            out,
        } => {
            let spec = load_cumulant_spec(&spec)?;
            let run =
                experiment::run_condition_check(&spec, max_vertices, max_edges, &n_grid, Some(&out))?;
            let verdict = if run.report.all_pass { "PASS" } else { "FAIL" };
            println!(
                "{verdict}: {} graphs checked, report at {}",
                run.report.entries.len(),
                out.display()
            );
            for entry in run.report.entries.iter().filter(|e| !e.pass) {
                println!(
                    "  violated: {} ({}, slope {:?})",
                    serde_json::to_string(&entry.graph).unwrap(),
                    entry.bullet,
                    entry.slope
                );
            }
        }
        Command::Oracle { spec, n, k, out } => {
            let spec = load_cumulant_spec(&spec)?;
            let rows = experiment::run_oracle(&spec, &n, &k, Some(&out))?;
            for row in &rows {
                println!(
                    "N={} k={}: exact {:.10}, extrapolated {:.10}",
                    row.n, row.k, row.exact, row.extrapolated
                );
            }
        }
        Command::Flow {
            spec,
            orders,
            truncation,
            out,
        } => {
            anyhow::ensure!(
                truncation.len() == 2,
                "--truncation takes exactly vertices,edges"
            );
            let spec = load_cumulant_spec(&spec)?;
            let run = experiment::run_flow(
                &spec,
                orders,
                Truncation {
                    max_t: orders,
                    max_vertices: truncation[0],
                    max_edges: truncation[1],
                },
                Some(&out),
            )?;
            for c in &run.series {
                println!(
                    "1/z^{}: {} * alpha^{}",
                    c.inv_z_power,
                    c.value,
                    2 * c.alpha_sq_power
                );
            }
            println!(
                "propagation ledger: {} entries, passed = {}",
                run.propagation.entries.len(),
                run.propagation.passed
            );
        }
        Command::Convergence { config, seed, out } => {
            let mut config = ExperimentConfig::from_json_file(&config)?;
            if let Some(seed) = seed {
                config.seed = seed;
            }
            let out_dir = out
                .or_else(|| config.output_dir.clone())
                .unwrap_or_else(|| PathBuf::from("wigner-out"));
            let summary = experiment::run_convergence(&config, &out_dir)?;
            for (n, d) in &summary.ks_distance {
                println!("N={n}: KS distance {d:.4}");
            }
            println!("reports under {}", out_dir.display());
        }
    }
    Ok(())
}

/// Map error chains onto the documented exit codes.
fn exit_code_for(err: &anyhow::Error) -> u8 {
    use wigner_core::cumulant::CumulantError;
    use wigner_core::ensemble::EnsembleError;
    use wigner_core::experiment::ExperimentError;
    use wigner_core::graph::GraphError;
    use wigner_core::matrix::MatrixError;
    use wigner_core::oracle::OracleError;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<ExperimentError>() {
            return match e {
                ExperimentError::InvalidConfig(_) => 2,
                ExperimentError::Oracle(OracleError::BudgetExceeded { .. }) => 4,
                ExperimentError::Graph(GraphError::LimitExceeded { .. }) => 4,
                ExperimentError::Matrix(MatrixError::BackendFailure(_)) => 3,
                ExperimentError::Ensemble(_) | ExperimentError::Cumulant(_) => 2,
                _ => 1,
            };
        }
        if let Some(e) = cause.downcast_ref::<OracleError>() {
            return match e {
                OracleError::BudgetExceeded { .. } | OracleError::OrderTooLarge(_) => 4,
                _ => 2,
            };
        }
        if let Some(e) = cause.downcast_ref::<MatrixError>() {
            return match e {
                MatrixError::BackendFailure(_) => 3,
                _ => 2,
            };
        }
        if let Some(e) = cause.downcast_ref::<GraphError>() {
            return match e {
                GraphError::LimitExceeded { .. } => 4,
                _ => 2,
            };
        }
        if cause.downcast_ref::<EnsembleError>().is_some()
            || cause.downcast_ref::<CumulantError>().is_some()
        {
            return 2;
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return 2;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
