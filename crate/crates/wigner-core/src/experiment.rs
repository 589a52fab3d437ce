//! Experiment orchestration: reproducible, file-producing runs that tie
//! the samplers, spectra, condition checker, oracle and flow together.
//!
//! Every output file embeds the tool version and a hash of the
//! configuration that produced it.  All randomness derives from
//! `(seed, N, sample index)`, so reruns are byte-identical regardless of
//! worker scheduling.

use crate::cumulant::{condition_report, ConditionReport, CumulantError, CumulantSpec};
use crate::ensemble::{sample_batch, EnsembleError, EnsembleSpec};
use crate::flow::{FlowError, FlowState, GreenCoefficient, PropagationReport, Truncation};
use crate::graph::{enumerate_graphs, GraphError};
use crate::matrix::{HermitianMatrix, MatrixError, NalgebraEigenSolver};
use crate::oracle::{asymptotic_trend, OracleError};
use crate::spectral::{
    green_function, histogram, ks_distance, SemicircleLaw, SpectralError, SpectralSample,
};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Cumulant(#[from] CumulantError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Matrix(#[from] MatrixError),
    #[error("i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn spec_hash<T: Serialize>(value: &T) -> String {
    let canonical = serde_json::to_string(value).expect("value serializes");
    let digest = Sha256::digest(canonical.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Json,
}

fn default_formats() -> Vec<ReportFormat> {
    vec![ReportFormat::Csv, ReportFormat::Json]
}

fn default_bins() -> usize {
    61
}

/// One spectral-convergence experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub ensemble: EnsembleSpec,
    pub n_grid: Vec<usize>,
    pub samples_per_n: usize,
    pub moments: Vec<u32>,
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_formats")]
    pub report_formats: Vec<ReportFormat>,
    #[serde(default = "default_bins")]
    pub bins: usize,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.n_grid.is_empty() || self.n_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ExperimentError::InvalidConfig(
                "n_grid must be non-empty and strictly ascending".into(),
            ));
        }
        if self.samples_per_n == 0 {
            return Err(ExperimentError::InvalidConfig(
                "samples_per_n must be at least 1".into(),
            ));
        }
        if self.moments.is_empty() || self.moments.contains(&0) {
            return Err(ExperimentError::InvalidConfig(
                "moments must be non-empty orders >= 1".into(),
            ));
        }
        if self.bins == 0 {
            return Err(ExperimentError::InvalidConfig("bins must be >= 1".into()));
        }
        self.ensemble.validate()?;
        Ok(())
    }

    /// Hash of the canonical JSON serialization; embedded in every
    /// produced file.
    pub fn hash(&self) -> String {
        spec_hash(self)
    }

    pub fn from_json_file(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text)
            .map_err(|e| ExperimentError::InvalidConfig(format!("{}: {e}", path.display())))
    }
}

/// The scale of the reference law for an ensemble: the Gaussian
/// covariance where cumulants are available, unit scale otherwise.
fn reference_alpha(ensemble: &EnsembleSpec) -> f64 {
    match ensemble {
        EnsembleSpec::Gue { alpha } => *alpha,
        EnsembleSpec::CommonNoise { alpha, .. } => *alpha,
        EnsembleSpec::WignerIid { .. } => crate::ensemble::cumulant_spec_of(ensemble)
            .map(|s| s.alpha())
            .unwrap_or(1.0),
        EnsembleSpec::InvariantPotential { .. } => 1.0,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MomentRow {
    pub n: usize,
    pub k: u32,
    pub estimate: f64,
    pub stderr: f64,
    pub semicircle: f64,
    pub z_score: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceSummary {
    pub tool_version: String,
    pub config_hash: String,
    pub rows: Vec<MomentRow>,
    pub ks_distance: Vec<(usize, f64)>,
    pub files: Vec<PathBuf>,
}

/// Sample -> spectra -> moment tables -> semicircle comparison for each
/// size in the grid; writes one moment CSV and one histogram CSV per
/// size plus a summary JSON.
pub fn run_convergence(
    config: &ExperimentConfig,
    out_dir: &Path,
) -> Result<ConvergenceSummary, ExperimentError> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let hash = config.hash();
    let alpha = reference_alpha(&config.ensemble);
    let law = SemicircleLaw::new(if alpha > 0.0 { alpha } else { 1.0 });
    let solver = NalgebraEigenSolver;
    let mut rows = Vec::new();
    let mut ks = Vec::new();
    let mut files = Vec::new();
    for &n in &config.n_grid {
        // every (seed, n) pair owns its own stream family
        let seed = config.seed ^ (n as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let samples = sample_batch(&config.ensemble, n, seed, config.samples_per_n)?;
        let spectra = SpectralSample::analyze(&samples, &config.moments, &solver)?;
        let distance = ks_distance(&spectra, &law)?;
        ks.push((n, distance));
        let mut n_rows = Vec::new();
        for (&k, &(estimate, stderr)) in &spectra.trace_moments {
            let reference = law.moment(k);
            let z_score = if stderr > 0.0 {
                (estimate - reference) / stderr
            } else {
                0.0
            };
            n_rows.push(MomentRow {
                n,
                k,
                estimate,
                stderr,
                semicircle: reference,
                z_score,
            });
        }
        if config.report_formats.contains(&ReportFormat::Csv) {
            let path = out_dir.join(format!("moments_n{n}.csv"));
            let mut text = csv_header(&hash);
            text.push_str("k,estimate,stderr,semicircle,z_score\n");
            for row in &n_rows {
                text.push_str(&format!(
                    "{},{},{},{},{}\n",
                    row.k, row.estimate, row.stderr, row.semicircle, row.z_score
                ));
            }
            fs::write(&path, text).map_err(io_err(&path))?;
            files.push(path);

            let path = out_dir.join(format!("histogram_n{n}.csv"));
            let bins = histogram(&spectra, &law, config.bins)?;
            let mut text = csv_header(&hash);
            text.push_str("bin_left,bin_right,count,empirical_density,semicircle_density\n");
            for b in &bins {
                text.push_str(&format!(
                    "{},{},{},{},{}\n",
                    b.left, b.right, b.count, b.empirical_density, b.semicircle_density
                ));
            }
            fs::write(&path, text).map_err(io_err(&path))?;
            files.push(path);
        }
        rows.extend(n_rows);
    }
    let summary = ConvergenceSummary {
        tool_version: TOOL_VERSION.to_string(),
        config_hash: hash,
        rows,
        ks_distance: ks,
        files: files.clone(),
    };
    if config.report_formats.contains(&ReportFormat::Json) {
        let path = out_dir.join("summary.json");
        let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
        fs::write(&path, text).map_err(io_err(&path))?;
    }
    Ok(summary)
}

fn csv_header(hash: &str) -> String {
    format!("# wigner {TOOL_VERSION} config={hash}\n")
}

#[derive(Debug, Clone, Serialize)]
pub struct ConditionRun {
    pub tool_version: String,
    pub config_hash: String,
    pub report: ConditionReport,
}

/// Scaling-condition check of a cumulant spec over every graph class
/// within the limits.
pub fn run_condition_check(
    spec: &CumulantSpec,
    max_vertices: usize,
    max_edges: usize,
    n_grid: &[u64],
    out_path: Option<&Path>,
) -> Result<ConditionRun, ExperimentError> {
    let graphs = enumerate_graphs(max_vertices, max_edges)?;
    let report = condition_report(spec, &graphs, n_grid)?;
    let run = ConditionRun {
        tool_version: TOOL_VERSION.to_string(),
        config_hash: spec_hash(spec),
        report,
    };
    if let Some(path) = out_path {
        let text = serde_json::to_string_pretty(&run).expect("report serializes");
        fs::write(path, text).map_err(io_err(path))?;
    }
    Ok(run)
}

#[derive(Debug, Clone, Serialize)]
pub struct FlowRun {
    pub tool_version: String,
    pub config_hash: String,
    pub series: Vec<GreenCoefficient>,
    pub propagation: PropagationReport,
}

/// Iterate the flow of a cumulant spec and emit the resolvent series
/// (CSV), the bound-propagation ledger and the full state dump (JSON).
pub fn run_flow(
    spec: &CumulantSpec,
    orders: usize,
    truncation: Truncation,
    out_dir: Option<&Path>,
) -> Result<FlowRun, ExperimentError> {
    let state = FlowState::initialize(spec, truncation)?;
    let evolved = state.iterate_to(orders)?;
    let series = evolved.green_series(orders as u32 + 2)?;
    let propagation = evolved.verify_bound_propagation()?;
    let run = FlowRun {
        tool_version: TOOL_VERSION.to_string(),
        config_hash: spec_hash(spec),
        series,
        propagation,
    };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join("green_series.csv");
        let mut text = csv_header(&run.config_hash);
        text.push_str("inv_z_power,alpha_sq_power,coefficient\n");
        for c in &run.series {
            text.push_str(&format!(
                "{},{},{}\n",
                c.inv_z_power, c.alpha_sq_power, c.value
            ));
        }
        fs::write(&path, text).map_err(io_err(&path))?;
        let path = dir.join("propagation_ledger.json");
        let text = serde_json::to_string_pretty(&run.propagation).expect("ledger serializes");
        fs::write(&path, text).map_err(io_err(&path))?;
        let path = dir.join("flow_state.json");
        let text = serde_json::to_string_pretty(&evolved.dump()).expect("dump serializes");
        fs::write(&path, text).map_err(io_err(&path))?;
    }
    Ok(run)
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleRow {
    pub n: u64,
    pub k: u32,
    pub exact: f64,
    pub extrapolated: f64,
}

/// Exact finite-size moments over a grid, with the extrapolated limit
/// repeated per row.
pub fn run_oracle(
    spec: &CumulantSpec,
    n_grid: &[u64],
    ks: &[u32],
    out_path: Option<&Path>,
) -> Result<Vec<OracleRow>, ExperimentError> {
    let mut rows = Vec::new();
    for &k in ks {
        let trend = asymptotic_trend(spec, k, n_grid)?;
        for &(n, value) in &trend.per_n {
            rows.push(OracleRow {
                n,
                k,
                exact: value,
                extrapolated: trend.limit,
            });
        }
    }
    if let Some(path) = out_path {
        let mut text = csv_header(&spec_hash(spec));
        text.push_str("N,k,exact,extrapolated\n");
        for row in &rows {
            text.push_str(&format!(
                "{},{},{},{}\n",
                row.n, row.k, row.exact, row.extrapolated
            ));
        }
        fs::write(path, text).map_err(io_err(path))?;
    }
    Ok(rows)
}

/// Draw `count` matrices and dump them in the little-endian binary
/// format, one file per sample, plus a manifest.
pub fn run_sample_dump(
    ensemble: &EnsembleSpec,
    n: usize,
    seed: u64,
    count: usize,
    out_dir: &Path,
) -> Result<Vec<PathBuf>, ExperimentError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let samples = sample_batch(ensemble, n, seed, count)?;
    let mut files = Vec::new();
    for (idx, m) in samples.iter().enumerate() {
        let path = out_dir.join(format!("sample_{idx:04}.mat"));
        let mut file = fs::File::create(&path).map_err(io_err(&path))?;
        m.write_binary(&mut file)?;
        file.flush().map_err(io_err(&path))?;
        files.push(path);
    }
    let manifest = serde_json::json!({
        "tool_version": TOOL_VERSION,
        "config_hash": spec_hash(ensemble),
        "ensemble": ensemble,
        "n": n,
        "seed": seed,
        "count": count,
        "format": "u64-le dimension header, then row-major complex f64 (re, im) pairs",
    });
    let path = out_dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap()).map_err(io_err(&path))?;
    files.push(path);
    Ok(files)
}

/// Histogram CSV of a sampled batch against the semicircle density, with
/// the resolvent boundary density `-Im G(x + i eps) / pi` as an extra
/// column.
pub fn run_spectrum(
    ensemble: &EnsembleSpec,
    n: usize,
    seed: u64,
    count: usize,
    bins: usize,
    epsilon: f64,
    out_path: &Path,
) -> Result<(), ExperimentError> {
    let samples = sample_batch(ensemble, n, seed, count)?;
    let solver = NalgebraEigenSolver;
    let spectra = SpectralSample::analyze(&samples, &[2], &solver)?;
    let alpha = reference_alpha(ensemble);
    let law = SemicircleLaw::new(if alpha > 0.0 { alpha } else { 1.0 });
    let bins = histogram(&spectra, &law, bins)?;
    let mut text = csv_header(&spec_hash(ensemble));
    text.push_str(
        "bin_left,bin_right,count,empirical_density,semicircle_density,green_boundary_density\n",
    );
    for b in &bins {
        let mid = 0.5 * (b.left + b.right);
        let green_density = green_function(Complex64::new(mid, epsilon), law.alpha)
            .map(|g| -g.im / std::f64::consts::PI)
            .unwrap_or(f64::NAN);
        text.push_str(&format!(
            "{},{},{},{},{},{}\n",
            b.left, b.right, b.count, b.empirical_density, b.semicircle_density, green_density
        ));
    }
    fs::write(out_path, text).map_err(io_err(out_path))?;
    Ok(())
}

/// Load a matrix dumped by [`run_sample_dump`].
pub fn load_matrix(path: &Path) -> Result<HermitianMatrix, ExperimentError> {
    let mut file = fs::File::open(path).map_err(io_err(path))?;
    Ok(HermitianMatrix::read_binary(&mut file)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::FlowRational;

    fn tmpdir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("wigner-test-{tag}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            ensemble: EnsembleSpec::Gue { alpha: 1.0 },
            n_grid: vec![2, 4],
            samples_per_n: 3,
            moments: vec![1, 2, 4],
            seed: 7,
            output_dir: None,
            report_formats: vec![ReportFormat::Csv, ReportFormat::Json],
            bins: 11,
        }
    }

    #[test]
    fn degenerate_convergence_run_emits_files() {
        let dir = tmpdir("degenerate");
        let mut config = tiny_config();
        config.n_grid = vec![2];
        config.samples_per_n = 1;
        let summary = run_convergence(&config, &dir).unwrap();
        assert!(dir.join("moments_n2.csv").exists());
        assert!(dir.join("histogram_n2.csv").exists());
        assert!(dir.join("summary.json").exists());
        assert_eq!(summary.rows.len(), 3);
        let text = fs::read_to_string(dir.join("moments_n2.csv")).unwrap();
        assert!(text.starts_with(&format!("# wigner {TOOL_VERSION} config=")));
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn reruns_are_byte_identical() {
        let dir_a = tmpdir("rerun-a");
        let dir_b = tmpdir("rerun-b");
        let config = tiny_config();
        run_convergence(&config, &dir_a).unwrap();
        run_convergence(&config, &dir_b).unwrap();
        for name in ["moments_n2.csv", "moments_n4.csv", "histogram_n2.csv"] {
            let a = fs::read(dir_a.join(name)).unwrap();
            let b = fs::read(dir_b.join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between reruns");
        }
        fs::remove_dir_all(&dir_a).unwrap();
        fs::remove_dir_all(&dir_b).unwrap();
    }

    #[test]
    fn fourth_moment_z_scores_shrink_with_n() {
        // bias-dominated regime: the 1/N^2 finite-size bias of the
        // fourth moment stands out of the Monte Carlo error at 1e4
        // samples, so the z-score against the limit falls with N
        let dir = tmpdir("zshrink");
        let config = ExperimentConfig {
            ensemble: EnsembleSpec::Gue { alpha: 1.0 },
            n_grid: vec![4, 8, 16],
            samples_per_n: 10_000,
            moments: vec![4],
            seed: 7,
            output_dir: None,
            report_formats: vec![ReportFormat::Json],
            bins: 11,
        };
        let summary = run_convergence(&config, &dir).unwrap();
        let zs: Vec<f64> = summary.rows.iter().map(|r| r.z_score.abs()).collect();
        assert_eq!(zs.len(), 3);
        assert!(
            zs[0] > zs[1] && zs[1] > zs[2],
            "z-scores should shrink with N, got {zs:?}"
        );
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut config = tiny_config();
        config.n_grid = vec![4, 4];
        assert!(matches!(
            config.validate(),
            Err(ExperimentError::InvalidConfig(_))
        ));
        let mut config = tiny_config();
        config.samples_per_n = 0;
        assert!(config.validate().is_err());
        let mut config = tiny_config();
        config.moments = vec![];
        assert!(config.validate().is_err());
    }

    #[test]
    fn condition_check_run_writes_report() {
        let dir = tmpdir("condition");
        let spec = CumulantSpec::gaussian(1.0);
        let path = dir.join("report.json");
        let run = run_condition_check(&spec, 3, 3, &[16, 32, 64], Some(&path)).unwrap();
        assert!(run.report.all_pass);
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains("tool_version"));
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn flow_run_writes_series_and_ledger() {
        let dir = tmpdir("flow");
        let spec = CumulantSpec::gaussian(1.0);
        let run = run_flow(
            &spec,
            3,
            Truncation {
                max_t: 3,
                max_vertices: 4,
                max_edges: 4,
            },
            Some(&dir),
        )
        .unwrap();
        assert_eq!(run.series[2].value, FlowRational::new(1, 1));
        assert!(dir.join("green_series.csv").exists());
        assert!(dir.join("propagation_ledger.json").exists());
        assert!(dir.join("flow_state.json").exists());
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn oracle_run_writes_rows() {
        let dir = tmpdir("oracle");
        let spec = CumulantSpec::gaussian(1.0);
        let path = dir.join("oracle.csv");
        let rows = run_oracle(&spec, &[2, 3, 4, 5, 6], &[2, 4], Some(&path)).unwrap();
        assert_eq!(rows.len(), 10);
        let k4_limit = rows.iter().find(|r| r.k == 4).unwrap().extrapolated;
        assert!((k4_limit - 2.0).abs() < 1e-6);
        assert!(path.exists());
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn sample_dump_round_trips() {
        let dir = tmpdir("dump");
        let spec = EnsembleSpec::Gue { alpha: 1.0 };
        let files = run_sample_dump(&spec, 4, 3, 2, &dir).unwrap();
        assert_eq!(files.len(), 3);
        let back = load_matrix(&files[0]).unwrap();
        let direct = crate::ensemble::sample_indexed(&spec, 4, 3, 0).unwrap();
        assert_eq!(back, direct);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn metropolis_config_parses_and_validates() {
        let json = r#"{
            "ensemble": {"type": "invariant_potential", "couplings": {"4": 1.0},
                         "steps": 2, "step_size": 1.5, "burn_in": 5},
            "n_grid": [8],
            "samples_per_n": 2,
            "moments": [2, 4],
            "seed": 11
        }"#;
        let config: ExperimentConfig = serde_json::from_str(json).unwrap();
        config.validate().unwrap();
        assert_eq!(config.bins, 61);
    }
}
