//! Command-line front end: JSON configs, phantom synthesis, and reports.
//!
//! Every report is a JSON envelope holding the tool version, the command,
//! the seed and the fully resolved config next to the results.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::diffmap::{
    align, random_initial, run, verify_fixed_point, Alignment, AlignmentOptions, DiffMapParams, FixedPointResiduals,
    IterationRecord, Termination, DEFAULT_MAX_ITERS, DEFAULT_TOL,
};
use crate::ensembles::{
    empirical_traces, ensemble_average_report, triplet_phase_average, AtomicEnsemble, EmpiricalTraces, Ensemble,
    EnsembleTraceReport, FixedSupportEnsemble, TripletAverage,
};
use crate::error::{Error, Result};
use crate::grid::{GridShape, ObjectGrid, ScalarKind};
use crate::linearized::{lin_fourier_matrix, lin_support_matrix, LinearizationContext};
use crate::projections::{AtomicSupportSpec, FourierData, FourierProjection, Projection, SupportMask};
use crate::rmt::{
    exact_avg_trace2, exact_avg_trace4, limit_traces, mc_avg_traces, mc_rank_table, CanonicalProjectionPair,
    McEstimate,
};
use crate::spectral::{
    compute_traces_with, frobenius_norm_sq, grid_scan, norm_at_optimum, optimal_gammas, sigma_formulas, GammaPair,
    PerpTrace, SigmaFormulas, TraceSet,
};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Real dimension up to which the optimal mode linearizes the phantom exactly.
pub const DENSE_MAX_DIM: usize = 2048;

#[derive(Debug, Parser)]
#[command(name = "phaselab", version, about = "Difference-map phase retrieval laboratory")]
pub struct Cli {
    /// Seed for every random draw (overrides the config's seed).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for sweeps and Monte Carlo (default: logical cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Directory for all outputs.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    /// JSON config for the subcommand; defaults apply to missing fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Synthesize a ground-truth object, its support and Fourier moduli.
    Phantom,
    /// Run the difference map on a phantom's data.
    Reconstruct,
    /// Grid of (β, γ) runs across seeds.
    Sweep,
    /// Linearized traces of a phantom against their closed forms.
    Traces,
    /// Optimal γ for a trace set.
    GammaOpt,
    /// Haar Monte Carlo against exact trace averages.
    RmtCheck,
    /// Object-ensemble trace averages.
    EnsembleAvg,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Phantom => "phantom",
            Command::Reconstruct => "reconstruct",
            Command::Sweep => "sweep",
            Command::Traces => "traces",
            Command::GammaOpt => "gamma-opt",
            Command::RmtCheck => "rmt-check",
            Command::EnsembleAvg => "ensemble-avg",
        }
    }
}

/// How a command finished, for the process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    MaxIters,
    Diverged,
}

impl Outcome {
    pub fn exit_code(self) -> i32 {
        match self {
            Outcome::Success => 0,
            Outcome::MaxIters => 2,
            Outcome::Diverged => 3,
        }
    }
}

/// 4 for configuration problems, 1 for everything else.
pub fn error_exit_code(err: &Error) -> i32 {
    match err {
        Error::Invalid(_) | Error::Json(_) | Error::Shape(_) | Error::InfeasiblePacking(_) => 4,
        _ => 1,
    }
}

#[derive(Debug, Serialize)]
pub struct Report<'a, C: Serialize, R: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub seed: u64,
    pub config: &'a C,
    pub result: &'a R,
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Error::Invalid(format!("cannot read config {}: {e}", p.display())))?;
            Ok(serde_json::from_str(&text)?)
        }
    }
}

fn write_report<C: Serialize, R: Serialize>(path: &Path, command: Command, seed: u64, config: &C, result: &R) -> Result<()> {
    let report = Report { tool: "phaselab", version: VERSION, command: command.name(), seed, config, result };
    let file = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(file, &report)?;
    Ok(())
}

/// Header is written even when there are no rows.
fn write_csv<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

fn write_grid(path: &Path, obj: &ObjectGrid) -> Result<()> {
    obj.write_to(BufWriter::new(File::create(path)?))
}

fn read_grid(path: &Path) -> Result<ObjectGrid> {
    ObjectGrid::read_from(BufReader::new(File::open(path)?))
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::Invalid(format!("{name} must be positive and finite, got {v}")))
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if beta.is_finite() && beta != 0.0 {
        Ok(())
    } else {
        Err(Error::Invalid(format!("beta must be finite and nonzero, got {beta}")))
    }
}

// ---------------------------------------------------------------- phantoms

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum PhantomSupport {
    /// `round(σN)` cells closest to the origin corner by coordinate sum.
    Fixed { sigma: f64 },
    /// Equal cubic atoms placed uniformly without overlap.
    Atomic {
        atom_count: usize,
        width: usize,
        #[serde(default = "one")]
        amplitude: f64,
    },
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub name: String,
    pub dims: Vec<usize>,
    pub kind: ScalarKind,
    pub support: PhantomSupport,
    /// Leave the `q = 0` sample out of the measured data.
    pub exclude_origin: bool,
    pub seed: Option<u64>,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            name: "phantom".into(),
            dims: vec![32, 32],
            kind: ScalarKind::Complex,
            support: PhantomSupport::Fixed { sigma: 0.25 },
            exclude_origin: false,
            seed: None,
        }
    }
}

/// Ground truth with its constraint data.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub truth: ObjectGrid,
    pub mask: SupportMask,
    pub atoms: Option<AtomicSupportSpec>,
    pub data: FourierData,
}

impl Phantom {
    pub fn sigma(&self) -> f64 {
        self.mask.sigma()
    }

    /// Support constraint used for reconstruction: atomic when the phantom has atoms.
    pub fn support_projection(&self) -> Box<dyn Projection> {
        match &self.atoms {
            Some(spec) => Box::new(spec.clone()),
            None => Box::new(self.mask.clone()),
        }
    }

    pub fn paths(prefix: &Path) -> PhantomPaths {
        let with = |ext: &str| {
            let mut s = prefix.as_os_str().to_owned();
            s.push(ext);
            PathBuf::from(s)
        };
        PhantomPaths {
            truth: with(".truth.grid"),
            mask: with(".mask.json"),
            data: with(".fdat"),
            atoms: with(".atoms.json"),
            report: with(".json"),
        }
    }

    pub fn save(&self, prefix: &Path) -> Result<PhantomPaths> {
        let paths = Self::paths(prefix);
        write_grid(&paths.truth, &self.truth)?;
        fs::write(&paths.mask, self.mask.to_json()?)?;
        self.data.write_to(BufWriter::new(File::create(&paths.data)?))?;
        if let Some(spec) = &self.atoms {
            fs::write(&paths.atoms, serde_json::to_string_pretty(spec)?)?;
        }
        Ok(paths)
    }

    pub fn load(prefix: &Path) -> Result<Self> {
        let paths = Self::paths(prefix);
        let truth = read_grid(&paths.truth)?;
        let mask = SupportMask::from_json(&fs::read_to_string(&paths.mask)?)?;
        let data = FourierData::read_from(BufReader::new(File::open(&paths.data)?))?;
        let atoms = if paths.atoms.exists() {
            Some(serde_json::from_str(&fs::read_to_string(&paths.atoms)?)?)
        } else {
            None
        };
        if mask.shape() != truth.shape() || data.shape() != truth.shape() {
            return Err(Error::Shape("phantom files disagree on the grid".into()));
        }
        Ok(Self { truth, mask, atoms, data })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PhantomPaths {
    pub truth: PathBuf,
    pub mask: PathBuf,
    pub data: PathBuf,
    pub atoms: PathBuf,
    pub report: PathBuf,
}

/// The `round(σN)` cells of smallest coordinate sum (ties by index). Not
/// centrosymmetric, so the conjugate twin does not fit the same support.
pub fn corner_support(shape: &GridShape, sigma: f64) -> Result<SupportMask> {
    let n = shape.len();
    let count = (sigma * n as f64).round() as usize;
    if !(sigma > 0.0 && sigma <= 1.0) || count == 0 {
        return Err(Error::Invalid(format!("support fraction {sigma} gives no cells on {n} samples")));
    }
    let mut cells: Vec<(usize, usize)> = (0..n).map(|i| (shape.coords_of(i).iter().sum(), i)).collect();
    cells.sort_unstable();
    SupportMask::new(shape.clone(), cells.into_iter().take(count).map(|(_, i)| i))
}

pub fn make_phantom(config: &PhantomConfig, seed: u64) -> Result<Phantom> {
    let shape = GridShape::new(config.dims.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (truth, mask, atoms) = match &config.support {
        PhantomSupport::Fixed { sigma } => {
            let mask = corner_support(&shape, *sigma)?;
            let e = Ensemble::FixedSupport(FixedSupportEnsemble { mask, kind: config.kind });
            let s = crate::ensembles::sample_object(&e, &mut rng)?;
            (s.object, s.mask, None)
        }
        PhantomSupport::Atomic { atom_count, width, amplitude } => {
            let spec = AtomicSupportSpec::cube(shape.clone(), *atom_count, *width)?;
            let e = Ensemble::Atomic(AtomicEnsemble::new(spec.clone(), *amplitude)?);
            let s = crate::ensembles::sample_object(&e, &mut rng)?;
            let truth = match config.kind {
                ScalarKind::Real => s.object,
                ScalarKind::Complex => ObjectGrid::from_complex(shape.clone(), s.object.into_values())?,
            };
            (truth, s.mask, Some(spec))
        }
    };
    let full = FourierData::from_solution(&truth);
    let mut measured = vec![true; shape.len()];
    if config.exclude_origin {
        measured[0] = false;
    }
    let data = FourierData::new(shape, full.moduli().to_vec(), measured, None)?;
    Ok(Phantom { truth, mask, atoms, data })
}

#[derive(Debug, Clone, Serialize)]
pub struct PhantomResult {
    pub sigma: f64,
    pub support_size: usize,
    pub grid_size: usize,
    pub kind: ScalarKind,
    pub measured_samples: usize,
    /// `Σ_q F_q²` over every sample, against `‖ρ‖²`.
    pub sum_moduli_sq: f64,
    pub norm_sq: f64,
    pub files: PhantomPaths,
}

pub fn cmd_phantom(config: &PhantomConfig, seed: u64, out_dir: &Path) -> Result<PhantomResult> {
    let phantom = make_phantom(config, seed)?;
    let paths = phantom.save(&out_dir.join(&config.name))?;
    let full = FourierData::from_solution(&phantom.truth);
    let result = PhantomResult {
        sigma: phantom.sigma(),
        support_size: phantom.mask.size(),
        grid_size: phantom.truth.shape().len(),
        kind: phantom.truth.kind(),
        measured_samples: phantom.data.measured_count(),
        sum_moduli_sq: full.moduli().iter().map(|f| f * f).sum(),
        norm_sq: phantom.truth.norm_sq(),
        files: paths.clone(),
    };
    write_report(&paths.report, Command::Phantom, seed, config, &result)?;
    Ok(result)
}

// ---------------------------------------------------------------- gamma

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum GammaMode {
    Explicit { gamma1: f64, gamma2: f64 },
    /// Minimizer of the linearized Frobenius norm.
    Optimal,
    /// `(−1, 1/β)`
    Hio,
    /// Small-support limit `(−1/β, (3 − β)/(2β))`.
    SigmaLimit,
}

impl GammaMode {
    pub fn label(&self) -> &'static str {
        match self {
            GammaMode::Explicit { .. } => "explicit",
            GammaMode::Optimal => "optimal",
            GammaMode::Hio => "hio",
            GammaMode::SigmaLimit => "sigma-limit",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GammaResolution {
    pub mode: &'static str,
    /// `dense-traces`, `sigma-formulas`, or the mode name for fixed rules.
    pub route: &'static str,
    pub gamma1: f64,
    pub gamma2: f64,
    pub traces: Option<TraceSet>,
}

/// Linearized traces of a phantom at its ground truth. `t_⊥` assumes the
/// ranges meet only along the global-phase direction for complex objects.
pub fn phantom_traces(phantom: &Phantom, zero_threshold: f64, perp: Option<PerpTrace>) -> Result<TraceSet> {
    let kind = phantom.truth.kind();
    let ctx = LinearizationContext::new(&phantom.truth, &phantom.data, zero_threshold)?;
    let pf = lin_fourier_matrix(&ctx, &phantom.data, kind)?;
    let ps = lin_support_matrix(&phantom.mask, kind);
    let perp = perp.unwrap_or(match kind {
        ScalarKind::Real => PerpTrace::AssumeOverconstrained,
        ScalarKind::Complex => PerpTrace::AssumeIntersection(1),
    });
    compute_traces_with(&ps, &pf, perp)
}

pub fn resolve_gamma(mode: &GammaMode, beta: f64, phantom: &Phantom, dense_max_dim: usize, zero_threshold: f64) -> Result<GammaResolution> {
    check_beta(beta)?;
    let pair = |route, g: GammaPair, traces| GammaResolution {
        mode: mode.label(),
        route,
        gamma1: g.gamma1,
        gamma2: g.gamma2,
        traces,
    };
    Ok(match *mode {
        GammaMode::Explicit { gamma1, gamma2 } => pair("explicit", GammaPair { gamma1, gamma2 }, None),
        GammaMode::Hio => pair("hio", GammaPair { gamma1: -1.0, gamma2: 1.0 / beta }, None),
        GammaMode::SigmaLimit => pair("sigma-limit", sigma_formulas(phantom.sigma(), beta, 0.5)?.small_sigma, None),
        GammaMode::Optimal => {
            let dim = phantom.truth.shape().len() * phantom.truth.kind().real_multiplicity();
            if dim <= dense_max_dim {
                let t = phantom_traces(phantom, zero_threshold, None)?;
                pair("dense-traces", optimal_gammas(&t, beta)?, Some(t))
            } else {
                let f = sigma_formulas(phantom.sigma(), beta, 0.5)?;
                let g = f.at_sigma.expect("finite-sigma forms exist at t_F = 1/2");
                pair("sigma-formulas", g, None)
            }
        }
    })
}

// ---------------------------------------------------------------- reconstruct

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconstructConfig {
    pub name: String,
    /// Path prefix of the phantom files; default `<out-dir>/phantom`.
    pub phantom: Option<PathBuf>,
    pub beta: f64,
    pub gamma: GammaMode,
    pub tol: f64,
    pub max_iters: usize,
    pub dense_max_dim: usize,
    pub zero_threshold: f64,
    pub seed: Option<u64>,
}

impl Default for ReconstructConfig {
    fn default() -> Self {
        Self {
            name: "reconstruct".into(),
            phantom: None,
            beta: 1.0,
            gamma: GammaMode::Optimal,
            tol: DEFAULT_TOL,
            max_iters: DEFAULT_MAX_ITERS,
            dense_max_dim: DENSE_MAX_DIM,
            zero_threshold: 0.0,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Converged,
    MaxIters,
    Diverged,
}

impl From<Termination> for RunStatus {
    fn from(t: Termination) -> Self {
        match t {
            Termination::Converged => RunStatus::Converged,
            Termination::MaxIters => RunStatus::MaxIters,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ReconstructResult {
    pub termination: RunStatus,
    pub iterations: usize,
    pub final_error: Option<f64>,
    pub sigma: f64,
    pub gamma: GammaResolution,
    pub beta: f64,
    /// Predicted `‖d_⊥‖²` at the resolved parameters, when traces were computed.
    pub d_perp_sq: Option<f64>,
    pub alignment: Option<Alignment>,
    pub residuals: Option<FixedPointResiduals>,
    pub solution_file: Option<PathBuf>,
    pub iterations_file: PathBuf,
}

/// Runs one reconstruction from a seeded random start.
pub fn reconstruct_phantom(phantom: &Phantom, params: &DiffMapParams, tol: f64, max_iters: usize, seed: u64) -> Result<crate::diffmap::RunResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let initial = random_initial(&phantom.data, phantom.truth.kind(), &mut rng);
    let p1 = phantom.support_projection();
    let p2 = FourierProjection::new(phantom.data.clone());
    run(&initial, params, p1.as_ref(), &p2, tol, max_iters)
}

pub fn cmd_reconstruct(config: &ReconstructConfig, seed: u64, out_dir: &Path) -> Result<(Outcome, ReconstructResult)> {
    check_positive("tol", config.tol)?;
    if config.max_iters == 0 {
        return Err(Error::Invalid("max_iters must be at least 1".into()));
    }
    let prefix = config.phantom.clone().unwrap_or_else(|| out_dir.join("phantom"));
    let phantom = Phantom::load(&prefix)?;
    let gamma = resolve_gamma(&config.gamma, config.beta, &phantom, config.dense_max_dim, config.zero_threshold)?;
    let params = DiffMapParams::new(config.beta, gamma.gamma1, gamma.gamma2)?;
    let d_perp_sq = gamma.traces.as_ref().map(|t| frobenius_norm_sq(t, &params));
    let iterations_file = out_dir.join(format!("{}.iterations.csv", config.name));
    let header = ["iteration", "error", "elapsed_secs"];
    let mut result = ReconstructResult {
        termination: RunStatus::Diverged,
        iterations: 0,
        final_error: None,
        sigma: phantom.sigma(),
        gamma,
        beta: config.beta,
        d_perp_sq,
        alignment: None,
        residuals: None,
        solution_file: None,
        iterations_file: iterations_file.clone(),
    };
    let outcome = match reconstruct_phantom(&phantom, &params, config.tol, config.max_iters, seed) {
        Ok(res) => {
            write_csv(&iterations_file, &header, &res.records)?;
            let solution_file = out_dir.join(format!("{}.solution.grid", config.name));
            write_grid(&solution_file, &res.solution)?;
            let p1 = phantom.support_projection();
            let p2 = FourierProjection::new(phantom.data.clone());
            result.residuals = Some(verify_fixed_point(&res.final_object, &params, p1.as_ref(), &p2)?);
            result.alignment = Some(align(&res.solution, &phantom.truth, AlignmentOptions::for_kind(phantom.truth.kind()))?);
            result.termination = res.termination.into();
            result.iterations = res.iterations();
            result.final_error = Some(res.final_error());
            result.solution_file = Some(solution_file);
            match res.termination {
                Termination::Converged => Outcome::Success,
                Termination::MaxIters => Outcome::MaxIters,
            }
        }
        Err(Error::Diverged { iteration, records, .. }) => {
            write_csv(&iterations_file, &header, &records)?;
            result.iterations = iteration;
            result.final_error = records.last().map(|r: &IterationRecord| r.error);
            Outcome::Diverged
        }
        Err(e) => return Err(e),
    };
    write_report(&out_dir.join(format!("{}.json", config.name)), Command::Reconstruct, seed, config, &result)?;
    Ok((outcome, result))
}

// ---------------------------------------------------------------- sweep

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub name: String,
    /// Phantom prefixes; default `[<out-dir>/phantom]`.
    pub phantoms: Vec<PathBuf>,
    pub betas: Vec<f64>,
    /// Explicit grid `gamma1 × gamma2`, run in addition to `modes`.
    pub gamma1: Vec<f64>,
    pub gamma2: Vec<f64>,
    pub modes: Vec<GammaMode>,
    pub seeds: Vec<u64>,
    pub tol: f64,
    pub max_iters: usize,
    pub dense_max_dim: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            name: "sweep".into(),
            phantoms: Vec::new(),
            betas: vec![1.0],
            gamma1: Vec::new(),
            gamma2: Vec::new(),
            modes: vec![GammaMode::Optimal, GammaMode::Hio, GammaMode::SigmaLimit],
            seeds: vec![0, 1, 2],
            tol: DEFAULT_TOL,
            max_iters: 2000,
            dense_max_dim: DENSE_MAX_DIM,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub phantom: String,
    pub label: String,
    pub beta: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub sigma: f64,
    pub seed: u64,
    pub iterations: usize,
    pub converged: bool,
    pub final_error: f64,
    /// Predicted `‖d_⊥‖²`; empty when the phantom is too large for dense traces.
    pub d_perp_sq: Option<f64>,
}

pub const SWEEP_HEADER: [&str; 11] =
    ["phantom", "label", "beta", "gamma1", "gamma2", "sigma", "seed", "iterations", "converged", "final_error", "d_perp_sq"];

#[derive(Debug, Clone, Serialize)]
pub struct SweepSummaryEntry {
    pub phantom: String,
    pub label: String,
    pub beta: f64,
    pub runs: usize,
    pub converged: usize,
    pub mean_iterations_converged: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepResult {
    pub rows: usize,
    pub summary: Vec<SweepSummaryEntry>,
    /// Row with the smallest predicted `‖d_⊥‖²` among explicit grid points.
    pub grid_minimizer: Option<SweepRow>,
    pub csv_file: PathBuf,
}

struct SweepJob {
    phantom: usize,
    label: String,
    beta: f64,
    gamma: GammaPair,
    seed: u64,
}

pub fn cmd_sweep(config: &SweepConfig, out_dir: &Path) -> Result<SweepResult> {
    check_positive("tol", config.tol)?;
    if config.max_iters == 0 {
        return Err(Error::Invalid("max_iters must be at least 1".into()));
    }
    for &b in &config.betas {
        check_beta(b)?;
    }
    let prefixes = if config.phantoms.is_empty() { vec![out_dir.join("phantom")] } else { config.phantoms.clone() };
    let phantoms: Vec<Phantom> = prefixes.iter().map(|p| Phantom::load(p)).collect::<Result<_>>()?;
    let traces: Vec<Option<TraceSet>> = phantoms
        .iter()
        .map(|p| {
            let dim = p.truth.shape().len() * p.truth.kind().real_multiplicity();
            if dim <= config.dense_max_dim {
                phantom_traces(p, 0.0, None).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect::<Result<_>>()?;

    let mut jobs = Vec::new();
    for (pi, phantom) in phantoms.iter().enumerate() {
        for &beta in &config.betas {
            let mut pairs: Vec<(String, GammaPair)> = Vec::new();
            for &g1 in &config.gamma1 {
                for &g2 in &config.gamma2 {
                    pairs.push(("grid".into(), GammaPair { gamma1: g1, gamma2: g2 }));
                }
            }
            for mode in &config.modes {
                let r = match (mode, &traces[pi]) {
                    (GammaMode::Optimal, Some(t)) => {
                        let g = optimal_gammas(t, beta)?;
                        GammaResolution { mode: "optimal", route: "dense-traces", gamma1: g.gamma1, gamma2: g.gamma2, traces: None }
                    }
                    _ => resolve_gamma(mode, beta, phantom, config.dense_max_dim, 0.0)?,
                };
                pairs.push((mode.label().into(), GammaPair { gamma1: r.gamma1, gamma2: r.gamma2 }));
            }
            for (label, gamma) in pairs {
                for &seed in &config.seeds {
                    jobs.push(SweepJob { phantom: pi, label: label.clone(), beta, gamma, seed });
                }
            }
        }
    }

    let rows: Vec<SweepRow> = jobs
        .par_iter()
        .map(|job| {
            let phantom = &phantoms[job.phantom];
            let params = DiffMapParams::new(job.beta, job.gamma.gamma1, job.gamma.gamma2)?;
            let d_perp_sq = traces[job.phantom].as_ref().map(|t| frobenius_norm_sq(t, &params));
            let (iterations, converged, final_error) =
                match reconstruct_phantom(phantom, &params, config.tol, config.max_iters, job.seed) {
                    Ok(res) => (res.iterations(), res.termination == Termination::Converged, res.final_error()),
                    Err(Error::Diverged { iteration, .. }) => (iteration, false, f64::INFINITY),
                    Err(e) => return Err(e),
                };
            Ok(SweepRow {
                phantom: prefixes[job.phantom].display().to_string(),
                label: job.label.clone(),
                beta: job.beta,
                gamma1: job.gamma.gamma1,
                gamma2: job.gamma.gamma2,
                sigma: phantom.sigma(),
                seed: job.seed,
                iterations,
                converged,
                final_error,
                d_perp_sq,
            })
        })
        .collect::<Result<_>>()?;

    let csv_file = out_dir.join(format!("{}.csv", config.name));
    write_csv(&csv_file, &SWEEP_HEADER, &rows)?;

    let mut summary: Vec<SweepSummaryEntry> = Vec::new();
    for row in &rows {
        let entry = match summary
            .iter_mut()
            .find(|e| e.phantom == row.phantom && e.label == row.label && e.beta == row.beta)
        {
            Some(e) => e,
            None => {
                summary.push(SweepSummaryEntry {
                    phantom: row.phantom.clone(),
                    label: row.label.clone(),
                    beta: row.beta,
                    runs: 0,
                    converged: 0,
                    mean_iterations_converged: None,
                });
                summary.last_mut().expect("just pushed")
            }
        };
        entry.runs += 1;
        if row.converged {
            let prev = entry.mean_iterations_converged.unwrap_or(0.0) * entry.converged as f64;
            entry.converged += 1;
            entry.mean_iterations_converged = Some((prev + row.iterations as f64) / entry.converged as f64);
        }
    }
    let grid_minimizer = rows
        .iter()
        .filter(|r| r.label == "grid" && r.d_perp_sq.is_some())
        .min_by(|a, b| a.d_perp_sq.partial_cmp(&b.d_perp_sq).expect("finite norms"))
        .cloned();
    let result = SweepResult { rows: rows.len(), summary, grid_minimizer, csv_file };
    Ok(result)
}

// ---------------------------------------------------------------- traces

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TracesConfig {
    pub name: String,
    pub phantom: Option<PathBuf>,
    pub zero_threshold: f64,
    /// Real dimension up to which `t_⊥` comes from an explicit `π_⊥`.
    pub exact_perp_max_dim: usize,
}

impl Default for TracesConfig {
    fn default() -> Self {
        Self { name: "traces".into(), phantom: None, zero_threshold: 0.0, exact_perp_max_dim: 512 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TracesResult {
    pub sigma: f64,
    pub kind: ScalarKind,
    pub dim: usize,
    pub perp_route: PerpTrace,
    /// Dense-matrix traces with `π₁ = π_S`, `π₂ = π_F`.
    pub traces: TraceSet,
    /// Explicit Fourier-sum evaluation, when every sample is measured.
    pub explicit_sums: Option<EmpiricalTraces>,
    /// Random-matrix values `t_F = ½`, `t_SF = σ/2`, `t_SFSF = σ/4 + σ²/4`.
    pub random_matrix: TraceSet,
}

pub fn cmd_traces(config: &TracesConfig, out_dir: &Path) -> Result<TracesResult> {
    let prefix = config.phantom.clone().unwrap_or_else(|| out_dir.join("phantom"));
    let phantom = Phantom::load(&prefix)?;
    let kind = phantom.truth.kind();
    let dim = phantom.truth.shape().len() * kind.real_multiplicity();
    let perp = if dim <= config.exact_perp_max_dim {
        PerpTrace::Exact
    } else {
        match kind {
            ScalarKind::Real => PerpTrace::AssumeOverconstrained,
            ScalarKind::Complex => PerpTrace::AssumeIntersection(1),
        }
    };
    let traces = phantom_traces(&phantom, config.zero_threshold, Some(perp))?;
    let explicit_sums = if phantom.data.measured_count() == phantom.truth.shape().len() {
        Some(empirical_traces(&phantom.truth, &phantom.mask, &phantom.data)?)
    } else {
        None
    };
    Ok(TracesResult {
        sigma: phantom.sigma(),
        kind,
        dim,
        perp_route: perp,
        traces,
        explicit_sums,
        random_matrix: TraceSet::random_matrix(phantom.sigma(), 0.5),
    })
}

// ---------------------------------------------------------------- gamma-opt

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TraceSource {
    Explicit(TraceSet),
    RandomMatrix { sigma: f64, t_f: f64 },
    Phantom { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GammaOptConfig {
    pub name: String,
    pub traces: TraceSource,
    pub beta: f64,
    pub grid_points: usize,
    pub grid_half_width: f64,
}

impl Default for GammaOptConfig {
    fn default() -> Self {
        Self {
            name: "gamma-opt".into(),
            traces: TraceSource::RandomMatrix { sigma: 0.25, t_f: 0.5 },
            beta: 1.0,
            grid_points: 41,
            grid_half_width: 0.5,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GridScanMin {
    pub norm: f64,
    pub gamma1: f64,
    pub gamma2: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GammaOptResult {
    pub traces: TraceSet,
    pub beta: f64,
    pub gamma_opt: GammaPair,
    pub norm_at_opt: f64,
    pub grid_scan_min: GridScanMin,
    /// Closed forms in `σ` when the traces come from the random-matrix model.
    pub sigma_formulas: Option<SigmaFormulas>,
}

pub fn cmd_gamma_opt(config: &GammaOptConfig) -> Result<GammaOptResult> {
    check_beta(config.beta)?;
    let (traces, formulas) = match &config.traces {
        TraceSource::Explicit(t) => (*t, None),
        TraceSource::RandomMatrix { sigma, t_f } => {
            (TraceSet::random_matrix(*sigma, *t_f), Some(sigma_formulas(*sigma, config.beta, *t_f)?))
        }
        TraceSource::Phantom { path } => (phantom_traces(&Phantom::load(path)?, 0.0, None)?, None),
    };
    let gamma_opt = optimal_gammas(&traces, config.beta)?;
    let norm_at_opt = norm_at_optimum(&traces, config.beta)?;
    let (norm, g) = grid_scan(&traces, config.beta, gamma_opt, config.grid_half_width, config.grid_points)?;
    Ok(GammaOptResult {
        traces,
        beta: config.beta,
        gamma_opt,
        norm_at_opt,
        grid_scan_min: GridScanMin { norm, gamma1: g.gamma1, gamma2: g.gamma2 },
        sigma_formulas: formulas,
    })
}

// ---------------------------------------------------------------- rmt-check

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RmtCheckConfig {
    pub name: String,
    pub sizes: Vec<usize>,
    pub samples: usize,
    /// Sizes at which exact normalized averages are compared with their limits
    /// for ranks `(n/4, n/2)`.
    pub limit_sizes: Vec<usize>,
    pub seed: Option<u64>,
}

impl Default for RmtCheckConfig {
    fn default() -> Self {
        Self { name: "rmt".into(), sizes: vec![3, 8], samples: 200_000, limit_sizes: vec![64, 256], seed: None }
    }
}

/// Unnormalized trace averages for one rank pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RmtRow {
    pub n: usize,
    pub rank1: usize,
    pub rank2: usize,
    pub exact2: f64,
    pub mc2: f64,
    pub se2: f64,
    pub exact4: f64,
    pub mc4: f64,
    pub se4: f64,
    pub z2: f64,
    pub z4: f64,
}

pub const RMT_HEADER: [&str; 11] = ["n", "rank1", "rank2", "exact2", "mc2", "se2", "exact4", "mc4", "se4", "z2", "z4"];

fn z_score(mean: f64, se: f64, target: f64) -> f64 {
    crate::ensembles::MeanSe { mean, se }.z_score(target)
}

/// Rows for every rank pair of size `n`, from `samples` Haar matrices.
pub fn rmt_rows(n: usize, samples: usize, seed: u64) -> Result<Vec<RmtRow>> {
    let estimates: Vec<((usize, usize), McEstimate)> = if n <= 16 {
        let table = mc_rank_table(n, samples, seed)?;
        (0..=n).flat_map(|r1| (0..=n).map(move |r2| (r1, r2))).zip(table).collect()
    } else {
        let mut out = Vec::new();
        for r1 in 0..=n {
            for r2 in 0..=n {
                out.push(((r1, r2), mc_avg_traces(&CanonicalProjectionPair::new(n, r1, r2)?, samples, seed)?));
            }
        }
        out
    };
    let nf = n as f64;
    estimates
        .into_iter()
        .map(|((rank1, rank2), e)| {
            let pair = CanonicalProjectionPair::new(n, rank1, rank2)?;
            let exact2 = exact_avg_trace2(&pair)?;
            let exact4 = exact_avg_trace4(&pair)?;
            let (mc2, se2, mc4, se4) = (e.mean_t12 * nf, e.se_t12 * nf, e.mean_t1212 * nf, e.se_t1212 * nf);
            Ok(RmtRow {
                n,
                rank1,
                rank2,
                exact2,
                mc2,
                se2,
                exact4,
                mc4,
                se4,
                z2: z_score(mc2, se2, exact2),
                z4: z_score(mc4, se4, exact4),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct LimitRow {
    pub n: usize,
    pub rank1: usize,
    pub rank2: usize,
    pub exact_t12: f64,
    pub limit_t12: f64,
    pub exact_t1212: f64,
    pub limit_t1212: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RmtCheckResult {
    pub rows: usize,
    pub within_3se: usize,
    pub checks: usize,
    pub max_abs_z: f64,
    pub limits: Vec<LimitRow>,
    pub csv_file: PathBuf,
}

pub fn cmd_rmt_check(config: &RmtCheckConfig, seed: u64, out_dir: &Path) -> Result<RmtCheckResult> {
    if config.samples < 2 {
        return Err(Error::Invalid("samples must be at least 2".into()));
    }
    let mut rows = Vec::new();
    for (i, &n) in config.sizes.iter().enumerate() {
        if n < 2 {
            return Err(Error::Invalid(format!("matrix size must be at least 2, got {n}")));
        }
        rows.extend(rmt_rows(n, config.samples, seed.wrapping_add(i as u64))?);
    }
    let csv_file = out_dir.join(format!("{}.csv", config.name));
    write_csv(&csv_file, &RMT_HEADER, &rows)?;
    let zs: Vec<f64> = rows.iter().flat_map(|r| [r.z2, r.z4]).collect();
    let mut limits = Vec::new();
    for &n in &config.limit_sizes {
        let (r1, r2) = (n / 4, n / 2);
        let pair = CanonicalProjectionPair::new(n, r1, r2)?;
        let (l2, l4) = limit_traces(r1 as f64 / n as f64, r2 as f64 / n as f64);
        limits.push(LimitRow {
            n,
            rank1: r1,
            rank2: r2,
            exact_t12: exact_avg_trace2(&pair)? / n as f64,
            limit_t12: l2,
            exact_t1212: exact_avg_trace4(&pair)? / n as f64,
            limit_t1212: l4,
        });
    }
    Ok(RmtCheckResult {
        rows: rows.len(),
        within_3se: zs.iter().filter(|z| z.abs() <= 3.0).count(),
        checks: zs.len(),
        max_abs_z: zs.iter().fold(0.0, |m, z| m.max(z.abs())),
        limits,
        csv_file,
    })
}

// ---------------------------------------------------------------- ensemble-avg

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnsembleSpec {
    FixedSupport {
        dims: Vec<usize>,
        sigma: f64,
        kind: ScalarKind,
    },
    Atomic {
        dims: Vec<usize>,
        atom_count: usize,
        width: usize,
        #[serde(default = "one")]
        amplitude: f64,
    },
}

impl EnsembleSpec {
    pub fn build(&self) -> Result<Ensemble> {
        Ok(match self {
            EnsembleSpec::FixedSupport { dims, sigma, kind } => {
                let mask = corner_support(&GridShape::new(dims.clone())?, *sigma)?;
                Ensemble::FixedSupport(FixedSupportEnsemble { mask, kind: *kind })
            }
            EnsembleSpec::Atomic { dims, atom_count, width, amplitude } => {
                let spec = AtomicSupportSpec::cube(GridShape::new(dims.clone())?, *atom_count, *width)?;
                Ensemble::Atomic(AtomicEnsemble::new(spec, *amplitude)?)
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleAvgConfig {
    pub name: String,
    pub ensemble: EnsembleSpec,
    pub samples: usize,
    /// Pairs per sample for the triplet-phase average (atomic ensembles only).
    pub triplet_pairs: usize,
    pub seed: Option<u64>,
}

impl Default for EnsembleAvgConfig {
    fn default() -> Self {
        Self {
            name: "ensemble".into(),
            ensemble: EnsembleSpec::Atomic { dims: vec![32, 32], atom_count: 16, width: 3, amplitude: 1.0 },
            samples: 1000,
            triplet_pairs: 64,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EnsembleRow {
    pub sample: usize,
    pub t_f: f64,
    pub t_sf: f64,
    pub t_sfsf: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EnsembleAvgResult {
    pub report: EnsembleTraceReport,
    pub triplet: Option<TripletAverage>,
    pub csv_file: PathBuf,
}

pub fn cmd_ensemble_avg(config: &EnsembleAvgConfig, seed: u64, out_dir: &Path) -> Result<EnsembleAvgResult> {
    let ensemble = config.ensemble.build()?;
    let report = ensemble_average_report(&ensemble, config.samples, seed)?;
    let rows: Vec<EnsembleRow> = report
        .per_sample
        .iter()
        .enumerate()
        .map(|(sample, t)| EnsembleRow { sample, t_f: t.t_f, t_sf: t.t_sf, t_sfsf: t.t_sfsf })
        .collect();
    let csv_file = out_dir.join(format!("{}.csv", config.name));
    write_csv(&csv_file, &["sample", "t_F", "t_SF", "t_SFSF"], &rows)?;
    let triplet = match (&ensemble, config.triplet_pairs) {
        (Ensemble::Atomic(a), p) if p > 0 => Some(triplet_phase_average(a, config.samples, p, seed)?),
        _ => None,
    };
    Ok(EnsembleAvgResult { report, triplet, csv_file })
}

// ---------------------------------------------------------------- dispatch

fn resolve_seed(cli: Option<u64>, config: Option<u64>) -> u64 {
    cli.or(config).unwrap_or(0)
}

pub fn run_cli(cli: &Cli) -> Result<Outcome> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Invalid("--threads must be at least 1".into()));
        }
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    fs::create_dir_all(&cli.out_dir)?;
    let out = cli.out_dir.as_path();
    let cfg = cli.config.as_deref();
    let cmd = cli.command;
    let report_path = |name: &str| out.join(format!("{name}.json"));
    match cmd {
        Command::Phantom => {
            let mut c: PhantomConfig = load_config(cfg)?;
            let seed = resolve_seed(cli.seed, c.seed);
            c.seed = Some(seed);
            let r = cmd_phantom(&c, seed, out)?;
            println!("phantom: sigma = {}, support = {}, files under {}", r.sigma, r.support_size, out.display());
            Ok(Outcome::Success)
        }
        Command::Reconstruct => {
            let mut c: ReconstructConfig = load_config(cfg)?;
            let seed = resolve_seed(cli.seed, c.seed);
            c.seed = Some(seed);
            let (outcome, r) = cmd_reconstruct(&c, seed, out)?;
            println!(
                "reconstruct: {:?} after {} iterations (gamma = ({}, {}) via {})",
                r.termination, r.iterations, r.gamma.gamma1, r.gamma.gamma2, r.gamma.route
            );
            Ok(outcome)
        }
        Command::Sweep => {
            let c: SweepConfig = load_config(cfg)?;
            let seed = resolve_seed(cli.seed, None);
            let r = cmd_sweep(&c, out)?;
            write_report(&report_path(&c.name), cmd, seed, &c, &r)?;
            println!("sweep: {} runs written to {}", r.rows, r.csv_file.display());
            Ok(Outcome::Success)
        }
        Command::Traces => {
            let c: TracesConfig = load_config(cfg)?;
            let seed = resolve_seed(cli.seed, None);
            let r = cmd_traces(&c, out)?;
            write_report(&report_path(&c.name), cmd, seed, &c, &r)?;
            println!(
                "traces: t_F = {}, t_SF = {} (sigma/2 = {}), t_SFSF = {}",
                r.traces.t2,
                r.traces.t12,
                r.sigma / 2.0,
                r.traces.t1212
            );
            Ok(Outcome::Success)
        }
        Command::GammaOpt => {
            let c: GammaOptConfig = load_config(cfg)?;
            let seed = resolve_seed(cli.seed, None);
            let r = cmd_gamma_opt(&c)?;
            write_report(&report_path(&c.name), cmd, seed, &c, &r)?;
            println!("gamma-opt: gamma = ({}, {}), norm = {}", r.gamma_opt.gamma1, r.gamma_opt.gamma2, r.norm_at_opt);
            Ok(Outcome::Success)
        }
        Command::RmtCheck => {
            let mut c: RmtCheckConfig = load_config(cfg)?;
            let seed = resolve_seed(cli.seed, c.seed);
            c.seed = Some(seed);
            let r = cmd_rmt_check(&c, seed, out)?;
            write_report(&report_path(&c.name), cmd, seed, &c, &r)?;
            println!("rmt-check: {}/{} estimates within 3 SE", r.within_3se, r.checks);
            Ok(Outcome::Success)
        }
        Command::EnsembleAvg => {
            let mut c: EnsembleAvgConfig = load_config(cfg)?;
            let seed = resolve_seed(cli.seed, c.seed);
            c.seed = Some(seed);
            let r = cmd_ensemble_avg(&c, seed, out)?;
            write_report(&report_path(&c.name), cmd, seed, &c, &r)?;
            println!(
                "ensemble-avg: <t_SFSF> = {} ± {} (random-matrix value {})",
                r.report.t_sfsf.mean, r.report.t_sfsf.se, r.report.predicted_t_sfsf
            );
            Ok(Outcome::Success)
        }
    }
}
