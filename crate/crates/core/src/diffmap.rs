//! The difference map `D(ρ) = ρ + β (Π₁∘f₂ − Π₂∘f₁)(ρ)` with
//! `f_i(ρ) = (1+γ_i) Π_i(ρ) − γ_i ρ`, its iteration and solution extraction.

use std::time::Instant;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridShape, ObjectGrid, ScalarKind, Space};
use crate::projections::{FourierData, Projection};

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITERS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffMapParams {
    pub beta: f64,
    pub gamma1: f64,
    pub gamma2: f64,
}

impl DiffMapParams {
    pub fn new(beta: f64, gamma1: f64, gamma2: f64) -> Result<Self> {
        if beta == 0.0 || !beta.is_finite() {
            return Err(Error::Invalid(format!("beta must be finite and nonzero, got {beta}")));
        }
        if !gamma1.is_finite() || !gamma2.is_finite() {
            return Err(Error::Invalid("gamma parameters must be finite".into()));
        }
        Ok(Self { beta, gamma1, gamma2 })
    }

    /// Hybrid input-output: `γ₁ = −1`, `γ₂ = 1/β`.
    pub fn hio(beta: f64) -> Result<Self> {
        Self::new(beta, -1.0, 1.0 / beta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// `‖ρ(n+1) − ρ(n)‖`
    pub error: f64,
    pub elapsed_secs: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    MaxIters,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub final_object: ObjectGrid,
    /// `Π₁∘f₂(ρ*)`
    pub solution: ObjectGrid,
    pub records: Vec<IterationRecord>,
    pub termination: Termination,
}

impl RunResult {
    pub fn iterations(&self) -> usize {
        self.records.len()
    }

    pub fn final_error(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.error)
    }
}

/// `(1+γ) Π(ρ) − γ ρ`.
pub fn f_map(obj: &ObjectGrid, proj: &dyn Projection, gamma: f64) -> Result<ObjectGrid> {
    let p = proj.project(obj)?;
    Ok(p.combine(1.0 + gamma, obj, -gamma))
}

/// `(Π₁∘f₂(ρ), Π₂∘f₁(ρ))`.
fn branches(obj: &ObjectGrid, params: &DiffMapParams, p1: &dyn Projection, p2: &dyn Projection) -> Result<(ObjectGrid, ObjectGrid)> {
    let a = p1.project(&f_map(obj, p2, params.gamma2)?)?;
    let b = p2.project(&f_map(obj, p1, params.gamma1)?)?;
    Ok((a, b))
}

/// One application of `D`; returns the new object and `‖D(ρ) − ρ‖`.
pub fn apply_difference_map(
    obj: &ObjectGrid,
    params: &DiffMapParams,
    p1: &dyn Projection,
    p2: &dyn Projection,
) -> Result<(ObjectGrid, f64)> {
    let (a, b) = branches(obj, params, p1, p2)?;
    let beta = params.beta;
    let values: Vec<Complex64> = obj
        .values()
        .iter()
        .zip(a.values().iter().zip(b.values()))
        .map(|(x, (pa, pb))| x + (pa - pb) * beta)
        .collect();
    let next = obj.with_values(values);
    let error = next.distance(obj);
    Ok((next, error))
}

/// Iterate `D` from `initial` until the update norm drops below `tol` or
/// `max_iters` steps have run.
pub fn run(
    initial: &ObjectGrid,
    params: &DiffMapParams,
    p1: &dyn Projection,
    p2: &dyn Projection,
    tol: f64,
    max_iters: usize,
) -> Result<RunResult> {
    if !(tol > 0.0) {
        return Err(Error::Invalid(format!("tolerance must be positive, got {tol}")));
    }
    if max_iters == 0 {
        return Err(Error::Invalid("max_iters must be at least 1".into()));
    }
    let start = Instant::now();
    let mut current = initial.clone();
    let mut records = Vec::new();
    let mut termination = Termination::MaxIters;
    for iteration in 1..=max_iters {
        let (next, error) = apply_difference_map(&current, params, p1, p2)?;
        if !error.is_finite() || !next.is_finite() {
            return Err(Error::Diverged { iteration, last_finite: Box::new(current), records });
        }
        records.push(IterationRecord { iteration, error, elapsed_secs: start.elapsed().as_secs_f64() });
        current = next;
        if error < tol {
            termination = Termination::Converged;
            break;
        }
    }
    let solution = p1.project(&f_map(&current, p2, params.gamma2)?)?;
    Ok(RunResult { final_object: current, solution, records, termination })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedPointResiduals {
    /// `‖Π₁∘f₂(ρ) − Π₂∘f₁(ρ)‖`
    pub difference: f64,
    /// `‖Π₁(ρ_sol) − ρ_sol‖` for the extracted `ρ_sol = Π₁∘f₂(ρ)`.
    pub constraint1: f64,
    /// `‖Π₂(ρ_sol) − ρ_sol‖`
    pub constraint2: f64,
}

impl FixedPointResiduals {
    pub fn max(&self) -> f64 {
        self.difference.max(self.constraint1).max(self.constraint2)
    }
}

pub fn verify_fixed_point(
    obj: &ObjectGrid,
    params: &DiffMapParams,
    p1: &dyn Projection,
    p2: &dyn Projection,
) -> Result<FixedPointResiduals> {
    let (a, b) = branches(obj, params, p1, p2)?;
    Ok(FixedPointResiduals {
        difference: a.distance(&b),
        constraint1: p1.project(&a)?.distance(&a),
        constraint2: p2.project(&a)?.distance(&a),
    })
}

/// Standard-normal starting object scaled so that `‖dft(ρ(0))‖` over `Q_data`
/// equals `‖F‖`.
pub fn random_initial<R: Rng + ?Sized>(data: &FourierData, kind: ScalarKind, rng: &mut R) -> ObjectGrid {
    let shape = data.shape().clone();
    let values: Vec<Complex64> = (0..shape.len())
        .map(|_| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = if kind == ScalarKind::Complex { rng.sample(StandardNormal) } else { 0.0 };
            Complex64::new(re, im)
        })
        .collect();
    let obj = ObjectGrid::new(shape, kind, Space::RealSpace, values).expect("length matches grid");
    let f = obj.dft();
    let measured: f64 = f
        .values()
        .iter()
        .enumerate()
        .filter(|(q, _)| data.is_measured(*q))
        .map(|(_, v)| v.norm_sqr())
        .sum::<f64>()
        .sqrt();
    let target = data.norm();
    if measured > 0.0 && target > 0.0 {
        obj.combine(target / measured, &obj, 0.0)
    } else {
        obj
    }
}

/// Which symmetries [`align`] may use when matching an estimate to a reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentOptions {
    pub translations: bool,
    /// Allow `ρ(r) → ρ(−r)*`.
    pub conjugate_flip: bool,
    /// Allow `ρ → e^{iθ} ρ`; only `θ ∈ {0, π}` for a real reference.
    pub global_phase: bool,
}

impl AlignmentOptions {
    /// The symmetries that leave both the Fourier moduli and (up to
    /// placement) a support constraint invariant for the given kind.
    pub fn for_kind(_kind: ScalarKind) -> Self {
        Self { translations: true, conjugate_flip: true, global_phase: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub shift: Vec<isize>,
    pub flipped: bool,
    pub phase: f64,
    pub distance: f64,
    /// `distance / ‖reference‖`
    pub relative_distance: f64,
}

/// Best L2 match of `estimate` to `reference` over the allowed symmetries.
pub fn align(estimate: &ObjectGrid, reference: &ObjectGrid, options: AlignmentOptions) -> Result<Alignment> {
    let shape: &GridShape = reference.shape();
    if estimate.shape() != shape {
        return Err(Error::Shape("estimate and reference grids differ".into()));
    }
    let n = shape.len();
    let ref_norm_sq = reference.norm_sq();
    let est_norm_sq = estimate.norm_sq();
    let flips: &[bool] = if options.conjugate_flip { &[false, true] } else { &[false] };
    let shifts: Vec<usize> = if options.translations { (0..n).collect() } else { vec![0] };
    let mut best: Option<Alignment> = None;
    for &flipped in flips {
        let base: Vec<Complex64> = if flipped {
            (0..n).map(|r| estimate.values()[shape.neg_index(r)].conj()).collect()
        } else {
            estimate.values().to_vec()
        };
        for &s in &shifts {
            // candidate(r) = base(r − s)
            let overlap: Complex64 = (0..n)
                .map(|r| base[shape.sub_index(r, s)].conj() * reference.values()[r])
                .sum();
            let (phase, cross) = match (options.global_phase, reference.kind()) {
                (false, _) => (0.0, overlap.re),
                (true, ScalarKind::Complex) => (overlap.arg(), overlap.norm()),
                (true, ScalarKind::Real) if overlap.re < 0.0 => (std::f64::consts::PI, -overlap.re),
                (true, ScalarKind::Real) => (0.0, overlap.re),
            };
            let distance = (est_norm_sq + ref_norm_sq - 2.0 * cross).max(0.0).sqrt();
            if best.as_ref().is_none_or(|b| distance < b.distance) {
                let coords = shape.coords_of(s);
                best = Some(Alignment {
                    shift: coords.iter().map(|&c| c as isize).collect(),
                    flipped,
                    phase,
                    distance,
                    relative_distance: distance / ref_norm_sq.sqrt().max(f64::MIN_POSITIVE),
                });
            }
        }
    }
    let mut best = best.expect("at least one candidate");
    // recompute the winner directly to avoid cancellation in the expansion
    let aligned = apply_alignment(estimate, &best);
    best.distance = aligned.distance(reference);
    best.relative_distance = best.distance / ref_norm_sq.sqrt().max(f64::MIN_POSITIVE);
    Ok(best)
}

/// Applies the symmetry found by [`align`] to `estimate`.
pub fn apply_alignment(estimate: &ObjectGrid, alignment: &Alignment) -> ObjectGrid {
    let shape = estimate.shape();
    let n = shape.len();
    let base: Vec<Complex64> = if alignment.flipped {
        (0..n).map(|r| estimate.values()[shape.neg_index(r)].conj()).collect()
    } else {
        estimate.values().to_vec()
    };
    let rotation = Complex64::from_polar(1.0, alignment.phase);
    let flipped = estimate.with_values(base.into_iter().map(|v| v * rotation).collect());
    flipped.translated(&alignment.shift)
}
