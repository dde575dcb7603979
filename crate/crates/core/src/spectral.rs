//! The convergence functional `‖d_⊥‖² = (1/dim) Tr(d_⊥ᵀ d_⊥)` expressed through
//! five normalized traces, its closed-form minimizer over `(γ₁, γ₂)`, and the
//! small-support limits obtained from random-matrix traces.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::diffmap::DiffMapParams;
use crate::error::{Error, Result};
use crate::linearized::{perp_projection, DenseOperator};
use crate::rmt::limit_traces;

/// Idempotency tolerance used to reject non-projection inputs.
pub const NOT_PROJECTION_TOL: f64 = 1e-6;

/// Denominators closer to zero than this are treated as degenerate.
pub const DEGENERACY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceSet {
    pub t1: f64,
    pub t2: f64,
    pub t_perp: f64,
    pub t12: f64,
    pub t1212: f64,
}

impl TraceSet {
    /// Traces with `t_⊥ = t₁ + t₂` (the overconstrained case).
    pub fn overconstrained(t1: f64, t2: f64, t12: f64, t1212: f64) -> Self {
        Self { t1, t2, t_perp: t1 + t2, t12, t1212 }
    }

    /// Large-`N` random-matrix traces for a support fraction `σ` and a
    /// Fourier trace `t_F`.
    pub fn random_matrix(sigma: f64, t_f: f64) -> Self {
        let (t12, t1212) = limit_traces(sigma, t_f);
        Self::overconstrained(sigma, t_f, t12, t1212)
    }

    /// `t₁t₂ − t₁₂(t₁ + t₂ − 2t₁₂₁₂) − t₁₂₁₂²`, shared by every closed form.
    pub fn denominator(&self) -> f64 {
        self.t1 * self.t2 - self.t12 * (self.t1 + self.t2 - 2.0 * self.t1212) - self.t1212 * self.t1212
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaPair {
    pub gamma1: f64,
    pub gamma2: f64,
}

impl GammaPair {
    pub fn params(&self, beta: f64) -> Result<DiffMapParams> {
        DiffMapParams::new(beta, self.gamma1, self.gamma2)
    }
}

/// Samples `‖Pv − P²v‖` on a few fixed probe vectors; cheap stand-in for
/// forming `P²` on large operators.
fn check_projection(p: &DenseOperator, label: &str) -> Result<()> {
    let dim = p.dim();
    let m = p.matrix();
    let mut asym: f64 = 0.0;
    for j in 0..dim {
        for i in 0..j {
            asym = asym.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    if asym > NOT_PROJECTION_TOL {
        return Err(Error::NotProjection(format!("{label} is not symmetric (defect {asym:.2e})")));
    }
    for probe in 0..4u64 {
        let v = DVector::from_fn(dim, |i, _| {
            let h = (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(probe.wrapping_mul(0xBF58_476D_1CE4_E5B9));
            ((h >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        });
        let pv = m * &v;
        let ppv = m * &pv;
        let defect = (&ppv - &pv).norm() / v.norm();
        if defect > NOT_PROJECTION_TOL {
            return Err(Error::NotProjection(format!("{label} is not idempotent (defect {defect:.2e})")));
        }
    }
    Ok(())
}

fn diagonal_entries(p: &DenseOperator) -> Option<Vec<f64>> {
    p.is_diagonal().then(|| p.matrix().diagonal().iter().copied().collect())
}

/// `Tr(AB)` and `Tr(ABAB)` for symmetric `A`, `B`.
fn product_traces(a: &DMatrix<f64>, b: &DMatrix<f64>, a_diag: Option<&[f64]>, b_diag: Option<&[f64]>) -> (f64, f64) {
    let n = a.nrows();
    let tr_ab: f64 = a.component_mul(b).sum();
    let tr_abab = match (a_diag, b_diag) {
        (Some(d), _) => weighted_square_sum(b, d),
        (_, Some(d)) => weighted_square_sum(a, d),
        _ => {
            let ab = a * b;
            let mut s = 0.0;
            for i in 0..n {
                for j in 0..n {
                    s += ab[(i, j)] * ab[(j, i)];
                }
            }
            s
        }
    };
    (tr_ab, tr_abab)
}

/// `Σ_ij d_i d_j M_ij²` for symmetric `M`, i.e. `Tr(DMDM)`.
fn weighted_square_sum(m: &DMatrix<f64>, d: &[f64]) -> f64 {
    let n = m.nrows();
    let mut s = 0.0;
    for j in 0..n {
        if d[j] == 0.0 {
            continue;
        }
        for i in 0..n {
            if d[i] != 0.0 {
                s += d[i] * d[j] * m[(i, j)] * m[(i, j)];
            }
        }
    }
    s
}

/// How `t_⊥` is obtained by [`compute_traces_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerpTrace {
    /// From the explicit `π_⊥`.
    Exact,
    /// Assume `t_⊥ = t₁ + t₂`; skips the rank-revealing factorization.
    AssumeOverconstrained,
    /// Assume the ranges meet in exactly `k` dimensions: `t_⊥ = t₁ + t₂ − k/dim`.
    /// `k = 1` for a complex object linearized at a solution (global phase).
    AssumeIntersection(usize),
}

pub fn compute_traces(p1: &DenseOperator, p2: &DenseOperator) -> Result<TraceSet> {
    compute_traces_with(p1, p2, PerpTrace::Exact)
}

pub fn compute_traces_with(p1: &DenseOperator, p2: &DenseOperator, perp: PerpTrace) -> Result<TraceSet> {
    if p1.dim() != p2.dim() {
        return Err(Error::Shape(format!("operator dims differ: {} vs {}", p1.dim(), p2.dim())));
    }
    check_projection(p1, "pi_1")?;
    check_projection(p2, "pi_2")?;
    let dim = p1.dim() as f64;
    let d1 = diagonal_entries(p1);
    let d2 = diagonal_entries(p2);
    let (tr12, tr1212) = product_traces(p1.matrix(), p2.matrix(), d1.as_deref(), d2.as_deref());
    let t1 = p1.trace() / dim;
    let t2 = p2.trace() / dim;
    let t_perp = match perp {
        PerpTrace::Exact => perp_projection(p1, p2)?.trace() / dim,
        PerpTrace::AssumeOverconstrained => t1 + t2,
        PerpTrace::AssumeIntersection(k) => t1 + t2 - k as f64 / dim,
    };
    Ok(TraceSet { t1, t2, t_perp, t12: tr12 / dim, t1212: tr1212 / dim })
}

/// `‖d_⊥‖²` as a quadratic in `(γ₁, γ₂)`.
pub fn frobenius_norm_sq(t: &TraceSet, params: &DiffMapParams) -> f64 {
    let DiffMapParams { beta, gamma1: g1, gamma2: g2 } = *params;
    let linear = g1 * t.t2 - g2 * t.t1 + (g2 - g1) * t.t12;
    let quadratic = g1 * g1 * t.t2 + g2 * g2 * t.t1 + (2.0 + 2.0 * (g1 + g2) - (g1 - g2).powi(2)) * t.t12
        - 2.0 * (1.0 + g1) * (1.0 + g2) * t.t1212;
    t.t_perp + 2.0 * beta * linear + beta * beta * quadratic
}

/// The linearized difference map `d = 1 + β(π₁ l₂ − π₂ l₁)`,
/// `l_i = (1+γ_i)π_i − γ_i`.
pub fn difference_operator(p1: &DenseOperator, p2: &DenseOperator, params: &DiffMapParams) -> Result<DenseOperator> {
    let dim = p1.dim();
    if p2.dim() != dim {
        return Err(Error::Shape("operator dims differ".into()));
    }
    let id = DMatrix::<f64>::identity(dim, dim);
    let l1 = p1.matrix() * (1.0 + params.gamma1) - &id * params.gamma1;
    let l2 = p2.matrix() * (1.0 + params.gamma2) - &id * params.gamma2;
    let d = &id + (p1.matrix() * l2 - p2.matrix() * l1) * params.beta;
    DenseOperator::new(d, p1.kind(), "d")
}

/// `d_⊥ = π_⊥ d π_⊥`.
pub fn build_d_perp(p1: &DenseOperator, p2: &DenseOperator, params: &DiffMapParams) -> Result<DenseOperator> {
    let perp = perp_projection(p1, p2)?;
    let d = difference_operator(p1, p2, params)?;
    let m = perp.matrix() * d.matrix() * perp.matrix();
    DenseOperator::new(m, p1.kind(), "d_perp")
}

/// `(1/dim) Tr(Aᵀ A)`.
pub fn normalized_frobenius_sq(op: &DenseOperator) -> f64 {
    op.matrix().norm_squared() / op.dim() as f64
}

fn checked_denominator(t: &TraceSet, beta: f64) -> Result<f64> {
    if beta == 0.0 || !beta.is_finite() {
        return Err(Error::Invalid(format!("beta must be finite and nonzero, got {beta}")));
    }
    let den = t.denominator();
    if den.abs() < DEGENERACY_TOL {
        return Err(Error::Degenerate(format!(
            "t1*t2 - t12*(t1 + t2 - 2*t1212) - t1212^2 = {den:.3e} vanishes"
        )));
    }
    Ok(den)
}

/// Stationary point of [`frobenius_norm_sq`] in `(γ₁, γ₂)`.
pub fn optimal_gammas(t: &TraceSet, beta: f64) -> Result<GammaPair> {
    let den = checked_denominator(t, beta)?;
    let TraceSet { t1, t2, t12, t1212, .. } = *t;
    let g1 = -(((t1 - t12) * (t2 - t1212) + (t12 - t1212) * (t1 - 2.0 * t12 + t1212) * beta) / den) / beta;
    let g2 = (((t2 - t12) * (t1 - t1212) - (t12 - t1212) * (t2 - 2.0 * t12 + t1212) * beta) / den) / beta;
    Ok(GammaPair { gamma1: g1, gamma2: g2 })
}

/// `‖d_⊥‖²` at [`optimal_gammas`].
pub fn norm_at_optimum(t: &TraceSet, beta: f64) -> Result<f64> {
    let g = optimal_gammas(t, beta)?;
    Ok(frobenius_norm_sq(t, &g.params(beta)?))
}

/// Closed forms for random-matrix traces `t_S = σ`, general `t_F`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaFormulas {
    /// Finite-`σ` optimum; only available for `t_F = ½`.
    pub at_sigma: Option<GammaPair>,
    /// `σ → 0`: `(−1/β, (1 + t_F(1−β))/β)`.
    pub small_sigma: GammaPair,
    /// `σ/8 (3 + 2β + 3β²)`, the `σ → 0` norm for `t_F = ½`.
    pub norm_limit: Option<f64>,
    /// `0 < σ` and `σ + t_F < 1`.
    pub well_posed: bool,
}

pub fn sigma_formulas(sigma: f64, beta: f64, t_f: f64) -> Result<SigmaFormulas> {
    if beta == 0.0 || !beta.is_finite() {
        return Err(Error::Invalid(format!("beta must be finite and nonzero, got {beta}")));
    }
    let half = t_f == 0.5;
    let at_sigma = half.then(|| {
        let den = beta * (4.0 - sigma + sigma * sigma);
        GammaPair {
            gamma1: -(4.0 + (2.0 + beta) * sigma + beta * sigma * sigma) / den,
            gamma2: (6.0 - 2.0 * sigma - beta * (2.0 - 3.0 * sigma + sigma * sigma)) / den,
        }
    });
    let small_sigma = GammaPair { gamma1: -1.0 / beta, gamma2: (1.0 + t_f * (1.0 - beta)) / beta };
    let norm_limit = half.then(|| sigma / 8.0 * (3.0 + 2.0 * beta + 3.0 * beta * beta));
    Ok(SigmaFormulas { at_sigma, small_sigma, norm_limit, well_posed: sigma > 0.0 && sigma + t_f < 1.0 })
}

/// Minimum of [`frobenius_norm_sq`] over a square `points × points` grid of
/// half-width `half_width` centred on `center`.
pub fn grid_scan(t: &TraceSet, beta: f64, center: GammaPair, half_width: f64, points: usize) -> Result<(f64, GammaPair)> {
    if points < 2 {
        return Err(Error::Invalid("grid scan needs at least 2 points per axis".into()));
    }
    let step = 2.0 * half_width / (points - 1) as f64;
    let mut best = (f64::INFINITY, center);
    for i in 0..points {
        for j in 0..points {
            let g = GammaPair {
                gamma1: center.gamma1 - half_width + i as f64 * step,
                gamma2: center.gamma2 - half_width + j as f64 * step,
            };
            let v = frobenius_norm_sq(t, &g.params(beta)?);
            if v < best.0 {
                best = (v, g);
            }
        }
    }
    Ok(best)
}

/// Power-iteration estimate of the largest singular value (diagnostic only).
pub fn estimate_spectral_norm(op: &DenseOperator, iters: usize) -> f64 {
    let dim = op.dim();
    if dim == 0 {
        return 0.0;
    }
    let m = op.matrix();
    let mut v = DVector::from_fn(dim, |i, _| 1.0 + ((i * 7919) % 13) as f64 / 13.0);
    v /= v.norm();
    let mut estimate = 0.0;
    for _ in 0..iters.max(1) {
        let w = m * &v;
        estimate = w.norm();
        let u = m.tr_mul(&w);
        let n = u.norm();
        if n == 0.0 {
            return estimate;
        }
        v = u / n;
    }
    estimate.max((m * &v).norm())
}
