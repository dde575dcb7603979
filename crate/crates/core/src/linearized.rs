//! Linearized projections about a known solution as explicit dense matrices.
//!
//! Complex objects live in a `2N`-dimensional real space ordered as
//! `(Re ρ_0, …, Re ρ_{N-1}, Im ρ_0, …, Im ρ_{N-1})`, so an operator `X + Y C`
//! (with `C` complex conjugation) has the block form
//!
//! ```text
//! | Re(X+Y)  Im(Y-X) |
//! | Im(X+Y)  Re(X-Y) |
//! ```
//!
//! Normalized traces divide by the real dimension (`N` or `2N`).

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Dft, ObjectGrid, ScalarKind, Space};
use crate::projections::{FourierData, SupportMask};

/// Symmetric-idempotency tolerance for operators flagged as projections.
pub const PROJECTION_TOL: f64 = 1e-9;

/// Relative singular-value cut used when orthonormalizing `[π₁ π₂]`.
pub const RANK_CUT: f64 = 1e-8;

/// An explicit matrix on the real representation space.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseOperator {
    matrix: DMatrix<f64>,
    kind: ScalarKind,
    role: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct OperatorSidecar {
    pub dim: usize,
    pub role: String,
    pub kind: ScalarKind,
    pub layout: String,
    pub dtype: String,
}

impl DenseOperator {
    pub fn new(matrix: DMatrix<f64>, kind: ScalarKind, role: impl Into<String>) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::Shape(format!("operator must be square, got {:?}", matrix.shape())));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("operator has non-finite entries".into()));
        }
        Ok(Self { matrix, kind, role: role.into() })
    }

    pub fn zeros(dim: usize, kind: ScalarKind, role: impl Into<String>) -> Self {
        Self { matrix: DMatrix::zeros(dim, dim), kind, role: role.into() }
    }

    pub fn identity(dim: usize, kind: ScalarKind, role: impl Into<String>) -> Self {
        Self { matrix: DMatrix::identity(dim, dim), kind, role: role.into() }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn kind(&self) -> ScalarKind {
        self.kind
    }

    pub fn role(&self) -> &str {
        &self.role
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.matrix
    }

    pub fn trace(&self) -> f64 {
        self.matrix.trace()
    }

    pub fn normalized_trace(&self) -> f64 {
        self.trace() / self.dim() as f64
    }

    /// Largest deviation from symmetry and from idempotency (max-abs entries).
    pub fn projection_defects(&self) -> (f64, f64) {
        let asym = (&self.matrix - self.matrix.transpose()).amax();
        let idem = (&self.matrix * &self.matrix - &self.matrix).amax();
        (asym, idem)
    }

    pub fn is_projection(&self, tol: f64) -> bool {
        let (a, i) = self.projection_defects();
        a <= tol && i <= tol
    }

    /// Entries off the diagonal are all exactly zero.
    pub fn is_diagonal(&self) -> bool {
        let n = self.dim();
        (0..n).all(|j| (0..n).all(|i| i == j || self.matrix[(i, j)] == 0.0))
    }

    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.matrix * v
    }

    /// Writes the matrix as row-major little-endian f64 plus a JSON sidecar.
    pub fn export(&self, matrix_path: &Path, sidecar_path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(matrix_path)?);
        for i in 0..self.dim() {
            for j in 0..self.dim() {
                out.write_all(&self.matrix[(i, j)].to_le_bytes())?;
            }
        }
        out.flush()?;
        let sidecar = OperatorSidecar {
            dim: self.dim(),
            role: self.role.clone(),
            kind: self.kind,
            layout: "row-major".into(),
            dtype: "f64-le".into(),
        };
        std::fs::write(sidecar_path, serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }
}

/// Real-representation vector of an object (length `N` or `2N`).
pub fn to_real_vector(obj: &ObjectGrid) -> DVector<f64> {
    let n = obj.shape().len();
    match obj.kind() {
        ScalarKind::Real => DVector::from_iterator(n, obj.values().iter().map(|v| v.re)),
        ScalarKind::Complex => DVector::from_iterator(
            2 * n,
            obj.values().iter().map(|v| v.re).chain(obj.values().iter().map(|v| v.im)),
        ),
    }
}

/// Inverse of [`to_real_vector`], taking shape and kind from `template`.
pub fn from_real_vector(template: &ObjectGrid, v: &DVector<f64>) -> ObjectGrid {
    let n = template.shape().len();
    let values = match template.kind() {
        ScalarKind::Real => (0..n).map(|i| Complex64::new(v[i], 0.0)).collect(),
        ScalarKind::Complex => (0..n).map(|i| Complex64::new(v[i], v[n + i])).collect(),
    };
    template.with_values(values)
}

/// The solution a linearization is taken about, with its Fourier phases.
#[derive(Debug, Clone)]
pub struct LinearizationContext {
    solution: ObjectGrid,
    fourier: Vec<Complex64>,
    phases: Vec<f64>,
    zero_modulus: Vec<bool>,
}

impl LinearizationContext {
    /// Samples of `Q_data` with `F_q <= zero_threshold` form the zero-modulus set.
    pub fn new(solution: &ObjectGrid, data: &FourierData, zero_threshold: f64) -> Result<Self> {
        if solution.space() != Space::RealSpace {
            return Err(Error::Inconsistent("solution must be a real-space object".into()));
        }
        if solution.shape() != data.shape() {
            return Err(Error::Shape("solution and Fourier data grids differ".into()));
        }
        let fourier = solution.dft().into_values();
        let scale = data.moduli().iter().cloned().fold(1.0, f64::max);
        let tol = 1e-8 * scale;
        let mut zero_modulus = vec![false; fourier.len()];
        for (q, v) in fourier.iter().enumerate() {
            if !data.is_measured(q) {
                continue;
            }
            let f = data.moduli()[q];
            if (v.norm() - f).abs() > tol {
                return Err(Error::Inconsistent(format!(
                    "|dft(solution)| = {} but F = {f} at sample {q}",
                    v.norm()
                )));
            }
            zero_modulus[q] = f <= zero_threshold;
            if let (Some(phases), false) = (data.phases(), zero_modulus[q]) {
                let d = (Complex64::from_polar(1.0, phases[q]) - v / v.norm()).norm();
                if v.norm() > tol && d > 1e-6 {
                    return Err(Error::Inconsistent(format!("stored phase disagrees at sample {q}")));
                }
            }
        }
        let phases = fourier.iter().map(|v| v.arg()).collect();
        Ok(Self { solution: solution.clone(), fourier, phases, zero_modulus })
    }

    pub fn solution(&self) -> &ObjectGrid {
        &self.solution
    }

    pub fn phases(&self) -> &[f64] {
        &self.phases
    }

    pub fn fourier(&self) -> &[Complex64] {
        &self.fourier
    }

    pub fn zero_modulus(&self) -> &[bool] {
        &self.zero_modulus
    }
}

/// `π_S = Π_S`, duplicated across the real and imaginary blocks for complex kind.
pub fn lin_support_matrix(mask: &SupportMask, kind: ScalarKind) -> DenseOperator {
    let n = mask.shape().len();
    let reps = kind.real_multiplicity();
    let diag = DVector::from_iterator(
        reps * n,
        (0..reps).flat_map(|_| mask.indicator().iter().map(|&b| if b { 1.0 } else { 0.0 })),
    );
    DenseOperator { matrix: DMatrix::from_diagonal(&diag), kind, role: "pi_S".into() }
}

/// Linearized Fourier-modulus projection in real space.
///
/// Per Fourier sample the linearization is `x_q + y_q C` with
/// `(½, -½ e^{2iφ_q})` on measured nonzero moduli (tangent to the circle),
/// `(0, 0)` on measured zero moduli and `(1, 0)` off `Q_data`.
pub fn lin_fourier_matrix(ctx: &LinearizationContext, data: &FourierData, kind: ScalarKind) -> Result<DenseOperator> {
    let shape = data.shape();
    if ctx.solution.shape() != shape {
        return Err(Error::Inconsistent("context and data grids differ".into()));
    }
    if kind == ScalarKind::Real && ctx.solution.values().iter().any(|v| v.im != 0.0) {
        return Err(Error::Inconsistent("real-kind linearization needs a real solution".into()));
    }
    let n = shape.len();
    let mut x = vec![Complex64::new(0.0, 0.0); n];
    let mut y = vec![Complex64::new(0.0, 0.0); n];
    for q in 0..n {
        if !data.is_measured(q) {
            x[q] = Complex64::new(1.0, 0.0);
        } else if !ctx.zero_modulus[q] {
            x[q] = Complex64::new(0.5, 0.0);
            y[q] = -0.5 * Complex64::from_polar(1.0, 2.0 * ctx.phases[q]);
        }
    }
    // X_{rr'} = xr[r - r'], Y_{rr'} = yr[r + r'] with xr = N^{-1} Σ_q x_q e^{-iq·d}
    let dft = Dft::new(shape);
    dft.inverse(&mut x);
    dft.inverse(&mut y);
    let s = 1.0 / (n as f64).sqrt();
    let xr: Vec<Complex64> = x.iter().map(|v| v * s).collect();
    let yr: Vec<Complex64> = y.iter().map(|v| v * s).collect();

    let x_at = |r: usize, rp: usize| xr[shape.sub_index(r, rp)];
    let y_at = |r: usize, rp: usize| yr[shape.add_index(r, rp)];

    let matrix = match kind {
        ScalarKind::Real => {
            let mut m = DMatrix::zeros(n, n);
            let mut max_im: f64 = 0.0;
            for r in 0..n {
                for rp in 0..n {
                    let v = x_at(r, rp) + y_at(r, rp);
                    max_im = max_im.max(v.im.abs());
                    m[(r, rp)] = v.re;
                }
            }
            if max_im > 1e-9 {
                return Err(Error::Inconsistent(format!(
                    "linearized Fourier projection does not preserve real objects (imaginary part {max_im:.2e}); \
                     the data mask must be symmetric under q -> -q"
                )));
            }
            m
        }
        ScalarKind::Complex => {
            let mut m = DMatrix::zeros(2 * n, 2 * n);
            for r in 0..n {
                for rp in 0..n {
                    let xv = x_at(r, rp);
                    let yv = y_at(r, rp);
                    m[(r, rp)] = (xv + yv).re;
                    m[(r, n + rp)] = (yv - xv).im;
                    m[(n + r, rp)] = (xv + yv).im;
                    m[(n + r, n + rp)] = (xv - yv).re;
                }
            }
            m
        }
    };
    Ok(DenseOperator { matrix, kind, role: "pi_F".into() })
}

/// Orthogonal projection onto `range(π₁) + range(π₂)`, the complement of
/// `ker π₁ ∩ ker π₂`.
pub fn perp_projection(p1: &DenseOperator, p2: &DenseOperator) -> Result<DenseOperator> {
    let dim = p1.dim();
    if p2.dim() != dim {
        return Err(Error::Shape(format!("operator dims differ: {dim} vs {}", p2.dim())));
    }
    let mut stacked = DMatrix::zeros(dim, 2 * dim);
    stacked.columns_mut(0, dim).copy_from(&p1.matrix);
    stacked.columns_mut(dim, dim).copy_from(&p2.matrix);
    let svd = stacked.svd(true, false);
    let u = svd.u.as_ref().expect("left singular vectors requested");
    let smax = svd.singular_values.max();
    let mut perp = DMatrix::zeros(dim, dim);
    if smax > 0.0 {
        for (k, &s) in svd.singular_values.iter().enumerate() {
            if s > RANK_CUT * smax {
                let col = u.column(k);
                perp.ger(1.0, &col, &col, 1.0);
            }
        }
    }
    Ok(DenseOperator { matrix: perp, kind: p1.kind, role: "pi_perp".into() })
}
