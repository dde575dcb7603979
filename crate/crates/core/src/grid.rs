//! Periodic grid geometry, object storage and the unitary discrete Fourier
//! transform.
//!
//! Real-space points are `r = (j_1/m_1, j_2/m_2, ...)` and Fourier-space points
//! are `q = 2π (k_1, k_2, ...)`, so `q·r = 2π Σ k_i j_i / m_i`. Both are stored
//! in the same row-major order (last axis fastest). The forward transform is
//!
//! ```text
//! ρ_q = N^{-1/2} Σ_r exp(i q·r) ρ_r
//! ```

use std::f64::consts::TAU;
use std::io::{Read, Write};
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const GRID_MAGIC: &[u8; 8] = b"DMGRID01";

/// Extents `(m_1, m_2, ...)` of a periodic grid.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct GridShape {
    dims: Vec<usize>,
    strides: Vec<usize>,
    len: usize,
}

impl TryFrom<Vec<usize>> for GridShape {
    type Error = Error;

    fn try_from(dims: Vec<usize>) -> Result<Self> {
        GridShape::new(dims)
    }
}

impl From<GridShape> for Vec<usize> {
    fn from(shape: GridShape) -> Self {
        shape.dims
    }
}

impl GridShape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.is_empty() {
            return Err(Error::Invalid("grid needs at least one dimension".into()));
        }
        if dims.contains(&0) {
            return Err(Error::Invalid(format!("grid extents must be positive, got {dims:?}")));
        }
        let mut strides = vec![1; dims.len()];
        for axis in (0..dims.len() - 1).rev() {
            strides[axis] = strides[axis + 1] * dims[axis + 1];
        }
        let len = dims.iter().product();
        Ok(Self { dims, strides, len })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    /// Total number of samples `N`.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn index_of(&self, coords: &[usize]) -> usize {
        debug_assert_eq!(coords.len(), self.rank());
        coords
            .iter()
            .zip(&self.dims)
            .zip(&self.strides)
            .map(|((&c, &m), &s)| (c % m) * s)
            .sum()
    }

    pub fn coords_of(&self, index: usize) -> Vec<usize> {
        self.dims
            .iter()
            .zip(&self.strides)
            .map(|(&m, &s)| (index / s) % m)
            .collect()
    }

    fn map_coords(&self, index: usize, mut f: impl FnMut(usize, usize) -> usize) -> usize {
        let mut out = 0;
        for axis in 0..self.rank() {
            let m = self.dims[axis];
            let s = self.strides[axis];
            let c = (index / s) % m;
            out += (f(axis, c) % m) * s;
        }
        out
    }

    /// Index of `-x` (componentwise negation modulo `m_i`).
    pub fn neg_index(&self, index: usize) -> usize {
        self.map_coords(index, |axis, c| self.dims[axis] - c)
    }

    pub fn add_index(&self, a: usize, b: usize) -> usize {
        let cb = self.coords_of(b);
        self.map_coords(a, |axis, c| c + cb[axis])
    }

    pub fn sub_index(&self, a: usize, b: usize) -> usize {
        let cb = self.coords_of(b);
        self.map_coords(a, |axis, c| c + self.dims[axis] - cb[axis])
    }

    /// Index of `k·x` for a non-negative integer multiple.
    pub fn scale_index(&self, index: usize, k: usize) -> usize {
        self.map_coords(index, |axis, c| (c * k) % self.dims[axis])
    }

    /// Index of `x + offset` with periodic wrap-around.
    pub fn offset_index(&self, index: usize, offset: &[isize]) -> usize {
        debug_assert_eq!(offset.len(), self.rank());
        self.map_coords(index, |axis, c| {
            let m = self.dims[axis] as isize;
            (c as isize + offset[axis]).rem_euclid(m) as usize
        })
    }

    /// `q·r` for Fourier index `q` and real-space index `r`, reduced to `[0, 2π)`.
    pub fn phase(&self, q: usize, r: usize) -> f64 {
        let mut frac = 0.0;
        for axis in 0..self.rank() {
            let m = self.dims[axis];
            let s = self.strides[axis];
            let k = (q / s) % m;
            let j = (r / s) % m;
            frac += ((k * j) % m) as f64 / m as f64;
        }
        TAU * frac.fract()
    }

    /// Fourier samples with `2q ≡ 0`, i.e. every `q_i ≡ 0 (mod π m_i)`.
    /// For real objects these carry no continuous phase.
    pub fn self_conjugate_indices(&self) -> Vec<usize> {
        (0..self.len).filter(|&q| self.neg_index(q) == q).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalarKind {
    Real,
    Complex,
}

impl ScalarKind {
    /// Multiplicity of the real representation (1 for real, 2 for complex).
    pub fn real_multiplicity(self) -> usize {
        match self {
            ScalarKind::Real => 1,
            ScalarKind::Complex => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    RealSpace,
    FourierSpace,
}

/// Values on a periodic grid. Real-kind objects in real space keep zero
/// imaginary parts.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectGrid {
    shape: GridShape,
    kind: ScalarKind,
    space: Space,
    values: Vec<Complex64>,
}

impl ObjectGrid {
    pub fn new(shape: GridShape, kind: ScalarKind, space: Space, values: Vec<Complex64>) -> Result<Self> {
        if values.len() != shape.len() {
            return Err(Error::Shape(format!(
                "{} values for a grid of {} samples",
                values.len(),
                shape.len()
            )));
        }
        let mut obj = Self { shape, kind, space, values };
        obj.enforce_kind();
        Ok(obj)
    }

    pub fn zeros(shape: GridShape, kind: ScalarKind, space: Space) -> Self {
        let values = vec![Complex64::new(0.0, 0.0); shape.len()];
        Self { shape, kind, space, values }
    }

    pub fn from_real(shape: GridShape, values: &[f64]) -> Result<Self> {
        let values = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        Self::new(shape, ScalarKind::Real, Space::RealSpace, values)
    }

    pub fn from_complex(shape: GridShape, values: Vec<Complex64>) -> Result<Self> {
        Self::new(shape, ScalarKind::Complex, Space::RealSpace, values)
    }

    pub fn shape(&self) -> &GridShape {
        &self.shape
    }

    pub fn kind(&self) -> ScalarKind {
        self.kind
    }

    pub fn space(&self) -> Space {
        self.space
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<Complex64> {
        self.values
    }

    /// Same metadata, new values. Real-space real-kind results are re-projected
    /// onto the reals.
    pub fn with_values(&self, values: Vec<Complex64>) -> Self {
        assert_eq!(values.len(), self.values.len(), "value count must match the grid");
        let mut obj = Self { shape: self.shape.clone(), kind: self.kind, space: self.space, values };
        obj.enforce_kind();
        obj
    }

    fn enforce_kind(&mut self) {
        if self.kind == ScalarKind::Real && self.space == Space::RealSpace {
            for v in &mut self.values {
                v.im = 0.0;
            }
        }
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v.norm_sqr()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn distance(&self, other: &ObjectGrid) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.re.is_finite() && v.im.is_finite())
    }

    /// `a·self + b·other`.
    pub fn combine(&self, a: f64, other: &ObjectGrid, b: f64) -> ObjectGrid {
        let values = self.values.iter().zip(&other.values).map(|(x, y)| x * a + y * b).collect();
        self.with_values(values)
    }

    /// Object translated by `offset` grid steps: `out[r + offset] = self[r]`.
    pub fn translated(&self, offset: &[isize]) -> ObjectGrid {
        let mut values = vec![Complex64::new(0.0, 0.0); self.values.len()];
        for (r, v) in self.values.iter().enumerate() {
            values[self.shape.offset_index(r, offset)] = *v;
        }
        self.with_values(values)
    }

    pub fn dft(&self) -> ObjectGrid {
        dft(self)
    }

    pub fn idft(&self) -> ObjectGrid {
        idft(self)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(GRID_MAGIC)?;
        w.write_all(&(self.shape.rank() as u32).to_le_bytes())?;
        for &m in self.shape.dims() {
            w.write_all(&(m as u32).to_le_bytes())?;
        }
        let kind = match self.kind {
            ScalarKind::Real => 0u8,
            ScalarKind::Complex => 1u8,
        };
        let space = match self.space {
            Space::RealSpace => 0u8,
            Space::FourierSpace => 1u8,
        };
        w.write_all(&[kind, space])?;
        for v in &self.values {
            w.write_all(&v.re.to_le_bytes())?;
            if self.kind == ScalarKind::Complex {
                w.write_all(&v.im.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != GRID_MAGIC {
            return Err(Error::Format("bad grid magic".into()));
        }
        let rank = read_u32(&mut r)? as usize;
        if rank == 0 || rank > 16 {
            return Err(Error::Format(format!("implausible grid rank {rank}")));
        }
        let dims = (0..rank).map(|_| read_u32(&mut r).map(|m| m as usize)).collect::<Result<Vec<_>>>()?;
        let shape = GridShape::new(dims)?;
        let mut tags = [0u8; 2];
        r.read_exact(&mut tags)?;
        let kind = match tags[0] {
            0 => ScalarKind::Real,
            1 => ScalarKind::Complex,
            t => return Err(Error::Format(format!("unknown scalar kind {t}"))),
        };
        let space = match tags[1] {
            0 => Space::RealSpace,
            1 => Space::FourierSpace,
            t => return Err(Error::Format(format!("unknown space tag {t}"))),
        };
        let mut values = Vec::with_capacity(shape.len());
        for _ in 0..shape.len() {
            let re = read_f64(&mut r)?;
            let im = if kind == ScalarKind::Complex { read_f64(&mut r)? } else { 0.0 };
            values.push(Complex64::new(re, im));
        }
        Ok(Self { shape, kind, space, values })
    }
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Planned multi-dimensional unitary DFT for one grid shape.
#[derive(Clone)]
pub struct Dft {
    shape: GridShape,
    // per axis: (plan for exp(+i..), plan for exp(-i..))
    plans: Vec<(Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>)>,
    scale: f64,
}

impl std::fmt::Debug for Dft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Dft").field("shape", &self.shape).finish()
    }
}

impl Dft {
    pub fn new(shape: &GridShape) -> Self {
        let mut planner = FftPlanner::new();
        let plans = shape
            .dims()
            .iter()
            .map(|&m| (planner.plan_fft_inverse(m), planner.plan_fft_forward(m)))
            .collect();
        Self { shape: shape.clone(), plans, scale: 1.0 / (shape.len() as f64).sqrt() }
    }

    pub fn shape(&self) -> &GridShape {
        &self.shape
    }

    /// Real space → Fourier space, in place.
    pub fn forward(&self, values: &mut [Complex64]) {
        self.transform(values, true);
    }

    /// Fourier space → real space, in place.
    pub fn inverse(&self, values: &mut [Complex64]) {
        self.transform(values, false);
    }

    fn transform(&self, values: &mut [Complex64], positive: bool) {
        assert_eq!(values.len(), self.shape.len(), "buffer does not match grid");
        let dims = self.shape.dims();
        let mut line = Vec::new();
        for axis in 0..dims.len() {
            let m = dims[axis];
            if m == 1 {
                continue;
            }
            let stride: usize = dims[axis + 1..].iter().product();
            let outer: usize = dims[..axis].iter().product();
            let plan = if positive { &self.plans[axis].0 } else { &self.plans[axis].1 };
            line.resize(m, Complex64::new(0.0, 0.0));
            for o in 0..outer {
                for inner in 0..stride {
                    let base = o * m * stride + inner;
                    for (k, slot) in line.iter_mut().enumerate() {
                        *slot = values[base + k * stride];
                    }
                    plan.process(&mut line);
                    for (k, v) in line.iter().enumerate() {
                        values[base + k * stride] = *v;
                    }
                }
            }
        }
        for v in values.iter_mut() {
            *v *= self.scale;
        }
    }
}

/// Unitary DFT of a real-space object.
pub fn dft(obj: &ObjectGrid) -> ObjectGrid {
    assert_eq!(obj.space, Space::RealSpace, "dft expects a real-space object");
    let mut values = obj.values.clone();
    Dft::new(&obj.shape).forward(&mut values);
    ObjectGrid { shape: obj.shape.clone(), kind: obj.kind, space: Space::FourierSpace, values }
}

/// Inverse of [`dft`].
pub fn idft(obj: &ObjectGrid) -> ObjectGrid {
    assert_eq!(obj.space, Space::FourierSpace, "idft expects a Fourier-space object");
    let mut values = obj.values.clone();
    Dft::new(&obj.shape).inverse(&mut values);
    let mut out = ObjectGrid { shape: obj.shape.clone(), kind: obj.kind, space: Space::RealSpace, values };
    out.enforce_kind();
    out
}

/// Direct O(N²) evaluation of the forward (`sign = +1`) or inverse
/// (`sign = -1`) unitary transform.
pub fn dft_naive(shape: &GridShape, values: &[Complex64], sign: f64) -> Vec<Complex64> {
    let n = shape.len();
    let scale = 1.0 / (n as f64).sqrt();
    (0..n)
        .map(|q| {
            values
                .iter()
                .enumerate()
                .map(|(r, v)| v * Complex64::from_polar(scale, sign * shape.phase(q, r)))
                .sum()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_complex(shape: &GridShape, seed: u64) -> ObjectGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..shape.len())
            .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        ObjectGrid::from_complex(shape.clone(), values).unwrap()
    }

    #[test]
    fn shape_validation() {
        assert!(GridShape::new(vec![]).is_err());
        assert!(GridShape::new(vec![4, 0]).is_err());
        let s = GridShape::new(vec![2, 3, 4]).unwrap();
        assert_eq!(s.len(), 24);
        assert_eq!(s.index_of(&[1, 2, 3]), 23);
        assert_eq!(s.coords_of(23), vec![1, 2, 3]);
    }

    #[test]
    fn index_arithmetic() {
        let s = GridShape::new(vec![4, 6]).unwrap();
        let a = s.index_of(&[1, 5]);
        let b = s.index_of(&[3, 2]);
        assert_eq!(s.coords_of(s.neg_index(a)), vec![3, 1]);
        assert_eq!(s.coords_of(s.add_index(a, b)), vec![0, 1]);
        assert_eq!(s.coords_of(s.sub_index(a, b)), vec![2, 3]);
        assert_eq!(s.coords_of(s.scale_index(a, 2)), vec![2, 4]);
        assert_eq!(s.coords_of(s.offset_index(a, &[-2, 3])), vec![3, 2]);
    }

    #[test]
    fn self_conjugate_count() {
        assert_eq!(GridShape::new(vec![8, 8]).unwrap().self_conjugate_indices().len(), 4);
        assert_eq!(GridShape::new(vec![4, 4, 4]).unwrap().self_conjugate_indices().len(), 8);
        assert_eq!(GridShape::new(vec![5, 8]).unwrap().self_conjugate_indices().len(), 2);
    }

    #[test]
    fn delta_maps_to_constant() {
        let s = GridShape::new(vec![4]).unwrap();
        let obj = ObjectGrid::from_real(s, &[1.0, 0.0, 0.0, 0.0]).unwrap();
        let f = dft(&obj);
        for v in f.values() {
            assert!((v - Complex64::new(0.5, 0.0)).norm() < 1e-15);
        }
        let back = idft(&f);
        assert!(back.distance(&obj) < 1e-15);
    }

    #[test]
    fn fast_matches_naive() {
        for dims in [vec![8], vec![6, 5], vec![4, 3, 2]] {
            let s = GridShape::new(dims).unwrap();
            let obj = random_complex(&s, 7);
            let fast = dft(&obj);
            let slow = dft_naive(&s, obj.values(), 1.0);
            for (a, b) in fast.values().iter().zip(&slow) {
                assert!((a - b).norm() < 1e-12);
            }
            let slow_inv = dft_naive(&s, fast.values(), -1.0);
            for (a, b) in obj.values().iter().zip(&slow_inv) {
                assert!((a - b).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn unitarity_and_round_trip() {
        let s = GridShape::new(vec![8, 8]).unwrap();
        let obj = random_complex(&s, 11);
        let f = dft(&obj);
        assert!((f.norm() - obj.norm()).abs() < 1e-12 * obj.norm());
        assert!(idft(&f).distance(&obj) < 1e-12 * obj.norm());
    }

    #[test]
    fn real_objects_are_conjugate_symmetric() {
        let s = GridShape::new(vec![6, 4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vals: Vec<f64> = (0..s.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = dft(&ObjectGrid::from_real(s.clone(), &vals).unwrap());
        for q in 0..s.len() {
            let d = f.values()[s.neg_index(q)] - f.values()[q].conj();
            assert!(d.norm() < 1e-12);
        }
    }

    #[test]
    fn translation_is_phase_modulation() {
        let s = GridShape::new(vec![5, 6]).unwrap();
        let obj = random_complex(&s, 5);
        let shift = [2isize, -1];
        let shifted = obj.translated(&shift);
        let f = dft(&obj);
        let fs = dft(&shifted);
        let delta = s.offset_index(0, &shift);
        for q in 0..s.len() {
            let expected = f.values()[q] * Complex64::from_polar(1.0, s.phase(q, delta));
            assert!((fs.values()[q] - expected).norm() < 1e-12);
        }
    }

    #[test]
    fn grid_file_round_trip() {
        let s = GridShape::new(vec![3, 4]).unwrap();
        let obj = random_complex(&s, 9);
        let mut buf = Vec::new();
        obj.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], b"DMGRID01");
        assert_eq!(buf.len(), 8 + 4 + 8 + 2 + 12 * 16);
        assert_eq!(ObjectGrid::read_from(&buf[..]).unwrap(), obj);

        let real = ObjectGrid::from_real(s, &[1.0; 12]).unwrap();
        let mut buf = Vec::new();
        real.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 4 + 8 + 2 + 12 * 8);
        assert_eq!(ObjectGrid::read_from(&buf[..]).unwrap(), real);

        buf[0] = b'X';
        assert!(ObjectGrid::read_from(&buf[..]).is_err());
    }
}
