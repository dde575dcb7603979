//! Constraint projections: fixed support, atomic support and Fourier modulus.

use std::io::{Read, Write};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{read_f64, read_u32, Dft, GridShape, ObjectGrid, Space};

const FDAT_MAGIC: &[u8; 8] = b"DMFDAT01";

/// A nearest-point map onto a constraint set.
pub trait Projection: Send + Sync {
    fn project(&self, obj: &ObjectGrid) -> Result<ObjectGrid>;
}

fn check_shape(expected: &GridShape, obj: &ObjectGrid) -> Result<()> {
    if obj.shape() != expected {
        return Err(Error::Shape(format!(
            "object grid {:?} does not match constraint grid {:?}",
            obj.shape().dims(),
            expected.dims()
        )));
    }
    if obj.space() != Space::RealSpace {
        return Err(Error::Invalid("projections act on real-space objects".into()));
    }
    Ok(())
}

/// Subset `S` of grid points.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SupportMaskFile", into = "SupportMaskFile")]
pub struct SupportMask {
    shape: GridShape,
    members: Vec<usize>,
    indicator: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct SupportMaskFile {
    dims: Vec<usize>,
    indices: Vec<usize>,
}

impl TryFrom<SupportMaskFile> for SupportMask {
    type Error = Error;

    fn try_from(file: SupportMaskFile) -> Result<Self> {
        Self::new(GridShape::new(file.dims)?, file.indices)
    }
}

impl From<SupportMask> for SupportMaskFile {
    fn from(mask: SupportMask) -> Self {
        Self { dims: mask.shape.dims().to_vec(), indices: mask.members }
    }
}

impl SupportMask {
    pub fn new(shape: GridShape, indices: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut indicator = vec![false; shape.len()];
        let mut members = Vec::new();
        for i in indices {
            if i >= shape.len() {
                return Err(Error::Invalid(format!("support index {i} outside grid of {}", shape.len())));
            }
            if indicator[i] {
                return Err(Error::Invalid(format!("duplicate support index {i}")));
            }
            indicator[i] = true;
            members.push(i);
        }
        if members.is_empty() {
            return Err(Error::Invalid("support must be non-empty".into()));
        }
        members.sort_unstable();
        Ok(Self { shape, members, indicator })
    }

    pub fn from_indicator(shape: GridShape, indicator: &[bool]) -> Result<Self> {
        if indicator.len() != shape.len() {
            return Err(Error::Shape("indicator length differs from grid size".into()));
        }
        Self::new(shape, indicator.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i))
    }

    pub fn full(shape: GridShape) -> Self {
        let n = shape.len();
        Self { shape, members: (0..n).collect(), indicator: vec![true; n] }
    }

    pub fn shape(&self) -> &GridShape {
        &self.shape
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn indicator(&self) -> &[bool] {
        &self.indicator
    }

    pub fn contains(&self, index: usize) -> bool {
        self.indicator[index]
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }

    /// Support fraction `σ = |S|/N`.
    pub fn sigma(&self) -> f64 {
        self.members.len() as f64 / self.shape.len() as f64
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// `Π_S`: zero everything off the support.
pub fn project_support(obj: &ObjectGrid, mask: &SupportMask) -> Result<ObjectGrid> {
    check_shape(mask.shape(), obj)?;
    let values = obj
        .values()
        .iter()
        .zip(mask.indicator())
        .map(|(v, &keep)| if keep { *v } else { Complex64::new(0.0, 0.0) })
        .collect();
    Ok(obj.with_values(values))
}

impl Projection for SupportMask {
    fn project(&self, obj: &ObjectGrid) -> Result<ObjectGrid> {
        project_support(obj, self)
    }
}

/// Support made of `M` translated copies of a compact footprint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "AtomicSupportSpecFile")]
pub struct AtomicSupportSpec {
    shape: GridShape,
    atom_count: usize,
    footprint: Vec<Vec<isize>>,
}

#[derive(Deserialize)]
struct AtomicSupportSpecFile {
    shape: GridShape,
    atom_count: usize,
    footprint: Vec<Vec<isize>>,
}

impl TryFrom<AtomicSupportSpecFile> for AtomicSupportSpec {
    type Error = Error;

    fn try_from(f: AtomicSupportSpecFile) -> Result<Self> {
        Self::new(f.shape, f.atom_count, f.footprint)
    }
}

impl AtomicSupportSpec {
    pub fn new(shape: GridShape, atom_count: usize, footprint: Vec<Vec<isize>>) -> Result<Self> {
        if atom_count == 0 {
            return Err(Error::Invalid("atom count must be at least 1".into()));
        }
        if footprint.is_empty() {
            return Err(Error::Invalid("footprint must be non-empty".into()));
        }
        if footprint.iter().any(|f| f.len() != shape.rank()) {
            return Err(Error::Invalid("footprint offsets must match the grid rank".into()));
        }
        let spec = Self { shape, atom_count, footprint };
        let mut cells = spec.placement(0);
        cells.sort_unstable();
        cells.dedup();
        if cells.len() != spec.footprint.len() {
            return Err(Error::Invalid("footprint offsets collide on this grid".into()));
        }
        if atom_count * spec.footprint.len() > spec.shape.len() {
            return Err(Error::InfeasiblePacking(format!(
                "{atom_count} atoms of {} voxels exceed the {} grid points",
                spec.footprint.len(),
                spec.shape.len()
            )));
        }
        Ok(spec)
    }

    /// Centered hypercube footprint of side `width` (e.g. 3×3×3).
    pub fn cube(shape: GridShape, atom_count: usize, width: usize) -> Result<Self> {
        if width == 0 {
            return Err(Error::Invalid("footprint width must be positive".into()));
        }
        let lo = -((width as isize - 1) / 2);
        let rank = shape.rank();
        let mut footprint = Vec::new();
        let total = width.pow(rank as u32);
        for k in 0..total {
            let mut rem = k;
            let mut offset = vec![0isize; rank];
            for axis in (0..rank).rev() {
                offset[axis] = lo + (rem % width) as isize;
                rem /= width;
            }
            footprint.push(offset);
        }
        Self::new(shape, atom_count, footprint)
    }

    pub fn shape(&self) -> &GridShape {
        &self.shape
    }

    pub fn atom_count(&self) -> usize {
        self.atom_count
    }

    pub fn footprint(&self) -> &[Vec<isize>] {
        &self.footprint
    }

    /// Grid cells covered by the footprint placed at `center`.
    pub fn placement(&self, center: usize) -> Vec<usize> {
        self.footprint.iter().map(|f| self.shape.offset_index(center, f)).collect()
    }

    pub fn support_size(&self) -> usize {
        self.atom_count * self.footprint.len()
    }

    pub fn sigma(&self) -> f64 {
        self.support_size() as f64 / self.shape.len() as f64
    }

    /// Greedy support selection: place footprints one at a time, each at the
    /// translation capturing the most remaining squared norm among placements
    /// disjoint from earlier ones. Ties go to the lowest grid index.
    pub fn select_support(&self, obj: &ObjectGrid) -> Result<SupportMask> {
        check_shape(&self.shape, obj)?;
        let weights: Vec<f64> = obj.values().iter().map(|v| v.norm_sqr()).collect();
        let mut used = vec![false; self.shape.len()];
        let mut chosen = Vec::with_capacity(self.support_size());
        for atom in 0..self.atom_count {
            let mut best: Option<(f64, Vec<usize>)> = None;
            for center in 0..self.shape.len() {
                let cells = self.placement(center);
                if cells.iter().any(|&c| used[c]) {
                    continue;
                }
                let score: f64 = cells.iter().map(|&c| weights[c]).sum();
                if best.as_ref().is_none_or(|(s, _)| score > *s) {
                    best = Some((score, cells));
                }
            }
            let Some((_, cells)) = best else {
                return Err(Error::InfeasiblePacking(format!(
                    "no disjoint placement left for atom {} of {}",
                    atom + 1,
                    self.atom_count
                )));
            };
            for &c in &cells {
                used[c] = true;
            }
            chosen.extend(cells);
        }
        SupportMask::new(self.shape.clone(), chosen)
    }
}

/// Atomic support projection; returns the projected object and the support used.
pub fn project_atomic_support(obj: &ObjectGrid, spec: &AtomicSupportSpec) -> Result<(ObjectGrid, SupportMask)> {
    let mask = spec.select_support(obj)?;
    let projected = project_support(obj, &mask)?;
    Ok((projected, mask))
}

impl Projection for AtomicSupportSpec {
    fn project(&self, obj: &ObjectGrid) -> Result<ObjectGrid> {
        project_atomic_support(obj, self).map(|(p, _)| p)
    }
}

/// Measured Fourier moduli `F_q` over `Q_data`, optionally with the phases of
/// a known synthetic solution.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierData {
    shape: GridShape,
    moduli: Vec<f64>,
    data_mask: Vec<bool>,
    phases: Option<Vec<f64>>,
}

impl FourierData {
    /// `moduli` and `phases` are indexed over the full grid; entries outside
    /// `Q_data` are ignored and stored as zero.
    pub fn new(shape: GridShape, moduli: Vec<f64>, data_mask: Vec<bool>, phases: Option<Vec<f64>>) -> Result<Self> {
        let n = shape.len();
        if moduli.len() != n || data_mask.len() != n {
            return Err(Error::Shape("moduli and data mask must cover the grid".into()));
        }
        if let Some(p) = &phases {
            if p.len() != n {
                return Err(Error::Shape("phases must cover the grid".into()));
            }
            if p.iter().any(|x| !x.is_finite()) {
                return Err(Error::Invalid("phases must be finite".into()));
            }
        }
        for (q, (&f, &m)) in moduli.iter().zip(&data_mask).enumerate() {
            if m && !(f.is_finite() && f >= 0.0) {
                return Err(Error::Invalid(format!("modulus at sample {q} is {f}, expected finite and >= 0")));
            }
        }
        let mut data = Self { shape, moduli, data_mask, phases };
        data.zero_unused();
        Ok(data)
    }

    fn zero_unused(&mut self) {
        for q in 0..self.shape.len() {
            if !self.data_mask[q] {
                self.moduli[q] = 0.0;
            }
            if let Some(p) = &mut self.phases {
                if !self.data_mask[q] || self.moduli[q] == 0.0 {
                    p[q] = 0.0;
                }
            }
        }
    }

    /// Synthetic data with every sample measured: `F_q = |ρ_q|`, `φ_q = arg ρ_q`.
    pub fn from_solution(solution: &ObjectGrid) -> Self {
        let f = solution.dft();
        let moduli = f.values().iter().map(|v| v.norm()).collect();
        let phases = f.values().iter().map(|v| v.arg()).collect();
        let mut data = Self {
            shape: solution.shape().clone(),
            moduli,
            data_mask: vec![true; solution.shape().len()],
            phases: Some(phases),
        };
        data.zero_unused();
        data
    }

    /// Restrict `Q_data` to the samples flagged in `mask`.
    pub fn restricted(mut self, mask: &[bool]) -> Result<Self> {
        if mask.len() != self.shape.len() {
            return Err(Error::Shape("data mask length differs from grid size".into()));
        }
        for (m, &keep) in self.data_mask.iter_mut().zip(mask) {
            *m &= keep;
        }
        self.zero_unused();
        Ok(self)
    }

    /// Treat every unmeasured sample as a measured zero modulus.
    pub fn clamp_unmeasured_to_zero(mut self) -> Self {
        for q in 0..self.shape.len() {
            if !self.data_mask[q] {
                self.data_mask[q] = true;
                self.moduli[q] = 0.0;
            }
        }
        self.zero_unused();
        self
    }

    pub fn shape(&self) -> &GridShape {
        &self.shape
    }

    pub fn moduli(&self) -> &[f64] {
        &self.moduli
    }

    pub fn data_mask(&self) -> &[bool] {
        &self.data_mask
    }

    pub fn phases(&self) -> Option<&[f64]> {
        self.phases.as_deref()
    }

    pub fn is_measured(&self, q: usize) -> bool {
        self.data_mask[q]
    }

    pub fn measured_count(&self) -> usize {
        self.data_mask.iter().filter(|&&m| m).count()
    }

    /// `‖F‖` over `Q_data`.
    pub fn norm(&self) -> f64 {
        self.moduli.iter().map(|f| f * f).sum::<f64>().sqrt()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(FDAT_MAGIC)?;
        w.write_all(&(self.shape.rank() as u32).to_le_bytes())?;
        for &m in self.shape.dims() {
            w.write_all(&(m as u32).to_le_bytes())?;
        }
        w.write_all(&[self.phases.is_some() as u8])?;
        for q in 0..self.shape.len() {
            w.write_all(&[self.data_mask[q] as u8])?;
            w.write_all(&self.moduli[q].to_le_bytes())?;
            if let Some(p) = &self.phases {
                w.write_all(&p[q].to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != FDAT_MAGIC {
            return Err(Error::Format("bad Fourier-data magic".into()));
        }
        let rank = read_u32(&mut r)? as usize;
        if rank == 0 || rank > 16 {
            return Err(Error::Format(format!("implausible grid rank {rank}")));
        }
        let dims = (0..rank).map(|_| read_u32(&mut r).map(|m| m as usize)).collect::<Result<Vec<_>>>()?;
        let shape = GridShape::new(dims)?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let has_phases = match flag[0] {
            0 => false,
            1 => true,
            f => return Err(Error::Format(format!("bad phase flag {f}"))),
        };
        let n = shape.len();
        let mut moduli = Vec::with_capacity(n);
        let mut mask = Vec::with_capacity(n);
        let mut phases = has_phases.then(|| Vec::with_capacity(n));
        for _ in 0..n {
            let mut m = [0u8; 1];
            r.read_exact(&mut m)?;
            mask.push(m[0] != 0);
            moduli.push(read_f64(&mut r)?);
            if let Some(p) = &mut phases {
                p.push(read_f64(&mut r)?);
            }
        }
        Self::new(shape, moduli, mask, phases)
    }
}

/// Fourier-modulus projection with a cached transform plan.
#[derive(Debug, Clone)]
pub struct FourierProjection {
    data: FourierData,
    dft: Dft,
}

impl FourierProjection {
    pub fn new(data: FourierData) -> Self {
        let dft = Dft::new(data.shape());
        Self { data, dft }
    }

    pub fn data(&self) -> &FourierData {
        &self.data
    }

    /// The Fourier-space rule applied to one sample.
    pub fn project_sample(&self, q: usize, value: Complex64) -> Complex64 {
        if !self.data.data_mask[q] {
            return value;
        }
        let f = self.data.moduli[q];
        let r = value.norm();
        if r == 0.0 {
            // arbitrary phase choice: real and positive
            Complex64::new(f, 0.0)
        } else {
            value * (f / r)
        }
    }
}

impl Projection for FourierProjection {
    fn project(&self, obj: &ObjectGrid) -> Result<ObjectGrid> {
        check_shape(self.data.shape(), obj)?;
        let mut values = obj.values().to_vec();
        self.dft.forward(&mut values);
        for (q, v) in values.iter_mut().enumerate() {
            *v = self.project_sample(q, *v);
        }
        self.dft.inverse(&mut values);
        Ok(obj.with_values(values))
    }
}

/// `Π_F = ℱ⁻¹ ∘ Π̃_F ∘ ℱ` on a real-space object.
pub fn project_fourier(obj: &ObjectGrid, data: &FourierData) -> Result<ObjectGrid> {
    FourierProjection::new(data.clone()).project(obj)
}

/// Real-space object with the given kind whose transform is `values`.
#[cfg(test)]
pub(crate) fn from_fourier(shape: &GridShape, kind: crate::grid::ScalarKind, values: Vec<Complex64>) -> Result<ObjectGrid> {
    let f = ObjectGrid::new(shape.clone(), kind, Space::FourierSpace, values)?;
    Ok(f.idft())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::ScalarKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn shape1(n: usize) -> GridShape {
        GridShape::new(vec![n]).unwrap()
    }

    fn random_object(shape: &GridShape, kind: ScalarKind, rng: &mut ChaCha8Rng) -> ObjectGrid {
        let values = (0..shape.len())
            .map(|_| {
                let im = if kind == ScalarKind::Complex { rng.random_range(-1.0..1.0) } else { 0.0 };
                Complex64::new(rng.random_range(-1.0..1.0), im)
            })
            .collect();
        ObjectGrid::new(shape.clone(), kind, Space::RealSpace, values).unwrap()
    }

    #[test]
    fn support_projection_examples() {
        let s = shape1(4);
        let mask = SupportMask::new(s.clone(), [0, 1]).unwrap();
        let obj = ObjectGrid::from_real(s.clone(), &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = project_support(&obj, &mask).unwrap();
        assert_eq!(p, ObjectGrid::from_real(s, &[1.0, 2.0, 0.0, 0.0]).unwrap());
        assert_eq!(project_support(&p, &mask).unwrap(), p);
        assert!((obj.distance(&p).powi(2) - 25.0).abs() < 1e-12);
        assert!((mask.sigma() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn support_mask_validation_and_json() {
        let s = shape1(4);
        assert!(SupportMask::new(s.clone(), [0, 0]).is_err());
        assert!(SupportMask::new(s.clone(), [4]).is_err());
        assert!(SupportMask::new(s.clone(), []).is_err());
        let mask = SupportMask::new(s, [3, 1]).unwrap();
        assert_eq!(mask.members(), &[1, 3]);
        let back = SupportMask::from_json(&mask.to_json().unwrap()).unwrap();
        assert_eq!(back, mask);
    }

    #[test]
    fn atomic_single_voxel_argmax() {
        let s = shape1(4);
        let obj = ObjectGrid::from_real(s.clone(), &[3.0, 1.0, 4.0, 1.0]).unwrap();
        let one = AtomicSupportSpec::new(s.clone(), 1, vec![vec![0]]).unwrap();
        let (p, m) = project_atomic_support(&obj, &one).unwrap();
        assert_eq!(m.members(), &[2]);
        assert_eq!(p, ObjectGrid::from_real(s.clone(), &[0.0, 0.0, 4.0, 0.0]).unwrap());

        let two = AtomicSupportSpec::new(s.clone(), 2, vec![vec![0]]).unwrap();
        let (p, m) = project_atomic_support(&obj, &two).unwrap();
        assert_eq!(m.members(), &[0, 2]);
        assert_eq!(p, ObjectGrid::from_real(s, &[3.0, 0.0, 4.0, 0.0]).unwrap());
    }

    #[test]
    fn atomic_solution_is_fixed() {
        let s = GridShape::new(vec![12, 12]).unwrap();
        let spec = AtomicSupportSpec::cube(s.clone(), 3, 3).unwrap();
        let mut vals = vec![0.0; s.len()];
        for (center, amp) in [(s.index_of(&[2, 2]), 1.0), (s.index_of(&[7, 3]), 0.8), (s.index_of(&[5, 9]), 1.3)] {
            for c in spec.placement(center) {
                vals[c] = amp;
            }
        }
        let obj = ObjectGrid::from_real(s, &vals).unwrap();
        let (p, m) = project_atomic_support(&obj, &spec).unwrap();
        assert_eq!(p, obj);
        assert_eq!(m.size(), 27);
        for (i, &v) in vals.iter().enumerate() {
            assert_eq!(m.contains(i), v != 0.0);
        }
    }

    #[test]
    fn atomic_packing_errors() {
        let s = shape1(4);
        assert!(matches!(
            AtomicSupportSpec::new(s.clone(), 3, vec![vec![0], vec![1]]),
            Err(Error::InfeasiblePacking(_))
        ));
        let cramped = AtomicSupportSpec::new(shape1(6), 3, vec![vec![0], vec![1]]).unwrap();
        // greedy takes {1,2}, then {4,5}; {3} and {0} are isolated
        let err = cramped
            .select_support(&ObjectGrid::from_real(shape1(6), &[0.0, 5.0, 5.0, 0.0, 4.0, 4.0]).unwrap())
            .unwrap_err();
        assert!(matches!(err, Error::InfeasiblePacking(_)));
    }

    #[test]
    fn fourier_projection_sample_rules() {
        let s = shape1(4);
        let mut moduli = vec![0.0; 4];
        moduli[1] = 10.0;
        moduli[2] = 10.0;
        let mask = vec![false, true, true, false];
        let data = FourierData::new(s.clone(), moduli, mask, None).unwrap();
        let proj = FourierProjection::new(data.clone());
        assert_eq!(proj.project_sample(1, Complex64::new(3.0, 4.0)), Complex64::new(6.0, 8.0));
        assert_eq!(proj.project_sample(2, Complex64::new(0.0, 0.0)), Complex64::new(10.0, 0.0));
        assert_eq!(proj.project_sample(3, Complex64::new(1.5, -2.0)), Complex64::new(1.5, -2.0));

        let fvals = vec![
            Complex64::new(0.7, 0.1),
            Complex64::new(3.0, 4.0),
            Complex64::new(0.0, 0.0),
            Complex64::new(-1.0, 2.0),
        ];
        let obj = from_fourier(&s, ScalarKind::Complex, fvals.clone()).unwrap();
        let out = project_fourier(&obj, &data).unwrap().dft();
        // sample 2 round-trips to rounding noise, so only its modulus is fixed
        let expected = [fvals[0], Complex64::new(6.0, 8.0), fvals[3]];
        for (q, b) in [0, 1, 3].into_iter().zip(&expected) {
            assert!((out.values()[q] - b).norm() < 1e-12);
        }
        assert!((out.values()[2].norm() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn fourier_constraint_and_idempotency() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let s = GridShape::new(vec![6, 6]).unwrap();
        for kind in [ScalarKind::Real, ScalarKind::Complex] {
            let sol = random_object(&s, kind, &mut rng);
            let data = FourierData::from_solution(&sol);
            let x = random_object(&s, kind, &mut rng);
            let p = project_fourier(&x, &data).unwrap();
            for (v, f) in p.dft().values().iter().zip(data.moduli()) {
                assert!((v.norm() - f).abs() < 1e-10);
            }
            assert!(project_fourier(&p, &data).unwrap().distance(&p) < 1e-10);
            assert!(project_fourier(&sol, &data).unwrap().distance(&sol) < 1e-10);
        }
    }

    #[test]
    fn fourier_data_file_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = GridShape::new(vec![4, 3]).unwrap();
        let sol = random_object(&s, ScalarKind::Complex, &mut rng);
        let mut mask = vec![true; s.len()];
        mask[5] = false;
        let data = FourierData::from_solution(&sol).restricted(&mask).unwrap();
        let mut buf = Vec::new();
        data.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], b"DMFDAT01");
        assert_eq!(buf.len(), 8 + 4 + 8 + 1 + 12 * 17);
        assert_eq!(FourierData::read_from(&buf[..]).unwrap(), data);

        let bare = FourierData::new(s.clone(), vec![1.0; 12], vec![true; 12], None).unwrap();
        let mut buf = Vec::new();
        bare.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 4 + 8 + 1 + 12 * 9);
        assert_eq!(FourierData::read_from(&buf[..]).unwrap(), bare);
    }

    #[test]
    fn fourier_data_validation() {
        let s = shape1(3);
        assert!(FourierData::new(s.clone(), vec![1.0, -1.0, 0.0], vec![true; 3], None).is_err());
        assert!(FourierData::new(s.clone(), vec![1.0; 2], vec![true; 3], None).is_err());
        // negative values outside Q_data are ignored and cleared
        let d = FourierData::new(s, vec![1.0, -1.0, 0.0], vec![true, false, true], None).unwrap();
        assert_eq!(d.moduli(), &[1.0, 0.0, 0.0]);
        let clamped = d.clamp_unmeasured_to_zero();
        assert_eq!(clamped.measured_count(), 3);
    }
}
