//! Object ensembles and explicit-sum estimators of the normalized traces
//! `t_F`, `t_SF` and `t_SFSF` of the linearized support and Fourier projections.
//!
//! Sums over Fourier samples use the support transform
//! `Σ_q = N⁻¹ Σ_{s∈S} exp(i q·s)`; double sums are evaluated as cyclic
//! convolutions in O(N log N).

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Dft, GridShape, ObjectGrid, ScalarKind};
use crate::linearized::{lin_fourier_matrix, lin_support_matrix, LinearizationContext};
use crate::projections::{AtomicSupportSpec, FourierData, SupportMask};
use crate::rmt::substream;
use crate::spectral::{compute_traces_with, PerpTrace};

/// Agreement required between the explicit sums and dense-matrix traces.
pub const DENSE_TOL: f64 = 1e-8;

/// Largest real dimension for which reports cross-check against dense matrices.
pub const DENSE_CHECK_MAX_DIM: usize = 1024;

/// Re-draws allowed per atom before placement is declared infeasible.
pub const MAX_PLACEMENT_TRIES: usize = 10_000;

/// Gaussian pixels on a fixed support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedSupportEnsemble {
    pub mask: SupportMask,
    pub kind: ScalarKind,
}

/// `M` equal atoms with a common footprint, centers uniform on the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomicEnsemble {
    pub spec: AtomicSupportSpec,
    /// Total amplitude per atom, spread evenly over its footprint.
    pub amplitude: f64,
}

impl AtomicEnsemble {
    pub fn new(spec: AtomicSupportSpec, amplitude: f64) -> Result<Self> {
        if !(amplitude.is_finite() && amplitude > 0.0) {
            return Err(Error::Invalid(format!("atom amplitude must be positive, got {amplitude}")));
        }
        Ok(Self { spec, amplitude })
    }

    pub fn voxel_amplitude(&self) -> f64 {
        self.amplitude / self.spec.footprint().len() as f64
    }

    /// `A(q)` in `Σ_q = A(q) ρ_{-q} / √N`. Atoms fill their footprint with a
    /// constant value, so the footprint transform cancels and `A` is flat.
    pub fn form_factor(&self, _q: usize) -> f64 {
        1.0 / self.voxel_amplitude()
    }

    /// `M / N`, held fixed when comparing grid sizes.
    pub fn resolution(&self) -> f64 {
        self.spec.atom_count() as f64 / self.spec.shape().len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Ensemble {
    FixedSupport(FixedSupportEnsemble),
    Atomic(AtomicEnsemble),
}

impl Ensemble {
    pub fn shape(&self) -> &GridShape {
        match self {
            Ensemble::FixedSupport(e) => e.mask.shape(),
            Ensemble::Atomic(e) => e.spec.shape(),
        }
    }

    pub fn kind(&self) -> ScalarKind {
        match self {
            Ensemble::FixedSupport(e) => e.kind,
            Ensemble::Atomic(_) => ScalarKind::Real,
        }
    }

    pub fn sigma(&self) -> f64 {
        match self {
            Ensemble::FixedSupport(e) => e.mask.sigma(),
            Ensemble::Atomic(e) => e.spec.sigma(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EnsembleSample {
    pub object: ObjectGrid,
    pub mask: SupportMask,
}

pub fn sample_object<R: Rng + ?Sized>(ensemble: &Ensemble, rng: &mut R) -> Result<EnsembleSample> {
    match ensemble {
        Ensemble::FixedSupport(e) => {
            let shape = e.mask.shape().clone();
            let mut values = vec![Complex64::new(0.0, 0.0); shape.len()];
            for &r in e.mask.members() {
                values[r] = match e.kind {
                    ScalarKind::Real => Complex64::new(rng.sample(StandardNormal), 0.0),
                    ScalarKind::Complex => {
                        let s = std::f64::consts::FRAC_1_SQRT_2;
                        Complex64::new(s * rng.sample::<f64, _>(StandardNormal), s * rng.sample::<f64, _>(StandardNormal))
                    }
                };
            }
            let object = match e.kind {
                ScalarKind::Real => ObjectGrid::from_real(shape, &values.iter().map(|v| v.re).collect::<Vec<_>>())?,
                ScalarKind::Complex => ObjectGrid::from_complex(shape, values)?,
            };
            Ok(EnsembleSample { object, mask: e.mask.clone() })
        }
        Ensemble::Atomic(e) => {
            let shape = e.spec.shape().clone();
            let n = shape.len();
            let mut occupied = vec![false; n];
            let mut members = Vec::with_capacity(e.spec.support_size());
            for atom in 0..e.spec.atom_count() {
                let mut placed = false;
                for _ in 0..MAX_PLACEMENT_TRIES {
                    let cells = e.spec.placement(rng.random_range(0..n));
                    if cells.iter().all(|&c| !occupied[c]) {
                        for &c in &cells {
                            occupied[c] = true;
                        }
                        members.extend(cells);
                        placed = true;
                        break;
                    }
                }
                if !placed {
                    return Err(Error::InfeasiblePacking(format!(
                        "could not place atom {} of {} without overlap after {MAX_PLACEMENT_TRIES} draws",
                        atom + 1,
                        e.spec.atom_count()
                    )));
                }
            }
            let amp = e.voxel_amplitude();
            let values: Vec<f64> = occupied.iter().map(|&o| if o { amp } else { 0.0 }).collect();
            let object = ObjectGrid::from_real(shape.clone(), &values)?;
            Ok(EnsembleSample { object, mask: SupportMask::new(shape, members)? })
        }
    }
}

/// `Σ_q = N⁻¹ Σ_{s∈S} exp(i q·s)` for every sample `q`.
pub fn support_transform(mask: &SupportMask) -> Vec<Complex64> {
    let n = mask.shape().len();
    let mut values: Vec<Complex64> =
        mask.indicator().iter().map(|&b| Complex64::new(if b { 1.0 } else { 0.0 }, 0.0)).collect();
    Dft::new(mask.shape()).forward(&mut values);
    let s = 1.0 / (n as f64).sqrt();
    values.iter_mut().for_each(|v| *v *= s);
    values
}

/// `c_k = Σ_q a_q b_{k−q}` on the grid.
pub fn cyclic_convolution(shape: &GridShape, a: &[Complex64], b: &[Complex64]) -> Vec<Complex64> {
    let dft = Dft::new(shape);
    let mut fa = a.to_vec();
    let mut fb = b.to_vec();
    dft.forward(&mut fa);
    dft.forward(&mut fb);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x *= y;
    }
    dft.inverse(&mut fa);
    let s = (shape.len() as f64).sqrt();
    fa.iter_mut().for_each(|v| *v *= s);
    fa
}

/// Explicit-sum traces for one object.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalTraces {
    pub sigma: f64,
    pub t_f: f64,
    pub t_sf: f64,
    pub t_sfsf: f64,
    /// `−(1/2N) Σ_q e^{2iφ_q} Σ_{−2q}` (real kind; zero for complex).
    pub single_sum: f64,
    /// `(1/4N)` times the full double sum.
    pub double_sum: f64,
    /// Diagonal part of the double sum, `σ²/4` when no modulus vanishes.
    pub double_sum_diagonal: f64,
    /// `(1/2N) Σ_q |Σ_{−2q}|`, majorizing `|single_sum|` (real kind).
    pub single_sum_bound: f64,
    /// Fourier samples whose modulus vanishes (the linearization is zero there).
    pub zero_count: usize,
    /// Contribution of those samples to `t_SFSF`.
    pub zero_correction: f64,
}

/// Moduli at or below this fraction of the largest count as zero.
pub const ZERO_MODULUS_REL: f64 = 1e-10;

fn zero_threshold(data: &FourierData) -> f64 {
    ZERO_MODULUS_REL * data.moduli().iter().cloned().fold(0.0, f64::max)
}

/// `e^{2iφ_q}`, set to zero on vanishing moduli, and the list of those samples.
fn unit_phases(obj: &ObjectGrid, data: &FourierData) -> Result<(Vec<Complex64>, Vec<usize>)> {
    if data.measured_count() != data.shape().len() {
        return Err(Error::Invalid("explicit trace sums need every Fourier sample measured".into()));
    }
    let ctx = LinearizationContext::new(obj, data, zero_threshold(data))?;
    let zeros: Vec<usize> = (0..obj.shape().len()).filter(|&q| ctx.zero_modulus()[q]).collect();
    let g = ctx
        .phases()
        .iter()
        .zip(ctx.zero_modulus())
        .map(|(&p, &z)| if z { Complex64::new(0.0, 0.0) } else { Complex64::from_polar(1.0, 2.0 * p) })
        .collect();
    Ok((g, zeros))
}

/// Evaluates the closed trace expressions for `obj` (the linearization point)
/// with support `mask`.
pub fn empirical_traces(obj: &ObjectGrid, mask: &SupportMask, data: &FourierData) -> Result<EmpiricalTraces> {
    let shape = obj.shape();
    if mask.shape() != shape {
        return Err(Error::Shape("mask and object grids differ".into()));
    }
    let n = shape.len();
    let nf = n as f64;
    let sigma = mask.sigma();
    let (g, zeros) = unit_phases(obj, data)?;
    let big_sigma = support_transform(mask);

    // zero-modulus samples replace ½ by 0 on the diagonal part
    let nz = zeros.len() as f64;
    let mut zz = 0.0;
    for &q in &zeros {
        for &qp in &zeros {
            zz += big_sigma[shape.sub_index(q, qp)].norm_sqr();
        }
    }
    let zero_base = -sigma * nz / (2.0 * nf);
    let mut zero_correction = zero_base + zz / (4.0 * nf);

    match obj.kind() {
        ScalarKind::Complex => {
            // h_p = conj(g_{−p}) so that conv(g, h)_{−k} = Σ_q g_q conj(g_{q+k})
            let h: Vec<Complex64> = (0..n).map(|p| g[shape.neg_index(p)].conj()).collect();
            let corr = cyclic_convolution(shape, &g, &h);
            let double: Complex64 = (0..n).map(|k| big_sigma[k] * big_sigma[k] * corr[shape.neg_index(k)]).sum();
            let diagonal: f64 = g.iter().map(|v| v.norm_sqr()).sum::<f64>() * sigma * sigma;
            let double_sum = double.re / (4.0 * nf);
            Ok(EmpiricalTraces {
                sigma,
                t_f: 0.5 - nz / (2.0 * nf),
                t_sf: sigma / 2.0 + zero_base,
                t_sfsf: sigma / 4.0 + zero_correction + double_sum,
                single_sum: 0.0,
                double_sum,
                double_sum_diagonal: diagonal / (4.0 * nf),
                single_sum_bound: 0.0,
                zero_count: zeros.len(),
                zero_correction,
            })
        }
        ScalarKind::Real => {
            let special: Complex64 = shape.self_conjugate_indices().iter().map(|&q| g[q]).sum();
            let t_f = 0.5 - nz / (2.0 * nf) - special.re / (2.0 * nf);
            let mut single = Complex64::new(0.0, 0.0);
            let mut bound = 0.0;
            for q in 0..n {
                let s = big_sigma[shape.neg_index(shape.scale_index(q, 2))];
                single += g[q] * s;
                bound += s.norm();
            }
            let single_sum = -single.re / (2.0 * nf);
            // cross terms between the zero-modulus part and the conjugation part
            let mut cross = Complex64::new(0.0, 0.0);
            for &q in &zeros {
                for qp in 0..n {
                    cross += g[qp] * big_sigma[shape.neg_index(shape.add_index(q, qp))] * big_sigma[shape.sub_index(q, qp)];
                }
            }
            zero_correction += cross.re / (2.0 * nf);
            let conv = cyclic_convolution(shape, &g, &g);
            let double: Complex64 = (0..n)
                .map(|k| {
                    let s = big_sigma[shape.neg_index(k)];
                    s * s * conv[k]
                })
                .sum();
            let diagonal: Complex64 = (0..n).map(|q| g[q] * g[shape.neg_index(q)]).sum::<Complex64>() * sigma * sigma;
            let double_sum = double.re / (4.0 * nf);
            Ok(EmpiricalTraces {
                sigma,
                t_f,
                t_sf: sigma / 2.0 + zero_base + single_sum,
                t_sfsf: sigma / 4.0 + zero_correction + single_sum + double_sum,
                single_sum,
                double_sum,
                double_sum_diagonal: diagonal.re / (4.0 * nf),
                single_sum_bound: bound / (2.0 * nf),
                zero_count: zeros.len(),
                zero_correction,
            })
        }
    }
}

/// Dense-matrix values `(t_F, t_SF, t_SFSF)` built from the linearized operators.
pub fn dense_traces(obj: &ObjectGrid, mask: &SupportMask, data: &FourierData) -> Result<(f64, f64, f64)> {
    let ctx = LinearizationContext::new(obj, data, zero_threshold(data))?;
    let pf = lin_fourier_matrix(&ctx, data, obj.kind())?;
    let ps = lin_support_matrix(mask, obj.kind());
    let t = compute_traces_with(&ps, &pf, PerpTrace::AssumeOverconstrained)?;
    Ok((t.t2, t.t12, t.t1212))
}

/// [`empirical_traces`] confirmed against [`dense_traces`] to [`DENSE_TOL`].
pub fn empirical_traces_checked(obj: &ObjectGrid, mask: &SupportMask, data: &FourierData) -> Result<EmpiricalTraces> {
    let t = empirical_traces(obj, mask, data)?;
    let (tf, tsf, tsfsf) = dense_traces(obj, mask, data)?;
    let worst = (t.t_f - tf).abs().max((t.t_sf - tsf).abs()).max((t.t_sfsf - tsfsf).abs());
    if worst > DENSE_TOL {
        return Err(Error::Inconsistent(format!(
            "explicit trace sums differ from dense traces by {worst:.3e}: \
             ({}, {}, {}) vs ({tf}, {tsf}, {tsfsf})",
            t.t_f, t.t_sf, t.t_sfsf
        )));
    }
    Ok(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
}

impl MeanSe {
    pub fn of(values: impl Iterator<Item = f64> + Clone) -> Self {
        let m = values.clone().count() as f64;
        let mean = values.clone().sum::<f64>() / m;
        let var = if m > 1.0 { values.map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0) } else { 0.0 };
        Self { mean, se: (var / m).sqrt() }
    }

    /// `(mean − target)/se`; deviations at rounding level count as zero.
    pub fn z_score(&self, target: f64) -> f64 {
        let d = self.mean - target;
        if d.abs() <= 1e-12 * target.abs().max(1.0) {
            0.0
        } else if self.se > 0.0 {
            d / self.se
        } else {
            d.signum() * f64::INFINITY
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleTraceReport {
    pub samples: usize,
    pub sigma: f64,
    pub kind: ScalarKind,
    pub t_f: MeanSe,
    pub t_sf: MeanSe,
    pub t_sfsf: MeanSe,
    pub single_sum: MeanSe,
    pub single_sum_abs: MeanSe,
    pub double_sum: MeanSe,
    pub double_sum_diagonal: MeanSe,
    pub predicted_t_sf: f64,
    pub predicted_t_sfsf: f64,
    pub z_t_sf: f64,
    pub z_t_sfsf: f64,
    /// Whether sample 0 was confirmed against dense-matrix traces.
    pub dense_checked: bool,
    #[serde(skip)]
    pub per_sample: Vec<EmpiricalTraces>,
}

/// Sample `i` is drawn from substream `i` of `seed`.
pub fn ensemble_average_report(ensemble: &Ensemble, samples: usize, seed: u64) -> Result<EnsembleTraceReport> {
    if samples < 2 {
        return Err(Error::Invalid("ensemble averages need at least 2 samples".into()));
    }
    let dense_checked = ensemble.shape().len() * ensemble.kind().real_multiplicity() <= DENSE_CHECK_MAX_DIM;
    let per_sample: Vec<EmpiricalTraces> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(seed, i as u64);
            let s = sample_object(ensemble, &mut rng)?;
            let data = FourierData::from_solution(&s.object);
            if i == 0 && dense_checked {
                empirical_traces_checked(&s.object, &s.mask, &data)
            } else {
                empirical_traces(&s.object, &s.mask, &data)
            }
        })
        .collect::<Result<_>>()?;
    let sigma = ensemble.sigma();
    let stat = |f: fn(&EmpiricalTraces) -> f64| MeanSe::of(per_sample.iter().map(f));
    let t_sf = stat(|t| t.t_sf);
    let t_sfsf = stat(|t| t.t_sfsf);
    let predicted_t_sf = sigma / 2.0;
    let predicted_t_sfsf = sigma / 4.0 + sigma * sigma / 4.0;
    Ok(EnsembleTraceReport {
        samples,
        sigma,
        kind: ensemble.kind(),
        t_f: stat(|t| t.t_f),
        t_sf,
        t_sfsf,
        single_sum: stat(|t| t.single_sum),
        single_sum_abs: stat(|t| t.single_sum.abs()),
        double_sum: stat(|t| t.double_sum),
        double_sum_diagonal: stat(|t| t.double_sum_diagonal),
        predicted_t_sf,
        predicted_t_sfsf,
        z_t_sf: t_sf.z_score(predicted_t_sf),
        z_t_sfsf: t_sfsf.z_score(predicted_t_sfsf),
        dense_checked,
        per_sample,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TripletAverage {
    pub samples: usize,
    pub pairs_per_sample: usize,
    pub mean_re: f64,
    pub mean_im: f64,
    /// Standard error of the complex mean, from per-sample averages.
    pub se: f64,
}

impl TripletAverage {
    pub fn magnitude(&self) -> f64 {
        self.mean_re.hypot(self.mean_im)
    }
}

/// Moduli below this fraction of the largest are skipped when sampling pairs.
pub const TRIPLET_MODULUS_CUT: f64 = 1e-9;

/// Mean of `exp 2i(φ_q + φ_{q′} − φ_{q+q′})` over random pairs with
/// `q, q′, q + q′ ≠ 0`, averaged per sample and then across samples.
pub fn triplet_phase_average(ensemble: &AtomicEnsemble, samples: usize, pairs_per_sample: usize, seed: u64) -> Result<TripletAverage> {
    if samples < 2 || pairs_per_sample == 0 {
        return Err(Error::Invalid("triplet averages need at least 2 samples and 1 pair per sample".into()));
    }
    let shape = ensemble.spec.shape().clone();
    let n = shape.len();
    if n < 3 {
        return Err(Error::Invalid("triplet averages need at least 3 grid samples".into()));
    }
    let wrapped = Ensemble::Atomic(ensemble.clone());
    let per_sample: Vec<Complex64> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(seed, i as u64);
            let s = sample_object(&wrapped, &mut rng)?;
            let f = s.object.dft().into_values();
            let cut = TRIPLET_MODULUS_CUT * f.iter().map(|v| v.norm()).fold(0.0, f64::max);
            let u2: Vec<Option<Complex64>> =
                f.iter().map(|v| (v.norm() > cut).then(|| (v / v.norm()).powi(2))).collect();
            let mut sum = Complex64::new(0.0, 0.0);
            let mut taken = 0;
            let mut draws = 0usize;
            while taken < pairs_per_sample {
                draws += 1;
                if draws > 1000 * pairs_per_sample {
                    return Err(Error::Degenerate("too few Fourier samples with nonzero modulus".into()));
                }
                let q = rng.random_range(1..n);
                let qp = rng.random_range(1..n);
                let sum_q = shape.add_index(q, qp);
                if sum_q == 0 {
                    continue;
                }
                if let (Some(a), Some(b), Some(c)) = (u2[q], u2[qp], u2[sum_q]) {
                    sum += a * b * c.conj();
                    taken += 1;
                }
            }
            Ok(sum / pairs_per_sample as f64)
        })
        .collect::<Result<_>>()?;
    let re = MeanSe::of(per_sample.iter().map(|z| z.re));
    let im = MeanSe::of(per_sample.iter().map(|z| z.im));
    Ok(TripletAverage {
        samples,
        pairs_per_sample,
        mean_re: re.mean,
        mean_im: im.mean,
        se: re.se.hypot(im.se),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape(dims: &[usize]) -> GridShape {
        GridShape::new(dims.to_vec()).unwrap()
    }

    fn block_mask(s: &GridShape, w: usize, h: usize) -> SupportMask {
        let cols = s.dims()[1];
        SupportMask::new(s.clone(), (0..w).flat_map(|i| (0..h).map(move |j| i * cols + j))).unwrap()
    }

    fn naive_double_sum(shape: &GridShape, g: &[Complex64], sig: &[Complex64], kind: ScalarKind) -> Complex64 {
        let n = shape.len();
        let mut s = Complex64::new(0.0, 0.0);
        for q in 0..n {
            for qp in 0..n {
                s += match kind {
                    ScalarKind::Real => g[q] * g[qp] * sig[shape.neg_index(shape.add_index(q, qp))].powi(2),
                    ScalarKind::Complex => g[q] * g[qp].conj() * sig[shape.sub_index(qp, q)].powi(2),
                };
            }
        }
        s
    }

    #[test]
    fn support_transform_examples() {
        let s = shape(&[6, 5]);
        let mask = block_mask(&s, 2, 3);
        let t = support_transform(&mask);
        assert!((t[0] - Complex64::new(mask.sigma(), 0.0)).norm() < 1e-14);
        assert!(t.iter().all(|v| v.norm() <= mask.sigma() + 1e-12));
        let q = 7;
        let direct: Complex64 = mask
            .members()
            .iter()
            .map(|&r| Complex64::from_polar(1.0 / 30.0, s.phase(q, r)))
            .sum();
        assert!((t[q] - direct).norm() < 1e-14);
        let full = support_transform(&SupportMask::full(s.clone()));
        assert!((full[0].re - 1.0).abs() < 1e-14);
        assert!(full[1..].iter().all(|v| v.norm() < 1e-14));
    }

    #[test]
    fn convolution_matches_direct_sum() {
        let s = shape(&[4, 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a: Vec<Complex64> = (0..12).map(|_| Complex64::new(rng.random(), rng.random())).collect();
        let b: Vec<Complex64> = (0..12).map(|_| Complex64::new(rng.random(), rng.random())).collect();
        let c = cyclic_convolution(&s, &a, &b);
        for k in 0..12 {
            let direct: Complex64 = (0..12).map(|q| a[q] * b[s.sub_index(k, q)]).sum();
            assert!((c[k] - direct).norm() < 1e-12);
        }
    }

    #[test]
    fn explicit_sums_match_dense_traces() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (dims, kind) in [
            (vec![8, 8], ScalarKind::Real),
            (vec![8, 8], ScalarKind::Complex),
            (vec![6, 10], ScalarKind::Real),
            (vec![4, 4, 4], ScalarKind::Complex),
            (vec![15], ScalarKind::Real),
        ] {
            let s = shape(&dims);
            let n = s.len();
            let members: Vec<usize> = (0..n).filter(|_| rng.random::<f64>() < 0.3).collect();
            let mask = SupportMask::new(s.clone(), members).unwrap();
            let e = Ensemble::FixedSupport(FixedSupportEnsemble { mask, kind });
            let sample = sample_object(&e, &mut rng).unwrap();
            let data = FourierData::from_solution(&sample.object);
            let t = empirical_traces_checked(&sample.object, &sample.mask, &data).unwrap();
            assert!(t.t_sfsf > 0.0);
        }
    }

    #[test]
    fn fft_double_sum_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = shape(&[6, 6]);
        for kind in [ScalarKind::Real, ScalarKind::Complex] {
            let mask = block_mask(&s, 3, 2);
            let e = Ensemble::FixedSupport(FixedSupportEnsemble { mask: mask.clone(), kind });
            let obj = sample_object(&e, &mut rng).unwrap().object;
            let data = FourierData::from_solution(&obj);
            let (g, _) = unit_phases(&obj, &data).unwrap();
            let sig = support_transform(&mask);
            let naive = naive_double_sum(&s, &g, &sig, kind);
            let t = empirical_traces(&obj, &mask, &data).unwrap();
            assert!((naive.re / (4.0 * 36.0) - t.double_sum).abs() < 1e-12);
            assert!(naive.im.abs() < 1e-10);
        }
    }

    #[test]
    fn complex_identities_hold_per_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let s = shape(&[8, 8]);
        let e = Ensemble::FixedSupport(FixedSupportEnsemble { mask: block_mask(&s, 4, 3), kind: ScalarKind::Complex });
        for _ in 0..3 {
            let smp = sample_object(&e, &mut rng).unwrap();
            let data = FourierData::from_solution(&smp.object);
            let (tf, tsf, _) = dense_traces(&smp.object, &smp.mask, &data).unwrap();
            assert!((tf - 0.5).abs() < 1e-10);
            assert!((tsf - smp.mask.sigma() / 2.0).abs() < 1e-10);
        }
    }

    #[test]
    fn real_t_f_counts_self_conjugate_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for dims in [vec![8, 8], vec![4, 4, 4], vec![5, 8]] {
            let s = shape(&dims);
            let e = Ensemble::FixedSupport(FixedSupportEnsemble { mask: block_mask(&s, 2, 3), kind: ScalarKind::Real });
            let smp = sample_object(&e, &mut rng).unwrap();
            let data = FourierData::from_solution(&smp.object);
            let t = empirical_traces_checked(&smp.object, &smp.mask, &data).unwrap();
            let special = s.self_conjugate_indices().len() as f64;
            assert!((t.t_f - (0.5 - special / (2.0 * s.len() as f64))).abs() < 1e-12);
        }
    }

    #[test]
    fn diagonal_terms_give_sigma_squared_over_four() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let s = shape(&[8, 8]);
        for kind in [ScalarKind::Real, ScalarKind::Complex] {
            let e = Ensemble::FixedSupport(FixedSupportEnsemble { mask: block_mask(&s, 3, 5), kind });
            let smp = sample_object(&e, &mut rng).unwrap();
            let t = empirical_traces(&smp.object, &smp.mask, &FourierData::from_solution(&smp.object)).unwrap();
            let sig = smp.mask.sigma();
            assert!((t.double_sum_diagonal - sig * sig / 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn vanishing_moduli_match_dense_traces() {
        // width-2 atoms on even grids have exactly vanishing transforms at q = N/2
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut seen = 0;
        for dims in [vec![16], vec![8, 8], vec![6, 6]] {
            let spec = AtomicSupportSpec::cube(shape(&dims), 2, 2).unwrap();
            let e = Ensemble::Atomic(AtomicEnsemble::new(spec, 1.0).unwrap());
            for _ in 0..4 {
                let smp = sample_object(&e, &mut rng).unwrap();
                let t = empirical_traces_checked(&smp.object, &smp.mask, &FourierData::from_solution(&smp.object)).unwrap();
                seen += t.zero_count;
            }
        }
        assert!(seen > 0);
        let s = shape(&[8]);
        let mut values = vec![Complex64::new(0.0, 0.0); 8];
        values[0] = Complex64::new(0.0, 1.0);
        values[4] = Complex64::new(0.0, 1.0);
        let obj = ObjectGrid::from_complex(s.clone(), values).unwrap();
        let mask = SupportMask::new(s, [0, 4, 5]).unwrap();
        let t = empirical_traces_checked(&obj, &mask, &FourierData::from_solution(&obj)).unwrap();
        assert!(t.zero_count > 0);
    }

    #[test]
    fn single_sum_respects_form_factor_bound() {
        let spec = AtomicSupportSpec::cube(shape(&[16, 16]), 6, 3).unwrap();
        let ens = AtomicEnsemble::new(spec, 3.0).unwrap();
        let s = ens.spec.shape().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..5 {
            let smp = sample_object(&Ensemble::Atomic(ens.clone()), &mut rng).unwrap();
            let t = empirical_traces(&smp.object, &smp.mask, &FourierData::from_solution(&smp.object)).unwrap();
            assert!(t.single_sum.abs() <= t.single_sum_bound + 1e-15);
            let rho = smp.object.dft().into_values();
            let n = s.len() as f64;
            let bound: f64 = (0..s.len())
                .map(|q| {
                    let q2 = s.scale_index(q, 2);
                    ens.form_factor(q2).abs() / n.sqrt() * rho[q2].norm()
                })
                .sum::<f64>()
                / (2.0 * n);
            assert!((bound - t.single_sum_bound).abs() < 1e-12);
        }
    }

    #[test]
    fn samples_respect_ensemble_definitions() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let s = shape(&[10, 10]);
        let mask = block_mask(&s, 3, 4);
        let fixed = Ensemble::FixedSupport(FixedSupportEnsemble { mask: mask.clone(), kind: ScalarKind::Complex });
        let smp = sample_object(&fixed, &mut rng).unwrap();
        for (r, v) in smp.object.values().iter().enumerate() {
            assert_eq!(*v == Complex64::new(0.0, 0.0), !mask.contains(r));
        }
        let atomic = Ensemble::Atomic(AtomicEnsemble::new(AtomicSupportSpec::cube(s.clone(), 5, 3).unwrap(), 1.0).unwrap());
        let smp = sample_object(&atomic, &mut rng).unwrap();
        assert_eq!(smp.mask.size(), 45);
        assert!((smp.object.values().iter().map(|v| v.re).sum::<f64>() - 5.0).abs() < 1e-12);
        // three pairs on a ring of 6 fit only in alternating positions
        let cramped = AtomicSupportSpec::cube(shape(&[6]), 3, 2).unwrap();
        let cramped = Ensemble::Atomic(AtomicEnsemble::new(cramped, 1.0).unwrap());
        let mut any_err = false;
        for _ in 0..20 {
            any_err |= matches!(sample_object(&cramped, &mut rng), Err(Error::InfeasiblePacking(_)));
        }
        assert!(any_err);
        assert!(AtomicEnsemble::new(AtomicSupportSpec::cube(s, 1, 1).unwrap(), 0.0).is_err());
    }

    #[test]
    fn fixed_support_phases_are_isotropic() {
        let s = shape(&[12, 12]);
        let e = Ensemble::FixedSupport(FixedSupportEnsemble { mask: block_mask(&s, 6, 5), kind: ScalarKind::Complex });
        let means: Vec<Complex64> = (0..1000)
            .map(|i| {
                let mut rng = substream(21, i);
                let obj = sample_object(&e, &mut rng).unwrap().object;
                let f = obj.dft().into_values();
                f.iter().map(|v| (v / v.norm()).powi(2)).sum::<Complex64>() / f.len() as f64
            })
            .collect();
        let re = MeanSe::of(means.iter().map(|z| z.re));
        let im = MeanSe::of(means.iter().map(|z| z.im));
        assert!(re.mean.abs() < 3.0 * re.se && im.mean.abs() < 3.0 * im.se, "{re:?} {im:?}");
    }

    #[test]
    fn fixed_support_average_t_sf() {
        let s = shape(&[12, 12]);
        let e = Ensemble::FixedSupport(FixedSupportEnsemble { mask: block_mask(&s, 5, 6), kind: ScalarKind::Complex });
        let rep = ensemble_average_report(&e, 200, 5).unwrap();
        assert!(rep.dense_checked);
        assert!(rep.z_t_sf.abs() < 3.0, "{rep:?}");

        // real objects: self-conjugate and near-origin samples bias t_SF at O(1/N)
        let bias = |side: usize, samples: usize| {
            let s = shape(&[side, side]);
            let e = Ensemble::FixedSupport(FixedSupportEnsemble {
                mask: block_mask(&s, side * 5 / 12, side / 2),
                kind: ScalarKind::Real,
            });
            let rep = ensemble_average_report(&e, samples, 5).unwrap();
            assert!(rep.t_sf.se >= 0.0 && rep.t_sfsf.se >= 0.0);
            (rep.t_sf.mean - rep.predicted_t_sf, rep)
        };
        let (small, rep) = bias(12, 400);
        let (large, _) = bias(24, 200);
        assert!(small.abs() > 2.0 * large.abs(), "{small} {large}");
        let e = Ensemble::FixedSupport(FixedSupportEnsemble { mask: block_mask(&s, 5, 6), kind: ScalarKind::Real });
        let again = ensemble_average_report(&e, 400, 5).unwrap();
        assert_eq!(rep.t_sfsf, again.t_sfsf);
        assert_eq!(rep.sigma, again.sigma);
    }

    #[test]
    fn single_atom_triplets_are_one() {
        let spec = AtomicSupportSpec::cube(shape(&[9, 9]), 1, 2).unwrap();
        let avg = triplet_phase_average(&AtomicEnsemble::new(spec, 1.0).unwrap(), 10, 50, 3).unwrap();
        assert!((avg.mean_re - 1.0).abs() < 1e-9 && avg.mean_im.abs() < 1e-9);
    }

    #[test]
    fn triplets_fade_with_atom_count() {
        let s = shape(&[24, 24]);
        let avg = |m| {
            let spec = AtomicSupportSpec::cube(s.clone(), m, 1).unwrap();
            triplet_phase_average(&AtomicEnsemble::new(spec, 1.0).unwrap(), 200, 64, 8).unwrap()
        };
        assert!(avg(64).magnitude() < avg(4).magnitude());
    }
}
