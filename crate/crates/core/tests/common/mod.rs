#![allow(dead_code)]

use num_complex::Complex64;
use phaselab::grid::{GridShape, ObjectGrid, ScalarKind};
use phaselab::linearized::{lin_fourier_matrix, lin_support_matrix, DenseOperator, LinearizationContext};
use phaselab::projections::{FourierData, SupportMask};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;

/// Grids with at most 32 samples.
pub const SMALL_SHAPES: &[&[usize]] = &[&[16], &[4, 4], &[5, 6], &[32], &[4, 8], &[3, 3, 3], &[7], &[25], &[2, 3, 5]];

/// Grids with at most 64 samples.
pub const MEDIUM_SHAPES: &[&[usize]] = &[&[8, 8], &[64], &[7, 9], &[5, 12], &[4, 4, 4], &[6, 10], &[48], &[3, 5, 4], &[37]];

pub fn random_support<R: Rng>(shape: &GridShape, sigma: f64, rng: &mut R) -> SupportMask {
    let n = shape.len();
    let count = ((sigma * n as f64).round() as usize).clamp(1, n);
    SupportMask::new(shape.clone(), sample(rng, n, count)).unwrap()
}

/// Gaussian values on `mask`.
pub fn random_object<R: Rng>(mask: &SupportMask, kind: ScalarKind, rng: &mut R) -> ObjectGrid {
    let shape = mask.shape().clone();
    let mut values = vec![Complex64::new(0.0, 0.0); shape.len()];
    for &r in mask.members() {
        let im = if kind == ScalarKind::Complex { rng.sample(StandardNormal) } else { 0.0 };
        values[r] = Complex64::new(rng.sample(StandardNormal), im);
    }
    match kind {
        ScalarKind::Real => ObjectGrid::from_real(shape, &values.iter().map(|v| v.re).collect::<Vec<_>>()).unwrap(),
        ScalarKind::Complex => ObjectGrid::from_complex(shape, values).unwrap(),
    }
}

pub struct Instance {
    pub object: ObjectGrid,
    pub mask: SupportMask,
    pub data: FourierData,
    pub p_support: DenseOperator,
    pub p_fourier: DenseOperator,
}

/// Linearized support and Fourier projections at a random object.
pub fn random_instance<R: Rng>(shape: &[usize], kind: ScalarKind, sigma: f64, rng: &mut R) -> Instance {
    let shape = GridShape::new(shape.to_vec()).unwrap();
    let mask = random_support(&shape, sigma, rng);
    let object = random_object(&mask, kind, rng);
    let data = FourierData::from_solution(&object);
    let ctx = LinearizationContext::new(&object, &data, 0.0).unwrap();
    let p_fourier = lin_fourier_matrix(&ctx, &data, kind).unwrap();
    let p_support = lin_support_matrix(&mask, kind);
    Instance { object, mask, data, p_support, p_fourier }
}
