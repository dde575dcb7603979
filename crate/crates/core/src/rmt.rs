//! Haar-orthogonal averages of projection-product traces.
//!
//! For `π₁ = P₁`, `π₂ = Oᵀ P₂ O` with `O` Haar-distributed on `O(n)`, the second
//! and fourth moments of the entries of `O` are fixed by invariance up to the
//! constants `a = 1/n`, `a₁ = (n+1)/((n−1)n(n+2))` and `a₂ = −1/((n−1)n(n+2))`,
//! which give the exact averages of `Tr P₁OᵀP₂O` and `Tr (P₁OᵀP₂O)²` below.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Samples drawn from one random substream.
pub const CHUNK: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrthogonalMoments {
    pub n: usize,
    pub a: f64,
    pub a1: f64,
    pub a2: f64,
}

pub fn moments(n: usize) -> Result<OrthogonalMoments> {
    if n < 2 {
        return Err(Error::Invalid(format!("fourth-moment constants need n >= 2, got {n}")));
    }
    let nf = n as f64;
    let den = (nf - 1.0) * nf * (nf + 2.0);
    Ok(OrthogonalMoments { n, a: 1.0 / nf, a1: (nf + 1.0) / den, a2: -1.0 / den })
}

/// Haar-distributed orthogonal matrix: QR of a standard-normal matrix with
/// the signs fixed so that `R` has a positive diagonal.
pub fn haar_orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DMatrix<f64> {
    assert!(n >= 1, "matrix size must be positive");
    let g = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for (j, mut col) in q.column_iter_mut().enumerate() {
        if r[(j, j)] < 0.0 {
            col.neg_mut();
        }
    }
    q
}

/// Two diagonal 0/1 projections on `ℝⁿ`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanonicalProjectionPair {
    n: usize,
    support1: Vec<usize>,
    support2: Vec<usize>,
}

impl CanonicalProjectionPair {
    /// `P_i` selects the first `rank_i` coordinates.
    pub fn new(n: usize, rank1: usize, rank2: usize) -> Result<Self> {
        if rank1 > n || rank2 > n {
            return Err(Error::Invalid(format!("ranks ({rank1}, {rank2}) exceed n = {n}")));
        }
        Ok(Self { n, support1: (0..rank1).collect(), support2: (0..rank2).collect() })
    }

    /// Diagonal projections onto arbitrary coordinate subsets.
    pub fn with_supports(n: usize, support1: Vec<usize>, support2: Vec<usize>) -> Result<Self> {
        for s in [&support1, &support2] {
            let mut sorted = s.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != s.len() || s.iter().any(|&i| i >= n) {
                return Err(Error::Invalid("projection supports must be distinct indices below n".into()));
            }
        }
        Ok(Self { n, support1, support2 })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn rank1(&self) -> usize {
        self.support1.len()
    }

    pub fn rank2(&self) -> usize {
        self.support2.len()
    }

    fn diag(&self, support: &[usize]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for &i in support {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn p1(&self) -> DMatrix<f64> {
        self.diag(&self.support1)
    }

    pub fn p2(&self) -> DMatrix<f64> {
        self.diag(&self.support2)
    }

    /// `(Tr P₁OᵀP₂O, Tr (P₁OᵀP₂O)²)` for one orthogonal matrix.
    pub fn traces(&self, o: &DMatrix<f64>) -> (f64, f64) {
        // G = P₁OᵀP₂OP₁ restricted to support1
        let s1 = &self.support1;
        let r = s1.len();
        let mut g = vec![0.0; r * r];
        for &k in &self.support2 {
            for (a, &i) in s1.iter().enumerate() {
                let oki = o[(k, i)];
                for (b, &j) in s1.iter().enumerate() {
                    g[a * r + b] += oki * o[(k, j)];
                }
            }
        }
        let tr2 = (0..r).map(|a| g[a * r + a]).sum();
        let tr4 = g.iter().map(|v| v * v).sum();
        (tr2, tr4)
    }
}

/// `⟨Tr P₁OᵀP₂O⟩ = a Tr P₁ Tr P₂`.
pub fn exact_avg_trace2(pair: &CanonicalProjectionPair) -> Result<f64> {
    let m = moments(pair.n)?;
    Ok(m.a * pair.rank1() as f64 * pair.rank2() as f64)
}

/// `⟨Tr P₁OᵀP₂OP₁OᵀP₂O⟩`.
pub fn exact_avg_trace4(pair: &CanonicalProjectionPair) -> Result<f64> {
    let m = moments(pair.n)?;
    let (p, q) = (pair.rank1() as f64, pair.rank2() as f64);
    Ok(m.a1 * p * q * (1.0 + p + q) + m.a2 * p * q * (3.0 + p + q + p * q))
}

/// Large-`n` limits `(t₁t₂, t₁²t₂ + t₁t₂² − t₁²t₂²)` of the normalized averages.
pub fn limit_traces(t1: f64, t2: f64) -> (f64, f64) {
    (t1 * t2, t1 * t1 * t2 + t1 * t2 * t2 - t1 * t1 * t2 * t2)
}

/// Monte Carlo means (normalized by `n`) and their standard errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub samples: usize,
    pub mean_t12: f64,
    pub se_t12: f64,
    pub mean_t1212: f64,
    pub se_t1212: f64,
}

#[derive(Debug, Clone, Copy, Default)]
struct Moments2 {
    s2: f64,
    ss2: f64,
    s4: f64,
    ss4: f64,
}

impl Moments2 {
    fn push(&mut self, t2: f64, t4: f64) {
        self.s2 += t2;
        self.ss2 += t2 * t2;
        self.s4 += t4;
        self.ss4 += t4 * t4;
    }

    fn merge(a: Self, b: Self) -> Self {
        Self { s2: a.s2 + b.s2, ss2: a.ss2 + b.ss2, s4: a.s4 + b.s4, ss4: a.ss4 + b.ss4 }
    }

    fn estimate(&self, samples: usize, n: usize) -> McEstimate {
        let m = samples as f64;
        let nf = n as f64;
        let stat = |s: f64, ss: f64| {
            let mean = s / m;
            let var = ((ss - m * mean * mean) / (m - 1.0)).max(0.0);
            (mean / nf, (var / m).sqrt() / nf)
        };
        let (mean_t12, se_t12) = stat(self.s2, self.ss2);
        let (mean_t1212, se_t1212) = stat(self.s4, self.ss4);
        McEstimate { samples, mean_t12, se_t12, mean_t1212, se_t1212 }
    }
}

/// Pairwise reduction in index order, so results do not depend on scheduling.
fn pairwise_sum<T: Copy>(items: &[T], merge: &impl Fn(T, T) -> T) -> T {
    if items.len() == 1 {
        return items[0];
    }
    let mid = items.len() / 2;
    merge(pairwise_sum(&items[..mid], merge), pairwise_sum(&items[mid..], merge))
}

/// Substream `chunk` of the experiment keyed by `seed`.
pub fn substream(seed: u64, chunk: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chunk);
    rng
}

/// Runs `per_sample` over `samples` Haar matrices split into seeded chunks and
/// reduces the per-chunk accumulators in chunk order.
fn haar_fold<A, F>(n: usize, samples: usize, seed: u64, init: impl Fn() -> A + Sync, per_sample: F, merge: impl Fn(A, A) -> A) -> A
where
    A: Copy + Send,
    F: Fn(&mut A, &DMatrix<f64>) + Sync,
{
    let chunks = samples.div_ceil(CHUNK);
    let partials: Vec<A> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = substream(seed, c as u64);
            let count = CHUNK.min(samples - c * CHUNK);
            let mut acc = init();
            for _ in 0..count {
                let o = haar_orthogonal(n, &mut rng);
                per_sample(&mut acc, &o);
            }
            acc
        })
        .collect();
    pairwise_sum(&partials, &merge)
}

pub fn mc_avg_traces(pair: &CanonicalProjectionPair, samples: usize, seed: u64) -> Result<McEstimate> {
    if samples < 2 {
        return Err(Error::Invalid("Monte Carlo needs at least 2 samples".into()));
    }
    let acc = haar_fold(
        pair.n,
        samples,
        seed,
        Moments2::default,
        |acc, o| {
            let (t2, t4) = pair.traces(o);
            acc.push(t2, t4);
        },
        Moments2::merge,
    );
    Ok(acc.estimate(samples, pair.n))
}

/// Estimates for every canonical rank pair `(r₁, r₂) ∈ [0, n]²` from one
/// shared set of Haar samples. Entry `r₁ * (n + 1) + r₂`.
pub fn mc_rank_table(n: usize, samples: usize, seed: u64) -> Result<Vec<McEstimate>> {
    if samples < 2 {
        return Err(Error::Invalid("Monte Carlo needs at least 2 samples".into()));
    }
    if n == 0 || n > 16 {
        return Err(Error::Invalid(format!("rank tables support 1 <= n <= 16, got {n}")));
    }
    const MAX: usize = 17;
    type Table = [[Moments2; MAX]; MAX];
    let table: Table = haar_fold(
        n,
        samples,
        seed,
        || [[Moments2::default(); MAX]; MAX],
        |acc: &mut Table, o| {
            // G(r₂) accumulates rows k < r₂ of O as outer products
            let mut g = [[0.0f64; MAX]; MAX];
            for r2 in 0..=n {
                if r2 > 0 {
                    let k = r2 - 1;
                    for i in 0..n {
                        for j in 0..n {
                            g[i][j] += o[(k, i)] * o[(k, j)];
                        }
                    }
                }
                let mut tr2 = 0.0;
                let mut tr4 = 0.0;
                acc[0][r2].push(0.0, 0.0);
                for r1 in 1..=n {
                    let i = r1 - 1;
                    tr2 += g[i][i];
                    tr4 += g[i][i] * g[i][i] + 2.0 * (0..i).map(|j| g[i][j] * g[i][j]).sum::<f64>();
                    acc[r1][r2].push(tr2, tr4);
                }
            }
        },
        |mut a: Table, b: Table| {
            for i in 0..MAX {
                for j in 0..MAX {
                    a[i][j] = Moments2::merge(a[i][j], b[i][j]);
                }
            }
            a
        },
    );
    let mut out = Vec::with_capacity((n + 1) * (n + 1));
    for row in table.iter().take(n + 1) {
        for cell in row.iter().take(n + 1) {
            out.push(cell.estimate(samples, n));
        }
    }
    Ok(out)
}
