//! Design boxes, seeded random streams and quasi-uniform candidate sets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::linalg::Matrix;

/// Axis-aligned box `[lo_i, hi_i]` in design space.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignBox {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl DesignBox {
    /// Panics unless `lo` and `hi` have equal length and `lo_i < hi_i`.
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        assert_eq!(lo.len(), hi.len(), "box bounds differ in dimension");
        assert!(
            lo.iter().zip(&hi).all(|(l, h)| l < h && l.is_finite() && h.is_finite()),
            "box bounds must be finite with lo < hi"
        );
        DesignBox { lo, hi }
    }

    /// `[lo, hi]^dim`.
    pub fn cube(dim: usize, lo: f64, hi: f64) -> Self {
        DesignBox::new(vec![lo; dim], vec![hi; dim])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    pub fn width(&self, i: usize) -> f64 {
        self.hi[i] - self.lo[i]
    }

    pub fn mean_width(&self) -> f64 {
        (0..self.dim()).map(|i| self.width(i)).sum::<f64>() / self.dim() as f64
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(v, (l, h))| *v >= *l && *v <= *h)
    }

    pub fn clamp(&self, x: &mut [f64]) {
        for (v, (l, h)) in x.iter_mut().zip(self.lo.iter().zip(&self.hi)) {
            *v = v.clamp(*l, *h);
        }
    }

    /// Maps a point of the unit cube into the box.
    pub fn from_unit(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .enumerate()
            .map(|(i, v)| self.lo[i] + v * self.width(i))
            .collect()
    }

    pub fn sample(&self, rng: &mut RngStream) -> Vec<f64> {
        (0..self.dim())
            .map(|i| rng.uniform_in(self.lo[i], self.hi[i]))
            .collect()
    }

    /// `n` Halton points scaled into the box, one per row.
    pub fn quasi_uniform(&self, n: usize) -> Matrix {
        let mut m = Matrix::zeros(0, self.dim());
        for u in halton(n, self.dim()) {
            m.push_row(&self.from_unit(&u));
        }
        m
    }

    /// Regular grid with `per_axis` nodes along every axis, first axis fastest.
    pub fn grid(&self, per_axis: usize) -> Matrix {
        assert!(per_axis >= 2, "grid needs at least two nodes per axis");
        let d = self.dim();
        let total = per_axis.pow(d as u32);
        let mut m = Matrix::zeros(0, d);
        let mut point = vec![0.0; d];
        for flat in 0..total {
            let mut rem = flat;
            for (i, p) in point.iter_mut().enumerate() {
                let k = rem % per_axis;
                rem /= per_axis;
                *p = self.lo[i] + self.width(i) * k as f64 / (per_axis - 1) as f64;
            }
            m.push_row(&point);
        }
        m
    }
}

const PRIMES: [u64; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut out = 0.0;
    while i > 0 {
        out += (i % base) as f64 * f;
        i /= base;
        f *= inv;
    }
    out
}

/// First `n` points of the Halton sequence (index starting at 1) in `[0,1)^dim`.
pub fn halton(n: usize, dim: usize) -> Vec<Vec<f64>> {
    assert!(dim <= PRIMES.len(), "halton supports up to {} dimensions", PRIMES.len());
    (1..=n as u64)
        .map(|i| (0..dim).map(|k| radical_inverse(i, PRIMES[k])).collect())
        .collect()
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A seeded ChaCha8 stream that can be split into independent child streams.
///
/// `derive(tag, index)` hashes `(seed, tag, index)` with splitmix64 into a
/// fresh seed, so child streams depend only on their path from the root and
/// never on how much of the parent has been consumed.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn derive(&self, tag: u64, index: u64) -> RngStream {
        let s = splitmix64(self.seed ^ splitmix64(tag.wrapping_mul(0xa076_1d64_78bd_642f)))
            ^ splitmix64(index.wrapping_add(0x2545_f491_4f6c_dd1d));
        RngStream::new(splitmix64(s))
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// `n` stratified standard normals: one uniform draw inside each of `n`
    /// equal-probability strata, mapped through the normal quantile. Each
    /// value is marginally standard normal and averages over the set have
    /// far lower variance than with independent draws.
    pub fn stratified_normals(&mut self, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| {
                let u = ((i as f64 + self.uniform()) / n as f64).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON);
                -std::f64::consts::SQRT_2 * statrs::function::erf::erfc_inv(2.0 * u)
            })
            .collect()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }
}
