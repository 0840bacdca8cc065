//! Seeded sampling from the squared-Vandermonde density on the N-torus,
//! realized as eigenvalues of a Haar-distributed unitary matrix.
//!
//! The construction is exact: draw an `N x N` matrix of independent standard
//! complex Gaussians, take a QR factorization, fix the gauge by normalizing
//! the phases of the triangular factor's diagonal (without this step the QR
//! orthonormal factor is *not* Haar), and return the eigenvalues of the
//! corrected unitary, re-projected onto the unit circle.
//!
//! Reproducibility: all batch sampling derives per-sample RNGs from a single
//! seed via ChaCha8 stream selection — sample `i` of seed `s` uses
//! `ChaCha8Rng::seed_from_u64(s)` with `set_stream(i)`. Batches are therefore
//! order-stable and identical across platforms.

use ndarray::prelude::*;
use ndarray_linalg::{Eig, QR};
use num_complex::Complex64 as C64;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::io::Write;
use std::sync::Once;

use crate::error::{Error, Result};

/// OpenBLAS spawns a spinning thread pool by default, which is pure overhead
/// for the many tiny factorizations done here. Pin it to one thread once per
/// process.
pub(crate) fn ensure_blas_single_thread() {
    static ONCE: Once = Once::new();
    ONCE.call_once(|| unsafe {
        openblas_set_num_threads(1);
    });
}

extern "C" {
    fn openblas_set_num_threads(n: i32);
}

/// Record of how a sample's RNG was derived, for replay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SeedPath {
    pub seed: u64,
    pub stream: u64,
    /// Number of degenerate Gaussian draws that were rejected before this
    /// sample was produced (practically always zero).
    pub retries: u32,
}

/// One draw of CUE eigenvalues: `N` points on the unit circle.
#[derive(Debug, Clone)]
pub struct SpectrumSample {
    points: Array1<C64>,
    seed_path: SeedPath,
}

impl SpectrumSample {
    pub fn points(&self) -> &Array1<C64> {
        &self.points
    }

    pub fn seed_path(&self) -> SeedPath {
        self.seed_path
    }
}

/// Draws standard complex Gaussian entries (real and imaginary parts
/// independent `N(0, 1/2)`, so `E|z|^2 = 1`).
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R) -> C64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    C64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

fn haar_eigenvalues<R: Rng + ?Sized>(n_dim: usize, rng: &mut R) -> Result<(Array1<C64>, u32)> {
    ensure_blas_single_thread();
    let mut retries = 0u32;
    loop {
        let gauss = Array2::from_shape_fn((n_dim, n_dim), |_| complex_gaussian(rng));
        let (q, r) = gauss
            .qr()
            .map_err(|e| Error::numerical(format!("QR factorization failed: {e}")))?;
        // Rank check on the triangular diagonal; a numerically rank-deficient
        // Gaussian draw is a measure-zero event but must not poison the gauge
        // correction below.
        let max_diag = (0..n_dim).map(|j| r[(j, j)].norm()).fold(0.0, f64::max);
        if (0..n_dim).any(|j| r[(j, j)].norm() < 1e-12 * max_diag.max(1e-300)) {
            retries += 1;
            if retries > 16 {
                return Err(Error::numerical(
                    "repeated rank-deficient Gaussian draws in CUE sampler",
                ));
            }
            continue;
        }
        // Gauge fix: multiply column j of Q by phase(R_jj) so the unitary
        // factor is Haar-distributed.
        let mut q = q;
        for j in 0..n_dim {
            let phase = r[(j, j)] / r[(j, j)].norm();
            for i in 0..n_dim {
                q[(i, j)] *= phase;
            }
        }
        let (eigvals, _) = q
            .eig()
            .map_err(|e| Error::numerical(format!("eigendecomposition failed: {e}")))?;
        // Kill the O(1e-14) modulus drift; downstream powers amplify it as
        // |x|^k.
        let points = eigvals.mapv(|z| z / z.norm());
        return Ok((points, retries));
    }
}

/// One CUE draw at dimension `N` from `(seed, stream)`.
pub fn sample_cue(n_dim: usize, seed: u64, stream: u64) -> Result<SpectrumSample> {
    if n_dim == 0 {
        return Err(Error::validation("dimension N must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let (points, retries) = haar_eigenvalues(n_dim, &mut rng)?;
    Ok(SpectrumSample {
        points,
        seed_path: SeedPath {
            seed,
            stream,
            retries,
        },
    })
}

/// A deterministic, order-stable batch of independent CUE draws.
pub fn sample_batch(n_dim: usize, count: usize, seed: u64) -> Result<Vec<SpectrumSample>> {
    if count == 0 {
        return Err(Error::validation("batch count must be >= 1"));
    }
    (0..count)
        .map(|i| sample_cue(n_dim, seed, i as u64))
        .collect()
}

/// Writes a batch as CSV: one row per sample, columns
/// `re_1, im_1, ..., re_N, im_N`, header included.
pub fn write_samples_csv<W: Write>(mut out: W, samples: &[SpectrumSample]) -> Result<()> {
    let n_dim = samples.first().map(|s| s.points.len()).unwrap_or(0);
    let header: Vec<String> = (1..=n_dim)
        .flat_map(|i| [format!("re_{i}"), format!("im_{i}")])
        .collect();
    writeln!(out, "{}", header.join(","))?;
    for s in samples {
        let row: Vec<String> = s
            .points
            .iter()
            .flat_map(|z| [format!("{}", z.re), format!("{}", z.im)])
            .collect();
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}
