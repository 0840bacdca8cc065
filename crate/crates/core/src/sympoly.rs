//! Normalized powersum polynomials, integer partitions, and inner products
//! under the squared-Vandermonde measure.
//!
//! The measure in question is the joint law of CUE eigenvalues (see
//! [`crate::cue`]). On products of powersums it acts diagonally: for
//! partitions with weight at most the ambient dimension `N`,
//! `<p_lambda, p_mu> = t_lambda * [lambda == mu]`. Everything else in this
//! module is Monte-Carlo machinery for checking that identity and its
//! single-index consequences numerically.

use ndarray::prelude::*;
use num_complex::Complex64 as C64;
use std::collections::BTreeMap;

use crate::cue;
use crate::error::{Error, Result};

/// A non-increasing sequence of positive integers.
///
/// The constructor sorts its input, so two representations of the same
/// multiset of parts compare equal.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Partition {
    parts: Vec<u32>,
}

impl Partition {
    pub fn new(mut parts: Vec<u32>) -> Result<Self> {
        if parts.iter().any(|&p| p == 0) {
            return Err(Error::validation("partition parts must be positive"));
        }
        parts.sort_unstable_by(|a, b| b.cmp(a));
        Ok(Partition { parts })
    }

    pub fn parts(&self) -> &[u32] {
        &self.parts
    }

    /// `|lambda|`, the sum of the parts.
    pub fn weight(&self) -> u64 {
        self.parts.iter().map(|&p| p as u64).sum()
    }

    /// `l(lambda)`, the number of parts.
    pub fn len(&self) -> usize {
        self.parts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parts.is_empty()
    }

    /// Map part value -> number of parts with that value.
    pub fn multiplicities(&self) -> BTreeMap<u32, u32> {
        let mut mult = BTreeMap::new();
        for &p in &self.parts {
            *mult.entry(p).or_insert(0) += 1;
        }
        mult
    }

    /// `t_lambda = prod_i (m_i)!` over the distinct part values.
    pub fn t_constant(&self) -> u64 {
        self.multiplicities()
            .values()
            .map(|&m| factorial(m as u64))
            .product()
    }
}

pub(crate) fn factorial(n: u64) -> u64 {
    (1..=n).product()
}

/// `p_k(x) = (1/sqrt(k)) sum_n x_n^k`.
///
/// `k = 0` is rejected: the constant term is excluded from the feature
/// vector throughout.
pub fn powersum_eval(k: u32, x: &[C64]) -> Result<C64> {
    if k == 0 {
        return Err(Error::validation("powersum index k must be >= 1"));
    }
    if x.is_empty() {
        return Err(Error::validation("powersum input must be non-empty"));
    }
    let sum: C64 = x.iter().map(|&z| z.powu(k)).sum();
    Ok(sum / (k as f64).sqrt())
}

/// The first `K` normalized powersums evaluated at one point, plus the point
/// itself so the values stay recomputable.
#[derive(Debug, Clone)]
pub struct PowersumVector {
    values: Array1<C64>,
    point: Array1<C64>,
}

impl PowersumVector {
    /// Entries `p_1(x) .. p_K(x)`; `values()[k-1]` holds `p_k`.
    pub fn values(&self) -> &Array1<C64> {
        &self.values
    }

    pub fn point(&self) -> &Array1<C64> {
        &self.point
    }

    pub fn depth(&self) -> usize {
        self.values.len()
    }
}

/// Computes `p_1 .. p_K` in `O(NK)` by cumulative per-entry multiplication.
///
/// Summation order is ascending entry index, so the result is reproducible
/// bit-for-bit for a fixed input ordering.
pub fn powersum_vector(x: &[C64], depth: usize) -> Result<PowersumVector> {
    if depth == 0 {
        return Err(Error::validation("powersum depth K must be >= 1"));
    }
    if x.is_empty() {
        return Err(Error::validation("powersum input must be non-empty"));
    }
    let mut values = Array1::zeros(depth);
    let mut powers: Vec<C64> = vec![C64::new(1.0, 0.0); x.len()];
    for k in 1..=depth {
        let mut sum = C64::new(0.0, 0.0);
        for (pw, &xi) in powers.iter_mut().zip(x) {
            *pw *= xi;
            sum += *pw;
        }
        values[k - 1] = sum / (k as f64).sqrt();
    }
    Ok(PowersumVector {
        values,
        point: Array1::from(x.to_vec()),
    })
}

/// `p_lambda(x) = prod_i p_{lambda_i}(x)`.
pub fn powersum_product(lambda: &Partition, x: &[C64]) -> Result<C64> {
    let depth = lambda.parts.first().copied().unwrap_or(1) as usize;
    let pv = powersum_vector(x, depth)?;
    Ok(lambda
        .parts
        .iter()
        .map(|&p| pv.values()[(p - 1) as usize])
        .product())
}

/// Exact Hall inner product `<p_lambda, p_mu>_V` in the regime `|lambda| <= N`.
///
/// Returns `t_lambda` on the diagonal and zero off it. Outside the regime
/// the identity is not guaranteed and the call is rejected.
pub fn hall_inner_product_exact(lambda: &Partition, mu: &Partition, n_dim: usize) -> Result<u64> {
    if lambda.weight() > n_dim as u64 {
        return Err(Error::regime(format!(
            "|lambda| = {} exceeds N = {}; the diagonal identity is only valid for |lambda| <= N",
            lambda.weight(),
            n_dim
        )));
    }
    if lambda == mu {
        Ok(lambda.t_constant())
    } else {
        Ok(0)
    }
}

/// Monte-Carlo estimate of `E[f(x) conj(g(x))]` with its standard error.
#[derive(Debug, Clone, Copy)]
pub struct McEstimate {
    pub estimate: C64,
    /// Standard error of the mean, `sqrt(E|z - mean|^2 / n)`.
    pub stderr: f64,
    pub n_samples: usize,
}

impl McEstimate {
    /// `|estimate - reference| / stderr`, with a zero-variance guard.
    pub fn z_score(&self, reference: C64) -> f64 {
        let dev = (self.estimate - reference).norm();
        if self.stderr == 0.0 {
            if dev == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            dev / self.stderr
        }
    }
}

/// Estimates `<f, g>_V = E_{x~V}[f(x) conj(g(x))]` over `n_samples` CUE draws.
///
/// Deterministic given the seed: sample `i` uses RNG stream `i`, and the
/// reduction runs in ascending sample order.
pub fn mc_inner_product<F, G>(
    f: F,
    g: G,
    n_dim: usize,
    n_samples: usize,
    seed: u64,
) -> Result<McEstimate>
where
    F: Fn(&[C64]) -> C64,
    G: Fn(&[C64]) -> C64,
{
    if n_samples == 0 {
        return Err(Error::validation("n_samples must be >= 1"));
    }
    let mut sum = C64::new(0.0, 0.0);
    let mut sum_sq = 0.0;
    let mut values = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let sample = cue::sample_cue(n_dim, seed, i as u64)?;
        let x = sample.points().as_slice().expect("contiguous");
        let z = f(x) * g(x).conj();
        values.push(z);
        sum += z;
    }
    let mean = sum / n_samples as f64;
    for z in &values {
        sum_sq += (z - mean).norm_sqr();
    }
    let stderr = if n_samples > 1 {
        (sum_sq / (n_samples as f64 - 1.0) / n_samples as f64).sqrt()
    } else {
        0.0
    };
    Ok(McEstimate {
        estimate: mean,
        stderr,
        n_samples,
    })
}

/// Welford accumulator for a complex-valued sample mean and its standard
/// error. Used when many statistics are read off the same sample stream.
#[derive(Debug, Clone, Copy, Default)]
pub struct MeanAccumulator {
    count: usize,
    mean: C64,
    m2: f64,
}

impl MeanAccumulator {
    pub fn push(&mut self, z: C64) {
        self.count += 1;
        let delta = z - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += (delta * (z - self.mean).conj()).re;
    }

    pub fn estimate(&self) -> McEstimate {
        let stderr = if self.count > 1 {
            (self.m2 / (self.count as f64 - 1.0) / self.count as f64).sqrt()
        } else {
            0.0
        };
        McEstimate {
            estimate: self.mean,
            stderr,
            n_samples: self.count,
        }
    }
}

/// One `(k, l)` entry of an orthogonality scan.
#[derive(Debug, Clone, Copy)]
pub struct PairCheck {
    pub k: u32,
    pub l: u32,
    pub estimate: McEstimate,
    pub exact: C64,
    pub z_score: f64,
}

/// Estimates `<p_k, p_l>_V` for every pair `k, l <= k_max` from a single
/// stream of `n_samples` CUE draws, against the exact diagonal oracle.
///
/// Requires `k_max <= N` so the exact identity applies to every pair.
pub fn orthogonality_scan(
    n_dim: usize,
    k_max: u32,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<PairCheck>> {
    if k_max == 0 || n_samples == 0 {
        return Err(Error::validation("k_max and n_samples must be >= 1"));
    }
    if k_max as usize > n_dim {
        return Err(Error::regime(format!(
            "k_max = {k_max} exceeds N = {n_dim}; single-part Hall identity requires k <= N"
        )));
    }
    let pairs: Vec<(u32, u32)> = (1..=k_max)
        .flat_map(|k| (k..=k_max).map(move |l| (k, l)))
        .collect();
    let mut accs = vec![MeanAccumulator::default(); pairs.len()];
    for i in 0..n_samples {
        let sample = cue::sample_cue(n_dim, seed, i as u64)?;
        let pv = powersum_vector(sample.points().as_slice().expect("contiguous"), k_max as usize)?;
        for (acc, &(k, l)) in accs.iter_mut().zip(&pairs) {
            let z = pv.values()[(k - 1) as usize] * pv.values()[(l - 1) as usize].conj();
            acc.push(z);
        }
    }
    Ok(pairs
        .iter()
        .zip(&accs)
        .map(|(&(k, l), acc)| {
            let lam = Partition::new(vec![k]).expect("positive part");
            let mu = Partition::new(vec![l]).expect("positive part");
            let exact =
                C64::new(hall_inner_product_exact(&lam, &mu, n_dim).expect("regime checked") as f64, 0.0);
            let estimate = acc.estimate();
            PairCheck {
                k,
                l,
                estimate,
                exact,
                z_score: estimate.z_score(exact),
            }
        })
        .collect())
}

/// Outcome of one Monte-Carlo check of the semigroup identity
/// `< <h,p>^k, <h_tilde,p>^l >_V = delta_{kl} k! <h, h_tilde>^k`.
#[derive(Debug, Clone, Copy)]
pub struct SemigroupCheck {
    pub lhs: McEstimate,
    pub rhs: C64,
    pub z_score: f64,
}

/// Runs the Monte-Carlo side of the semigroup identity against the closed
/// form.
///
/// `h` must be supported on indices `1..floor(sqrt(N))` and `k` must not
/// exceed `floor(sqrt(N))`; `h_tilde` is unrestricted (finite support). The
/// feature pairing `<h, p(x)>` does not conjugate; the coefficient pairing
/// `<h, h_tilde>` conjugates its second argument.
pub fn semigroup_identity_check(
    h: &[C64],
    h_tilde: &[C64],
    k: u32,
    l: u32,
    n_dim: usize,
    n_samples: usize,
    seed: u64,
) -> Result<SemigroupCheck> {
    let sqrt_n = (n_dim as f64).sqrt().floor() as usize;
    if k == 0 || l == 0 {
        return Err(Error::validation("exponents k, l must be >= 1"));
    }
    if k as usize > sqrt_n {
        return Err(Error::regime(format!(
            "exponent k = {k} exceeds floor(sqrt(N)) = {sqrt_n}"
        )));
    }
    if h.iter().skip(sqrt_n).any(|z| z.norm() > 1e-14) {
        return Err(Error::regime(format!(
            "h must be supported on the first floor(sqrt(N)) = {sqrt_n} indices"
        )));
    }
    let depth = h.len().max(h_tilde.len());
    let feature = |coeffs: &[C64], pv: &PowersumVector| -> C64 {
        coeffs
            .iter()
            .enumerate()
            .map(|(i, &c)| c * pv.values()[i])
            .sum()
    };
    let h_owned = h.to_vec();
    let ht_owned = h_tilde.to_vec();
    let lhs = mc_inner_product(
        |x| {
            let pv = powersum_vector(x, depth).expect("valid point");
            feature(&h_owned, &pv).powu(k)
        },
        |x| {
            let pv = powersum_vector(x, depth).expect("valid point");
            feature(&ht_owned, &pv).powu(l)
        },
        n_dim,
        n_samples,
        seed,
    )?;
    let rhs = if k == l {
        let ip: C64 = h
            .iter()
            .zip(h_tilde.iter().chain(std::iter::repeat(&C64::new(0.0, 0.0))))
            .map(|(a, b)| a * b.conj())
            .sum();
        ip.powu(k) * factorial(k as u64) as f64
    } else {
        C64::new(0.0, 0.0)
    };
    let z_score = lhs.z_score(rhs);
    Ok(SemigroupCheck { lhs, rhs, z_score })
}

/// Checks the semigroup identity for several exponent pairs against a single
/// shared stream of `n_samples` CUE draws.
///
/// Same preconditions per pair as [`semigroup_identity_check`]; the shared
/// stream keeps large sweeps affordable since the dominant cost is sampling.
pub fn semigroup_scan(
    h: &[C64],
    h_tilde: &[C64],
    pairs: &[(u32, u32)],
    n_dim: usize,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<SemigroupCheck>> {
    let sqrt_n = (n_dim as f64).sqrt().floor() as usize;
    if n_samples == 0 || pairs.is_empty() {
        return Err(Error::validation("need n_samples >= 1 and at least one exponent pair"));
    }
    for &(k, l) in pairs {
        if k == 0 || l == 0 {
            return Err(Error::validation("exponents k, l must be >= 1"));
        }
        if k as usize > sqrt_n {
            return Err(Error::regime(format!(
                "exponent k = {k} exceeds floor(sqrt(N)) = {sqrt_n}"
            )));
        }
    }
    if h.iter().skip(sqrt_n).any(|z| z.norm() > 1e-14) {
        return Err(Error::regime(format!(
            "h must be supported on the first floor(sqrt(N)) = {sqrt_n} indices"
        )));
    }
    let depth = h.len().max(h_tilde.len());
    let mut accs = vec![MeanAccumulator::default(); pairs.len()];
    for i in 0..n_samples {
        let sample = cue::sample_cue(n_dim, seed, i as u64)?;
        let pv = powersum_vector(sample.points().as_slice().expect("contiguous"), depth)?;
        let zh: C64 = h.iter().enumerate().map(|(j, &c)| c * pv.values()[j]).sum();
        let zt: C64 = h_tilde
            .iter()
            .enumerate()
            .map(|(j, &c)| c * pv.values()[j])
            .sum();
        for (acc, &(k, l)) in accs.iter_mut().zip(pairs) {
            acc.push(zh.powu(k) * zt.powu(l).conj());
        }
    }
    let ip: C64 = h
        .iter()
        .zip(h_tilde.iter().chain(std::iter::repeat(&C64::new(0.0, 0.0))))
        .map(|(a, b)| a * b.conj())
        .sum();
    Ok(pairs
        .iter()
        .zip(&accs)
        .map(|(&(k, l), acc)| {
            let rhs = if k == l {
                ip.powu(k) * factorial(k as u64) as f64
            } else {
                C64::new(0.0, 0.0)
            };
            let lhs = acc.estimate();
            SemigroupCheck {
                lhs,
                rhs,
                z_score: lhs.z_score(rhs),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn powersum_identity_powers() {
        let x = [c(1.0, 0.0), c(1.0, 0.0), c(1.0, 0.0)];
        let v = powersum_eval(1, &x).unwrap();
        assert!((v - c(3.0, 0.0)).norm() < 1e-14);
    }

    #[test]
    fn powersum_symmetry_cancellation() {
        // Squares of the 4th roots of unity pair up as {1, -1, 1, -1}.
        let x = [c(1.0, 0.0), c(0.0, 1.0), c(-1.0, 0.0), c(0.0, -1.0)];
        let v = powersum_eval(2, &x).unwrap();
        assert!(v.norm() < 1e-14);
    }

    #[test]
    fn powersum_roots_of_unity_cancel() {
        let x: Vec<C64> = (0..6)
            .map(|j| C64::from_polar(1.0, 2.0 * std::f64::consts::PI * j as f64 / 6.0))
            .collect();
        let v = powersum_eval(3, &x).unwrap();
        assert!(v.norm() < 1e-13, "got {v}");
    }

    #[test]
    fn powersum_rejects_k_zero() {
        assert!(powersum_eval(0, &[c(1.0, 0.0)]).is_err());
    }

    #[test]
    fn powersum_vector_single_point() {
        let pv = powersum_vector(&[c(1.0, 0.0)], 3).unwrap();
        let expected = [1.0, 1.0 / 2f64.sqrt(), 1.0 / 3f64.sqrt()];
        for (k, &e) in expected.iter().enumerate() {
            assert!((pv.values()[k] - c(e, 0.0)).norm() < 1e-15);
        }
    }

    #[test]
    fn powersum_vector_conjugate_pair() {
        // i^2 + (-i)^2 = -2, normalized by sqrt(2)
        let pv = powersum_vector(&[c(0.0, 1.0), c(0.0, -1.0)], 2).unwrap();
        assert!(pv.values()[0].norm() < 1e-15);
        assert!((pv.values()[1] - c(-2.0 / 2f64.sqrt(), 0.0)).norm() < 1e-15);
    }

    #[test]
    fn powersum_vector_matches_eval() {
        let x: Vec<C64> = (0..7)
            .map(|j| C64::from_polar(1.0, 0.37 + 1.1 * j as f64))
            .collect();
        let pv = powersum_vector(&x, 10).unwrap();
        for k in 1..=10u32 {
            let direct = powersum_eval(k, &x).unwrap();
            assert!((pv.values()[(k - 1) as usize] - direct).norm() < 1e-12);
        }
    }

    #[test]
    fn unit_circle_bound() {
        let x: Vec<C64> = (0..9)
            .map(|j| C64::from_polar(1.0, 0.2 + 0.61 * j as f64))
            .collect();
        let pv = powersum_vector(&x, 12).unwrap();
        for k in 1..=12usize {
            assert!(pv.values()[k - 1].norm() <= x.len() as f64 / (k as f64).sqrt() + 1e-12);
        }
    }

    #[test]
    fn t_constant_examples() {
        assert_eq!(Partition::new(vec![1]).unwrap().t_constant(), 1);
        assert_eq!(Partition::new(vec![2, 1, 1]).unwrap().t_constant(), 2);
        assert_eq!(Partition::new(vec![3, 3, 3]).unwrap().t_constant(), 6);
    }

    #[test]
    fn partition_representation_invariance() {
        let a = Partition::new(vec![1, 2, 1]).unwrap();
        let b = Partition::new(vec![2, 1, 1]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.t_constant(), b.t_constant());
        assert_eq!(a.weight(), 4);
        assert_eq!(a.len(), 3);
    }

    #[test]
    fn partition_rejects_zero_part() {
        assert!(Partition::new(vec![2, 0]).is_err());
    }

    #[test]
    fn hall_exact_values() {
        let p2 = Partition::new(vec![2]).unwrap();
        let p11 = Partition::new(vec![1, 1]).unwrap();
        assert_eq!(hall_inner_product_exact(&p2, &p2, 10).unwrap(), 1);
        assert_eq!(hall_inner_product_exact(&p11, &p2, 10).unwrap(), 0);
        assert_eq!(hall_inner_product_exact(&p11, &p11, 10).unwrap(), 2);
    }

    #[test]
    fn hall_rejects_regime_violation() {
        let big = Partition::new(vec![7, 6]).unwrap();
        assert!(matches!(
            hall_inner_product_exact(&big, &big, 10),
            Err(Error::Regime(_))
        ));
    }

    #[test]
    fn mc_constant_functions() {
        let one = |_: &[C64]| C64::new(1.0, 0.0);
        let est = mc_inner_product(one, one, 4, 10, 3).unwrap();
        assert_eq!(est.estimate, C64::new(1.0, 0.0));
        assert_eq!(est.stderr, 0.0);
    }

    #[test]
    fn mc_matches_hall_diagonal() {
        // <p_2, p_2> = 1 at N=10; moderate sample count for a unit test.
        let f = |x: &[C64]| powersum_eval(2, x).unwrap();
        let est = mc_inner_product(f, f, 10, 4000, 11).unwrap();
        assert!(
            est.z_score(C64::new(1.0, 0.0)) <= 4.0,
            "estimate {} stderr {}",
            est.estimate,
            est.stderr
        );
    }

    #[test]
    fn mc_matches_hall_off_diagonal() {
        let f = |x: &[C64]| powersum_eval(1, x).unwrap();
        let g = |x: &[C64]| powersum_eval(3, x).unwrap();
        let est = mc_inner_product(f, g, 10, 4000, 12).unwrap();
        assert!(est.z_score(C64::new(0.0, 0.0)) <= 4.0);
    }

    #[test]
    fn semigroup_unit_vectors() {
        let e1 = [c(1.0, 0.0)];
        let chk = semigroup_identity_check(&e1, &e1, 1, 1, 9, 2000, 5).unwrap();
        assert!((chk.rhs - c(1.0, 0.0)).norm() < 1e-14);
        assert!(chk.z_score <= 4.0, "z = {}", chk.z_score);
    }

    #[test]
    fn semigroup_cross_exponent_rhs_zero() {
        let e2 = [c(0.0, 0.0), c(1.0, 0.0)];
        let chk = semigroup_identity_check(&e2, &e2, 2, 3, 25, 2000, 6).unwrap();
        assert_eq!(chk.rhs, c(0.0, 0.0));
        assert!(chk.z_score <= 4.0, "z = {}", chk.z_score);
    }

    #[test]
    fn semigroup_rejects_support_violation() {
        // h touching index 4 at N=9 (floor sqrt = 3) is out of regime.
        let h = [c(0.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(1.0, 0.0)];
        assert!(matches!(
            semigroup_identity_check(&h, &h, 1, 1, 9, 10, 0),
            Err(Error::Regime(_))
        ));
    }

    #[test]
    fn semigroup_rejects_large_exponent() {
        let h = [c(1.0, 0.0)];
        assert!(semigroup_identity_check(&h, &h, 4, 4, 9, 10, 0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn permutation_invariance(perm_seed in 0u64..1000, k in 1usize..8) {
            use rand::prelude::*;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(perm_seed);
            let mut x: Vec<C64> = (0..6)
                .map(|_| C64::from_polar(1.0, rng.gen::<f64>() * std::f64::consts::TAU))
                .collect();
            let pv = powersum_vector(&x, k).unwrap();
            x.shuffle(&mut rng);
            let pv2 = powersum_vector(&x, k).unwrap();
            for i in 0..k {
                prop_assert!((pv.values()[i] - pv2.values()[i]).norm() < 1e-12);
            }
        }

        #[test]
        fn t_constant_representation_invariant(mut parts in proptest::collection::vec(1u32..6, 1..6)) {
            let a = Partition::new(parts.clone()).unwrap();
            parts.reverse();
            let b = Partition::new(parts).unwrap();
            prop_assert_eq!(a.t_constant(), b.t_constant());
        }
    }
}
