//! Initialization of the trainable weights, the projection deficiency
//! `delta`, and the random-matrix diagnostics behind the initialization
//! lemmas.

use ndarray::prelude::*;
use ndarray_linalg::SVD;
use num_complex::Complex64 as C64;
use rand::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cue::complex_gaussian;
use crate::error::{Error, Result};
use crate::model::{StudentSpec, TeacherSpec};

/// One initialization draw: the normalized weights plus the raw norms the
/// concentration lemmas speak about.
#[derive(Debug, Clone)]
pub struct InitDraw {
    pub w0: Array1<C64>,
    /// `||w||` before normalization.
    pub w_norm: f64,
    /// `||Aw||` before normalization (the normalizer itself).
    pub aw_norm: f64,
}

/// Diagnostics serialized next to the model artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitReport {
    pub r0: f64,
    pub cos_s_theta0: f64,
    pub v0: f64,
    pub delta: f64,
    pub norm_aw_pre_normalization: f64,
    pub sigma1_x: f64,
    pub sigma_n_x: f64,
    pub w_norm: f64,
    /// The Lemma 4.6 reference scale `sigma_- / (sigma_+ sqrt(M))` for the
    /// lower bound on `r0` (order check only).
    pub r0_lower_scale: f64,
}

/// Draws `w ~ CN(0, 1)^M` and returns `w0 = w / ||Aw||`.
pub fn init_weights<R: Rng + ?Sized>(student: &StudentSpec, rng: &mut R) -> Result<InitDraw> {
    for _ in 0..16 {
        let w = Array1::from_iter((0..student.width()).map(|_| complex_gaussian(rng)));
        let w_norm = w.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        let aw_norm = crate::loss::feature_norm_sqr(student, &w).sqrt();
        if aw_norm < 1e-12 {
            continue; // probability-zero degenerate draw
        }
        return Ok(InitDraw {
            w0: w.mapv(|z| z / aw_norm),
            w_norm,
            aw_norm,
        });
    }
    Err(Error::numerical(
        "repeated degenerate draws in weight initialization",
    ))
}

/// `delta = min_w ||Aw - h*||^2 = ||(I - P_A) h*||^2`, clamped to `[0, 1]`.
///
/// The projector is assembled from the left singular vectors of `A`
/// directly (`P_A = U_r U_r^H` over the numerical rank), which stays stable
/// even when `A` has near-degenerate singular values — the
/// `A pinv(A^H A) A^H` route would amplify round-off by `sigma^{-2}` there.
pub fn projection_deficiency(student: &StudentSpec, h_star: &Array1<C64>) -> Result<f64> {
    let mut h_pad: Array1<C64> = Array1::zeros(student.depth());
    for (k, &h) in h_star.iter().enumerate() {
        h_pad[k] = h;
    }
    crate::cue::ensure_blas_single_thread();
    let (u, sigma, _) = student
        .a_matrix()
        .svd(true, false)
        .map_err(|e| Error::numerical(format!("SVD of A failed: {e}")))?;
    let u = u.expect("requested U");
    let sigma_max = sigma.iter().cloned().fold(0.0, f64::max);
    let tol = 1e-12 * sigma_max;
    let mut proj: Array1<C64> = Array1::zeros(student.depth());
    for (i, &s) in sigma.iter().enumerate() {
        if s <= tol {
            continue;
        }
        let col = u.column(i);
        let coeff: C64 = col.iter().zip(h_pad.iter()).map(|(&uk, &hk)| uk.conj() * hk).sum();
        for (k, &uk) in col.iter().enumerate() {
            proj[k] += uk * coeff;
        }
    }
    let residual: f64 = h_pad
        .iter()
        .zip(proj.iter())
        .map(|(&h, &p)| (h - p).norm_sqr())
        .sum();
    Ok(residual.clamp(0.0, 1.0))
}

/// Extreme singular values of the Vandermonde moment matrix `X_{nm} = a_m^n`,
/// `n = 1..N`, plus the number of (numerically) duplicate frozen weights,
/// which would degrade the smallest singular value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VandermondeDiagnostics {
    pub sigma1: f64,
    pub sigma_n: f64,
    pub duplicate_pairs: usize,
}

pub fn vandermonde_diagnostics(
    frozen_weights: &Array1<C64>,
    n_dim: usize,
) -> Result<VandermondeDiagnostics> {
    let m_width = frozen_weights.len();
    if m_width <= n_dim {
        return Err(Error::validation(format!(
            "vandermonde diagnostics need M > N, got M = {m_width}, N = {n_dim}"
        )));
    }
    crate::cue::ensure_blas_single_thread();
    let mut x = Array2::zeros((n_dim, m_width));
    for (m, &am) in frozen_weights.iter().enumerate() {
        let mut p = C64::new(1.0, 0.0);
        for n in 0..n_dim {
            p *= am;
            x[(n, m)] = p;
        }
    }
    let (_, sigma, _) = x
        .svd(false, false)
        .map_err(|e| Error::numerical(format!("SVD of X failed: {e}")))?;
    let sigma1 = sigma.iter().cloned().fold(0.0, f64::max);
    let sigma_n = sigma.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut duplicate_pairs = 0;
    let mut sorted: Vec<f64> = frozen_weights.iter().map(|z| z.arg()).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    for pair in sorted.windows(2) {
        if (pair[1] - pair[0]).abs() < 1e-12 {
            duplicate_pairs += 1;
        }
    }
    Ok(VandermondeDiagnostics {
        sigma1,
        sigma_n,
        duplicate_pairs,
    })
}

/// The full initialization report for one draw.
pub fn init_stats(
    draw: &InitDraw,
    student: &StudentSpec,
    teacher: &TeacherSpec,
    act: &crate::model::ActivationSpec,
    n_dim: usize,
) -> Result<InitReport> {
    let delta = projection_deficiency(student, teacher.h_star())?;
    let summary = crate::dynamics::summary_from_weights(&draw.w0, student, teacher, delta);
    let vdm = vandermonde_diagnostics(student.frozen_weights(), n_dim)?;
    let m_width = student.width() as f64;
    Ok(InitReport {
        r0: summary.r,
        cos_s_theta0: summary.cos_s_theta,
        v0: summary.v,
        delta,
        norm_aw_pre_normalization: draw.aw_norm,
        sigma1_x: vdm.sigma1,
        sigma_n_x: vdm.sigma_n,
        w_norm: draw.w_norm,
        r0_lower_scale: act.sigma_minus / (act.sigma_plus * m_width.sqrt()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        experiment_activation, frozen_weights_uniform, sample_h_star, LinkScale, StudentSpec,
        TeacherSpec,
    };
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn alphas_s3() -> Array1<C64> {
        let a = 1.0 / 3f64.sqrt();
        Array1::from_vec(vec![c(0.0, 0.0), c(0.0, 0.0), c(a, 0.0), c(a, 0.0), c(a, 0.0)])
    }

    fn setup(
        n_dim: usize,
        depth: usize,
        width: usize,
        seed: u64,
    ) -> (crate::model::ActivationSpec, TeacherSpec, StudentSpec) {
        let act = experiment_activation(n_dim, depth).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frozen = frozen_weights_uniform(width, &mut rng);
        let h = sample_h_star(n_dim, &mut rng);
        let teacher = TeacherSpec::new(n_dim, h, alphas_s3()).unwrap();
        let student =
            StudentSpec::build(&act, frozen, depth, &teacher, LinkScale::PaperTheory).unwrap();
        (act, teacher, student)
    }

    #[test]
    fn normalization_and_determinism() {
        let (_, _, student) = setup(25, 30, 12, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let draw = init_weights(&student, &mut rng).unwrap();
        let aw = crate::loss::feature_norm_sqr(&student, &draw.w0).sqrt();
        assert!((aw - 1.0).abs() < 1e-10);
        let mut rng2 = ChaCha8Rng::seed_from_u64(2);
        let draw2 = init_weights(&student, &mut rng2).unwrap();
        assert_eq!(draw.w0, draw2.w0);
        assert_eq!(draw.w_norm, draw2.w_norm);
    }

    #[test]
    fn w_norm_concentrates() {
        // ||w|| for w ~ CN(0,1)^M concentrates at sqrt(M) with O(1) spread.
        let m_width = 10_000usize;
        let sqrt_m = (m_width as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut within = 0;
        let draws = 200;
        for _ in 0..draws {
            let norm: f64 = (0..m_width)
                .map(|_| complex_gaussian(&mut rng).norm_sqr())
                .sum::<f64>()
                .sqrt();
            if (norm - sqrt_m).abs() <= 3.0 {
                within += 1;
            }
        }
        assert!(within * 100 >= draws * 99, "{within}/{draws} within band");
    }

    #[test]
    fn deficiency_zero_for_square_invertible() {
        let (_, teacher, student) = setup(25, 5, 5, 11);
        let d = projection_deficiency(&student, teacher.h_star()).unwrap();
        assert!(d < 1e-10, "delta = {d}");
    }

    #[test]
    fn deficiency_paper_config_small() {
        let (_, teacher, student) = setup(25, 150, 100, 13);
        let d = projection_deficiency(&student, teacher.h_star()).unwrap();
        assert!(d <= 0.001, "delta = {d}");
    }

    #[test]
    fn deficiency_monotone_in_width() {
        // Adding neurons (columns of A) can only enlarge the range, so delta
        // is non-increasing in M at fixed K. (In K it is the other way
        // around: extra rows add constraints to the least-squares problem.)
        let n_dim = 25;
        let depth = 50;
        let act = experiment_activation(n_dim, depth).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let pool = frozen_weights_uniform(150, &mut rng);
        let h = sample_h_star(n_dim, &mut rng);
        let teacher = TeacherSpec::new(n_dim, h, alphas_s3()).unwrap();
        let mut prev = f64::INFINITY;
        for width in [25usize, 50, 100, 150] {
            let frozen = pool.slice(ndarray::s![..width]).to_owned();
            let student =
                StudentSpec::build(&act, frozen, depth, &teacher, LinkScale::PaperTheory).unwrap();
            let d = projection_deficiency(&student, teacher.h_star()).unwrap();
            assert!(d <= prev + 1e-12, "delta increased: {prev} -> {d} at M={width}");
            prev = d;
        }
    }

    #[test]
    fn deficiency_nondecreasing_in_depth() {
        let n_dim = 25;
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let frozen = frozen_weights_uniform(40, &mut rng);
        let h = sample_h_star(n_dim, &mut rng);
        let teacher = TeacherSpec::new(n_dim, h, alphas_s3()).unwrap();
        let mut prev = -1.0;
        for depth in [25usize, 50, 100, 150] {
            let act = experiment_activation(n_dim, depth).unwrap();
            let student =
                StudentSpec::build(&act, frozen.clone(), depth, &teacher, LinkScale::PaperTheory)
                    .unwrap();
            let d = projection_deficiency(&student, teacher.h_star()).unwrap();
            assert!(d >= prev - 1e-12, "delta decreased: {prev} -> {d} at K={depth}");
            prev = d;
        }
    }

    #[test]
    fn deficiency_for_orthogonal_target() {
        // h* outside the range: single-column A spanning only coordinate 1,
        // h* on coordinate 2.
        let n_dim = 25;
        let mut act = experiment_activation(n_dim, 2).unwrap();
        act.coeffs[0] = c(1.0, 0.0);
        act.coeffs[1] = c(0.0, 0.0);
        let mut h: Array1<C64> = Array1::zeros(2);
        h[1] = c(1.0, 0.0);
        let teacher = TeacherSpec::new(n_dim, h.clone(), Array1::from_vec(vec![c(1.0, 0.0)])).unwrap();
        let frozen = Array1::from_vec(vec![c(1.0, 0.0)]);
        let student = StudentSpec::build(&act, frozen, 2, &teacher, LinkScale::PaperTheory).unwrap();
        let d = projection_deficiency(&student, &h).unwrap();
        assert!((d - 1.0).abs() < 1e-12, "delta = {d}");
    }

    #[test]
    fn vandermonde_roots_of_unity_exact() {
        let m_width = 64usize;
        let n_dim = 25;
        let frozen = Array1::from_iter((0..m_width).map(|j| {
            C64::from_polar(1.0, std::f64::consts::TAU * j as f64 / m_width as f64)
        }));
        let vdm = vandermonde_diagnostics(&frozen, n_dim).unwrap();
        let sqrt_m = (m_width as f64).sqrt();
        assert!((vdm.sigma1 - sqrt_m).abs() < 1e-9, "{}", vdm.sigma1);
        assert!((vdm.sigma_n - sqrt_m).abs() < 1e-9, "{}", vdm.sigma_n);
        assert_eq!(vdm.duplicate_pairs, 0);
    }

    #[test]
    fn vandermonde_n1_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let frozen = frozen_weights_uniform(30, &mut rng);
        let vdm = vandermonde_diagnostics(&frozen, 1).unwrap();
        let sqrt_m = 30f64.sqrt();
        assert!((vdm.sigma1 - sqrt_m).abs() < 1e-10);
        assert!((vdm.sigma_n - sqrt_m).abs() < 1e-10);
    }

    #[test]
    fn vandermonde_duplicates_detected() {
        let mut frozen = Array1::from_vec(vec![
            c(1.0, 0.0),
            c(1.0, 0.0),
            c(0.0, 1.0),
            c(0.0, -1.0),
            c(-1.0, 0.0),
        ]);
        frozen[1] = frozen[0];
        let vdm = vandermonde_diagnostics(&frozen, 2).unwrap();
        assert_eq!(vdm.duplicate_pairs, 1);
    }

    #[test]
    fn report_identity_v0() {
        let (act, teacher, student) = setup(25, 50, 40, 23);
        assert!(student.width() > 25);
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        for _ in 0..20 {
            let draw = init_weights(&student, &mut rng).unwrap();
            let rep = init_stats(&draw, &student, &teacher, &act, 25).unwrap();
            assert!(
                (rep.v0 - (1.0 - rep.r0 * rep.r0)).abs() < 1e-8 + rep.delta,
                "v0 = {}, 1 - r0^2 = {}",
                rep.v0,
                1.0 - rep.r0 * rep.r0
            );
            assert!(rep.r0 > 0.0 && rep.r0 <= 1.0);
            assert!(rep.r0_lower_scale > 0.0);
        }
    }

    #[test]
    fn cos_half_frequency_near_third() {
        // P(cos(3 theta0) >= 1/2) = 1/3 for uniform phase.
        let (_, teacher, student) = setup(25, 30, 20, 31);
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let runs = 1500;
        let mut hits = 0;
        for _ in 0..runs {
            let draw = init_weights(&student, &mut rng).unwrap();
            let m = crate::loss::overlap_m(&student, &teacher, &draw.w0);
            if (3.0 * m.arg()).cos() >= 0.5 {
                hits += 1;
            }
        }
        let freq = hits as f64 / runs as f64;
        assert!((0.28..=0.38).contains(&freq), "freq = {freq}");
    }

    #[test]
    fn theta0_uniformity_ks() {
        // s * theta0 mod 2pi is uniform: Kolmogorov-Smirnov against the
        // uniform CDF at the 1% level.
        let (_, teacher, student) = setup(25, 30, 20, 41);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let runs = 10_000;
        let s = 3.0;
        let mut phases: Vec<f64> = (0..runs)
            .map(|_| {
                let draw = init_weights(&student, &mut rng).unwrap();
                let m = crate::loss::overlap_m(&student, &teacher, &draw.w0);
                (s * m.arg()).rem_euclid(std::f64::consts::TAU) / std::f64::consts::TAU
            })
            .collect();
        phases.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = runs as f64;
        let mut ks = 0.0f64;
        for (i, &p) in phases.iter().enumerate() {
            ks = ks
                .max((p - i as f64 / n).abs())
                .max(((i + 1) as f64 / n - p).abs());
        }
        let critical = 1.63 / n.sqrt(); // 1% level
        assert!(ks <= critical, "KS = {ks}, critical = {critical}");
    }

    #[test]
    fn r0_law_invariant_under_global_phase() {
        // Rotating every frozen weight by a fixed phase leaves the law of r0
        // unchanged once h* is drawn from its (rotation-invariant) sphere
        // law; compare means across independent seed sets.
        let n_dim = 25;
        let depth = 30;
        let act = experiment_activation(n_dim, depth).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let frozen = frozen_weights_uniform(20, &mut rng);
        let rot = C64::from_polar(1.0, 0.987);
        let runs = 1000;
        let collect = |frozen: &Array1<C64>, seed: u64| -> (f64, f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut acc = crate::sympoly::MeanAccumulator::default();
            for _ in 0..runs {
                let h = sample_h_star(n_dim, &mut rng);
                let teacher = TeacherSpec::new(n_dim, h, alphas_s3()).unwrap();
                let student = StudentSpec::build(
                    &act,
                    frozen.clone(),
                    depth,
                    &teacher,
                    LinkScale::PaperTheory,
                )
                .unwrap();
                let draw = init_weights(&student, &mut rng).unwrap();
                let m = crate::loss::overlap_m(&student, &teacher, &draw.w0);
                acc.push(c(m.norm(), 0.0));
            }
            let est = acc.estimate();
            (est.estimate.re, est.stderr)
        };
        let rotated = frozen.mapv(|z| z * rot);
        let (mean_a, se_a) = collect(&frozen, 52);
        let (mean_b, se_b) = collect(&rotated, 53);
        let combined = (se_a * se_a + se_b * se_b).sqrt();
        assert!(
            (mean_a - mean_b).abs() <= 4.0 * combined,
            "{mean_a} vs {mean_b} (se {combined})"
        );
    }

    #[test]
    fn report_round_trips_through_json() {
        let (act, teacher, student) = setup(25, 30, 40, 61);
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let draw = init_weights(&student, &mut rng).unwrap();
        let rep = init_stats(&draw, &student, &teacher, &act, 25).unwrap();
        let text = serde_json::to_string(&rep).unwrap();
        let back: InitReport = serde_json::from_str(&text).unwrap();
        assert_eq!(rep, back);
    }
}
