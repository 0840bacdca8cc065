//! Correlational losses, their Wirtinger gradients, and the feature-space
//! preconditioner.
//!
//! Gradient convention: every gradient returned here is the real-vector
//! gradient packaged as a complex vector, `grad = d/dw_R + i d/dw_C`, which
//! equals twice the conjugate Wirtinger derivative `2 dL/d(conj w)`. A real
//! descent step is then simply `w -= eta * grad`.
//!
//! The overlap is `m = <Aw, h*> = sum_k (Aw)_k conj(h*_k)`; the population
//! losses depend on `w` only through `m` and `||Aw||`.

use ndarray::prelude::*;
use ndarray_linalg::SVD;
use num_complex::Complex64 as C64;

use crate::error::{Error, Result};
use crate::model::{floor_sqrt, StudentSpec, TeacherSpec};
use crate::sympoly::powersum_vector;

/// A loss split into its correlation and regularization parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub correlation: f64,
    pub regularizer: f64,
}

impl LossValue {
    fn new(correlation: f64, regularizer: f64) -> Self {
        LossValue {
            total: correlation + regularizer,
            correlation,
            regularizer,
        }
    }
}

/// `m = <Aw, h*>`, with `h*` zero-padded to the feature depth `K`.
pub fn overlap_m(student: &StudentSpec, teacher: &TeacherSpec, w: &Array1<C64>) -> C64 {
    let aw = student.feature_coeffs(w);
    teacher
        .h_star()
        .iter()
        .zip(aw.iter())
        .map(|(&h, &c)| c * h.conj())
        .sum()
}

/// `||Aw||^2`.
pub fn feature_norm_sqr(student: &StudentSpec, w: &Array1<C64>) -> f64 {
    student
        .feature_coeffs(w)
        .iter()
        .map(|z| z.norm_sqr())
        .sum()
}

/// Population loss `L = -|alpha_s| Re(m^s) + (|alpha_s|/2) ||Aw||^{2s}`.
pub fn population_loss_l(
    student: &StudentSpec,
    teacher: &TeacherSpec,
    w: &Array1<C64>,
) -> LossValue {
    let s = student.info_exponent() as u32;
    let alpha = teacher.alpha_s().norm();
    let m = overlap_m(student, teacher, w);
    let q = feature_norm_sqr(student, w);
    LossValue::new(-alpha * m.powu(s).re, alpha / 2.0 * q.powi(s as i32))
}

/// Population loss
/// `Lhat = sum_j |alpha_j|^2 (-Re(m^j) + ||Aw||^{2j} / 2)`.
pub fn population_loss_lhat(
    student: &StudentSpec,
    teacher: &TeacherSpec,
    w: &Array1<C64>,
) -> LossValue {
    let m = overlap_m(student, teacher, w);
    let q = feature_norm_sqr(student, w);
    let mut corr = 0.0;
    let mut reg = 0.0;
    for (j, &a) in teacher.alphas().iter().enumerate() {
        let deg = (j + 1) as u32;
        let a2 = a.norm_sqr();
        corr -= a2 * m.powu(deg).re;
        reg += a2 / 2.0 * q.powi(deg as i32);
    }
    LossValue::new(corr, reg)
}

/// `Lhat` as a function of the summary statistics alone:
/// `m = r e^{i theta}`, `||Aw||^2 = v + r^2`.
pub fn lhat_summary(r: f64, theta: f64, v: f64, alphas: &[C64]) -> f64 {
    let q = v + r * r;
    alphas
        .iter()
        .enumerate()
        .map(|(j, a)| {
            let deg = (j + 1) as i32;
            a.norm_sqr() * (-r.powi(deg) * (deg as f64 * theta).cos() + q.powi(deg) / 2.0)
        })
        .sum()
}

fn grad_common(
    student: &StudentSpec,
    teacher: &TeacherSpec,
    w: &Array1<C64>,
) -> (C64, f64, Array1<C64>, Array1<C64>) {
    let aw = student.feature_coeffs(w);
    let m: C64 = teacher
        .h_star()
        .iter()
        .zip(aw.iter())
        .map(|(&h, &c)| c * h.conj())
        .sum();
    let q: f64 = aw.iter().map(|z| z.norm_sqr()).sum();
    // A^H h* (h* zero-padded) and A^H A w.
    let a = student.a_matrix();
    let mut h_pad: Array1<C64> = Array1::zeros(student.depth());
    for (k, &h) in teacher.h_star().iter().enumerate() {
        h_pad[k] = h;
    }
    let ah_h = a.t().mapv(|z| z.conj()).dot(&h_pad);
    let ah_aw = a.t().mapv(|z| z.conj()).dot(&aw);
    (m, q, ah_h, ah_aw)
}

/// Wirtinger gradient of the population loss `L`:
/// `grad = -s |alpha_s| conj(m)^{s-1} A^H h* + s |alpha_s| ||Aw||^{2(s-1)} A^H A w`.
pub fn population_grad_l(
    student: &StudentSpec,
    teacher: &TeacherSpec,
    w: &Array1<C64>,
) -> Array1<C64> {
    let s = student.info_exponent() as u32;
    let alpha = teacher.alpha_s().norm();
    let (m, q, ah_h, ah_aw) = grad_common(student, teacher, w);
    let sf = s as f64;
    let c_corr = -sf * alpha * m.conj().powu(s - 1);
    let c_reg = sf * alpha * q.powi(s as i32 - 1);
    ah_h.mapv(|z| z * c_corr) + ah_aw.mapv(|z| z * c_reg)
}

/// Wirtinger gradient of the population loss `Lhat`.
pub fn population_grad_lhat(
    student: &StudentSpec,
    teacher: &TeacherSpec,
    w: &Array1<C64>,
) -> Array1<C64> {
    let (m, q, ah_h, ah_aw) = grad_common(student, teacher, w);
    let mut c_corr = C64::new(0.0, 0.0);
    let mut c_reg = 0.0;
    for (j, &a) in teacher.alphas().iter().enumerate() {
        let deg = (j + 1) as u32;
        let a2 = a.norm_sqr();
        c_corr -= a2 * deg as f64 * m.conj().powu(deg - 1);
        c_reg += a2 * deg as f64 * q.powi(deg as i32 - 1);
    }
    ah_h.mapv(|z| z * c_corr) + ah_aw.mapv(|z| z * c_reg)
}

/// A fixed dataset in feature form: the design matrix
/// `Phi[x, m] = phi_m(x) = (A^T p(x))_m`, its conjugate transpose (kept as a
/// separate contiguous copy so both gemv directions hit BLAS), and the
/// teacher targets `F(x)`.
#[derive(Debug, Clone)]
pub struct Batch {
    phi: Array2<C64>,
    phi_conj_t: Array2<C64>,
    targets: Array1<C64>,
}

impl Batch {
    /// Evaluates the feature map and teacher targets on a list of spectra.
    pub fn generate(
        student: &StudentSpec,
        teacher: &TeacherSpec,
        samples: &[crate::cue::SpectrumSample],
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::validation("batch must contain at least one sample"));
        }
        let n = samples.len();
        let depth = student.depth();
        let mut p_mat = Array2::zeros((n, depth));
        let mut targets = Array1::zeros(n);
        for (i, s) in samples.iter().enumerate() {
            let xs = s.points().as_slice().expect("contiguous");
            let pv = powersum_vector(xs, depth)?;
            p_mat.row_mut(i).assign(&Array1::from_vec(pv.values().to_vec()));
            targets[i] = crate::model::teacher_eval(teacher, xs)?;
        }
        crate::cue::ensure_blas_single_thread();
        let phi = p_mat.dot(student.a_matrix());
        let phi_conj_t = phi.t().mapv(|z| z.conj()).as_standard_layout().to_owned();
        Ok(Batch {
            phi,
            phi_conj_t,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn phi(&self) -> &Array2<C64> {
        &self.phi
    }

    pub fn targets(&self) -> &Array1<C64> {
        &self.targets
    }

    /// `y = Phi w`.
    pub fn preactivations(&self, w: &Array1<C64>) -> Array1<C64> {
        self.phi.dot(w)
    }

    /// `conj(Phi)^T u`, the backward direction of the design matrix.
    pub fn backward(&self, u: &Array1<C64>) -> Array1<C64> {
        self.phi_conj_t.dot(u)
    }
}

/// Empirical loss for `L`: batch mean of `-Re[F(x) conj(g(y_x))]` plus the
/// *analytic* regularizer `(|alpha_s|/2) ||Aw||^{2s}` (its population value
/// is exact, so it is not estimated).
pub fn empirical_loss_l(
    student: &StudentSpec,
    teacher: &TeacherSpec,
    batch: &Batch,
    w: &Array1<C64>,
) -> LossValue {
    let s = student.info_exponent() as i32;
    let alpha = teacher.alpha_s().norm();
    let y = batch.preactivations(w);
    let corr = -batch
        .targets()
        .iter()
        .zip(y.iter())
        .map(|(&f, &yx)| (f * student.link(yx).conj()).re)
        .sum::<f64>()
        / batch.len() as f64;
    let q = feature_norm_sqr(student, w);
    LossValue::new(corr, alpha / 2.0 * q.powi(s))
}

/// Wirtinger gradient of [`empirical_loss_l`]:
/// `-(1/n) conj(Phi)^T u + s |alpha_s| ||Aw||^{2(s-1)} A^H A w`,
/// `u_x = F(x) conj(g'(y_x))`.
pub fn empirical_grad_l(
    student: &StudentSpec,
    teacher: &TeacherSpec,
    batch: &Batch,
    w: &Array1<C64>,
) -> Array1<C64> {
    let s = student.info_exponent();
    let alpha = teacher.alpha_s().norm();
    let y = batch.preactivations(w);
    let n = batch.len() as f64;
    let u = Array1::from_iter(
        batch
            .targets()
            .iter()
            .zip(y.iter())
            .map(|(&f, &yx)| f * student.link_deriv(yx).conj()),
    );
    let corr = batch.backward(&u).mapv(|z| -z / n);
    let aw = student.feature_coeffs(w);
    let q: f64 = aw.iter().map(|z| z.norm_sqr()).sum();
    let ah_aw = student.a_matrix().t().mapv(|z| z.conj()).dot(&aw);
    let c_reg = s as f64 * alpha * q.powi(s as i32 - 1);
    corr + ah_aw.mapv(|z| z * c_reg)
}

/// The full student link used by the empirical `Lhat`:
/// `ghat(y) = sum_j alpha_j y^j / sqrt(j!)` (the teacher's own link).
fn lhat_link(teacher: &TeacherSpec, y: C64) -> C64 {
    teacher.link(y)
}

/// Empirical loss for `Lhat`: batch mean of `-Re[F(x) conj(ghat(y_x))]` with
/// `ghat` the full teacher link, plus the analytic regularizer
/// `sum_j (|alpha_j|^2 / 2) ||Aw||^{2j}`.
pub fn empirical_loss_lhat(
    student: &StudentSpec,
    teacher: &TeacherSpec,
    batch: &Batch,
    w: &Array1<C64>,
) -> LossValue {
    let y = batch.preactivations(w);
    let corr = -batch
        .targets()
        .iter()
        .zip(y.iter())
        .map(|(&f, &yx)| (f * lhat_link(teacher, yx).conj()).re)
        .sum::<f64>()
        / batch.len() as f64;
    let q = feature_norm_sqr(student, w);
    let reg: f64 = teacher
        .alphas()
        .iter()
        .enumerate()
        .map(|(j, a)| a.norm_sqr() / 2.0 * q.powi(j as i32 + 1))
        .sum();
    LossValue::new(corr, reg)
}

/// Wirtinger gradient of [`empirical_loss_lhat`].
pub fn empirical_grad_lhat(
    student: &StudentSpec,
    teacher: &TeacherSpec,
    batch: &Batch,
    w: &Array1<C64>,
) -> Array1<C64> {
    let y = batch.preactivations(w);
    let n = batch.len() as f64;
    let u = Array1::from_iter(
        batch
            .targets()
            .iter()
            .zip(y.iter())
            .map(|(&f, &yx)| f * teacher.link_deriv(yx).conj()),
    );
    let corr = batch.backward(&u).mapv(|z| -z / n);
    let aw = student.feature_coeffs(w);
    let q: f64 = aw.iter().map(|z| z.norm_sqr()).sum();
    let ah_aw = student.a_matrix().t().mapv(|z| z.conj()).dot(&aw);
    let c_reg: f64 = teacher
        .alphas()
        .iter()
        .enumerate()
        .map(|(j, a)| a.norm_sqr() * (j + 1) as f64 * q.powi(j as i32))
        .sum();
    corr + ah_aw.mapv(|z| z * c_reg)
}

/// Fused single-pass evaluation of [`empirical_loss_lhat`] and
/// [`empirical_grad_lhat`].
///
/// The two-call form streams the `n x M` design matrix twice per iteration
/// (forward and backward products); at the reference scale that is the
/// dominant memory traffic of an `Lhat` training step. Here each block of
/// rows is kept cache-resident for both products, halving the traffic. The
/// returned values match the two-call form up to summation order.
pub fn empirical_loss_grad_lhat(
    student: &StudentSpec,
    teacher: &TeacherSpec,
    batch: &Batch,
    w: &Array1<C64>,
) -> (Array1<C64>, LossValue) {
    let n = batch.len();
    let phi = batch.phi();
    let targets = batch.targets();
    let chunk = 256;
    let mut corr_sum = 0.0f64;
    // v = conj(u)^T Phi accumulated blockwise; grad_corr = -conj(v)/n.
    let mut v: Array1<C64> = Array1::zeros(w.len());
    let mut ubar: Vec<C64> = Vec::with_capacity(chunk);
    let mut x0 = 0;
    while x0 < n {
        let x1 = (x0 + chunk).min(n);
        let phi_c = phi.slice(ndarray::s![x0..x1, ..]);
        let y_c = phi_c.dot(w);
        ubar.clear();
        for (&f, &yx) in targets.slice(ndarray::s![x0..x1]).iter().zip(y_c.iter()) {
            corr_sum += (f * lhat_link(teacher, yx).conj()).re;
            ubar.push(f.conj() * teacher.link_deriv(yx));
        }
        let ubar_v = ArrayView1::from(&ubar[..]);
        v += &ubar_v.dot(&phi_c);
        x0 = x1;
    }
    let nf = n as f64;
    let q = feature_norm_sqr(student, w);
    let ah_aw = student
        .a_matrix()
        .t()
        .mapv(|z| z.conj())
        .dot(&student.feature_coeffs(w));
    let c_reg: f64 = teacher
        .alphas()
        .iter()
        .enumerate()
        .map(|(j, a)| a.norm_sqr() * (j + 1) as f64 * q.powi(j as i32))
        .sum();
    let grad = v.mapv(|z| -z.conj() / nf) + ah_aw.mapv(|z| z * c_reg);
    let reg: f64 = teacher
        .alphas()
        .iter()
        .enumerate()
        .map(|(j, a)| a.norm_sqr() / 2.0 * q.powi(j as i32 + 1))
        .sum();
    (grad, LossValue::new(-corr_sum / nf, reg))
}

/// Default relative rank cutoff for the preconditioner spectrum.
///
/// `pinv(A^H A)` amplifies round-off by `(sigma_max / sigma)^2`; keeping
/// singular values down at the `1e-12 sigma_max` level makes a descent step
/// `eta * eps_mach * kappa^2 = O(1)` at the reference scale, which feeds
/// floating-point noise back into the iterate exponentially. A `1e-6`
/// cutoff bounds the per-step noise gain by ~`1e-12/eta` while discarding
/// only directions that carry no usable signal.
pub const PRECONDITIONER_RCOND: f64 = 1e-6;

/// `pinv(A^H A)` computed once from the SVD of `A`, with the numerical rank
/// at a relative singular-value threshold.
#[derive(Debug, Clone)]
pub struct Preconditioner {
    pinv_aha: Array2<C64>,
    rank: usize,
    sigma_max: f64,
    sigma_min_kept: f64,
}

impl Preconditioner {
    pub fn from_feature_matrix(a: &Array2<C64>) -> Result<Self> {
        Self::with_rcond(a, PRECONDITIONER_RCOND)
    }

    /// Builds the preconditioner keeping singular values
    /// `sigma > rcond * sigma_max`.
    pub fn with_rcond(a: &Array2<C64>, rcond: f64) -> Result<Self> {
        if !(rcond > 0.0 && rcond < 1.0) {
            return Err(Error::validation("rcond must lie in (0, 1)"));
        }
        crate::cue::ensure_blas_single_thread();
        let (_, sigma, vt) = a
            .svd(false, true)
            .map_err(|e| Error::numerical(format!("SVD of A failed: {e}")))?;
        let vt = vt.expect("requested V^T");
        let sigma_max = sigma.iter().cloned().fold(0.0, f64::max);
        if sigma_max == 0.0 {
            return Err(Error::numerical("feature matrix A is identically zero"));
        }
        let tol = rcond * sigma_max;
        let kept: Vec<(usize, f64)> = sigma
            .iter()
            .enumerate()
            .filter(|(_, &s)| s > tol)
            .map(|(i, &s)| (i, s))
            .collect();
        let rank = kept.len();
        let sigma_min_kept = kept.iter().map(|&(_, s)| s).fold(f64::INFINITY, f64::min);
        let m_width = a.ncols();
        let mut pinv = Array2::zeros((m_width, m_width));
        // pinv(A^H A) = V diag(sigma^-2) V^H, over the kept spectrum.
        for &(i, s) in &kept {
            let row = vt.row(i);
            let inv_s2 = 1.0 / (s * s);
            for p in 0..m_width {
                let vp = row[p].conj();
                for q in 0..m_width {
                    pinv[(p, q)] += vp * row[q] * inv_s2;
                }
            }
        }
        Ok(Preconditioner {
            pinv_aha: pinv,
            rank,
            sigma_max,
            sigma_min_kept,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma_max
    }

    /// Smallest singular value of `A` above the rank threshold.
    pub fn sigma_min(&self) -> f64 {
        self.sigma_min_kept
    }

    pub fn matrix(&self) -> &Array2<C64> {
        &self.pinv_aha
    }

    /// `pinv(A^H A) g`.
    pub fn apply(&self, g: &Array1<C64>) -> Array1<C64> {
        self.pinv_aha.dot(g)
    }

    /// The orthogonal projector `P_A = A pinv(A^H A) A^H` onto the column
    /// space of `A` in feature space.
    pub fn projector(&self, a: &Array2<C64>) -> Array2<C64> {
        let ah = a.t().mapv(|z| z.conj());
        a.dot(&self.pinv_aha).dot(&ah)
    }
}

/// Check that the preconditioned descent regime applies: the ODE reduction
/// requires the information exponent `s` to survive in the first
/// `floor(sqrt(N))` feature rows.
pub fn check_regime(student: &StudentSpec, teacher: &TeacherSpec, n_dim: usize) -> Result<()> {
    let sqrt_n = floor_sqrt(n_dim);
    if student.info_exponent() > sqrt_n {
        return Err(Error::regime(format!(
            "information exponent {} exceeds floor(sqrt(N)) = {sqrt_n}",
            student.info_exponent()
        )));
    }
    if teacher.h_star().len() > sqrt_n {
        return Err(Error::regime("teacher support exceeds floor(sqrt(N))"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        experiment_activation, frozen_weights_uniform, sample_h_star, LinkScale, StudentSpec,
        TeacherSpec,
    };
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn setup(
        n_dim: usize,
        depth: usize,
        width: usize,
        alphas: Vec<C64>,
        seed: u64,
    ) -> (TeacherSpec, StudentSpec) {
        let act = experiment_activation(n_dim, depth).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frozen = frozen_weights_uniform(width, &mut rng);
        let h = sample_h_star(n_dim, &mut rng);
        let teacher = TeacherSpec::new(n_dim, h, Array1::from_vec(alphas)).unwrap();
        let student =
            StudentSpec::build(&act, frozen, depth, &teacher, LinkScale::PaperTheory).unwrap();
        (teacher, student)
    }

    fn alphas_s3() -> Vec<C64> {
        let a = 1.0 / 3f64.sqrt();
        vec![c(0.0, 0.0), c(0.0, 0.0), c(a, 0.0), c(a, 0.0), c(a, 0.0)]
    }

    fn random_w(width: usize, scale: f64, seed: u64) -> Array1<C64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array1::from_iter((0..width).map(|_| crate::cue::complex_gaussian(&mut rng) * scale))
    }

    /// Random weights rescaled so that `||Aw|| = target`, keeping the powers
    /// `||Aw||^{2s}` in the losses O(1).
    fn random_w_feature_norm(
        student: &StudentSpec,
        width: usize,
        target: f64,
        seed: u64,
    ) -> Array1<C64> {
        let w = random_w(width, 1.0, seed);
        let q = feature_norm_sqr(student, &w).sqrt();
        w.mapv(|z| z * target / q)
    }

    #[test]
    fn fused_lhat_matches_two_call_form() {
        let (teacher, student) = setup(25, 10, 6, alphas_s3(), 9);
        let samples = crate::cue::sample_batch(25, 700, 91).unwrap();
        let batch = Batch::generate(&student, &teacher, &samples).unwrap();
        let w = random_w_feature_norm(&student, 6, 0.9, 92);
        let (grad_fused, loss_fused) = empirical_loss_grad_lhat(&student, &teacher, &batch, &w);
        let grad = empirical_grad_lhat(&student, &teacher, &batch, &w);
        let lval = empirical_loss_lhat(&student, &teacher, &batch, &w);
        let gscale: f64 = grad.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        let gdiff: f64 = grad
            .iter()
            .zip(grad_fused.iter())
            .map(|(&a, &b)| (a - b).norm_sqr())
            .sum::<f64>()
            .sqrt();
        assert!(gdiff <= 1e-12 * (1.0 + gscale), "gdiff = {gdiff:e}");
        assert!((loss_fused.total - lval.total).abs() <= 1e-12 * (1.0 + lval.total.abs()));
        assert!((loss_fused.correlation - lval.correlation).abs() <= 1e-12);
        assert!((loss_fused.regularizer - lval.regularizer).abs() <= 1e-12);
    }

    #[test]
    fn population_loss_l_hand_values() {
        // With s = 1 and alpha_1 = 1: L = -Re(m) + ||Aw||^2 / 2.
        let (teacher, student) = setup(25, 10, 6, vec![c(1.0, 0.0)], 3);
        let w = random_w(6, 0.4, 4);
        let v = population_loss_l(&student, &teacher, &w);
        let m = overlap_m(&student, &teacher, &w);
        let q = feature_norm_sqr(&student, &w);
        assert!((v.correlation + m.re).abs() < 1e-14);
        assert!((v.regularizer - q / 2.0).abs() < 1e-14);
        assert!((v.total - v.correlation - v.regularizer).abs() < 1e-15);
    }

    #[test]
    fn population_loss_zero_weight() {
        let (teacher, student) = setup(25, 10, 6, alphas_s3(), 5);
        let w = Array1::zeros(6);
        let l = population_loss_l(&student, &teacher, &w);
        let lh = population_loss_lhat(&student, &teacher, &w);
        assert_eq!(l.total, 0.0);
        assert_eq!(lh.total, 0.0);
    }

    #[test]
    fn lhat_summary_matches_weight_route() {
        let (teacher, student) = setup(25, 20, 8, alphas_s3(), 7);
        let w = random_w_feature_norm(&student, 8, 0.9, 8);
        let m = overlap_m(&student, &teacher, &w);
        let q = feature_norm_sqr(&student, &w);
        let r = m.norm();
        let theta = m.arg();
        let v = q - r * r;
        let via_summary = lhat_summary(r, theta, v, teacher.alphas().as_slice().unwrap());
        let direct = population_loss_lhat(&student, &teacher, &w).total;
        assert!(
            (via_summary - direct).abs() < 1e-11 * (1.0 + direct.abs()),
            "{via_summary} vs {direct}"
        );
    }

    #[test]
    fn lhat_grid_minimum_at_recovery() {
        // Over the summary grid (r, theta, v) the global minimum of Lhat sits
        // at (1, 0, 0) when the active exponents are coprime.
        let a = 1.0 / 3f64.sqrt();
        let alphas = [c(0.0, 0.0), c(0.0, 0.0), c(a, 0.0), c(a, 0.0), c(a, 0.0)];
        let res = 1e-2;
        let mut best = (f64::INFINITY, 0.0, 0.0, 0.0);
        let mut ir = 0;
        while (ir as f64) * res <= 1.5 {
            let r = ir as f64 * res;
            let mut it = 0;
            while (it as f64) * res < std::f64::consts::TAU {
                let theta = it as f64 * res;
                let mut iv = 0;
                while (iv as f64) * res <= 1.0 {
                    let v = iv as f64 * res;
                    let val = lhat_summary(r, theta, v, &alphas);
                    if val < best.0 {
                        best = (val, r, theta, v);
                    }
                    iv += 1;
                }
                it += 1;
            }
            ir += 1;
        }
        assert!(
            (best.1 - 1.0).abs() < 1e-12 && best.2.abs() < 1e-12 && best.3.abs() < 1e-12,
            "minimizer {best:?}"
        );
        let at_recovery = lhat_summary(1.0, 0.0, 0.0, &alphas);
        assert!((best.0 - at_recovery).abs() < 1e-12);
    }

    /// Central finite difference of a real loss in the packaged convention
    /// `d/dw_R + i d/dw_C`.
    fn fd_gradient<F: Fn(&Array1<C64>) -> f64>(f: F, w: &Array1<C64>) -> Array1<C64> {
        let h = 1e-6;
        let mut g = Array1::zeros(w.len());
        for j in 0..w.len() {
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp[j] += c(h, 0.0);
            wm[j] -= c(h, 0.0);
            let dre = (f(&wp) - f(&wm)) / (2.0 * h);
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp[j] += c(0.0, h);
            wm[j] -= c(0.0, h);
            let dim = (f(&wp) - f(&wm)) / (2.0 * h);
            g[j] = c(dre, dim);
        }
        g
    }

    #[test]
    fn population_grad_l_matches_finite_difference() {
        let (teacher, student) = setup(25, 15, 7, alphas_s3(), 11);
        let w = random_w_feature_norm(&student, 7, 0.8, 12);
        let analytic = population_grad_l(&student, &teacher, &w);
        let numeric = fd_gradient(|w| population_loss_l(&student, &teacher, w).total, &w);
        for j in 0..7 {
            let tol = 1e-6 * (1.0 + analytic[j].norm());
            assert!(
                (analytic[j] - numeric[j]).norm() < tol,
                "j={j}: {} vs {}",
                analytic[j],
                numeric[j]
            );
        }
    }

    #[test]
    fn population_grad_l_matches_finite_difference_s1() {
        let (teacher, student) = setup(25, 15, 7, vec![c(0.3, 0.4)], 13);
        let w = random_w_feature_norm(&student, 7, 0.8, 14);
        let analytic = population_grad_l(&student, &teacher, &w);
        let numeric = fd_gradient(|w| population_loss_l(&student, &teacher, w).total, &w);
        for j in 0..7 {
            assert!((analytic[j] - numeric[j]).norm() < 1e-6 * (1.0 + analytic[j].norm()));
        }
    }

    #[test]
    fn population_grad_lhat_matches_finite_difference() {
        let (teacher, student) = setup(25, 15, 7, alphas_s3(), 15);
        let w = random_w_feature_norm(&student, 7, 0.8, 16);
        let analytic = population_grad_lhat(&student, &teacher, &w);
        let numeric = fd_gradient(|w| population_loss_lhat(&student, &teacher, w).total, &w);
        for j in 0..7 {
            assert!((analytic[j] - numeric[j]).norm() < 1e-6 * (1.0 + analytic[j].norm()));
        }
    }

    fn small_batch(
        student: &StudentSpec,
        teacher: &TeacherSpec,
        n_dim: usize,
        count: usize,
        seed: u64,
    ) -> Batch {
        let samples = crate::cue::sample_batch(n_dim, count, seed).unwrap();
        Batch::generate(student, teacher, &samples).unwrap()
    }

    #[test]
    fn empirical_grad_l_matches_finite_difference() {
        let (teacher, student) = setup(25, 15, 7, alphas_s3(), 21);
        let batch = small_batch(&student, &teacher, 25, 12, 22);
        let w = random_w_feature_norm(&student, 7, 0.8, 23);
        let analytic = empirical_grad_l(&student, &teacher, &batch, &w);
        let numeric = fd_gradient(
            |w| empirical_loss_l(&student, &teacher, &batch, w).total,
            &w,
        );
        for j in 0..7 {
            let tol = 1e-5 * (1.0 + analytic[j].norm());
            assert!(
                (analytic[j] - numeric[j]).norm() < tol,
                "j={j}: {} vs {}",
                analytic[j],
                numeric[j]
            );
        }
    }

    #[test]
    fn empirical_grad_lhat_matches_finite_difference() {
        let (teacher, student) = setup(25, 15, 7, alphas_s3(), 31);
        let batch = small_batch(&student, &teacher, 25, 12, 32);
        let w = random_w_feature_norm(&student, 7, 0.8, 33);
        let analytic = empirical_grad_lhat(&student, &teacher, &batch, &w);
        let numeric = fd_gradient(
            |w| empirical_loss_lhat(&student, &teacher, &batch, w).total,
            &w,
        );
        for j in 0..7 {
            assert!((analytic[j] - numeric[j]).norm() < 1e-5 * (1.0 + analytic[j].norm()));
        }
    }

    #[test]
    fn empirical_loss_concentrates_on_population() {
        // With a reasonably large batch the empirical correlation term should
        // land near its population value.
        let (teacher, student) = setup(25, 40, 10, alphas_s3(), 41);
        let w = random_w_feature_norm(&student, 10, 0.9, 42);
        let batch = small_batch(&student, &teacher, 25, 4000, 43);
        let emp = empirical_loss_l(&student, &teacher, &batch, &w);
        let pop = population_loss_l(&student, &teacher, &w);
        // Regularizers are identical by construction.
        assert_eq!(emp.regularizer, pop.regularizer);
        // Tolerance from the batch's own spread of the correlation summand.
        let y = batch.preactivations(&w);
        let mut acc = crate::sympoly::MeanAccumulator::default();
        for (&f, &yx) in batch.targets().iter().zip(y.iter()) {
            acc.push(c(-(f * student.link(yx).conj()).re, 0.0));
        }
        let est = acc.estimate();
        assert!(
            (emp.correlation - pop.correlation).abs() <= 4.0 * est.stderr + 1e-12,
            "{} vs {} (stderr {})",
            emp.correlation,
            pop.correlation,
            est.stderr
        );
    }

    #[test]
    fn preconditioner_identity_case() {
        // A with orthonormal columns makes A^H A = I, so pinv is the identity.
        let mut a = Array2::zeros((3, 2));
        a[(0, 0)] = c(1.0, 0.0);
        a[(1, 1)] = c(0.0, 1.0);
        let pre = Preconditioner::from_feature_matrix(&a).unwrap();
        assert_eq!(pre.rank(), 2);
        for p in 0..2 {
            for q in 0..2 {
                let expect = if p == q { 1.0 } else { 0.0 };
                assert!((pre.matrix()[(p, q)] - c(expect, 0.0)).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn preconditioner_scaling_case() {
        // Diagonal A = diag(2, 3i): pinv(A^H A) = diag(1/4, 1/9).
        let mut a = Array2::zeros((2, 2));
        a[(0, 0)] = c(2.0, 0.0);
        a[(1, 1)] = c(0.0, 3.0);
        let pre = Preconditioner::from_feature_matrix(&a).unwrap();
        assert!((pre.matrix()[(0, 0)] - c(0.25, 0.0)).norm() < 1e-12);
        assert!((pre.matrix()[(1, 1)] - c(1.0 / 9.0, 0.0)).norm() < 1e-12);
        assert!((pre.sigma_max() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn preconditioner_rank_deficient() {
        // Duplicate columns: rank 1, and pinv solves on the column space.
        let mut a = Array2::zeros((2, 2));
        a[(0, 0)] = c(1.0, 0.0);
        a[(0, 1)] = c(1.0, 0.0);
        let pre = Preconditioner::from_feature_matrix(&a).unwrap();
        assert_eq!(pre.rank(), 1);
        // pinv([[1,1],[1,1]]) = [[1,1],[1,1]]/4.
        for p in 0..2 {
            for q in 0..2 {
                assert!((pre.matrix()[(p, q)] - c(0.25, 0.0)).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn projector_is_idempotent_and_hermitian() {
        let (_, student) = setup(25, 30, 12, alphas_s3(), 51);
        let a = student.a_matrix();
        let pre = Preconditioner::from_feature_matrix(a).unwrap();
        assert_eq!(pre.rank(), 12);
        let p = pre.projector(a);
        let pp = p.dot(&p);
        let mut max_idem = 0.0f64;
        let mut max_herm = 0.0f64;
        for i in 0..p.nrows() {
            for j in 0..p.ncols() {
                max_idem = max_idem.max((pp[(i, j)] - p[(i, j)]).norm());
                max_herm = max_herm.max((p[(i, j)] - p[(j, i)].conj()).norm());
            }
        }
        assert!(max_idem < 1e-10, "||P^2 - P|| = {max_idem}");
        assert!(max_herm < 1e-8, "hermiticity defect {max_herm}");
    }

    #[test]
    fn projector_fixes_columns_of_a() {
        let (_, student) = setup(25, 20, 5, alphas_s3(), 61);
        let a = student.a_matrix();
        let pre = Preconditioner::from_feature_matrix(a).unwrap();
        let p = pre.projector(a);
        let pa = p.dot(a);
        let gap = pa
            .iter()
            .zip(a.iter())
            .map(|(x, y)| (x - y).norm())
            .fold(0.0f64, f64::max);
        assert!(gap < 1e-10, "||P A - A|| = {gap}");
    }

    #[test]
    fn preconditioned_population_grad_vanishes_at_recovery() {
        // If w* reproduces h* exactly (achievable when A is square invertible
        // on the support), the preconditioned gradient of L vanishes.
        // Construct a tiny solvable instance: K = M, invertible A.
        let n_dim = 25;
        let act = experiment_activation(n_dim, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let frozen = frozen_weights_uniform(5, &mut rng);
        let h = sample_h_star(n_dim, &mut rng);
        let a3 = 1.0 / 3f64.sqrt();
        let teacher = TeacherSpec::new(
            n_dim,
            h.clone(),
            Array1::from_vec(vec![c(0.0, 0.0), c(0.0, 0.0), c(a3, 0.0), c(a3, 0.0), c(a3, 0.0)]),
        )
        .unwrap();
        let student =
            StudentSpec::build(&act, frozen, 5, &teacher, LinkScale::PaperTheory).unwrap();
        // Solve A w = h* by least squares via the preconditioner identities.
        let a = student.a_matrix();
        let pre = Preconditioner::from_feature_matrix(a).unwrap();
        let ah_h = a.t().mapv(|z| z.conj()).dot(&h);
        let w_star = pre.apply(&ah_h);
        let m = overlap_m(&student, &teacher, &w_star);
        assert!((m - c(1.0, 0.0)).norm() < 1e-8, "m = {m}");
        let g = population_grad_l(&student, &teacher, &w_star);
        let pg = pre.apply(&g);
        let norm: f64 = pg.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        assert!(norm < 1e-8, "|pinv grad| = {norm}");
    }

    #[test]
    fn check_regime_bounds() {
        let (teacher, student) = setup(25, 10, 4, alphas_s3(), 81);
        assert!(check_regime(&student, &teacher, 25).is_ok());
        assert!(check_regime(&student, &teacher, 4).is_err());
    }
}
