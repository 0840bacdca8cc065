//! Teacher and student construction: analytic activations, the feature
//! matrix `A`, link functions, and the information exponent.
//!
//! The student is a DeepSets network with frozen first and third layers;
//! only the middle weights `w` train. Through the powersum expansion the
//! student collapses to a single-index model in feature space:
//! `g(<w, Phi(x)>) = g(<Aw, p(x)>)` with `A_{km} = c_k sqrt(k) a_m^k`.
//!
//! Pairing conventions: the feature pairing `<h, p(x)>` does not conjugate
//! (`sum_k h_k p_k(x)`); pairings between coefficient vectors conjugate the
//! second argument. Both yield identical population quantities here because
//! the measure is diagonal on powersum products.

use ndarray::prelude::*;
use num_complex::Complex64 as C64;
use rand::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sympoly::{self, powersum_vector};

/// Named activation families with their construction parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum ActivationKind {
    /// `arctan(xi z) + xi z arctan(xi z)` with `xi = 1 - 1/sqrt(N)`.
    Arctan,
    /// The experiment activation: `c_k sqrt(k) = ((N-1)/N)^k`, which makes
    /// the rows of `A` equidistributed in norm.
    Experiment,
}

/// Truncated coefficient list of an analytic activation with no constant
/// term, plus the spectral summaries used by the initialization analysis.
#[derive(Debug, Clone)]
pub struct ActivationSpec {
    pub kind: ActivationKind,
    /// `c_1 .. c_K`; index `k-1` holds `c_k`. `c_0` is implicitly zero.
    pub coeffs: Array1<C64>,
    pub n_dim: usize,
    /// `max_{1 <= k <= min(N, K)} |c_k| sqrt(k)`.
    pub sigma_plus: f64,
    /// `min_{1 <= k <= floor(sqrt(N))} |c_k| sqrt(k)`.
    pub sigma_minus: f64,
    /// Analytic bound on the series tail `sum_{k > K} k |c_k|^2`.
    pub tail_bound: f64,
}

impl ActivationSpec {
    pub fn depth(&self) -> usize {
        self.coeffs.len()
    }

    /// `sigma(z)` by Horner evaluation of the truncated series.
    pub fn eval(&self, z: C64) -> C64 {
        let mut acc = C64::new(0.0, 0.0);
        for &c in self.coeffs.iter().rev() {
            acc = (acc + c) * z;
        }
        acc
    }

    fn summaries(n_dim: usize, coeffs: &Array1<C64>) -> (f64, f64) {
        let sqrt_n = (n_dim as f64).sqrt().floor() as usize;
        let scaled = |k: usize| coeffs[k - 1].norm() * (k as f64).sqrt();
        let sigma_plus = (1..=n_dim.min(coeffs.len()))
            .map(scaled)
            .fold(0.0, f64::max);
        let sigma_minus = (1..=sqrt_n.min(coeffs.len()))
            .map(scaled)
            .fold(f64::INFINITY, f64::min);
        (sigma_plus, sigma_minus)
    }
}

pub fn floor_sqrt(n_dim: usize) -> usize {
    (n_dim as f64).sqrt().floor() as usize
}

/// The arctan-based activation of the non-asymptotic rate analysis:
/// `sigma(z) = arctan(xi z) + xi z arctan(xi z)`, `xi = 1 - 1/sqrt(N)`.
///
/// Series coefficients: `c_{2j-1} = (-1)^{j-1} xi^{2j-1} / (2j-1)` and
/// `c_{2j} = (-1)^{j-1} xi^{2j} / (2j-1)`.
pub fn arctan_activation(n_dim: usize, depth: usize) -> Result<ActivationSpec> {
    if depth < 2 {
        return Err(Error::validation("arctan activation needs depth K >= 2"));
    }
    let xi = 1.0 - 1.0 / (n_dim as f64).sqrt();
    let mut coeffs = Array1::zeros(depth);
    for k in 1..=depth {
        let j = k.div_ceil(2); // odd k = 2j-1, even k = 2j
        let sign = if j % 2 == 1 { 1.0 } else { -1.0 };
        coeffs[k - 1] = C64::new(sign * xi.powi(k as i32) / (2 * j - 1) as f64, 0.0);
    }
    let (sigma_plus, sigma_minus) = ActivationSpec::summaries(n_dim, &coeffs);
    // k |c_k|^2 <= k xi^{2k} / (k-1)^2 <= xi^{k-1}; geometric tail.
    let tail_bound = xi.powi(depth as i32) / (1.0 - xi);
    Ok(ActivationSpec {
        kind: ActivationKind::Arctan,
        coeffs,
        n_dim,
        sigma_plus,
        sigma_minus,
        tail_bound,
    })
}

/// The experiment activation: `c_k = ((N-1)/N)^k / sqrt(k)`, so that
/// `A_{km} = ((N-1)/N)^k a_m^k` and all rows of `A` have the same norm in
/// expectation.
pub fn experiment_activation(n_dim: usize, depth: usize) -> Result<ActivationSpec> {
    if depth == 0 {
        return Err(Error::validation("activation depth K must be >= 1"));
    }
    if n_dim < 2 {
        return Err(Error::validation("experiment activation needs N >= 2"));
    }
    let rho = (n_dim as f64 - 1.0) / n_dim as f64;
    let coeffs = Array1::from_iter(
        (1..=depth).map(|k| C64::new(rho.powi(k as i32) / (k as f64).sqrt(), 0.0)),
    );
    let (sigma_plus, sigma_minus) = ActivationSpec::summaries(n_dim, &coeffs);
    // Exact geometric tail: sum_{k > K} k |c_k|^2 = sum_{k > K} rho^{2k}.
    let r2 = rho * rho;
    let tail_bound = r2.powi(depth as i32 + 1) / (1.0 - r2);
    Ok(ActivationSpec {
        kind: ActivationKind::Experiment,
        coeffs,
        n_dim,
        sigma_plus,
        sigma_minus,
        tail_bound,
    })
}

pub fn activation(kind: ActivationKind, n_dim: usize, depth: usize) -> Result<ActivationSpec> {
    match kind {
        ActivationKind::Arctan => arctan_activation(n_dim, depth),
        ActivationKind::Experiment => experiment_activation(n_dim, depth),
    }
}

/// Smallest `j >= 1` with `|alpha_j| > 1e-14`.
pub fn information_exponent(alphas: &[C64]) -> Result<usize> {
    alphas
        .iter()
        .position(|a| a.norm() > 1e-14)
        .map(|i| i + 1)
        .ok_or_else(|| Error::validation("all link coefficients are zero"))
}

/// The teacher: unit-norm direction `h*` supported on the first
/// `floor(sqrt(N))` powersum indices and link `f(z) = sum_j alpha_j z^j / sqrt(j!)`.
#[derive(Debug, Clone)]
pub struct TeacherSpec {
    h_star: Array1<C64>,
    alphas: Array1<C64>,
    info_exponent: usize,
}

impl TeacherSpec {
    pub fn new(n_dim: usize, h_star: Array1<C64>, alphas: Array1<C64>) -> Result<Self> {
        let sqrt_n = floor_sqrt(n_dim);
        if h_star.len() > sqrt_n {
            return Err(Error::validation(format!(
                "h* has {} entries; support must fit in floor(sqrt(N)) = {sqrt_n}",
                h_star.len()
            )));
        }
        let norm: f64 = h_star.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-12 {
            return Err(Error::validation(format!("h* must be unit norm, got {norm}")));
        }
        if alphas.len() > sqrt_n {
            return Err(Error::validation(format!(
                "link has {} coefficients; degree must not exceed floor(sqrt(N)) = {sqrt_n}",
                alphas.len()
            )));
        }
        let info_exponent = information_exponent(alphas.as_slice().expect("contiguous"))?;
        Ok(TeacherSpec {
            h_star,
            alphas,
            info_exponent,
        })
    }

    pub fn h_star(&self) -> &Array1<C64> {
        &self.h_star
    }

    pub fn alphas(&self) -> &Array1<C64> {
        &self.alphas
    }

    /// The information exponent `s`.
    pub fn info_exponent(&self) -> usize {
        self.info_exponent
    }

    pub fn alpha_s(&self) -> C64 {
        self.alphas[self.info_exponent - 1]
    }

    /// `f(z) = sum_j alpha_j z^j / sqrt(j!)`.
    pub fn link(&self, z: C64) -> C64 {
        let mut acc = C64::new(0.0, 0.0);
        let mut zj = C64::new(1.0, 0.0);
        for (j, &a) in self.alphas.iter().enumerate() {
            zj *= z;
            acc += a * zj / (sympoly::factorial(j as u64 + 1) as f64).sqrt();
        }
        acc
    }

    /// `f'(z)`.
    pub fn link_deriv(&self, z: C64) -> C64 {
        let mut acc = C64::new(0.0, 0.0);
        let mut zj = C64::new(1.0, 0.0);
        for (j, &a) in self.alphas.iter().enumerate() {
            let deg = (j + 1) as f64;
            acc += a * zj * deg / (sympoly::factorial(j as u64 + 1) as f64).sqrt();
            zj *= z;
        }
        acc
    }
}

/// Which normalization the student link carries in front of `z^s`.
///
/// The theory chapters use `g(z) = alpha_s / (|alpha_s| sqrt(s!)) z^s`; the
/// experiment chapter instead describes `g` through a unit coefficient in the
/// `alpha`-parameterization, i.e. `g(z) = z^s / sqrt(s!)`. The two agree
/// whenever `alpha_s` is real positive, as in the reference experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LinkScale {
    #[default]
    PaperTheory,
    PaperExperiment,
}

/// The student's frozen layers: circle weights `a_m`, the `K x M` feature
/// matrix `A`, and the phase the student link inherits from the teacher.
#[derive(Debug, Clone)]
pub struct StudentSpec {
    frozen_weights: Array1<C64>,
    a_matrix: Array2<C64>,
    /// Unit-modulus factor `alpha_s / |alpha_s|` (or 1 under
    /// [`LinkScale::PaperExperiment`]).
    link_phase: C64,
    info_exponent: usize,
}

impl StudentSpec {
    /// Builds `A_{km} = c_k sqrt(k) a_m^k` for `k <= depth`.
    pub fn build(
        act: &ActivationSpec,
        frozen_weights: Array1<C64>,
        depth: usize,
        teacher: &TeacherSpec,
        link_scale: LinkScale,
    ) -> Result<Self> {
        if depth == 0 || depth > act.depth() {
            return Err(Error::validation(format!(
                "row truncation K = {depth} must be in 1..={}",
                act.depth()
            )));
        }
        if let Some(bad) = frozen_weights.iter().find(|a| (a.norm() - 1.0).abs() > 1e-9) {
            return Err(Error::validation(format!(
                "frozen weight {bad} is off the unit circle"
            )));
        }
        let m_width = frozen_weights.len();
        let mut a_matrix = Array2::zeros((depth, m_width));
        for (m, &am) in frozen_weights.iter().enumerate() {
            let mut amk = C64::new(1.0, 0.0);
            for k in 1..=depth {
                amk *= am;
                a_matrix[(k - 1, m)] = act.coeffs[k - 1] * (k as f64).sqrt() * amk;
            }
        }
        let link_phase = match link_scale {
            LinkScale::PaperTheory => {
                let a = teacher.alpha_s();
                a / a.norm()
            }
            LinkScale::PaperExperiment => C64::new(1.0, 0.0),
        };
        Ok(StudentSpec {
            frozen_weights,
            a_matrix,
            link_phase,
            info_exponent: teacher.info_exponent(),
        })
    }

    pub fn frozen_weights(&self) -> &Array1<C64> {
        &self.frozen_weights
    }

    pub fn a_matrix(&self) -> &Array2<C64> {
        &self.a_matrix
    }

    /// Row truncation depth `K`.
    pub fn depth(&self) -> usize {
        self.a_matrix.nrows()
    }

    /// Width `M`.
    pub fn width(&self) -> usize {
        self.a_matrix.ncols()
    }

    pub fn info_exponent(&self) -> usize {
        self.info_exponent
    }

    pub fn link_phase(&self) -> C64 {
        self.link_phase
    }

    /// `g(z) = link_phase * z^s / sqrt(s!)`.
    pub fn link(&self, z: C64) -> C64 {
        let s = self.info_exponent as u32;
        self.link_phase * z.powu(s) / (sympoly::factorial(s as u64) as f64).sqrt()
    }

    /// `g'(z)`.
    pub fn link_deriv(&self, z: C64) -> C64 {
        let s = self.info_exponent as u32;
        self.link_phase * z.powu(s - 1) * s as f64 / (sympoly::factorial(s as u64) as f64).sqrt()
    }

    /// `Aw` in feature space.
    pub fn feature_coeffs(&self, w: &Array1<C64>) -> Array1<C64> {
        self.a_matrix.dot(w)
    }
}

/// Draws `M` frozen weights uniformly on the unit circle (angle uniform in
/// `[0, 2 pi)`).
pub fn frozen_weights_uniform<R: Rng + ?Sized>(m_width: usize, rng: &mut R) -> Array1<C64> {
    Array1::from_iter(
        (0..m_width).map(|_| C64::from_polar(1.0, rng.gen::<f64>() * std::f64::consts::TAU)),
    )
}

/// Draws `h*` uniformly on the complex unit sphere of the first
/// `floor(sqrt(N))` coordinates.
pub fn sample_h_star<R: Rng + ?Sized>(n_dim: usize, rng: &mut R) -> Array1<C64> {
    let sqrt_n = floor_sqrt(n_dim);
    let mut h = Array1::from_iter((0..sqrt_n).map(|_| crate::cue::complex_gaussian(rng)));
    let norm: f64 = h.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    h.mapv_inplace(|z| z / norm);
    h
}

/// `F(x) = f(<h*, p(x)>)` with the non-conjugating feature pairing.
pub fn teacher_eval(teacher: &TeacherSpec, x: &[C64]) -> Result<C64> {
    let depth = teacher.h_star.len();
    let pv = powersum_vector(x, depth)?;
    let z: C64 = teacher
        .h_star
        .iter()
        .enumerate()
        .map(|(i, &h)| h * pv.values()[i])
        .sum();
    Ok(teacher.link(z))
}

/// `F_w(x) = g(<Aw, p(x)>)` through the feature route.
///
/// This is the production path; [`student_eval_phi`] is the independent
/// DeepSets-route oracle for the same quantity.
pub fn student_eval(student: &StudentSpec, w: &Array1<C64>, x: &[C64]) -> Result<C64> {
    if w.len() != student.width() {
        return Err(Error::validation(format!(
            "weight length {} does not match width {}",
            w.len(),
            student.width()
        )));
    }
    let aw = student.feature_coeffs(w);
    let pv = powersum_vector(x, student.depth())?;
    let y: C64 = aw
        .iter()
        .enumerate()
        .map(|(k, &c)| c * pv.values()[k])
        .sum();
    Ok(student.link(y))
}

/// `g(<w, Phi(x)>)` with `Phi_m(x) = sum_n sigma(a_m x_n)` evaluated from the
/// truncated activation series directly.
pub fn student_eval_phi(
    student: &StudentSpec,
    act: &ActivationSpec,
    w: &Array1<C64>,
    x: &[C64],
) -> Result<C64> {
    if w.len() != student.width() {
        return Err(Error::validation("weight length does not match width"));
    }
    let mut inner = C64::new(0.0, 0.0);
    for (m, &am) in student.frozen_weights.iter().enumerate() {
        let phi_m: C64 = x.iter().map(|&xn| act.eval(am * xn)).sum();
        inner += w[m] * phi_m;
    }
    Ok(student.link(inner))
}

/// On-disk model document. Round-trips bit-exactly through JSON.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelDocument {
    #[serde(rename = "N")]
    pub n_dim: usize,
    #[serde(rename = "M")]
    pub width: usize,
    #[serde(rename = "K")]
    pub depth: usize,
    pub activation: ActivationKind,
    pub link_scale: LinkScale,
    /// `[re, im]` pairs.
    pub frozen_weights: Vec<[f64; 2]>,
    pub h_star: Vec<[f64; 2]>,
    pub alphas: Vec<[f64; 2]>,
    pub seed: u64,
}

fn to_pairs(v: &Array1<C64>) -> Vec<[f64; 2]> {
    v.iter().map(|z| [z.re, z.im]).collect()
}

fn from_pairs(v: &[[f64; 2]]) -> Array1<C64> {
    Array1::from_iter(v.iter().map(|p| C64::new(p[0], p[1])))
}

impl ModelDocument {
    pub fn from_parts(
        n_dim: usize,
        depth: usize,
        activation: ActivationKind,
        link_scale: LinkScale,
        student: &StudentSpec,
        teacher: &TeacherSpec,
        seed: u64,
    ) -> Self {
        ModelDocument {
            n_dim,
            width: student.width(),
            depth,
            activation,
            link_scale,
            frozen_weights: to_pairs(student.frozen_weights()),
            h_star: to_pairs(teacher.h_star()),
            alphas: to_pairs(teacher.alphas()),
            seed,
        }
    }

    pub fn build(&self) -> Result<(ActivationSpec, TeacherSpec, StudentSpec)> {
        let act = activation(self.activation, self.n_dim, self.depth)?;
        let teacher = TeacherSpec::new(self.n_dim, from_pairs(&self.h_star), from_pairs(&self.alphas))?;
        let student = StudentSpec::build(
            &act,
            from_pairs(&self.frozen_weights),
            self.depth,
            &teacher,
            self.link_scale,
        )?;
        Ok((act, teacher, student))
    }
}
