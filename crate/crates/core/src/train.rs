//! Full-batch preconditioned gradient descent on the empirical losses,
//! reproducing the reference experiment (N=25, M=100, K=150, 50000 samples,
//! 20000 iterations).
//!
//! The update is `w <- w - eta * pinv(A^H A) * grad(w)` with the Wirtinger
//! gradient convention of the loss module; the `1/(s |alpha_s|)` factor of
//! the continuous-time theorem is absorbed into the learning rate.
//!
//! For loss `L` with information exponent `s = 3` the per-iteration gradient
//! is evaluated through a precomputed symmetric third-moment tensor
//! `T[(a<=b), m] = sum_x F(x) conj(Phi_xa Phi_xb Phi_xm)`, turning each of
//! the 20000 iterations into an `M x M(M+1)/2` matrix-vector product instead
//! of two passes over the 50000-sample design matrix. The tensor depends
//! only on the data and the frozen layers, so a sweep over weight seeds pays
//! its construction cost once.

use ndarray::linalg::general_mat_mul;
use ndarray::prelude::*;
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::time::Instant;

use crate::dynamics::{summary_from_weights, SummaryStats};
use crate::error::{Error, Result};
use crate::loss::{self, Batch, LossValue, Preconditioner};
use crate::model::{
    activation, ActivationKind, ActivationSpec, LinkScale, StudentSpec, TeacherSpec,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    L,
    Lhat,
}

/// The experiment configuration. All randomness flows from the four named
/// seeds; `seed_weights` alone varies across a seed sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(rename = "N")]
    pub n_dim: usize,
    #[serde(rename = "M")]
    pub width: usize,
    #[serde(rename = "K")]
    pub depth: usize,
    pub n_samples: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub loss_kind: LossKind,
    pub activation: ActivationKind,
    pub link_scale: LinkScale,
    /// Teacher coefficients `alpha_1..` as `[re, im]` pairs.
    pub alphas: Vec<[f64; 2]>,
    pub seed_weights: u64,
    pub seed_frozen: u64,
    pub seed_data: u64,
    pub seed_hstar: u64,
    pub record_every: usize,
    /// Terminal `r` at or above this counts as strong recovery.
    pub success_threshold: f64,
}

impl TrainConfig {
    /// The reference experiment: N=25, M=100, K=150, n=50000, 20000
    /// iterations at rate 0.0025, teacher `alpha_3 = alpha_4 = alpha_5 =
    /// 1/sqrt(3)`.
    pub fn paper_preset() -> Self {
        let a = 1.0 / 3f64.sqrt();
        TrainConfig {
            n_dim: 25,
            width: 100,
            depth: 150,
            n_samples: 50_000,
            iterations: 20_000,
            learning_rate: 0.0025,
            loss_kind: LossKind::L,
            activation: ActivationKind::Experiment,
            link_scale: LinkScale::PaperTheory,
            alphas: vec![[0.0, 0.0], [0.0, 0.0], [a, 0.0], [a, 0.0], [a, 0.0]],
            seed_weights: 1,
            seed_frozen: 2,
            seed_data: 3,
            seed_hstar: 4,
            record_every: 10,
            success_threshold: 0.9,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::validation("learning_rate must be positive"));
        }
        if self.iterations == 0 {
            return Err(Error::validation("iterations must be >= 1"));
        }
        if self.n_samples == 0 {
            return Err(Error::validation("n_samples must be >= 1"));
        }
        if self.record_every == 0 {
            return Err(Error::validation("record_every must be >= 1"));
        }
        if self.alphas.is_empty() {
            return Err(Error::validation("teacher coefficients must be non-empty"));
        }
        if !(0.0..=1.0).contains(&self.success_threshold) {
            return Err(Error::validation("success_threshold must lie in [0, 1]"));
        }
        Ok(())
    }

    fn alphas_complex(&self) -> Array1<C64> {
        Array1::from_iter(self.alphas.iter().map(|p| C64::new(p[0], p[1])))
    }
}

/// One completed run: recorded summary statistics, empirical losses, and the
/// outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub iters: Vec<usize>,
    pub states: Vec<SummaryStats>,
    pub emp_loss: Vec<f64>,
    pub outcome: SummaryStats,
    pub success: bool,
    pub wallclock_secs: f64,
    pub preconditioner_rank: usize,
    pub delta: f64,
}

impl RunRecord {
    /// CSV dump: `iter, r, cos_s_theta, v, emp_loss`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "iter,r,cos_s_theta,v,emp_loss")?;
        for ((it, st), l) in self.iters.iter().zip(&self.states).zip(&self.emp_loss) {
            writeln!(out, "{},{},{},{},{}", it, st.r, st.cos_s_theta, st.v, l)?;
        }
        Ok(())
    }
}

/// Symmetric third-moment contraction for loss `L` at `s = 3`.
struct FastPath {
    /// `M x M(M+1)/2`, row-major, so the per-iteration contraction is one
    /// BLAS matvec.
    t_t: Array2<C64>,
    pairs: Vec<(usize, usize)>,
}

impl FastPath {
    fn build(batch: &Batch) -> FastPath {
        let phi = batch.phi();
        let n = phi.nrows();
        let m_w = phi.ncols();
        let mut pairs = Vec::with_capacity(m_w * (m_w + 1) / 2);
        for a in 0..m_w {
            for b in a..m_w {
                pairs.push((a, b));
            }
        }
        let np = pairs.len();
        crate::cue::ensure_blas_single_thread();
        let mut t_mat: Array2<C64> = Array2::zeros((np, m_w));
        let chunk = 512;
        let mut start = 0;
        while start < n {
            let stop = (start + chunk).min(n);
            let rows = stop - start;
            let phi_c = phi.slice(s![start..stop, ..]).mapv(|z| z.conj());
            let mut q: Array2<C64> = Array2::zeros((rows, np));
            for x in 0..rows {
                let f = batch.targets()[start + x];
                let row = phi_c.row(x);
                let mut p = 0;
                for a in 0..m_w {
                    let fa = f * row[a];
                    for b in a..m_w {
                        q[(x, p)] = fa * row[b];
                        p += 1;
                    }
                }
            }
            general_mat_mul(
                C64::new(1.0, 0.0),
                &q.t(),
                &phi_c,
                C64::new(1.0, 0.0),
                &mut t_mat,
            );
            start = stop;
        }
        let t_t = t_mat.t().as_standard_layout().to_owned();
        FastPath { t_t, pairs }
    }

    /// `u_base[m] = sum_x F_x conj(y_x)^2 conj(Phi_xm)` for `y = Phi w`.
    fn contract(&self, w: &Array1<C64>) -> Array1<C64> {
        let wc = w.mapv(|z| z.conj());
        let mut q: Array1<C64> = Array1::zeros(self.pairs.len());
        for (p, &(a, b)) in self.pairs.iter().enumerate() {
            let v = wc[a] * wc[b];
            q[p] = if a == b { v } else { v + v };
        }
        self.t_t.dot(&q)
    }
}

/// Everything a run needs that does not depend on the weight seed: the
/// model, the data batch in feature form, the preconditioner, and (for loss
/// `L` at `s = 3`) the moment tensor.
pub struct TrainSession {
    config: TrainConfig,
    act: ActivationSpec,
    teacher: TeacherSpec,
    student: StudentSpec,
    batch: Batch,
    pre: Preconditioner,
    /// `A^H A`, reused by the analytic regularizer gradient.
    aha: Array2<C64>,
    delta: f64,
    fast: Option<FastPath>,
}

impl TrainSession {
    pub fn prepare(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let act = activation(config.activation, config.n_dim, config.depth)?;
        let mut rng_frozen =
            <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(config.seed_frozen);
        let frozen = crate::model::frozen_weights_uniform(config.width, &mut rng_frozen);
        let mut rng_h =
            <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(config.seed_hstar);
        let h_star = crate::model::sample_h_star(config.n_dim, &mut rng_h);
        let teacher = TeacherSpec::new(config.n_dim, h_star, config.alphas_complex())?;
        let student = StudentSpec::build(&act, frozen, config.depth, &teacher, config.link_scale)?;
        loss::check_regime(&student, &teacher, config.n_dim)?;
        let samples = crate::cue::sample_batch(config.n_dim, config.n_samples, config.seed_data)?;
        let batch = Batch::generate(&student, &teacher, &samples)?;
        let pre = Preconditioner::from_feature_matrix(student.a_matrix())?;
        let a_conj_t = student.a_matrix().t().mapv(|z| z.conj());
        let aha = a_conj_t.dot(student.a_matrix());
        let delta = crate::init::projection_deficiency(&student, teacher.h_star())?;
        let fast = match (config.loss_kind, student.info_exponent()) {
            (LossKind::L, 3) => Some(FastPath::build(&batch)),
            _ => None,
        };
        Ok(TrainSession {
            config: config.clone(),
            act,
            teacher,
            student,
            batch,
            pre,
            aha,
            delta,
            fast,
        })
    }

    pub fn student(&self) -> &StudentSpec {
        &self.student
    }

    pub fn teacher(&self) -> &TeacherSpec {
        &self.teacher
    }

    pub fn activation_spec(&self) -> &ActivationSpec {
        &self.act
    }

    pub fn batch(&self) -> &Batch {
        &self.batch
    }

    pub fn preconditioner(&self) -> &Preconditioner {
        &self.pre
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// The per-iteration Wirtinger gradient and empirical loss at `w`.
    pub fn gradient_and_loss(&self, w: &Array1<C64>) -> (Array1<C64>, LossValue) {
        match (&self.fast, self.config.loss_kind) {
            (Some(fast), LossKind::L) => {
                let s = 3.0;
                let alpha = self.teacher.alpha_s().norm();
                let n = self.batch.len() as f64;
                // g(y) = c_g y^3: the conjugated link coefficient scales both
                // the gradient and the correlation term.
                let cg_conj =
                    (self.student.link_phase() / (6f64).sqrt()).conj();
                let u_base = fast.contract(w);
                let corr_grad = u_base.mapv(|z| z * (-s * cg_conj / n));
                let s_sum: C64 = u_base
                    .iter()
                    .zip(w.iter())
                    .map(|(&u, &wm)| u * wm.conj())
                    .sum();
                let corr_loss = -(cg_conj * s_sum).re / n;
                let aha_w = self.aha.dot(w);
                let q: f64 = w
                    .iter()
                    .zip(aha_w.iter())
                    .map(|(&wm, &aw)| (wm.conj() * aw).re)
                    .sum();
                let reg_grad = aha_w.mapv(|z| z * (s * alpha * q * q));
                let reg_loss = alpha / 2.0 * q.powi(3);
                let grad = corr_grad + reg_grad;
                let loss = LossValue {
                    total: corr_loss + reg_loss,
                    correlation: corr_loss,
                    regularizer: reg_loss,
                };
                (grad, loss)
            }
            (_, LossKind::L) => (
                loss::empirical_grad_l(&self.student, &self.teacher, &self.batch, w),
                loss::empirical_loss_l(&self.student, &self.teacher, &self.batch, w),
            ),
            (_, LossKind::Lhat) => {
                loss::empirical_loss_grad_lhat(&self.student, &self.teacher, &self.batch, w)
            }
        }
    }

    /// Runs a full descent from the seeded initialization.
    pub fn run(&self, seed_weights: u64) -> Result<RunRecord> {
        let mut rng =
            <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed_weights);
        let draw = crate::init::init_weights(&self.student, &mut rng)?;
        self.run_from(&draw.w0, seed_weights)
    }

    /// Runs a full descent from explicit initial weights.
    pub fn run_from(&self, w0: &Array1<C64>, seed_weights: u64) -> Result<RunRecord> {
        let start = Instant::now();
        let cfg = &self.config;
        let eta = cfg.learning_rate;
        let mut w = w0.clone();
        let mut iters = Vec::new();
        let mut states = Vec::new();
        let mut emp_loss = Vec::new();
        let record = |iter: usize,
                          w: &Array1<C64>,
                          loss: &LossValue,
                          iters: &mut Vec<usize>,
                          states: &mut Vec<SummaryStats>,
                          emp: &mut Vec<f64>|
         -> Result<()> {
            if !loss.total.is_finite() {
                return Err(Error::numerical(format!(
                    "non-finite empirical loss at iteration {iter}"
                )));
            }
            iters.push(iter);
            states.push(summary_from_weights(w, &self.student, &self.teacher, self.delta));
            emp.push(loss.total);
            Ok(())
        };
        for iter in 0..cfg.iterations {
            let (grad, lval) = self.gradient_and_loss(&w);
            if iter % cfg.record_every == 0 {
                record(iter, &w, &lval, &mut iters, &mut states, &mut emp_loss)?;
            }
            if grad.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
                return Err(Error::numerical(format!(
                    "non-finite gradient at iteration {iter}"
                )));
            }
            let step = self.pre.apply(&grad);
            w.zip_mut_with(&step, |wm, &sm| *wm -= sm * eta);
        }
        let (_, final_loss) = self.gradient_and_loss(&w);
        record(
            cfg.iterations,
            &w,
            &final_loss,
            &mut iters,
            &mut states,
            &mut emp_loss,
        )?;
        let outcome = *states.last().expect("recorded at least once");
        let mut config = cfg.clone();
        config.seed_weights = seed_weights;
        Ok(RunRecord {
            config,
            iters,
            states,
            emp_loss,
            outcome,
            success: outcome.r >= cfg.success_threshold,
            wallclock_secs: start.elapsed().as_secs_f64(),
            preconditioner_rank: self.pre.rank(),
            delta: self.delta,
        })
    }
}

/// One-shot convenience wrapper for a single seed.
pub fn train_gd(config: &TrainConfig) -> Result<RunRecord> {
    TrainSession::prepare(config)?.run(config.seed_weights)
}

/// Result of a learning-rate sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LrGridReport {
    pub best_rate: f64,
    /// `(rate, successes, runs)` per grid entry, in grid order.
    pub table: Vec<(f64, usize, usize)>,
}

/// Runs each rate over the seed set; success is terminal
/// `r >= success_threshold`. Ties break toward the smaller rate. Diverging
/// runs count as failures rather than aborting the sweep.
pub fn lr_grid_search(config: &TrainConfig, grid: &[f64], seeds: &[u64]) -> Result<LrGridReport> {
    if grid.is_empty() {
        return Err(Error::validation("learning-rate grid must be non-empty"));
    }
    if seeds.is_empty() {
        return Err(Error::validation("seed set must be non-empty"));
    }
    let mut table = Vec::new();
    let mut best: Option<(f64, usize)> = None;
    for &rate in grid {
        if rate <= 0.0 {
            return Err(Error::validation("learning rates must be positive"));
        }
        let mut cfg = config.clone();
        cfg.learning_rate = rate;
        let session = TrainSession::prepare(&cfg)?;
        let mut successes = 0;
        for &seed in seeds {
            match session.run(seed) {
                Ok(rec) if rec.success => successes += 1,
                Ok(_) => {}
                Err(Error::Numerical(_)) => {} // divergence = failure
                Err(e) => return Err(e),
            }
        }
        table.push((rate, successes, seeds.len()));
        let better = match best {
            None => true,
            Some((best_rate, best_succ)) => {
                successes > best_succ || (successes == best_succ && rate < best_rate)
            }
        };
        if better {
            best = Some((rate, successes));
        }
    }
    Ok(LrGridReport {
        best_rate: best.expect("non-empty grid").0,
        table,
    })
}

/// `(search_duration, descent_duration)`: the last recorded iteration with
/// `r < 2 r0`, and the distance from there to the first crossing of the
/// success threshold (`None` if unreached).
pub fn search_descent_metrics(record: &RunRecord) -> (usize, Option<usize>) {
    let r0 = record.states.first().map(|s| s.r).unwrap_or(0.0);
    let search_end = record
        .iters
        .iter()
        .zip(&record.states)
        .filter(|(_, st)| st.r < 2.0 * r0)
        .map(|(&it, _)| it)
        .next_back()
        .unwrap_or(0);
    let threshold = record.config.success_threshold;
    let crossing = record
        .iters
        .iter()
        .zip(&record.states)
        .find(|(_, st)| st.r >= threshold)
        .map(|(&it, _)| it);
    (search_end, crossing.map(|c| c.saturating_sub(search_end)))
}

/// The qualitative signature of successful runs: `r` first dips below its
/// initial value before rising to recovery.
pub fn has_recovery_dip(record: &RunRecord) -> bool {
    let r0 = match record.states.first() {
        Some(st) => st.r,
        None => return false,
    };
    let min_idx = record
        .states
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.r.partial_cmp(&b.1.r).unwrap())
        .map(|(i, _)| i)
        .unwrap_or(0);
    let min_r = record.states[min_idx].r;
    let rises_after = record.states[min_idx..].iter().any(|st| st.r >= 2.0 * r0);
    min_r < r0 * 0.999 && rises_after
}
