//! The summary-statistics ODE of the preconditioned gradient flow, its
//! integrator, stopping times, and closed-form reference bounds.
//!
//! The flow `dw/dt = -(1/(s |alpha_s|)) pinv(A^H A) grad L(w)` closes over
//! three dimension-free statistics:
//!
//! ```text
//! dr/dt   = (1 - delta) r^{s-1} cos(s theta) - (v + r^2)^{s-1} r
//! dcos/dt = (1 - delta) s r^{s-2} (1 - cos^2(s theta))
//! dv/dt   = 2 delta r^s cos(s theta) - 2 (v + r^2)^{s-1} v
//! ```
//!
//! where `m = <Aw, h*> = r e^{i theta}`, `v = ||Aw||^2 - r^2`, and
//! `delta = 1 - ||P_A h*||^2` is a constant of the flow. The sign of
//! `sin(s theta)` never changes along the flow, so `m` is reconstructed from
//! `(r, cos(s theta))` and the initial sign.

use ndarray::prelude::*;
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::error::{Error, Result};
use crate::loss::{overlap_m, population_grad_l, Preconditioner};
use crate::model::{StudentSpec, TeacherSpec};

/// The dimension-free state of the flow at one time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub m: C64,
    pub r: f64,
    pub cos_s_theta: f64,
    pub v: f64,
    pub delta: f64,
}

impl SummaryStats {
    /// Builds a state from `(r, cos s theta, v)`, reconstructing
    /// `m = r e^{i theta}` with `theta = sin_sign * arccos(cos s theta) / s`.
    pub fn from_polar(r: f64, cos_s_theta: f64, v: f64, delta: f64, s: usize, sin_sign: f64) -> Result<Self> {
        if !(0.0..=1.0 + 1e-9).contains(&r) {
            return Err(Error::validation(format!("r = {r} outside [0, 1]")));
        }
        if !(-1.0 - 1e-12..=1.0 + 1e-12).contains(&cos_s_theta) {
            return Err(Error::validation(format!("cos s theta = {cos_s_theta} outside [-1, 1]")));
        }
        if v < -1e-12 {
            return Err(Error::validation(format!("v = {v} negative")));
        }
        if !(0.0..=1.0).contains(&delta) {
            return Err(Error::validation(format!("delta = {delta} outside [0, 1]")));
        }
        let theta = sin_sign.signum() * cos_s_theta.clamp(-1.0, 1.0).acos() / s as f64;
        Ok(SummaryStats {
            m: C64::from_polar(r, theta),
            r,
            cos_s_theta: cos_s_theta.clamp(-1.0, 1.0),
            v: v.max(0.0),
            delta,
        })
    }
}

/// Summary statistics of a concrete weight vector. The `r = 0` phase is
/// undefined; `cos s theta` is set to 1 there by convention.
pub fn summary_from_weights(
    w: &Array1<C64>,
    student: &StudentSpec,
    teacher: &TeacherSpec,
    delta: f64,
) -> SummaryStats {
    let s = student.info_exponent();
    let m = overlap_m(student, teacher, w);
    let r = m.norm();
    let cos_s_theta = if r == 0.0 {
        1.0
    } else {
        (s as f64 * m.arg()).cos()
    };
    let q = crate::loss::feature_norm_sqr(student, w);
    SummaryStats {
        m,
        r,
        cos_s_theta,
        v: (q - r * r).max(0.0),
        delta,
    }
}

/// The right-hand side of the Theorem 4.1 system.
///
/// Guards: at `s = 1` the `r^{s-2}` factor is `1/r`, capped at `r >= 1e-10`;
/// at `r = 0` with `s >= 2` the `dcos` term vanishes.
pub fn ode_rhs(state: &SummaryStats, s: usize) -> (f64, f64, f64) {
    let SummaryStats {
        r,
        cos_s_theta: cs,
        v,
        delta,
        ..
    } = *state;
    let sf = s as f64;
    let q = v + r * r;
    let dr = (1.0 - delta) * r.powi(s as i32 - 1) * cs - q.powi(s as i32 - 1) * r;
    let dcos = if s >= 2 {
        (1.0 - delta) * sf * r.powi(s as i32 - 2) * (1.0 - cs * cs)
    } else {
        (1.0 - delta) * (1.0 - cs * cs) / r.max(1e-10)
    };
    let dv = 2.0 * delta * r.powi(s as i32) * cs - 2.0 * q.powi(s as i32 - 1) * v;
    (dr, dcos, dv)
}

/// Round-off scale below which post-step projections onto the valid region
/// are treated as exact boundary contact rather than logged clamp events.
const CLAMP_LOG_THRESHOLD: f64 = 1e-12;

/// A post-step projection back onto the valid region that exceeded the
/// round-off threshold [`CLAMP_LOG_THRESHOLD`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClampEvent {
    pub time: f64,
    pub stat: String,
    pub magnitude: f64,
}

/// A labeled phase crossing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseEvent {
    pub label: String,
    pub time: f64,
}

/// An integrated (or recorded discrete) trajectory of summary statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<SummaryStats>,
    pub events: Vec<PhaseEvent>,
    pub clamp_events: Vec<ClampEvent>,
}

impl Trajectory {
    pub fn terminal(&self) -> &SummaryStats {
        self.states.last().expect("non-empty trajectory")
    }

    /// CSV dump: `t, r, cos_s_theta, v, m_re, m_im`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "t,r,cos_s_theta,v,m_re,m_im")?;
        for (t, st) in self.times.iter().zip(&self.states) {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                t, st.r, st.cos_s_theta, st.v, st.m.re, st.m.im
            )?;
        }
        Ok(())
    }
}

/// Integrator knobs: initial/maximum step, per-step absolute tolerance, and
/// the underflow floor below which integration aborts.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StepControl {
    pub dt_init: f64,
    pub abs_tol: f64,
    pub dt_min: f64,
}

impl Default for StepControl {
    fn default() -> Self {
        StepControl {
            dt_init: 1e-2,
            abs_tol: 1e-9,
            dt_min: 1e-12,
        }
    }
}

fn rk4_step(state: (f64, f64, f64), delta: f64, s: usize, dt: f64) -> (f64, f64, f64) {
    let f = |(r, cs, v): (f64, f64, f64)| {
        let st = SummaryStats {
            m: C64::new(0.0, 0.0),
            r: r.max(0.0),
            cos_s_theta: cs.clamp(-1.0, 1.0),
            v: v.max(0.0),
            delta,
        };
        let (mut dr, dcs, mut dv) = ode_rhs(&st, s);
        // Sliding-mode treatment of the state-space boundary: where the
        // vector field points out of the valid region (possible for v at
        // delta > 0 with cos s theta < 0, and for r at s = 1), drop the
        // outward component and flow along the boundary instead of leaving
        // it. Interior states are untouched.
        if st.r <= 0.0 && dr < 0.0 {
            dr = 0.0;
        }
        if st.v <= 0.0 && dv < 0.0 {
            dv = 0.0;
        }
        (dr, dcs, dv)
    };
    let add = |a: (f64, f64, f64), k: (f64, f64, f64), h: f64| (a.0 + h * k.0, a.1 + h * k.1, a.2 + h * k.2);
    let k1 = f(state);
    let k2 = f(add(state, k1, dt / 2.0));
    let k3 = f(add(state, k2, dt / 2.0));
    let k4 = f(add(state, k3, dt));
    (
        state.0 + dt / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0),
        state.1 + dt / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1),
        state.2 + dt / 6.0 * (k1.2 + 2.0 * k2.2 + 2.0 * k3.2 + k4.2),
    )
}

struct Integrator {
    s: usize,
    delta: f64,
    sin_sign: f64,
    ctrl: StepControl,
    t: f64,
    state: (f64, f64, f64),
    clamp_events: Vec<ClampEvent>,
}

impl Integrator {
    fn new(state0: &SummaryStats, s: usize, ctrl: StepControl) -> Self {
        let sin_sign = if (s as f64 * state0.m.arg()).sin() < 0.0 {
            -1.0
        } else {
            1.0
        };
        Integrator {
            s,
            delta: state0.delta,
            sin_sign,
            ctrl,
            t: 0.0,
            state: (state0.r, state0.cos_s_theta, state0.v),
            clamp_events: Vec::new(),
        }
    }

    fn snapshot(&self) -> SummaryStats {
        let (r, cs, v) = self.state;
        let theta = self.sin_sign * cs.acos() / self.s as f64;
        SummaryStats {
            m: C64::from_polar(r, theta),
            r,
            cos_s_theta: cs,
            v,
            delta: self.delta,
        }
    }

    fn clamp(&mut self, raw: (f64, f64, f64), t: f64) -> (f64, f64, f64) {
        let clamped = (raw.0.max(0.0), raw.1.clamp(-1.0, 1.0), raw.2.max(0.0));
        let labels = ["r", "cos_s_theta", "v"];
        let deltas = [
            (clamped.0 - raw.0).abs(),
            (clamped.1 - raw.1).abs(),
            (clamped.2 - raw.2).abs(),
        ];
        for (label, mag) in labels.iter().zip(deltas) {
            if mag > CLAMP_LOG_THRESHOLD {
                self.clamp_events.push(ClampEvent {
                    time: t,
                    stat: label.to_string(),
                    magnitude: mag,
                });
            }
        }
        clamped
    }

    /// One accepted adaptive step, not exceeding `t_stop`.
    fn step(&mut self, t_stop: f64) -> Result<()> {
        let remaining = t_stop - self.t;
        if remaining <= self.ctrl.dt_min {
            // Round-off remainder of the horizon; snap to it.
            self.t = t_stop;
            return Ok(());
        }
        let mut dt = self.ctrl.dt_init.min(remaining);
        loop {
            if dt < self.ctrl.dt_min {
                return Err(Error::numerical(format!(
                    "integrator step underflow at t = {} (state {:?})",
                    self.t, self.state
                )));
            }
            let full = rk4_step(self.state, self.delta, self.s, dt);
            let half = rk4_step(self.state, self.delta, self.s, dt / 2.0);
            let two_half = rk4_step(half, self.delta, self.s, dt / 2.0);
            let err = (full.0 - two_half.0)
                .abs()
                .max((full.1 - two_half.1).abs())
                .max((full.2 - two_half.2).abs());
            // Boundary handling. In the theorem regime the exact flow never
            // leaves the valid region, so a crossing is pure discretization
            // overshoot: treat it like a failed error test and retry with a
            // smaller step. Outside the regime the field can genuinely point
            // outward (v at delta > 0 with cos s theta < 0); once the
            // excursion is below the clamp-logging threshold, accept and project onto
            // the boundary, where the sliding-mode right-hand side keeps the
            // state without further excursions.
            let excursion = (-two_half.0)
                .max(two_half.1.abs() - 1.0)
                .max(-two_half.2)
                .max(0.0);
            if err <= self.ctrl.abs_tol
                && (excursion <= CLAMP_LOG_THRESHOLD || dt / 2.0 < self.ctrl.dt_min)
            {
                self.t += dt;
                self.state = self.clamp(two_half, self.t);
                return Ok(());
            }
            dt /= 2.0;
        }
    }
}

/// Integrates the flow from `state0` to time `t_max`, recording every
/// accepted step.
pub fn integrate_flow(
    state0: &SummaryStats,
    s: usize,
    t_max: f64,
    ctrl: StepControl,
) -> Result<Trajectory> {
    if t_max <= 0.0 {
        return Err(Error::validation("horizon must be positive"));
    }
    if s == 0 {
        return Err(Error::validation("information exponent s must be >= 1"));
    }
    let mut integ = Integrator::new(state0, s, ctrl);
    let mut times = vec![0.0];
    let mut states = vec![*state0];
    let mut events = Vec::new();
    let r0 = state0.r;
    let mut seen_search_end = r0 >= 2.0 * r0.max(1e-300) && r0 > 0.0;
    let mut seen_strong = r0 >= 0.9;
    while integ.t < t_max {
        integ.step(t_max)?;
        let snap = integ.snapshot();
        if !seen_search_end && r0 > 0.0 && snap.r >= 2.0 * r0 {
            events.push(PhaseEvent {
                label: "r_doubled".into(),
                time: integ.t,
            });
            seen_search_end = true;
        }
        if !seen_strong && snap.r >= 0.9 {
            events.push(PhaseEvent {
                label: "strong_recovery".into(),
                time: integ.t,
            });
            seen_strong = true;
        }
        times.push(integ.t);
        states.push(snap);
    }
    Ok(Trajectory {
        times,
        states,
        events,
        clamp_events: integ.clamp_events,
    })
}

/// First recorded time with `r >= 1 - eps`, `cos s theta >= 1 - eps`, and
/// `v <= eps` simultaneously; `None` if never within the horizon.
pub fn stopping_time(traj: &Trajectory, eps: f64) -> Result<Option<f64>> {
    if !(0.0..1.0).contains(&eps) || eps == 0.0 {
        return Err(Error::validation("eps must lie in (0, 1)"));
    }
    Ok(traj
        .times
        .iter()
        .zip(&traj.states)
        .find(|(_, st)| st.r >= 1.0 - eps && st.cos_s_theta >= 1.0 - eps && st.v <= eps)
        .map(|(&t, _)| t))
}

/// Theorem 4.2's time bound with the big-O constant set to 1: a reference
/// *scale* for order checks, never an absolute guarantee.
pub fn time_bound(s: usize, eps: f64, r0: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&eps) || eps == 0.0 {
        return Err(Error::validation("eps must lie in (0, 1)"));
    }
    if s == 0 {
        return Err(Error::validation("s must be >= 1"));
    }
    let log_term = (1.0 / eps).ln();
    if s == 1 {
        return Ok(log_term);
    }
    if r0 <= 0.0 {
        return Err(Error::validation("r0 must be positive for s > 1"));
    }
    Ok(2f64.powi((s * s) as i32) * r0.powi(-4 * s as i32) + log_term)
}

/// Lemma H.1's phase-alignment floor `cos(s theta_t) >= tanh(k t)`.
pub fn tanh_bound(k: f64, t: f64) -> Result<f64> {
    if k <= 0.0 {
        return Err(Error::validation("k must be positive"));
    }
    Ok((k * t).tanh())
}

/// Lemma H.2's escape-time bound for `dr/dt >= a r^{s-1} - b r^{2s-1}`:
/// `T <= (1/(b k^2)) (2k / r0^{s-1} + log(1/(1-k)))` with `k = a/b`.
pub fn bihari_bound(a: f64, b: f64, r0: f64, s: usize) -> Result<f64> {
    if !(a > 0.0 && a < b) {
        return Err(Error::validation("bihari bound requires 0 < a < b"));
    }
    if r0 <= 0.0 {
        return Err(Error::validation("r0 must be positive"));
    }
    let k = a / b;
    Ok((2.0 * k / r0.powi(s as i32 - 1) + (1.0 / (1.0 - k)).ln()) / (b * k * k))
}

/// Side-by-side run of the continuous flow and its Euler discretization in
/// `w`-space.
#[derive(Debug)]
pub struct FlowDescentComparison {
    pub ode: Trajectory,
    pub gd: Trajectory,
    pub max_r_deviation: f64,
}

/// Discrete preconditioned GD on the *population* loss, mapped through
/// summary statistics and compared against the integrated flow at matched
/// times `t = i eta`. The `1/(s |alpha_s|)` factor of Theorem 4.1 is applied
/// explicitly here so that one GD step of size `eta` matches flow time `eta`.
pub fn flow_vs_descent(
    w0: &Array1<C64>,
    student: &StudentSpec,
    teacher: &TeacherSpec,
    delta: f64,
    eta: f64,
    iters: usize,
    ctrl: StepControl,
) -> Result<FlowDescentComparison> {
    if eta <= 0.0 || iters == 0 {
        return Err(Error::validation("eta must be positive and iters >= 1"));
    }
    let s = student.info_exponent();
    let scale = eta / (s as f64 * teacher.alpha_s().norm());
    let pre = Preconditioner::from_feature_matrix(student.a_matrix())?;

    let state0 = summary_from_weights(w0, student, teacher, delta);
    let mut integ = Integrator::new(&state0, s, ctrl);

    let mut w = w0.clone();
    let mut times = vec![0.0];
    let mut gd_states = vec![state0];
    let mut ode_times = vec![0.0];
    let mut ode_states = vec![state0];
    let mut max_dev = 0.0f64;
    for i in 1..=iters {
        let grad = population_grad_l(student, teacher, &w);
        let step = pre.apply(&grad);
        w = &w - &step.mapv(|z| z * scale);
        let gd_state = summary_from_weights(&w, student, teacher, delta);
        if gd_state.r > 1e3 || gd_state.v > 1e3 {
            return Err(Error::numerical(format!(
                "descent diverged at iteration {i}: r = {}, v = {}",
                gd_state.r, gd_state.v
            )));
        }
        let t = i as f64 * eta;
        while integ.t < t - 1e-15 {
            integ.step(t)?;
        }
        let ode_state = integ.snapshot();
        max_dev = max_dev.max((ode_state.r - gd_state.r).abs());
        times.push(t);
        gd_states.push(gd_state);
        ode_times.push(integ.t);
        ode_states.push(ode_state);
    }
    Ok(FlowDescentComparison {
        ode: Trajectory {
            times: ode_times,
            states: ode_states,
            events: Vec::new(),
            clamp_events: integ.clamp_events,
        },
        gd: Trajectory {
            times,
            states: gd_states,
            events: Vec::new(),
            clamp_events: Vec::new(),
        },
        max_r_deviation: max_dev,
    })
}
