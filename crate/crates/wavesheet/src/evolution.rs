//! Time integration in both domains and both formulations.
//!
//! The state carries the curve and either the boundary potential Phi or the
//! vorticity amplitude w. Every right-hand side goes through a `Frame`: w, BR,
//! the metric Q (identically 1 in the physical domain) and the tangential
//! coefficient that keeps |z_a| independent of a.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::amplitude::{self, IntegralEquationSettings};
use crate::birkhoff_rott::{br_boundary, br_time_explicit, dot, DEFAULT_F_MAX};
use crate::conformal::{self, PlanePoint};
use crate::curve::{self, Domain, InterfaceCurve, MapDirection};
use crate::diagnostics::{self, DiagnosticsRecord};
use crate::error::{Error, Result};
use crate::spectral;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Formulation {
    Phi,
    Omega,
}

impl std::fmt::Display for Formulation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Formulation::Phi => "phi",
            Formulation::Omega => "omega",
        })
    }
}

impl std::str::FromStr for Formulation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "phi" => Ok(Formulation::Phi),
            "omega" => Ok(Formulation::Omega),
            _ => Err(Error::Config(format!("unknown formulation '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SheetState {
    pub curve: InterfaceCurve,
    pub formulation: Formulation,
    /// Phi on the curve, or w, depending on `formulation`.
    pub variable: Vec<f64>,
    pub time: f64,
}

impl SheetState {
    pub fn new(curve: InterfaceCurve, formulation: Formulation, variable: Vec<f64>, time: f64) -> Result<Self> {
        curve.grid.check(&variable)?;
        Ok(SheetState { curve, formulation, variable, time })
    }

    pub fn domain(&self) -> Domain {
        self.curve.domain
    }
}

/// Q^2, Q and grad Q at the nodes; Q = 1 and grad Q = 0 for physical curves.
#[derive(Debug, Clone)]
pub struct Metric {
    pub q2: Vec<f64>,
    pub q: Vec<f64>,
    pub grad_q: Vec<Complex64>,
}

pub fn metric(curve: &InterfaceCurve) -> Result<Metric> {
    let n = curve.n();
    match curve.domain {
        Domain::Physical => Ok(Metric { q2: vec![1.0; n], q: vec![1.0; n], grad_q: vec![Complex64::new(0.0, 0.0); n] }),
        Domain::Tilde => {
            let mut m = Metric { q2: Vec::with_capacity(n), q: Vec::with_capacity(n), grad_q: Vec::with_capacity(n) };
            for p in curve.points() {
                let d = conformal::q_data(PlanePoint::from(p))?;
                if !d.grad_q[0].is_finite() {
                    return Err(Error::Singular { x: p.re, y: p.im, which: 0 });
                }
                m.q2.push(d.q_squared);
                m.q.push(d.q_squared.sqrt());
                m.grad_q.push(Complex64::new(d.grad_q[0], d.grad_q[1]));
            }
            Ok(m)
        }
    }
}

/// Physical height of each node and its gradient (P2^-1 in the tilde plane).
pub fn height_and_gradient(curve: &InterfaceCurve) -> Result<(Vec<f64>, Vec<Complex64>)> {
    match curve.domain {
        Domain::Physical => Ok((curve.z2.clone(), vec![Complex64::new(0.0, 1.0); curve.n()])),
        Domain::Tilde => {
            let mut h = Vec::with_capacity(curve.n());
            let mut gr = Vec::with_capacity(curve.n());
            for p in curve.points() {
                let w = PlanePoint::from(p);
                h.push(conformal::p2_inverse(w)?);
                let g = conformal::grad_p2_inverse(w)?;
                gr.push(Complex64::new(g[0], g[1]));
            }
            Ok((h, gr))
        }
    }
}

/// Everything one right-hand side evaluation shares.
#[derive(Debug, Clone)]
pub struct Frame {
    pub z_alpha: Vec<Complex64>,
    pub speed_sq: Vec<f64>,
    pub omega: Vec<f64>,
    pub phi_alpha: Vec<f64>,
    pub br: Vec<Complex64>,
    pub metric: Metric,
    /// Integrand (Q^2 BR)_a . z_a / |z_a|^2 of the tangential term.
    pub integrand: Vec<f64>,
    pub c_tilde: Vec<f64>,
    pub b: f64,
    pub u_tilde: Vec<Complex64>,
    pub z_t: Vec<Complex64>,
    pub solve_residual: f64,
}

fn cderiv(v: &[Complex64]) -> Result<Vec<Complex64>> {
    let re: Vec<f64> = v.iter().map(|c| c.re).collect();
    let im: Vec<f64> = v.iter().map(|c| c.im).collect();
    let (dr, di) = (spectral::derivative(&re, 1)?, spectral::derivative(&im, 1)?);
    Ok(dr.iter().zip(&di).map(|(a, b)| Complex64::new(*a, *b)).collect())
}

pub fn frame(state: &SheetState, settings: &IntegralEquationSettings) -> Result<Frame> {
    let curve = &state.curve;
    let z_alpha = curve.z_alpha()?;
    let speed_sq: Vec<f64> = z_alpha.iter().map(|v| v.norm_sqr()).collect();
    let (omega, phi_alpha, solve_residual, br) = match state.formulation {
        Formulation::Phi => {
            let phi_alpha = spectral::derivative(&state.variable, 1)?;
            let s = amplitude::solve_omega_from_phi(curve, &phi_alpha, settings)?;
            let br = br_boundary(curve, &s.values, DEFAULT_F_MAX)?;
            (s.values, phi_alpha, s.residual, br)
        }
        Formulation::Omega => {
            let omega = state.variable.clone();
            let br = br_boundary(curve, &omega, DEFAULT_F_MAX)?;
            let phi_alpha = omega.iter().zip(br.iter().zip(&z_alpha)).map(|(w, (b, t))| 0.5 * w + dot(*b, *t)).collect();
            (omega, phi_alpha, 0.0, br)
        }
    };
    let metric = metric(curve)?;
    let q2br: Vec<Complex64> = br.iter().zip(&metric.q2).map(|(b, q)| b * *q).collect();
    let dq2br = cderiv(&q2br)?;
    let integrand: Vec<f64> = dq2br.iter().zip(z_alpha.iter().zip(&speed_sq)).map(|(d, (t, s))| dot(*d, *t) / s).collect();
    let b = spectral::mean(&integrand);
    let g = spectral::antiderivative(&integrand)?;
    let c_tilde: Vec<f64> = g.iter().map(|v| g[0] - v).collect();
    let u_tilde: Vec<Complex64> = (0..curve.n()).map(|j| br[j] + z_alpha[j] * (0.5 * omega[j] / speed_sq[j])).collect();
    let z_t: Vec<Complex64> = (0..curve.n()).map(|j| q2br[j] + z_alpha[j] * c_tilde[j]).collect();
    Ok(Frame { z_alpha, speed_sq, omega, phi_alpha, br, metric, integrand, c_tilde, b, u_tilde, z_t, solve_residual })
}

/// Tangential coefficient keeping |z_a| uniform.
pub fn tangential_c(state: &SheetState, settings: &IntegralEquationSettings) -> Result<Vec<f64>> {
    Ok(frame(state, settings)?.c_tilde)
}

/// Mean of the tangential integrand; d|z_a|^2/dt = 2 B |z_a|^2.
pub fn b_of_t(state: &SheetState, settings: &IntegralEquationSettings) -> Result<f64> {
    Ok(frame(state, settings)?.b)
}

/// phi = Q^2 w / (2|z_a|) - c |z_a|.
pub fn phi_gauge(f: &Frame) -> Vec<f64> {
    (0..f.omega.len())
        .map(|j| {
            let s = f.speed_sq[j].sqrt();
            f.metric.q2[j] * f.omega[j] / (2.0 * s) - f.c_tilde[j] * s
        })
        .collect()
}

/// Time derivative of Phi along the parametrization.
pub fn phi_t(curve: &InterfaceCurve, f: &Frame, gravity: f64) -> Result<Vec<f64>> {
    let (height, _) = height_and_gradient(curve)?;
    Ok((0..curve.n())
        .map(|j| {
            let c = f.c_tilde[j] - 0.5 * f.metric.q2[j] * f.omega[j] / f.speed_sq[j];
            0.5 * f.metric.q2[j] * f.u_tilde[j].norm_sqr() + c * dot(f.u_tilde[j], f.z_alpha[j]) - gravity * height[j]
        })
        .collect())
}

pub fn rhs_phi_formulation(
    state: &SheetState,
    gravity: f64,
    settings: &IntegralEquationSettings,
) -> Result<(Vec<Complex64>, Vec<f64>)> {
    if state.formulation != Formulation::Phi {
        return Err(Error::Validation("state does not carry Phi".into()));
    }
    let f = frame(state, settings)?;
    let pt = phi_t(&state.curve, &f, gravity)?;
    Ok((f.z_t, pt))
}

/// Right-hand side of (I+J) w_t = rest, with every term except BR(z, w_t).z_a.
pub fn omega_t_rest(curve: &InterfaceCurve, f: &Frame, gravity: f64) -> Result<Vec<f64>> {
    let n = curve.n();
    let e = br_time_explicit(curve, &f.omega, &f.z_t)?;
    let (_, grad_h) = height_and_gradient(curve)?;
    let phi = phi_gauge(f);
    let phi2q: Vec<f64> = phi.iter().zip(&f.metric.q2).map(|(p, q)| p * p / q).collect();
    let d_phi2q = spectral::derivative(&phi2q, 1)?;
    Ok((0..n)
        .map(|j| {
            let (q, q2) = (f.metric.q[j], f.metric.q2[j]);
            let q_a = dot(f.metric.grad_q[j], f.z_alpha[j]);
            let c = f.c_tilde[j];
            let s2 = f.speed_sq[j];
            -2.0 * dot(e[j], f.z_alpha[j]) - 2.0 * q * q_a * f.br[j].norm_sqr() - d_phi2q[j] + 2.0 * c * f.b * s2 / q2
                - 4.0 * c * q_a * dot(f.br[j], f.z_alpha[j]) / q
                - 2.0 * c * c * s2 * q_a / (q2 * q)
                - 2.0 * gravity * dot(grad_h[j], f.z_alpha[j])
        })
        .collect())
}

/// Parametrization-free form of the same right-hand side,
/// 2 (Phi_t)_a - 2 E.z_a - 2 BR.(z_t)_a. Slower, used by the diagnostics.
pub fn omega_t_rest_general(curve: &InterfaceCurve, f: &Frame, gravity: f64) -> Result<Vec<f64>> {
    let e = br_time_explicit(curve, &f.omega, &f.z_t)?;
    let d_pt = spectral::derivative(&phi_t(curve, f, gravity)?, 1)?;
    let re: Vec<f64> = f.z_t.iter().map(|v| v.re).collect();
    let im: Vec<f64> = f.z_t.iter().map(|v| v.im).collect();
    let (dre, dim) = (spectral::derivative(&re, 1)?, spectral::derivative(&im, 1)?);
    Ok((0..curve.n())
        .map(|j| 2.0 * d_pt[j] - 2.0 * dot(e[j], f.z_alpha[j]) - 2.0 * dot(f.br[j], Complex64::new(dre[j], dim[j])))
        .collect())
}

pub fn omega_t_from_frame(
    curve: &InterfaceCurve,
    f: &Frame,
    gravity: f64,
    settings: &IntegralEquationSettings,
) -> Result<Vec<f64>> {
    let rest = omega_t_rest(curve, f, gravity)?;
    Ok(amplitude::solve_omega_t(curve, &rest, settings)?.values)
}

pub fn rhs_omega_formulation(
    state: &SheetState,
    gravity: f64,
    settings: &IntegralEquationSettings,
) -> Result<(Vec<Complex64>, Vec<f64>)> {
    if state.formulation != Formulation::Omega {
        return Err(Error::Validation("state does not carry w".into()));
    }
    let f = frame(state, settings)?;
    let wt = omega_t_from_frame(&state.curve, &f, gravity, settings)?;
    Ok((f.z_t, wt))
}

fn derivatives(state: &SheetState, gravity: f64, settings: &IntegralEquationSettings) -> Result<(Vec<Complex64>, Vec<f64>)> {
    match state.formulation {
        Formulation::Phi => rhs_phi_formulation(state, gravity, settings),
        Formulation::Omega => rhs_omega_formulation(state, gravity, settings),
    }
}

pub fn time_reverse(state: &SheetState) -> SheetState {
    let mut s = state.clone();
    s.variable.iter_mut().for_each(|v| *v = -*v);
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StopConditions {
    /// Physical touch gap; None disables gap tracking.
    pub splash_gap: Option<f64>,
    /// Parameter exclusion used when measuring the gap.
    pub gap_exclusion: f64,
    pub q_margin: f64,
    /// min Q^2 sigma below this is reported but not fatal.
    pub sigma_warn: f64,
    pub sigma_hard: f64,
    pub arc_chord_max: f64,
}

impl Default for StopConditions {
    fn default() -> Self {
        StopConditions {
            splash_gap: None,
            gap_exclusion: 1.0,
            q_margin: 1e-2,
            sigma_warn: 0.0,
            sigma_hard: -1e-3,
            arc_chord_max: 1e6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepperConfig {
    pub dt: f64,
    pub t_end: f64,
    pub filter_threshold: f64,
    pub gravity: f64,
    pub stop: StopConditions,
    pub solver: IntegralEquationSettings,
    pub cfl: f64,
    pub uniformity_tol: f64,
    pub max_halvings: u32,
    /// Diagnostics cadence in accepted steps; 0 disables records.
    pub record_every: usize,
}

impl Default for StepperConfig {
    fn default() -> Self {
        StepperConfig {
            dt: 1e-3,
            t_end: 1.0,
            filter_threshold: 1e-13,
            gravity: 1.0,
            stop: StopConditions::default(),
            solver: IntegralEquationSettings::default(),
            cfl: 0.5,
            uniformity_tol: 1e-8,
            max_halvings: 10,
            record_every: 1,
        }
    }
}

impl StepperConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.t_end.is_finite() {
            return Err(Error::Config("dt must be positive and t_end finite".into()));
        }
        if !(self.filter_threshold >= 0.0) || !(self.gravity >= 0.0) {
            return Err(Error::Config("filter_threshold and gravity must be nonnegative".into()));
        }
        self.solver.check()
    }
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub state: SheetState,
    pub dt_used: f64,
    pub rejections: u32,
}

/// max |z_t| / |z_a| * dt / h.
pub fn cfl_number(curve: &InterfaceCurve, z_t: &[Complex64], dt: f64) -> Result<f64> {
    let za = curve.z_alpha()?;
    let v = z_t.iter().zip(&za).map(|(a, b)| a.norm() / b.norm()).fold(0.0, f64::max);
    Ok(v * dt / curve.grid.h())
}

fn advance(state: &SheetState, k: &(Vec<Complex64>, Vec<f64>), dt: f64) -> Result<SheetState> {
    let c = &state.curve;
    let z1 = c.z1.iter().zip(&k.0).map(|(x, v)| x + dt * v.re).collect();
    let z2 = c.z2.iter().zip(&k.0).map(|(y, v)| y + dt * v.im).collect();
    let var = state.variable.iter().zip(&k.1).map(|(x, v)| x + dt * v).collect();
    Ok(SheetState {
        curve: InterfaceCurve::new(c.domain, z1, z2)?,
        formulation: state.formulation,
        variable: var,
        time: state.time + dt,
    })
}

fn rk4_combine(state: &SheetState, ks: &[(Vec<Complex64>, Vec<f64>); 4], dt: f64, filter: f64) -> Result<SheetState> {
    let n = state.curve.n();
    let w = [1.0, 2.0, 2.0, 1.0];
    let mut z1 = state.curve.z1.clone();
    let mut z2 = state.curve.z2.clone();
    let mut var = state.variable.clone();
    for j in 0..n {
        let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
        for (k, wk) in ks.iter().zip(w) {
            a += wk * k.0[j].re;
            b += wk * k.0[j].im;
            c += wk * k.1[j];
        }
        z1[j] += dt / 6.0 * a;
        z2[j] += dt / 6.0 * b;
        var[j] += dt / 6.0 * c;
    }
    let curve = InterfaceCurve::new(
        state.curve.domain,
        spectral::krasny_filter(&z1, filter)?,
        spectral::krasny_filter(&z2, filter)?,
    )?;
    Ok(SheetState { curve, formulation: state.formulation, variable: spectral::krasny_filter(&var, filter)?, time: state.time + dt })
}

/// One classical RK4 step with rejection and halving on CFL or uniformity failure.
pub fn rk4_step(state: &SheetState, dt: f64, cfg: &StepperConfig) -> Result<StepOutcome> {
    let k1 = derivatives(state, cfg.gravity, &cfg.solver)?;
    // under-resolved initial data may start above the tolerance; a step must not add to it
    let start = state.curve.uniformity_spread()?;
    let mut dt = dt;
    let mut rejections = 0;
    loop {
        let reason = if cfl_number(&state.curve, &k1.0, dt)? > cfg.cfl {
            Some("CFL bound exceeded".to_string())
        } else {
            let k2 = derivatives(&advance(state, &k1, 0.5 * dt)?, cfg.gravity, &cfg.solver)?;
            let k3 = derivatives(&advance(state, &k2, 0.5 * dt)?, cfg.gravity, &cfg.solver)?;
            let k4 = derivatives(&advance(state, &k3, dt)?, cfg.gravity, &cfg.solver)?;
            let next = rk4_combine(state, &[k1.clone(), k2, k3, k4], dt, cfg.filter_threshold)?;
            let spread = next.curve.uniformity_spread()?;
            if spread <= cfg.uniformity_tol || spread - start <= cfg.uniformity_tol {
                return Ok(StepOutcome { state: next, dt_used: dt, rejections });
            }
            Some(format!("|z_a| spread {spread:e} above tolerance"))
        };
        rejections += 1;
        if rejections > cfg.max_halvings {
            return Err(Error::StepRejected { dt, reason: reason.unwrap_or_default() });
        }
        dt *= 0.5;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum Termination {
    EndTime,
    SplashGap { gap: f64 },
    QMargin { index: usize, distance: f64 },
    Sigma { min_q2_sigma: f64 },
    ArcChord { sup_f: f64 },
    Aborted { message: String },
}

impl Termination {
    pub fn is_abort(&self) -> bool {
        matches!(self, Termination::Aborted { .. })
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub termination: Termination,
    pub final_state: SheetState,
    pub records: Vec<DiagnosticsRecord>,
    /// (t, physical gap) when gap tracking is on.
    pub gaps: Vec<(f64, f64)>,
    pub steps: usize,
    pub rejections: u32,
    pub sigma_warnings: usize,
}

/// What an observer sees after the initial state and every accepted step.
pub struct StepView<'a> {
    pub step: usize,
    pub state: &'a SheetState,
    pub record: Option<&'a DiagnosticsRecord>,
    /// Gap history including this step, when gap tracking is on.
    pub gaps: &'a [(f64, f64)],
    pub dt_used: f64,
    pub rejections: u32,
    pub sigma_warnings: usize,
}

impl StepView<'_> {
    /// Loop state to resume from this point.
    pub fn resume_point(&self) -> RunStart {
        RunStart {
            step: self.step,
            gaps: self.gaps.to_vec(),
            dt_used: self.dt_used,
            rejections: self.rejections,
            sigma_warnings: self.sigma_warnings,
        }
    }
}

pub trait Observer {
    fn on_step(&mut self, _view: &StepView) -> Result<()> {
        Ok(())
    }
}

impl Observer for () {}

/// Physical touch gap of a state, measured on the mapped-back curve.
pub fn physical_gap(state: &SheetState, exclusion: f64) -> Result<f64> {
    let phys = match state.curve.domain {
        Domain::Physical => state.curve.clone(),
        Domain::Tilde => curve::map_curve(&state.curve, MapDirection::ToPhysical)?,
    };
    Ok(curve::refined_min_separated_distance(&phys, exclusion)?.0)
}

fn check_stops(state: &SheetState, cfg: &StepperConfig, gaps: &mut Vec<(f64, f64)>) -> Result<Option<Termination>> {
    let stop = &cfg.stop;
    if let Some(th) = stop.splash_gap {
        let g = physical_gap(state, stop.gap_exclusion)?;
        let decreasing = gaps.last().map(|(_, p)| g < *p).unwrap_or(false);
        gaps.push((state.time, g));
        if g < th && decreasing {
            return Ok(Some(Termination::SplashGap { gap: g }));
        }
    }
    if state.curve.domain == Domain::Tilde {
        let m = conformal::min_distance_to_q(&state.curve.points());
        if let Some((index, d)) = m.iter().copied().enumerate().find(|(_, d)| *d < stop.q_margin) {
            return Ok(Some(Termination::QMargin { index, distance: d }));
        }
    }
    let f = curve::arc_chord(&state.curve).sup_f;
    if !(f <= stop.arc_chord_max) {
        return Ok(Some(Termination::ArcChord { sup_f: f }));
    }
    Ok(None)
}

/// Integrate to t_end or until a stop condition fires.
pub fn run(initial: &SheetState, cfg: &StepperConfig, observer: &mut dyn Observer) -> Result<RunResult> {
    run_from(initial, cfg, observer, RunStart::default())
}

/// Loop state carried over when resuming from a checkpoint.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunStart {
    pub step: usize,
    pub gaps: Vec<(f64, f64)>,
    /// Step size that produced the initial state (0 at the start of a run).
    pub dt_used: f64,
    pub rejections: u32,
    pub sigma_warnings: usize,
}

/// As `run`, continuing from a checkpointed loop state. The observer sees the
/// initial state again, with the record it saw before the checkpoint.
pub fn run_from(initial: &SheetState, cfg: &StepperConfig, observer: &mut dyn Observer, start: RunStart) -> Result<RunResult> {
    cfg.check()?;
    let mut state = initial.clone();
    let mut out = RunResult {
        termination: Termination::EndTime,
        final_state: state.clone(),
        records: Vec::new(),
        gaps: start.gaps,
        steps: start.step,
        rejections: start.rejections,
        sigma_warnings: start.sigma_warnings,
    };
    let dcfg = diagnostics::DiagnosticsConfig { gravity: cfg.gravity, solver: cfg.solver };
    let mut dt_used = start.dt_used;
    let mut resumed = out.steps > 0;
    loop {
        let step = out.steps;
        let mut record = None;
        if cfg.record_every > 0 && step % cfg.record_every == 0 {
            match diagnostics::record(&state, &dcfg, dt_used) {
                Ok(r) => {
                    if r.min_q2_sigma < cfg.stop.sigma_warn && !resumed {
                        out.sigma_warnings += 1;
                    }
                    let hard = r.min_q2_sigma < cfg.stop.sigma_hard;
                    out.records.push(r.clone());
                    record = Some(r);
                    if hard {
                        out.termination = Termination::Sigma { min_q2_sigma: record.as_ref().map(|r| r.min_q2_sigma).unwrap_or(f64::NAN) };
                    }
                }
                Err(e) => out.termination = Termination::Aborted { message: e.to_string() },
            }
        }
        // a resumed state went through the stop checks before the checkpoint
        if out.termination == Termination::EndTime && !resumed {
            match check_stops(&state, cfg, &mut out.gaps) {
                Ok(Some(t)) => out.termination = t,
                Ok(None) => {}
                Err(e) => out.termination = Termination::Aborted { message: e.to_string() },
            }
        }
        let view = StepView {
            step,
            state: &state,
            record: record.as_ref(),
            gaps: &out.gaps,
            dt_used,
            rejections: out.rejections,
            sigma_warnings: out.sigma_warnings,
        };
        observer.on_step(&view)?;
        resumed = false;
        if out.termination != Termination::EndTime {
            break;
        }
        let remaining = cfg.t_end - state.time;
        if remaining <= 1e-9 * cfg.dt {
            break;
        }
        let dt = cfg.dt.min(remaining);
        match rk4_step(&state, dt, cfg) {
            Ok(o) => {
                out.rejections += o.rejections;
                dt_used = o.dt_used;
                state = o.state;
                out.steps += 1;
            }
            Err(e) => {
                out.termination = Termination::Aborted { message: e.to_string() };
                break;
            }
        }
    }
    out.final_state = state;
    Ok(out)
}

// ----- initial data -----

/// Reparametrize a curve to uniform |z_a|, resampling a field carried with it.
pub fn uniformize(curve: &InterfaceCurve, field: &[f64]) -> Result<(InterfaceCurve, Vec<f64>)> {
    let (c, src) = curve::reparametrize_uniform(curve)?;
    let f = curve::resample_field(field, &src)?;
    Ok((c, f))
}

/// Fluid at rest: Phi = 0 and w = 0.
pub fn rest_state(curve: &InterfaceCurve, formulation: Formulation) -> Result<SheetState> {
    let (c, _) = curve::reparametrize_uniform(curve)?;
    let n = c.n();
    SheetState::new(c, formulation, vec![0.0; n], 0.0)
}

/// Physical z = (a, height + eps cos(k a)) at rest, optionally mapped to the tilde plane.
pub fn standing_wave_state(
    n: usize,
    eps: f64,
    k: f64,
    height: f64,
    domain: Domain,
    formulation: Formulation,
) -> Result<SheetState> {
    let c = InterfaceCurve::standing_wave(n, eps, k, height)?;
    let c = match domain {
        Domain::Physical => c,
        Domain::Tilde => curve::map_curve(&c, MapDirection::ToTilde)?,
    };
    rest_state(&c, formulation)
}

/// Two raised-cosine bumps of normal velocity centred at the touch parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TouchVelocity {
    pub a1: f64,
    pub a2: f64,
    pub power: f64,
}

impl Default for TouchVelocity {
    fn default() -> Self {
        TouchVelocity { a1: -1.0, a2: -1.0, power: 8.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialDataReport {
    /// Flux of the normal velocity on the physical curve (must vanish).
    pub flux: f64,
    /// Normal velocity at the two touch parameters (must be negative).
    pub u_normal_at_touch: [f64; 2],
    pub normal_data_residual: f64,
    pub null_dimension: usize,
    /// Mean of Phi_a reconstructed from w; zero for a consistent gauge.
    pub phi_alpha_mean: f64,
}

/// Zero-flux normal velocity on a physical curve, from the bump profile.
pub fn touch_normal_velocity(curve: &InterfaceCurve, alpha_c: f64, v: &TouchVelocity) -> Result<Vec<f64>> {
    let speed: Vec<f64> = curve.z_alpha()?.iter().map(|t| t.norm()).collect();
    let bump = |a: f64, c: f64| (0.5 * (1.0 + (a - c).cos())).powf(v.power);
    let u: Vec<f64> = curve.grid.alphas().iter().map(|a| v.a1 * bump(*a, alpha_c) + v.a2 * bump(*a, -alpha_c)).collect();
    let num: f64 = u.iter().zip(&speed).map(|(a, b)| a * b).sum();
    let den: f64 = speed.iter().sum();
    Ok(u.iter().map(|x| x - num / den).collect())
}

/// Initial state for a touching (or nearly touching) curve with separating
/// normal velocity. The velocity is prescribed on the physical curve, carried
/// to the computational curve as a flux density, and turned into w by the
/// normal-data solve.
pub fn touch_state(
    physical: &InterfaceCurve,
    alpha_c: f64,
    velocity: &TouchVelocity,
    domain: Domain,
    formulation: Formulation,
    settings: &IntegralEquationSettings,
) -> Result<(SheetState, InitialDataReport)> {
    if physical.domain != Domain::Physical {
        return Err(Error::Validation("touch data is built from a physical curve".into()));
    }
    let un = touch_normal_velocity(physical, alpha_c, velocity)?;
    let speed: Vec<f64> = physical.z_alpha()?.iter().map(|t| t.norm()).collect();
    let density: Vec<f64> = un.iter().zip(&speed).map(|(u, s)| u * s).collect();
    let flux = spectral::mean(&density) * 2.0 * PI;
    let at = |a: f64| -> Result<f64> { Ok(curve::resample_field(&un, &[a])?[0]) };
    let touch = [at(alpha_c)?, at(-alpha_c)?];

    let comp = match domain {
        Domain::Physical => physical.clone(),
        Domain::Tilde => curve::map_curve(physical, MapDirection::ToTilde)?,
    };
    let (uni, src) = curve::reparametrize_uniform(&comp)?;
    // flux density transforms with ds/da of the source map
    let shift: Vec<f64> = src.iter().zip(uni.grid.alphas()).map(|(s, a)| s - a).collect();
    let ds: Vec<f64> = spectral::derivative(&shift, 1)?.iter().map(|d| 1.0 + d).collect();
    let mut dens: Vec<f64> = curve::resample_field(&density, &src)?.iter().zip(&ds).map(|(f, d)| f * d).collect();
    let m = spectral::mean(&dens);
    dens.iter_mut().for_each(|v| *v -= m);
    let uspeed: Vec<f64> = uni.z_alpha()?.iter().map(|t| t.norm()).collect();
    let un_comp: Vec<f64> = dens.iter().zip(&uspeed).map(|(f, s)| f / s).collect();

    let sol = amplitude::solve_omega_from_normal_velocity(&uni, &un_comp, settings)?;
    let omega = sol.solution.values;
    let br = br_boundary(&uni, &omega, DEFAULT_F_MAX)?;
    let za = uni.z_alpha()?;
    let phi_alpha: Vec<f64> = omega.iter().zip(br.iter().zip(&za)).map(|(w, (b, t))| 0.5 * w + dot(*b, *t)).collect();
    let report = InitialDataReport {
        flux,
        u_normal_at_touch: touch,
        normal_data_residual: sol.solution.residual,
        null_dimension: sol.null_dimension,
        phi_alpha_mean: spectral::mean(&phi_alpha),
    };
    let variable = match formulation {
        Formulation::Omega => omega,
        Formulation::Phi => spectral::antiderivative(&phi_alpha)?,
    };
    Ok((SheetState::new(uni, formulation, variable, 0.0)?, report))
}

/// Sign condition: both touch points move into the water.
pub fn check_touch_report(r: &InitialDataReport) -> Result<()> {
    if r.flux.abs() > 1e-10 {
        return Err(Error::Compatibility { flux: r.flux });
    }
    if !(r.u_normal_at_touch[0] < 0.0 && r.u_normal_at_touch[1] < 0.0) {
        return Err(Error::Validation(format!(
            "normal velocity at the touch points must be negative, got {:.6e} and {:.6e}",
            r.u_normal_at_touch[0], r.u_normal_at_touch[1]
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn settings() -> IntegralEquationSettings {
        IntegralEquationSettings::default()
    }

    fn sup(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    fn wavy_phi_state(n: usize, domain: Domain) -> SheetState {
        let s = standing_wave_state(n, 0.1, 1.0, if domain == Domain::Tilde { -1.0 } else { 0.0 }, domain, Formulation::Phi)
            .unwrap();
        let g = s.curve.grid;
        let phi: Vec<f64> = g.alphas().iter().map(|a| 0.05 * (2.0 * a).sin() + 0.02 * a.cos()).collect();
        SheetState { variable: phi, ..s }
    }

    fn to_omega(s: &SheetState) -> SheetState {
        let f = frame(s, &settings()).unwrap();
        SheetState { formulation: Formulation::Omega, variable: f.omega, ..s.clone() }
    }

    #[test]
    fn flat_rest_is_steady() {
        let s = rest_state(&InterfaceCurve::flat(32, 0.0).unwrap(), Formulation::Phi).unwrap();
        let (zt, pt) = rhs_phi_formulation(&s, 1.0, &settings()).unwrap();
        assert!(zt.iter().all(|v| v.norm() == 0.0));
        assert!(pt.iter().all(|v| *v == 0.0));
        let s = SheetState { formulation: Formulation::Omega, ..s };
        let (zt, wt) = rhs_omega_formulation(&s, 1.0, &settings()).unwrap();
        assert!(zt.iter().all(|v| v.norm() == 0.0));
        assert!(wt.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn elevated_flat_has_constant_phi_t() {
        let s = rest_state(&InterfaceCurve::flat(32, 0.7).unwrap(), Formulation::Phi).unwrap();
        let (zt, pt) = rhs_phi_formulation(&s, 1.0, &settings()).unwrap();
        assert!(zt.iter().all(|v| v.norm() == 0.0));
        assert!(pt.iter().all(|v| (*v + 0.7).abs() < 1e-15));
    }

    #[test]
    fn zero_velocity_without_gravity_is_static() {
        let s = standing_wave_state(64, 0.2, 1.0, 0.0, Domain::Physical, Formulation::Omega).unwrap();
        let (zt, wt) = rhs_omega_formulation(&s, 0.0, &settings()).unwrap();
        assert!(zt.iter().all(|v| v.norm() < 1e-15));
        assert!(wt.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn tangential_term_examples() {
        let flat = rest_state(&InterfaceCurve::flat(32, 0.0).unwrap(), Formulation::Omega).unwrap();
        let flat = SheetState { variable: flat.curve.grid.alphas().iter().map(|a| 1.0 + a.cos()).collect(), ..flat };
        // BR is purely vertical on a flat sheet, so the integrand vanishes
        assert!(tangential_c(&flat, &settings()).unwrap().iter().all(|v| v.abs() < 1e-13));

        // uniform circle with Q = 1: BR_a is normal to z_a, so the integrand vanishes
        let circ = InterfaceCurve::circle(64, Complex64::new(0.0, 0.0), 1.0, true).unwrap();
        let s = SheetState::new(circ.clone(), Formulation::Omega, vec![0.8; 64], 0.0).unwrap();
        let br = br_boundary(&circ, &s.variable, DEFAULT_F_MAX).unwrap();
        let dbr = cderiv(&br).unwrap();
        let za = circ.z_alpha().unwrap();
        assert!(dbr.iter().zip(&za).all(|(d, t)| dot(*d, *t).abs() < 1e-12));
        let zero = SheetState::new(circ, Formulation::Omega, vec![0.0; 64], 0.0).unwrap();
        assert_eq!(b_of_t(&zero, &settings()).unwrap(), 0.0);
    }

    #[test]
    fn b_matches_refined_quadrature() {
        let s = to_omega(&wavy_phi_state(128, Domain::Physical));
        let b = b_of_t(&s, &settings()).unwrap();
        let fine = 512;
        let c = InterfaceCurve::new(
            Domain::Physical,
            spectral::resample(&s.curve.z1, fine).unwrap(),
            spectral::resample(&s.curve.z2, fine).unwrap(),
        )
        .unwrap();
        let w = spectral::resample(&s.variable, fine).unwrap();
        let fs = SheetState::new(c, Formulation::Omega, w, 0.0).unwrap();
        let bf = b_of_t(&fs, &settings()).unwrap();
        assert!((b - bf).abs() < 1e-10, "{b} {bf}");
    }

    #[test]
    fn phi_gauge_on_uniform_circle() {
        let (r, w0) = (1.5, 0.6);
        let circ = InterfaceCurve::circle(64, Complex64::new(0.0, 0.0), r, true).unwrap();
        let s = SheetState::new(circ, Formulation::Omega, vec![w0; 64], 0.0).unwrap();
        let mut f = frame(&s, &settings()).unwrap();
        f.metric.q2 = vec![1.0; 64];
        f.c_tilde = vec![0.0; 64];
        assert!(phi_gauge(&f).iter().all(|p| (p - w0 / (2.0 * r)).abs() < 1e-13));
    }

    /// The expanded w_t right-hand side must equal the one obtained by
    /// differentiating Phi_a = w/2 + BR.z_a in time.
    fn check_rest_against_phi_t(s: &SheetState) {
        let g = 1.3;
        let f = frame(s, &settings()).unwrap();
        let rest = omega_t_rest(&s.curve, &f, g).unwrap();
        let pt = phi_t(&s.curve, &f, g).unwrap();
        let dpt = spectral::derivative(&pt, 1).unwrap();
        let e = br_time_explicit(&s.curve, &f.omega, &f.z_t).unwrap();
        let zat = cderiv(&f.z_t).unwrap();
        let oracle: Vec<f64> =
            (0..s.curve.n()).map(|j| 2.0 * dpt[j] - 2.0 * dot(e[j], f.z_alpha[j]) - 2.0 * dot(f.br[j], zat[j])).collect();
        let scale = oracle.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        assert!(sup(&rest, &oracle) < 1e-9 * scale, "{}", sup(&rest, &oracle));
        let general = omega_t_rest_general(&s.curve, &f, g).unwrap();
        assert!(sup(&general, &oracle) < 1e-12 * scale);
    }

    #[test]
    fn expanded_rest_matches_differentiated_potential() {
        check_rest_against_phi_t(&to_omega(&wavy_phi_state(128, Domain::Physical)));
        check_rest_against_phi_t(&to_omega(&wavy_phi_state(128, Domain::Tilde)));
    }

    #[test]
    fn formulations_agree_after_one_step() {
        for domain in [Domain::Physical, Domain::Tilde] {
            let sp = wavy_phi_state(128, domain);
            let so = to_omega(&sp);
            let cfg = StepperConfig { dt: 1e-4, ..Default::default() };
            let a = rk4_step(&sp, 1e-4, &cfg).unwrap().state;
            let b = rk4_step(&so, 1e-4, &cfg).unwrap().state;
            let d = sup(&a.curve.z1, &b.curve.z1).max(sup(&a.curve.z2, &b.curve.z2));
            assert!(d <= 1e-10, "{domain}: {d}");
        }
    }

    #[test]
    fn step_keeps_parametrization_uniform() {
        let s = wavy_phi_state(128, Domain::Physical);
        let cfg = StepperConfig { dt: 1e-3, ..Default::default() };
        let o = rk4_step(&s, 1e-3, &cfg).unwrap();
        assert!(o.state.curve.uniformity_spread().unwrap() <= 1e-8);
        assert_eq!(o.rejections, 0);
    }

    #[test]
    fn cfl_violation_halves_the_step() {
        let s = wavy_phi_state(64, Domain::Physical);
        let f = frame(&s, &settings()).unwrap();
        let cfg = StepperConfig::default();
        // pick dt at twice the CFL limit
        let unit = cfl_number(&s.curve, &f.z_t, 1.0).unwrap();
        let dt = 2.0 * cfg.cfl / unit;
        let o = rk4_step(&s, dt, &cfg).unwrap();
        assert!(o.rejections >= 1);
        assert!(cfl_number(&s.curve, &f.z_t, o.dt_used).unwrap() <= cfg.cfl);
    }

    #[test]
    fn reversal_examples() {
        let s = wavy_phi_state(32, Domain::Physical);
        assert_eq!(time_reverse(&time_reverse(&s)), s);
        let rest = rest_state(&InterfaceCurve::flat(32, 0.0).unwrap(), Formulation::Omega).unwrap();
        assert_eq!(time_reverse(&rest).variable.iter().map(|v| v.abs()).sum::<f64>(), 0.0);
        assert_eq!(time_reverse(&rest).curve, rest.curve);
    }

    #[test]
    fn rk4_is_fourth_order() {
        let s = wavy_phi_state(64, Domain::Physical);
        let t_end = 0.04;
        let solve = |dt: f64| {
            let cfg = StepperConfig { dt, t_end, record_every: 0, filter_threshold: 0.0, ..Default::default() };
            run(&s, &cfg, &mut ()).unwrap().final_state
        };
        let reference = solve(t_end / 256.0);
        let dts = [t_end / 4.0, t_end / 8.0, t_end / 16.0];
        let errs: Vec<f64> = dts
            .iter()
            .map(|dt| {
                let r = solve(*dt);
                sup(&r.curve.z2, &reference.curve.z2).max(sup(&r.variable, &reference.variable))
            })
            .collect();
        let slope = (errs[0] / errs[2]).log2() / 2.0;
        assert!((slope - 4.0).abs() <= 0.2, "{errs:?} slope {slope}");
    }

    #[test]
    fn flat_rest_run_reaches_end() {
        let s = rest_state(&InterfaceCurve::flat(32, 0.0).unwrap(), Formulation::Phi).unwrap();
        let cfg = StepperConfig { dt: 0.05, t_end: 1.0, ..Default::default() };
        let r = run(&s, &cfg, &mut ()).unwrap();
        assert_eq!(r.termination, Termination::EndTime);
        assert_eq!(r.steps, 20);
        assert!((r.final_state.time - 1.0).abs() < 1e-12);
        let e0 = r.records[0].e_total;
        assert!(r.records.iter().all(|x| x.e_total == e0));
    }

    #[test]
    fn q_margin_stop() {
        // a small tilde circle near a q-point, drifting towards it; the metric
        // slows the approach, so the margin sits just inside the start distance
        let q = conformal::q_points()[1].c();
        let r = 0.05;
        let centre = q * (1.0 + (r + 0.011) / q.norm());
        let circ = InterfaceCurve::circle(64, centre, r, true).unwrap();
        let towards = -q / q.norm();
        let un: Vec<f64> = circ
            .z_alpha()
            .unwrap()
            .iter()
            .map(|t| dot(towards, Complex64::new(-t.im, t.re) / t.norm()))
            .collect();
        let w = amplitude::solve_omega_from_normal_velocity(&circ, &un, &settings()).unwrap().solution.values;
        let s = SheetState::new(circ, Formulation::Omega, w, 0.0).unwrap();
        let before = conformal::min_distance_to_q(&s.curve.points())[1];
        let cfg = |margin: f64| StepperConfig {
            dt: 1e-3,
            t_end: 1.0,
            record_every: 0,
            stop: StopConditions { q_margin: margin, ..Default::default() },
            ..Default::default()
        };
        let res = run(&s, &cfg(before - 1e-8), &mut ()).unwrap();
        assert!(matches!(res.termination, Termination::QMargin { index: 1, .. }), "{:?}", res.termination);
        assert!(res.steps >= 1 && res.steps < 10, "{}", res.steps);
        let res = run(&s, &cfg(before + 1e-3), &mut ()).unwrap();
        assert_eq!(res.steps, 0);
        assert!(matches!(res.termination, Termination::QMargin { index: 1, .. }));
    }

    #[test]
    fn splash_data_satisfies_sign_condition() {
        let shape = curve::SplashShape { n: 256, ..Default::default() };
        let phys = curve::make_splash_family(0.0, &shape).unwrap();
        let ac = shape.snapped_alpha_c().unwrap();
        let (s, rep) = touch_state(&phys, ac, &TouchVelocity::default(), Domain::Tilde, Formulation::Phi, &settings()).unwrap();
        check_touch_report(&rep).unwrap();
        assert!(rep.flux.abs() < 1e-10);
        assert!(rep.phi_alpha_mean.abs() < 1e-8, "{}", rep.phi_alpha_mean);
        let spread = s.curve.uniformity_spread().unwrap();
        assert!(spread < 1e-3, "{spread}");
        let bad = TouchVelocity { a2: 1.0, ..Default::default() };
        let (_, rep) = touch_state(&phys, ac, &bad, Domain::Tilde, Formulation::Phi, &settings()).unwrap();
        assert!(matches!(check_touch_report(&rep), Err(Error::Validation(_))));
    }
}
