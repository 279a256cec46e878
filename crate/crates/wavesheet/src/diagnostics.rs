//! Observables along a trajectory: the Rayleigh-Taylor function, the
//! conserved energy, the Sobolev-type energy of the local existence theory,
//! distances to the singular points of the map, and blow-up rate fits.

use nalgebra::{Matrix3, Vector3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::amplitude::{self, IntegralEquationSettings};
use crate::birkhoff_rott::{br_boundary, br_time_explicit, dot, DEFAULT_F_MAX};
use crate::conformal::{self, PlanePoint};
use crate::curve::{self, Domain, InterfaceCurve, MapDirection};
use crate::error::{Error, Result};
use crate::evolution::{self, Formulation, Frame, SheetState};
use crate::spectral;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsConfig {
    pub gravity: f64,
    pub solver: IntegralEquationSettings,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig { gravity: 1.0, solver: IntegralEquationSettings::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRecord {
    pub time: f64,
    pub e_total: f64,
    pub e_kinetic: f64,
    pub e_potential: f64,
    /// Arc-chord supremum of the physical curve.
    pub arc_chord_sup: f64,
    /// max |w| of the physical sheet.
    pub max_abs_omega: f64,
    pub min_sigma: f64,
    pub min_q2_sigma: f64,
    /// Distances to the five singular points; NaN for physical runs.
    pub m_q: [f64; 5],
    pub sobolev_e: f64,
    pub dt_used: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SigmaReport {
    pub sigma: Vec<f64>,
    pub min_sigma: f64,
    pub min_q2_sigma: f64,
}

/// Frame plus w_t for one state.
pub struct Derivatives {
    pub frame: Frame,
    pub omega_t: Vec<f64>,
}

pub fn derivatives(state: &SheetState, cfg: &DiagnosticsConfig) -> Result<Derivatives> {
    let frame = evolution::frame(state, &cfg.solver)?;
    let rest = evolution::omega_t_rest_general(&state.curve, &frame, cfg.gravity)?;
    let omega_t = amplitude::solve_omega_t(&state.curve, &rest, &cfg.solver)?.values;
    Ok(Derivatives { frame, omega_t })
}

fn cderiv(v: &[Complex64], k: u32) -> Result<Vec<Complex64>> {
    let re: Vec<f64> = v.iter().map(|c| c.re).collect();
    let im: Vec<f64> = v.iter().map(|c| c.im).collect();
    let (dr, di) = (spectral::derivative(&re, k)?, spectral::derivative(&im, k)?);
    Ok(dr.iter().zip(&di).map(|(a, b)| Complex64::new(*a, *b)).collect())
}

#[inline]
fn perp(v: Complex64) -> Complex64 {
    Complex64::new(-v.im, v.re)
}

/// Rayleigh-Taylor function -grad p . z_a^perp from the boundary quantities.
pub fn rayleigh_taylor_sigma(state: &SheetState, d: &Derivatives, gravity: f64) -> Result<SigmaReport> {
    let curve = &state.curve;
    let f = &d.frame;
    let n = curve.n();
    let e = br_time_explicit(curve, &f.omega, &f.z_t)?;
    let br_w = br_boundary(curve, &d.omega_t, DEFAULT_F_MAX)?;
    let br_a = cderiv(&f.br, 1)?;
    let z_at = cderiv(&f.z_t, 1)?;
    let z_aa = curve.z_deriv(2)?;
    let phi = evolution::phi_gauge(f);
    let (_, grad_h) = evolution::height_and_gradient(curve)?;
    let sigma: Vec<f64> = (0..n)
        .map(|j| {
            let s = f.speed_sq[j].sqrt();
            let np = perp(f.z_alpha[j]);
            let r = phi[j] / s;
            dot(e[j] + br_w[j] + br_a[j] * r, np)
                + f.omega[j] / (2.0 * f.speed_sq[j]) * dot(z_at[j] + z_aa[j] * r, np)
                + f.metric.q[j] * f.u_tilde[j].norm_sqr() * dot(f.metric.grad_q[j], np)
                + gravity * dot(grad_h[j], np)
        })
        .collect();
    let min_sigma = sigma.iter().copied().fold(f64::INFINITY, f64::min);
    let min_q2_sigma = sigma.iter().zip(&f.metric.q2).map(|(s, q)| s * q).fold(f64::INFINITY, f64::min);
    Ok(SigmaReport { sigma, min_sigma, min_q2_sigma })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Energies {
    pub total: f64,
    pub kinetic: f64,
    pub potential: f64,
    /// Mean of Phi_a; nonzero values flag an inconsistent gauge.
    pub phi_alpha_mean: f64,
}

/// Boundary potential on the grid (reconstructed with mean zero for w states).
pub fn boundary_potential(state: &SheetState, f: &Frame) -> Result<(Vec<f64>, f64)> {
    let m = spectral::mean(&f.phi_alpha);
    match state.formulation {
        Formulation::Phi => Ok((state.variable.clone(), m)),
        Formulation::Omega => Ok((spectral::antiderivative(&f.phi_alpha)?, m)),
    }
}

/// Kinetic plus potential energy, computed with physical quantities.
pub fn energy_es(state: &SheetState, f: &Frame, gravity: f64) -> Result<Energies> {
    let curve = &state.curve;
    let h = curve.grid.h();
    let (phi, phi_alpha_mean) = boundary_potential(state, f)?;
    // normal flux per unit parameter is the same in both planes
    let kinetic = 0.5 * h * (0..curve.n()).map(|j| phi[j] * dot(f.u_tilde[j], perp(f.z_alpha[j]))).sum::<f64>();
    let (y, x_a): (Vec<f64>, Vec<f64>) = match curve.domain {
        Domain::Physical => (curve.z2.clone(), f.z_alpha.iter().map(|t| t.re).collect()),
        Domain::Tilde => {
            let mut y = Vec::with_capacity(curve.n());
            let mut xa = Vec::with_capacity(curve.n());
            for (p, t) in curve.points().iter().zip(&f.z_alpha) {
                y.push(conformal::p2_inverse(PlanePoint::from(*p))?);
                xa.push((conformal::dpinv_dw(*p)? * t).re);
            }
            (y, xa)
        }
    };
    let potential = 0.5 * gravity * h * y.iter().zip(&x_a).map(|(y, xa)| y * y * xa).sum::<f64>();
    Ok(Energies { total: kinetic + potential, kinetic, potential, phi_alpha_mean })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SobolevTerms {
    pub z_h3: f64,
    pub sigma_weighted: f64,
    pub arc_chord_sq: f64,
    pub omega_h2: f64,
    pub phi_h35: f64,
    /// |z_a|^2 / m(Q^2 sigma); +inf when m(Q^2 sigma) <= 0.
    pub speed_over_sigma: f64,
    pub q_terms: f64,
    pub total: f64,
    pub sigma_positive: bool,
}

/// E(t) with k = 4. Physical curves use Q = 1, the periodic part of z1, and no q terms.
pub fn sobolev_energy(state: &SheetState, d: &Derivatives, sigma: &SigmaReport) -> Result<SobolevTerms> {
    let curve = &state.curve;
    let f = &d.frame;
    let h = curve.grid.h();
    let z_h3 = spectral::sobolev_norm(&curve.z1, 3.0)?.powi(2) + spectral::sobolev_norm(&curve.z2, 3.0)?.powi(2);
    let d4 = curve.z_deriv(4)?;
    let sigma_weighted =
        h * (0..curve.n()).map(|j| f.metric.q2[j] * sigma.sigma[j] / f.speed_sq[j] * d4[j].norm_sqr()).sum::<f64>();
    let arc_chord_sq = curve::arc_chord(curve).sup_f.powi(2);
    let omega_h2 = spectral::sobolev_norm(&f.omega, 2.0)?.powi(2);
    let phi_h35 = spectral::sobolev_norm(&evolution::phi_gauge(f), 3.5)?.powi(2);
    let sigma_positive = sigma.min_q2_sigma > 0.0;
    let speed_over_sigma =
        if sigma_positive { spectral::mean(&f.speed_sq) / sigma.min_q2_sigma } else { f64::INFINITY };
    let q_terms = match curve.domain {
        Domain::Physical => 0.0,
        Domain::Tilde => conformal::min_distance_to_q(&curve.points()).iter().map(|m| 1.0 / m).sum(),
    };
    let total = 1.0 + z_h3 + sigma_weighted + arc_chord_sq + omega_h2 + phi_h35 + speed_over_sigma + q_terms;
    Ok(SobolevTerms {
        z_h3,
        sigma_weighted,
        arc_chord_sq,
        omega_h2,
        phi_h35,
        speed_over_sigma,
        q_terms,
        total,
        sigma_positive,
    })
}

/// Physical curve and w for a state, mapping back from the tilde plane if needed.
pub fn physical_sheet(state: &SheetState, f: &Frame, solver: &IntegralEquationSettings) -> Result<(InterfaceCurve, Vec<f64>)> {
    match state.curve.domain {
        Domain::Physical => Ok((state.curve.clone(), f.omega.clone())),
        Domain::Tilde => {
            let phys = curve::map_curve(&state.curve, MapDirection::ToPhysical)?;
            // Phi_a is the same function of a in both planes
            let mut pa = f.phi_alpha.clone();
            let m = spectral::mean(&pa);
            pa.iter_mut().for_each(|v| *v -= m);
            let w = amplitude::solve_omega_from_phi(&phys, &pa, solver)?.values;
            Ok((phys, w))
        }
    }
}

/// Full diagnostics record of a state.
pub fn record(state: &SheetState, cfg: &DiagnosticsConfig, dt_used: f64) -> Result<DiagnosticsRecord> {
    let d = derivatives(state, cfg)?;
    let sig = rayleigh_taylor_sigma(state, &d, cfg.gravity)?;
    let en = energy_es(state, &d.frame, cfg.gravity)?;
    let sob = sobolev_energy(state, &d, &sig)?;
    let (arc_chord_sup, max_abs_omega) = match physical_sheet(state, &d.frame, &cfg.solver) {
        Ok((phys, w)) => (
            curve::refined_arc_chord_sup(&phys).unwrap_or(f64::NAN),
            w.iter().fold(0.0f64, |m, v| m.max(v.abs())),
        ),
        Err(_) => (f64::NAN, f64::NAN),
    };
    let m_q = match state.curve.domain {
        Domain::Physical => [f64::NAN; 5],
        Domain::Tilde => conformal::min_distance_to_q(&state.curve.points()),
    };
    Ok(DiagnosticsRecord {
        time: state.time,
        e_total: en.total,
        e_kinetic: en.kinetic,
        e_potential: en.potential,
        arc_chord_sup,
        max_abs_omega,
        min_sigma: sig.min_sigma,
        min_q2_sigma: sig.min_q2_sigma,
        m_q,
        sobolev_e: sob.total,
        dt_used,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub residual_rms: f64,
    pub r_squared: f64,
}

impl PowerLawFit {
    pub fn eval(&self, t: f64) -> f64 {
        self.a * t.powf(self.b) + self.c
    }
}

fn fit_stats(t: &[f64], y: &[f64], a: f64, b: f64, c: f64) -> PowerLawFit {
    let n = t.len() as f64;
    let ss_res: f64 = t.iter().zip(y).map(|(t, y)| (a * t.powf(b) + c - y).powi(2)).sum();
    let mean = y.iter().sum::<f64>() / n;
    let ss_tot: f64 = y.iter().map(|y| (y - mean).powi(2)).sum();
    let r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    PowerLawFit { a, b, c, residual_rms: (ss_res / n).sqrt(), r_squared }
}

/// Linear least squares for (a, c) with the exponent fixed.
fn fit_fixed(t: &[f64], y: &[f64], b: f64) -> Result<(f64, f64)> {
    let n = t.len() as f64;
    let x: Vec<f64> = t.iter().map(|t| t.powf(b)).collect();
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(x, y)| (x - mx) * (y - my)).sum();
    if !(sxx > 0.0) {
        return Err(Error::Fit("degenerate abscissae".into()));
    }
    let a = sxy / sxx;
    Ok((a, my - a * mx))
}

/// Least-squares fit of a t^b + c; linear when the exponent is fixed,
/// otherwise Levenberg-Marquardt started from the b = 1 linear fit.
pub fn fit_power_law(times: &[f64], values: &[f64], fix_exponent: Option<f64>) -> Result<PowerLawFit> {
    if times.len() != values.len() {
        return Err(Error::LengthMismatch { expected: times.len(), got: values.len() });
    }
    if times.len() < 4 {
        return Err(Error::Fit(format!("need at least 4 samples, got {}", times.len())));
    }
    if times.iter().any(|t| !(*t > 0.0 && t.is_finite())) || values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Fit("times must be positive and values finite".into()));
    }
    if let Some(b) = fix_exponent {
        let (a, c) = fit_fixed(times, values, b)?;
        return Ok(fit_stats(times, values, a, b, c));
    }
    let (a0, c0) = fit_fixed(times, values, 1.0)?;
    let mut p = Vector3::new(a0, 1.0, c0);
    let cost = |p: &Vector3<f64>| -> f64 { times.iter().zip(values).map(|(t, y)| (p[0] * t.powf(p[1]) + p[2] - y).powi(2)).sum() };
    let mut cur = cost(&p);
    let mut lambda = 1e-3;
    let scale: f64 = values.iter().map(|v| v * v).sum::<f64>().max(f64::MIN_POSITIVE);
    for _ in 0..500 {
        let mut jtj = Matrix3::zeros();
        let mut jtr = Vector3::zeros();
        for (t, y) in times.iter().zip(values) {
            let tb = t.powf(p[1]);
            let j = Vector3::new(tb, p[0] * tb * t.ln(), 1.0);
            let r = p[0] * tb + p[2] - y;
            jtj += j * j.transpose();
            jtr += j * r;
        }
        let mut improved = false;
        while lambda < 1e16 {
            let mut m = jtj;
            for k in 0..3 {
                m[(k, k)] *= 1.0 + lambda;
            }
            let Some(step) = m.lu().solve(&(-jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let trial = p + step;
            let c = cost(&trial);
            if c.is_finite() && c <= cur {
                let small = step.iter().zip(p.iter()).all(|(s, v)| s.abs() <= 1e-14 * v.abs().max(1e-300));
                p = trial;
                let done = small || cur - c <= 1e-30 * scale;
                cur = c;
                lambda = (lambda * 0.1).max(1e-12);
                improved = true;
                if done {
                    return Ok(fit_stats(times, values, p[0], p[1], p[2]));
                }
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            // no descent direction left: a stationary point
            return Ok(fit_stats(times, values, p[0], p[1], p[2]));
        }
    }
    let best = fit_stats(times, values, p[0], p[1], p[2]);
    Err(Error::Fit(format!("no convergence; best iterate a={} b={} c={} rms={:e}", best.a, best.b, best.c, best.residual_rms)))
}

/// (t, 1/max|w|) and (t, 1/arc-chord) with time re-zeroed at the first record.
pub fn blowup_observables(trajectory: &[DiagnosticsRecord]) -> (Vec<(f64, f64)>, Vec<(f64, f64)>) {
    let Some(first) = trajectory.first() else {
        return (Vec::new(), Vec::new());
    };
    let t0 = first.time;
    let w = trajectory.iter().map(|r| (r.time - t0, 1.0 / r.max_abs_omega)).collect();
    let a = trajectory.iter().map(|r| (r.time - t0, 1.0 / r.arc_chord_sup)).collect();
    (w, a)
}
