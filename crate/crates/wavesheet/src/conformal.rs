//! The map P(z) = sqrt(tan(z/2)) between the physical strip and the closed
//! "tilde" plane, its inverse 2 arctan(w^2), the metric factor Q^2 = |P'|^2,
//! the height function P2^{-1} and the singular points q0..q4.
//!
//! All closed-form derivatives use the complex identities
//! P'(z) = (1 + w^4) / (4 w) and d/dw P^{-1}(w) = 4 w / (1 + w^4), w = P(z).

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const GUARD_RADIUS: f64 = 1e-12;

/// Height of the deep-water seed used to start branch continuation.
pub const DEEP_Y: f64 = -50.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanePoint {
    pub x: f64,
    pub y: f64,
}

impl PlanePoint {
    pub fn new(x: f64, y: f64) -> Self {
        PlanePoint { x, y }
    }

    pub fn c(self) -> Complex64 {
        Complex64::new(self.x, self.y)
    }
}

impl From<Complex64> for PlanePoint {
    fn from(c: Complex64) -> Self {
        PlanePoint { x: c.re, y: c.im }
    }
}

pub fn q_points() -> [PlanePoint; 5] {
    let s = FRAC_1_SQRT_2;
    [
        PlanePoint::new(0.0, 0.0),
        PlanePoint::new(s, s),
        PlanePoint::new(-s, s),
        PlanePoint::new(-s, -s),
        PlanePoint::new(s, -s),
    ]
}

/// Image of deep water, -exp(-i pi/4).
pub fn deep_water_image() -> Complex64 {
    -Complex64::from_polar(1.0, -PI / 4.0)
}

fn guard_branch_points(w: Complex64) -> Result<()> {
    for (l, q) in q_points().iter().enumerate().skip(1) {
        if (w - q.c()).norm() < GUARD_RADIUS {
            return Err(Error::Singular { x: w.re, y: w.im, which: l });
        }
    }
    Ok(())
}

fn guard_origin(w: Complex64) -> Result<()> {
    if w.norm() < GUARD_RADIUS {
        return Err(Error::Singular { x: w.re, y: w.im, which: 0 });
    }
    Ok(())
}

/// 2 arctan(w^2) with real part in (-pi, pi].
pub fn map_p_inverse(w: PlanePoint) -> Result<PlanePoint> {
    let w = w.c();
    guard_branch_points(w)?;
    let i = Complex64::new(0.0, 1.0);
    let w2 = w * w;
    let mut z = i * ((1.0 - i * w2) / (1.0 + i * w2)).ln();
    if z.re <= -PI {
        z.re += 2.0 * PI;
    }
    Ok(z.into())
}

/// Continuation context: the image of the previous sample.
#[derive(Debug, Clone, Copy)]
pub struct Branch {
    prev: Complex64,
}

impl Branch {
    pub fn deep_water() -> Self {
        Branch { prev: deep_water_image() }
    }

    pub fn from_image(w: Complex64) -> Self {
        Branch { prev: w }
    }

    pub fn image(&self) -> Complex64 {
        self.prev
    }

    /// Seed by marching up the vertical line Re z = x from deep water to z.
    pub fn seeded_at(z: PlanePoint) -> Result<Self> {
        let mut b = Branch::deep_water();
        if z.y <= DEEP_Y {
            return Ok(b);
        }
        let steps = ((z.y - DEEP_Y) / 0.02).ceil().max(1.0) as usize;
        for k in 1..=steps {
            let y = DEEP_Y + (z.y - DEEP_Y) * k as f64 / steps as f64;
            map_p(PlanePoint::new(z.x, y), &mut b)?;
        }
        Ok(b)
    }
}

fn candidate_root(z: Complex64) -> Result<Complex64> {
    let t = (z / 2.0).tan();
    if !t.re.is_finite() || !t.im.is_finite() {
        return Err(Error::Singular { x: z.re, y: z.im, which: 0 });
    }
    Ok(t.sqrt())
}

/// sqrt(tan(z/2)) on the root closest to the previous image held in `branch`.
pub fn map_p(z: PlanePoint, branch: &mut Branch) -> Result<PlanePoint> {
    let r = candidate_root(z.c())?;
    let prev = branch.prev;
    let (dp, dm) = ((r - prev).norm(), (r + prev).norm());
    let w = if dp <= dm { r } else { -r };
    if r.norm() > GUARD_RADIUS && dp.min(dm) > r.norm() {
        return Err(Error::BranchAmbiguity { index: 0 });
    }
    branch.prev = w;
    Ok(w.into())
}

/// Convenience: map a single point with the vertical deep-water continuation.
pub fn map_p_from_deep(z: PlanePoint) -> Result<PlanePoint> {
    let mut b = Branch::seeded_at(z)?;
    map_p(z, &mut b)
}

/// P'(z) expressed through w = P(z).
pub fn dp_dz(w: Complex64) -> Result<Complex64> {
    guard_origin(w)?;
    Ok((1.0 + w.powu(4)) / (4.0 * w))
}

/// d/dw P^{-1}(w) = 4w / (1 + w^4).
pub fn dpinv_dw(w: Complex64) -> Result<Complex64> {
    guard_branch_points(w)?;
    Ok(4.0 * w / (1.0 + w.powu(4)))
}

/// Real Jacobian of an analytic map with derivative d.
pub fn jacobian(d: Complex64) -> [[f64; 2]; 2] {
    [[d.re, -d.im], [d.im, d.re]]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QData {
    pub q_squared: f64,
    /// Gradient of Q (not Q^2); NaN at q1..q4 where Q has a cone point.
    pub grad_q: [f64; 2],
}

pub fn q_data(w: PlanePoint) -> Result<QData> {
    let w = w.c();
    guard_origin(w)?;
    let w4p1 = 1.0 + w.powu(4);
    let q = w4p1.norm() / (4.0 * w.norm());
    if w4p1.norm() == 0.0 {
        return Ok(QData { q_squared: 0.0, grad_q: [f64::NAN, f64::NAN] });
    }
    let dlog = 4.0 * w.powu(3) / w4p1 - 1.0 / w;
    Ok(QData { q_squared: q * q, grad_q: [q * dlog.re, -q * dlog.im] })
}

/// log|(i + w^2) / (i - w^2)|, the physical height of the preimage.
pub fn p2_inverse(w: PlanePoint) -> Result<f64> {
    let w = w.c();
    guard_branch_points(w)?;
    let i = Complex64::new(0.0, 1.0);
    let w2 = w * w;
    Ok(((i + w2) / (i - w2)).norm().ln())
}

pub fn grad_p2_inverse(w: PlanePoint) -> Result<[f64; 2]> {
    let w = w.c();
    guard_branch_points(w)?;
    let i = Complex64::new(0.0, 1.0);
    let w2 = w * w;
    let dlog = 2.0 * w / (i + w2) + 2.0 * w / (i - w2);
    Ok([dlog.re, -dlog.im])
}

/// u = grad P(z)^T u_tilde, with grad P the real Jacobian of P at z.
pub fn velocity_pullback(u_tilde: [f64; 2], z: PlanePoint, branch: &mut Branch) -> Result<[f64; 2]> {
    let w = map_p(z, branch)?;
    let j = jacobian(dp_dz(w.c())?);
    Ok([j[0][0] * u_tilde[0] + j[1][0] * u_tilde[1], j[0][1] * u_tilde[0] + j[1][1] * u_tilde[1]])
}

/// Inverse of `velocity_pullback`: u_tilde = grad P u / Q^2.
pub fn velocity_pushforward(u: [f64; 2], z: PlanePoint, branch: &mut Branch) -> Result<[f64; 2]> {
    let w = map_p(z, branch)?;
    let d = dp_dz(w.c())?;
    let j = jacobian(d);
    let q2 = d.norm_sqr();
    Ok([(j[0][0] * u[0] + j[0][1] * u[1]) / q2, (j[1][0] * u[0] + j[1][1] * u[1]) / q2])
}

/// m(q^l) for l = 0..4 over the given sample points.
pub fn min_distance_to_q(points: &[Complex64]) -> [f64; 5] {
    let mut out = [f64::INFINITY; 5];
    for (l, q) in q_points().iter().enumerate() {
        out[l] = points.iter().map(|p| (p - q.c()).norm()).fold(f64::INFINITY, f64::min);
    }
    out
}
