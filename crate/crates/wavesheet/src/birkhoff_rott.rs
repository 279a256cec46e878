//! Birkhoff-Rott principal-value integral on the sheet, velocity off the
//! sheet, and the kernel-derivative part of its time derivative.
//!
//! Vectors are carried as complex numbers u1 + i u2. With d = z(a) - z(b),
//! the kernel d^perp / |d|^2 is i / conj(d). On physical curves the sum over
//! periodic images collapses to (i/2) cot(conj(d)/2). PV integrals use the
//! alternating-point trapezoid rule: nodes of opposite parity with weight 2h.

use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::curve::{arc_chord, Domain, InterfaceCurve};
use crate::error::{Error, Result};

pub const DEFAULT_F_MAX: f64 = 1e6;

#[inline]
pub fn kernel(domain: Domain, d: Complex64) -> Complex64 {
    let i = Complex64::new(0.0, 1.0);
    match domain {
        Domain::Tilde => i / d.conj(),
        Domain::Physical => {
            let half = d.conj() * 0.5;
            i * 0.5 * half.cos() / half.sin()
        }
    }
}

/// d/dt of `kernel` along d(t) with d'(t) = dt.
#[inline]
pub fn kernel_dt(domain: Domain, d: Complex64, dt: Complex64) -> Complex64 {
    let i = Complex64::new(0.0, 1.0);
    match domain {
        Domain::Tilde => -i * dt.conj() / (d.conj() * d.conj()),
        Domain::Physical => {
            let s = (d.conj() * 0.5).sin();
            -i * 0.25 * dt.conj() / (s * s)
        }
    }
}

/// Dense quadrature matrix of the PV operator: BR_i = sum_j a_ij omega_j.
#[derive(Debug, Clone)]
pub struct BrOperator {
    n: usize,
    domain: Domain,
    points: Vec<Complex64>,
    a: Vec<Complex64>,
}

impl BrOperator {
    pub fn new(curve: &InterfaceCurve) -> Self {
        let n = curve.n();
        let points = curve.points();
        let w = 2.0 * curve.grid.h() / (2.0 * PI);
        let domain = curve.domain;
        let a: Vec<Complex64> = (0..n)
            .into_par_iter()
            .flat_map_iter(|i| {
                let p = &points;
                (0..n).map(move |j| {
                    if (i + j) % 2 == 1 {
                        kernel(domain, p[i] - p[j]) * w
                    } else {
                        Complex64::new(0.0, 0.0)
                    }
                })
            })
            .collect();
        BrOperator { n, domain, points, a }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn points(&self) -> &[Complex64] {
        &self.points
    }

    #[inline]
    pub fn entry(&self, i: usize, j: usize) -> Complex64 {
        self.a[i * self.n + j]
    }

    pub fn apply(&self, omega: &[f64]) -> Vec<Complex64> {
        let n = self.n;
        (0..n)
            .into_par_iter()
            .map(|i| {
                let row = &self.a[i * n..(i + 1) * n];
                let mut s = Complex64::new(0.0, 0.0);
                // only opposite-parity entries are nonzero
                let mut j = (i + 1) % 2;
                while j < n {
                    s += row[j] * omega[j];
                    j += 2;
                }
                s
            })
            .collect()
    }
}

fn check_len(curve: &InterfaceCurve, f: usize) -> Result<()> {
    if f != curve.n() {
        return Err(Error::LengthMismatch { expected: curve.n(), got: f });
    }
    Ok(())
}

/// BR(z, omega) at the nodes, after checking the arc-chord functional.
pub fn br_boundary(curve: &InterfaceCurve, omega: &[f64], f_max: f64) -> Result<Vec<Complex64>> {
    check_len(curve, omega.len())?;
    let f = arc_chord(curve).sup_f;
    if !(f <= f_max) {
        return Err(Error::ArcChordViolation { sup_f: f, limit: f_max });
    }
    Ok(br_unchecked(curve, omega))
}

/// BR(z, omega) without the arc-chord guard (matrix-free).
pub fn br_unchecked(curve: &InterfaceCurve, omega: &[f64]) -> Vec<Complex64> {
    let n = curve.n();
    let pts = curve.points();
    let w = curve.grid.h() / PI;
    let domain = curve.domain;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut s = Complex64::new(0.0, 0.0);
            let mut j = (i + 1) % 2;
            while j < n {
                s += kernel(domain, pts[i] - pts[j]) * omega[j];
                j += 2;
            }
            s * w
        })
        .collect()
}

/// Velocity induced at a point off the sheet, plain trapezoid rule.
pub fn br_interior(point: Complex64, curve: &InterfaceCurve, omega: &[f64]) -> Result<Complex64> {
    check_len(curve, omega.len())?;
    let pts = curve.points();
    let za = curve.z_alpha()?;
    let max_speed = za.iter().map(|v| v.norm()).fold(0.0, f64::max);
    let dist = pts.iter().map(|p| curve.chord(point, *p)).fold(f64::INFINITY, f64::min);
    if dist < 10.0 * curve.grid.h() * max_speed {
        return Err(Error::TooClose { distance: dist });
    }
    let w = curve.grid.h() / (2.0 * PI);
    let s: Complex64 = pts.iter().zip(omega).map(|(p, o)| kernel(curve.domain, point - p) * *o).sum();
    Ok(s * w)
}

/// Part of d/dt BR(z, omega) from moving the kernel with z_t, omega frozen.
pub fn br_time_explicit(curve: &InterfaceCurve, omega: &[f64], z_t: &[Complex64]) -> Result<Vec<Complex64>> {
    check_len(curve, omega.len())?;
    check_len(curve, z_t.len())?;
    let n = curve.n();
    let pts = curve.points();
    let w = curve.grid.h() / PI;
    let domain = curve.domain;
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let mut s = Complex64::new(0.0, 0.0);
            let mut j = (i + 1) % 2;
            while j < n {
                s += kernel_dt(domain, pts[i] - pts[j], z_t[i] - z_t[j]) * omega[j];
                j += 2;
            }
            s * w
        })
        .collect())
}

/// Real dot product of complex-encoded vectors.
#[inline]
pub fn dot(a: Complex64, b: Complex64) -> f64 {
    a.re * b.re + a.im * b.im
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{self, Grid};
    use proptest::prelude::*;

    pub(crate) fn perturbed_sheet(n: usize) -> (InterfaceCurve, Vec<f64>) {
        let g = Grid::new(n).unwrap();
        let c = InterfaceCurve::new(
            Domain::Physical,
            g.alphas().iter().map(|a| 0.1 * a.sin()).collect(),
            g.alphas().iter().map(|a| 0.1 * a.cos()).collect(),
        )
        .unwrap();
        let w = g.alphas().iter().map(|a| 1.0 + 0.3 * a.cos()).collect();
        (c, w)
    }

    /// Independent oracle: subtract the cotangent singularity, whose PV integral
    /// vanishes, and integrate the smooth remainder with the full trapezoid rule.
    fn subtraction_oracle(n_fine: usize, at: f64) -> Complex64 {
        let i = Complex64::new(0.0, 1.0);
        let z = |a: f64| Complex64::new(a + 0.1 * a.sin(), 0.1 * a.cos());
        let zp = Complex64::new(1.0 + 0.1 * at.cos(), -0.1 * at.sin()).conj();
        let zpp = Complex64::new(-0.1 * at.sin(), -0.1 * at.cos()).conj();
        let om = |a: f64| 1.0 + 0.3 * a.cos();
        let omp = -0.3 * at.sin();
        let h = 2.0 * PI / n_fine as f64;
        let mut s = Complex64::new(0.0, 0.0);
        for k in 0..n_fine {
            let b = at - PI + h * k as f64;
            let val = if k == n_fine / 2 {
                i * (-omp / zp + om(at) * zpp / (2.0 * zp * zp))
            } else {
                let d = (z(at) - z(b)).conj();
                i * 0.5 * (d * 0.5).cos() / (d * 0.5).sin() * om(b)
                    - i * om(at) / (2.0 * zp) / ((at - b) * 0.5).tan()
            };
            s += val;
        }
        s * h / (2.0 * PI)
    }

    #[test]
    fn flat_sheet_is_quiet() {
        let c = InterfaceCurve::flat(64, 0.0).unwrap();
        let br = br_boundary(&c, &vec![2.5; 64], DEFAULT_F_MAX).unwrap();
        assert!(br.iter().all(|v| v.norm() < 1e-13));
    }

    #[test]
    fn uniform_circle_closed_form() {
        let (r, w0) = (1.7, 0.8);
        let c = InterfaceCurve::circle(128, Complex64::new(0.3, -0.2), r, false).unwrap();
        let br = br_boundary(&c, &vec![w0; 128], DEFAULT_F_MAX).unwrap();
        let err = br
            .iter()
            .zip(c.grid.alphas())
            .map(|(v, a)| (v - Complex64::new(-a.sin(), a.cos()) * (w0 / (2.0 * r))).norm())
            .fold(0.0, f64::max);
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn perturbed_sheet_matches_subtraction_oracle() {
        let (c, w) = perturbed_sheet(256);
        let br = br_unchecked(&c, &w);
        let g = c.grid;
        let err = (0..256).step_by(5).map(|j| (br[j] - subtraction_oracle(1024, g.alpha(j))).norm()).fold(0.0, f64::max);
        assert!(err <= 1e-8, "{err}");
    }

    #[test]
    fn spectral_convergence() {
        let mut errs = Vec::new();
        for n in [32, 64, 128, 256] {
            let (c, w) = perturbed_sheet(n);
            let br = br_unchecked(&c, &w);
            let g = c.grid;
            let e = (0..n).map(|j| (br[j] - subtraction_oracle(2048, g.alpha(j))).norm()).fold(0.0, f64::max);
            errs.push(e);
        }
        for k in 0..errs.len() - 1 {
            let dropped = errs[k + 1] <= errs[k] * 1e-3;
            let floor = errs[k] < 1e-13 && errs[k + 1] < 1e-13;
            assert!(dropped || floor, "{errs:?}");
        }
    }

    #[test]
    fn interior_examples() {
        let (r, w0) = (1.0, 0.6);
        let c = InterfaceCurve::circle(256, Complex64::new(0.0, 0.0), r, false).unwrap();
        let w = vec![w0; 256];
        let centre = br_interior(Complex64::new(0.0, 0.0), &c, &w).unwrap();
        assert!(centre.norm() < 1e-13);
        let far = br_interior(Complex64::new(10.0, 0.0), &c, &w).unwrap();
        // point vortex of circulation 2 pi w0 r at the origin
        let want = Complex64::new(0.0, 1.0) * (2.0 * PI * w0 * r / (2.0 * PI * 10.0));
        assert!((far - want).norm() < 1e-6);
        let zero = br_interior(Complex64::new(0.2, 0.1), &c, &vec![0.0; 256]).unwrap();
        assert_eq!(zero, Complex64::new(0.0, 0.0));
        assert!(matches!(br_interior(Complex64::new(1.0, 0.0), &c, &w), Err(Error::TooClose { .. })));
    }

    #[test]
    fn jump_relation_from_the_water_side() {
        let (c, w) = perturbed_sheet(64);
        let fine = 4096;
        let fc = InterfaceCurve::new(
            Domain::Physical,
            spectral::resample(&c.z1, fine).unwrap(),
            spectral::resample(&c.z2, fine).unwrap(),
        )
        .unwrap();
        let fw = spectral::resample(&w, fine).unwrap();
        let br = br_unchecked(&c, &w);
        let za = c.z_alpha().unwrap();
        let pts = c.points();
        for j in [3usize, 17, 40] {
            let nrm = Complex64::new(-za[j].im, za[j].re) / za[j].norm();
            let v = |d: f64| br_interior(pts[j] - nrm * d, &fc, &fw).unwrap();
            let d = 0.1;
            let (v1, v2, v3) = (v(d), v(d / 2.0), v(d / 4.0));
            // quadratic Richardson extrapolation to d = 0
            let limit = (v3 * 8.0 - v2 * 6.0 + v1) / 3.0;
            let want = br[j] + za[j] * (0.5 * w[j] / za[j].norm_sqr());
            assert!((limit - want).norm() < 1e-4, "{j}: {limit} vs {want}");
        }
    }

    #[test]
    fn explicit_time_derivative_matches_finite_differences() {
        let (c, w) = perturbed_sheet(64);
        let g = c.grid;
        let zt: Vec<Complex64> = g.alphas().iter().map(|a| Complex64::new(a.sin(), (2.0 * a).cos())).collect();
        let e = br_time_explicit(&c, &w, &zt).unwrap();
        let step = 1e-5;
        let shifted = |s: f64| {
            InterfaceCurve::new(
                Domain::Physical,
                c.z1.iter().zip(&zt).map(|(x, v)| x + s * v.re).collect(),
                c.z2.iter().zip(&zt).map(|(y, v)| y + s * v.im).collect(),
            )
            .unwrap()
        };
        let (p, m) = (br_unchecked(&shifted(step), &w), br_unchecked(&shifted(-step), &w));
        let err = (0..64).map(|j| ((p[j] - m[j]) / (2.0 * step) - e[j]).norm()).fold(0.0, f64::max);
        assert!(err < 1e-6, "{err}");

        // rigid translation of a closed curve leaves the kernel unchanged
        let circ = InterfaceCurve::circle(64, Complex64::new(0.0, 0.0), 1.0, true).unwrap();
        let cw: Vec<f64> = circ.grid.alphas().iter().map(|a| 1.0 + a.sin()).collect();
        let e = br_time_explicit(&circ, &cw, &vec![Complex64::new(0.4, -1.1); 64]).unwrap();
        assert!(e.iter().all(|v| v.norm() < 1e-14));
        let e = br_time_explicit(&c, &w, &vec![Complex64::new(0.0, 0.0); 64]).unwrap();
        assert!(e.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn operator_matches_matrix_free() {
        let (c, w) = perturbed_sheet(64);
        let op = BrOperator::new(&c);
        let a = op.apply(&w);
        let b = br_unchecked(&c, &w);
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).norm() < 1e-13));
    }

    #[test]
    fn arc_chord_guard() {
        let c = crate::curve::make_splash_family(0.0, &Default::default()).unwrap();
        let n = c.n();
        assert!(matches!(br_boundary(&c, &vec![1.0; n], DEFAULT_F_MAX), Err(Error::ArcChordViolation { .. })));
    }

    proptest! {
        #[test]
        fn linear_in_omega(a in -2.0f64..2.0, b in -2.0f64..2.0, k in 1usize..6) {
            let (c, w1) = perturbed_sheet(64);
            let w2: Vec<f64> = c.grid.alphas().iter().map(|t| (k as f64 * t).sin()).collect();
            let mix: Vec<f64> = w1.iter().zip(&w2).map(|(x, y)| a * x + b * y).collect();
            let l = br_unchecked(&c, &mix);
            let (r1, r2) = (br_unchecked(&c, &w1), br_unchecked(&c, &w2));
            for j in 0..64 {
                prop_assert!((l[j] - (r1[j] * a + r2[j] * b)).norm() <= 1e-12);
            }
        }

        #[test]
        fn translation_invariant(dx in -3.0f64..3.0, dy in -3.0f64..3.0) {
            let c = InterfaceCurve::circle(64, Complex64::new(0.0, 0.0), 1.0, true).unwrap();
            let w: Vec<f64> = c.grid.alphas().iter().map(|t| 1.0 + 0.5 * (2.0 * t).cos()).collect();
            let moved = InterfaceCurve::new(
                Domain::Tilde,
                c.z1.iter().map(|x| x + dx).collect(),
                c.z2.iter().map(|y| y + dy).collect(),
            ).unwrap();
            let (a, b) = (br_unchecked(&c, &w), br_unchecked(&moved, &w));
            for j in 0..64 {
                prop_assert!((a[j] - b[j]).norm() <= 1e-12);
            }
        }
    }
}
