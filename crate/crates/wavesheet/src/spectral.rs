//! Periodic grid on [-pi, pi), Fourier transforms, spectral derivatives,
//! Sobolev norms and the relative-threshold Fourier filter.
//!
//! Coefficient convention: f_hat[m] = (1/2pi) * integral of f(a) exp(-i m a),
//! for m = -N/2 .. N/2-1. The unpaired m = -N/2 mode is dropped by every
//! derivative.

use std::cell::RefCell;
use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// Uniform periodic grid a_j = -pi + 2 pi j / N.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Grid {
    n: usize,
}

impl Grid {
    pub fn new(n: usize) -> Result<Self> {
        if n < 8 || n % 2 != 0 {
            return Err(Error::InvalidGrid(format!("N must be even and >= 8, got {n}")));
        }
        Ok(Grid { n })
    }

    pub fn for_field(f: &[f64]) -> Result<Self> {
        Grid::new(f.len())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn h(&self) -> f64 {
        2.0 * PI / self.n as f64
    }

    pub fn alpha(&self, j: usize) -> f64 {
        -PI + self.h() * j as f64
    }

    pub fn alphas(&self) -> Vec<f64> {
        (0..self.n).map(|j| self.alpha(j)).collect()
    }

    pub fn check(&self, f: &[f64]) -> Result<()> {
        if f.len() != self.n {
            return Err(Error::LengthMismatch { expected: self.n, got: f.len() });
        }
        Ok(())
    }
}

/// Fourier coefficients for m = -N/2 .. N/2-1, stored in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct Coefficients {
    modes: Vec<Complex64>,
}

impl Coefficients {
    pub fn n(&self) -> usize {
        self.modes.len()
    }

    pub fn get(&self, m: i64) -> Complex64 {
        let half = (self.modes.len() / 2) as i64;
        if m < -half || m >= half {
            return Complex64::new(0.0, 0.0);
        }
        self.modes[(m + half) as usize]
    }

    pub fn set(&mut self, m: i64, v: Complex64) {
        let half = (self.modes.len() / 2) as i64;
        self.modes[(m + half) as usize] = v;
    }

    pub fn modes(&self) -> &[Complex64] {
        &self.modes
    }

    /// Iterator over (m, f_hat[m]).
    pub fn iter(&self) -> impl Iterator<Item = (i64, Complex64)> + '_ {
        let half = (self.modes.len() / 2) as i64;
        self.modes.iter().enumerate().map(move |(k, c)| (k as i64 - half, *c))
    }
}

fn fft_in_place(buf: &mut [Complex64], forward: bool) {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        let plan = if forward { p.plan_fft_forward(buf.len()) } else { p.plan_fft_inverse(buf.len()) };
        plan.process(buf);
    });
}

fn sign(m: i64) -> f64 {
    if m.rem_euclid(2) == 0 {
        1.0
    } else {
        -1.0
    }
}

pub fn to_spectral(f: &[f64]) -> Result<Coefficients> {
    let grid = Grid::for_field(f)?;
    let n = grid.n();
    let mut buf: Vec<Complex64> = f.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    fft_in_place(&mut buf, true);
    let half = (n / 2) as i64;
    let inv = 1.0 / n as f64;
    let modes = (-half..half)
        .map(|m| buf[m.rem_euclid(n as i64) as usize] * (sign(m) * inv))
        .collect();
    Ok(Coefficients { modes })
}

/// Inverse of `to_spectral`; returns the real part of the synthesis.
pub fn from_spectral(c: &Coefficients) -> Vec<f64> {
    let n = c.n();
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for (m, v) in c.iter() {
        buf[m.rem_euclid(n as i64) as usize] = v * sign(m);
    }
    fft_in_place(&mut buf, false);
    buf.iter().map(|v| v.re).collect()
}

/// order-th derivative via multiplication by (i m)^order.
pub fn derivative(f: &[f64], order: u32) -> Result<Vec<f64>> {
    let mut c = to_spectral(f)?;
    if order == 0 {
        return Ok(f.to_vec());
    }
    let half = (c.n() / 2) as i64;
    let i = Complex64::new(0.0, 1.0);
    for m in -half..half {
        let v = if m == -half { Complex64::new(0.0, 0.0) } else { c.get(m) * (i * m as f64).powu(order) };
        c.set(m, v);
    }
    Ok(from_spectral(&c))
}

pub fn sobolev_norm(f: &[f64], s: f64) -> Result<f64> {
    let c = to_spectral(f)?;
    let sum: f64 = c.iter().map(|(m, v)| (1.0 + (m * m) as f64).powf(s) * v.norm_sqr()).sum();
    Ok(sum.sqrt())
}

/// Zeroes modes with |f_hat[m]| < threshold * max |f_hat|.
pub fn krasny_filter(f: &[f64], threshold: f64) -> Result<Vec<f64>> {
    Grid::for_field(f)?;
    if threshold <= 0.0 {
        return Ok(f.to_vec());
    }
    let mut c = to_spectral(f)?;
    let cut = threshold * c.modes.iter().map(|v| v.norm()).fold(0.0, f64::max);
    let mut touched = false;
    for v in c.modes.iter_mut() {
        if v.norm() < cut && *v != Complex64::new(0.0, 0.0) {
            *v = Complex64::new(0.0, 0.0);
            touched = true;
        }
    }
    if !touched {
        return Ok(f.to_vec());
    }
    Ok(from_spectral(&c))
}

pub fn mean(f: &[f64]) -> f64 {
    f.iter().sum::<f64>() / f.len() as f64
}

/// Zero-mean periodic g with g' = f - mean(f).
pub fn antiderivative(f: &[f64]) -> Result<Vec<f64>> {
    let mut c = to_spectral(f)?;
    let half = (c.n() / 2) as i64;
    let i = Complex64::new(0.0, 1.0);
    for m in -half..half {
        let v = if m == 0 || m == -half { Complex64::new(0.0, 0.0) } else { c.get(m) / (i * m as f64) };
        c.set(m, v);
    }
    Ok(from_spectral(&c))
}

/// Band-limited resampling onto a grid of `n_new` points (zero padding or truncation).
pub fn resample(f: &[f64], n_new: usize) -> Result<Vec<f64>> {
    let c = to_spectral(f)?;
    Grid::new(n_new)?;
    let half_old = (c.n() / 2) as i64;
    let half_new = (n_new / 2) as i64;
    let mut out = Coefficients { modes: vec![Complex64::new(0.0, 0.0); n_new] };
    for (m, v) in c.iter() {
        if m == -half_old {
            // split the unpaired mode as a cosine so the result stays real
            if half_new > half_old {
                out.set(m, v * 0.5);
                out.set(-m, v * 0.5);
            }
            continue;
        }
        if m > -half_new && m < half_new {
            out.set(m, v);
        }
    }
    if half_new < half_old {
        let folded = c.get(-half_new) + c.get(half_new);
        out.set(-half_new, Complex64::new(folded.re, 0.0));
    }
    Ok(from_spectral(&out))
}

/// Trigonometric interpolant of grid data, evaluable anywhere.
#[derive(Debug, Clone)]
pub struct TrigInterp {
    // modes 1..N/2-1 as complex amplitudes, constant and the cosine Nyquist term
    c0: f64,
    pos: Vec<Complex64>,
    nyq: f64,
}

impl TrigInterp {
    pub fn new(f: &[f64]) -> Result<Self> {
        let c = to_spectral(f)?;
        let half = (c.n() / 2) as i64;
        let pos = (1..half).map(|m| c.get(m)).collect();
        Ok(TrigInterp { c0: c.get(0).re, pos, nyq: c.get(-half).re })
    }

    pub fn eval(&self, a: f64) -> f64 {
        self.eval_deriv(a, 0)
    }

    /// k-th derivative of the interpolant with the Nyquist term dropped for k > 0.
    pub fn eval_deriv(&self, a: f64, k: u32) -> f64 {
        let step = Complex64::from_polar(1.0, a);
        let mut e = step;
        let i = Complex64::new(0.0, 1.0);
        let mut acc = Complex64::new(0.0, 0.0);
        for (idx, c) in self.pos.iter().enumerate() {
            let m = (idx + 1) as f64;
            let factor = if k == 0 { Complex64::new(1.0, 0.0) } else { (i * m).powu(k) };
            acc += *c * e * factor;
            e *= step;
        }
        let mut v = 2.0 * acc.re;
        if k == 0 {
            v += self.c0;
            let half = (self.pos.len() + 1) as f64;
            v += self.nyq * (half * a).cos();
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(n: usize, f: impl Fn(f64) -> f64) -> Vec<f64> {
        Grid::new(n).unwrap().alphas().into_iter().map(f).collect()
    }

    fn sup(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn grid_rejects_bad_sizes() {
        assert!(Grid::new(7).is_err());
        assert!(Grid::new(6).is_err());
        assert!(Grid::new(9).is_err());
        let g = Grid::new(16).unwrap();
        assert_eq!(g.alpha(0), -PI);
        assert!((g.h() - PI / 8.0).abs() < 1e-16);
    }

    #[test]
    fn single_modes() {
        let c = to_spectral(&sample(32, |a| a.cos())).unwrap();
        for (m, v) in c.iter() {
            let want = if m.abs() == 1 { 0.5 } else { 0.0 };
            assert!((v - Complex64::new(want, 0.0)).norm() <= 1e-14, "m={m}");
        }
        let c = to_spectral(&vec![1.0; 16]).unwrap();
        assert!((c.get(0) - 1.0).norm() < 1e-15);
        assert!(c.iter().filter(|(m, _)| *m != 0).all(|(_, v)| v.norm() < 1e-15));
        let c = to_spectral(&sample(32, |a| (3.0 * a).sin())).unwrap();
        assert!((c.get(3) - Complex64::new(0.0, -0.5)).norm() < 1e-14);
        assert!((c.get(-3) - Complex64::new(0.0, 0.5)).norm() < 1e-14);
    }

    #[test]
    fn length_checks() {
        assert!(to_spectral(&[1.0; 9]).is_err());
        assert!(derivative(&[1.0; 5], 1).is_err());
    }

    #[test]
    fn derivatives() {
        let d = derivative(&sample(64, f64::sin), 1).unwrap();
        assert!(sup(&d, &sample(64, f64::cos)) <= 1e-12);
        let d = derivative(&sample(64, |a| (2.0 * a).cos()), 3).unwrap();
        assert!(sup(&d, &sample(64, |a| 8.0 * (2.0 * a).sin())) <= 1e-11);
        let d = derivative(&vec![3.5; 64], 4).unwrap();
        assert!(d.iter().all(|v| v.abs() < 1e-13));
    }

    #[test]
    fn sobolev_values() {
        let f = sample(32, |a| (3.0 * a).cos());
        let want = (10f64.sqrt() / 2.0).sqrt();
        assert!((sobolev_norm(&f, 0.5).unwrap() - want).abs() < 1e-13);
        assert!((want - 1.25743).abs() < 1e-5);
        assert_eq!(sobolev_norm(&vec![0.0; 16], 2.0).unwrap(), 0.0);
        let f = sample(32, f64::cos);
        assert!((sobolev_norm(&f, 0.0).unwrap() - 0.5f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn filter_examples() {
        let f = sample(64, |a| a.sin() + 0.2 * (5.0 * a).cos());
        assert_eq!(krasny_filter(&f, 0.0).unwrap(), f);
        let f = sample(64, |a| a.cos() + 1e-15 * (20.0 * a).cos());
        let g = krasny_filter(&f, 1e-13).unwrap();
        let c = to_spectral(&g).unwrap();
        assert!(c.get(20).norm() == 0.0);
        assert!(sup(&g, &sample(64, f64::cos)) < 1e-15);
    }

    #[test]
    fn antiderivative_inverts_derivative() {
        let f = sample(64, |a| (a.sin()).exp());
        let g = antiderivative(&f).unwrap();
        let dg = derivative(&g, 1).unwrap();
        let m = mean(&f);
        let fm: Vec<f64> = f.iter().map(|v| v - m).collect();
        assert!(sup(&dg, &fm) < 1e-12);
        assert!(mean(&g).abs() < 1e-14);
    }

    #[test]
    fn interpolant_matches_grid_and_function() {
        let f = |a: f64| (a.cos()).exp() * (2.0 * a).sin();
        let v = sample(64, f);
        let it = TrigInterp::new(&v).unwrap();
        let g = Grid::new(64).unwrap();
        for j in 0..64 {
            assert!((it.eval(g.alpha(j)) - v[j]).abs() < 1e-13);
        }
        for k in 0..50 {
            let a = -3.0 + 0.12 * k as f64;
            assert!((it.eval(a) - f(a)).abs() < 1e-12);
        }
        let df = |a: f64| (a.cos()).exp() * (2.0 * (2.0 * a).cos() - a.sin() * (2.0 * a).sin());
        assert!((it.eval_deriv(0.7, 1) - df(0.7)).abs() < 1e-11);
    }

    #[test]
    fn resample_keeps_band_limited_data() {
        let f = |a: f64| 1.0 + a.cos() - 0.3 * (4.0 * a).sin();
        let up = resample(&sample(16, f), 64).unwrap();
        assert!(sup(&up, &sample(64, f)) < 1e-13);
        let down = resample(&up, 16).unwrap();
        assert!(sup(&down, &sample(16, f)) < 1e-13);
    }

    fn band_limited(n: usize, coefs: &[(f64, f64)]) -> Vec<f64> {
        sample(n, |a| {
            coefs.iter().enumerate().map(|(k, (c, s))| c * (k as f64 * a).cos() + s * (k as f64 * a).sin()).sum()
        })
    }

    proptest! {
        #[test]
        fn round_trip(vals in proptest::collection::vec(-10.0f64..10.0, 32)) {
            let back = from_spectral(&to_spectral(&vals).unwrap());
            let scale = vals.iter().fold(1e-300f64, |m, v| m.max(v.abs()));
            prop_assert!(sup(&back, &vals) <= 1e-13 * scale.max(1.0));
        }

        #[test]
        fn parseval(coefs in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 1..12)) {
            let f = band_limited(64, &coefs);
            let c = to_spectral(&f).unwrap();
            let lhs: f64 = c.iter().map(|(_, v)| v.norm_sqr()).sum();
            let rhs = f.iter().map(|v| v * v).sum::<f64>() / 64.0;
            prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.max(1e-300));
            let s0 = sobolev_norm(&f, 0.0).unwrap();
            prop_assert!((s0 * s0 - rhs).abs() <= 1e-12 * rhs.max(1e-300));
        }

        #[test]
        fn second_derivative_composes(coefs in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 1..12)) {
            let f = band_limited(64, &coefs);
            let d2 = derivative(&f, 2).unwrap();
            let dd = derivative(&derivative(&f, 1).unwrap(), 1).unwrap();
            prop_assert!(sup(&d2, &dd) <= 1e-11);
        }

        #[test]
        fn filter_idempotent(vals in proptest::collection::vec(-1.0f64..1.0, 32), thr in 0.0f64..0.5) {
            let once = krasny_filter(&vals, thr).unwrap();
            let twice = krasny_filter(&once, thr).unwrap();
            prop_assert!(sup(&once, &twice) <= 1e-14);
        }
    }
}
