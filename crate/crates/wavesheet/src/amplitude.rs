//! Second-kind integral equations for the vorticity amplitude:
//! (I+J)w = w + 2 BR(z,w).z_a, and the normal-data problem BR(z,w).z_a^perp = u_n |z_a|.
//!
//! On a closed (tilde) contour the operator I+J has a one-dimensional kernel
//! with nonzero mean, so those solves are bordered with the gauge mean(w) = 0.
//! On physical curves it is invertible and the mean is whatever the solve gives.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::birkhoff_rott::{br_boundary, dot, BrOperator, DEFAULT_F_MAX};
use crate::curve::{Domain, InterfaceCurve};
use crate::error::{Error, Result};
use crate::spectral;

pub const MEAN_TOL: f64 = 1e-10;
const DENSE_MAX_N: usize = 512;
const GMRES_RESTART: usize = 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveMethod {
    DenseDirect,
    Iterative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegralEquationSettings {
    pub residual_tol: f64,
    pub max_iterations: usize,
    /// None: dense for N <= 512, iterative with dense fallback above.
    pub method: Option<SolveMethod>,
    /// Prescribed mean of w in the normal-data problem.
    pub normal_data_mean: f64,
    /// Singular values below this times the largest count towards the null space.
    pub rank_threshold: f64,
}

impl Default for IntegralEquationSettings {
    fn default() -> Self {
        IntegralEquationSettings {
            residual_tol: 1e-12,
            max_iterations: 200,
            method: None,
            normal_data_mean: 0.0,
            rank_threshold: 1e-8,
        }
    }
}

impl IntegralEquationSettings {
    pub fn check(&self) -> Result<()> {
        if !(self.residual_tol >= 100.0 * f64::EPSILON) {
            return Err(Error::Config(format!("residual_tol {} below 100 eps", self.residual_tol)));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be positive".into()));
        }
        Ok(())
    }

    fn method_for(&self, n: usize) -> SolveMethod {
        self.method.unwrap_or(if n <= DENSE_MAX_N { SolveMethod::DenseDirect } else { SolveMethod::Iterative })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub values: Vec<f64>,
    /// Sup-norm residual of the (bordered, if any) system actually solved.
    pub residual: f64,
    /// Bordering multiplier; measures how far the data was from the range.
    pub multiplier: f64,
    pub iterations: usize,
    pub method: SolveMethod,
}

/// w + 2 BR(z,w).z_a.
pub fn apply_i_plus_j(curve: &InterfaceCurve, omega: &[f64]) -> Result<Vec<f64>> {
    let br = br_boundary(curve, omega, DEFAULT_F_MAX)?;
    let za = curve.z_alpha()?;
    Ok(omega.iter().zip(br.iter().zip(&za)).map(|(w, (b, t))| w + 2.0 * dot(*b, *t)).collect())
}

/// Which linear map a `LinearSystem` represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    IPlusJ,
    NormalData,
}

/// Assembled matrix, optionally bordered by gauge rows and columns.
struct LinearSystem {
    n: usize,
    extra: usize,
    matrix: DMatrix<f64>,
}

impl LinearSystem {
    fn assemble(curve: &InterfaceCurve, kind: Kind, bordered: bool) -> Result<Self> {
        let n = curve.n();
        let op = BrOperator::new(curve);
        let za = curve.z_alpha()?;
        let rows: Vec<Complex64> = match kind {
            Kind::IPlusJ => za,
            Kind::NormalData => za.iter().map(|v| Complex64::new(-v.im, v.re)).collect(),
        };
        let extra = match (bordered, kind) {
            (false, _) => 0,
            (true, Kind::IPlusJ) => 1,
            (true, Kind::NormalData) => 2,
        };
        let m = n + extra;
        let entries: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut r = vec![0.0; m];
                for (j, v) in r.iter_mut().enumerate().take(n) {
                    let scale = if kind == Kind::IPlusJ { 2.0 } else { 1.0 };
                    *v = scale * dot(op.entry(i, j), rows[i]);
                }
                if kind == Kind::IPlusJ {
                    r[i] += 1.0;
                }
                if extra > 0 {
                    r[n] = 1.0;
                }
                if extra > 1 {
                    r[n + 1] = if i % 2 == 0 { 1.0 } else { -1.0 };
                }
                r
            })
            .collect();
        let mut matrix = DMatrix::zeros(m, m);
        for (i, r) in entries.iter().enumerate() {
            for (j, v) in r.iter().enumerate() {
                matrix[(i, j)] = *v;
            }
        }
        for j in 0..n {
            if extra > 0 {
                matrix[(n, j)] = 1.0 / n as f64;
            }
            if extra > 1 {
                matrix[(n + 1, j)] = if j % 2 == 0 { 1.0 } else { -1.0 } / n as f64;
            }
        }
        Ok(LinearSystem { n, extra, matrix })
    }

    fn rhs(&self, data: &[f64], mean: f64) -> DVector<f64> {
        let tail = [mean, 0.0];
        DVector::from_iterator(self.n + self.extra, data.iter().copied().chain(tail[..self.extra].iter().copied()))
    }

    fn residual(&self, x: &DVector<f64>, b: &DVector<f64>) -> f64 {
        (&self.matrix * x - b).amax()
    }

    fn split(&self, x: &DVector<f64>) -> (Vec<f64>, f64) {
        let v = x.as_slice()[..self.n].to_vec();
        let lam = x.as_slice()[self.n..].iter().fold(0.0f64, |m, v| m.max(v.abs()));
        (v, lam)
    }
}

/// Reusable solver for one curve.
pub struct IntegralSolver {
    system: LinearSystem,
    lu: Option<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
    settings: IntegralEquationSettings,
    method: SolveMethod,
}

impl IntegralSolver {
    fn build(curve: &InterfaceCurve, kind: Kind, bordered: bool, settings: &IntegralEquationSettings) -> Result<Self> {
        settings.check()?;
        // the arc-chord guard of the boundary operator applies to every solve
        let f = crate::curve::arc_chord(curve).sup_f;
        if !(f <= DEFAULT_F_MAX) {
            return Err(Error::ArcChordViolation { sup_f: f, limit: DEFAULT_F_MAX });
        }
        let system = LinearSystem::assemble(curve, kind, bordered)?;
        let method = settings.method_for(curve.n());
        let lu = match method {
            SolveMethod::DenseDirect => Some(system.matrix.clone().lu()),
            SolveMethod::Iterative => None,
        };
        Ok(IntegralSolver { system, lu, settings: *settings, method })
    }

    /// Solver for (I+J) on this curve.
    pub fn i_plus_j(curve: &InterfaceCurve, settings: &IntegralEquationSettings) -> Result<Self> {
        Self::build(curve, Kind::IPlusJ, curve.domain == Domain::Tilde, settings)
    }

    fn dense(&mut self, b: &DVector<f64>) -> Result<(DVector<f64>, usize)> {
        if self.lu.is_none() {
            self.lu = Some(self.system.matrix.clone().lu());
        }
        let lu = self.lu.as_ref().expect("factorization present");
        let mut x = lu.solve(b).ok_or(Error::NonConvergence { residual: f64::INFINITY, iterations: 0 })?;
        // one step of iterative refinement
        let r = b - &self.system.matrix * &x;
        if let Some(dx) = lu.solve(&r) {
            x += dx;
        }
        Ok((x, 1))
    }

    fn solve_system(&mut self, b: DVector<f64>) -> Result<Solution> {
        let tol = self.settings.residual_tol * b.amax().max(1.0);
        let (x, iterations, method) = match self.method {
            SolveMethod::DenseDirect => {
                let (x, it) = self.dense(&b)?;
                (x, it, SolveMethod::DenseDirect)
            }
            SolveMethod::Iterative => {
                let a = &self.system.matrix;
                match gmres(|v| a * v, &b, tol, self.settings.max_iterations, GMRES_RESTART) {
                    Ok((x, it)) => (x, it, SolveMethod::Iterative),
                    Err(_) => {
                        let (x, it) = self.dense(&b)?;
                        (x, it, SolveMethod::DenseDirect)
                    }
                }
            }
        };
        let residual = self.system.residual(&x, &b);
        if !(residual <= tol) {
            return Err(Error::NonConvergence { residual, iterations });
        }
        let (values, multiplier) = self.system.split(&x);
        Ok(Solution { values, residual, multiplier, iterations, method })
    }

    /// Solve (I+J)x = rhs; tilde solves use the gauge mean(x) = 0.
    pub fn solve(&mut self, rhs: &[f64]) -> Result<Solution> {
        if rhs.len() != self.system.n {
            return Err(Error::LengthMismatch { expected: self.system.n, got: rhs.len() });
        }
        let b = self.system.rhs(rhs, 0.0);
        self.solve_system(b)
    }
}

/// w with (1/2)(I+J)w = Phi_a.
pub fn solve_omega_from_phi(curve: &InterfaceCurve, phi_alpha: &[f64], settings: &IntegralEquationSettings) -> Result<Solution> {
    curve.grid.check(phi_alpha)?;
    let m = spectral::mean(phi_alpha);
    if m.abs() > MEAN_TOL {
        return Err(Error::MeanViolation { mean: m });
    }
    let rhs: Vec<f64> = phi_alpha.iter().map(|v| 2.0 * v).collect();
    let mut s = IntegralSolver::i_plus_j(curve, settings)?.solve(&rhs)?;
    s.residual *= 0.5;
    Ok(s)
}

/// w_t with (I+J)w_t = explicit_rhs.
pub fn solve_omega_t(curve: &InterfaceCurve, explicit_rhs: &[f64], settings: &IntegralEquationSettings) -> Result<Solution> {
    curve.grid.check(explicit_rhs)?;
    IntegralSolver::i_plus_j(curve, settings)?.solve(explicit_rhs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalDataSolution {
    pub solution: Solution,
    /// Singular values of the unbordered operator below the rank threshold.
    pub null_dimension: usize,
    pub smallest_singular_values: Vec<f64>,
}

/// w with BR(z,w).z_a^perp = u_n |z_a| and mean(w) = settings.normal_data_mean.
///
/// The alternating-point rule couples only nodes of opposite parity, so the
/// discrete operator also loses the grid mode (-1)^j; it is pinned to zero.
pub fn solve_omega_from_normal_velocity(
    curve: &InterfaceCurve,
    u_normal: &[f64],
    settings: &IntegralEquationSettings,
) -> Result<NormalDataSolution> {
    curve.grid.check(u_normal)?;
    let za = curve.z_alpha()?;
    let flux_density: Vec<f64> = u_normal.iter().zip(&za).map(|(u, t)| u * t.norm()).collect();
    let flux = spectral::mean(&flux_density) * 2.0 * std::f64::consts::PI;
    let scale = flux_density.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    if flux.abs() > MEAN_TOL * scale {
        return Err(Error::Compatibility { flux });
    }
    let mut solver = IntegralSolver::build(curve, Kind::NormalData, true, settings)?;

    let n = curve.n();
    let plain = solver.system.matrix.view((0, 0), (n, n)).into_owned();
    let sv = plain.singular_values();
    let smax = sv.max();
    let mut small: Vec<f64> = sv.iter().copied().filter(|s| *s <= settings.rank_threshold * smax).collect();
    small.sort_by(f64::total_cmp);
    let null_dimension = small.len();
    // constants plus the odd-even mode that the alternating quadrature cannot see
    if null_dimension > 2 {
        return Err(Error::RankDeficient { dim: null_dimension });
    }
    let mut sorted: Vec<f64> = sv.iter().copied().collect();
    sorted.sort_by(f64::total_cmp);
    sorted.truncate(3);

    let b = solver.system.rhs(&flux_density, settings.normal_data_mean);
    let solution = solver.solve_system(b)?;
    Ok(NormalDataSolution { solution, null_dimension, smallest_singular_values: sorted })
}

/// Restarted GMRES with modified Gram-Schmidt; returns (x, total iterations).
pub fn gmres(
    apply: impl Fn(&DVector<f64>) -> DVector<f64>,
    b: &DVector<f64>,
    tol: f64,
    max_iter: usize,
    restart: usize,
) -> Result<(DVector<f64>, usize)> {
    let n = b.len();
    let mut x = DVector::zeros(n);
    let mut total = 0;
    let mut res = b.norm();
    if res <= tol {
        return Ok((x, 0));
    }
    while total < max_iter {
        let r = b - apply(&x);
        let beta = r.norm();
        if r.amax() <= tol {
            return Ok((x, total));
        }
        let m = restart.min(max_iter - total).min(n);
        let mut v: Vec<DVector<f64>> = vec![r / beta];
        let mut hm = DMatrix::<f64>::zeros(m + 1, m);
        let (mut cs, mut sn) = (vec![0.0; m], vec![0.0; m]);
        let mut g = DVector::<f64>::zeros(m + 1);
        g[0] = beta;
        let mut k_used = 0;
        for k in 0..m {
            let mut w = apply(&v[k]);
            for (i, vi) in v.iter().enumerate() {
                let hik = w.dot(vi);
                hm[(i, k)] = hik;
                w.axpy(-hik, vi, 1.0);
            }
            let hn = w.norm();
            hm[(k + 1, k)] = hn;
            for i in 0..k {
                let t = cs[i] * hm[(i, k)] + sn[i] * hm[(i + 1, k)];
                hm[(i + 1, k)] = -sn[i] * hm[(i, k)] + cs[i] * hm[(i + 1, k)];
                hm[(i, k)] = t;
            }
            let d = hm[(k, k)].hypot(hm[(k + 1, k)]);
            cs[k] = hm[(k, k)] / d;
            sn[k] = hm[(k + 1, k)] / d;
            hm[(k, k)] = d;
            hm[(k + 1, k)] = 0.0;
            g[k + 1] = -sn[k] * g[k];
            g[k] *= cs[k];
            total += 1;
            k_used = k + 1;
            res = g[k + 1].abs();
            if res <= 0.1 * tol || hn == 0.0 {
                break;
            }
            v.push(w / hn);
        }
        let mut y = DVector::<f64>::zeros(k_used);
        for i in (0..k_used).rev() {
            let mut s = g[i];
            for j in i + 1..k_used {
                s -= hm[(i, j)] * y[j];
            }
            y[i] = s / hm[(i, i)];
        }
        for (i, yi) in y.iter().enumerate() {
            x.axpy(*yi, &v[i], 1.0);
        }
    }
    let r = (b - apply(&x)).amax();
    if r <= tol {
        Ok((x, total))
    } else {
        Err(Error::NonConvergence { residual: r.max(res), iterations: total })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::Grid;
    use proptest::prelude::*;

    fn perturbed_sheet(n: usize) -> InterfaceCurve {
        let g = Grid::new(n).unwrap();
        InterfaceCurve::new(
            Domain::Physical,
            g.alphas().iter().map(|a| 0.1 * a.sin()).collect(),
            g.alphas().iter().map(|a| 0.1 * a.cos()).collect(),
        )
        .unwrap()
    }

    fn wobbly_contour(n: usize) -> InterfaceCurve {
        let g = Grid::new(n).unwrap();
        let r = |a: f64| 1.0 + 0.15 * (3.0 * a).cos();
        InterfaceCurve::new(
            Domain::Tilde,
            g.alphas().iter().map(|a| r(*a) * a.cos()).collect(),
            g.alphas().iter().map(|a| -r(*a) * a.sin()).collect(),
        )
        .unwrap()
    }

    fn with_method(m: SolveMethod) -> IntegralEquationSettings {
        IntegralEquationSettings { method: Some(m), ..Default::default() }
    }

    #[test]
    fn flat_sheet_is_identity() {
        let c = InterfaceCurve::flat(32, 0.0).unwrap();
        let cosine: Vec<f64> = c.grid.alphas().iter().map(|a| a.cos()).collect();
        assert_eq!(apply_i_plus_j(&c, &cosine).unwrap(), cosine);
        let w = solve_omega_from_phi(&c, &cosine, &Default::default()).unwrap();
        assert!(w.values.iter().zip(&cosine).all(|(x, y)| (x - 2.0 * y).abs() < 1e-14));
        let zero = solve_omega_from_phi(&c, &vec![0.0; 32], &Default::default()).unwrap();
        assert!(zero.values.iter().all(|v| *v == 0.0));
        assert!(apply_i_plus_j(&c, &vec![0.0; 32]).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn operator_matches_column_assembly() {
        let c = InterfaceCurve::circle(32, Complex64::new(0.2, 0.0), 1.3, true).unwrap();
        let n = 32;
        let cols: Vec<Vec<f64>> = (0..n)
            .map(|j| {
                let mut e = vec![0.0; n];
                e[j] = 1.0;
                apply_i_plus_j(&c, &e).unwrap()
            })
            .collect();
        for k in 1..4 {
            let w: Vec<f64> = c.grid.alphas().iter().map(|a| (k as f64 * a).cos()).collect();
            let direct = apply_i_plus_j(&c, &w).unwrap();
            for i in 0..n {
                let s: f64 = (0..n).map(|j| cols[j][i] * w[j]).sum();
                assert!((s - direct[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn clockwise_circle_has_constant_kernel() {
        let c = InterfaceCurve::circle(64, Complex64::new(0.0, 0.0), 0.7, true).unwrap();
        let out = apply_i_plus_j(&c, &vec![1.0; 64]).unwrap();
        assert!(out.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn dense_and_gmres_agree() {
        for c in [perturbed_sheet(64), wobbly_contour(64)] {
            let rhs: Vec<f64> = c.grid.alphas().iter().map(|a| (2.0 * a).sin()).collect();
            let d = solve_omega_from_phi(&c, &rhs, &with_method(SolveMethod::DenseDirect)).unwrap();
            let g = solve_omega_from_phi(&c, &rhs, &with_method(SolveMethod::Iterative)).unwrap();
            assert_eq!(g.method, SolveMethod::Iterative);
            let err = d.values.iter().zip(&g.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err <= 1e-8, "{err}");
        }
    }

    #[test]
    fn manufactured_omega_t() {
        for c in [perturbed_sheet(128), wobbly_contour(128)] {
            let target: Vec<f64> = c.grid.alphas().iter().map(|a| (3.0 * a).sin() + 0.4 * a.cos()).collect();
            let rhs = apply_i_plus_j(&c, &target).unwrap();
            let s = solve_omega_t(&c, &rhs, &Default::default()).unwrap();
            let err = s.values.iter().zip(&target).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err <= 1e-9, "{err}");
            assert!(s.multiplier.abs() < 1e-12);
        }
        let c = perturbed_sheet(32);
        let s = solve_omega_t(&c, &vec![0.0; 32], &Default::default()).unwrap();
        assert!(s.values.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn mean_violation_is_rejected() {
        let c = perturbed_sheet(32);
        let r = solve_omega_from_phi(&c, &vec![1e-6; 32], &Default::default());
        assert!(matches!(r, Err(Error::MeanViolation { .. })));
    }

    #[test]
    fn normal_data_manufactured() {
        for c in [perturbed_sheet(64), wobbly_contour(64)] {
            let target: Vec<f64> = c.grid.alphas().iter().map(|a| 0.5 * (2.0 * a).cos() + a.sin()).collect();
            let br = br_boundary(&c, &target, DEFAULT_F_MAX).unwrap();
            let za = c.z_alpha().unwrap();
            let un: Vec<f64> = br.iter().zip(&za).map(|(b, t)| dot(*b, Complex64::new(-t.im, t.re)) / t.norm()).collect();
            let s = solve_omega_from_normal_velocity(&c, &un, &Default::default()).unwrap();
            assert!(s.null_dimension <= 2, "{:?}", s.smallest_singular_values);
            let shift = spectral::mean(&target) - spectral::mean(&s.solution.values);
            let err = s.solution.values.iter().zip(&target).map(|(a, b)| (a + shift - b).abs()).fold(0.0, f64::max);
            assert!(err <= 1e-8, "{err}");
        }
    }

    #[test]
    fn normal_data_examples() {
        let c = InterfaceCurve::circle(64, Complex64::new(0.0, 0.0), 1.0, true).unwrap();
        let s = solve_omega_from_normal_velocity(&c, &vec![0.0; 64], &Default::default()).unwrap();
        assert!(s.solution.values.iter().all(|v| v.abs() < 1e-14));
        let r = solve_omega_from_normal_velocity(&c, &vec![0.3; 64], &Default::default());
        assert!(matches!(r, Err(Error::Compatibility { .. })));
    }

    #[test]
    fn settings_invariant() {
        let s = IntegralEquationSettings { residual_tol: 1e-16, ..Default::default() };
        assert!(s.check().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn apply_then_solve_round_trips(coefs in proptest::collection::vec(-1.0f64..1.0, 8)) {
            for c in [perturbed_sheet(64), wobbly_contour(64)] {
                let mut w: Vec<f64> = c.grid.alphas().iter().map(|a| {
                    coefs.iter().enumerate().map(|(k, ck)| {
                        let m = (k / 2 + 1) as f64;
                        if k % 2 == 0 { ck * (m * a).cos() } else { ck * (m * a).sin() }
                    }).sum()
                }).collect();
                if c.domain == Domain::Tilde {
                    let m = spectral::mean(&w);
                    w.iter_mut().for_each(|v| *v -= m);
                }
                let rhs = apply_i_plus_j(&c, &w).unwrap();
                let back = solve_omega_t(&c, &rhs, &Default::default()).unwrap();
                let err = back.values.iter().zip(&w).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                prop_assert!(err <= 1e-11, "{}", err);
            }
        }
    }
}
