//! Interface curves: sampling, tangents and normals, the arc-chord functional,
//! splash/splat validation, the splash initial-data family, and mapping
//! curves between the physical strip and the tilde plane.
//!
//! Physical curves store z1(a) - a (the periodic part); tilde curves store the
//! closed contour directly. The normal (-z2_a, z1_a)/|z_a| must point into the
//! vacuum, which puts the water to the right of increasing a: tilde curves
//! therefore run clockwise around the water.

use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conformal::{self, Branch, PlanePoint};
use crate::error::{Error, Result};
use crate::numerics::{brent_min, brent_root};
use crate::spectral::{self, Grid, TrigInterp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Physical,
    Tilde,
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Domain::Physical => "physical",
            Domain::Tilde => "tilde",
        })
    }
}

impl std::str::FromStr for Domain {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "physical" => Ok(Domain::Physical),
            "tilde" => Ok(Domain::Tilde),
            _ => Err(Error::Config(format!("unknown domain '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterfaceCurve {
    pub grid: Grid,
    pub z1: Vec<f64>,
    pub z2: Vec<f64>,
    pub domain: Domain,
}

pub fn wrap_angle(x: f64) -> f64 {
    let y = (x + PI).rem_euclid(2.0 * PI) - PI;
    if y == -PI {
        -PI
    } else {
        y
    }
}

impl InterfaceCurve {
    pub fn new(domain: Domain, z1: Vec<f64>, z2: Vec<f64>) -> Result<Self> {
        let grid = Grid::for_field(&z1)?;
        grid.check(&z2)?;
        Ok(InterfaceCurve { grid, z1, z2, domain })
    }

    /// Physical curve from full first coordinate samples x(a_j).
    pub fn physical_from_full(x: &[f64], y: Vec<f64>) -> Result<Self> {
        let grid = Grid::for_field(x)?;
        let z1 = x.iter().enumerate().map(|(j, v)| v - grid.alpha(j)).collect();
        InterfaceCurve::new(Domain::Physical, z1, y)
    }

    pub fn n(&self) -> usize {
        self.grid.n()
    }

    /// Full coordinates z(a_j) as complex numbers.
    pub fn points(&self) -> Vec<Complex64> {
        (0..self.n())
            .map(|j| {
                let shift = if self.domain == Domain::Physical { self.grid.alpha(j) } else { 0.0 };
                Complex64::new(self.z1[j] + shift, self.z2[j])
            })
            .collect()
    }

    /// z_a at the grid nodes.
    pub fn z_alpha(&self) -> Result<Vec<Complex64>> {
        let d1 = spectral::derivative(&self.z1, 1)?;
        let d2 = spectral::derivative(&self.z2, 1)?;
        let one = if self.domain == Domain::Physical { 1.0 } else { 0.0 };
        Ok(d1.iter().zip(&d2).map(|(a, b)| Complex64::new(a + one, *b)).collect())
    }

    /// k-th derivative (k >= 2) of the curve at the nodes.
    pub fn z_deriv(&self, k: u32) -> Result<Vec<Complex64>> {
        if k == 1 {
            return self.z_alpha();
        }
        let d1 = spectral::derivative(&self.z1, k)?;
        let d2 = spectral::derivative(&self.z2, k)?;
        Ok(d1.iter().zip(&d2).map(|(a, b)| Complex64::new(*a, *b)).collect())
    }

    /// Chord between two points of this curve, in T x R for physical curves.
    pub fn chord(&self, p: Complex64, q: Complex64) -> f64 {
        let d = p - q;
        match self.domain {
            Domain::Physical => Complex64::new(wrap_angle(d.re), d.im).norm(),
            Domain::Tilde => d.norm(),
        }
    }

    pub fn interp(&self) -> Result<CurveInterp> {
        Ok(CurveInterp { x: TrigInterp::new(&self.z1)?, y: TrigInterp::new(&self.z2)?, domain: self.domain })
    }

    /// stdev(|z_a|) / mean(|z_a|).
    pub fn uniformity_spread(&self) -> Result<f64> {
        let s: Vec<f64> = self.z_alpha()?.iter().map(|v| v.norm()).collect();
        Ok(relative_spread(&s))
    }

    pub fn flat(n: usize, height: f64) -> Result<Self> {
        InterfaceCurve::new(Domain::Physical, vec![0.0; n], vec![height; n])
    }

    /// z = (a, height + eps cos(k a)) before any reparametrization.
    pub fn standing_wave(n: usize, eps: f64, k: f64, height: f64) -> Result<Self> {
        let g = Grid::new(n)?;
        let z2 = g.alphas().iter().map(|a| height + eps * (k * a).cos()).collect();
        InterfaceCurve::new(Domain::Physical, vec![0.0; n], z2)
    }

    /// Tilde circle; `clockwise` gives the water-inside orientation.
    pub fn circle(n: usize, center: Complex64, radius: f64, clockwise: bool) -> Result<Self> {
        let g = Grid::new(n)?;
        let s = if clockwise { -1.0 } else { 1.0 };
        let z1 = g.alphas().iter().map(|a| center.re + radius * a.cos()).collect();
        let z2 = g.alphas().iter().map(|a| center.im + s * radius * a.sin()).collect();
        InterfaceCurve::new(Domain::Tilde, z1, z2)
    }
}

pub fn relative_spread(s: &[f64]) -> f64 {
    let m = spectral::mean(s);
    let var = s.iter().map(|v| (v - m).powi(2)).sum::<f64>() / s.len() as f64;
    var.sqrt() / m.abs()
}

/// Trigonometric interpolant of a curve.
#[derive(Debug, Clone)]
pub struct CurveInterp {
    x: TrigInterp,
    y: TrigInterp,
    domain: Domain,
}

impl CurveInterp {
    pub fn eval(&self, a: f64) -> Complex64 {
        let shift = if self.domain == Domain::Physical { a } else { 0.0 };
        Complex64::new(self.x.eval(a) + shift, self.y.eval(a))
    }

    pub fn eval_deriv(&self, a: f64) -> Complex64 {
        let one = if self.domain == Domain::Physical { 1.0 } else { 0.0 };
        Complex64::new(self.x.eval_deriv(a, 1) + one, self.y.eval_deriv(a, 1))
    }

    fn chord(&self, p: Complex64, q: Complex64) -> f64 {
        let d = p - q;
        match self.domain {
            Domain::Physical => Complex64::new(wrap_angle(d.re), d.im).norm(),
            Domain::Tilde => d.norm(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TangentData {
    pub z_alpha: Vec<[f64; 2]>,
    pub speed: Vec<f64>,
    pub normal: Vec<[f64; 2]>,
}

pub fn tangent_data(curve: &InterfaceCurve) -> Result<TangentData> {
    let za = curve.z_alpha()?;
    let speed: Vec<f64> = za.iter().map(|v| v.norm()).collect();
    let min_speed = speed.iter().cloned().fold(f64::INFINITY, f64::min);
    if min_speed < 1e-10 {
        return Err(Error::DegenerateTangent { min_speed });
    }
    let normal = za.iter().zip(&speed).map(|(v, s)| [-v.im / s, v.re / s]).collect();
    Ok(TangentData { z_alpha: za.iter().map(|v| [v.re, v.im]).collect(), speed, normal })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArcChordReport {
    pub sup_f: f64,
    pub argmax: (f64, f64),
    /// min chord over node pairs at index separation k, for k = 1..=N/2 (entry k-1).
    pub min_chord_by_separation: Vec<f64>,
    pub h: f64,
}

impl ArcChordReport {
    /// Minimum chord over node pairs with parameter separation |beta| >= delta.
    pub fn min_separated_distance(&self, delta: f64) -> f64 {
        self.min_chord_by_separation
            .iter()
            .enumerate()
            .filter(|(k, _)| (k + 1) as f64 * self.h >= delta - 1e-12)
            .map(|(_, v)| *v)
            .fold(f64::INFINITY, f64::min)
    }
}

/// sup of |beta| / |z(a) - z(a - beta)| over node pairs.
pub fn arc_chord(curve: &InterfaceCurve) -> ArcChordReport {
    let n = curve.n();
    let h = curve.grid.h();
    let pts = curve.points();
    let half = n / 2;
    let rows: Vec<(f64, usize, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut best = 0.0;
            let mut best_k = 1;
            let mut mins = vec![f64::INFINITY; half];
            for k in 1..=half {
                let j = (i + n - k) % n;
                let c = curve.chord(pts[i], pts[j]);
                let f = if c < 1e-300 { f64::INFINITY } else { k as f64 * h / c };
                if f > best {
                    best = f;
                    best_k = k;
                }
                mins[k - 1] = mins[k - 1].min(c);
            }
            (best, best_k, mins)
        })
        .collect();
    let mut sup_f = 0.0;
    let mut argmax = (curve.grid.alpha(0), h);
    let mut min_by = vec![f64::INFINITY; half];
    for (i, (f, k, mins)) in rows.iter().enumerate() {
        if *f > sup_f {
            sup_f = *f;
            argmax = (curve.grid.alpha(i), *k as f64 * h);
        }
        for (m, v) in min_by.iter_mut().zip(mins) {
            *m = m.min(*v);
        }
    }
    ArcChordReport { sup_f, argmax, min_chord_by_separation: min_by, h }
}

/// Minimize g(a, b) over a box by nested 1-D Brent searches (outer a, inner b).
fn nested_min(g: impl Fn(f64, f64) -> f64, a_lo: f64, a_hi: f64, b_lo: f64, b_hi: f64) -> (f64, f64, f64) {
    let inner = |a: f64| brent_min(|b| g(a, b), b_lo, b_hi, 1e-13, 200);
    let (a, v) = brent_min(|a| inner(a).1, a_lo, a_hi, 1e-13, 200);
    let (b, _) = inner(a);
    (a, b, v)
}

/// Minimum separated distance refined off the grid with the trigonometric
/// interpolant. Returns (distance, a, b).
pub fn refined_min_separated_distance(curve: &InterfaceCurve, delta: f64) -> Result<(f64, f64, f64)> {
    let n = curve.n();
    let h = curve.grid.h();
    let pts = curve.points();
    let kmin = ((delta / h) - 1e-9).ceil().max(1.0) as usize;
    let (mut best, mut bi, mut bj) = (f64::INFINITY, 0, 0);
    for i in 0..n {
        for k in kmin..=n / 2 {
            let j = (i + k) % n;
            let c = curve.chord(pts[i], pts[j]);
            if c < best {
                best = c;
                bi = i;
                bj = j;
            }
        }
    }
    let it = curve.interp()?;
    let (a0, b0) = (curve.grid.alpha(bi), curve.grid.alpha(bj));
    let w = 1.5 * h;
    let (a, b, v) = nested_min(|a, b| it.chord(it.eval(a), it.eval(b)), a0 - w, a0 + w, b0 - w, b0 + w);
    Ok(if v < best { (v, a, b) } else { (best, a0, b0) })
}

/// sup F refined off the grid around the node argmax. Infinite for exact touches.
pub fn refined_arc_chord_sup(curve: &InterfaceCurve) -> Result<f64> {
    let rep = arc_chord(curve);
    if !rep.sup_f.is_finite() {
        return Ok(f64::INFINITY);
    }
    let it = curve.interp()?;
    let (a0, beta0) = rep.argmax;
    let h = curve.grid.h();
    let inv = |a: f64, beta: f64| {
        let c = it.chord(it.eval(a), it.eval(a - beta));
        c / beta.abs().max(1e-300)
    };
    // keep beta away from 0, where the ratio degenerates to 0/0
    let w = 1.5 * h;
    let (_, _, v) = nested_min(inv, a0 - w, a0 + w, (beta0 - w).max(0.25 * h), beta0 + w);
    let refined = if v > 0.0 { 1.0 / v } else { f64::INFINITY };
    Ok(refined.max(rep.sup_f))
}

/// Reparametrize to uniform |z_a|. Returns the new curve and, for each new node,
/// the old parameter value it came from.
pub fn reparametrize_uniform(curve: &InterfaceCurve) -> Result<(InterfaceCurve, Vec<f64>)> {
    let mut cur = curve.clone();
    let mut total: Vec<f64> = cur.grid.alphas();
    for _ in 0..3 {
        let (next, src) = reparam_once(&cur)?;
        // compose the source maps: src is in the parameter of `cur`
        let it = TrigInterp::new(&total.iter().zip(cur.grid.alphas()).map(|(t, a)| t - a).collect::<Vec<_>>())?;
        total = src.iter().map(|&a| a + it.eval(a)).collect();
        cur = next;
        if cur.uniformity_spread()? < 1e-13 {
            break;
        }
    }
    Ok((cur, total))
}

fn reparam_once(curve: &InterfaceCurve) -> Result<(InterfaceCurve, Vec<f64>)> {
    let n = curve.n();
    let g = curve.grid;
    let speed: Vec<f64> = curve.z_alpha()?.iter().map(|v| v.norm()).collect();
    let mean = spectral::mean(&speed);
    let gi = TrigInterp::new(&spectral::antiderivative(&speed)?)?;
    let si = TrigInterp::new(&speed)?;
    let g0 = gi.eval(-PI);
    let arc = |a: f64| mean * (a + PI) + gi.eval(a) - g0;
    let src: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|j| {
            let target = mean * (g.alpha(j) + PI);
            // arc is increasing: Newton safeguarded by a shrinking bracket
            let (mut lo, mut hi) = (-PI, PI);
            let mut a = g.alpha(j);
            for _ in 0..200 {
                let r = arc(a) - target;
                if r > 0.0 {
                    hi = a;
                } else {
                    lo = a;
                }
                let mut next = a - r / si.eval(a);
                if !(next > lo && next < hi) {
                    next = 0.5 * (lo + hi);
                }
                let done = (next - a).abs() < 1e-15 || hi - lo < 1e-15;
                a = next;
                if done {
                    break;
                }
            }
            a
        })
        .collect();
    let it = curve.interp()?;
    let mut z1 = Vec::with_capacity(n);
    let mut z2 = Vec::with_capacity(n);
    for (j, &a) in src.iter().enumerate() {
        let p = it.eval(a);
        let shift = if curve.domain == Domain::Physical { g.alpha(j) } else { 0.0 };
        z1.push(p.re - shift);
        z2.push(p.im);
    }
    Ok((InterfaceCurve::new(curve.domain, z1, z2)?, src))
}

/// Evaluate a periodic field at arbitrary parameter values.
pub fn resample_field(f: &[f64], at: &[f64]) -> Result<Vec<f64>> {
    let it = TrigInterp::new(f)?;
    Ok(at.iter().map(|&a| it.eval(a)).collect())
}

/// Polygon through the curve at `refine` times the grid density.
fn dense_polygon(curve: &InterfaceCurve, refine: usize) -> Result<Vec<Complex64>> {
    let m = curve.n() * refine;
    let z1 = spectral::resample(&curve.z1, m)?;
    let z2 = spectral::resample(&curve.z2, m)?;
    let g = Grid::new(m)?;
    Ok((0..m)
        .map(|j| {
            let shift = if curve.domain == Domain::Physical { g.alpha(j) } else { 0.0 };
            Complex64::new(z1[j] + shift, z2[j])
        })
        .collect())
}

/// Number of crossings of the downward vertical ray from p with the polygon.
fn downward_crossings(poly: &[Complex64], periodic: bool, p: Complex64) -> usize {
    let m = poly.len();
    let mut count = 0;
    for j in 0..m {
        let a = poly[j];
        let mut b = poly[(j + 1) % m];
        if periodic && j + 1 == m {
            b.re += 2.0 * PI;
        }
        // nudge off vertices so the seam copy and its neighbour agree after rounding
        let mut px = p.re + 1e-11;
        if periodic {
            let mid = 0.5 * (a.re + b.re);
            px += 2.0 * PI * ((mid - px) / (2.0 * PI)).round();
        }
        let (lo, hi) = if a.re <= b.re { (a, b) } else { (b, a) };
        if px < lo.re || px >= hi.re || lo.re == hi.re {
            continue;
        }
        let t = (px - lo.re) / (hi.re - lo.re);
        let y = lo.im + t * (hi.im - lo.im);
        if y < p.im {
            count += 1;
        }
    }
    count
}

/// Region classifier for a curve; built once, queried many times.
pub struct RegionTest {
    poly: Vec<Complex64>,
    domain: Domain,
}

impl RegionTest {
    pub fn new(curve: &InterfaceCurve) -> Result<Self> {
        Ok(RegionTest { poly: dense_polygon(curve, 4)?, domain: curve.domain })
    }

    /// True when p lies in the vacuum. Physical: the downward ray from p reaches
    /// deep water after an odd number of crossings. Tilde: p is outside the contour.
    pub fn is_vacuum(&self, p: Complex64) -> bool {
        match self.domain {
            Domain::Physical => downward_crossings(&self.poly, true, p) % 2 == 1,
            Domain::Tilde => downward_crossings(&self.poly, false, p) % 2 == 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Classification {
    Splash,
    Splat,
    Neither,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub conditions: Vec<ConditionResult>,
    pub classification: Classification,
    /// Parameter pairs of the touching set (one per cluster, the closest pair).
    pub touch_pairs: Vec<(f64, f64)>,
    pub q_margins: Option<[f64; 5]>,
    pub tilde_arc_chord: Option<f64>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.conditions.iter().all(|c| c.passed)
    }

    pub fn failed(&self) -> Vec<&ConditionResult> {
        self.conditions.iter().filter(|c| !c.passed).collect()
    }

    pub fn condition(&self, prefix: &str) -> Option<&ConditionResult> {
        self.conditions.iter().find(|c| c.name.starts_with(prefix))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ValidationOptions {
    pub touch_tol: f64,
    pub exclusion: f64,
    pub periodicity_tol: f64,
    pub tilde_arc_chord_max: f64,
    pub q_margin_min: f64,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        ValidationOptions {
            touch_tol: 1e-10,
            exclusion: 0.2,
            periodicity_tol: 1e-8,
            tilde_arc_chord_max: 1e3,
            q_margin_min: 1e-6,
        }
    }
}

/// Largest Fourier amplitude in the top quarter of the spectrum, relative to
/// the largest amplitude overall. Sampled data that is not smooth and periodic
/// leaves a slowly decaying tail.
pub fn spectral_tail(f: &[f64]) -> Result<f64> {
    let c = spectral::to_spectral(f)?;
    let n = c.n() as i64;
    let max = c.iter().map(|(_, v)| v.norm()).fold(0.0, f64::max).max(1e-300);
    let tail = c.iter().filter(|(m, _)| m.abs() >= n / 4).map(|(_, v)| v.norm()).fold(0.0, f64::max);
    Ok(tail / max)
}

pub fn check_periodicity(curve: &InterfaceCurve, tol: f64) -> Result<ConditionResult> {
    let t = spectral_tail(&curve.z1)?.max(spectral_tail(&curve.z2)?);
    Ok(ConditionResult {
        name: "1 periodicity".into(),
        passed: t <= tol,
        detail: format!("relative spectral tail {t:.3e} (limit {tol:.1e})"),
    })
}

struct TouchScan {
    clusters: Vec<Vec<(usize, usize, f64)>>,
}

fn scan_touching(curve: &InterfaceCurve, opts: &ValidationOptions) -> TouchScan {
    let n = curve.n();
    let h = curve.grid.h();
    let pts = curve.points();
    let kmin = ((opts.exclusion / h) - 1e-9).ceil().max(1.0) as usize;
    let mut pairs = Vec::new();
    for i in 0..n {
        for k in kmin..=n / 2 {
            let j = (i + k) % n;
            if k == n / 2 && j < i {
                continue;
            }
            let c = curve.chord(pts[i], pts[j]);
            if c < opts.touch_tol {
                pairs.push((i, j, c));
            }
        }
    }
    let near = |a: usize, b: usize| {
        let d = (a as i64 - b as i64).rem_euclid(n as i64);
        d <= 1 || d == n as i64 - 1
    };
    let mut clusters: Vec<Vec<(usize, usize, f64)>> = Vec::new();
    for p in pairs {
        let hit = clusters.iter().position(|cl| {
            cl.iter().any(|q| (near(p.0, q.0) && near(p.1, q.1)) || (near(p.0, q.1) && near(p.1, q.0)))
        });
        match hit {
            Some(k) => clusters[k].push(p),
            None => clusters.push(vec![p]),
        }
    }
    TouchScan { clusters }
}

fn validate_common(curve: &InterfaceCurve, opts: &ValidationOptions, want_splat: bool) -> Result<ValidationReport> {
    if curve.domain != Domain::Physical {
        return Err(Error::Validation("splash/splat validation expects a physical curve".into()));
    }
    let mut conds = Vec::new();
    conds.push(check_periodicity(curve, opts.periodicity_tol)?);

    let scan = scan_touching(curve, opts);
    let g = curve.grid;
    let za = curve.z_alpha()?;
    let touch_pairs: Vec<(f64, f64)> = scan
        .clusters
        .iter()
        .map(|cl| {
            let best = cl.iter().min_by(|a, b| a.2.total_cmp(&b.2)).unwrap();
            (g.alpha(best.0), g.alpha(best.1))
        })
        .collect();
    let is_arc = |cl: &Vec<(usize, usize, f64)>| cl.len() >= 3;
    let classification = if scan.clusters.is_empty() {
        Classification::Neither
    } else if scan.clusters.iter().any(is_arc) {
        Classification::Splat
    } else {
        Classification::Splash
    };

    let touch_ok;
    let detail;
    if want_splat {
        touch_ok = scan.clusters.len() == 1 && is_arc(&scan.clusters[0]);
        detail = format!(
            "{} touching cluster(s), sizes {:?}",
            scan.clusters.len(),
            scan.clusters.iter().map(|c| c.len()).collect::<Vec<_>>()
        );
    } else if scan.clusters.len() == 1 && !is_arc(&scan.clusters[0]) {
        let best = scan.clusters[0].iter().min_by(|a, b| a.2.total_cmp(&b.2)).unwrap();
        let (s1, s2) = (za[best.0].norm(), za[best.1].norm());
        // arc-chord with a neighbourhood of the first touch parameter removed
        let pts = curve.points();
        let n = curve.n();
        let a1 = g.alpha(best.0);
        let mut sup = 0.0f64;
        for i in 0..n {
            if wrap_angle(g.alpha(i) - a1).abs() < opts.exclusion {
                continue;
            }
            for k in 1..=n / 2 {
                let j = (i + n - k) % n;
                if wrap_angle(g.alpha(j) - a1).abs() < opts.exclusion {
                    continue;
                }
                let c = curve.chord(pts[i], pts[j]);
                sup = sup.max(k as f64 * g.h() / c.max(1e-300));
            }
        }
        touch_ok = s1 > 1e-8 && s2 > 1e-8 && sup.is_finite() && sup < 1e12;
        detail = format!(
            "touch at ({:.6}, {:.6}), chord {:.2e}, |z_a| = ({:.3e}, {:.3e}), separated arc-chord {:.4e}",
            g.alpha(best.0),
            g.alpha(best.1),
            best.2,
            s1,
            s2,
            sup
        );
    } else {
        touch_ok = false;
        detail = format!(
            "{} touching cluster(s), sizes {:?}; exactly one point contact required",
            scan.clusters.len(),
            scan.clusters.iter().map(|c| c.len()).collect::<Vec<_>>()
        );
    }
    conds.push(ConditionResult { name: "2 single touching pair".into(), passed: touch_ok, detail });
    if want_splat {
        conds.last_mut().unwrap().name = "2' touching arcs".into();
    }

    // orientation: points just off the curve along the normal lie in the vacuum
    let region = RegionTest::new(curve)?;
    let td = tangent_data(curve)?;
    let pts = curve.points();
    let eps = 0.05 * g.h() * spectral::mean(&td.speed);
    let mut bad = 0;
    let mut tested = 0;
    for j in 0..curve.n() {
        let near_touch = touch_pairs.iter().any(|(a, b)| {
            wrap_angle(g.alpha(j) - a).abs() < opts.exclusion || wrap_angle(g.alpha(j) - b).abs() < opts.exclusion
        });
        if near_touch {
            continue;
        }
        tested += 1;
        let nrm = Complex64::new(td.normal[j][0], td.normal[j][1]);
        if !region.is_vacuum(pts[j] + eps * nrm) || region.is_vacuum(pts[j] - eps * nrm) {
            bad += 1;
        }
    }
    conds.push(ConditionResult {
        name: "3 normal points to vacuum".into(),
        passed: bad == 0 && tested > 0,
        detail: format!("{bad} of {tested} probes misoriented"),
    });

    let marks = [Complex64::new(PI, 0.0), Complex64::new(-PI, 0.0), Complex64::new(0.0, 0.0)];
    let dist = marks.iter().map(|m| pts.iter().map(|p| curve.chord(*p, *m)).fold(f64::INFINITY, f64::min));
    let dmin = dist.fold(f64::INFINITY, f64::min);
    let all_vac = marks.iter().all(|m| region.is_vacuum(*m));
    conds.push(ConditionResult {
        name: "5 (+-pi,0) and (0,0) in vacuum".into(),
        passed: all_vac && dmin > opts.touch_tol,
        detail: format!("in vacuum: {all_vac}, distance to curve {dmin:.3e}"),
    });

    let mut q_margins = None;
    let mut tilde_f = None;
    match map_curve(curve, MapDirection::ToTilde) {
        Ok(t) => {
            let m = conformal::min_distance_to_q(&t.points());
            let f = arc_chord(&t).sup_f;
            q_margins = Some(m);
            tilde_f = Some(f);
            let mmin = m.iter().cloned().fold(f64::INFINITY, f64::min);
            conds.push(ConditionResult {
                name: "4 tilde image closed and arc-chord".into(),
                passed: f.is_finite() && f <= opts.tilde_arc_chord_max,
                detail: format!("closed; tilde arc-chord {f:.4e}"),
            });
            conds.push(ConditionResult {
                name: "6 tilde image avoids q-points".into(),
                passed: mmin > opts.q_margin_min,
                detail: format!("m(q) = [{:.4}, {:.4}, {:.4}, {:.4}, {:.4}]", m[0], m[1], m[2], m[3], m[4]),
            });
        }
        Err(e) => {
            conds.push(ConditionResult {
                name: "4 tilde image closed and arc-chord".into(),
                passed: false,
                detail: format!("mapping failed: {e}"),
            });
            conds.push(ConditionResult {
                name: "6 tilde image avoids q-points".into(),
                passed: false,
                detail: "not evaluated".into(),
            });
        }
    }
    Ok(ValidationReport { conditions: conds, classification, touch_pairs, q_margins, tilde_arc_chord: tilde_f })
}

pub fn validate_splash_curve(curve: &InterfaceCurve, opts: &ValidationOptions) -> Result<ValidationReport> {
    validate_common(curve, opts, false)
}

pub fn validate_splat_curve(curve: &InterfaceCurve, opts: &ValidationOptions) -> Result<ValidationReport> {
    validate_common(curve, opts, true)
}

/// Shape of the overturned trigonometric family
/// z1 = a + A sin a + B sin 2a + C3 sin 3a, z2 = b0 + b1 cos a + b2 cos 2a.
/// B is tied to A so that z1 has a vertical tangent at a = +-alpha_c; A is found
/// by root-finding so that z1(alpha_c) = pinch / 2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplashShape {
    pub n: usize,
    pub alpha_c: f64,
    pub c3: f64,
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
}

impl Default for SplashShape {
    fn default() -> Self {
        SplashShape { n: 256, alpha_c: 1.2, c3: 0.3, b0: 0.0, b1: 0.0, b2: -0.6 }
    }
}

impl SplashShape {
    fn check(&self) -> Result<()> {
        let ok = (0.9..=1.8).contains(&self.alpha_c)
            && (0.0..=0.6).contains(&self.c3)
            && self.b0 - self.b1.abs() + self.b2 <= -0.1
            && (self.b0 - self.b1 + self.b2) < -0.1;
        if !ok {
            return Err(Error::Construction(
                "shape parameters out of range (alpha_c in [0.9,1.8], c3 in [0,0.6], trough below -0.1)".into(),
            ));
        }
        Ok(())
    }

    /// alpha_c snapped to the nearest grid node.
    pub fn snapped_alpha_c(&self) -> Result<f64> {
        let g = Grid::new(self.n)?;
        let j = ((self.alpha_c + PI) / g.h()).round() as usize;
        Ok(g.alpha(j))
    }
}

/// Coefficients (A, B) of the family for the given pinch.
pub fn splash_coefficients(pinch: f64, shape: &SplashShape) -> Result<(f64, f64)> {
    shape.check()?;
    let ac = shape.snapped_alpha_c()?;
    let c3 = shape.c3;
    let b_of = |a: f64| -(1.0 + a * ac.cos() + 3.0 * c3 * (3.0 * ac).cos()) / (2.0 * (2.0 * ac).cos());
    let z1c = |a: f64| ac + a * ac.sin() + b_of(a) * (2.0 * ac).sin() + c3 * (3.0 * ac).sin() - 0.5 * pinch;
    let grid: Vec<f64> = (0..=1200).map(|k| -6.0 + 0.01 * k as f64).collect();
    let bracket = grid.windows(2).find(|w| z1c(w[0]).signum() != z1c(w[1]).signum());
    let w = bracket.ok_or_else(|| Error::Construction(format!("no touching configuration bracketed for pinch {pinch}")))?;
    let a = brent_root(z1c, w[0], w[1], 1e-16, 200)?;
    Ok((a, b_of(a)))
}

pub fn make_splash_family(pinch: f64, shape: &SplashShape) -> Result<InterfaceCurve> {
    if !(pinch >= 0.0) {
        return Err(Error::Construction("pinch must be nonnegative".into()));
    }
    let (a, b) = splash_coefficients(pinch, shape)?;
    let g = Grid::new(shape.n)?;
    let z1 = g.alphas().iter().map(|&t| a * t.sin() + b * (2.0 * t).sin() + shape.c3 * (3.0 * t).sin()).collect();
    let z2 = g.alphas().iter().map(|&t| shape.b0 + shape.b1 * t.cos() + shape.b2 * (2.0 * t).cos()).collect();
    InterfaceCurve::new(Domain::Physical, z1, z2)
}

fn smooth_step(x: f64) -> f64 {
    // C-infinity transition from 0 (x <= 0) to 1 (x >= 1)
    let f = |t: f64| if t <= 0.0 { 0.0 } else { (-1.0 / t).exp() };
    f(x) / (f(x) + f(1.0 - x))
}

/// Splash family at zero pinch with z1 flattened to x = 0 on parameter arcs of
/// length `arc` around +-alpha_c, so the two arcs share one image.
pub fn make_splat_fixture(arc: f64, shape: &SplashShape) -> Result<InterfaceCurve> {
    let base = make_splash_family(0.0, shape)?;
    let ac = shape.snapped_alpha_c()?;
    let g = base.grid;
    let ramp = 0.35;
    let mask = |t: f64| {
        let d = (t.abs() - ac).abs() - 0.5 * arc;
        smooth_step(d / ramp)
    };
    let z1 = (0..g.n())
        .map(|j| {
            let t = g.alpha(j);
            (base.z1[j] + t) * mask(t) - t
        })
        .collect();
    InterfaceCurve::new(Domain::Physical, z1, base.z2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapDirection {
    ToTilde,
    ToPhysical,
}

/// Apply P (with branch continuation) or P^{-1} samplewise.
pub fn map_curve(curve: &InterfaceCurve, direction: MapDirection) -> Result<InterfaceCurve> {
    match (direction, curve.domain) {
        (MapDirection::ToTilde, Domain::Physical) => to_tilde(curve),
        (MapDirection::ToPhysical, Domain::Tilde) => to_physical(curve),
        _ => Err(Error::Validation(format!("curve is already in the {} domain", curve.domain))),
    }
}

fn continue_step(it: &CurveInterp, a0: f64, a1: f64, branch: &mut Branch, depth: u32) -> Result<Complex64> {
    let z = it.eval(a1);
    let r = {
        let t = (z / 2.0).tan();
        if !t.re.is_finite() || !t.im.is_finite() {
            return Err(Error::Singular { x: z.re, y: z.im, which: 0 });
        }
        t.sqrt()
    };
    let prev = branch.image();
    let d = (r - prev).norm().min((r + prev).norm());
    if d > 0.25 * r.norm() && depth < 12 {
        let mid = 0.5 * (a0 + a1);
        continue_step(it, a0, mid, branch, depth + 1)?;
        return continue_step(it, mid, a1, branch, depth + 1);
    }
    let w = conformal::map_p(PlanePoint::from(z), branch)?;
    Ok(w.c())
}

fn to_tilde(curve: &InterfaceCurve) -> Result<InterfaceCurve> {
    let n = curve.n();
    let g = curve.grid;
    let pts = curve.points();
    let j0 = (0..n).min_by(|&a, &b| pts[a].im.total_cmp(&pts[b].im)).unwrap();
    let it = curve.interp()?;
    let mut branch = Branch::seeded_at(PlanePoint::from(pts[j0]))?;
    let mut w = vec![Complex64::new(0.0, 0.0); n];
    w[j0] = conformal::map_p(PlanePoint::from(pts[j0]), &mut branch)?.c();
    let mut a = g.alpha(j0);
    for step in 1..=n {
        let a_next = a + g.h();
        let wn = continue_step(&it, a, a_next, &mut branch, 0).map_err(|e| match e {
            Error::BranchAmbiguity { .. } => Error::BranchAmbiguity { index: (j0 + step) % n },
            other => other,
        })?;
        a = a_next;
        let j = (j0 + step) % n;
        if step == n {
            let gap = (wn - w[j0]).norm();
            if gap > 1e-8 {
                return Err(Error::Validation(format!("tilde image is not closed (gap {gap:.3e})")));
            }
        } else {
            w[j] = wn;
        }
    }
    InterfaceCurve::new(Domain::Tilde, w.iter().map(|v| v.re).collect(), w.iter().map(|v| v.im).collect())
}

fn to_physical(curve: &InterfaceCurve) -> Result<InterfaceCurve> {
    let n = curve.n();
    let g = curve.grid;
    let pts = curve.points();
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for p in &pts {
        let z = conformal::map_p_inverse(PlanePoint::from(*p))?;
        x.push(z.x);
        y.push(z.y);
    }
    for j in 1..n {
        let d = x[j] - x[j - 1];
        x[j] -= 2.0 * PI * (d / (2.0 * PI)).round();
    }
    let wrap = x[0] + 2.0 * PI - x[n - 1];
    if wrap.abs() > PI {
        return Err(Error::Validation("tilde contour does not wind once around deep water".into()));
    }
    let per: Vec<f64> = (0..n).map(|j| x[j] - g.alpha(j)).collect();
    let shift = 2.0 * PI * (spectral::mean(&per) / (2.0 * PI)).round();
    InterfaceCurve::new(Domain::Physical, per.iter().map(|v| v - shift).collect(), y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tangent_examples() {
        let flat = InterfaceCurve::flat(32, 0.0).unwrap();
        let td = tangent_data(&flat).unwrap();
        assert!(td.z_alpha.iter().all(|v| (v[0] - 1.0).abs() < 1e-14 && v[1].abs() < 1e-14));
        assert!(td.normal.iter().all(|v| v[0].abs() < 1e-14 && (v[1] - 1.0).abs() < 1e-14));

        let c = InterfaceCurve::circle(64, Complex64::new(0.0, 0.0), 1.0, false).unwrap();
        let td = tangent_data(&c).unwrap();
        let g = c.grid;
        for j in 0..64 {
            assert!((td.speed[j] - 1.0).abs() < 1e-13);
            // the perp of a counterclockwise tangent points to the centre
            let a = g.alpha(j);
            assert!((td.normal[j][0] + a.cos()).abs() < 1e-13 && (td.normal[j][1] + a.sin()).abs() < 1e-13);
        }

        let g = Grid::new(128).unwrap();
        let e = InterfaceCurve::new(
            Domain::Tilde,
            g.alphas().iter().map(|a| 2.0 * a.cos()).collect(),
            g.alphas().iter().map(|a| a.sin()).collect(),
        )
        .unwrap();
        let td = tangent_data(&e).unwrap();
        for j in 0..128 {
            let a = g.alpha(j);
            let want = 4.0 * a.sin().powi(2) + a.cos().powi(2);
            assert!((td.speed[j].powi(2) - want).abs() < 1e-10);
        }
    }

    #[test]
    fn degenerate_tangent_is_rejected() {
        let c = InterfaceCurve::new(Domain::Tilde, vec![0.5; 16], vec![0.5; 16]).unwrap();
        assert!(matches!(tangent_data(&c), Err(Error::DegenerateTangent { .. })));
    }

    #[test]
    fn arc_chord_examples() {
        let flat = InterfaceCurve::flat(64, 0.0).unwrap();
        assert!((arc_chord(&flat).sup_f - 1.0).abs() < 1e-12);
        let c = InterfaceCurve::circle(64, Complex64::new(0.0, 0.0), 1.0, true).unwrap();
        assert!((arc_chord(&c).sup_f - PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn arc_chord_matches_brute_force_at_double_resolution() {
        let shape = SplashShape { n: 128, ..Default::default() };
        let d = 1e-3;
        let curve = make_splash_family(d, &shape).unwrap();
        let rep = arc_chord(&curve);
        let ac = shape.snapped_alpha_c().unwrap();
        assert!(rep.sup_f >= 2.0 * ac / d * (1.0 - 1e-9));
        // brute force on a doubled grid from the interpolant
        let it = curve.interp().unwrap();
        let g2 = Grid::new(256).unwrap();
        let pts: Vec<Complex64> = g2.alphas().iter().map(|&a| it.eval(a)).collect();
        let mut brute = 0.0f64;
        for i in 0..256 {
            for j in 0..256 {
                if i == j {
                    continue;
                }
                let beta = wrap_angle(g2.alpha(i) - g2.alpha(j)).abs();
                brute = brute.max(beta / curve.chord(pts[i], pts[j]));
            }
        }
        // every coarse pair is also a fine pair
        assert!(brute >= rep.sup_f * (1.0 - 1e-12));
        assert!((brute - rep.sup_f).abs() / brute < 1e-2);
        let refined = refined_arc_chord_sup(&curve).unwrap();
        assert!(refined >= brute * (1.0 - 1e-9));
    }

    #[test]
    fn splash_family_touches_at_zero_pinch() {
        let shape = SplashShape::default();
        let c = make_splash_family(0.0, &shape).unwrap();
        let rep = validate_splash_curve(&c, &ValidationOptions::default()).unwrap();
        assert!(rep.passed(), "{:#?}", rep.conditions);
        assert_eq!(rep.classification, Classification::Splash);
        let m = rep.q_margins.unwrap();
        assert!(m.iter().all(|v| *v > 0.1), "{m:?}");
    }

    #[test]
    fn splash_family_open_pinch_fails_touch_only() {
        let c = make_splash_family(0.2, &SplashShape::default()).unwrap();
        let rep = validate_splash_curve(&c, &ValidationOptions::default()).unwrap();
        let failed: Vec<_> = rep.failed().iter().map(|c| c.name.clone()).collect();
        assert_eq!(failed, vec!["2 single touching pair".to_string()]);
        assert_eq!(rep.classification, Classification::Neither);
        assert!(arc_chord(&c).sup_f < 1e3);
    }

    #[test]
    fn flat_and_origin_curves_fail() {
        let flat = InterfaceCurve::flat(64, -0.5).unwrap();
        let rep = validate_splash_curve(&flat, &ValidationOptions::default()).unwrap();
        assert!(!rep.condition("2").unwrap().passed);
        assert_eq!(rep.classification, Classification::Neither);
        let through = InterfaceCurve::standing_wave(64, 0.3, 1.0, 0.0).unwrap();
        let rep = validate_splash_curve(&through, &ValidationOptions::default()).unwrap();
        assert!(!rep.condition("5").unwrap().passed);
    }

    #[test]
    fn splash_gap_increases_with_pinch() {
        let shape = SplashShape::default();
        let mut last = -1.0;
        for k in 0..10 {
            let pinch = 0.3 * k as f64 / 9.0;
            let c = make_splash_family(pinch, &shape).unwrap();
            // with a 0.2 exclusion the tight fingertip itself caps the chord near 0.11,
            // so the pinch is measured between parameters at least 1 apart
            let d = arc_chord(&c).min_separated_distance(1.0);
            let (r, _, _) = refined_min_separated_distance(&c, 1.0).unwrap();
            assert!(d > last, "pinch {pinch}: {d} <= {last}");
            assert!((d - pinch).abs() < 1e-12 && (r - pinch).abs() < 1e-9, "{pinch} {d} {r}");
            last = d;
        }
    }

    #[test]
    fn splat_fixture_is_classified() {
        let shape = SplashShape::default();
        let c = make_splat_fixture(0.5, &shape).unwrap();
        let opts = ValidationOptions { periodicity_tol: 1e-4, ..Default::default() };
        let rep = validate_splat_curve(&c, &opts).unwrap();
        assert_eq!(rep.classification, Classification::Splat);
        assert!(rep.condition("2'").unwrap().passed);
        // brute-force pair scan: every node on the arc meets its mirror image
        let g = c.grid;
        let ac = shape.snapped_alpha_c().unwrap();
        let on_arc: Vec<usize> = (0..g.n()).filter(|&j| (g.alpha(j) - ac).abs() < 0.25).collect();
        assert!(on_arc.len() >= 3);
        let pts = c.points();
        for j in on_arc {
            assert!(c.chord(pts[j], pts[g.n() - j]) < 1e-12);
        }
        let splash = make_splash_family(0.0, &shape).unwrap();
        let rep = validate_splat_curve(&splash, &ValidationOptions::default()).unwrap();
        assert_eq!(rep.classification, Classification::Splash);
        assert!(!rep.condition("2'").unwrap().passed);
        let flat = InterfaceCurve::flat(64, -0.5).unwrap();
        let rep = validate_splat_curve(&flat, &ValidationOptions::default()).unwrap();
        assert_eq!(rep.classification, Classification::Neither);
    }

    #[test]
    fn mapping_round_trip_and_closure() {
        let c = InterfaceCurve::standing_wave(64, 0.2, 1.0, -0.8).unwrap();
        let t = map_curve(&c, MapDirection::ToTilde).unwrap();
        let back = map_curve(&t, MapDirection::ToPhysical).unwrap();
        let err = c.z1.iter().zip(&back.z1).chain(c.z2.iter().zip(&back.z2)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-11, "{err}");

        let low = InterfaceCurve::flat(64, -2.0).unwrap();
        let t = map_curve(&low, MapDirection::ToTilde).unwrap();
        // the image is a closed contour around the deep-water point
        let w = t.points();
        let centre = conformal::deep_water_image();
        let winding: f64 = (0..64).map(|j| ((w[(j + 1) % 64] - centre) / (w[j] - centre)).arg()).sum();
        assert!((winding.abs() - 2.0 * PI).abs() < 1e-9);
        assert!(winding < 0.0, "water-inside contours run clockwise");
    }

    #[test]
    fn splash_image_separates_the_touch() {
        let c = make_splash_family(0.0, &SplashShape::default()).unwrap();
        let t = map_curve(&c, MapDirection::ToTilde).unwrap();
        let rep = arc_chord(&t);
        assert!(rep.sup_f.is_finite() && rep.sup_f < 100.0);
        let ac = SplashShape::default().snapped_alpha_c().unwrap();
        let it = t.interp().unwrap();
        let sep = (it.eval(ac) - it.eval(-ac)).norm();
        assert!(sep > 0.05, "{sep} {}", rep.min_separated_distance(0.2));
        assert!(arc_chord(&c).sup_f.is_infinite() || arc_chord(&c).sup_f > 1e9);
    }

    #[test]
    fn reparametrization_gives_uniform_speed() {
        let c = InterfaceCurve::standing_wave(128, 0.3, 1.0, 0.0).unwrap();
        let (u, src) = reparametrize_uniform(&c).unwrap();
        assert!(u.uniformity_spread().unwrap() < 1e-12);
        // same geometric curve
        let it = c.interp().unwrap();
        for (j, &a) in src.iter().enumerate() {
            let p = it.eval(a);
            let q = u.points()[j];
            assert!((p - q).norm() < 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(20))]

        #[test]
        fn arc_chord_symmetric(a1 in -0.3f64..0.3, a2 in -0.3f64..0.3, b1 in -0.5f64..0.5) {
            let g = Grid::new(32).unwrap();
            let c = InterfaceCurve::new(
                Domain::Physical,
                g.alphas().iter().map(|t| a1 * t.sin() + a2 * (2.0 * t).cos()).collect(),
                g.alphas().iter().map(|t| b1 * t.cos()).collect(),
            ).unwrap();
            let pts = c.points();
            for i in 0..32 {
                for k in 1..16 {
                    let j = (i + 32 - k) % 32;
                    prop_assert!((c.chord(pts[i], pts[j]) - c.chord(pts[j], pts[i])).abs() < 1e-15);
                }
            }
        }

        #[test]
        fn orientation_invariant_under_shift(s in 0usize..256) {
            let c = make_splash_family(0.1, &SplashShape::default()).unwrap();
            let n = c.n();
            let g = c.grid;
            let x: Vec<f64> = (0..n).map(|j| {
                let k = (j + s) % n;
                let wrap = if j + s >= n { 2.0 * PI } else { 0.0 };
                c.z1[k] + g.alpha(k) + wrap
            }).collect();
            let shifted = InterfaceCurve::physical_from_full(&x, (0..n).map(|j| c.z2[(j + s) % n]).collect()).unwrap();
            let rep = validate_splash_curve(&shifted, &ValidationOptions::default()).unwrap();
            prop_assert!(rep.condition("3").unwrap().passed);
        }
    }
}
