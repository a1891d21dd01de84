//! Energy minimisation over the free sites of a [`Domain`] with the outer ring
//! clamped to a boundary field.
//!
//! A preconditioned LBFGS brings the residual down to a hand-over level, then
//! Newton steps with conjugate-gradient linear solves finish the job. Close to
//! the minimum the energy change per step drops below the rounding noise of
//! the energy sum, which is why the line search tolerates noise-level rises
//! and why Newton accepts steps that reduce the residual.

use std::collections::VecDeque;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{Mat3, Vec3};
use crate::model::{Displacement, Domain};
use crate::predictor::BoundPredictor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolveSettings {
    /// Stop once `‖∇E‖∞` on free sites is below this.
    pub tolerance: f64,
    /// LBFGS history length.
    pub memory: usize,
    /// Budget for LBFGS iterations.
    pub max_iterations: usize,
    /// Finish with Newton steps.
    pub newton: bool,
    /// Precondition LBFGS with the inverse on-site block of the homogeneous operator.
    pub precondition: bool,
    /// Relative residual for the Newton linear solves.
    pub newton_rtol: f64,
    /// LBFGS hands over to Newton below this residual.
    pub newton_switch: f64,
}

impl Default for SolveSettings {
    fn default() -> Self {
        SolveSettings {
            tolerance: 1e-8,
            memory: 10,
            max_iterations: 20_000,
            newton: true,
            precondition: true,
            newton_rtol: 1e-10,
            newton_switch: 1e-4,
        }
    }
}

impl SolveSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(Error::Config(format!("solver tolerance must be positive, got {}", self.tolerance)));
        }
        if self.memory == 0 {
            return Err(Error::Config("LBFGS memory must be at least 1".into()));
        }
        if !(self.newton_rtol > 0.0 && self.newton_rtol < 1.0) {
            return Err(Error::Config(format!("newton_rtol must lie in (0, 1), got {}", self.newton_rtol)));
        }
        Ok(())
    }
}

/// Values imposed on the clamped sites.
#[derive(Clone, Copy)]
pub enum Boundary<'a> {
    Zero,
    Predictor(&'a BoundPredictor<'a>),
}

impl Boundary<'_> {
    pub fn value(&self, x: &Vec3) -> Result<Vec3> {
        match self {
            Boundary::Zero => Ok(Vec3::zeros()),
            Boundary::Predictor(p) => p.value(x),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Lbfgs,
    Newton,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub phase: Phase,
    pub iteration: usize,
    pub energy: f64,
    pub residual: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub lbfgs_iterations: usize,
    pub newton_steps: usize,
    pub cg_iterations: usize,
    pub energy: f64,
    pub residual: f64,
    /// Newton met negative curvature and LBFGS finished instead.
    pub newton_fallback: bool,
    pub trace: Vec<TraceRow>,
}

impl SolveReport {
    /// Total nonlinear iterations.
    pub fn iterations(&self) -> usize {
        self.lbfgs_iterations + self.newton_steps
    }
}

pub fn write_trace_csv<W: Write>(mut w: W, trace: &[TraceRow]) -> std::io::Result<()> {
    writeln!(w, "phase,iteration,energy,residual")?;
    for r in trace {
        let phase = match r.phase {
            Phase::Lbfgs => "lbfgs",
            Phase::Newton => "newton",
        };
        writeln!(w, "{phase},{},{:.16e},{:.16e}", r.iteration, r.energy, r.residual)?;
    }
    Ok(())
}

fn dot(a: &[Vec3], b: &[Vec3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.dot(y)).sum()
}

fn amax(a: &[Vec3]) -> f64 {
    a.iter().map(|v| v.amax()).fold(0.0, f64::max)
}

struct Problem<'a> {
    domain: &'a Domain,
    precond: Mat3,
    noise: f64,
}

impl Problem<'_> {
    /// Energy and gradient masked to free sites.
    fn eval(&self, u: &[Vec3], g: &mut [Vec3]) -> Result<f64> {
        let e = self.domain.energy_gradient(u, g)?;
        for (i, gi) in g.iter_mut().enumerate() {
            if !self.domain.is_free(i) {
                *gi = Vec3::zeros();
            }
        }
        if !e.is_finite() || g.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinite("energy or forces are not finite".into()));
        }
        Ok(e)
    }

    fn hess(&self, u: &[Vec3], v: &[Vec3], out: &mut [Vec3]) -> Result<()> {
        self.domain.hessian_apply_full(u, v, out)?;
        for (i, o) in out.iter_mut().enumerate() {
            if !self.domain.is_free(i) {
                *o = Vec3::zeros();
            }
        }
        Ok(())
    }

    fn apply_precond(&self, v: &[Vec3], out: &mut [Vec3]) {
        for (o, x) in out.iter_mut().zip(v) {
            *o = self.precond * x;
        }
    }
}

/// Rounding noise of an energy sum over `n` sites.
fn energy_noise(n: usize, energy: f64) -> f64 {
    64.0 * f64::EPSILON * (n as f64).sqrt() * (1.0 + energy.abs())
}

/// A relaxed field with its solve statistics.
#[derive(Clone, Debug)]
pub struct Relaxation {
    pub u: Displacement,
    pub report: SolveReport,
}

/// Minimise the energy over free sites. Clamped sites of `initial` are
/// overwritten by `boundary`; free sites are the starting guess.
pub fn relax(domain: &Domain, boundary: Boundary<'_>, settings: &SolveSettings, initial: &[Vec3]) -> Result<Relaxation> {
    settings.validate()?;
    if initial.len() != domain.len() {
        return Err(Error::Domain(format!("initial field has {} sites, domain has {}", initial.len(), domain.len())));
    }
    let mut u = initial.to_vec();
    let mut failed = None;
    domain.clamp(&mut u, |_, x| {
        boundary.value(x).unwrap_or_else(|e| {
            failed.get_or_insert(e);
            Vec3::zeros()
        })
    });
    if let Some(e) = failed {
        return Err(e);
    }
    let precond = if settings.precondition {
        preconditioner(domain)?
    } else {
        Mat3::identity()
    };
    let problem = Problem { domain, precond, noise: 0.0 };
    let mut report = SolveReport::default();
    let mut g = vec![Vec3::zeros(); u.len()];
    let e0 = problem.eval(&u, &mut g)?;
    let problem = Problem { noise: energy_noise(domain.energy_sites().len(), e0), ..problem };

    let handover = if settings.newton { settings.newton_switch.max(settings.tolerance) } else { settings.tolerance };
    let lbfgs_result = lbfgs(&problem, settings, handover, &mut u, &mut report);
    match lbfgs_result {
        Ok(()) => {}
        // a stalled line search near the hand-over level is recoverable by Newton
        Err(Error::LineSearch { residual, .. }) if settings.newton && residual < 1e3 * handover => {}
        Err(e) => return Err(e),
    }
    if settings.newton && report.residual >= settings.tolerance {
        newton_polish_inner(&problem, settings, &mut u, &mut report)?;
    }
    Ok(Relaxation { u, report })
}

/// Newton refinement of a field that is already close to a minimum.
pub fn newton_polish(domain: &Domain, settings: &SolveSettings, u: &[Vec3]) -> Result<Relaxation> {
    settings.validate()?;
    let precond = if settings.precondition { preconditioner(domain)? } else { Mat3::identity() };
    let mut g = vec![Vec3::zeros(); u.len()];
    let problem = Problem { domain, precond, noise: 0.0 };
    let e0 = problem.eval(u, &mut g)?;
    let problem = Problem { noise: energy_noise(domain.energy_sites().len(), e0), ..problem };
    let mut u = u.to_vec();
    let mut report = SolveReport { energy: e0, residual: amax(&g), ..Default::default() };
    newton_polish_inner(&problem, settings, &mut u, &mut report)?;
    Ok(Relaxation { u, report })
}

/// Inverse of the on-site block of the homogeneous linearised operator.
fn preconditioner(domain: &Domain) -> Result<Mat3> {
    // far from the defect the on-site block is that of the perfect crystal
    let set = domain.sites();
    let target = Vec3::new(0.5 * domain.free_radius(), 0.0, 0.0);
    let probe = (0..set.len())
        .filter(|&i| domain.is_free(i))
        .min_by(|&a, &b| {
            let da = (set.positions()[a] - target).norm();
            let db = (set.positions()[b] - target).norm();
            da.total_cmp(&db).then(a.cmp(&b))
        })
        .ok_or_else(|| Error::Domain("domain has no free sites".into()))?;
    let zero = vec![Vec3::zeros(); set.len()];
    let mut block = Mat3::zeros();
    let mut e = vec![Vec3::zeros(); set.len()];
    let mut out = vec![Vec3::zeros(); set.len()];
    for c in 0..3 {
        e[probe] = Vec3::zeros();
        e[probe][c] = 1.0;
        domain.hessian_apply_full(&zero, &e, &mut out)?;
        block.set_column(c, &out[probe]);
    }
    let block = (block + block.transpose()) * 0.5;
    block
        .try_inverse()
        .filter(|m| m.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::Instability("on-site stiffness block is singular".into()))
}

fn lbfgs(p: &Problem<'_>, settings: &SolveSettings, target: f64, u: &mut Vec<Vec3>, report: &mut SolveReport) -> Result<()> {
    let n = u.len();
    let mut g = vec![Vec3::zeros(); n];
    let mut energy = p.eval(u, &mut g)?;
    let mut history: VecDeque<(Vec<Vec3>, Vec<Vec3>, f64)> = VecDeque::with_capacity(settings.memory);
    let mut dir = vec![Vec3::zeros(); n];
    let mut trial = vec![Vec3::zeros(); n];
    let mut g_trial = vec![Vec3::zeros(); n];
    let mut alpha_buf = vec![0.0; settings.memory];
    let step_cap = 0.1 * p.domain.sites().spec().nearest_neighbor();
    let mut residual = amax(&g);
    report.trace.push(TraceRow { phase: Phase::Lbfgs, iteration: 0, energy, residual });
    let mut iter = 0;
    while residual >= target {
        if iter >= settings.max_iterations {
            report.energy = energy;
            report.residual = residual;
            return Err(Error::Convergence { iterations: iter, residual });
        }
        // two-loop recursion
        dir.copy_from_slice(&g);
        for (slot, (s, y, rho)) in history.iter().enumerate().rev() {
            let a = rho * dot(s, &dir);
            alpha_buf[slot] = a;
            for (d, yi) in dir.iter_mut().zip(y) {
                *d -= yi * a;
            }
        }
        let mut tmp = vec![Vec3::zeros(); n];
        p.apply_precond(&dir, &mut tmp);
        let gamma = history.back().map_or(1.0, |(s, y, _)| {
            let mut py = vec![Vec3::zeros(); n];
            p.apply_precond(y, &mut py);
            dot(s, y) / dot(y, &py)
        });
        for (d, t) in dir.iter_mut().zip(&tmp) {
            *d = t * gamma;
        }
        for (slot, (s, y, rho)) in history.iter().enumerate() {
            let b = rho * dot(y, &dir);
            for (d, si) in dir.iter_mut().zip(s) {
                *d += si * (alpha_buf[slot] - b);
            }
        }
        dir.iter_mut().for_each(|d| *d = -*d);
        let mut slope = dot(&g, &dir);
        if !(slope < 0.0) {
            history.clear();
            p.apply_precond(&g, &mut dir);
            dir.iter_mut().for_each(|d| *d = -*d);
            slope = dot(&g, &dir);
        }
        let mut alpha = 1.0;
        let big = amax(&dir);
        if history.is_empty() && big > 0.0 {
            alpha = (step_cap / big).min(1.0);
        }
        if alpha * big > step_cap {
            alpha = step_cap / big;
        }
        let (e_new, a) = match line_search(p, u, &dir, energy, slope, alpha, &mut trial, &mut g_trial) {
            Ok(v) => v,
            Err(e) => {
                report.energy = energy;
                report.residual = residual;
                return Err(e);
            }
        };
        // s = a·dir, y = g_new - g
        let s: Vec<Vec3> = dir.iter().map(|d| d * a).collect();
        let y: Vec<Vec3> = g_trial.iter().zip(&g).map(|(x, z)| x - z).collect();
        let sy = dot(&s, &y);
        if sy > 1e-16 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && sy > 0.0 {
            if history.len() == settings.memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        std::mem::swap(u, &mut trial);
        std::mem::swap(&mut g, &mut g_trial);
        energy = e_new;
        residual = amax(&g);
        iter += 1;
        report.trace.push(TraceRow { phase: Phase::Lbfgs, iteration: iter, energy, residual });
    }
    report.lbfgs_iterations += iter;
    report.energy = energy;
    report.residual = residual;
    Ok(())
}

/// Backtracking Armijo search with cubic interpolation. Writes the accepted
/// point and its gradient into `trial` / `g_trial`.
#[allow(clippy::too_many_arguments)]
fn line_search(
    p: &Problem<'_>,
    u: &[Vec3],
    dir: &[Vec3],
    e0: f64,
    slope: f64,
    mut alpha: f64,
    trial: &mut [Vec3],
    g_trial: &mut [Vec3],
) -> Result<(f64, f64)> {
    const C1: f64 = 1e-4;
    let mut prev: Option<(f64, f64)> = None;
    for _ in 0..40 {
        for ((t, x), d) in trial.iter_mut().zip(u).zip(dir) {
            *t = x + d * alpha;
        }
        let e = match p.eval(trial, g_trial) {
            Ok(e) => e,
            Err(Error::NonFinite(_)) => {
                prev = None;
                alpha *= 0.25;
                continue;
            }
            Err(e) => return Err(e),
        };
        if e <= e0 + C1 * alpha * slope + p.noise {
            return Ok((e, alpha));
        }
        let next = match prev {
            None => -slope * alpha * alpha / (2.0 * (e - e0 - slope * alpha)),
            Some((a_prev, e_prev)) => cubic_minimizer(e0, slope, alpha, e, a_prev, e_prev),
        };
        let next = if next.is_finite() { next.clamp(0.1 * alpha, 0.5 * alpha) } else { 0.5 * alpha };
        prev = Some((alpha, e));
        alpha = next;
    }
    Err(Error::LineSearch { residual: amax(g_trial), reason: "no sufficient decrease after 40 trials".into() })
}

/// Minimiser of the cubic through `φ(0), φ'(0), φ(a), φ(b)`.
fn cubic_minimizer(f0: f64, d0: f64, a: f64, fa: f64, b: f64, fb: f64) -> f64 {
    let ra = fa - f0 - d0 * a;
    let rb = fb - f0 - d0 * b;
    let den = a * a * b * b * (a - b);
    let c3 = (b * b * ra - a * a * rb) / den;
    let c2 = (-b * b * b * ra + a * a * a * rb) / den;
    if c3 == 0.0 {
        return -d0 / (2.0 * c2);
    }
    let disc = c2 * c2 - 3.0 * c3 * d0;
    if disc < 0.0 {
        return f64::NAN;
    }
    (-c2 + disc.sqrt()) / (3.0 * c3)
}

fn newton_polish_inner(p: &Problem<'_>, settings: &SolveSettings, u: &mut Vec<Vec3>, report: &mut SolveReport) -> Result<()> {
    let n = u.len();
    let mut g = vec![Vec3::zeros(); n];
    let mut energy = p.eval(u, &mut g)?;
    let mut residual = amax(&g);
    let mut trial = vec![Vec3::zeros(); n];
    let mut g_trial = vec![Vec3::zeros(); n];
    let mut step = 0;
    while residual >= settings.tolerance {
        if step >= 30 {
            report.energy = energy;
            report.residual = residual;
            return Err(Error::Convergence { iterations: report.iterations(), residual });
        }
        let (delta, cg) = match newton_direction(p, u, &g, settings.newton_rtol) {
            Ok(v) => v,
            Err(Error::Instability(_)) => {
                // negative curvature: continue with plain LBFGS
                log::warn!("Newton met negative curvature at residual {residual:.3e}; continuing with LBFGS");
                report.newton_fallback = true;
                return lbfgs(p, settings, settings.tolerance, u, report);
            }
            Err(e) => return Err(e),
        };
        report.cg_iterations += cg;
        let slope = dot(&g, &delta);
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..12 {
            for ((t, x), d) in trial.iter_mut().zip(u.iter()).zip(&delta) {
                *t = x + d * alpha;
            }
            match p.eval(&trial, &mut g_trial) {
                Ok(e) => {
                    let r = amax(&g_trial);
                    if e <= energy + 1e-4 * alpha * slope + p.noise || r < residual {
                        energy = e;
                        residual = r;
                        accepted = true;
                        break;
                    }
                }
                Err(Error::NonFinite(_)) => {}
                Err(e) => return Err(e),
            }
            alpha *= 0.5;
        }
        if !accepted {
            report.energy = energy;
            report.residual = residual;
            return Err(Error::LineSearch { residual, reason: "Newton step rejected".into() });
        }
        std::mem::swap(u, &mut trial);
        std::mem::swap(&mut g, &mut g_trial);
        step += 1;
        report.newton_steps += 1;
        report.trace.push(TraceRow { phase: Phase::Newton, iteration: report.newton_steps, energy, residual });
    }
    report.energy = energy;
    report.residual = residual;
    Ok(())
}

/// Preconditioned CG for `δ²E(u) δ = -g` on free sites.
fn newton_direction(p: &Problem<'_>, u: &[Vec3], g: &[Vec3], rtol: f64) -> Result<(Vec<Vec3>, usize)> {
    let n = u.len();
    let mut x = vec![Vec3::zeros(); n];
    let mut r: Vec<Vec3> = g.iter().map(|v| -v).collect();
    let bnorm = dot(&r, &r).sqrt();
    if bnorm == 0.0 {
        return Ok((x, 0));
    }
    let mut z = vec![Vec3::zeros(); n];
    p.apply_precond(&r, &mut z);
    let mut d = z.clone();
    let mut rz = dot(&r, &z);
    let mut hd = vec![Vec3::zeros(); n];
    let max_iter = 10 * n.max(100);
    for it in 0..max_iter {
        if dot(&r, &r).sqrt() <= rtol * bnorm {
            return Ok((x, it));
        }
        p.hess(u, &d, &mut hd)?;
        let dhd = dot(&d, &hd);
        if !(dhd > 0.0) {
            return Err(Error::Instability(format!("Hessian is not positive definite (curvature {dhd:.3e})")));
        }
        let a = rz / dhd;
        for i in 0..n {
            x[i] += d[i] * a;
            r[i] -= hd[i] * a;
        }
        p.apply_precond(&r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            d[i] = z[i] + d[i] * beta;
        }
    }
    Err(Error::LinearSolve { iterations: max_iter, residual: dot(&r, &r).sqrt() / bnorm })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{DefectSpec, LatticeSpec, Structure};
    use crate::potential::{calibrate_equilibrium, test_params, ToyEam};

    fn domain(defect: DefectSpec, radius: f64) -> Domain {
        let (params, bracket) = test_params(0.0);
        let a0 = calibrate_equilibrium(&params, Structure::Bcc, bracket).unwrap();
        let spec = LatticeSpec::new(Structure::Bcc, a0).unwrap();
        Domain::new(&spec, ToyEam::new(params, a0).unwrap(), defect, radius * a0).unwrap()
    }

    #[test]
    fn perfect_crystal_is_already_relaxed() {
        let d = domain(DefectSpec::None, 3.0);
        let out = relax(&d, Boundary::Zero, &SolveSettings::default(), &vec![Vec3::zeros(); d.len()]).unwrap();
        assert_eq!(out.report.iterations(), 0);
        assert!(out.u.iter().all(|v| v.norm() < 1e-12));
    }

    #[test]
    fn lbfgs_and_newton_agree_on_a_vacancy() {
        let d = domain(DefectSpec::Vacancy, 5.0);
        let zero = vec![Vec3::zeros(); d.len()];
        let full = relax(&d, Boundary::Zero, &SolveSettings::default(), &zero).unwrap();
        assert!(full.report.residual < 1e-8);
        assert!(full.report.newton_steps > 0);
        let plain = SolveSettings { newton: false, ..Default::default() };
        let only = relax(&d, Boundary::Zero, &plain, &zero).unwrap();
        assert!(only.report.residual < 1e-8);
        let diff = full.u.iter().zip(&only.u).map(|(a, b)| (a - b).amax()).fold(0.0, f64::max);
        assert!(diff < 1e-7, "{diff}");
        // energy never rises beyond rounding along accepted steps
        let noise = energy_noise(d.energy_sites().len(), full.report.energy);
        for w in only.report.trace.windows(2) {
            assert!(w[1].energy <= w[0].energy + noise);
        }
        // clamped sites untouched
        for i in 0..d.len() {
            if !d.is_free(i) {
                assert_eq!(full.u[i], Vec3::zeros());
            }
        }
    }

    #[test]
    fn newton_converges_quadratically_and_restarts_agree() {
        let d = domain(DefectSpec::Vacancy, 4.0);
        let zero = vec![Vec3::zeros(); d.len()];
        let loose = SolveSettings { newton: false, tolerance: 1e-3, ..Default::default() };
        let start = relax(&d, Boundary::Zero, &loose, &zero).unwrap();
        let polished = newton_polish(&d, &SolveSettings::default(), &start.u).unwrap();
        let r: Vec<f64> = polished.report.trace.iter().map(|t| t.residual).collect();
        assert!(*r.last().unwrap() < 1e-8);
        let r0 = start.report.residual;
        let seq: Vec<f64> = std::iter::once(r0).chain(r.iter().copied()).collect();
        // each step at least squares the residual relative to a unit scale, up to a constant
        for w in seq.windows(2) {
            if w[1] > 1e-12 {
                assert!(w[1] <= 50.0 * w[0] * w[0] + 1e-10, "{seq:?}");
            }
        }
        // initial-guess independence
        let from_zero = relax(&d, Boundary::Zero, &SolveSettings::default(), &zero).unwrap();
        let from_start = relax(&d, Boundary::Zero, &SolveSettings::default(), &start.u).unwrap();
        let diff = from_zero.u.iter().zip(&from_start.u).map(|(a, b)| (a - b).amax()).fold(0.0, f64::max);
        assert!(diff < 1e-7, "{diff}");
    }

    #[test]
    fn cubic_interpolation_finds_cubic_minimum() {
        // φ(t) = 1 - 2t + t³ has its minimum at t = sqrt(2/3)
        let f = |t: f64| 1.0 - 2.0 * t + t * t * t;
        let m = cubic_minimizer(1.0, -2.0, 1.5, f(1.5), 2.0, f(2.0));
        assert!((m - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn trace_csv_has_header_and_rows() {
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &[TraceRow { phase: Phase::Newton, iteration: 2, energy: -1.5, residual: 3e-9 }]).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s.lines().next().unwrap(), "phase,iteration,energy,residual");
        assert!(s.contains("newton,2,"));
    }
}
