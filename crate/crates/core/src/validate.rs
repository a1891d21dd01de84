//! Oracle suite: every analytic object in the toolkit checked against an
//! independent computation (finite differences, scaling fits, a numerically
//! solved lattice Green's function, brute-force synthesis).
//!
//! Each oracle is a plain function returning [`Check`]s so the CLI and the
//! tests can run them piecemeal; [`validate`] runs the whole suite for a config.

use std::f64::consts::PI;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{ModelKind, StudyConfig};
use crate::driver::{slope_fit, Model, SlopeFit};
use crate::error::{Error, Result};
use crate::greens::{
    g0, g0_derivatives, g1, g1_gradient, lattice_green_numeric, scalar_laplacian_constants, symbol, KernelCache,
    LatticeGreen, QuadratureSpec, SymbolData,
};
use crate::lattice::{generate_ball, stencil, LatticeSpec, Mat3, Structure, Vec3};
use crate::model::{hessian_apply, residual_forces, total_energy, Domain, LinearOperator};
use crate::moments::{a_from_b, coeffs_a, coeffs_b, eta, moments_from_b, truncated_moments, CoeffsB, MomentSet};
use crate::potential::ToyEam;

/// Relative tolerance of every finite-difference comparison.
pub const FD_TOLERANCE: f64 = 1e-6;
/// Evaluation points per finite-difference oracle.
pub const FD_POINTS: usize = 10;

/// One oracle outcome.
#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    /// Human-readable requirement on `value`, e.g. `<= 1e-10`.
    pub requirement: String,
    pub passed: bool,
}

impl Check {
    pub fn at_most(name: impl Into<String>, value: f64, limit: f64) -> Check {
        Check { name: name.into(), value, requirement: format!("<= {limit:e}"), passed: value <= limit }
    }

    pub fn at_least(name: impl Into<String>, value: f64, limit: f64) -> Check {
        Check { name: name.into(), value, requirement: format!(">= {limit:e}"), passed: value >= limit }
    }

    pub fn within(name: impl Into<String>, value: f64, lo: f64, hi: f64) -> Check {
        Check { name: name.into(), value, requirement: format!("in [{lo}, {hi}]"), passed: lo <= value && value <= hi }
    }

    pub fn holds(name: impl Into<String>, ok: bool) -> Check {
        Check { name: name.into(), value: f64::from(u8::from(ok)), requirement: "holds".into(), passed: ok }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag}  {:<44} {:>12.4e}  ({})", self.name, self.value, self.requirement)
    }
}

/// The linear model the oracles run on: symbol, lattice and operator, plus the
/// nonlinear potential when there is one.
pub struct OracleModel {
    pub kind: ModelKind,
    pub spec: LatticeSpec,
    pub symbol: SymbolData,
    pub operator: LinearOperator,
    pub quadrature: QuadratureSpec,
    pub nonlinear: Option<Model>,
}

impl OracleModel {
    pub fn build(cfg: &StudyConfig) -> Result<OracleModel> {
        let quadrature = QuadratureSpec::new(cfg.greens.quadrature)?;
        match cfg.model {
            ModelKind::ToyEam => {
                let m = Model::build(cfg)?;
                Ok(OracleModel {
                    kind: cfg.model,
                    spec: m.spec.clone(),
                    symbol: m.symbol.clone(),
                    operator: m.operator.clone(),
                    quadrature,
                    nonlinear: Some(m),
                })
            }
            ModelKind::ScalarLaplacian => {
                let (fc, spec) = scalar_laplacian_constants();
                let symbol = SymbolData::new(&fc, spec.cell_volume())?;
                let operator = LinearOperator::new(&spec, &fc);
                Ok(OracleModel { kind: cfg.model, spec, symbol, operator, quadrature, nonlinear: None })
            }
        }
    }

    pub fn a0(&self) -> f64 {
        self.spec.a0()
    }
}

fn rel(a: &Mat3, b: &Mat3) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

fn random_unit(rng: &mut impl Rng) -> Vec3 {
    loop {
        let v = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

/// `Ĥ(εk)` sampled at five ε and fitted by the even polynomial
/// `ε²c₂ + … + ε¹⁰c₁₀`; `c₂`, `c₄` must reproduce the Taylor terms.
pub fn symbol_taylor(data: &SymbolData, rng: &mut impl Rng) -> Vec<Check> {
    let eps: [f64; 5] = [0.1, 0.08, 0.06, 0.045, 0.03];
    let vander = DMatrix::from_fn(5, 5, |i, j| eps[i].powi(2 * j as i32 + 2));
    let lu = vander.lu();
    let (mut worst2, mut worst4, mut worst_im) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..FD_POINTS {
        let k = random_unit(rng);
        let mut c2 = Mat3::zeros();
        let mut c4 = Mat3::zeros();
        let samples: Vec<_> = eps.iter().map(|e| symbol(data, &(k * *e))).collect();
        for a in 0..3 {
            for b in 0..3 {
                let rhs = DVector::from_iterator(5, samples.iter().map(|s| s[a][b].re));
                let c = lu.solve(&rhs).expect("distinct nodes");
                c2[(a, b)] = c[0];
                c4[(a, b)] = c[1];
                worst_im = worst_im.max(samples.iter().map(|s| s[a][b].im.abs()).fold(0.0, f64::max));
            }
        }
        worst2 = worst2.max(rel(&c2, &data.quadratic(&k)));
        worst4 = worst4.max(rel(&c4, &data.quartic(&k)));
    }
    vec![
        Check::at_most("symbol: quadratic Taylor term vs scaling fit", worst2, 1e-8),
        Check::at_most("symbol: quartic Taylor term vs scaling fit", worst4, 1e-8),
        Check::at_most("symbol: imaginary part (centrosymmetry)", worst_im, 1e-12),
    ]
}

/// Applying the operator to `w cos(k·ℓ)` must give `Ĥ(k) w cos(k·ℓ)`.
pub fn plane_wave(m: &OracleModel, rng: &mut impl Rng) -> Result<Check> {
    let radius = 4.0 * m.a0() + m.operator.reach();
    let ball = generate_ball(&m.spec, radius)?;
    let mut worst = 0.0f64;
    for _ in 0..3 {
        let k = random_unit(rng) * rng.gen_range(0.3..2.5) / m.a0();
        let w = random_unit(rng);
        let u: Vec<Vec3> = ball.positions().iter().map(|x| w * k.dot(x).cos()).collect();
        let hk = symbol(&m.symbol, &k);
        let hw = Mat3::from_fn(|a, b| hk[a][b].re) * w;
        let h = m.operator.apply(&ball, &u, radius - m.operator.reach())?;
        for (x, v) in ball.positions().iter().zip(&h) {
            if x.norm() <= radius - m.operator.reach() {
                worst = worst.max((v - hw * k.dot(x).cos()).norm() / hw.norm().max(1e-300));
            }
        }
    }
    Ok(Check::at_most("operator: plane waves vs symbol", worst, 1e-10))
}

/// `g0((t,0,0)) = 1/(4πt)` for the unit Laplacian.
pub fn coulomb(data: &SymbolData, quad: QuadratureSpec) -> Result<Check> {
    let mut worst = 0.0f64;
    for t in [1.0, 2.0, 5.0] {
        let g = g0(data, &Vec3::new(t, 0.0, 0.0), quad)?;
        let want = Mat3::identity() / (4.0 * PI * t);
        worst = worst.max((g - want).amax());
    }
    Ok(Check::at_most("kernel: Laplacian g0 = 1/(4πt)", worst, 1e-10))
}

/// Homogeneity and parity of the continuum kernels.
pub fn kernel_scaling(data: &SymbolData, quad: QuadratureSpec, a0: f64, rng: &mut impl Rng) -> Result<Check> {
    let mut worst = 0.0f64;
    for _ in 0..FD_POINTS {
        let x = random_unit(rng) * rng.gen_range(1.5..4.0) * a0;
        let (a, b) = (g0(data, &x, quad)?, g1(data, &x, quad)?);
        worst = worst.max(rel(&(g0(data, &(x * 2.0), quad)? * 2.0), &a));
        worst = worst.max(rel(&(g1(data, &(x * 2.0), quad)? * 8.0), &b));
        worst = worst.max(rel(&g0(data, &-x, quad)?, &a));
        worst = worst.max(rel(&g1(data, &-x, quad)?, &b));
        worst = worst.max((a - a.transpose()).norm() / a.norm());
    }
    Ok(Check::at_most("kernel: homogeneity, parity, symmetry of G0/G1", worst, 1e-12))
}

fn amax<'a>(v: impl IntoIterator<Item = &'a f64>) -> f64 {
    v.into_iter().map(|x| x.abs()).fold(0.0, f64::max)
}

/// Jet derivatives of `G0` (orders 1–3) and `∇G1` against central differences
/// of the next lower derivative, step `1e-4|x|`.
pub fn kernel_derivatives(data: &SymbolData, quad: QuadratureSpec, a0: f64, rng: &mut impl Rng) -> Result<Vec<Check>> {
    let mut worst = [0.0f64; 4];
    for _ in 0..FD_POINTS {
        let x = random_unit(rng) * rng.gen_range(1.0..5.0) * a0;
        let h = 1e-4 * x.norm();
        let d = g0_derivatives(data, &x, quad)?;
        let grad1 = g1_gradient(data, &x, quad)?;
        let s1 = amax(d.first.iter().flatten().flatten());
        let s2 = amax(d.second.iter().flatten().flatten().flatten());
        let s3 = amax(d.third.iter().flatten().flatten().flatten().flatten());
        let sg = amax(grad1.iter().flatten().flatten());
        for j in 0..3 {
            let mut dx = Vec3::zeros();
            dx[j] = h;
            let (xp, xm) = (x + dx, x - dx);
            let fd0 = (g0(data, &xp, quad)? - g0(data, &xm, quad)?) / (2.0 * h);
            let fd1 = (g1(data, &xp, quad)? - g1(data, &xm, quad)?) / (2.0 * h);
            let (dp, dm) = (g0_derivatives(data, &xp, quad)?, g0_derivatives(data, &xm, quad)?);
            for i in 0..3 {
                for k in 0..3 {
                    worst[0] = worst[0].max((fd0[(i, k)] - d.first[i][k][j]).abs() / s1);
                    worst[3] = worst[3].max((fd1[(i, k)] - grad1[i][k][j]).abs() / sg);
                    for p in 0..3 {
                        let fd = (dp.first[i][k][p] - dm.first[i][k][p]) / (2.0 * h);
                        worst[1] = worst[1].max((fd - d.second[i][k][p][j]).abs() / s2);
                        for q in 0..3 {
                            let fd = (dp.second[i][k][p][q] - dm.second[i][k][p][q]) / (2.0 * h);
                            worst[2] = worst[2].max((fd - d.third[i][k][p][q][j]).abs() / s3);
                        }
                    }
                }
            }
        }
    }
    Ok(vec![
        Check::at_most("kernel: ∇G0 vs finite differences", worst[0], FD_TOLERANCE),
        Check::at_most("kernel: ∇²G0 vs finite differences", worst[1], FD_TOLERANCE),
        Check::at_most("kernel: ∇³G0 vs finite differences", worst[2], FD_TOLERANCE),
        Check::at_most("kernel: ∇G1 vs finite differences", worst[3], FD_TOLERANCE),
    ])
}

/// Largest `|𝒢|`, `|𝒢 − G0|`, `|𝒢 − G0 − G1|` over one radial shell `[r, r + a0)`.
#[derive(Clone, Debug, Serialize)]
pub struct DecayBin {
    /// Inner radius of the shell, units of a0.
    pub r: f64,
    pub lattice: f64,
    pub minus_g0: f64,
    pub minus_g0_g1: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GreenDecay {
    pub window: f64,
    pub identity_residual: f64,
    pub bins: Vec<DecayBin>,
    /// First bin of the fit range (units of a0).
    pub fit_from: f64,
    pub lattice: SlopeFit,
    pub minus_g0: SlopeFit,
    pub minus_g0_g1: SlopeFit,
}

/// Smallest window that leaves three full bins beyond `6 a0` to fit.
pub const MIN_DECAY_WINDOW: f64 = 9.0;

/// Solve the lattice Green's function on `B_{3W}` and return it with its
/// decay envelopes. `window` is in units of a0.
pub fn lattice_green(m: &OracleModel, window: f64) -> Result<(LatticeGreen, GreenDecay)> {
    if window < MIN_DECAY_WINDOW {
        return Err(Error::Config(format!(
            "key `greens.window`: decay fits need a window of at least {MIN_DECAY_WINDOW}, got {window}"
        )));
    }
    let a0 = m.a0();
    let w = window * a0;
    let lg = lattice_green_numeric(&m.symbol, &m.spec, &m.operator, w, 3.0 * w, m.quadrature)?;
    let nb = window.floor() as usize;
    let mut bins: Vec<DecayBin> =
        (0..nb).map(|b| DecayBin { r: b as f64, lattice: 0.0, minus_g0: 0.0, minus_g0_g1: 0.0 }).collect();
    let pts: Vec<Vec3> = lg.window().positions().iter().filter(|x| x.norm() >= a0).copied().collect();
    let mut cache = KernelCache::new(&m.symbol, m.quadrature);
    cache.prepare(&pts)?;
    for (x, g) in lg.window().positions().iter().zip(lg.values()) {
        let r = x.norm() / a0;
        let b = r.floor() as usize;
        if r < 1.0 || b >= nb {
            continue;
        }
        let k = cache.derivatives(x)?;
        let (k0, k1) = (k.g0_matrix(), k.g1_matrix());
        let bin = &mut bins[b];
        bin.lattice = bin.lattice.max(g.norm());
        bin.minus_g0 = bin.minus_g0.max((g - k0).norm());
        bin.minus_g0_g1 = bin.minus_g0_g1.max((g - k0 - k1).norm());
    }
    let fit_from = 6.0;
    let fit = |f: fn(&DecayBin) -> f64| {
        let pts: Vec<(f64, f64)> = bins.iter().filter(|b| b.r >= fit_from).map(|b| (b.r + 0.5, f(b))).collect();
        slope_fit(&pts)
    };
    let decay = GreenDecay {
        window,
        identity_residual: lg.identity_residual(),
        lattice: fit(|b| b.lattice)?,
        minus_g0: fit(|b| b.minus_g0)?,
        minus_g0_g1: fit(|b| b.minus_g0_g1)?,
        bins,
        fit_from,
    };
    Ok((lg, decay))
}

pub fn decay_checks(d: &GreenDecay) -> Vec<Check> {
    let range = format!("[{}, {}]", d.fit_from, d.window);
    vec![
        Check::at_most("lattice GF: identity residual", d.identity_residual, 1e-8),
        Check::within(format!("lattice GF: slope of |G| over {range}"), d.lattice.slope, -1.15, -0.85),
        Check::at_most(format!("lattice GF: slope of |G - G0| over {range}"), d.minus_g0.slope, -1.8),
        Check::at_least("lattice GF: slope gain from adding G1", d.minus_g0.slope - d.minus_g0_g1.slope, 0.7),
    ]
}

/// For the unit Laplacian, `4π|ℓ| 𝒢(ℓ) → 1`.
pub fn coulomb_limit(lg: &LatticeGreen) -> Check {
    let g = lg.at([10, 0, 0]).map_or(f64::NAN, |g| g[(0, 0)] * 4.0 * PI * 10.0);
    Check::at_most("lattice GF: |4π|ℓ|G(ℓ) - 1| at |ℓ| = 10", (g - 1.0).abs(), 0.05)
}

fn random_moments(rng: &mut impl Rng) -> MomentSet {
    let mut m = MomentSet::default();
    m.i1.as_flattened_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    m.i2.as_flattened_mut().as_flattened_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    m.i3.as_flattened_mut().as_flattened_mut().as_flattened_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    m.symmetrized()
}

/// `M → b → M` and `a_from_b(coeffs_b(M)) = coeffs_a(M)` on random moment sets.
pub fn coefficient_algebra(basis: &Mat3, samples: usize, rng: &mut impl Rng) -> Result<Vec<Check>> {
    let (mut worst_m, mut worst_a) = (0.0f64, 0.0f64);
    for _ in 0..samples {
        let m = random_moments(rng);
        let b = coeffs_b(&m, basis)?;
        let back = moments_from_b(&b).scaled_sum(1.0, &m, -1.0);
        let scale = m.norm(1) + m.norm(2) + m.norm(3);
        worst_m = worst_m.max((back.norm(1) + back.norm(2) + back.norm(3)) / scale);
        let (a1, a2) = (a_from_b(&b), coeffs_a(&m));
        worst_a = worst_a.max(a1.scaled_sum(1.0, &a2, -1.0).norm() / a2.norm().max(1e-300));
    }
    Ok(vec![
        Check::at_most(format!("coefficients: M -> b -> M ({samples} random sets)"), worst_m, 1e-10),
        Check::at_most(format!("coefficients: a_from_b(coeffs_b(M)) = coeffs_a(M) ({samples} sets)"), worst_a, 1e-10),
    ])
}

/// Mixed difference `D_{s_a} D_{s_b} … 𝒢` at lattice point `z`, the `s` being basis vectors.
fn mixed_difference(lg: &LatticeGreen, z: [i32; 3], dirs: &[usize]) -> Option<Mat3> {
    let mut out = Mat3::zeros();
    for mask in 0u32..(1 << dirs.len()) {
        let mut w = z;
        for (bit, &a) in dirs.iter().enumerate() {
            if mask & (1 << bit) != 0 {
                w[a] += 1;
            }
        }
        let sign = if (dirs.len() as u32 - mask.count_ones()) % 2 == 0 { 1.0 } else { -1.0 };
        out += lg.at(w)? * sign;
    }
    Some(out)
}

fn random_coeffs_b(basis: Mat3, rng: &mut impl Rng) -> CoeffsB {
    let mut b = CoeffsB::zero(basis);
    for k in 0..3 {
        for a in 0..3 {
            b.b1[k][a] = rng.gen_range(-1.0..1.0);
            for c in a..3 {
                let v = rng.gen_range(-1.0..1.0);
                b.b2[k][a][c] = v;
                b.b2[k][c][a] = v;
                for d in c..3 {
                    let v = rng.gen_range(-1.0..1.0);
                    for [i, j, l] in [[a, c, d], [a, d, c], [c, a, d], [c, d, a], [d, a, c], [d, c, a]] {
                        b.b3[k][i][j][l] = v;
                    }
                }
            }
        }
    }
    b
}

/// Build `u = Σ b : D^i 𝒢 e_k` from the numeric lattice Green's function,
/// take its truncated moments and recover `b`. Returns the relative error.
pub fn synthetic_roundtrip(m: &OracleModel, lg: &LatticeGreen, rng: &mut impl Rng) -> Result<f64> {
    let basis = *m.spec.basis();
    let smax = (0..3).map(|a| basis.column(a).norm()).fold(0.0, f64::max);
    // H[u] lives within 3 smax of the origin; keep it where η = 1
    let support = 3.0 * smax * (1.0 + 1e-9);
    let radius = 3.0 * support;
    let ball = generate_ball(&m.spec, 2.0 * radius / 3.0 + m.operator.reach())?;
    if ball.radius() + 3.0 * smax > lg.window().radius() {
        return Err(Error::Config(format!(
            "key `greens.window`: synthetic moments need a window of at least {:.1} a0",
            (ball.radius() + 3.0 * smax) / m.a0()
        )));
    }
    let b = random_coeffs_b(basis, rng);
    let mut u = vec![Vec3::zeros(); ball.len()];
    for (z, out) in ball.coords().iter().zip(u.iter_mut()) {
        let missing = || Error::Domain("synthetic field leaves the Green's function window".into());
        for a in 0..3 {
            let d1 = mixed_difference(lg, *z, &[a]).ok_or_else(missing)?;
            *out += d1 * Vec3::new(b.b1[0][a], b.b1[1][a], b.b1[2][a]);
            for c in 0..3 {
                let d2 = mixed_difference(lg, *z, &[a, c]).ok_or_else(missing)?;
                *out += d2 * Vec3::new(b.b2[0][a][c], b.b2[1][a][c], b.b2[2][a][c]);
                for e in 0..3 {
                    let d3 = mixed_difference(lg, *z, &[a, c, e]).ok_or_else(missing)?;
                    *out += d3 * Vec3::new(b.b3[0][a][c][e], b.b3[1][a][c][e], b.b3[2][a][c][e]);
                }
            }
        }
    }
    let moments = truncated_moments(&m.operator, &ball, &u, radius)?;
    let back = coeffs_b(&moments, &basis)?;
    Ok(back.distance(&b) / b.norm())
}

/// Values and `C²` junctions of the moment cutoff.
pub fn cutoff_function() -> Vec<Check> {
    let r = 9.0;
    let exact = eta(0.0, r) == 1.0
        && eta(r / 3.0, r) == 1.0
        && eta(2.0 * r / 3.0, r) == 0.0
        && eta(r, r) == 0.0
        && (eta(r / 2.0, r) - 0.5).abs() < 1e-15;
    let h = 1e-4;
    let mut jump = 0.0f64;
    for r0 in [r / 3.0, 2.0 * r / 3.0] {
        // one-sided first and second differences vanish on both sides
        for s in [-1.0, 1.0] {
            let d1 = (eta(r0 + s * h, r) - eta(r0, r)) / h;
            let d2 = (eta(r0 + 2.0 * s * h, r) - 2.0 * eta(r0 + s * h, r) + eta(r0, r)) / (h * h);
            jump = jump.max(d1.abs() / 1e-6).max(d2.abs() / 1e-2);
        }
    }
    vec![
        Check::holds("cutoff: boundary values exact", exact),
        Check::at_most("cutoff: C² junctions (scaled one-sided differences)", jump, 1.0),
    ]
}

/// Inversion symmetry and lattice spanning of stencils on every structure.
pub fn stencil_invariants() -> Result<Check> {
    let mut ok = true;
    for s in Structure::ALL {
        let spec = LatticeSpec::new(s, 1.0)?;
        for shells in [1.05, 1.3, 1.75, 2.2] {
            let st = stencil(&spec, shells * spec.nearest_neighbor())?;
            let neg = st.negation();
            let involution = (0..st.len()).all(|i| neg[neg[i]] == i && (st.offsets()[i] + st.offsets()[neg[i]]).norm() < 1e-12);
            ok &= st.is_symmetric() && st.spans_lattice() && involution;
        }
    }
    Ok(Check::holds("stencil: R = -R and spanning for bcc, fcc, sc", ok))
}

fn random_vecs(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<Vec3> {
    (0..n)
        .map(|_| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)) * scale)
        .collect()
}

fn dot(a: &[Vec3], b: &[Vec3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.dot(y)).sum()
}

fn norm(a: &[Vec3]) -> f64 {
    dot(a, a).sqrt()
}

/// The potential's step: its third derivatives reach ~1e4 in the taper, so
/// `1e-6` keeps the truncation error well below the tolerance.
const FD_STEP: f64 = 1e-6;

/// Site energy gradient and Hessian against central differences.
pub fn site_derivatives(pot: &ToyEam, offsets: &[Vec3], rng: &mut impl Rng) -> Result<Vec<Check>> {
    let n = offsets.len();
    let nn = offsets.iter().map(|o| o.norm()).fold(f64::INFINITY, f64::min);
    let (mut worst_g, mut worst_h) = (0.0f64, 0.0f64);
    for _ in 0..FD_POINTS {
        let d = random_vecs(rng, n, 0.05 * nn);
        let dir = random_vecs(rng, n, 1.0);
        let shifted = |t: f64| -> Vec<Vec3> { d.iter().zip(&dir).map(|(a, b)| a + b * t).collect() };
        let g = pot.site_gradient(offsets, &d)?;
        let fd = (pot.site_energy(offsets, &shifted(FD_STEP))? - pot.site_energy(offsets, &shifted(-FD_STEP))?)
            / (2.0 * FD_STEP);
        worst_g = worst_g.max((fd - dot(&g, &dir)).abs() / (norm(&g) * norm(&dir)));
        let mut hv = vec![Vec3::zeros(); n];
        pot.site_hessian_apply(offsets, &d, &dir, &mut hv)?;
        let gp = pot.site_gradient(offsets, &shifted(FD_STEP))?;
        let gm = pot.site_gradient(offsets, &shifted(-FD_STEP))?;
        let fd: Vec<Vec3> = gp.iter().zip(&gm).map(|(p, m)| (p - m) / (2.0 * FD_STEP)).collect();
        let diff: Vec<Vec3> = fd.iter().zip(&hv).map(|(a, b)| a - b).collect();
        worst_h = worst_h.max(norm(&diff) / norm(&hv));
    }
    Ok(vec![
        Check::at_most("potential: site gradient vs finite differences", worst_g, FD_TOLERANCE),
        Check::at_most("potential: site Hessian vs finite differences", worst_h, FD_TOLERANCE),
    ])
}

/// Total energy, forces and Hessian action of a defect domain against central differences.
pub fn domain_derivatives(domain: &Domain, rng: &mut impl Rng) -> Result<Vec<Check>> {
    let n = domain.len();
    let a0 = domain.sites().spec().a0();
    let (mut worst_g, mut worst_h) = (0.0f64, 0.0f64);
    for _ in 0..FD_POINTS {
        let u = random_vecs(rng, n, 0.02 * a0);
        let mut dir = random_vecs(rng, n, 1.0);
        for (i, v) in dir.iter_mut().enumerate() {
            if !domain.is_free(i) {
                *v = Vec3::zeros();
            }
        }
        let shifted = |t: f64| -> Vec<Vec3> { u.iter().zip(&dir).map(|(a, b)| a + b * t).collect() };
        let f = residual_forces(&u, domain)?;
        let fd = (total_energy(&shifted(FD_STEP), domain)? - total_energy(&shifted(-FD_STEP), domain)?) / (2.0 * FD_STEP);
        worst_g = worst_g.max((fd + dot(&f, &dir)).abs() / (norm(&f) * norm(&dir)));
        let hv = hessian_apply(&u, &dir, domain)?;
        let fp = residual_forces(&shifted(FD_STEP), domain)?;
        let fm = residual_forces(&shifted(-FD_STEP), domain)?;
        let diff: Vec<Vec3> = (0..n).map(|i| -(fp[i] - fm[i]) / (2.0 * FD_STEP) - hv[i]).collect();
        worst_h = worst_h.max(norm(&diff) / norm(&hv));
    }
    Ok(vec![
        Check::at_most("model: forces vs finite differences of the energy", worst_g, FD_TOLERANCE),
        Check::at_most("model: Hessian action vs finite differences", worst_h, FD_TOLERANCE),
    ])
}

/// Everything [`validate`] found.
#[derive(Clone, Debug, Serialize)]
pub struct ValidationReport {
    pub model: ModelKind,
    pub checks: Vec<Check>,
    pub decay: GreenDecay,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

/// Run the full oracle suite on the model selected by `cfg`.
///
/// Randomised oracles draw from `output.seed`. The lattice Green's function is
/// solved once on the `greens.window` window.
pub fn validate(cfg: &StudyConfig) -> Result<ValidationReport> {
    let m = OracleModel::build(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.output.seed);
    let mut checks = symbol_taylor(&m.symbol, &mut rng);
    checks.push(plane_wave(&m, &mut rng)?);
    if m.kind == ModelKind::ScalarLaplacian {
        checks.push(coulomb(&m.symbol, m.quadrature)?);
    }
    checks.push(kernel_scaling(&m.symbol, m.quadrature, m.a0(), &mut rng)?);
    checks.extend(kernel_derivatives(&m.symbol, m.quadrature, m.a0(), &mut rng)?);
    log::info!("solving the lattice Green's function on a {} a0 window", cfg.greens.window);
    let (lg, decay) = lattice_green(&m, cfg.greens.window)?;
    checks.extend(decay_checks(&decay));
    if m.kind == ModelKind::ScalarLaplacian {
        checks.push(coulomb_limit(&lg));
    }
    checks.extend(coefficient_algebra(m.spec.basis(), 100, &mut rng)?);
    checks.push(Check::at_most("coefficients: b recovered from synthetic fields", synthetic_roundtrip(&m, &lg, &mut rng)?, 1e-8));
    checks.extend(cutoff_function());
    checks.push(stencil_invariants()?);
    if let Some(model) = &m.nonlinear {
        checks.extend(site_derivatives(&model.potential, model.stencil.offsets(), &mut rng)?);
        let domain = model.domain(2.5 * model.a0())?;
        checks.extend(domain_derivatives(&domain, &mut rng)?);
    }
    Ok(ValidationReport { model: m.kind, checks, decay })
}
