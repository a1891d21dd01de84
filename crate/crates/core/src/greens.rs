//! Continuum Green's functions of the linearised lattice operator and a
//! numerically solved lattice Green's function used to validate them.
//!
//! `G0` is the classical anisotropic kernel written as a line integral over the
//! great circle perpendicular to `x`; `G1` is its first lattice correction,
//! built from the quartic Taylor term of the symbol. Both integrals are
//! evaluated with the periodic trapezoid rule, which converges geometrically
//! for these smooth integrands. Derivatives are taken by pushing [`Jet3`]
//! values through the same quadrature, frame construction included.

use std::f64::consts::PI;

use nalgebra::SymmetricEigen;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jet::{Jet3, Scalar};
use crate::lattice::{generate_ball, stencil, LatticeBall, LatticeSpec, Mat3, Structure, Vec3};
use crate::model::LinearOperator;
use crate::potential::ForceConstants;

mod cache;
pub use cache::{rotate_flat, KernelCache, KernelDerivatives, OrbitRef, PointGroup};

/// Exponents of the six quadratic monomials.
const QUADRATIC: [[u8; 3]; 6] = [[2, 0, 0], [1, 1, 0], [1, 0, 1], [0, 2, 0], [0, 1, 1], [0, 0, 2]];

/// Exponents of the fifteen quartic monomials.
const QUARTIC: [[u8; 3]; 15] = [
    [4, 0, 0],
    [3, 1, 0],
    [3, 0, 1],
    [2, 2, 0],
    [2, 1, 1],
    [2, 0, 2],
    [1, 3, 0],
    [1, 2, 1],
    [1, 1, 2],
    [1, 0, 3],
    [0, 4, 0],
    [0, 3, 1],
    [0, 2, 2],
    [0, 1, 3],
    [0, 0, 4],
];

/// Quartic monomial as a product of two quadratic ones.
const QUARTIC_SPLIT: [(usize, usize); 15] = {
    let mut out = [(0, 0); 15];
    let mut q = 0;
    while q < 15 {
        let target = QUARTIC[q];
        let mut found = false;
        let mut a = 0;
        while a < 6 && !found {
            let mut b = a;
            while b < 6 && !found {
                let (x, y) = (QUADRATIC[a], QUADRATIC[b]);
                if x[0] + y[0] == target[0] && x[1] + y[1] == target[1] && x[2] + y[2] == target[2] {
                    out[q] = (a, b);
                    found = true;
                }
                b += 1;
            }
            a += 1;
        }
        assert!(found);
        q += 1;
    }
    out
};

fn monomial_of(idx: &[usize]) -> [u8; 3] {
    let mut e = [0u8; 3];
    for &i in idx {
        e[i] += 1;
    }
    e
}

fn quadratic_index(e: [u8; 3]) -> usize {
    QUADRATIC.iter().position(|m| *m == e).unwrap()
}

fn quartic_index(e: [u8; 3]) -> usize {
    QUARTIC.iter().position(|m| *m == e).unwrap()
}

type M3<S> = [[S; 3]; 3];

fn sym_inverse<S: Scalar>(m: &M3<S>) -> M3<S> {
    let c00 = m[1][1] * m[2][2] - m[1][2] * m[1][2];
    let c01 = m[0][2] * m[1][2] - m[0][1] * m[2][2];
    let c02 = m[0][1] * m[1][2] - m[0][2] * m[1][1];
    let c11 = m[0][0] * m[2][2] - m[0][2] * m[0][2];
    let c12 = m[0][2] * m[0][1] - m[0][0] * m[1][2];
    let c22 = m[0][0] * m[1][1] - m[0][1] * m[0][1];
    let det = m[0][0] * c00 + m[0][1] * c01 + m[0][2] * c02;
    let r = det.recip();
    let (a, b, c, d, e, f) = (c00 * r, c01 * r, c02 * r, c11 * r, c12 * r, c22 * r);
    [[a, b, c], [b, d, e], [c, e, f]]
}

fn mat_mul<S: Scalar>(a: &M3<S>, b: &M3<S>) -> M3<S> {
    let mut out = [[S::from_f64(0.0); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

fn to_mat3(m: &M3<f64>) -> Mat3 {
    Mat3::from_fn(|i, j| m[i][j])
}

/// Number of nodes of the periodic trapezoid rule on the unit circle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuadratureSpec {
    pub nodes: usize,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        QuadratureSpec { nodes: 64 }
    }
}

impl QuadratureSpec {
    pub fn new(nodes: usize) -> Result<Self> {
        if nodes < 8 || nodes % 2 == 1 {
            return Err(Error::Config(format!("quadrature needs an even node count >= 8, got {nodes}")));
        }
        Ok(QuadratureSpec { nodes })
    }

    fn angles(&self) -> impl Iterator<Item = (f64, f64)> {
        let n = self.nodes;
        (0..n).map(move |q| {
            let t = 2.0 * PI * q as f64 / n as f64;
            (t.cos(), t.sin())
        })
    }
}

/// Force constants plus the Taylor coefficients of their symbol.
#[derive(Clone, Debug)]
pub struct SymbolData {
    offsets: Vec<Vec3>,
    pairs: Vec<(usize, usize, Mat3)>,
    c_vol: f64,
    quad2: [[[f64; 6]; 3]; 3],
    quad4: [[[f64; 15]; 3]; 3],
}

impl SymbolData {
    /// Build and check that `Ĥ₂` is positive definite on the unit sphere.
    pub fn new(fc: &ForceConstants, c_vol: f64) -> Result<Self> {
        let offsets = fc.stencil().offsets().to_vec();
        let n = offsets.len();
        let mut pairs = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let c = *fc.block(i, j);
                if c.iter().any(|v| *v != 0.0) {
                    pairs.push((i, j, c));
                }
            }
        }
        let mut quad2 = [[[0.0; 6]; 3]; 3];
        let mut quad4 = [[[0.0; 15]; 3]; 3];
        let q2_index: Vec<usize> =
            (0..9).map(|t| quadratic_index(monomial_of(&[t / 3, t % 3]))).collect();
        let q4_index: Vec<usize> = (0..81)
            .map(|t| quartic_index(monomial_of(&[t / 27, (t / 9) % 3, (t / 3) % 3, t % 3])))
            .collect();
        for &(i, j, c) in &pairs {
            let (r, s) = (offsets[i], offsets[j]);
            let mut w2 = [0.0; 6];
            for t in 0..9 {
                w2[q2_index[t]] += r[t / 3] * s[t % 3];
            }
            // a = k·ρ, b = k·ς:  a²b²/4 - (ab³ + a³b)/6
            let mut w4 = [0.0; 15];
            for t in 0..81 {
                let (p, q, u, v) = (t / 27, (t / 9) % 3, (t / 3) % 3, t % 3);
                w4[q4_index[t]] += r[p] * r[q] * s[u] * s[v] / 4.0
                    - (r[p] * s[q] * s[u] * s[v] + r[p] * r[q] * r[u] * s[v]) / 6.0;
            }
            for a in 0..3 {
                for b in 0..3 {
                    for m in 0..6 {
                        quad2[a][b][m] += c[(a, b)] * w2[m];
                    }
                    for m in 0..15 {
                        quad4[a][b][m] += c[(a, b)] * w4[m];
                    }
                }
            }
        }
        let data = SymbolData { offsets, pairs, c_vol, quad2, quad4 };
        data.check_stability()?;
        Ok(data)
    }

    /// Nearest-neighbour scalar Laplacian on the unit cubic lattice, acting on
    /// each component separately: `Ĥ(k) = Σ_j 2(1 - cos k_j) I`.
    pub fn scalar_laplacian() -> Self {
        let (fc, _) = scalar_laplacian_constants();
        SymbolData::new(&fc, 1.0).expect("the Laplacian is stable")
    }

    pub fn cell_volume(&self) -> f64 {
        self.c_vol
    }

    fn check_stability(&self) -> Result<()> {
        let n = 400;
        let golden = PI * (3.0 - 5f64.sqrt());
        let mut lo = f64::INFINITY;
        let mut hi: f64 = 0.0;
        for i in 0..n {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let t = golden * i as f64;
            let k = Vec3::new(r * t.cos(), r * t.sin(), z);
            let eig = SymmetricEigen::new(self.quadratic(&k)).eigenvalues;
            lo = lo.min(eig.min());
            hi = hi.max(eig.max());
        }
        if !(lo > 1e-10 * hi) {
            return Err(Error::Instability(format!(
                "smallest eigenvalue of the long-wave symbol is {lo:.3e} (largest {hi:.3e})"
            )));
        }
        Ok(())
    }

    /// Smallest eigenvalue of `Ĥ₂` over a Fibonacci sampling of the sphere.
    pub fn min_long_wave_stiffness(&self, samples: usize) -> f64 {
        let golden = PI * (3.0 - 5f64.sqrt());
        (0..samples)
            .map(|i| {
                let z = 1.0 - 2.0 * (i as f64 + 0.5) / samples as f64;
                let r = (1.0 - z * z).sqrt();
                let t = golden * i as f64;
                let k = Vec3::new(r * t.cos(), r * t.sin(), z);
                SymmetricEigen::new(self.quadratic(&k)).eigenvalues.min()
            })
            .fold(f64::INFINITY, f64::min)
    }

    fn quadratic_monomials<S: Scalar>(k: &[S; 3]) -> [S; 6] {
        [k[0] * k[0], k[0] * k[1], k[0] * k[2], k[1] * k[1], k[1] * k[2], k[2] * k[2]]
    }

    fn eval_quadratic<S: Scalar>(&self, m2: &[S; 6]) -> M3<S> {
        let zero = S::from_f64(0.0);
        let mut out = [[zero; 3]; 3];
        for a in 0..3 {
            for b in a..3 {
                let mut acc = zero;
                for (w, m) in self.quad2[a][b].iter().zip(m2) {
                    if *w != 0.0 {
                        acc = acc + *m * *w;
                    }
                }
                out[a][b] = acc;
                out[b][a] = acc;
            }
        }
        out
    }

    fn eval_quartic<S: Scalar>(&self, m2: &[S; 6]) -> M3<S> {
        let zero = S::from_f64(0.0);
        let m4: Vec<S> = QUARTIC_SPLIT.iter().map(|&(a, b)| m2[a] * m2[b]).collect();
        let mut out = [[zero; 3]; 3];
        for a in 0..3 {
            for b in a..3 {
                let mut acc = zero;
                for (w, m) in self.quad4[a][b].iter().zip(&m4) {
                    if *w != 0.0 {
                        acc = acc + *m * *w;
                    }
                }
                out[a][b] = acc;
                out[b][a] = acc;
            }
        }
        out
    }

    /// `Ĥ₂(k) = Σ C_{ρς} (k·ρ)(k·ς)`.
    pub fn quadratic(&self, k: &Vec3) -> Mat3 {
        let m2 = Self::quadratic_monomials(&[k.x, k.y, k.z]);
        to_mat3(&self.eval_quadratic(&m2))
    }

    /// The quartic Taylor term `Ĥ₄(k)`.
    pub fn quartic(&self, k: &Vec3) -> Mat3 {
        let m2 = Self::quadratic_monomials(&[k.x, k.y, k.z]);
        to_mat3(&self.eval_quartic(&m2))
    }

    /// `A₀(σ) = -Ĥ₂⁻¹ Ĥ₄ Ĥ₂⁻¹`.
    pub fn a0_matrix(&self, s: &Vec3) -> Mat3 {
        let m2 = Self::quadratic_monomials(&[s.x, s.y, s.z]);
        let inv = sym_inverse(&self.eval_quadratic(&m2));
        let h4 = self.eval_quartic(&m2);
        let a = mat_mul(&mat_mul(&inv, &h4), &inv);
        -to_mat3(&a)
    }

    /// Coefficients of `Ĥ₂` over the quadratic monomials `xx, xy, xz, yy, yz, zz`.
    pub fn quadratic_coefficients(&self) -> &[[[f64; 6]; 3]; 3] {
        &self.quad2
    }

    /// Coefficients of `Ĥ₄` over the fifteen quartic monomials, graded lexicographic.
    pub fn quartic_coefficients(&self) -> &[[[f64; 15]; 3]; 3] {
        &self.quad4
    }
}

/// Force constants of the componentwise nearest-neighbour Laplacian on the unit
/// simple cubic lattice, and that lattice.
pub fn scalar_laplacian_constants() -> (ForceConstants, LatticeSpec) {
    let spec = LatticeSpec::new(Structure::Sc, 1.0).expect("unit lattice");
    let st = stencil(&spec, 1.0).expect("first shell");
    let n = st.len();
    let mut blocks = vec![Mat3::zeros(); n * n];
    for i in 0..n {
        blocks[i * n + i] = Mat3::identity() * 0.5;
    }
    (ForceConstants::from_blocks(st, blocks), spec)
}

/// `Ĥ(k) = Σ_{ρ,ς} (e^{-ik·ρ} - 1)(e^{ik·ς} - 1) C_{ρς}`.
pub fn symbol(data: &SymbolData, k: &Vec3) -> [[Complex64; 3]; 3] {
    let phase: Vec<Complex64> =
        data.offsets.iter().map(|r| Complex64::from_polar(1.0, k.dot(r)) - 1.0).collect();
    let mut out = [[Complex64::new(0.0, 0.0); 3]; 3];
    for &(i, j, c) in &data.pairs {
        let w = phase[i].conj() * phase[j];
        for a in 0..3 {
            for b in 0..3 {
                out[a][b] += w * c[(a, b)];
            }
        }
    }
    out
}

/// `(Ĥ₂, Ĥ₄)` as callable polynomials.
pub fn symbol_taylor(data: &SymbolData) -> (impl Fn(&Vec3) -> Mat3 + '_, impl Fn(&Vec3) -> Mat3 + '_) {
    (move |k: &Vec3| data.quadratic(k), move |k: &Vec3| data.quartic(k))
}

/// Unit vector `x/|x|`, an orthonormal frame `(e, f)` of the plane `⟂ x`, and `|x|`.
fn circle_frame<S: Scalar>(x: &[S; 3]) -> (S, [S; 3], [S; 3]) {
    let r = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
    let inv = r.recip();
    let u = [x[0] * inv, x[1] * inv, x[2] * inv];
    let mut axis = 0;
    for i in 1..3 {
        if x[i].value().abs() < x[axis].value().abs() {
            axis = i;
        }
    }
    let zero = S::from_f64(0.0);
    let mut e = [zero; 3];
    for i in 0..3 {
        e[i] = -(u[i] * u[axis]);
    }
    e[axis] = e[axis] + S::from_f64(1.0);
    let en = (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt().recip();
    let e = [e[0] * en, e[1] * en, e[2] * en];
    let f = [
        u[1] * e[2] - u[2] * e[1],
        u[2] * e[0] - u[0] * e[2],
        u[0] * e[1] - u[1] * e[0],
    ];
    (r, e, f)
}

/// Trapezoid sums of `Ĥ₂(σ)⁻¹` and, optionally, `A₀(σ)` over the circle `⟂ x`,
/// each already multiplied by the prefactor `c_vol / (8π²|x|)`.
fn circle_integrals<S: Scalar>(data: &SymbolData, x: &[S; 3], quad: QuadratureSpec, with_a0: bool) -> (M3<S>, M3<S>) {
    let zero = S::from_f64(0.0);
    let (r, e, f) = circle_frame(x);
    let mut g = [[zero; 3]; 3];
    let mut a = [[zero; 3]; 3];
    for (c, s) in quad.angles() {
        let sigma = [e[0] * c + f[0] * s, e[1] * c + f[1] * s, e[2] * c + f[2] * s];
        let m2 = SymbolData::quadratic_monomials(&sigma);
        let inv = sym_inverse(&data.eval_quadratic(&m2));
        for i in 0..3 {
            for j in i..3 {
                g[i][j] = g[i][j] + inv[i][j];
            }
        }
        if with_a0 {
            let h4 = data.eval_quartic(&m2);
            let t = mat_mul(&inv, &h4);
            for i in 0..3 {
                for j in i..3 {
                    let v = t[i][0] * inv[0][j] + t[i][1] * inv[1][j] + t[i][2] * inv[2][j];
                    a[i][j] = a[i][j] - v;
                }
            }
        }
    }
    let scale = r.recip() * (data.c_vol / (8.0 * PI * PI) * 2.0 * PI / quad.nodes as f64);
    for i in 0..3 {
        for j in i..3 {
            g[i][j] = g[i][j] * scale;
            g[j][i] = g[i][j];
            a[i][j] = a[i][j] * scale;
            a[j][i] = a[i][j];
        }
    }
    (g, a)
}

fn nonzero(x: &Vec3) -> Result<()> {
    if x.norm() == 0.0 || !x.iter().all(|v| v.is_finite()) {
        return Err(Error::Domain("Green's functions are singular at the origin".into()));
    }
    Ok(())
}

/// `G0(x) = c_vol / (8π²|x|) ∮ Ĥ₂(σ)⁻¹ dσ`, degree −1.
pub fn g0(data: &SymbolData, x: &Vec3, quad: QuadratureSpec) -> Result<Mat3> {
    nonzero(x)?;
    Ok(to_mat3(&circle_integrals(data, &[x.x, x.y, x.z], quad, false).0))
}

/// Jets of the quadrature-discretised `G0` and of the pre-Laplacian `G1` potential
/// at one point. Everything the predictor needs comes out of this.
#[derive(Clone, Copy, Debug)]
pub struct KernelJets {
    pub g0: [[Jet3; 3]; 3],
    pub f1: [[Jet3; 3]; 3],
}

impl KernelJets {
    pub fn compute(data: &SymbolData, x: &Vec3, quad: QuadratureSpec) -> Result<Self> {
        nonzero(x)?;
        let (g0, f1) = circle_integrals(data, &Jet3::variables([x.x, x.y, x.z]), quad, true);
        Ok(KernelJets { g0, f1 })
    }

    pub fn g0(&self) -> Mat3 {
        Mat3::from_fn(|i, k| self.g0[i][k].value())
    }

    /// `G1 = -Δ F`.
    pub fn g1(&self) -> Mat3 {
        Mat3::from_fn(|i, k| -(self.f1[i][k].partial([2, 0, 0]) + self.f1[i][k].partial([0, 2, 0]) + self.f1[i][k].partial([0, 0, 2])))
    }

    /// `∂_j G1_{ik}` stored as `[i][k][j]`.
    pub fn g1_gradient(&self) -> [[[f64; 3]; 3]; 3] {
        let mut out = [[[0.0; 3]; 3]; 3];
        for i in 0..3 {
            for k in 0..3 {
                for j in 0..3 {
                    let mut acc = 0.0;
                    for m in 0..3 {
                        let mut a = [0u8; 3];
                        a[j] += 1;
                        a[m] += 2;
                        acc += self.f1[i][k].partial(a);
                    }
                    out[i][k][j] = -acc;
                }
            }
        }
        out
    }
}

/// `G1(x) = -Δ_x [c_vol / (8π²|x|) ∮ A₀(σ) dσ]`, degree −3.
pub fn g1(data: &SymbolData, x: &Vec3, quad: QuadratureSpec) -> Result<Mat3> {
    Ok(KernelJets::compute(data, x, quad)?.g1())
}

/// Derivatives of `G0` up to third order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct G0Derivatives {
    /// `[i][k][j] = ∂_j G0_{ik}`
    pub first: [[[f64; 3]; 3]; 3],
    /// `[i][k][j][m] = ∂_j ∂_m G0_{ik}`
    pub second: [[[[f64; 3]; 3]; 3]; 3],
    /// `[i][k][j][m][n]`
    pub third: [[[[[f64; 3]; 3]; 3]; 3]; 3],
}

pub fn g0_derivatives(data: &SymbolData, x: &Vec3, quad: QuadratureSpec) -> Result<G0Derivatives> {
    nonzero(x)?;
    let (g, _) = circle_integrals(data, &Jet3::variables([x.x, x.y, x.z]), quad, false);
    let mut out = G0Derivatives::default();
    for i in 0..3 {
        for k in 0..3 {
            out.first[i][k] = g[i][k].gradient();
            out.second[i][k] = g[i][k].hessian();
            out.third[i][k] = g[i][k].third();
        }
    }
    Ok(out)
}

/// `∂_j G1_{ik}` as `[i][k][j]`.
pub fn g1_gradient(data: &SymbolData, x: &Vec3, quad: QuadratureSpec) -> Result<[[[f64; 3]; 3]; 3]> {
    Ok(KernelJets::compute(data, x, quad)?.g1_gradient())
}

/// A numerically solved lattice Green's function restricted to a window.
#[derive(Clone, Debug)]
pub struct LatticeGreen {
    ball: LatticeBall,
    values: Vec<Mat3>,
    residual: f64,
    iterations: usize,
}

impl LatticeGreen {
    pub fn window(&self) -> &LatticeBall {
        &self.ball
    }
    /// `𝒢(ℓ)` with columns indexed by the source direction `k`.
    pub fn values(&self) -> &[Mat3] {
        &self.values
    }
    pub fn at(&self, z: [i32; 3]) -> Option<&Mat3> {
        self.ball.index_of(z).map(|i| &self.values[i])
    }
    /// Largest `|H[𝒢_k](ℓ) - e_k δ₀|` over the window interior.
    pub fn identity_residual(&self) -> f64 {
        self.residual
    }
    pub fn cg_iterations(&self) -> usize {
        self.iterations
    }
}

/// Cyclic axis permutation `x → y → z → x` as a matrix.
fn cyclic() -> Mat3 {
    Mat3::new(0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0)
}

fn invariant_under_cycle(spec: &LatticeSpec, op: &LinearOperator) -> bool {
    let p = cyclic();
    let terms: Vec<_> = op.terms().map(|(z, k)| (*z, *k)).collect();
    terms.iter().all(|(z, k)| {
        let x = p * spec.position(*z);
        let Some(w) = spec.coords_of(&x) else { return false };
        let want = p * k * p.transpose();
        terms.iter().any(|(z2, k2)| *z2 == w && (k2 - want).norm() <= 1e-12 * (1.0 + k.norm()))
    })
}

/// Solve `H[𝒢_k] = e_k δ₀` on `B_Rg` with `G0 + G1` prescribed outside, and
/// return `𝒢` on the window `B_W`.
pub fn lattice_green_numeric(
    data: &SymbolData,
    spec: &LatticeSpec,
    op: &LinearOperator,
    window: f64,
    solve_radius: f64,
    quad: QuadratureSpec,
) -> Result<LatticeGreen> {
    if solve_radius < 3.0 * window * (1.0 - 1e-12) {
        return Err(Error::Config(format!(
            "solve radius {solve_radius} must be at least three times the window {window}"
        )));
    }
    let ball = generate_ball(spec, solve_radius + op.reach())?;
    let sparse = op.assemble(&ball, solve_radius)?;
    let n = ball.len();
    let mut interior = vec![false; n];
    for &r in sparse.rows() {
        interior[r as usize] = true;
    }
    let origin = ball.index_of([0, 0, 0]).expect("origin in ball");
    // far-field values on the collar, all three columns at once
    let mut cache = KernelCache::new(data, quad);
    cache.prepare((0..n).filter(|&i| !interior[i]).map(|i| &ball.positions()[i]))?;
    let mut collar = vec![Mat3::zeros(); n];
    for i in 0..n {
        if !interior[i] {
            collar[i] = cache.g0_plus_g1(&ball.positions()[i])?;
        }
    }
    let symmetric = invariant_under_cycle(spec, op);
    let columns: Vec<usize> = if symmetric { vec![0] } else { vec![0, 1, 2] };
    let diag_inv = op.diagonal().try_inverse().ok_or_else(|| Error::Instability("singular diagonal block".into()))?;

    let mut solved: Vec<Vec<Vec3>> = Vec::new();
    let mut iterations = 0;
    for &k in &columns {
        let mut x: Vec<Vec3> = (0..n)
            .map(|i| if interior[i] { Vec3::zeros() } else { collar[i].column(k).into_owned() })
            .collect();
        let mut rhs = vec![Vec3::zeros(); n];
        rhs[origin][k] = 1.0;
        let it = solve_dirichlet(&sparse, &interior, &diag_inv, &rhs, &mut x, 1e-13, 20 * n.max(100))?;
        iterations += it;
        solved.push(x);
    }

    let win = generate_ball(spec, window)?;
    let p = cyclic();
    let mut values = vec![Mat3::zeros(); win.len()];
    for (w, z) in win.coords().iter().enumerate() {
        for k in 0..3 {
            let col = if symmetric {
                // 𝒢_{·k}(ℓ) = P^k 𝒢_{·0}(P^{-k} ℓ)
                let pk = (0..k).fold(Mat3::identity(), |m, _| m * p);
                let src = spec.coords_of(&(pk.transpose() * spec.position(*z))).expect("lattice symmetry");
                pk * solved[0][ball.index_of(src).expect("inside ball")]
            } else {
                solved[k][ball.index_of(*z).expect("inside ball")]
            };
            values[w].set_column(k, &col);
        }
    }

    // identity residual on the window interior
    let mut residual: f64 = 0.0;
    let inner = window - op.reach();
    for (w, z) in win.coords().iter().enumerate() {
        if win.positions()[w].norm() > inner {
            continue;
        }
        for k in 0..3 {
            let h = op.apply_at(*z, |y| {
                win.index_of(y).map(|j| values[j].column(k).into_owned()).expect("collar inside window")
            });
            let mut target = Vec3::zeros();
            if *z == [0, 0, 0] {
                target[k] = 1.0;
            }
            residual = residual.max((h - target).amax());
        }
    }
    Ok(LatticeGreen { ball: win, values, residual, iterations })
}

/// Block-Jacobi preconditioned CG on the interior rows with the collar held fixed.
fn solve_dirichlet(
    op: &crate::model::SparseStencil,
    interior: &[bool],
    diag_inv: &Mat3,
    rhs: &[Vec3],
    x: &mut [Vec3],
    rtol: f64,
    max_iter: usize,
) -> Result<usize> {
    let n = x.len();
    let dot = |a: &[Vec3], b: &[Vec3]| -> f64 { a.iter().zip(b).map(|(u, v)| u.dot(v)).sum() };
    let mut hx = vec![Vec3::zeros(); n];
    op.apply(x, &mut hx);
    let mut r: Vec<Vec3> = (0..n).map(|i| if interior[i] { rhs[i] - hx[i] } else { Vec3::zeros() }).collect();
    let bnorm = dot(rhs, rhs).sqrt().max(1e-300);
    let mut z: Vec<Vec3> = r.iter().map(|v| diag_inv * v).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![Vec3::zeros(); n];
    for it in 0..max_iter {
        let rn = dot(&r, &r).sqrt();
        if rn <= rtol * bnorm {
            return Ok(it);
        }
        op.apply(&p, &mut ap);
        for i in 0..n {
            if !interior[i] {
                ap[i] = Vec3::zeros();
            }
        }
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::LinearSolve { iterations: it, residual: rn / bnorm });
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += p[i] * alpha;
            r[i] -= ap[i] * alpha;
        }
        for i in 0..n {
            z[i] = diag_inv * r[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + p[i] * beta;
        }
    }
    let rn = dot(&r, &r).sqrt();
    Err(Error::LinearSolve { iterations: max_iter, residual: rn / bnorm })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::stencil;
    use crate::potential::{calibrate_equilibrium, force_constants, ToyEam};

    fn toy(kappa: f64) -> (SymbolData, LatticeSpec, ForceConstants) {
        let (params, bracket) = crate::potential::test_params(kappa);
        let a0 = calibrate_equilibrium(&params, Structure::Bcc, bracket).unwrap();
        let spec = LatticeSpec::new(Structure::Bcc, a0).unwrap();
        let st = stencil(&spec, params.cutoff).unwrap();
        let fc = force_constants(&ToyEam::new(params, a0).unwrap(), &st).unwrap();
        (SymbolData::new(&fc, spec.cell_volume()).unwrap(), spec, fc)
    }

    fn rel(a: &Mat3, b: &Mat3) -> f64 {
        (a - b).norm() / b.norm().max(1e-300)
    }

    #[test]
    fn laplacian_taylor_terms() {
        let d = SymbolData::scalar_laplacian();
        let k = Vec3::new(0.3, -1.2, 0.7);
        let k2 = k.norm_squared();
        let k4 = -(k.x.powi(4) + k.y.powi(4) + k.z.powi(4)) / 12.0;
        assert!(rel(&d.quadratic(&k), &(Mat3::identity() * k2)) < 1e-14);
        assert!(rel(&d.quartic(&k), &(Mat3::identity() * k4)) < 1e-14);
        let a0 = d.a0_matrix(&Vec3::x());
        assert!((a0 - Mat3::identity() / 12.0).norm() < 1e-15);
        let h = symbol(&d, &k);
        let want: f64 = (0..3).map(|j| 2.0 * (1.0 - k[j].cos())).sum();
        assert!((h[0][0].re - want).abs() < 1e-14 && h[0][0].im.abs() < 1e-14 && h[0][1].norm() < 1e-14);
    }

    #[test]
    fn symbol_basics() {
        let (d, _, _) = toy(1.0);
        let z = symbol(&d, &Vec3::zeros());
        assert!(z.iter().flatten().all(|c| c.norm() < 1e-14));
        let k = Vec3::new(0.4, 1.1, -0.6);
        let (p, m) = (symbol(&d, &k), symbol(&d, &-k));
        for a in 0..3 {
            for b in 0..3 {
                assert!((p[a][b] - m[a][b].conj()).norm() < 1e-12);
                assert!((p[a][b] - p[b][a].conj()).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn taylor_terms_match_scaling_fit() {
        for kappa in [0.0, 1.0] {
            let (d, _, _) = toy(kappa);
            let k = Vec3::new(0.6, -0.3, 0.74);
            // Ĥ(εk) = ε²Ĥ₂ + ε⁴Ĥ₄ + ε⁶Ĥ₆ + …: Richardson-eliminate the tail
            let re = |e: f64| Mat3::from_fn(|a, b| symbol(&d, &(k * e))[a][b].re);
            let eps = [0.1, 0.05, 0.025];
            let h: Vec<Mat3> = eps.iter().map(|&e| re(e)).collect();
            // solve for c2, c4, c6 exactly from the three samples
            let m = nalgebra::Matrix3::from_fn(|i, j| eps[i].powi(2 * j as i32 + 2));
            let minv = m.try_inverse().unwrap();
            let mut c2 = Mat3::zeros();
            let mut c4 = Mat3::zeros();
            for i in 0..3 {
                c2 += h[i] * minv[(0, i)];
                c4 += h[i] * minv[(1, i)];
            }
            assert!(rel(&c2, &d.quadratic(&k)) < 1e-8, "{}", rel(&c2, &d.quadratic(&k)));
            assert!(rel(&c4, &d.quartic(&k)) < 1e-6, "{}", rel(&c4, &d.quartic(&k)));
            // imaginary (odd) part vanishes
            let s = symbol(&d, &(k * 0.1));
            assert!(s.iter().flatten().all(|c| c.im.abs() < 1e-14));
        }
    }

    #[test]
    fn laplacian_kernel_is_coulomb() {
        let d = SymbolData::scalar_laplacian();
        for t in [1.0, 2.0, 5.0] {
            let g = g0(&d, &Vec3::new(t, 0.0, 0.0), QuadratureSpec::default()).unwrap();
            assert!((g[(0, 0)] - 1.0 / (4.0 * PI * t)).abs() < 1e-10);
            assert!(g[(0, 1)].abs() < 1e-15);
        }
    }

    #[test]
    fn g0_symmetries_and_quadrature() {
        let (d, _, _) = toy(1.0);
        let q = QuadratureSpec::default();
        let x = Vec3::new(1.3, -0.4, 2.2);
        let a = g0(&d, &x, q).unwrap();
        assert!(rel(&g0(&d, &(x * 2.0), q).unwrap(), &(a / 2.0)) < 1e-14);
        assert!(rel(&g0(&d, &-x, q).unwrap(), &a) < 1e-14);
        assert!((a - a.transpose()).norm() < 1e-15);
        let fine = g0(&d, &x, QuadratureSpec::new(128).unwrap()).unwrap();
        assert!(rel(&fine, &a) < 1e-10);
        let g1a = g1(&d, &x, q).unwrap();
        let g1f = g1(&d, &x, QuadratureSpec::new(128).unwrap()).unwrap();
        assert!(rel(&g1f, &g1a) < 1e-10);
        assert!(rel(&g1(&d, &-x, q).unwrap(), &g1a) < 1e-12);
        assert!(g0(&d, &Vec3::zeros(), q).is_err());
    }

    #[test]
    fn g0_derivatives_match_finite_differences() {
        let (d, _, _) = toy(0.0);
        let q = QuadratureSpec::default();
        let x = Vec3::new(1.1, 0.35, -2.0);
        let der = g0_derivatives(&d, &x, q).unwrap();
        let h = 1e-4 * x.norm();
        let scale1: f64 = der.first.iter().flatten().flatten().map(|v| v.abs()).fold(0.0, f64::max);
        for j in 0..3 {
            let mut dx = Vec3::zeros();
            dx[j] = h;
            let fd = (g0(&d, &(x + dx), q).unwrap() - g0(&d, &(x - dx), q).unwrap()) / (2.0 * h);
            let dp = g0_derivatives(&d, &(x + dx), q).unwrap();
            let dm = g0_derivatives(&d, &(x - dx), q).unwrap();
            for i in 0..3 {
                for k in 0..3 {
                    assert!((fd[(i, k)] - der.first[i][k][j]).abs() < 1e-6 * scale1);
                    for m in 0..3 {
                        let fd2 = (dp.first[i][k][m] - dm.first[i][k][m]) / (2.0 * h);
                        assert!((fd2 - der.second[i][k][j][m]).abs() < 1e-6 * scale1 / x.norm());
                    }
                }
            }
        }
        let d2 = g0_derivatives(&d, &(x * 2.0), q).unwrap();
        for i in 0..3 {
            for k in 0..3 {
                for j in 0..3 {
                    for m in 0..3 {
                        assert!((d2.second[i][k][j][m] - der.second[i][k][j][m] / 8.0).abs() < 1e-13);
                        for n in 0..3 {
                            let t = der.third[i][k];
                            assert!((t[j][m][n] - t[m][j][n]).abs() < 1e-10);
                            assert!((t[j][m][n] - t[n][m][j]).abs() < 1e-10);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn g1_gradient_matches_finite_differences() {
        let (d, _, _) = toy(1.0);
        let q = QuadratureSpec::default();
        let x = Vec3::new(-0.8, 1.9, 0.6);
        let grad = g1_gradient(&d, &x, q).unwrap();
        let h = 1e-4 * x.norm();
        let scale: f64 = grad.iter().flatten().flatten().map(|v| v.abs()).fold(0.0, f64::max);
        for j in 0..3 {
            let mut dx = Vec3::zeros();
            dx[j] = h;
            let fd = (g1(&d, &(x + dx), q).unwrap() - g1(&d, &(x - dx), q).unwrap()) / (2.0 * h);
            for i in 0..3 {
                for k in 0..3 {
                    assert!((fd[(i, k)] - grad[i][k][j]).abs() < 1e-6 * scale);
                }
            }
        }
        let neg = g1_gradient(&d, &-x, q).unwrap();
        let twice = g1_gradient(&d, &(x * 2.0), q).unwrap();
        for i in 0..3 {
            for k in 0..3 {
                for j in 0..3 {
                    assert!((neg[i][k][j] + grad[i][k][j]).abs() < 1e-12 * scale);
                    assert!((twice[i][k][j] - grad[i][k][j] / 16.0).abs() < 1e-12 * scale);
                }
            }
        }
    }

    #[test]
    fn unstable_constants_are_rejected() {
        let (fc, _) = scalar_laplacian_constants();
        let n = fc.stencil().len();
        let blocks: Vec<Mat3> = fc.blocks().iter().map(|b| b * -1.0).collect();
        let bad = ForceConstants::from_blocks(fc.stencil().clone(), blocks);
        assert!(matches!(SymbolData::new(&bad, 1.0), Err(Error::Instability(_))));
        let _ = n;
    }

    #[test]
    fn laplacian_lattice_green_function() {
        let (fc, spec) = scalar_laplacian_constants();
        let d = SymbolData::new(&fc, 1.0).unwrap();
        let op = LinearOperator::new(&spec, &fc);
        let lg = lattice_green_numeric(&d, &spec, &op, 11.0, 33.0, QuadratureSpec::default()).unwrap();
        assert!(lg.identity_residual() < 1e-8, "{}", lg.identity_residual());
        let g = lg.at([10, 0, 0]).unwrap();
        let ratio = g[(0, 0)] * 4.0 * PI * 10.0;
        assert!((ratio - 1.0).abs() < 0.05, "{ratio}");
        // classical value of the cubic lattice Green's function at the origin
        assert!((lg.at([0, 0, 0]).unwrap()[(0, 0)] - 0.252731).abs() < 1e-4);
        for (z, v) in lg.window().coords().iter().zip(lg.values()) {
            let m = lg.at([-z[0], -z[1], -z[2]]).unwrap();
            assert!((v - m.transpose()).norm() < 1e-8);
        }
    }
}
