//! Truncated force moments and the linear maps between moments, discrete
//! multipole coefficients `b` and continuous coefficients `a`.
//!
//! Index convention throughout: the first index of every tensor is the source
//! component `k`; the remaining indices are spatial and fully symmetric.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{LatticeBall, Mat3, Vec3};
use crate::model::LinearOperator;

pub type T2 = [[f64; 3]; 3];
pub type T3 = [[[f64; 3]; 3]; 3];
pub type T4 = [[[[f64; 3]; 3]; 3]; 3];

const PERMS3: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

/// Smooth cutoff: 1 on `|ℓ| <= R/3`, 0 beyond `2R/3`, quintic smoothstep between.
pub fn eta(r: f64, radius: f64) -> f64 {
    let third = radius / 3.0;
    if r <= third {
        return 1.0;
    }
    if r >= 2.0 * third {
        return 0.0;
    }
    let t = (r - third) / third;
    1.0 - t * t * t * (10.0 - 15.0 * t + 6.0 * t * t)
}

fn flat2(t: &T2) -> &[f64] {
    t.as_flattened()
}
fn flat3(t: &T3) -> &[f64] {
    t.as_flattened().as_flattened()
}
fn flat4(t: &T4) -> &[f64] {
    t.as_flattened().as_flattened().as_flattened()
}
fn flat2_mut(t: &mut T2) -> &mut [f64] {
    t.as_flattened_mut()
}
fn flat3_mut(t: &mut T3) -> &mut [f64] {
    t.as_flattened_mut().as_flattened_mut()
}
fn flat4_mut(t: &mut T4) -> &mut [f64] {
    t.as_flattened_mut().as_flattened_mut().as_flattened_mut()
}

fn frob(parts: &[&[f64]]) -> f64 {
    parts.iter().flat_map(|p| p.iter()).map(|v| v * v).sum::<f64>().sqrt()
}

/// Symmetrise the two spatial indices of each `k` slice.
fn sym3(t: &T3) -> T3 {
    let mut out = [[[0.0; 3]; 3]; 3];
    for k in 0..3 {
        for j in 0..3 {
            for m in 0..3 {
                out[k][j][m] = 0.5 * (t[k][j][m] + t[k][m][j]);
            }
        }
    }
    out
}

/// Symmetrise the three spatial indices of each `k` slice.
fn sym4(t: &T4) -> T4 {
    let mut out = [[[[0.0; 3]; 3]; 3]; 3];
    for k in 0..3 {
        for a in 0..3 {
            for b in 0..3 {
                for c in 0..3 {
                    let idx = [a, b, c];
                    out[k][a][b][c] =
                        PERMS3.iter().map(|p| t[k][idx[p[0]]][idx[p[1]]][idx[p[2]]]).sum::<f64>() / 6.0;
                }
            }
        }
    }
    out
}

/// Force moments `I₁, I₂, I₃`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MomentSet {
    pub i1: T2,
    pub i2: T3,
    pub i3: T4,
}

impl MomentSet {
    /// Frobenius norm of `I_order`, `order ∈ 1..=3`.
    pub fn norm(&self, order: usize) -> f64 {
        match order {
            1 => frob(&[flat2(&self.i1)]),
            2 => frob(&[flat3(&self.i2)]),
            3 => frob(&[flat4(&self.i3)]),
            _ => panic!("moment order {order} out of range"),
        }
    }

    pub fn scaled_sum(&self, alpha: f64, other: &MomentSet, beta: f64) -> MomentSet {
        let mut out = *self;
        combine(flat2_mut(&mut out.i1), flat2(&other.i1), alpha, beta);
        combine(flat3_mut(&mut out.i2), flat3(&other.i2), alpha, beta);
        combine(flat4_mut(&mut out.i3), flat4(&other.i3), alpha, beta);
        out
    }

    /// Symmetrise the spatial indices of `I₂` and `I₃`.
    pub fn symmetrized(&self) -> MomentSet {
        MomentSet { i1: self.i1, i2: sym3(&self.i2), i3: sym4(&self.i3) }
    }
}

fn combine(a: &mut [f64], b: &[f64], alpha: f64, beta: f64) {
    for (x, y) in a.iter_mut().zip(b) {
        *x = alpha * *x + beta * y;
    }
}

/// `I_{i,R}[u] = Σ_ℓ η_R(ℓ) H[u](ℓ) ⊗ ℓ^{⊗i}` on a homogeneous ball.
///
/// The ball must reach `2R/3` plus the operator's reach.
pub fn truncated_moments(op: &LinearOperator, ball: &LatticeBall, u: &[Vec3], radius: f64) -> Result<MomentSet> {
    if radius <= 0.0 {
        return Err(Error::Domain(format!("moment radius must be positive, got {radius}")));
    }
    let support = 2.0 * radius / 3.0;
    let h = op.apply(ball, u, support)?;
    Ok(weighted_moments(ball.positions().iter().zip(&h).map(|(x, f)| (*x, *f * eta(x.norm(), radius)))))
}

/// `Σ f ⊗ x^{⊗i}` over (position, force) pairs.
pub fn weighted_moments(pairs: impl IntoIterator<Item = (Vec3, Vec3)>) -> MomentSet {
    let mut m = MomentSet::default();
    for (x, f) in pairs {
        if f == Vec3::zeros() {
            continue;
        }
        for k in 0..3 {
            let fk = f[k];
            for j in 0..3 {
                let a = fk * x[j];
                m.i1[k][j] += a;
                for p in 0..3 {
                    let b = a * x[p];
                    m.i2[k][j][p] += b;
                    for q in 0..3 {
                        m.i3[k][j][p][q] += b * x[q];
                    }
                }
            }
        }
    }
    m
}

/// Continuous coefficients: `a10 : ∇G0 + a11 : ∇G1 + a20 : ∇²G0 + a30 : ∇³G0`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CoeffsA {
    pub a10: T2,
    pub a11: T2,
    pub a20: T3,
    pub a30: T4,
}

impl CoeffsA {
    pub fn is_zero(&self) -> bool {
        self.norm() == 0.0
    }

    pub fn norm(&self) -> f64 {
        frob(&[flat2(&self.a10), flat2(&self.a11), flat3(&self.a20), flat4(&self.a30)])
    }

    pub fn scaled_sum(&self, alpha: f64, other: &CoeffsA, beta: f64) -> CoeffsA {
        let mut out = *self;
        combine(flat2_mut(&mut out.a10), flat2(&other.a10), alpha, beta);
        combine(flat2_mut(&mut out.a11), flat2(&other.a11), alpha, beta);
        combine(flat3_mut(&mut out.a20), flat3(&other.a20), alpha, beta);
        combine(flat4_mut(&mut out.a30), flat4(&other.a30), alpha, beta);
        out
    }

    /// Apply an orthogonal map to every index.
    pub fn rotated(&self, q: &Mat3) -> CoeffsA {
        let mut out = *self;
        crate::greens::rotate_flat(q, flat2_mut(&mut out.a10));
        crate::greens::rotate_flat(q, flat2_mut(&mut out.a11));
        crate::greens::rotate_flat(q, flat3_mut(&mut out.a20));
        crate::greens::rotate_flat(q, flat4_mut(&mut out.a30));
        out
    }
}

/// `a10 = a11 = -I₁`, `a20 = I₂/2`, `a30 = -I₃/6`.
pub fn coeffs_a(m: &MomentSet) -> CoeffsA {
    let mut a = CoeffsA { a10: m.i1, a11: m.i1, a20: m.i2, a30: m.i3 };
    flat2_mut(&mut a.a10).iter_mut().for_each(|v| *v = -*v);
    flat2_mut(&mut a.a11).iter_mut().for_each(|v| *v = -*v);
    flat3_mut(&mut a.a20).iter_mut().for_each(|v| *v *= 0.5);
    flat4_mut(&mut a.a30).iter_mut().for_each(|v| *v *= -1.0 / 6.0);
    a
}

/// Discrete coefficients over a basis `𝒮 = {s_1, s_2, s_3}` (columns of `basis`).
///
/// `b1[k][a]`, `b2[k][a][b]`, `b3[k][a][b][c]`, symmetric in the basis indices.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoeffsB {
    pub basis: Mat3,
    pub b1: T2,
    pub b2: T3,
    pub b3: T4,
}

impl CoeffsB {
    pub fn zero(basis: Mat3) -> Self {
        CoeffsB { basis, b1: [[0.0; 3]; 3], b2: [[[0.0; 3]; 3]; 3], b3: [[[[0.0; 3]; 3]; 3]; 3] }
    }

    pub fn norm(&self) -> f64 {
        frob(&[flat2(&self.b1), flat3(&self.b2), flat4(&self.b3)])
    }

    pub fn distance(&self, other: &CoeffsB) -> f64 {
        let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        (d(flat2(&self.b1), flat2(&other.b1)) + d(flat3(&self.b2), flat3(&other.b2)) + d(flat4(&self.b3), flat4(&other.b3)))
            .sqrt()
    }

    fn s(&self, a: usize) -> Vec3 {
        self.basis.column(a).into_owned()
    }
}

/// Spatial sums of the lower-order coefficients that feed the higher moments:
/// `Σ b¹ s`, `Σ b¹ s s`, `Σ b¹ s s s`, `Σ b² s ⊗ s'`, `sym Σ b² s s' s'`, `sym Σ b³ s s' s''`.
struct Sums {
    b1_s: T2,
    b1_ss: T3,
    b1_sss: T4,
    b2_st: T3,
    b2_stt: T4,
    b3_stu: T4,
}

fn sums(b: &CoeffsB) -> Sums {
    let mut out = Sums {
        b1_s: [[0.0; 3]; 3],
        b1_ss: [[[0.0; 3]; 3]; 3],
        b1_sss: [[[[0.0; 3]; 3]; 3]; 3],
        b2_st: [[[0.0; 3]; 3]; 3],
        b2_stt: [[[[0.0; 3]; 3]; 3]; 3],
        b3_stu: [[[[0.0; 3]; 3]; 3]; 3],
    };
    let s: Vec<Vec3> = (0..3).map(|a| b.s(a)).collect();
    for k in 0..3 {
        for (a, sa) in s.iter().enumerate() {
            let c1 = b.b1[k][a];
            for j in 0..3 {
                out.b1_s[k][j] += c1 * sa[j];
                for m in 0..3 {
                    out.b1_ss[k][j][m] += c1 * sa[j] * sa[m];
                    for n in 0..3 {
                        out.b1_sss[k][j][m][n] += c1 * sa[j] * sa[m] * sa[n];
                    }
                }
            }
            for (bb, sb) in s.iter().enumerate() {
                let c2 = b.b2[k][a][bb];
                for j in 0..3 {
                    for m in 0..3 {
                        out.b2_st[k][j][m] += c2 * sa[j] * sb[m];
                        for n in 0..3 {
                            out.b2_stt[k][j][m][n] += c2 * sa[j] * sb[m] * sb[n];
                        }
                    }
                }
                for (c, sc) in s.iter().enumerate() {
                    let c3 = b.b3[k][a][bb][c];
                    for j in 0..3 {
                        for m in 0..3 {
                            for n in 0..3 {
                                out.b3_stu[k][j][m][n] += c3 * sa[j] * sb[m] * sc[n];
                            }
                        }
                    }
                }
            }
        }
    }
    out.b2_stt = sym4(&out.b2_stt);
    out.b3_stu = sym4(&out.b3_stu);
    out
}

/// Moments of `u = Σ_k Σ_i b^{(i,k)} : D^i_𝒮 𝒢_{·k}`, from `H[u] = Σ b : D^i δ₀ e_k`:
///
/// `I₁ = -Σ b¹ s`,
/// `I₂ = Σ b¹ s s + 2 Σ b² s s'`,
/// `I₃ = -Σ b¹ s s s - 6 sym Σ b² s s' s' - 6 sym Σ b³ s s' s''`.
pub fn moments_from_b(b: &CoeffsB) -> MomentSet {
    let t = sums(b);
    let mut m = MomentSet::default();
    for k in 0..3 {
        for j in 0..3 {
            m.i1[k][j] = -t.b1_s[k][j];
            for p in 0..3 {
                m.i2[k][j][p] = t.b1_ss[k][j][p] + 2.0 * t.b2_st[k][j][p];
                for q in 0..3 {
                    m.i3[k][j][p][q] = -t.b1_sss[k][j][p][q] - 6.0 * t.b2_stt[k][j][p][q] - 6.0 * t.b3_stu[k][j][p][q];
                }
            }
        }
    }
    m.symmetrized()
}

/// Invert [`moments_from_b`] order by order. The moments are first projected
/// onto spatially symmetric tensors, where the map is one-to-one.
pub fn coeffs_b(m: &MomentSet, basis: &Mat3) -> Result<CoeffsB> {
    let scale = basis.norm();
    let inv = basis
        .try_inverse()
        .filter(|_| basis.determinant().abs() > 1e-12 * scale.powi(3))
        .ok_or_else(|| Error::Basis("coefficient basis is rank deficient".into()))?;
    let m = m.symmetrized();
    let mut b = CoeffsB::zero(*basis);
    // b¹: -Σ_a b¹_a s_a = I₁
    for k in 0..3 {
        for a in 0..3 {
            b.b1[k][a] = -(0..3).map(|j| inv[(a, j)] * m.i1[k][j]).sum::<f64>();
        }
    }
    // b²: 2 Σ b²_ab s_a ⊗ s_b = I₂ - Σ b¹ s s
    let t = sums(&b);
    for k in 0..3 {
        let mut rhs = Mat3::zeros();
        for j in 0..3 {
            for p in 0..3 {
                rhs[(j, p)] = 0.5 * (m.i2[k][j][p] - t.b1_ss[k][j][p]);
            }
        }
        let c = inv * rhs * inv.transpose();
        for a in 0..3 {
            for bb in 0..3 {
                b.b2[k][a][bb] = 0.5 * (c[(a, bb)] + c[(bb, a)]);
            }
        }
    }
    // b³: -6 sym Σ b³ s s' s'' = I₃ + Σ b¹ s s s + 6 sym Σ b² s s' s'
    let t = sums(&b);
    for k in 0..3 {
        let mut rhs = [0.0; 27];
        for j in 0..3 {
            for p in 0..3 {
                for q in 0..3 {
                    rhs[9 * j + 3 * p + q] =
                        -(m.i3[k][j][p][q] + t.b1_sss[k][j][p][q] + 6.0 * t.b2_stt[k][j][p][q]) / 6.0;
                }
            }
        }
        crate::greens::rotate_flat(&inv, &mut rhs);
        for a in 0..3 {
            for bb in 0..3 {
                for c in 0..3 {
                    b.b3[k][a][bb][c] = rhs[9 * a + 3 * bb + c];
                }
            }
        }
    }
    Ok(b)
}

/// Continuous coefficients of the discrete expansion, from the Taylor series
/// of the difference stencils:
///
/// `a10 = a11 = Σ b¹ s`,
/// `a20 = Σ b² s ⊗ s' + ½ Σ b¹ s s`,
/// `a30 = sym Σ b³ s s' s'' + ½ sym Σ b² (s s' s' + s s s') + ⅙ Σ b¹ s s s`.
pub fn a_from_b(b: &CoeffsB) -> CoeffsA {
    let t = sums(b);
    let mut a = CoeffsA { a10: t.b1_s, a11: t.b1_s, ..Default::default() };
    for k in 0..3 {
        for j in 0..3 {
            for p in 0..3 {
                a.a20[k][j][p] = t.b2_st[k][j][p] + 0.5 * t.b1_ss[k][j][p];
                for q in 0..3 {
                    // with b² symmetric, sym(s s s') and sym(s s' s') sum to the same value
                    a.a30[k][j][p][q] = t.b3_stu[k][j][p][q] + t.b2_stt[k][j][p][q] + t.b1_sss[k][j][p][q] / 6.0;
                }
            }
        }
    }
    a.a20 = sym3(&a.a20);
    a
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::lattice::{generate_ball, stencil, LatticeSpec, Structure};
    use crate::potential::{calibrate_equilibrium, force_constants, test_params, ToyEam};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_moments(rng: &mut impl Rng) -> MomentSet {
        let mut m = MomentSet::default();
        flat2_mut(&mut m.i1).iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        flat3_mut(&mut m.i2).iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        flat4_mut(&mut m.i3).iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        m.symmetrized()
    }

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn eta_values_and_smoothness() {
        assert_eq!(eta(0.0, 9.0), 1.0);
        assert_eq!(eta(3.0, 9.0), 1.0);
        assert_eq!(eta(7.0, 9.0), 0.0);
        assert_eq!(eta(6.0, 9.0), 0.0);
        for r in [3.0, 7.5, 12.0] {
            assert!((eta(r / 2.0, r) - 0.5).abs() < 1e-15);
        }
        // C² junctions: one-sided first and second differences vanish
        let h = 1e-4;
        for r0 in [3.0, 6.0] {
            let d1 = (eta(r0 + h, 9.0) - eta(r0 - h, 9.0)) / (2.0 * h);
            let d2 = (eta(r0 + h, 9.0) - 2.0 * eta(r0, 9.0) + eta(r0 - h, 9.0)) / (h * h);
            assert!(d1.abs() < 1e-7, "{d1}");
            assert!(d2.abs() < 1e-3, "{d2}");
        }
    }

    #[test]
    fn coefficient_triangle_closes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let spec = LatticeSpec::new(Structure::Bcc, 0.97).unwrap();
        for _ in 0..100 {
            let m = random_moments(&mut rng);
            let b = coeffs_b(&m, spec.basis()).unwrap();
            let back = moments_from_b(&b);
            assert!(max_diff(flat4(&back.i3), flat4(&m.i3)) < 1e-12);
            let a1 = a_from_b(&b);
            let a2 = coeffs_a(&m);
            assert!(max_diff(flat2(&a1.a10), flat2(&a2.a10)) < 1e-10);
            assert!(max_diff(flat2(&a1.a11), flat2(&a2.a11)) < 1e-10);
            assert!(max_diff(flat3(&a1.a20), flat3(&a2.a20)) < 1e-10);
            assert!(max_diff(flat4(&a1.a30), flat4(&a2.a30)) < 1e-10);
        }
    }

    #[test]
    fn first_order_basis_inversion() {
        let spec = LatticeSpec::new(Structure::Fcc, 1.3).unwrap();
        let mut b = CoeffsB::zero(*spec.basis());
        b.b1[1] = [0.5, -1.0, 2.0];
        let m = moments_from_b(&b);
        let want = -(spec.basis() * Vec3::new(0.5, -1.0, 2.0));
        for j in 0..3 {
            assert!((m.i1[1][j] - want[j]).abs() < 1e-14);
        }
        let a = a_from_b(&b);
        // a20 picks up ½ Σ b¹ s s
        let mut half = Mat3::zeros();
        for (c, w) in [0.5, -1.0, 2.0].iter().enumerate() {
            let s = spec.basis().column(c);
            half += s * s.transpose() * (0.5 * w);
        }
        for j in 0..3 {
            for p in 0..3 {
                assert!((a.a20[1][j][p] - half[(j, p)]).abs() < 1e-14);
            }
        }
        assert_eq!(coeffs_b(&m, spec.basis()).unwrap().b1, b.b1);
        assert!(coeffs_b(&m, &Mat3::zeros()).is_err());
    }

    #[test]
    fn zero_maps_to_zero() {
        let m = MomentSet::default();
        assert!(coeffs_a(&m).is_zero());
        let b = coeffs_b(&m, &Mat3::identity()).unwrap();
        assert_eq!(b.norm(), 0.0);
        assert!(a_from_b(&b).is_zero());
    }

    #[test]
    fn compact_forces_match_brute_force_sum() {
        let (params, bracket) = test_params(0.0);
        let a0 = calibrate_equilibrium(&params, Structure::Bcc, bracket).unwrap();
        let spec = LatticeSpec::new(Structure::Bcc, a0).unwrap();
        let fc = force_constants(&ToyEam::new(params.clone(), a0).unwrap(), &stencil(&spec, params.cutoff).unwrap()).unwrap();
        let op = LinearOperator::new(&spec, &fc);
        let radius = 9.0 * a0;
        let ball = generate_ball(&spec, 2.0 * radius / 3.0 + op.reach()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // u supported near the origin: H[u] lives inside |ℓ| <= 1 + reach < R/3
        let u: Vec<Vec3> = ball
            .positions()
            .iter()
            .map(|x| if x.norm() <= a0 { Vec3::new(rng.gen(), rng.gen(), rng.gen()) } else { Vec3::zeros() })
            .collect();
        assert!(a0 + op.reach() < radius / 3.0);
        let m = truncated_moments(&op, &ball, &u, radius).unwrap();
        let h = op.apply(&ball, &u, 2.0 * radius / 3.0).unwrap();
        let mut i2 = [[[0.0; 3]; 3]; 3];
        for (x, f) in ball.positions().iter().zip(&h) {
            for k in 0..3 {
                for j in 0..3 {
                    for p in 0..3 {
                        i2[k][j][p] += f[k] * x[j] * x[p];
                    }
                }
            }
        }
        assert!(max_diff(flat3(&m.i2), flat3(&i2)) < 1e-12 * (1.0 + m.norm(2)));
        let zero = truncated_moments(&op, &ball, &vec![Vec3::zeros(); ball.len()], radius).unwrap();
        assert_eq!(zero, MomentSet::default());
    }
}
