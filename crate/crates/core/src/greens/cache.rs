//! Kernel derivatives tabulated once per symmetry orbit.
//!
//! Every kernel built from the symbol satisfies `G(Qx) = Q G(x) Qᵀ` for each
//! orthogonal `Q` that leaves `Ĥ₂` and `Ĥ₄` invariant. On cubic lattices this
//! cuts the number of circle integrals by up to 48.

use std::collections::HashMap;

use rayon::prelude::*;

use super::{KernelJets, QuadratureSpec, SymbolData};
use crate::error::Result;
use crate::lattice::{Mat3, Vec3};

/// Signed permutation matrices under which the symbol's Taylor terms are invariant.
#[derive(Clone, Debug)]
pub struct PointGroup {
    ops: Vec<Mat3>,
}

fn signed_permutations() -> Vec<Mat3> {
    const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let mut out = Vec::with_capacity(48);
    for p in PERMS {
        for signs in 0..8 {
            let mut q = Mat3::zeros();
            for (row, &col) in p.iter().enumerate() {
                q[(row, col)] = if signs >> row & 1 == 1 { -1.0 } else { 1.0 };
            }
            out.push(q);
        }
    }
    out
}

impl PointGroup {
    /// Only the identity.
    pub fn trivial() -> Self {
        PointGroup { ops: vec![Mat3::identity()] }
    }

    /// All signed permutations `Q` with `Ĥ₂(Qk) = Q Ĥ₂(k) Qᵀ` and likewise for `Ĥ₄`.
    ///
    /// Both sides are polynomials of degree at most four, so agreement on a
    /// few dozen generic directions is agreement everywhere.
    pub fn of_symbol(data: &SymbolData) -> Self {
        let probes: Vec<Vec3> = (0..40)
            .map(|i| {
                let t = i as f64;
                Vec3::new((1.3 * t + 0.2).sin(), (0.7 * t + 1.1).cos(), (2.9 * t + 0.5).sin() + 0.1)
            })
            .collect();
        let scale = probes.iter().map(|k| data.quadratic(k).norm() + data.quartic(k).norm()).fold(0.0, f64::max);
        let ops = signed_permutations()
            .into_iter()
            .filter(|q| {
                probes.iter().all(|k| {
                    let qk = q * k;
                    let d2 = data.quadratic(&qk) - q * data.quadratic(k) * q.transpose();
                    let d4 = data.quartic(&qk) - q * data.quartic(k) * q.transpose();
                    d2.norm() + d4.norm() <= 1e-12 * scale
                })
            })
            .collect();
        PointGroup { ops }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn ops(&self) -> &[Mat3] {
        &self.ops
    }

    /// The orbit representative of `x` and the index of the map taking `x` there.
    fn canonical(&self, x: &Vec3) -> ([i64; 3], usize) {
        let mut best = (key(x), usize::MAX);
        for (g, q) in self.ops.iter().enumerate() {
            let k = key(&(q * x));
            if best.1 == usize::MAX || k > best.0 {
                best = (k, g);
            }
        }
        best
    }
}

fn key(x: &Vec3) -> [i64; 3] {
    [x.x, x.y, x.z].map(|v| (v * 1e9).round() as i64)
}

/// Everything the far-field predictor and the lattice Green's collar need at one point.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelDerivatives {
    /// `G0_{ik}`, flat `[i][k]`
    pub g0: [f64; 9],
    /// `G1_{ik}`
    pub g1: [f64; 9],
    /// `∂_j G0_{ik}`, flat `[i][k][j]`
    pub d1: [f64; 27],
    /// `∂_j ∂_m G0_{ik}`, flat `[i][k][j][m]`
    pub d2: [f64; 81],
    /// `∂_j ∂_m ∂_n G0_{ik}`, flat `[i][k][j][m][n]`
    pub d3: [f64; 243],
    /// `∂_j G1_{ik}`, flat `[i][k][j]`
    pub g1_grad: [f64; 27],
}

impl KernelDerivatives {
    pub fn compute(data: &SymbolData, x: &Vec3, quad: QuadratureSpec) -> Result<Self> {
        Ok(Self::from_jets(&KernelJets::compute(data, x, quad)?))
    }

    pub fn from_jets(jets: &KernelJets) -> Self {
        let mut out = KernelDerivatives {
            g0: [0.0; 9],
            g1: [0.0; 9],
            d1: [0.0; 27],
            d2: [0.0; 81],
            d3: [0.0; 243],
            g1_grad: [0.0; 27],
        };
        let g1 = jets.g1();
        let g1_grad = jets.g1_gradient();
        for i in 0..3 {
            for k in 0..3 {
                let ik = 3 * i + k;
                let jet = &jets.g0[i][k];
                out.g0[ik] = jet.value();
                out.g1[ik] = g1[(i, k)];
                let (h, t) = (jet.hessian(), jet.third());
                for j in 0..3 {
                    out.d1[3 * ik + j] = jet.gradient()[j];
                    out.g1_grad[3 * ik + j] = g1_grad[i][k][j];
                    for m in 0..3 {
                        out.d2[9 * ik + 3 * j + m] = h[j][m];
                        for n in 0..3 {
                            out.d3[27 * ik + 9 * j + 3 * m + n] = t[j][m][n];
                        }
                    }
                }
            }
        }
        out
    }

    pub fn g0_matrix(&self) -> Mat3 {
        Mat3::from_row_slice(&self.g0)
    }

    pub fn g1_matrix(&self) -> Mat3 {
        Mat3::from_row_slice(&self.g1)
    }
}

/// Apply `q` to every index of a flat tensor of length `3^rank`, row-major.
pub fn rotate_flat(q: &Mat3, t: &mut [f64]) {
    let rank = t.len().ilog(3) as usize;
    let mut buf = vec![0.0; t.len()];
    for axis in 0..rank {
        let stride = 3usize.pow((rank - 1 - axis) as u32);
        for (idx, out) in buf.iter_mut().enumerate() {
            let digit = idx / stride % 3;
            let base = idx - digit * stride;
            *out = (0..3).map(|c| q[(digit, c)] * t[base + c * stride]).sum();
        }
        t.copy_from_slice(&buf);
    }
}

/// Kernel derivatives keyed by symmetry orbit, filled on demand.
#[derive(Clone, Debug)]
pub struct KernelCache {
    data: SymbolData,
    quad: QuadratureSpec,
    group: PointGroup,
    index: HashMap<[i64; 3], usize>,
    reps: Vec<KernelDerivatives>,
}

/// Where a point's kernels live: the representative entry and the map `Q`
/// with `x = Qᵀ x_rep`.
#[derive(Clone, Copy, Debug)]
pub struct OrbitRef {
    pub entry: usize,
    pub op: usize,
}

impl KernelCache {
    pub fn new(data: &SymbolData, quad: QuadratureSpec) -> Self {
        let group = PointGroup::of_symbol(data);
        Self::with_group(data, quad, group)
    }

    pub fn with_group(data: &SymbolData, quad: QuadratureSpec, group: PointGroup) -> Self {
        KernelCache { data: data.clone(), quad, group, index: HashMap::new(), reps: Vec::new() }
    }

    pub fn symbol(&self) -> &SymbolData {
        &self.data
    }

    pub fn quadrature(&self) -> QuadratureSpec {
        self.quad
    }

    pub fn group(&self) -> &PointGroup {
        &self.group
    }

    /// Number of distinct orbits tabulated so far.
    pub fn len(&self) -> usize {
        self.reps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reps.is_empty()
    }

    /// Tabulate every orbit touched by `points`. New orbits are computed in
    /// parallel and appended in first-seen order, so the table is reproducible.
    pub fn prepare<'a>(&mut self, points: impl IntoIterator<Item = &'a Vec3>) -> Result<()> {
        let mut fresh: Vec<([i64; 3], Vec3)> = Vec::new();
        for x in points {
            let (k, g) = self.group.canonical(x);
            if !self.index.contains_key(&k) {
                self.index.insert(k, usize::MAX);
                fresh.push((k, self.group.ops[g] * x));
            }
        }
        let computed: Vec<Result<KernelDerivatives>> =
            fresh.par_iter().map(|(_, x)| KernelDerivatives::compute(&self.data, x, self.quad)).collect();
        for ((k, _), d) in fresh.into_iter().zip(computed) {
            match d {
                Ok(d) => {
                    self.index.insert(k, self.reps.len());
                    self.reps.push(d);
                }
                Err(e) => {
                    self.index.remove(&k);
                    return Err(e);
                }
            }
        }
        Ok(())
    }

    /// Locate an already tabulated point.
    pub fn locate(&self, x: &Vec3) -> Option<OrbitRef> {
        let (k, op) = self.group.canonical(x);
        self.index.get(&k).filter(|&&e| e != usize::MAX).map(|&entry| OrbitRef { entry, op })
    }

    pub fn entry(&self, e: usize) -> &KernelDerivatives {
        &self.reps[e]
    }

    pub fn op(&self, g: usize) -> &Mat3 {
        &self.group.ops[g]
    }

    /// Full derivative set at `x`, rotated out of the table. Computes on a miss.
    pub fn derivatives(&self, x: &Vec3) -> Result<KernelDerivatives> {
        let Some(r) = self.locate(x) else {
            return KernelDerivatives::compute(&self.data, x, self.quad);
        };
        let mut d = self.reps[r.entry].clone();
        let q = self.group.ops[r.op].transpose();
        rotate_flat(&q, &mut d.g0);
        rotate_flat(&q, &mut d.g1);
        rotate_flat(&q, &mut d.d1);
        rotate_flat(&q, &mut d.d2);
        rotate_flat(&q, &mut d.d3);
        rotate_flat(&q, &mut d.g1_grad);
        Ok(d)
    }

    /// `G0(x) + G1(x)`.
    pub fn g0_plus_g1(&self, x: &Vec3) -> Result<Mat3> {
        let Some(r) = self.locate(x) else {
            let d = KernelDerivatives::compute(&self.data, x, self.quad)?;
            return Ok(d.g0_matrix() + d.g1_matrix());
        };
        let d = &self.reps[r.entry];
        let q = self.group.ops[r.op];
        Ok(q.transpose() * (d.g0_matrix() + d.g1_matrix()) * q)
    }
}
