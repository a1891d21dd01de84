//! Site potentials: a tapered Morse pair term plus an optional square-root
//! embedding term (a minimal EAM).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{stencil, LatticeSpec, Mat3, Stencil, Structure, Vec3};

/// Parameters of the toy potential. Lengths are absolute, not in units of `a0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PotentialParams {
    pub well_depth: f64,
    pub equilibrium_distance: f64,
    pub stiffness: f64,
    /// Strength of the embedding term `-κ sqrt(ρ̄)`; zero gives a pure pair model.
    pub embedding: f64,
    /// Decay rate of the pairwise density `exp(-β (r - r_e))`.
    pub density_decay: f64,
    pub cutoff: f64,
    pub taper_width: f64,
}

impl Default for PotentialParams {
    fn default() -> Self {
        PotentialParams {
            well_depth: 1.0,
            equilibrium_distance: 0.95,
            stiffness: 3.0,
            embedding: 0.0,
            density_decay: 3.0,
            cutoff: 1.55,
            taper_width: 0.12,
        }
    }
}

impl PotentialParams {
    pub fn validate(&self) -> Result<()> {
        let p = self;
        let all = [
            p.well_depth,
            p.equilibrium_distance,
            p.stiffness,
            p.embedding,
            p.density_decay,
            p.cutoff,
            p.taper_width,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("potential parameters must be finite".into()));
        }
        if p.cutoff <= p.equilibrium_distance {
            return Err(Error::Config("cutoff must exceed the equilibrium distance".into()));
        }
        if p.taper_width <= 0.0 || p.taper_width > p.cutoff {
            return Err(Error::Config("taper width must lie in (0, cutoff]".into()));
        }
        if p.embedding < 0.0 {
            return Err(Error::Config("embedding strength must be non-negative".into()));
        }
        Ok(())
    }
}

/// Value and first two derivatives of a radial function.
#[derive(Clone, Copy, Debug, Default)]
struct Radial {
    v: f64,
    d1: f64,
    d2: f64,
}

/// The site potential `V(Du) = ½ Σ φ(|ρ + D_ρ u|) + F(Σ ψ(|ρ + D_ρ u|))`.
#[derive(Clone, Debug)]
pub struct ToyEam {
    params: PotentialParams,
    floor: f64,
}

impl ToyEam {
    /// `a0` sets the collapsed-bond floor (`0.1 a0`).
    pub fn new(params: PotentialParams, a0: f64) -> Result<Self> {
        params.validate()?;
        Ok(ToyEam { params, floor: 0.1 * a0 })
    }

    pub fn params(&self) -> &PotentialParams {
        &self.params
    }

    pub fn cutoff(&self) -> f64 {
        self.params.cutoff
    }

    fn taper(&self, r: f64) -> Radial {
        let (rc, w) = (self.params.cutoff, self.params.taper_width);
        if r >= rc {
            return Radial::default();
        }
        if r <= rc - w {
            return Radial { v: 1.0, d1: 0.0, d2: 0.0 };
        }
        let t = (r - (rc - w)) / w;
        let (t2, t3) = (t * t, t * t * t);
        Radial {
            v: 1.0 - 10.0 * t3 + 15.0 * t3 * t - 6.0 * t3 * t2,
            d1: (-30.0 * t2 + 60.0 * t3 - 30.0 * t2 * t2) / w,
            d2: (-60.0 * t + 180.0 * t2 - 120.0 * t3) / (w * w),
        }
    }

    fn tapered(&self, g: Radial, r: f64) -> Radial {
        let s = self.taper(r);
        Radial {
            v: g.v * s.v,
            d1: g.d1 * s.v + g.v * s.d1,
            d2: g.d2 * s.v + 2.0 * g.d1 * s.d1 + g.v * s.d2,
        }
    }

    fn pair(&self, r: f64) -> Radial {
        if r >= self.params.cutoff {
            return Radial::default();
        }
        let p = &self.params;
        let e1 = (-p.stiffness * (r - p.equilibrium_distance)).exp();
        let e2 = e1 * e1;
        let a = p.stiffness;
        let g = Radial {
            v: p.well_depth * (e2 - 2.0 * e1),
            d1: p.well_depth * (-2.0 * a * e2 + 2.0 * a * e1),
            d2: p.well_depth * (4.0 * a * a * e2 - 2.0 * a * a * e1),
        };
        self.tapered(g, r)
    }

    fn density(&self, r: f64) -> Radial {
        if r >= self.params.cutoff {
            return Radial::default();
        }
        let b = self.params.density_decay;
        let e = (-b * (r - self.params.equilibrium_distance)).exp();
        self.tapered(Radial { v: e, d1: -b * e, d2: b * b * e }, r)
    }

    fn embed(&self, rho: f64) -> Result<Radial> {
        let k = self.params.embedding;
        if k == 0.0 {
            return Ok(Radial::default());
        }
        if !(rho > 0.0) {
            return Err(Error::NonFinite("embedding density vanished".into()));
        }
        let s = rho.sqrt();
        Ok(Radial { v: -k * s, d1: -k / (2.0 * s), d2: k / (4.0 * rho * s) })
    }

    fn embedding_on(&self) -> bool {
        self.params.embedding != 0.0
    }

    fn bond(&self, rho: &Vec3, d: &Vec3) -> Result<(f64, Vec3)> {
        let x = rho + d;
        let r = x.norm();
        if !(r >= self.floor) {
            return Err(Error::NonFinite(format!(
                "bond length {r:.3e} below the floor {:.3e}",
                self.floor
            )));
        }
        Ok((r, x / r))
    }

    fn density_sum(&self, offsets: &[Vec3], diffs: &[Vec3]) -> Result<(f64, f64)> {
        let (mut now, mut refr) = (0.0, 0.0);
        for (o, d) in offsets.iter().zip(diffs) {
            let (r, _) = self.bond(o, d)?;
            now += self.density(r).v;
            refr += self.density(o.norm()).v;
        }
        Ok((now, refr))
    }

    /// `V(Du) - V(0)` for one site with stencil `offsets`.
    pub fn site_energy(&self, offsets: &[Vec3], diffs: &[Vec3]) -> Result<f64> {
        debug_assert_eq!(offsets.len(), diffs.len());
        let mut e = 0.0;
        for (o, d) in offsets.iter().zip(diffs) {
            let (r, _) = self.bond(o, d)?;
            e += 0.5 * (self.pair(r).v - self.pair(o.norm()).v);
        }
        if self.embedding_on() {
            let (now, refr) = self.density_sum(offsets, diffs)?;
            e += self.embed(now)?.v - self.embed(refr)?.v;
        }
        Ok(e)
    }

    /// Energy and gradient with respect to each difference vector.
    pub fn site_energy_gradient(&self, offsets: &[Vec3], diffs: &[Vec3], grad: &mut [Vec3]) -> Result<f64> {
        let mut e = 0.0;
        let mut fp = 0.0;
        if self.embedding_on() {
            let (now, refr) = self.density_sum(offsets, diffs)?;
            let f = self.embed(now)?;
            e += f.v - self.embed(refr)?.v;
            fp = f.d1;
        }
        for ((o, d), g) in offsets.iter().zip(diffs).zip(grad.iter_mut()) {
            let (r, n) = self.bond(o, d)?;
            let p = self.pair(r);
            e += 0.5 * (p.v - self.pair(o.norm()).v);
            let mut radial = 0.5 * p.d1;
            if fp != 0.0 {
                radial += fp * self.density(r).d1;
            }
            *g = n * radial;
        }
        Ok(e)
    }

    pub fn site_gradient(&self, offsets: &[Vec3], diffs: &[Vec3]) -> Result<Vec<Vec3>> {
        let mut g = vec![Vec3::zeros(); offsets.len()];
        self.site_energy_gradient(offsets, diffs, &mut g)?;
        Ok(g)
    }

    /// Dense `n x n` block Hessian, row-major (`out[i * n + j]` is block `(ρ_i, ρ_j)`).
    pub fn site_hessian(&self, offsets: &[Vec3], diffs: &[Vec3]) -> Result<Vec<Mat3>> {
        let n = offsets.len();
        let mut h = vec![Mat3::zeros(); n * n];
        let (mut fp, mut fpp) = (0.0, 0.0);
        if self.embedding_on() {
            let (now, _) = self.density_sum(offsets, diffs)?;
            let f = self.embed(now)?;
            (fp, fpp) = (f.d1, f.d2);
        }
        let mut coupling = Vec::with_capacity(n);
        for (i, (o, d)) in offsets.iter().zip(diffs).enumerate() {
            let (r, u) = self.bond(o, d)?;
            let p = self.pair(r);
            let q = self.density(r);
            let axial = 0.5 * p.d2 + fp * q.d2;
            let transverse = (0.5 * p.d1 + fp * q.d1) / r;
            let nn = u * u.transpose();
            h[i * n + i] = nn * axial + (Mat3::identity() - nn) * transverse;
            coupling.push(u * q.d1);
        }
        if fpp != 0.0 {
            for i in 0..n {
                for j in 0..n {
                    h[i * n + j] += coupling[i] * coupling[j].transpose() * fpp;
                }
            }
        }
        Ok(h)
    }

    /// `out[i] = Σ_j H_{ij} v[j]` without forming the dense Hessian.
    pub fn site_hessian_apply(&self, offsets: &[Vec3], diffs: &[Vec3], v: &[Vec3], out: &mut [Vec3]) -> Result<()> {
        let (mut fp, mut fpp) = (0.0, 0.0);
        let mut proj = 0.0;
        if self.embedding_on() {
            let mut now = 0.0;
            for ((o, d), vi) in offsets.iter().zip(diffs).zip(v) {
                let (r, u) = self.bond(o, d)?;
                let q = self.density(r);
                now += q.v;
                proj += q.d1 * u.dot(vi);
            }
            let f = self.embed(now)?;
            (fp, fpp) = (f.d1, f.d2);
        }
        for (((o, d), vi), oi) in offsets.iter().zip(diffs).zip(v).zip(out.iter_mut()) {
            let (r, u) = self.bond(o, d)?;
            let p = self.pair(r);
            let q = self.density(r);
            let axial = 0.5 * p.d2 + fp * q.d2;
            let transverse = (0.5 * p.d1 + fp * q.d1) / r;
            let along = u.dot(vi);
            *oi = u * (along * (axial - transverse)) + vi * transverse;
            if fpp != 0.0 {
                *oi += u * (fpp * proj * q.d1);
            }
        }
        Ok(())
    }

    /// `Σ_ρ ∂V/∂(D_ρ u) · ρ` at `u = 0`: the virial of one site, zero at equilibrium.
    pub fn hydrostatic_residual(&self, st: &Stencil) -> Result<f64> {
        let zeros = vec![Vec3::zeros(); st.len()];
        let g = self.site_gradient(st.offsets(), &zeros)?;
        Ok(g.iter().zip(st.offsets()).map(|(g, o)| g.dot(o)).sum())
    }
}

/// The lattice constant at which the homogeneous crystal carries no
/// hydrostatic stress, found by bisection inside `bracket`.
pub fn calibrate_equilibrium(params: &PotentialParams, structure: Structure, bracket: (f64, f64)) -> Result<f64> {
    params.validate()?;
    let residual = |a0: f64| -> Result<f64> {
        let spec = LatticeSpec::new(structure, a0)?;
        let st = stencil(&spec, params.cutoff)?;
        ToyEam::new(params.clone(), a0)?.hydrostatic_residual(&st)
    };
    let (mut lo, mut hi) = bracket;
    if !(lo > 0.0 && hi > lo) {
        return Err(Error::Calibration(format!("invalid bracket [{lo}, {hi}]")));
    }
    let (plo, phi) = (residual(lo)?, residual(hi)?);
    // compressed crystals push outwards: the residual goes from negative to positive
    if !(plo < 0.0 && phi > 0.0) {
        return Err(Error::Calibration(format!(
            "no stable root in [{lo}, {hi}]: residuals {plo:.3e}, {phi:.3e}"
        )));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if residual(mid)? < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (rl, rh) = (residual(lo)?, residual(hi)?);
    Ok(if rl.abs() <= rh.abs() { lo } else { hi })
}

/// Second derivatives `C_{ρς}` of the site potential at zero displacement.
#[derive(Clone, Debug)]
pub struct ForceConstants {
    stencil: Stencil,
    blocks: Vec<Mat3>,
}

impl ForceConstants {
    /// Build from explicit blocks (row-major over the stencil).
    pub fn from_blocks(stencil: Stencil, blocks: Vec<Mat3>) -> Self {
        assert_eq!(blocks.len(), stencil.len() * stencil.len());
        ForceConstants { stencil, blocks }
    }
    pub fn stencil(&self) -> &Stencil {
        &self.stencil
    }
    pub fn block(&self, i: usize, j: usize) -> &Mat3 {
        &self.blocks[i * self.stencil.len() + j]
    }
    pub fn blocks(&self) -> &[Mat3] {
        &self.blocks
    }
    /// True when every off-diagonal block `C_{ρς}, ρ ≠ ς` vanishes (pair models).
    pub fn is_block_diagonal(&self) -> bool {
        let n = self.stencil.len();
        (0..n).all(|i| (0..n).all(|j| i == j || self.block(i, j).iter().all(|v| *v == 0.0)))
    }
}

pub fn force_constants(pot: &ToyEam, stencil: &Stencil) -> Result<ForceConstants> {
    let zeros = vec![Vec3::zeros(); stencil.len()];
    let blocks = pot.site_hessian(stencil.offsets(), &zeros)?;
    Ok(ForceConstants { stencil: stencil.clone(), blocks })
}

/// Parameter sets used by the unit tests: the default pair model, or an
/// embedded variant with a larger pair radius, each with a bracket around its
/// 26-neighbour equilibrium.
#[cfg(test)]
pub(crate) fn test_params(kappa: f64) -> (PotentialParams, (f64, f64)) {
    if kappa == 0.0 {
        (PotentialParams::default(), (0.94, 1.0))
    } else {
        (PotentialParams { embedding: kappa, equilibrium_distance: 1.0, ..Default::default() }, (0.95, 1.01))
    }
}
