//! The defect energy on a finite ball and the homogeneous linearised operator.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::lattice::{
    neighbor_table, DefectSiteSet, DefectSpec, LatticeBall, LatticeSpec, Mat3, SiteKey, Vec3,
};
use crate::potential::{ForceConstants, ToyEam};

/// A per-site field of 3-vectors aligned with some site list.
pub type Displacement = Vec<Vec3>;

/// Finite computational domain for the cell problem of radius `R`.
///
/// Sites with `|ℓ| <= R` are free, every other stored site is clamped. The
/// energy sums over sites within `R + r_cut` (exactly those whose potential
/// sees a free site) and the store extends to `R + 2 r_cut` so that every
/// such site has its full neighbourhood.
#[derive(Clone, Debug)]
pub struct Domain {
    set: DefectSiteSet,
    pot: ToyEam,
    free_radius: f64,
    energy_sites: Vec<usize>,
    free: Vec<bool>,
    free_sites: Vec<usize>,
    nbr_start: Vec<usize>,
    nbr_index: Vec<u32>,
    nbr_offset: Vec<Vec3>,
}

impl Domain {
    pub fn new(spec: &LatticeSpec, pot: ToyEam, defect: DefectSpec, radius: f64) -> Result<Self> {
        let r_cut = pot.cutoff();
        let set = DefectSiteSet::build(spec, defect, radius + 2.0 * r_cut)?;
        if defect != DefectSpec::None && radius <= set.core_radius() {
            return Err(Error::Config(format!(
                "free radius {radius} does not enclose the defect core ({})",
                set.core_radius()
            )));
        }
        let tol = 1e-9 * radius.max(1.0);
        let norms: Vec<f64> = set.positions().iter().map(|x| x.norm()).collect();
        let free: Vec<bool> = norms.iter().map(|&r| r <= radius + tol).collect();
        let free_sites = (0..set.len()).filter(|&i| free[i]).collect();
        let energy_sites: Vec<usize> = (0..set.len()).filter(|&i| norms[i] <= radius + r_cut + tol).collect();

        let table = neighbor_table(set.positions(), r_cut);
        let mut nbr_start = vec![0usize; set.len() + 1];
        let mut nbr_index = Vec::new();
        let mut nbr_offset = Vec::new();
        for (i, list) in table.iter().enumerate() {
            let x = set.positions()[i];
            for &j in list {
                nbr_index.push(j as u32);
                nbr_offset.push(set.positions()[j] - x);
            }
            nbr_start[i + 1] = nbr_index.len();
        }
        Ok(Domain { set, pot, free_radius: radius, energy_sites, free, free_sites, nbr_start, nbr_index, nbr_offset })
    }

    pub fn sites(&self) -> &DefectSiteSet {
        &self.set
    }
    pub fn potential(&self) -> &ToyEam {
        &self.pot
    }
    pub fn len(&self) -> usize {
        self.set.len()
    }
    pub fn is_empty(&self) -> bool {
        self.set.is_empty()
    }
    pub fn free_radius(&self) -> f64 {
        self.free_radius
    }
    pub fn is_free(&self, i: usize) -> bool {
        self.free[i]
    }
    pub fn free_sites(&self) -> &[usize] {
        &self.free_sites
    }
    pub fn energy_sites(&self) -> &[usize] {
        &self.energy_sites
    }
    pub fn neighbors(&self, i: usize) -> (&[u32], &[Vec3]) {
        let r = self.nbr_start[i]..self.nbr_start[i + 1];
        (&self.nbr_index[r.clone()], &self.nbr_offset[r])
    }

    /// Overwrite clamped sites with `boundary(site, position)`.
    pub fn clamp(&self, u: &mut [Vec3], mut boundary: impl FnMut(usize, &Vec3) -> Vec3) {
        for (i, x) in self.set.positions().iter().enumerate() {
            if !self.free[i] {
                u[i] = boundary(i, x);
            }
        }
    }

    fn gather(&self, i: usize, u: &[Vec3], diffs: &mut Vec<Vec3>) {
        let (idx, _) = self.neighbors(i);
        diffs.clear();
        diffs.extend(idx.iter().map(|&j| u[j as usize] - u[i]));
    }

    fn sites_within(&self, radius: Option<f64>) -> impl Iterator<Item = usize> + '_ {
        let limit = radius.map(|r| r + 1e-9 * r.max(1.0));
        self.energy_sites
            .iter()
            .copied()
            .filter(move |&i| limit.map_or(true, |r| self.set.positions()[i].norm() <= r))
    }

    /// `Σ_ℓ V_ℓ(Du) - V_ℓ(0)` over the energy sites, or over `|ℓ| <= radius`.
    pub fn energy_within(&self, u: &[Vec3], radius: Option<f64>) -> Result<f64> {
        let mut diffs = Vec::with_capacity(64);
        let mut e = 0.0;
        for i in self.sites_within(radius) {
            self.gather(i, u, &mut diffs);
            e += self.pot.site_energy(self.neighbors(i).1, &diffs)?;
        }
        Ok(e)
    }

    /// Energy and its full gradient (free and clamped sites alike).
    pub fn energy_gradient(&self, u: &[Vec3], grad: &mut [Vec3]) -> Result<f64> {
        grad.iter_mut().for_each(|g| *g = Vec3::zeros());
        let mut diffs = Vec::with_capacity(64);
        let mut local = Vec::with_capacity(64);
        let mut e = 0.0;
        for &i in &self.energy_sites {
            self.gather(i, u, &mut diffs);
            let (idx, off) = self.neighbors(i);
            local.resize(idx.len(), Vec3::zeros());
            e += self.pot.site_energy_gradient(off, &diffs, &mut local)?;
            for (&j, g) in idx.iter().zip(&local) {
                grad[j as usize] += g;
                grad[i] -= g;
            }
        }
        Ok(e)
    }

    /// `δ²E(u) v`, full (no masking).
    pub fn hessian_apply_full(&self, u: &[Vec3], v: &[Vec3], out: &mut [Vec3]) -> Result<()> {
        out.iter_mut().for_each(|g| *g = Vec3::zeros());
        let mut diffs = Vec::with_capacity(64);
        let mut dv = Vec::with_capacity(64);
        let mut local = Vec::with_capacity(64);
        for &i in &self.energy_sites {
            self.gather(i, u, &mut diffs);
            self.gather(i, v, &mut dv);
            let (idx, off) = self.neighbors(i);
            local.resize(idx.len(), Vec3::zeros());
            self.pot.site_hessian_apply(off, &diffs, &dv, &mut local)?;
            for (&j, g) in idx.iter().zip(&local) {
                out[j as usize] += g;
                out[i] -= g;
            }
        }
        Ok(())
    }

    /// `E(b) - E(a) - δE(a)[b - a]` over `|ℓ| <= radius`, summed site by site
    /// so that the large common parts cancel before accumulation.
    pub fn energy_remainder(&self, a: &[Vec3], b: &[Vec3], radius: f64) -> Result<f64> {
        let mut da = Vec::with_capacity(64);
        let mut db = Vec::with_capacity(64);
        let mut g = Vec::with_capacity(64);
        let mut total = 0.0;
        for i in self.sites_within(Some(radius)) {
            self.gather(i, a, &mut da);
            self.gather(i, b, &mut db);
            let off = self.neighbors(i).1;
            g.resize(off.len(), Vec3::zeros());
            let ea = self.pot.site_energy_gradient(off, &da, &mut g)?;
            let eb = self.pot.site_energy(off, &db)?;
            let lin: f64 = g.iter().zip(da.iter().zip(&db)).map(|(g, (x, y))| g.dot(&(y - x))).sum();
            total += eb - ea - lin;
        }
        Ok(total)
    }
}

pub fn total_energy(u: &[Vec3], domain: &Domain) -> Result<f64> {
    domain.energy_within(u, None)
}

/// `-∂E/∂u` on free sites, zero on clamped sites.
pub fn residual_forces(u: &[Vec3], domain: &Domain) -> Result<Vec<Vec3>> {
    let mut g = vec![Vec3::zeros(); domain.len()];
    domain.energy_gradient(u, &mut g)?;
    for (i, gi) in g.iter_mut().enumerate() {
        *gi = if domain.is_free(i) { -*gi } else { Vec3::zeros() };
    }
    Ok(g)
}

/// `δ²E(u) v` restricted to free rows.
pub fn hessian_apply(u: &[Vec3], v: &[Vec3], domain: &Domain) -> Result<Vec<Vec3>> {
    let mut out = vec![Vec3::zeros(); domain.len()];
    domain.hessian_apply_full(u, v, &mut out)?;
    for (i, o) in out.iter_mut().enumerate() {
        if !domain.is_free(i) {
            *o = Vec3::zeros();
        }
    }
    Ok(out)
}

/// `H[u](ℓ) = Σ_τ K_τ u(ℓ + τ)`, the linearised residual of the homogeneous crystal.
#[derive(Clone, Debug)]
pub struct LinearOperator {
    coords: Vec<[i32; 3]>,
    blocks: Vec<Mat3>,
    reach: f64,
}

impl LinearOperator {
    pub fn new(spec: &LatticeSpec, fc: &ForceConstants) -> Self {
        let st = fc.stencil();
        let n = st.len();
        let mut acc: BTreeMap<[i32; 3], Mat3> = BTreeMap::new();
        let add = |acc: &mut BTreeMap<[i32; 3], Mat3>, z: [i32; 3], m: Mat3| {
            *acc.entry(z).or_insert_with(Mat3::zeros) += m;
        };
        for i in 0..n {
            let r = st.coords()[i];
            for j in 0..n {
                let c = *fc.block(i, j);
                if c.iter().all(|v| *v == 0.0) {
                    continue;
                }
                let s = st.coords()[j];
                add(&mut acc, [s[0] - r[0], s[1] - r[1], s[2] - r[2]], c);
                add(&mut acc, [-r[0], -r[1], -r[2]], -c);
                add(&mut acc, s, -c);
                add(&mut acc, [0, 0, 0], c);
            }
        }
        let (coords, blocks): (Vec<_>, Vec<_>) = acc.into_iter().filter(|(_, m)| m.norm() > 0.0).unzip();
        let reach = coords.iter().map(|&z| spec.position(z).norm()).fold(0.0, f64::max);
        LinearOperator { coords, blocks, reach }
    }

    pub fn terms(&self) -> impl Iterator<Item = (&[i32; 3], &Mat3)> {
        self.coords.iter().zip(&self.blocks)
    }
    /// Longest offset the operator couples.
    pub fn reach(&self) -> f64 {
        self.reach
    }
    /// The `τ = 0` block: the diagonal of `H`.
    pub fn diagonal(&self) -> Mat3 {
        self.terms().find(|(z, _)| **z == [0, 0, 0]).map(|(_, m)| *m).unwrap_or_else(Mat3::zeros)
    }

    /// `H[u](ℓ)` for one site, with `lookup` returning the field at integer coordinates.
    pub fn apply_at(&self, z: [i32; 3], mut lookup: impl FnMut([i32; 3]) -> Vec3) -> Vec3 {
        self.terms().map(|(t, k)| k * lookup([z[0] + t[0], z[1] + t[1], z[2] + t[2]])).sum()
    }

    /// `H[u]` at every site of the ball with `|ℓ| <= radius`; zero elsewhere.
    pub fn apply(&self, ball: &LatticeBall, u: &[Vec3], radius: f64) -> Result<Vec<Vec3>> {
        if radius + self.reach > ball.radius() * (1.0 + 1e-12) + 1e-12 {
            return Err(Error::Domain(format!(
                "operator needs radius {} but the ball only reaches {}",
                radius + self.reach,
                ball.radius()
            )));
        }
        let mut out = vec![Vec3::zeros(); ball.len()];
        for (i, (z, x)) in ball.coords().iter().zip(ball.positions()).enumerate() {
            if x.norm() <= radius * (1.0 + 1e-12) {
                out[i] = self.apply_at(*z, |w| u[ball.index_of(w).expect("collar site present")]);
            }
        }
        Ok(out)
    }

    /// Precomputed sparse form on a ball: rows for `|ℓ| <= radius`.
    pub fn assemble(&self, ball: &LatticeBall, radius: f64) -> Result<SparseStencil> {
        if radius + self.reach > ball.radius() * (1.0 + 1e-12) + 1e-12 {
            return Err(Error::Domain("ball too small for the operator collar".into()));
        }
        let mut rows = Vec::new();
        let mut cols = Vec::new();
        for (i, (z, x)) in ball.coords().iter().zip(ball.positions()).enumerate() {
            if x.norm() <= radius * (1.0 + 1e-12) {
                rows.push(i as u32);
                for t in &self.coords {
                    cols.push(ball.index_of([z[0] + t[0], z[1] + t[1], z[2] + t[2]]).unwrap() as u32);
                }
            }
        }
        Ok(SparseStencil { rows, cols, blocks: self.blocks.clone() })
    }
}

/// `H` restricted to a set of rows of a ball, with column indices resolved.
#[derive(Clone, Debug)]
pub struct SparseStencil {
    rows: Vec<u32>,
    cols: Vec<u32>,
    blocks: Vec<Mat3>,
}

impl SparseStencil {
    pub fn rows(&self) -> &[u32] {
        &self.rows
    }
    /// `out[row] = Σ K_τ u[col]` for each assembled row; other entries untouched.
    pub fn apply(&self, u: &[Vec3], out: &mut [Vec3]) {
        let m = self.blocks.len();
        for (r, &row) in self.rows.iter().enumerate() {
            let cols = &self.cols[r * m..(r + 1) * m];
            let mut acc = Vec3::zeros();
            for (k, &c) in self.blocks.iter().zip(cols) {
                acc += k * u[c as usize];
            }
            out[row as usize] = acc;
        }
    }
}

/// Site key lookup helper used when transferring fields between domains.
pub fn value_at(set: &DefectSiteSet, u: &[Vec3], key: SiteKey) -> Option<Vec3> {
    set.index_of(key).map(|i| u[i])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{generate_ball, stencil, Structure};
    use crate::potential::{calibrate_equilibrium, force_constants};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(kappa: f64, defect: DefectSpec, radius: f64) -> (Domain, LatticeSpec) {
        let (params, bracket) = crate::potential::test_params(kappa);
        let a0 = calibrate_equilibrium(&params, Structure::Bcc, bracket).unwrap();
        let spec = LatticeSpec::new(Structure::Bcc, a0).unwrap();
        let pot = ToyEam::new(params, a0).unwrap();
        (Domain::new(&spec, pot, defect, radius * a0).unwrap(), spec)
    }

    fn random_field(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<Vec3> {
        (0..n)
            .map(|_| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)) * scale)
            .collect()
    }

    /// Per-bond re-summation straight from positions, no neighbour table.
    fn slow_energy(d: &Domain, u: &[Vec3]) -> f64 {
        let pos = d.sites().positions();
        let rc = d.potential().cutoff();
        let mut e = 0.0;
        for &i in d.energy_sites() {
            let mut off = vec![];
            let mut diff = vec![];
            for j in 0..pos.len() {
                if j != i && (pos[j] - pos[i]).norm() <= rc {
                    off.push(pos[j] - pos[i]);
                    diff.push(u[j] - u[i]);
                }
            }
            e += d.potential().site_energy(&off, &diff).unwrap();
        }
        e
    }

    #[test]
    fn energy_basics() {
        let (d, _) = setup(1.0, DefectSpec::Vacancy, 2.5);
        let zero = vec![Vec3::zeros(); d.len()];
        assert_eq!(total_energy(&zero, &d).unwrap(), 0.0);
        let c = vec![Vec3::new(0.3, -0.1, 0.2); d.len()];
        assert!(total_energy(&c, &d).unwrap().abs() < 1e-13);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let u = random_field(&mut rng, d.len(), 0.02);
        let a = total_energy(&u, &d).unwrap();
        let b = slow_energy(&d, &u);
        assert!((a - b).abs() <= 1e-12 * b.abs(), "{a} {b}");
    }

    #[test]
    fn forces_and_hessian_match_finite_differences() {
        for kappa in [0.0, 1.0] {
            let (d, _) = setup(kappa, DefectSpec::Vacancy, 2.5);
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            for _ in 0..10 {
                let u = random_field(&mut rng, d.len(), 0.02);
                let mut dir = random_field(&mut rng, d.len(), 1.0);
                for (i, v) in dir.iter_mut().enumerate() {
                    if !d.is_free(i) {
                        *v = Vec3::zeros();
                    }
                }
                let f = residual_forces(&u, &d).unwrap();
                // the taper has large third derivatives; keep the step small
                let h = 1e-6;
                let shift = |t: f64| -> Vec<Vec3> { u.iter().zip(&dir).map(|(a, b)| a + b * t).collect() };
                let fd = (total_energy(&shift(h), &d).unwrap() - total_energy(&shift(-h), &d).unwrap()) / (2.0 * h);
                let exact: f64 = -f.iter().zip(&dir).map(|(a, b)| a.dot(b)).sum::<f64>();
                assert!((fd - exact).abs() <= 1e-6 * exact.abs(), "{fd} {exact}");

                let hv = hessian_apply(&u, &dir, &d).unwrap();
                let fp = residual_forces(&shift(h), &d).unwrap();
                let fm = residual_forces(&shift(-h), &d).unwrap();
                let scale = hv.iter().map(|v| v.norm()).fold(0.0, f64::max);
                for i in 0..d.len() {
                    let fd = -(fp[i] - fm[i]) / (2.0 * h);
                    assert!((fd - hv[i]).norm() <= 1e-6 * scale);
                }
                let w = random_field(&mut rng, d.len(), 1.0);
                let w: Vec<Vec3> = w.iter().enumerate().map(|(i, x)| if d.is_free(i) { *x } else { Vec3::zeros() }).collect();
                let hw = hessian_apply(&u, &w, &d).unwrap();
                let a: f64 = hv.iter().zip(&w).map(|(x, y)| x.dot(y)).sum();
                let b: f64 = hw.iter().zip(&dir).map(|(x, y)| x.dot(y)).sum();
                assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn calibrated_lattice_is_stationary() {
        let (d, _) = setup(1.0, DefectSpec::None, 3.0);
        let zero = vec![Vec3::zeros(); d.len()];
        let f = residual_forces(&zero, &d).unwrap();
        assert!(f.iter().all(|v| v.norm() < 1e-12));
    }

    #[test]
    fn forces_are_local() {
        let (d, _) = setup(0.0, DefectSpec::None, 4.0);
        let mut u = vec![Vec3::zeros(); d.len()];
        let k = d.sites().index_of(SiteKey::Lattice([0, 0, 0])).unwrap();
        u[k] = Vec3::new(0.01, 0.02, -0.01);
        let f = residual_forces(&u, &d).unwrap();
        for (i, x) in d.sites().positions().iter().enumerate() {
            if x.norm() > 2.0 * d.potential().cutoff() + 1e-9 {
                assert!(f[i].norm() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_operator_matches_hessian_and_symbol() {
        for kappa in [0.0, 1.0] {
            let (d, spec) = setup(kappa, DefectSpec::None, 3.0);
            let st = stencil(&spec, d.potential().cutoff()).unwrap();
            let fc = force_constants(d.potential(), &st).unwrap();
            let op = LinearOperator::new(&spec, &fc);
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let mut v = random_field(&mut rng, d.len(), 1.0);
            for (i, x) in v.iter_mut().enumerate() {
                if !d.is_free(i) {
                    *x = Vec3::zeros();
                }
            }
            let zero = vec![Vec3::zeros(); d.len()];
            let hv = hessian_apply(&zero, &v, &d).unwrap();
            let set = d.sites();
            for &i in d.free_sites() {
                let SiteKey::Lattice(z) = set.keys()[i] else { continue };
                let lin = op.apply_at(z, |w| set.index_of(SiteKey::Lattice(w)).map_or(Vec3::zeros(), |j| v[j]));
                assert!((lin - hv[i]).norm() < 1e-11, "{lin} {}", hv[i]);
            }

            // constants and affine fields are annihilated
            let ball = generate_ball(&spec, 6.0).unwrap();
            let f = Mat3::new(0.1, 0.2, 0.0, -0.1, 0.3, 0.05, 0.0, 0.1, -0.2);
            let affine: Vec<Vec3> = ball.positions().iter().map(|x| f * x + Vec3::new(1.0, 2.0, 3.0)).collect();
            let r = 6.0 - op.reach();
            let h = op.apply(&ball, &affine, r).unwrap();
            assert!(h.iter().all(|v| v.norm() < 1e-11));
            assert!(op.apply(&ball, &affine, 6.0).is_err());
        }
    }
}
