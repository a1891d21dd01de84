//! Bravais lattices, finite balls, point defects and interaction stencils.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Relative slack used when deciding whether a site lies on a sphere.
const SHELL_EPS: f64 = 1e-9;

fn inside(r2: f64, radius: f64) -> bool {
    r2 <= radius * radius * (1.0 + SHELL_EPS) + SHELL_EPS * SHELL_EPS
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Structure {
    Bcc,
    Fcc,
    Sc,
}

impl Structure {
    pub const ALL: [Structure; 3] = [Structure::Bcc, Structure::Fcc, Structure::Sc];

    /// Primitive vectors (as columns) for lattice constant 1.
    fn unit_basis(self) -> Mat3 {
        match self {
            Structure::Sc => Mat3::identity(),
            Structure::Bcc => {
                Mat3::new(-1.0, 1.0, 1.0, 1.0, -1.0, 1.0, 1.0, 1.0, -1.0) * 0.5
            }
            Structure::Fcc => Mat3::new(0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0) * 0.5,
        }
    }

    /// Nearest-neighbour distance for lattice constant 1.
    pub fn nearest_neighbor(self) -> f64 {
        match self {
            Structure::Sc => 1.0,
            Structure::Bcc => 3f64.sqrt() / 2.0,
            Structure::Fcc => 2f64.sqrt() / 2.0,
        }
    }
}

impl fmt::Display for Structure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Structure::Bcc => "bcc",
            Structure::Fcc => "fcc",
            Structure::Sc => "sc",
        })
    }
}

/// A Bravais lattice `A Z^3`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatticeSpec {
    structure: Structure,
    a0: f64,
    basis: Mat3,
    inverse: Mat3,
}

impl LatticeSpec {
    pub fn new(structure: Structure, a0: f64) -> Result<Self> {
        if !(a0 > 0.0 && a0.is_finite()) {
            return Err(Error::Config(format!("lattice constant must be positive, got {a0}")));
        }
        Self::from_basis(structure, a0, structure.unit_basis() * a0)
    }

    /// Build from an explicit basis (columns are lattice vectors).
    pub fn from_basis(structure: Structure, a0: f64, basis: Mat3) -> Result<Self> {
        let det = basis.determinant();
        if !(det.abs() > 1e-12 * a0.powi(3)) || !det.is_finite() {
            return Err(Error::Config(format!("lattice basis is singular (det = {det:e})")));
        }
        let inverse = basis.try_inverse().ok_or_else(|| Error::Config("singular basis".into()))?;
        Ok(LatticeSpec { structure, a0, basis, inverse })
    }

    pub fn structure(&self) -> Structure {
        self.structure
    }
    pub fn a0(&self) -> f64 {
        self.a0
    }
    pub fn basis(&self) -> &Mat3 {
        &self.basis
    }
    pub fn inverse(&self) -> &Mat3 {
        &self.inverse
    }
    /// Volume of the primitive cell.
    pub fn cell_volume(&self) -> f64 {
        self.basis.determinant().abs()
    }
    pub fn nearest_neighbor(&self) -> f64 {
        self.structure.nearest_neighbor() * self.a0
    }

    pub fn position(&self, z: [i32; 3]) -> Vec3 {
        self.basis * Vec3::new(z[0] as f64, z[1] as f64, z[2] as f64)
    }

    /// Integer coordinates of `x` if it is a lattice point.
    pub fn coords_of(&self, x: &Vec3) -> Option<[i32; 3]> {
        let c = self.inverse * x;
        let z = [c.x.round(), c.y.round(), c.z.round()];
        let snapped = self.basis * Vec3::new(z[0], z[1], z[2]);
        ((snapped - x).norm() <= 1e-8 * self.a0).then(|| [z[0] as i32, z[1] as i32, z[2] as i32])
    }

    /// Every lattice point with `|Az| <= radius`, lexicographic in `z`.
    fn enumerate(&self, radius: f64) -> Vec<[i32; 3]> {
        let mut bounds = [0i32; 3];
        for (i, b) in bounds.iter_mut().enumerate() {
            *b = (self.inverse.row(i).norm() * radius * (1.0 + SHELL_EPS)).floor() as i32 + 1;
        }
        let mut out = Vec::new();
        for i in -bounds[0]..=bounds[0] {
            for j in -bounds[1]..=bounds[1] {
                for k in -bounds[2]..=bounds[2] {
                    if inside(self.position([i, j, k]).norm_squared(), radius) {
                        out.push([i, j, k]);
                    }
                }
            }
        }
        out
    }
}

/// `Λ ∩ B_R` with a coordinate index.
#[derive(Clone, Debug)]
pub struct LatticeBall {
    spec: LatticeSpec,
    radius: f64,
    coords: Vec<[i32; 3]>,
    positions: Vec<Vec3>,
    index: HashMap<[i32; 3], usize>,
}

impl LatticeBall {
    pub fn spec(&self) -> &LatticeSpec {
        &self.spec
    }
    pub fn radius(&self) -> f64 {
        self.radius
    }
    pub fn len(&self) -> usize {
        self.coords.len()
    }
    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
    pub fn coords(&self) -> &[[i32; 3]] {
        &self.coords
    }
    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }
    pub fn index_of(&self, z: [i32; 3]) -> Option<usize> {
        self.index.get(&z).copied()
    }
}

/// All sites `ℓ = A z` with `|ℓ| <= radius`, lexicographic in `z`.
pub fn generate_ball(spec: &LatticeSpec, radius: f64) -> Result<LatticeBall> {
    if !(radius >= 0.0) || !radius.is_finite() {
        return Err(Error::Config(format!("ball radius must be non-negative, got {radius}")));
    }
    let coords = spec.enumerate(radius);
    let positions = coords.iter().map(|&z| spec.position(z)).collect();
    let index = coords.iter().enumerate().map(|(i, &z)| (z, i)).collect();
    Ok(LatticeBall { spec: spec.clone(), radius, coords, positions, index })
}

/// The interaction range: all nonzero lattice vectors no longer than the cutoff.
#[derive(Clone, Debug, PartialEq)]
pub struct Stencil {
    r_cut: f64,
    coords: Vec<[i32; 3]>,
    offsets: Vec<Vec3>,
}

impl Stencil {
    pub fn r_cut(&self) -> f64 {
        self.r_cut
    }
    pub fn coords(&self) -> &[[i32; 3]] {
        &self.coords
    }
    pub fn offsets(&self) -> &[Vec3] {
        &self.offsets
    }
    pub fn len(&self) -> usize {
        self.coords.len()
    }
    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
    /// Position of `-ρ` for each `ρ`.
    pub fn negation(&self) -> Vec<usize> {
        let index: HashMap<_, _> = self.coords.iter().enumerate().map(|(i, &z)| (z, i)).collect();
        self.coords
            .iter()
            .map(|z| index[&[-z[0], -z[1], -z[2]]])
            .collect()
    }
    /// Longest offset.
    pub fn reach(&self) -> f64 {
        self.offsets.iter().map(|o| o.norm()).fold(0.0, f64::max)
    }
    pub fn is_symmetric(&self) -> bool {
        let set: std::collections::HashSet<_> = self.coords.iter().collect();
        self.coords.iter().all(|z| set.contains(&[-z[0], -z[1], -z[2]]))
    }
    /// Whether the integer span of the offsets is all of `Z^3`.
    pub fn spans_lattice(&self) -> bool {
        spans_integer_lattice(&self.coords)
    }
}

pub fn stencil(spec: &LatticeSpec, r_cut: f64) -> Result<Stencil> {
    if !(r_cut > 0.0) {
        return Err(Error::Config(format!("cutoff must be positive, got {r_cut}")));
    }
    let nn = spec.nearest_neighbor();
    if r_cut < nn * (1.0 - SHELL_EPS) {
        return Err(Error::Config(format!(
            "cutoff {r_cut} is shorter than the nearest-neighbour distance {nn}"
        )));
    }
    let coords: Vec<_> = spec.enumerate(r_cut).into_iter().filter(|z| *z != [0, 0, 0]).collect();
    let offsets = coords.iter().map(|&z| spec.position(z)).collect();
    Ok(Stencil { r_cut, coords, offsets })
}

fn gcd(a: i64, b: i64) -> i64 {
    let (mut a, mut b) = (a.abs(), b.abs());
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// The vectors generate `Z^3` iff the gcd of all 3x3 minors is 1
/// (product of the Smith invariants).
pub fn spans_integer_lattice(vectors: &[[i32; 3]]) -> bool {
    let n = vectors.len();
    let mut g = 0i64;
    for a in 0..n {
        for b in a + 1..n {
            for c in b + 1..n {
                let (u, v, w) = (vectors[a], vectors[b], vectors[c]);
                let det = u[0] as i64 * (v[1] as i64 * w[2] as i64 - v[2] as i64 * w[1] as i64)
                    - u[1] as i64 * (v[0] as i64 * w[2] as i64 - v[2] as i64 * w[0] as i64)
                    + u[2] as i64 * (v[0] as i64 * w[1] as i64 - v[1] as i64 * w[0] as i64);
                g = gcd(g, det);
                if g == 1 {
                    return true;
                }
            }
        }
    }
    false
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum DefectSpec {
    None,
    Vacancy,
    Divacancy,
    Interstitial,
    /// A row of `n` adjacent vacancies along the first nearest-neighbour direction.
    Microcrack(usize),
}

impl fmt::Display for DefectSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DefectSpec::None => f.write_str("none"),
            DefectSpec::Vacancy => f.write_str("vacancy"),
            DefectSpec::Divacancy => f.write_str("divacancy"),
            DefectSpec::Interstitial => f.write_str("interstitial"),
            DefectSpec::Microcrack(5) => f.write_str("microcrack2"),
            DefectSpec::Microcrack(7) => f.write_str("microcrack3"),
            DefectSpec::Microcrack(n) => write!(f, "microcrack({n})"),
        }
    }
}

impl FromStr for DefectSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        Ok(match t.as_str() {
            "none" => DefectSpec::None,
            "vacancy" => DefectSpec::Vacancy,
            "divacancy" => DefectSpec::Divacancy,
            "interstitial" => DefectSpec::Interstitial,
            "microcrack2" => DefectSpec::Microcrack(5),
            "microcrack3" => DefectSpec::Microcrack(7),
            _ => {
                let n = t
                    .strip_prefix("microcrack(")
                    .and_then(|r| r.strip_suffix(')'))
                    .and_then(|n| n.parse::<usize>().ok())
                    .filter(|&n| n > 0)
                    .ok_or_else(|| Error::Config(format!("unknown defect kind `{s}`")))?;
                DefectSpec::Microcrack(n)
            }
        })
    }
}

impl From<DefectSpec> for String {
    fn from(d: DefectSpec) -> String {
        d.to_string()
    }
}

impl TryFrom<String> for DefectSpec {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// A site of a defective crystal: either a lattice point or an added atom.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SiteKey {
    Lattice([i32; 3]),
    Extra(u32),
}

/// `Λ^def ∩ B_R`: the homogeneous ball with a defect core applied.
#[derive(Clone, Debug)]
pub struct DefectSiteSet {
    ball: LatticeBall,
    defect: DefectSpec,
    keys: Vec<SiteKey>,
    positions: Vec<Vec3>,
    index: HashMap<SiteKey, usize>,
    removed: Vec<[i32; 3]>,
    added: Vec<Vec3>,
    core_radius: f64,
}

/// Lexicographically first nearest-neighbour offset.
pub fn first_neighbor(spec: &LatticeSpec) -> [i32; 3] {
    let nn = spec.nearest_neighbor();
    spec.enumerate(nn)
        .into_iter()
        .find(|z| *z != [0, 0, 0])
        .expect("nearest-neighbour shell is never empty")
}

impl DefectSpec {
    fn removed_sites(self, spec: &LatticeSpec) -> Vec<[i32; 3]> {
        let r1 = first_neighbor(spec);
        match self {
            DefectSpec::None | DefectSpec::Interstitial => vec![],
            DefectSpec::Vacancy => vec![[0, 0, 0]],
            DefectSpec::Divacancy => vec![[0, 0, 0], r1],
            DefectSpec::Microcrack(n) => {
                let lo = -(((n - 1) / 2) as i32);
                (lo..lo + n as i32).map(|k| [k * r1[0], k * r1[1], k * r1[2]]).collect()
            }
        }
    }

    fn added_sites(self, spec: &LatticeSpec) -> Vec<Vec3> {
        match self {
            DefectSpec::Interstitial => vec![Vec3::new(1.0, 1.0, 1.0) * (spec.a0() / 4.0)],
            _ => vec![],
        }
    }

    /// Radius of the smallest origin-centred ball holding every modified site.
    pub fn core_radius(self, spec: &LatticeSpec) -> f64 {
        let removed = self.removed_sites(spec).into_iter().map(|z| spec.position(z).norm());
        let added = self.added_sites(spec).into_iter().map(|x| x.norm());
        removed.chain(added).fold(0.0, f64::max)
    }
}

pub fn apply_defect(ball: &LatticeBall, defect: DefectSpec) -> Result<DefectSiteSet> {
    let spec = ball.spec();
    let removed = defect.removed_sites(spec);
    let added = defect.added_sites(spec);
    let core_radius = defect.core_radius(spec);
    if defect != DefectSpec::None && ball.radius() <= core_radius {
        return Err(Error::Config(format!(
            "domain radius {} does not contain the {defect} core (radius {core_radius})",
            ball.radius()
        )));
    }
    let mut keys = Vec::with_capacity(ball.len() + added.len());
    let mut positions = Vec::with_capacity(ball.len() + added.len());
    for (z, x) in ball.coords().iter().zip(ball.positions()) {
        if !removed.contains(z) {
            keys.push(SiteKey::Lattice(*z));
            positions.push(*x);
        }
    }
    for (i, x) in added.iter().enumerate() {
        keys.push(SiteKey::Extra(i as u32));
        positions.push(*x);
    }
    let index = keys.iter().enumerate().map(|(i, &k)| (k, i)).collect();
    Ok(DefectSiteSet { ball: ball.clone(), defect, keys, positions, index, removed, added, core_radius })
}

impl DefectSiteSet {
    /// Convenience: ball plus defect in one step.
    pub fn build(spec: &LatticeSpec, defect: DefectSpec, radius: f64) -> Result<Self> {
        apply_defect(&generate_ball(spec, radius)?, defect)
    }
    pub fn ball(&self) -> &LatticeBall {
        &self.ball
    }
    pub fn spec(&self) -> &LatticeSpec {
        self.ball.spec()
    }
    pub fn defect(&self) -> DefectSpec {
        self.defect
    }
    pub fn radius(&self) -> f64 {
        self.ball.radius()
    }
    pub fn len(&self) -> usize {
        self.keys.len()
    }
    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
    pub fn keys(&self) -> &[SiteKey] {
        &self.keys
    }
    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }
    pub fn index_of(&self, key: SiteKey) -> Option<usize> {
        self.index.get(&key).copied()
    }
    pub fn removed(&self) -> &[[i32; 3]] {
        &self.removed
    }
    pub fn added(&self) -> &[Vec3] {
        &self.added
    }
    pub fn core_radius(&self) -> f64 {
        self.core_radius
    }
}

/// For every site, the sorted indices of all other sites within `r_cut`.
///
/// Uses cubic cells of edge `r_cut`, so the cost is linear in the number of sites.
pub fn neighbor_table(positions: &[Vec3], r_cut: f64) -> Vec<Vec<usize>> {
    if positions.is_empty() {
        return vec![];
    }
    let mut lo = positions[0];
    for x in positions {
        lo = lo.inf(x);
    }
    let cell_of = |x: &Vec3| -> [i64; 3] {
        let c = (x - lo) / r_cut;
        [c.x.floor() as i64, c.y.floor() as i64, c.z.floor() as i64]
    };
    let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for (i, x) in positions.iter().enumerate() {
        cells.entry(cell_of(x)).or_default().push(i);
    }
    positions
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let c = cell_of(x);
            let mut list = Vec::new();
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        if let Some(members) = cells.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                            for &j in members {
                                if j != i && inside((positions[j] - x).norm_squared(), r_cut) {
                                    list.push(j);
                                }
                            }
                        }
                    }
                }
            }
            list.sort_unstable();
            list
        })
        .collect()
}

/// Map a field on a defective site set to the homogeneous ball it came from.
///
/// Surviving lattice sites are copied, removed sites get the mean of their
/// surviving stencil neighbours, added sites are dropped.
pub fn project_displacement(set: &DefectSiteSet, u: &[Vec3], stencil: &Stencil) -> Vec<Vec3> {
    assert_eq!(u.len(), set.len(), "field does not match the site set");
    let ball = set.ball();
    let mut out = vec![Vec3::zeros(); ball.len()];
    for (i, z) in ball.coords().iter().enumerate() {
        if let Some(j) = set.index_of(SiteKey::Lattice(*z)) {
            out[i] = u[j];
        }
    }
    for z in set.removed() {
        let Some(i) = ball.index_of(*z) else { continue };
        let mut sum = Vec3::zeros();
        let mut count = 0usize;
        for r in stencil.coords() {
            let w = [z[0] + r[0], z[1] + r[1], z[2] + r[2]];
            if let Some(j) = set.index_of(SiteKey::Lattice(w)) {
                sum += u[j];
                count += 1;
            }
        }
        if count > 0 {
            out[i] = sum / count as f64;
        }
    }
    out
}

/// Write positions (optionally displaced) in XYZ format.
pub fn write_xyz<W: Write>(
    mut w: W,
    positions: &[Vec3],
    displacement: Option<&[Vec3]>,
    tag: &str,
    comment: &str,
) -> std::io::Result<()> {
    writeln!(w, "{}", positions.len())?;
    writeln!(w, "{}", comment.replace('\n', " "))?;
    for (i, x) in positions.iter().enumerate() {
        let y = displacement.map_or(*x, |u| x + u[i]);
        writeln!(w, "{tag} {:.17e} {:.17e} {:.17e}", y.x, y.y, y.z)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force(spec: &LatticeSpec, radius: f64) -> Vec<[i32; 3]> {
        let mut out = vec![];
        for i in -8..=8 {
            for j in -8..=8 {
                for k in -8..=8 {
                    if spec.position([i, j, k]).norm() <= radius + 1e-9 {
                        out.push([i, j, k]);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn ball_matches_brute_force() {
        for s in Structure::ALL {
            let spec = LatticeSpec::new(s, 1.0).unwrap();
            for r in [0.0, 0.5, 1.0, 1.7, 2.3, 3.0] {
                let ball = generate_ball(&spec, r).unwrap();
                assert_eq!(ball.coords(), brute_force(&spec, r).as_slice(), "{s} r={r}");
            }
        }
        let spec = LatticeSpec::new(Structure::Bcc, 1.0).unwrap();
        assert_eq!(generate_ball(&spec, 0.0).unwrap().coords(), &[[0, 0, 0]]);
    }

    #[test]
    fn shell_counts() {
        let bcc = LatticeSpec::new(Structure::Bcc, 1.0).unwrap();
        assert_eq!(stencil(&bcc, 0.9).unwrap().len(), 8);
        assert_eq!(stencil(&bcc, 1.0).unwrap().len(), 14);
        assert_eq!(stencil(&bcc, 1.5).unwrap().len(), 26);
        let fcc = LatticeSpec::new(Structure::Fcc, 1.0).unwrap();
        assert_eq!(stencil(&fcc, 0.75).unwrap().len(), 12);
        assert!(stencil(&bcc, 0.5).is_err());
    }

    #[test]
    fn stencils_symmetric_and_spanning() {
        for s in Structure::ALL {
            let spec = LatticeSpec::new(s, 1.3).unwrap();
            for shells in [1.0, 1.2, 1.5] {
                let st = stencil(&spec, shells * spec.nearest_neighbor() * 1.0001).unwrap();
                assert!(st.is_symmetric());
                assert!(st.spans_lattice(), "{s}");
            }
        }
        assert!(!spans_integer_lattice(&[[2, 0, 0], [0, 1, 0], [0, 0, 1], [-2, 0, 0]]));
        assert!(spans_integer_lattice(&[[2, 0, 0], [3, 0, 0], [0, 1, 0], [0, 0, 1]]));
    }

    #[test]
    fn defects() {
        let spec = LatticeSpec::new(Structure::Bcc, 1.0).unwrap();
        let ball = generate_ball(&spec, 3.0).unwrap();
        let vac = apply_defect(&ball, DefectSpec::Vacancy).unwrap();
        assert_eq!(vac.len(), ball.len() - 1);
        assert!(vac.index_of(SiteKey::Lattice([0, 0, 0])).is_none());

        let int = apply_defect(&ball, DefectSpec::Interstitial).unwrap();
        assert_eq!(int.len(), ball.len() + 1);
        let x = int.positions()[int.index_of(SiteKey::Extra(0)).unwrap()];
        assert!((x - Vec3::new(0.25, 0.25, 0.25)).norm() < 1e-15);

        let crack = apply_defect(&ball, DefectSpec::Microcrack(5)).unwrap();
        assert_eq!(crack.removed().len(), 5);
        let pts: Vec<Vec3> = crack.removed().iter().map(|&z| spec.position(z)).collect();
        let dir = (pts[1] - pts[0]).normalize();
        for p in &pts {
            let off = p - pts[0];
            assert!((off - dir * off.dot(&dir)).norm() < 1e-12, "not collinear");
        }
        for p in pts.windows(2) {
            assert!(((p[1] - p[0]).norm() - spec.nearest_neighbor()).abs() < 1e-12);
        }

        let di = apply_defect(&ball, DefectSpec::Divacancy).unwrap();
        let gap = spec.position(di.removed()[1]).norm();
        assert!((gap - spec.nearest_neighbor()).abs() < 1e-12);

        let small = generate_ball(&spec, 1.0).unwrap();
        assert!(apply_defect(&small, DefectSpec::Microcrack(7)).is_err());
    }

    #[test]
    fn defect_names_roundtrip() {
        for d in [
            DefectSpec::None,
            DefectSpec::Vacancy,
            DefectSpec::Divacancy,
            DefectSpec::Interstitial,
            DefectSpec::Microcrack(5),
            DefectSpec::Microcrack(7),
            DefectSpec::Microcrack(3),
        ] {
            assert_eq!(d.to_string().parse::<DefectSpec>().unwrap(), d);
        }
        assert!("crater".parse::<DefectSpec>().is_err());
    }

    #[test]
    fn neighbor_lists() {
        let spec = LatticeSpec::new(Structure::Bcc, 1.0).unwrap();
        let st = stencil(&spec, 1.45).unwrap();
        let set = DefectSiteSet::build(&spec, DefectSpec::Vacancy, 3.5).unwrap();
        let nb = neighbor_table(set.positions(), 1.45);
        for (i, list) in nb.iter().enumerate() {
            for &j in list {
                assert!(nb[j].binary_search(&i).is_ok());
            }
        }
        // a site touching the vacancy lost exactly one neighbour
        let i = set.index_of(SiteKey::Lattice([1, 0, 0])).unwrap();
        assert_eq!(nb[i].len(), st.len() - 1);
        // away from the vacancy and the rim the offsets are the stencil
        let far = (0..set.len())
            .find(|&i| {
                let r = set.positions()[i].norm();
                r > 1.5 && r + 1.5 < 3.5
            })
            .unwrap();
        let x = set.positions()[far];
        let mut got: Vec<_> =
            nb[far].iter().map(|&j| spec.coords_of(&(set.positions()[j] - x)).unwrap()).collect();
        got.sort();
        let mut want = st.coords().to_vec();
        want.sort();
        assert_eq!(got, want);
    }

    #[test]
    fn projection() {
        let spec = LatticeSpec::new(Structure::Bcc, 1.0).unwrap();
        let st = stencil(&spec, 1.45).unwrap();
        let set = DefectSiteSet::build(&spec, DefectSpec::Vacancy, 3.0).unwrap();
        let c = Vec3::new(0.1, -0.2, 0.3);
        let proj = project_displacement(&set, &vec![c; set.len()], &st);
        assert!(proj.iter().all(|p| (p - c).norm() < 1e-15));

        let f = Mat3::new(0.3, 0.1, -0.2, 0.05, 0.4, 0.0, 0.1, -0.3, 0.2);
        let u: Vec<Vec3> = set.positions().iter().map(|x| f * x).collect();
        let proj = project_displacement(&set, &u, &st);
        let o = set.ball().index_of([0, 0, 0]).unwrap();
        assert!(proj[o].norm() < 1e-14);

        let clean = DefectSiteSet::build(&spec, DefectSpec::None, 3.0).unwrap();
        let u: Vec<Vec3> = clean.positions().iter().map(|x| f * x).collect();
        assert_eq!(project_displacement(&clean, &u, &st), u);
    }

    #[test]
    fn xyz_export() {
        let spec = LatticeSpec::new(Structure::Sc, 1.0).unwrap();
        let ball = generate_ball(&spec, 1.0).unwrap();
        let mut buf = Vec::new();
        write_xyz(&mut buf, ball.positions(), None, "W", "sc ball").unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "7");
        assert_eq!(lines.len(), 9);
        assert!(lines[2].starts_with("W "));
    }
}
