//! On-disk cache of reference solutions.
//!
//! Each entry is a binary blob `reference-<hash>.bin` plus a JSON sidecar
//! `reference-<hash>.json`. The hash is [`StudyConfig::content_hash`]. The blob
//! layout (little endian) is
//!
//! ```text
//! magic "FFREFBLB" | version u32 | site count u64
//! | displacement (3 f64 per site)
//! | moments I1, I2, I3 (9 + 27 + 81 f64, row-major [k][j][m][n])
//! | predictor coefficients a10, a11, a20, a30 (9 + 9 + 27 + 81 f64) | core radius f64
//! | solve report: lbfgs, newton, cg (u64 each), energy, residual (f64)
//! | SHA-256 of everything above
//! ```
//!
//! Anything that fails to decode, including a checksum mismatch, is treated
//! as a miss so the caller recomputes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::StudyConfig;
use crate::driver::{Model, Reference};
use crate::error::Result;
use crate::lattice::Vec3;
use crate::moments::{CoeffsA, MomentSet};
use crate::predictor::PredictorField;
use crate::solver::SolveReport;

const MAGIC: &[u8; 8] = b"FFREFBLB";
pub const CACHE_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct ReferenceCache {
    dir: PathBuf,
}

#[derive(Serialize)]
struct Sidecar<'a> {
    version: u32,
    hash: &'a str,
    a0: f64,
    reference_radius: f64,
    sites: usize,
    energy: f64,
    residual: f64,
    moments: &'a MomentSet,
    coeffs: &'a CoeffsA,
    config: serde_json::Value,
}

impl ReferenceCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        ReferenceCache { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn blob_path(&self, hash: &str) -> PathBuf {
        self.dir.join(format!("reference-{hash}.bin"))
    }

    pub fn sidecar_path(&self, hash: &str) -> PathBuf {
        self.dir.join(format!("reference-{hash}.json"))
    }

    /// The cached reference for `cfg`, or `None` on a miss or a damaged entry.
    pub fn load(&self, model: &Model, cfg: &StudyConfig) -> Option<Reference> {
        let hash = cfg.content_hash();
        let bytes = fs::read(self.blob_path(&hash)).ok()?;
        let decoded = decode(&bytes);
        if decoded.is_none() {
            log::warn!("reference cache entry {hash} is damaged; recomputing");
            return None;
        }
        let (u, moments, predictor, report) = decoded?;
        let domain = match model.domain(cfg.study.reference_radius * model.a0()) {
            Ok(d) => d,
            Err(e) => {
                log::warn!("cannot rebuild reference domain: {e}");
                return None;
            }
        };
        if domain.len() != u.len() {
            log::warn!("reference cache entry {hash} has {} sites, domain has {}; recomputing", u.len(), domain.len());
            return None;
        }
        Some(Reference { domain, coeffs: crate::moments::coeffs_a(&moments), u, predictor, moments, report })
    }

    pub fn store(&self, model: &Model, cfg: &StudyConfig, reference: &Reference) -> Result<()> {
        let hash = cfg.content_hash();
        fs::create_dir_all(&self.dir)?;
        let blob = encode(reference);
        write_atomic(&self.blob_path(&hash), &blob)?;
        let mut config = serde_json::to_value(cfg)?;
        if let Some(map) = config.as_object_mut() {
            map.remove("output");
        }
        let sidecar = Sidecar {
            version: CACHE_VERSION,
            hash: &hash,
            a0: model.a0(),
            reference_radius: reference.radius(),
            sites: reference.u.len(),
            energy: reference.report.energy,
            residual: reference.report.residual,
            moments: &reference.moments,
            coeffs: &reference.coeffs,
            config,
        };
        write_atomic(&self.sidecar_path(&hash), serde_json::to_string_pretty(&sidecar)?.as_bytes())?;
        Ok(())
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn flat_moments(m: &MomentSet) -> Vec<f64> {
    let mut v = Vec::with_capacity(117);
    v.extend(m.i1.iter().flatten());
    v.extend(m.i2.iter().flatten().flatten());
    v.extend(m.i3.iter().flatten().flatten().flatten());
    v
}

fn flat_coeffs(a: &CoeffsA) -> Vec<f64> {
    let mut v = Vec::with_capacity(126);
    v.extend(a.a10.iter().flatten());
    v.extend(a.a11.iter().flatten());
    v.extend(a.a20.iter().flatten().flatten());
    v.extend(a.a30.iter().flatten().flatten().flatten());
    v
}

fn encode(r: &Reference) -> Vec<u8> {
    let mut b = Vec::with_capacity(32 + 24 * r.u.len() + 2048);
    b.extend_from_slice(MAGIC);
    b.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    b.extend_from_slice(&(r.u.len() as u64).to_le_bytes());
    for v in &r.u {
        for c in v.iter() {
            b.extend_from_slice(&c.to_le_bytes());
        }
    }
    for x in flat_moments(&r.moments).into_iter().chain(flat_coeffs(r.predictor.coeffs())) {
        b.extend_from_slice(&x.to_le_bytes());
    }
    b.extend_from_slice(&r.predictor.core_radius().to_le_bytes());
    for n in [r.report.lbfgs_iterations, r.report.newton_steps, r.report.cg_iterations] {
        b.extend_from_slice(&(n as u64).to_le_bytes());
    }
    b.extend_from_slice(&r.report.energy.to_le_bytes());
    b.extend_from_slice(&r.report.residual.to_le_bytes());
    let digest = Sha256::digest(&b);
    b.extend_from_slice(&digest);
    b
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        if self.bytes.len() < n {
            return None;
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Some(head)
    }
    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
    fn f64(&mut self) -> Option<f64> {
        Some(f64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
    fn fill(&mut self, out: &mut [f64]) -> Option<()> {
        for x in out {
            *x = self.f64()?;
        }
        Some(())
    }
}

type Decoded = (Vec<Vec3>, MomentSet, PredictorField, SolveReport);

fn decode(bytes: &[u8]) -> Option<Decoded> {
    if bytes.len() < 32 + MAGIC.len() {
        return None;
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return None;
    }
    let mut r = Reader { bytes: body };
    if r.take(8)? != MAGIC {
        return None;
    }
    if u32::from_le_bytes(r.take(4)?.try_into().ok()?) != CACHE_VERSION {
        return None;
    }
    let n = usize::try_from(r.u64()?).ok()?;
    if n.checked_mul(24)? > body.len() {
        return None;
    }
    let mut u = Vec::with_capacity(n);
    for _ in 0..n {
        u.push(Vec3::new(r.f64()?, r.f64()?, r.f64()?));
    }
    let mut m = MomentSet::default();
    r.fill(m.i1.as_flattened_mut())?;
    r.fill(m.i2.as_flattened_mut().as_flattened_mut())?;
    r.fill(m.i3.as_flattened_mut().as_flattened_mut().as_flattened_mut())?;
    let mut a = CoeffsA::default();
    r.fill(a.a10.as_flattened_mut())?;
    r.fill(a.a11.as_flattened_mut())?;
    r.fill(a.a20.as_flattened_mut().as_flattened_mut())?;
    r.fill(a.a30.as_flattened_mut().as_flattened_mut().as_flattened_mut())?;
    let core = r.f64()?;
    let report = SolveReport {
        lbfgs_iterations: r.u64()? as usize,
        newton_steps: r.u64()? as usize,
        cg_iterations: r.u64()? as usize,
        energy: r.f64()?,
        residual: r.f64()?,
        ..Default::default()
    };
    if !r.bytes.is_empty() {
        return None;
    }
    Some((u, m, PredictorField::build(a, core), report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::DefectSpec;

    #[test]
    fn roundtrip_is_bit_identical_and_damage_is_a_miss() {
        let mut cfg = StudyConfig::new(DefectSpec::Vacancy);
        cfg.study.radii = vec![2.0];
        cfg.study.reference_radius = 4.0;
        let model = Model::build(&cfg).unwrap();
        let kc = model.kernel_cache(2.0, 4.0 * model.a0()).unwrap();
        let reference = crate::driver::compute_reference(&model, &kc, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let cache = ReferenceCache::new(dir.path());
        assert!(cache.load(&model, &cfg).is_none());
        cache.store(&model, &cfg, &reference).unwrap();
        let back = cache.load(&model, &cfg).unwrap();
        let bits = |u: &[Vec3]| u.iter().flat_map(|v| v.iter().map(|c| c.to_bits())).collect::<Vec<_>>();
        assert_eq!(bits(&back.u), bits(&reference.u));
        assert_eq!(back.moments, reference.moments);
        assert_eq!(back.predictor, reference.predictor);
        assert_eq!(back.coeffs, reference.coeffs);
        let sidecar: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(cache.sidecar_path(&cfg.content_hash())).unwrap()).unwrap();
        assert_eq!(sidecar["version"], CACHE_VERSION);

        let path = cache.blob_path(&cfg.content_hash());
        let mut bytes = fs::read(&path).unwrap();
        bytes[40] ^= 1;
        fs::write(&path, &bytes).unwrap();
        assert!(cache.load(&model, &cfg).is_none());
        fs::write(&path, &bytes[..100]).unwrap();
        assert!(cache.load(&model, &cfg).is_none());

        let mut other = cfg.clone();
        other.solver.tolerance = 1e-9;
        assert!(cache.load(&model, &other).is_none());
    }
}
