//! Convergence studies: every test radius and order against one reference.

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache::ReferenceCache;
use crate::config::StudyConfig;
use crate::driver::{
    compute_reference, energy_error, extend_field, geometry_error, run_orders, solution_moments, slope_fit,
    strain_envelope, Model, MomentError, OrderRun, Reference, SlopeFit,
};
use crate::error::{Error, Result};
use crate::greens::KernelCache;
use crate::lattice::{project_displacement, DefectSpec};
use crate::moments::{CoeffsA, MomentSet};
use crate::solver::Boundary;

/// Moments of the reference whose norm falls below
/// `max(1e-14, MOMENT_NOISE · |I₁| · R^(k−1))` are treated as zero. Symmetry
/// forces some moments to vanish (`I₂` of a centrosymmetric defect) and the
/// solver residual leaves a floor that scales with the sum's lever arm.
pub const MOMENT_NOISE: f64 = 1e-9;

/// One (radius, order) entry of a study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub defect: DefectSpec,
    /// Test radius in units of a0.
    pub radius: f64,
    pub order: usize,
    pub geometry_error: f64,
    pub energy_error: f64,
    pub moment_errors: [MomentError; 3],
    pub iterations: usize,
    pub seconds: f64,
    pub residual: f64,
    /// Coefficients of the boundary predictor this solve was clamped to.
    pub boundary_coeffs: CoeffsA,
    /// Force moments of the solution.
    pub moments: MomentSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderFit {
    pub order: usize,
    pub fit: SlopeFit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentFit {
    /// Moment index `k` of `ME_k`.
    pub moment: usize,
    pub order: usize,
    pub fit: SlopeFit,
}

/// Log-log slopes against the test radius over the fit window.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Fits {
    /// Radii (units of a0) included in the fits.
    pub window: Vec<f64>,
    pub geometry: Vec<OrderFit>,
    pub energy: Vec<OrderFit>,
    pub moments: Vec<MomentFit>,
    /// Exponent of energy error against geometry error over all rows in the window.
    pub energy_vs_geometry: Option<SlopeFit>,
}

impl Fits {
    pub fn geometry_slope(&self, order: usize) -> Option<f64> {
        self.geometry.iter().find(|f| f.order == order).map(|f| f.fit.slope)
    }

    pub fn moment_slope(&self, moment: usize, order: usize) -> Option<f64> {
        self.moments.iter().find(|f| f.moment == moment && f.order == order).map(|f| f.fit.slope)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSummary {
    /// Radius in units of a0.
    pub radius: f64,
    pub sites: usize,
    pub energy: f64,
    pub residual: f64,
    pub iterations: usize,
    pub moments: MomentSet,
    /// Coefficients of the reference's own far field.
    pub coeffs: CoeffsA,
    /// `|I₁ at R − I₁ at 0.8 R| / |I₁ at R|`.
    pub moment_drift: f64,
    /// `(radius / a0, max |Du|)` per bin of width a0.
    pub strain_envelope: Vec<(f64, f64)>,
    pub strain_slope: Option<SlopeFit>,
    pub from_cache: bool,
}

/// Everything a study produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRecord {
    pub config: StudyConfig,
    pub config_hash: String,
    pub a0: f64,
    pub reference: Option<ReferenceSummary>,
    pub rows: Vec<StudyRow>,
    pub fits: Fits,
    /// Set when a solve failed; the rows hold whatever finished.
    pub failure: Option<String>,
}

impl ConvergenceRecord {
    pub fn row(&self, radius: f64, order: usize) -> Option<&StudyRow> {
        self.rows.iter().find(|r| r.radius == radius && r.order == order)
    }
}

/// A study that stopped early; `record` holds the partial results.
#[derive(Debug)]
pub struct StudyFailure {
    pub record: ConvergenceRecord,
    pub error: Error,
}

/// Load the reference for `cfg` from `cache`, or solve for it and store it.
pub fn reference_solution(
    model: &Model,
    kernels: &KernelCache,
    cfg: &StudyConfig,
    cache: Option<&ReferenceCache>,
) -> Result<(Reference, bool)> {
    if let Some(hit) = cache.and_then(|c| c.load(model, cfg)) {
        log::info!("reference loaded from cache");
        return Ok((hit, true));
    }
    log::info!("solving reference problem at R = {} a0", cfg.study.reference_radius);
    let reference = compute_reference(model, kernels, cfg)?;
    if let Some(c) = cache {
        c.store(model, cfg, &reference)?;
    }
    Ok((reference, false))
}

pub fn summarize_reference(model: &Model, reference: &Reference, from_cache: bool) -> Result<ReferenceSummary> {
    let a0 = model.a0();
    let r = reference.radius();
    let set = reference.domain.sites();
    let inner = solution_moments(model, set, &reference.u, 0.8 * r)?;
    let drift = (inner.i1.as_flattened().iter().zip(reference.moments.i1.as_flattened()))
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt()
        / reference.moments.norm(1).max(f64::MIN_POSITIVE);
    let projected = project_displacement(set, &reference.u, &model.stencil);
    let envelope: Vec<(f64, f64)> = strain_envelope(set.ball(), &model.stencil, &projected, a0)
        .into_iter()
        .map(|(x, m)| (x / a0, m))
        .collect();
    // the decay is asymptotic: fit between a few spacings and the clamped ring
    let tail: Vec<(f64, f64)> = envelope.iter().copied().filter(|(x, _)| *x >= 3.0 && *x <= 0.75 * r / a0).collect();
    Ok(ReferenceSummary {
        radius: r / a0,
        sites: reference.u.len(),
        energy: reference.report.energy,
        residual: reference.report.residual,
        iterations: reference.report.iterations(),
        moments: reference.moments,
        coeffs: reference.coeffs,
        moment_drift: drift,
        strain_slope: slope_fit(&tail).ok(),
        strain_envelope: envelope,
        from_cache,
    })
}

/// `ME_k` with the noise-aware zero test described at [`MOMENT_NOISE`].
pub fn moment_errors_against(test: &MomentSet, reference: &MomentSet, radius: f64) -> [MomentError; 3] {
    let diff = test.scaled_sum(1.0, reference, -1.0);
    let scale = reference.norm(1);
    [1, 2, 3].map(|k| {
        let floor = (MOMENT_NOISE * scale * radius.powi(k as i32 - 1)).max(crate::driver::DEGENERATE_MOMENT);
        let (d, r) = (diff.norm(k), reference.norm(k));
        if r < floor {
            MomentError { value: d, absolute: true }
        } else {
            MomentError { value: d / r, absolute: false }
        }
    })
}

fn rows_for_run(
    model: &Model,
    kernels: &KernelCache,
    cfg: &StudyConfig,
    reference: &Reference,
    run: &OrderRun,
) -> Result<Vec<StudyRow>> {
    let ref_set = reference.domain.sites();
    let r_dom = reference.radius();
    let mut rows = Vec::new();
    for sol in run.orders.iter().filter(|s| cfg.study.orders.contains(&s.order)) {
        let bound = sol.predictor.bind(kernels);
        let outside = if sol.predictor.is_zero() { Boundary::Zero } else { Boundary::Predictor(&bound) };
        let ext = extend_field(ref_set, run.domain.sites(), &sol.u, outside)?;
        rows.push(StudyRow {
            defect: cfg.defect,
            radius: run.radius() / model.a0(),
            order: sol.order,
            geometry_error: geometry_error(ref_set, &model.stencil, &ext, &reference.u, r_dom - model.cutoff()),
            energy_error: energy_error(&reference.domain, &ext, &reference.u, r_dom)?,
            moment_errors: moment_errors_against(&sol.moments, &reference.moments, r_dom),
            iterations: sol.report.iterations(),
            seconds: if cfg.output.deterministic { 0.0 } else { sol.seconds },
            residual: sol.report.residual,
            boundary_coeffs: *sol.predictor.coeffs(),
            moments: sol.moments,
        });
    }
    Ok(rows)
}

pub fn fit_rows(cfg: &StudyConfig, rows: &[StudyRow]) -> Fits {
    let window: Vec<f64> = cfg.study.radii.iter().skip(cfg.study.fit_skip).copied().collect();
    let in_window = |r: &&StudyRow| window.contains(&r.radius);
    let series = |order: usize, f: &dyn Fn(&StudyRow) -> f64| -> Option<SlopeFit> {
        let pts: Vec<(f64, f64)> = rows.iter().filter(in_window).filter(|r| r.order == order).map(|r| (r.radius, f(r))).collect();
        slope_fit(&pts).ok()
    };
    let mut fits = Fits { window: window.clone(), ..Default::default() };
    for &order in &cfg.study.orders {
        if let Some(fit) = series(order, &|r| r.geometry_error) {
            fits.geometry.push(OrderFit { order, fit });
        }
        if let Some(fit) = series(order, &|r| r.energy_error) {
            fits.energy.push(OrderFit { order, fit });
        }
        for moment in 1..=3 {
            if let Some(fit) = series(order, &|r| r.moment_errors[moment - 1].value) {
                fits.moments.push(MomentFit { moment, order, fit });
            }
        }
    }
    let pairs: Vec<(f64, f64)> = rows.iter().filter(in_window).map(|r| (r.geometry_error, r.energy_error)).collect();
    fits.energy_vs_geometry = slope_fit(&pairs).ok();
    fits
}

/// Run the full sweep. Independent radii run in parallel on the current
/// rayon pool; the stages of one radius are sequential.
pub fn run_study(cfg: &StudyConfig, cache: Option<&ReferenceCache>) -> std::result::Result<ConvergenceRecord, StudyFailure> {
    let mut record = ConvergenceRecord {
        config: cfg.clone(),
        config_hash: cfg.content_hash(),
        a0: f64::NAN,
        reference: None,
        rows: vec![],
        fits: Fits::default(),
        failure: None,
    };
    macro_rules! bail {
        ($e:expr) => {{
            let error: Error = $e;
            record.failure = Some(error.to_string());
            return Err(StudyFailure { record, error });
        }};
    }
    if let Err(e) = cfg.validate() {
        bail!(e);
    }
    let model = match Model::build(cfg) {
        Ok(m) => m,
        Err(e) => bail!(e),
    };
    record.a0 = model.a0();
    let a0 = model.a0();
    let start = Instant::now();
    let kernels = match model.kernel_cache(cfg.study.radii[0] * a0, cfg.study.reference_radius * a0) {
        Ok(k) => k,
        Err(e) => bail!(e),
    };
    log::info!("kernel table: {} orbits in {:.1?}", kernels.len(), start.elapsed());
    let (reference, from_cache) = match reference_solution(&model, &kernels, cfg, cache) {
        Ok(r) => r,
        Err(e) => bail!(e),
    };
    match summarize_reference(&model, &reference, from_cache) {
        Ok(s) => record.reference = Some(s),
        Err(e) => bail!(e),
    }
    let max_order = *cfg.study.orders.iter().max().expect("validated non-empty");
    let results: Vec<(Vec<StudyRow>, Option<Error>)> = cfg
        .study
        .radii
        .par_iter()
        .map(|&r| {
            log::info!("test radius {r} a0");
            let (run, err) = match run_orders(&model, &kernels, r * a0, max_order, &cfg.solver) {
                Ok(run) => (run, None),
                Err(f) => (f.partial, Some(f.error)),
            };
            match rows_for_run(&model, &kernels, cfg, &reference, &run) {
                Ok(rows) => (rows, err),
                Err(e) => (vec![], Some(err.unwrap_or(e))),
            }
        })
        .collect();
    let mut first_error = None;
    for (rows, err) in results {
        record.rows.extend(rows);
        if first_error.is_none() {
            first_error = err;
        }
    }
    record.fits = fit_rows(cfg, &record.rows);
    if let Some(e) = first_error {
        bail!(e);
    }
    Ok(record)
}

/// `f64` in the CSV format: scientific, 17 significant digits.
pub fn sci(x: f64) -> String {
    format!("{x:.16e}")
}

pub const CSV_HEADER: &str = "defect,R,order,geom_err,energy_err,ME_1,ME_2,ME_3,iters,seconds";

pub fn write_csv<W: Write>(mut w: W, rows: &[StudyRow]) -> std::io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            r.defect,
            sci(r.radius),
            r.order,
            sci(r.geometry_error),
            sci(r.energy_error),
            sci(r.moment_errors[0].value),
            sci(r.moment_errors[1].value),
            sci(r.moment_errors[2].value),
            r.iterations,
            sci(r.seconds)
        )?;
    }
    Ok(())
}

/// Moment tensors of the reference and of every row, index order `[k][j][m][n]`
/// with `k` the force component and the rest position factors.
pub fn moments_json(record: &ConvergenceRecord) -> serde_json::Value {
    serde_json::json!({
        "index_order": "I1[k][j], I2[k][j][m], I3[k][j][m][n]; k = force component, j, m, n = position factors",
        "reference": record.reference.as_ref().map(|r| r.moments),
        "runs": record.rows.iter().map(|r| serde_json::json!({
            "R": r.radius, "order": r.order, "moments": r.moments,
        })).collect::<Vec<_>>(),
    })
}

/// Predictor coefficients of every row and of the reference far field.
pub fn predictors_json(record: &ConvergenceRecord) -> serde_json::Value {
    serde_json::json!({
        "index_order": "a10[k][j], a11[k][j], a20[k][j][m], a30[k][j][m][n]; k = Green's function column",
        "reference": record.reference.as_ref().map(|r| r.coeffs),
        "runs": record.rows.iter().map(|r| serde_json::json!({
            "R": r.radius, "order": r.order, "coeffs": r.boundary_coeffs,
        })).collect::<Vec<_>>(),
    })
}
