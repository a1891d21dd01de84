//! The moment iteration on one domain, the reference solution, and the error
//! metrics of a convergence study.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{ModelKind, StudyConfig};
use crate::error::{Error, Result};
use crate::greens::{KernelCache, QuadratureSpec, SymbolData};
use crate::lattice::{project_displacement, stencil, DefectSiteSet, DefectSpec, LatticeBall, LatticeSpec, Stencil, Vec3};
use crate::model::{Displacement, Domain, LinearOperator};
use crate::moments::{coeffs_a, truncated_moments, CoeffsA, MomentSet};
use crate::potential::{calibrate_equilibrium, force_constants, ToyEam};
use crate::predictor::PredictorField;
use crate::solver::{relax, Boundary, SolveReport, SolveSettings};

/// Everything derived from the lattice and potential sections of a config.
#[derive(Clone, Debug)]
pub struct Model {
    pub spec: LatticeSpec,
    pub potential: ToyEam,
    pub stencil: Stencil,
    pub operator: LinearOperator,
    pub symbol: SymbolData,
    pub quadrature: QuadratureSpec,
    pub defect: DefectSpec,
}

impl Model {
    pub fn build(cfg: &StudyConfig) -> Result<Model> {
        if cfg.model != ModelKind::ToyEam {
            return Err(Error::Config("key `model`: defect solves need the toy-eam model".into()));
        }
        let [lo, hi] = cfg.lattice.a0_bracket;
        let a0 = match cfg.lattice.a0 {
            Some(a0) => a0,
            None => calibrate_equilibrium(&cfg.potential, cfg.lattice.structure, (lo, hi))?,
        };
        let spec = LatticeSpec::new(cfg.lattice.structure, a0)?;
        let potential = ToyEam::new(cfg.potential.clone(), a0)?;
        let stencil = stencil(&spec, cfg.potential.cutoff)?;
        let fc = force_constants(&potential, &stencil)?;
        let operator = LinearOperator::new(&spec, &fc);
        let symbol = SymbolData::new(&fc, spec.cell_volume())?;
        let quadrature = QuadratureSpec::new(cfg.greens.quadrature)?;
        Ok(Model { spec, potential, stencil, operator, symbol, quadrature, defect: cfg.defect })
    }

    pub fn a0(&self) -> f64 {
        self.spec.a0()
    }

    pub fn cutoff(&self) -> f64 {
        self.potential.cutoff()
    }

    /// Domain with free radius `radius` (absolute length).
    pub fn domain(&self, radius: f64) -> Result<Domain> {
        Domain::new(&self.spec, self.potential.clone(), self.defect, radius)
    }

    /// Kernel table covering every site of a domain of radius `outer` that lies
    /// beyond `inner`, i.e. every point where a predictor can be needed.
    pub fn kernel_cache(&self, inner: f64, outer: f64) -> Result<KernelCache> {
        let mut cache = KernelCache::new(&self.symbol, self.quadrature);
        let ball = crate::lattice::generate_ball(&self.spec, outer + 2.0 * self.cutoff())?;
        let pts: Vec<Vec3> = ball.positions().iter().filter(|x| x.norm() > inner).copied().collect();
        cache.prepare(&pts)?;
        Ok(cache)
    }
}

/// One stage of the moment iteration.
#[derive(Clone, Debug)]
pub struct OrderSolution {
    pub order: usize,
    /// Total displacement on the domain sites; clamped sites hold the predictor.
    pub u: Displacement,
    /// Boundary predictor of this stage (zero at order 0).
    pub predictor: PredictorField,
    /// Truncated force moments of this solution.
    pub moments: MomentSet,
    pub report: SolveReport,
    pub seconds: f64,
}

impl OrderSolution {
    /// Coefficients of the predictor that the next stage would use.
    pub fn next_coeffs(&self) -> CoeffsA {
        coeffs_a(&self.moments)
    }
}

#[derive(Clone, Debug)]
pub struct OrderRun {
    pub domain: Domain,
    pub orders: Vec<OrderSolution>,
}

impl OrderRun {
    pub fn radius(&self) -> f64 {
        self.domain.free_radius()
    }

    pub fn order(&self, order: usize) -> Option<&OrderSolution> {
        self.orders.iter().find(|o| o.order == order)
    }
}

/// A solve failed part-way; `partial` holds the stages that finished.
#[derive(Debug)]
pub struct StageFailure {
    pub partial: OrderRun,
    pub stage: usize,
    pub error: Error,
}

/// Projected field and its truncated moments for a solution on `domain`.
pub fn solution_moments(model: &Model, set: &DefectSiteSet, u: &[Vec3], radius: f64) -> Result<MomentSet> {
    let projected = project_displacement(set, u, &model.stencil);
    truncated_moments(&model.operator, set.ball(), &projected, radius)
}

/// Relax on `B_radius` with zero boundary, then twice rebuild the boundary
/// predictor from the current solution's moments and relax again, stopping
/// after stage `max_order`.
pub fn run_orders(
    model: &Model,
    cache: &KernelCache,
    radius: f64,
    max_order: usize,
    settings: &SolveSettings,
) -> std::result::Result<OrderRun, StageFailure> {
    let domain = match model.domain(radius) {
        Ok(d) => d,
        Err(error) => {
            let empty = Domain::new(&model.spec, model.potential.clone(), DefectSpec::None, radius.max(model.a0()));
            return Err(StageFailure {
                partial: OrderRun { domain: empty.expect("defect-free domain always builds"), orders: vec![] },
                stage: 0,
                error,
            });
        }
    };
    let mut run = OrderRun { domain, orders: Vec::with_capacity(max_order + 1) };
    let core = run.domain.sites().core_radius();
    for order in 0..=max_order.min(2) {
        let start = Instant::now();
        let stage = (|| -> Result<OrderSolution> {
            let (predictor, initial) = match run.orders.last() {
                None => (PredictorField::zero(), vec![Vec3::zeros(); run.domain.len()]),
                Some(prev) => (PredictorField::build(prev.next_coeffs(), core), prev.u.clone()),
            };
            let bound = predictor.bind(cache);
            let boundary = if predictor.is_zero() { Boundary::Zero } else { Boundary::Predictor(&bound) };
            let out = relax(&run.domain, boundary, settings, &initial)?;
            let moments = solution_moments(model, run.domain.sites(), &out.u, radius)?;
            Ok(OrderSolution {
                order,
                u: out.u,
                predictor,
                moments,
                report: out.report,
                seconds: start.elapsed().as_secs_f64(),
            })
        })();
        match stage {
            Ok(s) => run.orders.push(s),
            Err(error) => return Err(StageFailure { partial: run, stage: order, error }),
        }
    }
    Ok(run)
}

/// The highest-order solution on the reference domain.
#[derive(Clone, Debug)]
pub struct Reference {
    pub domain: Domain,
    pub u: Displacement,
    pub predictor: PredictorField,
    pub moments: MomentSet,
    pub coeffs: CoeffsA,
    pub report: SolveReport,
}

impl Reference {
    pub fn radius(&self) -> f64 {
        self.domain.free_radius()
    }

    pub fn from_run(run: OrderRun) -> Result<Reference> {
        let OrderRun { domain, orders } = run;
        let last = orders.into_iter().last().ok_or_else(|| Error::Domain("reference run produced no solution".into()))?;
        Ok(Reference {
            domain,
            coeffs: coeffs_a(&last.moments),
            u: last.u,
            predictor: last.predictor,
            moments: last.moments,
            report: last.report,
        })
    }
}

/// Solve the order-2 problem at the reference radius.
pub fn compute_reference(model: &Model, cache: &KernelCache, cfg: &StudyConfig) -> Result<Reference> {
    let radius = cfg.study.reference_radius * model.a0();
    let run = run_orders(model, cache, radius, 2, &cfg.solver).map_err(|f| f.error)?;
    Reference::from_run(run)
}

/// `u` on `source` transferred to the sites of `target`; sites missing from
/// `source` take `outside(x)`.
pub fn extend_field(target: &DefectSiteSet, source: &DefectSiteSet, u: &[Vec3], outside: Boundary<'_>) -> Result<Displacement> {
    target
        .keys()
        .iter()
        .zip(target.positions())
        .map(|(k, x)| match source.index_of(*k) {
            Some(i) => Ok(u[i]),
            None => outside.value(x),
        })
        .collect()
}

/// `‖D(u_test − u_ref)‖_ℓ² over sites with |ℓ| ≤ radius`, both fields given on
/// `set` and projected to its homogeneous ball first.
pub fn geometry_error(set: &DefectSiteSet, stencil: &Stencil, u_test: &[Vec3], u_ref: &[Vec3], radius: f64) -> f64 {
    let diff: Vec<Vec3> = u_test.iter().zip(u_ref).map(|(a, b)| a - b).collect();
    let w = project_displacement(set, &diff, stencil);
    let ball = set.ball();
    let mut sum = 0.0;
    for (i, x) in ball.positions().iter().enumerate() {
        if x.norm() > radius * (1.0 + 1e-12) {
            continue;
        }
        sum += stencil_difference_sq(ball, stencil, &w, i);
    }
    sum.sqrt()
}

fn stencil_difference_sq(ball: &LatticeBall, stencil: &Stencil, u: &[Vec3], i: usize) -> f64 {
    let z = ball.coords()[i];
    let mut s = 0.0;
    for r in stencil.coords() {
        if let Some(j) = ball.index_of([z[0] + r[0], z[1] + r[1], z[2] + r[2]]) {
            s += (u[j] - u[i]).norm_squared();
        }
    }
    s
}

/// `|E(u_test) − E(u_ref) − δE(u_ref)[u_test − u_ref]|` over `B_radius`.
///
/// On the free sites of the reference the linear term vanishes; what it
/// removes is the first-order contribution of sites near the truncation
/// sphere, which would otherwise dominate the quadratic error.
pub fn energy_error(domain: &Domain, u_test: &[Vec3], u_ref: &[Vec3], radius: f64) -> Result<f64> {
    Ok(domain.energy_remainder(u_ref, u_test, radius)?.abs())
}

/// Reference moments below this norm count as zero.
pub const DEGENERATE_MOMENT: f64 = 1e-14;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MomentError {
    pub value: f64,
    /// The reference moment vanished, so `value` is an absolute error.
    pub absolute: bool,
}

/// `ME_k = |I_k[test] − I_k[ref]| / |I_k[ref]|`, `k = 1, 2, 3`.
pub fn moment_errors(test: &MomentSet, reference: &MomentSet) -> [MomentError; 3] {
    let diff = test.scaled_sum(1.0, reference, -1.0);
    [1, 2, 3].map(|k| {
        let d = diff.norm(k);
        let r = reference.norm(k);
        if r < DEGENERATE_MOMENT {
            MomentError { value: d, absolute: true }
        } else {
            MomentError { value: d / r, absolute: false }
        }
    })
}

/// Per radial bin of width `bin`, the largest `|Du(ℓ)|` over sites whose full
/// stencil lies in the ball. Returns `(bin centre, max)` for non-empty bins.
pub fn strain_envelope(ball: &LatticeBall, stencil: &Stencil, u: &[Vec3], bin: f64) -> Vec<(f64, f64)> {
    assert!(bin > 0.0, "bin width must be positive");
    let limit = ball.radius() - stencil.r_cut();
    let mut bins: Vec<Option<f64>> = Vec::new();
    for (i, x) in ball.positions().iter().enumerate() {
        let r = x.norm();
        if r > limit {
            continue;
        }
        let k = (r / bin) as usize;
        if bins.len() <= k {
            bins.resize(k + 1, None);
        }
        let v = stencil_difference_sq(ball, stencil, u, i).sqrt();
        bins[k] = Some(bins[k].map_or(v, |m: f64| m.max(v)));
    }
    bins.iter()
        .enumerate()
        .filter_map(|(k, m)| m.map(|m| ((k as f64 + 0.5) * bin, m)))
        .collect()
}

/// Least-squares slope of `log y` against `log x`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    /// Standard error of the slope (zero for an exact power law).
    pub stderr: f64,
    pub intercept: f64,
    pub points: usize,
    /// Points dropped because a coordinate was not positive.
    pub excluded: usize,
}

pub fn slope_fit(points: &[(f64, f64)]) -> Result<SlopeFit> {
    let used: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0 && x.is_finite() && y.is_finite())
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    let excluded = points.len() - used.len();
    if used.len() < 3 {
        return Err(Error::Domain(format!(
            "slope fit needs at least 3 positive points, have {} ({excluded} excluded)",
            used.len()
        )));
    }
    let n = used.len() as f64;
    let mx = used.iter().map(|p| p.0).sum::<f64>() / n;
    let my = used.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = used.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = used.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return Err(Error::Domain("slope fit needs at least two distinct abscissae".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ssr: f64 = used.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    let stderr = (ssr / (n - 2.0) / sxx).sqrt();
    Ok(SlopeFit { slope, stderr, intercept, points: used.len(), excluded })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy(defect: DefectSpec) -> (StudyConfig, Model) {
        let mut cfg = StudyConfig::new(defect);
        cfg.study.radii = vec![3.0, 4.0];
        cfg.study.reference_radius = 8.0;
        let model = Model::build(&cfg).unwrap();
        (cfg, model)
    }

    #[test]
    fn power_law_slope_is_exact_and_scale_free() {
        let pts: Vec<(f64, f64)> = [4.0, 6.0, 8.0, 10.0].iter().map(|&r: &f64| (r, 3.0 * r.powf(-2.0))).collect();
        let f = slope_fit(&pts).unwrap();
        assert!((f.slope + 2.0).abs() < 1e-12 && f.stderr < 1e-12);
        let scaled: Vec<_> = pts.iter().map(|(x, y)| (*x, 1e5 * y)).collect();
        assert!((slope_fit(&scaled).unwrap().slope - f.slope).abs() < 1e-12);
        let with_zero = [pts.as_slice(), &[(12.0, 0.0)]].concat();
        assert_eq!(slope_fit(&with_zero).unwrap().excluded, 1);
        assert!(slope_fit(&pts[..2]).is_err());
    }

    #[test]
    fn noisy_fit_agrees_with_endpoint_slope() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs: Vec<f64> = (0..12).map(|i| 2.0 + i as f64).collect();
        let pts: Vec<(f64, f64)> =
            xs.iter().map(|&x| (x, x.powf(-1.5) * (1.0 + 0.05 * rng.gen_range(-1.0..1.0)))).collect();
        let f = slope_fit(&pts).unwrap();
        let (a, b) = (pts[0], pts[pts.len() - 1]);
        let endpoint = (b.1.ln() - a.1.ln()) / (b.0.ln() - a.0.ln());
        // the endpoint estimate carries two points' noise over the full lever arm
        let endpoint_se = 0.05 * 2f64.sqrt() / (b.0.ln() - a.0.ln());
        assert!((f.slope - endpoint).abs() <= 3.0 * (f.stderr + endpoint_se), "{f:?} {endpoint}");
        assert!((f.slope + 1.5).abs() < 4.0 * f.stderr + 0.05);
    }

    #[test]
    fn perfect_crystal_gives_zero_fields_and_coefficients() {
        let (cfg, model) = toy(DefectSpec::None);
        let cache = KernelCache::new(&model.symbol, model.quadrature);
        let run = run_orders(&model, &cache, 3.0 * model.a0(), 2, &cfg.solver).unwrap();
        assert_eq!(run.orders.len(), 3);
        for s in &run.orders {
            assert!(s.u.iter().all(|v| *v == Vec3::zeros()));
            assert!(s.predictor.is_zero() && s.next_coeffs().is_zero());
        }
    }

    #[test]
    fn metrics_vanish_on_identical_fields_and_ignore_constants() {
        let (cfg, model) = toy(DefectSpec::Vacancy);
        let cache = KernelCache::new(&model.symbol, model.quadrature);
        let run = run_orders(&model, &cache, 3.0 * model.a0(), 0, &cfg.solver).unwrap();
        let set = run.domain.sites();
        let u = &run.orders[0].u;
        let r = run.radius();
        assert_eq!(geometry_error(set, &model.stencil, u, u, r), 0.0);
        assert_eq!(energy_error(&run.domain, u, u, r).unwrap(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v: Vec<Vec3> = u.iter().map(|x| x + Vec3::from_fn(|_, _| 1e-3 * rng.gen_range(-1.0..1.0))).collect();
        let c = Vec3::new(0.3, -0.2, 0.1);
        let shift = |f: &[Vec3]| f.iter().map(|x| x + c).collect::<Vec<_>>();
        let g = geometry_error(set, &model.stencil, &v, u, r);
        let g_shift = geometry_error(set, &model.stencil, &shift(&v), &shift(u), r);
        assert!(g > 0.0 && (g - g_shift).abs() < 1e-12 * g);
        let e = energy_error(&run.domain, &v, u, r).unwrap();
        let e_shift = energy_error(&run.domain, &shift(&v), &shift(u), r).unwrap();
        assert!(e > 0.0 && (e - e_shift).abs() < 1e-9 * e);
        let m = run.orders[0].moments;
        assert!(moment_errors(&m, &m).iter().all(|e| e.value == 0.0));
    }

    #[test]
    fn zero_field_has_zero_envelope() {
        let (_, model) = toy(DefectSpec::None);
        let ball = crate::lattice::generate_ball(&model.spec, 5.0).unwrap();
        let env = strain_envelope(&ball, &model.stencil, &vec![Vec3::zeros(); ball.len()], model.a0());
        assert!(!env.is_empty() && env.iter().all(|(_, m)| *m == 0.0));
    }

    #[test]
    fn degenerate_reference_moment_reports_absolute_error() {
        let mut test = MomentSet::default();
        test.i2[0][0][0] = 1e-3;
        let mut reference = MomentSet::default();
        reference.i1[0][0] = 2.0;
        let e = moment_errors(&test, &reference);
        assert!(!e[0].absolute && (e[0].value - 1.0).abs() < 1e-15);
        assert!(e[1].absolute && (e[1].value - 1e-3).abs() < 1e-18);
    }

    #[test]
    fn extension_uses_source_inside_and_boundary_outside() {
        let (_, model) = toy(DefectSpec::Vacancy);
        let small = DefectSiteSet::build(&model.spec, DefectSpec::Vacancy, 2.0).unwrap();
        let big = DefectSiteSet::build(&model.spec, DefectSpec::Vacancy, 4.0).unwrap();
        let u: Vec<Vec3> = small.positions().iter().map(|x| x * 0.01).collect();
        let ext = extend_field(&big, &small, &u, Boundary::Zero).unwrap();
        for (k, x) in big.keys().iter().zip(big.positions()) {
            let i = big.index_of(*k).unwrap();
            let want = if small.index_of(*k).is_some() { x * 0.01 } else { Vec3::zeros() };
            assert_eq!(ext[i], want);
        }
    }
}
