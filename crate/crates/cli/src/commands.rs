//! The subcommands. Each one claims all of its output files before doing any
//! work, so a refused overwrite costs nothing.

use std::fmt::Write as _;
use std::io::Write as _;

use anyhow::Result;
use farfield::cache::ReferenceCache;
use farfield::config::StudyConfig;
use farfield::driver::{run_orders, Model, OrderRun};
use farfield::lattice::write_xyz;
use farfield::model::residual_forces;
use farfield::output::OutputDir;
use farfield::plot::{loglog_svg, Series};
use farfield::solver::Phase;
use farfield::study::{self, sci, ConvergenceRecord};
use farfield::validate::{self, OracleModel};

use crate::Command;

/// Some oracle checks failed; carries how many.
#[derive(Debug)]
pub struct ValidationFailed(pub usize);

impl std::fmt::Display for ValidationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} validation check(s) failed", self.0)
    }
}

impl std::error::Error for ValidationFailed {}

pub fn run(command: Command, cfg: &StudyConfig, force: bool) -> Result<()> {
    let out = OutputDir::new(&cfg.output.dir, force);
    match command {
        Command::Relax => relax(cfg, &out),
        Command::Study => run_study(cfg, &out),
        Command::Reference => reference(cfg, &out),
        Command::Greens => greens(cfg, &out),
        Command::Validate => run_validate(cfg, &out),
    }
}

fn csv(buf: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<Vec<u8>> {
    let mut v = Vec::new();
    buf(&mut v)?;
    Ok(v)
}

const STUDY_FILES: [&str; 5] = ["study.csv", "study.json", "moments.json", "predictors.json", "study_config.toml"];
const STUDY_PLOTS: [&str; 5] =
    ["geometry_error.svg", "energy_error.svg", "moment_error_1.svg", "moment_error_2.svg", "moment_error_3.svg"];

fn run_study(cfg: &StudyConfig, out: &OutputDir) -> Result<()> {
    let mut names = STUDY_FILES.to_vec();
    if cfg.output.plots {
        names.extend(STUDY_PLOTS);
    }
    out.claim(&names)?;
    out.write("study_config.toml", cfg.to_toml_string()?)?;
    let cache = ReferenceCache::new(cfg.output.cache_dir());
    let (record, error) = match study::run_study(cfg, Some(&cache)) {
        Ok(r) => (r, None),
        Err(f) => (f.record, Some(f.error)),
    };
    out.write("study.csv", csv(|w| study::write_csv(w, &record.rows))?)?;
    out.write("study.json", serde_json::to_string_pretty(&record)?)?;
    out.write("moments.json", serde_json::to_string_pretty(&study::moments_json(&record))?)?;
    out.write("predictors.json", serde_json::to_string_pretty(&study::predictors_json(&record))?)?;
    if cfg.output.plots {
        write_study_plots(&record, out)?;
    }
    print!("{}", study_summary(&record));
    match error {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

fn series_by_order(record: &ConvergenceRecord, metric: impl Fn(&study::StudyRow) -> f64) -> Vec<Series> {
    record
        .config
        .study
        .orders
        .iter()
        .map(|&o| Series {
            label: format!("order {o}"),
            points: record.rows.iter().filter(|r| r.order == o).map(|r| (r.radius, metric(r))).collect(),
        })
        .collect()
}

fn write_study_plots(record: &ConvergenceRecord, out: &OutputDir) -> Result<()> {
    let x = "R / a0";
    let geometry = series_by_order(record, |r| r.geometry_error);
    out.write("geometry_error.svg", loglog_svg("geometry error", x, "||D(u - u_ref)||", &geometry))?;
    let energy = series_by_order(record, |r| r.energy_error);
    out.write("energy_error.svg", loglog_svg("energy error", x, "|E - E_ref|", &energy))?;
    for k in 1..=3 {
        let s = series_by_order(record, |r| r.moment_errors[k - 1].value);
        out.write(&format!("moment_error_{k}.svg"), loglog_svg(&format!("moment error ME_{k}"), x, "ME", &s))?;
    }
    Ok(())
}

fn study_summary(record: &ConvergenceRecord) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "a0 = {:.6}", record.a0);
    if let Some(r) = &record.reference {
        let src = if r.from_cache { "cache" } else { "solved" };
        let _ = writeln!(s, "reference: R = {} a0, {} sites, residual {:.2e} ({src})", r.radius, r.sites, r.residual);
    }
    let _ = writeln!(s, "fit window (R / a0): {:?}", record.fits.window);
    for f in &record.fits.geometry {
        let _ = writeln!(s, "geometry error slope, order {}: {:.3} ± {:.3}", f.order, f.fit.slope, f.fit.stderr);
    }
    if let Some(f) = &record.fits.energy_vs_geometry {
        let _ = writeln!(s, "energy vs geometry exponent: {:.3}", f.slope);
    }
    for f in &record.fits.moments {
        let _ = writeln!(s, "ME_{} slope, order {}: {:.3}", f.moment, f.order, f.fit.slope);
    }
    if let Some(e) = &record.failure {
        let _ = writeln!(s, "stopped early: {e}");
    }
    s
}

const RELAX_FILES: [&str; 6] =
    ["relax.xyz", "relax_residual.csv", "relax_trace.csv", "relax_moments.json", "relax_predictor.json", "relax_config.toml"];

fn relax(cfg: &StudyConfig, out: &OutputDir) -> Result<()> {
    out.claim(&RELAX_FILES)?;
    out.write("relax_config.toml", cfg.to_toml_string()?)?;
    let model = Model::build(cfg)?;
    let radius = cfg.study.radii[0] * model.a0();
    let max_order = *cfg.study.orders.iter().max().expect("validated non-empty");
    let kernels = model.kernel_cache(radius, radius)?;
    let (run, error) = match run_orders(&model, &kernels, radius, max_order, &cfg.solver) {
        Ok(run) => (run, None),
        Err(f) => (f.partial, Some(f.error)),
    };
    if !run.orders.is_empty() {
        write_relax(&model, &run, cfg, out)?;
    }
    for o in &run.orders {
        println!(
            "order {}: {} iterations, energy {:.10e}, residual {:.2e}",
            o.order,
            o.report.iterations(),
            o.report.energy,
            o.report.residual
        );
    }
    match error {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

fn write_relax(model: &Model, run: &OrderRun, cfg: &StudyConfig, out: &OutputDir) -> Result<()> {
    let last = run.orders.last().expect("checked non-empty");
    let set = run.domain.sites();
    let comment = format!(
        "{} R={} a0 order={} a0={:.17e} (relaxed positions)",
        cfg.defect,
        cfg.study.radii[0],
        last.order,
        model.a0()
    );
    out.write("relax.xyz", csv(|w| write_xyz(w, set.positions(), Some(&last.u), "X", &comment))?)?;

    let forces = residual_forces(&last.u, &run.domain)?;
    let residual = csv(|w| {
        writeln!(w, "x,y,z,ux,uy,uz,fx,fy,fz,free")?;
        for (i, (x, u)) in set.positions().iter().zip(&last.u).enumerate() {
            let f = forces[i];
            let cols: Vec<String> = [x.x, x.y, x.z, u.x, u.y, u.z, f.x, f.y, f.z].iter().map(|v| sci(*v)).collect();
            writeln!(w, "{},{}", cols.join(","), u8::from(run.domain.is_free(i)))?;
        }
        Ok(())
    })?;
    out.write("relax_residual.csv", residual)?;

    let trace = csv(|w| {
        writeln!(w, "order,phase,iteration,energy,residual")?;
        for o in &run.orders {
            for r in &o.report.trace {
                let phase = match r.phase {
                    Phase::Lbfgs => "lbfgs",
                    Phase::Newton => "newton",
                };
                writeln!(w, "{},{phase},{},{},{}", o.order, r.iteration, sci(r.energy), sci(r.residual))?;
            }
        }
        Ok(())
    })?;
    out.write("relax_trace.csv", trace)?;

    let moments: Vec<_> =
        run.orders.iter().map(|o| serde_json::json!({ "order": o.order, "moments": o.moments })).collect();
    out.write("relax_moments.json", serde_json::to_string_pretty(&moments)?)?;
    let predictors: Vec<_> = run
        .orders
        .iter()
        .map(|o| {
            serde_json::json!({
                "order": o.order,
                "core_radius": o.predictor.core_radius(),
                "coeffs": o.predictor.coeffs(),
                "next_coeffs": o.next_coeffs(),
            })
        })
        .collect();
    out.write("relax_predictor.json", serde_json::to_string_pretty(&predictors)?)?;
    Ok(())
}

const REFERENCE_FILES: [&str; 4] = ["reference.json", "reference_strain.csv", "reference.xyz", "reference_config.toml"];

fn reference(cfg: &StudyConfig, out: &OutputDir) -> Result<()> {
    out.claim(&REFERENCE_FILES)?;
    out.write("reference_config.toml", cfg.to_toml_string()?)?;
    let model = Model::build(cfg)?;
    let radius = cfg.study.reference_radius * model.a0();
    let kernels = model.kernel_cache(radius, radius)?;
    let cache = ReferenceCache::new(cfg.output.cache_dir());
    let (reference, from_cache) = study::reference_solution(&model, &kernels, cfg, Some(&cache))?;
    let summary = study::summarize_reference(&model, &reference, from_cache)?;
    out.write("reference.json", serde_json::to_string_pretty(&summary)?)?;
    let strain = csv(|w| {
        writeln!(w, "r,max_strain")?;
        for (r, m) in &summary.strain_envelope {
            writeln!(w, "{},{}", sci(*r), sci(*m))?;
        }
        Ok(())
    })?;
    out.write("reference_strain.csv", strain)?;
    let comment = format!("{} reference R={} a0 (relaxed positions)", cfg.defect, cfg.study.reference_radius);
    let set = reference.domain.sites();
    out.write("reference.xyz", csv(|w| write_xyz(w, set.positions(), Some(&reference.u), "X", &comment))?)?;
    println!(
        "reference: {} sites, residual {:.2e}, I1 drift {:.2e}, cached at {}",
        summary.sites,
        summary.residual,
        summary.moment_drift,
        cache.blob_path(&cfg.content_hash()).display()
    );
    Ok(())
}

const GREENS_FILES: [&str; 5] = ["greens_kernels.csv", "greens_decay.csv", "greens.json", "greens_decay.svg", "greens_config.toml"];

fn greens(cfg: &StudyConfig, out: &OutputDir) -> Result<()> {
    out.claim(&GREENS_FILES)?;
    out.write("greens_config.toml", cfg.to_toml_string()?)?;
    let m = OracleModel::build(cfg)?;
    let (lg, decay) = validate::lattice_green(&m, cfg.greens.window)?;
    let a0 = m.a0();

    // one representative per cubic orbit: x >= y >= z >= 0
    let mut table = String::from("x,y,z,r");
    for name in ["G", "G0", "G1"] {
        for i in 0..3 {
            for k in 0..3 {
                let _ = write!(table, ",{name}_{i}{k}");
            }
        }
    }
    table.push('\n');
    for (x, g) in lg.window().positions().iter().zip(lg.values()) {
        let tol = 1e-9 * a0;
        if x.norm() < a0 || x.x + tol < x.y || x.y + tol < x.z || x.z < -tol {
            continue;
        }
        let k0 = farfield::greens::g0(&m.symbol, x, m.quadrature)?;
        let k1 = farfield::greens::g1(&m.symbol, x, m.quadrature)?;
        let mut row: Vec<String> = vec![sci(x.x), sci(x.y), sci(x.z), sci(x.norm())];
        for mat in [g, &k0, &k1] {
            for i in 0..3 {
                for k in 0..3 {
                    row.push(sci(mat[(i, k)]));
                }
            }
        }
        table.push_str(&row.join(","));
        table.push('\n');
    }
    out.write("greens_kernels.csv", table)?;

    let mut bins = String::from("r,lattice,minus_g0,minus_g0_g1\n");
    for b in &decay.bins {
        let _ = writeln!(bins, "{},{},{},{}", sci(b.r), sci(b.lattice), sci(b.minus_g0), sci(b.minus_g0_g1));
    }
    out.write("greens_decay.csv", bins)?;
    out.write("greens.json", serde_json::to_string_pretty(&decay)?)?;
    let series = |label: &str, f: fn(&validate::DecayBin) -> f64| Series {
        label: label.into(),
        points: decay.bins.iter().filter(|b| b.r >= 1.0).map(|b| (b.r + 0.5, f(b))).collect(),
    };
    let svg = loglog_svg(
        "lattice Green's function decay",
        "|l| / a0",
        "max norm per shell",
        &[series("|G|", |b| b.lattice), series("|G - G0|", |b| b.minus_g0), series("|G - G0 - G1|", |b| b.minus_g0_g1)],
    );
    out.write("greens_decay.svg", svg)?;
    println!(
        "decay slopes over [{}, {}] a0: |G| {:.3}, |G - G0| {:.3}, |G - G0 - G1| {:.3}",
        decay.fit_from, decay.window, decay.lattice.slope, decay.minus_g0.slope, decay.minus_g0_g1.slope
    );
    Ok(())
}

fn run_validate(cfg: &StudyConfig, out: &OutputDir) -> Result<()> {
    out.claim(&["validation.json", "validate_config.toml"])?;
    out.write("validate_config.toml", cfg.to_toml_string()?)?;
    let report = validate::validate(cfg)?;
    for c in &report.checks {
        println!("{c}");
    }
    out.write("validation.json", serde_json::to_string_pretty(&report)?)?;
    let failed = report.failures().count();
    if failed > 0 {
        return Err(ValidationFailed(failed).into());
    }
    println!("all {} checks passed", report.checks.len());
    Ok(())
}
