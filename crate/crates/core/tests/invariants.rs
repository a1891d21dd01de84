use farfield::config::StudyConfig;
use farfield::greens::{g0, g1, QuadratureSpec, SymbolData};
use farfield::lattice::{generate_ball, stencil, DefectSpec, LatticeSpec, Mat3, Structure, Vec3};
use farfield::moments::{coeffs_b, eta, moments_from_b, weighted_moments, CoeffsA, MomentSet};
use farfield::study::sci;
use proptest::prelude::*;

fn vec3(r: f64) -> impl Strategy<Value = Vec3> {
    prop::array::uniform3(-r..r).prop_map(Vec3::from)
}

fn away_from_origin() -> impl Strategy<Value = Vec3> {
    vec3(3.0).prop_filter("not too close to the origin", |x| x.norm() > 0.5)
}

fn structure() -> impl Strategy<Value = Structure> {
    prop::sample::select(Structure::ALL.to_vec())
}

fn max_abs_diff(a: &Mat3, b: &Mat3) -> f64 {
    (a - b).abs().max()
}

/// Moments from a handful of point forces, so the spatial indices are symmetric.
fn point_force_moments() -> impl Strategy<Value = MomentSet> {
    prop::collection::vec((vec3(2.0), vec3(1.0)), 1..6).prop_map(weighted_moments)
}

fn flat(m: &MomentSet) -> Vec<f64> {
    let mut v: Vec<f64> = m.i1.as_flattened().to_vec();
    v.extend(m.i2.as_flattened().as_flattened());
    v.extend(m.i3.as_flattened().as_flattened().as_flattened());
    v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn eta_is_a_nonincreasing_cutoff(radius in 0.5f64..30.0, a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let (e_lo, e_hi) = (eta(lo * radius, radius), eta(hi * radius, radius));
        prop_assert!((0.0..=1.0).contains(&e_lo) && (0.0..=1.0).contains(&e_hi));
        prop_assert!(e_hi <= e_lo + 1e-15);
        if lo <= 1.0 / 3.0 {
            prop_assert_eq!(e_lo, 1.0);
        }
        if hi >= 2.0 / 3.0 {
            prop_assert_eq!(e_hi, 0.0);
        }
    }

    #[test]
    fn csv_numbers_roundtrip_exactly(x in any::<f64>().prop_filter("finite", |x| x.is_finite())) {
        prop_assert_eq!(sci(x).parse::<f64>().unwrap().to_bits(), x.to_bits());
    }

    #[test]
    fn stencils_are_closed_under_negation(s in structure(), reach in 1.0f64..2.5) {
        let spec = LatticeSpec::new(s, 1.0).unwrap();
        let st = stencil(&spec, reach * s.nearest_neighbor()).unwrap();
        prop_assert!(st.is_symmetric());
        for (i, &j) in st.negation().iter().enumerate() {
            prop_assert_eq!(st.offsets()[i], -st.offsets()[j]);
        }
    }

    #[test]
    fn balls_contain_exactly_the_sites_inside(s in structure(), radius in 1.0f64..5.0) {
        let spec = LatticeSpec::new(s, 1.0).unwrap();
        let ball = generate_ball(&spec, radius).unwrap();
        for (i, (z, x)) in ball.coords().iter().zip(ball.positions()).enumerate() {
            prop_assert!(x.norm() <= radius + 1e-9);
            prop_assert_eq!(ball.index_of(*z), Some(i));
            prop_assert_eq!(spec.coords_of(x), Some(*z));
        }
        // every site is paired with its mirror image
        for z in ball.coords() {
            prop_assert!(ball.index_of([-z[0], -z[1], -z[2]]).is_some());
        }
    }

    #[test]
    fn discrete_coefficients_reproduce_their_moments(m in point_force_moments(), s in structure()) {
        let basis = *LatticeSpec::new(s, 1.0).unwrap().basis();
        let back = moments_from_b(&coeffs_b(&m, &basis).unwrap());
        let scale = flat(&m).iter().fold(1.0f64, |a, v| a.max(v.abs()));
        for (x, y) in flat(&m).iter().zip(flat(&back)) {
            prop_assert!((x - y).abs() <= 1e-10 * scale, "{x} vs {y}");
        }
    }

    #[test]
    fn rotating_coefficients_preserves_the_norm(m in point_force_moments(), angle in 0.0f64..6.3, axis in vec3(1.0)) {
        prop_assume!(axis.norm() > 0.1);
        let q = *nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle).matrix();
        let a = farfield::moments::coeffs_a(&m);
        let there_and_back: CoeffsA = a.rotated(&q).rotated(&q.transpose());
        prop_assert!((a.rotated(&q).norm() - a.norm()).abs() <= 1e-12 * a.norm().max(1.0));
        prop_assert!(there_and_back.scaled_sum(1.0, &a, -1.0).norm() <= 1e-12 * a.norm().max(1.0));
    }

    #[test]
    fn continuum_kernels_are_even_and_homogeneous(x in away_from_origin(), t in 0.5f64..3.0) {
        let data = SymbolData::scalar_laplacian();
        let quad = QuadratureSpec::new(32).unwrap();
        let (g, gt, gm) = (g0(&data, &x, quad).unwrap(), g0(&data, &(x * t), quad).unwrap(), g0(&data, &-x, quad).unwrap());
        let scale = g.abs().max();
        prop_assert!(max_abs_diff(&g, &gm) <= 1e-12 * scale);
        prop_assert!(max_abs_diff(&(gt * t), &g) <= 1e-10 * scale);

        let (h, ht, hm) = (g1(&data, &x, quad).unwrap(), g1(&data, &(x * t), quad).unwrap(), g1(&data, &-x, quad).unwrap());
        let scale = h.abs().max();
        prop_assert!(max_abs_diff(&h, &hm) <= 1e-12 * scale);
        prop_assert!(max_abs_diff(&(ht * t.powi(3)), &h) <= 1e-10 * scale);
    }

    #[test]
    fn configs_survive_a_toml_roundtrip(
        first in 1.0f64..5.0,
        steps in prop::collection::vec(0.25f64..4.0, 0..4),
        extra in 0.0f64..10.0,
        orders in prop::sample::subsequence(vec![0usize, 1, 2], 1..=3),
        tol in 1e-12f64..1e-4,
        defect in prop::sample::select(vec![DefectSpec::Vacancy, DefectSpec::Divacancy, DefectSpec::Interstitial, DefectSpec::Microcrack(5)]),
    ) {
        let mut cfg = StudyConfig::new(defect);
        let mut radii = vec![first];
        for s in steps {
            radii.push(radii[radii.len() - 1] + s);
        }
        cfg.study.reference_radius = 2.0 * radii[radii.len() - 1] + extra;
        cfg.study.radii = radii;
        cfg.study.orders = orders;
        cfg.solver.tolerance = tol;
        cfg.validate().unwrap();
        let back = StudyConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        prop_assert_eq!(back.content_hash(), cfg.content_hash());
        prop_assert_eq!(back, cfg);
    }
}
