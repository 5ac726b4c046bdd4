use proptest::prelude::*;

use super::*;
use crate::geometry::Chart;
use crate::submanifold::{sample_conormal, Submanifold, SubmanifoldKind};

fn horizontal_geodesic(density: f64) -> Vec<ConormalSample> {
    let kind = SubmanifoldKind::ClosedGeodesic {
        p0: CotangentPoint::new([0.0, 0.0], [1.0, 0.0]),
        length: 1.0,
    };
    let h = Submanifold::new(ManifoldModel::FlatTorus2, kind, density).unwrap();
    sample_conormal(&h, density).unwrap()
}

const DELTAS: [f64; 3] = [0.2, 0.1, 0.05];

#[test]
fn single_tube_reference_values() {
    let h: f64 = 1e-4;
    assert!((single_tube_bound(h.powf(0.25), h, 2, 1) - 0.1f64.sqrt()).abs() < 1e-15);
    assert!((single_tube_bound(0.3, h, 2, 2) - 0.3f64.sqrt() / h.sqrt()).abs() < 1e-9);
    let h: f64 = 1e-3;
    let v = single_tube_bound(5.0 * h.powf(0.3), h, 2, 2);
    assert!((v - 25.089_095_358_284_318).abs() < 1e-12, "{v}");
}

#[test]
fn prelim_bracket_limits() {
    let r = prelim_bracket(4.0, &[]).unwrap();
    assert_eq!(r.bracket, 2.0);
    let r = prelim_bracket(0.0, &[(4.0, 1.0, 1e12)]).unwrap();
    assert!(r.bracket < 1e-5);
    assert!(matches!(prelim_bracket(0.0, &[(1.0, 2.0, 2.0)]), Err(Error::Domain(_))));
    assert!(matches!(tube_bracket(0, &[(1, 3.0, 2.0)], 0.1, 1.0, 2, 1), Err(Error::Domain(_))));
}

#[test]
fn all_in_b_bracket_is_independent_of_radius() {
    let tau = 0.3;
    let reference = (3.0f64 / tau).sqrt();
    for j in 3..=8 {
        let r = 2f64.powi(-j);
        let nb = 3u64 << j;
        let rep = tube_bracket(nb, &[], r, tau, 2, 1).unwrap();
        assert!((rep.bracket - reference).abs() < 1e-12 * reference);
    }
}

#[test]
fn single_group_bracket_decays_like_inverse_root_log() {
    // |G| = c R^{-1}, t = 1, T = 2 alpha T_e(h)
    let (alpha, lambda, delta) = (0.4, 1.0, 0.25);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for e in [8, 16, 32, 64] {
        let h = 10f64.powi(-e);
        let r = 5.0 * h.powf(delta);
        let te = (1.0 / h).ln() / (2.0 * lambda);
        let g = (7.0 / r).round() as u64;
        let rep = tube_bracket(0, &[(g, 1.0, 2.0 * alpha * te)], r, 0.5, 2, 1).unwrap();
        xs.push((1.0 / h).ln().ln());
        ys.push(rep.bracket.ln());
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let q = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    assert!((q + 0.5).abs() < 1e-3, "{q}");
}

#[test]
fn micro1_rhs_examples() {
    let s = horizontal_geodesic(64.0);
    let zero = vec![0.0; s.len()];
    assert_eq!(micro1_rhs(&s, &zero, 1, |_| true).unwrap().integral, 0.0);
    let one = vec![1.0; s.len()];
    let r = micro1_rhs(&s, &one, 1, |_| true).unwrap();
    assert!((r.integral - 2.0).abs() < 1e-12);
    assert_eq!(r.h_exponent, 0.0);
    let f: Vec<f64> = (0..s.len()).map(|i| (i % 5) as f64 * 0.3).collect();
    let scaled: Vec<f64> = f.iter().map(|v| v * 9.0).collect();
    let a = micro1_rhs(&s, &f, 1, |_| true).unwrap().integral;
    let b = micro1_rhs(&s, &scaled, 1, |_| true).unwrap().integral;
    assert!((b - 3.0 * a).abs() < 1e-12);
}

#[test]
fn periodic_orbit_thickening_counts_crossings() {
    let s = horizontal_geodesic(64.0);
    let seed = CotangentPoint::new([0.37, 0.2], [0.0, 1.0]);
    let mu = InvariantMeasure::periodic_orbit(ManifoldModel::FlatTorus2, seed, 1.0, 20_000, FlowConfig::default()).unwrap();
    let th = thicken_measure(&mu, &s, |_| true, &DELTAS, 0.01, FlowConfig::default()).unwrap();
    assert!((th.limit - 1.0).abs() < 0.02, "{th:?}");
    // traversed twice per period: m = 2, L = 2
    let mu = InvariantMeasure::periodic_orbit(ManifoldModel::FlatTorus2, seed, 2.0, 20_000, FlowConfig::default()).unwrap();
    let th = thicken_measure(&mu, &s, |_| true, &DELTAS, 0.01, FlowConfig::default()).unwrap();
    assert!((th.limit - 1.0).abs() < 0.02, "{th:?}");
}

#[test]
fn sphere_great_circle_through_a_point() {
    let m = ManifoldModel::Sphere2;
    let x = [1.1, 0.4];
    let h = Submanifold::new(m, SubmanifoldKind::Point { x }, 64.0).unwrap();
    let s = sample_conormal(&h, 64.0).unwrap();
    let seed = CotangentPoint {
        x,
        xi: crate::geometry::unit_covector(&m, &x, 0.7),
        chart: Chart::Primary,
    };
    let mu = InvariantMeasure::periodic_orbit(m, seed, 2.0 * PI, 20_000, FlowConfig::default()).unwrap();
    let th = thicken_measure(&mu, &s, |_| true, &DELTAS, 0.01, FlowConfig::default()).unwrap();
    assert!((th.limit * 2.0 * PI - 1.0).abs() < 0.02, "{th:?}");
}

#[test]
fn disjoint_invariant_circle_gives_zero() {
    let s = horizontal_geodesic(64.0);
    let seed = CotangentPoint::new([0.0, 0.5], [1.0, 0.0]);
    let mu = InvariantMeasure::periodic_orbit(ManifoldModel::FlatTorus2, seed, 1.0, 2_000, FlowConfig::default()).unwrap();
    let th = thicken_measure(&mu, &s, |_| true, &DELTAS, 0.01, FlowConfig::default()).unwrap();
    assert_eq!(th.limit, 0.0);
}

#[test]
fn liouville_reproduces_conormal_measure() {
    let s = horizontal_geodesic(64.0);
    let m = ManifoldModel::FlatTorus2;
    let mu = InvariantMeasure::liouville(m, 200_000, 11).unwrap();
    let eps = 0.02;
    let th = thicken_measure(&mu, &s, |_| true, &DELTAS, eps, FlowConfig::default()).unwrap();
    let (density, err) = liouville_density(&th, &m).unwrap();
    let sigma: f64 = s.iter().map(|c| c.weight).sum();
    assert!((density - sigma).abs() <= 3.0 * err, "{density} +- {err} vs {sigma}");
    // estimates are flat in delta within sampling noise
    for (e, se) in th.estimates.iter().zip(&th.stderr) {
        assert!((e * m.cosphere_volume() / (2.0 * eps) - sigma).abs() <= 4.0 * se * m.cosphere_volume() / (2.0 * eps));
    }
}

#[test]
fn plane_wave_measure_lives_on_one_branch() {
    let s = horizontal_geodesic(32.0);
    let mu = InvariantMeasure::product_delta_xi([0.0, 1.0], 100).unwrap();
    let f = conormal_density(&mu, &s, 1, &DELTAS, 0.01, FlowConfig::default()).unwrap();
    for (c, v) in s.iter().zip(&f) {
        if c.rho.xi[1] > 0.0 {
            assert!((v - 1.0).abs() < 0.02, "{v}");
        } else {
            assert_eq!(*v, 0.0);
        }
    }
    // saturating average: |int_H e^{2 pi i m x2} dsigma| = length(H) = 1
    let r = micro1_rhs(&s, &f, 1, |_| true).unwrap();
    assert!((r.integral - 1.0).abs() < 0.02);
}

#[test]
fn sampled_measures_are_flow_invariant() {
    let cfg = FlowConfig::default();
    let mu = InvariantMeasure::liouville(ManifoldModel::FlatTorus2, 100_000, 3).unwrap();
    assert!((mu.total() - 1.0).abs() < 1e-9);
    assert!(mu.invariance_defect(1.0, cfg).unwrap() < 0.01);
    let mu = InvariantMeasure::liouville(ManifoldModel::Sphere2, 100_000, 4).unwrap();
    assert!(mu.invariance_defect(1.0, cfg).unwrap() < 0.01);
    let conf = ManifoldModel::ConformalTorus2 {
        amplitude: 0.1,
        frequency: 1,
    };
    let mu = InvariantMeasure::liouville(conf, 5_000, 5).unwrap();
    assert!(mu.invariance_defect(1.0, cfg).unwrap() < 0.01);
}

#[test]
fn report_csv_has_expected_columns() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bounds.csv");
    let r = tube_bracket(4, &[(9, 1.0, 4.0)], 0.25, 0.5, 2, 1).unwrap();
    assert!(r.assembly_error() < 1e-12);
    write_reports_csv(&p, &[r]).unwrap();
    let text = std::fs::read_to_string(p).unwrap();
    assert!(text.starts_with("h,R,tau,n,k,bracket,term_B,term_groups,constants"));
    assert_eq!(text.lines().count(), 2);
}

fn groups() -> impl Strategy<Value = Vec<(u64, f64, f64)>> {
    prop::collection::vec((0u64..10_000, 0.1f64..5.0, 1.0f64..50.0), 0..5)
        .prop_map(|v| v.into_iter().map(|(g, t, d)| (g, t, t + d)).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn brackets_are_monotone(
        nb in 0u64..10_000,
        extra in 0u64..1000,
        gs in groups(),
        pick in 0usize..5,
        grow in 0u64..1000,
        shrink in 0.0f64..1.0,
        r in 0.01f64..1.0,
        tau in 0.01f64..1.0,
    ) {
        let base = tube_bracket(nb, &gs, r, tau, 2, 1).unwrap();
        prop_assert!(base.assembly_error() <= 1e-12 * base.bracket.max(1.0));
        prop_assert!(tube_bracket(nb + extra, &gs, r, tau, 2, 1).unwrap().bracket >= base.bracket);
        if !gs.is_empty() {
            let i = pick % gs.len();
            let mut more = gs.clone();
            more[i].0 += grow;
            prop_assert!(tube_bracket(nb, &more, r, tau, 2, 1).unwrap().bracket >= base.bracket);
            let mut shorter = gs.clone();
            let (_, t, te) = shorter[i];
            shorter[i].2 = t + (te - t) * (1.0 - shrink).max(1e-6);
            prop_assert!(tube_bracket(nb, &shorter, r, tau, 2, 1).unwrap().bracket >= base.bracket);
        }
        let fg: Vec<(f64, f64, f64)> = gs.iter().map(|&(g, t, te)| (g as f64 * 1e-3, t, te)).collect();
        let p = prelim_bracket(nb as f64 * 1e-3, &fg).unwrap();
        let q = prelim_bracket((nb + extra) as f64 * 1e-3, &fg).unwrap();
        prop_assert!(q.bracket >= p.bracket);
    }
}
