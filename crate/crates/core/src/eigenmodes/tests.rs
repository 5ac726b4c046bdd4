use proptest::prelude::*;

use super::*;
use crate::geometry::{Chart, CotangentPoint};

fn zonal(l: u64) -> Eigenmode {
    Eigenmode::new(EigenmodeKind::Zonal { l, axis: [0.0, 0.0, 1.0] }).unwrap()
}

fn torus(m: [i64; 2]) -> Eigenmode {
    Eigenmode::new(EigenmodeKind::TorusMode { m }).unwrap()
}

fn legendre_at_zero(l: u64) -> f64 {
    if l % 2 == 1 {
        return 0.0;
    }
    // (-1)^{l/2} (l-1)!! / l!!
    let mut v = 1.0;
    for k in (1..=l).step_by(2) {
        v *= k as f64 / (k + 1) as f64;
    }
    if (l / 2) % 2 == 1 {
        -v
    } else {
        v
    }
}

#[test]
fn legendre_reference_values() {
    for x in [-0.9, -0.2, 0.0, 0.4, 1.0] {
        assert!((legendre(2, x) - 0.5 * (3.0 * x * x - 1.0)).abs() < 1e-15);
        assert!((legendre(3, x) - 0.5 * (5.0 * x * x * x - 3.0 * x)).abs() < 1e-15);
    }
    assert!((legendre(1000, 1.0) - 1.0).abs() < 1e-12);
    assert!((legendre(400, 0.0) - legendre_at_zero(400)).abs() < 1e-14);
}

#[test]
fn degree_guard() {
    assert!(matches!(
        Eigenmode::new(EigenmodeKind::HighestWeight { l: 100_001 }),
        Err(Error::OverflowGuard(100_001))
    ));
    assert!(Eigenmode::new(EigenmodeKind::HighestWeight { l: 100_000 }).is_ok());
    assert!(Eigenmode::new(EigenmodeKind::TorusMode { m: [0, 0] }).is_err());
    assert!(Eigenmode::new(EigenmodeKind::Zonal { l: 3, axis: [1.0, 1.0, 0.0] }).is_err());
}

#[test]
fn semiclassical_parameters() {
    assert!((zonal(20).h() - 1.0 / 420f64.sqrt()).abs() < 1e-16);
    assert!((torus([3, 4]).h() - 1.0 / (10.0 * PI)).abs() < 1e-16);
}

#[test]
fn highest_weight_is_normalized() {
    // 2 pi int_0^pi c^2 sin^{2l+1} theta d theta by composite Simpson
    let l = 50;
    let u = Eigenmode::new(EigenmodeKind::HighestWeight { l }).unwrap();
    let n = 4000;
    let d = PI / n as f64;
    let mut s = 0.0;
    for i in 0..=n {
        let th = i as f64 * d;
        let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
        let p = Vector3::new(th.sin(), 0.0, th.cos());
        s += w * u.eval_embedded(&p).norm_sqr() * th.sin();
    }
    assert!((2.0 * PI * s * d / 3.0 - 1.0).abs() < 1e-10);
    // huge degree stays finite on the equator
    let big = Eigenmode::new(EigenmodeKind::HighestWeight { l: 100_000 }).unwrap();
    let v = big.eval_embedded(&Vector3::new(1.0, 0.0, 0.0)).norm();
    assert!(v.is_finite() && v > 1.0);
}

#[test]
fn random_mode_is_normalized() {
    let u = Eigenmode::new(EigenmodeKind::RandomSphereMode { l: 6, seed: 9 }).unwrap();
    let pts = fibonacci(20_000);
    let mean = pts.iter().map(|p| u.eval_embedded(p).norm_sqr()).sum::<f64>() / pts.len() as f64;
    assert!((4.0 * PI * mean - 1.0).abs() < 1e-3, "{}", 4.0 * PI * mean);
}

#[test]
fn eigen_residual_converges_at_second_order() {
    let sphere = ManifoldModel::Sphere2;
    let x = Point { x: [1.1, 0.7], chart: Chart::Primary };
    let s = 0.6f64.sqrt();
    let modes = [
        Eigenmode::new(EigenmodeKind::Zonal { l: 10, axis: [s * 0.6, s * 0.8, 0.4f64.sqrt()] }).unwrap(),
        Eigenmode::new(EigenmodeKind::HighestWeight { l: 10 }).unwrap(),
        Eigenmode::new(EigenmodeKind::RandomSphereMode { l: 7, seed: 1 }).unwrap(),
    ];
    for u in &modes {
        let a = eigen_residual(u, &sphere, &x, 1e-2).unwrap();
        let b = eigen_residual(u, &sphere, &x, 5e-3).unwrap();
        assert!(b < 1e-2 && (a / b - 4.0).abs() < 0.3, "{:?}: {a} {b}", u.kind);
    }
    let u = torus([3, 2]);
    let y = Point { x: [0.3, 0.6], chart: Chart::Primary };
    let a = eigen_residual(&u, &ManifoldModel::FlatTorus2, &y, 1e-3).unwrap();
    let b = eigen_residual(&u, &ManifoldModel::FlatTorus2, &y, 5e-4).unwrap();
    assert!((a / b - 4.0).abs() < 0.1, "{a} {b}");
}

#[test]
fn zonal_average_over_equator() {
    let eq = Submanifold::new(ManifoldModel::Sphere2, SubmanifoldKind::LatitudeCircle { theta0: PI / 2.0 }, 32.0).unwrap();
    for l in [10, 11, 400] {
        let a = average_over(&eq, &zonal(l), 1).unwrap();
        let want = 2.0 * PI * ((2 * l + 1) as f64 / (4.0 * PI)).sqrt() * legendre_at_zero(l);
        assert!((a.value.re - want).abs() < 1e-10 && a.value.im.abs() < 1e-12, "{l}: {a:?} {want}");
    }
}

fn horizontal() -> Submanifold {
    let kind = SubmanifoldKind::ClosedGeodesic {
        p0: CotangentPoint::new([0.0, 0.0], [1.0, 0.0]),
        length: 1.0,
    };
    Submanifold::new(ManifoldModel::FlatTorus2, kind, 16.0).unwrap()
}

#[test]
fn torus_average_over_horizontal_circle() {
    let h = horizontal();
    let a = average_over(&h, &torus([0, 5]), 1).unwrap();
    assert!((a.value - Complex64::new(1.0, 0.0)).norm() < 1e-10);
    for m in [[3, 2], [17, -40], [1, 0]] {
        let a = average_over(&h, &torus(m), 2).unwrap();
        assert!(a.value.norm() < 1e-10, "{m:?}: {a:?}");
    }
}

#[test]
fn averages_are_conjugate_symmetric() {
    let h = horizontal();
    let a = average_over(&h, &torus([0, 7]), 1).unwrap().value;
    let b = average_over(&h, &torus([0, -7]), 1).unwrap().value;
    assert!((a - b.conj()).norm() < 1e-12);
}

#[test]
fn point_average_is_the_value() {
    let m = ManifoldModel::Sphere2;
    let x = [0.8, 2.0];
    let pt = Submanifold::new(m, SubmanifoldKind::Point { x }, 8.0).unwrap();
    let u = Eigenmode::new(EigenmodeKind::HighestWeight { l: 30 }).unwrap();
    let a = average_over(&pt, &u, 1).unwrap();
    let v = eval_mode(&u, &m, &Point { x, chart: Chart::Primary }).unwrap();
    assert!((a.value - v).norm() < 1e-12);
    assert!(eval_mode(&u, &ManifoldModel::FlatTorus2, &Point { x, chart: Chart::Primary }).is_err());
}

#[test]
fn parseval_on_the_torus() {
    let n = 64;
    let f = |x: [f64; 2]| torus([2, 1]).eval_flat(x) * 0.6 + torus([-3, 5]).eval_flat(x) * Complex64::new(0.0, 0.8);
    let mut energy = 0.0;
    let mut c = Complex64::new(0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let x = [i as f64 / n as f64, j as f64 / n as f64];
            energy += f(x).norm_sqr();
            c += f(x) * torus([-3, 5]).eval_flat(x).conj();
        }
    }
    let norm = (n * n) as f64;
    assert!((energy / norm - 1.0).abs() < 1e-12);
    assert!((c / norm - Complex64::new(0.0, 0.8)).norm() < 1e-12);
}

#[test]
fn beam_restrictions() {
    let h = 1e-3;
    let a = beam_restriction(h, PI / 2.0, default_half_width(h)).unwrap();
    let want = (2.0 * PI).sqrt() * h.powf(0.25);
    assert!((a.value - Complex64::new(want, 0.0)).norm() < 1e-6);
    let b = beam_restriction(h, PI / 4.0, default_half_width(h)).unwrap();
    assert!(b.value.norm() < 1e-2 * h.powi(5), "{b:?}");
    assert!((b.value.norm() - beam_restriction_exact(h, PI / 4.0)).abs() < 1e-16, "{b:?}");
    let c = beam_restriction(h, 1.4, default_half_width(h)).unwrap();
    assert!((c.value.re - beam_restriction_exact(h, 1.4)).abs() < 1e-9 * want);
    assert!(beam_restriction(h, 2.0, 0.1).is_err());
}

#[test]
fn sup_ratios_match_closed_forms() {
    assert!((sup_ratio(&torus([3, 7]), 8.0).unwrap() - 1.0).abs() < 1e-12);
    // l = 100 goes through the tabulated candidate stage
    for l in [20, 100] {
        let r = sup_ratio(&zonal(l), 8.0).unwrap();
        assert!((r - ((2 * l + 1) as f64 / (4.0 * PI)).sqrt()).abs() < 1e-8, "{r}");
    }
    let u = Eigenmode::new(EigenmodeKind::HighestWeight { l: 50 }).unwrap();
    let r = sup_ratio(&u, 8.0).unwrap();
    assert!((r - u.log_norm.exp()).abs() < 1e-8);
    assert!(matches!(sup_ratio(&zonal(5), 4.0), Err(Error::Domain(_))));
}

#[test]
fn fits_recover_exponents() {
    let hs: Vec<f64> = (0..6).map(|i| 10f64.powf(-1.0 - 0.5 * i as f64)).collect();
    let pairs: Vec<(f64, f64)> = hs.iter().map(|&h| (h, 3.0 * h.powf(-0.25))).collect();
    let f = scaling_fit(&pairs, FitModel::PowerLaw).unwrap();
    assert!((f.exponent + 0.25).abs() < 1e-12 && (f.prefactor - 3.0).abs() < 1e-10 && f.residual < 1e-12);
    let pairs: Vec<(f64, f64)> = hs.iter().map(|&h| (h, (1.0 / h).ln().powf(-0.5))).collect();
    let f = scaling_fit(&pairs, FitModel::PowerTimesSqrtLog).unwrap();
    assert!((f.log_correction + 0.5).abs() < 1e-8 && f.exponent.abs() < 1e-8, "{f:?}");
    assert!(matches!(scaling_fit(&pairs[..3], FitModel::PowerTimesSqrtLog), Err(Error::Rank)));
    let same = vec![(0.01, 1.0); 5];
    assert!(matches!(scaling_fit(&same, FitModel::PowerLaw), Err(Error::Rank)));
}

#[test]
fn sweep_csv_columns() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("sweep.csv");
    let rows = vec![SweepRow {
        kind: "TorusMode".into(),
        l_or_m: "3;4".into(),
        h: 0.1,
        value: Complex64::new(3.0, 4.0),
        err_estimate: 0.0,
    }];
    write_sweep_csv(&p, &rows).unwrap();
    let text = std::fs::read_to_string(p).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "kind,l_or_m,h,value_re,value_im,abs,err_estimate");
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row.len(), 7);
    assert_eq!(row[5].parse::<f64>().unwrap(), 5.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn legendre_is_bounded(l in 0u64..3000, x in -1.0f64..1.0) {
        prop_assert!(legendre(l, x).abs() <= 1.0 + 1e-12);
    }

    #[test]
    fn power_fits_are_exact(p in -2.0f64..2.0, c in 0.1f64..10.0) {
        let pairs: Vec<(f64, f64)> = (0..5).map(|i| {
            let h = 10f64.powi(-1 - i);
            (h, c * h.powf(p))
        }).collect();
        let f = scaling_fit(&pairs, FitModel::PowerLaw).unwrap();
        prop_assert!((f.exponent - p).abs() < 1e-10);
    }

    #[test]
    fn torus_averages_are_conjugate_symmetric(m1 in -30i64..30, m2 in 1i64..30) {
        let h = horizontal();
        let a = average_over(&h, &torus([m1, m2]), 1).unwrap().value;
        let b = average_over(&h, &torus([-m1, -m2]), 1).unwrap().value;
        prop_assert!((a - b.conj()).norm() < 1e-10);
    }
}
