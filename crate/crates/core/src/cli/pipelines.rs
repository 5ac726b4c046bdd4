use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ExperimentConfig, Experiment, MeasureSpec, ModeFamily, Outcome};
use crate::bounds::{liouville_density, thicken_measure, tube_bracket, InvariantMeasure};
use crate::eigenmodes::{
    average_over, beam_restriction, beam_restriction_exact, default_half_width, legendre, scaling_fit, sup_ratio,
    write_sweep_csv, Eigenmode, EigenmodeKind, FitModel, SweepRow,
};
use crate::error::{Error, Result};
use crate::flow::ehrenfest_time;
use crate::geometry::{unit_covector, wrap_unit, CotangentPoint, ManifoldModel, Point};
use crate::quantize::{
    certify_window, localized_mass, partition_of_unity, time_average_symbol, write_mass_csv, GridField, MassRow,
};
use crate::returns::{
    all_returns, angular_cover, conjugacy_certificate, conjugate_points, crossing_table, liouville_bin_test,
    recurrence_decomposition, write_returns_csv, ReturnScanner,
};
use crate::submanifold::{sample_conormal, ConormalSample, Submanifold, SubmanifoldKind};
use crate::tubes::{
    build_cover, contraction_partition, grid_oracle, Group, HyperbolicToyMap, Scales, ToySegment, TubeCover,
};

pub(super) fn run(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome> {
    match cfg.experiment {
        Experiment::ZonalSup => zonal_sup(cfg, dir),
        Experiment::BeamRestriction => beam(cfg, dir),
        Experiment::TorusAverage => torus_average(cfg, dir),
        Experiment::SphereReturns => sphere_returns(cfg, dir),
        Experiment::CoverPartition => cover_partition(cfg, dir),
        Experiment::CatmapContraction => catmap(cfg, dir),
        Experiment::TubeMass => tube_mass(cfg, dir),
        Experiment::Conjugacy => conjugacy(cfg, dir),
        Experiment::MuThicken => mu_thicken(cfg, dir),
    }
}

fn write_csv(dir: &Path, name: &str, header: &str, rows: &[String]) -> Result<()> {
    let mut s = String::with_capacity(64 * (rows.len() + 1));
    s.push_str(header);
    s.push('\n');
    for r in rows {
        s.push_str(r);
        s.push('\n');
    }
    fs::write(dir.join(name), s)?;
    Ok(())
}

fn write_json<T: serde::Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    fs::write(dir.join(name), serde_json::to_string_pretty(value).expect("serializable"))?;
    Ok(())
}

fn submanifold(cfg: &ExperimentConfig, model: ManifoldModel) -> Result<(Submanifold, Vec<ConormalSample>)> {
    let sc = cfg.submanifold.as_ref().expect("validated");
    let h = Submanifold::new(model, sc.shape.clone(), sc.density)?;
    let s = sample_conormal(&h, sc.density)?;
    Ok((h, s))
}

fn mode_h(m: [i64; 2]) -> f64 {
    1.0 / (2.0 * PI * ((m[0] * m[0] + m[1] * m[1]) as f64).sqrt())
}

fn zonal_sup(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome> {
    let modes = cfg.modes.as_ref().expect("validated");
    let mut out = Outcome::default();
    let mut rows = Vec::new();
    let mut pairs = Vec::new();
    for &l in cfg.l_list.as_ref().expect("validated") {
        let kind = match modes.family {
            ModeFamily::Zonal => EigenmodeKind::Zonal { l, axis: [0.0, 0.0, 1.0] },
            ModeFamily::HighestWeight => EigenmodeKind::HighestWeight { l },
            ModeFamily::RandomSphere => EigenmodeKind::RandomSphereMode { l, seed: cfg.seed },
            ModeFamily::Torus => return Err(Error::Config("zonal_sup needs a sphere family".into())),
        };
        let mode = Eigenmode::new(kind)?;
        let r = sup_ratio(&mode, modes.ppw)?;
        pairs.push((mode.h(), r));
        rows.push(SweepRow {
            kind: format!("{:?}", modes.family).to_lowercase(),
            l_or_m: l.to_string(),
            h: mode.h(),
            value: Complex64::new(r, 0.0),
            err_estimate: 0.01 * r,
        });
    }
    write_sweep_csv(&dir.join("sweep.csv"), &rows)?;
    let fit = scaling_fit(&pairs, FitModel::PowerLaw)?;
    write_json(dir, "fit.json", &fit)?;
    let target = match modes.family {
        ModeFamily::Zonal => Some(-0.5),
        ModeFamily::HighestWeight => Some(-0.25),
        _ => None,
    };
    if let Some(t) = target {
        out.check(
            "sup_exponent",
            (fit.exponent - t).abs() <= 0.05,
            format!("exponent {:.4} vs {t} +- 0.05", fit.exponent),
        );
    }
    Ok(out)
}

fn beam(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome> {
    let mut out = Outcome::default();
    let mut rows = Vec::new();
    let mut pairs = Vec::new();
    for &h in cfg.h_list.as_ref().expect("validated") {
        let normal = beam_restriction(h, PI / 2.0, default_half_width(h))?;
        let oblique = beam_restriction(h, PI / 4.0, default_half_width(h))?;
        let want = (2.0 * PI).sqrt() * h.powf(0.25);
        let rel = (normal.value.re - want).abs() / want;
        pairs.push((h, normal.value.norm()));
        out.check(
            &format!("normal_h{h:e}"),
            rel <= 1e-6,
            format!("relative error {rel:.3e}"),
        );
        // the non-normal decay flag: exponentially small against any power
        let decays = oblique.value.norm() < h.powi(5).max(beam_restriction_exact(h, PI / 4.0) * 10.0);
        out.check(
            &format!("oblique_h{h:e}"),
            decays,
            format!("|value| {:.3e}, h^5 {:.3e}", oblique.value.norm(), h.powi(5)),
        );
        rows.push(format!(
            "{h:e},{:.17e},{want:.17e},{rel:.3e},{:.17e},{}",
            normal.value.re,
            oblique.value.norm(),
            decays
        ));
    }
    write_csv(dir, "beam.csv", "h,normal,predicted,rel_err,oblique_abs,oblique_decays", &rows)?;
    if pairs.len() >= 3 {
        let fit = scaling_fit(&pairs, FitModel::PowerLaw)?;
        out.check(
            "normal_exponent",
            (fit.exponent - 0.25).abs() <= 1e-6,
            format!("exponent {:.8}", fit.exponent),
        );
        write_json(dir, "fit.json", &fit)?;
    }
    Ok(out)
}

fn torus_average(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome> {
    let model = cfg.manifold.expect("validated");
    let (hsub, _) = submanifold(cfg, model)?;
    let modes = cfg.modes.as_ref().expect("validated");
    let mut out = Outcome::default();
    let mut rows = Vec::new();
    match modes.family {
        ModeFamily::Torus => {
            if modes.m_list.is_empty() {
                return Err(Error::Config("torus family needs modes.m_list".into()));
            }
            for &m in &modes.m_list {
                let a = average_over(&hsub, &Eigenmode::new(EigenmodeKind::TorusMode { m })?, 2)?;
                if let (ManifoldModel::FlatTorus2, SubmanifoldKind::ClosedGeodesic { p0, length }) = (model, &hsub.kind) {
                    // exact: L e^{2 pi i m.x0} when m is orthogonal to the geodesic, else 0
                    let n = p0.xi[0].hypot(p0.xi[1]);
                    let dot = (m[0] as f64 * p0.xi[0] + m[1] as f64 * p0.xi[1]) / n;
                    let want = if dot.abs() < 1e-12 {
                        Complex64::from_polar(*length, 2.0 * PI * (m[0] as f64 * p0.x[0] + m[1] as f64 * p0.x[1]))
                    } else {
                        Complex64::new(0.0, 0.0)
                    };
                    let err = (a.value - want).norm();
                    out.check(&format!("average_m{}_{}", m[0], m[1]), err <= 1e-10, format!("error {err:.3e}"));
                }
                rows.push(SweepRow {
                    kind: "torus".into(),
                    l_or_m: format!("{}:{}", m[0], m[1]),
                    h: mode_h(m),
                    value: a.value,
                    err_estimate: a.error,
                });
            }
        }
        ModeFamily::Zonal => {
            let ls = cfg.l_list.as_ref().ok_or_else(|| Error::Config("zonal family needs l_list".into()))?;
            for &l in ls {
                let mode = Eigenmode::new(EigenmodeKind::Zonal { l, axis: [0.0, 0.0, 1.0] })?;
                let a = average_over(&hsub, &mode, 2)?;
                if let SubmanifoldKind::LatitudeCircle { theta0 } = hsub.kind {
                    let c = ((2 * l + 1) as f64 / (4.0 * PI)).sqrt();
                    let want = 2.0 * PI * theta0.sin() * c * legendre(l, theta0.cos());
                    let err = (a.value.re - want).abs() + a.value.im.abs();
                    out.check(&format!("zonal_l{l}"), err <= 1e-9 * c.max(1.0), format!("error {err:.3e}"));
                    if (theta0 - PI / 2.0).abs() < 1e-15 && l % 2 == 0 {
                        let floor = 0.5 * 2.0 * PI * c * (2.0 / (PI * l as f64)).sqrt();
                        out.check(
                            &format!("equator_floor_l{l}"),
                            a.value.norm() >= floor,
                            format!("|avg| {:.6} vs floor {floor:.6}", a.value.norm()),
                        );
                    }
                }
                rows.push(SweepRow {
                    kind: "zonal".into(),
                    l_or_m: l.to_string(),
                    h: mode.h(),
                    value: a.value,
                    err_estimate: a.error,
                });
            }
        }
        f => return Err(Error::Config(format!("torus_average does not support {f:?}"))),
    }
    write_sweep_csv(&dir.join("averages.csv"), &rows)?;
    Ok(out)
}

/// Brackets on the `(T, N, S)` ladder with the number of inversions of the
/// limit order: decreasing in `S`, then in `N` at `S = inf`, then in `T`.
pub(crate) fn ladder_rows(
    model: &ManifoldModel,
    x: &Point,
    samples: &[ConormalSample],
    scanner: &ReturnScanner,
    ladder: &super::LadderConfig,
) -> Result<(Vec<String>, usize)> {
    let table = crossing_table(scanner, samples, ladder.t_hor)?;
    let cover = angular_cover(model, x, ladder.levels);
    let mut rows = Vec::new();
    let mut inversions = 0;
    let mut prev_t: Option<f64> = None;
    for &t in &ladder.t_list {
        let d = recurrence_decomposition(model, samples, &cover, &table, t, ladder.t_hor)?;
        let mut prev_n: Option<f64> = None;
        let mut best = f64::INFINITY;
        for n in 1..=d.balls() + 1 {
            let mut prev_s: Option<f64> = None;
            for &s in &ladder.s_list {
                let b = d.bracket(n, s);
                rows.push(format!("{t},{n},{s},{b:.17e}"));
                if prev_s.is_some_and(|p| b > p) {
                    inversions += 1;
                }
                prev_s = Some(b);
            }
            let lim = d.sigma_b(n).sqrt();
            rows.push(format!("{t},{n},inf,{lim:.17e}"));
            if prev_n.is_some_and(|p| lim > p + 1e-15) {
                inversions += 1;
            }
            prev_n = Some(lim);
            best = best.min(lim);
        }
        if prev_t.is_some_and(|p| best > p + 1e-15) {
            inversions += 1;
        }
        prev_t = Some(best);
    }
    Ok((rows, inversions))
}

fn sphere_returns(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome> {
    let model = cfg.manifold.expect("validated");
    let rc = cfg.returns.as_ref().expect("validated");
    let (hsub, s) = submanifold(cfg, model)?;
    let sc = ReturnScanner::new(model, &s, rc.prox_tol, cfg.flow_config())?;
    let recs = all_returns(&sc, &s, rc.t_max)?;
    write_returns_csv(&dir.join("returns.csv"), &recs)?;
    let mut out = Outcome::default();
    let bt = liouville_bin_test(&s, &recs, rc.bins);
    write_json(dir, "bin_test.json", &bt)?;
    out.check(
        "return_map_bins",
        bt.passes(),
        format!("defect {:.4} vs allowance {:.4}", bt.defect, bt.tolerance),
    );
    if let Some(t) = rc.expected_t {
        let worst = recs
            .iter()
            .map(|r| r.t_h.map_or(f64::INFINITY, |x| (x - t).abs()))
            .fold(0.0, f64::max);
        out.check("return_time", worst <= 1e-6, format!("max |T_H - {t}| = {worst:.3e}"));
    }
    if let Some(ladder) = &rc.ladder {
        let SubmanifoldKind::Point { x } = hsub.kind else {
            return Err(Error::Config("returns.ladder needs a point submanifold".into()));
        };
        let (rows, inv) = ladder_rows(&model, &Point::new(x), &s, &sc, ladder)?;
        write_csv(dir, "ladder.csv", "T,N,S,bracket", &rows)?;
        out.check("ladder_order", inv == 0, format!("{inv} inversions"));
    }
    Ok(out)
}

/// Random points of the `h^delta`-thickened flow-out of `SN*H` over
/// `|t| <= tau` on the flat torus.
fn thickened_flow_out(s: &[ConormalSample], tau: f64, hd: f64, count: usize, seed: u64) -> Vec<([f64; 2], [f64; 2])> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let c = &s[rng.gen_range(0..s.len())].rho;
            let t = tau * (2.0 * rng.gen::<f64>() - 1.0);
            let mut e = || hd * (2.0 * rng.gen::<f64>() - 1.0);
            let x = [wrap_unit(c.x[0] + t * c.xi[0] + e()), wrap_unit(c.x[1] + t * c.xi[1] + e())];
            let a = c.xi[1].atan2(c.xi[0]) + e();
            let r = 1.0 + e();
            (x, [r * a.cos(), r * a.sin()])
        })
        .collect()
}

fn tubes_csv(dir: &Path, name: &str, cover: &TubeCover) -> Result<()> {
    let rows: Vec<String> = cover
        .tubes
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let c = &t.center;
            format!(
                "{i},{},{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
                t.color, c.branch, c.param, c.rho.x[0], c.rho.x[1], c.rho.xi[0], c.rho.xi[1]
            )
        })
        .collect();
    write_csv(dir, name, "index,color,branch,param,x1,x2,xi1,xi2", &rows)
}

fn cover_partition(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome> {
    let model = cfg.manifold.expect("validated");
    let tc = cfg.tubes.as_ref().expect("validated");
    let (hsub, s) = submanifold(cfg, model)?;
    let cover = build_cover(&model, &s, tc.tau, tc.radius, tc.color_cap, cfg.flow_config())?;
    tubes_csv(dir, "tubes.csv", &cover)?;
    let mut out = Outcome::default();
    let missed = s.iter().filter(|x| cover.containing(&x.rho).is_none()).count();
    out.check("covers_samples", missed == 0, format!("{missed} samples outside every tube"));
    out.check(
        "color_budget",
        cover.colors <= tc.color_cap,
        format!("{} colors, cap {}", cover.colors, tc.color_cap),
    );
    if let Some(q) = &cfg.quantize {
        let h = mode_h(q.mode);
        let chis = partition_of_unity(&cover, &hsub, h, q.delta)?;
        let pts = thickened_flow_out(&s, tc.tau, h.powf(q.delta), 4000, cfg.seed);
        let mut worst: f64 = 0.0;
        let mut rows = Vec::new();
        for (x, xi) in &pts {
            let sum: f64 = chis.iter().map(|c| c.value(*x, *xi)).sum();
            worst = worst.max((sum - 1.0).abs());
            rows.push(format!("{:.17e},{:.17e},{:.17e},{:.17e},{sum:.17e}", x[0], x[1], xi[0], xi[1]));
        }
        write_csv(dir, "partition.csv", "x1,x2,xi1,xi2,sum", &rows)?;
        out.check("partition_of_unity", worst <= 1e-6, format!("max |sum - 1| = {worst:.3e}"));
    }
    Ok(out)
}

fn catmap(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome> {
    let c = cfg.contraction.as_ref().expect("validated");
    let map = HyperbolicToyMap::new(c.matrix)?;
    let seg = ToySegment {
        anchor: c.anchor,
        width: c.width,
        thickness: c.thickness,
    };
    let lambda = map.eigenvalues().0.abs().ln();
    let scales = Scales {
        h: c.h,
        delta: c.delta,
        alpha: c.alpha,
        lambda,
    };
    let res = contraction_partition(&map, &seg, c.t0, c.t_end, c.eps, scales)?;
    write_json(dir, "certificate.json", &res.certificate)?;
    let rows: Vec<String> = res
        .levels
        .iter()
        .zip(&res.sigma_g)
        .map(|(t, g)| format!("{t},{g:.17e}"))
        .collect();
    write_csv(dir, "levels.csv", "T,sigma_G", &rows)?;
    let mut out = Outcome::default();
    let oracle = grid_oracle(&map, &seg, &res.certificate);
    out.check(
        "reverification",
        oracle.certified(seg.thickness),
        format!("min gap {:.3e} vs thickness {}", oracle.min_gap, seg.thickness),
    );
    out.check(
        "residual",
        res.residual_fraction() <= c.max_residual,
        format!("sigma(B)/sigma(A0) = {:.4}", res.residual_fraction()),
    );
    // single-group bracket with T = 2 alpha T_e(h) and |G| ~ R^{-1}
    let mut rows = Vec::new();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut monotone = true;
    let mut prev = f64::INFINITY;
    let mut hs = cfg.h_list.clone().expect("validated");
    hs.sort_by(|a, b| b.total_cmp(a));
    for h in hs {
        let r = 5.0 * h.powf(c.delta);
        let te = ehrenfest_time(h, lambda)?;
        let g = (7.0 / r).round() as u64;
        let t_end = 2.0 * c.alpha * te;
        let rep = tube_bracket(0, &[(g, 1.0, t_end)], r, 0.5, 2, 1)?;
        monotone &= rep.bracket < prev;
        prev = rep.bracket;
        xs.push((1.0 / h).ln().ln());
        ys.push(rep.bracket.ln());
        rows.push(format!("{h:e},{r:.17e},{t_end:.17e},{g},{:.17e}", rep.bracket));
    }
    write_csv(dir, "bracket_sweep.csv", "h,R,T,G,bracket", &rows)?;
    out.check("bracket_decreases", monotone, "bracket falls as T grows".into());
    if xs.len() >= 2 {
        let q = slope(&xs, &ys);
        out.check("bracket_log_exponent", (q + 0.5).abs() <= 0.1, format!("q = {q:.4}"));
    }
    Ok(out)
}

pub(crate) fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>()
}

fn tube_mass(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome> {
    let model = ManifoldModel::FlatTorus2;
    let q = cfg.quantize.as_ref().expect("validated");
    let (hsub, s) = submanifold(cfg, model)?;
    let h = mode_h(q.mode);
    let n = q.n.ok_or_else(|| Error::Config("tube_mass needs quantize.n".into()))?;
    let u = GridField::from_modes(n, h, &[(q.mode, Complex64::new(1.0, 0.0))])?;
    let flow = cfg.flow_config();
    let mut out = Outcome::default();
    let mut rows = Vec::new();
    if let Some(tc) = &q.cover {
        let cover = build_cover(&model, &s, tc.tau, tc.radius, tc.color_cap, flow)?;
        let chis = partition_of_unity(&cover, &hsub, h, q.delta)?;
        let rep = localized_mass(&u, &chis, None)?;
        let frac = rep.total / rep.norm2;
        out.check(
            "full_cover_mass",
            (0.5..=cover.colors as f64).contains(&frac),
            format!("sum/|u|^2 = {frac:.4}, colors {}", cover.colors),
        );
        rows.extend(rep.per_tube.iter().map(|&(j, m)| MassRow {
            tube_index: j,
            group: "cover".into(),
            mass: m,
            ratio: frac,
        }));
    }
    if let Some(gc) = &q.group {
        let cover = build_cover(&model, &s, gc.tau, gc.radius, crate::tubes::DEFAULT_COLOR_CAP, flow)?;
        let delta = (gc.radius / 5.0).ln() / h.ln();
        let chis = partition_of_unity(&cover, &hsub, h, delta)?;
        let dir_m = {
            let n = (q.mode[0] as f64).hypot(q.mode[1] as f64);
            [q.mode[0] as f64 / n, q.mode[1] as f64 / n]
        };
        let members: Vec<usize> = (0..cover.len())
            .filter(|&j| {
                let xi = cover.tubes[j].center.rho.xi;
                xi[0] * dir_m[0] + xi[1] * dir_m[1] > (gc.radius).cos()
            })
            .collect();
        let Some(direction) = cover.certify(&members, gc.t0, gc.t_end, 1.0)? else {
            out.check("group_certified", false, format!("{} members", members.len()));
            write_mass_csv(&dir.join("mass.csv"), &rows)?;
            return Ok(out);
        };
        out.check("group_certified", true, format!("{} members", members.len()));
        let group = Group {
            hash: cover.skeleton_hash(&members),
            members,
            t: gc.t0,
            t_end: gc.t_end,
            direction,
        };
        let mut worst: f64 = 0.0;
        for &j in &group.members {
            let w = certify_window(&cover, j, gc.t0, gc.t_end)?
                .ok_or_else(|| Error::Assertion(format!("tube {j} loses its window certificate")))?;
            let avg = time_average_symbol(&chis[j], Some(&w), q.steps)?;
            worst = worst.max(avg.sup / avg.bound);
        }
        out.check(
            "time_average",
            worst <= 1.0 + 1e-2,
            format!("max sup/(t0/T) = {worst:.4}"),
        );
        let rep = localized_mass(&u, &chis, Some(&group))?;
        let ratio = rep.ratio.expect("group given");
        out.check(
            "group_ratio",
            ratio <= 1.5,
            format!("total/((t/T)|u|^2) = {ratio:.4}, delta = {delta:.3}"),
        );
        rows.extend(rep.per_tube.iter().map(|&(j, m)| MassRow {
            tube_index: j,
            group: "aligned".into(),
            mass: m,
            ratio,
        }));
    }
    write_mass_csv(&dir.join("mass.csv"), &rows)?;
    Ok(out)
}

fn conjugacy(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome> {
    let model = cfg.manifold.expect("validated");
    let c = cfg.conjugacy.as_ref().expect("validated");
    let mut out = Outcome::default();
    let mut rows = Vec::new();
    for (k, sd) in c.seeds.iter().enumerate() {
        let seed = CotangentPoint::new(sd.x, unit_covector(&model, &sd.x, sd.angle));
        let rep = conjugate_points(&model, &seed, (0.0, c.t_end), c.r)?;
        for (t, mult) in &rep.events {
            rows.push(format!("{k},{t:.17e},{mult}"));
        }
        match model {
            ManifoldModel::Sphere2 => {
                let expect = (c.t_end / PI).floor() as usize;
                let worst = rep
                    .events
                    .iter()
                    .enumerate()
                    .map(|(i, e)| (e.0 - (i + 1) as f64 * PI).abs())
                    .fold(0.0, f64::max);
                out.check(
                    &format!("sphere_events_{k}"),
                    rep.events.len() == expect && worst <= 1e-6,
                    format!("{} events, max |t - m pi| = {worst:.3e}", rep.events.len()),
                );
            }
            ManifoldModel::FlatTorus2 => {
                out.check(&format!("flat_events_{k}"), rep.events.is_empty(), format!("{} events", rep.events.len()));
            }
            _ => {}
        }
    }
    write_csv(dir, "events.csv", "seed,t,multiplicity", &rows)?;
    let cert = conjugacy_certificate(&model, &c.points, c.t, c.a, c.t_hor, c.directions, c.dt)?;
    write_json(dir, "certificate.json", &cert)?;
    match model {
        ManifoldModel::FlatTorus2 => out.check("certificate_holds", cert.holds, format!("{} witnesses", cert.witnesses.len())),
        ManifoldModel::Sphere2 if c.t_hor >= 2.0 * PI => {
            let near = cert.witnesses.iter().any(|w| (w.t - 2.0 * PI).abs() < 1e-3);
            out.check(
                "certificate_fails",
                !cert.holds && near,
                format!("{} witnesses, one near 2 pi: {near}", cert.witnesses.len()),
            );
        }
        _ => out.warnings.push("no oracle for this manifold; certificate reported only".into()),
    }
    Ok(out)
}

fn mu_thicken(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome> {
    let model = cfg.manifold.expect("validated");
    let mc = cfg.measure.as_ref().expect("validated");
    let (_, s) = submanifold(cfg, model)?;
    let flow = cfg.flow_config();
    let mu = match &mc.measure {
        MeasureSpec::Liouville { count } => InvariantMeasure::liouville(model, *count, cfg.seed)?,
        MeasureSpec::PeriodicOrbit { seed, period, samples } => {
            InvariantMeasure::periodic_orbit(model, *seed, *period, *samples, flow)?
        }
        MeasureSpec::ProductDeltaXi { xi0, side } => InvariantMeasure::product_delta_xi(*xi0, *side)?,
    };
    let th = thicken_measure(&mu, &s, |_| true, &mc.deltas, mc.eps, flow)?;
    let rows: Vec<String> = (0..th.deltas.len())
        .map(|i| format!("{:e},{:.17e},{:.17e}", th.deltas[i], th.estimates[i], th.stderr[i]))
        .collect();
    write_csv(dir, "thickening.csv", "delta,estimate,stderr", &rows)?;
    write_json(dir, "thickening.json", &th)?;
    let mut out = Outcome::default();
    if matches!(mc.measure, MeasureSpec::Liouville { .. }) && model.effective() == ManifoldModel::FlatTorus2 {
        let (density, err) = liouville_density(&th, &model)?;
        let sigma: f64 = s.iter().map(|c| c.weight).sum();
        out.check(
            "liouville_density",
            (density - sigma).abs() <= 3.0 * err,
            format!("{density:.5} +- {err:.5} vs sigma {sigma:.5}"),
        );
    }
    if let Some(want) = mc.expected_limit {
        let rel = (th.limit - want).abs() / want.abs().max(1e-300);
        out.check("limit", rel <= 0.02, format!("limit {:.5} vs {want}", th.limit));
    }
    Ok(out)
}
