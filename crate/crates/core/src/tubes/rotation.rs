//! Rotation mechanism for a point `H = {x}`: flowed covector arcs meet
//! `S*_x M` transversally at isolated points, which are cut out by a few
//! tubes.

use nalgebra::Vector4;
use serde::{Deserialize, Serialize};

use super::{Direction, TubeCover};
use crate::error::{Error, Result};
use crate::flow::Trajectory;
use crate::geometry::{
    covector_angle, inverse_metric_diag, phase_distance, phase_speed_bound, sphere_embed, unit_covector,
    wrap_diff, CotangentPoint, ManifoldModel, Point,
};
use crate::submanifold::{Submanifold, SubmanifoldKind};

/// Minimum principal angle (radians) between the flowed tangent line of
/// `SN*H` and the tangent line at the landing point.
pub const TRANSVERSALITY_THRESHOLD: f64 = 0.1;

/// Arc points per side of the covector ball.
const ARC_POINTS: usize = 16;
/// Tubes whose centres lie within this many radii of the seed form the ball.
const BALL_RADII: f64 = 6.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intersection {
    /// Covector angle of the arc point that lands on `S*_x M`.
    pub angle: f64,
    pub t: f64,
    pub landing: CotangentPoint,
    /// Principal angle between the flowed and landing tangent lines.
    pub principal_angle: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RotationResult {
    pub intersections: Vec<Intersection>,
    /// Tubes removed around sources and landings of the intersections.
    pub lower_dim_cover: Vec<usize>,
    /// Remaining tubes of the ball about the seed.
    pub complement: Vec<usize>,
    /// Side on which the complement certified, if any.
    pub certified: Option<Direction>,
}

/// Base displacement from `x` to the trajectory point and the sign of the
/// perpendicular offset, in a chart-free form.
struct Probe {
    model: ManifoldModel,
    x: Point,
}

impl Probe {
    /// `(along, offset, distance)` at `p`: `along` is the velocity component
    /// of the displacement `x - base(p)`.
    fn measure(&self, p: &CotangentPoint) -> (f64, f64, f64) {
        match self.model.effective() {
            ManifoldModel::Sphere2 => {
                let (pos, vel) = crate::geometry::sphere_lift(p);
                let d = sphere_embed(&self.x) - pos;
                let normal = pos.cross(&vel);
                (d.dot(&vel), d.dot(&normal), d.norm())
            }
            m => {
                let d = [wrap_diff(self.x.x[0] - p.x[0]), wrap_diff(self.x.x[1] - p.x[1])];
                let v = crate::geometry::velocity(&m, p);
                (d[0] * v[0] + d[1] * v[1], v[0] * d[1] - v[1] * d[0], d[0].hypot(d[1]))
            }
        }
    }
}

struct Arc<'a> {
    cover: &'a TubeCover,
    probe: Probe,
    ds: f64,
}

impl Arc<'_> {
    fn start(&self, a: f64) -> CotangentPoint {
        let x = self.probe.x;
        CotangentPoint {
            x: x.x,
            xi: unit_covector(&self.probe.model, &x.x, a),
            chart: x.chart,
        }
    }

    /// Closest approaches to `x` for `t` in `[t0, t1]`: `(t, offset, distance)`.
    fn approaches(&self, a: f64, t0: f64, t1: f64) -> Result<Vec<(f64, f64, f64)>> {
        let mut tr = Trajectory::new(self.cover.model, self.start(a), self.cover.cfg, false)?;
        let n = ((t1 - t0) / self.ds).ceil() as usize;
        let mut prev: Option<(f64, f64)> = None;
        let mut out = Vec::new();
        for i in 0..=n {
            let t = (t0 + i as f64 * self.ds).min(t1);
            let p = tr.advance_to(t)?.wrapped(&self.cover.model);
            let (along, _, _) = self.probe.measure(&p);
            if let Some((tp, ap)) = prev {
                // distance to x is minimal where the along component turns
                if ap > 0.0 && along <= 0.0 {
                    let tm = self.bisect_along(&mut tr, tp, t)?;
                    let q = tr.advance_to(tm)?.wrapped(&self.cover.model);
                    let (_, off, dist) = self.probe.measure(&q);
                    out.push((tm, off, dist));
                }
            }
            prev = Some((t, along));
        }
        Ok(out)
    }

    fn bisect_along(&self, tr: &mut Trajectory, mut lo: f64, mut hi: f64) -> Result<f64> {
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            let p = tr.advance_to(mid)?.wrapped(&self.cover.model);
            if self.probe.measure(&p).0 > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-13 {
                break;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    /// Offset at the closest approach near `t`.
    fn offset_near(&self, a: f64, t: f64) -> Result<Option<(f64, f64, f64)>> {
        let list = self.approaches(a, t - 2.0 * self.ds, t + 2.0 * self.ds)?;
        Ok(list
            .into_iter()
            .min_by(|p, q| (p.0 - t).abs().partial_cmp(&(q.0 - t).abs()).unwrap()))
    }

    /// Principal angle at an intersection.
    fn principal_angle(&self, a: f64, t: f64) -> Result<(CotangentPoint, f64)> {
        let m = self.cover.model;
        let q = self.start(a);
        let mut tr = Trajectory::new(m, q, self.cover.cfg, true)?;
        let fs = {
            tr.advance_to(t)?;
            tr.flow_state()
        };
        let eps = 1e-6;
        let dxi = |x: &CotangentPoint, ang: f64| -> Vector4<f64> {
            let p = unit_covector(&m, &x.x, ang + eps);
            let n = unit_covector(&m, &x.x, ang - eps);
            Vector4::new(0.0, 0.0, (p[0] - n[0]) / (2.0 * eps), (p[1] - n[1]) / (2.0 * eps))
        };
        let v_in = dxi(&q, a);
        let landing = fs.p;
        let w = dxi(&landing, covector_angle(&m, &landing));
        let u = fs.jac * v_in;
        // orthonormal coordinates at the landing point
        let d = inverse_metric_diag(&m, &landing.x);
        let scale = Vector4::new(1.0 / d[0].sqrt(), 1.0 / d[1].sqrt(), d[0].sqrt(), d[1].sqrt());
        let (u, w) = (u.component_mul(&scale), w.component_mul(&scale));
        let c = (u.dot(&w).abs() / (u.norm() * w.norm())).min(1.0);
        Ok((landing, c.acos()))
    }
}

/// Locate the points where the covector arc of radius `R` about `rho`
/// returns to `S*_x M` for `t` in `t_window`, test transversality there,
/// remove the tubes around them, and certify the rest of the ball.
pub fn rotation_partition(
    h: &Submanifold,
    cover: &TubeCover,
    rho: &CotangentPoint,
    t_window: (f64, f64),
) -> Result<RotationResult> {
    if !matches!(h.kind, SubmanifoldKind::Point { .. }) {
        return Err(Error::Domain("rotation mechanism is implemented for points".into()));
    }
    let (t0, t1) = t_window;
    if !(0.0 < t0 && t0 < t1) {
        return Err(Error::Domain(format!("window [{t0}, {t1}] must be positive and nonempty")));
    }
    let m = cover.model;
    let r = cover.radius;
    let arc = Arc {
        cover,
        probe: Probe { model: m, x: rho.base() },
        ds: r / (8.0 * phase_speed_bound(&m)),
    };
    let a0 = covector_angle(&m, rho);
    let grid: Vec<f64> = (0..=2 * ARC_POINTS)
        .map(|i| a0 - r + i as f64 * r / ARC_POINTS as f64)
        .collect();
    let pad = 2.0 * arc.ds;
    let scans: Vec<Vec<(f64, f64, f64)>> = grid
        .iter()
        .map(|&a| arc.approaches(a, (t0 - pad).max(0.0), t1 + pad))
        .collect::<Result<_>>()?;

    let mut found: Vec<(f64, f64)> = Vec::new();
    let zero = 1e-9;
    for (j, list) in scans.iter().enumerate() {
        for &(t, _, dist) in list {
            if dist < zero && t >= t0 && t <= t1 {
                found.push((grid[j], t));
            }
        }
    }
    for j in 0..grid.len() - 1 {
        for &(t, off, _) in &scans[j] {
            let Some(&(t2, off2, _)) = scans[j + 1]
                .iter()
                .min_by(|p, q| (p.0 - t).abs().partial_cmp(&(q.0 - t).abs()).unwrap())
            else {
                continue;
            };
            if (t2 - t).abs() > 4.0 * arc.ds || off.abs() < zero || off2.abs() < zero || off.signum() == off2.signum() {
                continue;
            }
            let (mut lo, mut hi, mut tl) = (grid[j], grid[j + 1], t);
            let s_lo = off.signum();
            let mut hit = None;
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                let Some((tm, om, dm)) = arc.offset_near(mid, tl)? else {
                    break;
                };
                tl = tm;
                hit = Some((mid, tm, dm));
                if om.signum() == s_lo {
                    lo = mid;
                } else {
                    hi = mid;
                }
                if hi - lo < 1e-12 {
                    break;
                }
            }
            if let Some((a, tm, dm)) = hit {
                if dm < 1e-6 && tm >= t0 && tm <= t1 {
                    found.push((a, tm));
                }
            }
        }
    }
    found.sort_by(|p, q| p.partial_cmp(q).unwrap());
    found.dedup_by(|p, q| (p.0 - q.0).abs() < 1e-9 && (p.1 - q.1).abs() < 1e-6);

    let mut intersections = Vec::new();
    for &(a, t) in &found {
        let (landing, angle) = arc.principal_angle(a, t)?;
        if angle < TRANSVERSALITY_THRESHOLD {
            return Err(Error::Transversality {
                angle,
                threshold: TRANSVERSALITY_THRESHOLD,
            });
        }
        intersections.push(Intersection {
            angle: a,
            t,
            landing,
            principal_angle: angle,
        });
    }

    let ball: Vec<usize> = (0..cover.len())
        .filter(|&j| phase_distance(&m, &cover.tubes[j].center.rho, rho) < BALL_RADII * r)
        .collect();
    let mut lower = Vec::new();
    for it in &intersections {
        let reach = r * (2.0 + 1.0 / it.principal_angle.sin());
        let src = arc.start(it.angle);
        for j in 0..cover.len() {
            let c = &cover.tubes[j].center.rho;
            if phase_distance(&m, c, &src) < reach || phase_distance(&m, c, &it.landing) < reach {
                lower.push(j);
            }
        }
    }
    lower.sort_unstable();
    lower.dedup();
    let complement: Vec<usize> = ball.into_iter().filter(|j| !lower.contains(j)).collect();
    let certified = cover.certify(&complement, t0, t1, 1.0)?;
    Ok(RotationResult {
        intersections,
        lower_dim_cover: lower,
        complement,
        certified,
    })
}
