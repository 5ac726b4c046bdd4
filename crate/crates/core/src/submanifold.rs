//! Points and closed curves `H`, their unit conormal bundles `SN*H` as
//! weighted samples, and the flow-out injectivity time.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{FlowConfig, Trajectory};
use crate::geometry::{
    conorm, metric_at, phase_coords, phase_delta, sphere_embed, velocity, wrap_diff, Chart,
    CotangentPoint, ManifoldModel, Point, Vec2,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum SubmanifoldKind {
    Point { x: Vec2 },
    /// Closed geodesic traced from `p0` (unit covector) for one period `length`.
    ClosedGeodesic { p0: CotangentPoint, length: f64 },
    /// Sphere latitude `theta = theta0`.
    LatitudeCircle { theta0: f64 },
    /// Closed curve through chart nodes, interpolated by a periodic cubic
    /// spline. Torus nodes may wrap.
    ParamCurve { nodes: Vec<Vec2> },
}

/// Quadrature node on `H` with its `g`-unit tangent (zero for a point).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadNode {
    pub point: Point,
    pub weight: f64,
    pub tangent: Vec2,
    pub param: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Submanifold {
    pub model: ManifoldModel,
    pub kind: SubmanifoldKind,
    pub codim: usize,
    pub density: f64,
    pub quad_nodes: Vec<QuadNode>,
    /// Upper bound on the geodesic curvature of `H`.
    pub k_h: f64,
}

/// Sample of `SN*H`. `branch` is `+1`/`-1` for the two conormal sides of a
/// curve and `0` for a point. `param` is the angle for a point and the
/// arclength position for a curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConormalSample {
    pub rho: CotangentPoint,
    pub weight: f64,
    pub base_index: usize,
    pub branch: i8,
    pub param: f64,
}

/// Safety factor applied to the measured maximal geodesic curvature.
pub const CURVATURE_SAFETY: f64 = 1.5;

impl Submanifold {
    pub fn new(model: ManifoldModel, kind: SubmanifoldKind, density: f64) -> Result<Self> {
        model.validate()?;
        if !(density >= 4.0) {
            return Err(Error::Domain(format!("density {density} below 4")));
        }
        let (codim, quad_nodes) = match &kind {
            SubmanifoldKind::Point { x } => {
                if let ManifoldModel::Sphere2 = model {
                    metric_at(&model, x)?;
                }
                let point = Point::new(*x);
                (
                    2,
                    vec![QuadNode {
                        point,
                        weight: 1.0,
                        tangent: [0.0, 0.0],
                        param: 0.0,
                    }],
                )
            }
            SubmanifoldKind::LatitudeCircle { theta0 } => {
                if model != ManifoldModel::Sphere2 {
                    return Err(Error::InvalidModel("latitude circles live on the sphere".into()));
                }
                metric_at(&model, &[*theta0, 0.0])?;
                let s = theta0.sin();
                let len = 2.0 * PI * s;
                let count = node_count(density, len);
                let nodes = (0..count)
                    .map(|j| {
                        let ph = 2.0 * PI * j as f64 / count as f64;
                        QuadNode {
                            point: Point::new([*theta0, ph]),
                            weight: len / count as f64,
                            tangent: [0.0, 1.0 / s],
                            param: len * j as f64 / count as f64,
                        }
                    })
                    .collect();
                (1, nodes)
            }
            SubmanifoldKind::ClosedGeodesic { p0, length } => {
                (1, geodesic_nodes(&model, p0, *length, density)?)
            }
            SubmanifoldKind::ParamCurve { nodes } => (1, spline_nodes(&model, nodes, density)?),
        };
        let k_h = if codim == 2 {
            0.0
        } else {
            CURVATURE_SAFETY * node_curvatures(&model, &quad_nodes).into_iter().fold(0.0, f64::max)
        };
        Ok(Submanifold {
            model,
            kind,
            codim,
            density,
            quad_nodes,
            k_h,
        })
    }

    /// Riemannian volume from the quadrature (1 for a point).
    pub fn volume(&self) -> f64 {
        self.quad_nodes.iter().map(|n| n.weight).sum()
    }

    /// Same `H` rebuilt at another density.
    pub fn with_density(&self, density: f64) -> Result<Self> {
        Submanifold::new(self.model, self.kind.clone(), density)
    }
}

fn node_count(density: f64, len: f64) -> usize {
    ((density * len).ceil() as usize).max(8)
}

fn geodesic_nodes(
    m: &ManifoldModel,
    p0: &CotangentPoint,
    length: f64,
    density: f64,
) -> Result<Vec<QuadNode>> {
    if (conorm(m, p0) - 1.0).abs() > 1e-8 {
        return Err(Error::Domain("closed geodesic seed must be a unit covector".into()));
    }
    let cfg = FlowConfig {
        tol: 1e-10,
        ..FlowConfig::default()
    };
    let count = node_count(density, length);
    let mut tr = Trajectory::new(*m, *p0, cfg, false)?;
    let mut nodes = Vec::with_capacity(count);
    for j in 0..count {
        let t = length * j as f64 / count as f64;
        let p = tr.advance_to(t)?.wrapped(m);
        nodes.push(QuadNode {
            point: p.base(),
            weight: length / count as f64,
            tangent: velocity(m, &p),
            param: t,
        });
    }
    let end = tr.advance_to(length)?.wrapped(m);
    if crate::geometry::phase_distance(m, &end, &tr.start().clone()) > 1e-6 {
        return Err(Error::Domain(format!(
            "geodesic from {:?} does not close after length {length}",
            p0.x
        )));
    }
    Ok(nodes)
}

/// Periodic cubic spline through uniformly parametrized values.
struct PeriodicSpline {
    y: Vec<f64>,
    m: Vec<f64>,
}

impl PeriodicSpline {
    fn new(y: Vec<f64>) -> Self {
        let n = y.len();
        let rhs: Vec<f64> = (0..n)
            .map(|j| 6.0 * (y[(j + 1) % n] - 2.0 * y[j] + y[(j + n - 1) % n]))
            .collect();
        // M_{j-1} + 4 M_j + M_{j+1} = rhs_j is strictly diagonally dominant
        let mut m = vec![0.0; n];
        for _ in 0..200 {
            let mut change: f64 = 0.0;
            for j in 0..n {
                let v = (rhs[j] - m[(j + n - 1) % n] - m[(j + 1) % n]) / 4.0;
                change = change.max((v - m[j]).abs());
                m[j] = v;
            }
            if change < 1e-16 * (1.0 + rhs.iter().fold(0.0f64, |a, b| a.max(b.abs()))) {
                break;
            }
        }
        PeriodicSpline { y, m }
    }

    /// Value, first and second derivative at parameter `s` (period `n`).
    fn eval(&self, s: f64) -> (f64, f64, f64) {
        let n = self.y.len();
        let s = s.rem_euclid(n as f64);
        let j = (s.floor() as usize).min(n - 1);
        let u = s - j as f64;
        let (y0, y1) = (self.y[j], self.y[(j + 1) % n]);
        let (m0, m1) = (self.m[j], self.m[(j + 1) % n]);
        let w = 1.0 - u;
        let v = w * y0 + u * y1 + ((w * w * w - w) * m0 + (u * u * u - u) * m1) / 6.0;
        let d = y1 - y0 + ((1.0 - 3.0 * w * w) * m0 + (3.0 * u * u - 1.0) * m1) / 6.0;
        let dd = w * m0 + u * m1;
        (v, d, dd)
    }
}

fn spline_nodes(m: &ManifoldModel, raw: &[Vec2], density: f64) -> Result<Vec<QuadNode>> {
    let n = raw.len();
    if n < 3 {
        return Err(Error::Domain("a closed curve needs at least 3 nodes".into()));
    }
    let torus = m.is_torus();
    // unwrap consecutive torus nodes; `wind` is the closing displacement
    let mut y = vec![raw[0]];
    for j in 1..n {
        let prev = y[j - 1];
        let d = if torus {
            [wrap_diff(raw[j][0] - raw[j - 1][0]), wrap_diff(raw[j][1] - raw[j - 1][1])]
        } else {
            [raw[j][0] - raw[j - 1][0], raw[j][1] - raw[j - 1][1]]
        };
        y.push([prev[0] + d[0], prev[1] + d[1]]);
    }
    let wind = if torus {
        let last = y[n - 1];
        let d = [wrap_diff(raw[0][0] - raw[n - 1][0]), wrap_diff(raw[0][1] - raw[n - 1][1])];
        [last[0] + d[0] - y[0][0], last[1] + d[1] - y[0][1]]
    } else {
        [0.0, 0.0]
    };
    let per = |c: usize| {
        PeriodicSpline::new(
            (0..n)
                .map(|j| y[j][c] - wind[c] * j as f64 / n as f64)
                .collect(),
        )
    };
    let sp = [per(0), per(1)];
    let eval = |s: f64| {
        let a = sp[0].eval(s);
        let b = sp[1].eval(s);
        let x = [a.0 + wind[0] * s / n as f64, b.0 + wind[1] * s / n as f64];
        let dx = [a.1 + wind[0] / n as f64, b.1 + wind[1] / n as f64];
        (x, dx)
    };
    let speed = |x: &Vec2, dx: &Vec2| -> Result<f64> {
        let md = metric_at(m, x)?;
        let v = nalgebra::Vector2::new(dx[0], dx[1]);
        Ok((v.transpose() * md.g * v)[0].sqrt())
    };
    // length from a fine periodic trapezoid pass
    let fine = 16 * n;
    let mut len = 0.0;
    for i in 0..fine {
        let s = n as f64 * i as f64 / fine as f64;
        let (x, dx) = eval(s);
        len += speed(&x, &dx)? * n as f64 / fine as f64;
    }
    // a multiple of the knot count keeps the trapezoid rule aligned with
    // the spline pieces
    let count = node_count(density, len).div_ceil(n) * n;
    let mut nodes = Vec::with_capacity(count);
    let mut arc = 0.0;
    for i in 0..count {
        let s = n as f64 * i as f64 / count as f64;
        let (x, dx) = eval(s);
        let sp = speed(&x, &dx)?;
        if sp < 1e-12 {
            return Err(Error::DegenerateCurve(i));
        }
        let xw = if torus {
            crate::geometry::normalize_torus(x)
        } else {
            x
        };
        nodes.push(QuadNode {
            point: Point::new(xw),
            weight: sp * n as f64 / count as f64,
            tangent: [dx[0] / sp, dx[1] / sp],
            param: arc,
        });
        arc += sp * n as f64 / count as f64;
    }
    Ok(nodes)
}

/// Geodesic curvature at each node from periodic central differences.
fn node_curvatures(m: &ManifoldModel, nodes: &[QuadNode]) -> Vec<f64> {
    let n = nodes.len();
    (0..n)
        .map(|j| {
            let (a, b, c) = (&nodes[(j + n - 1) % n], &nodes[j], &nodes[(j + 1) % n]);
            match m {
                ManifoldModel::Sphere2 => {
                    let (pa, pb, pc) = (sphere_embed(&a.point), sphere_embed(&b.point), sphere_embed(&c.point));
                    let d1 = (pc - pa) / 2.0;
                    let d2 = pc - pb * 2.0 + pa;
                    let v2 = d1.norm_squared();
                    let perp = d2 - d1 * (d2.dot(&d1) / v2);
                    let tang = perp - pb * perp.dot(&pb);
                    tang.norm() / v2
                }
                _ => {
                    let xb = b.point.x;
                    let ua = [xb[0] + wrap_diff(a.point.x[0] - xb[0]), xb[1] + wrap_diff(a.point.x[1] - xb[1])];
                    let uc = [xb[0] + wrap_diff(c.point.x[0] - xb[0]), xb[1] + wrap_diff(c.point.x[1] - xb[1])];
                    let v = [(uc[0] - ua[0]) / 2.0, (uc[1] - ua[1]) / 2.0];
                    let acc0 = [uc[0] - 2.0 * xb[0] + ua[0], uc[1] - 2.0 * xb[1] + ua[1]];
                    let Ok(md) = metric_at(m, &xb) else { return f64::INFINITY };
                    let mut acc = acc0;
                    for (i, ai) in acc.iter_mut().enumerate() {
                        for jj in 0..2 {
                            for k in 0..2 {
                                *ai += md.christoffel[i][jj][k] * v[jj] * v[k];
                            }
                        }
                    }
                    let ip = |p: &Vec2, q: &Vec2| {
                        let mut s = 0.0;
                        for i in 0..2 {
                            for k in 0..2 {
                                s += md.g[(i, k)] * p[i] * q[k];
                            }
                        }
                        s
                    };
                    let vv = ip(&v, &v);
                    let r = ip(&acc, &v) / vv;
                    let perp = [acc[0] - r * v[0], acc[1] - r * v[1]];
                    ip(&perp, &perp).sqrt() / vv
                }
            }
        })
        .collect()
}

/// Unit conormal samples. For a point: `ceil(2 pi density)` directions of
/// weight `2 pi / count`. For a curve: two branches per node, each carrying
/// the node's arclength weight.
pub fn sample_conormal(h: &Submanifold, density: f64) -> Result<Vec<ConormalSample>> {
    let h = if density != h.density {
        h.with_density(density)?
    } else {
        h.clone()
    };
    let m = &h.model;
    if h.codim == 2 {
        let x = h.quad_nodes[0].point.x;
        let count = ((2.0 * PI * density).ceil() as usize).max(8);
        return Ok((0..count)
            .map(|j| {
                let a = 2.0 * PI * j as f64 / count as f64;
                ConormalSample {
                    rho: CotangentPoint {
                        x,
                        xi: crate::geometry::unit_covector(m, &x, a),
                        chart: Chart::Primary,
                    },
                    weight: 2.0 * PI / count as f64,
                    base_index: 0,
                    branch: 0,
                    param: a,
                }
            })
            .collect());
    }
    let mut out = Vec::with_capacity(2 * h.quad_nodes.len());
    for branch in [1i8, -1] {
        for (i, node) in h.quad_nodes.iter().enumerate() {
            let t = node.tangent;
            if t[0].hypot(t[1]) < 1e-12 {
                return Err(Error::DegenerateCurve(i));
            }
            let mut rho = CotangentPoint {
                x: node.point.x,
                xi: [-t[1], t[0]],
                chart: node.point.chart,
            };
            let nrm = conorm(m, &rho);
            let s = branch as f64 / nrm;
            rho.xi = [rho.xi[0] * s, rho.xi[1] * s];
            out.push(ConormalSample {
                rho,
                weight: node.weight,
                base_index: i,
                branch,
                param: node.param,
            });
        }
    }
    Ok(out)
}

/// `sigma(A)` for a predicate on samples.
pub fn conormal_measure<F: Fn(&ConormalSample) -> bool>(samples: &[ConormalSample], a: F) -> f64 {
    samples.iter().filter(|s| a(s)).map(|s| s.weight).sum()
}

/// `max |xi(T)|` over curve samples: the conormality residual.
pub fn conormality_residual(h: &Submanifold, samples: &[ConormalSample]) -> f64 {
    if h.codim == 2 {
        return 0.0;
    }
    samples
        .iter()
        .map(|s| {
            let t = h.quad_nodes[s.base_index].tangent;
            (s.rho.xi[0] * t[0] + s.rho.xi[1] * t[1]).abs()
        })
        .fold(0.0, f64::max)
}

/// Read curve nodes from a CSV of `x1,x2` rows. A non-numeric first row is
/// treated as a header.
pub fn read_curve_csv(path: &Path) -> Result<Vec<Vec2>> {
    let text = std::fs::read_to_string(path)?;
    let mut nodes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed = (f.len() == 2)
            .then(|| Some([f[0].parse::<f64>().ok()?, f[1].parse::<f64>().ok()?]))
            .flatten();
        match parsed {
            Some(p) => nodes.push(p),
            None if i == 0 => continue,
            None => return Err(Error::Config(format!("{}: bad row {}", path.display(), i + 1))),
        }
    }
    Ok(nodes)
}

// ---------------------------------------------------------------------------
// sample cloud

/// Conormal samples as closed polygonal chains in ambient phase
/// coordinates, with a spatial hash on base positions. Distances to the
/// cloud are distances to the chains.
#[derive(Clone, Debug)]
pub struct SampleCloud {
    model: ManifoldModel,
    coords: Vec<[f64; 6]>,
    /// (from, to) sample indices of chain segments.
    segments: Vec<(usize, usize)>,
    cell: f64,
    torus_cells: i64,
    grid: HashMap<(i64, i64, i64), Vec<usize>>,
    half_seg: f64,
}

/// Nearest point of the cloud: distance, segment and fraction along it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CloudHit {
    pub distance: f64,
    pub from: usize,
    pub to: usize,
    pub frac: f64,
}

impl CloudHit {
    /// Sample index closest to the hit point.
    pub fn nearest_sample(&self) -> usize {
        if self.frac < 0.5 {
            self.from
        } else {
            self.to
        }
    }
}

impl SampleCloud {
    pub fn new(model: ManifoldModel, samples: &[ConormalSample], cell: f64) -> Self {
        let coords: Vec<[f64; 6]> = samples.iter().map(|s| phase_coords(&model, &s.rho)).collect();
        // chains: group by branch, order by parameter, close periodically
        let mut chains: HashMap<i8, Vec<usize>> = HashMap::new();
        for (i, s) in samples.iter().enumerate() {
            chains.entry(s.branch).or_default().push(i);
        }
        let mut segments = Vec::new();
        let mut keys: Vec<i8> = chains.keys().copied().collect();
        keys.sort();
        for k in keys {
            let mut idx = chains.remove(&k).unwrap_or_default();
            idx.sort_by(|a, b| samples[*a].param.total_cmp(&samples[*b].param));
            let n = idx.len();
            if n == 1 {
                segments.push((idx[0], idx[0]));
            } else {
                for j in 0..n {
                    segments.push((idx[j], idx[(j + 1) % n]));
                }
            }
        }
        let torus_cells = if model.is_torus() {
            ((1.0 / cell).floor() as i64).max(1)
        } else {
            0
        };
        let cell = if model.is_torus() {
            1.0 / torus_cells as f64
        } else {
            cell
        };
        let mut cloud = SampleCloud {
            model,
            coords,
            segments,
            cell,
            torus_cells,
            grid: HashMap::new(),
            half_seg: 0.0,
        };
        let mut half: f64 = 0.0;
        for (si, &(a, b)) in cloud.segments.iter().enumerate() {
            let d = phase_delta(&model, &cloud.coords[a], &cloud.coords[b]);
            let mid = cloud.coords[a]
                .iter()
                .zip(d.iter())
                .map(|(x, dx)| x + dx / 2.0)
                .collect::<Vec<_>>();
            let base = cloud.base_len(&d);
            half = half.max(base / 2.0);
            let key = cloud.key(&[mid[0], mid[1], mid[2]]);
            cloud.grid.entry(key).or_default().push(si);
        }
        cloud.half_seg = half;
        cloud
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    fn base_len(&self, d: &[f64; 6]) -> f64 {
        if self.model.is_torus() {
            d[0].hypot(d[1])
        } else {
            (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
        }
    }

    fn key(&self, b: &[f64; 3]) -> (i64, i64, i64) {
        if self.model.is_torus() {
            let n = self.torus_cells;
            let f = |v: f64| ((v.rem_euclid(1.0) * n as f64).floor() as i64).rem_euclid(n);
            (f(b[0]), f(b[1]), 0)
        } else {
            let f = |v: f64| (v / self.cell).floor() as i64;
            (f(b[0]), f(b[1]), f(b[2]))
        }
    }

    /// Distance from the query (offset `w` from sample `a`) to the chain
    /// point at `frac` along the segment `d`, after restoring the length of
    /// the covector part and, on the sphere, projecting back to the unit
    /// sphere. This removes the chord sag of the polygonal chain.
    fn curved_gap(&self, a: usize, d: &[f64; 6], w: &[f64; 6], frac: f64) -> f64 {
        let mut c = [0.0; 6];
        for i in 0..6 {
            c[i] = frac * d[i];
        }
        let ca = &self.coords[a];
        let na = (ca[3] * ca[3] + ca[4] * ca[4] + ca[5] * ca[5]).sqrt();
        let e: Vec<f64> = (0..6).map(|i| ca[i] + d[i]).collect();
        let nb = (e[3] * e[3] + e[4] * e[4] + e[5] * e[5]).sqrt();
        if self.model.is_torus() {
            // covector stored in slots 2, 3
            let na = ca[2].hypot(ca[3]);
            let nb = e[2].hypot(e[3]);
            let (x, y) = (ca[2] + c[2], ca[3] + c[3]);
            let n = x.hypot(y);
            if n > 0.0 {
                let target = na + frac * (nb - na);
                c[2] = x * target / n - ca[2];
                c[3] = y * target / n - ca[3];
            }
        } else {
            let mut p = Vector3::new(ca[0] + c[0], ca[1] + c[1], ca[2] + c[2]);
            let pn = p.norm();
            if pn > 0.0 {
                p /= pn;
            }
            let mut v = Vector3::new(ca[3] + c[3], ca[4] + c[4], ca[5] + c[5]);
            v -= p * v.dot(&p);
            let vn = v.norm();
            if vn > 0.0 {
                v *= (na + frac * (nb - na)) / vn;
            }
            for i in 0..3 {
                c[i] = p[i] - ca[i];
                c[i + 3] = v[i] - ca[i + 3];
            }
        }
        (0..6).map(|i| (w[i] - c[i]).powi(2)).sum::<f64>().sqrt()
    }

    /// Nearest chain point within `radius` of `q` (ambient phase coordinates).
    pub fn nearest(&self, q: &[f64; 6], radius: f64) -> Option<CloudHit> {
        let reach = radius + self.half_seg;
        let r = (reach / self.cell).ceil() as i64;
        let (cx, cy, cz) = self.key(&[q[0], q[1], q[2]]);
        let mut best: Option<CloudHit> = None;
        let mut visit = |key: (i64, i64, i64)| {
            if let Some(list) = self.grid.get(&key) {
                for &si in list {
                    let (a, b) = self.segments[si];
                    let d = phase_delta(&self.model, &self.coords[a], &self.coords[b]);
                    let w = phase_delta(&self.model, &self.coords[a], q);
                    let dd: f64 = d.iter().map(|v| v * v).sum();
                    let frac = if dd > 0.0 {
                        (d.iter().zip(w.iter()).map(|(x, y)| x * y).sum::<f64>() / dd).clamp(0.0, 1.0)
                    } else {
                        0.0
                    };
                    let dist = self.curved_gap(a, &d, &w, frac);
                    if dist <= radius && best.is_none_or(|h| dist < h.distance) {
                        best = Some(CloudHit {
                            distance: dist,
                            from: a,
                            to: b,
                            frac,
                        });
                    }
                }
            }
        };
        if self.model.is_torus() {
            let n = self.torus_cells;
            let r = r.min(n / 2);
            let mut seen = std::collections::HashSet::new();
            for i in -r..=r {
                for j in -r..=r {
                    let key = ((cx + i).rem_euclid(n), (cy + j).rem_euclid(n), 0);
                    if seen.insert(key) {
                        visit(key);
                    }
                }
            }
        } else {
            for i in -r..=r {
                for j in -r..=r {
                    for k in -r..=r {
                        visit((cx + i, cy + j, cz + k));
                    }
                }
            }
        }
        best
    }
}

// ---------------------------------------------------------------------------
// injectivity time

/// Largest `tau <= 1` on the grid `{k * grid}` such that the flow-out
/// `(t, q) -> G^t(q)`, `|t| < tau`, has no collisions at separation `sep`.
///
/// A collision `G^t(q) = G^{t'}(q')` means `G^{t-t'}(q) = q'`, so the
/// search flows every sample for `s` in `(2 sep, 2]` and records the first
/// time it comes within `sep` of the sample cloud; `tau` is the largest grid
/// value with `2 tau` below that time.
pub fn injectivity_time(
    h: &Submanifold,
    samples: &[ConormalSample],
    grid: f64,
    sep: f64,
) -> Result<f64> {
    let m = h.model;
    let coords: Vec<[f64; 6]> = samples.iter().map(|s| phase_coords(&m, &s.rho)).collect();
    // duplicated samples make the flow-out non-injective at t = 0
    let cloud = SampleCloud::new(m, samples, sep.max(1e-3) * 4.0);
    for (i, c) in coords.iter().enumerate() {
        for (j, d) in coords.iter().enumerate().skip(i + 1) {
            if crate::geometry::norm6(&phase_delta(&m, c, d)) < 1e-12 {
                return Err(Error::DuplicateSamples(i, j));
            }
        }
    }
    let cfg = FlowConfig::default();
    let s_max = 2.0;
    let ds = (sep / 4.0).min(grid / 2.0);
    let first_hit = |s: &ConormalSample| -> Result<f64> {
        let mut best = s_max;
        for dir in [1.0, -1.0] {
            let mut tr = Trajectory::new(m, s.rho, cfg, false)?;
            let mut t = 2.0 * sep;
            while t <= best {
                let p = tr.advance_to(dir * t)?.raw;
                if cloud.nearest(&phase_coords(&m, &p), sep).is_some() {
                    best = t;
                    break;
                }
                t += ds;
            }
        }
        Ok(best)
    };
    use rayon::prelude::*;
    let s_star = samples
        .par_iter()
        .map(first_hit)
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(s_max, f64::min);
    if s_star >= s_max {
        return Ok(1.0);
    }
    let k = ((s_star / 2.0) / grid + 1e-12).floor();
    let mut tau = (k * grid).min(1.0);
    if 2.0 * tau >= s_star && tau > 0.0 {
        tau -= grid;
    }
    Ok(tau.max(0.0))
}

/// Unit vector of the embedded sphere point of a sample.
pub fn sample_position(m: &ManifoldModel, s: &ConormalSample) -> Vector3<f64> {
    match m {
        ManifoldModel::Sphere2 => sphere_embed(&s.rho.base()),
        _ => Vector3::new(s.rho.x[0], s.rho.x[1], 0.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn sphere_point_h() -> Submanifold {
        Submanifold::new(ManifoldModel::Sphere2, SubmanifoldKind::Point { x: [1.0, 0.5] }, 16.0).unwrap()
    }

    fn equator() -> Submanifold {
        Submanifold::new(
            ManifoldModel::Sphere2,
            SubmanifoldKind::LatitudeCircle { theta0: PI / 2.0 },
            16.0,
        )
        .unwrap()
    }

    fn torus_line() -> Submanifold {
        Submanifold::new(
            ManifoldModel::FlatTorus2,
            SubmanifoldKind::ClosedGeodesic {
                p0: CotangentPoint::new([0.0, 0.0], [1.0, 0.0]),
                length: 1.0,
            },
            32.0,
        )
        .unwrap()
    }

    #[test]
    fn total_measures() {
        let s = sample_conormal(&sphere_point_h(), 16.0).unwrap();
        assert_relative_eq!(conormal_measure(&s, |_| true), 2.0 * PI, epsilon = 1e-12);

        let s = sample_conormal(&equator(), 16.0).unwrap();
        // independent sum: two branches of 2 pi each
        let brute: f64 = s.iter().map(|x| x.weight).sum();
        assert_relative_eq!(brute, 4.0 * PI, epsilon = 1e-10);

        let h = torus_line();
        let s = sample_conormal(&h, 32.0).unwrap();
        assert_relative_eq!(conormal_measure(&s, |_| true), 2.0, epsilon = 1e-10);
        assert_relative_eq!(conormal_measure(&s, |x| x.branch > 0), 1.0, epsilon = 1e-10);
        for x in &s {
            assert!(x.rho.x[1].abs() < 1e-12);
            assert!(x.rho.xi[0].abs() < 1e-12);
            assert_relative_eq!(x.rho.xi[1].abs(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn half_circle_measure() {
        let density = 16.0;
        let s = sample_conormal(&sphere_point_h(), density).unwrap();
        let half = conormal_measure(&s, |x| x.param < PI);
        assert!((half - PI).abs() <= 2.0 * PI / density);
    }

    #[test]
    fn conormality_and_unit_norm() {
        let m = ManifoldModel::ConformalTorus2 {
            amplitude: 0.2,
            frequency: 1,
        };
        let nodes: Vec<Vec2> = (0..40)
            .map(|j| {
                let a = 2.0 * PI * j as f64 / 40.0;
                [0.5 + 0.2 * a.cos(), 0.5 + 0.1 * a.sin()]
            })
            .collect();
        let h = Submanifold::new(m, SubmanifoldKind::ParamCurve { nodes }, 64.0).unwrap();
        let s = sample_conormal(&h, 64.0).unwrap();
        assert!(conormality_residual(&h, &s) < 1e-8);
        for x in &s {
            assert!((conorm(&m, &x.rho) - 1.0).abs() < 1e-12);
        }
        for h in [equator(), torus_line()] {
            let s = sample_conormal(&h, h.density).unwrap();
            assert!(conormality_residual(&h, &s) < 1e-8);
        }
    }

    #[test]
    fn latitude_curvature_bound() {
        let th = 0.9;
        let h = Submanifold::new(
            ManifoldModel::Sphere2,
            SubmanifoldKind::LatitudeCircle { theta0: th },
            32.0,
        )
        .unwrap();
        let exact = th.cos() / th.sin();
        assert!(h.k_h >= exact);
        assert!(h.k_h <= CURVATURE_SAFETY * exact * 1.01);
        assert_relative_eq!(h.volume(), 2.0 * PI * th.sin(), epsilon = 1e-10);
        assert!(equator().k_h < 1e-10);
    }

    #[test]
    fn spline_circle_length_converges() {
        // Euclidean circle of radius 0.2 in the flat torus, length 0.4 pi
        let mk = |n: usize| {
            let nodes: Vec<Vec2> = (0..n)
                .map(|j| {
                    let a = 2.0 * PI * j as f64 / n as f64;
                    [0.5 + 0.2 * a.cos(), 0.5 + 0.2 * a.sin()]
                })
                .collect();
            Submanifold::new(ManifoldModel::FlatTorus2, SubmanifoldKind::ParamCurve { nodes }, 64.0).unwrap()
        };
        let exact = 0.4 * PI;
        let e1 = (mk(16).volume() - exact).abs();
        let e2 = (mk(32).volume() - exact).abs();
        assert!(e2 < e1 / 4.0, "order below 2: {e1} {e2}");
        let h = mk(64);
        assert!(h.k_h >= 5.0 * 0.99);
    }

    #[test]
    fn wrapping_curve() {
        // a curve winding once horizontally
        let nodes: Vec<Vec2> = (0..20)
            .map(|j| {
                let s = j as f64 / 20.0;
                [s, 0.5 + 0.05 * (2.0 * PI * s).sin()]
            })
            .collect();
        let h = Submanifold::new(ManifoldModel::FlatTorus2, SubmanifoldKind::ParamCurve { nodes }, 64.0).unwrap();
        assert!(h.volume() > 1.0 && h.volume() < 1.1);
    }

    #[test]
    fn degenerate_curve_rejected() {
        let nodes = vec![[0.1, 0.1]; 5];
        let e = Submanifold::new(ManifoldModel::FlatTorus2, SubmanifoldKind::ParamCurve { nodes }, 8.0);
        assert!(matches!(e, Err(Error::DegenerateCurve(_))));
    }

    #[test]
    fn injectivity_examples() {
        let m = ManifoldModel::FlatTorus2;
        let h = Submanifold::new(m, SubmanifoldKind::Point { x: [0.3, 0.3] }, 8.0).unwrap();
        let s = sample_conormal(&h, 8.0).unwrap();
        let grid = 1.0 / 64.0;
        let tau = injectivity_time(&h, &s, grid, 0.01).unwrap();
        assert!(tau <= 0.5 && tau >= 0.5 - 2.0 * grid, "{tau}");

        let h = Submanifold::new(
            ManifoldModel::Sphere2,
            SubmanifoldKind::LatitudeCircle { theta0: PI / 2.0 },
            4.0,
        )
        .unwrap();
        let s = sample_conormal(&h, 4.0).unwrap();
        assert_eq!(injectivity_time(&h, &s, 1.0 / 16.0, 0.02).unwrap(), 1.0);
    }

    #[test]
    fn injectivity_conservative_and_converges() {
        let m = ManifoldModel::FlatTorus2;
        let h = Submanifold::new(m, SubmanifoldKind::Point { x: [0.3, 0.3] }, 8.0).unwrap();
        let s = sample_conormal(&h, 8.0).unwrap();
        let mut prev_gap = f64::INFINITY;
        for grid in [1.0 / 8.0, 1.0 / 32.0, 1.0 / 128.0] {
            let tau = injectivity_time(&h, &s, grid, 0.005).unwrap();
            assert!(tau <= 0.5);
            let gap = 0.5 - tau;
            assert!(gap <= prev_gap);
            prev_gap = gap;
        }
        assert!(prev_gap < 0.02);
    }

    #[test]
    fn duplicates_error() {
        let h = sphere_point_h();
        let mut s = sample_conormal(&h, 4.0).unwrap();
        let first = s[0];
        s.push(first);
        assert!(matches!(
            injectivity_time(&h, &s, 0.1, 0.01),
            Err(Error::DuplicateSamples(0, _))
        ));
    }

    #[test]
    fn cloud_nearest_interpolates() {
        let h = torus_line();
        let s = sample_conormal(&h, 8.0).unwrap();
        let cloud = SampleCloud::new(h.model, &s, 0.05);
        // between nodes on the line, upper branch, wrapped x
        let q = [0.999 + 1.0, 0.003, 0.0, 1.0, 0.0, 0.0];
        let hit = cloud.nearest(&q, 0.01).unwrap();
        assert!((hit.distance - 0.003).abs() < 1e-12);
        assert!(cloud.nearest(&[0.5, 0.5, 0.0, 1.0, 0.0, 0.0], 0.01).is_none());
    }

    #[test]
    fn csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        std::fs::write(&p, "x1,x2\n0.1,0.2\n0.3,0.4\n\n0.5,0.9\n").unwrap();
        assert_eq!(read_curve_csv(&p).unwrap(), vec![[0.1, 0.2], [0.3, 0.4], [0.5, 0.9]]);
        std::fs::write(&p, "0.1,0.2\nfoo\n").unwrap();
        assert!(read_curve_csv(&p).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(16))]

            #[test]
            fn density_refinement_converges(r in 0.05..0.3f64, e in 0.3..1.0f64) {
                let nodes: Vec<Vec2> = (0..24)
                    .map(|j| {
                        let a = 2.0 * PI * j as f64 / 24.0;
                        [0.5 + r * a.cos(), 0.5 + e * r * a.sin()]
                    })
                    .collect();
                let m = ManifoldModel::ConformalTorus2 { amplitude: 0.1, frequency: 1 };
                let h = Submanifold::new(m, SubmanifoldKind::ParamCurve { nodes }, 16.0).unwrap();
                let tot = |d: f64| conormal_measure(&sample_conormal(&h, d).unwrap(), |_| true);
                let (a, b, c) = (tot(64.0), tot(128.0), tot(256.0));
                // refinement differences shrink at least quadratically
                prop_assert!((c - b).abs() <= (b - a).abs() / 4.0 + 1e-12, "{a} {b} {c}");
            }
        }
    }
}
