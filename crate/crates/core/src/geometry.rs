//! Model surfaces: the round sphere, the flat torus and a conformally
//! perturbed torus.
//!
//! Torus coordinates live in `[0,1)^2`. The sphere is covered by two
//! spherical charts, the second one obtained by rotating the embedding so
//! that its poles sit on the equator of the first. Every chart carries the
//! same metric expression `diag(1, sin^2 theta)`.

use std::f64::consts::PI;

use nalgebra::{Matrix2, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{FlowConfig, Trajectory};

pub type Vec2 = [f64; 2];

/// Distance from a pole below which a sphere chart is rejected.
pub const POLE_GUARD: f64 = 1e-8;
/// Charts are switched when the colatitude leaves `(SWITCH, pi - SWITCH)`.
pub const CHART_SWITCH: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum ManifoldModel {
    Sphere2,
    FlatTorus2,
    ConformalTorus2 { amplitude: f64, frequency: i32 },
}

impl ManifoldModel {
    pub fn dim(&self) -> usize {
        2
    }

    pub fn validate(&self) -> Result<()> {
        if let ManifoldModel::ConformalTorus2 {
            amplitude,
            frequency,
        } = *self
        {
            if !(0.0..0.5).contains(&amplitude) {
                return Err(Error::InvalidModel(format!(
                    "amplitude {amplitude} outside [0, 0.5)"
                )));
            }
            if frequency < 1 {
                return Err(Error::InvalidModel(format!(
                    "frequency {frequency} must be positive"
                )));
            }
        }
        Ok(())
    }

    /// Conformal torus with zero amplitude is the flat torus.
    pub fn effective(&self) -> ManifoldModel {
        match *self {
            ManifoldModel::ConformalTorus2 { amplitude, .. } if amplitude == 0.0 => {
                ManifoldModel::FlatTorus2
            }
            m => m,
        }
    }

    pub fn is_torus(&self) -> bool {
        !matches!(self, ManifoldModel::Sphere2)
    }

    /// Riemannian area of the surface.
    pub fn area(&self) -> f64 {
        match self.effective() {
            ManifoldModel::Sphere2 => 4.0 * PI,
            ManifoldModel::FlatTorus2 => 1.0,
            ManifoldModel::ConformalTorus2 { amplitude, .. } => {
                // integral of exp(2 a cos(2 pi k x)) over one period is I0(2a)
                bessel_i0(2.0 * amplitude)
            }
        }
    }

    /// Liouville volume of the unit cosphere bundle.
    pub fn cosphere_volume(&self) -> f64 {
        2.0 * PI * self.area()
    }
}

fn bessel_i0(x: f64) -> f64 {
    let mut term = 1.0;
    let mut sum = 1.0;
    let q = x * x / 4.0;
    for k in 1..60 {
        term *= q / (k as f64 * k as f64);
        sum += term;
        if term < 1e-17 * sum {
            break;
        }
    }
    sum
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Chart {
    #[default]
    Primary,
    Rotated,
}

impl Chart {
    fn rotation(self) -> Matrix3<f64> {
        match self {
            Chart::Primary => Matrix3::identity(),
            // maps e_z to e_x, so the rotated poles sit on the primary equator
            Chart::Rotated => Matrix3::new(0.0, 0.0, 1.0, 0.0, 1.0, 0.0, -1.0, 0.0, 0.0),
        }
    }
}

/// A base point in a chart.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: Vec2,
    #[serde(default)]
    pub chart: Chart,
}

impl Point {
    pub fn new(x: Vec2) -> Self {
        Point {
            x,
            chart: Chart::Primary,
        }
    }
}

/// A phase-space point `(x, xi)` in a chart of a model surface.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct CotangentPoint {
    pub x: Vec2,
    pub xi: Vec2,
    #[serde(default)]
    pub chart: Chart,
}

impl CotangentPoint {
    pub fn new(x: Vec2, xi: Vec2) -> Self {
        CotangentPoint {
            x,
            xi,
            chart: Chart::Primary,
        }
    }

    pub fn base(&self) -> Point {
        Point {
            x: self.x,
            chart: self.chart,
        }
    }
}

/// Metric, inverse metric and Christoffel symbols `christoffel[i][j][k]`
/// for `Gamma^i_{jk}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricData {
    pub g: Matrix2<f64>,
    pub g_inv: Matrix2<f64>,
    pub christoffel: [[[f64; 2]; 2]; 2],
}

/// Conformal exponent `phi(x1) = a cos(2 pi k x1)` and its first two derivatives.
pub(crate) fn conformal_phi(amplitude: f64, frequency: i32, x1: f64) -> (f64, f64, f64) {
    let w = 2.0 * PI * frequency as f64;
    let (s, c) = (w * x1).sin_cos();
    (amplitude * c, -amplitude * w * s, -amplitude * w * w * c)
}

fn check_sphere(x: &Vec2) -> Result<()> {
    if x[0] < POLE_GUARD || PI - x[0] < POLE_GUARD {
        return Err(Error::ChartDomain(*x));
    }
    Ok(())
}

pub fn metric_at(m: &ManifoldModel, x: &Vec2) -> Result<MetricData> {
    let mut christoffel = [[[0.0; 2]; 2]; 2];
    match m.effective() {
        ManifoldModel::FlatTorus2 => Ok(MetricData {
            g: Matrix2::identity(),
            g_inv: Matrix2::identity(),
            christoffel,
        }),
        ManifoldModel::Sphere2 => {
            check_sphere(x)?;
            let (s, c) = x[0].sin_cos();
            christoffel[0][1][1] = -s * c;
            christoffel[1][0][1] = c / s;
            christoffel[1][1][0] = c / s;
            Ok(MetricData {
                g: Matrix2::new(1.0, 0.0, 0.0, s * s),
                g_inv: Matrix2::new(1.0, 0.0, 0.0, 1.0 / (s * s)),
                christoffel,
            })
        }
        ManifoldModel::ConformalTorus2 {
            amplitude,
            frequency,
        } => {
            let (phi, dphi, _) = conformal_phi(amplitude, frequency, x[0]);
            let grad = [dphi, 0.0];
            for (i, gi) in christoffel.iter_mut().enumerate() {
                for (j, gij) in gi.iter_mut().enumerate() {
                    for (k, gijk) in gij.iter_mut().enumerate() {
                        let d = |a: usize, b: usize| if a == b { 1.0 } else { 0.0 };
                        *gijk = d(i, j) * grad[k] + d(i, k) * grad[j] - d(j, k) * grad[i];
                    }
                }
            }
            let e = (2.0 * phi).exp();
            Ok(MetricData {
                g: Matrix2::identity() * e,
                g_inv: Matrix2::identity() / e,
                christoffel,
            })
        }
    }
}

/// Inverse metric diagonal, without chart checks. The sphere value blows up
/// at the poles; callers keep points inside the active chart.
pub(crate) fn inverse_metric_diag(m: &ManifoldModel, x: &Vec2) -> Vec2 {
    match m.effective() {
        ManifoldModel::FlatTorus2 => [1.0, 1.0],
        ManifoldModel::Sphere2 => {
            let s = x[0].sin();
            [1.0, 1.0 / (s * s)]
        }
        ManifoldModel::ConformalTorus2 {
            amplitude,
            frequency,
        } => {
            let e = (-2.0 * conformal_phi(amplitude, frequency, x[0]).0).exp();
            [e, e]
        }
    }
}

/// `|xi|_g = sqrt(xi^T g^{-1} xi)`.
pub fn conorm(m: &ManifoldModel, p: &CotangentPoint) -> f64 {
    let d = inverse_metric_diag(m, &p.x);
    (d[0] * p.xi[0] * p.xi[0] + d[1] * p.xi[1] * p.xi[1]).sqrt()
}

/// Gauss curvature at a chart point.
pub fn gauss_curvature(m: &ManifoldModel, x: &Vec2) -> f64 {
    match m.effective() {
        ManifoldModel::Sphere2 => 1.0,
        ManifoldModel::FlatTorus2 => 0.0,
        ManifoldModel::ConformalTorus2 {
            amplitude,
            frequency,
        } => {
            let (phi, _, ddphi) = conformal_phi(amplitude, frequency, x[0]);
            -(-2.0 * phi).exp() * ddphi
        }
    }
}

/// Unit covector at `x` making angle `angle` with the first orthonormal
/// frame vector (`d/dtheta` on the sphere, `d/dx1` on the tori).
pub fn unit_covector(m: &ManifoldModel, x: &Vec2, angle: f64) -> Vec2 {
    let (s, c) = angle.sin_cos();
    match m.effective() {
        ManifoldModel::FlatTorus2 => [c, s],
        ManifoldModel::Sphere2 => [c, x[0].sin() * s],
        ManifoldModel::ConformalTorus2 {
            amplitude,
            frequency,
        } => {
            let e = conformal_phi(amplitude, frequency, x[0]).0.exp();
            [e * c, e * s]
        }
    }
}

/// Inverse of [`unit_covector`].
pub fn covector_angle(m: &ManifoldModel, p: &CotangentPoint) -> f64 {
    let d = inverse_metric_diag(m, &p.x);
    (p.xi[1] * d[1].sqrt()).atan2(p.xi[0] * d[0].sqrt())
}

/// Velocity `g^{-1} xi` in chart coordinates.
pub fn velocity(m: &ManifoldModel, p: &CotangentPoint) -> Vec2 {
    let d = inverse_metric_diag(m, &p.x);
    [d[0] * p.xi[0], d[1] * p.xi[1]]
}

pub fn wrap_unit(v: f64) -> f64 {
    let r = v - v.floor();
    if r >= 1.0 {
        0.0
    } else {
        r
    }
}

/// Difference wrapped into `[-1/2, 1/2)`.
pub fn wrap_diff(d: f64) -> f64 {
    d - (d + 0.5).floor()
}

pub fn normalize_torus(x: Vec2) -> Vec2 {
    [wrap_unit(x[0]), wrap_unit(x[1])]
}

// ---------------------------------------------------------------------------
// sphere embedding

pub(crate) fn spherical(theta: f64, phi: f64) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    let e = Vector3::new(st * cp, st * sp, ct);
    let e_t = Vector3::new(ct * cp, ct * sp, -st);
    let e_p = Vector3::new(-st * sp, st * cp, 0.0);
    (e, e_t, e_p)
}

/// Embedded position of a sphere point.
pub fn sphere_embed(p: &Point) -> Vector3<f64> {
    p.chart.rotation() * spherical(p.x[0], p.x[1]).0
}

fn chart_coords(chart: Chart, v: &Vector3<f64>) -> Vec2 {
    let q = chart.rotation().transpose() * v;
    let theta = q[2].clamp(-1.0, 1.0).acos();
    let phi = q[1].atan2(q[0]);
    [theta, phi]
}

/// Chart coordinates for an embedded unit vector, choosing the chart whose
/// colatitude stays inside `(CHART_SWITCH, pi - CHART_SWITCH)`.
pub fn sphere_point(v: &Vector3<f64>, prefer: Chart) -> Point {
    let v = v.normalize();
    let inside = |x: &Vec2| x[0] > CHART_SWITCH && x[0] < PI - CHART_SWITCH;
    let x = chart_coords(prefer, &v);
    if inside(&x) {
        return Point { x, chart: prefer };
    }
    let other = match prefer {
        Chart::Primary => Chart::Rotated,
        Chart::Rotated => Chart::Primary,
    };
    Point {
        x: chart_coords(other, &v),
        chart: other,
    }
}

/// Lift of a sphere cotangent point to embedded position and velocity.
pub fn sphere_lift(p: &CotangentPoint) -> (Vector3<f64>, Vector3<f64>) {
    let r = p.chart.rotation();
    let (e, e_t, e_p) = spherical(p.x[0], p.x[1]);
    let s = p.x[0].sin();
    let v = e_t * p.xi[0] + e_p * (p.xi[1] / (s * s));
    (r * e, r * v)
}

/// Inverse of [`sphere_lift`] in the preferred chart when admissible.
pub fn sphere_project(pos: &Vector3<f64>, vel: &Vector3<f64>, prefer: Chart) -> CotangentPoint {
    let base = sphere_point(pos, prefer);
    let r = base.chart.rotation();
    let w = r.transpose() * vel;
    let (_, e_t, e_p) = spherical(base.x[0], base.x[1]);
    CotangentPoint {
        x: base.x,
        xi: [w.dot(&e_t), w.dot(&e_p)],
        chart: base.chart,
    }
}

/// Re-express a sphere cotangent point in a different chart.
pub fn sphere_rechart(p: &CotangentPoint, chart: Chart) -> CotangentPoint {
    let (pos, vel) = sphere_lift(p);
    let base = Point {
        x: chart_coords(chart, &pos),
        chart,
    };
    let w = chart.rotation().transpose() * vel;
    let (_, e_t, e_p) = spherical(base.x[0], base.x[1]);
    CotangentPoint {
        x: base.x,
        xi: [w.dot(&e_t), w.dot(&e_p)],
        chart,
    }
}

/// Ambient coordinates used for chart-free phase-space comparisons: the
/// embedded `(position, velocity)` on the sphere and `(x, xi, 0, 0)` on the
/// tori (base components periodic).
pub fn phase_coords(m: &ManifoldModel, p: &CotangentPoint) -> [f64; 6] {
    match m.effective() {
        ManifoldModel::Sphere2 => {
            let (a, b) = sphere_lift(p);
            [a[0], a[1], a[2], b[0], b[1], b[2]]
        }
        _ => [p.x[0], p.x[1], p.xi[0], p.xi[1], 0.0, 0.0],
    }
}

/// `b - a` in ambient phase coordinates, torus base components wrapped.
pub fn phase_delta(m: &ManifoldModel, a: &[f64; 6], b: &[f64; 6]) -> [f64; 6] {
    let mut d = [0.0; 6];
    for i in 0..6 {
        d[i] = b[i] - a[i];
    }
    if m.is_torus() {
        d[0] = wrap_diff(d[0]);
        d[1] = wrap_diff(d[1]);
    }
    d
}

pub fn norm6(d: &[f64; 6]) -> f64 {
    d.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Phase-space distance between two cotangent points.
pub fn phase_distance(m: &ManifoldModel, a: &CotangentPoint, b: &CotangentPoint) -> f64 {
    norm6(&phase_delta(m, &phase_coords(m, a), &phase_coords(m, b)))
}

/// Base-space separation used for proximity tests (chordal on the sphere).
pub fn base_delta(m: &ManifoldModel, a: &[f64; 6], b: &[f64; 6]) -> f64 {
    let d = phase_delta(m, a, b);
    match m.effective() {
        ManifoldModel::Sphere2 => (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt(),
        _ => (d[0] * d[0] + d[1] * d[1]).sqrt(),
    }
}

/// Upper bound (with a 10% margin) on the speed of a unit-speed trajectory
/// in ambient phase coordinates.
pub fn phase_speed_bound(m: &ManifoldModel) -> f64 {
    let v = match m.effective() {
        ManifoldModel::Sphere2 => 2f64.sqrt(),
        ManifoldModel::FlatTorus2 => 1.0,
        ManifoldModel::ConformalTorus2 {
            amplitude,
            frequency,
        } => {
            let w = 2.0 * PI * frequency as f64 * amplitude;
            ((2.0 * amplitude).exp() + (w * amplitude.exp()).powi(2)).sqrt()
        }
    };
    v * 1.1
}

// ---------------------------------------------------------------------------
// distance

/// Maximum Newton iterations for boundary-value shooting.
pub const SHOOTING_MAX_ITER: usize = 60;

pub fn distance(m: &ManifoldModel, a: &Point, b: &Point) -> Result<f64> {
    match m.effective() {
        ManifoldModel::Sphere2 => {
            let d = sphere_embed(a).dot(&sphere_embed(b)).clamp(-1.0, 1.0);
            Ok(d.acos())
        }
        ManifoldModel::FlatTorus2 => {
            let dx = wrap_diff(b.x[0] - a.x[0]);
            let dy = wrap_diff(b.x[1] - a.x[1]);
            Ok((dx * dx + dy * dy).sqrt())
        }
        model @ ManifoldModel::ConformalTorus2 { .. } => shooting_distance(&model, a, b),
    }
}

/// Shortest geodesic length on the conformal torus: Newton shooting in
/// (direction angle, length) from flat initial guesses over nearby lattice
/// translates of the target.
fn shooting_distance(m: &ManifoldModel, a: &Point, b: &Point) -> Result<f64> {
    let cfg = FlowConfig {
        step: 0.01,
        tol: 1e-10,
        renormalize: false,
    };
    let d0 = [wrap_diff(b.x[0] - a.x[0]), wrap_diff(b.x[1] - a.x[1])];
    if d0[0].abs() < 1e-14 && d0[1].abs() < 1e-14 {
        return Ok(0.0);
    }
    let mut best: Option<f64> = None;
    let mut last_err = None;
    for kx in -1..=1 {
        for ky in -1..=1 {
            let target = [a.x[0] + d0[0] + kx as f64, a.x[1] + d0[1] + ky as f64];
            let dx = target[0] - a.x[0];
            let dy = target[1] - a.x[1];
            let flat = (dx * dx + dy * dy).sqrt();
            // a lower bound on any geodesic length to this translate
            let emin = (-m_amplitude(m)).exp();
            if let Some(bst) = best {
                if flat * emin > bst {
                    continue;
                }
            }
            match shoot(m, a, target, dy.atan2(dx), flat, &cfg) {
                Ok(len) => best = Some(best.map_or(len, |v: f64| v.min(len))),
                Err(e) => last_err = Some(e),
            }
        }
    }
    match (best, last_err) {
        (Some(v), _) => Ok(v),
        (None, Some(e)) => Err(e),
        (None, None) => Err(Error::Convergence(SHOOTING_MAX_ITER)),
    }
}

fn m_amplitude(m: &ManifoldModel) -> f64 {
    match *m {
        ManifoldModel::ConformalTorus2 { amplitude, .. } => amplitude,
        _ => 0.0,
    }
}

fn shoot(
    m: &ManifoldModel,
    a: &Point,
    target: Vec2,
    mut angle: f64,
    flat_len: f64,
    cfg: &FlowConfig,
) -> Result<f64> {
    // initial length: flat length rescaled by the mean conformal factor
    let (phi0, _, _) = match *m {
        ManifoldModel::ConformalTorus2 {
            amplitude,
            frequency,
        } => conformal_phi(amplitude, frequency, a.x[0]),
        _ => (0.0, 0.0, 0.0),
    };
    let _ = phi0;
    let mut len = flat_len;
    for _ in 0..SHOOTING_MAX_ITER {
        let xi = unit_covector(m, &a.x, angle);
        let start = CotangentPoint::new(a.x, xi);
        let mut traj = Trajectory::new(*m, start, *cfg, true)?;
        let st = *traj.advance_to(len)?;
        let end = st.raw;
        let f = [end.x[0] - target[0], end.x[1] - target[1]];
        let res = (f[0] * f[0] + f[1] * f[1]).sqrt();
        if res < 1e-11 {
            return Ok(len);
        }
        // d(end)/d(angle) through the covector, d(end)/d(len) is the velocity
        let dxi = {
            let (s, c) = angle.sin_cos();
            let e = xi[0].hypot(xi[1]);
            [-e * s, e * c]
        };
        let j = &st.jac;
        let da = [
            j[(0, 2)] * dxi[0] + j[(0, 3)] * dxi[1],
            j[(1, 2)] * dxi[0] + j[(1, 3)] * dxi[1],
        ];
        let vel = velocity(m, &end);
        let jm = Matrix2::new(da[0], vel[0], da[1], vel[1]);
        let inv = jm
            .try_inverse()
            .ok_or(Error::Convergence(SHOOTING_MAX_ITER))?;
        let step = inv * nalgebra::Vector2::new(f[0], f[1]);
        let scale = {
            let n = (step[0] * step[0] + step[1] * step[1]).sqrt();
            if n > 0.2 {
                0.2 / n
            } else {
                1.0
            }
        };
        angle -= scale * step[0];
        len -= scale * step[1];
        if len <= 0.0 {
            return Err(Error::Convergence(SHOOTING_MAX_ITER));
        }
    }
    Err(Error::Convergence(SHOOTING_MAX_ITER))
}
