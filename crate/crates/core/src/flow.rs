//! Geodesic flow as the Hamiltonian flow of `H = |xi|_g^2 / 2` together with
//! its linearization.
//!
//! On the unit cosphere bundle this flow agrees with the flow of `|xi|_g`.
//! The quadratic Hamiltonian gives the free-flight linearization
//! `[[I, tI], [0, I]]` on the flat torus.

use nalgebra::{Matrix3, Matrix4, SMatrix, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::geometry::{
    conformal_phi, conorm, normalize_torus, sphere_lift, sphere_point, sphere_project, spherical,
    unit_covector, Chart, CotangentPoint, ManifoldModel, Point, POLE_GUARD,
};

/// Default floor replacing a vanishing expansion rate.
pub const EXPANSION_FLOOR: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub step: f64,
    pub tol: f64,
    pub renormalize: bool,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            step: 0.01,
            tol: 1e-8,
            renormalize: false,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step <= 0.1) {
            return Err(Error::Config(format!("flow.step {} not in (0, 0.1]", self.step)));
        }
        if !(self.tol > 0.0 && self.tol <= 1e-6) {
            return Err(Error::Config(format!("flow.tol {} not in (0, 1e-6]", self.tol)));
        }
        Ok(())
    }
}

/// `G^t(p)` with `dG^t` in chart coordinates (order `x1, x2, xi1, xi2`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowState {
    pub p: CotangentPoint,
    pub jac: Matrix4<f64>,
    pub t: f64,
    pub chart_switches: usize,
}

/// Internal trajectory state. Torus coordinates are kept unwrapped.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajState {
    pub raw: CotangentPoint,
    pub jac: Matrix4<f64>,
    pub t: f64,
    pub chart_switches: usize,
}

impl TrajState {
    pub fn wrapped(&self, m: &ManifoldModel) -> CotangentPoint {
        let mut p = self.raw;
        if m.is_torus() {
            p.x = normalize_torus(p.x);
        }
        p
    }
}

#[derive(Clone, Debug)]
enum Kind {
    Flat,
    Sphere {
        pos: Vector3<f64>,
        vel: Vector3<f64>,
        lift_in: SMatrix<f64, 6, 4>,
    },
    Conformal {
        amplitude: f64,
        frequency: i32,
        h: f64,
        energy0: f64,
    },
}

/// Incrementally advanced geodesic from a fixed initial point.
#[derive(Clone, Debug)]
pub struct Trajectory {
    model: ManifoldModel,
    cfg: FlowConfig,
    with_jac: bool,
    start: CotangentPoint,
    kind: Kind,
    state: TrajState,
}

impl Trajectory {
    pub fn new(
        model: ManifoldModel,
        start: CotangentPoint,
        cfg: FlowConfig,
        with_jac: bool,
    ) -> Result<Self> {
        model.validate()?;
        let kind = match model.effective() {
            ManifoldModel::FlatTorus2 => Kind::Flat,
            ManifoldModel::Sphere2 => {
                if start.x[0] < POLE_GUARD || PI - start.x[0] < POLE_GUARD {
                    return Err(Error::ChartDomain(start.x));
                }
                let (pos, vel) = sphere_lift(&start);
                Kind::Sphere {
                    pos,
                    vel,
                    lift_in: lift_jacobian(&start),
                }
            }
            ManifoldModel::ConformalTorus2 {
                amplitude,
                frequency,
            } => Kind::Conformal {
                amplitude,
                frequency,
                h: cfg.step,
                energy0: conorm(&model, &start),
            },
        };
        Ok(Trajectory {
            model,
            cfg,
            with_jac,
            start,
            kind,
            state: TrajState {
                raw: start,
                jac: Matrix4::identity(),
                t: 0.0,
                chart_switches: 0,
            },
        })
    }

    pub fn model(&self) -> &ManifoldModel {
        &self.model
    }

    pub fn start(&self) -> &CotangentPoint {
        &self.start
    }

    pub fn state(&self) -> &TrajState {
        &self.state
    }

    pub fn flow_state(&self) -> FlowState {
        FlowState {
            p: self.state.wrapped(&self.model),
            jac: self.state.jac,
            t: self.state.t,
            chart_switches: self.state.chart_switches,
        }
    }

    /// Move the trajectory to time `t` (forward or backward).
    pub fn advance_to(&mut self, t: f64) -> Result<&TrajState> {
        let t0 = self.state.t;
        match &mut self.kind {
            Kind::Flat => {
                let p = &self.start;
                self.state.raw = CotangentPoint {
                    x: [p.x[0] + t * p.xi[0], p.x[1] + t * p.xi[1]],
                    xi: p.xi,
                    chart: p.chart,
                };
                if self.with_jac {
                    let mut j = Matrix4::identity();
                    j[(0, 2)] = t;
                    j[(1, 3)] = t;
                    self.state.jac = j;
                }
            }
            Kind::Sphere { pos, vel, lift_in } => {
                let (p1, v1, d) = great_circle(pos, vel, t, self.with_jac);
                let out = sphere_project(&p1, &v1, self.state.raw.chart);
                if out.chart != self.state.raw.chart {
                    self.state.chart_switches += 1;
                }
                if self.with_jac {
                    let l = lift_jacobian(&out);
                    let lt = l.transpose();
                    let proj = (lt * l)
                        .try_inverse()
                        .ok_or(Error::ChartDomain(out.x))?
                        * lt;
                    self.state.jac = proj * d * *lift_in;
                }
                self.state.raw = out;
            }
            Kind::Conformal {
                amplitude,
                frequency,
                h,
                energy0,
            } => {
                let sys = Conformal {
                    a: *amplitude,
                    k: *frequency,
                };
                let mut z = to_vec(&self.state.raw);
                let mut jac = self.state.jac;
                let mut tc = t0;
                let dir = if t >= t0 { 1.0 } else { -1.0 };
                while (t - tc) * dir > 1e-15 {
                    let remaining = (t - tc).abs();
                    let mut step = h.min(remaining);
                    loop {
                        let (zb, _) = sys.yoshida(&z, dir * step, None);
                        let (zh, jh) = sys.yoshida(&z, dir * step / 2.0, self.with_jac.then_some(&jac));
                        let (zh, jh) = sys.yoshida(&zh, dir * step / 2.0, jh.as_ref());
                        let err = (zb - zh).amax();
                        if err <= self.cfg.tol * 1e-2 || step < 1e-4 {
                            z = zh;
                            if let Some(j) = jh {
                                jac = j;
                            }
                            tc += dir * step;
                            if step < remaining && err < self.cfg.tol * 1e-2 / 64.0 {
                                *h = (step * 2.0).min(self.cfg.step);
                            } else {
                                *h = step.max(remaining.min(*h));
                            }
                            break;
                        }
                        step /= 2.0;
                    }
                    if self.cfg.renormalize {
                        let e = sys.energy(&z);
                        z[2] *= *energy0 / e;
                        z[3] *= *energy0 / e;
                    }
                    let drift = (sys.energy(&z) - *energy0).abs();
                    if drift > 10.0 * self.cfg.tol * energy0.max(1.0) {
                        return Err(Error::Tolerance {
                            drift,
                            tol: self.cfg.tol,
                        });
                    }
                }
                self.state.raw = CotangentPoint {
                    x: [z[0], z[1]],
                    xi: [z[2], z[3]],
                    chart: Chart::Primary,
                };
                self.state.jac = jac;
            }
        }
        self.state.t = t;
        Ok(&self.state)
    }
}

fn to_vec(p: &CotangentPoint) -> Vector4<f64> {
    Vector4::new(p.x[0], p.x[1], p.xi[0], p.xi[1])
}

/// Jacobian of `(theta, phi, xi_theta, xi_phi) -> (position, velocity)`.
fn lift_jacobian(p: &CotangentPoint) -> SMatrix<f64, 6, 4> {
    let r: Matrix3<f64> = match p.chart {
        Chart::Primary => Matrix3::identity(),
        Chart::Rotated => Matrix3::new(0.0, 0.0, 1.0, 0.0, 1.0, 0.0, -1.0, 0.0, 0.0),
    };
    let (th, ph) = (p.x[0], p.x[1]);
    let (st, ct) = th.sin_cos();
    let (sp, cp) = ph.sin_cos();
    let (_, e_t, e_p) = spherical(th, ph);
    let (a, b) = (p.xi[0], p.xi[1]);
    let s2 = st * st;
    let de_t_dth = Vector3::new(-st * cp, -st * sp, -ct);
    let de_t_dph = Vector3::new(-ct * sp, ct * cp, 0.0);
    let de_p_dth = Vector3::new(-ct * sp, ct * cp, 0.0);
    let de_p_dph = Vector3::new(-st * cp, -st * sp, 0.0);
    let dv_dth = de_t_dth * a + de_p_dth * (b / s2) - e_p * (2.0 * b * ct / (s2 * st));
    let dv_dph = de_t_dph * a + de_p_dph * (b / s2);
    let cols = [
        (e_t, dv_dth),
        (e_p, dv_dph),
        (Vector3::zeros(), e_t),
        (Vector3::zeros(), e_p / s2),
    ];
    let mut j = SMatrix::<f64, 6, 4>::zeros();
    for (c, (dp, dv)) in cols.iter().enumerate() {
        let dp = r * dp;
        let dv = r * dv;
        for i in 0..3 {
            j[(i, c)] = dp[i];
            j[(i + 3, c)] = dv[i];
        }
    }
    j
}

/// Exact flow of `H = |v|^2/2` on the embedded sphere and its ambient derivative.
fn great_circle(
    pos: &Vector3<f64>,
    vel: &Vector3<f64>,
    t: f64,
    with_jac: bool,
) -> (Vector3<f64>, Vector3<f64>, SMatrix<f64, 6, 6>) {
    let s = vel.norm();
    let u = vel / s;
    let (sn, c) = (s * t).sin_cos();
    let p1 = pos * c + u * sn;
    let v1 = -pos * (s * sn) + vel * c;
    let mut d = SMatrix::<f64, 6, 6>::zeros();
    if with_jac {
        let i3 = Matrix3::identity();
        let uu = u * u.transpose();
        let dp_dp = i3 * c;
        let dp_dv = -pos * u.transpose() * (sn * t) + (i3 - uu) * (sn / s) + uu * (c * t);
        let dv_dp = i3 * (-s * sn);
        let dv_dv = -pos * u.transpose() * (sn + s * c * t) + i3 * c - vel * u.transpose() * (sn * t);
        d.fixed_view_mut::<3, 3>(0, 0).copy_from(&dp_dp);
        d.fixed_view_mut::<3, 3>(0, 3).copy_from(&dp_dv);
        d.fixed_view_mut::<3, 3>(3, 0).copy_from(&dv_dp);
        d.fixed_view_mut::<3, 3>(3, 3).copy_from(&dv_dv);
    }
    (p1, v1, d)
}

#[derive(Clone, Copy)]
struct Conformal {
    a: f64,
    k: i32,
}

const YOSHIDA_W1: f64 = 1.351_207_191_959_657_6;
const YOSHIDA_W0: f64 = -1.702_414_383_919_315_3;

impl Conformal {
    fn energy(&self, z: &Vector4<f64>) -> f64 {
        let (phi, _, _) = conformal_phi(self.a, self.k, z[0]);
        (-phi).exp() * (z[2] * z[2] + z[3] * z[3]).sqrt()
    }

    fn field(&self, z: &Vector4<f64>) -> Vector4<f64> {
        let (phi, dphi, _) = conformal_phi(self.a, self.k, z[0]);
        let e = (-2.0 * phi).exp();
        let q = z[2] * z[2] + z[3] * z[3];
        Vector4::new(e * z[2], e * z[3], e * dphi * q, 0.0)
    }

    fn linear(&self, z: &Vector4<f64>) -> Matrix4<f64> {
        let (phi, dphi, ddphi) = conformal_phi(self.a, self.k, z[0]);
        let e = (-2.0 * phi).exp();
        let q = z[2] * z[2] + z[3] * z[3];
        Matrix4::new(
            -2.0 * dphi * e * z[2], 0.0, e, 0.0,
            -2.0 * dphi * e * z[3], 0.0, 0.0, e,
            e * q * (ddphi - 2.0 * dphi * dphi), 0.0, 2.0 * e * dphi * z[2], 2.0 * e * dphi * z[3],
            0.0, 0.0, 0.0, 0.0,
        )
    }

    /// Implicit midpoint step; the Jacobian update is the exact derivative
    /// of the discrete map.
    fn midpoint(
        &self,
        z0: &Vector4<f64>,
        h: f64,
        jac: Option<&Matrix4<f64>>,
    ) -> (Vector4<f64>, Option<Matrix4<f64>>) {
        let mut z1 = z0 + self.field(z0) * h;
        let mut a = Matrix4::zeros();
        for _ in 0..30 {
            let zm = (z0 + z1) / 2.0;
            a = self.linear(&zm);
            let res = z1 - z0 - self.field(&zm) * h;
            let lhs = Matrix4::identity() - a * (h / 2.0);
            let Some(delta) = lhs.lu().solve(&res) else { break };
            z1 -= delta;
            if delta.amax() < 1e-15 * (1.0 + z1.amax()) {
                break;
            }
        }
        let jac = jac.map(|m| {
            let zm = (z0 + z1) / 2.0;
            a = self.linear(&zm);
            let lhs = Matrix4::identity() - a * (h / 2.0);
            let rhs = (Matrix4::identity() + a * (h / 2.0)) * m;
            lhs.lu().solve(&rhs).unwrap_or(rhs)
        });
        (z1, jac)
    }

    fn yoshida(
        &self,
        z: &Vector4<f64>,
        h: f64,
        jac: Option<&Matrix4<f64>>,
    ) -> (Vector4<f64>, Option<Matrix4<f64>>) {
        let (z, j) = self.midpoint(z, YOSHIDA_W1 * h, jac);
        let (z, j) = self.midpoint(&z, YOSHIDA_W0 * h, j.as_ref());
        self.midpoint(&z, YOSHIDA_W1 * h, j.as_ref())
    }
}

fn check_unit(m: &ManifoldModel, p: &CotangentPoint) -> Result<()> {
    let n = conorm(m, p);
    if (n - 1.0).abs() > 1e-8 {
        return Err(Error::Domain(format!("covector norm {n} is not 1")));
    }
    Ok(())
}

/// `G^t(p)` for a unit covector, with its linearization.
pub fn geodesic_flow(
    m: &ManifoldModel,
    p: &CotangentPoint,
    t: f64,
    cfg: &FlowConfig,
) -> Result<FlowState> {
    check_unit(m, p)?;
    let mut tr = Trajectory::new(*m, *p, *cfg, true)?;
    tr.advance_to(t)?;
    Ok(tr.flow_state())
}

/// `dG^t(p)` in chart coordinates.
pub fn tangent_flow(
    m: &ManifoldModel,
    p: &CotangentPoint,
    t: f64,
    cfg: &FlowConfig,
) -> Result<Matrix4<f64>> {
    Ok(geodesic_flow(m, p, t, cfg)?.jac)
}

/// Largest singular value.
pub fn spectral_norm(j: &Matrix4<f64>) -> f64 {
    j.singular_values().max()
}

/// Tangent dynamics whose growth rate can be estimated by sampling.
pub trait TangentDynamics: Sync {
    /// Norm of the linearization at time `t` for a sample `u` in the unit cube.
    fn tangent_norm(&self, u: [f64; 3], t: f64) -> Result<f64>;
}

/// Unit covector parametrized by a point of the unit cube: base point
/// uniform with respect to area, direction angle `2 pi u3`.
pub fn unit_sample(m: &ManifoldModel, u: [f64; 3]) -> CotangentPoint {
    let angle = 2.0 * PI * u[2];
    match m.effective() {
        ManifoldModel::Sphere2 => {
            let z = 2.0 * u[0] - 1.0;
            let th = z.clamp(-1.0, 1.0).acos();
            let ph = 2.0 * PI * u[1];
            let (e, _, _) = spherical(th, ph);
            let base: Point = sphere_point(&e, Chart::Primary);
            let xi = unit_covector(m, &base.x, angle);
            CotangentPoint {
                x: base.x,
                xi,
                chart: base.chart,
            }
        }
        _ => {
            let x = [u[0], u[1]];
            CotangentPoint::new(x, unit_covector(m, &x, angle))
        }
    }
}

impl TangentDynamics for ManifoldModel {
    fn tangent_norm(&self, u: [f64; 3], t: f64) -> Result<f64> {
        let p = unit_sample(self, u);
        let cfg = FlowConfig::default();
        let mut tr = Trajectory::new(*self, p, cfg, true)?;
        Ok(spectral_norm(&tr.advance_to(t)?.jac))
    }
}

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

/// Halton points in the unit cube, shifted modulo 1 by a seeded offset.
pub fn halton3(count: usize, seed: u64) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shift: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
    (1..=count as u64)
        .map(|i| {
            let b = [2, 3, 5];
            let mut u = [0.0; 3];
            for k in 0..3 {
                u[k] = (radical_inverse(i, b[k]) + shift[k]).fract();
            }
            u
        })
        .collect()
}

/// Finite-horizon estimate of the maximal expansion rate.
///
/// Uses the growth slope of `log ||dG^t||` between `T/2` and `T`, which
/// removes the bounded prefactor, and replaces values below `floor` by
/// `floor`.
pub fn max_expansion_rate<D: TangentDynamics + ?Sized>(
    d: &D,
    sample_count: usize,
    t_max: f64,
    seed: u64,
    floor: f64,
) -> Result<f64> {
    if sample_count == 0 || t_max <= 0.0 {
        return Err(Error::Domain("need sample_count >= 1 and T_max > 0".into()));
    }
    let rates: Vec<f64> = halton3(sample_count, seed)
        .into_par_iter()
        .map(|u| {
            let full = d.tangent_norm(u, t_max)?;
            let half = d.tangent_norm(u, t_max / 2.0)?;
            Ok((full.ln() - half.ln()) / (t_max / 2.0))
        })
        .collect::<Result<_>>()?;
    let est = rates.into_iter().fold(f64::NEG_INFINITY, f64::max);
    Ok(est.max(floor))
}

/// `T_e(h) = log(1/h) / (2 Lambda)`.
pub fn ehrenfest_time(h: f64, lambda: f64) -> Result<f64> {
    if !(h > 0.0 && h < 1.0) {
        return Err(Error::Domain(format!("h = {h} not in (0, 1)")));
    }
    if !(lambda > 0.0) {
        return Err(Error::Domain(format!("Lambda = {lambda} must be positive")));
    }
    Ok((1.0 / h).ln() / (2.0 * lambda))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::phase_distance;
    use approx::assert_relative_eq;

    fn conformal(a: f64) -> ManifoldModel {
        ManifoldModel::ConformalTorus2 {
            amplitude: a,
            frequency: 1,
        }
    }

    fn cfg() -> FlowConfig {
        FlowConfig::default()
    }

    #[test]
    fn flat_examples() {
        let m = ManifoldModel::FlatTorus2;
        let p = CotangentPoint::new([0.0, 0.0], [1.0, 0.0]);
        let s = geodesic_flow(&m, &p, 0.25, &cfg()).unwrap();
        assert_relative_eq!(s.p.x[0], 0.25);
        assert_eq!(s.p.x[1], 0.0);
        assert_eq!(s.p.xi, [1.0, 0.0]);
        let j = tangent_flow(&m, &p, 3.5, &cfg()).unwrap();
        let mut e = Matrix4::identity();
        e[(0, 2)] = 3.5;
        e[(1, 3)] = 3.5;
        assert_eq!(j, e);
    }

    #[test]
    fn sphere_period() {
        let m = ManifoldModel::Sphere2;
        for (x, a) in [([1.0, 0.4], 0.3), ([0.5, 2.0], 2.0), ([2.5, -1.0], -1.2)] {
            let p = CotangentPoint::new(x, unit_covector(&m, &x, a));
            let s = geodesic_flow(&m, &p, 2.0 * PI, &cfg()).unwrap();
            assert!(phase_distance(&m, &p, &s.p) < 1e-12);
        }
    }

    #[test]
    fn sphere_jacobi_is_sine() {
        // equator, moving east; perpendicular direction is d/dtheta
        let m = ManifoldModel::Sphere2;
        let p = CotangentPoint::new([PI / 2.0, 0.0], [0.0, 1.0]);
        let mut tr = Trajectory::new(m, p, cfg(), true).unwrap();
        for k in 1..=40 {
            let t = 0.25 * k as f64;
            let st = *tr.advance_to(t).unwrap();
            // J(0)=0, DJ(0)=1: perturb xi_theta by 1
            let (pos, _) = sphere_lift(&st.raw);
            let l = lift_jacobian(&st.raw);
            let dx = l * st.jac.column(2);
            let dpos = Vector3::new(dx[0], dx[1], dx[2]);
            let normal = Vector3::new(0.0, 0.0, -1.0);
            let j = dpos.dot(&normal);
            assert!((j - t.sin()).abs() < 1e-8, "t={t} J={j}");
            let _ = pos;
        }
    }

    #[test]
    fn sphere_chart_switch_logged() {
        let m = ManifoldModel::Sphere2;
        let p = CotangentPoint::new([PI / 2.0, 0.0], [1.0, 0.0]);
        let s = geodesic_flow(&m, &p, PI / 2.0, &cfg()).unwrap();
        assert_eq!(s.chart_switches, 1);
        assert_eq!(s.p.chart, Chart::Rotated);
        assert_relative_eq!(s.jac.determinant(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn conformal_small_amplitude_matches_flat() {
        let p = CotangentPoint::new([0.13, 0.4], [0.6, 0.8]);
        let flat = geodesic_flow(&ManifoldModel::FlatTorus2, &p, 5.0, &cfg()).unwrap();
        let mut prev = f64::INFINITY;
        for a in [1e-3, 1e-5, 1e-7] {
            let m = conformal(a);
            let q = CotangentPoint::new(p.x, unit_covector(&m, &p.x, 0.8f64.atan2(0.6)));
            let s = geodesic_flow(&m, &q, 5.0, &cfg()).unwrap();
            let d = phase_distance(&ManifoldModel::FlatTorus2, &s.p, &flat.p);
            assert!(d < prev);
            prev = d;
        }
        assert!(prev < 1e-6, "{prev}");
    }

    #[test]
    fn symplectic_determinant() {
        let models = [ManifoldModel::Sphere2, ManifoldModel::FlatTorus2, conformal(0.1), conformal(0.3)];
        for m in models {
            let x = [1.1, 0.3];
            let p = CotangentPoint::new(x, unit_covector(&m, &x, 0.7));
            for t in [-20.0, -3.0, 7.0, 20.0] {
                let j = tangent_flow(&m, &p, t, &cfg()).unwrap();
                assert!((j.determinant() - 1.0).abs() < 1e-6, "{m:?} t={t}");
            }
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let h = 1e-5;
        for m in [conformal(0.1), conformal(0.3), ManifoldModel::Sphere2] {
            let x = [0.9, 0.25];
            let p = CotangentPoint::new(x, unit_covector(&m, &x, 0.4));
            let t = 3.0;
            let mut tr = Trajectory::new(m, p, cfg(), true).unwrap();
            let j = tr.advance_to(t).unwrap().jac;
            for c in 0..4 {
                let shifted = |s: f64| {
                    let mut v = to_vec(&p);
                    v[c] += s;
                    let q = CotangentPoint {
                        x: [v[0], v[1]],
                        xi: [v[2], v[3]],
                        chart: p.chart,
                    };
                    let mut tr = Trajectory::new(m, q, cfg(), false).unwrap();
                    to_vec(&tr.advance_to(t).unwrap().raw)
                };
                let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
                for r in 0..4 {
                    assert!((fd[r] - j[(r, c)]).abs() < 1e-4, "{m:?} ({r},{c}) fd {} jac {}", fd[r], j[(r, c)]);
                }
            }
        }
    }

    #[test]
    fn ehrenfest_examples() {
        assert_relative_eq!(ehrenfest_time((-2.0f64).exp(), 1.0).unwrap(), 1.0, epsilon = 1e-14);
        assert_relative_eq!(ehrenfest_time((-4.0f64).exp(), 2.0).unwrap(), 1.0, epsilon = 1e-14);
        // log(1000) / (2 * 0.9624)
        assert_relative_eq!(ehrenfest_time(1e-3, 0.9624).unwrap(), 3.588_817_164_890_968_6, epsilon = 1e-10);
        assert!(matches!(ehrenfest_time(1.0, 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn expansion_floor_for_flat_and_sphere() {
        for m in [ManifoldModel::FlatTorus2, ManifoldModel::Sphere2] {
            let r = max_expansion_rate(&m, 16, 100.0, 7, EXPANSION_FLOOR).unwrap();
            assert_eq!(r, EXPANSION_FLOOR);
        }
    }

    #[test]
    fn non_unit_input_rejected() {
        let p = CotangentPoint::new([0.1, 0.1], [2.0, 0.0]);
        assert!(geodesic_flow(&ManifoldModel::FlatTorus2, &p, 1.0, &cfg()).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn any_model() -> impl Strategy<Value = ManifoldModel> {
            prop_oneof![
                Just(ManifoldModel::Sphere2),
                Just(ManifoldModel::FlatTorus2),
                (0.01..0.4f64).prop_map(conformal),
            ]
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn reversible(m in any_model(), x0 in 0.3..2.8f64, x1 in 0.0..1.0f64,
                          a in -3.0..3.0f64, t in -10.0..10.0f64) {
                let p = CotangentPoint::new([x0, x1], unit_covector(&m, &[x0, x1], a));
                let c = cfg();
                let q = geodesic_flow(&m, &p, t, &c).unwrap().p;
                let back = geodesic_flow(&m, &q, -t, &c).unwrap().p;
                let mut p0 = p;
                if m.is_torus() { p0.x = normalize_torus(p0.x); }
                prop_assert!(phase_distance(&m, &p0, &back) < 10.0 * c.tol);
            }

            #[test]
            fn energy_conserved(m in any_model(), x0 in 0.3..2.8f64, a in -3.0..3.0f64) {
                let p = CotangentPoint::new([x0, 0.2], unit_covector(&m, &[x0, 0.2], a));
                let c = cfg();
                let mut tr = Trajectory::new(m, p, c, false).unwrap();
                for k in 1..=20 {
                    let s = tr.advance_to(0.5 * k as f64).unwrap().raw;
                    prop_assert!((conorm(&m, &s) - 1.0).abs() <= c.tol);
                }
            }

            #[test]
            fn group_property(exact in prop_oneof![Just(ManifoldModel::Sphere2), Just(ManifoldModel::FlatTorus2)],
                              x0 in 0.3..2.8f64, a in -3.0..3.0f64, s in -5.0..5.0f64, t in -5.0..5.0f64) {
                let p = CotangentPoint::new([x0, 0.4], unit_covector(&exact, &[x0, 0.4], a));
                let c = cfg();
                let q = geodesic_flow(&exact, &p, t, &c).unwrap().p;
                let r = geodesic_flow(&exact, &q, s, &c).unwrap().p;
                let d = geodesic_flow(&exact, &p, s + t, &c).unwrap().p;
                prop_assert!(phase_distance(&exact, &r, &d) < 1e-10);
            }
        }
    }
}
