//! Returns of conormal trajectories to `SN*H`, loop and recurrence
//! statistics, conjugate points along geodesics and the conjugacy
//! certificate.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{FlowConfig, Trajectory};
use crate::geometry::{
    conformal_phi, distance, metric_at, phase_coords, phase_distance, unit_covector,
    CotangentPoint, ManifoldModel, Point,
};
use crate::submanifold::{ConormalSample, SampleCloud};

/// A passage of a trajectory within the proximity tolerance of `SN*H`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Crossing {
    pub t: f64,
    pub point: CotangentPoint,
    /// Distance to the sample cloud at the refined time.
    pub residual: f64,
    /// Nearest conormal sample.
    pub nearest: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReturnRecord {
    pub sample: usize,
    pub rho: CotangentPoint,
    /// `None` when no return happens before the horizon.
    pub t_h: Option<f64>,
    pub eta: Option<CotangentPoint>,
    pub crossings: Vec<Crossing>,
}

impl ReturnRecord {
    pub fn eta_residual(&self) -> Option<f64> {
        self.crossings.first().map(|c| c.residual)
    }
}

/// Event detection against a fixed sample cloud.
#[derive(Clone, Debug)]
pub struct ReturnScanner {
    model: ManifoldModel,
    cloud: SampleCloud,
    prox_tol: f64,
    cap: f64,
    cfg: FlowConfig,
}

impl ReturnScanner {
    pub fn new(model: ManifoldModel, samples: &[ConormalSample], prox_tol: f64, cfg: FlowConfig) -> Result<Self> {
        if !(prox_tol >= 2.0 * cfg.tol) {
            return Err(Error::Domain(format!(
                "prox_tol {prox_tol} below twice the integrator tolerance"
            )));
        }
        let cell = (4.0 * prox_tol).max(0.02);
        Ok(ReturnScanner {
            model,
            cloud: SampleCloud::new(model, samples, cell),
            prox_tol,
            cap: 2.0 * cell,
            cfg,
        })
    }

    pub fn prox_tol(&self) -> f64 {
        self.prox_tol
    }

    pub fn cloud(&self) -> &SampleCloud {
        &self.cloud
    }

    fn dist(&self, p: &CotangentPoint, radius: f64) -> (f64, usize) {
        match self.cloud.nearest(&phase_coords(&self.model, p), radius) {
            Some(h) => (h.distance, h.nearest_sample()),
            None => (radius, usize::MAX),
        }
    }

    /// All crossings of the trajectory from `start` for signed times between
    /// 0 and `t_max`, ignoring the initial contact interval.
    pub fn scan(&self, start: &CotangentPoint, t_max: f64, first_only: bool) -> Result<Vec<Crossing>> {
        let dir = if t_max >= 0.0 { 1.0 } else { -1.0 };
        let horizon = t_max.abs();
        let ds = self.prox_tol / 4.0;
        let speed = crate::geometry::phase_speed_bound(&self.model);
        let mut tr = Trajectory::new(self.model, *start, self.cfg, false)?;
        let mut out = Vec::new();
        let mut t = 0.0;
        let mut leaving = true;
        // (t, d) of the running minimum inside the current near run
        let mut run: Option<(f64, f64)> = None;
        while t <= horizon {
            let p = tr.advance_to(dir * t)?.raw;
            let (d, _) = self.dist(&p, self.cap);
            let step;
            if leaving {
                if d >= self.prox_tol {
                    leaving = false;
                }
                step = ds;
            } else if d < self.prox_tol {
                if run.is_none_or(|(_, dm)| d < dm) {
                    run = Some((t, d));
                }
                step = ds;
            } else {
                if let Some((tm, _)) = run.take() {
                    out.push(self.refine(&mut tr, dir, tm, ds)?);
                    if first_only {
                        return Ok(out);
                    }
                }
                step = ((d - self.prox_tol) / speed).max(ds);
            }
            if t >= horizon {
                break;
            }
            t = (t + step).min(horizon);
        }
        if let Some((tm, _)) = run {
            let c = self.refine(&mut tr, dir, tm, ds)?;
            if c.t.abs() <= horizon {
                out.push(c);
            }
        }
        Ok(out)
    }

    /// Golden-section minimization of the cloud distance on `[tm - ds, tm + ds]`.
    fn refine(&self, tr: &mut Trajectory, dir: f64, tm: f64, ds: f64) -> Result<Crossing> {
        let r = 2.0 * self.prox_tol;
        let mut f = |t: f64| -> Result<f64> {
            let p = tr.advance_to(dir * t)?.raw;
            Ok(self.dist(&p, r).0)
        };
        let g = (5f64.sqrt() - 1.0) / 2.0;
        let (mut a, mut b) = ((tm - ds).max(0.0), tm + ds);
        let mut c = b - g * (b - a);
        let mut d = a + g * (b - a);
        let (mut fc, mut fd) = (f(c)?, f(d)?);
        while b - a > 1e-10 {
            if fc < fd {
                b = d;
                d = c;
                fd = fc;
                c = b - g * (b - a);
                fc = f(c)?;
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + g * (b - a);
                fd = f(d)?;
            }
        }
        let t = (a + b) / 2.0;
        let p = tr.advance_to(dir * t)?.wrapped(&self.model);
        let (res, nearest) = self.dist(&p, r);
        Ok(Crossing {
            t: dir * t,
            point: p,
            residual: res,
            nearest,
        })
    }

    pub fn first_return(&self, samples: &[ConormalSample], index: usize, t_max: f64) -> Result<ReturnRecord> {
        let rho = samples[index].rho;
        let crossings = self.scan(&rho, t_max, false)?;
        let first = crossings.first().copied();
        Ok(ReturnRecord {
            sample: index,
            rho,
            t_h: first.map(|c| c.t),
            eta: first.map(|c| c.point),
            crossings,
        })
    }
}

/// First return of sample `index` to `SN*H`, with every crossing up to `t_max`.
pub fn first_return(
    model: &ManifoldModel,
    samples: &[ConormalSample],
    index: usize,
    t_max: f64,
    prox_tol: f64,
) -> Result<ReturnRecord> {
    ReturnScanner::new(*model, samples, prox_tol, FlowConfig::default())?.first_return(samples, index, t_max)
}

/// Return records of all samples, merged by sample index.
pub fn all_returns(scanner: &ReturnScanner, samples: &[ConormalSample], t_max: f64) -> Result<Vec<ReturnRecord>> {
    (0..samples.len())
        .into_par_iter()
        .map(|i| scanner.first_return(samples, i, t_max))
        .collect()
}

/// Weighted fraction of samples returning within `t_max`.
pub fn loop_fraction(scanner: &ReturnScanner, samples: &[ConormalSample], t_max: f64) -> Result<f64> {
    if t_max <= 0.0 {
        return Ok(0.0);
    }
    let total: f64 = samples.iter().map(|s| s.weight).sum();
    let looped: f64 = (0..samples.len())
        .into_par_iter()
        .map(|i| -> Result<f64> {
            let c = scanner.scan(&samples[i].rho, t_max, true)?;
            Ok(if c.is_empty() { 0.0 } else { samples[i].weight })
        })
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .sum();
    Ok(looped / total)
}

/// Push-forward test of the return map on coarse bins.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinTest {
    /// `max |eta_* sigma - sigma| / sigma` over bins.
    pub defect: f64,
    /// Quadrature allowance: one boundary sample gained or lost on each side
    /// of a bin.
    pub tolerance: f64,
}

impl BinTest {
    pub fn passes(&self) -> bool {
        self.defect <= self.tolerance
    }
}

/// Bins `SN*H` by branch and `nbins` equal parameter ranges, and compares
/// the weight of returning samples per bin before and after the return
/// map (landing bin taken from the nearest sample). Samples without a
/// return are left out on both sides.
pub fn liouville_bin_test(samples: &[ConormalSample], records: &[ReturnRecord], nbins: usize) -> BinTest {
    let point = samples.iter().all(|s| s.branch == 0);
    let period = if point {
        2.0 * PI
    } else {
        samples.iter().filter(|s| s.branch == 1).map(|s| s.weight).sum()
    };
    let bin = |s: &ConormalSample| {
        let b = ((s.param / period * nbins as f64).floor() as usize).min(nbins - 1);
        if s.branch == -1 {
            nbins + b
        } else {
            b
        }
    };
    let mut before = vec![0.0; 2 * nbins];
    let mut after = vec![0.0; 2 * nbins];
    for r in records {
        let Some(c) = r.crossings.first() else { continue };
        if c.nearest == usize::MAX {
            continue;
        }
        let w = samples[r.sample].weight;
        before[bin(&samples[r.sample])] += w;
        after[bin(&samples[c.nearest])] += w;
    }
    let mut all = vec![0.0; 2 * nbins];
    for s in samples {
        all[bin(s)] += s.weight;
    }
    let wmax = samples.iter().map(|s| s.weight).fold(0.0, f64::max);
    let bmin = all.iter().copied().filter(|v| *v > 0.0).fold(f64::INFINITY, f64::min);
    let defect = before
        .iter()
        .zip(after.iter())
        .filter(|(b, _)| **b > 0.0)
        .map(|(b, a)| (a - b).abs() / b)
        .fold(0.0, f64::max);
    BinTest {
        defect,
        tolerance: 2.0 * wmax / bmin,
    }
}

/// Write one row per record.
pub fn write_returns_csv(path: &Path, records: &[ReturnRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "sample_index,base_x1,base_x2,xi1,xi2,T_H,eta_distance_residual,n_crossings")?;
    for r in records {
        let th = r.t_h.map_or("inf".to_string(), |t| format!("{t:.12}"));
        let res = r.eta_residual().map_or("nan".to_string(), |v| format!("{v:.3e}"));
        writeln!(
            f,
            "{},{:.12},{:.12},{:.12},{:.12},{},{},{}",
            r.sample,
            r.rho.x[0],
            r.rho.x[1],
            r.rho.xi[0],
            r.rho.xi[1],
            th,
            res,
            r.crossings.len()
        )?;
    }
    f.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// recurrence decomposition

/// Phase-space ball in `SN*H`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ball {
    pub center: CotangentPoint,
    pub radius: f64,
}

impl Ball {
    pub fn contains(&self, m: &ManifoldModel, p: &CotangentPoint) -> bool {
        phase_distance(m, &self.center, p) < self.radius
    }
}

/// Nested cover of the covector circle over a point by angular balls:
/// level `j` has `4 * 2^j` balls with chord radius `1.5x` the half spacing.
pub fn angular_cover(m: &ManifoldModel, x: &Point, levels: usize) -> Vec<Ball> {
    let mut out = Vec::new();
    for j in 0..levels {
        let n = 4usize << j;
        let half = PI / n as f64;
        for k in 0..n {
            let a = 2.0 * PI * (k as f64 + 0.5) / n as f64;
            out.push(Ball {
                center: CotangentPoint {
                    x: x.x,
                    xi: unit_covector(m, &x.x, a),
                    chart: x.chart,
                },
                radius: 2.0 * (1.5 * half / 2.0).sin(),
            });
        }
    }
    out
}

/// Membership of every sample in every `E_i^{+,T}` and `E_i^{-,T}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecurrenceDecomposition {
    pub t: f64,
    pub t_hor: f64,
    pub weights: Vec<f64>,
    /// `in_ball[i][s]`: sample `s` lies in `U_i`.
    pub in_ball: Vec<Vec<bool>>,
    pub e_plus: Vec<Vec<bool>>,
    pub e_minus: Vec<Vec<bool>>,
}

impl RecurrenceDecomposition {
    pub fn total(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn balls(&self) -> usize {
        self.in_ball.len()
    }

    /// `E_i^T = E_i^{+,T} u E_i^{-,T}`.
    pub fn e(&self, i: usize, s: usize) -> bool {
        self.e_plus[i][s] || self.e_minus[i][s]
    }

    pub fn sigma_e(&self, i: usize) -> f64 {
        (0..self.weights.len()).filter(|&s| self.e(i, s)).map(|s| self.weights[s]).sum()
    }

    /// `sigma(cap_i (SN*H \ E_i^T))`.
    pub fn sigma_never(&self) -> f64 {
        (0..self.weights.len())
            .filter(|&s| (0..self.balls()).all(|i| !self.e(i, s)))
            .map(|s| self.weights[s])
            .sum()
    }

    /// Membership in `B_N = [cap_i (S \ E_i)] u (cup_{j >= N} E_j \ cup_{k < N} E_k)`,
    /// balls indexed from 1.
    pub fn in_b(&self, n: usize, s: usize) -> bool {
        let l = self.balls();
        let never = (0..l).all(|i| !self.e(i, s));
        let late = (n.max(1) - 1..l).any(|j| self.e(j, s));
        let early = (0..n.saturating_sub(1).min(l)).any(|k| self.e(k, s));
        never || (late && !early)
    }

    pub fn sigma_b(&self, n: usize) -> f64 {
        (0..self.weights.len()).filter(|&s| self.in_b(n, s)).map(|s| self.weights[s]).sum()
    }

    /// `G_i = E_i^T` as sample indices (`i` from 0).
    pub fn g(&self, i: usize) -> Vec<usize> {
        (0..self.weights.len()).filter(|&s| self.e(i, s)).collect()
    }

    /// `sigma(B_N)^{1/2} + sum_{i < N} sigma(E_i^T)^{1/2} T^{1/2} / S^{1/2}`.
    pub fn bracket(&self, n: usize, s: f64) -> f64 {
        let tail: f64 = (0..n.saturating_sub(1).min(self.balls()))
            .map(|i| self.sigma_e(i).sqrt() * (self.t / s).sqrt())
            .sum();
        self.sigma_b(n).sqrt() + tail
    }
}

/// Forward and backward crossings of every sample up to `t_hor`.
pub fn crossing_table(
    scanner: &ReturnScanner,
    samples: &[ConormalSample],
    t_hor: f64,
) -> Result<Vec<(Vec<Crossing>, Vec<Crossing>)>> {
    samples
        .par_iter()
        .map(|s| Ok((scanner.scan(&s.rho, t_hor, false)?, scanner.scan(&s.rho, -t_hor, false)?)))
        .collect()
}

/// Classify samples into `E_i^{+-,T}` from crossing events in
/// `(T, T_hor]`. Requires `T_hor >= 4T`.
pub fn recurrence_decomposition(
    m: &ManifoldModel,
    samples: &[ConormalSample],
    cover: &[Ball],
    table: &[(Vec<Crossing>, Vec<Crossing>)],
    t: f64,
    t_hor: f64,
) -> Result<RecurrenceDecomposition> {
    if !(t > 0.0) {
        return Err(Error::Domain("T must be positive".into()));
    }
    if t_hor < 4.0 * t {
        return Err(Error::Inconclusive {
            requested: t,
            cap: t_hor / 4.0,
        });
    }
    let in_ball: Vec<Vec<bool>> = cover
        .iter()
        .map(|b| samples.iter().map(|s| b.contains(m, &s.rho)).collect())
        .collect();
    for s in 0..samples.len() {
        if !in_ball.iter().any(|row| row[s]) {
            return Err(Error::Cover(s));
        }
    }
    let classify = |sign: usize| -> Vec<Vec<bool>> {
        cover
            .iter()
            .enumerate()
            .map(|(i, b)| {
                (0..samples.len())
                    .map(|s| {
                        let events = if sign == 0 { &table[s].0 } else { &table[s].1 };
                        in_ball[i][s]
                            && !events
                                .iter()
                                .any(|c| c.t.abs() > t && c.t.abs() <= t_hor && b.contains(m, &c.point))
                    })
                    .collect()
            })
            .collect()
    };
    Ok(RecurrenceDecomposition {
        t,
        t_hor,
        weights: samples.iter().map(|s| s.weight).collect(),
        e_plus: classify(0),
        e_minus: classify(1),
        in_ball,
    })
}

// ---------------------------------------------------------------------------
// conjugate points

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConjugacyReport {
    pub gamma_seed: CotangentPoint,
    /// `(t, multiplicity)`.
    pub events: Vec<(f64, usize)>,
    pub r: f64,
    /// Merged windows `[t - r, t + r]` around events.
    pub windows: Vec<(f64, f64)>,
}

/// Perpendicular Jacobi field `J(t)` with `J(0) = 0`, `J'(0) = 1`, read off
/// the linearized flow.
pub struct JacobiField {
    tr: Trajectory,
    v: [f64; 2],
    m: ManifoldModel,
}

impl JacobiField {
    pub fn new(m: &ManifoldModel, seed: &CotangentPoint, cfg: FlowConfig) -> Result<Self> {
        let md = metric_at(m, &seed.x)?;
        // rotate the covector by a right angle in the metric
        let vel = [md.g_inv[(0, 0)] * seed.xi[0], md.g_inv[(1, 1)] * seed.xi[1]];
        let det = md.g.determinant().sqrt();
        let d = [-vel[1] * det, vel[0] * det];
        let n = normal(&md.g, &seed.xi);
        let slope = d[0] * n[0] + d[1] * n[1];
        let v = [d[0] / slope, d[1] / slope];
        Ok(JacobiField {
            tr: Trajectory::new(*m, *seed, cfg, true)?,
            v,
            m: *m,
        })
    }

    pub fn eval(&mut self, t: f64) -> Result<f64> {
        let st = *self.tr.advance_to(t)?;
        let j = &st.jac;
        let dx = [
            j[(0, 2)] * self.v[0] + j[(0, 3)] * self.v[1],
            j[(1, 2)] * self.v[0] + j[(1, 3)] * self.v[1],
        ];
        let md = metric_at(&self.m, &st.raw.x)?;
        let n = normal(&md.g, &st.raw.xi);
        Ok(md.g[(0, 0)] * dx[0] * n[0] + md.g[(1, 1)] * dx[1] * n[1])
    }
}

/// Unit normal vector to the velocity of `xi` for a diagonal metric.
fn normal(g: &nalgebra::Matrix2<f64>, xi: &[f64; 2]) -> [f64; 2] {
    let det = g.determinant().sqrt();
    let s = (xi[0] * xi[0] / g[(0, 0)] + xi[1] * xi[1] / g[(1, 1)]).sqrt();
    [-xi[1] / (det * s), xi[0] / (det * s)]
}

/// Sign changes of the perpendicular Jacobi field on `t_range`, refined by
/// bisection; each is a multiplicity-1 conjugate point.
pub fn conjugate_points(
    m: &ManifoldModel,
    seed: &CotangentPoint,
    t_range: (f64, f64),
    r: f64,
) -> Result<ConjugacyReport> {
    let cfg = FlowConfig::default();
    let mut jf = JacobiField::new(m, seed, cfg)?;
    let (t0, t1) = t_range;
    let dt = 0.05f64.min(r.max(1e-3));
    let mut events = Vec::new();
    let mut ta = t0.max(1e-9);
    let mut ja = jf.eval(ta)?;
    while ta < t1 {
        let tb = (ta + dt).min(t1);
        let jb = jf.eval(tb)?;
        if ja == 0.0 && ta > t0 {
            events.push((ta, 1));
        } else if ja * jb < 0.0 {
            let (mut a, mut b, mut fa) = (ta, tb, ja);
            while b - a > 1e-12 {
                let c = 0.5 * (a + b);
                let fc = jf.eval(c)?;
                if fa * fc <= 0.0 {
                    b = c;
                } else {
                    a = c;
                    fa = fc;
                }
            }
            events.push((0.5 * (a + b), 1));
            jf.eval(tb)?;
        }
        ta = tb;
        ja = jb;
    }
    let mut windows: Vec<(f64, f64)> = Vec::new();
    for &(t, _) in &events {
        match windows.last_mut() {
            Some(w) if t - r <= w.1 => w.1 = t + r,
            _ => windows.push((t - r, t + r)),
        }
    }
    Ok(ConjugacyReport {
        gamma_seed: *seed,
        events,
        r,
        windows,
    })
}

/// Violation of the conjugacy condition at `(x, t, direction)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConjugacyWitness {
    pub x: Point,
    pub t: f64,
    pub angle: f64,
    pub distance: f64,
    pub r: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConjugacyCertificate {
    pub holds: bool,
    pub witnesses: Vec<ConjugacyWitness>,
    pub events_found: usize,
}

/// `r_a(t) = a^{-1} e^{-a t}`.
pub fn r_a(a: f64, t: f64) -> f64 {
    (-a * t).exp() / a
}

/// Checks `d(x, C_x(t)) >= r_a(t)` for `t` in `[T, T_hor]`, where `C_x(t)`
/// collects endpoints `gamma(t)` of directions with a conjugate point within
/// `r_a(t)` of `t`. The time grid is uniform with step `dt` plus every event
/// time. Reports the first violation per point.
pub fn conjugacy_certificate(
    m: &ManifoldModel,
    u: &[Point],
    t: f64,
    a: f64,
    t_hor: f64,
    directions: usize,
    dt: f64,
) -> Result<ConjugacyCertificate> {
    if !(t > 0.0 && a > 0.0) {
        return Err(Error::Domain("need T > 0 and a > 0".into()));
    }
    let cfg = FlowConfig::default();
    let amp = match m.effective() {
        ManifoldModel::ConformalTorus2 { amplitude, .. } => amplitude,
        _ => 0.0,
    };
    let per_point = u
        .par_iter()
        .map(|x| -> Result<(Option<ConjugacyWitness>, usize)> {
            let mut found = 0;
            let mut first: Option<ConjugacyWitness> = None;
            for k in 0..directions {
                let ang = 2.0 * PI * k as f64 / directions as f64;
                let seed = CotangentPoint {
                    x: x.x,
                    xi: unit_covector(m, &x.x, ang),
                    chart: x.chart,
                };
                let lo = (t - r_a(a, t)).max(0.0);
                let hi = t_hor + r_a(a, t_hor);
                let rep = conjugate_points(m, &seed, (lo, hi), r_a(a, t))?;
                found += rep.events.len();
                if rep.events.is_empty() {
                    continue;
                }
                let mut grid: Vec<f64> = Vec::new();
                let steps = ((t_hor - t) / dt).ceil() as usize;
                for i in 0..=steps {
                    grid.push((t + i as f64 * dt).min(t_hor));
                }
                grid.extend(rep.events.iter().map(|e| e.0).filter(|s| *s >= t && *s <= t_hor));
                grid.sort_by(f64::total_cmp);
                let mut tr = Trajectory::new(*m, seed, cfg, false)?;
                for &s in &grid {
                    let r = r_a(a, s);
                    let mult: usize = rep
                        .events
                        .iter()
                        .filter(|e| (e.0 - s).abs() <= r)
                        .map(|e| e.1)
                        .sum();
                    if mult < m.dim() - 1 {
                        continue;
                    }
                    let end = tr.advance_to(s)?.wrapped(m);
                    let flat_lower = if m.is_torus() {
                        distance(&ManifoldModel::FlatTorus2, x, &end.base())? * (-amp).exp()
                    } else {
                        0.0
                    };
                    if flat_lower >= r {
                        continue;
                    }
                    let d = distance(m, x, &end.base())?;
                    if d < r && first.is_none_or(|w| s < w.t) {
                        first = Some(ConjugacyWitness {
                            x: *x,
                            t: s,
                            angle: ang,
                            distance: d,
                            r,
                        });
                    }
                }
            }
            Ok((first, found))
        })
        .collect::<Result<Vec<_>>>()?;
    let witnesses: Vec<ConjugacyWitness> = per_point.iter().filter_map(|p| p.0).collect();
    Ok(ConjugacyCertificate {
        holds: witnesses.is_empty(),
        events_found: per_point.iter().map(|p| p.1).sum(),
        witnesses,
    })
}

/// Solves `J'' + K(gamma(t)) J = 0` along a conformal-torus geodesic with
/// RK4 on a fixed step, as a cross-check of the linearized flow.
pub fn scalar_jacobi(m: &ManifoldModel, seed: &CotangentPoint, t_end: f64, steps: usize) -> Result<Vec<(f64, f64)>> {
    let cfg = FlowConfig::default();
    let mut tr = Trajectory::new(*m, *seed, cfg, false)?;
    let h = t_end / steps as f64;
    let mut k_at = |t: f64| -> Result<f64> {
        let p = tr.advance_to(t)?.raw;
        Ok(match m.effective() {
            ManifoldModel::ConformalTorus2 {
                amplitude,
                frequency,
            } => {
                let (phi, _, dd) = conformal_phi(amplitude, frequency, p.x[0]);
                -(-2.0 * phi).exp() * dd
            }
            ManifoldModel::Sphere2 => 1.0,
            ManifoldModel::FlatTorus2 => 0.0,
        })
    };
    let (mut j, mut dj) = (0.0, 1.0);
    let mut out = vec![(0.0, 0.0)];
    for i in 0..steps {
        let t = i as f64 * h;
        let k0 = k_at(t)?;
        let km = k_at(t + h / 2.0)?;
        let k1 = k_at(t + h)?;
        let f = |k: f64, j: f64| -k * j;
        let a1 = (dj, f(k0, j));
        let a2 = (dj + h / 2.0 * a1.1, f(km, j + h / 2.0 * a1.0));
        let a3 = (dj + h / 2.0 * a2.1, f(km, j + h / 2.0 * a2.0));
        let a4 = (dj + h * a3.1, f(k1, j + h * a3.0));
        j += h / 6.0 * (a1.0 + 2.0 * a2.0 + 2.0 * a3.0 + a4.0);
        dj += h / 6.0 * (a1.1 + 2.0 * a2.1 + 2.0 * a3.1 + a4.1);
        out.push((t + h, j));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Chart;
    use crate::submanifold::{sample_conormal, Submanifold, SubmanifoldKind};

    fn setup(m: ManifoldModel, kind: SubmanifoldKind, density: f64) -> Vec<ConormalSample> {
        let h = Submanifold::new(m, kind, density).unwrap();
        sample_conormal(&h, density).unwrap()
    }

    #[test]
    fn sphere_point_returns_at_two_pi() {
        let m = ManifoldModel::Sphere2;
        let s = setup(m, SubmanifoldKind::Point { x: [1.0, 0.3] }, 4.0);
        let sc = ReturnScanner::new(m, &s, 1e-3, FlowConfig::default()).unwrap();
        for i in [0, 5, 11] {
            let r = sc.first_return(&s, i, 7.0).unwrap();
            assert!((r.t_h.unwrap() - 2.0 * PI).abs() < 1e-6, "{:?}", r.t_h);
            assert_eq!(r.crossings.len(), 1);
        }
    }

    #[test]
    fn equator_returns_at_pi() {
        let m = ManifoldModel::Sphere2;
        let s = setup(m, SubmanifoldKind::LatitudeCircle { theta0: PI / 2.0 }, 8.0);
        let sc = ReturnScanner::new(m, &s, 1e-3, FlowConfig::default()).unwrap();
        for i in [0, 7, 60] {
            let r = sc.first_return(&s, i, 4.0).unwrap();
            assert!((r.t_h.unwrap() - PI).abs() < 1e-6, "{:?}", r.t_h);
            // lands at the antipode
            let eta = r.eta.unwrap();
            let d = crate::geometry::sphere_embed(&eta.base()).dot(&crate::geometry::sphere_embed(&s[i].rho.base()));
            assert!((d + 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn torus_vertical_loop() {
        let m = ManifoldModel::FlatTorus2;
        let s = setup(
            m,
            SubmanifoldKind::ClosedGeodesic {
                p0: CotangentPoint::new([0.0, 0.0], [1.0, 0.0]),
                length: 1.0,
            },
            16.0,
        );
        let sc = ReturnScanner::new(m, &s, 1e-3, FlowConfig::default()).unwrap();
        for i in [0, 3, 20] {
            let r = sc.first_return(&s, i, 1.5).unwrap();
            assert!((r.t_h.unwrap() - 1.0).abs() < 1e-6);
            let eta = r.eta.unwrap();
            assert!(phase_distance(&m, &eta, &s[i].rho) < 1e-9);
        }
    }

    #[test]
    fn horizon_marker_and_zero_horizon() {
        let m = ManifoldModel::Sphere2;
        let s = setup(m, SubmanifoldKind::Point { x: [1.0, 0.3] }, 4.0);
        let sc = ReturnScanner::new(m, &s, 1e-3, FlowConfig::default()).unwrap();
        let r = sc.first_return(&s, 2, 5.0).unwrap();
        assert!(r.t_h.is_none() && r.eta.is_none());
        assert_eq!(loop_fraction(&sc, &s, 0.0).unwrap(), 0.0);
        assert!((loop_fraction(&sc, &s, 7.0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn time_reversal() {
        let m = ManifoldModel::Sphere2;
        let s = setup(m, SubmanifoldKind::LatitudeCircle { theta0: PI / 2.0 }, 8.0);
        let tol = 1e-3;
        let sc = ReturnScanner::new(m, &s, tol, FlowConfig::default()).unwrap();
        let r = sc.first_return(&s, 9, 4.0).unwrap();
        let back = sc.scan(&r.eta.unwrap(), -4.0, true).unwrap();
        assert!(phase_distance(&m, &back[0].point, &s[9].rho) < 10.0 * tol);
    }

    #[test]
    fn return_map_preserves_measure() {
        let m = ManifoldModel::Sphere2;
        let s = setup(m, SubmanifoldKind::LatitudeCircle { theta0: PI / 2.0 }, 8.0);
        let sc = ReturnScanner::new(m, &s, 1e-3, FlowConfig::default()).unwrap();
        let recs = all_returns(&sc, &s, 4.0).unwrap();
        let b = liouville_bin_test(&s, &recs, 8);
        assert!(b.passes(), "{b:?}");
        assert!(b.tolerance < 0.35);
    }

    /// Angles whose trajectories from a torus point return within `t_max`:
    /// windows of half-width `asin(tol / L)` around primitive lattice
    /// directions of length `L <= t_max`.
    fn lattice_windows(t_max: f64, tol: f64) -> Vec<(f64, f64)> {
        let n = t_max.floor() as i64;
        let mut out = Vec::new();
        for p in -n..=n {
            for q in -n..=n {
                let l = ((p * p + q * q) as f64).sqrt();
                if l == 0.0 || l > t_max || gcd(p.abs(), q.abs()) != 1 {
                    continue;
                }
                out.push(((q as f64).atan2(p as f64), (tol / l).asin()));
            }
        }
        out
    }

    fn gcd(a: i64, b: i64) -> i64 {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }

    #[test]
    fn flat_loop_fraction_matches_lattice_oracle() {
        let m = ManifoldModel::FlatTorus2;
        let s = setup(m, SubmanifoldKind::Point { x: [0.25, 0.6] }, 64.0);
        let tol = 0.01;
        let sc = ReturnScanner::new(m, &s, tol, FlowConfig::default()).unwrap();
        let f = loop_fraction(&sc, &s, 10.0).unwrap();
        let w = lattice_windows(10.0, tol);
        let angdiff = |a: f64, b: f64| ((a - b + PI).rem_euclid(2.0 * PI) - PI).abs();
        // samples clearly inside or clearly outside every window
        let (mut lo, mut hi) = (0.0, 0.0);
        for x in &s {
            let margin = |slack: f64| w.iter().any(|(c, hw)| angdiff(x.param, *c) < hw * slack);
            if margin(0.95) {
                lo += x.weight;
            }
            if margin(1.05) {
                hi += x.weight;
            }
        }
        let total = 2.0 * PI;
        assert!(f >= lo / total - 1e-12 && f <= hi / total + 1e-12, "{} {} {}", lo / total, f, hi / total);
        assert!(f > 0.0);
    }

    #[test]
    fn decomposition_chain_sphere_total_recurrence() {
        let m = ManifoldModel::Sphere2;
        let x = Point::new([1.0, 0.3]);
        let s = setup(m, SubmanifoldKind::Point { x: x.x }, 4.0);
        let sc = ReturnScanner::new(m, &s, 1e-3, FlowConfig::default()).unwrap();
        let table = crossing_table(&sc, &s, 30.0).unwrap();
        let cover = angular_cover(&m, &x, 3);
        let d = recurrence_decomposition(&m, &s, &cover, &table, 7.0, 30.0).unwrap();
        for i in 0..d.balls() {
            assert_eq!(d.sigma_e(i), 0.0);
        }
        for n in 1..6 {
            assert!((d.sigma_b(n) - 2.0 * PI).abs() < 1e-12);
        }
        assert!(matches!(
            recurrence_decomposition(&m, &s, &cover, &table, 8.0, 30.0),
            Err(Error::Inconclusive { .. })
        ));
        assert!(matches!(
            recurrence_decomposition(&m, &s, &cover[..1], &table, 7.0, 30.0),
            Err(Error::Cover(_))
        ));
    }

    #[test]
    fn b_n_matches_set_difference_form() {
        let m = ManifoldModel::FlatTorus2;
        let x = Point::new([0.25, 0.6]);
        let s = setup(m, SubmanifoldKind::Point { x: x.x }, 16.0);
        let sc = ReturnScanner::new(m, &s, 0.01, FlowConfig::default()).unwrap();
        let table = crossing_table(&sc, &s, 40.0).unwrap();
        let cover = angular_cover(&m, &x, 3);
        let d = recurrence_decomposition(&m, &s, &cover, &table, 10.0, 40.0).unwrap();
        for n in 1..=d.balls() + 1 {
            for k in 0..s.len() {
                let simple = !(0..(n - 1).min(d.balls())).any(|i| d.e(i, k));
                assert_eq!(simple, d.in_b(n, k));
            }
            if n > 1 {
                assert!(d.sigma_b(n) <= d.sigma_b(n - 1) + 1e-15);
            }
        }
        // irrational-like directions populate the E sets
        assert!((0..d.balls()).any(|i| d.sigma_e(i) > 0.0));
    }

    #[test]
    fn sphere_conjugate_points() {
        let m = ManifoldModel::Sphere2;
        for (x, a) in [([1.0, 0.2], 0.3), ([PI / 2.0, 0.0], 1.9)] {
            let seed = CotangentPoint::new(x, unit_covector(&m, &x, a));
            let rep = conjugate_points(&m, &seed, (0.0, 6.0 * PI + 0.5), 0.1).unwrap();
            assert_eq!(rep.events.len(), 6);
            for (k, e) in rep.events.iter().enumerate() {
                assert!((e.0 - (k + 1) as f64 * PI).abs() < 1e-8, "{e:?}");
                assert_eq!(e.1, 1);
            }
        }
    }

    #[test]
    fn flat_has_no_conjugate_points() {
        let m = ManifoldModel::FlatTorus2;
        let seed = CotangentPoint::new([0.2, 0.1], unit_covector(&m, &[0.2, 0.1], 0.7));
        let rep = conjugate_points(&m, &seed, (0.0, 20.0), 0.1).unwrap();
        assert!(rep.events.is_empty());
        let u: Vec<Point> = (0..4).map(|i| Point::new([0.25 * i as f64, 0.1])).collect();
        let c = conjugacy_certificate(&m, &u, 5.0, 1.0, 20.0, 16, 0.05).unwrap();
        assert!(c.holds);
    }

    #[test]
    fn conformal_jacobi_matches_scalar_equation() {
        let m = ManifoldModel::ConformalTorus2 {
            amplitude: 0.1,
            frequency: 1,
        };
        let seed = CotangentPoint::new([0.0, 0.0], unit_covector(&m, &[0.0, 0.0], PI / 2.0));
        let mut jf = JacobiField::new(&m, &seed, FlowConfig::default()).unwrap();
        let oracle = scalar_jacobi(&m, &seed, 5.0, 2000).unwrap();
        for (t, j) in oracle.iter().step_by(100).skip(1) {
            assert!((jf.eval(*t).unwrap() - j).abs() < 1e-6, "t={t}");
        }
        // positive curvature along x1 = 0 forces a conjugate point before 2
        let rep = conjugate_points(&m, &seed, (0.0, 2.5), 0.1).unwrap();
        let first = rep.events[0].0;
        let zero = oracle.windows(2).find(|w| w[0].1 > 0.0 && w[1].1 <= 0.0).unwrap();
        assert!((first - zero[0].0).abs() < 5e-3, "{first} {:?}", zero);
    }

    #[test]
    fn sphere_certificate_fails_near_two_pi() {
        let m = ManifoldModel::Sphere2;
        let north = Point {
            x: [PI / 2.0, PI],
            chart: Chart::Rotated,
        };
        let c = conjugacy_certificate(&m, &[north], 5.0, 1.0, 8.0, 8, 0.05).unwrap();
        assert!(!c.holds);
        let w = c.witnesses[0];
        assert!((w.t - 2.0 * PI).abs() < 1e-6, "{w:?}");
        assert!(w.distance < w.r);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(16))]

            #[test]
            fn sphere_events_independent_of_direction(th in 0.4..2.7f64, ph in -3.0..3.0f64, a in -3.0..3.0f64) {
                let m = ManifoldModel::Sphere2;
                let seed = CotangentPoint::new([th, ph], unit_covector(&m, &[th, ph], a));
                let rep = conjugate_points(&m, &seed, (0.0, 3.0 * PI + 0.3), 0.1).unwrap();
                prop_assert_eq!(rep.events.len(), 3);
                for (k, e) in rep.events.iter().enumerate() {
                    prop_assert!((e.0 - (k + 1) as f64 * PI).abs() < 1e-8);
                }
            }
        }
    }
}
