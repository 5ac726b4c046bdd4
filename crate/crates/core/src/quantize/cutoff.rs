//! Tube cutoff symbols, their partition of unity, time averages along the
//! flow, and localized masses.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{apply_with_hat, grid_point, Fft2, GridField, SymbolGrid};
use crate::error::{Error, Result};
use crate::geometry::{wrap_diff, CotangentPoint, ManifoldModel};
use crate::submanifold::{Submanifold, SubmanifoldKind};
use crate::tubes::{Direction, Group, Tube, TubeCover};

/// `C^infinity` step: 0 for `u <= 0`, 1 for `u >= 1`.
pub fn smooth_step(u: f64) -> f64 {
    if u <= 0.0 {
        0.0
    } else if u >= 1.0 {
        1.0
    } else {
        let a = (-1.0 / u).exp();
        let b = (-1.0 / (1.0 - u)).exp();
        a / (a + b)
    }
}

/// 1 on `|d| <= inner`, 0 on `|d| >= inner + width`.
fn plateau(d: f64, inner: f64, width: f64) -> f64 {
    1.0 - smooth_step((d.abs() - inner) / width)
}

/// Rises from 0 to 1 across `[-w/2, w/2]`.
fn rise(d: f64, w: f64) -> f64 {
    smooth_step(d / w + 0.5)
}

/// Profile across one transversal direction of a tube.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Profile {
    /// Plateau of half-width `R/4`, transition of width `R/2`.
    Bump,
    /// Piece of a partition of unity switching at the midpoints `-left` and
    /// `right` to the neighbouring tubes.
    Partition { left: f64, right: f64 },
}

impl Profile {
    fn eval(&self, s: f64, radius: f64) -> f64 {
        let w = radius / 2.0;
        match *self {
            Profile::Bump => plateau(s, radius / 4.0, w),
            Profile::Partition { left, right } => rise(s + left, w) * (1.0 - rise(s - right, w)),
        }
    }
}

/// Separable cutoff `f(x) g(xi)` to a tube on the flat torus.
///
/// `f` is a lateral profile along `lateral_dir` times a plateau in the flow
/// direction out to `tau + R/4`; `g` is an angular profile times a radial
/// plateau in `|xi| - 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TubeCutoff {
    pub index: usize,
    pub center: CotangentPoint,
    pub lateral_dir: [f64; 2],
    pub tau: f64,
    pub radius: f64,
    pub h: f64,
    pub delta: f64,
    pub lateral: Profile,
    pub angular: Profile,
}

fn check_scales(model: &ManifoldModel, tau: f64, radius: f64, h: f64, delta: f64) -> Result<()> {
    if model.effective() != ManifoldModel::FlatTorus2 {
        return Err(Error::Domain("quantization runs on the flat torus only".into()));
    }
    if !(0.0..1.0).contains(&delta) || !(h > 0.0 && h < 1.0) {
        return Err(Error::Domain(format!("h = {h}, delta = {delta}")));
    }
    if radius < 5.0 * h.powf(delta) * (1.0 - 1e-12) {
        return Err(Error::Constraint(format!("R = {radius} below 5 h^delta = {}", 5.0 * h.powf(delta))));
    }
    if 2.0 * (tau + 0.75 * radius) >= 1.0 {
        return Err(Error::Domain(format!("tube of length {} wraps the torus", 2.0 * (tau + 0.75 * radius))));
    }
    Ok(())
}

fn unit(xi: [f64; 2]) -> [f64; 2] {
    let n = xi[0].hypot(xi[1]);
    [xi[0] / n, xi[1] / n]
}

/// Smoothed indicator of a single tube.
pub fn tube_cutoff(model: &ManifoldModel, tube: &Tube, index: usize, h: f64, delta: f64) -> Result<TubeCutoff> {
    check_scales(model, tube.tau, tube.radius, h, delta)?;
    let xi = unit(tube.center.rho.xi);
    Ok(TubeCutoff {
        index,
        center: CotangentPoint::new(tube.center.rho.x, xi),
        lateral_dir: [xi[1], -xi[0]],
        tau: tube.tau,
        radius: tube.radius,
        h,
        delta,
        lateral: Profile::Bump,
        angular: Profile::Bump,
    })
}

/// Partition of unity over a cover of `SN*H` for a point or a closed
/// geodesic: tubes on each branch are ordered by their parameter and switch
/// over at midpoints, laterally for a curve and in angle for a point.
pub fn partition_of_unity(cover: &TubeCover, hsub: &Submanifold, h: f64, delta: f64) -> Result<Vec<TubeCutoff>> {
    check_scales(&cover.model, cover.tau, cover.radius, h, delta)?;
    let (period, angular) = match hsub.kind {
        SubmanifoldKind::Point { .. } => (2.0 * PI, true),
        SubmanifoldKind::ClosedGeodesic { .. } => (hsub.volume(), false),
        _ => return Err(Error::Domain("partition needs a point or a closed geodesic".into())),
    };
    let mut out: Vec<TubeCutoff> = Vec::with_capacity(cover.len());
    for (i, t) in cover.tubes.iter().enumerate() {
        let mut c = tube_cutoff(&cover.model, t, i, h, delta)?;
        let b = if t.center.branch == 0 { 1.0 } else { t.center.branch as f64 };
        c.lateral_dir = [b * c.lateral_dir[0], b * c.lateral_dir[1]];
        out.push(c);
    }
    for branch in [-1i8, 0, 1] {
        let mut idx: Vec<usize> = (0..cover.len()).filter(|i| cover.tubes[*i].center.branch == branch).collect();
        if idx.is_empty() {
            continue;
        }
        idx.sort_by(|a, b| cover.tubes[*a].center.param.total_cmp(&cover.tubes[*b].center.param));
        let k = idx.len();
        for (pos, &i) in idx.iter().enumerate() {
            let p = cover.tubes[i].center.param;
            let profile = if k == 1 {
                Profile::Partition {
                    left: f64::INFINITY,
                    right: f64::INFINITY,
                }
            } else {
                let prev = cover.tubes[idx[(pos + k - 1) % k]].center.param;
                let next = cover.tubes[idx[(pos + 1) % k]].center.param;
                let left = (p - prev).rem_euclid(period) / 2.0;
                let right = (next - p).rem_euclid(period) / 2.0;
                if left.min(right) < cover.radius / 4.0 {
                    return Err(Error::Constraint(format!("tube {i} is closer than R/2 to a neighbour")));
                }
                Profile::Partition { left, right }
            };
            if angular {
                out[i].angular = profile;
            } else {
                out[i].lateral = profile;
            }
        }
    }
    Ok(out)
}

impl TubeCutoff {
    /// Periodized over the nearest lattice translates, so a tube that
    /// reaches across the fundamental cell stays smooth.
    pub fn x_factor(&self, x: [f64; 2]) -> f64 {
        let d0 = [wrap_diff(x[0] - self.center.x[0]), wrap_diff(x[1] - self.center.x[1])];
        let xi = self.center.xi;
        // an unbounded lateral profile is constant along its own translates
        let unbounded = matches!(self.lateral, Profile::Partition { left, .. } if left.is_infinite());
        let mut seen: Vec<f64> = Vec::new();
        let mut sum = 0.0;
        for k1 in -1..=1 {
            for k2 in -1..=1 {
                let d = [d0[0] + k1 as f64, d0[1] + k2 as f64];
                let lon = d[0] * xi[0] + d[1] * xi[1];
                let p = plateau(lon, self.tau + self.radius / 4.0, self.radius / 2.0);
                if p == 0.0 {
                    continue;
                }
                if unbounded {
                    if seen.iter().any(|l| (l - lon).abs() < 1e-9) {
                        continue;
                    }
                    seen.push(lon);
                }
                let lat = d[0] * self.lateral_dir[0] + d[1] * self.lateral_dir[1];
                sum += self.lateral.eval(lat, self.radius) * p;
            }
        }
        sum
    }

    pub fn xi_factor(&self, xi: [f64; 2]) -> f64 {
        let c = self.center.xi;
        let r = self.radius;
        let radial = plateau(xi[0].hypot(xi[1]) - 1.0, r / 4.0, r / 2.0);
        if radial == 0.0 {
            return 0.0;
        }
        let da = (xi[1].atan2(xi[0]) - c[1].atan2(c[0]) + PI).rem_euclid(2.0 * PI) - PI;
        radial * self.angular.eval(da, r)
    }

    pub fn value(&self, x: [f64; 2], xi: [f64; 2]) -> f64 {
        let f = self.x_factor(x);
        if f == 0.0 {
            0.0
        } else {
            f * self.xi_factor(xi)
        }
    }

    /// Rank-one symbol grid.
    pub fn grid(&self, n: usize) -> Result<SymbolGrid> {
        let mut g = SymbolGrid::separable(n, self.h, self.delta, |x| self.x_factor(x), |k| self.xi_factor(k))?;
        g.tube = Some(self.index);
        Ok(g)
    }

    /// Smallest `C` with `max |Delta^a chi| <= C h^{-delta |a|} dx^{|a|}`
    /// over `|a| <= 2`, from finite differences on an `n x n` position grid
    /// and the frequency lattice (coarsened to 512 nodes across the support
    /// when `2 pi h` is finer).
    pub fn sdelta_constant(&self, n: usize) -> f64 {
        let hd = self.h.powf(self.delta);
        let dx = 1.0 / n as f64;
        let fx: Vec<f64> = (0..n * n).map(|i| self.x_factor(grid_point(i, n))).collect();
        let at = |i: usize, j: usize| fx[(i % n) * n + j % n];
        let (mut d1, mut d2) = (0.0f64, 0.0f64);
        for i in 0..n {
            for j in 0..n {
                let c = at(i, j);
                d1 = d1.max((at(i + 1, j) - c).abs()).max((at(i, j + 1) - c).abs());
                d2 = d2
                    .max((at(i + 1, j) - 2.0 * c + at(i + n - 1, j)).abs())
                    .max((at(i, j + 1) - 2.0 * c + at(i, j + n - 1)).abs())
                    .max((at(i + 1, j + 1) - at(i + 1, j) - at(i, j + 1) + c).abs());
            }
        }
        let cx1 = d1 / dx * hd;
        let cx2 = d2 / (dx * dx) * hd * hd;
        let extent = 1.0 + self.radius;
        let dk = (2.0 * PI * self.h).max(2.0 * extent / 512.0);
        let m = (extent / dk).ceil() as i64;
        let side = (2 * m + 1) as usize;
        let gk: Vec<f64> = (0..side * side)
            .map(|i| {
                let a = (i / side) as i64 - m;
                let b = (i % side) as i64 - m;
                self.xi_factor([a as f64 * dk, b as f64 * dk])
            })
            .collect();
        let g = |a: usize, b: usize| gk[a * side + b];
        let (mut e1, mut e2) = (0.0f64, 0.0f64);
        for a in 1..side - 1 {
            for b in 1..side - 1 {
                let c = g(a, b);
                e1 = e1.max((g(a + 1, b) - c).abs()).max((g(a, b + 1) - c).abs());
                e2 = e2
                    .max((g(a + 1, b) - 2.0 * c + g(a - 1, b)).abs())
                    .max((g(a, b + 1) - 2.0 * c + g(a, b - 1)).abs())
                    .max((g(a + 1, b + 1) - g(a + 1, b) - g(a, b + 1) + c).abs());
            }
        }
        let cg1 = e1 / dk * hd;
        let cg2 = e2 / (dk * dk) * hd * hd;
        [cx1, cx2, cg1, cg2, cx1 * cg1].into_iter().fold(0.0, f64::max)
    }
}

/// Window `[t0, t1]` on which a single tube is certified non-self looping.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertifiedWindow {
    pub tube: usize,
    pub t0: f64,
    pub t1: f64,
    pub direction: Direction,
}

pub fn certify_window(cover: &TubeCover, tube: usize, t0: f64, t1: f64) -> Result<Option<CertifiedWindow>> {
    Ok(cover
        .certify(&[tube], t0, t1, 1.0)?
        .map(|direction| CertifiedWindow { tube, t0, t1, direction }))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeAverage {
    /// Largest `(1/T) int_0^T chi^2 o phi_t dt` over the probes.
    pub sup: f64,
    /// `t0 / T`.
    pub bound: f64,
    pub probes: usize,
}

/// Sup over phase space of the flow average of `chi^2` over `[0, T]`, by
/// exact linear transport and a midpoint rule with `steps` nodes.
pub fn time_average_symbol(chi: &TubeCutoff, window: Option<&CertifiedWindow>, steps: usize) -> Result<TimeAverage> {
    let w = window.ok_or(Error::CertificateMissing)?;
    if w.tube != chi.index {
        return Err(Error::CertificateMissing);
    }
    if !(w.t1 >= w.t0 && w.t0 > 0.0) || steps == 0 {
        return Err(Error::Domain(format!("window [{}, {}] with {steps} steps", w.t0, w.t1)));
    }
    let (t0, tt) = (w.t0, w.t1);
    let r = chi.radius;
    let c = chi.center;
    let l = chi.lateral_dir;
    let span = |k: usize, half: f64, count: usize| -half + 2.0 * half * k as f64 / (count - 1) as f64;
    let mut probes = Vec::new();
    for a in 0..5 {
        for b in 0..5 {
            let ea = span(a, 0.75 * r, 5);
            let eb = span(b, 0.75 * r, 5);
            let xi = [c.xi[0] * (1.0 + eb) + l[0] * ea, c.xi[1] * (1.0 + eb) + l[1] * ea];
            for p in 0..9 {
                let lat = span(p, 0.75 * r, 9);
                for q in 0..64 {
                    let lon = -0.5 + q as f64 / 64.0;
                    let x = [
                        c.x[0] + lat * l[0] + lon * c.xi[0],
                        c.x[1] + lat * l[1] + lon * c.xi[1],
                    ];
                    probes.push((x, xi));
                }
            }
        }
    }
    use rayon::prelude::*;
    let dt = tt / steps as f64;
    let sup = probes
        .par_iter()
        .map(|(x, xi)| {
            let fxi = chi.xi_factor(*xi);
            if fxi == 0.0 {
                return 0.0;
            }
            let mut s = 0.0;
            for k in 0..steps {
                let t = (k as f64 + 0.5) * dt;
                let v = chi.x_factor([x[0] + t * xi[0], x[1] + t * xi[1]]) * fxi;
                s += v * v;
            }
            s / steps as f64
        })
        .reduce(|| 0.0, f64::max);
    Ok(TimeAverage {
        sup,
        bound: t0 / tt,
        probes: probes.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MassReport {
    /// `(tube index, ||Op(chi_j) u||^2)`
    pub per_tube: Vec<(usize, f64)>,
    pub total: f64,
    pub norm2: f64,
    /// `total / ((t/T) ||u||^2)` when a certified group is given.
    pub ratio: Option<f64>,
}

/// `||Op_h(chi_j) u||^2` over a group (or every cutoff when `group` is
/// `None`).
pub fn localized_mass(u: &GridField, cutoffs: &[TubeCutoff], group: Option<&Group>) -> Result<MassReport> {
    let members: Vec<usize> = match group {
        Some(g) => g.members.clone(),
        None => cutoffs.iter().map(|c| c.index).collect(),
    };
    let fft = Fft2::new(u.n);
    let mut hat = u.values.clone();
    fft.forward(&mut hat);
    let mut per_tube = Vec::with_capacity(members.len());
    for j in members {
        let c = cutoffs
            .iter()
            .find(|c| c.index == j)
            .ok_or_else(|| Error::Domain(format!("no cutoff for tube {j}")))?;
        if (c.h - u.h).abs() > 1e-12 * u.h {
            return Err(Error::Domain("cutoff and field use different h".into()));
        }
        let a = c.grid(u.n)?;
        let v = apply_with_hat(&a, u, &hat, &fft);
        per_tube.push((j, v.norm().powi(2)));
    }
    let total = per_tube.iter().map(|p| p.1).sum();
    let norm2 = u.norm().powi(2);
    let ratio = group.map(|g| total / (g.t / g.t_end * norm2));
    Ok(MassReport {
        per_tube,
        total,
        norm2,
        ratio,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MassRow {
    pub tube_index: usize,
    pub group: String,
    pub mass: f64,
    pub ratio: f64,
}

pub fn write_mass_csv(path: &Path, rows: &[MassRow]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "tube_index,group,mass,ratio")?;
    for r in rows {
        writeln!(f, "{},{},{:.17e},{:.17e}", r.tube_index, r.group, r.mass, r.ratio)?;
    }
    Ok(())
}
