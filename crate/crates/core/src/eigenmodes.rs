//! Closed-form eigenfunctions and model beams, their averages over
//! submanifolds, sup norms, and log-log scaling fits.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Vector3};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{sphere_embed, ManifoldModel, Point};
use crate::submanifold::{Submanifold, SubmanifoldKind};

/// Largest admissible spherical degree.
pub const MAX_DEGREE: u64 = 100_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum EigenmodeKind {
    /// Zonal harmonic of degree `l` about a unit axis in `R^3`.
    Zonal { l: u64, axis: [f64; 3] },
    /// `Y_l^l`, the normalized restriction of `(x1 + i x2)^l`.
    HighestWeight { l: u64 },
    /// `e^{2 pi i <m, x>}` on the unit torus.
    TorusMode { m: [i64; 2] },
    /// Seeded Gaussian combination of real spherical harmonics of degree `l`.
    RandomSphereMode { l: u64, seed: u64 },
    /// `h^{-1/4} e^{i x1/h} e^{-|x|^2/2h} a` on `R^2` (a model, not an
    /// eigenfunction).
    EuclideanBeam { h: f64, amplitude: f64 },
}

/// Mode with precomputed normalization data.
#[derive(Clone, Debug)]
pub struct Eigenmode {
    pub kind: EigenmodeKind,
    /// log of the `Y_l^l` normalization constant
    log_norm: f64,
    /// coefficients for `m = -l..=l` of the random mode
    coeffs: Vec<f64>,
}

impl Eigenmode {
    pub fn new(kind: EigenmodeKind) -> Result<Self> {
        let mut log_norm = 0.0;
        let mut coeffs = Vec::new();
        match &kind {
            EigenmodeKind::Zonal { l, axis } => {
                guard(*l)?;
                let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
                if (n - 1.0).abs() > 1e-12 {
                    return Err(Error::Domain(format!("axis {axis:?} is not a unit vector")));
                }
            }
            EigenmodeKind::HighestWeight { l } => {
                guard(*l)?;
                log_norm = highest_weight_log_norm(*l);
            }
            EigenmodeKind::TorusMode { m } => {
                if m[0] == 0 && m[1] == 0 {
                    return Err(Error::Domain("the constant mode has no semiclassical scale".into()));
                }
            }
            EigenmodeKind::RandomSphereMode { l, seed } => {
                guard(*l)?;
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                coeffs = (0..2 * l + 1).map(|_| StandardNormal.sample(&mut rng)).collect();
                let n = coeffs.iter().map(|c| c * c).sum::<f64>().sqrt();
                coeffs.iter_mut().for_each(|c| *c /= n);
            }
            EigenmodeKind::EuclideanBeam { h, .. } => {
                if !(*h > 0.0 && *h <= 0.1) {
                    return Err(Error::Domain(format!("beam h = {h} not in (0, 0.1]")));
                }
            }
        }
        Ok(Eigenmode {
            kind,
            log_norm,
            coeffs,
        })
    }

    /// Semiclassical parameter: `(l(l+1))^{-1/2}` on the sphere and
    /// `1/(2 pi |m|)` on the torus.
    pub fn h(&self) -> f64 {
        match &self.kind {
            EigenmodeKind::Zonal { l, .. }
            | EigenmodeKind::HighestWeight { l }
            | EigenmodeKind::RandomSphereMode { l, .. } => {
                let l = *l as f64;
                1.0 / (l * (l + 1.0)).sqrt()
            }
            EigenmodeKind::TorusMode { m } => 1.0 / (2.0 * PI * (m[0] as f64).hypot(m[1] as f64)),
            EigenmodeKind::EuclideanBeam { h, .. } => *h,
        }
    }

    pub fn is_eigenfunction(&self) -> bool {
        !matches!(self.kind, EigenmodeKind::EuclideanBeam { .. })
    }

    pub fn on_sphere(&self) -> bool {
        matches!(
            self.kind,
            EigenmodeKind::Zonal { .. } | EigenmodeKind::HighestWeight { .. } | EigenmodeKind::RandomSphereMode { .. }
        )
    }

    /// Analytic `L^2` norm (the beam norm is over `R^2`).
    pub fn l2_norm(&self) -> f64 {
        match &self.kind {
            EigenmodeKind::EuclideanBeam { h, amplitude } => amplitude.abs() * (PI * h.sqrt()).sqrt(),
            _ => 1.0,
        }
    }

    /// Value at a point of the unit sphere in `R^3`.
    pub fn eval_embedded(&self, p: &Vector3<f64>) -> Complex64 {
        match &self.kind {
            EigenmodeKind::Zonal { l, axis } => {
                let x = (p[0] * axis[0] + p[1] * axis[1] + p[2] * axis[2]).clamp(-1.0, 1.0);
                let c = ((2 * l + 1) as f64 / (4.0 * PI)).sqrt();
                Complex64::new(c * legendre(*l, x), 0.0)
            }
            EigenmodeKind::HighestWeight { l } => {
                let s = p[0].hypot(p[1]);
                if s == 0.0 {
                    return Complex64::new(if *l == 0 { self.log_norm.exp() } else { 0.0 }, 0.0);
                }
                let mag = (self.log_norm + *l as f64 * s.ln()).exp();
                Complex64::from_polar(mag, *l as f64 * p[1].atan2(p[0]))
            }
            EigenmodeKind::RandomSphereMode { l, .. } => {
                let l = *l as usize;
                let ct = p[2].clamp(-1.0, 1.0);
                let st = p[0].hypot(p[1]);
                let ph = p[1].atan2(p[0]);
                let plm = normalized_assoc_legendre(l, ct, st);
                let mut v = self.coeffs[l] * plm[0];
                for m in 1..=l {
                    let (s, c) = (m as f64 * ph).sin_cos();
                    v += std::f64::consts::SQRT_2 * plm[m] * (self.coeffs[l + m] * c + self.coeffs[l - m] * s);
                }
                Complex64::new(v, 0.0)
            }
            _ => Complex64::new(f64::NAN, f64::NAN),
        }
    }

    /// Value at chart coordinates `x` (torus / plane modes).
    pub fn eval_flat(&self, x: [f64; 2]) -> Complex64 {
        match &self.kind {
            EigenmodeKind::TorusMode { m } => {
                Complex64::from_polar(1.0, 2.0 * PI * (m[0] as f64 * x[0] + m[1] as f64 * x[1]))
            }
            EigenmodeKind::EuclideanBeam { h, amplitude } => {
                let r2 = x[0] * x[0] + x[1] * x[1];
                Complex64::from_polar(amplitude * h.powf(-0.25) * (-r2 / (2.0 * h)).exp(), x[0] / h)
            }
            _ => Complex64::new(f64::NAN, f64::NAN),
        }
    }
}

fn guard(l: u64) -> Result<()> {
    if l > MAX_DEGREE {
        Err(Error::OverflowGuard(l))
    } else {
        Ok(())
    }
}

/// `P_l(x)` by the upward three-term recurrence.
pub fn legendre(l: u64, x: f64) -> f64 {
    let (mut p0, mut p1) = (1.0, x);
    if l == 0 {
        return 1.0;
    }
    for k in 1..l {
        let k = k as f64;
        let p2 = ((2.0 * k + 1.0) * x * p1 - k * p0) / (k + 1.0);
        p0 = p1;
        p1 = p2;
    }
    p1
}

/// `log c_l` with `|c_l|^2 = (2l+1)! / (4 pi (2^l l!)^2)`.
fn highest_weight_log_norm(l: u64) -> f64 {
    let mut s = -(4.0 * PI).ln() - 2.0 * l as f64 * 2f64.ln();
    for k in 1..=l {
        s -= (k as f64).ln();
    }
    for k in l + 1..=2 * l + 1 {
        s += (k as f64).ln();
    }
    0.5 * s
}

/// Orthonormal `P̄_l^m(cos theta)` for `m = 0..=l` (so that
/// `P̄_l^m e^{i m phi}` has unit `L^2(S^2)` norm).
fn normalized_assoc_legendre(l: usize, ct: f64, st: f64) -> Vec<f64> {
    let mut out = vec![0.0; l + 1];
    let mut pmm = 1.0 / (4.0 * PI).sqrt();
    for (m, slot) in out.iter_mut().enumerate() {
        if m > 0 {
            pmm *= -((2 * m + 1) as f64 / (2 * m) as f64).sqrt() * st;
        }
        if m == l {
            *slot = pmm;
            break;
        }
        let a = |k: usize| (((4 * k * k - 1) as f64) / ((k * k - m * m) as f64)).sqrt();
        let (mut p_prev, mut p) = (pmm, ((2 * m + 3) as f64).sqrt() * ct * pmm);
        let mut a_prev = a(m + 1);
        for k in m + 2..=l {
            let ak = a(k);
            let next = ak * (ct * p - p_prev / a_prev);
            p_prev = p;
            p = next;
            a_prev = ak;
        }
        *slot = p;
    }
    out
}

/// Mode value at a manifold point.
pub fn eval_mode(mode: &Eigenmode, model: &ManifoldModel, x: &Point) -> Result<Complex64> {
    match (mode.on_sphere(), model.effective()) {
        (true, ManifoldModel::Sphere2) => Ok(mode.eval_embedded(&sphere_embed(x))),
        (false, ManifoldModel::FlatTorus2) => Ok(mode.eval_flat(x.x)),
        _ => Err(Error::Domain(format!("mode {:?} does not live on {model:?}", mode.kind))),
    }
}

/// `(-h^2 Delta - 1) u` at `x` by a 5-point stencil of step `step` in
/// chart coordinates, divided by the sup of `|u|` over the stencil.
pub fn eigen_residual(mode: &Eigenmode, model: &ManifoldModel, x: &Point, step: f64) -> Result<f64> {
    let h = mode.h();
    let at = |dx: f64, dy: f64| eval_mode(mode, model, &Point { x: [x.x[0] + dx, x.x[1] + dy], chart: x.chart });
    let c = at(0.0, 0.0)?;
    let (xp, xm, yp, ym) = (at(step, 0.0)?, at(-step, 0.0)?, at(0.0, step)?, at(0.0, -step)?);
    let d11 = (xp - 2.0 * c + xm) / (step * step);
    let d22 = (yp - 2.0 * c + ym) / (step * step);
    let lap = match model.effective() {
        ManifoldModel::Sphere2 => {
            let th = x.x[0];
            d11 + (xp - xm) / (2.0 * step) * (th.cos() / th.sin()) + d22 / (th.sin() * th.sin())
        }
        _ => d11 + d22,
    };
    let scale = [c, xp, xm, yp, ym].iter().map(|v| v.norm()).fold(0.0, f64::max).max(1e-300);
    Ok((-h * h * lap - c).norm() / scale)
}

// ---------------------------------------------------------------------------
// averages
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Average {
    pub value: Complex64,
    pub error: f64,
}

fn quadrature(mode: &Eigenmode, h: &Submanifold) -> Result<Complex64> {
    let mut s = Complex64::new(0.0, 0.0);
    for q in &h.quad_nodes {
        s += eval_mode(mode, &h.model, &q.point)? * q.weight;
    }
    Ok(s)
}

/// `int_H u dsigma_H`, compared between densities `d 2^{r-1}` and `d 2^r`
/// with `d` at least eight nodes per wavelength.
pub fn average_over(h: &Submanifold, mode: &Eigenmode, quad_refine: u32) -> Result<Average> {
    if let SubmanifoldKind::Point { .. } = h.kind {
        let v = quadrature(mode, h)?;
        return Ok(Average { value: v, error: 0.0 });
    }
    let refine = quad_refine.max(1);
    let base = h.density.max(8.0 / (2.0 * PI * mode.h()));
    let coarse = h.with_density(base * 2f64.powi(refine as i32 - 1))?;
    let fine = h.with_density(base * 2f64.powi(refine as i32))?;
    let a = quadrature(mode, &coarse)?;
    let b = quadrature(mode, &fine)?;
    let diff = (a - b).norm();
    let floor = 1e-12 * h.volume() * sup_bound(mode);
    if diff > 1e-3 * a.norm().max(b.norm()) && diff > floor {
        return Err(Error::Quadrature(a.norm(), b.norm()));
    }
    Ok(Average { value: b, error: diff })
}

/// Crude upper bound on `|u|` used as an absolute scale.
fn sup_bound(mode: &Eigenmode) -> f64 {
    match &mode.kind {
        EigenmodeKind::Zonal { l, .. } | EigenmodeKind::HighestWeight { l } | EigenmodeKind::RandomSphereMode { l, .. } => {
            ((2 * l + 1) as f64 / (4.0 * PI)).sqrt()
        }
        EigenmodeKind::TorusMode { .. } => 1.0,
        EigenmodeKind::EuclideanBeam { h, amplitude } => amplitude.abs() * h.powf(-0.25),
    }
}

/// Closed form of the beam restriction to the line at `angle` to the axis.
pub fn beam_restriction_exact(h: f64, angle: f64) -> f64 {
    let c = angle.cos();
    h.powf(-0.25) * (2.0 * PI * h).sqrt() * (-c * c / (2.0 * h)).exp()
}

/// Integral of the unit-amplitude beam along `s -> s (cos a, sin a)`,
/// `|s| <= half_width`, by trapezoid rules refined until two levels beyond
/// the oscillation resolution agree. Nodes are dyadic so `k s` is formed
/// exactly before reduction mod `2 pi`; the odd part cancels by symmetry.
pub fn beam_restriction(h: f64, angle: f64, half_width: f64) -> Result<Average> {
    if !(h > 0.0 && h <= 0.1) || !(0.0..=PI / 2.0).contains(&angle) || !(half_width > 0.0) {
        return Err(Error::Domain(format!("beam inputs h = {h}, angle = {angle}, half_width = {half_width}")));
    }
    let k = angle.cos() / h;
    let amp = h.powf(-0.25);
    // spacing that pushes the first alias beyond exp(-40) of the Gaussian
    let needed = 2.0 * PI / (k + (80.0 / h).sqrt());
    let mut ds = 2f64.powi(needed.log2().floor() as i32);
    let rule = |ds: f64| -> f64 {
        let half = (half_width / ds).ceil() as i64;
        let terms: Vec<f64> = (1..=half)
            .into_par_iter()
            .map(|j| {
                let s = j as f64 * ds;
                let w = if j == half { 0.5 } else { 1.0 };
                2.0 * w * (-s * s / (2.0 * h)).exp() * reduced_phase(k, s).cos()
            })
            .collect();
        amp * ds * neumaier(std::iter::once(1.0).chain(terms))
    };
    let mut prev = rule(ds);
    let mut err = f64::INFINITY;
    for _ in 0..2 {
        ds /= 2.0;
        let next = rule(ds);
        err = (next - prev).abs();
        prev = next;
    }
    Ok(Average {
        value: Complex64::new(prev, 0.0),
        error: err,
    })
}

/// `k s mod 2 pi` with the product formed exactly.
fn reduced_phase(k: f64, s: f64) -> f64 {
    const TAU_HI: f64 = std::f64::consts::TAU;
    const TAU_LO: f64 = 2.449_293_598_294_706_4e-16;
    let p = k * s;
    let e = k.mul_add(s, -p);
    let q = (p / TAU_HI).round();
    (-q).mul_add(TAU_HI, p) - q * TAU_LO + e
}

fn neumaier(xs: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut c) = (0.0f64, 0.0f64);
    for x in xs {
        let t = sum + x;
        c += if sum.abs() >= x.abs() { (sum - t) + x } else { (x - t) + sum };
        sum = t;
    }
    sum + c
}

/// Default beam half width `20 sqrt(h)`.
pub fn default_half_width(h: f64) -> f64 {
    20.0 * h.sqrt()
}

// ---------------------------------------------------------------------------
// sup norms
// ---------------------------------------------------------------------------

fn fibonacci(n: usize) -> Vec<Vector3<f64>> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (2 * i + 1) as f64 / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let (s, c) = (i as f64 * golden).sin_cos();
            Vector3::new(r * c, r * s, z)
        })
        .collect()
}

/// `c_l P_l(cos theta)` on a uniform theta grid with 32 nodes per
/// oscillation, read back by 4-point Lagrange interpolation. Used only to
/// rank grid candidates.
struct ZonalTable {
    step: f64,
    values: Vec<f64>,
}

impl ZonalTable {
    fn new(l: u64) -> Self {
        let m = 32 * (l as usize + 1);
        let step = PI / m as f64;
        let c = ((2 * l + 1) as f64 / (4.0 * PI)).sqrt();
        let values = (0..=m).into_par_iter().map(|j| c * legendre(l, (j as f64 * step).cos())).collect();
        ZonalTable { step, values }
    }

    fn eval(&self, x: f64) -> f64 {
        let th = x.clamp(-1.0, 1.0).acos() / self.step;
        let last = self.values.len() - 1;
        let j = (th.floor() as usize).clamp(1, last - 2);
        let u = th - j as f64;
        let v = &self.values[j - 1..j + 3];
        let (a, b, c, d) = (u + 1.0, u, u - 1.0, u - 2.0);
        -v[0] * b * c * d / 6.0 + v[1] * a * c * d / 2.0 - v[2] * a * b * d / 2.0 + v[3] * a * b * c / 6.0
    }
}

fn pattern_search<F: Fn(&Vector3<f64>) -> f64>(f: &F, mut p: Vector3<f64>, mut step: f64) -> f64 {
    let mut best = f(&p);
    while step > 1e-10 {
        let a = if p[0].abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        let e1 = p.cross(&a).normalize();
        let e2 = p.cross(&e1);
        let mut moved = false;
        for d in [e1, -e1, e2, -e2] {
            let q = (p + d * step).normalize();
            let v = f(&q);
            if v > best {
                best = v;
                p = q;
                moved = true;
                break;
            }
        }
        if !moved {
            step /= 2.0;
        }
    }
    best
}

fn sphere_sup(mode: &Eigenmode, n: usize, spacing: f64) -> f64 {
    let pts = fibonacci(n);
    let vals: Vec<f64> = match &mode.kind {
        EigenmodeKind::Zonal { l, axis } if *l >= 64 => {
            let table = ZonalTable::new(*l);
            let a = Vector3::from(*axis);
            pts.par_iter().map(|p| table.eval(p.dot(&a)).abs()).collect()
        }
        _ => pts.par_iter().map(|p| mode.eval_embedded(p).norm()).collect(),
    };
    let mut idx: Vec<usize> = (0..n).collect();
    let k = 16.min(n);
    idx.select_nth_unstable_by(k - 1, |a, b| vals[*b].partial_cmp(&vals[*a]).unwrap());
    let f = |p: &Vector3<f64>| mode.eval_embedded(p).norm();
    idx[..k]
        .iter()
        .map(|&i| pattern_search(&f, pts[i], spacing))
        .fold(0.0, f64::max)
}

fn torus_sup(mode: &Eigenmode, side: usize) -> f64 {
    let spacing = 1.0 / side as f64;
    let mut best = (0.0, [0.0, 0.0]);
    for i in 0..side {
        for j in 0..side {
            let x = [i as f64 * spacing, j as f64 * spacing];
            let v = mode.eval_flat(x).norm();
            if v > best.0 {
                best = (v, x);
            }
        }
    }
    // local pattern refinement on the plane
    let (mut v, mut x, mut step) = (best.0, best.1, spacing);
    while step > 1e-10 {
        let mut moved = false;
        for d in [[step, 0.0], [-step, 0.0], [0.0, step], [0.0, -step]] {
            let y = [x[0] + d[0], x[1] + d[1]];
            let w = mode.eval_flat(y).norm();
            if w > v {
                v = w;
                x = y;
                moved = true;
                break;
            }
        }
        if !moved {
            step /= 2.0;
        }
    }
    v
}

/// `||u||_inf / ||u||_2` from a quasi-uniform grid with `grid_density`
/// points per wavelength `2 pi h`, refined locally around the best grid
/// points, and re-estimated on a 1.5x finer grid.
pub fn sup_ratio(mode: &Eigenmode, grid_density: f64) -> Result<f64> {
    if !(grid_density >= 8.0) {
        return Err(Error::Domain(format!("grid density {grid_density} below 8 points per wavelength")));
    }
    let estimate = |ppw: f64| -> f64 {
        let spacing = 2.0 * PI * mode.h() / ppw;
        if mode.on_sphere() {
            let n = ((4.0 * PI / (spacing * spacing)).ceil() as usize).max(64);
            sphere_sup(mode, n, spacing)
        } else {
            torus_sup(mode, ((1.0 / spacing).ceil() as usize).max(8))
        }
    };
    if matches!(mode.kind, EigenmodeKind::EuclideanBeam { .. }) {
        return Err(Error::Domain("sup ratio is defined for eigenfunctions on compact models".into()));
    }
    let a = estimate(grid_density);
    let b = estimate(1.5 * grid_density);
    let change = (a - b).abs() / a.max(b);
    if change > 0.01 {
        return Err(Error::Resolution(100.0 * change));
    }
    Ok(a.max(b) / mode.l2_norm())
}

// ---------------------------------------------------------------------------
// fits
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FitModel {
    PowerLaw,
    PowerTimesSqrtLog,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub pairs: Vec<(f64, f64)>,
    pub exponent: f64,
    /// Exponent `q` of `(log 1/h)^q` (zero for the pure power law).
    pub log_correction: f64,
    pub prefactor: f64,
    /// Root-mean-square residual in log coordinates.
    pub residual: f64,
}

/// Least squares for `log v = log c + p log h (+ q log log 1/h)`.
pub fn scaling_fit(pairs: &[(f64, f64)], model: FitModel) -> Result<ScalingFit> {
    if pairs.iter().any(|&(h, v)| !(h > 0.0 && h < 1.0 && v > 0.0)) {
        return Err(Error::Domain("fit needs h in (0, 1) and positive values".into()));
    }
    let cols = if model == FitModel::PowerLaw { 2 } else { 3 };
    if pairs.len() < cols.max(2) + 1 {
        return Err(Error::Rank);
    }
    let a = DMatrix::from_fn(pairs.len(), cols, |i, j| {
        let h = pairs[i].0;
        match j {
            0 => 1.0,
            1 => h.ln(),
            _ => (1.0 / h).ln().ln(),
        }
    });
    let y = DVector::from_iterator(pairs.len(), pairs.iter().map(|p| p.1.ln()));
    let svd = a.clone().svd(true, true);
    let sv = &svd.singular_values;
    let (smax, smin) = (sv.max(), sv.min());
    if !(smin > 1e-12 * smax) {
        return Err(Error::Rank);
    }
    let x = svd.solve(&y, 1e-14 * smax).map_err(|_| Error::Rank)?;
    let r = &a * &x - &y;
    Ok(ScalingFit {
        pairs: pairs.to_vec(),
        exponent: x[1],
        log_correction: if cols == 3 { x[2] } else { 0.0 },
        prefactor: x[0].exp(),
        residual: (r.norm_squared() / pairs.len() as f64).sqrt(),
    })
}

/// Row of a sweep CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub kind: String,
    pub l_or_m: String,
    pub h: f64,
    pub value: Complex64,
    pub err_estimate: f64,
}

/// Write `kind,l_or_m,h,value_re,value_im,abs,err_estimate` rows.
pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "kind,l_or_m,h,value_re,value_im,abs,err_estimate")?;
    for r in rows {
        writeln!(
            f,
            "{},{},{:.17e},{:.17e},{:.17e},{:.17e},{:.3e}",
            r.kind,
            r.l_or_m,
            r.h,
            r.value.re,
            r.value.im,
            r.value.norm(),
            r.err_estimate
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests;
