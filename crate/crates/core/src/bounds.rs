//! Right-hand sides of the averaging estimates and the flow-thickened
//! measure on `SN*H`.
//!
//! Unknown constants (`C_{n,k}`, `||w||_inf`) are never instantiated; reports
//! carry them as named slots next to the computed factors.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{unit_sample, FlowConfig, Trajectory};
use crate::geometry::{
    conformal_phi, phase_coords, phase_speed_bound, wrap_unit, CotangentPoint, ManifoldModel,
};
use crate::submanifold::{ConormalSample, SampleCloud};

// ---------------------------------------------------------------------------
// invariant measures
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum MeasureKind {
    Liouville,
    PeriodicOrbit { seed: CotangentPoint, period: f64 },
    ProductDeltaXi { xi0: [f64; 2] },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedPoint {
    pub rho: CotangentPoint,
    pub weight: f64,
}

/// Flow-invariant probability measure on `S*M`, represented by weighted
/// samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvariantMeasure {
    pub model: ManifoldModel,
    pub kind: MeasureKind,
    pub samples: Vec<WeightedPoint>,
}

impl InvariantMeasure {
    /// Normalized Liouville measure by independent uniform sampling.
    pub fn liouville(model: ManifoldModel, count: usize, seed: u64) -> Result<Self> {
        model.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut samples: Vec<WeightedPoint> = (0..count)
            .map(|_| {
                let u = [rng.gen(), rng.gen(), rng.gen()];
                let rho = unit_sample(&model, u);
                // the torus sampler is uniform in coordinates
                let weight = match model.effective() {
                    ManifoldModel::ConformalTorus2 { amplitude, frequency } => {
                        (2.0 * conformal_phi(amplitude, frequency, rho.x[0]).0).exp()
                    }
                    _ => 1.0,
                };
                WeightedPoint { rho, weight }
            })
            .collect();
        let total: f64 = samples.iter().map(|s| s.weight).sum();
        for s in &mut samples {
            s.weight /= total;
        }
        Ok(InvariantMeasure {
            model,
            kind: MeasureKind::Liouville,
            samples,
        })
    }

    /// Uniform measure on the closed orbit of `seed` with the given period.
    pub fn periodic_orbit(
        model: ManifoldModel,
        seed: CotangentPoint,
        period: f64,
        count: usize,
        cfg: FlowConfig,
    ) -> Result<Self> {
        if !(period > 0.0) || count == 0 {
            return Err(Error::Domain("periodic orbit needs period > 0 and samples".into()));
        }
        let mut tr = Trajectory::new(model, seed, cfg, false)?;
        let mut samples = Vec::with_capacity(count);
        for i in 0..count {
            let t = (i as f64 + 0.5) * period / count as f64;
            samples.push(WeightedPoint {
                rho: tr.advance_to(t)?.wrapped(&model),
                weight: 1.0 / count as f64,
            });
        }
        Ok(InvariantMeasure {
            model,
            kind: MeasureKind::PeriodicOrbit { seed, period },
            samples,
        })
    }

    /// `dx x delta(xi - xi0)` on the flat torus, on a `side x side` grid.
    pub fn product_delta_xi(xi0: [f64; 2], side: usize) -> Result<Self> {
        if (xi0[0].hypot(xi0[1]) - 1.0).abs() > 1e-12 {
            return Err(Error::Domain(format!("xi0 = {xi0:?} is not a unit covector")));
        }
        let n = side.max(1);
        let w = 1.0 / (n * n) as f64;
        let samples = (0..n * n)
            .map(|i| WeightedPoint {
                rho: CotangentPoint::new(
                    [((i % n) as f64 + 0.5) / n as f64, ((i / n) as f64 + 0.5) / n as f64],
                    xi0,
                ),
                weight: w,
            })
            .collect();
        Ok(InvariantMeasure {
            model: ManifoldModel::FlatTorus2,
            kind: MeasureKind::ProductDeltaXi { xi0 },
            samples,
        })
    }

    pub fn total(&self) -> f64 {
        self.samples.iter().map(|s| s.weight).sum()
    }

    /// Largest change of a coarse bin mass after pushing every sample by
    /// `G^t`.
    pub fn invariance_defect(&self, t: f64, cfg: FlowConfig) -> Result<f64> {
        let moved: Vec<CotangentPoint> = self
            .samples
            .par_iter()
            .map(|s| Ok(Trajectory::new(self.model, s.rho, cfg, false)?.advance_to(t)?.wrapped(&self.model)))
            .collect::<Result<_>>()?;
        let mut before = std::collections::HashMap::new();
        let mut after = std::collections::HashMap::new();
        for (s, p) in self.samples.iter().zip(&moved) {
            *before.entry(coarse_bin(&self.model, &s.rho)).or_insert(0.0) += s.weight;
            *after.entry(coarse_bin(&self.model, p)).or_insert(0.0) += s.weight;
        }
        let keys: std::collections::HashSet<_> = before.keys().chain(after.keys()).copied().collect();
        Ok(keys
            .into_iter()
            .map(|k| (before.get(&k).unwrap_or(&0.0) - after.get(&k).unwrap_or(&0.0)).abs())
            .fold(0.0, f64::max))
    }
}

/// 64 coarse phase-space bins.
fn coarse_bin(m: &ManifoldModel, p: &CotangentPoint) -> (i32, i32, i32) {
    let c = phase_coords(m, p);
    let q = |v: f64| ((v * 4.0).floor() as i32).clamp(0, 3);
    let ang = |y: f64, x: f64| q(wrap_unit(y.atan2(x) / (2.0 * PI)));
    if m.is_torus() {
        (q(wrap_unit(c[0])), q(wrap_unit(c[1])), ang(c[3], c[2]))
    } else {
        (q((c[2] + 1.0) / 2.0), ang(c[1], c[0]), q((c[5] + 1.0) / 2.0))
    }
}

// ---------------------------------------------------------------------------
// thickening
// ---------------------------------------------------------------------------

/// Estimates of `(1/2 delta) mu(flow-out of A)` for each `delta`, and their
/// extrapolation to `delta -> 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thickening {
    pub deltas: Vec<f64>,
    pub estimates: Vec<f64>,
    /// Standard error of each estimate under independent sampling.
    pub stderr: Vec<f64>,
    pub limit: f64,
    pub limit_stderr: f64,
    /// Transverse proximity radius.
    pub eps: f64,
}

/// Whether the orbit of `q` passes within `eps` of `A` at a time of
/// closest approach in `[-delta, delta]`.
fn crosses<F: Fn(usize) -> bool>(
    m: &ManifoldModel,
    cloud: &SampleCloud,
    in_a: &F,
    q: &CotangentPoint,
    delta: f64,
    eps: f64,
    cfg: FlowConfig,
) -> Result<bool> {
    let speed = phase_speed_bound(m);
    let reach = delta * speed + eps;
    if cloud.nearest(&phase_coords(m, q), reach).is_none() {
        return Ok(false);
    }
    let ds = eps / 2.0 / speed;
    let n = (2.0 * delta / ds).ceil() as usize + 2;
    let start = -delta - ds;
    let mut tr = Trajectory::new(*m, *q, cfg, false)?;
    let dist = |tr: &mut Trajectory, t: f64| -> Result<f64> {
        let c = phase_coords(m, &tr.advance_to(t)?.raw);
        Ok(cloud.nearest(&c, 3.0 * eps).map_or(f64::INFINITY, |h| h.distance))
    };
    let mut d = Vec::with_capacity(n + 1);
    for i in 0..=n {
        d.push(dist(&mut tr, start + i as f64 * ds)?);
    }
    for i in 1..n {
        if !(d[i] <= d[i - 1] && d[i] <= d[i + 1] && d[i] < eps + ds * speed) {
            continue;
        }
        // golden-section refinement of the closest approach
        let (mut a, mut b) = (start + (i - 1) as f64 * ds, start + (i + 1) as f64 * ds);
        let g = (5f64.sqrt() - 1.0) / 2.0;
        let mut x1 = b - g * (b - a);
        let mut x2 = a + g * (b - a);
        let mut f1 = dist(&mut tr, x1)?;
        let mut f2 = dist(&mut tr, x2)?;
        while b - a > 1e-10 {
            if f1 <= f2 {
                b = x2;
                x2 = x1;
                f2 = f1;
                x1 = b - g * (b - a);
                f1 = dist(&mut tr, x1)?;
            } else {
                a = x1;
                x1 = x2;
                f1 = f2;
                x2 = a + g * (b - a);
                f2 = dist(&mut tr, x2)?;
            }
        }
        let tm = 0.5 * (a + b);
        if tm.abs() > delta {
            continue;
        }
        let c = phase_coords(m, &tr.advance_to(tm)?.raw);
        if let Some(h) = cloud.nearest(&c, eps) {
            if in_a(h.nearest_sample()) {
                return Ok(true);
            }
        }
    }
    Ok(false)
}

/// `(1/2 delta) mu(U_{|t| <= delta} G^t(A_eps))` over `deltas`, where
/// `A_eps` is the set of points whose orbit passes within `eps` of `A` at an
/// interior closest approach, extrapolated linearly to `delta = 0`.
pub fn thicken_measure<F: Fn(usize) -> bool + Sync>(
    mu: &InvariantMeasure,
    samples: &[ConormalSample],
    in_a: F,
    deltas: &[f64],
    eps: f64,
    cfg: FlowConfig,
) -> Result<Thickening> {
    if deltas.len() < 3 || deltas.windows(2).any(|w| !(w[1] < w[0])) || deltas.iter().any(|d| !(*d > 0.0)) {
        return Err(Error::Domain("need at least 3 strictly decreasing positive deltas".into()));
    }
    if !(eps > 0.0) {
        return Err(Error::Domain(format!("eps = {eps} must be positive")));
    }
    let m = mu.model;
    let cloud = SampleCloud::new(m, samples, (3.0 * eps).max(0.01));
    let mut estimates = Vec::new();
    let mut stderr = Vec::new();
    for &delta in deltas {
        let hits: Vec<bool> = mu
            .samples
            .par_iter()
            .map(|s| crosses(&m, &cloud, &in_a, &s.rho, delta, eps, cfg))
            .collect::<Result<_>>()?;
        let n = mu.samples.len() as f64;
        let p: f64 = mu.samples.iter().zip(&hits).filter(|(_, h)| **h).map(|(s, _)| s.weight).sum();
        let var: f64 = mu
            .samples
            .iter()
            .zip(&hits)
            .map(|(s, h)| {
                let x = if *h { s.weight } else { 0.0 };
                (x - p / n).powi(2)
            })
            .sum();
        estimates.push(p / (2.0 * delta));
        stderr.push(var.sqrt() / (2.0 * delta));
    }
    let k = estimates.len();
    let (a, b) = (estimates[k - 2], estimates[k - 1]);
    if (a - b).abs() > 0.1 * a.abs().max(b.abs()) {
        return Err(Error::NoConvergence(a, b));
    }
    // least-squares line in delta, evaluated at 0
    let mx = deltas.iter().sum::<f64>() / k as f64;
    let my = estimates.iter().sum::<f64>() / k as f64;
    let sxx: f64 = deltas.iter().map(|d| (d - mx).powi(2)).sum();
    let sxy: f64 = deltas.iter().zip(&estimates).map(|(d, e)| (d - mx) * (e - my)).sum();
    let limit = my - (sxy / sxx) * mx;
    Ok(Thickening {
        deltas: deltas.to_vec(),
        estimates,
        limit_stderr: stderr[k - 1],
        stderr,
        limit,
        eps,
    })
}

/// Conversion of a Liouville thickening limit on the flat torus to a
/// density relative to `sigma_{SN*H}`: the transverse slab of half-width
/// `eps` carries Liouville mass `2 eps / vol(S*M)` per unit of `sigma`.
pub fn liouville_density(th: &Thickening, model: &ManifoldModel) -> Result<(f64, f64)> {
    match model.effective() {
        ManifoldModel::FlatTorus2 => {
            let scale = model.cosphere_volume() / (2.0 * th.eps);
            Ok((th.limit * scale, th.limit_stderr * scale))
        }
        _ => Err(Error::Domain(
            "slab normalization is calibrated for the flat torus only".into(),
        )),
    }
}

/// Density `f` of the thickened measure against `sigma_{SN*H}`, constant on
/// each of `bins` parameter bins per branch. Returns one value per sample.
pub fn conormal_density(
    mu: &InvariantMeasure,
    samples: &[ConormalSample],
    bins: usize,
    deltas: &[f64],
    eps: f64,
    cfg: FlowConfig,
) -> Result<Vec<f64>> {
    let bins = bins.max(1);
    let (lo, hi) = samples
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), s| (a.min(s.param), b.max(s.param)));
    let span = (hi - lo).max(1e-300);
    let bin_of = |s: &ConormalSample| (s.branch, (((s.param - lo) / span * bins as f64) as usize).min(bins - 1));
    let mut keys: Vec<(i8, usize)> = samples.iter().map(bin_of).collect();
    keys.sort_unstable();
    keys.dedup();
    let mut f = vec![0.0; samples.len()];
    for key in keys {
        let members: Vec<bool> = samples.iter().map(|s| bin_of(s) == key).collect();
        let sigma: f64 = samples.iter().zip(&members).filter(|(_, m)| **m).map(|(s, _)| s.weight).sum();
        let th = thicken_measure(mu, samples, |i| members[i], deltas, eps, cfg)?;
        let density = (th.limit / sigma).max(0.0);
        for (i, m) in members.iter().enumerate() {
            if *m {
                f[i] = density;
            }
        }
    }
    Ok(f)
}

/// Computed factor of the defect-measure bound; the full right-hand side is
/// `C_{n,k} h^{h_exponent} integral + o(h^{h_exponent})`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Micro1 {
    pub integral: f64,
    pub h_exponent: f64,
}

/// `int_{pi_H^{-1}(A)} sqrt(f) d sigma_{SN*H}` by the sample quadrature.
pub fn micro1_rhs<F: Fn(&ConormalSample) -> bool>(
    samples: &[ConormalSample],
    f: &[f64],
    codim: usize,
    in_a: F,
) -> Result<Micro1> {
    if f.len() != samples.len() {
        return Err(Error::Domain("density and samples differ in length".into()));
    }
    if f.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::Domain("density must be nonnegative".into()));
    }
    let integral = samples
        .iter()
        .zip(f)
        .filter(|(s, _)| in_a(s))
        .map(|(s, v)| s.weight * v.sqrt())
        .sum();
    Ok(Micro1 {
        integral,
        h_exponent: (1.0 - codim as f64) / 2.0,
    })
}

// ---------------------------------------------------------------------------
// brackets
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingInputs {
    pub h: Option<f64>,
    pub radius: Option<f64>,
    pub tau: Option<f64>,
    pub n: usize,
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub bracket: f64,
    pub term_b: f64,
    pub term_groups: Vec<f64>,
    pub scaling: ScalingInputs,
    /// Multipliers left symbolic.
    pub constant_slots: Vec<String>,
}

impl BoundReport {
    pub fn groups_total(&self) -> f64 {
        self.term_groups.iter().sum()
    }

    /// `|bracket - sum of pieces|`.
    pub fn assembly_error(&self) -> f64 {
        (self.bracket - self.term_b - self.groups_total()).abs()
    }
}

fn check_groups(groups: &[(f64, f64, f64)]) -> Result<()> {
    for &(g, t, t_end) in groups {
        if !(g >= 0.0 && t >= 0.0) {
            return Err(Error::Domain(format!("negative group input ({g}, {t})")));
        }
        if !(t < t_end) {
            return Err(Error::Domain(format!("window start {t} must be below its end {t_end}")));
        }
    }
    Ok(())
}

/// `sigma(B)^{1/2} + sum_l (sigma(G_l) t_l / T_l)^{1/2}`.
pub fn prelim_bracket(sigma_b: f64, groups: &[(f64, f64, f64)]) -> Result<BoundReport> {
    if !(sigma_b >= 0.0) {
        return Err(Error::Domain(format!("sigma(B) = {sigma_b} is negative")));
    }
    check_groups(groups)?;
    let term_b = sigma_b.sqrt();
    let term_groups: Vec<f64> = groups.iter().map(|&(g, t, te)| (g * t / te).sqrt()).collect();
    Ok(BoundReport {
        bracket: term_b + term_groups.iter().sum::<f64>(),
        term_b,
        term_groups,
        scaling: ScalingInputs {
            h: None,
            radius: None,
            tau: None,
            n: 0,
            k: 0,
        },
        constant_slots: vec!["C h^{(1-k)/2} ||u_h||".into()],
    })
}

/// `R^{(n-1)/2} tau^{-1/2} [|B|^{1/2} + sum_l |G_l|^{1/2} (t_l / T_l)^{1/2}]`
/// with tube counts.
pub fn tube_bracket(
    nb: u64,
    groups: &[(u64, f64, f64)],
    radius: f64,
    tau: f64,
    n: usize,
    k: usize,
) -> Result<BoundReport> {
    if !(radius > 0.0 && tau > 0.0) {
        return Err(Error::Domain(format!("need R, tau > 0, got {radius}, {tau}")));
    }
    let fg: Vec<(f64, f64, f64)> = groups.iter().map(|&(g, t, te)| (g as f64, t, te)).collect();
    check_groups(&fg)?;
    let pre = radius.powf((n as f64 - 1.0) / 2.0) / tau.sqrt();
    let term_b = pre * (nb as f64).sqrt();
    let term_groups: Vec<f64> = fg.iter().map(|&(g, t, te)| pre * (g * t / te).sqrt()).collect();
    Ok(BoundReport {
        bracket: term_b + term_groups.iter().sum::<f64>(),
        term_b,
        term_groups,
        scaling: ScalingInputs {
            h: None,
            radius: Some(radius),
            tau: Some(tau),
            n,
            k,
        },
        constant_slots: vec!["C_{n,k}".into(), "||w||_inf".into(), "h^{(1-k)/2} ||u_h||".into()],
    })
}

/// `R^{(n-1)/2} h^{(1-k)/2}`.
pub fn single_tube_bound(radius: f64, h: f64, n: usize, k: usize) -> f64 {
    radius.powf((n as f64 - 1.0) / 2.0) * h.powf((1.0 - k as f64) / 2.0)
}

/// Write reports as CSV rows `h,R,tau,n,k,bracket,term_B,term_groups,constants`.
pub fn write_reports_csv(path: &Path, reports: &[BoundReport]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "h,R,tau,n,k,bracket,term_B,term_groups,constants")?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.17e}")).unwrap_or_default();
    for r in reports {
        writeln!(
            f,
            "{},{},{},{},{},{:.17e},{:.17e},{:.17e},\"{}\"",
            opt(r.scaling.h),
            opt(r.scaling.radius),
            opt(r.scaling.tau),
            r.scaling.n,
            r.scaling.k,
            r.bracket,
            r.term_b,
            r.groups_total(),
            r.constant_slots.join("; ")
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests;
