//! Tube covers of the flow-out of `SN*H`, their coloring, and certificates of
//! non-self-looping windows.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::flow::{ehrenfest_time, FlowConfig, Trajectory};
use crate::geometry::{
    covector_angle, inverse_metric_diag, norm6, phase_coords, phase_delta, phase_speed_bound,
    unit_covector, wrap_unit, CotangentPoint, ManifoldModel,
};
use crate::submanifold::ConormalSample;

mod contraction;
mod rotation;

pub use contraction::{
    contraction_partition, grid_oracle, ContractionOutcome, GridOracle, HyperbolicToyMap, ToySegment,
};
pub use rotation::{rotation_partition, Intersection, RotationResult, TRANSVERSALITY_THRESHOLD};

/// Default cap on the number of colors at `n = 2`.
pub const DEFAULT_COLOR_CAP: usize = 50;
/// Default `alpha` in `T_l <= 2 alpha T_e(h)`.
pub const DEFAULT_ALPHA: f64 = 0.4;

// ---------------------------------------------------------------------------
// spatial hash on ambient phase coordinates
// ---------------------------------------------------------------------------

/// Hash of phase-space points keyed on four ambient coordinates. Any two
/// points closer than `cell` sit in adjacent cells.
#[derive(Clone, Debug)]
pub(crate) struct PointHash {
    model: ManifoldModel,
    cell: f64,
    wrap: i64,
    keys: [usize; 4],
    map: HashMap<[i64; 4], Vec<u32>>,
    pts: Vec<[f64; 6]>,
    owner: Vec<u32>,
}

impl PointHash {
    pub(crate) fn new(model: ManifoldModel, cell: f64) -> Self {
        let torus = model.is_torus();
        let wrap = if torus { ((1.0 / cell).floor() as i64).max(1) } else { 0 };
        let keys = if torus { [0, 1, 2, 3] } else { [0, 1, 3, 4] };
        PointHash {
            model,
            cell,
            wrap,
            keys,
            map: HashMap::new(),
            pts: Vec::new(),
            owner: Vec::new(),
        }
    }

    fn key(&self, p: &[f64; 6]) -> [i64; 4] {
        let mut k = [0i64; 4];
        for (j, &d) in self.keys.iter().enumerate() {
            k[j] = if self.wrap > 0 && d < 2 {
                ((wrap_unit(p[d]) * self.wrap as f64).floor() as i64).rem_euclid(self.wrap)
            } else {
                (p[d] / self.cell).floor() as i64
            };
        }
        k
    }

    pub(crate) fn insert(&mut self, p: [f64; 6], owner: usize) {
        let k = self.key(&p);
        self.map.entry(k).or_default().push(self.pts.len() as u32);
        self.pts.push(p);
        self.owner.push(owner as u32);
    }

    /// Calls `f(owner, distance)` for every stored point within `r` of `q`.
    /// Stops early when `f` returns `false`.
    pub(crate) fn visit<F: FnMut(usize, f64) -> bool>(&self, q: &[f64; 6], r: f64, mut f: F) {
        debug_assert!(r <= self.cell * (1.0 + 1e-12));
        let k0 = self.key(q);
        for code in 0..81 {
            let mut k = k0;
            let mut c = code;
            for j in 0..4 {
                k[j] += c % 3 - 1;
                c /= 3;
                if self.wrap > 0 && self.keys[j] < 2 {
                    k[j] = k[j].rem_euclid(self.wrap);
                }
            }
            // with wrap counts below 3 neighbouring offsets can coincide
            if self.wrap > 0 && self.wrap < 3 {
                let mut dup = false;
                for prev in 0..code {
                    let mut kp = k0;
                    let mut cp = prev;
                    for j in 0..4 {
                        kp[j] += cp % 3 - 1;
                        cp /= 3;
                        if self.keys[j] < 2 {
                            kp[j] = kp[j].rem_euclid(self.wrap);
                        }
                    }
                    if kp == k {
                        dup = true;
                        break;
                    }
                }
                if dup {
                    continue;
                }
            }
            if let Some(list) = self.map.get(&k) {
                for &i in list {
                    let d = norm6(&phase_delta(&self.model, q, &self.pts[i as usize]));
                    if d < r && !f(self.owner[i as usize] as usize, d) {
                        return;
                    }
                }
            }
        }
    }

    /// First stored point (by hash order) within `r` of `q` whose owner
    /// passes `keep`.
    pub(crate) fn any_within<F: Fn(usize) -> bool>(&self, q: &[f64; 6], r: f64, keep: F) -> Option<(usize, f64)> {
        let mut hit = None;
        self.visit(q, r, |o, d| {
            if keep(o) {
                hit = Some((o, d));
                false
            } else {
                true
            }
        });
        hit
    }
}

// ---------------------------------------------------------------------------
// tubes
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkeletonPoint {
    pub phase: [f64; 6],
    pub t: f64,
}

/// Flow-out of a transversal `R`-ball about a conormal sample.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Tube {
    pub center: ConormalSample,
    pub tau: f64,
    pub radius: f64,
    /// Transversal disk points (covector rotation and normal base shift).
    pub disk: Vec<CotangentPoint>,
    pub skeleton: Vec<SkeletonPoint>,
    pub color: usize,
}

impl Tube {
    /// Largest phase distance between a skeleton point and the center
    /// trajectory at the same time.
    pub fn coherence(&self, model: &ManifoldModel, cfg: FlowConfig) -> Result<f64> {
        let mut fwd = Trajectory::new(*model, self.center.rho, cfg, false)?;
        let mut bwd = Trajectory::new(*model, self.center.rho, cfg, false)?;
        let mut worst: f64 = 0.0;
        let mut pts: Vec<&SkeletonPoint> = self.skeleton.iter().collect();
        pts.sort_by(|a, b| a.t.abs().partial_cmp(&b.t.abs()).unwrap());
        for sp in pts {
            let tr = if sp.t >= 0.0 { &mut fwd } else { &mut bwd };
            let c = phase_coords(model, &tr.advance_to(sp.t)?.raw);
            worst = worst.max(norm6(&phase_delta(model, &c, &sp.phase)));
        }
        Ok(worst)
    }
}

/// Unit normal (in the metric) to the velocity of `p`, in chart coordinates.
fn base_normal(m: &ManifoldModel, p: &CotangentPoint) -> [f64; 2] {
    let d = inverse_metric_diag(m, &p.x);
    let v = [d[0] * p.xi[0], d[1] * p.xi[1]];
    let (g11, g22) = (1.0 / d[0], 1.0 / d[1]);
    [v[1] * (g22 / g11).sqrt(), -v[0] * (g11 / g22).sqrt()]
}

/// Transversal disk of radius `r` about `p` on a grid of spacing `r/4`.
pub fn transversal_disk(m: &ManifoldModel, p: &CotangentPoint, r: f64) -> Vec<CotangentPoint> {
    let alpha = covector_angle(m, p);
    let n = base_normal(m, p);
    let mut out = vec![*p];
    for i in -4i32..=4 {
        for j in -4i32..=4 {
            if (i == 0 && j == 0) || i * i + j * j > 16 {
                continue;
            }
            let (a, b) = (i as f64 * r / 4.0, j as f64 * r / 4.0);
            let x = [p.x[0] + b * n[0], p.x[1] + b * n[1]];
            out.push(CotangentPoint {
                x,
                xi: unit_covector(m, &x, alpha + a),
                chart: p.chart,
            });
        }
    }
    out
}

fn build_tube(
    m: &ManifoldModel,
    center: ConormalSample,
    tau: f64,
    r: f64,
    cfg: FlowConfig,
) -> Result<Tube> {
    let disk = transversal_disk(m, &center.rho, r);
    let speed = phase_speed_bound(m);
    let span = tau + r;
    let dt = r / (4.0 * speed);
    let steps = (span / dt).ceil() as usize;
    let times: Vec<f64> = (0..=steps).map(|i| (i as f64 * dt).min(span)).collect();
    let trajs = |start: &CotangentPoint| -> Result<(Trajectory, Trajectory)> {
        Ok((
            Trajectory::new(*m, *start, cfg, false)?,
            Trajectory::new(*m, *start, cfg, false)?,
        ))
    };
    let (mut cf, mut cb) = trajs(&center.rho)?;
    let mut centre_pts = Vec::with_capacity(2 * times.len());
    for &t in &times {
        centre_pts.push((t, phase_coords(m, &cf.advance_to(t)?.raw)));
        centre_pts.push((-t, phase_coords(m, &cb.advance_to(-t)?.raw)));
    }
    let mut skeleton = Vec::new();
    for q in &disk {
        let (mut f, mut b) = trajs(q)?;
        for (k, &t) in times.iter().enumerate() {
            for (sign, tr) in [(1.0, &mut f), (-1.0, &mut b)] {
                if t == 0.0 && sign < 0.0 {
                    continue;
                }
                let c = phase_coords(m, &tr.advance_to(sign * t)?.raw);
                let idx = 2 * k + usize::from(sign < 0.0);
                if norm6(&phase_delta(m, &centre_pts[idx].1, &c)) <= r {
                    skeleton.push(SkeletonPoint { phase: c, t: sign * t });
                }
            }
        }
    }
    Ok(Tube {
        center,
        tau,
        radius: r,
        disk,
        skeleton,
        color: 0,
    })
}

/// Tubes about an `R/2`-separated set of conormal samples, greedily colored.
#[derive(Clone, Debug)]
pub struct TubeCover {
    pub model: ManifoldModel,
    pub cfg: FlowConfig,
    pub tau: f64,
    pub radius: f64,
    pub tubes: Vec<Tube>,
    pub colors: usize,
}

/// Build and color the cover. Fails with `ColorBudget` if more than `cap`
/// colors are required.
pub fn build_cover(
    model: &ManifoldModel,
    samples: &[ConormalSample],
    tau: f64,
    radius: f64,
    cap: usize,
    cfg: FlowConfig,
) -> Result<TubeCover> {
    if !(radius > 0.0) || !(tau >= 0.0) {
        return Err(Error::Domain(format!("need R > 0 and tau >= 0, got R = {radius}, tau = {tau}")));
    }
    let mut centers = PointHash::new(*model, radius / 2.0);
    let mut chosen = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let c = phase_coords(model, &s.rho);
        if centers.any_within(&c, radius / 2.0, |_| true).is_none() {
            centers.insert(c, chosen.len());
            chosen.push(i);
        }
    }
    let mut tubes: Vec<Tube> = chosen
        .par_iter()
        .map(|&i| build_tube(model, samples[i], tau, radius, cfg))
        .collect::<Result<_>>()?;

    // conflict graph: skeletons closer than R/4
    let margin = radius / 4.0;
    let mut hash = PointHash::new(*model, margin);
    for (j, t) in tubes.iter().enumerate() {
        for sp in &t.skeleton {
            hash.insert(sp.phase, j);
        }
    }
    let conflicts: Vec<Vec<usize>> = tubes
        .par_iter()
        .enumerate()
        .map(|(j, t)| {
            let mut set = std::collections::BTreeSet::new();
            for sp in &t.skeleton {
                hash.visit(&sp.phase, margin, |o, _| {
                    if o != j {
                        set.insert(o);
                    }
                    true
                });
            }
            set.into_iter().collect()
        })
        .collect();
    let mut colors = 0;
    let mut assigned: Vec<Option<usize>> = vec![None; tubes.len()];
    for j in 0..tubes.len() {
        let used: Vec<usize> = conflicts[j].iter().filter_map(|&o| assigned[o]).collect();
        let c = (0..).find(|c| !used.contains(c)).unwrap();
        assigned[j] = Some(c);
        colors = colors.max(c + 1);
        if colors > cap {
            return Err(Error::ColorBudget { needed: colors, budget: cap });
        }
    }
    for (t, c) in tubes.iter_mut().zip(assigned) {
        t.color = c.unwrap();
    }
    Ok(TubeCover {
        model: *model,
        cfg,
        tau,
        radius,
        tubes,
        colors,
    })
}

impl TubeCover {
    pub fn len(&self) -> usize {
        self.tubes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tubes.is_empty()
    }

    /// Index of a tube whose skeleton passes within `R` of `p`.
    pub fn containing(&self, p: &CotangentPoint) -> Option<usize> {
        let q = phase_coords(&self.model, p);
        let mut best: Option<(usize, f64)> = None;
        for (j, t) in self.tubes.iter().enumerate() {
            for sp in &t.skeleton {
                let d = norm6(&phase_delta(&self.model, &q, &sp.phase));
                if d < self.radius && best.is_none_or(|(_, b)| d < b) {
                    best = Some((j, d));
                }
            }
        }
        best.map(|b| b.0)
    }

    /// Smallest skeleton distance between two distinct tubes of the same
    /// color (infinite if no such pair exists).
    pub fn same_color_gap(&self) -> f64 {
        let mut gap = f64::INFINITY;
        for a in 0..self.tubes.len() {
            for b in a + 1..self.tubes.len() {
                if self.tubes[a].color != self.tubes[b].color {
                    continue;
                }
                for p in &self.tubes[a].skeleton {
                    for q in &self.tubes[b].skeleton {
                        gap = gap.min(norm6(&phase_delta(&self.model, &p.phase, &q.phase)));
                    }
                }
            }
        }
        gap
    }

    /// Test `G^s(A) ∩ A = ∅` for `s` in `[t0, t1]` (negated for backward),
    /// where `A` is the union of the listed tubes. `refine` divides the
    /// default step.
    pub fn check_window(
        &self,
        union: &[usize],
        t0: f64,
        t1: f64,
        direction: Direction,
        refine: f64,
    ) -> Result<WindowCheck> {
        if !(t0 < t1) {
            return Err(Error::Domain(format!("window [{t0}, {t1}] is empty")));
        }
        if union.is_empty() {
            return Ok(WindowCheck { certified: true, violation: None });
        }
        let r = self.radius;
        let mut hash = PointHash::new(self.model, r);
        for &j in union {
            for sp in &self.tubes[j].skeleton {
                hash.insert(sp.phase, j);
            }
        }
        let sign = direction.sign();
        let span = self.tau + r;
        let ds = r / (2.0 * phase_speed_bound(&self.model) * refine.max(1.0));
        let (u0, u1) = (t0 - span, t1 + span);
        let n = ((u1 - u0) / ds).ceil() as usize;
        let starts: Vec<(usize, CotangentPoint)> = union
            .iter()
            .flat_map(|&j| self.tubes[j].disk.iter().map(move |q| (j, *q)))
            .collect();
        let hits: Vec<Option<Violation>> = starts
            .par_iter()
            .map(|(j, q)| -> Result<Option<Violation>> {
                let mut tr = Trajectory::new(self.model, *q, self.cfg, false)?;
                for i in 0..=n {
                    let u = (u0 + i as f64 * ds).min(u1);
                    let c = phase_coords(&self.model, &tr.advance_to(sign * u)?.raw);
                    if let Some((o, d)) = hash.any_within(&c, r, |_| true) {
                        return Ok(Some(Violation {
                            s: sign * u,
                            tube: *j,
                            other: o,
                            distance: d,
                        }));
                    }
                }
                Ok(None)
            })
            .collect::<Result<_>>()?;
        let violation = hits
            .into_iter()
            .flatten()
            .min_by(|a, b| a.s.abs().partial_cmp(&b.s.abs()).unwrap());
        Ok(WindowCheck {
            certified: violation.is_none(),
            violation,
        })
    }

    /// Forward window check, then backward if forward fails.
    pub fn certify(&self, union: &[usize], t0: f64, t1: f64, refine: f64) -> Result<Option<Direction>> {
        for d in [Direction::Forward, Direction::Backward] {
            if self.check_window(union, t0, t1, d, refine)?.certified {
                return Ok(Some(d));
            }
        }
        Ok(None)
    }

    /// Digest of the skeleton coordinates of the listed tubes.
    pub fn skeleton_hash(&self, members: &[usize]) -> String {
        let mut h = Sha256::new();
        for &j in members {
            for sp in &self.tubes[j].skeleton {
                for v in sp.phase {
                    h.update(v.to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub fn sign(self) -> f64 {
        match self {
            Direction::Forward => 1.0,
            Direction::Backward => -1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    /// Signed flow time of the offending skeleton image.
    pub s: f64,
    pub tube: usize,
    pub other: usize,
    pub distance: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowCheck {
    pub certified: bool,
    pub violation: Option<Violation>,
}

// ---------------------------------------------------------------------------
// certificates
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Group {
    #[serde(rename = "G")]
    pub members: Vec<usize>,
    pub t: f64,
    #[serde(rename = "T")]
    pub t_end: f64,
    pub direction: Direction,
    /// Hex digest of the skeleton inputs of the members.
    pub hash: String,
}

/// Partition of tube indices into a residual set and certified groups.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionCertificate {
    #[serde(rename = "B")]
    pub b: Vec<usize>,
    pub groups: Vec<Group>,
    pub h: f64,
    pub delta: f64,
    #[serde(rename = "R")]
    pub radius: f64,
    pub tau: f64,
    pub alpha: f64,
    /// Expansion rate used for `T_e(h)`.
    pub lambda: f64,
    /// Number of indices the partition covers (`0..universe`).
    pub universe: usize,
    /// Whether some group contains tubes of more than one color.
    pub mixed_colors: bool,
}

/// Runtime check of `alpha < 1 - 2 log R / log h` at the given `h`.
pub fn check_alpha(alpha: f64, h: f64, radius: f64) -> Result<()> {
    let ratio = radius.ln() / h.ln();
    let bound = 1.0 - 2.0 * ratio;
    if alpha < bound {
        Ok(())
    } else {
        Err(Error::Constraint(format!(
            "alpha = {alpha} must be below 1 - 2 log R / log h = {bound:.4}"
        )))
    }
}

impl PartitionCertificate {
    /// Covering and window-length invariants.
    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.universe];
        for &i in self.b.iter().chain(self.groups.iter().flat_map(|g| g.members.iter())) {
            if i >= self.universe {
                return Err(Error::Constraint(format!("index {i} outside 0..{}", self.universe)));
            }
            seen[i] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Constraint(format!("index {i} is in neither B nor any group")));
        }
        check_alpha(self.alpha, self.h, self.radius)?;
        let te = ehrenfest_time(self.h, self.lambda)?;
        for g in &self.groups {
            if g.t_end > 2.0 * self.alpha * te * (1.0 + 1e-12) {
                return Err(Error::Constraint(format!(
                    "T = {} exceeds 2 alpha T_e(h) = {}",
                    g.t_end,
                    2.0 * self.alpha * te
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("certificate serializes")
    }
}

/// Scales shared by the certificates of one run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scales {
    pub h: f64,
    pub delta: f64,
    pub alpha: f64,
    pub lambda: f64,
}

/// Certify each candidate `(members, t, T)`; indices in no certified group
/// form `B`.
pub fn certify_groups(
    cover: &TubeCover,
    candidates: &[(Vec<usize>, f64, f64)],
    scales: Scales,
) -> Result<PartitionCertificate> {
    let te = ehrenfest_time(scales.h, scales.lambda)?;
    check_alpha(scales.alpha, scales.h, cover.radius)?;
    for (_, _, t_end) in candidates {
        if *t_end > 2.0 * scales.alpha * te {
            return Err(Error::Constraint(format!(
                "T = {t_end} exceeds 2 alpha T_e(h) = {}",
                2.0 * scales.alpha * te
            )));
        }
    }
    let dirs: Vec<Option<Direction>> = candidates
        .par_iter()
        .map(|(g, t, t_end)| cover.certify(g, *t, *t_end, 1.0))
        .collect::<Result<_>>()?;
    let mut used = vec![false; cover.len()];
    let mut groups = Vec::new();
    for ((members, t, t_end), d) in candidates.iter().zip(dirs) {
        if let Some(direction) = d {
            for &i in members {
                used[i] = true;
            }
            groups.push(Group {
                members: members.clone(),
                t: *t,
                t_end: *t_end,
                direction,
                hash: cover.skeleton_hash(members),
            });
        }
    }
    let b: Vec<usize> = (0..cover.len()).filter(|&i| !used[i]).collect();
    let mixed_colors = groups.iter().any(|g| {
        g.members
            .iter()
            .any(|&i| cover.tubes[i].color != cover.tubes[g.members[0]].color)
    });
    let cert = PartitionCertificate {
        b,
        groups,
        h: scales.h,
        delta: scales.delta,
        radius: cover.radius,
        tau: cover.tau,
        alpha: scales.alpha,
        lambda: scales.lambda,
        universe: cover.len(),
        mixed_colors,
    };
    cert.validate()?;
    Ok(cert)
}

/// Re-run every group's window check with fresh flows at half the step.
pub fn reverify(cover: &TubeCover, cert: &PartitionCertificate) -> Result<bool> {
    for g in &cert.groups {
        if cover.skeleton_hash(&g.members) != g.hash {
            return Ok(false);
        }
        if !cover.check_window(&g.members, g.t, g.t_end, g.direction, 2.0)?.certified {
            return Ok(false);
        }
    }
    Ok(true)
}
