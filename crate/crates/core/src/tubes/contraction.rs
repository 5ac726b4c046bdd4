//! Contraction mechanism on a hyperbolic toral automorphism.

use serde::{Deserialize, Serialize};

use super::{check_alpha, Direction, Group, PartitionCertificate, Scales};
use crate::error::{Error, Result};
use crate::flow::{ehrenfest_time, TangentDynamics};
use crate::geometry::wrap_unit;

/// Grid resolution of the stable segment.
pub const GRID_CELLS: usize = 1 << 12;

/// Linear map of the torus given by an integer matrix with `|det| = 1` and
/// `|trace| > 2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperbolicToyMap {
    pub matrix: [[i64; 2]; 2],
}

impl Default for HyperbolicToyMap {
    fn default() -> Self {
        HyperbolicToyMap { matrix: [[2, 1], [1, 1]] }
    }
}

impl HyperbolicToyMap {
    pub fn new(matrix: [[i64; 2]; 2]) -> Result<Self> {
        let [[a, b], [c, d]] = matrix;
        let det = a * d - b * c;
        let tr = a + d;
        if det.abs() != 1 {
            return Err(Error::NonHyperbolic(format!("det = {det}")));
        }
        if tr.abs() <= 2 {
            return Err(Error::NonHyperbolic(format!("|trace| = {} <= 2", tr.abs())));
        }
        Ok(HyperbolicToyMap { matrix })
    }

    fn det(&self) -> f64 {
        let [[a, b], [c, d]] = self.matrix;
        (a * d - b * c) as f64
    }

    /// Eigenvalues `(unstable, stable)`.
    pub fn eigenvalues(&self) -> (f64, f64) {
        let [[a, _], [_, d]] = self.matrix;
        let tr = (a + d) as f64;
        let disc = (tr * tr - 4.0 * self.det()).sqrt();
        let l1 = (tr + disc) / 2.0;
        let l2 = (tr - disc) / 2.0;
        if l1.abs() > l2.abs() {
            (l1, l2)
        } else {
            (l2, l1)
        }
    }

    fn eigenvector(&self, l: f64) -> [f64; 2] {
        let [[a, b], [c, d]] = self.matrix;
        let v = if b != 0 {
            [b as f64, l - a as f64]
        } else {
            [l - d as f64, c as f64]
        };
        let n = v[0].hypot(v[1]);
        [v[0] / n, v[1] / n]
    }

    /// Unit stable eigenvector.
    pub fn stable_direction(&self) -> [f64; 2] {
        self.eigenvector(self.eigenvalues().1)
    }

    pub fn unstable_direction(&self) -> [f64; 2] {
        self.eigenvector(self.eigenvalues().0)
    }

    /// One application on the torus.
    pub fn apply(&self, x: [f64; 2]) -> [f64; 2] {
        let m = &self.matrix;
        [
            wrap_unit(m[0][0] as f64 * x[0] + m[0][1] as f64 * x[1]),
            wrap_unit(m[1][0] as f64 * x[0] + m[1][1] as f64 * x[1]),
        ]
    }

    /// Integer matrix power (negative exponents use the inverse).
    pub fn power(&self, n: i64) -> [[i64; 2]; 2] {
        let [[a, b], [c, d]] = self.matrix;
        let det = a * d - b * c;
        let base = if n >= 0 {
            self.matrix
        } else {
            [[d * det, -b * det], [-c * det, a * det]]
        };
        let mut out = [[1, 0], [0, 1]];
        for _ in 0..n.unsigned_abs() {
            out = [
                [
                    out[0][0] * base[0][0] + out[0][1] * base[1][0],
                    out[0][0] * base[0][1] + out[0][1] * base[1][1],
                ],
                [
                    out[1][0] * base[0][0] + out[1][1] * base[1][0],
                    out[1][0] * base[0][1] + out[1][1] * base[1][1],
                ],
            ];
        }
        out
    }
}

impl TangentDynamics for HyperbolicToyMap {
    /// Spectral norm of `A^n` with `n` the nearest integer to `t`.
    fn tangent_norm(&self, _u: [f64; 3], t: f64) -> Result<f64> {
        let p = self.power(t.round() as i64);
        let [[a, b], [c, d]] = p.map(|r| r.map(|v| v as f64));
        let s = a * a + b * b + c * c + d * d;
        let det = a * d - b * c;
        Ok(((s + (s * s - 4.0 * det * det).max(0.0).sqrt()) / 2.0).sqrt())
    }
}

/// Segment `anchor + s e_s`, `s ∈ [0, width]`, along the stable direction,
/// thickened by `thickness` for intersection tests.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToySegment {
    pub anchor: [f64; 2],
    pub width: f64,
    pub thickness: f64,
}

impl Default for ToySegment {
    fn default() -> Self {
        ToySegment {
            anchor: [0.0, 0.0],
            width: 0.1,
            thickness: 0.003,
        }
    }
}

impl ToySegment {
    fn cell(&self) -> f64 {
        self.width / GRID_CELLS as f64
    }

    pub fn point(&self, e: [f64; 2], s: f64) -> [f64; 2] {
        [wrap_unit(self.anchor[0] + s * e[0]), wrap_unit(self.anchor[1] + s * e[1])]
    }
}

/// Maximal runs of set cells as half-open index ranges.
fn runs(set: &[bool]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < set.len() {
        if set[i] {
            let j = (i..set.len()).find(|&j| !set[j]).unwrap_or(set.len());
            out.push((i, j));
            i = j;
        } else {
            i += 1;
        }
    }
    out
}

/// Cells of `within` meeting the `thickness`-neighbourhood of
/// `∪_{t ∈ [t0, t1]} A^t(set)`.
fn returning_cells(map: &HyperbolicToyMap, seg: &ToySegment, set: &[bool], within: &[bool], t0: i64, t1: i64) -> Vec<bool> {
    let e = map.stable_direction();
    let n = [-e[1], e[0]];
    let (_, ls) = map.eigenvalues();
    let h = seg.cell();
    let r = seg.thickness;
    let mut out = vec![false; set.len()];
    let pieces = runs(set);
    for t in t0..=t1 {
        let p = map.power(t);
        // image of the anchor, unreduced
        let pa = [
            p[0][0] as f64 * seg.anchor[0] + p[0][1] as f64 * seg.anchor[1],
            p[1][0] as f64 * seg.anchor[0] + p[1][1] as f64 * seg.anchor[1],
        ];
        let base = [
            (seg.anchor[0] - pa[0]).round() as i64,
            (seg.anchor[1] - pa[1]).round() as i64,
        ];
        let lt = ls.powi(t as i32);
        for k0 in -2..=2 {
            for k1 in -2..=2 {
                let dv = [
                    pa[0] + (base[0] + k0) as f64 - seg.anchor[0],
                    pa[1] + (base[1] + k1) as f64 - seg.anchor[1],
                ];
                let a = dv[0] * e[0] + dv[1] * e[1];
                let d = dv[0] * n[0] + dv[1] * n[1];
                if d.abs() >= r {
                    continue;
                }
                let c = (r * r - d * d).sqrt();
                for &(i, j) in &pieces {
                    let (s1, s2) = (i as f64 * h * lt, j as f64 * h * lt);
                    let (lo, hi) = (a + s1.min(s2) - c, a + s1.max(s2) + c);
                    // cells [m h, (m+1) h] meeting the open interval (lo, hi)
                    let m0 = ((lo / h).floor() as i64).max(0);
                    let m1 = ((hi / h).ceil() as i64).min(set.len() as i64);
                    for m in m0..m1 {
                        let m = m as usize;
                        if within[m] {
                            out[m] = true;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Result of the contraction iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractionOutcome {
    pub certificate: PartitionCertificate,
    /// Window ends `T_l` in order.
    pub levels: Vec<f64>,
    /// `sigma(A_0)`.
    pub sigma_a0: f64,
    /// `sigma(G_l)` in order.
    pub sigma_g: Vec<f64>,
    pub sigma_b: f64,
}

impl ContractionOutcome {
    pub fn residual_fraction(&self) -> f64 {
        self.sigma_b / self.sigma_a0
    }
}

/// Split the stable segment into groups that are non-self-looping on
/// `[t0, T/2^l]` and a residual set, halving `T` until the residual falls
/// below `eps sigma(A0)` or the next window would be shorter than `2 t0`.
pub fn contraction_partition(
    map: &HyperbolicToyMap,
    seg: &ToySegment,
    t0: f64,
    t_end: f64,
    eps: f64,
    scales: Scales,
) -> Result<ContractionOutcome> {
    let (_, ls) = map.eigenvalues();
    if 1.0 / ls.abs() < 1.2 {
        return Err(Error::NonContracting(1.0 / ls.abs()));
    }
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(Error::Domain(format!("eps = {eps} not in (0, 1]")));
    }
    if !(t0 >= 1.0 && t_end >= t0) {
        return Err(Error::Domain(format!("need 1 <= t0 <= T, got t0 = {t0}, T = {t_end}")));
    }
    check_alpha(scales.alpha, scales.h, seg.thickness)?;
    let te = ehrenfest_time(scales.h, scales.lambda)?;
    if t_end > 2.0 * scales.alpha * te * (1.0 + 1e-12) {
        return Err(Error::Constraint(format!(
            "T = {t_end} exceeds 2 alpha T_e(h) = {}",
            2.0 * scales.alpha * te
        )));
    }
    let cell = seg.cell();
    let mut a = vec![true; GRID_CELLS];
    let mut t_cur = t_end;
    let mut groups = Vec::new();
    let mut levels = Vec::new();
    let mut sigma_g = Vec::new();
    let b = loop {
        let bset = returning_cells(map, seg, &a, &a, t0.ceil() as i64, t_cur.floor() as i64);
        let g: Vec<usize> = (0..GRID_CELLS).filter(|&i| a[i] && !bset[i]).collect();
        sigma_g.push(g.len() as f64 * cell);
        levels.push(t_cur);
        groups.push(Group {
            members: g,
            t: t0,
            t_end: t_cur,
            direction: Direction::Forward,
            hash: String::new(),
        });
        let sigma_b = bset.iter().filter(|&&v| v).count() as f64 * cell;
        if sigma_b < eps * seg.width || t_cur / 2.0 < 2.0 * t0 {
            break bset;
        }
        a = bset;
        t_cur /= 2.0;
    };
    let b_idx: Vec<usize> = (0..GRID_CELLS).filter(|&i| b[i]).collect();
    let sigma_b = b_idx.len() as f64 * cell;
    let certificate = PartitionCertificate {
        b: b_idx,
        groups,
        h: scales.h,
        delta: scales.delta,
        radius: seg.thickness,
        tau: 0.0,
        alpha: scales.alpha,
        lambda: scales.lambda,
        universe: GRID_CELLS,
        mixed_colors: false,
    };
    certificate.validate()?;
    Ok(ContractionOutcome {
        certificate,
        levels,
        sigma_a0: seg.width,
        sigma_g,
        sigma_b,
    })
}

/// Independent check of a toy certificate by direct iteration of cell
/// centres.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridOracle {
    /// Smallest distance from an iterate of a group cell centre to a cell
    /// centre of the same group, over all groups and window times.
    pub min_gap: f64,
    pub residual_fraction: f64,
    pub covers: bool,
}

impl GridOracle {
    pub fn certified(&self, thickness: f64) -> bool {
        self.covers && self.min_gap >= thickness * (1.0 - 1e-9)
    }
}

/// Iterate every cell centre of every group by repeated application of the
/// map and measure the distance to the nearest centre of the same group.
pub fn grid_oracle(map: &HyperbolicToyMap, seg: &ToySegment, cert: &PartitionCertificate) -> GridOracle {
    let e = map.stable_direction();
    let n = [-e[1], e[0]];
    let cell = seg.cell();
    let mut min_gap = f64::INFINITY;
    for g in &cert.groups {
        if g.members.is_empty() {
            continue;
        }
        let centres: Vec<f64> = g.members.iter().map(|&i| (i as f64 + 0.5) * cell).collect();
        let nearest = |s: f64| -> f64 {
            let k = centres.partition_point(|&c| c < s);
            let mut best = f64::INFINITY;
            for j in [k.wrapping_sub(1), k] {
                if let Some(c) = centres.get(j) {
                    best = best.min((c - s).abs());
                }
            }
            best
        };
        let t0 = g.t.ceil() as i64;
        let t1 = g.t_end.floor() as i64;
        for &s in &centres {
            let mut y = seg.point(e, s);
            for t in 1..=t1 {
                y = map.apply(y);
                if t < t0 {
                    continue;
                }
                for k0 in -1..=1 {
                    for k1 in -1..=1 {
                        let dv = [
                            wrap_unit(y[0] - seg.anchor[0] + 0.5) - 0.5 + k0 as f64,
                            wrap_unit(y[1] - seg.anchor[1] + 0.5) - 0.5 + k1 as f64,
                        ];
                        let along = dv[0] * e[0] + dv[1] * e[1];
                        let across = dv[0] * n[0] + dv[1] * n[1];
                        let gap = across.hypot(nearest(along));
                        min_gap = min_gap.min(gap);
                    }
                }
            }
        }
    }
    let mut seen = vec![false; cert.universe];
    for &i in cert.b.iter().chain(cert.groups.iter().flat_map(|g| g.members.iter())) {
        seen[i] = true;
    }
    GridOracle {
        min_gap,
        residual_fraction: cert.b.len() as f64 / cert.universe as f64,
        covers: seen.iter().all(|&s| s),
    }
}
