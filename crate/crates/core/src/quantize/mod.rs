//! Discrete semiclassical quantization on the flat torus.
//!
//! Fields live on an `N x N` grid over `[0,1)^2`; frequency index `k` maps to
//! `xi = 2 pi h k` so that `e^{2 pi i k.x} = e^{i xi.x/h}`. Symbols are kept as
//! sums of separable terms `f_r(x) g_r(xi)` and quantized by the symmetric
//! split `sum_r (f_r g_r(hD) + g_r(hD) f_r) / 2`.

mod cutoff;

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

pub use cutoff::{
    certify_window, localized_mass, partition_of_unity, smooth_step, time_average_symbol, tube_cutoff, write_mass_csv,
    CertifiedWindow, MassReport, MassRow, Profile, TimeAverage, TubeCutoff,
};

/// Largest rank the separable splitting may use.
pub const RANK_CAP: usize = 32;
/// Relative accuracy demanded of the factorization.
pub const RANK_TOL: f64 = 1e-6;

const GRID_MAGIC: &[u8; 8] = b"EAVGGRID";

/// Complex field on the `N x N` torus grid; entry `i1 * N + i2` sits at
/// `(i1/N, i2/N)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridField {
    pub n: usize,
    pub h: f64,
    pub values: Vec<Complex64>,
}

fn check_grid(n: usize, h: f64) -> Result<()> {
    if !n.is_power_of_two() || n < 4 {
        return Err(Error::Domain(format!("grid side {n} is not a power of two >= 4")));
    }
    if !(h > 0.0) || (n as f64) < 2.0 / h * (1.0 - 1e-12) {
        return Err(Error::Domain(format!("grid side {n} below 2/h = {}", 2.0 / h)));
    }
    Ok(())
}

/// Signed frequency of DFT index `k`.
pub fn signed(k: usize, n: usize) -> i64 {
    if k < n / 2 {
        k as i64
    } else {
        k as i64 - n as i64
    }
}

impl GridField {
    pub fn new(n: usize, h: f64, values: Vec<Complex64>) -> Result<Self> {
        check_grid(n, h)?;
        if values.len() != n * n {
            return Err(Error::Domain(format!("{} values for an {n}x{n} grid", values.len())));
        }
        Ok(GridField { n, h, values })
    }

    pub fn from_fn<F: Fn([f64; 2]) -> Complex64 + Sync>(n: usize, h: f64, f: F) -> Result<Self> {
        check_grid(n, h)?;
        let values = (0..n * n).into_par_iter().map(|i| f(grid_point(i, n))).collect();
        Ok(GridField { n, h, values })
    }

    /// `sum c_m e^{2 pi i m.x}`; every `|m_i|` must stay below `N/2`.
    pub fn from_modes(n: usize, h: f64, modes: &[([i64; 2], Complex64)]) -> Result<Self> {
        if modes.iter().any(|(m, _)| m[0].unsigned_abs() as usize >= n / 2 || m[1].unsigned_abs() as usize >= n / 2) {
            return Err(Error::Domain("mode frequency above the grid Nyquist limit".into()));
        }
        Self::from_fn(n, h, |x| {
            modes
                .iter()
                .map(|(m, c)| c * Complex64::from_polar(1.0, 2.0 * PI * (m[0] as f64 * x[0] + m[1] as f64 * x[1])))
                .sum()
        })
    }

    /// Grid `L^2([0,1)^2)` inner product.
    pub fn inner(&self, other: &GridField) -> Complex64 {
        let s: Complex64 = self.values.par_iter().zip(&other.values).map(|(a, b)| a * b.conj()).sum();
        s / (self.n * self.n) as f64
    }

    pub fn norm(&self) -> f64 {
        let s: f64 = self.values.par_iter().map(|v| v.norm_sqr()).sum();
        (s / (self.n * self.n) as f64).sqrt()
    }

    fn zeros(n: usize, h: f64) -> Self {
        GridField {
            n,
            h,
            values: vec![Complex64::new(0.0, 0.0); n * n],
        }
    }

    /// Flat binary dump: 32-byte header (magic, `N` as u64, `h`, reserved)
    /// followed by row-major little-endian `(re, im)` pairs.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(32 + 16 * self.values.len());
        buf.extend_from_slice(GRID_MAGIC);
        buf.extend_from_slice(&(self.n as u64).to_le_bytes());
        buf.extend_from_slice(&self.h.to_le_bytes());
        buf.extend_from_slice(&[0u8; 8]);
        for v in &self.values {
            buf.extend_from_slice(&v.re.to_le_bytes());
            buf.extend_from_slice(&v.im.to_le_bytes());
        }
        std::fs::File::create(path)?.write_all(&buf)?;
        Ok(())
    }

    pub fn read_binary(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        if buf.len() < 32 || &buf[..8] != GRID_MAGIC {
            return Err(Error::Domain("not a grid dump".into()));
        }
        let word = |o: usize| <[u8; 8]>::try_from(&buf[o..o + 8]).unwrap();
        let n = u64::from_le_bytes(word(8)) as usize;
        let h = f64::from_le_bytes(word(16));
        if buf.len() != 32 + 16 * n * n {
            return Err(Error::Domain("grid dump has the wrong length".into()));
        }
        let values = (0..n * n)
            .map(|i| {
                let o = 32 + 16 * i;
                Complex64::new(f64::from_le_bytes(word(o)), f64::from_le_bytes(word(o + 8)))
            })
            .collect();
        GridField::new(n, h, values)
    }
}

pub(crate) fn grid_point(i: usize, n: usize) -> [f64; 2] {
    [(i / n) as f64 / n as f64, (i % n) as f64 / n as f64]
}

pub(crate) fn grid_frequency(i: usize, n: usize, h: f64) -> [f64; 2] {
    let s = 2.0 * PI * h;
    [s * signed(i / n, n) as f64, s * signed(i % n, n) as f64]
}

/// Unitary 2-D discrete Fourier transform on an `N x N` grid.
pub struct Fft2 {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    pub fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Fft2 {
            n,
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
        }
    }

    fn pass(&self, data: &mut [Complex64], inverse: bool) {
        let plan = if inverse { &self.inv } else { &self.fwd };
        let n = self.n;
        let rows = |d: &mut [Complex64]| {
            d.par_chunks_mut(n).for_each(|row| plan.process(row));
        };
        rows(data);
        transpose(data, n);
        rows(data);
        transpose(data, n);
        let s = 1.0 / n as f64;
        data.par_iter_mut().for_each(|v| *v *= s);
    }

    pub fn forward(&self, data: &mut [Complex64]) {
        self.pass(data, false);
    }

    pub fn inverse(&self, data: &mut [Complex64]) {
        self.pass(data, true);
    }
}

fn transpose(data: &mut [Complex64], n: usize) {
    const B: usize = 32;
    for bi in (0..n).step_by(B) {
        for bj in (bi..n).step_by(B) {
            for i in bi..(bi + B).min(n) {
                let start = if bi == bj { i + 1 } else { bj };
                for j in start..(bj + B).min(n) {
                    data.swap(i * n + j, j * n + i);
                }
            }
        }
    }
}

/// Symbol as a sum of separable terms; `x` factors on the position grid and
/// `xi` factors on the frequency lattice `2 pi h Z^2` (so the nearest-node
/// lookup of a DFT frequency is exact).
#[derive(Clone, Debug)]
pub struct SymbolGrid {
    pub n: usize,
    pub h: f64,
    pub delta: f64,
    pub terms: Vec<(Vec<f64>, Vec<f64>)>,
    pub tube: Option<usize>,
}

impl SymbolGrid {
    pub fn rank(&self) -> usize {
        self.terms.len()
    }

    /// Single separable term.
    pub fn separable<F, G>(n: usize, h: f64, delta: f64, f: F, g: G) -> Result<Self>
    where
        F: Fn([f64; 2]) -> f64 + Sync,
        G: Fn([f64; 2]) -> f64 + Sync,
    {
        check_grid(n, h)?;
        let fx = (0..n * n).into_par_iter().map(|i| f(grid_point(i, n))).collect();
        let gx = (0..n * n).into_par_iter().map(|i| g(grid_frequency(i, n, h))).collect();
        Ok(SymbolGrid {
            n,
            h,
            delta,
            terms: vec![(fx, gx)],
            tube: None,
        })
    }

    /// Adaptive cross approximation of `a(x, xi)` over grid x frequency
    /// lattice with relative accuracy `tol` and at most `cap` terms.
    pub fn from_fn<A>(n: usize, h: f64, delta: f64, a: A, tol: f64, cap: usize) -> Result<Self>
    where
        A: Fn([f64; 2], [f64; 2]) -> f64 + Sync,
    {
        check_grid(n, h)?;
        let m = n * n;
        let xs: Vec<[f64; 2]> = (0..m).map(|i| grid_point(i, n)).collect();
        let ks: Vec<[f64; 2]> = (0..m).map(|i| grid_frequency(i, n, h)).collect();
        let mut us: Vec<Vec<f64>> = Vec::new();
        let mut vs: Vec<Vec<f64>> = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let mut used = vec![false; m];
        let mut frob2 = 0.0;
        let mut row_idx = 0usize;
        let mut misses = 0;
        let mut converged = false;
        while us.len() < cap {
            used[row_idx] = true;
            let row: Vec<f64> = (0..m)
                .into_par_iter()
                .map(|j| a(xs[row_idx], ks[j]) - us.iter().zip(&vs).map(|(u, v)| u[row_idx] * v[j]).sum::<f64>())
                .collect();
            let (j, piv) = row
                .iter()
                .enumerate()
                .fold((0, 0.0f64), |b, (j, v)| if v.abs() > b.1.abs() { (j, *v) } else { b });
            if piv.abs() < 1e-14 {
                misses += 1;
                if misses > 8 {
                    converged = true;
                    break;
                }
                row_idx = loop {
                    let r = rng.gen_range(0..m);
                    if !used[r] {
                        break r;
                    }
                };
                continue;
            }
            let col: Vec<f64> = (0..m)
                .into_par_iter()
                .map(|i| (a(xs[i], ks[j]) - us.iter().zip(&vs).map(|(u, v)| u[i] * v[j]).sum::<f64>()) / piv)
                .collect();
            let nu = col.iter().map(|x| x * x).sum::<f64>();
            let nv = row.iter().map(|x| x * x).sum::<f64>();
            let cross: f64 = us
                .iter()
                .zip(&vs)
                .map(|(u, v)| {
                    let a: f64 = u.iter().zip(&col).map(|(p, q)| p * q).sum();
                    let b: f64 = v.iter().zip(&row).map(|(p, q)| p * q).sum();
                    a * b
                })
                .sum();
            frob2 += nu * nv + 2.0 * cross;
            let term = (nu * nv).sqrt();
            us.push(col);
            vs.push(row);
            if term <= tol * frob2.max(0.0).sqrt() {
                converged = true;
                break;
            }
            let last = us.last().unwrap();
            row_idx = (0..m)
                .filter(|i| !used[*i])
                .max_by(|p, q| last[*p].abs().total_cmp(&last[*q].abs()))
                .unwrap_or(0);
        }
        // sampled check of the factorization
        let mut worst = 0.0f64;
        let mut scale = 0.0f64;
        for _ in 0..2000 {
            let (i, j) = (rng.gen_range(0..m), rng.gen_range(0..m));
            let exact = a(xs[i], ks[j]);
            let approx: f64 = us.iter().zip(&vs).map(|(u, v)| u[i] * v[j]).sum();
            worst = worst.max((exact - approx).abs());
            scale = scale.max(exact.abs());
        }
        if !converged || worst > 10.0 * tol * scale.max(1e-300) {
            return Err(Error::RankCap(cap));
        }
        Ok(SymbolGrid {
            n,
            h,
            delta,
            terms: us.into_iter().zip(vs).collect(),
            tube: None,
        })
    }

    /// Value at grid node `i` and frequency node `k`.
    pub fn value(&self, i: usize, k: usize) -> f64 {
        self.terms.iter().map(|(f, g)| f[i] * g[k]).sum()
    }
}

/// Apply the symmetric split quantization of `a` to `u`.
pub fn weyl_quantize(a: &SymbolGrid, u: &GridField) -> Result<GridField> {
    if a.n != u.n || (a.h - u.h).abs() > 1e-15 * u.h {
        return Err(Error::Domain("symbol and field grids differ".into()));
    }
    let fft = Fft2::new(u.n);
    let mut hat = u.values.clone();
    fft.forward(&mut hat);
    Ok(apply_with_hat(a, u, &hat, &fft))
}

pub(crate) fn apply_with_hat(a: &SymbolGrid, u: &GridField, hat: &[Complex64], fft: &Fft2) -> GridField {
    let mut out = GridField::zeros(u.n, u.h);
    for (f, g) in &a.terms {
        // f g(hD) u
        let mut w: Vec<Complex64> = hat.par_iter().zip(g).map(|(v, s)| v * s).collect();
        fft.inverse(&mut w);
        // g(hD) f u
        let mut z: Vec<Complex64> = u.values.par_iter().zip(f).map(|(v, s)| v * s).collect();
        fft.forward(&mut z);
        z.par_iter_mut().zip(g).for_each(|(v, s)| *v *= s);
        fft.inverse(&mut z);
        out.values
            .par_iter_mut()
            .zip(w.par_iter().zip(&z).zip(f))
            .for_each(|(o, ((w, z), s))| *o += 0.5 * (w * s + z));
    }
    out
}
