//! Experiment orchestration: configs, pipelines, manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::flow::FlowConfig;
use crate::geometry::{CotangentPoint, ManifoldModel, Point};
use crate::submanifold::SubmanifoldKind;

mod pipelines;

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    ZonalSup,
    BeamRestriction,
    TorusAverage,
    SphereReturns,
    CoverPartition,
    CatmapContraction,
    TubeMass,
    Conjugacy,
    MuThicken,
}

impl Experiment {
    pub const ALL: [Experiment; 9] = [
        Experiment::ZonalSup,
        Experiment::BeamRestriction,
        Experiment::TorusAverage,
        Experiment::SphereReturns,
        Experiment::CoverPartition,
        Experiment::CatmapContraction,
        Experiment::TubeMass,
        Experiment::Conjugacy,
        Experiment::MuThicken,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::ZonalSup => "zonal_sup",
            Experiment::BeamRestriction => "beam_restriction",
            Experiment::TorusAverage => "torus_average",
            Experiment::SphereReturns => "sphere_returns",
            Experiment::CoverPartition => "cover_partition",
            Experiment::CatmapContraction => "catmap_contraction",
            Experiment::TubeMass => "tube_mass",
            Experiment::Conjugacy => "conjugacy",
            Experiment::MuThicken => "mu_thicken",
        }
    }

    pub fn describe(self) -> &'static str {
        match self {
            Experiment::ZonalSup => "sup-norm ratio sweep over l_list with a power-law fit",
            Experiment::BeamRestriction => "normal and oblique beam restrictions over h_list",
            Experiment::TorusAverage => "averages of lattice modes or zonal harmonics over a curve",
            Experiment::SphereReturns => "first returns to SN*H, push-forward bin test, decomposition ladder",
            Experiment::CoverPartition => "tube cover, coloring and partition of unity check",
            Experiment::CatmapContraction => "cat-map contraction partition and bracket sweep over h_list",
            Experiment::TubeMass => "quantized tube masses, time averages and group ratios",
            Experiment::Conjugacy => "conjugate points along seeds and the conjugacy certificate",
            Experiment::MuThicken => "thickening of an invariant measure onto SN*H",
        }
    }

    /// Config sections the pipeline reads: (required, optional).
    fn sections(self) -> (&'static [&'static str], &'static [&'static str]) {
        match self {
            Experiment::ZonalSup => (&["l_list", "modes"], &[]),
            Experiment::BeamRestriction => (&["h_list"], &[]),
            Experiment::TorusAverage => (&["manifold", "submanifold", "modes"], &["l_list"]),
            Experiment::SphereReturns => (&["manifold", "submanifold", "returns"], &["flow"]),
            Experiment::CoverPartition => (&["manifold", "submanifold", "tubes"], &["flow", "quantize"]),
            Experiment::CatmapContraction => (&["h_list", "contraction"], &[]),
            Experiment::TubeMass => (&["submanifold", "quantize"], &["flow"]),
            Experiment::Conjugacy => (&["manifold", "conjugacy"], &[]),
            Experiment::MuThicken => (&["manifold", "submanifold", "measure"], &["flow"]),
        }
    }

    /// Relative tolerance per CSV column used by `compare_manifests`;
    /// columns not listed use `1e-12`.
    fn tolerances(self) -> BTreeMap<String, f64> {
        let list: &[(&str, f64)] = match self {
            Experiment::ZonalSup => &[("abs", 1e-9), ("value_re", 1e-9)],
            Experiment::SphereReturns => &[("T_H", 1e-12), ("eta_distance_residual", 1.0)],
            Experiment::TubeMass => &[("mass", 1e-10), ("ratio", 1e-10)],
            Experiment::MuThicken => &[("estimate", 1e-10)],
            _ => &[],
        };
        list.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeFamily {
    Zonal,
    HighestWeight,
    RandomSphere,
    Torus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubmanifoldConfig {
    pub shape: SubmanifoldKind,
    pub density: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModesConfig {
    pub family: ModeFamily,
    /// Grid points per wavelength for sup norms.
    #[serde(default = "default_ppw")]
    pub ppw: f64,
    /// Lattice vectors for the torus family.
    #[serde(default)]
    pub m_list: Vec<[i64; 2]>,
}

fn default_ppw() -> f64 {
    8.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LadderConfig {
    pub levels: usize,
    pub s_list: Vec<f64>,
    pub t_list: Vec<f64>,
    pub t_hor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReturnsConfig {
    pub t_max: f64,
    pub prox_tol: f64,
    pub bins: usize,
    /// Asserted first-return time of every sample, if given.
    #[serde(default)]
    pub expected_t: Option<f64>,
    #[serde(default)]
    pub ladder: Option<LadderConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TubesConfig {
    pub tau: f64,
    pub radius: f64,
    #[serde(default = "default_cap")]
    pub color_cap: usize,
}

fn default_cap() -> usize {
    crate::tubes::DEFAULT_COLOR_CAP
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupConfig {
    pub tau: f64,
    pub radius: f64,
    pub t0: f64,
    pub t_end: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizeConfig {
    /// Grid side, a power of two (tube_mass only).
    #[serde(default)]
    pub n: Option<usize>,
    /// Lattice mode fixing `h = 1/(2 pi |m|)`.
    pub mode: [i64; 2],
    pub delta: f64,
    /// Full-cover scales (tube_mass only).
    #[serde(default)]
    pub cover: Option<TubesConfig>,
    #[serde(default)]
    pub group: Option<GroupConfig>,
    #[serde(default = "default_steps")]
    pub steps: usize,
}

fn default_steps() -> usize {
    2000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContractionConfig {
    pub matrix: [[i64; 2]; 2],
    pub anchor: [f64; 2],
    pub width: f64,
    pub thickness: f64,
    pub t0: f64,
    pub t_end: f64,
    pub eps: f64,
    pub h: f64,
    pub delta: f64,
    pub alpha: f64,
    /// Asserted bound on the residual fraction.
    pub max_residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedConfig {
    pub x: [f64; 2],
    pub angle: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConjugacyConfig {
    pub seeds: Vec<SeedConfig>,
    pub t_end: f64,
    pub r: f64,
    pub points: Vec<Point>,
    pub t: f64,
    pub a: f64,
    pub t_hor: f64,
    pub directions: usize,
    pub dt: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum MeasureSpec {
    Liouville { count: usize },
    PeriodicOrbit { seed: CotangentPoint, period: f64, samples: usize },
    ProductDeltaXi { xi0: [f64; 2], side: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasureConfig {
    pub measure: MeasureSpec,
    pub deltas: Vec<f64>,
    pub eps: f64,
    /// Asserted limit, checked within 2% when given.
    #[serde(default)]
    pub expected_limit: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub experiment: Experiment,
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub h_list: Option<Vec<f64>>,
    #[serde(default)]
    pub l_list: Option<Vec<u64>>,
    #[serde(default)]
    pub manifold: Option<ManifoldModel>,
    #[serde(default)]
    pub submanifold: Option<SubmanifoldConfig>,
    #[serde(default)]
    pub flow: Option<FlowConfig>,
    #[serde(default)]
    pub modes: Option<ModesConfig>,
    #[serde(default)]
    pub returns: Option<ReturnsConfig>,
    #[serde(default)]
    pub tubes: Option<TubesConfig>,
    #[serde(default)]
    pub quantize: Option<QuantizeConfig>,
    #[serde(default)]
    pub contraction: Option<ContractionConfig>,
    #[serde(default)]
    pub conjugacy: Option<ConjugacyConfig>,
    #[serde(default)]
    pub measure: Option<MeasureConfig>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn present(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        let mut add = |name, on: bool| {
            if on {
                v.push(name)
            }
        };
        add("h_list", self.h_list.is_some());
        add("l_list", self.l_list.is_some());
        add("manifold", self.manifold.is_some());
        add("submanifold", self.submanifold.is_some());
        add("flow", self.flow.is_some());
        add("modes", self.modes.is_some());
        add("returns", self.returns.is_some());
        add("tubes", self.tubes.is_some());
        add("quantize", self.quantize.is_some());
        add("contraction", self.contraction.is_some());
        add("conjugacy", self.conjugacy.is_some());
        add("measure", self.measure.is_some());
        v
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let (required, optional) = self.experiment.sections();
        let present = self.present();
        for r in required {
            if !present.contains(r) {
                return Err(Error::Config(format!("{} needs `{r}`", self.experiment.name())));
            }
        }
        for p in &present {
            if !required.contains(p) && !optional.contains(p) {
                return Err(Error::Config(format!("{} does not read `{p}`", self.experiment.name())));
            }
        }
        if let Some(m) = &self.manifold {
            m.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        if let Some(f) = &self.flow {
            f.validate()?;
        }
        if self.h_list.as_ref().is_some_and(|v| v.is_empty() || v.iter().any(|h| !(*h > 0.0 && *h < 1.0))) {
            return Err(Error::Config("h_list needs values in (0, 1)".into()));
        }
        if self.l_list.as_ref().is_some_and(|v| v.is_empty()) {
            return Err(Error::Config("l_list is empty".into()));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::Config("output_dir is empty".into()));
        }
        Ok(())
    }

    fn flow_config(&self) -> FlowConfig {
        self.flow.unwrap_or_default()
    }
}

/// Outcome of one scientific check inside a pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub experiment: Experiment,
    pub config_hash: String,
    pub code_version: String,
    pub seed: u64,
    /// File name to SHA-256 digest.
    pub files: BTreeMap<String, String>,
    pub tolerances: BTreeMap<String, f64>,
    pub checks: Vec<Check>,
    pub wall_time_s: f64,
    pub warnings: Vec<String>,
}

impl RunManifest {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// What a pipeline hands back after writing into its staging directory.
#[derive(Default)]
pub(crate) struct Outcome {
    pub checks: Vec<Check>,
    pub warnings: Vec<String>,
}

impl Outcome {
    fn check(&mut self, name: &str, passed: bool, detail: String) {
        self.checks.push(Check {
            name: name.into(),
            passed,
            detail,
        });
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Run the configured pipeline. Outputs are staged next to `output_dir`
/// and renamed into place only once complete; on error nothing is left.
/// A failed check is reported through `RunManifest::passed`, not as `Err`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunManifest> {
    cfg.validate()?;
    let start = Instant::now();
    let out = &cfg.output_dir;
    let parent = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent)?;
    let stem = out
        .file_name()
        .ok_or_else(|| Error::Config("output_dir has no final component".into()))?
        .to_string_lossy()
        .into_owned();
    let staging = parent.join(format!(".{stem}.partial-{}", std::process::id()));
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    fs::create_dir(&staging)?;
    let result = stage(cfg, &staging, start);
    match result {
        Ok(manifest) => {
            if out.exists() {
                fs::remove_dir_all(out)?;
            }
            fs::rename(&staging, out)?;
            Ok(manifest)
        }
        Err(e) => {
            let _ = fs::remove_dir_all(&staging);
            Err(e)
        }
    }
}

fn stage(cfg: &ExperimentConfig, dir: &Path, start: Instant) -> Result<RunManifest> {
    let outcome = pipelines::run(cfg, dir)?;
    let mut files = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        files.insert(name, sha256_hex(&fs::read(entry.path())?));
    }
    // where a run is written does not change what it computes
    let mut what = cfg.clone();
    what.output_dir = PathBuf::new();
    let canonical = serde_json::to_vec(&what).expect("config serializes");
    let manifest = RunManifest {
        schema_version: SCHEMA_VERSION,
        experiment: cfg.experiment,
        config_hash: sha256_hex(&canonical),
        code_version: env!("CARGO_PKG_VERSION").into(),
        seed: cfg.seed,
        files,
        tolerances: cfg.experiment.tolerances(),
        checks: outcome.checks,
        wall_time_s: start.elapsed().as_secs_f64(),
        warnings: outcome.warnings,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(dir.join(MANIFEST_NAME), text)?;
    Ok(manifest)
}

/// One numeric cell outside tolerance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftRow {
    pub file: String,
    pub row: usize,
    pub column: String,
    pub a: String,
    pub b: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ManifestDiff {
    /// Top-level fields that differ (`config_hash`, `code_version`, ...).
    pub fields: Vec<String>,
    /// Files present in only one run, or whose layout differs.
    pub files: Vec<String>,
    pub drift: Vec<DriftRow>,
}

impl ManifestDiff {
    pub fn is_empty(&self) -> bool {
        self.fields.is_empty() && self.files.is_empty() && self.drift.is_empty()
    }
}

fn dir_of(manifest_path: &Path) -> PathBuf {
    manifest_path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."))
}

/// Field-wise and checksum comparison of two runs. Files whose checksums
/// differ are compared cell by cell as CSV with the experiment's column
/// tolerances.
pub fn compare_manifests(a_path: &Path, b_path: &Path) -> Result<ManifestDiff> {
    let a = RunManifest::load(a_path)?;
    let b = RunManifest::load(b_path)?;
    if a.experiment != b.experiment {
        return Err(Error::SchemaMismatch(a.experiment.name().into(), b.experiment.name().into()));
    }
    let mut diff = ManifestDiff::default();
    if a.schema_version != b.schema_version {
        diff.fields.push("schema_version".into());
    }
    if a.config_hash != b.config_hash {
        diff.fields.push("config_hash".into());
    }
    if a.code_version != b.code_version {
        diff.fields.push("code_version".into());
    }
    if a.seed != b.seed {
        diff.fields.push("seed".into());
    }
    if a.checks.iter().map(|c| c.passed).ne(b.checks.iter().map(|c| c.passed)) {
        diff.fields.push("checks".into());
    }
    let (da, db) = (dir_of(a_path), dir_of(b_path));
    for (name, ha) in &a.files {
        let Some(hb) = b.files.get(name) else {
            diff.files.push(name.clone());
            continue;
        };
        if ha == hb {
            continue;
        }
        if !name.ends_with(".csv") {
            diff.files.push(name.clone());
            continue;
        }
        let ta = fs::read_to_string(da.join(name))?;
        let tb = fs::read_to_string(db.join(name))?;
        if !csv_drift(name, &ta, &tb, &a.tolerances, &mut diff.drift) {
            diff.files.push(name.clone());
        }
    }
    for name in b.files.keys() {
        if !a.files.contains_key(name) {
            diff.files.push(name.clone());
        }
    }
    Ok(diff)
}

/// Appends out-of-tolerance cells; returns `false` if the layouts differ.
fn csv_drift(file: &str, a: &str, b: &str, tol: &BTreeMap<String, f64>, out: &mut Vec<DriftRow>) -> bool {
    let la: Vec<&str> = a.lines().collect();
    let lb: Vec<&str> = b.lines().collect();
    if la.len() != lb.len() || la.first() != lb.first() {
        return false;
    }
    let header: Vec<&str> = la.first().map(|h| h.split(',').collect()).unwrap_or_default();
    for (row, (ra, rb)) in la.iter().zip(&lb).enumerate().skip(1) {
        let ca: Vec<&str> = ra.split(',').collect();
        let cb: Vec<&str> = rb.split(',').collect();
        if ca.len() != cb.len() || ca.len() != header.len() {
            return false;
        }
        for ((col, x), y) in header.iter().zip(&ca).zip(&cb) {
            if x == y {
                continue;
            }
            let rel = tol.get(*col).copied().unwrap_or(1e-12);
            let close = match (x.parse::<f64>(), y.parse::<f64>()) {
                (Ok(p), Ok(q)) => (p - q).abs() <= rel * p.abs().max(q.abs()).max(1e-300),
                _ => false,
            };
            if !close {
                out.push(DriftRow {
                    file: file.into(),
                    row,
                    column: col.to_string(),
                    a: x.to_string(),
                    b: y.to_string(),
                });
            }
        }
    }
    true
}

/// Size the global worker pool from `EIGENAVG_WORKERS` when set.
pub fn init_workers() -> Result<()> {
    if let Ok(v) = std::env::var("EIGENAVG_WORKERS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| Error::Config(format!("EIGENAVG_WORKERS = {v:?} is not a positive integer")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests;
