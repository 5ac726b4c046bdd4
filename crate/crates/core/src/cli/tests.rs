use super::*;

const RETURNS: &str = r#"
schema_version = 1
experiment = "sphere_returns"
seed = 3
output_dir = "OUT"

[manifold]
kind = "Sphere2"

[submanifold]
density = 8.0
shape = { kind = "LatitudeCircle", theta0 = 1.5707963267948966 }

[returns]
t_max = 4.0
prox_tol = 1e-3
bins = 8
expected_t = 3.141592653589793
"#;

fn returns_cfg(out: &Path, extra: &str) -> ExperimentConfig {
    let text = RETURNS.replace("OUT", &out.display().to_string()) + extra;
    ExperimentConfig::parse(&text).unwrap()
}

#[test]
fn shipped_configs_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = std::collections::BTreeSet::new();
    for entry in fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.extension().is_some_and(|e| e == "toml") {
            let cfg = ExperimentConfig::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
            seen.insert(cfg.experiment);
        }
    }
    assert_eq!(seen.len(), Experiment::ALL.len());
}

#[test]
fn config_schema_is_strict() {
    let ok = RETURNS.replace("OUT", "x");
    assert!(ExperimentConfig::parse(&ok).is_ok());
    let bad = [
        ok.replace("seed = 3", "seed = 3\ncolour = 1"),
        ok.replace("bins = 8", "bins = 8\nbinz = 2"),
        ok.replace("schema_version = 1", "schema_version = 2"),
        ok.replace("[returns]", "[returnz]"),
        ok.clone() + "\nh_list = [0.1]\n",
        ok.replace("\"sphere_returns\"", "\"sphere_return\""),
        ok.replace("kind = \"Sphere2\"", "kind = \"ConformalTorus2\"\namplitude = 0.7\nfrequency = 1"),
    ];
    for text in bad {
        assert!(matches!(ExperimentConfig::parse(&text), Err(Error::Config(_))), "{text}");
    }
}

#[test]
fn identical_runs_reproduce_checksums() {
    let tmp = tempfile::tempdir().unwrap();
    let a = run_experiment(&returns_cfg(&tmp.path().join("a"), "")).unwrap();
    let b = run_experiment(&returns_cfg(&tmp.path().join("b"), "")).unwrap();
    assert!(a.passed());
    assert_eq!(a.files, b.files);
    assert!(a.files.contains_key("returns.csv"));
    let d = compare_manifests(&tmp.path().join("a").join(MANIFEST_NAME), &tmp.path().join("b").join(MANIFEST_NAME))
        .unwrap();
    assert!(d.is_empty(), "{d:?}");
}

#[test]
fn perturbed_flow_tolerance_shows_drift() {
    let tmp = tempfile::tempdir().unwrap();
    let conformal = |out: &Path, extra: &str| {
        let text = RETURNS
            .replace("OUT", &out.display().to_string())
            .replace("kind = \"Sphere2\"", "kind = \"ConformalTorus2\"\namplitude = 0.1\nfrequency = 1")
            .replace("kind = \"LatitudeCircle\", theta0 = 1.5707963267948966", "kind = \"Point\", x = [0.25, 0.6]")
            .replace("t_max = 4.0", "t_max = 3.0")
            .replace("prox_tol = 1e-3", "prox_tol = 0.01")
            .replace("expected_t = 3.141592653589793\n", "")
            + extra;
        ExperimentConfig::parse(&text).unwrap()
    };
    run_experiment(&conformal(&tmp.path().join("a"), "")).unwrap();
    run_experiment(&conformal(&tmp.path().join("b"), "\n[flow]\ntol = 1e-7\n")).unwrap();
    let d = compare_manifests(&tmp.path().join("a").join(MANIFEST_NAME), &tmp.path().join("b").join(MANIFEST_NAME))
        .unwrap();
    assert_eq!(d.fields, vec!["config_hash".to_string()]);
    assert!(!d.drift.is_empty(), "{d:?}");
    assert!(d.drift.iter().all(|r| r.file == "returns.csv" && r.column == "T_H"), "{d:?}");
}

#[test]
fn different_experiments_do_not_compare() {
    let tmp = tempfile::tempdir().unwrap();
    run_experiment(&returns_cfg(&tmp.path().join("a"), "")).unwrap();
    let beam = format!(
        "schema_version = 1\nexperiment = \"beam_restriction\"\nseed = 1\noutput_dir = \"{}\"\nh_list = [1e-2]\n",
        tmp.path().join("b").display()
    );
    run_experiment(&ExperimentConfig::parse(&beam).unwrap()).unwrap();
    let r = compare_manifests(&tmp.path().join("a").join(MANIFEST_NAME), &tmp.path().join("b").join(MANIFEST_NAME));
    assert!(matches!(r, Err(Error::SchemaMismatch(..))));
}

#[test]
fn failed_pipeline_leaves_nothing_behind() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("cover");
    // R below 5 h^delta: the pipeline errors after writing tubes.csv
    let text = format!(
        r#"
schema_version = 1
experiment = "cover_partition"
seed = 1
output_dir = "{}"
[manifold]
kind = "FlatTorus2"
[submanifold]
density = 32.0
shape = {{ kind = "ClosedGeodesic", p0 = {{ x = [0.0, 0.0], xi = [1.0, 0.0] }}, length = 1.0 }}
[tubes]
tau = 0.1
radius = 0.1
[quantize]
mode = [0, 10]
delta = 0.3
"#,
        out.display()
    );
    let r = run_experiment(&ExperimentConfig::parse(&text).unwrap());
    assert!(matches!(r, Err(Error::Constraint(_))));
    assert!(!out.exists());
    assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 0);
}

#[test]
fn failed_check_still_writes_a_complete_run() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("r");
    let cfg = returns_cfg(&out, "");
    let text = toml::to_string(&cfg).unwrap().replace("expected_t = 3.141592653589793", "expected_t = 3.0");
    let m = run_experiment(&ExperimentConfig::parse(&text).unwrap()).unwrap();
    assert!(!m.passed());
    assert!(out.join(MANIFEST_NAME).exists() && out.join("returns.csv").exists());
    // rerunning replaces the directory wholesale
    let m = run_experiment(&cfg).unwrap();
    assert!(m.passed());
}
