use std::fs;
use std::path::Path;
use std::process::Command;

fn eigenavg(args: &[&str], cwd: &Path) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_eigenavg"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs");
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stdout).into_owned())
}

const BEAM: &str = "schema_version = 1\nexperiment = \"beam_restriction\"\nseed = 1\noutput_dir = \"out/beam\"\nh_list = [1e-2, 1e-3, 1e-4]\n";

#[test]
fn list_names_every_experiment() {
    let tmp = tempfile::tempdir().unwrap();
    let (code, text) = eigenavg(&["list-experiments"], tmp.path());
    assert_eq!(code, 0);
    assert_eq!(text.lines().count(), 9);
    assert!(text.contains("tube_mass") && text.contains("mu_thicken"));
}

#[test]
fn run_and_compare_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("beam.toml"), BEAM).unwrap();
    let (code, text) = eigenavg(&["run", "beam.toml"], tmp.path());
    assert_eq!(code, 0, "{text}");
    assert!(text.contains("PASS normal_exponent"));
    let m = tmp.path().join("out/beam/manifest.json");
    assert!(m.exists());
    let ms = m.to_str().unwrap();
    assert_eq!(eigenavg(&["compare", ms, ms], tmp.path()).0, 0);

    // a failing check exits 2 and still writes the run
    fs::write(
        tmp.path().join("ret.toml"),
        r#"schema_version = 1
experiment = "sphere_returns"
seed = 1
output_dir = "out/ret"
[manifold]
kind = "Sphere2"
[submanifold]
density = 4.0
shape = { kind = "Point", x = [1.0, 0.3] }
[returns]
t_max = 7.0
prox_tol = 1e-3
bins = 4
expected_t = 6.0
"#,
    )
    .unwrap();
    let (code, text) = eigenavg(&["run", "ret.toml"], tmp.path());
    assert_eq!(code, 2, "{text}");
    assert!(text.contains("FAIL return_time"));
    assert!(tmp.path().join("out/ret/returns.csv").exists());
    let other = tmp.path().join("out/ret/manifest.json");
    assert_eq!(eigenavg(&["compare", ms, other.to_str().unwrap()], tmp.path()).0, 1);
}

#[test]
fn malformed_config_exits_one_without_output() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("bad.toml"), BEAM.replace("h_list", "h_lst")).unwrap();
    let (code, _) = eigenavg(&["run", "bad.toml"], tmp.path());
    assert_eq!(code, 1);
    assert!(!tmp.path().join("out").exists());
    assert_eq!(eigenavg(&["run", "missing.toml"], tmp.path()).0, 1);
}
