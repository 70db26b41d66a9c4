use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use qfit_core::io::load_volume;

fn qfit(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qfit"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("qfit runs")
}

fn stderr_events(o: &Output) -> Vec<serde_json::Value> {
    String::from_utf8_lossy(&o.stderr)
        .lines()
        .filter_map(|l| serde_json::from_str(l).ok())
        .collect()
}

fn config_hash(o: &Output) -> String {
    stderr_events(o)
        .into_iter()
        .find(|e| e["event"] == "config")
        .and_then(|e| e["hash"].as_str().map(String::from))
        .expect("config event logged")
}

#[test]
fn usage_error_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(qfit(dir.path(), &["no-such-command"]).status.code(), Some(2));
}

#[test]
fn unknown_config_key_exits_three_with_json_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = qfit(dir.path(), &["--set", "phantom.colour=3", "phantom"]);
    assert_eq!(o.status.code(), Some(3));
    let err = stderr_events(&o).into_iter().find(|e| e.get("error").is_some()).unwrap();
    assert_eq!(err["error"], "config");
    assert_eq!(err["exit_code"], 3);
}

#[test]
fn missing_input_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = qfit(dir.path(), &["fit", "--input", "absent.qfit"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr_events(&o).into_iter().find(|e| e.get("error").is_some()).unwrap();
    assert_eq!(err["error"], "io");
}

#[test]
fn resolved_config_reproduces_hash() {
    let dir = tempfile::tempdir().unwrap();
    let first = qfit(dir.path(), &["--set", "phantom.size=16", "--set", "noise.variance=0.002", "phantom"]);
    assert!(first.status.success());
    let resolved = dir.path().join("resolved_config.json");
    let again = tempfile::tempdir().unwrap();
    let second = qfit(again.path(), &["--config", resolved.to_str().unwrap(), "phantom"]);
    assert!(second.status.success());
    assert_eq!(config_hash(&first), config_hash(&second));
    assert_eq!(fs::read(resolved).unwrap(), fs::read(again.path().join("resolved_config.json")).unwrap());
}

#[test]
fn simulate_then_fit_recovers_phantom_t2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let size = ["--set", "phantom.size=16"];
    assert!(qfit(d, &[&size[..], &["phantom"]].concat()).status.success());
    assert!(qfit(d, &[&size[..], &["simulate", "--kind", "relax"]].concat()).status.success());
    let echoes = d.join("echoes.qfit");
    assert!(qfit(d, &[&size[..], &["fit", "--input", echoes.to_str().unwrap()]].concat()).status.success());
    let truth = load_volume(&d.join("phantom_t2.qfit")).unwrap().to_map().unwrap();
    let fit = load_volume(&d.join("fit_t2.qfit")).unwrap().to_map().unwrap();
    let mut checked = 0;
    for v in 0..truth.values.len() {
        if truth.mask[v] {
            assert!(fit.mask[v]);
            assert!((fit.values[v] - truth.values[v]).abs() < 1e-3 * truth.values[v]);
            checked += 1;
        }
    }
    assert!(checked > 0);
}

#[test]
fn gradcheck_command_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = qfit(dir.path(), &["gradcheck"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("gradcheck.json")).unwrap()).unwrap();
    let cases = report.as_array().unwrap();
    assert!(cases.iter().all(|c| c["passed"] == true));
    assert!(cases.iter().any(|c| c["name"] == "network_head_9_blocks"));
}

#[test]
fn experiment_rerun_is_byte_identical() {
    let args = [
        "--set",
        "phantom.size=16",
        "--set",
        "seeds.noise=[2,5]",
        "--set",
        "relaxometry.base_width=4",
        "--set",
        "relaxometry.n_residual_blocks=1",
        "--set",
        "relaxometry_training.iterations=15",
        "experiment-noise",
    ];
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert!(qfit(a.path(), &args).status.success());
    assert!(qfit(b.path(), &args).status.success());
    let mut names: Vec<_> = fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.iter().any(|n| n == "network_t2_seed5.qfit"));
    assert!(names.iter().any(|n| n == "report.json"));
    for n in &names {
        assert_eq!(fs::read(a.path().join(n)).unwrap(), fs::read(b.path().join(n)).unwrap(), "{n:?} differs");
    }
}
