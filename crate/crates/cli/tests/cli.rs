use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pbrl_core::harness::RunConfig;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn pbrl(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pbrl"))
        .args(args)
        .current_dir(cwd)
        .env_remove("PBRL_OUT_ROOT")
        .output()
        .expect("binary runs")
}

fn run_config(config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["run", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    pbrl(&args, out.parent().unwrap())
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

const STANDARD: &str = r#"schema_version = 1
experiment = "standard"
seed = 4

[solver]
sigma = 0.2
sigma0 = 1.0
eta = ETA
tau = 0.01
tau_prime = 0.01
k = 10
t = 12
n = 1
b = 4
h = 1
gamma = 0.9
beta = 0.0

[standard]
instance = "quad"
noise_g = 0.5
noise_j = 0.5
"#;

#[test]
fn lemma_csv_has_steps_plus_two_lines() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("lemma");
    let o = run_config(&configs().join("lemma1.toml"), &out, &["--no-plots"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("lemma.csv")).unwrap();
    let cfg = RunConfig::parse(&fs::read_to_string(configs().join("lemma1.toml")).unwrap()).unwrap();
    let steps = cfg.lemma1.unwrap().steps;
    assert_eq!(csv.lines().count(), steps + 2);
    assert_eq!(csv.lines().next(), Some("step,gap,envelope"));
    assert!(csv.lines().last().unwrap().starts_with("floor,"));
}

#[test]
fn identical_config_and_seed_give_identical_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    for config in ["standard_quad.toml", "lemma1.toml"] {
        let a = tmp.path().join(format!("a-{config}"));
        let b = tmp.path().join(format!("b-{config}"));
        assert!(run_config(&configs().join(config), &a, &[]).status.success());
        assert!(run_config(&configs().join(config), &b, &[]).status.success());
        for entry in fs::read_dir(&a).unwrap() {
            let name = entry.unwrap().file_name();
            if name == "manifest.toml" {
                continue;
            }
            assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap(), "{name:?} differs");
        }
    }
}

#[test]
fn brl_run_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let body = fs::read_to_string(configs().join("brl_chain.toml"))
        .unwrap()
        .replace("t = 200", "t = 4")
        .replace("heldout_pairs = 2000", "heldout_pairs = 200");
    let cfg = write_config(tmp.path(), "brl.toml", &body);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert!(run_config(&cfg, &a, &["--no-plots"]).status.success());
    assert!(run_config(&cfg, &b, &["--no-plots"]).status.success());
    for f in ["record.csv", "metrics.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
    }
}

#[test]
fn sweep_fans_out_into_children_and_aggregate() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sweep");
    let o = pbrl(
        &["sweep", "--config", configs().join("sweep_b.toml").to_str().unwrap(), "--out", out.to_str().unwrap()],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let children: Vec<_> = fs::read_dir(&out).unwrap().filter_map(|e| e.ok()).filter(|e| e.path().is_dir()).collect();
    assert_eq!(children.len(), 3);
    for c in &children {
        assert!(c.path().join("record.csv").exists());
    }
    let agg = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(agg.lines().count(), 4);
    let bs: Vec<&str> = agg.lines().skip(1).map(|l| l.split(',').nth(2).unwrap()).collect();
    assert_eq!(bs, ["8", "64", "512"]);
}

#[test]
fn sweep_verb_rejects_non_sweep_config() {
    let tmp = tempfile::tempdir().unwrap();
    let o = pbrl(&["sweep", "--config", configs().join("lemma1.toml").to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_default_suite_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("gc");
    let o = pbrl(
        &["gradcheck", "--config", configs().join("gradcheck.toml").to_str().unwrap(), "--out", out.to_str().unwrap()],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    for name in pbrl_core::harness::OBJECTIVES {
        assert!(text.contains(name), "missing {name}");
    }
}

#[test]
fn corrupted_gradient_fails_and_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("gc");
    let o = pbrl(
        &[
            "gradcheck",
            "--config",
            configs().join("gradcheck_corrupt.toml").to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("grad_phi_J_exact"));
    assert!(!stderr(&o).contains("grad_phi_G"));
}

#[test]
fn tolerance_override_is_honored() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "tight.toml",
        "schema_version = 1\nexperiment = \"gradcheck\"\n\n[gradcheck]\nobjectives = [\"quad_G\"]\ntolerance = 1e-30\n",
    );
    let out = tmp.path().join("gc");
    let o = pbrl(&["gradcheck", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()], tmp.path());
    assert!(stdout(&o).contains("tol 1.0e-30"));
    assert_eq!(o.status.code(), Some(1));
    let csv = fs::read_to_string(out.join("gradcheck.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn invalid_config_exits_two_with_line() {
    let tmp = tempfile::tempdir().unwrap();
    let body = STANDARD.replace("ETA", "0.1").replace("noise_j = 0.5", "noise_j = 0.5\nnoise_k = 1.0");
    let cfg = write_config(tmp.path(), "bad.toml", &body);
    let o = pbrl(&["run", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    let line = body.lines().position(|l| l.starts_with("noise_k")).unwrap() + 1;
    assert!(stderr(&o).contains(&format!("line {line}")), "{}", stderr(&o));
    assert!(fs::read_dir(tmp.path()).unwrap().count() == 1, "nothing may be written");
}

#[test]
fn semantic_error_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "bad.toml", &STANDARD.replace("ETA", "0.1").replace("b = 4", "b = 0"));
    let o = pbrl(&["run", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn missing_config_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let o = pbrl(&["run", "--config", "does-not-exist.toml"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn divergence_exits_one_with_partial_record() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "div.toml", &STANDARD.replace("ETA", "1e200"));
    let out = tmp.path().join("div");
    let o = run_config(&cfg, &out, &["--no-plots"]);
    assert_eq!(o.status.code(), Some(1), "{}", stdout(&o));
    let record = fs::read_to_string(out.join("record.csv")).unwrap();
    let rows = record.lines().count() - 1;
    assert!(rows >= 1 && rows < 12, "rows {rows}");
    assert!(!out.join(".lock").exists());
}

#[test]
fn report_flags_stationary_phi_and_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "eta0.toml", &STANDARD.replace("ETA", "0.0"));
    let out = tmp.path().join("eta0");
    assert!(run_config(&cfg, &out, &[]).status.success());
    let first = pbrl(&["report", out.to_str().unwrap()], tmp.path());
    assert!(first.status.success(), "{}", stderr(&first));
    assert!(stdout(&first).contains("φ stationary"));
    let snapshot: Vec<_> = {
        let mut v: Vec<_> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().path()).collect();
        v.sort();
        v.into_iter().map(|p| (p.clone(), fs::read(&p).unwrap())).collect()
    };
    let second = pbrl(&["report", out.to_str().unwrap()], tmp.path());
    assert_eq!(stdout(&first), stdout(&second));
    for (path, bytes) in snapshot {
        assert_eq!(fs::read(&path).unwrap(), bytes, "{path:?} changed");
    }
}

#[test]
fn report_on_moving_run_does_not_flag_stationary() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "run.toml", &STANDARD.replace("ETA", "0.1"));
    let out = tmp.path().join("run");
    assert!(run_config(&cfg, &out, &["--no-plots"]).status.success());
    let o = pbrl(&["report", out.to_str().unwrap(), "--no-plots"], tmp.path());
    assert!(!stdout(&o).contains("stationary"));
    assert!(stdout(&o).contains("B*K*T + B*T = 528 (match)"), "{}", stdout(&o));
}

#[test]
fn report_sample_line_matches_brl_formula() {
    let tmp = tempfile::tempdir().unwrap();
    let body = fs::read_to_string(configs().join("brl_chain.toml"))
        .unwrap()
        .replace("t = 200", "t = 3")
        .replace("heldout_pairs = 2000", "heldout_pairs = 0");
    let cfg = write_config(tmp.path(), "brl.toml", &body);
    let out = tmp.path().join("brl");
    assert!(run_config(&cfg, &out, &["--no-plots"]).status.success());
    let o = pbrl(&["report", out.to_str().unwrap(), "--no-plots"], tmp.path());
    let (n, k, b, h, t) = (50u64, 20u64, 100u64, 20u64, 3u64);
    let expected = n * k * t + b * k * h * t + b * h * t;
    let line = format!("n*K*T + B*K*H*T + B*H*T = {expected} (match)");
    assert!(stdout(&o).contains(&line), "{}", stdout(&o));
}

#[test]
fn report_on_missing_csv_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "run.toml", &STANDARD.replace("ETA", "0.1"));
    let out = tmp.path().join("run");
    assert!(run_config(&cfg, &out, &["--no-plots"]).status.success());
    fs::remove_file(out.join("record.csv")).unwrap();
    assert_eq!(pbrl(&["report", out.to_str().unwrap()], tmp.path()).status.code(), Some(1));
    fs::write(out.join("record.csv"), "garbage\n1,2\n").unwrap();
    assert_eq!(pbrl(&["report", out.to_str().unwrap()], tmp.path()).status.code(), Some(1));
}

#[test]
fn manifest_echo_round_trips_with_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("m");
    assert!(run_config(&configs().join("standard_quad.toml"), &out, &["--seed", "99", "--no-plots"]).status.success());
    let manifest = fs::read_to_string(out.join("manifest.toml")).unwrap();
    let cfg = RunConfig::parse(&manifest).unwrap();
    assert_eq!(cfg.seed, 99);
    assert_eq!(RunConfig::parse(&cfg.to_toml().unwrap()).unwrap(), cfg);
}

#[test]
fn seed_override_changes_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert!(run_config(&configs().join("standard_quad.toml"), &a, &["--seed", "1"]).status.success());
    assert!(run_config(&configs().join("standard_quad.toml"), &b, &["--seed", "2"]).status.success());
    assert_ne!(fs::read(a.join("record.csv")).unwrap(), fs::read(b.join("record.csv")).unwrap());
}

#[test]
fn locked_directory_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("locked");
    fs::create_dir_all(&out).unwrap();
    fs::write(out.join(".lock"), "1").unwrap();
    let o = run_config(&configs().join("standard_quad.toml"), &out, &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("in use"));
}

#[test]
fn writes_stay_inside_the_output_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let work = tmp.path().join("work");
    fs::create_dir(&work).unwrap();
    let o = pbrl(&["run", "--config", configs().join("brl_chain.toml").to_str().unwrap(), "--out", "only"], &work);
    assert!(o.status.success(), "{}", stderr(&o));
    let entries: Vec<_> = fs::read_dir(&work).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(entries, ["only"]);
}

#[test]
fn default_output_root_comes_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_pbrl"))
        .args(["run", "--config", configs().join("standard_quad.toml").to_str().unwrap(), "--no-plots"])
        .current_dir(tmp.path())
        .env("PBRL_OUT_ROOT", tmp.path().join("root"))
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(tmp.path().join("root/standard-1/record.csv").exists());
}

#[test]
fn buffer_mode_persists_pairs() {
    let tmp = tempfile::tempdir().unwrap();
    let body = fs::read_to_string(configs().join("brl_chain.toml"))
        .unwrap()
        .replace("t = 200", "t = 3")
        .replace("heldout_pairs = 2000", "heldout_pairs = 0")
        .replace("initial_pairs = 500", "initial_pairs = 10")
        .replace("refresh_count = 20", "refresh_count = 5");
    assert!(body.contains("pair_mode = \"buffer\""));
    let cfg = write_config(tmp.path(), "buf.toml", &body);
    let out = tmp.path().join("buf");
    let o = run_config(&cfg, &out, &["--no-plots"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let pairs = fs::read_to_string(out.join("pairs.txt")).unwrap();
    assert_eq!(pairs.lines().filter(|l| !l.starts_with('#')).count(), 10 + 3 * 5);
}
