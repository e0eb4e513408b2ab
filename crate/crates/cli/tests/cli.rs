use std::path::Path;
use std::process::{Command, Output};

fn chmc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chmc")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("cfg.toml");
    std::fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

fn body(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap()
}

const HEATMAP_1X1: &str = r#"
schema_version = 1
chains = 2
sigmas = [0.1]
eps = [0.2]
[chain]
n_main = 30
[[samplers]]
id = "chmc"
"#;

const SWEEP_TINY: &str = r#"
schema_version = 1
chains = 2
seed_sets = 2
sigmas = [0.5, 0.1]
[chain]
n_warmup = 40
n_main = 40
[[samplers]]
id = "chmc"
[[samplers]]
id = "hmc"
"#;

#[test]
fn heatmap_smoke_writes_one_row_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), HEATMAP_1X1);
    let out = dir.path().join("out");
    let o = chmc(&["heatmap", "--config", &cfg, "--out-dir", out.to_str().unwrap(), "--workers", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = body(&out.join("heatmap.csv"));
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "# schema_version=1");
    assert_eq!(lines[1], "sampler,sigma,eps,mean_accept,reject_reason_counts");
    assert_eq!(lines.len(), 3);
    assert!(lines[2].starts_with("chmc,0.1,0.2,"));
    assert!(lines[2].contains("metropolis="));
    let side: serde_json::Value = serde_json::from_str(&body(&out.join("heatmap.json"))).unwrap();
    assert_eq!(side["schema_version"], 1);
    assert_eq!(side["details"]["start_points"].as_array().unwrap().len(), 2);
}

#[test]
fn reruns_are_byte_identical_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SWEEP_TINY);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for (d, w) in [(&a, "1"), (&b, "3")] {
        let o = chmc(&["ess-sweep", "--config", &cfg, "--out-dir", d.to_str().unwrap(), "--workers", w, "--seed", "5"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let (ta, tb) = (body(&a.join("ess_sweep.csv")), body(&b.join("ess_sweep.csv")));
    assert_eq!(ta, tb);
    // 2 samplers x 2 sigmas x 2 seed sets, plus schema line and header.
    assert_eq!(ta.lines().count(), 10);
    assert!(b.join("ess_sweep_timing.csv").exists());
    let side: serde_json::Value = serde_json::from_str(&body(&b.join("ess_sweep.json"))).unwrap();
    assert_eq!(side["config"]["seed"], 5);
    assert_eq!(side["workers"], 3);
}

#[test]
fn seed_changes_the_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), HEATMAP_1X1);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for (d, s) in [(&a, "1"), (&b, "2")] {
        assert!(chmc(&["heatmap", "--config", &cfg, "--out-dir", d.to_str().unwrap(), "--seed", s]).status.success());
    }
    assert_ne!(body(&a.join("heatmap.csv")), body(&b.join("heatmap.csv")));
}

#[test]
fn sample_writes_draws_and_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "schema_version = 1\nchains = 2\n[chain]\nn_warmup = 30\nn_main = 25\n[[samplers]]\nid = \"mala\"\n",
    );
    let out = dir.path().join("s");
    let o = chmc(&["sample", "--config", &cfg, "--out-dir", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let draws = body(&out.join("draws.csv"));
    assert_eq!(draws.lines().count(), 2 + 2 * 25);
    assert!(draws.lines().nth(1).unwrap().starts_with("chain,draw,theta0,theta1,accept_prob"));
    let diag = body(&out.join("diagnostics.csv"));
    assert_eq!(diag.lines().count(), 2 + 2);
    assert!(out.join("sample.json").exists());
}

#[test]
fn shipped_models_validate() {
    let dir = tempfile::tempdir().unwrap();
    let o = chmc(&["validate", "--model", "all", "--out-dir", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}\n{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr));
    let csv = body(&dir.path().join("validate.csv"));
    for id in ["toy", "linear_gaussian", "ssm", "fhn"] {
        assert!(csv.lines().any(|l| l.starts_with(id)), "{id}");
    }
    assert!(!csv.contains(",false"));
}

#[test]
fn corrupted_jacobian_fails_validation() {
    let dir = tempfile::tempdir().unwrap();
    let o = chmc(&["validate", "--model", "toy", "--inject-fault", "jacobian", "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("jacobian: analytic vs ad"));
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(chmc(&["validate", "--model", ""]).status.code(), Some(2));
    assert_eq!(chmc(&["validate", "--model", "nope"]).status.code(), Some(2));
    assert_eq!(chmc(&["heatmap"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "schema_version = 9\n");
    assert_eq!(chmc(&["heatmap", "--config", &cfg]).status.code(), Some(2));
    let cfg = write_config(dir.path(), "schema_version = 1\nchains = 2\nchain_seeds = [3, 3]\n");
    assert_eq!(chmc(&["sample", "--config", &cfg]).status.code(), Some(2));
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let mut n = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        chmc_cli::ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        n += 1;
    }
    assert!(n >= 3);
}

#[test]
fn book_config_example_parses() {
    let chapter = body(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../book/src/cli.md"));
    let block = chapter.split("```toml\n").nth(1).and_then(|rest| rest.split("```").next()).expect("toml block");
    let cfg = chmc_cli::ExperimentConfig::from_toml(block).unwrap();
    cfg.validate().unwrap();
    assert_eq!(cfg.samplers.len(), 2);
}
