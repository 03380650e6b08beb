use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_shape-taylor"));
    c.env("SHAPE_TAYLOR_WORKERS", "1");
    c
}

fn write_config(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
    let out = dir.join(format!("{name}-out"));
    let text = format!("{body}\n[output]\ndir = {:?}\n", out.to_str().unwrap());
    let path = dir.join(format!("{name}.toml"));
    std::fs::write(&path, text).unwrap();
    path
}

const COARSE: &str = r#"
[basis]
kind = "wavelet"
alpha = 2.5
theta = 0.05
max_level = 3

[fem]
h_boundary = 0.1

[greedy]
n_target = 5
"#;

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn smoke_run_emits_all_files_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "smoke", COARSE);
    let t = Instant::now();
    let o = run(&["run", "-c", cfg.to_str().unwrap()]);
    assert!(t.elapsed() < Duration::from_secs(60));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = dir.path().join("smoke-out");
    for f in ["runlog.csv", "decay.csv", "rate.json", "theory.json", "manifest.json"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let runlog = std::fs::read_to_string(out.join("runlog.csv")).unwrap();
    assert!(runlog.starts_with("iteration,multiindex,order,v_norm,step_kind\n0,0,0,"));
    assert_eq!(runlog.lines().count(), 6);
    let rate: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("rate.json")).unwrap()).unwrap();
    assert!(rate["s"].is_null() && rate["error"].is_string());
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["coefficient_count"], 5);
    assert_eq!(manifest["config"]["greedy"]["n_target"], 5);

    let first = std::fs::read(out.join("decay.csv")).unwrap();
    let o = run(&["run", "-c", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(std::fs::read(out.join("decay.csv")).unwrap(), first);
}

#[test]
fn manifest_rate_matches_rates_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let body = COARSE.replace("max_level = 3", "max_level = 4").replace("n_target = 5", "n_target = 60").replace("h_boundary = 0.1", "h_boundary = 0.2");
    let cfg = write_config(dir.path(), "fit", &body);
    let o = run(&["run", "-c", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = dir.path().join("fit-out");
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    let o = run(&["rates", "--input", out.join("runlog.csv").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rates: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(manifest["fitted_rate"].as_f64().is_some());
    assert_eq!(manifest["fitted_rate"].as_f64(), rates["s"].as_f64());
    let decay = std::fs::read_to_string(out.join("decay.csv")).unwrap();
    assert_eq!(decay.lines().count(), 61);
    assert!(decay.lines().nth(1).unwrap().split(',').all(|f| !f.is_empty()));
}

#[test]
fn invalid_alpha_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad", &COARSE.replace("alpha = 2.5", "alpha = 1.5"));
    let o = run(&["run", "-c", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("basis.alpha"));
    assert!(stderr(&o).contains("alpha must exceed 2"));

    let body = format!("{COARSE}\n[mapping]\nkind = \"harmonic\"\nr0 = {{ kind = \"trigonometric\", mean = 1.0, cos = [0.1], sin = [] }}\n");
    let cfg = write_config(dir.path(), "harm", &body);
    let o = run(&["run", "-c", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("mapping.r0"));

    let cfg = write_config(dir.path(), "typo", "[basis]\nalpah = 3.0\n");
    assert_eq!(run(&["run", "-c", cfg.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn sweep_two_by_two_emits_four_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tmpl", COARSE);
    let grid = dir.path().join("grid.toml");
    std::fs::write(&grid, "alpha = [2.5, 3.0]\ntheta = [0.04, 0.08]\n").unwrap();
    let o = run(&["sweep", "-c", cfg.to_str().unwrap(), "--grid", grid.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let table = std::fs::read_to_string(dir.path().join("tmpl-out/sweep.csv")).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.contains(",5,")));
    // One mesh and one cascade table serve all four cells.
    let stdout = String::from_utf8_lossy(&o.stdout);
    let hits: usize = stdout.rsplit("cache hits ").next().unwrap().trim().parse().unwrap();
    assert_eq!(hits, 6);
}

#[test]
fn auxiliary_commands() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "aux", COARSE);
    let c = cfg.to_str().unwrap();
    let off = dir.path().join("mesh.off");
    assert_eq!(run(&["mesh", "-c", c, "--out", off.to_str().unwrap()]).status.code(), Some(0));
    assert!(std::fs::read_to_string(&off).unwrap().starts_with("OFF\n"));

    let o = run(&["bounds", "-c", c]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["predicted_rate"].as_f64(), Some(2.0));

    let o = run(&["derivative", "-c", c, "--kappa", "1:1,2:1", "--x", "0.3", "-0.2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let d: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(d["d_a"][0][1], d["d_a"][1][0]);

    let field = dir.path().join("field.csv");
    let o = run(&["mapping-field", "-c", c, "--y", "1:1,2:-1", "--rings", "3", "--angles", "8", "--out", field.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(&field).unwrap().lines().count(), 1 + 1 + 24);

    let missing = dir.path().join("nope.csv");
    assert_eq!(run(&["rates", "--input", missing.to_str().unwrap()]).status.code(), Some(2));
}
