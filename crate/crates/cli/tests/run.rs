use std::fs;
use std::path::Path;
use std::process::Command as Process;

use serde_json::Value;
use singular_lq_cli::{parse_config, run, Command, RunConfig};
use tempfile::TempDir;

const COTH1: f64 = 1.3130352854993312;

fn coth_config(steps: usize) -> RunConfig {
    parse_config(&format!(
        r#"
dimension = 1
steps = {steps}
epsilon = 0.1
[coefficients]
eta = {{ kind = "constant", value = 1.0 }}
lambda = {{ kind = "constant", value = 1.0 }}
[terminal]
xi = {{ kind = "identity" }}
"#
    ))
    .unwrap()
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(String::from).collect())
        .collect();
    (header, rows)
}

fn num(s: &str) -> f64 {
    s.parse().unwrap()
}

fn report(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

#[test]
fn singular_coth_csv() {
    let out = TempDir::new().unwrap();
    let outcome = run(&coth_config(2000), Command::Singular, out.path()).unwrap();
    assert!(outcome.success());
    let (header, rows) = read_csv(&out.path().join("y_field.csv"));
    assert_eq!(header, ["t", "node", "Y_11", "upper_bound", "lower_bound"]);
    assert_eq!(rows.len(), 1801);
    assert_eq!(rows[0][0], "0.0000000000000000e0");
    assert_eq!(rows[0][1], "0");
    let y0 = num(&rows[0][2]);
    assert!((y0 - COTH1).abs() < 1e-4, "{y0}");
    for row in &rows {
        let (y, up, lo) = (num(&row[2]), num(&row[3]), num(&row[4]));
        assert!(lo <= y && y <= up, "{row:?}");
    }
    // 17 significant digits in every float cell
    let mantissa = rows[0][2].split('e').next().unwrap();
    assert_eq!(mantissa.replace(['.', '-'], "").len(), 17);
    let r = report(out.path());
    assert_eq!(r["status"], "ok");
    assert_eq!(r["command"], "singular");
    assert_eq!(r["audit"]["failures"], 0);
    assert!(r["config"]["epsilon"].as_f64().unwrap() == 0.1);
    assert!(!fs::read_to_string(out.path().join("report.json"))
        .unwrap()
        .contains("seconds"));
}

#[test]
fn outputs_are_deterministic() {
    let config = coth_config(200);
    for command in [Command::Singular, Command::Control, Command::Expansion] {
        let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
        let first = run(&config, command, a.path()).unwrap();
        run(&config, command, b.path()).unwrap();
        assert!(first.files.len() >= 2);
        for f in &first.files {
            let name = f.file_name().unwrap();
            assert_eq!(
                fs::read(a.path().join(name)).unwrap(),
                fs::read(b.path().join(name)).unwrap(),
                "{command:?} {name:?}"
            );
        }
    }
}

#[test]
fn umi_tree_matches_eta_over_remaining_time() {
    let text = r#"
dimension = 1
steps = 64
depth = 4
[coefficients]
eta = { kind = "martingale", eta0 = 1.5, up = 1.2, down = 0.8 }
[control]
x0 = [2.0]
"#;
    let out = TempDir::new().unwrap();
    let outcome = run(&parse_config(text).unwrap(), Command::Umi, out.path()).unwrap();
    assert!(outcome.success());
    let (header, rows) = read_csv(&out.path().join("y_field.csv"));
    assert_eq!(header, ["t", "node", "Y_11"]);
    let mut per_point = [0usize; 64];
    for row in &rows {
        let (t, node, y) = (num(&row[0]), num(&row[1]) as i32, num(&row[2]));
        let p = (t * 64.0).round() as usize;
        per_point[p] += 1;
        let k = (p / 16) as i32;
        let eta = 1.5 * 1.2f64.powi(node) * 0.8f64.powi(k - node);
        let exact = eta / (1.0 - t);
        assert!(
            (y - exact).abs() < 1e-12 * exact,
            "t {t} node {node}: {y} vs {exact}"
        );
    }
    for (p, n) in per_point.iter().enumerate() {
        assert_eq!(*n, p / 16 + 1);
    }
    let r = report(out.path());
    // value 4 η₀ / T = 6, reproduced by the deterministic control
    let umi = &r["results"]["umi"];
    assert!((umi["value"].as_f64().unwrap() - 6.0).abs() < 1e-12);
    assert!((umi["realized_cost"].as_f64().unwrap() - 6.0).abs() < 1e-10);
    let (sh, srows) = read_csv(&out.path().join("strategy.csv"));
    assert_eq!(sh, ["t", "node", "X_1", "u_1"]);
    assert!((num(&srows[0][2]) - 2.0).abs() < 1e-15);
}

#[test]
fn umi_rejects_running_costs() {
    let out = TempDir::new().unwrap();
    let err = run(&coth_config(100), Command::Umi, out.path()).unwrap_err();
    assert!(err.to_string().starts_with("umi: "), "{err}");
}

#[test]
fn audit_passes_on_converged_runs() {
    let text = r#"
dimension = 2
steps = 200
epsilon = 0.05
schedule_max = 30
[coefficients]
eta = { kind = "constant", value = [[2.0, 0.3], [0.3, 1.0]] }
lambda = { kind = "constant", value = 0.5 }
[terminal]
xi = { kind = "projector", vectors = [[1.0, 0.0]] }
[tolerances]
ladder_tol = 1e-6
"#;
    let out = TempDir::new().unwrap();
    let outcome = run(&parse_config(text).unwrap(), Command::Audit, out.path()).unwrap();
    assert!(outcome.success(), "{:?}", outcome.failures);
    let audit: Value =
        serde_json::from_str(&fs::read_to_string(out.path().join("audit.json")).unwrap()).unwrap();
    assert_eq!(audit["failures"], 0);
    assert_eq!(audit["upper"]["status"], "pass");
    // ξ is singular, so the lower bound does not apply
    assert_eq!(audit["lower"]["status"], "not_applicable");
    assert_eq!(audit["entries"].as_array().unwrap().len(), 191);
    let (header, _) = read_csv(&out.path().join("y_field.csv"));
    assert_eq!(
        header,
        [
            "t",
            "node",
            "Y_11",
            "Y_12",
            "Y_22",
            "upper_bound_11",
            "upper_bound_12",
            "upper_bound_22",
            "lower_bound_11",
            "lower_bound_12",
            "lower_bound_22"
        ]
    );
}

#[test]
fn control_reports_constraint_and_benchmark() {
    let out = TempDir::new().unwrap();
    let outcome = run(&coth_config(400), Command::Control, out.path()).unwrap();
    assert!(outcome.success(), "{:?}", outcome.failures);
    let r = report(out.path());
    let c = &r["results"]["control"];
    assert!(c["verify"]["kernel_pass"].as_bool().unwrap());
    assert!(c["verify"]["value_gap"].as_f64().unwrap() < 1e-3);
    let bench = c["benchmark_cost"].as_f64().unwrap();
    assert!((bench - 4.0 / 3.0).abs() < 1e-12);
    assert!(bench >= c["verify"]["value"].as_f64().unwrap());
    let (header, rows) = read_csv(&out.path().join("strategy.csv"));
    assert_eq!(header, ["t", "node", "X_1", "u_1"]);
    assert_eq!(rows.len(), 361);
}

#[test]
fn tree_runs_have_z_columns() {
    let text = r#"
dimension = 1
steps = 32
depth = 4
epsilon = 0.125
[coefficients]
eta = { kind = "additive", eta0 = 2.0, vol = 0.3 }
"#;
    let out = TempDir::new().unwrap();
    run(&parse_config(text).unwrap(), Command::Solve, out.path()).unwrap();
    let (header, rows) = read_csv(&out.path().join("y_field.csv"));
    assert_eq!(
        header,
        ["t", "node", "Y_11", "Z_11", "upper_bound", "lower_bound"]
    );
    let last = rows.last().unwrap();
    assert_eq!(num(&last[0]), 1.0);
    assert_eq!(last[1], "4");
}

fn bin() -> Process {
    Process::new(env!("CARGO_BIN_EXE_singular-lq"))
}

#[test]
fn binary_exit_codes() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, coth_config(100).to_toml()).unwrap();
    let out = dir.path().join("out");
    let status = bin()
        .args(["singular", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .args(["--epsilon", "0.2", "--schedule-max", "24", "--threads", "2"])
        .output()
        .unwrap();
    assert!(status.status.success());
    assert!(String::from_utf8_lossy(&status.stdout).contains("y_field.csv"));
    let r = report(&out);
    assert_eq!(r["config"]["epsilon"].as_f64(), Some(0.2));
    assert_eq!(r["config"]["schedule_max"], 24);
    assert!(out.join("timings.json").exists());

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "dimension = 1\nsteps = 10\n[coefficients]\neta = { kind = \"constant\", value = 1.0 }\nbogus = 1\n").unwrap();
    let o = bin()
        .args(["solve", "--config"])
        .arg(&bad)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus"));

    let o = bin()
        .args(["solve", "--config"])
        .arg(&cfg)
        .args(["--epsilon", "3.0"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("epsilon"));

    let o = bin()
        .args(["selftest", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(!o.status.success());

    let o = bin()
        .args(["singular", "--config"])
        .arg(&cfg)
        .args(["--threads", "0"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}
