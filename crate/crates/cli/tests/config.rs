use std::fs;
use std::path::Path;

use singular_lq_cli::config::{EtaSpec, MatrixValue, TerminalSpec};
use singular_lq_cli::{parse_config, Command, ConfigError};

const MINIMAL: &str = r#"
command = "singular"
dimension = 1

[coefficients]
eta = { kind = "constant", value = 1 }

[terminal]
xi = { kind = "identity" }
"#;

fn field_paths(err: &ConfigError) -> Vec<String> {
    err.field_errors().iter().map(|e| e.path.clone()).collect()
}

fn with(extra_top: &str, rest: &str) -> String {
    format!("{extra_top}\ndimension = 2\n[coefficients]\neta = {{ kind = \"constant\", value = 1.0 }}\n{rest}")
}

#[test]
fn minimal_scalar_config_fills_defaults() {
    let c = parse_config(MINIMAL).unwrap();
    assert_eq!(c.command, Some(Command::Singular));
    assert_eq!(c.dimension, 1);
    assert_eq!(c.horizon, 1.0);
    assert_eq!(c.steps, 1000);
    assert_eq!(c.depth, 0);
    assert_eq!(c.epsilon, Some(0.05));
    assert_eq!(c.schedule, None);
    assert_eq!(c.schedule_max, 20);
    assert_eq!(c.schedule_values().len(), 21);
    assert_eq!(c.tolerances.ode_tol, 1e-9);
    assert_eq!(c.tolerances.psd_tol, 1e-10);
    assert_eq!(c.tolerances.ladder_tol, 1e-3);
    assert_eq!(c.terminal.theta, TerminalSpec::Zero);
    assert_eq!(
        c.coefficients.eta,
        EtaSpec::Constant {
            value: MatrixValue::Scalar(1.0)
        }
    );
    assert_eq!(c.output.dir, "out");
    let (coeffs, generated) = c.model().unwrap();
    assert!(generated.is_none());
    assert!(coeffs.is_deterministic());
    assert_eq!(coeffs.xi(0).get(0, 0), 1.0);
}

#[test]
fn schedule_must_increase() {
    let text = format!("schedule = [4.0, 2.0]\n{MINIMAL}");
    let err = parse_config(&text).unwrap_err();
    assert_eq!(field_paths(&err), ["schedule"]);
    assert_eq!(
        err.field_errors()[0].message,
        "schedule not strictly increasing"
    );
    let ok = parse_config(&format!("schedule = [1.0, 10.0, 100.0]\n{MINIMAL}")).unwrap();
    assert_eq!(ok.schedule_values(), [1.0, 10.0, 100.0]);
}

#[test]
fn projector_vector_dimension_is_checked() {
    let text = with(
        "",
        "[terminal]\nxi = { kind = \"projector\", vectors = [[1.0, 0.0, 0.0]] }",
    );
    let err = parse_config(&text).unwrap_err();
    assert_eq!(field_paths(&err), ["terminal.xi.vectors[0]"]);
    assert!(err.field_errors()[0].message.contains("dimension mismatch"));
}

#[test]
fn unknown_keys_are_rejected() {
    for text in [
        format!("epsilom = 0.1\n{MINIMAL}"),
        MINIMAL.replace("[terminal]", "[terminal]\nzeta = { kind = \"zero\" }"),
        MINIMAL.replace("value = 1 }", "value = 1, scale = 2 }"),
        format!("{MINIMAL}\n[tolerances]\node_tole = 1e-8\n"),
        format!("{MINIMAL}\n[output]\npath = \"x\"\n"),
    ] {
        match parse_config(&text) {
            Err(ConfigError::Syntax(msg)) => assert!(msg.contains("unknown"), "{msg}"),
            other => panic!("accepted misspelled key: {other:?}"),
        }
    }
}

#[test]
fn type_mismatches_are_syntax_errors() {
    let text = MINIMAL.replace("dimension = 1", "dimension = \"one\"");
    assert!(matches!(parse_config(&text), Err(ConfigError::Syntax(_))));
    let text = MINIMAL.replace("\"identity\"", "\"diagonal\"");
    assert!(matches!(parse_config(&text), Err(ConfigError::Syntax(_))));
}

#[test]
fn invariant_violations_carry_paths() {
    let text = with(
        "epsilon = 1.5\nsteps = 10\ndepth = 3",
        "lambda = { kind = \"constant\", value = [[1.0, 2.0], [0.0, 1.0]] }\n\
         phi = { kind = \"piecewise\", breaks = [0.7, 0.2], values = [0.0, 0.0] }\n\
         [tolerances]\nladder_tol = 0.0\npsd_tol = -1.0\n\
         [control]\nx0 = [1.0]\nt0 = 1.0\n",
    );
    let err = parse_config(&text).unwrap_err();
    let mut paths = field_paths(&err);
    paths.sort();
    assert_eq!(
        paths,
        [
            "coefficients.lambda.value",
            "coefficients.phi.breaks",
            "coefficients.phi.values",
            "control.t0",
            "control.x0",
            "depth",
            "epsilon",
            "tolerances.ladder_tol",
            "tolerances.psd_tol",
        ]
    );
    let shown = err.to_string();
    assert!(
        shown.contains("epsilon: must lie in (0, horizon)"),
        "{shown}"
    );
}

#[test]
fn matrix_shape_errors() {
    let text = with("", "a = { kind = \"constant\", value = [[1.0, 0.0]] }");
    let err = parse_config(&text).unwrap_err();
    assert_eq!(field_paths(&err), ["coefficients.a.value"]);
    assert!(err.field_errors()[0].message.contains("2x2"));
    // drift and cross terms need not be symmetric
    let text = with(
        "",
        "a = { kind = \"constant\", value = [[0.0, 1.0], [-1.0, 0.0]] }",
    );
    parse_config(&text).unwrap();
}

#[test]
fn generator_parameters_are_checked() {
    let text = "dimension = 1\nsteps = 8\ndepth = 4\n[coefficients]\n\
                eta = { kind = \"martingale\", eta0 = 1.0, up = 1.5, down = 0.7 }\n";
    let err = parse_config(text).unwrap_err();
    assert_eq!(field_paths(&err), ["coefficients.eta.up"]);
    let text = text.replace("0.7", "0.5");
    let c = parse_config(&text).unwrap();
    let (coeffs, generated) = c.model().unwrap();
    assert!(!coeffs.is_deterministic());
    assert!(generated.is_some());
}

#[test]
fn round_trip_is_identity() {
    let full = r#"
command = "control"
dimension = 2
horizon = 2.0
steps = 40
depth = 4
epsilon = 0.2
schedule = [1.0, 4.0, 16.0]
schedule_max = 12

[coefficients]
eta = { kind = "drift", eta0 = [[2.0, 0.1], [0.1, 1.0]], up = 1.1, down = 0.9, g = [[0.1, 0.0], [0.0, 0.2]] }
lambda = { kind = "piecewise", breaks = [0.5, 1.5], values = [0.0, [[1.0, 0.5], [0.5, 1.0]], 2] }
phi = { kind = "constant", value = [[0.1, 0.2], [0.3, 0.4]] }
delta = 0.5
k_bound = 3.0

[terminal]
theta = { kind = "explicit", value = [[1.0, 0.0], [0.0, 2.0]] }
xi = { kind = "projector", vectors = [[1.0, 1.0]] }

[tolerances]
ode_tol = 1e-8
psd_tol = 1e-9
ladder_tol = 1e-4
monotone_tol = 1e-7

[control]
x0 = [1.0, -2.0]
t0 = 0.5

[output]
dir = "results/full"
"#;
    let mut texts = vec![MINIMAL.to_string(), full.to_string()];
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut names: Vec<_> = fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    names.sort();
    for p in names
        .iter()
        .filter(|p| p.extension().is_some_and(|e| e == "toml"))
    {
        texts.push(fs::read_to_string(p).unwrap());
    }
    assert!(texts.len() >= 5);
    for text in texts {
        let once = parse_config(&text).unwrap();
        let serialized = once.to_toml();
        let twice = parse_config(&serialized).unwrap();
        assert_eq!(once, twice, "{serialized}");
        assert_eq!(serialized, twice.to_toml());
    }
}
