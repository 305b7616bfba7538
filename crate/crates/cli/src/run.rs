//! Pipelines behind each command.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DVector;
use serde_json::{json, Value};
use singular_lq::closedform::{solve_expansion, umi_control, umi_value, ClosedFormError};
use singular_lq::coeffmodel::{
    validate, AssumptionReport, CoefficientSet, CoefficientSource, ItoEtaSpec, ModelError,
};
use singular_lq::control::{benchmark_linear, synthesize, verify, ControlError, Strategy};
use singular_lq::matcore::SymMatrix;
use singular_lq::riccati::{
    audit_bounds, penalized_ladder, singular_limit, solve_ode, solve_tree, AuditEntry, BoundAudit,
    Ladder, LadderOptions, OdeSettings, PenalizationIndex, RiccatiError, RiccatiSolution,
    SolverKind,
};

use crate::config::{Command, ConfigError, RunConfig};
use crate::output::{upper_names, write_json, Cell, Table};

/// Largest relative gap between realized cost and value accepted by `control`.
pub const VALUE_GAP_TOL: f64 = 1e-3;
/// Slack of the benchmark-dominance check in `control`.
pub const DOMINANCE_TOL: f64 = 1e-8;

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("coeffmodel: {0}")]
    Model(#[from] ModelError),
    #[error("riccati: {0}")]
    Riccati(#[from] RiccatiError),
    #[error("closedform: {0}")]
    ClosedForm(#[from] ClosedFormError),
    #[error("control: {0}")]
    Control(#[from] ControlError),
    #[error("output: {0}")]
    Io(#[from] std::io::Error),
    #[error("{command}: {reason}")]
    Unsupported {
        command: &'static str,
        reason: String,
    },
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: Value,
    pub files: Vec<PathBuf>,
    /// Failed hard assertions; empty on success.
    pub failures: Vec<String>,
    /// Wall-clock seconds per stage, kept out of the deterministic outputs.
    pub timings: Vec<(String, f64)>,
}

impl RunOutcome {
    pub fn success(&self) -> bool {
        self.failures.is_empty()
    }
}

struct Timer {
    start: Instant,
    stages: Vec<(String, f64)>,
}

impl Timer {
    fn new() -> Self {
        Timer {
            start: Instant::now(),
            stages: Vec::new(),
        }
    }

    fn lap(&mut self, stage: &str) {
        let now = Instant::now();
        self.stages
            .push((stage.to_string(), (now - self.start).as_secs_f64()));
        self.start = now;
    }
}

/// Everything a command leaves behind before the report is assembled.
#[derive(Default)]
struct Artifacts {
    results: serde_json::Map<String, Value>,
    audit: Option<BoundAudit>,
    field: Option<RiccatiSolution>,
    y_table: Option<Table>,
    strategy_table: Option<Table>,
    failures: Vec<String>,
}

struct Context<'a> {
    config: &'a RunConfig,
    coeffs: CoefficientSet,
    settings: OdeSettings,
    solver: SolverKind,
}

/// Runs `command` (anything but `selftest`) and writes its files into `out`.
pub fn run(config: &RunConfig, command: Command, out: &Path) -> Result<RunOutcome, RunError> {
    if command == Command::Selftest {
        return Err(RunError::Unsupported {
            command: "selftest",
            reason: "takes no config".into(),
        });
    }
    config.validate()?;
    let mut timer = Timer::new();
    let (coeffs, _) = config.model()?;
    let ito = ItoEtaSpec::from_eta(coeffs.eta(), coeffs.tree());
    let assumptions = validate(&coeffs, Some(&ito));
    timer.lap("model");
    let solver = if coeffs.is_deterministic() {
        SolverKind::Ode
    } else {
        SolverKind::Tree
    };
    let ctx = Context {
        config,
        settings: config.ode_settings(),
        coeffs,
        solver,
    };
    let mut art = Artifacts::default();
    match command {
        Command::Solve => {
            let n = *config.schedule_values().last().expect("validated schedule");
            let sol = ctx.penalized(n)?;
            ctx.field_results(&sol, &mut art);
            art.audit = Some(audit_bounds(&sol, &ctx.coeffs, config.tolerances.psd_tol));
        }
        Command::Ladder => {
            let ladder = ctx.ladder()?;
            art.results.insert("ladder".into(), ladder_json(&ladder));
            let last = ladder.last();
            ctx.field_results(last, &mut art);
            art.audit = Some(audit_bounds(last, &ctx.coeffs, config.tolerances.psd_tol));
        }
        Command::Singular | Command::Audit => {
            let ladder = ctx.ladder()?;
            let sol = singular_limit(&ladder, config.epsilon(), config.tolerances.ladder_tol)?;
            art.results.insert("ladder".into(), ladder_json(&ladder));
            ctx.field_results(&sol, &mut art);
            let audit = audit_bounds(&sol, &ctx.coeffs, config.tolerances.psd_tol);
            if command == Command::Audit && !audit.all_pass() {
                art.failures
                    .push(format!("bound audit: {} failures", audit.failures()));
            }
            art.audit = Some(audit);
        }
        Command::Umi => ctx.umi(&mut art)?,
        Command::Expansion => {
            let exp = solve_expansion(&ctx.coeffs, &ito, &ctx.settings)?;
            ctx.expansion_results(&exp, &mut art);
        }
        Command::Control => ctx.control(&mut art)?,
        Command::Selftest => unreachable!(),
    }
    timer.lap(command.name());

    fs::create_dir_all(out)?;
    let mut files = Vec::new();
    if let Some(sol) = &art.field {
        art.y_table = Some(y_table(sol, art.audit.as_ref()));
    }
    if let Some(table) = &art.y_table {
        let path = out.join("y_field.csv");
        table.write(&path)?;
        files.push(path);
    }
    if let Some(t) = &art.strategy_table {
        let path = out.join("strategy.csv");
        t.write(&path)?;
        files.push(path);
    }
    if let Some(a) = &art.audit {
        let path = out.join("audit.json");
        write_json(&path, &audit_json(a))?;
        files.push(path);
    }
    let report = json!({
        "command": command.name(),
        "config": serde_json::to_value(config).expect("config serializes"),
        "assumptions": assumptions_json(&assumptions),
        "results": Value::Object(art.results),
        "audit": art.audit.as_ref().map(audit_summary),
        "status": if art.failures.is_empty() { "ok" } else { "failed" },
        "failures": art.failures.clone(),
        "files": files
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .chain(std::iter::once("report.json".to_string()))
            .collect::<Vec<_>>(),
    });
    let path = out.join("report.json");
    write_json(&path, &report)?;
    files.push(path);
    timer.lap("output");
    Ok(RunOutcome {
        report,
        files,
        failures: art.failures,
        timings: timer.stages,
    })
}

impl Context<'_> {
    fn penalized(&self, n: f64) -> Result<RiccatiSolution, RunError> {
        let terminal = self.coeffs.penalized_terminal(n);
        let mut sol = match self.solver {
            SolverKind::Ode => solve_ode(&self.coeffs, &terminal[0], &self.settings)?,
            SolverKind::Tree => solve_tree(&self.coeffs, &terminal, &self.settings)?,
        };
        sol.index = PenalizationIndex::Finite { n };
        Ok(sol)
    }

    fn ladder(&self) -> Result<Ladder, RunError> {
        let c = self.config;
        let opts = LadderOptions {
            schedule: c.schedule_values(),
            epsilon: c.epsilon(),
            ladder_tol: c.tolerances.ladder_tol,
            monotone_tol: c.tolerances.monotone_tol,
            early_exit: true,
            solver: self.solver,
        };
        Ok(penalized_ladder(&self.coeffs, &opts, &self.settings)?)
    }

    fn xi_is_zero(&self) -> bool {
        (0..self.coeffs.tree().leaf_count()).all(|l| self.coeffs.xi(l).max_abs() == 0.0)
    }

    fn field_results(&self, sol: &RiccatiSolution, art: &mut Artifacts) {
        let x0 = self.config.x0();
        art.results.insert(
            "solution".into(),
            json!({
                "index": sol.index,
                "last_point": sol.last_point,
                "t_last": sol.time(sol.last_point),
                "y0": sol.y_at(0, 0).to_rows(),
                "x0": x0.as_slice(),
                "value": sol.value(0, &x0),
                "max_residual": sol.residual.as_ref().map(|r| {
                    r.iter().map(|(_, _, v)| *v).fold(0.0, f64::max)
                }),
                "steps": sol.diagnostics.steps,
            }),
        );
        art.field = Some(sol.clone());
    }

    fn umi(&self, art: &mut Artifacts) -> Result<(), RunError> {
        let c = &self.coeffs;
        let zero_lambda = c.lambda().iter().all(|(_, _, m)| m.max_abs() == 0.0);
        if !zero_lambda || c.has_phi() || c.has_a() {
            return Err(RunError::Unsupported {
                command: "umi",
                reason: "the closed form needs lambda = phi = a = 0".into(),
            });
        }
        let xi_pd = (0..c.tree().leaf_count()).all(|l| c.xi(l).min_eigenvalue() > 0.0);
        if !xi_pd {
            return Err(RunError::Unsupported {
                command: "umi",
                reason: "the closed form needs an invertible xi".into(),
            });
        }
        let sol = umi_value(c.eta(), c.tree())?;
        let tree = sol.tree;
        let d = c.dim();
        let mut header = vec!["t".to_string(), "node".to_string()];
        header.extend(upper_names("Y", d));
        let mut table = Table::new(header);
        for p in 0..sol.y_field.len() {
            for (i, y) in sol.y_field.row(p).iter().enumerate() {
                let mut row = vec![Cell::Float(tree.grid().time(p)), Cell::Index(i)];
                row.extend(upper(y));
                table.push(row);
            }
        }
        art.y_table = Some(table);
        let x0 = self.config.x0();
        let t0 = tree.grid().index_at_or_before(self.config.control.t0);
        let strategy = umi_control(&sol, t0, &x0)?;
        art.results.insert(
            "umi".into(),
            json!({
                "dual_gap": sol.dual_gap,
                "h0": sol.h_path[0].to_rows(),
                "y0": sol.y_at(0, 0).to_rows(),
                "t0_point": t0,
                "x0": x0.as_slice(),
                "value": sol.y_at(t0, 0).quad_form(&x0),
                "realized_cost": strategy.realized_cost,
                "cost": strategy.cost,
            }),
        );
        art.strategy_table = Some(strategy_table(&strategy));
        Ok(())
    }

    fn expansion_results(
        &self,
        exp: &singular_lq::closedform::ExpansionSolution,
        art: &mut Artifacts,
    ) {
        let tree = exp.tree;
        let grid = tree.grid();
        let d = self.coeffs.dim();
        let eta = self.coeffs.eta();
        let mut header = vec!["t".to_string(), "node".to_string()];
        header.extend(upper_names("Y", d));
        header.extend(upper_names("H", d));
        let mut table = Table::new(header);
        for p in 0..exp.h_field.len() {
            let r = grid.remaining(p);
            for (i, h) in exp.h_field.row(p).iter().enumerate() {
                let mut row = vec![Cell::Float(grid.time(p)), Cell::Index(i)];
                if r > 0.0 && p < grid.steps() {
                    let y = &eta.at(p, i, 0.0).scale(1.0 / r) + &h.scale(1.0 / (r * r));
                    row.extend(upper(&y));
                } else {
                    row.extend(std::iter::repeat_n(Cell::Empty, d * (d + 1) / 2));
                }
                row.extend(upper(h));
                table.push(row);
            }
        }
        art.y_table = Some(table);
        art.results.insert(
            "expansion".into(),
            json!({
                "stats": exp.stats(),
                "stitch_gap": exp.stitch_gap,
                "h0": exp.h_field.get(0, 0).to_rows(),
            }),
        );
    }

    fn control(&self, art: &mut Artifacts) -> Result<(), RunError> {
        let c = self.config;
        let sol = if self.xi_is_zero() {
            self.penalized(*c.schedule_values().last().expect("validated schedule"))?
        } else {
            let ladder = self.ladder()?;
            art.results.insert("ladder".into(), ladder_json(&ladder));
            singular_limit(&ladder, c.epsilon(), c.tolerances.ladder_tol)?
        };
        self.field_results(&sol, art);
        art.audit = Some(audit_bounds(&sol, &self.coeffs, c.tolerances.psd_tol));
        let x0 = c.x0();
        let t0 = self.coeffs.tree().grid().index_at_or_before(c.control.t0);
        let strategy = synthesize(&sol, &self.coeffs, t0, &x0)?;
        let report = verify(&strategy, &sol, &self.coeffs, c.epsilon());
        let bench = benchmark_linear(&self.coeffs, t0, &x0)?;
        if sol.is_singular() && !report.kernel_pass {
            art.failures.push(format!(
                "terminal constraint: norm {:?} above {:e}",
                report.terminal_norm, report.constraint_tol
            ));
        }
        if report.value_gap > VALUE_GAP_TOL {
            art.failures.push(format!(
                "value identity: relative gap {:e} above {VALUE_GAP_TOL:e}",
                report.value_gap
            ));
        }
        if bench.realized_cost < report.value - DOMINANCE_TOL {
            art.failures.push(format!(
                "benchmark cost {} below value {}",
                bench.realized_cost, report.value
            ));
        }
        art.results.insert(
            "control".into(),
            json!({
                "t0_point": t0,
                "t0": strategy.t0(),
                "end_point": strategy.end_point,
                "singular": strategy.singular,
                "cost": strategy.cost,
                "realized_cost": strategy.realized_cost,
                "verify": report,
                "benchmark_cost": bench.realized_cost,
            }),
        );
        art.strategy_table = Some(strategy_table(&strategy));
        Ok(())
    }
}

fn upper(m: &SymMatrix) -> impl Iterator<Item = Cell> {
    m.upper_triangle().into_iter().map(Cell::Float)
}

fn ladder_json(ladder: &Ladder) -> Value {
    json!({
        "schedule": ladder.schedule,
        "increments": ladder.increments,
        "min_increment_eigenvalue": ladder.min_increment_eigenvalue,
        "converged": ladder.converged,
        "residual": ladder.residual(),
        "epsilon": ladder.epsilon,
        "eps_point": ladder.eps_point,
        "y0": ladder.rungs.iter().map(|r| r.y_at(0, 0).to_rows()).collect::<Vec<_>>(),
    })
}

/// One row per (point, node): `t, node`, the upper triangle of `Y`, of `Z`
/// on tree runs, then the a-priori upper and the lower bound when audited.
/// Scalar runs get plain `upper_bound` / `lower_bound` columns.
fn y_table(sol: &RiccatiSolution, audit: Option<&BoundAudit>) -> Table {
    let d = sol.y_at(0, 0).dim();
    let tree = sol.tree;
    let with_z = !tree.is_deterministic();
    let width = d * (d + 1) / 2;
    let bound_names = |prefix: &str| {
        if d == 1 {
            vec![prefix.to_string()]
        } else {
            upper_names(prefix, d)
        }
    };
    let mut header = vec!["t".to_string(), "node".to_string()];
    header.extend(upper_names("Y", d));
    if with_z {
        header.extend(upper_names("Z", d));
    }
    if audit.is_some() {
        header.extend(bound_names("upper_bound"));
        header.extend(bound_names("lower_bound"));
    }
    let entries: BTreeMap<(usize, usize), &AuditEntry> = audit
        .map(|a| a.entries.iter().map(|e| ((e.point, e.node), e)).collect())
        .unwrap_or_default();
    let blank = |n: usize| std::iter::repeat_n(Cell::Empty, n);
    let mut table = Table::new(header);
    for p in 0..=sol.last_point {
        for (i, y) in sol.y.row(p).iter().enumerate() {
            let mut row = vec![Cell::Float(sol.time(p)), Cell::Index(i)];
            row.extend(upper(y));
            if with_z {
                match (p < sol.z.len()).then(|| sol.z.row(p).get(i)).flatten() {
                    Some(z) => row.extend(upper(z)),
                    None => row.extend(blank(width)),
                }
            }
            if audit.is_some() {
                match entries.get(&(p, i)) {
                    Some(e) => {
                        row.extend(upper(&e.upper_apriori));
                        match &e.lower {
                            Some(l) => row.extend(upper(l)),
                            None => row.extend(blank(width)),
                        }
                    }
                    None => row.extend(blank(2 * width)),
                }
            }
            table.push(row);
        }
    }
    table
}

fn strategy_table(s: &Strategy) -> Table {
    let d = s.x0.len();
    let mut header = vec!["t".to_string(), "node".to_string()];
    header.extend((1..=d).map(|i| format!("X_{i}")));
    header.extend((1..=d).map(|i| format!("u_{i}")));
    let grid = s.tree.grid();
    let mut table = Table::new(header);
    for p in s.t0_point..=s.end_point.min(s.x_path.len() - 1) {
        for (i, x) in s.x_path.row(p).iter().enumerate() {
            let mut row = vec![Cell::Float(grid.time(p)), Cell::Index(i)];
            row.extend(x.iter().map(|v| Cell::Float(*v)));
            let u: Option<&DVector<f64>> = (p < s.u_path.len())
                .then(|| s.u_path.row(p).get(i))
                .flatten();
            match u {
                Some(u) => row.extend(u.iter().map(|v| Cell::Float(*v))),
                None => row.extend(std::iter::repeat_n(Cell::Empty, d)),
            }
            table.push(row);
        }
    }
    table
}

fn assumptions_json(r: &AssumptionReport) -> Value {
    serde_json::to_value(r).expect("assumption report serializes")
}

fn audit_summary(a: &BoundAudit) -> Value {
    json!({
        "upper": a.upper,
        "expectation": a.expectation,
        "lower": a.lower,
        "delta_1": a.delta_1,
        "k_bound": a.k_bound,
        "failures": a.failures(),
        "all_pass": a.all_pass(),
    })
}

fn audit_json(a: &BoundAudit) -> Value {
    let mut v = audit_summary(a);
    v["entries"] = a
        .entries
        .iter()
        .map(|e| {
            json!({
                "point": e.point,
                "node": e.node,
                "t": e.t,
                "upper_margin": e.upper_margin,
                "pass_upper": e.pass_upper,
                "upper_expectation": e.upper_expectation,
                "pass_expectation": e.pass_expectation,
                "lower_margin": e.lower_margin,
                "pass_lower": e.pass_lower,
                "tolerance": e.tolerance,
            })
        })
        .collect();
    v
}
