use nalgebra::DMatrix;
use rayon::prelude::*;

use super::integrator::{Integrator, OdeSettings, StepStats};
use super::{PenalizationIndex, RiccatiError, RiccatiSolution, SolveDiagnostics};
use crate::coeffmodel::{CoefficientSource, NodeField, ScenarioTree};
use crate::matcore::SymMatrix;

/// Path over one span, the step size carried out of it, and its counters.
type SpanResult = (Vec<SymMatrix>, f64, StepStats);

/// Backward Riccati ODE for node-independent coefficients.
pub fn solve_ode<S: CoefficientSource + ?Sized>(
    src: &S,
    terminal: &SymMatrix,
    settings: &OdeSettings,
) -> Result<RiccatiSolution, RiccatiError> {
    if !src.node_independent() {
        return Err(RiccatiError::NotDeterministic);
    }
    check_dim(src, terminal)?;
    let tree = ScenarioTree::deterministic(*src.tree().grid());
    let n = tree.steps();
    let integ = Integrator::new(src, settings);
    let mut stats = StepStats::default();
    let mut h = tree.grid().dt();
    let path = integrate_span(
        &integ,
        0,
        n,
        0,
        terminal.as_matrix().clone(),
        &mut h,
        &mut stats,
    )?;
    let rows: Vec<Vec<SymMatrix>> = path
        .into_iter()
        .map(|m| vec![m])
        .chain(std::iter::once(vec![terminal.clone()]))
        .collect();
    let d = src.dim();
    Ok(RiccatiSolution {
        tree,
        y: NodeField::new(rows),
        z: NodeField::constant(n + 1, SymMatrix::zeros(d)),
        terminal: vec![terminal.clone()],
        index: PenalizationIndex::Terminal,
        diagnostics: SolveDiagnostics { steps: stats },
        last_point: n,
        residual: None,
    })
}

/// Backward induction on the scenario tree: the conditional mean of the
/// children at each branch point, then the driver ODE across the layer.
pub fn solve_tree<S: CoefficientSource + ?Sized>(
    src: &S,
    terminal: &[SymMatrix],
    settings: &OdeSettings,
) -> Result<RiccatiSolution, RiccatiError> {
    let tree = *src.tree();
    let leaves = tree.leaf_count();
    if terminal.len() != 1 && terminal.len() != leaves {
        return Err(RiccatiError::TerminalShape {
            expected: leaves,
            found: terminal.len(),
        });
    }
    let leaf_values: Vec<SymMatrix> = (0..leaves)
        .map(|l| terminal[if terminal.len() == 1 { 0 } else { l }].clone())
        .collect();
    solve_tree_from(src, tree.steps(), &leaf_values, settings)
}

/// Backward induction from grid point `stop` with one value per node there.
/// Rows after `stop` are absent from the result.
pub fn solve_tree_from<S: CoefficientSource + ?Sized>(
    src: &S,
    stop: usize,
    values: &[SymMatrix],
    settings: &OdeSettings,
) -> Result<RiccatiSolution, RiccatiError> {
    let tree = *src.tree();
    if stop == 0 || stop > tree.steps() {
        return Err(RiccatiError::InvalidSchedule(format!(
            "start point {stop} outside (0, N]"
        )));
    }
    let width = tree.nodes_at_point(stop);
    if values.len() != width {
        return Err(RiccatiError::TerminalShape {
            expected: width,
            found: values.len(),
        });
    }
    for t in values {
        check_dim(src, t)?;
    }

    let integ = Integrator::new(src, settings);
    let mut rows: Vec<Vec<SymMatrix>> = vec![Vec::new(); stop + 1];
    rows[stop] = values.to_vec();
    let top = tree.layer_of_interval(stop - 1);
    let mut steps: Vec<f64> = vec![tree.grid().dt(); width];
    let mut stats = StepStats::default();

    for k in (0..=top).rev() {
        let start = tree.layer_start(k);
        let end = if k == top {
            stop
        } else {
            tree.layer_start(k + 1)
        };
        let next = &rows[end];
        let branching = next.len() == k + 2;
        let results: Vec<Result<SpanResult, RiccatiError>> = (0..=k)
            .into_par_iter()
            .map(|i| {
                let (y_end, mut h) = if branching {
                    (
                        (next[i].as_matrix() + next[i + 1].as_matrix()) * 0.5,
                        steps[i].min(steps[i + 1]),
                    )
                } else {
                    (next[i].as_matrix().clone(), steps[i])
                };
                let mut local = StepStats::default();
                let path = integrate_span(&integ, start, end, i, y_end, &mut h, &mut local)?;
                Ok((path, h, local))
            })
            .collect();
        let mut new_steps = Vec::with_capacity(k + 1);
        for (i, r) in results.into_iter().enumerate() {
            let (path, h, local) = r?;
            stats.merge(&local);
            new_steps.push(h);
            for (offset, m) in path.into_iter().enumerate() {
                let row = &mut rows[start + offset];
                debug_assert_eq!(row.len(), i);
                row.push(m);
            }
        }
        steps = new_steps;
    }

    let d = src.dim();
    let z = tree_z(&tree, &rows, d);
    Ok(RiccatiSolution {
        tree,
        y: NodeField::new(rows),
        z,
        terminal: values.to_vec(),
        index: PenalizationIndex::Terminal,
        diagnostics: SolveDiagnostics { steps: stats },
        last_point: stop,
        residual: None,
    })
}

fn check_dim<S: CoefficientSource + ?Sized>(src: &S, t: &SymMatrix) -> Result<(), RiccatiError> {
    if t.dim() != src.dim() {
        return Err(RiccatiError::TerminalDimension {
            expected: src.dim(),
            found: t.dim(),
        });
    }
    Ok(())
}

/// Values at points `start..end` on `node`, integrating back from `y_end` at `end`.
fn integrate_span<S: CoefficientSource + ?Sized>(
    integ: &Integrator<'_, S>,
    start: usize,
    end: usize,
    node: usize,
    y_end: DMatrix<f64>,
    h: &mut f64,
    stats: &mut StepStats,
) -> Result<Vec<SymMatrix>, RiccatiError> {
    let mut out = vec![SymMatrix::zeros(y_end.nrows()); end - start];
    let mut y = y_end;
    for j in (start..end).rev() {
        y = integ.interval(j, node, y, h, stats)?;
        out[j - start] = SymMatrix::symmetrize(&y);
    }
    Ok(out)
}

/// `Z = (Y_up − Y_down) / (2 sqrt(Δ))` from the next branch point, held
/// constant across the layer; zero on the leaf layer, on depth-0 trees and
/// where the next branch point lies beyond the solved range.
fn tree_z(tree: &ScenarioTree, rows: &[Vec<SymMatrix>], d: usize) -> NodeField<SymMatrix> {
    let last = rows.len() - 1;
    let scale = if tree.depth() == 0 {
        0.0
    } else {
        0.5 / tree.increment()
    };
    NodeField::new(
        (0..=last)
            .map(|p| {
                let k = tree.layer_of_point(p);
                (0..=k)
                    .map(|i| {
                        if tree.depth() == 0 || k >= tree.depth() || tree.layer_start(k + 1) > last
                        {
                            SymMatrix::zeros(d)
                        } else {
                            let b = tree.layer_start(k + 1);
                            (&rows[b][i + 1] - &rows[b][i]).scale(scale)
                        }
                    })
                    .collect()
            })
            .collect(),
    )
}
