//! Central finite-difference oracle for analytic gradients.

use super::{Graph, NodeId};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max over checked entries of `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Entries whose probes switch the branch of a relu, abs or max-pool,
    /// so the central difference straddles a kink. They are excluded from
    /// `max_rel_error`.
    pub flagged: Vec<usize>,
}

/// Checks every entry of `leaf`.
pub fn grad_check(graph: &mut Graph, loss: NodeId, leaf: NodeId, epsilon: f64) -> Result<GradCheckReport> {
    let n = graph.try_value(leaf)?.len();
    let all: Vec<usize> = (0..n).collect();
    grad_check_entries(graph, loss, leaf, epsilon, &all)
}

/// Checks the listed entries of `leaf`. Leaf values are restored on exit.
pub fn grad_check_entries(
    graph: &mut Graph,
    loss: NodeId,
    leaf: NodeId,
    epsilon: f64,
    entries: &[usize],
) -> Result<GradCheckReport> {
    validate(graph, loss, leaf, epsilon, entries)?;
    let leaf_len = graph.value(leaf).len();
    let grads = graph.backward(loss)?;
    let analytic: Vec<f64> = match grads.get(leaf) {
        Some(g) => g.to_vec(),
        None => vec![0.0; leaf_len],
    };
    compare(graph, loss, leaf, epsilon, entries, &analytic)
}

/// Like [`grad_check_entries`] but compares against a caller-supplied
/// gradient for the whole leaf instead of the graph's own backward pass.
pub fn grad_check_against(
    graph: &mut Graph,
    loss: NodeId,
    leaf: NodeId,
    epsilon: f64,
    entries: &[usize],
    analytic: &[f64],
) -> Result<GradCheckReport> {
    validate(graph, loss, leaf, epsilon, entries)?;
    let n = graph.value(leaf).len();
    if analytic.len() != n {
        return Err(Error::ShapeMismatch {
            op: "grad_check",
            lhs: vec![n],
            rhs: vec![analytic.len()],
        });
    }
    compare(graph, loss, leaf, epsilon, entries, analytic)
}

fn compare(
    graph: &mut Graph,
    loss: NodeId,
    leaf: NodeId,
    epsilon: f64,
    entries: &[usize],
    analytic: &[f64],
) -> Result<GradCheckReport> {
    let kinky = graph.has_kink_between(leaf, loss);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        flagged: Vec::new(),
    };
    // Loss value and whether the probe left the smooth piece of the base point.
    let probe = |g: &mut Graph, i: usize, v: f64, base: &Option<Vec<usize>>| -> Result<(f64, bool)> {
        g.set_leaf_entry(leaf, i, v)?;
        let crossed = base.as_ref().is_some_and(|b| *b != g.kink_pattern(leaf, loss));
        Ok((g.value(loss).item(), crossed))
    };
    for &i in entries {
        let x0 = graph.value(leaf).data()[i];
        let base = kinky.then(|| graph.kink_pattern(leaf, loss));
        let plus = probe(graph, i, x0 + epsilon, &base);
        let minus = probe(graph, i, x0 - epsilon, &base);
        graph.set_leaf_entry(leaf, i, x0)?;
        let ((fp, crossed_up), (fm, crossed_down)) = (plus?, minus?);
        if crossed_up || crossed_down {
            report.flagged.push(i);
            continue;
        }
        let numeric = (fp - fm) / (2.0 * epsilon);
        let a = analytic[i];
        let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        report.max_rel_error = report.max_rel_error.max(rel);
        report.checked += 1;
    }
    Ok(report)
}

fn validate(graph: &Graph, loss: NodeId, leaf: NodeId, epsilon: f64, entries: &[usize]) -> Result<()> {
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(Error::InvalidArgument(format!(
            "probe epsilon must lie in (0, 1e-2], got {epsilon}"
        )));
    }
    if leaf >= loss {
        return Err(Error::InvalidArgument("leaf must precede the loss node".into()));
    }
    let leaf_len = graph.try_value(leaf)?.len();
    if let Some(&bad) = entries.iter().find(|&&i| i >= leaf_len) {
        return Err(Error::InvalidArgument(format!("entry {bad} out of range for leaf")));
    }
    if !graph.try_value(leaf)?.is_finite() {
        return Err(Error::InvalidArgument("leaf values must be finite".into()));
    }
    graph.try_value(loss)?;
    Ok(())
}
