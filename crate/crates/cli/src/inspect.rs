//! Text rendering of a model as nested threshold rules over sparse linear
//! formulas.

use std::fmt::Write;

use dfab_core::model::clamp_prob;
use dfab_core::{ModelDocument, TaskKind};

/// Raw-scale view of one expert: `intercept + sum(w * x)`.
fn formula(doc: &ModelDocument, j: usize, standardized: bool) -> (f64, Vec<(usize, f64)>) {
    let phi = &doc.model.experts[j];
    let support = phi.support();
    match (&doc.standardization, standardized) {
        (Some(r), false) => {
            // z = (x - m) / s and y = ty_mean + ty_scale * f(z).
            let ts = r.target_scale;
            let mut intercept = phi.intercept;
            let terms = support
                .iter()
                .map(|&d| {
                    let w = phi.weights[d] / r.feature_scale[d];
                    intercept -= w * r.feature_mean[d];
                    (d, w * ts)
                })
                .collect();
            (r.target_mean + ts * intercept, terms)
        }
        _ => (phi.intercept, support.iter().map(|&d| (d, phi.weights[d])).collect()),
    }
}

fn threshold(doc: &ModelDocument, gate: usize, standardized: bool) -> f64 {
    let g = &doc.model.gates[gate];
    match (&doc.standardization, standardized) {
        (Some(r), false) => g.threshold * r.feature_scale[g.gamma] + r.feature_mean[g.gamma],
        _ => g.threshold,
    }
}

fn render_expert(out: &mut String, doc: &ModelDocument, j: usize, standardized: bool, pad: &str) {
    let (b, terms) = formula(doc, j, standardized);
    let lhs = match doc.model.task {
        TaskKind::Regression => "y",
        TaskKind::Classification => "logit p(y=+1)",
    };
    let mut text = format!("{lhs} = {b:.6}");
    for (d, w) in &terms {
        let sign = if *w < 0.0 { '-' } else { '+' };
        let _ = write!(text, " {sign} {:.6}*x{d}", w.abs());
    }
    let _ = writeln!(out, "{pad}expert {j} [{} features]: {text}", terms.len());
}

fn render_node(out: &mut String, doc: &ModelDocument, node: usize, standardized: bool, depth: usize) {
    let topo = &doc.model.topology;
    let pad = "  ".repeat(depth);
    let n_gates = topo.n_gates();
    if node >= n_gates {
        let j = node - n_gates;
        if topo.is_active(j) {
            render_expert(out, doc, j, standardized, &pad);
        }
        return;
    }
    let has_active = |child: usize| {
        if child >= n_gates {
            topo.is_active(child - n_gates)
        } else {
            topo.experts_under(child).any(|j| topo.is_active(j))
        }
    };
    let (left, right) = (2 * node + 1, 2 * node + 2);
    if topo.is_passthrough(node) {
        let (side, child) = if has_active(left) { ("left", left) } else { ("right", right) };
        if has_active(child) {
            let _ = writeln!(out, "{pad}gate {node}: collapsed, every sample goes {side}");
            render_node(out, doc, child, standardized, depth + 1);
        }
        return;
    }
    let gate = &doc.model.gates[node];
    let t = threshold(doc, node, standardized);
    let g = clamp_prob(gate.g);
    let _ = writeln!(out, "{pad}gate {node}: if x{} < {t:.6} go left with p={g:.4}, else left with p={:.4}", gate.gamma, 1.0 - g);
    let _ = writeln!(out, "{pad}  left:");
    render_node(out, doc, left, standardized, depth + 2);
    let _ = writeln!(out, "{pad}  right:");
    render_node(out, doc, right, standardized, depth + 2);
}

pub fn render(doc: &ModelDocument, standardized: bool) -> String {
    let m = &doc.model;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{} model: depth {}, {} features, {} of {} experts active",
        m.task.as_str(),
        m.topology.depth(),
        m.dim(),
        m.topology.active_count(),
        m.n_experts()
    );
    if let Some(fic) = doc.fic {
        let _ = writeln!(out, "FIC {fic:.6}");
    }
    let scale = match (&doc.standardization, standardized) {
        (Some(_), false) => "on the raw input scale",
        (Some(_), true) => "on the standardized scale",
        (None, _) => "as stored",
    };
    let _ = writeln!(out, "thresholds and weights {scale}");
    render_node(&mut out, doc, 0, standardized, 0);
    out
}
