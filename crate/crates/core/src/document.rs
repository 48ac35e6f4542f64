//! TOML model documents.

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::Standardization;
use crate::error::{Error, Result};
use crate::model::{ExpertParams, GateParams, ModelParams, TaskKind, TreeTopology};

const FORMAT: &str = "dfab-model";
const VERSION: u32 = 1;

/// A trained model plus what is needed to apply and reproduce it.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelDocument {
    pub model: ModelParams,
    pub fic: Option<f64>,
    /// Maps raw inputs to the space the model was trained in.
    pub standardization: Option<Standardization>,
    pub config: Option<TrainConfig>,
}

impl ModelDocument {
    pub fn bare(model: ModelParams) -> Self {
        ModelDocument {
            model,
            fic: None,
            standardization: None,
            config: None,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Doc {
    format: String,
    version: u32,
    task: TaskKind,
    depth: u32,
    dim: usize,
    d_beta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fic: Option<f64>,
    gates: Vec<GateDoc>,
    experts: Vec<ExpertDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    standardization: Option<Standardization>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config: Option<TrainConfig>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GateDoc {
    gamma: usize,
    t: f64,
    g: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    passthrough: Option<bool>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExpertDoc {
    active: bool,
    intercept: f64,
    sigma2: f64,
    indices: Vec<usize>,
    values: Vec<f64>,
}

pub fn serialize_model(doc: &ModelDocument) -> Result<String> {
    let m = &doc.model;
    let raw = Doc {
        format: FORMAT.into(),
        version: VERSION,
        task: m.task,
        depth: m.topology.depth(),
        dim: m.dim(),
        d_beta: m.d_beta,
        fic: doc.fic,
        gates: m
            .gates
            .iter()
            .enumerate()
            .map(|(i, g)| GateDoc {
                gamma: g.gamma,
                t: g.threshold,
                g: g.g,
                passthrough: Some(m.topology.is_passthrough(i)),
            })
            .collect(),
        experts: m
            .experts
            .iter()
            .enumerate()
            .map(|(j, e)| {
                let indices = e.support();
                ExpertDoc {
                    active: m.topology.is_active(j),
                    intercept: e.intercept,
                    sigma2: e.sigma2,
                    values: indices.iter().map(|&d| e.weights[d]).collect(),
                    indices,
                }
            })
            .collect(),
        standardization: doc.standardization.clone(),
        config: doc.config.clone(),
    };
    toml::to_string(&raw).map_err(|e| Error::parse("model document", e.to_string()))
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, col)
}

pub fn deserialize_model(text: &str) -> Result<ModelDocument> {
    let raw: Doc = toml::from_str(text).map_err(|e| {
        let location = match e.span() {
            Some(span) => {
                let (line, col) = line_col(text, span.start);
                format!("line {line}, column {col}")
            }
            None => "document".into(),
        };
        Error::parse(location, e.message().to_string())
    })?;
    if raw.format != FORMAT || raw.version != VERSION {
        return Err(Error::parse(
            "format",
            format!("expected {FORMAT} version {VERSION}, got {} version {}", raw.format, raw.version),
        ));
    }
    if raw.depth == 0 || raw.depth > 16 {
        return Err(Error::parse("depth", format!("depth {} not in 1..=16", raw.depth)));
    }
    let n_experts = 1usize << raw.depth;
    if raw.experts.len() != n_experts {
        return Err(Error::parse(
            "experts",
            format!("depth {} needs {n_experts} expert records, got {}", raw.depth, raw.experts.len()),
        ));
    }
    if raw.gates.len() != n_experts - 1 {
        return Err(Error::parse(
            "gates",
            format!(
                "depth {} needs {} gate records including pass-through gates, got {}",
                raw.depth,
                n_experts - 1,
                raw.gates.len()
            ),
        ));
    }
    let flags: Option<Vec<bool>> = raw.gates.iter().map(|g| g.passthrough).collect();
    if flags.is_none() && raw.gates.iter().any(|g| g.passthrough.is_some()) {
        return Err(Error::parse("gates", "pass-through flags must be given for all gates or none"));
    }
    let active: Vec<bool> = raw.experts.iter().map(|e| e.active).collect();
    let topology = TreeTopology::from_masks(raw.depth, active, flags.as_deref())
        .map_err(|e| Error::parse("gates", e.to_string()))?;

    let mut experts = Vec::with_capacity(n_experts);
    for (j, e) in raw.experts.iter().enumerate() {
        if e.indices.len() != e.values.len() {
            return Err(Error::parse(format!("experts[{j}]"), "indices and values differ in length"));
        }
        let mut weights = vec![0.0; raw.dim];
        for (&d, &v) in e.indices.iter().zip(&e.values) {
            if d >= raw.dim {
                return Err(Error::parse(format!("experts[{j}]"), format!("feature {d} out of range for {} features", raw.dim)));
            }
            weights[d] = v;
        }
        experts.push(ExpertParams { weights, intercept: e.intercept, sigma2: e.sigma2 });
    }
    let gates = raw
        .gates
        .iter()
        .map(|g| GateParams { gamma: g.gamma, threshold: g.t, g: g.g })
        .collect();
    let model = ModelParams::new(raw.task, raw.d_beta, topology, gates, experts)
        .map_err(|e| Error::parse("model", e.to_string()))?;
    Ok(ModelDocument {
        model,
        fic: raw.fic,
        standardization: raw.standardization,
        config: raw.config,
    })
}
