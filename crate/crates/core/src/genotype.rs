//! Discrete architectures derived from α, and their JSON / DOT forms.

use std::fmt::Write as _;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss_balance::NUM_LOSSES;
use crate::search_space::{
    edge_index, ArchParams, CellType, OpKind, EDGES_PER_NODE, NUM_EDGES, NUM_INPUT_NODES, NUM_INTERMEDIATE_NODES,
    NUM_OPS,
};
use crate::supernet::SupernetConfig;

/// The two `(source node, op)` inputs of one intermediate node.
pub type NodeInputs = [(usize, OpKind); EDGES_PER_NODE];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "GenotypeFile", try_from = "GenotypeFile")]
pub struct Genotype {
    pub normal: Vec<NodeInputs>,
    pub reduction: Vec<NodeInputs>,
    pub fusion: Vec<NodeInputs>,
    /// Normalized loss weights at the end of search.
    pub loss_weights: [f64; NUM_LOSSES],
    pub lambda_logits: [f64; NUM_LOSSES],
    pub config: SupernetConfig,
}

impl Genotype {
    pub fn cell(&self, cell_type: CellType) -> &[NodeInputs] {
        match cell_type {
            CellType::Normal => &self.normal,
            CellType::Reduction => &self.reduction,
            CellType::Fusion => &self.fusion,
        }
    }

    pub fn cell_mut(&mut self, cell_type: CellType) -> &mut Vec<NodeInputs> {
        match cell_type {
            CellType::Normal => &mut self.normal,
            CellType::Reduction => &mut self.reduction,
            CellType::Fusion => &mut self.fusion,
        }
    }

    /// Uniformly random valid genotype with uniform loss weights.
    pub fn random<R: Rng>(rng: &mut R, config: &SupernetConfig) -> Self {
        let cell = |rng: &mut R| {
            (0..NUM_INTERMEDIATE_NODES)
                .map(|k| {
                    let dst = k + NUM_INPUT_NODES;
                    let mut srcs = index::sample(rng, dst, EDGES_PER_NODE).into_vec();
                    srcs.sort_unstable();
                    let mut op = || OpKind::ALL[rng.gen_range(0..NUM_OPS - 1)];
                    [(srcs[0], op()), (srcs[1], op())]
                })
                .collect()
        };
        Genotype {
            normal: cell(rng),
            reduction: cell(rng),
            fusion: cell(rng),
            loss_weights: [1.0 / 3.0; NUM_LOSSES],
            lambda_logits: [0.0; NUM_LOSSES],
            config: config.clone(),
        }
    }

    /// Checks the structural invariants, naming the first violation.
    pub fn validate(&self) -> Result<()> {
        for ty in CellType::ALL {
            let nodes = self.cell(ty);
            if nodes.len() != NUM_INTERMEDIATE_NODES {
                return Err(Error::Validation(format!(
                    "{} cell has {} nodes, expected {NUM_INTERMEDIATE_NODES}",
                    ty.name(),
                    nodes.len()
                )));
            }
            for (k, inputs) in nodes.iter().enumerate() {
                let dst = k + NUM_INPUT_NODES;
                for &(src, op) in inputs {
                    if src >= dst {
                        return Err(Error::Validation(format!(
                            "{} cell node {dst}: source {src} does not precede it",
                            ty.name()
                        )));
                    }
                    if op == OpKind::Zero {
                        return Err(Error::Validation(format!(
                            "{} cell node {dst}: zero operation selected",
                            ty.name()
                        )));
                    }
                }
                if inputs[0].0 == inputs[1].0 {
                    return Err(Error::Validation(format!(
                        "{} cell node {dst}: both inputs come from node {}",
                        ty.name(),
                        inputs[0].0
                    )));
                }
            }
        }
        if self.loss_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Validation(format!(
                "invalid loss weights {:?}",
                self.loss_weights
            )));
        }
        self.config.validate()
    }

    /// α logits that saturate the softmax onto this genotype: `+value` on
    /// each chosen op, `+value` on the zero op of unused edges, `-value`
    /// everywhere else.
    pub fn saturated_alphas(&self, value: f64) -> ArchParams {
        let mut arch = ArchParams::uniform();
        for ty in CellType::ALL {
            let a = arch.alpha_mut(ty);
            let data = a.data_mut();
            data.fill(-value);
            for e in 0..NUM_EDGES {
                data[e * NUM_OPS + OpKind::Zero.index()] = value;
            }
            for (k, inputs) in self.cell(ty).iter().enumerate() {
                for &(src, op) in inputs {
                    let e = edge_index(src, k + NUM_INPUT_NODES);
                    data[e * NUM_OPS + OpKind::Zero.index()] = -value;
                    data[e * NUM_OPS + op.index()] = value;
                }
            }
        }
        arch
    }

    pub fn to_json(&self) -> Result<String> {
        self.validate()?;
        serde_json::to_string_pretty(&GenotypeFile::from(self))
            .map_err(|e| Error::Parse(format!("cannot serialize genotype: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: GenotypeFile = serde_json::from_str(text).map_err(|e| Error::Parse(format!("genotype JSON: {e}")))?;
        let g = file.into_genotype()?;
        g.validate()?;
        Ok(g)
    }

    /// Graphviz rendering, one cluster per cell type.
    pub fn to_dot(&self) -> Result<String> {
        self.validate()?;
        let mut out = String::from("digraph genotype {\n  rankdir=LR;\n  node [shape=box];\n");
        for ty in CellType::ALL {
            let p = ty.name();
            let _ = writeln!(out, "  subgraph cluster_{p} {{\n    label=\"{p}\";");
            let _ = writeln!(
                out,
                "    {p}_in0 [label=\"c_{{k-2}}\"];\n    {p}_in1 [label=\"c_{{k-1}}\"];"
            );
            for k in 0..NUM_INTERMEDIATE_NODES {
                let _ = writeln!(out, "    {p}_n{} [label=\"{k}\"];", k + NUM_INPUT_NODES);
            }
            let _ = writeln!(out, "    {p}_out [label=\"c_{{k}}\"];");
            let node_name = |i: usize| {
                if i < NUM_INPUT_NODES {
                    format!("{p}_in{i}")
                } else {
                    format!("{p}_n{i}")
                }
            };
            for (k, inputs) in self.cell(ty).iter().enumerate() {
                let dst = k + NUM_INPUT_NODES;
                for &(src, op) in inputs {
                    let _ = writeln!(
                        out,
                        "    {} -> {} [label=\"{}\"];",
                        node_name(src),
                        node_name(dst),
                        op.short_label()
                    );
                }
            }
            for k in 0..NUM_INTERMEDIATE_NODES {
                let _ = writeln!(out, "    {} -> {p}_out;", node_name(k + NUM_INPUT_NODES));
            }
            out.push_str("  }\n");
        }
        out.push_str("}\n");
        Ok(out)
    }
}

#[derive(Serialize, Deserialize)]
struct GenotypeFile {
    cells: CellsFile,
    loss_weights: [f64; NUM_LOSSES],
    lambda_logits: [f64; NUM_LOSSES],
    config: SupernetConfig,
}

#[derive(Serialize, Deserialize)]
struct CellsFile {
    normal: Vec<NodeFile>,
    reduction: Vec<NodeFile>,
    fusion: Vec<NodeFile>,
}

#[derive(Serialize, Deserialize)]
struct NodeFile {
    node: usize,
    inputs: Vec<(usize, OpKind)>,
}

impl From<&Genotype> for GenotypeFile {
    fn from(g: &Genotype) -> Self {
        let cell = |nodes: &[NodeInputs]| {
            nodes
                .iter()
                .enumerate()
                .map(|(k, inputs)| NodeFile {
                    node: k + NUM_INPUT_NODES,
                    inputs: inputs.to_vec(),
                })
                .collect()
        };
        GenotypeFile {
            cells: CellsFile {
                normal: cell(&g.normal),
                reduction: cell(&g.reduction),
                fusion: cell(&g.fusion),
            },
            loss_weights: g.loss_weights,
            lambda_logits: g.lambda_logits,
            config: g.config.clone(),
        }
    }
}

impl From<Genotype> for GenotypeFile {
    fn from(g: Genotype) -> Self {
        GenotypeFile::from(&g)
    }
}

impl TryFrom<GenotypeFile> for Genotype {
    type Error = Error;

    fn try_from(file: GenotypeFile) -> Result<Self> {
        let g = file.into_genotype()?;
        g.validate()?;
        Ok(g)
    }
}

impl GenotypeFile {
    fn into_genotype(self) -> Result<Genotype> {
        let mut g = Genotype {
            normal: Vec::new(),
            reduction: Vec::new(),
            fusion: Vec::new(),
            loss_weights: self.loss_weights,
            lambda_logits: self.lambda_logits,
            config: self.config,
        };
        let cells = [
            (CellType::Normal, self.cells.normal),
            (CellType::Reduction, self.cells.reduction),
            (CellType::Fusion, self.cells.fusion),
        ];
        for (ty, nodes) in cells {
            let mut slots: Vec<Option<NodeInputs>> = vec![None; NUM_INTERMEDIATE_NODES];
            for n in nodes {
                let k = n
                    .node
                    .checked_sub(NUM_INPUT_NODES)
                    .filter(|&k| k < NUM_INTERMEDIATE_NODES)
                    .ok_or_else(|| Error::Parse(format!("{} cell: no intermediate node {}", ty.name(), n.node)))?;
                let inputs: NodeInputs = n.inputs.try_into().map_err(|v: Vec<_>| {
                    Error::Parse(format!(
                        "{} cell node {}: expected {EDGES_PER_NODE} inputs, found {}",
                        ty.name(),
                        n.node,
                        v.len()
                    ))
                })?;
                if slots[k].replace(inputs).is_some() {
                    return Err(Error::Parse(format!(
                        "{} cell: node {} listed twice",
                        ty.name(),
                        n.node
                    )));
                }
            }
            let resolved = slots
                .into_iter()
                .enumerate()
                .map(|(k, s)| {
                    s.ok_or_else(|| {
                        Error::Parse(format!(
                            "{} cell: node {} is missing its inputs",
                            ty.name(),
                            k + NUM_INPUT_NODES
                        ))
                    })
                })
                .collect::<Result<_>>()?;
            *g.cell_mut(ty) = resolved;
        }
        Ok(g)
    }
}

/// Row-wise softmax of an α matrix.
fn row_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Strongest non-zero op of an edge and its mixing weight. Ties go to the
/// lower op index.
pub fn strongest_op(row: &[f64]) -> (OpKind, f64) {
    let w = row_softmax(row);
    let mut best = 0;
    for o in 1..NUM_OPS {
        if o != OpKind::Zero.index() && w[o] > w[best] {
            best = o;
        }
    }
    (OpKind::ALL[best], w[best])
}

/// Keeps the two strongest incoming edges of every intermediate node, each
/// with its strongest non-zero op. Ties go to the lower source index.
pub fn derive_cell(alpha: &[f64]) -> Vec<NodeInputs> {
    debug_assert_eq!(alpha.len(), NUM_EDGES * NUM_OPS);
    (0..NUM_INTERMEDIATE_NODES)
        .map(|k| {
            let dst = k + NUM_INPUT_NODES;
            let mut cands: Vec<(usize, OpKind, f64)> = (0..dst)
                .map(|src| {
                    let e = edge_index(src, dst);
                    let (op, s) = strongest_op(&alpha[e * NUM_OPS..(e + 1) * NUM_OPS]);
                    (src, op, s)
                })
                .collect();
            // Stable sort keeps lower sources first among equal strengths.
            cands.sort_by(|a, b| b.2.total_cmp(&a.2));
            let mut kept = [(cands[0].0, cands[0].1), (cands[1].0, cands[1].1)];
            kept.sort_by_key(|&(src, _)| src);
            kept
        })
        .collect()
}

pub fn derive_genotype(arch: &ArchParams, config: &SupernetConfig) -> Result<Genotype> {
    arch.validate()?;
    Ok(Genotype {
        normal: derive_cell(arch.normal.data()),
        reduction: derive_cell(arch.reduction.data()),
        fusion: derive_cell(arch.fusion.data()),
        loss_weights: arch.lambda.weights(),
        lambda_logits: arch.lambda.logits,
        config: config.clone(),
    })
}
