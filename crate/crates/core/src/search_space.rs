//! Candidate operations, the fixed 7-node cell DAG and its continuous relaxation.
//!
//! Nodes are numbered from 0: nodes 0 and 1 are the two cell inputs, nodes
//! 2..=5 are the intermediate nodes and the cell output concatenates them.
//! Edges are ordered by destination node, then by source node.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};
use crate::loss_balance::LambdaParams;
use crate::nn::{gaussian, Ctx, ParamId, ParamStore, StatId};
use crate::tensor::{Conv2dParams, Pool2dParams, PoolKind, Tensor, Var};

pub const NUM_INPUT_NODES: usize = 2;
pub const NUM_INTERMEDIATE_NODES: usize = 4;
pub const NUM_NODES: usize = NUM_INPUT_NODES + NUM_INTERMEDIATE_NODES + 1;
pub const NUM_EDGES: usize = 14;
pub const NUM_OPS: usize = 8;
/// Incoming edges kept per intermediate node when deriving a discrete cell.
pub const EDGES_PER_NODE: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    #[serde(rename = "sep_conv_3x3")]
    SepConv3x3,
    #[serde(rename = "sep_conv_5x5")]
    SepConv5x5,
    #[serde(rename = "atrous_conv_3x3")]
    AtrousConv3x3,
    #[serde(rename = "atrous_conv_5x5")]
    AtrousConv5x5,
    #[serde(rename = "avg_pool_3x3")]
    AvgPool3x3,
    #[serde(rename = "max_pool_3x3")]
    MaxPool3x3,
    #[serde(rename = "skip_connect")]
    SkipConnect,
    #[serde(rename = "zero")]
    Zero,
}

impl OpKind {
    /// All candidates in α column order.
    pub const ALL: [OpKind; NUM_OPS] = [
        OpKind::SepConv3x3,
        OpKind::SepConv5x5,
        OpKind::AtrousConv3x3,
        OpKind::AtrousConv5x5,
        OpKind::AvgPool3x3,
        OpKind::MaxPool3x3,
        OpKind::SkipConnect,
        OpKind::Zero,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<OpKind> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::SepConv3x3 => "sep_conv_3x3",
            OpKind::SepConv5x5 => "sep_conv_5x5",
            OpKind::AtrousConv3x3 => "atrous_conv_3x3",
            OpKind::AtrousConv5x5 => "atrous_conv_5x5",
            OpKind::AvgPool3x3 => "avg_pool_3x3",
            OpKind::MaxPool3x3 => "max_pool_3x3",
            OpKind::SkipConnect => "skip_connect",
            OpKind::Zero => "zero",
        }
    }

    /// Short label used in rendered cell diagrams.
    pub fn short_label(self) -> &'static str {
        match self {
            OpKind::SepConv3x3 => "sep_3x3",
            OpKind::SepConv5x5 => "sep_5x5",
            OpKind::AtrousConv3x3 => "dil_3x3",
            OpKind::AtrousConv5x5 => "dil_5x5",
            OpKind::AvgPool3x3 => "avg_3x3",
            OpKind::MaxPool3x3 => "max_3x3",
            OpKind::SkipConnect => "skip",
            OpKind::Zero => "zero",
        }
    }

    fn uses_relu(self) -> bool {
        matches!(
            self,
            OpKind::SepConv3x3 | OpKind::SepConv5x5 | OpKind::AtrousConv3x3 | OpKind::AtrousConv5x5
        )
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown operation '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellType {
    Normal,
    Reduction,
    Fusion,
}

impl CellType {
    pub const ALL: [CellType; 3] = [CellType::Normal, CellType::Reduction, CellType::Fusion];

    pub fn name(self) -> &'static str {
        match self {
            CellType::Normal => "normal",
            CellType::Reduction => "reduction",
            CellType::Fusion => "fusion",
        }
    }

    pub fn layout(self) -> Layout {
        match self {
            CellType::Fusion => Layout::Fusion,
            _ => Layout::Planar,
        }
    }
}

/// Index of edge `src -> dst` in α row order. `dst` is an intermediate node.
pub fn edge_index(src: usize, dst: usize) -> usize {
    debug_assert!(src < dst && (NUM_INPUT_NODES..NUM_NODES - 1).contains(&dst));
    let k = dst - NUM_INPUT_NODES;
    // Node k (0-based among intermediates) has k + 2 predecessors.
    k * (k + 3) / 2 + src
}

/// `(edge index, source, destination)` for every edge of the cell.
pub fn edges() -> impl Iterator<Item = (usize, usize, usize)> {
    (NUM_INPUT_NODES..NUM_NODES - 1).flat_map(|dst| (0..dst).map(move |src| (edge_index(src, dst), src, dst)))
}

/// Spatial arrangement that candidate operations act on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layout {
    /// `k x k` kernels over an `H x W` image.
    Planar,
    /// `k x 1` kernels over an `N_v x 1` view sequence.
    Fusion,
}

impl Layout {
    fn kernel(self, k: usize) -> (usize, usize) {
        match self {
            Layout::Planar => (k, k),
            Layout::Fusion => (k, 1),
        }
    }

    fn pad(self, p: usize) -> (usize, usize) {
        match self {
            Layout::Planar => (p, p),
            Layout::Fusion => (p, 0),
        }
    }

    fn dilation(self, d: usize) -> (usize, usize) {
        match self {
            Layout::Planar => (d, d),
            Layout::Fusion => (d, 1),
        }
    }
}

/// Depthwise `k x k` (or `k x 1`) conv followed by a pointwise conv.
#[derive(Clone, Debug)]
struct DwPw {
    depthwise: ParamId,
    pointwise: ParamId,
    params: Conv2dParams,
}

impl DwPw {
    #[allow(clippy::too_many_arguments)]
    fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        channels: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        layout: Layout,
    ) -> Self {
        let (kh, kw) = layout.kernel(kernel);
        let depthwise = store.add_kaiming(format!("{name}.dw"), &[channels, 1, kh, kw], kh * kw, rng);
        let pointwise = store.add_kaiming(format!("{name}.pw"), &[channels, channels, 1, 1], channels, rng);
        let (dh, dw) = layout.dilation(dilation);
        let (ph, pw) = layout.pad(dilation * (kernel / 2));
        let params = Conv2dParams::default()
            .stride(stride)
            .padding(ph, pw)
            .dilation(dh, dw)
            .groups(channels);
        DwPw {
            depthwise,
            pointwise,
            params,
        }
    }

    fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let dw = ctx.param(self.depthwise);
        let pw = ctx.param(self.pointwise);
        let y = ctx.tape.conv2d(x, dw, self.params)?;
        ctx.tape.conv2d(y, pw, Conv2dParams::default())
    }
}

/// Halves the spatial size with two offset stride-2 `1 x 1` convs whose
/// outputs are concatenated along channels.
#[derive(Clone, Debug)]
pub struct FactorizedReduce {
    conv_a: ParamId,
    conv_b: ParamId,
    stats: StatId,
}

impl FactorizedReduce {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        if !c_out.is_multiple_of(2) {
            return Err(config_err!(
                "{name}: factorized reduce needs even output channels, got {c_out}"
            ));
        }
        let half = c_out / 2;
        Ok(FactorizedReduce {
            conv_a: store.add_kaiming(format!("{name}.a"), &[half, c_in, 1, 1], c_in, rng),
            conv_b: store.add_kaiming(format!("{name}.b"), &[half, c_in, 1, 1], c_in, rng),
            stats: store.add_stats(c_out),
        })
    }

    /// `relu_x` must already be rectified.
    fn forward_rectified(&self, ctx: &mut Ctx, relu_x: Var) -> Result<Var> {
        let s = ctx.tape.shape(relu_x);
        if s.len() != 4 || !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
            return Err(shape_err!("factorized reduce needs even spatial size, got {s:?}"));
        }
        let p = Conv2dParams::default().stride(2);
        let wa = ctx.param(self.conv_a);
        let wb = ctx.param(self.conv_b);
        let a = ctx.tape.conv2d(relu_x, wa, p)?;
        let shifted = ctx.tape.crop(relu_x, 1, 1)?;
        let b = ctx.tape.conv2d(shifted, wb, p)?;
        let y = ctx.tape.concat(&[a, b], 1)?;
        ctx.standardize(y, self.stats)
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let r = ctx.tape.relu(x)?;
        self.forward_rectified(ctx, r)
    }
}

/// One candidate operation instantiated with its own weights.
#[derive(Clone, Debug)]
pub struct CandidateOp {
    kind: OpKind,
    stride: usize,
    body: OpBody,
}

#[derive(Clone, Debug)]
enum OpBody {
    Sep {
        first: DwPw,
        first_stats: StatId,
        second: DwPw,
        second_stats: StatId,
    },
    Atrous {
        conv: DwPw,
        stats: StatId,
    },
    Pool(PoolKind, Pool2dParams),
    Identity,
    Reduce(FactorizedReduce),
    Zero,
}

impl CandidateOp {
    /// Builds `kind` acting on `channels` channels. Fusion layout only allows
    /// stride 1, so the view axis keeps its length.
    pub fn new<R: Rng>(
        kind: OpKind,
        channels: usize,
        stride: usize,
        layout: Layout,
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
    ) -> Result<Self> {
        if stride != 1 && stride != 2 {
            return Err(config_err!("{name}: stride must be 1 or 2, got {stride}"));
        }
        if layout == Layout::Fusion && stride != 1 {
            return Err(config_err!("{name}: fusion-layout operations cannot be strided"));
        }
        let body = match kind {
            OpKind::SepConv3x3 | OpKind::SepConv5x5 => {
                let k = if kind == OpKind::SepConv3x3 { 3 } else { 5 };
                OpBody::Sep {
                    first: DwPw::new(store, rng, &format!("{name}.0"), channels, k, stride, 1, layout),
                    first_stats: store.add_stats(channels),
                    second: DwPw::new(store, rng, &format!("{name}.1"), channels, k, 1, 1, layout),
                    second_stats: store.add_stats(channels),
                }
            }
            OpKind::AtrousConv3x3 | OpKind::AtrousConv5x5 => {
                let k = if kind == OpKind::AtrousConv3x3 { 3 } else { 5 };
                OpBody::Atrous {
                    conv: DwPw::new(store, rng, name, channels, k, stride, 2, layout),
                    stats: store.add_stats(channels),
                }
            }
            OpKind::AvgPool3x3 | OpKind::MaxPool3x3 => {
                let pool = if kind == OpKind::AvgPool3x3 {
                    PoolKind::Avg
                } else {
                    PoolKind::Max
                };
                OpBody::Pool(
                    pool,
                    Pool2dParams {
                        kernel: layout.kernel(3),
                        stride: (stride, stride),
                        padding: layout.pad(1),
                    },
                )
            }
            OpKind::SkipConnect if stride == 1 => OpBody::Identity,
            OpKind::SkipConnect => OpBody::Reduce(FactorizedReduce::new(store, rng, name, channels, channels)?),
            OpKind::Zero => OpBody::Zero,
        };
        Ok(CandidateOp { kind, stride, body })
    }

    pub fn kind(&self) -> OpKind {
        self.kind
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    /// Applies the op. `relu_x` must be `relu(x)`; it is only read by ops
    /// that start with a rectifier.
    pub fn forward(&self, ctx: &mut Ctx, x: Var, relu_x: Option<Var>) -> Result<Var> {
        let rectified = |ctx: &mut Ctx| match relu_x {
            Some(r) => Ok(r),
            None => ctx.tape.relu(x),
        };
        match &self.body {
            OpBody::Sep {
                first,
                first_stats,
                second,
                second_stats,
            } => {
                let r = rectified(ctx)?;
                let y = first.forward(ctx, r)?;
                let y = ctx.standardize(y, *first_stats)?;
                let y = ctx.tape.relu(y)?;
                let y = second.forward(ctx, y)?;
                ctx.standardize(y, *second_stats)
            }
            OpBody::Atrous { conv, stats } => {
                let r = rectified(ctx)?;
                let y = conv.forward(ctx, r)?;
                ctx.standardize(y, *stats)
            }
            OpBody::Pool(kind, params) => ctx.tape.pool2d(*kind, x, *params),
            OpBody::Identity => Ok(x),
            OpBody::Reduce(fr) => {
                let r = rectified(ctx)?;
                fr.forward_rectified(ctx, r)
            }
            OpBody::Zero => {
                let s = ctx.tape.shape(x);
                if s.len() != 4 {
                    return Err(shape_err!("zero op expects rank-4 input, got {s:?}"));
                }
                let out = [s[0], s[1], s[2].div_ceil(self.stride), s[3].div_ceil(self.stride)];
                Ok(ctx.tape.constant(Tensor::zeros(&out)))
            }
        }
    }

    fn needs_relu(&self) -> bool {
        self.kind.uses_relu() || matches!(self.body, OpBody::Reduce(_))
    }
}

/// All eight candidates on one edge, mixed by a softmax over an α row.
#[derive(Clone, Debug)]
pub struct MixedEdge {
    ops: Vec<CandidateOp>,
}

impl MixedEdge {
    pub fn new<R: Rng>(
        channels: usize,
        stride: usize,
        layout: Layout,
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
    ) -> Result<Self> {
        let ops = OpKind::ALL
            .iter()
            .map(|&k| CandidateOp::new(k, channels, stride, layout, store, rng, &format!("{name}.{}", k.name())))
            .collect::<Result<_>>()?;
        Ok(MixedEdge { ops })
    }

    pub fn ops(&self) -> &[CandidateOp] {
        &self.ops
    }

    /// `sum_o softmax(alpha_row)_o * o(x)`.
    pub fn forward(&self, ctx: &mut Ctx, x: Var, relu_x: Option<Var>, alpha_row: Var) -> Result<Var> {
        if ctx.tape.shape(alpha_row) != [NUM_OPS] {
            return Err(shape_err!(
                "alpha row must have {NUM_OPS} entries, got {:?}",
                ctx.tape.shape(alpha_row)
            ));
        }
        let weights = ctx.tape.softmax(alpha_row, 0)?;
        let outs = self
            .ops
            .iter()
            .map(|op| op.forward(ctx, x, relu_x))
            .collect::<Result<Vec<_>>>()?;
        ctx.tape.weighted_sum(weights, &outs)
    }
}

/// Brings a cell input to the working channel count (and, after a reduction
/// cell, to the working resolution).
#[derive(Clone, Debug)]
pub enum Preprocess {
    ReluConv { conv: ParamId, stats: StatId },
    Reduce(FactorizedReduce),
}

impl Preprocess {
    pub fn relu_conv<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, c_in: usize, c_out: usize) -> Self {
        Preprocess::ReluConv {
            conv: store.add_kaiming(name, &[c_out, c_in, 1, 1], c_in, rng),
            stats: store.add_stats(c_out),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        match self {
            Preprocess::ReluConv { conv, stats } => {
                let r = ctx.tape.relu(x)?;
                let w = ctx.param(*conv);
                let y = ctx.tape.conv2d(r, w, Conv2dParams::default())?;
                ctx.standardize(y, *stats)
            }
            Preprocess::Reduce(fr) => fr.forward(ctx, x),
        }
    }
}

/// Channel and resolution contract of one cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellShape {
    pub cell_type: CellType,
    /// Channels of the `s_prev_prev` input.
    pub c_prev_prev: usize,
    /// Channels of the `s_prev` input.
    pub c_prev: usize,
    /// Working channels of every node; the output has four times as many.
    pub channels: usize,
    /// `s_prev_prev` has twice the resolution of `s_prev`.
    pub reduction_prev: bool,
}

impl CellShape {
    pub fn output_channels(&self) -> usize {
        NUM_INTERMEDIATE_NODES * self.channels
    }

    fn build_preprocess<R: Rng>(
        &self,
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
    ) -> Result<(Preprocess, Preprocess)> {
        let pre0 = if self.reduction_prev {
            Preprocess::Reduce(FactorizedReduce::new(
                store,
                rng,
                &format!("{name}.pre0"),
                self.c_prev_prev,
                self.channels,
            )?)
        } else {
            Preprocess::relu_conv(store, rng, &format!("{name}.pre0"), self.c_prev_prev, self.channels)
        };
        let pre1 = Preprocess::relu_conv(store, rng, &format!("{name}.pre1"), self.c_prev, self.channels);
        Ok((pre0, pre1))
    }

    fn edge_stride(&self, src: usize) -> usize {
        if self.cell_type == CellType::Reduction && src < NUM_INPUT_NODES {
            2
        } else {
            1
        }
    }
}

/// Lazily computed `relu` of every node state, shared by all ops reading it.
struct NodeStates {
    values: Vec<Var>,
    rectified: Vec<Option<Var>>,
}

impl NodeStates {
    fn new(s0: Var, s1: Var) -> Self {
        NodeStates {
            values: vec![s0, s1],
            rectified: vec![None, None],
        }
    }

    fn push(&mut self, v: Var) {
        self.values.push(v);
        self.rectified.push(None);
    }

    fn rectified(&mut self, ctx: &mut Ctx, node: usize) -> Result<Var> {
        if let Some(r) = self.rectified[node] {
            return Ok(r);
        }
        let r = ctx.tape.relu(self.values[node])?;
        self.rectified[node] = Some(r);
        Ok(r)
    }

    fn output(&self, ctx: &mut Ctx) -> Result<Var> {
        ctx.tape.concat(&self.values[NUM_INPUT_NODES..], 1)
    }
}

fn check_inputs(ctx: &Ctx, s0: Var, s1: Var) -> Result<()> {
    let (a, b) = (ctx.tape.shape(s0), ctx.tape.shape(s1));
    if a.len() != 4 || b.len() != 4 || a[0] != b[0] || a[2..] != b[2..] {
        return Err(shape_err!("cell inputs disagree after preprocessing: {a:?} vs {b:?}"));
    }
    Ok(())
}

/// Supernet cell: every edge carries a [`MixedEdge`].
#[derive(Clone, Debug)]
pub struct MixedCell {
    shape: CellShape,
    pre0: Preprocess,
    pre1: Preprocess,
    edges: Vec<MixedEdge>,
}

impl MixedCell {
    pub fn new<R: Rng>(shape: CellShape, store: &mut ParamStore, rng: &mut R, name: &str) -> Result<Self> {
        let (pre0, pre1) = shape.build_preprocess(store, rng, name)?;
        let layout = shape.cell_type.layout();
        let edges = edges()
            .map(|(e, src, _)| {
                MixedEdge::new(
                    shape.channels,
                    shape.edge_stride(src),
                    layout,
                    store,
                    rng,
                    &format!("{name}.e{e}"),
                )
            })
            .collect::<Result<_>>()?;
        Ok(MixedCell {
            shape,
            pre0,
            pre1,
            edges,
        })
    }

    pub fn shape(&self) -> &CellShape {
        &self.shape
    }

    pub fn edge(&self, index: usize) -> &MixedEdge {
        &self.edges[index]
    }

    pub fn preprocess(&self) -> (&Preprocess, &Preprocess) {
        (&self.pre0, &self.pre1)
    }

    /// `alpha` is the `[14, 8]` logit matrix of this cell type.
    pub fn forward(&self, ctx: &mut Ctx, s_prev_prev: Var, s_prev: Var, alpha: Var) -> Result<Var> {
        if ctx.tape.shape(alpha) != [NUM_EDGES, NUM_OPS] {
            return Err(shape_err!(
                "alpha must be [{NUM_EDGES}, {NUM_OPS}], got {:?}",
                ctx.tape.shape(alpha)
            ));
        }
        let s0 = self.pre0.forward(ctx, s_prev_prev)?;
        let s1 = self.pre1.forward(ctx, s_prev)?;
        check_inputs(ctx, s0, s1)?;
        let mut states = NodeStates::new(s0, s1);
        for dst in NUM_INPUT_NODES..NUM_NODES - 1 {
            let mut terms = Vec::with_capacity(dst);
            for src in 0..dst {
                let e = edge_index(src, dst);
                let r = states.rectified(ctx, src)?;
                let row = ctx.tape.select_row(alpha, e)?;
                terms.push(self.edges[e].forward(ctx, states.values[src], Some(r), row)?);
            }
            let node = ctx.tape.add_n(&terms)?;
            states.push(node);
        }
        states.output(ctx)
    }
}

/// Derived cell: each intermediate node sums two chosen operations.
#[derive(Clone, Debug)]
pub struct DiscreteCell {
    shape: CellShape,
    pre0: Preprocess,
    pre1: Preprocess,
    nodes: Vec<[(usize, CandidateOp); EDGES_PER_NODE]>,
}

impl DiscreteCell {
    /// `choices[k]` lists the `(source, op)` pairs feeding intermediate node `k + 2`.
    pub fn new<R: Rng>(
        shape: CellShape,
        choices: &[[(usize, OpKind); EDGES_PER_NODE]],
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
    ) -> Result<Self> {
        if choices.len() != NUM_INTERMEDIATE_NODES {
            return Err(config_err!(
                "{name}: expected choices for {NUM_INTERMEDIATE_NODES} nodes, got {}",
                choices.len()
            ));
        }
        let (pre0, pre1) = shape.build_preprocess(store, rng, name)?;
        let layout = shape.cell_type.layout();
        let mut nodes = Vec::with_capacity(NUM_INTERMEDIATE_NODES);
        for (k, pair) in choices.iter().enumerate() {
            let dst = k + NUM_INPUT_NODES;
            let mut built = Vec::with_capacity(EDGES_PER_NODE);
            for &(src, kind) in pair {
                if src >= dst {
                    return Err(config_err!("{name}: node {dst} cannot read from node {src}"));
                }
                let op = CandidateOp::new(
                    kind,
                    shape.channels,
                    shape.edge_stride(src),
                    layout,
                    store,
                    rng,
                    &format!("{name}.n{dst}.s{src}.{}", kind.name()),
                )?;
                built.push((src, op));
            }
            let [a, b]: [(usize, CandidateOp); 2] = built.try_into().expect("two choices");
            nodes.push([a, b]);
        }
        Ok(DiscreteCell {
            shape,
            pre0,
            pre1,
            nodes,
        })
    }

    /// Reuses the preprocessing and chosen-op weights of a trained [`MixedCell`].
    pub fn from_mixed(cell: &MixedCell, choices: &[[(usize, OpKind); EDGES_PER_NODE]]) -> Result<Self> {
        if choices.len() != NUM_INTERMEDIATE_NODES {
            return Err(config_err!("expected choices for {NUM_INTERMEDIATE_NODES} nodes"));
        }
        let nodes = choices
            .iter()
            .enumerate()
            .map(|(k, pair)| {
                let dst = k + NUM_INPUT_NODES;
                let pick = |(src, kind): (usize, OpKind)| -> Result<(usize, CandidateOp)> {
                    if src >= dst {
                        return Err(config_err!("node {dst} cannot read from node {src}"));
                    }
                    Ok((src, cell.edges[edge_index(src, dst)].ops[kind.index()].clone()))
                };
                Ok([pick(pair[0])?, pick(pair[1])?])
            })
            .collect::<Result<_>>()?;
        Ok(DiscreteCell {
            shape: cell.shape,
            pre0: cell.pre0.clone(),
            pre1: cell.pre1.clone(),
            nodes,
        })
    }

    pub fn shape(&self) -> &CellShape {
        &self.shape
    }

    pub fn choices(&self) -> Vec<[(usize, OpKind); EDGES_PER_NODE]> {
        self.nodes
            .iter()
            .map(|n| [(n[0].0, n[0].1.kind()), (n[1].0, n[1].1.kind())])
            .collect()
    }

    pub fn forward(&self, ctx: &mut Ctx, s_prev_prev: Var, s_prev: Var) -> Result<Var> {
        let s0 = self.pre0.forward(ctx, s_prev_prev)?;
        let s1 = self.pre1.forward(ctx, s_prev)?;
        check_inputs(ctx, s0, s1)?;
        let mut states = NodeStates::new(s0, s1);
        for node in &self.nodes {
            let mut terms = [None, None];
            for (slot, (src, op)) in terms.iter_mut().zip(node.iter()) {
                let r = if op.needs_relu() {
                    Some(states.rectified(ctx, *src)?)
                } else {
                    None
                };
                *slot = Some(op.forward(ctx, states.values[*src], r)?);
            }
            let [Some(a), Some(b)] = terms else { unreachable!() };
            let v = ctx.tape.add(a, b)?;
            states.push(v);
        }
        states.output(ctx)
    }
}

/// Architecture parameters: one α matrix per cell type plus the loss logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchParams {
    pub normal: Tensor,
    pub reduction: Tensor,
    pub fusion: Tensor,
    pub lambda: LambdaParams,
}

impl ArchParams {
    /// Every α entry and λ logit drawn from `N(0, std^2)`.
    pub fn random<R: Rng>(rng: &mut R, std: f64) -> Self {
        let shape = [NUM_EDGES, NUM_OPS];
        ArchParams {
            normal: gaussian(&shape, std, rng),
            reduction: gaussian(&shape, std, rng),
            fusion: gaussian(&shape, std, rng),
            lambda: LambdaParams::random(rng, std),
        }
    }

    pub fn uniform() -> Self {
        let shape = [NUM_EDGES, NUM_OPS];
        ArchParams {
            normal: Tensor::zeros(&shape),
            reduction: Tensor::zeros(&shape),
            fusion: Tensor::zeros(&shape),
            lambda: LambdaParams::uniform(),
        }
    }

    pub fn alpha(&self, cell_type: CellType) -> &Tensor {
        match cell_type {
            CellType::Normal => &self.normal,
            CellType::Reduction => &self.reduction,
            CellType::Fusion => &self.fusion,
        }
    }

    pub fn alpha_mut(&mut self, cell_type: CellType) -> &mut Tensor {
        match cell_type {
            CellType::Normal => &mut self.normal,
            CellType::Reduction => &mut self.reduction,
            CellType::Fusion => &mut self.fusion,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for t in CellType::ALL {
            let a = self.alpha(t);
            if a.shape() != [NUM_EDGES, NUM_OPS] {
                return Err(shape_err!(
                    "{} alpha must be [{NUM_EDGES}, {NUM_OPS}], got {:?}",
                    t.name(),
                    a.shape()
                ));
            }
            if !a.is_finite() {
                return Err(Error::Numeric(format!("{} alpha has non-finite entries", t.name())));
            }
        }
        self.lambda.validate()
    }
}

/// α matrices bound to tape leaves for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct AlphaVars {
    pub normal: Var,
    pub reduction: Var,
    pub fusion: Var,
}

impl AlphaVars {
    pub fn bind(ctx: &mut Ctx, arch: &ArchParams, requires_grad: bool) -> Self {
        AlphaVars {
            normal: ctx.tape.leaf(arch.normal.clone(), requires_grad),
            reduction: ctx.tape.leaf(arch.reduction.clone(), requires_grad),
            fusion: ctx.tape.leaf(arch.fusion.clone(), requires_grad),
        }
    }

    pub fn get(&self, cell_type: CellType) -> Var {
        match cell_type {
            CellType::Normal => self.normal,
            CellType::Reduction => self.reduction,
            CellType::Fusion => self.fusion,
        }
    }
}
