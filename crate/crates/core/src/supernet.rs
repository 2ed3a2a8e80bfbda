//! The multi-view network: stem, backbone cells, fusion cells and the three heads.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};
use crate::genotype::Genotype;
use crate::nn::{Ctx, ParamId, ParamStore, StatId};
use crate::search_space::{AlphaVars, CellShape, CellType, DiscreteCell, MixedCell};
use crate::tensor::{Conv2dParams, Pool2dParams, PoolKind, Tensor, Var};

/// Backbone cells in order; two fusion cells follow.
pub const BACKBONE: [CellType; 5] = [
    CellType::Normal,
    CellType::Reduction,
    CellType::Normal,
    CellType::Reduction,
    CellType::Normal,
];
pub const NUM_FUSION_CELLS: usize = 2;

/// Reduction of the fused view axis into one shape descriptor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewPooling {
    #[default]
    Avg,
    Max,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SupernetConfig {
    pub n_views: usize,
    pub init_channels: usize,
    pub num_classes: usize,
    pub input_resolution: usize,
    pub input_channels: usize,
    pub view_pooling: ViewPooling,
}

impl Default for SupernetConfig {
    fn default() -> Self {
        SupernetConfig {
            n_views: 4,
            init_channels: 8,
            num_classes: 8,
            input_resolution: 16,
            input_channels: 1,
            view_pooling: ViewPooling::Avg,
        }
    }
}

impl SupernetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_views < 2 {
            return Err(config_err!("n_views must be at least 2, got {}", self.n_views));
        }
        if self.init_channels == 0 || !self.init_channels.is_multiple_of(2) {
            return Err(config_err!(
                "init_channels must be a positive even number, got {}",
                self.init_channels
            ));
        }
        if self.num_classes < 2 {
            return Err(config_err!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.input_channels == 0 {
            return Err(config_err!("input_channels must be positive"));
        }
        if self.input_resolution < 4 || !self.input_resolution.is_multiple_of(4) {
            return Err(config_err!(
                "input_resolution must be a positive multiple of 4, got {}",
                self.input_resolution
            ));
        }
        Ok(())
    }

    /// Length of the shape descriptor and of every per-view feature.
    pub fn descriptor_dim(&self) -> usize {
        16 * self.init_channels
    }

    /// Working channels of every cell: backbone cells in order, then fusion.
    pub fn cell_shapes(&self) -> Vec<CellShape> {
        let c = self.init_channels;
        let (mut c_pp, mut c_p, mut cur) = (c, c, c);
        let mut reduction_prev = false;
        let mut shapes = Vec::with_capacity(BACKBONE.len() + NUM_FUSION_CELLS);
        for ty in BACKBONE {
            if ty == CellType::Reduction {
                cur *= 2;
            }
            let shape = CellShape {
                cell_type: ty,
                c_prev_prev: c_pp,
                c_prev: c_p,
                channels: cur,
                reduction_prev,
            };
            reduction_prev = ty == CellType::Reduction;
            c_pp = c_p;
            c_p = shape.output_channels();
            shapes.push(shape);
        }
        let m = c_p;
        for _ in 0..NUM_FUSION_CELLS {
            shapes.push(CellShape {
                cell_type: CellType::Fusion,
                c_prev_prev: m,
                c_prev: m,
                channels: cur,
                reduction_prev: false,
            });
        }
        shapes
    }
}

/// Multi-view images `[B, N_v, C, H, W]` with one label per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewBatch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl ViewBatch {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Self> {
        let s = images.shape();
        if s.len() != 5 {
            return Err(shape_err!("view batch must be [B, N_v, C, H, W], got {s:?}"));
        }
        if s[0] != labels.len() {
            return Err(shape_err!("{} samples but {} labels", s[0], labels.len()));
        }
        Ok(ViewBatch { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn check(&self, config: &SupernetConfig) -> Result<()> {
        let s = self.images.shape();
        let expect = [
            self.labels.len(),
            config.n_views,
            config.input_channels,
            config.input_resolution,
            config.input_resolution,
        ];
        if s != expect {
            return Err(shape_err!("batch shape {s:?} does not match configuration {expect:?}"));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= config.num_classes) {
            return Err(Error::Index(format!("label {bad} outside [0, {})", config.num_classes)));
        }
        if self.is_empty() {
            return Err(shape_err!("empty batch"));
        }
        Ok(())
    }
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutputs {
    /// `[B, m, N_v]` stacked per-view features.
    pub view_features: Var,
    /// `[B, N_v, K]`.
    pub view_logits: Var,
    /// `[B, K]`.
    pub shape_logits: Var,
    /// `[B, m]`, unit-norm rows.
    pub descriptor: Var,
}

/// The three training losses of one batch.
#[derive(Clone, Copy, Debug)]
pub struct Losses {
    pub shape_ce: Var,
    pub view_ce: Var,
    pub hinge: Var,
}

impl Losses {
    pub fn as_array(&self) -> [Var; 3] {
        [self.shape_ce, self.view_ce, self.hinge]
    }
}

#[derive(Clone, Debug)]
enum CellImpl {
    Mixed(MixedCell),
    Discrete(DiscreteCell),
}

impl CellImpl {
    fn shape(&self) -> &CellShape {
        match self {
            CellImpl::Mixed(c) => c.shape(),
            CellImpl::Discrete(c) => c.shape(),
        }
    }

    fn forward(&self, ctx: &mut Ctx, s0: Var, s1: Var, alphas: Option<&AlphaVars>) -> Result<Var> {
        match self {
            CellImpl::Mixed(c) => {
                let alphas = alphas.ok_or_else(|| config_err!("supernet forward needs architecture parameters"))?;
                c.forward(ctx, s0, s1, alphas.get(c.shape().cell_type))
            }
            CellImpl::Discrete(c) => c.forward(ctx, s0, s1),
        }
    }
}

#[derive(Clone, Debug)]
struct Linear {
    weight: ParamId,
    bias: ParamId,
}

impl Linear {
    fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, inputs: usize, outputs: usize) -> Self {
        let std = 1.0 / (inputs as f64).sqrt();
        Linear {
            weight: store.add(format!("{name}.w"), crate::nn::gaussian(&[outputs, inputs], std, rng)),
            bias: store.add(format!("{name}.b"), Tensor::zeros(&[outputs])),
        }
    }

    fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        ctx.tape.linear(x, w, Some(b))
    }
}

/// Either the weight-sharing supernet (every edge mixed) or a derived
/// network (two chosen ops per node).
#[derive(Clone, Debug)]
pub struct Network {
    config: SupernetConfig,
    stem: ParamId,
    stem_stats: StatId,
    cells: Vec<CellImpl>,
    view_head: Linear,
    shape_head: Linear,
}

impl Network {
    pub fn supernet<R: Rng>(config: &SupernetConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        Self::build(config, store, rng, |i, shape, store, rng| {
            MixedCell::new(*shape, store, rng, &format!("cell{i}")).map(CellImpl::Mixed)
        })
    }

    pub fn discrete<R: Rng>(
        config: &SupernetConfig,
        genotype: &Genotype,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        genotype.validate()?;
        Self::build(config, store, rng, |i, shape, store, rng| {
            DiscreteCell::new(*shape, genotype.cell(shape.cell_type), store, rng, &format!("cell{i}"))
                .map(CellImpl::Discrete)
        })
    }

    fn build<R: Rng>(
        config: &SupernetConfig,
        store: &mut ParamStore,
        rng: &mut R,
        mut make_cell: impl FnMut(usize, &CellShape, &mut ParamStore, &mut R) -> Result<CellImpl>,
    ) -> Result<Self> {
        config.validate()?;
        let c = config.init_channels;
        let cin = config.input_channels;
        let stem = store.add_kaiming("stem", &[c, cin, 3, 3], cin * 9, rng);
        let stem_stats = store.add_stats(c);
        let cells = config
            .cell_shapes()
            .iter()
            .enumerate()
            .map(|(i, s)| make_cell(i, s, store, rng))
            .collect::<Result<Vec<_>>>()?;
        let m = config.descriptor_dim();
        let view_head = Linear::new(store, rng, "view_head", m, config.num_classes);
        let shape_head = Linear::new(store, rng, "shape_head", m, config.num_classes);
        Ok(Network {
            config: config.clone(),
            stem,
            stem_stats,
            cells,
            view_head,
            shape_head,
        })
    }

    /// Derived network sharing this supernet's weights for the chosen ops.
    pub fn derive(&self, genotype: &Genotype) -> Result<Self> {
        genotype.validate()?;
        let cells = self
            .cells
            .iter()
            .map(|c| match c {
                CellImpl::Mixed(m) => {
                    DiscreteCell::from_mixed(m, genotype.cell(m.shape().cell_type)).map(CellImpl::Discrete)
                }
                CellImpl::Discrete(_) => Err(config_err!("only a supernet can be derived")),
            })
            .collect::<Result<_>>()?;
        Ok(Network {
            config: self.config.clone(),
            stem: self.stem,
            stem_stats: self.stem_stats,
            cells,
            view_head: self.view_head.clone(),
            shape_head: self.shape_head.clone(),
        })
    }

    pub fn config(&self) -> &SupernetConfig {
        &self.config
    }

    pub fn is_supernet(&self) -> bool {
        matches!(self.cells.first(), Some(CellImpl::Mixed(_)))
    }

    /// Genotype choices of a derived network's cells, in order.
    pub fn cell_choices(&self) -> Vec<(CellType, Vec<[(usize, crate::search_space::OpKind); 2]>)> {
        self.cells
            .iter()
            .filter_map(|c| match c {
                CellImpl::Discrete(d) => Some((d.shape().cell_type, d.choices())),
                CellImpl::Mixed(_) => None,
            })
            .collect()
    }

    /// Runs the network on a batch. `alphas` is required for the supernet.
    pub fn forward(&self, ctx: &mut Ctx, batch: &ViewBatch, alphas: Option<&AlphaVars>) -> Result<ForwardOutputs> {
        batch.check(&self.config)?;
        let cfg = &self.config;
        let (b, nv, k) = (batch.len(), cfg.n_views, cfg.num_classes);
        let res = cfg.input_resolution;
        let images = batch.images.clone().reshape(&[b * nv, cfg.input_channels, res, res])?;
        let x = ctx.tape.constant(images);

        let w = ctx.param(self.stem);
        let y = ctx.tape.conv2d(x, w, Conv2dParams::default().padding(1, 1))?;
        let stem = ctx.standardize(y, self.stem_stats)?;

        let (backbone, fusion) = self.cells.split_at(BACKBONE.len());
        let (mut s0, mut s1) = (stem, stem);
        for cell in backbone {
            let out = cell.forward(ctx, s0, s1, alphas)?;
            s0 = s1;
            s1 = out;
        }
        let m = cfg.descriptor_dim();
        let pooled = ctx.tape.global_avg_pool(s1)?;

        let view_logits = self.view_head.forward(ctx, pooled)?;
        let view_logits = ctx.tape.reshape(view_logits, &[b, nv, k])?;

        let per_sample = ctx.tape.reshape(pooled, &[b, nv, m])?;
        let view_features = ctx.tape.permute(per_sample, &[0, 2, 1])?;
        let stacked = ctx.tape.reshape(view_features, &[b, m, nv, 1])?;

        let mut f_prev = stacked;
        let mut f_cur = stacked;
        for cell in fusion {
            let out = cell.forward(ctx, f_prev, f_cur, alphas)?;
            f_prev = f_cur;
            f_cur = out;
        }
        let fused_dim = fusion.last().map(|c| c.shape().output_channels()).unwrap_or(m);
        let pooled = match cfg.view_pooling {
            ViewPooling::Avg => ctx.tape.global_avg_pool(f_cur)?,
            ViewPooling::Max => {
                let p = Pool2dParams {
                    kernel: (nv, 1),
                    stride: (1, 1),
                    padding: (0, 0),
                };
                let y = ctx.tape.pool2d(PoolKind::Max, f_cur, p)?;
                ctx.tape.reshape(y, &[b, fused_dim])?
            }
        };
        let shape_logits = self.shape_head.forward(ctx, pooled)?;
        let descriptor = ctx.tape.l2_normalize_rows(pooled)?;
        Ok(ForwardOutputs {
            view_features,
            view_logits,
            shape_logits,
            descriptor,
        })
    }
}

/// Shape cross-entropy, view cross-entropy (every view carries its shape's
/// label) and the hinge on descriptor similarity of differently labelled pairs.
pub fn compute_losses(ctx: &mut Ctx, outputs: &ForwardOutputs, labels: &[usize]) -> Result<Losses> {
    let tape = &mut ctx.tape;
    let b = labels.len();
    let shape_ce = tape.cross_entropy(outputs.shape_logits, labels)?;

    let vs = tape.shape(outputs.view_logits).to_vec();
    if vs.len() != 3 || vs[0] != b {
        return Err(shape_err!("view logits {vs:?} do not match {b} labels"));
    }
    let rows = tape.reshape(outputs.view_logits, &[b * vs[1], vs[2]])?;
    let view_labels: Vec<usize> = labels.iter().flat_map(|&l| std::iter::repeat_n(l, vs[1])).collect();
    let view_ce = tape.cross_entropy(rows, &view_labels)?;

    let hinge = descriptor_hinge(tape, outputs.descriptor, labels)?;
    Ok(Losses {
        shape_ce,
        view_ce,
        hinge,
    })
}

/// `sum_{i != j, y_i != y_j} max(d_i . d_j, 0)` over ordered pairs.
pub fn descriptor_hinge(tape: &mut crate::tensor::Tape, descriptor: Var, labels: &[usize]) -> Result<Var> {
    let b = labels.len();
    let mut mask = Tensor::zeros(&[b, b]);
    for (i, &yi) in labels.iter().enumerate() {
        for (j, &yj) in labels.iter().enumerate() {
            if yi != yj {
                mask.data_mut()[i * b + j] = 1.0;
            }
        }
    }
    let gram = tape.matmul_nt(descriptor, descriptor)?;
    let pos = tape.relu(gram)?;
    let masked = tape.mul_const(pos, &mask)?;
    tape.sum(masked)
}
