//! Analytic parameter and multiply-accumulate counts of a derived network.
//!
//! Convolutions cost `C_out * H' * W' * (C_in / groups) * kh * kw` MACs and
//! hold `C_out * (C_in / groups) * kh * kw` weights (no bias). Linear layers
//! cost `rows * out * in` MACs and hold `out * (in + 1)` weights. Pooling,
//! standardization, activations and additions count as zero.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::genotype::Genotype;
use crate::search_space::{CellShape, CellType, OpKind, NUM_INPUT_NODES};
use crate::supernet::{SupernetConfig, BACKBONE};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cost {
    pub params: u64,
    pub macs: u64,
}

impl Cost {
    fn add(&mut self, other: Cost) {
        self.params += other.params;
        self.macs += other.macs;
    }
}

/// Cost of one forward pass over a single `N_v`-view sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub params: u64,
    pub macs: u64,
    /// Stem and backbone cells, all views included.
    pub backbone: Cost,
    pub fusion: Cost,
    /// View and shape classifiers.
    pub heads: Cost,
    pub n_views: usize,
    pub resolution: usize,
}

impl CostReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:>14} {:>16}", "part", "params", "MACs")?;
        for (name, c) in [
            ("backbone", self.backbone),
            ("fusion", self.fusion),
            ("heads", self.heads),
        ] {
            writeln!(f, "{:<10} {:>14} {:>16}", name, c.params, c.macs)?;
        }
        writeln!(f, "{:<10} {:>14} {:>16}", "total", self.params, self.macs)?;
        write!(
            f,
            "({} views at {}x{}; {:.3} M params, {:.4} G MACs)",
            self.n_views,
            self.resolution,
            self.resolution,
            self.params as f64 / 1e6,
            self.macs as f64 / 1e9
        )
    }
}

fn conv(c_out: usize, c_in_per_group: usize, kernel: (usize, usize), out: (usize, usize)) -> Cost {
    let weights = (c_out * c_in_per_group * kernel.0 * kernel.1) as u64;
    Cost {
        params: weights,
        macs: weights * (out.0 * out.1) as u64,
    }
}

fn factorized_reduce(c_in: usize, c_out: usize, out: (usize, usize)) -> Cost {
    let mut c = conv(c_out / 2, c_in, (1, 1), out);
    c.add(conv(c_out / 2, c_in, (1, 1), out));
    c
}

fn op_cost(op: OpKind, channels: usize, stride: usize, fusion: bool, input: (usize, usize)) -> Cost {
    let out = (input.0.div_ceil(stride), input.1.div_ceil(stride));
    let kernel = |k: usize| if fusion { (k, 1) } else { (k, k) };
    let dw_pw = |k: usize| {
        let mut c = conv(channels, 1, kernel(k), out);
        c.add(conv(channels, channels, (1, 1), out));
        c
    };
    match op {
        OpKind::SepConv3x3 | OpKind::SepConv5x5 => {
            let k = if op == OpKind::SepConv3x3 { 3 } else { 5 };
            let mut c = dw_pw(k);
            c.add(dw_pw(k));
            c
        }
        OpKind::AtrousConv3x3 => dw_pw(3),
        OpKind::AtrousConv5x5 => dw_pw(5),
        OpKind::SkipConnect if stride == 2 => factorized_reduce(channels, channels, out),
        OpKind::AvgPool3x3 | OpKind::MaxPool3x3 | OpKind::SkipConnect | OpKind::Zero => Cost::default(),
    }
}

/// Cost of one cell whose input nodes have spatial size `input`.
fn cell_cost(shape: &CellShape, nodes: &[[(usize, OpKind); 2]], input: (usize, usize)) -> Cost {
    let mut c = Cost::default();
    let pre0_in = if shape.reduction_prev {
        (input.0 * 2, input.1 * 2)
    } else {
        input
    };
    if shape.reduction_prev {
        c.add(factorized_reduce(shape.c_prev_prev, shape.channels, input));
    } else {
        c.add(conv(shape.channels, shape.c_prev_prev, (1, 1), pre0_in));
    }
    c.add(conv(shape.channels, shape.c_prev, (1, 1), input));
    let fusion = shape.cell_type == CellType::Fusion;
    let reduce = shape.cell_type == CellType::Reduction;
    for inputs in nodes {
        for &(src, op) in inputs {
            let (stride, node_in) = if reduce && src < NUM_INPUT_NODES {
                (2, input)
            } else if reduce {
                (1, (input.0 / 2, input.1 / 2))
            } else {
                (1, input)
            };
            c.add(op_cost(op, shape.channels, stride, fusion, node_in));
        }
    }
    c
}

/// Parameters and MACs of the network derived from `genotype` for one sample
/// of `n_views` views at `resolution`. Backbone MACs scale with `n_views`.
pub fn cost_model(
    genotype: &Genotype,
    config: &SupernetConfig,
    resolution: usize,
    n_views: usize,
) -> Result<CostReport> {
    genotype.validate()?;
    let mut cfg = config.clone();
    cfg.input_resolution = resolution;
    cfg.n_views = n_views;
    cfg.validate()?;

    let mut per_view = conv(cfg.init_channels, cfg.input_channels, (3, 3), (resolution, resolution));
    let shapes = cfg.cell_shapes();
    let mut res = resolution;
    for shape in &shapes[..BACKBONE.len()] {
        per_view.add(cell_cost(shape, genotype.cell(shape.cell_type), (res, res)));
        if shape.cell_type == CellType::Reduction {
            res /= 2;
        }
    }
    let backbone = Cost {
        params: per_view.params,
        macs: per_view.macs * n_views as u64,
    };

    let mut fusion = Cost::default();
    for shape in &shapes[BACKBONE.len()..] {
        fusion.add(cell_cost(shape, genotype.cell(CellType::Fusion), (n_views, 1)));
    }

    let m = cfg.descriptor_dim() as u64;
    let k = cfg.num_classes as u64;
    let heads = Cost {
        params: 2 * k * (m + 1),
        macs: n_views as u64 * k * m + k * m,
    };

    Ok(CostReport {
        params: backbone.params + fusion.params + heads.params,
        macs: backbone.macs + fusion.macs + heads.macs,
        backbone,
        fusion,
        heads,
        n_views,
        resolution,
    })
}
