use super::kernels::{self, ConvGeom, PoolGeom};
use super::{Conv2dParams, Pool2dParams, PoolKind, Tensor};
use crate::error::{shape_err, Error, Result};

/// Variance floor added inside every standardization.
pub const STANDARDIZE_EPS: f64 = 1e-5;
/// Norm floor of row normalization.
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Vec<Var>),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    SelectRow(Var, usize),
    WeightedSum {
        weights: Var,
        inputs: Vec<Var>,
    },
    Conv2d {
        input: Var,
        weight: Var,
        geom: ConvGeom,
    },
    Pool2d {
        input: Var,
        geom: PoolGeom,
        argmax: Option<Vec<u32>>,
    },
    Crop {
        input: Var,
        top: usize,
        left: usize,
    },
    Standardize {
        input: Var,
        inv_std: Vec<f64>,
        batch: bool,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    GlobalAvgPool(Var),
    Softmax {
        input: Var,
        axis: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    MatMulNT(Var, Var),
    L2NormalizeRows {
        input: Var,
        norms: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(_) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MulConst(..) => "mul_const",
            Op::Relu(_) => "relu",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Reshape(_) => "reshape",
            Op::Permute(..) => "permute",
            Op::Concat { .. } => "concat",
            Op::SelectRow(..) => "select_row",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::Conv2d { .. } => "conv2d",
            Op::Pool2d { .. } => "pool2d",
            Op::Crop { .. } => "crop",
            Op::Standardize { .. } => "standardize",
            Op::Linear { .. } => "linear",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::Softmax { .. } => "softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::MatMulNT(..) => "matmul_nt",
            Op::L2NormalizeRows { .. } => "l2_normalize_rows",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Read-only description of a recorded primitive, used for cost accounting.
#[derive(Clone, Debug, PartialEq)]
pub enum OpSummary {
    Leaf {
        shape: Vec<usize>,
        requires_grad: bool,
    },
    Conv2d {
        input: Vec<usize>,
        weight: Vec<usize>,
        output: Vec<usize>,
        params: Conv2dParams,
    },
    Linear {
        input: Vec<usize>,
        weight: Vec<usize>,
        has_bias: bool,
    },
    Other(&'static str),
}

/// Ordered record of executed primitives. Inputs always precede the ops that
/// consume them, so a reverse sweep is a valid backward schedule.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Split `shape` around `axis` into `(outer, dim, inner)` extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..data.len() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a single-element variable.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn summaries(&self) -> impl Iterator<Item = OpSummary> + '_ {
        self.nodes.iter().map(move |n| match &n.op {
            Op::Leaf => OpSummary::Leaf {
                shape: n.value.shape().to_vec(),
                requires_grad: n.requires_grad,
            },
            Op::Conv2d { input, weight, geom } => OpSummary::Conv2d {
                input: self.shape(*input).to_vec(),
                weight: self.shape(*weight).to_vec(),
                output: n.value.shape().to_vec(),
                params: geom.p,
            },
            Op::Linear { input, weight, bias } => OpSummary::Linear {
                input: self.shape(*input).to_vec(),
                weight: self.shape(*weight).to_vec(),
                has_bias: bias.is_some(),
            },
            other => OpSummary::Other(other.name()),
        })
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite value produced by {}", op.name())));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!(
                "{what}: operand shapes differ: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    // ---- elementwise ----------------------------------------------------

    /// Sum of one or more same-shaped tensors.
    pub fn add_n(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| shape_err!("add_n needs at least one input"))?;
        let mut out = self.value(first).clone();
        for &v in &inputs[1..] {
            self.same_shape(first, v, "add")?;
            add_into(out.data_mut(), self.value(v).data());
        }
        self.push(out, Op::Add(inputs.to_vec()), inputs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.add_n(&[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v * s).collect();
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push(out, Op::Scale(x, s), &[x])
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(shape_err!("mul_const: {:?} vs constant {:?}", self.shape(x), c.shape()));
        }
        let data = self.value(x).data().iter().zip(c.data()).map(|(a, b)| a * b).collect();
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push(out, Op::MulConst(x, c.data().to_vec()), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v.max(0.0)).collect();
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(shape_err!("mean of an empty tensor"));
        }
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s / n as f64), Op::Mean(x), &[x])
    }

    // ---- layout ---------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push(out, Op::Reshape(x), &[x])
    }

    /// Reorder axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(shape_err!("invalid permutation {:?} for shape {:?}", perm, shape));
        }
        let (data, out_shape) = permute_data(self.value(x).data(), &shape, perm);
        let out = Tensor::new(out_shape, data)?;
        self.push(out, Op::Permute(x, perm.to_vec()), &[x])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| shape_err!("concat needs at least one input"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(shape_err!("concat axis {axis} out of range for {:?}", base));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err!(
                    "concat: {:?} incompatible with {:?} on axis {axis}",
                    s,
                    base
                ));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let d = self.shape(v)[axis];
                data.extend_from_slice(&self.value(v).data()[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let out = Tensor::new(out_shape, data)?;
        self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    /// Row `row` of a rank-2 tensor, as a rank-1 tensor.
    pub fn select_row(&mut self, x: Var, row: usize) -> Result<Var> {
        let shape = self.shape(x);
        if shape.len() != 2 || row >= shape[0] {
            return Err(shape_err!("select_row {row} from {:?}", shape));
        }
        let k = shape[1];
        let data = self.value(x).data()[row * k..(row + 1) * k].to_vec();
        self.push(Tensor::from_vec(data), Op::SelectRow(x, row), &[x])
    }

    /// Drop the first `top` rows and `left` columns of every plane of a
    /// `[b, c, h, w]` tensor.
    pub fn crop(&mut self, x: Var, top: usize, left: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || top >= s[2] || left >= s[3] {
            return Err(shape_err!("crop ({top},{left}) of {:?}", s));
        }
        let (h, w) = (s[2], s[3]);
        let (oh, ow) = (h - top, w - left);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(s[0] * s[1] * oh * ow);
        for p in 0..s[0] * s[1] {
            for y in top..h {
                let row = p * h * w + y * w;
                data.extend_from_slice(&src[row + left..row + w]);
            }
        }
        let out = Tensor::new(vec![s[0], s[1], oh, ow], data)?;
        self.push(out, Op::Crop { input: x, top, left }, &[x])
    }

    // ---- mixing -----------------------------------------------------------

    /// `sum_k weights[k] * inputs[k]` for a rank-1 `weights` of length `inputs.len()`.
    pub fn weighted_sum(&mut self, weights: Var, inputs: &[Var]) -> Result<Var> {
        let w = self.value(weights);
        if w.ndim() != 1 || w.numel() != inputs.len() || inputs.is_empty() {
            return Err(shape_err!(
                "weighted_sum: {} weights for {} inputs",
                w.numel(),
                inputs.len()
            ));
        }
        let w = w.data().to_vec();
        let first = inputs[0];
        let mut out = Tensor::zeros(self.shape(first));
        for (&v, &wk) in inputs.iter().zip(&w) {
            self.same_shape(first, v, "weighted_sum")?;
            for (o, x) in out.data_mut().iter_mut().zip(self.value(v).data()) {
                *o += wk * x;
            }
        }
        let mut deps = inputs.to_vec();
        deps.push(weights);
        self.push(
            out,
            Op::WeightedSum {
                weights,
                inputs: inputs.to_vec(),
            },
            &deps,
        )
    }

    // ---- convolution & pooling -----------------------------------------

    pub fn conv2d(&mut self, input: Var, weight: Var, params: Conv2dParams) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(input), self.shape(weight), params)?;
        let data = kernels::conv2d_forward(&geom, self.value(input).data(), self.value(weight).data());
        let out = Tensor::new(geom.out_shape(), data)?;
        self.push(out, Op::Conv2d { input, weight, geom }, &[input, weight])
    }

    pub fn pool2d(&mut self, kind: PoolKind, input: Var, params: Pool2dParams) -> Result<Var> {
        let geom = PoolGeom::new(self.shape(input), params)?;
        let s = self.shape(input).to_vec();
        let x = self.value(input).data();
        let (data, argmax) = match kind {
            PoolKind::Max => {
                let (d, a) = kernels::max_pool_forward(&geom, x);
                (d, Some(a))
            }
            PoolKind::Avg => (kernels::avg_pool_forward(&geom, x), None),
        };
        let out = Tensor::new(vec![s[0], s[1], geom.oh, geom.ow], data)?;
        self.push(out, Op::Pool2d { input, geom, argmax }, &[input])
    }

    /// Mean over every axis after the first two: `[b, c, ...] -> [b, c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 3 {
            return Err(shape_err!("global_avg_pool expects rank >= 3, got {:?}", s));
        }
        let area: usize = s[2..].iter().product();
        if area == 0 {
            return Err(shape_err!("global_avg_pool over empty spatial extent {:?}", s));
        }
        let data = self
            .value(x)
            .data()
            .chunks(area)
            .map(|c| c.iter().sum::<f64>() / area as f64)
            .collect();
        let out = Tensor::new(vec![s[0], s[1]], data)?;
        self.push(out, Op::GlobalAvgPool(x), &[x])
    }

    // ---- normalization ----------------------------------------------------

    /// Per-channel (axis 1) standardization with batch statistics. Returns the
    /// output plus the batch mean and biased variance of each channel.
    pub fn batch_standardize_with_stats(&mut self, x: Var) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(shape_err!("standardize expects rank >= 2, got {:?}", s));
        }
        let (outer, c, inner) = axis_split(&s, 1);
        let n = outer * inner;
        if n < 2 {
            return Err(Error::Numeric(format!(
                "standardize needs at least 2 elements per channel, shape {:?} has {}",
                s, n
            )));
        }
        let xd = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for o in 0..outer {
            for ch in 0..c {
                let blk = &xd[(o * c + ch) * inner..(o * c + ch + 1) * inner];
                mean[ch] += blk.iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        for o in 0..outer {
            for ch in 0..c {
                let blk = &xd[(o * c + ch) * inner..(o * c + ch + 1) * inner];
                var[ch] += blk.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + STANDARDIZE_EPS).sqrt()).collect();
        let out = self.standardized(x, &mean, &inv_std);
        let var_out = self.push(
            out,
            Op::Standardize {
                input: x,
                inv_std,
                batch: true,
            },
            &[x],
        )?;
        Ok((var_out, mean, var))
    }

    pub fn batch_standardize(&mut self, x: Var) -> Result<Var> {
        Ok(self.batch_standardize_with_stats(x)?.0)
    }

    /// Standardization with externally supplied per-channel statistics.
    pub fn standardize_fixed(&mut self, x: Var, mean: &[f64], var: &[f64]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || mean.len() != s[1] || var.len() != s[1] {
            return Err(shape_err!(
                "standardize_fixed: {} / {} statistics for shape {:?}",
                mean.len(),
                var.len(),
                s
            ));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + STANDARDIZE_EPS).sqrt()).collect();
        let out = self.standardized(x, mean, &inv_std);
        self.push(
            out,
            Op::Standardize {
                input: x,
                inv_std,
                batch: false,
            },
            &[x],
        )
    }

    fn standardized(&self, x: Var, mean: &[f64], inv_std: &[f64]) -> Tensor {
        let s = self.shape(x);
        let (outer, c, inner) = axis_split(s, 1);
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(xd.len());
        for o in 0..outer {
            for ch in 0..c {
                let blk = &xd[(o * c + ch) * inner..(o * c + ch + 1) * inner];
                data.extend(blk.iter().map(|v| (v - mean[ch]) * inv_std[ch]));
            }
        }
        Tensor {
            shape: s.to_vec(),
            data,
        }
    }

    // ---- dense ------------------------------------------------------------

    /// `input [b, d] x weight[k, d]^T + bias[k]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(input), self.shape(weight));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(shape_err!("linear: input {:?} vs weight {:?}", xs, ws));
        }
        let (b, d, k) = (xs[0], xs[1], ws[0]);
        if let Some(bv) = bias {
            if self.shape(bv) != [k] {
                return Err(shape_err!("linear: bias {:?}, expected [{k}]", self.shape(bv)));
            }
        }
        let mut out = vec![0.0; b * k];
        kernels::gemm(
            b,
            d,
            k,
            self.value(input).data(),
            false,
            self.value(weight).data(),
            true,
            &mut out,
            0.0,
        );
        if let Some(bv) = bias {
            let bd = self.value(bv).data();
            for row in out.chunks_mut(k) {
                add_into(row, bd);
            }
        }
        let out = Tensor::new(vec![b, k], out)?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        self.push(out, Op::Linear { input, weight, bias }, &deps)
    }

    /// `a [m, d] x b [n, d]^T -> [m, n]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(shape_err!("matmul_nt: {:?} vs {:?}", sa, sb));
        }
        let (m, d, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            d,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            true,
            &mut out,
            0.0,
        );
        let out = Tensor::new(vec![m, n], out)?;
        self.push(out, Op::MatMulNT(a, b), &[a, b])
    }

    /// Scale every row of a rank-2 tensor to unit Euclidean norm. Rows with
    /// norm below `NORM_EPS` are divided by `NORM_EPS` instead.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(shape_err!("l2_normalize_rows expects rank 2, got {:?}", s));
        }
        let mut norms = Vec::with_capacity(s[0]);
        let mut data = Vec::with_capacity(s[0] * s[1]);
        for row in self.value(x).data().chunks(s[1].max(1)) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
            norms.push(norm);
            data.extend(row.iter().map(|v| v / norm));
        }
        let out = Tensor::new(s, data)?;
        self.push(out, Op::L2NormalizeRows { input: x, norms }, &[x])
    }

    // ---- probabilities ------------------------------------------------------

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(shape_err!("softmax axis {axis} out of range for {:?}", s));
        }
        let (outer, dim, inner) = axis_split(&s, axis);
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * dim + k) * inner + i;
                let max = (0..dim).map(|k| xd[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..dim {
                    let e = (xd[at(k)] - max).exp();
                    out[at(k)] = e;
                    z += e;
                }
                for k in 0..dim {
                    out[at(k)] /= z;
                }
            }
        }
        let out = Tensor::new(s, out)?;
        self.push(out, Op::Softmax { input: x, axis }, &[x])
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(shape_err!("cross_entropy: logits {:?} with {} labels", s, labels.len()));
        }
        let (b, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Index(format!("label {bad} out of range for {k} classes")));
        }
        let xd = self.value(logits).data();
        let mut probs = vec![0.0; b * k];
        let mut loss = 0.0;
        for r in 0..b {
            let row = &xd[r * k..(r + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = z.ln() + max;
            loss += log_z - row[labels[r]];
            for (p, v) in probs[r * k..(r + 1) * k].iter_mut().zip(row) {
                *p = (v - log_z).exp();
            }
        }
        self.push(
            Tensor::scalar(loss / b as f64),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Gradients accumulate into the
    /// `grad` buffer of every leaf that requires grad; call
    /// [`Tape::zero_grad`] to reset them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for k in (0..=loss.0).rev() {
            let Some(g) = grads[k].take() else { continue };
            if !self.nodes[k].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[k].op {
                let node = &mut self.nodes[k];
                match &mut node.grad {
                    Some(acc) => add_into(acc.data_mut(), &g),
                    None => {
                        node.grad = Some(Tensor {
                            shape: node.value.shape().to_vec(),
                            data: g,
                        })
                    }
                }
                continue;
            }
            self.propagate(k, &g, &mut grads)?;
        }
        Ok(())
    }

    fn propagate(&self, k: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, delta: Vec<f64>| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => add_into(existing, &delta),
                slot @ None => *slot = Some(delta),
            }
        };
        let val = |v: Var| nodes[v.0].value.data();
        let out = nodes[k].value.data();

        match &nodes[k].op {
            Op::Leaf => unreachable!("leaves are handled by backward"),
            Op::Add(inputs) => {
                for &v in inputs {
                    acc(v, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    acc(*a, g.iter().zip(val(*b)).map(|(g, y)| g * y).collect());
                }
                if needs(*b) {
                    acc(*b, g.iter().zip(val(*a)).map(|(g, x)| g * x).collect());
                }
            }
            Op::Scale(x, s) => acc(*x, g.iter().map(|v| v * s).collect()),
            Op::MulConst(x, c) => acc(*x, g.iter().zip(c).map(|(g, c)| g * c).collect()),
            Op::Relu(x) => acc(
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect(),
            ),
            Op::Sum(x) => acc(*x, vec![g[0]; val(*x).len()]),
            Op::Mean(x) => {
                let n = val(*x).len();
                acc(*x, vec![g[0] / n as f64; n]);
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::Permute(x, perm) => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let (d, _) = permute_data(g, nodes[k].value.shape(), &inverse);
                acc(*x, d);
            }
            Op::Concat { inputs, axis } => {
                let shape = nodes[k].value.shape();
                let (outer, total, inner) = axis_split(shape, *axis);
                let mut start = 0;
                for &v in inputs {
                    let d = nodes[v.0].value.shape()[*axis];
                    if needs(v) {
                        let mut part = Vec::with_capacity(outer * d * inner);
                        for o in 0..outer {
                            let base = (o * total + start) * inner;
                            part.extend_from_slice(&g[base..base + d * inner]);
                        }
                        acc(v, part);
                    }
                    start += d;
                }
            }
            Op::SelectRow(x, row) => {
                let mut d = vec![0.0; val(*x).len()];
                let kdim = g.len();
                d[row * kdim..(row + 1) * kdim].copy_from_slice(g);
                acc(*x, d);
            }
            Op::WeightedSum { weights, inputs } => {
                let w = val(*weights);
                if needs(*weights) {
                    let dw = inputs
                        .iter()
                        .map(|&v| val(v).iter().zip(g).map(|(x, g)| x * g).sum())
                        .collect();
                    acc(*weights, dw);
                }
                for (&v, &wk) in inputs.iter().zip(w) {
                    if needs(v) {
                        acc(v, g.iter().map(|g| g * wk).collect());
                    }
                }
            }
            Op::Conv2d { input, weight, geom } => {
                let (dx, dw) =
                    kernels::conv2d_backward(geom, val(*input), val(*weight), g, needs(*input), needs(*weight));
                if let Some(dx) = dx {
                    acc(*input, dx);
                }
                if let Some(dw) = dw {
                    acc(*weight, dw);
                }
            }
            Op::Pool2d { input, geom, argmax } => {
                let dx = match argmax {
                    Some(arg) => kernels::max_pool_backward(val(*input).len(), arg, g),
                    None => kernels::avg_pool_backward(geom, g),
                };
                acc(*input, dx);
            }
            Op::Crop { input, top, left } => {
                let s = nodes[input.0].value.shape();
                let (h, w) = (s[2], s[3]);
                let ow = w - left;
                let mut d = vec![0.0; val(*input).len()];
                for (i, row) in g.chunks(ow).enumerate() {
                    let (p, y) = (i / (h - top), i % (h - top) + top);
                    let base = p * h * w + y * w + left;
                    d[base..base + ow].copy_from_slice(row);
                }
                acc(*input, d);
            }
            Op::Standardize { input, inv_std, batch } => {
                let shape = nodes[k].value.shape();
                let (outer, c, inner) = axis_split(shape, 1);
                let mut d = vec![0.0; g.len()];
                if *batch {
                    let n = (outer * inner) as f64;
                    let mut sum_g = vec![0.0; c];
                    let mut sum_gy = vec![0.0; c];
                    for o in 0..outer {
                        for ch in 0..c {
                            let r = (o * c + ch) * inner..(o * c + ch + 1) * inner;
                            for (gv, yv) in g[r.clone()].iter().zip(&out[r]) {
                                sum_g[ch] += gv;
                                sum_gy[ch] += gv * yv;
                            }
                        }
                    }
                    for o in 0..outer {
                        for ch in 0..c {
                            let r = (o * c + ch) * inner..(o * c + ch + 1) * inner;
                            let (mg, mgy, is) = (sum_g[ch] / n, sum_gy[ch] / n, inv_std[ch]);
                            for ((dv, gv), yv) in d[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&out[r]) {
                                *dv = is * (gv - mg - yv * mgy);
                            }
                        }
                    }
                } else {
                    for o in 0..outer {
                        for ch in 0..c {
                            let r = (o * c + ch) * inner..(o * c + ch + 1) * inner;
                            for (dv, gv) in d[r.clone()].iter_mut().zip(&g[r]) {
                                *dv = gv * inv_std[ch];
                            }
                        }
                    }
                }
                acc(*input, d);
            }
            Op::Linear { input, weight, bias } => {
                let xs = nodes[input.0].value.shape();
                let (b, d) = (xs[0], xs[1]);
                let kdim = nodes[weight.0].value.shape()[0];
                if needs(*input) {
                    let mut dx = vec![0.0; b * d];
                    kernels::gemm(b, kdim, d, g, false, val(*weight), false, &mut dx, 0.0);
                    acc(*input, dx);
                }
                if needs(*weight) {
                    let mut dw = vec![0.0; kdim * d];
                    kernels::gemm(kdim, b, d, g, true, val(*input), false, &mut dw, 0.0);
                    acc(*weight, dw);
                }
                if let Some(bv) = bias {
                    if needs(*bv) {
                        let mut db = vec![0.0; kdim];
                        for row in g.chunks(kdim) {
                            add_into(&mut db, row);
                        }
                        acc(*bv, db);
                    }
                }
            }
            Op::GlobalAvgPool(x) => {
                let area = val(*x).len() / g.len();
                let d = g
                    .iter()
                    .flat_map(|gv| std::iter::repeat_n(gv / area as f64, area))
                    .collect();
                acc(*x, d);
            }
            Op::Softmax { input, axis } => {
                let (outer, dim, inner) = axis_split(nodes[k].value.shape(), *axis);
                let mut d = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |kk: usize| (o * dim + kk) * inner + i;
                        let dot: f64 = (0..dim).map(|kk| g[at(kk)] * out[at(kk)]).sum();
                        for kk in 0..dim {
                            d[at(kk)] = out[at(kk)] * (g[at(kk)] - dot);
                        }
                    }
                }
                acc(*input, d);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let b = labels.len();
                let kdim = probs.len() / b;
                let scale = g[0] / b as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * kdim + l] -= scale;
                }
                acc(*logits, d);
            }
            Op::MatMulNT(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, d, n) = (sa[0], sa[1], sb[0]);
                if needs(*a) {
                    let mut da = vec![0.0; m * d];
                    kernels::gemm(m, n, d, g, false, val(*b), false, &mut da, 0.0);
                    acc(*a, da);
                }
                if needs(*b) {
                    let mut db = vec![0.0; n * d];
                    kernels::gemm(n, m, d, g, true, val(*a), false, &mut db, 0.0);
                    acc(*b, db);
                }
            }
            Op::L2NormalizeRows { input, norms } => {
                let cols = g.len() / norms.len();
                let mut d = vec![0.0; g.len()];
                for (r, &norm) in norms.iter().enumerate() {
                    let rg = &g[r * cols..(r + 1) * cols];
                    let ry = &out[r * cols..(r + 1) * cols];
                    let dot: f64 = if norm > NORM_EPS {
                        rg.iter().zip(ry).map(|(a, b)| a * b).sum()
                    } else {
                        0.0
                    };
                    for ((dv, gv), yv) in d[r * cols..(r + 1) * cols].iter_mut().zip(rg).zip(ry) {
                        *dv = (gv - yv * dot) / norm;
                    }
                }
                acc(*input, d);
            }
        }
        Ok(())
    }
}
