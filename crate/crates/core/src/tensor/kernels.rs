//! Raw convolution, pooling and GEMM kernels over row-major slices.
//!
//! Everything here is single-threaded and accumulates in a fixed order, so
//! identical inputs always produce bitwise-identical outputs.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};

/// Geometry of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dParams {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
    pub groups: usize,
}

impl Default for Conv2dParams {
    fn default() -> Self {
        Conv2dParams {
            stride: (1, 1),
            padding: (0, 0),
            dilation: (1, 1),
            groups: 1,
        }
    }
}

impl Conv2dParams {
    pub fn stride(mut self, s: usize) -> Self {
        self.stride = (s, s);
        self
    }

    pub fn padding(mut self, ph: usize, pw: usize) -> Self {
        self.padding = (ph, pw);
        self
    }

    pub fn dilation(mut self, dh: usize, dw: usize) -> Self {
        self.dilation = (dh, dw);
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PoolKind {
    Max,
    Avg,
}

/// Geometry of a 2-D pooling window. Average pooling always divides by the
/// full window area, padding included.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pool2dParams {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

/// `floor((input + 2*padding - dilation*(kernel-1) - 1) / stride) + 1`, or
/// `None` when the dilated kernel does not fit in the padded input.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, padding: usize, dilation: usize) -> Option<usize> {
    if kernel == 0 || stride == 0 || dilation == 0 {
        return None;
    }
    let span = dilation * (kernel - 1) + 1;
    let padded = input + 2 * padding;
    (padded >= span).then(|| (padded - span) / stride + 1)
}

/// Range `[lo, hi)` of output positions `o` whose input coordinate
/// `o * stride + offset` lies inside `[0, len)`.
#[inline]
fn valid_range(out_len: usize, len: usize, stride: usize, offset: isize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { (-offset + s - 1) / s };
    let last = len as isize - 1 - offset;
    let hi = if last < 0 { 0 } else { last / s + 1 };
    let hi = hi.min(out_len as isize).max(0) as usize;
    let lo = (lo as usize).min(hi);
    (lo, hi)
}

/// `c = beta * c + op(a) * op(b)` with `op(a)` of size `m x k` and `op(b)` of
/// size `k x n`, all row-major. `a_t` / `b_t` mark operands stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the slices, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Fully resolved convolution geometry.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub b: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub p: Conv2dParams,
}

impl ConvGeom {
    pub fn new(input: &[usize], weight: &[usize], p: Conv2dParams) -> Result<Self> {
        if input.len() != 4 || weight.len() != 4 {
            return Err(shape_err!(
                "conv2d expects rank-4 input and weight, got {:?} and {:?}",
                input,
                weight
            ));
        }
        if p.groups == 0 || p.stride.0 == 0 || p.stride.1 == 0 || p.dilation.0 == 0 || p.dilation.1 == 0 {
            return Err(config_err!("conv2d stride, dilation and groups must be >= 1: {p:?}"));
        }
        let (b, cin, h, w) = (input[0], input[1], input[2], input[3]);
        let (cout, cin_g, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
        if cin % p.groups != 0 || cout % p.groups != 0 {
            return Err(config_err!(
                "groups={} must divide input channels {} and output channels {}",
                p.groups,
                cin,
                cout
            ));
        }
        if cin / p.groups != cin_g {
            return Err(shape_err!(
                "weight expects {} input channels per group, input provides {}",
                cin_g,
                cin / p.groups
            ));
        }
        let oh = conv_output_size(h, kh, p.stride.0, p.padding.0, p.dilation.0);
        let ow = conv_output_size(w, kw, p.stride.1, p.padding.1, p.dilation.1);
        match (oh, ow) {
            (Some(oh), Some(ow)) => Ok(ConvGeom {
                b,
                cin,
                h,
                w,
                cout,
                kh,
                kw,
                oh,
                ow,
                p,
            }),
            _ => Err(shape_err!(
                "kernel {kh}x{kw} (dilation {:?}) does not fit padded input {h}x{w} (padding {:?})",
                p.dilation,
                p.padding
            )),
        }
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.b, self.cout, self.oh, self.ow]
    }

    fn cin_g(&self) -> usize {
        self.cin / self.p.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.p.groups
    }

    fn is_depthwise(&self) -> bool {
        self.cin_g() == 1 && self.cout_g() == 1
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.p.stride == (1, 1) && self.p.padding == (0, 0)
    }

    /// Input coordinate offset of tap `(ki, kj)`.
    #[inline]
    fn tap_offset(&self, ki: usize, kj: usize) -> (isize, isize) {
        (
            (ki * self.p.dilation.0) as isize - self.p.padding.0 as isize,
            (kj * self.p.dilation.1) as isize - self.p.padding.1 as isize,
        )
    }
}

/// Unfold the channels `[c0, c0 + cin_g)` of one image into a
/// `(cin_g * kh * kw) x (oh * ow)` column matrix.
fn im2col(g: &ConvGeom, image: &[f64], c0: usize, col: &mut [f64]) {
    let n = g.oh * g.ow;
    let (sh, sw) = g.p.stride;
    col.fill(0.0);
    for ci in 0..g.cin_g() {
        let plane = &image[(c0 + ci) * g.h * g.w..(c0 + ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * n..(row + 1) * n];
                let (oy_off, ox_off) = g.tap_offset(ki, kj);
                let (ylo, yhi) = valid_range(g.oh, g.h, sh, oy_off);
                let (xlo, xhi) = valid_range(g.ow, g.w, sw, ox_off);
                for oy in ylo..yhi {
                    let iy = (oy * sh) as isize + oy_off;
                    let src_row = iy as usize * g.w;
                    for ox in xlo..xhi {
                        let ix = ((ox * sw) as isize + ox_off) as usize;
                        dst[oy * g.ow + ox] = plane[src_row + ix];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add a column matrix back into an image.
fn col2im(g: &ConvGeom, col: &[f64], c0: usize, image: &mut [f64]) {
    let n = g.oh * g.ow;
    let (sh, sw) = g.p.stride;
    for ci in 0..g.cin_g() {
        let plane = &mut image[(c0 + ci) * g.h * g.w..(c0 + ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &col[row * n..(row + 1) * n];
                let (oy_off, ox_off) = g.tap_offset(ki, kj);
                let (ylo, yhi) = valid_range(g.oh, g.h, sh, oy_off);
                let (xlo, xhi) = valid_range(g.ow, g.w, sw, ox_off);
                for oy in ylo..yhi {
                    let iy = (oy * sh) as isize + oy_off;
                    let dst_row = iy as usize * g.w;
                    for ox in xlo..xhi {
                        let ix = ((ox * sw) as isize + ox_off) as usize;
                        plane[dst_row + ix] += src[oy * g.ow + ox];
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; g.b * g.cout * g.oh * g.ow];
    if g.is_depthwise() {
        depthwise_forward(g, x, w, &mut out);
        return out;
    }
    let n = g.oh * g.ow;
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let k = cin_g * g.kh * g.kw;
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![0.0; k * n] };
    for b in 0..g.b {
        let image = &x[b * g.cin * g.h * g.w..(b + 1) * g.cin * g.h * g.w];
        for grp in 0..g.p.groups {
            let wg = &w[grp * cout_g * k..(grp + 1) * cout_g * k];
            let og = &mut out[(b * g.cout + grp * cout_g) * n..(b * g.cout + (grp + 1) * cout_g) * n];
            if g.is_pointwise() {
                let xg = &image[grp * cin_g * n..(grp + 1) * cin_g * n];
                gemm(cout_g, k, n, wg, false, xg, false, og, 0.0);
            } else {
                im2col(g, image, grp * cin_g, &mut col);
                gemm(cout_g, k, n, wg, false, &col, false, og, 0.0);
            }
        }
    }
    out
}

/// Gradients of a convolution with respect to its input and weight.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let mut dx = need_dx.then(|| vec![0.0; x.len()]);
    let mut dw = need_dw.then(|| vec![0.0; w.len()]);
    if g.is_depthwise() {
        depthwise_backward(g, x, w, dy, dx.as_deref_mut(), dw.as_deref_mut());
        return (dx, dw);
    }
    let n = g.oh * g.ow;
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let k = cin_g * g.kh * g.kw;
    let pointwise = g.is_pointwise();
    let mut col = if pointwise { Vec::new() } else { vec![0.0; k * n] };
    let mut dcol = if pointwise || !need_dx {
        Vec::new()
    } else {
        vec![0.0; k * n]
    };
    for b in 0..g.b {
        let img_len = g.cin * g.h * g.w;
        let image = &x[b * img_len..(b + 1) * img_len];
        for grp in 0..g.p.groups {
            let wg = &w[grp * cout_g * k..(grp + 1) * cout_g * k];
            let dyg = &dy[(b * g.cout + grp * cout_g) * n..(b * g.cout + (grp + 1) * cout_g) * n];
            if let Some(dw) = dw.as_deref_mut() {
                let dwg = &mut dw[grp * cout_g * k..(grp + 1) * cout_g * k];
                if pointwise {
                    let xg = &image[grp * cin_g * n..(grp + 1) * cin_g * n];
                    gemm(cout_g, n, k, dyg, false, xg, true, dwg, 1.0);
                } else {
                    im2col(g, image, grp * cin_g, &mut col);
                    gemm(cout_g, n, k, dyg, false, &col, true, dwg, 1.0);
                }
            }
            if let Some(dx) = dx.as_deref_mut() {
                let dimage = &mut dx[b * img_len..(b + 1) * img_len];
                if pointwise {
                    let dxg = &mut dimage[grp * cin_g * n..(grp + 1) * cin_g * n];
                    gemm(k, cout_g, n, wg, true, dyg, false, dxg, 1.0);
                } else {
                    gemm(k, cout_g, n, wg, true, dyg, false, &mut dcol, 0.0);
                    col2im(g, &dcol, grp * cin_g, dimage);
                }
            }
        }
    }
    (dx, dw)
}

/// Copies one `h x w` plane into the interior of a zero-bordered
/// `(h + 2 ph) x (w + 2 pw)` buffer whose border is already filled.
fn fill_padded(src: &[f64], h: usize, w: usize, ph: usize, pw: usize, dst: &mut [f64]) {
    let wp = w + 2 * pw;
    for y in 0..h {
        let d = (y + ph) * wp + pw;
        dst[d..d + w].copy_from_slice(&src[y * w..(y + 1) * w]);
    }
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Layout shared by the padded-plane kernels. With unit stride every output
/// row is computed at the padded width, so each tap is one contiguous sweep
/// of `span` elements; the extra columns are discarded.
struct PaddedPlane {
    hp: usize,
    wp: usize,
    span: usize,
}

impl PaddedPlane {
    fn new(h: usize, w: usize, pad: (usize, usize), out: (usize, usize)) -> Self {
        let wp = w + 2 * pad.1;
        PaddedPlane {
            hp: h + 2 * pad.0,
            wp,
            span: (out.0 - 1) * wp + out.1,
        }
    }

    fn len(&self) -> usize {
        self.hp * self.wp
    }
}

fn depthwise_forward(g: &ConvGeom, x: &[f64], w: &[f64], out: &mut [f64]) {
    let (sh, sw) = g.p.stride;
    let (dh, dw) = g.p.dilation;
    let (ph, pw) = g.p.padding;
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let taps = g.kh * g.kw;
    let pp = PaddedPlane::new(g.h, g.w, (ph, pw), (g.oh, g.ow));
    let mut pad = vec![0.0; pp.len()];
    let unit = (sh, sw) == (1, 1);
    let mut flat = vec![0.0; if unit { pp.span } else { 0 }];
    for bc in 0..g.b * g.cin {
        let c = bc % g.cin;
        fill_padded(&x[bc * plane_in..(bc + 1) * plane_in], g.h, g.w, ph, pw, &mut pad);
        let yp = &mut out[bc * plane_out..(bc + 1) * plane_out];
        let wc = &w[c * taps..(c + 1) * taps];
        if unit {
            flat.fill(0.0);
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let off = ki * dh * pp.wp + kj * dw;
                    axpy(&mut flat, wc[ki * g.kw + kj], &pad[off..off + pp.span]);
                }
            }
            for oy in 0..g.oh {
                yp[oy * g.ow..(oy + 1) * g.ow].copy_from_slice(&flat[oy * pp.wp..oy * pp.wp + g.ow]);
            }
        } else {
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let wv = wc[ki * g.kw + kj];
                    for oy in 0..g.oh {
                        let row = (oy * sh + ki * dh) * pp.wp + kj * dw;
                        for (ox, yv) in yp[oy * g.ow..(oy + 1) * g.ow].iter_mut().enumerate() {
                            *yv += wv * pad[row + ox * sw];
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dw_out: Option<&mut [f64]>,
) {
    let (sh, sw) = g.p.stride;
    let (dh, dw) = g.p.dilation;
    let (ph, pw) = g.p.padding;
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let taps = g.kh * g.kw;
    let pp = PaddedPlane::new(g.h, g.w, (ph, pw), (g.oh, g.ow));
    let mut pad = vec![0.0; pp.len()];
    let mut dpad = vec![0.0; if dx.is_some() { pp.len() } else { 0 }];
    let unit = (sh, sw) == (1, 1);
    let mut flat = vec![0.0; if unit { pp.span } else { 0 }];
    for bc in 0..g.b * g.cin {
        let c = bc % g.cin;
        let dyp = &dy[bc * plane_out..(bc + 1) * plane_out];
        if dw_out.is_some() {
            fill_padded(&x[bc * plane_in..(bc + 1) * plane_in], g.h, g.w, ph, pw, &mut pad);
        }
        dpad.fill(0.0);
        if unit {
            flat.fill(0.0);
            for oy in 0..g.oh {
                flat[oy * pp.wp..oy * pp.wp + g.ow].copy_from_slice(&dyp[oy * g.ow..(oy + 1) * g.ow]);
            }
        }
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let t = c * taps + ki * g.kw + kj;
                let off = ki * dh * pp.wp + kj * dw;
                if unit {
                    if let Some(dwv) = dw_out.as_deref_mut() {
                        dwv[t] += dot(&flat, &pad[off..off + pp.span]);
                    }
                    if dx.is_some() {
                        axpy(&mut dpad[off..off + pp.span], w[t], &flat);
                    }
                    continue;
                }
                let mut acc = 0.0;
                for oy in 0..g.oh {
                    let row = (oy * sh + ki * dh) * pp.wp + kj * dw;
                    let dyrow = &dyp[oy * g.ow..(oy + 1) * g.ow];
                    if dw_out.is_some() {
                        for (ox, &gv) in dyrow.iter().enumerate() {
                            acc += gv * pad[row + ox * sw];
                        }
                    }
                    if dx.is_some() {
                        for (ox, &gv) in dyrow.iter().enumerate() {
                            dpad[row + ox * sw] += w[t] * gv;
                        }
                    }
                }
                if let Some(dwv) = dw_out.as_deref_mut() {
                    dwv[t] += acc;
                }
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxp = &mut dx[bc * plane_in..(bc + 1) * plane_in];
            for y in 0..g.h {
                let s = (y + ph) * pp.wp + pw;
                for (d, v) in dxp[y * g.w..(y + 1) * g.w].iter_mut().zip(&dpad[s..s + g.w]) {
                    *d += v;
                }
            }
        }
    }
}

/// Resolved pooling geometry for a `[b, c, h, w]` input.
#[derive(Clone, Copy, Debug)]
pub(crate) struct PoolGeom {
    pub planes: usize,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
    pub p: Pool2dParams,
}

impl PoolGeom {
    pub fn new(input: &[usize], p: Pool2dParams) -> Result<Self> {
        if input.len() != 4 {
            return Err(shape_err!("pool2d expects rank-4 input, got {:?}", input));
        }
        if p.kernel.0 == 0 || p.kernel.1 == 0 || p.stride.0 == 0 || p.stride.1 == 0 {
            return Err(config_err!("pool2d kernel and stride must be >= 1: {p:?}"));
        }
        let (h, w) = (input[2], input[3]);
        let oh = conv_output_size(h, p.kernel.0, p.stride.0, p.padding.0, 1);
        let ow = conv_output_size(w, p.kernel.1, p.stride.1, p.padding.1, 1);
        match (oh, ow) {
            (Some(oh), Some(ow)) => Ok(PoolGeom {
                planes: input[0] * input[1],
                h,
                w,
                oh,
                ow,
                p,
            }),
            _ => Err(shape_err!(
                "pool kernel {:?} larger than padded input {}x{} (padding {:?})",
                p.kernel,
                h,
                w,
                p.padding
            )),
        }
    }
}

/// Max pooling. Returns the output and, per output element, the linear
/// input index that won (first maximum in row-major window order).
pub(crate) fn max_pool_forward(g: &PoolGeom, x: &[f64]) -> (Vec<f64>, Vec<u32>) {
    let (kh, kw) = g.p.kernel;
    let (sh, sw) = g.p.stride;
    let (ph, pw) = g.p.padding;
    let pp = PaddedPlane::new(g.h, g.w, (ph, pw), (g.oh, g.ow));
    let mut pad = vec![f64::NEG_INFINITY; pp.len()];
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let mut out = vec![0.0; g.planes * plane_out];
    let mut arg = vec![0u32; out.len()];
    let mut best = vec![0.0; plane_out];
    let mut best_at = vec![0usize; plane_out];
    for pl in 0..g.planes {
        fill_padded(&x[pl * plane_in..(pl + 1) * plane_in], g.h, g.w, ph, pw, &mut pad);
        best.fill(f64::NEG_INFINITY);
        best_at.fill(usize::MAX);
        for ki in 0..kh {
            for kj in 0..kw {
                for oy in 0..g.oh {
                    let row = (oy * sh + ki) * pp.wp + kj;
                    for ox in 0..g.ow {
                        let at = row + ox * sw;
                        let o = oy * g.ow + ox;
                        if pad[at] > best[o] {
                            best[o] = pad[at];
                            best_at[o] = at;
                        }
                    }
                }
            }
        }
        for o in 0..plane_out {
            let dst = pl * plane_out + o;
            // A window entirely inside the padding pools to zero.
            if best_at[o] == usize::MAX {
                out[dst] = 0.0;
                arg[dst] = u32::MAX;
            } else {
                let (py, px) = (best_at[o] / pp.wp, best_at[o] % pp.wp);
                out[dst] = best[o];
                arg[dst] = (pl * plane_in + (py - ph) * g.w + (px - pw)) as u32;
            }
        }
    }
    (out, arg)
}

pub(crate) fn max_pool_backward(input_len: usize, arg: &[u32], dy: &[f64]) -> Vec<f64> {
    let mut dx = vec![0.0; input_len];
    for (&a, &g) in arg.iter().zip(dy) {
        if a != u32::MAX {
            dx[a as usize] += g;
        }
    }
    dx
}

pub(crate) fn avg_pool_forward(g: &PoolGeom, x: &[f64]) -> Vec<f64> {
    let (kh, kw) = g.p.kernel;
    let (sh, sw) = g.p.stride;
    let (ph, pw) = g.p.padding;
    let inv_area = 1.0 / (kh * kw) as f64;
    let pp = PaddedPlane::new(g.h, g.w, (ph, pw), (g.oh, g.ow));
    let mut pad = vec![0.0; pp.len()];
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let mut out = vec![0.0; g.planes * plane_out];
    for pl in 0..g.planes {
        fill_padded(&x[pl * plane_in..(pl + 1) * plane_in], g.h, g.w, ph, pw, &mut pad);
        let yp = &mut out[pl * plane_out..(pl + 1) * plane_out];
        for ki in 0..kh {
            for kj in 0..kw {
                for oy in 0..g.oh {
                    let row = (oy * sh + ki) * pp.wp + kj;
                    for (ox, yv) in yp[oy * g.ow..(oy + 1) * g.ow].iter_mut().enumerate() {
                        *yv += pad[row + ox * sw];
                    }
                }
            }
        }
        yp.iter_mut().for_each(|v| *v *= inv_area);
    }
    out
}

pub(crate) fn avg_pool_backward(g: &PoolGeom, dy: &[f64]) -> Vec<f64> {
    let (kh, kw) = g.p.kernel;
    let (sh, sw) = g.p.stride;
    let (ph, pw) = g.p.padding;
    let inv_area = 1.0 / (kh * kw) as f64;
    let pp = PaddedPlane::new(g.h, g.w, (ph, pw), (g.oh, g.ow));
    let mut dpad = vec![0.0; pp.len()];
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let mut dx = vec![0.0; g.planes * plane_in];
    for pl in 0..g.planes {
        dpad.fill(0.0);
        let dyp = &dy[pl * plane_out..(pl + 1) * plane_out];
        for ki in 0..kh {
            for kj in 0..kw {
                for oy in 0..g.oh {
                    let row = (oy * sh + ki) * pp.wp + kj;
                    for (ox, &gv) in dyp[oy * g.ow..(oy + 1) * g.ow].iter().enumerate() {
                        dpad[row + ox * sw] += gv;
                    }
                }
            }
        }
        let dxp = &mut dx[pl * plane_in..(pl + 1) * plane_in];
        for y in 0..g.h {
            let s = (y + ph) * pp.wp + pw;
            for (d, v) in dxp[y * g.w..(y + 1) * g.w].iter_mut().zip(&dpad[s..s + g.w]) {
                *d = v * inv_area;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_size_formula() {
        assert_eq!(conv_output_size(16, 3, 1, 1, 1), Some(16));
        assert_eq!(conv_output_size(16, 3, 2, 1, 1), Some(8));
        assert_eq!(conv_output_size(16, 5, 2, 4, 2), Some(8));
        assert_eq!(conv_output_size(2, 5, 1, 0, 1), None);
    }

    #[test]
    fn valid_range_clips_both_ends() {
        // o*1 - 1 in [0, 4) for o in [0, 4) -> o in [1, 4)
        assert_eq!(valid_range(4, 4, 1, -1), (1, 4));
        // o*2 + 1 in [0, 4) -> o in {0, 1}
        assert_eq!(valid_range(4, 4, 2, 1), (0, 2));
        assert_eq!(valid_range(3, 2, 1, 5), (0, 0));
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, 0.0);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, &mut c, 0.0);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, 0.0);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }
}
