//! Forward and backward kernels for the layer set used by the network.
//!
//! Every kernel is a pure function on [`Tensor`]s; [`super::Graph`] wraps them
//! with gradient bookkeeping. Reductions run in a fixed order so results are
//! bit-reproducible.

use serde::{Deserialize, Serialize};

use super::{Float, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dParams {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for Conv2dParams {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

impl Conv2dParams {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Self {
            stride,
            padding,
            groups,
        }
    }

    /// Stride-`stride` convolution with `floor(kernel / 2)` padding.
    pub fn same(kernel: usize, stride: usize) -> Self {
        Self::new(stride, kernel / 2, 1)
    }

    pub fn depthwise(kernel: usize, stride: usize, channels: usize) -> Self {
        Self::new(stride, kernel / 2, channels)
    }
}

/// Output extent of a convolution along one axis.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    groups: usize,
    cin_g: usize,
    cout_g: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeometry {
    fn patch_len(&self) -> usize {
        self.cin_g * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn is_per_channel(&self) -> bool {
        self.cin_g == 1 && self.cout_g == 1
    }
}

fn conv_geometry<T: Float>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    params: Conv2dParams,
) -> Result<ConvGeometry> {
    const OP: &str = "conv2d";
    let (n, cin, h, w) = input.dims4(OP)?;
    let (cout, cin_g, kh, kw) = weight.dims4(OP)?;
    let Conv2dParams {
        stride,
        padding,
        groups,
    } = params;
    if stride == 0 {
        return Err(Error::InvalidArgument(
            "conv2d: stride must be positive".into(),
        ));
    }
    if groups == 0 || cin % groups != 0 || cout % groups != 0 {
        return Err(Error::shape(
            OP,
            "groups",
            format!("groups={groups} must divide input channels {cin} and output channels {cout}"),
        ));
    }
    if cin_g != cin / groups {
        return Err(Error::shape(
            OP,
            "input channels",
            format!(
                "weight expects {cin_g} channels per group, input has {cin} over {groups} groups"
            ),
        ));
    }
    if kh == 0 || kh > h + 2 * padding {
        return Err(Error::shape(
            OP,
            "height",
            format!(
                "kernel height {kh} exceeds padded input height {}",
                h + 2 * padding
            ),
        ));
    }
    if kw == 0 || kw > w + 2 * padding {
        return Err(Error::shape(
            OP,
            "width",
            format!(
                "kernel width {kw} exceeds padded input width {}",
                w + 2 * padding
            ),
        ));
    }
    if let Some(b) = bias {
        if b.numel() != cout {
            return Err(Error::shape(
                OP,
                "bias",
                format!("bias has {} entries for {cout} output channels", b.numel()),
            ));
        }
    }
    Ok(ConvGeometry {
        n,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        ho: conv_output_extent(h, kh, stride, padding),
        wo: conv_output_extent(w, kw, stride, padding),
        groups,
        cin_g,
        cout_g: cout / groups,
        stride,
        pad: padding,
    })
}

/// Input coordinate for output coordinate `o` and kernel tap `k`, if inside.
#[inline]
fn source_index(o: usize, k: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
    let i = (o * stride + k).checked_sub(pad)?;
    (i < extent).then_some(i)
}

/// Unfolds the `cin_g` channel planes in `x` into a `(cin_g·kh·kw) × (ho·wo)`
/// patch matrix.
fn im2col<T: Float>(x: &[T], g: &ConvGeometry, col: &mut [T]) {
    let plane = g.h * g.w;
    let p = g.out_plane();
    for ci in 0..g.cin_g {
        let src = &x[ci * plane..(ci + 1) * plane];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((ci * g.kh + ki) * g.kw + kj) * p;
                for oy in 0..g.ho {
                    let dst = &mut col[row + oy * g.wo..row + (oy + 1) * g.wo];
                    match source_index(oy, ki, g.stride, g.pad, g.h) {
                        None => dst.fill(T::zero()),
                        Some(iy) => {
                            let src_row = &src[iy * g.w..(iy + 1) * g.w];
                            for (ox, d) in dst.iter_mut().enumerate() {
                                *d = match source_index(ox, kj, g.stride, g.pad, g.w) {
                                    Some(ix) => src_row[ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the planes.
fn col2im<T: Float>(col: &[T], g: &ConvGeometry, dx: &mut [T]) {
    let plane = g.h * g.w;
    let p = g.out_plane();
    for ci in 0..g.cin_g {
        let dst = &mut dx[ci * plane..(ci + 1) * plane];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((ci * g.kh + ki) * g.kw + kj) * p;
                for oy in 0..g.ho {
                    let Some(iy) = source_index(oy, ki, g.stride, g.pad, g.h) else {
                        continue;
                    };
                    let src = &col[row + oy * g.wo..row + (oy + 1) * g.wo];
                    for (ox, &v) in src.iter().enumerate() {
                        if let Some(ix) = source_index(ox, kj, g.stride, g.pad, g.w) {
                            dst[iy * g.w + ix] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Single input plane convolved with a single kernel, accumulated into `out`.
fn conv_plane<T: Float>(x: &[T], kernel: &[T], g: &ConvGeometry, out: &mut [T]) {
    for oy in 0..g.ho {
        let out_row = &mut out[oy * g.wo..(oy + 1) * g.wo];
        for ki in 0..g.kh {
            let Some(iy) = source_index(oy, ki, g.stride, g.pad, g.h) else {
                continue;
            };
            let x_row = &x[iy * g.w..(iy + 1) * g.w];
            for kj in 0..g.kw {
                let wv = kernel[ki * g.kw + kj];
                for (ox, o) in out_row.iter_mut().enumerate() {
                    if let Some(ix) = source_index(ox, kj, g.stride, g.pad, g.w) {
                        *o += wv * x_row[ix];
                    }
                }
            }
        }
    }
}

/// Gradients of [`conv_plane`] w.r.t. its input plane and kernel.
fn conv_plane_backward<T: Float>(
    x: &[T],
    kernel: &[T],
    dy: &[T],
    g: &ConvGeometry,
    dx: Option<&mut [T]>,
    dk: Option<&mut [T]>,
) {
    if let Some(dk) = dk {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let mut acc = T::zero();
                for oy in 0..g.ho {
                    let Some(iy) = source_index(oy, ki, g.stride, g.pad, g.h) else {
                        continue;
                    };
                    for ox in 0..g.wo {
                        if let Some(ix) = source_index(ox, kj, g.stride, g.pad, g.w) {
                            acc += dy[oy * g.wo + ox] * x[iy * g.w + ix];
                        }
                    }
                }
                dk[ki * g.kw + kj] += acc;
            }
        }
    }
    if let Some(dx) = dx {
        for oy in 0..g.ho {
            for ki in 0..g.kh {
                let Some(iy) = source_index(oy, ki, g.stride, g.pad, g.h) else {
                    continue;
                };
                for kj in 0..g.kw {
                    let wv = kernel[ki * g.kw + kj];
                    for ox in 0..g.wo {
                        if let Some(ix) = source_index(ox, kj, g.stride, g.pad, g.w) {
                            dx[iy * g.w + ix] += wv * dy[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation (no kernel flip) over an N×C×H×W input.
pub fn conv2d_forward<T: Float>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    params: Conv2dParams,
) -> Result<Tensor<T>> {
    let g = conv_geometry(input, weight, bias, params)?;
    let p = g.out_plane();
    let k = g.patch_len();
    let in_sample = g.cin * g.h * g.w;
    let in_group = g.cin_g * g.h * g.w;
    let mut out = Tensor::zeros(&[g.n, g.cout, g.ho, g.wo]);
    let x = input.data();
    let wt = weight.data();
    let mut col = if g.is_pointwise() || g.is_per_channel() {
        Vec::new()
    } else {
        vec![T::zero(); k * p]
    };
    let od = out.data_mut();
    for n in 0..g.n {
        for grp in 0..g.groups {
            let xs = &x[n * in_sample + grp * in_group..][..in_group];
            let ws = &wt[grp * g.cout_g * k..][..g.cout_g * k];
            let os = &mut od[(n * g.cout + grp * g.cout_g) * p..][..g.cout_g * p];
            if g.is_per_channel() {
                conv_plane(xs, ws, &g, os);
            } else if g.is_pointwise() {
                T::gemm(
                    g.cout_g,
                    k,
                    p,
                    ws,
                    (k, 1),
                    xs,
                    (p, 1),
                    T::zero(),
                    os,
                    (p, 1),
                );
            } else {
                im2col(xs, &g, &mut col);
                T::gemm(
                    g.cout_g,
                    k,
                    p,
                    ws,
                    (k, 1),
                    &col,
                    (p, 1),
                    T::zero(),
                    os,
                    (p, 1),
                );
            }
        }
        if let Some(b) = bias {
            for (c, &bv) in b.data().iter().enumerate() {
                for o in &mut od[(n * g.cout + c) * p..][..p] {
                    *o += bv;
                }
            }
        }
    }
    Ok(out)
}

/// Which conv2d gradients to compute.
#[derive(Clone, Copy, Debug)]
pub struct ConvGradRequest {
    pub input: bool,
    pub weight: bool,
    pub bias: bool,
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Float>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    params: Conv2dParams,
    want: ConvGradRequest,
) -> Result<ConvGrads<T>> {
    let g = conv_geometry(input, weight, None, params)?;
    if grad_out.shape() != [g.n, g.cout, g.ho, g.wo] {
        return Err(Error::shape(
            "conv2d backward",
            "output",
            format!(
                "gradient shape {:?} does not match output",
                grad_out.shape()
            ),
        ));
    }
    let p = g.out_plane();
    let k = g.patch_len();
    let in_sample = g.cin * g.h * g.w;
    let in_group = g.cin_g * g.h * g.w;
    let x = input.data();
    let wt = weight.data();
    let dy = grad_out.data();

    let mut dx = want.input.then(|| Tensor::zeros(input.shape()));
    let mut dw = want.weight.then(|| Tensor::zeros(weight.shape()));
    let db = want.bias.then(|| {
        let mut db = Tensor::zeros(&[g.cout]);
        for (c, acc) in db.data_mut().iter_mut().enumerate() {
            for n in 0..g.n {
                for &v in &dy[(n * g.cout + c) * p..][..p] {
                    *acc += v;
                }
            }
        }
        db
    });

    let lowered = !(g.is_pointwise() || g.is_per_channel());
    let mut col = if lowered {
        vec![T::zero(); k * p]
    } else {
        Vec::new()
    };
    let mut dcol = if lowered && want.input {
        vec![T::zero(); k * p]
    } else {
        Vec::new()
    };

    for n in 0..g.n {
        for grp in 0..g.groups {
            let xs = &x[n * in_sample + grp * in_group..][..in_group];
            let ws = &wt[grp * g.cout_g * k..][..g.cout_g * k];
            let dys = &dy[(n * g.cout + grp * g.cout_g) * p..][..g.cout_g * p];
            let dxs = dx
                .as_mut()
                .map(|t| &mut t.data_mut()[n * in_sample + grp * in_group..][..in_group]);
            let dws = dw
                .as_mut()
                .map(|t| &mut t.data_mut()[grp * g.cout_g * k..][..g.cout_g * k]);

            if g.is_per_channel() {
                conv_plane_backward(xs, ws, dys, &g, dxs, dws);
                continue;
            }
            if g.is_pointwise() {
                if let Some(dws) = dws {
                    T::gemm(
                        g.cout_g,
                        p,
                        k,
                        dys,
                        (p, 1),
                        xs,
                        (1, p),
                        T::one(),
                        dws,
                        (k, 1),
                    );
                }
                if let Some(dxs) = dxs {
                    T::gemm(
                        k,
                        g.cout_g,
                        p,
                        ws,
                        (1, k),
                        dys,
                        (p, 1),
                        T::one(),
                        dxs,
                        (p, 1),
                    );
                }
                continue;
            }
            im2col(xs, &g, &mut col);
            if let Some(dws) = dws {
                T::gemm(
                    g.cout_g,
                    p,
                    k,
                    dys,
                    (p, 1),
                    &col,
                    (1, p),
                    T::one(),
                    dws,
                    (k, 1),
                );
            }
            if let Some(dxs) = dxs {
                T::gemm(
                    k,
                    g.cout_g,
                    p,
                    ws,
                    (1, k),
                    dys,
                    (p, 1),
                    T::zero(),
                    &mut dcol,
                    (p, 1),
                );
                col2im(&dcol, &g, dxs);
            }
        }
    }
    Ok(ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchNormMode {
    Train,
    Eval,
}

/// Result of a batch-norm forward pass plus what backward needs.
pub struct BatchNormForward<T> {
    pub output: Tensor<T>,
    /// `(x − mean) · inv_std`, same shape as the input.
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<f64>,
    /// Biased (population) variance of the batch.
    pub batch_var: Vec<f64>,
}

fn bn_check<T: Float>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<(usize, usize, usize)> {
    const OP: &str = "batchnorm2d";
    let (n, c, h, w) = input.dims4(OP)?;
    if gamma.numel() != c {
        return Err(Error::shape(
            OP,
            "channels",
            format!("gamma has {} entries for {c} channels", gamma.numel()),
        ));
    }
    if beta.numel() != c {
        return Err(Error::shape(
            OP,
            "channels",
            format!("beta has {} entries for {c} channels", beta.numel()),
        ));
    }
    if n * h * w == 0 {
        return Err(Error::shape(
            OP,
            "batch",
            "needs at least one value per channel",
        ));
    }
    Ok((n, c, h * w))
}

/// Per-channel normalization. Train mode uses batch statistics over N, H, W;
/// eval mode uses the supplied running statistics.
pub fn batchnorm2d_forward<T: Float>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    mode: BatchNormMode,
    eps: f64,
) -> Result<BatchNormForward<T>> {
    let (n, c, plane) = bn_check(input, gamma, beta)?;
    if running_mean.numel() != c || running_var.numel() != c {
        return Err(Error::shape(
            "batchnorm2d",
            "channels",
            format!(
                "running stats have {}/{} entries for {c} channels",
                running_mean.numel(),
                running_var.numel()
            ),
        ));
    }
    if eps <= 0.0 {
        return Err(Error::InvalidArgument(
            "batchnorm2d: eps must be positive".into(),
        ));
    }
    let x = input.data();
    let count = (n * plane) as f64;
    let mut batch_mean = vec![0.0; c];
    let mut batch_var = vec![0.0; c];
    for ch in 0..c {
        let values = (0..n).flat_map(|s| x[(s * c + ch) * plane..][..plane].iter());
        let mean = values.clone().map(|v| v.as_f64()).sum::<f64>() / count;
        let var = values.map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / count;
        batch_mean[ch] = mean;
        batch_var[ch] = var;
    }

    let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
        BatchNormMode::Train => (batch_mean.clone(), batch_var.clone()),
        BatchNormMode::Eval => (
            running_mean.data().iter().map(|v| v.as_f64()).collect(),
            running_var.data().iter().map(|v| v.as_f64()).collect(),
        ),
    };
    let inv_std: Vec<T> = var
        .iter()
        .map(|&v| T::from_f64(1.0 / (v + eps).sqrt()))
        .collect();

    let mut normalized = Tensor::zeros(input.shape());
    let mut output = Tensor::zeros(input.shape());
    {
        let xn = normalized.data_mut();
        let y = output.data_mut();
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * plane;
                let m = T::from_f64(mean[ch]);
                let g = gamma.data()[ch];
                let b = beta.data()[ch];
                for i in base..base + plane {
                    let v = (x[i] - m) * inv_std[ch];
                    xn[i] = v;
                    y[i] = g * v + b;
                }
            }
        }
    }
    Ok(BatchNormForward {
        output,
        normalized,
        inv_std,
        batch_mean,
        batch_var,
    })
}

/// `running = (1 − momentum)·running + momentum·batch`. The variance fed in is
/// the unbiased batch variance.
pub fn update_running_stats<T: Float>(
    running_mean: &mut Tensor<T>,
    running_var: &mut Tensor<T>,
    bn: &BatchNormForward<T>,
    count: usize,
    momentum: f64,
) {
    let correction = if count > 1 {
        count as f64 / (count - 1) as f64
    } else {
        1.0
    };
    for (r, &m) in running_mean.data_mut().iter_mut().zip(&bn.batch_mean) {
        *r = T::from_f64((1.0 - momentum) * r.as_f64() + momentum * m);
    }
    for (r, &v) in running_var.data_mut().iter_mut().zip(&bn.batch_var) {
        *r = T::from_f64((1.0 - momentum) * r.as_f64() + momentum * v * correction);
    }
}

pub struct BatchNormGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

pub fn batchnorm2d_backward<T: Float>(
    grad_out: &Tensor<T>,
    normalized: &Tensor<T>,
    inv_std: &[T],
    gamma: &Tensor<T>,
    mode: BatchNormMode,
) -> Result<BatchNormGrads<T>> {
    let (n, c, h, w) = grad_out.dims4("batchnorm2d backward")?;
    let plane = h * w;
    let count = T::from_f64((n * plane) as f64);
    let dy = grad_out.data();
    let xn = normalized.data();
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    let mut dx = Tensor::zeros(grad_out.shape());
    for ch in 0..c {
        let mut sum_dy = T::zero();
        let mut sum_dy_xn = T::zero();
        for s in 0..n {
            let base = (s * c + ch) * plane;
            for i in base..base + plane {
                sum_dy += dy[i];
                sum_dy_xn += dy[i] * xn[i];
            }
        }
        dgamma.data_mut()[ch] = sum_dy_xn;
        dbeta.data_mut()[ch] = sum_dy;
        let scale = gamma.data()[ch] * inv_std[ch];
        let dxd = dx.data_mut();
        for s in 0..n {
            let base = (s * c + ch) * plane;
            for i in base..base + plane {
                dxd[i] = match mode {
                    BatchNormMode::Train => {
                        scale * (dy[i] - sum_dy / count - xn[i] * sum_dy_xn / count)
                    }
                    BatchNormMode::Eval => scale * dy[i],
                };
            }
        }
    }
    Ok(BatchNormGrads {
        input: dx,
        gamma: dgamma,
        beta: dbeta,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Relu6,
    Sigmoid,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Relu6 => "relu6",
            Activation::Sigmoid => "sigmoid",
        }
    }

    #[inline]
    pub fn apply<T: Float>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Relu6 => x.max(T::zero()).min(T::from_f64(6.0)),
            Activation::Sigmoid => {
                if x >= T::zero() {
                    T::one() / (T::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (T::one() + e)
                }
            }
        }
    }

    /// Derivative given input `x` and output `y`; 0 at the relu kinks.
    #[inline]
    pub fn derivative<T: Float>(self, x: T, y: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Relu6 => {
                if x > T::zero() && x < T::from_f64(6.0) {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => y * (T::one() - y),
        }
    }
}

/// Nearest-neighbour 2× upsampling: every pixel becomes a 2×2 block.
pub fn upsample2x_forward<T: Float>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4("upsample2x")?;
    let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
    let x = input.data();
    let o = out.data_mut();
    for plane in 0..n * c {
        let src = &x[plane * h * w..][..h * w];
        let dst = &mut o[plane * 4 * h * w..][..4 * h * w];
        for i in 0..h {
            for j in 0..w {
                let v = src[i * w + j];
                let top = 2 * i * 2 * w + 2 * j;
                dst[top] = v;
                dst[top + 1] = v;
                dst[top + 2 * w] = v;
                dst[top + 2 * w + 1] = v;
            }
        }
    }
    Ok(out)
}

/// Sum of each 2×2 replica block.
pub fn upsample2x_backward<T: Float>(grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h2, w2) = grad_out.dims4("upsample2x backward")?;
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    let dy = grad_out.data();
    let d = dx.data_mut();
    for plane in 0..n * c {
        let src = &dy[plane * h2 * w2..][..h2 * w2];
        let dst = &mut d[plane * h * w..][..h * w];
        for i in 0..h {
            for j in 0..w {
                let top = 2 * i * w2 + 2 * j;
                dst[i * w + j] = src[top] + src[top + 1] + src[top + w2] + src[top + w2 + 1];
            }
        }
    }
    Ok(dx)
}

pub fn concat_channels_forward<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    const OP: &str = "concat_channels";
    let (na, ca, ha, wa) = a.dims4(OP)?;
    let (nb, cb, hb, wb) = b.dims4(OP)?;
    if na != nb {
        return Err(Error::shape(OP, "batch", format!("{na} vs {nb}")));
    }
    if ha != hb {
        return Err(Error::shape(OP, "height", format!("{ha} vs {hb}")));
    }
    if wa != wb {
        return Err(Error::shape(OP, "width", format!("{wa} vs {wb}")));
    }
    let plane = ha * wa;
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    for s in 0..na {
        data.extend_from_slice(&a.data()[s * ca * plane..][..ca * plane]);
        data.extend_from_slice(&b.data()[s * cb * plane..][..cb * plane]);
    }
    Tensor::new(vec![na, ca + cb, ha, wa], data)
}

/// Splits a concatenated gradient back into its `ca`- and `cb`-channel parts.
pub fn concat_channels_backward<T: Float>(
    grad_out: &Tensor<T>,
    ca: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = grad_out.dims4("concat_channels backward")?;
    let cb = c - ca;
    let plane = h * w;
    let mut da = Vec::with_capacity(n * ca * plane);
    let mut db = Vec::with_capacity(n * cb * plane);
    for s in 0..n {
        let chunk = &grad_out.data()[s * c * plane..][..c * plane];
        da.extend_from_slice(&chunk[..ca * plane]);
        db.extend_from_slice(&chunk[ca * plane..]);
    }
    Ok((
        Tensor::new(vec![n, ca, h, w], da)?,
        Tensor::new(vec![n, cb, h, w], db)?,
    ))
}
