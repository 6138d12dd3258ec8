//! A small differentiable engine: 3x3 same-padding convolutions, ReLU,
//! 2x2 max pooling, nearest-neighbour upsampling, channel softmax, masked
//! cross-entropy and Adam. Everything is `f64` and single-threaded, with a
//! fixed accumulation order, so results are bit-reproducible.

use std::io::{Read, Write};

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::grids::{Label, LabelMap};

pub const MAGIC: &[u8; 4] = b"GZN1";

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(dims: &[usize]) -> Tensor {
        Tensor {
            dims: dims.to_vec(),
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn from_vec(dims: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::invalid(format!(
                "tensor data length {} does not match dims {dims:?}",
                data.len()
            )));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `(channels, rows, cols)` of a rank-3 tensor.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.dims[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::invalid(format!("expected a C x H x W tensor, got {:?}", self.dims))),
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.dims[1] * self.dims[2];
        &self.data[c * plane..(c + 1) * plane]
    }

    fn same_dims(&self, other: &Tensor) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::invalid(format!(
                "tensor shape mismatch: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.same_dims(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Channels zero-padded by one pixel on every side, as planes of
/// `(h + 2) x (w + 2)`.
fn pad_planes(data: &[f64], channels: usize, h: usize, w: usize) -> Vec<f64> {
    let pw = w + 2;
    let pplane = (h + 2) * pw;
    let mut out = vec![0.0; channels * pplane];
    for c in 0..channels {
        for y in 0..h {
            let dst = c * pplane + (y + 1) * pw + 1;
            out[dst..dst + w].copy_from_slice(&data[(c * h + y) * w..(c * h + y + 1) * w]);
        }
    }
    out
}

/// Length of the strided run covering every output pixel of an `h x w` map
/// stored with row stride `w + 2`. The two trailing columns of each row are
/// scratch and the run stops before the last row's scratch.
#[inline]
fn run_len(h: usize, w: usize) -> usize {
    h * (w + 2) - 2
}

/// `acc[i] += sum_t k[t] * src[i + (t / 3) * stride + t % 3]` with the taps
/// added in order `t = 0..9`.
#[inline]
fn taps9(acc: &mut [f64], src: &[f64], stride: usize, k: &[f64; 9]) {
    let n = acc.len();
    let t: [&[f64]; 9] = std::array::from_fn(|t| {
        let off = (t / 3) * stride + t % 3;
        &src[off..off + n]
    });
    for i in 0..n {
        let mut v = acc[i];
        v += k[0] * t[0][i];
        v += k[1] * t[1][i];
        v += k[2] * t[2][i];
        v += k[3] * t[3][i];
        v += k[4] * t[4][i];
        v += k[5] * t[5][i];
        v += k[6] * t[6][i];
        v += k[7] * t[7][i];
        v += k[8] * t[8][i];
        acc[i] = v;
    }
}

/// `sum_i g[i] * src[i + (t / 3) * stride + t % 3]` for the nine taps, each
/// over two interleaved partial sums.
#[inline]
fn dots9(g: &[f64], src: &[f64], stride: usize) -> [f64; 9] {
    let n = g.len();
    let t: [&[f64]; 9] = std::array::from_fn(|t| {
        let off = (t / 3) * stride + t % 3;
        &src[off..off + n]
    });
    let mut acc = [[0.0f64; 2]; 9];
    let pairs = n / 2;
    for p in 0..pairs {
        for l in 0..2 {
            let i = 2 * p + l;
            let gi = g[i];
            for k in 0..9 {
                acc[k][l] += gi * t[k][i];
            }
        }
    }
    let mut out = [0.0; 9];
    for k in 0..9 {
        out[k] = acc[k][0] + acc[k][1];
        for i in 2 * pairs..n {
            out[k] += g[i] * t[k][i];
        }
    }
    out
}

/// Same-size 3x3 cross-correlation with zero padding, plus bias.
pub fn conv2d(input: &Tensor, kernels: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (ci, h, w) = input.chw()?;
    let (co, kci, kh, kw) = match kernels.dims[..] {
        [a, b, c, d] => (a, b, c, d),
        _ => return Err(Error::invalid("kernels must be C_out x C_in x 3 x 3")),
    };
    if (kh, kw) != (3, 3) {
        return Err(Error::invalid("only 3x3 kernels are supported"));
    }
    if kci != ci {
        return Err(Error::invalid(format!(
            "channel mismatch: input has {ci}, kernels expect {kci}"
        )));
    }
    if bias.len() != co {
        return Err(Error::invalid("bias length must equal output channels"));
    }
    let mut out = Tensor::zeros(&[co, h, w]);
    if h == 0 || w == 0 {
        return Ok(out);
    }
    // tap (ky, kx) of output (y, x) reads padded (y + ky, x + kx); with the
    // output at the padded row stride every tap is one contiguous run
    let pw = w + 2;
    let pplane = (h + 2) * pw;
    let n = run_len(h, w);
    let src = pad_planes(&input.data, ci, h, w);
    let mut acc = vec![0.0; h * pw];
    for o in 0..co {
        acc.iter_mut().for_each(|v| *v = bias.data[o]);
        for c in 0..ci {
            let plane = &src[c * pplane..(c + 1) * pplane];
            let kbase = (o * ci + c) * 9;
            let k: &[f64; 9] = kernels.data[kbase..kbase + 9].try_into().expect("9 taps");
            taps9(&mut acc[..n], plane, pw, k);
        }
        for y in 0..h {
            out.data[(o * h + y) * w..(o * h + y + 1) * w].copy_from_slice(&acc[y * pw..y * pw + w]);
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d`]: returns `(d_input, d_kernels, d_bias)`.
pub fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (ci, h, w) = input.chw()?;
    let (co, gh, gw) = grad_out.chw()?;
    if (gh, gw) != (h, w) || kernels.dims != [co, ci, 3, 3] {
        return Err(Error::invalid("conv2d backward shape mismatch"));
    }
    let mut d_in = Tensor::zeros(&[ci, h, w]);
    let mut d_k = Tensor::zeros(&[co, ci, 3, 3]);
    let mut d_b = Tensor::zeros(&[co]);
    if h == 0 || w == 0 {
        return Ok((d_in, d_k, d_b));
    }
    let pw = w + 2;
    let pplane = (h + 2) * pw;
    let n = run_len(h, w);
    let src = pad_planes(&input.data, ci, h, w);
    let mut d_src = vec![0.0; ci * pplane];
    // gradient at the padded row stride, zero in the scratch columns, with
    // `lead` zeros on both sides so every tap of the transpose stays in bounds
    let lead = 2 * pw + 2;
    let mut g = vec![0.0; lead + h * pw + lead];
    for o in 0..co {
        let go = &grad_out.data[o * h * w..(o + 1) * h * w];
        d_b.data[o] = go.iter().sum();
        for y in 0..h {
            g[lead + y * pw..lead + y * pw + w].copy_from_slice(&go[y * w..(y + 1) * w]);
        }
        let run = &g[lead..lead + n];
        for c in 0..ci {
            let plane = &src[c * pplane..(c + 1) * pplane];
            let kbase = (o * ci + c) * 9;
            d_k.data[kbase..kbase + 9].copy_from_slice(&dots9(run, plane, pw));
            // padded input cell j collects tap t from gradient cell j - off_t;
            // flipping the kernel turns that into the forward tap pattern
            let k = &kernels.data[kbase..kbase + 9];
            let flipped: [f64; 9] = std::array::from_fn(|t| k[8 - t]);
            let d_plane = &mut d_src[c * pplane..(c + 1) * pplane];
            taps9(d_plane, &g, pw, &flipped);
        }
    }
    for c in 0..ci {
        for y in 0..h {
            let from = c * pplane + (y + 1) * pw + 1;
            d_in.data[(c * h + y) * w..(c * h + y + 1) * w].copy_from_slice(&d_src[from..from + w]);
        }
    }
    Ok((d_in, d_k, d_b))
}

pub fn relu(input: &Tensor) -> Tensor {
    Tensor {
        dims: input.dims.clone(),
        data: input.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

/// Passes the gradient where the forward output was positive.
pub fn relu_backward(output: &Tensor, grad_out: &Tensor) -> Tensor {
    Tensor {
        dims: output.dims.clone(),
        data: output
            .data
            .iter()
            .zip(&grad_out.data)
            .map(|(&y, &g)| if y > 0.0 { g } else { 0.0 })
            .collect(),
    }
}

/// 2x2 stride-2 max pooling. Also returns, for each output, the flat input
/// index that won (first maximum in row-major window order).
pub fn maxpool2x2(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (c, h, w) = input.chw()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(format!("max pooling needs even extents, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[c, oh, ow]);
    let mut arg = vec![0usize; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let base = ch * h * w + 2 * y * w + 2 * x;
                let cands = [base, base + 1, base + w, base + w + 1];
                let mut best = cands[0];
                for &i in &cands[1..] {
                    if input.data[i] > input.data[best] {
                        best = i;
                    }
                }
                let o = ch * oh * ow + y * ow + x;
                out.data[o] = input.data[best];
                arg[o] = best;
            }
        }
    }
    Ok((out, arg))
}

pub fn maxpool2x2_backward(input_dims: &[usize], argmax: &[usize], grad_out: &Tensor) -> Tensor {
    let mut d = Tensor::zeros(input_dims);
    for (&i, &g) in argmax.iter().zip(&grad_out.data) {
        d.data[i] += g;
    }
    d
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2x_nearest(input: &Tensor) -> Result<Tensor> {
    let (c, h, w) = input.chw()?;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&[c, oh, ow]);
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                out.data[ch * oh * ow + y * ow + x] = input.data[ch * h * w + (y / 2) * w + x / 2];
            }
        }
    }
    Ok(out)
}

/// Sums each 2x2 block of the upstream gradient.
pub fn upsample2x_nearest_backward(grad_out: &Tensor) -> Result<Tensor> {
    let (c, oh, ow) = grad_out.chw()?;
    let (h, w) = (oh / 2, ow / 2);
    let mut d = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                d.data[ch * h * w + (y / 2) * w + x / 2] += grad_out.data[ch * oh * ow + y * ow + x];
            }
        }
    }
    Ok(d)
}

/// Softmax over the channel axis at every pixel, max-shifted.
pub fn softmax_channels(logits: &Tensor) -> Result<Tensor> {
    let (c, h, w) = logits.chw()?;
    let plane = h * w;
    let mut out = Tensor::zeros(&[c, h, w]);
    for p in 0..plane {
        let m = (0..c).map(|ch| logits.data[ch * plane + p]).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for ch in 0..c {
            let e = (logits.data[ch * plane + p] - m).exp();
            out.data[ch * plane + p] = e;
            sum += e;
        }
        for ch in 0..c {
            out.data[ch * plane + p] /= sum;
        }
    }
    Ok(out)
}

/// Two-class softmax; channel 0 is the positive class.
pub fn softmax2(logits: &Tensor) -> Result<Tensor> {
    let (c, _, _) = logits.chw()?;
    if c != 2 {
        return Err(Error::invalid(format!("softmax2 needs 2 channels, got {c}")));
    }
    softmax_channels(logits)
}

/// Masked mean cross-entropy on softmax outputs.
///
/// `targets[p]` is the channel index of pixel `p`, or `None` to exclude it.
/// Returns `weight * mean(-ln p_target)` over included pixels and the
/// gradient with respect to the logits that produced `probs`.
pub fn masked_softmax_cross_entropy(
    probs: &Tensor,
    targets: &[Option<usize>],
    weight: f64,
) -> Result<(f64, Tensor)> {
    let (c, h, w) = probs.chw()?;
    let plane = h * w;
    if targets.len() != plane {
        return Err(Error::invalid("target length must equal the pixel count"));
    }
    let mut grad = Tensor::zeros(&[c, h, w]);
    let n = targets.iter().filter(|t| t.is_some()).count();
    if n == 0 {
        return Ok((0.0, grad));
    }
    let scale = weight / n as f64;
    let mut nll = 0.0;
    for (p, t) in targets.iter().enumerate() {
        let Some(t) = *t else { continue };
        if t >= c {
            return Err(Error::invalid(format!("target channel {t} out of range")));
        }
        nll -= probs.data[t * plane + p].max(f64::MIN_POSITIVE).ln();
        for ch in 0..c {
            let one_hot = if ch == t { 1.0 } else { 0.0 };
            grad.data[ch * plane + p] = scale * (probs.data[ch * plane + p] - one_hot);
        }
    }
    Ok((weight * nll / n as f64, grad))
}

/// Cross-entropy of a two-channel prediction against a branch target map.
/// `positive` is the label on channel 0; its flip is channel 1.
pub fn masked_cross_entropy(
    probs: &Tensor,
    target: &LabelMap,
    positive: Label,
    weight: f64,
) -> Result<(f64, Tensor)> {
    let (c, h, w) = probs.chw()?;
    if c != 2 {
        return Err(Error::invalid(format!("expected 2 probability channels, got {c}")));
    }
    target.labels().ensure_shape((h, w))?;
    let negative = positive.flipped();
    let targets = target
        .labels()
        .iter()
        .map(|&l| match l {
            Label::Unknown => Ok(None),
            Label::Grey => Err(Error::GreyLabel("branch target")),
            l if l == positive => Ok(Some(0)),
            l if l == negative => Ok(Some(1)),
            _ => Err(Error::invalid("target label is neither class of the branch")),
        })
        .collect::<Result<Vec<_>>>()?;
    masked_softmax_cross_entropy(probs, &targets, weight)
}

/// One learnable tensor with its gradient and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    pub m: Tensor,
    pub v: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Param {
        let dims = value.dims.clone();
        Param {
            value,
            grad: Tensor::zeros(&dims),
            m: Tensor::zeros(&dims),
            v: Tensor::zeros(&dims),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub kernels: Param,
    pub bias: Param,
}

impl ConvLayer {
    pub fn zeros(c_in: usize, c_out: usize) -> ConvLayer {
        ConvLayer {
            kernels: Param::new(Tensor::zeros(&[c_out, c_in, 3, 3])),
            bias: Param::new(Tensor::zeros(&[c_out])),
        }
    }

    /// He-normal kernels, zero bias.
    pub fn he(c_in: usize, c_out: usize, rng: &mut impl rand::Rng) -> ConvLayer {
        let std = (2.0 / (9 * c_in) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let mut layer = ConvLayer::zeros(c_in, c_out);
        for v in layer.kernels.value.data.iter_mut() {
            *v = normal.sample(rng);
        }
        layer
    }

    pub fn c_in(&self) -> usize {
        self.kernels.value.dims[1]
    }

    pub fn c_out(&self) -> usize {
        self.kernels.value.dims[0]
    }
}

/// Layer widths of one fully convolutional branch:
/// `conv(in->w0) relu pool, conv(w0->w1) relu pool, conv(w1->w2) relu,
/// up conv(w2->w3) relu, up conv(w3->out)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Arch {
    pub in_channels: usize,
    pub widths: [usize; 4],
    pub out_channels: usize,
}

impl Arch {
    pub const DOWNSAMPLING: usize = 4;

    pub fn layer_channels(&self) -> [(usize, usize); 5] {
        let [a, b, c, d] = self.widths;
        [
            (self.in_channels, a),
            (a, b),
            (b, c),
            (c, d),
            (d, self.out_channels),
        ]
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_channels()
            .iter()
            .map(|&(i, o)| o * i * 9 + o)
            .sum()
    }
}

/// All learnable state of one branch.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchParams {
    pub layers: Vec<ConvLayer>,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    x0: Tensor,
    a1: Tensor,
    arg1: Vec<usize>,
    p1: Tensor,
    a2: Tensor,
    arg2: Vec<usize>,
    p2: Tensor,
    a3: Tensor,
    u3: Tensor,
    a4: Tensor,
    u4: Tensor,
}

impl BranchParams {
    pub fn init(arch: &Arch, rng: &mut impl rand::Rng, zero_final: bool) -> BranchParams {
        let chans = arch.layer_channels();
        let layers = chans
            .iter()
            .enumerate()
            .map(|(i, &(ci, co))| {
                if zero_final && i == chans.len() - 1 {
                    ConvLayer::zeros(ci, co)
                } else {
                    ConvLayer::he(ci, co, rng)
                }
            })
            .collect();
        BranchParams { layers }
    }

    pub fn arch(&self) -> Result<Arch> {
        if self.layers.len() != 5 {
            return Err(Error::invalid("a branch has exactly five convolution layers"));
        }
        let l = &self.layers;
        for i in 1..5 {
            if l[i].c_in() != l[i - 1].c_out() {
                return Err(Error::invalid("layer channel counts do not chain"));
            }
        }
        Ok(Arch {
            in_channels: l[0].c_in(),
            widths: [l[0].c_out(), l[1].c_out(), l[2].c_out(), l[3].c_out()],
            out_channels: l[4].c_out(),
        })
    }

    pub fn params(&self) -> impl Iterator<Item = &Param> {
        self.layers.iter().flat_map(|l| [&l.kernels, &l.bias])
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.layers.iter_mut().flat_map(|l| [&mut l.kernels, &mut l.bias])
    }

    pub fn parameter_count(&self) -> usize {
        self.params().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.grad.fill(0.0);
        }
    }

    /// Logits for a `C_in x H x W` input with `H`, `W` divisible by 4.
    pub fn forward(&self, input: &Tensor) -> Result<(Tensor, Trace)> {
        let (_, h, w) = input.chw()?;
        if h % Arch::DOWNSAMPLING != 0 || w % Arch::DOWNSAMPLING != 0 {
            return Err(Error::invalid(format!(
                "input extents {h}x{w} must be divisible by {}",
                Arch::DOWNSAMPLING
            )));
        }
        let l = &self.layers;
        let conv = |x: &Tensor, i: usize| conv2d(x, &l[i].kernels.value, &l[i].bias.value);
        let a1 = relu(&conv(input, 0)?);
        let (p1, arg1) = maxpool2x2(&a1)?;
        let a2 = relu(&conv(&p1, 1)?);
        let (p2, arg2) = maxpool2x2(&a2)?;
        let a3 = relu(&conv(&p2, 2)?);
        let u3 = upsample2x_nearest(&a3)?;
        let a4 = relu(&conv(&u3, 3)?);
        let u4 = upsample2x_nearest(&a4)?;
        let logits = conv(&u4, 4)?;
        Ok((
            logits,
            Trace {
                x0: input.clone(),
                a1,
                arg1,
                p1,
                a2,
                arg2,
                p2,
                a3,
                u3,
                a4,
                u4,
            },
        ))
    }

    /// Accumulates parameter gradients for upstream logit gradient `grad`.
    pub fn backward(&mut self, trace: &Trace, grad: &Tensor) -> Result<()> {
        let acc = |layer: &mut ConvLayer, dk: Tensor, db: Tensor| -> Result<()> {
            layer.kernels.grad.add_assign(&dk)?;
            layer.bias.grad.add_assign(&db)
        };
        let (g, dk, db) = conv2d_backward(&trace.u4, &self.layers[4].kernels.value, grad)?;
        acc(&mut self.layers[4], dk, db)?;
        let g = relu_backward(&trace.a4, &upsample2x_nearest_backward(&g)?);
        let (g, dk, db) = conv2d_backward(&trace.u3, &self.layers[3].kernels.value, &g)?;
        acc(&mut self.layers[3], dk, db)?;
        let g = relu_backward(&trace.a3, &upsample2x_nearest_backward(&g)?);
        let (g, dk, db) = conv2d_backward(&trace.p2, &self.layers[2].kernels.value, &g)?;
        acc(&mut self.layers[2], dk, db)?;
        let g = relu_backward(&trace.a2, &maxpool2x2_backward(trace.a2.dims(), &trace.arg2, &g));
        let (g, dk, db) = conv2d_backward(&trace.p1, &self.layers[1].kernels.value, &g)?;
        acc(&mut self.layers[1], dk, db)?;
        let g = relu_backward(&trace.a1, &maxpool2x2_backward(trace.a1.dims(), &trace.arg1, &g));
        let (_, dk, db) = conv2d_backward(&trace.x0, &self.layers[0].kernels.value, &g)?;
        acc(&mut self.layers[0], dk, db)
    }

    pub fn write_block(&self, out: &mut impl Write) -> std::io::Result<()> {
        out.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for l in &self.layers {
            for &d in l.kernels.value.dims() {
                out.write_all(&(d as u32).to_le_bytes())?;
            }
        }
        for p in self.params() {
            for &v in p.value.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_block(input: &mut impl Read) -> Result<BranchParams> {
        let n = read_u32(input)? as usize;
        if n == 0 || n > 64 {
            return Err(Error::format("checkpoint", format!("implausible layer count {n}")));
        }
        let mut shapes = Vec::with_capacity(n);
        for _ in 0..n {
            let mut d = [0usize; 4];
            for x in d.iter_mut() {
                *x = read_u32(input)? as usize;
            }
            if d[2] != 3 || d[3] != 3 || d[0] == 0 || d[1] == 0 || d[0] > 4096 || d[1] > 4096 {
                return Err(Error::format("checkpoint", format!("bad layer shape {d:?}")));
            }
            shapes.push(d);
        }
        let mut layers = Vec::with_capacity(n);
        for d in shapes {
            let mut k = Tensor::zeros(&d);
            for v in k.data.iter_mut() {
                *v = read_f64(input)?;
            }
            let mut b = Tensor::zeros(&[d[0]]);
            for v in b.data.iter_mut() {
                *v = read_f64(input)?;
            }
            layers.push(ConvLayer {
                kernels: Param::new(k),
                bias: Param::new(b),
            });
        }
        let params = BranchParams { layers };
        params.arch()?;
        Ok(params)
    }

    /// Standalone checkpoint: magic followed by one parameter block.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        self.write_block(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<BranchParams> {
        let mut cur = bytes;
        read_magic(&mut cur)?;
        let p = BranchParams::read_block(&mut cur)?;
        if !cur.is_empty() {
            return Err(Error::format("checkpoint", "trailing bytes"));
        }
        Ok(p)
    }
}

pub(crate) fn read_magic(input: &mut impl Read) -> Result<()> {
    let mut m = [0u8; 4];
    input
        .read_exact(&mut m)
        .map_err(|_| Error::format("checkpoint", "truncated magic"))?;
    if &m != MAGIC {
        return Err(Error::format("checkpoint", "bad magic bytes"));
    }
    Ok(())
}

pub(crate) fn read_u32(input: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    input
        .read_exact(&mut b)
        .map_err(|_| Error::format("checkpoint", "truncated"))?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_f64(input: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    input
        .read_exact(&mut b)
        .map_err(|_| Error::format("checkpoint", "truncated"))?;
    let v = f64::from_le_bytes(b);
    if !v.is_finite() {
        return Err(Error::format("checkpoint", "non-finite value"));
    }
    Ok(v)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of a single parameter; `t` starts at 1.
pub fn adam_update(p: &mut Param, cfg: &AdamConfig, t: u64) -> Result<()> {
    if t == 0 {
        return Err(Error::invalid("Adam step index starts at 1"));
    }
    p.value.same_dims(&p.grad)?;
    p.value.same_dims(&p.m)?;
    p.value.same_dims(&p.v)?;
    let bc1 = 1.0 - cfg.beta1.powf(t as f64);
    let bc2 = 1.0 - cfg.beta2.powf(t as f64);
    for i in 0..p.value.data.len() {
        let g = p.grad.data[i];
        let m = cfg.beta1 * p.m.data[i] + (1.0 - cfg.beta1) * g;
        let v = cfg.beta2 * p.v.data[i] + (1.0 - cfg.beta2) * g * g;
        p.m.data[i] = m;
        p.v.data[i] = v;
        p.value.data[i] -= cfg.lr * (m / bc1) / ((v / bc2).sqrt() + cfg.eps);
    }
    Ok(())
}

/// Adam over every parameter of a branch.
pub fn adam_step(params: &mut BranchParams, cfg: &AdamConfig, t: u64) -> Result<()> {
    for p in params.params_mut() {
        adam_update(p, cfg, t)?;
    }
    Ok(())
}

/// A scalar objective whose parameters can be perturbed and differentiated.
pub trait Differentiable {
    /// Number of scalar parameters.
    fn parameter_count(&self) -> usize;
    fn get(&self, index: usize) -> f64;
    fn set(&mut self, index: usize, value: f64);
    fn loss(&self) -> Result<f64>;
    /// Analytic gradient, flattened in the same order as `get`/`set`.
    fn gradient(&mut self) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub parameters: usize,
    pub max_relative_error: f64,
    pub worst_index: Option<usize>,
    /// Analytic and numeric derivative at `worst_index`.
    pub worst_pair: (f64, f64),
    pub tolerance: f64,
    pub passed: bool,
}

/// Central finite-difference step used by [`gradient_check`].
pub const FD_STEP: f64 = 1e-6;
/// Magnitude below which gradients are compared absolutely; sits above the
/// ~1e-10 roundoff of a central difference at `FD_STEP`.
pub const FD_FLOOR: f64 = 1e-5;

/// Compares analytic gradients against central differences for every
/// parameter. Relative error is `|a - n| / max(|a|, |n|, FD_FLOOR)`.
pub fn gradient_check<D: Differentiable>(model: &mut D, tolerance: f64) -> Result<GradCheckReport> {
    let analytic = model.gradient()?;
    let n = model.parameter_count();
    if analytic.len() != n {
        return Err(Error::invalid("gradient length differs from parameter count"));
    }
    let mut worst = 0.0f64;
    let mut worst_index = None;
    let mut worst_pair = (0.0, 0.0);
    for i in 0..n {
        let orig = model.get(i);
        model.set(i, orig + FD_STEP);
        let up = model.loss()?;
        model.set(i, orig - FD_STEP);
        let down = model.loss()?;
        model.set(i, orig);
        let numeric = (up - down) / (2.0 * FD_STEP);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_FLOOR);
        if err > worst || worst_index.is_none() {
            worst = worst.max(err);
            worst_index = Some(i);
            worst_pair = (a, numeric);
        }
    }
    Ok(GradCheckReport {
        parameters: n,
        max_relative_error: worst,
        worst_index,
        worst_pair,
        tolerance,
        passed: worst < tolerance,
    })
}

/// Reference random tensor for tests and checks.
pub fn random_tensor(dims: &[usize], rng: &mut impl rand::Rng, scale: f64) -> Tensor {
    let mut t = Tensor::zeros(dims);
    for v in t.data.iter_mut() {
        *v = rng.random_range(-scale..scale);
    }
    t
}
