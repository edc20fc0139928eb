use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    #[default]
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Dense,
    Conv2d,
    Relu,
    BatchNorm,
    Dropout,
    L2Normalize,
    GlobalAvgPool,
    MaxPool,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Dense => "dense",
            LayerKind::Conv2d => "conv2d",
            LayerKind::Relu => "relu",
            LayerKind::BatchNorm => "batchnorm",
            LayerKind::Dropout => "dropout",
            LayerKind::L2Normalize => "l2normalize",
            LayerKind::GlobalAvgPool => "globalavgpool",
            LayerKind::MaxPool => "maxpool",
        }
    }
}

/// A trainable tensor together with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

fn he_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

fn check_finite(layer: &'static str, t: &Tensor) -> Result<(), TensorError> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite { layer })
    }
}

// ---------------------------------------------------------------------------

/// Fully connected layer, `y = x Wᵀ + b` with `W: [out, in]`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: Param,
    pub bias: Param,
    cache: Option<Tensor>,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Self::from_weights(
            he_uniform(&[outputs, inputs], inputs, rng),
            Tensor::zeros(&[outputs]),
        )
    }

    pub fn from_weights(weight: Tensor, bias: Tensor) -> Self {
        assert_eq!(weight.shape().len(), 2);
        assert_eq!(bias.shape(), &weight.shape()[..1]);
        Self {
            weight: Param::new(weight),
            bias: Param::new(bias),
            cache: None,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor, TensorError> {
        let (n, per) = x.batch_dims();
        if x.shape().len() != 2 || per != self.inputs() {
            return Err(TensorError::ShapeMismatch {
                layer: "dense",
                expected: vec![n, self.inputs()],
                actual: x.shape().to_vec(),
            });
        }
        let (inp, out) = (self.inputs(), self.outputs());
        let w = self.weight.value.data();
        let b = self.bias.value.data();
        let mut y = vec![0.0; n * out];
        for (row, yrow) in x.data().chunks(inp).zip(y.chunks_mut(out)) {
            for (o, yv) in yrow.iter_mut().enumerate() {
                let wrow = &w[o * inp..(o + 1) * inp];
                *yv = b[o] + wrow.iter().zip(row).map(|(a, c)| a * c).sum::<f64>();
            }
        }
        self.cache = Some(x.clone());
        let y = Tensor::new(vec![n, out], y)?;
        check_finite("dense", &y)?;
        Ok(y)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor, TensorError> {
        let x = self
            .cache
            .as_ref()
            .ok_or(TensorError::BackwardBeforeForward { layer: "dense" })?;
        let n = x.shape()[0];
        let (inp, out) = (self.inputs(), self.outputs());
        grad_out.expect_shape("dense", &[n, out])?;
        let w = self.weight.value.data();
        let gw = self.weight.grad.data_mut();
        let gb = self.bias.grad.data_mut();
        let mut gx = vec![0.0; n * inp];
        for s in 0..n {
            let g = &grad_out.data()[s * out..(s + 1) * out];
            let xr = &x.data()[s * inp..(s + 1) * inp];
            let gxr = &mut gx[s * inp..(s + 1) * inp];
            for (o, &go) in g.iter().enumerate() {
                gb[o] += go;
                let wrow = &w[o * inp..(o + 1) * inp];
                let gwrow = &mut gw[o * inp..(o + 1) * inp];
                for i in 0..inp {
                    gwrow[i] += go * xr[i];
                    gxr[i] += go * wrow[i];
                }
            }
        }
        Tensor::new(vec![n, inp], gx)
    }
}

// ---------------------------------------------------------------------------

/// 2-D convolution over `[N, C, H, W]` with zero padding and optional
/// channel groups (`groups == in_channels` gives a depthwise convolution).
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    groups: usize,
    cache: Option<Tensor>,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    cin: usize,
    cout: usize,
    cin_g: usize,
    cout_g: usize,
    k: usize,
    s: usize,
    p: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        rng: &mut R,
    ) -> Self {
        assert!(groups >= 1 && in_channels % groups == 0 && out_channels % groups == 0);
        assert!(kernel >= 1 && stride >= 1);
        let cin_g = in_channels / groups;
        let weight = he_uniform(&[out_channels, cin_g, kernel, kernel], cin_g * kernel * kernel, rng);
        Self {
            weight: Param::new(weight),
            bias: Param::new(Tensor::zeros(&[out_channels])),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            groups,
            cache: None,
        }
    }

    /// Output spatial size for an `h × w` input.
    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let ho = (h + 2 * self.padding).saturating_sub(self.kernel) / self.stride + 1;
        let wo = (w + 2 * self.padding).saturating_sub(self.kernel) / self.stride + 1;
        (ho, wo)
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    fn geom(&self, x: &Tensor) -> Result<ConvGeom, TensorError> {
        let s = x.shape();
        if s.len() != 4
            || s[1] != self.in_channels
            || s[2] + 2 * self.padding < self.kernel
            || s[3] + 2 * self.padding < self.kernel
        {
            return Err(TensorError::ShapeMismatch {
                layer: "conv2d",
                expected: vec![s.first().copied().unwrap_or(0), self.in_channels, self.kernel, self.kernel],
                actual: s.to_vec(),
            });
        }
        let (ho, wo) = self.output_size(s[2], s[3]);
        Ok(ConvGeom {
            cin: self.in_channels,
            cout: self.out_channels,
            cin_g: self.in_channels / self.groups,
            cout_g: self.out_channels / self.groups,
            k: self.kernel,
            s: self.stride,
            p: self.padding,
            h: s[2],
            w: s[3],
            ho,
            wo,
        })
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor, TensorError> {
        let g = self.geom(x)?;
        let n = x.shape()[0];
        let in_per = g.cin * g.h * g.w;
        let out_per = g.cout * g.ho * g.wo;
        let weight = self.weight.value.data();
        let bias = self.bias.value.data();
        let mut out = vec![0.0; n * out_per];
        out.par_chunks_mut(out_per.max(1))
            .zip(x.data().par_chunks(in_per.max(1)))
            .for_each(|(y, xs)| conv_forward_item(&g, weight, bias, xs, y));
        self.cache = Some(x.clone());
        let y = Tensor::new(vec![n, g.cout, g.ho, g.wo], out)?;
        check_finite("conv2d", &y)?;
        Ok(y)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor, TensorError> {
        let x = self
            .cache
            .as_ref()
            .ok_or(TensorError::BackwardBeforeForward { layer: "conv2d" })?;
        let g = self.geom(x)?;
        let n = x.shape()[0];
        grad_out.expect_shape("conv2d", &[n, g.cout, g.ho, g.wo])?;
        let in_per = g.cin * g.h * g.w;
        let out_per = g.cout * g.ho * g.wo;
        let weight = self.weight.value.data();
        let wlen = weight.len();

        // Per-item weight gradients are computed in parallel, then reduced in
        // item order so the result does not depend on the worker count.
        let mut gx = vec![0.0; n * in_per];
        let partial: Vec<(Vec<f64>, Vec<f64>)> = gx
            .par_chunks_mut(in_per.max(1))
            .zip(x.data().par_chunks(in_per.max(1)))
            .zip(grad_out.data().par_chunks(out_per.max(1)))
            .map(|((gxs, xs), gys)| {
                let mut gw = vec![0.0; wlen];
                let mut gb = vec![0.0; g.cout];
                conv_backward_item(&g, weight, xs, gys, gxs, &mut gw, &mut gb);
                (gw, gb)
            })
            .collect();
        let gw_total = self.weight.grad.data_mut();
        for (gw, _) in &partial {
            for (a, b) in gw_total.iter_mut().zip(gw) {
                *a += b;
            }
        }
        let gb_total = self.bias.grad.data_mut();
        for (_, gb) in &partial {
            for (a, b) in gb_total.iter_mut().zip(gb) {
                *a += b;
            }
        }
        Tensor::new(x.shape().to_vec(), gx)
    }
}

/// For each kernel column `kx`, the output columns whose input column
/// `ox * s + kx - p` lies inside the image.
fn valid_cols(g: &ConvGeom) -> Vec<(usize, usize)> {
    (0..g.k)
        .map(|kx| {
            let lo = g.p.saturating_sub(kx).div_ceil(g.s);
            let hi = if g.w + g.p > kx { ((g.w + g.p - kx - 1) / g.s + 1).min(g.wo) } else { 0 };
            (lo.min(hi), hi)
        })
        .collect()
}

fn conv_forward_item(g: &ConvGeom, weight: &[f64], bias: &[f64], x: &[f64], y: &mut [f64]) {
    let plane = g.ho * g.wo;
    let cols = valid_cols(g);
    for oc in 0..g.cout {
        let grp = oc / g.cout_g;
        let yo = &mut y[oc * plane..(oc + 1) * plane];
        yo.iter_mut().for_each(|v| *v = bias[oc]);
        for icl in 0..g.cin_g {
            let ic = grp * g.cin_g + icl;
            let xi = &x[ic * g.h * g.w..(ic + 1) * g.h * g.w];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let wv = weight[((oc * g.cin_g + icl) * g.k + ky) * g.k + kx];
                    for oy in 0..g.ho {
                        let iy = (oy * g.s + ky) as isize - g.p as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let xrow = &xi[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let yrow = &mut yo[oy * g.wo..(oy + 1) * g.wo];
                        let (lo, hi) = cols[kx];
                        if g.s == 1 {
                            let x0 = lo + kx - g.p;
                            for (yv, &xv) in yrow[lo..hi].iter_mut().zip(&xrow[x0..x0 + hi - lo]) {
                                *yv += wv * xv;
                            }
                        } else {
                            for ox in lo..hi {
                                yrow[ox] += wv * xrow[ox * g.s + kx - g.p];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward_item(
    g: &ConvGeom,
    weight: &[f64],
    x: &[f64],
    gy: &[f64],
    gx: &mut [f64],
    gw: &mut [f64],
    gb: &mut [f64],
) {
    let plane = g.ho * g.wo;
    let cols = valid_cols(g);
    for oc in 0..g.cout {
        let grp = oc / g.cout_g;
        let go = &gy[oc * plane..(oc + 1) * plane];
        gb[oc] += go.iter().sum::<f64>();
        for icl in 0..g.cin_g {
            let ic = grp * g.cin_g + icl;
            let base = ic * g.h * g.w;
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let widx = ((oc * g.cin_g + icl) * g.k + ky) * g.k + kx;
                    let wv = weight[widx];
                    let mut acc = 0.0;
                    for oy in 0..g.ho {
                        let iy = (oy * g.s + ky) as isize - g.p as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let row = base + iy as usize * g.w;
                        let (lo, hi) = cols[kx];
                        for ox in lo..hi {
                            let ix = row + ox * g.s + kx - g.p;
                            let gov = go[oy * g.wo + ox];
                            acc += gov * x[ix];
                            gx[ix] += gov * wv;
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor, TensorError> {
        let mask: Vec<bool> = x.data().iter().map(|&v| v > 0.0).collect();
        let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        self.mask = Some(mask);
        let y = Tensor::new(x.shape().to_vec(), data)?;
        check_finite("relu", &y)?;
        Ok(y)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor, TensorError> {
        let mask = self
            .mask
            .as_ref()
            .ok_or(TensorError::BackwardBeforeForward { layer: "relu" })?;
        if mask.len() != grad_out.len() {
            return Err(TensorError::ShapeMismatch {
                layer: "relu",
                expected: vec![mask.len()],
                actual: grad_out.shape().to_vec(),
            });
        }
        let data = grad_out
            .data()
            .iter()
            .zip(mask)
            .map(|(&g, &m)| if m { g } else { 0.0 })
            .collect();
        Tensor::new(grad_out.shape().to_vec(), data)
    }
}

// ---------------------------------------------------------------------------

/// Per-channel batch normalization over `[N, C]` or `[N, C, ...]` inputs.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
    mode: Mode,
    cache: Option<BnCache>,
}

#[derive(Debug, Clone)]
struct BnCache {
    shape: Vec<usize>,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    mode: Mode,
}

impl BatchNorm {
    pub const DEFAULT_MOMENTUM: f64 = 0.9;
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(Tensor::filled(&[channels], 1.0)),
            beta: Param::new(Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], 1.0),
            momentum: Self::DEFAULT_MOMENTUM,
            eps: Self::DEFAULT_EPS,
            mode: Mode::Eval,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    fn layout(&self, x: &Tensor) -> Result<(usize, usize, usize), TensorError> {
        let s = x.shape();
        if s.len() < 2 || s[1] != self.channels() || s[0] == 0 {
            return Err(TensorError::ShapeMismatch {
                layer: "batchnorm",
                expected: vec![s.first().copied().unwrap_or(0), self.channels()],
                actual: s.to_vec(),
            });
        }
        let spatial = s[2..].iter().product::<usize>();
        Ok((s[0], s[1], spatial))
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor, TensorError> {
        let (n, c, sp) = self.layout(x)?;
        let xd = x.data();
        let idx = |s: usize, ch: usize, k: usize| (s * c + ch) * sp + k;
        let (mean, var) = match self.mode {
            Mode::Train => {
                let m = (n * sp) as f64;
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut acc = 0.0;
                    for s in 0..n {
                        for k in 0..sp {
                            acc += xd[idx(s, ch, k)];
                        }
                    }
                    mean[ch] = acc / m;
                    let mut acc2 = 0.0;
                    for s in 0..n {
                        for k in 0..sp {
                            let d = xd[idx(s, ch, k)] - mean[ch];
                            acc2 += d * d;
                        }
                    }
                    var[ch] = acc2 / m;
                }
                let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
                let mom = self.momentum;
                for ch in 0..c {
                    let rm = &mut self.running_mean.data_mut()[ch];
                    *rm = mom * *rm + (1.0 - mom) * mean[ch];
                    let rv = &mut self.running_var.data_mut()[ch];
                    *rv = mom * *rv + (1.0 - mom) * var[ch] * unbias;
                }
                (mean, var)
            }
            Mode::Eval => (
                self.running_mean.data().to_vec(),
                self.running_var.data().to_vec(),
            ),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let gamma = self.gamma.value.data();
        let beta = self.beta.value.data();
        let mut xhat = vec![0.0; xd.len()];
        let mut y = vec![0.0; xd.len()];
        for s in 0..n {
            for ch in 0..c {
                for k in 0..sp {
                    let i = idx(s, ch, k);
                    xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                    y[i] = gamma[ch] * xhat[i] + beta[ch];
                }
            }
        }
        self.cache = Some(BnCache {
            shape: x.shape().to_vec(),
            xhat,
            inv_std,
            mode: self.mode,
        });
        let y = Tensor::new(x.shape().to_vec(), y)?;
        check_finite("batchnorm", &y)?;
        Ok(y)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor, TensorError> {
        let cache = self
            .cache
            .as_ref()
            .ok_or(TensorError::BackwardBeforeForward { layer: "batchnorm" })?;
        grad_out.expect_shape("batchnorm", &cache.shape)?;
        let n = cache.shape[0];
        let c = cache.shape[1];
        let sp = cache.shape[2..].iter().product::<usize>();
        let idx = |s: usize, ch: usize, k: usize| (s * c + ch) * sp + k;
        let gy = grad_out.data();
        let gamma = self.gamma.value.data().to_vec();
        let m = (n * sp) as f64;
        let mut gx = vec![0.0; gy.len()];
        for ch in 0..c {
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for s in 0..n {
                for k in 0..sp {
                    let i = idx(s, ch, k);
                    sum_g += gy[i];
                    sum_gx += gy[i] * cache.xhat[i];
                }
            }
            self.gamma.grad.data_mut()[ch] += sum_gx;
            self.beta.grad.data_mut()[ch] += sum_g;
            let scale = gamma[ch] * cache.inv_std[ch];
            for s in 0..n {
                for k in 0..sp {
                    let i = idx(s, ch, k);
                    gx[i] = match cache.mode {
                        Mode::Eval => scale * gy[i],
                        Mode::Train => {
                            scale * (gy[i] - sum_g / m - cache.xhat[i] * sum_gx / m)
                        }
                    };
                }
            }
        }
        Tensor::new(cache.shape.clone(), gx)
    }
}

// ---------------------------------------------------------------------------

/// Inverted dropout: survivors are scaled by `1 / (1 - p)` in train mode.
#[derive(Debug, Clone)]
pub struct Dropout {
    pub p: f64,
    mode: Mode,
    rng: ChaCha8Rng,
    scale: Option<Vec<f64>>,
}

impl Dropout {
    pub const DEFAULT_RATE: f64 = 0.3;

    pub fn new(p: f64, seed: u64) -> Self {
        assert!((0.0..1.0).contains(&p), "dropout rate must lie in [0, 1)");
        Self {
            p,
            mode: Mode::Eval,
            rng: ChaCha8Rng::seed_from_u64(seed),
            scale: None,
        }
    }

    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor, TensorError> {
        let scale: Vec<f64> = match self.mode {
            Mode::Eval => vec![1.0; x.len()],
            Mode::Train => {
                let keep = 1.0 / (1.0 - self.p);
                (0..x.len())
                    .map(|_| if self.rng.gen::<f64>() < self.p { 0.0 } else { keep })
                    .collect()
            }
        };
        let data = x.data().iter().zip(&scale).map(|(v, s)| v * s).collect();
        self.scale = Some(scale);
        Tensor::new(x.shape().to_vec(), data)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor, TensorError> {
        let scale = self
            .scale
            .as_ref()
            .ok_or(TensorError::BackwardBeforeForward { layer: "dropout" })?;
        if scale.len() != grad_out.len() {
            return Err(TensorError::ShapeMismatch {
                layer: "dropout",
                expected: vec![scale.len()],
                actual: grad_out.shape().to_vec(),
            });
        }
        let data = grad_out.data().iter().zip(scale).map(|(g, s)| g * s).collect();
        Tensor::new(grad_out.shape().to_vec(), data)
    }
}

// ---------------------------------------------------------------------------

/// Row-wise projection onto the unit sphere for `[N, D]` inputs.
#[derive(Debug, Clone, Default)]
pub struct L2Normalize {
    cache: Option<(Tensor, Vec<f64>)>,
}

impl L2Normalize {
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor, TensorError> {
        if x.shape().len() != 2 {
            return Err(TensorError::ShapeMismatch {
                layer: "l2normalize",
                expected: vec![x.shape().first().copied().unwrap_or(0), x.len()],
                actual: x.shape().to_vec(),
            });
        }
        let d = x.shape()[1];
        let mut norms = Vec::with_capacity(x.shape()[0]);
        let mut y = Vec::with_capacity(x.len());
        for row in x.data().chunks(d.max(1)) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                log::warn!("l2normalize: zero vector left unnormalized");
                y.extend(std::iter::repeat_n(0.0, d));
            } else {
                y.extend(row.iter().map(|v| v / norm));
            }
            norms.push(norm);
        }
        let y = Tensor::new(x.shape().to_vec(), y)?;
        check_finite("l2normalize", &y)?;
        self.cache = Some((y.clone(), norms));
        Ok(y)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor, TensorError> {
        let (y, norms) = self
            .cache
            .as_ref()
            .ok_or(TensorError::BackwardBeforeForward { layer: "l2normalize" })?;
        grad_out.expect_shape("l2normalize", y.shape())?;
        let d = y.shape()[1];
        let mut gx = Vec::with_capacity(y.len());
        for ((yr, gr), &norm) in y.data().chunks(d.max(1)).zip(grad_out.data().chunks(d.max(1))).zip(norms) {
            if norm == 0.0 {
                gx.extend(std::iter::repeat_n(0.0, d));
                continue;
            }
            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
            gx.extend(yr.iter().zip(gr).map(|(yv, gv)| (gv - yv * dot) / norm));
        }
        Tensor::new(y.shape().to_vec(), gx)
    }
}

// ---------------------------------------------------------------------------

/// `[N, C, H, W]` → `[N, C]` spatial mean.
#[derive(Debug, Clone, Default)]
pub struct GlobalAvgPool {
    shape: Option<Vec<usize>>,
}

impl GlobalAvgPool {
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor, TensorError> {
        let s = x.shape();
        if s.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                layer: "globalavgpool",
                expected: vec![s.first().copied().unwrap_or(0), 0, 0, 0],
                actual: s.to_vec(),
            });
        }
        let plane = s[2] * s[3];
        let data = x
            .data()
            .chunks(plane.max(1))
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        self.shape = Some(s.to_vec());
        Tensor::new(vec![s[0], s[1]], data)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor, TensorError> {
        let s = self
            .shape
            .as_ref()
            .ok_or(TensorError::BackwardBeforeForward { layer: "globalavgpool" })?;
        grad_out.expect_shape("globalavgpool", &s[..2])?;
        let plane = s[2] * s[3];
        let mut gx = Vec::with_capacity(s.iter().product());
        for &g in grad_out.data() {
            gx.extend(std::iter::repeat_n(g / plane as f64, plane));
        }
        Tensor::new(s.clone(), gx)
    }
}

// ---------------------------------------------------------------------------

/// Non-overlapping `size × size` max pooling; trailing rows/columns that do
/// not fill a window are dropped.
#[derive(Debug, Clone)]
pub struct MaxPool {
    pub size: usize,
    cache: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPool {
    pub fn new(size: usize) -> Self {
        assert!(size >= 1);
        Self { size, cache: None }
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor, TensorError> {
        let s = x.shape();
        if s.len() != 4 || s[2] < self.size || s[3] < self.size {
            return Err(TensorError::ShapeMismatch {
                layer: "maxpool",
                expected: vec![s.first().copied().unwrap_or(0), 0, self.size, self.size],
                actual: s.to_vec(),
            });
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h / self.size, w / self.size);
        let xd = x.data();
        let mut y = Vec::with_capacity(n * c * ho * wo);
        let mut arg = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    for ky in 0..self.size {
                        for kx in 0..self.size {
                            let i = base + (oy * self.size + ky) * w + ox * self.size + kx;
                            if xd[i] > best {
                                best = xd[i];
                                best_i = i;
                            }
                        }
                    }
                    y.push(best);
                    arg.push(best_i);
                }
            }
        }
        self.cache = Some((s.to_vec(), arg));
        Tensor::new(vec![n, c, ho, wo], y)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor, TensorError> {
        let (shape, arg) = self
            .cache
            .as_ref()
            .ok_or(TensorError::BackwardBeforeForward { layer: "maxpool" })?;
        if grad_out.len() != arg.len() {
            return Err(TensorError::ShapeMismatch {
                layer: "maxpool",
                expected: vec![arg.len()],
                actual: grad_out.shape().to_vec(),
            });
        }
        let mut gx = vec![0.0; shape.iter().product()];
        for (&i, &g) in arg.iter().zip(grad_out.data()) {
            gx[i] += g;
        }
        Tensor::new(shape.clone(), gx)
    }
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub enum Layer {
    Dense(Dense),
    Conv2d(Conv2d),
    Relu(Relu),
    BatchNorm(BatchNorm),
    Dropout(Dropout),
    L2Normalize(L2Normalize),
    GlobalAvgPool(GlobalAvgPool),
    MaxPool(MaxPool),
}

impl Layer {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Dense(_) => LayerKind::Dense,
            Layer::Conv2d(_) => LayerKind::Conv2d,
            Layer::Relu(_) => LayerKind::Relu,
            Layer::BatchNorm(_) => LayerKind::BatchNorm,
            Layer::Dropout(_) => LayerKind::Dropout,
            Layer::L2Normalize(_) => LayerKind::L2Normalize,
            Layer::GlobalAvgPool(_) => LayerKind::GlobalAvgPool,
            Layer::MaxPool(_) => LayerKind::MaxPool,
        }
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor, TensorError> {
        match self {
            Layer::Dense(l) => l.forward(x),
            Layer::Conv2d(l) => l.forward(x),
            Layer::Relu(l) => l.forward(x),
            Layer::BatchNorm(l) => l.forward(x),
            Layer::Dropout(l) => l.forward(x),
            Layer::L2Normalize(l) => l.forward(x),
            Layer::GlobalAvgPool(l) => l.forward(x),
            Layer::MaxPool(l) => l.forward(x),
        }
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor, TensorError> {
        match self {
            Layer::Dense(l) => l.backward(grad_out),
            Layer::Conv2d(l) => l.backward(grad_out),
            Layer::Relu(l) => l.backward(grad_out),
            Layer::BatchNorm(l) => l.backward(grad_out),
            Layer::Dropout(l) => l.backward(grad_out),
            Layer::L2Normalize(l) => l.backward(grad_out),
            Layer::GlobalAvgPool(l) => l.backward(grad_out),
            Layer::MaxPool(l) => l.backward(grad_out),
        }
    }

    pub fn set_mode(&mut self, mode: Mode) {
        match self {
            Layer::BatchNorm(l) => l.set_mode(mode),
            Layer::Dropout(l) => l.set_mode(mode),
            _ => {}
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        match self {
            Layer::Dense(l) => vec![&l.weight, &l.bias],
            Layer::Conv2d(l) => vec![&l.weight, &l.bias],
            Layer::BatchNorm(l) => vec![&l.gamma, &l.beta],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Layer::Dense(l) => vec![&mut l.weight, &mut l.bias],
            Layer::Conv2d(l) => vec![&mut l.weight, &mut l.bias],
            Layer::BatchNorm(l) => vec![&mut l.gamma, &mut l.beta],
            _ => Vec::new(),
        }
    }

    /// Non-trainable state (batchnorm running statistics).
    pub fn buffers(&self) -> Vec<&Tensor> {
        match self {
            Layer::BatchNorm(l) => vec![&l.running_mean, &l.running_var],
            _ => Vec::new(),
        }
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::BatchNorm(l) => vec![&mut l.running_mean, &mut l.running_var],
            _ => Vec::new(),
        }
    }
}

/// Ordered stack of layers.
#[derive(Debug, Clone, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor, TensorError> {
        let mut cur = x.clone();
        for layer in &mut self.layers {
            cur = layer.forward(&cur)?;
        }
        Ok(cur)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor, TensorError> {
        let mut cur = grad_out.clone();
        for layer in self.layers.iter_mut().rev() {
            cur = layer.backward(&cur)?;
        }
        Ok(cur)
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.layers.iter_mut().for_each(|l| l.set_mode(mode));
    }

    pub fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn buffers(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.buffers()).collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.buffers_mut()).collect()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }
}
