//! Blur-kernel estimation from the LR mid-frame, Wiener deconvolution to a
//! latent sharp frame, and the sharp-feature network.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::degradation::{bicubic_resize, blur_frame, BlurKernel, Image};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Conv2d, ConvInit, ParamBuilder, ParamStore, ResBlock};
use crate::ops::blur::Boundary;
use crate::ops::resample::{Filter, Resampler};
use crate::tensor::{Real, Tensor};

/// Conv trunk, global pooling and a softmax head over `k*k` taps.
#[derive(Clone, Debug)]
pub struct KernelEstimator {
    pub layers: Vec<Conv2d>,
    pub head: Conv2d,
    pub kernel_size: usize,
}

impl KernelEstimator {
    pub const DEPTH: usize = 5;

    pub fn new<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        channels: usize,
        kernel_size: usize,
    ) -> Result<Self> {
        if kernel_size % 2 == 0 {
            return Err(Error::invalid("kernel size must be odd"));
        }
        let mut layers = Vec::with_capacity(Self::DEPTH);
        for i in 0..Self::DEPTH {
            let cin = if i == 0 { 3 } else { channels };
            layers.push(Conv2d::new(
                &mut pb.pp(&format!("conv{i}")),
                cin,
                channels,
                3,
                ConvInit::Default,
            )?);
        }
        let head = Conv2d::new(
            &mut pb.pp("head"),
            channels,
            kernel_size * kernel_size,
            1,
            ConvInit::Default,
        )?;
        Ok(Self {
            layers,
            head,
            kernel_size,
        })
    }

    pub fn receptive_field(&self) -> usize {
        1 + 2 * self.layers.len()
    }

    /// `[B, 3, h, w] -> [B, k, k]`, each slice a valid kernel.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, lr: Var) -> Result<Var> {
        let (b, _, h, w) = g.value(lr).dims4()?;
        let rf = self.receptive_field();
        if h < rf || w < rf {
            return Err(Error::invalid(format!(
                "input {h}x{w} smaller than receptive field {rf}"
            )));
        }
        let mut x = lr;
        for conv in &self.layers {
            x = conv.forward(g, x)?;
            x = g.relu(x);
        }
        let pooled = g.global_avg_pool(x)?;
        let logits = self.head.forward(g, pooled)?;
        let k2 = self.kernel_size * self.kernel_size;
        let probs = g.softmax_groups(logits, k2)?;
        g.reshape(probs, &[b, self.kernel_size, self.kernel_size])
    }
}

/// Run the estimator on one frame.
pub fn estimate_kernel<T: Real>(
    est: &KernelEstimator,
    params: &ParamStore<T>,
    lr_mid: &Image,
) -> Result<BlurKernel> {
    let (c, h, w) = lr_mid.dims3()?;
    let mut g = Graph::new(params);
    let x = g.constant(lr_mid.cast::<T>().reshape(&[1, c, h, w])?);
    let k = est.forward(&mut g, x)?;
    let values = g.value(k).data().iter().map(|v| v.as_f64()).collect();
    BlurKernel::from_values(est.kernel_size, values)
}

fn mean_abs_diff(a: &Image, b: &Image) -> Result<f64> {
    a.expect_same_shape(b)?;
    let total: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum();
    Ok(total / a.numel() as f64)
}

/// Self-supervised cycle on the LR frame alone:
/// `bicubic_down(blur(bicubic_up(lr), k))` against `lr`.
pub fn kernel_cycle_loss(lr_mid: &Image, kernel: &BlurKernel, scale: usize) -> Result<f64> {
    if scale == 0 {
        return Err(Error::invalid("scale must be at least 1"));
    }
    let up = bicubic_resize(lr_mid, scale, 1)?;
    let blurred = blur_frame(&up, kernel, Boundary::Reflect)?;
    let cycle = bicubic_resize(&blurred, 1, scale)?;
    mean_abs_diff(&cycle, lr_mid)
}

/// Cycle re-degrading a reference HR frame with the kernel:
/// `bicubic_down(blur(hr, k))` against `lr`.
pub fn kernel_cycle_loss_from(
    reference_hr: &Image,
    lr_mid: &Image,
    kernel: &BlurKernel,
    scale: usize,
) -> Result<f64> {
    if scale == 0 {
        return Err(Error::invalid("scale must be at least 1"));
    }
    let blurred = blur_frame(reference_hr, kernel, Boundary::Reflect)?;
    let cycle = bicubic_resize(&blurred, 1, scale)?;
    mean_abs_diff(&cycle, lr_mid)
}

/// Differentiable form of [`kernel_cycle_loss_from`] over a batch:
/// `hr [B,3,H,W]`, `lr [B,3,H/s,W/s]`, `kernels [B,k,k]`.
pub fn kernel_cycle_loss_graph<T: Real>(
    g: &mut Graph<'_, T>,
    hr: Var,
    lr: Var,
    kernels: Var,
    scale: usize,
) -> Result<Var> {
    let (_, _, h, w) = g.value(hr).dims4()?;
    let blurred = g.blur(hr, kernels, Boundary::Reflect)?;
    let down = Resampler::downscale(Filter::Bicubic, (h, w), scale, true)?;
    let cycle = g.resample(blurred, &down)?;
    g.l1(cycle, lr)
}

fn fft2(planner: &mut FftPlanner<f64>, data: &mut [Complex<f64>], h: usize, w: usize, inverse: bool) {
    let row = if inverse {
        planner.plan_fft_inverse(w)
    } else {
        planner.plan_fft_forward(w)
    };
    for r in data.chunks_mut(w) {
        row.process(r);
    }
    let col = if inverse {
        planner.plan_fft_inverse(h)
    } else {
        planner.plan_fft_forward(h)
    };
    let mut buf = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            buf[y] = data[y * w + x];
        }
        col.process(&mut buf);
        for y in 0..h {
            data[y * w + x] = buf[y];
        }
    }
    if inverse {
        let norm = 1.0 / (h * w) as f64;
        for v in data.iter_mut() {
            *v *= norm;
        }
    }
}

/// Frequency response of circular correlation with `kernel` on an
/// `h x w` torus: `blur(x)^ = H * x^`.
pub fn transfer_function(kernel: &BlurKernel, h: usize, w: usize) -> Result<Vec<Complex<f64>>> {
    let k = kernel.size();
    if k > h || k > w {
        return Err(Error::invalid(format!(
            "kernel {k}x{k} larger than frame {h}x{w}"
        )));
    }
    let r = (k / 2) as isize;
    // Correlation is convolution with the flipped kernel.
    let mut spec = vec![Complex::new(0.0, 0.0); h * w];
    for i in 0..k {
        for j in 0..k {
            let y = (r - i as isize).rem_euclid(h as isize) as usize;
            let x = (r - j as isize).rem_euclid(w as isize) as usize;
            spec[y * w + x].re += kernel.at(i, j);
        }
    }
    fft2(&mut FftPlanner::new(), &mut spec, h, w, false);
    Ok(spec)
}

/// 2D DFT of every channel of `img`, row-major per channel.
pub fn spectrum(img: &Image) -> Result<Vec<Vec<Complex<f64>>>> {
    let (c, h, w) = img.dims3()?;
    let mut planner = FftPlanner::new();
    Ok((0..c)
        .map(|ch| {
            let mut d: Vec<Complex<f64>> = img.data()[ch * h * w..(ch + 1) * h * w]
                .iter()
                .map(|&v| Complex::new(v, 0.0))
                .collect();
            fft2(&mut planner, &mut d, h, w, false);
            d
        })
        .collect())
}

/// Wiener inverse on the torus, no padding and no clamping:
/// `x^ = conj(H) * y^ / (|H|^2 + eps)`.
pub fn wiener_deconvolve_circular(img: &Image, kernel: &BlurKernel, eps: f64) -> Result<Image> {
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("eps must be positive, got {eps}")));
    }
    let (c, h, w) = img.dims3()?;
    let tf = transfer_function(kernel, h, w)?;
    let mut planner = FftPlanner::new();
    let mut out = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        let plane = &img.data()[ch * h * w..(ch + 1) * h * w];
        let mut d: Vec<Complex<f64>> = plane.iter().map(|&v| Complex::new(v, 0.0)).collect();
        fft2(&mut planner, &mut d, h, w, false);
        for (v, t) in d.iter_mut().zip(&tf) {
            *v = t.conj() * *v / (t.norm_sqr() + eps);
        }
        fft2(&mut planner, &mut d, h, w, true);
        for (o, v) in out.data_mut()[ch * h * w..(ch + 1) * h * w].iter_mut().zip(&d) {
            *o = v.re;
        }
    }
    Ok(out)
}

/// Margin of reflected pixels the model adds before the circular inverse.
pub const DECONV_PAD: usize = 8;

/// Wiener inverse on the frame-sized torus, clamped to `[0, 1]`.
pub fn fft_deconvolve(img: &Image, kernel: &BlurKernel, eps: f64) -> Result<Image> {
    fft_deconvolve_padded(img, kernel, eps, 0)
}

/// Reflect-pad by `pad`, Wiener inverse on the torus, crop and clamp to
/// `[0, 1]`. The margin keeps frame edges from wrapping into each other.
pub fn fft_deconvolve_padded(img: &Image, kernel: &BlurKernel, eps: f64, pad: usize) -> Result<Image> {
    let (c, h, w) = img.dims3()?;
    let p = pad;
    let (ph, pw) = (h + 2 * p, w + 2 * p);
    let padded = Tensor::from_fn(&[c, ph, pw], |i| {
        let ch = i / (ph * pw);
        let y = Boundary::Reflect
            .resolve(((i / pw) % ph) as isize - p as isize, h)
            .unwrap_or(0);
        let x = Boundary::Reflect
            .resolve((i % pw) as isize - p as isize, w)
            .unwrap_or(0);
        img.at3(ch, y, x)
    });
    let full = wiener_deconvolve_circular(&padded, kernel, eps)?;
    Ok(Tensor::from_fn(&[c, h, w], |i| {
        let ch = i / (h * w);
        let y = (i / w) % h;
        let x = i % w;
        full.at3(ch, y + p, x + p).clamp(0.0, 1.0)
    }))
}

/// `conv(3->C) + ReLU + conv(C->C)` followed by two residual blocks.
#[derive(Clone, Debug)]
pub struct SharpFeatureNet {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub blocks: Vec<ResBlock>,
}

impl SharpFeatureNet {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, channels: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(&mut pb.pp("conv1"), 3, channels, 3, ConvInit::Default)?,
            conv2: Conv2d::new(&mut pb.pp("conv2"), channels, channels, 3, ConvInit::Default)?,
            blocks: (0..2)
                .map(|i| ResBlock::new(&mut pb.pp(&format!("res{i}")), channels))
                .collect::<Result<_>>()?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, sharp: Var) -> Result<Var> {
        let x = self.conv1.forward(g, sharp)?;
        let x = g.relu(x);
        let mut x = self.conv2.forward(g, x)?;
        for b in &self.blocks {
            x = b.forward(g, x)?;
        }
        Ok(x)
    }
}

/// Features of one sharp frame, `[C, H, W]`.
pub fn extract_sharp_features<T: Real>(
    net: &SharpFeatureNet,
    params: &ParamStore<T>,
    sharp: &Image,
) -> Result<Tensor<T>> {
    let (c, h, w) = sharp.dims3()?;
    let mut g = Graph::new(params);
    let x = g.constant(sharp.cast::<T>().reshape(&[1, c, h, w])?);
    let y = net.forward(&mut g, x)?;
    let ch = g.shape(y)[1];
    g.value(y).clone().reshape(&[ch, h, w])
}

/// Heat map of a kernel, `cell x cell` pixels per tap, normalised by the
/// peak and coloured black -> red -> yellow -> white.
pub fn kernel_heatmap(kernel: &BlurKernel, cell: usize) -> Image {
    let k = kernel.size();
    let side = k * cell;
    let peak = kernel.values().iter().cloned().fold(0.0, f64::max).max(1e-12);
    Tensor::from_fn(&[3, side, side], |i| {
        let ch = i / (side * side);
        let y = (i / side) % side / cell;
        let x = i % side / cell;
        let v = kernel.at(y, x) / peak;
        (3.0 * v - ch as f64).clamp(0.0, 1.0)
    })
}
