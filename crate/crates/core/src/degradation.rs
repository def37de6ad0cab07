//! Blur kernels, the blur + bicubic-downsampling degradation, and training
//! pair sampling with dihedral augmentation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::blur::{self, Boundary};
use crate::ops::resample::{Filter, Resampler};
use crate::tensor::Tensor;

/// Planar RGB image `[3, H, W]` with values in `[0, 1]`.
pub type Image = Tensor<f64>;

/// Square, odd-sized, non-negative filter summing to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlurKernel {
    size: usize,
    values: Vec<f64>,
    sigma_hint: Option<f64>,
}

impl BlurKernel {
    /// Validates and renormalises. Negative entries or a non-positive sum
    /// are rejected.
    pub fn from_values(size: usize, values: Vec<f64>) -> Result<Self> {
        if size == 0 || size % 2 == 0 {
            return Err(Error::invalid(format!("kernel size must be odd, got {size}")));
        }
        if values.len() != size * size {
            return Err(Error::invalid(format!(
                "kernel of size {size} needs {} values, got {}",
                size * size,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("kernel values must be finite and non-negative"));
        }
        let total: f64 = values.iter().sum();
        if total <= 0.0 {
            return Err(Error::invalid("kernel sums to zero"));
        }
        Ok(Self {
            size,
            values: values.into_iter().map(|v| v / total).collect(),
            sigma_hint: None,
        })
    }

    /// Isotropic Gaussian sampled at integer offsets from the centre.
    pub fn gaussian(size: usize, sigma: f64) -> Result<Self> {
        if size == 0 || size % 2 == 0 {
            return Err(Error::invalid(format!("kernel size must be odd, got {size}")));
        }
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
        }
        let r = (size / 2) as f64;
        let two_s2 = 2.0 * sigma * sigma;
        let values = (0..size * size)
            .map(|i| {
                let dy = (i / size) as f64 - r;
                let dx = (i % size) as f64 - r;
                (-(dy * dy + dx * dx) / two_s2).exp()
            })
            .collect();
        let mut k = Self::from_values(size, values)?;
        k.sigma_hint = Some(sigma);
        Ok(k)
    }

    /// Identity kernel.
    pub fn delta(size: usize) -> Result<Self> {
        let mut values = vec![0.0; size * size];
        if let Some(c) = values.get_mut(size * size / 2) {
            *c = 1.0;
        }
        Self::from_values(size, values)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn sigma_hint(&self) -> Option<f64> {
        self.sigma_hint
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.size + col]
    }

    /// `[1, size, size]` stack for the batched blur operator.
    pub fn to_tensor(&self) -> Tensor<f64> {
        Tensor::from_vec(&[1, self.size, self.size], self.values.clone())
            .expect("kernel shape is consistent")
    }

    /// Plain-text grid: one row per line, whitespace-separated.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in 0..self.size {
            let row: Vec<String> = (0..self.size)
                .map(|c| format!("{:.8e}", self.at(r, c)))
                .collect();
            s.push_str(&row.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let rows: Vec<Vec<f64>> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split_whitespace()
                    .map(|t| {
                        t.parse::<f64>()
                            .map_err(|e| Error::Parse(format!("kernel entry `{t}`: {e}")))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        let size = rows.len();
        if rows.iter().any(|r| r.len() != size) {
            return Err(Error::Parse("kernel grid is not square".into()));
        }
        Self::from_values(size, rows.into_iter().flatten().collect())
    }

    /// Least-squares fit of an isotropic Gaussian width to this kernel by
    /// golden-section search over sigma.
    pub fn fit_gaussian_sigma(&self) -> f64 {
        let loss = |sigma: f64| -> f64 {
            let g = BlurKernel::gaussian(self.size, sigma).expect("valid sigma");
            g.values
                .iter()
                .zip(&self.values)
                .map(|(a, b)| (a - b) * (a - b))
                .sum()
        };
        let (mut lo, mut hi) = (0.05f64, self.size as f64);
        let phi = (5f64.sqrt() - 1.0) / 2.0;
        let mut a = hi - phi * (hi - lo);
        let mut b = lo + phi * (hi - lo);
        let (mut fa, mut fb) = (loss(a), loss(b));
        for _ in 0..100 {
            if fa < fb {
                hi = b;
                b = a;
                fb = fa;
                a = hi - phi * (hi - lo);
                fa = loss(a);
            } else {
                lo = a;
                a = b;
                fa = fb;
                b = lo + phi * (hi - lo);
                fb = loss(b);
            }
        }
        0.5 * (lo + hi)
    }
}

/// Ordered frames sharing one size.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    frames: Vec<Image>,
    pub frame_rate_hint: Option<f64>,
}

impl Clip {
    /// Validates dims and clamps values into `[0, 1]`.
    pub fn new(frames: Vec<Image>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::invalid("a clip needs at least one frame"))?;
        let (c, h, w) = first.dims3()?;
        if c != 3 {
            return Err(Error::invalid(format!("frames must have 3 channels, got {c}")));
        }
        let mut out = Vec::with_capacity(frames.len());
        for f in frames {
            if f.dims3()? != (3, h, w) {
                return Err(Error::invalid(format!(
                    "frame shape {:?} differs from {:?}",
                    f.shape(),
                    [3, h, w]
                )));
            }
            out.push(f.map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }));
        }
        Ok(Self {
            frames: out,
            frame_rate_hint: None,
        })
    }

    pub fn frames(&self) -> &[Image] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `(H, W)`.
    pub fn dims(&self) -> (usize, usize) {
        let s = self.frames[0].shape();
        (s[1], s[2])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DegradationSpec {
    pub kernel: BlurKernel,
    pub scale: usize,
    pub boundary: Boundary,
}

impl DegradationSpec {
    pub fn new(kernel: BlurKernel, scale: usize) -> Result<Self> {
        if scale == 0 {
            return Err(Error::invalid("scale must be at least 1"));
        }
        Ok(Self {
            kernel,
            scale,
            boundary: Boundary::Reflect,
        })
    }
}

/// Correlate every channel of `frame` with `kernel`.
pub fn blur_frame(frame: &Image, kernel: &BlurKernel, boundary: Boundary) -> Result<Image> {
    let (c, h, w) = frame.dims3()?;
    let x = frame.clone().reshape(&[1, c, h, w])?;
    blur::blur(&x, &kernel.to_tensor(), boundary)?.reshape(&[c, h, w])
}

/// Bicubic resize by the rational factor `num / den`; the resulting dims
/// must be whole numbers. Antialiased when shrinking.
pub fn bicubic_resize(frame: &Image, num: usize, den: usize) -> Result<Image> {
    let (_, h, w) = frame.dims3()?;
    if num == 0 || den == 0 {
        return Err(Error::invalid("scale factors must be positive"));
    }
    if (h * num) % den != 0 || (w * num) % den != 0 {
        return Err(Error::invalid(format!(
            "{h}x{w} scaled by {num}/{den} is not a whole size"
        )));
    }
    let (oh, ow) = (h * num / den, w * num / den);
    if oh == 0 || ow == 0 {
        return Err(Error::invalid("target size must be positive"));
    }
    Resampler::new(Filter::Bicubic, (h, w), (oh, ow), true)?.apply(frame)
}

/// Integer-factor bicubic upsampling, the same filter the network skip
/// path uses.
pub fn bicubic_upscale(frame: &Image, scale: usize) -> Result<Image> {
    let (_, h, w) = frame.dims3()?;
    Resampler::upscale(Filter::Bicubic, (h, w), scale)?.apply(frame)
}

/// Blur then bicubic-downsample one frame.
pub fn degrade_frame(frame: &Image, spec: &DegradationSpec) -> Result<Image> {
    let (_, h, w) = frame.dims3()?;
    if h % spec.scale != 0 || w % spec.scale != 0 {
        return Err(Error::invalid(format!(
            "{h}x{w} not divisible by scale {}",
            spec.scale
        )));
    }
    let blurred = blur_frame(frame, &spec.kernel, spec.boundary)?;
    bicubic_resize(&blurred, 1, spec.scale)
}

/// Apply the degradation to every frame of a clip.
pub fn degrade_clip(gt: &Clip, spec: &DegradationSpec) -> Result<Clip> {
    let frames = gt
        .frames()
        .iter()
        .map(|f| degrade_frame(f, spec))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Clip::new(frames)?;
    out.frame_rate_hint = gt.frame_rate_hint;
    Ok(out)
}

/// Element `d` of the dihedral group: `d % 4` quarter turns
/// counter-clockwise, then a horizontal flip when `d >= 4`.
pub fn dihedral(img: &Image, d: usize) -> Result<Image> {
    let (c, h, w) = img.dims3()?;
    let turns = d % 4;
    let flip = d % 8 >= 4;
    let (oh, ow) = if turns % 2 == 1 { (w, h) } else { (h, w) };
    let mut out = Tensor::zeros(&[c, oh, ow]);
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let xx = if flip { ow - 1 - x } else { x };
                // Source pixel of a CCW rotation applied `turns` times.
                let (sy, sx) = match turns {
                    0 => (y, xx),
                    1 => (xx, w - 1 - y),
                    2 => (h - 1 - y, w - 1 - xx),
                    _ => (h - 1 - xx, y),
                };
                out.data_mut()[(ch * oh + y) * ow + x] = img.at3(ch, sy, sx);
            }
        }
    }
    Ok(out)
}

/// Crop `[3, size, size]` at `(top, left)`.
pub fn crop(img: &Image, top: usize, left: usize, size_h: usize, size_w: usize) -> Result<Image> {
    let (c, h, w) = img.dims3()?;
    if top + size_h > h || left + size_w > w {
        return Err(Error::invalid(format!(
            "crop {size_h}x{size_w} at ({top}, {left}) exceeds {h}x{w}"
        )));
    }
    Ok(Tensor::from_fn(&[c, size_h, size_w], |i| {
        let ch = i / (size_h * size_w);
        let y = (i / size_w) % size_h;
        let x = i % size_w;
        img.at3(ch, top + y, left + x)
    }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchOptions {
    pub batch_size: usize,
    pub lr_patch: usize,
    pub scale: usize,
    /// `2N + 1`.
    pub frames: usize,
    pub kernel_size: usize,
    pub sigma_range: (f64, f64),
    pub augment: bool,
}

/// LR clip patches with their GT mid-frame patches and kernels.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingBatch {
    /// `[B, F, 3, p, p]`.
    pub lr: Tensor<f64>,
    /// `[B, 3, p*s, p*s]`.
    pub gt: Tensor<f64>,
    /// `[B, k, k]`.
    pub kernels: Tensor<f64>,
    pub sigmas: Vec<f64>,
}

/// Per-`(seed, index)` generator so data loading can be partitioned.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Uniform blur width on the `(seed, index)` stream; `lo` when the range
/// is empty.
pub fn draw_sigma(lo: f64, hi: f64, seed: u64, index: u64) -> f64 {
    if hi <= lo {
        return lo;
    }
    sample_rng(seed, index).gen_range(lo..=hi)
}

/// Draw batch number `index`. Each sample picks a clip, a window of
/// `frames` consecutive frames, one Gaussian kernel for the whole window,
/// an `s`-aligned GT crop and a dihedral transform shared by all frames;
/// the LR frames are the degraded GT crops.
pub fn sample_training_batch(
    dataset: &[Clip],
    opts: &BatchOptions,
    seed: u64,
    index: u64,
) -> Result<TrainingBatch> {
    if dataset.is_empty() {
        return Err(Error::invalid("dataset is empty"));
    }
    if opts.batch_size == 0 || opts.lr_patch == 0 || opts.scale == 0 {
        return Err(Error::invalid("batch size, patch and scale must be positive"));
    }
    if opts.frames % 2 == 0 {
        return Err(Error::invalid("frame window must be odd"));
    }
    let hr = opts.lr_patch * opts.scale;
    for clip in dataset {
        let (h, w) = clip.dims();
        if hr > h || hr > w {
            return Err(Error::invalid(format!(
                "patch {hr}x{hr} larger than frame {h}x{w}"
            )));
        }
        if clip.len() < opts.frames {
            return Err(Error::invalid(format!(
                "clip of {} frames shorter than window {}",
                clip.len(),
                opts.frames
            )));
        }
    }
    let mut rng = sample_rng(seed, index);
    let p = opts.lr_patch;
    let mut lr = Vec::with_capacity(opts.batch_size * opts.frames * 3 * p * p);
    let mut gt = Vec::with_capacity(opts.batch_size * 3 * hr * hr);
    let mut kernels = Vec::new();
    let mut sigmas = Vec::new();
    for _ in 0..opts.batch_size {
        let clip = &dataset[rng.gen_range(0..dataset.len())];
        let (lo, hi) = opts.sigma_range;
        let sigma = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let kernel = BlurKernel::gaussian(opts.kernel_size, sigma)?;
        let start = rng.gen_range(0..=clip.len() - opts.frames);
        let (h, w) = clip.dims();
        let top = rng.gen_range(0..=(h - hr) / opts.scale) * opts.scale;
        let left = rng.gen_range(0..=(w - hr) / opts.scale) * opts.scale;
        let d = if opts.augment { rng.gen_range(0..8) } else { 0 };
        let spec = DegradationSpec::new(kernel.clone(), opts.scale)?;
        for f in 0..opts.frames {
            let patch = crop(&clip.frames()[start + f], top, left, hr, hr)?;
            let patch = dihedral(&patch, d)?;
            let low = degrade_frame(&patch, &spec)?;
            lr.extend_from_slice(low.data());
            if f == opts.frames / 2 {
                gt.extend_from_slice(patch.data());
            }
        }
        kernels.extend_from_slice(kernel.values());
        sigmas.push(sigma);
    }
    let k = opts.kernel_size;
    Ok(TrainingBatch {
        lr: Tensor::from_vec(&[opts.batch_size, opts.frames, 3, p, p], lr)?,
        gt: Tensor::from_vec(&[opts.batch_size, 3, hr, hr], gt)?,
        kernels: Tensor::from_vec(&[opts.batch_size, k, k], kernels)?,
        sigmas,
    })
}
