//! The assembled network: kernel estimation, sharp-feature guide, two-stage
//! temporal compensation, transformation stack and reconstruction.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{extract_lr_features, FeatureExtractor, MsdAlign};
use crate::degradation::{BlurKernel, Clip, Image};
use crate::error::{Error, Result};
use crate::flow::{estimate_flows, FlowProvider};
use crate::fusion::{attention_source_mass, DaFusion};
use crate::graph::{Graph, Var};
use crate::kernel_estimation::{fft_deconvolve_padded, KernelEstimator, SharpFeatureNet, DECONV_PAD};
use crate::nn::{ParamBuilder, ParamStore};
use crate::tensor::{Real, Tensor};
use crate::transform::{transform_stack, ReconstructionHead, SkipFilter, TransformBlock};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub scale: usize,
    pub frames: usize,
    pub channels: usize,
    pub blocks: usize,
    pub heads: usize,
    pub levels: usize,
    pub kernel_size: usize,
    pub estimator_channels: usize,
    pub max_offset: f64,
    pub se_reduction: usize,
    pub skip: SkipFilter,
    pub channel_on_hidden: bool,
    /// Ablation: both compensation stages sample at zero offset.
    pub zero_offsets: bool,
    pub deconv_eps: f64,
}

impl ModelConfig {
    pub fn full() -> Self {
        Self {
            scale: 4,
            frames: 5,
            channels: 128,
            blocks: 20,
            heads: 4,
            levels: 3,
            kernel_size: 13,
            estimator_channels: 64,
            max_offset: 10.0,
            se_reduction: 16,
            skip: SkipFilter::Bicubic,
            channel_on_hidden: false,
            zero_offsets: false,
            deconv_eps: 1e-3,
        }
    }

    pub fn toy() -> Self {
        Self {
            channels: 16,
            blocks: 2,
            heads: 2,
            estimator_channels: 16,
            se_reduction: 4,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::config(format!("model.{key}"), msg));
        if self.scale == 0 {
            return bad("scale", "must be positive");
        }
        if self.frames != 5 {
            return bad("frames", "the three-window alignment needs exactly 5 frames");
        }
        if self.channels == 0 {
            return bad("channels", "must be positive");
        }
        if self.blocks == 0 {
            return bad("blocks", "must be positive");
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return bad("heads", "must divide channels");
        }
        if self.levels == 0 || self.levels > 3 {
            return bad("levels", "must be 1, 2 or 3");
        }
        if self.kernel_size % 2 == 0 {
            return bad("kernel_size", "must be odd");
        }
        if self.estimator_channels == 0 || self.se_reduction == 0 {
            return bad("estimator_channels", "must be positive");
        }
        if !(self.max_offset > 0.0) {
            return bad("max_offset", "must be positive");
        }
        if !(self.deconv_eps > 0.0) {
            return bad("deconv_eps", "must be positive");
        }
        Ok(())
    }

    /// LR frames must be divisible by this for the feature pyramids.
    pub fn spatial_multiple(&self) -> usize {
        4.max(1 << (self.levels - 1))
    }
}

#[derive(Clone, Debug)]
pub struct Bsvsr {
    pub config: ModelConfig,
    pub extractor: FeatureExtractor,
    pub estimator: KernelEstimator,
    pub sharp: SharpFeatureNet,
    pub msd: MsdAlign,
    pub da: DaFusion,
    pub transform: Vec<TransformBlock>,
    pub recon: ReconstructionHead,
}

/// Nodes of interest from one forward pass.
pub struct Forward {
    pub sr: Var,
    pub kernel: Var,
    pub lr_mid: Var,
    pub attention: Var,
    pub offsets: Var,
}

/// One batch of network input: `lr [B, 5, 3, h, w]` and the two flows
/// `(mid -> prev, mid -> next)` each `[B, 2, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput<T> {
    pub lr: Tensor<T>,
    pub flows: [Tensor<T>; 2],
}

impl Bsvsr {
    /// Build the architecture and register freshly initialised parameters.
    pub fn new<T: Real>(config: ModelConfig, store: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pb = ParamBuilder::new(store, &mut rng);
        let c = config.channels;
        Ok(Self {
            extractor: FeatureExtractor::new(&mut pb.pp("extractor"), c)?,
            estimator: KernelEstimator::new(
                &mut pb.pp("estimator"),
                config.estimator_channels,
                config.kernel_size,
            )?,
            sharp: SharpFeatureNet::new(&mut pb.pp("sharp"), c)?,
            msd: MsdAlign::new(&mut pb.pp("msd"), c, config.max_offset, config.zero_offsets)?,
            da: DaFusion::new(
                &mut pb.pp("da"),
                c,
                config.heads,
                config.levels,
                config.max_offset,
                config.zero_offsets,
            )?,
            transform: (0..config.blocks)
                .map(|i| {
                    TransformBlock::new(
                        &mut pb.pp(&format!("transform.{i}")),
                        c,
                        config.se_reduction,
                        config.channel_on_hidden,
                    )
                })
                .collect::<Result<_>>()?,
            recon: ReconstructionHead::new(&mut pb.pp("recon"), c, config.scale, config.skip)?,
            config,
        })
    }

    /// Architecture plus a fresh parameter store.
    pub fn init<T: Real>(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let model = Self::new(config, &mut store, seed)?;
        Ok((model, store))
    }

    fn check_input<T: Real>(&self, input: &ModelInput<T>) -> Result<(usize, usize, usize)> {
        let s = input.lr.shape();
        if s.len() != 5 || s[1] != self.config.frames || s[2] != 3 {
            return Err(Error::shape(format!(
                "input must be [B, {}, 3, h, w], got {s:?}",
                self.config.frames
            )));
        }
        let (b, h, w) = (s[0], s[3], s[4]);
        let m = self.config.spatial_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::invalid(format!("LR size {h}x{w} not divisible by {m}")));
        }
        for f in &input.flows {
            if f.shape() != [b, 2, h, w] {
                return Err(Error::shape(format!(
                    "flow must be [{b}, 2, {h}, {w}], got {:?}",
                    f.shape()
                )));
            }
        }
        Ok((b, h, w))
    }

    /// Mid-frame `[B, 3, h, w]` of a `[B, F, 3, h, w]` stack.
    pub fn mid_frame<T: Real>(&self, lr: &Tensor<T>) -> Result<Tensor<T>> {
        frame_slice(lr, self.config.frames / 2)
    }

    /// Kernel estimate `[B, k, k]` for the mid-frames `[B, 3, h, w]`.
    pub fn estimate<T: Real>(&self, g: &mut Graph<'_, T>, lr_mid: Var) -> Result<Var> {
        self.estimator.forward(g, lr_mid)
    }

    /// Latent sharp mid-frames from the (detached) kernel estimates.
    pub fn deconvolve<T: Real>(&self, lr_mid: &Tensor<T>, kernels: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, c, h, w) = lr_mid.dims4()?;
        let k = self.config.kernel_size;
        let mut out = Vec::with_capacity(b * c * h * w);
        for s in 0..b {
            let img: Image = lr_mid.narrow0(s, 1)?.cast::<f64>().reshape(&[c, h, w])?;
            let kv = kernels.data()[s * k * k..(s + 1) * k * k]
                .iter()
                .map(|v| v.as_f64())
                .collect();
            let kernel = BlurKernel::from_values(k, kv)?;
            let sharp = fft_deconvolve_padded(&img, &kernel, self.config.deconv_eps, DECONV_PAD)?;
            out.extend(sharp.data().iter().map(|&v| T::lit(v)));
        }
        Tensor::from_vec(&[b, c, h, w], out)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, input: &ModelInput<T>) -> Result<Forward> {
        let (b, h, w) = self.check_input(input)?;
        let frames = self.config.frames;
        let mid = self.mid_frame(&input.lr)?;
        let lr_mid = g.constant(mid.clone());

        let kernel = self.estimate(g, lr_mid)?;
        let sharp = self.deconvolve(&mid, g.value(kernel))?;
        let sharp = g.constant(sharp);
        let f_s = self.sharp.forward(g, sharp)?;

        let frame_vars: Vec<Var> = (0..frames)
            .map(|f| frame_slice(&input.lr, f).map(|t| g.constant(t)))
            .collect::<Result<_>>()?;
        let feats = extract_lr_features(&self.extractor, g, &frame_vars, frames)?;
        let coarse = self.msd.forward(g, &feats)?;

        let flows = [
            g.constant(input.flows[0].clone()),
            g.constant(input.flows[1].clone()),
        ];
        let da = self.da.forward(g, coarse, flows)?;
        let h_n = transform_stack(&self.transform, g, da.fused, f_s)?;
        let sr = self.recon.forward(g, h_n, lr_mid)?;
        debug_assert_eq!(g.shape(sr), &[b, 3, h * self.config.scale, w * self.config.scale]);
        Ok(Forward {
            sr,
            kernel,
            lr_mid,
            attention: da.attention,
            offsets: da.offsets,
        })
    }
}

/// Frame `f` of a `[B, F, C, h, w]` stack as `[B, C, h, w]`.
pub fn frame_slice<T: Real>(lr: &Tensor<T>, f: usize) -> Result<Tensor<T>> {
    let s = lr.shape();
    if s.len() != 5 || f >= s[1] {
        return Err(Error::shape(format!("cannot take frame {f} of {s:?}")));
    }
    let (b, nf, plane) = (s[0], s[1], s[2] * s[3] * s[4]);
    let mut out = Vec::with_capacity(b * plane);
    for i in 0..b {
        let base = (i * nf + f) * plane;
        out.extend_from_slice(&lr.data()[base..base + plane]);
    }
    Tensor::from_vec(&[b, s[2], s[3], s[4]], out)
}

/// Flows for every sample of an LR stack, computed between the mid-frame
/// and its immediate neighbours.
pub fn prepare_input<T: Real>(lr: &Tensor<f64>, provider: &dyn FlowProvider) -> Result<ModelInput<T>> {
    let s = lr.shape();
    if s.len() != 5 || s[1] < 3 {
        return Err(Error::shape(format!("expected [B, F, 3, h, w], got {s:?}")));
    }
    let (b, nf, c, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    let mid = nf / 2;
    let frame = |i: usize, f: usize| -> Result<Image> {
        let plane = c * h * w;
        let base = (i * nf + f) * plane;
        Tensor::from_vec(&[c, h, w], lr.data()[base..base + plane].to_vec())
    };
    let mut prev = Vec::with_capacity(b * 2 * h * w);
    let mut next = Vec::with_capacity(b * 2 * h * w);
    for i in 0..b {
        let (p, m, n) = (frame(i, mid - 1)?, frame(i, mid)?, frame(i, mid + 1)?);
        let (fp, fnx) = estimate_flows(provider, [&p, &m, &n])?;
        prev.extend(fp.data().iter().map(|&v| T::lit(v)));
        next.extend(fnx.data().iter().map(|&v| T::lit(v)));
    }
    Ok(ModelInput {
        lr: lr.cast(),
        flows: [
            Tensor::from_vec(&[b, 2, h, w], prev)?,
            Tensor::from_vec(&[b, 2, h, w], next)?,
        ],
    })
}

/// Output of one window.
#[derive(Clone, Debug)]
pub struct Restoration {
    pub sr: Image,
    pub kernel: BlurKernel,
    /// Mean attention weight per source frame `(prev, centre, next)`.
    pub attention_mass: Vec<f64>,
}

/// Super-resolve the centre of a five-frame window, keeping the estimated
/// kernel and the attention statistics.
pub fn restore_window<T: Real>(
    model: &Bsvsr,
    params: &ParamStore<T>,
    window: &[&Image],
    provider: &dyn FlowProvider,
) -> Result<Restoration> {
    if window.len() != model.config.frames {
        return Err(Error::invalid(format!(
            "window must hold {} frames, got {}",
            model.config.frames,
            window.len()
        )));
    }
    let frames: Vec<Image> = window.iter().map(|&f| f.clone().unsqueeze0()).collect();
    let stack = Tensor::stack0(&frames)?.unsqueeze0();
    let input = prepare_input::<T>(&stack, provider)?;
    let mut g = Graph::new(params);
    let out = model.forward(&mut g, &input)?;
    let sr = g.value(out.sr);
    let (_, c, h, w) = sr.dims4()?;
    let img = sr.cast::<f64>().reshape(&[c, h, w])?.map(|v| v.clamp(0.0, 1.0));
    let k = model.config.kernel_size;
    let kernel = BlurKernel::from_values(k, g.value(out.kernel).data().iter().map(|v| v.as_f64()).collect())?;
    let mass = attention_source_mass(&model.da.layout, g.value(out.attention))?;
    Ok(Restoration {
        sr: img,
        kernel,
        attention_mass: mass.into_iter().next().unwrap_or_default(),
    })
}

/// Super-resolve the centre of a five-frame window.
pub fn super_resolve<T: Real>(
    model: &Bsvsr,
    params: &ParamStore<T>,
    window: &[&Image],
    provider: &dyn FlowProvider,
) -> Result<(Image, BlurKernel)> {
    restore_window(model, params, window, provider).map(|r| (r.sr, r.kernel))
}

/// Frame indices of the window centred on `t`, replicating clip edges.
pub fn window_indices(t: usize, len: usize, frames: usize) -> Vec<usize> {
    let r = (frames / 2) as isize;
    (-r..=r)
        .map(|d| (t as isize + d).clamp(0, len as isize - 1) as usize)
        .collect()
}

/// Super-resolve every frame of an LR clip.
pub fn infer_clip<T: Real>(
    model: &Bsvsr,
    params: &ParamStore<T>,
    clip: &Clip,
    provider: &dyn FlowProvider,
) -> Result<Vec<Image>> {
    (0..clip.len())
        .map(|t| {
            let idx = window_indices(t, clip.len(), model.config.frames);
            let win: Vec<&Image> = idx.iter().map(|&i| &clip.frames()[i]).collect();
            super_resolve(model, params, &win, provider).map(|(img, _)| img)
        })
        .collect()
}

/// Total scalar parameter count.
pub fn count_params<T: Real>(params: &ParamStore<T>) -> usize {
    params.numel()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::ZeroFlow;

    #[test]
    fn window_replicates_edges() {
        assert_eq!(window_indices(0, 5, 5), vec![0, 0, 0, 1, 2]);
        assert_eq!(window_indices(4, 5, 5), vec![2, 3, 4, 4, 4]);
        assert_eq!(window_indices(2, 5, 5), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn config_validation_names_key() {
        let mut c = ModelConfig::toy();
        c.heads = 3;
        match c.validate() {
            Err(Error::Config { key, .. }) => assert_eq!(key, "model.heads"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn toy_forward_shapes() {
        let (model, store) = Bsvsr::init::<f32>(ModelConfig::toy(), 0).unwrap();
        let lr = Tensor::from_fn(&[1, 5, 3, 16, 16], |i| ((i * 37) % 101) as f64 / 101.0);
        let input = prepare_input::<f32>(&lr, &ZeroFlow).unwrap();
        let mut g = Graph::new(&store);
        let out = model.forward(&mut g, &input).unwrap();
        assert_eq!(g.shape(out.sr), &[1, 3, 64, 64]);
        assert_eq!(g.shape(out.kernel), &[1, 13, 13]);
        assert!(g.value(out.sr).all_finite());
    }

    #[test]
    fn infer_clip_emits_one_frame_per_input() {
        let (model, store) = Bsvsr::init::<f32>(ModelConfig::toy(), 0).unwrap();
        let frames: Vec<Image> = (0..5)
            .map(|t| Tensor::from_fn(&[3, 16, 16], |i| ((i * 13 + t * 7) % 29) as f64 / 29.0))
            .collect();
        let clip = Clip::new(frames).unwrap();
        let out = infer_clip(&model, &store, &clip, &ZeroFlow).unwrap();
        assert_eq!(out.len(), 5);
        assert!(out.iter().all(|f| f.shape() == [3, 64, 64]));
        let win: Vec<&Image> = clip.frames().iter().collect();
        let r = restore_window(&model, &store, &win, &ZeroFlow).unwrap();
        assert_eq!(r.attention_mass.len(), 3);
        assert!((r.attention_mass.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        assert!(restore_window(&model, &store, &win[..4], &ZeroFlow).is_err());
    }
}
