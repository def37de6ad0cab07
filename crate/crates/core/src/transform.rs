//! Blur-aware transformation blocks (pyramid spatial gating plus channel
//! gating) and the pixel-shuffle reconstruction head.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Conv2d, ConvInit, ParamBuilder};
use crate::ops::resample::{Filter, Resampler};
use crate::tensor::Real;

#[derive(Clone, Debug)]
pub struct TransformBlock {
    pub fuse: Conv2d,
    pub compress: Conv2d,
    pub expand: Conv2d,
    /// Gate the hidden state instead of the sharp feature in the channel branch.
    pub channel_on_hidden: bool,
}

impl TransformBlock {
    pub fn new<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        channels: usize,
        se_reduction: usize,
        channel_on_hidden: bool,
    ) -> Result<Self> {
        let hidden = (channels / se_reduction.max(1)).max(1);
        Ok(Self {
            fuse: Conv2d::new(&mut pb.pp("fuse"), 2 * channels, channels, 3, ConvInit::Default)?,
            compress: Conv2d::new(&mut pb.pp("compress"), channels, hidden, 1, ConvInit::Default)?,
            expand: Conv2d::new(&mut pb.pp("expand"), hidden, channels, 1, ConvInit::Default)?,
            channel_on_hidden,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, h_prev: Var, f_s: Var) -> Result<Var> {
        let st = pst_branch(self, g, h_prev, f_s)?;
        let src = if self.channel_on_hidden { h_prev } else { f_s };
        let ct = channel_branch(self, g, src)?;
        g.add(st, ct)
    }
}

/// `L1 = conv([h, f_s])`, `L2 = down(L1)`, `L3 = down(L2)`,
/// `att = up(up(sigmoid(L3) * L3) + L2)`, result `att * L1 + L1`.
/// `down` is bilinear halving (a 2x2 mean), `up` bilinear doubling.
pub fn pst_branch<T: Real>(
    block: &TransformBlock,
    g: &mut Graph<'_, T>,
    h_prev: Var,
    f_s: Var,
) -> Result<Var> {
    if g.shape(h_prev) != g.shape(f_s) {
        return Err(Error::invalid(format!(
            "hidden {:?} and guide {:?} differ",
            g.shape(h_prev),
            g.shape(f_s)
        )));
    }
    let (_, _, h, w) = g.value(f_s).dims4()?;
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::invalid(format!("{h}x{w} not divisible by 4")));
    }
    let cat = g.concat_channels(&[h_prev, f_s])?;
    let l1 = block.fuse.forward(g, cat)?;
    let down1 = Resampler::downscale(Filter::Bilinear, (h, w), 2, false)?;
    let down2 = Resampler::downscale(Filter::Bilinear, (h / 2, w / 2), 2, false)?;
    let up2 = Resampler::upscale(Filter::Bilinear, (h / 4, w / 4), 2)?;
    let up1 = Resampler::upscale(Filter::Bilinear, (h / 2, w / 2), 2)?;
    let l2 = g.resample(l1, &down1)?;
    let l3 = g.resample(l2, &down2)?;
    let gate = g.sigmoid(l3);
    let s3 = g.mul(gate, l3)?;
    let u = g.resample(s3, &up2)?;
    let u = g.add(u, l2)?;
    let att = g.resample(u, &up1)?;
    let gated = g.mul(att, l1)?;
    g.add(gated, l1)
}

/// Squeeze-and-excitation gate of `x` applied to `x`.
pub fn channel_branch<T: Real>(block: &TransformBlock, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
    let att = channel_attention(block, g, x)?;
    g.mul_channel(x, att)
}

/// `sigmoid(expand(relu(compress(avgpool(x)))))`, shape `[N, C, 1, 1]`.
pub fn channel_attention<T: Real>(block: &TransformBlock, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
    let pooled = g.global_avg_pool(x)?;
    let z = block.compress.forward(g, pooled)?;
    let z = g.relu(z);
    let z = block.expand.forward(g, z)?;
    Ok(g.sigmoid(z))
}

/// `H_0 = f_bar`, `H_k = block_k(H_{k-1}, f_s)`.
pub fn transform_stack<T: Real>(
    blocks: &[TransformBlock],
    g: &mut Graph<'_, T>,
    f_bar: Var,
    f_s: Var,
) -> Result<Var> {
    if blocks.is_empty() {
        return Err(Error::invalid("transformation stack needs at least one block"));
    }
    let mut h = f_bar;
    for b in blocks {
        h = b.forward(g, h, f_s)?;
    }
    Ok(h)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SkipFilter {
    #[default]
    Bicubic,
    Bilinear,
}

impl SkipFilter {
    pub fn filter(self) -> Filter {
        match self {
            SkipFilter::Bicubic => Filter::Bicubic,
            SkipFilter::Bilinear => Filter::Bilinear,
        }
    }
}

impl std::str::FromStr for SkipFilter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bicubic" => Ok(SkipFilter::Bicubic),
            "bilinear" => Ok(SkipFilter::Bilinear),
            other => Err(Error::invalid(format!("unknown skip filter `{other}`"))),
        }
    }
}

/// `conv(C -> 3 s^2)`, pixel shuffle, plus the upsampled LR mid-frame.
#[derive(Clone, Debug)]
pub struct ReconstructionHead {
    pub conv: Conv2d,
    pub scale: usize,
    pub skip: SkipFilter,
}

impl ReconstructionHead {
    pub fn new<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        channels: usize,
        scale: usize,
        skip: SkipFilter,
    ) -> Result<Self> {
        if scale == 0 {
            return Err(Error::invalid("scale must be at least 1"));
        }
        Ok(Self {
            conv: Conv2d::new(&mut pb.pp("conv"), channels, 3 * scale * scale, 3, ConvInit::Default)?,
            scale,
            skip,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, h_n: Var, lr_mid: Var) -> Result<Var> {
        let (_, _, h, w) = g.value(lr_mid).dims4()?;
        let y = self.conv.forward(g, h_n)?;
        let y = g.pixel_shuffle(y, self.scale)?;
        let up = Resampler::upscale(self.skip.filter(), (h, w), self.scale)?;
        let skip = g.resample(lr_mid, &up)?;
        g.add(y, skip)
    }
}
