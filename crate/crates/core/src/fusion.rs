//! Fine compensation: flow-seeded multi-level deformable attention that
//! fuses the three coarse features into the mid-feature.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Conv2d, ConvInit, ParamBuilder};
use crate::ops::attention::AttnLayout;
use crate::ops::resample::{Filter, Resampler};
use crate::tensor::{Real, Tensor};

/// Number of coarse features attended to.
pub const SOURCES: usize = 3;

#[derive(Clone, Debug)]
pub struct DaFusion {
    pub value_conv: Conv2d,
    pub attn_head: Conv2d,
    pub offset_head: Conv2d,
    pub project: Conv2d,
    pub layout: AttnLayout,
    pub max_offset: f64,
    pub zero_offsets: bool,
}

/// Intermediates of one fusion pass, exposed for inspection.
pub struct DaOutput {
    pub fused: Var,
    pub attention: Var,
    pub offsets: Var,
}

impl DaFusion {
    pub fn new<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        channels: usize,
        heads: usize,
        levels: usize,
        max_offset: f64,
        zero_offsets: bool,
    ) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(Error::invalid(format!(
                "{channels} channels cannot be split across {heads} heads"
            )));
        }
        let layout = AttnLayout {
            heads,
            levels,
            sources: SOURCES,
            grid: 3,
            channels,
        };
        let a = layout.weights();
        Ok(Self {
            value_conv: Conv2d::new(
                &mut pb.pp("value"),
                SOURCES * channels,
                SOURCES * channels,
                3,
                ConvInit::Default,
            )?,
            attn_head: Conv2d::new(&mut pb.pp("attn"), 2 * channels, a, 3, ConvInit::Default)?,
            offset_head: Conv2d::new(&mut pb.pp("offset"), 2 * channels, 2 * a, 3, ConvInit::Zero)?,
            project: Conv2d::new(&mut pb.pp("project"), channels, channels, 1, ConvInit::Default)?,
            layout,
            max_offset,
            zero_offsets,
        })
    }

    /// Value planes per level: the conv over `[prev, mid, next]` at full
    /// resolution, then successive 2x2 averages.
    pub fn build_value_tokens<T: Real>(&self, g: &mut Graph<'_, T>, coarse: [Var; 3]) -> Result<Vec<Var>> {
        let cat = g.concat_channels(&coarse)?;
        let v0 = self.value_conv.forward(g, cat)?;
        let mut levels = vec![v0];
        for _ in 1..self.layout.levels {
            let prev = *levels.last().expect("non-empty");
            let (_, _, h, w) = g.value(prev).dims4()?;
            let down = Resampler::downscale(Filter::Bilinear, (h, w), 2, false)?;
            levels.push(g.resample(prev, &down)?);
        }
        Ok(levels)
    }

    /// Softmax-normalised attention and flow-seeded offsets from the
    /// warped neighbours. `flows` are `(mid -> prev, mid -> next)`.
    pub fn build_attention_and_offsets<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        warped: [Var; 2],
        flows: [Var; 2],
    ) -> Result<(Var, Var)> {
        let (n, _, h, w) = g.value(warped[0]).dims4()?;
        for f in flows {
            if g.shape(f) != [n, 2, h, w] {
                return Err(Error::invalid(format!(
                    "flow must be [{n}, 2, {h}, {w}], got {:?}",
                    g.shape(f)
                )));
            }
        }
        let cat = g.concat_channels(&warped)?;
        let logits = self.attn_head.forward(g, cat)?;
        let attention = g.softmax_groups(logits, self.layout.group())?;
        if self.zero_offsets {
            let a = self.layout.weights();
            let zeros = g.constant(Tensor::zeros(&[n, 2 * a, h, w]));
            return Ok((attention, zeros));
        }
        let raw = self.offset_head.forward(g, cat)?;
        let base = flow_seed(&self.layout, g.value(flows[0]), g.value(flows[1]))?;
        let base = g.constant(base);
        let off = g.add(raw, base)?;
        Ok((attention, g.clamp(off, -self.max_offset, self.max_offset)))
    }

    pub fn deformable_attention<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        values: &[Var],
        attention: Var,
        offsets: Var,
    ) -> Result<Var> {
        let sampled = g.deform_attn(self.layout, values, attention, offsets)?;
        self.project.forward(g, sampled)
    }

    /// Full fine-compensation pass. `flows` are `[B, 2, H, W]` constants.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        coarse: [Var; 3],
        flows: [Var; 2],
    ) -> Result<DaOutput> {
        let (_, c, h, w) = g.value(coarse[1]).dims4()?;
        if c != self.layout.channels {
            return Err(Error::shape(format!(
                "expected {} channels, got {c}",
                self.layout.channels
            )));
        }
        let div = 1 << (self.layout.levels - 1);
        if h % div != 0 || w % div != 0 {
            return Err(Error::invalid(format!(
                "{h}x{w} not divisible by {div} for {} attention levels",
                self.layout.levels
            )));
        }
        let values = self.build_value_tokens(g, coarse)?;
        let wp = g.warp(coarse[0], flows[0])?;
        let wn = g.warp(coarse[2], flows[1])?;
        let (attention, offsets) = self.build_attention_and_offsets(g, [wp, wn], flows)?;
        let fused = self.deformable_attention(g, &values, attention, offsets)?;
        Ok(DaOutput {
            fused,
            attention,
            offsets,
        })
    }
}

/// Offset base `[N, 2A, H, W]`: the `mid -> prev` flow on every sample of
/// source 0, the `mid -> next` flow on source 2, zero on source 1.
pub fn flow_seed<T: Real>(lay: &AttnLayout, prev: &Tensor<T>, next: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, two, h, w) = prev.dims4()?;
    if two != 2 || next.shape() != prev.shape() {
        return Err(Error::shape("flows must both be [N, 2, H, W]"));
    }
    let hw = h * w;
    let a = lay.weights();
    let mut out = Tensor::zeros(&[n, 2 * a, h, w]);
    for s in 0..n {
        for m in 0..lay.heads {
            for l in 0..lay.levels {
                for (t, flow) in [(0, prev), (2, next)] {
                    for k in 0..lay.points() {
                        let idx = lay.index(m, l, t, k);
                        for comp in 0..2 {
                            let src = &flow.data()[(s * 2 + comp) * hw..(s * 2 + comp + 1) * hw];
                            let dst = (s * 2 * a + 2 * idx + comp) * hw;
                            out.data_mut()[dst..dst + hw].copy_from_slice(src);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Flatten level-0 values `[T*C, H, W]` to token rows `[T*H*W, C]`:
/// source `t-1` first, then `t`, then `t+1`, pixels row-major.
pub fn tokens_to_rows<T: Real>(values: &Tensor<T>, channels: usize) -> Result<Tensor<T>> {
    let (tc, h, w) = values.dims3()?;
    if channels == 0 || tc % channels != 0 {
        return Err(Error::shape(format!("{tc} channels not a multiple of {channels}")));
    }
    let t = tc / channels;
    let hw = h * w;
    Ok(Tensor::from_fn(&[t * hw, channels], |i| {
        let row = i / channels;
        let c = i % channels;
        let (src, p) = (row / hw, row % hw);
        values.data()[(src * channels + c) * hw + p]
    }))
}

/// Mean attention mass each source receives, per sample: `[N][T]`.
pub fn attention_source_mass<T: Real>(lay: &AttnLayout, attention: &Tensor<T>) -> Result<Vec<Vec<f64>>> {
    let (n, a, h, w) = attention.dims4()?;
    if a != lay.weights() {
        return Err(Error::shape("attention layout mismatch"));
    }
    let hw = h * w;
    let mut out = vec![vec![0.0; lay.sources]; n];
    for (s, row) in out.iter_mut().enumerate() {
        for m in 0..lay.heads {
            for l in 0..lay.levels {
                for (t, slot) in row.iter_mut().enumerate() {
                    for k in 0..lay.points() {
                        let idx = lay.index(m, l, t, k);
                        let plane = &attention.data()[(s * a + idx) * hw..(s * a + idx + 1) * hw];
                        *slot += plane.iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                }
            }
        }
        for slot in row.iter_mut() {
            *slot /= (hw * lay.heads) as f64;
        }
    }
    Ok(out)
}
