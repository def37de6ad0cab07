//! LR feature extraction and coarse alignment with multi-scale deformable
//! convolution over three sliding windows.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Conv2d, ConvInit, Init, ParamBuilder, ParamId, ResBlock};
use crate::ops::sampling;
use crate::tensor::{Real, Tensor};

/// Sampling points of a 3x3 deformable kernel.
pub const POINTS: usize = 9;

/// `conv(3->C)` then five residual blocks, shared across frames.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    pub conv_in: Conv2d,
    pub blocks: Vec<ResBlock>,
}

impl FeatureExtractor {
    pub const BLOCKS: usize = 5;

    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, channels: usize) -> Result<Self> {
        Ok(Self {
            conv_in: Conv2d::new(&mut pb.pp("conv_in"), 3, channels, 3, ConvInit::Default)?,
            blocks: (0..Self::BLOCKS)
                .map(|i| ResBlock::new(&mut pb.pp(&format!("res{i}")), channels))
                .collect::<Result<_>>()?,
        })
    }

    /// `[N, 3, H, W] -> [N, C, H, W]`; frames may be stacked along `N`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let mut x = self.conv_in.forward(g, x)?;
        for b in &self.blocks {
            x = b.forward(g, x)?;
        }
        Ok(x)
    }
}

/// Extract one feature per frame of a window; `frames` are `[B, 3, H, W]`.
pub fn extract_lr_features<T: Real>(
    ext: &FeatureExtractor,
    g: &mut Graph<'_, T>,
    frames: &[Var],
    expected: usize,
) -> Result<Vec<Var>> {
    if frames.len() != expected {
        return Err(Error::invalid(format!(
            "expected {expected} frames, got {}",
            frames.len()
        )));
    }
    let b = g.shape(frames[0])[0];
    let stacked = g.concat_batch(frames)?;
    let feats = ext.forward(g, stacked)?;
    (0..frames.len())
        .map(|f| g.slice_batch(feats, f * b, b))
        .collect()
}

/// Parallel 3x3 and 5x5 branches, concatenated, projected back with a
/// 1x1 conv and added to the input.
#[derive(Clone, Debug)]
pub struct Msrb {
    pub branch3: Conv2d,
    pub branch5: Conv2d,
    pub project: Conv2d,
}

impl Msrb {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, channels: usize) -> Result<Self> {
        Ok(Self {
            branch3: Conv2d::new(&mut pb.pp("branch3"), channels, channels, 3, ConvInit::Default)?,
            branch5: Conv2d::new(&mut pb.pp("branch5"), channels, channels, 5, ConvInit::Default)?,
            project: Conv2d::new(&mut pb.pp("project"), 2 * channels, channels, 1, ConvInit::Default)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let a = self.branch3.forward(g, x)?;
        let a = g.relu(a);
        let b = self.branch5.forward(g, x)?;
        let b = g.relu(b);
        let cat = g.concat_channels(&[a, b])?;
        let y = self.project.forward(g, cat)?;
        g.add(x, y)
    }
}

/// Offsets for aligning a neighbour to a reference, from `[ref, nbr]`.
#[derive(Clone, Debug)]
pub struct OffsetPredictor {
    pub conv_in: Conv2d,
    pub blocks: Vec<Msrb>,
    pub head: Conv2d,
    pub max_offset: f64,
}

impl OffsetPredictor {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, channels: usize, max_offset: f64) -> Result<Self> {
        Ok(Self {
            conv_in: Conv2d::new(&mut pb.pp("conv_in"), 2 * channels, channels, 3, ConvInit::Default)?,
            blocks: (0..2)
                .map(|i| Msrb::new(&mut pb.pp(&format!("msrb{i}")), channels))
                .collect::<Result<_>>()?,
            head: Conv2d::new(&mut pb.pp("head"), channels, 2 * POINTS, 3, ConvInit::Zero)?,
            max_offset,
        })
    }

    /// `[N, 18, H, W]` offsets, clamped to `max_offset`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, f_ref: Var, f_nbr: Var) -> Result<Var> {
        if g.shape(f_ref) != g.shape(f_nbr) {
            return Err(Error::invalid(format!(
                "feature shapes differ: {:?} vs {:?}",
                g.shape(f_ref),
                g.shape(f_nbr)
            )));
        }
        let x = g.concat_channels(&[f_ref, f_nbr])?;
        let x = self.conv_in.forward(g, x)?;
        let mut x = g.relu(x);
        for b in &self.blocks {
            x = b.forward(g, x)?;
        }
        let off = self.head.forward(g, x)?;
        Ok(g.clamp(off, -self.max_offset, self.max_offset))
    }
}

/// 3x3 deformable convolution `C -> C`.
#[derive(Clone, Debug)]
pub struct DeformConv {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl DeformConv {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, channels: usize) -> Result<Self> {
        let bound = 1.0 / ((channels * POINTS) as f64).sqrt();
        Ok(Self {
            weight: pb.var("weight", &[channels, channels, 3, 3], Init::Uniform(bound))?,
            bias: pb.var("bias", &[channels], Init::Uniform(bound))?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, offsets: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.deform_conv(x, offsets, w, Some(b))
    }
}

/// `out(p0) = sum_k w_k * bilinear(feature, p0 + p_k + dp_k) + b`, with
/// zero contribution from samples outside the frame.
pub fn deformable_sample<T: Real>(
    feature: &Tensor<T>,
    offsets: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    sampling::deform_conv2d(feature, offsets, weight, bias)
}

/// 3x3 conv over the channel concatenation `[a, b, c]`.
pub fn fuse_window<T: Real>(
    fuse: &Conv2d,
    g: &mut Graph<'_, T>,
    a: Var,
    b: Var,
    c: Var,
) -> Result<Var> {
    if g.shape(a) != g.shape(b) || g.shape(a) != g.shape(c) {
        return Err(Error::invalid("window features differ in shape"));
    }
    let cat = g.concat_channels(&[a, b, c])?;
    fuse.forward(g, cat)
}

/// Role of a frame inside a window, relative to its centre.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Prev = 0,
    Centre = 1,
    Next = 2,
}

/// Offset predictors and deformable convs per role, shared by the three
/// windows, plus the window fusion conv.
#[derive(Clone, Debug)]
pub struct MsdAlign {
    pub predictors: Vec<OffsetPredictor>,
    pub deform: Vec<DeformConv>,
    pub fuse: Conv2d,
    pub zero_offsets: bool,
}

impl MsdAlign {
    pub fn new<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        channels: usize,
        max_offset: f64,
        zero_offsets: bool,
    ) -> Result<Self> {
        let names = ["prev", "centre", "next"];
        Ok(Self {
            predictors: names
                .iter()
                .map(|n| OffsetPredictor::new(&mut pb.pp(&format!("offsets_{n}")), channels, max_offset))
                .collect::<Result<_>>()?,
            deform: names
                .iter()
                .map(|n| DeformConv::new(&mut pb.pp(&format!("deform_{n}")), channels))
                .collect::<Result<_>>()?,
            fuse: Conv2d::new(&mut pb.pp("fuse"), 3 * channels, channels, 3, ConvInit::Default)?,
            zero_offsets,
        })
    }

    fn offsets<T: Real>(&self, g: &mut Graph<'_, T>, role: Role, f_ref: Var, f_nbr: Var) -> Result<Var> {
        if self.zero_offsets {
            let (n, _, h, w) = g.value(f_ref).dims4()?;
            return Ok(g.constant(Tensor::zeros(&[n, 2 * POINTS, h, w])));
        }
        self.predictors[role as usize].forward(g, f_ref, f_nbr)
    }

    /// Five features (`t-2 ..= t+2`) to the three coarse features centred
    /// on `t-1`, `t`, `t+1`. The windows are batched together.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, feats: &[Var]) -> Result<[Var; 3]> {
        if feats.len() != 5 {
            return Err(Error::invalid(format!(
                "alignment needs 5 features, got {}",
                feats.len()
            )));
        }
        let b = g.shape(feats[0])[0];
        let prev = g.concat_batch(&feats[0..3])?;
        let centre = g.concat_batch(&feats[1..4])?;
        let next = g.concat_batch(&feats[2..5])?;
        let mut aligned = Vec::with_capacity(3);
        for (role, nbr) in [(Role::Prev, prev), (Role::Centre, centre), (Role::Next, next)] {
            let off = self.offsets(g, role, centre, nbr)?;
            aligned.push(self.deform[role as usize].forward(g, nbr, off)?);
        }
        let fused = fuse_window(&self.fuse, g, aligned[0], aligned[1], aligned[2])?;
        Ok([
            g.slice_batch(fused, 0, b)?,
            g.slice_batch(fused, b, b)?,
            g.slice_batch(fused, 2 * b, b)?,
        ])
    }
}

/// Convenience wrapper matching the window semantics one call per set of
/// five features.
pub fn msd_compensate<T: Real>(msd: &MsdAlign, g: &mut Graph<'_, T>, feats: &[Var]) -> Result<[Var; 3]> {
    msd.forward(g, feats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn fresh_predictor_emits_zero_offsets() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = OffsetPredictor::new(&mut ParamBuilder::new(&mut store, &mut rng), 4, 10.0).unwrap();
        let mut g = Graph::new(&store);
        let a = g.constant(rand_tensor(&[1, 4, 6, 6], 1));
        let off = p.forward(&mut g, a, a).unwrap();
        assert_eq!(g.shape(off), &[1, 18, 6, 6]);
        assert!(g.value(off).data().iter().all(|&v| v == 0.0));
        let b = g.constant(rand_tensor(&[1, 4, 6, 5], 2));
        assert!(p.forward(&mut g, a, b).is_err());
    }

    #[test]
    fn offsets_respect_clamp() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = OffsetPredictor::new(&mut ParamBuilder::new(&mut store, &mut rng), 4, 2.5).unwrap();
        store.get_mut(p.head.bias.unwrap()).data_mut().fill(50.0);
        let mut g = Graph::new(&store);
        let a = g.constant(rand_tensor(&[1, 4, 5, 5], 3));
        let off = p.forward(&mut g, a, a).unwrap();
        assert!(g.value(off).data().iter().all(|&v| v.abs() <= 2.5));
    }

    #[test]
    fn integer_offset_shifts_with_zero_fill() {
        let x = rand_tensor(&[1, 1, 6, 6], 4);
        let mut off = Tensor::zeros(&[1, 18, 6, 6]);
        for k in 0..9 {
            off.data_mut()[(2 * k + 1) * 36..(2 * k + 2) * 36].fill(1.0);
        }
        let mut w = Tensor::zeros(&[1, 1, 3, 3]);
        w.data_mut()[4] = 1.0;
        let y = deformable_sample(&x, &off, &w, None).unwrap();
        for r in 0..6 {
            for c in 0..6 {
                let expect = if c + 1 < 6 { x.data()[r * 6 + c + 1] } else { 0.0 };
                assert_eq!(y.data()[r * 6 + c], expect);
            }
        }
    }

    #[test]
    fn window_fusion_is_linear() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let conv = Conv2d::new(&mut ParamBuilder::new(&mut store, &mut rng), 6, 2, 3, ConvInit::Default).unwrap();
        store.get_mut(conv.bias.unwrap()).data_mut().fill(0.0);
        let parts: Vec<_> = (0..3).map(|i| rand_tensor(&[1, 2, 4, 4], 10 + i)).collect();
        let mut g = Graph::new(&store);
        let v: Vec<_> = parts.iter().map(|p| g.constant(p.clone())).collect();
        let base = fuse_window(&conv, &mut g, v[0], v[1], v[2]).unwrap();
        let s: Vec<_> = parts.iter().map(|p| g.constant(p.map(|x| 2.5 * x))).collect();
        let scaled = fuse_window(&conv, &mut g, s[0], s[1], s[2]).unwrap();
        let expect = g.value(base).map(|x| 2.5 * x);
        assert!(g.value(scaled).max_abs_diff(&expect).unwrap() < 1e-12);
    }

    #[test]
    fn extractor_permutes_with_frames() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ext = FeatureExtractor::new(&mut ParamBuilder::new(&mut store, &mut rng), 4).unwrap();
        let frames: Vec<_> = (0..5).map(|i| rand_tensor(&[1, 3, 6, 6], 20 + i)).collect();
        let mut g = Graph::new(&store);
        let vars: Vec<_> = frames.iter().map(|f| g.constant(f.clone())).collect();
        let a = extract_lr_features(&ext, &mut g, &vars, 5).unwrap();
        let mut swapped = vars.clone();
        swapped.swap(0, 3);
        let b = extract_lr_features(&ext, &mut g, &swapped, 5).unwrap();
        assert_eq!(g.value(a[0]), g.value(b[3]));
        assert_eq!(g.value(a[3]), g.value(b[0]));
        assert_eq!(g.shape(a[1]), &[1, 4, 6, 6]);
        assert!(extract_lr_features(&ext, &mut g, &vars[..4], 5).is_err());
    }
}
