//! Optical flow providers used to seed the deformable attention offsets.
//!
//! A flow `[2, H, W]` from frame `a` to frame `b` holds `(dy, dx)` such that
//! `b(p + flow(p)) ~ a(p)`, which is what a backward warp of `b` needs.

use serde::{Deserialize, Serialize};

use crate::degradation::Image;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub trait FlowProvider {
    fn flow(&self, from: &Image, to: &Image) -> Result<Tensor<f64>>;
}

/// Always returns zero displacement.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroFlow;

impl FlowProvider for ZeroFlow {
    fn flow(&self, from: &Image, to: &Image) -> Result<Tensor<f64>> {
        let (_, h, w) = check_pair(from, to)?;
        Ok(Tensor::zeros(&[2, h, w]))
    }
}

/// Coarse-to-fine block matching on luminance with a final sub-pixel
/// refinement.
#[derive(Clone, Copy, Debug)]
pub struct BlockMatching {
    pub levels: usize,
    pub block: usize,
    /// Search radius at the coarsest level.
    pub coarse_radius: isize,
    /// Refinement radius at every finer level.
    pub refine_radius: isize,
}

impl Default for BlockMatching {
    fn default() -> Self {
        Self {
            levels: 3,
            block: 8,
            coarse_radius: 3,
            refine_radius: 2,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowMethod {
    #[default]
    BlockMatching,
    Zero,
}

impl FlowMethod {
    pub fn provider(self) -> Box<dyn FlowProvider> {
        match self {
            FlowMethod::BlockMatching => Box::new(BlockMatching::default()),
            FlowMethod::Zero => Box::new(ZeroFlow),
        }
    }
}

impl std::str::FromStr for FlowMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "block_matching" => Ok(FlowMethod::BlockMatching),
            "zero" => Ok(FlowMethod::Zero),
            other => Err(Error::invalid(format!("unknown flow method `{other}`"))),
        }
    }
}

fn check_pair(a: &Image, b: &Image) -> Result<(usize, usize, usize)> {
    let da = a.dims3()?;
    if da != b.dims3()? {
        return Err(Error::invalid(format!(
            "flow frames differ in shape: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(da)
}

struct Plane {
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Plane {
    fn luma(img: &Image) -> Self {
        let (c, h, w) = img.dims3().expect("checked");
        let d = img.data();
        let v = (0..h * w)
            .map(|i| {
                if c == 3 {
                    0.299 * d[i] + 0.587 * d[h * w + i] + 0.114 * d[2 * h * w + i]
                } else {
                    (0..c).map(|ch| d[ch * h * w + i]).sum::<f64>() / c as f64
                }
            })
            .collect();
        Self { h, w, v }
    }

    fn half(&self) -> Self {
        let (h, w) = (self.h.div_ceil(2), self.w.div_ceil(2));
        let mut v = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                let mut n = 0.0;
                for sy in 2 * y..(2 * y + 2).min(self.h) {
                    for sx in 2 * x..(2 * x + 2).min(self.w) {
                        acc += self.v[sy * self.w + sx];
                        n += 1.0;
                    }
                }
                v[y * w + x] = acc / n;
            }
        }
        Self { h, w, v }
    }
}

impl BlockMatching {
    /// Mean absolute (or squared) difference of one block displaced by
    /// `(dy, dx)`, or `None` when less than half of it stays in frame.
    #[allow(clippy::too_many_arguments)]
    fn block_cost(&self, a: &Plane, b: &Plane, y0: usize, x0: usize, dy: isize, dx: isize, squared: bool) -> Option<f64> {
        let y1 = (y0 + self.block).min(a.h);
        let x1 = (x0 + self.block).min(a.w);
        let area = ((y1 - y0) * (x1 - x0)) as f64;
        let mut acc = 0.0;
        let mut n = 0.0;
        for y in y0..y1 {
            let ty = y as isize + dy;
            if ty < 0 || ty >= b.h as isize {
                continue;
            }
            for x in x0..x1 {
                let tx = x as isize + dx;
                if tx < 0 || tx >= b.w as isize {
                    continue;
                }
                let d = a.v[y * a.w + x] - b.v[ty as usize * b.w + tx as usize];
                acc += if squared { d * d } else { d.abs() };
                n += 1.0;
            }
        }
        (n >= 0.5 * area).then(|| acc / n)
    }

    /// Best displacement for one block, searched around each prior.
    fn match_block(
        &self,
        a: &Plane,
        b: &Plane,
        y0: usize,
        x0: usize,
        priors: &[(isize, isize)],
        radius: isize,
    ) -> (isize, isize) {
        let mut cands: Vec<(isize, isize)> = Vec::new();
        for p in priors {
            for dy in -radius..=radius {
                for dx in -radius..=radius {
                    cands.push((p.0 + dy, p.1 + dx));
                }
            }
        }
        // Nearest-to-zero first so ties keep the smallest motion.
        cands.sort_by_key(|&(dy, dx)| (dy * dy + dx * dx, dy, dx));
        cands.dedup();
        let mut best = ((0, 0), f64::INFINITY);
        for (dy, dx) in cands {
            if let Some(cost) = self.block_cost(a, b, y0, x0, dy, dx, false) {
                if cost < best.1 {
                    best = ((dy, dx), cost);
                }
            }
        }
        best.0
    }

    /// Parabolic sub-pixel refinement of an integer match on the squared
    /// cost, per axis, limited to half a pixel.
    fn refine(&self, a: &Plane, b: &Plane, y0: usize, x0: usize, d: (isize, isize)) -> (f64, f64) {
        let Some(c0) = self.block_cost(a, b, y0, x0, d.0, d.1, true) else {
            return (d.0 as f64, d.1 as f64);
        };
        let axis = |lo: Option<f64>, hi: Option<f64>| -> f64 {
            match (lo, hi) {
                (Some(m), Some(p)) if c0 > 0.0 => {
                    let curv = m - 2.0 * c0 + p;
                    if curv > 0.0 {
                        (0.5 * (m - p) / curv).clamp(-0.5, 0.5)
                    } else {
                        0.0
                    }
                }
                _ => 0.0,
            }
        };
        let fy = axis(
            self.block_cost(a, b, y0, x0, d.0 - 1, d.1, true),
            self.block_cost(a, b, y0, x0, d.0 + 1, d.1, true),
        );
        let fx = axis(
            self.block_cost(a, b, y0, x0, d.0, d.1 - 1, true),
            self.block_cost(a, b, y0, x0, d.0, d.1 + 1, true),
        );
        (d.0 as f64 + fy, d.1 as f64 + fx)
    }
}

impl FlowProvider for BlockMatching {
    fn flow(&self, from: &Image, to: &Image) -> Result<Tensor<f64>> {
        let (_, h, w) = check_pair(from, to)?;
        if self.block == 0 || self.levels == 0 {
            return Err(Error::invalid("block size and level count must be positive"));
        }
        let mut pyr = vec![(Plane::luma(from), Plane::luma(to))];
        for _ in 1..self.levels {
            let (a, b) = pyr.last().expect("non-empty");
            let next = (a.half(), b.half());
            pyr.push(next);
        }
        // Per-pixel integer field at the current level.
        let mut field: Vec<(isize, isize)> = Vec::new();
        let mut fw = 0;
        for (lvl, (a, b)) in pyr.iter().enumerate().rev() {
            let coarsest = lvl + 1 == pyr.len();
            let radius = if coarsest {
                self.coarse_radius
            } else {
                self.refine_radius
            };
            let mut next = vec![(0isize, 0isize); a.h * a.w];
            for y0 in (0..a.h).step_by(self.block) {
                for x0 in (0..a.w).step_by(self.block) {
                    // Hypotheses: zero motion plus the coarser estimate at
                    // this block and its four neighbours.
                    let mut priors = vec![(0, 0)];
                    if !coarsest {
                        let (ch, cw) = (field.len() / fw, fw);
                        let cy = ((y0 + self.block / 2).min(a.h - 1) / 2) as isize;
                        let cx = ((x0 + self.block / 2).min(a.w - 1) / 2) as isize;
                        let step = self.block as isize / 2;
                        for (oy, ox) in [(0, 0), (-step, 0), (step, 0), (0, -step), (0, step)] {
                            let (y, x) = (cy + oy, cx + ox);
                            if y >= 0 && x >= 0 && (y as usize) < ch && (x as usize) < cw {
                                let p = field[y as usize * fw + x as usize];
                                priors.push((2 * p.0, 2 * p.1));
                            }
                        }
                    }
                    let d = self.match_block(a, b, y0, x0, &priors, radius);
                    for y in y0..(y0 + self.block).min(a.h) {
                        for x in x0..(x0 + self.block).min(a.w) {
                            next[y * a.w + x] = d;
                        }
                    }
                }
            }
            field = next;
            fw = a.w;
        }
        let (a, b) = &pyr[0];
        let mut out = Tensor::zeros(&[2, h, w]);
        for y0 in (0..h).step_by(self.block) {
            for x0 in (0..w).step_by(self.block) {
                let (dy, dx) = self.refine(a, b, y0, x0, field[y0 * w + x0]);
                for y in y0..(y0 + self.block).min(h) {
                    for x in x0..(x0 + self.block).min(w) {
                        out.data_mut()[y * w + x] = dy;
                        out.data_mut()[h * w + y * w + x] = dx;
                    }
                }
            }
        }
        Ok(out)
    }
}

/// `(flow mid -> prev, flow mid -> next)` for a three-frame window.
pub fn estimate_flows(
    provider: &dyn FlowProvider,
    frames: [&Image; 3],
) -> Result<(Tensor<f64>, Tensor<f64>)> {
    let [prev, mid, next] = frames;
    Ok((provider.flow(mid, prev)?, provider.flow(mid, next)?))
}
