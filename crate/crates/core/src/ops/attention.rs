//! Multi-head, multi-level deformable attention sampling.
//!
//! For query pixel `p`, head `m`, level `l`, source `t` and grid point `k`,
//! the sample location in level-0 pixels is `p + p_k + dp`, mapped to the
//! level grid with half-pixel centring. Head `m` reads channels
//! `m*D..(m+1)*D` of the source-`t` block of the value planes, where
//! `D = C / M`.

use crate::error::{Error, Result};
use crate::ops::sampling::Bilerp;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnLayout {
    pub heads: usize,
    pub levels: usize,
    pub sources: usize,
    /// Side of the square sampling grid; `points = grid * grid`.
    pub grid: usize,
    pub channels: usize,
}

impl AttnLayout {
    pub fn points(&self) -> usize {
        self.grid * self.grid
    }

    /// Number of attention weights per query pixel.
    pub fn weights(&self) -> usize {
        self.heads * self.levels * self.sources * self.points()
    }

    /// Softmax group size: everything one head attends to.
    pub fn group(&self) -> usize {
        self.levels * self.sources * self.points()
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    #[inline]
    pub fn index(&self, m: usize, l: usize, t: usize, k: usize) -> usize {
        ((m * self.levels + l) * self.sources + t) * self.points() + k
    }

    fn validate<T: Real>(
        &self,
        values: &[&Tensor<T>],
        attn: &Tensor<T>,
        offsets: &Tensor<T>,
    ) -> Result<(usize, usize, usize)> {
        if self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::invalid(format!(
                "{} channels cannot be split across {} heads",
                self.channels, self.heads
            )));
        }
        if values.len() != self.levels {
            return Err(Error::shape(format!(
                "expected {} value levels, got {}",
                self.levels,
                values.len()
            )));
        }
        let (n, a, h, w) = attn.dims4()?;
        if a != self.weights() {
            return Err(Error::shape(format!(
                "attention needs {} channels, got {a}",
                self.weights()
            )));
        }
        if offsets.shape() != [n, 2 * a, h, w] {
            return Err(Error::shape(format!(
                "offsets must be [{n}, {}, {h}, {w}], got {:?}",
                2 * a,
                offsets.shape()
            )));
        }
        for (l, v) in values.iter().enumerate() {
            let (vn, vc, vh, vw) = v.dims4()?;
            if vn != n || vc != self.sources * self.channels || vh != (h >> l) || vw != (w >> l) {
                return Err(Error::shape(format!(
                    "value level {l} has shape {:?}",
                    v.shape()
                )));
            }
        }
        Ok((n, h, w))
    }
}

struct Site<T> {
    stencil: Bilerp<T>,
    scale_y: T,
    scale_x: T,
}

#[inline]
#[allow(clippy::too_many_arguments)]
fn site<T: Real>(
    lay: &AttnLayout,
    off: &[T],
    hw: usize,
    w: usize,
    p: usize,
    idx: usize,
    k: usize,
    (lh, lw, fy, fx): (usize, usize, T, T),
) -> Site<T> {
    let r = (lay.grid / 2) as f64;
    let ky = (k / lay.grid) as f64 - r;
    let kx = (k % lay.grid) as f64 - r;
    let half = T::lit(0.5);
    let y0 = T::lit((p / w) as f64 + ky) + off[2 * idx * hw + p];
    let x0 = T::lit((p % w) as f64 + kx) + off[(2 * idx + 1) * hw + p];
    let yl = (y0 + half) * fy - half;
    let xl = (x0 + half) * fx - half;
    Site {
        stencil: Bilerp::new(lh, lw, yl, xl),
        scale_y: fy,
        scale_x: fx,
    }
}

fn level_geom<T: Real>(v: &Tensor<T>, h: usize, w: usize) -> (usize, usize, T, T) {
    let (lh, lw) = (v.shape()[2], v.shape()[3]);
    (lh, lw, T::lit(lh as f64 / h as f64), T::lit(lw as f64 / w as f64))
}

/// Attention-weighted deformable sampling; output is `[N, C, H, W]`.
pub fn deform_attn<T: Real>(
    lay: &AttnLayout,
    values: &[&Tensor<T>],
    attn: &Tensor<T>,
    offsets: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, h, w) = lay.validate(values, attn, offsets)?;
    let hw = h * w;
    let a = lay.weights();
    let c = lay.channels;
    let d = lay.head_dim();
    let mut out = Tensor::zeros(&[n, c, h, w]);
    let geoms: Vec<_> = values.iter().map(|v| level_geom(v, h, w)).collect();
    for s in 0..n {
        let at = &attn.data()[s * a * hw..(s + 1) * a * hw];
        let of = &offsets.data()[s * 2 * a * hw..(s + 1) * 2 * a * hw];
        for p in 0..hw {
            for m in 0..lay.heads {
                for l in 0..lay.levels {
                    let v = values[l];
                    let (lh, lw, _, _) = geoms[l];
                    let lhw = lh * lw;
                    let vs = &v.data()[s * lay.sources * c * lhw..(s + 1) * lay.sources * c * lhw];
                    for t in 0..lay.sources {
                        for k in 0..lay.points() {
                            let idx = lay.index(m, l, t, k);
                            let wt = at[idx * hw + p];
                            if wt == T::zero() {
                                continue;
                            }
                            let st = site(lay, of, hw, w, p, idx, k, geoms[l]);
                            for dd in 0..d {
                                let ch = t * c + m * d + dd;
                                let val = st.stencil.sample(&vs[ch * lhw..(ch + 1) * lhw]);
                                out.data_mut()[(s * c + m * d + dd) * hw + p] += wt * val;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`deform_attn`]: `(dvalues per level, dattn, doffsets)`.
pub fn deform_attn_backward<T: Real>(
    lay: &AttnLayout,
    values: &[&Tensor<T>],
    attn: &Tensor<T>,
    offsets: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Vec<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let (n, h, w) = lay.validate(values, attn, offsets)?;
    let hw = h * w;
    let a = lay.weights();
    let c = lay.channels;
    let d = lay.head_dim();
    if grad_out.shape() != [n, c, h, w] {
        return Err(Error::shape("deformable attention grad shape mismatch"));
    }
    let mut dvals: Vec<Tensor<T>> = values.iter().map(|v| Tensor::zeros(v.shape())).collect();
    let mut dattn = Tensor::zeros(attn.shape());
    let mut doff = Tensor::zeros(offsets.shape());
    let geoms: Vec<_> = values.iter().map(|v| level_geom(v, h, w)).collect();
    for s in 0..n {
        let at = &attn.data()[s * a * hw..(s + 1) * a * hw];
        let of = &offsets.data()[s * 2 * a * hw..(s + 1) * 2 * a * hw];
        let go = &grad_out.data()[s * c * hw..(s + 1) * c * hw];
        for p in 0..hw {
            for m in 0..lay.heads {
                for l in 0..lay.levels {
                    let (lh, lw, _, _) = geoms[l];
                    let lhw = lh * lw;
                    let span = lay.sources * c * lhw;
                    let vs = &values[l].data()[s * span..(s + 1) * span];
                    let dvs = &mut dvals[l].data_mut()[s * span..(s + 1) * span];
                    for t in 0..lay.sources {
                        for k in 0..lay.points() {
                            let idx = lay.index(m, l, t, k);
                            let wt = at[idx * hw + p];
                            let st = site(lay, of, hw, w, p, idx, k, geoms[l]);
                            let (mut ga, mut gy, mut gx) = (T::zero(), T::zero(), T::zero());
                            for dd in 0..d {
                                let g = go[(m * d + dd) * hw + p];
                                let ch = t * c + m * d + dd;
                                let plane = &vs[ch * lhw..(ch + 1) * lhw];
                                ga += g * st.stencil.sample(plane);
                                let (py, px) = st.stencil.position_grad(plane);
                                gy += g * py;
                                gx += g * px;
                                st.stencil
                                    .scatter(&mut dvs[ch * lhw..(ch + 1) * lhw], g * wt);
                            }
                            dattn.data_mut()[(s * a + idx) * hw + p] += ga;
                            let ds = &mut doff.data_mut()[s * 2 * a * hw..(s + 1) * 2 * a * hw];
                            ds[2 * idx * hw + p] += wt * gy * st.scale_y;
                            ds[(2 * idx + 1) * hw + p] += wt * gx * st.scale_x;
                        }
                    }
                }
            }
        }
    }
    Ok((dvals, dattn, doff))
}
