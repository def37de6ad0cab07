//! Bilinear point sampling with zero fill outside the grid, and the two
//! operators built on it: deformable convolution and backward warping.

use crate::error::{Error, Result};
use crate::ops::conv;
use crate::tensor::{Real, Tensor};

/// Four-tap bilinear stencil at a continuous location `(y, x)`.
#[derive(Clone, Copy, Debug)]
pub struct Bilerp<T> {
    idx: [usize; 4],
    valid: [bool; 4],
    wy: T,
    wx: T,
}

impl<T: Real> Bilerp<T> {
    #[inline]
    pub fn new(h: usize, w: usize, y: T, x: T) -> Self {
        let y0f = y.floor();
        let x0f = x.floor();
        let wy = y - y0f;
        let wx = x - x0f;
        let y0 = y0f.to_isize().unwrap_or(isize::MIN / 2);
        let x0 = x0f.to_isize().unwrap_or(isize::MIN / 2);
        let mut idx = [0usize; 4];
        let mut valid = [false; 4];
        for (i, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
            let yy = y0.saturating_add(dy);
            let xx = x0.saturating_add(dx);
            if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                valid[i] = true;
                idx[i] = yy as usize * w + xx as usize;
            }
        }
        Self { idx, valid, wy, wx }
    }

    #[inline]
    fn weights(&self) -> [T; 4] {
        let one = T::one();
        [
            (one - self.wy) * (one - self.wx),
            (one - self.wy) * self.wx,
            self.wy * (one - self.wx),
            self.wy * self.wx,
        ]
    }

    #[inline]
    fn corners(&self, plane: &[T]) -> [T; 4] {
        let mut v = [T::zero(); 4];
        for i in 0..4 {
            if self.valid[i] {
                v[i] = plane[self.idx[i]];
            }
        }
        v
    }

    #[inline]
    pub fn sample(&self, plane: &[T]) -> T {
        let v = self.corners(plane);
        let w = self.weights();
        w[0] * v[0] + w[1] * v[1] + w[2] * v[2] + w[3] * v[3]
    }

    /// `(d/dy, d/dx)` of [`Bilerp::sample`] with respect to the location.
    #[inline]
    pub fn position_grad(&self, plane: &[T]) -> (T, T) {
        let v = self.corners(plane);
        let one = T::one();
        let gy = (one - self.wx) * (v[2] - v[0]) + self.wx * (v[3] - v[1]);
        let gx = (one - self.wy) * (v[1] - v[0]) + self.wy * (v[3] - v[2]);
        (gy, gx)
    }

    /// Accumulate `g * d(sample)/d(plane)` into `dplane`.
    #[inline]
    pub fn scatter(&self, dplane: &mut [T], g: T) {
        let w = self.weights();
        for i in 0..4 {
            if self.valid[i] {
                dplane[self.idx[i]] += g * w[i];
            }
        }
    }
}

/// Sample one plane at `(y, x)`; zero outside.
pub fn bilinear<T: Real>(plane: &[T], h: usize, w: usize, y: T, x: T) -> T {
    Bilerp::new(h, w, y, x).sample(plane)
}

struct DeformGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    ks: usize,
}

impl DeformGeom {
    fn new<T: Real>(x: &Tensor<T>, offsets: &Tensor<T>, weight: &Tensor<T>) -> Result<Self> {
        let (n, c, h, w) = x.dims4()?;
        let (_, ci, kh, kw) = weight.dims4()?;
        if ci != c || kh != kw || kh % 2 == 0 {
            return Err(Error::shape(format!(
                "deformable conv weight {:?} incompatible with input {:?}",
                weight.shape(),
                x.shape()
            )));
        }
        if offsets.shape() != [n, 2 * kh * kw, h, w] {
            return Err(Error::shape(format!(
                "offsets must be [{n}, {}, {h}, {w}], got {:?}",
                2 * kh * kw,
                offsets.shape()
            )));
        }
        Ok(Self { n, c, h, w, ks: kh })
    }

    fn k(&self) -> usize {
        self.ks * self.ks
    }

    fn stencil<T: Real>(&self, off: &[T], k: usize, p: usize) -> Bilerp<T> {
        let hw = self.h * self.w;
        let r = (self.ks / 2) as isize;
        let ky = (k / self.ks) as isize - r;
        let kx = (k % self.ks) as isize - r;
        let (y, x) = (p / self.w, p % self.w);
        let sy = T::lit((y as isize + ky) as f64) + off[2 * k * hw + p];
        let sx = T::lit((x as isize + kx) as f64) + off[(2 * k + 1) * hw + p];
        Bilerp::new(self.h, self.w, sy, sx)
    }

    fn columns<T: Real>(&self, xs: &[T], off: &[T], cols: &mut [T]) {
        let hw = self.h * self.w;
        let kk = self.k();
        for k in 0..kk {
            for p in 0..hw {
                let s = self.stencil(off, k, p);
                for c in 0..self.c {
                    cols[(c * kk + k) * hw + p] = s.sample(&xs[c * hw..(c + 1) * hw]);
                }
            }
        }
    }
}

/// Deformable convolution: `y(p) = sum_k w_k * x(p + p_k + dp_k(p)) + b`.
///
/// `offsets` is `[N, 2K, H, W]` holding `(dy_k, dx_k)` at channels
/// `(2k, 2k+1)`, with `k` running row-major over the kernel grid. Samples
/// outside the frame contribute zero.
pub fn deform_conv2d<T: Real>(
    x: &Tensor<T>,
    offsets: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let g = DeformGeom::new(x, offsets, weight)?;
    let co = weight.shape()[0];
    let hw = g.h * g.w;
    let rows = g.c * g.k();
    let mut out = Tensor::zeros(&[g.n, co, g.h, g.w]);
    let mut cols = vec![T::zero(); rows * hw];
    for s in 0..g.n {
        let xs = &x.data()[s * g.c * hw..(s + 1) * g.c * hw];
        let os = &offsets.data()[s * 2 * g.k() * hw..(s + 1) * 2 * g.k() * hw];
        g.columns(xs, os, &mut cols);
        let ys = &mut out.data_mut()[s * co * hw..(s + 1) * co * hw];
        if let Some(b) = bias {
            for (o, &bo) in b.data().iter().enumerate() {
                ys[o * hw..(o + 1) * hw].fill(bo);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(
            co,
            rows,
            hw,
            T::one(),
            weight.data(),
            rows as isize,
            1,
            &cols,
            hw as isize,
            1,
            beta,
            ys,
            hw as isize,
            1,
        );
    }
    Ok(out)
}

/// Gradients of [`deform_conv2d`]: `(dx, doffsets, dweight, dbias)`.
pub fn deform_conv2d_backward<T: Real>(
    x: &Tensor<T>,
    offsets: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>, Tensor<T>)> {
    let g = DeformGeom::new(x, offsets, weight)?;
    let co = weight.shape()[0];
    let hw = g.h * g.w;
    let kk = g.k();
    let rows = g.c * kk;
    let mut dx = Tensor::zeros(x.shape());
    let mut doff = Tensor::zeros(offsets.shape());
    let mut dw = Tensor::zeros(weight.shape());
    let mut db = Tensor::zeros(&[co]);
    let mut cols = vec![T::zero(); rows * hw];
    let mut dcols = vec![T::zero(); rows * hw];
    for s in 0..g.n {
        let xs = &x.data()[s * g.c * hw..(s + 1) * g.c * hw];
        let os = &offsets.data()[s * 2 * kk * hw..(s + 1) * 2 * kk * hw];
        let gs = &grad_out.data()[s * co * hw..(s + 1) * co * hw];
        for o in 0..co {
            db.data_mut()[o] += gs[o * hw..(o + 1) * hw]
                .iter()
                .fold(T::zero(), |a, &v| a + v);
        }
        g.columns(xs, os, &mut cols);
        T::gemm(
            co,
            hw,
            rows,
            T::one(),
            gs,
            hw as isize,
            1,
            &cols,
            1,
            hw as isize,
            T::one(),
            dw.data_mut(),
            rows as isize,
            1,
        );
        T::gemm(
            rows,
            co,
            hw,
            T::one(),
            weight.data(),
            1,
            rows as isize,
            gs,
            hw as isize,
            1,
            T::zero(),
            &mut dcols,
            hw as isize,
            1,
        );
        let dxs = &mut dx.data_mut()[s * g.c * hw..(s + 1) * g.c * hw];
        let dos = &mut doff.data_mut()[s * 2 * kk * hw..(s + 1) * 2 * kk * hw];
        for k in 0..kk {
            for p in 0..hw {
                let st = g.stencil(os, k, p);
                let (mut gy, mut gx) = (T::zero(), T::zero());
                for c in 0..g.c {
                    let gv = dcols[(c * kk + k) * hw + p];
                    if gv == T::zero() {
                        continue;
                    }
                    let plane = &xs[c * hw..(c + 1) * hw];
                    let (py, px) = st.position_grad(plane);
                    gy += gv * py;
                    gx += gv * px;
                    st.scatter(&mut dxs[c * hw..(c + 1) * hw], gv);
                }
                dos[2 * k * hw + p] += gy;
                dos[(2 * k + 1) * hw + p] += gx;
            }
        }
    }
    Ok((dx, doff, dw, db))
}

fn check_flow<T: Real>(x: &Tensor<T>, flow: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    let (n, c, h, w) = x.dims4()?;
    if flow.shape() != [n, 2, h, w] {
        return Err(Error::shape(format!(
            "flow must be [{n}, 2, {h}, {w}], got {:?}",
            flow.shape()
        )));
    }
    Ok((n, c, h, w))
}

/// Backward warp `out(p) = x(p + flow(p))`, flow channels `(dy, dx)`.
pub fn warp<T: Real>(x: &Tensor<T>, flow: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = check_flow(x, flow)?;
    let hw = h * w;
    let mut out = Tensor::zeros(x.shape());
    for s in 0..n {
        let fl = &flow.data()[s * 2 * hw..(s + 1) * 2 * hw];
        for p in 0..hw {
            let y = T::lit((p / w) as f64) + fl[p];
            let xx = T::lit((p % w) as f64) + fl[hw + p];
            let st = Bilerp::new(h, w, y, xx);
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                let v = st.sample(&x.data()[base..base + hw]);
                out.data_mut()[base + p] = v;
            }
        }
    }
    Ok(out)
}

/// Gradients of [`warp`]: `(dx, dflow)`.
pub fn warp_backward<T: Real>(
    x: &Tensor<T>,
    flow: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = check_flow(x, flow)?;
    let hw = h * w;
    let mut dx = Tensor::zeros(x.shape());
    let mut dflow = Tensor::zeros(flow.shape());
    for s in 0..n {
        let fl = &flow.data()[s * 2 * hw..(s + 1) * 2 * hw];
        for p in 0..hw {
            let y = T::lit((p / w) as f64) + fl[p];
            let xx = T::lit((p % w) as f64) + fl[hw + p];
            let st = Bilerp::new(h, w, y, xx);
            let (mut gy, mut gx) = (T::zero(), T::zero());
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                let gv = grad_out.data()[base + p];
                let (py, px) = st.position_grad(&x.data()[base..base + hw]);
                gy += gv * py;
                gx += gv * px;
                st.scatter(&mut dx.data_mut()[base..base + hw], gv);
            }
            dflow.data_mut()[s * 2 * hw + p] += gy;
            dflow.data_mut()[s * 2 * hw + hw + p] += gx;
        }
    }
    Ok((dx, dflow))
}

/// Dense equivalent of a zero-offset deformable convolution.
pub fn dense_equivalent<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let pad = weight.shape().get(2).copied().unwrap_or(1) / 2;
    conv::conv2d(x, weight, bias, pad)
}
