//! Stride-1 2D convolution (cross-correlation) via im2col + GEMM.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn new(x: &[usize], weight: &[usize], pad: usize) -> Result<(usize, usize, Self)> {
        let (n, c, h, w) = match *x {
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(Error::shape(format!("conv input must be NCHW, got {x:?}"))),
        };
        let (co, ci, kh, kw) = match *weight {
            [a, b, c, d] => (a, b, c, d),
            _ => {
                return Err(Error::shape(format!(
                    "conv weight must be OIHW, got {weight:?}"
                )))
            }
        };
        if ci != c {
            return Err(Error::shape(format!(
                "conv expects {ci} input channels, got {c}"
            )));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape(format!(
                "kernel {kh}x{kw} larger than padded input {h}x{w}"
            )));
        }
        let oh = h + 2 * pad - kh + 1;
        let ow = w + 2 * pad - kw + 1;
        Ok((
            n,
            co,
            Self {
                c,
                h,
                w,
                kh,
                kw,
                pad,
                oh,
                ow,
            },
        ))
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.pad == 0
    }

    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col<T: Real>(x: &[T], g: &Geometry, cols: &mut [T]) {
    let p = g.cols();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = oy as isize + ky as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = ox as isize + kx as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &Geometry, dx: &mut [T]) {
    let p = g.cols();
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = oy as isize + ky as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = ox as isize + kx as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `y[n, o] = sum_i w[o, i] * x[n, i] (+ b[o])` with zero padding.
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    pad: usize,
) -> Result<Tensor<T>> {
    let (n, co, g) = Geometry::new(x.shape(), weight.shape(), pad)?;
    if let Some(b) = bias {
        if b.shape() != [co] {
            return Err(Error::shape(format!(
                "conv bias must be [{co}], got {:?}",
                b.shape()
            )));
        }
    }
    let (rows, p) = (g.rows(), g.cols());
    let in_len = g.c * g.h * g.w;
    let mut out = Tensor::zeros(&[n, co, g.oh, g.ow]);
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * p]
    };
    let wd = weight.data();
    for s in 0..n {
        let xs = &x.data()[s * in_len..(s + 1) * in_len];
        let ys = &mut out.data_mut()[s * co * p..(s + 1) * co * p];
        if let Some(b) = bias {
            for (o, &bo) in b.data().iter().enumerate() {
                ys[o * p..(o + 1) * p].fill(bo);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        let src: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, &g, &mut cols);
            &cols
        };
        T::gemm(
            co, rows, p, T::one(), wd, rows as isize, 1, src, p as isize, 1, beta, ys,
            p as isize, 1,
        );
    }
    Ok(out)
}

/// Gradients of [`conv2d`]: `(dx, dweight, dbias)`.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    pad: usize,
    grad_out: &Tensor<T>,
    need_dx: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let (n, co, g) = Geometry::new(x.shape(), weight.shape(), pad)?;
    if grad_out.shape() != [n, co, g.oh, g.ow] {
        return Err(Error::shape("conv grad_out shape mismatch"));
    }
    let (rows, p) = (g.rows(), g.cols());
    let in_len = g.c * g.h * g.w;
    let mut dw = Tensor::zeros(weight.shape());
    let mut db = Tensor::zeros(&[co]);
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * p]
    };
    let mut dcols = vec![T::zero(); if need_dx { rows * p } else { 0 }];
    for s in 0..n {
        let xs = &x.data()[s * in_len..(s + 1) * in_len];
        let gs = &grad_out.data()[s * co * p..(s + 1) * co * p];
        for o in 0..co {
            let acc = gs[o * p..(o + 1) * p]
                .iter()
                .fold(T::zero(), |a, &v| a + v);
            db.data_mut()[o] += acc;
        }
        let src: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, &g, &mut cols);
            &cols
        };
        // dW += dY (co x p) * cols^T (p x rows)
        T::gemm(
            co,
            p,
            rows,
            T::one(),
            gs,
            p as isize,
            1,
            src,
            1,
            p as isize,
            T::one(),
            dw.data_mut(),
            rows as isize,
            1,
        );
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx.data_mut()[s * in_len..(s + 1) * in_len];
            if g.is_pointwise() {
                // dx = W^T (rows x co) * dY (co x p)
                T::gemm(
                    rows,
                    co,
                    p,
                    T::one(),
                    weight.data(),
                    1,
                    rows as isize,
                    gs,
                    p as isize,
                    1,
                    T::zero(),
                    dxs,
                    p as isize,
                    1,
                );
            } else {
                T::gemm(
                    rows,
                    co,
                    p,
                    T::one(),
                    weight.data(),
                    1,
                    rows as isize,
                    gs,
                    p as isize,
                    1,
                    T::zero(),
                    &mut dcols,
                    p as isize,
                    1,
                );
                col2im(&dcols, &g, dxs);
            }
        }
    }
    Ok((dx, dw, db))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn direct(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, pad: usize) -> Tensor<f64> {
        let (n, c, h, wd) = x.dims4().unwrap();
        let (co, _, kh, kw) = w.dims4().unwrap();
        let (oh, ow) = (h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1);
        let mut out = Tensor::zeros(&[n, co, oh, ow]);
        for s in 0..n {
            for o in 0..co {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = b.data()[o];
                        for i in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = y as isize + ky as isize - pad as isize;
                                    let ix = xx as isize + kx as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += w.data()[((o * c + i) * kh + ky) * kw + kx]
                                        * x.data()[((s * c + i) * h + iy as usize) * wd
                                            + ix as usize];
                                }
                            }
                        }
                        out.data_mut()[((s * co + o) * oh + y) * ow + xx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(k, pad) in &[(3, 1), (5, 2), (1, 0), (3, 0)] {
            let x = random(&[2, 3, 6, 7], &mut rng);
            let w = random(&[4, 3, k, k], &mut rng);
            let b = random(&[4], &mut rng);
            let y = conv2d(&x, &w, Some(&b), pad).unwrap();
            let d = direct(&x, &w, &b, pad);
            assert!(y.max_abs_diff(&d).unwrap() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[2, 2, 4, 5], &mut rng);
        let w = random(&[3, 2, 3, 3], &mut rng);
        let b = random(&[3], &mut rng);
        let r = random(&[2, 3, 4, 5], &mut rng);
        let loss = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| {
            let y = conv2d(x, w, Some(b), 1).unwrap();
            y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let (dx, dw, db) = conv2d_backward(&x, &w, 1, &r, true).unwrap();
        let dx = dx.unwrap();
        let h = 1e-6;
        for i in 0..x.numel() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (loss(&xp, &w, &b) - loss(&xm, &w, &b)) / (2.0 * h);
            assert!((fd - dx.data()[i]).abs() < 1e-6);
        }
        for i in 0..w.numel() {
            let mut wp = w.clone();
            wp.data_mut()[i] += h;
            let mut wm = w.clone();
            wm.data_mut()[i] -= h;
            let fd = (loss(&x, &wp, &b) - loss(&x, &wm, &b)) / (2.0 * h);
            assert!((fd - dw.data()[i]).abs() < 1e-6);
        }
        for i in 0..3 {
            let expected: f64 = (0..2)
                .map(|s| r.data()[(s * 3 + i) * 20..(s * 3 + i + 1) * 20].iter().sum::<f64>())
                .sum();
            assert!((expected - db.data()[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_channel_mismatch() {
        let x = Tensor::<f64>::zeros(&[1, 2, 4, 4]);
        let w = Tensor::<f64>::zeros(&[1, 3, 3, 3]);
        assert!(conv2d(&x, &w, None, 1).is_err());
    }
}
