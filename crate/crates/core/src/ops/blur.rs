//! Per-sample 2D correlation with a small square kernel shared by all
//! channels, with a configurable boundary policy. Differentiable in both
//! the image and the kernel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    /// Mirror without repeating the edge sample (`-1 -> 1`).
    #[default]
    Reflect,
    /// Repeat the edge sample.
    Replicate,
    /// Zero outside the frame.
    Zero,
    /// Periodic wrap-around.
    Circular,
}

impl Boundary {
    /// Source index for a possibly out-of-range coordinate, `None` for zero fill.
    #[inline]
    pub fn resolve(self, i: isize, n: usize) -> Option<usize> {
        let n_i = n as isize;
        if (0..n_i).contains(&i) {
            return Some(i as usize);
        }
        match self {
            Boundary::Zero => None,
            Boundary::Replicate => Some(i.clamp(0, n_i - 1) as usize),
            Boundary::Circular => Some(i.rem_euclid(n_i) as usize),
            Boundary::Reflect => {
                if n == 1 {
                    return Some(0);
                }
                let period = 2 * (n_i - 1);
                let m = i.rem_euclid(period);
                Some(if m < n_i { m } else { period - m } as usize)
            }
        }
    }
}

impl std::str::FromStr for Boundary {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reflect" => Ok(Boundary::Reflect),
            "replicate" => Ok(Boundary::Replicate),
            "zero" => Ok(Boundary::Zero),
            "circular" => Ok(Boundary::Circular),
            other => Err(Error::invalid(format!("unknown boundary mode `{other}`"))),
        }
    }
}

fn check<T: Real>(x: &Tensor<T>, kernel: &Tensor<T>) -> Result<(usize, usize, usize, usize, usize)> {
    let (n, c, h, w) = x.dims4()?;
    let (kn, kh, kw) = kernel.dims3()?;
    if kn != n || kh != kw || kh % 2 == 0 {
        return Err(Error::shape(format!(
            "kernel stack {:?} does not match batch {n} (odd square kernels)",
            kernel.shape()
        )));
    }
    if kh > h || kh > w {
        return Err(Error::invalid(format!(
            "kernel {kh}x{kh} larger than frame {h}x{w}"
        )));
    }
    Ok((n, c, h, w, kh))
}

fn index_tables(h: usize, w: usize, k: usize, boundary: Boundary) -> (Vec<Option<usize>>, Vec<Option<usize>>) {
    let r = (k / 2) as isize;
    let ys = (0..h + k - 1)
        .map(|i| boundary.resolve(i as isize - r, h))
        .collect();
    let xs = (0..w + k - 1)
        .map(|i| boundary.resolve(i as isize - r, w))
        .collect();
    (ys, xs)
}

fn padded<T: Real>(plane: &[T], w: usize, ys: &[Option<usize>], xs: &[Option<usize>]) -> Vec<T> {
    let pw = xs.len();
    let mut out = vec![T::zero(); ys.len() * pw];
    for (py, sy) in ys.iter().enumerate() {
        let Some(sy) = sy else { continue };
        for (px, sx) in xs.iter().enumerate() {
            if let Some(sx) = sx {
                out[py * pw + px] = plane[sy * w + sx];
            }
        }
    }
    out
}

/// `out[n, c](y, x) = sum_{i, j} kernel[n](i, j) * x[n, c](y + i - r, x + j - r)`.
pub fn blur<T: Real>(x: &Tensor<T>, kernel: &Tensor<T>, boundary: Boundary) -> Result<Tensor<T>> {
    let (n, c, h, w, k) = check(x, kernel)?;
    let (ys, xs) = index_tables(h, w, k, boundary);
    let pw = w + k - 1;
    let hw = h * w;
    let mut out = Tensor::zeros(x.shape());
    for s in 0..n {
        let ker = &kernel.data()[s * k * k..(s + 1) * k * k];
        for ch in 0..c {
            let base = (s * c + ch) * hw;
            let pad = padded(&x.data()[base..base + hw], w, &ys, &xs);
            let dst = &mut out.data_mut()[base..base + hw];
            for i in 0..k {
                for j in 0..k {
                    let kv = ker[i * k + j];
                    if kv == T::zero() {
                        continue;
                    }
                    for y in 0..h {
                        let src = &pad[(y + i) * pw + j..(y + i) * pw + j + w];
                        for (d, &v) in dst[y * w..(y + 1) * w].iter_mut().zip(src) {
                            *d += kv * v;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`blur`]: `(dx if requested, dkernel)`.
pub fn blur_backward<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    boundary: Boundary,
    grad_out: &Tensor<T>,
    need_dx: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>)> {
    let (n, c, h, w, k) = check(x, kernel)?;
    x.expect_same_shape(grad_out)?;
    let (ys, xs) = index_tables(h, w, k, boundary);
    let pw = w + k - 1;
    let hw = h * w;
    let mut dk = Tensor::zeros(kernel.shape());
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    for s in 0..n {
        let ker = &kernel.data()[s * k * k..(s + 1) * k * k];
        for ch in 0..c {
            let base = (s * c + ch) * hw;
            let pad = padded(&x.data()[base..base + hw], w, &ys, &xs);
            let g = &grad_out.data()[base..base + hw];
            let mut dpad = vec![T::zero(); if need_dx { pad.len() } else { 0 }];
            for i in 0..k {
                for j in 0..k {
                    let mut acc = T::zero();
                    for y in 0..h {
                        let src = &pad[(y + i) * pw + j..(y + i) * pw + j + w];
                        let gr = &g[y * w..(y + 1) * w];
                        acc += src.iter().zip(gr).fold(T::zero(), |a, (&u, &v)| a + u * v);
                    }
                    dk.data_mut()[s * k * k + i * k + j] += acc;
                    if need_dx {
                        let kv = ker[i * k + j];
                        for y in 0..h {
                            let dst = &mut dpad[(y + i) * pw + j..(y + i) * pw + j + w];
                            for (d, &v) in dst.iter_mut().zip(&g[y * w..(y + 1) * w]) {
                                *d += kv * v;
                            }
                        }
                    }
                }
            }
            if let Some(dx) = dx.as_mut() {
                let dst = &mut dx.data_mut()[base..base + hw];
                for (py, sy) in ys.iter().enumerate() {
                    let Some(sy) = sy else { continue };
                    for (px, sx) in xs.iter().enumerate() {
                        if let Some(sx) = sx {
                            dst[sy * w + sx] += dpad[py * pw + px];
                        }
                    }
                }
            }
        }
    }
    Ok((dx, dk))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_indices() {
        let b = Boundary::Reflect;
        assert_eq!(b.resolve(-1, 5), Some(1));
        assert_eq!(b.resolve(-2, 5), Some(2));
        assert_eq!(b.resolve(5, 5), Some(3));
        assert_eq!(b.resolve(6, 5), Some(2));
        assert_eq!(Boundary::Circular.resolve(-1, 5), Some(4));
        assert_eq!(Boundary::Zero.resolve(5, 5), None);
        assert_eq!(Boundary::Replicate.resolve(-3, 5), Some(0));
    }
}
