//! Separable resampling (bicubic / bilinear) expressed as sparse per-axis
//! weight matrices, so the same maps drive the forward pass, the adjoint,
//! and the degradation pipeline.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Keys cubic convolution parameter.
pub const CUBIC_A: f64 = -0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Filter {
    /// Keys cubic with `a = -0.5`.
    Bicubic,
    /// Triangle filter.
    Bilinear,
}

pub fn cubic(x: f64) -> f64 {
    let a = CUBIC_A;
    let x = x.abs();
    if x <= 1.0 {
        (a + 2.0) * x * x * x - (a + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        a * x * x * x - 5.0 * a * x * x + 8.0 * a * x - 4.0 * a
    } else {
        0.0
    }
}

pub fn triangle(x: f64) -> f64 {
    (1.0 - x.abs()).max(0.0)
}

impl Filter {
    fn eval(self, x: f64) -> f64 {
        match self {
            Filter::Bicubic => cubic(x),
            Filter::Bilinear => triangle(x),
        }
    }

    fn support(self) -> f64 {
        match self {
            Filter::Bicubic => 2.0,
            Filter::Bilinear => 1.0,
        }
    }
}

/// Weights mapping `n_in` samples to `n_out` samples along one axis.
#[derive(Clone, Debug, PartialEq)]
pub struct AxisMap {
    pub n_in: usize,
    pub n_out: usize,
    pub taps: Vec<Vec<(usize, f64)>>,
}

impl AxisMap {
    /// Half-pixel-centred mapping. When `antialias` is set and the axis
    /// shrinks, the filter is stretched by the inverse scale and
    /// renormalised over the in-range taps; otherwise taps are clamped to
    /// the edge.
    pub fn new(filter: Filter, n_in: usize, n_out: usize, antialias: bool) -> Result<Self> {
        if n_in == 0 || n_out == 0 {
            return Err(Error::invalid(format!(
                "resample sizes must be positive, got {n_in} -> {n_out}"
            )));
        }
        let scale = n_out as f64 / n_in as f64;
        let mut taps = Vec::with_capacity(n_out);
        for i in 0..n_out {
            let mut center = (i as f64 + 0.5) / scale - 0.5;
            let mut row: Vec<(usize, f64)> = Vec::new();
            if antialias && scale < 1.0 {
                let support = filter.support() / scale;
                let lo = (center - support).floor() as isize;
                let hi = (center + support).ceil() as isize;
                let mut total = 0.0;
                for j in lo..=hi {
                    if j < 0 || j >= n_in as isize {
                        continue;
                    }
                    let wgt = filter.eval((j as f64 - center) * scale);
                    if wgt != 0.0 {
                        row.push((j as usize, wgt));
                        total += wgt;
                    }
                }
                for t in row.iter_mut() {
                    t.1 /= total;
                }
            } else {
                if filter == Filter::Bilinear && center < 0.0 {
                    center = 0.0;
                }
                let base = center.floor() as isize;
                let reach = filter.support() as isize;
                for j in (base - reach + 1)..=(base + reach) {
                    let wgt = filter.eval(j as f64 - center);
                    if wgt == 0.0 {
                        continue;
                    }
                    let idx = j.clamp(0, n_in as isize - 1) as usize;
                    match row.iter_mut().find(|t| t.0 == idx) {
                        Some(t) => t.1 += wgt,
                        None => row.push((idx, wgt)),
                    }
                }
            }
            taps.push(row);
        }
        Ok(Self { n_in, n_out, taps })
    }
}

/// A 2D separable resampler `out = R_h * X * R_w^T` per plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Resampler {
    pub rows: AxisMap,
    pub cols: AxisMap,
}

impl Resampler {
    pub fn new(
        filter: Filter,
        in_hw: (usize, usize),
        out_hw: (usize, usize),
        antialias: bool,
    ) -> Result<Self> {
        Ok(Self {
            rows: AxisMap::new(filter, in_hw.0, out_hw.0, antialias)?,
            cols: AxisMap::new(filter, in_hw.1, out_hw.1, antialias)?,
        })
    }

    /// Integer-factor upsampling.
    pub fn upscale(filter: Filter, in_hw: (usize, usize), factor: usize) -> Result<Self> {
        Self::new(filter, in_hw, (in_hw.0 * factor, in_hw.1 * factor), false)
    }

    /// Integer-factor downsampling; dims must divide.
    pub fn downscale(
        filter: Filter,
        in_hw: (usize, usize),
        factor: usize,
        antialias: bool,
    ) -> Result<Self> {
        if factor == 0 || in_hw.0 % factor != 0 || in_hw.1 % factor != 0 {
            return Err(Error::invalid(format!(
                "{}x{} not divisible by {factor}",
                in_hw.0, in_hw.1
            )));
        }
        Self::new(
            filter,
            in_hw,
            (in_hw.0 / factor, in_hw.1 / factor),
            antialias,
        )
    }

    pub fn out_hw(&self) -> (usize, usize) {
        (self.rows.n_out, self.cols.n_out)
    }

    pub fn in_hw(&self) -> (usize, usize) {
        (self.rows.n_in, self.cols.n_in)
    }

    fn planes<T: Real>(&self, x: &Tensor<T>) -> Result<(Vec<usize>, usize)> {
        let shape = x.shape();
        if shape.len() < 2 {
            return Err(Error::shape("resample needs at least 2 dims"));
        }
        let r = shape.len();
        if (shape[r - 2], shape[r - 1]) != self.in_hw() {
            return Err(Error::shape(format!(
                "resampler built for {:?}, got {:?}",
                self.in_hw(),
                shape
            )));
        }
        let lead = shape[..r - 2].to_vec();
        let planes = lead.iter().product();
        Ok((lead, planes))
    }

    /// Apply to every trailing `H x W` plane of `x`.
    pub fn apply<T: Real>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (lead, planes) = self.planes(x)?;
        let (h, w) = self.in_hw();
        let (oh, ow) = self.out_hw();
        let mut shape = lead;
        shape.extend([oh, ow]);
        let mut out = Tensor::zeros(&shape);
        let mut tmp = vec![T::zero(); h * ow];
        let cols: Vec<Vec<(usize, T)>> = convert(&self.cols.taps);
        let rows: Vec<Vec<(usize, T)>> = convert(&self.rows.taps);
        for p in 0..planes {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            for y in 0..h {
                let line = &src[y * w..(y + 1) * w];
                for (ox, taps) in cols.iter().enumerate() {
                    tmp[y * ow + ox] = taps.iter().fold(T::zero(), |a, &(j, wt)| a + wt * line[j]);
                }
            }
            let dst = &mut out.data_mut()[p * oh * ow..(p + 1) * oh * ow];
            for (oy, taps) in rows.iter().enumerate() {
                let o = &mut dst[oy * ow..(oy + 1) * ow];
                for &(j, wt) in taps {
                    let t = &tmp[j * ow..(j + 1) * ow];
                    for (a, &b) in o.iter_mut().zip(t) {
                        *a += wt * b;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Adjoint of [`Resampler::apply`].
    pub fn apply_transpose<T: Real>(&self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = g.shape();
        let r = shape.len();
        if r < 2 || (shape[r - 2], shape[r - 1]) != self.out_hw() {
            return Err(Error::shape("resample adjoint shape mismatch"));
        }
        let (h, w) = self.in_hw();
        let (oh, ow) = self.out_hw();
        let planes: usize = shape[..r - 2].iter().product();
        let mut out_shape = shape[..r - 2].to_vec();
        out_shape.extend([h, w]);
        let mut out = Tensor::zeros(&out_shape);
        let mut tmp = vec![T::zero(); h * ow];
        let cols: Vec<Vec<(usize, T)>> = convert(&self.cols.taps);
        let rows: Vec<Vec<(usize, T)>> = convert(&self.rows.taps);
        for p in 0..planes {
            let src = &g.data()[p * oh * ow..(p + 1) * oh * ow];
            tmp.fill(T::zero());
            for (oy, taps) in rows.iter().enumerate() {
                let s = &src[oy * ow..(oy + 1) * ow];
                for &(j, wt) in taps {
                    let t = &mut tmp[j * ow..(j + 1) * ow];
                    for (a, &b) in t.iter_mut().zip(s) {
                        *a += wt * b;
                    }
                }
            }
            let dst = &mut out.data_mut()[p * h * w..(p + 1) * h * w];
            for y in 0..h {
                let line = &mut dst[y * w..(y + 1) * w];
                for (ox, taps) in cols.iter().enumerate() {
                    let v = tmp[y * ow + ox];
                    for &(j, wt) in taps {
                        line[j] += wt * v;
                    }
                }
            }
        }
        Ok(out)
    }
}

fn convert<T: Real>(taps: &[Vec<(usize, f64)>]) -> Vec<Vec<(usize, T)>> {
    taps.iter()
        .map(|row| row.iter().map(|&(j, w)| (j, T::lit(w))).collect())
        .collect()
}
