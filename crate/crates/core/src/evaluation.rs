//! PSNR / SSIM, the test-set runner and its report.

use std::fmt::Write as _;
use std::time::Instant;

use serde::Serialize;

use crate::degradation::{bicubic_upscale, crop, Clip, Image};
use crate::error::{Error, Result};
use crate::flow::FlowProvider;
use crate::model::{super_resolve, Bsvsr};
use crate::nn::ParamStore;
use crate::tensor::{Real, Tensor};

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn check_pair(a: &Image, b: &Image) -> Result<(usize, usize, usize)> {
    let d = a.dims3()?;
    if d != b.dims3()? {
        return Err(Error::shape(format!(
            "metric inputs differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(d)
}

/// PSNR over all RGB samples for a peak of 1, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_pair(a, b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP))
}

/// Rec. 601 luma plane.
pub fn luminance(img: &Image) -> Result<Vec<f64>> {
    let (c, h, w) = img.dims3()?;
    if c != 3 {
        return Err(Error::shape(format!("expected 3 channels, got {c}")));
    }
    let d = img.data();
    let n = h * w;
    Ok((0..n)
        .map(|i| 0.299 * d[i] + 0.587 * d[n + i] + 0.114 * d[2 * n + i])
        .collect())
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Valid-region separable filtering of an `h x w` plane.
fn filter_valid(p: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| g[i] * p[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| g[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM on luminance with an 11x11 Gaussian window (sigma 1.5) over
/// the valid region, peak 1.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    let (_, h, w) = check_pair(a, b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let (x, y) = (luminance(a)?, luminance(b)?);
    let g = gaussian_window();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let [mx, my, sxx, syy, sxy] = [&x, &y, &xx, &yy, &xy].map(|p| filter_valid(p, h, w, &g));
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cov + c2))
                / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / mx.len() as f64)
}

/// Drop `border` pixels on every side.
pub fn crop_border(img: &Image, border: usize) -> Result<Image> {
    if border == 0 {
        return Ok(img.clone());
    }
    let (_, h, w) = img.dims3()?;
    if 2 * border >= h || 2 * border >= w {
        return Err(Error::invalid(format!("border {border} too large for {h}x{w}")));
    }
    crop(img, border, border, h - 2 * border, w - 2 * border)
}

/// Something that turns an LR window into the HR centre frame `t` of
/// clip `clip`.
pub trait Restorer {
    fn name(&self) -> &str;
    fn restore(&self, clip: &str, t: usize, window: &[&Image]) -> Result<Image>;
}

/// Bicubic upsampling of the centre frame.
pub struct BicubicBaseline {
    pub scale: usize,
}

impl Restorer for BicubicBaseline {
    fn name(&self) -> &str {
        "bicubic"
    }

    fn restore(&self, _clip: &str, _t: usize, window: &[&Image]) -> Result<Image> {
        let mid = window
            .get(window.len() / 2)
            .ok_or_else(|| Error::invalid("empty window"))?;
        Ok(bicubic_upscale(mid, self.scale)?.map(|v| v.clamp(0.0, 1.0)))
    }
}

/// A trained network plus its flow provider.
pub struct ModelRestorer<'a, T> {
    pub name: String,
    pub model: &'a Bsvsr,
    pub params: &'a ParamStore<T>,
    pub provider: Box<dyn FlowProvider>,
}

impl<T: Real> Restorer for ModelRestorer<'_, T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn restore(&self, _clip: &str, _t: usize, window: &[&Image]) -> Result<Image> {
        super_resolve(self.model, self.params, window, self.provider.as_ref()).map(|(sr, _)| sr)
    }
}

/// Frames already on disk as `<dir>/<clip>/frame_NNNN.png`.
pub struct PredictionDir {
    pub dir: std::path::PathBuf,
}

impl Restorer for PredictionDir {
    fn name(&self) -> &str {
        "predictions"
    }

    fn restore(&self, clip: &str, t: usize, _window: &[&Image]) -> Result<Image> {
        crate::io::read_png(&self.dir.join(clip).join(crate::io::frame_name(t)))
    }
}

/// One LR/GT clip pair of a test set.
#[derive(Clone, Debug)]
pub struct TestClip {
    pub name: String,
    pub gt: Clip,
    pub lr: Clip,
    pub sigma: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TestSet {
    pub scale: usize,
    pub clips: Vec<TestClip>,
}

impl TestSet {
    pub fn validate(&self, frames: usize) -> Result<()> {
        for c in &self.clips {
            let (h, w) = c.lr.dims();
            if c.gt.dims() != (h * self.scale, w * self.scale) {
                return Err(Error::invalid(format!(
                    "clip `{}`: GT {:?} is not {}x the LR {:?}",
                    c.name,
                    c.gt.dims(),
                    self.scale,
                    (h, w)
                )));
            }
            if c.gt.len() != c.lr.len() || c.lr.len() < frames {
                return Err(Error::invalid(format!(
                    "clip `{}` needs at least {frames} matching LR and GT frames",
                    c.name
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    /// Border removed before computing metrics.
    pub crop: usize,
    /// Frames per input window.
    pub frames: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { crop: 0, frames: 5 }
    }
}

/// Scores of one method on one clip, averaged over its evaluated frames.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub method: String,
    pub clip: String,
    pub frames: usize,
    pub psnr: f64,
    pub ssim: f64,
    /// Seconds per frame spent inside `restore`, I/O excluded.
    pub seconds_per_frame: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub crop: usize,
}

/// Frame indices whose whole window lies inside a clip of `len` frames.
pub fn evaluated_frames(len: usize, frames: usize) -> Vec<usize> {
    let r = frames / 2;
    if len < frames {
        return Vec::new();
    }
    (r..len - r).collect()
}

/// Run every restorer (after the bicubic baseline) on each clip.
pub fn evaluate(
    restorers: &[&dyn Restorer],
    testset: &TestSet,
    options: &EvalOptions,
) -> Result<EvalReport> {
    testset.validate(options.frames)?;
    let baseline = BicubicBaseline {
        scale: testset.scale,
    };
    let mut methods: Vec<&dyn Restorer> = vec![&baseline];
    methods.extend_from_slice(restorers);
    let mut rows = Vec::new();
    for method in methods {
        for clip in &testset.clips {
            let ts = evaluated_frames(clip.lr.len(), options.frames);
            let (mut p, mut s, mut secs) = (0.0, 0.0, 0.0);
            for &t in &ts {
                let win: Vec<&Image> = (t - options.frames / 2..=t + options.frames / 2)
                    .map(|i| &clip.lr.frames()[i])
                    .collect();
                let start = Instant::now();
                let out = method.restore(&clip.name, t, &win)?;
                secs += start.elapsed().as_secs_f64();
                let gt = crop_border(&clip.gt.frames()[t], options.crop)?;
                let out = crop_border(&out, options.crop)?;
                p += psnr(&out, &gt)?;
                s += ssim(&out, &gt)?;
            }
            let n = ts.len() as f64;
            rows.push(EvalRow {
                method: method.name().to_string(),
                clip: clip.name.clone(),
                frames: ts.len(),
                psnr: p / n,
                ssim: s / n,
                seconds_per_frame: secs / n,
            });
        }
    }
    Ok(EvalReport {
        rows,
        crop: options.crop,
    })
}

/// Evaluate a model, checking its scale against the test set.
pub fn evaluate_model<T: Real>(
    restorer: &ModelRestorer<'_, T>,
    testset: &TestSet,
    crop: usize,
) -> Result<EvalReport> {
    let cfg = &restorer.model.config;
    if cfg.scale != testset.scale {
        return Err(Error::invalid(format!(
            "model scale {} does not match test set scale {}",
            cfg.scale, testset.scale
        )));
    }
    evaluate(
        &[restorer],
        testset,
        &EvalOptions {
            crop,
            frames: cfg.frames,
        },
    )
}

impl EvalReport {
    pub fn methods(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.method.as_str()) {
                out.push(&r.method);
            }
        }
        out
    }

    /// Unweighted mean over clips of `(psnr, ssim, seconds_per_frame)`.
    pub fn average(&self, method: &str) -> Option<(f64, f64, f64)> {
        let rows: Vec<&EvalRow> = self.rows.iter().filter(|r| r.method == method).collect();
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        let sum = |f: fn(&EvalRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
        Some((sum(|r| r.psnr), sum(|r| r.ssim), sum(|r| r.seconds_per_frame)))
    }

    /// Per-clip rows followed by one `average` row per method.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let fail = |e: csv::Error| Error::Parse(format!("report csv: {e}"));
        for r in &self.rows {
            w.serialize(r).map_err(fail)?;
        }
        for m in self.methods() {
            let (p, s, t) = self.average(m).expect("method has rows");
            let frames = self.rows.iter().filter(|r| r.method == m).map(|r| r.frames).sum();
            w.serialize(EvalRow {
                method: m.to_string(),
                clip: "average".to_string(),
                frames,
                psnr: p,
                ssim: s,
                seconds_per_frame: t,
            })
            .map_err(fail)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Parse(format!("report csv: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Methods as rows, clips as columns, PSNR/SSIM per cell.
    pub fn to_text(&self) -> String {
        let mut clips: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !clips.contains(&r.clip.as_str()) {
                clips.push(&r.clip);
            }
        }
        let mut out = String::new();
        let _ = write!(out, "{:<12}", "method");
        for c in &clips {
            let _ = write!(out, " {:>16}", c);
        }
        let _ = writeln!(out, " {:>16} {:>10}", "average", "s/frame");
        for m in self.methods() {
            let _ = write!(out, "{m:<12}");
            for c in &clips {
                match self.rows.iter().find(|r| r.method == m && r.clip == *c) {
                    Some(r) => {
                        let _ = write!(out, " {:>16}", format!("{:.2}/{:.4}", r.psnr, r.ssim));
                    }
                    None => {
                        let _ = write!(out, " {:>16}", "-");
                    }
                }
            }
            let (p, s, t) = self.average(m).expect("method has rows");
            let _ = writeln!(out, " {:>16} {:>10.4}", format!("{p:.2}/{s:.4}"), t);
        }
        let _ = writeln!(
            out,
            "PSNR on RGB, SSIM on luminance, border crop {} px; timing covers the forward pass only.",
            self.crop
        );
        out
    }
}

/// `bicubic | restored | GT` placed side by side.
pub fn side_by_side(panels: &[&Image]) -> Result<Image> {
    let first = panels.first().ok_or_else(|| Error::invalid("no panels"))?;
    let (c, h, _) = first.dims3()?;
    let mut widths = Vec::new();
    for p in panels {
        let (pc, ph, pw) = p.dims3()?;
        if (pc, ph) != (c, h) {
            return Err(Error::shape("panels must share channels and height"));
        }
        widths.push(pw);
    }
    let total: usize = widths.iter().sum();
    let mut out = Tensor::zeros(&[c, h, total]);
    let mut x0 = 0;
    for (p, &pw) in panels.iter().zip(&widths) {
        for ch in 0..c {
            for y in 0..h {
                let src = &p.data()[(ch * h + y) * pw..(ch * h + y + 1) * pw];
                out.data_mut()[(ch * h + y) * total + x0..][..pw].copy_from_slice(src);
            }
        }
        x0 += pw;
    }
    Ok(out)
}
