//! PNG frames, clip directories and the dataset manifest.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::degradation::{Clip, Image};
use crate::error::{Error, Result};
use crate::evaluation::{TestClip, TestSet};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";

fn png_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Png {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Decode any 8/16-bit gray, gray-alpha, RGB or RGBA PNG into `[3, H, W]`.
pub fn read_png(path: &Path) -> Result<Image> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| png_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| png_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = info.color_type.samples();
    let wide = info.bit_depth == png::BitDepth::Sixteen;
    let sample = |i: usize| -> f64 {
        if wide {
            u16::from_be_bytes([buf[2 * i], buf[2 * i + 1]]) as f64 / 65535.0
        } else {
            buf[i] as f64 / 255.0
        }
    };
    let mut out = Tensor::zeros(&[3, h, w]);
    let plane = h * w;
    for p in 0..plane {
        let base = p * channels;
        for c in 0..3 {
            let v = match channels {
                1 | 2 => sample(base),
                _ => sample(base + c),
            };
            out.data_mut()[c * plane + p] = v;
        }
    }
    Ok(out)
}

/// Write an 8-bit RGB PNG, clamping to `[0, 1]`.
pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    let (c, h, w) = img.dims3()?;
    if c != 3 {
        return Err(Error::shape(format!("expected 3 channels, got {c}")));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
    let plane = h * w;
    let d = img.data();
    let mut bytes = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        for ch in 0..3 {
            bytes.push((d[ch * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    writer.write_image_data(&bytes).map_err(|e| png_err(path, e))?;
    writer.finish().map_err(|e| png_err(path, e))
}

pub fn frame_name(t: usize) -> String {
    format!("frame_{t:04}.png")
}

pub fn write_clip(dir: &Path, clip: &Clip) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (t, f) in clip.frames().iter().enumerate() {
        write_png(&dir.join(frame_name(t)), f)?;
    }
    Ok(())
}

/// Every `*.png` in `dir`, in file-name order.
pub fn read_clip(dir: &Path) -> Result<Clip> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::invalid(format!("no PNG frames in {}", dir.display())));
    }
    let frames = paths.iter().map(|p| read_png(p)).collect::<Result<Vec<_>>>()?;
    Clip::new(frames)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipEntry {
    pub name: String,
    /// Directory of GT frames, relative to the manifest.
    pub gt: Option<String>,
    /// Directory of LR frames, relative to the manifest.
    pub lr: Option<String>,
    pub sigma: Option<f64>,
    pub kernel_size: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    /// Downsampling factor between GT and LR, once LR frames exist.
    pub scale: Option<usize>,
    pub seed: Option<u64>,
    pub clips: Vec<ClipEntry>,
}

impl DatasetManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

/// Write GT clips as `gt/<name>/frame_NNNN.png` plus a manifest.
pub fn write_dataset(dir: &Path, clips: &[Clip], seed: Option<u64>) -> Result<DatasetManifest> {
    let mut manifest = DatasetManifest {
        scale: None,
        seed,
        clips: Vec::new(),
    };
    for (i, clip) in clips.iter().enumerate() {
        let name = format!("clip_{i:03}");
        let rel = format!("gt/{name}");
        write_clip(&dir.join(&rel), clip)?;
        manifest.clips.push(ClipEntry {
            name,
            gt: Some(rel),
            lr: None,
            sigma: None,
            kernel_size: None,
        });
    }
    manifest.save(dir)?;
    Ok(manifest)
}

/// All GT clips listed in the manifest.
pub fn read_gt_clips(dir: &Path) -> Result<Vec<Clip>> {
    let manifest = DatasetManifest::load(dir)?;
    manifest
        .clips
        .iter()
        .map(|c| {
            let rel = c
                .gt
                .as_ref()
                .ok_or_else(|| Error::invalid(format!("clip `{}` has no GT frames", c.name)))?;
            read_clip(&dir.join(rel))
        })
        .collect()
}

/// Clips that have both GT and LR frames.
pub fn read_testset(dir: &Path) -> Result<TestSet> {
    let manifest = DatasetManifest::load(dir)?;
    let scale = manifest
        .scale
        .ok_or_else(|| Error::invalid(format!("{} has no LR frames; run degrade first", dir.display())))?;
    let mut clips = Vec::new();
    for c in &manifest.clips {
        let (Some(gt), Some(lr)) = (&c.gt, &c.lr) else {
            return Err(Error::invalid(format!("clip `{}` lacks GT or LR frames", c.name)));
        };
        clips.push(TestClip {
            name: c.name.clone(),
            gt: read_clip(&dir.join(gt))?,
            lr: read_clip(&dir.join(lr))?,
            sigma: c.sigma,
        });
    }
    Ok(TestSet { scale, clips })
}
