//! Deterministic synthetic clips: panning multi-octave value-noise
//! backgrounds with moving, rotating sprites, rendered with 4x4
//! supersampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::degradation::{degrade_clip, draw_sigma, BlurKernel, Clip, DegradationSpec, Image};
use crate::evaluation::{TestClip, TestSet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Supersampling factor per axis.
pub const SUPERSAMPLE: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Background {
    /// Value noise: `octaves` layers starting at `cell` pixels per lattice
    /// step, each half the size and amplitude of the previous.
    Noise { octaves: usize, cell: f64 },
    /// Linear ramp between two colours along `angle_deg`.
    Gradient { from: [f64; 3], to: [f64; 3], angle_deg: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Disk,
    Square,
    Triangle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sprite {
    pub shape: Shape,
    /// Centre at frame 0, `(y, x)` in pixels.
    pub centre: (f64, f64),
    /// Circumradius in pixels.
    pub radius: f64,
    /// `(dy, dx)` pixels per frame.
    pub velocity: (f64, f64),
    pub angle_deg: f64,
    pub angular_velocity_deg: f64,
    pub colour: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub background: Background,
    /// Background translation `(dy, dx)` pixels per frame.
    pub pan: (f64, f64),
    pub sprites: Vec<Sprite>,
    pub seed: u64,
}

impl Sprite {
    fn centre_at(&self, t: f64) -> (f64, f64) {
        (self.centre.0 + self.velocity.0 * t, self.centre.1 + self.velocity.1 * t)
    }

    /// Whether `(y, x)` lies inside the sprite at frame time `t`.
    pub fn contains(&self, y: f64, x: f64, t: f64) -> bool {
        let (cy, cx) = self.centre_at(t);
        let th = (self.angle_deg + self.angular_velocity_deg * t).to_radians();
        let (dy, dx) = (y - cy, x - cx);
        // Rotate into the sprite frame.
        let u = dx * th.cos() + dy * th.sin();
        let v = -dx * th.sin() + dy * th.cos();
        let r = self.radius;
        match self.shape {
            Shape::Disk => u * u + v * v <= r * r,
            Shape::Square => {
                let half = r / std::f64::consts::SQRT_2;
                u.abs() <= half && v.abs() <= half
            }
            Shape::Triangle => {
                // Equilateral, vertex at angle 0.
                (0..3).all(|i| {
                    let a = (i as f64 * 120.0 + 60.0).to_radians();
                    u * a.cos() + v * a.sin() <= r * 0.5
                })
            }
        }
    }
}

/// Uniform value in `[0, 1)` for one lattice point.
fn lattice(seed: u64, octave: usize, channel: usize, ix: i64, iy: i64) -> f64 {
    let mut z = seed
        ^ (octave as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (channel as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ (ix as u64).wrapping_mul(0x1656_67B1_9E37_79F9)
        ^ (iy as u64).wrapping_mul(0x85EB_CA77_C2B2_AE63);
    // splitmix64 finaliser
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

fn value_noise(seed: u64, octave: usize, channel: usize, y: f64, x: f64) -> f64 {
    let (fy, fx) = (y.floor(), x.floor());
    let (ty, tx) = (smooth(y - fy), smooth(x - fx));
    let (iy, ix) = (fy as i64, fx as i64);
    let v = |dy: i64, dx: i64| lattice(seed, octave, channel, ix + dx, iy + dy);
    let top = v(0, 0) * (1.0 - tx) + v(0, 1) * tx;
    let bottom = v(1, 0) * (1.0 - tx) + v(1, 1) * tx;
    top * (1.0 - ty) + bottom * ty
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.frames == 0 {
            return Err(Error::invalid("scene needs positive size and frame count"));
        }
        if let Background::Noise { octaves, cell } = self.background {
            if octaves == 0 || !(cell > 0.0) {
                return Err(Error::invalid("noise needs at least one octave and a positive cell"));
            }
        }
        let last = (self.frames - 1) as f64;
        for (i, s) in self.sprites.iter().enumerate() {
            for t in [0.0, last] {
                let (cy, cx) = s.centre_at(t);
                if cy - s.radius < 0.0
                    || cx - s.radius < 0.0
                    || cy + s.radius > self.height as f64
                    || cx + s.radius > self.width as f64
                {
                    return Err(Error::invalid(format!(
                        "sprite {i} leaves the canvas by frame {t}"
                    )));
                }
            }
        }
        Ok(())
    }

    fn background_at(&self, y: f64, x: f64, t: f64) -> [f64; 3] {
        let (y, x) = (y - self.pan.0 * t, x - self.pan.1 * t);
        match &self.background {
            Background::Noise { octaves, cell } => {
                let mut lum = 0.0;
                let mut chroma = [0.0; 3];
                let mut amp = 0.5;
                let mut size = *cell;
                let mut norm = 0.0;
                for o in 0..*octaves {
                    lum += amp * value_noise(self.seed, o, 3, y / size, x / size);
                    for (c, ch) in chroma.iter_mut().enumerate() {
                        *ch += amp * value_noise(self.seed, o, c, y / size, x / size);
                    }
                    norm += amp;
                    amp *= 0.5;
                    size *= 0.5;
                }
                let mut out = [0.0; 3];
                for c in 0..3 {
                    out[c] = 0.15 + 0.55 * lum / norm + 0.3 * chroma[c] / norm;
                }
                out
            }
            Background::Gradient { from, to, angle_deg } => {
                let a = angle_deg.to_radians();
                let span = (self.width as f64 * a.cos().abs() + self.height as f64 * a.sin().abs()).max(1.0);
                let s = ((x * a.cos() + y * a.sin()) / span).clamp(0.0, 1.0);
                let mut out = [0.0; 3];
                for c in 0..3 {
                    out[c] = from[c] * (1.0 - s) + to[c] * s;
                }
                out
            }
        }
    }

    fn render_frame(&self, t: usize) -> Image {
        let (h, w) = (self.height, self.width);
        let ss = SUPERSAMPLE;
        let inv = 1.0 / (ss * ss) as f64;
        let tf = t as f64;
        let mut img = Tensor::zeros(&[3, h, w]);
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0; 3];
                for sy in 0..ss {
                    for sx in 0..ss {
                        let py = y as f64 + (sy as f64 + 0.5) / ss as f64;
                        let px = x as f64 + (sx as f64 + 0.5) / ss as f64;
                        let col = self
                            .sprites
                            .iter()
                            .rev()
                            .find(|s| s.contains(py, px, tf))
                            .map(|s| s.colour)
                            .unwrap_or_else(|| self.background_at(py, px, tf));
                        for c in 0..3 {
                            acc[c] += col[c];
                        }
                    }
                }
                for (c, a) in acc.iter().enumerate() {
                    img.data_mut()[(c * h + y) * w + x] = (a * inv).clamp(0.0, 1.0);
                }
            }
        }
        img
    }

    /// Supersampled coverage `[H * W]` of sprite `idx` at frame `t`.
    pub fn sprite_coverage(&self, idx: usize, t: usize) -> Result<Vec<f64>> {
        let s = self
            .sprites
            .get(idx)
            .ok_or_else(|| Error::invalid(format!("no sprite {idx}")))?;
        let ss = SUPERSAMPLE;
        let mut out = vec![0.0; self.height * self.width];
        for y in 0..self.height {
            for x in 0..self.width {
                let mut n = 0;
                for sy in 0..ss {
                    for sx in 0..ss {
                        let py = y as f64 + (sy as f64 + 0.5) / ss as f64;
                        let px = x as f64 + (sx as f64 + 0.5) / ss as f64;
                        n += s.contains(py, px, t as f64) as usize;
                    }
                }
                out[y * self.width + x] = n as f64 / (ss * ss) as f64;
            }
        }
        Ok(out)
    }
}

pub fn render_clip(spec: &SceneSpec) -> Result<Clip> {
    spec.validate()?;
    Clip::new((0..spec.frames).map(|t| spec.render_frame(t)).collect())
}

/// Ranges from which per-clip scenes are drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneTemplate {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub octaves: usize,
    pub cell: f64,
    /// Background pan speed range, pixels per frame.
    pub pan_speed: (f64, f64),
    pub sprite_count: (usize, usize),
    pub sprite_radius: (f64, f64),
    pub sprite_speed: (f64, f64),
    pub max_angular_velocity_deg: f64,
}

impl Default for SceneTemplate {
    fn default() -> Self {
        Self {
            height: 128,
            width: 128,
            frames: 7,
            octaves: 4,
            cell: 24.0,
            pan_speed: (1.0, 6.0),
            sprite_count: (2, 5),
            sprite_radius: (5.0, 14.0),
            sprite_speed: (0.0, 4.0),
            max_angular_velocity_deg: 4.0,
        }
    }
}

fn polar(rng: &mut ChaCha8Rng, speed: (f64, f64)) -> (f64, f64) {
    let s = if speed.1 > speed.0 { rng.gen_range(speed.0..=speed.1) } else { speed.0 };
    let a = rng.gen_range(0.0..std::f64::consts::TAU);
    (s * a.sin(), s * a.cos())
}

/// Draw scene `index` of a dataset.
pub fn sample_scene(template: &SceneTemplate, seed: u64, index: u64) -> Result<SceneSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let (h, w) = (template.height as f64, template.width as f64);
    let last = template.frames.saturating_sub(1) as f64;
    let n = rng.gen_range(template.sprite_count.0..=template.sprite_count.1.max(template.sprite_count.0));
    let mut sprites = Vec::with_capacity(n);
    for _ in 0..n {
        let r = rng.gen_range(template.sprite_radius.0..=template.sprite_radius.1);
        let v = polar(&mut rng, template.sprite_speed);
        let (lo_y, hi_y) = (r + (-v.0 * last).max(0.0), h - r - (v.0 * last).max(0.0));
        let (lo_x, hi_x) = (r + (-v.1 * last).max(0.0), w - r - (v.1 * last).max(0.0));
        if lo_y >= hi_y || lo_x >= hi_x {
            continue;
        }
        let shape = [Shape::Disk, Shape::Square, Shape::Triangle][rng.gen_range(0..3)];
        let av = template.max_angular_velocity_deg;
        sprites.push(Sprite {
            shape,
            centre: (rng.gen_range(lo_y..hi_y), rng.gen_range(lo_x..hi_x)),
            radius: r,
            velocity: v,
            angle_deg: rng.gen_range(0.0..360.0),
            angular_velocity_deg: if av > 0.0 { rng.gen_range(-av..=av) } else { 0.0 },
            colour: [rng.gen(), rng.gen(), rng.gen()],
        });
    }
    Ok(SceneSpec {
        height: template.height,
        width: template.width,
        frames: template.frames,
        background: Background::Noise {
            octaves: template.octaves,
            cell: template.cell,
        },
        pan: polar(&mut rng, template.pan_speed),
        sprites,
        seed: rng.gen(),
    })
}

/// Render `n` clips in memory.
pub fn generate_clips(n: usize, template: &SceneTemplate, seed: u64) -> Result<Vec<Clip>> {
    (0..n as u64)
        .map(|i| render_clip(&sample_scene(template, seed, i)?))
        .collect()
}

/// Degrade each clip with its own Gaussian blur, sigma drawn uniformly from
/// `sigma_range` on a stream fixed by `(seed, clip index)`.
pub fn degraded_testset(
    gt: Vec<Clip>,
    sigma_range: (f64, f64),
    kernel_size: usize,
    scale: usize,
    seed: u64,
) -> Result<TestSet> {
    let clips = gt
        .into_iter()
        .enumerate()
        .map(|(i, gt)| {
            let sigma = draw_sigma(sigma_range.0, sigma_range.1, seed, i as u64);
            let spec = DegradationSpec::new(BlurKernel::gaussian(kernel_size, sigma)?, scale)?;
            Ok(TestClip {
                name: format!("clip_{i:03}"),
                lr: degrade_clip(&gt, &spec)?,
                gt,
                sigma: Some(sigma),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TestSet { scale, clips })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn still_scene() -> SceneSpec {
        SceneSpec {
            height: 24,
            width: 32,
            frames: 3,
            background: Background::Noise { octaves: 2, cell: 8.0 },
            pan: (0.0, 0.0),
            sprites: vec![Sprite {
                shape: Shape::Square,
                centre: (12.0, 10.0),
                radius: 4.0,
                velocity: (0.0, 0.0),
                angle_deg: 10.0,
                angular_velocity_deg: 0.0,
                colour: [1.0, 0.0, 0.0],
            }],
            seed: 5,
        }
    }

    #[test]
    fn still_scene_repeats_frames() {
        let clip = render_clip(&still_scene()).unwrap();
        assert_eq!(clip.frames()[0], clip.frames()[2]);
        assert!(clip.frames()[0].data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn escaping_sprite_rejected() {
        let mut s = still_scene();
        s.sprites[0].velocity = (0.0, 12.0);
        assert!(render_clip(&s).is_err());
    }

    #[test]
    fn sprite_centroid_tracks_velocity() {
        let mut s = still_scene();
        s.sprites[0].shape = Shape::Disk;
        s.sprites[0].velocity = (0.0, 2.0);
        s.frames = 4;
        let centroid = |t| {
            let cov = s.sprite_coverage(0, t).unwrap();
            let mass: f64 = cov.iter().sum();
            let mx: f64 = cov.iter().enumerate().map(|(i, c)| c * ((i % 32) as f64 + 0.5)).sum();
            mx / mass
        };
        for t in 0..3 {
            assert!((centroid(t + 1) - centroid(t) - 2.0).abs() < 0.1);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let t = SceneTemplate {
            height: 16,
            width: 16,
            frames: 2,
            sprite_radius: (2.0, 3.0),
            ..SceneTemplate::default()
        };
        let a = generate_clips(2, &t, 11).unwrap();
        let b = generate_clips(2, &t, 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0], a[1]);
    }
}
