//! End-to-end acceptance suite. Each criterion prints one PASS/FAIL line;
//! the process exits non-zero if any criterion fails.

use std::cell::RefCell;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config as PtConfig, RngAlgorithm, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;

use bsvsr::degradation::{
    bicubic_resize, bicubic_upscale, blur_frame, degrade_clip, BlurKernel, Clip, DegradationSpec, Image,
};
use bsvsr::evaluation::{evaluate, evaluate_model, psnr, EvalOptions, EvalReport, ModelRestorer, TestSet};
use bsvsr::flow::ZeroFlow;
use bsvsr::fusion::DaFusion;
use bsvsr::graph::Graph;
use bsvsr::kernel_estimation::{estimate_kernel, fft_deconvolve, wiener_deconvolve_circular};
use bsvsr::model::{count_params, Bsvsr, ModelConfig};
use bsvsr::nn::{ParamBuilder, ParamStore};
use bsvsr::ops::blur::Boundary;
use bsvsr::synthetic::{degraded_testset, generate_clips, SceneTemplate};
use bsvsr::training::{train, Checkpoint, LogRow, Phase, TrainConfig};
use bsvsr::transform::{pst_branch, TransformBlock};
use bsvsr::Tensor;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn runner(cases: u32) -> TestRunner {
    TestRunner::new_with_rng(
        PtConfig {
            failure_persistence: None,
            ..PtConfig::with_cases(cases)
        },
        TestRng::deterministic_rng(RngAlgorithm::ChaCha),
    )
}

fn seeded_cases(cases: u32, f: impl FnMut(u64) -> Result<(), String>) -> Result<(), String> {
    let f = RefCell::new(f);
    runner(cases)
        .run(&any::<u64>(), |seed| (f.borrow_mut())(seed).map_err(TestCaseError::fail))
        .map_err(|e| e.to_string())
}

fn rand_image(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Image {
    Tensor::from_fn(&[c, h, w], |_| rng.gen::<f64>())
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Brute-force references.

fn reflect(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

fn blur_oracle(img: &Image, k: &BlurKernel) -> Image {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let s = k.size();
    let r = (s / 2) as isize;
    let mut out = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for i in 0..s {
                    for j in 0..s {
                        let yy = reflect(y as isize + i as isize - r, h);
                        let xx = reflect(x as isize + j as isize - r, w);
                        acc += k.at(i, j) * img.data()[(ch * h + yy) * w + xx];
                    }
                }
                out.data_mut()[(ch * h + y) * w + x] = acc;
            }
        }
    }
    out
}

fn keys(x: f64) -> f64 {
    let a = -0.5;
    let x = x.abs();
    if x < 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Dense weight matrix `[n_out][n_in]` of one axis.
fn cubic_weights(n_in: usize, n_out: usize) -> Vec<Vec<f64>> {
    let ratio = n_out as f64 / n_in as f64;
    (0..n_out)
        .map(|o| {
            let centre = (o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5;
            let mut row = vec![0.0; n_in];
            if ratio < 1.0 {
                for (j, r) in row.iter_mut().enumerate() {
                    *r = keys((j as f64 - centre) * ratio);
                }
                let total: f64 = row.iter().sum();
                row.iter_mut().for_each(|r| *r /= total);
            } else {
                let base = centre.floor() as isize;
                for j in base - 1..=base + 2 {
                    let idx = j.clamp(0, n_in as isize - 1) as usize;
                    row[idx] += keys(j as f64 - centre);
                }
            }
            row
        })
        .collect()
}

fn resize_oracle(img: &Image, oh: usize, ow: usize) -> Image {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let wy = cubic_weights(h, oh);
    let wx = cubic_weights(w, ow);
    let mut out = Tensor::zeros(&[c, oh, ow]);
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = 0.0;
                for i in 0..h {
                    for j in 0..w {
                        acc += wy[y][i] * wx[x][j] * img.data()[(ch * h + i) * w + j];
                    }
                }
                out.data_mut()[(ch * oh + y) * ow + x] = acc;
            }
        }
    }
    out
}

/// Zero-padded bilinear sample of one plane.
fn bilinear_oracle(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let at = |yy: f64, xx: f64| -> f64 {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0.0
        } else {
            plane[yy as usize * w + xx as usize]
        }
    };
    (1.0 - fy) * (1.0 - fx) * at(y0, x0)
        + (1.0 - fy) * fx * at(y0, x0 + 1.0)
        + fy * (1.0 - fx) * at(y0 + 1.0, x0)
        + fy * fx * at(y0 + 1.0, x0 + 1.0)
}

/// Zero-padded "same" convolution, stride 1, odd square kernel.
fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>) -> Tensor<f64> {
    let s = x.shape();
    let (n, ci, h, wd) = (s[0], s[1], s[2], s[3]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let r = (k / 2) as isize;
    let mut out = Tensor::zeros(&[n, co, h, wd]);
    for b_i in 0..n {
        for o in 0..co {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = b.map_or(0.0, |b| b.data()[o]);
                    for c in 0..ci {
                        for i in 0..k {
                            for j in 0..k {
                                let yy = y as isize + i as isize - r;
                                let xs = xx as isize + j as isize - r;
                                if yy < 0 || xs < 0 || yy >= h as isize || xs >= wd as isize {
                                    continue;
                                }
                                acc += w.data()[((o * ci + c) * k + i) * k + j]
                                    * x.data()[((b_i * ci + c) * h + yy as usize) * wd + xs as usize];
                            }
                        }
                    }
                    out.data_mut()[((b_i * co + o) * h + y) * wd + xx] = acc;
                }
            }
        }
    }
    out
}

fn dft2(data: &[Complex<f64>], h: usize, w: usize) -> Vec<Complex<f64>> {
    let tau = std::f64::consts::TAU;
    let mut out = vec![Complex::new(0.0, 0.0); h * w];
    for u in 0..h {
        for v in 0..w {
            let mut acc = Complex::new(0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let ang = -tau * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                    acc += data[y * w + x] * Complex::from_polar(1.0, ang);
                }
            }
            out[u * w + v] = acc;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Criteria.

fn degradation_oracles() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    seeded_cases(100, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let size = 2 * rng.gen_range(0..=3) + 1;
        let (c, h, w) = (rng.gen_range(1..=3), rng.gen_range(size..=9), rng.gen_range(size..=9));
        let k = BlurKernel::from_values(size, (0..size * size).map(|_| rng.gen::<f64>() + 1e-3).collect())
            .map_err(|e| e.to_string())?;
        let img = rand_image(&mut rng, c, h, w);
        let got = blur_frame(&img, &k, Boundary::Reflect).map_err(|e| e.to_string())?;
        let d = max_diff(got.data(), blur_oracle(&img, &k).data());
        worst = worst.max(d);
        ensure(d < 1e-5, format!("blur {c}x{h}x{w} k{size}: {d:e}"))
    })?;
    let factors = [(1, 1), (1, 2), (1, 3), (1, 4), (2, 1), (3, 1), (4, 1), (2, 3), (3, 2)];
    seeded_cases(100, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (num, den) = factors[rng.gen_range(0..factors.len())];
        let (h, w) = (den * rng.gen_range(1..=6), den * rng.gen_range(1..=6));
        let c = rng.gen_range(1..=3);
        let img = rand_image(&mut rng, c, h, w);
        let got = bicubic_resize(&img, num, den).map_err(|e| e.to_string())?;
        let d = max_diff(got.data(), resize_oracle(&img, h * num / den, w * num / den).data());
        worst = worst.max(d);
        ensure(d < 1e-5, format!("resize {h}x{w} by {num}/{den}: {d:e}"))
    })?;
    seeded_cases(100, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = rng.gen_range(1..=4);
        let size = 2 * rng.gen_range(0..=3) + 1;
        let least = usize::div_ceil(size, scale);
        let (h, w) = (scale * rng.gen_range(least..=least + 4), scale * rng.gen_range(least..=least + 4));
        let frames: Vec<Image> = (0..rng.gen_range(1..=3)).map(|_| rand_image(&mut rng, 3, h, w)).collect();
        let sigma = rng.gen_range(0.2..2.5);
        let spec = BlurKernel::gaussian(size, sigma)
            .and_then(|k| DegradationSpec::new(k, scale))
            .map_err(|e| e.to_string())?;
        let clip = Clip::new(frames.clone()).map_err(|e| e.to_string())?;
        let got = degrade_clip(&clip, &spec).map_err(|e| e.to_string())?;
        ensure(got.len() == frames.len(), "frame count changed")?;
        for (f, g) in frames.iter().zip(got.frames()) {
            let expect = resize_oracle(&blur_oracle(f, &spec.kernel), h / scale, w / scale);
            let d = max_diff(g.data(), expect.data());
            worst = worst.max(d);
            ensure(d < 1e-5, format!("degrade {h}x{w} s{scale}: {d:e}"))?;
        }
        Ok(())
    })?;
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, format!("took {secs:.1} s"))?;
    Ok(format!("3x100 cases, max diff {worst:.1e}, {secs:.1} s"))
}

/// Smooth and periodic on the frame so circular blur has no seam.
fn periodic_texture(h: usize, w: usize) -> Image {
    let tau = std::f64::consts::TAU;
    Tensor::from_fn(&[3, h, w], |i| {
        let ch = (i / (h * w)) as f64;
        let y = ((i / w) % h) as f64 / h as f64;
        let x = (i % w) as f64 / w as f64;
        0.5 + 0.25 * (tau * 3.0 * x + ch).sin() * (tau * 2.0 * y - ch).cos() + 0.1 * (tau * (x + 4.0 * y)).sin()
    })
}

fn wiener_recovery() -> Outcome {
    let (h, w) = (32, 32);
    let eps = 1e-3;
    let img = periodic_texture(h, w);
    let k = BlurKernel::gaussian(13, 1.2).map_err(|e| e.to_string())?;
    let blurred = blur_frame(&img, &k, Boundary::Circular).map_err(|e| e.to_string())?;
    let rec = fft_deconvolve(&blurred, &k, eps).map_err(|e| e.to_string())?;
    let p = psnr(&rec, &img).map_err(|e| e.to_string())?;
    let blurred_p = psnr(&blurred, &img).map_err(|e| e.to_string())?;

    // Attenuation identity on the torus: rec^ = |H|^2 / (|H|^2 + eps) * x^.
    let circ = wiener_deconvolve_circular(&blurred, &k, eps).map_err(|e| e.to_string())?;
    let r = (k.size() / 2) as isize;
    let mut kimg = vec![Complex::new(0.0, 0.0); h * w];
    for i in 0..k.size() {
        for j in 0..k.size() {
            let y = (r - i as isize).rem_euclid(h as isize) as usize;
            let x = (r - j as isize).rem_euclid(w as isize) as usize;
            kimg[y * w + x].re += k.at(i, j);
        }
    }
    let hf = dft2(&kimg, h, w);
    let plane = |t: &Image| -> Vec<Complex<f64>> { t.data()[..h * w].iter().map(|&v| Complex::new(v, 0.0)).collect() };
    let xf = dft2(&plane(&img), h, w);
    let rf = dft2(&plane(&circ), h, w);
    let n = (h * w) as f64;
    let mut worst = 0.0f64;
    for i in 0..h * w {
        let gain = hf[i].norm_sqr() / (hf[i].norm_sqr() + eps);
        worst = worst.max((rf[i] - xf[i] * gain).norm() / n);
    }
    ensure(p > 40.0, format!("PSNR {p:.2} dB (blurred {blurred_p:.2} dB)"))?;
    ensure(worst < 1e-5, format!("attenuation identity off by {worst:e}"))?;
    Ok(format!("PSNR {p:.2} dB (blurred {blurred_p:.2} dB), identity error {worst:.1e}"))
}

fn deformable_equivalence() -> Outcome {
    let mut worst = 0.0f64;
    seeded_cases(100, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, ci, co) = (rng.gen_range(1..=2), rng.gen_range(1..=4), rng.gen_range(1..=4));
        let (h, w) = (rng.gen_range(1..=7), rng.gen_range(1..=7));
        let x = rand_t(&mut rng, &[n, ci, h, w], -1.0, 1.0);
        let wt = rand_t(&mut rng, &[co, ci, 3, 3], -1.0, 1.0);
        let b = rand_t(&mut rng, &[co], -1.0, 1.0);
        let off = Tensor::zeros(&[n, 18, h, w]);
        let got = bsvsr::alignment::deformable_sample(&x, &off, &wt, Some(&b)).map_err(|e| e.to_string())?;
        let d = max_diff(got.data(), conv_oracle(&x, &wt, Some(&b)).data());
        worst = worst.max(d);
        ensure(d < 1e-5, format!("{n}x{ci}->{co} {h}x{w}: {d:e}"))
    })?;
    Ok(format!("100 cases, max diff {worst:.1e}"))
}

/// Offsets whose fractional part stays away from the bilinear kinks.
fn safe_offsets(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-2..=1) as f64 + rng.gen_range(0.6..0.9))
}

/// Compare graph gradients of `mean(f(inputs) * r)` with central differences.
fn gradcheck(
    name: &str,
    inputs: Vec<Tensor<f64>>,
    f: &dyn Fn(&mut Graph<'_, f64>, &[bsvsr::graph::Var]) -> bsvsr::Result<bsvsr::graph::Var>,
) -> Result<f64, String> {
    let store = ParamStore::<f64>::new();
    let objective = |ins: &[Tensor<f64>]| -> Result<(f64, Vec<Tensor<f64>>), String> {
        let mut g = Graph::new(&store);
        let vars: Vec<_> = ins.iter().map(|t| g.input(t.clone())).collect();
        let y = f(&mut g, &vars).map_err(|e| e.to_string())?;
        let shape = g.shape(y).to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let r = g.constant(Tensor::from_fn(&shape, |_| rng.gen_range(-1.0..1.0)));
        let prod = g.mul(y, r).map_err(|e| e.to_string())?;
        let numel: usize = shape.iter().product();
        let flat = g.reshape(prod, &[1, 1, 1, numel]).map_err(|e| e.to_string())?;
        let loss = g.global_avg_pool(flat).map_err(|e| e.to_string())?;
        let grads = g.backward(loss).map_err(|e| e.to_string())?;
        let gs = vars
            .iter()
            .zip(ins)
            .map(|(&v, t)| grads.of(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Ok((g.scalar(loss), gs))
    };
    let (_, analytic) = objective(&inputs)?;
    let step = 1e-6;
    let mut worst = 0.0f64;
    for (ii, input) in inputs.iter().enumerate() {
        for e in 0..input.numel() {
            let mut plus = inputs.clone();
            plus[ii].data_mut()[e] += step;
            let mut minus = inputs.clone();
            minus[ii].data_mut()[e] -= step;
            let numeric = (objective(&plus)?.0 - objective(&minus)?.0) / (2.0 * step);
            let a = analytic[ii].data()[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
            ensure(
                rel < 1e-3,
                format!("{name}: input {ii} element {e}: analytic {a:e} numeric {numeric:e}"),
            )?;
        }
    }
    Ok(worst)
}

fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (n, c, h, w) = (1, 2, 5, 5);

    let deform = gradcheck(
        "deformable_sample",
        vec![
            rand_t(&mut rng, &[n, c, h, w], -1.0, 1.0),
            safe_offsets(&mut rng, &[n, 18, h, w]),
            rand_t(&mut rng, &[2, c, 3, 3], -1.0, 1.0),
            rand_t(&mut rng, &[2], -1.0, 1.0),
        ],
        &|g, v| g.deform_conv(v[0], v[1], v[2], Some(v[3])),
    )?;

    let warp = gradcheck(
        "warp",
        vec![
            rand_t(&mut rng, &[n, c, h, w], -1.0, 1.0),
            safe_offsets(&mut rng, &[n, 2, h, w]),
        ],
        &|g, v| g.warp(v[0], v[1]),
    )?;

    let layout = bsvsr::ops::attention::AttnLayout {
        heads: 2,
        levels: 2,
        sources: 3,
        grid: 3,
        channels: 4,
    };
    let a = layout.weights();
    let (ah, aw) = (4, 4);
    let attn = gradcheck(
        "deformable_attention",
        vec![
            rand_t(&mut rng, &[n, 3 * layout.channels, ah, aw], -1.0, 1.0),
            rand_t(&mut rng, &[n, 3 * layout.channels, ah / 2, aw / 2], -1.0, 1.0),
            rand_t(&mut rng, &[n, a, ah, aw], 0.0, 1.0),
            safe_offsets(&mut rng, &[n, 2 * a, ah, aw]),
        ],
        &move |g, v| g.deform_attn(layout, &v[0..2], v[2], v[3]),
    )?;
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 300.0, format!("took {secs:.0} s"))?;
    Ok(format!(
        "max rel err deform {deform:.1e}, warp {warp:.1e}, attention {attn:.1e}, {secs:.1} s"
    ))
}

fn attention_simplex_and_hull() -> Outcome {
    let mut worst_sum = 0.0f64;
    let mut checked = 0usize;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let levels = 1 + (seed % 3) as usize;
        let (c, heads) = (4, 2);
        let mut store = ParamStore::<f64>::new();
        let mut prng = ChaCha8Rng::seed_from_u64(seed + 100);
        let da = DaFusion::new(&mut ParamBuilder::new(&mut store, &mut prng), c, heads, levels, 10.0, false)
            .map_err(|e| e.to_string())?;
        // Non-zero offset head so the sampled positions move.
        let off_w = store.lookup("offset.weight").ok_or("no offset head")?;
        for v in store.get_mut(off_w).data_mut() {
            *v = rng.gen_range(-0.3..0.3);
        }
        let (h, w) = (8, 8);
        let mut g = Graph::new(&store);
        let coarse = [0, 1, 2].map(|_| g.constant(rand_t(&mut rng, &[1, c, h, w], -1.0, 1.0)));
        let flows = [0, 1].map(|_| g.constant(rand_t(&mut rng, &[1, 2, h, w], -2.0, 2.0)));
        let out = da.forward(&mut g, coarse, flows).map_err(|e| e.to_string())?;
        let att = g.value(out.attention);
        let lay = da.layout;
        let hw = h * w;
        for m in 0..heads {
            for p in 0..hw {
                let mut total = 0.0;
                for l in 0..levels {
                    for t in 0..lay.sources {
                        for k in 0..lay.points() {
                            let v = att.data()[lay.index(m, l, t, k) * hw + p];
                            ensure(v >= 0.0, format!("negative weight {v}"))?;
                            total += v;
                        }
                    }
                }
                worst_sum = worst_sum.max((total - 1.0).abs());
            }
        }
        ensure(worst_sum < 1e-5, format!("weights sum off by {worst_sum:e}"))?;

        if levels != 1 {
            continue;
        }
        // Identity projection: the output is the attention-weighted sum itself.
        let mut store1 = store.clone();
        let pw = store1.lookup("project.weight").ok_or("no projection")?;
        let pb = store1.lookup("project.bias").ok_or("no projection bias")?;
        let t = store1.get_mut(pw);
        t.data_mut().fill(0.0);
        for i in 0..c {
            t.data_mut()[i * c + i] = 1.0;
        }
        store1.get_mut(pb).data_mut().fill(0.0);
        let mut g1 = Graph::new(&store1);
        let values = rand_t(&mut rng, &[1, 3 * c, h, w], -1.0, 1.0);
        let vv = g1.constant(values.clone());
        let at = g1.constant(att.clone());
        let offsets = g.value(out.offsets).clone();
        let of = g1.constant(offsets.clone());
        let y = da.deformable_attention(&mut g1, &[vv], at, of).map_err(|e| e.to_string())?;
        let y = g1.value(y);
        let d = c / heads;
        let r = (lay.grid / 2) as f64;
        for m in 0..heads {
            for dd in 0..d {
                let ch = m * d + dd;
                for p in 0..hw {
                    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                    for t in 0..lay.sources {
                        let plane = &values.data()[(t * c + ch) * hw..(t * c + ch + 1) * hw];
                        for k in 0..lay.points() {
                            let idx = lay.index(m, 0, t, k);
                            if att.data()[idx * hw + p] == 0.0 {
                                continue;
                            }
                            let sy = (p / w) as f64 + (k / lay.grid) as f64 - r + offsets.data()[2 * idx * hw + p];
                            let sx = (p % w) as f64 + (k % lay.grid) as f64 - r + offsets.data()[(2 * idx + 1) * hw + p];
                            let s = bilinear_oracle(plane, h, w, sy, sx);
                            lo = lo.min(s);
                            hi = hi.max(s);
                        }
                    }
                    let v = y.data()[ch * hw + p];
                    ensure(
                        v >= lo - 1e-9 && v <= hi + 1e-9,
                        format!("output {v} outside [{lo}, {hi}]"),
                    )?;
                    checked += 1;
                }
            }
        }
    }
    ensure(checked > 0, "no hull cases ran")?;
    Ok(format!("sum error {worst_sum:.1e}, {checked} hull checks"))
}

fn down2(x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    (0..oh * ow)
        .map(|i| {
            let (y, xx) = (2 * (i / ow), 2 * (i % ow));
            (x[y * w + xx] + x[y * w + xx + 1] + x[(y + 1) * w + xx] + x[(y + 1) * w + xx + 1]) / 4.0
        })
        .collect()
}

fn up2(x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let coord = |o: usize, n: usize| -> (usize, usize, f64) {
        let c = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
        let i0 = c.floor() as usize;
        (i0.min(n - 1), (i0 + 1).min(n - 1), c - i0 as f64)
    };
    (0..oh * ow)
        .map(|i| {
            let (y0, y1, fy) = coord(i / ow, h);
            let (x0, x1, fx) = coord(i % ow, w);
            (1.0 - fy) * ((1.0 - fx) * x[y0 * w + x0] + fx * x[y0 * w + x1])
                + fy * ((1.0 - fx) * x[y1 * w + x0] + fx * x[y1 * w + x1])
        })
        .collect()
}

fn pst_oracle(store: &ParamStore<f64>, block: &TransformBlock, h_prev: &Tensor<f64>, f_s: &Tensor<f64>) -> Vec<f64> {
    let c = h_prev.shape()[1];
    let (h, w) = (h_prev.shape()[2], h_prev.shape()[3]);
    let mut cat = h_prev.data().to_vec();
    cat.extend_from_slice(f_s.data());
    let cat = Tensor::from_vec(&[1, 2 * c, h, w], cat).unwrap();
    let l1 = conv_oracle(&cat, store.get(block.fuse.weight), block.fuse.bias.map(|b| store.get(b)));
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        let p1 = &l1.data()[ch * h * w..(ch + 1) * h * w];
        let p2 = down2(p1, h, w);
        let p3 = down2(&p2, h / 2, w / 2);
        let s3: Vec<f64> = p3.iter().map(|&v| v / (1.0 + (-v).exp())).collect();
        let u: Vec<f64> = up2(&s3, h / 4, w / 4).iter().zip(&p2).map(|(a, b)| a + b).collect();
        let att = up2(&u, h / 2, w / 2);
        out.extend(att.iter().zip(p1).map(|(a, l)| a * l + l));
    }
    out
}

fn pst_scalar_oracle() -> Outcome {
    let mut worst = 0.0f64;
    seeded_cases(100, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = rng.gen_range(1..=4);
        let mut store = ParamStore::<f64>::new();
        let block = TransformBlock::new(&mut ParamBuilder::new(&mut store, &mut rng), c, 2, false)
            .map_err(|e| e.to_string())?;
        let h_prev = rand_t(&mut rng, &[1, c, 8, 8], -2.0, 2.0);
        let f_s = rand_t(&mut rng, &[1, c, 8, 8], -2.0, 2.0);
        let mut g = Graph::new(&store);
        let hv = g.constant(h_prev.clone());
        let fv = g.constant(f_s.clone());
        let y = pst_branch(&block, &mut g, hv, fv).map_err(|e| e.to_string())?;
        let d = max_diff(g.value(y).data(), &pst_oracle(&store, &block, &h_prev, &f_s));
        worst = worst.max(d);
        ensure(d < 1e-6, format!("c={c}: {d:e}"))
    })?;
    Ok(format!("100 cases, max diff {worst:.1e}"))
}

fn small_testset(scale: usize) -> Result<TestSet, String> {
    let tmpl = SceneTemplate {
        height: 64,
        width: 64,
        frames: 5,
        ..SceneTemplate::default()
    };
    let gt = generate_clips(2, &tmpl, 5).map_err(|e| e.to_string())?;
    degraded_testset(gt, (0.4, 2.0), 13, scale, 6).map_err(|e| e.to_string())
}

fn residual_identity() -> Outcome {
    let test = small_testset(4)?;
    let (model, mut store) = Bsvsr::init::<f64>(ModelConfig::toy(), 3).map_err(|e| e.to_string())?;
    store.get_mut(model.recon.conv.weight).data_mut().fill(0.0);
    store.get_mut(model.recon.conv.bias.ok_or("no bias")?).data_mut().fill(0.0);
    let restorer = ModelRestorer {
        name: "zero-head".into(),
        model: &model,
        params: &store,
        provider: Box::new(ZeroFlow),
    };
    let report = evaluate_model(&restorer, &test, 0).map_err(|e| e.to_string())?;
    let (bic, _, _) = report.average("bicubic").ok_or("no bicubic row")?;
    let (net, _, _) = report.average("zero-head").ok_or("no model row")?;
    for clip in &test.clips {
        let t = 2;
        let win: Vec<&Image> = clip.lr.frames().iter().collect();
        let (sr, _) = bsvsr::model::super_resolve(&model, &store, &win, &ZeroFlow).map_err(|e| e.to_string())?;
        let up = bicubic_upscale(&clip.lr.frames()[t], 4).map_err(|e| e.to_string())?.map(|v| v.clamp(0.0, 1.0));
        let a = psnr(&sr, &clip.gt.frames()[t]).map_err(|e| e.to_string())?;
        let b = psnr(&up, &clip.gt.frames()[t]).map_err(|e| e.to_string())?;
        ensure(a == b, format!("{}: {a} vs {b}", clip.name))?;
    }
    ensure(bic == net, format!("average {net} vs bicubic {bic}"))?;
    Ok(format!("PSNR {net:.4} dB == bicubic {bic:.4} dB"))
}

fn toy_param_oracle(cfg: &ModelConfig) -> usize {
    let conv = |ci: usize, co: usize, k: usize| ci * co * k * k + co;
    let c = cfg.channels;
    let e = cfg.estimator_channels;
    let kk = cfg.kernel_size * cfg.kernel_size;
    let s2 = cfg.scale * cfg.scale;
    let extractor = conv(3, c, 3) + 10 * conv(c, c, 3);
    let estimator = conv(3, e, 3) + 4 * conv(e, e, 3) + conv(e, kk, 1);
    let sharp = conv(3, c, 3) + conv(c, c, 3) + 4 * conv(c, c, 3);
    let msrb = conv(c, c, 3) + conv(c, c, 5) + conv(2 * c, c, 1);
    let predictor = conv(2 * c, c, 3) + 2 * msrb + conv(c, 18, 3);
    let msd = 3 * predictor + 3 * conv(c, c, 3) + conv(3 * c, c, 3);
    let a = cfg.heads * cfg.levels * 3 * 9;
    let da = conv(3 * c, 3 * c, 3) + conv(2 * c, a, 3) + conv(2 * c, 2 * a, 3) + conv(c, c, 1);
    let hidden = (c / cfg.se_reduction).max(1);
    let block = conv(2 * c, c, 3) + conv(c, hidden, 1) + conv(hidden, c, 1);
    let recon = conv(c, 3 * s2, 3);
    extractor + estimator + sharp + msd + da + cfg.blocks * block + recon
}

fn parameter_accounting() -> Outcome {
    let (_, full) = Bsvsr::init::<f32>(ModelConfig::full(), 0).map_err(|e| e.to_string())?;
    let n_full = count_params(&full);
    drop(full);
    let toy_cfg = ModelConfig::toy();
    let (_, toy) = Bsvsr::init::<f32>(toy_cfg.clone(), 0).map_err(|e| e.to_string())?;
    let n_toy = count_params(&toy);
    let oracle = toy_param_oracle(&toy_cfg);
    let full_oracle = toy_param_oracle(&ModelConfig::full());
    let line = format!(
        "full {:.2}M (reference 15.2M, window [9M, 21M]), toy {n_toy} (shape arithmetic {oracle})",
        n_full as f64 / 1e6
    );
    ensure((9_000_000..=21_000_000).contains(&n_full), line.clone())?;
    ensure(n_toy == oracle, line.clone())?;
    ensure(n_full == full_oracle, format!("{line}; full shape arithmetic {full_oracle}"))?;
    Ok(line)
}

// ---------------------------------------------------------------------------
// Trained runs shared by the last criteria.

const TRAIN_CLIPS: usize = 64;
const HELD_OUT: usize = 8;

struct Run {
    checkpoint: Checkpoint<f32>,
    report: EvalReport,
    log: Vec<LogRow>,
    seconds: f64,
}

fn toy_run(cfg: &TrainConfig, clips: &[Clip], test: &TestSet) -> Result<Run, String> {
    let start = Instant::now();
    let mut log = Vec::new();
    let checkpoint = train(cfg, clips, &[Phase::Kernel, Phase::Joint], &mut |r| log.push(r.clone()))
        .map_err(|e| e.to_string())?;
    let seconds = start.elapsed().as_secs_f64();
    let model = checkpoint.model().map_err(|e| e.to_string())?;
    let restorer = ModelRestorer {
        name: if cfg.model.zero_offsets { "zero-offset" } else { "bsvsr" }.into(),
        model: &model,
        params: &checkpoint.params,
        provider: cfg.flow.provider(),
    };
    let report = evaluate(&[&restorer], test, &EvalOptions::default()).map_err(|e| e.to_string())?;
    Ok(Run {
        checkpoint,
        report,
        log,
        seconds,
    })
}

fn toy_end_to_end(full: &Run, ablation: &Run) -> Outcome {
    let (bic, bic_ssim, _) = full.report.average("bicubic").ok_or("no bicubic row")?;
    let (net, net_ssim, _) = full.report.average("bsvsr").ok_or("no model row")?;
    let (abl, _, _) = ablation.report.average("zero-offset").ok_or("no ablation row")?;
    let cfg = &full.checkpoint.config;
    let line = format!(
        "bicubic {bic:.2}/{bic_ssim:.4}, model {net:.2}/{net_ssim:.4} ({:+.2} dB), zero-offset {abl:.2} ({:+.2} dB); {} phase-2 steps, {:.0}+{:.0} s",
        net - bic,
        net - abl,
        cfg.phase2_steps(),
        full.seconds,
        ablation.seconds
    );
    ensure(cfg.phase2_steps() <= 2000, line.clone())?;
    ensure(full.seconds <= 1800.0 && ablation.seconds <= 1800.0, line.clone())?;
    ensure(net - bic >= 0.5, line.clone())?;
    ensure(net - abl >= 0.1, line.clone())?;
    Ok(line)
}

fn report_rows(r: &EvalReport) -> Vec<(String, String, usize, u64, u64)> {
    r.rows
        .iter()
        .map(|row| (row.method.clone(), row.clip.clone(), row.frames, row.psnr.to_bits(), row.ssim.to_bits()))
        .collect()
}

fn log_rows(log: &[LogRow]) -> Vec<(u64, u64, Option<u64>, u64)> {
    log.iter()
        .map(|r| (r.step, r.l_kernel.to_bits(), r.l_sr.map(f64::to_bits), r.lr.to_bits()))
        .collect()
}

fn determinism(a: &Run, b: &Run) -> Outcome {
    let ba = a.checkpoint.to_bytes().map_err(|e| e.to_string())?;
    let bb = b.checkpoint.to_bytes().map_err(|e| e.to_string())?;
    ensure(ba == bb, "checkpoints differ")?;
    ensure(report_rows(&a.report) == report_rows(&b.report), "evaluation reports differ")?;
    ensure(log_rows(&a.log) == log_rows(&b.log), "training logs differ")?;
    Ok(format!("{} checkpoint bytes, reports and loss logs identical", ba.len()))
}

fn kernel_recovery(clips: &[Clip], held: &[Clip]) -> Outcome {
    let sigma = 1.6;
    let mut cfg = TrainConfig::toy();
    cfg.sigma_range = (sigma, sigma);
    let ck = train(&cfg, clips, &[Phase::Kernel], &mut |_| {}).map_err(|e| e.to_string())?;
    let model = ck.model().map_err(|e| e.to_string())?;
    let test = degraded_testset(held.to_vec(), (sigma, sigma), cfg.model.kernel_size, cfg.model.scale, 9)
        .map_err(|e| e.to_string())?;
    let mut fits = Vec::new();
    for clip in &test.clips {
        let mid = &clip.lr.frames()[clip.lr.len() / 2];
        let k = estimate_kernel(&model.estimator, &ck.params, mid).map_err(|e| e.to_string())?;
        fits.push(k.fit_gaussian_sigma());
    }
    let text: Vec<String> = fits.iter().map(|s| format!("{s:.2}")).collect();
    let line = format!("{} phase-1 steps, fitted sigma [{}]", cfg.phase1_steps, text.join(", "));
    ensure(fits.iter().all(|s| (1.3..=1.9).contains(s)), line.clone())?;
    Ok(line)
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut record = |name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let out = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(r) => r,
            Err(p) => Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into())),
        };
        let (tag, msg) = match &out {
            Ok(m) => ("PASS", m),
            Err(m) => ("FAIL", m),
        };
        println!("{tag} {name}: {msg} [{:.1} s]", start.elapsed().as_secs_f64());
        results.push((name, out));
    };

    record("1 degradation oracles", &mut degradation_oracles);
    record("2 wiener recovery", &mut wiener_recovery);
    record("3 deformable equivalence", &mut deformable_equivalence);
    record("4 gradient checks", &mut gradient_checks);
    record("5 attention simplex and hull", &mut attention_simplex_and_hull);
    record("6 pyramid transform oracle", &mut pst_scalar_oracle);
    record("7 residual identity", &mut residual_identity);
    record("10 parameter accounting", &mut parameter_accounting);

    let tmpl = SceneTemplate::default();
    let data = generate_clips(TRAIN_CLIPS, &tmpl, 1).and_then(|c| Ok((c, generate_clips(HELD_OUT, &tmpl, 1001)?)));
    let (clips, held) = match data {
        Ok(d) => d,
        Err(e) => {
            for name in ["9 kernel recovery", "8 toy end-to-end", "11 determinism"] {
                record(name, &mut || Err(format!("data generation failed: {e}")));
            }
            return finish(&results);
        }
    };
    record("9 kernel recovery", &mut || kernel_recovery(&clips, &held));

    let cfg = TrainConfig::toy();
    let runs = degraded_testset(held.clone(), cfg.sigma_range, cfg.model.kernel_size, cfg.model.scale, 77)
        .map_err(|e| e.to_string())
        .and_then(|test| {
            let full = toy_run(&cfg, &clips, &test)?;
            let mut abl_cfg = cfg.clone();
            abl_cfg.model.zero_offsets = true;
            let ablation = toy_run(&abl_cfg, &clips, &test)?;
            Ok((test, full, ablation))
        });
    match runs {
        Ok((test, full, ablation)) => {
            record("8 toy end-to-end", &mut || toy_end_to_end(&full, &ablation));
            record("11 determinism", &mut || {
                let again = toy_run(&cfg, &clips, &test)?;
                determinism(&full, &again)
            });
        }
        Err(e) => {
            record("8 toy end-to-end", &mut || Err(e.clone()));
            record("11 determinism", &mut || Err(e.clone()));
        }
    }
    finish(&results);
}

fn finish(results: &[(&str, Outcome)]) {
    let failed: Vec<&str> = results.iter().filter(|r| r.1.is_err()).map(|r| r.0).collect();
    println!(
        "acceptance: {} passed, {} failed",
        results.len() - failed.len(),
        failed.len()
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
