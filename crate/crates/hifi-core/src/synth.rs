//! Procedural generation of real images and forged variants with
//! pixel-accurate ground-truth masks, plus the robustness post-processing
//! transforms and the on-disk dataset layout (P6/P5 images, TSV manifest).
//!
//! Every byte is a pure function of the seeds: images derive from ChaCha
//! streams, record seeds derive from the master seed by a splitmix step.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::taxonomy::TaxonomyTree;
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Samples and methods
// ---------------------------------------------------------------------------

/// One generated image with its ground truth.
#[derive(Debug, Clone)]
pub struct Sample {
    /// [3,H,W] values in [0,1].
    pub image: Tensor,
    /// [1,H,W] binary; 1 marks forged pixels.
    pub mask: Tensor,
    pub leaf: String,
    pub seed: u64,
    pub provenance: String,
}

impl Sample {
    pub fn is_forged(&self) -> bool {
        self.leaf != crate::taxonomy::REAL_NAME
    }

    /// Forged-area fraction of the mask.
    pub fn mask_area(&self) -> f64 {
        let total = self.mask.numel() as f64;
        self.mask.data().iter().sum::<f64>() / total
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ForgeryMethod {
    Splice,
    CopyMove,
    Inpaint,
    RetouchBlur,
    SynthTextureA,
    SynthTextureB,
}

impl ForgeryMethod {
    pub const ALL: [ForgeryMethod; 6] = [
        ForgeryMethod::Splice,
        ForgeryMethod::CopyMove,
        ForgeryMethod::Inpaint,
        ForgeryMethod::RetouchBlur,
        ForgeryMethod::SynthTextureA,
        ForgeryMethod::SynthTextureB,
    ];

    pub fn leaf_name(&self) -> &'static str {
        match self {
            ForgeryMethod::Splice => "splice",
            ForgeryMethod::CopyMove => "copy-move",
            ForgeryMethod::Inpaint => "inpaint",
            ForgeryMethod::RetouchBlur => "retouch-blur",
            ForgeryMethod::SynthTextureA => "synth-texture-a",
            ForgeryMethod::SynthTextureB => "synth-texture-b",
        }
    }

    pub fn from_leaf_name(name: &str) -> Option<ForgeryMethod> {
        Self::ALL.into_iter().find(|m| m.leaf_name() == name)
    }

    /// Fully synthesized methods carry an all-ones mask.
    pub fn is_fully_synthesized(&self) -> bool {
        matches!(self, ForgeryMethod::SynthTextureA | ForgeryMethod::SynthTextureB)
    }

    pub fn needs_donor(&self) -> bool {
        matches!(self, ForgeryMethod::Splice)
    }

    /// Configured mask-area distribution: (target mean, sampling lo, hi).
    /// Targets differ per method so area statistics depend on the method.
    pub fn area_spec(&self) -> Option<(f64, f64, f64)> {
        match self {
            ForgeryMethod::Splice => Some((0.25, 0.15, 0.35)),
            ForgeryMethod::CopyMove => Some((0.20, 0.12, 0.28)),
            ForgeryMethod::Inpaint => Some((0.10, 0.05, 0.15)),
            ForgeryMethod::RetouchBlur => Some((0.15, 0.08, 0.22)),
            _ => None,
        }
    }
}

/// Hard bounds on the forged-area fraction of partial manipulations.
pub const MASK_AREA_MIN: f64 = 0.02;
pub const MASK_AREA_MAX: f64 = 0.60;

/// Derives the per-record seed from the master seed (splitmix64 step over
/// the pair), so records can be generated independently.
pub fn seed_for(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_mul(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

// ---------------------------------------------------------------------------
// Real-image generator
// ---------------------------------------------------------------------------

fn idx(c: usize, y: usize, x: usize, h: usize, w: usize) -> usize {
    (c * h + y) * w + x
}

/// Bilinearly upsampled random grid, one octave of value noise in [-1,1].
fn value_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, cell: usize) -> Vec<f64> {
    let gh = h.div_ceil(cell) + 1;
    let gw = w.div_ceil(cell) + 1;
    let grid: Vec<f64> = (0..gh * gw).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let fy = y as f64 / cell as f64;
        let y0 = fy.floor() as usize;
        let ty = fy - y0 as f64;
        for x in 0..w {
            let fx = x as f64 / cell as f64;
            let x0 = fx.floor() as usize;
            let tx = fx - x0 as f64;
            let g = |yy: usize, xx: usize| grid[yy * gw + xx];
            let top = g(y0, x0) * (1.0 - tx) + g(y0, x0 + 1) * tx;
            let bot = g(y0 + 1, x0) * (1.0 - tx) + g(y0 + 1, x0 + 1) * tx;
            out[y * w + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Parametric scene: smooth gradient background, 2-5 anti-aliased shapes,
/// band-limited noise texture; fully determined by the seed.
pub fn generate_real(seed: u64, h: usize, w: usize) -> Result<Sample> {
    if h < 16 || w < 16 {
        return Err(Error::Config(format!("image {h}x{w} too small, need at least 16x16")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = vec![0.0; 3 * h * w];

    // Gradient background between two colors along a random direction.
    let c0: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.15..0.85));
    let c1: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.15..0.85));
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (dy, dx) = (angle.sin(), angle.cos());
    let diag = ((h * h + w * w) as f64).sqrt();
    for y in 0..h {
        for x in 0..w {
            let t = ((y as f64 * dy + x as f64 * dx) / diag + 1.0) / 2.0;
            for c in 0..3 {
                img[idx(c, y, x, h, w)] = c0[c] * (1.0 - t) + c1[c] * t;
            }
        }
    }

    // Anti-aliased shapes.
    let shapes = rng.random_range(2..=5);
    for _ in 0..shapes {
        let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.05..0.95));
        let circle = rng.random_bool(0.5);
        if circle {
            let cy = rng.random_range(0.0..h as f64);
            let cx = rng.random_range(0.0..w as f64);
            let r = rng.random_range(0.08..0.3) * h.min(w) as f64;
            for y in 0..h {
                for x in 0..w {
                    let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
                    // 1px soft edge
                    let a = (r + 0.5 - d).clamp(0.0, 1.0);
                    if a > 0.0 {
                        for c in 0..3 {
                            let p = &mut img[idx(c, y, x, h, w)];
                            *p = *p * (1.0 - a) + color[c] * a;
                        }
                    }
                }
            }
        } else {
            let rh = rng.random_range(0.1..0.4) * h as f64;
            let rw = rng.random_range(0.1..0.4) * w as f64;
            let y0 = rng.random_range(0.0..h as f64 - 1.0);
            let x0 = rng.random_range(0.0..w as f64 - 1.0);
            for y in 0..h {
                for x in 0..w {
                    let ay = ((y as f64 + 0.5 - y0).min(y0 + rh - y as f64 + 0.5)).clamp(0.0, 1.0);
                    let ax = ((x as f64 + 0.5 - x0).min(x0 + rw - x as f64 + 0.5)).clamp(0.0, 1.0);
                    let a = ay * ax;
                    if a > 0.0 {
                        for c in 0..3 {
                            let p = &mut img[idx(c, y, x, h, w)];
                            *p = *p * (1.0 - a) + color[c] * a;
                        }
                    }
                }
            }
        }
    }

    // Band-limited texture: one coarse value-noise octave shared across
    // channels plus a finer one.
    let coarse = value_noise(&mut rng, h, w, 8);
    let fine = value_noise(&mut rng, h, w, 3);
    let amp = rng.random_range(0.02..0.05);
    for y in 0..h {
        for x in 0..w {
            let n = amp * (coarse[y * w + x] + 0.5 * fine[y * w + x]);
            for c in 0..3 {
                let p = &mut img[idx(c, y, x, h, w)];
                *p = (*p + n).clamp(0.0, 1.0);
            }
        }
    }

    Ok(Sample {
        image: Tensor::new(vec![3, h, w], img)?,
        mask: Tensor::zeros(&[1, h, w]),
        leaf: crate::taxonomy::REAL_NAME.to_string(),
        seed,
        provenance: format!("real(seed={seed})"),
    })
}

// ---------------------------------------------------------------------------
// Forgeries
// ---------------------------------------------------------------------------

struct Region {
    y0: usize,
    x0: usize,
    rh: usize,
    rw: usize,
}

fn sample_region(rng: &mut ChaCha8Rng, h: usize, w: usize, lo: f64, hi: f64) -> Region {
    let f = rng.random_range(lo..hi).clamp(MASK_AREA_MIN, MASK_AREA_MAX);
    let aspect = rng.random_range(0.6..1.6667);
    let target = f * (h * w) as f64;
    let rw = ((target * aspect).sqrt().round() as usize).clamp(3, w - 2);
    let rh = ((target / rw as f64).round() as usize).clamp(3, h - 2);
    let y0 = rng.random_range(0..=h - rh);
    let x0 = rng.random_range(0..=w - rw);
    Region { y0, x0, rh, rw }
}

fn region_mask(r: &Region, h: usize, w: usize) -> Tensor {
    let mut mask = Tensor::zeros(&[1, h, w]);
    for y in r.y0..r.y0 + r.rh {
        for x in r.x0..r.x0 + r.rw {
            mask.set(&[0, y, x], 1.0);
        }
    }
    mask
}

/// Small luminance shift plus matched noise inside a pasted region; pasted
/// content rarely matches the surrounding lighting exactly.
fn perturb_region(img: &mut [f64], r: &Region, h: usize, w: usize, rng: &mut ChaCha8Rng, shift_lo: f64, shift_hi: f64) {
    let shift = rng.random_range(shift_lo..shift_hi) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let noise_sigma = rng.random_range(0.01..0.03);
    for y in r.y0..r.y0 + r.rh {
        for x in r.x0..r.x0 + r.rw {
            let n = noise_sigma * standard_normal(rng);
            for c in 0..3 {
                let p = &mut img[idx(c, y, x, h, w)];
                *p = (*p + shift + n).clamp(0.0, 1.0);
            }
        }
    }
}

fn separable_gaussian_blur(img: &[f64], h: usize, w: usize, sigma: f64, radius: usize) -> Vec<f64> {
    let mut kernel = Vec::with_capacity(2 * radius + 1);
    for i in -(radius as isize)..=radius as isize {
        kernel.push((-((i * i) as f64) / (2.0 * sigma * sigma)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.into_iter().map(|k| k / norm).collect();
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    let mut tmp = vec![0.0; 3 * h * w];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sx = clamp(x as isize + ki as isize - radius as isize, w);
                    acc += kv * img[idx(c, y, sx, h, w)];
                }
                tmp[idx(c, y, x, h, w)] = acc;
            }
        }
    }
    let mut out = vec![0.0; 3 * h * w];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sy = clamp(y as isize + ki as isize - radius as isize, h);
                    acc += kv * tmp[idx(c, sy, x, h, w)];
                }
                out[idx(c, y, x, h, w)] = acc;
            }
        }
    }
    out
}

/// Applies one forgery method to a real base image. Splicing requires a
/// donor; the fully-synthesized textures ignore the base content and carry
/// all-ones masks.
pub fn apply_forgery(
    base: &Sample,
    method: ForgeryMethod,
    donor: Option<&Sample>,
    seed: u64,
) -> Result<Sample> {
    if base.is_forged() {
        return Err(Error::Data("apply_forgery: base sample must be real".into()));
    }
    let (h, w) = (base.image.shape()[1], base.image.shape()[2]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = base.image.data().to_vec();

    let (mask, provenance) = match method {
        ForgeryMethod::Splice => {
            let donor = donor.ok_or_else(|| Error::Data("splice requires a donor sample".into()))?;
            if donor.image.shape() != base.image.shape() {
                return Err(Error::ShapeMismatch {
                    op: "apply_forgery",
                    detail: format!("donor {:?} vs base {:?}", donor.image.shape(), base.image.shape()),
                });
            }
            let (_, lo, hi) = method.area_spec().unwrap();
            let r = sample_region(&mut rng, h, w, lo, hi);
            let sy = rng.random_range(0..=h - r.rh);
            let sx = rng.random_range(0..=w - r.rw);
            for y in 0..r.rh {
                for x in 0..r.rw {
                    for c in 0..3 {
                        img[idx(c, r.y0 + y, r.x0 + x, h, w)] =
                            donor.image.at(&[c, sy + y, sx + x]);
                    }
                }
            }
            perturb_region(&mut img, &r, h, w, &mut rng, 0.04, 0.12);
            (region_mask(&r, h, w), format!("splice(donor={},seed={seed})", donor.seed))
        }
        ForgeryMethod::CopyMove => {
            let (_, lo, hi) = method.area_spec().unwrap();
            let r = sample_region(&mut rng, h, w, lo, hi);
            // Force the source window off the destination.
            let mut sy = rng.random_range(0..=h - r.rh);
            let mut sx = rng.random_range(0..=w - r.rw);
            if sy == r.y0 && sx == r.x0 {
                sy = (sy + r.rh / 2 + 1).min(h - r.rh);
                sx = (sx + r.rw / 2 + 1).min(w - r.rw);
            }
            let src = base.image.data();
            for y in 0..r.rh {
                for x in 0..r.rw {
                    for c in 0..3 {
                        img[idx(c, r.y0 + y, r.x0 + x, h, w)] = src[idx(c, sy + y, sx + x, h, w)];
                    }
                }
            }
            perturb_region(&mut img, &r, h, w, &mut rng, 0.03, 0.09);
            (region_mask(&r, h, w), format!("copy-move(seed={seed})"))
        }
        ForgeryMethod::Inpaint => {
            let (_, lo, hi) = method.area_spec().unwrap();
            let r = sample_region(&mut rng, h, w, lo, hi);
            // Ring statistics around the region drive the fill.
            let mut mean = [0.0f64; 3];
            let mut count = 0usize;
            for y in r.y0.saturating_sub(2)..(r.y0 + r.rh + 2).min(h) {
                for x in r.x0.saturating_sub(2)..(r.x0 + r.rw + 2).min(w) {
                    let inside = y >= r.y0 && y < r.y0 + r.rh && x >= r.x0 && x < r.x0 + r.rw;
                    if !inside {
                        for c in 0..3 {
                            mean[c] += img[idx(c, y, x, h, w)];
                        }
                        count += 1;
                    }
                }
            }
            mean.iter_mut().for_each(|m| *m /= count.max(1) as f64);
            let noise_sigma = rng.random_range(0.008..0.02);
            for y in r.y0..r.y0 + r.rh {
                for x in r.x0..r.x0 + r.rw {
                    let n = noise_sigma * standard_normal(&mut rng);
                    for c in 0..3 {
                        img[idx(c, y, x, h, w)] = (mean[c] + n).clamp(0.0, 1.0);
                    }
                }
            }
            (region_mask(&r, h, w), format!("inpaint(seed={seed})"))
        }
        ForgeryMethod::RetouchBlur => {
            let (_, lo, hi) = method.area_spec().unwrap();
            let r = sample_region(&mut rng, h, w, lo, hi);
            let sigma = rng.random_range(1.5..2.5);
            let blurred = separable_gaussian_blur(&img, h, w, sigma, 4);
            for y in r.y0..r.y0 + r.rh {
                for x in r.x0..r.x0 + r.rw {
                    for c in 0..3 {
                        img[idx(c, y, x, h, w)] = blurred[idx(c, y, x, h, w)];
                    }
                }
            }
            (region_mask(&r, h, w), format!("retouch-blur(seed={seed},sigma={sigma:.3})"))
        }
        ForgeryMethod::SynthTextureA => {
            // Multi-octave value noise through a two-color palette, plus a
            // faint 2px checker artifact.
            let p0: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.9));
            let p1: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.9));
            let o1 = value_noise(&mut rng, h, w, 8);
            let o2 = value_noise(&mut rng, h, w, 4);
            let o3 = value_noise(&mut rng, h, w, 2);
            let checker_amp = rng.random_range(0.02..0.05);
            for y in 0..h {
                for x in 0..w {
                    let v = 0.5 + 0.25 * o1[y * w + x] + 0.15 * o2[y * w + x] + 0.1 * o3[y * w + x];
                    let t = v.clamp(0.0, 1.0);
                    let checker = if (y + x) % 2 == 0 { checker_amp } else { -checker_amp };
                    for c in 0..3 {
                        img[idx(c, y, x, h, w)] = (p0[c] * (1.0 - t) + p1[c] * t + checker).clamp(0.0, 1.0);
                    }
                }
            }
            (Tensor::ones(&[1, h, w]), format!("synth-texture-a(seed={seed})"))
        }
        ForgeryMethod::SynthTextureB => {
            // Interference of sinusoidal plane waves; strongly periodic.
            let waves = rng.random_range(3..=5);
            let mut params = Vec::new();
            for _ in 0..waves {
                let freq = rng.random_range(0.4..1.4);
                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                params.push((freq, angle.cos(), angle.sin(), phase));
            }
            let p0: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.9));
            let p1: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.9));
            for y in 0..h {
                for x in 0..w {
                    let mut v = 0.0;
                    for &(f, ca, sa, ph) in &params {
                        v += (f * (ca * x as f64 + sa * y as f64) + ph).sin();
                    }
                    let t = (v / waves as f64 + 1.0) / 2.0;
                    for c in 0..3 {
                        img[idx(c, y, x, h, w)] = (p0[c] * (1.0 - t) + p1[c] * t).clamp(0.0, 1.0);
                    }
                }
            }
            (Tensor::ones(&[1, h, w]), format!("synth-texture-b(seed={seed})"))
        }
    };

    Ok(Sample {
        image: Tensor::new(vec![3, h, w], img)?,
        mask,
        leaf: method.leaf_name().to_string(),
        seed,
        provenance,
    })
}

// ---------------------------------------------------------------------------
// Post-processing transforms
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Postprocess {
    /// Downscale by the factor and scale back, degrading detail; the mask
    /// keeps its original geometry.
    Resize(f64),
    /// Gaussian blur with an odd kernel size.
    GaussianBlur(usize),
    /// Additive Gaussian noise with sigma on the 8-bit scale.
    GaussianNoise(f64),
}

impl Postprocess {
    /// Parses "resize:0.78", "blur:5", "noise:3".
    pub fn parse(spec: &str) -> Result<Postprocess> {
        let (kind, value) = spec
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("postprocess {spec:?} must be kind:value")))?;
        match kind {
            "resize" => Ok(Postprocess::Resize(value.parse().map_err(|_| {
                Error::Config(format!("bad resize factor {value:?}"))
            })?)),
            "blur" => Ok(Postprocess::GaussianBlur(value.parse().map_err(|_| {
                Error::Config(format!("bad blur kernel {value:?}"))
            })?)),
            "noise" => Ok(Postprocess::GaussianNoise(value.parse().map_err(|_| {
                Error::Config(format!("bad noise sigma {value:?}"))
            })?)),
            other => Err(Error::Config(format!("unknown postprocess {other:?}"))),
        }
    }
}

fn bilinear_resize(img: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let mut out = vec![0.0; c * oh * ow];
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    for y in 0..oh {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, h as f64 - 1.0);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for x in 0..ow {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, w as f64 - 1.0);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            for ch in 0..c {
                let g = |yy: usize, xx: usize| img.data()[(ch * h + yy) * w + xx];
                let top = g(y0, x0) * (1.0 - tx) + g(y0, x1) * tx;
                let bot = g(y1, x0) * (1.0 - tx) + g(y1, x1) * tx;
                out[(ch * oh + y) * ow + x] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out).expect("resize shape")
}

/// Applies a quality-degrading transform; labels and mask geometry are
/// preserved (identity parameters return the sample unchanged).
pub fn apply_postprocess(sample: &Sample, transform: Postprocess, seed: u64) -> Result<Sample> {
    let (h, w) = (sample.image.shape()[1], sample.image.shape()[2]);
    let image = match transform {
        Postprocess::Resize(factor) => {
            if !(factor > 0.0) {
                return Err(Error::Config(format!("resize factor {factor} must be positive")));
            }
            if factor == 1.0 {
                sample.image.clone()
            } else {
                let nh = ((h as f64 * factor).round() as usize).max(2);
                let nw = ((w as f64 * factor).round() as usize).max(2);
                bilinear_resize(&bilinear_resize(&sample.image, nh, nw), h, w)
            }
        }
        Postprocess::GaussianBlur(k) => {
            if k == 0 || k % 2 == 0 {
                return Err(Error::Config(format!("blur kernel {k} must be odd and positive")));
            }
            if k == 1 {
                sample.image.clone()
            } else {
                let radius = (k - 1) / 2;
                let sigma = k as f64 / 3.0;
                let data = separable_gaussian_blur(sample.image.data(), h, w, sigma, radius);
                Tensor::new(vec![3, h, w], data)?
            }
        }
        Postprocess::GaussianNoise(sigma) => {
            if sigma < 0.0 {
                return Err(Error::Config(format!("noise sigma {sigma} must be non-negative")));
            }
            if sigma == 0.0 {
                sample.image.clone()
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let s = sigma / 255.0;
                let data = sample
                    .image
                    .data()
                    .iter()
                    .map(|&v| (v + s * standard_normal(&mut rng)).clamp(0.0, 1.0))
                    .collect();
                Tensor::new(vec![3, h, w], data)?
            }
        }
    };
    Ok(Sample {
        image,
        mask: sample.mask.clone(),
        leaf: sample.leaf.clone(),
        seed: sample.seed,
        provenance: format!("{};post({transform:?},seed={seed})", sample.provenance),
    })
}

// ---------------------------------------------------------------------------
// P6 / P5 image files
// ---------------------------------------------------------------------------

fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Writes a [3,H,W] image as binary PPM (P6, 8-bit).
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    if image.rank() != 3 || image.shape()[0] != 3 {
        return Err(Error::ShapeMismatch {
            op: "write_ppm",
            detail: format!("expected [3,H,W], got {:?}", image.shape()),
        });
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut out = BufWriter::new(fs::File::create(path)?);
    write!(out, "P6\n{w} {h}\n255\n")?;
    let mut row = Vec::with_capacity(3 * w);
    for y in 0..h {
        row.clear();
        for x in 0..w {
            for c in 0..3 {
                row.push(quantize(image.at(&[c, y, x])));
            }
        }
        out.write_all(&row)?;
    }
    Ok(())
}

/// Writes a [1,H,W] map as binary PGM (P5, 8-bit).
pub fn write_pgm(path: &Path, map: &Tensor) -> Result<()> {
    if map.rank() != 3 || map.shape()[0] != 1 {
        return Err(Error::ShapeMismatch {
            op: "write_pgm",
            detail: format!("expected [1,H,W], got {:?}", map.shape()),
        });
    }
    let (h, w) = (map.shape()[1], map.shape()[2]);
    let mut out = BufWriter::new(fs::File::create(path)?);
    write!(out, "P5\n{w} {h}\n255\n")?;
    let mut row = Vec::with_capacity(w);
    for y in 0..h {
        row.clear();
        for x in 0..w {
            row.push(quantize(map.at(&[0, y, x])));
        }
        out.write_all(&row)?;
    }
    Ok(())
}

fn read_pnm_header(data: &[u8], magic: &str) -> Result<(usize, usize, usize)> {
    let mut pos = 0usize;
    let mut token = |data: &[u8]| -> Result<String> {
        while pos < data.len() {
            if data[pos] == b'#' {
                while pos < data.len() && data[pos] != b'\n' {
                    pos += 1;
                }
            } else if data[pos].is_ascii_whitespace() {
                pos += 1;
            } else {
                break;
            }
        }
        let start = pos;
        while pos < data.len() && !data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PNM header".into()));
        }
        Ok(String::from_utf8_lossy(&data[start..pos]).into_owned())
    };
    let m = token(data)?;
    if m != magic {
        return Err(Error::Format(format!("expected {magic}, got {m}")));
    }
    let w: usize = token(data)?.parse().map_err(|_| Error::Format("bad PNM width".into()))?;
    let h: usize = token(data)?.parse().map_err(|_| Error::Format("bad PNM height".into()))?;
    let maxval: usize = token(data)?.parse().map_err(|_| Error::Format("bad PNM maxval".into()))?;
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported PNM maxval {maxval}")));
    }
    // One whitespace byte separates header and payload.
    Ok((w, h, pos + 1))
}

/// Reads a binary PPM into a [3,H,W] tensor with values in [0,1].
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let mut data = Vec::new();
    fs::File::open(path)?.read_to_end(&mut data)?;
    let (w, h, offset) = read_pnm_header(&data, "P6")?;
    let need = 3 * w * h;
    if data.len() < offset + need {
        return Err(Error::Format(format!("PPM payload truncated in {}", path.display())));
    }
    let mut out = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let byte = data[offset + (y * w + x) * 3 + c];
                out[(c * h + y) * w + x] = byte as f64 / 255.0;
            }
        }
    }
    Tensor::new(vec![3, h, w], out)
}

/// Reads a binary PGM into a [1,H,W] tensor with values in [0,1].
pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let mut data = Vec::new();
    fs::File::open(path)?.read_to_end(&mut data)?;
    let (w, h, offset) = read_pnm_header(&data, "P5")?;
    if data.len() < offset + w * h {
        return Err(Error::Format(format!("PGM payload truncated in {}", path.display())));
    }
    let mut out = vec![0.0; h * w];
    for (o, &b) in out.iter_mut().zip(&data[offset..offset + w * h]) {
        *o = b as f64 / 255.0;
    }
    Tensor::new(vec![1, h, w], out)
}

/// Binarizes a stored mask map (quantization keeps 0/1 exact, but any
/// grey value thresholds at one half).
pub fn mask_from_map(map: &Tensor) -> Tensor {
    crate::losses::binarize_scores(map, 0.5)
}

// ---------------------------------------------------------------------------
// Dataset manifest
// ---------------------------------------------------------------------------

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub path: String,
    pub mask_path: String,
    pub leaf: String,
    pub seed: u64,
    pub split: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let _ = writeln!(out, "{}\t{}\t{}\t{}\t{}", r.path, r.mask_path, r.leaf, r.seed, r.split);
        }
        out
    }

    pub fn parse_tsv(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 5 {
                return Err(Error::Data(format!(
                    "manifest line {}: expected 5 tab-separated fields, got {}",
                    lineno + 1,
                    fields.len()
                )));
            }
            let seed: u64 = fields[3]
                .parse()
                .map_err(|_| Error::Data(format!("manifest line {}: bad seed {:?}", lineno + 1, fields[3])))?;
            if !SPLITS.contains(&fields[4]) {
                return Err(Error::Data(format!(
                    "manifest line {}: unknown split {:?}",
                    lineno + 1,
                    fields[4]
                )));
            }
            records.push(ManifestRecord {
                path: fields[0].to_string(),
                mask_path: fields[1].to_string(),
                leaf: fields[2].to_string(),
                seed,
                split: fields[4].to_string(),
            });
        }
        Ok(DatasetManifest { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse_tsv(&text)
    }

    /// Checks paths exist and labels belong to the taxonomy.
    pub fn validate(&self, base_dir: &Path, tree: &TaxonomyTree) -> Result<()> {
        for r in &self.records {
            tree.leaf_index(&r.leaf)
                .map_err(|_| Error::Data(format!("manifest label {:?} not in taxonomy", r.leaf)))?;
            for p in [&r.path, &r.mask_path] {
                if !base_dir.join(p).exists() {
                    return Err(Error::Data(format!("manifest path missing: {p}")));
                }
            }
        }
        Ok(())
    }

    pub fn split<'a>(&'a self, split: &'a str) -> impl Iterator<Item = &'a ManifestRecord> + 'a {
        self.records.iter().filter(move |r| r.split == split)
    }
}

/// Counts and geometry of a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub height: usize,
    pub width: usize,
    pub per_forgery_leaf: usize,
    pub real_count: usize,
    /// Fractions per split; test takes the remainder.
    pub train_frac: f64,
    pub val_frac: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            height: 32,
            width: 32,
            per_forgery_leaf: 400,
            real_count: 2400,
            train_frac: 0.7,
            val_frac: 0.1,
        }
    }
}

fn split_of(i: usize, count: usize, cfg: &DatasetConfig) -> &'static str {
    let train_end = (count as f64 * cfg.train_frac).round() as usize;
    let val_end = train_end + (count as f64 * cfg.val_frac).round() as usize;
    if i < train_end {
        "train"
    } else if i < val_end {
        "val"
    } else {
        "test"
    }
}

/// Generates one record's sample from its derived seed.
pub fn generate_record_sample(
    leaf: &str,
    record_seed: u64,
    cfg: &DatasetConfig,
) -> Result<Sample> {
    if leaf == crate::taxonomy::REAL_NAME {
        return generate_real(seed_for(record_seed, 1), cfg.height, cfg.width);
    }
    let method = ForgeryMethod::from_leaf_name(leaf)
        .ok_or_else(|| Error::Data(format!("no generator for taxonomy leaf {leaf:?}")))?;
    let base = generate_real(seed_for(record_seed, 1), cfg.height, cfg.width)?;
    let donor = if method.needs_donor() {
        Some(generate_real(seed_for(record_seed, 2), cfg.height, cfg.width)?)
    } else {
        None
    };
    apply_forgery(&base, method, donor.as_ref(), seed_for(record_seed, 3))
}

/// Writes the full dataset (images, masks, manifest, taxonomy copy) under
/// `out_dir`; every byte is a function of (master_seed, cfg, tree).
pub fn build_dataset(
    cfg: &DatasetConfig,
    tree: &TaxonomyTree,
    master_seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    // Leaves must be generatable before any file is written.
    for leaf in tree.forgery_leaves() {
        let name = tree.leaf_name(leaf);
        if ForgeryMethod::from_leaf_name(name).is_none() {
            return Err(Error::Data(format!("no generator for taxonomy leaf {name:?}")));
        }
    }
    fs::create_dir_all(out_dir.join("images"))?;
    fs::create_dir_all(out_dir.join("masks"))?;

    let mut records = Vec::new();
    let mut global_index = 0u64;
    let leaf_names: Vec<String> = (0..tree.leaf_count())
        .map(|i| tree.leaf_name(i).to_string())
        .collect();
    for leaf in &leaf_names {
        let count = if leaf == crate::taxonomy::REAL_NAME {
            cfg.real_count
        } else {
            cfg.per_forgery_leaf
        };
        for i in 0..count {
            let record_seed = seed_for(master_seed, global_index);
            global_index += 1;
            let sample = generate_record_sample(leaf, record_seed, cfg)?;
            let image_rel = format!("images/{leaf}_{i:05}.ppm");
            let mask_rel = format!("masks/{leaf}_{i:05}.pgm");
            write_ppm(&out_dir.join(&image_rel), &sample.image)?;
            write_pgm(&out_dir.join(&mask_rel), &sample.mask)?;
            records.push(ManifestRecord {
                path: image_rel,
                mask_path: mask_rel,
                leaf: leaf.clone(),
                seed: record_seed,
                split: split_of(i, count, cfg).to_string(),
            });
        }
    }
    let manifest = DatasetManifest { records };
    manifest.save(&out_dir.join("manifest.tsv"))?;
    fs::write(out_dir.join("taxonomy.txt"), tree.to_config_string())?;
    Ok(manifest)
}

/// Standard locations inside a generated dataset directory.
pub fn manifest_path(dataset_dir: &Path) -> PathBuf {
    dataset_dir.join("manifest.tsv")
}

pub fn taxonomy_path(dataset_dir: &Path) -> PathBuf {
    dataset_dir.join("taxonomy.txt")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::mini_taxonomy_config;

    #[test]
    fn real_images_are_deterministic_and_varied() {
        let a = generate_real(77, 32, 32).unwrap();
        let b = generate_real(77, 32, 32).unwrap();
        assert_eq!(a.image.data(), b.image.data());
        assert!(a.mask.data().iter().all(|&v| v == 0.0));
        assert_eq!(a.leaf, "real");

        // Histogram non-degenerate over 100 seeds.
        let mut all_std = Vec::new();
        for seed in 0..100 {
            let s = generate_real(seed, 32, 32).unwrap();
            let mean: f64 = s.image.data().iter().sum::<f64>() / s.image.numel() as f64;
            let var: f64 = s.image.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>()
                / s.image.numel() as f64;
            all_std.push(var.sqrt());
        }
        assert!(all_std.iter().all(|&s| s > 0.01), "min std {:?}", all_std.iter().cloned().fold(f64::MAX, f64::min));

        assert!(generate_real(0, 8, 32).is_err());
    }

    #[test]
    fn splice_mask_is_exactly_the_pasted_region() {
        let base = generate_real(1, 32, 32).unwrap();
        let donor = generate_real(2, 32, 32).unwrap();
        let forged = apply_forgery(&base, ForgeryMethod::Splice, Some(&donor), 3).unwrap();
        // Mask is a filled rectangle: bounding box area equals mask area.
        let mut min_y = usize::MAX;
        let mut max_y = 0;
        let mut min_x = usize::MAX;
        let mut max_x = 0;
        let mut area = 0usize;
        for y in 0..32 {
            for x in 0..32 {
                if forged.mask.at(&[0, y, x]) == 1.0 {
                    area += 1;
                    min_y = min_y.min(y);
                    max_y = max_y.max(y);
                    min_x = min_x.min(x);
                    max_x = max_x.max(x);
                }
            }
        }
        assert!(area > 0);
        assert_eq!(area, (max_y - min_y + 1) * (max_x - min_x + 1));
        // Pixels outside the mask are untouched.
        for y in 0..32 {
            for x in 0..32 {
                if forged.mask.at(&[0, y, x]) == 0.0 {
                    for c in 0..3 {
                        assert_eq!(forged.image.at(&[c, y, x]), base.image.at(&[c, y, x]));
                    }
                }
            }
        }
        assert!(apply_forgery(&base, ForgeryMethod::Splice, None, 3).is_err());
    }

    #[test]
    fn fully_synthesized_masks_are_all_ones() {
        let base = generate_real(5, 32, 32).unwrap();
        for m in [ForgeryMethod::SynthTextureA, ForgeryMethod::SynthTextureB] {
            let s = apply_forgery(&base, m, None, 9).unwrap();
            assert!(s.mask.data().iter().all(|&v| v == 1.0));
            assert_eq!(s.mask_area(), 1.0);
        }
    }

    #[test]
    fn mask_area_matches_configured_targets() {
        // 500 seeds per partial method; empirical mean within +-0.05.
        for method in ForgeryMethod::ALL {
            let Some((target, _, _)) = method.area_spec() else { continue };
            let mut total = 0.0;
            for seed in 0..500u64 {
                let base = generate_real(seed_for(1000, seed), 32, 32).unwrap();
                let donor = generate_real(seed_for(2000, seed), 32, 32).unwrap();
                let s = apply_forgery(
                    &base,
                    method,
                    method.needs_donor().then_some(&donor),
                    seed_for(3000, seed),
                )
                .unwrap();
                let area = s.mask_area();
                assert!(
                    (MASK_AREA_MIN..=MASK_AREA_MAX).contains(&area),
                    "{method:?} area {area} outside bounds"
                );
                total += area;
            }
            let mean = total / 500.0;
            assert!(
                (mean - target).abs() < 0.05,
                "{method:?}: mean area {mean} vs target {target}"
            );
        }
    }

    #[test]
    fn forgeries_are_deterministic_per_seed() {
        let base = generate_real(10, 32, 32).unwrap();
        let donor = generate_real(11, 32, 32).unwrap();
        for method in ForgeryMethod::ALL {
            let d = method.needs_donor().then_some(&donor);
            let a = apply_forgery(&base, method, d, 42).unwrap();
            let b = apply_forgery(&base, method, d, 42).unwrap();
            assert_eq!(a.image.data(), b.image.data());
            assert_eq!(a.mask.data(), b.mask.data());
        }
    }

    #[test]
    fn postprocess_identity_cases() {
        let s = generate_real(3, 32, 32).unwrap();
        let r = apply_postprocess(&s, Postprocess::Resize(1.0), 5).unwrap();
        assert_eq!(r.image.data(), s.image.data());
        let n = apply_postprocess(&s, Postprocess::GaussianNoise(0.0), 5).unwrap();
        assert_eq!(n.image.data(), s.image.data());
        let b = apply_postprocess(&s, Postprocess::GaussianBlur(1), 5).unwrap();
        assert_eq!(b.image.data(), s.image.data());
    }

    #[test]
    fn postprocess_keeps_masks_and_labels() {
        let base = generate_real(6, 32, 32).unwrap();
        let forged = apply_forgery(&base, ForgeryMethod::Inpaint, None, 7).unwrap();
        for t in [
            Postprocess::Resize(0.78),
            Postprocess::Resize(0.25),
            Postprocess::GaussianBlur(3),
            Postprocess::GaussianBlur(15),
            Postprocess::GaussianNoise(3.0),
            Postprocess::GaussianNoise(15.0),
        ] {
            let p = apply_postprocess(&forged, t, 8).unwrap();
            assert_eq!(p.mask.data(), forged.mask.data(), "{t:?}");
            assert_eq!(p.leaf, forged.leaf);
            assert_eq!(p.image.shape(), forged.image.shape());
            // The image must actually change for non-identity transforms.
            assert_ne!(p.image.data(), forged.image.data(), "{t:?}");
        }
        assert!(apply_postprocess(&forged, Postprocess::GaussianBlur(4), 0).is_err());
        assert!(apply_postprocess(&forged, Postprocess::Resize(0.0), 0).is_err());
        assert!(Postprocess::parse("blur:5").is_ok());
        assert!(Postprocess::parse("bad").is_err());
    }

    #[test]
    fn ppm_pgm_round_trip_preserves_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_real(9, 17, 23).unwrap();
        let img_path = dir.path().join("a.ppm");
        write_ppm(&img_path, &s.image).unwrap();
        let back = read_ppm(&img_path).unwrap();
        assert_eq!(back.shape(), s.image.shape());
        for (a, b) in back.data().iter().zip(s.image.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        // Quantized round trip is exact.
        write_ppm(&img_path, &back).unwrap();
        let again = read_ppm(&img_path).unwrap();
        assert_eq!(again.data(), back.data());

        let mask_path = dir.path().join("m.pgm");
        let forged = apply_forgery(&s, ForgeryMethod::Inpaint, None, 1).unwrap();
        write_pgm(&mask_path, &forged.mask).unwrap();
        let mask = mask_from_map(&read_pgm(&mask_path).unwrap());
        assert_eq!(mask.data(), forged.mask.data());
    }

    #[test]
    fn manifest_round_trip_and_validation() {
        let tree = TaxonomyTree::parse(&mini_taxonomy_config()).unwrap();
        let m = DatasetManifest {
            records: vec![ManifestRecord {
                path: "images/x.ppm".into(),
                mask_path: "masks/x.pgm".into(),
                leaf: "splice".into(),
                seed: 7,
                split: "train".into(),
            }],
        };
        let parsed = DatasetManifest::parse_tsv(&m.to_tsv()).unwrap();
        assert_eq!(parsed, m);
        // Missing files fail validation.
        let dir = tempfile::tempdir().unwrap();
        assert!(m.validate(dir.path(), &tree).is_err());
        assert!(DatasetManifest::parse_tsv("a\tb\tc\n").is_err());
    }

    #[test]
    fn build_dataset_is_deterministic_and_counts_add_up() {
        let tree = TaxonomyTree::parse(&mini_taxonomy_config()).unwrap();
        let cfg = DatasetConfig {
            height: 32,
            width: 32,
            per_forgery_leaf: 5,
            real_count: 10,
            ..DatasetConfig::default()
        };
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let ma = build_dataset(&cfg, &tree, 99, dir_a.path()).unwrap();
        let mb = build_dataset(&cfg, &tree, 99, dir_b.path()).unwrap();
        assert_eq!(ma, mb);
        assert_eq!(ma.records.len(), 10 + 6 * 5);
        ma.validate(dir_a.path(), &tree).unwrap();

        // Byte-identical files.
        for r in &ma.records {
            let a = fs::read(dir_a.path().join(&r.path)).unwrap();
            let b = fs::read(dir_b.path().join(&r.path)).unwrap();
            assert_eq!(a, b, "{}", r.path);
        }
        // Split sizes per leaf: 5 -> 4/0/1 with rounding, 10 -> 7/1/2.
        let real_train = ma.records.iter().filter(|r| r.leaf == "real" && r.split == "train").count();
        assert_eq!(real_train, 7);

        // Zero-count config produces an empty manifest.
        let empty_cfg = DatasetConfig {
            per_forgery_leaf: 0,
            real_count: 0,
            ..cfg
        };
        let dir_c = tempfile::tempdir().unwrap();
        let mc = build_dataset(&empty_cfg, &tree, 1, dir_c.path()).unwrap();
        assert!(mc.records.is_empty());
    }

    #[test]
    fn default_config_yields_4800_records() {
        let cfg = DatasetConfig::default();
        let tree = TaxonomyTree::parse(&mini_taxonomy_config()).unwrap();
        let forgeries = tree.forgery_leaves().len();
        assert_eq!(cfg.real_count + forgeries * cfg.per_forgery_leaf, 4800);
    }

    #[test]
    fn record_seeds_are_stable() {
        assert_eq!(seed_for(1, 0), seed_for(1, 0));
        assert_ne!(seed_for(1, 0), seed_for(1, 1));
        assert_ne!(seed_for(1, 0), seed_for(2, 0));
    }
}
