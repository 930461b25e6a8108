//! Synthetic RGB/IR plant pairs with a known smooth deformation.
//!
//! A rosette of elliptical leaves is drawn in the fixed frame. The moving frame is
//! the same scene resampled through `phi_true`, i.e. `moving(p) = scene(p + phi_true(p))`.
//! The moving side is rendered as a colour image on dark soil, the fixed side as a
//! noisy single-channel thermal-like image with bright leaves.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{LabelMap, Raster};
use crate::registration::{stn_warp, warp::warp_nearest, DeformationField};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub size: usize,
    /// Inclusive range of leaf count.
    pub instances: (usize, usize),
    /// Largest displacement norm of the true field, in pixels.
    pub magnitude: f64,
    /// Standard deviation of the Gaussian that smooths the random field, in pixels.
    pub smoothing: f64,
    /// Exponent of the fixed-side intensity curve.
    pub ir_gamma: f64,
    /// Standard deviation of additive noise on the fixed side.
    pub ir_noise: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams { size: 64, instances: (3, 6), magnitude: 4.0, smoothing: 8.0, ir_gamma: 1.5, ir_noise: 0.02 }
    }
}

impl SynthParams {
    pub fn check(&self) -> Result<()> {
        if self.size < 8 {
            return Err(Error::Config(format!("synthetic size must be at least 8, got {}", self.size)));
        }
        if self.instances.0 == 0 || self.instances.0 > self.instances.1 {
            return Err(Error::Config(format!("bad instance range {:?}", self.instances)));
        }
        if !(self.magnitude >= 0.0) {
            return Err(Error::Config(format!("deformation magnitude must be >= 0, got {}", self.magnitude)));
        }
        if !(self.smoothing > 0.0) {
            return Err(Error::Config(format!("smoothing must be > 0, got {}", self.smoothing)));
        }
        if !(self.ir_gamma > 0.0) || !(self.ir_noise >= 0.0) {
            return Err(Error::Config("fixed-side intensity curve needs gamma > 0 and noise >= 0".into()));
        }
        Ok(())
    }
}

pub struct SynthPair {
    /// `[3, H, W]`.
    pub moving: Tensor,
    /// `[1, H, W]`.
    pub fixed: Tensor,
    pub moving_labels: LabelMap,
    pub fixed_labels: LabelMap,
    pub phi_true: DeformationField,
}

struct Leaf {
    cy: f64,
    cx: f64,
    cos: f64,
    sin: f64,
    a: f64,
    b: f64,
    tone: f64,
}

impl Leaf {
    /// Local coordinates scaled so the boundary is at radius 1.
    fn local(&self, y: f64, x: f64) -> (f64, f64) {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.a, v / self.b)
    }
}

/// Per-pixel leaf id and a smooth shading term in `[0, 1]`.
fn render_scene<R: Rng + ?Sized>(p: &SynthParams, rng: &mut R) -> (LabelMap, Raster<f64>, Raster<f64>) {
    let n = p.size;
    let s = n as f64;
    let k = rng.random_range(p.instances.0..=p.instances.1);
    let c = s / 2.0 + rng.random_range(-0.05..0.05) * s;
    let phase = rng.random_range(0.0..2.0 * PI);
    let leaves: Vec<Leaf> = (0..k)
        .map(|i| {
            let theta = phase + 2.0 * PI * i as f64 / k as f64 + rng.random_range(-0.2..0.2);
            let a = rng.random_range(0.13..0.2) * s;
            let r = a * rng.random_range(0.85..1.1);
            Leaf {
                cy: c + r * theta.sin(),
                cx: c + r * theta.cos(),
                cos: theta.cos(),
                sin: theta.sin(),
                a,
                b: rng.random_range(0.06..0.09) * s,
                tone: rng.random_range(0.0..1.0),
            }
        })
        .collect();
    let mut labels = LabelMap::new(n, n);
    let mut shade = Raster::new(n, n);
    let mut vein = Raster::new(n, n);
    for y in 0..n {
        for x in 0..n {
            // later leaves cover earlier ones
            for (i, leaf) in leaves.iter().enumerate().rev() {
                let (u, v) = leaf.local(y as f64 + 0.5, x as f64 + 0.5);
                let r2 = u * u + v * v;
                if r2 <= 1.0 {
                    labels.set(y, x, i as u32 + 1);
                    shade.set(y, x, 0.35 + 0.35 * leaf.tone + 0.3 * (1.0 - r2));
                    vein.set(y, x, (-(v * v) / 0.02).exp() * u8::from(u > -0.8) as f64);
                    break;
                }
            }
        }
    }
    (labels, shade, vein)
}

fn render_moving(labels: &LabelMap, shade: &Raster<f64>, vein: &Raster<f64>) -> Tensor {
    let (h, w) = (labels.h, labels.w);
    let plane = h * w;
    let mut out = vec![0.0; 3 * plane];
    for p in 0..plane {
        let (r, g, b) = if labels.data[p] == 0 {
            let grain = 0.04 * (((p % w) * 7 + (p / w) * 13) % 5) as f64 / 4.0;
            (0.2 - grain, 0.14 - grain, 0.09 - grain)
        } else {
            let s = shade.data[p];
            let v = vein.data[p];
            (0.25 + 0.25 * s + 0.1 * v, 0.5 + 0.4 * s + 0.05 * v, 0.12 + 0.15 * s + 0.1 * v)
        };
        out[p] = r;
        out[plane + p] = g;
        out[2 * plane + p] = b;
    }
    Tensor::from_vec(&[3, h, w], out).expect("size")
}

/// Thermal-like intensity before warping: leaves bright, soil dark.
fn render_fixed_base(labels: &LabelMap, shade: &Raster<f64>, vein: &Raster<f64>, gamma: f64) -> Tensor {
    let data = (0..labels.data.len())
        .map(|p| {
            if labels.data[p] == 0 {
                0.08
            } else {
                0.25 + 0.65 * shade.data[p].powf(gamma) - 0.15 * vein.data[p]
            }
        })
        .collect();
    Tensor::from_vec(&[1, labels.h, labels.w], data).expect("size")
}

/// Separable Gaussian blur with clamped borders.
pub fn gaussian_blur(x: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = k.iter().sum();
    let k: Vec<f64> = k.into_iter().map(|v| v / norm).collect();
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for xx in 0..w {
            tmp[y * w + xx] = (-r..=r).zip(&k).map(|(d, kv)| kv * x[y * w + clamp(xx as isize + d, w)]).sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for xx in 0..w {
            out[y * w + xx] = (-r..=r).zip(&k).map(|(d, kv)| kv * tmp[clamp(y as isize + d, h) * w + xx]).sum();
        }
    }
    out
}

/// Smooth random field with largest displacement norm equal to `magnitude`.
pub fn random_field<R: Rng + ?Sized>(h: usize, w: usize, magnitude: f64, smoothing: f64, rng: &mut R) -> DeformationField {
    if magnitude == 0.0 {
        return DeformationField::zeros(h, w);
    }
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    // blur on a padded canvas so clamped borders do not inflate the edge values
    let pad = (3.0 * smoothing).ceil() as usize;
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut data = Vec::with_capacity(2 * h * w);
    for _ in 0..2 {
        let noise: Vec<f64> = (0..hp * wp).map(|_| normal.sample(rng)).collect();
        let blurred = gaussian_blur(&noise, hp, wp, smoothing);
        for y in pad..pad + h {
            data.extend_from_slice(&blurred[y * wp + pad..y * wp + pad + w]);
        }
    }
    let field = DeformationField { phi: Tensor::from_vec(&[2, h, w], data).expect("size") };
    let m = field.max_norm();
    let scale = if m > 0.0 { magnitude / m } else { 0.0 };
    let phi = field.phi.data().iter().map(|v| v * scale).collect();
    DeformationField { phi: Tensor::from_vec(&[2, h, w], phi).expect("size") }
}

pub fn synth_pair<R: Rng + ?Sized>(p: &SynthParams, rng: &mut R) -> Result<SynthPair> {
    p.check()?;
    let n = p.size;
    let (labels, shade, vein) = render_scene(p, rng);
    let phi_true = random_field(n, n, p.magnitude, p.smoothing, rng);
    let moving = stn_warp(&render_moving(&labels, &shade, &vein), &phi_true)?;
    let base = render_fixed_base(&labels, &shade, &vein, p.ir_gamma);
    let fixed_data = if p.ir_noise > 0.0 {
        let noise = Normal::new(0.0, p.ir_noise).expect("positive std");
        base.data().iter().map(|v| (v + noise.sample(rng)).clamp(0.0, 1.0)).collect()
    } else {
        base.into_data()
    };
    let fixed = Tensor::from_vec(&[1, n, n], fixed_data)?;
    let moving_labels = Raster::from_vec(n, n, warp_nearest(&labels.data, phi_true.phi.data(), n, n))?;
    Ok(SynthPair { moving, fixed, moving_labels, fixed_labels: labels, phi_true })
}
