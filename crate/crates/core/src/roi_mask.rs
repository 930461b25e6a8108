//! Unsupervised region-of-interest masks: Otsu threshold, binarize, dilate, drop small blobs.

use std::collections::VecDeque;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{grayscale, Mask, Raster};
use crate::tensor::Tensor;

/// Which side of the threshold is foreground.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    #[default]
    Bright,
    Dark,
}

impl FromStr for Polarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bright" => Ok(Polarity::Bright),
            "dark" => Ok(Polarity::Dark),
            other => Err(Error::Config(format!("unknown polarity {other:?} (bright|dark)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskParams {
    pub bins: usize,
    pub kernel: (usize, usize),
    pub min_size: usize,
    pub polarity: Polarity,
}

impl Default for MaskParams {
    fn default() -> Self {
        MaskParams { bins: 256, kernel: (5, 5), min_size: 16, polarity: Polarity::Bright }
    }
}

impl MaskParams {
    /// Defaults with `min_size` scaled quadratically from 16 px at 64x64.
    pub fn for_size(h: usize, w: usize) -> Self {
        let min_size = ((16 * h * w) as f64 / (64.0 * 64.0)).round().max(1.0) as usize;
        MaskParams { min_size, ..Default::default() }
    }

    pub fn check(&self) -> Result<()> {
        if self.bins < 2 {
            return Err(Error::Config(format!("Otsu needs at least 2 bins, got {}", self.bins)));
        }
        if self.kernel.0 == 0 || self.kernel.1 == 0 {
            return Err(Error::Config(format!("empty dilation kernel {:?}", self.kernel)));
        }
        Ok(())
    }
}

/// Histogram over `bins` equal-width bins spanning `[min, max]` of the data.
pub struct Histogram {
    pub counts: Vec<u64>,
    pub min: f64,
    pub width: f64,
}

impl Histogram {
    pub fn new(values: &[f64], bins: usize) -> Result<Self> {
        if bins < 2 {
            return Err(Error::Config(format!("Otsu needs at least 2 bins, got {bins}")));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("image value {v}")));
        }
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(max > min) {
            return Err(Error::DegenerateHistogram("image has fewer than two distinct values".into()));
        }
        let width = (max - min) / bins as f64;
        let mut counts = vec![0u64; bins];
        for &v in values {
            counts[Self::bin_of(v, min, width, bins)] += 1;
        }
        Ok(Histogram { counts, min, width })
    }

    #[inline]
    pub fn bin_of(v: f64, min: f64, width: f64, bins: usize) -> usize {
        (((v - min) / width) as usize).min(bins - 1)
    }

    /// Upper edge of bin `k`.
    pub fn edge(&self, k: usize) -> f64 {
        self.min + (k + 1) as f64 * self.width
    }
}

/// Between-class variance (up to a constant factor) of a split into `(n0, s0)` and `(n1, s1)`,
/// where `n` counts pixels and `s` sums their bin indices.
#[inline]
pub fn between_class(n0: u64, s0: u64, n1: u64, s1: u64) -> f64 {
    if n0 == 0 || n1 == 0 {
        return 0.0;
    }
    let d = s0 as f64 * n1 as f64 - s1 as f64 * n0 as f64;
    d * d / (n0 as f64 * n1 as f64)
}

/// Index of the last background bin. The lowest run of consecutive maximising bins wins;
/// within that run (empty bins between two populations) the middle bin is taken.
pub fn otsu_bin(hist: &Histogram) -> usize {
    let n: u64 = hist.counts.iter().sum();
    let s: u64 = hist.counts.iter().enumerate().map(|(i, c)| i as u64 * c).sum();
    let (mut n0, mut s0) = (0u64, 0u64);
    let mut vars = Vec::with_capacity(hist.counts.len() - 1);
    for k in 0..hist.counts.len() - 1 {
        n0 += hist.counts[k];
        s0 += k as u64 * hist.counts[k];
        vars.push(between_class(n0, s0, n - n0, s - s0));
    }
    let (mut best, mut best_k) = (f64::NEG_INFINITY, 0);
    for (k, &v) in vars.iter().enumerate() {
        if v > best {
            best = v;
            best_k = k;
        }
    }
    let run = vars[best_k..].iter().take_while(|&&v| v == best).count();
    best_k + (run - 1) / 2
}

/// Otsu threshold of a grayscale raster: the upper edge of the chosen background bin.
pub fn otsu_threshold(img: &Raster<f64>, bins: usize) -> Result<f64> {
    let hist = Histogram::new(&img.data, bins)?;
    Ok(hist.edge(otsu_bin(&hist)))
}

pub fn binarize(img: &Raster<f64>, t: f64, polarity: Polarity) -> Mask {
    let data = img
        .data
        .iter()
        .map(|&v| match polarity {
            Polarity::Bright => u8::from(v > t),
            Polarity::Dark => u8::from(v <= t),
        })
        .collect();
    Raster { h: img.h, w: img.w, data }
}

/// Rectangular dilation; the window at `p` spans rows `p.y - kh/2 .. p.y - kh/2 + kh` (same for columns).
pub fn dilate(m: &Mask, kernel: (usize, usize)) -> Mask {
    let (kh, kw) = kernel;
    let (h, w) = (m.h, m.w);
    let span = |i: usize, k: usize, n: usize| {
        let lo = i.saturating_sub(k / 2);
        let hi = (i + k - k / 2).min(n);
        lo..hi
    };
    // separable: horizontal then vertical max
    let mut rows = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            rows[y * w + x] = u8::from(span(x, kw, w).any(|xx| m.data[y * w + xx] != 0));
        }
    }
    let mut out = Raster::new(h, w);
    for y in 0..h {
        for x in 0..w {
            out.data[y * w + x] = u8::from(span(y, kh, h).any(|yy| rows[yy * w + x] != 0));
        }
    }
    out
}

/// Removes 4-connected components with fewer than `min_size` pixels.
pub fn filter_components(m: &Mask, min_size: usize) -> Mask {
    let (h, w) = (m.h, m.w);
    let mut seen = vec![false; h * w];
    let mut out = Raster::new(h, w);
    let mut queue = VecDeque::new();
    let mut comp = Vec::new();
    for start in 0..h * w {
        if m.data[start] == 0 || seen[start] {
            continue;
        }
        comp.clear();
        seen[start] = true;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            comp.push(p);
            let (y, x) = (p / w, p % w);
            let mut visit = |q: usize| {
                if m.data[q] != 0 && !seen[q] {
                    seen[q] = true;
                    queue.push_back(q);
                }
            };
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
        }
        if comp.len() >= min_size {
            for &p in &comp {
                out.data[p] = 1;
            }
        }
    }
    out
}

/// Full pipeline on a `[C, H, W]` image.
pub fn gen_roi_mask(img: &Tensor, params: &MaskParams) -> Result<Mask> {
    params.check()?;
    let gray = grayscale(img)?;
    let t = otsu_threshold(&gray, params.bins)?;
    let m = binarize(&gray, t, params.polarity);
    Ok(filter_components(&dilate(&m, params.kernel), params.min_size))
}

/// File name of the mask for an image with stem `stem`.
pub fn mask_file_name(stem: &str) -> String {
    format!("{stem}.mask.png")
}
