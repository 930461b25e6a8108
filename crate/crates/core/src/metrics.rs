//! Evaluation metrics: pixel-weighted Dice, MSE, NCC and SSIM.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, Error, Result};
use crate::raster::{LabelMap, Raster};

/// Normalisation of the per-label overlap term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiceConvention {
    /// `2|F∩W| / (|F|+|W|)`; perfect overlap scores 1.
    #[default]
    Standard,
    /// `|F∩W| / (|F|+|W|)`; perfect overlap scores 0.5.
    AsPrinted,
}

impl FromStr for DiceConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(DiceConvention::Standard),
            "as-printed" => Ok(DiceConvention::AsPrinted),
            other => Err(Error::Config(format!("unknown Dice convention {other:?} (standard|as-printed)"))),
        }
    }
}

/// Dice of `w` against ground truth `f`, averaged over the labels of `f` weighted by their pixel count.
pub fn weighted_dice(f: &LabelMap, w: &LabelMap, convention: DiceConvention) -> Result<f64> {
    ensure_shape!(f.same_size(w), "label maps {}x{} vs {}x{}", f.h, f.w, w.h, w.w);
    // label -> (|F_i|, |W_i|, |F_i ∩ W_i|)
    let mut counts: BTreeMap<u32, (u64, u64, u64)> = BTreeMap::new();
    for (&a, &b) in f.data.iter().zip(&w.data) {
        if a != 0 {
            let e = counts.entry(a).or_default();
            e.0 += 1;
            if a == b {
                e.2 += 1;
            }
        }
    }
    for &b in &w.data {
        if let Some(e) = counts.get_mut(&b) {
            e.1 += 1;
        }
    }
    let total: u64 = counts.values().map(|e| e.0).sum();
    if total == 0 {
        return Err(Error::UndefinedMetric("ground-truth label map has no foreground".into()));
    }
    let k = match convention {
        DiceConvention::Standard => 2.0,
        DiceConvention::AsPrinted => 1.0,
    };
    Ok(counts
        .values()
        .map(|&(nf, nw, inter)| nf as f64 / total as f64 * k * inter as f64 / (nf + nw) as f64)
        .sum())
}

fn check_pair(a: &Raster<f64>, b: &Raster<f64>) -> Result<()> {
    ensure_shape!(a.same_size(b), "images {}x{} vs {}x{}", a.h, a.w, b.h, b.w);
    ensure_shape!(!a.data.is_empty(), "empty image");
    Ok(())
}

pub fn mse(a: &Raster<f64>, b: &Raster<f64>) -> Result<f64> {
    check_pair(a, b)?;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len() as f64)
}

/// Zero-mean normalised cross-correlation over all pixels.
pub fn ncc(a: &Raster<f64>, b: &Raster<f64>) -> Result<f64> {
    check_pair(a, b)?;
    let constant = |v: &[f64]| v.iter().all(|x| *x == v[0]);
    if constant(&a.data) || constant(&b.data) {
        return Err(Error::UndefinedMetric("NCC of a constant image".into()));
    }
    let n = a.data.len() as f64;
    let ma = a.data.iter().sum::<f64>() / n;
    let mb = b.data.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.data.iter().zip(&b.data) {
        let (da, db) = (x - ma, y - mb);
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::UndefinedMetric("NCC of a constant image".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03, range: 1.0 }
    }
}

pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size).map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for xo in 0..wo {
            rows[y * wo + xo] = g.iter().enumerate().map(|(i, gi)| gi * x[y * w + xo + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for yo in 0..ho {
        for xo in 0..wo {
            out[yo * wo + xo] = g.iter().enumerate().map(|(i, gi)| gi * rows[(yo + i) * wo + xo]).sum();
        }
    }
    out
}

/// Mean SSIM over all fully contained Gaussian windows.
pub fn ssim(a: &Raster<f64>, b: &Raster<f64>, p: &SsimParams) -> Result<f64> {
    check_pair(a, b)?;
    if a.h < p.window || a.w < p.window {
        return Err(Error::Precondition(format!("{}x{} image is smaller than the {} px SSIM window", a.h, a.w, p.window)));
    }
    let g = gaussian_window(p.window, p.sigma);
    let (h, w) = (a.h, a.w);
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { a.data.iter().zip(&b.data).map(|(x, y)| f(*x, *y)).collect() };
    let mu_a = filter_valid(&a.data, h, w, &g);
    let mu_b = filter_valid(&b.data, h, w, &g);
    let aa = filter_valid(&prod(&|x, _| x * x), h, w, &g);
    let bb = filter_valid(&prod(&|_, y| y * y), h, w, &g);
    let ab = filter_valid(&prod(&|x, y| x * y), h, w, &g);
    let c1 = (p.k1 * p.range).powi(2);
    let c2 = (p.k2 * p.range).powi(2);
    let n = mu_a.len();
    let mut acc = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(acc / n as f64)
}

/// Metrics of one registered pair. `dice` is in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub id: String,
    pub dice: Option<f64>,
    pub mse: f64,
    pub ncc: f64,
    pub ssim: f64,
}

impl PairMetrics {
    pub fn has_nan(&self) -> bool {
        self.dice.is_some_and(f64::is_nan) || self.mse.is_nan() || self.ncc.is_nan() || self.ssim.is_nan()
    }
}

/// Image metrics between the warped moving image and the fixed image, plus Dice when both label maps exist.
pub fn evaluate_images(
    id: &str,
    warped: &Raster<f64>,
    fixed: &Raster<f64>,
    labels: Option<(&LabelMap, &LabelMap)>,
    convention: DiceConvention,
) -> Result<PairMetrics> {
    let dice = match labels {
        Some((warped_l, fixed_l)) => Some(weighted_dice(fixed_l, warped_l, convention)?),
        None => None,
    };
    Ok(PairMetrics {
        id: id.to_string(),
        dice,
        mse: mse(warped, fixed)?,
        ncc: ncc(warped, fixed)?,
        ssim: ssim(warped, fixed, &SsimParams::default())?,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub pairs: Vec<PairMetrics>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub dice: Option<f64>,
    pub mse: f64,
    pub ncc: f64,
    pub ssim: f64,
    pub n: usize,
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 { f64::NAN } else { s / n as f64 }
}

impl MetricReport {
    pub fn push(&mut self, m: PairMetrics) {
        self.pairs.push(m);
    }

    pub fn has_nan(&self) -> bool {
        self.pairs.iter().any(PairMetrics::has_nan)
    }

    pub fn summary(&self) -> MetricSummary {
        let dices: Vec<f64> = self.pairs.iter().filter_map(|p| p.dice).collect();
        MetricSummary {
            dice: (!dices.is_empty()).then(|| mean(dices.iter().copied())),
            mse: mean(self.pairs.iter().map(|p| p.mse)),
            ncc: mean(self.pairs.iter().map(|p| p.ncc)),
            ssim: mean(self.pairs.iter().map(|p| p.ssim)),
            n: self.pairs.len(),
        }
    }

    /// Tab-separated per-pair table (Dice ×100) followed by a `#`-prefixed summary block.
    pub fn to_tsv(&self) -> String {
        let fmt_dice = |d: Option<f64>| d.map_or_else(|| "NA".to_string(), |v| format!("{:.4}", 100.0 * v));
        let mut s = String::from("pair\tdice\tmse\tncc\tssim\n");
        for p in &self.pairs {
            let _ = writeln!(s, "{}\t{}\t{:.6e}\t{:.6}\t{:.6}", p.id, fmt_dice(p.dice), p.mse, p.ncc, p.ssim);
        }
        let m = self.summary();
        let _ = writeln!(s, "# pairs\t{}", m.n);
        let _ = writeln!(s, "# dice\t{}", fmt_dice(m.dice));
        let _ = writeln!(s, "# mse\t{:.6e}", m.mse);
        let _ = writeln!(s, "# ncc\t{:.6}", m.ncc);
        let _ = writeln!(s, "# ssim\t{:.6}", m.ssim);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(h: usize, w: usize, v: &[u32]) -> LabelMap {
        Raster::from_vec(h, w, v.to_vec()).unwrap()
    }

    fn img(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Raster<f64> {
        let mut r = Raster::new(h, w);
        for y in 0..h {
            for x in 0..w {
                r.set(y, x, f(y, x));
            }
        }
        r
    }

    #[test]
    fn dice_hand_cases() {
        let f = labels(2, 4, &[1, 1, 0, 0, 1, 1, 0, 0]);
        assert_eq!(weighted_dice(&f, &f, DiceConvention::Standard).unwrap(), 1.0);
        assert_eq!(weighted_dice(&f, &f, DiceConvention::AsPrinted).unwrap(), 0.5);
        let disjoint = labels(2, 4, &[0, 0, 1, 1, 0, 0, 1, 1]);
        assert_eq!(weighted_dice(&f, &disjoint, DiceConvention::Standard).unwrap(), 0.0);
        let shifted = labels(2, 4, &[0, 1, 1, 0, 0, 1, 1, 0]);
        assert_eq!(weighted_dice(&f, &shifted, DiceConvention::Standard).unwrap(), 0.5);
        let empty = labels(2, 4, &[0; 8]);
        assert!(matches!(weighted_dice(&empty, &f, DiceConvention::Standard), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn ncc_cases() {
        let a = img(5, 6, |y, x| (y * 7 + x * 3) as f64 % 5.0);
        assert!((ncc(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let neg = Raster { data: a.data.iter().map(|v| 3.0 - v).collect(), ..a.clone() };
        assert!((ncc(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
        let flat = img(5, 6, |_, _| 0.5);
        assert!(matches!(ncc(&a, &flat), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn ssim_cases() {
        let a = img(16, 16, |y, x| if (y / 4 + x / 4) % 2 == 0 { 1.0 } else { 0.0 });
        assert!((ssim(&a, &a, &SsimParams::default()).unwrap() - 1.0).abs() < 1e-12);
        let neg = Raster { data: a.data.iter().map(|v| 1.0 - v).collect(), ..a.clone() };
        assert!(ssim(&a, &neg, &SsimParams::default()).unwrap() < 0.0);
        assert!(ssim(&img(8, 8, |_, _| 0.0), &img(8, 8, |_, _| 0.0), &SsimParams::default()).is_err());
    }

    #[test]
    fn gaussian_window_is_normalised_and_symmetric() {
        let g = gaussian_window(11, 1.5);
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(g[0], g[10]);
        assert!(g[5] > g[4]);
    }

    #[test]
    fn report_summary_and_tsv() {
        let mut r = MetricReport::default();
        r.push(PairMetrics { id: "a".into(), dice: Some(0.5), mse: 0.1, ncc: 0.2, ssim: 0.3 });
        r.push(PairMetrics { id: "b".into(), dice: Some(1.0), mse: 0.3, ncc: 0.4, ssim: 0.5 });
        let s = r.summary();
        assert_eq!(s.dice, Some(0.75));
        assert!((s.mse - 0.2).abs() < 1e-15);
        let t = r.to_tsv();
        assert!(t.starts_with("pair\tdice"));
        assert!(t.contains("# dice\t75.0000"));
        assert!(!r.has_nan());
        r.push(PairMetrics { id: "c".into(), dice: None, mse: f64::NAN, ncc: 0.0, ssim: 0.0 });
        assert!(r.has_nan());
    }

    #[test]
    fn convention_parsing() {
        assert_eq!("as-printed".parse::<DiceConvention>().unwrap(), DiceConvention::AsPrinted);
        assert!("half".parse::<DiceConvention>().is_err());
    }
}
