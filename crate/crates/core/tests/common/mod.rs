//! Shared oracles and finite-difference helpers for the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use mambareg::raster::{LabelMap, Mask, Raster};
use mambareg::tape::{Tape, Var};
use mambareg::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Result of one finite-difference comparison.
#[derive(Debug)]
pub struct GradReport {
    pub name: String,
    pub worst: f64,
}

/// Compares tape gradients of `f` with central differences on (a sample of) every input.
/// Returns the largest relative error `|a - n| / max(|a|, |n|)` over inputs, measured on
/// the sampled coordinates as vectors.
pub fn grad_check(
    name: &str,
    inputs: &[Tensor],
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
    max_coords: usize,
    seed: u64,
) -> GradReport {
    let eval = |vals: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars).unwrap();
        tape.scalar(out)
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = f(&mut tape, &vars).unwrap();
    let grads = tape.backward(out);
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    let h = 1e-4;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.of(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        let coords: Vec<usize> = if x.len() <= max_coords {
            (0..x.len()).collect()
        } else {
            let mut set = BTreeSet::new();
            while set.len() < max_coords {
                set.insert(r.random_range(0..x.len()));
            }
            set.into_iter().collect()
        };
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for &i in &coords {
            let mut vals = inputs.to_vec();
            vals[k].data_mut()[i] = x.data()[i] + h;
            let fp = eval(&vals);
            vals[k].data_mut()[i] = x.data()[i] - h;
            let fm = eval(&vals);
            let num = (fp - fm) / (2.0 * h);
            let a = analytic.data()[i];
            diff += (a - num) * (a - num);
            na += a * a;
            nn += num * num;
        }
        let scale = na.sqrt().max(nn.sqrt());
        let rel = if scale < 1e-12 { diff.sqrt() } else { diff.sqrt() / scale };
        worst = worst.max(rel);
    }
    GradReport { name: name.to_string(), worst }
}

/// Plain recurrence over `[B, L, D]` with `A = -exp(a_log)`.
pub fn naive_scan(u: &Tensor, delta: &Tensor, a_log: &Tensor, b: &Tensor, c: &Tensor, d_skip: &Tensor) -> Tensor {
    let (bn, l, d) = (u.shape()[0], u.shape()[1], u.shape()[2]);
    let s = a_log.shape()[1];
    let mut y = vec![0.0; bn * l * d];
    for n in 0..bn {
        for ch in 0..d {
            let mut h = vec![0.0; s];
            for t in 0..l {
                let dt = delta.data()[(n * l + t) * d + ch];
                let ut = u.data()[(n * l + t) * d + ch];
                let mut acc = 0.0;
                for k in 0..s {
                    let a = -a_log.data()[ch * s + k].exp();
                    h[k] = (dt * a).exp() * h[k] + dt * b.data()[(n * l + t) * s + k] * ut;
                    acc += c.data()[(n * l + t) * s + k] * h[k];
                }
                y[(n * l + t) * d + ch] = acc + d_skip.data()[ch] * ut;
            }
        }
    }
    Tensor::from_vec(&[bn, l, d], y).unwrap()
}

/// Weighted Dice from explicit pixel sets.
pub fn dice_oracle(f: &LabelMap, w: &LabelMap, factor: f64) -> f64 {
    let mut sets_f: BTreeMap<u32, BTreeSet<usize>> = BTreeMap::new();
    let mut sets_w: BTreeMap<u32, BTreeSet<usize>> = BTreeMap::new();
    for (p, &v) in f.data.iter().enumerate() {
        if v != 0 {
            sets_f.entry(v).or_default().insert(p);
        }
    }
    for (p, &v) in w.data.iter().enumerate() {
        sets_w.entry(v).or_default().insert(p);
    }
    let total: usize = sets_f.values().map(BTreeSet::len).sum();
    let empty = BTreeSet::new();
    let mut acc = 0.0;
    for (id, fi) in &sets_f {
        let wi = sets_w.get(id).unwrap_or(&empty);
        let inter = fi.intersection(wi).count();
        acc += fi.len() as f64 / total as f64 * factor * inter as f64 / (fi.len() + wi.len()) as f64;
    }
    acc
}

/// Exhaustive Otsu over every split of the histogram, recounting pixels per split. Takes
/// the middle of the lowest run of consecutive maximising splits.
pub fn otsu_oracle(img: &Raster<f64>, bins: usize) -> f64 {
    let min = img.data.iter().copied().fold(f64::INFINITY, f64::min);
    let max = img.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (max - min) / bins as f64;
    let bin = |v: f64| (((v - min) / width) as usize).min(bins - 1);
    let mut var = Vec::new();
    for k in 0..bins - 1 {
        let (mut n0, mut s0, mut n1, mut s1) = (0u64, 0u64, 0u64, 0u64);
        for &v in &img.data {
            let b = bin(v) as u64;
            if b as usize <= k {
                n0 += 1;
                s0 += b;
            } else {
                n1 += 1;
                s1 += b;
            }
        }
        var.push(if n0 == 0 || n1 == 0 {
            0.0
        } else {
            let d = s0 as f64 * n1 as f64 - s1 as f64 * n0 as f64;
            d * d / (n0 as f64 * n1 as f64)
        });
    }
    let best = var.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let first = var.iter().position(|&v| v == best).unwrap();
    let mut last = first;
    while last + 1 < var.len() && var[last + 1] == best {
        last += 1;
    }
    min + ((first + last) / 2 + 1) as f64 * width
}

/// Window maximum evaluated pixel by pixel.
pub fn dilate_oracle(m: &Mask, kh: usize, kw: usize) -> Mask {
    let mut out = Mask::new(m.h, m.w);
    for y in 0..m.h as isize {
        for x in 0..m.w as isize {
            let mut any = 0;
            for dy in -(kh as isize / 2)..(kh as isize - kh as isize / 2) {
                for dx in -(kw as isize / 2)..(kw as isize - kw as isize / 2) {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy >= 0 && xx >= 0 && (yy as usize) < m.h && (xx as usize) < m.w && m.get(yy as usize, xx as usize) != 0 {
                        any = 1;
                    }
                }
            }
            out.set(y as usize, x as usize, any);
        }
    }
    out
}

/// Flood fill with an explicit stack and label image.
pub fn components_oracle(m: &Mask, min_size: usize) -> Mask {
    let mut label = vec![0usize; m.h * m.w];
    let mut sizes = vec![0usize];
    for start in 0..m.h * m.w {
        if m.data[start] == 0 || label[start] != 0 {
            continue;
        }
        let id = sizes.len();
        sizes.push(0);
        let mut q = VecDeque::from([start]);
        label[start] = id;
        while let Some(p) = q.pop_back() {
            sizes[id] += 1;
            let (y, x) = ((p / m.w) as isize, (p % m.w) as isize);
            for (dy, dx) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
                let (yy, xx) = (y + dy, x + dx);
                if yy < 0 || xx < 0 || yy as usize >= m.h || xx as usize >= m.w {
                    continue;
                }
                let qi = yy as usize * m.w + xx as usize;
                if m.data[qi] != 0 && label[qi] == 0 {
                    label[qi] = id;
                    q.push_back(qi);
                }
            }
        }
    }
    let data = label.iter().map(|&l| u8::from(l != 0 && sizes[l] >= min_size)).collect();
    Raster::from_vec(m.h, m.w, data).unwrap()
}

/// Gaussian-smoothed random image in `[0, 1]`.
pub fn smooth_image(h: usize, w: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let noise: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect();
    let s = mambareg::data::synth::gaussian_blur(&noise, h, w, sigma);
    let (lo, hi) = s.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    Tensor::from_vec(&[1, h, w], s.iter().map(|v| (v - lo) / (hi - lo)).collect()).unwrap()
}

/// Mean over values, or NaN for an empty slice.
pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Random displacement field with no component on an integer.
fn fractional_field(n: usize, h: usize, w: usize, amp: f64, rng: &mut ChaCha8Rng) -> Tensor {
    // integer part plus a fraction in (0.15, 0.85) keeps bilinear weights differentiable
    let data = (0..n * 2 * h * w)
        .map(|_| {
            let whole = rng.random_range(-amp..=amp).round();
            whole + rng.random_range(0.15..0.85)
        })
        .collect();
    Tensor::from_vec(&[n, 2, h, w], data).unwrap()
}

/// Finite-difference checks on 8x8 instances of the scan, one LCSC step, the warp with
/// respect to the field, and the four registration losses.
pub fn core_grad_checks(seed: u64) -> Vec<GradReport> {
    use mambareg::losses;
    use mambareg::sparse_coding::{lcsc_step, DictVars};
    use mambareg::ssm::ScanPath;
    let mut r = rng(seed);
    let mut out = Vec::new();
    let (n, l, d, s) = (2, 64, 4, 4);
    let scan_in = vec![
        uniform(&[n, l, d], -1.0, 1.0, &mut r),
        uniform(&[n, l, d], -1.0, 0.5, &mut r),
        uniform(&[d, s], -1.0, 1.0, &mut r),
        uniform(&[n, l, s], -1.0, 1.0, &mut r),
        uniform(&[n, l, s], -1.0, 1.0, &mut r),
        uniform(&[d], -1.0, 1.0, &mut r),
    ];
    let target = uniform(&[n, l, d], -1.0, 1.0, &mut r);
    for path in [ScanPath::Sequential, ScanPath::Chunked] {
        let t = target.clone();
        out.push(grad_check(
            &format!("selective_scan/{path:?}"),
            &scan_in,
            move |tape, v| {
                let delta = tape.softplus(v[1]);
                let y = tape.selective_scan(v[0], delta, v[2], v[3], v[4], v[5], path)?;
                let t = tape.constant(t.clone());
                tape.mse(y, t)
            },
            48,
            seed + 1,
        ));
    }
    let (cx, cz, k, h, w) = (2, 3, 3, 8, 8);
    let lcsc_in = vec![
        uniform(&[1, cz, h, w], -1.0, 1.0, &mut r),
        uniform(&[1, cx, h, w], -1.0, 1.0, &mut r),
        uniform(&[cz, cx, k, k], -0.3, 0.3, &mut r),
        uniform(&[cx, cz, k, k], -0.3, 0.3, &mut r),
        uniform(&[cz], 0.05, 0.2, &mut r),
    ];
    let target = uniform(&[1, cz, h, w], -1.0, 1.0, &mut r);
    out.push(grad_check(
        "lcsc_step",
        &lcsc_in,
        move |tape, v| {
            let dict = DictVars { encode: v[2], decode: v[3], theta: v[4] };
            let z = lcsc_step(tape, v[0], v[1], &dict)?;
            let t = tape.constant(target.clone());
            tape.mse(z, t)
        },
        48,
        seed + 2,
    ));
    let img = smooth_image(h, w, 1.0, &mut r).reshape(&[1, 1, h, w]).unwrap();
    let phi = fractional_field(1, h, w, 1.0, &mut r);
    let target = uniform(&[1, 1, h, w], 0.0, 1.0, &mut r);
    out.push(grad_check(
        "stn_warp/phi",
        std::slice::from_ref(&phi),
        {
            let (img, target) = (img.clone(), target.clone());
            move |tape, v| {
                let i = tape.constant(img.clone());
                let y = tape.warp(i, v[0])?;
                let t = tape.constant(target.clone());
                tape.mse(y, t)
            }
        },
        128,
        seed + 3,
    ));
    let gt = uniform(&[1, 1, h, w], 0.0, 1.0, &mut r);
    let mask = Tensor::from_vec(&[1, 1, h, w], (0..h * w).map(|_| f64::from(u8::from(r.random_bool(0.5)))).collect()).unwrap();
    out.push(grad_check(
        "loss/sim",
        std::slice::from_ref(&img),
        move |tape, v| {
            let g = tape.constant(gt.clone());
            losses::sim(tape, v[0], g, Some(&mask))
        },
        64,
        seed + 4,
    ));
    out.push(grad_check("loss/smooth", &[uniform(&[1, 2, h, w], -2.0, 2.0, &mut r)], |tape, v| tape.smooth(v[0]), 128, seed + 5));
    let feats: Vec<Tensor> = (0..4).map(|_| uniform(&[1, 2, h, w], -1.0, 1.0, &mut r)).collect();
    out.push(grad_check(
        "loss/guidance",
        &feats,
        |tape, v| losses::guidance(tape, (v[0], v[1]), (v[2], v[3])),
        64,
        seed + 6,
    ));
    out.push(grad_check(
        "loss/recon",
        &feats,
        |tape, v| losses::recon(tape, v[0], v[1], v[2], v[3]),
        64,
        seed + 7,
    ));
    out
}

/// Runs `cases` random scans through both kernel paths with small block lengths and
/// returns the largest absolute deviation from [`naive_scan`].
pub fn scan_oracle(cases: usize, seed: u64) -> f64 {
    use mambareg::ssm::{scan_values, ScanPath};
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let (n, l, d, s) = (r.random_range(1..=2), r.random_range(1..=64), r.random_range(1..=8), r.random_range(1..=8));
        let u = uniform(&[n, l, d], -2.0, 2.0, &mut r);
        let delta = uniform(&[n, l, d], 1e-3, 1.5, &mut r);
        let a_log = uniform(&[d, s], -3.0, 1.5, &mut r);
        let b = uniform(&[n, l, s], -1.5, 1.5, &mut r);
        let c = uniform(&[n, l, s], -1.5, 1.5, &mut r);
        let dk = uniform(&[d], -1.0, 1.0, &mut r);
        let want = naive_scan(&u, &delta, &a_log, &b, &c, &dk);
        let chunk = r.random_range(1..=16);
        for path in [ScanPath::Sequential, ScanPath::Chunked] {
            let got = scan_values(&u, &delta, &a_log, &b, &c, &dk, path, chunk).unwrap();
            worst = worst.max(got.max_abs_diff(&want));
        }
    }
    worst
}

pub fn random_labels(h: usize, w: usize, max_id: u32, rng: &mut ChaCha8Rng) -> LabelMap {
    // blocky maps so that instances overlap partially instead of being pure noise
    let cell = rng.random_range(1..=3);
    let mut m = LabelMap::new(h, w);
    for y in 0..h {
        for x in 0..w {
            if (y % cell == 0 && x % cell == 0) || rng.random_bool(0.3) {
                m.set(y, x, rng.random_range(0..=max_id));
            } else {
                let v = if x > 0 { m.get(y, x - 1) } else if y > 0 { m.get(y - 1, x) } else { 0 };
                m.set(y, x, v);
            }
        }
    }
    m
}

/// Number of random label pairs on which `weighted_dice` differs from the set oracle.
pub fn dice_mismatches(cases: usize, seed: u64) -> usize {
    use mambareg::metrics::{weighted_dice, DiceConvention};
    let mut r = rng(seed);
    let mut bad = 0;
    let mut done = 0;
    while done < cases {
        let (h, w) = (r.random_range(2..=12), r.random_range(2..=12));
        let f = random_labels(h, w, 5, &mut r);
        let wm = random_labels(h, w, 5, &mut r);
        if f.data.iter().all(|&v| v == 0) {
            continue;
        }
        done += 1;
        for (conv, factor) in [(DiceConvention::Standard, 2.0), (DiceConvention::AsPrinted, 1.0)] {
            let got = weighted_dice(&f, &wm, conv).unwrap();
            if got != dice_oracle(&f, &wm, factor) {
                bad += 1;
            }
        }
    }
    bad
}

/// Number of random images whose Otsu threshold differs from the exhaustive search.
pub fn otsu_mismatches(cases: usize, seed: u64) -> usize {
    use mambareg::roi_mask::otsu_threshold;
    let mut r = rng(seed);
    (0..cases)
        .filter(|_| {
            let (h, w) = (r.random_range(3..=24), r.random_range(3..=24));
            let modes = [r.random_range(0.0..0.5), r.random_range(0.5..1.0)];
            let data = (0..h * w).map(|_| modes[r.random_range(0..2)] + r.random_range(-0.15..0.15)).collect();
            let img = Raster::from_vec(h, w, data).unwrap();
            otsu_threshold(&img, 256).unwrap() != otsu_oracle(&img, 256)
        })
        .count()
}

pub fn random_mask(h: usize, w: usize, p: f64, rng: &mut ChaCha8Rng) -> Mask {
    Raster::from_vec(h, w, (0..h * w).map(|_| u8::from(rng.random_bool(p))).collect()).unwrap()
}

/// Number of random masks on which dilation or component filtering differs from the oracles.
pub fn morphology_mismatches(cases: usize, seed: u64) -> usize {
    use mambareg::roi_mask::{dilate, filter_components};
    let mut r = rng(seed);
    (0..cases)
        .filter(|_| {
            let (h, w) = (r.random_range(1..=20), r.random_range(1..=20));
            let m = random_mask(h, w, r.random_range(0.05..0.6), &mut r);
            let (kh, kw) = (r.random_range(1..=7), r.random_range(1..=7));
            let min_size = r.random_range(1..=12);
            dilate(&m, (kh, kw)) != dilate_oracle(&m, kh, kw) || filter_components(&m, min_size) != components_oracle(&m, min_size)
        })
        .count()
}

/// Whether a zero field reproduces every pixel bit for bit on random images.
pub fn warp_identity_exact(seed: u64) -> bool {
    use mambareg::registration::{stn_warp, DeformationField};
    let mut r = rng(seed);
    (0..10).all(|_| {
        let (c, h, w) = (r.random_range(1..=3), r.random_range(1..=16), r.random_range(1..=16));
        let img = uniform(&[c, h, w], -5.0, 5.0, &mut r);
        stn_warp(&img, &DeformationField::zeros(h, w)).unwrap() == img
    })
}

/// Fixed-point inverse `psi(q) = -phi(q + psi(q))`.
pub fn invert_field(phi: &mambareg::registration::DeformationField, iters: usize) -> mambareg::registration::DeformationField {
    use mambareg::registration::{stn_warp, DeformationField};
    let (h, w) = (phi.height(), phi.width());
    let mut psi = DeformationField::zeros(h, w);
    for _ in 0..iters {
        let sampled = stn_warp(&phi.phi, &psi).unwrap();
        let neg = sampled.data().iter().map(|v| -v).collect();
        psi = DeformationField::new(Tensor::from_vec(&[2, h, w], neg).unwrap()).unwrap();
    }
    psi
}

/// Mean absolute error of warping a smoothed image forward and back through an inverted
/// field with max displacement `magnitude`, averaged over `cases` draws.
pub fn warp_round_trip_mae(cases: usize, magnitude: f64, seed: u64) -> f64 {
    use mambareg::data::synth::random_field;
    use mambareg::registration::stn_warp;
    let mut r = rng(seed);
    let (h, w) = (48, 48);
    let errs: Vec<f64> = (0..cases)
        .map(|_| {
            let img = smooth_image(h, w, 2.0, &mut r);
            let phi = random_field(h, w, magnitude, 6.0, &mut r);
            let psi = invert_field(&phi, 20);
            let back = stn_warp(&stn_warp(&img, &phi).unwrap(), &psi).unwrap();
            mean(&back.data().iter().zip(img.data()).map(|(a, b)| (a - b).abs()).collect::<Vec<_>>())
        })
        .collect();
    mean(&errs)
}
