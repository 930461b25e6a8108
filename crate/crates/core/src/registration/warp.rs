//! Dense bilinear resampling `out(p) = img(p + phi(p))` with clamp-to-edge borders.
//!
//! `phi` is stored channels-first as `[2, H, W]`: channel 0 is the row offset `dy`,
//! channel 1 the column offset `dx`, both in pixels.

#[derive(Clone, Copy)]
struct Sample {
    y0: usize,
    x0: usize,
    wy: f64,
    wx: f64,
    // false when the coordinate was clamped, so it carries no gradient
    live_y: bool,
    live_x: bool,
}

#[inline]
fn axis(coord: f64, size: usize) -> (usize, f64, bool) {
    if size == 1 {
        return (0, 0.0, false);
    }
    let max = (size - 1) as f64;
    let (c, live) = if coord < 0.0 {
        (0.0, false)
    } else if coord > max {
        (max, false)
    } else {
        (coord, true)
    };
    let i0 = (c.floor() as usize).min(size - 2);
    (i0, c - i0 as f64, live)
}

#[inline]
fn sample_at(h: usize, w: usize, y: usize, x: usize, dy: f64, dx: f64) -> Sample {
    let (y0, wy, live_y) = axis(y as f64 + dy, h);
    let (x0, wx, live_x) = axis(x as f64 + dx, w);
    Sample { y0, x0, wy, wx, live_y, live_x }
}

#[inline]
fn corners(plane: &[f64], w: usize, hgt: usize, s: &Sample) -> (f64, f64, f64, f64) {
    let y1 = if hgt > 1 { s.y0 + 1 } else { s.y0 };
    let x1 = if w > 1 { s.x0 + 1 } else { s.x0 };
    (plane[s.y0 * w + s.x0], plane[s.y0 * w + x1], plane[y1 * w + s.x0], plane[y1 * w + x1])
}

/// Warps one image `[C, H, W]` by one field `[2, H, W]`.
pub(crate) fn forward(img: &[f64], phi: &[f64], c: usize, h: usize, w: usize, out: &mut [f64]) {
    let plane = h * w;
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let s = sample_at(h, w, y, x, phi[p], phi[plane + p]);
            for ch in 0..c {
                let src = &img[ch * plane..(ch + 1) * plane];
                let (v00, v01, v10, v11) = corners(src, w, h, &s);
                // convex form is exact at both ends of each axis
                let top = (1.0 - s.wx) * v00 + s.wx * v01;
                let bottom = (1.0 - s.wx) * v10 + s.wx * v11;
                out[ch * plane + p] = (1.0 - s.wy) * top + s.wy * bottom;
            }
        }
    }
}

/// Accumulates gradients of [`forward`] into `d_img` and `d_phi` when present.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward(
    img: &[f64],
    phi: &[f64],
    c: usize,
    h: usize,
    w: usize,
    dy_out: &[f64],
    mut d_img: Option<&mut [f64]>,
    mut d_phi: Option<&mut [f64]>,
) {
    let plane = h * w;
    let y1_off = if h > 1 { w } else { 0 };
    let x1_off = if w > 1 { 1 } else { 0 };
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let s = sample_at(h, w, y, x, phi[p], phi[plane + p]);
            let base = s.y0 * w + s.x0;
            let mut g_dy = 0.0;
            let mut g_dx = 0.0;
            for ch in 0..c {
                let g = dy_out[ch * plane + p];
                if g == 0.0 {
                    continue;
                }
                if let Some(d_img) = d_img.as_deref_mut() {
                    let di = &mut d_img[ch * plane..(ch + 1) * plane];
                    di[base] += g * (1.0 - s.wy) * (1.0 - s.wx);
                    di[base + x1_off] += g * (1.0 - s.wy) * s.wx;
                    di[base + y1_off] += g * s.wy * (1.0 - s.wx);
                    di[base + y1_off + x1_off] += g * s.wy * s.wx;
                }
                if d_phi.is_some() {
                    let src = &img[ch * plane..(ch + 1) * plane];
                    let (v00, v01, v10, v11) = corners(src, w, h, &s);
                    if s.live_y {
                        g_dy += g * ((1.0 - s.wx) * (v10 - v00) + s.wx * (v11 - v01));
                    }
                    if s.live_x {
                        g_dx += g * ((1.0 - s.wy) * (v01 - v00) + s.wy * (v11 - v10));
                    }
                }
            }
            if let Some(d_phi) = d_phi.as_deref_mut() {
                d_phi[p] += g_dy;
                d_phi[plane + p] += g_dx;
            }
        }
    }
}

/// Nearest-neighbour resampling for integer rasters (labels, masks), same sampling
/// convention and border clamping as the bilinear path.
pub fn warp_nearest<T: Copy>(src: &[T], phi: &[f64], h: usize, w: usize) -> Vec<T> {
    let plane = h * w;
    let mut out = Vec::with_capacity(plane);
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let sy = (y as f64 + phi[p]).round().clamp(0.0, (h - 1) as f64) as usize;
            let sx = (x as f64 + phi[plane + p]).round().clamp(0.0, (w - 1) as f64) as usize;
            out.push(src[sy * w + sx]);
        }
    }
    out
}
