//! Side-by-side panel: moving | fixed | warped | hue-coded displacement.

use std::path::Path;

use anyhow::{ensure, Result};
use mambareg::raster::save_rgb8;
use mambareg::registration::DeformationField;
use mambareg::Tensor;

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// RGB triple of pixel `p` of a 1- or 3-channel `[C, H, W]` image.
fn rgb_at(img: &Tensor, p: usize, hw: usize) -> [u8; 3] {
    let d = img.data();
    if img.shape()[0] == 3 {
        [to_u8(d[p]), to_u8(d[hw + p]), to_u8(d[2 * hw + p])]
    } else {
        let g = to_u8(d[p]);
        [g, g, g]
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let k = h6.floor();
    let f = h6 - k;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match k as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Direction as hue, norm relative to the field's largest norm as saturation; zero field is white.
pub fn flow_colors(field: &DeformationField) -> Vec<[u8; 3]> {
    let (h, w) = (field.height(), field.width());
    let hw = h * w;
    let d = field.phi.data();
    let max = field.max_norm();
    (0..hw)
        .map(|p| {
            let (dy, dx) = (d[p], d[hw + p]);
            let s = if max > 0.0 { dy.hypot(dx) / max } else { 0.0 };
            let hue = (dy.atan2(dx) / std::f64::consts::TAU).rem_euclid(1.0);
            hsv_to_rgb(hue, s, 1.0).map(to_u8)
        })
        .collect()
}

pub fn write_panel(path: &Path, moving: &Tensor, fixed: &Tensor, warped: &Tensor, field: &DeformationField) -> Result<()> {
    let (_, h, w) = moving.dims3()?;
    ensure!(fixed.dims3()?.1 == h && warped.dims3()?.1 == h, "panel tiles differ in size");
    let hw = h * w;
    let flow = flow_colors(field);
    let tiles = 4;
    let mut buf = Vec::with_capacity(tiles * hw * 3);
    for y in 0..h {
        for t in 0..tiles {
            for x in 0..w {
                let p = y * w + x;
                let px = match t {
                    0 => rgb_at(moving, p, hw),
                    1 => rgb_at(fixed, p, hw),
                    2 => rgb_at(warped, p, hw),
                    _ => flow[p],
                };
                buf.extend_from_slice(&px);
            }
        }
    }
    save_rgb8(path, tiles * w, h, buf)?;
    Ok(())
}
