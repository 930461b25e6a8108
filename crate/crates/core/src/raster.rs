//! Plain 2-D rasters (masks, label maps) and PNG input/output.
//!
//! Images live in [`Tensor`]s shaped `[C, H, W]` with values in `[0, 1]`.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, ImageFormat, Luma, Rgb, RgbImage};

use crate::error::{ensure_shape, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster<T> {
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

/// Binary mask with values in `{0, 1}`.
pub type Mask = Raster<u8>;
/// Instance labels; 0 is background.
pub type LabelMap = Raster<u32>;

impl<T: Copy + Default> Raster<T> {
    pub fn new(h: usize, w: usize) -> Self {
        Raster { h, w, data: vec![T::default(); h * w] }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        ensure_shape!(data.len() == h * w, "{h}x{w} raster from {} values", data.len());
        Ok(Raster { h, w, data })
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> T {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: T) {
        self.data[y * self.w + x] = v;
    }

    pub fn same_size<U>(&self, other: &Raster<U>) -> bool {
        self.h == other.h && self.w == other.w
    }
}

impl Mask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// `[1, 1, H, W]` tensor of 0/1 values.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[1, 1, self.h, self.w], self.data.iter().map(|&v| f64::from(v)).collect())
            .expect("raster size")
    }
}

impl LabelMap {
    /// Number of distinct nonzero labels.
    pub fn instance_count(&self) -> usize {
        let mut ids: Vec<u32> = self.data.iter().copied().filter(|&v| v != 0).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    }
}

/// Channel mean of a `[C, H, W]` image.
pub fn grayscale(img: &Tensor) -> Result<Raster<f64>> {
    let (c, h, w) = img.dims3()?;
    ensure_shape!(c > 0, "image without channels");
    let plane = h * w;
    let mut out = vec![0.0; plane];
    for ch in img.data().chunks(plane) {
        for (o, v) in out.iter_mut().zip(ch) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= c as f64);
    Raster::from_vec(h, w, out)
}

/// `[1, H, W]` tensor of a scalar raster.
pub fn gray_tensor(r: &Raster<f64>) -> Tensor {
    Tensor::from_vec(&[1, r.h, r.w], r.data.clone()).expect("raster size")
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn decode(bytes: &[u8]) -> Result<DynamicImage> {
    image::load_from_memory(bytes).map_err(|e| Error::format("image", e.to_string()))
}

fn to_unit(v: u16, max: f64) -> f64 {
    f64::from(v) / max
}

/// Decodes an 8- or 16-bit gray or color image into `[C, H, W]` with `C` of 1 or 3.
pub fn decode_image(bytes: &[u8]) -> Result<Tensor> {
    let img = decode(bytes)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = h * w;
    if img.color().has_color() {
        let rgb = img.to_rgb16();
        let mut data = vec![0.0; 3 * plane];
        for (i, px) in rgb.pixels().enumerate() {
            for c in 0..3 {
                data[c * plane + i] = to_unit(px[c], 65535.0);
            }
        }
        Tensor::from_vec(&[3, h, w], data)
    } else {
        let g = img.to_luma16();
        Tensor::from_vec(&[1, h, w], g.pixels().map(|p| to_unit(p[0], 65535.0)).collect())
    }
}

pub fn load_image(path: &Path) -> Result<Tensor> {
    decode_image(&read_file(path)?).map_err(|e| relabel(e, path))
}

fn relabel(e: Error, path: &Path) -> Error {
    match e {
        Error::Format { what, detail } => Error::Format { what, detail: format!("{}: {detail}", path.display()) },
        other => other,
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode(img: DynamicImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).map_err(|e| Error::format("image", e.to_string()))?;
    Ok(buf.into_inner())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// 8-bit PNG of a 1- or 3-channel `[C, H, W]` image; values are clamped to `[0, 1]`.
pub fn encode_image(img: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = img.dims3()?;
    let plane = h * w;
    let d = img.data();
    let out = match c {
        1 => DynamicImage::ImageLuma8(
            GrayImage::from_raw(w as u32, h as u32, d.iter().map(|&v| quantize(v)).collect()).expect("size"),
        ),
        3 => {
            let raw = (0..plane).flat_map(|i| (0..3).map(move |ch| quantize(d[ch * plane + i]))).collect();
            DynamicImage::ImageRgb8(RgbImage::from_raw(w as u32, h as u32, raw).expect("size"))
        }
        _ => return Err(Error::Shape(format!("cannot save a {c}-channel image"))),
    };
    encode(out)
}

pub fn save_image(path: &Path, img: &Tensor) -> Result<()> {
    write_file(path, &encode_image(img)?)
}

/// Label maps are stored as 16-bit gray PNGs; 8-bit inputs are accepted.
pub fn decode_labels(bytes: &[u8]) -> Result<LabelMap> {
    let img = decode(bytes)?;
    if img.color().has_color() {
        return Err(Error::format("label map", "expected a single-channel image"));
    }
    let g = img.to_luma16();
    let (w, h) = (g.width() as usize, g.height() as usize);
    let data = match img {
        DynamicImage::ImageLuma8(ref b) => b.pixels().map(|p| u32::from(p[0])).collect(),
        _ => g.pixels().map(|p| u32::from(p[0])).collect(),
    };
    Raster::from_vec(h, w, data)
}

pub fn encode_labels(labels: &LabelMap) -> Result<Vec<u8>> {
    let mut raw = Vec::with_capacity(labels.data.len());
    for &v in &labels.data {
        raw.push(u16::try_from(v).map_err(|_| Error::format("label map", format!("label {v} exceeds 16 bits")))?);
    }
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(labels.w as u32, labels.h as u32, raw).expect("size");
    encode(DynamicImage::ImageLuma16(buf))
}

pub fn load_labels(path: &Path) -> Result<LabelMap> {
    decode_labels(&read_file(path)?).map_err(|e| relabel(e, path))
}

pub fn save_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    write_file(path, &encode_labels(labels)?)
}

/// Masks are 8-bit gray PNGs with values `{0, 255}`; any nonzero pixel reads as 1.
pub fn decode_mask(bytes: &[u8]) -> Result<Mask> {
    let img = decode(bytes)?;
    if img.color().has_color() {
        return Err(Error::format("mask", "expected a single-channel image"));
    }
    let g = img.to_luma16();
    let (w, h) = (g.width() as usize, g.height() as usize);
    Raster::from_vec(h, w, g.pixels().map(|p| u8::from(p[0] != 0)).collect())
}

pub fn encode_mask(mask: &Mask) -> Result<Vec<u8>> {
    let raw = mask.data.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
    encode(DynamicImage::ImageLuma8(GrayImage::from_raw(mask.w as u32, mask.h as u32, raw).expect("size")))
}

pub fn load_mask(path: &Path) -> Result<Mask> {
    decode_mask(&read_file(path)?).map_err(|e| relabel(e, path))
}

pub fn save_mask(path: &Path, mask: &Mask) -> Result<()> {
    write_file(path, &encode_mask(mask)?)
}

/// 8-bit RGB PNG from interleaved pixels.
pub fn save_rgb8(path: &Path, w: usize, h: usize, rgb: Vec<u8>) -> Result<()> {
    let img = ImageBuffer::<Rgb<u8>, _>::from_raw(w as u32, h as u32, rgb)
        .ok_or_else(|| Error::Shape(format!("{w}x{h} RGB panel from wrong buffer size")))?;
    write_file(path, &encode(DynamicImage::ImageRgb8(img))?)
}

/// Bilinear resize of a `[C, H, W]` image (pixel-center aligned).
pub fn resize_image(img: &Tensor, h2: usize, w2: usize) -> Result<Tensor> {
    let (c, h, w) = img.dims3()?;
    ensure_shape!(h > 0 && w > 0 && h2 > 0 && w2 > 0, "resize {h}x{w} -> {h2}x{w2}");
    let src = |ch: usize, y: usize, x: usize| img.data()[ch * h * w + y * w + x];
    let coord = |i: usize, n: usize, m: usize| -> (usize, usize, f64) {
        let s = ((i as f64 + 0.5) * n as f64 / m as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = vec![0.0; c * h2 * w2];
    for ch in 0..c {
        for y in 0..h2 {
            let (y0, y1, fy) = coord(y, h, h2);
            for x in 0..w2 {
                let (x0, x1, fx) = coord(x, w, w2);
                let top = src(ch, y0, x0) * (1.0 - fx) + src(ch, y0, x1) * fx;
                let bot = src(ch, y1, x0) * (1.0 - fx) + src(ch, y1, x1) * fx;
                out[ch * h2 * w2 + y * w2 + x] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Tensor::from_vec(&[c, h2, w2], out)
}

/// Nearest-neighbour resize for integral rasters.
pub fn resize_nearest<T: Copy + Default>(r: &Raster<T>, h2: usize, w2: usize) -> Raster<T> {
    let mut out = Raster::new(h2, w2);
    for y in 0..h2 {
        let sy = ((y as f64 + 0.5) * r.h as f64 / h2 as f64) as usize;
        for x in 0..w2 {
            let sx = ((x as f64 + 0.5) * r.w as f64 / w2 as f64) as usize;
            out.set(y, x, r.get(sy.min(r.h - 1), sx.min(r.w - 1)));
        }
    }
    out
}

/// Crop `[y0, y0+hh) x [x0, x0+ww)` of a `[C, H, W]` image.
pub fn crop_image(img: &Tensor, y0: usize, x0: usize, hh: usize, ww: usize) -> Result<Tensor> {
    let (c, h, w) = img.dims3()?;
    ensure_shape!(y0 + hh <= h && x0 + ww <= w, "crop {hh}x{ww} at ({y0}, {x0}) outside {h}x{w}");
    let mut out = Vec::with_capacity(c * hh * ww);
    for ch in 0..c {
        for y in y0..y0 + hh {
            let row = ch * h * w + y * w;
            out.extend_from_slice(&img.data()[row + x0..row + x0 + ww]);
        }
    }
    Tensor::from_vec(&[c, hh, ww], out)
}

pub fn crop_raster<T: Copy + Default>(r: &Raster<T>, y0: usize, x0: usize, hh: usize, ww: usize) -> Result<Raster<T>> {
    ensure_shape!(y0 + hh <= r.h && x0 + ww <= r.w, "crop {hh}x{ww} at ({y0}, {x0}) outside {}x{}", r.h, r.w);
    let mut data = Vec::with_capacity(hh * ww);
    for y in y0..y0 + hh {
        data.extend_from_slice(&r.data[y * r.w + x0..y * r.w + x0 + ww]);
    }
    Raster::from_vec(hh, ww, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_png_round_trip() {
        let l = Raster::from_vec(2, 3, vec![0, 1, 2, 300, 65535, 7]).unwrap();
        assert_eq!(decode_labels(&encode_labels(&l).unwrap()).unwrap(), l);
        let big = Raster::from_vec(1, 1, vec![70000]).unwrap();
        assert!(encode_labels(&big).is_err());
    }

    #[test]
    fn mask_png_round_trip() {
        let m = Raster::from_vec(2, 2, vec![0, 1, 1, 0]).unwrap();
        assert_eq!(decode_mask(&encode_mask(&m).unwrap()).unwrap(), m);
    }

    #[test]
    fn image_png_round_trip_is_quantized() {
        let t = Tensor::from_vec(&[3, 1, 2], vec![0.0, 1.0, 0.5, 0.25, 1.0, 0.0]).unwrap();
        let back = decode_image(&encode_image(&t).unwrap()).unwrap();
        assert_eq!(back.shape(), &[3, 1, 2]);
        assert!(back.max_abs_diff(&t) <= 0.5 / 255.0 + 1e-12);
        let g = Tensor::from_vec(&[1, 1, 2], vec![0.2, 0.8]).unwrap();
        assert_eq!(decode_image(&encode_image(&g).unwrap()).unwrap().shape(), &[1, 1, 2]);
    }

    #[test]
    fn garbage_bytes_are_format_errors() {
        assert!(matches!(decode_image(b"not a png"), Err(Error::Format { .. })));
        assert!(matches!(decode_labels(&[]), Err(Error::Format { .. })));
    }

    #[test]
    fn grayscale_is_channel_mean() {
        let t = Tensor::from_vec(&[3, 1, 1], vec![0.3, 0.6, 0.9]).unwrap();
        assert!((grayscale(&t).unwrap().data[0] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn resize_identity_and_constant() {
        let t = Tensor::from_vec(&[1, 2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(resize_image(&t, 2, 2).unwrap(), t);
        let c = Tensor::full(&[1, 3, 5], 0.7);
        assert!(resize_image(&c, 8, 4).unwrap().data().iter().all(|v| (v - 0.7).abs() < 1e-15));
        let l = Raster::from_vec(1, 2, vec![1u32, 2]).unwrap();
        assert_eq!(resize_nearest(&l, 2, 4).data, vec![1, 1, 2, 2, 1, 1, 2, 2]);
    }

    #[test]
    fn crop_bounds() {
        let r = Raster::from_vec(3, 3, (0..9u32).collect()).unwrap();
        assert_eq!(crop_raster(&r, 1, 1, 2, 2).unwrap().data, vec![4, 5, 7, 8]);
        assert!(crop_raster(&r, 2, 2, 2, 2).is_err());
    }
}
