//! Real-data tooling: per-plant cropping, pair selection and train/test splits.
//!
//! Expected layout under a root: `<plant>/<rgb|ir>/<ts>.png`, labels in
//! `<plant>/<modality>/labels/<ts>.png`, masks in `<plant>/<modality>/masks/<ts>.mask.png`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{frame_paths, PairRecord};
use crate::error::{Error, Result};
use crate::raster::{self, LabelMap};

pub const MODALITIES: [&str; 2] = ["rgb", "ir"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CropParams {
    /// Box growth on each side as a fraction of the box extent.
    pub margin: f64,
    /// Side of the square output.
    pub size: usize,
}

impl Default for CropParams {
    fn default() -> Self {
        CropParams { margin: 0.1, size: 128 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropBox {
    pub y0: usize,
    pub x0: usize,
    pub side: usize,
}

/// Square box around the nonzero labels, grown by `margin` and clamped to the frame.
pub fn crop_box(labels: &LabelMap, margin: f64) -> Option<CropBox> {
    let (mut y_lo, mut y_hi, mut x_lo, mut x_hi) = (usize::MAX, 0, usize::MAX, 0);
    for y in 0..labels.h {
        for x in 0..labels.w {
            if labels.get(y, x) != 0 {
                y_lo = y_lo.min(y);
                y_hi = y_hi.max(y);
                x_lo = x_lo.min(x);
                x_hi = x_hi.max(x);
            }
        }
    }
    if y_lo == usize::MAX {
        return None;
    }
    let (bh, bw) = ((y_hi - y_lo + 1) as f64, (x_hi - x_lo + 1) as f64);
    let side = (bh.max(bw) * (1.0 + 2.0 * margin)).round() as usize;
    let side = side.clamp(1, labels.h.min(labels.w));
    let center = |lo: usize, hi: usize| (lo + hi + 1) as f64 / 2.0;
    let place = |c: f64, n: usize| ((c - side as f64 / 2.0).round().max(0.0) as usize).min(n - side);
    Some(CropBox { y0: place(center(y_lo, y_hi), labels.h), x0: place(center(x_lo, x_hi), labels.w), side })
}

#[derive(Clone, Debug, PartialEq)]
pub enum CropOutcome {
    Cropped { frames: usize },
    Skipped { reason: String },
}

fn sorted_stems(dir: &Path) -> Result<Vec<String>> {
    let mut stems = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for e in entries {
        let e = e.map_err(|e| Error::io(dir, e))?;
        let p = e.path();
        if p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")) {
            if let Some(s) = p.file_stem().and_then(|s| s.to_str()) {
                stems.push(s.to_string());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

fn sorted_dirs(dir: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let e = e.map_err(|e| Error::io(dir, e))?;
        if e.path().is_dir() {
            if let Some(s) = e.file_name().to_str() {
                out.push(s.to_string());
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Crops every frame of one plant with the box of its latest labeled frame (per modality)
/// and writes the results, resized to `params.size`, under `dst_plant`.
pub fn crop_by_latest_labels(src_plant: &Path, dst_plant: &Path, params: &CropParams) -> Result<CropOutcome> {
    let mut plans = Vec::new();
    for m in MODALITIES {
        let dir = src_plant.join(m);
        if !dir.is_dir() {
            return Ok(CropOutcome::Skipped { reason: format!("no {m} directory") });
        }
        let stems = sorted_stems(&dir)?;
        let Some(latest) = stems.iter().rev().find(|s| dir.join("labels").join(format!("{s}.png")).is_file()) else {
            return Ok(CropOutcome::Skipped { reason: format!("no labeled {m} frame") });
        };
        let labels = raster::load_labels(&dir.join("labels").join(format!("{latest}.png")))?;
        let Some(b) = crop_box(&labels, params.margin) else {
            return Ok(CropOutcome::Skipped { reason: format!("latest {m} label map {latest} is empty") });
        };
        plans.push((m, dir, stems, b));
    }
    let mut frames = 0;
    for (m, dir, stems, b) in plans {
        for s in &stems {
            let img = raster::load_image(&dir.join(format!("{s}.png")))?;
            let (_, h, w) = img.dims3()?;
            if b.y0 + b.side > h || b.x0 + b.side > w {
                return Err(Error::Shape(format!("frame {s} of {} is smaller than its crop box", dir.display())));
            }
            let c = raster::crop_image(&img, b.y0, b.x0, b.side, b.side)?;
            let out = raster::resize_image(&c, params.size, params.size)?;
            raster::save_image(&dst_plant.join(m).join(format!("{s}.png")), &out)?;
            let lp = dir.join("labels").join(format!("{s}.png"));
            if lp.is_file() {
                let l = raster::crop_raster(&raster::load_labels(&lp)?, b.y0, b.x0, b.side, b.side)?;
                let l = raster::resize_nearest(&l, params.size, params.size);
                raster::save_labels(&dst_plant.join(m).join("labels").join(format!("{s}.png")), &l)?;
            }
            frames += 1;
        }
    }
    Ok(CropOutcome::Cropped { frames })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairRule {
    /// Largest distance between the two frames' positions in the plant's sorted timeline;
    /// `None` pairs every frame with every other.
    pub max_gap: Option<usize>,
}

/// Enumerates (rgb at t1, ir at t2) pairs of the same plant.
///
/// Pairs with labels on both sides are kept only when both frames hold the same number
/// of instances; pairs with a missing label on either side are emitted without labels.
pub fn select_pairs(root: &Path, rule: &PairRule) -> Result<Vec<PairRecord>> {
    let mut out = Vec::new();
    for plant in sorted_dirs(root)? {
        let rgb_dir = root.join(&plant).join("rgb");
        let ir_dir = root.join(&plant).join("ir");
        if !rgb_dir.is_dir() || !ir_dir.is_dir() {
            continue;
        }
        let rgb = sorted_stems(&rgb_dir)?;
        let ir = sorted_stems(&ir_dir)?;
        let mut timeline: Vec<&String> = rgb.iter().chain(&ir).collect();
        timeline.sort();
        timeline.dedup();
        let pos = |t: &String| timeline.binary_search(&t).expect("in timeline");
        let count = |m: &str, ts: &str| -> Result<Option<usize>> {
            let p = root.join(frame_paths(&plant, m, ts).label);
            if p.is_file() {
                Ok(Some(raster::load_labels(&p)?.instance_count()))
            } else {
                Ok(None)
            }
        };
        let ir_counts: Vec<Option<usize>> = ir.iter().map(|t| count("ir", t)).collect::<Result<_>>()?;
        for t1 in &rgb {
            let c1 = count("rgb", t1)?;
            for (t2, c2) in ir.iter().zip(&ir_counts) {
                if rule.max_gap.is_some_and(|g| pos(t1).abs_diff(pos(t2)) > g) {
                    continue;
                }
                let labeled = match (c1, c2) {
                    (Some(a), Some(b)) if a == *b => true,
                    (Some(_), Some(_)) => continue,
                    _ => false,
                };
                let m = frame_paths(&plant, "rgb", t1);
                let f = frame_paths(&plant, "ir", t2);
                out.push(PairRecord {
                    moving_path: m.image,
                    fixed_path: f.image,
                    moving_label_path: labeled.then_some(m.label),
                    fixed_label_path: labeled.then_some(f.label),
                    moving_mask_path: m.mask,
                    fixed_mask_path: f.mask,
                    plant_id: plant.clone(),
                    t_moving: t1.clone(),
                    t_fixed: t2.clone(),
                });
            }
        }
    }
    Ok(out)
}

/// Seeded split: test pairs come from the annotated pool, train pairs from the rest.
/// When there are no unannotated pairs, train pairs are drawn from what the test split left.
/// Train records never carry label paths.
pub fn make_splits(records: &[PairRecord], train_n: usize, test_n: usize, seed: u64) -> (Vec<PairRecord>, Vec<PairRecord>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut annotated, mut rest): (Vec<PairRecord>, Vec<PairRecord>) =
        records.iter().cloned().partition(PairRecord::is_annotated);
    annotated.shuffle(&mut rng);
    rest.shuffle(&mut rng);
    let test_take = test_n.min(annotated.len());
    if test_take < test_n {
        log::warn!("only {} annotated pairs for {test_n} requested test pairs", annotated.len());
    }
    let leftover = annotated.split_off(test_take);
    let pool = if rest.is_empty() { leftover } else { rest };
    if pool.len() < train_n {
        log::warn!("only {} pairs available for {train_n} requested train pairs", pool.len());
    }
    let train = pool.into_iter().take(train_n).map(PairRecord::without_labels).collect();
    (train, annotated)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Raster;

    #[test]
    fn centered_blob_box() {
        let mut l = LabelMap::new(100, 100);
        for y in 45..55 {
            for x in 45..55 {
                l.set(y, x, 1);
            }
        }
        assert_eq!(crop_box(&l, 0.0), Some(CropBox { y0: 45, x0: 45, side: 10 }));
        assert_eq!(crop_box(&LabelMap::new(4, 4), 0.1), None);
    }

    #[test]
    fn full_frame_box_is_identity() {
        let l = Raster::from_vec(6, 6, vec![1u32; 36]).unwrap();
        assert_eq!(crop_box(&l, 0.1), Some(CropBox { y0: 0, x0: 0, side: 6 }));
    }

    #[test]
    fn box_near_border_is_shifted_inside() {
        let mut l = LabelMap::new(20, 30);
        l.set(0, 29, 1);
        l.set(3, 26, 1);
        let b = crop_box(&l, 0.5).unwrap();
        assert!(b.y0 + b.side <= 20 && b.x0 + b.side <= 30);
        assert_eq!(b.side, 8);
    }

    fn rec(i: usize, labeled: bool) -> PairRecord {
        PairRecord {
            moving_path: format!("m{i}"),
            fixed_path: format!("f{i}"),
            moving_label_path: labeled.then(|| format!("ml{i}")),
            fixed_label_path: labeled.then(|| format!("fl{i}")),
            moving_mask_path: format!("mm{i}"),
            fixed_mask_path: format!("fm{i}"),
            plant_id: "p".into(),
            t_moving: format!("{i}"),
            t_fixed: format!("{i}"),
        }
    }

    #[test]
    fn splits_are_seeded_disjoint_and_label_free() {
        let rs: Vec<_> = (0..40).map(|i| rec(i, i % 2 == 0)).collect();
        let (tr, te) = make_splits(&rs, 10, 5, 3);
        assert_eq!((tr.len(), te.len()), (10, 5));
        assert!(tr.iter().all(|r| !r.is_annotated()));
        assert!(te.iter().all(PairRecord::is_annotated));
        assert!(tr.iter().all(|a| te.iter().all(|b| a.moving_path != b.moving_path)));
        assert_eq!(make_splits(&rs, 10, 5, 3), (tr, te));
        let all_labeled: Vec<_> = (0..10).map(|i| rec(i, true)).collect();
        let (tr, te) = make_splits(&all_labeled, 4, 4, 1);
        assert_eq!((tr.len(), te.len()), (4, 4));
        assert!(tr.iter().all(|a| te.iter().all(|b| a.moving_path != b.moving_path)));
    }
}
