//! Pair records, the `pairs.tsv` manifest, and dataset construction.

pub mod dataset;
pub mod synth;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dataset::{crop_box, crop_by_latest_labels, make_splits, select_pairs, CropBox, CropOutcome, CropParams, PairRule};
pub use synth::{synth_pair, SynthPair, SynthParams};

pub const MANIFEST_VERSION: &str = "#mambareg-pairs\tv1";
pub const MANIFEST_COLUMNS: [&str; 9] = [
    "moving_path",
    "fixed_path",
    "moving_label_path",
    "fixed_label_path",
    "moving_mask_path",
    "fixed_mask_path",
    "plant_id",
    "t_moving",
    "t_fixed",
];

/// One moving/fixed pair. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub moving_path: String,
    pub fixed_path: String,
    pub moving_label_path: Option<String>,
    pub fixed_label_path: Option<String>,
    pub moving_mask_path: String,
    pub fixed_mask_path: String,
    pub plant_id: String,
    pub t_moving: String,
    pub t_fixed: String,
}

impl PairRecord {
    pub fn is_annotated(&self) -> bool {
        self.moving_label_path.is_some() && self.fixed_label_path.is_some()
    }

    pub fn without_labels(mut self) -> Self {
        self.moving_label_path = None;
        self.fixed_label_path = None;
        self
    }

    pub fn id(&self) -> String {
        format!("{}:{}->{}", self.plant_id, self.t_moving, self.t_fixed)
    }

    fn fields(&self) -> [&str; 9] {
        [
            &self.moving_path,
            &self.fixed_path,
            self.moving_label_path.as_deref().unwrap_or(""),
            self.fixed_label_path.as_deref().unwrap_or(""),
            &self.moving_mask_path,
            &self.fixed_mask_path,
            &self.plant_id,
            &self.t_moving,
            &self.t_fixed,
        ]
    }
}

fn tsv_writer<W: std::io::Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().delimiter(b'\t').quote_style(csv::QuoteStyle::Never).from_writer(w)
}

pub fn format_manifest(records: &[PairRecord]) -> Result<String> {
    let bad = |r: &PairRecord| r.fields().iter().any(|f| f.contains(['\t', '\n', '\r']));
    if let Some(r) = records.iter().find(|r| bad(r)) {
        return Err(Error::format("manifest", format!("record {} contains a tab or newline", r.id())));
    }
    let mut w = tsv_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::format("manifest", e.to_string());
    w.write_record(MANIFEST_COLUMNS).map_err(csv_err)?;
    for r in records {
        w.write_record(r.fields()).map_err(csv_err)?;
    }
    let body = w.into_inner().map_err(|e| Error::format("manifest", e.to_string()))?;
    Ok(format!("{MANIFEST_VERSION}\n{}", String::from_utf8(body).expect("fields are UTF-8")))
}

pub fn parse_manifest(text: &str) -> Result<Vec<PairRecord>> {
    let (first, rest) = text.split_once('\n').unwrap_or((text, ""));
    if first.trim_end_matches('\r') != MANIFEST_VERSION {
        return Err(Error::format("manifest", format!("missing version line {MANIFEST_VERSION:?}")));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .quoting(false)
        .has_headers(true)
        .flexible(false)
        .from_reader(rest.as_bytes());
    let header = rdr.headers().map_err(|e| Error::format("manifest", e.to_string()))?;
    if header.iter().ne(MANIFEST_COLUMNS) {
        return Err(Error::format("manifest", format!("unexpected columns {:?}", header.iter().collect::<Vec<_>>())));
    }
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| Error::format("manifest", e.to_string()))?;
        let line = i + 3;
        if row.len() != MANIFEST_COLUMNS.len() {
            return Err(Error::format("manifest", format!("line {line}: {} fields", row.len())));
        }
        let required = |k: usize| -> Result<String> {
            let v = &row[k];
            if v.is_empty() {
                Err(Error::format("manifest", format!("line {line}: empty {}", MANIFEST_COLUMNS[k])))
            } else {
                Ok(v.to_string())
            }
        };
        let optional = |k: usize| (!row[k].is_empty()).then(|| row[k].to_string());
        out.push(PairRecord {
            moving_path: required(0)?,
            fixed_path: required(1)?,
            moving_label_path: optional(2),
            fixed_label_path: optional(3),
            moving_mask_path: required(4)?,
            fixed_mask_path: required(5)?,
            plant_id: required(6)?,
            t_moving: required(7)?,
            t_fixed: required(8)?,
        });
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, records: &[PairRecord]) -> Result<()> {
    std::fs::write(path, format_manifest(records)?).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<PairRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text)
}

/// Resolves a manifest-relative path.
pub fn resolve(root: &Path, rel: &str) -> PathBuf {
    root.join(rel)
}

/// Paths of one frame in the `<plant>/<modality>/<ts>.png` layout, relative to the dataset root.
pub struct FramePaths {
    pub image: String,
    pub label: String,
    pub mask: String,
}

pub fn frame_paths(plant: &str, modality: &str, ts: &str) -> FramePaths {
    FramePaths {
        image: format!("{plant}/{modality}/{ts}.png"),
        label: format!("{plant}/{modality}/labels/{ts}.png"),
        mask: format!("{plant}/{modality}/masks/{}", crate::roi_mask::mask_file_name(ts)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(i: usize, labeled: bool) -> PairRecord {
        let m = frame_paths(&format!("p{i}"), "rgb", "t0");
        let f = frame_paths(&format!("p{i}"), "ir", "t1");
        PairRecord {
            moving_path: m.image,
            fixed_path: f.image,
            moving_label_path: labeled.then_some(m.label),
            fixed_label_path: labeled.then_some(f.label),
            moving_mask_path: m.mask,
            fixed_mask_path: f.mask,
            plant_id: format!("p{i}"),
            t_moving: "t0".into(),
            t_fixed: "t1".into(),
        }
    }

    #[test]
    fn manifest_round_trip() {
        let rs = vec![rec(0, true), rec(1, false)];
        let text = format_manifest(&rs).unwrap();
        assert!(text.starts_with(MANIFEST_VERSION));
        assert_eq!(parse_manifest(&text).unwrap(), rs);
        assert_eq!(parse_manifest(&format_manifest(&[]).unwrap()).unwrap(), vec![]);
    }

    #[test]
    fn manifest_rejects_malformed_input() {
        assert!(parse_manifest("").is_err());
        assert!(parse_manifest("pairs v0\n").is_err());
        let text = format_manifest(&[rec(0, true)]).unwrap();
        assert!(parse_manifest(&text.replace("p0/rgb/t0.png", "")).is_err());
        let short = format!("{MANIFEST_VERSION}\n{}\na\tb\n", MANIFEST_COLUMNS.join("\t"));
        assert!(parse_manifest(&short).is_err());
        let mut bad = rec(0, false);
        bad.plant_id = "a\tb".into();
        assert!(format_manifest(&[bad]).is_err());
    }

    #[test]
    fn stripping_labels() {
        let r = rec(0, true);
        assert!(r.is_annotated());
        assert!(!r.without_labels().is_annotated());
    }
}
