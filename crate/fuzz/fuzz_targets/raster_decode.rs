#![no_main]

use libfuzzer_sys::fuzz_target;
use mambareg::raster::{decode_image, decode_labels, decode_mask};

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = decode_image(data) {
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    if let Ok(labels) = decode_labels(data) {
        assert_eq!(labels.data.len(), labels.h * labels.w);
    }
    if let Ok(mask) = decode_mask(data) {
        assert!(mask.data.iter().all(|v| *v <= 1));
    }
});
