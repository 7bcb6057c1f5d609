//! Binary PPM rendering of a label grid for quick visual inspection.
//! Fixed colors: background dark blue, tropical cyclone red, atmospheric
//! river yellow.

use std::path::Path;

use cgseg_core::data::LabelGrid;

use crate::error::{io_err, Result};

const COLORS: [[u8; 3]; 3] = [
    [40, 40, 80],   // background
    [220, 60, 40],  // tropical cyclone
    [250, 200, 60], // atmospheric river
];

pub fn encode(labels: &LabelGrid) -> Vec<u8> {
    let (h, w) = (labels.height(), labels.width());
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for &v in labels.as_slice() {
        out.extend_from_slice(&COLORS[(v as usize).min(COLORS.len() - 1)]);
    }
    out
}

pub fn write_labels(path: &Path, labels: &LabelGrid) -> Result<()> {
    std::fs::write(path, encode(labels)).map_err(io_err(path))
}
