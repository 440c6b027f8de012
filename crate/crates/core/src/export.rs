//! Writing generated layer sets and sampling traces as PNGs.

use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};

use crate::error::{Error, Result};
use crate::layerspace::{LayerMask, LayerSet};
use crate::sampler::SampleTrace;
use crate::synthdata::{unit_to_u8, write_dataset, DatasetRecord};

/// Writes one layer set as a single-record dataset directory.
pub fn write_layer_set(out_dir: &Path, id: &str, set: &LayerSet) -> Result<PathBuf> {
    let record = DatasetRecord::for_layers(id, set);
    write_dataset(&[(set.clone(), record)], out_dir)
}

/// One PNG per recorded step: a row per layer with the predicted image next
/// to its binarized mask.
pub fn write_trace(dir: &Path, trace: &SampleTrace, height: usize, width: usize) -> Result<usize> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let plane = height * width;
    let mut written = 0;
    for (k, step) in trace.steps.iter().enumerate() {
        let Some(x0) = &step.x0 else { continue };
        let layers = step.masks.len();
        if x0.len() != layers * 6 * plane {
            return Err(Error::Shape(format!(
                "trace step {k} holds {} values for {layers} layers of {height}x{width}",
                x0.len()
            )));
        }
        let mut grid = RgbImage::new((2 * width) as u32, (layers * height) as u32);
        for (l, mask) in step.masks.iter().enumerate() {
            let base = l * 6 * plane;
            for y in 0..height {
                for x in 0..width {
                    let p = y * width + x;
                    let rgb = [0, 1, 2].map(|c| unit_to_u8(x0[base + c * plane + p]));
                    let m = if mask.get(y, x) >= 0.5 { 255 } else { 0 };
                    let gy = (l * height + y) as u32;
                    grid.put_pixel(x as u32, gy, image::Rgb(rgb));
                    grid.put_pixel((width + x) as u32, gy, image::Rgb([m; 3]));
                }
            }
        }
        let path = dir.join(format!("step_{k:03}_t{:04}.png", step.t));
        grid.save(&path)?;
        written += 1;
    }
    Ok(written)
}

/// Reads a binary mask PNG (values 0 or 255).
pub fn read_mask_png(path: &Path) -> Result<LayerMask> {
    let img: GrayImage = image::open(path)
        .map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?
        .to_luma8();
    let (w, h) = img.dimensions();
    let mut data = Vec::with_capacity((w * h) as usize);
    for (i, p) in img.pixels().enumerate() {
        match p.0[0] {
            0 => data.push(0.0),
            255 => data.push(1.0),
            v => {
                return Err(Error::Invalid(format!(
                    "{}: non-binary mask value {v} at ({}, {})",
                    path.display(),
                    i / w as usize,
                    i % w as usize
                )))
            }
        }
    }
    LayerMask::new(h as usize, w as usize, data)
}
