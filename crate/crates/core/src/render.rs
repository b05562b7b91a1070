//! Binary PGM heatmaps and PPM box overlays.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::localization::BBox;
use crate::tensor::Tensor;

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// P5 grayscale image of a `[0, 1]` map.
pub fn pgm_bytes(map: &Tensor) -> Result<Vec<u8>> {
    let [h, w] = map.shape() else {
        return Err(Error::dim(format!("heatmap of {:?}", map.shape())));
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.data().iter().map(|&v| to_byte(v)));
    Ok(out)
}

/// P6 color image of an `H×W×3` frame with 1-px red box outlines.
pub fn ppm_overlay_bytes(frame: &Tensor, boxes: &[BBox]) -> Result<Vec<u8>> {
    let [h, w, 3] = frame.shape() else {
        return Err(Error::dim(format!("overlay frame {:?}", frame.shape())));
    };
    let (h, w) = (*h, *w);
    let mut px: Vec<u8> = frame.data().iter().map(|&v| to_byte(v)).collect();
    let mut paint = |x: usize, y: usize| {
        if x < w && y < h {
            px[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&[255, 0, 0]);
        }
    };
    for b in boxes {
        let (x0, y0) = (b.x0 as usize, b.y0 as usize);
        let (x1, y1) = (b.x1 as usize - 1, b.y1 as usize - 1);
        for x in x0..=x1 {
            paint(x, y0);
            paint(x, y1);
        }
        for y in y0..=y1 {
            paint(x0, y);
            paint(x1, y);
        }
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(px);
    Ok(out)
}

pub fn write_pgm(path: &Path, map: &Tensor) -> Result<()> {
    std::fs::File::create(path)?.write_all(&pgm_bytes(map)?)?;
    Ok(())
}

pub fn write_ppm_overlay(path: &Path, frame: &Tensor, boxes: &[BBox]) -> Result<()> {
    std::fs::File::create(path)?.write_all(&ppm_overlay_bytes(frame, boxes)?)?;
    Ok(())
}

/// Width and height from a P5/P6 header.
pub fn pnm_dimensions(bytes: &[u8]) -> Option<(usize, usize)> {
    let mut tokens = bytes
        .split(|b| b.is_ascii_whitespace())
        .filter(|t| !t.is_empty())
        .take(3);
    let magic = tokens.next()?;
    if magic != b"P5" && magic != b"P6" {
        return None;
    }
    let mut num = || std::str::from_utf8(tokens.next()?).ok()?.parse().ok();
    Some((num()?, num()?))
}
