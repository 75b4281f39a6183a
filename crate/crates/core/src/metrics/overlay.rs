use std::path::Path;

use image::{Rgb, RgbImage};

use super::{binarize, MetricsError, DEFAULT_THRESHOLD};
use crate::data::Prepared;
use crate::tensor::Tensor;

const PRED_FOVEA: Rgb<u8> = Rgb([255, 40, 40]);
const PRED_OD: Rgb<u8> = Rgb([40, 255, 40]);
const TRUE_MARK: Rgb<u8> = Rgb([255, 255, 0]);
const TRUE_OD: Rgb<u8> = Rgb([60, 140, 255]);

fn draw_contour(img: &mut RgbImage, mask: &[bool], size: usize, color: Rgb<u8>) {
    let at = |x: isize, y: isize| x >= 0 && y >= 0 && (x as usize) < size && (y as usize) < size && mask[y as usize * size + x as usize];
    for y in 0..size as isize {
        for x in 0..size as isize {
            if at(x, y) && !(at(x - 1, y) && at(x + 1, y) && at(x, y - 1) && at(x, y + 1)) {
                img.put_pixel(x as u32, y as u32, color);
            }
        }
    }
}

fn draw_cross(img: &mut RgbImage, (cx, cy): (f64, f64), arm: isize, color: Rgb<u8>) {
    let (cx, cy) = (cx.round() as isize, cy.round() as isize);
    let (w, h) = (img.width() as isize, img.height() as isize);
    for d in -arm..=arm {
        for (x, y) in [(cx + d, cy), (cx, cy + d)] {
            if (0..w).contains(&x) && (0..h).contains(&y) {
                img.put_pixel(x as u32, y as u32, color);
            }
        }
    }
}

/// The input image with predicted contours (fovea red, disc green), the
/// annotated disc contour in blue and annotated centers as yellow crosses.
pub fn render_overlay(sample: &Prepared, probs: &Tensor) -> RgbImage {
    let size = sample.target.size();
    let plane = size * size;
    let px = sample.image.data();
    let mut img = RgbImage::from_fn(size as u32, size as u32, |x, y| {
        let i = y as usize * size + x as usize;
        let c = |k: usize| (px[k * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([c(0), c(1), c(2)])
    });
    if sample.has_od_mask {
        let truth: Vec<bool> = sample.target.od().iter().map(|&v| v > 0.5).collect();
        draw_contour(&mut img, &truth, size, TRUE_OD);
    }
    let p = probs.data();
    draw_contour(&mut img, &binarize(&p[..plane], DEFAULT_THRESHOLD), size, PRED_FOVEA);
    draw_contour(&mut img, &binarize(&p[plane..2 * plane], DEFAULT_THRESHOLD), size, PRED_OD);
    let arm = (size / 64).max(2) as isize;
    draw_cross(&mut img, sample.fovea_xy, arm, TRUE_MARK);
    if let Some(od) = sample.od_xy {
        draw_cross(&mut img, od, arm, TRUE_MARK);
    }
    img
}

pub fn write_overlay(path: &Path, sample: &Prepared, probs: &Tensor) -> Result<(), MetricsError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    render_overlay(sample, probs).save(path).map_err(|e| MetricsError::Image(e.to_string()))
}
