//! On-disk layout:
//!
//! ```text
//! root/images/<id>.png      RGB fundus image
//! root/od_masks/<id>.png    optional optic-disc mask, white = disc
//! root/fovea.csv            id,x,y
//! root/od.csv               optional, id,x,y
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use image::{GrayImage, RgbImage};

use super::{DataError, FundusSample};

fn file_err(path: &Path, detail: impl ToString) -> DataError {
    DataError::File { path: path.display().to_string(), detail: detail.to_string() }
}

fn read_points(path: &Path) -> Result<Vec<(String, f64, f64)>, DataError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| file_err(path, e))?;
    let headers = reader.headers().map_err(|e| file_err(path, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["id", "x", "y"] {
        return Err(file_err(path, format!("expected header `id,x,y`, found `{}`", headers.iter().collect::<Vec<_>>().join(","))));
    }
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| file_err(path, format!("row {}: {e}", line + 2)))?;
        let id = record.get(0).unwrap_or_default().to_string();
        let coord = |i: usize| -> Result<f64, DataError> {
            record
                .get(i)
                .and_then(|v| v.parse::<f64>().ok())
                .filter(|v| v.is_finite())
                .ok_or_else(|| DataError::Sample { id: id.clone(), detail: format!("malformed row in {}", path.display()) })
        };
        if id.is_empty() {
            return Err(file_err(path, format!("row {} has an empty id", line + 2)));
        }
        rows.push((id.clone(), coord(1)?, coord(2)?));
    }
    Ok(rows)
}

/// Reads any image file as 8-bit RGB: `(width, height, pixels)`.
pub fn read_rgb(path: &Path) -> Result<(usize, usize, Vec<u8>), DataError> {
    let img = image::open(path).map_err(|e| file_err(path, e))?.to_rgb8();
    Ok((img.width() as usize, img.height() as usize, img.into_raw()))
}

/// Reads a dataset, sorted by id. Every row of `fovea.csv` must have an image.
pub fn load_dataset(root: &Path) -> Result<Vec<FundusSample>, DataError> {
    if !root.is_dir() {
        return Err(file_err(root, "dataset directory does not exist"));
    }
    let fovea = read_points(&root.join("fovea.csv"))?;
    let od_path = root.join("od.csv");
    let od: BTreeMap<String, (f64, f64)> = if od_path.exists() {
        read_points(&od_path)?.into_iter().map(|(id, x, y)| (id, (x, y))).collect()
    } else {
        BTreeMap::new()
    };
    let mut samples = Vec::with_capacity(fovea.len());
    for (id, x, y) in fovea {
        let sample_err = |detail: String| DataError::Sample { id: id.clone(), detail };
        let img_path = root.join("images").join(format!("{id}.png"));
        if !img_path.is_file() {
            return Err(sample_err(format!("image {} is missing", img_path.display())));
        }
        let img = image::open(&img_path).map_err(|e| sample_err(format!("cannot read {}: {e}", img_path.display())))?.to_rgb8();
        let (width, height) = (img.width() as usize, img.height() as usize);
        let mask_path = root.join("od_masks").join(format!("{id}.png"));
        let od_mask = if mask_path.is_file() {
            let m = image::open(&mask_path)
                .map_err(|e| sample_err(format!("cannot read {}: {e}", mask_path.display())))?
                .to_luma8();
            if (m.width() as usize, m.height() as usize) != (width, height) {
                return Err(sample_err(format!("mask is {}×{}, image is {width}×{height}", m.width(), m.height())));
            }
            Some(m.into_raw().into_iter().map(|v| u8::from(v > 127)).collect())
        } else {
            None
        };
        let sample = FundusSample {
            id: id.clone(),
            width,
            height,
            image: img.into_raw(),
            fovea_xy: (x, y),
            od_mask,
            od_xy: od.get(&id).copied(),
        };
        sample.validate()?;
        samples.push(sample);
    }
    samples.sort_by(|a, b| a.id.cmp(&b.id));
    if let Some(w) = samples.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(DataError::Sample { id: w[0].id.clone(), detail: "listed twice in fovea.csv".into() });
    }
    Ok(samples)
}

/// Writes samples in the layout [`load_dataset`] reads.
pub fn write_dataset(root: &Path, samples: &[FundusSample]) -> Result<(), DataError> {
    let images = root.join("images");
    let masks = root.join("od_masks");
    fs::create_dir_all(&images).map_err(|e| file_err(&images, e))?;
    if samples.iter().any(|s| s.od_mask.is_some()) {
        fs::create_dir_all(&masks).map_err(|e| file_err(&masks, e))?;
    }
    let fovea_path = root.join("fovea.csv");
    let mut fovea = csv::Writer::from_path(&fovea_path).map_err(|e| file_err(&fovea_path, e))?;
    fovea.write_record(["id", "x", "y"]).map_err(|e| file_err(&fovea_path, e))?;
    let mut od_rows = Vec::new();
    for s in samples {
        s.validate()?;
        let path = images.join(format!("{}.png", s.id));
        RgbImage::from_raw(s.width as u32, s.height as u32, s.image.clone())
            .expect("size checked by validate")
            .save(&path)
            .map_err(|e| file_err(&path, e))?;
        if let Some(mask) = &s.od_mask {
            let path = masks.join(format!("{}.png", s.id));
            GrayImage::from_raw(s.width as u32, s.height as u32, mask.iter().map(|&v| v * 255).collect())
                .expect("size checked by validate")
                .save(&path)
                .map_err(|e| file_err(&path, e))?;
        }
        fovea
            .write_record([s.id.clone(), s.fovea_xy.0.to_string(), s.fovea_xy.1.to_string()])
            .map_err(|e| file_err(&fovea_path, e))?;
        if let Some((x, y)) = s.od_xy {
            od_rows.push([s.id.clone(), x.to_string(), y.to_string()]);
        }
    }
    fovea.flush().map_err(|e| file_err(&fovea_path, e))?;
    if !od_rows.is_empty() {
        let path = root.join("od.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| file_err(&path, e))?;
        w.write_record(["id", "x", "y"]).map_err(|e| file_err(&path, e))?;
        for row in od_rows {
            w.write_record(row).map_err(|e| file_err(&path, e))?;
        }
        w.flush().map_err(|e| file_err(&path, e))?;
    }
    Ok(())
}
