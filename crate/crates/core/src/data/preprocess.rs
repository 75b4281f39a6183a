use super::{DataError, FundusSample};
use crate::tensor::{ResampleMode, Shape, Tensor};

/// Resized coordinates are original coordinates times these factors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScaleFactors {
    pub sx: f64,
    pub sy: f64,
}

impl ScaleFactors {
    pub const IDENTITY: ScaleFactors = ScaleFactors { sx: 1.0, sy: 1.0 };

    pub fn to_resized(&self, (x, y): (f64, f64)) -> (f64, f64) {
        (x * self.sx, y * self.sy)
    }

    pub fn to_original(&self, (x, y): (f64, f64)) -> (f64, f64) {
        (x / self.sx, y / self.sy)
    }
}

/// Two-channel binary target: channel 0 is the fovea disc, channel 1 the optic disc.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetMask {
    tensor: Tensor,
}

impl TargetMask {
    pub fn empty(size: usize) -> Self {
        TargetMask { tensor: Tensor::zeros(Shape::new(1, 2, size, size)) }
    }

    /// Wraps a 1×2×S×S tensor of zeros and ones.
    pub fn from_tensor(tensor: Tensor) -> Result<Self, DataError> {
        let s = tensor.shape();
        if s.n() != 1 || s.c() != 2 || s.h() != s.w() {
            return Err(DataError::Invalid(format!("target mask must be 1×2×S×S, got {s}")));
        }
        if tensor.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(DataError::Invalid("target mask is not binary".into()));
        }
        Ok(TargetMask { tensor })
    }

    pub fn size(&self) -> usize {
        self.tensor.shape().h()
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.size() * self.size();
        &self.tensor.data()[c * plane..(c + 1) * plane]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let plane = self.size() * self.size();
        &mut self.tensor.data_mut()[c * plane..(c + 1) * plane]
    }

    pub fn fovea(&self) -> &[f32] {
        self.channel(0)
    }

    pub fn od(&self) -> &[f32] {
        self.channel(1)
    }

    pub fn count(&self, c: usize) -> usize {
        self.channel(c).iter().filter(|&&v| v != 0.0).count()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    /// Fills the disc of radius `r` around `(cx, cy)` in channel `c`, clipped at the borders.
    pub fn draw_disc(&mut self, c: usize, (cx, cy): (f64, f64), r: f64) {
        let size = self.size();
        let plane = self.channel_mut(c);
        let lo = |v: f64| (v - r).floor().max(0.0) as usize;
        let hi = |v: f64| ((v + r).ceil().max(-1.0) as isize + 1).clamp(0, size as isize) as usize;
        for y in lo(cy)..hi(cy) {
            for x in lo(cx)..hi(cx) {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                if dx * dx + dy * dy <= r * r {
                    plane[y * size + x] = 1.0;
                }
            }
        }
    }
}

/// One network-ready sample.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub id: String,
    /// 1×3×S×S, values in [0,1].
    pub image: Tensor,
    pub target: TargetMask,
    pub scale: ScaleFactors,
    /// Fovea in resized coordinates.
    pub fovea_xy: (f64, f64),
    /// Annotated optic-disc center in resized coordinates.
    pub od_xy: Option<(f64, f64)>,
    pub has_od_mask: bool,
}

/// Fovea disc radius at a given square size: 32 px at 512.
pub fn fovea_radius_for(size: usize) -> f64 {
    32.0 * size as f64 / 512.0
}

fn rgb_tensor(width: usize, height: usize, rgb: &[u8]) -> Tensor {
    Tensor::from_fn(Shape::new(1, 3, height, width), |[_, c, y, x]| rgb[(y * width + x) * 3 + c] as f32 / 255.0)
}

fn image_tensor(sample: &FundusSample) -> Tensor {
    rgb_tensor(sample.width, sample.height, &sample.image)
}

/// Resizes an unannotated RGB image to the network input.
pub fn prepare_image(width: usize, height: usize, rgb: &[u8], out_size: usize) -> Result<(Tensor, ScaleFactors), DataError> {
    if width == 0 || height == 0 || rgb.len() != width * height * 3 {
        return Err(DataError::Invalid(format!("{} bytes do not form a {width}×{height} RGB image", rgb.len())));
    }
    let scale = ScaleFactors { sx: out_size as f64 / width as f64, sy: out_size as f64 / height as f64 };
    let t = rgb_tensor(width, height, rgb);
    let t = if (width, height) == (out_size, out_size) {
        t
    } else {
        t.resized((out_size, out_size), ResampleMode::Bilinear).map_err(|e| DataError::Invalid(e.to_string()))?
    };
    Ok((t, scale))
}

/// Resizes a sample to `out_size`² and rasterizes its target mask.
pub fn preprocess(sample: &FundusSample, out_size: usize, fovea_radius: f64) -> Result<Prepared, DataError> {
    if out_size < 32 {
        return Err(DataError::Invalid(format!("output size must be at least 32, got {out_size}")));
    }
    sample.validate()?;
    let (w, h) = (sample.width, sample.height);
    let scale = ScaleFactors { sx: out_size as f64 / w as f64, sy: out_size as f64 / h as f64 };
    let image = if (w, h) == (out_size, out_size) {
        image_tensor(sample)
    } else {
        image_tensor(sample)
            .resized((out_size, out_size), ResampleMode::Bilinear)
            .map_err(|e| DataError::Sample { id: sample.id.clone(), detail: e.to_string() })?
    };
    let mut target = TargetMask::empty(out_size);
    let fovea_xy = scale.to_resized(sample.fovea_xy);
    target.draw_disc(0, fovea_xy, fovea_radius);
    if let Some(mask) = &sample.od_mask {
        let m = Tensor::from_vec(Shape::new(1, 1, h, w), mask.iter().map(|&v| v as f32).collect())
            .expect("mask size checked by validate");
        let m = m
            .resized((out_size, out_size), ResampleMode::Nearest)
            .map_err(|e| DataError::Sample { id: sample.id.clone(), detail: e.to_string() })?;
        for (dst, &v) in target.channel_mut(1).iter_mut().zip(m.data()) {
            *dst = if v >= 0.5 { 1.0 } else { 0.0 };
        }
    }
    Ok(Prepared {
        id: sample.id.clone(),
        image,
        target,
        scale,
        fovea_xy,
        od_xy: sample.od_xy.map(|p| scale.to_resized(p)),
        has_od_mask: sample.od_mask.is_some(),
    })
}

/// Concatenates 1×C×H×W tensors into an N×C×H×W batch.
pub fn stack(items: &[&Tensor]) -> Result<Tensor, DataError> {
    let first = items.first().ok_or_else(|| DataError::Invalid("cannot stack an empty batch".into()))?.shape();
    let mut data = Vec::with_capacity(first.numel() * items.len());
    for t in items {
        let s = t.shape();
        if s.n() != 1 || s.c() != first.c() || s.h() != first.h() || s.w() != first.w() {
            return Err(DataError::Invalid(format!("cannot stack {s} with {first}")));
        }
        data.extend_from_slice(t.data());
    }
    Ok(Tensor::from_vec(Shape::new(items.len(), first.c(), first.h(), first.w()), data).expect("sizes checked"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blank(id: &str, w: usize, h: usize, fovea: (f64, f64)) -> FundusSample {
        FundusSample {
            id: id.into(),
            width: w,
            height: h,
            image: vec![128; w * h * 3],
            fovea_xy: fovea,
            od_mask: None,
            od_xy: None,
        }
    }

    #[test]
    fn same_size_keeps_coordinates() {
        let p = preprocess(&blank("a", 64, 64, (10.5, 20.25)), 64, 4.0).unwrap();
        assert_eq!(p.fovea_xy, (10.5, 20.25));
        assert_eq!(p.scale, ScaleFactors::IDENTITY);
        assert!(p.image.data().iter().all(|&v| v == 128.0 / 255.0));
    }

    #[test]
    fn centered_fovea_scales_proportionally() {
        let p = preprocess(&blank("a", 1024, 1024, (512.0, 512.0)), 512, 32.0).unwrap();
        assert_eq!(p.fovea_xy, (256.0, 256.0));
        let m = &p.target;
        assert_eq!(m.fovea()[256 * 512 + 256], 1.0);
        assert_eq!(m.fovea()[256 * 512 + 256 + 33], 0.0);
    }

    #[test]
    fn disc_area_matches_circle() {
        let mut m = TargetMask::empty(256);
        m.draw_disc(0, (100.3, 120.7), 32.0);
        let area = std::f64::consts::PI * 32.0 * 32.0;
        assert!((m.count(0) as f64 - area).abs() / area < 0.05);
        assert_eq!(m.count(1), 0);
    }

    #[test]
    fn disc_is_clipped_at_borders() {
        let mut m = TargetMask::empty(32);
        m.draw_disc(0, (0.0, 0.0), 4.0);
        // Quarter disc, including the axes.
        let full: usize = (-4i32..=4).flat_map(|y| (-4i32..=4).map(move |x| (x, y))).filter(|(x, y)| x * x + y * y <= 16).count();
        let quarter: usize = (0i32..=4).flat_map(|y| (0i32..=4).map(move |x| (x, y))).filter(|(x, y)| x * x + y * y <= 16).count();
        assert!(quarter < full);
        assert_eq!(m.count(0), quarter);
    }

    #[test]
    fn back_projection_recovers_original_coordinates() {
        let s = ScaleFactors { sx: 512.0 / 1444.0, sy: 512.0 / 1444.0 };
        let p = (701.37, 1100.02);
        let q = s.to_original(s.to_resized(p));
        assert!((p.0 - q.0).abs() < 0.5 && (p.1 - q.1).abs() < 0.5);
    }

    #[test]
    fn od_mask_stays_binary_after_resize() {
        let mut s = blank("a", 100, 80, (50.0, 40.0));
        let mut mask = vec![0u8; 100 * 80];
        for y in 20..50 {
            for x in 10..40 {
                mask[y * 100 + x] = 1;
            }
        }
        s.od_mask = Some(mask);
        let p = preprocess(&s, 64, 4.0).unwrap();
        assert!(p.target.od().iter().all(|&v| v == 0.0 || v == 1.0));
        assert!(p.target.count(1) > 0);
        assert!(p.has_od_mask);
    }

    #[test]
    fn rejects_tiny_output() {
        assert!(preprocess(&blank("a", 64, 64, (1.0, 1.0)), 16, 4.0).is_err());
    }
}
