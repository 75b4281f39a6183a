use rand::Rng;

use super::TargetMask;
use crate::tensor::{Shape, Tensor};

/// Largest rotation magnitude in radians.
pub const MAX_ROTATION: f64 = 0.2;

/// One geometric transform: rotation about the image center, then flips.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub angle: f64,
    pub flip_h: bool,
    pub flip_v: bool,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams { angle: 0.0, flip_h: false, flip_v: false };

    /// Angle ~ U(−0.2, 0.2), each flip with probability 0.5.
    pub fn sample(rng: &mut impl Rng) -> Self {
        AugmentParams {
            angle: rng.random_range(-MAX_ROTATION..=MAX_ROTATION),
            flip_h: rng.random_bool(0.5),
            flip_v: rng.random_bool(0.5),
        }
    }

    /// Where the pixel at `(x, y)` of a `size`² image lands.
    pub fn map_point(&self, (x, y): (f64, f64), size: usize) -> (f64, f64) {
        let c = (size as f64 - 1.0) / 2.0;
        let (s, co) = self.angle.sin_cos();
        let (dx, dy) = (x - c, y - c);
        let (mut x, mut y) = (c + co * dx - s * dy, c + s * dx + co * dy);
        let last = size as f64 - 1.0;
        if self.flip_h {
            x = last - x;
        }
        if self.flip_v {
            y = last - y;
        }
        (x, y)
    }

    /// Source position sampled by output pixel `(x, y)`.
    fn source(&self, x: usize, y: usize, size: usize) -> (f64, f64) {
        let last = size - 1;
        let x = if self.flip_h { last - x } else { x } as f64;
        let y = if self.flip_v { last - y } else { y } as f64;
        let c = (size as f64 - 1.0) / 2.0;
        let (s, co) = self.angle.sin_cos();
        let (dx, dy) = (x - c, y - c);
        (c + co * dx + s * dy, c - s * dx + co * dy)
    }

    /// Applies the transform to an image (bilinear) and its mask (nearest);
    /// pixels that come from outside the frame are black.
    pub fn apply(&self, image: &Tensor, target: &TargetMask) -> (Tensor, TargetMask) {
        if *self == AugmentParams::IDENTITY {
            return (image.clone(), target.clone());
        }
        let size = target.size();
        let channels = image.shape().c();
        assert_eq!(image.shape(), Shape::new(1, channels, size, size), "image and mask sizes differ");
        let src = image.data();
        let mut out = vec![0.0f32; src.len()];
        let mut mask = TargetMask::empty(size);
        let plane = size * size;
        let n = size as isize;
        for y in 0..size {
            for x in 0..size {
                let (sx, sy) = self.source(x, y, size);
                let (rx, ry) = (sx.round() as isize, sy.round() as isize);
                if (0..n).contains(&rx) && (0..n).contains(&ry) {
                    let at = ry as usize * size + rx as usize;
                    for c in 0..2 {
                        mask.channel_mut(c)[y * size + x] = target.channel(c)[at];
                    }
                }
                let (x0, y0) = (sx.floor(), sy.floor());
                let (fx, fy) = ((sx - x0) as f32, (sy - y0) as f32);
                let (x0, y0) = (x0 as isize, y0 as isize);
                let taps = [(x0, y0, (1.0 - fx) * (1.0 - fy)), (x0 + 1, y0, fx * (1.0 - fy)), (x0, y0 + 1, (1.0 - fx) * fy), (x0 + 1, y0 + 1, fx * fy)];
                for c in 0..channels {
                    let mut v = 0.0;
                    for &(tx, ty, wgt) in &taps {
                        if wgt != 0.0 && (0..n).contains(&tx) && (0..n).contains(&ty) {
                            v += wgt * src[c * plane + ty as usize * size + tx as usize];
                        }
                    }
                    out[c * plane + y * size + x] = v;
                }
            }
        }
        (Tensor::from_vec(image.shape(), out).expect("same shape"), mask)
    }
}

/// Random rotation and flips, applied identically to image and mask.
pub fn augment(image: &Tensor, target: &TargetMask, rng: &mut impl Rng) -> (Tensor, TargetMask) {
    AugmentParams::sample(rng).apply(image, target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn centroid(m: &[f32], size: usize) -> (f64, f64) {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
        for (i, &v) in m.iter().enumerate() {
            if v != 0.0 {
                sx += (i % size) as f64;
                sy += (i / size) as f64;
                n += 1.0;
            }
        }
        (sx / n, sy / n)
    }

    fn ramp(size: usize) -> Tensor {
        Tensor::from_fn(Shape::new(1, 3, size, size), |[_, c, y, x]| (c * 7 + y * 3 + x) as f32 / 500.0)
    }

    #[test]
    fn identity_transform_is_exact() {
        let mut m = TargetMask::empty(32);
        m.draw_disc(0, (10.0, 12.0), 3.0);
        let img = ramp(32);
        let p = AugmentParams { angle: 0.0, flip_h: false, flip_v: false };
        let (a, b) = p.apply(&img, &m);
        assert_eq!(a, img);
        assert_eq!(b, m);
    }

    #[test]
    fn horizontal_flip_mirrors_the_centroid() {
        let size = 40;
        let mut m = TargetMask::empty(size);
        m.draw_disc(0, (9.0, 15.0), 3.0);
        let p = AugmentParams { angle: 0.0, flip_h: true, flip_v: false };
        let (_, f) = p.apply(&ramp(size), &m);
        let (x, y) = centroid(f.fovea(), size);
        assert!((x - (size as f64 - 1.0 - 9.0)).abs() <= 1.0 && (y - 15.0).abs() <= 1.0, "{x} {y}");
    }

    #[test]
    fn delta_mask_follows_the_transform() {
        let size = 64;
        for &(angle, flip_h, flip_v) in &[(0.2, false, false), (-0.2, true, false), (0.13, true, true), (-0.07, false, true)] {
            let p = AugmentParams { angle, flip_h, flip_v };
            for &pt in &[(20.0, 30.0), (45.0, 12.0), (31.0, 31.0)] {
                let mut m = TargetMask::empty(size);
                m.channel_mut(1)[pt.1 as usize * size + pt.0 as usize] = 1.0;
                let (_, out) = p.apply(&Tensor::zeros(Shape::new(1, 3, size, size)), &m);
                let want = p.map_point(pt, size);
                let got = centroid(out.od(), size);
                assert!((got.0 - want.0).abs() <= 1.0 && (got.1 - want.1).abs() <= 1.0, "{p:?} {pt:?}: {got:?} vs {want:?}");
            }
        }
    }

    #[test]
    fn max_rotation_keeps_masks_binary_and_areas_close() {
        let size = 128;
        let mut m = TargetMask::empty(size);
        m.draw_disc(0, (50.0, 70.0), 8.0);
        m.draw_disc(1, (80.0, 60.0), 14.0);
        for angle in [MAX_ROTATION, -MAX_ROTATION] {
            let p = AugmentParams { angle, flip_h: false, flip_v: false };
            let (_, out) = p.apply(&ramp(size), &m);
            assert!(out.tensor().data().iter().all(|&v| v == 0.0 || v == 1.0));
            for c in 0..2 {
                let (a, b) = (m.count(c) as f64, out.count(c) as f64);
                assert!((a - b).abs() / a <= 0.15, "channel {c}: {a} → {b}");
            }
        }
    }

    #[test]
    fn rotation_fills_corners_with_black() {
        let img = Tensor::full(Shape::new(1, 3, 32, 32), 1.0);
        let p = AugmentParams { angle: MAX_ROTATION, flip_h: false, flip_v: false };
        let (out, _) = p.apply(&img, &TargetMask::empty(32));
        assert_eq!(out.at([0, 0, 0, 0]), 0.0);
        assert_eq!(out.at([0, 1, 16, 16]), 1.0);
    }
}
