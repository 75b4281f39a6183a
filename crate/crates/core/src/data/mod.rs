//! Fundus datasets: loading, preprocessing, augmentation, splits and a
//! synthetic generator.

mod augment;
mod io;
mod preprocess;
mod synth;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub use augment::{augment, AugmentParams, MAX_ROTATION};
pub use io::{load_dataset, read_rgb, write_dataset};
pub use preprocess::{fovea_radius_for, prepare_image, preprocess, stack, Prepared, ScaleFactors, TargetMask};
pub use synth::{synth_fundus, synth_fundus_layers, SynthLayers};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{id}: {detail}")]
    Sample { id: String, detail: String },
    #[error("{path}: {detail}")]
    File { path: String, detail: String },
    #[error("invalid argument: {0}")]
    Invalid(String),
}

/// One fundus photograph with its landmarks. Coordinates are in pixels of the
/// stored image, x = column and y = row.
#[derive(Clone, Debug, PartialEq)]
pub struct FundusSample {
    pub id: String,
    pub width: usize,
    pub height: usize,
    /// Row-major RGB bytes, `height × width × 3`.
    pub image: Vec<u8>,
    pub fovea_xy: (f64, f64),
    /// Row-major `height × width` map of 0/1 values.
    pub od_mask: Option<Vec<u8>>,
    pub od_xy: Option<(f64, f64)>,
}

impl FundusSample {
    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |detail: String| Err(DataError::Sample { id: self.id.clone(), detail });
        if self.width == 0 || self.height == 0 {
            return fail("image has a zero dimension".into());
        }
        if self.image.len() != self.width * self.height * 3 {
            return fail(format!("image buffer holds {} bytes, expected {}", self.image.len(), self.width * self.height * 3));
        }
        let inside = |(x, y): (f64, f64)| x >= 0.0 && y >= 0.0 && x <= self.width as f64 && y <= self.height as f64;
        if !inside(self.fovea_xy) {
            return fail(format!("fovea {:?} lies outside the {}×{} image", self.fovea_xy, self.width, self.height));
        }
        if let Some(od) = self.od_xy.filter(|&p| !inside(p)) {
            return fail(format!("optic disc {od:?} lies outside the {}×{} image", self.width, self.height));
        }
        if let Some(mask) = &self.od_mask {
            if mask.len() != self.width * self.height {
                return fail("optic-disc mask does not match the image size".into());
            }
            if mask.iter().any(|&v| v > 1) {
                return fail("optic-disc mask is not binary".into());
            }
        }
        Ok(())
    }
}

/// Disjoint train / validation / test partitions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

/// Shuffles with `seed`, holds out 15% for test, then 20% of the rest for
/// validation. Every partition gets at least one item.
pub fn split<T: Clone>(items: &[T], seed: u64) -> Result<Split<T>, DataError> {
    let n = items.len();
    if n < 5 {
        return Err(DataError::Invalid(format!("splitting needs at least 5 samples, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = ((0.15 * n as f64).round() as usize).max(1);
    let rest = n - test;
    let val = ((0.2 * rest as f64).round() as usize).clamp(1, rest - 1);
    let pick = |idx: &[usize]| idx.iter().map(|&i| items[i].clone()).collect::<Vec<_>>();
    Ok(Split {
        test: pick(&order[..test]),
        val: pick(&order[test..test + val]),
        train: pick(&order[test + val..]),
    })
}

/// Random stream for one sample in one epoch; independent of loading order.
pub fn sample_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((epoch as u64).to_le_bytes());
    h.update((index as u64).to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes_follow_ratios() {
        let ids: Vec<usize> = (0..100).collect();
        let s = split(&ids, 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (68, 17, 15));
        let s = split(&ids[..5], 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (3, 1, 1));
        assert!(split(&ids[..4], 1).is_err());
    }

    #[test]
    fn sample_streams_differ() {
        use rand::Rng;
        let a: u64 = sample_rng(1, 0, 0).random();
        assert_eq!(a, sample_rng(1, 0, 0).random::<u64>());
        assert_ne!(a, sample_rng(1, 1, 0).random::<u64>());
        assert_ne!(a, sample_rng(1, 0, 1).random::<u64>());
    }
}
