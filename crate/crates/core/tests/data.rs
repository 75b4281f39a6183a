use std::collections::BTreeSet;
use std::fs;

use hba_core::data::{
    load_dataset, preprocess, sample_rng, split, synth_fundus, synth_fundus_layers, write_dataset, AugmentParams,
    DataError, ScaleFactors,
};
use proptest::prelude::*;

#[test]
fn empty_manifest_gives_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("fovea.csv"), "id,x,y\n").unwrap();
    assert!(load_dataset(dir.path()).unwrap().is_empty());
}

#[test]
fn missing_image_names_the_sample() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("fovea.csv"), "id,x,y\nghost_07,3,4\n").unwrap();
    match load_dataset(dir.path()) {
        Err(DataError::Sample { id, .. }) => assert_eq!(id, "ghost_07"),
        other => panic!("expected a sample error, got {other:?}"),
    }
}

#[test]
fn missing_directory_names_the_path() {
    let err = load_dataset(std::path::Path::new("/nonexistent/fundus")).unwrap_err().to_string();
    assert!(err.contains("/nonexistent/fundus"), "{err}");
}

#[test]
fn malformed_and_out_of_bounds_rows_name_the_sample() {
    let dir = tempfile::tempdir().unwrap();
    let samples = synth_fundus(1, 64, 0.0, 1).unwrap();
    write_dataset(dir.path(), &samples).unwrap();
    let id = &samples[0].id;
    fs::write(dir.path().join("fovea.csv"), format!("id,x,y\n{id},abc,4\n")).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(DataError::Sample { id: ref e, .. }) if e == id));
    fs::write(dir.path().join("fovea.csv"), format!("id,x,y\n{id},70,4\n")).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(DataError::Sample { id: ref e, .. }) if e == id));
}

#[test]
fn synthetic_dataset_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let samples = synth_fundus(3, 64, 0.5, 42).unwrap();
    write_dataset(dir.path(), &samples).unwrap();
    let loaded = load_dataset(dir.path()).unwrap();
    assert_eq!(loaded, samples);
}

#[test]
fn dataset_without_od_annotations_loads() {
    let dir = tempfile::tempdir().unwrap();
    let mut samples = synth_fundus(2, 64, 0.0, 3).unwrap();
    for s in &mut samples {
        s.od_mask = None;
        s.od_xy = None;
    }
    write_dataset(dir.path(), &samples).unwrap();
    assert!(!dir.path().join("od.csv").exists());
    let loaded = load_dataset(dir.path()).unwrap();
    assert!(loaded.iter().all(|s| s.od_mask.is_none() && s.od_xy.is_none()));
}

#[test]
fn healthy_synthetic_images_have_no_lesions() {
    for (_, layers) in synth_fundus_layers(4, 96, 0.0, 5).unwrap() {
        assert!(!layers.lesions.iter().any(|&l| l));
    }
    let sick = synth_fundus_layers(4, 96, 1.0, 5).unwrap();
    assert!(sick.iter().all(|(_, l)| l.lesions.iter().any(|&v| v)));
    for (_, l) in &sick {
        assert!(!l.lesions.iter().zip(&l.od).any(|(a, b)| *a && *b));
    }
}

#[test]
fn od_mask_centroid_matches_generator_center() {
    for (s, layers) in synth_fundus_layers(6, 128, 0.5, 9).unwrap() {
        let mask = s.od_mask.as_ref().unwrap();
        let (mut x, mut y, mut n) = (0.0, 0.0, 0.0);
        for (i, &v) in mask.iter().enumerate() {
            if v == 1 {
                x += (i % s.width) as f64;
                y += (i / s.width) as f64;
                n += 1.0;
            }
        }
        let (cx, cy) = layers.od_center;
        assert!((x / n - cx).abs() <= 1.0 && (y / n - cy).abs() <= 1.0);
        assert_eq!(s.od_xy, Some(layers.od_center));
    }
}

#[test]
fn synthetic_generation_is_deterministic() {
    assert_eq!(synth_fundus(3, 64, 0.7, 11).unwrap(), synth_fundus(3, 64, 0.7, 11).unwrap());
    assert_ne!(synth_fundus(1, 64, 0.7, 11).unwrap(), synth_fundus(1, 64, 0.7, 12).unwrap());
    // Sample i does not depend on how many samples are generated.
    assert_eq!(synth_fundus(2, 64, 0.7, 11).unwrap()[1], synth_fundus(3, 64, 0.7, 11).unwrap()[1]);
}

#[test]
fn synthetic_fovea_is_darker_than_disc() {
    for s in synth_fundus(4, 128, 0.0, 2).unwrap() {
        let px = |(x, y): (f64, f64)| {
            let i = (y.round() as usize * s.width + x.round() as usize) * 3;
            s.image[i] as u32 + s.image[i + 1] as u32 + s.image[i + 2] as u32
        };
        assert!(px(s.fovea_xy) < px(s.od_xy.unwrap()));
    }
}

#[test]
fn synth_rejects_bad_arguments() {
    assert!(synth_fundus(1, 32, 0.0, 0).is_err());
    assert!(synth_fundus(1, 64, 1.5, 0).is_err());
}

#[test]
fn preprocessed_synthetic_sample_is_aligned() {
    let s = &synth_fundus(1, 256, 0.0, 4).unwrap()[0];
    let p = preprocess(s, 128, 8.0).unwrap();
    assert_eq!(p.scale, ScaleFactors { sx: 0.5, sy: 0.5 });
    let fx = p.fovea_xy.0.round() as usize;
    let fy = p.fovea_xy.1.round() as usize;
    assert_eq!(p.target.fovea()[fy * 128 + fx], 1.0);
    let (ox, oy) = p.od_xy.unwrap();
    assert_eq!(p.target.od()[oy.round() as usize * 128 + ox.round() as usize], 1.0);
}

#[test]
fn augmentation_moves_image_and_mask_together() {
    let s = &synth_fundus(1, 128, 0.0, 6).unwrap()[0];
    let p = preprocess(s, 128, 8.0).unwrap();
    let params = AugmentParams { angle: 0.15, flip_h: true, flip_v: false };
    let (img, mask) = params.apply(&p.image, &p.target);
    // The disc is the brightest structure; its transformed mask still covers bright pixels.
    let brightness = |i: usize| img.data()[i] + img.data()[128 * 128 + i] + img.data()[2 * 128 * 128 + i];
    let (mut inside, mut n_in, mut outside, mut n_out) = (0.0, 0.0, 0.0, 0.0);
    for (i, &m) in mask.od().iter().enumerate() {
        if m == 1.0 {
            inside += brightness(i);
            n_in += 1.0;
        } else if brightness(i) > 0.0 {
            outside += brightness(i);
            n_out += 1.0;
        }
    }
    assert!(inside / n_in > 1.5 * outside / n_out);
}

#[test]
fn augmentation_is_reproducible_per_sample_stream() {
    let a = AugmentParams::sample(&mut sample_rng(3, 7, 2));
    let b = AugmentParams::sample(&mut sample_rng(3, 7, 2));
    assert_eq!(a, b);
    assert!(a.angle.abs() <= 0.2);
}

proptest! {
    #[test]
    fn split_partitions_are_disjoint_and_exhaustive(n in 5usize..200, seed in any::<u64>()) {
        let ids: Vec<usize> = (0..n).collect();
        let s = split(&ids, seed).unwrap();
        prop_assert_eq!(&s, &split(&ids, seed).unwrap());
        let all: BTreeSet<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        prop_assert_eq!(all.len(), n);
        prop_assert_eq!(s.train.len() + s.val.len() + s.test.len(), n);
        prop_assert!(!s.train.is_empty() && !s.val.is_empty() && !s.test.is_empty());
    }

    #[test]
    fn back_projection_is_self_inverse(w in 64usize..3000, h in 64usize..3000, fx in 0.0f64..1.0, fy in 0.0f64..1.0, out in 32usize..1024) {
        let s = ScaleFactors { sx: out as f64 / w as f64, sy: out as f64 / h as f64 };
        let p = (fx * w as f64, fy * h as f64);
        let q = s.to_original(s.to_resized(p));
        prop_assert!((p.0 - q.0).abs() < 0.5 && (p.1 - q.1).abs() < 0.5);
    }

    #[test]
    fn masks_stay_binary_under_any_augmentation(seed in any::<u64>()) {
        let s = &synth_fundus(1, 64, 0.3, seed % 17).unwrap()[0];
        let p = preprocess(s, 64, 4.0).unwrap();
        let params = AugmentParams::sample(&mut sample_rng(seed, 0, 0));
        let (_, m) = params.apply(&p.image, &p.target);
        prop_assert!(m.tensor().data().iter().all(|&v| v == 0.0 || v == 1.0));
    }
}
