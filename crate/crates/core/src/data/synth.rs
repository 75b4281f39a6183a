//! Procedural fundus images with exact ground truth.
//!
//! Each image shows a circular field of view with radial shading, a bright
//! elliptical optic disc, a dark macular spot at the fovea, vessel arcades
//! leaving the disc and, depending on `disease_level`, bright (drusen-like)
//! and dark (hemorrhage-like) lesions scattered over the retina.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{sample_rng, DataError, FundusSample};

/// Per-pixel structure labels of one generated image.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthLayers {
    pub od: Vec<bool>,
    pub vessels: Vec<bool>,
    pub lesions: Vec<bool>,
    /// Center of the optic-disc ellipse.
    pub od_center: (f64, f64),
    /// Semi-axes (x, y) of the optic-disc ellipse.
    pub od_radii: (f64, f64),
}

struct Canvas {
    size: usize,
    rgb: Vec<[f64; 3]>,
}

impl Canvas {
    fn blend(&mut self, x: usize, y: usize, color: [f64; 3], alpha: f64) {
        let px = &mut self.rgb[y * self.size + x];
        for c in 0..3 {
            px[c] = px[c] * (1.0 - alpha) + color[c] * alpha;
        }
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 == 0.0 { 0.0 } else { (((p.0 - a.0) * vx + (p.1 - a.1) * vy) / len2).clamp(0.0, 1.0) };
    let (dx, dy) = (p.0 - a.0 - t * vx, p.1 - a.1 - t * vy);
    (dx * dx + dy * dy).sqrt()
}

fn render(size: usize, disease_level: f64, rng: &mut ChaCha8Rng) -> (Vec<u8>, (f64, f64), SynthLayers) {
    let s = size as f64;
    let c = (s - 1.0) / 2.0;
    let field = 0.47 * s;
    let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let od_center = (c + side * rng.random_range(0.17..0.23) * s, c + rng.random_range(-0.06..0.06) * s);
    let rx = rng.random_range(0.065..0.085) * s;
    let od_radii = (rx, rx * rng.random_range(1.0..1.15));
    let fovea = (od_center.0 - side * rng.random_range(0.34..0.40) * s, od_center.1 + rng.random_range(0.0..0.05) * s);

    let base = [rng.random_range(0.68..0.8), rng.random_range(0.28..0.38), rng.random_range(0.1..0.18)];
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| (rng.random_range(1.0..4.0) / s, rng.random_range(1.0..4.0) / s, rng.random_range(0.0..std::f64::consts::TAU)))
        .collect();
    let mut canvas = Canvas { size, rgb: vec![[0.0; 3]; size * size] };
    let n = size * size;
    let mut layers = SynthLayers { od: vec![false; n], vessels: vec![false; n], lesions: vec![false; n], od_center, od_radii };
    let inside_field = |x: f64, y: f64| (x - c).powi(2) + (y - c).powi(2) <= field * field;

    let macula_sigma = 0.06 * s;
    for y in 0..size {
        for x in 0..size {
            let (xf, yf) = (x as f64, y as f64);
            if !inside_field(xf, yf) {
                continue;
            }
            let r2 = ((xf - c).powi(2) + (yf - c).powi(2)) / (field * field);
            let texture: f64 = waves.iter().map(|&(fx, fy, ph)| (xf * fx * 6.3 + yf * fy * 6.3 + ph).sin()).sum::<f64>() * 0.015;
            let d2 = (xf - fovea.0).powi(2) + (yf - fovea.1).powi(2);
            let macula = 1.0 - 0.45 * (-d2 / (2.0 * macula_sigma * macula_sigma)).exp();
            let shade = (1.0 - 0.35 * r2) * macula + texture;
            canvas.rgb[y * size + x] = [base[0] * shade, base[1] * shade, base[2] * shade];
        }
    }

    // Vessel arcades leave the disc toward the macula (above and below it) and the nasal side.
    let width = (s / 128.0).max(0.8);
    let mut vessels: Vec<(Vec<(f64, f64)>, f64)> = Vec::new();
    for (sign, reach, spread) in [(-1.0, 0.55, 0.2), (1.0, 0.55, 0.2), (-1.0, -0.25, 0.12), (1.0, -0.25, 0.12)] {
        let reach = reach * s * rng.random_range(0.9..1.1);
        let spread = spread * s * rng.random_range(0.85..1.15);
        let wobble = rng.random_range(0.0..std::f64::consts::TAU);
        let pts = (0..=24)
            .map(|k| {
                let t = k as f64 / 24.0;
                let x = od_center.0 - side * reach * t;
                let y = od_center.1
                    + sign * spread * (0.8 * std::f64::consts::PI * t).sin()
                    + 0.01 * s * (t * 9.0 + wobble).sin();
                (x, y)
            })
            .collect();
        vessels.push((pts, width * rng.random_range(0.9..1.3)));
    }
    for (pts, w) in &vessels {
        for seg in pts.windows(2) {
            let (a, b) = (seg[0], seg[1]);
            let x0 = (a.0.min(b.0) - w - 1.0).floor().max(0.0) as usize;
            let x1 = ((a.0.max(b.0) + w + 1.0).ceil().max(0.0) as usize).min(size - 1);
            let y0 = (a.1.min(b.1) - w - 1.0).floor().max(0.0) as usize;
            let y1 = ((a.1.max(b.1) + w + 1.0).ceil().max(0.0) as usize).min(size - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    if segment_distance((x as f64, y as f64), a, b) <= *w && inside_field(x as f64, y as f64) {
                        layers.vessels[y * size + x] = true;
                    }
                }
            }
        }
    }
    for i in 0..n {
        if layers.vessels[i] {
            canvas.blend(i % size, i / size, [0.42, 0.07, 0.05], 0.75);
        }
    }

    // Optic disc: exact ellipse of pixel centers, soft bright core.
    let od_color = [rng.random_range(0.92..1.0), rng.random_range(0.82..0.92), rng.random_range(0.5..0.65)];
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = ((x as f64 - od_center.0) / od_radii.0, (y as f64 - od_center.1) / od_radii.1);
            let rho = (dx * dx + dy * dy).sqrt();
            if rho <= 1.0 {
                layers.od[y * size + x] = true;
                let alpha = 0.75 + 0.25 * (1.0 - rho);
                canvas.blend(x, y, od_color, alpha);
            }
        }
    }

    // Lesions stay off the disc so its mask remains the only bright ellipse.
    let count = (disease_level * 40.0).round() as usize;
    for k in 0..count {
        let bright = k % 2 == 0;
        let r = rng.random_range(0.006..0.016) * s + 0.5;
        let (lx, ly) = loop {
            let (x, y) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
            let (dx, dy) = ((x - od_center.0) / (od_radii.0 + r + 2.0), (y - od_center.1) / (od_radii.1 + r + 2.0));
            if inside_field(x, y) && dx * dx + dy * dy > 1.0 {
                break (x, y);
            }
        };
        let color = if bright { [0.98, 0.93, 0.55] } else { [0.3, 0.04, 0.02] };
        let x0 = (lx - r).floor().max(0.0) as usize;
        let y0 = (ly - r).floor().max(0.0) as usize;
        for y in y0..((ly + r).ceil() as usize + 1).min(size) {
            for x in x0..((lx + r).ceil() as usize + 1).min(size) {
                let i = y * size + x;
                if (x as f64 - lx).powi(2) + (y as f64 - ly).powi(2) <= r * r && inside_field(x as f64, y as f64) && !layers.od[i] {
                    layers.lesions[i] = true;
                    canvas.blend(x, y, color, 0.85);
                }
            }
        }
    }

    let mut bytes = Vec::with_capacity(n * 3);
    for px in &canvas.rgb {
        let noise = if px == &[0.0; 3] { 0.0 } else { rng.random_range(-0.015..0.015) };
        for &v in px {
            bytes.push(((v + noise).clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    (bytes, fovea, layers)
}

/// Generates `n` samples of `size`² pixels together with their structure layers.
pub fn synth_fundus_layers(n: usize, size: usize, disease_level: f64, seed: u64) -> Result<Vec<(FundusSample, SynthLayers)>, DataError> {
    if size < 64 {
        return Err(DataError::Invalid(format!("synthetic images need size ≥ 64, got {size}")));
    }
    if !(0.0..=1.0).contains(&disease_level) {
        return Err(DataError::Invalid(format!("disease_level must be in [0,1], got {disease_level}")));
    }
    Ok((0..n)
        .map(|i| {
            let mut rng = sample_rng(seed, usize::MAX, i);
            let (image, fovea, layers) = render(size, disease_level, &mut rng);
            let sample = FundusSample {
                id: format!("synth_{i:04}"),
                width: size,
                height: size,
                image,
                fovea_xy: fovea,
                od_mask: Some(layers.od.iter().map(|&b| u8::from(b)).collect()),
                od_xy: Some(layers.od_center),
            };
            (sample, layers)
        })
        .collect())
}

/// Generates `n` synthetic fundus samples of `size`² pixels.
pub fn synth_fundus(n: usize, size: usize, disease_level: f64, seed: u64) -> Result<Vec<FundusSample>, DataError> {
    Ok(synth_fundus_layers(n, size, disease_level, seed)?.into_iter().map(|(s, _)| s).collect())
}
