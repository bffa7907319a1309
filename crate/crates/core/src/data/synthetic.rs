//! Procedurally rendered grayscale glyphs.
//!
//! Ten stroke shapes (ring, bars, diagonals, plus, cross, square, T, L) are
//! drawn under a random similarity transform with random stroke width and
//! intensity, then corrupted with Gaussian pixel noise and quantised to 8 bits
//! so the result round-trips through IDX files exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::Sample;
use crate::tensor::Tensor;

pub const GLYPH_CLASSES: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlyphConfig {
    /// Side length of the square images.
    pub size: usize,
    pub per_class: usize,
    /// Standard deviation of the additive pixel noise.
    pub noise: f32,
    /// Width of the random pose, stroke and intensity ranges relative to the
    /// defaults; 0 renders every glyph of a class identically.
    pub jitter: f32,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for GlyphConfig {
    fn default() -> Self {
        GlyphConfig {
            size: 12,
            per_class: 500,
            noise: 0.2,
            jitter: 1.0,
            seed: 0,
        }
    }
}

type Segment = ((f32, f32), (f32, f32));

fn class_strokes(class: usize) -> (Vec<Segment>, Option<f32>) {
    let s = 0.6;
    match class {
        0 => (vec![], Some(0.55)),
        1 => (vec![((0.0, -0.7), (0.0, 0.7))], None),
        2 => (vec![((-0.7, 0.0), (0.7, 0.0))], None),
        3 => (vec![((-0.6, -0.6), (0.6, 0.6))], None),
        4 => (vec![((-0.6, 0.6), (0.6, -0.6))], None),
        5 => (
            vec![((0.0, -0.7), (0.0, 0.7)), ((-0.7, 0.0), (0.7, 0.0))],
            None,
        ),
        6 => (
            vec![((-0.6, -0.6), (0.6, 0.6)), ((-0.6, 0.6), (0.6, -0.6))],
            None,
        ),
        7 => (
            vec![
                ((-s, -s), (s, -s)),
                ((s, -s), (s, s)),
                ((s, s), (-s, s)),
                ((-s, s), (-s, -s)),
            ],
            None,
        ),
        8 => (
            vec![((-0.7, -0.6), (0.7, -0.6)), ((0.0, -0.6), (0.0, 0.7))],
            None,
        ),
        _ => (
            vec![((-0.5, -0.7), (-0.5, 0.6)), ((-0.5, 0.6), (0.6, 0.6))],
            None,
        ),
    }
}

fn segment_distance(p: (f32, f32), seg: &Segment) -> f32 {
    let ((ax, ay), (bx, by)) = *seg;
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = (((p.0 - ax) * dx + (p.1 - ay) * dy) / len2).clamp(0.0, 1.0);
    let (qx, qy) = (ax + t * dx - p.0, ay + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

/// Render one glyph as 8-bit pixels.
fn render(class: usize, size: usize, noise: &Normal<f32>, jitter: f32, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let (segments, ring) = class_strokes(class);
    // uniform on centre +- jitter * half_width
    let mut draw = |centre: f32, half: f32| centre + jitter * half * rng.gen_range(-1.0f32..1.0);
    let scale = draw(0.875, 0.125);
    let angle = draw(0.0, 0.25);
    let (tx, ty) = (draw(0.0, 0.15), draw(0.0, 0.15));
    let width = draw(0.14, 0.04);
    let intensity = draw(0.8, 0.2);
    let (sin, cos) = angle.sin_cos();
    let pixel = 2.0 / size as f32;
    let mut out = Vec::with_capacity(size * size);
    for row in 0..size {
        for col in 0..size {
            let u = (col as f32 + 0.5) * pixel - 1.0 - tx;
            let v = (row as f32 + 0.5) * pixel - 1.0 - ty;
            // undo rotation and scale
            let px = (cos * u + sin * v) / scale;
            let py = (-sin * u + cos * v) / scale;
            let mut d = segments
                .iter()
                .map(|s| segment_distance((px, py), s))
                .fold(f32::INFINITY, f32::min);
            if let Some(r) = ring {
                d = d.min(((px * px + py * py).sqrt() - r).abs());
            }
            let coverage = (1.0 - (d - width) / pixel).clamp(0.0, 1.0);
            let value = (intensity * coverage + noise.sample(rng)).clamp(0.0, 1.0);
            out.push((value * 255.0).round() as u8);
        }
    }
    out
}

/// Raw bytes and labels, class-interleaved (`0, 1, ..., 9, 0, 1, ...`).
pub fn generate_raw(config: &GlyphConfig) -> Result<(Vec<Vec<u8>>, Vec<u8>)> {
    if config.size < 4 {
        return Err(Error::config("glyph images must be at least 4x4"));
    }
    if !(0.0..=1.0).contains(&config.jitter) {
        return Err(Error::config("glyph jitter must lie in [0, 1]"));
    }
    if !(config.noise >= 0.0) {
        return Err(Error::config("glyph noise must be non-negative"));
    }
    let noise = Normal::new(0.0, config.noise).map_err(|e| Error::config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut images = Vec::with_capacity(config.per_class * GLYPH_CLASSES);
    let mut labels = Vec::with_capacity(config.per_class * GLYPH_CLASSES);
    for _ in 0..config.per_class {
        for class in 0..GLYPH_CLASSES {
            images.push(render(class, config.size, &noise, config.jitter, &mut rng));
            labels.push(class as u8);
        }
    }
    Ok((images, labels))
}

/// Generate a labelled glyph dataset; pixels are `byte / 255`.
pub fn generate(config: &GlyphConfig) -> Result<LabeledDataset> {
    let (images, labels) = generate_raw(config)?;
    let samples = images
        .into_iter()
        .zip(labels)
        .map(|(px, y)| {
            let data = px.into_iter().map(|b| b as f32 / 255.0).collect();
            Sample::new(
                Tensor::from_parts(vec![1, config.size, config.size], data),
                y as usize,
            )
        })
        .collect();
    LabeledDataset::new("glyphs", GLYPH_CLASSES, samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_seeded_and_balanced() {
        let cfg = GlyphConfig {
            per_class: 3,
            ..Default::default()
        };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 30);
        assert_eq!(a.class_histogram(), vec![3; 10]);
        let c = generate(&GlyphConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn noiseless_glyphs_have_ink() {
        let cfg = GlyphConfig {
            per_class: 1,
            noise: 0.0,
            ..Default::default()
        };
        let d = generate(&cfg).unwrap();
        for s in d.samples() {
            let ink: f32 = s.input.data().iter().sum();
            assert!(ink > 3.0, "class {} is nearly blank", s.label);
        }
    }
}
