//! Parametric stroke glyphs: ten classes of simple figures rendered as
//! soft-edged polylines on a 28×28 canvas. Every class lives in a tall
//! upright bounding box, so rotating a glyph changes the occupied region
//! of the canvas in a way raw-pixel features can pick up.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::corpus::{LabeledImage, IMG_PIXELS, IMG_SIDE};

pub const NUM_GLYPH_CLASSES: usize = 10;

/// Additive pixel noise level.
const NOISE_SIGMA: f64 = 0.05;
/// Anti-alias ramp half-width in pixels.
const EDGE_SOFTNESS: f32 = 0.7;

fn ellipse(cx: f32, cy: f32, rx: f32, ry: f32, segments: usize) -> Vec<(f32, f32)> {
    (0..=segments)
        .map(|i| {
            let t = i as f32 / segments as f32 * std::f32::consts::TAU;
            (cx + rx * t.cos(), cy + ry * t.sin())
        })
        .collect()
}

/// Polylines making up one glyph class, in canvas coordinates (x right,
/// y down). No class is close to a 90°-rotated copy of another.
fn class_polylines(class: usize) -> Vec<Vec<(f32, f32)>> {
    match class {
        // Tall oval ring.
        0 => vec![ellipse(14.0, 14.0, 3.8, 7.5, 28)],
        // Single vertical stroke.
        1 => vec![vec![(14.0, 6.0), (14.0, 22.0)]],
        // Two vertical rails.
        2 => vec![
            vec![(11.0, 6.0), (11.0, 22.0)],
            vec![(17.0, 6.0), (17.0, 22.0)],
        ],
        // Vertical zigzag.
        3 => vec![vec![(11.0, 6.0), (17.0, 11.0), (11.0, 17.0), (17.0, 22.0)]],
        // T shape.
        4 => vec![
            vec![(9.5, 6.0), (18.5, 6.0)],
            vec![(14.0, 6.0), (14.0, 22.0)],
        ],
        // L shape.
        5 => vec![
            vec![(10.5, 6.0), (10.5, 22.0)],
            vec![(10.5, 22.0), (18.0, 22.0)],
        ],
        // V shape.
        6 => vec![
            vec![(9.5, 6.0), (14.0, 22.0)],
            vec![(18.5, 6.0), (14.0, 22.0)],
        ],
        // 7 shape: top bar plus falling diagonal.
        7 => vec![
            vec![(10.0, 6.0), (18.0, 6.0)],
            vec![(18.0, 6.0), (12.0, 22.0)],
        ],
        // Three stacked dots (tiny rings render as filled disks).
        8 => vec![
            ellipse(14.0, 7.0, 1.2, 1.2, 12),
            ellipse(14.0, 14.0, 1.2, 1.2, 12),
            ellipse(14.0, 21.0, 1.2, 1.2, 12),
        ],
        // Caret.
        9 => vec![vec![(9.5, 22.0), (14.0, 6.0), (18.5, 22.0)]],
        _ => panic!("glyph class {} out of range", class),
    }
}

fn segment_distance(px: f32, py: f32, ax: f32, ay: f32, bx: f32, by: f32) -> f32 {
    let (dx, dy) = (bx - ax, by - ay);
    let len_sq = dx * dx + dy * dy;
    let t = if len_sq == 0.0 {
        0.0
    } else {
        (((px - ax) * dx + (py - ay) * dy) / len_sq).clamp(0.0, 1.0)
    };
    let (cx, cy) = (ax + t * dx, ay + t * dy);
    ((px - cx) * (px - cx) + (py - cy) * (py - cy)).sqrt()
}

/// Renders one glyph with the given translation jitter and stroke
/// thickness, without noise. Intensities are in [0, 1].
pub fn render_glyph(class: usize, dx: f32, dy: f32, thickness: f32) -> Vec<f32> {
    let polylines = class_polylines(class);
    let half = thickness * 0.5;
    let mut out = vec![0.0f32; IMG_PIXELS];
    for row in 0..IMG_SIDE {
        for col in 0..IMG_SIDE {
            let (px, py) = (col as f32 - dx, row as f32 - dy);
            let mut dist = f32::INFINITY;
            for line in &polylines {
                for seg in line.windows(2) {
                    let d = segment_distance(px, py, seg[0].0, seg[0].1, seg[1].0, seg[1].1);
                    if d < dist {
                        dist = d;
                    }
                }
            }
            let v = (half + EDGE_SOFTNESS - dist) / (2.0 * EDGE_SOFTNESS);
            out[row * IMG_SIDE + col] = v.clamp(0.0, 1.0);
        }
    }
    out
}

/// Generates `n_per_class` samples of each glyph class. Per-sample
/// randomness is derived from (seed, class, index) so the corpus is
/// reproducible and insensitive to generation order: translation jitter up
/// to ±1.5 px, stroke thickness in [1.2, 2.4], additive Gaussian pixel
/// noise (σ = 0.05) clamped back to [0, 1].
pub fn generate_glyph_corpus(n_per_class: usize, seed: u64) -> Vec<LabeledImage> {
    let mut out = Vec::with_capacity(n_per_class * NUM_GLYPH_CLASSES);
    for class in 0..NUM_GLYPH_CLASSES {
        for idx in 0..n_per_class {
            let sample_seed = seed
                ^ (class as u64).wrapping_mul(0x9e3779b97f4a7c15)
                ^ (idx as u64).wrapping_mul(0xd1b54a32d192ed03);
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
            let dx = rng.gen_range(-1.5f32..=1.5);
            let dy = rng.gen_range(-1.5f32..=1.5);
            let thickness = rng.gen_range(1.2f32..=2.4);
            let mut pixels = render_glyph(class, dx, dy, thickness);
            for p in pixels.iter_mut() {
                let n: f64 = rng.sample(StandardNormal);
                *p = (*p + (n * NOISE_SIGMA) as f32).clamp(0.0, 1.0);
            }
            out.push(LabeledImage { pixels, label: class });
        }
    }
    out
}
