use super::corpus::{IMG_PIXELS, IMG_SIDE};

/// Rotates a 28×28 image by `angle_deg` about the pixel center (13.5, 13.5).
///
/// Exact multiples of 90° take a pure index-permutation path, so composing
/// four quarter turns reproduces the input bit for bit. All other angles
/// use inverse mapping with bilinear interpolation and zero padding.
pub fn rotate_image(pixels: &[f32], angle_deg: f64) -> Vec<f32> {
    assert_eq!(pixels.len(), IMG_PIXELS, "expected a {0}×{0} image", IMG_SIDE);
    let norm = angle_deg.rem_euclid(360.0);
    let quarter = norm / 90.0;
    if (quarter - quarter.round()).abs() < 1e-9 {
        return rotate_quarter_turns(pixels, (quarter.round() as i64).rem_euclid(4) as u8);
    }

    let theta = norm.to_radians();
    let (sin, cos) = theta.sin_cos();
    let c = (IMG_SIDE as f64 - 1.0) / 2.0;
    let mut out = vec![0.0f32; IMG_PIXELS];
    for row in 0..IMG_SIDE {
        for col in 0..IMG_SIDE {
            // Inverse map: sample the source at R(−θ)·(dest − c) + c.
            let (u, v) = (col as f64 - c, row as f64 - c);
            let sx = c + cos * u + sin * v;
            let sy = c - sin * u + cos * v;
            out[row * IMG_SIDE + col] = bilinear(pixels, sx, sy);
        }
    }
    out
}

fn rotate_quarter_turns(pixels: &[f32], k: u8) -> Vec<f32> {
    let n = IMG_SIDE;
    let last = n - 1;
    let mut out = vec![0.0f32; IMG_PIXELS];
    for row in 0..n {
        for col in 0..n {
            let (sr, sc) = match k {
                0 => (row, col),
                1 => (last - col, row),
                2 => (last - row, last - col),
                3 => (col, last - row),
                _ => unreachable!(),
            };
            out[row * n + col] = pixels[sr * n + sc];
        }
    }
    out
}

fn bilinear(pixels: &[f32], x: f64, y: f64) -> f32 {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = (x - x0) as f32;
    let fy = (y - y0) as f32;
    let at = |xi: i64, yi: i64| -> f32 {
        if xi < 0 || yi < 0 || xi >= IMG_SIDE as i64 || yi >= IMG_SIDE as i64 {
            0.0
        } else {
            pixels[yi as usize * IMG_SIDE + xi as usize]
        }
    };
    let (xi, yi) = (x0 as i64, y0 as i64);
    let top = at(xi, yi) * (1.0 - fx) + at(xi + 1, yi) * fx;
    let bot = at(xi, yi + 1) * (1.0 - fx) + at(xi + 1, yi + 1) * fx;
    top * (1.0 - fy) + bot * fy
}
