//! HSV helpers and the fiducial palette.

/// Hue in degrees `[0, 360)`, saturation and value in `[0, 1]`.
pub fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

pub fn rgb_to_hsv(rgb: [f32; 3]) -> (f32, f32, f32) {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let s = if max > 0.0 { d / max } else { 0.0 };
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    (h, s, max)
}

/// Smallest absolute angle between two hues, degrees.
pub fn hue_distance(a: f32, b: f32) -> f32 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

/// Fiducial hues, indexed like [`super::FIDUCIAL_NAMES`].
pub const FIDUCIAL_HUES: [f32; 8] = [180.0, 140.0, 60.0, 100.0, 220.0, 260.0, 300.0, 340.0];

/// Pixels belonging to a fiducial must be at least this saturated.
/// Every non-fiducial surface color stays below it.
pub const FIDUCIAL_MIN_SATURATION: f32 = 0.6;
pub const FIDUCIAL_MIN_VALUE: f32 = 0.2;
pub const FIDUCIAL_HUE_TOLERANCE: f32 = 18.0;

pub fn fiducial_color(k: usize) -> [f32; 3] {
    hsv_to_rgb(FIDUCIAL_HUES[k], 1.0, 1.0)
}

/// Index of the fiducial whose color this pixel matches, if any.
pub fn classify_fiducial(rgb: [f32; 3]) -> Option<usize> {
    let (h, s, v) = rgb_to_hsv(rgb);
    if s < FIDUCIAL_MIN_SATURATION || v < FIDUCIAL_MIN_VALUE {
        return None;
    }
    FIDUCIAL_HUES
        .iter()
        .position(|&fh| hue_distance(h, fh) <= FIDUCIAL_HUE_TOLERANCE)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hsv_round_trip() {
        for &(h, s, v) in &[(0.0, 1.0, 1.0), (123.0, 0.4, 0.7), (300.0, 0.9, 0.3), (359.0, 0.2, 0.5)] {
            let (h2, s2, v2) = rgb_to_hsv(hsv_to_rgb(h, s, v));
            assert!(hue_distance(h, h2) < 1e-3 && (s - s2).abs() < 1e-5 && (v - v2).abs() < 1e-6);
        }
    }

    #[test]
    fn palette_is_separable() {
        for (k, _) in FIDUCIAL_HUES.iter().enumerate() {
            assert_eq!(classify_fiducial(fiducial_color(k)), Some(k));
            // Shading scales value but keeps hue and saturation.
            let c = fiducial_color(k).map(|x| x * 0.35);
            assert_eq!(classify_fiducial(c), Some(k));
        }
        for a in 0..8 {
            for b in a + 1..8 {
                assert!(hue_distance(FIDUCIAL_HUES[a], FIDUCIAL_HUES[b]) > 2.0 * FIDUCIAL_HUE_TOLERANCE);
            }
        }
    }
}
