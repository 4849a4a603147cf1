//! sRGB ↔ CIE Lab (D65).

use super::Image;
use crate::error::{invalid, Result};

const M: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

const DELTA: f64 = 6.0 / 29.0;

/// Reference white as the image of RGB white, so white maps to a = b = 0.
fn white() -> [f64; 3] {
    [M[0].iter().sum(), M[1].iter().sum(), M[2].iter().sum()]
}

fn inverse(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let mut inv = [[0.0; 3]; 3];
    for (i, row) in inv.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
            let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
            *v = (m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]) / det;
        }
    }
    inv
}

fn to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn to_srgb(c: f64) -> f64 {
    if c <= 0.0031308 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

fn f(t: f64) -> f64 {
    if t > DELTA.powi(3) {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

fn f_inv(t: f64) -> f64 {
    if t > DELTA {
        t.powi(3)
    } else {
        3.0 * DELTA * DELTA * (t - 4.0 / 29.0)
    }
}

pub fn rgb_to_lab_pixel(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(to_linear);
    let wp = white();
    let xyz: [f64; 3] = std::array::from_fn(|i| (0..3).map(|j| M[i][j] * lin[j]).sum::<f64>() / wp[i]);
    let (fx, fy, fz) = (f(xyz[0]), f(xyz[1]), f(xyz[2]));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Inverse conversion; the result is clamped to `[0, 1]`.
pub fn lab_to_rgb_pixel(lab: [f64; 3]) -> [f64; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let wp = white();
    let xyz = [f_inv(fx) * wp[0], f_inv(fy) * wp[1], f_inv(fz) * wp[2]];
    let mi = inverse(&M);
    std::array::from_fn(|i| to_srgb((0..3).map(|j| mi[i][j] * xyz[j]).sum::<f64>()).clamp(0.0, 1.0))
}

/// Lab image: L in `[0, 100]`, a and b roughly in `[-128, 127]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl LabImage {
    /// Network view: `L / 100` and `(a, b) / 128` as a 3-channel image. The
    /// result is not confined to `[0, 1]`.
    pub fn scaled(&self) -> Image {
        let px = self
            .pixels
            .chunks(3)
            .flat_map(|p| [p[0] / 100.0, p[1] / 128.0, p[2] / 128.0])
            .collect();
        Image::new(self.height, self.width, 3, px).expect("valid geometry")
    }
}

pub fn rgb_to_lab(img: &Image) -> Result<LabImage> {
    if img.channels() != 3 {
        return invalid(format!("Lab conversion needs 3 channels, got {}", img.channels()));
    }
    let pixels = img
        .pixels()
        .chunks(3)
        .flat_map(|p| rgb_to_lab_pixel([p[0] as f64, p[1] as f64, p[2] as f64]).map(|v| v as f32))
        .collect();
    Ok(LabImage { height: img.height(), width: img.width(), pixels })
}

pub fn lab_to_rgb(lab: &LabImage) -> Image {
    let px = lab
        .pixels
        .chunks(3)
        .flat_map(|p| lab_to_rgb_pixel([p[0] as f64, p[1] as f64, p[2] as f64]).map(|v| v as f32))
        .collect();
    Image::new(lab.height, lab.width, 3, px).expect("valid geometry")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_points() {
        assert_eq!(rgb_to_lab_pixel([0.0; 3]), [0.0, 0.0, 0.0]);
        let w = rgb_to_lab_pixel([1.0; 3]);
        assert!((w[0] - 100.0).abs() < 1e-9 && w[1].abs() < 0.01 && w[2].abs() < 0.01, "{w:?}");
        let g = rgb_to_lab_pixel([0.5; 3]);
        assert!(g[1].abs() < 1e-9 && g[2].abs() < 1e-9);
        // Pure sRGB red under D65 is close to (53.24, 80.09, 67.20).
        let r = rgb_to_lab_pixel([1.0, 0.0, 0.0]);
        assert!((r[0] - 53.24).abs() < 0.05 && (r[1] - 80.09).abs() < 0.1 && (r[2] - 67.20).abs() < 0.1, "{r:?}");
    }

    #[test]
    fn inverse_matrix() {
        let mi = inverse(&M);
        for i in 0..3 {
            for j in 0..3 {
                let v: f64 = (0..3).map(|k| M[i][k] * mi[k][j]).sum();
                assert!((v - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn round_trip_pixel() {
        for rgb in [[0.2, 0.7, 0.1], [0.0, 0.0, 1.0], [0.01, 0.02, 0.005]] {
            let back = lab_to_rgb_pixel(rgb_to_lab_pixel(rgb));
            for c in 0..3 {
                assert!((back[c] - rgb[c]).abs() < 1e-9);
            }
        }
    }
}
