use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::Image;
use crate::error::{invalid, Result};

const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

fn gray(px: &[f32]) -> f32 {
    if px.len() == 3 {
        LUMA[0] * px[0] + LUMA[1] * px[1] + LUMA[2] * px[2]
    } else {
        px.iter().sum::<f32>() / px.len() as f32
    }
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return invalid("resize to an empty image");
    }
    let (h, w, c) = (img.height(), img.width(), img.channels());
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    let axis = |o: usize, n_in: usize, n_out: usize| {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, (s - i0 as f64) as f32)
    };
    let cols: Vec<_> = (0..out_w).map(|x| axis(x, w, out_w)).collect();
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for y in 0..out_h {
        let (y0, y1, fy) = axis(y, h, out_h);
        for &(x0, x1, fx) in &cols {
            for ch in 0..c {
                let top = img.get(y0, x0, ch) * (1.0 - fx) + img.get(y0, x1, ch) * fx;
                let bot = img.get(y1, x0, ch) * (1.0 - fx) + img.get(y1, x1, ch) * fx;
                out.push((top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0));
            }
        }
    }
    Image::new(out_h, out_w, c, out)
}

/// Crops a region covering a `U(scale)` fraction of the image with a
/// log-uniform aspect ratio in `ratio`, then resizes it to `out_size²`.
/// After ten rejected draws the largest centered crop within `ratio` is used.
pub fn random_resized_crop<R: Rng + ?Sized>(
    img: &Image,
    scale: (f64, f64),
    ratio: (f64, f64),
    out_size: usize,
    rng: &mut R,
) -> Result<Image> {
    if out_size == 0 {
        return invalid("crop output size must be positive");
    }
    if !(0.0 < scale.0 && scale.0 <= scale.1) || !(0.0 < ratio.0 && ratio.0 <= ratio.1) {
        return invalid("bad crop scale or ratio range");
    }
    let (h, w) = (img.height(), img.width());
    let area = (h * w) as f64;
    for _ in 0..10 {
        let target = area * rng.random_range(scale.0..=scale.1);
        let log_r = rng.random_range(ratio.0.ln()..=ratio.1.ln());
        let r = log_r.exp();
        let cw = (target * r).sqrt().round() as usize;
        let ch = (target / r).sqrt().round() as usize;
        if cw >= 1 && ch >= 1 && cw <= w && ch <= h {
            let y = rng.random_range(0..=h - ch);
            let x = rng.random_range(0..=w - cw);
            return resize(&img.crop(y, x, ch, cw)?, out_size, out_size);
        }
    }
    let in_ratio = w as f64 / h as f64;
    let (cw, ch) = if in_ratio < ratio.0 {
        (w, ((w as f64 / ratio.0).round() as usize).clamp(1, h))
    } else if in_ratio > ratio.1 {
        (((h as f64 * ratio.1).round() as usize).clamp(1, w), h)
    } else {
        (w, h)
    };
    resize(&img.crop((h - ch) / 2, (w - cw) / 2, ch, cw)?, out_size, out_size)
}

/// Deterministic brightness, contrast and saturation adjustment, in that
/// order, clamping after each step.
pub fn adjust_color(img: &Image, brightness: f32, contrast: f32, saturation: f32) -> Image {
    let mut out = img.clone();
    let c = out.channels();
    for v in out.pixels_mut() {
        *v = (*v * brightness).clamp(0.0, 1.0);
    }
    let n = (out.height() * out.width()) as f64;
    let mean = (out.pixels().chunks(c).map(|p| gray(p) as f64).sum::<f64>() / n) as f32;
    for v in out.pixels_mut() {
        *v = (mean + (*v - mean) * contrast).clamp(0.0, 1.0);
    }
    if c == 3 {
        for px in out.pixels_mut().chunks_mut(3) {
            let g = gray(px);
            for v in px {
                *v = (g + (*v - g) * saturation).clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Draws each factor from `U[1 − m, 1 + m]` and applies [`adjust_color`].
pub fn color_jitter<R: Rng + ?Sized>(img: &Image, brightness: f64, contrast: f64, saturation: f64, rng: &mut R) -> Image {
    let mut draw = |m: f64| rng.random_range((1.0 - m).max(0.0)..=1.0 + m) as f32;
    let (b, c, s) = (draw(brightness), draw(contrast), draw(saturation));
    adjust_color(img, b, c, s)
}

/// Horizontal mirror with probability `p_flip`, then luma grayscale with
/// probability `p_gray`.
pub fn stochastic_flip_gray<R: Rng + ?Sized>(img: &Image, p_flip: f64, p_gray: f64, rng: &mut R) -> Image {
    let mut out = img.clone();
    if rng.random_bool(p_flip.clamp(0.0, 1.0)) {
        let (w, c) = (out.width(), out.channels());
        for row in out.pixels_mut().chunks_mut(w * c) {
            for x in 0..w / 2 {
                for ch in 0..c {
                    row.swap(x * c + ch, (w - 1 - x) * c + ch);
                }
            }
        }
    }
    if rng.random_bool(p_gray.clamp(0.0, 1.0)) {
        let c = out.channels();
        for px in out.pixels_mut().chunks_mut(c) {
            let g = gray(px);
            px.fill(g);
        }
    }
    out
}

/// Adds iid `N(0, σ²)` noise and clamps to `[0, 1]`.
pub fn gaussian_noise<R: Rng + ?Sized>(img: &Image, sigma: f64, rng: &mut R) -> Image {
    let mut out = img.clone();
    if sigma > 0.0 {
        for v in out.pixels_mut() {
            let n: f64 = rng.sample(StandardNormal);
            *v = (*v as f64 + sigma * n).clamp(0.0, 1.0) as f32;
        }
    }
    out
}

/// Erases between `n_range.0` and `n_range.1` rectangles whose total area is
/// a `U(area_range)` fraction of the image. Returns the erased image and an
/// `H × W` mask with 1 on erased pixels.
pub fn erase_rects<R: Rng + ?Sized>(
    img: &Image,
    n_range: (usize, usize),
    area_range: (f64, f64),
    fill: &[f32],
    rng: &mut R,
) -> Result<(Image, Vec<u8>)> {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    if n_range.0 > n_range.1 || !(0.0..=1.0).contains(&area_range.0) || area_range.0 > area_range.1 {
        return invalid("bad erase ranges");
    }
    if fill.len() != c {
        return invalid(format!("fill has {} values for {c} channels", fill.len()));
    }
    let mut mask = vec![0u8; h * w];
    let min_pixels = (area_range.0 * (h * w) as f64).ceil() as usize;
    for attempt in 0..10 {
        mask.fill(0);
        let n = rng.random_range(n_range.0..=n_range.1);
        if n == 0 {
            return Ok((img.clone(), mask));
        }
        let each = rng.random_range(area_range.0..=area_range.1) * (h * w) as f64 / n as f64;
        for _ in 0..n {
            let r = rng.random_range(0.5f64.ln()..=2.0f64.ln()).exp();
            let rh = ((each / r).sqrt().round() as usize).clamp(1, h);
            let rw = ((each * r).sqrt().round() as usize).clamp(1, w);
            let y0 = rng.random_range(0..=h - rh);
            let x0 = rng.random_range(0..=w - rw);
            for y in y0..y0 + rh {
                mask[y * w + x0..y * w + x0 + rw].fill(1);
            }
        }
        let erased = mask.iter().map(|&m| m as usize).sum::<usize>();
        if erased >= min_pixels || attempt == 9 {
            break;
        }
    }
    let mut out = img.clone();
    for (i, &m) in mask.iter().enumerate() {
        if m == 1 {
            out.pixels_mut()[i * c..(i + 1) * c].copy_from_slice(fill);
        }
    }
    Ok((out, mask))
}

/// One augmentation step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum AugStep {
    ResizedCrop { scale: (f64, f64), ratio: (f64, f64), size: usize },
    ColorJitter { brightness: f64, contrast: f64, saturation: f64 },
    FlipGray { p_flip: f64, p_gray: f64 },
    Noise { sigma: f64 },
}

/// An ordered augmentation recipe.
///
/// ```
/// use pretext::imaging::{AugSpec, Image};
/// let img = Image::filled(40, 40, 3, 0.5).unwrap();
/// let spec = AugSpec::cpc(32);
/// let a = spec.apply_seeded(&img, 7).unwrap();
/// assert_eq!((a.height(), a.width()), (32, 32));
/// assert_eq!(a, spec.apply_seeded(&img, 7).unwrap());
/// ```
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AugSpec {
    pub steps: Vec<AugStep>,
}

impl AugSpec {
    pub fn identity() -> Self {
        AugSpec { steps: Vec::new() }
    }

    /// Resized crop (scale 0.3 to 1), color jitter 0.4, flip 0.5, gray 0.25.
    pub fn cpc(size: usize) -> Self {
        AugSpec {
            steps: vec![
                AugStep::ResizedCrop { scale: (0.3, 1.0), ratio: (3.0 / 4.0, 4.0 / 3.0), size },
                AugStep::ColorJitter { brightness: 0.4, contrast: 0.4, saturation: 0.4 },
                AugStep::FlipGray { p_flip: 0.5, p_gray: 0.25 },
            ],
        }
    }

    pub fn apply<R: Rng + ?Sized>(&self, img: &Image, rng: &mut R) -> Result<Image> {
        let mut out = img.clone();
        for step in &self.steps {
            out = match *step {
                AugStep::ResizedCrop { scale, ratio, size } => random_resized_crop(&out, scale, ratio, size, rng)?,
                AugStep::ColorJitter { brightness, contrast, saturation } => {
                    color_jitter(&out, brightness, contrast, saturation, rng)
                }
                AugStep::FlipGray { p_flip, p_gray } => stochastic_flip_gray(&out, p_flip, p_gray, rng),
                AugStep::Noise { sigma } => gaussian_noise(&out, sigma, rng),
            };
        }
        Ok(out)
    }

    pub fn apply_seeded(&self, img: &Image, seed: u64) -> Result<Image> {
        self.apply(img, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Output side length if the recipe fixes one.
    pub fn out_size(&self) -> Option<usize> {
        self.steps.iter().rev().find_map(|s| match s {
            AugStep::ResizedCrop { size, .. } => Some(*size),
            _ => None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    fn noise_image(h: usize, w: usize, seed: u64) -> Image {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Image::new(h, w, 3, (0..h * w * 3).map(|_| r.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn resize_constant_and_identity() {
        let img = Image::filled(7, 5, 3, 0.37).unwrap();
        let r = resize(&img, 13, 3).unwrap();
        assert!(r.pixels().iter().all(|&v| (v - 0.37).abs() < 1e-6));
        let n = noise_image(4, 4, 1);
        assert_eq!(resize(&n, 4, 4).unwrap(), n);
    }

    #[test]
    fn whole_image_crop() {
        let img = noise_image(8, 8, 2);
        let out = random_resized_crop(&img, (1.0, 1.0), (1.0, 1.0), 8, &mut rng()).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn crop_contract() {
        let img = noise_image(20, 30, 3);
        let mut r = rng();
        for _ in 0..50 {
            let out = random_resized_crop(&img, (0.3, 1.0), (0.75, 4.0 / 3.0), 11, &mut r).unwrap();
            assert_eq!((out.height(), out.width(), out.channels()), (11, 11, 3));
            assert!(out.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn color_identities() {
        let img = noise_image(6, 6, 4);
        assert_eq!(adjust_color(&img, 1.0, 1.0, 1.0), img);
        assert!(adjust_color(&img, 0.0, 1.0, 1.0).pixels().iter().all(|&v| v == 0.0));
        let g = adjust_color(&img, 1.0, 1.0, 0.0);
        for (px, orig) in g.pixels().chunks(3).zip(img.pixels().chunks(3)) {
            let want = 0.299 * orig[0] + 0.587 * orig[1] + 0.114 * orig[2];
            for &v in px {
                assert!((v - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn flip_and_gray() {
        let img = noise_image(3, 5, 5);
        let mut r = rng();
        let once = stochastic_flip_gray(&img, 1.0, 0.0, &mut r);
        assert_ne!(once, img);
        assert_eq!(stochastic_flip_gray(&once, 1.0, 0.0, &mut r), img);
        assert_eq!(stochastic_flip_gray(&img, 0.0, 0.0, &mut r), img);
        let g = stochastic_flip_gray(&img, 0.0, 1.0, &mut r);
        assert!(g.pixels().chunks(3).all(|p| p[0] == p[1] && p[1] == p[2]));
    }

    #[test]
    fn noise_statistics() {
        let img = Image::filled(64, 64, 3, 0.5).unwrap();
        assert_eq!(gaussian_noise(&img, 0.0, &mut rng()), img);
        let out = gaussian_noise(&img, 0.1, &mut rng());
        let d: Vec<f64> = out.pixels().iter().map(|&v| v as f64 - 0.5).collect();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let std = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d.len() as f64).sqrt();
        assert!((std - 0.1).abs() < 0.01, "{std}");
    }

    #[test]
    fn erase_contract() {
        let img = noise_image(16, 16, 6);
        let (same, mask) = erase_rects(&img, (0, 0), (0.1, 0.3), &[0.5; 3], &mut rng()).unwrap();
        assert_eq!(same, img);
        assert!(mask.iter().all(|&m| m == 0));
        let mut r = rng();
        for _ in 0..20 {
            let (out, mask) = erase_rects(&img, (1, 4), (0.1, 0.3), &[0.25, 0.5, 0.75], &mut r).unwrap();
            let erased = mask.iter().filter(|&&m| m == 1).count();
            let changed = out.pixels().chunks(3).zip(img.pixels().chunks(3)).filter(|(a, b)| a != b).count();
            assert_eq!(erased, changed);
            assert!(erased as f64 >= 0.1 * 256.0);
            for (i, &m) in mask.iter().enumerate() {
                if m == 1 {
                    assert_eq!(&out.pixels()[i * 3..i * 3 + 3], &[0.25, 0.5, 0.75]);
                }
            }
        }
    }

    #[test]
    fn pipeline_identity_and_determinism() {
        let img = noise_image(10, 10, 7);
        assert_eq!(AugSpec::identity().apply(&img, &mut rng()).unwrap(), img);
        let spec = AugSpec::cpc(8);
        assert_eq!(spec.apply_seeded(&img, 3).unwrap(), spec.apply_seeded(&img, 3).unwrap());
        assert_eq!(spec.out_size(), Some(8));
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<AugSpec>(&json).unwrap(), spec);
    }
}
