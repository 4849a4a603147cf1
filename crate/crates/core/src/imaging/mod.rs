//! Images, augmentations, Lab conversion and jigsaw machinery.
//!
//! Pixels are `f32` in `[0, 1]`, row-major and channels-last.

mod augment;
mod color;
mod jigsaw;
mod ppm;

pub use augment::{
    adjust_color, color_jitter, erase_rects, gaussian_noise, random_resized_crop, resize, stochastic_flip_gray, AugSpec,
    AugStep,
};
pub use color::{lab_to_rgb, lab_to_rgb_pixel, rgb_to_lab, rgb_to_lab_pixel, LabImage};
pub use jigsaw::{build_permutation_set, extract_patch_grid, hamming, jigsaw_shuffle, PermutationTable};
pub use ppm::{decode_ppm, encode_ppm, read_ppm, write_ppm};

use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || !(1..=3).contains(&channels) {
            return invalid(format!("bad image geometry {height}x{width}x{channels}"));
        }
        if pixels.len() != height * width * channels {
            return shape_err(format!("{} pixels for a {height}x{width}x{channels} image", pixels.len()));
        }
        Ok(Image { height, width, channels, pixels })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.pixels[(y * self.width + x) * self.channels + c] = v;
    }

    /// Sub-image of `h × w` pixels starting at `(y, x)`.
    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Result<Image> {
        if h == 0 || w == 0 || y + h > self.height || x + w > self.width {
            return invalid(format!(
                "crop {h}x{w} at ({y},{x}) outside {}x{} image",
                self.height, self.width
            ));
        }
        let c = self.channels;
        let mut out = Vec::with_capacity(h * w * c);
        for row in y..y + h {
            let start = (row * self.width + x) * c;
            out.extend_from_slice(&self.pixels[start..start + w * c]);
        }
        Image::new(h, w, c, out)
    }

    /// Copies `src` into this image with its top-left corner at `(y, x)`.
    pub fn paste(&mut self, src: &Image, y: usize, x: usize) -> Result<()> {
        if src.channels != self.channels || y + src.height > self.height || x + src.width > self.width {
            return invalid("pasted image does not fit");
        }
        let c = self.channels;
        for row in 0..src.height {
            let d = ((y + row) * self.width + x) * c;
            let s = row * src.width * c;
            self.pixels[d..d + src.width * c].copy_from_slice(&src.pixels[s..s + src.width * c]);
        }
        Ok(())
    }

    /// Keeps only the listed channels, in the given order.
    pub fn select_channels(&self, channels: &[usize]) -> Result<Image> {
        if channels.is_empty() || channels.iter().any(|&c| c >= self.channels) {
            return invalid("channel selection out of range");
        }
        let mut out = Vec::with_capacity(self.height * self.width * channels.len());
        for px in self.pixels.chunks(self.channels) {
            out.extend(channels.iter().map(|&c| px[c]));
        }
        Image::new(self.height, self.width, channels.len(), out)
    }

    pub fn mean_per_channel(&self) -> Vec<f32> {
        let mut acc = vec![0.0f64; self.channels];
        for px in self.pixels.chunks(self.channels) {
            for (a, &v) in acc.iter_mut().zip(px) {
                *a += v as f64;
            }
        }
        let n = (self.height * self.width) as f64;
        acc.into_iter().map(|a| (a / n) as f32).collect()
    }

    /// Channels-first copy `[C, H, W]` widened to `f64`.
    pub fn to_chw(&self) -> Vec<f64> {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut out = vec![0.0; h * w * c];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[(ch * h + y) * w + x] = self.pixels[(y * w + x) * c + ch] as f64;
                }
            }
        }
        out
    }

    /// Inverse of [`Image::to_chw`]; values are not clamped.
    pub fn from_chw(c: usize, h: usize, w: usize, data: &[f64]) -> Result<Image> {
        if data.len() != c * h * w {
            return shape_err("CHW buffer length mismatch");
        }
        let mut px = vec![0.0f32; c * h * w];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    px[(y * w + x) * c + ch] = data[(ch * h + y) * w + x] as f32;
                }
            }
        }
        Image::new(h, w, c, px)
    }
}

/// Stacks images of identical geometry into a `[B, C, H, W]` tensor.
pub fn images_to_tensor(images: &[Image]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| crate::Error::Invalid("no images to stack".into()))?;
    let (h, w, c) = (first.height, first.width, first.channels);
    let mut data = Vec::with_capacity(images.len() * h * w * c);
    for img in images {
        if (img.height, img.width, img.channels) != (h, w, c) {
            return shape_err("images in a batch must share geometry");
        }
        data.extend(img.to_chw());
    }
    Tensor::from_vec(&[images.len(), c, h, w], data)
}

/// Counter-clockwise rotation by `k · 90°`.
///
/// ```
/// use pretext::imaging::{rotate90, Image};
/// // [[A, B], [C, D]] turned a quarter left is [[B, D], [A, C]].
/// let img = Image::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
/// assert_eq!(rotate90(&img, 1).pixels(), &[2.0, 4.0, 1.0, 3.0]);
/// ```
pub fn rotate90(img: &Image, k: i64) -> Image {
    let k = k.rem_euclid(4);
    let (h, w, c) = (img.height, img.width, img.channels);
    let (oh, ow) = if k % 2 == 1 { (w, h) } else { (h, w) };
    let mut out = vec![0.0f32; h * w * c];
    for y in 0..oh {
        for x in 0..ow {
            let (sy, sx) = match k {
                0 => (y, x),
                1 => (x, w - 1 - y),
                2 => (h - 1 - y, w - 1 - x),
                _ => (h - 1 - x, y),
            };
            let s = (sy * w + sx) * c;
            out[(y * ow + x) * c..(y * ow + x + 1) * c].copy_from_slice(&img.pixels[s..s + c]);
        }
    }
    Image { height: oh, width: ow, channels: c, pixels: out }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize, c: usize) -> Image {
        let n = h * w * c;
        Image::new(h, w, c, (0..n).map(|i| i as f32 / n as f32).collect()).unwrap()
    }

    #[test]
    fn rotation_group() {
        let img = ramp(3, 5, 2);
        assert_eq!(rotate90(&img, 0), img);
        assert_eq!(rotate90(&rotate90(&img, 1), 3), img);
        assert_eq!(rotate90(&img, 5), rotate90(&img, 1));
        assert_eq!(rotate90(&rotate90(&img, 1), 2), rotate90(&img, 3));
        let r = rotate90(&img, 1);
        assert_eq!((r.height(), r.width()), (5, 3));
    }

    #[test]
    fn chw_round_trip_and_stacking() {
        let img = ramp(4, 3, 3);
        let back = Image::from_chw(3, 4, 3, &img.to_chw()).unwrap();
        assert_eq!(back, img);
        let t = images_to_tensor(&[img.clone(), img]).unwrap();
        assert_eq!(t.shape(), &[2, 3, 4, 3]);
        assert_eq!(t.data()[1], ramp(4, 3, 3).get(0, 1, 0) as f64);
    }

    #[test]
    fn crop_and_paste() {
        let img = ramp(4, 4, 1);
        let c = img.crop(1, 2, 2, 2).unwrap();
        assert_eq!(c.get(0, 0, 0), img.get(1, 2, 0));
        let mut canvas = Image::filled(4, 4, 1, 0.0).unwrap();
        canvas.paste(&c, 1, 2).unwrap();
        assert_eq!(canvas.get(2, 3, 0), img.get(2, 3, 0));
        assert!(img.crop(3, 3, 2, 2).is_err());
    }
}
