//! Figure loading: white square padding, bilinear resize, RGB in [0, 1].

use std::path::Path;

use image::imageops::{self, FilterType};
use image::{DynamicImage, ImageError, Rgb, RgbImage};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Input side length of the vision branch at full scale.
pub const IMAGE_SIZE: usize = 224;

/// Loads a PNG/JPEG as a `[3, size, size]` tensor.
pub fn load_image(path: impl AsRef<Path>, size: usize) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| match e {
        ImageError::IoError(source) => Error::Io {
            path: path.to_path_buf(),
            source,
        },
        other => Error::Image {
            path: path.to_path_buf(),
            detail: other.to_string(),
        },
    })?;
    Ok(preprocess(&img, size))
}

/// Pads to a square with white borders (content centered, aspect ratio
/// preserved), resizes bilinearly to `size`×`size` and scales to [0, 1].
/// Grayscale inputs are replicated across the three channels.
pub fn preprocess(img: &DynamicImage, size: usize) -> Tensor<f32> {
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let side = w.max(h);
    let square = if w == h {
        rgb
    } else {
        let mut canvas = RgbImage::from_pixel(side, side, Rgb([255, 255, 255]));
        imageops::replace(&mut canvas, &rgb, i64::from((side - w) / 2), i64::from((side - h) / 2));
        canvas
    };
    let target = u32::try_from(size).expect("image size fits u32");
    let resized = if side == target {
        square
    } else {
        imageops::resize(&square, target, target, FilterType::Triangle)
    };
    rgb_to_tensor(&resized)
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut data = vec![0.0f32; 3 * w * h];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * w * h + y as usize * w + x as usize] = f32::from(px[c]) / 255.0;
        }
    }
    Tensor::new([3, h, w], data).expect("pixel buffer matches shape")
}

/// Inverse of [`rgb_to_tensor`] for a `[3, H, W]` tensor; values are
/// clamped to [0, 1] and rounded to 8 bits.
pub fn tensor_to_rgb(t: &Tensor<f32>) -> RgbImage {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let d = t.data();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |c: usize| (d[c * w * h + y as usize * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([at(0), at(1), at(2)])
    })
}

#[cfg(test)]
mod tests {
    use image::{GrayImage, Luma};

    use super::*;

    fn pixel(t: &Tensor<f32>, c: usize, y: usize, x: usize) -> f32 {
        let s = t.shape()[1];
        t.data()[c * s * s + y * s + x]
    }

    #[test]
    fn white_square_is_all_ones() {
        let img = DynamicImage::ImageRgb8(RgbImage::from_pixel(224, 224, Rgb([255, 255, 255])));
        let t = preprocess(&img, IMAGE_SIZE);
        assert_eq!(t.shape(), &[3, 224, 224]);
        assert!(t.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn wide_image_is_centered_in_a_horizontal_band() {
        let img = DynamicImage::ImageRgb8(RgbImage::from_pixel(448, 224, Rgb([0, 0, 255])));
        let t = preprocess(&img, IMAGE_SIZE);
        // Padded to 448×448: content spans rows 112..336, i.e. 56..168 after resize.
        for c in 0..3 {
            assert_eq!(pixel(&t, c, 0, 0), 1.0);
            assert_eq!(pixel(&t, c, 223, 223), 1.0);
            assert_eq!(pixel(&t, c, 20, 112), 1.0);
        }
        assert_eq!(pixel(&t, 2, 112, 0), 1.0);
        assert_eq!(pixel(&t, 0, 112, 0), 0.0);
        assert_eq!(pixel(&t, 0, 60, 112), 0.0);
        assert_eq!(pixel(&t, 0, 164, 200), 0.0);
    }

    #[test]
    fn grayscale_is_replicated() {
        let img = DynamicImage::ImageLuma8(GrayImage::from_fn(8, 8, |x, _| Luma([(x * 30) as u8])));
        let t = preprocess(&img, 8);
        for y in 0..8 {
            for x in 0..8 {
                let v = pixel(&t, 0, y, x);
                assert_eq!((pixel(&t, 1, y, x), pixel(&t, 2, y, x)), (v, v));
            }
        }
    }

    #[test]
    fn preprocessing_is_idempotent_at_target_size() {
        let img = RgbImage::from_fn(224, 224, |x, y| Rgb([(x % 256) as u8, (y % 256) as u8, ((x * y) % 256) as u8]));
        let once = preprocess(&DynamicImage::ImageRgb8(img), IMAGE_SIZE);
        let twice = preprocess(&DynamicImage::ImageRgb8(tensor_to_rgb(&once)), IMAGE_SIZE);
        assert_eq!(once, twice);
    }

    #[test]
    fn png_round_trip_and_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.png");
        RgbImage::from_pixel(4, 4, Rgb([255, 0, 0])).save(&path).unwrap();
        let t = load_image(&path, 4).unwrap();
        assert_eq!(pixel(&t, 0, 1, 1), 1.0);
        assert_eq!(pixel(&t, 1, 1, 1), 0.0);
        assert!(matches!(load_image(dir.path().join("none.png"), 4), Err(Error::Io { .. })));
        let junk = dir.path().join("junk.png");
        std::fs::write(&junk, b"not an image").unwrap();
        assert!(matches!(load_image(&junk, 4), Err(Error::Image { .. })));
    }
}
