use std::io::Cursor;
use std::path::Path;

use image::{GrayImage, ImageFormat, RgbImage};

use super::{EvidenceMask, ImageRgb, Result, SaliencyMap, TensorError};

fn img_err(e: image::ImageError) -> TensorError {
    TensorError::Image(e.to_string())
}

/// Load a PNG as a raw image (8-bit channels divided by 255).
pub fn load_png(path: impl AsRef<Path>) -> Result<ImageRgb> {
    let bytes = std::fs::read(path.as_ref())?;
    decode_png(&bytes)
}

pub fn decode_png(bytes: &[u8]) -> Result<ImageRgb> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(img_err)?
        .to_rgb8();
    let (w, h) = img.dimensions();
    ImageRgb::from_rgb8(h as usize, w as usize, img.as_raw())
}

/// Encode an image as 8-bit RGB PNG, denormalizing first if needed.
pub fn encode_png(image: &ImageRgb) -> Result<Vec<u8>> {
    let raw = if image.is_normalized() {
        image.denormalize()?
    } else {
        image.clone()
    };
    let buf = RgbImage::from_raw(raw.width() as u32, raw.height() as u32, raw.to_rgb8()?)
        .ok_or_else(|| TensorError::Image("rgb buffer size mismatch".into()))?;
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, ImageFormat::Png).map_err(img_err)?;
    Ok(out.into_inner())
}

pub fn save_view_png(image: &ImageRgb, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path.as_ref(), encode_png(image)?)?;
    Ok(())
}

/// Grayscale PNG: 0 = keep, 255 = replace.
pub fn mask_to_png(mask: &EvidenceMask, path: impl AsRef<Path>) -> Result<()> {
    let pixels = mask.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
    let buf = GrayImage::from_raw(mask.width() as u32, mask.height() as u32, pixels)
        .ok_or_else(|| TensorError::Image("mask buffer size mismatch".into()))?;
    buf.save_with_format(path.as_ref(), ImageFormat::Png)
        .map_err(img_err)
}

/// Min-max scaled heatmap using a black-red-yellow-white ramp.
pub fn saliency_heatmap_png(map: &SaliencyMap, path: impl AsRef<Path>) -> Result<()> {
    let (lo, hi) = map
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = f64::from(hi - lo);
    let mut pixels = Vec::with_capacity(map.data().len() * 3);
    for &v in map.data() {
        let t = if span > 0.0 {
            f64::from(v - lo) / span
        } else {
            0.0
        };
        pixels.extend_from_slice(&ramp(t));
    }
    let buf = RgbImage::from_raw(map.width() as u32, map.height() as u32, pixels)
        .ok_or_else(|| TensorError::Image("heatmap buffer size mismatch".into()))?;
    buf.save_with_format(path.as_ref(), ImageFormat::Png)
        .map_err(img_err)
}

fn ramp(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0) * 3.0;
    let q = |x: f64| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
    [q(t), q(t - 1.0), q(t - 2.0)]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_is_lossless_for_8bit_values() {
        let bytes: Vec<u8> = (0..4 * 5 * 3).map(|i| (i * 7 % 256) as u8).collect();
        let img = ImageRgb::from_rgb8(4, 5, &bytes).unwrap();
        let back = decode_png(&encode_png(&img).unwrap()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn normalized_image_is_denormalized_on_encode() {
        let img = ImageRgb::from_rgb8(1, 2, &[0, 128, 255, 10, 20, 30]).unwrap();
        let n = img.normalize(&super::super::NormSpec::CLIP).unwrap();
        let back = decode_png(&encode_png(&n).unwrap()).unwrap();
        assert_eq!(back.to_rgb8().unwrap(), vec![0, 128, 255, 10, 20, 30]);
    }

    #[test]
    fn mask_png_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let m = EvidenceMask::new(1, 3, vec![true, false, true]).unwrap();
        mask_to_png(&m, &path).unwrap();
        let g = image::open(&path).unwrap().to_luma8();
        assert_eq!(g.as_raw(), &vec![255, 0, 255]);
    }

    #[test]
    fn heatmap_constant_map_ok() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.png");
        saliency_heatmap_png(&SaliencyMap::new(2, 2, vec![0.5; 4]).unwrap(), &path).unwrap();
        assert!(path.exists());
    }
}
