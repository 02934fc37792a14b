use serde::{Deserialize, Serialize};

use super::{AuxViewError, MaskConfig, Result};
use crate::tensors::{ImageRgb, NormSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackgroundKind {
    /// Global per-channel mean of the normalized image.
    Mean,
    /// Separable Gaussian blur with edge-replicate padding.
    Blur,
    /// Pure black expressed in normalized space, `-mean_c / std_c`.
    Black,
}

impl BackgroundKind {
    pub fn name(self) -> &'static str {
        match self {
            BackgroundKind::Mean => "mean",
            BackgroundKind::Blur => "blur",
            BackgroundKind::Black => "black",
        }
    }
}

impl std::str::FromStr for BackgroundKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mean" => Ok(BackgroundKind::Mean),
            "blur" => Ok(BackgroundKind::Blur),
            "black" => Ok(BackgroundKind::Black),
            other => Err(format!("unknown background {other:?} (mean|blur|black)")),
        }
    }
}

impl std::fmt::Display for BackgroundKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Replacement content, same extent as the image, normalized space.
#[derive(Debug, Clone, PartialEq)]
pub struct Background {
    kind: BackgroundKind,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Background {
    pub fn kind(&self) -> BackgroundKind {
        self.kind
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    fn constant(kind: BackgroundKind, height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let px = rgb.map(|v| v as f32);
        Self {
            kind,
            height,
            width,
            data: std::iter::repeat_n(px, height * width).flatten().collect(),
        }
    }
}

/// Normalized 1-D Gaussian taps, `size` odd.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let taps: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - r;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let z: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / z).collect()
}

fn blur(image: &ImageRgb, size: usize, sigma: f64) -> Vec<f32> {
    let (h, w) = (image.height(), image.width());
    let taps = gaussian_kernel(size, sigma);
    let r = (size / 2) as isize;
    let src = image.data();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;

    let mut horiz = vec![0f64; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (k, t) in taps.iter().enumerate() {
                    let xx = clamp(x as isize + k as isize - r, w);
                    acc += t * f64::from(src[(y * w + xx) * 3 + c]);
                }
                horiz[(y * w + x) * 3 + c] = acc;
            }
        }
    }
    let mut out = vec![0f32; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (k, t) in taps.iter().enumerate() {
                    let yy = clamp(y as isize + k as isize - r, h);
                    acc += t * horiz[(yy * w + x) * 3 + c];
                }
                out[(y * w + x) * 3 + c] = acc as f32;
            }
        }
    }
    out
}

pub fn make_background(image: &ImageRgb, cfg: &MaskConfig, norm: &NormSpec) -> Result<Background> {
    if !image.is_normalized() {
        return Err(AuxViewError::NotNormalized);
    }
    norm.validate()?;
    let (h, w) = (image.height(), image.width());
    Ok(match cfg.background {
        BackgroundKind::Mean => {
            let mut sums = [0f64; 3];
            for px in image.data().chunks_exact(3) {
                for c in 0..3 {
                    sums[c] += f64::from(px[c]);
                }
            }
            let n = image.pixels() as f64;
            Background::constant(BackgroundKind::Mean, h, w, sums.map(|s| s / n))
        }
        BackgroundKind::Black => Background::constant(BackgroundKind::Black, h, w, norm.black()),
        BackgroundKind::Blur => {
            cfg.validate()?;
            Background {
                kind: BackgroundKind::Blur,
                height: h,
                width: w,
                data: blur(image, cfg.blur_kernel, cfg.sigma()),
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_kind(kind: BackgroundKind) -> MaskConfig {
        MaskConfig {
            background: kind,
            ..MaskConfig::default()
        }
    }

    #[test]
    fn mean_of_constant_is_constant() {
        let img = ImageRgb::filled(5, 4, [0.2, 0.4, 0.9])
            .unwrap()
            .normalize(&NormSpec::IMAGENET)
            .unwrap();
        let bg = make_background(&img, &with_kind(BackgroundKind::Mean), &NormSpec::IMAGENET).unwrap();
        for (a, b) in bg.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn black_half_half() {
        let norm = NormSpec::new([0.5; 3], [0.5; 3]).unwrap();
        let img = ImageRgb::filled(2, 2, [0.9, 0.1, 0.3]).unwrap().normalize(&norm).unwrap();
        let bg = make_background(&img, &with_kind(BackgroundKind::Black), &norm).unwrap();
        assert!(bg.data().iter().all(|&v| v == -1.0));
    }

    #[test]
    fn blur_of_constant_is_identity() {
        let img = ImageRgb::filled(9, 30, [0.3, 0.6, 0.1])
            .unwrap()
            .normalize(&NormSpec::CLIP)
            .unwrap();
        let bg = make_background(&img, &with_kind(BackgroundKind::Blur), &NormSpec::CLIP).unwrap();
        for (a, b) in bg.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn blur_smooths_an_impulse() {
        let mut data = vec![0f32; 11 * 11 * 3];
        let centre = (5 * 11 + 5) * 3;
        data[centre] = 1.0;
        let img = ImageRgb::new_normalized(11, 11, data, NormSpec::IDENTITY).unwrap();
        let cfg = MaskConfig {
            background: BackgroundKind::Blur,
            blur_kernel: 5,
            blur_sigma: Some(1.0),
            ..MaskConfig::default()
        };
        let bg = make_background(&img, &cfg, &NormSpec::IDENTITY).unwrap();
        let taps = gaussian_kernel(5, 1.0);
        assert!((f64::from(bg.data()[centre]) - taps[2] * taps[2]).abs() < 1e-6);
        let total: f64 = bg.data().iter().step_by(3).map(|&v| f64::from(v)).sum();
        assert!((total - 1.0).abs() < 1e-6);
        assert!(bg.data()[1] == 0.0);
    }

    #[test]
    fn kernel_is_normalized_and_symmetric() {
        let k = gaussian_kernel(21, 3.5);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..10 {
            assert_eq!(k[i], k[20 - i]);
        }
        assert!(k[10] > k[9]);
    }

    #[test]
    fn raw_input_rejected() {
        let img = ImageRgb::filled(2, 2, [0.5; 3]).unwrap();
        assert!(matches!(
            make_background(&img, &MaskConfig::default(), &NormSpec::CLIP),
            Err(AuxViewError::NotNormalized)
        ));
    }

    #[test]
    fn parse_kind() {
        assert_eq!("Blur".parse::<BackgroundKind>().unwrap(), BackgroundKind::Blur);
        assert!("noise".parse::<BackgroundKind>().is_err());
    }
}
