//! Image, attention, saliency and mask value types shared by the pipeline.
//!
//! Everything here is an immutable value once constructed; constructors
//! validate the invariants so downstream code can rely on them.

mod image_io;
mod io;

pub use image_io::{
    decode_png, encode_png, load_png, mask_to_png, saliency_heatmap_png, save_view_png,
};
pub use io::{read_tensor_file, write_tensor_file, TensorKind, TensorPayload};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("invalid shape: {0}")]
    Shape(String),
    #[error("invalid value: {0}")]
    Value(String),
    #[error("bad magic {found:?} (expected one of ATN1, SAL1, MSK1)")]
    BadMagic { found: [u8; 4] },
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("dimension overflow: {0:?}")]
    DimensionOverflow(Vec<u32>),
    #[error("image error: {0}")]
    Image(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Per-channel normalization constants: `x_norm = (x - mean) / std`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormSpec {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl NormSpec {
    pub const IMAGENET: NormSpec = NormSpec {
        mean: [0.485, 0.456, 0.406],
        std: [0.229, 0.224, 0.225],
    };

    /// Statistics used by CLIP-style vision towers (LLaVA family).
    pub const CLIP: NormSpec = NormSpec {
        mean: [0.481_454_66, 0.457_827_5, 0.408_210_73],
        std: [0.268_629_54, 0.261_302_58, 0.275_777_11],
    };

    pub const IDENTITY: NormSpec = NormSpec {
        mean: [0.0; 3],
        std: [1.0; 3],
    };

    pub fn new(mean: [f64; 3], std: [f64; 3]) -> Result<Self> {
        let spec = Self { mean, std };
        spec.validate()?;
        Ok(spec)
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "clip" => Some(Self::CLIP),
            "imagenet" => Some(Self::IMAGENET),
            "identity" | "none" => Some(Self::IDENTITY),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for c in 0..3 {
            if !self.mean[c].is_finite() {
                return Err(TensorError::Value(format!("mean[{c}] is not finite")));
            }
            if !(self.std[c].is_finite() && self.std[c] > 0.0) {
                return Err(TensorError::Value(format!(
                    "std[{c}] = {} must be finite and > 0",
                    self.std[c]
                )));
            }
        }
        Ok(())
    }

    /// Pure black in this normalized space, `-mean_c / std_c`.
    pub fn black(&self) -> [f64; 3] {
        [0, 1, 2].map(|c| -self.mean[c] / self.std[c])
    }
}

impl Default for NormSpec {
    fn default() -> Self {
        Self::CLIP
    }
}

/// An RGB image stored row-major, channels interleaved (`H x W x 3`).
///
/// A raw image holds linear channel values in `[0, 1]` (8-bit input divided
/// by 255). A normalized image carries the [`NormSpec`] it was produced with.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRgb {
    height: usize,
    width: usize,
    data: Vec<f32>,
    norm: Option<NormSpec>,
}

impl ImageRgb {
    pub fn new_raw(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        Self::build(height, width, data, None)
    }

    pub fn new_normalized(
        height: usize,
        width: usize,
        data: Vec<f32>,
        norm: NormSpec,
    ) -> Result<Self> {
        norm.validate()?;
        Self::build(height, width, data, Some(norm))
    }

    fn build(height: usize, width: usize, data: Vec<f32>, norm: Option<NormSpec>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(TensorError::Shape(format!(
                "image must be at least 1x1, got {height}x{width}"
            )));
        }
        let expected = height
            .checked_mul(width)
            .and_then(|n| n.checked_mul(3))
            .ok_or_else(|| TensorError::Shape("image size overflows".into()))?;
        if data.len() != expected {
            return Err(TensorError::Shape(format!(
                "image {height}x{width}x3 needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::Value(format!("non-finite channel value at index {i}")));
        }
        Ok(Self {
            height,
            width,
            data,
            norm,
        })
    }

    /// Raw image from 8-bit interleaved RGB.
    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        let data = bytes.iter().map(|&b| f32::from(b) / 255.0).collect();
        Self::new_raw(height, width, data)
    }

    /// Constant raw image, mostly useful in tests and fixtures.
    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self> {
        let data = std::iter::repeat_n(rgb, height * width).flatten().collect();
        Self::new_raw(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn norm(&self) -> Option<&NormSpec> {
        self.norm.as_ref()
    }

    pub fn is_normalized(&self) -> bool {
        self.norm.is_some()
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// `(x - mean_c) / std_c` per channel. The input must be raw.
    pub fn normalize(&self, norm: &NormSpec) -> Result<ImageRgb> {
        norm.validate()?;
        if self.norm.is_some() {
            return Err(TensorError::Value("image is already normalized".into()));
        }
        let data = self
            .data
            .chunks_exact(3)
            .flat_map(|px| {
                [0, 1, 2].map(|c| ((f64::from(px[c]) - norm.mean[c]) / norm.std[c]) as f32)
            })
            .collect();
        ImageRgb::new_normalized(self.height, self.width, data, *norm)
    }

    /// Inverse of [`normalize`](Self::normalize) using the recorded spec.
    pub fn denormalize(&self) -> Result<ImageRgb> {
        let norm = self
            .norm
            .ok_or_else(|| TensorError::Value("image is not normalized".into()))?;
        let data = self
            .data
            .chunks_exact(3)
            .flat_map(|px| {
                [0, 1, 2].map(|c| (f64::from(px[c]) * norm.std[c] + norm.mean[c]) as f32)
            })
            .collect();
        ImageRgb::new_raw(self.height, self.width, data)
    }

    /// Quantize a raw image back to 8-bit RGB (clamped, rounded).
    pub fn to_rgb8(&self) -> Result<Vec<u8>> {
        if self.norm.is_some() {
            return Err(TensorError::Value("to_rgb8 expects a raw image".into()));
        }
        Ok(self
            .data
            .iter()
            .map(|&v| (f64::from(v).clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect())
    }

    /// SHA-256 over shape, normalization and the exact channel bits.
    pub fn digest(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update((self.height as u64).to_le_bytes());
        hasher.update((self.width as u64).to_le_bytes());
        match &self.norm {
            Some(n) => {
                hasher.update([1u8]);
                for v in n.mean.iter().chain(n.std.iter()) {
                    hasher.update(v.to_le_bytes());
                }
            }
            None => hasher.update([0u8]),
        }
        for v in &self.data {
            hasher.update(v.to_le_bytes());
        }
        hasher.finalize().into()
    }
}

/// Last-layer `[CLS]`-to-patch attention, one `grid_h x grid_w` map per head.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack {
    heads: usize,
    grid_h: usize,
    grid_w: usize,
    data: Vec<f32>,
}

impl AttentionStack {
    pub fn new(heads: usize, grid_h: usize, grid_w: usize, data: Vec<f32>) -> Result<Self> {
        if heads == 0 || grid_h == 0 || grid_w == 0 {
            return Err(TensorError::Shape(format!(
                "attention needs heads, rows and cols >= 1, got {heads}x{grid_h}x{grid_w}"
            )));
        }
        let cells = grid_h * grid_w;
        if data.len() != heads * cells {
            return Err(TensorError::Shape(format!(
                "attention {heads}x{grid_h}x{grid_w} needs {} values, got {}",
                heads * cells,
                data.len()
            )));
        }
        for (i, v) in data.iter().enumerate() {
            if !v.is_finite() || *v < 0.0 {
                return Err(TensorError::Value(format!(
                    "attention entry {i} = {v} must be finite and >= 0"
                )));
            }
        }
        for (h, head) in data.chunks_exact(cells).enumerate() {
            let sum: f64 = head.iter().map(|&v| f64::from(v)).sum();
            if !(sum.is_finite() && sum > 0.0) {
                return Err(TensorError::Value(format!("head {h} has no attention mass")));
            }
        }
        Ok(Self {
            heads,
            grid_h,
            grid_w,
            data,
        })
    }

    /// Build from per-head flattened patch rows (`k -> (k / grid_w, k % grid_w)`).
    pub fn from_flat_rows(rows: &[Vec<f32>], grid_h: usize, grid_w: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * grid_h * grid_w);
        for (h, row) in rows.iter().enumerate() {
            if row.len() != grid_h * grid_w {
                return Err(TensorError::Shape(format!(
                    "head {h}: {} patch tokens do not fill a {grid_h}x{grid_w} grid",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Self::new(rows.len(), grid_h, grid_w, data)
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn head(&self, h: usize) -> &[f32] {
        let cells = self.grid_h * self.grid_w;
        &self.data[h * cells..(h + 1) * cells]
    }
}

/// Per-pixel evidence scores at image resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl SaliencyMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(TensorError::Shape(format!(
                "saliency must be at least 1x1, got {height}x{width}"
            )));
        }
        if data.len() != height * width {
            return Err(TensorError::Shape(format!(
                "saliency {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some((i, v)) = data
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            return Err(TensorError::Value(format!(
                "saliency entry {i} = {v} must be finite and >= 0"
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
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

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }
}

/// Binary pixel selection; `true` means the pixel is replaced by background.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EvidenceMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl EvidenceMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(TensorError::Shape(format!(
                "mask must be at least 1x1, got {height}x{width}"
            )));
        }
        if bits.len() != height * width {
            return Err(TensorError::Shape(format!(
                "mask {height}x{width} needs {} bits, got {}",
                height * width,
                bits.len()
            )));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn empty(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![false; height * width])
    }

    pub fn full(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![true; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn coverage(&self) -> f64 {
        self.popcount() as f64 / self.bits.len() as f64
    }
}

pub type TokenId = u32;

/// Next-token scores over the whole vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        if scores.is_empty() {
            return Err(TensorError::Shape("empty logit vector".into()));
        }
        if let Some(i) = scores.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::Value(format!("logit {i} is not finite")));
        }
        Ok(Self(scores))
    }

    pub fn vocab_size(&self) -> usize {
        self.0.len()
    }

    pub fn scores(&self) -> &[f64] {
        &self.0
    }

    /// Numerically stable softmax.
    pub fn softmax(&self) -> TokenDistribution {
        TokenDistribution(softmax(&self.0))
    }
}

pub(crate) fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Normalized probabilities over the vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenDistribution(Vec<f64>);

impl TokenDistribution {
    pub const SUM_TOLERANCE: f64 = 1e-6;

    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(TensorError::Shape("empty distribution".into()));
        }
        if let Some(i) = probs
            .iter()
            .position(|p| !p.is_finite() || *p < 0.0 || *p > 1.0)
        {
            return Err(TensorError::Value(format!("probability {i} outside [0, 1]")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(TensorError::Value(format!("probabilities sum to {sum}")));
        }
        Ok(Self(probs))
    }

    pub fn vocab_size(&self) -> usize {
        self.0.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_pixel_at_mean_is_zero() {
        let px = [0.3f32, 0.6, 0.9];
        let norm = NormSpec::new(px.map(f64::from), [0.7, 0.2, 0.05]).unwrap();
        let img = ImageRgb::filled(2, 2, px).unwrap();
        let out = img.normalize(&norm).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert_eq!(out.norm(), Some(&norm));
    }

    #[test]
    fn identity_norm_is_identity() {
        let data: Vec<f32> = (0..12).map(|i| i as f32 / 11.0).collect();
        let img = ImageRgb::new_raw(2, 2, data.clone()).unwrap();
        let out = img.normalize(&NormSpec::IDENTITY).unwrap();
        assert_eq!(out.data(), data.as_slice());
    }

    #[test]
    fn normalize_direct_value() {
        let norm = NormSpec::new([0.5; 3], [0.25; 3]).unwrap();
        let img = ImageRgb::filled(1, 1, [0.75; 3]).unwrap();
        assert_eq!(img.normalize(&norm).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn nonpositive_std_rejected() {
        assert!(NormSpec::new([0.0; 3], [1.0, 0.0, 1.0]).is_err());
        assert!(NormSpec::new([0.0; 3], [1.0, 1.0, -2.0]).is_err());
    }

    #[test]
    fn double_normalize_rejected() {
        let img = ImageRgb::filled(1, 1, [0.5; 3]).unwrap();
        let n = img.normalize(&NormSpec::CLIP).unwrap();
        assert!(n.normalize(&NormSpec::CLIP).is_err());
        assert!(img.denormalize().is_err());
    }

    #[test]
    fn attention_rejects_dead_head_and_negatives() {
        assert!(AttentionStack::new(2, 1, 2, vec![1.0, 0.0, 0.0, 0.0]).is_err());
        assert!(AttentionStack::new(1, 1, 2, vec![1.0, -0.1]).is_err());
        assert!(AttentionStack::new(1, 1, 2, vec![1.0, f32::NAN]).is_err());
        assert!(AttentionStack::new(1, 2, 2, vec![1.0; 3]).is_err());
    }

    #[test]
    fn flat_rows_reshape_row_major() {
        let rows = vec![(0..6).map(|k| k as f32 + 1.0).collect::<Vec<_>>()];
        let attn = AttentionStack::from_flat_rows(&rows, 2, 3).unwrap();
        for k in 0..6 {
            let (i, j) = (k / 3, k % 3);
            assert_eq!(attn.head(0)[i * 3 + j], k as f32 + 1.0);
        }
    }

    #[test]
    fn digest_tracks_content_and_norm() {
        let a = ImageRgb::filled(2, 2, [0.1, 0.2, 0.3]).unwrap();
        let b = ImageRgb::filled(2, 2, [0.1, 0.2, 0.31]).unwrap();
        assert_eq!(a.digest(), a.clone().digest());
        assert_ne!(a.digest(), b.digest());
        assert_ne!(a.digest(), a.normalize(&NormSpec::IDENTITY).unwrap().digest());
    }

    #[test]
    fn distribution_validation() {
        assert!(TokenDistribution::new(vec![0.5, 0.5]).is_ok());
        assert!(TokenDistribution::new(vec![0.5, 0.4]).is_err());
        assert!(TokenDistribution::new(vec![1.5, -0.5]).is_err());
        assert!(LogitVector::new(vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn black_matches_formula() {
        let n = NormSpec::new([0.5; 3], [0.5; 3]).unwrap();
        assert_eq!(n.black(), [-1.0; 3]);
    }

    proptest::proptest! {
        #[test]
        fn normalize_roundtrip(
            vals in proptest::collection::vec(0.0f32..=1.0, 3..=48),
            mean in proptest::array::uniform3(0.0f64..1.0),
            std in proptest::array::uniform3(0.05f64..2.0),
        ) {
            let n = vals.len() / 3;
            let img = ImageRgb::new_raw(1, n, vals[..n * 3].to_vec()).unwrap();
            let norm = NormSpec::new(mean, std).unwrap();
            let back = img.normalize(&norm).unwrap().denormalize().unwrap();
            for (a, b) in img.data().iter().zip(back.data()) {
                proptest::prop_assert!((a - b).abs() <= 1e-6);
            }
        }
    }
}
