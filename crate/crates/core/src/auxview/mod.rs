//! Auxiliary view construction: threshold the saliency map, pick the pixels
//! to replace, synthesize a neutral background and composite.

mod background;

pub use background::{gaussian_kernel, make_background, Background, BackgroundKind};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::saliency::{compute_saliency, SaliencyError};
use crate::tensors::{AttentionStack, EvidenceMask, ImageRgb, NormSpec, SaliencyMap, TensorError};

#[derive(Debug, Error)]
pub enum AuxViewError {
    #[error("invalid mask config: {0}")]
    Config(String),
    #[error("quantile level {0} outside [0, 1]")]
    QuantileLevel(f64),
    #[error("extent mismatch: {0}")]
    Extent(String),
    #[error("image must be normalized before building a background or view")]
    NotNormalized,
    #[error(transparent)]
    Saliency(#[from] SaliencyError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = AuxViewError> = std::result::Result<T, E>;

/// Which end of the saliency ranking gets replaced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Delta {
    /// `δ = -1`: replace the most salient fraction.
    #[serde(rename = "-1")]
    RemoveMostSalient,
    /// `δ = +1`: replace the least salient fraction.
    #[serde(rename = "+1")]
    RemoveLeastSalient,
}

impl Delta {
    pub fn from_sign(sign: i32) -> Option<Self> {
        match sign {
            -1 => Some(Delta::RemoveMostSalient),
            1 => Some(Delta::RemoveLeastSalient),
            _ => None,
        }
    }

    pub fn sign(self) -> i32 {
        match self {
            Delta::RemoveMostSalient => -1,
            Delta::RemoveLeastSalient => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    /// Fraction of the image area to replace, strictly inside (0, 1).
    pub gamma: f64,
    pub delta: Delta,
    pub background: BackgroundKind,
    pub blur_kernel: usize,
    /// Defaults to `blur_kernel / 6` when unset.
    pub blur_sigma: Option<f64>,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            gamma: 0.8,
            delta: Delta::RemoveMostSalient,
            background: BackgroundKind::Mean,
            blur_kernel: 21,
            blur_sigma: None,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(AuxViewError::Config(format!(
                "gamma = {} must lie strictly inside (0, 1)",
                self.gamma
            )));
        }
        if self.blur_kernel < 3 || self.blur_kernel.is_multiple_of(2) {
            return Err(AuxViewError::Config(format!(
                "blur kernel {} must be odd and >= 3",
                self.blur_kernel
            )));
        }
        if let Some(s) = self.blur_sigma {
            if !(s.is_finite() && s > 0.0) {
                return Err(AuxViewError::Config(format!("blur sigma {s} must be > 0")));
            }
        }
        Ok(())
    }

    pub fn sigma(&self) -> f64 {
        self.blur_sigma
            .unwrap_or(self.blur_kernel as f64 / 6.0)
    }
}

fn sorted_values(s: &SaliencyMap) -> Vec<f32> {
    let mut v = s.data().to_vec();
    v.sort_by(f32::total_cmp);
    v
}

/// Nearest-rank quantile: sort ascending, take index `round(q * (N - 1))`.
pub fn quantile_threshold(s: &SaliencyMap, q: f64) -> Result<f32> {
    if !(0.0..=1.0).contains(&q) {
        return Err(AuxViewError::QuantileLevel(q));
    }
    let sorted = sorted_values(s);
    let idx = (q * (sorted.len() - 1) as f64 + 0.5).floor() as usize;
    Ok(sorted[idx.min(sorted.len() - 1)])
}

/// Number of pixels a `(gamma, delta)` cut selects when all values are distinct.
///
/// Half-way cases round up; the 1e-9 slack absorbs representation error such
/// as `(1.0 - 0.9) * 15.0 = 1.4999999999999996`.
pub fn target_area(pixels: usize, gamma: f64, delta: Delta) -> usize {
    let round = |x: f64| (x + 0.5 + 1e-9).floor() as usize;
    match delta {
        Delta::RemoveMostSalient => round(gamma * pixels as f64).min(pixels),
        // Counted from the kept side so that (γ, -1) and (1 - γ, +1) partition the image.
        Delta::RemoveLeastSalient => pixels - round((1.0 - gamma) * pixels as f64).min(pixels),
    }
}

/// Select pixels to replace.
///
/// `δ = -1` marks the `round(γN)` highest-saliency pixels, `δ = +1` the
/// lowest. Comparisons against the cut value are inclusive, so pixels tied
/// with the boundary are all selected and a constant map is fully masked.
pub fn evidence_mask(s: &SaliencyMap, cfg: &MaskConfig) -> Result<EvidenceMask> {
    cfg.validate()?;
    let n = s.data().len();
    let k = target_area(n, cfg.gamma, cfg.delta);
    if k == 0 {
        return Ok(EvidenceMask::empty(s.height(), s.width())?);
    }
    let sorted = sorted_values(s);
    let bits = match cfg.delta {
        Delta::RemoveMostSalient => {
            let cut = sorted[n - k];
            s.data().iter().map(|&v| v >= cut).collect()
        }
        Delta::RemoveLeastSalient => {
            let cut = sorted[k - 1];
            s.data().iter().map(|&v| v <= cut).collect()
        }
    };
    Ok(EvidenceMask::new(s.height(), s.width(), bits)?)
}

/// `out = bg` where the mask is set, `image` elsewhere.
pub fn compose_auxiliary_view(
    image: &ImageRgb,
    mask: &EvidenceMask,
    bg: &Background,
) -> Result<ImageRgb> {
    let norm = *image.norm().ok_or(AuxViewError::NotNormalized)?;
    let (h, w) = (image.height(), image.width());
    if (mask.height(), mask.width()) != (h, w) || (bg.height(), bg.width()) != (h, w) {
        return Err(AuxViewError::Extent(format!(
            "image {h}x{w}, mask {}x{}, background {}x{}",
            mask.height(),
            mask.width(),
            bg.height(),
            bg.width()
        )));
    }
    let mut data = image.data().to_vec();
    for (i, &bit) in mask.bits().iter().enumerate() {
        if bit {
            data[i * 3..i * 3 + 3].copy_from_slice(&bg.data()[i * 3..i * 3 + 3]);
        }
    }
    Ok(ImageRgb::new_normalized(h, w, data, norm)?)
}

/// Everything produced for one image, kept for inspection and caching.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxiliaryView {
    pub view: ImageRgb,
    pub saliency: SaliencyMap,
    pub mask: EvidenceMask,
}

/// normalize → saliency → mask → background → composite.
pub fn build_auxiliary_view(
    image: &ImageRgb,
    attn: &AttentionStack,
    cfg: &MaskConfig,
    norm: &NormSpec,
    heads: Option<&[usize]>,
) -> Result<AuxiliaryView> {
    cfg.validate()?;
    let normalized = image.normalize(norm)?;
    let saliency = compute_saliency(attn, image.height(), image.width(), heads)?;
    let mask = evidence_mask(&saliency, cfg)?;
    let bg = make_background(&normalized, cfg, norm)?;
    let view = compose_auxiliary_view(&normalized, &mask, &bg)?;
    Ok(AuxiliaryView {
        view,
        saliency,
        mask,
    })
}
