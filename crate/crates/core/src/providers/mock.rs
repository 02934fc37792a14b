//! Closed-form, evidence-aware stand-in for an MLLM.
//!
//! Logits are linear in how much of each evidence region survives in the
//! registered view, so every contrastive quantity can be computed by hand:
//!
//! * every token starts at its language prior;
//! * caption mode (the prompt names no known object): each region adds
//!   `base + weight * visible` to its object token;
//! * question mode (the prompt names object `o`): regions of `o` add
//!   `base + weight * visible` to the yes token; if the scene has no region of
//!   `o`, all scene regions add theirs to the no token instead (the visible
//!   scene testifies to absence); `cooccurrence_bias[o]` is added to yes
//!   regardless of the image;
//! * the end-of-sequence token gains `eos_ramp` per already-generated token.
//!
//! `visible` is the fraction of a region's pixels that the view's mask keeps.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{LogitProvider, ProviderError, Result, SessionInfo, ViewHandle, ViewInput, Vocabulary};
use crate::tensors::{AttentionStack, EvidenceMask, LogitVector, TokenId};

/// Attention floor on patches outside every evidence region.
pub const MOCK_ATTENTION_EPSILON: f64 = 1e-4;

/// Pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    fn overlaps(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> bool {
        self.x0 < x1 && x0 < self.x1 && self.y0 < y1 && y0 < self.y1
    }

    /// Share of the rectangle not covered by the mask.
    pub fn visible_fraction(&self, mask: Option<&EvidenceMask>) -> f64 {
        let Some(mask) = mask else { return 1.0 };
        let mut kept = 0usize;
        for y in self.y0..self.y1 {
            for x in self.x0..self.x1 {
                if !mask.get(y, x) {
                    kept += 1;
                }
            }
        }
        kept as f64 / self.area() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceRegion {
    pub object: String,
    pub rect: Rect,
    #[serde(default)]
    pub base_logit: f64,
    /// Grounding weight, `>= 0`.
    pub weight: f64,
}

fn default_eos() -> String {
    "<eos>".into()
}
fn default_yes() -> String {
    "yes".into()
}
fn default_no() -> String {
    "no".into()
}
fn default_patch() -> usize {
    16
}
fn default_ramp() -> f64 {
    50.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockModelSpec {
    pub vocab: Vec<String>,
    #[serde(default = "default_eos")]
    pub eos: String,
    #[serde(default = "default_yes")]
    pub yes: String,
    #[serde(default = "default_no")]
    pub no: String,
    /// Regions used when a view carries no image id with its own scene.
    #[serde(default)]
    pub regions: Vec<EvidenceRegion>,
    /// Per-image regions keyed by image id.
    #[serde(default)]
    pub scenes: BTreeMap<String, Vec<EvidenceRegion>>,
    #[serde(default)]
    pub language_prior: BTreeMap<String, f64>,
    /// Ungrounded pull towards "yes" when the prompt names the object.
    #[serde(default)]
    pub cooccurrence_bias: BTreeMap<String, f64>,
    /// Side length of the square patches used for mock attention.
    #[serde(default = "default_patch")]
    pub patch_size: usize,
    #[serde(default = "default_ramp")]
    pub eos_ramp: f64,
}

impl MockModelSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| ProviderError::Spec(e.to_string()))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path.as_ref())?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("mock spec serializes")
    }

    fn all_regions(&self) -> impl Iterator<Item = &EvidenceRegion> {
        self.regions.iter().chain(self.scenes.values().flatten())
    }

    pub fn validate(&self) -> Result<()> {
        let vocab = Vocabulary::new(self.vocab.clone())?;
        for t in [&self.eos, &self.yes, &self.no] {
            if vocab.id(t).is_none() {
                return Err(ProviderError::Spec(format!("token {t:?} missing from vocab")));
            }
        }
        if self.patch_size == 0 {
            return Err(ProviderError::Spec("patch_size must be >= 1".into()));
        }
        if !self.eos_ramp.is_finite() {
            return Err(ProviderError::Spec("eos_ramp must be finite".into()));
        }
        for r in self.all_regions() {
            if vocab.id(&r.object).is_none() {
                return Err(ProviderError::Spec(format!(
                    "region object {:?} missing from vocab",
                    r.object
                )));
            }
            if !(r.weight.is_finite() && r.weight >= 0.0) || !r.base_logit.is_finite() {
                return Err(ProviderError::Spec(format!(
                    "region {:?}: weight must be >= 0 and logits finite",
                    r.object
                )));
            }
            if r.rect.x0 >= r.rect.x1 || r.rect.y0 >= r.rect.y1 {
                return Err(ProviderError::Spec(format!(
                    "region {:?} has an empty rectangle",
                    r.object
                )));
            }
        }
        for (t, v) in self.language_prior.iter().chain(&self.cooccurrence_bias) {
            if vocab.id(t).is_none() {
                return Err(ProviderError::Spec(format!("prior token {t:?} missing from vocab")));
            }
            if !v.is_finite() {
                return Err(ProviderError::Spec(format!("prior for {t:?} is not finite")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct MockView {
    height: usize,
    width: usize,
    regions: Vec<EvidenceRegion>,
    visible: Vec<f64>,
}

/// A session over a [`MockModelSpec`]. Pure apart from the view table.
#[derive(Debug)]
pub struct MockProvider {
    spec: MockModelSpec,
    info: SessionInfo,
    yes: TokenId,
    no: TokenId,
    objects: HashMap<TokenId, String>,
    views: Vec<MockView>,
    by_digest: HashMap<[u8; 32], ViewHandle>,
    closed: bool,
}

impl MockProvider {
    pub fn open(spec: MockModelSpec) -> Result<Self> {
        spec.validate()?;
        let vocab = Vocabulary::new(spec.vocab.clone())?;
        let id = |t: &str| vocab.id(t).expect("validated");
        let mut objects = HashMap::new();
        for name in spec
            .all_regions()
            .map(|r| &r.object)
            .chain(spec.cooccurrence_bias.keys())
        {
            objects.insert(id(name), name.clone());
        }
        let (eos_token, yes, no) = (id(&spec.eos), id(&spec.yes), id(&spec.no));
        let info = SessionInfo {
            session_id: "mock".into(),
            eos_token,
            vocab,
        };
        Ok(Self {
            yes,
            no,
            info,
            objects,
            spec,
            views: Vec::new(),
            by_digest: HashMap::new(),
            closed: false,
        })
    }

    pub fn spec(&self) -> &MockModelSpec {
        &self.spec
    }

    fn view(&self, handle: ViewHandle) -> Result<&MockView> {
        if self.closed {
            return Err(ProviderError::Closed);
        }
        self.views
            .get(handle.0 as usize)
            .ok_or(ProviderError::UnknownView(handle))
    }

    /// Visible fraction of every region in the view, in scene order.
    pub fn visibility(&self, handle: ViewHandle) -> Result<Vec<(String, f64)>> {
        let v = self.view(handle)?;
        Ok(v.regions
            .iter()
            .zip(&v.visible)
            .map(|(r, &f)| (r.object.clone(), f))
            .collect())
    }

    fn asked_object(&self, prompt: &[TokenId]) -> Option<TokenId> {
        prompt.iter().copied().find(|t| self.objects.contains_key(t))
    }
}

impl LogitProvider for MockProvider {
    fn info(&self) -> &SessionInfo {
        &self.info
    }

    fn register_view(&mut self, input: &ViewInput<'_>) -> Result<ViewHandle> {
        if self.closed {
            return Err(ProviderError::Closed);
        }
        input.validate()?;
        let digest = input.digest();
        if let Some(&h) = self.by_digest.get(&digest) {
            return Ok(h);
        }
        let (height, width) = (input.image.height(), input.image.width());
        let regions = input
            .image_id
            .and_then(|id| self.spec.scenes.get(id))
            .unwrap_or(&self.spec.regions)
            .clone();
        for r in &regions {
            if r.rect.x1 > width || r.rect.y1 > height {
                return Err(ProviderError::View(format!(
                    "region {:?} {:?} lies outside the {height}x{width} image",
                    r.object, r.rect
                )));
            }
        }
        let visible = regions
            .iter()
            .map(|r| r.rect.visible_fraction(input.mask))
            .collect();
        let handle = ViewHandle(self.views.len() as u64);
        self.views.push(MockView {
            height,
            width,
            regions,
            visible,
        });
        self.by_digest.insert(digest, handle);
        Ok(handle)
    }

    fn next_logits(
        &mut self,
        handle: ViewHandle,
        prompt: &[TokenId],
        prefix: &[TokenId],
    ) -> Result<LogitVector> {
        let view = self.view(handle)?;
        let v = self.info.vocab_size();
        if let Some(&bad) = prompt.iter().chain(prefix).find(|&&t| t as usize >= v) {
            return Err(ProviderError::OutOfVocab {
                token: bad,
                vocab_size: v,
            });
        }
        let vocab = &self.info.vocab;
        let mut logits: Vec<f64> = vocab
            .tokens()
            .iter()
            .map(|t| self.spec.language_prior.get(t).copied().unwrap_or(0.0))
            .collect();
        let evidence = |r: &EvidenceRegion, vis: f64| r.base_logit + r.weight * vis;

        match self.asked_object(prompt) {
            None => {
                for (r, &vis) in view.regions.iter().zip(&view.visible) {
                    let o = vocab.id(&r.object).expect("validated");
                    logits[o as usize] += evidence(r, vis);
                }
            }
            Some(obj) => {
                let name = &self.objects[&obj];
                let mut present = false;
                for (r, &vis) in view.regions.iter().zip(&view.visible) {
                    if &r.object == name {
                        present = true;
                        logits[self.yes as usize] += evidence(r, vis);
                    }
                }
                if !present {
                    for (r, &vis) in view.regions.iter().zip(&view.visible) {
                        logits[self.no as usize] += evidence(r, vis);
                    }
                }
                if let Some(b) = self.spec.cooccurrence_bias.get(name) {
                    logits[self.yes as usize] += b;
                }
            }
        }
        logits[self.info.eos_token as usize] += self.spec.eos_ramp * prefix.len() as f64;
        Ok(LogitVector::new(logits)?)
    }

    fn fetch_attention(&mut self, handle: ViewHandle) -> Result<AttentionStack> {
        let view = self.view(handle)?;
        let ps = self.spec.patch_size;
        let gh = view.height.div_ceil(ps);
        let gw = view.width.div_ceil(ps);
        let cells = gh * gw;
        let mut hot = vec![false; cells];
        for r in &view.regions {
            for i in 0..gh {
                for j in 0..gw {
                    if r.rect.overlaps(j * ps, i * ps, (j + 1) * ps, (i + 1) * ps) {
                        hot[i * gw + j] = true;
                    }
                }
            }
        }
        let n_hot = hot.iter().filter(|h| **h).count();
        let data = if n_hot == 0 || n_hot == cells {
            vec![(1.0 / cells as f64) as f32; cells]
        } else {
            let eps = MOCK_ATTENTION_EPSILON.min(0.5 / cells as f64);
            let mass = (1.0 - eps * (cells - n_hot) as f64) / n_hot as f64;
            hot.iter()
                .map(|&h| if h { mass as f32 } else { eps as f32 })
                .collect()
        };
        Ok(AttentionStack::new(1, gh, gw, data)?)
    }

    fn close(&mut self) -> Result<()> {
        self.closed = true;
        Ok(())
    }
}
