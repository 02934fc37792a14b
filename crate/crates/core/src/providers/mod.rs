//! Logit/attention backends.
//!
//! A [`LogitProvider`] is one open session: it accepts image views, answers
//! next-token logit queries for `(view, prompt, prefix)` and serves the
//! `[CLS]` attention used to build auxiliary views.

mod mock;
mod remote;
mod server;
pub mod wire;

pub use mock::{EvidenceRegion, MockModelSpec, MockProvider, Rect, MOCK_ATTENTION_EPSILON};
pub use remote::{RemoteProvider, DEFAULT_TIMEOUT, ENDPOINT_ENV};
pub use server::{serve_connection, serve_tcp};

use std::collections::HashMap;
use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensors::{AttentionStack, EvidenceMask, ImageRgb, LogitVector, TensorError, TokenId};

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("cannot connect to {endpoint}: {source}")]
    Connection {
        endpoint: String,
        #[source]
        source: std::io::Error,
    },
    #[error("handshake failed: {0}")]
    Handshake(String),
    #[error("{op} timed out after {after:?}")]
    Timeout { op: String, after: Duration },
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("backend error: {0}")]
    Remote(String),
    #[error("unknown view handle {0}")]
    UnknownView(ViewHandle),
    #[error("token id {token} outside vocabulary of {vocab_size}")]
    OutOfVocab { token: TokenId, vocab_size: usize },
    #[error("word {0:?} is not in the vocabulary")]
    UnknownWord(String),
    #[error("session is closed")]
    Closed,
    #[error("invalid model spec: {0}")]
    Spec(String),
    #[error("invalid view: {0}")]
    View(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ProviderError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ViewHandle(pub u64);

impl fmt::Display for ViewHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "v{}", self.0)
    }
}

/// Word-level vocabulary. Text is lowercased and split on anything that is
/// not alphanumeric; `<unk>` (when present) absorbs unknown words.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    unk: Option<TokenId>,
}

impl Vocabulary {
    pub const UNK: &'static str = "<unk>";

    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(ProviderError::Spec("empty vocabulary".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(ProviderError::Spec(format!("duplicate token {t:?}")));
            }
        }
        let unk = index.get(Self::UNK).copied();
        Ok(Self { tokens, index, unk })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(|w| {
                let w = w.to_lowercase();
                self.id(&w)
                    .or(self.unk)
                    .ok_or(ProviderError::UnknownWord(w))
            })
            .collect()
    }

    pub fn detokenize(&self, ids: &[TokenId], skip: &[TokenId]) -> String {
        ids.iter()
            .filter(|id| !skip.contains(id))
            .map(|&id| self.token(id).unwrap_or("<?>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionInfo {
    pub session_id: String,
    pub vocab: Vocabulary,
    pub eos_token: TokenId,
}

impl SessionInfo {
    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }
}

/// An image handed to a provider, plus the metadata the mock needs.
#[derive(Debug, Clone, Copy)]
pub struct ViewInput<'a> {
    pub image: &'a ImageRgb,
    /// Pixels replaced by background in this view, if any.
    pub mask: Option<&'a EvidenceMask>,
    /// Dataset image identifier (file name), used to look up mock scenes.
    pub image_id: Option<&'a str>,
}

impl<'a> ViewInput<'a> {
    pub fn new(image: &'a ImageRgb) -> Self {
        Self {
            image,
            mask: None,
            image_id: None,
        }
    }

    pub fn with_mask(mut self, mask: &'a EvidenceMask) -> Self {
        self.mask = Some(mask);
        self
    }

    pub fn with_image_id(mut self, id: &'a str) -> Self {
        self.image_id = Some(id);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(m) = self.mask {
            if (m.height(), m.width()) != (self.image.height(), self.image.width()) {
                return Err(ProviderError::View(format!(
                    "mask {}x{} does not match image {}x{}",
                    m.height(),
                    m.width(),
                    self.image.height(),
                    self.image.width()
                )));
            }
        }
        Ok(())
    }

    /// Identity of the view: image content, mask bits and image id.
    pub fn digest(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.image.digest());
        match self.mask {
            Some(m) => {
                h.update([1u8]);
                h.update(m.bits().iter().map(|&b| u8::from(b)).collect::<Vec<_>>());
            }
            None => h.update([0u8]),
        }
        match self.image_id {
            Some(id) => {
                h.update([1u8]);
                h.update(id.as_bytes());
            }
            None => h.update([0u8]),
        }
        h.finalize().into()
    }
}

/// One open backend session.
pub trait LogitProvider {
    fn info(&self) -> &SessionInfo;

    /// Idempotent per view content: registering the same view twice returns
    /// the same handle.
    fn register_view(&mut self, view: &ViewInput<'_>) -> Result<ViewHandle>;

    fn next_logits(
        &mut self,
        view: ViewHandle,
        prompt: &[TokenId],
        prefix: &[TokenId],
    ) -> Result<LogitVector>;

    fn fetch_attention(&mut self, view: ViewHandle) -> Result<AttentionStack>;

    fn close(&mut self) -> Result<()>;

    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        self.info().vocab.tokenize(text)
    }

    fn detokenize(&self, ids: &[TokenId]) -> String {
        let info = self.info();
        info.vocab.detokenize(ids, &[info.eos_token])
    }
}

impl<P: LogitProvider + ?Sized> LogitProvider for Box<P> {
    fn info(&self) -> &SessionInfo {
        (**self).info()
    }

    fn register_view(&mut self, view: &ViewInput<'_>) -> Result<ViewHandle> {
        (**self).register_view(view)
    }

    fn next_logits(
        &mut self,
        view: ViewHandle,
        prompt: &[TokenId],
        prefix: &[TokenId],
    ) -> Result<LogitVector> {
        (**self).next_logits(view, prompt, prefix)
    }

    fn fetch_attention(&mut self, view: ViewHandle) -> Result<AttentionStack> {
        (**self).fetch_attention(view)
    }

    fn close(&mut self) -> Result<()> {
        (**self).close()
    }

    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        (**self).tokenize(text)
    }

    fn detokenize(&self, ids: &[TokenId]) -> String {
        (**self).detokenize(ids)
    }
}

/// Where sessions come from. Parsed from `mock:PATH` or `remote:HOST:PORT`.
#[derive(Debug, Clone)]
pub enum ProviderSource {
    Mock(MockModelSpec),
    Remote { endpoint: String, timeout: Duration },
}

impl ProviderSource {
    pub fn open(&self) -> Result<Box<dyn LogitProvider + Send>> {
        match self {
            ProviderSource::Mock(spec) => Ok(Box::new(MockProvider::open(spec.clone())?)),
            ProviderSource::Remote { endpoint, timeout } => {
                Ok(Box::new(RemoteProvider::connect(endpoint, *timeout)?))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_with_and_without_unk() {
        let v = Vocabulary::new(vec!["is".into(), "there".into(), "dog".into()]).unwrap();
        assert_eq!(v.tokenize("Is there").unwrap(), vec![0, 1]);
        assert!(matches!(
            v.tokenize("is there a dog?"),
            Err(ProviderError::UnknownWord(w)) if w == "a"
        ));
        let v = Vocabulary::new(vec!["<unk>".into(), "dog".into()]).unwrap();
        assert_eq!(v.tokenize("a DOG!").unwrap(), vec![0, 1]);
        assert_eq!(v.detokenize(&[1, 0, 1], &[0]), "dog dog");
    }

    #[test]
    fn duplicate_tokens_rejected() {
        assert!(Vocabulary::new(vec!["a".into(), "a".into()]).is_err());
        assert!(Vocabulary::new(vec![]).is_err());
    }
}
