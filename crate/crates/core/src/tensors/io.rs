//! Binary tensor files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   [u8; 4]     "ATN1" | "SAL1" | "MSK1"
//! ndim    u32
//! dims    [u32; ndim] ATN1: heads, rows, cols   SAL1/MSK1: height, width
//! payload row-major   f32 LE (ATN1, SAL1) or one byte 0/1 per pixel (MSK1)
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{AttentionStack, EvidenceMask, Result, SaliencyMap, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Attention,
    Saliency,
    Mask,
}

impl TensorKind {
    pub fn magic(self) -> &'static [u8; 4] {
        match self {
            TensorKind::Attention => b"ATN1",
            TensorKind::Saliency => b"SAL1",
            TensorKind::Mask => b"MSK1",
        }
    }

    fn ndim(self) -> usize {
        match self {
            TensorKind::Attention => 3,
            TensorKind::Saliency | TensorKind::Mask => 2,
        }
    }

    fn from_magic(magic: [u8; 4]) -> Result<Self> {
        match &magic {
            b"ATN1" => Ok(TensorKind::Attention),
            b"SAL1" => Ok(TensorKind::Saliency),
            b"MSK1" => Ok(TensorKind::Mask),
            _ => Err(TensorError::BadMagic { found: magic }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorPayload {
    Attention(AttentionStack),
    Saliency(SaliencyMap),
    Mask(EvidenceMask),
}

impl TensorPayload {
    pub fn kind(&self) -> TensorKind {
        match self {
            TensorPayload::Attention(_) => TensorKind::Attention,
            TensorPayload::Saliency(_) => TensorKind::Saliency,
            TensorPayload::Mask(_) => TensorKind::Mask,
        }
    }

    pub fn into_attention(self) -> Result<AttentionStack> {
        match self {
            TensorPayload::Attention(a) => Ok(a),
            other => Err(TensorError::Value(format!(
                "expected an attention file, found {:?}",
                other.kind()
            ))),
        }
    }

    pub fn into_saliency(self) -> Result<SaliencyMap> {
        match self {
            TensorPayload::Saliency(s) => Ok(s),
            other => Err(TensorError::Value(format!(
                "expected a saliency file, found {:?}",
                other.kind()
            ))),
        }
    }

    pub fn into_mask(self) -> Result<EvidenceMask> {
        match self {
            TensorPayload::Mask(m) => Ok(m),
            other => Err(TensorError::Value(format!(
                "expected a mask file, found {:?}",
                other.kind()
            ))),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (dims, body): (Vec<usize>, Vec<u8>) = match self {
            TensorPayload::Attention(a) => (
                vec![a.heads(), a.grid_h(), a.grid_w()],
                f32_bytes(a.data()),
            ),
            TensorPayload::Saliency(s) => (vec![s.height(), s.width()], f32_bytes(s.data())),
            TensorPayload::Mask(m) => (
                vec![m.height(), m.width()],
                m.bits().iter().map(|&b| u8::from(b)).collect(),
            ),
        };
        let mut out = Vec::with_capacity(8 + 4 * dims.len() + body.len());
        out.extend_from_slice(self.kind().magic());
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for d in dims {
            let d = u32::try_from(d)
                .map_err(|_| TensorError::Shape(format!("dimension {d} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&body);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(TensorError::Truncated(format!(
                "{} bytes is shorter than the 8-byte header",
                bytes.len()
            )));
        }
        let magic = [bytes[0], bytes[1], bytes[2], bytes[3]];
        let kind = TensorKind::from_magic(magic)?;
        let ndim = read_u32(&bytes[4..8]) as usize;
        if ndim != kind.ndim() {
            return Err(TensorError::Shape(format!(
                "{kind:?} file declares {ndim} dims, expected {}",
                kind.ndim()
            )));
        }
        let header = 8 + 4 * ndim;
        if bytes.len() < header {
            return Err(TensorError::Truncated("dimension list cut short".into()));
        }
        let dims: Vec<u32> = bytes[8..header].chunks_exact(4).map(read_u32).collect();
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
            .ok_or_else(|| TensorError::DimensionOverflow(dims.clone()))?;
        let elem = match kind {
            TensorKind::Mask => 1,
            _ => 4,
        };
        let body_len = count
            .checked_mul(elem)
            .ok_or_else(|| TensorError::DimensionOverflow(dims.clone()))?;
        let body = &bytes[header..];
        if body.len() != body_len {
            return Err(TensorError::Truncated(format!(
                "dims {dims:?} need {body_len} payload bytes, file has {}",
                body.len()
            )));
        }
        let d: Vec<usize> = dims.iter().map(|&d| d as usize).collect();
        match kind {
            TensorKind::Attention => {
                let data = read_f32s(body)?;
                Ok(TensorPayload::Attention(AttentionStack::new(
                    d[0], d[1], d[2], data,
                )?))
            }
            TensorKind::Saliency => {
                let data = read_f32s(body)?;
                Ok(TensorPayload::Saliency(SaliencyMap::new(d[0], d[1], data)?))
            }
            TensorKind::Mask => {
                let bits = body
                    .iter()
                    .enumerate()
                    .map(|(i, &b)| match b {
                        0 => Ok(false),
                        1 => Ok(true),
                        other => Err(TensorError::Value(format!(
                            "mask byte {i} is {other}, expected 0 or 1"
                        ))),
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(TensorPayload::Mask(EvidenceMask::new(d[0], d[1], bits)?))
            }
        }
    }
}

impl From<AttentionStack> for TensorPayload {
    fn from(v: AttentionStack) -> Self {
        TensorPayload::Attention(v)
    }
}

impl From<SaliencyMap> for TensorPayload {
    fn from(v: SaliencyMap) -> Self {
        TensorPayload::Saliency(v)
    }
}

impl From<EvidenceMask> for TensorPayload {
    fn from(v: EvidenceMask) -> Self {
        TensorPayload::Mask(v)
    }
}

fn read_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

fn f32_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn read_f32s(body: &[u8]) -> Result<Vec<f32>> {
    body.chunks_exact(4)
        .enumerate()
        .map(|(i, c)| {
            let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            if v.is_nan() {
                Err(TensorError::Value(format!("NaN at payload element {i}")))
            } else {
                Ok(v)
            }
        })
        .collect()
}

pub fn write_tensor_file(path: impl AsRef<Path>, payload: &TensorPayload) -> Result<()> {
    let bytes = payload.to_bytes()?;
    let mut f = fs::File::create(path.as_ref())?;
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<TensorPayload> {
    TensorPayload::from_bytes(&fs::read(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn attention_file_layout() {
        let attn = AttentionStack::new(1, 2, 2, vec![1.0; 4]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.atn");
        write_tensor_file(&path, &attn.clone().into()).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 36);
        assert_eq!(&bytes[..4], b"ATN1");
        assert_eq!(&bytes[4..8], &3u32.to_le_bytes());
        let back = read_tensor_file(&path).unwrap().into_attention().unwrap();
        assert_eq!(back, attn);
    }

    #[test]
    fn saliency_roundtrip_bit_exact() {
        let s = SaliencyMap::new(3, 3, (0..9).map(|v| v as f32).collect()).unwrap();
        let back = TensorPayload::from_bytes(&TensorPayload::from(s.clone()).to_bytes().unwrap())
            .unwrap()
            .into_saliency()
            .unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn mask_popcount_survives() {
        let mut bits = vec![false; 100];
        for i in [3, 17, 42, 99] {
            bits[i] = true;
        }
        let m = EvidenceMask::new(10, 10, bits).unwrap();
        let bytes = TensorPayload::from(m).to_bytes().unwrap();
        let back = TensorPayload::from_bytes(&bytes).unwrap().into_mask().unwrap();
        assert_eq!(back.popcount(), 4);
    }

    #[test]
    fn bad_magic() {
        let mut bytes = TensorPayload::from(SaliencyMap::new(1, 1, vec![0.0]).unwrap())
            .to_bytes()
            .unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(
            TensorPayload::from_bytes(&bytes),
            Err(TensorError::BadMagic { .. })
        ));
    }

    #[test]
    fn nan_in_attention_rejected() {
        let mut bytes = TensorPayload::from(AttentionStack::new(1, 1, 2, vec![0.5, 0.5]).unwrap())
            .to_bytes()
            .unwrap();
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            TensorPayload::from_bytes(&bytes),
            Err(TensorError::Value(_))
        ));
    }

    #[test]
    fn truncated_and_padded_payloads_rejected() {
        let bytes = TensorPayload::from(SaliencyMap::new(2, 2, vec![1.0; 4]).unwrap())
            .to_bytes()
            .unwrap();
        assert!(matches!(
            TensorPayload::from_bytes(&bytes[..bytes.len() - 1]),
            Err(TensorError::Truncated(_))
        ));
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(TensorPayload::from_bytes(&longer).is_err());
        assert!(TensorPayload::from_bytes(&bytes[..6]).is_err());
    }

    #[test]
    fn dimension_overflow_rejected() {
        let mut bytes = b"ATN1".to_vec();
        bytes.extend_from_slice(&3u32.to_le_bytes());
        for _ in 0..3 {
            bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(matches!(
            TensorPayload::from_bytes(&bytes),
            Err(TensorError::DimensionOverflow(_))
        ));
    }

    #[test]
    fn wrong_ndim_rejected() {
        let mut bytes = b"SAL1".to_vec();
        bytes.extend_from_slice(&3u32.to_le_bytes());
        bytes.extend_from_slice(&[1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0]);
        bytes.extend_from_slice(&0f32.to_le_bytes());
        assert!(matches!(
            TensorPayload::from_bytes(&bytes),
            Err(TensorError::Shape(_))
        ));
    }

    #[test]
    fn non_binary_mask_byte_rejected() {
        let mut bytes = TensorPayload::from(EvidenceMask::empty(1, 2).unwrap())
            .to_bytes()
            .unwrap();
        *bytes.last_mut().unwrap() = 7;
        assert!(TensorPayload::from_bytes(&bytes).is_err());
    }

    #[test]
    fn unwritable_path_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("missing").join("x.sal");
        let s = SaliencyMap::new(1, 1, vec![0.0]).unwrap();
        assert!(matches!(
            write_tensor_file(&path, &s.into()),
            Err(TensorError::Io(_))
        ));
    }

    proptest! {
        #[test]
        fn saliency_roundtrip(h in 1usize..8, w in 1usize..8, seed in any::<u64>()) {
            let data: Vec<f32> = (0..h * w)
                .map(|i| f32::from_bits((seed.wrapping_mul(i as u64 + 1) >> 40) as u32) .abs())
                .map(|v| if v.is_finite() { v } else { 1.0 })
                .collect();
            let s = SaliencyMap::new(h, w, data).unwrap();
            let back = TensorPayload::from_bytes(&TensorPayload::from(s.clone()).to_bytes().unwrap())
                .unwrap().into_saliency().unwrap();
            for (a, b) in s.data().iter().zip(back.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }

        #[test]
        fn mask_roundtrip(bits in proptest::collection::vec(any::<bool>(), 1..200)) {
            let n = bits.len();
            let m = EvidenceMask::new(1, n, bits).unwrap();
            let back = TensorPayload::from_bytes(&TensorPayload::from(m.clone()).to_bytes().unwrap())
                .unwrap().into_mask().unwrap();
            prop_assert_eq!(back, m);
        }
    }
}
