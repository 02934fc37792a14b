//! A 20-question POPE-style fixture over the mock provider.
//!
//! Ten synthetic scenes each contain one object. Every scene gets two
//! questions: one about its object (label yes) and one about an object that
//! usually co-occurs with it but is absent (label no). The absent objects
//! carry a co-occurrence bias `b` towards "yes" that exceeds the scene's
//! grounding weight `w` but stays below `2w`, so plain decoding says "yes"
//! while contrasting against a view with the evidence removed says "no".

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{Label, Question, Result};
use crate::providers::{EvidenceRegion, MockModelSpec, Rect};
use crate::tensors::{save_view_png, ImageRgb};

pub const SIDE: usize = 64;
pub const PATCH: usize = 16;

/// (present object, absent co-occurring object)
pub const PAIRS: [(&str, &str); 10] = [
    ("dog", "leash"),
    ("cat", "mouse"),
    ("car", "road"),
    ("bus", "driver"),
    ("bird", "nest"),
    ("horse", "saddle"),
    ("cup", "saucer"),
    ("chair", "table"),
    ("tree", "bench"),
    ("boat", "dock"),
];

const FILLER: [&str; 7] = ["is", "there", "a", "an", "in", "the", "image"];

#[derive(Debug, Clone)]
pub struct MiniPope {
    pub spec: MockModelSpec,
    pub questions: Vec<Question>,
    pub images: BTreeMap<String, ImageRgb>,
}

#[derive(Debug, Clone)]
pub struct FixturePaths {
    pub spec: PathBuf,
    pub questions: PathBuf,
    pub images_dir: PathBuf,
}

pub fn image_id(scene: usize) -> String {
    format!("scene{scene:02}.png")
}

/// Grounding weight of scene `i`.
pub fn weight(scene: usize) -> f64 {
    1.0 + 0.25 * scene as f64
}

/// Co-occurrence bias of the absent object in scene `i`, inside `(w, 2w)`.
pub fn bias(scene: usize) -> f64 {
    1.5 * weight(scene)
}

pub fn region(scene: usize) -> Rect {
    let x0 = PATCH * (scene % 3);
    let y0 = PATCH * (scene / 3 % 3);
    Rect::new(x0, y0, x0 + PATCH, y0 + PATCH)
}

fn scene_image(scene: usize, r: Rect) -> ImageRgb {
    let bg = [40 + 15 * scene as u8, 90, 160 - 10 * scene as u8];
    let fg = [230, 200 - 12 * scene as u8, 30 + 20 * scene as u8];
    let mut bytes = Vec::with_capacity(SIDE * SIDE * 3);
    for y in 0..SIDE {
        for x in 0..SIDE {
            let inside = (r.x0..r.x1).contains(&x) && (r.y0..r.y1).contains(&y);
            bytes.extend_from_slice(if inside { &fg } else { &bg });
        }
    }
    ImageRgb::from_rgb8(SIDE, SIDE, &bytes).expect("fixture image")
}

pub fn mini_pope() -> MiniPope {
    let mut vocab: Vec<String> = ["<eos>", "<unk>", "yes", "no"].map(String::from).to_vec();
    vocab.extend(FILLER.iter().map(|s| s.to_string()));
    for (p, a) in PAIRS {
        vocab.push(p.into());
        vocab.push(a.into());
    }
    let mut scenes = BTreeMap::new();
    let mut cooccurrence_bias = BTreeMap::new();
    let mut questions = Vec::new();
    let mut images = BTreeMap::new();
    for (i, (present, absent)) in PAIRS.iter().enumerate() {
        let id = image_id(i);
        let rect = region(i);
        scenes.insert(
            id.clone(),
            vec![EvidenceRegion {
                object: present.to_string(),
                rect,
                base_logit: 0.0,
                weight: weight(i),
            }],
        );
        cooccurrence_bias.insert(absent.to_string(), bias(i));
        images.insert(id.clone(), scene_image(i, rect));
        for (k, (obj, label)) in [(present, Label::Yes), (absent, Label::No)].into_iter().enumerate() {
            let article = if obj.starts_with(['a', 'e', 'i', 'o', 'u']) { "an" } else { "a" };
            questions.push(Question {
                question_id: (2 * i + k + 1).to_string(),
                image_id: id.clone(),
                question: format!("Is there {article} {obj} in the image?"),
                label,
                category: None,
            });
        }
    }
    let spec = MockModelSpec {
        vocab,
        eos: "<eos>".into(),
        yes: "yes".into(),
        no: "no".into(),
        regions: Vec::new(),
        scenes,
        language_prior: BTreeMap::new(),
        cooccurrence_bias,
        patch_size: PATCH,
        eos_ramp: 50.0,
    };
    MiniPope {
        spec,
        questions,
        images,
    }
}

impl MiniPope {
    /// Write `spec.json`, `questions.jsonl` and `images/*.png` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<FixturePaths> {
        let images_dir = dir.join("images");
        std::fs::create_dir_all(&images_dir)?;
        let spec = dir.join("spec.json");
        std::fs::write(&spec, self.spec.to_json() + "\n")?;
        let questions = dir.join("questions.jsonl");
        let mut f = std::io::BufWriter::new(std::fs::File::create(&questions)?);
        for q in &self.questions {
            let line = serde_json::json!({
                "question_id": q.question_id,
                "image": q.image_id,
                "text": q.question,
                "label": q.label,
            });
            writeln!(f, "{line}")?;
        }
        f.flush()?;
        for (id, img) in &self.images {
            save_view_png(img, images_dir.join(id)).map_err(|source| super::EvalError::Image {
                id: id.clone(),
                source,
            })?;
        }
        Ok(FixturePaths {
            spec,
            questions,
            images_dir,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape() {
        let f = mini_pope();
        assert_eq!(f.questions.len(), 20);
        assert_eq!(f.images.len(), 10);
        assert_eq!(f.questions.iter().filter(|q| q.label == Label::Yes).count(), 10);
        f.spec.validate().unwrap();
        for i in 0..10 {
            assert!(bias(i) > weight(i) && bias(i) < 2.0 * weight(i));
        }
    }
}
