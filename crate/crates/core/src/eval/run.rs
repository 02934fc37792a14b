use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use super::{
    mme_scores, normalize_answer, pope_metrics, Answer, EvalError, EvalRecord, MmeCategoryScore,
    PopeMetrics, Question, Result,
};
use crate::auxview::{build_auxiliary_view, BackgroundKind, MaskConfig};
use crate::decode::{decode_sequence, regular_decode, DecodingConfig};
use crate::providers::{LogitProvider, Result as ProviderResult, ViewHandle, ViewInput};
use crate::tensors::{load_png, ImageRgb, NormSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Regular,
    Vcd,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Regular => "regular",
            Method::Vcd => "vcd",
        })
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "regular" => Ok(Method::Regular),
            "vcd" => Ok(Method::Vcd),
            other => Err(format!("unknown method {other:?} (regular|vcd)")),
        }
    }
}

/// Everything that determines a run's output, recorded in report headers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub method: Method,
    pub mask: MaskConfig,
    pub decoding: DecodingConfig,
    pub norm: NormSpec,
    /// Attention heads to average; all when `None`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heads: Option<Vec<usize>>,
}

impl RunSettings {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            mask: MaskConfig::default(),
            decoding: DecodingConfig::default(),
            norm: NormSpec::CLIP,
            heads: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.decoding.validate()?;
        self.mask.validate()?;
        self.norm.validate().map_err(|e| EvalError::Config(e.to_string()))?;
        Ok(())
    }
}

/// Resolves dataset image ids to pixels.
pub trait ImageSource {
    fn load(&self, image_id: &str) -> Result<ImageRgb>;
}

/// PNG files under a root directory, named by image id.
#[derive(Debug, Clone)]
pub struct DirImages {
    root: PathBuf,
}

impl DirImages {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
}

impl ImageSource for DirImages {
    fn load(&self, image_id: &str) -> Result<ImageRgb> {
        load_png(self.root.join(image_id)).map_err(|source| EvalError::Image {
            id: image_id.to_string(),
            source,
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct MemoryImages(pub BTreeMap<String, ImageRgb>);

impl ImageSource for MemoryImages {
    fn load(&self, image_id: &str) -> Result<ImageRgb> {
        self.0.get(image_id).cloned().ok_or_else(|| EvalError::Image {
            id: image_id.to_string(),
            source: crate::tensors::TensorError::Image("no such image".into()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRun {
    pub records: Vec<EvalRecord>,
    pub metrics: PopeMetrics,
    pub failures: usize,
}

impl BenchmarkRun {
    fn from_records(records: Vec<EvalRecord>) -> Self {
        let failures = records.iter().filter(|r| r.error.is_some()).count();
        Self {
            metrics: pope_metrics(&records),
            records,
            failures,
        }
    }

    pub fn mme(&self) -> Result<BTreeMap<String, MmeCategoryScore>> {
        mme_scores(&self.records)
    }
}

type Views = (ViewHandle, Option<ViewHandle>);

struct Worker<'a> {
    provider: &'a mut dyn LogitProvider,
    images: &'a dyn ImageSource,
    settings: &'a RunSettings,
    views: HashMap<String, std::result::Result<Views, String>>,
}

impl Worker<'_> {
    fn prepare(&mut self, image_id: &str) -> Result<Views> {
        let image = self.images.load(image_id)?;
        let orig = self
            .provider
            .register_view(&ViewInput::new(&image).with_image_id(image_id))?;
        if self.settings.method == Method::Regular {
            return Ok((orig, None));
        }
        let attn = self.provider.fetch_attention(orig)?;
        let aux = build_auxiliary_view(
            &image,
            &attn,
            &self.settings.mask,
            &self.settings.norm,
            self.settings.heads.as_deref(),
        )?;
        debug!("{image_id}: auxiliary view replaces {:.3} of the image", aux.mask.coverage());
        let handle = self.provider.register_view(
            &ViewInput::new(&aux.view)
                .with_mask(&aux.mask)
                .with_image_id(image_id),
        )?;
        Ok((orig, Some(handle)))
    }

    fn views(&mut self, image_id: &str) -> std::result::Result<Views, String> {
        if let Some(v) = self.views.get(image_id) {
            return v.clone();
        }
        let v = self.prepare(image_id).map_err(|e| e.to_string());
        self.views.insert(image_id.to_string(), v.clone());
        v
    }

    fn answer(&mut self, index: usize, q: &Question) -> std::result::Result<String, String> {
        let (orig, aux) = self.views(&q.image_id)?;
        let prompt = self.provider.tokenize(&q.question).map_err(|e| e.to_string())?;
        let cfg = DecodingConfig {
            seed: self.settings.decoding.seed.wrapping_add(index as u64),
            ..self.settings.decoding
        };
        let transcript = match aux {
            Some(aux) => decode_sequence(self.provider, &prompt, (orig, aux), &cfg),
            None => regular_decode(self.provider, &prompt, orig, &cfg),
        }
        .map_err(|e| e.to_string())?;
        Ok(self.provider.detokenize(&transcript.tokens))
    }

    fn run(&mut self, offset: usize, questions: &[Question]) -> Vec<EvalRecord> {
        questions
            .iter()
            .enumerate()
            .map(|(i, q)| {
                let (prediction, error) = match self.answer(offset + i, q) {
                    Ok(p) => (p, None),
                    Err(e) => {
                        warn!("question {}: {e}", q.question_id);
                        (String::new(), Some(e))
                    }
                };
                let normalized = if error.is_some() {
                    Answer::Unparseable
                } else {
                    normalize_answer(&prediction)
                };
                EvalRecord {
                    question_id: q.question_id.clone(),
                    image_id: q.image_id.clone(),
                    question: q.question.clone(),
                    category: q.category.clone(),
                    label: q.label,
                    prediction,
                    normalized,
                    error,
                }
            })
            .collect()
    }
}

/// Answer every question on one session. Question `i` decodes with seed
/// `decoding.seed + i`, so results do not depend on how questions are split
/// across workers. Per-question failures are recorded and the run goes on.
pub fn run_benchmark(
    provider: &mut dyn LogitProvider,
    questions: &[Question],
    images: &dyn ImageSource,
    settings: &RunSettings,
) -> Result<BenchmarkRun> {
    settings.validate()?;
    let mut worker = Worker {
        provider,
        images,
        settings,
        views: HashMap::new(),
    };
    Ok(BenchmarkRun::from_records(worker.run(0, questions)))
}

/// Like [`run_benchmark`], with `jobs` sessions answering contiguous chunks
/// of the question list in parallel. Output is identical for any `jobs`.
pub fn run_benchmark_parallel<F>(
    open: &F,
    questions: &[Question],
    images: &(dyn ImageSource + Sync),
    settings: &RunSettings,
    jobs: usize,
) -> Result<BenchmarkRun>
where
    F: Fn() -> ProviderResult<Box<dyn LogitProvider + Send>> + Sync,
{
    settings.validate()?;
    let jobs = jobs.clamp(1, questions.len().max(1));
    let chunk = questions.len().div_ceil(jobs).max(1);
    let parts: Vec<Result<Vec<EvalRecord>>> = std::thread::scope(|s| {
        let handles: Vec<_> = questions
            .chunks(chunk)
            .enumerate()
            .map(|(k, qs)| {
                s.spawn(move || -> Result<Vec<EvalRecord>> {
                    let mut provider = open()?;
                    let mut worker = Worker {
                        provider: &mut *provider,
                        images,
                        settings,
                        views: HashMap::new(),
                    };
                    let records = worker.run(k * chunk, qs);
                    if let Err(e) = provider.close() {
                        warn!("closing session: {e}");
                    }
                    Ok(records)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("benchmark worker panicked"))
            .collect()
    });
    let mut records = Vec::with_capacity(questions.len());
    for p in parts {
        records.extend(p?);
    }
    Ok(BenchmarkRun::from_records(records))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub gamma: f64,
    pub background: BackgroundKind,
    pub metrics: PopeMetrics,
}

/// Run every `gamma x background` combination (gamma-major order).
pub fn sweep(
    base: &RunSettings,
    gammas: &[f64],
    backgrounds: &[BackgroundKind],
    mut run: impl FnMut(&RunSettings) -> Result<BenchmarkRun>,
) -> Result<Vec<(SweepRow, BenchmarkRun)>> {
    let mut out = Vec::with_capacity(gammas.len() * backgrounds.len());
    for &gamma in gammas {
        for &background in backgrounds {
            let mut s = base.clone();
            s.mask.gamma = gamma;
            s.mask.background = background;
            let result = run(&s)?;
            let row = SweepRow {
                gamma,
                background,
                metrics: result.metrics.clone(),
            };
            out.push((row, result));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricStats {
    pub mean: f64,
    /// Sample standard deviation (n - 1); 0 for a single run.
    pub sd: f64,
}

impl MetricStats {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, sd }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedAveraged {
    pub seeds: Vec<u64>,
    pub runs: Vec<PopeMetrics>,
    pub accuracy: MetricStats,
    pub precision: MetricStats,
    pub recall: MetricStats,
    pub f1: MetricStats,
    /// MME total per category, when requested.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub mme_total: BTreeMap<String, MetricStats>,
    /// Only one seed was given, so every `sd` is 0 by convention.
    pub single_seed: bool,
}

/// Repeat a run once per seed and summarize each metric.
pub fn seed_averaged_run(
    base: &RunSettings,
    seeds: &[u64],
    with_mme: bool,
    mut run: impl FnMut(&RunSettings) -> Result<BenchmarkRun>,
) -> Result<(SeedAveraged, Vec<BenchmarkRun>)> {
    if seeds.is_empty() {
        return Err(EvalError::Config("at least one seed is required".into()));
    }
    let mut results = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut s = base.clone();
        s.decoding.seed = seed;
        results.push(run(&s)?);
    }
    let runs: Vec<PopeMetrics> = results.iter().map(|r| r.metrics.clone()).collect();
    let stat = |f: fn(&PopeMetrics) -> f64| MetricStats::of(&runs.iter().map(f).collect::<Vec<_>>());
    let mut mme_total = BTreeMap::new();
    if with_mme {
        let mut per_cat: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for r in &results {
            for (cat, score) in r.mme()? {
                per_cat.entry(cat).or_default().push(score.total);
            }
        }
        mme_total = per_cat
            .into_iter()
            .map(|(c, v)| (c, MetricStats::of(&v)))
            .collect();
    }
    let summary = SeedAveraged {
        seeds: seeds.to_vec(),
        accuracy: stat(|m| m.accuracy),
        precision: stat(|m| m.precision),
        recall: stat(|m| m.recall),
        f1: stat(|m| m.f1),
        runs,
        mme_total,
        single_seed: seeds.len() == 1,
    };
    Ok((summary, results))
}
