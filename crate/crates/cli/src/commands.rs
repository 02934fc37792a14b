use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::net::TcpListener;
use std::path::Path;
use std::time::Duration;

use anyhow::{anyhow, Context};
use log::{info, warn};
use oavcd::auxview::{build_auxiliary_view, AuxiliaryView, BackgroundKind};
use oavcd::decode::{decode_sequence, regular_decode, DecodeError};
use oavcd::eval::fixture::mini_pope;
use oavcd::eval::{
    apply_label_overrides, load_label_overrides, load_questions, mme_scores, read_report,
    run_benchmark_parallel, seed_averaged_run, write_report, Answer, BenchmarkRun, DirImages,
    EvalError, EvalRecord, Method, Report, ReportHeader, ReportSummary, RunSettings,
};
use oavcd::providers::{
    serve_tcp, LogitProvider, MockModelSpec, MockProvider, ProviderSource, ViewInput, ENDPOINT_ENV,
};
use oavcd::tensors::{
    load_png, mask_to_png, read_tensor_file, saliency_heatmap_png, save_view_png, write_tensor_file,
    AttentionStack, ImageRgb, TensorPayload,
};

use crate::args::{
    AuxviewArgs, Bench, DecodeArgs, EvalArgs, FixtureArgs, FixtureKind, InspectArgs, MaskArgs,
    ProviderArgs, ServeMockArgs,
};
use crate::{CmdResult, Failure};

fn load_image(path: &Path) -> Result<ImageRgb, Failure> {
    load_png(path)
        .with_context(|| format!("reading image {}", path.display()))
        .map_err(Failure::usage)
}

fn build_view(image: &ImageRgb, attn: &AttentionStack, mask: &MaskArgs) -> Result<AuxiliaryView, Failure> {
    build_auxiliary_view(image, attn, &mask.mask_config(), &mask.norm, mask.heads.as_deref())
        .context("building auxiliary view")
        .map_err(Failure::usage)
}

pub fn auxview(a: AuxviewArgs) -> CmdResult {
    let image = load_image(&a.image)?;
    let attn = read_tensor_file(&a.attn)
        .and_then(TensorPayload::into_attention)
        .with_context(|| format!("reading attention {}", a.attn.display()))
        .map_err(Failure::usage)?;
    let aux = build_view(&image, &attn, &a.mask)?;

    std::fs::create_dir_all(&a.out_dir)?;
    let out = |name: &str| a.out_dir.join(name);
    save_view_png(&aux.view, out("view.png"))?;
    write_tensor_file(out("saliency.sal"), &aux.saliency.clone().into())?;
    saliency_heatmap_png(&aux.saliency, out("saliency.png"))?;
    write_tensor_file(out("mask.msk"), &aux.mask.clone().into())?;
    mask_to_png(&aux.mask, out("mask.png"))?;
    for name in ["view.png", "saliency.sal", "saliency.png", "mask.msk", "mask.png"] {
        println!("wrote {}", out(name).display());
    }
    println!("coverage {:.4}", aux.mask.coverage());
    Ok(())
}

fn provider_source(p: &ProviderArgs) -> Result<(ProviderSource, String), Failure> {
    let timeout = Duration::from_secs_f64(p.timeout);
    let text = match &p.provider {
        Some(t) => t.clone(),
        None => match std::env::var(ENDPOINT_ENV) {
            Ok(ep) if !ep.is_empty() => format!("remote:{ep}"),
            _ => {
                return Err(Failure::usage(anyhow!(
                    "no provider: pass --provider mock:SPEC|remote:HOST:PORT or set {ENDPOINT_ENV}"
                )))
            }
        },
    };
    if let Some(path) = text.strip_prefix("mock:") {
        let spec = MockModelSpec::load(path)
            .and_then(|s| s.validate().map(|()| s))
            .with_context(|| format!("loading mock spec {path}"))
            .map_err(Failure::usage)?;
        Ok((ProviderSource::Mock(spec), text))
    } else if let Some(endpoint) = text.strip_prefix("remote:") {
        Ok((
            ProviderSource::Remote {
                endpoint: endpoint.to_string(),
                timeout,
            },
            text,
        ))
    } else {
        Err(Failure::usage(anyhow!(
            "provider {text:?} must start with mock: or remote:"
        )))
    }
}

fn decode_failure(e: DecodeError) -> Failure {
    match e {
        DecodeError::Config(_) => Failure::usage(e),
        other => other.into(),
    }
}

pub fn decode(a: DecodeArgs) -> CmdResult {
    let (source, _) = provider_source(&a.provider)?;
    let image = load_image(&a.image)?;
    let cfg = a.decoding.config();
    cfg.validate().map_err(Failure::usage)?;
    a.mask.mask_config().validate().map_err(Failure::usage)?;
    let image_id = match &a.image_id {
        Some(id) => id.clone(),
        None => a
            .image
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
    };

    let mut provider = source.open().context("opening provider")?;
    let prompt = provider.tokenize(&a.prompt).map_err(Failure::usage)?;
    let orig = provider.register_view(&ViewInput::new(&image).with_image_id(&image_id))?;
    let transcript = match a.method {
        Method::Regular => regular_decode(&mut *provider, &prompt, orig, &cfg),
        Method::Vcd => {
            let attn = provider.fetch_attention(orig)?;
            let aux = build_view(&image, &attn, &a.mask)?;
            info!("auxiliary view replaces {:.4} of the image", aux.mask.coverage());
            let h = provider.register_view(
                &ViewInput::new(&aux.view)
                    .with_mask(&aux.mask)
                    .with_image_id(&image_id),
            )?;
            decode_sequence(&mut *provider, &prompt, (orig, h), &cfg)
        }
    }
    .map_err(decode_failure)?;
    println!("{}", provider.detokenize(&transcript.tokens));
    if let Some(path) = &a.trace_out {
        let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        transcript.write_trace_jsonl(BufWriter::new(f))?;
    }
    provider.close()?;
    Ok(())
}

fn eval_failure(e: EvalError) -> Failure {
    match e {
        EvalError::Parse { .. } | EvalError::Structure(_) | EvalError::Config(_) | EvalError::AuxView(_) => {
            Failure::usage(e)
        }
        EvalError::Decode(DecodeError::Config(_)) => Failure::usage(e),
        other => other.into(),
    }
}

fn report_name(bench: Bench, method: Method, setting: Option<(f64, BackgroundKind)>, seed: Option<u64>) -> String {
    let mut name = format!("{}-{method}", bench.name());
    if let Some((g, bg)) = setting {
        let _ = write!(name, "-g{g}-{bg}");
    }
    if let Some(s) = seed {
        let _ = write!(name, "-s{s}");
    }
    name + ".jsonl"
}

fn mme_sum(run: &BenchmarkRun) -> Option<f64> {
    run.mme().ok().map(|m| m.values().map(|s| s.total).sum())
}

pub fn eval(a: EvalArgs) -> CmdResult {
    let loaded = load_questions(&a.questions, a.bench.format()).map_err(eval_failure)?;
    let mut questions = loaded.questions;
    if let Some(path) = &a.labels {
        let overrides = load_label_overrides(path).map_err(eval_failure)?;
        let (changed, warnings) = apply_label_overrides(&mut questions, &overrides);
        for w in warnings {
            warn!("{w}");
        }
        info!("label overrides changed {changed} questions");
    }
    if questions.is_empty() {
        return Err(Failure::usage(anyhow!("{} holds no questions", a.questions.display())));
    }
    if a.bench == Bench::Mme {
        // Structural check before spending any model time.
        let dry: Vec<EvalRecord> = questions
            .iter()
            .map(|q| EvalRecord {
                question_id: q.question_id.clone(),
                image_id: q.image_id.clone(),
                question: String::new(),
                category: q.category.clone(),
                label: q.label,
                prediction: String::new(),
                normalized: Answer::Unparseable,
                error: None,
            })
            .collect();
        mme_scores(&dry).map_err(eval_failure)?;
    }

    let (source, provider_label) = provider_source(&a.provider)?;
    let open = || source.open();
    let images = DirImages::new(&a.images_dir);
    let gammas = if a.sweep_gamma.is_empty() { vec![a.mask.gamma] } else { a.sweep_gamma.clone() };
    let backgrounds = if a.sweep_background.is_empty() {
        vec![a.mask.background]
    } else {
        a.sweep_background.clone()
    };
    let seeds = if a.seeds.is_empty() { vec![a.decoding.seed] } else { a.seeds.clone() };
    let swept = gammas.len() > 1 || backgrounds.len() > 1;

    let base = RunSettings {
        method: Method::Vcd,
        mask: a.mask.mask_config(),
        decoding: a.decoding.config(),
        norm: a.mask.norm,
        heads: a.mask.heads.clone(),
    };
    base.validate().map_err(eval_failure)?;
    if let Some(dir) = &a.report_out {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }

    let mut table = String::new();
    let mme_col = a.bench == Bench::Mme;
    let _ = write!(table, "method\tgamma\tbackground\tseed\taccuracy\tprecision\trecall\tf1\tfailures");
    if mme_col {
        table.push_str("\tmme_total");
    }
    table.push('\n');

    for &method in &a.method {
        let combos: Vec<Option<(f64, BackgroundKind)>> = match method {
            Method::Regular => vec![None],
            Method::Vcd => gammas
                .iter()
                .flat_map(|&g| backgrounds.iter().map(move |&b| Some((g, b))))
                .collect(),
        };
        for combo in combos {
            let mut settings = base.clone();
            settings.method = method;
            if let Some((g, b)) = combo {
                settings.mask.gamma = g;
                settings.mask.background = b;
            }
            let (avg, runs) = seed_averaged_run(&settings, &seeds, false, |s| {
                run_benchmark_parallel(&open, &questions, &images, s, a.jobs as usize)
            })
            .map_err(eval_failure)?;
            let (g_col, b_col) = match combo {
                Some((g, b)) => (g.to_string(), b.to_string()),
                None => ("-".into(), "-".into()),
            };
            for (&seed, run) in seeds.iter().zip(&runs) {
                let m = &run.metrics;
                let _ = write!(
                    table,
                    "{method}\t{g_col}\t{b_col}\t{seed}\t{:.2}\t{:.2}\t{:.2}\t{:.2}\t{}",
                    m.accuracy, m.precision, m.recall, m.f1, run.failures
                );
                if mme_col {
                    let _ = write!(table, "\t{:.2}", mme_sum(run).unwrap_or(f64::NAN));
                }
                table.push('\n');
                if let Some(dir) = &a.report_out {
                    let setting = combo.filter(|_| swept);
                    let seed_tag = (seeds.len() > 1).then_some(seed);
                    let mut s = settings.clone();
                    s.decoding.seed = seed;
                    let report = Report {
                        header: ReportHeader::new(
                            a.bench.name(),
                            &a.questions.display().to_string(),
                            &provider_label,
                            s,
                            run.records.len(),
                        ),
                        records: run.records.clone(),
                        summary: ReportSummary {
                            pope: run.metrics.clone(),
                            mme: if mme_col { run.mme().ok() } else { None },
                            failures: run.failures,
                        },
                    };
                    let path = dir.join(report_name(a.bench, method, setting, seed_tag));
                    let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
                    write_report(BufWriter::new(f), &report).map_err(eval_failure)?;
                }
            }
            if seeds.len() > 1 {
                let _ = write!(
                    table,
                    "{method}\t{g_col}\t{b_col}\tmean±sd\t{:.2}±{:.2}\t{:.2}±{:.2}\t{:.2}±{:.2}\t{:.2}±{:.2}\t-",
                    avg.accuracy.mean,
                    avg.accuracy.sd,
                    avg.precision.mean,
                    avg.precision.sd,
                    avg.recall.mean,
                    avg.recall.sd,
                    avg.f1.mean,
                    avg.f1.sd
                );
                if mme_col {
                    let totals: Vec<f64> = runs.iter().filter_map(mme_sum).collect();
                    let st = oavcd::eval::MetricStats::of(&totals);
                    let _ = write!(table, "\t{:.2}±{:.2}", st.mean, st.sd);
                }
                table.push('\n');
            }
        }
    }
    print!("{table}");
    if let Some(dir) = &a.report_out {
        std::fs::write(dir.join("summary.tsv"), &table)?;
    }
    Ok(())
}

fn stats(values: &[f32]) -> String {
    let min = values.iter().copied().fold(f32::INFINITY, f32::min);
    let max = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let sum: f64 = values.iter().map(|&v| f64::from(v)).sum();
    format!(
        "min {min:.6} max {max:.6} mean {:.6} sum {sum:.6}",
        sum / values.len() as f64
    )
}

pub fn inspect(a: InspectArgs) -> CmdResult {
    let mut magic = [0u8; 8];
    let n = File::open(&a.path)
        .and_then(|mut f| f.read(&mut magic))
        .with_context(|| format!("opening {}", a.path.display()))
        .map_err(Failure::usage)?;
    let magic = &magic[..n];
    if magic.starts_with(b"ATN1") || magic.starts_with(b"SAL1") || magic.starts_with(b"MSK1") {
        let payload = read_tensor_file(&a.path).map_err(Failure::usage)?;
        match payload {
            TensorPayload::Attention(t) => {
                println!("attention heads {} grid {}x{}", t.heads(), t.grid_h(), t.grid_w());
                for h in 0..t.heads() {
                    println!("head {h}: {}", stats(t.head(h)));
                }
            }
            TensorPayload::Saliency(s) => {
                println!("saliency {}x{}", s.height(), s.width());
                println!("{}", stats(s.data()));
            }
            TensorPayload::Mask(m) => {
                println!("mask {}x{}", m.height(), m.width());
                println!("masked {} of {} ({:.4})", m.popcount(), m.bits().len(), m.coverage());
            }
        }
    } else if magic.starts_with(b"\x89PNG") {
        let img = load_image(&a.path)?;
        println!("png {}x{} digest {}", img.height(), img.width(), hex(&img.digest()));
    } else {
        let f = File::open(&a.path)?;
        let r = read_report(BufReader::new(f), &a.path.display().to_string())
            .map_err(|e| Failure::usage(anyhow!("not a tensor, PNG or report: {e}")))?;
        let h = &r.header;
        println!(
            "report {} v{} bench {} method {} questions {}",
            h.format, h.version, h.bench, h.settings.method, h.questions
        );
        let m = &r.summary.pope;
        println!(
            "accuracy {:.2} precision {:.2} recall {:.2} f1 {:.2} unparseable {} failures {}",
            m.accuracy, m.precision, m.recall, m.f1, m.unparseable, r.summary.failures
        );
        if let Some(mme) = &r.summary.mme {
            for (cat, s) in mme {
                println!("{cat}: accuracy {:.2} accuracy+ {:.2} total {:.2}", s.accuracy, s.accuracy_plus, s.total);
            }
        }
    }
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn fixture(a: FixtureArgs) -> CmdResult {
    match a.kind {
        FixtureKind::MiniPope => {
            let paths = mini_pope().write(&a.out_dir).map_err(eval_failure)?;
            println!("spec {}", paths.spec.display());
            println!("questions {}", paths.questions.display());
            println!("images {}", paths.images_dir.display());
        }
    }
    Ok(())
}

pub fn serve_mock(a: ServeMockArgs) -> CmdResult {
    let spec = MockModelSpec::load(&a.spec)
        .and_then(|s| s.validate().map(|()| s))
        .with_context(|| format!("loading mock spec {}", a.spec.display()))
        .map_err(Failure::usage)?;
    let listener = TcpListener::bind(&a.listen).with_context(|| format!("binding {}", a.listen))?;
    println!("listening on {}", listener.local_addr()?);
    std::io::stdout().flush()?;
    serve_tcp(listener, move || -> oavcd::providers::Result<Box<dyn LogitProvider + Send>> {
        Ok(Box::new(MockProvider::open(spec.clone())?))
    })?;
    Ok(())
}
