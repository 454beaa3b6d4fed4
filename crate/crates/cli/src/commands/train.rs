use crate::manifest::ManifestBuilder;
use anyhow::{Context, Result};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use textmark_core::checkpoint;
use textmark_core::corpus::{build_vocabulary, load_jsonl, Corpus};
use textmark_core::training::{train, write_loss_trace, TrainConfig};
use textmark_core::wm_model::{ModelConfig, WatermarkModel};

#[allow(clippy::too_many_arguments)]
pub fn run(
    config: Option<PathBuf>,
    model_config: Option<PathBuf>,
    corpus_path: PathBuf,
    out: PathBuf,
    seed: Option<u64>,
    loss_csv: Option<PathBuf>,
    vocab_out: Option<PathBuf>,
) -> Result<ExitCode> {
    let mut manifest = ManifestBuilder::new("train");
    let mut cfg: TrainConfig = match &config {
        Some(path) => {
            manifest.input(path);
            TrainConfig::from_json(
                &std::fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?,
            )?
        }
        None => TrainConfig::default(),
    };
    let mut mc: ModelConfig = match &model_config {
        Some(path) => {
            manifest.input(path);
            serde_json::from_str(
                &std::fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?,
            )
            .context("parsing model config")?
        }
        None => ModelConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
        mc.seed = s;
    }

    let records = load_jsonl(
        std::fs::File::open(&corpus_path)
            .with_context(|| format!("opening {}", corpus_path.display()))?,
    )?;
    let corpus = Corpus::new(records, 0.8, cfg.seed)?;
    // the configured vocab_size caps the vocabulary; smaller corpora yield
    // smaller models
    let vocab = build_vocabulary(&corpus.records, mc.vocab_size)?;
    mc.vocab_size = vocab.size();
    mc.validate()?;
    let model = WatermarkModel::new(mc.clone())?;

    let (trained, trace) = train(model, &corpus, &vocab, &cfg)?;

    let file = std::fs::File::create(&out).with_context(|| format!("writing {}", out.display()))?;
    checkpoint::save(&trained, &vocab, std::io::BufWriter::new(file))?;

    let csv_path = loss_csv.unwrap_or_else(|| PathBuf::from(format!("{}.loss.csv", out.display())));
    let csv = std::fs::File::create(&csv_path)?;
    write_loss_trace(&trace, std::io::BufWriter::new(csv))?;

    if let Some(vp) = &vocab_out {
        let vf = std::fs::File::create(vp)?;
        vocab.write_to(std::io::BufWriter::new(vf))?;
        manifest.output(vp as &Path);
    }

    if let Some(last) = trace.last() {
        eprintln!(
            "trained {} epochs: L_S {:.4}, L_M {:.4}, held-out WER {}",
            trace.len(),
            last.semantic_loss,
            last.message_loss,
            last.heldout_wer.map(|w| format!("{w:.4}")).unwrap_or_else(|| "n/a".into()),
        );
    }

    manifest
        .config(serde_json::json!({ "train": cfg, "model": mc }))
        .seed("train", cfg.seed)
        .seed("model", mc.seed)
        .input(&corpus_path)
        .output(&out)
        .output(&csv_path)
        .write()?;
    Ok(ExitCode::SUCCESS)
}
