//! The five pipeline stages behind the subcommands.
//!
//! Every stage works out of one run directory (`--out`): `generate` fills
//! it with split files, `train-base` writes `base.ckpt`, `adapt` appends
//! to `metrics.jsonl` and drops an adapted checkpoint, `analyze` writes
//! `analysis.csv`, and `report` renders `metrics.jsonl` into `report.txt`
//! and `report.csv`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use sisda::adapt::{
    adapt_with, evaluate_error_rate, train_supervised, Adam, Checkpoint, Method, Trainable,
    UtteranceTrace,
};
use sisda::align::classify_tokens;
use sisda::data::{generate_corpus, load_split, save_splits, DomainCorpus, SplitId};
use sisda::decode::beam_search;
use sisda::metrics::{append_records, error_rate_reduction, read_records, MetricsRecord};
use sisda::model::{init_adapters, init_params, ContextTemplate, ModelParams};
use sisda::saliency::{reliance_summary, saliency_map, RelianceSummary};
use sisda::seed;

use crate::config::ExperimentConfig;

/// What `--method` accepts: the identity baseline, the supervised
/// skyline, or any unsupervised adaptation method.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMethod {
    ZeroShot,
    Sft,
    Adaptation(Method),
}

impl FromStr for RunMethod {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero-shot" => Ok(RunMethod::ZeroShot),
            "sft" => Ok(RunMethod::Sft),
            other => match other.parse::<Method>() {
                Ok(method) => Ok(RunMethod::Adaptation(method)),
                Err(_) => {
                    let names: Vec<&str> = ["zero-shot", "sft"]
                        .into_iter()
                        .chain(Method::ALL.iter().map(|m| m.name()))
                        .collect();
                    bail!("unknown method {other:?}; expected one of {}", names.join(", "))
                }
            },
        }
    }
}

impl fmt::Display for RunMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunMethod::ZeroShot => f.write_str("zero-shot"),
            RunMethod::Sft => f.write_str("sft"),
            RunMethod::Adaptation(m) => write!(f, "{m}"),
        }
    }
}

pub fn base_checkpoint_path(out: &Path, flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf).unwrap_or_else(|| out.join("base.ckpt"))
}

fn metrics_path(out: &Path) -> PathBuf {
    out.join("metrics.jsonl")
}

fn load_corpus(out: &Path, split: SplitId) -> Result<DomainCorpus> {
    load_split(out, split)
        .with_context(|| format!("loading the {split} split from {}; run `generate` first", out.display()))
}

fn write_resolved_config(config: &ExperimentConfig, out: &Path) -> Result<()> {
    let path = out.join("config-resolved.toml");
    fs::write(&path, config.to_toml()).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Checkpoints store the trainable state; evaluation always runs on the
/// merged parameters.
fn effective_params(trainable: &Trainable) -> Result<ModelParams> {
    Ok(trainable.effective()?.into_owned())
}

/// One `trace-<method>.jsonl` line.
#[derive(Serialize)]
struct TraceLine<'a> {
    method: &'a str,
    epoch: usize,
    #[serde(flatten)]
    utterance: &'a UtteranceTrace,
}

fn epoch_checkpoint(
    trainable: &Trainable,
    out: &Path,
    method: &RunMethod,
    epoch: usize,
) -> Result<()> {
    let path = out.join(format!("adapted-{method}.epoch-{epoch}.ckpt"));
    trainable.to_checkpoint(None, epoch).save(&path)?;
    Ok(())
}

pub fn cmd_generate(config: &ExperimentConfig, out: &Path) -> Result<()> {
    let spec = config.corpus_spec();
    // Validates before the output directory is touched.
    let corpus = generate_corpus(&spec, config.seed)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_resolved_config(config, out)?;
    let written = save_splits(&corpus, out)?;
    for (split, path) in SplitId::ALL.iter().zip(&written) {
        let count = corpus.select(*split).count();
        println!("wrote {count} utterances to {}", path.display());
    }
    println!("corpus seed {}", config.seed);
    Ok(())
}

pub fn cmd_train_base(
    config: &ExperimentConfig,
    out: &Path,
    checkpoint_flag: Option<&Path>,
) -> Result<()> {
    let start = Instant::now();
    let train = load_corpus(out, SplitId::SourceTrain)?;
    let source_test = load_corpus(out, SplitId::SourceTest)?;
    let target_test = load_corpus(out, SplitId::TargetTest)?;
    let template = ContextTemplate::new(train.vocab());
    let model_config = config.model_config(template.vocab().size());

    let ckpt_path = base_checkpoint_path(out, checkpoint_flag);
    let (mut trainable, state, mut epochs_done) = if ckpt_path.exists() {
        let (trainable, state, done) = Trainable::from_checkpoint(Checkpoint::load(&ckpt_path)?);
        println!("resuming from {} after {done} epochs", ckpt_path.display());
        (trainable, state, done)
    } else {
        let params = init_params(&model_config, seed::derive(config.seed, "model/init"))?;
        (Trainable::Full(params), None, 0)
    };
    let mut optimizer = match state {
        Some(state) => Adam::resume(config.train_optimizer(), state),
        None => Adam::new(config.train_optimizer()),
    };

    let pairs = train.labeled_pairs(SplitId::SourceTrain);
    while epochs_done < config.train.epochs {
        let report = train_supervised(&mut trainable, &pairs, &template, 1, &mut optimizer)?;
        epochs_done += 1;
        println!(
            "epoch {epochs_done}/{} mean loss {:.4}",
            config.train.epochs,
            report.epochs[0].mean_loss
        );
    }

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_resolved_config(config, out)?;
    trainable
        .to_checkpoint(Some(optimizer.state()), epochs_done)
        .save(&ckpt_path)?;

    let decode = config.eval_decode();
    let params = effective_params(&trainable)?;
    let source_error = evaluate_error_rate(
        &params,
        &template,
        &source_test.labeled_pairs(SplitId::SourceTest),
        &decode,
    )?;
    let target_error = evaluate_error_rate(
        &params,
        &template,
        &target_test.labeled_pairs(SplitId::TargetTest),
        &decode,
    )?;
    println!(
        "source-test error {:.2}%  target-test error {:.2}%  gap {:.1}x",
        100.0 * source_error,
        100.0 * target_error,
        target_error / source_error.max(1e-12)
    );
    println!(
        "saved {} ({:.1} s)",
        ckpt_path.display(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

pub fn cmd_adapt(
    config: &ExperimentConfig,
    method_flag: Option<&str>,
    out: &Path,
    checkpoint_flag: Option<&Path>,
) -> Result<()> {
    let start = Instant::now();
    let method: RunMethod = method_flag.unwrap_or(&config.adapt.method).parse()?;

    let ckpt_path = base_checkpoint_path(out, checkpoint_flag);
    if !ckpt_path.exists() {
        bail!(
            "no checkpoint at {}; run `train-base` first or pass --checkpoint",
            ckpt_path.display()
        );
    }
    let (loaded, _, _) = Trainable::from_checkpoint(Checkpoint::load(&ckpt_path)?);
    let base_params = effective_params(&loaded)?;

    let adapt_split = load_corpus(out, SplitId::TargetAdapt)?;
    let target_test = load_corpus(out, SplitId::TargetTest)?;
    let source_test = load_corpus(out, SplitId::SourceTest)?;
    let template = ContextTemplate::new(adapt_split.vocab());
    if base_params.config.vocab_size != template.vocab().size() {
        bail!(
            "checkpoint vocabulary size {} does not match the corpus ({})",
            base_params.config.vocab_size,
            template.vocab().size()
        );
    }

    let mut trainable = match config.adapter_config() {
        Some(adapter) if method != RunMethod::ZeroShot => Trainable::Adapter {
            adapters: init_adapters(
                &base_params.config,
                &adapter,
                seed::derive(config.seed, "adapter/init"),
            )?,
            base: base_params,
        },
        _ => Trainable::Full(base_params),
    };

    let mut mean_quality = None;
    match method {
        RunMethod::ZeroShot => {}
        RunMethod::Sft => {
            let pairs = adapt_split.labeled_pairs(SplitId::TargetAdapt);
            let mut optimizer = Adam::new(config.adapt_config()?.optimizer);
            for epoch in 1..=config.adapt.epochs {
                let report = train_supervised(&mut trainable, &pairs, &template, 1, &mut optimizer)?;
                println!("epoch {epoch} mean loss {:.4}", report.epochs[0].mean_loss);
                epoch_checkpoint(&trainable, out, &method, epoch)?;
            }
        }
        RunMethod::Adaptation(m) => {
            let view = adapt_split.unlabeled(SplitId::TargetAdapt);
            let report = adapt_with(
                &mut trainable,
                m,
                &view,
                &template,
                &config.adapt_config()?,
                |epoch, trainable| {
                    println!(
                        "epoch {} updates {} skipped {} mean loss {}",
                        epoch.epoch + 1,
                        epoch.updates,
                        epoch.skipped,
                        epoch
                            .mean_loss
                            .map(|l| format!("{l:.4}"))
                            .unwrap_or_else(|| "-".into())
                    );
                    let path = out.join(format!("adapted-{m}.epoch-{}.ckpt", epoch.epoch + 1));
                    trainable.to_checkpoint(None, epoch.epoch + 1).save(&path)
                },
            )?;
            mean_quality = report.final_mean_quality();

            let trace_path = out.join(format!("trace-{m}.jsonl"));
            let mut lines = String::new();
            for epoch in &report.epochs {
                for utterance in &epoch.utterances {
                    let line = TraceLine {
                        method: m.name(),
                        epoch: epoch.epoch + 1,
                        utterance,
                    };
                    lines.push_str(&serde_json::to_string(&line)?);
                    lines.push('\n');
                }
            }
            fs::write(&trace_path, lines)
                .with_context(|| format!("writing {}", trace_path.display()))?;
        }
    }

    let decode = config.eval_decode();
    let params = effective_params(&trainable)?;
    let target_error = evaluate_error_rate(
        &params,
        &template,
        &target_test.labeled_pairs(SplitId::TargetTest),
        &decode,
    )?;
    let source_error = evaluate_error_rate(
        &params,
        &template,
        &source_test.labeled_pairs(SplitId::SourceTest),
        &decode,
    )?;

    // WERR against a zero-shot row already on disk for the same seed.
    let metrics = metrics_path(out);
    let anchor = if metrics.exists() {
        read_records(&metrics)?
            .into_iter()
            .filter(|r| {
                r.method == "zero-shot" && r.split == "target-test" && r.seed == config.seed
            })
            .next_back()
    } else {
        None
    };
    let reduction = match (&method, &anchor) {
        (RunMethod::ZeroShot, _) | (_, None) => None,
        (_, Some(anchor)) => error_rate_reduction(anchor.token_error_rate, target_error),
    };

    let records = vec![
        MetricsRecord {
            method: method.to_string(),
            split: SplitId::TargetTest.to_string(),
            token_error_rate: target_error,
            error_rate_reduction: reduction,
            mean_quality,
            wall_clock_seconds: None,
            seed: config.seed,
        },
        MetricsRecord {
            method: method.to_string(),
            split: SplitId::SourceTest.to_string(),
            token_error_rate: source_error,
            error_rate_reduction: None,
            mean_quality: None,
            wall_clock_seconds: None,
            seed: config.seed,
        },
    ];
    append_records(&metrics, &records)?;

    if method != RunMethod::ZeroShot {
        let adapted_path = out.join(format!("adapted-{method}.ckpt"));
        trainable
            .to_checkpoint(None, config.adapt.epochs)
            .save(&adapted_path)?;
        println!("saved {}", adapted_path.display());
    }
    print!(
        "{method}: target-test error {:.2}%  source-test error {:.2}%",
        100.0 * target_error,
        100.0 * source_error
    );
    if let Some(r) = reduction {
        print!("  werr {:+.1}%", 100.0 * r);
    }
    println!("  ({:.1} s)", start.elapsed().as_secs_f64());
    Ok(())
}

/// One `analysis.csv` row: per-utterance reliance means bucketed by token
/// outcome. Empty cells mean the bucket had no tokens.
struct AnalysisRow {
    id: String,
    summary: RelianceSummary,
}

fn csv_cell(value: Option<f64>) -> String {
    value.map(|v| v.to_string()).unwrap_or_default()
}

fn normalized_shares(summary: &RelianceSummary) -> (Option<f64>, Option<f64>) {
    match (summary.mean_correct(), summary.mean_error()) {
        (Some(c), Some(e)) if c + e > 0.0 => (Some(c / (c + e)), Some(e / (c + e))),
        _ => (None, None),
    }
}

pub fn cmd_analyze(
    config: &ExperimentConfig,
    out: &Path,
    checkpoint_flag: Option<&Path>,
) -> Result<()> {
    let start = Instant::now();
    let ckpt_path = base_checkpoint_path(out, checkpoint_flag);
    if !ckpt_path.exists() {
        bail!(
            "no checkpoint at {}; run `train-base` first or pass --checkpoint",
            ckpt_path.display()
        );
    }
    let (trainable, _, _) = Trainable::from_checkpoint(Checkpoint::load(&ckpt_path)?);
    let params = effective_params(&trainable)?;

    let eval = load_corpus(out, SplitId::TargetTest)?;
    let template = ContextTemplate::new(eval.vocab());
    let decode = config.eval_decode();
    let layer = config.adapt.saliency_layer.resolve()?;

    let mut rows = Vec::new();
    let mut pooled = RelianceSummary::default();
    for utt in eval.select(SplitId::TargetTest) {
        let hypothesis = beam_search(&params, &template, &utt.input, &decode)?
            .into_iter()
            .next()
            .expect("beam search yields at least one hypothesis");
        let outcomes = classify_tokens(hypothesis.content_tokens(), &utt.reference);
        let (tokens, layout) = template.scoring_context(&utt.input, hypothesis.tokens())?;
        let map = saliency_map(&params, &tokens, &layout, layer)?;
        let profile = map.prompt_reliance(hypothesis.content_len())?;
        let summary = reliance_summary(&profile, &outcomes);
        pooled.merge(&summary);
        rows.push(AnalysisRow {
            id: utt.id.clone(),
            summary,
        });
    }

    let csv_path = out.join("analysis.csv");
    let mut csv = String::from(
        "id,correct_count,error_count,mean_reliance_correct,mean_reliance_error,share_correct,share_error\n",
    );
    let mut push_row = |id: &str, s: &RelianceSummary| {
        let (share_c, share_e) = normalized_shares(s);
        csv.push_str(&format!(
            "{id},{},{},{},{},{},{}\n",
            s.correct_count,
            s.error_count,
            csv_cell(s.mean_correct()),
            csv_cell(s.mean_error()),
            csv_cell(share_c),
            csv_cell(share_e),
        ));
    };
    for row in &rows {
        push_row(&row.id, &row.summary);
    }
    push_row("ALL", &pooled);
    fs::write(&csv_path, csv).with_context(|| format!("writing {}", csv_path.display()))?;

    let with_errors = rows.iter().filter(|r| r.summary.error_count > 0).count();
    println!(
        "analyzed {} utterances ({} with error tokens) -> {}",
        rows.len(),
        with_errors,
        csv_path.display()
    );
    match (pooled.mean_correct(), pooled.mean_error(), normalized_shares(&pooled)) {
        (Some(c), Some(e), (_, Some(share_e))) => {
            println!(
                "pooled mean reliance: correct {c:.4}  error {e:.4}  normalized error share {share_e:.4}"
            );
        }
        _ => println!("pooled mean reliance: a bucket is empty; shares undefined"),
    }
    println!("({:.1} s)", start.elapsed().as_secs_f64());
    Ok(())
}

pub fn cmd_report(out: &Path) -> Result<()> {
    if !out.is_dir() {
        bail!("output dir {} does not exist", out.display());
    }
    let metrics = metrics_path(out);
    if !metrics.exists() {
        bail!("no metrics at {}; run `adapt` first", metrics.display());
    }
    let records = read_records(&metrics)?;

    let anchor_for = |record: &MetricsRecord| -> Option<f64> {
        if record.method == "zero-shot" {
            return None;
        }
        records
            .iter()
            .filter(|r| {
                r.method == "zero-shot" && r.split == record.split && r.seed == record.seed
            })
            .next_back()
            .map(|r| r.token_error_rate)
    };

    let header = ["method", "split", "ter", "werr", "mean_q", "seed"];
    let mut table: Vec<[String; 6]> = Vec::with_capacity(records.len());
    let mut csv = String::from("method,split,token_error_rate,werr,mean_quality,seed\n");
    for record in &records {
        let werr = anchor_for(record)
            .and_then(|anchor| error_rate_reduction(anchor, record.token_error_rate));
        table.push([
            record.method.clone(),
            record.split.clone(),
            format!("{:.2}%", 100.0 * record.token_error_rate),
            werr.map(|w| format!("{:+.1}%", 100.0 * w)).unwrap_or_default(),
            record
                .mean_quality
                .map(|q| format!("{q:.4}"))
                .unwrap_or_default(),
            record.seed.to_string(),
        ]);
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            record.method,
            record.split,
            record.token_error_rate,
            csv_cell(werr),
            csv_cell(record.mean_quality),
            record.seed,
        ));
    }

    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in &table {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let render = |cells: &[String]| -> String {
        let mut line = String::new();
        for (i, (cell, w)) in cells.iter().zip(&widths).enumerate() {
            if i > 0 {
                line.push_str("  ");
            }
            line.push_str(&format!("{cell:<w$}"));
        }
        line.trim_end().to_string()
    };
    let header_cells: Vec<String> = header.iter().map(|h| h.to_string()).collect();
    let mut text = render(&header_cells);
    text.push('\n');
    for row in &table {
        text.push_str(&render(row));
        text.push('\n');
    }

    fs::write(out.join("report.txt"), &text)?;
    fs::write(out.join("report.csv"), &csv)?;
    print!("{text}");
    println!("wrote {} and report.csv", out.join("report.txt").display());
    Ok(())
}
