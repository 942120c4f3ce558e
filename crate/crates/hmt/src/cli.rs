//! Operator surface: `train`, `eval`, `gradcheck`, `sweep`, `hist`, `qa`,
//! `data`, `report`. Each subcommand reads an optional `--config FILE` plus
//! `--key value` overrides, runs one job, and writes artifacts (CSV tables,
//! checkpoints, token files) into `out_dir`, each stamped with the resolved
//! configuration and its content hash.
//!
//! Exit codes: 0 success, 1 assertion/acceptance failure, 2 config error,
//! 3 data error.

use std::path::{Path, PathBuf};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::RunConfig;
use crate::datagen::{
    self, build_qa_sequences, byte_tokenize, concat_samples, dilate_sample, gen_planted_recall,
    interleave_samples, read_token_file, synth_qa_tuples, write_token_file, Corpus,
};
use crate::error::{HmtError, Result};
use crate::evalsuite::{
    self, ablate_partial_summarization, grad_stability_report, gradcheck_suite, perplexity,
    qa_eval, recall_histogram, runtime_breakdown, sweep_cache, sweep_sensory, TrainProtocol,
};
use crate::memory::HmtConfig;
use crate::model::HmtModel;
use crate::recurrence::{train_stage1, train_stage2, TrainConfig};

pub fn exit_code_for(err: &HmtError) -> i32 {
    match err {
        HmtError::Config(_) => 2,
        HmtError::Data(_) => 3,
        HmtError::Io(_) | HmtError::Format { .. } => 3,
        _ => 1,
    }
}

/// Entry point used by the `hmt` binary: parse argv, dispatch, map errors.
pub fn main_with_args(args: &[String]) -> i32 {
    match dispatch(args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

fn dispatch(args: &[String]) -> Result<()> {
    if args.is_empty() {
        print_usage();
        return Err(HmtError::Config("missing subcommand".to_string()));
    }
    let sub = args[0].as_str();
    let (positional, cfg) = parse_args(&args[1..])?;
    run(sub, &positional, cfg)
}

fn print_usage() {
    eprintln!(
        "usage: hmt <train|eval|gradcheck|sweep|hist|qa|data|report> \
         [kind] [--config FILE] [--key value ...]"
    );
    eprintln!("  sweep kinds: cache | sensory | depth");
    eprintln!("  data kinds:  concat | interleave | dilate | planted | qa-build");
}

/// Split argv into positionals and a resolved RunConfig.
fn parse_args(args: &[String]) -> Result<(Vec<String>, RunConfig)> {
    let mut positional = Vec::new();
    let mut config_path: Option<String> = None;
    let mut overrides: Vec<(String, String)> = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let a = &args[i];
        if let Some(key) = a.strip_prefix("--") {
            let value = args.get(i + 1).ok_or_else(|| {
                HmtError::Config(format!("flag --{key} is missing a value"))
            })?;
            if key == "config" {
                config_path = Some(value.clone());
            } else {
                overrides.push((key.to_string(), value.clone()));
            }
            i += 2;
        } else {
            positional.push(a.clone());
            i += 1;
        }
    }
    let cfg = match config_path {
        Some(p) => RunConfig::parse(Path::new(&p), &overrides)?,
        None => {
            let pairs: Vec<(String, String, usize)> = overrides
                .into_iter()
                .map(|(k, v)| (k, v, 0))
                .collect();
            RunConfig::from_pairs(&pairs)?
        }
    };
    Ok((positional, cfg))
}

/// Run one subcommand against a resolved configuration.
pub fn run(sub: &str, positional: &[String], cfg: RunConfig) -> Result<()> {
    match sub {
        "train" => cmd_train(&cfg),
        "eval" => cmd_eval(&cfg),
        "gradcheck" => cmd_gradcheck(&cfg),
        "sweep" => cmd_sweep(positional.first().map(|s| s.as_str()), &cfg),
        "hist" => cmd_hist(&cfg),
        "qa" => cmd_qa(&cfg),
        "data" => cmd_data(positional.first().map(|s| s.as_str()), &cfg),
        "report" => cmd_report(&cfg),
        other => {
            print_usage();
            Err(HmtError::Config(format!("unknown subcommand {other:?}")))
        }
    }
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg
        .out_dir
        .as_ref()
        .ok_or_else(|| HmtError::Config("out_dir is required for this command".to_string()))?;
    let path = PathBuf::from(dir);
    std::fs::create_dir_all(&path)?;
    Ok(path)
}

fn config_comments(cfg: &RunConfig) -> Vec<String> {
    let mut out: Vec<String> = cfg
        .to_text()
        .lines()
        .map(|l| l.to_string())
        .collect();
    out.push(format!("config_hash = {:016x}", cfg.content_hash()));
    out
}

/// Load a token stream: `.hmtd` token files by magic, anything else as text.
fn load_stream(path: &str) -> Result<Vec<u16>> {
    let p = Path::new(path);
    let bytes = std::fs::read(p)?;
    if bytes.len() >= 4 && &bytes[0..4] == datagen::TOKEN_FILE_MAGIC {
        return read_token_file(p);
    }
    Ok(bytes.iter().map(|&b| b as u16).collect())
}

fn train_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let path = cfg
        .train_path
        .as_ref()
        .ok_or_else(|| HmtError::Config("train_path is required".to_string()))?;
    Corpus::from_text_file(Path::new(path))
}

fn eval_stream(cfg: &RunConfig) -> Result<Vec<u16>> {
    let path = cfg
        .eval_path
        .as_ref()
        .or(cfg.train_path.as_ref())
        .ok_or_else(|| HmtError::Config("eval_path (or train_path) is required".to_string()))?;
    load_stream(path)
}

fn stage1_path(dir: &Path) -> PathBuf {
    dir.join("checkpoint_stage1.hmt")
}

fn stage2_path(dir: &Path) -> PathBuf {
    dir.join("checkpoint_stage2.hmt")
}

/// Rebuild a model from a checkpoint's embedded config and tensors.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<(HmtModel, RunConfig)> {
    let stored = RunConfig::parse_text(&ckpt.config_text)?;
    let mut model = HmtModel::new(stored.backbone.clone(), stored.hmt.clone(), stored.train.seed)?;
    let missing = model.load_named(&ckpt.tensors)?;
    // A stage-1 checkpoint legitimately lacks the recall parameters; they
    // keep their seed initialization.
    for name in &missing {
        if !name.starts_with("prompt.") {
            return Err(HmtError::Config(format!(
                "checkpoint is missing backbone tensor {name}"
            )));
        }
    }
    Ok((model, stored))
}

/// Model for evaluation commands: prefer the stage-2 checkpoint, fall back
/// to stage 1, else a fresh seeded model. Evaluation knobs the user set
/// explicitly (recall, cache_size, repr_len, sensory_len) override the
/// checkpoint's values.
fn load_model_for_eval(cfg: &RunConfig) -> Result<HmtModel> {
    let dir = out_dir(cfg)?;
    let candidates = [stage2_path(&dir), stage1_path(&dir)];
    for path in &candidates {
        if path.exists() {
            let ckpt = load_checkpoint(path)?;
            let (mut model, _) = model_from_checkpoint(&ckpt)?;
            apply_eval_overrides(&mut model.hmt, cfg);
            println!("loaded {}", path.display());
            return Ok(model);
        }
    }
    eprintln!("warning: no checkpoint under {}; evaluating an untrained model", dir.display());
    HmtModel::new(cfg.backbone.clone(), cfg.hmt.clone(), cfg.train.seed)
}

fn apply_eval_overrides(hmt: &mut HmtConfig, cfg: &RunConfig) {
    if cfg.explicit.contains("recall") {
        hmt.recall_enabled = cfg.hmt.recall_enabled;
    }
    if cfg.explicit.contains("cache_size") {
        hmt.cache_size = cfg.hmt.cache_size;
    }
    if cfg.explicit.contains("repr_len") {
        hmt.repr_len = cfg.hmt.repr_len;
    }
    if cfg.explicit.contains("sensory_len") {
        hmt.sensory_len = cfg.hmt.sensory_len;
    }
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let dir = out_dir(cfg)?;
    let corpus = train_corpus(cfg)?;
    let tokens = corpus.train_tokens();
    let text = cfg.to_text();
    match cfg.train.stage {
        1 => {
            let mut model =
                HmtModel::new(cfg.backbone.clone(), cfg.hmt.clone(), cfg.train.seed)?;
            let mut log = std::fs::File::create(dir.join("train_log_stage1.csv"))?;
            write_log_header(&mut log, cfg)?;
            let (ckpt, outcome) =
                train_stage1(&mut model, &tokens, &cfg.train, &text, Some(&mut log))?;
            save_checkpoint(&stage1_path(&dir), &ckpt)?;
            println!(
                "stage 1 done: {} steps, final loss {:.4}, checkpoint {}",
                outcome.final_step,
                outcome.losses.last().copied().unwrap_or(f64::NAN),
                stage1_path(&dir).display()
            );
        }
        2 => {
            let mut model =
                HmtModel::new(cfg.backbone.clone(), cfg.hmt.clone(), cfg.train.seed)?;
            let s1 = stage1_path(&dir);
            let loaded;
            let stage1_ckpt = if s1.exists() {
                loaded = load_checkpoint(&s1)?;
                println!("extending stage-1 checkpoint {}", s1.display());
                Some(&loaded)
            } else {
                println!("no stage-1 checkpoint; training single-stage from scratch");
                None
            };
            let mut log = std::fs::File::create(dir.join("train_log_stage2.csv"))?;
            write_log_header(&mut log, cfg)?;
            let (ckpt, outcome) = train_stage2(
                &mut model,
                stage1_ckpt,
                &tokens,
                &cfg.train,
                &text,
                Some(&mut log),
            )?;
            save_checkpoint(&stage2_path(&dir), &ckpt)?;
            println!(
                "stage 2 done: {} steps, final loss {:.4}, checkpoint {}",
                outcome.final_step,
                outcome.losses.last().copied().unwrap_or(f64::NAN),
                stage2_path(&dir).display()
            );
        }
        other => {
            return Err(HmtError::Config(format!("stage must be 1 or 2, got {other}")));
        }
    }
    Ok(())
}

fn write_log_header(log: &mut std::fs::File, cfg: &RunConfig) -> Result<()> {
    use std::io::Write;
    for c in config_comments(cfg) {
        writeln!(log, "# {c}")?;
    }
    writeln!(log, "step,loss,ppl,lr,grad_norm")?;
    Ok(())
}

/// Desk-scale evaluation lengths, clipped to the stream and the segment.
fn eval_lengths(cfg: &RunConfig, stream_len: usize) -> Vec<usize> {
    [1024usize, 4096, 16384, 32768]
        .iter()
        .map(|&l| l.min(stream_len))
        .filter(|&l| l >= cfg.hmt.segment_len)
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect()
}

fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let dir = out_dir(cfg)?;
    let model = load_model_for_eval(cfg)?;
    let stream = eval_stream(cfg)?;
    let lengths = eval_lengths(cfg, stream.len());
    if lengths.is_empty() {
        return Err(HmtError::Data(format!(
            "evaluation stream of {} tokens is shorter than one segment",
            stream.len()
        )));
    }
    let table = perplexity(&model, &stream, &lengths)?;
    let rows: Vec<String> = table.iter().map(|(l, p)| format!("{l},{p}")).collect();
    evalsuite::write_csv(
        &dir.join("eval_ppl.csv"),
        &config_comments(cfg),
        "length,ppl",
        &rows,
    )?;
    println!("length,ppl");
    for (l, p) in &table {
        println!("{l},{p:.4}");
    }
    Ok(())
}

fn cmd_gradcheck(cfg: &RunConfig) -> Result<()> {
    let reference = RunConfig::tiny_reference();
    let rows = gradcheck_suite(
        &reference.backbone,
        &reference.hmt,
        reference.train.unroll,
        cfg.train.seed,
        24,
    )?;
    let mut all_ok = true;
    for r in &rows {
        println!(
            "{} {} coords={} worst_rel={:.3e} worst_abs={:.3e}",
            if r.ok { "PASS" } else { "FAIL" },
            r.name,
            r.checked,
            r.worst_rel,
            r.worst_abs
        );
        all_ok &= r.ok;
    }
    if all_ok {
        println!("gradcheck: all {} parameter tensors match finite differences", rows.len());
        Ok(())
    } else {
        Err(HmtError::Stability(
            "gradient check failed for at least one parameter".to_string(),
        ))
    }
}

fn cmd_sweep(kind: Option<&str>, cfg: &RunConfig) -> Result<()> {
    let dir = out_dir(cfg)?;
    let comments = config_comments(cfg);
    match kind {
        Some("cache") => {
            let model = load_model_for_eval(cfg)?;
            let stream = eval_stream(cfg)?;
            let rows = sweep_cache(&model, &stream, &[1, 4, 16, 64], cfg.train.seed)?;
            write_sweep_csv(&dir.join("sweep_cache.csv"), &comments, &rows)?;
            print_sweep(&rows);
        }
        Some("sensory") => {
            let corpus = train_corpus(cfg)?.train_tokens();
            let stream = eval_stream(cfg)?;
            let protocol = protocol_from(cfg);
            let ks: Vec<usize> = [0usize, 4, 16, 32]
                .into_iter()
                .filter(|&k| k < cfg.hmt.segment_len)
                .collect();
            let rows = sweep_sensory(&protocol, &corpus, &stream, &ks)?;
            write_sweep_csv(&dir.join("sweep_sensory.csv"), &comments, &rows)?;
            print_sweep(&rows);
        }
        Some("depth") => {
            let corpus = train_corpus(cfg)?.train_tokens();
            let stream = eval_stream(cfg)?;
            let mut rows = Vec::new();
            for depth in [2usize, 5, 15] {
                let mut arm = cfg.clone();
                arm.train.stage = 2;
                arm.train.unroll = depth;
                arm.hmt.unroll = depth;
                arm.hmt.recall_enabled = true;
                let mut model =
                    HmtModel::new(arm.backbone.clone(), arm.hmt.clone(), arm.train.seed)?;
                train_stage2(&mut model, None, &corpus, &arm.train, &arm.to_text(), None)?;
                let (total, count) = evalsuite::nll_with_cfg(&model, &model.hmt, &stream)?;
                rows.push(evalsuite::SweepRow {
                    param: "unroll".to_string(),
                    value: depth as f64,
                    ppl: (total / count as f64).exp(),
                    seed: arm.train.seed,
                });
            }
            write_sweep_csv(&dir.join("sweep_depth.csv"), &comments, &rows)?;
            print_sweep(&rows);
        }
        other => {
            return Err(HmtError::Config(format!(
                "sweep needs a kind (cache|sensory|depth), got {other:?}"
            )));
        }
    }
    Ok(())
}

fn protocol_from(cfg: &RunConfig) -> TrainProtocol {
    let stage1 = TrainConfig {
        stage: 1,
        unroll: 2,
        steps: cfg.train.steps.min(200),
        ..cfg.train.clone()
    };
    let stage2 = TrainConfig {
        stage: 2,
        ..cfg.train.clone()
    };
    TrainProtocol {
        backbone_cfg: cfg.backbone.clone(),
        hmt_cfg: HmtConfig {
            recall_enabled: true,
            ..cfg.hmt.clone()
        },
        stage1,
        stage2,
        seed: cfg.train.seed,
    }
}

fn write_sweep_csv(
    path: &Path,
    comments: &[String],
    rows: &[evalsuite::SweepRow],
) -> Result<()> {
    let lines: Vec<String> = rows
        .iter()
        .map(|r| format!("{},{},{},{}", r.param, r.value, r.ppl, r.seed))
        .collect();
    evalsuite::write_csv(path, comments, "param,value,ppl,seed", &lines)
}

fn print_sweep(rows: &[evalsuite::SweepRow]) {
    println!("param,value,ppl,seed");
    for r in rows {
        println!("{},{},{:.4},{}", r.param, r.value, r.ppl, r.seed);
    }
}

fn cmd_hist(cfg: &RunConfig) -> Result<()> {
    let dir = out_dir(cfg)?;
    let mut model = load_model_for_eval(cfg)?;
    model.hmt.recall_enabled = true;
    let stream = eval_stream(cfg)?;
    let hist = recall_histogram(&model, &stream)?;
    let mut rows: Vec<String> = hist
        .bins
        .iter()
        .map(|(d, c)| format!("{d},{c}"))
        .collect();
    rows.push(format!("seed,{}", hist.seed_events));
    evalsuite::write_csv(
        &dir.join("recall_hist.csv"),
        &config_comments(cfg),
        "distance,count",
        &rows,
    )?;
    println!("distance,count");
    for r in &rows {
        println!("{r}");
    }
    println!("({} recall events)", hist.events);
    Ok(())
}

fn cmd_qa(cfg: &RunConfig) -> Result<()> {
    let dir = out_dir(cfg)?;
    let model = load_model_for_eval(cfg)?;
    let source = eval_stream(cfg)?;
    let ctx_len = (cfg.hmt.segment_len / 2).max(8);
    let tuples = synth_qa_tuples(&source, 10, ctx_len, cfg.train.seed)?;
    let mut rows = Vec::new();
    println!("m,long_answer_nll,short_answer_accuracy");
    for m in [2usize, 4, 6, 8, 10] {
        let seqs = build_qa_sequences(&tuples, m)?;
        let result = qa_eval(&model, &seqs)?;
        println!(
            "{m},{:.4},{:.4}",
            result.long_answer_nll, result.short_answer_accuracy
        );
        rows.push(format!(
            "{m},{},{}",
            result.long_answer_nll, result.short_answer_accuracy
        ));
    }
    evalsuite::write_csv(
        &dir.join("qa_eval.csv"),
        &config_comments(cfg),
        "m,long_answer_nll,short_answer_accuracy",
        &rows,
    )?;
    Ok(())
}

fn cmd_data(kind: Option<&str>, cfg: &RunConfig) -> Result<()> {
    let dir = out_dir(cfg)?;
    match kind {
        Some("concat") => {
            let corpus = train_corpus(cfg)?;
            let target = cfg.hmt.segment_len * cfg.train.unroll.max(4);
            let streams = concat_samples(&corpus.samples, target)?;
            for (i, s) in streams.iter().take(8).enumerate() {
                write_token_file(&dir.join(format!("concat_{i}.hmtd")), s)?;
            }
            println!(
                "wrote {} of {} chunks of {target} tokens",
                streams.len().min(8),
                streams.len()
            );
        }
        Some("interleave") => {
            let corpus = train_corpus(cfg)?;
            if corpus.samples.len() < 2 {
                return Err(HmtError::Data(
                    "interleave needs at least two samples (blank-line separated)".to_string(),
                ));
            }
            let s = interleave_samples(&corpus.samples[0], &corpus.samples[1], 256)?;
            write_token_file(&dir.join("interleaved.hmtd"), &s)?;
            println!("wrote interleaved.hmtd ({} tokens)", s.len());
        }
        Some("dilate") => {
            let corpus = train_corpus(cfg)?;
            let s = dilate_sample(&corpus.samples[0], datagen::FILLER_TOKEN, 256)?;
            write_token_file(&dir.join("dilated.hmtd"), &s)?;
            println!("wrote dilated.hmtd ({} tokens)", s.len());
        }
        Some("planted") => {
            let task = crate::datagen::PlantedTask {
                num_segments: 10,
                segment_len: cfg.hmt.segment_len,
                key_alphabet: b"ABCDEFGHIJ".to_vec(),
                value_alphabet: b"abcdefgh".to_vec(),
                value_len: 2,
                distance: 8,
            };
            let ep = gen_planted_recall(&task, cfg.train.seed)?;
            write_token_file(&dir.join("planted.hmtd"), &ep.tokens)?;
            println!(
                "wrote planted.hmtd: {} segments of {}, query key {:?}, answer at {:?}",
                ep.num_segments + 1,
                ep.segment_len,
                ep.query_key as char,
                ep.answer_positions
            );
        }
        Some("qa-build") => {
            let source = eval_stream(cfg)?;
            let tuples = synth_qa_tuples(&source, 10, cfg.hmt.segment_len.max(16), cfg.train.seed)?;
            let seqs = build_qa_sequences(&tuples, 4)?;
            let mut span_rows = Vec::new();
            for (i, s) in seqs.iter().enumerate() {
                write_token_file(&dir.join(format!("qa_seq_{i}.hmtd")), &s.tokens)?;
                span_rows.push(format!(
                    "{i},{},{},{},{}",
                    s.question_span.0, s.question_span.1, s.answer_span.0, s.answer_span.1
                ));
            }
            evalsuite::write_csv(
                &dir.join("qa_spans.csv"),
                &config_comments(cfg),
                "sequence,q_start,q_len,a_start,a_len",
                &span_rows,
            )?;
            println!("wrote {} QA sequences + qa_spans.csv", seqs.len());
        }
        other => {
            return Err(HmtError::Config(format!(
                "data needs a builder (concat|interleave|dilate|planted|qa-build), got {other:?}"
            )));
        }
    }
    Ok(())
}

fn cmd_report(cfg: &RunConfig) -> Result<()> {
    let dir = out_dir(cfg)?;
    let comments = config_comments(cfg);

    // Gradient stability across the studied depths, both modes.
    let rows = grad_stability_report(
        &cfg.backbone,
        &cfg.hmt,
        &[2, 5, 10, 15],
        cfg.train.seed,
        false,
    )?;
    let lines: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "{},{},{},{},{}",
                r.depth, r.mode, r.grad_norm_m_init, r.grad_norm_h_t, r.finite_ok
            )
        })
        .collect();
    evalsuite::write_csv(
        &dir.join("grad_stability.csv"),
        &comments,
        "depth,mode,grad_norm_m_init,grad_norm_HT,finite_ok",
        &lines,
    )?;
    println!("depth,mode,grad_norm_m_init,grad_norm_HT,finite_ok");
    for l in &lines {
        println!("{l}");
    }

    // Runtime breakdown on a short random stream (report-only timings).
    let model = load_model_for_eval(cfg)?;
    let mut rng = crate::numerics::rng::RngState::new(cfg.train.seed);
    let stream: Vec<u16> = (0..cfg.hmt.segment_len * 24)
        .map(|_| rng.next_below(cfg.backbone.vocab_size as u64) as u16)
        .collect();
    let table = runtime_breakdown(&model, &stream)?;
    let lines: Vec<String> = table
        .iter()
        .map(|(phase, ms)| format!("{phase},{ms}"))
        .collect();
    evalsuite::write_csv(&dir.join("runtime.csv"), &comments, "phase,median_ms", &lines)?;
    println!("phase,median_ms");
    for l in &lines {
        println!("{l}");
    }

    // Partial-summarization ablation rows ride along in the report.
    let stream2 = eval_stream(cfg).unwrap_or(stream);
    if stream2.len() >= 2 * cfg.hmt.segment_len {
        let j_values = [cfg.hmt.segment_len / 2, cfg.hmt.segment_len];
        if let Ok(rows) = ablate_partial_summarization(&model, &stream2, &j_values) {
            let lines: Vec<String> = rows
                .iter()
                .map(|(j, p)| format!("repr_len,{j},{p},{}", cfg.train.seed))
                .collect();
            evalsuite::write_csv(
                &dir.join("sweep_repr.csv"),
                &comments,
                "param,value,ppl,seed",
                &lines,
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_args(out: &Path, extra: &[(&str, &str)]) -> Vec<String> {
        let mut v = vec![
            "--out_dir".to_string(),
            out.display().to_string(),
            "--d_model".to_string(),
            "16".to_string(),
            "--n_heads".to_string(),
            "2".to_string(),
            "--n_layers".to_string(),
            "1".to_string(),
            "--segment_len".to_string(),
            "8".to_string(),
            "--sensory_len".to_string(),
            "2".to_string(),
            "--cache_size".to_string(),
            "8".to_string(),
        ];
        for (k, val) in extra {
            v.push(format!("--{k}"));
            v.push(val.to_string());
        }
        v
    }

    fn write_toy_corpus(dir: &Path) -> PathBuf {
        let p = dir.join("corpus.txt");
        let text = (0..60)
            .map(|i| format!("the quick brown fox number {i} jumps over the lazy dog."))
            .collect::<Vec<_>>()
            .join(" ");
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn unknown_subcommand_maps_to_config_error() {
        let args = vec!["frobnicate".to_string()];
        assert_eq!(main_with_args(&args), 2);
    }

    #[test]
    fn train_then_eval_produces_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = write_toy_corpus(dir.path());
        let mut args = vec!["train".to_string()];
        args.extend(base_args(
            dir.path(),
            &[
                ("train_path", corpus.to_str().unwrap()),
                ("steps", "3"),
                ("lr", "1e-3"),
                ("stage", "1"),
            ],
        ));
        assert_eq!(main_with_args(&args), 0);
        assert!(dir.path().join("checkpoint_stage1.hmt").exists());
        assert!(dir.path().join("train_log_stage1.csv").exists());

        let mut args = vec!["train".to_string()];
        args.extend(base_args(
            dir.path(),
            &[
                ("train_path", corpus.to_str().unwrap()),
                ("steps", "3"),
                ("lr", "1e-3"),
                ("stage", "2"),
                ("unroll", "3"),
            ],
        ));
        assert_eq!(main_with_args(&args), 0);
        assert!(dir.path().join("checkpoint_stage2.hmt").exists());

        let mut args = vec!["eval".to_string()];
        args.extend(base_args(
            dir.path(),
            &[("eval_path", corpus.to_str().unwrap())],
        ));
        assert_eq!(main_with_args(&args), 0);
        let csv = std::fs::read_to_string(dir.path().join("eval_ppl.csv")).unwrap();
        assert!(csv.contains("length,ppl"));
        assert!(csv.contains("config_hash"));
    }

    #[test]
    fn missing_train_path_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut args = vec!["train".to_string()];
        args.extend(base_args(dir.path(), &[("steps", "1")]));
        assert_eq!(main_with_args(&args), 2);
    }

    #[test]
    fn missing_corpus_file_is_a_data_or_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut args = vec!["train".to_string()];
        args.extend(base_args(
            dir.path(),
            &[("train_path", "/nonexistent/corpus.txt"), ("steps", "1")],
        ));
        assert_eq!(main_with_args(&args), 3);
    }

    #[test]
    fn data_builders_write_token_files() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = write_toy_corpus(dir.path());
        let mut args = vec!["data".to_string(), "planted".to_string()];
        args.extend(base_args(
            dir.path(),
            &[("train_path", corpus.to_str().unwrap()), ("segment_len", "16")],
        ));
        assert_eq!(main_with_args(&args), 0);
        let tokens = read_token_file(&dir.path().join("planted.hmtd")).unwrap();
        assert_eq!(tokens.len(), 11 * 16);
    }

    #[test]
    fn hist_requires_two_segments() {
        let dir = tempfile::tempdir().unwrap();
        let small = dir.path().join("small.txt");
        std::fs::write(&small, "tiny").unwrap();
        let mut args = vec!["hist".to_string()];
        args.extend(base_args(
            dir.path(),
            &[("eval_path", small.to_str().unwrap())],
        ));
        assert_eq!(main_with_args(&args), 1); // contract error
    }
}
