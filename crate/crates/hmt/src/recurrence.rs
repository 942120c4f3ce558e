//! Truncated backpropagation through time over segment sequences, the
//! two-stage training schedule, learning-rate decay, and checkpoint glue.
//!
//! One optimizer step = one fresh [`HmtState`] + one unrolled window of
//! `T·L (+1 lookahead)` tokens sampled at a seeded uniform offset. Next-token
//! targets cross segment boundaries; the reported loss is total NLL over all
//! scored positions divided by their count. Cache entries older than the
//! unroll window are constants (the state is detached at window boundaries),
//! which is what makes the truncation law hold exactly.

use std::io::Write;

use crate::checkpoint::{Checkpoint, VERSION};
use crate::error::{HmtError, Result};
use crate::memory::{hmt_step, HmtState};
use crate::model::HmtModel;
use crate::numerics::adam::{clip_global_norm, AdamState};
use crate::numerics::rng::RngState;
use crate::numerics::tensor::{NoGradGuard, Tensor};

/// Fixed sub-seed stream tags (see `RngState::derive`).
pub mod seed_streams {
    pub const STAGE1: u64 = 1;
    pub const STAGE2: u64 = 2;
    pub const EVAL: u64 = 3;
    pub const DATA: u64 = 4;
    pub const SWEEP: u64 = 5;
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// 1 = no-recall warmup, 2 = recall training.
    pub stage: u8,
    /// BPTT unroll depth T.
    pub unroll: usize,
    pub lr0: f64,
    /// Learning-rate decay: lr0 · factor^floor(step / every).
    pub decay_factor: f64,
    pub decay_every: u64,
    pub steps: u64,
    pub batch: usize,
    /// Global-norm gradient clip; `<= 0` disables.
    pub clip_norm: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage != 1 && self.stage != 2 {
            return Err(HmtError::Config(format!("stage must be 1 or 2, got {}", self.stage)));
        }
        if self.unroll == 0 {
            return Err(HmtError::Config("unroll must be >= 1".to_string()));
        }
        if self.lr0 <= 0.0 {
            return Err(HmtError::Config(format!("lr must be > 0, got {}", self.lr0)));
        }
        if self.decay_every == 0 {
            return Err(HmtError::Config("lr_decay_every must be >= 1".to_string()));
        }
        if self.batch == 0 {
            return Err(HmtError::Config("batch must be >= 1".to_string()));
        }
        Ok(())
    }
}

/// Piecewise-constant step decay: lr0 · factor^floor(step / every).
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.decay_factor.powi((step / cfg.decay_every) as i32)
}

/// Unnormalized pieces of an unrolled window: Σ ce_s · n_s and Σ n_s.
/// Splitting the window into segments, running one step per segment and
/// scoring position i against stream token i+1 (the final token is unscored
/// when no lookahead exists).
pub fn bptt_unroll_parts(
    model: &HmtModel,
    state: &mut HmtState,
    stream: &[u16],
    unroll: usize,
) -> Result<(Option<Tensor>, usize)> {
    let seg_len = model.hmt.segment_len;
    let need = (unroll - 1) * seg_len + 1;
    if stream.len() < need {
        let have = stream.len().div_ceil(seg_len);
        return Err(HmtError::Data(format!(
            "stream supplies {have} segments ({} tokens); unroll of {unroll} needs at least {need} tokens",
            stream.len()
        )));
    }
    let mut acc: Option<Tensor> = None;
    let mut total = 0usize;
    for s in 0..unroll {
        let start = s * seg_len;
        let end = ((s + 1) * seg_len).min(stream.len());
        let segment = &stream[start..end];
        let logits = hmt_step(state, segment, &model.hmt, &model.prompts, model.backbone.as_ref())?;
        let scored = segment.len().min(stream.len() - (start + 1));
        if scored == 0 {
            continue;
        }
        let targets: Vec<usize> = stream[start + 1..start + 1 + scored]
            .iter()
            .map(|&t| t as usize)
            .collect();
        let rows = if scored == segment.len() {
            logits
        } else {
            logits.slice_rows(0, scored)?
        };
        let ce = rows.cross_entropy(&targets)?.scale(scored as f64);
        acc = Some(match acc {
            Some(a) => a.add(&ce)?,
            None => ce,
        });
        total += scored;
    }
    Ok((acc, total))
}

/// Token-count-weighted mean cross-entropy over `unroll` segments.
pub fn bptt_unroll(
    model: &HmtModel,
    state: &mut HmtState,
    stream: &[u16],
    unroll: usize,
) -> Result<Tensor> {
    let (acc, total) = bptt_unroll_parts(model, state, stream, unroll)?;
    let acc = acc.ok_or_else(|| {
        HmtError::Data("window contains no scorable positions".to_string())
    })?;
    Ok(acc.scale(1.0 / total as f64))
}

/// Run segments through the model without recording gradients, leaving the
/// state's carried tensors as constants (the pre-window history of a
/// truncated unroll).
pub fn advance_state(model: &HmtModel, state: &mut HmtState, tokens: &[u16]) -> Result<()> {
    let _guard = NoGradGuard::new();
    for segment in tokens.chunks(model.hmt.segment_len) {
        hmt_step(state, segment, &model.hmt, &model.prompts, model.backbone.as_ref())?;
    }
    Ok(())
}

pub struct TrainOutcome {
    pub losses: Vec<f64>,
    pub grad_norms: Vec<f64>,
    pub final_step: u64,
}

/// Core loop shared by both stages: sample window(s), unroll, clip, step.
/// `start_step` > 0 continues a resumed run (the RNG must come from the
/// checkpoint for the continuation to be bit-identical).
#[allow(clippy::too_many_arguments)]
pub fn train_run(
    model: &HmtModel,
    opt: &mut AdamState,
    rng: &mut RngState,
    corpus: &[u16],
    cfg: &TrainConfig,
    start_step: u64,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let seg_len = model.hmt.segment_len;
    let window_len = cfg.unroll * seg_len + 1;
    if corpus.len() < window_len {
        return Err(HmtError::Data(format!(
            "corpus has {} tokens; a T={} unroll needs windows of {window_len}",
            corpus.len(),
            cfg.unroll
        )));
    }
    let max_offset = (corpus.len() - window_len) as u64;
    let params = model.trainable_params();
    let mut losses = Vec::new();
    let mut grad_norms = Vec::new();

    for step in start_step..cfg.steps {
        let lr = lr_at(step, cfg);
        let mut acc: Option<Tensor> = None;
        let mut total = 0usize;
        for _ in 0..cfg.batch {
            let offset = rng.next_below(max_offset + 1) as usize;
            let window = &corpus[offset..offset + window_len];
            let mut state = HmtState::new(&model.hmt, &model.prompts);
            let (part, count) = bptt_unroll_parts(model, &mut state, window, cfg.unroll)?;
            if let Some(p) = part {
                acc = Some(match acc {
                    Some(a) => a.add(&p)?,
                    None => p,
                });
                total += count;
            }
        }
        let loss = acc
            .ok_or_else(|| HmtError::Data("no scorable positions in batch".to_string()))?
            .scale(1.0 / total as f64);
        loss.backward()?;
        let grad_norm = clip_global_norm(&params, cfg.clip_norm)?;
        opt.adam_step(&params, lr)?;

        let loss_v = loss.item()?;
        losses.push(loss_v);
        grad_norms.push(grad_norm);
        if let Some(w) = log.as_mut() {
            writeln!(w, "{step},{loss_v},{},{lr},{grad_norm}", loss_v.exp())?;
        }
    }
    Ok(TrainOutcome {
        losses,
        grad_norms,
        final_step: cfg.steps,
    })
}

/// Collect parameters plus optimizer moments into a checkpoint.
pub fn build_checkpoint(
    model: &HmtModel,
    opt: &AdamState,
    include_recall: bool,
    config_text: &str,
    rng: &RngState,
    step: u64,
) -> Checkpoint {
    let mut tensors = Vec::new();
    for (name, p) in model.named_params(include_recall) {
        tensors.push((name, p.shape().to_vec(), p.to_vec()));
    }
    for (name, m1, m2) in opt.moments() {
        let shape = model
            .named_params(include_recall)
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.shape().to_vec())
            .unwrap_or_else(|| vec![m1.len()]);
        tensors.push((format!("{name}.m1"), shape.clone(), m1.clone()));
        tensors.push((format!("{name}.m2"), shape, m2.clone()));
    }
    Checkpoint {
        version: VERSION,
        config_text: config_text.to_string(),
        tensors,
        rng: *rng,
        step,
    }
}

/// Load parameters + optimizer + RNG from a checkpoint of the same mode.
/// Every parameter must be present (use [`HmtModel::load_named`] directly
/// for the stage-1 → stage-2 extension, where recall parameters stay fresh).
pub fn restore_for_resume(
    model: &mut HmtModel,
    ckpt: &Checkpoint,
    include_recall: bool,
) -> Result<(AdamState, RngState, u64)> {
    let param_names: Vec<String> = model
        .named_params(include_recall)
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    let missing = load_params_subset(model, ckpt, include_recall)?;
    if !missing.is_empty() {
        return Err(HmtError::Config(format!(
            "checkpoint is missing parameters required for resume: {missing:?}"
        )));
    }
    let params = model.named_params(include_recall);
    let opt = AdamState::from_parts(&params, ckpt.step, |name| {
        ckpt.tensor(name).map(|(_, d)| d.to_vec())
    })?;
    let _ = param_names;
    Ok((opt, ckpt.rng, ckpt.step))
}

fn load_params_subset(
    model: &mut HmtModel,
    ckpt: &Checkpoint,
    include_recall: bool,
) -> Result<Vec<String>> {
    let mut missing = Vec::new();
    for (name, param) in model.named_params(include_recall) {
        match ckpt.tensor(&name) {
            Some((shape, data)) => {
                if shape != param.shape() {
                    return Err(HmtError::Config(format!(
                        "checkpoint tensor {name} has shape {shape:?}, model expects {:?}",
                        param.shape()
                    )));
                }
                param.data_mut().copy_from_slice(data);
            }
            None => missing.push(name),
        }
    }
    Ok(missing)
}

/// Stage 1: no recall, shallow unroll (T = 2 by default). Returns the
/// checkpoint (backbone + `m_init`; recall parameters are deliberately
/// omitted so stage 2 starts them fresh) and the loss trace.
pub fn train_stage1(
    model: &mut HmtModel,
    corpus: &[u16],
    cfg: &TrainConfig,
    config_text: &str,
    log: Option<&mut dyn Write>,
) -> Result<(Checkpoint, TrainOutcome)> {
    if cfg.stage != 1 {
        return Err(HmtError::Config(format!(
            "train_stage1 called with stage {}",
            cfg.stage
        )));
    }
    cfg.validate()?;
    model.hmt.recall_enabled = false;
    let params = model.trainable_params();
    let mut opt = AdamState::new(&params);
    let mut rng = RngState::new(RngState::derive(cfg.seed, seed_streams::STAGE1));
    let outcome = train_run(model, &mut opt, &mut rng, corpus, cfg, 0, log)?;
    let ckpt = build_checkpoint(model, &opt, false, config_text, &rng, outcome.final_step);
    Ok((ckpt, outcome))
}

/// Stage 2: loads and extends a stage-1 model, enables recall, and unrolls
/// deep. With `stage1 = None` this is the single-stage comparison arm (same
/// settings, trained from scratch). Freshly introduced parameters (`h_t`,
/// `w_q`, `w_k` — and `m_init` if absent) keep their seed initialization.
pub fn train_stage2(
    model: &mut HmtModel,
    stage1: Option<&Checkpoint>,
    corpus: &[u16],
    cfg: &TrainConfig,
    config_text: &str,
    log: Option<&mut dyn Write>,
) -> Result<(Checkpoint, TrainOutcome)> {
    if cfg.stage != 2 {
        return Err(HmtError::Config(format!(
            "train_stage2 called with stage {}",
            cfg.stage
        )));
    }
    cfg.validate()?;
    if let Some(ckpt) = stage1 {
        check_checkpoint_compat(model, ckpt)?;
        load_params_subset(model, ckpt, true)?;
    }
    model.hmt.recall_enabled = true;
    let params = model.trainable_params();
    let mut opt = AdamState::new(&params);
    let mut rng = RngState::new(RngState::derive(cfg.seed, seed_streams::STAGE2));
    let outcome = train_run(model, &mut opt, &mut rng, corpus, cfg, 0, log)?;
    let ckpt = build_checkpoint(model, &opt, true, config_text, &rng, outcome.final_step);
    Ok((ckpt, outcome))
}

/// Structural compatibility between a checkpoint and the current model:
/// every shared tensor must have the model's shape. Mismatches are listed.
pub fn check_checkpoint_compat(model: &HmtModel, ckpt: &Checkpoint) -> Result<()> {
    let mut mismatched = Vec::new();
    for (name, param) in model.named_params(true) {
        if let Some((shape, _)) = ckpt.tensor(&name) {
            if shape != param.shape() {
                mismatched.push(format!(
                    "{name}: checkpoint {shape:?} vs model {:?}",
                    param.shape()
                ));
            }
        }
    }
    if mismatched.is_empty() {
        Ok(())
    } else {
        Err(HmtError::Config(format!(
            "incompatible checkpoint: {}",
            mismatched.join("; ")
        )))
    }
}
