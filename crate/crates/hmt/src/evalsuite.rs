//! Metrics, ablations and diagnostics: perplexity by length, recall-distance
//! histograms, cache/sensory sweeps, recall and partial-summarization
//! ablations, the gradient-stability harness, QA scoring, and the per-phase
//! runtime breakdown. Everything here is read-only on the model and
//! deterministic given seeds.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use crate::backbone::BackboneConfig;
use crate::error::{HmtError, Result};
use crate::memory::{hmt_step, HmtConfig, HmtState, RecallEvent, RecallScratch};
use crate::model::HmtModel;
use crate::numerics::gradcheck::{finite_diff_grad_at, grads_agree};
use crate::numerics::rng::RngState;
use crate::numerics::tensor::NoGradGuard;
use crate::recurrence::{bptt_unroll, seed_streams, train_stage1, train_stage2, TrainConfig};

/// Container the CLI assembles reports into; sections are filled by whichever
/// operations ran. `metadata` carries config hash, seed and corpus id.
#[derive(Debug, Default)]
pub struct EvalReport {
    pub metadata: Vec<(String, String)>,
    pub ppl_by_length: Vec<(usize, f64)>,
    pub sweep_rows: Vec<SweepRow>,
    pub histogram: Option<RecallHistogram>,
    pub grad_rows: Vec<GradStabilityRow>,
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub param: String,
    pub value: f64,
    pub ppl: f64,
    pub seed: u64,
}

// ---- perplexity ------------------------------------------------------------

/// Total NLL and scored-position count over a stream, processed as segment
/// recurrence under the given mechanism config (no gradients recorded).
pub fn nll_with_cfg(model: &HmtModel, cfg: &HmtConfig, stream: &[u16]) -> Result<(f64, usize)> {
    let _guard = NoGradGuard::new();
    let mut state = HmtState::new(cfg, &model.prompts);
    let mut total = 0.0;
    let mut count = 0usize;
    let seg_len = cfg.segment_len;
    let mut start = 0usize;
    while start < stream.len() {
        let end = (start + seg_len).min(stream.len());
        let segment = &stream[start..end];
        let logits = hmt_step(&mut state, segment, cfg, &model.prompts, model.backbone.as_ref())?;
        let scored = segment.len().min(stream.len() - (start + 1));
        if scored > 0 {
            let targets: Vec<usize> = stream[start + 1..start + 1 + scored]
                .iter()
                .map(|&t| t as usize)
                .collect();
            let rows = if scored == segment.len() {
                logits
            } else {
                logits.slice_rows(0, scored)?
            };
            total += rows.cross_entropy(&targets)?.item()? * scored as f64;
            count += scored;
        }
        start = end;
    }
    Ok((total, count))
}

pub fn mean_nll(model: &HmtModel, stream: &[u16]) -> Result<f64> {
    let (total, count) = nll_with_cfg(model, &model.hmt, stream)?;
    if count == 0 {
        return Err(HmtError::Data("stream has no scorable positions".to_string()));
    }
    Ok(total / count as f64)
}

/// exp(mean NLL) over a prefix of each requested length.
pub fn perplexity(model: &HmtModel, stream: &[u16], lengths: &[usize]) -> Result<Vec<(usize, f64)>> {
    let mut out = Vec::with_capacity(lengths.len());
    for &len in lengths {
        if len < model.hmt.segment_len {
            return Err(HmtError::Data(format!(
                "evaluation length {len} is below one segment ({})",
                model.hmt.segment_len
            )));
        }
        if len > stream.len() {
            return Err(HmtError::Data(format!(
                "stream has {} tokens, cannot evaluate a {len}-token prefix",
                stream.len()
            )));
        }
        let (total, count) = nll_with_cfg(model, &model.hmt, &stream[..len])?;
        out.push((len, (total / count as f64).exp()));
    }
    Ok(out)
}

// ---- recall histogram --------------------------------------------------------

#[derive(Debug, Clone)]
pub struct RecallHistogram {
    /// Distance (current segment − argmax cache segment) → count.
    pub bins: BTreeMap<usize, usize>,
    /// Recalls whose argmax was the `m_init` seed entry (distance n+1),
    /// binned separately from real distances.
    pub seed_events: usize,
    pub events: usize,
    /// Full score rows, so the histogram can be replayed independently.
    pub score_log: Vec<RecallEvent>,
}

/// Run the stream in recall mode and histogram the argmax recall distance
/// per segment; ties resolve to the most recent entry.
pub fn recall_histogram(model: &HmtModel, stream: &[u16]) -> Result<RecallHistogram> {
    if !model.hmt.recall_enabled {
        return Err(HmtError::Contract(
            "recall_histogram requires recall_enabled".to_string(),
        ));
    }
    if stream.len() < 2 * model.hmt.segment_len {
        return Err(HmtError::Contract(
            "recall_histogram needs at least 2 segments".to_string(),
        ));
    }
    let _guard = NoGradGuard::new();
    let mut state = HmtState::new(&model.hmt, &model.prompts);
    let mut hist = RecallHistogram {
        bins: BTreeMap::new(),
        seed_events: 0,
        events: 0,
        score_log: Vec::new(),
    };
    for segment in stream.chunks(model.hmt.segment_len) {
        hmt_step(&mut state, segment, &model.hmt, &model.prompts, model.backbone.as_ref())?;
        let event = state
            .last_recall
            .clone()
            .expect("recall mode records an event per step");
        let (idx, _) = event.argmax_entry();
        if idx < 0 {
            hist.seed_events += 1;
        } else {
            let dist = (event.segment_index - idx) as usize;
            *hist.bins.entry(dist).or_insert(0) += 1;
        }
        hist.events += 1;
        hist.score_log.push(event);
    }
    Ok(hist)
}

// ---- ablations -----------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PairedPpl {
    pub with_recall: f64,
    pub without_recall: f64,
}

/// Paired perplexity of two models that differ only in the recall flag.
pub fn ablate_recall(
    model_with: &HmtModel,
    model_without: &HmtModel,
    stream: &[u16],
) -> Result<PairedPpl> {
    let a = &model_with.hmt;
    let b = &model_without.hmt;
    let mut mismatches = Vec::new();
    if a.segment_len != b.segment_len {
        mismatches.push("segment_len");
    }
    if a.sensory_len != b.sensory_len {
        mismatches.push("sensory_len");
    }
    if a.repr_len != b.repr_len {
        mismatches.push("repr_len");
    }
    if a.cache_size != b.cache_size {
        mismatches.push("cache_size");
    }
    if a.d_h != b.d_h {
        mismatches.push("d_h");
    }
    if model_with.backbone_cfg != model_without.backbone_cfg {
        mismatches.push("backbone");
    }
    if !mismatches.is_empty() {
        return Err(HmtError::Config(format!(
            "ablate_recall models differ beyond the recall flag: {mismatches:?}"
        )));
    }
    if !model_with.hmt.recall_enabled || model_without.hmt.recall_enabled {
        return Err(HmtError::Config(
            "ablate_recall expects (recall on, recall off) in that order".to_string(),
        ));
    }
    let (na, ca) = nll_with_cfg(model_with, &model_with.hmt, stream)?;
    let (nb, cb) = nll_with_cfg(model_without, &model_without.hmt, stream)?;
    Ok(PairedPpl {
        with_recall: (na / ca as f64).exp(),
        without_recall: (nb / cb as f64).exp(),
    })
}

/// Re-evaluate the same model with different representation prefix lengths.
pub fn ablate_partial_summarization(
    model: &HmtModel,
    stream: &[u16],
    j_values: &[usize],
) -> Result<Vec<(usize, f64)>> {
    let mut out = Vec::with_capacity(j_values.len());
    for &j in j_values {
        if j == 0 || j > model.hmt.segment_len {
            return Err(HmtError::Config(format!(
                "repr_len {j} out of range 1..={}",
                model.hmt.segment_len
            )));
        }
        let cfg = HmtConfig {
            repr_len: j,
            ..model.hmt.clone()
        };
        let (total, count) = nll_with_cfg(model, &cfg, stream)?;
        out.push((j, (total / count as f64).exp()));
    }
    Ok(out)
}

/// Evaluate with the cache capacity truncated to each N.
pub fn sweep_cache(
    model: &HmtModel,
    stream: &[u16],
    n_values: &[usize],
    seed: u64,
) -> Result<Vec<SweepRow>> {
    let mut out = Vec::with_capacity(n_values.len());
    for &n in n_values {
        if n == 0 {
            return Err(HmtError::Config(
                "cache_size 0 is invalid in recall mode".to_string(),
            ));
        }
        let cfg = HmtConfig {
            cache_size: n,
            recall_enabled: true,
            ..model.hmt.clone()
        };
        let (total, count) = nll_with_cfg(model, &cfg, stream)?;
        out.push(SweepRow {
            param: "cache_size".to_string(),
            value: n as f64,
            ppl: (total / count as f64).exp(),
            seed,
        });
    }
    Ok(out)
}

/// Everything needed to train one sweep arm from scratch.
pub struct TrainProtocol {
    pub backbone_cfg: BackboneConfig,
    pub hmt_cfg: HmtConfig,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub seed: u64,
}

/// Train a fresh model per sensory size under an identical budget and seed,
/// then evaluate each on the same stream.
pub fn sweep_sensory(
    protocol: &TrainProtocol,
    corpus: &[u16],
    eval_stream: &[u16],
    k_values: &[usize],
) -> Result<Vec<SweepRow>> {
    let mut out = Vec::with_capacity(k_values.len());
    for &k in k_values {
        if k >= protocol.hmt_cfg.segment_len {
            return Err(HmtError::Config(format!(
                "sensory_len {k} must be < segment_len {}",
                protocol.hmt_cfg.segment_len
            )));
        }
        let hmt = HmtConfig {
            sensory_len: k,
            ..protocol.hmt_cfg.clone()
        };
        let mut model = HmtModel::new(protocol.backbone_cfg.clone(), hmt, protocol.seed)?;
        let (ckpt, _) = train_stage1(&mut model, corpus, &protocol.stage1, "", None)?;
        train_stage2(&mut model, Some(&ckpt), corpus, &protocol.stage2, "", None)?;
        let (total, count) = nll_with_cfg(&model, &model.hmt, eval_stream)?;
        out.push(SweepRow {
            param: "sensory_len".to_string(),
            value: k as f64,
            ppl: (total / count as f64).exp(),
            seed: protocol.seed,
        });
    }
    Ok(out)
}

// ---- gradient stability -------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GradStabilityRow {
    pub depth: usize,
    pub mode: String,
    pub grad_norm_m_init: f64,
    pub grad_norm_h_t: f64,
    pub finite_ok: bool,
}

/// For each unroll depth and mode, run a fresh seeded model over a fixed
/// random stream, backpropagate, and record L2 norms of ∂loss/∂m_init and
/// ∂loss/∂h_t. Every cell is cross-checked against central finite
/// differences on a few coordinates (rel. 1e-4). Non-finite gradients are
/// flagged, and raised as errors in assert mode.
pub fn grad_stability_report(
    backbone_cfg: &BackboneConfig,
    hmt_cfg: &HmtConfig,
    depths: &[usize],
    seed: u64,
    assert_mode: bool,
) -> Result<Vec<GradStabilityRow>> {
    let max_depth = depths.iter().copied().max().unwrap_or(1);
    let mut stream_rng = RngState::new(RngState::derive(seed, seed_streams::EVAL));
    let stream: Vec<u16> = (0..max_depth * hmt_cfg.segment_len + 1)
        .map(|_| stream_rng.next_below(backbone_cfg.vocab_size as u64) as u16)
        .collect();

    let mut rows = Vec::new();
    for &depth in depths {
        for recall in [true, false] {
            let mode = if recall { "recall" } else { "no_recall" };
            let hmt = HmtConfig {
                recall_enabled: recall,
                unroll: depth,
                ..hmt_cfg.clone()
            };
            let model = HmtModel::new(backbone_cfg.clone(), hmt, seed)?;
            let window = &stream[..depth * model.hmt.segment_len + 1];

            let mut state = HmtState::new(&model.hmt, &model.prompts);
            let loss = bptt_unroll(&model, &mut state, window, depth)?;
            loss.backward()?;

            let g_m = model.prompts.m_init.grad().unwrap();
            let g_t = model.prompts.h_t.grad().unwrap();
            let norm_m = g_m.iter().map(|v| v * v).sum::<f64>().sqrt();
            let norm_t = g_t.iter().map(|v| v * v).sum::<f64>().sqrt();

            let mut ok = norm_m.is_finite() && norm_t.is_finite();
            if ok {
                // Finite-difference spot check on a few coordinates.
                let coords = [0usize, 1, 2];
                for (param, auto) in [(&model.prompts.m_init, &g_m), (&model.prompts.h_t, &g_t)] {
                    let fd = finite_diff_grad_at(
                        || {
                            let mut s = HmtState::new(&model.hmt, &model.prompts);
                            bptt_unroll(&model, &mut s, window, depth)?.item()
                        },
                        param,
                        &coords,
                        1e-5,
                    )?;
                    for (&c, &f) in coords.iter().zip(&fd) {
                        if !grads_agree(auto[c], f, 1e-4, 1e-7, 1e-6) {
                            ok = false;
                        }
                    }
                }
            }
            if !ok && assert_mode {
                return Err(HmtError::Stability(format!(
                    "depth {depth} mode {mode}: non-finite or mismatched gradients \
                     (|m_init| = {norm_m}, |h_t| = {norm_t})"
                )));
            }
            rows.push(GradStabilityRow {
                depth,
                mode: mode.to_string(),
                grad_norm_m_init: norm_m,
                grad_norm_h_t: norm_t,
                finite_ok: ok,
            });
        }
    }
    Ok(rows)
}

// ---- planted-recall benefit ------------------------------------------------------

/// Protocol around the planted retrieval task: evaluation always queries at
/// `task.distance`; training episodes draw their query distance from
/// `train_distances` (default 1..=distance) so the retrieval machinery gets
/// practice at every range under the same budget.
#[derive(Debug, Clone)]
pub struct PlantedTaskSpec {
    pub task: crate::datagen::PlantedTask,
    pub train_distances: Vec<usize>,
}

impl PlantedTaskSpec {
    pub fn desk_default(segment_len: usize, distance: usize) -> PlantedTaskSpec {
        PlantedTaskSpec {
            task: crate::datagen::PlantedTask {
                num_segments: 9,
                segment_len,
                key_alphabet: b"ABCDEFGHIJ".to_vec(),
                value_alphabet: b"abcdefghijkl".to_vec(),
                value_len: 2,
                distance,
            },
            train_distances: (1..=distance).collect(),
        }
    }

    pub fn unroll(&self) -> usize {
        self.task.num_segments + 1
    }

    fn at_distance(&self, distance: usize) -> crate::datagen::PlantedTask {
        crate::datagen::PlantedTask {
            distance,
            ..self.task.clone()
        }
    }
}

/// Train one arm on freshly generated episodes (one per step, sub-seeded)
/// and return the model plus its mean answer-token NLL over held-out
/// episodes. Both arms follow the two-stage schedule under one budget: a
/// shared no-recall warmup of `warmup_steps` (the memory-embedding chain
/// learns to carry bindings), then the remaining steps in the arm's own
/// mode with a fresh optimizer and restarted schedule. The no-recall arm
/// gets the same optimizer restart so the budgets stay symmetric.
pub fn train_planted_arm(
    backbone_cfg: &BackboneConfig,
    hmt_cfg: &HmtConfig,
    task: &PlantedTaskSpec,
    train_cfg: &TrainConfig,
    warmup_steps: u64,
    eval_episodes: usize,
) -> Result<(HmtModel, f64)> {
    let mut model = HmtModel::new(backbone_cfg.clone(), hmt_cfg.clone(), train_cfg.seed)?;
    let warmup = warmup_steps.min(train_cfg.steps);

    model.hmt.recall_enabled = false;
    planted_phase(&model, task, train_cfg, 0, warmup)?;

    model.hmt.recall_enabled = hmt_cfg.recall_enabled;
    planted_phase(&model, task, train_cfg, warmup, train_cfg.steps)?;

    let nll = planted_answer_nll(&model, task, train_cfg.seed, eval_episodes)?;
    Ok((model, nll))
}

/// One training phase over generated episodes, with its own optimizer and
/// learning-rate schedule.
pub fn planted_phase(
    model: &HmtModel,
    task: &PlantedTaskSpec,
    train_cfg: &TrainConfig,
    from_step: u64,
    to_step: u64,
) -> Result<()> {
    use crate::numerics::adam::{clip_global_norm, AdamState};
    use crate::recurrence::lr_at;

    if from_step >= to_step {
        return Ok(());
    }
    let params = model.trainable_params();
    let mut opt = AdamState::new(&params);
    let unroll = task.unroll();
    let distances = if task.train_distances.is_empty() {
        vec![task.task.distance]
    } else {
        task.train_distances.clone()
    };
    for step in from_step..to_step {
        let mut acc: Option<crate::numerics::tensor::Tensor> = None;
        let mut total = 0usize;
        for b in 0..train_cfg.batch {
            let draw = step * train_cfg.batch as u64 + b as u64;
            let episode_seed = RngState::derive(train_cfg.seed, 1_000_000 + draw);
            let distance = distances[(draw as usize) % distances.len()];
            let episode =
                crate::datagen::gen_planted_recall(&task.at_distance(distance), episode_seed)?;
            let mut state = HmtState::new(&model.hmt, &model.prompts);
            let (part, count) =
                crate::recurrence::bptt_unroll_parts(model, &mut state, &episode.tokens, unroll)?;
            if let Some(p) = part {
                acc = Some(match acc {
                    Some(a) => a.add(&p)?,
                    None => p,
                });
                total += count;
            }
        }
        let loss = acc
            .ok_or_else(|| HmtError::Data("planted batch had no scorable positions".into()))?
            .scale(1.0 / total as f64);
        loss.backward()?;
        clip_global_norm(&params, train_cfg.clip_norm)?;
        opt.adam_step(&params, lr_at(step - from_step, train_cfg))?;
    }
    Ok(())
}

/// Mean NLL of the answer token over fresh evaluation episodes (an eval
/// seed stream disjoint from every training stream).
pub fn planted_answer_nll(
    model: &HmtModel,
    task: &PlantedTaskSpec,
    seed: u64,
    episodes: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for e in 0..episodes {
        let episode_seed = RngState::derive(seed, 2_000_000 + e as u64);
        let episode = crate::datagen::gen_planted_recall(&task.task, episode_seed)?;
        let nlls = nll_at_positions(model, &model.hmt, &episode.tokens, &episode.answer_positions)?;
        total += nlls.iter().sum::<f64>() / nlls.len() as f64;
    }
    Ok(total / episodes as f64)
}

// ---- whole-model gradient check -------------------------------------------------

#[derive(Debug, Clone)]
pub struct GradcheckRow {
    pub name: String,
    pub checked: usize,
    pub worst_rel: f64,
    pub worst_abs: f64,
    pub ok: bool,
}

/// Check autodiff gradients of every parameter tensor (backbone, `h_t`,
/// `w_q`, `w_k`, `m_init`) against central finite differences (h = 1e-5) on
/// a recall-enabled unrolled loss. Tensors up to `coords_per_tensor` entries
/// are checked in full; larger ones on a seeded coordinate subsample that
/// always includes the first and last entry. Tolerances: relative 1e-4,
/// absolute 1e-7 where the reference magnitude is under 1e-6.
pub fn gradcheck_suite(
    backbone_cfg: &BackboneConfig,
    hmt_cfg: &HmtConfig,
    unroll: usize,
    seed: u64,
    coords_per_tensor: usize,
) -> Result<Vec<GradcheckRow>> {
    let model = HmtModel::new(backbone_cfg.clone(), hmt_cfg.clone(), seed)?;
    let mut stream_rng = RngState::new(RngState::derive(seed, seed_streams::EVAL));
    let stream: Vec<u16> = (0..unroll * hmt_cfg.segment_len + 1)
        .map(|_| stream_rng.next_below(backbone_cfg.vocab_size as u64) as u16)
        .collect();

    let mut state = HmtState::new(&model.hmt, &model.prompts);
    let loss = bptt_unroll(&model, &mut state, &stream, unroll)?;
    loss.backward()?;

    let mut pick = RngState::new(RngState::derive(seed, seed_streams::SWEEP));
    let mut rows = Vec::new();
    for (name, param) in model.named_params(true) {
        let auto = param
            .grad()
            .ok_or_else(|| HmtError::Contract(format!("parameter {name} has no gradient")))?;
        let n = param.numel();
        let coords: Vec<usize> = if n <= coords_per_tensor {
            (0..n).collect()
        } else {
            let mut c = vec![0, n - 1];
            while c.len() < coords_per_tensor {
                c.push(pick.next_below(n as u64) as usize);
            }
            c.sort_unstable();
            c.dedup();
            c
        };
        let fd = finite_diff_grad_at(
            || {
                let mut s = HmtState::new(&model.hmt, &model.prompts);
                bptt_unroll(&model, &mut s, &stream, unroll)?.item()
            },
            &param,
            &coords,
            1e-5,
        )?;
        let mut worst_rel: f64 = 0.0;
        let mut worst_abs: f64 = 0.0;
        let mut ok = true;
        for (&c, &f) in coords.iter().zip(&fd) {
            let a = auto[c];
            if f.abs() < 1e-6 {
                worst_abs = worst_abs.max((a - f).abs());
            } else {
                worst_rel = worst_rel.max((a - f).abs() / a.abs().max(f.abs()));
            }
            if !grads_agree(a, f, 1e-4, 1e-7, 1e-6) {
                ok = false;
            }
        }
        rows.push(GradcheckRow {
            name,
            checked: coords.len(),
            worst_rel,
            worst_abs,
            ok,
        });
    }
    Ok(rows)
}

// ---- question answering ----------------------------------------------------------

#[derive(Debug, Clone)]
pub struct QaEvalResult {
    /// Mean NLL over answer-span positions only.
    pub long_answer_nll: f64,
    /// Fraction of sequences whose greedy answer decoding matches the label.
    pub short_answer_accuracy: f64,
    pub per_sequence: Vec<(f64, bool)>,
}

/// NLL at specific stream positions (each position's token scored from the
/// logits row one step earlier), via segment recurrence.
pub fn nll_at_positions(
    model: &HmtModel,
    cfg: &HmtConfig,
    stream: &[u16],
    positions: &[usize],
) -> Result<Vec<f64>> {
    for &p in positions {
        if p == 0 || p >= stream.len() {
            return Err(HmtError::Data(format!(
                "position {p} not scorable in a stream of {}",
                stream.len()
            )));
        }
    }
    let _guard = NoGradGuard::new();
    let mut state = HmtState::new(cfg, &model.prompts);
    let mut out = vec![0.0; positions.len()];
    let seg_len = cfg.segment_len;
    let mut start = 0usize;
    while start < stream.len() {
        let end = (start + seg_len).min(stream.len());
        let segment = &stream[start..end];
        let logits = hmt_step(&mut state, segment, cfg, &model.prompts, model.backbone.as_ref())?;
        let data = logits.data();
        let v = model.backbone.vocab_size();
        for (slot, &p) in positions.iter().enumerate() {
            // Row p−1 predicts token p.
            if p >= start + 1 && p <= end {
                let row = p - 1 - start;
                let row_data = &data[row * v..(row + 1) * v];
                let max = row_data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max
                    + row_data
                        .iter()
                        .map(|&x| (x - max).exp())
                        .sum::<f64>()
                        .ln();
                out[slot] = lse - row_data[stream[p] as usize];
            }
        }
        start = end;
    }
    Ok(out)
}

/// Greedy continuation: advance over `prefix`, then generate `n_gen` tokens
/// autoregressively (the trailing partial segment is re-run per token).
pub fn greedy_continuation(model: &HmtModel, prefix: &[u16], n_gen: usize) -> Result<Vec<u16>> {
    let _guard = NoGradGuard::new();
    let seg_len = model.hmt.segment_len;
    let full_segments = prefix.len() / seg_len;
    let mut state = HmtState::new(&model.hmt, &model.prompts);
    for s in 0..full_segments {
        hmt_step(
            &mut state,
            &prefix[s * seg_len..(s + 1) * seg_len],
            &model.hmt,
            &model.prompts,
            model.backbone.as_ref(),
        )?;
    }
    let mut tail: Vec<u16> = prefix[full_segments * seg_len..].to_vec();
    let mut out = Vec::with_capacity(n_gen);
    for _ in 0..n_gen {
        if tail.is_empty() {
            return Err(HmtError::Data(
                "greedy decoding needs at least one token in the open segment".to_string(),
            ));
        }
        let mut probe = state.clone();
        let logits = hmt_step(
            &mut probe,
            &tail,
            &model.hmt,
            &model.prompts,
            model.backbone.as_ref(),
        )?;
        let v = model.backbone.vocab_size();
        let data = logits.data();
        let last = &data[(tail.len() - 1) * v..tail.len() * v];
        let mut best = 0usize;
        for i in 1..v {
            if last[i] > last[best] {
                best = i;
            }
        }
        drop(data);
        let tok = best as u16;
        out.push(tok);
        tail.push(tok);
        if tail.len() == seg_len {
            hmt_step(&mut state, &tail, &model.hmt, &model.prompts, model.backbone.as_ref())?;
            tail.clear();
        }
    }
    Ok(out)
}

/// Score QA sequences: answer-span NLL (contextual reasoning) and greedy
/// short-answer accuracy against the 3-way label rendering.
pub fn qa_eval(model: &HmtModel, sequences: &[crate::datagen::QaSequence]) -> Result<QaEvalResult> {
    if sequences.is_empty() {
        return Err(HmtError::Data("qa_eval over zero sequences".to_string()));
    }
    let mut per_sequence = Vec::with_capacity(sequences.len());
    let mut nll_total = 0.0;
    let mut nll_count = 0usize;
    let mut correct = 0usize;
    for seq in sequences {
        let (a0, alen) = seq.answer_span;
        if alen == 0 {
            return Err(HmtError::Data("empty answer span".to_string()));
        }
        let positions: Vec<usize> = (a0..a0 + alen).collect();
        let nlls = nll_at_positions(model, &model.hmt, &seq.tokens, &positions)?;
        let seq_nll = nlls.iter().sum::<f64>() / alen as f64;
        nll_total += nlls.iter().sum::<f64>();
        nll_count += alen;

        let decoded = greedy_continuation(model, &seq.tokens[..a0], alen)?;
        let expect = &seq.tokens[a0..a0 + alen];
        let hit = decoded == expect;
        if hit {
            correct += 1;
        }
        per_sequence.push((seq_nll, hit));
    }
    Ok(QaEvalResult {
        long_answer_nll: nll_total / nll_count as f64,
        short_answer_accuracy: correct as f64 / sequences.len() as f64,
        per_sequence,
    })
}

// ---- runtime breakdown -------------------------------------------------------------

/// Median wall time per segment for the four phases of one recall step:
/// the main forward pass, representation extraction, the prefix score row A,
/// and the newest-entry score A_n. Report-only.
pub fn runtime_breakdown(model: &HmtModel, stream: &[u16]) -> Result<Vec<(&'static str, f64)>> {
    let _guard = NoGradGuard::new();
    let cfg = &model.hmt;
    let mut state = HmtState::new(cfg, &model.prompts);
    let mut t_forward = Vec::new();
    let mut t_repr = Vec::new();
    let mut t_prefix = Vec::new();
    let mut t_newest = Vec::new();

    for segment in stream.chunks(cfg.segment_len) {
        let h_n = model.backbone.embed(segment)?;

        let t0 = Instant::now();
        let h_sum = crate::memory::extract_representation(
            &h_n,
            cfg,
            &model.prompts,
            model.backbone.as_ref(),
        )?;
        t_repr.push(t0.elapsed().as_secs_f64() * 1e3);

        let entries = state.cache.embeddings();
        let (prefix, newest) = entries.split_at(entries.len().saturating_sub(1));
        let t0 = Instant::now();
        let scratch = RecallScratch::precompute(&h_sum, prefix, &model.prompts)?;
        t_prefix.push(t0.elapsed().as_secs_f64() * 1e3);

        let t0 = Instant::now();
        let h_s = crate::memory::memory_search_incremental(
            &scratch,
            prefix,
            &newest[0],
            &model.prompts,
        )?;
        t_newest.push(t0.elapsed().as_secs_f64() * 1e3);

        let t0 = Instant::now();
        let augmented =
            crate::memory::augment_segment(&h_s, state.sensory.as_ref(), &h_n)?;
        let (h_out, h_mem) =
            crate::memory::process_segment(&augmented, segment.len(), model.backbone.as_ref())?;
        let _ = model.backbone.logits(&h_out)?;
        t_forward.push(t0.elapsed().as_secs_f64() * 1e3);

        state.cache.push(state.next_segment, h_mem.clone())?;
        let keep = cfg.sensory_len.min(segment.len());
        state.sensory = if keep > 0 {
            Some(h_n.slice_rows(segment.len() - keep, keep)?)
        } else {
            None
        };
        state.prev_mem = h_mem;
        state.next_segment += 1;
    }

    // Warm-up: discard the first two segments.
    let median = |mut v: Vec<f64>| -> f64 {
        if v.len() > 2 {
            v.drain(..2);
        }
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if v.is_empty() {
            0.0
        } else {
            v[v.len() / 2]
        }
    };
    Ok(vec![
        ("forward_pass", median(t_forward)),
        ("representation_extraction", median(t_repr)),
        ("score_prefix_a", median(t_prefix)),
        ("score_newest_a_n", median(t_newest)),
    ])
}

// ---- CSV output ------------------------------------------------------------------

/// Write a CSV with `#`-prefixed comment lines (resolved config + hash) so
/// every artifact is re-derivable.
pub fn write_csv(
    path: &Path,
    comments: &[String],
    header: &str,
    rows: &[String],
) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for c in comments {
        writeln!(f, "# {c}")?;
    }
    writeln!(f, "{header}")?;
    for r in rows {
        writeln!(f, "{r}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::IdentityBackbone;
    use crate::datagen::{build_qa_sequences, synth_qa_tuples};

    fn toy_backbone_cfg() -> BackboneConfig {
        BackboneConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            vocab_size: 256,
            max_pos: 16,
        }
    }

    fn toy_hmt_cfg(recall: bool) -> HmtConfig {
        HmtConfig {
            segment_len: 8,
            sensory_len: 2,
            repr_len: 4,
            cache_size: 20,
            d_h: 16,
            recall_enabled: recall,
            unroll: 2,
        }
    }

    fn random_bytes(n: usize, seed: u64) -> Vec<u16> {
        let mut rng = RngState::new(seed);
        (0..n).map(|_| rng.next_below(256) as u16).collect()
    }

    #[test]
    fn untrained_model_ppl_is_near_uniform() {
        let model = HmtModel::new(toy_backbone_cfg(), toy_hmt_cfg(true), 3).unwrap();
        let stream = random_bytes(512, 4);
        let table = perplexity(&model, &stream, &[256, 512]).unwrap();
        for (_, ppl) in table {
            assert!(
                (240.0..=272.0).contains(&ppl),
                "untrained PPL {ppl} outside the uniform band"
            );
        }
    }

    #[test]
    fn perplexity_rejects_lengths_beyond_the_stream() {
        let model = HmtModel::new(toy_backbone_cfg(), toy_hmt_cfg(true), 3).unwrap();
        let stream = random_bytes(64, 4);
        assert!(matches!(
            perplexity(&model, &stream, &[128]),
            Err(HmtError::Data(_))
        ));
        assert!(matches!(
            perplexity(&model, &stream, &[4]),
            Err(HmtError::Data(_))
        ));
    }

    #[test]
    fn segmented_nll_equals_flat_oracle_on_identity_backbone() {
        // With a pass-through backbone, no sensory memory and no positions,
        // segmented bookkeeping must equal a flat per-position computation.
        use crate::backbone::Backbone;
        let mut rng = RngState::new(5);
        let stub = IdentityBackbone::new(12, 256, &mut rng);
        let embed = Backbone::named_params(&stub)[0].1.to_vec();
        let w_out = Backbone::named_params(&stub)[1].1.to_vec();
        let mut cfg = toy_hmt_cfg(false);
        cfg.sensory_len = 0;
        let model = HmtModel::with_backbone(toy_backbone_cfg(), Box::new(stub), cfg, 6).unwrap();

        let stream = random_bytes(100, 7);
        let (total, count) = nll_with_cfg(&model, &model.hmt, &stream).unwrap();

        // Flat oracle: logits[i] = embed[token_i] · w_out, plain loops.
        let d = 12;
        let v = 256;
        let mut flat_total = 0.0;
        for i in 0..stream.len() - 1 {
            let e = &embed[stream[i] as usize * d..(stream[i] as usize + 1) * d];
            let mut logits = vec![0.0; v];
            for (j, l) in logits.iter_mut().enumerate() {
                *l = (0..d).map(|k| e[k] * w_out[k * v + j]).sum();
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            flat_total += lse - logits[stream[i + 1] as usize];
        }
        assert_eq!(count, stream.len() - 1);
        assert!(
            (total - flat_total).abs() < 1e-10,
            "segmented {total} vs flat {flat_total}"
        );
    }

    #[test]
    fn histogram_totals_match_events_and_replay() {
        let model = HmtModel::new(toy_backbone_cfg(), toy_hmt_cfg(true), 8).unwrap();
        let stream = random_bytes(8 * 12, 9);
        let hist = recall_histogram(&model, &stream).unwrap();
        assert_eq!(hist.events, 12);
        let binned: usize = hist.bins.values().sum::<usize>() + hist.seed_events;
        assert_eq!(binned, hist.events);

        // Replay oracle: recompute the argmax distances from the score log.
        let mut bins = BTreeMap::new();
        let mut seed_events = 0;
        for ev in &hist.score_log {
            let mut best = 0;
            for i in 1..ev.weights.len() {
                if ev.weights[i] >= ev.weights[best] {
                    best = i;
                }
            }
            let idx = ev.entry_indices[best];
            if idx < 0 {
                seed_events += 1;
            } else {
                *bins.entry((ev.segment_index - idx) as usize).or_insert(0) += 1;
            }
        }
        assert_eq!(bins, hist.bins);
        assert_eq!(seed_events, hist.seed_events);
    }

    #[test]
    fn histogram_requires_recall_mode() {
        let model = HmtModel::new(toy_backbone_cfg(), toy_hmt_cfg(false), 8).unwrap();
        let stream = random_bytes(64, 9);
        assert!(matches!(
            recall_histogram(&model, &stream),
            Err(HmtError::Contract(_))
        ));
    }

    #[test]
    fn cache_sweep_with_n1_equals_no_recall() {
        let model = HmtModel::new(toy_backbone_cfg(), toy_hmt_cfg(true), 10).unwrap();
        let stream = random_bytes(8 * 10, 11);
        let rows = sweep_cache(&model, &stream, &[1, 4, 16], 0).unwrap();
        let no_recall_cfg = HmtConfig {
            recall_enabled: false,
            ..model.hmt.clone()
        };
        let (total, count) = nll_with_cfg(&model, &no_recall_cfg, &stream).unwrap();
        let no_recall_ppl = (total / count as f64).exp();
        assert!(
            (rows[0].ppl - no_recall_ppl).abs() < 1e-12,
            "N=1 recall {} vs no-recall {no_recall_ppl}",
            rows[0].ppl
        );
        assert!(sweep_cache(&model, &stream, &[0], 0).is_err());
    }

    #[test]
    fn no_recall_forward_ignores_cache_capacity() {
        let stream = random_bytes(8 * 6, 12);
        let mut ppls = Vec::new();
        for n in [1usize, 7, 300] {
            let mut cfg = toy_hmt_cfg(false);
            cfg.cache_size = n;
            let model = HmtModel::new(toy_backbone_cfg(), cfg, 13).unwrap();
            let (total, count) = nll_with_cfg(&model, &model.hmt, &stream).unwrap();
            ppls.push(total / count as f64);
        }
        assert!(ppls.iter().all(|p| p.to_bits() == ppls[0].to_bits()));
    }

    #[test]
    fn partial_summarization_ablation_runs_and_rejects_bad_j() {
        let model = HmtModel::new(toy_backbone_cfg(), toy_hmt_cfg(true), 14).unwrap();
        let stream = random_bytes(8 * 6, 15);
        let rows = ablate_partial_summarization(&model, &stream, &[1, 4, 8]).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|(_, p)| p.is_finite()));
        assert!(ablate_partial_summarization(&model, &stream, &[9]).is_err());
    }

    #[test]
    fn grad_stability_rows_are_finite_on_the_toy_config() {
        let rows =
            grad_stability_report(&toy_backbone_cfg(), &toy_hmt_cfg(true), &[1, 3], 16, true)
                .unwrap();
        assert_eq!(rows.len(), 4);
        for r in &rows {
            assert!(r.finite_ok, "{r:?}");
            assert!(r.grad_norm_m_init.is_finite());
            if r.mode == "no_recall" {
                assert_eq!(r.grad_norm_h_t, 0.0, "h_t is unused without recall");
            }
        }
    }

    #[test]
    fn qa_eval_scores_answer_spans_only() {
        let model = HmtModel::new(toy_backbone_cfg(), toy_hmt_cfg(true), 17).unwrap();
        let source = random_bytes(2000, 18);
        let tuples = synth_qa_tuples(&source, 6, 24, 19).unwrap();
        let seqs = build_qa_sequences(&tuples, 3).unwrap();
        let result = qa_eval(&model, &seqs).unwrap();
        assert!(result.long_answer_nll.is_finite());
        assert!((0.0..=1.0).contains(&result.short_answer_accuracy));
        assert_eq!(result.per_sequence.len(), 3);
    }

    #[test]
    fn runtime_breakdown_has_four_phases_and_cheap_a_n() {
        let mut cfg = toy_hmt_cfg(true);
        cfg.cache_size = 256;
        let model = HmtModel::new(toy_backbone_cfg(), cfg, 20).unwrap();
        // Long stream so the cache fills up and A dominates A_n.
        let stream = random_bytes(8 * 300, 21);
        let table = runtime_breakdown(&model, &stream).unwrap();
        assert_eq!(table.len(), 4);
        let a = table[2].1;
        let a_n = table[3].1;
        assert!(
            a_n <= a,
            "single-entry scoring ({a_n} ms) should not exceed prefix scoring ({a} ms)"
        );
    }
}
