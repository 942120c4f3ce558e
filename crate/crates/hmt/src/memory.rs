//! The memory mechanism: representation extraction, cross-attention memory
//! search over a FIFO cache, sensory-memory augmentation, and segment
//! processing/summarization — plus the no-recall mode where the previous
//! memory embedding is passed straight through.
//!
//! Per segment the pipeline is: embed the tokens, summarize a prefix of the
//! segment between two copies of the learned prompt embedding `h_t`, use the
//! summary as a query over the cached memory embeddings (projections `w_q`,
//! `w_k`, no value/output projection), then run the backbone over
//! `[h_s ∘ sensory ∘ tokens ∘ h_s]` and split the output into discarded
//! rows, per-token rows for logits, and the new memory embedding.

use std::collections::VecDeque;

use crate::backbone::Backbone;
use crate::error::{HmtError, Result};
use crate::numerics::tensor::{concat_cols, concat_rows, Tensor};

/// A single `1×d` hidden vector (summary/memory/prompt roles).
pub type Embedding = Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct HmtConfig {
    /// Segment length in tokens (L).
    pub segment_len: usize,
    /// Sensory memory length in embeddings (k).
    pub sensory_len: usize,
    /// Representation-extraction prefix length (j).
    pub repr_len: usize,
    /// Long-term cache capacity (N).
    pub cache_size: usize,
    /// Cross-attention hidden width (d_h).
    pub d_h: usize,
    pub recall_enabled: bool,
    /// BPTT unroll depth (consumed by the recurrence module).
    pub unroll: usize,
}

impl HmtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.segment_len == 0 {
            return Err(HmtError::Config("segment_len must be >= 1".to_string()));
        }
        if self.sensory_len >= self.segment_len {
            return Err(HmtError::Config(format!(
                "sensory_len {} must be < segment_len {}",
                self.sensory_len, self.segment_len
            )));
        }
        if self.repr_len == 0 || self.repr_len > self.segment_len {
            return Err(HmtError::Config(format!(
                "repr_len {} must be in 1..={}",
                self.repr_len, self.segment_len
            )));
        }
        if self.recall_enabled && self.cache_size == 0 {
            return Err(HmtError::Config(
                "cache_size must be >= 1 when recall is enabled".to_string(),
            ));
        }
        if self.d_h == 0 {
            return Err(HmtError::Config("d_h must be >= 1".to_string()));
        }
        if self.unroll == 0 {
            return Err(HmtError::Config("unroll must be >= 1".to_string()));
        }
        Ok(())
    }
}

/// Trainable wrapper parameters: the segment summarization prompt, the
/// query/key projections of the memory search, and the initial memory seed.
pub struct PromptParams {
    pub h_t: Embedding,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub m_init: Embedding,
}

impl PromptParams {
    pub fn new(d_model: usize, d_h: usize, rng: &mut crate::numerics::rng::RngState) -> Self {
        use crate::backbone::INIT_STD;
        PromptParams {
            h_t: Tensor::randn(&[1, d_model], INIT_STD, rng, true),
            w_q: Tensor::randn(&[d_model, d_h], INIT_STD, rng, true),
            w_k: Tensor::randn(&[d_model, d_h], INIT_STD, rng, true),
            m_init: Tensor::randn(&[1, d_model], INIT_STD, rng, true),
        }
    }

    pub fn named_params(&self, include_recall: bool) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        if include_recall {
            out.push(("prompt.h_t".to_string(), self.h_t.clone()));
            out.push(("prompt.w_q".to_string(), self.w_q.clone()));
            out.push(("prompt.w_k".to_string(), self.w_k.clone()));
        }
        out.push(("prompt.m_init".to_string(), self.m_init.clone()));
        out
    }
}

/// FIFO ring of at most N `(segment_index, embedding)` pairs, oldest first.
/// The initial seed entry carries index −1.
#[derive(Clone)]
pub struct MemoryCache {
    capacity: usize,
    entries: VecDeque<(i64, Embedding)>,
}

impl MemoryCache {
    pub fn new(capacity: usize) -> MemoryCache {
        MemoryCache {
            capacity,
            entries: VecDeque::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn indices(&self) -> Vec<i64> {
        self.entries.iter().map(|(i, _)| *i).collect()
    }

    pub fn embeddings(&self) -> Vec<Embedding> {
        self.entries.iter().map(|(_, e)| e.clone()).collect()
    }

    /// Append; evict the oldest entry exactly when the size would exceed N.
    pub fn push(&mut self, segment_index: i64, h_mem: Embedding) -> Result<()> {
        if let Some((last, _)) = self.entries.back() {
            if segment_index <= *last {
                return Err(HmtError::Contract(format!(
                    "cache indices must be strictly increasing: {segment_index} after {last}"
                )));
            }
        }
        self.entries.push_back((segment_index, h_mem));
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
        Ok(())
    }

    /// Shrink the capacity in place (cache-size sweeps), evicting oldest.
    pub fn set_capacity(&mut self, capacity: usize) {
        self.capacity = capacity;
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
    }

    /// Stack entries into an `[n×d]` matrix, oldest first.
    pub fn stacked(&self) -> Result<Tensor> {
        let parts: Vec<Tensor> = self.entries.iter().map(|(_, e)| e.clone()).collect();
        concat_rows(&parts)
    }

    /// Replace every entry with a constant copy (BPTT window boundary).
    pub fn detach_entries(&mut self) {
        for (_, e) in self.entries.iter_mut() {
            *e = e.detach();
        }
    }
}

/// Softmax weights of one memory search, for histograms and replay checks.
#[derive(Debug, Clone)]
pub struct RecallEvent {
    pub segment_index: i64,
    pub entry_indices: Vec<i64>,
    pub weights: Vec<f64>,
}

impl RecallEvent {
    /// Highest-scoring cache entry; ties go to the most recent entry.
    pub fn argmax_entry(&self) -> (i64, f64) {
        let mut best = 0;
        for i in 1..self.weights.len() {
            if self.weights[i] >= self.weights[best] {
                best = i;
            }
        }
        (self.entry_indices[best], self.weights[best])
    }
}

/// Rolling recurrence state: the long-term cache, the sensory rows from the
/// previous segment, the previous memory embedding (no-recall mode), and the
/// segment counter. Cloning shares the underlying (immutable) embeddings.
#[derive(Clone)]
pub struct HmtState {
    pub cache: MemoryCache,
    pub sensory: Option<Tensor>,
    pub prev_mem: Embedding,
    pub next_segment: i64,
    pub last_recall: Option<RecallEvent>,
}

impl HmtState {
    /// Fresh state. In recall mode the cache is seeded with `(−1, m_init)` so
    /// the first memory search is total.
    pub fn new(cfg: &HmtConfig, prompts: &PromptParams) -> HmtState {
        let mut cache = MemoryCache::new(cfg.cache_size.max(1));
        if cfg.recall_enabled {
            cache
                .push(-1, prompts.m_init.clone())
                .expect("seeding an empty cache cannot fail");
        }
        HmtState {
            cache,
            sensory: None,
            prev_mem: prompts.m_init.clone(),
            next_segment: 0,
            last_recall: None,
        }
    }

    /// Cut gradient flow into everything carried across a window boundary.
    pub fn detach(&mut self) {
        self.cache.detach_entries();
        if let Some(s) = &self.sensory {
            self.sensory = Some(s.detach());
        }
        self.prev_mem = self.prev_mem.detach();
    }
}

/// Run the backbone over `[h_t ∘ h_n[0, j') ∘ h_t]` and keep the final row
/// as the segment summary; j' = min(j, len).
pub fn extract_representation(
    h_n: &Tensor,
    cfg: &HmtConfig,
    prompts: &PromptParams,
    backbone: &dyn Backbone,
) -> Result<Embedding> {
    let len = h_n.shape()[0];
    if len == 0 {
        return Err(HmtError::Contract(
            "extract_representation over an empty segment".to_string(),
        ));
    }
    let j = cfg.repr_len.min(len);
    let prefix = h_n.slice_rows(0, j)?;
    let augmented = concat_rows(&[prompts.h_t.clone(), prefix, prompts.h_t.clone()])?;
    let out = backbone.forward_embeddings(&augmented)?;
    out.slice_rows(out.shape()[0] - 1, 1)
}

/// Cross-attention readout over the cache: softmax(QKᵀ/√d_h)·M with no value
/// or output projection. Returns the readout and the score trace.
pub fn memory_search(
    h_sum: &Embedding,
    cache: &MemoryCache,
    prompts: &PromptParams,
) -> Result<(Embedding, RecallEvent)> {
    if cache.is_empty() {
        return Err(HmtError::Contract(
            "memory_search over an empty cache; seed it with m_init".to_string(),
        ));
    }
    let m = cache.stacked()?;
    let d_h = prompts.w_q.shape()[1];
    let q = h_sum.matmul(&prompts.w_q)?;
    let k = m.matmul(&prompts.w_k)?;
    let scores = q.matmul(&k.transpose()?)?.scale(1.0 / (d_h as f64).sqrt());
    let weights = scores.softmax_rows()?;
    let h_s = weights.matmul(&m)?;
    let event = RecallEvent {
        segment_index: -1, // caller fills in
        entry_indices: cache.indices(),
        weights: weights.to_vec(),
    };
    Ok((h_s, event))
}

/// Precomputed pieces of an incremental memory search: the query, the keys
/// and raw scores over the cache *excluding* its newest entry.
pub struct RecallScratch {
    pub q: Tensor,
    pub prefix_keys: Option<Tensor>,
    pub prefix_scores: Option<Tensor>,
    pub prefix_len: usize,
}

impl RecallScratch {
    /// Phase that can overlap the previous segment's forward pass: compute
    /// K and A = QKᵀ over all cached entries except the newest.
    pub fn precompute(
        h_sum: &Embedding,
        prefix: &[Embedding],
        prompts: &PromptParams,
    ) -> Result<RecallScratch> {
        let q = h_sum.matmul(&prompts.w_q)?;
        if prefix.is_empty() {
            return Ok(RecallScratch {
                q,
                prefix_keys: None,
                prefix_scores: None,
                prefix_len: 0,
            });
        }
        let m = concat_rows(prefix)?;
        let k = m.matmul(&prompts.w_k)?;
        let scores = q.matmul(&k.transpose()?)?;
        Ok(RecallScratch {
            q,
            prefix_keys: Some(k),
            prefix_scores: Some(scores),
            prefix_len: prefix.len(),
        })
    }
}

/// Serial tail of the incremental search: score the newest entry, join it to
/// the precomputed row, softmax, and read out. Numerically equal to
/// [`memory_search`] over the full cache.
pub fn memory_search_incremental(
    scratch: &RecallScratch,
    prefix: &[Embedding],
    new_mem: &Embedding,
    prompts: &PromptParams,
) -> Result<Embedding> {
    if scratch.prefix_len != prefix.len() {
        return Err(HmtError::Contract(format!(
            "stale recall scratch: precomputed over {} entries, cache prefix has {}",
            scratch.prefix_len,
            prefix.len()
        )));
    }
    let d_h = prompts.w_q.shape()[1];
    let k_n = new_mem.matmul(&prompts.w_k)?;
    let a_n = scratch.q.matmul(&k_n.transpose()?)?;
    let all_scores = match &scratch.prefix_scores {
        Some(a) => concat_cols(&[a.clone(), a_n])?,
        None => a_n,
    };
    let weights = all_scores.scale(1.0 / (d_h as f64).sqrt()).softmax_rows()?;
    let mut parts: Vec<Tensor> = prefix.to_vec();
    parts.push(new_mem.clone());
    let m = concat_rows(&parts)?;
    weights.matmul(&m)
}

/// Ordered concatenation `h_s ∘ sensory ∘ h_n ∘ h_s`.
pub fn augment_segment(
    h_s: &Embedding,
    sensory: Option<&Tensor>,
    h_n: &Tensor,
) -> Result<Tensor> {
    let mut parts = vec![h_s.clone()];
    if let Some(s) = sensory {
        if s.shape()[0] > 0 {
            parts.push(s.clone());
        }
    }
    parts.push(h_n.clone());
    parts.push(h_s.clone());
    concat_rows(&parts)
}

/// Backbone forward over the augmented segment; drop the leading rows, keep
/// `len` rows for logits and the final row as the new memory embedding.
pub fn process_segment(
    augmented: &Tensor,
    len: usize,
    backbone: &dyn Backbone,
) -> Result<(Tensor, Embedding)> {
    let total = augmented.shape()[0];
    if total < len + 1 {
        return Err(HmtError::Contract(format!(
            "augmented segment has {total} rows, expected at least len+1 = {}",
            len + 1
        )));
    }
    let out = backbone.forward_embeddings(augmented)?;
    let dropped = total - len - 1;
    let h_out = out.slice_rows(dropped, len)?;
    let h_mem = out.slice_rows(total - 1, 1)?;
    Ok((h_out, h_mem))
}

fn step_common(
    state: &mut HmtState,
    segment_tokens: &[u16],
    cfg: &HmtConfig,
    h_s: Embedding,
    h_n: Tensor,
    backbone: &dyn Backbone,
) -> Result<Tensor> {
    let len = segment_tokens.len();
    let augmented = augment_segment(&h_s, state.sensory.as_ref(), &h_n)?;
    let (h_out, h_mem) = process_segment(&augmented, len, backbone)?;
    let logits = backbone.logits(&h_out)?;

    if cfg.recall_enabled {
        state.cache.push(state.next_segment, h_mem.clone())?;
    }
    let keep = cfg.sensory_len.min(len);
    state.sensory = if keep > 0 {
        Some(h_n.slice_rows(len - keep, keep)?)
    } else {
        None
    };
    state.prev_mem = h_mem;
    state.next_segment += 1;
    Ok(logits)
}

/// One full segment step. With recall enabled this is the four-step
/// workflow; otherwise it delegates to [`no_recall_step`].
pub fn hmt_step(
    state: &mut HmtState,
    segment_tokens: &[u16],
    cfg: &HmtConfig,
    prompts: &PromptParams,
    backbone: &dyn Backbone,
) -> Result<Tensor> {
    if !cfg.recall_enabled {
        return no_recall_step(state, segment_tokens, cfg, prompts, backbone);
    }
    if segment_tokens.is_empty() {
        return Err(HmtError::Contract("hmt_step over an empty segment".to_string()));
    }
    let h_n = backbone.embed(segment_tokens)?;
    let h_sum = extract_representation(&h_n, cfg, prompts, backbone)?;
    let (h_s, mut event) = memory_search(&h_sum, &state.cache, prompts)?;
    event.segment_index = state.next_segment;
    state.last_recall = Some(event);
    step_common(state, segment_tokens, cfg, h_s, h_n, backbone)
}

/// The no-recall (single memory token) mode: the memorization prompt is the
/// previous segment's memory embedding, no summary and no cache search.
pub fn no_recall_step(
    state: &mut HmtState,
    segment_tokens: &[u16],
    cfg: &HmtConfig,
    _prompts: &PromptParams,
    backbone: &dyn Backbone,
) -> Result<Tensor> {
    if segment_tokens.is_empty() {
        return Err(HmtError::Contract(
            "no_recall_step over an empty segment".to_string(),
        ));
    }
    let h_n = backbone.embed(segment_tokens)?;
    let h_s = state.prev_mem.clone();
    state.last_recall = None;
    step_common(state, segment_tokens, cfg, h_s, h_n, backbone)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneConfig, IdentityBackbone, TransformerBackbone};
    use crate::numerics::rng::RngState;

    fn tiny_cfg() -> (BackboneConfig, HmtConfig) {
        (
            BackboneConfig {
                d_model: 16,
                n_layers: 1,
                n_heads: 2,
                d_ff: 32,
                vocab_size: 256,
                max_pos: 16,
            },
            HmtConfig {
                segment_len: 8,
                sensory_len: 2,
                repr_len: 4,
                cache_size: 8,
                d_h: 16,
                recall_enabled: true,
                unroll: 3,
            },
        )
    }

    fn rand_embedding(d: usize, rng: &mut RngState) -> Embedding {
        Tensor::randn(&[1, d], 1.0, rng, false)
    }

    /// Independent dense attention: plain loops on raw slices, no Tensor ops.
    fn brute_force_search(
        h_sum: &[f64],
        entries: &[Vec<f64>],
        w_q: &[f64],
        w_k: &[f64],
        d: usize,
        d_h: usize,
    ) -> (Vec<f64>, Vec<f64>) {
        let q: Vec<f64> = (0..d_h)
            .map(|j| (0..d).map(|i| h_sum[i] * w_q[i * d_h + j]).sum())
            .collect();
        let mut scores = Vec::with_capacity(entries.len());
        for e in entries {
            let k: Vec<f64> = (0..d_h)
                .map(|j| (0..d).map(|i| e[i] * w_k[i * d_h + j]).sum())
                .collect();
            let dot: f64 = (0..d_h).map(|j| q[j] * k[j]).sum();
            scores.push(dot / (d_h as f64).sqrt());
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let weights: Vec<f64> = exps.iter().map(|e| e / z).collect();
        let mut out = vec![0.0; d];
        for (w, e) in weights.iter().zip(entries) {
            for i in 0..d {
                out[i] += w * e[i];
            }
        }
        (out, scores)
    }

    #[test]
    fn extract_representation_returns_one_row() {
        let (bcfg, hcfg) = tiny_cfg();
        let mut rng = RngState::new(1);
        let bb = TransformerBackbone::new(bcfg, &mut rng).unwrap();
        let prompts = PromptParams::new(16, 16, &mut rng);
        for len in [1usize, 3, 8] {
            let h_n = Tensor::randn(&[len, 16], 1.0, &mut rng, false);
            let h_sum = extract_representation(&h_n, &hcfg, &prompts, &bb).unwrap();
            assert_eq!(h_sum.shape(), &[1, 16]);
        }
    }

    #[test]
    fn extract_representation_passes_prompt_through_identity_backbone() {
        let mut rng = RngState::new(2);
        let stub = IdentityBackbone::new(16, 256, &mut rng);
        let prompts = PromptParams::new(16, 16, &mut rng);
        let (_, hcfg) = tiny_cfg();
        let h_n = Tensor::randn(&[8, 16], 1.0, &mut rng, false);
        let h_sum = extract_representation(&h_n, &hcfg, &prompts, &stub).unwrap();
        assert_eq!(h_sum.to_vec(), prompts.h_t.to_vec());
    }

    #[test]
    fn full_and_half_prefix_lengths_are_both_legal() {
        let (bcfg, mut hcfg) = tiny_cfg();
        let mut rng = RngState::new(3);
        let bb = TransformerBackbone::new(bcfg, &mut rng).unwrap();
        let prompts = PromptParams::new(16, 16, &mut rng);
        let h_n = Tensor::randn(&[8, 16], 1.0, &mut rng, false);
        for j in [hcfg.segment_len / 2, hcfg.segment_len] {
            hcfg.repr_len = j;
            hcfg.validate().unwrap();
            extract_representation(&h_n, &hcfg, &prompts, &bb).unwrap();
        }
    }

    #[test]
    fn single_entry_search_returns_the_entry_exactly() {
        let mut rng = RngState::new(4);
        let prompts = PromptParams::new(16, 16, &mut rng);
        let e = rand_embedding(16, &mut rng);
        let mut cache = MemoryCache::new(4);
        cache.push(0, e.clone()).unwrap();
        let h_sum = rand_embedding(16, &mut rng);
        let (h_s, event) = memory_search(&h_sum, &cache, &prompts).unwrap();
        assert_eq!(h_s.to_vec(), e.to_vec());
        assert_eq!(event.weights, vec![1.0]);
    }

    #[test]
    fn two_identical_entries_return_the_shared_vector() {
        let mut rng = RngState::new(5);
        let prompts = PromptParams::new(16, 16, &mut rng);
        let e = rand_embedding(16, &mut rng);
        let mut cache = MemoryCache::new(4);
        cache.push(0, e.clone()).unwrap();
        cache.push(1, e.clone()).unwrap();
        let h_sum = rand_embedding(16, &mut rng);
        let (h_s, event) = memory_search(&h_sum, &cache, &prompts).unwrap();
        for (a, b) in h_s.to_vec().iter().zip(e.to_vec()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((event.weights[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn search_matches_brute_force_oracle() {
        let mut rng = RngState::new(6);
        let prompts = PromptParams::new(16, 12, &mut rng);
        let mut cache = MemoryCache::new(16);
        let mut raw = Vec::new();
        for i in 0..8 {
            let e = rand_embedding(16, &mut rng);
            raw.push(e.to_vec());
            cache.push(i, e).unwrap();
        }
        let h_sum = rand_embedding(16, &mut rng);
        let (h_s, _) = memory_search(&h_sum, &cache, &prompts).unwrap();
        let (expect, _) = brute_force_search(
            &h_sum.to_vec(),
            &raw,
            &prompts.w_q.to_vec(),
            &prompts.w_k.to_vec(),
            16,
            12,
        );
        for (a, b) in h_s.to_vec().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn empty_cache_search_is_a_contract_error() {
        let mut rng = RngState::new(7);
        let prompts = PromptParams::new(8, 8, &mut rng);
        let cache = MemoryCache::new(4);
        let h_sum = rand_embedding(8, &mut rng);
        assert!(matches!(
            memory_search(&h_sum, &cache, &prompts),
            Err(HmtError::Contract(_))
        ));
    }

    #[test]
    fn incremental_with_empty_prefix_returns_the_new_entry() {
        let mut rng = RngState::new(8);
        let prompts = PromptParams::new(16, 16, &mut rng);
        let h_sum = rand_embedding(16, &mut rng);
        let new_mem = rand_embedding(16, &mut rng);
        let scratch = RecallScratch::precompute(&h_sum, &[], &prompts).unwrap();
        let h_s = memory_search_incremental(&scratch, &[], &new_mem, &prompts).unwrap();
        assert_eq!(h_s.to_vec(), new_mem.to_vec());
    }

    #[test]
    fn incremental_equals_monolithic_search() {
        let mut rng = RngState::new(9);
        for case in 0..40 {
            let d = if case % 2 == 0 { 8 } else { 16 };
            let prompts = PromptParams::new(d, d, &mut rng);
            let n = 1 + (rng.next_below(8) as usize);
            let mut cache = MemoryCache::new(16);
            let mut entries = Vec::new();
            for i in 0..n {
                let e = rand_embedding(d, &mut rng);
                entries.push(e.clone());
                cache.push(i as i64, e).unwrap();
            }
            let h_sum = rand_embedding(d, &mut rng);
            let (mono, _) = memory_search(&h_sum, &cache, &prompts).unwrap();
            let prefix = &entries[..n - 1];
            let scratch = RecallScratch::precompute(&h_sum, prefix, &prompts).unwrap();
            let inc =
                memory_search_incremental(&scratch, prefix, &entries[n - 1], &prompts).unwrap();
            for (a, b) in mono.to_vec().iter().zip(inc.to_vec()) {
                assert!((a - b).abs() < 1e-10, "case {case}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn stale_scratch_is_rejected() {
        let mut rng = RngState::new(10);
        let prompts = PromptParams::new(8, 8, &mut rng);
        let h_sum = rand_embedding(8, &mut rng);
        let e0 = rand_embedding(8, &mut rng);
        let e1 = rand_embedding(8, &mut rng);
        let scratch = RecallScratch::precompute(&h_sum, &[e0.clone()], &prompts).unwrap();
        let err =
            memory_search_incremental(&scratch, &[e0, e1.clone()], &e1, &prompts).unwrap_err();
        assert!(matches!(err, HmtError::Contract(_)));
    }

    #[test]
    fn augment_shapes_follow_the_concatenation() {
        let d = 16;
        let h_s = Tensor::zeros(&[1, d]);
        let h_n = Tensor::zeros(&[8, d]);
        let aug = augment_segment(&h_s, None, &h_n).unwrap();
        assert_eq!(aug.shape(), &[10, d]); // L + 2 with k = 0

        // Paper-default arithmetic: 1 + 32 + 256 + 1 = 290 rows.
        let sensory = Tensor::zeros(&[32, d]);
        let seg = Tensor::zeros(&[256, d]);
        let aug = augment_segment(&h_s, Some(&sensory), &seg).unwrap();
        assert_eq!(aug.shape(), &[290, d]);
    }

    #[test]
    fn augment_rejects_width_mismatch() {
        let h_s = Tensor::zeros(&[1, 16]);
        let h_n = Tensor::zeros(&[4, 8]);
        assert!(matches!(
            augment_segment(&h_s, None, &h_n),
            Err(HmtError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn process_segment_splits_rows_as_documented() {
        let (bcfg, _) = tiny_cfg();
        let mut rng = RngState::new(11);
        let bb = TransformerBackbone::new(bcfg, &mut rng).unwrap();
        let aug = Tensor::randn(&[1 + 2 + 8 + 1, 16], 0.5, &mut rng, false);
        let (h_out, h_mem) = process_segment(&aug, 8, &bb).unwrap();
        assert_eq!(h_out.shape(), &[8, 16]);
        assert_eq!(h_mem.shape(), &[1, 16]);
    }

    #[test]
    fn gradient_reaches_memorization_prompt_and_sensory_rows() {
        let (bcfg, _) = tiny_cfg();
        let mut rng = RngState::new(12);
        let bb = TransformerBackbone::new(bcfg, &mut rng).unwrap();
        let h_s = Tensor::randn(&[1, 16], 0.5, &mut rng, true);
        let sensory = Tensor::randn(&[2, 16], 0.5, &mut rng, true);
        let h_n = Tensor::randn(&[8, 16], 0.5, &mut rng, false);
        let aug = augment_segment(&h_s, Some(&sensory), &h_n).unwrap();
        let (_, h_mem) = process_segment(&aug, 8, &bb).unwrap();
        h_mem.sum().backward().unwrap();
        assert!(h_s.grad().unwrap().iter().any(|&g| g != 0.0));
        assert!(sensory.grad().unwrap().iter().any(|&g| g != 0.0));
    }

    #[test]
    fn first_recall_step_reads_back_m_init_exactly() {
        let (bcfg, hcfg) = tiny_cfg();
        let mut rng = RngState::new(13);
        let bb = TransformerBackbone::new(bcfg, &mut rng).unwrap();
        let prompts = PromptParams::new(16, 16, &mut rng);
        let state = HmtState::new(&hcfg, &prompts);
        assert_eq!(state.cache.indices(), vec![-1]);
        let h_n = Tensor::randn(&[8, 16], 1.0, &mut rng, false);
        let h_sum = extract_representation(&h_n, &hcfg, &prompts, &bb).unwrap();
        let (h_s, _) = memory_search(&h_sum, &state.cache, &prompts).unwrap();
        assert_eq!(h_s.to_vec(), prompts.m_init.to_vec());
    }

    #[test]
    fn one_full_segment_produces_l_by_v_logits() {
        let (bcfg, hcfg) = tiny_cfg();
        let mut rng = RngState::new(14);
        let bb = TransformerBackbone::new(bcfg, &mut rng).unwrap();
        let prompts = PromptParams::new(16, 16, &mut rng);
        let mut state = HmtState::new(&hcfg, &prompts);
        let tokens: Vec<u16> = (0..8).map(|_| rng.next_below(256) as u16).collect();
        let logits = hmt_step(&mut state, &tokens, &hcfg, &prompts, &bb).unwrap();
        assert_eq!(logits.shape(), &[8, 256]);
        assert_eq!(state.next_segment, 1);
        assert_eq!(state.cache.indices(), vec![-1, 0]);
    }

    #[test]
    fn second_step_sensory_rows_come_from_the_previous_segment() {
        let (bcfg, hcfg) = tiny_cfg();
        let mut rng = RngState::new(15);
        let bb = TransformerBackbone::new(bcfg, &mut rng).unwrap();
        let prompts = PromptParams::new(16, 16, &mut rng);
        let mut state = HmtState::new(&hcfg, &prompts);
        let seg1: Vec<u16> = (0..8).map(|_| rng.next_below(256) as u16).collect();
        hmt_step(&mut state, &seg1, &hcfg, &prompts, &bb).unwrap();
        let expect = bb
            .embed(&seg1)
            .unwrap()
            .slice_rows(8 - hcfg.sensory_len, hcfg.sensory_len)
            .unwrap();
        assert_eq!(
            state.sensory.as_ref().unwrap().to_vec(),
            expect.to_vec()
        );
    }

    #[test]
    fn cache_fifo_keeps_the_most_recent_entries() {
        let mut rng = RngState::new(16);
        let mut cache = MemoryCache::new(3);
        for i in 0..5 {
            cache.push(i, rand_embedding(4, &mut rng)).unwrap();
        }
        assert_eq!(cache.indices(), vec![2, 3, 4]);

        let mut one = MemoryCache::new(1);
        for i in 0..4 {
            one.push(i, rand_embedding(4, &mut rng)).unwrap();
        }
        assert_eq!(one.indices(), vec![3]);
    }

    #[test]
    fn cache_rejects_non_increasing_indices() {
        let mut rng = RngState::new(17);
        let mut cache = MemoryCache::new(4);
        cache.push(3, rand_embedding(4, &mut rng)).unwrap();
        assert!(cache.push(3, rand_embedding(4, &mut rng)).is_err());
        assert!(cache.push(1, rand_embedding(4, &mut rng)).is_err());
    }

    #[test]
    fn readout_stays_in_the_convex_hull_of_cache_entries() {
        let mut rng = RngState::new(18);
        for _ in 0..20 {
            let d = 8;
            let prompts = PromptParams::new(d, d, &mut rng);
            let n = 2 + (rng.next_below(6) as usize);
            let mut cache = MemoryCache::new(16);
            let mut raw = Vec::new();
            for i in 0..n {
                let e = rand_embedding(d, &mut rng);
                raw.push(e.to_vec());
                cache.push(i as i64, e).unwrap();
            }
            let h_sum = rand_embedding(d, &mut rng);
            let (h_s, event) = memory_search(&h_sum, &cache, &prompts).unwrap();
            let sum: f64 = event.weights.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            let out = h_s.to_vec();
            for c in 0..d {
                let lo = raw.iter().map(|e| e[c]).fold(f64::INFINITY, f64::min);
                let hi = raw.iter().map(|e| e[c]).fold(f64::NEG_INFINITY, f64::max);
                assert!(
                    out[c] >= lo - 1e-12 && out[c] <= hi + 1e-12,
                    "coordinate {c} escaped the hull"
                );
            }
        }
    }

    #[test]
    fn scaling_cache_and_query_preserves_the_argmax() {
        let mut rng = RngState::new(19);
        for _ in 0..10 {
            let d = 8;
            let prompts = PromptParams::new(d, d, &mut rng);
            let n = 3 + (rng.next_below(5) as usize);
            let entries: Vec<Embedding> = (0..n).map(|_| rand_embedding(d, &mut rng)).collect();
            let h_sum = rand_embedding(d, &mut rng);
            let c = 2.5;

            let run = |scale: f64| {
                let mut cache = MemoryCache::new(16);
                for (i, e) in entries.iter().enumerate() {
                    cache.push(i as i64, e.scale(scale)).unwrap();
                }
                let (_, ev) = memory_search(&h_sum.scale(scale), &cache, &prompts).unwrap();
                ev
            };
            let base = run(1.0);
            let scaled = run(c);
            assert_eq!(base.argmax_entry().0, scaled.argmax_entry().0);

            // Raw score row scales by c² (checked via the oracle).
            let raw: Vec<Vec<f64>> = entries.iter().map(|e| e.to_vec()).collect();
            let raw_scaled: Vec<Vec<f64>> =
                entries.iter().map(|e| e.scale(c).to_vec()).collect();
            let (_, s1) = brute_force_search(
                &h_sum.to_vec(),
                &raw,
                &prompts.w_q.to_vec(),
                &prompts.w_k.to_vec(),
                d,
                d,
            );
            let (_, s2) = brute_force_search(
                &h_sum.scale(c).to_vec(),
                &raw_scaled,
                &prompts.w_q.to_vec(),
                &prompts.w_k.to_vec(),
                d,
                d,
            );
            for (a, b) in s1.iter().zip(&s2) {
                assert!((b - a * c * c).abs() < 1e-9 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn no_recall_first_segment_uses_m_init() {
        let (bcfg, mut hcfg) = tiny_cfg();
        hcfg.recall_enabled = false;
        let mut rng = RngState::new(20);
        let bb = TransformerBackbone::new(bcfg, &mut rng).unwrap();
        let prompts = PromptParams::new(16, 16, &mut rng);
        let state = HmtState::new(&hcfg, &prompts);
        assert_eq!(state.prev_mem.to_vec(), prompts.m_init.to_vec());
        assert!(state.cache.is_empty());
        let _ = bb;
    }

    #[test]
    fn recall_with_single_slot_cache_matches_no_recall_logits() {
        let (bcfg, hcfg) = tiny_cfg();
        let mut rng = RngState::new(21);
        let tokens: Vec<u16> = (0..8 * 4).map(|_| rng.next_below(256) as u16).collect();

        let run = |recall: bool| {
            let mut cfg = hcfg.clone();
            cfg.recall_enabled = recall;
            cfg.cache_size = 1;
            let mut seed_rng = RngState::new(77);
            let bb = TransformerBackbone::new(
                BackboneConfig {
                    d_model: 16,
                    n_layers: 1,
                    n_heads: 2,
                    d_ff: 32,
                    vocab_size: 256,
                    max_pos: 16,
                },
                &mut seed_rng,
            )
            .unwrap();
            let prompts = PromptParams::new(16, 16, &mut seed_rng);
            let mut state = HmtState::new(&cfg, &prompts);
            let mut all = Vec::new();
            for seg in tokens.chunks(8) {
                let logits = hmt_step(&mut state, seg, &cfg, &prompts, &bb).unwrap();
                all.extend(logits.to_vec());
            }
            all
        };
        let with = run(true);
        let without = run(false);
        assert_eq!(with.len(), without.len());
        assert!(with
            .iter()
            .zip(&without)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        let _ = bcfg;
    }

    #[test]
    fn unrolled_loss_reaches_h_t_and_m_init() {
        let (bcfg, hcfg) = tiny_cfg();
        let mut rng = RngState::new(22);
        let bb = TransformerBackbone::new(bcfg, &mut rng).unwrap();
        let prompts = PromptParams::new(16, 16, &mut rng);
        let mut state = HmtState::new(&hcfg, &prompts);
        let tokens: Vec<u16> = (0..8 * 3 + 1).map(|_| rng.next_below(256) as u16).collect();
        let mut losses = Vec::new();
        for s in 0..3 {
            let seg = &tokens[s * 8..(s + 1) * 8];
            let logits = hmt_step(&mut state, seg, &hcfg, &prompts, &bb).unwrap();
            let targets: Vec<usize> =
                tokens[s * 8 + 1..(s + 1) * 8 + 1].iter().map(|&t| t as usize).collect();
            losses.push(logits.cross_entropy(&targets).unwrap());
        }
        let mut loss = losses[0].clone();
        for l in &losses[1..] {
            loss = loss.add(l).unwrap();
        }
        loss.backward().unwrap();
        let ht_norm: f64 = prompts.h_t.grad().unwrap().iter().map(|g| g * g).sum();
        let mi_norm: f64 = prompts.m_init.grad().unwrap().iter().map(|g| g * g).sum();
        assert!(ht_norm > 0.0, "h_t received no gradient");
        assert!(mi_norm > 0.0, "m_init received no gradient");
    }

    #[test]
    fn detached_state_blocks_gradients() {
        let (bcfg, hcfg) = tiny_cfg();
        let mut rng = RngState::new(23);
        let bb = TransformerBackbone::new(bcfg, &mut rng).unwrap();
        let prompts = PromptParams::new(16, 16, &mut rng);
        let mut state = HmtState::new(&hcfg, &prompts);
        let tokens: Vec<u16> = (0..17).map(|_| rng.next_below(256) as u16).collect();
        hmt_step(&mut state, &tokens[0..8], &hcfg, &prompts, &bb).unwrap();
        state.detach();
        let logits = hmt_step(&mut state, &tokens[8..16], &hcfg, &prompts, &bb).unwrap();
        let targets: Vec<usize> = tokens[9..17].iter().map(|&t| t as usize).collect();
        logits.cross_entropy(&targets).unwrap().backward().unwrap();
        // m_init only entered through the (now detached) cache seed, so it
        // must receive zero gradient; h_t still flows via this window's
        // representation extraction.
        assert!(prompts.m_init.grad().unwrap().iter().all(|&g| g == 0.0));
        assert!(prompts.h_t.grad().unwrap().iter().any(|&g| g != 0.0));
    }
}
