//! Corpus ingestion and dataset construction: concatenation/splitting,
//! interleaving, dilation, multi-context QA assembly, and a synthetic
//! planted-recall task for verifying the benefit of memory recall.
//!
//! Tokens are bytes (vocab 256), so any text file is a valid corpus. All
//! builders are pure functions of their inputs and seed.

use std::path::Path;

use crate::error::{HmtError, Result};
use crate::numerics::rng::RngState;

pub const FILLER_TOKEN: u16 = 36; // '$'
pub const QA_SEPARATOR: u16 = 10; // '\n', documented separator for QA assembly

/// Identity byte mapping, vocab 256.
pub fn byte_tokenize(text: &[u8]) -> Vec<u16> {
    text.iter().map(|&b| b as u16).collect()
}

pub fn tokens_to_bytes(tokens: &[u16]) -> Vec<u8> {
    tokens.iter().map(|&t| t as u8).collect()
}

// ---- corpus ----------------------------------------------------------------

/// Train/val/test fractions; the assignment is order-based (first `train`
/// share of samples, then `val`, then the rest).
#[derive(Debug, Clone, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 0.75,
            val: 0.15,
            test: 0.10,
            seed: 0,
        }
    }
}

pub struct Corpus {
    pub samples: Vec<Vec<u16>>,
    pub provenance: Vec<String>,
    pub split: SplitSpec,
}

impl Corpus {
    /// Blank lines separate samples; a file without blank lines is one sample.
    pub fn from_text(text: &str, provenance: &str) -> Corpus {
        let samples: Vec<Vec<u16>> = text
            .split("\n\n")
            .filter(|s| !s.trim().is_empty())
            .map(|s| byte_tokenize(s.as_bytes()))
            .collect();
        Corpus {
            samples,
            provenance: vec![provenance.to_string()],
            split: SplitSpec::default(),
        }
    }

    pub fn from_text_file(path: &Path) -> Result<Corpus> {
        let text = std::fs::read_to_string(path)?;
        if text.is_empty() {
            return Err(HmtError::Data(format!("empty corpus file {}", path.display())));
        }
        Ok(Corpus::from_text(&text, &path.display().to_string()))
    }

    /// Sample index boundaries: [0, a) train, [a, b) val, [b, n) test.
    /// On very small corpora the train share is rounded up to one sample so
    /// training always has data.
    pub fn split_points(&self) -> (usize, usize) {
        let n = self.samples.len();
        let a = ((n as f64 * self.split.train).floor() as usize)
            .max(usize::from(n > 0))
            .min(n);
        let b = ((n as f64 * (self.split.train + self.split.val)).floor() as usize)
            .clamp(a, n);
        (a, b)
    }

    fn join(&self, range: std::ops::Range<usize>) -> Vec<u16> {
        let mut out = Vec::new();
        for s in &self.samples[range] {
            out.extend_from_slice(s);
        }
        out
    }

    pub fn train_tokens(&self) -> Vec<u16> {
        let (a, _) = self.split_points();
        self.join(0..a)
    }

    pub fn val_tokens(&self) -> Vec<u16> {
        let (a, b) = self.split_points();
        self.join(a..b)
    }

    pub fn test_tokens(&self) -> Vec<u16> {
        let (_, b) = self.split_points();
        self.join(b..self.samples.len())
    }

    pub fn all_tokens(&self) -> Vec<u16> {
        self.join(0..self.samples.len())
    }
}

// ---- stream builders --------------------------------------------------------

/// Concatenate samples in order, then re-chunk to `target_length` (the final
/// short chunk is kept). Chunks of concatenated samples contain context
/// switches wherever one sample ends inside a chunk.
pub fn concat_samples(samples: &[Vec<u16>], target_length: usize) -> Result<Vec<Vec<u16>>> {
    if target_length == 0 {
        return Err(HmtError::Config("target_length must be >= 1".to_string()));
    }
    let mut flat = Vec::new();
    for s in samples {
        flat.extend_from_slice(s);
    }
    Ok(flat
        .chunks(target_length)
        .map(|c| c.to_vec())
        .collect())
}

/// Alternate fixed-size chunks of `a` and `b`; once one side runs out its
/// remaining chunks simply stop appearing, so the leftover tail of the other
/// side ends up appended in order.
pub fn interleave_samples(a: &[u16], b: &[u16], chunk: usize) -> Result<Vec<u16>> {
    if chunk == 0 {
        return Err(HmtError::Config("chunk must be >= 1".to_string()));
    }
    let mut out = Vec::with_capacity(a.len() + b.len());
    let mut i = 0;
    loop {
        let sa = &a[(i * chunk).min(a.len())..((i + 1) * chunk).min(a.len())];
        let sb = &b[(i * chunk).min(b.len())..((i + 1) * chunk).min(b.len())];
        if sa.is_empty() && sb.is_empty() {
            break;
        }
        out.extend_from_slice(sa);
        out.extend_from_slice(sb);
        i += 1;
    }
    Ok(out)
}

/// Invert [`interleave_samples`] given the original lengths.
pub fn deinterleave_samples(
    stream: &[u16],
    len_a: usize,
    len_b: usize,
    chunk: usize,
) -> Result<(Vec<u16>, Vec<u16>)> {
    if chunk == 0 {
        return Err(HmtError::Config("chunk must be >= 1".to_string()));
    }
    if stream.len() != len_a + len_b {
        return Err(HmtError::Data(format!(
            "stream length {} does not match {len_a} + {len_b}",
            stream.len()
        )));
    }
    let mut a = Vec::with_capacity(len_a);
    let mut b = Vec::with_capacity(len_b);
    let mut pos = 0;
    let mut i = 0;
    while pos < stream.len() {
        let take_a = chunk.min(len_a.saturating_sub(i * chunk));
        a.extend_from_slice(&stream[pos..pos + take_a]);
        pos += take_a;
        let take_b = chunk.min(len_b.saturating_sub(i * chunk));
        b.extend_from_slice(&stream[pos..pos + take_b]);
        pos += take_b;
        i += 1;
    }
    Ok((a, b))
}

/// After every `run` content tokens (including a final partial block),
/// insert `run` filler tokens. Output length is at most 2·|s| + run.
pub fn dilate_sample(s: &[u16], filler_token: u16, run: usize) -> Result<Vec<u16>> {
    if run == 0 {
        return Err(HmtError::Config("run must be >= 1".to_string()));
    }
    let mut out = Vec::with_capacity(2 * s.len() + run);
    for block in s.chunks(run) {
        out.extend_from_slice(block);
        out.extend(std::iter::repeat(filler_token).take(run));
    }
    Ok(out)
}

/// Invert [`dilate_sample`] positionally (content may legitimately contain
/// the filler byte, so stripping by value would corrupt it).
pub fn strip_dilation(stream: &[u16], run: usize) -> Result<Vec<u16>> {
    if run == 0 {
        return Err(HmtError::Config("run must be >= 1".to_string()));
    }
    let mut out = Vec::with_capacity(stream.len() / 2);
    let mut pos = 0;
    while pos < stream.len() {
        let content_end = (pos + run).min(stream.len());
        // A block is `content` followed by exactly `run` fillers; the final
        // content block may be short, in which case the fillers start early.
        let remaining = stream.len() - pos;
        let content_len = if remaining >= 2 * run {
            run
        } else {
            remaining.saturating_sub(run)
        };
        out.extend_from_slice(&stream[pos..pos + content_len]);
        pos += content_len + run;
        let _ = content_end;
    }
    Ok(out)
}

// ---- question answering ------------------------------------------------------

/// Three-way short answer, rendered as fixed byte strings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QaLabel {
    Yes,
    No,
    Maybe,
}

impl QaLabel {
    pub fn render(&self) -> &'static [u8] {
        match self {
            QaLabel::Yes => b"yes",
            QaLabel::No => b"no",
            QaLabel::Maybe => b"maybe",
        }
    }

    pub fn all() -> [QaLabel; 3] {
        [QaLabel::Yes, QaLabel::No, QaLabel::Maybe]
    }
}

#[derive(Debug, Clone)]
pub struct QaTuple {
    pub context: Vec<u16>,
    pub question: Vec<u16>,
    pub answer: Vec<u16>,
    pub short_label: Option<QaLabel>,
}

impl QaTuple {
    pub fn new(
        context: Vec<u16>,
        question: Vec<u16>,
        answer: Vec<u16>,
        short_label: Option<QaLabel>,
    ) -> Result<QaTuple> {
        if context.is_empty() || question.is_empty() {
            return Err(HmtError::Data(
                "QA tuples require non-empty context and question".to_string(),
            ));
        }
        Ok(QaTuple {
            context,
            question,
            answer,
            short_label,
        })
    }
}

/// One assembled sequence `C₀C₁…C_{M−1} ∘ SEP ∘ Q_i ∘ SEP ∘ A_i` with spans
/// recorded as (start, length) into `tokens`.
#[derive(Debug, Clone)]
pub struct QaSequence {
    pub tokens: Vec<u16>,
    pub question_span: (usize, usize),
    pub answer_span: (usize, usize),
    pub label: Option<QaLabel>,
}

/// Concatenate the first `m` contexts into a shared prefix and append each
/// tuple's question and answer, producing `m` sequences.
pub fn build_qa_sequences(tuples: &[QaTuple], m: usize) -> Result<Vec<QaSequence>> {
    if m == 0 {
        return Err(HmtError::Data("build_qa_sequences requires M >= 1".to_string()));
    }
    if m > tuples.len() {
        return Err(HmtError::Data(format!(
            "M = {m} but only {} tuples supplied",
            tuples.len()
        )));
    }
    let mut prefix = Vec::new();
    for t in &tuples[..m] {
        prefix.extend_from_slice(&t.context);
    }
    let mut out = Vec::with_capacity(m);
    for t in &tuples[..m] {
        let mut tokens = prefix.clone();
        tokens.push(QA_SEPARATOR);
        let q_start = tokens.len();
        tokens.extend_from_slice(&t.question);
        tokens.push(QA_SEPARATOR);
        let a_start = tokens.len();
        tokens.extend_from_slice(&t.answer);
        out.push(QaSequence {
            tokens,
            question_span: (q_start, t.question.len()),
            answer_span: (a_start, t.answer.len()),
            label: t.short_label,
        });
    }
    Ok(out)
}

/// Synthetic QA tuples: each context is a seeded slice of `source` with the
/// answer planted inside it ("answer: <label>"), so answering requires
/// consulting the owning context. Labels rotate through the 3-way set.
pub fn synth_qa_tuples(
    source: &[u16],
    count: usize,
    ctx_len: usize,
    seed: u64,
) -> Result<Vec<QaTuple>> {
    if source.len() < ctx_len || ctx_len == 0 {
        return Err(HmtError::Data(format!(
            "source of {} tokens cannot supply contexts of {ctx_len}",
            source.len()
        )));
    }
    let mut rng = RngState::new(RngState::derive(seed, crate::recurrence::seed_streams::DATA));
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let label = QaLabel::all()[i % 3];
        let offset = rng.next_below((source.len() - ctx_len + 1) as u64) as usize;
        let mut context = source[offset..offset + ctx_len].to_vec();
        context.extend_from_slice(&byte_tokenize(b" answer: "));
        context.extend_from_slice(&byte_tokenize(label.render()));
        context.push(QA_SEPARATOR);
        let question = byte_tokenize(format!("question {i}: what is the answer?").as_bytes());
        let answer = byte_tokenize(label.render());
        out.push(QaTuple::new(context, question, answer, Some(label))?);
    }
    Ok(out)
}

// ---- planted recall -----------------------------------------------------------

pub const QUERY_MARK: u8 = b'?';
pub const BIND_MARK: u8 = b'=';
const DISTRACTORS: &[u8] = b"0123456789";

/// Shape of the planted key/value retrieval task. Every binding segment ends
/// in `K=v₁…v_V` at fixed positions; the query segment ends in `?K=v₁…v_V`
/// with the value tokens position-aligned to the binding segments, so
/// retrieval does not additionally have to solve an alignment problem.
#[derive(Debug, Clone)]
pub struct PlantedTask {
    pub num_segments: usize,
    pub segment_len: usize,
    pub key_alphabet: Vec<u8>,
    pub value_alphabet: Vec<u8>,
    /// Value tokens per binding (the answer span length).
    pub value_len: usize,
    /// Query distance in segments: the queried key was bound this many
    /// segments before the query segment.
    pub distance: usize,
}

/// A generated episode: `num_segments` binding segments, then one query
/// segment whose key was bound exactly `distance` segments earlier. The
/// queried value tuple appears exactly once before the query, so retrieval
/// is unambiguous.
#[derive(Debug, Clone)]
pub struct PlantedEpisode {
    pub tokens: Vec<u16>,
    /// Positions of the answer (value) tokens inside the query segment.
    pub answer_positions: Vec<usize>,
    pub segment_len: usize,
    pub num_segments: usize,
    pub distance: usize,
    pub query_key: u8,
    pub expected_value: Vec<u8>,
}

pub fn gen_planted_recall(task: &PlantedTask, seed: u64) -> Result<PlantedEpisode> {
    let PlantedTask {
        num_segments,
        segment_len,
        value_len,
        distance,
        ..
    } = *task;
    if num_segments == 0 || distance == 0 || distance > num_segments {
        return Err(HmtError::Config(format!(
            "need 1 <= distance <= num_segments, got distance {distance}, segments {num_segments}"
        )));
    }
    if value_len == 0 {
        return Err(HmtError::Config("value_len must be >= 1".to_string()));
    }
    if segment_len < value_len + 4 {
        return Err(HmtError::Config(format!(
            "segment_len {segment_len} too short for ?K= plus {value_len} value tokens"
        )));
    }
    if num_segments > task.key_alphabet.len() {
        return Err(HmtError::Config(format!(
            "key alphabet must cover {num_segments} distinct keys"
        )));
    }
    if num_segments > task.value_alphabet.len() {
        return Err(HmtError::Config(format!(
            "value alphabet must cover {num_segments} distinct values"
        )));
    }
    let reserved: Vec<u8> = DISTRACTORS
        .iter()
        .chain([QUERY_MARK, BIND_MARK].iter())
        .cloned()
        .collect();
    for (name, alpha) in [("key", &task.key_alphabet), ("value", &task.value_alphabet)] {
        if alpha.is_empty() {
            return Err(HmtError::Config(format!("{name} alphabet is empty")));
        }
        for &b in alpha.iter() {
            if reserved.contains(&b) {
                return Err(HmtError::Config(format!(
                    "{name} alphabet collides with reserved byte {:?}",
                    b as char
                )));
            }
            if name == "key" && task.value_alphabet.contains(&b) {
                return Err(HmtError::Config(format!(
                    "alphabet collision: byte {:?} is both key and value",
                    b as char
                )));
            }
        }
    }

    let mut rng = RngState::new(seed);
    let keys = sample_distinct(&task.key_alphabet, num_segments, &mut rng);
    // One distinct value byte per segment, rendered `value_len` times: the
    // first answer position tests retrieval, the repeats are copyable
    // locally and keep the answer span trained as a span.
    let values: Vec<Vec<u8>> = sample_distinct(&task.value_alphabet, num_segments, &mut rng)
        .into_iter()
        .map(|v| vec![v; value_len])
        .collect();

    let mut tokens = Vec::with_capacity((num_segments + 1) * segment_len);
    // Padding is one seeded digit repeated across the segment: distractors
    // stay unpredictable across segments but carry almost no entropy inside
    // one, so nearly all reducible loss sits on the binding structure and
    // the query's answer span.
    let mut push_distractors = |tokens: &mut Vec<u16>, n: usize, rng: &mut RngState| {
        let byte = DISTRACTORS[rng.next_below(DISTRACTORS.len() as u64) as usize];
        for _ in 0..n {
            tokens.push(byte as u16);
        }
    };
    // Binding segments: [d … d, K, =, v₁…v_V], the binding at the very end.
    for i in 0..num_segments {
        push_distractors(&mut tokens, segment_len - 2 - value_len, &mut rng);
        tokens.push(keys[i] as u16);
        tokens.push(BIND_MARK as u16);
        for &v in &values[i] {
            tokens.push(v as u16);
        }
    }

    // Query segment: [d … d, ?, K, =, v₁…v_V]; value slots line up with the
    // binding segments'.
    let target = num_segments - distance;
    let query_start = tokens.len();
    push_distractors(&mut tokens, segment_len - 3 - value_len, &mut rng);
    tokens.push(QUERY_MARK as u16);
    tokens.push(keys[target] as u16);
    tokens.push(BIND_MARK as u16);
    let answer_start = tokens.len();
    for &v in &values[target] {
        tokens.push(v as u16);
    }
    debug_assert_eq!(tokens.len(), (num_segments + 1) * segment_len);
    debug_assert_eq!(query_start, num_segments * segment_len);

    Ok(PlantedEpisode {
        tokens,
        answer_positions: (answer_start..answer_start + value_len).collect(),
        segment_len,
        num_segments,
        distance,
        query_key: keys[target],
        expected_value: values[target].clone(),
    })
}

fn sample_distinct(alphabet: &[u8], n: usize, rng: &mut RngState) -> Vec<u8> {
    let mut pool = alphabet.to_vec();
    // Partial Fisher–Yates.
    for i in 0..n {
        let j = i + rng.next_below((pool.len() - i) as u64) as usize;
        pool.swap(i, j);
    }
    pool.truncate(n);
    pool
}


// ---- token files ---------------------------------------------------------------

pub const TOKEN_FILE_MAGIC: &[u8; 4] = b"HMTD";

/// Flat binary token file: `HMTD`, u32 count, then u16 little-endian ids.
pub fn write_token_file(path: &Path, tokens: &[u16]) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + tokens.len() * 2);
    buf.extend_from_slice(TOKEN_FILE_MAGIC);
    buf.extend_from_slice(&(tokens.len() as u32).to_le_bytes());
    for &t in tokens {
        buf.extend_from_slice(&t.to_le_bytes());
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_token_file(path: &Path) -> Result<Vec<u16>> {
    let buf = std::fs::read(path)?;
    if buf.len() < 8 || &buf[0..4] != TOKEN_FILE_MAGIC {
        return Err(HmtError::Format {
            offset: 0,
            message: "bad token file magic".to_string(),
        });
    }
    let count = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
    if buf.len() != 8 + count * 2 {
        return Err(HmtError::Format {
            offset: 8,
            message: format!(
                "token payload length {} does not match count {count}",
                buf.len() - 8
            ),
        });
    }
    Ok(buf[8..]
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
        .collect())
}
