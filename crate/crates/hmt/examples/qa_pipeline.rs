//! Multi-context question answering: M contexts are concatenated into one
//! long prefix, each question/answer pair is appended, and only the answer
//! span is scored. Growing M shrinks the fraction of context that is useful
//! for any one question.
//!
//! Run with: cargo run --release --example qa_pipeline

use std::path::Path;

use hmt::backbone::BackboneConfig;
use hmt::datagen::{build_qa_sequences, synth_qa_tuples, Corpus};
use hmt::evalsuite::qa_eval;
use hmt::memory::HmtConfig;
use hmt::model::HmtModel;
use hmt::recurrence::{train_stage1, train_stage2, TrainConfig};

fn main() -> hmt::Result<()> {
    let corpus_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/toy.txt");
    let corpus = Corpus::from_text_file(&corpus_path)?;
    let train = corpus.train_tokens();

    let backbone = BackboneConfig {
        d_model: 32,
        n_layers: 2,
        n_heads: 4,
        d_ff: 128,
        vocab_size: 256,
        max_pos: 38,
    };
    let hmt = HmtConfig {
        segment_len: 32,
        sensory_len: 4,
        repr_len: 16,
        cache_size: 32,
        d_h: 32,
        recall_enabled: false,
        unroll: 2,
    };
    let mut model = HmtModel::new(backbone, hmt, 13)?;
    let s1 = TrainConfig {
        stage: 1,
        unroll: 2,
        lr0: 1e-3,
        decay_factor: 0.7,
        decay_every: 100,
        steps: 150,
        batch: 1,
        clip_norm: 1.0,
        seed: 13,
    };
    let (ckpt, _) = train_stage1(&mut model, &train, &s1, "", None)?;
    let s2 = TrainConfig {
        stage: 2,
        unroll: 4,
        steps: 250,
        ..s1
    };
    train_stage2(&mut model, Some(&ckpt), &train, &s2, "", None)?;

    let tuples = synth_qa_tuples(&train, 10, 48, 17)?;
    println!("m,long_answer_nll,short_answer_accuracy");
    for m in [1usize, 2, 4, 6, 8, 10] {
        let seqs = build_qa_sequences(&tuples, m)?;
        let result = qa_eval(&model, &seqs)?;
        println!(
            "{m},{:.4},{:.4}",
            result.long_answer_nll, result.short_answer_accuracy
        );
    }
    Ok(())
}
