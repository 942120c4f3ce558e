//! Recall-distance histogram on interleaved and dilated streams: interleave
//! two samples every 256 tokens to force periodic context switches, or
//! dilate one sample with filler runs, and watch where the highest-scoring
//! cache entry points.
//!
//! Run with: cargo run --release --example recall_histogram

use std::path::Path;

use hmt::backbone::BackboneConfig;
use hmt::datagen::{dilate_sample, interleave_samples, Corpus, FILLER_TOKEN};
use hmt::evalsuite::recall_histogram;
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
        max_pos: 22,
    };
    let hmt = HmtConfig {
        segment_len: 16,
        sensory_len: 4,
        repr_len: 8,
        cache_size: 32,
        d_h: 32,
        recall_enabled: false,
        unroll: 2,
    };

    // Short two-stage training so the scores are not pure noise.
    let mut model = HmtModel::new(backbone, hmt, 3)?;
    let s1 = TrainConfig {
        stage: 1,
        unroll: 2,
        lr0: 1e-3,
        decay_factor: 0.7,
        decay_every: 100,
        steps: 150,
        batch: 1,
        clip_norm: 1.0,
        seed: 3,
    };
    let (ckpt, _) = train_stage1(&mut model, &train, &s1, "", None)?;
    let s2 = TrainConfig {
        stage: 2,
        unroll: 5,
        steps: 300,
        ..s1
    };
    train_stage2(&mut model, Some(&ckpt), &train, &s2, "", None)?;

    let a = &corpus.samples[0];
    let b = &corpus.samples[1];
    let interleaved = interleave_samples(a, b, 256)?;
    let hist = recall_histogram(&model, &interleaved)?;
    println!("interleaved stream ({} events):", hist.events);
    println!("distance,count");
    for (d, c) in &hist.bins {
        println!("{d},{c}");
    }
    println!("seed,{}", hist.seed_events);

    let dilated = dilate_sample(a, FILLER_TOKEN, 256)?;
    let hist = recall_histogram(&model, &dilated)?;
    println!("\ndilated stream ({} events):", hist.events);
    println!("distance,count");
    for (d, c) in &hist.bins {
        println!("{d},{c}");
    }
    println!("seed,{}", hist.seed_events);
    Ok(())
}
