//! Cache-size and sensory-size sweeps. The cache sweep re-evaluates one
//! trained model with the capacity truncated to each N (N = 1 reproduces the
//! no-recall forward exactly); the sensory sweep trains a fresh model per k
//! under identical budgets.
//!
//! Run with: cargo run --release --example memory_sweeps

use std::path::Path;

use hmt::backbone::BackboneConfig;
use hmt::datagen::Corpus;
use hmt::evalsuite::{sweep_cache, sweep_sensory, TrainProtocol};
use hmt::memory::HmtConfig;
use hmt::model::HmtModel;
use hmt::recurrence::{train_stage1, train_stage2, TrainConfig};

fn main() -> hmt::Result<()> {
    let corpus_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/toy.txt");
    let corpus = Corpus::from_text_file(&corpus_path)?;
    let train = corpus.train_tokens();
    let eval: Vec<u16> = corpus.val_tokens().into_iter().take(1536).collect();

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
        cache_size: 64,
        d_h: 32,
        recall_enabled: false,
        unroll: 2,
    };
    let stage1 = TrainConfig {
        stage: 1,
        unroll: 2,
        lr0: 1e-3,
        decay_factor: 0.7,
        decay_every: 100,
        steps: 150,
        batch: 1,
        clip_norm: 1.0,
        seed: 5,
    };
    let stage2 = TrainConfig {
        stage: 2,
        unroll: 5,
        steps: 300,
        ..stage1.clone()
    };

    // Cache sweep on one trained model.
    let mut model = HmtModel::new(backbone.clone(), hmt.clone(), 5)?;
    let (ckpt, _) = train_stage1(&mut model, &train, &stage1, "", None)?;
    train_stage2(&mut model, Some(&ckpt), &train, &stage2, "", None)?;
    println!("cache-size sweep (model trained with N = {}):", model.hmt.cache_size);
    println!("param,value,ppl,seed");
    for row in sweep_cache(&model, &eval, &[1, 4, 16, 64], 5)? {
        println!("{},{},{:.4},{}", row.param, row.value, row.ppl, row.seed);
    }

    // Sensory sweep trains one model per k.
    let protocol = TrainProtocol {
        backbone_cfg: backbone,
        hmt_cfg: HmtConfig {
            recall_enabled: true,
            ..hmt
        },
        stage1,
        stage2,
        seed: 5,
    };
    println!("\nsensory-size sweep (fresh model per k):");
    println!("param,value,ppl,seed");
    for row in sweep_sensory(&protocol, &train, &eval, &[0, 2, 4, 8])? {
        println!("{},{},{:.4},{}", row.param, row.value, row.ppl, row.seed);
    }
    Ok(())
}
