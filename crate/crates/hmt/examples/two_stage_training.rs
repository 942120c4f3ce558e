//! Two-stage training on the bundled toy corpus: a no-recall warmup with a
//! shallow unroll, then recall training with a deeper unroll extending the
//! stage-1 checkpoint. A single-stage arm with the same total budget runs
//! for comparison, and both arms are evaluated on the held-out split.
//!
//! Run with: cargo run --release --example two_stage_training

use std::path::Path;

use hmt::backbone::BackboneConfig;
use hmt::datagen::Corpus;
use hmt::evalsuite::mean_nll;
use hmt::memory::HmtConfig;
use hmt::model::HmtModel;
use hmt::recurrence::{train_stage1, train_stage2, TrainConfig};

fn backbone() -> BackboneConfig {
    BackboneConfig {
        d_model: 32,
        n_layers: 2,
        n_heads: 4,
        d_ff: 128,
        vocab_size: 256,
        max_pos: 22,
    }
}

fn mechanism() -> HmtConfig {
    HmtConfig {
        segment_len: 16,
        sensory_len: 4,
        repr_len: 8,
        cache_size: 16,
        d_h: 32,
        recall_enabled: false,
        unroll: 2,
    }
}

fn main() -> hmt::Result<()> {
    let corpus_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/toy.txt");
    let corpus = Corpus::from_text_file(&corpus_path)?;
    let train = corpus.train_tokens();
    let eval: Vec<u16> = corpus.val_tokens().into_iter().take(2048).collect();
    println!("corpus: {} train tokens, {} eval tokens", train.len(), eval.len());

    let seed = 7;
    let stage1_cfg = TrainConfig {
        stage: 1,
        unroll: 2,
        lr0: 1e-3,
        decay_factor: 0.7,
        decay_every: 100,
        steps: 200,
        batch: 1,
        clip_norm: 1.0,
        seed,
    };
    let stage2_cfg = TrainConfig {
        stage: 2,
        unroll: 5,
        steps: 500,
        ..stage1_cfg.clone()
    };

    // Multi-stage arm.
    let mut model = HmtModel::new(backbone(), mechanism(), seed)?;
    let (ckpt1, out1) = train_stage1(&mut model, &train, &stage1_cfg, "", None)?;
    println!(
        "stage 1: loss {:.3} -> {:.3}",
        out1.losses.first().unwrap(),
        out1.losses.last().unwrap()
    );

    let mut model2 = HmtModel::new(backbone(), mechanism(), seed)?;
    // Evaluate the extended model before any stage-2 updates.
    {
        use hmt::recurrence::check_checkpoint_compat;
        check_checkpoint_compat(&model2, &ckpt1)?;
    }
    let (_ckpt2, out2) = {
        // Peek at the pre-training eval loss by loading the checkpoint into
        // a recall-enabled copy first.
        let mut probe = HmtModel::new(backbone(), mechanism(), seed)?;
        probe.load_named(&ckpt1.tensors)?;
        probe.hmt.recall_enabled = true;
        let before = mean_nll(&probe, &eval)?;
        println!("stage 2 initial eval loss: {before:.4}");

        let r = train_stage2(&mut model2, Some(&ckpt1), &train, &stage2_cfg, "", None)?;
        let after = mean_nll(&model2, &eval)?;
        println!(
            "stage 2 final eval loss:   {after:.4} ({:+.1}%)",
            100.0 * (after - before) / before
        );
        r
    };
    println!(
        "stage 2: train loss {:.3} -> {:.3}",
        out2.losses.first().unwrap(),
        out2.losses.last().unwrap()
    );

    // Single-stage comparison arm: same total budget, stage-2 settings.
    let single_cfg = TrainConfig {
        steps: 700,
        ..stage2_cfg
    };
    let mut single = HmtModel::new(backbone(), mechanism(), seed)?;
    let (_, out_s) = train_stage2(&mut single, None, &train, &single_cfg, "", None)?;
    let single_eval = mean_nll(&single, &eval)?;
    let multi_eval = mean_nll(&model2, &eval)?;
    println!(
        "single-stage arm: train loss {:.3} -> {:.3}, eval {single_eval:.4}",
        out_s.losses.first().unwrap(),
        out_s.losses.last().unwrap()
    );
    println!("multi-stage  arm: eval {multi_eval:.4}");
    println!("(paired comparison is report-only; seeds and budgets match)");
    Ok(())
}
