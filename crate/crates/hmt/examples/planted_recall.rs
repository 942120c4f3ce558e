//! Recall on/off comparison on the planted key/value retrieval task: each
//! episode binds one key=value pair per segment, then queries a key bound
//! several segments back — farther than sensory memory reaches, so only the
//! long-term cache (or a very good memory chain) can answer. Both arms get
//! identical budgets and seeds; answer-token NLL on held-out episodes is the
//! score.
//!
//! Run with: cargo run --release --example planted_recall

use hmt::backbone::BackboneConfig;
use hmt::evalsuite::{train_planted_arm, PlantedTaskSpec};
use hmt::memory::HmtConfig;
use hmt::recurrence::TrainConfig;

fn main() -> hmt::Result<()> {
    let backbone = BackboneConfig {
        d_model: 32,
        n_layers: 2,
        n_heads: 4,
        d_ff: 128,
        vocab_size: 256,
        max_pos: 22,
    };
    let task = PlantedTaskSpec::desk_default(16, 8);
    let hmt = HmtConfig {
        segment_len: 16,
        sensory_len: 4,
        repr_len: 3, // covers exactly the "?K=" query prefix
        cache_size: 16,
        d_h: 32,
        recall_enabled: true,
        unroll: task.unroll(),
    };
    let steps: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(1200);

    println!("distance {}, {} steps per arm, 3 seeds", task.distance, steps);
    println!("seed,recall_nll,no_recall_nll");
    let mut recall_nlls = Vec::new();
    let mut no_recall_nlls = Vec::new();
    for seed in [11u64, 22, 33] {
        let cfg = TrainConfig {
            stage: 2,
            unroll: task.unroll(),
            lr0: 1e-3,
            decay_factor: 0.7,
            decay_every: 400,
            steps,
            batch: 1,
            clip_norm: 1.0,
            seed,
        };
        let warmup = steps / 3;
        let (_, with) = train_planted_arm(&backbone, &hmt, &task, &cfg, warmup, 64)?;
        let no_recall = HmtConfig {
            recall_enabled: false,
            ..hmt.clone()
        };
        let (_, without) = train_planted_arm(&backbone, &no_recall, &task, &cfg, warmup, 64)?;
        println!("{seed},{with:.4},{without:.4}");
        recall_nlls.push(with);
        no_recall_nlls.push(without);
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[v.len() / 2]
    };
    let m_with = median(&mut recall_nlls);
    let m_without = median(&mut no_recall_nlls);
    println!("median recall NLL:    {m_with:.4}");
    println!("median no-recall NLL: {m_without:.4}");
    println!(
        "recall {} the no-recall arm",
        if m_with < m_without { "beats" } else { "does NOT beat" }
    );
    Ok(())
}
