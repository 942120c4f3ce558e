//! Per-phase wall-time medians for one recall step: the main forward pass,
//! representation extraction, the prefix score row A (which can overlap the
//! previous segment's forward pass), and the newest-entry score A_n (the
//! only part that must run serially). Timings are hardware-specific and
//! report-only.
//!
//! Run with: cargo run --release --example runtime_breakdown

use hmt::backbone::BackboneConfig;
use hmt::memory::HmtConfig;
use hmt::model::HmtModel;
use hmt::numerics::rng::RngState;
use hmt::evalsuite::runtime_breakdown;

fn main() -> hmt::Result<()> {
    let backbone = BackboneConfig {
        d_model: 64,
        n_layers: 2,
        n_heads: 4,
        d_ff: 256,
        vocab_size: 256,
        max_pos: 70,
    };
    let hmt = HmtConfig {
        segment_len: 64,
        sensory_len: 4,
        repr_len: 32,
        cache_size: 300,
        d_h: 64,
        recall_enabled: true,
        unroll: 2,
    };
    let model = HmtModel::new(backbone, hmt, 11)?;
    let mut rng = RngState::new(12);
    let stream: Vec<u16> = (0..64 * 400).map(|_| rng.next_below(256) as u16).collect();
    let table = runtime_breakdown(&model, &stream)?;
    println!("phase,median_ms");
    for (phase, ms) in table {
        println!("{phase},{ms:.4}");
    }
    Ok(())
}
