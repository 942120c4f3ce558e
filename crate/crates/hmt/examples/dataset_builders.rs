//! Tour of the stream builders: concatenation/re-chunking, interleaving with
//! exact de-interleaving, dilation with positional stripping, QA assembly,
//! and one planted-recall episode.
//!
//! Run with: cargo run --example dataset_builders

use hmt::datagen::{
    build_qa_sequences, byte_tokenize, concat_samples, deinterleave_samples, dilate_sample,
    gen_planted_recall, interleave_samples, strip_dilation, synth_qa_tuples, tokens_to_bytes,
    FILLER_TOKEN,
};

fn main() -> hmt::Result<()> {
    let a = byte_tokenize(b"In the first sample the miller counts three letters by the shore.");
    let b = byte_tokenize(b"THE SECOND SAMPLE IS LOUD AND FOLLOWS THE TIDE AT DUSK.");

    let chunks = concat_samples(&[a.clone(), b.clone()], 40)?;
    println!("concat into 40-token chunks: {:?} lengths", chunks.iter().map(|c| c.len()).collect::<Vec<_>>());

    let inter = interleave_samples(&a, &b, 16)?;
    println!("\ninterleaved every 16 tokens:\n{}", String::from_utf8_lossy(&tokens_to_bytes(&inter)));
    let (ra, rb) = deinterleave_samples(&inter, a.len(), b.len(), 16)?;
    assert_eq!(ra, a);
    assert_eq!(rb, b);
    println!("de-interleave recovers both samples exactly");

    let dilated = dilate_sample(&a, FILLER_TOKEN, 16)?;
    println!("\ndilated with 16-token filler runs:\n{}", String::from_utf8_lossy(&tokens_to_bytes(&dilated)));
    assert_eq!(strip_dilation(&dilated, 16)?, a);
    println!("stripping fillers recovers the sample exactly");

    let tuples = synth_qa_tuples(&a, 3, 20, 1)?;
    let seqs = build_qa_sequences(&tuples, 3)?;
    println!("\nQA assembly with M = 3:");
    for (i, s) in seqs.iter().enumerate() {
        let (a0, alen) = s.answer_span;
        println!(
            "  sequence {i}: {} tokens, answer = {:?}",
            s.tokens.len(),
            String::from_utf8_lossy(&tokens_to_bytes(&s.tokens[a0..a0 + alen]))
        );
    }

    let task = hmt::datagen::PlantedTask {
        num_segments: 6,
        segment_len: 12,
        key_alphabet: b"ABCDEF".to_vec(),
        value_alphabet: b"abcdef".to_vec(),
        value_len: 2,
        distance: 4,
    };
    let ep = gen_planted_recall(&task, 2)?;
    println!(
        "\nplanted episode ({} segments of {}):\n{}",
        ep.num_segments + 1,
        ep.segment_len,
        String::from_utf8_lossy(&tokens_to_bytes(&ep.tokens))
    );
    println!(
        "query key {:?}, expected value {:?} at stream positions {:?}",
        ep.query_key as char,
        String::from_utf8_lossy(&ep.expected_value),
        ep.answer_positions
    );
    Ok(())
}
