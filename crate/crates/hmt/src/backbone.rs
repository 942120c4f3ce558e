//! Minimal causal decoder-only transformer, used at embedding level.
//!
//! The model is split into `embed` (token lookup only), `forward_embeddings`
//! (positions + attention blocks over an arbitrary embedding sequence) and
//! `logits` (final layer norm + projection). Keeping positions inside
//! `forward_embeddings` means prepended prompt/memory embeddings receive
//! ordinary leading positions like any other row. Every call numbers
//! positions from 0 independently.
//!
//! Alternate backbones plug in through the [`Backbone`] trait; the wrapper
//! never assumes anything beyond these three entry points.

use crate::error::{HmtError, Result};
use crate::numerics::rng::RngState;
use crate::numerics::tensor::{concat_cols, Tensor};

pub const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Byte-level by default.
    pub vocab_size: usize,
    /// Maximum augmented sequence length (tokens plus prompt/memory rows).
    pub max_pos: usize,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return Err(HmtError::Config(
                "backbone dimensions must be positive".to_string(),
            ));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(HmtError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size == 0 || self.max_pos == 0 {
            return Err(HmtError::Config(
                "vocab_size and max_pos must be positive".to_string(),
            ));
        }
        Ok(())
    }
}

/// Backbone model contract: hidden embeddings in, hidden embeddings out.
pub trait Backbone {
    fn d_model(&self) -> usize;
    fn vocab_size(&self) -> usize;
    fn max_pos(&self) -> usize;

    /// Token embedding lookup only; positions are added in
    /// `forward_embeddings` so non-token rows get positions too.
    fn embed(&self, tokens: &[u16]) -> Result<Tensor>;

    /// Causal self-attention over `[T×d]` embeddings, same-length output.
    fn forward_embeddings(&self, x: &Tensor) -> Result<Tensor>;

    /// Final layer norm plus logit projection, `[T×d] -> [T×V]`.
    fn logits(&self, h: &Tensor) -> Result<Tensor>;

    /// Trainable parameters in a fixed, documented order.
    fn named_params(&self) -> Vec<(String, Tensor)>;
}

struct LayerParams {
    ln1_g: Tensor,
    ln1_b: Tensor,
    wq: Tensor,
    bq: Tensor,
    wk: Tensor,
    bk: Tensor,
    wv: Tensor,
    bv: Tensor,
    wo: Tensor,
    bo: Tensor,
    ln2_g: Tensor,
    ln2_b: Tensor,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

/// Pre-layer-norm transformer with learned absolute positions and a GELU
/// feedforward. Weights ~ Normal(0, 0.02), biases zero, LN gains one.
pub struct TransformerBackbone {
    cfg: BackboneConfig,
    tok_embed: Tensor,
    pos_embed: Tensor,
    layers: Vec<LayerParams>,
    final_ln_g: Tensor,
    final_ln_b: Tensor,
    w_out: Tensor,
    b_out: Tensor,
}

impl TransformerBackbone {
    pub fn new(cfg: BackboneConfig, rng: &mut RngState) -> Result<TransformerBackbone> {
        cfg.validate()?;
        let d = cfg.d_model;
        let mut w = |shape: &[usize]| Tensor::randn(shape, INIT_STD, rng, true);
        let zeros = |shape: &[usize]| {
            Tensor::leaf(shape, vec![0.0; shape.iter().product()], true).unwrap()
        };
        let ones = |shape: &[usize]| {
            Tensor::leaf(shape, vec![1.0; shape.iter().product()], true).unwrap()
        };

        let tok_embed = w(&[cfg.vocab_size, d]);
        let pos_embed = w(&[cfg.max_pos, d]);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            layers.push(LayerParams {
                ln1_g: ones(&[1, d]),
                ln1_b: zeros(&[1, d]),
                wq: w(&[d, d]),
                bq: zeros(&[1, d]),
                wk: w(&[d, d]),
                bk: zeros(&[1, d]),
                wv: w(&[d, d]),
                bv: zeros(&[1, d]),
                wo: w(&[d, d]),
                bo: zeros(&[1, d]),
                ln2_g: ones(&[1, d]),
                ln2_b: zeros(&[1, d]),
                w1: w(&[d, cfg.d_ff]),
                b1: zeros(&[1, cfg.d_ff]),
                w2: w(&[cfg.d_ff, d]),
                b2: zeros(&[1, d]),
            });
        }
        let final_ln_g = ones(&[1, d]);
        let final_ln_b = zeros(&[1, d]);
        let w_out = w(&[d, cfg.vocab_size]);
        let b_out = zeros(&[1, cfg.vocab_size]);
        Ok(TransformerBackbone {
            cfg,
            tok_embed,
            pos_embed,
            layers,
            final_ln_g,
            final_ln_b,
            w_out,
            b_out,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    fn attention(&self, layer: &LayerParams, h: &Tensor) -> Result<Tensor> {
        let d = self.cfg.d_model;
        let dh = d / self.cfg.n_heads;
        let a = h.layer_norm_rows(&layer.ln1_g, &layer.ln1_b, LN_EPS)?;
        let q = a.matmul(&layer.wq)?.add_row(&layer.bq)?;
        let k = a.matmul(&layer.wk)?.add_row(&layer.bk)?;
        let v = a.matmul(&layer.wv)?.add_row(&layer.bv)?;
        let mut heads = Vec::with_capacity(self.cfg.n_heads);
        for i in 0..self.cfg.n_heads {
            let qh = q.slice_cols(i * dh, dh)?;
            let kh = k.slice_cols(i * dh, dh)?;
            let vh = v.slice_cols(i * dh, dh)?;
            let scores = qh.matmul(&kh.transpose()?)?.scale(1.0 / (dh as f64).sqrt());
            let weights = scores.causal_softmax_rows()?;
            heads.push(weights.matmul(&vh)?);
        }
        let ctx = concat_cols(&heads)?;
        ctx.matmul(&layer.wo)?.add_row(&layer.bo)
    }

    fn feedforward(&self, layer: &LayerParams, h: &Tensor) -> Result<Tensor> {
        let b = h.layer_norm_rows(&layer.ln2_g, &layer.ln2_b, LN_EPS)?;
        let hidden = b.matmul(&layer.w1)?.add_row(&layer.b1)?.gelu();
        hidden.matmul(&layer.w2)?.add_row(&layer.b2)
    }
}

impl Backbone for TransformerBackbone {
    fn d_model(&self) -> usize {
        self.cfg.d_model
    }

    fn vocab_size(&self) -> usize {
        self.cfg.vocab_size
    }

    fn max_pos(&self) -> usize {
        self.cfg.max_pos
    }

    fn embed(&self, tokens: &[u16]) -> Result<Tensor> {
        for (pos, &t) in tokens.iter().enumerate() {
            if t as usize >= self.cfg.vocab_size {
                return Err(HmtError::IndexOutOfRange {
                    index: t as usize,
                    bound: self.cfg.vocab_size,
                    position: pos,
                });
            }
        }
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        self.tok_embed.gather_rows(&ids)
    }

    fn forward_embeddings(&self, x: &Tensor) -> Result<Tensor> {
        let t = x.shape()[0];
        if t > self.cfg.max_pos {
            return Err(HmtError::Capacity {
                got: t,
                max: self.cfg.max_pos,
            });
        }
        let pos = self.pos_embed.slice_rows(0, t)?;
        let mut h = x.add(&pos)?;
        for layer in &self.layers {
            h = h.add(&self.attention(layer, &h)?)?;
            h = h.add(&self.feedforward(layer, &h)?)?;
        }
        Ok(h)
    }

    fn logits(&self, h: &Tensor) -> Result<Tensor> {
        let ln = h.layer_norm_rows(&self.final_ln_g, &self.final_ln_b, LN_EPS)?;
        ln.matmul(&self.w_out)?.add_row(&self.b_out)
    }

    fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![
            ("tok_embed".to_string(), self.tok_embed.clone()),
            ("pos_embed".to_string(), self.pos_embed.clone()),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (suffix, t) in [
                ("ln1.g", &l.ln1_g),
                ("ln1.b", &l.ln1_b),
                ("wq", &l.wq),
                ("bq", &l.bq),
                ("wk", &l.wk),
                ("bk", &l.bk),
                ("wv", &l.wv),
                ("bv", &l.bv),
                ("wo", &l.wo),
                ("bo", &l.bo),
                ("ln2.g", &l.ln2_g),
                ("ln2.b", &l.ln2_b),
                ("w1", &l.w1),
                ("b1", &l.b1),
                ("w2", &l.w2),
                ("b2", &l.b2),
            ] {
                out.push((format!("layers.{i}.{suffix}"), t.clone()));
            }
        }
        out.push(("final_ln.g".to_string(), self.final_ln_g.clone()));
        out.push(("final_ln.b".to_string(), self.final_ln_b.clone()));
        out.push(("w_out".to_string(), self.w_out.clone()));
        out.push(("b_out".to_string(), self.b_out.clone()));
        out
    }
}

/// Pass-through backbone for bookkeeping oracles: `forward_embeddings` is the
/// identity (no positions, no mixing across rows), so segmented and flat
/// evaluations must agree exactly. Also handy as the "linear stub" in unit
/// tests of the memory pipeline.
pub struct IdentityBackbone {
    d_model: usize,
    vocab_size: usize,
    embed_table: Tensor,
    w_out: Tensor,
}

impl IdentityBackbone {
    pub fn new(d_model: usize, vocab_size: usize, rng: &mut RngState) -> IdentityBackbone {
        IdentityBackbone {
            d_model,
            vocab_size,
            embed_table: Tensor::randn(&[vocab_size, d_model], INIT_STD, rng, true),
            w_out: Tensor::randn(&[d_model, vocab_size], INIT_STD, rng, true),
        }
    }
}

impl Backbone for IdentityBackbone {
    fn d_model(&self) -> usize {
        self.d_model
    }

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn max_pos(&self) -> usize {
        usize::MAX
    }

    fn embed(&self, tokens: &[u16]) -> Result<Tensor> {
        for (pos, &t) in tokens.iter().enumerate() {
            if t as usize >= self.vocab_size {
                return Err(HmtError::IndexOutOfRange {
                    index: t as usize,
                    bound: self.vocab_size,
                    position: pos,
                });
            }
        }
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        self.embed_table.gather_rows(&ids)
    }

    fn forward_embeddings(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.clone())
    }

    fn logits(&self, h: &Tensor) -> Result<Tensor> {
        h.matmul(&self.w_out)
    }

    fn named_params(&self) -> Vec<(String, Tensor)> {
        vec![
            ("embed_table".to_string(), self.embed_table.clone()),
            ("w_out".to_string(), self.w_out.clone()),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{finite_diff_grad_at, grads_agree};
    use crate::numerics::tensor::NoGradGuard;

    fn tiny() -> BackboneConfig {
        BackboneConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 4,
            d_ff: 32,
            vocab_size: 256,
            max_pos: 24,
        }
    }

    fn build(seed: u64) -> TransformerBackbone {
        let mut rng = RngState::new(seed);
        TransformerBackbone::new(tiny(), &mut rng).unwrap()
    }

    #[test]
    fn embed_is_lookup_only() {
        let bb = build(1);
        let empty = bb.embed(&[]).unwrap();
        assert_eq!(empty.shape(), &[0, 16]);

        let rep = bb.embed(&[7, 7, 7]).unwrap();
        let d = rep.to_vec();
        assert_eq!(&d[0..16], &d[16..32]);
        assert_eq!(&d[0..16], &d[32..48]);

        let full = bb.embed(&(0..=255).map(|b| b as u16).collect::<Vec<_>>()).unwrap();
        assert_eq!(full.shape(), &[256, 16]);

        match bb.embed(&[300]) {
            Err(HmtError::IndexOutOfRange { index, .. }) => assert_eq!(index, 300),
            other => panic!("expected index error, got {other:?}"),
        }
    }

    #[test]
    fn forward_is_strictly_causal() {
        let bb = build(2);
        let mut rng = RngState::new(3);
        let base = Tensor::randn(&[8, 16], 1.0, &mut rng, false);
        let out_base = bb.forward_embeddings(&base).unwrap().to_vec();

        // Perturb row 5; rows 0..5 of the output must be bit-identical.
        for t in [5usize, 7] {
            let mut data = base.to_vec();
            for j in 0..16 {
                data[t * 16 + j] += 0.37 * (j as f64 + 1.0);
            }
            let pert = Tensor::from_vec(&[8, 16], data).unwrap();
            let out = bb.forward_embeddings(&pert).unwrap().to_vec();
            for i in 0..t {
                for j in 0..16 {
                    assert_eq!(
                        out[i * 16 + j].to_bits(),
                        out_base[i * 16 + j].to_bits(),
                        "row {i} changed after perturbing row {t}"
                    );
                }
            }
            // The perturbed row itself must change (mask keeps the diagonal).
            assert!((0..16).any(|j| out[t * 16 + j] != out_base[t * 16 + j]));
        }
    }

    #[test]
    fn forward_shape_and_capacity() {
        let bb = build(4);
        let x = Tensor::zeros(&[22, 16]); // L + k + 2 for L=16, k=4
        assert_eq!(bb.forward_embeddings(&x).unwrap().shape(), &[22, 16]);

        let too_long = Tensor::zeros(&[25, 16]);
        match bb.forward_embeddings(&too_long) {
            Err(HmtError::Capacity { got, max }) => assert_eq!((got, max), (25, 24)),
            other => panic!("expected capacity error, got {other:?}"),
        }
    }

    #[test]
    fn forward_is_deterministic_across_runs() {
        let bb = build(5);
        let mut rng = RngState::new(6);
        let x = Tensor::randn(&[10, 16], 1.0, &mut rng, false);
        let a = bb.forward_embeddings(&x).unwrap().to_vec();
        let b = bb.forward_embeddings(&x).unwrap().to_vec();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn forward_is_position_aware() {
        // The same embedding row placed at slot 0 vs slot 1 must produce
        // different outputs, otherwise positions were dropped.
        let bb = build(7);
        let mut rng = RngState::new(8);
        let row = Tensor::randn(&[1, 16], 1.0, &mut rng, false);
        let pad = Tensor::randn(&[1, 16], 1.0, &mut rng, false);
        let a = crate::numerics::tensor::concat_rows(&[row.clone(), pad.clone()]).unwrap();
        let b = crate::numerics::tensor::concat_rows(&[pad, row]).unwrap();
        let oa = bb.forward_embeddings(&a).unwrap().to_vec();
        let ob = bb.forward_embeddings(&b).unwrap().to_vec();
        // Compare the row's output at its two positions.
        let ra = &oa[0..16];
        let rb = &ob[16..32];
        assert!(ra.iter().zip(rb).any(|(x, y)| (x - y).abs() > 1e-9));
    }

    #[test]
    fn zeroed_projection_gives_uniform_softmax() {
        let bb = build(9);
        bb.w_out.data_mut().iter_mut().for_each(|v| *v = 0.0);
        bb.b_out.data_mut().iter_mut().for_each(|v| *v = 0.0);
        let h = Tensor::zeros(&[3, 16]);
        let logits = bb.logits(&h).unwrap();
        assert_eq!(logits.shape(), &[3, 256]);
        assert!(logits.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn untrained_model_scores_random_bytes_near_uniform() {
        let _guard = NoGradGuard::new();
        let bb = build(10);
        let mut rng = RngState::new(11);
        let tokens: Vec<u16> = (0..200).map(|_| rng.next_below(256) as u16).collect();
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in tokens.chunks(20) {
            let h = bb.forward_embeddings(&bb.embed(chunk).unwrap()).unwrap();
            let logits = bb.logits(&h).unwrap();
            let targets: Vec<usize> = chunk.iter().skip(1).map(|&t| t as usize).collect();
            let scored = logits.slice_rows(0, targets.len()).unwrap();
            total += scored.cross_entropy(&targets).unwrap().item().unwrap() * targets.len() as f64;
            count += targets.len();
        }
        let nll = total / count as f64;
        let uniform = (256f64).ln();
        assert!(
            (nll - uniform).abs() < 0.1,
            "untrained NLL {nll} far from ln 256 = {uniform}"
        );
    }

    #[test]
    fn backbone_gradients_match_finite_differences() {
        // Spot-check a few coordinates of every parameter tensor on a
        // 2-layer config against central differences.
        let bb = build(12);
        let tokens: Vec<u16> = vec![10, 200, 31, 4, 99, 7, 250, 18];
        let targets: Vec<usize> = tokens.iter().skip(1).map(|&t| t as usize).collect();
        let loss_fn = |bb: &TransformerBackbone| -> crate::error::Result<f64> {
            let h = bb.forward_embeddings(&bb.embed(&tokens[..])?)?;
            let logits = bb.logits(&h)?;
            logits
                .slice_rows(0, targets.len())?
                .cross_entropy(&targets)?
                .item()
        };

        let h = bb.forward_embeddings(&bb.embed(&tokens[..]).unwrap()).unwrap();
        let logits = bb.logits(&h).unwrap();
        let loss = logits
            .slice_rows(0, targets.len())
            .unwrap()
            .cross_entropy(&targets)
            .unwrap();
        loss.backward().unwrap();

        let mut pick = RngState::new(13);
        for (name, p) in bb.named_params() {
            let auto = p.grad().expect("param grad populated");
            let coords: Vec<usize> = if p.numel() <= 6 {
                (0..p.numel()).collect()
            } else {
                (0..6).map(|_| pick.next_below(p.numel() as u64) as usize).collect()
            };
            let fd = finite_diff_grad_at(|| loss_fn(&bb), &p, &coords, 1e-5).unwrap();
            for (&c, &f) in coords.iter().zip(&fd) {
                assert!(
                    grads_agree(auto[c], f, 1e-5, 1e-8, 1e-6),
                    "{name}[{c}]: autodiff {} vs fd {f}",
                    auto[c]
                );
            }
        }
    }

    #[test]
    fn identity_backbone_is_a_pass_through() {
        let mut rng = RngState::new(14);
        let stub = IdentityBackbone::new(8, 256, &mut rng);
        let x = Tensor::randn(&[5, 8], 1.0, &mut rng, false);
        let y = stub.forward_embeddings(&x).unwrap();
        assert_eq!(x.to_vec(), y.to_vec());
        assert_eq!(stub.logits(&y).unwrap().shape(), &[5, 256]);
    }
}
