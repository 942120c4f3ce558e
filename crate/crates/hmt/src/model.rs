//! A backbone plus the wrapper's prompt parameters, owned together so
//! training, checkpointing and evaluation all see one parameter registry.

use crate::backbone::{Backbone, BackboneConfig, TransformerBackbone};
use crate::error::{HmtError, Result};
use crate::memory::{HmtConfig, PromptParams};
use crate::numerics::rng::RngState;
use crate::numerics::tensor::Tensor;

pub struct HmtModel {
    pub backbone_cfg: BackboneConfig,
    pub backbone: Box<dyn Backbone>,
    pub prompts: PromptParams,
    pub hmt: HmtConfig,
}

impl HmtModel {
    /// Fresh transformer-backed model; all parameters drawn from `seed` in a
    /// fixed order (backbone first, then prompts).
    pub fn new(backbone_cfg: BackboneConfig, hmt: HmtConfig, seed: u64) -> Result<HmtModel> {
        hmt.validate()?;
        check_geometry(&backbone_cfg, &hmt)?;
        let mut rng = RngState::new(seed);
        let backbone = TransformerBackbone::new(backbone_cfg.clone(), &mut rng)?;
        let prompts = PromptParams::new(backbone_cfg.d_model, hmt.d_h, &mut rng);
        Ok(HmtModel {
            backbone_cfg,
            backbone: Box::new(backbone),
            prompts,
            hmt,
        })
    }

    /// Wrap an arbitrary backbone (stubs, alternate architectures).
    pub fn with_backbone(
        backbone_cfg: BackboneConfig,
        backbone: Box<dyn Backbone>,
        hmt: HmtConfig,
        seed: u64,
    ) -> Result<HmtModel> {
        hmt.validate()?;
        let mut rng = RngState::new(seed);
        let prompts = PromptParams::new(backbone.d_model(), hmt.d_h, &mut rng);
        Ok(HmtModel {
            backbone_cfg,
            backbone,
            prompts,
            hmt,
        })
    }

    /// All trainable parameters for the given mode, in checkpoint order.
    /// No-recall training omits `h_t`/`w_q`/`w_k` (they are unreachable).
    pub fn named_params(&self, include_recall: bool) -> Vec<(String, Tensor)> {
        let mut out = self.backbone.named_params();
        out.extend(self.prompts.named_params(include_recall));
        out
    }

    /// Parameters that the current mode actually trains.
    pub fn trainable_params(&self) -> Vec<(String, Tensor)> {
        self.named_params(self.hmt.recall_enabled)
    }

    /// Overwrite parameter buffers from `(name, shape, data)` records.
    /// Returns the names that were absent from the records (the caller
    /// decides whether fresh initialization is acceptable).
    pub fn load_named(
        &mut self,
        records: &[(String, Vec<usize>, Vec<f64>)],
    ) -> Result<Vec<String>> {
        let lookup: std::collections::HashMap<&str, (&Vec<usize>, &Vec<f64>)> = records
            .iter()
            .map(|(n, s, d)| (n.as_str(), (s, d)))
            .collect();
        let mut missing = Vec::new();
        for (name, param) in self.named_params(true) {
            match lookup.get(name.as_str()) {
                Some((shape, data)) => {
                    if shape.as_slice() != param.shape() {
                        return Err(HmtError::Config(format!(
                            "checkpoint tensor {name} has shape {shape:?}, model expects {:?}",
                            param.shape()
                        )));
                    }
                    param.data_mut().copy_from_slice(data);
                }
                None => missing.push(name),
            }
        }
        Ok(missing)
    }
}

fn check_geometry(backbone: &BackboneConfig, hmt: &HmtConfig) -> Result<()> {
    backbone.validate()?;
    let need_main = hmt.segment_len + hmt.sensory_len + 2;
    let need_repr = hmt.repr_len + 2;
    if backbone.max_pos < need_main || backbone.max_pos < need_repr {
        return Err(HmtError::Config(format!(
            "max_pos {} too small: needs >= {} (L+k+2) and >= {} (j+2)",
            backbone.max_pos, need_main, need_repr
        )));
    }
    Ok(())
}
