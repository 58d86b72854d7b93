//! Emphasis generation: vision-guided cross-attention from `N_k` key vision
//! channels onto the language features.
//!
//! Each of the `N_k` channels of the key map, read as a signature over all
//! `Hv·Wv` positions, becomes one query. Keys and values come from the
//! per-token text features, so the attention map is `N_k × L`.

use alloc::format;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::layers::{flatten_spatial, Conv, Linear};
use crate::params::ParamBuilder;

#[derive(Debug, Clone, Copy)]
pub struct KeyVisionFeatures {
    /// `[Hv, Wv, N_k]`
    pub f_vk: NodeId,
    /// `[Hv·Wv, N_k]`, row-major flatten of `f_vk`.
    pub flattened: NodeId,
}

#[derive(Debug, Clone, Copy)]
pub struct EmphasisFeatures {
    /// `[N_k, C]`
    pub f_e: NodeId,
    /// Attention core node; its weights are the `N_k × L` map. `None` for
    /// the single-guided baseline.
    pub attn: Option<NodeId>,
}

#[derive(Debug, Clone)]
pub struct EmphasisGeneration {
    pub key_conv: Conv,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub n_k: usize,
    pub grid: (usize, usize),
}

impl EmphasisGeneration {
    pub fn new(pb: &mut ParamBuilder<'_>, cfg: &Config) -> Result<Self> {
        if cfg.n_k >= cfg.c {
            return Err(Error::InvalidConfig(format!(
                "N_k must satisfy N_k < C, got N_k={} with C={}",
                cfg.n_k, cfg.c
            )));
        }
        let grid = cfg.vision_grid();
        let mut s = pb.scope("egm");
        Ok(Self {
            key_conv: Conv::new(&mut s, "key_conv", 3, cfg.c, cfg.n_k)?,
            q: Linear::new(&mut s, "q", grid.0 * grid.1, cfg.c, true)?,
            k: Linear::new(&mut s, "k", cfg.c, cfg.c, true)?,
            v: Linear::new(&mut s, "v", cfg.c, cfg.c, true)?,
            n_k: cfg.n_k,
            grid,
        })
    }

    pub fn extract_key_features(&self, g: &mut Graph, f_v: NodeId) -> Result<KeyVisionFeatures> {
        let f_vk = self.key_conv.forward(g, f_v)?;
        let flattened = flatten_spatial(g, f_vk)?;
        Ok(KeyVisionFeatures { f_vk, flattened })
    }

    /// Single-head cross-attention: queries from the transposed key map,
    /// keys and values from `f_t: [L, C]`.
    pub fn emphasis_cross_attention(
        &self,
        g: &mut Graph,
        kv: &KeyVisionFeatures,
        f_t: NodeId,
    ) -> Result<EmphasisFeatures> {
        let positions = g.shape(kv.flattened)[0];
        if positions != self.grid.0 * self.grid.1 {
            return Err(Error::InvalidShape(format!(
                "emphasis queries were built for {} positions, got {positions}",
                self.grid.0 * self.grid.1
            )));
        }
        let signatures = g.transpose(kv.flattened)?;
        let q = self.q.forward(g, signatures)?;
        let k = self.k.forward(g, f_t)?;
        let v = self.v.forward(g, f_t)?;
        let core = g.attention(q, k, v, 1)?;
        Ok(EmphasisFeatures {
            f_e: core,
            attn: Some(core),
        })
    }

    pub fn forward(&self, g: &mut Graph, f_v: NodeId, f_t: NodeId) -> Result<(KeyVisionFeatures, EmphasisFeatures)> {
        let kv = self.extract_key_features(g, f_v)?;
        let e = self.emphasis_cross_attention(g, &kv, f_t)?;
        Ok((kv, e))
    }
}

/// Stand-in for a fusion step guided by one modality only: channel groups
/// of `F_v` are averaged into `N_k` spatial signatures, concatenated with
/// the mean text feature, and mapped to `C`.
#[derive(Debug, Clone)]
pub struct SingleGuidedFusion {
    pub proj: Linear,
    pub n_k: usize,
}

impl SingleGuidedFusion {
    pub fn new(pb: &mut ParamBuilder<'_>, cfg: &Config) -> Result<Self> {
        let (hv, wv) = cfg.vision_grid();
        let mut s = pb.scope("single_guided");
        Ok(Self {
            proj: Linear::new(&mut s, "proj", hv * wv + cfg.c, cfg.c, true)?,
            n_k: cfg.n_k,
        })
    }

    pub fn forward(&self, g: &mut Graph, f_v: NodeId, f_t: NodeId) -> Result<EmphasisFeatures> {
        let flat = flatten_spatial(g, f_v)?;
        let pooled = g.group_mean(flat, self.n_k)?;
        let rows = g.transpose(pooled)?;
        let sentence = g.mean_rows(f_t)?;
        let sentence = g.broadcast_rows(sentence, self.n_k)?;
        let cat = g.concat(&[rows, sentence])?;
        let f_e = self.proj.forward(g, cat)?;
        Ok(EmphasisFeatures { f_e, attn: None })
    }
}
