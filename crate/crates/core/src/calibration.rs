//! Emphasis calibration: the global sentence feature scores each emphasis
//! row and the scores re-weight the rows.
//!
//! ```text
//! X   = [F_e, repeat(F_tg, N_k)]          (N_k × 2C)
//! H   = X + softmax(Q Kᵀ / √2C) V          (single head, width 2C)
//! α   = sigmoid(H w + b)                   (N_k)
//! F_c = F_e + α ⊙ F_e                      (scale_input)
//! F_c = F_e + α ⊙ H[:, :C]                 (scale_attended)
//! ```

use crate::config::{Config, EcmVariant};
use crate::error::{shape_err, Result};
use crate::graph::{Graph, NodeId};
use crate::layers::Linear;
use crate::params::ParamBuilder;

#[derive(Debug, Clone, Copy)]
pub struct CalibratedFeatures {
    /// `[N_k, C]`
    pub f_c: NodeId,
    /// `[N_k]`, each in `(0, 1)`.
    pub alphas: NodeId,
}

#[derive(Debug, Clone)]
pub struct EmphasisCalibration {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub score: Linear,
    pub variant: EcmVariant,
    pub c: usize,
}

pub fn broadcast_global(g: &mut Graph, f_tg: NodeId, n: usize) -> Result<NodeId> {
    g.broadcast_rows(f_tg, n)
}

impl EmphasisCalibration {
    pub fn new(pb: &mut ParamBuilder<'_>, cfg: &Config) -> Result<Self> {
        let w = 2 * cfg.c;
        let mut s = pb.scope("ecm");
        Ok(Self {
            q: Linear::new(&mut s, "q", w, w, true)?,
            k: Linear::new(&mut s, "k", w, w, true)?,
            v: Linear::new(&mut s, "v", w, w, true)?,
            score: Linear::new(&mut s, "score", w, 1, true)?,
            variant: cfg.ecm_variant,
            c: cfg.c,
        })
    }

    /// Returns `(alphas [N_k], attended [N_k, 2C])`.
    pub fn score_emphases(&self, g: &mut Graph, f_e: NodeId, f_tg: NodeId) -> Result<(NodeId, NodeId)> {
        let s = g.shape(f_e).to_vec();
        if s.len() != 2 || s[1] != self.c || g.shape(f_tg) != [self.c] {
            return Err(shape_err!(
                "calibration expects F_e [N_k, {}] and F_tg [{}], got {s:?} and {:?}",
                self.c,
                self.c,
                g.shape(f_tg)
            ));
        }
        let n_k = s[0];
        let global = broadcast_global(g, f_tg, n_k)?;
        let x = g.concat(&[f_e, global])?;
        let q = self.q.forward(g, x)?;
        let k = self.k.forward(g, x)?;
        let v = self.v.forward(g, x)?;
        let a = g.attention(q, k, v, 1)?;
        let h = g.add(x, a)?;
        let logits = self.score.forward(g, h)?;
        let logits = g.reshape(logits, &[n_k])?;
        let alphas = g.sigmoid(logits);
        Ok((alphas, h))
    }

    /// `f_e + α ⊙ target`, row by row.
    pub fn calibrate(g: &mut Graph, f_e: NodeId, alphas: NodeId, target: NodeId) -> Result<NodeId> {
        let weighted = g.scale_rows(target, alphas)?;
        g.add(f_e, weighted)
    }

    pub fn forward(&self, g: &mut Graph, f_e: NodeId, f_tg: NodeId) -> Result<CalibratedFeatures> {
        let (alphas, h) = self.score_emphases(g, f_e, f_tg)?;
        let target = match self.variant {
            EcmVariant::ScaleInput => f_e,
            EcmVariant::ScaleAttended => g.slice_cols(h, 0, self.c)?,
        };
        let f_c = Self::calibrate(g, f_e, alphas, target)?;
        Ok(CalibratedFeatures { f_c, alphas })
    }
}
