//! Transformer mask decoder and mask head.
//!
//! Each layer applies, in this order:
//!
//! ```text
//! F'_v = MHSA(LN(F_v)) + F_v
//! F'_q = MHCA(LN(F'_v), F_c) + F'_v
//! F_q  = MLP(LN(F'_q)) + F'_q
//! ```
//!
//! The mask head runs a 3x3 convolution on the stride-16 decoder map. Its
//! first output channel is a coarse logit; the remaining `P` channels are a
//! per-position filter applied to a full-resolution pixel embedding of the
//! image after both are bilinearly upsampled ×16.

use alloc::vec::Vec;

use crate::config::Config;
use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, NodeId};
use crate::layers::{Attended, Conv, LayerNorm, Mlp, MultiHeadAttention};
use crate::params::ParamBuilder;
use crate::tensor::Tensor;

/// Fixed 2D sinusoidal encoding `[Hv·Wv, C]`: the first `C/2` channels
/// encode the row, the rest the column, as interleaved sin/cos pairs.
pub fn sine_position_encoding(hv: usize, wv: usize, c: usize) -> Tensor {
    let quarter = c / 4;
    let mut data = Vec::with_capacity(hv * wv * c);
    for y in 0..hv {
        for x in 0..wv {
            for (pos, n) in [(y, hv), (x, wv)] {
                let p = (pos as f64 + 0.5) / n as f64 * core::f64::consts::TAU;
                for i in 0..quarter {
                    let freq = libm::pow(10_000.0, -(i as f64) / quarter as f64);
                    data.push(libm::sin(p * freq));
                    data.push(libm::cos(p * freq));
                }
            }
        }
    }
    Tensor::new(&[hv * wv, c], data).expect("C is a multiple of 4")
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderLayer {
    pub ln1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln3: LayerNorm,
    pub mlp: Mlp,
}

/// Outputs of one decoder layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerTrace {
    pub out: NodeId,
    pub self_attn: Attended,
    pub cross_attn: Attended,
}

impl DecoderLayer {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, c: usize, heads: usize, dff: usize) -> Result<Self> {
        if heads == 0 || !c.is_multiple_of(heads) {
            return Err(Error::InvalidConfig(alloc::format!(
                "decoder heads ({heads}) must divide C ({c})"
            )));
        }
        let mut s = pb.scope(name);
        Ok(Self {
            ln1: LayerNorm::new(&mut s, "ln1", c)?,
            self_attn: MultiHeadAttention::new(&mut s, "self_attn", c, c, c, heads)?,
            ln2: LayerNorm::new(&mut s, "ln2", c)?,
            cross_attn: MultiHeadAttention::new(&mut s, "cross_attn", c, c, c, heads)?,
            ln3: LayerNorm::new(&mut s, "ln3", c)?,
            mlp: Mlp::new(&mut s, "mlp", c, dff)?,
        })
    }

    /// `tokens: [Hv·Wv, C]`, `f_c: [N_k, C]`.
    pub fn forward(&self, g: &mut Graph, tokens: NodeId, f_c: NodeId) -> Result<LayerTrace> {
        let h = self.ln1.forward(g, tokens)?;
        let sa = self.self_attn.forward(g, h, h)?;
        let x = g.add(sa.out, tokens)?;
        let h = self.ln2.forward(g, x)?;
        let ca = self.cross_attn.forward(g, h, f_c)?;
        let x = g.add(ca.out, x)?;
        let h = self.ln3.forward(g, x)?;
        let m = self.mlp.forward(g, h)?;
        let out = g.add(m, x)?;
        Ok(LayerTrace {
            out,
            self_attn: sa,
            cross_attn: ca,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MaskPrediction {
    /// Coarse logits `[Hv, Wv]`.
    pub logits: NodeId,
    /// Full-resolution logits `[H, W]`.
    pub logits_full: NodeId,
    /// `sigmoid(logits_full)`, `[H, W]`.
    pub probs_full: NodeId,
}

#[derive(Debug, Clone)]
pub struct MaskDecoder {
    pub layers: Vec<DecoderLayer>,
    pub mask_conv: Conv,
    pub pixel_embed: Conv,
    pub pos_encoding: bool,
    pub stride: usize,
}

/// Everything the decoder produced for one sample.
#[derive(Debug, Clone)]
pub struct DecoderTrace {
    pub layers: Vec<LayerTrace>,
    pub mask: MaskPrediction,
}

impl MaskDecoder {
    pub fn new(pb: &mut ParamBuilder<'_>, cfg: &Config) -> Result<Self> {
        let mut s = pb.scope("decoder");
        let layers = (0..cfg.n_dec_layers)
            .map(|i| DecoderLayer::new(&mut s, &alloc::format!("layer{i}"), cfg.c, cfg.heads, cfg.dff))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            mask_conv: Conv::new(&mut s, "mask_conv", 3, cfg.c, 1 + cfg.pixel_channels)?,
            pixel_embed: Conv::new(&mut s, "pixel_embed", 1, 3, cfg.pixel_channels)?,
            pos_encoding: cfg.pixel_pos_encoding,
            stride: 16,
        })
    }

    /// `f_v: [Hv, Wv, C]`, `f_c: [N_k, C]`, `image: [H, W, 3]`.
    pub fn decode(&self, g: &mut Graph, f_v: NodeId, f_c: NodeId, image: NodeId) -> Result<DecoderTrace> {
        let (hv, wv, c) = match *g.shape(f_v) {
            [a, b, c] => (a, b, c),
            ref s => return Err(shape_err!("decoder expects F_v [Hv, Wv, C], got {s:?}")),
        };
        match *g.shape(image) {
            [h, w, 3] if h == hv * self.stride && w == wv * self.stride => {}
            ref s => {
                return Err(shape_err!(
                    "image {s:?} does not match a {hv}x{wv} map at stride {}",
                    self.stride
                ))
            }
        }
        let mut x = g.reshape(f_v, &[hv * wv, c])?;
        if self.pos_encoding {
            let pe = g.input(&sine_position_encoding(hv, wv, c));
            x = g.add(x, pe)?;
        }
        let mut traces = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let t = layer.forward(g, x, f_c)?;
            x = t.out;
            traces.push(t);
        }
        let mask = self.mask_head(g, x, hv, wv, image)?;
        Ok(DecoderTrace { layers: traces, mask })
    }

    pub fn mask_head(
        &self,
        g: &mut Graph,
        tokens: NodeId,
        hv: usize,
        wv: usize,
        image: NodeId,
    ) -> Result<MaskPrediction> {
        let c = g.shape(tokens)[1];
        let map = g.reshape(tokens, &[hv, wv, c])?;
        let head = self.mask_conv.forward(g, map)?;
        let logits = g.slice_cols(head, 0, 1)?;
        let logits = g.reshape(logits, &[hv, wv])?;
        let up = g.upsample_bilinear(head, self.stride)?;
        let pix = self.pixel_embed.forward(g, image)?;
        let pix = g.relu(pix);
        let logits_full = g.pixel_correlate(up, pix)?;
        let probs_full = g.sigmoid(logits_full);
        Ok(MaskPrediction {
            logits,
            logits_full,
            probs_full,
        })
    }
}

/// BCE of the full-resolution probabilities against a binary mask.
pub fn training_loss(g: &mut Graph, pred: &MaskPrediction, gt: &Tensor) -> Result<NodeId> {
    if gt.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidData(alloc::string::String::from(
            "ground-truth mask must contain only 0 and 1",
        )));
    }
    g.bce(pred.probs_full, gt)
}
