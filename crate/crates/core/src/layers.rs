//! Parameterised building blocks shared by the model modules.

use alloc::vec::Vec;

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::params::{ParamBuilder, ParamId};

/// Dense map `[.., din] -> [.., dout]` (Xavier-uniform weights, zero bias).
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, din: usize, dout: usize, bias: bool) -> Result<Self> {
        let mut s = pb.scope(name);
        let bound = libm::sqrt(6.0 / (din + dout) as f64);
        let w = s.uniform("weight", &[din, dout], bound)?;
        let b = if bias {
            Some(s.constant("bias", &[dout], 0.0)?)
        } else {
            None
        };
        Ok(Self { w, b, din, dout })
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        g.linear(x, self.w, self.b)
    }
}

/// Same-padded convolution with He-uniform init.
#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, k: usize, cin: usize, cout: usize) -> Result<Self> {
        let mut s = pb.scope(name);
        let bound = libm::sqrt(6.0 / (k * k * cin) as f64);
        let w = s.uniform("weight", &[k, k, cin, cout], bound)?;
        let b = s.constant("bias", &[cout], 0.0)?;
        Ok(Self { w, b })
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        g.conv2d(x, self.w, self.b)
    }
}

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, width: usize) -> Result<Self> {
        let mut s = pb.scope(name);
        Ok(Self {
            gamma: s.constant("gamma", &[width], 1.0)?,
            beta: s.constant("beta", &[width], 0.0)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        g.layer_norm(x, self.gamma, self.beta, LN_EPS)
    }
}

/// Multi-head attention with query/key/value/output projections.
#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

/// Output of an attention layer together with the core attention node,
/// whose weights can be read back with [`Graph::attention_weights`].
#[derive(Debug, Clone, Copy)]
pub struct Attended {
    pub out: NodeId,
    pub core: NodeId,
}

impl MultiHeadAttention {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, dq: usize, dkv: usize, d: usize, heads: usize) -> Result<Self> {
        let mut s = pb.scope(name);
        Ok(Self {
            q: Linear::new(&mut s, "q", dq, d, true)?,
            k: Linear::new(&mut s, "k", dkv, d, true)?,
            v: Linear::new(&mut s, "v", dkv, d, true)?,
            o: Linear::new(&mut s, "o", d, dq, true)?,
            heads,
        })
    }

    pub fn forward(&self, g: &mut Graph, query: NodeId, context: NodeId) -> Result<Attended> {
        let q = self.q.forward(g, query)?;
        let k = self.k.forward(g, context)?;
        let v = self.v.forward(g, context)?;
        let core = g.attention(q, k, v, self.heads)?;
        let out = self.o.forward(g, core)?;
        Ok(Attended { out, core })
    }
}

/// Two-layer ReLU feed-forward block.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, width: usize, hidden: usize) -> Result<Self> {
        let mut s = pb.scope(name);
        Ok(Self {
            fc1: Linear::new(&mut s, "fc1", width, hidden, true)?,
            fc2: Linear::new(&mut s, "fc2", hidden, width, true)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let h = self.fc1.forward(g, x)?;
        let h = g.relu(h);
        self.fc2.forward(g, h)
    }
}

/// Flatten `[H, W, C]` to `[H·W, C]` (row-major, invertible).
pub fn flatten_spatial(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let s: Vec<usize> = g.shape(x).to_vec();
    if s.len() != 3 {
        return Err(crate::error::Error::InvalidShape(alloc::format!(
            "flatten_spatial expects [H, W, C], got {s:?}"
        )));
    }
    g.reshape(x, &[s[0] * s[1], s[2]])
}
