//! Vision neck: fuses the stride-8/16/32 backbone maps into one stride-16
//! map and appends normalised coordinate channels.
//!
//! ```text
//! F_m4 = Up(relu(F_v4 W_v4))
//! F_m3 = [relu(F_m4 W_m4), relu(F_v3 W_v3)]
//! F_m2 = [relu(F_m3 W_m3), relu(Avg(F_v2) W_v2)]
//! F_m  = Conv1x1([F_m2, F_m3, F_m4])
//! F_v  = Conv1x1([F_m, F_coord])
//! ```

use alloc::vec::Vec;

use crate::config::Config;
use crate::encoders::MultiScaleFeatures;
use crate::error::{shape_err, Result};
use crate::graph::{Graph, NodeId};
use crate::layers::Conv;
use crate::params::ParamBuilder;
use crate::tensor::Tensor;

/// `[Hv, Wv, 2]` with channel 0 = x and channel 1 = y, each spanning `[-1, 1]`.
/// A size-1 axis maps to 0.
pub fn make_coords(hv: usize, wv: usize) -> Tensor {
    fn lin(i: usize, n: usize) -> f64 {
        if n == 1 {
            0.0
        } else {
            -1.0 + 2.0 * i as f64 / (n - 1) as f64
        }
    }
    let mut data = Vec::with_capacity(hv * wv * 2);
    for y in 0..hv {
        for x in 0..wv {
            data.push(lin(x, wv));
            data.push(lin(y, hv));
        }
    }
    Tensor::new(&[hv, wv, 2], data).expect("coordinate grid is well formed")
}

#[derive(Debug, Clone)]
pub struct VisionNeck {
    pub w_v4: Conv,
    pub w_m4: Conv,
    pub w_v3: Conv,
    pub w_m3: Conv,
    pub w_v2: Conv,
    pub aggregate: Conv,
    pub coord: Conv,
}

/// Intermediate neck maps, exposed for inspection and tests.
#[derive(Debug, Clone, Copy)]
pub struct NeckOutput {
    pub f_m4: NodeId,
    pub f_m3: NodeId,
    pub f_m2: NodeId,
    pub f_m: NodeId,
    /// `[H/16, W/16, C]`
    pub f_v: NodeId,
}

impl VisionNeck {
    pub fn new(pb: &mut ParamBuilder<'_>, cfg: &Config) -> Result<Self> {
        let (c, half) = (cfg.c, cfg.c / 2);
        let mut s = pb.scope("neck");
        Ok(Self {
            w_v4: Conv::new(&mut s, "w_v4", 1, cfg.c4, c)?,
            w_m4: Conv::new(&mut s, "w_m4", 1, c, half)?,
            w_v3: Conv::new(&mut s, "w_v3", 1, cfg.c3, c - half)?,
            w_m3: Conv::new(&mut s, "w_m3", 1, c, half)?,
            w_v2: Conv::new(&mut s, "w_v2", 1, cfg.c2, c - half)?,
            aggregate: Conv::new(&mut s, "aggregate", 1, 3 * c, c)?,
            coord: Conv::new(&mut s, "coord", 1, c + 2, c)?,
        })
    }

    /// `Up(relu(F_v4 W_v4))`: stride 32 -> 16.
    pub fn lift_stage4(&self, g: &mut Graph, f_v4: NodeId) -> Result<NodeId> {
        let y = self.w_v4.forward(g, f_v4)?;
        let y = g.relu(y);
        g.upsample2x(y)
    }

    /// Returns `(F_m3, F_m2)`.
    pub fn merge_stages(&self, g: &mut Graph, f_m4: NodeId, f_v3: NodeId, f_v2: NodeId) -> Result<(NodeId, NodeId)> {
        let (s4, s3, s2) = (g.shape(f_m4).to_vec(), g.shape(f_v3).to_vec(), g.shape(f_v2).to_vec());
        if s4[..2] != s3[..2] || s2[0] != 2 * s3[0] || s2[1] != 2 * s3[1] {
            return Err(shape_err!(
                "neck strides disagree: F_m4 {s4:?}, F_v3 {s3:?}, F_v2 {s2:?}"
            ));
        }
        let a = self.w_m4.forward(g, f_m4)?;
        let a = g.relu(a);
        let b = self.w_v3.forward(g, f_v3)?;
        let b = g.relu(b);
        let f_m3 = g.concat(&[a, b])?;

        let pooled = g.avgpool2x2(f_v2)?;
        let a = self.w_m3.forward(g, f_m3)?;
        let a = g.relu(a);
        let b = self.w_v2.forward(g, pooled)?;
        let b = g.relu(b);
        let f_m2 = g.concat(&[a, b])?;
        Ok((f_m3, f_m2))
    }

    /// Returns `(F_m, F_v)`.
    pub fn aggregate(&self, g: &mut Graph, f_m2: NodeId, f_m3: NodeId, f_m4: NodeId) -> Result<(NodeId, NodeId)> {
        let cat = g.concat(&[f_m2, f_m3, f_m4])?;
        let f_m = self.aggregate.forward(g, cat)?;
        let (hv, wv) = (g.shape(f_m)[0], g.shape(f_m)[1]);
        let coords = g.input(&make_coords(hv, wv));
        let cat = g.concat(&[f_m, coords])?;
        let f_v = self.coord.forward(g, cat)?;
        Ok((f_m, f_v))
    }

    pub fn forward(&self, g: &mut Graph, feats: &MultiScaleFeatures) -> Result<NeckOutput> {
        let f_m4 = self.lift_stage4(g, feats.f_v4)?;
        let (f_m3, f_m2) = self.merge_stages(g, f_m4, feats.f_v3, feats.f_v2)?;
        let (f_m, f_v) = self.aggregate(g, f_m2, f_m3, f_m4)?;
        Ok(NeckOutput {
            f_m4,
            f_m3,
            f_m2,
            f_m,
            f_v,
        })
    }
}
