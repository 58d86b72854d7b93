//! Gradient-check suite: each module in isolation, then the full model.
//!
//! Module checks feed seeded random tensors into the module, reduce its
//! outputs with fixed random readout weights, and compare the tape against
//! central differences for every parameter and every float input.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::calibration::EmphasisCalibration;
use crate::config::Config;
use crate::decoder::{training_loss, MaskDecoder};
use crate::encoders::{ImageEncoder, TextEncoder, Vocab};
use crate::error::Result;
use crate::fusion::EmphasisGeneration;
use crate::gradcheck::{finite_diff_check, CheckOptions, CheckReport};
use crate::graph::{Graph, NodeId};
use crate::model::FcNet;
use crate::neck::VisionNeck;
use crate::params::{ParamBuilder, ParamStore};
use crate::rng::{derive_seed, RngStream};
use crate::synthdata::{generate_sample, SceneConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GroupReport {
    pub group: String,
    pub report: CheckReport,
}

fn random(rng: &mut RngStream, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| std * rng.normal()).collect();
    Tensor::new(shape, data).expect("positive dims")
}

/// `Σ node ⊙ w` with `w` drawn from `rng`.
fn readout(g: &mut Graph, rng: &mut RngStream, node: NodeId) -> Result<NodeId> {
    let shape = g.shape(node).to_vec();
    let w = g.input(&random(rng, &shape, 1.0));
    let prod = g.mul(node, w)?;
    Ok(g.sum(prod))
}

fn readouts(g: &mut Graph, seed: u64, nodes: &[NodeId]) -> Result<NodeId> {
    let mut rng = RngStream::new(seed);
    let mut total = readout(g, &mut rng, nodes[0])?;
    for &n in &nodes[1..] {
        let r = readout(g, &mut rng, n)?;
        total = g.add(total, r)?;
    }
    Ok(total)
}

/// Run every group at the sizes in `cfg`.
pub fn gradient_suite(cfg: &Config, opts: &CheckOptions) -> Result<Vec<GroupReport>> {
    cfg.validate()?;
    let seed = cfg.seed;
    let (h, w) = (cfg.height, cfg.width);
    let (hv, wv) = cfg.vision_grid();
    let c = cfg.c;
    let vocab = Vocab::synthetic();
    let words = ["red", "circle", "left", "of", "blue", "square"];
    let tokens = vocab.tokenize(
        &words[..(cfg.max_sentence_length - 2).min(words.len())],
        cfg.max_sentence_length,
    )?;
    let l = tokens.len();
    let mut data_rng = RngStream::new(derive_seed(seed, 0xC4EC));
    let out_seed = derive_seed(seed, 0x0E7);
    let mut groups = Vec::new();

    let mut run = |name: &str,
                   build: &dyn Fn(&mut ParamBuilder<'_>) -> Result<()>,
                   inputs: &mut [Tensor],
                   f: &dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>|
     -> Result<()> {
        let mut store = ParamStore::new();
        let mut init = RngStream::new(derive_seed(seed, 0x1417));
        build(&mut ParamBuilder::new(&mut store, &mut init))?;
        let report = finite_diff_check(&mut store, inputs, opts, f)?;
        groups.push(GroupReport {
            group: name.to_string(),
            report,
        });
        Ok(())
    };

    // Each module is rebuilt inside `f` from a store with identical layout,
    // so the closure only needs the module description.
    macro_rules! module {
        ($ctor:expr) => {{
            let mut store = ParamStore::new();
            let mut init = RngStream::new(derive_seed(seed, 0x1417));
            let m = $ctor(&mut ParamBuilder::new(&mut store, &mut init))?;
            m
        }};
    }

    let text = module!(|pb: &mut ParamBuilder<'_>| TextEncoder::new(pb, cfg, vocab.len()));
    run(
        "encoders.text",
        &|pb| TextEncoder::new(pb, cfg, vocab.len()).map(drop),
        &mut [],
        &|g, _| {
            let t = text.forward(g, &tokens)?;
            readouts(g, out_seed, &[t.per_token, t.global])
        },
    )?;

    let image = module!(|pb: &mut ParamBuilder<'_>| ImageEncoder::new(pb, cfg));
    run(
        "encoders.image",
        &|pb| ImageEncoder::new(pb, cfg).map(drop),
        &mut [random(&mut data_rng, &[h, w, 3], 0.5)],
        &|g, ids| {
            let f = image.forward(g, ids[0])?;
            readouts(g, out_seed, &[f.f_v2, f.f_v3, f.f_v4])
        },
    )?;

    let neck = module!(|pb: &mut ParamBuilder<'_>| VisionNeck::new(pb, cfg));
    run(
        "neck",
        &|pb| VisionNeck::new(pb, cfg).map(drop),
        &mut [
            random(&mut data_rng, &[h / 8, w / 8, cfg.c2], 0.5),
            random(&mut data_rng, &[hv, wv, cfg.c3], 0.5),
            random(&mut data_rng, &[h / 32, w / 32, cfg.c4], 0.5),
        ],
        &|g, ids| {
            let ms = crate::encoders::MultiScaleFeatures {
                f_v2: ids[0],
                f_v3: ids[1],
                f_v4: ids[2],
            };
            let out = neck.forward(g, &ms)?;
            readouts(g, out_seed, &[out.f_v])
        },
    )?;

    let egm = module!(|pb: &mut ParamBuilder<'_>| EmphasisGeneration::new(pb, cfg));
    run(
        "fusion.egm",
        &|pb| EmphasisGeneration::new(pb, cfg).map(drop),
        &mut [
            random(&mut data_rng, &[hv, wv, c], 0.5),
            random(&mut data_rng, &[l, c], 0.5),
        ],
        &|g, ids| {
            let (_, e) = egm.forward(g, ids[0], ids[1])?;
            readouts(g, out_seed, &[e.f_e])
        },
    )?;

    let ecm = module!(|pb: &mut ParamBuilder<'_>| EmphasisCalibration::new(pb, cfg));
    run(
        "calibration.ecm",
        &|pb| EmphasisCalibration::new(pb, cfg).map(drop),
        &mut [
            random(&mut data_rng, &[cfg.n_k, c], 0.5),
            random(&mut data_rng, &[c], 0.5),
        ],
        &|g, ids| {
            let out = ecm.forward(g, ids[0], ids[1])?;
            readouts(g, out_seed, &[out.f_c, out.alphas])
        },
    )?;

    let decoder = module!(|pb: &mut ParamBuilder<'_>| MaskDecoder::new(pb, cfg));
    let sample = generate_sample(derive_seed(seed, 0x5A), &SceneConfig::new(h, w))?;
    run(
        "decoder",
        &|pb| MaskDecoder::new(pb, cfg).map(drop),
        &mut [
            random(&mut data_rng, &[hv, wv, c], 0.5),
            random(&mut data_rng, &[cfg.n_k, c], 0.5),
            sample.image.clone(),
        ],
        &|g, ids| {
            let t = decoder.decode(g, ids[0], ids[1], ids[2])?;
            training_loss(g, &t.mask, &sample.mask)
        },
    )?;

    let model = FcNet::with_vocab(cfg.clone(), vocab.clone())?;
    let report = model.gradient_check(&sample.image, &sample.expression, &sample.mask, opts)?;
    groups.push(GroupReport {
        group: "end_to_end".to_string(),
        report,
    });
    Ok(groups)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_group_passes_at_toy_sizes() {
        let opts = CheckOptions {
            max_coords: Some(4),
            ..Default::default()
        };
        let groups = gradient_suite(&Config::toy(), &opts).unwrap();
        let names: Vec<&str> = groups.iter().map(|g| g.group.as_str()).collect();
        assert_eq!(
            names,
            [
                "encoders.text",
                "encoders.image",
                "neck",
                "fusion.egm",
                "calibration.ecm",
                "decoder",
                "end_to_end"
            ]
        );
        for g in &groups {
            assert!(g.report.max_rel_error() <= 1e-4, "{}: {:?}", g.group, g.report);
        }
    }
}
