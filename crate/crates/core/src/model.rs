//! Full pipeline: encoders, neck, emphasis generation, calibration and
//! decoder, assembled according to the ablation switches in [`Config`].

use alloc::vec::Vec;

use crate::calibration::{CalibratedFeatures, EmphasisCalibration};
use crate::config::Config;
use crate::decoder::{training_loss, DecoderTrace, MaskDecoder};
use crate::encoders::{ImageEncoder, MultiScaleFeatures, TextEncoder, TextFeatures, TokenSequence, Vocab};
use crate::error::{shape_err, Result};
use crate::fusion::{EmphasisFeatures, EmphasisGeneration, KeyVisionFeatures, SingleGuidedFusion};
use crate::gradcheck::{finite_diff_check, CheckOptions, CheckReport};
use crate::graph::{Fault, Graph, NodeId};
use crate::neck::{NeckOutput, VisionNeck};
use crate::params::{Grads, ParamBuilder, ParamStore};
use crate::rng::{derive_seed, RngStream};
use crate::tensor::Tensor;

/// Stream index reserved for parameter initialisation.
const INIT_STREAM: u64 = 0x1417;

#[derive(Debug, Clone)]
pub enum Fusion {
    Emphasis(EmphasisGeneration),
    SingleGuided(SingleGuidedFusion),
}

#[derive(Debug, Clone)]
pub struct Architecture {
    pub text: TextEncoder,
    pub image: ImageEncoder,
    pub neck: VisionNeck,
    pub fusion: Fusion,
    pub calibration: Option<EmphasisCalibration>,
    pub decoder: MaskDecoder,
}

/// Node handles for every stage of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub image: NodeId,
    pub text: TextFeatures,
    pub backbone: MultiScaleFeatures,
    pub neck: NeckOutput,
    pub key_features: Option<KeyVisionFeatures>,
    pub emphasis: EmphasisFeatures,
    pub calibrated: Option<CalibratedFeatures>,
    /// Rows handed to the decoder: `F_c`, or `F_e` when calibration is off.
    pub f_c: NodeId,
    pub decoder: DecoderTrace,
}

/// Detached outputs for one image-expression pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// `[H, W]` probabilities.
    pub probs: Tensor,
    /// `[N_k, L]` emphasis-to-token attention, when emphasis generation is on.
    pub attn_map: Option<Tensor>,
    /// `[N_k]` calibration scores, when calibration is on.
    pub alphas: Option<Tensor>,
}

impl Prediction {
    /// Pixels with probability strictly above 0.5.
    pub fn binary_mask(&self) -> Vec<bool> {
        self.probs.data().iter().map(|&p| p > 0.5).collect()
    }
}

#[derive(Debug, Clone)]
pub struct FcNet {
    pub config: Config,
    pub vocab: Vocab,
    pub params: ParamStore,
    pub arch: Architecture,
}

impl FcNet {
    pub fn new(config: Config) -> Result<Self> {
        Self::with_vocab(config, Vocab::synthetic())
    }

    /// Parameters are drawn from a stream derived from `config.seed`.
    pub fn with_vocab(config: Config, vocab: Vocab) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = RngStream::new(derive_seed(config.seed, INIT_STREAM));
        let arch = {
            let mut pb = ParamBuilder::new(&mut params, &mut rng);
            let text = TextEncoder::new(&mut pb, &config, vocab.len())?;
            let image = ImageEncoder::new(&mut pb, &config)?;
            let neck = VisionNeck::new(&mut pb, &config)?;
            let fusion = if config.use_egm {
                Fusion::Emphasis(EmphasisGeneration::new(&mut pb, &config)?)
            } else {
                Fusion::SingleGuided(SingleGuidedFusion::new(&mut pb, &config)?)
            };
            let calibration = if config.use_ecm {
                Some(EmphasisCalibration::new(&mut pb, &config)?)
            } else {
                None
            };
            let decoder = MaskDecoder::new(&mut pb, &config)?;
            Architecture {
                text,
                image,
                neck,
                fusion,
                calibration,
                decoder,
            }
        };
        Ok(Self {
            config,
            vocab,
            params,
            arch,
        })
    }

    pub fn tokenize<S: AsRef<str>>(&self, words: &[S]) -> Result<TokenSequence> {
        self.vocab.tokenize(words, self.config.max_sentence_length)
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let want = [self.config.height, self.config.width, 3];
        if image.shape() != want {
            return Err(shape_err!("image must be {want:?}, got {:?}", image.shape()));
        }
        Ok(())
    }

    /// Build the forward graph from an image node `[H, W, 3]`.
    pub fn forward_nodes(&self, g: &mut Graph, image: NodeId, tokens: &TokenSequence) -> Result<ForwardTrace> {
        let a = &self.arch;
        let text = a.text.forward(g, tokens)?;
        let backbone = a.image.forward(g, image)?;
        let neck = a.neck.forward(g, &backbone)?;
        let (key_features, emphasis) = match &a.fusion {
            Fusion::Emphasis(egm) => {
                let (kv, e) = egm.forward(g, neck.f_v, text.per_token)?;
                (Some(kv), e)
            }
            Fusion::SingleGuided(sg) => (None, sg.forward(g, neck.f_v, text.per_token)?),
        };
        let calibrated = match &a.calibration {
            Some(ecm) => Some(ecm.forward(g, emphasis.f_e, text.global)?),
            None => None,
        };
        let f_c = calibrated.map_or(emphasis.f_e, |c| c.f_c);
        let decoder = a.decoder.decode(g, neck.f_v, f_c, image)?;
        Ok(ForwardTrace {
            image,
            text,
            backbone,
            neck,
            key_features,
            emphasis,
            calibrated,
            f_c,
            decoder,
        })
    }

    pub fn forward(&self, g: &mut Graph, image: &Tensor, tokens: &TokenSequence) -> Result<ForwardTrace> {
        self.check_image(image)?;
        let node = g.input(image);
        self.forward_nodes(g, node, tokens)
    }

    /// BCE loss and parameter gradients for one sample.
    pub fn loss_and_grads<S: AsRef<str>>(
        &self,
        image: &Tensor,
        words: &[S],
        mask: &Tensor,
        fault: Option<Fault>,
    ) -> Result<(f64, Grads)> {
        let tokens = self.tokenize(words)?;
        let mut g = Graph::new(&self.params).with_fault(fault);
        let trace = self.forward(&mut g, image, &tokens)?;
        let loss = training_loss(&mut g, &trace.decoder.mask, mask)?;
        let value = g.value(loss)[0];
        let back = g.backward(loss)?;
        Ok((value, back.params))
    }

    /// Extract the `[N_k, L]` attention map from a finished graph.
    pub fn attention_map(g: &Graph, trace: &ForwardTrace) -> Option<Tensor> {
        let node = trace.emphasis.attn?;
        let w = g.attention_weights(node)?;
        let n_k = g.shape(node)[0];
        let l = w.len() / n_k;
        Tensor::new(&[n_k, l], w.to_vec()).ok()
    }

    pub fn predict<S: AsRef<str>>(&self, image: &Tensor, words: &[S]) -> Result<Prediction> {
        let tokens = self.tokenize(words)?;
        let mut g = Graph::new(&self.params);
        let trace = self.forward(&mut g, image, &tokens)?;
        let mut probs = g.tensor(trace.decoder.mask.probs_full);
        if !probs.all_finite() {
            return Err(crate::error::Error::NonFinite("predicted probabilities".into()));
        }
        probs = probs.reshape(&[self.config.height, self.config.width])?;
        Ok(Prediction {
            attn_map: Self::attention_map(&g, &trace),
            alphas: trace.calibrated.map(|c| g.tensor(c.alphas)),
            probs,
        })
    }

    /// Finite-difference check of the full training loss for one sample,
    /// covering every parameter tensor and the image.
    pub fn gradient_check<S: AsRef<str>>(
        &self,
        image: &Tensor,
        words: &[S],
        mask: &Tensor,
        opts: &CheckOptions,
    ) -> Result<CheckReport> {
        self.check_image(image)?;
        let tokens = self.tokenize(words)?;
        let mut store = self.params.clone();
        let mut inputs = [image.clone()];
        finite_diff_check(&mut store, &mut inputs, opts, |g, ids| {
            let trace = self.forward_nodes(g, ids[0], &tokens)?;
            training_loss(g, &trace.decoder.mask, mask)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_sample, SceneConfig};
    use crate::test_util::zero_prefix;

    fn toy64() -> Config {
        Config {
            height: 64,
            width: 64,
            ..Config::toy()
        }
    }

    fn sample(cfg: &Config, seed: u64) -> crate::synthdata::Sample {
        generate_sample(seed, &SceneConfig::new(cfg.height, cfg.width)).unwrap()
    }

    #[test]
    fn n_k_at_or_above_c_is_rejected() {
        for n_k in [16, 17] {
            let err = FcNet::new(Config { n_k, ..Config::toy() }).unwrap_err();
            assert!(alloc::format!("{err}").contains("N_k < C"), "{err}");
        }
    }

    #[test]
    fn prediction_shapes_and_simplex_rows() {
        let cfg = toy64();
        let m = FcNet::new(cfg.clone()).unwrap();
        let s = sample(&cfg, 3);
        let p = m.predict(&s.image, &s.expression).unwrap();
        assert_eq!(p.probs.shape(), &[64, 64]);
        let l = s.expression.len() + 2;
        let attn = p.attn_map.clone().unwrap();
        assert_eq!(attn.shape(), &[cfg.n_k, l]);
        assert!(attn
            .data()
            .chunks(l)
            .all(|r| (r.iter().sum::<f64>() - 1.0).abs() <= 1e-9));
        assert_eq!(p.alphas.as_ref().unwrap().shape(), &[cfg.n_k]);
        assert_eq!(p.binary_mask().len(), 64 * 64);
    }

    #[test]
    fn ablation_switches_drop_the_matching_outputs() {
        let cfg = toy64();
        let s = sample(&cfg, 3);
        let no_ecm = FcNet::new(Config {
            use_ecm: false,
            ..cfg.clone()
        })
        .unwrap();
        let p = no_ecm.predict(&s.image, &s.expression).unwrap();
        assert!(p.alphas.is_none() && p.attn_map.is_some());
        let neither = FcNet::new(Config {
            use_ecm: false,
            use_egm: false,
            ..cfg
        })
        .unwrap();
        let p = neither.predict(&s.image, &s.expression).unwrap();
        assert!(p.alphas.is_none() && p.attn_map.is_none());
        assert!(neither.params.find("egm.q.weight").is_none());
    }

    #[test]
    fn prediction_is_deterministic_and_seeded() {
        let cfg = toy64();
        let s = sample(&cfg, 4);
        let a = FcNet::new(cfg.clone())
            .unwrap()
            .predict(&s.image, &s.expression)
            .unwrap();
        let b = FcNet::new(cfg.clone())
            .unwrap()
            .predict(&s.image, &s.expression)
            .unwrap();
        assert_eq!(a, b);
        let c = FcNet::new(Config { seed: 1, ..cfg })
            .unwrap()
            .predict(&s.image, &s.expression)
            .unwrap();
        assert_ne!(a.probs, c.probs);
    }

    #[test]
    fn zeroed_score_head_scales_emphasis_by_one_and_a_half() {
        let cfg = toy64();
        let mut m = FcNet::new(cfg).unwrap();
        zero_prefix(&mut m.params, "ecm.score");
        let s = sample(&m.config, 5);
        let tokens = m.tokenize(&s.expression).unwrap();
        let mut g = Graph::new(&m.params);
        let t = m.forward(&mut g, &s.image, &tokens).unwrap();
        let want: Vec<f64> = g.value(t.emphasis.f_e).iter().map(|v| 1.5 * v).collect();
        assert_eq!(g.value(t.f_c), want.as_slice());
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let m = FcNet::new(toy64()).unwrap();
        let s = sample(&m.config, 6);
        assert!(m.predict(&Tensor::zeros(&[32, 64, 3]), &s.expression).is_err());
        assert!(m.predict(&s.image, &["purple", "circle"]).is_err());
        let half = Tensor::full(&[64, 64], 0.5);
        assert!(m.loss_and_grads(&s.image, &s.expression, &half, None).is_err());
    }

    #[test]
    fn tiny_stack_passes_the_gradient_check() {
        let cfg = Config {
            c: 8,
            n_k: 2,
            heads: 2,
            text_heads: 2,
            dff: 16,
            c2: 4,
            c3: 4,
            c4: 8,
            pixel_channels: 2,
            ..toy64()
        };
        let m = FcNet::new(cfg.clone()).unwrap();
        let s = sample(&cfg, 8);
        let opts = CheckOptions {
            max_coords: Some(6),
            ..Default::default()
        };
        let r = m.gradient_check(&s.image, &s.expression, &s.mask, &opts).unwrap();
        assert_eq!(r.entries.len(), m.params.len() + 1);
        assert!(r.max_rel_error() <= 1e-4, "{r:?}");
    }
}
