//! Word-level tokenizer plus small text and image encoders.
//!
//! The text encoder is a pre-norm transformer over learned token and
//! position embeddings; its output row at `[EOS]` is linearly mapped to the
//! global sentence feature. The image encoder is five `3x3 conv -> ReLU ->
//! 2x2 avgpool` blocks and exposes the stride-8/16/32 maps.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::config::Config;
use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, NodeId};
use crate::layers::{Conv, LayerNorm, Linear, Mlp, MultiHeadAttention};
use crate::params::{ParamBuilder, ParamId};

pub const SOS: usize = 0;
pub const EOS: usize = 1;
pub const SOS_TOKEN: &str = "[SOS]";
pub const EOS_TOKEN: &str = "[EOS]";

/// Closed word list used by the synthetic benchmark.
pub const SYNTHETIC_WORDS: [&str; 13] = [
    "red", "green", "blue", "yellow", "circle", "square", "triangle", "left", "right", "of", "above", "below", "not",
];

/// Token table; id = position, ids 0 and 1 are `[SOS]` and `[EOS]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
}

impl Vocab {
    pub fn synthetic() -> Self {
        let mut tokens = alloc::vec![SOS_TOKEN.to_string(), EOS_TOKEN.to_string()];
        tokens.extend(SYNTHETIC_WORDS.iter().map(|w| w.to_string()));
        Self { tokens }
    }

    /// Parse the one-token-per-line format.
    pub fn from_lines(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(|l| l.trim_end_matches('\r').to_string()).collect();
        if tokens.len() < 2 || tokens[SOS] != SOS_TOKEN || tokens[EOS] != EOS_TOKEN {
            return Err(Error::InvalidData(
                "vocabulary lines 0 and 1 must be [SOS] and [EOS]".to_string(),
            ));
        }
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::InvalidData(alloc::format!(
                    "vocabulary line {i} is not a single token"
                )));
            }
            if tokens[..i].contains(t) {
                return Err(Error::InvalidData(alloc::format!("vocabulary token {t:?} repeats")));
            }
        }
        Ok(Self { tokens })
    }

    pub fn to_lines(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t == word)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// `[SOS] words.. [EOS]`.
    pub fn tokenize<S: AsRef<str>>(&self, words: &[S], max_len: usize) -> Result<TokenSequence> {
        if words.len() + 2 > max_len {
            return Err(Error::Length {
                len: words.len() + 2,
                max: max_len,
            });
        }
        let mut ids = Vec::with_capacity(words.len() + 2);
        ids.push(SOS);
        for w in words {
            let w = w.as_ref();
            match self.id(w) {
                Some(id) if id > EOS => ids.push(id),
                _ => return Err(Error::Vocabulary(w.to_string())),
            }
        }
        ids.push(EOS);
        Ok(TokenSequence { ids })
    }

    /// Words between the delimiters.
    pub fn detokenize(&self, seq: &TokenSequence) -> Vec<String> {
        seq.ids[1..seq.eos_index()]
            .iter()
            .map(|&i| self.tokens[i].clone())
            .collect()
    }

    /// Every token of `seq`, markers included, as written.
    pub fn labels(&self, seq: &TokenSequence) -> Vec<String> {
        seq.ids.iter().map(|&i| self.tokens[i].clone()).collect()
    }
}

/// `[SOS] .. [EOS]` token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<usize>,
}

impl TokenSequence {
    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn eos_index(&self) -> usize {
        self.ids.len() - 1
    }
}

#[derive(Debug, Clone, Copy)]
struct TextLayer {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    mlp: Mlp,
}

/// Node handles for encoded text.
#[derive(Debug, Clone, Copy)]
pub struct TextFeatures {
    /// `[L, C]`
    pub per_token: NodeId,
    /// `[C]`
    pub global: NodeId,
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    embed: ParamId,
    pos: ParamId,
    layers: Vec<TextLayer>,
    ln_final: LayerNorm,
    pub global_proj: Linear,
    max_len: usize,
}

impl TextEncoder {
    pub fn new(pb: &mut ParamBuilder<'_>, cfg: &Config, vocab_size: usize) -> Result<Self> {
        let c = cfg.c;
        let mut s = pb.scope("text");
        let embed = s.normal("embed", &[vocab_size, c], 0.5)?;
        let pos = s.normal("pos", &[cfg.max_sentence_length, c], 0.1)?;
        let mut layers = Vec::with_capacity(cfg.text_layers);
        for i in 0..cfg.text_layers {
            let mut l = s.scope(&alloc::format!("layer{i}"));
            layers.push(TextLayer {
                ln1: LayerNorm::new(&mut l, "ln1", c)?,
                attn: MultiHeadAttention::new(&mut l, "attn", c, c, c, cfg.text_heads)?,
                ln2: LayerNorm::new(&mut l, "ln2", c)?,
                mlp: Mlp::new(&mut l, "mlp", c, 2 * c)?,
            });
        }
        let ln_final = LayerNorm::new(&mut s, "ln_final", c)?;
        let global_proj = Linear::new(&mut s, "global", c, c, true)?;
        Ok(Self {
            embed,
            pos,
            layers,
            ln_final,
            global_proj,
            max_len: cfg.max_sentence_length,
        })
    }

    /// Final-layer activations only (no global projection).
    pub fn encode_tokens(&self, g: &mut Graph, tokens: &TokenSequence) -> Result<NodeId> {
        let l = tokens.len();
        if l < 2 {
            return Err(Error::InvalidUse("a token sequence needs [SOS] and [EOS]".to_string()));
        }
        if l > self.max_len {
            return Err(Error::Length {
                len: l,
                max: self.max_len,
            });
        }
        let tok = g.embedding(self.embed, tokens.ids())?;
        let positions: Vec<usize> = (0..l).collect();
        let pos = g.embedding(self.pos, &positions)?;
        let mut x = g.add(tok, pos)?;
        for layer in &self.layers {
            let h = layer.ln1.forward(g, x)?;
            let a = layer.attn.forward(g, h, h)?;
            x = g.add(x, a.out)?;
            let h = layer.ln2.forward(g, x)?;
            let m = layer.mlp.forward(g, h)?;
            x = g.add(x, m)?;
        }
        self.ln_final.forward(g, x)
    }

    pub fn forward(&self, g: &mut Graph, tokens: &TokenSequence) -> Result<TextFeatures> {
        let per_token = self.encode_tokens(g, tokens)?;
        let eos = g.select_row(per_token, tokens.eos_index())?;
        let global = self.global_proj.forward(g, eos)?;
        Ok(TextFeatures { per_token, global })
    }
}

/// Node handles for the three backbone stages.
#[derive(Debug, Clone, Copy)]
pub struct MultiScaleFeatures {
    /// `[H/8, W/8, C2]`
    pub f_v2: NodeId,
    /// `[H/16, W/16, C3]`
    pub f_v3: NodeId,
    /// `[H/32, W/32, C4]`
    pub f_v4: NodeId,
}

#[derive(Debug, Clone)]
pub struct ImageEncoder {
    blocks: [Conv; 5],
}

impl ImageEncoder {
    pub fn stem_widths(cfg: &Config) -> (usize, usize) {
        ((cfg.c2 / 4).max(2), (cfg.c2 / 2).max(2))
    }

    pub fn new(pb: &mut ParamBuilder<'_>, cfg: &Config) -> Result<Self> {
        let (s1, s2) = Self::stem_widths(cfg);
        let mut s = pb.scope("image");
        Ok(Self {
            blocks: [
                Conv::new(&mut s, "block1", 3, 3, s1)?,
                Conv::new(&mut s, "block2", 3, s1, s2)?,
                Conv::new(&mut s, "block3", 3, s2, cfg.c2)?,
                Conv::new(&mut s, "block4", 3, cfg.c2, cfg.c3)?,
                Conv::new(&mut s, "block5", 3, cfg.c3, cfg.c4)?,
            ],
        })
    }

    pub fn forward(&self, g: &mut Graph, image: NodeId) -> Result<MultiScaleFeatures> {
        match *g.shape(image) {
            [h, w, 3] if h % 32 == 0 && w % 32 == 0 => {}
            ref s => {
                return Err(shape_err!(
                    "image must be [H, W, 3] with H, W divisible by 32, got {s:?}"
                ))
            }
        }
        let mut x = image;
        let mut stages = [x; 5];
        for (i, block) in self.blocks.iter().enumerate() {
            let y = block.forward(g, x)?;
            let y = g.relu(y);
            x = g.avgpool2x2(y)?;
            stages[i] = x;
        }
        Ok(MultiScaleFeatures {
            f_v2: stages[2],
            f_v3: stages[3],
            f_v4: stages[4],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::tensor::Tensor;
    use crate::test_util::{build, random};
    use alloc::vec;

    fn cfg() -> Config {
        Config {
            height: 64,
            width: 64,
            ..Config::toy()
        }
    }

    #[test]
    fn tokenize_examples() {
        let v = Vocab::synthetic();
        let t = v.tokenize(&["red", "circle"], 8).unwrap();
        assert_eq!(t.len(), 4);
        assert_eq!(t.ids()[0], SOS);
        assert_eq!(t.ids()[3], EOS);
        let empty: [&str; 0] = [];
        assert_eq!(v.tokenize(&empty, 8).unwrap().ids(), &[SOS, EOS]);
        assert!(matches!(v.tokenize(&["purple"], 8), Err(Error::Vocabulary(w)) if w == "purple"));
        assert!(matches!(v.tokenize(&["[EOS]"], 8), Err(Error::Vocabulary(_))));
        assert!(matches!(
            v.tokenize(&["red"; 7], 8),
            Err(Error::Length { len: 9, max: 8 })
        ));
        assert_eq!(v.detokenize(&t), vec!["red", "circle"]);
        assert_eq!(v.labels(&t), vec!["[SOS]", "red", "circle", "[EOS]"]);
    }

    #[test]
    fn vocab_file_round_trip_and_validation() {
        let v = Vocab::synthetic();
        assert_eq!(Vocab::from_lines(&v.to_lines()).unwrap(), v);
        assert!(Vocab::from_lines("[EOS]\n[SOS]\nred\n").is_err());
        assert!(Vocab::from_lines("[SOS]\n[EOS]\nred\nred\n").is_err());
        assert!(Vocab::from_lines("[SOS]\n[EOS]\ntwo words\n").is_err());
    }

    fn encode(store: &ParamStore, enc: &TextEncoder, words: &[&str]) -> (Tensor, Tensor) {
        let tokens = Vocab::synthetic().tokenize(words, 8).unwrap();
        let mut g = Graph::new(store);
        let f = enc.forward(&mut g, &tokens).unwrap();
        (g.tensor(f.per_token), g.tensor(f.global))
    }

    #[test]
    fn text_encoder_is_order_sensitive() {
        let c = cfg();
        let (store, enc) = build(5, |pb| TextEncoder::new(pb, &c, Vocab::synthetic().len()));
        let (a_tok, a) = encode(&store, &enc, &["red", "circle", "left", "of", "blue", "square"]);
        let (_, b) = encode(&store, &enc, &["red", "left", "circle", "of", "blue", "square"]);
        assert_eq!(a_tok.shape(), &[8, c.c]);
        assert_eq!(a.shape(), &[c.c]);
        assert!(a.max_abs_diff(&b) > 1e-6);
    }

    #[test]
    fn text_encoder_rejects_overlong_sequences() {
        let c = Config {
            max_sentence_length: 3,
            ..cfg()
        };
        let (store, enc) = build(5, |pb| TextEncoder::new(pb, &c, Vocab::synthetic().len()));
        let long = Vocab::synthetic().tokenize(&["red", "circle"], 8).unwrap();
        let mut g = Graph::new(&store);
        assert!(matches!(
            enc.forward(&mut g, &long),
            Err(Error::Length { len: 4, max: 3 })
        ));
    }

    #[test]
    fn image_encoder_strides() {
        let c = cfg();
        let (store, enc) = build(6, |pb| ImageEncoder::new(pb, &c));
        let mut g = Graph::new(&store);
        let img = g.input(&random(&mut crate::rng::RngStream::new(1), &[64, 64, 3]));
        let f = enc.forward(&mut g, img).unwrap();
        assert_eq!(g.shape(f.f_v2), &[8, 8, c.c2]);
        assert_eq!(g.shape(f.f_v3), &[4, 4, c.c3]);
        assert_eq!(g.shape(f.f_v4), &[2, 2, c.c4]);
        let bad = g.input(&Tensor::zeros(&[48, 64, 3]));
        assert!(enc.forward(&mut g, bad).is_err());
    }

    #[test]
    fn zero_image_with_zero_biases_gives_zero_features() {
        let c = cfg();
        let (store, enc) = build(6, |pb| ImageEncoder::new(pb, &c));
        assert!(store.iter().filter(|(_, p)| p.name.ends_with("bias")).all(|(_, p)| p
            .value
            .data()
            .iter()
            .all(|&v| v == 0.0)));
        let mut g = Graph::new(&store);
        let img = g.input(&Tensor::zeros(&[64, 64, 3]));
        let f = enc.forward(&mut g, img).unwrap();
        for n in [f.f_v2, f.f_v3, f.f_v4] {
            assert!(g.value(n).iter().all(|&v| v == 0.0));
        }
    }
}
