//! Caption embedding and the four-level text feature pyramid.
//!
//! A frozen embedder maps a caption to a fixed-length `(L, 768)` token
//! matrix. Four pointwise 1-D convolutions then produce
//! `X_text,4 = conv(X_text)` and `X_text,i-1 = conv(X_text,i)`; only the last
//! one, `X_text,1`, is consumed by the prior prompt encoder.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::{DType, Device, Module, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::nn::{conv1d_pointwise, Conv1d};
use crate::params::{derive_seed, Scope};

/// Width of BERT-base word vectors.
pub const BERT_WIDTH: usize = 768;

/// Soft length limit for prompt captions; longer ones are accepted with a
/// warning.
pub const CAPTION_SOFT_LIMIT: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Caption(String);

impl Caption {
    pub fn new(text: &str) -> Result<Self> {
        let trimmed = text.trim();
        if trimmed.is_empty() {
            return Err(Error::Contract("caption is empty after trimming".into()));
        }
        if trimmed.chars().count() > CAPTION_SOFT_LIMIT {
            log::warn!(
                "caption longer than {CAPTION_SOFT_LIMIT} characters: {:?}",
                trimmed
            );
        }
        Ok(Caption(trimmed.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for Caption {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        Caption::new(&s)
    }
}

impl From<Caption> for String {
    fn from(c: Caption) -> String {
        c.0
    }
}

impl fmt::Display for Caption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// `(B, L, E)` token matrix.
#[derive(Debug, Clone)]
pub struct TokenEmbeddingSequence(Tensor);

impl TokenEmbeddingSequence {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() != 3 {
            return Err(Error::shape(format!(
                "token embeddings must be rank 3, got {:?}",
                t.dims()
            )));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// Lowercase word/punctuation split shared by both embedders.
pub fn basic_tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(ch.to_string());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// A frozen caption → token-vector mapping. Implementations hold no
/// trainable state.
pub trait Embedder: Send + Sync + fmt::Debug {
    fn width(&self) -> usize;

    fn tokenize(&self, text: &str) -> Vec<String>;

    /// Row-major `(text_len, width)` embedding, truncated or padded to
    /// exactly `text_len` rows.
    fn embed(&self, caption: &Caption, text_len: usize) -> Result<Vec<f32>>;
}

/// Deterministic hash-seeded word vectors; needs no external assets.
#[derive(Debug, Clone)]
pub struct ToyEmbedder {
    width: usize,
    seed: u64,
}

impl ToyEmbedder {
    pub fn new(width: usize, seed: u64) -> Self {
        Self { width, seed }
    }

    fn token_vector(&self, token: &str) -> impl Iterator<Item = f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, token));
        (0..self.width).map(move |_| {
            let z: f32 = StandardNormal.sample(&mut rng);
            z
        })
    }
}

impl Default for ToyEmbedder {
    fn default() -> Self {
        Self::new(BERT_WIDTH, 0x5eed)
    }
}

impl Embedder for ToyEmbedder {
    fn width(&self) -> usize {
        self.width
    }

    fn tokenize(&self, text: &str) -> Vec<String> {
        basic_tokenize(text)
    }

    fn embed(&self, caption: &Caption, text_len: usize) -> Result<Vec<f32>> {
        let tokens = self.tokenize(caption.as_str());
        if tokens.len() > text_len {
            log::debug!(
                "caption truncated from {} to {text_len} tokens: {caption}",
                tokens.len()
            );
        }
        let mut out = Vec::with_capacity(text_len * self.width);
        for tok in tokens.iter().take(text_len) {
            out.extend(self.token_vector(tok));
        }
        out.resize(text_len * self.width, 0.0);
        Ok(out)
    }
}

/// BERT-style embedding front end loaded from disk: WordPiece lookup,
/// word + position + segment-0 embeddings, then LayerNorm.
///
/// The asset directory holds `vocab.txt` (one piece per line) and
/// `embeddings.safetensors` with `word_embeddings.weight` and optionally
/// `position_embeddings.weight`, `token_type_embeddings.weight`,
/// `LayerNorm.weight` and `LayerNorm.bias`. Names may carry an
/// `embeddings.` or `bert.embeddings.` prefix as in Hugging Face exports.
#[derive(Debug, Clone)]
pub struct PretrainedEmbedder {
    vocab: HashMap<String, usize>,
    width: usize,
    word: Vec<f32>,
    position: Option<(usize, Vec<f32>)>,
    token_type: Option<Vec<f32>>,
    norm: Option<(Vec<f32>, Vec<f32>)>,
    special: [usize; 4],
}

const UNK: usize = 0;
const CLS: usize = 1;
const SEP: usize = 2;
const PAD: usize = 3;

impl PretrainedEmbedder {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let vocab_path = dir.join("vocab.txt");
        let weights_path = dir.join("embeddings.safetensors");
        if !vocab_path.is_file() || !weights_path.is_file() {
            return Err(Error::config(format!(
                "embedder assets missing in {}: expected vocab.txt and embeddings.safetensors",
                dir.display()
            )));
        }
        let text = std::fs::read_to_string(&vocab_path).map_err(|e| Error::io(&vocab_path, e))?;
        let vocab: HashMap<String, usize> = text
            .lines()
            .enumerate()
            .map(|(i, l)| (l.trim_end().to_string(), i))
            .collect();
        let lookup = |tok: &str| {
            vocab
                .get(tok)
                .copied()
                .ok_or_else(|| Error::config(format!("vocab.txt lacks special token {tok}")))
        };
        let special = [lookup("[UNK]")?, lookup("[CLS]")?, lookup("[SEP]")?, lookup("[PAD]")?];

        let tensors = candle_core::safetensors::load(&weights_path, &Device::Cpu)?;
        let find = |suffix: &str| -> Option<&Tensor> {
            ["", "embeddings.", "bert.embeddings."]
                .iter()
                .find_map(|p| tensors.get(&format!("{p}{suffix}")))
        };
        let flat = |t: &Tensor| -> Result<Vec<f32>> {
            Ok(t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?)
        };
        let word_t = find("word_embeddings.weight").ok_or_else(|| {
            Error::config(format!("{} has no word_embeddings.weight", weights_path.display()))
        })?;
        let (rows, width) = word_t.dims2()?;
        if rows < vocab.len() {
            return Err(Error::config(format!(
                "word embedding table has {rows} rows but vocab has {} entries",
                vocab.len()
            )));
        }
        let position = match find("position_embeddings.weight") {
            Some(t) => Some((t.dims2()?.0, flat(t)?)),
            None => None,
        };
        let token_type = match find("token_type_embeddings.weight") {
            Some(t) => Some(flat(t)?),
            None => None,
        };
        let gamma = find("LayerNorm.weight").or_else(|| find("LayerNorm.gamma"));
        let beta = find("LayerNorm.bias").or_else(|| find("LayerNorm.beta"));
        let norm = match (gamma, beta) {
            (Some(g), Some(b)) => Some((flat(g)?, flat(b)?)),
            _ => None,
        };
        Ok(Self {
            vocab,
            width,
            word: flat(word_t)?,
            position,
            token_type,
            norm,
            special,
        })
    }

    fn wordpiece(&self, word: &str, out: &mut Vec<usize>) {
        let chars: Vec<char> = word.chars().collect();
        if chars.len() > 100 {
            out.push(self.special[UNK]);
            return;
        }
        let mut pieces = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while start < end {
                let mut piece: String = chars[start..end].iter().collect();
                if start > 0 {
                    piece.insert_str(0, "##");
                }
                if let Some(&id) = self.vocab.get(&piece) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            match found {
                Some(id) => {
                    pieces.push(id);
                    start = end;
                }
                None => {
                    out.push(self.special[UNK]);
                    return;
                }
            }
        }
        out.extend(pieces);
    }

    /// `[CLS] pieces… [SEP] [PAD]…`, exactly `text_len` ids.
    pub fn token_ids(&self, text: &str, text_len: usize) -> Vec<usize> {
        let mut body = Vec::new();
        for w in basic_tokenize(text) {
            self.wordpiece(&w, &mut body);
        }
        let room = text_len.saturating_sub(2);
        if body.len() > room {
            log::debug!("caption truncated from {} to {room} word pieces", body.len());
            body.truncate(room);
        }
        let mut ids = Vec::with_capacity(text_len);
        ids.push(self.special[CLS]);
        ids.extend(body);
        ids.push(self.special[SEP]);
        ids.truncate(text_len);
        ids.resize(text_len, self.special[PAD]);
        ids
    }
}

impl Embedder for PretrainedEmbedder {
    fn width(&self) -> usize {
        self.width
    }

    fn tokenize(&self, text: &str) -> Vec<String> {
        let inverse: HashMap<usize, &str> = self.vocab.iter().map(|(k, &v)| (v, k.as_str())).collect();
        let mut ids = Vec::new();
        for w in basic_tokenize(text) {
            self.wordpiece(&w, &mut ids);
        }
        ids.into_iter()
            .map(|id| inverse.get(&id).copied().unwrap_or("[UNK]").to_string())
            .collect()
    }

    fn embed(&self, caption: &Caption, text_len: usize) -> Result<Vec<f32>> {
        let e = self.width;
        let ids = self.token_ids(caption.as_str(), text_len);
        let mut out = Vec::with_capacity(text_len * e);
        for (pos, &id) in ids.iter().enumerate() {
            let mut v: Vec<f32> = self.word[id * e..(id + 1) * e].to_vec();
            if let Some((rows, table)) = &self.position {
                if pos < *rows {
                    v.iter_mut().zip(&table[pos * e..(pos + 1) * e]).for_each(|(a, b)| *a += b);
                }
            }
            if let Some(tt) = &self.token_type {
                v.iter_mut().zip(&tt[..e]).for_each(|(a, b)| *a += b);
            }
            if let Some((g, b)) = &self.norm {
                let mean = v.iter().sum::<f32>() / e as f32;
                let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f32>() / e as f32;
                let inv = 1.0 / (var + 1e-12).sqrt();
                for ((x, g), b) in v.iter_mut().zip(g).zip(b) {
                    *x = (*x - mean) * inv * g + b;
                }
            }
            out.extend(v);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EmbedderConfig {
    #[default]
    Toy,
    Pretrained {
        dir: PathBuf,
    },
}

impl EmbedderConfig {
    pub fn build(&self) -> Result<Arc<dyn Embedder>> {
        Ok(match self {
            EmbedderConfig::Toy => Arc::new(ToyEmbedder::default()),
            EmbedderConfig::Pretrained { dir } => Arc::new(PretrainedEmbedder::load(dir)?),
        })
    }
}

pub fn embed_caption(
    embedder: &dyn Embedder,
    caption: &Caption,
    text_len: usize,
    dtype: DType,
) -> Result<TokenEmbeddingSequence> {
    if text_len == 0 {
        return Err(Error::config("text_len must be positive"));
    }
    let data = embedder.embed(caption, text_len)?;
    let t = Tensor::from_vec(data, (1, text_len, embedder.width()), &Device::Cpu)?.to_dtype(dtype)?;
    TokenEmbeddingSequence::new(t)
}

/// Embeds a batch of captions, one row block per caption.
pub fn embed_batch(
    embedder: &dyn Embedder,
    captions: &[Caption],
    text_len: usize,
    dtype: DType,
    exec: Exec,
) -> Result<TokenEmbeddingSequence> {
    if text_len == 0 {
        return Err(Error::config("text_len must be positive"));
    }
    let rows = exec.try_map(captions, |_, c| embedder.embed(c, text_len))?;
    let data: Vec<f32> = rows.into_iter().flatten().collect();
    let t = Tensor::from_vec(data, (captions.len(), text_len, embedder.width()), &Device::Cpu)?
        .to_dtype(dtype)?;
    TokenEmbeddingSequence::new(t)
}

/// `[X_text,1, X_text,2, X_text,3, X_text,4]`, each `(B, L, D_i)`.
#[derive(Debug, Clone)]
pub struct TextPyramid {
    pub levels: [Tensor; 4],
}

impl TextPyramid {
    pub fn level(&self, i: usize) -> &Tensor {
        &self.levels[i - 1]
    }
}

/// Channel widths `(D1, D2, D3, D4) = (c, 2c, 4c, 8c)`.
pub fn text_channel_schedule(level1_width: usize) -> [usize; 4] {
    [level1_width, 2 * level1_width, 4 * level1_width, 8 * level1_width]
}

#[derive(Debug, Clone)]
pub struct TextPyramidConvs {
    convs: [Conv1d; 4],
    in_width: usize,
    widths: [usize; 4],
}

impl TextPyramidConvs {
    pub fn new(scope: &Scope, in_width: usize, level1_width: usize) -> Result<Self> {
        let w = text_channel_schedule(level1_width);
        Ok(Self {
            convs: [
                conv1d_pointwise(&scope.pp("conv1"), w[1], w[0], true)?,
                conv1d_pointwise(&scope.pp("conv2"), w[2], w[1], true)?,
                conv1d_pointwise(&scope.pp("conv3"), w[3], w[2], true)?,
                conv1d_pointwise(&scope.pp("conv4"), in_width, w[3], true)?,
            ],
            in_width,
            widths: w,
        })
    }

    pub fn widths(&self) -> [usize; 4] {
        self.widths
    }

    pub fn forward(&self, x: &TokenEmbeddingSequence) -> Result<TextPyramid> {
        let (_, _, e) = x.tensor().dims3()?;
        if e != self.in_width {
            return Err(Error::shape(format!(
                "text embeddings have width {e}, pyramid expects {}",
                self.in_width
            )));
        }
        // (B, L, E) → (B, E, L) for conv1d, applied 4 → 3 → 2 → 1.
        let mut h = x.tensor().transpose(1, 2)?.contiguous()?;
        let mut levels: Vec<Tensor> = Vec::with_capacity(4);
        for conv in self.convs.iter().rev() {
            h = conv.forward(&h)?;
            levels.push(h.transpose(1, 2)?.contiguous()?);
        }
        levels.reverse();
        let levels: [Tensor; 4] = levels.try_into().expect("four pyramid levels");
        Ok(TextPyramid { levels })
    }
}

/// Frozen embedder plus the trainable conv pyramid.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    embedder: Arc<dyn Embedder>,
    pyramid: TextPyramidConvs,
    text_len: usize,
}

impl TextEncoder {
    pub fn new(
        scope: &Scope,
        embedder: Arc<dyn Embedder>,
        text_len: usize,
        level1_width: usize,
    ) -> Result<Self> {
        if text_len == 0 {
            return Err(Error::config("text_len must be positive"));
        }
        let pyramid = TextPyramidConvs::new(&scope.pp("pyramid"), embedder.width(), level1_width)?;
        Ok(Self {
            embedder,
            pyramid,
            text_len,
        })
    }

    pub fn embedder(&self) -> &dyn Embedder {
        self.embedder.as_ref()
    }

    pub fn text_len(&self) -> usize {
        self.text_len
    }

    pub fn pyramid(&self) -> &TextPyramidConvs {
        &self.pyramid
    }

    pub fn embed(&self, captions: &[Caption], dtype: DType, exec: Exec) -> Result<TokenEmbeddingSequence> {
        embed_batch(self.embedder.as_ref(), captions, self.text_len, dtype, exec)
    }

    pub fn encode(&self, captions: &[Caption], dtype: DType, exec: Exec) -> Result<TextPyramid> {
        self.pyramid.forward(&self.embed(captions, dtype, exec)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::to_f64_vec;
    use crate::params::ParamStore;

    #[test]
    fn caption_rejects_blank() {
        assert!(Caption::new("   \t").is_err());
        assert_eq!(Caption::new("  a b ").unwrap().as_str(), "a b");
    }

    #[test]
    fn embed_caption_shape_and_determinism() {
        let emb = ToyEmbedder::default();
        let c = Caption::new("The nuclei are sparsely distributed.").unwrap();
        let a = embed_caption(&emb, &c, 32, DType::F32).unwrap();
        assert_eq!(a.tensor().dims(), &[1, 32, 768]);
        let b = embed_caption(&emb, &c, 32, DType::F32).unwrap();
        assert_eq!(to_f64_vec(a.tensor()).unwrap(), to_f64_vec(b.tensor()).unwrap());
        // 6 tokens (5 words + '.'), the rest is the zero pad vector
        let v = to_f64_vec(a.tensor()).unwrap();
        assert!(v[5 * 768..6 * 768].iter().any(|&x| x != 0.0));
        assert!(v[6 * 768..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn long_captions_truncate() {
        let emb = ToyEmbedder::new(8, 1);
        let c = Caption::new("a b c d e f g").unwrap();
        let v = emb.embed(&c, 3).unwrap();
        assert_eq!(v.len(), 24);
        let head = ToyEmbedder::new(8, 1).embed(&Caption::new("a b c").unwrap(), 3).unwrap();
        assert_eq!(v, head);
    }

    #[test]
    fn pyramid_default_schedule_shapes() {
        let store = ParamStore::new(3, DType::F32);
        let convs = TextPyramidConvs::new(&store.root(), 768, 64).unwrap();
        let x = Tensor::randn(0f32, 1.0, (2, 32, 768), &Device::Cpu).unwrap();
        let pyr = convs.forward(&TokenEmbeddingSequence::new(x).unwrap()).unwrap();
        let dims: Vec<_> = pyr.levels.iter().map(|t| t.dims().to_vec()).collect();
        assert_eq!(
            dims,
            vec![vec![2, 32, 64], vec![2, 32, 128], vec![2, 32, 256], vec![2, 32, 512]]
        );
    }

    #[test]
    fn pyramid_rejects_wrong_width() {
        let store = ParamStore::new(3, DType::F32);
        let convs = TextPyramidConvs::new(&store.root(), 768, 8).unwrap();
        let x = Tensor::zeros((1, 4, 100), DType::F32, &Device::Cpu).unwrap();
        let err = convs.forward(&TokenEmbeddingSequence::new(x).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn zero_input_with_zero_biases_gives_zero_pyramid() {
        let store = ParamStore::new(3, DType::F32);
        let convs = TextPyramidConvs::new(&store.root(), 16, 2).unwrap();
        for (name, p) in store.entries() {
            if name.ends_with("bias") {
                p.var.set(&p.var.as_tensor().zeros_like().unwrap()).unwrap();
            }
        }
        let x = Tensor::zeros((2, 5, 16), DType::F32, &Device::Cpu).unwrap();
        let pyr = convs.forward(&TokenEmbeddingSequence::new(x).unwrap()).unwrap();
        for level in &pyr.levels {
            assert!(to_f64_vec(level).unwrap().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn basic_tokenize_splits_punctuation() {
        assert_eq!(
            basic_tokenize("Square in Upper-left."),
            vec!["square", "in", "upper", "-", "left", "."]
        );
    }
}
