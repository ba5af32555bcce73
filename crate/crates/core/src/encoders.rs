//! Toy dual encoders mapping images and texts into one unit-norm space.
//!
//! Vision: patchify → linear patch embedding + learned positions →
//! bidirectional transformer blocks → final layer norm → shared projection.
//! The projected patch rows are the patch embeddings; their mean,
//! L2-normalized, is the pooled image embedding (the projection has no bias,
//! so pooling and projection commute).
//!
//! Text: hash tokenizer → token + position embeddings → causal transformer
//! blocks → final layer norm → features at the end-of-text position →
//! projection → L2 normalization. Because attention is causal, every
//! sequence is only run up to its end-of-text token.

use std::collections::BTreeMap;
use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Segment, Var};
use crate::corpus::{EnhancedBatch, Image};
use crate::error::{Error, Result};
use crate::losses::{EmbeddingBatch, EmbeddingNodes};
use crate::tensor::{Scalar, Tensor};

pub const PAD_ID: u32 = 0;
pub const EOT_ID: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisionEncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
}

impl Default for VisionEncoderConfig {
    fn default() -> Self {
        Self { image_size: 32, patch_size: 8, embed_dim: 64, depth: 2, heads: 4 }
    }
}

impl VisionEncoderConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Number of patches, `(image_size / patch_size)²`.
    pub fn patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_features(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::InvalidConfig("vision: image_size must be a positive multiple of patch_size".into()));
        }
        if self.embed_dim < 2 {
            return Err(Error::InvalidConfig("vision: embed_dim must be at least 2".into()));
        }
        if self.depth > 0 && (self.heads == 0 || self.embed_dim % self.heads != 0) {
            return Err(Error::InvalidConfig("vision: embed_dim must be divisible by heads".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub context_length: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self { vocab_size: 4096, context_length: 77, embed_dim: 64, depth: 2, heads: 4 }
    }
}

impl TextEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.context_length < 1 {
            return Err(Error::InvalidConfig("text: context_length must be at least 1".into()));
        }
        if self.vocab_size < 3 {
            return Err(Error::InvalidConfig("text: vocab_size must be at least 3".into()));
        }
        if self.embed_dim < 2 {
            return Err(Error::InvalidConfig("text: embed_dim must be at least 2".into()));
        }
        if self.depth > 0 && (self.heads == 0 || self.embed_dim % self.heads != 0) {
            return Err(Error::InvalidConfig("text: embed_dim must be divisible by heads".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vision: VisionEncoderConfig,
    pub text: TextEncoderConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.vision.validate()?;
        self.text.validate()?;
        if self.vision.embed_dim != self.text.embed_dim {
            return Err(Error::InvalidConfig(format!(
                "vision embed_dim {} differs from text embed_dim {}",
                self.vision.embed_dim, self.text.embed_dim
            )));
        }
        Ok(())
    }

    pub fn embed_dim(&self) -> usize {
        self.vision.embed_dim
    }
}

/// Lowercased alphanumeric runs; everything else separates tokens.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).map(str::to_lowercase)
}

pub fn token_id(word: &str, vocab_size: usize) -> u32 {
    (crate::fnv1a64(word.as_bytes()) % (vocab_size as u64 - 2) + 2) as u32
}

/// Hash tokenizer: ids `2..vocab_size` for words, `1` end-of-text, `0` pad.
/// Output always has exactly `limit` ids; at most `limit − 1` words are kept.
pub fn tokenize(text: &str, limit: usize, vocab_size: usize) -> Vec<u32> {
    assert!(limit >= 1, "token limit must be positive");
    assert!(vocab_size >= 3, "vocabulary needs room for word ids");
    let mut ids: Vec<u32> = words(text).take(limit - 1).map(|w| token_id(&w, vocab_size)).collect();
    ids.push(EOT_ID);
    ids.resize(limit, PAD_ID);
    ids
}

/// Named `f32` tensors in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor<f32>>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.tensors[i] = t;
            return;
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<f32>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    fn require(&self, name: &str) -> Result<&Tensor<f32>> {
        self.get(name).ok_or_else(|| Error::Incompatible(format!("missing parameter {name}")))
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f32) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()).expect("sized")
}

fn fan_in_uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor<f32> {
    uniform(rng, &[fan_in, fan_out], 1.0 / (fan_in as f32).sqrt())
}

fn init_blocks(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, depth: usize, d: usize) {
    for i in 0..depth {
        let p = format!("{prefix}.blocks.{i}");
        store.insert(format!("{p}.ln1.g"), Tensor::from_vec(&[1, d], vec![1.0; d]).expect("sized"));
        store.insert(format!("{p}.ln1.b"), Tensor::zeros(&[1, d]));
        for w in ["wq", "wk", "wv", "wo"] {
            store.insert(format!("{p}.attn.{w}"), fan_in_uniform(rng, d, d));
        }
        store.insert(format!("{p}.attn.bo"), Tensor::zeros(&[1, d]));
        store.insert(format!("{p}.ln2.g"), Tensor::from_vec(&[1, d], vec![1.0; d]).expect("sized"));
        store.insert(format!("{p}.ln2.b"), Tensor::zeros(&[1, d]));
        store.insert(format!("{p}.mlp.w1"), fan_in_uniform(rng, d, 4 * d));
        store.insert(format!("{p}.mlp.b1"), Tensor::zeros(&[1, 4 * d]));
        store.insert(format!("{p}.mlp.w2"), fan_in_uniform(rng, 4 * d, d));
        store.insert(format!("{p}.mlp.b2"), Tensor::zeros(&[1, d]));
    }
    store.insert(format!("{prefix}.ln_f.g"), Tensor::from_vec(&[1, d], vec![1.0; d]).expect("sized"));
    store.insert(format!("{prefix}.ln_f.b"), Tensor::zeros(&[1, d]));
    store.insert(format!("{prefix}.proj"), fan_in_uniform(rng, d, d));
}

/// Fresh encoder weights: matrices uniform in `±1/√fan_in`, biases zero,
/// layer-norm gains one.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let v = &cfg.vision;
    let d = v.embed_dim;
    store.insert("vision.patch.w", fan_in_uniform(&mut rng, v.patch_features(), d));
    store.insert("vision.patch.b", Tensor::zeros(&[1, d]));
    store.insert("vision.pos", uniform(&mut rng, &[v.patches(), d], 1.0 / (d as f32).sqrt()));
    init_blocks(&mut store, &mut rng, "vision", v.depth, d);
    let t = &cfg.text;
    store.insert("text.tok", uniform(&mut rng, &[t.vocab_size, d], 1.0 / (d as f32).sqrt()));
    store.insert("text.pos", uniform(&mut rng, &[t.context_length, d], 1.0 / (d as f32).sqrt()));
    init_blocks(&mut store, &mut rng, "text", t.depth, d);
    Ok(store)
}

/// Parameters of a [`ParamStore`] placed on a graph.
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    /// Adds every stored tensor as a leaf; `trainable` decides whether
    /// gradients are tracked.
    pub fn bind<T: Scalar>(g: &mut Graph<T>, store: &ParamStore, trainable: bool) -> Self {
        let vars = store
            .iter()
            .map(|(name, t)| {
                let t = t.cast::<T>();
                (name.to_string(), if trainable { g.param(t) } else { g.constant(t) })
            })
            .collect();
        Self { vars }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::Incompatible(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

fn transformer<T: Scalar>(g: &mut Graph<T>, p: &Bound, prefix: &str, depth: usize, heads: usize, mut h: Var, segments: &[Segment], causal: bool) -> Result<Var> {
    for i in 0..depth {
        let b = format!("{prefix}.blocks.{i}");
        let a = g.layer_norm(h, p.var(&format!("{b}.ln1.g"))?, p.var(&format!("{b}.ln1.b"))?)?;
        let q = g.matmul(a, p.var(&format!("{b}.attn.wq"))?)?;
        let k = g.matmul(a, p.var(&format!("{b}.attn.wk"))?)?;
        let v = g.matmul(a, p.var(&format!("{b}.attn.wv"))?)?;
        let att = g.attention(q, k, v, segments.to_vec(), heads, causal)?;
        let o = g.matmul(att, p.var(&format!("{b}.attn.wo"))?)?;
        let o = g.add_row(o, p.var(&format!("{b}.attn.bo"))?)?;
        h = g.add(h, o)?;
        let m = g.layer_norm(h, p.var(&format!("{b}.ln2.g"))?, p.var(&format!("{b}.ln2.b"))?)?;
        let m = g.matmul(m, p.var(&format!("{b}.mlp.w1"))?)?;
        let m = g.add_row(m, p.var(&format!("{b}.mlp.b1"))?)?;
        let m = g.gelu(m);
        let m = g.matmul(m, p.var(&format!("{b}.mlp.w2"))?)?;
        let m = g.add_row(m, p.var(&format!("{b}.mlp.b2"))?)?;
        h = g.add(h, m)?;
    }
    g.layer_norm(h, p.var(&format!("{prefix}.ln_f.g"))?, p.var(&format!("{prefix}.ln_f.b"))?)
}

/// Rearranges HWC pixels into one row per patch (row-major patch order).
pub fn patchify(image: &Image, cfg: &VisionEncoderConfig) -> Result<Vec<f32>> {
    if image.size != cfg.image_size || image.pixels.len() != cfg.image_size * cfg.image_size * 3 {
        return Err(Error::ShapeMismatch(format!("{0}x{0} image for a {1}x{1} encoder", image.size, cfg.image_size)));
    }
    let (s, p, grid) = (cfg.image_size, cfg.patch_size, cfg.grid());
    let unit = image.to_unit();
    let mut out = Vec::with_capacity(s * s * 3);
    for gy in 0..grid {
        for gx in 0..grid {
            for y in 0..p {
                let start = ((gy * p + y) * s + gx * p) * 3;
                out.extend_from_slice(&unit[start..start + p * 3]);
            }
        }
    }
    Ok(out)
}

/// Graph nodes for a batch of encoded images.
#[derive(Clone, Copy, Debug)]
pub struct VisualNodes {
    /// `[N, d]`, unit rows.
    pub pooled: Var,
    /// `[N·HW, d]`, projected but unnormalized.
    pub patches: Var,
}

pub fn vision_forward<T: Scalar>(g: &mut Graph<T>, p: &Bound, cfg: &VisionEncoderConfig, images: &[&Image]) -> Result<VisualNodes> {
    let hw = cfg.patches();
    let mut x = Vec::with_capacity(images.len() * hw * cfg.patch_features());
    for img in images {
        x.extend(patchify(img, cfg)?.into_iter().map(|v| T::of(f64::from(v))));
    }
    let n = images.len();
    let x = g.constant(Tensor::from_vec(&[n * hw, cfg.patch_features()], x)?);
    let h = g.matmul(x, p.var("vision.patch.w")?)?;
    let h = g.add_row(h, p.var("vision.patch.b")?)?;
    let pos = g.gather_rows(p.var("vision.pos")?, (0..n * hw).map(|r| Some(r % hw)).collect())?;
    let h = g.add(h, pos)?;
    let segments: Vec<Segment> = (0..n).map(|i| Segment { start: i * hw, len: hw }).collect();
    let h = transformer(g, p, "vision", cfg.depth, cfg.heads, h, &segments, false)?;
    let patches = g.matmul(h, p.var("vision.proj")?)?;
    let mean = g.group_mean_rows(patches, hw)?;
    let pooled = g.l2_normalize_rows(mean);
    Ok(VisualNodes { pooled, patches })
}

/// Encodes token sequences (each of length `context_length`) to unit rows `[M, d]`.
pub fn text_forward<T: Scalar>(g: &mut Graph<T>, p: &Bound, cfg: &TextEncoderConfig, seqs: &[&[u32]]) -> Result<Var> {
    let mut ids = Vec::new();
    let mut positions = Vec::new();
    let mut segments = Vec::with_capacity(seqs.len());
    let mut eot_rows = Vec::with_capacity(seqs.len());
    for seq in seqs {
        if seq.len() != cfg.context_length {
            return Err(Error::ShapeMismatch(format!("{} tokens, context length is {}", seq.len(), cfg.context_length)));
        }
        if let Some(&bad) = seq.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::ShapeMismatch(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size)));
        }
        let eot = seq.iter().position(|&t| t == EOT_ID).unwrap_or(seq.len() - 1);
        let start = ids.len();
        ids.extend(seq[..=eot].iter().map(|&t| Some(t as usize)));
        positions.extend((0..=eot).map(Some));
        segments.push(Segment { start, len: eot + 1 });
        eot_rows.push(Some(start + eot));
    }
    if ids.is_empty() {
        return Err(Error::ShapeMismatch("no text to encode".into()));
    }
    let tok = g.gather_rows(p.var("text.tok")?, ids)?;
    let pos = g.gather_rows(p.var("text.pos")?, positions)?;
    let h = g.add(tok, pos)?;
    let h = transformer(g, p, "text", cfg.depth, cfg.heads, h, &segments, true)?;
    let feats = g.gather_rows(h, eot_rows)?;
    let proj = g.matmul(feats, p.var("text.proj")?)?;
    Ok(g.l2_normalize_rows(proj))
}

/// Encodes all images and all valid texts of a batch. Identical texts are
/// encoded once and shared.
pub fn encode_batch_graph<T: Scalar>(g: &mut Graph<T>, p: &Bound, cfg: &ModelConfig, batch: &EnhancedBatch) -> Result<EmbeddingNodes> {
    let images: Vec<&Image> = batch.images.iter().collect();
    let vis = vision_forward(g, p, &cfg.vision, &images)?;
    let slots = batch.slots();
    let mut unique: Vec<Vec<u32>> = Vec::new();
    let mut seen: HashMap<&str, usize> = HashMap::new();
    let mut slot_index = Vec::with_capacity(batch.len() * slots);
    for (row, mrow) in batch.texts.iter().zip(&batch.mask) {
        if row.len() != slots || mrow.len() != slots {
            return Err(Error::ShapeMismatch("batch row width differs from k_max + 3".into()));
        }
        for (text, &valid) in row.iter().zip(mrow) {
            if !valid {
                slot_index.push(None);
                continue;
            }
            let idx = *seen.entry(text.as_str()).or_insert_with(|| {
                unique.push(tokenize(text, cfg.text.context_length, cfg.text.vocab_size));
                unique.len() - 1
            });
            slot_index.push(Some(idx));
        }
    }
    let seqs: Vec<&[u32]> = unique.iter().map(Vec::as_slice).collect();
    let encoded = text_forward(g, p, &cfg.text, &seqs)?;
    let texts = g.gather_rows(encoded, slot_index)?;
    Ok(EmbeddingNodes { visual: vis.pooled, patches: vis.patches, texts, mask: batch.flat_mask(), n: batch.len(), slots, hw: cfg.vision.patches() })
}

/// Pooled and patch embeddings of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualEmbedding {
    pub pooled: Vec<f32>,
    /// `[HW, d]`.
    pub patches: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding {
    pub vector: Vec<f32>,
}

/// Frozen encoder pair for inference.
#[derive(Clone, Debug)]
pub struct DualEncoder {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

impl DualEncoder {
    pub fn new(cfg: ModelConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim();
        let proj = params.require("vision.proj")?;
        if proj.shape() != [d, d] {
            return Err(Error::Incompatible(format!("projection {:?} does not match embed_dim {d}", proj.shape())));
        }
        Ok(Self { cfg, params })
    }

    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&cfg, seed)?;
        Self::new(cfg, params)
    }

    pub fn encode_image(&self, image: &Image) -> Result<VisualEmbedding> {
        let mut g = Graph::<f32>::new();
        let p = Bound::bind(&mut g, &self.params, false);
        let v = vision_forward(&mut g, &p, &self.cfg.vision, &[image])?;
        let hw = self.cfg.vision.patches();
        let d = self.cfg.embed_dim();
        Ok(VisualEmbedding { pooled: g.value(v.pooled).data().to_vec(), patches: g.value(v.patches).clone().reshaped(&[hw, d])? })
    }

    pub fn encode_text(&self, tokens: &[u32]) -> Result<TextEmbedding> {
        let mut g = Graph::<f32>::new();
        let p = Bound::bind(&mut g, &self.params, false);
        let out = text_forward(&mut g, &p, &self.cfg.text, &[tokens])?;
        Ok(TextEmbedding { vector: g.value(out).data().to_vec() })
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        tokenize(text, self.cfg.text.context_length, self.cfg.text.vocab_size)
    }

    /// Pooled image embeddings `[N, d]`, encoded in chunks.
    pub fn embed_images(&self, images: &[&Image]) -> Result<Tensor<f32>> {
        let d = self.cfg.embed_dim();
        let mut out = Vec::with_capacity(images.len() * d);
        for chunk in images.chunks(64) {
            let mut g = Graph::<f32>::new();
            let p = Bound::bind(&mut g, &self.params, false);
            let v = vision_forward(&mut g, &p, &self.cfg.vision, chunk)?;
            out.extend_from_slice(g.value(v.pooled).data());
        }
        Tensor::from_vec(&[images.len(), d], out)
    }

    /// Text embeddings `[M, d]`, encoded in chunks.
    pub fn embed_texts(&self, texts: &[String]) -> Result<Tensor<f32>> {
        let d = self.cfg.embed_dim();
        let mut out = Vec::with_capacity(texts.len() * d);
        for chunk in texts.chunks(256) {
            let toks: Vec<Vec<u32>> = chunk.iter().map(|t| self.tokenize(t)).collect();
            let seqs: Vec<&[u32]> = toks.iter().map(Vec::as_slice).collect();
            let mut g = Graph::<f32>::new();
            let p = Bound::bind(&mut g, &self.params, false);
            let v = text_forward(&mut g, &p, &self.cfg.text, &seqs)?;
            out.extend_from_slice(g.value(v).data());
        }
        Tensor::from_vec(&[texts.len(), d], out)
    }

    /// Encodes a whole batch without gradients.
    pub fn encode_batch(&self, batch: &EnhancedBatch) -> Result<EmbeddingBatch<f32>> {
        let mut g = Graph::<f32>::new();
        let p = Bound::bind(&mut g, &self.params, false);
        let nodes = encode_batch_graph(&mut g, &p, &self.cfg, batch)?;
        EmbeddingBatch::from_graph(&g, &nodes)
    }
}
