//! Tokenization and the shared Transformer encoder/decoder backbone.
//!
//! The encoder turns token sequences into mean-pooled vectors (node encodings,
//! utterance encodings, sub-dialogue encodings and act encodings). The decoder
//! is a causal Transformer that cross-attends over a small set of memory
//! vectors, each tagged with a learned slot embedding.

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, D};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{DialogueAct, Speaker, SubDialogue};
use crate::error::{Error, Result};
use crate::nn::{dropout, gelu, sinusoidal_positions, DropRng, LayerNorm, Linear, ParamStore};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const SEP: u32 = 4;
const ACT_BASE: u32 = 5;
const SPEAKER_BASE: u32 = ACT_BASE + DialogueAct::COUNT as u32;
pub const RESERVED: usize = SPEAKER_BASE as usize + 2;

/// Memory slots understood by the decoder: previous utterance, node, plan.
pub const MEMORY_SLOTS: usize = 3;

/// Lower-cases and splits text into word and punctuation tokens.
/// Apostrophes stay inside words ("won't").
pub fn normalize_tokens(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() || c == '\'' {
            word.extend(c.to_lowercase());
        } else {
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
            if !c.is_whitespace() {
                tokens.push(c.to_string());
            }
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

pub fn normalize(text: &str) -> String {
    normalize_tokens(text).join(" ")
}

pub fn act_marker(act: DialogueAct) -> u32 {
    ACT_BASE + act.index() as u32
}

pub fn speaker_marker(speaker: Speaker) -> u32 {
    match speaker {
        Speaker::User => SPEAKER_BASE,
        Speaker::Agent => SPEAKER_BASE + 1,
    }
}

/// Token/id bijection with a reserved block at the front.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    fn reserved_tokens() -> Vec<String> {
        let mut t: Vec<String> =
            ["<pad>", "<bos>", "<eos>", "<unk>", "<sep>"].iter().map(|s| s.to_string()).collect();
        t.extend(DialogueAct::ALL.iter().map(|a| format!("<act:{a}>")));
        t.push("<user>".into());
        t.push("<agent>".into());
        t
    }

    /// Builds a vocabulary from texts: reserved block, then tokens by
    /// descending frequency (ties lexicographic), capped at `max_size` entries.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, max_size: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for tok in normalize_tokens(text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens = Self::reserved_tokens();
        let room = max_size.saturating_sub(tokens.len());
        tokens.extend(ranked.into_iter().take(room).map(|(t, _)| t));
        Self::from_tokens(tokens).expect("reserved block is well formed")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let reserved = Self::reserved_tokens();
        if tokens.len() < reserved.len() || tokens[..reserved.len()] != reserved[..] {
            return Err(Error::schema("vocabulary does not start with the reserved block"));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(Error::schema(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, ids })
    }

    /// Parses the line-delimited vocabulary file format.
    pub fn from_lines(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn to_lines(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    /// SHA-256 of the vocabulary file contents.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_lines().as_bytes()))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> u32 {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map(String::as_str).unwrap_or("<unk>")
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < RESERVED
    }

    /// `[BOS, tokens.., EOS]`, truncated to at most `max_len` ids.
    pub fn tokenize(&self, text: &str, max_len: usize) -> Vec<u32> {
        self.frame(normalize_tokens(text).iter().map(|t| self.id(t)), max_len)
    }

    fn frame(&self, body: impl Iterator<Item = u32>, max_len: usize) -> Vec<u32> {
        let mut out = vec![BOS];
        out.extend(body.take(max_len.saturating_sub(2)));
        out.push(EOS);
        out
    }

    /// Renders ids back to normalized text, skipping framing tokens.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| !matches!(id, PAD | BOS | EOS))
            .map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Node input: node text, then the chosen response after a separator.
    pub fn tokenize_node(&self, text: &str, response: Option<&str>, max_len: usize) -> Vec<u32> {
        let mut body: Vec<u32> = normalize_tokens(text).iter().map(|t| self.id(t)).collect();
        if let Some(resp) = response {
            body.push(SEP);
            body.extend(normalize_tokens(resp).iter().map(|t| self.id(t)));
        }
        self.frame(body.into_iter(), max_len)
    }

    /// Utterances of a sub-dialogue joined by separators.
    pub fn tokenize_turn(&self, sub: &SubDialogue, max_utt_len: usize, max_len: usize) -> Vec<u32> {
        let mut body = Vec::new();
        for (i, utt) in sub.utterances.iter().enumerate() {
            if i > 0 {
                body.push(SEP);
            }
            let ids = self.tokenize(&utt.text, max_utt_len);
            body.extend_from_slice(&ids[1..ids.len() - 1]);
        }
        self.frame(body.into_iter(), max_len)
    }

    pub fn tokenize_act(&self, act: DialogueAct) -> Vec<u32> {
        vec![BOS, act_marker(act), EOS]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub d_model: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub dropout: f64,
    pub max_len: usize,
    /// Cap on concatenated sub-dialogue encodings.
    pub max_turn_len: usize,
    pub vocab_size: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 4,
            ffn: 512,
            dropout: 0.1,
            max_len: 64,
            max_turn_len: 256,
            vocab_size: 8000,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if self.max_len < 2 {
            return bad(format!("max_len {} < 2", self.max_len));
        }
        if self.vocab_size < RESERVED {
            return bad(format!("vocab_size {} below reserved count {RESERVED}", self.vocab_size));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} not in [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// Mean-pooled encoder output for one sequence.
#[derive(Debug, Clone)]
pub struct PooledVec(pub Tensor);

impl PooledVec {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() != 1 {
            return Err(Error::InvalidArgument(format!("pooled vector must be 1-D, got {:?}", t.dims())));
        }
        Ok(Self(t))
    }

    pub fn dim(&self) -> usize {
        self.0.dims1().unwrap_or(0)
    }

    pub fn to_vec(&self) -> Result<Vec<f64>> {
        crate::nn::to_f64_vec(&self.0)
    }
}

#[derive(Debug, Clone)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl Attention {
    fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng)?,
            k: Linear::new(store, &format!("{name}.k"), d, d, rng)?,
            v: Linear::new(store, &format!("{name}.v"), d, d, rng)?,
            o: Linear::new(store, &format!("{name}.o"), d, d, rng)?,
            heads,
        })
    }

    fn split(&self, x: &Tensor) -> Result<Tensor> {
        let (n, t, d) = x.dims3()?;
        Ok(x.reshape((n, t, self.heads, d / self.heads))?.transpose(1, 2)?.contiguous()?)
    }

    /// `mask` is additive and broadcastable to `[N, heads, Tq, Tk]`.
    fn forward(&self, query: &Tensor, keys: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let (n, tq, d) = query.dims3()?;
        let dh = d / self.heads;
        let q = self.split(&self.q.forward(query)?)?;
        let k = self.split(&self.k.forward(keys)?)?;
        let v = self.split(&self.v.forward(keys)?)?;
        let mut scores = (q.matmul(&k.t()?.contiguous()?)? / (dh as f64).sqrt())?;
        if let Some(mask) = mask {
            scores = scores.broadcast_add(mask)?;
        }
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.reshape((n, tq, d))?;
        self.o.forward(&out)
    }
}

#[derive(Debug, Clone)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn new(store: &mut ParamStore, name: &str, d: usize, ffn: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            up: Linear::new(store, &format!("{name}.up"), d, ffn, rng)?,
            down: Linear::new(store, &format!("{name}.down"), ffn, d, rng)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.down.forward(&gelu(&self.up.forward(x)?)?)
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    ff: FeedForward,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    ln1: LayerNorm,
    self_attn: Attention,
    ln2: LayerNorm,
    cross_attn: Attention,
    ln3: LayerNorm,
    ff: FeedForward,
}

/// Pre-norm Transformer encoder/decoder with slot-tagged cross-attention memory.
#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    embedding: Tensor,
    encoder: Vec<EncoderLayer>,
    encoder_norm: LayerNorm,
    decoder: Vec<DecoderLayer>,
    decoder_norm: LayerNorm,
    output: Linear,
    slots: Tensor,
    /// Stands in for the previous utterance before the first one of a turn.
    sentinel: Tensor,
    dtype: DType,
}

const NEG_INF: f64 = -1e9;

impl Backbone {
    pub fn new(store: &mut ParamStore, config: BackboneConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let embedding = store.normal("backbone.embedding", &[config.vocab_size, d], 1.0 / (d as f64).sqrt(), rng)?;
        let mut encoder = Vec::new();
        for l in 0..config.encoder_layers {
            let p = format!("backbone.encoder.{l}");
            encoder.push(EncoderLayer {
                ln1: LayerNorm::new(store, &format!("{p}.ln1"), d)?,
                attn: Attention::new(store, &format!("{p}.attn"), d, config.heads, rng)?,
                ln2: LayerNorm::new(store, &format!("{p}.ln2"), d)?,
                ff: FeedForward::new(store, &format!("{p}.ff"), d, config.ffn, rng)?,
            });
        }
        let encoder_norm = LayerNorm::new(store, "backbone.encoder_norm", d)?;
        let mut decoder = Vec::new();
        for l in 0..config.decoder_layers {
            let p = format!("backbone.decoder.{l}");
            decoder.push(DecoderLayer {
                ln1: LayerNorm::new(store, &format!("{p}.ln1"), d)?,
                self_attn: Attention::new(store, &format!("{p}.self_attn"), d, config.heads, rng)?,
                ln2: LayerNorm::new(store, &format!("{p}.ln2"), d)?,
                cross_attn: Attention::new(store, &format!("{p}.cross_attn"), d, config.heads, rng)?,
                ln3: LayerNorm::new(store, &format!("{p}.ln3"), d)?,
                ff: FeedForward::new(store, &format!("{p}.ff"), d, config.ffn, rng)?,
            });
        }
        let decoder_norm = LayerNorm::new(store, "backbone.decoder_norm", d)?;
        let output = Linear::new(store, "backbone.output", d, config.vocab_size, rng)?;
        let slots = store.normal("backbone.slots", &[MEMORY_SLOTS, d], 0.1, rng)?;
        let sentinel = store.normal("backbone.sentinel", &[d], 0.1, rng)?;
        Ok(Self {
            config,
            embedding,
            encoder,
            encoder_norm,
            decoder,
            decoder_norm,
            output,
            slots,
            sentinel,
            dtype: store.dtype(),
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn sentinel(&self) -> &Tensor {
        &self.sentinel
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn padded(&self, seqs: &[Vec<u32>]) -> Result<(Tensor, Tensor, usize)> {
        let len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * len);
        let mut mask = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            for i in 0..len {
                let id = s.get(i).copied().unwrap_or(PAD);
                if id as usize >= self.config.vocab_size {
                    return Err(Error::InvalidArgument(format!("token id {id} outside vocabulary")));
                }
                ids.push(id);
                mask.push(if id == PAD { 0.0 } else { 1.0 });
            }
        }
        let ids = Tensor::from_vec(ids, (seqs.len(), len), &Device::Cpu)?;
        let mask = Tensor::from_vec(mask, (seqs.len(), len), &Device::Cpu)?.to_dtype(self.dtype)?;
        Ok((ids, mask, len))
    }

    fn embed(&self, ids: &Tensor, rng: &mut DropRng<'_>) -> Result<Tensor> {
        let (n, len) = ids.dims2()?;
        let d = self.config.d_model;
        let emb = self.embedding.index_select(&ids.flatten_all()?, 0)?.reshape((n, len, d))?;
        let emb = ((emb * (d as f64).sqrt())?).broadcast_add(&sinusoidal_positions(len, d, self.dtype)?)?;
        dropout(&emb, self.config.dropout, rng)
    }

    /// Encodes a batch of sequences; returns final-layer states `[N, L, d]`
    /// and the non-PAD mask `[N, L]`.
    pub fn encode(&self, seqs: &[Vec<u32>], rng: &mut DropRng<'_>) -> Result<(Tensor, Tensor)> {
        if seqs.is_empty() {
            return Err(Error::Empty("encoder batch"));
        }
        let (ids, mask, _) = self.padded(seqs)?;
        if seqs.iter().any(|s| s.iter().all(|&t| t == PAD)) {
            return Err(Error::Empty("sequence (all PAD)"));
        }
        // Additive key-padding mask [N, 1, 1, L].
        let key_mask = ((mask.ones_like()? - &mask)? * NEG_INF)?.unsqueeze(1)?.unsqueeze(1)?;
        let p = self.config.dropout;
        let mut x = self.embed(&ids, rng)?;
        for layer in &self.encoder {
            let h = layer.ln1.forward(&x)?;
            let h = layer.attn.forward(&h, &h, Some(&key_mask))?;
            x = (x + dropout(&h, p, rng)?)?;
            let h = layer.ff.forward(&layer.ln2.forward(&x)?)?;
            x = (x + dropout(&h, p, rng)?)?;
        }
        Ok((self.encoder_norm.forward(&x)?, mask))
    }

    /// Mean over non-PAD positions of the final encoder layer, `[N, d]`.
    pub fn encode_pooled_batch(&self, seqs: &[Vec<u32>], rng: &mut DropRng<'_>) -> Result<Tensor> {
        let (states, mask) = self.encode(seqs, rng)?;
        let summed = states.broadcast_mul(&mask.unsqueeze(2)?)?.sum(1)?;
        Ok(summed.broadcast_div(&mask.sum_keepdim(1)?)?)
    }

    pub fn encode_pooled(&self, tokens: &[u32]) -> Result<PooledVec> {
        if tokens.is_empty() {
            return Err(Error::Empty("token sequence"));
        }
        PooledVec::new(self.encode_pooled_batch(&[tokens.to_vec()], &mut None)?.squeeze(0)?)
    }

    /// Teacher-forced decoder logits `[N, T, V]` for input prefixes `[N, T]`,
    /// cross-attending over `memory` `[N, M, d]` whose rows carry slot tags `slots`.
    pub fn decode_logits(
        &self,
        memory: &Tensor,
        slot_ids: &[u32],
        inputs: &[Vec<u32>],
        rng: &mut DropRng<'_>,
    ) -> Result<Tensor> {
        let (n, m, _) = memory.dims3()?;
        if m == 0 {
            return Err(Error::Empty("decoder memory"));
        }
        if slot_ids.len() != m || slot_ids.iter().any(|&s| s as usize >= MEMORY_SLOTS) {
            return Err(Error::InvalidArgument(format!("bad memory slot ids {slot_ids:?}")));
        }
        if inputs.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: inputs.len() });
        }
        if inputs.iter().any(|s| s.first() != Some(&BOS)) {
            return Err(Error::InvalidArgument("decoder prefix must start with BOS".into()));
        }
        let slot_idx = Tensor::from_vec(slot_ids.to_vec(), m, &Device::Cpu)?;
        let memory = memory.broadcast_add(&self.slots.index_select(&slot_idx, 0)?)?;

        let (ids, mask, len) = self.padded(inputs)?;
        let mut causal = Vec::with_capacity(len * len);
        for q in 0..len {
            for k in 0..len {
                causal.push(if k > q { NEG_INF } else { 0.0 });
            }
        }
        let causal = Tensor::from_vec(causal, (len, len), &Device::Cpu)?.to_dtype(self.dtype)?;
        let key_mask = ((mask.ones_like()? - &mask)? * NEG_INF)?.unsqueeze(1)?.unsqueeze(1)?;
        let self_mask = key_mask.broadcast_add(&causal.unsqueeze(0)?.unsqueeze(0)?)?;

        let p = self.config.dropout;
        let mut x = self.embed(&ids, rng)?;
        for layer in &self.decoder {
            let h = layer.ln1.forward(&x)?;
            let h = layer.self_attn.forward(&h, &h, Some(&self_mask))?;
            x = (x + dropout(&h, p, rng)?)?;
            let h = layer.cross_attn.forward(&layer.ln2.forward(&x)?, &memory, None)?;
            x = (x + dropout(&h, p, rng)?)?;
            let h = layer.ff.forward(&layer.ln3.forward(&x)?)?;
            x = (x + dropout(&h, p, rng)?)?;
        }
        self.output.forward(&self.decoder_norm.forward(&x)?)
    }

    /// Next-token distribution after `prefix`, given memory vectors tagged
    /// with slots `0..memory.len()`.
    pub fn decode_step(&self, memory: &[PooledVec], prefix: &[u32]) -> Result<Tensor> {
        let slots: Vec<u32> = (0..memory.len() as u32).collect();
        self.decode_step_tagged(memory, &slots, prefix)
    }

    pub fn decode_step_tagged(&self, memory: &[PooledVec], slots: &[u32], prefix: &[u32]) -> Result<Tensor> {
        if memory.is_empty() {
            return Err(Error::Empty("decoder memory"));
        }
        if prefix.is_empty() {
            return Err(Error::Empty("decoder prefix (must contain BOS)"));
        }
        let mem = Tensor::stack(&memory.iter().map(|p| p.0.clone()).collect::<Vec<_>>(), 0)?.unsqueeze(0)?;
        let logits = self.decode_logits(&mem, slots, &[prefix.to_vec()], &mut None)?;
        let last = logits.squeeze(0)?.get(prefix.len() - 1)?;
        Ok(candle_nn::ops::softmax(&last, D::Minus1)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::to_f64_vec;
    use rand::SeedableRng;

    fn tiny(dtype: DType) -> (ParamStore, Backbone) {
        let mut store = ParamStore::new(dtype);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let config = BackboneConfig {
            d_model: 16,
            encoder_layers: 1,
            decoder_layers: 1,
            heads: 2,
            ffn: 32,
            dropout: 0.1,
            max_len: 16,
            max_turn_len: 32,
            vocab_size: 40,
        };
        let bb = Backbone::new(&mut store, config, &mut rng).unwrap();
        (store, bb)
    }

    #[test]
    fn normalization_splits_punctuation() {
        assert_eq!(normalize_tokens("Hello, World! It's OK."), ["hello", ",", "world", "!", "it's", "ok", "."]);
        assert_eq!(normalize("  a   b "), "a b");
    }

    #[test]
    fn tokenize_framing() {
        let vocab = Vocabulary::build(["yes no"], 100);
        assert_eq!(vocab.tokenize("", 64), vec![BOS, EOS]);
        assert_eq!(vocab.tokenize("yes", 64), vec![BOS, vocab.id("yes"), EOS]);
        assert_eq!(vocab.tokenize("Yes maybe", 64)[2], UNK);
        let long = vec!["yes"; 100].join(" ");
        assert_eq!(vocab.tokenize(&long, 64).len(), 64);
        assert_eq!(vocab.detokenize(&vocab.tokenize("Yes, no", 64)), "yes <unk> no");
    }

    #[test]
    fn vocabulary_file_round_trip() {
        let vocab = Vocabulary::build(["b a a c"], 100);
        assert_eq!(vocab.token(RESERVED as u32), "a");
        let again = Vocabulary::from_lines(&vocab.to_lines()).unwrap();
        assert_eq!(again, vocab);
        assert_eq!(again.hash(), vocab.hash());
        assert!(Vocabulary::from_lines("a\nb\n").is_err());
        let capped = Vocabulary::build(["b a a c"], RESERVED + 1);
        assert_eq!(capped.len(), RESERVED + 1);
    }

    #[test]
    fn pooled_is_three_position_mean() {
        let (_store, bb) = tiny(DType::F64);
        let tokens = vec![BOS, 20, EOS];
        let (states, _) = bb.encode(&[tokens.clone()], &mut None).unwrap();
        let manual = states.squeeze(0).unwrap().mean(0).unwrap();
        let pooled = bb.encode_pooled(&tokens).unwrap();
        let a = to_f64_vec(&manual).unwrap();
        let b = pooled.to_vec().unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(b, bb.encode_pooled(&tokens).unwrap().to_vec().unwrap());
    }

    #[test]
    fn padding_and_batch_invariance() {
        let (_store, bb) = tiny(DType::F32);
        let a = vec![BOS, 20, 21, 22, EOS];
        let alone = bb.encode_pooled(&a).unwrap().to_vec().unwrap();
        let mut padded = a.clone();
        padded.extend([PAD, PAD, PAD]);
        let pad = bb.encode_pooled(&padded).unwrap().to_vec().unwrap();
        let batch = bb
            .encode_pooled_batch(&[vec![BOS, 30, EOS], a.clone(), vec![BOS, 25, 26, 27, 28, 29, 30, EOS]], &mut None)
            .unwrap();
        let in_batch = to_f64_vec(&batch.get(1).unwrap()).unwrap();
        for i in 0..alone.len() {
            assert!((alone[i] - pad[i]).abs() < 1e-5);
            assert!((alone[i] - in_batch[i]).abs() < 1e-5);
        }
        assert!(bb.encode_pooled(&[PAD, PAD]).is_err());
        assert!(bb.encode_pooled(&[]).is_err());
    }

    #[test]
    fn decode_step_is_a_distribution() {
        let (_store, bb) = tiny(DType::F64);
        let mem: Vec<PooledVec> = [vec![BOS, 20, EOS], vec![BOS, 21, EOS], vec![BOS, 22, 23, EOS]]
            .iter()
            .map(|s| bb.encode_pooled(s).unwrap())
            .collect();
        let probs = to_f64_vec(&bb.decode_step(&mem, &[BOS, 24]).unwrap()).unwrap();
        assert_eq!(probs.len(), 40);
        assert!(probs.iter().all(|p| *p >= 0.0));
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(bb.decode_step(&mem, &[]).is_err());
        assert!(bb.decode_step(&[], &[BOS]).is_err());

        // Permuting memory together with its slot tags leaves the output unchanged.
        let permuted = vec![mem[2].clone(), mem[0].clone(), mem[1].clone()];
        let again = to_f64_vec(&bb.decode_step_tagged(&permuted, &[2, 0, 1], &[BOS, 24]).unwrap()).unwrap();
        for (a, b) in probs.iter().zip(&again) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
