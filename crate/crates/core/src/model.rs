//! The hierarchical planning model: backbone plus global (act-level) and
//! local (utterance-level) latent heads, and the batched forward pass shared
//! by training and likelihood estimation.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{DialogueAct, SubDialogue};
use crate::error::{Error, Result};
use crate::flowgraph::{FlowPath, Flowchart};
use crate::globalplan::{ActHead, GaussianHead, GlobalTerms};
use crate::localplan::LocalTerms;
use crate::nn::{standard_normal, to_f64_vec, DropRng, Linear, ParamStore, Precision};
use crate::textenc::{Backbone, BackboneConfig, PooledVec, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub d_z: usize,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { backbone: BackboneConfig::default(), d_z: 32, precision: Precision::F32 }
    }
}

/// One training/evaluation item: a path node and the sub-dialogue realizing it.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeExample {
    /// Node text plus outgoing response.
    pub x: Vec<u32>,
    /// Concatenated utterances of the sub-dialogue.
    pub turn: Vec<u32>,
    pub acts: Vec<DialogueAct>,
    pub utterances: Vec<Vec<u32>>,
}

/// Standard-normal noise for one batch: `[B, d_z]` global and `[U, d_z]` local.
#[derive(Debug, Clone)]
pub struct EpsDraw {
    pub global: Tensor,
    pub local: Tensor,
}

impl EpsDraw {
    pub fn sample(items: usize, utterances: usize, d_z: usize, dtype: DType, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            global: standard_normal(&[items, d_z], dtype, rng)?,
            local: standard_normal(&[utterances, d_z], dtype, rng)?,
        })
    }

    pub fn zeros(items: usize, utterances: usize, d_z: usize, dtype: DType) -> Result<Self> {
        Ok(Self {
            global: Tensor::zeros((items, d_z), dtype, &Device::Cpu)?,
            local: Tensor::zeros((utterances, d_z), dtype, &Device::Cpu)?,
        })
    }
}

/// Per-item and per-utterance terms of both ELBOs for one batch.
#[derive(Debug, Clone)]
pub struct BatchTerms {
    pub global: GlobalTerms,
    pub local: LocalTerms,
    /// Owning item of each utterance row.
    pub utt_item: Vec<usize>,
}

/// Parameters live in shared `Var`s, so the model is deliberately not `Clone`.
#[derive(Debug)]
pub struct Planner {
    pub(crate) config: ModelConfig,
    pub(crate) store: ParamStore,
    pub(crate) vocab: Vocabulary,
    pub(crate) backbone: Backbone,
    pub(crate) prior_global: GaussianHead,
    pub(crate) posterior_global: GaussianHead,
    pub(crate) act_head: ActHead,
    pub(crate) prior_local: GaussianHead,
    pub(crate) posterior_local: GaussianHead,
    pub(crate) plan_proj: Linear,
}

impl Planner {
    /// Builds a freshly initialized model; `config.backbone.vocab_size` is
    /// overridden by the vocabulary size.
    pub fn new(mut config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        if config.d_z == 0 {
            return Err(Error::InvalidArgument("d_z must be positive".into()));
        }
        config.backbone.vocab_size = vocab.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(config.precision.dtype());
        let d = config.backbone.d_model;
        let dz = config.d_z;
        let backbone = Backbone::new(&mut store, config.backbone, &mut rng)?;
        let prior_global = GaussianHead::new(&mut store, "prior_global", d, 2 * d, dz, &mut rng)?;
        let posterior_global = GaussianHead::new(&mut store, "posterior_global", 2 * d, 2 * d, dz, &mut rng)?;
        let act_head = ActHead::new(&mut store, "act_head", d, dz, &mut rng)?;
        let prior_local = GaussianHead::new(&mut store, "prior_local", 2 * d, 2 * d, dz, &mut rng)?;
        let posterior_local = GaussianHead::new(&mut store, "posterior_local", 3 * d, 2 * d, dz, &mut rng)?;
        let plan_proj = Linear::new(&mut store, "plan_proj", d + dz, d, &mut rng)?;
        Ok(Self {
            config,
            store,
            vocab,
            backbone,
            prior_global,
            posterior_global,
            act_head,
            prior_local,
            posterior_local,
            plan_proj,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn d_model(&self) -> usize {
        self.config.backbone.d_model
    }

    pub fn d_z(&self) -> usize {
        self.config.d_z
    }

    pub fn max_len(&self) -> usize {
        self.config.backbone.max_len
    }

    /// SHA-256 over parameter names and values.
    pub fn fingerprint(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        for (name, var) in self.store.vars() {
            hasher.update(name.as_bytes());
            for v in to_f64_vec(var.as_tensor())? {
                hasher.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(hasher.finalize()))
    }

    pub fn encode_pooled(&self, tokens: &[u32]) -> Result<PooledVec> {
        self.backbone.encode_pooled(tokens)
    }

    pub fn encode_turn_pooled(&self, sub: &SubDialogue) -> Result<PooledVec> {
        if sub.utterances.is_empty() {
            return Err(Error::Empty("sub-dialogue"));
        }
        let tokens = self.vocab.tokenize_turn(sub, self.max_len(), self.config.backbone.max_turn_len);
        self.encode_pooled(&tokens)
    }

    pub fn encode_act_pooled(&self, act: DialogueAct) -> Result<PooledVec> {
        self.encode_pooled(&self.vocab.tokenize_act(act))
    }

    /// Pooled encodings of all seven acts, `[7, d]`, in evaluation mode.
    pub fn act_encodings(&self) -> Result<Tensor> {
        let seqs: Vec<Vec<u32>> = DialogueAct::ALL.iter().map(|&a| self.vocab.tokenize_act(a)).collect();
        self.backbone.encode_pooled_batch(&seqs, &mut None)
    }

    pub fn decode_step(&self, memory: &[PooledVec], prefix: &[u32]) -> Result<Tensor> {
        self.backbone.decode_step(memory, prefix)
    }

    pub fn node_tokens(&self, text: &str, response: Option<&str>) -> Vec<u32> {
        self.vocab.tokenize_node(text, response, self.max_len())
    }

    /// Tokenized node inputs for every step of a path.
    pub fn path_inputs(&self, chart: &Flowchart, path: &FlowPath) -> Result<Vec<Vec<u32>>> {
        path.steps
            .iter()
            .map(|step| {
                let node = chart.node(&step.node_id).ok_or_else(|| Error::UnknownNode {
                    chart: chart.id().to_string(),
                    node: step.node_id.clone(),
                })?;
                Ok(self.node_tokens(&node.text, step.response.as_deref()))
            })
            .collect()
    }

    /// Builds the training items of a dialogue aligned to `path`.
    pub fn examples(&self, chart: &Flowchart, path: &FlowPath, subs: &[SubDialogue]) -> Result<Vec<NodeExample>> {
        if path.len() != subs.len() {
            return Err(Error::DimensionMismatch { expected: path.len(), got: subs.len() });
        }
        let inputs = self.path_inputs(chart, path)?;
        Ok(inputs
            .into_iter()
            .zip(subs)
            .map(|(x, sub)| NodeExample {
                x,
                turn: self.vocab.tokenize_turn(sub, self.max_len(), self.config.backbone.max_turn_len),
                acts: sub.acts(),
                utterances: sub.utterances.iter().map(|u| self.vocab.tokenize(&u.text, self.max_len())).collect(),
            })
            .collect())
    }

    /// Forward pass over a batch of items with externally supplied noise.
    pub fn batch_terms(&self, items: &[&NodeExample], eps: &EpsDraw, rng: &mut DropRng<'_>) -> Result<BatchTerms> {
        let b = items.len();
        if b == 0 {
            return Err(Error::Empty("batch"));
        }
        if let Some(item) = items.iter().find(|i| i.acts.is_empty() || i.acts.len() != i.utterances.len()) {
            return Err(Error::InvalidArgument(format!(
                "item has {} acts and {} utterances",
                item.acts.len(),
                item.utterances.len()
            )));
        }
        let u: usize = items.iter().map(|i| i.utterances.len()).sum();

        // One encoder pass for nodes, utterances and act markers; one for turns.
        let mut short: Vec<Vec<u32>> = items.iter().map(|i| i.x.clone()).collect();
        short.extend(items.iter().flat_map(|i| i.utterances.iter().cloned()));
        short.extend(DialogueAct::ALL.iter().map(|&a| self.vocab.tokenize_act(a)));
        let pooled = self.backbone.encode_pooled_batch(&short, rng)?;
        let turns: Vec<Vec<u32>> = items.iter().map(|i| i.turn.clone()).collect();
        let h_y = self.backbone.encode_pooled_batch(&turns, rng)?;
        let h_x = pooled.narrow(0, 0, b)?;
        let h_utt = pooled.narrow(0, b, u)?;
        let h_acts = pooled.narrow(0, b + u, DialogueAct::COUNT)?;

        let act_seqs: Vec<&[DialogueAct]> = items.iter().map(|i| i.acts.as_slice()).collect();
        let global = self.global_terms(&h_x, &h_y, &act_seqs, &eps.global)?;

        let mut utt_item = Vec::with_capacity(u);
        let mut prev_idx = Vec::with_capacity(u);
        let mut act_idx = Vec::with_capacity(u);
        let mut targets = Vec::with_capacity(u);
        let mut row = 0u32;
        for (i, item) in items.iter().enumerate() {
            for (j, (act, utt)) in item.acts.iter().zip(&item.utterances).enumerate() {
                utt_item.push(i);
                // Row `u` of the extended table is the sentinel.
                prev_idx.push(if j == 0 { u as u32 } else { row - 1 });
                act_idx.push(act.index() as u32);
                targets.push(utt.clone());
                row += 1;
            }
        }
        let index = |v: Vec<u32>| Tensor::from_vec(v.clone(), v.len(), &Device::Cpu);
        let item_idx = index(utt_item.iter().map(|&i| i as u32).collect())?;
        let h_x_u = h_x.index_select(&item_idx, 0)?;
        let h_a_u = h_acts.index_select(&index(act_idx)?, 0)?;
        let with_sentinel = Tensor::cat(&[&h_utt, &self.backbone.sentinel().unsqueeze(0)?], 0)?;
        let prev_u = with_sentinel.index_select(&index(prev_idx)?, 0)?;
        let local = self.local_terms(&h_x_u, &h_a_u, &h_utt, &prev_u, &targets, &eps.local, rng)?;
        Ok(BatchTerms { global, local, utt_item })
    }
}

/// Sums rows of `values` (`[N]`) into `groups` buckets by `owner`.
pub(crate) fn group_sum(values: &Tensor, owner: &[usize], groups: usize) -> Result<Tensor> {
    let idx = Tensor::from_vec(owner.iter().map(|&i| i as u32).collect::<Vec<_>>(), owner.len(), &Device::Cpu)?;
    let zeros = Tensor::zeros(groups, values.dtype(), &Device::Cpu)?;
    Ok(zeros.index_add(&idx, values, 0)?)
}
