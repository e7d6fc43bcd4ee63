//! Joint optimization of both ELBOs with KL thresholding, checkpoints, and an
//! importance-weighted likelihood estimate.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Dialogue};
use crate::error::{Error, Result};
use crate::flowgraph::{path_for_dialogue, Flowchart};
use crate::model::{EpsDraw, ModelConfig, NodeExample, Planner};
use crate::nn::{clip_grad_norm, to_f64_vec, AdamW, AdamWParams, DropRng};
use crate::textenc::{Vocabulary, RESERVED};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_utterance_len: usize,
    /// Free-bits threshold β applied to each KL term.
    pub kl_free_bits: f64,
    /// Threshold each latent dimension separately instead of the whole KL.
    pub free_bits_per_dim: bool,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub max_vocab: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 8,
            epochs: 50,
            max_utterance_len: 64,
            kl_free_bits: 0.1,
            free_bits_per_dim: false,
            weight_decay: 0.01,
            grad_clip: None,
            seed: 0,
            max_vocab: 8000,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.epochs == 0 || self.max_utterance_len < 2 {
            return bad("batch_size and epochs must be positive, max_utterance_len at least 2");
        }
        if !(self.kl_free_bits >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("kl_free_bits and weight_decay must be non-negative");
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("grad_clip must be positive");
        }
        if self.model.d_z == 0 {
            return bad("d_z must be positive");
        }
        let mut backbone = self.model.backbone;
        backbone.vocab_size = backbone.vocab_size.max(RESERVED);
        backbone.max_len = self.max_utterance_len;
        backbone.validate()
    }

    /// Reads a JSON or TOML (by `.toml` extension) config file.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config: Self = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| Error::schema(format!("{}: {e}", path.display())))?
        } else {
            serde_json::from_str(&text).map_err(|e| Error::schema(format!("{}: {e}", path.display())))?
        };
        config.validate()?;
        Ok(config)
    }

    fn adamw(&self) -> AdamWParams {
        AdamWParams { lr: self.learning_rate, weight_decay: self.weight_decay, ..AdamWParams::default() }
    }
}

/// `max(kl, beta)`.
pub fn apply_free_bits(kl: f64, beta: f64) -> Result<f64> {
    if !(kl >= 0.0) || !(beta >= 0.0) {
        return Err(Error::InvalidArgument(format!("free bits needs kl >= 0 and beta >= 0, got {kl}, {beta}")));
    }
    Ok(kl.max(beta))
}

/// Tensor form of [`apply_free_bits`]; the comparison mask is a constant so
/// no gradient flows where the threshold is active.
pub fn free_bits_tensor(kl: &Tensor, beta: f64) -> Result<Tensor> {
    if beta == 0.0 {
        return Ok(kl.clone());
    }
    let mask = kl.ge(beta)?.to_dtype(kl.dtype())?;
    let floor = ((mask.ones_like()? - &mask)? * beta)?;
    Ok(((kl * &mask)? + floor)?)
}

/// Sums of the loss components over a batch (raw and thresholded KLs).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub kl_global: f64,
    pub kl_global_thresholded: f64,
    pub act_nll: f64,
    pub kl_local: f64,
    pub kl_local_thresholded: f64,
    pub token_nll: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.kl_global_thresholded + self.act_nll + self.kl_local_thresholded + self.token_nll
    }

    fn add(&mut self, o: &LossParts) {
        self.kl_global += o.kl_global;
        self.kl_global_thresholded += o.kl_global_thresholded;
        self.act_nll += o.act_nll;
        self.kl_local += o.kl_local;
        self.kl_local_thresholded += o.kl_local_thresholded;
        self.token_nll += o.token_nll;
    }

    fn scaled(&self, s: f64) -> LossParts {
        LossParts {
            kl_global: self.kl_global * s,
            kl_global_thresholded: self.kl_global_thresholded * s,
            act_nll: self.act_nll * s,
            kl_local: self.kl_local * s,
            kl_local_thresholded: self.kl_local_thresholded * s,
            token_nll: self.token_nll * s,
        }
    }
}

/// Per-epoch means over items (one item = one node with its sub-dialogue).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub epoch: usize,
    pub total: f64,
    #[serde(flatten)]
    pub parts: LossParts,
    pub items: usize,
    pub batches: usize,
}

impl LossReport {
    fn new(epoch: usize, sums: &LossParts, items: usize, batches: usize) -> Self {
        let parts = sums.scaled(1.0 / items as f64);
        Self { epoch, total: parts.total(), parts, items, batches }
    }
}

/// Appends one JSON line to a metrics log.
pub fn append_metrics(path: &Path, report: &LossReport) -> Result<()> {
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(report)?)?;
    Ok(())
}

pub struct BatchLoss {
    /// Sum over the batch of thresholded KLs and NLLs.
    pub loss: Tensor,
    pub parts: LossParts,
}

fn thresholded(per_dim: &Tensor, summed: &Tensor, beta: f64, by_dim: bool) -> Result<Tensor> {
    if by_dim {
        Ok(free_bits_tensor(per_dim, beta)?.sum(1)?)
    } else {
        free_bits_tensor(summed, beta)
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Total thresholded loss of a batch for the given noise.
pub fn batch_loss(
    planner: &Planner,
    items: &[&NodeExample],
    eps: &EpsDraw,
    beta: f64,
    by_dim: bool,
    rng: &mut DropRng<'_>,
) -> Result<BatchLoss> {
    let terms = planner.batch_terms(items, eps, rng)?;
    let g = &terms.global;
    let l = &terms.local;
    let kl_g = thresholded(&g.kl_per_dim, &g.kl, beta, by_dim)?.sum_all()?;
    let kl_l = thresholded(&l.kl_per_dim, &l.kl, beta, by_dim)?.sum_all()?;
    let act = g.act_nll.sum_all()?;
    let tok = l.token_nll.sum_all()?;
    let loss = (((&kl_g + &act)? + &kl_l)? + &tok)?;
    let parts = LossParts {
        kl_global: scalar(&g.kl.sum_all()?)?,
        kl_global_thresholded: scalar(&kl_g)?,
        act_nll: scalar(&act)?,
        kl_local: scalar(&l.kl.sum_all()?)?,
        kl_local_thresholded: scalar(&kl_l)?,
        token_nll: scalar(&tok)?,
    };
    Ok(BatchLoss { loss, parts })
}

/// Gradients of `loss` for every parameter that received one, keyed by name.
pub fn gradients(planner: &Planner, loss: &Tensor) -> Result<BTreeMap<String, Tensor>> {
    let store = loss.backward()?;
    let mut out = BTreeMap::new();
    for (name, var) in planner.params().vars() {
        if let Some(g) = store.get(var.as_tensor()) {
            out.insert(name.clone(), g.detach());
        }
    }
    Ok(out)
}

/// Vocabulary over utterances, node texts and edge responses.
pub fn build_vocabulary<'a>(corpus: &Corpus, charts: impl IntoIterator<Item = &'a Flowchart>, max_size: usize) -> Vocabulary {
    let mut texts: Vec<&str> = corpus.dialogues.iter().flat_map(|d| d.utterances().map(|u| u.text.as_str())).collect();
    for chart in charts {
        texts.extend(chart.nodes().iter().map(|n| n.text.as_str()));
        texts.extend(chart.edges().iter().map(|e| e.response.as_str()));
    }
    Vocabulary::build(texts, max_size)
}

/// Training items for one dialogue, in path order.
pub fn dialogue_examples(planner: &Planner, chart: &Flowchart, dialogue: &Dialogue) -> Result<Vec<NodeExample>> {
    let path = path_for_dialogue(dialogue, chart)?;
    planner.examples(chart, &path, &dialogue.sub_dialogues)
}

fn chart_for<'a>(charts: &'a BTreeMap<String, Flowchart>, d: &Dialogue) -> Result<&'a Flowchart> {
    charts.get(&d.flowchart_id).ok_or_else(|| Error::UnknownFlowchart(d.flowchart_id.clone()))
}

/// Trained model plus everything needed to resume or reproduce it.
pub struct Checkpoint {
    pub model: Planner,
    pub optimizer: AdamW,
    pub config: TrainConfig,
    pub epoch: usize,
    /// Word position of the training RNG stream after the last epoch.
    pub rng_position: u128,
    pub history: Vec<LossReport>,
}

pub fn train(
    corpus: &Corpus,
    charts: &BTreeMap<String, Flowchart>,
    config: &TrainConfig,
    mut observer: impl FnMut(&LossReport),
) -> Result<Checkpoint> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let used: Vec<&Flowchart> = corpus
        .flowchart_ids
        .iter()
        .map(|id| charts.get(id).ok_or_else(|| Error::UnknownFlowchart(id.clone())))
        .collect::<Result<_>>()?;
    let vocab = build_vocabulary(corpus, used, config.max_vocab);
    let mut model_config = config.model;
    model_config.backbone.max_len = config.max_utterance_len;
    let model = Planner::new(model_config, vocab, config.seed)?;

    let mut items = Vec::new();
    for d in &corpus.dialogues {
        items.extend(dialogue_examples(&model, chart_for(charts, d)?, d)?);
    }
    log::info!("training on {} nodes from {} dialogues, {} parameters", items.len(), corpus.len(), model.params().num_scalars());

    let mut optimizer = AdamW::new(config.adamw());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sums = LossParts::default();
        let mut batches = 0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&NodeExample> = chunk.iter().map(|&i| &items[i]).collect();
            let utts: usize = batch.iter().map(|i| i.utterances.len()).sum();
            let eps = EpsDraw::sample(batch.len(), utts, model.d_z(), model.dtype(), &mut rng)?;
            let out = batch_loss(&model, &batch, &eps, config.kl_free_bits, config.free_bits_per_dim, &mut Some(&mut rng))?;
            if !out.parts.total().is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    detail: format!("items {chunk:?}, parts {:?}", out.parts),
                });
            }
            let mut grads = gradients(&model, &(out.loss / batch.len() as f64)?)?;
            if let Some(max) = config.grad_clip {
                clip_grad_norm(&mut grads, max)?;
            }
            optimizer.step(model.params(), &grads)?;
            sums.add(&out.parts);
            batches += 1;
        }
        let report = LossReport::new(epoch, &sums, items.len(), batches);
        log::debug!("epoch {epoch}: loss {:.4}", report.total);
        observer(&report);
        history.push(report);
    }
    Ok(Checkpoint {
        model,
        optimizer,
        config: config.clone(),
        epoch: config.epochs,
        rng_position: rng.get_word_pos(),
        history,
    })
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: u32,
    config: TrainConfig,
    model: ModelConfig,
    vocabulary: Vec<String>,
    vocabulary_hash: String,
    epoch: usize,
    optimizer_step: u64,
    rng_position: String,
    history: Vec<LossReport>,
    fingerprint: String,
}

const FORMAT: u32 = 1;

impl Checkpoint {
    /// Parameter fingerprint identifying the model in synthetic metadata.
    pub fn hash(&self) -> Result<String> {
        self.model.fingerprint()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = Manifest {
            format: FORMAT,
            config: self.config.clone(),
            model: *self.model.config(),
            vocabulary: self.model.vocab().tokens().to_vec(),
            vocabulary_hash: self.model.vocab().hash(),
            epoch: self.epoch,
            optimizer_step: self.optimizer.step,
            rng_position: self.rng_position.to_string(),
            history: self.history.clone(),
            fingerprint: self.hash()?,
        };
        let mut tensors: Vec<(String, Tensor)> = Vec::new();
        for (name, var) in self.model.params().vars() {
            tensors.push((format!("param/{name}"), var.as_tensor().clone()));
        }
        for (name, t) in &self.optimizer.first {
            tensors.push((format!("adam_m/{name}"), t.clone()));
        }
        for (name, t) in &self.optimizer.second {
            tensors.push((format!("adam_v/{name}"), t.clone()));
        }
        let meta = HashMap::from([("manifest".to_string(), serde_json::to_string(&manifest)?)]);
        safetensors::serialize(tensors, Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, meta) = safetensors::SafeTensors::read_metadata(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let manifest_json = meta
            .metadata()
            .as_ref()
            .and_then(|m| m.get("manifest"))
            .ok_or_else(|| Error::Checkpoint("missing manifest".into()))?;
        let manifest: Manifest = serde_json::from_str(manifest_json)?;
        if manifest.format != FORMAT {
            return Err(Error::Checkpoint(format!("unsupported format {}", manifest.format)));
        }
        let vocab = Vocabulary::from_tokens(manifest.vocabulary)?;
        if vocab.hash() != manifest.vocabulary_hash {
            return Err(Error::Checkpoint("vocabulary hash mismatch".into()));
        }
        let model = Planner::new(manifest.model, vocab, 0)?;
        let mut tensors = candle_core::safetensors::load_buffer(bytes, &Device::Cpu)?;
        for (name, var) in model.params().vars() {
            let t = tensors
                .remove(&format!("param/{name}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            set_var(var, &t, name)?;
        }
        let mut optimizer = AdamW::new(manifest.config.adamw());
        optimizer.step = manifest.optimizer_step;
        for (key, t) in tensors {
            if let Some(name) = key.strip_prefix("adam_m/") {
                optimizer.first.insert(name.to_string(), t);
            } else if let Some(name) = key.strip_prefix("adam_v/") {
                optimizer.second.insert(name.to_string(), t);
            } else {
                return Err(Error::Checkpoint(format!("unexpected tensor {key}")));
            }
        }
        if model.fingerprint()? != manifest.fingerprint {
            return Err(Error::Checkpoint("parameter fingerprint mismatch".into()));
        }
        Ok(Self {
            model,
            optimizer,
            config: manifest.config,
            epoch: manifest.epoch,
            rng_position: manifest
                .rng_position
                .parse()
                .map_err(|_| Error::Checkpoint("bad rng position".into()))?,
            history: manifest.history,
        })
    }

    /// Writes atomically: a temporary file in the target directory is renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn set_var(var: &Var, t: &Tensor, name: &str) -> Result<()> {
    if t.dims() != var.dims() || t.dtype() != var.dtype() {
        return Err(Error::Checkpoint(format!("parameter {name} has shape {:?}/{:?}", t.dims(), t.dtype())));
    }
    var.set(t)?;
    Ok(())
}

/// Writes `bytes` to `path` through a temporary file and an atomic rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Per-draw log importance weights and single-sample ELBOs of one dialogue.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceDraws {
    pub log_weights: Vec<f64>,
    pub elbos: Vec<f64>,
}

const DRAW_CHUNK: usize = 64;

/// Draws `k` joint latent samples from the posteriors for every node and
/// utterance of `dialogue` (evaluation mode).
pub fn importance_draws(model: &Planner, chart: &Flowchart, dialogue: &Dialogue, k: usize, seed: u64) -> Result<ImportanceDraws> {
    if k == 0 {
        return Err(Error::InvalidArgument("sample count must be at least 1".into()));
    }
    let examples = dialogue_examples(model, chart, dialogue)?;
    let nodes = examples.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = ImportanceDraws { log_weights: Vec::with_capacity(k), elbos: Vec::with_capacity(k) };
    let mut done = 0;
    while done < k {
        let n = DRAW_CHUNK.min(k - done);
        let items: Vec<&NodeExample> = (0..n).flat_map(|_| examples.iter()).collect();
        let utts: usize = items.iter().map(|i| i.utterances.len()).sum();
        let eps = EpsDraw::sample(items.len(), utts, model.d_z(), model.dtype(), &mut rng)?;
        let terms = model.batch_terms(&items, &eps, &mut None)?;
        let g_logw = to_f64_vec(&terms.global.log_w)?;
        let g_kl = to_f64_vec(&terms.global.kl)?;
        let g_nll = to_f64_vec(&terms.global.act_nll)?;
        let l_logw = to_f64_vec(&terms.local.log_w)?;
        let l_kl = to_f64_vec(&terms.local.kl)?;
        let l_nll = to_f64_vec(&terms.local.token_nll)?;
        let mut logw = vec![0.0; n];
        let mut elbo = vec![0.0; n];
        for i in 0..items.len() {
            let s = i / nodes;
            logw[s] += g_logw[i] - g_nll[i];
            elbo[s] -= g_kl[i] + g_nll[i];
        }
        for (r, &item) in terms.utt_item.iter().enumerate() {
            let s = item / nodes;
            logw[s] += l_logw[r] - l_nll[r];
            elbo[s] -= l_kl[r] + l_nll[r];
        }
        out.log_weights.extend(logw);
        out.elbos.extend(elbo);
        done += n;
    }
    Ok(out)
}

pub fn log_mean_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + (values.iter().map(|v| (v - max).exp()).sum::<f64>() / values.len() as f64).ln()
}

/// `K`-sample importance-weighted estimate of `log p(y, a | x)` with the
/// posteriors as proposals.
pub fn estimate_log_likelihood(model: &Planner, chart: &Flowchart, dialogue: &Dialogue, k: usize, seed: u64) -> Result<f64> {
    Ok(log_mean_exp(&importance_draws(model, chart, dialogue, k, seed)?.log_weights))
}

/// Mean and standard error of a sample.
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
