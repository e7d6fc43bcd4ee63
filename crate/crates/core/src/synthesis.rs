//! Ancestral sampling of synthetic dialogues from flowchart paths, and the
//! augmentation driver that multiplies a corpus.
//!
//! For each path node: draw the global latent from its prior, emit acts one at
//! a time, and for each act draw a local latent and decode an utterance.

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Dialogue, DialogueAct, Provenance, Speaker, SubDialogue, Utterance};
use crate::error::{Error, Result};
use crate::flowgraph::{enumerate_paths, FlowPath, Flowchart};
use crate::globalplan::GaussianParams;
use crate::localplan::make_plan_vector;
use crate::model::Planner;
use crate::nn::to_f64_vec;
use crate::textenc::{PooledVec, Vocabulary, BOS, EOS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum ActDecoding {
    Greedy,
    Sample { temperature: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum TokenDecoding {
    Greedy,
    Sample { temperature: f64 },
    TopK { k: usize, temperature: f64 },
}

/// How latents are drawn from their priors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentMode {
    Mean,
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub seed: u64,
    pub acts: ActDecoding,
    pub tokens: TokenDecoding,
    pub latents: LatentMode,
    pub max_utterances: usize,
    /// Cap on utterance length, counting BOS and EOS.
    pub max_tokens: usize,
    /// Final size as a multiple of the base corpus.
    pub factor: usize,
    /// Acts that close a final (action) node.
    pub final_stop: Vec<DialogueAct>,
    /// On other nodes, an answer act ends the turn once a question act has occurred.
    pub question_acts: Vec<DialogueAct>,
    pub answer_acts: Vec<DialogueAct>,
    pub speakers: BTreeMap<DialogueAct, Speaker>,
}

pub fn default_speakers() -> BTreeMap<DialogueAct, Speaker> {
    DialogueAct::ALL
        .iter()
        .map(|&a| {
            let s = match a {
                DialogueAct::YesNoQuestion | DialogueAct::Suggestion => Speaker::Agent,
                _ => Speaker::User,
            };
            (a, s)
        })
        .collect()
}

impl GenerationConfig {
    /// Acts at temperature 1, tokens top-20 at temperature 0.9, sampled latents.
    pub fn sampling(seed: u64) -> Self {
        Self {
            seed,
            acts: ActDecoding::Sample { temperature: 1.0 },
            tokens: TokenDecoding::TopK { k: 20, temperature: 0.9 },
            latents: LatentMode::Sample,
            max_utterances: 6,
            max_tokens: 64,
            factor: 10,
            final_stop: vec![DialogueAct::Suggestion, DialogueAct::Closing],
            question_acts: vec![DialogueAct::YesNoQuestion],
            answer_acts: vec![DialogueAct::Inform],
            speakers: default_speakers(),
        }
    }

    /// Argmax acts and tokens with latents at their prior means.
    pub fn greedy(seed: u64) -> Self {
        Self {
            acts: ActDecoding::Greedy,
            tokens: TokenDecoding::Greedy,
            latents: LatentMode::Mean,
            ..Self::sampling(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        let temp_ok = |t: f64| t > 0.0 && t.is_finite();
        if let ActDecoding::Sample { temperature } = self.acts {
            if !temp_ok(temperature) {
                return bad("act temperature must be positive");
            }
        }
        match self.tokens {
            TokenDecoding::Sample { temperature } if !temp_ok(temperature) => return bad("token temperature must be positive"),
            TokenDecoding::TopK { k, temperature } if k == 0 || !temp_ok(temperature) => {
                return bad("top-k needs k >= 1 and a positive temperature")
            }
            _ => {}
        }
        if self.max_utterances == 0 || self.max_tokens < 3 || self.factor == 0 {
            return bad("max_utterances and factor must be at least 1, max_tokens at least 3");
        }
        Ok(())
    }
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self::sampling(0)
    }
}

/// A generated sub-dialogue and whether it needed the fallback utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeGeneration {
    pub sub: SubDialogue,
    pub fallback: bool,
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

fn sample_index(weights: &[f64], rng: &mut ChaCha8Rng) -> Result<usize> {
    let dist = WeightedIndex::new(weights).map_err(|e| Error::InvalidArgument(format!("degenerate distribution: {e}")))?;
    Ok(dist.sample(rng))
}

fn tempered(p: &[f64], temperature: f64) -> Vec<f64> {
    if temperature == 1.0 {
        return p.to_vec();
    }
    let max = p.iter().copied().fold(0.0, f64::max);
    p.iter().map(|&v| if v > 0.0 { (v / max).powf(1.0 / temperature) } else { 0.0 }).collect()
}

fn pick_act(probs: &[f64], mode: ActDecoding, rng: &mut ChaCha8Rng) -> Result<usize> {
    match mode {
        ActDecoding::Greedy => Ok(argmax(probs)),
        ActDecoding::Sample { temperature } => sample_index(&tempered(probs, temperature), rng),
    }
}

fn pick_token(probs: &[f64], mode: TokenDecoding, rng: &mut ChaCha8Rng) -> Result<usize> {
    match mode {
        TokenDecoding::Greedy => Ok(argmax(probs)),
        TokenDecoding::Sample { temperature } => sample_index(&tempered(probs, temperature), rng),
        TokenDecoding::TopK { k, temperature } => {
            let mut order: Vec<usize> = (0..probs.len()).collect();
            order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
            let mut keep = vec![0.0; probs.len()];
            for &i in order.iter().take(k) {
                keep[i] = probs[i];
            }
            sample_index(&tempered(&keep, temperature), rng)
        }
    }
}

fn draw_latent(g: &GaussianParams, mode: LatentMode, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match mode {
        LatentMode::Mean => g.mu.clone(),
        LatentMode::Sample => g.mu.iter().zip(&g.sigma).map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal)).collect(),
    }
}

/// Decodes one utterance; special tokens other than EOS are never emitted.
fn decode_utterance(model: &Planner, memory: &[PooledVec], config: &GenerationConfig, rng: &mut ChaCha8Rng) -> Result<Vec<u32>> {
    let mut ids = vec![BOS];
    while ids.len() < config.max_tokens - 1 {
        let mut probs = to_f64_vec(&model.decode_step(memory, &ids)?)?;
        for (id, p) in probs.iter_mut().enumerate() {
            if Vocabulary::is_special(id as u32) && id as u32 != EOS {
                *p = 0.0;
            }
        }
        let next = pick_token(&probs, config.tokens, rng)? as u32;
        if next == EOS {
            break;
        }
        ids.push(next);
    }
    ids.push(EOS);
    Ok(ids)
}

/// Generates the sub-dialogue for one path node from its tokenized input.
pub fn generate_for_node(
    model: &Planner,
    node_id: &str,
    node_text: &str,
    x: &[u32],
    is_final: bool,
    rng: &mut ChaCha8Rng,
    config: &GenerationConfig,
) -> Result<NodeGeneration> {
    config.validate()?;
    let h_x = model.encode_pooled(x)?;
    let z_a = draw_latent(&model.prior_global(&h_x)?, config.latents, rng);
    let act_table = model.act_encodings()?;
    let sentinel = PooledVec::new(model.backbone().sentinel().clone())?;
    let mut prev_vec = sentinel;
    let mut prev_act = None;
    let mut asked = false;
    let mut fallback = false;
    let mut utterances = Vec::new();
    while utterances.len() < config.max_utterances {
        let probs = model.act_step(prev_act, &h_x, &z_a)?;
        let mut act = DialogueAct::from_index(pick_act(&probs, config.acts, rng)?).expect("act index in range");
        let h_a = PooledVec::new(act_table.get(act.index())?)?;
        let z_y = draw_latent(&model.prior_local(&h_x, &h_a)?, config.latents, rng);
        let plan = model.plan_slot(&make_plan_vector(&h_a.to_vec()?, &z_y))?;
        let memory = [prev_vec.clone(), h_x.clone(), plan];
        let mut ids = decode_utterance(model, &memory, config, rng)?;
        if ids.len() <= 2 {
            ids = decode_utterance(model, &memory, config, rng)?;
        }
        let text = if ids.len() <= 2 {
            log::warn!("empty utterance at node {node_id}; using the node text");
            fallback = true;
            act = DialogueAct::Inform;
            ids = model.vocab().tokenize(node_text, model.max_len());
            node_text.to_string()
        } else {
            model.vocab().detokenize(&ids)
        };
        let speaker = config.speakers.get(&act).copied().unwrap_or(Speaker::User);
        utterances.push(Utterance { speaker, text, act });
        prev_vec = model.encode_pooled(&ids)?;
        prev_act = Some(act);
        let stop = if is_final {
            config.final_stop.contains(&act)
        } else {
            let answered = asked && config.answer_acts.contains(&act);
            asked |= config.question_acts.contains(&act);
            answered
        };
        if stop {
            break;
        }
    }
    Ok(NodeGeneration { sub: SubDialogue { node_id: node_id.to_string(), utterances }, fallback })
}

/// Generates a full synthetic dialogue for `path`, one sub-dialogue per step.
pub fn generate_dialogue(
    model: &Planner,
    checkpoint_hash: &str,
    chart: &Flowchart,
    path: &FlowPath,
    id: &str,
    seed: u64,
    config: &GenerationConfig,
) -> Result<Dialogue> {
    path.validate(chart)?;
    let inputs = model.path_inputs(chart, path)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut subs = Vec::with_capacity(path.len());
    let mut fallback_nodes = Vec::new();
    for (i, (step, x)) in path.steps.iter().zip(&inputs).enumerate() {
        let node = chart.node(&step.node_id).expect("validated path");
        let out = generate_for_node(model, &step.node_id, &node.text, x, i + 1 == path.len(), &mut rng, config)?;
        if out.fallback {
            fallback_nodes.push(step.node_id.clone());
        }
        subs.push(out.sub);
    }
    let mut d = Dialogue::new(id, chart.id(), subs);
    d.provenance = Some(Provenance::Synthetic);
    d.source_path_key = Some(path.key());
    d.seed = Some(seed);
    d.checkpoint_hash = Some(checkpoint_hash.to_string());
    d.fallback_nodes = fallback_nodes;
    Ok(d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentManifest {
    pub checkpoint_hash: String,
    pub config: GenerationConfig,
    pub base_size: usize,
    pub generated: usize,
    /// Dialogues per `chart::path-key`.
    pub per_path: BTreeMap<String, usize>,
    pub fallback_dialogues: usize,
}

/// Seed of the `index`-th synthetic dialogue, independent of thread scheduling.
pub fn dialogue_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng.random()
}

/// Produces `(factor - 1) * base_size` synthetic dialogues, cycling through
/// every path of every chart (in chart-id order) before repeating any.
pub fn augment(
    model: &Planner,
    checkpoint_hash: &str,
    charts: &BTreeMap<String, Flowchart>,
    base_size: usize,
    config: &GenerationConfig,
) -> Result<(Corpus, AugmentManifest)> {
    config.validate()?;
    if charts.is_empty() {
        return Err(Error::Empty("flowchart set"));
    }
    let paths: Vec<(&Flowchart, FlowPath)> =
        charts.values().flat_map(|c| enumerate_paths(c).into_iter().map(move |p| (c, p))).collect();
    let n = (config.factor - 1) * base_size;
    let dialogues: Vec<Dialogue> = (0..n)
        .into_par_iter()
        .map(|i| {
            let (chart, path) = &paths[i % paths.len()];
            generate_dialogue(
                model,
                checkpoint_hash,
                chart,
                path,
                &format!("syn-{i:06}"),
                dialogue_seed(config.seed, i),
                config,
            )
        })
        .collect::<Result<_>>()?;
    let mut per_path = BTreeMap::new();
    for d in &dialogues {
        *per_path.entry(format!("{}::{}", d.flowchart_id, d.source_path_key.as_deref().unwrap_or(""))).or_insert(0) += 1;
    }
    let manifest = AugmentManifest {
        checkpoint_hash: checkpoint_hash.to_string(),
        config: config.clone(),
        base_size,
        generated: dialogues.len(),
        per_path,
        fallback_dialogues: dialogues.iter().filter(|d| !d.fallback_nodes.is_empty()).count(),
    };
    Ok((Corpus::new(dialogues), manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{load_corpus, save_corpus, LoadOptions};
    use crate::flowgraph::path_for_dialogue;
    use crate::testutil::tiny_planner;
    use crate::toy::toy_flowchart;
    use candle_core::DType;

    fn small(config: GenerationConfig) -> GenerationConfig {
        GenerationConfig { max_tokens: 8, max_utterances: 3, ..config }
    }

    #[test]
    fn presets_validate() {
        let s = GenerationConfig::sampling(1);
        assert_eq!(s.tokens, TokenDecoding::TopK { k: 20, temperature: 0.9 });
        assert_eq!(s.acts, ActDecoding::Sample { temperature: 1.0 });
        assert_eq!((s.max_utterances, s.max_tokens), (6, 64));
        assert!(GenerationConfig::greedy(1).validate().is_ok());
        let bad = GenerationConfig { acts: ActDecoding::Sample { temperature: 0.0 }, ..s };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn top_k_only_samples_from_top() {
        let probs = [0.1, 0.5, 0.3, 0.1];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let i = pick_token(&probs, TokenDecoding::TopK { k: 2, temperature: 0.9 }, &mut rng).unwrap();
            assert!(i == 1 || i == 2);
        }
        assert_eq!(pick_token(&probs, TokenDecoding::Greedy, &mut rng).unwrap(), 1);
    }

    #[test]
    fn generated_dialogue_follows_path_and_is_deterministic() {
        let model = tiny_planner(DType::F32, 1);
        let chart = toy_flowchart();
        let path = &enumerate_paths(&chart)[0];
        let config = small(GenerationConfig::greedy(0));
        let a = generate_dialogue(&model, "h", &chart, path, "d", 5, &config).unwrap();
        assert_eq!(a.sub_dialogues.len(), path.len());
        assert_eq!(&path_for_dialogue(&a, &chart).unwrap(), path);
        assert_eq!(a, generate_dialogue(&model, "h", &chart, path, "d", 5, &config).unwrap());
        for u in a.utterances() {
            assert!(model.vocab().tokenize(&u.text, 1000).len() <= 64);
        }
        assert!(a.sub_dialogues.iter().all(|s| (1..=3).contains(&s.utterances.len())));
    }

    #[test]
    fn augment_counts_round_robin_and_revalidates() {
        let model = tiny_planner(DType::F32, 2);
        let chart = toy_flowchart();
        let charts = BTreeMap::from([(chart.id().to_string(), chart.clone())]);
        let config = GenerationConfig { factor: 3, ..small(GenerationConfig::sampling(4)) };
        let (syn, manifest) = augment(&model, "h", &charts, 5, &config).unwrap();
        assert_eq!(syn.len(), 10);
        assert_eq!(manifest.per_path.len(), 5);
        assert!(manifest.per_path.values().all(|&c| c == 2));
        assert_eq!(syn.provenance, Provenance::Synthetic);
        let mut buf = Vec::new();
        save_corpus(&syn, &mut buf).unwrap();
        let back = load_corpus(buf.as_slice(), &charts, &LoadOptions::default()).unwrap();
        assert_eq!(back.len(), 10);
        let (again, _) = augment(&model, "h", &charts, 5, &config).unwrap();
        assert_eq!(again, syn);
        assert!(augment(&model, "h", &BTreeMap::new(), 5, &config).is_err());
    }
}
