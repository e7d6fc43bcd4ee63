//! Act-annotated dialogue corpora: data model, line-delimited ingest/export,
//! act statistics and the evaluation splits.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowgraph::{path_for_dialogue, Flowchart};
use crate::textenc::normalize_tokens;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DialogueAct {
    Statement,
    Inform,
    YesNoQuestion,
    Clarification,
    Thanking,
    Closing,
    Suggestion,
}

impl DialogueAct {
    pub const ALL: [DialogueAct; 7] = [
        DialogueAct::Statement,
        DialogueAct::Inform,
        DialogueAct::YesNoQuestion,
        DialogueAct::Clarification,
        DialogueAct::Thanking,
        DialogueAct::Closing,
        DialogueAct::Suggestion,
    ];
    pub const COUNT: usize = 7;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DialogueAct::Statement => "statement",
            DialogueAct::Inform => "inform",
            DialogueAct::YesNoQuestion => "yes_no_question",
            DialogueAct::Clarification => "clarification",
            DialogueAct::Thanking => "thanking",
            DialogueAct::Closing => "closing",
            DialogueAct::Suggestion => "suggestion",
        }
    }
}

impl FromStr for DialogueAct {
    type Err = Error;

    /// Case-insensitive; `-`, `_` and spaces are interchangeable.
    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .trim()
            .chars()
            .map(|c| if c == '-' || c == ' ' { '_' } else { c.to_ascii_lowercase() })
            .collect();
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == norm)
            .ok_or_else(|| Error::UnknownAct(s.to_string()))
    }
}

impl fmt::Display for DialogueAct {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    Agent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: Speaker,
    pub text: String,
    #[serde(with = "act_label")]
    pub act: DialogueAct,
}

mod act_label {
    use super::DialogueAct;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(act: &DialogueAct, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(act.as_str())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DialogueAct, D::Error> {
        let label = String::deserialize(d)?;
        label.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubDialogue {
    pub node_id: String,
    pub utterances: Vec<Utterance>,
}

impl SubDialogue {
    pub fn acts(&self) -> Vec<DialogueAct> {
        self.utterances.iter().map(|u| u.act).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Human,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    pub flowchart_id: String,
    pub sub_dialogues: Vec<SubDialogue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_path_key: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_hash: Option<String>,
    /// Nodes whose decoding degenerated and fell back to the flowchart text.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fallback_nodes: Vec<String>,
}

impl Dialogue {
    pub fn new(
        id: impl Into<String>,
        flowchart_id: impl Into<String>,
        sub_dialogues: Vec<SubDialogue>,
    ) -> Self {
        Self {
            id: id.into(),
            flowchart_id: flowchart_id.into(),
            sub_dialogues,
            provenance: None,
            source_path_key: None,
            seed: None,
            checkpoint_hash: None,
            fallback_nodes: Vec::new(),
        }
    }

    pub fn is_synthetic(&self) -> bool {
        self.provenance == Some(Provenance::Synthetic)
    }

    pub fn utterances(&self) -> impl Iterator<Item = &Utterance> {
        self.sub_dialogues.iter().flat_map(|s| s.utterances.iter())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub dialogues: Vec<Dialogue>,
    pub flowchart_ids: BTreeSet<String>,
    pub provenance: Provenance,
}

impl Corpus {
    pub fn new(dialogues: Vec<Dialogue>) -> Self {
        let flowchart_ids = dialogues.iter().map(|d| d.flowchart_id.clone()).collect();
        let provenance = if !dialogues.is_empty() && dialogues.iter().all(Dialogue::is_synthetic)
        {
            Provenance::Synthetic
        } else {
            Provenance::Human
        };
        Self { dialogues, flowchart_ids, provenance }
    }

    pub fn len(&self) -> usize {
        self.dialogues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dialogues.is_empty()
    }

    /// Concatenates two corpora (the base plus its synthetic extension).
    pub fn union(&self, other: &Corpus) -> Corpus {
        let mut dialogues = self.dialogues.clone();
        dialogues.extend(other.dialogues.iter().cloned());
        Corpus::new(dialogues)
    }

    fn subset(&self, keep: impl Fn(usize, &Dialogue) -> bool) -> Corpus {
        Corpus::new(
            self.dialogues
                .iter()
                .enumerate()
                .filter(|(i, d)| keep(*i, d))
                .map(|(_, d)| d.clone())
                .collect(),
        )
    }
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    pub max_utterance_len: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { max_utterance_len: 64 }
    }
}

/// Reads a line-delimited corpus and validates every dialogue against `charts`.
///
/// Over-long utterances are truncated to `max_utterance_len` tokens with a warning.
pub fn load_corpus<R: BufRead>(
    stream: R,
    charts: &BTreeMap<String, Flowchart>,
    options: &LoadOptions,
) -> Result<Corpus> {
    let mut dialogues = Vec::new();
    for (n, line) in stream.lines().enumerate() {
        let line_no = n + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let at = |e: Error| match e {
            Error::Schema { message, .. } => Error::Schema { line: Some(line_no), message },
            other => other,
        };
        let mut dialogue: Dialogue = serde_json::from_str(&line).map_err(|e| {
            // Surface closed-enum violations as their own error kind.
            let msg = e.to_string();
            match msg.find("unknown act label ") {
                Some(pos) => {
                    let label = msg[pos + 18..].split('"').nth(1).unwrap_or_default();
                    Error::UnknownAct(label.to_string())
                }
                None => Error::Schema { line: Some(line_no), message: msg },
            }
        })?;
        validate_dialogue(&mut dialogue, options).map_err(at)?;
        let chart = charts
            .get(&dialogue.flowchart_id)
            .ok_or_else(|| Error::UnknownFlowchart(dialogue.flowchart_id.clone()))?;
        path_for_dialogue(&dialogue, chart)?;
        dialogues.push(dialogue);
    }
    Ok(Corpus::new(dialogues))
}

fn validate_dialogue(dialogue: &mut Dialogue, options: &LoadOptions) -> Result<()> {
    if dialogue.id.is_empty() {
        return Err(Error::schema("empty dialogue id"));
    }
    if dialogue.sub_dialogues.is_empty() {
        return Err(Error::schema(format!("dialogue {} has no sub-dialogues", dialogue.id)));
    }
    for sub in &mut dialogue.sub_dialogues {
        if sub.utterances.is_empty() {
            return Err(Error::schema(format!(
                "dialogue {}: empty sub-dialogue at node {}",
                dialogue.id, sub.node_id
            )));
        }
        for pair in sub.utterances.windows(2) {
            if pair[0].speaker == pair[1].speaker {
                log::debug!(
                    "dialogue {} node {}: consecutive {:?} utterances",
                    dialogue.id,
                    sub.node_id,
                    pair[0].speaker
                );
            }
        }
        for utt in &mut sub.utterances {
            if utt.text.trim().is_empty() {
                return Err(Error::schema(format!("dialogue {}: empty utterance", dialogue.id)));
            }
            let tokens = normalize_tokens(&utt.text);
            if tokens.len() > options.max_utterance_len {
                log::warn!(
                    "dialogue {}: truncating utterance of {} tokens to {}",
                    dialogue.id,
                    tokens.len(),
                    options.max_utterance_len
                );
                utt.text = tokens[..options.max_utterance_len].join(" ");
            }
        }
    }
    Ok(())
}

pub fn save_corpus<W: Write>(corpus: &Corpus, mut out: W) -> Result<()> {
    for dialogue in &corpus.dialogues {
        serde_json::to_writer(&mut out, dialogue)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Fraction of utterances carrying each act; every act is present as a key.
pub fn act_distribution(corpus: &Corpus) -> Result<BTreeMap<DialogueAct, f64>> {
    let mut counts = [0usize; DialogueAct::COUNT];
    for utt in corpus.dialogues.iter().flat_map(Dialogue::utterances) {
        counts[utt.act.index()] += 1;
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::Empty("corpus"));
    }
    Ok(DialogueAct::ALL
        .into_iter()
        .map(|a| (a, counts[a.index()] as f64 / total as f64))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowchartSetting {
    InFlowchart,
    OutOfFlowchart,
}

#[derive(Debug, Clone)]
pub struct SplitConfig {
    /// Flowcharts held out in the out-of-flowchart setting.
    pub out_of_flowchart_test: Vec<String>,
    /// Per-flowchart training share in the in-flowchart setting.
    pub in_flowchart_train_ratio: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            out_of_flowchart_test: vec!["engine".into(), "wireless".into()],
            in_flowchart_train_ratio: 0.8,
            seed: 7,
        }
    }
}

pub fn split_flowchart_setting(
    corpus: &Corpus,
    setting: FlowchartSetting,
    config: &SplitConfig,
) -> Result<(Corpus, Corpus)> {
    match setting {
        FlowchartSetting::OutOfFlowchart => {
            let test_ids: BTreeSet<&str> =
                config.out_of_flowchart_test.iter().map(String::as_str).collect();
            if let Some(missing) =
                test_ids.iter().find(|id| !corpus.flowchart_ids.contains(**id))
            {
                return Err(Error::UnknownFlowchart(missing.to_string()));
            }
            let train = corpus.subset(|_, d| !test_ids.contains(d.flowchart_id.as_str()));
            let test = corpus.subset(|_, d| test_ids.contains(d.flowchart_id.as_str()));
            if train.is_empty() {
                return Err(Error::Empty("training split"));
            }
            Ok((train, test))
        }
        FlowchartSetting::InFlowchart => {
            let ratio = config.in_flowchart_train_ratio;
            if !(ratio > 0.0 && ratio < 1.0) {
                return Err(Error::InvalidArgument(format!("train ratio {ratio} not in (0, 1)")));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            let mut in_test = vec![false; corpus.len()];
            for chart in &corpus.flowchart_ids {
                let mut members: Vec<usize> = (0..corpus.len())
                    .filter(|&i| &corpus.dialogues[i].flowchart_id == chart)
                    .collect();
                members.shuffle(&mut rng);
                let n_train = (members.len() as f64 * ratio).round() as usize;
                for &i in &members[n_train.min(members.len())..] {
                    in_test[i] = true;
                }
            }
            let train = corpus.subset(|i, _| !in_test[i]);
            let test = corpus.subset(|i, _| in_test[i]);
            if train.is_empty() {
                return Err(Error::Empty("training split"));
            }
            Ok((train, test))
        }
    }
}

/// Splits by distinct path: every dialogue sharing a path lands on the same side.
pub fn split_uncovered_paths(
    corpus: &Corpus,
    charts: &BTreeMap<String, Flowchart>,
    train_fraction: f64,
    seed: u64,
) -> Result<(Corpus, Corpus)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction {train_fraction} not in (0, 1)"
        )));
    }
    let mut keys_per_dialogue = Vec::with_capacity(corpus.len());
    for d in &corpus.dialogues {
        let chart = charts
            .get(&d.flowchart_id)
            .ok_or_else(|| Error::UnknownFlowchart(d.flowchart_id.clone()))?;
        let path = path_for_dialogue(d, chart)?;
        keys_per_dialogue.push(format!("{}::{}", d.flowchart_id, path.key()));
    }
    let distinct: BTreeSet<&String> = keys_per_dialogue.iter().collect();
    if distinct.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 distinct paths, found {}",
            distinct.len()
        )));
    }
    let mut keys: Vec<&String> = distinct.into_iter().collect();
    keys.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_covered =
        ((keys.len() as f64 * train_fraction).round() as usize).clamp(1, keys.len() - 1);
    let covered_keys: BTreeSet<&String> = keys[..n_covered].iter().copied().collect();
    let covered = corpus.subset(|i, _| covered_keys.contains(&keys_per_dialogue[i]));
    let uncovered = corpus.subset(|i, _| !covered_keys.contains(&keys_per_dialogue[i]));
    Ok((covered, uncovered))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowgraph::{FlowEdge, FlowNode, NodeKind};

    fn chart(id: &str) -> Flowchart {
        let n = |i: &str, k| FlowNode { id: i.into(), kind: k, text: format!("{i} text") };
        let e = |f: &str, t: &str, r: &str| FlowEdge { from: f.into(), to: t.into(), response: r.into() };
        Flowchart::new(
            id,
            "r",
            vec![
                n("r", NodeKind::Decision),
                n("d", NodeKind::Decision),
                n("a1", NodeKind::Action),
                n("a2", NodeKind::Action),
                n("a3", NodeKind::Action),
            ],
            vec![e("r", "d", "yes"), e("r", "a1", "no"), e("d", "a2", "yes"), e("d", "a3", "no")],
        )
        .unwrap()
    }

    fn utt(act: DialogueAct) -> Utterance {
        Utterance { speaker: Speaker::User, text: "hello there".into(), act }
    }

    fn dialogue(id: &str, chart: &str, nodes: &[&str]) -> Dialogue {
        Dialogue::new(
            id,
            chart,
            nodes
                .iter()
                .map(|n| SubDialogue { node_id: n.to_string(), utterances: vec![utt(DialogueAct::Inform)] })
                .collect(),
        )
    }

    fn charts() -> BTreeMap<String, Flowchart> {
        ["c1", "engine", "wireless"].iter().map(|id| (id.to_string(), chart(id))).collect()
    }

    #[test]
    fn act_labels_normalize() {
        assert_eq!("Yes-No-Question".parse::<DialogueAct>().unwrap(), DialogueAct::YesNoQuestion);
        assert_eq!("yes no question".parse::<DialogueAct>().unwrap(), DialogueAct::YesNoQuestion);
        assert!(matches!("greeting".parse::<DialogueAct>(), Err(Error::UnknownAct(_))));
    }

    #[test]
    fn load_single_line_and_unknown_act() {
        let line = r#"{"id":"d1","flowchart_id":"c1","sub_dialogues":[{"node_id":"r","utterances":[{"speaker":"user","text":"no","act":"inform"}]},{"node_id":"a1","utterances":[{"speaker":"agent","text":"do it","act":"suggestion"}]}]}"#;
        let corpus = load_corpus(line.as_bytes(), &charts(), &LoadOptions::default()).unwrap();
        assert_eq!(corpus.len(), 1);
        assert_eq!(corpus.provenance, Provenance::Human);

        let bad = line.replace("\"suggestion\"", "\"greeting\"");
        let err = load_corpus(bad.as_bytes(), &charts(), &LoadOptions::default()).unwrap_err();
        assert!(err.to_string().contains("unknown act label"), "{err}");

        let foreign = line.replace("\"c1\"", "\"c9\"");
        assert!(matches!(
            load_corpus(foreign.as_bytes(), &charts(), &LoadOptions::default()).unwrap_err(),
            Error::UnknownFlowchart(_)
        ));

        let misaligned = line.replace("\"a1\"", "\"a2\"");
        assert!(matches!(
            load_corpus(misaligned.as_bytes(), &charts(), &LoadOptions::default()).unwrap_err(),
            Error::InvalidPath { .. }
        ));
    }

    #[test]
    fn schema_errors_carry_line_numbers() {
        let text = "\n{\"id\":\"x\"}\n";
        match load_corpus(text.as_bytes(), &charts(), &LoadOptions::default()).unwrap_err() {
            Error::Schema { line, .. } => assert_eq!(line, Some(2)),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn long_utterances_are_truncated() {
        let long = vec!["word"; 70].join(" ");
        let line = format!(
            r#"{{"id":"d1","flowchart_id":"c1","sub_dialogues":[{{"node_id":"r","utterances":[{{"speaker":"user","text":"{long}","act":"inform"}}]}},{{"node_id":"a1","utterances":[{{"speaker":"agent","text":"ok","act":"suggestion"}}]}}]}}"#
        );
        let corpus = load_corpus(line.as_bytes(), &charts(), &LoadOptions::default()).unwrap();
        let text = &corpus.dialogues[0].sub_dialogues[0].utterances[0].text;
        assert_eq!(text.split(' ').count(), 64);
    }

    #[test]
    fn distribution_of_two_informs() {
        let corpus = Corpus::new(vec![dialogue("d", "c1", &["r", "a1"])]);
        let dist = act_distribution(&corpus).unwrap();
        assert_eq!(dist[&DialogueAct::Inform], 1.0);
        assert_eq!(dist[&DialogueAct::Closing], 0.0);
        assert_eq!(dist.len(), 7);
        assert!(matches!(act_distribution(&Corpus::new(vec![])), Err(Error::Empty(_))));
    }

    #[test]
    fn out_of_flowchart_split() {
        let corpus = Corpus::new(vec![
            dialogue("a", "c1", &["r", "a1"]),
            dialogue("b", "engine", &["r", "a1"]),
            dialogue("c", "wireless", &["r", "d", "a2"]),
        ]);
        let (train, test) =
            split_flowchart_setting(&corpus, FlowchartSetting::OutOfFlowchart, &SplitConfig::default())
                .unwrap();
        assert_eq!(train.len(), 1);
        assert_eq!(test.len(), 2);
        assert!(test.flowchart_ids.iter().all(|c| c == "engine" || c == "wireless"));

        let only_engine = Corpus::new(vec![dialogue("b", "engine", &["r", "a1"])]);
        let cfg = SplitConfig { out_of_flowchart_test: vec!["engine".into()], ..Default::default() };
        let err = split_flowchart_setting(&only_engine, FlowchartSetting::OutOfFlowchart, &cfg)
            .unwrap_err();
        assert!(err.to_string().contains("empty training split"), "{err}");

        let err = split_flowchart_setting(&only_engine, FlowchartSetting::OutOfFlowchart, &SplitConfig::default())
            .unwrap_err();
        assert!(matches!(err, Error::UnknownFlowchart(_)));
    }

    #[test]
    fn in_flowchart_split_is_deterministic() {
        let dialogues = (0..30)
            .map(|i| dialogue(&format!("d{i}"), if i % 2 == 0 { "c1" } else { "engine" }, &["r", "a1"]))
            .collect();
        let corpus = Corpus::new(dialogues);
        let cfg = SplitConfig { seed: 7, ..Default::default() };
        let a = split_flowchart_setting(&corpus, FlowchartSetting::InFlowchart, &cfg).unwrap();
        let b = split_flowchart_setting(&corpus, FlowchartSetting::InFlowchart, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.0.len() + a.1.len(), 30);
        assert_eq!(a.0.len(), 24);
    }

    #[test]
    fn uncovered_split_keeps_paths_together() {
        let paths: [&[&str]; 3] = [&["r", "a1"], &["r", "d", "a2"], &["r", "d", "a3"]];
        let dialogues = (0..12)
            .map(|i| dialogue(&format!("d{i}"), "c1", paths[i % 3]))
            .collect();
        let corpus = Corpus::new(dialogues);
        let (covered, uncovered) = split_uncovered_paths(&corpus, &charts(), 0.8, 3).unwrap();
        assert_eq!(covered.len() + uncovered.len(), 12);
        let key = |d: &Dialogue| d.sub_dialogues.iter().map(|s| s.node_id.clone()).collect::<Vec<_>>();
        for c in &covered.dialogues {
            assert!(uncovered.dialogues.iter().all(|u| key(u) != key(c)));
        }

        let single = Corpus::new(vec![dialogue("x", "c1", &["r", "a1"])]);
        assert!(split_uncovered_paths(&single, &charts(), 0.8, 3).is_err());
        assert!(split_uncovered_paths(&corpus, &charts(), 1.0, 3).is_err());
    }
}
