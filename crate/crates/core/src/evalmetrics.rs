//! Intrinsic metrics for synthetic dialogue: BLEU-4, ROUGE-L, Distinct-n,
//! Self-BLEU and word-embedding similarities, plus corpus-level reporting.
//!
//! All functions take pre-tokenized text; [`tokenize`] applies the same
//! normalization as the model vocabulary.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::hash::Hash;
use std::io::{BufRead, Write};
use std::process::{Command, Stdio};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Dialogue};
use crate::error::{Error, Result};
use crate::textenc::normalize_tokens;

pub fn tokenize(text: &str) -> Vec<String> {
    normalize_tokens(text)
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Sentence BLEU-4 against multiple references.
///
/// Modified n-gram precisions for n = 1..4 are combined by geometric mean; an
/// order n >= 2 with no matches uses `1 / (total + 1)`. The brevity penalty uses
/// the reference length closest to the candidate (shorter on ties).
pub fn bleu4<T: Eq + Hash>(candidate: &[T], references: &[Vec<T>]) -> Result<f64> {
    if candidate.is_empty() {
        return Err(Error::Empty("candidate"));
    }
    if references.is_empty() || references.iter().any(Vec::is_empty) {
        return Err(Error::Empty("reference"));
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let cand = ngram_counts(candidate, n);
        let mut max_ref: HashMap<&[T], usize> = HashMap::new();
        for r in references {
            for (g, c) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let total: usize = cand.values().sum();
        let matched: usize = cand.iter().map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0))).sum();
        let p = if matched > 0 {
            matched as f64 / total as f64
        } else if n >= 2 {
            1.0 / (total as f64 + 1.0)
        } else {
            return Ok(0.0);
        };
        log_sum += p.ln() / 4.0;
    }
    let c = candidate.len();
    let r = references
        .iter()
        .map(Vec::len)
        .min_by_key(|&len| (len.abs_diff(c), len))
        .unwrap_or(c);
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok((bp * log_sum.exp()).min(1.0))
}

fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub const ROUGE_BETA: f64 = 1.2;

/// LCS-based ROUGE-L F-measure with recall weight `beta`.
pub fn rouge_l<T: Eq>(candidate: &[T], reference: &[T], beta: f64) -> Result<f64> {
    if candidate.is_empty() || reference.is_empty() {
        return Err(Error::Empty("sequence"));
    }
    let lcs = lcs_len(candidate, reference) as f64;
    if lcs == 0.0 {
        return Ok(0.0);
    }
    let p = lcs / candidate.len() as f64;
    let r = lcs / reference.len() as f64;
    let b2 = beta * beta;
    Ok((1.0 + b2) * p * r / (r + b2 * p))
}

/// Unique over total n-grams across the whole corpus.
pub fn distinct_n<T: Eq + Hash>(texts: &[Vec<T>], n: usize) -> Result<f64> {
    if texts.is_empty() {
        return Err(Error::Empty("text list"));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("n must be at least 1".into()));
    }
    let mut unique = HashSet::new();
    let mut total = 0usize;
    for t in texts {
        if t.len() >= n {
            for w in t.windows(n) {
                unique.insert(w);
                total += 1;
            }
        }
    }
    if total == 0 {
        log::warn!("no text has {n} tokens; distinct-{n} reported as 0");
        return Ok(0.0);
    }
    Ok(unique.len() as f64 / total as f64)
}

/// Mean BLEU-4 of each text against all the others.
pub fn self_bleu<T: Eq + Hash + Clone>(texts: &[Vec<T>]) -> Result<f64> {
    if texts.len() < 2 {
        return Err(Error::InvalidArgument("self-BLEU needs at least two texts".into()));
    }
    let mut sum = 0.0;
    for i in 0..texts.len() {
        let refs: Vec<Vec<T>> = texts.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, t)| t.clone()).collect();
        sum += bleu4(&texts[i], &refs)?;
    }
    Ok(sum / texts.len() as f64)
}

/// Word-vector table read from `word v1 v2 ...` lines.
#[derive(Debug, Clone, Default)]
pub struct WordVectors {
    vectors: HashMap<String, Vec<f64>>,
    dim: usize,
}

impl WordVectors {
    pub fn from_reader<R: BufRead>(reader: R) -> Result<Self> {
        let mut out = WordVectors::default();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let mut parts = line.split_whitespace();
            let Some(word) = parts.next() else { continue };
            let values: Vec<f64> = parts
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Schema { line: Some(i + 1), message: format!("bad vector value: {e}") })?;
            out.insert(word, values).map_err(|e| match e {
                Error::InvalidArgument(m) => Error::Schema { line: Some(i + 1), message: m },
                other => other,
            })?;
        }
        Ok(out)
    }

    pub fn insert(&mut self, word: &str, values: Vec<f64>) -> Result<()> {
        if values.is_empty() || (self.dim != 0 && values.len() != self.dim) {
            return Err(Error::InvalidArgument(format!(
                "vector for {word:?} has {} values, expected {}",
                values.len(),
                self.dim
            )));
        }
        self.dim = values.len();
        self.vectors.insert(word.to_string(), values);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.vectors.get(word).map(Vec::as_slice)
    }

    fn lookup<'a, S: AsRef<str>>(&'a self, tokens: &[S]) -> Vec<&'a [f64]> {
        tokens.iter().filter_map(|t| self.get(t.as_ref())).collect()
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

fn mean_vector(vs: &[&[f64]]) -> Vec<f64> {
    let mut out = vec![0.0; vs[0].len()];
    for v in vs {
        for (o, x) in out.iter_mut().zip(v.iter()) {
            *o += x;
        }
    }
    out.iter().map(|x| x / vs.len() as f64).collect()
}

fn extrema_vector(vs: &[&[f64]]) -> Vec<f64> {
    (0..vs[0].len())
        .map(|k| vs.iter().map(|v| v[k]).fold(0.0, |best: f64, x| if x.abs() > best.abs() { x } else { best }))
        .collect()
}

fn greedy_one_way(a: &[&[f64]], b: &[&[f64]]) -> f64 {
    a.iter().map(|x| b.iter().map(|y| cosine(x, y)).fold(f64::NEG_INFINITY, f64::max)).sum::<f64>() / a.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingScores {
    pub average: f64,
    pub extrema: f64,
    pub greedy: f64,
}

/// Embedding Average / Extrema / Greedy; `None` when either side has no
/// in-vocabulary token.
pub fn embedding_metrics<S: AsRef<str>>(candidate: &[S], reference: &[S], vectors: &WordVectors) -> Option<EmbeddingScores> {
    let c = vectors.lookup(candidate);
    let r = vectors.lookup(reference);
    if c.is_empty() || r.is_empty() {
        return None;
    }
    Some(EmbeddingScores {
        average: cosine(&mean_vector(&c), &mean_vector(&r)),
        extrema: cosine(&extrema_vector(&c), &extrema_vector(&r)),
        greedy: (greedy_one_way(&c, &r) + greedy_one_way(&r, &c)) / 2.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    /// Whole dialogues, utterances concatenated.
    #[default]
    Dialogue,
    /// Each utterance against the reference utterances realizing the same node.
    Utterance,
}

#[derive(Debug, Clone)]
pub struct ReportOptions {
    pub granularity: Granularity,
    pub rouge_beta: f64,
    /// Self-BLEU is quadratic; larger candidate sets are subsampled to this size.
    pub self_bleu_cap: usize,
    pub seed: u64,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self { granularity: Granularity::Dialogue, rouge_beta: ROUGE_BETA, self_bleu_cap: 500, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu4: Option<f64>,
    pub rouge_l: Option<f64>,
    pub distinct_2: f64,
    pub distinct_3: f64,
    pub self_bleu: Option<f64>,
    pub emb_average: Option<f64>,
    pub emb_extrema: Option<f64>,
    pub emb_greedy: Option<f64>,
    pub granularity: Granularity,
    pub candidates: usize,
    pub aligned_pairs: usize,
    pub embedding_pairs: usize,
}

impl MetricReport {
    /// Human-readable table; BLEU and ROUGE are scaled by 100.
    pub fn to_table(&self) -> String {
        let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{:.2}", 100.0 * x));
        let raw = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
        let rows = [
            ("BLEU-4", pct(self.bleu4)),
            ("ROUGE-L", pct(self.rouge_l)),
            ("Distinct-2", format!("{:.4}", self.distinct_2)),
            ("Distinct-3", format!("{:.4}", self.distinct_3)),
            ("Self-BLEU", raw(self.self_bleu)),
            ("Emb-Average", pct(self.emb_average)),
            ("Emb-Extrema", pct(self.emb_extrema)),
            ("Emb-Greedy", pct(self.emb_greedy)),
        ];
        let mut out = format!(
            "{:<12} {:>10}\n{:<12} {:>10}\n",
            "metric", "value", "candidates", self.candidates
        );
        out.push_str(&format!("{:<12} {:>10}\n", "aligned", self.aligned_pairs));
        for (name, value) in rows {
            out.push_str(&format!("{name:<12} {value:>10}\n"));
        }
        out
    }

    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Flowchart id plus node sequence; dialogues sharing it realize the same path.
pub fn alignment_key(d: &Dialogue) -> String {
    let nodes: Vec<&str> = d.sub_dialogues.iter().map(|s| s.node_id.as_str()).collect();
    format!("{}::{}", d.flowchart_id, nodes.join(">"))
}

fn dialogue_tokens(d: &Dialogue) -> Vec<String> {
    d.utterances().flat_map(|u| tokenize(&u.text)).collect()
}

/// One candidate text with the reference texts it is scored against.
struct Aligned {
    candidate: Vec<String>,
    references: Vec<Vec<String>>,
}

fn aligned_items(candidates: &Corpus, references: &Corpus, granularity: Granularity) -> (Vec<Vec<String>>, Vec<Aligned>) {
    let mut by_key: BTreeMap<String, Vec<&Dialogue>> = BTreeMap::new();
    for d in &references.dialogues {
        by_key.entry(alignment_key(d)).or_default().push(d);
    }
    let mut texts = Vec::new();
    let mut aligned = Vec::new();
    for d in &candidates.dialogues {
        let refs = by_key.get(&alignment_key(d));
        match granularity {
            Granularity::Dialogue => {
                let cand = dialogue_tokens(d);
                if cand.is_empty() {
                    continue;
                }
                texts.push(cand.clone());
                if let Some(refs) = refs {
                    let references: Vec<Vec<String>> =
                        refs.iter().map(|r| dialogue_tokens(r)).filter(|t| !t.is_empty()).collect();
                    if !references.is_empty() {
                        aligned.push(Aligned { candidate: cand, references });
                    }
                }
            }
            Granularity::Utterance => {
                for (i, sub) in d.sub_dialogues.iter().enumerate() {
                    let references: Vec<Vec<String>> = refs
                        .into_iter()
                        .flatten()
                        .flat_map(|r| r.sub_dialogues[i].utterances.iter().map(|u| tokenize(&u.text)))
                        .filter(|t| !t.is_empty())
                        .collect();
                    for u in &sub.utterances {
                        let cand = tokenize(&u.text);
                        if cand.is_empty() {
                            continue;
                        }
                        texts.push(cand.clone());
                        if !references.is_empty() {
                            aligned.push(Aligned { candidate: cand, references: references.clone() });
                        }
                    }
                }
            }
        }
    }
    (texts, aligned)
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Scores `candidates` against `references` aligned by path.
///
/// BLEU uses all aligned references jointly; ROUGE-L and the embedding
/// metrics take the best reference per item. Each reference-based metric is
/// the mean over aligned items. Distinct-n and Self-BLEU use candidates only.
pub fn report(
    candidates: &Corpus,
    references: &Corpus,
    vectors: Option<&WordVectors>,
    options: &ReportOptions,
) -> Result<MetricReport> {
    let (texts, aligned) = aligned_items(candidates, references, options.granularity);
    if texts.is_empty() {
        return Err(Error::Empty("candidate corpus"));
    }
    let mut bleu = Vec::with_capacity(aligned.len());
    let mut rouge = Vec::with_capacity(aligned.len());
    let mut emb: Vec<EmbeddingScores> = Vec::new();
    for item in &aligned {
        bleu.push(bleu4(&item.candidate, &item.references)?);
        let mut best = 0.0f64;
        for r in &item.references {
            best = best.max(rouge_l(&item.candidate, r, options.rouge_beta)?);
        }
        rouge.push(best);
        if let Some(wv) = vectors {
            let scores: Vec<EmbeddingScores> =
                item.references.iter().filter_map(|r| embedding_metrics(&item.candidate, r, wv)).collect();
            if !scores.is_empty() {
                let best = |f: fn(&EmbeddingScores) -> f64| scores.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
                emb.push(EmbeddingScores { average: best(|s| s.average), extrema: best(|s| s.extrema), greedy: best(|s| s.greedy) });
            }
        }
    }
    let self_bleu = if texts.len() >= 2 {
        let pool: Vec<Vec<String>> = if texts.len() > options.self_bleu_cap.max(2) {
            let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
            let mut idx = sample(&mut rng, texts.len(), options.self_bleu_cap.max(2)).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| texts[i].clone()).collect()
        } else {
            texts.clone()
        };
        Some(self_bleu(&pool)?)
    } else {
        None
    };
    let emb_field = |f: fn(&EmbeddingScores) -> f64| mean(&emb.iter().map(f).collect::<Vec<_>>());
    Ok(MetricReport {
        bleu4: mean(&bleu),
        rouge_l: mean(&rouge),
        distinct_2: distinct_n(&texts, 2)?,
        distinct_3: distinct_n(&texts, 3)?,
        self_bleu,
        emb_average: emb_field(|s| s.average),
        emb_extrema: emb_field(|s| s.extrema),
        emb_greedy: emb_field(|s| s.greedy),
        granularity: options.granularity,
        candidates: texts.len(),
        aligned_pairs: aligned.len(),
        embedding_pairs: emb.len(),
    })
}

/// A learned scorer living outside this crate (for example a BART-based one).
pub trait ExternalScorer {
    /// One score per `(candidate, reference)` pair.
    fn score(&self, pairs: &[(String, String)]) -> Result<Vec<f64>>;
}

/// Runs a command that reads JSON lines `{"candidate": .., "reference": ..}`
/// on stdin and prints one number per line on stdout.
#[derive(Debug, Clone)]
pub struct CommandScorer {
    pub program: String,
    pub args: Vec<String>,
}

impl ExternalScorer for CommandScorer {
    fn score(&self, pairs: &[(String, String)]) -> Result<Vec<f64>> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()?;
        let mut input = String::new();
        for (c, r) in pairs {
            input.push_str(&serde_json::json!({ "candidate": c, "reference": r }).to_string());
            input.push('\n');
        }
        let mut stdin = child.stdin.take().ok_or_else(|| Error::InvalidArgument("scorer stdin unavailable".into()))?;
        let writer = std::thread::spawn(move || stdin.write_all(input.as_bytes()));
        let output = child.wait_with_output()?;
        writer.join().map_err(|_| Error::InvalidArgument("scorer writer panicked".into()))??;
        if !output.status.success() {
            return Err(Error::InvalidArgument(format!("scorer exited with {}", output.status)));
        }
        let scores: Vec<f64> = String::from_utf8_lossy(&output.stdout)
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::InvalidArgument(format!("scorer output: {e}")))?;
        if scores.len() != pairs.len() {
            return Err(Error::DimensionMismatch { expected: pairs.len(), got: scores.len() });
        }
        Ok(scores)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{DialogueAct, Speaker, SubDialogue, Utterance};

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn bleu_examples() {
        let c = toks("the cat sat on the mat");
        assert_eq!(bleu4(&c, &[c.clone()]).unwrap(), 1.0);
        assert_eq!(bleu4(&toks("a b c"), &[toks("x y z")]).unwrap(), 0.0);
        assert_eq!(bleu4(&toks("ok"), &[toks("ok")]).unwrap(), 1.0);
        assert!(bleu4::<&str>(&[], &[c.clone()]).is_err());
        assert!(bleu4(&c, &[]).is_err());
        // Reference order does not matter.
        let r1 = toks("the cat is on the mat");
        let r2 = toks("there is a cat on the mat");
        assert_eq!(bleu4(&c, &[r1.clone(), r2.clone()]).unwrap(), bleu4(&c, &[r2, r1]).unwrap());
    }

    #[test]
    fn rouge_examples() {
        let a = toks("a b c d");
        assert_eq!(rouge_l(&a, &a, ROUGE_BETA).unwrap(), 1.0);
        assert_eq!(rouge_l(&a, &toks("x y"), ROUGE_BETA).unwrap(), 0.0);
        assert!(rouge_l::<&str>(&[], &a, ROUGE_BETA).is_err());
    }

    #[test]
    fn distinct_examples() {
        assert!((distinct_n(&[toks("a a a")], 1).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(distinct_n(&[toks("the cat sat"), toks("the dog sat")], 2).unwrap(), 1.0);
        assert_eq!(distinct_n(&[toks("a")], 2).unwrap(), 0.0);
        assert!(distinct_n::<&str>(&[], 2).is_err());
    }

    #[test]
    fn self_bleu_examples() {
        let same = vec![toks("a b c d"); 3];
        assert_eq!(self_bleu(&same).unwrap(), 1.0);
        assert_eq!(self_bleu(&[toks("a b"), toks("c d"), toks("e f")]).unwrap(), 0.0);
        assert!(self_bleu(&[toks("a")]).is_err());
    }

    #[test]
    fn embedding_examples() {
        let mut wv = WordVectors::default();
        wv.insert("x", vec![1.0, 0.0]).unwrap();
        wv.insert("y", vec![0.0, 1.0]).unwrap();
        let e = embedding_metrics(&["x"], &["y"], &wv).unwrap();
        assert_eq!((e.average, e.extrema, e.greedy), (0.0, 0.0, 0.0));
        let s = embedding_metrics(&["x", "y"], &["x", "y"], &wv).unwrap();
        assert!((s.average - 1.0).abs() < 1e-15 && (s.extrema - 1.0).abs() < 1e-15 && (s.greedy - 1.0).abs() < 1e-15);
        assert!(embedding_metrics(&["zzz"], &["x"], &wv).is_none());
        assert!(wv.insert("z", vec![1.0]).is_err());
        let parsed = WordVectors::from_reader("a 1 2\nb 3 4\n".as_bytes()).unwrap();
        assert_eq!(parsed.get("b"), Some(&[3.0, 4.0][..]));
        assert!(matches!(
            WordVectors::from_reader("a 1 2\nb 3 x\n".as_bytes()),
            Err(Error::Schema { line: Some(2), .. })
        ));
    }

    fn dialogue(id: &str, texts: &[&[&str]]) -> Dialogue {
        let subs = texts
            .iter()
            .enumerate()
            .map(|(i, utts)| SubDialogue {
                node_id: format!("N{i}"),
                utterances: utts
                    .iter()
                    .map(|t| Utterance { speaker: Speaker::User, text: t.to_string(), act: DialogueAct::Inform })
                    .collect(),
            })
            .collect();
        Dialogue::new(id, "c", subs)
    }

    #[test]
    fn report_identity_and_alignment() {
        let refs = Corpus::new(vec![
            dialogue("r1", &[&["my car will not start"], &["check the battery please"]]),
            dialogue("r2", &[&["the engine is dead"]]),
        ]);
        let mut wv = WordVectors::default();
        for (i, w) in ["my", "car", "will", "not", "start", "check", "the", "battery", "engine", "is", "dead"].iter().enumerate() {
            let mut v = vec![0.1; 11];
            v[i] = 1.0;
            wv.insert(w, v).unwrap();
        }
        for g in [Granularity::Dialogue, Granularity::Utterance] {
            let opts = ReportOptions { granularity: g, ..Default::default() };
            let r = report(&refs, &refs, Some(&wv), &opts).unwrap();
            assert_eq!(r.bleu4, Some(1.0));
            assert_eq!(r.rouge_l, Some(1.0));
            for v in [r.emb_average, r.emb_extrema, r.emb_greedy] {
                assert!((v.unwrap() - 1.0).abs() < 1e-12);
            }
        }
        let other = Corpus::new(vec![dialogue("c1", &[&["x"], &["y"], &["z"]])]);
        let r = report(&other, &refs, None, &ReportOptions::default()).unwrap();
        assert_eq!((r.bleu4, r.rouge_l, r.self_bleu, r.aligned_pairs), (None, None, None, 0));
        assert!(r.to_table().contains("n/a"));
    }

    #[test]
    fn command_scorer_round_trip() {
        let scorer = CommandScorer {
            program: "sh".into(),
            args: vec!["-c".into(), "while read -r line; do echo 0.5; done".into()],
        };
        let pairs = vec![("a".to_string(), "b".to_string()), ("c".to_string(), "d".to_string())];
        assert_eq!(scorer.score(&pairs).unwrap(), vec![0.5, 0.5]);
    }
}
