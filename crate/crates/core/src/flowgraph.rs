//! Flowchart data model, depth-first path enumeration and coverage statistics.
//!
//! A flowchart is a rooted DAG of decision nodes (questions) and action nodes
//! (remedies). Decision nodes branch on user responses; every maximal walk from
//! the root ends at an action node. A [`FlowPath`] is one such walk together with
//! the responses that select each edge.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Dialogue;
use crate::error::{ChartError, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Decision,
    Action,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowNode {
    pub id: String,
    pub kind: NodeKind,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowEdge {
    pub from: String,
    pub to: String,
    pub response: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ChartDocument {
    id: String,
    root: String,
    nodes: Vec<FlowNode>,
    edges: Vec<FlowEdge>,
}

const CHART_FIELDS: &[&str] = &["id", "root", "nodes", "edges"];
const NODE_FIELDS: &[&str] = &["id", "kind", "text"];
const EDGE_FIELDS: &[&str] = &["from", "to", "response"];

/// A validated flowchart. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Flowchart {
    id: String,
    root: String,
    nodes: Vec<FlowNode>,
    edges: Vec<FlowEdge>,
    index: HashMap<String, usize>,
    /// Outgoing edge indices per node, sorted by (response, target id).
    out: Vec<Vec<usize>>,
}

impl Flowchart {
    /// Builds and validates a chart from parts.
    pub fn new(
        id: impl Into<String>,
        root: impl Into<String>,
        nodes: Vec<FlowNode>,
        edges: Vec<FlowEdge>,
    ) -> Result<Self> {
        let id = id.into();
        let root = root.into();
        let invalid = |kind| Error::InvalidChart { chart: id.clone(), kind };
        if id.is_empty() {
            return Err(invalid(ChartError::EmptyField("id")));
        }
        let mut index = HashMap::with_capacity(nodes.len());
        for (i, node) in nodes.iter().enumerate() {
            if node.id.is_empty() {
                return Err(invalid(ChartError::EmptyField("node id")));
            }
            if node.text.trim().is_empty() {
                return Err(invalid(ChartError::EmptyField("node text")));
            }
            if index.insert(node.id.clone(), i).is_some() {
                return Err(invalid(ChartError::DuplicateNode(node.id.clone())));
            }
        }
        let Some(&root_idx) = index.get(&root) else {
            return Err(invalid(ChartError::MissingRoot(root)));
        };

        let mut out = vec![Vec::new(); nodes.len()];
        let mut seen_responses = HashSet::new();
        for (e, edge) in edges.iter().enumerate() {
            let from = *index
                .get(&edge.from)
                .ok_or_else(|| invalid(ChartError::DanglingEdge(edge.from.clone())))?;
            if !index.contains_key(&edge.to) {
                return Err(invalid(ChartError::DanglingEdge(edge.to.clone())));
            }
            if edge.response.trim().is_empty() {
                return Err(invalid(ChartError::EmptyField("edge response")));
            }
            if nodes[from].kind == NodeKind::Action {
                return Err(invalid(ChartError::ActionWithOutgoing(edge.from.clone())));
            }
            if !seen_responses.insert((edge.from.as_str(), edge.response.as_str())) {
                return Err(invalid(ChartError::DuplicateResponse(
                    edge.from.clone(),
                    edge.response.clone(),
                )));
            }
            out[from].push(e);
        }
        for (i, node) in nodes.iter().enumerate() {
            if node.kind == NodeKind::Decision && out[i].is_empty() {
                return Err(invalid(ChartError::DeadEndDecision(node.id.clone())));
            }
            out[i].sort_by(|&a, &b| {
                (&edges[a].response, &edges[a].to).cmp(&(&edges[b].response, &edges[b].to))
            });
        }

        // Iterative three-colour DFS: detects cycles and marks reachability.
        #[derive(Clone, Copy, PartialEq)]
        enum Mark {
            White,
            Grey,
            Black,
        }
        let mut mark = vec![Mark::White; nodes.len()];
        let mut stack = vec![(root_idx, 0usize)];
        mark[root_idx] = Mark::Grey;
        while let Some((node, next)) = stack.last_mut() {
            let node = *node;
            if let Some(&e) = out[node].get(*next) {
                *next += 1;
                let target = index[&edges[e].to];
                match mark[target] {
                    Mark::Grey => return Err(invalid(ChartError::Cycle(edges[e].to.clone()))),
                    Mark::White => {
                        mark[target] = Mark::Grey;
                        stack.push((target, 0));
                    }
                    Mark::Black => {}
                }
            } else {
                mark[node] = Mark::Black;
                stack.pop();
            }
        }
        if let Some(i) = mark.iter().position(|m| *m == Mark::White) {
            // An unreachable region may itself hide a cycle; reachability is reported first.
            return Err(invalid(ChartError::Unreachable(nodes[i].id.clone())));
        }

        Ok(Self { id, root, nodes, edges, index, out })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn root(&self) -> &str {
        &self.root
    }

    pub fn nodes(&self) -> &[FlowNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[FlowEdge] {
        &self.edges
    }

    pub fn node(&self, id: &str) -> Option<&FlowNode> {
        self.index.get(id).map(|&i| &self.nodes[i])
    }

    /// Outgoing edges of `id` in traversal order.
    pub fn outgoing(&self, id: &str) -> impl Iterator<Item = &FlowEdge> {
        let list = self.index.get(id).map(|&i| self.out[i].as_slice()).unwrap_or(&[]);
        list.iter().map(|&e| &self.edges[e])
    }

    /// Serializes the chart back into the document schema.
    pub fn to_document(&self) -> String {
        let doc = ChartDocument {
            id: self.id.clone(),
            root: self.root.clone(),
            nodes: self.nodes.clone(),
            edges: self.edges.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("chart serialization")
    }
}

/// One step of a path: the node and the response leading out of it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PathStep {
    pub node_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FlowPath {
    pub flowchart_id: String,
    pub steps: Vec<PathStep>,
}

impl FlowPath {
    /// Canonical identity string `n0|resp0>n1|resp1>...>nk`.
    pub fn key(&self) -> String {
        let mut key = String::new();
        for (i, step) in self.steps.iter().enumerate() {
            if i > 0 {
                key.push('>');
            }
            key.push_str(&step.node_id);
            if let Some(resp) = &step.response {
                key.push('|');
                key.push_str(resp);
            }
        }
        key
    }

    pub fn node_ids(&self) -> impl Iterator<Item = &str> {
        self.steps.iter().map(|s| s.node_id.as_str())
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Checks edge consistency and the action-terminal rule against `chart`.
    pub fn validate(&self, chart: &Flowchart) -> Result<()> {
        let bad = |message: String| Error::InvalidPath { chart: chart.id.clone(), message };
        if self.flowchart_id != chart.id {
            return Err(Error::ForeignPath {
                expected: chart.id.clone(),
                found: self.flowchart_id.clone(),
            });
        }
        let Some(first) = self.steps.first() else {
            return Err(bad("empty path".into()));
        };
        if first.node_id != chart.root {
            return Err(bad(format!("path starts at {} instead of the root", first.node_id)));
        }
        for (i, step) in self.steps.iter().enumerate() {
            let node = chart.node(&step.node_id).ok_or_else(|| Error::UnknownNode {
                chart: chart.id.clone(),
                node: step.node_id.clone(),
            })?;
            let last = i + 1 == self.steps.len();
            match (last, node.kind) {
                (true, NodeKind::Action) if step.response.is_none() => {}
                (true, _) => return Err(bad(format!("path ends at non-terminal step {}", node.id))),
                (false, NodeKind::Action) => {
                    return Err(bad(format!("action node {} before the end", node.id)))
                }
                (false, NodeKind::Decision) => {
                    let next = &self.steps[i + 1].node_id;
                    let resp = step.response.as_deref();
                    if !chart
                        .outgoing(&node.id)
                        .any(|e| Some(e.response.as_str()) == resp && &e.to == next)
                    {
                        return Err(bad(format!("no edge {} -[{:?}]-> {}", node.id, resp, next)));
                    }
                }
            }
        }
        Ok(())
    }
}

impl fmt::Display for FlowPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub flowchart_id: String,
    pub total_paths: usize,
    pub covered_paths: usize,
    pub uncovered_fraction: f64,
    pub uncovered_path_ids: Vec<String>,
}

fn unknown_keys(value: &serde_json::Value, allowed: &[&str], context: &str) -> Vec<String> {
    value
        .as_object()
        .map(|obj| {
            obj.keys()
                .filter(|k| !allowed.contains(&k.as_str()))
                .map(|k| format!("{context}.{k}"))
                .collect()
        })
        .unwrap_or_default()
}

/// Parses and validates a flowchart document.
///
/// Unknown fields are an error when `strict`, otherwise they are logged and ignored.
pub fn load_flowchart(document: &str, strict: bool) -> Result<Flowchart> {
    let value: serde_json::Value =
        serde_json::from_str(document).map_err(|e| Error::schema(e.to_string()))?;
    let mut unknown = unknown_keys(&value, CHART_FIELDS, "chart");
    for (field, allowed) in [("nodes", NODE_FIELDS), ("edges", EDGE_FIELDS)] {
        if let Some(items) = value.get(field).and_then(|v| v.as_array()) {
            for (i, item) in items.iter().enumerate() {
                unknown.extend(unknown_keys(item, allowed, &format!("{field}[{i}]")));
            }
        }
    }
    if !unknown.is_empty() {
        if strict {
            return Err(Error::schema(format!("unknown fields: {}", unknown.join(", "))));
        }
        log::warn!("ignoring unknown flowchart fields: {}", unknown.join(", "));
    }
    let doc: ChartDocument =
        serde_json::from_value(value).map_err(|e| Error::schema(e.to_string()))?;
    Flowchart::new(doc.id, doc.root, doc.nodes, doc.edges)
}

/// Loads every `*.json` chart in a directory (or a single file), keyed by chart id.
pub fn load_flowcharts(path: &Path, strict: bool) -> Result<BTreeMap<String, Flowchart>> {
    let mut files = Vec::new();
    if path.is_dir() {
        for entry in std::fs::read_dir(path)? {
            let p = entry?.path();
            if p.extension().is_some_and(|e| e == "json") {
                files.push(p);
            }
        }
        files.sort();
    } else {
        files.push(path.to_path_buf());
    }
    let mut charts = BTreeMap::new();
    for file in files {
        let chart = load_flowchart(&std::fs::read_to_string(&file)?, strict).map_err(|e| match e {
            Error::Schema { message, .. } => {
                Error::schema(format!("{}: {message}", file.display()))
            }
            other => other,
        })?;
        if charts.contains_key(chart.id()) {
            return Err(Error::schema(format!("duplicate flowchart id {}", chart.id())));
        }
        charts.insert(chart.id().to_string(), chart);
    }
    Ok(charts)
}

/// Every root-to-action path, depth first, edges ordered by (response, target id).
pub fn enumerate_paths(chart: &Flowchart) -> Vec<FlowPath> {
    let mut paths = Vec::new();
    let mut prefix: Vec<PathStep> = Vec::new();
    // Stack frames: (node index, next outgoing edge position).
    let mut stack = vec![(chart.index[&chart.root], 0usize)];
    while let Some(&mut (node, ref mut next)) = stack.last_mut() {
        if chart.nodes[node].kind == NodeKind::Action {
            let mut steps = prefix.clone();
            steps.push(PathStep { node_id: chart.nodes[node].id.clone(), response: None });
            paths.push(FlowPath { flowchart_id: chart.id.clone(), steps });
            stack.pop();
            prefix.pop();
            continue;
        }
        match chart.out[node].get(*next) {
            Some(&e) => {
                *next += 1;
                let edge = &chart.edges[e];
                prefix.push(PathStep {
                    node_id: chart.nodes[node].id.clone(),
                    response: Some(edge.response.clone()),
                });
                stack.push((chart.index[&edge.to], 0));
            }
            None => {
                stack.pop();
                prefix.pop();
            }
        }
    }
    paths
}

/// Reconstructs a path from a node sequence; responses are read off the
/// connecting edges (first in traversal order when several edges connect the
/// same pair).
pub fn path_from_nodes<S: AsRef<str>>(chart: &Flowchart, node_ids: &[S]) -> Result<FlowPath> {
    if let Some(id) = node_ids.iter().map(AsRef::as_ref).find(|id| chart.node(id).is_none()) {
        return Err(Error::UnknownNode { chart: chart.id.clone(), node: id.to_string() });
    }
    let mut steps = Vec::with_capacity(node_ids.len());
    for (i, id) in node_ids.iter().enumerate() {
        let id = id.as_ref();
        let response = match node_ids.get(i + 1) {
            Some(next) => {
                let next = next.as_ref();
                let edge = chart.outgoing(id).find(|e| e.to == next).ok_or_else(|| {
                    Error::InvalidPath {
                        chart: chart.id.clone(),
                        message: format!("no edge {id} -> {next}"),
                    }
                })?;
                Some(edge.response.clone())
            }
            None => None,
        };
        steps.push(PathStep { node_id: id.to_string(), response });
    }
    let path = FlowPath { flowchart_id: chart.id.clone(), steps };
    path.validate(chart)?;
    Ok(path)
}

/// The path a dialogue realizes, from its sub-dialogue node alignment.
pub fn path_for_dialogue(dialogue: &Dialogue, chart: &Flowchart) -> Result<FlowPath> {
    if dialogue.flowchart_id != chart.id {
        return Err(Error::ForeignPath {
            expected: chart.id.clone(),
            found: dialogue.flowchart_id.clone(),
        });
    }
    let nodes: Vec<&str> = dialogue.sub_dialogues.iter().map(|s| s.node_id.as_str()).collect();
    path_from_nodes(chart, &nodes)
}

pub fn coverage_stats(paths_seen: &[FlowPath], chart: &Flowchart) -> Result<CoverageReport> {
    let all = enumerate_paths(chart);
    let mut seen = BTreeSet::new();
    for path in paths_seen {
        if path.flowchart_id != chart.id {
            return Err(Error::ForeignPath {
                expected: chart.id.clone(),
                found: path.flowchart_id.clone(),
            });
        }
        seen.insert(path.key());
    }
    let uncovered: Vec<String> =
        all.iter().map(FlowPath::key).filter(|k| !seen.contains(k)).collect();
    let total = all.len();
    let covered = total - uncovered.len();
    let fraction = uncovered.len() as f64 / total as f64;
    Ok(CoverageReport {
        flowchart_id: chart.id.clone(),
        total_paths: total,
        covered_paths: covered,
        uncovered_fraction: (fraction * 1e4).round() / 1e4,
        uncovered_path_ids: uncovered,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn node(id: &str, kind: NodeKind) -> FlowNode {
        FlowNode { id: id.into(), kind, text: format!("text of {id}") }
    }

    pub(crate) fn edge(from: &str, to: &str, response: &str) -> FlowEdge {
        FlowEdge { from: from.into(), to: to.into(), response: response.into() }
    }

    fn minimal() -> Flowchart {
        Flowchart::new(
            "mini",
            "root",
            vec![
                node("root", NodeKind::Decision),
                node("A1", NodeKind::Action),
                node("A2", NodeKind::Action),
            ],
            vec![edge("root", "A1", "Yes"), edge("root", "A2", "No")],
        )
        .unwrap()
    }

    #[test]
    fn minimal_chart_loads_from_document() {
        let doc = r#"{"id":"mini","root":"root",
            "nodes":[{"id":"root","kind":"decision","text":"is it on"},
                     {"id":"A1","kind":"action","text":"turn it off"},
                     {"id":"A2","kind":"action","text":"turn it on"}],
            "edges":[{"from":"root","to":"A1","response":"Yes"},
                     {"from":"root","to":"A2","response":"No"}]}"#;
        let chart = load_flowchart(doc, true).unwrap();
        assert_eq!(chart.nodes().len(), 3);
        assert_eq!(chart.edges().len(), 2);
        assert_eq!(enumerate_paths(&chart).len(), 2);
    }

    #[test]
    fn action_with_outgoing_edge_is_rejected() {
        let err = Flowchart::new(
            "c",
            "root",
            vec![node("root", NodeKind::Decision), node("A1", NodeKind::Action)],
            vec![edge("root", "A1", "Yes"), edge("A1", "root", "back")],
        )
        .unwrap_err();
        assert!(err.to_string().contains("action node with outgoing edge"), "{err}");
    }

    #[test]
    fn cycle_is_rejected() {
        let err = Flowchart::new(
            "c",
            "D1",
            vec![
                node("D1", NodeKind::Decision),
                node("D2", NodeKind::Decision),
                node("A", NodeKind::Action),
            ],
            vec![edge("D1", "D2", "Yes"), edge("D2", "D1", "Yes"), edge("D2", "A", "No")],
        )
        .unwrap_err();
        assert!(err.to_string().contains("cycle detected"), "{err}");
    }

    #[test]
    fn unreachable_and_duplicate_response_are_rejected() {
        let err = Flowchart::new(
            "c",
            "root",
            vec![
                node("root", NodeKind::Decision),
                node("A1", NodeKind::Action),
                node("A2", NodeKind::Action),
            ],
            vec![edge("root", "A1", "Yes")],
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidChart { kind: ChartError::Unreachable(_), .. }));

        let err = Flowchart::new(
            "c",
            "root",
            vec![
                node("root", NodeKind::Decision),
                node("A1", NodeKind::Action),
                node("A2", NodeKind::Action),
            ],
            vec![edge("root", "A1", "Yes"), edge("root", "A2", "Yes")],
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidChart { kind: ChartError::DuplicateResponse(..), .. }));
    }

    #[test]
    fn strict_mode_rejects_unknown_fields() {
        let doc = r#"{"id":"c","root":"A","color":"red",
            "nodes":[{"id":"A","kind":"action","text":"done"}],"edges":[]}"#;
        assert!(load_flowchart(doc, true).is_err());
        assert_eq!(load_flowchart(doc, false).unwrap().nodes().len(), 1);
    }

    #[test]
    fn action_root_yields_single_empty_path() {
        let chart =
            Flowchart::new("c", "A", vec![node("A", NodeKind::Action)], vec![]).unwrap();
        let paths = enumerate_paths(&chart);
        assert_eq!(paths.len(), 1);
        assert_eq!(paths[0].key(), "A");
    }

    #[test]
    fn enumeration_order_and_keys() {
        let chart = minimal();
        let keys: Vec<String> = enumerate_paths(&chart).iter().map(FlowPath::key).collect();
        // "No" sorts before "Yes".
        assert_eq!(keys, vec!["root|No>A2", "root|Yes>A1"]);
    }

    #[test]
    fn dag_reuse_counts_each_walk() {
        let chart = Flowchart::new(
            "dag",
            "r",
            vec![
                node("r", NodeKind::Decision),
                node("m", NodeKind::Decision),
                node("a", NodeKind::Action),
                node("b", NodeKind::Action),
            ],
            vec![edge("r", "m", "x"), edge("r", "m", "y"), edge("m", "a", "1"), edge("m", "b", "2")],
        )
        .unwrap();
        assert_eq!(enumerate_paths(&chart).len(), 4);
    }

    #[test]
    fn path_readback_and_invalid_path() {
        let chart = Flowchart::new(
            "c",
            "root",
            vec![
                node("root", NodeKind::Decision),
                node("D2", NodeKind::Decision),
                node("A3", NodeKind::Action),
                node("A9", NodeKind::Action),
            ],
            vec![edge("root", "D2", "No"), edge("D2", "A3", "Yes"), edge("D2", "A9", "No")],
        )
        .unwrap();
        let path = path_from_nodes(&chart, &["root", "D2", "A3"]).unwrap();
        assert_eq!(path.key(), "root|No>D2|Yes>A3");
        let err = path_from_nodes(&chart, &["root", "A9"]).unwrap_err();
        assert!(err.to_string().contains("not a valid path"), "{err}");
        assert!(matches!(
            path_from_nodes(&chart, &["root", "nope"]).unwrap_err(),
            Error::UnknownNode { .. }
        ));
    }

    #[test]
    fn coverage_examples() {
        let chart = minimal();
        let paths = enumerate_paths(&chart);
        let report = coverage_stats(&paths[..1], &chart).unwrap();
        assert_eq!(report.uncovered_fraction, 0.5);
        assert_eq!(report.covered_paths, 1);
        assert_eq!(coverage_stats(&[], &chart).unwrap().uncovered_fraction, 1.0);
        assert_eq!(coverage_stats(&paths, &chart).unwrap().uncovered_fraction, 0.0);

        let mut foreign = paths[0].clone();
        foreign.flowchart_id = "other".into();
        assert!(matches!(
            coverage_stats(&[foreign], &chart).unwrap_err(),
            Error::ForeignPath { .. }
        ));
    }

    #[test]
    fn thirteen_of_eighteen_rounds_to_four_places() {
        // 18-leaf comb: a chain of 17 decisions each with one action exit.
        let mut nodes = Vec::new();
        let mut edges = Vec::new();
        for i in 0..17 {
            nodes.push(node(&format!("d{i}"), NodeKind::Decision));
            nodes.push(node(&format!("a{i}"), NodeKind::Action));
            edges.push(edge(&format!("d{i}"), &format!("a{i}"), "stop"));
            let next = if i == 16 { "a17".to_string() } else { format!("d{}", i + 1) };
            edges.push(edge(&format!("d{i}"), &next, "go"));
        }
        nodes.push(node("a17", NodeKind::Action));
        let chart = Flowchart::new("comb", "d0", nodes, edges).unwrap();
        let paths = enumerate_paths(&chart);
        assert_eq!(paths.len(), 18);
        let report = coverage_stats(&paths[..13], &chart).unwrap();
        // 5/18 = 0.27777...
        assert_eq!(report.uncovered_fraction, 0.2778);
    }
}
