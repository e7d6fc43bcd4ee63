//! Fixtures shared by the benchmarks under `benches/`.

use flowplan::evalmetrics::tokenize;
use flowplan::flowgraph::path_for_dialogue;
use flowplan::model::NodeExample;
use flowplan::nn::Precision;
use flowplan::toy::{make_toy, toy_model_config};
use flowplan::training::build_vocabulary;
use flowplan::{Flowchart, FlowEdge, FlowNode, NodeKind, Planner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Complete binary decision tree of the given depth.
pub fn binary_chart(depth: u32) -> Flowchart {
    let n = (1usize << (depth + 1)) - 1;
    let internal = (1usize << depth) - 1;
    let nodes = (0..n)
        .map(|i| FlowNode {
            id: format!("n{i}"),
            kind: if i < internal { NodeKind::Decision } else { NodeKind::Action },
            text: format!("step {i}"),
        })
        .collect();
    let edges = (0..internal)
        .flat_map(|i| {
            [("Yes", 2 * i + 1), ("No", 2 * i + 2)]
                .map(|(r, to)| FlowEdge { from: format!("n{i}"), to: format!("n{to}"), response: r.into() })
        })
        .collect();
    Flowchart::new("tree", "n0", nodes, edges).expect("valid tree")
}

/// `n` random token sequences over a small vocabulary.
pub fn random_texts(n: usize, seed: u64) -> Vec<Vec<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.random_range(8..24);
            let words: Vec<String> = (0..len).map(|_| format!("w{}", rng.random_range(0..50))).collect();
            tokenize(&words.join(" "))
        })
        .collect()
}

/// A toy-sized planner and the training items of one toy dialogue.
pub fn toy_batch() -> (Planner, Vec<NodeExample>) {
    let (chart, corpus) = make_toy(0, 20);
    let vocab = build_vocabulary(&corpus, [&chart], 1000);
    let planner = Planner::new(toy_model_config(Precision::F32), vocab, 0).expect("planner");
    let d = &corpus.dialogues[0];
    let path = path_for_dialogue(d, &chart).expect("toy path");
    let items = planner.examples(&chart, &path, &d.sub_dialogues).expect("examples");
    (planner, items)
}
