//! A small seeded troubleshooting chart and corpus for tests, demos and benchmarks.

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Corpus, Dialogue, DialogueAct, Speaker, SubDialogue, Utterance};
use crate::flowgraph::{enumerate_paths, FlowEdge, FlowNode, FlowPath, Flowchart, NodeKind};
use crate::model::ModelConfig;
use crate::nn::Precision;
use crate::textenc::BackboneConfig;

pub const TOY_CHART_ID: &str = "wont_start";

/// Key of the one path the toy corpus never realizes.
pub const TOY_UNCOVERED: &str = "D0|No>D2|No>A4";

fn decision(id: &str, text: &str) -> FlowNode {
    FlowNode { id: id.into(), kind: NodeKind::Decision, text: text.into() }
}

fn action(id: &str, text: &str) -> FlowNode {
    FlowNode { id: id.into(), kind: NodeKind::Action, text: text.into() }
}

fn edge(from: &str, response: &str, to: &str) -> FlowEdge {
    FlowEdge { from: from.into(), to: to.into(), response: response.into() }
}

/// Five-path "car won't start" chart.
pub fn toy_flowchart() -> Flowchart {
    let nodes = vec![
        decision("D0", "Does the engine crank when you turn the key?"),
        decision("D1", "Does the engine start and then die right away?"),
        decision("D2", "Is the battery above twelve volts?"),
        decision("D3", "Do you smell fuel near the engine?"),
        action("A0", "Check the fuel pump relay and replace the fuel pump if it is silent."),
        action("A1", "The engine is flooded, wait ten minutes and start with the pedal pressed."),
        action("A2", "Replace the spark plugs and check the ignition coil."),
        action("A3", "Clean the battery terminals and test the starter motor."),
        action("A4", "Charge the battery or replace it if it will not hold a charge."),
    ];
    let edges = vec![
        edge("D0", "Yes", "D1"),
        edge("D0", "No", "D2"),
        edge("D1", "Yes", "A0"),
        edge("D1", "No", "D3"),
        edge("D3", "Yes", "A1"),
        edge("D3", "No", "A2"),
        edge("D2", "Yes", "A3"),
        edge("D2", "No", "A4"),
    ];
    Flowchart::new(TOY_CHART_ID, "D0", nodes, edges).expect("toy chart is valid")
}

/// Act sequence realizing a node of the toy chart.
pub fn toy_acts(node_id: &str, is_root: bool, is_action: bool) -> Vec<DialogueAct> {
    use DialogueAct::*;
    if is_action {
        vec![Suggestion]
    } else if is_root {
        vec![Statement, YesNoQuestion, Inform]
    } else if node_id == "D2" {
        vec![YesNoQuestion, Clarification, Suggestion, Inform]
    } else {
        vec![YesNoQuestion, Inform]
    }
}

pub fn speaker_for(act: DialogueAct) -> Speaker {
    match act {
        DialogueAct::YesNoQuestion | DialogueAct::Suggestion => Speaker::Agent,
        _ => Speaker::User,
    }
}

fn variants(node: &str, act: DialogueAct, response: Option<&str>) -> Vec<String> {
    use DialogueAct::*;
    let yes = response == Some("Yes");
    let v: &[&str] = match (node, act) {
        ("D0", Statement) => &[
            "my car will not start this morning",
            "hi , my car won't start",
            "the car does not start when i try it",
        ],
        ("D0", YesNoQuestion) => &[
            "does the engine crank when you turn the key ?",
            "when you turn the key , does the engine crank ?",
        ],
        ("D1", YesNoQuestion) => &[
            "does the engine start and then die right away ?",
            "does it start and then stall immediately ?",
        ],
        ("D2", YesNoQuestion) => &[
            "is the battery above twelve volts ?",
            "does the battery read more than twelve volts ?",
        ],
        ("D2", Clarification) => &["how do i check the voltage ?", "what should i use to measure it ?"],
        ("D2", Suggestion) => &[
            "use a multimeter across the battery terminals",
            "put a voltmeter on the two battery posts",
        ],
        ("D3", YesNoQuestion) => &["do you smell fuel near the engine ?", "is there a smell of fuel ?"],
        (_, Inform) if yes => &["yes , it does", "yes it is", "yes , that is right"],
        (_, Inform) => &["no , it does not", "no it is not", "no , not at all"],
        ("A0", _) => &[
            "check the fuel pump relay and replace the fuel pump if it is silent",
            "listen for the fuel pump , if it is silent replace it",
        ],
        ("A1", _) => &[
            "the engine is flooded , wait ten minutes and start with the pedal pressed",
            "it is flooded , wait a few minutes then crank with the pedal down",
        ],
        ("A2", _) => &[
            "replace the spark plugs and check the ignition coil",
            "put in new spark plugs and test the coil",
        ],
        ("A3", _) => &[
            "clean the battery terminals and test the starter motor",
            "clean the terminals , then check the starter",
        ],
        _ => &[
            "charge the battery or replace it if it will not hold a charge",
            "charge the battery , and replace it if it keeps dying",
        ],
    };
    v.iter().map(|s| s.to_string()).collect()
}

/// Sub-dialogues realizing `path`, with paraphrases drawn from `rng`.
pub fn realize_path(chart: &Flowchart, path: &FlowPath, rng: &mut ChaCha8Rng) -> Vec<SubDialogue> {
    path.steps
        .iter()
        .enumerate()
        .map(|(i, step)| {
            let kind = chart.node(&step.node_id).map(|n| n.kind);
            let acts = toy_acts(&step.node_id, i == 0, kind == Some(NodeKind::Action));
            let utterances = acts
                .iter()
                .map(|&act| {
                    let options = variants(&step.node_id, act, step.response.as_deref());
                    Utterance {
                        speaker: speaker_for(act),
                        text: options.choose(rng).cloned().unwrap_or_default(),
                        act,
                    }
                })
                .collect();
            SubDialogue { node_id: step.node_id.clone(), utterances }
        })
        .collect()
}

/// The toy chart plus `n` dialogues spread round-robin over every path except
/// [`TOY_UNCOVERED`].
pub fn make_toy(seed: u64, n: usize) -> (Flowchart, Corpus) {
    let chart = toy_flowchart();
    let covered: Vec<FlowPath> = enumerate_paths(&chart).into_iter().filter(|p| p.key() != TOY_UNCOVERED).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dialogues = (0..n)
        .map(|i| {
            let path = &covered[i % covered.len()];
            Dialogue::new(format!("toy-{i:03}"), TOY_CHART_ID, realize_path(&chart, path, &mut rng))
        })
        .collect();
    (chart, Corpus::new(dialogues))
}

/// Small model sized for the toy corpus.
pub fn toy_model_config(precision: Precision) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            d_model: 32,
            encoder_layers: 1,
            decoder_layers: 1,
            heads: 2,
            ffn: 64,
            dropout: 0.0,
            max_len: 64,
            max_turn_len: 128,
            vocab_size: 0,
        },
        d_z: 8,
        precision,
    }
}
