//! Flowchart-grounded synthetic dialogue generation.
//!
//! Flowchart paths are turned into act-annotated troubleshooting dialogues by a
//! hierarchical variational planner: a per-node latent drives the sequence of
//! dialogue acts and a per-utterance latent drives how each act is worded.
//! The crate also enumerates paths, measures corpus coverage, trains and
//! checkpoints the model, augments corpora and scores synthetic text.

pub mod corpus;
pub mod error;
pub mod evalmetrics;
pub mod flowgraph;
pub mod globalplan;
pub mod localplan;
pub mod model;
pub mod nn;
pub mod synthesis;
pub mod textenc;
pub mod toy;
pub mod training;

#[cfg(test)]
mod testutil;

pub use corpus::{Corpus, Dialogue, DialogueAct, Provenance, Speaker, SubDialogue, Utterance};
pub use error::{ChartError, Error, Result};
pub use flowgraph::{enumerate_paths, CoverageReport, FlowEdge, FlowNode, FlowPath, Flowchart, NodeKind, PathStep};
pub use globalplan::GaussianParams;
pub use localplan::PlanVector;
pub use model::{ModelConfig, Planner};
pub use synthesis::GenerationConfig;
pub use textenc::{BackboneConfig, PooledVec, Vocabulary};
pub use training::{Checkpoint, LossReport, TrainConfig};
pub use evalmetrics::MetricReport;
