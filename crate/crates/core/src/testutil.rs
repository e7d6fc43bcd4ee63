use candle_core::DType;

use crate::model::Planner;
use crate::nn::Precision;
use crate::textenc::Vocabulary;
use crate::toy::{make_toy, toy_model_config};
use crate::training::build_vocabulary;

/// Small randomly initialized planner over the toy vocabulary.
pub fn tiny_planner(dtype: DType, seed: u64) -> Planner {
    let precision = if dtype == DType::F64 { Precision::F64 } else { Precision::F32 };
    Planner::new(toy_model_config(precision), toy_vocab(), seed).unwrap()
}

pub fn toy_vocab() -> Vocabulary {
    let (chart, corpus) = make_toy(0, 20);
    build_vocabulary(&corpus, [&chart], 1000)
}
