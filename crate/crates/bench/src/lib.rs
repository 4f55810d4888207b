//! Fixtures shared by the benchmarks.

use bifusion_core::fusion::SequenceInput;
use bifusion_core::harness::synth::random_chain;
use bifusion_core::protein::build_graph;
use bifusion_core::rng::stream;
use bifusion_core::{
    FusionMode, FusionModel, Graph, Level, ModelConfig, ProteinGraph, Result, Task,
};

pub struct Fixture {
    pub model: FusionModel,
    pub graph: ProteinGraph,
    pub tokens: Vec<usize>,
}

/// A `len`-residue synthetic protein and a freshly initialized model.
pub fn fixture(mode: FusionMode, len: usize, level: Level) -> Result<Fixture> {
    let mut config = ModelConfig {
        task: Task::Mqa,
        ..ModelConfig::default()
    };
    config.fusion.mode = mode;
    config.gnn.level = level;
    let model = FusionModel::new(config, 1)?;
    let s = random_chain("bench", len, &mut stream(2, &[]));
    let graph = build_graph(&s, 10.0, level)?;
    Ok(Fixture {
        model,
        tokens: s.tokens(),
        graph,
    })
}

/// One eval-mode forward pass; returns the prediction.
pub fn forward(f: &Fixture) -> Result<f64> {
    let mut g = Graph::new();
    let out = f.model.forward(
        &mut g,
        &f.graph,
        SequenceInput::Tokens(&f.tokens),
        None,
        false,
        &mut stream(0, &[]),
    )?;
    Ok(g.value(out.prediction).data()[0])
}

/// Forward plus backward; returns the loss.
pub fn forward_backward(f: &Fixture) -> Result<f64> {
    let mut g = Graph::new();
    let out = f.model.forward(
        &mut g,
        &f.graph,
        SequenceInput::Tokens(&f.tokens),
        None,
        true,
        &mut stream(0, &[]),
    )?;
    let loss = g.sum_all(out.prediction)?;
    g.backward(loss)?;
    Ok(g.value(loss).data()[0])
}
