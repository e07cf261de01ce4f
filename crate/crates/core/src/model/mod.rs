//! The toy decoder: configuration, weights, forward pass, sampling and
//! gradients.

mod config;
mod forward;
mod generate;
mod grad;
mod params;

pub use config::{Activation, ModelConfig, Positional};
pub use forward::{
    argmax, forward, forward_graph, score_continuations, sequence_logprob, Batch, BoundLayer, BoundParams,
    ContinuationScore, ForwardGraph, ForwardOutput, HeadPatch, Interventions, LayerTap, ModelRef, TraceRequest,
    Traces,
};
pub use generate::{generate, GREEDY};
pub use grad::grad;
pub use params::{round_to_f32, LayerParams, ModelParams, INIT_STD};
