//! Core library for a hierarchical medical visual question answering
//! pipeline: rationale generation against a language-model backend, a
//! cross-attention + sparse mixture-of-experts diagnostic model trained
//! locally, and the evaluation tooling around both.

pub mod data;
pub mod features;
pub mod fusion;
pub mod grid;
pub mod metrics;
pub mod model;
pub mod moe;
pub mod orchestrator;
pub mod report;
pub mod synthetic;
pub mod tensor;

pub use data::{load_dataset, DataError, VQAItem};
pub use features::{read_features, write_features, FeatureError};
pub use fusion::{
    baseline_gate, cross_attention, cross_attention_value, gated_fuse, AttentionParams,
    FusionError, GateParams,
};
pub use grid::{grid_search, GridCell, GridConfig, GridTable};
pub use metrics::{
    accuracy_closed, answer_matches, bleu, bleu_n, normalize_answer, rouge_l, MetricError,
};
pub use model::{
    assemble_context, batch_loss_graph, build_vocab, forward, greedy_decode, load_checkpoint,
    loss_nll, prepare_examples, save_checkpoint, train, Example, FusionMode, ModelError,
    ModelParams, TrainConfig, TrainReport, Vocab,
};
pub use moe::{
    moe_fuse, moe_mixture, top_k_select, ExpertParams, MoeConfig, MoeError, MoeNodes, MoeParams,
    RoutingChoice, RoutingLog, RoutingRecord,
};
pub use orchestrator::{
    build_prompt, follow_up_review, generate_caption, generate_initial_rationale, make_backend,
    run_pipeline, BackendConfig, BackendKind, HttpBackend, LlmBackend, MockBackend,
    OrchestratorError, PipelineOptions, PipelineReport, PromptTemplates, RationaleRecord,
    RecordStore, Stage, TranscriptEntry, Verdict,
};
pub use report::{
    build_report, expert_utilization, predict_examples, CategoryStats, EvalError, EvalReport,
    Prediction,
};
pub use synthetic::{generate as generate_synthetic, SynthConfig, SynthError, SyntheticOutput};
pub use tensor::{
    grad_check, FeatureMatrix, Gradients, Graph, NamedTensors, NodeId, Tensor, TensorError,
};
