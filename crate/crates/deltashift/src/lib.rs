//! Delta compression for families of finetuned models.
//!
//! A family of task models finetuned from one pretrained checkpoint is stored
//! as a *shared base vector* (the sign-compressed average task delta) plus one
//! compressed residual per task. Two scalar modulators per task — `lambda1`
//! scaling the shared base shift and `lambda2` scaling the compressed residual
//! — are initialized in closed form and optionally refined by distilling the
//! original task model's outputs on a small unlabeled sample.
//!
//! Reconstruction of task `t`:
//!
//! ```text
//! W_t' = W_pre + lambda1 * tau_base + lambda2 * decode(C(W_t - W_pre - lambda1 * tau_base))
//! ```
//!
//! where `tau_base` is the decoded base vector and `C` is a lossy delta codec
//! (random-drop-and-rescale or per-tensor sign quantization). Setting
//! `lambda1 = 0, lambda2 = 1` reduces the pipeline bit-for-bit to vanilla
//! per-task delta compression.
//!
//! Module map:
//! - [`tensor`]: named f32 tensors, canonical-order flattening, f64 reductions
//! - [`checkpoint`]: the `DLTS` binary checkpoint container
//! - [`codec`]: DARE and BitDelta codecs plus the `DLTC` compressed container
//! - [`dbms`]: base vector, closed-form `lambda1`, shift, compress, reconstruct
//! - [`forward`]: small dense forward models and the distillation loss
//! - [`train`]: loss surface over `(lambda1, lambda2)`, gradients, Adam loop
//! - [`harness`]: synthetic suites, pipelines, grid sweeps, ablations, reports

#![forbid(unsafe_code)]

pub mod checkpoint;
pub mod codec;
pub mod dbms;
pub mod forward;
pub mod harness;
pub mod rng;
pub mod tensor;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use codec::{
    bitdelta_compress, bitdelta_decompress, dare_compress, dare_decompress, storage_bits, Codec,
    CodecError, CodecSpec, CompressedDelta, DareCodecConfig,
};
pub use dbms::{
    average_model, compress_task, compress_task_uncompressed_base, compute_base_vector,
    init_lambda1, init_lambda1_filtered, reconstruct, reconstruct_uncompressed_base,
    residual_diagnostics, shifted_base, shifted_base_uncompressed, BaseVector, DbmsError,
    ResidualDiagnostics, TaskArtifact, TrainingProvenance,
};
pub use forward::{
    distill_loss, forward, mse, Activation, Batch, ForwardError, ForwardModel, Layer, Matrix,
};
pub use harness::{
    ablation_init, evaluate, generate_suite, run_pipeline, storage_report, sweep_lambda_grid,
    task_codec, task_train_config, AblationOutcome, AblationRow, AblationTraces, EvalMetrics,
    GridSpec, HarnessError, Method, PipelineReport, PipelineRow, PipelineRun, StorageReport,
    SuiteConfig, SweepGrid, SweepMetric, SweepOptions, SyntheticSuite, TaskData,
    LAMBDA_BITS_PER_TASK,
};
pub use tensor::{dot, l2_norm, map_add, map_scale, map_sub, Tensor, TensorError, TensorMap};
pub use train::{
    adam_step, gradient, trace_to_csv, train_task, train_task_with_init, AdamState, GradientMode,
    InitStrategy, LossContext, TraceRow, TrainConfig, TrainError, TrainOutcome,
};
