//! Synthetic desk-scale experiment suite.
//!
//! Generates families of pretrained/finetuned models whose deltas share a
//! controllable common direction (the regime where a shared base shift
//! helps), evaluates compressed reconstructions on held-out data, and runs
//! the standard experiments: the three-method pipeline, modulator grid
//! sweeps, the initialization ablation, and storage accounting.
//!
//! Every output is reproducible byte-for-byte from `(config, seed)`; reports
//! are CSV with a leading `# deltashift-report v1, kind=..., seed=...` line.

use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{atomic_write, load_checkpoint, save_checkpoint, CheckpointError};
use crate::codec::{storage_bits, CodecError, CodecSpec, DareCodecConfig};
use crate::dbms::{
    average_model, compress_task, compress_task_uncompressed_base, compute_base_vector,
    format_f64, init_lambda1, reconstruct, reconstruct_uncompressed_base, BaseVector, DbmsError,
    TaskArtifact, TrainingProvenance,
};
use crate::forward::{
    forward, pack_f64, Activation, Batch, CompiledModel, FlatLayout, ForwardError, ForwardModel,
    Layer, Matrix,
};
use crate::rng::{stream_key, SplitMix64};
use crate::tensor::{l2_norm, map_sub, Tensor, TensorError, TensorMap};
use crate::train::{
    train_task_with_init, InitStrategy, TraceRow, TrainConfig, TrainError,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid suite config: {0}")]
    InvalidConfig(String),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("suite generation diverged: {0}")]
    Degenerate(String),
    #[error("suite file {path:?}: {reason}")]
    SuiteFile { path: PathBuf, reason: String },
    #[error("i/o on {path:?}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Forward(#[from] ForwardError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Dbms(#[from] DbmsError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

// ── Suite configuration ─────────────────────────────────────────────────────

/// Generator configuration for a synthetic suite.
///
/// Each task's teacher is `pretrained + shared_strength * U + task_noise *
/// V_t` where `U` is one unit direction shared by all tasks and `V_t` are
/// per-task unit directions; finetuned weights are produced by seeded
/// full-batch gradient descent toward the teacher's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    /// Number of tasks.
    pub tasks: usize,
    /// Layer widths, input first (e.g. `[16, 32, 4]` = 16 -> 32 -> 4).
    pub layer_widths: Vec<usize>,
    /// Activation between hidden layers.
    pub activation: Activation,
    /// Scale of the pretrained weight initialization.
    pub param_scale: f64,
    /// Magnitude of the delta component shared across tasks.
    pub shared_strength: f64,
    /// Per-task spread of the shared component's scale: task `t` uses
    /// `shared_strength * (1 + shared_spread * u_t)` with `u_t` uniform in
    /// [-1, 1]. Zero gives every task the identical shift magnitude.
    #[serde(default)]
    pub shared_spread: f64,
    /// Magnitude of each task's idiosyncratic delta component.
    pub task_noise: f64,
    /// Unlabeled input pool size per task.
    pub pool_size: usize,
    /// Held-out evaluation set size per task.
    pub eval_size: usize,
    /// Full-batch gradient-descent steps used to produce finetuned weights.
    pub finetune_steps: usize,
    /// Gradient-descent learning rate for finetuning.
    pub finetune_lr: f64,
    /// When true, all tasks share one input pool and eval set.
    #[serde(default)]
    pub shared_pool: bool,
    /// Master seed; everything else derives from it.
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            tasks: 8,
            layer_widths: vec![16, 32, 4],
            activation: Activation::Tanh,
            param_scale: 0.5,
            shared_strength: 0.5,
            shared_spread: 0.0,
            task_noise: 0.12,
            pool_size: 256,
            eval_size: 128,
            finetune_steps: 300,
            finetune_lr: 0.05,
            shared_pool: false,
            seed: 0,
        }
    }
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let err = |m: String| Err(HarnessError::InvalidConfig(m));
        // Base-vector experiments need at least two tasks to average over.
        if self.tasks < 2 || self.tasks > 999 {
            return err(format!("tasks must be 2..=999, got {}", self.tasks));
        }
        if self.layer_widths.len() < 2 {
            return err("layer_widths needs at least input and output".into());
        }
        if self.layer_widths.contains(&0) {
            return err("layer widths must be positive".into());
        }
        if !(self.param_scale.is_finite() && self.param_scale > 0.0) {
            return err(format!("param_scale must be positive, got {}", self.param_scale));
        }
        for (name, v) in [
            ("shared_strength", self.shared_strength),
            ("task_noise", self.task_noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return err(format!("{name} must be >= 0, got {v}"));
            }
        }
        if !(self.shared_spread.is_finite() && (0.0..=1.0).contains(&self.shared_spread)) {
            return err(format!(
                "shared_spread must be in [0, 1], got {}",
                self.shared_spread
            ));
        }
        if self.pool_size == 0 || self.eval_size == 0 {
            return err("pool_size and eval_size must be >= 1".into());
        }
        if self.finetune_steps == 0 {
            return err("finetune_steps must be >= 1".into());
        }
        if !(self.finetune_lr.is_finite() && self.finetune_lr > 0.0) {
            return err(format!("finetune_lr must be positive, got {}", self.finetune_lr));
        }
        Ok(())
    }

    /// The shared architecture as a forward model over `l{i}.weight` /
    /// `l{i}.bias` tensors.
    #[must_use]
    pub fn model(&self) -> ForwardModel {
        let mut layers = Vec::new();
        let n = self.layer_widths.len() - 1;
        for i in 0..n {
            layers.push(Layer::Linear {
                weight: format!("l{i}.weight"),
                bias: Some(format!("l{i}.bias")),
            });
            if i + 1 < n {
                layers.push(Layer::Activation {
                    kind: self.activation,
                });
            }
        }
        ForwardModel {
            input_dim: self.layer_widths[0],
            output_dim: *self.layer_widths.last().unwrap(),
            layers,
        }
    }

    /// Tensor names, shapes, and init standard deviations, in layer order.
    fn tensor_specs(&self) -> Vec<(String, Vec<usize>, f64)> {
        let mut specs = Vec::new();
        for i in 0..self.layer_widths.len() - 1 {
            let (inn, out) = (self.layer_widths[i], self.layer_widths[i + 1]);
            specs.push((
                format!("l{i}.weight"),
                vec![out, inn],
                self.param_scale / (inn as f64).sqrt(),
            ));
            specs.push((format!("l{i}.bias"), vec![out], 0.05 * self.param_scale));
        }
        specs
    }
}

// ── Suite data ──────────────────────────────────────────────────────────────

/// One task: its finetuned weights, unlabeled input pool, and held-out
/// evaluation set with teacher-generated targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub id: String,
    pub finetuned: TensorMap,
    pub pool: Batch,
    pub eval_inputs: Batch,
    /// Teacher outputs on `eval_inputs` (rows x output_dim).
    pub eval_targets: Batch,
}

/// A generated suite: shared pretrained weights plus per-task data.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSuite {
    config: SuiteConfig,
    model: ForwardModel,
    pretrained: TensorMap,
    tasks: Vec<TaskData>,
}

impl SyntheticSuite {
    #[must_use]
    pub fn config(&self) -> &SuiteConfig {
        &self.config
    }

    #[must_use]
    pub fn model(&self) -> &ForwardModel {
        &self.model
    }

    #[must_use]
    pub fn pretrained(&self) -> &TensorMap {
        &self.pretrained
    }

    #[must_use]
    pub fn tasks(&self) -> &[TaskData] {
        &self.tasks
    }

    pub fn task(&self, task_id: &str) -> Result<&TaskData, HarnessError> {
        self.tasks
            .iter()
            .find(|t| t.id == task_id)
            .ok_or_else(|| HarnessError::UnknownTask(task_id.to_owned()))
    }

    /// Owned copies of every finetuned map, in task order.
    #[must_use]
    pub fn finetuned_models(&self) -> Vec<TensorMap> {
        self.tasks.iter().map(|t| t.finetuned.clone()).collect()
    }

    /// The shared base vector of this suite's task family.
    pub fn base_vector(&self) -> Result<BaseVector, HarnessError> {
        Ok(compute_base_vector(
            &self.finetuned_models(),
            &self.pretrained,
        )?)
    }
}

// ── Generation ──────────────────────────────────────────────────────────────

// Purpose labels for deriving independent seed streams from the master seed.
const SALT_PRETRAINED: &str = "pretrained";
const SALT_SHARED_DIR: &str = "shared_dir";
const SALT_TASK_DIR: &str = "task_dir";
const SALT_SHARED_SCALE: &str = "shared_scale";
const SALT_POOL: &str = "pool";
const SALT_EVAL: &str = "eval";

fn task_id_of(index: usize) -> String {
    format!("task_{index:03}")
}

/// Standard normal draws for one named tensor, from a stream keyed by
/// `(purpose, master seed, tensor name)` so generation order is irrelevant.
fn tensor_normals(purpose: &str, seed: u64, name: &str, len: usize) -> Vec<f64> {
    let mut rng = SplitMix64::new(stream_key(stream_key(seed, purpose), name));
    (0..len).map(|_| rng.next_normal()).collect()
}

/// A direction over the whole weight layout, normalized to unit l2.
fn unit_direction(specs: &[(String, Vec<usize>, f64)], purpose: &str, seed: u64) -> Vec<f64> {
    let mut flat = Vec::new();
    for (name, shape, _) in specs {
        let len = shape.iter().product();
        flat.extend(tensor_normals(purpose, seed, name, len));
    }
    let norm = flat.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in &mut flat {
            *v /= norm;
        }
    }
    flat
}

/// Assemble a TensorMap from per-spec f64 values (cast to f32).
fn map_from_flat(
    specs: &[(String, Vec<usize>, f64)],
    flat: &[f64],
) -> Result<TensorMap, TensorError> {
    let mut tensors = Vec::with_capacity(specs.len());
    let mut off = 0;
    for (name, shape, _) in specs {
        let len: usize = shape.iter().product();
        let data = flat[off..off + len].iter().map(|&v| v as f32).collect();
        tensors.push(Tensor::new(name.clone(), shape.clone(), data)?);
        off += len;
    }
    TensorMap::from_tensors(tensors)
}

fn random_inputs(purpose: &str, seed: u64, key: &str, rows: usize, cols: usize) -> Batch {
    let mut rng = SplitMix64::new(stream_key(stream_key(seed, purpose), key));
    let data = (0..rows * cols).map(|_| rng.next_normal() as f32).collect();
    Batch::new(rows, cols, data).expect("generated inputs are finite and non-empty")
}

fn matrix_to_f32(m: &Matrix) -> Vec<f32> {
    m.data.iter().map(|&v| v as f32).collect()
}

/// Generate a suite: seeded pretrained weights, per-task teachers sharing a
/// common delta direction, and finetuned weights from full-batch gradient
/// descent on each task's pool.
pub fn generate_suite(cfg: &SuiteConfig) -> Result<SyntheticSuite, HarnessError> {
    cfg.validate()?;
    let model = cfg.model();
    let specs = cfg.tensor_specs();
    let total: usize = specs
        .iter()
        .map(|(_, s, _)| s.iter().product::<usize>())
        .sum();

    // Pretrained weights: per-tensor Gaussian init at the configured scale.
    let mut pre_flat = Vec::with_capacity(total);
    for (name, shape, std) in &specs {
        let len = shape.iter().product();
        pre_flat.extend(
            tensor_normals(SALT_PRETRAINED, cfg.seed, name, len)
                .iter()
                .map(|v| v * std),
        );
    }
    let pretrained = map_from_flat(&specs, &pre_flat)?;
    // Teacher construction happens in the canonical (name-sorted) flat order.
    let layout = FlatLayout::of(&pretrained);
    let compiled = CompiledModel::compile(&model, &layout)?;
    let pre_canon = pack_f64(&pretrained);

    let shared = unit_direction(&specs, SALT_SHARED_DIR, cfg.seed);
    let shared_map = map_from_flat(&specs, &shared)?;
    let shared_canon = pack_f64(&shared_map); // reorder into canonical order

    let mut tasks = Vec::with_capacity(cfg.tasks);
    for t in 0..cfg.tasks {
        let id = task_id_of(t);
        let pool_key = if cfg.shared_pool { "shared" } else { id.as_str() };
        let pool = random_inputs(
            SALT_POOL,
            cfg.seed,
            pool_key,
            cfg.pool_size,
            cfg.layer_widths[0],
        );
        let eval_inputs = random_inputs(
            SALT_EVAL,
            cfg.seed,
            pool_key,
            cfg.eval_size,
            cfg.layer_widths[0],
        );

        // Teacher = pretrained + c_t * U + task_noise * V_t with the shared
        // scale c_t drawn per task around shared_strength.
        let noise = unit_direction(&specs, SALT_TASK_DIR, stream_key(cfg.seed, &id));
        let noise_map = map_from_flat(&specs, &noise)?;
        let noise_canon = pack_f64(&noise_map);
        let scale_u = 2.0
            * SplitMix64::new(stream_key(stream_key(cfg.seed, SALT_SHARED_SCALE), &id))
                .next_f64()
            - 1.0;
        let shared_scale = cfg.shared_strength * (1.0 + cfg.shared_spread * scale_u);
        let teacher: Vec<f64> = pre_canon
            .iter()
            .zip(&shared_canon)
            .zip(&noise_canon)
            .map(|((&p, &u), &v)| p + shared_scale * u + cfg.task_noise * v)
            .collect();

        let pool_targets = {
            let out = compiled.forward_flat(&teacher, &pool, None)?;
            Matrix {
                rows: out.rows,
                cols: out.cols,
                // Targets are stored (and therefore trained against) in f32.
                data: matrix_to_f32(&out).iter().map(|&v| f64::from(v)).collect(),
            }
        };
        let eval_out = compiled.forward_flat(&teacher, &eval_inputs, None)?;
        let eval_targets = Batch::new(eval_out.rows, eval_out.cols, matrix_to_f32(&eval_out))
            .expect("teacher outputs are finite");

        // Finetune from the pretrained weights by full-batch gradient descent.
        let mut w = pre_canon.clone();
        let mut grad = vec![0.0f64; w.len()];
        for step in 0..cfg.finetune_steps {
            let loss = compiled.loss_and_weight_grad(&w, &pool, &pool_targets, &mut grad)?;
            if !loss.is_finite() {
                return Err(HarnessError::Degenerate(format!(
                    "finetune loss became non-finite for {id} at step {step}; lower finetune_lr"
                )));
            }
            for (wi, gi) in w.iter_mut().zip(&grad) {
                *wi -= cfg.finetune_lr * gi;
            }
        }
        let finetuned = layout.unpack(&w)?;

        tasks.push(TaskData {
            id,
            finetuned,
            pool,
            eval_inputs,
            eval_targets,
        });
    }

    Ok(SyntheticSuite {
        config: cfg.clone(),
        model,
        pretrained,
        tasks,
    })
}

// ── Suite persistence ───────────────────────────────────────────────────────

fn batch_to_map(batch: &Batch, name: &str) -> Result<TensorMap, TensorError> {
    TensorMap::from_tensors(vec![Tensor::new(
        name,
        vec![batch.rows(), batch.cols()],
        batch.data().to_vec(),
    )?])
}

fn batch_from_tensor(map: &TensorMap, name: &str, path: &Path) -> Result<Batch, HarnessError> {
    let t = map.get(name).ok_or_else(|| HarnessError::SuiteFile {
        path: path.to_owned(),
        reason: format!("missing tensor {name:?}"),
    })?;
    let [rows, cols] = t.shape() else {
        return Err(HarnessError::SuiteFile {
            path: path.to_owned(),
            reason: format!("tensor {name:?} must be rank 2, got {:?}", t.shape()),
        });
    };
    Ok(Batch::new(*rows, *cols, t.data().to_vec())?)
}

impl SyntheticSuite {
    /// Write the suite to a directory: `suite.json`, `pretrained.dlts`, and
    /// per-task `tasks/<id>.{finetuned,pool,eval}.dlts`.
    pub fn save(&self, dir: &Path) -> Result<(), HarnessError> {
        let io = |path: &Path| {
            let path = path.to_owned();
            move |source| HarnessError::Io { path, source }
        };
        let tasks_dir = dir.join("tasks");
        std::fs::create_dir_all(&tasks_dir).map_err(io(&tasks_dir))?;
        let cfg_path = dir.join("suite.json");
        let mut json = serde_json::to_vec_pretty(&self.config).expect("config serializes");
        json.push(b'\n');
        atomic_write(&cfg_path, &json).map_err(io(&cfg_path))?;
        save_checkpoint(&self.pretrained, &dir.join("pretrained.dlts"))?;
        for task in &self.tasks {
            save_checkpoint(
                &task.finetuned,
                &tasks_dir.join(format!("{}.finetuned.dlts", task.id)),
            )?;
            save_checkpoint(
                &batch_to_map(&task.pool, "inputs")?,
                &tasks_dir.join(format!("{}.pool.dlts", task.id)),
            )?;
            let mut eval = batch_to_map(&task.eval_inputs, "inputs")?;
            eval.insert(Tensor::new(
                "targets",
                vec![task.eval_targets.rows(), task.eval_targets.cols()],
                task.eval_targets.data().to_vec(),
            )?)?;
            save_checkpoint(&eval, &tasks_dir.join(format!("{}.eval.dlts", task.id)))?;
        }
        Ok(())
    }

    /// Load a suite written by [`SyntheticSuite::save`].
    pub fn load(dir: &Path) -> Result<Self, HarnessError> {
        let cfg_path = dir.join("suite.json");
        let text = std::fs::read_to_string(&cfg_path).map_err(|source| HarnessError::Io {
            path: cfg_path.clone(),
            source,
        })?;
        let config: SuiteConfig =
            serde_json::from_str(&text).map_err(|e| HarnessError::SuiteFile {
                path: cfg_path.clone(),
                reason: e.to_string(),
            })?;
        config.validate()?;
        let model = config.model();
        let pretrained = load_checkpoint(&dir.join("pretrained.dlts"))?;
        let mut tasks = Vec::with_capacity(config.tasks);
        for t in 0..config.tasks {
            let id = task_id_of(t);
            let ft_path = dir.join("tasks").join(format!("{id}.finetuned.dlts"));
            let finetuned = load_checkpoint(&ft_path)?;
            finetuned.check_aligned(&pretrained)?;
            let pool_path = dir.join("tasks").join(format!("{id}.pool.dlts"));
            let pool = batch_from_tensor(&load_checkpoint(&pool_path)?, "inputs", &pool_path)?;
            let eval_path = dir.join("tasks").join(format!("{id}.eval.dlts"));
            let eval_map = load_checkpoint(&eval_path)?;
            let eval_inputs = batch_from_tensor(&eval_map, "inputs", &eval_path)?;
            let eval_targets = batch_from_tensor(&eval_map, "targets", &eval_path)?;
            if eval_targets.rows() != eval_inputs.rows() {
                return Err(HarnessError::SuiteFile {
                    path: eval_path,
                    reason: format!(
                        "eval inputs have {} rows but targets have {}",
                        eval_inputs.rows(),
                        eval_targets.rows()
                    ),
                });
            }
            tasks.push(TaskData {
                id,
                finetuned,
                pool,
                eval_inputs,
                eval_targets,
            });
        }
        Ok(Self {
            config,
            model,
            pretrained,
            tasks,
        })
    }
}

// ── Evaluation ──────────────────────────────────────────────────────────────

/// Held-out metrics for one candidate weight map on one task.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    /// Mean squared error against the stored teacher-generated targets.
    pub eval_mse: f64,
    /// `||Y_candidate - Y_finetuned||_F / ||Y_finetuned||_F` on the eval set.
    pub relative_output_error: f64,
}

/// Evaluate candidate weights on a task's held-out set: MSE against stored
/// targets plus error relative to the true finetuned model's outputs.
pub fn evaluate(
    weights: &TensorMap,
    suite: &SyntheticSuite,
    task_id: &str,
) -> Result<EvalMetrics, HarnessError> {
    let task = suite.task(task_id)?;
    let y = forward(&suite.model, weights, &task.eval_inputs)?;
    let y_ft = forward(&suite.model, &task.finetuned, &task.eval_inputs)?;
    let mut mse = 0.0f64;
    for (&yi, &ti) in y.data.iter().zip(task.eval_targets.data()) {
        let d = yi - f64::from(ti);
        mse += d * d;
    }
    mse /= y.data.len() as f64;
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for (&yi, &fi) in y.data.iter().zip(&y_ft.data) {
        num += (yi - fi) * (yi - fi);
        den += fi * fi;
    }
    let relative_output_error = if den > 0.0 {
        (num / den).sqrt()
    } else if num == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(EvalMetrics {
        eval_mse: mse,
        relative_output_error,
    })
}

// ── Pipeline ────────────────────────────────────────────────────────────────

/// The three compression methods compared throughout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Plain delta compression: `lambda1 = 0`, `lambda2 = 1`.
    Vanilla,
    /// Shifted base with closed-form `lambda1`, untrained `lambda2 = 1`.
    DbmsInit,
    /// Shifted base with both modulators trained.
    DbmsTrained,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Vanilla => "VANILLA",
            Method::DbmsInit => "DBMS_INIT",
            Method::DbmsTrained => "DBMS_TRAINED",
        })
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "VANILLA" => Ok(Method::Vanilla),
            "DBMS_INIT" => Ok(Method::DbmsInit),
            "DBMS_TRAINED" => Ok(Method::DbmsTrained),
            other => Err(format!(
                "unknown method {other:?} (expected vanilla|dbms_init|dbms_trained)"
            )),
        }
    }
}

/// Per-task codec spec: DARE masks get an independent per-task seed derived
/// from the configured seed and the task id, so masks differ across tasks
/// yet stay reproducible and order-independent.
#[must_use]
pub fn task_codec(spec: &CodecSpec, task_id: &str) -> CodecSpec {
    match spec {
        CodecSpec::Dare(cfg) => CodecSpec::Dare(DareCodecConfig {
            sparse_rate: cfg.sparse_rate,
            seed: stream_key(cfg.seed, task_id),
        }),
        CodecSpec::BitDelta => CodecSpec::BitDelta,
    }
}

/// Per-task training config: the sampling seed is derived per task.
#[must_use]
pub fn task_train_config(cfg: &TrainConfig, task_id: &str) -> TrainConfig {
    TrainConfig {
        seed: stream_key(cfg.seed, task_id),
        ..*cfg
    }
}

/// One pipeline row, mirroring the CSV schema.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineRow {
    pub task_id: String,
    pub method: Method,
    pub codec: CodecSpec,
    pub lambda1: f64,
    pub lambda2: f64,
    pub recon_l2: f64,
    pub eval_mse: f64,
    pub rel_out_err: f64,
    pub bits: u64,
}

/// Per-task metrics table for one method.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineReport {
    pub seed: u64,
    pub rows: Vec<PipelineRow>,
}

impl PipelineReport {
    /// CSV rendering: `task_id, method, codec, sparse_rate, lambda1, lambda2,
    /// recon_l2, eval_mse, rel_out_err, bits`.
    #[must_use]
    pub fn to_csv(&self) -> String {
        let mut s = csv_header("pipeline", self.seed);
        s.push_str("task_id,method,codec,sparse_rate,lambda1,lambda2,recon_l2,eval_mse,rel_out_err,bits\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                r.task_id,
                r.method,
                r.codec.codec(),
                format_f64(r.codec.sparse_rate()),
                format_f64(r.lambda1),
                format_f64(r.lambda2),
                format_f64(r.recon_l2),
                format_f64(r.eval_mse),
                format_f64(r.rel_out_err),
                r.bits,
            );
        }
        s
    }
}

/// Pipeline result: the metrics table plus the artifacts and base vector it
/// was computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineRun {
    pub report: PipelineReport,
    pub artifacts: Vec<TaskArtifact>,
    pub base: BaseVector,
}

/// Run one method over every task of a suite.
pub fn run_pipeline(
    suite: &SyntheticSuite,
    codec: &CodecSpec,
    method: Method,
    train_cfg: &TrainConfig,
) -> Result<PipelineRun, HarnessError> {
    let base = suite.base_vector()?;
    let results: Vec<(PipelineRow, TaskArtifact)> = suite
        .tasks
        .par_iter()
        .map(|task| -> Result<(PipelineRow, TaskArtifact), HarnessError> {
            let codec_t = task_codec(codec, &task.id);
            let artifact = match method {
                Method::Vanilla => TaskArtifact {
                    task_id: task.id.clone(),
                    delta: compress_task(&task.finetuned, &suite.pretrained, &base, 0.0, &codec_t)?,
                    lambda1: 0.0,
                    lambda2: 1.0,
                    provenance: TrainingProvenance::untrained(),
                },
                Method::DbmsInit => {
                    let l1 = init_lambda1(&task.finetuned, &suite.pretrained, &base)?;
                    TaskArtifact {
                        task_id: task.id.clone(),
                        delta: compress_task(
                            &task.finetuned,
                            &suite.pretrained,
                            &base,
                            l1,
                            &codec_t,
                        )?,
                        lambda1: l1,
                        lambda2: 1.0,
                        provenance: TrainingProvenance::untrained(),
                    }
                }
                Method::DbmsTrained => {
                    train_task_with_init(
                        &task.id,
                        &suite.model,
                        &suite.pretrained,
                        &task.finetuned,
                        &base,
                        &codec_t,
                        &task.pool,
                        &task_train_config(train_cfg, &task.id),
                        InitStrategy::Projection,
                    )?
                    .artifact
                }
            };
            let row = pipeline_row(suite, &base, &artifact, method, &codec_t)?;
            Ok((row, artifact))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let (rows, artifacts) = results.into_iter().unzip();
    Ok(PipelineRun {
        report: PipelineReport {
            seed: suite.config.seed,
            rows,
        },
        artifacts,
        base,
    })
}

fn pipeline_row(
    suite: &SyntheticSuite,
    base: &BaseVector,
    artifact: &TaskArtifact,
    method: Method,
    codec_t: &CodecSpec,
) -> Result<PipelineRow, HarnessError> {
    let task = suite.task(&artifact.task_id)?;
    let recon = reconstruct(&suite.pretrained, base, artifact)?;
    let diff = map_sub(&recon, &task.finetuned)?;
    let recon_l2 = l2_norm(&diff.flatten());
    let metrics = evaluate(&recon, suite, &artifact.task_id)?;
    Ok(PipelineRow {
        task_id: artifact.task_id.clone(),
        method,
        codec: *codec_t,
        lambda1: artifact.lambda1,
        lambda2: artifact.lambda2,
        recon_l2,
        eval_mse: metrics.eval_mse,
        rel_out_err: metrics.relative_output_error,
        bits: storage_bits(&artifact.delta),
    })
}

// ── Grid sweep ──────────────────────────────────────────────────────────────

/// A 1-D grid: `steps` points from `start` to `end` inclusive (`steps == 1`
/// requires `start == end`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub start: f64,
    pub end: f64,
    pub steps: usize,
}

impl GridSpec {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if !(self.start.is_finite() && self.end.is_finite()) {
            return Err(HarnessError::InvalidGrid(format!(
                "bounds must be finite, got [{}, {}]",
                self.start, self.end
            )));
        }
        if self.steps == 0 {
            return Err(HarnessError::InvalidGrid("steps must be >= 1".into()));
        }
        if self.steps == 1 && self.start != self.end {
            return Err(HarnessError::InvalidGrid(format!(
                "a 1-point grid needs start == end, got [{}, {}]",
                self.start, self.end
            )));
        }
        Ok(())
    }

    #[must_use]
    pub fn points(&self) -> Vec<f64> {
        if self.steps == 1 {
            return vec![self.start];
        }
        let n = (self.steps - 1) as f64;
        let mut pts: Vec<f64> = (0..self.steps)
            .map(|i| self.start + (self.end - self.start) * i as f64 / n)
            .collect();
        pts[self.steps - 1] = self.end; // endpoint exact
        pts
    }
}

/// What each sweep cell measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepMetric {
    /// Teacher-relative output error of the real compressed reconstruction.
    RelativeOutputError,
    /// l2 norm of the pre-codec residual `W_t - W_pre - lambda1*tau`
    /// (independent of `lambda2`).
    PreCodecResidualNorm,
}

impl fmt::Display for SweepMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepMetric::RelativeOutputError => "rel_out_err",
            SweepMetric::PreCodecResidualNorm => "pre_codec_residual_l2",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepOptions {
    /// Shift along the raw average delta instead of its BitDelta decode.
    pub uncompressed_base: bool,
    pub metric: SweepMetric,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            uncompressed_base: false,
            metric: SweepMetric::RelativeOutputError,
        }
    }
}

/// A filled modulator grid for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub task_id: String,
    pub codec: CodecSpec,
    pub options: SweepOptions,
    pub seed: u64,
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
    /// Row-major `values[i1 * lambda2.len() + i2]`.
    pub values: Vec<f64>,
    /// Grid indices of the exact `(lambda1=0, lambda2=1)` cell, if present.
    pub vanilla_cell: Option<(usize, usize)>,
}

impl SweepGrid {
    #[must_use]
    pub fn value(&self, i1: usize, i2: usize) -> f64 {
        self.values[i1 * self.lambda2.len() + i2]
    }

    /// Indices of the smallest cell (ties resolved toward lower indices).
    #[must_use]
    pub fn argmin(&self) -> (usize, usize) {
        let mut best = (0, 0);
        let mut best_v = f64::INFINITY;
        for i1 in 0..self.lambda1.len() {
            for i2 in 0..self.lambda2.len() {
                let v = self.value(i1, i2);
                if v < best_v {
                    best_v = v;
                    best = (i1, i2);
                }
            }
        }
        best
    }

    /// Matrix CSV: axis headers on the first row/column, plus a comment line
    /// locating the vanilla cell.
    #[must_use]
    pub fn to_csv(&self) -> String {
        let mut s = csv_header("sweep", self.seed);
        let vanilla = match self.vanilla_cell {
            Some((i, j)) => format!("{i},{j}"),
            None => "none".into(),
        };
        let _ = writeln!(
            s,
            "# task={}, codec={}, sparse_rate={}, uncompressed_base={}, metric={}, vanilla_cell={}",
            self.task_id,
            self.codec.codec(),
            format_f64(self.codec.sparse_rate()),
            self.options.uncompressed_base,
            self.options.metric,
            vanilla
        );
        s.push_str("lambda1\\lambda2");
        for l2 in &self.lambda2 {
            let _ = write!(s, ",{}", format_f64(*l2));
        }
        s.push('\n');
        for (i1, l1) in self.lambda1.iter().enumerate() {
            let _ = write!(s, "{}", format_f64(*l1));
            for i2 in 0..self.lambda2.len() {
                let _ = write!(s, ",{}", format_f64(self.value(i1, i2)));
            }
            s.push('\n');
        }
        s
    }
}

/// Evaluate the chosen metric on the full Cartesian modulator grid for one
/// task, building a real artifact per cell.
pub fn sweep_lambda_grid(
    suite: &SyntheticSuite,
    task_id: &str,
    codec: &CodecSpec,
    grid1: &GridSpec,
    grid2: &GridSpec,
    options: SweepOptions,
) -> Result<SweepGrid, HarnessError> {
    grid1.validate()?;
    grid2.validate()?;
    let task = suite.task(task_id)?;
    let codec_t = task_codec(codec, task_id);
    let base = suite.base_vector()?;
    let avg = average_model(&suite.finetuned_models())?;
    let lambda1 = grid1.points();
    let lambda2 = grid2.points();

    // Pre-codec residual direction for the norm metric, in f64.
    let pre_f = pack_f64(&suite.pretrained);
    let ft_f = pack_f64(&task.finetuned);
    let dir_f: Vec<f64> = if options.uncompressed_base {
        pack_f64(&avg)
            .iter()
            .zip(&pre_f)
            .map(|(a, p)| a - p)
            .collect()
    } else {
        pack_f64(base.decoded())
    };

    let cells: Vec<(usize, usize)> = (0..lambda1.len())
        .flat_map(|i1| (0..lambda2.len()).map(move |i2| (i1, i2)))
        .collect();
    let values: Vec<f64> = cells
        .par_iter()
        .map(|&(i1, i2)| -> Result<f64, HarnessError> {
            let (l1, l2) = (lambda1[i1], lambda2[i2]);
            match options.metric {
                SweepMetric::PreCodecResidualNorm => {
                    let mut acc = 0.0f64;
                    for ((&f, &p), &d) in ft_f.iter().zip(&pre_f).zip(&dir_f) {
                        let r = (f - p) - l1 * d;
                        acc += r * r;
                    }
                    Ok(acc.sqrt())
                }
                SweepMetric::RelativeOutputError => {
                    let delta = if options.uncompressed_base {
                        compress_task_uncompressed_base(
                            &task.finetuned,
                            &suite.pretrained,
                            &avg,
                            l1,
                            &codec_t,
                        )?
                    } else {
                        compress_task(&task.finetuned, &suite.pretrained, &base, l1, &codec_t)?
                    };
                    let artifact = TaskArtifact {
                        task_id: task.id.clone(),
                        delta,
                        lambda1: l1,
                        lambda2: l2,
                        provenance: TrainingProvenance::untrained(),
                    };
                    let recon = if options.uncompressed_base {
                        reconstruct_uncompressed_base(&suite.pretrained, &avg, &artifact)?
                    } else {
                        reconstruct(&suite.pretrained, &base, &artifact)?
                    };
                    Ok(evaluate(&recon, suite, task_id)?.relative_output_error)
                }
            }
        })
        .collect::<Result<Vec<_>, _>>()?;

    let vanilla_cell = lambda1
        .iter()
        .position(|&v| v == 0.0)
        .zip(lambda2.iter().position(|&v| v == 1.0));
    Ok(SweepGrid {
        task_id: task_id.to_owned(),
        codec: codec_t,
        options,
        seed: suite.config.seed,
        lambda1,
        lambda2,
        values,
        vanilla_cell,
    })
}

// ── Initialization ablation ─────────────────────────────────────────────────

/// Paired per-task losses at the comparison step.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub task_id: String,
    pub loss_a: f64,
    pub loss_b: f64,
}

/// Full traces for one task's two arms.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationTraces {
    pub task_id: String,
    pub a: Vec<TraceRow>,
    pub b: Vec<TraceRow>,
}

/// Paired comparison of two initialization strategies at a fixed step.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationOutcome {
    pub strategy_a: InitStrategy,
    pub strategy_b: InitStrategy,
    /// Step at which losses are compared: `min(100, steps)`.
    pub step: usize,
    pub rows: Vec<AblationRow>,
    /// Fraction of tasks with `loss_a <= loss_b`.
    pub fraction_a_le_b: f64,
    pub traces: Vec<AblationTraces>,
    pub seed: u64,
}

impl AblationOutcome {
    #[must_use]
    pub fn to_csv(&self) -> String {
        let mut s = csv_header("ablation", self.seed);
        let _ = writeln!(
            s,
            "# strategy_a={}, strategy_b={}, step={}, fraction_a_le_b={}",
            strategy_name(self.strategy_a),
            strategy_name(self.strategy_b),
            self.step,
            format_f64(self.fraction_a_le_b)
        );
        s.push_str("task_id,loss_a,loss_b,a_le_b\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                r.task_id,
                format_f64(r.loss_a),
                format_f64(r.loss_b),
                u8::from(r.loss_a <= r.loss_b)
            );
        }
        s
    }
}

fn strategy_name(s: InitStrategy) -> &'static str {
    match s {
        InitStrategy::Projection => "projection",
        InitStrategy::Ones => "ones",
    }
}

/// Train every task under two initialization strategies with identical seeds
/// and compare losses at step `min(100, cfg.steps)`.
pub fn ablation_init(
    suite: &SyntheticSuite,
    codec: &CodecSpec,
    train_cfg: &TrainConfig,
    strategy_a: InitStrategy,
    strategy_b: InitStrategy,
) -> Result<AblationOutcome, HarnessError> {
    let base = suite.base_vector()?;
    let step = 100.min(train_cfg.steps);
    let per_task: Vec<(AblationRow, AblationTraces)> = suite
        .tasks
        .par_iter()
        .map(|task| -> Result<_, HarnessError> {
            let codec_t = task_codec(codec, &task.id);
            let cfg_t = task_train_config(train_cfg, &task.id);
            let run = |strategy| -> Result<Vec<TraceRow>, HarnessError> {
                Ok(train_task_with_init(
                    &task.id,
                    &suite.model,
                    &suite.pretrained,
                    &task.finetuned,
                    &base,
                    &codec_t,
                    &task.pool,
                    &cfg_t,
                    strategy,
                )?
                .trace)
            };
            let a = run(strategy_a)?;
            let b = run(strategy_b)?;
            let row = AblationRow {
                task_id: task.id.clone(),
                loss_a: a[step].loss,
                loss_b: b[step].loss,
            };
            Ok((
                row,
                AblationTraces {
                    task_id: task.id.clone(),
                    a,
                    b,
                },
            ))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let (rows, traces): (Vec<_>, Vec<_>) = per_task.into_iter().unzip();
    let wins = rows.iter().filter(|r| r.loss_a <= r.loss_b).count();
    Ok(AblationOutcome {
        strategy_a,
        strategy_b,
        step,
        fraction_a_le_b: wins as f64 / rows.len() as f64,
        rows,
        traces,
        seed: suite.config.seed,
    })
}

// ── Storage accounting ──────────────────────────────────────────────────────

/// Bits per 64-bit modulator pair stored per task.
pub const LAMBDA_BITS_PER_TASK: u64 = 128;

/// Storage accounting for one suite's artifacts.
#[derive(Debug, Clone, PartialEq)]
pub struct StorageReport {
    pub seed: u64,
    /// `(task_id, container bits)` per task.
    pub rows: Vec<(String, u64)>,
    pub base_bits: u64,
    /// Total modulator overhead (`128 * tasks`).
    pub lambda_bits: u64,
    /// Vanilla total: the same per-task containers with no shared state.
    pub vanilla_total: u64,
    /// Shifted-base total: containers + base vector + modulators.
    pub dbms_total: u64,
    pub ratio: f64,
}

impl StorageReport {
    #[must_use]
    pub fn to_csv(&self) -> String {
        let mut s = csv_header("storage", self.seed);
        let _ = writeln!(s, "# ratio={}", format_f64(self.ratio));
        s.push_str("item,bits\n");
        for (id, bits) in &self.rows {
            let _ = writeln!(s, "{id},{bits}");
        }
        let _ = writeln!(s, "base_vector,{}", self.base_bits);
        let _ = writeln!(s, "lambda_overhead_total,{}", self.lambda_bits);
        let _ = writeln!(s, "vanilla_total,{}", self.vanilla_total);
        let _ = writeln!(s, "dbms_total,{}", self.dbms_total);
        s
    }
}

/// Account storage for a set of task artifacts sharing one base vector.
///
/// The vanilla total is the sum of the per-task container bits: a DARE
/// container's size depends only on its value-independent mask and a
/// BitDelta container's only on tensor shapes, so the `lambda1 = 0` path
/// produces byte-identical container sizes.
#[must_use]
pub fn storage_report(artifacts: &[TaskArtifact], base: &BaseVector, seed: u64) -> StorageReport {
    let rows: Vec<(String, u64)> = artifacts
        .iter()
        .map(|a| (a.task_id.clone(), storage_bits(&a.delta)))
        .collect();
    let task_total: u64 = rows.iter().map(|(_, b)| b).sum();
    let base_bits = storage_bits(base.compressed());
    let lambda_bits = LAMBDA_BITS_PER_TASK * artifacts.len() as u64;
    let dbms_total = task_total + base_bits + lambda_bits;
    StorageReport {
        seed,
        rows,
        base_bits,
        lambda_bits,
        vanilla_total: task_total,
        dbms_total,
        ratio: dbms_total as f64 / task_total as f64,
    }
}

// ── Shared CSV helpers ──────────────────────────────────────────────────────

fn csv_header(kind: &str, seed: u64) -> String {
    format!("# deltashift-report v1, kind={kind}, seed={seed}\n")
}
