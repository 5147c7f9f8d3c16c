//! Per-task training of the two scalar modulators.
//!
//! Given a pretrained model, a finetuned model, the shared base vector, and a
//! codec, the modulators `(lambda1, lambda2)` are fitted by minimizing the
//! mean-squared difference between the reconstructed model's outputs and the
//! true finetuned model's outputs on a sampled batch of unlabeled inputs:
//!
//! ```text
//! minimize  mean_x || student(x; lambda1, lambda2) - teacher(x) ||^2
//! student weights = W_pre + lambda1 * tau_base + lambda2 * C(W_t - W_pre - lambda1 * tau_base)
//! ```
//!
//! The optimizer is a hand-rolled bias-corrected Adam over the two scalars.
//! Gradients come either from central finite differences (the default — with
//! two parameters, four extra loss evaluations per step are cheap) or from an
//! exact chain rule that treats codec sign patterns and masks as constant at
//! the current point.
//!
//! The whole loss path runs in f64: the DARE mask is fixed by the codec seed,
//! and BitDelta's scale is recomputed per evaluation, so the surface is smooth
//! enough (exactly linear in `lambda1` for DARE, piecewise-smooth for
//! BitDelta) for finite differences at step `h = 1e-4 * max(1, |lambda|)`.

use thiserror::Error;

use crate::codec::{kept_indices, CodecError, CodecSpec};
use crate::dbms::{
    compress_task, format_f64, init_lambda1, BaseVector, DbmsError, TaskArtifact,
    TrainingProvenance,
};
use crate::forward::{
    mse, pack_f64, Batch, CompiledModel, FlatLayout, ForwardError, ForwardModel, Matrix,
};
use crate::rng::SplitMix64;
use crate::tensor::{TensorError, TensorMap};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("sampled training batch is empty")]
    EmptySample,
    #[error("loss became non-finite at step {step}; partial trace preserved")]
    NonFiniteLoss { step: usize, trace: Vec<TraceRow> },
    #[error("non-finite loss {0}")]
    NonFinite(f64),
    #[error(transparent)]
    Forward(#[from] ForwardError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Dbms(#[from] DbmsError),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// How modulator gradients are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientMode {
    /// Central differences on the loss, four evaluations per step.
    FiniteDiff,
    /// Exact chain rule with codec masks/signs held constant at the point.
    Analytic,
}

/// How the modulators are initialized before training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitStrategy {
    /// `lambda1` from the l2-optimal projection, `lambda2 = 1`.
    Projection,
    /// `lambda1 = lambda2 = 1`.
    Ones,
}

/// Training-loop configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    /// Optimizer steps (must be >= 1).
    pub steps: usize,
    /// Adam learning rate.
    pub lr: f64,
    /// Fraction of the input pool sampled (without replacement) for training.
    pub sample_fraction: f64,
    /// Optional cap on the training batch: the first `batch_size` rows of the
    /// sample are used, fixed across steps. `None` uses the whole sample.
    pub batch_size: Option<usize>,
    pub mode: GradientMode,
    /// Relative finite-difference step; per-coordinate `h = fd_step * max(1, |lambda|)`.
    pub fd_step: f64,
    /// Seed for pool sampling.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 1e-4,
            sample_fraction: 0.1,
            batch_size: None,
            mode: GradientMode::FiniteDiff,
            fd_step: 1e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.steps == 0 {
            return Err(TrainError::InvalidConfig("steps must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(TrainError::InvalidConfig(format!(
                "lr must be positive and finite, got {}",
                self.lr
            )));
        }
        if !(self.sample_fraction.is_finite()
            && self.sample_fraction > 0.0
            && self.sample_fraction <= 1.0)
        {
            return Err(TrainError::InvalidConfig(format!(
                "sample_fraction must lie in (0, 1], got {}",
                self.sample_fraction
            )));
        }
        if self.batch_size == Some(0) {
            return Err(TrainError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.fd_step.is_finite() && self.fd_step > 0.0) {
            return Err(TrainError::InvalidConfig(format!(
                "fd_step must be positive and finite, got {}",
                self.fd_step
            )));
        }
        Ok(())
    }
}

// ── Adam ────────────────────────────────────────────────────────────────────

/// Bias-corrected Adam state for the two modulators.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: [f64; 2],
    v: [f64; 2],
    t: u64,
}

impl AdamState {
    #[must_use]
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: [0.0; 2],
            v: [0.0; 2],
            t: 0,
        }
    }

    #[must_use]
    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update of both modulators in place.
pub fn adam_step(state: &mut AdamState, params: &mut [f64; 2], grads: [f64; 2]) {
    state.t += 1;
    let t = state.t as i32;
    for j in 0..2 {
        let g = grads[j];
        state.m[j] = state.beta1 * state.m[j] + (1.0 - state.beta1) * g;
        state.v[j] = state.beta2 * state.v[j] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[j] / (1.0 - state.beta1.powi(t));
        let v_hat = state.v[j] / (1.0 - state.beta2.powi(t));
        params[j] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
}

// ── Loss context ────────────────────────────────────────────────────────────

/// Codec behavior along the flattened weight vector, in f64.
enum CodecModel {
    /// Fixed keep mask and `1/(1-p)` rescale; exactly linear in `lambda1`.
    Dare { keep: Vec<bool>, rescale: f64 },
    /// Scale and signs recomputed from the residual at each point.
    BitDelta,
}

/// Everything `loss_at` needs, precomputed once per task: flattened f64
/// weights, the base direction, the fixed codec randomness, the compiled
/// model, and the teacher's outputs on the training batch.
pub struct LossContext {
    compiled: CompiledModel,
    wpre: Vec<f64>,
    delta: Vec<f64>,
    tau: Vec<f64>,
    codec: CodecModel,
    teacher: Matrix,
    batch: Batch,
}

impl LossContext {
    /// Context against a compressed base vector.
    pub fn new(
        model: &ForwardModel,
        pretrained: &TensorMap,
        finetuned: &TensorMap,
        base: &BaseVector,
        codec: &CodecSpec,
        batch: Batch,
    ) -> Result<Self, TrainError> {
        pretrained.check_aligned(base.decoded())?;
        Self::from_parts(model, pretrained, finetuned, pack_f64(base.decoded()), codec, batch)
    }

    /// Context against the raw, uncompressed average direction
    /// `W_avg - W_pre` instead of its BitDelta-decoded form.
    pub fn new_uncompressed_base(
        model: &ForwardModel,
        pretrained: &TensorMap,
        finetuned: &TensorMap,
        avg_model: &TensorMap,
        codec: &CodecSpec,
        batch: Batch,
    ) -> Result<Self, TrainError> {
        pretrained.check_aligned(avg_model)?;
        let wpre = pack_f64(pretrained);
        let tau = pack_f64(avg_model)
            .iter()
            .zip(&wpre)
            .map(|(a, p)| a - p)
            .collect();
        Self::from_parts(model, pretrained, finetuned, tau, codec, batch)
    }

    fn from_parts(
        model: &ForwardModel,
        pretrained: &TensorMap,
        finetuned: &TensorMap,
        tau: Vec<f64>,
        codec: &CodecSpec,
        batch: Batch,
    ) -> Result<Self, TrainError> {
        finetuned.check_aligned(pretrained)?;
        let layout = FlatLayout::of(pretrained);
        let compiled = CompiledModel::compile(model, &layout)?;
        let wpre = pack_f64(pretrained);
        if wpre.is_empty() {
            return Err(TrainError::InvalidConfig("weight map is empty".into()));
        }
        let wt = pack_f64(finetuned);
        let delta: Vec<f64> = wt.iter().zip(&wpre).map(|(t, p)| t - p).collect();
        let codec = match codec {
            CodecSpec::Dare(cfg) => {
                cfg.validate()?;
                let mut keep = vec![false; wpre.len()];
                let mut off = 0;
                for t in pretrained.tensors() {
                    for i in kept_indices(t.name(), t.len(), *cfg) {
                        keep[off + i] = true;
                    }
                    off += t.len();
                }
                CodecModel::Dare {
                    keep,
                    rescale: 1.0 / (1.0 - cfg.sparse_rate),
                }
            }
            CodecSpec::BitDelta => CodecModel::BitDelta,
        };
        let teacher = compiled.forward_flat(&wt, &batch, None)?;
        Ok(Self {
            compiled,
            wpre,
            delta,
            tau,
            codec,
            teacher,
            batch,
        })
    }

    /// Rows in the (fixed) training batch.
    #[must_use]
    pub fn batch_rows(&self) -> usize {
        self.batch.rows()
    }

    /// The compressed-then-decoded delta at `lambda1`, elementwise in f64.
    fn coded_delta(&self, lambda1: f64) -> Vec<f64> {
        let n = self.wpre.len();
        let mut d = vec![0.0f64; n];
        match &self.codec {
            CodecModel::Dare { keep, rescale } => {
                for i in 0..n {
                    if keep[i] {
                        d[i] = rescale * (self.delta[i] - lambda1 * self.tau[i]);
                    }
                }
            }
            CodecModel::BitDelta => {
                let mut mean_abs = 0.0f64;
                for (dv, tv) in self.delta.iter().zip(&self.tau) {
                    mean_abs += (dv - lambda1 * tv).abs();
                }
                mean_abs /= n as f64;
                for ((out, dv), tv) in d.iter_mut().zip(&self.delta).zip(&self.tau) {
                    let r = dv - lambda1 * tv;
                    *out = if r > 0.0 { mean_abs } else { -mean_abs };
                }
            }
        }
        d
    }

    fn student_weights(&self, lambda1: f64, lambda2: f64, d: &[f64]) -> Vec<f64> {
        self.wpre
            .iter()
            .zip(&self.tau)
            .zip(d)
            .map(|((&p, &t), &di)| p + lambda1 * t + lambda2 * di)
            .collect()
    }

    /// Distillation loss at the given modulators: recompress the task delta
    /// at `lambda1`, reconstruct, and compare outputs against the teacher.
    pub fn loss_at(&self, lambda1: f64, lambda2: f64) -> Result<f64, TrainError> {
        let d = self.coded_delta(lambda1);
        let w = self.student_weights(lambda1, lambda2, &d);
        let out = self.compiled.forward_flat(&w, &self.batch, None)?;
        let loss = mse(&out, &self.teacher);
        if loss.is_finite() {
            Ok(loss)
        } else {
            Err(TrainError::NonFinite(loss))
        }
    }
}

// ── Gradients ───────────────────────────────────────────────────────────────

/// Modulator gradients at `(lambda1, lambda2)`.
///
/// `FiniteDiff` uses central differences with per-coordinate step
/// `fd_step * max(1, |lambda|)`. `Analytic` backpropagates the exact chain
/// rule, treating the DARE mask as the constant it is and BitDelta's sign
/// pattern as locally constant (straight-through) while differentiating the
/// scale's dependence on `lambda1` exactly.
pub fn gradient(
    ctx: &LossContext,
    lambda1: f64,
    lambda2: f64,
    mode: GradientMode,
    fd_step: f64,
) -> Result<(f64, f64), TrainError> {
    let (g1, g2) = match mode {
        GradientMode::FiniteDiff => {
            let h1 = fd_step * lambda1.abs().max(1.0);
            let h2 = fd_step * lambda2.abs().max(1.0);
            let g1 = (ctx.loss_at(lambda1 + h1, lambda2)? - ctx.loss_at(lambda1 - h1, lambda2)?)
                / (2.0 * h1);
            let g2 = (ctx.loss_at(lambda1, lambda2 + h2)? - ctx.loss_at(lambda1, lambda2 - h2)?)
                / (2.0 * h2);
            (g1, g2)
        }
        GradientMode::Analytic => {
            let d = ctx.coded_delta(lambda1);
            let w = ctx.student_weights(lambda1, lambda2, &d);
            let mut gw = vec![0.0f64; w.len()];
            ctx.compiled
                .loss_and_weight_grad(&w, &ctx.batch, &ctx.teacher, &mut gw)?;
            let mut g1 = 0.0f64;
            let mut g2 = 0.0f64;
            match &ctx.codec {
                CodecModel::Dare { keep, rescale } => {
                    // w_i = wpre_i + l1*tau_i + l2 * rescale*keep_i*(delta_i - l1*tau_i)
                    // dw_i/dl1 = tau_i * (1 - l2*rescale*keep_i); dw_i/dl2 = d_i
                    for i in 0..w.len() {
                        let m = if keep[i] { *rescale } else { 0.0 };
                        g1 += gw[i] * ctx.tau[i] * (1.0 - lambda2 * m);
                        g2 += gw[i] * d[i];
                    }
                }
                CodecModel::BitDelta => {
                    // d_i = alpha(l1) * s_i with alpha = mean_j |delta_j - l1*tau_j|,
                    // so dalpha/dl1 = -mean_j s_j*tau_j and (straight-through)
                    // dw_i/dl1 = tau_i - l2 * s_i * mean_j s_j*tau_j.
                    let n = w.len();
                    let mut mean_st = 0.0f64;
                    for i in 0..n {
                        let r = ctx.delta[i] - lambda1 * ctx.tau[i];
                        let s = if r > 0.0 { 1.0 } else { -1.0 };
                        mean_st += s * ctx.tau[i];
                    }
                    mean_st /= n as f64;
                    for i in 0..n {
                        let r = ctx.delta[i] - lambda1 * ctx.tau[i];
                        let s = if r > 0.0 { 1.0 } else { -1.0 };
                        g1 += gw[i] * (ctx.tau[i] - lambda2 * s * mean_st);
                        g2 += gw[i] * d[i];
                    }
                }
            }
            (g1, g2)
        }
    };
    if g1.is_finite() && g2.is_finite() {
        Ok((g1, g2))
    } else {
        Err(TrainError::NonFinite(if g1.is_finite() { g2 } else { g1 }))
    }
}

// ── Training loop ───────────────────────────────────────────────────────────

/// One row of the training trace: the modulators, loss, and gradients seen
/// at the start of `step` (the final row is a fresh evaluation at the
/// trained modulators).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub loss: f64,
    pub grad1: f64,
    pub grad2: f64,
}

/// Result of training one task: the final artifact and the full loss trace
/// (`steps + 1` rows).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub artifact: TaskArtifact,
    pub trace: Vec<TraceRow>,
}

/// Render a trace as CSV (`step,lambda1,lambda2,loss,grad1,grad2`) with
/// 17-significant-digit floats so reruns are byte-identical.
#[must_use]
pub fn trace_to_csv(rows: &[TraceRow]) -> String {
    let mut s = String::from("step,lambda1,lambda2,loss,grad1,grad2\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step,
            format_f64(r.lambda1),
            format_f64(r.lambda2),
            format_f64(r.loss),
            format_f64(r.grad1),
            format_f64(r.grad2),
        ));
    }
    s
}

/// Sample the training batch from the pool: `ceil(sample_fraction * rows)`
/// rows without replacement, then optionally truncated to `batch_size`.
pub(crate) fn sample_batch(pool: &Batch, cfg: &TrainConfig) -> Result<Batch, TrainError> {
    let count = ((cfg.sample_fraction * pool.rows() as f64).ceil() as usize).min(pool.rows());
    if count == 0 {
        return Err(TrainError::EmptySample);
    }
    let mut rng = SplitMix64::new(cfg.seed);
    let picked = rng.sample_indices(pool.rows(), count);
    let sample = pool.select_rows(&picked);
    Ok(match cfg.batch_size {
        Some(b) if b < sample.rows() => {
            let head: Vec<usize> = (0..b).collect();
            sample.select_rows(&head)
        }
        _ => sample,
    })
}

/// Train the modulators for one task with projection initialization and emit
/// the final artifact plus the per-step trace.
#[allow(clippy::too_many_arguments)]
pub fn train_task(
    task_id: &str,
    model: &ForwardModel,
    pretrained: &TensorMap,
    finetuned: &TensorMap,
    base: &BaseVector,
    codec: &CodecSpec,
    pool: &Batch,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    train_task_with_init(
        task_id,
        model,
        pretrained,
        finetuned,
        base,
        codec,
        pool,
        cfg,
        InitStrategy::Projection,
    )
}

/// [`train_task`] with an explicit initialization strategy.
#[allow(clippy::too_many_arguments)]
pub fn train_task_with_init(
    task_id: &str,
    model: &ForwardModel,
    pretrained: &TensorMap,
    finetuned: &TensorMap,
    base: &BaseVector,
    codec: &CodecSpec,
    pool: &Batch,
    cfg: &TrainConfig,
    init: InitStrategy,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let batch = sample_batch(pool, cfg)?;
    let ctx = LossContext::new(model, pretrained, finetuned, base, codec, batch)?;
    let (lambda1, lambda2) = match init {
        InitStrategy::Projection => (init_lambda1(finetuned, pretrained, base)?, 1.0),
        InitStrategy::Ones => (1.0, 1.0),
    };
    let (params, trace) = run_loop(&ctx, lambda1, lambda2, cfg)?;
    let delta = compress_task(finetuned, pretrained, base, params[0], codec)?;
    let final_loss = trace.last().map(|r| r.loss);
    Ok(TrainOutcome {
        artifact: TaskArtifact {
            task_id: task_id.to_owned(),
            delta,
            lambda1: params[0],
            lambda2: params[1],
            provenance: TrainingProvenance {
                steps: cfg.steps as u64,
                final_loss,
            },
        },
        trace,
    })
}

/// The bare optimizer loop over a prepared context; returns the trained
/// modulators and the trace with rows `0..=steps`.
pub fn run_loop(
    ctx: &LossContext,
    lambda1: f64,
    lambda2: f64,
    cfg: &TrainConfig,
) -> Result<([f64; 2], Vec<TraceRow>), TrainError> {
    cfg.validate()?;
    let mut params = [lambda1, lambda2];
    let mut adam = AdamState::new(cfg.lr);
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    for step in 0..=cfg.steps {
        let row = match evaluate_row(ctx, step, params, cfg) {
            Ok(row) => row,
            Err(TrainError::NonFinite(_)) => return Err(TrainError::NonFiniteLoss { step, trace }),
            Err(e) => return Err(e),
        };
        trace.push(row);
        if step < cfg.steps {
            adam_step(&mut adam, &mut params, [row.grad1, row.grad2]);
        }
    }
    Ok((params, trace))
}

fn evaluate_row(
    ctx: &LossContext,
    step: usize,
    params: [f64; 2],
    cfg: &TrainConfig,
) -> Result<TraceRow, TrainError> {
    let loss = ctx.loss_at(params[0], params[1])?;
    let (grad1, grad2) = gradient(ctx, params[0], params[1], cfg.mode, cfg.fd_step)?;
    Ok(TraceRow {
        step,
        lambda1: params[0],
        lambda2: params[1],
        loss,
        grad1,
        grad2,
    })
}
