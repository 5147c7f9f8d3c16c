//! Base-vector computation, the closed-form first modulator, shifted-base
//! compression, and reconstruction.
//!
//! Given a pretrained map `W_pre` and task maps `W_t`, the shared base vector
//! is the BitDelta compression of the average task delta; its decoded form
//! `tau` shifts the base before per-task compression:
//!
//! ```text
//! lambda1_init = <W_t - W_pre, tau> / <tau, tau>      (l2-optimal projection)
//! delta_t      = C(W_t - (W_pre + lambda1 * tau))
//! W_t'         = W_pre + lambda1 * tau + lambda2 * decode(delta_t)
//! ```
//!
//! With `lambda1 = 0, lambda2 = 1` every formula collapses to vanilla delta
//! compression against `W_pre`. A variant keeps the average delta uncompressed
//! ([`reconstruct_uncompressed_base`]) for isolating the effect of quantizing
//! the base direction itself.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::checkpoint::atomic_write;
use crate::codec::{
    bitdelta_compress, Codec, CodecError, CodecSpec, CompressedDelta, DareCodecConfig,
};
use crate::tensor::{dot, map_sub, Tensor, TensorError, TensorMap};

#[derive(Debug, Error)]
pub enum DbmsError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("cannot average an empty model list")]
    EmptyModelList,
    #[error("degenerate base vector: <tau, tau> = 0, no projection exists")]
    DegenerateBase,
    #[error("modulator must be finite, got {0}")]
    NonFiniteLambda(f64),
    #[error("base vector container must be bitdelta, got {0}")]
    WrongBaseCodec(Codec),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DbmsError + '_ {
    move |source| DbmsError::Io {
        path: path.to_owned(),
        source,
    }
}

// ── Base vector ─────────────────────────────────────────────────────────────

/// The shared base shift: a BitDelta-compressed average task delta plus its
/// decoded form, cached because every per-task operation consumes it densely.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseVector {
    compressed: CompressedDelta,
    decoded: TensorMap,
    task_count: usize,
}

impl BaseVector {
    /// Wrap an existing BitDelta container; decodes and caches it.
    pub fn from_compressed(
        compressed: CompressedDelta,
        task_count: usize,
    ) -> Result<Self, DbmsError> {
        if compressed.codec() != Codec::BitDelta {
            return Err(DbmsError::WrongBaseCodec(compressed.codec()));
        }
        let decoded = compressed.decode()?;
        Ok(Self {
            compressed,
            decoded,
            task_count,
        })
    }

    #[must_use]
    pub fn compressed(&self) -> &CompressedDelta {
        &self.compressed
    }

    /// Decoded base direction `tau`, aligned with the pretrained map.
    #[must_use]
    pub fn decoded(&self) -> &TensorMap {
        &self.decoded
    }

    /// How many task models went into the average.
    #[must_use]
    pub fn task_count(&self) -> usize {
        self.task_count
    }

    /// Write the codec container and a `key=value` manifest.
    pub fn save(&self, container: &Path, manifest: &Path) -> Result<(), DbmsError> {
        self.compressed.save(container)?;
        let mut text = String::new();
        let _ = writeln!(text, "kind=base_vector");
        let _ = writeln!(text, "codec=bitdelta");
        let _ = writeln!(text, "task_count={}", self.task_count);
        atomic_write(manifest, text.as_bytes()).map_err(io_err(manifest))
    }

    /// Load a container plus manifest written by [`BaseVector::save`].
    pub fn load(container: &Path, manifest: &Path) -> Result<Self, DbmsError> {
        let compressed = CompressedDelta::load(container)?;
        let text = std::fs::read_to_string(manifest).map_err(io_err(manifest))?;
        let fields = parse_manifest(&text)?;
        expect_keys(&fields, &["kind", "codec", "task_count"])?;
        if fields.get_str("kind")? != "base_vector" {
            return Err(DbmsError::Manifest(format!(
                "kind={:?}, expected base_vector",
                fields.get_str("kind")?
            )));
        }
        if fields.get_str("codec")? != "bitdelta" {
            return Err(DbmsError::Manifest(format!(
                "codec={:?}, expected bitdelta",
                fields.get_str("codec")?
            )));
        }
        let task_count = fields
            .get_str("task_count")?
            .parse::<usize>()
            .map_err(|e| DbmsError::Manifest(format!("task_count: {e}")))?;
        Self::from_compressed(compressed, task_count)
    }
}

/// Average the task deltas (64-bit accumulation) and BitDelta-compress them.
pub fn compute_base_vector(
    models: &[TensorMap],
    pretrained: &TensorMap,
) -> Result<BaseVector, DbmsError> {
    if models.is_empty() {
        return Err(DbmsError::EmptyModelList);
    }
    for m in models {
        pretrained.check_aligned(m)?;
    }
    let n = models.len() as f64;
    let mut avg_tensors = Vec::with_capacity(pretrained.len());
    for (ti, pre_t) in pretrained.tensors().iter().enumerate() {
        let mut acc = vec![0.0f64; pre_t.len()];
        for m in models {
            let data = m.tensors()[ti].data();
            for (a, &v) in acc.iter_mut().zip(data) {
                *a += f64::from(v);
            }
        }
        let data: Vec<f32> = acc
            .iter()
            .zip(pre_t.data())
            .map(|(&sum, &p)| (sum / n - f64::from(p)) as f32)
            .collect();
        avg_tensors.push(Tensor::new(pre_t.name().to_owned(), pre_t.shape().to_vec(), data)?);
    }
    let avg_delta = TensorMap::from_tensors(avg_tensors)?;
    let compressed = bitdelta_compress(&avg_delta)?;
    BaseVector::from_compressed(compressed, models.len())
}

/// Elementwise mean of the given models (64-bit accumulation): the raw
/// `W_avg` consumed by the uncompressed-base variant.
pub fn average_model(models: &[TensorMap]) -> Result<TensorMap, DbmsError> {
    let Some(first) = models.first() else {
        return Err(DbmsError::EmptyModelList);
    };
    for m in &models[1..] {
        first.check_aligned(m)?;
    }
    let n = models.len() as f64;
    let mut tensors = Vec::with_capacity(first.len());
    for (ti, t0) in first.tensors().iter().enumerate() {
        let mut acc = vec![0.0f64; t0.len()];
        for m in models {
            for (a, &v) in acc.iter_mut().zip(m.tensors()[ti].data()) {
                *a += f64::from(v);
            }
        }
        let data: Vec<f32> = acc.iter().map(|&s| (s / n) as f32).collect();
        tensors.push(Tensor::new(t0.name().to_owned(), t0.shape().to_vec(), data)?);
    }
    Ok(TensorMap::from_tensors(tensors)?)
}

// ── Closed-form first modulator ─────────────────────────────────────────────

fn delta_f64(finetuned: &TensorMap, pretrained: &TensorMap) -> Result<Vec<f64>, TensorError> {
    finetuned.check_aligned(pretrained)?;
    Ok(finetuned
        .flatten()
        .iter()
        .zip(pretrained.flatten().iter())
        .map(|(&f, &p)| f64::from(f) - f64::from(p))
        .collect())
}

/// `lambda1 = <W_t - W_pre, tau> / <tau, tau>`, the scale of the base shift
/// that minimizes the l2 norm of the remaining residual.
pub fn init_lambda1(
    finetuned: &TensorMap,
    pretrained: &TensorMap,
    base: &BaseVector,
) -> Result<f64, DbmsError> {
    init_lambda1_filtered(finetuned, pretrained, base, |_| true)
}

/// [`init_lambda1`] restricted to tensors whose name satisfies `keep`.
pub fn init_lambda1_filtered(
    finetuned: &TensorMap,
    pretrained: &TensorMap,
    base: &BaseVector,
    keep: impl Fn(&str) -> bool,
) -> Result<f64, DbmsError> {
    finetuned.check_aligned(pretrained)?;
    pretrained.check_aligned(base.decoded())?;
    let ft = finetuned.flatten_filtered(&keep);
    let pre = pretrained.flatten_filtered(&keep);
    let tau = base.decoded().flatten_filtered(&keep);
    let denom = dot(&tau, &tau)?;
    if denom == 0.0 {
        return Err(DbmsError::DegenerateBase);
    }
    let mut numer = 0.0f64;
    for ((&f, &p), &t) in ft.iter().zip(&pre).zip(&tau) {
        numer += (f64::from(f) - f64::from(p)) * f64::from(t);
    }
    Ok(numer / denom)
}

// ── Shift, compress, reconstruct ────────────────────────────────────────────

fn check_lambda(l: f64) -> Result<(), DbmsError> {
    if l.is_finite() {
        Ok(())
    } else {
        Err(DbmsError::NonFiniteLambda(l))
    }
}

fn shift_by(
    pretrained: &TensorMap,
    direction: &TensorMap,
    lambda1: f64,
) -> Result<TensorMap, DbmsError> {
    check_lambda(lambda1)?;
    pretrained.check_aligned(direction)?;
    // lambda1 = 0 must leave the pretrained map bit-for-bit unchanged (the
    // vanilla paradigm); `w + 0.0 * tau` would turn -0.0 into +0.0.
    if lambda1 == 0.0 {
        return Ok(pretrained.clone());
    }
    let mut tensors = Vec::with_capacity(pretrained.len());
    for (pre_t, dir_t) in pretrained.tensors().iter().zip(direction.tensors()) {
        let data: Vec<f32> = pre_t
            .data()
            .iter()
            .zip(dir_t.data())
            .map(|(&p, &t)| (f64::from(p) + lambda1 * f64::from(t)) as f32)
            .collect();
        tensors.push(Tensor::new(pre_t.name().to_owned(), pre_t.shape().to_vec(), data)?);
    }
    Ok(TensorMap::from_tensors(tensors)?)
}

/// `W_pre + lambda1 * tau` with the decoded base direction.
pub fn shifted_base(
    pretrained: &TensorMap,
    base: &BaseVector,
    lambda1: f64,
) -> Result<TensorMap, DbmsError> {
    shift_by(pretrained, base.decoded(), lambda1)
}

/// `W_pre + lambda1 * (W_avg - W_pre)` with the raw, uncompressed average.
pub fn shifted_base_uncompressed(
    pretrained: &TensorMap,
    avg_model: &TensorMap,
    lambda1: f64,
) -> Result<TensorMap, DbmsError> {
    let direction = map_sub(avg_model, pretrained)?;
    shift_by(pretrained, &direction, lambda1)
}

/// Compress the residual of `finetuned` against the shifted base.
pub fn compress_task(
    finetuned: &TensorMap,
    pretrained: &TensorMap,
    base: &BaseVector,
    lambda1: f64,
    codec: &CodecSpec,
) -> Result<CompressedDelta, DbmsError> {
    let shifted = shifted_base(pretrained, base, lambda1)?;
    let delta = map_sub(finetuned, &shifted)?;
    Ok(codec.compress(&delta)?)
}

/// [`compress_task`] against the raw average direction instead of the
/// BitDelta-decoded one.
pub fn compress_task_uncompressed_base(
    finetuned: &TensorMap,
    pretrained: &TensorMap,
    avg_model: &TensorMap,
    lambda1: f64,
    codec: &CodecSpec,
) -> Result<CompressedDelta, DbmsError> {
    let shifted = shifted_base_uncompressed(pretrained, avg_model, lambda1)?;
    let delta = map_sub(finetuned, &shifted)?;
    Ok(codec.compress(&delta)?)
}

// ── Task artifacts ──────────────────────────────────────────────────────────

/// Provenance recorded next to an artifact's modulators.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingProvenance {
    /// Optimizer steps applied to the modulators (0 = closed-form init only).
    pub steps: u64,
    /// Distillation loss at the final modulators, if training evaluated one.
    pub final_loss: Option<f64>,
}

impl TrainingProvenance {
    #[must_use]
    pub fn untrained() -> Self {
        Self {
            steps: 0,
            final_loss: None,
        }
    }
}

/// Everything needed to reconstruct one task: the compressed residual and the
/// two scalar modulators.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskArtifact {
    pub task_id: String,
    pub delta: CompressedDelta,
    pub lambda1: f64,
    pub lambda2: f64,
    pub provenance: TrainingProvenance,
}

/// 17-significant-digit decimal rendering; parses back to the same f64 bits.
pub(crate) fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

impl TaskArtifact {
    /// Write the codec container and a `key=value` manifest.
    pub fn save(&self, container: &Path, manifest: &Path) -> Result<(), DbmsError> {
        self.delta.save(container)?;
        let (sparse_rate, seed) = match &self.delta {
            CompressedDelta::Dare(d) => (d.config.sparse_rate, d.config.seed),
            CompressedDelta::BitDelta(_) => (0.0, 0),
        };
        let mut text = String::new();
        let _ = writeln!(text, "task_id={}", self.task_id);
        let _ = writeln!(text, "lambda1={}", format_f64(self.lambda1));
        let _ = writeln!(text, "lambda2={}", format_f64(self.lambda2));
        let _ = writeln!(text, "codec={}", self.delta.codec());
        let _ = writeln!(text, "sparse_rate={}", format_f64(sparse_rate));
        let _ = writeln!(text, "seed={seed}");
        let _ = writeln!(text, "steps={}", self.provenance.steps);
        let _ = writeln!(
            text,
            "final_loss={}",
            match self.provenance.final_loss {
                Some(l) => format_f64(l),
                None => "none".to_owned(),
            }
        );
        atomic_write(manifest, text.as_bytes()).map_err(io_err(manifest))
    }

    /// Load a container plus manifest written by [`TaskArtifact::save`],
    /// cross-checking that the manifest's codec fields match the container.
    pub fn load(container: &Path, manifest: &Path) -> Result<Self, DbmsError> {
        let delta = CompressedDelta::load(container)?;
        let text = std::fs::read_to_string(manifest).map_err(io_err(manifest))?;
        let fields = parse_manifest(&text)?;
        expect_keys(
            &fields,
            &[
                "task_id",
                "lambda1",
                "lambda2",
                "codec",
                "sparse_rate",
                "seed",
                "steps",
                "final_loss",
            ],
        )?;
        let task_id = fields.get_str("task_id")?.to_owned();
        if task_id.is_empty() {
            return Err(DbmsError::Manifest("task_id is empty".into()));
        }
        let lambda1 = fields.f64("lambda1")?;
        let lambda2 = fields.f64("lambda2")?;
        check_lambda(lambda1)?;
        check_lambda(lambda2)?;
        let codec: Codec = fields
            .get_str("codec")?
            .parse()
            .map_err(DbmsError::Manifest)?;
        if codec != delta.codec() {
            return Err(DbmsError::Manifest(format!(
                "manifest codec {codec} does not match container codec {}",
                delta.codec()
            )));
        }
        let sparse_rate = fields.f64("sparse_rate")?;
        let seed = fields
            .get_str("seed")?
            .parse::<u64>()
            .map_err(|e| DbmsError::Manifest(format!("seed: {e}")))?;
        if let CompressedDelta::Dare(d) = &delta {
            let expect = DareCodecConfig { sparse_rate, seed };
            if expect != d.config {
                return Err(DbmsError::Manifest(format!(
                    "manifest codec config {expect:?} does not match container {:?}",
                    d.config
                )));
            }
        }
        let steps = fields
            .get_str("steps")?
            .parse::<u64>()
            .map_err(|e| DbmsError::Manifest(format!("steps: {e}")))?;
        let final_loss = match fields.get_str("final_loss")? {
            "none" => None,
            s => Some(
                s.parse::<f64>()
                    .map_err(|e| DbmsError::Manifest(format!("final_loss: {e}")))?,
            ),
        };
        Ok(Self {
            task_id,
            delta,
            lambda1,
            lambda2,
            provenance: TrainingProvenance { steps, final_loss },
        })
    }
}

struct ManifestFields(Vec<(String, String)>);

impl ManifestFields {
    fn get_str(&self, key: &str) -> Result<&str, DbmsError> {
        self.0
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| DbmsError::Manifest(format!("missing key {key:?}")))
    }

    fn f64(&self, key: &str) -> Result<f64, DbmsError> {
        self.get_str(key)?
            .parse::<f64>()
            .map_err(|e| DbmsError::Manifest(format!("{key}: {e}")))
    }
}

fn parse_manifest(text: &str) -> Result<ManifestFields, DbmsError> {
    let mut fields = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(DbmsError::Manifest(format!(
                "line {}: expected key=value, got {line:?}",
                lineno + 1
            )));
        };
        if fields.iter().any(|(existing, _)| existing == k) {
            return Err(DbmsError::Manifest(format!("duplicate key {k:?}")));
        }
        fields.push((k.to_owned(), v.to_owned()));
    }
    Ok(ManifestFields(fields))
}

fn expect_keys(fields: &ManifestFields, keys: &[&str]) -> Result<(), DbmsError> {
    for key in keys {
        fields.get_str(key)?;
    }
    for (k, _) in &fields.0 {
        if !keys.contains(&k.as_str()) {
            return Err(DbmsError::Manifest(format!("unknown key {k:?}")));
        }
    }
    Ok(())
}

// ── Reconstruction ──────────────────────────────────────────────────────────

fn reconstruct_with(
    pretrained: &TensorMap,
    direction: Option<&TensorMap>, // None: no shift term
    artifact: &TaskArtifact,
) -> Result<TensorMap, DbmsError> {
    check_lambda(artifact.lambda1)?;
    check_lambda(artifact.lambda2)?;
    let decoded = artifact.delta.decode()?;
    pretrained.check_aligned(&decoded)?;
    if let Some(d) = direction {
        pretrained.check_aligned(d)?;
    }
    let mut tensors = Vec::with_capacity(pretrained.len());
    for (ti, pre_t) in pretrained.tensors().iter().enumerate() {
        let dec_t = decoded.tensors()[ti].data();
        let dir_t = direction.map(|d| d.tensors()[ti].data());
        let data: Vec<f32> = pre_t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                let shift = match dir_t {
                    Some(dir) => artifact.lambda1 * f64::from(dir[i]),
                    None => 0.0,
                };
                (f64::from(p) + shift + artifact.lambda2 * f64::from(dec_t[i])) as f32
            })
            .collect();
        tensors.push(Tensor::new(pre_t.name().to_owned(), pre_t.shape().to_vec(), data)?);
    }
    Ok(TensorMap::from_tensors(tensors)?)
}

/// `W_pre + lambda1 * tau + lambda2 * decode(delta)`.
pub fn reconstruct(
    pretrained: &TensorMap,
    base: &BaseVector,
    artifact: &TaskArtifact,
) -> Result<TensorMap, DbmsError> {
    let dir = if artifact.lambda1 == 0.0 {
        None
    } else {
        Some(base.decoded())
    };
    reconstruct_with(pretrained, dir, artifact)
}

/// Reconstruction against the raw average model: the shift term uses
/// `W_avg - W_pre` directly instead of its BitDelta decode.
pub fn reconstruct_uncompressed_base(
    pretrained: &TensorMap,
    avg_model: &TensorMap,
    artifact: &TaskArtifact,
) -> Result<TensorMap, DbmsError> {
    let dir;
    let direction = if artifact.lambda1 == 0.0 {
        None
    } else {
        dir = map_sub(avg_model, pretrained)?;
        Some(&dir)
    };
    reconstruct_with(pretrained, direction, artifact)
}

// ── Diagnostics ─────────────────────────────────────────────────────────────

/// Norm decomposition of a task delta around the shifted base.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualDiagnostics {
    /// `<delta - lambda1 * tau, tau>`; ~0 at the closed-form `lambda1`.
    pub residual_dot_base: f64,
    /// `||delta||^2` — the vanilla compression target.
    pub norm_ori_sq: f64,
    /// `||delta - lambda1 * tau||^2` — the shifted compression target.
    pub norm_ours_sq: f64,
    /// `lambda1^2 ||tau||^2` — energy removed by the shift.
    pub lambda_sq_norm_base_sq: f64,
}

/// Compute the decomposition in f64 from the flattened maps.
pub fn residual_diagnostics(
    finetuned: &TensorMap,
    pretrained: &TensorMap,
    base: &BaseVector,
    lambda1: f64,
) -> Result<ResidualDiagnostics, DbmsError> {
    check_lambda(lambda1)?;
    pretrained.check_aligned(base.decoded())?;
    let delta = delta_f64(finetuned, pretrained)?;
    let tau = base.decoded().flatten();
    let mut residual_dot_base = 0.0f64;
    let mut norm_ori_sq = 0.0f64;
    let mut norm_ours_sq = 0.0f64;
    let mut norm_tau_sq = 0.0f64;
    for (&d, &t32) in delta.iter().zip(&tau) {
        let t = f64::from(t32);
        let r = d - lambda1 * t;
        residual_dot_base += r * t;
        norm_ori_sq += d * d;
        norm_ours_sq += r * r;
        norm_tau_sq += t * t;
    }
    Ok(ResidualDiagnostics {
        residual_dot_base,
        norm_ori_sq,
        norm_ours_sq,
        lambda_sq_norm_base_sq: lambda1 * lambda1 * norm_tau_sq,
    })
}
