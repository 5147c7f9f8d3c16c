//! Exit-code taxonomy and error classification.
//!
//! Every failure maps onto one of three classes:
//!
//! | class      | exit code | meaning                                          |
//! |------------|-----------|--------------------------------------------------|
//! | Validation | 2         | bad flags, inconsistent inputs, missing files    |
//! | Io         | 3         | filesystem failures, corrupt containers/manifests|
//! | Numerical  | 4         | non-finite losses/values, numeric overflow       |
//!
//! A missing input file is a validation error (the user pointed at something
//! that is not there), while an unreadable or corrupt file is an I/O error.
//! On failure the process prints exactly one `ERROR code=<n> msg=...` line to
//! stderr; stdout stays reserved for data and paths.

use std::error::Error as StdError;
use std::io::ErrorKind;
use std::path::Path;

use deltashift::{
    CheckpointError, CodecError, DbmsError, ForwardError, HarnessError, TensorError, TrainError,
};

/// A classified CLI failure; the string is the full human-readable cause.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Io(String),
    Numerical(String),
}

impl CliError {
    /// Process exit code for this class.
    pub fn code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Io(m) | CliError::Numerical(m) => m,
        }
    }

    fn with(kind: Kind, msg: String) -> Self {
        match kind {
            Kind::Validation => CliError::Validation(msg),
            Kind::Io => CliError::Io(msg),
            Kind::Numerical => CliError::Numerical(msg),
        }
    }
}

#[derive(Clone, Copy)]
enum Kind {
    Validation,
    Io,
    Numerical,
}

/// Render an error with its full source chain on one conceptual line,
/// skipping sources a `Display` impl already interpolated.
fn chain(err: &dyn StdError) -> String {
    let mut s = err.to_string();
    let mut cur = err.source();
    while let Some(e) = cur {
        let msg = e.to_string();
        if !s.contains(&msg) {
            s.push_str(": ");
            s.push_str(&msg);
        }
        cur = e.source();
    }
    s
}

fn io_kind(source: &std::io::Error) -> Kind {
    if source.kind() == ErrorKind::NotFound {
        Kind::Validation
    } else {
        Kind::Io
    }
}

/// Wrap one of the CLI's own filesystem errors with path context.
pub fn io_error(path: &Path, source: &std::io::Error) -> CliError {
    CliError::with(io_kind(source), format!("{}: {source}", path.display()))
}

fn classify_tensor(_: &TensorError) -> Kind {
    Kind::Validation
}

fn classify_forward(e: &ForwardError) -> Kind {
    match e {
        ForwardError::NonFinite(_) => Kind::Numerical,
        _ => Kind::Validation,
    }
}

fn classify_checkpoint(e: &CheckpointError) -> Kind {
    match e {
        CheckpointError::Io { source, .. } => io_kind(source),
        CheckpointError::CorruptHeader(_)
        | CheckpointError::Truncated(_)
        | CheckpointError::ChecksumMismatch { .. } => Kind::Io,
        CheckpointError::Tensor(t) => classify_tensor(t),
    }
}

fn classify_codec(e: &CodecError) -> Kind {
    match e {
        CodecError::InvalidSparseRate(_) | CodecError::WrongCodec { .. } | CodecError::EmptyInput => {
            Kind::Validation
        }
        CodecError::ValueOverflow { .. } => Kind::Numerical,
        CodecError::CorruptContainer(_) => Kind::Io,
        CodecError::Format(c) => classify_checkpoint(c),
        CodecError::Tensor(t) => classify_tensor(t),
        CodecError::Io { source, .. } => io_kind(source),
    }
}

fn classify_dbms(e: &DbmsError) -> Kind {
    match e {
        DbmsError::Tensor(t) => classify_tensor(t),
        DbmsError::Codec(c) => classify_codec(c),
        DbmsError::EmptyModelList | DbmsError::DegenerateBase | DbmsError::WrongBaseCodec(_) => {
            Kind::Validation
        }
        DbmsError::NonFiniteLambda(_) => Kind::Numerical,
        DbmsError::Manifest(_) => Kind::Io,
        DbmsError::Io { source, .. } => io_kind(source),
    }
}

fn classify_train(e: &TrainError) -> Kind {
    match e {
        TrainError::InvalidConfig(_) | TrainError::EmptySample => Kind::Validation,
        TrainError::NonFiniteLoss { .. } | TrainError::NonFinite(_) => Kind::Numerical,
        TrainError::Forward(f) => classify_forward(f),
        TrainError::Tensor(t) => classify_tensor(t),
        TrainError::Dbms(d) => classify_dbms(d),
        TrainError::Codec(c) => classify_codec(c),
    }
}

fn classify_harness(e: &HarnessError) -> Kind {
    match e {
        HarnessError::InvalidConfig(_) | HarnessError::InvalidGrid(_) | HarnessError::UnknownTask(_) => {
            Kind::Validation
        }
        HarnessError::Degenerate(_) => Kind::Numerical,
        HarnessError::SuiteFile { .. } => Kind::Io,
        HarnessError::Io { source, .. } => io_kind(source),
        HarnessError::Forward(f) => classify_forward(f),
        HarnessError::Tensor(t) => classify_tensor(t),
        HarnessError::Dbms(d) => classify_dbms(d),
        HarnessError::Codec(c) => classify_codec(c),
        HarnessError::Train(t) => classify_train(t),
        HarnessError::Checkpoint(c) => classify_checkpoint(c),
    }
}

macro_rules! impl_from {
    ($ty:ty, $classify:ident) => {
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::with($classify(&e), chain(&e))
            }
        }
    };
}

impl_from!(TensorError, classify_tensor);
impl_from!(ForwardError, classify_forward);
impl_from!(CheckpointError, classify_checkpoint);
impl_from!(CodecError, classify_codec);
impl_from!(DbmsError, classify_dbms);
impl_from!(TrainError, classify_train);
impl_from!(HarnessError, classify_harness);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_file_is_validation_but_other_io_is_io() {
        let not_found = std::io::Error::new(ErrorKind::NotFound, "gone");
        assert_eq!(io_error(Path::new("x"), &not_found).code(), 2);
        let denied = std::io::Error::new(ErrorKind::PermissionDenied, "no");
        assert_eq!(io_error(Path::new("x"), &denied).code(), 3);
    }

    #[test]
    fn classification_covers_the_three_classes() {
        let v: CliError = DbmsError::DegenerateBase.into();
        assert_eq!(v.code(), 2);
        let i: CliError = DbmsError::Manifest("bad".into()).into();
        assert_eq!(i.code(), 3);
        let n: CliError = DbmsError::NonFiniteLambda(f64::NAN).into();
        assert_eq!(n.code(), 4);
    }

    #[test]
    fn nested_errors_classify_by_the_leaf() {
        let e: CliError = HarnessError::Train(TrainError::NonFinite(f64::INFINITY)).into();
        assert_eq!(e.code(), 4);
        let e: CliError = TrainError::Dbms(DbmsError::DegenerateBase).into();
        assert_eq!(e.code(), 2);
    }

    #[test]
    fn chain_includes_source_messages() {
        let source = std::io::Error::new(ErrorKind::PermissionDenied, "locked");
        let e: CliError = DbmsError::Io {
            path: "m.manifest".into(),
            source,
        }
        .into();
        assert!(e.message().contains("locked"), "{}", e.message());
    }
}
