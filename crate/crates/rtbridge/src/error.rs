//! Error types shared across the bridge.

use thiserror::Error;

/// Errors produced by runtime operations.
///
/// Fatal invariant violations (decref below zero, unmatched allow-threads
/// end, double finalization) are *not* errors: they panic with an
/// `invariant violation:` prefix so tests and the CLI can tell them apart
/// from ordinary failures.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum BridgeError {
    #[error("native allocation failed: arena exhausted (requested {requested} bytes)")]
    AllocationFailure { requested: u64 },

    #[error("cannot convert {kind} to a managed counterpart")]
    NoManagedCounterpart { kind: String },

    #[error("cannot convert managed {kind} to a native counterpart")]
    NoNativeCounterpart { kind: String },

    #[error("attribute access '{name}' failed: {native}")]
    AttributeAccess { name: String, native: String },

    #[error("{0} is not callable")]
    NotCallable(String),

    #[error("type error: {0}")]
    Type(String),

    #[error("format syntax error at offset {offset}: {reason}")]
    FormatSyntax { offset: usize, reason: String },

    #[error("arity mismatch: format expects {expected} values, got {got}")]
    ArityMismatch { expected: usize, got: usize },

    #[error("kind mismatch at unit {unit}: expected {expected}, got {got}")]
    KindMismatch {
        unit: usize,
        expected: String,
        got: String,
    },

    #[error("in call to '{function}': {source}")]
    Call {
        function: String,
        #[source]
        source: Box<BridgeError>,
    },

    #[error("extension module '{0}' is already registered")]
    DuplicateModule(String),

    #[error("unknown extension module '{0}'")]
    UnknownModule(String),

    #[error("extension descriptor error: {0}")]
    Descriptor(String),

    #[error("scenario parse error at line {line}: {reason}")]
    ScenarioParse { line: usize, reason: String },

    #[error("scenario error at line {line} (`{command}`): {reason}")]
    ScenarioRuntime {
        line: usize,
        command: String,
        reason: String,
    },
}

pub type Result<T> = std::result::Result<T, BridgeError>;

/// Aborts on a broken runtime invariant. The prefix is load-bearing: the
/// CLI maps panics carrying it to exit code 2.
#[macro_export]
macro_rules! fatal_invariant {
    ($($arg:tt)*) => {
        panic!("invariant violation: {}", format_args!($($arg)*))
    };
}
