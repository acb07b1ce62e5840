//! Crate-wide error type.

/// Errors produced by any module in this crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    /// An argument violates an operation's preconditions.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// A backbone stage is absent from a feature archive.
    #[error("missing stage {0}")]
    MissingStage(String),
    /// A named tensor is absent from an archive.
    #[error("missing tensor '{0}'")]
    MissingTensor(String),
    /// Four points that should span a quadrilateral are collinear or coincident.
    #[error("degenerate quad: {0}")]
    DegenerateQuad(String),
    /// A rectangle has non-positive extent.
    #[error("degenerate box: {0}")]
    DegenerateBox(String),
    /// An archive does not start with the expected magic bytes.
    #[error("bad magic")]
    BadMagic,
    /// An archive is structurally invalid (truncated, unknown version, ...).
    #[error("archive format error: {0}")]
    Format(String),
    /// Two tensors in one archive share a name.
    #[error("duplicate tensor name '{0}'")]
    DuplicateName(String),
    /// An archive entry uses an element type this build does not understand.
    #[error("unknown dtype {0}")]
    UnknownDtype(u8),
    /// A character does not belong to the configured alphabet.
    #[error("token '{0}' not in alphabet")]
    UnknownToken(char),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
