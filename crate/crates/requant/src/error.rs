use std::io;
use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] requant_core::Error),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invariant checks failed: {}", .0.join(", "))]
    Checks(Vec<String>),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 configuration, 3 file or format, 4 numerical,
    /// 5 failed invariant checks.
    pub fn exit_code(&self) -> i32 {
        use requant_core::Error as C;
        match self {
            Error::Config(_) => 2,
            Error::Io { .. } => 3,
            Error::Checks(_) => 5,
            Error::Core(e) => match e.root() {
                C::Config(_) | C::Layout(_) | C::Parameter(_) => 2,
                C::Format(_) => 3,
                C::NonFiniteGradient { .. } | C::Diverged { .. } => 4,
                C::Step { .. } => unreachable!("root() unwraps step errors"),
            },
        }
    }
}
