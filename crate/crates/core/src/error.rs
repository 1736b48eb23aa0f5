use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("decode error: {0}")]
    Decode(String),

    #[error("crc mismatch in section `{section}`: stored {stored:#010x}, computed {computed:#010x}")]
    Crc {
        section: &'static str,
        stored: u32,
        computed: u32,
    },

    #[error("pca basis is rank deficient: component {component} has no variance")]
    RankDeficient { component: usize },

    #[error("fitting diverged at iteration {iteration}")]
    Diverged { iteration: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn decode(msg: impl Into<String>) -> Self {
        Error::Decode(msg.into())
    }

    /// True for failures caused by a malformed or corrupted input stream.
    pub fn is_decode(&self) -> bool {
        matches!(self, Error::Decode(_) | Error::Crc { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
