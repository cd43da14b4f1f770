use thiserror::Error;

/// Errors raised by the simulation library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid mollifier: {0}")]
    Mollifier(String),

    #[error("generator is not weakly irreducible: {0}")]
    Irreducible(String),

    #[error("spectral gap {gap:e} is below the conditioning threshold")]
    Conditioning { gap: f64 },

    #[error("invalid channel model: {0}")]
    Model(String),

    #[error("thinning majorant violated: total rate {rate} exceeds bound {bound}")]
    Majorant { rate: f64, bound: f64 },

    #[error("blow-up monitor tripped at t = {t}: |u|_H = {norm} exceeds {limit}")]
    BlowUp { t: f64, norm: f64, limit: f64 },

    #[error("numerical invariant breached: {0}")]
    Invariant(String),

    #[error("config error at line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(line: usize, msg: impl Into<String>) -> Self {
        Error::Config {
            line,
            msg: msg.into(),
        }
    }

    /// Process exit code used by the command-line driver.
    ///
    /// `2` for configuration problems, `3` for numerical-invariant breaches,
    /// `4` when the blow-up monitor trips, `1` for anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Domain(_) | Error::Mollifier(_) | Error::Model(_) => 2,
            Error::Irreducible(_)
            | Error::Conditioning { .. }
            | Error::Majorant { .. }
            | Error::Invariant(_) => 3,
            Error::BlowUp { .. } => 4,
            Error::Io(_) => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
