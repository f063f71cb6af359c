use std::fmt;

/// Why a command did not succeed, mapped onto the exit code contract.
#[derive(Debug)]
pub enum Failure {
    /// Bad arguments, configuration or input content (exit 1).
    Usage(String),
    /// Some units of a batch failed; the rest were processed (exit 2).
    Partial(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Partial(_) => 2,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Partial(m) => f.write_str(m),
        }
    }
}

impl From<hepeval_core::Error> for Failure {
    fn from(e: hepeval_core::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(format!("I/O error: {e}"))
    }
}

pub type CmdResult<T = ()> = Result<T, Failure>;
