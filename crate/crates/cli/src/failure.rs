use std::fmt;

/// Error carrying the process exit code: 1 check failure, 2 input error,
/// 3 numerical failure.
#[derive(Debug)]
pub enum Failure {
    Check(String),
    Input(anyhow::Error),
    Numerical(anyhow::Error),
}

impl Failure {
    pub fn input<E: Into<anyhow::Error>>(e: E) -> Self {
        Failure::Input(e.into())
    }

    pub fn numerical<E: Into<anyhow::Error>>(e: E) -> Self {
        Failure::Numerical(e.into())
    }

    pub fn code(&self) -> u8 {
        match self {
            Failure::Check(_) => 1,
            Failure::Input(_) => 2,
            Failure::Numerical(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Check(msg) => write!(f, "check failed: {msg}"),
            Failure::Input(e) => write!(f, "{e:#}"),
            Failure::Numerical(e) => write!(f, "numerical failure: {e:#}"),
        }
    }
}
