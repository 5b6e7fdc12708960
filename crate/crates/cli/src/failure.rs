//! Error classes and their exit codes.

use std::fmt;

#[derive(Debug)]
pub enum Failure {
    Config(String),
    Io(String),
    Data(String),
    Diverged(String),
    Other(String),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Other(_) => 1,
            Failure::Config(_) => 2,
            Failure::Io(_) => 3,
            Failure::Data(_) => 4,
            Failure::Diverged(_) => 5,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Failure::Other(_) => "other",
            Failure::Config(_) => "config",
            Failure::Io(_) => "io",
            Failure::Data(_) => "data",
            Failure::Diverged(_) => "divergence",
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Io(m) | Failure::Data(m) | Failure::Diverged(m) | Failure::Other(m) => m,
        }
    }
}

/// `error[<kind>]: <message>` on one line.
impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error[{}]: {}", self.kind(), crate::config::one_line(&self.message()))
    }
}

impl From<flextsf::Error> for Failure {
    fn from(e: flextsf::Error) -> Self {
        use flextsf::Error as E;
        let msg = e.to_string();
        match e {
            E::Io { .. } => Failure::Io(msg),
            E::Csv { .. } | E::Data(_) | E::Checkpoint(_) => Failure::Data(msg),
            E::Config(_) | E::ConfigMismatch { .. } => Failure::Config(msg),
            E::Diverged { .. } | E::NonFinite(_) => Failure::Diverged(msg),
            E::Tensor(_) => Failure::Other(msg),
        }
    }
}
