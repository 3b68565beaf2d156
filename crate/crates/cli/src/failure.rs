use std::fmt::Display;

/// Error tagged with the process exit code it maps to.
pub struct Failure {
    pub kind: Kind,
    pub error: anyhow::Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Check,
    Input,
    Numerical,
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self.kind {
            Kind::Check => 1,
            Kind::Input => 2,
            Kind::Numerical => 3,
        }
    }

    pub fn input(e: impl Into<anyhow::Error>) -> Self {
        Self {
            kind: Kind::Input,
            error: e.into(),
        }
    }

    pub fn numerical(e: impl Into<anyhow::Error>) -> Self {
        Self {
            kind: Kind::Numerical,
            error: e.into(),
        }
    }

    pub fn check(msg: impl Display) -> Self {
        Self {
            kind: Kind::Check,
            error: anyhow::anyhow!("{msg}"),
        }
    }
}

pub trait Tag<T> {
    fn input(self) -> Result<T, Failure>;
    fn numerical(self) -> Result<T, Failure>;
}

impl<T, E> Tag<T> for Result<T, E>
where
    E: Into<anyhow::Error>,
{
    fn input(self) -> Result<T, Failure> {
        self.map_err(Failure::input)
    }

    fn numerical(self) -> Result<T, Failure> {
        self.map_err(Failure::numerical)
    }
}
