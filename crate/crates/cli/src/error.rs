use cage_core::CageError;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Parse(String),
    NoEquilibrium(String),
    Infeasible(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            Self::Parse(_) | Self::Io(_) => 3,
            Self::NoEquilibrium(_) => 4,
            Self::Infeasible(_) => 5,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Usage(m) => write!(f, "usage error: {m}"),
            Self::Parse(m) => write!(f, "parse error: {m}"),
            Self::NoEquilibrium(m) => write!(f, "no equilibrium point found: {m}"),
            Self::Infeasible(m) => write!(f, "infeasible: {m}"),
            Self::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl From<CageError> for CliError {
    fn from(e: CageError) -> Self {
        match e {
            CageError::Format(_) => Self::Parse(e.to_string()),
            CageError::Infeasible(_) | CageError::Constraint(_) => Self::Infeasible(e.to_string()),
            CageError::Domain(_) | CageError::UnsupportedDimension(_) | CageError::Precondition(_) => {
                Self::Usage(e.to_string())
            }
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        Self::Io(e.to_string())
    }
}
