use std::fmt;

use thinspec::asymptote::AsymptoteError;
use thinspec::cell::CellError;
use thinspec::coeffexpr::ExprError;
use thinspec::converge::ConvergeError;
use thinspec::disc::DiscError;
use thinspec::model::ModelError;
use thinspec::spectral::SpectralError;

/// Failure classes, each with its own exit status.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration (exit 1).
    Usage(String),
    /// Output could not be written (exit 1).
    Io(String),
    /// The coefficients violate the structural hypotheses (exit 2).
    Hypothesis(String),
    /// A computation failed (exit 3).
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Io(_) => 1,
            CliError::Hypothesis(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Io(m) | CliError::Hypothesis(m) | CliError::Numerical(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

fn model_class(e: &ModelError) -> fn(String) -> CliError {
    match e {
        ModelError::Ellipticity { .. } => CliError::Hypothesis,
        ModelError::Eval { .. } => CliError::Numerical,
        _ => CliError::Usage,
    }
}

fn cell_class(e: &CellError) -> fn(String) -> CliError {
    match e {
        CellError::Ellipticity { .. } | CellError::NonPositive { .. } => CliError::Hypothesis,
        CellError::Model(m) => model_class(m),
        _ => CliError::Numerical,
    }
}

fn disc_class(e: &DiscError) -> fn(String) -> CliError {
    match e {
        DiscError::Ellipticity { .. } => CliError::Hypothesis,
        DiscError::Grid(_) => CliError::Usage,
        DiscError::Model(m) => model_class(m),
        DiscError::Cell(c) => cell_class(c),
        _ => CliError::Numerical,
    }
}

fn asymptote_class(e: &AsymptoteError) -> fn(String) -> CliError {
    match e {
        AsymptoteError::Cell(c) => cell_class(c),
        AsymptoteError::Model(m) => model_class(m),
        AsymptoteError::Disc(d) => disc_class(d),
        _ => CliError::Numerical,
    }
}

macro_rules! classify {
    ($t:ty, $f:expr) => {
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                ($f)(&e)(e.to_string())
            }
        }
    };
}

classify!(ModelError, model_class);
classify!(CellError, cell_class);
classify!(DiscError, disc_class);
classify!(AsymptoteError, asymptote_class);
classify!(SpectralError, |_: &SpectralError| CliError::Numerical as fn(String) -> CliError);
classify!(ExprError, |_: &ExprError| CliError::Usage as fn(String) -> CliError);
classify!(ConvergeError, |e: &ConvergeError| -> fn(String) -> CliError {
    match e {
        ConvergeError::Disc(d) => disc_class(d),
        ConvergeError::Cell(c) => cell_class(c),
        ConvergeError::Asymptote(a) => asymptote_class(a),
        ConvergeError::Expr { .. } | ConvergeError::Argument { .. } => CliError::Usage,
        _ => CliError::Numerical,
    }
});
