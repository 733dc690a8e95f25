use soir_core::Error;

/// Exit status 2: bad usage, config or input data.
pub const EXIT_USAGE: u8 = 2;
/// Exit status 3: the solver diverged or curvature was degenerate.
pub const EXIT_NUMERICAL: u8 = 3;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(Error::NumericalFailure { .. } | Error::DegenerateCurvature(_)) => EXIT_NUMERICAL,
            _ => EXIT_USAGE,
        }
    }

    /// One human-readable line followed by one JSON line on stderr.
    pub fn report(&self) {
        let (kind, location, message) = match self {
            CliError::Usage(m) => ("usage", None, m.clone()),
            CliError::Core(e) => match e {
                Error::InvalidInput(m) => ("invalid-input", None, m.clone()),
                Error::Format { location, message } => ("format", Some(location.clone()), message.clone()),
                Error::NumericalFailure { message, .. } => ("numerical-failure", None, message.clone()),
                Error::DegenerateCurvature(_) => ("degenerate-curvature", None, e.to_string()),
                Error::Io { path, source } => ("io", Some(path.clone()), source.to_string()),
                Error::Json(j) => ("json", None, j.to_string()),
            },
        };
        match &location {
            Some(l) => eprintln!("error: {kind} at {l}: {message}"),
            None => eprintln!("error: {kind}: {message}"),
        }
        let mut json = serde_json::json!({ "error": kind, "message": message });
        if let Some(l) = location {
            json["location"] = serde_json::Value::String(l);
        }
        if let CliError::Core(Error::NumericalFailure { trace, .. }) = self {
            json["trace_len"] = serde_json::Value::from(trace.len());
        }
        eprintln!("{json}");
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}
