use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used to pick process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Input,
    Statistical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("row {row}: {message}")]
    Malformed { row: usize, message: String },

    #[error("row {row}: unknown level `{value}` for variable `{variable}`")]
    UnknownLevel {
        row: usize,
        variable: String,
        value: String,
    },

    #[error("row {row}: duplicate patch_id `{patch_id}`")]
    DuplicatePatchId { row: usize, patch_id: String },

    #[error("row {row}: record has neither score nor predicted label")]
    MissingPrediction { row: usize },

    #[error("record `{patch_id}` has neither score nor predicted label")]
    NoPrediction { patch_id: String },

    #[error("input file {0} contains no records")]
    EmptyInput(PathBuf),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("image format error: {0}")]
    Image(String),

    #[error("no valid patch found after {attempts} attempts")]
    NoValidPatch { attempts: usize },

    #[error("empty subset: {0}")]
    EmptySubset(String),

    #[error("metric `{metric}` is undefined: {reason}")]
    Undefined { metric: String, reason: String },

    #[error("unknown {family} `{name}` (known: {known})")]
    UnknownStrategy {
        family: &'static str,
        name: String,
        known: String,
    },

    #[error("bootstrap error: {0}")]
    Bootstrap(String),

    #[error("sample too small: {0}")]
    SampleTooSmall(String),

    #[error("design error: {0}")]
    Design(String),

    #[error("separation detected at column `{column}`")]
    Separation { column: String },

    #[error("information matrix is singular (collinear columns)")]
    SingularInformation,

    #[error("fit did not converge after {iterations} iterations")]
    NonConvergence { iterations: usize },

    #[error("domain error: {0}")]
    Domain(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Io { .. }
            | Error::Malformed { .. }
            | Error::UnknownLevel { .. }
            | Error::DuplicatePatchId { .. }
            | Error::MissingPrediction { .. }
            | Error::NoPrediction { .. }
            | Error::EmptyInput(_)
            | Error::Schema(_)
            | Error::Config { .. }
            | Error::Image(_)
            | Error::Geometry(_)
            | Error::UnknownStrategy { .. } => ErrorKind::Input,
            _ => ErrorKind::Statistical,
        }
    }

    /// Name of the module that raised the error, for CLI diagnostics.
    pub fn module(&self) -> &'static str {
        match self {
            Error::Io { .. }
            | Error::Malformed { .. }
            | Error::UnknownLevel { .. }
            | Error::DuplicatePatchId { .. }
            | Error::MissingPrediction { .. }
            | Error::NoPrediction { .. }
            | Error::EmptyInput(_)
            | Error::Schema(_) => "records",
            Error::Config { .. } | Error::UnknownStrategy { .. } => "config",
            Error::Geometry(_) | Error::Image(_) | Error::NoValidPatch { .. } => "patch_geom",
            Error::EmptySubset(_) | Error::Undefined { .. } => "metrics",
            Error::Bootstrap(_) => "resample",
            Error::SampleTooSmall(_) => "stats_tests",
            Error::Design(_)
            | Error::Separation { .. }
            | Error::SingularInformation
            | Error::NonConvergence { .. }
            | Error::Domain(_) => "risk_model",
        }
    }
}

/// Config error for a failed TOML parse, keyed by the offending field.
/// Missing and unknown fields name themselves in backticks; type errors are
/// located through the source span.
pub(crate) fn toml_error(text: &str, e: &toml::de::Error) -> Error {
    let message = e.message().to_string();
    let key = message
        .split('`')
        .nth(1)
        .map(str::to_string)
        .or_else(|| e.span().and_then(|span| key_at(text, span.start)))
        .unwrap_or_else(|| "<document>".into());
    Error::Config { key, message }
}

fn key_at(text: &str, offset: usize) -> Option<String> {
    let before = text.get(..offset)?;
    let line_start = before.rfind('\n').map_or(0, |i| i + 1);
    let line = text[line_start..].lines().next()?;
    let key = line.split_once('=')?.0.trim().trim_matches('"');
    let table = before[..line_start]
        .lines()
        .rev()
        .map(str::trim)
        .find(|l| l.starts_with('[') && l.ends_with(']'))
        .map(|l| l.trim_matches(|c| c == '[' || c == ']').trim());
    Some(match table {
        Some(t) => format!("{t}.{key}"),
        None => key.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn type_errors_are_keyed_by_span() {
        #[derive(Debug, serde::Deserialize)]
        #[allow(dead_code)]
        struct Inner {
            b: u32,
        }
        #[derive(Debug, serde::Deserialize)]
        #[allow(dead_code)]
        struct Doc {
            a: u32,
            t: Inner,
        }
        let text = "a = 1\n[t]\nb = \"x\"\n";
        let err = toml::from_str::<Doc>(text).unwrap_err();
        match toml_error(text, &err) {
            Error::Config { key, .. } => assert_eq!(key, "t.b"),
            other => panic!("{other:?}"),
        }
    }
}
