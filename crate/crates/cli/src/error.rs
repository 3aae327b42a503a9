use std::path::Path;

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;
pub const EXIT_IO: u8 = 4;

/// A failed command: the exit code and the one-line JSON report for stderr.
#[derive(Debug)]
pub struct CliError {
    pub kind: &'static str,
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { kind: "usage", code: EXIT_USAGE, message: message.into() }
    }

    pub fn io(context: &str, path: &Path, err: std::io::Error) -> Self {
        Self { kind: "io", code: EXIT_IO, message: format!("{context}: {}: {err}", path.display()) }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self { kind: "runtime", code: EXIT_RUNTIME, message: message.into() }
    }

    pub fn json_line(&self) -> String {
        serde_json::json!({ "error": { "kind": self.kind, "code": self.code, "message": self.message } }).to_string()
    }
}

impl From<odm_core::Error> for CliError {
    fn from(err: odm_core::Error) -> Self {
        use odm_core::Error as E;
        let (kind, code) = match &err {
            E::InvalidConfig(_) => ("config", EXIT_USAGE),
            E::Io { .. } => ("io", EXIT_IO),
            E::StateFormat(_) => ("state", EXIT_RUNTIME),
            E::NonFinite { .. } => ("numeric", EXIT_RUNTIME),
            _ => ("runtime", EXIT_RUNTIME),
        };
        Self { kind, code, message: err.to_string() }
    }
}

pub type CliResult<T> = Result<T, CliError>;
