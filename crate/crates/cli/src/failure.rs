use are_core::Error;

pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_COMPAT: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// A command failure with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn input(message: impl Into<String>) -> Self {
        Self { code: EXIT_INPUT, message: message.into() }
    }

    pub fn compat(message: impl Into<String>) -> Self {
        Self { code: EXIT_COMPAT, message: message.into() }
    }

    pub fn kind(&self) -> &'static str {
        match self.code {
            EXIT_INPUT => "input",
            EXIT_COMPAT => "compatibility",
            EXIT_NUMERIC => "numerical",
            _ => "internal",
        }
    }

    /// One JSON object on one line.
    pub fn to_line(&self) -> String {
        serde_json::json!({ "error": self.kind(), "code": self.code, "message": self.message }).to_string()
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io { .. }
            | Error::Parse { .. }
            | Error::ClassIndex { .. }
            | Error::Label { .. }
            | Error::EmptyCorpus
            | Error::EmptyDocument
            | Error::InvalidSpec(_)
            | Error::UnknownFormat(_) => EXIT_INPUT,
            Error::Format(_)
            | Error::Version { .. }
            | Error::Truncated(_)
            | Error::ShapeMismatch { .. }
            | Error::Vocabulary { .. } => EXIT_COMPAT,
            Error::NonFinite { .. } | Error::DegenerateBatch => EXIT_NUMERIC,
            Error::Dimension { .. } | Error::BackwardTwice | Error::NonScalarBackward(_) => EXIT_INTERNAL,
        };
        Self { code, message: e.to_string() }
    }
}
