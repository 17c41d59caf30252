use serde::Serialize;

/// Exit code 2: the invocation itself is wrong.
pub const EXIT_USAGE: i32 = 2;
/// Exit code 1: the engine rejected the inputs or a check failed.
pub const EXIT_DOMAIN: i32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Usage,
    Domain,
}

#[derive(Debug, Serialize)]
pub struct Failure {
    pub kind: Kind,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Failure {
            kind: Kind::Usage,
            message: message.into(),
        }
    }

    pub fn domain(message: impl Into<String>) -> Self {
        Failure {
            kind: Kind::Domain,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            Kind::Usage => EXIT_USAGE,
            Kind::Domain => EXIT_DOMAIN,
        }
    }

    /// One JSON object on stderr.
    pub fn report(&self) {
        let body = serde_json::json!({ "error": self, "exit_code": self.exit_code() });
        eprintln!("{body}");
    }
}

impl From<mfmdp::Error> for Failure {
    fn from(e: mfmdp::Error) -> Self {
        Failure::domain(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::domain(format!("io: {e}"))
    }
}
