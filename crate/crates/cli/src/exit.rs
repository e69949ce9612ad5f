//! Process exit codes.

use std::fmt;

use npp_core::Error;

pub const OK: u8 = 0;
/// Anything not covered by the codes below.
pub const INTERNAL: u8 = 1;
pub const CONFIG: u8 = 2;
pub const IO: u8 = 3;
pub const ZERO_SHOT: u8 = 4;

/// A bad flag value or combination detected by the CLI itself.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

fn core_code(e: &Error) -> u8 {
    match e {
        Error::ZeroShotViolation { .. } => ZERO_SHOT,
        Error::Io { .. }
        | Error::Json(_)
        | Error::BadMagic { .. }
        | Error::UnsupportedVersion(_)
        | Error::TruncatedPayload(_)
        | Error::MalformedHeader(_)
        | Error::IdxBadMagic { .. }
        | Error::IdxCountMismatch { .. }
        | Error::IdxTruncated { .. } => IO,
        _ => CONFIG,
    }
}

pub fn code_for(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return core_code(e);
        }
        if cause.is::<ConfigError>() {
            return CONFIG;
        }
        if cause.is::<std::io::Error>() || cause.is::<csv::Error>() || cause.is::<serde_json::Error>() {
            return IO;
        }
    }
    INTERNAL
}
