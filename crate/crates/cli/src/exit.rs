//! Exit codes: 0 success, 2 usage, 3 data/format, 4 verification failure.

use std::fmt;

use hesam_core::Error as CoreError;
use hesam_train::TrainError;

pub const USAGE: u8 = 2;
pub const DATA: u8 = 3;
pub const VERIFY: u8 = 4;

/// A check ran to completion and did not pass.
#[derive(Debug)]
pub struct VerificationFailed(pub String);

impl fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "verification failed: {}", self.0)
    }
}

impl std::error::Error for VerificationFailed {}

/// Bad flag combination caught after parsing.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn core_code(e: &CoreError) -> u8 {
    match e {
        CoreError::Config(_) | CoreError::Usage(_) | CoreError::MapUndefined(_) => USAGE,
        CoreError::Dimension { .. } | CoreError::NonFinite { .. } | CoreError::Format(_) | CoreError::Io(_) => DATA,
    }
}

pub fn code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<VerificationFailed>() {
            return VERIFY;
        }
        if cause.is::<UsageError>() {
            return USAGE;
        }
        if let Some(e) = cause.downcast_ref::<TrainError>() {
            return match e {
                TrainError::Core(c) => core_code(c),
                TrainError::Invalid(_) => USAGE,
                _ => DATA,
            };
        }
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return core_code(e);
        }
    }
    DATA
}
