//! Exit codes by error category.

use hyperweno::Error;

pub const OK: u8 = 0;
pub const OTHER: u8 = 1;
pub const USAGE: u8 = 2;
pub const IO: u8 = 3;
pub const FORMAT: u8 = 4;
pub const CONFIG: u8 = 5;
pub const DIVERGED: u8 = 6;
pub const TRAINING: u8 = 7;

/// Marks a run that finished its outputs but did not reach the final time.
#[derive(Debug)]
pub struct Incomplete(pub String);

impl std::fmt::Display for Incomplete {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Incomplete {}

pub fn classify(e: &anyhow::Error) -> (u8, &'static str) {
    for cause in e.chain() {
        if cause.downcast_ref::<Incomplete>().is_some() {
            return (DIVERGED, "diverged");
        }
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::Io(_) => (IO, "io"),
                Error::Format { .. } => (FORMAT, "format"),
                Error::StepDiverged { .. } | Error::NonPhysicalState(_) => (DIVERGED, "diverged"),
                Error::TrainingAborted(_) => (TRAINING, "training"),
                Error::Config(_) | Error::InvalidArgument(_) | Error::InvalidGrid(_) | Error::ShapeMismatch(_) => {
                    (CONFIG, "config")
                }
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return (IO, "io");
        }
        if cause.downcast_ref::<toml::de::Error>().is_some() {
            return (CONFIG, "config");
        }
    }
    (OTHER, "error")
}
