//! Experiment orchestration for the address-rewriting pipeline.

pub mod artifacts;
pub mod config;
pub mod pipeline;

use georewrite_core::Error;

/// Machine-readable error line printed on failure.
pub fn error_json(e: &Error) -> String {
    serde_json::json!({
        "error": {
            "category": e.category(),
            "exit_code": e.exit_code(),
            "message": e.to_string(),
        }
    })
    .to_string()
}
