//! Command-line interface for the contrast-dose synthesis model: data
//! generation, two-phase training, inference, evaluation and ablations.

pub mod commands;
pub mod imgio;
pub mod runcfg;

/// Stable exit codes: 0 success, 2 usage/config errors, 3 numeric faults
/// during training or inference, 4 I/O failures.
pub fn exit_code(err: &cavm_core::Error) -> i32 {
    match err {
        cavm_core::Error::NumericFault { .. } => 3,
        cavm_core::Error::Io(_) => 4,
        _ => 2,
    }
}
