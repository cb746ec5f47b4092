//! Minimal reverse-mode differentiation over dense real arrays.

mod array;
pub mod checkpoint;
mod gradcheck;
mod tape;

pub use array::{Array, Real};
pub use gradcheck::{
    check_tape, finite_diff_grad, grad_check_report, primitive_names, relative_error,
    GradCheckEntry, GradCheckReport, FD_STEP, KINK_MARGIN,
};
pub use tape::{Gradients, Tape, Var};

/// Element precision used by a run. Gradient checks always use `F64`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "32" | "f32" => Ok(Precision::F32),
            "64" | "f64" => Ok(Precision::F64),
            other => Err(crate::error::Error::Invalid(format!("unknown precision `{other}`"))),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::F32 => "32",
            Precision::F64 => "64",
        })
    }
}

#[cfg(test)]
mod tests;
