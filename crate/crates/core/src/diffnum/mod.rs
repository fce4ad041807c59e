//! Reverse-mode differentiation and the dense linear algebra underneath it.

pub mod gradcheck;
pub mod matrix;
pub mod tape;

pub use gradcheck::{check_gradient, relative_error};
pub use matrix::{cholesky_jittered, JitteredCholesky, Matrix, DEFAULT_JITTER_SCHEDULE};
pub use tape::{Gradients, OpKind, OpTag, Provenance, Tape, Var};

/// Cholesky factor of the symmetric matrix `k` recorded on its tape. The
/// smallest diagonal jitter from `schedule` that lets the factorization of
/// the current value succeed is added first; returns the factor and jitter.
pub fn cholesky_on_tape<'t>(k: Var<'t>, schedule: &[f64]) -> crate::Result<(Var<'t>, f64)> {
    let jitter = cholesky_jittered(&k.value(), schedule)?.jitter;
    let tape = k.tape();
    let shifted = if jitter > 0.0 { k + tape.constant(Matrix::identity(k.rows()).scale(jitter)) } else { k };
    Ok((tape.record(OpKind::Cholesky, &[shifted])?, jitter))
}
