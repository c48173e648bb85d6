//! Dense `f64` arrays, the handful of differentiable primitives the blocks
//! need, a Jacobi eigensolver and a finite-difference gradient checker.

mod adjoint;
mod array;
mod eig;
mod gradcheck;
mod ops;

pub use adjoint::AdjointRecord;
pub use array::DenseArray;
pub use eig::{sym_eig, SpectralDecomposition, SYMMETRY_TOL};
pub use gradcheck::{finite_diff_grad, grad_rel_err, Step};
pub use ops::{
    matmul, matmul_backward, matmul_nt, matmul_tn, softmax_cols, softmax_cols_backward,
    softmax_rows, softmax_rows_backward,
};
