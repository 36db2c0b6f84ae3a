//! Dense real-matrix kernel: the matrix type, interpolation matrices, the
//! SVD pseudoinverse and the reverse-mode gradient tape.

mod interp;
mod matrix;
mod pinv;
pub mod tape;

pub use interp::{interp_matrix, interpolate};
pub use matrix::Matrix;
pub use pinv::{pinv, PINV_RTOL};
pub use tape::{grad_check, Grads, Tape, Var};
