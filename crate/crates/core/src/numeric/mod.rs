//! Dense 64-bit tensors, reverse-mode differentiation, seeded randomness,
//! and SPD solving.

pub mod archive;
pub mod gradcheck;
pub mod linalg;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use gradcheck::grad_check;
pub use linalg::{cosine, l2_normalize, spd_solve, Cholesky, EPS_NORM};
pub use rng::{gaussian_matrix, Rng};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
