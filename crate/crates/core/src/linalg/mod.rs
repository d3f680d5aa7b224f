//! Numerical kernels shared by the KL, elliptic and reduction modules.

pub mod eigen;
pub mod sparse;

pub use eigen::{subspace_top, symmetric_eigen_desc, SortedEigen};
pub use sparse::{pcg, CgStats, CholeskyPattern, CsrMatrix, IncompleteCholesky, SparseCholesky};
