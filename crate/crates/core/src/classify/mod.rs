//! RBF-χ² kernels, one-vs-rest SVM and evaluation protocols.

mod kernel;
mod metrics;
mod protocol;
mod svm;

pub use kernel::{
    chi2_distance, chi2_kernel_matrix, fuse_kernels, l1_normalize_columns, mean_train_distance, Chi2Kernel,
    KernelMatrix, KernelProvenance,
};
pub use metrics::{evaluate, Metrics};
pub use protocol::{logo_splits, stratified_split, Split};
pub use svm::{argmax_rows, predict, train_binary, train_ovr_svm, BinarySvm, Prediction, SolverOptions, SvmModel};
