//! Spatio-temporal aware graph-regularized NMF.
//!
//! Training factorizes the histogram matrix `Y ≈ UV` while a Laplacian
//! penalty `λ·Tr(V L Vᵀ)` pulls together the codes of samples that are close
//! either in histogram space or in STDV space; β blends the two affinity
//! graphs. Test samples are encoded against the frozen dictionary and
//! training codes through the joint train/test graph.

mod encode;
mod graph;
mod train;

pub use encode::{encode_test, encode_test_observed, pseudoinverse_encode, EncodeOptions, EncodeReport};
pub use graph::{
    blend_graph, check_beta, graph_from_single, heat_kernel_matrix, pairwise_sq_distances, resolve_bandwidth,
    AffinityGraph, Bandwidth,
};
pub use train::{
    build_graph, gnmf, gnmf_from, normalize_factors, objective, train, train_observed, update_u, update_v,
    ComponentModel, Factors, GraphOptions, MidLevelRep, SolverOptions, StGnmfConfig, Step, TrainReport, Trained,
    UPDATE_EPS,
};
