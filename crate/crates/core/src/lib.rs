//! Training-free mixed-precision quantization: layer sensitivities from the
//! change in sliced mutual information at observer layers, and exact
//! budgeted bit-width allocation.

pub mod allocator;
pub mod dataset;
pub mod error;
pub mod fixture;
pub mod info;
pub mod model;
pub mod observers;
pub mod probe;
pub mod quant;
pub mod seed;
pub mod sensitivity;
pub mod tensor;

pub use allocator::{
    brute_force_solve, cost_of_config, solve, solve_with, AllocationProblem, AllocationResult, CostKind, CostModel,
    SolverKind, SolverStrategy,
};
pub use dataset::Dataset;
pub use error::{Error, ErrorClass, Result};
pub use info::{
    fit_compressor, ksg_mi_cc, ksg_mi_cd, pearson, smi, Compressor, CompressorKind, MiEstimate, ProjectionSet,
    SampleMatrix, SmiTarget,
};
pub use model::{
    count_macs, count_params, load_dataset, load_model, LayerId, LayerKind, LayerSpec, ModelGraph, Network,
};
pub use observers::{perturbation_sweep, select_observers, ObserverSets, PerturbationRecord};
pub use probe::{Calibration, Probe, SmiConfig};
pub use quant::{
    apply_config, calibrate_activation_ranges, evaluate_accuracy, fake_quant_activation, quantize_weights,
    ActRangeTable, BitConfig, BitSet, LayerBits, QuantParams,
};
pub use sensitivity::{compute_all, compute_baseline, score, SensitivityTable};
pub use tensor::Tensor;
