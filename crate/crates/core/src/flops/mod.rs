//! Analytic training-cost accounting and speedup interpolation.

mod cost;
mod speedup;

pub use cost::{
    bytes_per_param, cost_csv, cost_report, dense_train_flops, gpu_days, moe_train_flops,
    param_count, tco2e, train_flops, CostReport, CostSpec, Recipe, DEFAULT_SEQ_LEN, DEFAULT_VOCAB,
    DENSE_TFLOPS, KG_CO2E_PER_GPU_DAY, MOE_TFLOPS, ZFLOP,
};
pub use speedup::{
    cost_at, interpolate_flops, speedup_csv, speedup_curve, speedup_factor, FamilyCost,
    Observation, Orientation, Speedup, SpeedupQuery,
};
