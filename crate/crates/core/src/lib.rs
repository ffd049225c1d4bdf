//! Trace-driven tensor offloading for GPU training workloads.
//!
//! A training iteration is described by a [`Trace`]: an ordered list of
//! kernels with their durations and the tensors each one touches. From a
//! trace the crate can find inactive periods, plan offloads and prefetches
//! against bandwidth-limited links, simulate the resulting schedule and
//! estimate throughput across link speeds.

pub mod analysis;
pub mod bandwidth;
pub mod cost;
pub mod planner;
pub mod roofline;
pub mod scenario;
pub mod simulator;
pub mod trace;
pub mod tracegen;

pub use analysis::{
    characterize, compute_inactive_periods, compute_memory_timeline, Buckets,
    CharacterizationReport, InactivePeriod, MemoryTimeline,
};
pub use bandwidth::{
    BandwidthChannel, ChannelConfig, ChannelError, ChannelSpec, Device, Direction, Reservation,
};
pub use cost::{cost_efficiency, default_cost_config, CostReport, HardwareCostConfig};
pub use planner::{mark_urgent, plan_migrations, MigrationPlan, PlanEntry, PlanError};
pub use roofline::{roofline_curve, saturation_bandwidth, RooflinePoint};
pub use scenario::{Policy, ScenarioConfig};
pub use simulator::{
    ideal_report, simulate, simulate_ideal, simulate_layer_granularity, simulate_on_demand,
    LayerMap, SimError, SimReport,
};
pub use trace::{
    parse_trace, validate_trace, write_trace, ByteSize, KernelRecord, TensorId, TensorKind,
    TensorRecord, TimeMicros, Trace, TraceError,
};
pub use tracegen::{gen_random_trace, gen_transformer_trace, TransformerGenConfig};
