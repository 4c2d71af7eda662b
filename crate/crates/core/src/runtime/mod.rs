//! Token-sparse transformer inference with level-partitioned KV caching.

pub mod cache;
pub mod model;
pub mod pipeline;

pub use cache::{cache_memory_report, masked_forward, KVCacheStore, MemoryReport, MemoryRow};
pub use model::{attention, attention_macs, KvSegment, Layer, ModelConfig, ToyDiT};
pub use pipeline::{
    advance_frozen, freeze_lowest, integrate_full, relative_l2, run_pipeline, CachedDiT, LevelSelection, OracleField,
    PipelineConfig, PipelineOutput,
    PipelineState, PlanSource, TimingEntry, TimingLedger, VelocityModel,
};
