//! Attention with per-head partial RoPE and jointly factorized KV caches.
//!
//! * [`linalg`]: dense matrices, one-sided Jacobi SVD, rank truncation.
//! * [`rope`]: chunked rotary embedding and the relative-score form.
//! * [`attention`]: MHA decode over full, partial-RoPE and compressed caches.
//! * [`chunk_select`]: greedy, exhaustive, uniform and contribution selectors.
//! * [`lowrank`]: S-LRD / J-LRD factorization, cost accounting, allocation.

pub mod attention;
pub mod chunk_select;
pub mod error;
pub mod linalg;
pub mod lowrank;
pub mod rope;

pub use attention::{
    cache_bytes, decode_step, decode_step_compressed, forward_compressed, forward_full,
    forward_ropelite, AttentionWeights, CacheLayout, CompressedModel, DecodeOutput, KVCacheStore,
    LayerWeights, ModelConfig,
};
pub use chunk_select::{
    contribution_select, exhaustive_search, ropelite_search, uniform_select, CalibrationBatch,
    EliteSelection, ScoreMode, SearchStats, SelectionMethod,
};
pub use error::{Error, Result};
pub use linalg::{matmul, svd, truncated_factors, Matrix, SvdResult};
pub use lowrank::{
    allocate_configs, allocate_slrd_split, cost_jlrd, cost_slrd, decompose_jlrd, decompose_slrd,
    split_key_projection, CostReport, FactorMode, KeySplit, LowRankFactors,
};
pub use rope::{relative_score, rotate, ChunkSet, RopeParams};
