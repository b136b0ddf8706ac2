//! Executable model of the asynchronous duo-rank decode workflow: an
//! Inference-Rank worker and a Cache-Rank worker exchanging packed per-layer
//! states over latency-modeled FIFO channels.
//!
//! Two execution modes share one protocol: a deterministic virtual-clock
//! engine ([`sim::run_pipeline`]) and a live two-thread run with real message
//! queues and wall-clock timestamps ([`live::run_live`]). Per-step selections
//! are bit-identical across modes under the wait policy; only timing differs.

mod live;
mod presets;
mod sim;

pub use live::run_live;
pub use presets::{scenario_preset, scenario_presets, ScenarioPreset};
pub use sim::{min_bandwidth, run_pipeline, verify_overlap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flops::ModelConfig;
use crate::kv::{AttentionLayout, ScoreAggregation, SelectionError, SelectionResult};
use crate::predictor::{PredictorError, RegressionConfig};
use crate::trace::{DecodeTrace, TraceError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline config: {0}")]
    InvalidConfig(String),
    #[error("infeasible latency model: {0}")]
    Infeasible(String),
    #[error("trace does not fit the config: {0}")]
    TraceMismatch(String),
    #[error("worker panicked: {0}")]
    WorkerPanic(String),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Attention(#[from] crate::attention::AttentionError),
}

/// Channel and compute timing parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    /// Channel rate in bytes/second, per direction (full duplex).
    pub bandwidth: f64,
    /// Fixed per-message launch overhead in seconds.
    pub launch_overhead: f64,
    /// Inference-rank forward compute per full pack, seconds.
    pub inference_latency_per_pack: f64,
    /// Cache-rank filtering compute per full pack, seconds.
    pub cache_latency_per_pack: f64,
    /// Bytes per state element on the wire (2 = half precision).
    pub element_width: u32,
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self {
            bandwidth: 100.0e9,
            launch_overhead: 0.0,
            inference_latency_per_pack: 1e-3,
            cache_latency_per_pack: 1e-3,
            element_width: 2,
        }
    }
}

impl LatencyModel {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(self.bandwidth > 0.0) || !self.bandwidth.is_finite() {
            return Err(PipelineError::InvalidConfig(
                "bandwidth must be positive and finite".into(),
            ));
        }
        for (name, v) in [
            ("launch_overhead", self.launch_overhead),
            ("inference_latency_per_pack", self.inference_latency_per_pack),
            ("cache_latency_per_pack", self.cache_latency_per_pack),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(PipelineError::InvalidConfig(format!(
                    "{name} must be finite and >= 0"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StallPolicy {
    /// Block the step until its filtered pack arrives (correctness-preserving).
    Wait,
    /// Proceed with the newest previously arrived selection; never stall
    /// (except when no selection exists yet).
    ReusePrevious,
}

/// Full duo-rank scenario description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    pub batch: usize,
    /// Tokens already in the cache when the run starts.
    pub context_t0: usize,
    /// Selected tokens per (batch, kv-head) per layer.
    pub select_c: usize,
    /// Step index θ_t at which sparse decoding engages; the init transfer
    /// happens at θ_t − 1.
    pub threshold_step: usize,
    /// Consecutive layers per packed unit.
    pub pack_layers: usize,
    /// Decode steps to run.
    pub steps: usize,
    pub latency: LatencyModel,
    pub stall_policy: StallPolicy,
    pub regression: RegressionConfig,
    pub aggregation: ScoreAggregation,
    /// Seed for the synthetic per-layer data plane.
    pub seed: u64,
    pub trace_alpha: f32,
    pub trace_sigma: f32,
}

impl PipelineConfig {
    pub fn layout(&self) -> AttentionLayout {
        AttentionLayout {
            n_query_heads: self.model.query_heads as usize,
            n_kv_heads: self.model.kv_heads as usize,
            head_dim: self.model.head_dim as usize,
        }
    }

    pub fn n_packs(&self) -> usize {
        (self.model.layers as usize).div_ceil(self.pack_layers)
    }

    /// Layer range [first, last) of one pack; the last pack may be short.
    pub fn pack_range(&self, pack: usize) -> (usize, usize) {
        let first = pack * self.pack_layers;
        let last = (first + self.pack_layers).min(self.model.layers as usize);
        (first, last)
    }

    pub fn pack_layer_count(&self, pack: usize) -> usize {
        let (first, last) = self.pack_range(pack);
        last - first
    }

    /// Per-pack compute latencies scale with the layer count of a short pack.
    pub fn inference_latency(&self, pack: usize) -> f64 {
        self.latency.inference_latency_per_pack * self.pack_layer_count(pack) as f64
            / self.pack_layers as f64
    }

    pub fn cache_latency(&self, pack: usize) -> f64 {
        self.latency.cache_latency_per_pack * self.pack_layer_count(pack) as f64
            / self.pack_layers as f64
    }

    /// Σ over packs of per-pack inference latency: the fully overlapped TPOT.
    pub fn ideal_tpot(&self) -> f64 {
        (0..self.n_packs()).map(|p| self.inference_latency(p)).sum()
    }

    /// Forward payload of one pack: per layer, query + key + value states of
    /// one token, B·(N_q + 2·N_kv)·D_h elements.
    pub fn pack_unit_bytes(&self, pack: usize) -> f64 {
        let l = self.pack_layer_count(pack) as f64;
        let per_layer = self.batch as f64
            * (self.model.query_heads + 2 * self.model.kv_heads) as f64
            * self.model.head_dim as f64
            * f64::from(self.latency.element_width);
        l * per_layer
    }

    /// Return payload of one pack: per layer, C gathered K/V rows per
    /// (batch, kv-head) plus 4 index bytes per selected token.
    pub fn filtered_pack_bytes(&self, pack: usize) -> f64 {
        let l = self.pack_layer_count(pack) as f64;
        let streams = self.batch as f64 * self.model.kv_heads as f64;
        let kv = streams
            * self.select_c as f64
            * 2.0
            * self.model.head_dim as f64
            * f64::from(self.latency.element_width);
        let idx = streams * self.select_c as f64 * 4.0;
        l * (kv + idx)
    }

    /// One-time init transfer: the whole cache before step θ_t−1 plus the W
    /// most recent query embeddings, across all layers.
    pub fn init_bytes(&self) -> f64 {
        let tokens = (self.context_t0 + self.threshold_step.saturating_sub(1)) as f64;
        let kv = tokens
            * self.batch as f64
            * self.model.kv_heads as f64
            * 2.0
            * self.model.head_dim as f64
            * f64::from(self.latency.element_width);
        let queries = self.regression.window as f64
            * self.batch as f64
            * self.model.query_heads as f64
            * self.model.head_dim as f64
            * f64::from(self.latency.element_width);
        self.model.layers as f64 * kv + queries
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.model
            .validate()
            .map_err(|e| PipelineError::InvalidConfig(e.to_string()))?;
        self.latency.validate()?;
        self.regression
            .validate()
            .map_err(|e| PipelineError::InvalidConfig(e.to_string()))?;
        if self.batch == 0 || self.select_c == 0 || self.steps == 0 {
            return Err(PipelineError::InvalidConfig(
                "batch, select_c and steps must be positive".into(),
            ));
        }
        if self.pack_layers == 0 || self.pack_layers > self.model.layers as usize {
            return Err(PipelineError::InvalidConfig(format!(
                "pack_layers {} must be in [1, {}]",
                self.pack_layers, self.model.layers
            )));
        }
        if self.threshold_step < self.regression.window {
            return Err(PipelineError::InvalidConfig(format!(
                "threshold step {} must be >= window {} so the query window is warm",
                self.threshold_step, self.regression.window
            )));
        }
        if self.threshold_step < 1 {
            return Err(PipelineError::InvalidConfig(
                "threshold step must be >= 1 (the init transfer runs at threshold − 1)".into(),
            ));
        }
        if self.context_t0 + self.threshold_step < self.regression.window + 1 {
            return Err(PipelineError::InvalidConfig(
                "not enough prior tokens to warm the query window at the threshold".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rank {
    Inference,
    Cache,
    Channel,
}

/// Channel events use `send` for the inference→cache direction and `receive`
/// for the cache→inference return direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Compute,
    Send,
    Receive,
    Stall,
}

/// The init bulk transfer is a channel send whose pack index is this sentinel
/// (one past the last pack).
pub const INIT_PACK: usize = usize::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimelineEvent {
    pub rank: Rank,
    pub kind: EventKind,
    pub step: usize,
    pub pack: usize,
    pub t_start: f64,
    pub t_end: f64,
}

/// Which producer step each consumed filtered pack came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsumedPack {
    pub step: usize,
    pub pack: usize,
    pub produced_from_step: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineMetrics {
    pub steps: usize,
    pub packs_per_step: usize,
    pub sparse_steps: usize,
    /// Steady-state TPOT: mean step duration excluding the transition step
    /// θ_t, whose one-time init transfer is reported separately.
    pub tpot_seconds: f64,
    /// Mean step duration over every step including the transition.
    pub tpot_all_seconds: f64,
    /// Stall total within the measured (steady-state) window.
    pub stall_seconds: f64,
    /// Stall attributable to the init transfer at the transition step.
    pub init_stall_seconds: f64,
    /// 1 − stall / Σ measured step durations.
    pub overlap_fraction: f64,
    pub measured_steps: usize,
    pub ideal_tpot_seconds: f64,
}

/// Ordered event log plus derived metrics and causality bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineTimeline {
    pub events: Vec<TimelineEvent>,
    pub metrics: TimelineMetrics,
    pub consumed: Vec<ConsumedPack>,
}

/// Data-plane record of one sparse step's consumed selections.
pub struct StepSelections {
    pub step: usize,
    /// Producer step per pack (equals step − 1 under the wait policy).
    pub produced_from: Vec<usize>,
    /// One selection per layer.
    pub layers: Vec<SelectionResult>,
}

pub struct PipelineRun {
    pub timeline: PipelineTimeline,
    /// Present when a data plane ran (empty for timing-only runs).
    pub selections: Vec<StepSelections>,
}

/// What drives the data plane.
pub enum TraceSource<'a> {
    /// Timing only; configured latencies make timing independent of values.
    TimingOnly,
    /// Per-layer AR(1) streams derived from the config seed.
    Synthetic,
    /// One externally supplied stream, replicated across layers. Must cover
    /// context_t0 + steps positions.
    External(&'a DecodeTrace),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BindingConstraint {
    Channel,
    CacheCompute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapVerdict {
    pub fully_overlapped: bool,
    pub measured_tpot: f64,
    pub ideal_tpot: f64,
    pub stall_seconds: f64,
    pub binding: Option<BindingConstraint>,
}

impl PipelineTimeline {
    /// On-rank events must not overlap in time; channel events respect FIFO
    /// per direction.
    pub fn audit_ordering(&self) -> Result<(), String> {
        let lanes: [(Rank, Option<EventKind>); 4] = [
            (Rank::Inference, None),
            (Rank::Cache, None),
            (Rank::Channel, Some(EventKind::Send)),
            (Rank::Channel, Some(EventKind::Receive)),
        ];
        for (rank, kind) in lanes {
            let mut last_end = f64::NEG_INFINITY;
            for e in self.events.iter().filter(|e| {
                e.rank == rank
                    && kind.map_or(true, |k| e.kind == k)
                    && !(e.rank != Rank::Channel && e.kind == EventKind::Receive)
            }) {
                if e.t_start < last_end - 1e-12 {
                    return Err(format!(
                        "overlapping events on {rank:?}: {:?} starts at {} before {}",
                        e.kind, e.t_start, last_end
                    ));
                }
                last_end = last_end.max(e.t_end);
            }
        }
        Ok(())
    }

    /// Every filtered pack consumed at step t was produced from step ≤ t−1,
    /// and exactly t−1 under the wait policy.
    pub fn audit_causality(&self, wait_policy: bool) -> Result<(), String> {
        for c in &self.consumed {
            if c.produced_from_step + 1 > c.step {
                return Err(format!(
                    "pack ({}, {}) consumed state from step {} (not earlier than {})",
                    c.step, c.pack, c.produced_from_step, c.step
                ));
            }
            if wait_policy && c.produced_from_step + 1 != c.step {
                return Err(format!(
                    "wait policy expects freshness lag 1, got lag {} at step {}",
                    c.step - c.produced_from_step,
                    c.step
                ));
            }
        }
        Ok(())
    }

    /// Message conservation: every forward pack is processed exactly once and
    /// every returned filtered pack is consumed exactly once.
    pub fn audit_conservation(&self) -> Result<(), String> {
        let count = |rank, kind, init: bool| {
            self.events
                .iter()
                .filter(|e| {
                    e.rank == rank && e.kind == kind && (init || e.pack != INIT_PACK)
                })
                .count()
        };
        let fwd_sends = count(Rank::Channel, EventKind::Send, false);
        let cache_computes = count(Rank::Cache, EventKind::Compute, false);
        if fwd_sends != cache_computes {
            return Err(format!(
                "{fwd_sends} pack sends vs {cache_computes} cache computes"
            ));
        }
        let returns = count(Rank::Channel, EventKind::Receive, false);
        if returns != self.consumed.len() {
            return Err(format!(
                "{returns} returned filtered packs vs {} consumed",
                self.consumed.len()
            ));
        }
        Ok(())
    }
}

/// Rounds event times to 9 decimal places and serializes events plus a final
/// metrics object, one JSON array.
pub fn timeline_to_json(timeline: &PipelineTimeline) -> serde_json::Value {
    let ns = |t: f64| (t * 1e9).round() / 1e9;
    let mut items: Vec<serde_json::Value> = timeline
        .events
        .iter()
        .map(|e| {
            serde_json::json!({
                "rank": e.rank,
                "kind": e.kind,
                "step": e.step,
                "pack": if e.pack == INIT_PACK { serde_json::Value::String("init".into()) } else { e.pack.into() },
                "t_start": ns(e.t_start),
                "t_end": ns(e.t_end),
            })
        })
        .collect();
    items.push(serde_json::json!({ "metrics": timeline.metrics }));
    serde_json::Value::Array(items)
}
