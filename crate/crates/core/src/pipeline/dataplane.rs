//! Cache-rank data plane shared by the simulated and live modes.
//!
//! Both modes construct the same messages and drive the same state machine,
//! so per-step selections are bit-identical by construction; the modes differ
//! only in how time advances.

use rand::SeedableRng;

use crate::kv::{self, KvCache, SelectionResult};
use crate::predictor::{self, QueryWindow};
use crate::trace::{generate_trace, DecodeTrace};

use super::{PipelineConfig, PipelineError, TraceSource};

/// Per-layer decode streams backing the data plane.
pub(super) enum Streams {
    /// Independent AR(1) stream per layer.
    PerLayer(Vec<DecodeTrace>),
    /// One external stream replicated across layers.
    Shared(DecodeTrace),
}

impl Streams {
    pub fn layer(&self, layer: usize) -> &DecodeTrace {
        match self {
            Streams::PerLayer(v) => &v[layer],
            Streams::Shared(t) => t,
        }
    }
}

fn layer_seed(seed: u64, layer: usize) -> u64 {
    let mut z = seed ^ (layer as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^ (z >> 31)
}

pub(super) fn build_streams(
    cfg: &PipelineConfig,
    source: &TraceSource<'_>,
) -> Result<Option<Streams>, PipelineError> {
    let positions = cfg.context_t0 + cfg.steps;
    match source {
        TraceSource::TimingOnly => Ok(None),
        TraceSource::Synthetic => {
            // burn one value so layer seeds stay decoupled from the raw seed
            let _ = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
            let layers = cfg.model.layers as usize;
            let mut traces = Vec::with_capacity(layers);
            for l in 0..layers {
                traces.push(generate_trace(
                    cfg.layout(),
                    cfg.batch,
                    positions,
                    cfg.trace_alpha,
                    cfg.trace_sigma,
                    layer_seed(cfg.seed, l),
                )?);
            }
            Ok(Some(Streams::PerLayer(traces)))
        }
        TraceSource::External(t) => {
            if t.layout != cfg.layout() || t.batch != cfg.batch {
                return Err(PipelineError::TraceMismatch(format!(
                    "trace layout/batch ({:?}, {}) vs config ({:?}, {})",
                    t.layout,
                    t.batch,
                    cfg.layout(),
                    cfg.batch
                )));
            }
            if t.steps < positions {
                return Err(PipelineError::TraceMismatch(format!(
                    "trace holds {} positions, need context {} + steps {}",
                    t.steps, cfg.context_t0, cfg.steps
                )));
            }
            Ok(Some(Streams::Shared((*t).clone())))
        }
    }
}

/// One layer's states for one decoding step (append/push layouts).
#[derive(Clone)]
pub(super) struct LayerStep {
    pub layer: usize,
    pub q: Vec<f32>,
    pub k: Vec<f32>,
    pub v: Vec<f32>,
}

/// Forward message: one pack's states for one step.
#[derive(Clone)]
pub(super) struct PackData {
    pub step: usize,
    pub pack: usize,
    pub layers: Vec<LayerStep>,
}

/// Init message: every token before the transition plus the W most recent
/// query embeddings per layer.
pub(super) struct InitData {
    pub tokens: usize,
    /// Per layer: per token (k, v) rows in append layout.
    pub layers: Vec<(usize, Vec<(Vec<f32>, Vec<f32>)>)>,
    /// Per layer: the last W query steps in push layout, oldest first.
    pub recent_queries: Vec<(usize, Vec<Vec<f32>>)>,
}

/// Trace position backing decode step `step`.
pub(super) fn step_position(cfg: &PipelineConfig, step: usize) -> usize {
    cfg.context_t0 + step
}

pub(super) fn make_pack_data(
    cfg: &PipelineConfig,
    streams: &Streams,
    step: usize,
    pack: usize,
) -> PackData {
    let (first, last) = cfg.pack_range(pack);
    let pos = step_position(cfg, step);
    PackData {
        step,
        pack,
        layers: (first..last)
            .map(|layer| {
                let t = streams.layer(layer);
                LayerStep {
                    layer,
                    q: t.step_queries(pos),
                    k: t.step_keys(pos),
                    v: t.step_values(pos),
                }
            })
            .collect(),
    }
}

pub(super) fn make_init_data(cfg: &PipelineConfig, streams: &Streams) -> InitData {
    // Everything decoded before the transition step θ−1.
    let tokens = cfg.context_t0 + cfg.threshold_step - 1;
    let w = cfg.regression.window;
    let first_q = tokens.saturating_sub(w);
    let layers = (0..cfg.model.layers as usize)
        .map(|layer| {
            let t = streams.layer(layer);
            let rows = (0..tokens)
                .map(|pos| (t.step_keys(pos), t.step_values(pos)))
                .collect();
            (layer, rows)
        })
        .collect();
    let recent_queries = (0..cfg.model.layers as usize)
        .map(|layer| {
            let t = streams.layer(layer);
            let qs = (first_q..tokens).map(|pos| t.step_queries(pos)).collect();
            (layer, qs)
        })
        .collect();
    InitData {
        tokens,
        layers,
        recent_queries,
    }
}

/// Cache-rank state: full KV store plus one query window per layer.
pub(super) struct CacheRank {
    cfg: PipelineConfig,
    kv: KvCache,
    windows: Vec<QueryWindow>,
}

impl CacheRank {
    pub fn new(cfg: &PipelineConfig) -> Self {
        let layout = cfg.layout();
        let layers = cfg.model.layers as usize;
        Self {
            cfg: cfg.clone(),
            kv: KvCache::new(layers, layout, cfg.batch),
            windows: (0..layers)
                .map(|_| {
                    QueryWindow::new(
                        cfg.batch,
                        layout.n_query_heads,
                        layout.head_dim,
                        cfg.regression.window,
                    )
                })
                .collect(),
        }
    }

    pub fn ingest_init(&mut self, init: &InitData) -> Result<(), PipelineError> {
        for (layer, rows) in &init.layers {
            for (k, v) in rows {
                self.kv.append(*layer, k, v)?;
            }
        }
        for (layer, qs) in &init.recent_queries {
            for q in qs {
                self.windows[*layer].push_step(q)?;
            }
        }
        Ok(())
    }

    /// Appends the pack's states, predicts the next query, and selects per
    /// layer. Returns selections in pack layer order, for the next step.
    pub fn process_pack(
        &mut self,
        pack: &PackData,
    ) -> Result<Vec<SelectionResult>, PipelineError> {
        let layout = self.cfg.layout();
        let mut out = Vec::with_capacity(pack.layers.len());
        for ls in &pack.layers {
            self.kv.append(ls.layer, &ls.k, &ls.v)?;
            self.windows[ls.layer].push_step(&ls.q)?;
            let predicted = predictor::predict(&self.windows[ls.layer], &self.cfg.regression)?;
            let scores = kv::criticality_scores(
                &predicted,
                &self.kv,
                ls.layer,
                layout,
                self.cfg.aggregation,
            )?;
            let selections = scores
                .iter()
                .map(|s| kv::select_tokens(s, self.cfg.select_c, kv::ProtectPolicy::default()))
                .collect::<Result<Vec<_>, _>>()?;
            out.push(kv::gather_filtered(&self.kv, ls.layer, &selections)?);
        }
        Ok(out)
    }
}
