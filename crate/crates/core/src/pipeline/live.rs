//! Live two-worker execution: one inference thread and one cache thread
//! coordinated only through two FIFO message queues, with real (small-scale)
//! attention and selection compute and wall-clock timestamps.
//!
//! Neither worker reads the other's state; everything crosses the channels.
//! Under the wait policy the consumed selections are bit-identical to the
//! deterministic engine's — the timing differs, the data must not.

use std::sync::Arc;
use std::thread;
use std::time::Instant;

use crossbeam_channel::{unbounded, Receiver, Sender};

use super::dataplane::{self, CacheRank, InitData, PackData, Streams};
use super::{
    ConsumedPack, EventKind, PipelineConfig, PipelineError, PipelineRun, PipelineTimeline, Rank,
    StallPolicy, StepSelections, TimelineEvent, INIT_PACK,
};
use crate::attention;
use crate::kv::{KvCache, SelectionResult};

enum FwdMsg {
    Init(InitData),
    Pack(PackData),
    Shutdown,
}

struct RetMsg {
    step: usize,
    pack: usize,
    produced_from: usize,
    selections: Vec<SelectionResult>,
}

fn cache_worker(
    cfg: PipelineConfig,
    fwd_rx: Receiver<FwdMsg>,
    ret_tx: Sender<RetMsg>,
    epoch: Instant,
) -> Result<Vec<TimelineEvent>, PipelineError> {
    let mut rank = CacheRank::new(&cfg);
    let mut events = Vec::new();
    let now = |e: &Instant| e.elapsed().as_secs_f64();
    while let Ok(msg) = fwd_rx.recv() {
        match msg {
            FwdMsg::Init(init) => {
                let t = now(&epoch);
                events.push(TimelineEvent {
                    rank: Rank::Cache,
                    kind: EventKind::Receive,
                    step: cfg.threshold_step - 1,
                    pack: INIT_PACK,
                    t_start: t,
                    t_end: t,
                });
                rank.ingest_init(&init)?;
            }
            FwdMsg::Pack(pack) => {
                let (step, pack_idx) = (pack.step, pack.pack);
                let t_recv = now(&epoch);
                events.push(TimelineEvent {
                    rank: Rank::Cache,
                    kind: EventKind::Receive,
                    step,
                    pack: pack_idx,
                    t_start: t_recv,
                    t_end: t_recv,
                });
                let t0 = now(&epoch);
                let selections = rank.process_pack(&pack)?;
                events.push(TimelineEvent {
                    rank: Rank::Cache,
                    kind: EventKind::Compute,
                    step,
                    pack: pack_idx,
                    t_start: t0,
                    t_end: now(&epoch),
                });
                // Filtered packs target step+1; none is produced past the horizon.
                if step + 1 < cfg.steps {
                    let send_t = now(&epoch);
                    events.push(TimelineEvent {
                        rank: Rank::Channel,
                        kind: EventKind::Receive,
                        step: step + 1,
                        pack: pack_idx,
                        t_start: send_t,
                        t_end: send_t,
                    });
                    ret_tx
                        .send(RetMsg {
                            step: step + 1,
                            pack: pack_idx,
                            produced_from: step,
                            selections,
                        })
                        .map_err(|_| {
                            PipelineError::WorkerPanic("return channel closed early".into())
                        })?;
                }
            }
            FwdMsg::Shutdown => break,
        }
    }
    Ok(events)
}

/// Runs the protocol with two real concurrent workers and real message
/// queues. Requires a data plane (`Synthetic` or `External`).
pub fn run_live(cfg: &PipelineConfig, source: TraceSource<'_>) -> Result<PipelineRun, PipelineError> {
    cfg.validate()?;
    let streams = dataplane::build_streams(cfg, &source)?.ok_or_else(|| {
        PipelineError::InvalidConfig("live mode needs a data plane (synthetic or external trace)".into())
    })?;
    let streams = Arc::new(streams);
    let epoch = Instant::now();
    let now = || epoch.elapsed().as_secs_f64();

    let (fwd_tx, fwd_rx) = unbounded::<FwdMsg>();
    let (ret_tx, ret_rx) = unbounded::<RetMsg>();

    let cache_cfg = cfg.clone();
    let cache_handle =
        thread::spawn(move || cache_worker(cache_cfg, fwd_rx, ret_tx, epoch));

    let inference = inference_worker(cfg, &streams, fwd_tx, ret_rx, epoch);

    let cache_events = match cache_handle.join() {
        Ok(r) => r?,
        Err(p) => {
            return Err(PipelineError::WorkerPanic(format!(
                "cache worker panicked: {p:?}"
            )))
        }
    };
    let (mut events, consumed, selections, step_ends, step_stalls) = inference?;
    let _ = now;
    events.extend(cache_events);
    events.sort_by(|a, b| a.t_start.total_cmp(&b.t_start));

    let metrics = super::sim::compute_metrics(cfg, &step_ends, &step_stalls);
    Ok(PipelineRun {
        timeline: PipelineTimeline {
            events,
            metrics,
            consumed,
        },
        selections,
    })
}

type InferenceOut = (
    Vec<TimelineEvent>,
    Vec<ConsumedPack>,
    Vec<StepSelections>,
    Vec<f64>,
    Vec<f64>,
);

use super::TraceSource;

fn inference_worker(
    cfg: &PipelineConfig,
    streams: &Arc<Streams>,
    fwd_tx: Sender<FwdMsg>,
    ret_rx: Receiver<RetMsg>,
    epoch: Instant,
) -> Result<InferenceOut, PipelineError> {
    let now = || epoch.elapsed().as_secs_f64();
    let layout = cfg.layout();
    let layers = cfg.model.layers as usize;
    let n = cfg.n_packs();
    let theta = cfg.threshold_step;

    let mut events = Vec::new();
    let mut consumed = Vec::new();
    let mut selections_out: Vec<StepSelections> = Vec::new();
    let mut step_ends = Vec::with_capacity(cfg.steps);
    let mut step_stalls = vec![0.0f64; cfg.steps];

    // Local dense-phase cache, prefilled with the entry context.
    let mut local = KvCache::new(layers, layout, cfg.batch);
    for pos in 0..cfg.context_t0 {
        for layer in 0..layers {
            let t = streams.layer(layer);
            local.append(layer, &t.step_keys(pos), &t.step_values(pos))?;
        }
    }

    // Reuse-policy store of the freshest arrived selection per pack.
    let mut stash: Vec<Option<RetMsg>> = (0..n).map(|_| None).collect();

    let send = |tx: &Sender<FwdMsg>, msg: FwdMsg| {
        tx.send(msg)
            .map_err(|_| PipelineError::WorkerPanic("forward channel closed early".into()))
    };

    for s in 0..cfg.steps {
        if s + 1 == theta {
            let t = now();
            events.push(TimelineEvent {
                rank: Rank::Channel,
                kind: EventKind::Send,
                step: s,
                pack: INIT_PACK,
                t_start: t,
                t_end: t,
            });
            send(&fwd_tx, FwdMsg::Init(dataplane::make_init_data(cfg, streams)))?;
        }
        let pos = dataplane::step_position(cfg, s);
        if s < theta {
            // Dense step: append this token's KV locally, attend over everything.
            for layer in 0..layers {
                let t = streams.layer(layer);
                local.append(layer, &t.step_keys(pos), &t.step_values(pos))?;
            }
        }
        let mut step_sel: Option<StepSelections> = None;
        for i in 0..n {
            let (first, last) = cfg.pack_range(i);
            let mut pack_selections: Option<Vec<SelectionResult>> = None;
            if s >= theta {
                let (msg, waited) = match cfg.stall_policy {
                    StallPolicy::Wait => {
                        let t0 = now();
                        let msg = ret_rx.recv().map_err(|_| {
                            PipelineError::WorkerPanic("return channel closed early".into())
                        })?;
                        debug_assert!(msg.step == s && msg.pack == i, "FIFO order");
                        (msg, now() - t0)
                    }
                    StallPolicy::ReusePrevious => {
                        while let Ok(m) = ret_rx.try_recv() {
                            stash[m.pack] = Some(m);
                        }
                        match stash[i].take() {
                            Some(m) => (m, 0.0),
                            None => {
                                let t0 = now();
                                let m = ret_rx.recv().map_err(|_| {
                                    PipelineError::WorkerPanic(
                                        "return channel closed early".into(),
                                    )
                                })?;
                                (m, now() - t0)
                            }
                        }
                    }
                };
                if waited > 0.0 {
                    let t = now();
                    events.push(TimelineEvent {
                        rank: Rank::Inference,
                        kind: EventKind::Stall,
                        step: s,
                        pack: i,
                        t_start: t - waited,
                        t_end: t,
                    });
                    step_stalls[s] += waited;
                }
                let t = now();
                events.push(TimelineEvent {
                    rank: Rank::Inference,
                    kind: EventKind::Receive,
                    step: s,
                    pack: i,
                    t_start: t,
                    t_end: t,
                });
                consumed.push(ConsumedPack {
                    step: s,
                    pack: i,
                    produced_from_step: msg.produced_from,
                });
                let entry = step_sel.get_or_insert_with(|| StepSelections {
                    step: s,
                    produced_from: Vec::new(),
                    layers: Vec::new(),
                });
                entry.produced_from.push(msg.produced_from);
                entry.layers.extend(msg.selections.iter().cloned());
                if matches!(cfg.stall_policy, StallPolicy::ReusePrevious) {
                    pack_selections = Some(msg.selections.clone());
                    stash[i] = Some(msg);
                } else {
                    pack_selections = Some(msg.selections);
                }
            }

            // Real small-scale attention for this pack's layers.
            let t0 = now();
            for layer in first..last {
                let t = streams.layer(layer);
                let q = t.step_queries(pos);
                if s >= theta {
                    let sels = pack_selections.as_ref().expect("sparse step has selections");
                    let sel = &sels[layer - first];
                    attention::sparse_attention(&q, sel, layout)?;
                } else {
                    attention::full_attention(&q, &local, layer)?;
                }
            }
            events.push(TimelineEvent {
                rank: Rank::Inference,
                kind: EventKind::Compute,
                step: s,
                pack: i,
                t_start: t0,
                t_end: now(),
            });

            if s + 1 >= theta {
                let t = now();
                events.push(TimelineEvent {
                    rank: Rank::Channel,
                    kind: EventKind::Send,
                    step: s,
                    pack: i,
                    t_start: t,
                    t_end: t,
                });
                send(&fwd_tx, FwdMsg::Pack(dataplane::make_pack_data(cfg, streams, s, i)))?;
            }
        }
        if let Some(sel) = step_sel {
            selections_out.push(sel);
        }
        step_ends.push(now());
    }
    send(&fwd_tx, FwdMsg::Shutdown)?;
    drop(fwd_tx);

    // Quiescence: nothing may remain queued toward the inference rank.
    if ret_rx.try_recv().is_ok() {
        return Err(PipelineError::WorkerPanic(
            "return queue not drained at shutdown".into(),
        ));
    }
    Ok((events, consumed, selections_out, step_ends, step_stalls))
}
