//! Deterministic virtual-clock engine for the duo-rank protocol.
//!
//! The protocol's flow is structured — sequential packs on the inference
//! rank, FIFO channels, a single-server cache rank — so the schedule reduces
//! to forward recurrences over per-lane free times; no event queue is needed.

use super::dataplane::{self, CacheRank};
use super::{
    BindingConstraint, ConsumedPack, EventKind, OverlapVerdict, PipelineConfig, PipelineError,
    PipelineRun, PipelineTimeline, Rank, StallPolicy, StepSelections, TimelineEvent,
    TimelineMetrics, TraceSource, INIT_PACK,
};
use crate::kv::SelectionResult;

/// Smallest bandwidth (bytes/s) at which one pack's forward and return
/// transfers both fit inside that pack's inference latency:
/// bw = (pack_bytes + filtered_bytes) / (inference_latency − 2·launch),
/// maximized over packs. Zero payload needs zero bandwidth.
pub fn min_bandwidth(cfg: &PipelineConfig) -> Result<f64, PipelineError> {
    cfg.validate()?;
    let mut worst: f64 = 0.0;
    for pack in 0..cfg.n_packs() {
        let bytes = cfg.pack_unit_bytes(pack) + cfg.filtered_pack_bytes(pack);
        if bytes == 0.0 {
            continue;
        }
        let budget = cfg.inference_latency(pack) - 2.0 * cfg.latency.launch_overhead;
        if budget <= 0.0 {
            return Err(PipelineError::Infeasible(format!(
                "launch overhead {}s leaves no channel budget inside the {}s pack latency",
                cfg.latency.launch_overhead,
                cfg.inference_latency(pack)
            )));
        }
        worst = worst.max(bytes / budget);
    }
    Ok(worst)
}

struct ArrivedPack {
    time: f64,
    produced_from: usize,
    selections: Option<Vec<SelectionResult>>,
}

/// Runs the protocol under a virtual clock. Timing depends only on the
/// latency model and config (configured per-pack latencies, byte formulas),
/// never on data values, so `TraceSource::TimingOnly` produces the same
/// timeline as a data-plane run.
pub fn run_pipeline(
    cfg: &PipelineConfig,
    source: TraceSource<'_>,
) -> Result<PipelineRun, PipelineError> {
    cfg.validate()?;
    let streams = dataplane::build_streams(cfg, &source)?;
    let mut cache_rank = streams.as_ref().map(|_| CacheRank::new(cfg));

    let n = cfg.n_packs();
    let theta = cfg.threshold_step;
    let bw = cfg.latency.bandwidth;
    let launch = cfg.latency.launch_overhead;

    let mut events: Vec<TimelineEvent> = Vec::new();
    let mut consumed: Vec<ConsumedPack> = Vec::new();
    let mut selections_out: Vec<StepSelections> = Vec::new();

    let mut inference_free = 0.0f64;
    let mut fwd_free = 0.0f64;
    let mut ret_free = 0.0f64;
    let mut cache_free = 0.0f64;
    let mut arrived: Vec<Vec<ArrivedPack>> = (0..n).map(|_| Vec::new()).collect();
    let mut step_ends: Vec<f64> = Vec::with_capacity(cfg.steps);
    let mut step_stalls: Vec<f64> = vec![0.0; cfg.steps];

    let push = |events: &mut Vec<TimelineEvent>, rank, kind, step, pack, t_start, t_end| {
        events.push(TimelineEvent {
            rank,
            kind,
            step,
            pack,
            t_start,
            t_end,
        });
    };

    for s in 0..cfg.steps {
        // Init bulk transfer ships at the start of step θ−1.
        if s + 1 == theta {
            let start = fwd_free.max(inference_free);
            let end = start + cfg.init_bytes() / bw;
            push(&mut events, Rank::Channel, EventKind::Send, s, INIT_PACK, start, end);
            fwd_free = end;
            if let (Some(cr), Some(st)) = (cache_rank.as_mut(), streams.as_ref()) {
                cr.ingest_init(&dataplane::make_init_data(cfg, st))?;
            }
        }

        let mut step_sel: Option<StepSelections> = None;
        for i in 0..n {
            // Sparse steps consume the filtered pack prepared for (s, i).
            if s >= theta {
                let pick = match cfg.stall_policy {
                    StallPolicy::Wait => arrived[i]
                        .iter()
                        .position(|a| a.produced_from + 1 == s)
                        .map(|idx| (idx, arrived[i][idx].time)),
                    StallPolicy::ReusePrevious => {
                        // Freshest already-arrived selection; if none has ever
                        // arrived, fall back to waiting for the first.
                        let best = arrived[i]
                            .iter()
                            .enumerate()
                            .filter(|(_, a)| a.time <= inference_free)
                            .max_by(|(_, x), (_, y)| {
                                x.produced_from.cmp(&y.produced_from)
                            })
                            .map(|(idx, a)| (idx, a.time));
                        best.or_else(|| {
                            arrived[i]
                                .iter()
                                .enumerate()
                                .min_by(|(_, x), (_, y)| x.time.total_cmp(&y.time))
                                .map(|(idx, a)| (idx, a.time))
                        })
                    }
                };
                let (idx, ready) = pick.ok_or_else(|| {
                    PipelineError::InvalidConfig(format!(
                        "no filtered pack available for step {s} pack {i}"
                    ))
                })?;
                if ready > inference_free {
                    push(
                        &mut events,
                        Rank::Inference,
                        EventKind::Stall,
                        s,
                        i,
                        inference_free,
                        ready,
                    );
                    step_stalls[s] += ready - inference_free;
                    inference_free = ready;
                }
                push(&mut events, Rank::Inference, EventKind::Receive, s, i, ready, ready);
                let a = &arrived[i][idx];
                consumed.push(ConsumedPack {
                    step: s,
                    pack: i,
                    produced_from_step: a.produced_from,
                });
                if let Some(sel) = &a.selections {
                    let entry = step_sel.get_or_insert_with(|| StepSelections {
                        step: s,
                        produced_from: Vec::new(),
                        layers: Vec::new(),
                    });
                    entry.produced_from.push(a.produced_from);
                    entry.layers.extend(sel.iter().cloned());
                }
            }

            let start = inference_free;
            let end = start + cfg.inference_latency(i);
            push(&mut events, Rank::Inference, EventKind::Compute, s, i, start, end);
            inference_free = end;

            // From the transition step on, every pack's states go to the cache.
            if s + 1 >= theta {
                let f_start = fwd_free.max(end);
                let f_end = f_start + launch + cfg.pack_unit_bytes(i) / bw;
                push(&mut events, Rank::Channel, EventKind::Send, s, i, f_start, f_end);
                fwd_free = f_end;

                let c_start = cache_free.max(f_end);
                let c_end = c_start + cfg.cache_latency(i);
                push(&mut events, Rank::Cache, EventKind::Receive, s, i, f_end, f_end);
                push(&mut events, Rank::Cache, EventKind::Compute, s, i, c_start, c_end);
                cache_free = c_end;

                let produced = match (cache_rank.as_mut(), streams.as_ref()) {
                    (Some(cr), Some(st)) => {
                        Some(cr.process_pack(&dataplane::make_pack_data(cfg, st, s, i))?)
                    }
                    _ => None,
                };

                // The filtered pack targets step s+1; skip past the horizon.
                if s + 1 < cfg.steps {
                    let r_start = ret_free.max(c_end);
                    let r_end = r_start + launch + cfg.filtered_pack_bytes(i) / bw;
                    push(
                        &mut events,
                        Rank::Channel,
                        EventKind::Receive,
                        s + 1,
                        i,
                        r_start,
                        r_end,
                    );
                    ret_free = r_end;
                    arrived[i].push(ArrivedPack {
                        time: r_end,
                        produced_from: s,
                        selections: produced,
                    });
                }
            }
        }
        if let Some(sel) = step_sel {
            selections_out.push(sel);
        }
        step_ends.push(inference_free);
    }

    let metrics = compute_metrics(cfg, &step_ends, &step_stalls);
    Ok(PipelineRun {
        timeline: PipelineTimeline {
            events,
            metrics,
            consumed,
        },
        selections: selections_out,
    })
}

/// Derives TPOT/stall/overlap metrics from per-step end times and stalls.
/// The transition step θ (hit by the one-time init transfer) is excluded from
/// the steady-state window and reported separately.
pub(super) fn compute_metrics(
    cfg: &PipelineConfig,
    step_ends: &[f64],
    step_stalls: &[f64],
) -> TimelineMetrics {
    let steps = step_ends.len();
    let theta = cfg.threshold_step;
    let duration = |s: usize| {
        if s == 0 {
            step_ends[0]
        } else {
            step_ends[s] - step_ends[s - 1]
        }
    };
    let mut measured_steps = 0usize;
    let mut measured_time = 0.0f64;
    let mut stall = 0.0f64;
    let mut init_stall = 0.0f64;
    let mut total_time = 0.0f64;
    for s in 0..steps {
        total_time += duration(s);
        if s == theta {
            init_stall += step_stalls[s];
        } else {
            measured_steps += 1;
            measured_time += duration(s);
            stall += step_stalls[s];
        }
    }
    let tpot = if measured_steps > 0 {
        measured_time / measured_steps as f64
    } else {
        0.0
    };
    TimelineMetrics {
        steps,
        packs_per_step: cfg.n_packs(),
        sparse_steps: steps.saturating_sub(theta.min(steps)),
        tpot_seconds: tpot,
        tpot_all_seconds: if steps > 0 { total_time / steps as f64 } else { 0.0 },
        stall_seconds: stall,
        init_stall_seconds: init_stall,
        overlap_fraction: if measured_time > 0.0 {
            1.0 - stall / measured_time
        } else {
            1.0
        },
        measured_steps,
        ideal_tpot_seconds: cfg.ideal_tpot(),
    }
}

/// Fully overlapped iff the steady-state window has zero stalls and its TPOT
/// equals Σ per-pack inference latencies to 1e-9 relative. Otherwise reports
/// which per-pack demand exceeds the inference latency by more.
pub fn verify_overlap(timeline: &PipelineTimeline, cfg: &PipelineConfig) -> OverlapVerdict {
    let m = &timeline.metrics;
    let ideal = m.ideal_tpot_seconds;
    let tpot_ok = (m.tpot_seconds - ideal).abs() <= 1e-9 * ideal.abs();
    let fully = m.stall_seconds == 0.0 && tpot_ok;
    let binding = if fully {
        None
    } else {
        let mut channel_excess = f64::NEG_INFINITY;
        let mut cache_excess = f64::NEG_INFINITY;
        for pack in 0..cfg.n_packs() {
            let budget = cfg.inference_latency(pack);
            let demand = 2.0 * cfg.latency.launch_overhead
                + (cfg.pack_unit_bytes(pack) + cfg.filtered_pack_bytes(pack))
                    / cfg.latency.bandwidth;
            channel_excess = channel_excess.max(demand - budget);
            cache_excess = cache_excess.max(cfg.cache_latency(pack) - budget);
        }
        Some(if channel_excess >= cache_excess {
            BindingConstraint::Channel
        } else {
            BindingConstraint::CacheCompute
        })
    };
    OverlapVerdict {
        fully_overlapped: fully,
        measured_tpot: m.tpot_seconds,
        ideal_tpot: ideal,
        stall_seconds: m.stall_seconds,
        binding,
    }
}
