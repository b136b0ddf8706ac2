//! Selection-quality evaluation over decode traces: temporal overlap across
//! token distances and prepared-ahead selector overlap against the true
//! next-query selection.
//!
//! At each measured step t the candidate set is the cache after step t
//! (tokens 0..=t). Temporal rows compare S(q_{t−d}) with S(q_t); selector rows
//! compare the selector's prepared-for-step-t+1 selection with S(q_{t+1}),
//! both over that same cache, so Eq.-style equal-cardinality overlap applies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{self, AttentionError};
use crate::kv::{self, ScoreAggregation, SelectionError};
use crate::linalg::LinalgError;
use crate::predictor::{self, PredictorError, QueryWindow, RegressionConfig};
use crate::trace::DecodeTrace;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("trace too short: need at least {needed} steps, got {got}")]
    InsufficientTrace { needed: usize, got: usize },
    #[error("invalid evaluation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Selection strategies under comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectorKind {
    /// Selects with the true next query — overlap 1.0 by construction.
    OracleNextQuery,
    /// Eq.-4 single-window regressive prediction.
    PredictedSingle,
    /// Assembled average-pooled prediction.
    PredictedAssembled,
    /// Token-level selection with the current query (one step stale).
    LastQuery,
    /// Page-bound selection with the current query.
    PageLevel { page_size: usize },
    /// Uniform random subset, the floor baseline.
    Random { seed: u64 },
}

impl SelectorKind {
    pub fn label(&self) -> String {
        match self {
            Self::OracleNextQuery => "oracle".into(),
            Self::PredictedSingle => "single".into(),
            Self::PredictedAssembled => "assembled".into(),
            Self::LastQuery => "last-query".into(),
            Self::PageLevel { page_size } => format!("page-p{page_size}"),
            Self::Random { .. } => "random".into(),
        }
    }

    /// Parses labels like `oracle`, `assembled`, `page:16`, `random:7`.
    pub fn parse(s: &str) -> Result<Self, EvalError> {
        let (head, arg) = match s.split_once(':') {
            Some((h, a)) => (h, Some(a)),
            None => (s, None),
        };
        let num = |a: Option<&str>, what: &str| -> Result<u64, EvalError> {
            a.ok_or_else(|| EvalError::InvalidConfig(format!("selector {head} needs :{what}")))?
                .parse::<u64>()
                .map_err(|e| EvalError::InvalidConfig(format!("selector {s}: {e}")))
        };
        match head {
            "oracle" => Ok(Self::OracleNextQuery),
            "single" => Ok(Self::PredictedSingle),
            "assembled" => Ok(Self::PredictedAssembled),
            "last-query" | "last" => Ok(Self::LastQuery),
            "page" => Ok(Self::PageLevel {
                page_size: num(arg, "page-size")? as usize,
            }),
            "random" => Ok(Self::Random {
                seed: arg.map_or(Ok(0), |a| {
                    a.parse::<u64>()
                        .map_err(|e| EvalError::InvalidConfig(format!("selector {s}: {e}")))
                })?,
            }),
            _ => Err(EvalError::InvalidConfig(format!("unknown selector '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Selection cardinality C.
    pub select_c: usize,
    /// Token distances d for temporal overlap rows.
    pub distances: Vec<usize>,
    /// First measured step; steps t in [warmup, steps−1) are evaluated.
    pub warmup: usize,
    pub regression: RegressionConfig,
    pub aggregation: ScoreAggregation,
}

/// One overlap measurement, averaged over (batch, kv-head) streams.
/// `distance = 0` marks prepared-selection-vs-true-next rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OverlapRow {
    pub step: usize,
    pub selector: String,
    pub distance: usize,
    pub overlap: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OverlapSummary {
    pub selector: String,
    pub distance: usize,
    pub mean: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OverlapReport {
    pub rows: Vec<OverlapRow>,
    pub summaries: Vec<OverlapSummary>,
}

impl OverlapReport {
    pub fn summary(&self, selector: &str, distance: usize) -> Option<&OverlapSummary> {
        self.summaries
            .iter()
            .find(|s| s.selector == selector && s.distance == distance)
    }
}

pub const TEMPORAL_LABEL: &str = "temporal";

fn validate(
    trace: &DecodeTrace,
    kinds: &[SelectorKind],
    cfg: &EvalConfig,
) -> Result<(), EvalError> {
    cfg.regression
        .validate()
        .map_err(EvalError::Predictor)?;
    if cfg.select_c == 0 {
        return Err(EvalError::InvalidConfig("select_c must be >= 1".into()));
    }
    let max_d = cfg.distances.iter().copied().max().unwrap_or(0);
    if cfg.warmup < max_d {
        return Err(EvalError::InvalidConfig(format!(
            "warmup {} must cover the largest distance {max_d}",
            cfg.warmup
        )));
    }
    if cfg.warmup + 1 < cfg.select_c {
        return Err(EvalError::InvalidConfig(format!(
            "C = {} exceeds the cache size {} at the first measured step",
            cfg.select_c,
            cfg.warmup + 1
        )));
    }
    let uses_prediction = kinds.iter().any(|k| {
        matches!(
            k,
            SelectorKind::PredictedSingle | SelectorKind::PredictedAssembled
        )
    });
    if uses_prediction && cfg.warmup + 1 < cfg.regression.window {
        return Err(EvalError::InvalidConfig(format!(
            "warmup {} leaves the window (W = {}) cold at the first measured step",
            cfg.warmup, cfg.regression.window
        )));
    }
    let needed = cfg.warmup + 2;
    if trace.steps < needed {
        return Err(EvalError::InsufficientTrace {
            needed,
            got: trace.steps,
        });
    }
    Ok(())
}

fn mix_seed(seed: u64, t: usize, b: usize, h: usize) -> u64 {
    // splitmix-style stirring of the lane coordinates into the stream seed
    let mut z = seed
        ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (b as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9)
        ^ (h as u64).wrapping_mul(0x94D0_49BB_1331_11EB);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn random_subset(n: usize, c: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..c {
        let j = rng.random_range(i..n);
        pool.swap(i, j);
    }
    let mut out: Vec<usize> = pool[..c].to_vec();
    out.sort_unstable();
    out
}

/// Group queries of one kv-head for a raw per-query-head tensor slice.
fn group_of<'a>(
    trace: &'a DecodeTrace,
    b: usize,
    kvh: usize,
    t: usize,
) -> Vec<&'a [f32]> {
    let g = trace.layout.group_size();
    (0..g)
        .map(|gi| trace.queries.vector(b, kvh * g + gi, t))
        .collect()
}

fn select_top(
    group: &[&[f32]],
    keys: &[f32],
    n_tokens: usize,
    dim: usize,
    c: usize,
    agg: ScoreAggregation,
) -> Result<Vec<usize>, EvalError> {
    let scores = kv::group_scores(group, keys, n_tokens, dim, agg);
    Ok(kv::select_tokens(&scores, c, kv::ProtectPolicy::default())?.indices)
}

/// Runs temporal-overlap rows plus one prepared-selection row per selector
/// kind, sharing the temporal computation across kinds.
pub fn evaluate_selectors(
    trace: &DecodeTrace,
    kinds: &[SelectorKind],
    cfg: &EvalConfig,
) -> Result<OverlapReport, EvalError> {
    validate(trace, kinds, cfg)?;
    let layout = trace.layout;
    let d = layout.head_dim;
    let streams: Vec<(usize, usize)> = (0..trace.batch)
        .flat_map(|b| (0..layout.n_kv_heads).map(move |kvh| (b, kvh)))
        .collect();
    let measured: Vec<usize> = (cfg.warmup..trace.steps - 1).collect();

    let step_rows: Vec<Result<Vec<OverlapRow>, EvalError>> = measured
        .par_iter()
        .map(|&t| {
            let n_tokens = t + 1;
            let mut rows = Vec::new();

            // Per-stream true next-query selections (the comparison target).
            let mut truth: Vec<Vec<usize>> = Vec::with_capacity(streams.len());
            for &(b, kvh) in &streams {
                let keys = trace.keys.head_block(b, kvh);
                truth.push(select_top(
                    &group_of(trace, b, kvh, t + 1),
                    keys,
                    n_tokens,
                    d,
                    cfg.select_c,
                    cfg.aggregation,
                )?);
            }

            // Temporal locality rows: S(q_{t−d}) vs S(q_t) over the same cache.
            if !cfg.distances.is_empty() {
                let mut current: Vec<Vec<usize>> = Vec::with_capacity(streams.len());
                for &(b, kvh) in &streams {
                    let keys = trace.keys.head_block(b, kvh);
                    current.push(select_top(
                        &group_of(trace, b, kvh, t),
                        keys,
                        n_tokens,
                        d,
                        cfg.select_c,
                        cfg.aggregation,
                    )?);
                }
                for &dist in &cfg.distances {
                    let mut acc = 0.0;
                    for (si, &(b, kvh)) in streams.iter().enumerate() {
                        let keys = trace.keys.head_block(b, kvh);
                        let past = select_top(
                            &group_of(trace, b, kvh, t - dist),
                            keys,
                            n_tokens,
                            d,
                            cfg.select_c,
                            cfg.aggregation,
                        )?;
                        acc += kv::overlap_ratio(&past, &current[si])?;
                    }
                    rows.push(OverlapRow {
                        step: t,
                        selector: TEMPORAL_LABEL.into(),
                        distance: dist,
                        overlap: acc / streams.len() as f64,
                    });
                }
            }

            // Prediction window over the last W queries up to step t.
            let window_len = cfg.regression.window.min(t + 1);
            let mut window = QueryWindow::new(
                trace.batch,
                layout.n_query_heads,
                d,
                cfg.regression.window,
            );
            for s in (t + 1 - window_len)..=t {
                window
                    .push_step(&trace.step_queries(s))
                    .map_err(EvalError::Predictor)?;
            }

            for kind in kinds {
                let mut acc = 0.0;
                match kind {
                    SelectorKind::OracleNextQuery
                    | SelectorKind::LastQuery
                    | SelectorKind::PredictedSingle
                    | SelectorKind::PredictedAssembled => {
                        let predicted = match kind {
                            SelectorKind::PredictedSingle => {
                                Some(predictor::predict_single_window(&window, &cfg.regression)?)
                            }
                            SelectorKind::PredictedAssembled => {
                                Some(predictor::predict_assembled(&window, &cfg.regression)?)
                            }
                            _ => None,
                        };
                        for (si, &(b, kvh)) in streams.iter().enumerate() {
                            let keys = trace.keys.head_block(b, kvh);
                            let g = layout.group_size();
                            let group: Vec<&[f32]> = match (kind, &predicted) {
                                (SelectorKind::OracleNextQuery, _) => group_of(trace, b, kvh, t + 1),
                                (SelectorKind::LastQuery, _) => group_of(trace, b, kvh, t),
                                (_, Some(p)) => {
                                    (0..g).map(|gi| p.head(b, kvh * g + gi)).collect()
                                }
                                _ => unreachable!(),
                            };
                            let sel = select_top(
                                &group,
                                keys,
                                n_tokens,
                                d,
                                cfg.select_c,
                                cfg.aggregation,
                            )?;
                            acc += kv::overlap_ratio(&sel, &truth[si])?;
                        }
                    }
                    SelectorKind::PageLevel { page_size } => {
                        for &(b, kvh) in &streams {
                            let keys = trace.keys.head_block(b, kvh);
                            let sel = attention::page_select_from_keys(
                                &group_of(trace, b, kvh, t),
                                keys,
                                n_tokens,
                                d,
                                cfg.select_c,
                                *page_size,
                                cfg.aggregation,
                            )?;
                            // Equal-cardinality truth for the page-rounded size.
                            let truth_sized = select_top(
                                &group_of(trace, b, kvh, t + 1),
                                keys,
                                n_tokens,
                                d,
                                sel.indices.len(),
                                cfg.aggregation,
                            )?;
                            acc += kv::overlap_ratio(&sel.indices, &truth_sized)?;
                        }
                    }
                    SelectorKind::Random { seed } => {
                        for (si, &(b, kvh)) in streams.iter().enumerate() {
                            let sel =
                                random_subset(n_tokens, cfg.select_c, mix_seed(*seed, t, b, kvh));
                            acc += kv::overlap_ratio(&sel, &truth[si])?;
                        }
                    }
                }
                rows.push(OverlapRow {
                    step: t,
                    selector: kind.label(),
                    distance: 0,
                    overlap: acc / streams.len() as f64,
                });
            }
            Ok(rows)
        })
        .collect();

    let mut rows = Vec::new();
    for r in step_rows {
        rows.extend(r?);
    }

    // Means over steps (rows are already head-averaged).
    let mut summaries: Vec<OverlapSummary> = Vec::new();
    for row in &rows {
        match summaries
            .iter_mut()
            .find(|s| s.selector == row.selector && s.distance == row.distance)
        {
            Some(s) => {
                s.mean += row.overlap;
                s.samples += 1;
            }
            None => summaries.push(OverlapSummary {
                selector: row.selector.clone(),
                distance: row.distance,
                mean: row.overlap,
                samples: 1,
            }),
        }
    }
    for s in &mut summaries {
        s.mean /= s.samples as f64;
    }
    Ok(OverlapReport { rows, summaries })
}

/// Single-selector form of [`evaluate_selectors`].
pub fn evaluate_selector(
    trace: &DecodeTrace,
    kind: SelectorKind,
    cfg: &EvalConfig,
) -> Result<OverlapReport, EvalError> {
    evaluate_selectors(trace, &[kind], cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kv::AttentionLayout;
    use crate::trace::generate_trace;

    fn small_cfg(c: usize, warmup: usize) -> EvalConfig {
        EvalConfig {
            select_c: c,
            distances: vec![1, 8],
            warmup,
            regression: RegressionConfig::default(),
            aggregation: ScoreAggregation::Max,
        }
    }

    #[test]
    fn oracle_overlap_is_one() {
        let layout = AttentionLayout::mha(2, 8);
        let trace = generate_trace(layout, 1, 160, 0.9, 0.1, 5).unwrap();
        let report =
            evaluate_selector(&trace, SelectorKind::OracleNextQuery, &small_cfg(16, 128)).unwrap();
        let s = report.summary("oracle", 0).unwrap();
        assert_eq!(s.mean, 1.0);
    }

    #[test]
    fn random_selector_matches_hypergeometric_expectation() {
        let layout = AttentionLayout::mha(2, 8);
        let trace = generate_trace(layout, 1, 280, 0.9, 0.1, 6).unwrap();
        let cfg = small_cfg(16, 128);
        let report =
            evaluate_selector(&trace, SelectorKind::Random { seed: 3 }, &cfg).unwrap();
        let got = report.summary("random", 0).unwrap().mean;
        // E[overlap at step t] = C / (t+1)
        let analytic: f64 = (128..279)
            .map(|t| 16.0 / (t + 1) as f64)
            .sum::<f64>()
            / 151.0;
        assert!(
            (got - analytic).abs() < 0.03,
            "random mean {got} vs analytic {analytic}"
        );
    }

    #[test]
    fn page_size_one_equals_last_query_rows() {
        let layout = AttentionLayout::new(4, 2, 8).unwrap();
        let trace = generate_trace(layout, 1, 100, 0.95, 0.1, 7).unwrap();
        let cfg = EvalConfig {
            distances: vec![],
            ..small_cfg(8, 64)
        };
        let report = evaluate_selectors(
            &trace,
            &[
                SelectorKind::LastQuery,
                SelectorKind::PageLevel { page_size: 1 },
            ],
            &cfg,
        )
        .unwrap();
        let last: Vec<f64> = report
            .rows
            .iter()
            .filter(|r| r.selector == "last-query")
            .map(|r| r.overlap)
            .collect();
        let page: Vec<f64> = report
            .rows
            .iter()
            .filter(|r| r.selector == "page-p1")
            .map(|r| r.overlap)
            .collect();
        assert_eq!(last, page);
    }

    #[test]
    fn temporal_locality_decays_with_distance() {
        let layout = AttentionLayout::mha(2, 32);
        let trace = generate_trace(layout, 1, 360, 0.95, 0.05, 8).unwrap();
        let cfg = small_cfg(32, 256);
        let report = evaluate_selector(&trace, SelectorKind::LastQuery, &cfg).unwrap();
        let d1 = report.summary(TEMPORAL_LABEL, 1).unwrap().mean;
        let d8 = report.summary(TEMPORAL_LABEL, 8).unwrap().mean;
        assert!(d1 > d8, "d1 {d1} should exceed d8 {d8}");
        assert!(d1 > 0.4);
    }

    #[test]
    fn short_trace_is_rejected() {
        let layout = AttentionLayout::mha(1, 4);
        let trace = generate_trace(layout, 1, 20, 0.5, 0.5, 9).unwrap();
        assert!(matches!(
            evaluate_selector(&trace, SelectorKind::LastQuery, &small_cfg(4, 64)),
            Err(EvalError::InsufficientTrace { .. })
        ));
    }

    #[test]
    fn selector_labels_parse() {
        assert_eq!(
            SelectorKind::parse("page:16").unwrap(),
            SelectorKind::PageLevel { page_size: 16 }
        );
        assert_eq!(
            SelectorKind::parse("random:9").unwrap(),
            SelectorKind::Random { seed: 9 }
        );
        assert_eq!(SelectorKind::parse("oracle").unwrap(), SelectorKind::OracleNextQuery);
        assert!(SelectorKind::parse("bogus").is_err());
    }
}
