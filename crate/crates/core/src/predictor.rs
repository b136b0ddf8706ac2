//! Temporal-regressive next-query prediction.
//!
//! A sliding window of recent per-head query states feeds a small ridge
//! regression: the newest query is regressed onto its predecessors, the solved
//! weights are softmax-normalized and applied to the single-token-shifted
//! window to forecast the next query. The assembled variant repeats this over
//! every window suffix and average-pools the candidates.
//!
//! Regression math runs in f64; window entries and predictions are stored as
//! f32 like the rest of the decode state.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, DenseMatrix, LinalgError};

#[derive(Debug, Error, PartialEq)]
pub enum PredictorError {
    #[error("query dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("window too short for prediction: length {len}, need at least 2")]
    InsufficientHistory { len: usize },
    #[error("invalid regression config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Sliding buffer of the most recent query vectors, per (batch, head).
///
/// Entries are ordered oldest-first; pushing past capacity evicts the oldest.
#[derive(Debug, Clone)]
pub struct QueryWindow {
    batch: usize,
    heads: usize,
    dim: usize,
    capacity: usize,
    len: usize,
    bufs: Vec<VecDeque<Vec<f32>>>,
}

impl QueryWindow {
    pub fn new(batch: usize, heads: usize, dim: usize, capacity: usize) -> Self {
        assert!(capacity >= 1, "window capacity must be at least 1");
        Self {
            batch,
            heads,
            dim,
            capacity,
            len: 0,
            bufs: vec![VecDeque::with_capacity(capacity); batch * heads],
        }
    }

    /// Appends one decoding step's queries, layout (b, h, d), length B·H·D.
    pub fn push_step(&mut self, queries: &[f32]) -> Result<(), PredictorError> {
        let expected = self.batch * self.heads * self.dim;
        if queries.len() != expected {
            return Err(PredictorError::DimMismatch {
                expected,
                got: queries.len(),
            });
        }
        for b in 0..self.batch {
            for h in 0..self.heads {
                let o = (b * self.heads + h) * self.dim;
                let buf = &mut self.bufs[b * self.heads + h];
                if buf.len() == self.capacity {
                    buf.pop_front();
                }
                buf.push_back(queries[o..o + self.dim].to_vec());
            }
        }
        self.len = (self.len + 1).min(self.capacity);
        Ok(())
    }

    /// Current fill, uniform across heads.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Entry `i` (oldest first) for one (batch, head).
    pub fn entry(&self, b: usize, h: usize, i: usize) -> &[f32] {
        &self.bufs[b * self.heads + h][i]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EpsilonMode {
    /// Use the configured ε verbatim.
    Absolute,
    /// ε = factor × mean(diag(G)), so regularization tracks query magnitude.
    RelativeToGramDiagonal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightSign {
    Positive,
    Negated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AssemblyMode {
    /// One shared solve over the full history; per-suffix masked softmax rows.
    MaskedShared,
    /// A separate regression per window size, the literal reference form.
    PerWindow,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionConfig {
    pub window: usize,
    /// ε value (absolute mode) or factor (relative mode).
    pub epsilon: f64,
    pub epsilon_mode: EpsilonMode,
    pub weight_sign: WeightSign,
    pub assembly: AssemblyMode,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        Self {
            window: 16,
            epsilon: 1e-2,
            epsilon_mode: EpsilonMode::RelativeToGramDiagonal,
            weight_sign: WeightSign::Positive,
            assembly: AssemblyMode::MaskedShared,
        }
    }
}

impl RegressionConfig {
    pub fn validate(&self) -> Result<(), PredictorError> {
        if self.window < 1 {
            return Err(PredictorError::InvalidConfig("window must be >= 1".into()));
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(PredictorError::InvalidConfig(
                "epsilon must be positive and finite".into(),
            ));
        }
        Ok(())
    }

    fn resolve_epsilon(&self, gram_diag_mean: f64) -> f64 {
        let eps = match self.epsilon_mode {
            EpsilonMode::Absolute => self.epsilon,
            EpsilonMode::RelativeToGramDiagonal => self.epsilon * gram_diag_mean,
        };
        // Degenerate all-zero windows resolve to zero; keep the system SPD.
        if eps > 0.0 {
            eps
        } else {
            f64::EPSILON
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Assembled,
    SingleWindow,
    Passthrough,
}

/// Predicted next-step query per (batch, head), layout (b, h, d).
#[derive(Debug, Clone, PartialEq)]
pub struct PredictedQuery {
    pub batch: usize,
    pub heads: usize,
    pub dim: usize,
    pub provenance: Provenance,
    data: Vec<f32>,
}

impl PredictedQuery {
    pub fn head(&self, b: usize, h: usize) -> &[f32] {
        let o = (b * self.heads + h) * self.dim;
        &self.data[o..o + self.dim]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

/// Raw ridge weights ω = (history·historyᵀ + εI)⁻¹ · history·target.
pub fn solve_ridge_weights(
    history: &DenseMatrix,
    target: &[f64],
    epsilon: f64,
) -> Result<Vec<f64>, PredictorError> {
    if history.cols() != target.len() {
        return Err(PredictorError::DimMismatch {
            expected: history.cols(),
            got: target.len(),
        });
    }
    if !(epsilon > 0.0) {
        return Err(PredictorError::InvalidConfig("epsilon must be > 0".into()));
    }
    let k = history.rows();
    let mut g = linalg::matmul(history, history, true)?;
    for i in 0..k {
        let v = g.get(i, i) + epsilon;
        g.set(i, i, v);
    }
    let t = DenseMatrix::new(target.len(), 1, target.to_vec())?;
    let b = linalg::matmul(history, &t, false)?;
    let x = linalg::solve_spd(&g, &b)?;
    Ok(x.data().to_vec())
}

/// Softmax normalization of raw weights, optionally negated first.
pub fn normalize_weights(raw: &[f64], sign: WeightSign) -> Result<Vec<f64>, PredictorError> {
    let logits: Vec<f64> = match sign {
        WeightSign::Positive => raw.to_vec(),
        WeightSign::Negated => raw.iter().map(|v| -v).collect(),
    };
    Ok(linalg::softmax(&logits, None)?)
}

struct HeadWindow<'a> {
    entries: Vec<&'a [f32]>,
}

impl HeadWindow<'_> {
    fn history_matrix(&self, k: usize) -> DenseMatrix {
        let m = self.entries.len() - 1;
        let rows: Vec<Vec<f64>> = self.entries[m - k..m]
            .iter()
            .map(|e| e.iter().map(|&v| f64::from(v)).collect())
            .collect();
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        DenseMatrix::from_rows(&refs).expect("window rows share a dimension")
    }

    fn target(&self) -> Vec<f64> {
        self.entries
            .last()
            .expect("non-empty window")
            .iter()
            .map(|&v| f64::from(v))
            .collect()
    }

    /// Weighted sum of the k-shifted suffix: weight j applies to entry j+1.
    fn apply_shifted(&self, weights: &[f64], first_weight_index: usize, out: &mut [f64]) {
        for (j, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let entry = self.entries[first_weight_index + j + 1];
            for (o, &v) in out.iter_mut().zip(entry) {
                *o += w * f64::from(v);
            }
        }
    }
}

fn head_windows(window: &QueryWindow) -> Vec<HeadWindow<'_>> {
    let n = window.len();
    (0..window.batch * window.heads)
        .map(|idx| {
            let (b, h) = (idx / window.heads, idx % window.heads);
            HeadWindow {
                entries: (0..n).map(|i| window.entry(b, h, i)).collect(),
            }
        })
        .collect()
}

fn finish(
    window: &QueryWindow,
    provenance: Provenance,
    per_head: Vec<Vec<f64>>,
) -> PredictedQuery {
    let mut data = Vec::with_capacity(window.batch * window.heads * window.dim);
    for head in per_head {
        data.extend(head.into_iter().map(|v| v as f32));
    }
    PredictedQuery {
        batch: window.batch,
        heads: window.heads,
        dim: window.dim,
        provenance,
        data,
    }
}

fn raw_logits(
    hw: &HeadWindow<'_>,
    k: usize,
    cfg: &RegressionConfig,
) -> Result<Vec<f64>, PredictorError> {
    let hist = hw.history_matrix(k);
    let diag_mean = (0..k)
        .map(|i| hist.row(i).iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        / k as f64;
    let eps = cfg.resolve_epsilon(diag_mean);
    let raw = solve_ridge_weights(&hist, &hw.target(), eps)?;
    Ok(match cfg.weight_sign {
        WeightSign::Positive => raw,
        WeightSign::Negated => raw.iter().map(|v| -v).collect(),
    })
}

/// Eq.-4 prediction: one regression over the full history, weights applied to
/// the single-token-shifted window.
pub fn predict_single_window(
    window: &QueryWindow,
    cfg: &RegressionConfig,
) -> Result<PredictedQuery, PredictorError> {
    cfg.validate()?;
    let n = window.len();
    if n < 2 {
        return Err(PredictorError::InsufficientHistory { len: n });
    }
    let m = n - 1;
    let per_head = head_windows(window)
        .iter()
        .map(|hw| {
            let logits = raw_logits(hw, m, cfg)?;
            let w = linalg::softmax(&logits, None)?;
            let mut out = vec![0.0f64; window.dim];
            hw.apply_shifted(&w, 0, &mut out);
            Ok(out)
        })
        .collect::<Result<Vec<_>, PredictorError>>()?;
    Ok(finish(window, Provenance::SingleWindow, per_head))
}

/// Assembled prediction: candidate estimates from every window suffix size
/// k = 1..m, average-pooled.
pub fn predict_assembled(
    window: &QueryWindow,
    cfg: &RegressionConfig,
) -> Result<PredictedQuery, PredictorError> {
    cfg.validate()?;
    let n = window.len();
    if n < 2 {
        return Err(PredictorError::InsufficientHistory { len: n });
    }
    let m = n - 1;
    let per_head = head_windows(window)
        .iter()
        .map(|hw| {
            let mut acc = vec![0.0f64; window.dim];
            match cfg.assembly {
                AssemblyMode::MaskedShared => {
                    // One solve over the full history; row k keeps the last k
                    // weights and renormalizes over that suffix.
                    let logits = raw_logits(hw, m, cfg)?;
                    let mut cand = vec![0.0f64; window.dim];
                    for k in 1..=m {
                        let mut mask = vec![false; m];
                        for f in &mut mask[m - k..] {
                            *f = true;
                        }
                        let w = linalg::softmax(&logits, Some(&mask))?;
                        cand.iter_mut().for_each(|v| *v = 0.0);
                        hw.apply_shifted(&w, 0, &mut cand);
                        for (a, c) in acc.iter_mut().zip(&cand) {
                            *a += c;
                        }
                    }
                }
                AssemblyMode::PerWindow => {
                    let mut cand = vec![0.0f64; window.dim];
                    for k in 1..=m {
                        let logits = raw_logits(hw, k, cfg)?;
                        let w = linalg::softmax(&logits, None)?;
                        cand.iter_mut().for_each(|v| *v = 0.0);
                        hw.apply_shifted(&w, m - k, &mut cand);
                        for (a, c) in acc.iter_mut().zip(&cand) {
                            *a += c;
                        }
                    }
                }
            }
            for a in &mut acc {
                *a /= m as f64;
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>, PredictorError>>()?;
    Ok(finish(window, Provenance::Assembled, per_head))
}

/// Warmup-aware entry point: below two entries the latest query passes through
/// verbatim, otherwise the assembled prediction runs.
pub fn predict(
    window: &QueryWindow,
    cfg: &RegressionConfig,
) -> Result<PredictedQuery, PredictorError> {
    cfg.validate()?;
    let n = window.len();
    if n == 0 {
        return Err(PredictorError::InsufficientHistory { len: 0 });
    }
    if n < 2 {
        let per_head = head_windows(window)
            .iter()
            .map(|hw| {
                hw.entries
                    .last()
                    .unwrap()
                    .iter()
                    .map(|&v| f64::from(v))
                    .collect()
            })
            .collect();
        return Ok(finish(window, Provenance::Passthrough, per_head));
    }
    predict_assembled(window, cfg)
}
