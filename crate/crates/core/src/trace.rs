//! Synthetic decode traces: per-step query/key/value streams with an AR(1)
//! drift knob controlling temporal locality.
//!
//! `q_t = α·q_{t−1} + σ·ξ_t` with iid standard-normal ξ per component and
//! `q_0` standard normal; keys and values are iid standard normal per step.
//! Generation is bit-deterministic per seed (fixed draw order, ChaCha8 stream).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::kv::AttentionLayout;
use crate::linalg::Tensor4;

#[derive(Debug, Error, PartialEq)]
pub enum TraceError {
    #[error("invalid trace parameter: {0}")]
    InvalidParameter(String),
    #[error("trace shape mismatch: {0}")]
    ShapeMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub seed: u64,
    pub alpha: f32,
    pub sigma: f32,
}

/// Query/key/value streams for a span of decoding steps.
#[derive(Debug, Clone)]
pub struct DecodeTrace {
    pub layout: AttentionLayout,
    pub batch: usize,
    pub steps: usize,
    /// (B, N_q, T, D)
    pub queries: Tensor4,
    /// (B, N_kv, T, D)
    pub keys: Tensor4,
    /// (B, N_kv, T, D)
    pub values: Tensor4,
    pub meta: Option<TraceMeta>,
}

impl DecodeTrace {
    /// Assembles a trace from pre-built tensors, checking shape consistency.
    pub fn from_tensors(
        layout: AttentionLayout,
        queries: Tensor4,
        keys: Tensor4,
        values: Tensor4,
        meta: Option<TraceMeta>,
    ) -> Result<Self, TraceError> {
        let (batch, steps) = (queries.batch, queries.tokens);
        if queries.heads != layout.n_query_heads || queries.dim != layout.head_dim {
            return Err(TraceError::ShapeMismatch(format!(
                "query tensor ({}, {}) vs layout ({}, {})",
                queries.heads, queries.dim, layout.n_query_heads, layout.head_dim
            )));
        }
        for (name, t) in [("key", &keys), ("value", &values)] {
            if t.batch != batch
                || t.heads != layout.n_kv_heads
                || t.tokens != steps
                || t.dim != layout.head_dim
            {
                return Err(TraceError::ShapeMismatch(format!(
                    "{name} tensor shape ({},{},{},{}) inconsistent with queries/layout",
                    t.batch, t.heads, t.tokens, t.dim
                )));
            }
        }
        Ok(Self {
            layout,
            batch,
            steps,
            queries,
            keys,
            values,
            meta,
        })
    }

    /// One step's queries flattened to (b, h, d) — the predictor's push layout.
    pub fn step_queries(&self, t: usize) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.batch * self.layout.n_query_heads * self.layout.head_dim);
        for b in 0..self.batch {
            for h in 0..self.layout.n_query_heads {
                out.extend_from_slice(self.queries.vector(b, h, t));
            }
        }
        out
    }

    /// One step's keys flattened to (b, kv-head, d) — the cache append layout.
    pub fn step_keys(&self, t: usize) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.batch * self.layout.n_kv_heads * self.layout.head_dim);
        for b in 0..self.batch {
            for h in 0..self.layout.n_kv_heads {
                out.extend_from_slice(self.keys.vector(b, h, t));
            }
        }
        out
    }

    pub fn step_values(&self, t: usize) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.batch * self.layout.n_kv_heads * self.layout.head_dim);
        for b in 0..self.batch {
            for h in 0..self.layout.n_kv_heads {
                out.extend_from_slice(self.values.vector(b, h, t));
            }
        }
        out
    }
}

/// Generates an AR(1) trace. `alpha` in [0, 1), `sigma` ≥ 0.
pub fn generate_trace(
    layout: AttentionLayout,
    batch: usize,
    steps: usize,
    alpha: f32,
    sigma: f32,
    seed: u64,
) -> Result<DecodeTrace, TraceError> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(TraceError::InvalidParameter(format!(
            "alpha must be in [0, 1), got {alpha}"
        )));
    }
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(TraceError::InvalidParameter(format!(
            "sigma must be finite and >= 0, got {sigma}"
        )));
    }
    if batch == 0 || steps == 0 {
        return Err(TraceError::InvalidParameter(
            "batch and steps must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = layout.head_dim;
    let mut queries = Tensor4::zeros(batch, layout.n_query_heads, steps, d);
    let mut keys = Tensor4::zeros(batch, layout.n_kv_heads, steps, d);
    let mut values = Tensor4::zeros(batch, layout.n_kv_heads, steps, d);

    // Fixed draw order: per step, queries then keys then values, each (b, h, d).
    for t in 0..steps {
        for b in 0..batch {
            for h in 0..layout.n_query_heads {
                for i in 0..d {
                    let noise: f32 = StandardNormal.sample(&mut rng);
                    let v = if t == 0 {
                        noise
                    } else {
                        alpha * queries.vector(b, h, t - 1)[i] + sigma * noise
                    };
                    queries.vector_mut(b, h, t)[i] = v;
                }
            }
        }
        for b in 0..batch {
            for h in 0..layout.n_kv_heads {
                for i in 0..d {
                    keys.vector_mut(b, h, t)[i] = StandardNormal.sample(&mut rng);
                }
            }
        }
        for b in 0..batch {
            for h in 0..layout.n_kv_heads {
                for i in 0..d {
                    values.vector_mut(b, h, t)[i] = StandardNormal.sample(&mut rng);
                }
            }
        }
    }
    DecodeTrace::from_tensors(
        layout,
        queries,
        keys,
        values,
        Some(TraceMeta { seed, alpha, sigma }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cosine(a: &[f32], b: &[f32]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum();
        let na: f64 = a.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let layout = AttentionLayout::new(4, 2, 16).unwrap();
        let a = generate_trace(layout, 2, 10, 0.9, 0.1, 123).unwrap();
        let b = generate_trace(layout, 2, 10, 0.9, 0.1, 123).unwrap();
        assert_eq!(a.queries.data(), b.queries.data());
        assert_eq!(a.keys.data(), b.keys.data());
        assert_eq!(a.values.data(), b.values.data());
        let c = generate_trace(layout, 2, 10, 0.9, 0.1, 124).unwrap();
        assert_ne!(a.queries.data(), c.queries.data());
    }

    #[test]
    fn alpha_zero_consecutive_queries_uncorrelated() {
        let layout = AttentionLayout::mha(1, 64);
        let t = generate_trace(layout, 1, 1000, 0.0, 1.0, 7).unwrap();
        let mean_cos: f64 = (0..999)
            .map(|i| cosine(t.queries.vector(0, 0, i), t.queries.vector(0, 0, i + 1)))
            .sum::<f64>()
            / 999.0;
        assert!(mean_cos.abs() < 0.1, "mean cos = {mean_cos}");
    }

    #[test]
    fn high_alpha_low_sigma_strong_locality() {
        let layout = AttentionLayout::mha(1, 64);
        let t = generate_trace(layout, 1, 500, 0.99, 0.01, 11).unwrap();
        let mean_cos: f64 = (0..499)
            .map(|i| cosine(t.queries.vector(0, 0, i), t.queries.vector(0, 0, i + 1)))
            .sum::<f64>()
            / 499.0;
        assert!(mean_cos > 0.99, "mean cos = {mean_cos}");
    }

    #[test]
    fn parameter_validation() {
        let layout = AttentionLayout::mha(1, 4);
        assert!(generate_trace(layout, 1, 10, 1.0, 0.1, 0).is_err());
        assert!(generate_trace(layout, 1, 10, -0.1, 0.1, 0).is_err());
        assert!(generate_trace(layout, 1, 10, 0.5, -1.0, 0).is_err());
        assert!(generate_trace(layout, 0, 10, 0.5, 1.0, 0).is_err());
    }

    #[test]
    fn step_layout_helpers_match_tensor() {
        let layout = AttentionLayout::new(4, 2, 3).unwrap();
        let t = generate_trace(layout, 2, 5, 0.5, 0.5, 99).unwrap();
        let q = t.step_queries(3);
        assert_eq!(q.len(), 2 * 4 * 3);
        assert_eq!(&q[0..3], t.queries.vector(0, 0, 3));
        assert_eq!(&q[(1 * 4 + 2) * 3..(1 * 4 + 2) * 3 + 3], t.queries.vector(1, 2, 3));
        let k = t.step_keys(4);
        assert_eq!(&k[3..6], t.keys.vector(0, 1, 4));
    }
}
