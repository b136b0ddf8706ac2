//! Decode-step attention over the KV cache, full and sparse, plus the
//! page-level upper-bound selection baseline.
//!
//! Attention applies the standard 1/√D logit scaling; criticality scoring in
//! [`crate::kv`] deliberately omits it (top-k ranking is scale-invariant).
//! Logits, softmax and accumulation run in f64; outputs are f32 state vectors.

use thiserror::Error;

use crate::kv::{AttentionLayout, KvCache, ScoreAggregation, SelectionError, SelectionResult, TokenSelection};
use crate::linalg::{self, LinalgError};

#[derive(Debug, Error, PartialEq)]
pub enum AttentionError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("attention over an empty cache")]
    EmptyCache,
    #[error("attention over an empty selection")]
    EmptySelection,
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        acc += f64::from(*x) * f64::from(*y);
    }
    acc
}

fn check_query_shape(q: &[f32], layout: AttentionLayout, batch: usize) -> Result<(), AttentionError> {
    let expected = batch * layout.n_query_heads * layout.head_dim;
    if q.len() != expected {
        return Err(AttentionError::ShapeMismatch(format!(
            "query length {} vs expected {} (B={batch}, N_q={}, D={})",
            q.len(),
            expected,
            layout.n_query_heads,
            layout.head_dim
        )));
    }
    Ok(())
}

/// Full attention of one decoding step over every cached token.
///
/// `q` is (b, query-head, d) flattened; the output has the same layout.
pub fn full_attention(
    q: &[f32],
    cache: &KvCache,
    layer: usize,
) -> Result<Vec<f32>, AttentionError> {
    let layout = cache.layout();
    check_query_shape(q, layout, cache.batch())?;
    let tokens = cache.tokens(layer)?;
    if tokens == 0 {
        return Err(AttentionError::EmptyCache);
    }
    let d = layout.head_dim;
    let g = layout.group_size();
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0f32; q.len()];
    for b in 0..cache.batch() {
        for qh in 0..layout.n_query_heads {
            let kvh = qh / g;
            let qo = (b * layout.n_query_heads + qh) * d;
            let qv = &q[qo..qo + d];
            let mut logits = vec![0.0f64; tokens];
            for (t, l) in logits.iter_mut().enumerate() {
                *l = dot_f64(qv, cache.key(layer, b, kvh, t)) * scale;
            }
            let probs = linalg::softmax(&logits, None)?;
            let mut acc = vec![0.0f64; d];
            for (t, &p) in probs.iter().enumerate() {
                let v = cache.value(layer, b, kvh, t);
                for (a, &vd) in acc.iter_mut().zip(v) {
                    *a += p * f64::from(vd);
                }
            }
            for (o, a) in out[qo..qo + d].iter_mut().zip(&acc) {
                *o = *a as f32;
            }
        }
    }
    Ok(out)
}

/// Sparse attention restricted to a filtered selection, softmax renormalized
/// over the selected subset.
pub fn sparse_attention(
    q: &[f32],
    sel: &SelectionResult,
    layout: AttentionLayout,
) -> Result<Vec<f32>, AttentionError> {
    if sel.kv_heads != layout.n_kv_heads || sel.head_dim != layout.head_dim {
        return Err(AttentionError::ShapeMismatch(format!(
            "selection ({} kv-heads, dim {}) vs layout ({}, {})",
            sel.kv_heads, sel.head_dim, layout.n_kv_heads, layout.head_dim
        )));
    }
    check_query_shape(q, layout, sel.batch)?;
    let d = layout.head_dim;
    let g = layout.group_size();
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0f32; q.len()];
    for b in 0..sel.batch {
        for qh in 0..layout.n_query_heads {
            let kvh = qh / g;
            let head = sel.head(b, kvh);
            let n = head.indices.len();
            if n == 0 {
                return Err(AttentionError::EmptySelection);
            }
            let qo = (b * layout.n_query_heads + qh) * d;
            let qv = &q[qo..qo + d];
            let mut logits = vec![0.0f64; n];
            for (r, l) in logits.iter_mut().enumerate() {
                *l = dot_f64(qv, &head.keys[r * d..(r + 1) * d]) * scale;
            }
            let probs = linalg::softmax(&logits, None)?;
            let mut acc = vec![0.0f64; d];
            for (r, &p) in probs.iter().enumerate() {
                let v = &head.values[r * d..(r + 1) * d];
                for (a, &vd) in acc.iter_mut().zip(v) {
                    *a += p * f64::from(vd);
                }
            }
            for (o, a) in out[qo..qo + d].iter_mut().zip(&acc) {
                *o = *a as f32;
            }
        }
    }
    Ok(out)
}

/// Per-page score upper bounds for one query head: for each page of `p`
/// consecutive tokens, `Σ_d max(q_d·minK_d, q_d·maxK_d)` over the page's
/// coordinate-wise key extrema. Every member token's exact dot product is
/// bounded above by its page's score.
pub fn page_upper_bounds(q_head: &[f32], keys_flat: &[f32], dim: usize, p: usize) -> Vec<f64> {
    let tokens = keys_flat.len() / dim;
    let n_pages = tokens.div_ceil(p);
    let mut bounds = Vec::with_capacity(n_pages);
    for page in 0..n_pages {
        let start = page * p;
        let end = (start + p).min(tokens);
        let mut acc = 0.0f64;
        for d in 0..dim {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for t in start..end {
                let v = f64::from(keys_flat[t * dim + d]);
                if v < lo {
                    lo = v;
                }
                if v > hi {
                    hi = v;
                }
            }
            let qd = f64::from(q_head[d]);
            acc += (qd * lo).max(qd * hi);
        }
        bounds.push(acc);
    }
    bounds
}

/// Page-level selection per (batch, kv-head).
#[derive(Debug, Clone)]
pub struct PageLevelSelection {
    pub per_head: Vec<TokenSelection>,
    /// C rounded down to a multiple of the page size when not divisible.
    pub effective_c: usize,
    pub page_size: usize,
}

/// Page selection core over one kv-head's key block: aggregate per-query-head
/// page bounds, take the top C/P pages, expand to their member tokens.
pub fn page_select_from_keys(
    group_queries: &[&[f32]],
    keys_flat: &[f32],
    n_tokens: usize,
    dim: usize,
    c: usize,
    p: usize,
    aggregation: ScoreAggregation,
) -> Result<TokenSelection, AttentionError> {
    if p == 0 {
        return Err(AttentionError::ShapeMismatch("page size must be >= 1".into()));
    }
    let want_pages = c / p;
    let n_pages = n_tokens.div_ceil(p);
    let mut page_scores = vec![0.0f64; n_pages];
    for (gi, q) in group_queries.iter().enumerate() {
        let bounds = page_upper_bounds(q, &keys_flat[..n_tokens * dim], dim, p);
        for (s, bd) in page_scores.iter_mut().zip(&bounds) {
            match aggregation {
                ScoreAggregation::Max => {
                    if gi == 0 || *bd > *s {
                        *s = *bd;
                    }
                }
                ScoreAggregation::Sum => {
                    if gi == 0 {
                        *s = *bd;
                    } else {
                        *s += *bd;
                    }
                }
            }
        }
    }
    let (pages, degraded) = if want_pages >= n_pages {
        ((0..n_pages).collect::<Vec<_>>(), want_pages > n_pages)
    } else {
        (linalg::top_k(&page_scores, want_pages)?, false)
    };
    let mut indices = Vec::with_capacity(want_pages * p);
    for page in pages {
        let start = page * p;
        let end = (start + p).min(n_tokens);
        indices.extend(start..end);
    }
    Ok(TokenSelection {
        indices,
        degraded_to_full: degraded,
    })
}

/// Quest-style baseline: upper-bound page scores, top C/P pages, all member
/// tokens of the chosen pages.
pub fn page_level_select(
    q: &[f32],
    cache: &KvCache,
    layer: usize,
    c: usize,
    p: usize,
    aggregation: ScoreAggregation,
) -> Result<PageLevelSelection, AttentionError> {
    if p == 0 {
        return Err(AttentionError::ShapeMismatch("page size must be >= 1".into()));
    }
    let layout = cache.layout();
    check_query_shape(q, layout, cache.batch())?;
    let tokens = cache.tokens(layer)?;
    let d = layout.head_dim;
    let g = layout.group_size();
    let effective_c = (c / p) * p;
    let mut per_head = Vec::with_capacity(cache.batch() * layout.n_kv_heads);
    for b in 0..cache.batch() {
        for kvh in 0..layout.n_kv_heads {
            let keys = cache.keys_flat(layer, b, kvh);
            let group: Vec<&[f32]> = (0..g)
                .map(|gi| {
                    let qo = (b * layout.n_query_heads + kvh * g + gi) * d;
                    &q[qo..qo + d]
                })
                .collect();
            per_head.push(page_select_from_keys(
                &group,
                keys,
                tokens,
                d,
                effective_c,
                p,
                aggregation,
            )?);
        }
    }
    Ok(PageLevelSelection {
        per_head,
        effective_c,
        page_size: p,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kv::{self, ProtectPolicy};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
        (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
    }

    fn filled_cache(
        rng: &mut ChaCha8Rng,
        layout: AttentionLayout,
        batch: usize,
        tokens: usize,
    ) -> KvCache {
        let mut cache = KvCache::new(1, layout, batch);
        let n = batch * layout.n_kv_heads * layout.head_dim;
        for _ in 0..tokens {
            cache.append(0, &rand_vec(rng, n), &rand_vec(rng, n)).unwrap();
        }
        cache
    }

    #[test]
    fn single_token_attention_returns_its_value() {
        let layout = AttentionLayout::mha(1, 3);
        let mut cache = KvCache::new(1, layout, 1);
        cache.append(0, &[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        let out = full_attention(&[0.3, -0.7, 1.1], &cache, 0).unwrap();
        assert_eq!(out, vec![4.0, 5.0, 6.0]);
    }

    #[test]
    fn equal_logits_average_values() {
        let layout = AttentionLayout::mha(1, 2);
        let mut cache = KvCache::new(1, layout, 1);
        // Orthogonal keys and an orthogonal query give two zero logits.
        cache.append(0, &[1.0, 0.0], &[2.0, 0.0]).unwrap();
        cache.append(0, &[0.0, 1.0], &[0.0, 4.0]).unwrap();
        let out = full_attention(&[0.0, 0.0], &cache, 0).unwrap();
        assert!((out[0] - 1.0).abs() < 1e-6);
        assert!((out[1] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn empty_cache_is_a_contract_error() {
        let layout = AttentionLayout::mha(1, 2);
        let cache = KvCache::new(1, layout, 1);
        assert!(matches!(
            full_attention(&[0.0, 0.0], &cache, 0),
            Err(AttentionError::EmptyCache)
        ));
    }

    /// Independent re-evaluation: logits, explicit exp-normalization, and
    /// value accumulation all in f64 with reversed accumulation order.
    fn attention_oracle(
        q: &[f32],
        cache: &KvCache,
        layer: usize,
    ) -> Vec<f64> {
        let layout = cache.layout();
        let d = layout.head_dim;
        let g = layout.group_size();
        let tokens = cache.tokens(layer).unwrap();
        let scale = 1.0 / (d as f64).sqrt();
        let mut out = vec![0.0f64; q.len()];
        for b in 0..cache.batch() {
            for qh in 0..layout.n_query_heads {
                let kvh = qh / g;
                let qo = (b * layout.n_query_heads + qh) * d;
                let logits: Vec<f64> = (0..tokens)
                    .map(|t| {
                        let k = cache.key(layer, b, kvh, t);
                        (0..d)
                            .rev()
                            .map(|i| f64::from(q[qo + i]) * f64::from(k[i]))
                            .sum::<f64>()
                            * scale
                    })
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let z: f64 = exps.iter().sum();
                for t in (0..tokens).rev() {
                    let v = cache.value(layer, b, kvh, t);
                    for i in 0..d {
                        out[qo + i] += exps[t] / z * f64::from(v[i]);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_high_precision_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let layout = AttentionLayout::new(4, 2, 16).unwrap();
        let cache = filled_cache(&mut rng, layout, 2, 128);
        let q = rand_vec(&mut rng, 2 * 4 * 16);
        let got = full_attention(&q, &cache, 0).unwrap();
        let want = attention_oracle(&q, &cache, 0);
        for (g, w) in got.iter().zip(&want) {
            assert!((f64::from(*g) - w).abs() < 1e-6, "{g} vs {w}");
        }
    }

    fn select_all(cache: &KvCache, layer: usize) -> SelectionResult {
        let tokens = cache.tokens(layer).unwrap();
        let sels: Vec<TokenSelection> = (0..cache.batch() * cache.layout().n_kv_heads)
            .map(|_| TokenSelection {
                indices: (0..tokens).collect(),
                degraded_to_full: false,
            })
            .collect();
        kv::gather_filtered(cache, layer, &sels).unwrap()
    }

    #[test]
    fn full_selection_is_lossless() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for (nq, nkv) in [(2, 2), (4, 1), (8, 2)] {
            let layout = AttentionLayout::new(nq, nkv, 8).unwrap();
            let cache = filled_cache(&mut rng, layout, 1, 33);
            let q = rand_vec(&mut rng, nq * 8);
            let full = full_attention(&q, &cache, 0).unwrap();
            let sparse = sparse_attention(&q, &select_all(&cache, 0), layout).unwrap();
            for (f, s) in full.iter().zip(&sparse) {
                assert!((f - s).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn argmax_single_token_selection_returns_that_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let layout = AttentionLayout::mha(1, 4);
        let cache = filled_cache(&mut rng, layout, 1, 16);
        let q = rand_vec(&mut rng, 4);
        // find the argmax-logit token by hand
        let mut best = (0usize, f64::NEG_INFINITY);
        for t in 0..16 {
            let s = dot_f64(&q, cache.key(0, 0, 0, t));
            if s > best.1 {
                best = (t, s);
            }
        }
        let sel = kv::gather_filtered(
            &cache,
            0,
            &[TokenSelection {
                indices: vec![best.0],
                degraded_to_full: false,
            }],
        )
        .unwrap();
        let out = sparse_attention(&q, &sel, layout).unwrap();
        assert_eq!(out.as_slice(), cache.value(0, 0, 0, best.0));
    }

    #[test]
    fn peaked_distribution_top_fraction_approximates_full() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let layout = AttentionLayout::mha(1, 8);
        let mut cache = KvCache::new(1, layout, 1);
        let tokens = 64;
        let q = rand_vec(&mut rng, 8);
        let qnorm: f32 = q.iter().map(|v| v * v).sum::<f32>().sqrt();
        for t in 0..tokens {
            let mut k = rand_vec(&mut rng, 8);
            // one token's logit sits ~ +10·√D/‖q‖ above the rest
            if t == 17 {
                let boost = 10.0 * (8.0f32).sqrt() / qnorm;
                for (kd, qd) in k.iter_mut().zip(&q) {
                    *kd += boost * qd / qnorm;
                }
            }
            cache.append(0, &k, &rand_vec(&mut rng, 8)).unwrap();
        }
        let scores: Vec<f64> = (0..tokens)
            .map(|t| dot_f64(&q, cache.key(0, 0, 0, t)))
            .collect();
        let top = kv::select_tokens(&scores, tokens / 8, ProtectPolicy::default()).unwrap();
        assert!(top.indices.contains(&17));
        let sel = kv::gather_filtered(&cache, 0, &[top]).unwrap();
        let sparse = sparse_attention(&q, &sel, layout).unwrap();
        let full = full_attention(&q, &cache, 0).unwrap();
        for (s, f) in sparse.iter().zip(&full) {
            assert!((s - f).abs() < 1e-3, "{s} vs {f}");
        }
    }

    #[test]
    fn page_size_one_equals_token_top_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let layout = AttentionLayout::new(4, 2, 8).unwrap();
        let cache = filled_cache(&mut rng, layout, 1, 40);
        let q = rand_vec(&mut rng, 4 * 8);
        let page = page_level_select(&q, &cache, 0, 10, 1, ScoreAggregation::Max).unwrap();

        let mut w = crate::predictor::QueryWindow::new(1, 4, 8, 2);
        w.push_step(&q).unwrap();
        let pred = crate::predictor::predict(&w, &crate::predictor::RegressionConfig::default()).unwrap();
        let scores = kv::criticality_scores(&pred, &cache, 0, layout, ScoreAggregation::Max).unwrap();
        for (head, sc) in page.per_head.iter().zip(&scores) {
            let want = kv::select_tokens(sc, 10, ProtectPolicy::default()).unwrap();
            assert_eq!(head.indices, want.indices);
        }
    }

    #[test]
    fn identical_keys_within_pages_reduce_to_exact_scores() {
        let layout = AttentionLayout::mha(1, 4);
        let mut cache = KvCache::new(1, layout, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let pages = 8;
        let p = 4;
        for _ in 0..pages {
            let k = rand_vec(&mut rng, 4);
            for _ in 0..p {
                cache.append(0, &k, &rand_vec(&mut rng, 4)).unwrap();
            }
        }
        let q = rand_vec(&mut rng, 4);
        let sel = page_level_select(&q, &cache, 0, 2 * p, p, ScoreAggregation::Max).unwrap();
        // with zero within-page variance the bound is the exact token score,
        // so the two best pages are the two best tokens' pages
        let mut page_exact: Vec<f64> = (0..pages)
            .map(|pg| dot_f64(&q, cache.key(0, 0, 0, pg * p)))
            .collect();
        let bounds = page_upper_bounds(&q, cache.keys_flat(0, 0, 0), 4, p);
        for (e, b) in page_exact.iter().zip(&bounds) {
            assert!((e - b).abs() < 1e-12);
        }
        page_exact.reverse();
        let got = &sel.per_head[0].indices;
        assert_eq!(got.len(), 2 * p);
    }

    #[test]
    fn page_bound_upper_bounds_every_member_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        for _ in 0..20 {
            let d = 8;
            let tokens = rng.random_range(20..100usize);
            let p = 16;
            let keys = rand_vec(&mut rng, tokens * d);
            let q = rand_vec(&mut rng, d);
            let bounds = page_upper_bounds(&q, &keys, d, p);
            for t in 0..tokens {
                let exact = dot_f64(&q, &keys[t * d..(t + 1) * d]);
                assert!(
                    exact <= bounds[t / p],
                    "token {t}: exact {exact} > bound {}",
                    bounds[t / p]
                );
            }
        }
    }

    #[test]
    fn page_c_rounds_down_and_is_recorded() {
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let layout = AttentionLayout::mha(1, 4);
        let cache = filled_cache(&mut rng, layout, 1, 64);
        let q = rand_vec(&mut rng, 4);
        let sel = page_level_select(&q, &cache, 0, 19, 8, ScoreAggregation::Max).unwrap();
        assert_eq!(sel.effective_c, 16);
        assert_eq!(sel.per_head[0].indices.len(), 16);
    }
}
