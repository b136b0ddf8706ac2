//! Cache-rank data plane: append-only KV store, token criticality scoring
//! under MHA/GQA/MQA head layouts, top-k token selection, and gather into a
//! contiguous filtered cache.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, LinalgError};
use crate::predictor::PredictedQuery;

#[derive(Debug, Error, PartialEq)]
pub enum SelectionError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("layer {layer} out of range ({layers} layers)")]
    LayerOutOfRange { layer: usize, layers: usize },
    #[error("token index {index} out of range ({tokens} tokens)")]
    IndexOutOfRange { index: usize, tokens: usize },
    #[error("protected counts (sink {sink} + recent {recent}) exceed selection size {c}")]
    ProtectTooLarge { sink: usize, recent: usize, c: usize },
    #[error("selections have different cardinalities: {a} vs {b}")]
    CardinalityMismatch { a: usize, b: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Attention head layout. `n_query_heads` must be divisible by `n_kv_heads`;
/// the quotient is the query-group size g (MHA: g = 1, MQA/MLA: n_kv_heads = 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionLayout {
    pub n_query_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
}

impl AttentionLayout {
    pub fn new(
        n_query_heads: usize,
        n_kv_heads: usize,
        head_dim: usize,
    ) -> Result<Self, SelectionError> {
        if n_query_heads == 0 || n_kv_heads == 0 || head_dim == 0 {
            return Err(SelectionError::ShapeMismatch(
                "layout dimensions must be positive".into(),
            ));
        }
        if n_query_heads % n_kv_heads != 0 {
            return Err(SelectionError::ShapeMismatch(format!(
                "query heads {n_query_heads} not divisible by kv heads {n_kv_heads}"
            )));
        }
        Ok(Self {
            n_query_heads,
            n_kv_heads,
            head_dim,
        })
    }

    pub fn group_size(&self) -> usize {
        self.n_query_heads / self.n_kv_heads
    }

    pub fn mha(heads: usize, head_dim: usize) -> Self {
        Self::new(heads, heads, head_dim).expect("valid MHA layout")
    }
}

/// How per-query-head criticality scores reduce to one score per kv-head group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreAggregation {
    Max,
    Sum,
}

impl Default for ScoreAggregation {
    fn default() -> Self {
        Self::Max
    }
}

struct LayerKv {
    /// Per (b·n_kv + h): token-major flat buffer of key vectors.
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    tokens: usize,
}

/// Append-only per-layer, per-(batch, kv-head) token store of key/value vectors.
pub struct KvCache {
    layout: AttentionLayout,
    batch: usize,
    layers: Vec<LayerKv>,
}

impl KvCache {
    pub fn new(layers: usize, layout: AttentionLayout, batch: usize) -> Self {
        let streams = batch * layout.n_kv_heads;
        Self {
            layout,
            batch,
            layers: (0..layers)
                .map(|_| LayerKv {
                    keys: vec![Vec::new(); streams],
                    values: vec![Vec::new(); streams],
                    tokens: 0,
                })
                .collect(),
        }
    }

    pub fn layout(&self) -> AttentionLayout {
        self.layout
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn layers(&self) -> usize {
        self.layers.len()
    }

    fn layer(&self, layer: usize) -> Result<&LayerKv, SelectionError> {
        self.layers.get(layer).ok_or(SelectionError::LayerOutOfRange {
            layer,
            layers: self.layers.len(),
        })
    }

    /// Token count of one layer (uniform across kv-heads by construction).
    pub fn tokens(&self, layer: usize) -> Result<usize, SelectionError> {
        Ok(self.layer(layer)?.tokens)
    }

    /// Appends one token's keys and values, layout (b, kv-head, d),
    /// length B·N_kv·D each.
    pub fn append(&mut self, layer: usize, k: &[f32], v: &[f32]) -> Result<(), SelectionError> {
        let expected = self.batch * self.layout.n_kv_heads * self.layout.head_dim;
        if k.len() != expected || v.len() != expected {
            return Err(SelectionError::ShapeMismatch(format!(
                "append expects {} values per side, got k={} v={}",
                expected,
                k.len(),
                v.len()
            )));
        }
        let layers = self.layers.len();
        let d = self.layout.head_dim;
        let kv_heads = self.layout.n_kv_heads;
        let lk = self
            .layers
            .get_mut(layer)
            .ok_or(SelectionError::LayerOutOfRange { layer, layers })?;
        for b in 0..self.batch {
            for h in 0..kv_heads {
                let s = b * kv_heads + h;
                let o = (b * kv_heads + h) * d;
                lk.keys[s].extend_from_slice(&k[o..o + d]);
                lk.values[s].extend_from_slice(&v[o..o + d]);
            }
        }
        lk.tokens += 1;
        Ok(())
    }

    pub fn key(&self, layer: usize, b: usize, kv_head: usize, t: usize) -> &[f32] {
        let d = self.layout.head_dim;
        let s = b * self.layout.n_kv_heads + kv_head;
        &self.layers[layer].keys[s][t * d..(t + 1) * d]
    }

    pub fn value(&self, layer: usize, b: usize, kv_head: usize, t: usize) -> &[f32] {
        let d = self.layout.head_dim;
        let s = b * self.layout.n_kv_heads + kv_head;
        &self.layers[layer].values[s][t * d..(t + 1) * d]
    }

    /// All keys of one (batch, kv-head) stream, token-major.
    pub fn keys_flat(&self, layer: usize, b: usize, kv_head: usize) -> &[f32] {
        &self.layers[layer].keys[b * self.layout.n_kv_heads + kv_head]
    }

    pub fn values_flat(&self, layer: usize, b: usize, kv_head: usize) -> &[f32] {
        &self.layers[layer].values[b * self.layout.n_kv_heads + kv_head]
    }
}

/// Sink/recency retention: the first `sink` and last `recent` token indices are
/// always selected. Defaults to zero on both ends.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtectPolicy {
    pub sink: usize,
    pub recent: usize,
}

/// Sorted token indices chosen for one (batch, kv-head) stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSelection {
    pub indices: Vec<usize>,
    /// True when C exceeded the token count and selection degraded to all tokens.
    pub degraded_to_full: bool,
}

/// Per-(batch, kv-head) selected indices plus gathered K/V rows of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub batch: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    pub source_tokens: usize,
    heads: Vec<HeadSelection>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadSelection {
    pub indices: Vec<usize>,
    pub degraded_to_full: bool,
    /// Gathered rows, one per index, bit-equal to the source cache rows.
    pub keys: Vec<f32>,
    pub values: Vec<f32>,
}

impl SelectionResult {
    pub fn head(&self, b: usize, kv_head: usize) -> &HeadSelection {
        &self.heads[b * self.kv_heads + kv_head]
    }

    pub fn heads(&self) -> &[HeadSelection] {
        &self.heads
    }
}

/// Raw per-token scores for one kv-head group: dot products of each group
/// query against each key row of `keys_flat[..n_tokens*dim]`, reduced per
/// token by max or sum. No softmax and no 1/√D scaling — top-k ranking is
/// invariant to both.
pub fn group_scores(
    group_queries: &[&[f32]],
    keys_flat: &[f32],
    n_tokens: usize,
    dim: usize,
    aggregation: ScoreAggregation,
) -> Vec<f64> {
    let mut scores = vec![0.0f64; n_tokens];
    for (gi, q) in group_queries.iter().enumerate() {
        for (t, s) in scores.iter_mut().enumerate() {
            let krow = &keys_flat[t * dim..(t + 1) * dim];
            let mut dot = 0.0f64;
            for (qd, kd) in q.iter().zip(krow) {
                dot += f64::from(*qd) * f64::from(*kd);
            }
            if gi == 0 {
                *s = dot;
            } else {
                match aggregation {
                    ScoreAggregation::Max => {
                        if dot > *s {
                            *s = dot;
                        }
                    }
                    ScoreAggregation::Sum => *s += dot,
                }
            }
        }
    }
    scores
}

/// Token criticality of every cached token against the predicted query,
/// reduced per kv-head group — one (g × D)·(D × N_t) product per kv-head.
pub fn criticality_scores(
    q_hat: &PredictedQuery,
    cache: &KvCache,
    layer: usize,
    layout: AttentionLayout,
    aggregation: ScoreAggregation,
) -> Result<Vec<Vec<f64>>, SelectionError> {
    if q_hat.heads != layout.n_query_heads || q_hat.dim != layout.head_dim {
        return Err(SelectionError::ShapeMismatch(format!(
            "prediction ({} heads, dim {}) vs layout ({} heads, dim {})",
            q_hat.heads, q_hat.dim, layout.n_query_heads, layout.head_dim
        )));
    }
    if cache.layout() != layout || cache.batch() != q_hat.batch {
        return Err(SelectionError::ShapeMismatch(
            "cache layout/batch does not match prediction".into(),
        ));
    }
    let tokens = cache.tokens(layer)?;
    let g = layout.group_size();
    let d = layout.head_dim;
    let mut out = Vec::with_capacity(cache.batch() * layout.n_kv_heads);
    for b in 0..cache.batch() {
        for kvh in 0..layout.n_kv_heads {
            let keys = cache.keys_flat(layer, b, kvh);
            let group: Vec<&[f32]> = (0..g).map(|gi| q_hat.head(b, kvh * g + gi)).collect();
            out.push(group_scores(&group, keys, tokens, d, aggregation));
        }
    }
    Ok(out)
}

/// Top-C token selection with optional protected sink/recent ranges.
///
/// `c > N_t` degrades to selecting every token (full-attention equivalent),
/// flagged in the result rather than erroring.
pub fn select_tokens(
    scores: &[f64],
    c: usize,
    protect: ProtectPolicy,
) -> Result<TokenSelection, SelectionError> {
    let n = scores.len();
    if protect.sink + protect.recent > c {
        return Err(SelectionError::ProtectTooLarge {
            sink: protect.sink,
            recent: protect.recent,
            c,
        });
    }
    if c >= n {
        return Ok(TokenSelection {
            indices: (0..n).collect(),
            degraded_to_full: c > n,
        });
    }
    if protect.sink == 0 && protect.recent == 0 {
        return Ok(TokenSelection {
            indices: linalg::top_k(scores, c)?,
            degraded_to_full: false,
        });
    }
    // Protected head/tail are always in; top-k fills the middle.
    let free_lo = protect.sink;
    let free_hi = n - protect.recent;
    let middle: Vec<f64> = scores[free_lo..free_hi].to_vec();
    let picks = linalg::top_k(&middle, c - protect.sink - protect.recent)?;
    let mut indices: Vec<usize> = (0..protect.sink).collect();
    indices.extend(picks.into_iter().map(|i| i + free_lo));
    indices.extend(free_hi..n);
    Ok(TokenSelection {
        indices,
        degraded_to_full: false,
    })
}

/// Gathers the selected rows of one layer into a contiguous filtered view.
/// Rows are copied bit-exactly; the cache itself is untouched.
pub fn gather_filtered(
    cache: &KvCache,
    layer: usize,
    selections: &[TokenSelection],
) -> Result<SelectionResult, SelectionError> {
    let layout = cache.layout();
    let streams = cache.batch() * layout.n_kv_heads;
    if selections.len() != streams {
        return Err(SelectionError::ShapeMismatch(format!(
            "expected {} per-head selections, got {}",
            streams,
            selections.len()
        )));
    }
    let tokens = cache.tokens(layer)?;
    let d = layout.head_dim;
    let mut heads = Vec::with_capacity(streams);
    for b in 0..cache.batch() {
        for kvh in 0..layout.n_kv_heads {
            let sel = &selections[b * layout.n_kv_heads + kvh];
            let mut keys = Vec::with_capacity(sel.indices.len() * d);
            let mut values = Vec::with_capacity(sel.indices.len() * d);
            for &t in &sel.indices {
                if t >= tokens {
                    return Err(SelectionError::IndexOutOfRange { index: t, tokens });
                }
                keys.extend_from_slice(cache.key(layer, b, kvh, t));
                values.extend_from_slice(cache.value(layer, b, kvh, t));
            }
            heads.push(HeadSelection {
                indices: sel.indices.clone(),
                degraded_to_full: sel.degraded_to_full,
                keys,
                values,
            });
        }
    }
    Ok(SelectionResult {
        batch: cache.batch(),
        kv_heads: layout.n_kv_heads,
        head_dim: d,
        source_tokens: tokens,
        heads,
    })
}

/// |a ∩ b| / |S| for two equal-cardinality sorted index sets.
pub fn overlap_ratio(a: &[usize], b: &[usize]) -> Result<f64, SelectionError> {
    if a.len() != b.len() {
        return Err(SelectionError::CardinalityMismatch {
            a: a.len(),
            b: b.len(),
        });
    }
    if a.is_empty() {
        return Ok(1.0);
    }
    let (mut i, mut j, mut shared) = (0usize, 0usize, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                shared += 1;
                i += 1;
                j += 1;
            }
        }
    }
    Ok(shared as f64 / a.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::{predict, QueryWindow, RegressionConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
        (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
    }

    fn prediction_from(q: &[f32], heads: usize, dim: usize) -> PredictedQuery {
        // Builds a PredictedQuery through the warmup passthrough path.
        let mut w = QueryWindow::new(1, heads, dim, 4);
        w.push_step(q).unwrap();
        predict(&w, &RegressionConfig::default()).unwrap()
    }

    #[test]
    fn append_counts_and_bit_exact_retrieval() {
        let layout = AttentionLayout::new(4, 2, 3).unwrap();
        let mut cache = KvCache::new(2, layout, 1);
        assert_eq!(cache.tokens(0).unwrap(), 0);
        let k = vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0];
        let v = vec![0.1f32, 0.2, 0.3, 0.4, 0.5, 0.6];
        cache.append(0, &k, &v).unwrap();
        assert_eq!(cache.tokens(0).unwrap(), 1);
        assert_eq!(cache.tokens(1).unwrap(), 0);
        assert_eq!(cache.key(0, 0, 0, 0), &[1.0, 2.0, 3.0]);
        assert_eq!(cache.key(0, 0, 1, 0), &[4.0, 5.0, 6.0]);
        assert_eq!(cache.value(0, 0, 1, 0), &[0.4, 0.5, 0.6]);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows: Vec<(Vec<f32>, Vec<f32>)> = (0..100)
            .map(|_| (rand_vec(&mut rng, 6), rand_vec(&mut rng, 6)))
            .collect();
        for (k, v) in &rows {
            cache.append(1, k, v).unwrap();
        }
        assert_eq!(cache.tokens(1).unwrap(), 100);
        for (t, (k, _)) in rows.iter().enumerate() {
            assert_eq!(cache.key(1, 0, 0, t), &k[0..3]);
        }
    }

    #[test]
    fn interleaved_layers_stay_independent() {
        let layout = AttentionLayout::mha(1, 2);
        let mut cache = KvCache::new(4, layout, 1);
        let mut replay: Vec<Vec<(Vec<f32>, Vec<f32>)>> = vec![Vec::new(); 4];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for step in 0..40 {
            let layer = step % 3; // layer 3 never touched
            let (k, v) = (rand_vec(&mut rng, 2), rand_vec(&mut rng, 2));
            cache.append(layer, &k, &v).unwrap();
            replay[layer].push((k, v));
        }
        for layer in 0..4 {
            assert_eq!(cache.tokens(layer).unwrap(), replay[layer].len());
            for (t, (k, v)) in replay[layer].iter().enumerate() {
                assert_eq!(cache.key(layer, 0, 0, t), k.as_slice());
                assert_eq!(cache.value(layer, 0, 0, t), v.as_slice());
            }
        }
        assert!(matches!(
            cache.append(9, &[0.0, 0.0], &[0.0, 0.0]),
            Err(SelectionError::LayerOutOfRange { .. })
        ));
    }

    #[test]
    fn criticality_mha_is_plain_dot_product() {
        let layout = AttentionLayout::mha(1, 2);
        let mut cache = KvCache::new(1, layout, 1);
        cache.append(0, &[1.0, 0.0], &[0.0, 0.0]).unwrap();
        cache.append(0, &[0.5, 0.5], &[0.0, 0.0]).unwrap();
        let pred = prediction_from(&[2.0, 1.0], 1, 2);
        let scores = criticality_scores(&pred, &cache, 0, layout, ScoreAggregation::Max).unwrap();
        assert_eq!(scores.len(), 1);
        assert_eq!(scores[0], vec![2.0, 1.5]);
    }

    #[test]
    fn criticality_unit_basis_query_reads_first_coordinate() {
        let layout = AttentionLayout::mha(1, 3);
        let mut cache = KvCache::new(1, layout, 1);
        for t in 0..4 {
            let k = vec![t as f32, 10.0, -10.0];
            cache.append(0, &k, &[0.0; 3]).unwrap();
        }
        let pred = prediction_from(&[1.0, 0.0, 0.0], 1, 3);
        let scores = criticality_scores(&pred, &cache, 0, layout, ScoreAggregation::Max).unwrap();
        assert_eq!(scores[0], vec![0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn criticality_gqa_matches_per_head_oracle() {
        let layout = AttentionLayout::new(4, 1, 8).unwrap();
        let mut cache = KvCache::new(1, layout, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..64 {
            cache
                .append(0, &rand_vec(&mut rng, 8), &rand_vec(&mut rng, 8))
                .unwrap();
        }
        let q = rand_vec(&mut rng, 4 * 8);
        let pred = prediction_from(&q, 4, 8);
        for agg in [ScoreAggregation::Max, ScoreAggregation::Sum] {
            let got = criticality_scores(&pred, &cache, 0, layout, agg).unwrap();
            // Oracle: each head's scores separately, then elementwise reduce.
            let mut want = vec![match agg {
                ScoreAggregation::Max => f64::NEG_INFINITY,
                ScoreAggregation::Sum => 0.0,
            }; 64];
            for h in 0..4 {
                for (t, w) in want.iter_mut().enumerate() {
                    let key = cache.key(0, 0, 0, t);
                    let dot: f64 = q[h * 8..(h + 1) * 8]
                        .iter()
                        .zip(key)
                        .map(|(a, b)| f64::from(*a) * f64::from(*b))
                        .sum();
                    match agg {
                        ScoreAggregation::Max => *w = w.max(dot),
                        ScoreAggregation::Sum => *w += dot,
                    }
                }
            }
            assert_eq!(got[0], want);
        }
    }

    #[test]
    fn mqa_and_mha_agree_with_generic_path() {
        // g = 1 under MHA and N_kv = 1 under MQA reduce to the same dot rows.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = 4;
        let keys: Vec<Vec<f32>> = (0..10).map(|_| rand_vec(&mut rng, d)).collect();
        let q = rand_vec(&mut rng, d);

        let mha = AttentionLayout::mha(1, d);
        let mut c1 = KvCache::new(1, mha, 1);
        let mqa = AttentionLayout::new(1, 1, d).unwrap();
        let mut c2 = KvCache::new(1, mqa, 1);
        for k in &keys {
            c1.append(0, k, k).unwrap();
            c2.append(0, k, k).unwrap();
        }
        let p = prediction_from(&q, 1, d);
        let s1 = criticality_scores(&p, &c1, 0, mha, ScoreAggregation::Max).unwrap();
        let s2 = criticality_scores(&p, &c2, 0, mqa, ScoreAggregation::Max).unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn select_identity_and_recency() {
        let scores: Vec<f64> = (0..5).map(|i| i as f64).collect();
        let all = select_tokens(&scores, 5, ProtectPolicy::default()).unwrap();
        assert_eq!(all.indices, vec![0, 1, 2, 3, 4]);
        assert!(!all.degraded_to_full);

        let over = select_tokens(&scores, 9, ProtectPolicy::default()).unwrap();
        assert_eq!(over.indices, vec![0, 1, 2, 3, 4]);
        assert!(over.degraded_to_full);

        let top3 = select_tokens(&scores, 3, ProtectPolicy::default()).unwrap();
        assert_eq!(top3.indices, vec![2, 3, 4]);
    }

    #[test]
    fn select_with_protection_matches_brute_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let n = rng.random_range(64..512usize);
            let scores: Vec<f64> = (0..n)
                .map(|_| f64::from(rng.random_range(0..64u32)))
                .collect();
            let c = n / 8;
            let protect = ProtectPolicy { sink: 4, recent: 16 };
            let got = select_tokens(&scores, c, protect).unwrap();

            // Oracle: union protected ranges with brute-force top of the rest.
            let mut rest: Vec<usize> = (4..n - 16).collect();
            rest.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
            let mut want: Vec<usize> = (0..4).chain(n - 16..n).collect();
            want.extend(rest[rest.len() - (c - 20)..].iter().copied());
            want.sort_unstable();
            assert_eq!(got.indices, want);
        }
        assert!(matches!(
            select_tokens(&[1.0; 30], 3, ProtectPolicy { sink: 2, recent: 2 }),
            Err(SelectionError::ProtectTooLarge { .. })
        ));
    }

    #[test]
    fn positive_scaling_never_changes_selection() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let n = rng.random_range(16..256usize);
            let scores: Vec<f64> = (0..n)
                .map(|_| f64::from(rng.random_range(0..1000u32)) / 8.0)
                .collect();
            let c = rng.random_range(1..=n);
            let base = select_tokens(&scores, c, ProtectPolicy::default()).unwrap();
            for &scale in &[0.5f64, 1024.0, 3.7] {
                let scaled: Vec<f64> = scores.iter().map(|s| s * scale).collect();
                let got = select_tokens(&scaled, c, ProtectPolicy::default()).unwrap();
                assert_eq!(got.indices, base.indices, "scale {scale}");
            }
        }
    }

    #[test]
    fn raising_a_selected_score_keeps_it_selected() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..30 {
            let n = 64;
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-4.0..4.0)).collect();
            let c = 8;
            let sel = select_tokens(&scores, c, ProtectPolicy::default()).unwrap();
            let &pick = sel.indices.first().unwrap();
            let mut bumped = scores.clone();
            bumped[pick] += rng.random_range(0.0..10.0);
            let sel2 = select_tokens(&bumped, c, ProtectPolicy::default()).unwrap();
            assert!(sel2.indices.contains(&pick));
        }
    }

    #[test]
    fn gather_is_bit_exact() {
        let layout = AttentionLayout::mha(1, 4);
        let mut cache = KvCache::new(1, layout, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let tokens = 4096;
        for _ in 0..tokens {
            cache
                .append(0, &rand_vec(&mut rng, 4), &rand_vec(&mut rng, 4))
                .unwrap();
        }
        // single row
        let one = gather_filtered(
            &cache,
            0,
            &[TokenSelection {
                indices: vec![5],
                degraded_to_full: false,
            }],
        )
        .unwrap();
        assert_eq!(&one.head(0, 0).keys, cache.key(0, 0, 0, 5));

        // random 1/16 subset: row-wise bit equality
        let mut idx: Vec<usize> = (0..tokens).collect();
        for i in (1..idx.len()).rev() {
            idx.swap(i, rng.random_range(0..=i));
        }
        let mut subset: Vec<usize> = idx[..tokens / 16].to_vec();
        subset.sort_unstable();
        let got = gather_filtered(
            &cache,
            0,
            &[TokenSelection {
                indices: subset.clone(),
                degraded_to_full: false,
            }],
        )
        .unwrap();
        for (row, &t) in subset.iter().enumerate() {
            assert_eq!(
                &got.head(0, 0).keys[row * 4..(row + 1) * 4],
                cache.key(0, 0, 0, t)
            );
            assert_eq!(
                &got.head(0, 0).values[row * 4..(row + 1) * 4],
                cache.value(0, 0, 0, t)
            );
        }
        // full gather equals the source
        let full = gather_filtered(
            &cache,
            0,
            &[TokenSelection {
                indices: (0..tokens).collect(),
                degraded_to_full: false,
            }],
        )
        .unwrap();
        assert_eq!(full.head(0, 0).keys.as_slice(), cache.keys_flat(0, 0, 0));

        assert!(matches!(
            gather_filtered(
                &cache,
                0,
                &[TokenSelection {
                    indices: vec![tokens],
                    degraded_to_full: false
                }]
            ),
            Err(SelectionError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn overlap_ratio_hand_cases() {
        assert_eq!(overlap_ratio(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(overlap_ratio(&[0, 1], &[2, 3]).unwrap(), 0.0);
        assert_eq!(
            overlap_ratio(&[1, 2, 3, 4], &[3, 4, 5, 6]).unwrap(),
            0.5
        );
        assert!(matches!(
            overlap_ratio(&[1], &[1, 2]),
            Err(SelectionError::CardinalityMismatch { .. })
        ));
        // symmetry
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let a: Vec<usize> = {
                let mut v: Vec<usize> = (0..100).filter(|_| rng.random_bool(0.3)).collect();
                v.truncate(16);
                v
            };
            let b: Vec<usize> = {
                let mut v: Vec<usize> = (0..100).filter(|_| rng.random_bool(0.3)).collect();
                v.truncate(a.len());
                v
            };
            if a.len() == b.len() {
                assert_eq!(
                    overlap_ratio(&a, &b).unwrap(),
                    overlap_ratio(&b, &a).unwrap()
                );
            }
        }
    }
}
