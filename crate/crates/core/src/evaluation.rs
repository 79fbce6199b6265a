//! Next-item ranking evaluation: Recall@k and MRR@k over every prefix of
//! every test session, plus the S-POP and Item-KNN baselines and a
//! prediction-time benchmark.

use std::collections::HashMap;
use std::time::Instant;

use crate::dataset::{MiniBatch, PADDING_INDEX};
use crate::error::{Error, Result};
use crate::model::{HeadKind, Model};
use crate::tensor::{dot, matmul, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalConfig {
    pub k: usize,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k: 20,
            batch_size: 512,
        }
    }
}

/// Ranked lists for a batch of prefixes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Ranked {
    pub lists: Vec<Vec<usize>>,
    /// Predictions that carried no ranking signal (zero vectors).
    pub degenerate: usize,
}

pub trait Recommender {
    /// Top-`k` real items for each prefix, best first, no duplicates and
    /// never the padding index.
    fn recommend(&self, prefixes: &[&[usize]], k: usize) -> Result<Ranked>;
}

fn better(a: (f64, usize), b: (f64, usize)) -> bool {
    a.0 > b.0 || (a.0 == b.0 && a.1 < b.1)
}

/// Indices of the `k` largest scores, skipping column 0; ties go to the
/// lower index and NaN ranks last.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let k = k.min(scores.len().saturating_sub(1));
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for (i, &s) in scores.iter().enumerate().skip(1) {
        let s = if s.is_nan() { f64::NEG_INFINITY } else { s };
        if best.len() == k {
            match best.last() {
                Some(&worst) if better((s, i), worst) => {
                    best.pop();
                }
                _ => continue,
            }
        }
        let pos = best.partition_point(|&b| better(b, (s, i)));
        best.insert(pos, (s, i));
    }
    best.into_iter().map(|(_, i)| i).collect()
}

fn model_batch(model: &Model, prefixes: &[&[usize]]) -> MiniBatch {
    MiniBatch::from_prefixes(prefixes, &[], model.config.window)
}

/// Ranks by the softmax head's next-item probabilities.
pub struct SoftmaxRanker<'a> {
    model: &'a Model,
}

impl<'a> SoftmaxRanker<'a> {
    pub fn new(model: &'a Model) -> Result<Self> {
        if model.config.head != HeadKind::Softmax {
            return Err(Error::config("softmax ranking needs the softmax head"));
        }
        Ok(SoftmaxRanker { model })
    }
}

impl Recommender for SoftmaxRanker<'_> {
    fn recommend(&self, prefixes: &[&[usize]], k: usize) -> Result<Ranked> {
        let probs = self.model.forward_softmax(&model_batch(self.model, prefixes))?;
        Ok(Ranked {
            lists: (0..probs.rows()).map(|r| top_k(probs.row(r), k)).collect(),
            degenerate: 0,
        })
    }
}

pub fn rank_topk_softmax(model: &Model, prefix: &[usize], k: usize) -> Result<Vec<usize>> {
    let mut r = SoftmaxRanker::new(model)?.recommend(&[prefix], k)?;
    Ok(r.lists.pop().unwrap_or_default())
}

/// Ranks items by cosine similarity between the predicted vector and each
/// item's embedding.
pub struct EmbeddingRanker<'a> {
    model: &'a Model,
    /// D × (m + 1) unit-norm item embeddings, column 0 zero.
    unit_items_t: Matrix,
}

impl<'a> EmbeddingRanker<'a> {
    pub fn new(model: &'a Model, item_embeddings: &Matrix) -> Result<Self> {
        if model.config.head != HeadKind::Embedding {
            return Err(Error::config("embedding ranking needs the embedding head"));
        }
        if item_embeddings.cols() != model.config.embed_dim {
            return Err(Error::Dimension {
                op: "item embeddings",
                left: item_embeddings.shape(),
                right: (model.config.vocab_size_with_pad, model.config.embed_dim),
            });
        }
        let mut unit = item_embeddings.clone();
        unit.row_mut(PADDING_INDEX).fill(0.0);
        for i in 1..unit.rows() {
            let n = dot(unit.row(i), unit.row(i)).sqrt();
            if !(n > 0.0) {
                return Err(Error::data(format!("item {i} has a zero embedding")));
            }
            unit.row_mut(i).iter_mut().for_each(|x| *x /= n);
        }
        Ok(EmbeddingRanker {
            model,
            unit_items_t: unit.transpose(),
        })
    }

    /// Cosine similarity of each predicted vector against every item.
    pub fn similarities(&self, predicted: &Matrix) -> (Matrix, usize) {
        let mut sims = matmul(predicted, &self.unit_items_t).expect("embedding dims checked");
        let mut degenerate = 0;
        for r in 0..predicted.rows() {
            let n = dot(predicted.row(r), predicted.row(r)).sqrt();
            if n < 1e-12 {
                degenerate += 1;
                sims.row_mut(r).fill(0.0);
            } else {
                sims.row_mut(r).iter_mut().for_each(|s| *s /= n);
            }
        }
        (sims, degenerate)
    }
}

impl Recommender for EmbeddingRanker<'_> {
    fn recommend(&self, prefixes: &[&[usize]], k: usize) -> Result<Ranked> {
        let predicted = self
            .model
            .forward_embedding_output(&model_batch(self.model, prefixes))?;
        let (sims, degenerate) = self.similarities(&predicted);
        Ok(Ranked {
            lists: (0..sims.rows()).map(|r| top_k(sims.row(r), k)).collect(),
            degenerate,
        })
    }
}

pub fn rank_topk_embedding(
    model: &Model,
    item_embeddings: &Matrix,
    prefix: &[usize],
    k: usize,
) -> Result<Vec<usize>> {
    let mut r = EmbeddingRanker::new(model, item_embeddings)?.recommend(&[prefix], k)?;
    Ok(r.lists.pop().unwrap_or_default())
}

/// Ranks by an arbitrary score function over `m + 1` columns.
pub struct ScoreRanker<F> {
    pub score: F,
}

impl<F: Fn(&[usize]) -> Vec<f64>> Recommender for ScoreRanker<F> {
    fn recommend(&self, prefixes: &[&[usize]], k: usize) -> Result<Ranked> {
        Ok(Ranked {
            lists: prefixes.iter().map(|p| top_k(&(self.score)(p), k)).collect(),
            degenerate: 0,
        })
    }
}

/// Global click counts from training sessions.
#[derive(Debug, Clone, PartialEq)]
pub struct Popularity {
    pub counts: Vec<usize>,
    /// Real items by count descending, ties by lower index.
    pub order: Vec<usize>,
}

impl Popularity {
    pub fn from_sessions(sessions: &[Vec<usize>], vocab_size_with_pad: usize) -> Self {
        let mut counts = vec![0usize; vocab_size_with_pad];
        for s in sessions {
            for &i in s {
                counts[i] += 1;
            }
        }
        let mut order: Vec<usize> = (1..vocab_size_with_pad).collect();
        order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
        Popularity { counts, order }
    }

    fn fill(&self, out: &mut Vec<usize>, k: usize, skip: impl Fn(usize) -> bool) {
        for &i in &self.order {
            if out.len() >= k {
                break;
            }
            if !skip(i) && !out.contains(&i) {
                out.push(i);
            }
        }
    }
}

/// Items of the current session by in-session count, ties by global
/// popularity, then the rest of the catalogue by global popularity.
pub fn spop_rank(prefix: &[usize], popularity: &Popularity, k: usize) -> Vec<usize> {
    let mut local: Vec<(usize, usize)> = Vec::new();
    for &i in prefix {
        match local.iter_mut().find(|e| e.0 == i) {
            Some(e) => e.1 += 1,
            None => local.push((i, 1)),
        }
    }
    local.sort_by(|a, b| {
        b.1.cmp(&a.1)
            .then(popularity.counts[b.0].cmp(&popularity.counts[a.0]))
            .then(a.0.cmp(&b.0))
    });
    let mut out: Vec<usize> = local.into_iter().map(|e| e.0).take(k).collect();
    popularity.fill(&mut out, k, |_| false);
    out
}

pub struct SPop {
    pub popularity: Popularity,
}

impl Recommender for SPop {
    fn recommend(&self, prefixes: &[&[usize]], k: usize) -> Result<Ranked> {
        Ok(Ranked {
            lists: prefixes
                .iter()
                .map(|p| spop_rank(p, &self.popularity, k))
                .collect(),
            degenerate: 0,
        })
    }
}

pub const ITEMKNN_DAMPING: f64 = 20.0;

/// Session co-occurrence cosine similarity with a damping term:
/// `sim(i, j) = co(i, j) / (sqrt(n_i · n_j) + damping)` where `n_i` counts
/// training sessions containing `i`.
#[derive(Debug, Clone)]
pub struct ItemKnn {
    /// Per item: neighbours by similarity descending, ties by index.
    pub neighbours: Vec<Vec<(usize, f64)>>,
    pub popularity: Popularity,
}

impl ItemKnn {
    pub fn from_sessions(sessions: &[Vec<usize>], vocab_size_with_pad: usize, damping: f64) -> Self {
        let mut support = vec![0usize; vocab_size_with_pad];
        let mut co: HashMap<(usize, usize), usize> = HashMap::new();
        for s in sessions {
            let mut items: Vec<usize> = s.clone();
            items.sort_unstable();
            items.dedup();
            for (a, &i) in items.iter().enumerate() {
                support[i] += 1;
                for &j in &items[a + 1..] {
                    *co.entry((i, j)).or_default() += 1;
                }
            }
        }
        let mut neighbours: Vec<Vec<(usize, f64)>> = vec![Vec::new(); vocab_size_with_pad];
        for (&(i, j), &c) in &co {
            let sim = c as f64 / ((support[i] as f64 * support[j] as f64).sqrt() + damping);
            neighbours[i].push((j, sim));
            neighbours[j].push((i, sim));
        }
        for n in &mut neighbours {
            n.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        }
        ItemKnn {
            neighbours,
            popularity: Popularity::from_sessions(sessions, vocab_size_with_pad),
        }
    }

    pub fn similarity(&self, i: usize, j: usize) -> f64 {
        self.neighbours
            .get(i)
            .and_then(|n| n.iter().find(|e| e.0 == j))
            .map_or(0.0, |e| e.1)
    }
}

/// Neighbours of the last clicked item, then popularity; never the item
/// itself.
pub fn itemknn_rank(last_item: usize, knn: &ItemKnn, k: usize) -> Vec<usize> {
    let mut out: Vec<usize> = knn
        .neighbours
        .get(last_item)
        .map(|n| n.iter().map(|e| e.0).filter(|&j| j != last_item).take(k).collect())
        .unwrap_or_default();
    knn.popularity.fill(&mut out, k, |i| i == last_item);
    out
}

impl Recommender for ItemKnn {
    fn recommend(&self, prefixes: &[&[usize]], k: usize) -> Result<Ranked> {
        Ok(Ranked {
            lists: prefixes
                .iter()
                .map(|p| itemknn_rank(p.last().copied().unwrap_or(PADDING_INDEX), self, k))
                .collect(),
            degenerate: 0,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub k: usize,
    pub recall_at_k: f64,
    pub mrr_at_k: f64,
    pub event_count: usize,
    /// `rank_histogram[r]` counts events whose true item ranked `r + 1`.
    pub rank_histogram: Vec<usize>,
    pub degenerate_predictions: usize,
    pub mean_batch_seconds: f64,
    pub std_batch_seconds: f64,
}

impl EvalReport {
    fn from_histogram(k: usize, hist: Vec<usize>, events: usize) -> Self {
        let hits: usize = hist.iter().sum();
        let (recall, mrr) = if events == 0 {
            (0.0, 0.0)
        } else {
            (hits as f64 / events as f64, reciprocal_rank_mean(&hist, events))
        };
        EvalReport {
            k,
            recall_at_k: recall,
            mrr_at_k: mrr,
            event_count: events,
            rank_histogram: hist,
            degenerate_predictions: 0,
            mean_batch_seconds: 0.0,
            std_batch_seconds: 0.0,
        }
    }

    /// Combines reports over disjoint event sets; metrics are recomputed
    /// from the pooled histogram, so the order of merging is irrelevant.
    /// Timings are dropped.
    pub fn merge(&self, other: &EvalReport) -> Result<EvalReport> {
        if self.k != other.k {
            return Err(Error::config(format!("cannot merge @{} with @{}", self.k, other.k)));
        }
        let hist = self
            .rank_histogram
            .iter()
            .zip(&other.rank_histogram)
            .map(|(a, b)| a + b)
            .collect();
        let mut out = EvalReport::from_histogram(self.k, hist, self.event_count + other.event_count);
        out.degenerate_predictions = self.degenerate_predictions + other.degenerate_predictions;
        Ok(out)
    }

    /// Metric equality, ignoring timings.
    pub fn same_metrics(&self, other: &EvalReport) -> bool {
        self.k == other.k
            && self.event_count == other.event_count
            && self.rank_histogram == other.rank_histogram
            && self.recall_at_k.to_bits() == other.recall_at_k.to_bits()
            && self.mrr_at_k.to_bits() == other.mrr_at_k.to_bits()
    }

    pub fn to_text(&self) -> String {
        let k = self.k;
        format!(
            "recall_at_{k}={}\nmrr_at_{k}={}\nevents={}\ndegenerate_predictions={}\nmean_batch_seconds={:.6}\nstd_batch_seconds={:.6}\n",
            self.recall_at_k,
            self.mrr_at_k,
            self.event_count,
            self.degenerate_predictions,
            self.mean_batch_seconds,
            self.std_batch_seconds
        )
    }
}

fn gcd(a: u128, b: u128) -> u128 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// `lcm(1..=k)` if it fits comfortably in a u128.
pub fn rank_lcm(k: usize) -> Option<u128> {
    let mut l: u128 = 1;
    for r in 1..=k as u128 {
        l = (l / gcd(l, r)).checked_mul(r)?;
    }
    Some(l)
}

/// `Σ hist[r] / (r + 1) / events`. When `lcm(1..=k) · events` is exactly
/// representable the sum is done in integers with a single final rounding.
fn reciprocal_rank_mean(hist: &[usize], events: usize) -> f64 {
    const EXACT: u128 = 1 << 53;
    if let Some(l) = rank_lcm(hist.len()) {
        if let Some(den) = l.checked_mul(events as u128).filter(|&d| d <= EXACT) {
            let num: u128 = hist
                .iter()
                .enumerate()
                .map(|(r, &n)| n as u128 * (l / (r as u128 + 1)))
                .sum();
            return num as f64 / den as f64;
        }
    }
    let rr: f64 = hist
        .iter()
        .enumerate()
        .map(|(r, &n)| n as f64 / (r + 1) as f64)
        .sum();
    rr / events as f64
}

/// Every `(prefix, next item)` pair of every session.
pub fn session_events(sessions: &[Vec<usize>]) -> Vec<(&[usize], usize)> {
    sessions
        .iter()
        .flat_map(|s| (1..s.len()).map(move |r| (&s[..r], s[r])))
        .collect()
}

pub fn evaluate(recommender: &dyn Recommender, sessions: &[Vec<usize>], cfg: &EvalConfig) -> Result<EvalReport> {
    if cfg.k == 0 {
        return Err(Error::config("k must be at least 1"));
    }
    let events = session_events(sessions);
    let mut hist = vec![0usize; cfg.k];
    let mut degenerate = 0;
    let mut times = Vec::new();
    for chunk in events.chunks(cfg.batch_size.max(1)) {
        let prefixes: Vec<&[usize]> = chunk.iter().map(|e| e.0).collect();
        let start = Instant::now();
        let ranked = recommender.recommend(&prefixes, cfg.k)?;
        times.push(start.elapsed().as_secs_f64());
        degenerate += ranked.degenerate;
        for (list, &(_, target)) in ranked.lists.iter().zip(chunk) {
            if let Some(pos) = list.iter().take(cfg.k).position(|&i| i == target) {
                hist[pos] += 1;
            }
        }
    }
    let mut report = EvalReport::from_histogram(cfg.k, hist, events.len());
    report.degenerate_predictions = degenerate;
    let (mean, std) = mean_std(&times);
    report.mean_batch_seconds = mean;
    report.std_batch_seconds = std;
    Ok(report)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchResult {
    /// Wall time of one full pass over all batches.
    pub mean_seconds: f64,
    pub std_seconds: f64,
    pub batches: usize,
}

impl BenchResult {
    pub fn mean_batch_seconds(&self) -> f64 {
        self.mean_seconds / self.batches.max(1) as f64
    }

    pub fn std_batch_seconds(&self) -> f64 {
        self.std_seconds / self.batches.max(1) as f64
    }
}

/// Times `repetitions` full prediction passes (forward plus top-`k`
/// ranking) after one untimed warm-up pass.
pub fn bench_prediction(
    recommender: &dyn Recommender,
    batches: &[Vec<&[usize]>],
    k: usize,
    repetitions: usize,
) -> Result<BenchResult> {
    for b in batches {
        std::hint::black_box(recommender.recommend(b, k)?);
    }
    let mut times = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let start = Instant::now();
        for b in batches {
            std::hint::black_box(recommender.recommend(b, k)?);
        }
        times.push(start.elapsed().as_secs_f64());
    }
    let (mean, std) = mean_std(&times);
    Ok(BenchResult {
        mean_seconds: mean,
        std_seconds: std,
        batches: batches.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn full_sort(scores: &[f64]) -> Vec<usize> {
        let mut idx: Vec<usize> = (1..scores.len()).collect();
        idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        idx
    }

    #[test]
    fn top_k_basics() {
        let s = [9.0, 0.1, 0.5, 0.5, 0.2];
        assert_eq!(top_k(&s, 1), vec![2]);
        assert_eq!(top_k(&s, 10), vec![2, 3, 4, 1]);
        let mut onehot = vec![0.0; 6];
        onehot[4] = 1.0;
        assert_eq!(top_k(&onehot, 1), vec![4]);
    }

    #[test]
    fn perfect_and_cutoff_recommenders() {
        let sessions = vec![vec![1, 2, 3], vec![4, 5]];
        struct Oracle(Vec<Vec<usize>>, usize);
        impl Recommender for Oracle {
            fn recommend(&self, prefixes: &[&[usize]], k: usize) -> Result<Ranked> {
                let lists = prefixes
                    .iter()
                    .map(|p| {
                        let s = self.0.iter().find(|s| s.starts_with(p)).unwrap();
                        let target = s[p.len()];
                        let mut list: Vec<usize> = (100..100 + self.1).collect();
                        list.insert(self.1, target);
                        list.truncate(k);
                        list
                    })
                    .collect();
                Ok(Ranked { lists, degenerate: 0 })
            }
        }
        let cfg = EvalConfig::default();
        let r = evaluate(&Oracle(sessions.clone(), 0), &sessions, &cfg).unwrap();
        assert_eq!((r.recall_at_k, r.mrr_at_k, r.event_count), (1.0, 1.0, 3));
        let r = evaluate(&Oracle(sessions.clone(), 20), &sessions, &cfg).unwrap();
        assert_eq!((r.recall_at_k, r.mrr_at_k), (0.0, 0.0));
        let r = evaluate(&Oracle(sessions.clone(), 1), &sessions, &cfg).unwrap();
        assert_eq!((r.recall_at_k, r.mrr_at_k), (1.0, 0.5));
    }

    #[test]
    fn spop_ordering() {
        let pop = Popularity::from_sessions(&[vec![3, 3, 3, 2, 2, 1]], 5);
        assert_eq!(pop.order, vec![3, 2, 1, 4]);
        assert_eq!(spop_rank(&[1, 1, 2], &pop, 4), vec![1, 2, 3, 4]);
        assert_eq!(spop_rank(&[4], &pop, 3), vec![4, 3, 2]);
        // equal in-session counts fall back to global popularity
        assert_eq!(spop_rank(&[1, 2], &pop, 2), vec![2, 1]);
    }

    #[test]
    fn itemknn_matches_brute_force_cosine() {
        let sessions = vec![vec![1, 2, 3], vec![1, 2], vec![2, 3, 4], vec![5, 1], vec![3, 3, 4]];
        let knn = ItemKnn::from_sessions(&sessions, 6, ITEMKNN_DAMPING);
        let vecs: Vec<Vec<f64>> = (0..6)
            .map(|i| sessions.iter().map(|s| f64::from(u8::from(s.contains(&i)))).collect())
            .collect();
        for i in 1..6 {
            for j in 1..6 {
                if i == j {
                    continue;
                }
                let num = dot(&vecs[i], &vecs[j]);
                let want = num / (dot(&vecs[i], &vecs[i]).sqrt() * dot(&vecs[j], &vecs[j]).sqrt() + 20.0);
                assert!((knn.similarity(i, j) - want).abs() < 1e-15, "{i} {j}");
            }
        }
    }

    #[test]
    fn itemknn_pairs_and_fallback() {
        let sessions = vec![vec![1, 2], vec![1, 2], vec![3, 3], vec![4, 5], vec![4, 4]];
        let knn = ItemKnn::from_sessions(&sessions, 7, ITEMKNN_DAMPING);
        assert_eq!(itemknn_rank(1, &knn, 1), vec![2]);
        assert_eq!(itemknn_rank(2, &knn, 1), vec![1]);
        // 3 never co-occurs with another item: popularity order without itself
        assert_eq!(itemknn_rank(3, &knn, 3), vec![4, 1, 2]);
        // 6 is unseen in training
        assert_eq!(itemknn_rank(6, &knn, 2), vec![4, 1]);
    }

    proptest! {
        #[test]
        fn top_k_agrees_with_full_sort(scores in proptest::collection::vec(-3i32..3, 2..60), k in 1usize..30) {
            let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
            let want: Vec<usize> = full_sort(&scores).into_iter().take(k).collect();
            prop_assert_eq!(top_k(&scores, k), want);
        }

        #[test]
        fn monotone_transform_preserves_ranking(scores in proptest::collection::vec(-5.0f64..5.0, 2..40)) {
            let t: Vec<f64> = scores.iter().map(|s| (2.0 * s).exp() + 1.0).collect();
            prop_assert_eq!(top_k(&scores, 20), top_k(&t, 20));
        }
    }
}
