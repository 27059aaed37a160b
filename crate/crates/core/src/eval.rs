//! Prefix samples, ranking metrics and popularity baselines.

use std::fmt;

use crate::data::{Click, Session};
use crate::error::{KsttError, Result};
use crate::kg::Catalog;

/// A session prefix and the click that followed it. The prediction time is
/// the target's timestamp.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PrefixSample {
    pub session_id: String,
    pub prefix: Vec<Click>,
    pub target: Click,
}

impl PrefixSample {
    pub fn t_hat(&self) -> i64 {
        self.target.timestamp
    }
}

/// A prefix sample resolved against a catalog.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexedSample {
    pub items: Vec<usize>,
    /// `t̂ − τ` per prefix click, in seconds.
    pub deltas: Vec<f64>,
    pub target: usize,
}

/// `[v₁..vₙ]` expands to `([v₁..vᵢ] → vᵢ₊₁)` for `i = 1..n−1`. Returns the
/// samples and the number of sessions skipped for having fewer than two
/// clicks.
pub fn split_sessions(sessions: &[Session]) -> (Vec<PrefixSample>, usize) {
    let mut samples = Vec::new();
    let mut skipped = 0;
    for s in sessions {
        if s.len() < 2 {
            skipped += 1;
            continue;
        }
        for i in 1..s.len() {
            samples.push(PrefixSample {
                session_id: s.id.clone(),
                prefix: s.events[..i].to_vec(),
                target: s.events[i].clone(),
            });
        }
    }
    (samples, skipped)
}

/// Splits by session start: sessions starting in the final `test_fraction`
/// of the start-time range form the test set.
pub fn time_split(sessions: &[Session], test_fraction: f64) -> Result<(Vec<Session>, Vec<Session>)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(KsttError::Config(format!(
            "test_fraction {test_fraction} outside [0, 1)"
        )));
    }
    let starts: Vec<i64> = sessions.iter().filter_map(Session::start).collect();
    let (Some(&lo), Some(&hi)) = (starts.iter().min(), starts.iter().max()) else {
        return Ok((vec![], vec![]));
    };
    let cutoff = hi as f64 - test_fraction * (hi - lo) as f64;
    let (test, train): (Vec<Session>, Vec<Session>) = sessions
        .iter()
        .cloned()
        .partition(|s| test_fraction > 0.0 && s.start().is_some_and(|t| t as f64 >= cutoff));
    Ok((train, test))
}

/// Resolves samples against `catalog`. Clicks on unknown items are removed
/// from prefixes; a sample is dropped when its target is unknown or its
/// prefix ends up empty. Returns the kept samples and the drop count.
pub fn index_samples(samples: &[PrefixSample], catalog: &Catalog) -> (Vec<IndexedSample>, usize) {
    let mut out = Vec::with_capacity(samples.len());
    let mut dropped = 0;
    for s in samples {
        let Some(target) = catalog.index_of(&s.target.item) else {
            dropped += 1;
            continue;
        };
        let t_hat = s.t_hat();
        let (items, deltas): (Vec<usize>, Vec<f64>) = s
            .prefix
            .iter()
            .filter_map(|c| catalog.index_of(&c.item).map(|i| (i, (t_hat - c.timestamp) as f64)))
            .unzip();
        if items.is_empty() {
            dropped += 1;
            continue;
        }
        out.push(IndexedSample { items, deltas, target });
    }
    (out, dropped)
}

/// Item indices by descending score; equal scores keep ascending index.
pub fn rank_items(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

fn check_inputs(rankings: &[Vec<usize>], targets: &[usize], k: usize) -> Result<()> {
    if rankings.is_empty() {
        return Err(KsttError::Contract("metrics need at least one sample".into()));
    }
    if rankings.len() != targets.len() {
        return Err(KsttError::Contract(format!(
            "{} rankings but {} targets",
            rankings.len(),
            targets.len()
        )));
    }
    if k == 0 {
        return Err(KsttError::Contract("k must be at least 1".into()));
    }
    Ok(())
}

fn rank_within_k(ranking: &[usize], target: usize, k: usize) -> Option<usize> {
    ranking.iter().take(k).position(|&i| i == target).map(|p| p + 1)
}

/// Fraction of samples whose target is among the first `k` ranked items.
pub fn recall_at_k(rankings: &[Vec<usize>], targets: &[usize], k: usize) -> Result<f64> {
    check_inputs(rankings, targets, k)?;
    let hits = rankings
        .iter()
        .zip(targets)
        .filter(|(r, &t)| rank_within_k(r, t, k).is_some())
        .count();
    Ok(hits as f64 / rankings.len() as f64)
}

/// Mean of `1 / rank(target)`, counting zero beyond rank `k`.
pub fn mrr_at_k(rankings: &[Vec<usize>], targets: &[usize], k: usize) -> Result<f64> {
    check_inputs(rankings, targets, k)?;
    let total: f64 = rankings
        .iter()
        .zip(targets)
        .filter_map(|(r, &t)| rank_within_k(r, t, k))
        .map(|rank| 1.0 / rank as f64)
        .sum();
    Ok(total / rankings.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub k: usize,
    pub samples: usize,
    pub recall: f64,
    pub mrr: f64,
}

impl MetricReport {
    pub const TSV_HEADER: &'static str = "k\tsamples\trecall\tmrr";

    pub fn to_tsv(&self) -> String {
        format!("{}\t{}\t{:.6}\t{:.6}", self.k, self.samples, self.recall, self.mrr)
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "k={k} samples={n} recall@{k}={r:.6} mrr@{k}={m:.6}",
            k = self.k,
            n = self.samples,
            r = self.recall,
            m = self.mrr
        )
    }
}

/// Anything that can score the whole catalog for a prefix.
pub trait SessionScorer {
    fn num_items(&self) -> usize;

    /// One score per catalog item; higher ranks first.
    fn score(&self, sample: &IndexedSample) -> Result<Vec<f64>>;
}

pub fn evaluate(scorer: &dyn SessionScorer, samples: &[IndexedSample], k: usize) -> Result<MetricReport> {
    let mut rankings = Vec::with_capacity(samples.len());
    let mut targets = Vec::with_capacity(samples.len());
    for s in samples {
        let scores = scorer.score(s)?;
        if scores.len() != scorer.num_items() {
            return Err(KsttError::dim(
                "evaluate",
                format!("{} scores for {} items", scores.len(), scorer.num_items()),
            ));
        }
        let mut ranking = rank_items(&scores);
        ranking.truncate(k);
        rankings.push(ranking);
        targets.push(s.target);
    }
    Ok(MetricReport {
        k,
        samples: samples.len(),
        recall: recall_at_k(&rankings, &targets, k)?,
        mrr: mrr_at_k(&rankings, &targets, k)?,
    })
}

/// Global click counts over a set of sessions.
#[derive(Clone, Debug)]
pub struct Popularity {
    pub counts: Vec<u64>,
}

impl Popularity {
    pub fn fit(sessions: &[Session], catalog: &Catalog) -> Self {
        let mut counts = vec![0; catalog.len()];
        for c in sessions.iter().flat_map(|s| &s.events) {
            if let Some(i) = catalog.index_of(&c.item) {
                counts[i] += 1;
            }
        }
        Popularity { counts }
    }
}

impl SessionScorer for Popularity {
    fn num_items(&self) -> usize {
        self.counts.len()
    }

    fn score(&self, _: &IndexedSample) -> Result<Vec<f64>> {
        Ok(self.counts.iter().map(|&c| c as f64).collect())
    }
}

/// In-session counts first, global popularity as the tie-breaker.
#[derive(Clone, Debug)]
pub struct SessionPopularity(pub Popularity);

impl SessionScorer for SessionPopularity {
    fn num_items(&self) -> usize {
        self.0.counts.len()
    }

    fn score(&self, sample: &IndexedSample) -> Result<Vec<f64>> {
        let counts = &self.0.counts;
        let scale = counts.iter().copied().max().unwrap_or(0) as f64 + 1.0;
        let mut local = vec![0u64; counts.len()];
        for &i in &sample.items {
            local[i] += 1;
        }
        Ok(local
            .iter()
            .zip(counts)
            .map(|(&l, &g)| l as f64 * scale + g as f64)
            .collect())
    }
}
