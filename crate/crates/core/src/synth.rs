//! Synthetic click corpora with planted structure.
//!
//! * markov: every item has one fixed successor.
//! * temporal: the successor depends on the gap before the next click.
//!   Short gaps stay in the item's category, long gaps jump to the
//!   complementary category, and each gap level picks a different item.
//! * knowledge: the successor is a random item of the category that follows
//!   the current item's category, so only the category attribute explains it.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{AttributeMap, Click, Session};
use crate::error::KsttError;

/// Start of the synthetic time axis (2020-09-13T12:26:40Z).
pub const EPOCH_BASE: i64 = 1_600_000_000;
const SPAN_SECONDS: i64 = 30 * 86_400;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorpusKind {
    Markov,
    Temporal,
    Knowledge,
}

impl FromStr for CorpusKind {
    type Err = KsttError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "markov" => Ok(CorpusKind::Markov),
            "temporal" => Ok(CorpusKind::Temporal),
            "knowledge" => Ok(CorpusKind::Knowledge),
            other => Err(KsttError::Config(format!(
                "unknown corpus {other:?} (expected markov, temporal or knowledge)"
            ))),
        }
    }
}

impl fmt::Display for CorpusKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CorpusKind::Markov => "markov",
            CorpusKind::Temporal => "temporal",
            CorpusKind::Knowledge => "knowledge",
        })
    }
}

#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub sessions: Vec<Session>,
    pub attributes: AttributeMap,
}

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub items: usize,
    pub sessions: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub categories: usize,
}

impl SynthConfig {
    pub fn defaults(kind: CorpusKind) -> Self {
        match kind {
            CorpusKind::Markov => SynthConfig {
                items: 50,
                sessions: 200,
                min_len: 5,
                max_len: 15,
                categories: 5,
            },
            CorpusKind::Temporal => SynthConfig {
                items: 24,
                sessions: 400,
                min_len: 4,
                max_len: 10,
                categories: 4,
            },
            CorpusKind::Knowledge => SynthConfig {
                items: 60,
                sessions: 90,
                min_len: 3,
                max_len: 5,
                categories: 12,
            },
        }
    }
}

pub fn generate(kind: CorpusKind, cfg: &SynthConfig, seed: u64) -> Corpus {
    match kind {
        CorpusKind::Markov => markov_corpus(cfg, seed),
        CorpusKind::Temporal => temporal_corpus(cfg, seed),
        CorpusKind::Knowledge => knowledge_corpus(cfg, seed),
    }
}

/// Name of synthetic item `i`.
pub fn item_name(i: usize) -> String {
    format!("i{i}")
}

fn category_attributes(items: usize, categories: usize) -> AttributeMap {
    (0..items)
        .map(|i| {
            let value = format!("c{}", i % categories);
            (item_name(i), [("category".to_string(), value)].into())
        })
        .collect()
}

/// Session starts spread evenly over thirty days, so a time-based split
/// holds out the most recent sessions.
fn session_start(index: usize, total: usize, rng: &mut impl Rng) -> i64 {
    EPOCH_BASE + (index as i64 * SPAN_SECONDS) / total.max(1) as i64 + rng.gen_range(0..60)
}

/// The single-cycle successor map used by the markov corpus.
pub fn markov_successors(items: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..items).collect();
    order.shuffle(&mut rng);
    let mut next = vec![0; items];
    for k in 0..items {
        next[order[k]] = order[(k + 1) % items];
    }
    next
}

pub fn markov_corpus(cfg: &SynthConfig, seed: u64) -> Corpus {
    let next = markov_successors(cfg.items, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let sessions = (0..cfg.sessions)
        .map(|s| {
            let len = rng.gen_range(cfg.min_len..=cfg.max_len);
            let mut t = session_start(s, cfg.sessions, &mut rng);
            let mut item = rng.gen_range(0..cfg.items);
            let mut events = Vec::with_capacity(len);
            for _ in 0..len {
                events.push(Click::new(item_name(item), t));
                item = next[item];
                t += rng.gen_range(10..300);
            }
            Session::new(format!("m{s}"), events)
        })
        .collect();
    Corpus {
        sessions,
        attributes: category_attributes(cfg.items, cfg.categories),
    }
}

/// Number of distinct gap levels in the temporal corpus. Level `g` gaps fall
/// in `[2^(2g+1), 2^(2g+2))` seconds, i.e. log₂ bucket `2g + 1`.
pub const TEMPORAL_GAP_LEVELS: usize = 8;

pub fn temporal_gap_range(level: usize) -> (i64, i64) {
    (1 << (2 * level + 1), 1 << (2 * level + 2))
}

/// Planted successor of `item` after a gap of the given level.
///
/// Categories pair up as complements (0↔1, 2↔3, …). Levels below half stay
/// in the item's own category at offset `level + 1`; the rest move to the
/// complementary category at offset `level − half`.
pub fn temporal_successor(item: usize, level: usize, items: usize, categories: usize) -> usize {
    let size = items / categories;
    let (cat, pos) = (item / size, item % size);
    let half = TEMPORAL_GAP_LEVELS / 2;
    if level < half {
        cat * size + (pos + level + 1) % size
    } else {
        (cat ^ 1) * size + (pos + level - half) % size
    }
}

pub fn temporal_corpus(cfg: &SynthConfig, seed: u64) -> Corpus {
    assert!(cfg.categories % 2 == 0 && cfg.items % cfg.categories == 0);
    assert!(cfg.items / cfg.categories > TEMPORAL_GAP_LEVELS / 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sessions = (0..cfg.sessions)
        .map(|s| {
            let len = rng.gen_range(cfg.min_len..=cfg.max_len);
            let mut t = session_start(s, cfg.sessions, &mut rng);
            let mut item = rng.gen_range(0..cfg.items);
            let mut events = Vec::with_capacity(len);
            events.push(Click::new(item_name(item), t));
            for _ in 1..len {
                let level = rng.gen_range(0..TEMPORAL_GAP_LEVELS);
                let (lo, hi) = temporal_gap_range(level);
                t += rng.gen_range(lo..hi);
                item = temporal_successor(item, level, cfg.items, cfg.categories);
                events.push(Click::new(item_name(item), t));
            }
            Session::new(format!("t{s}"), events)
        })
        .collect();
    let size = cfg.items / cfg.categories;
    let attributes = (0..cfg.items)
        .map(|i| {
            (
                item_name(i),
                [("category".to_string(), format!("c{}", i / size))].into(),
            )
        })
        .collect();
    Corpus {
        sessions,
        attributes,
    }
}

pub fn knowledge_corpus(cfg: &SynthConfig, seed: u64) -> Corpus {
    assert!(cfg.items % cfg.categories == 0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = cfg.categories;
    let sessions = (0..cfg.sessions)
        .map(|s| {
            let len = rng.gen_range(cfg.min_len..=cfg.max_len);
            let mut t = session_start(s, cfg.sessions, &mut rng);
            let mut item = rng.gen_range(0..cfg.items);
            let mut events = Vec::with_capacity(len);
            for _ in 0..len {
                events.push(Click::new(item_name(item), t));
                // items with i % c == k form category k
                let next_cat = (item % c + 1) % c;
                item = next_cat + c * rng.gen_range(0..cfg.items / c);
                t += rng.gen_range(10..300);
            }
            Session::new(format!("k{s}"), events)
        })
        .collect();
    Corpus {
        sessions,
        attributes: category_attributes(cfg.items, c),
    }
}

/// Twelve items in click chains plus four categories and four brands:
/// twenty entities in total.
pub fn toy_kg_corpus(seed: u64) -> (Vec<Session>, AttributeMap) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sessions = (0..6)
        .map(|s| {
            let events = (0..4)
                .map(|k| Click::new(item_name((2 * s + 3 * k) % 12), 100 * s as i64 + k as i64))
                .collect();
            Session::new(format!("toy{s}"), events)
        })
        .collect();
    let mut brand_order: Vec<usize> = (0..12).collect();
    brand_order.shuffle(&mut rng);
    let mut attributes = AttributeMap::new();
    for i in 0..12 {
        let set = attributes.entry(item_name(i)).or_default();
        set.insert(("category".into(), format!("c{}", i % 4)));
        set.insert(("brand".into(), format!("b{}", brand_order[i] / 3)));
    }
    (sessions, attributes)
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;

    #[test]
    fn markov_successor_is_a_single_cycle() {
        let next = markov_successors(50, 3);
        let mut seen = HashSet::new();
        let mut i = 0;
        for _ in 0..50 {
            assert!(seen.insert(i));
            i = next[i];
        }
        assert_eq!(i, 0);
        assert!(next.iter().enumerate().all(|(i, &n)| i != n));
    }

    #[test]
    fn markov_sessions_follow_the_map() {
        let cfg = SynthConfig::defaults(CorpusKind::Markov);
        let c = markov_corpus(&cfg, 9);
        let next = markov_successors(cfg.items, 9);
        assert_eq!(c.sessions.len(), 200);
        for s in &c.sessions {
            assert!((5..=15).contains(&s.len()));
            for w in s.events.windows(2) {
                let a: usize = w[0].item[1..].parse().unwrap();
                let b: usize = w[1].item[1..].parse().unwrap();
                assert_eq!(next[a], b);
                assert!(w[1].timestamp > w[0].timestamp);
            }
        }
        assert_eq!(markov_corpus(&cfg, 9).sessions, c.sessions);
    }

    #[test]
    fn temporal_levels_pick_distinct_successors() {
        for item in 0..24 {
            let succ: HashSet<usize> = (0..TEMPORAL_GAP_LEVELS)
                .map(|g| temporal_successor(item, g, 24, 4))
                .collect();
            assert_eq!(succ.len(), TEMPORAL_GAP_LEVELS);
            // short gaps: same category; long gaps: complementary category
            assert_eq!(temporal_successor(item, 0, 24, 4) / 6, item / 6);
            assert_eq!(temporal_successor(item, 7, 24, 4) / 6, (item / 6) ^ 1);
        }
        for g in 0..TEMPORAL_GAP_LEVELS {
            let (lo, hi) = temporal_gap_range(g);
            assert_eq!((lo as f64).log2().floor() as usize, 2 * g + 1);
            assert_eq!(((hi - 1) as f64).log2().floor() as usize, 2 * g + 1);
        }
    }

    #[test]
    fn knowledge_successors_share_the_next_category() {
        let cfg = SynthConfig::defaults(CorpusKind::Knowledge);
        let c = knowledge_corpus(&cfg, 1);
        for s in &c.sessions {
            for w in s.events.windows(2) {
                let a: usize = w[0].item[1..].parse().unwrap();
                let b: usize = w[1].item[1..].parse().unwrap();
                assert_eq!(b % 12, (a % 12 + 1) % 12);
            }
        }
    }

    #[test]
    fn toy_kg_has_twenty_entities() {
        let (sessions, attrs) = toy_kg_corpus(5);
        let items: HashSet<_> = sessions
            .iter()
            .flat_map(|s| s.events.iter().map(|c| c.item.clone()))
            .collect();
        let values: HashSet<_> = attrs.values().flatten().collect();
        assert_eq!(items.len() + values.len(), 20);
    }
}
