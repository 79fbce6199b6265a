//! Seeded Markov-chain click generator for desk-scale experiments.

use std::io::Write;

use chrono::{DateTime, SecondsFormat};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ClickEvent, Session};

const DAY_MS: i64 = 86_400_000;
/// 2014-04-01T00:00:00Z
const EPOCH_START_MS: i64 = 1_396_310_400_000;

/// First-order transition model over items `0..n_items`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovTable {
    pub start: Vec<f64>,
    /// Per source item: (successor, probability), probabilities sum to 1.
    pub transitions: Vec<Vec<(usize, f64)>>,
}

impl MarkovTable {
    /// Each item gets `branching` distinct successors (never itself) with
    /// random weights.
    pub fn random(rng: &mut impl Rng, n_items: usize, branching: usize) -> Self {
        assert!(n_items >= 2, "need at least two items");
        let branching = branching.clamp(1, n_items - 1);
        let start = (0..n_items).map(|_| rng.gen_range(0.5..1.5)).collect();
        let transitions = (0..n_items)
            .map(|src| {
                let picks = sample(rng, n_items - 1, branching);
                let mut succ: Vec<(usize, f64)> = picks
                    .into_iter()
                    .map(|j| {
                        let dst = if j >= src { j + 1 } else { j };
                        (dst, rng.gen_range(0.1..1.0))
                    })
                    .collect();
                let total: f64 = succ.iter().map(|s| s.1).sum();
                succ.iter_mut().for_each(|s| s.1 /= total);
                succ
            })
            .collect();
        MarkovTable { start, transitions }
    }

    /// 0 → 1 → 0 → … with certainty.
    pub fn alternating() -> Self {
        MarkovTable {
            start: vec![1.0, 1.0],
            transitions: vec![vec![(1, 1.0)], vec![(0, 1.0)]],
        }
    }

    pub fn n_items(&self) -> usize {
        self.transitions.len()
    }

    fn sample_start(&self, rng: &mut impl Rng) -> usize {
        let total: f64 = self.start.iter().sum();
        let mut u = rng.gen::<f64>() * total;
        for (i, &w) in self.start.iter().enumerate() {
            if u < w {
                return i;
            }
            u -= w;
        }
        self.start.len() - 1
    }

    fn sample_next(&self, rng: &mut impl Rng, from: usize) -> usize {
        let succ = &self.transitions[from];
        let mut u = rng.gen::<f64>();
        for &(dst, p) in succ {
            if u < p {
                return dst;
            }
            u -= p;
        }
        succ.last().map_or(from, |s| s.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_items: usize,
    pub n_sessions: usize,
    pub day_count: u32,
    pub branching: usize,
    pub mean_length: f64,
    pub min_length: usize,
    pub max_length: usize,
    /// Switch to a second, independently drawn table for sessions starting
    /// after this fraction of the timeline.
    pub shift_at: Option<f64>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_items: 200,
            n_sessions: 20_000,
            day_count: 8,
            branching: 5,
            mean_length: 6.0,
            min_length: 2,
            max_length: 19,
            shift_at: None,
        }
    }
}

pub fn synth_generate(seed: u64, n_items: usize, n_sessions: usize, day_count: u32) -> Vec<Session> {
    let cfg = SynthConfig {
        n_items,
        n_sessions,
        day_count,
        ..SynthConfig::default()
    };
    synth_generate_with(seed, &cfg).0
}

/// Generates sessions and returns them with the table(s) used, in time
/// order of session start.
pub fn synth_generate_with(seed: u64, cfg: &SynthConfig) -> (Vec<Session>, Vec<MarkovTable>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tables = vec![MarkovTable::random(&mut rng, cfg.n_items, cfg.branching)];
    if cfg.shift_at.is_some() {
        tables.push(MarkovTable::random(&mut rng, cfg.n_items, cfg.branching));
    }
    let sessions = sample_sessions(&mut rng, &tables, cfg);
    (sessions, tables)
}

/// Samples from caller-supplied tables (one, or two with `cfg.shift_at`).
pub fn synth_from_tables(seed: u64, tables: &[MarkovTable], cfg: &SynthConfig) -> Vec<Session> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_sessions(&mut rng, tables, cfg)
}

fn sample_length(rng: &mut impl Rng, cfg: &SynthConfig) -> usize {
    // Geometric on {1, 2, ...} with the configured mean.
    let p = 1.0 / cfg.mean_length.max(1.0);
    let mut n = 1;
    while rng.gen::<f64>() >= p && n < 10 * cfg.max_length {
        n += 1;
    }
    n.clamp(cfg.min_length, cfg.max_length)
}

fn sample_sessions(rng: &mut ChaCha8Rng, tables: &[MarkovTable], cfg: &SynthConfig) -> Vec<Session> {
    let span = i64::from(cfg.day_count.max(1)) * DAY_MS;
    let switch_ms = cfg.shift_at.map(|f| EPOCH_START_MS + (f * span as f64) as i64);

    let mut starts: Vec<i64> = (0..cfg.n_sessions)
        .map(|_| EPOCH_START_MS + rng.gen_range(0..span - 3_600_000))
        .collect();
    starts.sort_unstable();

    starts
        .into_iter()
        .enumerate()
        .map(|(i, start)| {
            let table = match switch_ms {
                Some(sw) if start >= sw && tables.len() > 1 => &tables[1],
                _ => &tables[0],
            };
            let sid = (i + 1).to_string();
            let len = sample_length(rng, cfg);
            let mut item = table.sample_start(rng);
            let mut ts = start;
            let mut events = Vec::with_capacity(len);
            for step in 0..len {
                if step > 0 {
                    item = table.sample_next(rng, item);
                    ts += rng.gen_range(5_000..120_000);
                }
                events.push(ClickEvent {
                    session_id: sid.clone(),
                    timestamp: ts,
                    item_id: (item + 1).to_string(),
                });
            }
            Session::new(sid, events)
        })
        .collect()
}

/// Writes `session_id,timestamp,item_id,category` lines with ISO-8601
/// millisecond timestamps.
pub fn write_clicks<W: Write>(sessions: &[Session], mut out: W) -> std::io::Result<()> {
    for s in sessions {
        for e in &s.events {
            let ts = DateTime::from_timestamp_millis(e.timestamp)
                .expect("timestamp in range")
                .to_rfc3339_opts(SecondsFormat::Millis, true);
            writeln!(out, "{},{},{},0", e.session_id, ts, e.item_id)?;
        }
    }
    Ok(())
}
