//! Click-log ingestion, train/test split, prefix augmentation, temporal
//! fractions, padding and batching.

mod synth;

pub use synth::{
    synth_from_tables, synth_generate, synth_generate_with, write_clicks, MarkovTable, SynthConfig,
};

use std::collections::HashMap;
use std::io::BufRead;

use chrono::{DateTime, NaiveDate};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const PADDING_INDEX: usize = 0;
pub const DEFAULT_WINDOW: usize = 19;
pub const DEFAULT_BATCH_SIZE: usize = 512;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClickEvent {
    pub session_id: String,
    /// Milliseconds since the Unix epoch, UTC.
    pub timestamp: i64,
    pub item_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Session {
    pub session_id: String,
    /// Sorted ascending by timestamp; ties keep input order.
    pub events: Vec<ClickEvent>,
}

impl Session {
    pub fn new(session_id: impl Into<String>, mut events: Vec<ClickEvent>) -> Self {
        events.sort_by_key(|e| e.timestamp);
        Session {
            session_id: session_id.into(),
            events,
        }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn start_time(&self) -> i64 {
        self.events.first().map_or(i64::MIN, |e| e.timestamp)
    }

    pub fn items(&self) -> impl Iterator<Item = &str> {
        self.events.iter().map(|e| e.item_id.as_str())
    }
}

/// Bijection between external item ids and indices `1..=m`; index 0 is
/// reserved for padding.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocabulary {
    item_to_index: HashMap<String, usize>,
    index_to_item: Vec<String>,
}

impl Vocabulary {
    pub fn new() -> Self {
        Vocabulary {
            item_to_index: HashMap::new(),
            index_to_item: vec![String::new()],
        }
    }

    /// Number of real items, `m`.
    pub fn len(&self) -> usize {
        self.index_to_item.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Table size including the padding slot, `m + 1`.
    pub fn size_with_padding(&self) -> usize {
        self.index_to_item.len()
    }

    pub fn insert(&mut self, item: &str) -> usize {
        if let Some(&idx) = self.item_to_index.get(item) {
            return idx;
        }
        let idx = self.index_to_item.len();
        self.index_to_item.push(item.to_string());
        self.item_to_index.insert(item.to_string(), idx);
        idx
    }

    pub fn index(&self, item: &str) -> Option<usize> {
        self.item_to_index.get(item).copied()
    }

    pub fn item(&self, index: usize) -> Option<&str> {
        if index == PADDING_INDEX {
            return None;
        }
        self.index_to_item.get(index).map(String::as_str)
    }

    pub fn encode(&self, session: &Session) -> Result<Vec<usize>> {
        session
            .items()
            .map(|it| {
                self.index(it).ok_or_else(|| {
                    Error::data(format!(
                        "item {it} of session {} is not in the vocabulary",
                        session.session_id
                    ))
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TrainingExample {
    pub prefix: Vec<usize>,
    pub label: usize,
    /// Reversed future clicks after the label, possibly empty.
    pub privileged: Vec<usize>,
    pub session_start: i64,
}

impl TrainingExample {
    /// `prefix + [label] + reverse(privileged)`.
    pub fn reconstruct_session(&self) -> Vec<usize> {
        let mut out = self.prefix.clone();
        out.push(self.label);
        out.extend(self.privileged.iter().rev());
        out
    }

    /// `prefix|label|privileged`, space-separated indices.
    pub fn to_line(&self) -> String {
        let join = |v: &[usize]| {
            v.iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(" ")
        };
        format!("{}|{}|{}", join(&self.prefix), self.label, join(&self.privileged))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MiniBatch {
    pub window: usize,
    /// batch × window item indices, row-major, 0 = padding.
    pub inputs: Vec<usize>,
    pub mask: Vec<u8>,
    pub labels: Vec<usize>,
    pub privileged_inputs: Option<Vec<usize>>,
    pub privileged_mask: Option<Vec<u8>>,
    /// Position of each row in the example slice the batch was cut from.
    pub example_indices: Vec<usize>,
}

impl MiniBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, r: usize) -> &[usize] {
        &self.inputs[r * self.window..(r + 1) * self.window]
    }

    /// Builds an unshuffled batch from raw prefixes (labels may be empty).
    pub fn from_prefixes(prefixes: &[&[usize]], labels: &[usize], window: usize) -> Self {
        let mut inputs = Vec::with_capacity(prefixes.len() * window);
        let mut mask = Vec::with_capacity(prefixes.len() * window);
        for p in prefixes {
            let (row, m) = pad_truncate(p, window);
            inputs.extend(row);
            mask.extend(m);
        }
        MiniBatch {
            window,
            inputs,
            mask,
            labels: labels.to_vec(),
            privileged_inputs: None,
            privileged_mask: None,
            example_indices: (0..prefixes.len()).collect(),
        }
    }
}

fn parse_timestamp(raw: &str) -> std::result::Result<i64, String> {
    DateTime::parse_from_rfc3339(raw)
        .map(|dt| dt.timestamp_millis())
        .map_err(|e| format!("bad timestamp {raw:?}: {e}"))
}

/// Reads `session_id,timestamp,item_id[,category]` lines. Sessions come
/// back in order of first appearance, events sorted by time.
pub fn parse_clicks<R: BufRead>(reader: R) -> Result<Vec<Session>> {
    let mut order: Vec<String> = Vec::new();
    let mut grouped: HashMap<String, Vec<ClickEvent>> = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 3 || fields.len() > 4 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected 3 or 4 fields, found {}", fields.len()),
            });
        }
        let session_id = fields[0].trim();
        let item_id = fields[2].trim();
        if session_id.is_empty() || item_id.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                msg: "empty session or item id".into(),
            });
        }
        let timestamp = parse_timestamp(fields[1].trim()).map_err(|msg| Error::Parse {
            line: line_no,
            msg,
        })?;
        let events = grouped.entry(session_id.to_string()).or_insert_with(|| {
            order.push(session_id.to_string());
            Vec::new()
        });
        events.push(ClickEvent {
            session_id: session_id.to_string(),
            timestamp,
            item_id: item_id.to_string(),
        });
    }
    Ok(order
        .into_iter()
        .map(|id| {
            let events = grouped.remove(&id).unwrap_or_default();
            Session::new(id, events)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitMode {
    /// Sessions starting on the final UTC day go to the test set.
    LastDay,
    /// Everything is training data.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FilterConfig {
    pub min_session_length: usize,
    pub min_item_support: usize,
    pub split: SplitMode,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            min_session_length: 2,
            min_item_support: 5,
            split: SplitMode::LastDay,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SplitData {
    pub train: Vec<Session>,
    pub test: Vec<Session>,
    pub vocab: Vocabulary,
}

fn utc_day(ms: i64) -> NaiveDate {
    DateTime::from_timestamp_millis(ms)
        .map(|dt| dt.date_naive())
        .unwrap_or(NaiveDate::MIN)
}

pub fn split_and_filter(sessions: Vec<Session>) -> Result<SplitData> {
    split_and_filter_with(sessions, &FilterConfig::default())
}

pub fn split_and_filter_with(sessions: Vec<Session>, cfg: &FilterConfig) -> Result<SplitData> {
    let sessions: Vec<Session> = sessions.into_iter().filter(|s| !s.is_empty()).collect();
    if sessions.is_empty() {
        return Err(Error::config("no sessions to split"));
    }
    let (mut train, mut test): (Vec<Session>, Vec<Session>) = match cfg.split {
        SplitMode::None => (sessions, Vec::new()),
        SplitMode::LastDay => {
            let last = sessions
                .iter()
                .flat_map(|s| s.events.iter().map(|e| e.timestamp))
                .max()
                .map(utc_day)
                .unwrap_or(NaiveDate::MIN);
            sessions
                .into_iter()
                .partition(|s| utc_day(s.start_time()) != last)
        }
    };

    loop {
        let before: usize = train.iter().map(Session::len).sum::<usize>() + train.len();
        train.retain(|s| s.len() >= cfg.min_session_length);
        let mut support: HashMap<&str, usize> = HashMap::new();
        for s in &train {
            for it in s.items() {
                *support.entry(it).or_default() += 1;
            }
        }
        let rare: std::collections::HashSet<String> = support
            .into_iter()
            .filter(|&(_, n)| n < cfg.min_item_support)
            .map(|(it, _)| it.to_string())
            .collect();
        for s in train.iter_mut() {
            s.events.retain(|e| !rare.contains(&e.item_id));
        }
        train.retain(|s| s.len() >= cfg.min_session_length);
        let after: usize = train.iter().map(Session::len).sum::<usize>() + train.len();
        if after == before {
            break;
        }
    }
    if train.is_empty() {
        return Err(Error::config("no training sessions survive the split and filtering"));
    }

    let mut vocab = Vocabulary::new();
    for s in &train {
        for it in s.items() {
            vocab.insert(it);
        }
    }
    for s in test.iter_mut() {
        s.events.retain(|e| vocab.index(&e.item_id).is_some());
    }
    test.retain(|s| s.len() >= cfg.min_session_length);

    Ok(SplitData { train, test, vocab })
}

/// Every prefix of `session` with its next item and reversed future.
pub fn augment_prefixes(session: &Session, vocab: &Vocabulary) -> Result<Vec<TrainingExample>> {
    let items = vocab.encode(session)?;
    Ok(augment_indices(&items, session.start_time()))
}

pub fn augment_indices(items: &[usize], session_start: i64) -> Vec<TrainingExample> {
    (1..items.len())
        .map(|r| TrainingExample {
            prefix: items[..r].to_vec(),
            label: items[r],
            privileged: items[r + 1..].iter().rev().copied().collect(),
            session_start,
        })
        .collect()
}

pub fn augment_corpus(sessions: &[Session], vocab: &Vocabulary) -> Result<Vec<TrainingExample>> {
    let mut out = Vec::new();
    for s in sessions {
        out.extend(augment_prefixes(s, vocab)?);
    }
    Ok(out)
}

/// Stable sort by session start.
pub fn sort_by_time(examples: &mut [TrainingExample]) {
    examples.sort_by_key(|e| e.session_start);
}

/// The most recent `ceil(fraction · N)` examples, in time order.
pub fn temporal_fraction(mut examples: Vec<TrainingExample>, fraction: f64) -> Result<Vec<TrainingExample>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config(format!("fraction {fraction} outside (0, 1]")));
    }
    sort_by_time(&mut examples);
    let keep = (fraction * examples.len() as f64).ceil() as usize;
    let skip = examples.len() - keep.min(examples.len());
    examples.drain(..skip);
    Ok(examples)
}

/// Parses `1/4`-style or decimal fractions.
pub fn parse_fraction(raw: &str) -> Result<f64> {
    let raw = raw.trim();
    let value = match raw.split_once('/') {
        Some((n, d)) => {
            let n: f64 = n.trim().parse().map_err(|_| Error::config(format!("bad fraction {raw}")))?;
            let d: f64 = d.trim().parse().map_err(|_| Error::config(format!("bad fraction {raw}")))?;
            n / d
        }
        None => raw.parse().map_err(|_| Error::config(format!("bad fraction {raw}")))?,
    };
    if !(value > 0.0 && value <= 1.0) {
        return Err(Error::config(format!("fraction {raw} outside (0, 1]")));
    }
    Ok(value)
}

/// Keeps the last `window` items and left-pads with zeros.
pub fn pad_truncate(prefix: &[usize], window: usize) -> (Vec<usize>, Vec<u8>) {
    let kept = &prefix[prefix.len().saturating_sub(window)..];
    let pad = window - kept.len();
    let mut row = vec![PADDING_INDEX; pad];
    row.extend_from_slice(kept);
    let mut mask = vec![0u8; pad];
    mask.extend(std::iter::repeat_n(1u8, kept.len()));
    (row, mask)
}

/// Shuffles deterministically by `seed` and cuts into batches; the last
/// batch may be short.
pub fn make_batches(
    examples: &[TrainingExample],
    batch_size: usize,
    window: usize,
    seed: u64,
    with_privileged: bool,
) -> Vec<MiniBatch> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    batches_in_order(examples, &order, batch_size, window, with_privileged)
}

pub(crate) fn batches_in_order(
    examples: &[TrainingExample],
    order: &[usize],
    batch_size: usize,
    window: usize,
    with_privileged: bool,
) -> Vec<MiniBatch> {
    let batch_size = batch_size.max(1);
    order
        .chunks(batch_size)
        .map(|chunk| {
            let n = chunk.len();
            let mut b = MiniBatch {
                window,
                inputs: Vec::with_capacity(n * window),
                mask: Vec::with_capacity(n * window),
                labels: Vec::with_capacity(n),
                privileged_inputs: with_privileged.then(|| Vec::with_capacity(n * window)),
                privileged_mask: with_privileged.then(|| Vec::with_capacity(n * window)),
                example_indices: chunk.to_vec(),
            };
            for &i in chunk {
                let ex = &examples[i];
                let (row, mask) = pad_truncate(&ex.prefix, window);
                b.inputs.extend(row);
                b.mask.extend(mask);
                b.labels.push(ex.label);
                if with_privileged {
                    let (row, mask) = pad_truncate(&ex.privileged, window);
                    b.privileged_inputs.as_mut().unwrap().extend(row);
                    b.privileged_mask.as_mut().unwrap().extend(mask);
                }
            }
            b
        })
        .collect()
}
