//! Delay-word languages and their event-based reduction.
//!
//! A word assigns every measurement time `i` in `0..T` a delay `τ(i)`. The
//! measurement of time `i` is usable from step `i + τ(i)` on; any delay with
//! `i + τ(i) >= T` means the measurement never arrives inside the horizon.
//!
//! Each word induces an event sequence: at step `k` the event records, for
//! every source time `l <= k`, whether `z_l` has arrived. Distinct words can
//! induce the same event sequence (they are indistinguishable at run time), so
//! the language is reduced to its set of unique sequences and organised as a
//! prefix tree.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest supported horizon; event indices are stored as `u64` bit strings.
pub const MAX_HORIZON: usize = 62;

/// Upper bound on the number of generated words.
const MAX_WORDS: usize = 2_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DelayWord(Vec<usize>);

impl DelayWord {
    pub fn new(delays: Vec<usize>) -> Self {
        Self(delays)
    }

    /// Parses the compact digit notation (`"21210"`). Only single-digit
    /// delays can be written this way; use [`DelayWord::new`] otherwise.
    pub fn parse(digits: &str) -> Result<Self> {
        digits
            .trim()
            .chars()
            .map(|c| {
                c.to_digit(10)
                    .map(|d| d as usize)
                    .ok_or_else(|| Error::InvalidLanguage(format!("'{c}' is not a delay digit")))
            })
            .collect::<Result<Vec<_>>>()
            .map(Self)
    }

    pub fn delays(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Whether the measurement from `source` has arrived by `step`.
    pub fn available(&self, source: usize, step: usize) -> bool {
        source <= step && self.0[source] <= step - source
    }

    /// Step at which the measurement from `source` is delivered, if inside the horizon.
    pub fn arrival_step(&self, source: usize) -> Option<usize> {
        let at = source + self.0[source];
        (at < self.0.len()).then_some(at)
    }
}

impl fmt::Display for DelayWord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.iter().all(|&d| d < 10) {
            for d in &self.0 {
                write!(f, "{d}")?;
            }
            Ok(())
        } else {
            let parts: Vec<String> = self.0.iter().map(|d| d.to_string()).collect();
            write!(f, "[{}]", parts.join(","))
        }
    }
}

/// Language description as found in a language file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LanguageSpec {
    /// Every word with delays in `0..=tau_bar`.
    MaxDelay {
        #[serde(rename = "T")]
        horizon: usize,
        tau_bar: usize,
    },
    /// Explicit list of words.
    WordList {
        #[serde(rename = "T")]
        horizon: usize,
        words: Vec<Vec<usize>>,
        #[serde(default)]
        tau_bar: Option<usize>,
    },
    /// Every word in which at most `max_missing` measurements never arrive and
    /// the rest are on time.
    MaxMissing {
        #[serde(rename = "T")]
        horizon: usize,
        max_missing: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayLanguage {
    #[serde(rename = "T")]
    horizon: usize,
    tau_bar: usize,
    words: Vec<DelayWord>,
}

impl DelayLanguage {
    /// Builds a language from explicit words. Delays larger than `tau_bar`
    /// are accepted only when they push the arrival past the horizon.
    pub fn new(horizon: usize, tau_bar: usize, words: Vec<DelayWord>) -> Result<Self> {
        if horizon == 0 || horizon > MAX_HORIZON {
            return Err(Error::InvalidLanguage(format!(
                "horizon must be in 1..={MAX_HORIZON}, got {horizon}"
            )));
        }
        if words.is_empty() {
            return Err(Error::InvalidLanguage("empty word list".into()));
        }
        let mut seen = BTreeSet::new();
        for (a, w) in words.iter().enumerate() {
            if w.len() != horizon {
                return Err(Error::InvalidLanguage(format!(
                    "word {a} ({w}) has length {}, expected {horizon}",
                    w.len()
                )));
            }
            for (i, &d) in w.delays().iter().enumerate() {
                let missing = i + d >= horizon;
                if d > tau_bar && !missing {
                    return Err(Error::InvalidLanguage(format!(
                        "word {a} ({w}) has delay {d} at position {i}, above tau_bar = {tau_bar}"
                    )));
                }
            }
            if !seen.insert(w.clone()) {
                return Err(Error::InvalidLanguage(format!("duplicate word {w}")));
            }
        }
        Ok(Self {
            horizon,
            tau_bar,
            words,
        })
    }

    /// All `(tau_bar + 1)^T` words, lexicographic with position 0 most significant.
    pub fn max_delay(horizon: usize, tau_bar: usize) -> Result<Self> {
        let base = tau_bar + 1;
        let count = (base as u128).checked_pow(horizon as u32).unwrap_or(u128::MAX);
        if count > MAX_WORDS as u128 {
            return Err(Error::InvalidLanguage(format!(
                "({base})^{horizon} words exceed the generator limit of {MAX_WORDS}"
            )));
        }
        let words = (0..count as usize)
            .map(|mut code| {
                let mut delays = vec![0; horizon];
                for slot in delays.iter_mut().rev() {
                    *slot = code % base;
                    code /= base;
                }
                DelayWord(delays)
            })
            .collect();
        Self::new(horizon, tau_bar, words)
    }

    /// Words with at most `max_missing` lost measurements; a lost measurement
    /// carries the sentinel delay `T`.
    pub fn max_missing(horizon: usize, max_missing: usize) -> Result<Self> {
        if horizon > 24 {
            return Err(Error::InvalidLanguage(format!(
                "max_missing generator supports T <= 24, got {horizon}"
            )));
        }
        let words = (0u32..(1 << horizon))
            .filter(|mask| mask.count_ones() as usize <= max_missing)
            .map(|mask| {
                DelayWord(
                    (0..horizon)
                        .map(|i| if mask >> (horizon - 1 - i) & 1 == 1 { horizon } else { 0 })
                        .collect(),
                )
            })
            .collect();
        Self::new(horizon, 0, words)
    }

    pub fn from_spec(spec: &LanguageSpec) -> Result<Self> {
        match spec {
            LanguageSpec::MaxDelay { horizon, tau_bar } => Self::max_delay(*horizon, *tau_bar),
            LanguageSpec::MaxMissing {
                horizon,
                max_missing,
            } => Self::max_missing(*horizon, *max_missing),
            LanguageSpec::WordList {
                horizon,
                words,
                tau_bar,
            } => {
                let tau_bar = tau_bar.unwrap_or_else(|| {
                    words
                        .iter()
                        .flat_map(|w| w.iter().enumerate().filter(|(i, &d)| i + d < *horizon))
                        .map(|(_, &d)| d)
                        .max()
                        .unwrap_or(0)
                });
                Self::new(
                    *horizon,
                    tau_bar,
                    words.iter().cloned().map(DelayWord).collect(),
                )
            }
        }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn tau_bar(&self) -> usize {
        self.tau_bar
    }

    pub fn words(&self) -> &[DelayWord] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn index_of(&self, word: &DelayWord) -> Option<usize> {
        self.words.iter().position(|w| w == word)
    }
}

/// Enumerates the words described by a language spec.
pub fn enumerate_language(spec: &LanguageSpec) -> Result<DelayLanguage> {
    DelayLanguage::from_spec(spec)
}

/// Reads a language spec file (JSON) and enumerates it.
pub fn load_language(path: impl AsRef<Path>) -> Result<DelayLanguage> {
    let text = std::fs::read_to_string(path.as_ref())?;
    parse_language(&text)
}

pub fn parse_language(text: &str) -> Result<DelayLanguage> {
    let spec: LanguageSpec = serde_json::from_str(text)
        .map_err(|e| match e.line() {
            0 => Error::InvalidLanguage(e.to_string()),
            line => Error::InvalidLanguage(format!("line {line} column {}: {e}", e.column())),
        })?;
    DelayLanguage::from_spec(&spec)
}

/// Availability pattern at one step: bit `d_l` for every source time `l <= step`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Event {
    step: usize,
    index: u64,
}

impl Event {
    pub fn new(step: usize, index: u64) -> Self {
        debug_assert!(step < MAX_HORIZON && index >> (step + 1) == 0);
        Self { step, index }
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn index(&self) -> u64 {
        self.index
    }

    /// `d_l`; `d_0` is the most significant of the `step + 1` bits.
    pub fn bit(&self, source: usize) -> bool {
        source <= self.step && (self.index >> (self.step - source)) & 1 == 1
    }

    pub fn bits(&self) -> Vec<bool> {
        (0..=self.step).map(|l| self.bit(l)).collect()
    }
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.bits() {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

/// Encodes the set of arrived source times at `step` as an event.
pub fn event_index_from_availability<I>(step: usize, arrived: I) -> Result<Event>
where
    I: IntoIterator<Item = usize>,
{
    if step >= MAX_HORIZON {
        return Err(Error::InvalidArrival(format!("step {step} exceeds the supported horizon")));
    }
    let mut index = 0u64;
    for l in arrived {
        if l > step {
            return Err(Error::InvalidArrival(format!(
                "source time {l} has not happened yet at step {step}"
            )));
        }
        index |= 1 << (step - l);
    }
    Ok(Event::new(step, index))
}

/// Per-step event indices `j_0 .. j_{T-1}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EventSequence(Vec<u64>);

impl EventSequence {
    pub fn from_indices(indices: Vec<u64>) -> Result<Self> {
        if indices.len() > MAX_HORIZON {
            return Err(Error::InvalidLanguage("event sequence longer than supported horizon".into()));
        }
        for (k, &j) in indices.iter().enumerate() {
            if j >> (k + 1) != 0 {
                return Err(Error::InvalidLanguage(format!(
                    "event index {j} at step {k} needs more than {} bits",
                    k + 1
                )));
            }
        }
        Ok(Self(indices))
    }

    pub fn indices(&self) -> &[u64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn event(&self, step: usize) -> Event {
        Event::new(step, self.0[step])
    }

    pub fn available(&self, step: usize, source: usize) -> bool {
        self.event(step).bit(source)
    }

    pub fn prefix(&self, len: usize) -> &[u64] {
        &self.0[..len]
    }
}

impl fmt::Display for EventSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, j) in self.0.iter().enumerate() {
            if k > 0 {
                f.write_str(" ")?;
            }
            write!(f, "e{k},{j}")?;
        }
        Ok(())
    }
}

/// `j_k = Σ_ℓ 2^ℓ · 1[τ(k-ℓ) <= ℓ]`.
pub fn word_to_event_sequence(word: &DelayWord) -> EventSequence {
    let delays = word.delays();
    let indices = (0..delays.len())
        .map(|k| {
            (0..=k)
                .filter(|&l| delays[k - l] <= l)
                .fold(0u64, |acc, l| acc | 1 << l)
        })
        .collect();
    EventSequence(indices)
}

/// The reduced event-based language: unique sequences in first-occurrence order.
#[derive(Debug, Clone, PartialEq)]
pub struct EventLanguage {
    horizon: usize,
    sequences: Vec<EventSequence>,
    word_map: Vec<usize>,
}

impl EventLanguage {
    /// Builds a language directly from sequences (used when reloading certificates).
    pub fn from_sequences(horizon: usize, sequences: Vec<EventSequence>) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::InvalidLanguage("no event sequences".into()));
        }
        let mut seen = BTreeSet::new();
        for s in &sequences {
            if s.len() != horizon {
                return Err(Error::InvalidLanguage(format!(
                    "sequence {s} has length {}, expected {horizon}",
                    s.len()
                )));
            }
            if !seen.insert(s.indices().to_vec()) {
                return Err(Error::InvalidLanguage(format!("duplicate sequence {s}")));
            }
        }
        let word_map = (0..sequences.len()).collect();
        Ok(Self {
            horizon,
            sequences,
            word_map,
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn sequences(&self) -> &[EventSequence] {
        &self.sequences
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Index into [`Self::sequences`] for every word of the source language.
    pub fn word_map(&self) -> &[usize] {
        &self.word_map
    }

    pub fn sequence_of_word(&self, word: &DelayWord) -> Option<usize> {
        let seq = word_to_event_sequence(word);
        self.sequences.iter().position(|s| *s == seq)
    }
}

pub fn reduce_language(lang: &DelayLanguage) -> EventLanguage {
    let mut lookup: HashMap<EventSequence, usize> = HashMap::new();
    let mut sequences = Vec::new();
    let word_map = lang
        .words()
        .iter()
        .map(|w| {
            let seq = word_to_event_sequence(w);
            *lookup.entry(seq.clone()).or_insert_with(|| {
                sequences.push(seq);
                sequences.len() - 1
            })
        })
        .collect();
    EventLanguage {
        horizon: lang.horizon(),
        sequences,
        word_map,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrefixNode {
    pub depth: usize,
    pub parent: Option<usize>,
    /// Event index of the last event of this node's prefix (`None` at the root).
    pub event: Option<u64>,
    /// Sequences whose prefix of length `depth` equals this node's key.
    pub sequences: Vec<usize>,
    /// Children ordered by first occurrence.
    pub children: Vec<(u64, usize)>,
}

/// Trie over event sequences. Nodes are numbered breadth-first, so all nodes
/// of depth `d` precede those of depth `d + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixTree {
    horizon: usize,
    nodes: Vec<PrefixNode>,
    leaves: Vec<usize>,
}

pub const ROOT: usize = 0;

impl PrefixTree {
    pub fn build(ev: &EventLanguage) -> Self {
        let horizon = ev.horizon();
        let mut nodes = vec![PrefixNode {
            depth: 0,
            parent: None,
            event: None,
            sequences: (0..ev.len()).collect(),
            children: Vec::new(),
        }];
        let mut frontier = vec![ROOT];
        for step in 0..horizon {
            let mut next = Vec::new();
            for &id in &frontier {
                let mut groups: Vec<(u64, Vec<usize>)> = Vec::new();
                for &a in &nodes[id].sequences {
                    let j = ev.sequences()[a].indices()[step];
                    match groups.iter_mut().find(|(e, _)| *e == j) {
                        Some((_, members)) => members.push(a),
                        None => groups.push((j, vec![a])),
                    }
                }
                for (j, members) in groups {
                    let child = nodes.len();
                    nodes.push(PrefixNode {
                        depth: step + 1,
                        parent: Some(id),
                        event: Some(j),
                        sequences: members,
                        children: Vec::new(),
                    });
                    nodes[id].children.push((j, child));
                    next.push(child);
                }
            }
            frontier = next;
        }
        let mut leaves = vec![usize::MAX; ev.len()];
        for &id in &frontier {
            for &a in &nodes[id].sequences {
                leaves[a] = id;
            }
        }
        Self {
            horizon,
            nodes,
            leaves,
        }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn nodes(&self) -> &[PrefixNode] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> &PrefixNode {
        &self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn child(&self, id: usize, event: u64) -> Option<usize> {
        self.nodes[id]
            .children
            .iter()
            .find(|(e, _)| *e == event)
            .map(|&(_, c)| c)
    }

    /// Node whose key is exactly `prefix`.
    pub fn resolve(&self, prefix: &[u64]) -> Result<usize> {
        if prefix.len() > self.horizon {
            return Err(Error::PatternOutsideLanguage { step: self.horizon });
        }
        prefix.iter().enumerate().try_fold(ROOT, |id, (step, &j)| {
            self.child(id, j)
                .ok_or(Error::PatternOutsideLanguage { step })
        })
    }

    pub fn leaf(&self, sequence: usize) -> usize {
        self.leaves[sequence]
    }

    /// Node ids of `sequence`'s path, depth 1 through T.
    pub fn path(&self, sequence: usize) -> Vec<usize> {
        let mut path = Vec::with_capacity(self.horizon);
        let mut id = self.leaves[sequence];
        while let Some(parent) = self.nodes[id].parent {
            path.push(id);
            id = parent;
        }
        path.reverse();
        path
    }

    pub fn nodes_at_depth(&self, depth: usize) -> impl Iterator<Item = usize> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter(move |(_, n)| n.depth == depth)
            .map(|(i, _)| i)
    }
}

pub fn build_prefix_tree(ev: &EventLanguage) -> PrefixTree {
    PrefixTree::build(ev)
}

/// Lower-triangular availability table: entry `(step, source)` is `d_source` of the event at `step`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventMatrix {
    size: usize,
    entries: Vec<bool>,
}

impl EventMatrix {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, step: usize, source: usize) -> bool {
        self.entries[step * self.size + source]
    }

    pub fn to_rows(&self) -> Vec<Vec<u8>> {
        (0..self.size)
            .map(|i| (0..self.size).map(|j| self.get(i, j) as u8).collect())
            .collect()
    }
}

impl fmt::Display for EventMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for row in self.to_rows() {
            let cells: Vec<String> = row.iter().map(|b| b.to_string()).collect();
            writeln!(f, "[{}]", cells.join(" "))?;
        }
        Ok(())
    }
}

pub fn event_matrix(seq: &EventSequence) -> EventMatrix {
    let size = seq.len();
    let mut entries = vec![false; size * size];
    for i in 0..size {
        let ev = seq.event(i);
        for j in 0..=i {
            entries[i * size + j] = ev.bit(j);
        }
    }
    EventMatrix { size, entries }
}
