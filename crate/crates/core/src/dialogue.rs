//! Consultation dialogues: records, sentence embedders, sinusoidal position
//! encoding, per-speaker dialogue vectors, and early-prediction truncation.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::EntityRef;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Speaker {
    Patient,
    Doctor,
}

impl Speaker {
    pub fn as_str(self) -> &'static str {
        match self {
            Speaker::Patient => "patient",
            Speaker::Doctor => "doctor",
        }
    }
}

impl fmt::Display for Speaker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Speaker {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "patient" => Ok(Speaker::Patient),
            "doctor" => Ok(Speaker::Doctor),
            other => Err(format!("unknown speaker `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sentence {
    pub speaker: Speaker,
    pub timestamp: i64,
    pub text: String,
}

/// Outcome label: 1 = failure (the positive class), 0 = success.
pub type Label = u8;

#[derive(Debug, Clone, PartialEq)]
pub struct ConsultationRecord {
    pub id: String,
    pub patient: EntityRef,
    pub doctor: EntityRef,
    pub disease: EntityRef,
    pub hospital: EntityRef,
    /// Sorted by timestamp.
    pub sentences: Vec<Sentence>,
    pub label: Option<Label>,
}

impl ConsultationRecord {
    pub fn start_time(&self) -> Option<i64> {
        self.sentences.first().map(|s| s.timestamp)
    }

    /// Number of patient→doctor exchange rounds.
    pub fn rounds(&self) -> usize {
        round_indices(&self.sentences).last().copied().unwrap_or(0)
    }
}

// ---------------------------------------------------------------------------
// Embedders

pub trait SentenceEmbedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

/// Seeded signed feature hashing over lowercase alphanumeric tokens,
/// L2-normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl HashEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        HashEmbedder { dim, seed }
    }
}

fn fnv1a(bytes: &[u8], seed: u64) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    // splitmix64 finalizer
    h ^= h >> 30;
    h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric() && c != '_')
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

/// Free-function form of [`HashEmbedder::embed`].
pub fn hash_embedder(text: &str, dim: usize, seed: u64) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    for tok in tokenize(text) {
        let h = fnv1a(tok.as_bytes(), seed);
        let idx = (h % dim as u64) as usize;
        let sign = if (h >> 63) == 0 { 1.0 } else { -1.0 };
        v[idx] += sign;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

impl SentenceEmbedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        Ok(hash_embedder(text, self.dim, self.seed))
    }
}

pub fn text_key(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Vectors looked up by `sha256(text)` from a precomputed file.
#[derive(Debug, Clone, Default)]
pub struct PrecomputedEmbedder {
    dim: usize,
    table: HashMap<String, Vec<f64>>,
}

impl PrecomputedEmbedder {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut table = HashMap::new();
        let mut dim = None;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let key = parts.next().expect("non-empty line").to_string();
            let vals: std::result::Result<Vec<f64>, _> = parts.map(str::parse::<f64>).collect();
            let vals = vals.map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
            match dim {
                None => dim = Some(vals.len()),
                Some(d) if d != vals.len() => {
                    return Err(Error::parse(
                        path,
                        i + 1,
                        format!("expected {d} values, found {}", vals.len()),
                    ))
                }
                _ => {}
            }
            table.insert(key, vals);
        }
        Ok(PrecomputedEmbedder {
            dim: dim.unwrap_or(0),
            table,
        })
    }

    /// Writes vectors for `texts` computed by `source`, one line per distinct
    /// text. Floats use shortest round-trip formatting.
    pub fn write(path: &Path, texts: &[&str], source: &dyn SentenceEmbedder) -> Result<()> {
        let mut seen = BTreeMap::new();
        for t in texts {
            seen.entry(text_key(t)).or_insert_with(|| *t);
        }
        let mut lines = Vec::with_capacity(seen.len());
        for (key, t) in seen {
            let v = source.embed(t)?;
            let vals: Vec<String> = v.iter().map(|x| format!("{x:?}")).collect();
            lines.push(format!("{key} {}", vals.join(" ")));
        }
        crate::graph::write_lines(path, lines)
    }
}

impl SentenceEmbedder for PrecomputedEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let key = text_key(text);
        self.table
            .get(&key)
            .cloned()
            .ok_or_else(|| Error::Config(format!("no precomputed embedding for sentence {key}")))
    }
}

// ---------------------------------------------------------------------------
// Position encoding and dialogue vectors

/// Sinusoidal encoding of a (1-based) position; `d` must be even.
pub fn positional_encoding(position: f64, d: usize) -> Result<Vec<f64>> {
    if d % 2 != 0 {
        return Err(Error::Config(format!("position encoding needs an even dimension, got {d}")));
    }
    let mut pe = vec![0.0; d];
    for j in 0..d / 2 {
        let angle = position / 10000f64.powf((2 * j) as f64 / d as f64);
        pe[2 * j] = angle.sin();
        pe[2 * j + 1] = angle.cos();
    }
    Ok(pe)
}

/// What the position encoding indexes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PositionMode {
    /// 1-based sentence index in the interleaved dialogue.
    #[default]
    Ordinal,
    /// 1 + whole minutes elapsed since the first sentence.
    ElapsedMinutes,
}

impl FromStr for PositionMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "ordinal" => Ok(PositionMode::Ordinal),
            "elapsed-minutes" => Ok(PositionMode::ElapsedMinutes),
            other => Err(format!("unknown position mode `{other}`")),
        }
    }
}

impl fmt::Display for PositionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PositionMode::Ordinal => "ordinal",
            PositionMode::ElapsedMinutes => "elapsed-minutes",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DialogueVector {
    pub vector: Vec<f64>,
    /// Set when the speaker has no sentences; `vector` is then zero.
    pub missing: bool,
}

/// Mean of `embedding + PE(position)` over `(position, text)` items.
pub fn embed_dialogue(
    items: &[(f64, &str)],
    embedder: &dyn SentenceEmbedder,
) -> Result<DialogueVector> {
    let d = embedder.dim();
    let mut acc = vec![0.0; d];
    if items.is_empty() {
        return Ok(DialogueVector {
            vector: acc,
            missing: true,
        });
    }
    for (pos, text) in items {
        let e = embedder.embed(text)?;
        if e.len() != d {
            return Err(Error::Dimension {
                expected: d,
                got: e.len(),
            });
        }
        let pe = positional_encoding(*pos, d)?;
        for k in 0..d {
            acc[k] += e[k] + pe[k];
        }
    }
    let m = items.len() as f64;
    acc.iter_mut().for_each(|x| *x /= m);
    Ok(DialogueVector {
        vector: acc,
        missing: false,
    })
}

/// Patient and doctor dialogue vectors for one consultation. Positions are
/// taken over the full interleaved dialogue.
pub fn embed_consultation(
    record: &ConsultationRecord,
    embedder: &dyn SentenceEmbedder,
    mode: PositionMode,
) -> Result<(DialogueVector, DialogueVector)> {
    let start = record.start_time().unwrap_or(0);
    let positioned: Vec<(f64, Speaker, &str)> = record
        .sentences
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let pos = match mode {
                PositionMode::Ordinal => (i + 1) as f64,
                PositionMode::ElapsedMinutes => ((s.timestamp - start) / 60 + 1) as f64,
            };
            (pos, s.speaker, s.text.as_str())
        })
        .collect();
    let pick = |sp: Speaker| -> Vec<(f64, &str)> {
        positioned
            .iter()
            .filter(|(_, s, _)| *s == sp)
            .map(|(p, _, t)| (*p, *t))
            .collect()
    };
    Ok((
        embed_dialogue(&pick(Speaker::Patient), embedder)?,
        embed_dialogue(&pick(Speaker::Doctor), embedder)?,
    ))
}

// ---------------------------------------------------------------------------
// Truncation

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TruncateMode {
    Hours,
    Rounds,
}

impl FromStr for TruncateMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "hours" => Ok(TruncateMode::Hours),
            "rounds" => Ok(TruncateMode::Rounds),
            other => Err(format!("unknown truncation mode `{other}`")),
        }
    }
}

impl fmt::Display for TruncateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TruncateMode::Hours => "hours",
            TruncateMode::Rounds => "rounds",
        })
    }
}

/// 1-based round of each sentence; a new round starts whenever a patient
/// sentence follows a doctor sentence.
fn round_indices(sentences: &[Sentence]) -> Vec<usize> {
    let mut round = 1;
    let mut prev: Option<Speaker> = None;
    sentences
        .iter()
        .map(|s| {
            if prev == Some(Speaker::Doctor) && s.speaker == Speaker::Patient {
                round += 1;
            }
            prev = Some(s.speaker);
            round
        })
        .collect()
}

pub fn truncate(record: &ConsultationRecord, mode: TruncateMode, k: usize) -> Result<ConsultationRecord> {
    if k == 0 {
        return Err(Error::Config("truncation horizon must be at least 1".into()));
    }
    let mut out = record.clone();
    match mode {
        TruncateMode::Hours => {
            if let Some(start) = record.start_time() {
                let limit = start + k as i64 * 3600;
                out.sentences.retain(|s| s.timestamp <= limit);
            }
        }
        TruncateMode::Rounds => {
            let rounds = round_indices(&record.sentences);
            out.sentences = record
                .sentences
                .iter()
                .zip(rounds)
                .filter(|(_, r)| *r <= k)
                .map(|(s, _)| s.clone())
                .collect();
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Files

pub fn escape_text(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

pub fn unescape_text(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some('\\') => out.push('\\'),
            Some(other) => {
                out.push('\\');
                out.push(other);
            }
            None => out.push('\\'),
        }
    }
    out
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r').to_string()))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
        .collect())
}

/// `consultation_id  speaker  timestamp  text`, grouped by consultation and
/// stably sorted by timestamp.
pub fn parse_dialogues(path: &Path) -> Result<BTreeMap<String, Vec<Sentence>>> {
    let mut out: BTreeMap<String, Vec<Sentence>> = BTreeMap::new();
    for (lineno, line) in read_lines(path)? {
        let f: Vec<&str> = line.splitn(4, '\t').collect();
        if f.len() != 4 {
            return Err(Error::parse(path, lineno, format!("expected 4 fields, found {}", f.len())));
        }
        let speaker: Speaker = f[1].parse().map_err(|m| Error::parse(path, lineno, m))?;
        let timestamp: i64 = f[2]
            .parse()
            .map_err(|_| Error::parse(path, lineno, format!("bad timestamp `{}`", f[2])))?;
        out.entry(f[0].to_string()).or_default().push(Sentence {
            speaker,
            timestamp,
            text: unescape_text(f[3]),
        });
    }
    for v in out.values_mut() {
        v.sort_by_key(|s| s.timestamp);
    }
    Ok(out)
}

pub fn dialogue_lines(records: &[ConsultationRecord]) -> Vec<String> {
    records
        .iter()
        .flat_map(|r| {
            r.sentences.iter().map(move |s| {
                format!("{}\t{}\t{}\t{}", r.id, s.speaker, s.timestamp, escape_text(&s.text))
            })
        })
        .collect()
}

/// `consultation_id  label`
pub fn parse_labels(path: &Path) -> Result<BTreeMap<String, Label>> {
    let mut out = BTreeMap::new();
    for (lineno, line) in read_lines(path)? {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 2 {
            return Err(Error::parse(path, lineno, format!("expected 2 fields, found {}", f.len())));
        }
        let label = match f[1] {
            "0" => 0,
            "1" => 1,
            other => return Err(Error::parse(path, lineno, format!("label must be 0 or 1, got `{other}`"))),
        };
        out.insert(f[0].to_string(), label);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Zero(usize);
    impl SentenceEmbedder for Zero {
        fn dim(&self) -> usize {
            self.0
        }
        fn embed(&self, _: &str) -> Result<Vec<f64>> {
            Ok(vec![0.0; self.0])
        }
    }

    fn s(speaker: Speaker, t: i64, text: &str) -> Sentence {
        Sentence {
            speaker,
            timestamp: t,
            text: text.into(),
        }
    }

    fn record(sentences: Vec<Sentence>) -> ConsultationRecord {
        ConsultationRecord {
            id: "c1".into(),
            patient: EntityRef::patient("p"),
            doctor: EntityRef::doctor("d"),
            disease: EntityRef::disease("x"),
            hospital: EntityRef::hospital("h"),
            sentences,
            label: Some(0),
        }
    }

    #[test]
    fn pe_values() {
        let pe0 = positional_encoding(0.0, 6).unwrap();
        assert_eq!(pe0, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let pe1 = positional_encoding(1.0, 8).unwrap();
        assert!((pe1[0] - 0.841471).abs() < 1e-6);
        assert!((pe1[1] - 0.540302).abs() < 1e-6);
        assert!(positional_encoding(1.0, 5).is_err());
        for i in 1..200 {
            assert!(positional_encoding(i as f64, 16).unwrap().iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn dialogue_vector_cases() {
        let z = Zero(4);
        let one = embed_dialogue(&[(1.0, "hi")], &z).unwrap();
        assert_eq!(one.vector, positional_encoding(1.0, 4).unwrap());
        assert!(!one.missing);

        let h = HashEmbedder::new(4, 1);
        let e = h.embed("same words").unwrap();
        let two = embed_dialogue(&[(1.0, "same words"), (2.0, "same words")], &h).unwrap();
        let p1 = positional_encoding(1.0, 4).unwrap();
        let p2 = positional_encoding(2.0, 4).unwrap();
        for k in 0..4 {
            assert!((two.vector[k] - (e[k] + (p1[k] + p2[k]) / 2.0)).abs() < 1e-15);
        }

        let empty = embed_dialogue(&[], &h).unwrap();
        assert!(empty.missing);
        assert_eq!(empty.vector, vec![0.0; 4]);
    }

    #[test]
    fn hash_embedder_cases() {
        assert_eq!(hash_embedder("", 8, 3), vec![0.0; 8]);
        assert_eq!(hash_embedder("  ,.!", 8, 3), vec![0.0; 8]);
        let a = hash_embedder("Take the pills, twice daily.", 16, 3);
        assert_eq!(a, hash_embedder("Take the pills, twice daily.", 16, 3));
        let n: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
        assert_ne!(a, hash_embedder("Take the pills, twice daily.", 16, 4));
    }

    #[test]
    fn truncation_rounds_and_hours() {
        use Speaker::*;
        let r = record(vec![
            s(Patient, 0, "a"),
            s(Patient, 10, "b"),
            s(Doctor, 4000, "c"),
            s(Doctor, 4100, "d"),
            s(Patient, 8000, "e"),
            s(Doctor, 90000, "f"),
        ]);
        assert_eq!(r.rounds(), 2);
        let r1 = truncate(&r, TruncateMode::Rounds, 1).unwrap();
        assert_eq!(r1.sentences.len(), 4);
        assert_eq!(truncate(&r, TruncateMode::Rounds, 2).unwrap(), r);
        assert_eq!(truncate(&r, TruncateMode::Rounds, 50).unwrap(), r);
        let h1 = truncate(&r, TruncateMode::Hours, 1).unwrap();
        assert_eq!(h1.sentences.len(), 2);
        assert_eq!(truncate(&r, TruncateMode::Hours, 2).unwrap().sentences.len(), 4);
        assert_eq!(truncate(&r, TruncateMode::Hours, 25).unwrap(), r);
        assert!(truncate(&r, TruncateMode::Hours, 0).is_err());
        assert!(truncate(&r, TruncateMode::Rounds, 0).is_err());
    }

    #[test]
    fn speaker_positions_are_global() {
        use Speaker::*;
        let r = record(vec![s(Patient, 0, "x"), s(Doctor, 5, "y"), s(Patient, 9, "z")]);
        let (p, d) = embed_consultation(&r, &Zero(4), PositionMode::Ordinal).unwrap();
        let pe = |i| positional_encoding(i, 4).unwrap();
        assert_eq!(d.vector, pe(2.0));
        let (p1, p3) = (pe(1.0), pe(3.0));
        for k in 0..4 {
            assert!((p.vector[k] - (p1[k] + p3[k]) / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn escape_roundtrip() {
        let t = "tab\there\nnew \\ slash";
        assert_eq!(unescape_text(&escape_text(t)), t);
        assert!(!escape_text(t).contains('\t'));
    }
}
