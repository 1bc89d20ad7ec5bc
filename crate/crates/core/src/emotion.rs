//! Emotion coordinates and the paired text/MIDI dataset.
//!
//! Emotion categories are placed in the valence/arousal plane through a
//! VAD lexicon, texts inherit their category's quadrant and are paired with
//! MIDI clips annotated with the same quadrant.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::substream;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("lexicon contains no usable rows")]
    EmptyLexicon,
    #[error("valence/arousal ({valence}, {arousal}) outside [0, 1]")]
    OutOfRange { valence: f64, arousal: f64 },
    #[error("quadrant {0} has texts but no clips")]
    EmptyQuadrant(Quadrant),
    #[error("quadrant {quadrant} has {available} samples, {requested} requested")]
    InsufficientSamples { quadrant: Quadrant, available: usize, requested: usize },
    #[error("malformed input at line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("unknown quadrant label `{0}`")]
    UnknownQuadrant(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A quadrant of the valence/arousal plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Quadrant {
    /// high valence, high arousal
    Q1,
    /// low valence, high arousal
    Q2,
    /// low valence, low arousal
    Q3,
    /// high valence, low arousal
    Q4,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [Quadrant::Q1, Quadrant::Q2, Quadrant::Q3, Quadrant::Q4];

    pub fn from_signs(high_valence: bool, high_arousal: bool) -> Self {
        match (high_valence, high_arousal) {
            (true, true) => Quadrant::Q1,
            (false, true) => Quadrant::Q2,
            (false, false) => Quadrant::Q3,
            (true, false) => Quadrant::Q4,
        }
    }

    pub fn high_valence(self) -> bool {
        matches!(self, Quadrant::Q1 | Quadrant::Q4)
    }

    pub fn high_arousal(self) -> bool {
        matches!(self, Quadrant::Q1 | Quadrant::Q2)
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// The diagonally opposite quadrant (Q1↔Q3, Q2↔Q4).
    pub fn opposite(self) -> Self {
        Self::from_signs(!self.high_valence(), !self.high_arousal())
    }

    pub fn name(self) -> &'static str {
        ["Q1", "Q2", "Q3", "Q4"][self.index()]
    }
}

impl fmt::Display for Quadrant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Quadrant {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim().to_ascii_lowercase();
        let digit = t.strip_prefix("quadrant_").or_else(|| t.strip_prefix('q')).unwrap_or(&t);
        match digit {
            "1" => Ok(Quadrant::Q1),
            "2" => Ok(Quadrant::Q2),
            "3" => Ok(Quadrant::Q3),
            "4" => Ok(Quadrant::Q4),
            _ => Err(DatasetError::UnknownQuadrant(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VadEntry {
    pub term: String,
    pub valence: f64,
    pub arousal: f64,
    pub dominance: f64,
}

#[derive(Debug, Clone, Default)]
pub struct Lexicon {
    pub entries: HashMap<String, VadEntry>,
}

impl Lexicon {
    pub fn get(&self, term: &str) -> Option<&VadEntry> {
        self.entries.get(&term.to_lowercase())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct LexiconLoad {
    pub lexicon: Lexicon,
    pub malformed: usize,
    pub duplicates: usize,
}

/// Reads `term<TAB>valence<TAB>arousal<TAB>dominance` rows. Header lines and
/// rows with missing or out-of-range scores are counted as malformed and
/// skipped; a repeated term keeps its last row.
pub fn load_vad_lexicon<R: BufRead>(reader: R) -> Result<LexiconLoad, DatasetError> {
    let mut entries = HashMap::new();
    let mut malformed = 0;
    let mut duplicates = 0;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let parsed = (fields.len() == 4)
            .then(|| {
                let nums: Option<Vec<f64>> = fields[1..].iter().map(|f| f.trim().parse().ok()).collect();
                nums.filter(|n| n.iter().all(|x| (0.0..=1.0).contains(x)))
            })
            .flatten();
        match parsed {
            Some(n) if !fields[0].trim().is_empty() => {
                let term = fields[0].trim().to_lowercase();
                let entry = VadEntry { term: term.clone(), valence: n[0], arousal: n[1], dominance: n[2] };
                if entries.insert(term, entry).is_some() {
                    duplicates += 1;
                }
            }
            _ => malformed += 1,
        }
    }
    if entries.is_empty() {
        return Err(DatasetError::EmptyLexicon);
    }
    if malformed > 0 {
        log::info!("lexicon: skipped {malformed} malformed row(s)");
    }
    Ok(LexiconLoad { lexicon: Lexicon { entries }, malformed, duplicates })
}

/// Cut points on each axis; a score equal to the cut counts as "high".
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadrantThresholds {
    pub valence: f64,
    pub arousal: f64,
}

impl Default for QuadrantThresholds {
    fn default() -> Self {
        Self { valence: 0.5, arousal: 0.5 }
    }
}

impl QuadrantThresholds {
    pub fn quadrant_of(&self, valence: f64, arousal: f64) -> Result<Quadrant, DatasetError> {
        if !(0.0..=1.0).contains(&valence) || !(0.0..=1.0).contains(&arousal) {
            return Err(DatasetError::OutOfRange { valence, arousal });
        }
        Ok(Quadrant::from_signs(valence >= self.valence, arousal >= self.arousal))
    }
}

/// Quadrant under the midpoint thresholds.
pub fn quadrant_of(valence: f64, arousal: f64) -> Result<Quadrant, DatasetError> {
    QuadrantThresholds::default().quadrant_of(valence, arousal)
}

/// The 27 GoEmotions categories plus `neutral`, in label-id order.
pub const GOEMOTIONS_LABELS: [&str; 28] = [
    "admiration",
    "amusement",
    "anger",
    "annoyance",
    "approval",
    "caring",
    "confusion",
    "curiosity",
    "desire",
    "disappointment",
    "disapproval",
    "disgust",
    "embarrassment",
    "excitement",
    "fear",
    "gratitude",
    "grief",
    "joy",
    "love",
    "nervousness",
    "optimism",
    "pride",
    "realization",
    "relief",
    "remorse",
    "sadness",
    "surprise",
    "neutral",
];

pub const NEUTRAL_LABEL: usize = 27;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CategoryMapping {
    pub quadrants: BTreeMap<String, Quadrant>,
    /// (category, valence, arousal) for every mapped category.
    pub coordinates: Vec<(String, f64, f64)>,
    /// Categories with no lexicon entry.
    pub missing: Vec<String>,
}

impl CategoryMapping {
    pub fn distribution(&self) -> BTreeMap<Quadrant, Vec<String>> {
        let mut out: BTreeMap<Quadrant, Vec<String>> = Quadrant::ALL.iter().map(|&q| (q, Vec::new())).collect();
        for (c, q) in &self.quadrants {
            out.get_mut(q).expect("all quadrants").push(c.clone());
        }
        out
    }

    pub fn report(&self) -> String {
        let mut s = String::new();
        for (q, cats) in self.distribution() {
            s.push_str(&format!("{q}\t{}\t{}\n", cats.len(), cats.join(",")));
        }
        if !self.missing.is_empty() {
            s.push_str(&format!("missing\t{}\t{}\n", self.missing.len(), self.missing.join(",")));
        }
        s
    }
}

/// Places each category in a quadrant via its lexicon entry. Categories the
/// lexicon lacks are listed in `missing` rather than dropped silently.
pub fn map_categories<S: AsRef<str>>(
    categories: &[S],
    lexicon: &Lexicon,
    thresholds: &QuadrantThresholds,
) -> Result<CategoryMapping, DatasetError> {
    let mut out = CategoryMapping::default();
    for c in categories {
        let c = c.as_ref();
        match lexicon.get(c) {
            Some(e) => {
                out.quadrants.insert(c.to_string(), thresholds.quadrant_of(e.valence, e.arousal)?);
                out.coordinates.push((c.to_string(), e.valence, e.arousal));
            }
            None => out.missing.push(c.to_string()),
        }
    }
    if !out.missing.is_empty() {
        log::warn!("categories missing from lexicon: {}", out.missing.join(", "));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextSample {
    pub id: String,
    pub body: String,
    pub category: String,
    pub quadrant: Quadrant,
}

#[derive(Debug, Clone, Default)]
pub struct TextLoad {
    pub samples: Vec<TextSample>,
    pub neutral: usize,
    pub unmapped: usize,
    pub malformed: usize,
}

/// Reads GoEmotions-style rows `text<TAB>label ids<TAB>id`. The first label
/// decides the category; neutral-only rows are excluded.
pub fn read_goemotions<R: BufRead>(reader: R, mapping: &CategoryMapping) -> Result<TextLoad, DatasetError> {
    let mut out = TextLoad::default();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 3 {
            out.malformed += 1;
            continue;
        }
        let labels: Option<Vec<usize>> = fields[1].split(',').map(|l| l.trim().parse().ok()).collect();
        let Some(labels) = labels.filter(|l| !l.is_empty() && l.iter().all(|&x| x < GOEMOTIONS_LABELS.len()))
        else {
            out.malformed += 1;
            continue;
        };
        let Some(&first) = labels.iter().find(|&&l| l != NEUTRAL_LABEL) else {
            out.neutral += 1;
            continue;
        };
        let category = GOEMOTIONS_LABELS[first];
        match mapping.quadrants.get(category) {
            Some(&quadrant) => out.samples.push(TextSample {
                id: fields[2].trim().to_string(),
                body: fields[0].to_string(),
                category: category.to_string(),
                quadrant,
            }),
            None => out.unmapped += 1,
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub path: String,
    pub quadrant: Quadrant,
}

/// Reads `path<TAB>quadrant` rows. A bare path is accepted when its file name
/// starts with the quadrant (`Q3_...mid`).
pub fn read_clip_manifest<R: BufRead>(reader: R) -> Result<Vec<ClipRecord>, DatasetError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let malformed = |m: &str| DatasetError::Malformed { line: i + 1, message: m.to_string() };
        let (path, quadrant) = match line.split_once('\t') {
            Some((p, q)) => (p.to_string(), q.parse()?),
            None => {
                let name = std::path::Path::new(line)
                    .file_name()
                    .and_then(|n| n.to_str())
                    .ok_or_else(|| malformed("no file name"))?;
                let q = name.get(..2).ok_or_else(|| malformed("no quadrant"))?;
                (line.to_string(), q.parse().map_err(|_| malformed("no quadrant column or Q prefix"))?)
            }
        };
        out.push(ClipRecord { path, quadrant });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairedExample {
    pub text: TextSample,
    pub midi_path: String,
    pub quadrant: Quadrant,
}

/// Pairs each text with a uniformly drawn clip of the same quadrant.
pub fn pair_examples(texts: &[TextSample], clips: &[ClipRecord], seed: u64) -> Result<Vec<PairedExample>, DatasetError> {
    let mut by_quadrant: BTreeMap<Quadrant, Vec<&ClipRecord>> = BTreeMap::new();
    for c in clips {
        by_quadrant.entry(c.quadrant).or_default().push(c);
    }
    let mut rng = substream(seed, "pair_examples");
    texts
        .iter()
        .map(|t| {
            let pool = by_quadrant.get(&t.quadrant).ok_or(DatasetError::EmptyQuadrant(t.quadrant))?;
            let clip = pool[rng.random_range(0..pool.len())];
            Ok(PairedExample { text: t.clone(), midi_path: clip.path.clone(), quadrant: t.quadrant })
        })
        .collect()
}

/// Draws exactly `per_quadrant` texts from every quadrant without
/// replacement. Selected texts keep their input order.
pub fn balanced_subset(texts: &[TextSample], per_quadrant: usize, seed: u64) -> Result<Vec<TextSample>, DatasetError> {
    let mut rng = substream(seed, "balanced_subset");
    let mut keep = vec![false; texts.len()];
    for q in Quadrant::ALL {
        let idx: Vec<usize> = texts.iter().enumerate().filter(|(_, t)| t.quadrant == q).map(|(i, _)| i).collect();
        if idx.len() < per_quadrant {
            return Err(DatasetError::InsufficientSamples { quadrant: q, available: idx.len(), requested: per_quadrant });
        }
        for j in sample(&mut rng, idx.len(), per_quadrant) {
            keep[idx[j]] = true;
        }
    }
    Ok(texts.iter().zip(keep).filter(|(_, k)| *k).map(|(t, _)| t.clone()).collect())
}

pub fn quadrant_counts<I: IntoIterator<Item = Quadrant>>(labels: I) -> BTreeMap<Quadrant, usize> {
    let mut out: BTreeMap<Quadrant, usize> = Quadrant::ALL.iter().map(|&q| (q, 0)).collect();
    for q in labels {
        *out.get_mut(&q).expect("all quadrants") += 1;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
    /// Texts reserved for contrastive encoder training.
    Contrastive,
}

/// One line of the dataset manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub body: String,
    pub category: String,
    pub quadrant: Quadrant,
    pub midi_path: Option<String>,
    pub split: Split,
}

impl ManifestRecord {
    pub fn text(&self) -> TextSample {
        TextSample { id: self.id.clone(), body: self.body.clone(), category: self.category.clone(), quadrant: self.quadrant }
    }
}

pub fn write_manifest<W: Write>(mut w: W, records: &[ManifestRecord]) -> Result<(), DatasetError> {
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_manifest<R: BufRead>(reader: R) -> Result<Vec<ManifestRecord>, DatasetError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| DatasetError::Malformed { line: i + 1, message: e.to_string() })?,
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildConfig {
    /// Paired texts per quadrant; `None` pairs as many texts as there are clips.
    pub paired_per_quadrant: Option<usize>,
    /// Balanced contrastive subset size per quadrant; `None` uses the
    /// smallest quadrant's remainder.
    pub contrastive_per_quadrant: Option<usize>,
    pub validation_fraction: f64,
    pub test_fraction: f64,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self { paired_per_quadrant: None, contrastive_per_quadrant: None, validation_fraction: 0.1, test_fraction: 0.1 }
    }
}

/// Splits texts into a paired portion (train/validation/test) and a disjoint
/// balanced contrastive portion.
pub fn build_dataset(
    texts: &[TextSample],
    clips: &[ClipRecord],
    cfg: &BuildConfig,
    seed: u64,
) -> Result<Vec<ManifestRecord>, DatasetError> {
    let clip_counts = quadrant_counts(clips.iter().map(|c| c.quadrant));
    let mut rng = substream(seed, "build_dataset");
    let mut reserved = Vec::new();
    let mut rest = Vec::new();
    for q in Quadrant::ALL {
        let pool: Vec<&TextSample> = texts.iter().filter(|t| t.quadrant == q).collect();
        let want = cfg.paired_per_quadrant.unwrap_or(clip_counts[&q]);
        if pool.len() < want {
            return Err(DatasetError::InsufficientSamples { quadrant: q, available: pool.len(), requested: want });
        }
        let mut chosen = vec![false; pool.len()];
        for j in sample(&mut rng, pool.len(), want) {
            chosen[j] = true;
        }
        for (t, c) in pool.into_iter().zip(chosen) {
            if c {
                reserved.push(t.clone());
            } else {
                rest.push(t.clone());
            }
        }
    }
    let paired = pair_examples(&reserved, clips, seed)?;

    let contrastive_n = match cfg.contrastive_per_quadrant {
        Some(n) => n,
        None => *quadrant_counts(rest.iter().map(|t| t.quadrant)).values().min().unwrap_or(&0),
    };
    let contrastive = balanced_subset(&rest, contrastive_n, seed)?;

    let mut records = Vec::with_capacity(paired.len() + contrastive.len());
    // stratified by quadrant so every quadrant reaches the test split
    let mut split_of = vec![Split::Train; paired.len()];
    for q in Quadrant::ALL {
        let idx: Vec<usize> = (0..paired.len()).filter(|&i| paired[i].quadrant == q).collect();
        let n = idx.len();
        let n_test = (n as f64 * cfg.test_fraction).round() as usize;
        let n_val = (n as f64 * cfg.validation_fraction).round() as usize;
        for (rank, j) in sample(&mut rng, n, n).into_iter().enumerate() {
            split_of[idx[j]] = if rank < n_test {
                Split::Test
            } else if rank < n_test + n_val {
                Split::Validation
            } else {
                Split::Train
            };
        }
    }
    for (p, split) in paired.into_iter().zip(split_of) {
        records.push(ManifestRecord {
            id: p.text.id,
            body: p.text.body,
            category: p.text.category,
            quadrant: p.quadrant,
            midi_path: Some(p.midi_path),
            split,
        });
    }
    for t in contrastive {
        records.push(ManifestRecord {
            id: t.id,
            body: t.body,
            category: t.category,
            quadrant: t.quadrant,
            midi_path: None,
            split: Split::Contrastive,
        });
    }
    Ok(records)
}
