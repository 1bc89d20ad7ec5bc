//! Synthetic fixture data: a small VAD lexicon over the GoEmotions
//! categories, texts whose quadrant is carried by marker words, and MIDI
//! clips with quadrant-typical mode, note length and loudness.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::emotion::{Quadrant, GOEMOTIONS_LABELS};
use crate::metrics::{detect_key, Mode};
use crate::midi::{write_midi, NoteEvent, Score};
use crate::rng::substream;

/// (category, valence, arousal, dominance). Every GoEmotions category is
/// present, so mapping against this lexicon reports nothing missing.
pub const LEXICON_ROWS: [(&str, f64, f64, f64); 28] = [
    ("admiration", 0.86, 0.58, 0.68),
    ("amusement", 0.88, 0.66, 0.60),
    ("anger", 0.17, 0.87, 0.71),
    ("annoyance", 0.23, 0.70, 0.47),
    ("approval", 0.80, 0.38, 0.64),
    ("caring", 0.84, 0.35, 0.57),
    ("confusion", 0.26, 0.55, 0.26),
    ("curiosity", 0.72, 0.60, 0.55),
    ("desire", 0.78, 0.72, 0.60),
    ("disappointment", 0.13, 0.40, 0.27),
    ("disapproval", 0.20, 0.44, 0.48),
    ("disgust", 0.05, 0.67, 0.38),
    ("embarrassment", 0.20, 0.60, 0.20),
    ("excitement", 0.90, 0.93, 0.72),
    ("fear", 0.07, 0.84, 0.29),
    ("gratitude", 0.89, 0.44, 0.57),
    ("grief", 0.04, 0.42, 0.22),
    ("joy", 0.98, 0.74, 0.77),
    ("love", 1.00, 0.52, 0.67),
    ("nervousness", 0.27, 0.79, 0.26),
    ("optimism", 0.92, 0.57, 0.72),
    ("pride", 0.85, 0.61, 0.87),
    ("realization", 0.63, 0.47, 0.65),
    ("relief", 0.80, 0.22, 0.52),
    ("remorse", 0.10, 0.41, 0.25),
    ("sadness", 0.05, 0.29, 0.16),
    ("surprise", 0.78, 0.86, 0.53),
    ("neutral", 0.50, 0.20, 0.50),
];

pub fn lexicon_tsv() -> String {
    let mut s = String::new();
    for (t, v, a, d) in LEXICON_ROWS {
        writeln!(s, "{t}\t{v}\t{a}\t{d}").expect("write to string");
    }
    s
}

/// Category ids (GoEmotions order) whose synthetic coordinates fall in `q`
/// under the midpoint thresholds. Neutral is excluded.
pub fn categories_of(q: Quadrant) -> Vec<usize> {
    LEXICON_ROWS
        .iter()
        .enumerate()
        .filter(|(i, (_, v, a, _))| {
            GOEMOTIONS_LABELS[*i] != "neutral" && Quadrant::from_signs(*v >= 0.5, *a >= 0.5) == q
        })
        .map(|(i, _)| i)
        .collect()
}

pub fn marker_words(q: Quadrant) -> &'static [&'static str] {
    match q {
        Quadrant::Q1 => &["sunshine", "dancing", "festival", "laughter", "victory", "sparkling", "cheering", "jubilant"],
        Quadrant::Q2 => &["thunder", "screaming", "furious", "panic", "explosion", "chased", "trembling", "rage"],
        Quadrant::Q3 => &["funeral", "lonely", "rain", "grave", "mourning", "empty", "tears", "abandoned"],
        Quadrant::Q4 => &["meadow", "gentle", "breeze", "cozy", "calm", "blanket", "serene", "drifting"],
    }
}

const FILLER: [&str; 24] = [
    "the", "a", "we", "she", "he", "they", "walked", "into", "morning", "town", "house", "through", "after", "old",
    "friend", "road", "letter", "window", "then", "with", "night", "river", "small", "again",
];

/// One GoEmotions-format row: `text<TAB>label id<TAB>id`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthText {
    pub id: String,
    pub body: String,
    pub label: usize,
    pub quadrant: Quadrant,
}

/// `per_quadrant` texts for each quadrant. Each body mixes three marker
/// words of its quadrant with shared filler, so a bag-of-words model can
/// separate the quadrants while no single position gives them away.
pub fn texts(per_quadrant: usize, seed: u64) -> Vec<SynthText> {
    let mut rng = substream(seed, "synth_texts");
    let mut out = Vec::with_capacity(4 * per_quadrant);
    for i in 0..per_quadrant {
        for q in Quadrant::ALL {
            let cats = categories_of(q);
            let label = *cats.choose(&mut rng).expect("every quadrant has a category");
            let mut words: Vec<&str> = FILLER.choose_multiple(&mut rng, 5).copied().collect();
            for m in marker_words(q).choose_multiple(&mut rng, 3) {
                let at = rng.random_range(0..=words.len());
                words.insert(at, m);
            }
            out.push(SynthText { id: format!("s{}_{i:04}", q.index() + 1), body: words.join(" "), label, quadrant: q });
        }
    }
    out
}

pub fn texts_tsv(texts: &[SynthText]) -> String {
    let mut s = String::new();
    for t in texts {
        writeln!(s, "{}\t{}\t{}", t.body, t.label, t.id).expect("write to string");
    }
    s
}

const MAJOR_STEPS: [u8; 7] = [0, 2, 4, 5, 7, 9, 11];
const MINOR_STEPS: [u8; 7] = [0, 2, 3, 5, 7, 8, 11];

/// (scale degree, weight) for melody notes: tonic first, then the rest of
/// the triad. The sixth degree is left out because it is the relative key's
/// tonic.
const DEGREE_WEIGHTS: [(usize, u32); 6] = [(0, 5), (1, 1), (2, 2), (3, 1), (4, 2), (6, 1)];

pub const TICKS_PER_QUARTER: u16 = 480;

/// A clip of `bars` 4/4 bars in a random key. High-valence quadrants use a
/// major scale and low-valence ones harmonic minor; high arousal gives
/// eighth notes at forte, low arousal half notes at piano. Tonic-triad
/// degrees are favoured and every bar opens on the tonic triad.
///
/// Short random melodies occasionally read as the relative key, so draws
/// are repeated until key detection agrees with the intended mode.
pub fn clip(q: Quadrant, bars: u32, seed: u64) -> Score {
    let mut rng = substream(seed, "synth_clip");
    let mut score = draw_clip(q, bars, &mut rng);
    for _ in 0..64 {
        match detect_key(&score) {
            Ok(k) if (k.mode == Mode::Major) == q.high_valence() => break,
            _ => score = draw_clip(q, bars, &mut rng),
        }
    }
    score
}

fn draw_clip<R: Rng>(q: Quadrant, bars: u32, rng: &mut R) -> Score {
    let tonic: u8 = rng.random_range(0..12);
    let steps = if q.high_valence() { &MAJOR_STEPS } else { &MINOR_STEPS };
    let tpq = u64::from(TICKS_PER_QUARTER);
    let (note_len, velocity) = if q.high_arousal() { (tpq / 2, 96..=112u8) } else { (tpq * 2, 36..=52u8) };
    let bar_len = 4 * tpq;
    let mut notes = Vec::new();
    for b in 0..u64::from(bars) {
        let start = b * bar_len;
        for degree in [0, 2, 4] {
            notes.push(NoteEvent {
                pitch: 48 + tonic + steps[degree],
                velocity: rng.random_range(velocity.clone()),
                onset_ticks: start,
                duration_ticks: if q.high_arousal() { tpq } else { bar_len },
            });
        }
        let mut t = start;
        while t < start + bar_len {
            let degree = DEGREE_WEIGHTS.choose_weighted(rng, |d| d.1).expect("positive weights").0;
            let octave = rng.random_range(0..2u8);
            notes.push(NoteEvent {
                pitch: 60 + tonic + steps[degree] + 12 * octave,
                velocity: rng.random_range(velocity.clone()),
                onset_ticks: t,
                duration_ticks: note_len,
            });
            t += note_len;
        }
    }
    let tempo = if q.high_arousal() { rng.random_range(400_000..460_000) } else { rng.random_range(560_000..660_000) };
    Score::with_notes(TICKS_PER_QUARTER, notes, tempo)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub clips_per_quadrant: usize,
    pub texts_per_quadrant: usize,
    pub bars: u32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { clips_per_quadrant: 10, texts_per_quadrant: 40, bars: 4 }
    }
}

/// Files written by [`write_corpus`], relative to its directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSummary {
    pub lexicon: String,
    pub texts: String,
    pub clip_manifest: String,
    pub clips: Vec<(String, Quadrant)>,
}

/// Writes `lexicon.tsv`, `texts.tsv`, `clips.tsv` and `midi/Qn_kkk.mid`.
pub fn write_corpus(dir: &Path, cfg: &SynthConfig, seed: u64) -> io::Result<SynthSummary> {
    fs::create_dir_all(dir.join("midi"))?;
    fs::write(dir.join("lexicon.tsv"), lexicon_tsv())?;
    fs::write(dir.join("texts.tsv"), texts_tsv(&texts(cfg.texts_per_quadrant, seed)))?;
    let mut clips = Vec::new();
    let mut manifest = String::new();
    for q in Quadrant::ALL {
        for k in 0..cfg.clips_per_quadrant {
            let rel = format!("midi/{q}_{k:03}.mid");
            let score = clip(q, cfg.bars, crate::rng::derive_seed(seed, q.name(), k as u64));
            let bytes = write_midi(&score).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
            fs::write(dir.join(&rel), bytes)?;
            writeln!(manifest, "{rel}\t{q}").expect("write to string");
            clips.push((rel, q));
        }
    }
    fs::write(dir.join("clips.tsv"), &manifest)?;
    Ok(SynthSummary {
        lexicon: "lexicon.tsv".into(),
        texts: "texts.tsv".into(),
        clip_manifest: "clips.tsv".into(),
        clips,
    })
}
