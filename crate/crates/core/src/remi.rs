//! REMI tokenization: Bar / Position / Pitch / Velocity / Duration events
//! on a fixed 4/4 grid, plus the Pad / Bos / Eos specials.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::midi::{NoteEvent, Score};

/// Beats per bar; every piece is read as 4/4.
pub const BEATS_PER_BAR: u32 = 4;

/// Tempo written into detokenized scores (120 BPM).
pub const DETOKENIZED_MICROS_PER_QUARTER: u32 = 500_000;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RemiError {
    #[error("grammar violation at token {index}: {message}")]
    GrammarViolation { index: usize, message: String },
    #[error("invalid tokenizer config: {0}")]
    InvalidConfig(String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("unknown token `{0}`")]
    UnknownToken(String),
    #[error("malformed vocabulary file at line {line}: {message}")]
    MalformedVocabulary { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TokenKind {
    Pad,
    Bos,
    Eos,
    Bar,
    Position,
    Pitch,
    Velocity,
    Duration,
}

impl TokenKind {
    pub const ALL: [TokenKind; 8] = [
        TokenKind::Pad,
        TokenKind::Bos,
        TokenKind::Eos,
        TokenKind::Bar,
        TokenKind::Position,
        TokenKind::Pitch,
        TokenKind::Velocity,
        TokenKind::Duration,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TokenKind::Pad => "Pad",
            TokenKind::Bos => "Bos",
            TokenKind::Eos => "Eos",
            TokenKind::Bar => "Bar",
            TokenKind::Position => "Position",
            TokenKind::Pitch => "Pitch",
            TokenKind::Velocity => "Velocity",
            TokenKind::Duration => "Duration",
        }
    }

    fn is_special(self) -> bool {
        matches!(self, TokenKind::Pad | TokenKind::Bos | TokenKind::Eos)
    }
}

impl FromStr for TokenKind {
    type Err = RemiError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TokenKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| RemiError::UnknownToken(s.to_string()))
    }
}

/// A typed token. `value` is the position index, the MIDI pitch, the
/// velocity bin or the duration bin; it is 0 for Bar and the specials.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Token {
    pub kind: TokenKind,
    pub value: u32,
}

impl Token {
    pub const PAD: Token = Token { kind: TokenKind::Pad, value: 0 };
    pub const BOS: Token = Token { kind: TokenKind::Bos, value: 0 };
    pub const EOS: Token = Token { kind: TokenKind::Eos, value: 0 };
    pub const BAR: Token = Token { kind: TokenKind::Bar, value: 0 };

    pub fn new(kind: TokenKind, value: u32) -> Self {
        Self { kind, value }
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            TokenKind::Position | TokenKind::Pitch | TokenKind::Velocity | TokenKind::Duration => {
                write!(f, "{}_{}", self.kind.name(), self.value)
            }
            _ => f.write_str(self.kind.name()),
        }
    }
}

impl FromStr for Token {
    type Err = RemiError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let unknown = || RemiError::UnknownToken(s.to_string());
        match s.split_once('_') {
            Some((kind, value)) => {
                let kind: TokenKind = kind.parse().map_err(|_| unknown())?;
                if kind.is_special() || kind == TokenKind::Bar {
                    return Err(unknown());
                }
                Ok(Token::new(kind, value.parse().map_err(|_| unknown())?))
            }
            None => {
                let kind: TokenKind = s.parse()?;
                if !(kind.is_special() || kind == TokenKind::Bar) {
                    return Err(unknown());
                }
                Ok(Token::new(kind, 0))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    pub positions_per_bar: u32,
    pub velocity_bins: u32,
    /// Allowed durations in position units, ascending.
    pub duration_bins: Vec<u32>,
    /// Inclusive MIDI pitch range.
    pub pitch_range: (u8, u8),
    /// Resolution of detokenized scores.
    pub output_ticks_per_quarter: u16,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        let mut duration_bins: Vec<u32> = (1..=32).collect();
        duration_bins.extend((36..=64).step_by(4));
        Self {
            positions_per_bar: 32,
            velocity_bins: 32,
            duration_bins,
            pitch_range: (21, 108),
            output_ticks_per_quarter: 480,
        }
    }
}

impl TokenizerConfig {
    pub fn check(&self) -> Result<(), RemiError> {
        let bad = |m: &str| Err(RemiError::InvalidConfig(m.to_string()));
        if self.positions_per_bar == 0 || self.positions_per_bar % BEATS_PER_BAR != 0 {
            return bad("positions_per_bar must be a positive multiple of 4");
        }
        if (u32::from(self.output_ticks_per_quarter) * BEATS_PER_BAR) % self.positions_per_bar != 0 {
            return bad("positions_per_bar must divide the output tick grid");
        }
        if self.velocity_bins == 0 || self.velocity_bins > 127 {
            return bad("velocity_bins must be in 1..=127");
        }
        if self.duration_bins.is_empty()
            || self.duration_bins[0] == 0
            || self.duration_bins.windows(2).any(|w| w[0] >= w[1])
        {
            return bad("duration_bins must be non-empty, strictly ascending and >= 1");
        }
        if self.pitch_range.0 > self.pitch_range.1 || self.pitch_range.1 > 127 {
            return bad("pitch_range must be an ordered subrange of 0..=127");
        }
        Ok(())
    }

    pub fn units_per_quarter(&self) -> u32 {
        self.positions_per_bar / BEATS_PER_BAR
    }

    pub fn ticks_per_unit(&self) -> u64 {
        u64::from(self.output_ticks_per_quarter) / u64::from(self.units_per_quarter())
    }

    /// Velocity bin of a MIDI velocity (1..=127 split into equal-width bins).
    pub fn velocity_bin(&self, velocity: u8) -> u32 {
        let v = u32::from(velocity.clamp(1, 127)) - 1;
        (v * self.velocity_bins / 127).min(self.velocity_bins - 1)
    }

    /// Representative velocity of a bin: the midpoint of the velocities it holds.
    pub fn velocity_of_bin(&self, bin: u32) -> u8 {
        // smallest v-1 with (v-1)*nb/127 >= bin is ceil(bin*127/nb)
        let nb = self.velocity_bins;
        let lo = (bin * 127).div_ceil(nb);
        let hi = ((bin + 1) * 127).div_ceil(nb) - 1;
        ((lo + hi) / 2 + 1) as u8
    }

    /// Index of the bin nearest to `units` (ties go to the shorter bin).
    pub fn nearest_duration_bin(&self, units: u32) -> u32 {
        let mut best = 0;
        for (i, &b) in self.duration_bins.iter().enumerate() {
            if b.abs_diff(units) < self.duration_bins[best].abs_diff(units) {
                best = i;
            }
        }
        best as u32
    }

    /// Index of the longest bin not exceeding `units` (`units` >= the first bin).
    pub fn floor_duration_bin(&self, units: u32) -> u32 {
        (self.duration_bins.partition_point(|&b| b <= units).max(1) - 1) as u32
    }

    pub fn max_duration_units(&self) -> u32 {
        *self.duration_bins.last().expect("checked non-empty")
    }
}

/// Bijective id ↔ token table. Pad is always id 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<Token>,
    ids: HashMap<Token, u32>,
}

impl Vocabulary {
    pub fn new(config: &TokenizerConfig) -> Self {
        let mut tokens = vec![Token::PAD, Token::BOS, Token::EOS, Token::BAR];
        tokens.extend((0..config.positions_per_bar).map(|v| Token::new(TokenKind::Position, v)));
        tokens.extend(
            (config.pitch_range.0..=config.pitch_range.1).map(|p| Token::new(TokenKind::Pitch, u32::from(p))),
        );
        tokens.extend((0..config.velocity_bins).map(|v| Token::new(TokenKind::Velocity, v)));
        tokens.extend((0..config.duration_bins.len() as u32).map(|v| Token::new(TokenKind::Duration, v)));
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<Token>) -> Self {
        let ids = tokens.iter().enumerate().map(|(i, t)| (*t, i as u32)).collect();
        Self { tokens, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: Token) -> Option<u32> {
        self.ids.get(&token).copied()
    }

    pub fn token(&self, id: u32) -> Option<Token> {
        self.tokens.get(id as usize).copied()
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn kind(&self, id: u32) -> Option<TokenKind> {
        self.token(id).map(|t| t.kind)
    }

    /// Ids belonging to one kind, ascending.
    pub fn ids_of_kind(&self, kind: TokenKind) -> impl Iterator<Item = u32> + '_ {
        self.tokens.iter().enumerate().filter(move |(_, t)| t.kind == kind).map(|(i, _)| i as u32)
    }

    /// One `kind<TAB>value<TAB>id` line per token.
    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(self.tokens.len() * 16);
        for (i, t) in self.tokens.iter().enumerate() {
            s.push_str(&format!("{}\t{}\t{}\n", t.kind.name(), t.value, i));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, RemiError> {
        let mut tokens = Vec::new();
        for (line_no, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = |m: &str| RemiError::MalformedVocabulary { line: line_no + 1, message: m.to_string() };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(bad("expected 3 tab-separated fields"));
            }
            let kind: TokenKind = fields[0].parse().map_err(|_| bad("unknown kind"))?;
            let value: u32 = fields[1].parse().map_err(|_| bad("bad value"))?;
            let id: usize = fields[2].parse().map_err(|_| bad("bad id"))?;
            if id != tokens.len() {
                return Err(bad("ids must be contiguous from 0"));
            }
            tokens.push(Token::new(kind, value));
        }
        if tokens.first() != Some(&Token::PAD) {
            return Err(RemiError::MalformedVocabulary { line: 1, message: "Pad must be id 0".into() });
        }
        Ok(Self::from_tokens(tokens))
    }

    /// SHA-256 of the serialized vocabulary, hex encoded.
    pub fn content_hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Self {
        Self { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Space-separated token names, e.g. `Bos Bar Position_0 Pitch_60 ...`.
    pub fn to_text(&self, vocab: &Vocabulary) -> String {
        let names: Vec<String> = self
            .ids
            .iter()
            .map(|&id| vocab.token(id).map_or_else(|| format!("#{id}"), |t| t.to_string()))
            .collect();
        names.join(" ")
    }

    pub fn from_text(text: &str, vocab: &Vocabulary) -> Result<Self, RemiError> {
        let ids = text
            .split_whitespace()
            .map(|w| {
                let tok: Token = w.parse()?;
                vocab.id(tok).ok_or_else(|| RemiError::UnknownToken(w.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { ids })
    }
}

// ---------------------------------------------------------------- grammar

/// Finite-state acceptor for the REMI grammar.
///
/// `Bos → {Bar, Eos}`, `Bar → {Position, Bar, Eos}`, `Position → Pitch`,
/// `Pitch → Velocity`, `Velocity → Duration`, `Duration → {Position, Bar, Eos}`,
/// with positions non-decreasing inside a bar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GrammarState {
    last: Option<TokenKind>,
    bar_position: Option<u32>,
}

impl Default for GrammarState {
    fn default() -> Self {
        Self::new()
    }
}

impl GrammarState {
    pub fn new() -> Self {
        Self { last: None, bar_position: None }
    }

    pub fn is_done(&self) -> bool {
        self.last == Some(TokenKind::Eos)
    }

    pub fn allows_kind(&self, kind: TokenKind) -> bool {
        use TokenKind::*;
        match self.last {
            None => kind == Bos,
            Some(Bos) => matches!(kind, Bar | Eos),
            Some(Bar) | Some(Duration) => matches!(kind, Position | Bar | Eos),
            Some(Position) => kind == Pitch,
            Some(Pitch) => kind == Velocity,
            Some(Velocity) => kind == Duration,
            Some(Eos) | Some(Pad) => false,
        }
    }

    /// Smallest position value allowed next in the current bar.
    pub fn min_position(&self) -> u32 {
        self.bar_position.unwrap_or(0)
    }

    pub fn allows(&self, token: Token) -> bool {
        self.allows_kind(token.kind) && (token.kind != TokenKind::Position || token.value >= self.min_position())
    }

    /// Consumes a token, returning an error message if it was not allowed.
    /// The state always advances to the token's kind so that checking can
    /// continue after a violation.
    pub fn advance(&mut self, token: Token) -> Result<(), String> {
        let result = if self.is_done() {
            Err(format!("{token} after Eos"))
        } else if !self.allows_kind(token.kind) {
            Err(match self.last {
                None => format!("sequence must start with Bos, found {token}"),
                Some(prev) => format!("{token} cannot follow {}", prev.name()),
            })
        } else if token.kind == TokenKind::Position && token.value < self.min_position() {
            Err(format!("{token} goes backwards within the bar (last position {})", self.min_position()))
        } else {
            Ok(())
        };
        if !self.is_done() {
            match token.kind {
                TokenKind::Bar | TokenKind::Bos => self.bar_position = None,
                TokenKind::Position => self.bar_position = Some(token.value),
                _ => {}
            }
            self.last = Some(token.kind);
        }
        result
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub index: usize,
    pub message: String,
}

// ---------------------------------------------------------------- tokenizer

/// A grid-quantized note, in position units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct GridNote {
    onset: u64,
    pitch: u8,
    duration_bin: u32,
    velocity_bin: u32,
}

#[derive(Debug, Clone)]
pub struct RemiTokenizer {
    config: TokenizerConfig,
    vocab: Vocabulary,
}

impl RemiTokenizer {
    pub fn new(config: TokenizerConfig) -> Result<Self, RemiError> {
        config.check()?;
        let vocab = Vocabulary::new(&config);
        Ok(Self { config, vocab })
    }

    pub fn config(&self) -> &TokenizerConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn id(&self, token: Token) -> u32 {
        self.vocab.id(token).expect("token in vocabulary by construction")
    }

    pub fn bos_id(&self) -> u32 {
        self.id(Token::BOS)
    }

    pub fn eos_id(&self) -> u32 {
        self.id(Token::EOS)
    }

    pub fn pad_id(&self) -> u32 {
        self.id(Token::PAD)
    }

    /// Converts a score to REMI tokens.
    ///
    /// Onsets snap to the nearest grid point, velocities to their bin and
    /// durations to the nearest duration bin; notes longer than the largest
    /// bin are split into consecutive maximal pieces. Out-of-range pitches are
    /// clamped. A note that would still be sounding when the next note of the
    /// same pitch starts is shortened to the longest bin that fits.
    pub fn tokenize(&self, score: &Score) -> TokenSequence {
        let cfg = &self.config;
        let tpq = u128::from(score.ticks_per_quarter.max(1));
        let upq = u128::from(cfg.units_per_quarter());
        let to_units = |ticks: u64| -> u64 { ((u128::from(ticks) * upq * 2 + tpq) / (2 * tpq)) as u64 };
        let max_units = u64::from(cfg.max_duration_units());

        let mut clamped = 0usize;
        let mut grid = Vec::with_capacity(score.notes.len());
        for n in &score.notes {
            let pitch = n.pitch.clamp(cfg.pitch_range.0, cfg.pitch_range.1);
            if pitch != n.pitch {
                clamped += 1;
            }
            let onset = to_units(n.onset_ticks);
            let velocity_bin = cfg.velocity_bin(n.velocity);
            let mut remaining = to_units(n.duration_ticks).max(1);
            let mut piece_onset = onset;
            while remaining > max_units {
                grid.push(GridNote {
                    onset: piece_onset,
                    pitch,
                    duration_bin: cfg.duration_bins.len() as u32 - 1,
                    velocity_bin,
                });
                piece_onset += max_units;
                remaining -= max_units;
            }
            grid.push(GridNote {
                onset: piece_onset,
                pitch,
                duration_bin: cfg.nearest_duration_bin(remaining as u32),
                velocity_bin,
            });
        }
        if clamped > 0 {
            log::warn!("{clamped} pitch(es) outside {:?} clamped", cfg.pitch_range);
        }
        let grid = self.resolve_overlaps(grid);
        self.emit(&grid)
    }

    fn resolve_overlaps(&self, mut grid: Vec<GridNote>) -> Vec<GridNote> {
        grid.sort();
        // same onset and pitch: the last in sort order wins
        let mut dedup: Vec<GridNote> = Vec::with_capacity(grid.len());
        for g in grid {
            match dedup.last_mut() {
                Some(last) if last.onset == g.onset && last.pitch == g.pitch => *last = g,
                _ => dedup.push(g),
            }
        }
        let mut next_onset: HashMap<u8, u64> = HashMap::new();
        for g in dedup.iter_mut().rev() {
            if let Some(&next) = next_onset.get(&g.pitch) {
                let units = self.config.duration_bins[g.duration_bin as usize];
                if g.onset + u64::from(units) > next {
                    let gap = (next - g.onset).min(u64::from(u32::MAX)) as u32;
                    g.duration_bin = self.config.floor_duration_bin(gap);
                }
            }
            next_onset.insert(g.pitch, g.onset);
        }
        dedup
    }

    fn emit(&self, grid: &[GridNote]) -> TokenSequence {
        let ppb = u64::from(self.config.positions_per_bar);
        let mut ids = Vec::with_capacity(grid.len() * 4 + 8);
        ids.push(self.bos_id());
        let mut bar: Option<u64> = None;
        for g in grid {
            let note_bar = g.onset / ppb;
            while bar.map_or(true, |b| b < note_bar) {
                ids.push(self.id(Token::BAR));
                bar = Some(bar.map_or(0, |b| b + 1));
            }
            ids.push(self.id(Token::new(TokenKind::Position, (g.onset % ppb) as u32)));
            ids.push(self.id(Token::new(TokenKind::Pitch, u32::from(g.pitch))));
            ids.push(self.id(Token::new(TokenKind::Velocity, g.velocity_bin)));
            ids.push(self.id(Token::new(TokenKind::Duration, g.duration_bin)));
        }
        ids.push(self.eos_id());
        TokenSequence { ids }
    }

    /// Rebuilds a score on the tokenizer grid at 120 BPM.
    pub fn detokenize(&self, tokens: &TokenSequence) -> Result<Score, RemiError> {
        if let Some(v) = self.validate(tokens).into_iter().next() {
            return Err(RemiError::GrammarViolation { index: v.index, message: v.message });
        }
        let ppb = u64::from(self.config.positions_per_bar);
        let mut grid = Vec::new();
        let mut bar: Option<u64> = None;
        let mut pending: (u64, u8, u32) = (0, 0, 0);
        for &id in &tokens.ids {
            let t = self.vocab.token(id).expect("validated");
            match t.kind {
                TokenKind::Bar => bar = Some(bar.map_or(0, |b| b + 1)),
                TokenKind::Position => pending.0 = bar.unwrap_or(0) * ppb + u64::from(t.value),
                TokenKind::Pitch => pending.1 = t.value as u8,
                TokenKind::Velocity => pending.2 = t.value,
                TokenKind::Duration => grid.push(GridNote {
                    onset: pending.0,
                    pitch: pending.1,
                    duration_bin: t.value,
                    velocity_bin: pending.2,
                }),
                _ => {}
            }
        }
        let grid = self.resolve_overlaps(grid);
        let tpu = self.config.ticks_per_unit();
        let notes = grid
            .iter()
            .map(|g| NoteEvent {
                pitch: g.pitch,
                velocity: self.config.velocity_of_bin(g.velocity_bin),
                onset_ticks: g.onset * tpu,
                duration_ticks: u64::from(self.config.duration_bins[g.duration_bin as usize]) * tpu,
            })
            .collect();
        Ok(Score::with_notes(self.config.output_ticks_per_quarter, notes, DETOKENIZED_MICROS_PER_QUARTER))
    }

    /// All grammar violations of an id sequence; empty iff the sequence is
    /// well formed.
    pub fn validate(&self, tokens: &TokenSequence) -> Vec<Violation> {
        validate(&self.vocab, tokens)
    }
}

/// Checks an id sequence against the REMI grammar.
pub fn validate(vocab: &Vocabulary, tokens: &TokenSequence) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut state = GrammarState::new();
    for (index, &id) in tokens.ids.iter().enumerate() {
        match vocab.token(id) {
            None => out.push(Violation { index, message: format!("id {id} outside vocabulary of {}", vocab.len()) }),
            Some(tok) => {
                if let Err(message) = state.advance(tok) {
                    out.push(Violation { index, message });
                }
            }
        }
    }
    if !state.is_done() {
        out.push(Violation { index: tokens.ids.len(), message: "sequence does not end with Eos".into() });
    }
    out
}

/// Mean over sequences of each kind's relative frequency within the sequence.
/// Empty sequences are ignored.
pub fn token_kind_frequencies(
    vocab: &Vocabulary,
    corpus: &[TokenSequence],
) -> Result<BTreeMap<TokenKind, f64>, RemiError> {
    let mut totals: BTreeMap<TokenKind, f64> = TokenKind::ALL.iter().map(|&k| (k, 0.0)).collect();
    let mut counted = 0usize;
    for seq in corpus.iter().filter(|s| !s.is_empty()) {
        let mut counts: BTreeMap<TokenKind, usize> = BTreeMap::new();
        let mut known = 0usize;
        for &id in &seq.ids {
            if let Some(k) = vocab.kind(id) {
                *counts.entry(k).or_default() += 1;
                known += 1;
            }
        }
        if known == 0 {
            continue;
        }
        for (k, c) in counts {
            *totals.get_mut(&k).expect("all kinds present") += c as f64 / known as f64;
        }
        counted += 1;
    }
    if counted == 0 {
        return Err(RemiError::EmptyCorpus);
    }
    for v in totals.values_mut() {
        *v /= counted as f64;
    }
    Ok(totals)
}

/// L1 distance between two kind-frequency tables.
pub fn frequency_l1(a: &BTreeMap<TokenKind, f64>, b: &BTreeMap<TokenKind, f64>) -> f64 {
    TokenKind::ALL
        .iter()
        .map(|k| (a.get(k).copied().unwrap_or(0.0) - b.get(k).copied().unwrap_or(0.0)).abs())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok() -> RemiTokenizer {
        RemiTokenizer::new(TokenizerConfig::default()).unwrap()
    }

    fn ids(t: &RemiTokenizer, toks: &[Token]) -> TokenSequence {
        TokenSequence::new(toks.iter().map(|&x| t.vocab().id(x).unwrap()).collect())
    }

    #[test]
    fn vocabulary_size_and_bijection() {
        let t = tok();
        let cfg = t.config();
        let expected = 1 + cfg.positions_per_bar as usize + 88 + cfg.velocity_bins as usize + cfg.duration_bins.len() + 3;
        assert_eq!(t.vocab().len(), expected);
        assert_eq!(t.vocab().id(Token::PAD), Some(0));
        for (i, &tk) in t.vocab().tokens().iter().enumerate() {
            assert_eq!(t.vocab().id(tk), Some(i as u32));
            assert_eq!(t.vocab().token(i as u32), Some(tk));
        }
        let back = Vocabulary::from_text(&t.vocab().to_text()).unwrap();
        assert_eq!(&back, t.vocab());
        assert_eq!(back.content_hash(), t.vocab().content_hash());
    }

    #[test]
    fn duration_bins_match_declared_table() {
        let cfg = TokenizerConfig::default();
        assert_eq!(cfg.duration_bins.len(), 40);
        assert_eq!(&cfg.duration_bins[30..], &[31, 32, 36, 40, 44, 48, 52, 56, 60, 64]);
    }

    #[test]
    fn velocity_bins_cover_range_and_are_idempotent() {
        let cfg = TokenizerConfig::default();
        let mut seen = vec![false; cfg.velocity_bins as usize];
        for v in 1..=127u8 {
            let b = cfg.velocity_bin(v);
            seen[b as usize] = true;
            assert_eq!(cfg.velocity_bin(cfg.velocity_of_bin(b)), b);
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn single_note_tokens() {
        let t = tok();
        let s = Score::with_notes(
            480,
            vec![NoteEvent { pitch: 60, velocity: 64, onset_ticks: 0, duration_ticks: 480 }],
            500_000,
        );
        let seq = t.tokenize(&s);
        let b = t.config().velocity_bin(64);
        let d = t.config().duration_bins.iter().position(|&x| x == 8).unwrap() as u32;
        assert_eq!(b, 15);
        assert_eq!(d, 7);
        let expected = ids(
            &t,
            &[
                Token::BOS,
                Token::BAR,
                Token::new(TokenKind::Position, 0),
                Token::new(TokenKind::Pitch, 60),
                Token::new(TokenKind::Velocity, b),
                Token::new(TokenKind::Duration, d),
                Token::EOS,
            ],
        );
        assert_eq!(seq, expected);
        assert_eq!(seq.to_text(t.vocab()), "Bos Bar Position_0 Pitch_60 Velocity_15 Duration_7 Eos");
    }

    #[test]
    fn empty_score_is_bos_eos() {
        let t = tok();
        let seq = t.tokenize(&Score::new(480));
        assert_eq!(seq, ids(&t, &[Token::BOS, Token::EOS]));
        let back = t.detokenize(&seq).unwrap();
        assert!(back.notes.is_empty());
    }

    #[test]
    fn pitch_before_position_is_violation() {
        let t = tok();
        let seq = ids(
            &t,
            &[Token::BOS, Token::BAR, Token::new(TokenKind::Pitch, 60), Token::EOS],
        );
        match t.detokenize(&seq) {
            Err(RemiError::GrammarViolation { index, .. }) => assert_eq!(index, 2),
            other => panic!("expected violation, got {other:?}"),
        }
    }

    #[test]
    fn missing_bar_reports_one_violation() {
        let t = tok();
        let seq = ids(
            &t,
            &[
                Token::BOS,
                Token::new(TokenKind::Position, 0),
                Token::new(TokenKind::Pitch, 60),
                Token::new(TokenKind::Velocity, 3),
                Token::new(TokenKind::Duration, 3),
                Token::EOS,
            ],
        );
        let v = t.validate(&seq);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].index, 1);
    }

    #[test]
    fn backwards_position_and_trailing_tokens() {
        let t = tok();
        let note = |p| {
            [
                Token::new(TokenKind::Position, p),
                Token::new(TokenKind::Pitch, 60),
                Token::new(TokenKind::Velocity, 3),
                Token::new(TokenKind::Duration, 3),
            ]
        };
        let mut toks = vec![Token::BOS, Token::BAR];
        toks.extend(note(8));
        toks.extend(note(4));
        toks.push(Token::EOS);
        toks.push(Token::BAR);
        let v = t.validate(&ids(&t, &toks));
        assert_eq!(v.iter().map(|x| x.index).collect::<Vec<_>>(), vec![6, 11]);
        assert_eq!(t.validate(&TokenSequence::default())[0].index, 0);
    }

    #[test]
    fn long_notes_split_and_overlaps_shortened() {
        let t = tok();
        // 3 bars long at tpq 8 (1 unit = 1 tick): 96 units = 64 + 32
        let s = Score::with_notes(
            8,
            vec![
                NoteEvent { pitch: 60, velocity: 64, onset_ticks: 0, duration_ticks: 96 },
                NoteEvent { pitch: 62, velocity: 64, onset_ticks: 0, duration_ticks: 20 },
            ],
            500_000,
        );
        let out = t.detokenize(&t.tokenize(&s)).unwrap();
        let durs: Vec<_> = out.notes.iter().map(|n| (n.pitch, n.onset_ticks / 60, n.duration_ticks / 60)).collect();
        assert_eq!(durs, vec![(60, 0, 64), (62, 0, 20), (60, 64, 32)]);

        let s = Score::with_notes(
            8,
            vec![
                NoteEvent { pitch: 60, velocity: 64, onset_ticks: 0, duration_ticks: 40 },
                NoteEvent { pitch: 60, velocity: 64, onset_ticks: 40, duration_ticks: 4 },
            ],
            500_000,
        );
        // 40 units snaps to 40 and stays; no overlap
        assert_eq!(t.detokenize(&t.tokenize(&s)).unwrap().notes[0].duration_ticks, 40 * 60);
        let s = Score::with_notes(
            8,
            vec![
                NoteEvent { pitch: 60, velocity: 64, onset_ticks: 0, duration_ticks: 34 },
                NoteEvent { pitch: 60, velocity: 64, onset_ticks: 33, duration_ticks: 4 },
            ],
            500_000,
        );
        // 34 snaps to 32 (tie goes short) which fits before 33
        assert_eq!(t.detokenize(&t.tokenize(&s)).unwrap().notes[0].duration_ticks, 32 * 60);
        let s = Score::with_notes(
            8,
            vec![
                NoteEvent { pitch: 60, velocity: 64, onset_ticks: 0, duration_ticks: 39 },
                NoteEvent { pitch: 60, velocity: 64, onset_ticks: 35, duration_ticks: 4 },
            ],
            500_000,
        );
        // 39 snaps to 40 which overlaps 35: shortened to bin <= 35, i.e. 32
        assert_eq!(t.detokenize(&t.tokenize(&s)).unwrap().notes[0].duration_ticks, 32 * 60);
    }

    #[test]
    fn token_text_round_trip() {
        let t = tok();
        let text = "Bos Bar Position_3 Pitch_61 Velocity_2 Duration_9 Bar Eos";
        let seq = TokenSequence::from_text(text, t.vocab()).unwrap();
        assert_eq!(seq.to_text(t.vocab()), text);
        assert!(TokenSequence::from_text("Bos Pitch_200 Eos", t.vocab()).is_err());
        assert!(TokenSequence::from_text("Bos Bar_1 Eos", t.vocab()).is_err());
    }

    #[test]
    fn kind_frequencies() {
        let t = tok();
        let seq = t.tokenize(&Score::with_notes(
            480,
            vec![NoteEvent { pitch: 60, velocity: 64, onset_ticks: 0, duration_ticks: 480 }],
            500_000,
        ));
        let f = token_kind_frequencies(t.vocab(), std::slice::from_ref(&seq)).unwrap();
        for k in TokenKind::ALL {
            let expect = if k == TokenKind::Pad { 0.0 } else { 1.0 / 7.0 };
            assert!((f[&k] - expect).abs() < 1e-12);
        }
        let f2 = token_kind_frequencies(t.vocab(), &[seq.clone(), seq.clone()]).unwrap();
        assert_eq!(f, f2);

        // hand count: [Bos Bar Eos] has 1/3 each; the note sequence 1/7 each
        let short = ids(&t, &[Token::BOS, Token::BAR, Token::EOS]);
        let f3 = token_kind_frequencies(t.vocab(), &[seq, short]).unwrap();
        assert!((f3[&TokenKind::Bar] - (1.0 / 7.0 + 1.0 / 3.0) / 2.0).abs() < 1e-12);
        assert!((f3[&TokenKind::Pitch] - (1.0 / 7.0) / 2.0).abs() < 1e-12);

        assert_eq!(token_kind_frequencies(t.vocab(), &[]), Err(RemiError::EmptyCorpus));
    }
}
