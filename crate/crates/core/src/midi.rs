//! Standard MIDI File reading and writing.
//!
//! Only the subset needed for solo-piano material is modelled: note on/off
//! pairs and the tempo map. Every track is merged into a single voice and
//! controller, pedal and program events are dropped.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// 120 BPM, the SMF default when a file carries no set-tempo event.
pub const DEFAULT_MICROS_PER_QUARTER: u32 = 500_000;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MidiError {
    #[error("malformed MIDI file: {0}")]
    MalformedFile(String),
    #[error("unsupported MIDI format: {0}")]
    UnsupportedFormat(String),
    #[error("invalid score: {0}")]
    InvalidScore(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NoteEvent {
    pub pitch: u8,
    pub velocity: u8,
    pub onset_ticks: u64,
    pub duration_ticks: u64,
}

impl NoteEvent {
    pub fn end_ticks(&self) -> u64 {
        self.onset_ticks + self.duration_ticks
    }

    fn sort_key(&self) -> (u64, u8, u64, u8) {
        (self.onset_ticks, self.pitch, self.duration_ticks, self.velocity)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TempoEvent {
    pub tick: u64,
    pub micros_per_quarter: u32,
}

/// A tempo-aware note list: the shared musical object of the crate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Score {
    pub ticks_per_quarter: u16,
    pub notes: Vec<NoteEvent>,
    pub tempi: Vec<TempoEvent>,
}

impl Score {
    /// An empty score at the default tempo.
    pub fn new(ticks_per_quarter: u16) -> Self {
        Self {
            ticks_per_quarter,
            notes: Vec::new(),
            tempi: vec![TempoEvent { tick: 0, micros_per_quarter: DEFAULT_MICROS_PER_QUARTER }],
        }
    }

    /// Builds a score from unsorted notes at a single tempo.
    pub fn with_notes(ticks_per_quarter: u16, mut notes: Vec<NoteEvent>, micros_per_quarter: u32) -> Self {
        notes.sort_by_key(NoteEvent::sort_key);
        Self {
            ticks_per_quarter,
            notes,
            tempi: vec![TempoEvent { tick: 0, micros_per_quarter }],
        }
    }

    pub fn sort_notes(&mut self) {
        self.notes.sort_by_key(NoteEvent::sort_key);
    }

    /// Tick at which the last note ends (0 for an empty score).
    pub fn end_ticks(&self) -> u64 {
        self.notes.iter().map(NoteEvent::end_ticks).max().unwrap_or(0)
    }

    pub fn tempo_map(&self) -> TempoMap {
        TempoMap::new(self.ticks_per_quarter, &self.tempi)
    }

    /// Checks the invariants that make `write_midi` lossless: sorted notes,
    /// ranges, a tick-0 tempo, sorted tempi and no overlapping notes of the
    /// same pitch.
    pub fn validate(&self) -> Result<(), MidiError> {
        let bad = |m: String| Err(MidiError::InvalidScore(m));
        if self.ticks_per_quarter == 0 || self.ticks_per_quarter > 0x7fff {
            return bad(format!("ticks_per_quarter {} out of range", self.ticks_per_quarter));
        }
        match self.tempi.first() {
            Some(t) if t.tick == 0 => {}
            _ => return bad("no tempo at tick 0".into()),
        }
        for w in self.tempi.windows(2) {
            if w[1].tick <= w[0].tick {
                return bad("tempo events not strictly increasing".into());
            }
        }
        for t in &self.tempi {
            if t.micros_per_quarter == 0 || t.micros_per_quarter > 0xff_ffff {
                return bad(format!("tempo {} out of range", t.micros_per_quarter));
            }
        }
        let mut last_end: HashMap<u8, u64> = HashMap::new();
        for (i, n) in self.notes.iter().enumerate() {
            if n.pitch > 127 || n.velocity == 0 || n.velocity > 127 || n.duration_ticks == 0 {
                return bad(format!("note {i} out of range: {n:?}"));
            }
            if i > 0 && self.notes[i - 1].sort_key() > n.sort_key() {
                return bad(format!("notes not sorted at index {i}"));
            }
            if let Some(&end) = last_end.get(&n.pitch) {
                if n.onset_ticks < end {
                    return bad(format!("note {i} overlaps an earlier note of pitch {}", n.pitch));
                }
            }
            last_end.insert(n.pitch, n.end_ticks());
        }
        Ok(())
    }
}

/// Piecewise-constant tempo map for tick → seconds conversion.
#[derive(Debug, Clone)]
pub struct TempoMap {
    ticks_per_quarter: f64,
    // (start tick, seconds at start tick, seconds per tick)
    segments: Vec<(u64, f64, f64)>,
}

impl TempoMap {
    pub fn new(ticks_per_quarter: u16, tempi: &[TempoEvent]) -> Self {
        let tpq = f64::from(ticks_per_quarter.max(1));
        let mut segments: Vec<(u64, f64, f64)> = Vec::with_capacity(tempi.len() + 1);
        let sec_per_tick = |mpq: u32| f64::from(mpq) / 1e6 / tpq;
        if tempi.first().map_or(true, |t| t.tick > 0) {
            segments.push((0, 0.0, sec_per_tick(DEFAULT_MICROS_PER_QUARTER)));
        }
        for t in tempi {
            let spt = sec_per_tick(t.micros_per_quarter);
            match segments.last_mut() {
                Some(last) if last.0 == t.tick => last.2 = spt,
                Some(&mut (tick, sec, prev)) => {
                    segments.push((t.tick, sec + (t.tick - tick) as f64 * prev, spt));
                }
                None => segments.push((t.tick, 0.0, spt)),
            }
        }
        Self { ticks_per_quarter: tpq, segments }
    }

    pub fn seconds_at(&self, tick: u64) -> f64 {
        let idx = self.segments.partition_point(|s| s.0 <= tick).saturating_sub(1);
        let (start, sec, spt) = self.segments[idx];
        sec + (tick - start) as f64 * spt
    }

    pub fn ticks_per_quarter(&self) -> f64 {
        self.ticks_per_quarter
    }
}

/// Duration of `note` in seconds, integrated over the score's tempo map.
pub fn note_seconds(score: &Score, note: &NoteEvent) -> f64 {
    let map = score.tempo_map();
    map.seconds_at(note.end_ticks()) - map.seconds_at(note.onset_ticks)
}

// ---------------------------------------------------------------- parsing

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], MidiError> {
        if n > self.remaining() {
            return Err(MidiError::MalformedFile(format!(
                "unexpected end of data at byte {} (wanted {n})",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, MidiError> {
        Ok(self.take(1)?[0])
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn u16(&mut self) -> Result<u16, MidiError> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, MidiError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn vlq(&mut self) -> Result<u32, MidiError> {
        let mut value: u32 = 0;
        for _ in 0..4 {
            let b = self.u8()?;
            value = (value << 7) | u32::from(b & 0x7f);
            if b & 0x80 == 0 {
                return Ok(value);
            }
        }
        Err(MidiError::MalformedFile("variable-length quantity longer than 4 bytes".into()))
    }
}

/// Parses an SMF (format 0 or 1) into a merged, tempo-aware [`Score`].
///
/// A note-on with velocity 0 is a note-off. A repeated note-on for a sounding
/// pitch closes the earlier note at the new onset. Notes still sounding at
/// the end of their track are closed there with a warning. Zero-length notes
/// are dropped.
pub fn parse_midi(bytes: &[u8]) -> Result<Score, MidiError> {
    let mut cur = Cursor::new(bytes);
    if cur.take(4)? != b"MThd" {
        return Err(MidiError::MalformedFile("missing MThd header".into()));
    }
    let header_len = cur.u32()? as usize;
    if header_len < 6 {
        return Err(MidiError::MalformedFile(format!("header length {header_len} < 6")));
    }
    let format = cur.u16()?;
    let ntracks = cur.u16()?;
    let division = cur.u16()?;
    cur.take(header_len - 6)?;
    match format {
        0 | 1 => {}
        2 => return Err(MidiError::UnsupportedFormat("SMF format 2".into())),
        other => return Err(MidiError::MalformedFile(format!("unknown SMF format {other}"))),
    }
    if division & 0x8000 != 0 {
        return Err(MidiError::UnsupportedFormat("SMPTE time division".into()));
    }
    if division == 0 {
        return Err(MidiError::MalformedFile("zero ticks per quarter".into()));
    }

    let mut notes = Vec::new();
    let mut tempi: Vec<TempoEvent> = Vec::new();
    let mut seen_tracks = 0u16;
    while cur.remaining() > 0 && seen_tracks < ntracks {
        let id = cur.take(4)?;
        let len = cur.u32()? as usize;
        let body = cur.take(len)?;
        if id == b"MTrk" {
            parse_track(body, &mut notes, &mut tempi)?;
            seen_tracks += 1;
        }
    }
    if seen_tracks < ntracks {
        log::warn!("header declares {ntracks} tracks but only {seen_tracks} present");
    }

    // Stable sort keeps file order for same-tick tempo events; last one wins.
    tempi.sort_by_key(|t| t.tick);
    let mut merged: Vec<TempoEvent> = Vec::with_capacity(tempi.len() + 1);
    for t in tempi {
        match merged.last_mut() {
            Some(last) if last.tick == t.tick => *last = t,
            _ => merged.push(t),
        }
    }
    if merged.first().map_or(true, |t| t.tick > 0) {
        merged.insert(0, TempoEvent { tick: 0, micros_per_quarter: DEFAULT_MICROS_PER_QUARTER });
    }

    notes.sort_by_key(NoteEvent::sort_key);
    Ok(Score { ticks_per_quarter: division, notes, tempi: merged })
}

fn parse_track(body: &[u8], notes: &mut Vec<NoteEvent>, tempi: &mut Vec<TempoEvent>) -> Result<(), MidiError> {
    let mut cur = Cursor::new(body);
    let mut tick: u64 = 0;
    let mut running: Option<u8> = None;
    // (channel, pitch) -> (onset, velocity)
    let mut sounding: HashMap<(u8, u8), (u64, u8)> = HashMap::new();
    let close = |notes: &mut Vec<NoteEvent>, pitch: u8, onset: u64, velocity: u8, end: u64| {
        if end > onset {
            notes.push(NoteEvent { pitch, velocity, onset_ticks: onset, duration_ticks: end - onset });
        }
    };

    while cur.remaining() > 0 {
        tick += u64::from(cur.vlq()?);
        let first = cur.peek().ok_or_else(|| MidiError::MalformedFile("event without status".into()))?;
        let status = if first & 0x80 != 0 {
            cur.u8()?;
            first
        } else {
            running.ok_or_else(|| MidiError::MalformedFile("data byte without running status".into()))?
        };
        match status {
            0xff => {
                let kind = cur.u8()?;
                let len = cur.vlq()? as usize;
                let data = cur.take(len)?;
                match kind {
                    0x51 if len == 3 => {
                        let mpq = u32::from(data[0]) << 16 | u32::from(data[1]) << 8 | u32::from(data[2]);
                        if mpq == 0 {
                            return Err(MidiError::MalformedFile("zero tempo".into()));
                        }
                        tempi.push(TempoEvent { tick, micros_per_quarter: mpq });
                    }
                    0x2f => break,
                    _ => {}
                }
            }
            0xf0 | 0xf7 => {
                let len = cur.vlq()? as usize;
                cur.take(len)?;
                running = None;
            }
            0x80..=0xef => {
                running = Some(status);
                let channel = status & 0x0f;
                let data_len = match status & 0xf0 {
                    0xc0 | 0xd0 => 1,
                    _ => 2,
                };
                let data = cur.take(data_len)?;
                if data.iter().any(|b| b & 0x80 != 0) {
                    return Err(MidiError::MalformedFile(format!("data byte with high bit set at tick {tick}")));
                }
                match status & 0xf0 {
                    0x90 if data[1] > 0 => {
                        let key = (channel, data[0]);
                        if let Some((onset, vel)) = sounding.remove(&key) {
                            close(notes, data[0], onset, vel, tick);
                        }
                        sounding.insert(key, (tick, data[1]));
                    }
                    0x80 | 0x90 => {
                        if let Some((onset, vel)) = sounding.remove(&(channel, data[0])) {
                            close(notes, data[0], onset, vel, tick);
                        }
                    }
                    _ => {}
                }
            }
            other => {
                return Err(MidiError::MalformedFile(format!("unexpected status byte {other:#04x}")));
            }
        }
    }

    if !sounding.is_empty() {
        log::warn!("{} dangling note-on event(s) truncated at track end (tick {tick})", sounding.len());
        let mut dangling: Vec<_> = sounding.into_iter().collect();
        dangling.sort();
        for ((_, pitch), (onset, vel)) in dangling {
            close(notes, pitch, onset, vel, tick);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- writing

fn push_vlq(out: &mut Vec<u8>, mut value: u32) {
    let mut buf = [0u8; 4];
    let mut n = 0;
    loop {
        buf[n] = (value & 0x7f) as u8;
        n += 1;
        value >>= 7;
        if value == 0 {
            break;
        }
    }
    for i in (0..n).rev() {
        out.push(if i > 0 { buf[i] | 0x80 } else { buf[i] });
    }
}

/// Serializes a score as a format-0 SMF with a single track on channel 0.
///
/// At equal ticks, tempo changes come first, then note-offs, then note-ons,
/// so back-to-back notes of the same pitch survive a round trip.
pub fn write_midi(score: &Score) -> Result<Vec<u8>, MidiError> {
    score.validate()?;
    // (tick, order, bytes)
    let mut events: Vec<(u64, u8, [u8; 6], usize)> = Vec::with_capacity(score.notes.len() * 2 + score.tempi.len());
    for t in &score.tempi {
        let m = t.micros_per_quarter.to_be_bytes();
        events.push((t.tick, 0, [0xff, 0x51, 0x03, m[1], m[2], m[3]], 6));
    }
    for n in &score.notes {
        events.push((n.end_ticks(), 1, [0x80, n.pitch, 0x40, 0, 0, 0], 3));
        events.push((n.onset_ticks, 2, [0x90, n.pitch, n.velocity, 0, 0, 0], 3));
    }
    events.sort_by_key(|e| (e.0, e.1, e.2[1]));

    let mut track = Vec::with_capacity(events.len() * 5 + 4);
    let mut last = 0u64;
    for (tick, _, bytes, len) in &events {
        let delta = u32::try_from(tick - last)
            .map_err(|_| MidiError::InvalidScore(format!("delta time at tick {tick} exceeds 32 bits")))?;
        if delta > 0x0fff_ffff {
            return Err(MidiError::InvalidScore(format!("delta time {delta} exceeds VLQ range")));
        }
        push_vlq(&mut track, delta);
        track.extend_from_slice(&bytes[..*len]);
        last = *tick;
    }
    track.extend_from_slice(&[0x00, 0xff, 0x2f, 0x00]);

    let mut out = Vec::with_capacity(track.len() + 22);
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&0u16.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&score.ticks_per_quarter.to_be_bytes());
    out.extend_from_slice(b"MTrk");
    out.extend_from_slice(&(track.len() as u32).to_be_bytes());
    out.extend_from_slice(&track);
    Ok(out)
}
