//! Listening-study trials, the durable response log and accuracy scoring.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::emotion::{Quadrant, TextSample};
use crate::generate::ManifestEntry;
use crate::rng::derive_seed;

#[derive(Debug, Error)]
pub enum StudyError {
    #[error("no clip generated for quadrant {0}")]
    InsufficientClips(Quadrant),
    #[error("unknown trial `{0}`")]
    UnknownTrial(String),
    #[error("participant `{participant}` already answered trial `{trial}`")]
    Duplicate { participant: String, trial: String },
    #[error("no responses to score")]
    EmptyResponses,
    #[error("malformed record at line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ClipChoice {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipRef {
    /// Path relative to the clip directory.
    pub file: String,
    pub quadrant: Quadrant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trial {
    pub trial_id: String,
    pub text_id: String,
    pub text_body: String,
    pub text_quadrant: Quadrant,
    pub clip_a: ClipRef,
    pub clip_b: ClipRef,
    pub assignment_seed: u64,
}

impl Trial {
    pub fn clip(&self, c: ClipChoice) -> &ClipRef {
        match c {
            ClipChoice::A => &self.clip_a,
            ClipChoice::B => &self.clip_b,
        }
    }

    /// Which side holds the clip generated from this trial's text.
    pub fn target(&self) -> ClipChoice {
        if self.clip_a.quadrant == self.text_quadrant { ClipChoice::A } else { ClipChoice::B }
    }

    pub fn view(&self) -> TrialView {
        TrialView {
            trial_id: self.trial_id.clone(),
            text: self.text_body.clone(),
            clip_a_url: format!("/clips/{}", clip_name(&self.trial_id, ClipChoice::A)),
            clip_b_url: format!("/clips/{}", clip_name(&self.trial_id, ClipChoice::B)),
        }
    }
}

/// Opaque public name of a trial's clip. Real file paths encode the
/// generation quadrant, so they never reach the participant.
pub fn clip_name(trial_id: &str, choice: ClipChoice) -> String {
    let side = match choice {
        ClipChoice::A => "a",
        ClipChoice::B => "b",
    };
    format!("{trial_id}-{side}.mid")
}

fn parse_clip_name(name: &str) -> Option<(&str, ClipChoice)> {
    let stem = name.strip_suffix(".mid")?;
    let (trial, side) = stem.rsplit_once('-')?;
    let choice = match side {
        "a" => ClipChoice::A,
        "b" => ClipChoice::B,
        _ => return None,
    };
    Some((trial, choice))
}

/// What a participant sees: no quadrant information of any kind.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialView {
    pub trial_id: String,
    pub text: String,
    pub clip_a_url: String,
    pub clip_b_url: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudyResponse {
    pub trial_id: String,
    pub participant_id: String,
    pub perceived_quadrant: Quadrant,
    pub chosen_clip: ClipChoice,
    /// Seconds since the Unix epoch; filled by the server when absent.
    #[serde(default)]
    pub timestamp: Option<u64>,
}

/// One trial per generated clip whose text is in `texts`. The distractor is
/// drawn from clips generated for the diagonally opposite quadrant, and the
/// A/B order is a fair coin from the trial's own seed.
pub fn build_trials(texts: &[TextSample], manifest: &[ManifestEntry], seed: u64) -> Result<Vec<Trial>, StudyError> {
    let by_id: HashMap<&str, &TextSample> = texts.iter().map(|t| (t.id.as_str(), t)).collect();
    let mut pools: BTreeMap<Quadrant, Vec<&ManifestEntry>> = BTreeMap::new();
    for e in manifest {
        pools.entry(e.quadrant).or_default().push(e);
    }
    let mut trials = Vec::new();
    for e in manifest {
        let Some(text) = by_id.get(e.text_id.as_str()) else { continue };
        let idx = trials.len();
        let assignment_seed = derive_seed(seed, "trial", idx as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(assignment_seed);
        let opposite = e.quadrant.opposite();
        let pool = pools.get(&opposite).filter(|p| !p.is_empty()).ok_or(StudyError::InsufficientClips(opposite))?;
        let distractor = pool.choose(&mut rng).expect("non-empty pool");
        let own = ClipRef { file: e.path.clone(), quadrant: e.quadrant };
        let other = ClipRef { file: distractor.path.clone(), quadrant: distractor.quadrant };
        let (clip_a, clip_b) = if rng.random::<bool>() { (own, other) } else { (other, own) };
        trials.push(Trial {
            trial_id: format!("t{idx:04}"),
            text_id: text.id.clone(),
            text_body: text.body.clone(),
            text_quadrant: text.quadrant,
            clip_a,
            clip_b,
            assignment_seed,
        });
    }
    Ok(trials)
}

pub fn write_trials<W: Write>(mut w: W, trials: &[Trial]) -> Result<(), StudyError> {
    for t in trials {
        serde_json::to_writer(&mut w, t).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

fn read_jsonl<T: serde::de::DeserializeOwned, R: BufRead>(reader: R) -> Result<Vec<T>, StudyError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| StudyError::Malformed { line: i + 1, message: e.to_string() })?);
    }
    Ok(out)
}

pub fn read_trials<R: BufRead>(reader: R) -> Result<Vec<Trial>, StudyError> {
    read_jsonl(reader)
}

pub fn read_responses<R: BufRead>(reader: R) -> Result<Vec<StudyResponse>, StudyError> {
    read_jsonl(reader)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracies {
    pub valence: f64,
    pub arousal: f64,
    pub joint: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub valence_accuracy: f64,
    pub arousal_accuracy: f64,
    pub joint_accuracy: f64,
    pub n_responses: usize,
    pub chance_levels: (f64, f64, f64),
    /// The same measures against the text's dataset quadrant instead of the
    /// participant's perception.
    pub ground_truth: Accuracies,
}

pub const CHANCE_LEVELS: (f64, f64, f64) = (0.5, 0.5, 0.25);

/// Valence, arousal and joint agreement between the perceived quadrant and
/// the generation quadrant of the chosen clip.
pub fn score_responses(responses: &[StudyResponse], trials: &[Trial]) -> Result<StudyReport, StudyError> {
    if responses.is_empty() {
        return Err(StudyError::EmptyResponses);
    }
    let by_id: HashMap<&str, &Trial> = trials.iter().map(|t| (t.trial_id.as_str(), t)).collect();
    let mut perceived = [0usize; 3];
    let mut truth = [0usize; 3];
    let tally = |acc: &mut [usize; 3], a: Quadrant, b: Quadrant| {
        let v = a.high_valence() == b.high_valence();
        let ar = a.high_arousal() == b.high_arousal();
        acc[0] += usize::from(v);
        acc[1] += usize::from(ar);
        acc[2] += usize::from(v && ar);
    };
    for r in responses {
        let t = by_id.get(r.trial_id.as_str()).ok_or_else(|| StudyError::UnknownTrial(r.trial_id.clone()))?;
        let chosen = t.clip(r.chosen_clip).quadrant;
        tally(&mut perceived, r.perceived_quadrant, chosen);
        tally(&mut truth, t.text_quadrant, chosen);
    }
    let n = responses.len() as f64;
    Ok(StudyReport {
        valence_accuracy: perceived[0] as f64 / n,
        arousal_accuracy: perceived[1] as f64 / n,
        joint_accuracy: perceived[2] as f64 / n,
        n_responses: responses.len(),
        chance_levels: CHANCE_LEVELS,
        ground_truth: Accuracies { valence: truth[0] as f64 / n, arousal: truth[1] as f64 / n, joint: truth[2] as f64 / n },
    })
}

/// Live study: trial set, accepted responses and the append-only log.
#[derive(Debug)]
pub struct StudyState {
    trials: Vec<Trial>,
    index: HashMap<String, usize>,
    responses: Vec<StudyResponse>,
    answered: HashSet<(String, String)>,
    log: Option<(PathBuf, File)>,
}

impl StudyState {
    pub fn in_memory(trials: Vec<Trial>) -> Self {
        let index = trials.iter().enumerate().map(|(i, t)| (t.trial_id.clone(), i)).collect();
        Self { trials, index, responses: Vec::new(), answered: HashSet::new(), log: None }
    }

    /// Opens (creating if needed) the response log and replays it. A torn
    /// final line from an interrupted write is ignored.
    pub fn open(trials: Vec<Trial>, log_path: &Path) -> Result<Self, StudyError> {
        let mut st = Self::in_memory(trials);
        if log_path.exists() {
            let reader = BufReader::new(File::open(log_path)?);
            let lines: Vec<String> = reader.lines().collect::<Result<_, _>>()?;
            let last = lines.len();
            for (i, line) in lines.iter().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<StudyResponse>(line) {
                    Ok(r) => st.accept(r)?,
                    Err(e) if i + 1 == last => log::warn!("ignoring torn final log line: {e}"),
                    Err(e) => return Err(StudyError::Malformed { line: i + 1, message: e.to_string() }),
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(log_path)?;
        st.log = Some((log_path.to_path_buf(), file));
        Ok(st)
    }

    pub fn trials(&self) -> &[Trial] {
        &self.trials
    }

    pub fn responses(&self) -> &[StudyResponse] {
        &self.responses
    }

    pub fn log_path(&self) -> Option<&Path> {
        self.log.as_ref().map(|(p, _)| p.as_path())
    }

    /// Maps a public clip name back to the file path relative to the clip
    /// directory.
    pub fn resolve_clip(&self, name: &str) -> Option<&str> {
        let (trial, choice) = parse_clip_name(name)?;
        let t = &self.trials[*self.index.get(trial)?];
        Some(t.clip(choice).file.as_str())
    }

    /// The first trial this participant has not answered.
    pub fn next_trial(&self, participant: &str) -> Option<TrialView> {
        self.trials
            .iter()
            .find(|t| !self.answered.contains(&(participant.to_string(), t.trial_id.clone())))
            .map(Trial::view)
    }

    fn check(&self, r: &StudyResponse) -> Result<(), StudyError> {
        if !self.index.contains_key(&r.trial_id) {
            return Err(StudyError::UnknownTrial(r.trial_id.clone()));
        }
        if self.answered.contains(&(r.participant_id.clone(), r.trial_id.clone())) {
            return Err(StudyError::Duplicate { participant: r.participant_id.clone(), trial: r.trial_id.clone() });
        }
        Ok(())
    }

    fn accept(&mut self, r: StudyResponse) -> Result<(), StudyError> {
        self.check(&r)?;
        self.answered.insert((r.participant_id.clone(), r.trial_id.clone()));
        self.responses.push(r);
        Ok(())
    }

    /// Validates, appends to the log and syncs it, then records the
    /// response in memory.
    pub fn submit(&mut self, mut r: StudyResponse) -> Result<(), StudyError> {
        self.check(&r)?;
        if r.timestamp.is_none() {
            r.timestamp = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).ok().map(|d| d.as_secs());
        }
        if let Some((_, file)) = &mut self.log {
            let mut line = serde_json::to_vec(&r).map_err(std::io::Error::from)?;
            line.push(b'\n');
            file.write_all(&line)?;
            file.sync_data()?;
        }
        self.accept(r)
    }

    pub fn report(&self) -> Result<StudyReport, StudyError> {
        score_responses(&self.responses, &self.trials)
    }
}
