//! Objective valence/arousal descriptors of MIDI corpora and the Welch
//! t-tests that compare quadrant groups.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::emotion::Quadrant;
use crate::midi::{note_seconds, Score};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("score has no notes")]
    EmptyScore,
    #[error("no usable files")]
    EmptyCorpus,
    #[error("each group needs at least two values (got {0} and {1})")]
    TooFewValues(usize, usize),
    #[error("both groups have zero variance")]
    DegenerateVariance,
    #[error("quadrant {0} missing from input")]
    MissingQuadrant(Quadrant),
}

/// Krumhansl-Kessler probe-tone ratings, tonic first.
pub const MAJOR_PROFILE: [f64; 12] = [6.35, 2.23, 3.48, 2.33, 4.38, 4.09, 2.52, 5.19, 2.39, 3.66, 2.29, 2.88];
pub const MINOR_PROFILE: [f64; 12] = [6.33, 2.68, 3.52, 5.38, 2.60, 3.53, 2.54, 4.75, 3.98, 2.69, 3.34, 3.17];

pub const PITCH_CLASS_NAMES: [&str; 12] = ["C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Major,
    Minor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeyEstimate {
    pub tonic: u8,
    pub mode: Mode,
    pub correlation: f64,
    /// Only one pitch class sounded, so correlation is undefined.
    pub degenerate: bool,
}

impl std::fmt::Display for KeyEstimate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let m = match self.mode {
            Mode::Major => "major",
            Mode::Minor => "minor",
        };
        write!(f, "{} {m}", PITCH_CLASS_NAMES[self.tonic as usize])
    }
}

/// Duration-weighted (ticks) pitch-class histogram.
pub fn pitch_class_profile(score: &Score) -> [f64; 12] {
    let mut h = [0.0; 12];
    for n in &score.notes {
        h[(n.pitch % 12) as usize] += n.duration_ticks as f64;
    }
    h
}

fn centered(p: &[f64; 12]) -> ([f64; 12], f64) {
    let mean = p.iter().sum::<f64>() / 12.0;
    let mut c = [0.0; 12];
    for i in 0..12 {
        c[i] = p[i] - mean;
    }
    let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt();
    (c, norm)
}

/// Best of the 24 major/minor keys by Pearson correlation between the
/// histogram and the rotated reference profile. Products are accumulated
/// in tonic-relative order, so transposing a score rotates the result
/// exactly. Ties go to major, then the lower tonic.
pub fn detect_key(score: &Score) -> Result<KeyEstimate, MetricsError> {
    let h = pitch_class_profile(score);
    if h.iter().all(|&x| x == 0.0) {
        return Err(MetricsError::EmptyScore);
    }
    let sounding: Vec<usize> = (0..12).filter(|&i| h[i] > 0.0).collect();
    if sounding.len() == 1 {
        return Ok(KeyEstimate { tonic: sounding[0] as u8, mode: Mode::Major, correlation: 0.0, degenerate: true });
    }
    // Summed in sorted order so the norm is identical for every rotation.
    let mut sorted = h;
    sorted.sort_by(f64::total_cmp);
    let mean_h = sorted.iter().sum::<f64>() / 12.0;
    let norm_h = sorted.iter().map(|x| (x - mean_h) * (x - mean_h)).sum::<f64>().sqrt();
    let mut best: Option<(f64, u8, Mode)> = None;
    for (mode, profile) in [(Mode::Major, &MAJOR_PROFILE), (Mode::Minor, &MINOR_PROFILE)] {
        let (pc, norm_p) = centered(profile);
        for tonic in 0..12 {
            // Σ p_c = 0, so the histogram mean drops out of the covariance.
            let mut cov = 0.0;
            for (i, w) in pc.iter().enumerate() {
                cov += h[(tonic + i) % 12] * w;
            }
            let s = cov / norm_p;
            if best.map_or(true, |(b, _, _)| s > b) {
                best = Some((s, tonic as u8, mode));
            }
        }
    }
    let (s, tonic, mode) = best.expect("24 candidates");
    Ok(KeyEstimate { tonic, mode, correlation: (s / norm_h).clamp(-1.0, 1.0), degenerate: false })
}

/// Per-file descriptors; the unit of observation for the t-tests.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FileMetrics {
    pub major: bool,
    pub mean_note_length_s: f64,
    pub mean_velocity: f64,
    pub notes: usize,
    pub duration_s: f64,
}

impl FileMetrics {
    pub fn of(score: &Score) -> Result<Self, MetricsError> {
        if score.notes.is_empty() {
            return Err(MetricsError::EmptyScore);
        }
        let key = detect_key(score)?;
        let n = score.notes.len() as f64;
        let len: f64 = score.notes.iter().map(|x| note_seconds(score, x)).sum();
        let vel: f64 = score.notes.iter().map(|x| f64::from(x.velocity)).sum();
        Ok(Self {
            major: key.mode == Mode::Major,
            mean_note_length_s: len / n,
            mean_velocity: vel / n,
            notes: score.notes.len(),
            duration_s: score.tempo_map().seconds_at(score.end_ticks()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadrantMetrics {
    pub major_key_ratio: f64,
    pub mean_note_length_s: f64,
    pub mean_velocity: f64,
    pub note_density_nps: f64,
    pub n_files: usize,
    /// Files without notes, excluded from every figure.
    #[serde(default)]
    pub skipped_empty: usize,
}

/// Aggregates per-file values for the t-tests alongside the corpus means.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusMetrics {
    pub summary: QuadrantMetrics,
    pub files: Vec<FileMetrics>,
}

pub fn corpus_metrics(files: &[Score]) -> Result<CorpusMetrics, MetricsError> {
    let mut per_file = Vec::new();
    let mut skipped = 0;
    let (mut len_sum, mut vel_sum, mut notes, mut secs) = (0.0, 0.0, 0usize, 0.0);
    for s in files {
        match FileMetrics::of(s) {
            Ok(m) => {
                len_sum += s.notes.iter().map(|x| note_seconds(s, x)).sum::<f64>();
                vel_sum += s.notes.iter().map(|x| f64::from(x.velocity)).sum::<f64>();
                notes += m.notes;
                secs += m.duration_s;
                per_file.push(m);
            }
            Err(MetricsError::EmptyScore) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if per_file.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    let majors = per_file.iter().filter(|m| m.major).count();
    let summary = QuadrantMetrics {
        major_key_ratio: majors as f64 / per_file.len() as f64,
        mean_note_length_s: len_sum / notes as f64,
        mean_velocity: vel_sum / notes as f64,
        note_density_nps: if secs > 0.0 { notes as f64 / secs } else { 0.0 },
        n_files: per_file.len(),
        skipped_empty: skipped,
    };
    Ok(CorpusMetrics { summary, files: per_file })
}

/// Corpus-level means: major-key fraction over files, note length and
/// velocity over all notes, density as notes per second of music.
pub fn quadrant_metrics(files: &[Score]) -> Result<QuadrantMetrics, MetricsError> {
    corpus_metrics(files).map(|c| c.summary)
}

// ------------------------------------------------------------- statistics

/// ln Γ(x) for x > 0 (Lanczos, g = 7, n = 9).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + G + 0.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta (modified Lentz).
fn beta_cf(x: f64, a: f64, b: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-15;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=10_000 {
        let m = f64::from(m);
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta I_x(a, b).
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(x, a, b) / a
    } else {
        1.0 - front * beta_cf(1.0 - x, b, a) / b
    }
}

/// Two-sided p-value of Student's t with `df` degrees of freedom.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    regularized_incomplete_beta(df / (df + t * t), df / 2.0, 0.5).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub t_statistic: f64,
    pub degrees_of_freedom: f64,
    pub p_value: f64,
    pub group_sizes: (usize, usize),
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0))
}

/// Welch's unequal-variance t-test with Welch-Satterthwaite degrees of
/// freedom.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<TTestResult, MetricsError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(MetricsError::TooFewValues(a.len(), b.len()));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    let se2 = sa + sb;
    if se2 <= 0.0 {
        return Err(MetricsError::DegenerateVariance);
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (a.len() as f64 - 1.0) + sb * sb / (b.len() as f64 - 1.0));
    let p = if t == 0.0 { 1.0 } else { student_t_two_sided(t, df) };
    Ok(TTestResult { t_statistic: t, degrees_of_freedom: df, p_value: p, group_sizes: (a.len(), b.len()) })
}

// ----------------------------------------------------------------- report

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupComparison {
    pub metric: String,
    pub groups: (String, String),
    pub group_means: (f64, f64),
    pub test: Option<TTestResult>,
    /// Why the test could not be run, if it was not.
    pub note: Option<String>,
}

fn compare(metric: &str, names: (&str, &str), a: &[f64], b: &[f64]) -> GroupComparison {
    let mean = |x: &[f64]| if x.is_empty() { f64::NAN } else { x.iter().sum::<f64>() / x.len() as f64 };
    let (test, note) = match welch_t_test(a, b) {
        Ok(t) => (Some(t), None),
        Err(e) => (None, Some(e.to_string())),
    };
    GroupComparison {
        metric: metric.to_string(),
        groups: (names.0.to_string(), names.1.to_string()),
        group_means: (mean(a), mean(b)),
        test,
        note,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricGaps {
    pub major_key_ratio: f64,
    pub mean_note_length_s: f64,
    pub mean_velocity: f64,
    pub note_density_nps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValenceArousalReport {
    pub quadrants: BTreeMap<Quadrant, QuadrantMetrics>,
    /// Major-key indicator, (Q1 ∪ Q4) vs (Q2 ∪ Q3).
    pub valence_major_key: GroupComparison,
    /// Per-file mean note length, (Q1 ∪ Q2) vs (Q3 ∪ Q4).
    pub arousal_note_length: GroupComparison,
    /// Per-file mean velocity, (Q1 ∪ Q2) vs (Q3 ∪ Q4).
    pub arousal_velocity: GroupComparison,
    /// Generated minus reference, per quadrant.
    pub gaps: Option<BTreeMap<Quadrant, MetricGaps>>,
    pub reference: Option<BTreeMap<Quadrant, QuadrantMetrics>>,
}

pub fn valence_arousal_report(
    generated: &BTreeMap<Quadrant, Vec<Score>>,
    reference: Option<&BTreeMap<Quadrant, QuadrantMetrics>>,
) -> Result<ValenceArousalReport, MetricsError> {
    let mut quadrants = BTreeMap::new();
    let mut files = BTreeMap::new();
    for q in Quadrant::ALL {
        let scores = generated.get(&q).ok_or(MetricsError::MissingQuadrant(q))?;
        let c = corpus_metrics(scores)?;
        quadrants.insert(q, c.summary);
        files.insert(q, c.files);
    }
    let collect = |qs: [Quadrant; 2], f: &dyn Fn(&FileMetrics) -> f64| -> Vec<f64> {
        qs.iter().flat_map(|q| files[q].iter().map(f)).collect()
    };
    use Quadrant::*;
    let major = |m: &FileMetrics| if m.major { 1.0 } else { 0.0 };
    let length = |m: &FileMetrics| m.mean_note_length_s;
    let velocity = |m: &FileMetrics| m.mean_velocity;
    let pos_v = ("Q1+Q4", "Q2+Q3");
    let high_a = ("Q1+Q2", "Q3+Q4");
    let valence_major_key = compare("major_key", pos_v, &collect([Q1, Q4], &major), &collect([Q2, Q3], &major));
    let arousal_note_length =
        compare("note_length_s", high_a, &collect([Q1, Q2], &length), &collect([Q3, Q4], &length));
    let arousal_velocity = compare("velocity", high_a, &collect([Q1, Q2], &velocity), &collect([Q3, Q4], &velocity));
    let gaps = match reference {
        Some(r) => {
            let mut g = BTreeMap::new();
            for q in Quadrant::ALL {
                let (a, b) = (&quadrants[&q], r.get(&q).ok_or(MetricsError::MissingQuadrant(q))?);
                g.insert(
                    q,
                    MetricGaps {
                        major_key_ratio: a.major_key_ratio - b.major_key_ratio,
                        mean_note_length_s: a.mean_note_length_s - b.mean_note_length_s,
                        mean_velocity: a.mean_velocity - b.mean_velocity,
                        note_density_nps: a.note_density_nps - b.note_density_nps,
                    },
                );
            }
            Some(g)
        }
        None => None,
    };
    Ok(ValenceArousalReport {
        quadrants,
        valence_major_key,
        arousal_note_length,
        arousal_velocity,
        gaps,
        reference: reference.cloned(),
    })
}

impl ValenceArousalReport {
    /// Fixed-width table for humans.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<4} {:>6} {:>10} {:>9} {:>9} {:>6}", "quad", "major", "length_s", "velocity", "density", "files");
        for (q, m) in &self.quadrants {
            let _ = writeln!(
                s,
                "{:<4} {:>6.3} {:>10.4} {:>9.2} {:>9.3} {:>6}",
                q.to_string(),
                m.major_key_ratio,
                m.mean_note_length_s,
                m.mean_velocity,
                m.note_density_nps,
                m.n_files
            );
            if let Some(r) = self.reference.as_ref().and_then(|r| r.get(q)) {
                let _ = writeln!(
                    s,
                    "{:<4} {:>6.3} {:>10.4} {:>9.2} {:>9.3} {:>6}",
                    "ref",
                    r.major_key_ratio,
                    r.mean_note_length_s,
                    r.mean_velocity,
                    r.note_density_nps,
                    r.n_files
                );
            }
        }
        for c in [&self.valence_major_key, &self.arousal_note_length, &self.arousal_velocity] {
            let _ = write!(
                s,
                "{}: {} mean {:.4} vs {} mean {:.4}",
                c.metric, c.groups.0, c.group_means.0, c.groups.1, c.group_means.1
            );
            match (&c.test, &c.note) {
                (Some(t), _) => {
                    let _ = writeln!(s, ", t = {:.4}, df = {:.2}, p = {:.4e}", t.t_statistic, t.degrees_of_freedom, t.p_value);
                }
                (None, Some(n)) => {
                    let _ = writeln!(s, ", not tested: {n}");
                }
                (None, None) => s.push('\n'),
            }
        }
        s
    }

    /// One JSON object per quadrant.
    pub fn to_records(&self) -> String {
        let mut s = String::new();
        for (q, m) in &self.quadrants {
            let rec = serde_json::json!({ "quadrant": q, "metrics": m, "gaps": self.gaps.as_ref().map(|g| &g[q]) });
            s.push_str(&rec.to_string());
            s.push('\n');
        }
        s
    }
}

/// Standardized squared-error comparison of generated and reference
/// quadrant means over major-key ratio, note length and velocity. Each
/// metric's squared error is divided by the reference metric's variance
/// across quadrants (1 when that variance is zero).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseReport {
    pub mse: f64,
    /// `[major_key_ratio, mean_note_length_s, mean_velocity]` per quadrant.
    pub contributions: BTreeMap<Quadrant, [f64; 3]>,
    pub scales: [f64; 3],
}

pub const MSE_METRICS: [&str; 3] = ["major_key_ratio", "mean_note_length_s", "mean_velocity"];

fn metric_vec(m: &QuadrantMetrics) -> [f64; 3] {
    [m.major_key_ratio, m.mean_note_length_s, m.mean_velocity]
}

pub fn standardized_mse(
    generated: &BTreeMap<Quadrant, QuadrantMetrics>,
    reference: &BTreeMap<Quadrant, QuadrantMetrics>,
) -> Result<MseReport, MetricsError> {
    let mut refs = Vec::new();
    for q in Quadrant::ALL {
        refs.push(metric_vec(reference.get(&q).ok_or(MetricsError::MissingQuadrant(q))?));
    }
    let mut scales = [1.0; 3];
    for k in 0..3 {
        let mean = refs.iter().map(|r| r[k]).sum::<f64>() / 4.0;
        let var = refs.iter().map(|r| (r[k] - mean) * (r[k] - mean)).sum::<f64>() / 4.0;
        if var > 0.0 {
            scales[k] = var;
        }
    }
    let mut contributions = BTreeMap::new();
    let mut total = 0.0;
    for (i, q) in Quadrant::ALL.into_iter().enumerate() {
        let g = metric_vec(generated.get(&q).ok_or(MetricsError::MissingQuadrant(q))?);
        let mut c = [0.0; 3];
        for k in 0..3 {
            c[k] = (g[k] - refs[i][k]).powi(2) / scales[k];
            total += c[k];
        }
        contributions.insert(q, c);
    }
    Ok(MseReport { mse: total / 12.0, contributions, scales })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::midi::NoteEvent;

    fn score(notes: &[(u8, u64, u64, u8)]) -> Score {
        let notes = notes
            .iter()
            .map(|&(pitch, onset_ticks, duration_ticks, velocity)| NoteEvent { pitch, velocity, onset_ticks, duration_ticks })
            .collect();
        Score::with_notes(480, notes, 500_000)
    }

    #[test]
    fn single_quarter_note_metrics() {
        let m = quadrant_metrics(&[score(&[(60, 0, 480, 80)])]).unwrap();
        assert!((m.mean_note_length_s - 0.5).abs() < 1e-12);
        assert_eq!(m.mean_velocity, 80.0);
        assert_eq!(m.major_key_ratio, 1.0);
        assert!((m.note_density_nps - 2.0).abs() < 1e-12);
    }

    #[test]
    fn single_pitch_class_is_flagged() {
        let k = detect_key(&score(&[(62, 0, 480, 80), (74, 480, 480, 80)])).unwrap();
        assert!(k.degenerate);
        assert_eq!((k.tonic, k.mode), (2, Mode::Major));
        assert_eq!(detect_key(&Score::new(480)), Err(MetricsError::EmptyScore));
    }

    #[test]
    fn t_test_symmetry_and_identity() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [2.0, 3.0, 4.0, 5.0, 6.0];
        let ab = welch_t_test(&a, &b).unwrap();
        let ba = welch_t_test(&b, &a).unwrap();
        assert_eq!(ab.t_statistic, -ba.t_statistic);
        assert_eq!(ab.p_value, ba.p_value);
        assert!((ab.degrees_of_freedom - 8.0).abs() < 1e-12);
        assert_eq!(welch_t_test(&a, &a).unwrap().p_value, 1.0);
        assert_eq!(welch_t_test(&[1.0, 1.0], &[2.0, 2.0]), Err(MetricsError::DegenerateVariance));
    }

    #[test]
    fn incomplete_beta_closed_forms() {
        // I_x(1, 1) = x and I_x(a, 1) = x^a.
        for &x in &[0.1, 0.5, 0.9] {
            assert!((regularized_incomplete_beta(x, 1.0, 1.0) - x).abs() < 1e-12);
            assert!((regularized_incomplete_beta(x, 3.0, 1.0) - x.powi(3)).abs() < 1e-12);
        }
        // df = 1: Cauchy, p = 1 - 2 atan(|t|) / pi.
        let p = student_t_two_sided(1.5, 1.0);
        assert!((p - (1.0 - 2.0 * 1.5f64.atan() / std::f64::consts::PI)).abs() < 1e-12);
    }
}
