//! Independent reference implementations shared by the integration tests
//! and the acceptance run. None of them call into the code they check.

#![allow(dead_code)]

pub mod grad_cases;

use std::collections::BTreeMap;

use affectune::emotion::{Quadrant, TextSample};
use affectune::metrics::{quadrant_metrics, QuadrantMetrics};
use affectune::midi::{NoteEvent, Score};
use affectune::model::Decoder;
use affectune::remi::{TokenKind, TokenSequence, TokenizerConfig, Vocabulary};
use affectune::train::{SampleSource, TrainError};
use rand::Rng;
use regex::Regex;

// ------------------------------------------------------------------ scores

pub fn random_score<R: Rng>(rng: &mut R, max_notes: usize) -> Score {
    let tpq = [96u16, 120, 384, 480, 960][rng.random_range(0..5)];
    let n = rng.random_range(0..=max_notes);
    let span = u64::from(tpq) * 4 * 8;
    let notes = (0..n)
        .map(|_| NoteEvent {
            pitch: rng.random_range(10..=120),
            velocity: rng.random_range(1..=127),
            onset_ticks: rng.random_range(0..span),
            duration_ticks: rng.random_range(1..=u64::from(tpq) * 20),
        })
        .collect();
    Score::with_notes(tpq, notes, 500_000)
}

// --------------------------------------------------------------- quantizer

fn round_half_up(x: f64) -> u64 {
    (x + 0.5).floor() as u64
}

/// Expected note list after tokenize then detokenize, computed per pitch
/// with floating-point grid arithmetic and brute-force bin searches.
pub fn quantize_oracle(cfg: &TokenizerConfig, score: &Score) -> Vec<NoteEvent> {
    let upq = f64::from(cfg.positions_per_bar / 4);
    let tpq = f64::from(score.ticks_per_quarter);
    let units = |t: u64| round_half_up(t as f64 * upq / tpq);
    let bins = &cfg.duration_bins;
    let max = u64::from(*bins.last().unwrap());
    let nearest = |u: u64| -> usize {
        let mut best = 0;
        for i in 0..bins.len() {
            let d = (i64::from(bins[i]) - u as i64).abs();
            let bd = (i64::from(bins[best]) - u as i64).abs();
            if d < bd {
                best = i;
            }
        }
        best
    };
    let vbin = |v: u8| -> u32 { ((u32::from(v) - 1) * cfg.velocity_bins / 127).min(cfg.velocity_bins - 1) };
    let vrep = |b: u32| -> u8 {
        let members: Vec<u32> = (1..=127u8).filter(|&v| vbin(v) == b).map(u32::from).collect();
        ((members[0] - 1 + members[members.len() - 1] - 1) / 2 + 1) as u8
    };
    // pitch -> (onset, duration bin, velocity bin)
    let mut by_pitch: BTreeMap<u8, Vec<(u64, usize, u32)>> = BTreeMap::new();
    for n in &score.notes {
        let p = n.pitch.clamp(cfg.pitch_range.0, cfg.pitch_range.1);
        let mut onset = units(n.onset_ticks);
        let mut rem = units(n.duration_ticks).max(1);
        let vb = vbin(n.velocity);
        while rem > max {
            by_pitch.entry(p).or_default().push((onset, bins.len() - 1, vb));
            onset += max;
            rem -= max;
        }
        by_pitch.entry(p).or_default().push((onset, nearest(rem), vb));
    }
    let tpu = u64::from(cfg.output_ticks_per_quarter) / (cfg.positions_per_bar / 4) as u64;
    let mut out = Vec::new();
    for (pitch, mut v) in by_pitch {
        v.sort();
        let mut kept: Vec<(u64, usize, u32)> = Vec::new();
        for x in v {
            if kept.last().is_some_and(|k| k.0 == x.0) {
                *kept.last_mut().unwrap() = x;
            } else {
                kept.push(x);
            }
        }
        for i in 0..kept.len() {
            let (onset, mut b, vb) = kept[i];
            if let Some(&(next, _, _)) = kept.get(i + 1) {
                if onset + u64::from(bins[b]) > next {
                    let gap = next - onset;
                    b = (0..bins.len()).rev().find(|&j| u64::from(bins[j]) <= gap).unwrap_or(0);
                }
            }
            out.push(NoteEvent { pitch, velocity: vrep(vb), onset_ticks: onset * tpu, duration_ticks: u64::from(bins[b]) * tpu });
        }
    }
    out.sort_by_key(|n| (n.onset_ticks, n.pitch, n.duration_ticks, n.velocity));
    out
}

// ----------------------------------------------------------------- grammar

/// Grammar acceptor built from a regular expression over one letter per
/// token kind, plus a scan for positions that go backwards within a bar.
pub struct RegexAcceptor {
    re: Regex,
}

impl RegexAcceptor {
    pub fn new() -> Self {
        Self { re: Regex::new(r"^S(B(PNVD)*)*E$").unwrap() }
    }

    pub fn accepts(&self, vocab: &Vocabulary, seq: &TokenSequence) -> bool {
        let mut letters = String::new();
        let mut last_pos: Option<u32> = None;
        for &id in &seq.ids {
            let Some(t) = vocab.token(id) else { return false };
            letters.push(match t.kind {
                TokenKind::Pad => 'X',
                TokenKind::Bos => 'S',
                TokenKind::Eos => 'E',
                TokenKind::Bar => {
                    last_pos = None;
                    'B'
                }
                TokenKind::Position => {
                    if last_pos.is_some_and(|p| t.value < p) {
                        return false;
                    }
                    last_pos = Some(t.value);
                    'P'
                }
                TokenKind::Pitch => 'N',
                TokenKind::Velocity => 'V',
                TokenKind::Duration => 'D',
            });
        }
        self.re.is_match(&letters)
    }
}

/// A valid sequence, then with probability one half a random corruption.
pub fn random_token_sequence<R: Rng>(rng: &mut R, vocab: &Vocabulary) -> TokenSequence {
    let id_of = |k: TokenKind, v: u32| vocab.id(affectune::remi::Token::new(k, v)).unwrap();
    let ids_of = |k: TokenKind| vocab.ids_of_kind(k).collect::<Vec<u32>>();
    let (pitches, vels, durs) = (ids_of(TokenKind::Pitch), ids_of(TokenKind::Velocity), ids_of(TokenKind::Duration));
    let npos = vocab.ids_of_kind(TokenKind::Position).count() as u32;
    let mut ids = vec![id_of(TokenKind::Bos, 0)];
    for _ in 0..rng.random_range(0..4) {
        ids.push(id_of(TokenKind::Bar, 0));
        let mut pos = 0;
        for _ in 0..rng.random_range(0..4) {
            pos = rng.random_range(pos..npos);
            ids.push(id_of(TokenKind::Position, pos));
            ids.push(pitches[rng.random_range(0..pitches.len())]);
            ids.push(vels[rng.random_range(0..vels.len())]);
            ids.push(durs[rng.random_range(0..durs.len())]);
        }
    }
    ids.push(id_of(TokenKind::Eos, 0));
    if rng.random_bool(0.5) {
        match rng.random_range(0..4) {
            0 => {
                let i = rng.random_range(0..ids.len());
                ids[i] = rng.random_range(0..vocab.len() as u32);
            }
            1 => {
                let i = rng.random_range(0..ids.len());
                ids.remove(i);
            }
            2 => {
                let (i, j) = (rng.random_range(0..ids.len()), rng.random_range(0..ids.len()));
                ids.swap(i, j);
            }
            _ => {
                let i = rng.random_range(0..=ids.len());
                ids.insert(i, rng.random_range(0..vocab.len() as u32 + 2));
            }
        }
    }
    TokenSequence::new(ids)
}

// ------------------------------------------------------------------ supcon

/// Supervised contrastive loss by explicit loops: anchors with no positive
/// are skipped, the denominator runs over every other sample.
pub fn supcon_oracle(z: &[Vec<f64>], labels: &[usize], tau: f64) -> f64 {
    supcon_oracle_with(z, labels, tau, false)
}

/// `include_anchor` keeps the `a = i` term in the denominator.
pub fn supcon_oracle_with(z: &[Vec<f64>], labels: &[usize], tau: f64, include_anchor: bool) -> f64 {
    let n = z.len();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut total = 0.0;
    let mut anchors = 0;
    for i in 0..n {
        let pos: Vec<usize> = (0..n).filter(|&p| p != i && labels[p] == labels[i]).collect();
        if pos.is_empty() {
            continue;
        }
        anchors += 1;
        let denom: f64 = (0..n).filter(|&a| include_anchor || a != i).map(|a| (dot(&z[i], &z[a]) / tau).exp()).sum();
        let mut s = 0.0;
        for &p in &pos {
            s += ((dot(&z[i], &z[p]) / tau).exp() / denom).ln();
        }
        total += -s / pos.len() as f64;
    }
    total / anchors as f64
}

// --------------------------------------------------------------------- key

const MAJOR: [f64; 12] = [6.35, 2.23, 3.48, 2.33, 4.38, 4.09, 2.52, 5.19, 2.39, 3.66, 2.29, 2.88];
const MINOR: [f64; 12] = [6.33, 2.68, 3.52, 5.38, 2.60, 3.53, 2.54, 4.75, 3.98, 2.69, 3.34, 3.17];

fn pearson(x: &[f64; 12], y: &[f64; 12]) -> f64 {
    let mx = x.iter().sum::<f64>() / 12.0;
    let my = y.iter().sum::<f64>() / 12.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..12 {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx).powi(2);
        syy += (y[i] - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

/// Best (tonic, is_major, r) over all 24 rotated profiles.
pub fn key_oracle(score: &Score) -> (u8, bool, f64) {
    let mut h = [0.0; 12];
    for n in &score.notes {
        h[usize::from(n.pitch % 12)] += n.duration_ticks as f64;
    }
    let mut best = (0u8, true, f64::NEG_INFINITY);
    for (major, prof) in [(true, &MAJOR), (false, &MINOR)] {
        for tonic in 0..12 {
            let mut rotated = [0.0; 12];
            for pc in 0..12 {
                rotated[pc] = prof[(pc + 12 - tonic) % 12];
            }
            let r = pearson(&h, &rotated);
            if r > best.2 + 1e-12 {
                best = (tonic as u8, major, r);
            }
        }
    }
    best
}

// ---------------------------------------------------------------- t-test

fn ln_gamma_stirling(mut z: f64) -> f64 {
    let mut shift = 0.0;
    while z < 12.0 {
        shift -= z.ln();
        z += 1.0;
    }
    let z2 = z * z;
    shift + (z - 0.5) * z.ln() - z + 0.5 * (2.0 * std::f64::consts::PI).ln() + 1.0 / (12.0 * z) - 1.0 / (360.0 * z * z2)
        + 1.0 / (1260.0 * z * z2 * z2)
        - 1.0 / (1680.0 * z * z2 * z2 * z2)
}

#[allow(clippy::too_many_arguments)]
fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, eps: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    if depth == 0 || (left + right - whole).abs() <= 15.0 * eps {
        return left + right + (left + right - whole) / 15.0;
    }
    simpson(f, a, m, fa, flm, fm, left, eps / 2.0, depth - 1) + simpson(f, m, b, fm, frm, fb, right, eps / 2.0, depth - 1)
}

/// Two-sided p from Student's t density integrated by adaptive Simpson.
pub fn t_two_sided_quadrature(t: f64, df: f64) -> f64 {
    let c = (ln_gamma_stirling((df + 1.0) / 2.0) - ln_gamma_stirling(df / 2.0)).exp() / (df * std::f64::consts::PI).sqrt();
    let f = |x: f64| c * (1.0 + x * x / df).powf(-(df + 1.0) / 2.0);
    let b = t.abs();
    if b == 0.0 {
        return 1.0;
    }
    let (fa, fm, fb) = (f(0.0), f(b / 2.0), f(b));
    let whole = b / 6.0 * (fa + 4.0 * fm + fb);
    let area = simpson(&f, 0.0, b, fa, fm, fb, whole, 1e-13, 50);
    (1.0 - 2.0 * area).max(0.0)
}

/// (t, df, p) by textbook formulas.
pub fn welch_oracle(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let stats = |x: &[f64]| {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        let v = x.iter().map(|y| (y - m).powi(2)).sum::<f64>() / (n - 1.0);
        (n, m, v)
    };
    let (na, ma, va) = stats(a);
    let (nb, mb, vb) = stats(b);
    let se2 = va / na + vb / nb;
    let t = (ma - mb) / se2.sqrt();
    let df = se2.powi(2) / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
    (t, df, t_two_sided_quadrature(t, df))
}

// ----------------------------------------------------------- decoder oracle

fn p(dec: &Decoder, name: &str) -> Vec<f64> {
    dec.params.by_name(name).unwrap().value.data.iter().map(|&x| f64::from(x)).collect()
}

fn linear(dec: &Decoder, name: &str, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let w = p(dec, &format!("{name}.weight"));
    let b = p(dec, &format!("{name}.bias"));
    let out = b.len();
    x.iter()
        .map(|row| {
            (0..out)
                .map(|j| b[j] + row.iter().enumerate().map(|(i, v)| v * w[i * out + j]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn layer_norm(dec: &Decoder, name: &str, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let g = p(dec, &format!("{name}.gain"));
    let b = p(dec, &format!("{name}.bias"));
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter().enumerate().map(|(j, v)| (v - mean) / (var + 1e-6).sqrt() * g[j] + b[j]).collect()
        })
        .collect()
}

fn attention(dec: &Decoder, name: &str, x: &[Vec<f64>], mem: &[Vec<f64>], causal: bool, heads: usize) -> Vec<Vec<f64>> {
    let q = linear(dec, &format!("{name}.query"), x);
    let k = linear(dec, &format!("{name}.key"), mem);
    let v = linear(dec, &format!("{name}.value"), mem);
    let dim = q[0].len();
    let hd = dim / heads;
    let mut cat = vec![vec![0.0; dim]; x.len()];
    for h in 0..heads {
        for t in 0..x.len() {
            let visible = if causal { t + 1 } else { mem.len() };
            let scores: Vec<f64> = (0..visible)
                .map(|s| (0..hd).map(|d| q[t][h * hd + d] * k[s][h * hd + d]).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for d in 0..hd {
                cat[t][h * hd + d] = (0..visible).map(|s| e[s] / z * v[s][h * hd + d]).sum();
            }
        }
    }
    linear(dec, &format!("{name}.output"), &cat)
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Decoder logits computed with nested loops straight from named weights.
pub fn decoder_oracle(dec: &Decoder, ids: &[u32], memory: &[f64]) -> Vec<Vec<f64>> {
    let c = dec.config;
    let tok = p(dec, "decoder.tok_emb.weight");
    let pos = p(dec, "decoder.pos_emb.weight");
    let mut x: Vec<Vec<f64>> = ids
        .iter()
        .enumerate()
        .map(|(t, &id)| (0..c.dim).map(|j| tok[id as usize * c.dim + j] + pos[t * c.dim + j]).collect())
        .collect();
    let add = |x: &mut Vec<Vec<f64>>, y: Vec<Vec<f64>>| {
        for (a, b) in x.iter_mut().zip(y) {
            for (u, v) in a.iter_mut().zip(b) {
                *u += v;
            }
        }
    };
    let mem = vec![memory.to_vec()];
    for l in 0..c.layers {
        let pre = format!("decoder.layers.{l}");
        let h = layer_norm(dec, &format!("{pre}.norm1"), &x);
        let a = attention(dec, &format!("{pre}.self_attn"), &h, &h, true, c.heads);
        add(&mut x, a);
        let h = layer_norm(dec, &format!("{pre}.norm2"), &x);
        let a = attention(dec, &format!("{pre}.cross_attn"), &h, &mem, false, c.heads);
        add(&mut x, a);
        let h = layer_norm(dec, &format!("{pre}.norm3"), &x);
        let up: Vec<Vec<f64>> = linear(dec, &format!("{pre}.ffn.up"), &h).into_iter().map(|r| r.into_iter().map(gelu).collect()).collect();
        add(&mut x, linear(dec, &format!("{pre}.ffn.down"), &up));
    }
    let x = layer_norm(dec, "decoder.final_norm", &x);
    linear(dec, "decoder.head", &x)
}

// -------------------------------------------------------- selection stubs

/// Returns fixed token sequences and fixed scores per quadrant.
pub struct StubSource {
    pub label: String,
    pub epoch: usize,
    pub sequences: Vec<TokenSequence>,
    pub clips: BTreeMap<Quadrant, Vec<Score>>,
}

impl SampleSource for StubSource {
    fn label(&self) -> String {
        self.label.clone()
    }

    fn epoch(&self) -> usize {
        self.epoch
    }

    fn unconditioned(&self, n: usize, _seed: u64) -> Result<Vec<TokenSequence>, TrainError> {
        Ok(self.sequences.iter().cycle().take(n).cloned().collect())
    }

    fn for_quadrant(&self, q: Quadrant, _texts: &[TextSample], n: usize, _seed: u64) -> Result<Vec<Score>, TrainError> {
        Ok(self.clips[&q].iter().cycle().take(n).cloned().collect())
    }
}

/// Reference metrics for a per-quadrant clip table.
pub fn metrics_by_quadrant(clips: &BTreeMap<Quadrant, Vec<Score>>) -> BTreeMap<Quadrant, QuadrantMetrics> {
    clips.iter().map(|(q, s)| (*q, quadrant_metrics(s).unwrap())).collect()
}
