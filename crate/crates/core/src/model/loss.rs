//! Supervised contrastive loss and the next-token objective.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::decoder::Decoder;
use super::{Condition, ModelError};
use crate::nn::{Graph, Mask, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupConConfig {
    pub temperature: f64,
    /// Include the anchor's self-similarity in the softmax denominator.
    /// Off by default, so a collapsed same-class batch has zero loss.
    #[serde(default)]
    pub denominator_includes_anchor: bool,
}

impl Default for SupConConfig {
    fn default() -> Self {
        Self { temperature: 0.07, denominator_includes_anchor: false }
    }
}

/// SupCon over `embeddings` (N × d, rows already unit-norm) with integer
/// class `labels`. Anchors without positives are skipped; the mean is over
/// the remaining anchors.
pub fn supcon_loss(g: &mut Graph, embeddings: Var, labels: &[usize], cfg: SupConConfig) -> Result<Var, ModelError> {
    let (n, d) = g.shape(embeddings);
    if labels.len() != n {
        return Err(crate::nn::NnError::ShapeMismatch { op: "supcon_loss", left: vec![n, d], right: vec![labels.len()] }.into());
    }
    if cfg.temperature <= 0.0 {
        return Err(ModelError::InvalidConfig("temperature must be positive".into()));
    }
    let positives: Vec<usize> =
        (0..n).map(|i| (0..n).filter(|&j| j != i && labels[j] == labels[i]).count()).collect();
    let anchors = positives.iter().filter(|&&p| p > 0).count();
    if anchors == 0 {
        return Err(ModelError::NoPositives);
    }
    let sim = g.matmul_bt(embeddings, embeddings)?;
    let logits = g.scale(sim, 1.0 / cfg.temperature);
    let mask = if cfg.denominator_includes_anchor { Mask::full(n, n) } else { Mask::off_diagonal(n) };
    let log_prob = g.masked_log_softmax(logits, Some(Rc::new(mask)))?;
    let mut weights = vec![0.0; n * n];
    for i in 0..n {
        if positives[i] == 0 {
            continue;
        }
        let w = -1.0 / (anchors as f64 * positives[i] as f64);
        for j in 0..n {
            if j != i && labels[j] == labels[i] {
                weights[i * n + j] = w;
            }
        }
    }
    Ok(g.weighted_sum(log_prob, weights)?)
}

/// Mean next-token cross-entropy of `tokens` under `cond`; targets equal to
/// `pad` are ignored.
pub fn causal_lm_loss(
    g: &mut Graph,
    decoder: &Decoder,
    tokens: &[u32],
    cond: &Condition,
    pad: Option<u32>,
) -> Result<Var, ModelError> {
    if tokens.len() < 2 {
        return Err(ModelError::TooShort(tokens.len()));
    }
    let inputs = &tokens[..tokens.len() - 1];
    let targets: Vec<Option<usize>> =
        tokens[1..].iter().map(|&t| if Some(t) == pad { None } else { Some(t as usize) }).collect();
    let logits = decoder.forward(g, inputs, cond)?;
    Ok(g.cross_entropy(logits, &targets)?)
}
