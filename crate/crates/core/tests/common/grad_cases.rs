//! Finite-difference checks shared by the gradient tests and the acceptance run.

use affectune::model::{causal_lm_loss, supcon_loss, Condition, Decoder, DecoderConfig, Encoder, EncoderConfig, SupConConfig, TextEmbedding, TextVocab};
use affectune::nn::check::{check_gradients, CheckConfig, CheckReport};
use affectune::nn::layers::{Embedding, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use affectune::nn::{Graph, Mask, NnError, ParamStore, Tensor, Var};
use affectune::rng::substream;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn rng(name: &str) -> ChaCha8Rng {
    substream(5, name)
}

fn random_input(g: &mut Graph, rows: usize, cols: usize, seed: u64) -> Result<Var, NnError> {
    let mut r = substream(seed, "input");
    g.input(rows, cols, (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect(), false)
}

/// Projects an output onto fixed random weights so every entry matters.
fn probe(g: &mut Graph, v: Var) -> Result<Var, NnError> {
    let (r, c) = g.shape(v);
    let mut w = substream(99, "probe");
    g.weighted_sum(v, (0..r * c).map(|_| w.random_range(-1.0..1.0)).collect())
}

/// Parameters start near zero with unit gains; nudge them so the checks
/// exercise generic values.
fn jitter(store: &mut ParamStore, seed: u64) {
    let mut r = substream(seed, "jitter");
    for p in store.iter_mut() {
        for x in &mut p.value.data {
            *x += r.random_range(-0.3f32..0.3);
        }
    }
}

fn assert_passed(name: &str, report: CheckReport) {
    assert!(report.passed(), "{name}: {} checked, max rel {:e}, failures {:?}", report.checked, report.max_rel_error, report.failures);
}

pub fn linear_layer() {
    let mut ps = ParamStore::new();
    let lin = Linear::new(&mut ps, "lin", 5, 3, &mut rng("lin"));
    jitter(&mut ps, 1);
    let r = check_gradients(&ps, |g| {
        let x = random_input(g, 4, 5, 1)?;
        let y = lin.forward(g, x)?;
        probe(g, y)
    }, CheckConfig::default()).unwrap();
    assert_passed("linear", r);
}

pub fn embedding_layer_with_repeated_ids() {
    let mut ps = ParamStore::new();
    let emb = Embedding::new(&mut ps, "emb", 7, 4, &mut rng("emb"));
    jitter(&mut ps, 2);
    let r = check_gradients(&ps, |g| {
        let y = emb.forward(g, &[3, 1, 3, 6])?;
        probe(g, y)
    }, CheckConfig::default()).unwrap();
    assert_passed("embedding", r);
}

pub fn layer_norm_layer() {
    let mut ps = ParamStore::new();
    let ln = LayerNorm::new(&mut ps, "ln", 6);
    jitter(&mut ps, 3);
    let lin = Linear::new(&mut ps, "pre", 6, 6, &mut rng("pre"));
    jitter(&mut ps, 4);
    let r = check_gradients(&ps, |g| {
        let x = random_input(g, 3, 6, 2)?;
        let h = lin.forward(g, x)?;
        let y = ln.forward(g, h)?;
        probe(g, y)
    }, CheckConfig::default()).unwrap();
    assert_passed("layer_norm", r);
}

pub fn causal_self_attention() {
    let mut ps = ParamStore::new();
    let attn = MultiHeadAttention::new(&mut ps, "attn", 8, 8, 2, &mut rng("attn"));
    jitter(&mut ps, 5);
    let mask = Mask::causal(5);
    let r = check_gradients(&ps, |g| {
        let x = random_input(g, 5, 8, 3)?;
        let y = attn.forward(g, x, x, Some(&mask))?;
        probe(g, y)
    }, CheckConfig::default()).unwrap();
    assert_passed("self_attention", r);
}

pub fn cross_attention_over_several_memory_rows() {
    let mut ps = ParamStore::new();
    let attn = MultiHeadAttention::new(&mut ps, "cross", 8, 6, 4, &mut rng("cross"));
    jitter(&mut ps, 6);
    let r = check_gradients(&ps, |g| {
        let x = random_input(g, 4, 8, 4)?;
        let m = random_input(g, 3, 6, 5)?;
        let y = attn.forward(g, x, m, None)?;
        probe(g, y)
    }, CheckConfig::default()).unwrap();
    assert_passed("cross_attention", r);
}

pub fn feed_forward_layer() {
    let mut ps = ParamStore::new();
    let ffn = FeedForward::new(&mut ps, "ffn", 6, 10, &mut rng("ffn"));
    jitter(&mut ps, 7);
    let r = check_gradients(&ps, |g| {
        let x = random_input(g, 3, 6, 6)?;
        let y = ffn.forward(g, x)?;
        probe(g, y)
    }, CheckConfig::default()).unwrap();
    assert_passed("feed_forward", r);
}

pub fn supcon_through_a_projection() {
    let mut ps = ParamStore::new();
    let lin = Linear::new(&mut ps, "proj", 5, 4, &mut rng("proj"));
    jitter(&mut ps, 8);
    let labels = [0, 1, 0, 2, 1, 1];
    let r = check_gradients(&ps, |g| {
        let x = random_input(g, 6, 5, 7)?;
        let z = lin.forward(g, x)?;
        let z = g.l2_normalize_rows(z);
        supcon_loss(g, z, &labels, SupConConfig { temperature: 0.5, ..Default::default() }).map_err(|e| match e {
            affectune::model::ModelError::Nn(n) => n,
            other => panic!("{other}"),
        })
    }, CheckConfig::default()).unwrap();
    assert_passed("supcon", r);
}

pub fn causal_lm_on_tiny_decoder() {
    let cfg = DecoderConfig { token_vocab_size: 12, dim: 8, layers: 2, heads: 2, ffn_dim: 12, max_seq_len: 8, cond_dim: 4, label_conditioned: true };
    let mut dec = Decoder::new(cfg, &mut rng("decoder")).unwrap();
    jitter(&mut dec.params, 9);
    let tokens = [1u32, 3, 5, 5, 0, 7, 2];
    let text = Condition::Text(TextEmbedding { vector: vec![0.5, -0.5, 0.5, 0.5], normalized: true });
    let label = Condition::Label(affectune::emotion::Quadrant::Q3);
    for cond in [text, label] {
        let r = check_gradients(&dec.params, |g| {
            causal_lm_loss(g, &dec, &tokens, &cond, Some(0)).map_err(|e| match e {
                affectune::model::ModelError::Nn(n) => n,
                other => panic!("{other}"),
            })
        }, CheckConfig { max_entries: 16, ..Default::default() }).unwrap();
        assert_passed("causal_lm", r);
    }
}

pub fn text_encoder_embedding() {
    let vocab = TextVocab::build(["calm meadow", "loud thunder storm"], 40);
    let mut enc = Encoder::new(EncoderConfig::tiny(vocab.len()), vocab, &mut rng("encoder")).unwrap();
    jitter(&mut enc.params, 10);
    let ids = enc.tokenize("loud calm storm");
    let r = check_gradients(&enc.params, |g| {
        let z = enc.forward(g, &ids).map_err(|e| match e {
            affectune::model::ModelError::Nn(n) => n,
            other => panic!("{other}"),
        })?;
        probe(g, z)
    }, CheckConfig { max_entries: 16, ..Default::default() }).unwrap();
    assert_passed("encoder", r);
}

pub fn frozen_parameters_are_skipped() {
    let mut ps = ParamStore::new();
    let a = ps.add("a", Tensor::filled(&[2, 2], 0.5));
    ps.add("b", Tensor::filled(&[2, 2], 0.25));
    ps.set_trainable(|n| n == "a");
    let r = check_gradients(&ps, |g| {
        let va = g.param(a);
        let vb = g.param(affectune::nn::ParamId(1));
        let m = g.matmul(va, vb)?;
        probe(g, m)
    }, CheckConfig::default()).unwrap();
    assert_passed("frozen", r.clone());
    assert_eq!(r.checked, 4);
}

pub const ALL: [(&str, fn()); 10] = [
    ("linear_layer", linear_layer),
    ("embedding_layer_with_repeated_ids", embedding_layer_with_repeated_ids),
    ("layer_norm_layer", layer_norm_layer),
    ("causal_self_attention", causal_self_attention),
    ("cross_attention_over_several_memory_rows", cross_attention_over_several_memory_rows),
    ("feed_forward_layer", feed_forward_layer),
    ("supcon_through_a_projection", supcon_through_a_projection),
    ("causal_lm_on_tiny_decoder", causal_lm_on_tiny_decoder),
    ("text_encoder_embedding", text_encoder_embedding),
    ("frozen_parameters_are_skipped", frozen_parameters_are_skipped),
];
