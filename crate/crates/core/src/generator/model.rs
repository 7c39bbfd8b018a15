//! The conditioned causal transformer and its sampling loop.
//!
//! Input row 0 is the projected text embedding; rows 1.. are embedded prefix
//! tokens plus learned positions. Causal masking keeps logits at a position
//! independent of anything later, and `END` is an ordinary softmax class.

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_checkpoint, write_checkpoint, CheckpointData, CheckpointKind};
use crate::embed::TextEmbedding;
use crate::nn::{randn, Bound, Graph, ParamId, ParamSet, Var};

use super::{GeneratorError, TokenSequence};

/// Architecture plus sampling settings for the generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    /// Cap on generated codebook indices (`END` comes on top).
    pub max_len: usize,
    pub sampling: Sampling,
    pub seed: u64,
    /// Width of the conditioning text embedding.
    pub text_dim: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            layers: 4,
            heads: 4,
            width: 256,
            max_len: 64,
            sampling: Sampling::Greedy,
            seed: 0,
            text_dim: crate::embed::DEFAULT_TEXT_DIM,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), GeneratorError> {
        if self.max_len == 0 {
            return Err(GeneratorError::InvalidConfig("max_len must be >= 1".into()));
        }
        if self.layers == 0 || self.heads == 0 || self.width == 0 || self.text_dim == 0 {
            return Err(GeneratorError::InvalidConfig(
                "layers, heads, width and text_dim must be positive".into(),
            ));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(GeneratorError::InvalidConfig(format!(
                "width {} must divide evenly into {} heads",
                self.width, self.heads
            )));
        }
        if let Sampling::TopK { k, temperature } = self.sampling {
            if k == 0 {
                return Err(GeneratorError::InvalidConfig("top-k k must be >= 1".into()));
            }
            if !(temperature.is_finite() && temperature > 0.0) {
                return Err(GeneratorError::InvalidConfig("temperature must be > 0".into()));
            }
        }
        Ok(())
    }
}

/// How the next token is chosen from the logits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum Sampling {
    Greedy,
    TopK { k: usize, temperature: f64 },
}

pub(super) struct BlockIds {
    ln1: (ParamId, ParamId),
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2: (ParamId, ParamId),
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;
const MASKED: f64 = -1e30;

fn linear_ids(
    params: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    name: &str,
    rows: usize,
    cols: usize,
) -> (ParamId, ParamId) {
    let w = params.add(
        &format!("{name}.w"),
        randn(rng, &[rows, cols], INIT_STD),
    );
    let b = params.add(&format!("{name}.b"), Array1::zeros(cols).into_dyn());
    (w, b)
}

fn ln_ids(params: &mut ParamSet, name: &str, width: usize) -> (ParamId, ParamId) {
    let g = params.add(&format!("{name}.g"), Array1::ones(width).into_dyn());
    let b = params.add(&format!("{name}.b"), Array1::zeros(width).into_dyn());
    (g, b)
}

pub(super) fn register_blocks(
    params: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    layers: usize,
    width: usize,
) -> Vec<BlockIds> {
    (0..layers)
        .map(|i| {
            let p = format!("block{i}");
            let ln1 = ln_ids(params, &format!("{p}.ln1"), width);
            let (wq, bq) = linear_ids(params, rng, &format!("{p}.attn.q"), width, width);
            let (wk, bk) = linear_ids(params, rng, &format!("{p}.attn.k"), width, width);
            let (wv, bv) = linear_ids(params, rng, &format!("{p}.attn.v"), width, width);
            let (wo, bo) = linear_ids(params, rng, &format!("{p}.attn.o"), width, width);
            let ln2 = ln_ids(params, &format!("{p}.ln2"), width);
            let (w1, b1) = linear_ids(params, rng, &format!("{p}.mlp.fc1"), width, 4 * width);
            let (w2, b2) = linear_ids(params, rng, &format!("{p}.mlp.fc2"), 4 * width, width);
            BlockIds { ln1, wq, bq, wk, bk, wv, bv, wo, bo, ln2, w1, b1, w2, b2 }
        })
        .collect()
}

fn linear(g: &mut Graph, bound: &Bound, w: ParamId, b: ParamId, x: Var) -> Var {
    let y = g.matmul(x, bound.var(w));
    g.add_bias_cols(y, bound.var(b))
}

fn causal_mask(g: &mut Graph, len: usize) -> Var {
    let mask = Array2::from_shape_fn((len, len), |(r, c)| if c > r { MASKED } else { 0.0 });
    g.leaf2(mask)
}

/// Run the stack of causal attention blocks over `(len, width)` rows.
pub(super) fn blocks_forward(
    g: &mut Graph,
    bound: &Bound,
    blocks: &[BlockIds],
    heads: usize,
    width: usize,
    mut x: Var,
) -> Var {
    let len = g.value(x).shape()[0];
    let mask = causal_mask(g, len);
    let dh = width / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    for blk in blocks {
        let h = g.layer_norm(x, bound.var(blk.ln1.0), bound.var(blk.ln1.1), LN_EPS);
        let q = linear(g, bound, blk.wq, blk.bq, h);
        let k = linear(g, bound, blk.wk, blk.bk, h);
        let v = linear(g, bound, blk.wv, blk.bv, h);
        let mut head_outs = Vec::with_capacity(heads);
        for hi in 0..heads {
            let qh = g.slice_cols(q, hi * dh, dh);
            let kh = g.slice_cols(k, hi * dh, dh);
            let vh = g.slice_cols(v, hi * dh, dh);
            let kt = g.transpose(kh);
            let scores = g.matmul(qh, kt);
            let scores = g.scale(scores, scale);
            let scores = g.add(scores, mask);
            let att = g.softmax_rows(scores);
            head_outs.push(g.matmul(att, vh));
        }
        let cat = g.concat_cols(&head_outs);
        let attn_out = linear(g, bound, blk.wo, blk.bo, cat);
        x = g.add(x, attn_out);

        let h2 = g.layer_norm(x, bound.var(blk.ln2.0), bound.var(blk.ln2.1), LN_EPS);
        let m = linear(g, bound, blk.w1, blk.b1, h2);
        let m = g.relu(m);
        let m = linear(g, bound, blk.w2, blk.b2, m);
        x = g.add(x, m);
    }
    x
}

pub(super) struct GeneratorLayout {
    pub cond_w: ParamId,
    pub cond_b: ParamId,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub blocks: Vec<BlockIds>,
    pub ln_f: (ParamId, ParamId),
    pub head_w: ParamId,
    pub head_b: ParamId,
}

/// A trained (or freshly initialized) token generator tied to a codec
/// vocabulary.
pub struct GeneratorCheckpoint {
    pub(super) config: GeneratorConfig,
    pub(super) vocab_k: usize,
    pub(super) params: ParamSet,
    pub(super) layout: GeneratorLayout,
    /// Content hash of the codec checkpoint file this generator was trained
    /// against; checked at load/generate time by the pipeline.
    pub codec_hash: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct GeneratorMeta {
    config: GeneratorConfig,
    vocab_k: usize,
    codec_hash: Option<String>,
}

impl GeneratorCheckpoint {
    /// Fresh random parameters for a codebook of `k` entries (vocabulary
    /// `k + 1` including `END`).
    pub fn init(config: GeneratorConfig, k: usize, seed: u64) -> Result<Self, GeneratorError> {
        config.validate()?;
        if k == 0 {
            return Err(GeneratorError::InvalidConfig("codebook size must be >= 1".into()));
        }
        let vocab = k + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let (cond_w, cond_b) = linear_ids(&mut params, &mut rng, "cond", config.text_dim, config.width);
        let tok_emb = params.add("tok_emb", randn(&mut rng, &[vocab, config.width], INIT_STD));
        let pos_emb = params.add(
            "pos_emb",
            randn(&mut rng, &[config.max_len + 1, config.width], INIT_STD),
        );
        let blocks = register_blocks(&mut params, &mut rng, config.layers, config.width);
        let ln_f = ln_ids(&mut params, "ln_f", config.width);
        let (head_w, head_b) = linear_ids(&mut params, &mut rng, "head", config.width, vocab);
        Ok(Self {
            config,
            vocab_k: k,
            params,
            layout: GeneratorLayout { cond_w, cond_b, tok_emb, pos_emb, blocks, ln_f, head_w, head_b },
            codec_hash: None,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    /// Codebook size `K`; `END = K` and the softmax has `K + 1` classes.
    pub fn vocab_k(&self) -> usize {
        self.vocab_k
    }

    fn check_cond(&self, cond: &TextEmbedding) -> Result<(), GeneratorError> {
        if cond.dim() != self.config.text_dim {
            return Err(GeneratorError::CondWidthMismatch {
                expected: self.config.text_dim,
                got: cond.dim(),
            });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), GeneratorError> {
        let meta = GeneratorMeta {
            config: self.config.clone(),
            vocab_k: self.vocab_k,
            codec_hash: self.codec_hash.clone(),
        };
        write_checkpoint(
            path,
            &CheckpointData {
                kind: CheckpointKind::Generator,
                meta: serde_json::to_value(&meta)
                    .map_err(crate::checkpoint::CheckpointError::from)?,
                blobs: self
                    .params
                    .iter()
                    .map(|(n, v)| (n.to_string(), v.clone()))
                    .collect(),
            },
        )?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, GeneratorError> {
        let data = read_checkpoint(path)?;
        if data.kind != CheckpointKind::Generator {
            return Err(GeneratorError::InvalidConfig(format!(
                "{} is not a generator checkpoint",
                path.display()
            )));
        }
        let meta: GeneratorMeta = serde_json::from_value(data.meta)
            .map_err(crate::checkpoint::CheckpointError::from)?;
        let mut ckpt = Self::init(meta.config, meta.vocab_k, 0)?;
        ckpt.params
            .load_values(data.blobs)
            .map_err(GeneratorError::InvalidConfig)?;
        ckpt.codec_hash = meta.codec_hash;
        Ok(ckpt)
    }
}

/// Assemble input rows `[projected cond] ++ [embedded tokens + positions]`
/// and return the `(len, vocab)` logits node.
pub(super) fn forward_logits(
    g: &mut Graph,
    bound: &Bound,
    ckpt: &GeneratorCheckpoint,
    cond: &[f64],
    tokens: &[usize],
) -> Var {
    let layout = &ckpt.layout;
    let cond_row = g.leaf2(Array2::from_shape_vec((1, cond.len()), cond.to_vec()).unwrap());
    let cond_tok = linear(g, bound, layout.cond_w, layout.cond_b, cond_row);
    let rows = if tokens.is_empty() {
        cond_tok
    } else {
        let tok = g.embedding(bound.var(layout.tok_emb), tokens);
        g.concat_rows(&[cond_tok, tok])
    };
    let len = tokens.len() + 1;
    let positions: Vec<usize> = (0..len).collect();
    let pos = g.embedding(bound.var(layout.pos_emb), &positions);
    let x = g.add(rows, pos);
    let x = blocks_forward(g, bound, &layout.blocks, ckpt.config.heads, ckpt.config.width, x);
    let x = g.layer_norm(x, bound.var(layout.ln_f.0), bound.var(layout.ln_f.1), LN_EPS);
    linear(g, bound, layout.head_w, layout.head_b, x)
}

fn cond_to_f64(cond: &TextEmbedding) -> Vec<f64> {
    cond.vector.iter().map(|&v| v as f64).collect()
}

/// Unnormalized log-scores over the `K + 1` vocabulary for the next token
/// after `prefix` (codebook indices only, no `END`) under conditioning
/// `cond`.
pub fn next_token_logits(
    prefix: &[usize],
    cond: &TextEmbedding,
    ckpt: &GeneratorCheckpoint,
) -> Result<Vec<f64>, GeneratorError> {
    ckpt.check_cond(cond)?;
    if prefix.len() >= ckpt.config.max_len {
        return Err(GeneratorError::PrefixTooLong {
            len: prefix.len(),
            max_len: ckpt.config.max_len,
        });
    }
    for &t in prefix {
        if t >= ckpt.vocab_k {
            return Err(GeneratorError::TokenOutOfRange { token: t, k: ckpt.vocab_k });
        }
    }
    let mut g = Graph::new();
    let bound = ckpt.params.bind(&mut g);
    let logits = forward_logits(&mut g, &bound, ckpt, &cond_to_f64(cond), prefix);
    let values = g.value(logits);
    let last = values.shape()[0] - 1;
    Ok(values
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap()
        .row(last)
        .to_vec())
}

fn argmax(logits: &[f64]) -> usize {
    let mut best = 0usize;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in logits.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

fn sample_top_k(logits: &[f64], k: usize, temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    let k = k.min(logits.len());
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap().then(a.cmp(&b)));
    let short = &order[..k];
    let mx = logits[short[0]];
    let weights: Vec<f64> = short
        .iter()
        .map(|&i| ((logits[i] - mx) / temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (&idx, &w) in short.iter().zip(weights.iter()) {
        if u < w {
            return idx;
        }
        u -= w;
    }
    short[k - 1]
}

/// Autoregressively sample a token sequence for `cond`.
///
/// Sampling follows `cfg.sampling`; generation stops at `END` or is forced
/// to `END` after `cfg.max_len` indices, so it always terminates. Greedy
/// decoding is fully deterministic; top-k is deterministic given `cfg.seed`.
pub fn generate(
    cond: &TextEmbedding,
    cfg: &GeneratorConfig,
    ckpt: &GeneratorCheckpoint,
) -> Result<TokenSequence, GeneratorError> {
    cfg.validate()?;
    ckpt.check_cond(cond)?;
    if cfg.max_len > ckpt.config.max_len {
        return Err(GeneratorError::InvalidConfig(format!(
            "cfg.max_len {} exceeds checkpoint max_len {}",
            cfg.max_len, ckpt.config.max_len
        )));
    }
    let end = ckpt.vocab_k;
    if let Sampling::TopK { k, .. } = cfg.sampling {
        if k > end + 1 {
            return Err(GeneratorError::InvalidConfig(format!(
                "top-k k {} exceeds vocabulary {}",
                k,
                end + 1
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let cond_vec = cond_to_f64(cond);
    let mut tokens: Vec<usize> = Vec::new();
    loop {
        if tokens.len() == cfg.max_len {
            tokens.push(end);
            break;
        }
        let mut g = Graph::new();
        let bound = ckpt.params.bind(&mut g);
        let logits_var = forward_logits(&mut g, &bound, ckpt, &cond_vec, &tokens);
        let values = g.value(logits_var);
        let last = values.shape()[0] - 1;
        let logits = values
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .row(last)
            .to_vec();
        let next = match cfg.sampling {
            Sampling::Greedy => argmax(&logits),
            Sampling::TopK { k, temperature } => sample_top_k(&logits, k, temperature, &mut rng),
        };
        tokens.push(next);
        if next == end {
            break;
        }
    }
    TokenSequence::new(tokens, end, cfg.max_len)
}
