//! Teacher-forced training for the token generator, plus the continuous
//! baseline variant that regresses encoder features directly (no
//! quantization) — kept as an experiment flag for comparison runs.

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_checkpoint, write_checkpoint, CheckpointData, CheckpointKind};
use crate::codec::{CodecCheckpoint, LatentSequence};
use crate::data::PressureSequence;
use crate::embed::TextEmbedding;
use crate::nn::{Adam, Graph, ParamSet, Var};

use super::model::{blocks_forward, forward_logits, register_blocks, GeneratorConfig};
use super::{tokenize, GeneratorCheckpoint, GeneratorError};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorTrainConfig {
    pub model: GeneratorConfig,
    pub learning_rate: f64,
    /// Per-step multiplicative learning-rate decay.
    pub lr_decay: f64,
    pub steps: usize,
    /// Pairs per step; the whole corpus when it is smaller.
    pub batch_size: usize,
    pub seed: u64,
    /// Stop once the training loss drops below this.
    pub stop_at_loss: Option<f64>,
}

impl GeneratorTrainConfig {
    pub fn new(model: GeneratorConfig) -> Self {
        GeneratorTrainConfig {
            model,
            learning_rate: 1e-3,
            lr_decay: 0.999,
            steps: 1000,
            batch_size: 8,
            seed: 0,
            stop_at_loss: None,
        }
    }

    fn validate(&self) -> Result<(), GeneratorError> {
        self.model.validate()?;
        if self.steps == 0 || self.batch_size == 0 {
            return Err(GeneratorError::InvalidConfig(
                "steps and batch_size must be positive".into(),
            ));
        }
        let lr_ok = self.learning_rate.is_finite() && self.learning_rate > 0.0;
        let decay_ok = self.lr_decay > 0.0 && self.lr_decay <= 1.0;
        if !lr_ok || !decay_ok {
            return Err(GeneratorError::InvalidConfig(
                "learning_rate must be > 0 and lr_decay in (0, 1]".into(),
            ));
        }
        Ok(())
    }
}

pub struct TrainedGenerator {
    pub checkpoint: GeneratorCheckpoint,
    /// Mean next-token cross-entropy per step.
    pub history: Vec<f64>,
}

/// Train next-index prediction with teacher forcing over `(embedding,
/// sequence)` pairs. The codec stays frozen: it only tokenizes the targets.
pub fn train_generator(
    pairs: &[(TextEmbedding, PressureSequence)],
    codec: &CodecCheckpoint,
    cfg: &GeneratorTrainConfig,
) -> Result<TrainedGenerator, GeneratorError> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(GeneratorError::EmptyPairs);
    }
    let k = codec.codebook.len();
    let mut conds: Vec<Vec<f64>> = Vec::with_capacity(pairs.len());
    let mut targets: Vec<Vec<usize>> = Vec::with_capacity(pairs.len());
    for (emb, seq) in pairs {
        if emb.dim() != cfg.model.text_dim {
            return Err(GeneratorError::CondWidthMismatch {
                expected: cfg.model.text_dim,
                got: emb.dim(),
            });
        }
        let toks = tokenize(seq, codec)?;
        let n_indices = toks.indices().len();
        if n_indices > cfg.model.max_len {
            return Err(GeneratorError::SequenceTooLong {
                len: n_indices,
                max_len: cfg.model.max_len,
            });
        }
        conds.push(emb.vector.iter().map(|&v| v as f64).collect());
        targets.push(toks.tokens().to_vec());
    }

    let mut ckpt = GeneratorCheckpoint::init(cfg.model.clone(), k, cfg.seed)?;
    let mut opt = Adam::new(&ckpt.params, cfg.learning_rate, cfg.lr_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut history = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let batch: Vec<usize> = if cfg.batch_size >= pairs.len() {
            (0..pairs.len()).collect()
        } else {
            (0..cfg.batch_size).map(|_| rng.gen_range(0..pairs.len())).collect()
        };
        let mut g = Graph::new();
        let bound = ckpt.params.bind(&mut g);
        let mut terms: Vec<Var> = Vec::with_capacity(batch.len());
        for &i in &batch {
            let toks = &targets[i];
            let fed = &toks[..toks.len() - 1];
            let logits = forward_logits(&mut g, &bound, &ckpt, &conds[i], fed);
            terms.push(g.softmax_cross_entropy(logits, toks));
        }
        let loss = mean_terms(&mut g, &terms);
        let value = g.value(loss)[[0]];
        if !value.is_finite() {
            return Err(GeneratorError::NonFiniteLoss { step });
        }
        history.push(value);
        g.backward(loss);
        opt.apply(&mut ckpt.params, &bound.grads(&g));
        if let Some(stop) = cfg.stop_at_loss {
            if value < stop {
                break;
            }
        }
    }
    Ok(TrainedGenerator { checkpoint: ckpt, history })
}

fn mean_terms(g: &mut Graph, terms: &[Var]) -> Var {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t);
    }
    g.scale(acc, 1.0 / terms.len() as f64)
}

// ---------------------------------------------------------------------------
// Continuous baseline
// ---------------------------------------------------------------------------

struct BaselineLayout {
    in_w: crate::nn::ParamId,
    in_b: crate::nn::ParamId,
    cond_w: crate::nn::ParamId,
    cond_b: crate::nn::ParamId,
    pos_emb: crate::nn::ParamId,
    blocks: Vec<super::model::BlockIds>,
    ln_f: (crate::nn::ParamId, crate::nn::ParamId),
    out_w: crate::nn::ParamId,
    out_b: crate::nn::ParamId,
}

/// Autoregressive regressor over raw encoder features: same transformer
/// body, but positions carry `D`-dimensional latents instead of embedded
/// token ids, trained with MSE and generated by feeding predictions back.
pub struct BaselineCheckpoint {
    config: GeneratorConfig,
    latent_dim: usize,
    params: ParamSet,
    layout: BaselineLayout,
    pub codec_hash: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct BaselineMeta {
    mode: String,
    config: GeneratorConfig,
    latent_dim: usize,
    codec_hash: Option<String>,
}

impl BaselineCheckpoint {
    pub fn init(config: GeneratorConfig, latent_dim: usize, seed: u64) -> Result<Self, GeneratorError> {
        config.validate()?;
        if latent_dim == 0 {
            return Err(GeneratorError::InvalidConfig("latent_dim must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let std = 0.02;
        let in_w = params.add("in.w", crate::nn::randn(&mut rng, &[latent_dim, config.width], std));
        let in_b = params.add("in.b", ndarray::Array1::zeros(config.width).into_dyn());
        let cond_w = params.add("cond.w", crate::nn::randn(&mut rng, &[config.text_dim, config.width], std));
        let cond_b = params.add("cond.b", ndarray::Array1::zeros(config.width).into_dyn());
        let pos_emb = params.add(
            "pos_emb",
            crate::nn::randn(&mut rng, &[config.max_len + 1, config.width], std),
        );
        let blocks = register_blocks(&mut params, &mut rng, config.layers, config.width);
        let ln_f = (
            params.add("ln_f.g", ndarray::Array1::ones(config.width).into_dyn()),
            params.add("ln_f.b", ndarray::Array1::zeros(config.width).into_dyn()),
        );
        let out_w = params.add("out.w", crate::nn::randn(&mut rng, &[config.width, latent_dim], std));
        let out_b = params.add("out.b", ndarray::Array1::zeros(latent_dim).into_dyn());
        Ok(Self {
            config,
            latent_dim,
            params,
            layout: BaselineLayout { in_w, in_b, cond_w, cond_b, pos_emb, blocks, ln_f, out_w, out_b },
            codec_hash: None,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    /// Rows `[cond] ++ in_proj(latents)`, through the blocks, projected back
    /// to latent width; output row `j` predicts latent `j`.
    fn forward(
        &self,
        g: &mut Graph,
        bound: &crate::nn::Bound,
        cond: &[f64],
        latents: &Array2<f64>,
    ) -> Var {
        let cond_row = g.leaf2(Array2::from_shape_vec((1, cond.len()), cond.to_vec()).unwrap());
        let cond_tok = {
            let y = g.matmul(cond_row, bound.var(self.layout.cond_w));
            g.add_bias_cols(y, bound.var(self.layout.cond_b))
        };
        let rows = if latents.nrows() == 0 {
            cond_tok
        } else {
            let lat = g.leaf2(latents.clone());
            let proj = g.matmul(lat, bound.var(self.layout.in_w));
            let proj = g.add_bias_cols(proj, bound.var(self.layout.in_b));
            g.concat_rows(&[cond_tok, proj])
        };
        let len = latents.nrows() + 1;
        let positions: Vec<usize> = (0..len).collect();
        let pos = g.embedding(bound.var(self.layout.pos_emb), &positions);
        let x = g.add(rows, pos);
        let x = blocks_forward(g, bound, &self.layout.blocks, self.config.heads, self.config.width, x);
        let x = g.layer_norm(x, bound.var(self.layout.ln_f.0), bound.var(self.layout.ln_f.1), 1e-5);
        let y = g.matmul(x, bound.var(self.layout.out_w));
        g.add_bias_cols(y, bound.var(self.layout.out_b))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), GeneratorError> {
        let meta = BaselineMeta {
            mode: "baseline".into(),
            config: self.config.clone(),
            latent_dim: self.latent_dim,
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

    pub fn load(path: &std::path::Path) -> Result<Self, GeneratorError> {
        let data = read_checkpoint(path)?;
        if data.kind != CheckpointKind::Generator {
            return Err(GeneratorError::InvalidConfig(format!(
                "{} is not a generator checkpoint",
                path.display()
            )));
        }
        let meta: BaselineMeta = serde_json::from_value(data.meta)
            .map_err(crate::checkpoint::CheckpointError::from)?;
        if meta.mode != "baseline" {
            return Err(GeneratorError::InvalidConfig(
                "checkpoint is not a baseline generator".into(),
            ));
        }
        let mut ckpt = Self::init(meta.config, meta.latent_dim, 0)?;
        ckpt.params
            .load_values(data.blobs)
            .map_err(GeneratorError::InvalidConfig)?;
        ckpt.codec_hash = meta.codec_hash;
        Ok(ckpt)
    }
}

pub struct TrainedBaseline {
    pub checkpoint: BaselineCheckpoint,
    pub history: Vec<f64>,
}

/// Train the continuous baseline on un-quantized encoder features.
pub fn train_baseline(
    pairs: &[(TextEmbedding, PressureSequence)],
    codec: &CodecCheckpoint,
    cfg: &GeneratorTrainConfig,
) -> Result<TrainedBaseline, GeneratorError> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(GeneratorError::EmptyPairs);
    }
    let d = codec.geometry().latent_dim;
    let mut conds: Vec<Vec<f64>> = Vec::with_capacity(pairs.len());
    let mut feats: Vec<Array2<f64>> = Vec::with_capacity(pairs.len());
    for (emb, seq) in pairs {
        if emb.dim() != cfg.model.text_dim {
            return Err(GeneratorError::CondWidthMismatch {
                expected: cfg.model.text_dim,
                got: emb.dim(),
            });
        }
        let lat = codec.encode(seq)?;
        if lat.len() > cfg.model.max_len {
            return Err(GeneratorError::SequenceTooLong {
                len: lat.len(),
                max_len: cfg.model.max_len,
            });
        }
        conds.push(emb.vector.iter().map(|&v| v as f64).collect());
        feats.push(lat.vectors);
    }

    let mut ckpt = BaselineCheckpoint::init(cfg.model.clone(), d, cfg.seed)?;
    let mut opt = Adam::new(&ckpt.params, cfg.learning_rate, cfg.lr_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut history = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let batch: Vec<usize> = if cfg.batch_size >= pairs.len() {
            (0..pairs.len()).collect()
        } else {
            (0..cfg.batch_size).map(|_| rng.gen_range(0..pairs.len())).collect()
        };
        let mut g = Graph::new();
        let bound = ckpt.params.bind(&mut g);
        let mut terms: Vec<Var> = Vec::with_capacity(batch.len());
        for &i in &batch {
            let target = &feats[i];
            let m = target.nrows();
            let fed = target.slice(ndarray::s![..m - 1, ..]).to_owned();
            let out = ckpt.forward(&mut g, &bound, &conds[i], &fed);
            // out has m rows; row j predicts latent j
            let out_t = g.transpose(out);
            let pred_t = g.slice_cols(out_t, 0, m);
            let target_t = g.leaf2(target.t().to_owned());
            let diff = g.sub(pred_t, target_t);
            let sq = g.mul(diff, diff);
            terms.push(g.mean_all(sq));
        }
        let loss = mean_terms(&mut g, &terms);
        let value = g.value(loss)[[0]];
        if !value.is_finite() {
            return Err(GeneratorError::NonFiniteLoss { step });
        }
        history.push(value);
        g.backward(loss);
        opt.apply(&mut ckpt.params, &bound.grads(&g));
        if let Some(stop) = cfg.stop_at_loss {
            if value < stop {
                break;
            }
        }
    }
    Ok(TrainedBaseline { checkpoint: ckpt, history })
}

/// Free-running baseline generation: predict `steps` latent vectors, feeding
/// each prediction back as input. Deterministic.
pub fn generate_baseline(
    cond: &TextEmbedding,
    steps: usize,
    downsample: usize,
    ckpt: &BaselineCheckpoint,
) -> Result<LatentSequence, GeneratorError> {
    if cond.dim() != ckpt.config.text_dim {
        return Err(GeneratorError::CondWidthMismatch {
            expected: ckpt.config.text_dim,
            got: cond.dim(),
        });
    }
    if steps == 0 || steps > ckpt.config.max_len {
        return Err(GeneratorError::InvalidConfig(format!(
            "steps must be in [1, {}]",
            ckpt.config.max_len
        )));
    }
    let cond_vec: Vec<f64> = cond.vector.iter().map(|&v| v as f64).collect();
    let mut latents = Array2::<f64>::zeros((0, ckpt.latent_dim));
    for _ in 0..steps {
        let mut g = Graph::new();
        let bound = ckpt.params.bind(&mut g);
        let out = ckpt.forward(&mut g, &bound, &cond_vec, &latents);
        let vals = g.value(out);
        let last = vals.shape()[0] - 1;
        let next = vals
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .row(last)
            .to_owned();
        let mut grown = Array2::zeros((latents.nrows() + 1, ckpt.latent_dim));
        grown.slice_mut(ndarray::s![..latents.nrows(), ..]).assign(&latents);
        grown.row_mut(latents.nrows()).assign(&next);
        latents = grown;
    }
    Ok(LatentSequence {
        vectors: latents,
        downsample,
        original_len: steps * downsample,
    })
}
