//! Codec training: straight-through gradients for the encoder/decoder,
//! EMA (or gradient-style) updates for the codebook, scheduled annealing of
//! the loss weights, Adam with multiplicative learning-rate decay, and early
//! stopping on held-out reconstruction error.

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::PressureSequence;
use crate::nn::{Adam, Graph, ParamSet, Var};

use super::model::{pad_time, sequence_to_channels, CodecModel};
use super::{
    anneal_fraction, anneal_weights, nearest_entries, quantize, AnnealSchedule, Codebook,
    CodecCheckpoint, CodecError, CodecGeometry, LossBreakdown,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CodecTrainConfig {
    pub geometry: CodecGeometry,
    pub schedule: AnnealSchedule,
    /// EMA codebook updates (the default); `false` switches to the plain
    /// gradient-style dictionary update used by the ablation.
    pub use_ema: bool,
    /// EMA horizon `N`; the smoothing factor is `2 / (N + 1)`.
    pub ema_horizon: usize,
    pub learning_rate: f64,
    /// Per-step multiplicative decay of the learning rate.
    pub lr_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Steps between validation evaluations.
    pub eval_every: usize,
    /// Evaluations without improvement before training stops; `None`
    /// disables early stopping.
    pub patience: Option<usize>,
}

impl CodecTrainConfig {
    pub fn new(geometry: CodecGeometry) -> Self {
        CodecTrainConfig {
            geometry,
            schedule: AnnealSchedule::hold_then_ramp(2000),
            use_ema: true,
            ema_horizon: 99,
            learning_rate: 1e-3,
            lr_decay: 0.999,
            steps: 2000,
            batch_size: 4,
            seed: 0,
            eval_every: 50,
            patience: Some(10),
        }
    }

    fn validate(&self) -> Result<(), CodecError> {
        self.geometry.validate()?;
        self.schedule.validate()?;
        if self.steps == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(CodecError::InvalidConfig(
                "steps, batch_size and eval_every must be positive".into(),
            ));
        }
        if self.ema_horizon == 0 {
            return Err(CodecError::InvalidConfig("ema_horizon must be >= 1".into()));
        }
        let lr_ok = self.learning_rate.is_finite() && self.learning_rate > 0.0;
        let decay_ok = self.lr_decay > 0.0 && self.lr_decay <= 1.0;
        if !lr_ok || !decay_ok {
            return Err(CodecError::InvalidConfig(
                "learning_rate must be > 0 and lr_decay in (0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// One validation measurement.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ValPoint {
    pub step: usize,
    pub mse: f64,
}

pub struct CodecTrainOutcome {
    pub checkpoint: CodecCheckpoint,
    pub history: Vec<LossBreakdown>,
    pub val_history: Vec<ValPoint>,
    pub best_val_mse: f64,
}

fn check_dataset(
    seqs: &[PressureSequence],
    geometry: &CodecGeometry,
) -> Result<(), CodecError> {
    if seqs.is_empty() {
        return Err(CodecError::EmptyDataset);
    }
    for s in seqs {
        if !s.normalized {
            return Err(CodecError::NotNormalized);
        }
        if s.height() != geometry.height || s.width() != geometry.width {
            return Err(CodecError::GeometryMismatch(format!(
                "sequence {} is {}x{}, config says {}x{}",
                s.activity_id,
                s.height(),
                s.width(),
                geometry.height,
                geometry.width
            )));
        }
    }
    Ok(())
}

/// Mean squared reconstruction error of the full encode-quantize-decode path
/// over all cells of `seqs`.
pub fn reconstruction_mse(
    ckpt: &CodecCheckpoint,
    seqs: &[PressureSequence],
) -> Result<f64, CodecError> {
    if seqs.is_empty() {
        return Err(CodecError::EmptyDataset);
    }
    let mut sum_sq = 0.0;
    let mut count = 0usize;
    for s in seqs {
        let lat = ckpt.encode(s)?;
        let (_, q, _) = quantize(&lat, &ckpt.codebook)?;
        let y = ckpt.decode(&q)?;
        for (fa, fb) in s.frames.iter().zip(y.frames.iter()) {
            for (&a, &b) in fa.grid().iter().zip(fb.grid().iter()) {
                let d = a as f64 - b as f64;
                sum_sq += d * d;
                count += 1;
            }
        }
    }
    Ok(sum_sq / count as f64)
}

/// Train on `train`, early-stopping against `val` (pass an empty slice to
/// train for the full step budget). Returns the checkpoint that scored the
/// best validation reconstruction MSE.
pub fn train_codec(
    train: &[PressureSequence],
    val: &[PressureSequence],
    cfg: &CodecTrainConfig,
) -> Result<CodecTrainOutcome, CodecError> {
    cfg.validate()?;
    check_dataset(train, &cfg.geometry)?;
    if !val.is_empty() {
        check_dataset(val, &cfg.geometry)?;
    }

    let mut model = CodecModel::new(cfg.geometry, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut codebook = Codebook::new(
        cfg.geometry.codebook_size,
        cfg.geometry.latent_dim,
        cfg.ema_horizon,
        &mut rng,
    )?;
    let mut opt = Adam::new(&model.params, cfg.learning_rate, cfg.lr_decay);

    // Precompute channel layouts; T may vary across sequences.
    let inputs: Vec<(Array2<f64>, usize)> = train
        .iter()
        .map(|s| {
            let x = sequence_to_channels(s);
            let t = x.ncols();
            (pad_time(&x, cfg.geometry.downsample), t)
        })
        .collect();
    let originals: Vec<Array2<f64>> = train.iter().map(sequence_to_channels).collect();

    let mut history = Vec::with_capacity(cfg.steps);
    let mut val_history = Vec::new();
    let mut best: Option<(f64, ParamSet, Codebook)> = None;
    let mut stale_evals = 0usize;

    for step in 0..cfg.steps {
        let (w_r, w_q) = anneal_weights(step, &cfg.schedule);
        let anneal_frac = anneal_fraction(step, &cfg.schedule);
        let batch: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rng.gen_range(0..train.len()))
            .collect();

        let mut g = Graph::new();
        let bound = model.params.bind(&mut g);
        let mut recon_terms: Vec<Var> = Vec::with_capacity(batch.len());
        let mut commit_terms: Vec<Var> = Vec::with_capacity(batch.len());
        let mut batch_latents: Vec<Array2<f64>> = Vec::with_capacity(batch.len());
        let mut batch_indices: Vec<usize> = Vec::new();

        for &item in &batch {
            let (x_pad, t) = &inputs[item];
            let x_var = g.leaf2(x_pad.clone());
            let enc = model.encode_on(&mut g, &bound, x_var);
            let lat_t = g.transpose(enc); // (n, D)

            let lat_values = g
                .value(lat_t)
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
                .to_owned();
            let (indices, quantized, _) = nearest_entries(&lat_values, codebook.entries());
            let n_lat = lat_values.nrows();

            // commitment: mean_t || lat_t - sg(e_{i_t}) ||^2
            let q_const = g.leaf2(quantized.clone());
            let diff = g.sub(lat_t, q_const);
            let sq = g.mul(diff, diff);
            let sum = g.sum_all(sq);
            commit_terms.push(g.scale(sum, 1.0 / n_lat as f64));

            // The schedule also sets how much quantization the decoder
            // sees: lat + frac * sg(q - lat). Through the hold phase this
            // is a plain autoencoder (the content pathway must form before
            // the dictionary constrains it); once the ramp completes the
            // decoder consumes exactly the quantized latent, matching
            // inference. Gradients pass straight through at every stage.
            let dec_values = &lat_values * (1.0 - anneal_frac) + &quantized * anneal_frac;
            let st = g.straight_through(lat_t, dec_values);
            let dec_in = g.transpose(st);
            let x_hat = model.decode_on(&mut g, &bound, dec_in);
            let x_hat_trim = g.slice_cols(x_hat, 0, *t);
            let target = g.leaf2(originals[item].clone());
            let d = g.sub(x_hat_trim, target);
            let dsq = g.mul(d, d);
            recon_terms.push(g.mean_all(dsq));

            batch_latents.push(lat_values);
            batch_indices.extend(indices);
        }

        let recon_avg = average(&mut g, &recon_terms);
        let commit_avg = average(&mut g, &commit_terms);
        let recon_w = g.scale(recon_avg, w_r);
        let commit_w = g.scale(commit_avg, w_q);
        let total = g.add(recon_w, commit_w);

        let breakdown = LossBreakdown {
            total: g.value(total)[[0]],
            reconstruction: g.value(recon_avg)[[0]],
            quantization: g.value(commit_avg)[[0]],
            w_r,
            w_q,
            step,
        };
        if !breakdown.total.is_finite() {
            return Err(CodecError::NonFiniteLoss {
                step,
                reconstruction: breakdown.reconstruction,
                quantization: breakdown.quantization,
            });
        }
        history.push(breakdown);

        g.backward(total);
        let lr_now = opt.current_lr();
        opt.apply(&mut model.params, &bound.grads(&g));

        let all_latents = ndarray::concatenate(
            ndarray::Axis(0),
            &batch_latents.iter().map(|a| a.view()).collect::<Vec<_>>(),
        )
        .expect("latent widths all equal D");
        if cfg.use_ema {
            codebook.ema_update(&all_latents, &batch_indices, &mut rng)?;
        } else {
            codebook.sgd_update(&all_latents, &batch_indices, lr_now)?;
        }

        let last = step + 1 == cfg.steps;
        if !val.is_empty() && ((step + 1) % cfg.eval_every == 0 || last) {
            let snapshot = CodecCheckpoint::from_parts(
                CodecModel::new(cfg.geometry, 0).map(|mut m| {
                    m.params = model.params.clone();
                    m
                })?,
                codebook.clone(),
            );
            let mse = reconstruction_mse(&snapshot, val)?;
            val_history.push(ValPoint { step, mse });
            let improved = best.as_ref().map(|(b, _, _)| mse < *b).unwrap_or(true);
            if improved {
                best = Some((mse, model.params.clone(), codebook.clone()));
                stale_evals = 0;
            } else {
                stale_evals += 1;
                if let Some(patience) = cfg.patience {
                    if stale_evals >= patience {
                        break;
                    }
                }
            }
        }
    }

    let (best_val_mse, final_params, final_codebook) = match best {
        Some((mse, p, cb)) => (mse, p, cb),
        None => (f64::NAN, model.params.clone(), codebook),
    };
    let mut final_model = CodecModel::new(cfg.geometry, 0)?;
    final_model.params = final_params;
    Ok(CodecTrainOutcome {
        checkpoint: CodecCheckpoint::from_parts(final_model, final_codebook),
        history,
        val_history,
        best_val_mse,
    })
}

/// K-fold training: deterministic shuffle, contiguous folds, one checkpoint
/// per fold validated on its held-out chunk.
pub fn train_codec_kfold(
    seqs: &[PressureSequence],
    cfg: &CodecTrainConfig,
    folds: usize,
) -> Result<Vec<CodecTrainOutcome>, CodecError> {
    if folds < 2 {
        return Err(CodecError::InvalidConfig("k-fold needs at least 2 folds".into()));
    }
    if seqs.len() < folds {
        return Err(CodecError::InvalidConfig(format!(
            "{} sequences cannot fill {folds} folds",
            seqs.len()
        )));
    }
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    use rand::seq::SliceRandom;
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));

    let base = seqs.len() / folds;
    let extra = seqs.len() % folds;
    let mut outcomes = Vec::with_capacity(folds);
    let mut cursor = 0usize;
    for fold in 0..folds {
        let size = base + usize::from(fold < extra);
        let val_idx: Vec<usize> = order[cursor..cursor + size].to_vec();
        cursor += size;
        let val: Vec<PressureSequence> =
            val_idx.iter().map(|&i| seqs[i].clone()).collect();
        let train: Vec<PressureSequence> = order
            .iter()
            .filter(|i| !val_idx.contains(i))
            .map(|&i| seqs[i].clone())
            .collect();
        let fold_cfg = CodecTrainConfig {
            seed: cfg.seed.wrapping_add(fold as u64),
            ..cfg.clone()
        };
        outcomes.push(train_codec(&train, &val, &fold_cfg)?);
    }
    Ok(outcomes)
}

fn average(g: &mut Graph, terms: &[Var]) -> Var {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t);
    }
    g.scale(acc, 1.0 / terms.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{normalize, synth_sequences, ActivityClass, SynthConfig};

    fn toy_dataset(n_per_class: usize, t: usize, seed: u64) -> Vec<PressureSequence> {
        let cfg = SynthConfig {
            sequences_per_class: n_per_class,
            frames_per_sequence: t,
            height: 8,
            width: 4,
            seed,
            classes: vec![ActivityClass::Basic, ActivityClass::Yoga],
            ..Default::default()
        };
        synth_sequences(&cfg)
            .unwrap()
            .iter()
            .map(|s| normalize(s).unwrap())
            .collect()
    }

    fn toy_cfg(steps: usize, seed: u64) -> CodecTrainConfig {
        let mut cfg = CodecTrainConfig::new(CodecGeometry {
            height: 8,
            width: 4,
            downsample: 4,
            latent_dim: 8,
            codebook_size: 16,
            hidden: 16,
            residual_blocks: 1,
            input_gain: 16.0,
        });
        cfg.steps = steps;
        cfg.seed = seed;
        cfg.batch_size = 2;
        cfg.schedule = AnnealSchedule {
            warmup_steps: 50,
            ..AnnealSchedule::default()
        };
        cfg
    }

    #[test]
    fn loss_descends_on_toy_data() {
        let data = toy_dataset(4, 24, 5);
        let out = train_codec(&data, &[], &toy_cfg(200, 1)).unwrap();
        let first = out.history.first().unwrap().reconstruction;
        let last = out.history.last().unwrap().reconstruction;
        assert!(
            last < first,
            "reconstruction did not descend: {first} -> {last}"
        );
    }

    #[test]
    fn same_seed_same_history() {
        let data = toy_dataset(2, 16, 9);
        let a = train_codec(&data, &[], &toy_cfg(40, 2)).unwrap();
        let b = train_codec(&data, &[], &toy_cfg(40, 2)).unwrap();
        for (x, y) in a.history.iter().zip(b.history.iter()) {
            assert_eq!(x.total, y.total);
            assert_eq!(x.reconstruction, y.reconstruction);
            assert_eq!(x.quantization, y.quantization);
        }
    }

    #[test]
    fn logged_total_decomposes_exactly() {
        let data = toy_dataset(2, 16, 3);
        let out = train_codec(&data, &[], &toy_cfg(60, 4)).unwrap();
        for b in &out.history {
            let expect = b.w_r * b.reconstruction + b.w_q * b.quantization;
            let denom = b.total.abs().max(1e-12);
            assert!(
                ((b.total - expect) / denom).abs() < 1e-6,
                "step {}: total {} vs {}",
                b.step,
                b.total,
                expect
            );
        }
    }

    #[test]
    fn kfold_produces_fold_count_checkpoints() {
        let data = toy_dataset(10, 8, 7); // 20 sequences
        let mut cfg = toy_cfg(6, 0);
        cfg.eval_every = 3;
        let outs = train_codec_kfold(&data, &cfg, 10).unwrap();
        assert_eq!(outs.len(), 10);
        for o in &outs {
            assert!(o.best_val_mse.is_finite());
            // each fold validated on 2 held-out sequences
            assert!(!o.val_history.is_empty());
        }
    }

    #[test]
    fn decoder_gradients_match_central_differences() {
        use super::super::model::{pad_time, sequence_to_channels, CodecModel};
        use crate::nn::{Graph, ParamSet};
        use rand::Rng;
        use rand::SeedableRng;
        use rand_chacha::ChaCha8Rng;

        let geometry = CodecGeometry {
            height: 4,
            width: 4,
            downsample: 4,
            latent_dim: 8,
            codebook_size: 8,
            hidden: 8,
            residual_blocks: 1,
            input_gain: 16.0,
        };
        let model = CodecModel::new(geometry, 42).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let codebook = Codebook::new(8, 8, 99, &mut rng).unwrap();

        let data_cfg = crate::data::SynthConfig {
            sequences_per_class: 1,
            frames_per_sequence: 8,
            height: 4,
            width: 4,
            seed: 3,
            classes: vec![crate::data::ActivityClass::Workout],
            ..Default::default()
        };
        let seq = crate::data::normalize(
            &crate::data::synth_sequences(&data_cfg).unwrap().remove(0),
        )
        .unwrap();
        let x_pad = pad_time(&sequence_to_channels(&seq), 4);
        let x_orig = sequence_to_channels(&seq);
        let t = x_orig.ncols();

        // reconstruction loss through the full quantized path; the encoder
        // is untouched by decoder perturbations so the assignment is fixed
        let loss_of = |params: &ParamSet| -> f64 {
            let mut g = Graph::new();
            let bound = params.bind(&mut g);
            let x_var = g.leaf2(x_pad.clone());
            let enc = model.encode_on(&mut g, &bound, x_var);
            let lat_t = g.transpose(enc);
            let lat_values = g
                .value(lat_t)
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
                .to_owned();
            let (_, quantized, _) = nearest_entries(&lat_values, codebook.entries());
            let st = g.straight_through(lat_t, quantized);
            let dec_in = g.transpose(st);
            let x_hat = model.decode_on(&mut g, &bound, dec_in);
            let x_hat_trim = g.slice_cols(x_hat, 0, t);
            let target = g.leaf2(x_orig.clone());
            let d = g.sub(x_hat_trim, target);
            let sq = g.mul(d, d);
            let loss = g.mean_all(sq);
            g.value(loss)[[0]]
        };

        // analytic gradients from one backward pass
        let mut g = Graph::new();
        let bound = model.params.bind(&mut g);
        let x_var = g.leaf2(x_pad.clone());
        let enc = model.encode_on(&mut g, &bound, x_var);
        let lat_t = g.transpose(enc);
        let lat_values = g
            .value(lat_t)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned();
        let (_, quantized, _) = nearest_entries(&lat_values, codebook.entries());
        let st = g.straight_through(lat_t, quantized);
        let dec_in = g.transpose(st);
        let x_hat = model.decode_on(&mut g, &bound, dec_in);
        let x_hat_trim = g.slice_cols(x_hat, 0, t);
        let target = g.leaf2(x_orig.clone());
        let d = g.sub(x_hat_trim, target);
        let sq = g.mul(d, d);
        let loss = g.mean_all(sq);
        g.backward(loss);
        let grads = bound.grads(&g);

        let decoder_params: Vec<usize> = model
            .params
            .iter()
            .enumerate()
            .filter(|(_, (name, _))| name.starts_with("dec."))
            .map(|(i, _)| i)
            .collect();

        let h = 1e-6;
        let mut checked = 0;
        let mut check_rng = ChaCha8Rng::seed_from_u64(99);
        while checked < 10 {
            let pi = decoder_params[check_rng.gen_range(0..decoder_params.len())];
            let (name, value) = model.params.iter().nth(pi).unwrap();
            let coord = check_rng.gen_range(0..value.len());
            let analytic = *grads[pi].iter().nth(coord).unwrap();

            let mut plus = model.params.clone();
            *plus.value_at_mut(pi).iter_mut().nth(coord).unwrap() += h;
            let mut minus = model.params.clone();
            *minus.value_at_mut(pi).iter_mut().nth(coord).unwrap() -= h;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);

            let denom = analytic.abs().max(fd.abs()).max(1e-8);
            assert!(
                (fd - analytic).abs() / denom < 1e-4,
                "{name}[{coord}]: fd={fd}, analytic={analytic}"
            );
            checked += 1;
        }
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(matches!(
            train_codec(&[], &[], &toy_cfg(10, 0)),
            Err(CodecError::EmptyDataset)
        ));
    }

    #[test]
    fn unnormalized_dataset_rejected() {
        let cfg = SynthConfig {
            sequences_per_class: 1,
            frames_per_sequence: 8,
            height: 8,
            width: 4,
            seed: 0,
            classes: vec![ActivityClass::Basic],
            ..Default::default()
        };
        let raw = synth_sequences(&cfg).unwrap();
        assert!(matches!(
            train_codec(&raw, &[], &toy_cfg(10, 0)),
            Err(CodecError::NotNormalized)
        ));
    }
}
