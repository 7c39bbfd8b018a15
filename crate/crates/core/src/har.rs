//! Downstream human-activity-recognition harness.
//!
//! Sequences are cut into fixed-length sliding windows, a small 1-D
//! convolutional classifier is trained per experiment run, and macro F1 on a
//! held-out evaluation set is reported per training-set recipe (synthetic
//! only, real-proxy only, combined, or combined with an extra augmented
//! slot), mean ± std over repetitions.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{read_checkpoint, write_checkpoint, CheckpointData, CheckpointKind};
use crate::data::{ActivityClass, PressureSequence};
use crate::metrics::{macro_f1, MetricReport, MetricReportConfig};
use crate::nn::{he_init, Adam, Bound, Graph, ParamId, ParamSet, Var};

#[derive(Debug, Error)]
pub enum HarError {
    #[error("windows require normalized sequences")]
    NotNormalized,
    #[error("no usable windows (every sequence shorter than the window)")]
    NoWindows,
    #[error("training needs at least 2 classes, got {0}")]
    SingleClass(usize),
    #[error("example geometry {got} does not match model {expected}")]
    GeometryMismatch { expected: String, got: String },
    #[error("class {0} not known to the model")]
    UnknownClass(String),
    #[error("empty example list")]
    EmptyExamples,
    #[error("training and evaluation sets overlap on sequence ids: {0:?}")]
    Leakage(Vec<String>),
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(usize),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] crate::checkpoint::CheckpointError),
}

/// One fixed-length training window: flattened frames over time plus the
/// label inherited from the source sequence.
#[derive(Debug, Clone)]
pub struct HarExample {
    /// `(H*W, window_len)` channel layout, normalized cells.
    pub features: Array2<f64>,
    pub label: ActivityClass,
    /// Identity of the source sequence, for leakage checks.
    pub sequence_id: String,
    pub height: usize,
    pub width: usize,
}

/// Cut every sequence into sliding windows of `window_len` frames advancing
/// by `stride`. Sequences shorter than the window are skipped with a
/// warning.
pub fn windowize(
    seqs: &[PressureSequence],
    window_len: usize,
    stride: usize,
) -> Result<Vec<HarExample>, HarError> {
    if window_len == 0 || stride == 0 {
        return Err(HarError::InvalidConfig("window_len and stride must be positive".into()));
    }
    let mut out = Vec::new();
    for seq in seqs {
        if !seq.normalized {
            return Err(HarError::NotNormalized);
        }
        if seq.len() < window_len {
            log::warn!(
                "sequence {} has {} frames, shorter than window {window_len}; skipped",
                seq.activity_id,
                seq.len()
            );
            continue;
        }
        let c = seq.height() * seq.width();
        let mut start = 0;
        while start + window_len <= seq.len() {
            let mut features = Array2::zeros((c, window_len));
            for (col, frame) in seq.frames[start..start + window_len].iter().enumerate() {
                for (i, &v) in frame.grid().iter().enumerate() {
                    features[[i, col]] = v as f64;
                }
            }
            out.push(HarExample {
                features,
                label: seq.class_label,
                sequence_id: seq.activity_id.clone(),
                height: seq.height(),
                width: seq.width(),
            });
            start += stride;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HarTrainConfig {
    pub hidden: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Fraction of examples carved off for early stopping.
    pub val_fraction: f64,
    pub eval_every: usize,
    pub patience: Option<usize>,
}

impl Default for HarTrainConfig {
    fn default() -> Self {
        HarTrainConfig {
            hidden: 32,
            learning_rate: 1e-3,
            lr_decay: 0.999,
            steps: 400,
            batch_size: 16,
            seed: 0,
            val_fraction: 0.15,
            eval_every: 25,
            patience: Some(6),
        }
    }
}

struct HarLayout {
    conv1_w: ParamId,
    conv1_b: ParamId,
    conv2_w: ParamId,
    conv2_b: ParamId,
    head_w: ParamId,
    head_b: ParamId,
}

/// Convolutional window classifier.
pub struct HarModel {
    pub classes: Vec<ActivityClass>,
    pub height: usize,
    pub width: usize,
    pub window_len: usize,
    hidden: usize,
    params: ParamSet,
    layout: HarLayout,
}

#[derive(Serialize, Deserialize)]
struct HarMeta {
    classes: Vec<ActivityClass>,
    height: usize,
    width: usize,
    window_len: usize,
    hidden: usize,
}

impl HarModel {
    fn init(
        classes: Vec<ActivityClass>,
        height: usize,
        width: usize,
        window_len: usize,
        hidden: usize,
        seed: u64,
    ) -> Self {
        let c = height * width;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let conv1_w = params.add("conv1.w", he_init(&mut rng, hidden, c * 3, c * 3).into_dyn());
        let conv1_b = params.add("conv1.b", Array1::zeros(hidden).into_dyn());
        let conv2_w = params.add(
            "conv2.w",
            he_init(&mut rng, hidden, hidden * 3, hidden * 3).into_dyn(),
        );
        let conv2_b = params.add("conv2.b", Array1::zeros(hidden).into_dyn());
        let head_w = params.add(
            "head.w",
            crate::nn::randn(&mut rng, &[hidden, classes.len()], 0.05),
        );
        let head_b = params.add("head.b", Array1::zeros(classes.len()).into_dyn());
        Self {
            classes,
            height,
            width,
            window_len,
            hidden,
            params,
            layout: HarLayout { conv1_w, conv1_b, conv2_w, conv2_b, head_w, head_b },
        }
    }

    fn logits_on(&self, g: &mut Graph, bound: &Bound, x: Var) -> Var {
        let h = g.conv1d(x, bound.var(self.layout.conv1_w), 3, 1, 1);
        let h = g.add_bias_rows(h, bound.var(self.layout.conv1_b));
        let h = g.relu(h);
        let h = g.conv1d(h, bound.var(self.layout.conv2_w), 3, 2, 1);
        let h = g.add_bias_rows(h, bound.var(self.layout.conv2_b));
        let h = g.relu(h);
        let pooled = g.mean_cols(h);
        let flat = g.transpose(pooled);
        let y = g.matmul(flat, bound.var(self.layout.head_w));
        g.add_bias_cols(y, bound.var(self.layout.head_b))
    }

    fn check_example(&self, e: &HarExample) -> Result<(), HarError> {
        if e.height != self.height
            || e.width != self.width
            || e.features.ncols() != self.window_len
        {
            return Err(HarError::GeometryMismatch {
                expected: format!("{}x{} window {}", self.height, self.width, self.window_len),
                got: format!("{}x{} window {}", e.height, e.width, e.features.ncols()),
            });
        }
        if !self.classes.contains(&e.label) {
            return Err(HarError::UnknownClass(e.label.to_string()));
        }
        Ok(())
    }

    pub fn predict(&self, example: &HarExample) -> Result<ActivityClass, HarError> {
        self.check_example(example)?;
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let x = g.leaf2(example.features.clone());
        let logits = self.logits_on(&mut g, &bound, x);
        let row = g.value(logits);
        let mut best = 0usize;
        let mut best_v = f64::NEG_INFINITY;
        for (i, &v) in row.iter().enumerate() {
            if v > best_v {
                best_v = v;
                best = i;
            }
        }
        Ok(self.classes[best])
    }

    /// Deterministic digest of the parameter values; determinism checks
    /// compare this across runs.
    pub fn params_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for (name, value) in self.params.iter() {
            hasher.update(name.as_bytes());
            for &v in value.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<(), HarError> {
        let meta = HarMeta {
            classes: self.classes.clone(),
            height: self.height,
            width: self.width,
            window_len: self.window_len,
            hidden: self.hidden,
        };
        write_checkpoint(
            path,
            &CheckpointData {
                kind: CheckpointKind::Har,
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

    pub fn load(path: &Path) -> Result<Self, HarError> {
        let data = read_checkpoint(path)?;
        if data.kind != CheckpointKind::Har {
            return Err(HarError::InvalidConfig(format!(
                "{} is not a HAR checkpoint",
                path.display()
            )));
        }
        let meta: HarMeta = serde_json::from_value(data.meta)
            .map_err(crate::checkpoint::CheckpointError::from)?;
        let mut model = Self::init(
            meta.classes,
            meta.height,
            meta.width,
            meta.window_len,
            meta.hidden,
            0,
        );
        model.params.load_values(data.blobs).map_err(HarError::InvalidConfig)?;
        Ok(model)
    }
}

/// Train the window classifier with cross-entropy, early-stopping on a
/// carved-off validation slice.
pub fn train_har(examples: &[HarExample], cfg: &HarTrainConfig) -> Result<HarModel, HarError> {
    if examples.is_empty() {
        return Err(HarError::EmptyExamples);
    }
    if cfg.steps == 0 || cfg.batch_size == 0 || cfg.eval_every == 0 || cfg.hidden == 0 {
        return Err(HarError::InvalidConfig(
            "steps, batch_size, eval_every and hidden must be positive".into(),
        ));
    }
    let classes: Vec<ActivityClass> = examples
        .iter()
        .map(|e| e.label)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if classes.len() < 2 {
        return Err(HarError::SingleClass(classes.len()));
    }
    let (h, w, wl) = (examples[0].height, examples[0].width, examples[0].features.ncols());
    for e in examples {
        if e.height != h || e.width != w || e.features.ncols() != wl {
            return Err(HarError::GeometryMismatch {
                expected: format!("{h}x{w} window {wl}"),
                got: format!("{}x{} window {}", e.height, e.width, e.features.ncols()),
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((examples.len() as f64 * cfg.val_fraction) as usize)
        .min(examples.len().saturating_sub(1));
    let (val_idx, train_idx) = order.split_at(n_val);

    let mut model = HarModel::init(classes, h, w, wl, cfg.hidden, cfg.seed.wrapping_add(1));
    let mut opt = Adam::new(&model.params, cfg.learning_rate, cfg.lr_decay);
    let class_of = |e: &HarExample| {
        model
            .classes
            .iter()
            .position(|c| *c == e.label)
            .expect("label checked above")
    };

    let mut best: Option<(f64, ParamSet)> = None;
    let mut stale = 0usize;
    for step in 0..cfg.steps {
        let batch: Vec<usize> = (0..cfg.batch_size)
            .map(|_| train_idx[rng.gen_range(0..train_idx.len())])
            .collect();
        let mut g = Graph::new();
        let bound = model.params.bind(&mut g);
        let mut terms: Vec<Var> = Vec::with_capacity(batch.len());
        for &i in &batch {
            let x = g.leaf2(examples[i].features.clone());
            let logits = model.logits_on(&mut g, &bound, x);
            terms.push(g.softmax_cross_entropy(logits, &[class_of(&examples[i])]));
        }
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = g.add(acc, t);
        }
        let loss = g.scale(acc, 1.0 / terms.len() as f64);
        let value = g.value(loss)[[0]];
        if !value.is_finite() {
            return Err(HarError::NonFiniteLoss(step));
        }
        g.backward(loss);
        opt.apply(&mut model.params, &bound.grads(&g));

        let last = step + 1 == cfg.steps;
        if !val_idx.is_empty() && ((step + 1) % cfg.eval_every == 0 || last) {
            let mut ce = 0.0;
            for &i in val_idx {
                let mut gv = Graph::new();
                let bv = model.params.bind(&mut gv);
                let x = gv.leaf2(examples[i].features.clone());
                let logits = model.logits_on(&mut gv, &bv, x);
                let l = gv.softmax_cross_entropy(logits, &[class_of(&examples[i])]);
                ce += gv.value(l)[[0]];
            }
            ce /= val_idx.len() as f64;
            let improved = best.as_ref().map(|(b, _)| ce < *b).unwrap_or(true);
            if improved {
                best = Some((ce, model.params.clone()));
                stale = 0;
            } else {
                stale += 1;
                if let Some(p) = cfg.patience {
                    if stale >= p {
                        break;
                    }
                }
            }
        }
    }
    if let Some((_, params)) = best {
        model.params = params;
    }
    Ok(model)
}

/// Window-level macro F1 of `model` on `examples`, with per-class breakdown
/// in the report config.
pub fn eval_har(model: &HarModel, examples: &[HarExample]) -> Result<MetricReport, HarError> {
    if examples.is_empty() {
        return Err(HarError::EmptyExamples);
    }
    let mut predicted = Vec::with_capacity(examples.len());
    let mut truth = Vec::with_capacity(examples.len());
    for e in examples {
        predicted.push(model.predict(e)?);
        truth.push(e.label);
    }
    let scores = macro_f1(&predicted, &truth, &model.classes)?;
    let per_class = scores
        .per_class
        .iter()
        .map(|(c, f)| (c.to_string(), *f))
        .collect();
    Ok(MetricReport {
        fid: None,
        r2: None,
        binarized_r2: None,
        macro_f1: Some(scores.macro_f1),
        config: MetricReportConfig {
            per_class_f1: Some(per_class),
            absent_classes: if scores.absent.is_empty() {
                None
            } else {
                Some(scores.absent.iter().map(|c| c.to_string()).collect())
            },
            real_samples: Some(examples.len()),
            ..Default::default()
        },
    })
}

/// One named training set.
pub struct RecipeData {
    pub name: String,
    pub sequences: Vec<PressureSequence>,
}

/// A full experiment: recipes x repetitions against one evaluation set.
pub struct ExperimentData {
    pub recipes: Vec<RecipeData>,
    pub eval: Vec<PressureSequence>,
    pub window_len: usize,
    pub stride: usize,
    /// One training seed per repetition.
    pub seeds: Vec<u64>,
    pub train: HarTrainConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecipeAggregate {
    pub recipe: String,
    pub mean_macro_f1: f64,
    /// Sample standard deviation over repetitions (0 for one repetition).
    pub std_macro_f1: f64,
    pub repetitions: usize,
}

pub struct ExperimentOutcome {
    pub reports: Vec<MetricReport>,
    pub aggregates: Vec<RecipeAggregate>,
}

/// Run every recipe x repetition and aggregate mean ± std per recipe.
///
/// Sequence ids (`activity_id`) are the leakage key: any id shared between a
/// recipe and the evaluation set aborts before training starts.
pub fn run_experiment(plan: &ExperimentData) -> Result<ExperimentOutcome, HarError> {
    if plan.recipes.is_empty() || plan.eval.is_empty() || plan.seeds.is_empty() {
        return Err(HarError::InvalidConfig(
            "recipes, eval set and seeds must all be non-empty".into(),
        ));
    }
    let eval_ids: BTreeSet<&str> = plan.eval.iter().map(|s| s.activity_id.as_str()).collect();
    for recipe in &plan.recipes {
        let leaked: Vec<String> = recipe
            .sequences
            .iter()
            .filter(|s| eval_ids.contains(s.activity_id.as_str()))
            .map(|s| s.activity_id.clone())
            .collect();
        if !leaked.is_empty() {
            return Err(HarError::Leakage(leaked));
        }
    }

    let eval_windows = windowize(&plan.eval, plan.window_len, plan.stride)?;
    if eval_windows.is_empty() {
        return Err(HarError::NoWindows);
    }

    let mut reports = Vec::new();
    let mut aggregates = Vec::new();
    for recipe in &plan.recipes {
        let windows = windowize(&recipe.sequences, plan.window_len, plan.stride)?;
        if windows.is_empty() {
            return Err(HarError::NoWindows);
        }
        let mut scores = Vec::with_capacity(plan.seeds.len());
        for &seed in &plan.seeds {
            let cfg = HarTrainConfig { seed, ..plan.train.clone() };
            let model = train_har(&windows, &cfg)?;
            let mut report = eval_har(&model, &eval_windows)?;
            report.config.seed = Some(seed);
            report.config.recipe = Some(recipe.name.clone());
            scores.push(report.macro_f1.expect("eval_har sets macro_f1"));
            reports.push(report);
        }
        let n = scores.len();
        let mean = scores.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        aggregates.push(RecipeAggregate {
            recipe: recipe.name.clone(),
            mean_macro_f1: mean,
            std_macro_f1: std,
            repetitions: n,
        });
    }
    Ok(ExperimentOutcome { reports, aggregates })
}
