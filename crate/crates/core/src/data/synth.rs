//! Procedural pressure-sequence synthesis.
//!
//! Each activity class is a parametric template of one to four elliptical
//! Gaussian contact blobs whose centers follow class-specific periodic
//! trajectories. Per-frame total pressure is rescaled to a constant target
//! (a body-weight proxy), so the classes differ in contact layout and
//! dynamics rather than total load. The templates:
//!
//! - `basic`   – two feet, alternating load, walking back and forth along
//!   the long axis of the mat;
//! - `dance`   – two feet on fast lissajous paths with lateral swing;
//! - `yoga`    – three nearly static contacts (two feet and one hand) with a
//!   slow sway;
//! - `workout` – four static contacts (hands and toes) with the load
//!   oscillating between the hand pair and the foot pair.
//!
//! Everything is a pure function of [`SynthConfig`]: the same config writes
//! byte-identical files.

use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    save_sequence, ActivityClass, DataError, DatasetManifest, ManifestEntry, PressureFrame,
    PressureSequence, PRESSURE_CEILING,
};

/// Contact-blob parameters of one activity class.
///
/// Radii and amplitude are fractions of the grid dimensions so the same
/// template renders sensibly on any grid size; `peak_pressure` is raw mmHg.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassTemplate {
    /// Gaussian sigma along rows, as a fraction of grid height.
    pub radius_y: f64,
    /// Gaussian sigma along columns, as a fraction of grid width.
    pub radius_x: f64,
    /// Peak cell pressure before per-frame rescaling, raw mmHg.
    pub peak_pressure: f64,
    /// How far blob centers travel, as a fraction of grid height.
    pub trajectory_amplitude: f64,
}

impl ClassTemplate {
    fn default_for(class: ActivityClass) -> Self {
        match class {
            ActivityClass::Basic => ClassTemplate {
                radius_y: 0.06,
                radius_x: 0.14,
                peak_pressure: 2500.0,
                trajectory_amplitude: 0.28,
            },
            ActivityClass::Dance => ClassTemplate {
                radius_y: 0.06,
                radius_x: 0.14,
                peak_pressure: 2200.0,
                trajectory_amplitude: 0.18,
            },
            ActivityClass::Yoga => ClassTemplate {
                radius_y: 0.08,
                radius_x: 0.18,
                peak_pressure: 1800.0,
                trajectory_amplitude: 0.02,
            },
            ActivityClass::Workout => ClassTemplate {
                radius_y: 0.07,
                radius_x: 0.16,
                peak_pressure: 2000.0,
                trajectory_amplitude: 0.04,
            },
        }
    }
}

/// Optional sensor imperfections, used to derive "real-proxy" datasets with
/// a controlled domain gap: multiplicative cell noise plus a contact floor
/// below which the mat reads zero.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SensorNoise {
    /// Multiplicative jitter: each cell is scaled by `1 + u`,
    /// `u ~ U(-jitter, jitter)`.
    pub jitter: f64,
    /// Cells below this raw value read as zero.
    pub floor: f64,
}

impl Default for SensorNoise {
    fn default() -> Self {
        SensorNoise { jitter: 0.1, floor: 50.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub sequences_per_class: usize,
    pub frames_per_sequence: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Classes to generate; defaults to all four.
    pub classes: Vec<ActivityClass>,
    /// Per-class template overrides keyed by class name.
    pub templates: std::collections::BTreeMap<String, ClassTemplate>,
    /// When set, render through a noisy sensor (real-proxy mode).
    pub noise: Option<SensorNoise>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            sequences_per_class: 3,
            frames_per_sequence: 120,
            height: super::CANONICAL_HEIGHT,
            width: super::CANONICAL_WIDTH,
            seed: 0,
            classes: ActivityClass::ALL.to_vec(),
            templates: Default::default(),
            noise: None,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.sequences_per_class == 0 {
            return Err(DataError::InvalidConfig("sequences_per_class must be >= 1".into()));
        }
        if self.frames_per_sequence == 0 {
            return Err(DataError::InvalidConfig("frames_per_sequence must be >= 1".into()));
        }
        if self.height == 0 || self.width == 0 {
            return Err(DataError::InvalidConfig("grid dimensions must be positive".into()));
        }
        if self.classes.is_empty() {
            return Err(DataError::InvalidConfig("classes must be non-empty".into()));
        }
        for class in &self.classes {
            let t = self.template(*class);
            if !(t.radius_y > 0.0 && t.radius_y <= 0.5 && t.radius_x > 0.0 && t.radius_x <= 0.5) {
                return Err(DataError::InvalidConfig(format!(
                    "{class}: blob radii must be in (0, 0.5] of the grid"
                )));
            }
            if t.peak_pressure <= 0.0 || t.peak_pressure > PRESSURE_CEILING as f64 {
                return Err(DataError::InvalidConfig(format!(
                    "{class}: peak_pressure must be in (0, {PRESSURE_CEILING}]"
                )));
            }
            if t.trajectory_amplitude < 0.0 || t.trajectory_amplitude > 0.5 {
                return Err(DataError::InvalidConfig(format!(
                    "{class}: trajectory_amplitude must be in [0, 0.5]"
                )));
            }
        }
        if let Some(n) = &self.noise {
            if n.jitter < 0.0 || n.jitter >= 1.0 {
                return Err(DataError::InvalidConfig("noise.jitter must be in [0, 1)".into()));
            }
        }
        Ok(())
    }

    pub fn template(&self, class: ActivityClass) -> ClassTemplate {
        self.templates
            .get(class.as_str())
            .cloned()
            .unwrap_or_else(|| ClassTemplate::default_for(class))
    }
}

/// A contact blob at one instant: center in unit coordinates plus a load
/// share in `[0, 1]`.
struct Contact {
    cy: f64,
    cx: f64,
    load: f64,
}

/// Per-sequence variation drawn once up front.
struct SeqJitter {
    phase: f64,
    freq_scale: f64,
    weight_scale: f64,
    offset_y: f64,
    offset_x: f64,
}

impl SeqJitter {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        SeqJitter {
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
            freq_scale: rng.gen_range(0.85..1.15),
            weight_scale: rng.gen_range(0.85..1.15),
            offset_y: rng.gen_range(-0.05..0.05),
            offset_x: rng.gen_range(-0.05..0.05),
        }
    }
}

/// Triangle wave with period 1 and range [-1, 1], `tri(0) = 0`.
fn tri(x: f64) -> f64 {
    let f = (x - 0.25).rem_euclid(1.0);
    if f < 0.5 {
        4.0 * f - 1.0
    } else {
        3.0 - 4.0 * f
    }
}

fn contacts_at(class: ActivityClass, tpl: &ClassTemplate, jit: &SeqJitter, u: f64) -> Vec<Contact> {
    use std::f64::consts::TAU;
    let amp = tpl.trajectory_amplitude;
    match class {
        ActivityClass::Basic => {
            // Walking: feet at +-dx, body travelling along rows, load
            // alternating at step frequency.
            let steps = 2.0 * jit.freq_scale;
            let y = 0.5 + jit.offset_y + amp * tri(steps * u + jit.phase / TAU);
            let sway = (TAU * steps * 2.0 * u + jit.phase).sin();
            let left = 0.5 + 0.45 * sway;
            vec![
                Contact { cy: y - 0.04, cx: 0.5 + jit.offset_x - 0.16, load: left },
                Contact { cy: y + 0.04, cx: 0.5 + jit.offset_x + 0.16, load: 1.0 - left },
            ]
        }
        ActivityClass::Dance => {
            // Quick lissajous steps with lateral swing.
            let f = 4.0 * jit.freq_scale;
            let y = 0.5 + jit.offset_y + amp * (TAU * f * u + jit.phase).sin();
            let swing = 0.14 * (TAU * f * 0.5 * u + jit.phase).cos();
            let hop = (TAU * f * 2.0 * u + jit.phase).sin();
            let left = 0.5 + 0.38 * hop;
            vec![
                Contact { cy: y, cx: 0.5 + jit.offset_x - 0.18 + swing, load: left },
                Contact { cy: -y + 1.0, cx: 0.5 + jit.offset_x + 0.18 + swing, load: 1.0 - left },
            ]
        }
        ActivityClass::Yoga => {
            // A held pose: two feet and one hand, slow sway.
            let sway = amp * (TAU * 0.5 * jit.freq_scale * u + jit.phase).sin();
            vec![
                Contact { cy: 0.70 + jit.offset_y + sway, cx: 0.38 + jit.offset_x, load: 0.38 },
                Contact { cy: 0.70 + jit.offset_y - sway, cx: 0.62 + jit.offset_x, load: 0.38 },
                Contact { cy: 0.28 + jit.offset_y + 0.5 * sway, cx: 0.5 + jit.offset_x, load: 0.24 },
            ]
        }
        ActivityClass::Workout => {
            // Push-ups: hands high on the mat, toes low, load pumping
            // between the pairs.
            let f = 1.5 * jit.freq_scale;
            let pump = 0.5 + 0.3 * (TAU * f * u + jit.phase).sin();
            let dip = amp * (TAU * f * u + jit.phase).cos();
            let hands = pump;
            let feet = 1.0 - pump;
            vec![
                Contact { cy: 0.30 + jit.offset_y + dip, cx: 0.34 + jit.offset_x, load: hands / 2.0 },
                Contact { cy: 0.30 + jit.offset_y + dip, cx: 0.66 + jit.offset_x, load: hands / 2.0 },
                Contact { cy: 0.82 + jit.offset_y, cx: 0.40 + jit.offset_x, load: feet / 2.0 },
                Contact { cy: 0.82 + jit.offset_y, cx: 0.60 + jit.offset_x, load: feet / 2.0 },
            ]
        }
    }
}

fn render_frame(
    contacts: &[Contact],
    tpl: &ClassTemplate,
    h: usize,
    w: usize,
    weight_scale: f64,
    noise: Option<(&SensorNoise, &mut ChaCha8Rng)>,
) -> Array2<f32> {
    let sy = (tpl.radius_y * h as f64).max(0.5);
    let sx = (tpl.radius_x * w as f64).max(0.5);
    let mut grid = Array2::<f64>::zeros((h, w));
    for c in contacts {
        let load = c.load.max(0.0);
        if load == 0.0 {
            continue;
        }
        let cy = c.cy.clamp(0.0, 1.0) * (h - 1) as f64;
        let cx = c.cx.clamp(0.0, 1.0) * (w - 1) as f64;
        for r in 0..h {
            let dy = (r as f64 - cy) / sy;
            let ey = (-0.5 * dy * dy).exp();
            for col in 0..w {
                let dx = (col as f64 - cx) / sx;
                grid[[r, col]] += load * ey * (-0.5 * dx * dx).exp();
            }
        }
    }
    // Rescale so each frame carries the same total load (body-weight proxy),
    // then cap at the sensor ceiling.
    let target = tpl.peak_pressure * std::f64::consts::TAU * sy * sx * weight_scale;
    let sum = grid.sum();
    if sum > 0.0 {
        grid *= target / sum;
    }
    let mut out = grid.mapv(|v| (v.min(PRESSURE_CEILING as f64)) as f32);
    if let Some((n, rng)) = noise {
        out.mapv_inplace(|v| {
            let jittered = v * (1.0 + rng.gen_range(-n.jitter..=n.jitter)) as f32;
            let clipped = if (jittered as f64) < n.floor { 0.0 } else { jittered };
            clipped.min(PRESSURE_CEILING)
        });
    }
    out
}

const DESCRIPTION_POOL: &[(ActivityClass, &[&str])] = &[
    (ActivityClass::Basic, &[
        "a person walks forward at a steady pace",
        "a person walks in place, shifting weight from foot to foot",
        "a person steps forward and then back again",
        "a person marches slowly lifting each knee",
        "a person paces back and forth across the mat",
        "a person takes slow deliberate steps forward",
    ]),
    (ActivityClass::Dance, &[
        "a person sways side to side in rhythm",
        "a person performs a quick two step dance",
        "a person hops lightly between their feet while dancing",
        "a person dances shifting weight rapidly side to side",
        "a person does a lively step touch dance move",
        "a person bounces on alternating feet to a fast beat",
    ]),
    (ActivityClass::Yoga, &[
        "a person holds a steady yoga pose with hands and feet planted",
        "a person balances in a wide stance yoga posture",
        "a person stays nearly still in a grounded yoga pose",
        "a person holds a downward facing stretch with light sway",
        "a person keeps a three point yoga stance with slow breathing",
        "a person settles into a supported yoga posture",
    ]),
    (ActivityClass::Workout, &[
        "a person performs push ups at a steady rhythm",
        "a person does press ups with hands and toes on the mat",
        "a person lowers and raises their body in a plank position",
        "a person pumps through push up repetitions",
        "a person exercises in a prone position shifting load to the arms",
        "a person works out doing slow controlled push ups",
    ]),
];

fn description_for(class: ActivityClass, rng: &mut ChaCha8Rng) -> String {
    let pool = DESCRIPTION_POOL
        .iter()
        .find(|(c, _)| *c == class)
        .map(|(_, d)| *d)
        .expect("every class has descriptions");
    pool[rng.gen_range(0..pool.len())].to_string()
}

/// Generate sequences in memory; a pure function of the config.
pub fn synth_sequences(cfg: &SynthConfig) -> Result<Vec<PressureSequence>, DataError> {
    cfg.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(cfg.classes.len() * cfg.sequences_per_class);
    for &class in &cfg.classes {
        let tpl = cfg.template(class);
        for idx in 0..cfg.sequences_per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(master.gen());
            let jit = SeqJitter::draw(&mut rng);
            let description = description_for(class, &mut rng);
            let mut frames = Vec::with_capacity(cfg.frames_per_sequence);
            for f in 0..cfg.frames_per_sequence {
                // One template period spans 120 frames regardless of the
                // configured length, so shorter sequences are prefixes.
                let u = f as f64 / 120.0;
                let contacts = contacts_at(class, &tpl, &jit, u);
                let grid = render_frame(
                    &contacts,
                    &tpl,
                    cfg.height,
                    cfg.width,
                    jit.weight_scale,
                    cfg.noise.as_ref().map(|n| (n, &mut rng)),
                );
                frames.push(PressureFrame::new(grid)?);
            }
            out.push(PressureSequence::new(
                frames,
                format!("{}-{idx:03}", class.as_str()),
                class,
                description,
                None,
                false,
            )?);
        }
    }
    Ok(out)
}

/// Synthesize a dataset directory: one `PSEQ1` file per sequence plus a
/// `manifest.json`. The config is validated before anything is written.
pub fn synth_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<DatasetManifest, DataError> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| DataError::Io { path: out_dir.to_path_buf(), source: e })?;
    let sequences = synth_sequences(cfg)?;
    let mut entries = Vec::with_capacity(sequences.len());
    for seq in &sequences {
        let file = format!("{}.pseq", seq.activity_id);
        save_sequence(seq, &out_dir.join(&file))?;
        entries.push(ManifestEntry {
            path: file,
            description: seq.description.clone(),
            class_label: seq.class_label,
            subject_id: seq.subject_id.clone(),
            frames: seq.len(),
        });
    }
    let manifest = DatasetManifest { entries, seed: cfg.seed, splits: None };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}
