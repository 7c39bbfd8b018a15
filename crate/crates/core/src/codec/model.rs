//! Encoder/decoder network and the codec checkpoint.
//!
//! Both halves are 1-D convolutional stacks over the time axis with frames
//! flattened to `H*W` channels. The encoder downsamples time with strided
//! convolutions (one stage per factor of two in `l`) followed by residual
//! blocks; the decoder mirrors it with nearest-neighbour upsampling. ReLU
//! everywhere, and the decoder output is clamped to `[0, 1]` when leaving
//! through the public `decode`.

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{
    read_checkpoint, write_checkpoint, CheckpointData, CheckpointKind,
};
use crate::data::{ActivityClass, PressureFrame, PressureSequence};
use crate::nn::{he_init, Bound, Graph, ParamId, ParamSet, Var};

use super::{CodecError, Codebook, LatentSequence};

/// Shape contract of a codec: grid size, temporal factor, latent width,
/// codebook size, and network capacity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodecGeometry {
    pub height: usize,
    pub width: usize,
    /// Temporal downsampling factor `l`; must be a power of two.
    pub downsample: usize,
    /// Latent width `D`.
    pub latent_dim: usize,
    /// Codebook size `K`; 128, 256 and 512 are the supported sizes with 512
    /// the default, smaller values are fine for tests.
    pub codebook_size: usize,
    /// Channel width of the convolutional stacks.
    pub hidden: usize,
    /// Residual blocks per side; 0 gives the plain (ablation) variant.
    pub residual_blocks: usize,
    /// Fixed gain applied to inputs entering the encoder (and removed from
    /// decoder outputs). Normalized mats are sparse with cell values well
    /// below 0.1, which starves the content pathway at init; lifting them to
    /// O(1) keeps it trainable.
    #[serde(default = "default_input_gain")]
    pub input_gain: f64,
}

fn default_input_gain() -> f64 {
    16.0
}

impl Default for CodecGeometry {
    fn default() -> Self {
        CodecGeometry {
            height: crate::data::CANONICAL_HEIGHT,
            width: crate::data::CANONICAL_WIDTH,
            downsample: 4,
            latent_dim: 64,
            codebook_size: 512,
            hidden: 64,
            residual_blocks: 3,
            input_gain: default_input_gain(),
        }
    }
}

impl CodecGeometry {
    pub fn validate(&self) -> Result<(), CodecError> {
        if self.height == 0 || self.width == 0 {
            return Err(CodecError::InvalidConfig("grid dimensions must be positive".into()));
        }
        if self.downsample == 0 || !self.downsample.is_power_of_two() {
            return Err(CodecError::InvalidConfig(format!(
                "downsample factor must be a power of two, got {}",
                self.downsample
            )));
        }
        if self.latent_dim == 0 || self.hidden == 0 || self.codebook_size == 0 {
            return Err(CodecError::InvalidConfig(
                "latent_dim, hidden and codebook_size must be positive".into(),
            ));
        }
        if !(self.input_gain.is_finite() && self.input_gain > 0.0) {
            return Err(CodecError::InvalidConfig("input_gain must be positive".into()));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.height * self.width
    }

    fn stages(&self) -> usize {
        self.downsample.trailing_zeros() as usize
    }

    /// Latent count for a sequence of `t` frames: `ceil(t / l)`.
    pub fn latent_len(&self, t: usize) -> usize {
        t.div_ceil(self.downsample)
    }
}

struct ConvIds {
    w: ParamId,
    b: ParamId,
    /// Per-channel layer-norm gain and bias; the final projection layers
    /// leave this off so output scale stays unconstrained.
    norm: Option<(ParamId, ParamId)>,
}

struct ResBlockIds {
    c1: ConvIds,
    c2: ConvIds,
}

struct Layout {
    enc_in: ConvIds,
    enc_down: Vec<ConvIds>,
    enc_res: Vec<ResBlockIds>,
    enc_out: ConvIds,
    dec_in: ConvIds,
    dec_res: Vec<ResBlockIds>,
    dec_up: Vec<ConvIds>,
    dec_out: ConvIds,
}

pub(super) struct CodecModel {
    pub(super) geometry: CodecGeometry,
    pub(super) params: ParamSet,
    layout: Layout,
}

fn register_conv(
    params: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    name: &str,
    c_out: usize,
    c_in: usize,
    kernel: usize,
    normed: bool,
) -> ConvIds {
    let w = he_init(rng, c_out, c_in * kernel, c_in * kernel);
    ConvIds {
        w: params.add(&format!("{name}.w"), w.into_dyn()),
        b: params.add(&format!("{name}.b"), Array1::zeros(c_out).into_dyn()),
        norm: normed.then(|| {
            (
                params.add(&format!("{name}.ln.g"), Array1::ones(c_out).into_dyn()),
                params.add(&format!("{name}.ln.b"), Array1::zeros(c_out).into_dyn()),
            )
        }),
    }
}

fn register_res(
    params: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    name: &str,
    ch: usize,
) -> ResBlockIds {
    ResBlockIds {
        c1: register_conv(params, rng, &format!("{name}.c1"), ch, ch, 3, true),
        c2: register_conv(params, rng, &format!("{name}.c2"), ch, ch, 3, false),
    }
}

impl CodecModel {
    pub(super) fn new(geometry: CodecGeometry, seed: u64) -> Result<Self, CodecError> {
        geometry.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let c = geometry.channels();
        let h = geometry.hidden;
        let d = geometry.latent_dim;

        let enc_in = register_conv(&mut params, &mut rng, "enc.in", h, c, 3, true);
        let enc_down = (0..geometry.stages())
            .map(|i| register_conv(&mut params, &mut rng, &format!("enc.down{i}"), h, h, 4, true))
            .collect();
        let enc_res = (0..geometry.residual_blocks)
            .map(|i| register_res(&mut params, &mut rng, &format!("enc.res{i}"), h))
            .collect();
        let enc_out = register_conv(&mut params, &mut rng, "enc.out", d, h, 3, false);

        let dec_in = register_conv(&mut params, &mut rng, "dec.in", h, d, 3, true);
        let dec_res = (0..geometry.residual_blocks)
            .map(|i| register_res(&mut params, &mut rng, &format!("dec.res{i}"), h))
            .collect();
        let dec_up = (0..geometry.stages())
            .map(|i| register_conv(&mut params, &mut rng, &format!("dec.up{i}"), h, h, 3, true))
            .collect();
        let dec_out = register_conv(&mut params, &mut rng, "dec.out", c, h, 3, false);

        Ok(Self {
            geometry,
            params,
            layout: Layout {
                enc_in,
                enc_down,
                enc_res,
                enc_out,
                dec_in,
                dec_res,
                dec_up,
                dec_out,
            },
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &self,
        g: &mut Graph,
        bound: &Bound,
        ids: &ConvIds,
        x: Var,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Var {
        let y = g.conv1d(x, bound.var(ids.w), kernel, stride, pad);
        let y = g.add_bias_rows(y, bound.var(ids.b));
        match ids.norm {
            None => y,
            Some((gain, bias)) => {
                // normalize each time step across channels
                let yt = g.transpose(y);
                let normed = g.layer_norm(yt, bound.var(gain), bound.var(bias), 1e-5);
                g.transpose(normed)
            }
        }
    }

    fn res_block(&self, g: &mut Graph, bound: &Bound, ids: &ResBlockIds, x: Var) -> Var {
        let a = g.relu(x);
        let a = self.conv(g, bound, &ids.c1, a, 3, 1, 1);
        let a = g.relu(a);
        let a = self.conv(g, bound, &ids.c2, a, 3, 1, 1);
        g.add(x, a)
    }

    /// Encoder forward on an existing graph; `x` is `(H*W, T_pad)` with
    /// `T_pad` a multiple of `l`. Output is `(D, T_pad / l)`.
    pub(super) fn encode_on(&self, g: &mut Graph, bound: &Bound, x: Var) -> Var {
        let x = g.scale(x, self.geometry.input_gain);
        let mut h = self.conv(g, bound, &self.layout.enc_in, x, 3, 1, 1);
        h = g.relu(h);
        for ids in &self.layout.enc_down {
            h = self.conv(g, bound, ids, h, 4, 2, 1);
            h = g.relu(h);
        }
        for ids in &self.layout.enc_res {
            h = self.res_block(g, bound, ids, h);
        }
        self.conv(g, bound, &self.layout.enc_out, h, 3, 1, 1)
    }

    /// Decoder forward; `q` is `(D, n)`, output `(H*W, n * l)`.
    pub(super) fn decode_on(&self, g: &mut Graph, bound: &Bound, q: Var) -> Var {
        let mut h = self.conv(g, bound, &self.layout.dec_in, q, 3, 1, 1);
        h = g.relu(h);
        for ids in &self.layout.dec_res {
            h = self.res_block(g, bound, ids, h);
        }
        for ids in &self.layout.dec_up {
            h = g.upsample2(h);
            h = self.conv(g, bound, ids, h, 3, 1, 1);
            h = g.relu(h);
        }
        let y = self.conv(g, bound, &self.layout.dec_out, h, 3, 1, 1);
        g.scale(y, 1.0 / self.geometry.input_gain)
    }
}

/// Bounce-reflected index for padding the time axis.
fn reflect_index(i: usize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len - 1);
    let m = i % period;
    if m < len {
        m
    } else {
        period - m
    }
}

/// Flatten frames to `(H*W, T)` columns in row-major cell order.
pub(super) fn sequence_to_channels(seq: &PressureSequence) -> Array2<f64> {
    let c = seq.height() * seq.width();
    let mut out = Array2::zeros((c, seq.len()));
    for (t, frame) in seq.frames.iter().enumerate() {
        for (i, &v) in frame.grid().iter().enumerate() {
            out[[i, t]] = v as f64;
        }
    }
    out
}

/// Reflect-pad the time axis to a multiple of `l`.
pub(super) fn pad_time(x: &Array2<f64>, l: usize) -> Array2<f64> {
    let (c, t) = x.dim();
    let t_pad = t.div_ceil(l) * l;
    if t_pad == t {
        return x.clone();
    }
    let mut out = Array2::zeros((c, t_pad));
    for j in 0..t_pad {
        let src = reflect_index(j, t);
        out.column_mut(j).assign(&x.column(src));
    }
    out
}

/// A frozen, loadable codec: geometry, network weights, codebook.
pub struct CodecCheckpoint {
    pub(super) model: CodecModel,
    pub codebook: Codebook,
}

#[derive(Serialize, Deserialize)]
struct CodecMeta {
    geometry: CodecGeometry,
    ema_horizon: usize,
    usage: Vec<u64>,
}

impl CodecCheckpoint {
    pub(super) fn from_parts(model: CodecModel, codebook: Codebook) -> Self {
        Self { model, codebook }
    }

    /// Freshly initialized (untrained) codec, mostly for tests and the
    /// decode-clamp contract.
    pub fn init(geometry: CodecGeometry, seed: u64) -> Result<Self, CodecError> {
        let model = CodecModel::new(geometry, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0de);
        let codebook = Codebook::new(geometry.codebook_size, geometry.latent_dim, 99, &mut rng)?;
        Ok(Self { model, codebook })
    }

    pub fn geometry(&self) -> &CodecGeometry {
        &self.model.geometry
    }

    /// Encode a normalized sequence into latent vectors.
    pub fn encode(&self, seq: &PressureSequence) -> Result<LatentSequence, CodecError> {
        if !seq.normalized {
            return Err(CodecError::NotNormalized);
        }
        let geo = &self.model.geometry;
        if seq.height() != geo.height || seq.width() != geo.width {
            return Err(CodecError::GeometryMismatch(format!(
                "sequence is {}x{}, codec expects {}x{}",
                seq.height(),
                seq.width(),
                geo.height,
                geo.width
            )));
        }
        let x = pad_time(&sequence_to_channels(seq), geo.downsample);
        let mut g = Graph::new();
        let bound = self.model.params.bind(&mut g);
        let x_var = g.leaf2(x);
        let out = self.model.encode_on(&mut g, &bound, x_var);
        let vectors = g
            .value(out)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("encoder output is 2-D")
            .t()
            .to_owned();
        Ok(LatentSequence {
            vectors,
            downsample: geo.downsample,
            original_len: seq.len(),
        })
    }

    /// Decode (typically quantized) latents back to a normalized pressure
    /// sequence of `original_len` frames with cells clamped to `[0, 1]`.
    pub fn decode(&self, lat: &LatentSequence) -> Result<PressureSequence, CodecError> {
        let geo = &self.model.geometry;
        if lat.dim() != geo.latent_dim {
            return Err(CodecError::GeometryMismatch(format!(
                "latent width {} does not match codec width {}",
                lat.dim(),
                geo.latent_dim
            )));
        }
        if lat.downsample != geo.downsample {
            return Err(CodecError::GeometryMismatch(format!(
                "latent downsample {} does not match codec {}",
                lat.downsample, geo.downsample
            )));
        }
        if lat.is_empty() {
            return Err(CodecError::DimensionMismatch("empty latent sequence".into()));
        }
        let max_len = lat.len() * geo.downsample;
        if lat.original_len == 0 || lat.original_len > max_len {
            return Err(CodecError::DimensionMismatch(format!(
                "original_len {} outside (0, {max_len}]",
                lat.original_len
            )));
        }
        let mut g = Graph::new();
        let bound = self.model.params.bind(&mut g);
        let q_var = g.leaf2(lat.vectors.t().to_owned());
        let out = self.model.decode_on(&mut g, &bound, q_var);
        let full = g
            .value(out)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("decoder output is 2-D");

        let (h, w) = (geo.height, geo.width);
        let mut frames = Vec::with_capacity(lat.original_len);
        for t in 0..lat.original_len {
            let col = full.column(t);
            let grid = Array2::from_shape_fn((h, w), |(r, cc)| {
                (col[r * w + cc].clamp(0.0, 1.0)) as f32
            });
            frames.push(PressureFrame::new(grid)?);
        }
        Ok(PressureSequence::new(
            frames,
            "decoded".into(),
            ActivityClass::Basic,
            String::new(),
            None,
            true,
        )?)
    }

    pub fn save(&self, path: &Path) -> Result<(), CodecError> {
        let meta = CodecMeta {
            geometry: self.model.geometry,
            ema_horizon: self.codebook.n_horizon(),
            usage: self.codebook.usage().to_vec(),
        };
        let mut blobs: Vec<(String, ndarray::ArrayD<f64>)> = self
            .model
            .params
            .iter()
            .map(|(n, v)| (n.to_string(), v.clone()))
            .collect();
        blobs.push(("codebook.entries".into(), self.codebook.entries().clone().into_dyn()));
        blobs.push(("codebook.ema_counts".into(), self.codebook.ema_counts().clone().into_dyn()));
        blobs.push(("codebook.ema_sums".into(), self.codebook.ema_sums().clone().into_dyn()));
        write_checkpoint(
            path,
            &CheckpointData {
                kind: CheckpointKind::Codec,
                meta: serde_json::to_value(&meta).map_err(crate::checkpoint::CheckpointError::from)?,
                blobs,
            },
        )?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CodecError> {
        let data = read_checkpoint(path)?;
        if data.kind != CheckpointKind::Codec {
            return Err(CodecError::InvalidConfig(format!(
                "{} is not a codec checkpoint",
                path.display()
            )));
        }
        let meta: CodecMeta = serde_json::from_value(data.meta)
            .map_err(crate::checkpoint::CheckpointError::from)?;
        let mut model = CodecModel::new(meta.geometry, 0)?;
        let mut blobs = data.blobs;
        if blobs.len() < 3 {
            return Err(CodecError::InvalidConfig("checkpoint missing codebook blobs".into()));
        }
        let cb_blobs = blobs.split_off(blobs.len() - 3);
        model
            .params
            .load_values(blobs)
            .map_err(CodecError::InvalidConfig)?;

        let take2 = |v: &ndarray::ArrayD<f64>, what: &str| {
            v.view()
                .into_dimensionality::<ndarray::Ix2>()
                .map(|a| a.to_owned())
                .map_err(|_| CodecError::InvalidConfig(format!("{what} blob is not 2-D")))
        };
        let entries = take2(&cb_blobs[0].1, "codebook.entries")?;
        let counts = cb_blobs[1]
            .1
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .map(|a| a.to_owned())
            .map_err(|_| CodecError::InvalidConfig("codebook.ema_counts blob is not 1-D".into()))?;
        let sums = take2(&cb_blobs[2].1, "codebook.ema_sums")?;
        let codebook =
            Codebook::from_parts(entries, counts, sums, meta.usage, meta.ema_horizon)?;
        if codebook.len() != meta.geometry.codebook_size
            || codebook.dim() != meta.geometry.latent_dim
        {
            return Err(CodecError::GeometryMismatch(
                "codebook shape disagrees with checkpoint geometry".into(),
            ));
        }
        Ok(Self { model, codebook })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::quantize;
    use crate::data::{normalize, synth_sequences, SynthConfig};
    use tempfile::tempdir;

    fn toy_geometry() -> CodecGeometry {
        CodecGeometry {
            height: 4,
            width: 4,
            downsample: 4,
            latent_dim: 8,
            codebook_size: 16,
            hidden: 12,
            residual_blocks: 1,
            input_gain: 16.0,
        }
    }

    fn toy_sequence(t: usize) -> PressureSequence {
        let cfg = SynthConfig {
            sequences_per_class: 1,
            frames_per_sequence: t,
            height: 4,
            width: 4,
            seed: 1,
            classes: vec![ActivityClass::Basic],
            ..Default::default()
        };
        normalize(&synth_sequences(&cfg).unwrap().remove(0)).unwrap()
    }

    #[test]
    fn latent_length_is_ceil_t_over_l() {
        let ckpt = CodecCheckpoint::init(toy_geometry(), 3).unwrap();
        for (t, expect) in [(120, 30), (1, 1), (5, 2), (8, 2)] {
            let lat = ckpt.encode(&toy_sequence(t)).unwrap();
            assert_eq!(lat.len(), expect, "T={t}");
            assert_eq!(lat.dim(), 8);
            assert!(lat.vectors.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn encode_requires_normalized_input() {
        let ckpt = CodecCheckpoint::init(toy_geometry(), 3).unwrap();
        let cfg = SynthConfig {
            sequences_per_class: 1,
            frames_per_sequence: 4,
            height: 4,
            width: 4,
            seed: 1,
            classes: vec![ActivityClass::Basic],
            ..Default::default()
        };
        let raw = synth_sequences(&cfg).unwrap().remove(0);
        assert!(matches!(ckpt.encode(&raw), Err(CodecError::NotNormalized)));
    }

    #[test]
    fn encode_rejects_wrong_grid() {
        let ckpt = CodecCheckpoint::init(toy_geometry(), 3).unwrap();
        let cfg = SynthConfig {
            sequences_per_class: 1,
            frames_per_sequence: 4,
            height: 8,
            width: 4,
            seed: 1,
            classes: vec![ActivityClass::Basic],
            ..Default::default()
        };
        let seq = normalize(&synth_sequences(&cfg).unwrap().remove(0)).unwrap();
        assert!(matches!(ckpt.encode(&seq), Err(CodecError::GeometryMismatch(_))));
    }

    #[test]
    fn shape_round_trip_for_all_lengths() {
        let ckpt = CodecCheckpoint::init(toy_geometry(), 3).unwrap();
        for t in [1usize, 2, 4, 7, 9, 120] {
            let x = toy_sequence(t);
            let lat = ckpt.encode(&x).unwrap();
            let (_, q, _) = quantize(&lat, &ckpt.codebook).unwrap();
            let y = ckpt.decode(&q).unwrap();
            assert_eq!(y.len(), t);
            assert_eq!(y.height(), 4);
            assert_eq!(y.width(), 4);
        }
    }

    #[test]
    fn untrained_decode_stays_in_unit_range() {
        let ckpt = CodecCheckpoint::init(toy_geometry(), 99).unwrap();
        let x = toy_sequence(12);
        let lat = ckpt.encode(&x).unwrap();
        let y = ckpt.decode(&lat).unwrap();
        for f in &y.frames {
            for &v in f.grid().iter() {
                assert!((0.0..=1.0).contains(&v));
            }
        }
        assert!(y.normalized);
    }

    #[test]
    fn encode_is_deterministic() {
        let ckpt = CodecCheckpoint::init(toy_geometry(), 3).unwrap();
        let x = toy_sequence(9);
        assert_eq!(ckpt.encode(&x).unwrap(), ckpt.encode(&x).unwrap());
    }

    #[test]
    fn checkpoint_save_load_preserves_behaviour() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("codec.ckpt");
        let ckpt = CodecCheckpoint::init(toy_geometry(), 7).unwrap();
        ckpt.save(&path).unwrap();
        let loaded = CodecCheckpoint::load(&path).unwrap();
        let x = toy_sequence(10);
        assert_eq!(ckpt.encode(&x).unwrap(), loaded.encode(&x).unwrap());
        assert_eq!(loaded.codebook.alpha(), ckpt.codebook.alpha());
    }

    #[test]
    fn reflect_pad_handles_t_equal_one() {
        let x = Array2::from_shape_vec((2, 1), vec![1.0, 2.0]).unwrap();
        let padded = pad_time(&x, 4);
        assert_eq!(padded.dim(), (2, 4));
        for j in 0..4 {
            assert_eq!(padded[[0, j]], 1.0);
            assert_eq!(padded[[1, j]], 2.0);
        }
    }

    #[test]
    fn reflect_pad_mirrors_interior() {
        let x = Array2::from_shape_vec((1, 3), vec![1.0, 2.0, 3.0]).unwrap();
        let padded = pad_time(&x, 4);
        // indices bounce: 0 1 2 1
        assert_eq!(
            padded.row(0).to_vec(),
            vec![1.0, 2.0, 3.0, 2.0]
        );
    }
}
