//! Text-conditioned autoregressive generation over codebook indices.
//!
//! A pressure sequence becomes a short token sequence (its quantizer indices
//! plus a terminal `END` symbol). A causal transformer, conditioned by
//! prepending one projected text-embedding token, learns next-index
//! prediction; at generation time it samples indices until `END` and the
//! frozen codec decoder turns them back into frames.

mod model;
mod train;

pub use model::{generate, next_token_logits, GeneratorCheckpoint, GeneratorConfig, Sampling};
pub use train::{
    generate_baseline, train_baseline, train_generator, BaselineCheckpoint, GeneratorTrainConfig,
    TrainedGenerator,
};

use thiserror::Error;

use crate::codec::{quantize, CodecCheckpoint, CodecError, LatentSequence};
use crate::data::PressureSequence;

#[derive(Debug, Error)]
pub enum GeneratorError {
    #[error("token {token} out of range for codebook of {k}")]
    TokenOutOfRange { token: usize, k: usize },
    #[error("END may only appear once, as the final token")]
    InteriorEnd,
    #[error("token sequence is empty")]
    EmptyTokens,
    #[error("prefix of {len} tokens reaches the max_len cap {max_len}")]
    PrefixTooLong { len: usize, max_len: usize },
    #[error("sequence of {len} tokens exceeds the model cap {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },
    #[error("vocabulary mismatch: checkpoint has {expected}, got {got}")]
    VocabularyMismatch { expected: usize, got: usize },
    #[error("conditioning width {got} does not match model width {expected}")]
    CondWidthMismatch { expected: usize, got: usize },
    #[error("target frame count {target} exceeds decodable {available}")]
    TargetTooLong { target: usize, available: usize },
    #[error("training pairs are empty")]
    EmptyPairs,
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Checkpoint(#[from] crate::checkpoint::CheckpointError),
}

/// Codebook indices plus the terminal `END` symbol (`END = K`, one id past
/// the codebook).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    tokens: Vec<usize>,
    /// `END`'s id, equal to the codebook size `K`.
    end_id: usize,
    /// Cap on the number of non-`END` tokens.
    max_len: usize,
}

impl TokenSequence {
    /// Validates the `END`-is-terminal-only and length invariants.
    pub fn new(tokens: Vec<usize>, end_id: usize, max_len: usize) -> Result<Self, GeneratorError> {
        if tokens.is_empty() {
            return Err(GeneratorError::EmptyTokens);
        }
        for (i, &t) in tokens.iter().enumerate() {
            if t > end_id {
                return Err(GeneratorError::TokenOutOfRange { token: t, k: end_id });
            }
            if t == end_id && i + 1 != tokens.len() {
                return Err(GeneratorError::InteriorEnd);
            }
        }
        if tokens.len() > max_len + 1 {
            return Err(GeneratorError::SequenceTooLong { len: tokens.len(), max_len });
        }
        Ok(Self { tokens, end_id, max_len })
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn end_id(&self) -> usize {
        self.end_id
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn ends_with_end(&self) -> bool {
        self.tokens.last() == Some(&self.end_id)
    }

    /// The codebook indices, i.e. everything before `END`.
    pub fn indices(&self) -> &[usize] {
        match self.tokens.split_last() {
            Some((&last, rest)) if last == self.end_id => rest,
            _ => &self.tokens,
        }
    }
}

/// Quantize a normalized sequence into its token representation:
/// `ceil(T/l)` codebook indices followed by `END`.
pub fn tokenize(
    seq: &PressureSequence,
    codec: &CodecCheckpoint,
) -> Result<TokenSequence, GeneratorError> {
    let lat = codec.encode(seq)?;
    let (indices, _, _) = quantize(&lat, &codec.codebook)?;
    let k = codec.codebook.len();
    let mut tokens = indices;
    let count = tokens.len();
    tokens.push(k);
    TokenSequence::new(tokens, k, count)
}

/// Look up codebook entries for every index, strip `END`, and run the codec
/// decoder.
///
/// `target_frames` trims the decoded output (default: `l` frames per token);
/// asking for more frames than the tokens can decode is an error.
pub fn detokenize(
    tokens: &TokenSequence,
    codec: &CodecCheckpoint,
    target_frames: Option<usize>,
) -> Result<PressureSequence, GeneratorError> {
    let k = codec.codebook.len();
    let indices = tokens.indices();
    if indices.is_empty() {
        return Err(GeneratorError::EmptyTokens);
    }
    for &t in indices {
        if t >= k {
            return Err(GeneratorError::TokenOutOfRange { token: t, k });
        }
    }
    let vectors = codec.codebook.lookup(indices)?;
    let l = codec.geometry().downsample;
    let available = indices.len() * l;
    let original_len = match target_frames {
        None => available,
        Some(t) => {
            if t == 0 || t > available {
                return Err(GeneratorError::TargetTooLong { target: t, available });
            }
            t
        }
    };
    let lat = LatentSequence { vectors, downsample: l, original_len };
    Ok(codec.decode(&lat)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::CodecGeometry;
    use crate::data::{normalize, synth_sequences, ActivityClass, SynthConfig};

    fn toy_codec() -> CodecCheckpoint {
        CodecCheckpoint::init(
            CodecGeometry {
                height: 4,
                width: 4,
                downsample: 4,
                latent_dim: 8,
                codebook_size: 16,
                hidden: 12,
                residual_blocks: 1,
                input_gain: 16.0,
            },
            5,
        )
        .unwrap()
    }

    fn toy_seq(t: usize) -> PressureSequence {
        let cfg = SynthConfig {
            sequences_per_class: 1,
            frames_per_sequence: t,
            height: 4,
            width: 4,
            seed: 2,
            classes: vec![ActivityClass::Dance],
            ..Default::default()
        };
        normalize(&synth_sequences(&cfg).unwrap().remove(0)).unwrap()
    }

    #[test]
    fn tokenize_appends_end_after_ceil_t_over_l_indices() {
        let codec = toy_codec();
        let toks = tokenize(&toy_seq(120), &codec).unwrap();
        assert_eq!(toks.len(), 31);
        assert!(toks.ends_with_end());
        assert_eq!(toks.end_id(), 16);
        for &t in toks.indices() {
            assert!(t < 16);
        }
    }

    #[test]
    fn tokenize_is_deterministic() {
        let codec = toy_codec();
        let a = tokenize(&toy_seq(24), &codec).unwrap();
        let b = tokenize(&toy_seq(24), &codec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn detokenize_round_trips_shape() {
        let codec = toy_codec();
        let x = toy_seq(17);
        let toks = tokenize(&x, &codec).unwrap();
        let y = detokenize(&toks, &codec, Some(x.len())).unwrap();
        assert_eq!(y.len(), 17);
        assert_eq!(y.height(), 4);
        assert_eq!(y.width(), 4);
        // default target: l frames per index
        let y_full = detokenize(&toks, &codec, None).unwrap();
        assert_eq!(y_full.len(), 20);
    }

    #[test]
    fn out_of_range_token_rejected() {
        let codec = toy_codec();
        // end_id 20 admits indices the 16-entry codebook does not have
        let toks = TokenSequence::new(vec![3, 19, 20], 20, 8).unwrap();
        assert!(matches!(
            detokenize(&toks, &codec, None),
            Err(GeneratorError::TokenOutOfRange { token: 19, k: 16 })
        ));
    }

    #[test]
    fn interior_end_rejected_at_construction() {
        assert!(matches!(
            TokenSequence::new(vec![1, 16, 2], 16, 8),
            Err(GeneratorError::InteriorEnd)
        ));
        assert!(TokenSequence::new(vec![1, 2, 16], 16, 8).is_ok());
    }

    #[test]
    fn over_long_sequence_rejected() {
        assert!(matches!(
            TokenSequence::new(vec![1; 10], 16, 8),
            Err(GeneratorError::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn target_beyond_decodable_frames_rejected() {
        let codec = toy_codec();
        let toks = tokenize(&toy_seq(8), &codec).unwrap(); // 2 indices
        assert!(matches!(
            detokenize(&toks, &codec, Some(9)),
            Err(GeneratorError::TargetTooLong { target: 9, available: 8 })
        ));
    }
}
