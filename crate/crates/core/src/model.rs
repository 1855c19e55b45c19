//! A trained audio/text model pair and convenience embedding calls.

use serde::{Deserialize, Serialize};

use crate::encoder::{self, Architecture, EncoderParams};
use crate::error::{check_dim, Error, Result};
use crate::geometry::{csd_similarity, DiagGaussian, SimilarityParams};
use crate::losses::{cosine_similarity, Similarity};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub audio: EncoderParams,
    pub text: EncoderParams,
    pub sim: SimilarityParams,
    pub similarity: Similarity,
}

impl Model {
    pub fn init(
        arch: Architecture,
        audio_seed: u64,
        text_seed: u64,
        sim: SimilarityParams,
        similarity: Similarity,
    ) -> Result<Self> {
        Ok(Self {
            audio: EncoderParams::init(arch, audio_seed)?,
            text: EncoderParams::init(arch, text_seed)?,
            sim,
            similarity,
        })
    }

    pub fn embed_audio(&self, x: &[f64], visible: Option<&[bool]>) -> Result<DiagGaussian> {
        encoder::forward(&self.audio, x, visible).map(|(z, _)| z)
    }

    pub fn embed_text(&self, x: &[f64], visible: Option<&[bool]>) -> Result<DiagGaussian> {
        encoder::forward(&self.text, x, visible).map(|(z, _)| z)
    }

    /// Text-side embedding of the information-free input: every coordinate
    /// replaced by the mask token.
    pub fn empty_caption(&self) -> Result<DiagGaussian> {
        let d = self.text.arch().d_in;
        self.embed_text(&vec![0.0; d], Some(&vec![false; d]))
    }

    /// `[audio params, text params, log_alpha, beta]`, the vector the
    /// optimizer updates.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.audio.flat().len() + self.text.flat().len() + 2);
        v.extend_from_slice(self.audio.flat());
        v.extend_from_slice(self.text.flat());
        v.push(self.sim.log_alpha());
        v.push(self.sim.beta);
        v
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        let (na, nt) = (self.audio.flat().len(), self.text.flat().len());
        check_dim(na + nt + 2, flat.len())?;
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model parameter".into()));
        }
        self.audio.flat_mut().copy_from_slice(&flat[..na]);
        self.text.flat_mut().copy_from_slice(&flat[na..na + nt]);
        *self.sim.log_alpha_mut() = flat[na + nt];
        self.sim.beta = flat[na + nt + 1];
        Ok(())
    }

    /// Model similarity between an audio-side and a text-side embedding.
    pub fn score(&self, a: &DiagGaussian, t: &DiagGaussian) -> Result<f64> {
        score(self.similarity, a, t)
    }
}

pub fn score(kind: Similarity, a: &DiagGaussian, t: &DiagGaussian) -> Result<f64> {
    match kind {
        Similarity::Csd => csd_similarity(a, t),
        Similarity::Cosine => {
            check_dim(a.dim(), t.dim())?;
            Ok(cosine_similarity(a.mu(), t.mu()))
        }
    }
}
