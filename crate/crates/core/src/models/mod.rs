//! The three networks: fast streaming extractor, slow conversation-embedding
//! model and self-speech beamformer.

mod beamformer;
mod causal_net;
mod fast;
mod slow;

pub use beamformer::{BeamformerModel, BeamformerState};
pub use causal_net::{CausalBlockState, NetState, StreamState};
pub use fast::{FastModel, FastState};
pub use slow::{stack_frames, SlowModel, SlowState};

use crate::audio::{AudioError, Framing};
use crate::nn::{Init, NnError, ParamSlot, Tensor, Visitor, WeightArchive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("input shape: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Fast,
    Slow,
    Beamformer,
}

/// Structural hyperparameters of one network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelManifest {
    pub kind: ModelKind,
    pub blocks: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    /// `"main"` or `"beamformer"`.
    pub framing: String,
    /// Audio channels entering the encoder (each contributes a real and an
    /// imaginary plane).
    pub input_channels: usize,
    /// Audio channels produced by the decoder head before averaging.
    pub output_channels: usize,
    pub freq_kernel: usize,
    pub freq_stride: usize,
    pub time_kernel: usize,
    pub time_stride: usize,
    pub lstm_layers: usize,
    pub layer_norm: bool,
    /// Attention heads of the global module (slow model only).
    pub heads: usize,
    /// Per-head query/key channels of the global module.
    pub qk_dim: usize,
    /// STFT steps per slow period `T`.
    pub period_steps: usize,
    /// Pooled tokens kept for attention.
    pub attention_cap: usize,
}

impl ModelManifest {
    pub fn fast_default() -> Self {
        Self {
            kind: ModelKind::Fast,
            blocks: 6,
            latent_dim: 32,
            hidden: 32,
            framing: "main".into(),
            input_channels: 1,
            output_channels: 1,
            freq_kernel: 4,
            freq_stride: 1,
            time_kernel: 4,
            time_stride: 1,
            lstm_layers: 1,
            layer_norm: true,
            heads: 0,
            qk_dim: 0,
            period_steps: 80,
            attention_cap: 0,
        }
    }

    pub fn slow_default() -> Self {
        Self {
            kind: ModelKind::Slow,
            blocks: 6,
            latent_dim: 32,
            hidden: 32,
            framing: "main".into(),
            input_channels: 2,
            output_channels: 0,
            freq_kernel: 2,
            freq_stride: 2,
            time_kernel: 2,
            time_stride: 2,
            lstm_layers: 2,
            layer_norm: true,
            heads: 4,
            qk_dim: 2,
            period_steps: 80,
            attention_cap: 4096,
        }
    }

    pub fn beamformer_default() -> Self {
        Self {
            kind: ModelKind::Beamformer,
            blocks: 6,
            latent_dim: 32,
            hidden: 32,
            framing: "beamformer".into(),
            input_channels: 2,
            output_channels: 2,
            freq_kernel: 1,
            freq_stride: 1,
            time_kernel: 1,
            time_stride: 1,
            lstm_layers: 1,
            layer_norm: true,
            heads: 0,
            qk_dim: 0,
            period_steps: 0,
            attention_cap: 0,
        }
    }

    pub fn default_for(kind: ModelKind) -> Self {
        match kind {
            ModelKind::Fast => Self::fast_default(),
            ModelKind::Slow => Self::slow_default(),
            ModelKind::Beamformer => Self::beamformer_default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ModelError> {
        let m: Self = toml::from_str(text).map_err(|e| ModelError::Manifest(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn framing(&self) -> Result<Framing, ModelError> {
        Framing::by_name(&self.framing)
            .ok_or_else(|| ModelError::Manifest(format!("unknown framing `{}`", self.framing)))
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Manifest(m));
        self.framing()?;
        if !(1..=16).contains(&self.blocks) {
            return bad(format!("blocks must be in 1..=16, got {}", self.blocks));
        }
        for (name, v) in [("latent_dim", self.latent_dim), ("hidden", self.hidden)] {
            if !(1..=512).contains(&v) {
                return bad(format!("{name} must be in 1..=512, got {v}"));
            }
        }
        if !(1..=4).contains(&self.lstm_layers) {
            return bad(format!("lstm_layers must be in 1..=4, got {}", self.lstm_layers));
        }
        for (name, k, s) in [
            ("freq", self.freq_kernel, self.freq_stride),
            ("time", self.time_kernel, self.time_stride),
        ] {
            if k == 0 || s == 0 || s > k || k > 16 {
                return bad(format!("{name} unfold needs 1 <= stride <= kernel <= 16, got {k}/{s}"));
            }
        }
        if !(1..=2).contains(&self.input_channels) {
            return bad(format!("input_channels must be 1 or 2, got {}", self.input_channels));
        }
        match self.kind {
            ModelKind::Fast | ModelKind::Beamformer => {
                if self.time_stride != 1 {
                    return bad("streaming models need time_stride = 1".into());
                }
                if !(1..=2).contains(&self.output_channels) {
                    return bad(format!("output_channels must be 1 or 2, got {}", self.output_channels));
                }
            }
            ModelKind::Slow => {
                if self.heads == 0 || self.qk_dim == 0 {
                    return bad("slow model needs heads >= 1 and qk_dim >= 1".into());
                }
                if self.period_steps == 0 || !self.period_steps.is_multiple_of(self.time_stride) {
                    return bad(format!(
                        "period_steps {} must be a positive multiple of time_stride",
                        self.period_steps
                    ));
                }
                if self.attention_cap == 0 {
                    return bad("attention_cap must be positive".into());
                }
            }
        }
        if self.kind == ModelKind::Fast && self.input_channels != 1 {
            return bad("fast model takes a monaural mixture".into());
        }
        if self.kind == ModelKind::Beamformer && self.input_channels != 2 {
            return bad("beamformer takes binaural input".into());
        }
        Ok(())
    }
}

/// Anything exposing named learnable parameters.
pub trait Parameterized: Clone {
    fn visit_params(&mut self, v: &mut Visitor<'_>);

    /// Exact number of learnable scalars.
    fn count_parameters(&self) -> usize {
        let mut n = 0;
        self.clone().visit_params(&mut |s: ParamSlot<'_>| n += s.data.len());
        n
    }

    fn to_archive(&self) -> WeightArchive {
        let mut archive = WeightArchive::new();
        self.clone().visit_params(&mut |s: ParamSlot<'_>| {
            let t = Tensor::new(s.dims, s.data.clone()).expect("parameter dims match");
            archive.push(s.name, t).expect("parameter names are unique");
        });
        archive
    }

    /// Copies every parameter from `archive`; missing, misshapen and
    /// unused entries are errors.
    fn load_archive(&mut self, archive: &WeightArchive) -> Result<(), NnError> {
        let index: HashMap<&str, &Tensor> = archive.entries().iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut used = 0usize;
        let mut err = None;
        self.visit_params(&mut |s: ParamSlot<'_>| {
            if err.is_some() {
                return;
            }
            match index.get(s.name.as_str()) {
                None => err = Some(NnError::MissingWeight(s.name)),
                Some(t) if t.dims() != s.dims.as_slice() => {
                    err = Some(NnError::WeightShape {
                        name: s.name,
                        expected: s.dims,
                        got: t.dims().to_vec(),
                    })
                }
                Some(t) => {
                    s.data.copy_from_slice(t.data());
                    used += 1;
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if used != archive.len() {
            let mut names = std::collections::HashSet::new();
            self.clone().visit_params(&mut |s: ParamSlot<'_>| {
                names.insert(s.name);
            });
            let extra = archive
                .entries()
                .iter()
                .find(|(n, _)| !names.contains(n))
                .map(|(n, _)| n.clone())
                .unwrap_or_default();
            return Err(NnError::UnexpectedWeight(extra));
        }
        Ok(())
    }

    /// Deterministic initialisation from a seed.
    fn init_random(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.visit_params(&mut |s: ParamSlot<'_>| match s.init {
            Init::Const(c) => s.data.fill(c),
            Init::Uniform { fan_in } => {
                let b = 1.0 / (fan_in.max(1) as f32).sqrt();
                for v in s.data.iter_mut() {
                    *v = rng.random_range(-b..=b);
                }
            }
        });
    }
}

/// Random weights for the network described by `manifest`.
pub fn init_random_weights(manifest: &ModelManifest, seed: u64) -> Result<WeightArchive, ModelError> {
    Ok(match manifest.kind {
        ModelKind::Fast => {
            let mut m = FastModel::new(manifest.clone())?;
            m.init_random(seed);
            m.to_archive()
        }
        ModelKind::Slow => {
            let mut m = SlowModel::new(manifest.clone())?;
            m.init_random(seed);
            m.to_archive()
        }
        ModelKind::Beamformer => {
            let mut m = BeamformerModel::new(manifest.clone())?;
            m.init_random(seed);
            m.to_archive()
        }
    })
}

/// Exact learnable-scalar count of the network described by `manifest`.
pub fn count_parameters(manifest: &ModelManifest) -> Result<usize, ModelError> {
    Ok(match manifest.kind {
        ModelKind::Fast => FastModel::new(manifest.clone())?.count_parameters(),
        ModelKind::Slow => SlowModel::new(manifest.clone())?.count_parameters(),
        ModelKind::Beamformer => BeamformerModel::new(manifest.clone())?.count_parameters(),
    })
}

/// Time-varying conversation embedding, stored frame-major `[L][F][D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub frames: Vec<f32>,
    pub steps: usize,
    pub freqs: usize,
    pub dim: usize,
    pub period_steps: usize,
}

impl Embedding {
    pub fn zeros(steps: usize, freqs: usize, dim: usize, period_steps: usize) -> Self {
        Self {
            frames: vec![0.0; steps * freqs * dim],
            steps,
            freqs,
            dim,
            period_steps,
        }
    }

    /// Slice `[F * D]` conditioning step `l`.
    pub fn slice(&self, l: usize) -> &[f32] {
        let n = self.freqs * self.dim;
        &self.frames[l * n..(l + 1) * n]
    }

    /// `E` as `[D, F, L]`.
    pub fn tensor(&self) -> Tensor {
        Tensor::new(vec![self.steps, self.freqs, self.dim], self.frames.clone())
            .expect("consistent dims")
            .permute(&[2, 1, 0])
    }

    pub fn append(&mut self, other: &Embedding) {
        assert_eq!((self.freqs, self.dim), (other.freqs, other.dim));
        self.frames.extend_from_slice(&other.frames);
        self.steps += other.steps;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_parameter_counts_in_band() {
        for (kind, target) in [
            (ModelKind::Slow, 986_000.0),
            (ModelKind::Fast, 491_000.0),
            (ModelKind::Beamformer, 174_000.0),
        ] {
            let n = count_parameters(&ModelManifest::default_for(kind)).unwrap() as f64;
            assert!((n / target - 1.0).abs() <= 0.25, "{kind:?}: {n}");
        }
        assert_eq!(count_parameters(&ModelManifest::fast_default()).unwrap(), 449_314);
        assert_eq!(count_parameters(&ModelManifest::slow_default()).unwrap(), 987_854);
        assert_eq!(count_parameters(&ModelManifest::beamformer_default()).unwrap(), 173_988);
    }

    #[test]
    fn manifest_toml_round_trip_and_bounds() {
        for kind in [ModelKind::Fast, ModelKind::Slow, ModelKind::Beamformer] {
            let m = ModelManifest::default_for(kind);
            assert_eq!(ModelManifest::from_toml(&m.to_toml()).unwrap(), m);
        }
        let mut m = ModelManifest::fast_default();
        m.blocks = 0;
        assert!(ModelManifest::from_toml(&m.to_toml()).is_err());
        let mut m = ModelManifest::fast_default();
        m.framing = "wide".into();
        assert!(m.validate().is_err());
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let m = ModelManifest::beamformer_default();
        let a = init_random_weights(&m, 7).unwrap().to_bytes();
        assert_eq!(a, init_random_weights(&m, 7).unwrap().to_bytes());
        assert_ne!(a, init_random_weights(&m, 8).unwrap().to_bytes());
        let arch = init_random_weights(&m, 7).unwrap();
        // encoder fan-in is 4 planes x 9 taps
        let w = arch.get("encoder.weight").unwrap();
        assert!(w.data().iter().all(|v| v.abs() <= 1.0 / 6.0));
    }

    #[test]
    fn archive_loading_checks_names() {
        let manifest = ModelManifest::beamformer_default();
        let arch = init_random_weights(&manifest, 1).unwrap();
        let mut m = BeamformerModel::new(manifest.clone()).unwrap();
        m.load_archive(&arch).unwrap();
        assert_eq!(m.to_archive(), arch);

        let mut missing = WeightArchive::new();
        for (n, t) in arch.entries().iter().skip(1) {
            missing.push(n.clone(), t.clone()).unwrap();
        }
        assert!(matches!(m.load_archive(&missing), Err(NnError::MissingWeight(_))));

        let mut extra = arch.clone();
        extra.push("stray", Tensor::zeros(vec![1])).unwrap();
        assert_eq!(m.load_archive(&extra), Err(NnError::UnexpectedWeight("stray".into())));
    }
}
