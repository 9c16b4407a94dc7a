use super::causal_net::{CausalNet, StreamState};
use super::{ModelError, ModelKind, ModelManifest, Parameterized};
use crate::audio::{AudioBuffer, Framing};
use crate::nn::{Visitor, WeightArchive};

/// Streaming state of the beamformer.
pub type BeamformerState = StreamState;

/// Extracts the wearer's voice from the binaural stream; the two network
/// output channels are averaged to one.
#[derive(Debug, Clone)]
pub struct BeamformerModel {
    net: CausalNet,
}

impl BeamformerModel {
    pub fn new(manifest: ModelManifest) -> Result<Self, ModelError> {
        if manifest.kind != ModelKind::Beamformer {
            return Err(ModelError::Manifest(format!("expected a beamformer manifest, got {:?}", manifest.kind)));
        }
        Ok(Self {
            net: CausalNet::new(manifest)?,
        })
    }

    pub fn from_archive(manifest: ModelManifest, archive: &WeightArchive) -> Result<Self, ModelError> {
        let mut m = Self::new(manifest)?;
        m.load_archive(archive)?;
        Ok(m)
    }

    pub fn manifest(&self) -> &ModelManifest {
        &self.net.manifest
    }

    pub fn framing(&self) -> Framing {
        self.net.framing
    }

    pub fn new_state(&self) -> BeamformerState {
        self.net.new_stream_state()
    }

    pub fn process_chunk(&self, left: &[f32], right: &[f32], state: &mut BeamformerState) -> Result<Vec<f32>, ModelError> {
        self.net.process_chunk(&[left, right], None, state)
    }

    /// Chunk given as a two-channel buffer.
    pub fn forward_chunk(&self, chunk: &AudioBuffer, state: &mut BeamformerState) -> Result<AudioBuffer, ModelError> {
        if chunk.num_channels() != 2 {
            return Err(ModelError::Shape(format!(
                "beamformer needs binaural input, got {} channel(s)",
                chunk.num_channels()
            )));
        }
        let y = self.process_chunk(chunk.channel(0), chunk.channel(1), state)?;
        Ok(AudioBuffer::mono(y)?)
    }

    pub fn process_offline(&self, binaural: &AudioBuffer) -> Result<Vec<f32>, ModelError> {
        self.net.process_offline(binaural, None)
    }
}

impl Parameterized for BeamformerModel {
    fn visit_params(&mut self, v: &mut Visitor<'_>) {
        self.net.visit(v);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
        use crate::nn::ParamSlot;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(seed: u64) -> BeamformerModel {
        let mut m = BeamformerModel::new(ModelManifest::beamformer_default()).unwrap();
        m.init_random(seed);
        m
    }

    #[test]
    fn streaming_matches_offline() {
        let m = model(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 20 * 96;
        let l: Vec<f32> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
        let r: Vec<f32> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
        let mut st = m.new_state();
        let mut streamed = Vec::new();
        for (a, b) in l.chunks_exact(96).zip(r.chunks_exact(96)) {
            streamed.extend(m.process_chunk(a, b, &mut st).unwrap());
        }
        let pad = |x: &[f32]| [vec![0.0; 64], x.to_vec()].concat();
        let delayed = AudioBuffer::new(vec![pad(&l), pad(&r)], 16000).unwrap();
        let offline = m.process_offline(&delayed).unwrap();
        let diff = streamed.iter().zip(&offline).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(diff <= 1e-5, "{diff}");
    }

    #[test]
    fn zero_input_gives_bias_only_output() {
        let mut m = model(4);
        m.visit_params(&mut |s: ParamSlot<'_>| {
            if s.name == "head.bias" {
                s.data.copy_from_slice(&[0.3, 0.1, -0.2, 0.4]);
            } else {
                s.data.fill(0.0);
            }
        });
        let y = m.process_chunk(&[0.0; 96], &[0.0; 96], &mut m.new_state()).unwrap();
        // every bin holds mean(re) + i mean(im); DC and Nyquist keep the real part only
        let (re, im) = (0.2f64, 0.1f64);
        let n = 256usize;
        for (i, &v) in y.iter().enumerate() {
            let t = (i + 96) as f64;
            let mut acc = re + re * if (t as usize).is_multiple_of(2) { 1.0 } else { -1.0 };
            for k in 1..n / 2 {
                let a = 2.0 * std::f64::consts::PI * k as f64 * t / n as f64;
                acc += 2.0 * (re * a.cos() - im * a.sin());
            }
            assert!((v as f64 - acc / n as f64).abs() < 1e-5, "sample {i}");
        }
    }

    #[test]
    fn channel_swap_with_symmetric_weights() {
        let mut m = model(6);
        // encoder taps shared between left and right planes
        m.visit_params(&mut |s: ParamSlot<'_>| {
            if s.name == "encoder.weight" {
                let (cout, cin) = (s.dims[0], s.dims[1]);
                for o in 0..cout {
                    for (a, b) in [(0, 1), (2, 3)] {
                        for k in 0..9 {
                            s.data[(o * cin + b) * 9 + k] = s.data[(o * cin + a) * 9 + k];
                        }
                    }
                }
            }
        });
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let l: Vec<f32> = (0..96).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r: Vec<f32> = (0..96).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = m.process_chunk(&l, &r, &mut m.new_state()).unwrap();
        let b = m.process_chunk(&r, &l, &mut m.new_state()).unwrap();
        // equal up to summation order over the swapped planes
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-6, "{x} vs {y}");
        }
    }

    #[test]
    fn mono_input_rejected() {
        let m = model(1);
        let mono = AudioBuffer::mono(vec![0.0; 96]).unwrap();
        assert!(m.forward_chunk(&mono, &mut m.new_state()).is_err());
    }
}
