use super::causal_net::{CausalNet, StreamState};
use super::{Embedding, ModelError, ModelKind, ModelManifest, Parameterized};
use crate::audio::{AudioBuffer, Framing};
use crate::nn::{Visitor, WeightArchive};

/// Streaming state of the fast extractor.
pub type FastState = StreamState;

/// Streaming extractor: monaural mixture in, extracted conversation out,
/// conditioned by the slow model's embedding after the first block.
#[derive(Debug, Clone)]
pub struct FastModel {
    net: CausalNet,
}

impl FastModel {
    pub fn new(manifest: ModelManifest) -> Result<Self, ModelError> {
        if manifest.kind != ModelKind::Fast {
            return Err(ModelError::Manifest(format!("expected a fast manifest, got {:?}", manifest.kind)));
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

    pub fn freqs(&self) -> usize {
        self.net.freqs
    }

    pub fn latent_dim(&self) -> usize {
        self.net.dim()
    }

    pub fn new_state(&self) -> FastState {
        self.net.new_stream_state()
    }

    /// One `chunk`-sample block in, one block out. `embedding` is the
    /// `[F * D]` slice for this step.
    pub fn process_chunk(&self, chunk: &[f32], embedding: &[f32], state: &mut FastState) -> Result<Vec<f32>, ModelError> {
        self.net.process_chunk(&[chunk], Some(embedding), state)
    }

    /// Whole-signal evaluation. Equals streaming over the same signal delayed
    /// by the framing lookahead.
    pub fn process_offline(&self, mixture: &[f32], embedding: &Embedding) -> Result<Vec<f32>, ModelError> {
        let audio = AudioBuffer::mono(mixture.to_vec())?;
        self.net.process_offline(&audio, Some(embedding))
    }
}

impl Parameterized for FastModel {
    fn visit_params(&mut self, v: &mut Visitor<'_>) {
        self.net.visit(v);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
        use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(seed: u64) -> FastModel {
        let mut m = FastModel::new(ModelManifest::fast_default()).unwrap();
        m.init_random(seed);
        m
    }

    fn random_embedding(steps: usize, m: &FastModel, rng: &mut ChaCha8Rng) -> Embedding {
        let mut e = Embedding::zeros(steps, m.freqs(), m.latent_dim(), 80);
        e.frames.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        e
    }

    #[test]
    fn streaming_matches_offline() {
        let m = model(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 12 * 200;
        let x: Vec<f32> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
        let e = random_embedding(12, &m, &mut rng);
        let mut st = m.new_state();
        let mut streamed = Vec::new();
        for (k, c) in x.chunks_exact(200).enumerate() {
            streamed.extend(m.process_chunk(c, e.slice(k), &mut st).unwrap());
        }
        let mut delayed = vec![0.0; 32];
        delayed.extend_from_slice(&x);
        let e = {
            let mut longer = e.clone();
            longer.append(&Embedding::zeros(1, m.freqs(), m.latent_dim(), 80));
            longer
        };
        let offline = m.process_offline(&delayed, &e).unwrap();
        let diff = streamed.iter().zip(&offline).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(diff <= 1e-5, "{diff}");
        assert!(streamed.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn zero_embedding_removes_input_dependence() {
        let m = model(5);
        let zero = vec![0.0; m.freqs() * m.latent_dim()];
        let mut a = m.new_state();
        let mut b = m.new_state();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..4 {
            let x: Vec<f32> = (0..200).map(|_| rng.random_range(-1.0..1.0)).collect();
            let ya = m.process_chunk(&x, &zero, &mut a).unwrap();
            let yb = m.process_chunk(&[0.0; 200], &zero, &mut b).unwrap();
            assert_eq!(ya, yb);
        }
    }

    #[test]
    fn reset_equals_fresh_and_state_serializes() {
        let m = model(8);
        let e = vec![0.5; m.freqs() * m.latent_dim()];
        let x: Vec<f32> = (0..200).map(|i| (i as f32 * 0.1).sin()).collect();
        let mut st = m.new_state();
        let first = m.process_chunk(&x, &e, &mut st).unwrap();
        let json = serde_json::to_string(&st).unwrap();
        let mut restored: FastState = serde_json::from_str(&json).unwrap();
        assert_eq!(
            m.process_chunk(&x, &e, &mut restored).unwrap(),
            m.process_chunk(&x, &e, &mut st).unwrap()
        );
        st.reset();
        assert_eq!(m.process_chunk(&x, &e, &mut st).unwrap(), first);
    }

    #[test]
    fn wrong_chunk_size_rejected() {
        let m = model(1);
        let e = vec![0.0; m.freqs() * m.latent_dim()];
        assert!(m.process_chunk(&[0.0; 199], &e, &mut m.new_state()).is_err());
        assert!(m.process_chunk(&[0.0; 200], &e[1..], &mut m.new_state()).is_err());
    }
}
