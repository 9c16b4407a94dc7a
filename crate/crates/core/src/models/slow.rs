use super::causal_net::freq_path;
use super::{Embedding, ModelError, ModelKind, ModelManifest, Parameterized};
use crate::audio::{Framing, TfRep};
use crate::nn::{
    unfold_positions, unfold_strided, CausalConv2d, ConvHistory, ConvTranspose1d, Direction, KvCache, LayerNorm,
    MaskedSelfAttention, StackedLstm, Visitor, WeightArchive,
};
use serde::{Deserialize, Serialize};

/// Frames `[step][bin][re_a, re_b, im_a, im_b]` from two mono spectrograms.
pub fn stack_frames(a: &TfRep, b: &TfRep) -> Result<Vec<f32>, ModelError> {
    if a.channels() != 1 || b.channels() != 1 {
        return Err(ModelError::Shape("slow model inputs must be single-channel".into()));
    }
    if a.steps() != b.steps() || a.framing() != b.framing() {
        return Err(ModelError::Shape(format!(
            "mixture has {} steps, self-speech {}",
            a.steps(),
            b.steps()
        )));
    }
    let (fa, fb) = (a.to_frames(), b.to_frames());
    let mut out = Vec::with_capacity(2 * fa.len());
    for (x, y) in fa.chunks_exact(2).zip(fb.chunks_exact(2)) {
        out.extend([x[0], y[0], x[1], y[1]]);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
struct SlowBlock {
    freq_norm: Option<LayerNorm>,
    freq_lstm: StackedLstm,
    freq_deconv: ConvTranspose1d,
    time_norm: Option<LayerNorm>,
    time_lstm: StackedLstm,
    time_deconv: ConvTranspose1d,
    attn: MaskedSelfAttention,
}

impl SlowBlock {
    fn new(m: &ModelManifest, freqs: usize) -> Self {
        let (d, h) = (m.latent_dim, m.hidden);
        let norm = || m.layer_norm.then(|| LayerNorm::new(d));
        Self {
            freq_norm: norm(),
            freq_lstm: StackedLstm::new(m.freq_kernel * d, h, m.lstm_layers, Direction::Bidirectional),
            freq_deconv: ConvTranspose1d::new(2 * h, d, m.freq_kernel, m.freq_stride),
            time_norm: norm(),
            time_lstm: StackedLstm::new(m.time_kernel * d, h, m.lstm_layers, Direction::Bidirectional),
            time_deconv: ConvTranspose1d::new(2 * h, d, m.time_kernel, m.time_stride),
            attn: MaskedSelfAttention::new(freqs, d, m.heads, m.qk_dim),
        }
    }

    /// `x: [chunks * period, F, D]`, updated in place.
    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        m: &ModelManifest,
        x: &mut [f32],
        chunks: usize,
        period: usize,
        freqs: usize,
        cache: &mut KvCache,
    ) {
        let d = m.latent_dim;
        let fd = freqs * d;
        let steps = chunks * period;
        freq_path(
            self.freq_norm.as_ref(),
            &self.freq_lstm,
            &self.freq_deconv,
            m.freq_kernel,
            m.freq_stride,
            x,
            steps,
            freqs,
            d,
        );

        // temporal path: bidirectional within each period
        let (k, s) = (m.time_kernel, m.time_stride);
        let mut y = x.to_vec();
        if let Some(n) = &self.time_norm {
            n.apply(&mut y);
        }
        let positions = unfold_positions(period, k, s);
        let batch = chunks * freqs;
        let width = k * d;
        let mut u = vec![0.0f32; positions * batch * width];
        for c in 0..chunks {
            let (uc, _) = unfold_strided(&y[c * period * fd..], period, freqs, d, fd, d, k, s);
            for p in 0..positions {
                u[(p * batch + c * freqs) * width..][..freqs * width]
                    .copy_from_slice(&uc[p * freqs * width..(p + 1) * freqs * width]);
            }
        }
        let h = self.time_lstm.forward(&u, positions, batch, None);
        let taps = self.time_deconv.taps(&h, positions * batch);
        for row in x.chunks_exact_mut(d) {
            for (v, b) in row.iter_mut().zip(&self.time_deconv.bias) {
                *v += b;
            }
        }
        for p in 0..positions {
            for i in 0..k {
                let t = p * s + i;
                if t >= period {
                    continue;
                }
                for c in 0..chunks {
                    for f in 0..freqs {
                        let src = &taps[((p * chunks + c) * freqs + f) * width + i * d..][..d];
                        let o = &mut x[((c * period + t) * freqs + f) * d..][..d];
                        for (v, a) in o.iter_mut().zip(src) {
                            *v += a;
                        }
                    }
                }
            }
        }

        // global module: one pooled token per period
        let mut tokens = vec![0.0f32; chunks * fd];
        let inv = 1.0 / period as f32;
        for c in 0..chunks {
            let tok = &mut tokens[c * fd..(c + 1) * fd];
            for t in 0..period {
                for (a, v) in tok.iter_mut().zip(&x[(c * period + t) * fd..][..fd]) {
                    *a += v;
                }
            }
            tok.iter_mut().for_each(|a| *a *= inv);
        }
        let g = self.attn.forward(&tokens, chunks, cache);
        for c in 0..chunks {
            let gc = &g[c * fd..(c + 1) * fd];
            for t in 0..period {
                for (v, a) in x[(c * period + t) * fd..][..fd].iter_mut().zip(gc) {
                    *v += a;
                }
            }
        }
    }

    fn visit(&mut self, prefix: &str, v: &mut Visitor<'_>) {
        if let Some(n) = &mut self.freq_norm {
            n.visit(&format!("{prefix}.freq.norm"), v);
        }
        self.freq_lstm.visit(&format!("{prefix}.freq.lstm"), v);
        self.freq_deconv.visit(&format!("{prefix}.freq.deconv"), v);
        if let Some(n) = &mut self.time_norm {
            n.visit(&format!("{prefix}.time.norm"), v);
        }
        self.time_lstm.visit(&format!("{prefix}.time.lstm"), v);
        self.time_deconv.visit(&format!("{prefix}.time.deconv"), v);
        self.attn.visit(&format!("{prefix}.attn"), v);
    }
}

/// Carry between calls: encoder history, per-block attention caches and the
/// latent of the most recent period (emitted one period later).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlowState {
    pub encoder: ConvHistory,
    pub caches: Vec<KvCache>,
    pub last_latent: Vec<f32>,
    pub steps: usize,
}

impl SlowState {
    pub fn reset(&mut self) {
        self.encoder.reset();
        self.caches.iter_mut().for_each(KvCache::reset);
        self.last_latent.fill(0.0);
        self.steps = 0;
    }

    /// Pooled tokens currently held by the first block's attention cache.
    pub fn history_tokens(&self) -> usize {
        self.caches.first().map_or(0, |c| c.len)
    }
}

/// Conversation-embedding model, run once per period `T` on the mixture and
/// the wearer's self-speech.
#[derive(Debug, Clone)]
pub struct SlowModel {
    manifest: ModelManifest,
    framing: Framing,
    freqs: usize,
    encoder: CausalConv2d,
    blocks: Vec<SlowBlock>,
}

impl SlowModel {
    pub fn new(manifest: ModelManifest) -> Result<Self, ModelError> {
        if manifest.kind != ModelKind::Slow {
            return Err(ModelError::Manifest(format!("expected a slow manifest, got {:?}", manifest.kind)));
        }
        manifest.validate()?;
        let framing = manifest.framing()?;
        let freqs = framing.num_bins();
        Ok(Self {
            encoder: CausalConv2d::new(2 * manifest.input_channels, manifest.latent_dim),
            blocks: (0..manifest.blocks).map(|_| SlowBlock::new(&manifest, freqs)).collect(),
            manifest,
            framing,
            freqs,
        })
    }

    pub fn from_archive(manifest: ModelManifest, archive: &WeightArchive) -> Result<Self, ModelError> {
        let mut m = Self::new(manifest)?;
        m.load_archive(archive)?;
        Ok(m)
    }

    pub fn manifest(&self) -> &ModelManifest {
        &self.manifest
    }

    pub fn framing(&self) -> Framing {
        self.framing
    }

    pub fn freqs(&self) -> usize {
        self.freqs
    }

    pub fn latent_dim(&self) -> usize {
        self.manifest.latent_dim
    }

    pub fn period_steps(&self) -> usize {
        self.manifest.period_steps
    }

    /// Changes the period `T` (in STFT steps); weights are unaffected.
    pub fn set_period_steps(&mut self, steps: usize) -> Result<(), ModelError> {
        let mut m = self.manifest.clone();
        m.period_steps = steps;
        m.validate()?;
        self.manifest = m;
        Ok(())
    }

    pub fn new_state(&self) -> SlowState {
        SlowState {
            encoder: ConvHistory::new(self.freqs, self.encoder.cin),
            caches: self
                .blocks
                .iter()
                .map(|b| b.attn.new_cache(self.manifest.attention_cap))
                .collect(),
            last_latent: vec![0.0; self.period_steps() * self.freqs * self.latent_dim()],
            steps: 0,
        }
    }

    /// Undelayed latent `[steps, F, D]` for whole periods of stacked frames.
    pub fn latent(&self, frames: &[f32], steps: usize, state: &mut SlowState) -> Result<Vec<f32>, ModelError> {
        let period = self.period_steps();
        let width = 2 * self.manifest.input_channels;
        if !steps.is_multiple_of(period) || frames.len() != steps * self.freqs * width {
            return Err(ModelError::Shape(format!(
                "slow model needs whole periods of {period} steps x {} bins x {width}, got {} values for {steps} steps",
                self.freqs,
                frames.len()
            )));
        }
        let chunks = steps / period;
        let mut x = self.encoder.forward(frames, steps, &mut state.encoder);
        for (block, cache) in self.blocks.iter().zip(state.caches.iter_mut()) {
            block.forward(&self.manifest, &mut x, chunks, period, self.freqs, cache);
        }
        state.steps += steps;
        Ok(x)
    }

    /// Embedding for stacked frames: the latent shifted one period later,
    /// with zeros (or the previous call's last period) in front.
    pub fn embed_frames(&self, frames: &[f32], steps: usize, state: &mut SlowState) -> Result<Embedding, ModelError> {
        let z = self.latent(frames, steps, state)?;
        let slab = state.last_latent.len();
        let mut e = Embedding::zeros(0, self.freqs, self.latent_dim(), self.period_steps());
        e.frames.extend_from_slice(&state.last_latent);
        e.frames.extend_from_slice(&z[..z.len() - slab]);
        e.steps = steps;
        state.last_latent.copy_from_slice(&z[z.len() - slab..]);
        Ok(e)
    }

    /// Embedding for a mixture / self-speech spectrogram pair.
    pub fn forward(&self, mixture: &TfRep, selfspeech: &TfRep, state: &mut SlowState) -> Result<Embedding, ModelError> {
        if mixture.framing() != self.framing {
            return Err(ModelError::Shape("slow model inputs must use the main framing".into()));
        }
        let frames = stack_frames(mixture, selfspeech)?;
        self.embed_frames(&frames, mixture.steps(), state)
    }
}

impl Parameterized for SlowModel {
    fn visit_params(&mut self, v: &mut Visitor<'_>) {
        self.encoder.visit("encoder", v);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit(&format!("blocks.{i}"), v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamSlot;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_manifest() -> ModelManifest {
        ModelManifest {
            blocks: 2,
            period_steps: 8,
            ..ModelManifest::slow_default()
        }
    }

    fn model(seed: u64) -> SlowModel {
        let mut m = SlowModel::new(small_manifest()).unwrap();
        m.init_random(seed);
        m
    }

    fn frames(steps: usize, m: &SlowModel, rng: &mut ChaCha8Rng) -> Vec<f32> {
        (0..steps * m.freqs() * 4).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn incremental_equals_whole() {
        let m = model(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = frames(40, &m, &mut rng);
        let whole = m.embed_frames(&x, 40, &mut m.new_state()).unwrap();
        let mut st = m.new_state();
        let mut inc = Embedding::zeros(0, m.freqs(), 32, 8);
        let per = 8 * m.freqs() * 4;
        for c in x.chunks_exact(per) {
            inc.append(&m.embed_frames(c, 8, &mut st).unwrap());
        }
        let diff = whole.frames.iter().zip(&inc.frames).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(diff <= 1e-5, "{diff}");
        assert_eq!(st.history_tokens(), 5);
    }

    #[test]
    fn first_period_is_zero_and_shift_is_one_period() {
        let m = model(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = frames(24, &m, &mut rng);
        let z = m.latent(&x, 24, &mut m.new_state()).unwrap();
        let e = m.embed_frames(&x, 24, &mut m.new_state()).unwrap();
        let slab = 8 * m.freqs() * 32;
        assert!(e.frames[..slab].iter().all(|v| *v == 0.0));
        assert_eq!(&e.frames[slab..], &z[..2 * slab]);
    }

    #[test]
    fn later_periods_do_not_affect_earlier_latent() {
        let m = model(5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = frames(24, &m, &mut rng);
        let mut y = x.clone();
        let per = 8 * m.freqs() * 4;
        y[2 * per..].iter_mut().for_each(|v| *v += 0.5);
        let zx = m.latent(&x, 24, &mut m.new_state()).unwrap();
        let zy = m.latent(&y, 24, &mut m.new_state()).unwrap();
        let slab = 8 * m.freqs() * 32;
        assert_eq!(&zx[..2 * slab], &zy[..2 * slab]);
        assert_ne!(&zx[2 * slab..], &zy[2 * slab..]);
    }

    #[test]
    fn zero_weights_give_zero_embedding() {
        let mut m = model(7);
        m.visit_params(&mut |s: ParamSlot<'_>| s.data.fill(0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = frames(16, &m, &mut rng);
        let e = m.embed_frames(&x, 16, &mut m.new_state()).unwrap();
        assert!(e.frames.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn partial_period_rejected_and_reset_matches_fresh() {
        let m = model(9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = frames(8, &m, &mut rng);
        assert!(m.latent(&x[..x.len() - 4 * m.freqs()], 7, &mut m.new_state()).is_err());
        let mut st = m.new_state();
        let a = m.embed_frames(&x, 8, &mut st).unwrap();
        m.embed_frames(&x, 8, &mut st).unwrap();
        st.reset();
        assert_eq!(st, m.new_state());
        assert_eq!(m.embed_frames(&x, 8, &mut st).unwrap(), a);
    }
}
