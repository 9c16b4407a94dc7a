//! Chunk-causal TF network shared by the fast extractor and the beamformer:
//! causal 3x3 encoder, blocks of (frequency BiLSTM, causal temporal LSTM),
//! causal transposed 3x3 head.

use super::{Embedding, ModelError, ModelManifest};
use crate::audio::{stft_analyze, istft_synthesize, AudioBuffer, Framing, StreamingIstft, StreamingStft, TfRep};
use crate::nn::{
    unfold_strided, CausalConv2d, CausalDeconv2d, ConvHistory, ConvTranspose1d, Direction, LayerNorm,
    LstmState, StackedLstm, Visitor,
};
use rustfft::num_complex::Complex32;
use serde::{Deserialize, Serialize};

/// Residual frequency path over frames `x: [steps, freqs, dim]`: each frame is
/// one sequence along frequency.
#[allow(clippy::too_many_arguments)]
pub(crate) fn freq_path(
    norm: Option<&LayerNorm>,
    lstm: &StackedLstm,
    deconv: &ConvTranspose1d,
    kernel: usize,
    stride: usize,
    x: &mut [f32],
    steps: usize,
    freqs: usize,
    dim: usize,
) {
    let mut y = x.to_vec();
    if let Some(n) = norm {
        n.apply(&mut y);
    }
    let (u, positions) = unfold_strided(&y, freqs, steps, dim, dim, freqs * dim, kernel, stride);
    let h = lstm.forward(&u, positions, steps, None);
    deconv.add_into(&h, positions, steps, x, freqs, dim, freqs * dim);
}

#[derive(Debug, Clone)]
pub(crate) struct CausalBlock {
    freq_norm: Option<LayerNorm>,
    freq_lstm: StackedLstm,
    freq_deconv: ConvTranspose1d,
    time_norm: Option<LayerNorm>,
    time_lstm: StackedLstm,
    time_deconv: ConvTranspose1d,
    freq_kernel: usize,
    freq_stride: usize,
    time_kernel: usize,
}

/// Carry of one block: the last `time_kernel - 1` normalised frames, the
/// temporal LSTM state and the pending transposed-conv taps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalBlockState {
    pub norm_hist: Vec<f32>,
    pub lstm: Vec<LstmState>,
    pub taps_hist: Vec<f32>,
}

impl CausalBlock {
    fn new(m: &ModelManifest) -> Self {
        let (d, h) = (m.latent_dim, m.hidden);
        let norm = || m.layer_norm.then(|| LayerNorm::new(d));
        Self {
            freq_norm: norm(),
            freq_lstm: StackedLstm::new(m.freq_kernel * d, h, m.lstm_layers, Direction::Bidirectional),
            freq_deconv: ConvTranspose1d::new(2 * h, d, m.freq_kernel, m.freq_stride),
            time_norm: norm(),
            time_lstm: StackedLstm::new(m.time_kernel * d, h, m.lstm_layers, Direction::Forward),
            time_deconv: ConvTranspose1d::new(h, d, m.time_kernel, 1),
            freq_kernel: m.freq_kernel,
            freq_stride: m.freq_stride,
            time_kernel: m.time_kernel,
        }
    }

    fn new_state(&self, freqs: usize, dim: usize) -> CausalBlockState {
        let hist = self.time_kernel - 1;
        CausalBlockState {
            norm_hist: vec![0.0; hist * freqs * dim],
            lstm: self.time_lstm.zero_state(freqs),
            taps_hist: vec![0.0; hist * freqs * self.time_kernel * dim],
        }
    }

    fn forward(&self, x: &mut [f32], steps: usize, freqs: usize, dim: usize, st: &mut CausalBlockState) {
        freq_path(
            self.freq_norm.as_ref(),
            &self.freq_lstm,
            &self.freq_deconv,
            self.freq_kernel,
            self.freq_stride,
            x,
            steps,
            freqs,
            dim,
        );

        let fd = freqs * dim;
        let k = self.time_kernel;
        let hist = k - 1;
        let mut ext = std::mem::take(&mut st.norm_hist);
        let start = ext.len();
        ext.extend_from_slice(x);
        if let Some(n) = &self.time_norm {
            n.apply(&mut ext[start..]);
        }
        let (u, positions) = unfold_strided(&ext, hist + steps, freqs, dim, fd, dim, k, 1);
        debug_assert_eq!(positions, steps);
        st.norm_hist = ext[steps * fd..].to_vec();

        let h = self.time_lstm.forward(&u, steps, freqs, Some(&mut st.lstm));
        let row = k * dim;
        let mut taps = std::mem::take(&mut st.taps_hist);
        taps.extend(self.time_deconv.taps(&h, steps * freqs));
        let bias = &self.time_deconv.bias;
        for t in 0..steps {
            for f in 0..freqs {
                let o = &mut x[(t * freqs + f) * dim..][..dim];
                for (v, b) in o.iter_mut().zip(bias) {
                    *v += b;
                }
                for i in 0..k {
                    let src = &taps[((t + hist - i) * freqs + f) * row + i * dim..][..dim];
                    for (v, s) in o.iter_mut().zip(src) {
                        *v += s;
                    }
                }
            }
        }
        st.taps_hist = taps[steps * freqs * row..].to_vec();
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
    }
}

/// Running state of the convolutional and recurrent layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetState {
    pub encoder: ConvHistory,
    pub blocks: Vec<CausalBlockState>,
    pub head: ConvHistory,
}

#[derive(Debug, Clone)]
pub(crate) struct CausalNet {
    pub manifest: ModelManifest,
    pub framing: Framing,
    pub freqs: usize,
    encoder: CausalConv2d,
    blocks: Vec<CausalBlock>,
    head: CausalDeconv2d,
}

impl CausalNet {
    pub fn new(manifest: ModelManifest) -> Result<Self, ModelError> {
        manifest.validate()?;
        let framing = manifest.framing()?;
        let d = manifest.latent_dim;
        Ok(Self {
            freqs: framing.num_bins(),
            framing,
            encoder: CausalConv2d::new(2 * manifest.input_channels, d),
            blocks: (0..manifest.blocks).map(|_| CausalBlock::new(&manifest)).collect(),
            head: CausalDeconv2d::new(d, 2 * manifest.output_channels),
            manifest,
        })
    }

    pub fn dim(&self) -> usize {
        self.manifest.latent_dim
    }

    pub fn new_state(&self) -> NetState {
        let (f, d) = (self.freqs, self.dim());
        NetState {
            encoder: ConvHistory::new(f, self.encoder.cin),
            blocks: self.blocks.iter().map(|b| b.new_state(f, d)).collect(),
            head: ConvHistory::new(f, d),
        }
    }

    /// Frames `[steps, F, 2 * in_ch]` to `[steps, F, 2 * out_ch]`. When `cond`
    /// (`[steps, F, D]`) is given it multiplies the output of the first block.
    pub fn forward(&self, frames: &[f32], steps: usize, state: &mut NetState, cond: Option<&[f32]>) -> Vec<f32> {
        let (f, d) = (self.freqs, self.dim());
        let mut x = self.encoder.forward(frames, steps, &mut state.encoder);
        for (i, (block, st)) in self.blocks.iter().zip(state.blocks.iter_mut()).enumerate() {
            block.forward(&mut x, steps, f, d, st);
            if i == 0 {
                if let Some(e) = cond {
                    for (v, e) in x.iter_mut().zip(e) {
                        *v *= e;
                    }
                }
            }
        }
        self.head.forward(&x, steps, &mut state.head)
    }

    pub fn visit(&mut self, v: &mut Visitor<'_>) {
        self.encoder.visit("encoder", v);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit(&format!("blocks.{i}"), v);
        }
        self.head.visit("head", v);
    }

    /// Averages the output channels into one complex spectrum per bin.
    fn frames_to_bins(&self, frames: &[f32], out: &mut [Complex32]) {
        let oc = self.manifest.output_channels;
        let scale = 1.0 / oc as f32;
        for (b, fr) in out.iter_mut().zip(frames.chunks_exact(2 * oc)) {
            let re: f32 = fr[..oc].iter().sum();
            let im: f32 = fr[oc..].iter().sum();
            *b = Complex32::new(re * scale, im * scale);
        }
    }

    pub fn new_stream_state(&self) -> StreamState {
        StreamState {
            stft: (0..self.manifest.input_channels).map(|_| StreamingStft::new(self.framing)).collect(),
            istft: StreamingIstft::new(self.framing),
            net: self.new_state(),
            steps: 0,
        }
    }

    /// One framing chunk per input channel in, one mono chunk out.
    pub fn process_chunk(
        &self,
        channels: &[&[f32]],
        cond: Option<&[f32]>,
        state: &mut StreamState,
    ) -> Result<Vec<f32>, ModelError> {
        let ic = self.manifest.input_channels;
        let chunk = self.framing.chunk;
        if channels.len() != ic || channels.iter().any(|c| c.len() != chunk) {
            return Err(ModelError::Shape(format!(
                "expected {ic} channel(s) of {chunk} samples, got {:?}",
                channels.iter().map(|c| c.len()).collect::<Vec<_>>()
            )));
        }
        let f = self.freqs;
        if let Some(e) = cond {
            if e.len() != f * self.dim() {
                return Err(ModelError::Shape(format!(
                    "embedding slice has {} values, expected {}",
                    e.len(),
                    f * self.dim()
                )));
            }
        }
        let mut bins = vec![Complex32::new(0.0, 0.0); f];
        let mut frames = vec![0.0f32; f * 2 * ic];
        for (c, (samples, stft)) in channels.iter().zip(state.stft.iter_mut()).enumerate() {
            stft.push(samples, &mut bins);
            for (k, b) in bins.iter().enumerate() {
                frames[k * 2 * ic + c] = b.re;
                frames[k * 2 * ic + ic + c] = b.im;
            }
        }
        let y = self.forward(&frames, 1, &mut state.net, cond);
        self.frames_to_bins(&y, &mut bins);
        let mut out = vec![0.0; chunk];
        state.istft.push(&bins, &mut out);
        state.steps += 1;
        Ok(out)
    }

    /// Whole-signal evaluation; `cond` must cover every STFT step.
    pub fn process_offline(&self, audio: &AudioBuffer, cond: Option<&Embedding>) -> Result<Vec<f32>, ModelError> {
        if audio.num_channels() != self.manifest.input_channels {
            return Err(ModelError::Shape(format!(
                "expected {} channel(s), got {}",
                self.manifest.input_channels,
                audio.num_channels()
            )));
        }
        let tf = stft_analyze(audio, self.framing)?;
        let steps = tf.steps();
        let frames = tf.to_frames();
        let cond = match cond {
            Some(e) => {
                if e.steps < steps || e.freqs != self.freqs || e.dim != self.dim() {
                    return Err(ModelError::Shape(format!(
                        "embedding covers {} steps of [{}, {}], need {steps} of [{}, {}]",
                        e.steps,
                        e.freqs,
                        e.dim,
                        self.freqs,
                        self.dim()
                    )));
                }
                Some(&e.frames[..steps * self.freqs * self.dim()])
            }
            None => None,
        };
        let y = self.forward(&frames, steps, &mut self.new_state(), cond);
        let oc = self.manifest.output_channels;
        let mut mono = Vec::with_capacity(steps * self.freqs * 2);
        for fr in y.chunks_exact(2 * oc) {
            let re: f32 = fr[..oc].iter().sum::<f32>() / oc as f32;
            let im: f32 = fr[oc..].iter().sum::<f32>() / oc as f32;
            mono.extend([re, im]);
        }
        let out = istft_synthesize(&TfRep::from_frames(&mono, 1, steps, self.framing)?)?;
        let mut samples = out.into_channels().swap_remove(0);
        samples.truncate(audio.len());
        Ok(samples)
    }
}

/// Streaming state: analysis windows per input channel, synthesis tail,
/// network carry and the number of chunks consumed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StreamState {
    pub stft: Vec<StreamingStft>,
    pub istft: StreamingIstft,
    pub net: NetState,
    pub steps: usize,
}

impl StreamState {
    pub fn reset(&mut self) {
        self.stft.iter_mut().for_each(StreamingStft::reset);
        self.istft.reset();
        self.net.encoder.reset();
        self.net.head.reset();
        for b in &mut self.net.blocks {
            b.norm_hist.fill(0.0);
            b.taps_hist.fill(0.0);
            b.lstm.iter_mut().for_each(LstmState::reset);
        }
        self.steps = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Parameterized;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[derive(Clone)]
    struct W(CausalNet);
    impl Parameterized for W {
        fn visit_params(&mut self, v: &mut Visitor<'_>) {
            self.0.visit(v);
        }
    }

    #[test]
    fn stepwise_equals_whole_frames() {
        for m in [ModelManifest::fast_default(), ModelManifest::beamformer_default()] {
            let mut w = W(CausalNet::new(m).unwrap());
            w.init_random(1);
            let net = w.0;
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let planes = 2 * net.manifest.input_channels;
            let steps = 20;
            let x: Vec<f32> = (0..steps * net.freqs * planes).map(|_| rng.random_range(-1.0..1.0)).collect();
            let whole = net.forward(&x, steps, &mut net.new_state(), None);
            let mut st = net.new_state();
            let mut inc = Vec::new();
            for c in x.chunks_exact(net.freqs * planes) {
                inc.extend(net.forward(c, 1, &mut st, None));
            }
            let diff = whole.iter().zip(&inc).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
            assert!(diff <= 1e-5, "{diff}");
        }
    }
}
