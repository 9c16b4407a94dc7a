//! Sample buffers, WAV I/O and the dual-window STFT engine.
//!
//! The analysis window of frame `k` spans `lookback + chunk + lookahead`
//! samples starting at `k * chunk - lookback`. Synthesis drops the first
//! `lookback` samples of each inverse DFT and overlap-adds the remaining
//! `chunk + lookahead` samples at hop `chunk`, crossfading linearly over the
//! `lookahead` overlap.

use std::path::Path;
use std::sync::Arc;

pub use rustfft::num_complex::Complex32;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Engine-wide sample rate.
pub const SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("sample rate mismatch: expected {expected} Hz, got {actual} Hz")]
    RateMismatch { expected: u32, actual: u32 },
    #[error("empty signal")]
    Empty,
    #[error("channel {channel} has {len} samples, expected {expected}")]
    RaggedChannels {
        channel: usize,
        len: usize,
        expected: usize,
    },
    #[error("non-finite sample in channel {channel} at index {index}")]
    NonFinite { channel: usize, index: usize },
    #[error("audio buffer needs at least one channel")]
    NoChannels,
    #[error("unsupported sample rate {0} Hz (only 16000 Hz is supported)")]
    UnsupportedRate(u32),
    #[error("unsupported WAV format: {0}")]
    UnsupportedFormat(String),
    #[error("invalid framing: {0}")]
    InvalidFraming(String),
    #[error("time-frequency shape mismatch: {0}")]
    Shape(String),
    #[error("WAV parse error at byte {offset}: {reason}")]
    Parse { offset: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Multichannel 32-bit float audio at [`SAMPLE_RATE`].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    channels: Vec<Vec<f32>>,
    sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(channels: Vec<Vec<f32>>, sample_rate: u32) -> Result<Self, AudioError> {
        if channels.is_empty() {
            return Err(AudioError::NoChannels);
        }
        let expected = channels[0].len();
        for (c, ch) in channels.iter().enumerate() {
            if ch.len() != expected {
                return Err(AudioError::RaggedChannels {
                    channel: c,
                    len: ch.len(),
                    expected,
                });
            }
            if let Some(index) = ch.iter().position(|v| !v.is_finite()) {
                return Err(AudioError::NonFinite { channel: c, index });
            }
        }
        Ok(Self {
            channels,
            sample_rate,
        })
    }

    pub fn mono(samples: Vec<f32>) -> Result<Self, AudioError> {
        Self::new(vec![samples], SAMPLE_RATE)
    }

    pub fn zeros(num_channels: usize, len: usize) -> Self {
        Self {
            channels: vec![vec![0.0; len]; num_channels.max(1)],
            sample_rate: SAMPLE_RATE,
        }
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.channels[c]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        &mut self.channels[c]
    }

    pub fn channels(&self) -> &[Vec<f32>] {
        &self.channels
    }

    pub fn into_channels(self) -> Vec<Vec<f32>> {
        self.channels
    }

    /// Arithmetic mean over channels.
    pub fn downmix(&self) -> Vec<f32> {
        if self.channels.len() == 1 {
            return self.channels[0].clone();
        }
        let scale = 1.0 / self.channels.len() as f32;
        (0..self.len())
            .map(|i| self.channels.iter().map(|ch| ch[i]).sum::<f32>() * scale)
            .collect()
    }

    pub fn duration_secs(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }

    fn require_rate(&self) -> Result<(), AudioError> {
        if self.sample_rate != SAMPLE_RATE {
            return Err(AudioError::RateMismatch {
                expected: SAMPLE_RATE,
                actual: self.sample_rate,
            });
        }
        Ok(())
    }
}

/// Dual-window framing parameters, all in samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Framing {
    pub chunk: usize,
    pub lookback: usize,
    pub lookahead: usize,
}

impl Framing {
    /// Framing of the extraction models: 200-sample hop, 32 samples either side.
    pub const MAIN: Framing = Framing {
        chunk: 200,
        lookback: 32,
        lookahead: 32,
    };
    /// Framing of the self-speech beamformer.
    pub const BEAMFORMER: Framing = Framing {
        chunk: 96,
        lookback: 96,
        lookahead: 64,
    };

    pub fn new(chunk: usize, lookback: usize, lookahead: usize) -> Result<Self, AudioError> {
        let f = Framing {
            chunk,
            lookback,
            lookahead,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "main" => Some(Self::MAIN),
            "beamformer" => Some(Self::BEAMFORMER),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), AudioError> {
        if self.chunk == 0 {
            return Err(AudioError::InvalidFraming("chunk must be positive".into()));
        }
        if self.lookahead > self.chunk {
            return Err(AudioError::InvalidFraming(
                "lookahead longer than chunk would overlap more than two frames".into(),
            ));
        }
        Ok(())
    }

    pub fn window(&self) -> usize {
        self.lookback + self.chunk + self.lookahead
    }

    pub fn out_window(&self) -> usize {
        self.window() - self.discard_head()
    }

    pub fn discard_head(&self) -> usize {
        self.lookback
    }

    pub fn num_bins(&self) -> usize {
        self.window() / 2 + 1
    }

    /// Worst-case delay between a sample arriving and its reconstruction
    /// being emitted when audio is delivered in `chunk`-sized blocks.
    pub fn latency_samples(&self) -> usize {
        self.chunk + self.lookahead
    }

    /// Index offset of the streamed output relative to the input.
    pub fn stream_delay(&self) -> usize {
        self.lookahead
    }

    pub fn num_steps(&self, num_samples: usize) -> usize {
        num_samples.div_ceil(self.chunk)
    }

    /// Synthesis weight applied to the new frame at overlap position `i`.
    fn fade_in(&self, i: usize) -> f32 {
        (i as f32 + 0.5) / self.lookahead as f32
    }
}

/// Complex spectrogram, indexed `[channel][bin][step]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TfRep {
    data: Vec<Complex32>,
    channels: usize,
    bins: usize,
    steps: usize,
    framing: Framing,
}

impl TfRep {
    pub fn zeros(channels: usize, steps: usize, framing: Framing) -> Self {
        let bins = framing.num_bins();
        Self {
            data: vec![Complex32::new(0.0, 0.0); channels * bins * steps],
            channels,
            bins,
            steps,
            framing,
        }
    }

    pub fn from_parts(
        data: Vec<Complex32>,
        channels: usize,
        steps: usize,
        framing: Framing,
    ) -> Result<Self, AudioError> {
        let bins = framing.num_bins();
        if data.len() != channels * bins * steps {
            return Err(AudioError::Shape(format!(
                "{} values for {channels}x{bins}x{steps}",
                data.len()
            )));
        }
        Ok(Self {
            data,
            channels,
            bins,
            steps,
            framing,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn framing(&self) -> Framing {
        self.framing
    }

    pub fn data(&self) -> &[Complex32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, c: usize, f: usize, l: usize) -> Complex32 {
        self.data[(c * self.bins + f) * self.steps + l]
    }

    #[inline]
    pub fn set(&mut self, c: usize, f: usize, l: usize, v: Complex32) {
        self.data[(c * self.bins + f) * self.steps + l] = v;
    }

    /// Realified frames laid out `[step][bin][2C]`, real parts of every
    /// channel first, then imaginary parts.
    pub fn to_frames(&self) -> Vec<f32> {
        let width = 2 * self.channels;
        let mut out = vec![0.0; self.steps * self.bins * width];
        for c in 0..self.channels {
            for f in 0..self.bins {
                for l in 0..self.steps {
                    let v = self.get(c, f, l);
                    let base = (l * self.bins + f) * width;
                    out[base + c] = v.re;
                    out[base + self.channels + c] = v.im;
                }
            }
        }
        out
    }

    /// Inverse of [`TfRep::to_frames`].
    pub fn from_frames(
        frames: &[f32],
        channels: usize,
        steps: usize,
        framing: Framing,
    ) -> Result<Self, AudioError> {
        let mut tf = Self::zeros(channels, steps, framing);
        let width = 2 * channels;
        if frames.len() != steps * tf.bins * width {
            return Err(AudioError::Shape(format!(
                "{} frame values for {steps} steps x {} bins x {width}",
                frames.len(),
                tf.bins
            )));
        }
        for l in 0..steps {
            for f in 0..tf.bins {
                let base = (l * tf.bins + f) * width;
                for c in 0..channels {
                    tf.set(c, f, l, Complex32::new(frames[base + c], frames[base + channels + c]));
                }
            }
        }
        Ok(tf)
    }

    /// Realified view `X'` with dims `[2C, F, L]`.
    pub fn realified(&self) -> crate::nn::Tensor {
        let mut data = Vec::with_capacity(2 * self.data.len());
        data.extend(self.data.iter().map(|v| v.re));
        data.extend(self.data.iter().map(|v| v.im));
        crate::nn::Tensor::new(vec![2 * self.channels, self.bins, self.steps], data)
            .expect("consistent dims")
    }
}

/// Real-input DFT of a fixed length backed by a cached FFT plan.
#[derive(Clone)]
pub struct RealDft {
    n: usize,
    forward: Arc<dyn Fft<f32>>,
    inverse: Arc<dyn Fft<f32>>,
}

impl std::fmt::Debug for RealDft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RealDft").field("n", &self.n).finish()
    }
}

impl RealDft {
    pub fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            n,
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Bins `0..=n/2` of the DFT of `input`.
    pub fn forward(&self, input: &[f32], scratch: &mut Vec<Complex32>, out: &mut [Complex32]) {
        debug_assert_eq!(input.len(), self.n);
        scratch.clear();
        scratch.extend(input.iter().map(|&x| Complex32::new(x, 0.0)));
        self.forward.process(scratch);
        out.copy_from_slice(&scratch[..self.n / 2 + 1]);
    }

    /// Real signal whose half spectrum is `bins`. Imaginary parts of the DC
    /// and (for even `n`) Nyquist bins are ignored.
    pub fn inverse(&self, bins: &[Complex32], scratch: &mut Vec<Complex32>, out: &mut [f32]) {
        let n = self.n;
        let half = n / 2 + 1;
        debug_assert_eq!(bins.len(), half);
        scratch.clear();
        scratch.resize(n, Complex32::new(0.0, 0.0));
        scratch[..half].copy_from_slice(bins);
        scratch[0].im = 0.0;
        if n.is_multiple_of(2) {
            scratch[n / 2].im = 0.0;
        }
        for k in half..n {
            scratch[k] = scratch[n - k].conj();
        }
        self.inverse.process(scratch);
        let scale = 1.0 / n as f32;
        for (o, v) in out.iter_mut().zip(scratch.iter()) {
            *o = v.re * scale;
        }
    }
}

/// Whole-signal analysis. The tail is zero padded to a multiple of `chunk`.
pub fn stft_analyze(signal: &AudioBuffer, framing: Framing) -> Result<TfRep, AudioError> {
    signal.require_rate()?;
    framing.validate()?;
    if signal.is_empty() {
        return Err(AudioError::Empty);
    }
    let steps = framing.num_steps(signal.len());
    let win = framing.window();
    let bins = framing.num_bins();
    let dft = RealDft::new(win);
    let mut tf = TfRep::zeros(signal.num_channels(), steps, framing);
    let mut frame = vec![0.0f32; win];
    let mut spec = vec![Complex32::new(0.0, 0.0); bins];
    let mut scratch = Vec::with_capacity(win);
    for (c, ch) in signal.channels().iter().enumerate() {
        for l in 0..steps {
            let start = (l * framing.chunk) as isize - framing.lookback as isize;
            for (i, v) in frame.iter_mut().enumerate() {
                let idx = start + i as isize;
                *v = if idx >= 0 && (idx as usize) < ch.len() {
                    ch[idx as usize]
                } else {
                    0.0
                };
            }
            dft.forward(&frame, &mut scratch, &mut spec);
            for (f, v) in spec.iter().enumerate() {
                tf.set(c, f, l, *v);
            }
        }
    }
    Ok(tf)
}

/// Whole-signal synthesis producing `steps * chunk` samples per channel.
pub fn istft_synthesize(tf: &TfRep) -> Result<AudioBuffer, AudioError> {
    let framing = tf.framing;
    framing.validate()?;
    if tf.bins != framing.num_bins() || tf.data.len() != tf.channels * tf.bins * tf.steps {
        return Err(AudioError::Shape(format!(
            "{} bins for window {}",
            tf.bins,
            framing.window()
        )));
    }
    let mut channels = Vec::with_capacity(tf.channels);
    let mut spec = vec![Complex32::new(0.0, 0.0); tf.bins];
    for c in 0..tf.channels {
        let mut synth = StreamingIstft::new(framing);
        let mut out = Vec::with_capacity(tf.steps * framing.chunk);
        let mut block = vec![0.0; framing.chunk];
        for l in 0..tf.steps {
            for (f, v) in spec.iter_mut().enumerate() {
                *v = tf.get(c, f, l);
            }
            synth.push(&spec, &mut block);
            out.extend_from_slice(&block);
        }
        channels.push(out);
    }
    AudioBuffer::new(channels, SAMPLE_RATE)
}

/// Incremental analysis: each pushed block of `chunk` samples yields one frame.
///
/// The analyzer sees the input through a `lookahead`-sample delay line, so
/// frame `n` of the delayed stream only needs samples up to the end of block
/// `n`. Running it over `x` is identical to [`stft_analyze`] of `x` delayed by
/// `lookahead` samples.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(into = "StftSnapshot", try_from = "StftSnapshot")]
pub struct StreamingStft {
    framing: Framing,
    dft: RealDft,
    window: Vec<f32>,
    scratch: Vec<Complex32>,
}

impl StreamingStft {
    pub fn new(framing: Framing) -> Self {
        Self {
            framing,
            dft: RealDft::new(framing.window()),
            window: vec![0.0; framing.window()],
            scratch: Vec::with_capacity(framing.window()),
        }
    }

    pub fn framing(&self) -> Framing {
        self.framing
    }

    pub fn reset(&mut self) {
        self.window.fill(0.0);
    }

    pub fn push(&mut self, block: &[f32], out: &mut [Complex32]) {
        let chunk = self.framing.chunk;
        assert_eq!(block.len(), chunk, "streaming STFT expects exactly one chunk");
        self.window.copy_within(chunk.., 0);
        let keep = self.window.len() - chunk;
        self.window[keep..].copy_from_slice(block);
        self.dft.forward(&self.window, &mut self.scratch, out);
    }

    /// Samples retained between calls.
    pub fn state(&self) -> &[f32] {
        &self.window[self.framing.chunk..]
    }
}

/// Incremental synthesis: each pushed frame yields `chunk` final samples.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(into = "IstftSnapshot", try_from = "IstftSnapshot")]
pub struct StreamingIstft {
    framing: Framing,
    dft: RealDft,
    frame: Vec<f32>,
    tail: Vec<f32>,
    started: bool,
    scratch: Vec<Complex32>,
}

impl StreamingIstft {
    pub fn new(framing: Framing) -> Self {
        Self {
            framing,
            dft: RealDft::new(framing.window()),
            frame: vec![0.0; framing.window()],
            tail: vec![0.0; framing.lookahead],
            started: false,
            scratch: Vec::with_capacity(framing.window()),
        }
    }

    pub fn reset(&mut self) {
        self.tail.fill(0.0);
        self.started = false;
    }

    pub fn push(&mut self, spectrum: &[Complex32], out: &mut [f32]) {
        let fr = self.framing;
        assert_eq!(out.len(), fr.chunk);
        self.dft.inverse(spectrum, &mut self.scratch, &mut self.frame);
        let body = &self.frame[fr.discard_head()..];
        out.copy_from_slice(&body[..fr.chunk]);
        if self.started {
            for i in 0..fr.lookahead {
                let w = fr.fade_in(i);
                out[i] = w * body[i] + (1.0 - w) * self.tail[i];
            }
        }
        self.tail.copy_from_slice(&body[fr.chunk..]);
        self.started = true;
    }
}

#[derive(Serialize, Deserialize)]
struct StftSnapshot {
    framing: Framing,
    window: Vec<f32>,
}

impl From<StreamingStft> for StftSnapshot {
    fn from(s: StreamingStft) -> Self {
        Self {
            framing: s.framing,
            window: s.window,
        }
    }
}

impl TryFrom<StftSnapshot> for StreamingStft {
    type Error = String;

    fn try_from(s: StftSnapshot) -> Result<Self, String> {
        s.framing.validate().map_err(|e| e.to_string())?;
        if s.window.len() != s.framing.window() {
            return Err(format!("analysis window holds {} samples, expected {}", s.window.len(), s.framing.window()));
        }
        let mut out = StreamingStft::new(s.framing);
        out.window = s.window;
        Ok(out)
    }
}

#[derive(Serialize, Deserialize)]
struct IstftSnapshot {
    framing: Framing,
    tail: Vec<f32>,
    started: bool,
}

impl From<StreamingIstft> for IstftSnapshot {
    fn from(s: StreamingIstft) -> Self {
        Self {
            framing: s.framing,
            tail: s.tail,
            started: s.started,
        }
    }
}

impl TryFrom<IstftSnapshot> for StreamingIstft {
    type Error = String;

    fn try_from(s: IstftSnapshot) -> Result<Self, String> {
        s.framing.validate().map_err(|e| e.to_string())?;
        if s.tail.len() != s.framing.lookahead {
            return Err(format!("synthesis tail holds {} samples, expected {}", s.tail.len(), s.framing.lookahead));
        }
        let mut out = StreamingIstft::new(s.framing);
        out.tail = s.tail;
        out.started = s.started;
        Ok(out)
    }
}

/// Prepends `delay` zeros and keeps the original length.
pub fn delay_signal(x: &[f32], delay: usize) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    if delay < x.len() {
        out[delay..].copy_from_slice(&x[..x.len() - delay]);
    }
    out
}

fn parse_err(offset: usize, reason: impl Into<String>) -> AudioError {
    AudioError::Parse {
        offset,
        reason: reason.into(),
    }
}

/// WAV sample encodings understood by [`read_wav`] and [`write_wav`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

/// Reads a RIFF/WAVE file: PCM16 or IEEE float32, 16 kHz, one or two channels.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioBuffer, AudioError> {
    let bytes = std::fs::read(path)?;
    decode_wav(&bytes)
}

pub fn decode_wav(bytes: &[u8]) -> Result<AudioBuffer, AudioError> {
    let u16_at = |o: usize| -> Result<u16, AudioError> {
        bytes
            .get(o..o + 2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]))
            .ok_or_else(|| parse_err(o, "truncated"))
    };
    let u32_at = |o: usize| -> Result<u32, AudioError> {
        bytes
            .get(o..o + 4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| parse_err(o, "truncated"))
    };
    if bytes.get(0..4) != Some(b"RIFF") {
        return Err(parse_err(0, "missing RIFF tag"));
    }
    if bytes.get(8..12) != Some(b"WAVE") {
        return Err(parse_err(8, "missing WAVE tag"));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(pos + 4)? as usize;
        let body = pos + 8;
        if body + size > bytes.len() {
            return Err(parse_err(pos, "chunk extends past end of file"));
        }
        match id {
            b"fmt " => {
                let mut tag = u16_at(body)?;
                let channels = u16_at(body + 2)?;
                let rate = u32_at(body + 4)?;
                let bits = u16_at(body + 14)?;
                if tag == 0xFFFE && size >= 26 {
                    tag = u16_at(body + 24)?;
                }
                fmt = Some((tag, channels, rate, bits));
            }
            b"data" => {
                let (tag, channels, rate, bits) =
                    fmt.ok_or_else(|| parse_err(pos, "data chunk before fmt chunk"))?;
                if rate != SAMPLE_RATE {
                    return Err(AudioError::UnsupportedRate(rate));
                }
                if !(1..=2).contains(&channels) {
                    return Err(AudioError::UnsupportedFormat(format!(
                        "{channels} channels"
                    )));
                }
                let nch = channels as usize;
                let data = &bytes[body..body + size];
                let samples: Vec<f32> = match (tag, bits) {
                    (1, 16) => data
                        .chunks_exact(2)
                        .map(|b| i16::from_le_bytes([b[0], b[1]]) as f32 / 32768.0)
                        .collect(),
                    (3, 32) => data
                        .chunks_exact(4)
                        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                        .collect(),
                    _ => {
                        return Err(AudioError::UnsupportedFormat(format!(
                            "format tag {tag} with {bits} bits per sample"
                        )))
                    }
                };
                let frames = samples.len() / nch;
                let mut chans = vec![Vec::with_capacity(frames); nch];
                for frame in samples.chunks_exact(nch) {
                    for (c, v) in frame.iter().enumerate() {
                        chans[c].push(*v);
                    }
                }
                return AudioBuffer::new(chans, SAMPLE_RATE);
            }
            _ => {}
        }
        pos = body + size + (size & 1);
    }
    Err(parse_err(bytes.len(), "no data chunk"))
}

pub fn write_wav(
    path: impl AsRef<Path>,
    audio: &AudioBuffer,
    encoding: WavEncoding,
) -> Result<(), AudioError> {
    std::fs::write(path, encode_wav(audio, encoding)?)?;
    Ok(())
}

pub fn encode_wav(audio: &AudioBuffer, encoding: WavEncoding) -> Result<Vec<u8>, AudioError> {
    audio.require_rate()?;
    let nch = audio.num_channels();
    if nch > 2 {
        return Err(AudioError::UnsupportedFormat(format!("{nch} channels")));
    }
    let (tag, bits) = match encoding {
        WavEncoding::Pcm16 => (1u16, 16u16),
        WavEncoding::Float32 => (3u16, 32u16),
    };
    let block_align = nch as u16 * bits / 8;
    let data_len = audio.len() * block_align as usize;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&(nch as u16).to_le_bytes());
    out.extend_from_slice(&SAMPLE_RATE.to_le_bytes());
    out.extend_from_slice(&(SAMPLE_RATE * block_align as u32).to_le_bytes());
    out.extend_from_slice(&block_align.to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for i in 0..audio.len() {
        for c in 0..nch {
            let v = audio.channel(c)[i];
            match encoding {
                WavEncoding::Pcm16 => {
                    let q = (v * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                    out.extend_from_slice(&q.to_le_bytes());
                }
                WavEncoding::Float32 => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(len: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn main_framing_has_133_bins() {
        assert_eq!(Framing::MAIN.window(), 264);
        assert_eq!(Framing::MAIN.num_bins(), 133);
        assert_eq!(Framing::MAIN.out_window(), 232);
        assert_eq!(Framing::BEAMFORMER.out_window(), 160);
        assert_eq!(Framing::BEAMFORMER.num_bins(), 129);
    }

    #[test]
    fn latencies() {
        assert_eq!(Framing::MAIN.latency_samples(), 232);
        assert_eq!(Framing::BEAMFORMER.latency_samples(), 160);
        assert!((232.0 / 16.0 - 14.5f64).abs() < 1e-12);
    }

    #[test]
    fn zero_second_is_zero() {
        let x = AudioBuffer::zeros(1, 16000);
        let tf = stft_analyze(&x, Framing::MAIN).unwrap();
        assert_eq!(tf.steps(), 80);
        assert!(tf.data().iter().all(|v| v.re == 0.0 && v.im == 0.0));
        let y = istft_synthesize(&tf).unwrap();
        assert!(y.channel(0).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rejects_wrong_rate_and_empty() {
        let x = AudioBuffer::new(vec![vec![0.0; 100]], 44100).unwrap();
        assert!(matches!(
            stft_analyze(&x, Framing::MAIN),
            Err(AudioError::RateMismatch { expected: 16000, .. })
        ));
        let e = AudioBuffer::mono(vec![]).unwrap();
        assert!(matches!(stft_analyze(&e, Framing::MAIN), Err(AudioError::Empty)));
    }

    #[test]
    fn sine_peak_matches_naive_dft() {
        let x: Vec<f32> = (0..3200)
            .map(|n| (2.0 * std::f64::consts::PI * 1000.0 * n as f64 / 16000.0).sin() as f32)
            .collect();
        let tf = stft_analyze(&AudioBuffer::mono(x.clone()).unwrap(), Framing::MAIN).unwrap();
        let win = 264;
        for l in 2..tf.steps() - 2 {
            // naive O(N^2) DFT of the same window
            let start = l * 200 - 32;
            let naive: Vec<f64> = (0..133)
                .map(|k| {
                    let (mut re, mut im) = (0.0f64, 0.0f64);
                    for n in 0..win {
                        let a = -2.0 * std::f64::consts::PI * (k * n) as f64 / win as f64;
                        re += x[start + n] as f64 * a.cos();
                        im += x[start + n] as f64 * a.sin();
                    }
                    (re * re + im * im).sqrt()
                })
                .collect();
            for k in 0..133 {
                assert!((tf.get(0, k, l).norm() as f64 - naive[k]).abs() < 1e-3 * (1.0 + naive[k]));
            }
            let peak = (0..133)
                .max_by(|&a, &b| tf.get(0, a, l).norm().total_cmp(&tf.get(0, b, l).norm()))
                .unwrap();
            assert!(peak == 16 || peak == 17, "peak {peak}");
        }
    }

    #[test]
    fn offline_round_trip_is_identity() {
        for framing in [Framing::MAIN, Framing::BEAMFORMER] {
            let x = noise(5000, 3);
            let tf = stft_analyze(&AudioBuffer::mono(x.clone()).unwrap(), framing).unwrap();
            let y = istft_synthesize(&tf).unwrap();
            assert!(y.len() >= x.len());
            let err = x
                .iter()
                .zip(y.channel(0))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(err <= 1e-5, "{err}");
        }
    }

    #[test]
    fn streaming_equals_offline_on_delayed_input() {
        let fr = Framing::MAIN;
        let x = noise(2000, 9);
        let mut an = StreamingStft::new(fr);
        let mut spec = vec![Complex32::new(0.0, 0.0); fr.num_bins()];
        let delayed = AudioBuffer::mono(delay_signal(&[x.clone(), vec![0.0; 32]].concat(), 32)).unwrap();
        let off = stft_analyze(&delayed, fr).unwrap();
        for (n, block) in x.chunks(200).enumerate() {
            an.push(block, &mut spec);
            for f in 0..fr.num_bins() {
                assert!((spec[f] - off.get(0, f, n)).norm() < 1e-4);
            }
        }
    }

    #[test]
    fn causality_of_analysis() {
        let fr = Framing::MAIN;
        let x = noise(4000, 1);
        let mut y = x.clone();
        for v in &mut y[2500..] {
            *v += 1.0;
        }
        let a = stft_analyze(&AudioBuffer::mono(x).unwrap(), fr).unwrap();
        let b = stft_analyze(&AudioBuffer::mono(y).unwrap(), fr).unwrap();
        for l in 0..a.steps() {
            let end = (l + 1) * fr.chunk + fr.lookahead;
            if end <= 2500 {
                for f in 0..fr.num_bins() {
                    assert_eq!(a.get(0, f, l), b.get(0, f, l));
                }
            }
        }
    }

    #[test]
    fn wav_round_trips() {
        let x = AudioBuffer::new(vec![noise(300, 1), noise(300, 2)], SAMPLE_RATE).unwrap();
        let bytes = encode_wav(&x, WavEncoding::Float32).unwrap();
        assert_eq!(decode_wav(&bytes).unwrap(), x);
    }

    #[test]
    fn pcm16_scaling() {
        let mut bytes = encode_wav(&AudioBuffer::mono(vec![0.0, 0.0]).unwrap(), WavEncoding::Pcm16).unwrap();
        let n = bytes.len();
        bytes[n - 4..n - 2].copy_from_slice(&(-32768i16).to_le_bytes());
        let a = decode_wav(&bytes).unwrap();
        assert_eq!(a.channel(0)[0], -1.0);
    }

    #[test]
    fn rejects_44k_wav() {
        let mut bytes = encode_wav(&AudioBuffer::mono(vec![0.0; 4]).unwrap(), WavEncoding::Pcm16).unwrap();
        bytes[24..28].copy_from_slice(&44100u32.to_le_bytes());
        let err = decode_wav(&bytes).unwrap_err();
        assert!(matches!(err, AudioError::UnsupportedRate(44100)));
        assert!(err.to_string().contains("16000"));
    }
}
