//! Dual-rate streaming: beamformer and fast model on the caller's thread,
//! slow model on a worker, joined by a latest-wins embedding mailbox.

use crate::audio::{stft_analyze, AudioBuffer, AudioError, Complex32, Framing, StreamingStft, SAMPLE_RATE};
use crate::models::{
    init_random_weights, BeamformerModel, Embedding, FastModel, ModelError, ModelKind, ModelManifest, Parameterized,
    SlowModel,
};
use crate::nn::WeightArchive;
use crate::seed::stage_seed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Instant;
use thiserror::Error;

pub const FAST_WEIGHTS: &str = "fast.egsw";
pub const SLOW_WEIGHTS: &str = "slow.egsw";
pub const BEAMFORMER_WEIGHTS: &str = "beamformer.egsw";

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error("input is {actual:.3} s long, shorter than one slow period of {period:.3} s")]
    TooShort { actual: f64, period: f64 },
    #[error("no self-speech source: {0}")]
    MissingSelfSpeech(String),
    #[error("invalid pipeline config: {0}")]
    Config(String),
    #[error("failed to load weights from {path}: {reason}")]
    Weights { path: PathBuf, reason: String },
    #[error("slow worker failed: {0}")]
    Worker(String),
}

/// How chunk delivery is timed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockMode {
    /// Slow work finishes instantly in stream time: the fast path waits for
    /// each slab, so results never depend on thread timing.
    Virtual,
    /// Wall clock: the fast path never waits and reuses the previous slab
    /// when the worker is late.
    Real,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Slow period `T` in seconds.
    pub period_s: f64,
    pub enable_beamformer: bool,
    pub clock: ClockMode,
    /// Drop the streaming delay so output sample `i` lines up with input `i`.
    pub align: bool,
    pub weights_dir: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            period_s: 1.0,
            enable_beamformer: true,
            clock: ClockMode::Virtual,
            align: true,
            weights_dir: None,
        }
    }
}

impl PipelineConfig {
    /// Fast chunk duration `tau`, fixed by the main framing.
    pub fn tau_s() -> f64 {
        Framing::MAIN.chunk as f64 / f64::from(SAMPLE_RATE)
    }

    /// `T` as a whole number of fast steps.
    pub fn period_steps(&self) -> Result<usize, RuntimeError> {
        let ratio = self.period_s / Self::tau_s();
        let steps = ratio.round();
        if !(self.period_s > 0.0) || (ratio - steps).abs() > 1e-6 || steps < 1.0 {
            return Err(RuntimeError::Config(format!(
                "T = {} s is not a positive multiple of tau = {} s",
                self.period_s,
                Self::tau_s()
            )));
        }
        Ok(steps as usize)
    }
}

/// The three networks a pipeline runs.
#[derive(Debug, Clone)]
pub struct PipelineModels {
    pub fast: FastModel,
    pub slow: SlowModel,
    pub beamformer: Option<BeamformerModel>,
}

fn manifest_path(dir: &Path, kind: ModelKind) -> PathBuf {
    let name = match kind {
        ModelKind::Fast => "fast.toml",
        ModelKind::Slow => "slow.toml",
        ModelKind::Beamformer => "beamformer.toml",
    };
    dir.join(name)
}

fn load_manifest(dir: &Path, kind: ModelKind) -> Result<ModelManifest, RuntimeError> {
    let path = manifest_path(dir, kind);
    if !path.exists() {
        return Ok(ModelManifest::default_for(kind));
    }
    let text = std::fs::read_to_string(&path).map_err(|e| RuntimeError::Weights {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    ModelManifest::from_toml(&text).map_err(|e| RuntimeError::Weights {
        path,
        reason: e.to_string(),
    })
}

fn load_archive(path: &Path) -> Result<WeightArchive, RuntimeError> {
    let bytes = std::fs::read(path).map_err(|e| RuntimeError::Weights {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    WeightArchive::from_bytes(&bytes).map_err(|e| RuntimeError::Weights {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

impl PipelineModels {
    /// Default manifests with seeded random weights.
    pub fn random(seed: u64) -> Result<Self, RuntimeError> {
        let weights = |m: &ModelManifest, stage: &str| init_random_weights(m, stage_seed(seed, stage, 0));
        let (fm, sm, bm) = (
            ModelManifest::fast_default(),
            ModelManifest::slow_default(),
            ModelManifest::beamformer_default(),
        );
        Ok(Self {
            fast: FastModel::from_archive(fm.clone(), &weights(&fm, "weights/fast")?)?,
            slow: SlowModel::from_archive(sm.clone(), &weights(&sm, "weights/slow")?)?,
            beamformer: Some(BeamformerModel::from_archive(bm.clone(), &weights(&bm, "weights/beamformer")?)?),
        })
    }

    /// Loads `fast.egsw`, `slow.egsw` and, when `with_beamformer`,
    /// `beamformer.egsw` from `dir`. A `<kind>.toml` next to an archive
    /// overrides the default manifest.
    pub fn load_dir(dir: &Path, with_beamformer: bool) -> Result<Self, RuntimeError> {
        let wrap = |path: PathBuf| move |e: ModelError| RuntimeError::Weights { path, reason: e.to_string() };
        let p = dir.join(FAST_WEIGHTS);
        let fast = FastModel::from_archive(load_manifest(dir, ModelKind::Fast)?, &load_archive(&p)?).map_err(wrap(p))?;
        let p = dir.join(SLOW_WEIGHTS);
        let slow = SlowModel::from_archive(load_manifest(dir, ModelKind::Slow)?, &load_archive(&p)?).map_err(wrap(p))?;
        let beamformer = if with_beamformer {
            let p = dir.join(BEAMFORMER_WEIGHTS);
            Some(
                BeamformerModel::from_archive(load_manifest(dir, ModelKind::Beamformer)?, &load_archive(&p)?)
                    .map_err(wrap(p))?,
            )
        } else {
            None
        };
        Ok(Self { fast, slow, beamformer })
    }

    /// Writes archives and manifests in the layout [`Self::load_dir`] reads.
    pub fn save_dir(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(FAST_WEIGHTS), self.fast.to_archive().to_bytes())?;
        std::fs::write(manifest_path(dir, ModelKind::Fast), self.fast.manifest().to_toml())?;
        std::fs::write(dir.join(SLOW_WEIGHTS), self.slow.to_archive().to_bytes())?;
        std::fs::write(manifest_path(dir, ModelKind::Slow), self.slow.manifest().to_toml())?;
        if let Some(bf) = &self.beamformer {
            std::fs::write(dir.join(BEAMFORMER_WEIGHTS), bf.to_archive().to_bytes())?;
            std::fs::write(manifest_path(dir, ModelKind::Beamformer), bf.manifest().to_toml())?;
        }
        Ok(())
    }
}

/// Embedding slab `index` covers fast steps `[index * T, (index + 1) * T)`.
#[derive(Debug, Clone)]
pub struct Posted {
    pub index: usize,
    pub embedding: Arc<Embedding>,
}

#[derive(Debug, Default)]
struct MailboxSlot {
    latest: Option<Posted>,
    failed: Option<String>,
}

/// Single-slot, latest-wins hand-off from the slow worker to the fast path.
#[derive(Debug, Default)]
pub struct EmbeddingMailbox {
    slot: Mutex<MailboxSlot>,
    posted: Condvar,
}

impl EmbeddingMailbox {
    pub fn new() -> Self {
        Self::default()
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, MailboxSlot> {
        self.slot.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Replaces whatever was there; older slabs are simply dropped.
    pub fn post(&self, index: usize, embedding: Arc<Embedding>) {
        let mut s = self.lock();
        if s.latest.as_ref().is_none_or(|p| p.index < index) {
            s.latest = Some(Posted { index, embedding });
        }
        drop(s);
        self.posted.notify_all();
    }

    pub fn fail(&self, reason: String) {
        self.lock().failed = Some(reason);
        self.posted.notify_all();
    }

    /// Most recent slab, without waiting.
    pub fn latest(&self) -> Option<Posted> {
        self.lock().latest.clone()
    }

    /// Blocks until slab `index` (or a newer one) is posted. Only the
    /// virtual clock uses this.
    pub fn wait_for(&self, index: usize) -> Result<Posted, RuntimeError> {
        let mut s = self.lock();
        loop {
            if let Some(p) = s.latest.as_ref().filter(|p| p.index >= index) {
                return Ok(p.clone());
            }
            if let Some(reason) = &s.failed {
                return Err(RuntimeError::Worker(reason.clone()));
            }
            s = self.posted.wait(s).unwrap_or_else(|p| p.into_inner());
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Fast,
    Slow,
    Beamformer,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Fast => "fast",
            Stage::Slow => "slow",
            Stage::Beamformer => "beamformer",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub chunk_index: usize,
    pub wall_us: f64,
    pub peak_rss_bytes: u64,
}

/// Peak resident set size of this process (`VmHWM`), 0 when unavailable.
pub fn peak_rss_bytes() -> u64 {
    let Ok(status) = std::fs::read_to_string("/proc/self/status") else {
        return 0;
    };
    status
        .lines()
        .find_map(|l| l.strip_prefix("VmHWM:"))
        .and_then(|v| v.trim().trim_end_matches("kB").trim().parse::<u64>().ok())
        .map_or(0, |kb| kb * 1024)
}

/// Resets the peak RSS counter so the next reading covers only what runs
/// afterwards. Returns false when the kernel refuses.
pub fn reset_peak_rss() -> bool {
    std::fs::write("/proc/self/clear_refs", "5").is_ok()
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Nearest-rank percentile, `q` in `[0, 1]`.
pub fn percentile(xs: &[f64], q: f64) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RuntimeReport {
    pub records: Vec<StageRecord>,
    pub tau_s: f64,
    pub period_s: f64,
    /// Chunks that ran on an older slab because the worker was late.
    pub stale_embeddings: usize,
    /// Delay between input and raw streamed output, in samples.
    pub stream_delay_samples: usize,
    pub total_wall_s: f64,
}

impl RuntimeReport {
    pub fn times_us(&self, stage: Stage) -> Vec<f64> {
        self.records.iter().filter(|r| r.stage == stage).map(|r| r.wall_us).collect()
    }

    pub fn mean_us(&self, stage: Stage) -> f64 {
        mean(&self.times_us(stage))
    }

    pub fn p95_us(&self, stage: Stage) -> f64 {
        percentile(&self.times_us(stage), 0.95)
    }

    /// Mean fast-model chunk time over `tau`.
    pub fn rtf(&self) -> f64 {
        self.mean_us(Stage::Fast) * 1e-6 / self.tau_s
    }

    /// Same, counting the beamformer work done per fast chunk as well.
    pub fn rtf_fast_path(&self) -> f64 {
        let chunks = self.times_us(Stage::Fast).len().max(1) as f64;
        let bf: f64 = self.times_us(Stage::Beamformer).iter().sum();
        (self.mean_us(Stage::Fast) + bf / chunks) * 1e-6 / self.tau_s
    }

    pub fn peak_rss(&self, stage: Stage) -> u64 {
        self.records.iter().filter(|r| r.stage == stage).map(|r| r.peak_rss_bytes).max().unwrap_or(0)
    }

    /// `stage,chunk_index,wall_us,peak_rss_bytes`, one row per record.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("stage,chunk_index,wall_us,peak_rss_bytes\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{},{:.3},{}", r.stage.name(), r.chunk_index, r.wall_us, r.peak_rss_bytes);
        }
        s
    }
}

struct SlowJob {
    period: usize,
    mixture: Vec<f32>,
    selfspeech: Vec<f32>,
}

/// Slow-model side of the pipeline: its own STFT delay lines plus model state.
struct SlowRunner<'m> {
    model: &'m SlowModel,
    stft_mix: StreamingStft,
    stft_self: StreamingStft,
    state: crate::models::SlowState,
}

impl<'m> SlowRunner<'m> {
    fn new(model: &'m SlowModel) -> Self {
        Self {
            model,
            stft_mix: StreamingStft::new(model.framing()),
            stft_self: StreamingStft::new(model.framing()),
            state: model.new_state(),
        }
    }

    /// One period of mixture and self-speech in, the next slab out.
    fn run(&mut self, mixture: &[f32], selfspeech: &[f32]) -> Result<Embedding, ModelError> {
        let chunk = self.model.framing().chunk;
        let f = self.model.freqs();
        let steps = mixture.len() / chunk;
        let mut a = vec![Complex32::new(0.0, 0.0); f];
        let mut b = a.clone();
        let mut frames = Vec::with_capacity(steps * f * 4);
        for (m, s) in mixture.chunks_exact(chunk).zip(selfspeech.chunks_exact(chunk)) {
            self.stft_mix.push(m, &mut a);
            self.stft_self.push(s, &mut b);
            for (x, y) in a.iter().zip(&b) {
                frames.extend([x.re, y.re, x.im, y.im]);
            }
        }
        self.model.embed_frames(&frames, steps, &mut self.state)
    }
}

/// Samples of delay added to the mixture and to the beamformer output before
/// they reach the slow model. The beamformer output lags its input by its
/// stream delay, and its 96-sample blocks do not line up with period
/// boundaries, so both paths get one extra beamformer chunk of slack.
fn slow_input_delays(bf: Option<&BeamformerModel>) -> (usize, usize) {
    match bf {
        Some(b) => {
            let fr = b.framing();
            (fr.stream_delay() + fr.chunk, fr.chunk)
        }
        None => (0, 0),
    }
}

struct Plan {
    len: usize,
    chunks: usize,
    period_steps: usize,
    periods: usize,
    mixture: Vec<f32>,
    binaural: Option<[Vec<f32>; 2]>,
    selfspeech: Option<Vec<f32>>,
    align: usize,
}

fn plan(
    input: &AudioBuffer,
    selfspeech: Option<&[f32]>,
    models: &PipelineModels,
    config: &PipelineConfig,
) -> Result<Plan, RuntimeError> {
    let period_steps = config.period_steps()?;
    let fr = models.fast.framing();
    let n = input.len();
    let period_len = period_steps * fr.chunk;
    if n < period_len {
        return Err(RuntimeError::TooShort {
            actual: input.duration_secs(),
            period: config.period_s,
        });
    }
    if models.slow.framing() != fr {
        return Err(RuntimeError::Config("fast and slow models must share a framing".into()));
    }
    let use_bf = config.enable_beamformer && input.num_channels() == 2;
    if use_bf && models.beamformer.is_none() {
        return Err(RuntimeError::Config("beamformer enabled but no beamformer weights loaded".into()));
    }
    if input.num_channels() > 2 {
        return Err(RuntimeError::Config(format!("{} input channels, expected 1 or 2", input.num_channels())));
    }
    let align = if config.align { fr.stream_delay() } else { 0 };
    let chunks = (n + align).div_ceil(fr.chunk);
    let padded = chunks * fr.chunk;
    let pad = |x: &[f32]| {
        let mut v = x.to_vec();
        v.resize(padded, 0.0);
        v
    };
    let mixture = pad(&input.downmix());
    let (binaural, selfspeech) = if use_bf {
        (Some([pad(input.channel(0)), pad(input.channel(1))]), None)
    } else {
        let s = selfspeech.ok_or_else(|| {
            RuntimeError::MissingSelfSpeech(if input.num_channels() == 1 {
                "mono input needs a self-speech track".into()
            } else {
                "beamformer disabled and no self-speech track given".into()
            })
        })?;
        if s.len() != n {
            return Err(RuntimeError::Config(format!("self-speech has {} samples, input {n}", s.len())));
        }
        (None, Some(pad(s)))
    };
    Ok(Plan {
        len: n,
        chunks,
        period_steps,
        // a slab is only worth computing if some chunk will consume it
        periods: (chunks - 1) / period_steps,
        mixture,
        binaural,
        selfspeech,
        align,
    })
}

/// The slow model with its period set to the config's `T`.
fn slow_with_period(slow: &SlowModel, steps: usize) -> Result<std::borrow::Cow<'_, SlowModel>, RuntimeError> {
    if slow.period_steps() == steps {
        return Ok(std::borrow::Cow::Borrowed(slow));
    }
    let mut s = slow.clone();
    s.set_period_steps(steps)?;
    Ok(std::borrow::Cow::Owned(s))
}

fn finish(mut raw: Vec<f32>, plan: &Plan) -> Result<AudioBuffer, RuntimeError> {
    raw.drain(..plan.align);
    raw.truncate(plan.len);
    Ok(AudioBuffer::mono(raw)?)
}

/// Runs the dual-rate pipeline over `input`.
///
/// Binaural input is downmixed for the fast and slow models and beamformed
/// for self-speech. Mono input (or a disabled beamformer) takes self-speech
/// from `selfspeech`.
pub fn process_stream(
    input: &AudioBuffer,
    selfspeech: Option<&[f32]>,
    models: &PipelineModels,
    config: &PipelineConfig,
) -> Result<(AudioBuffer, RuntimeReport), RuntimeError> {
    let plan = plan(input, selfspeech, models, config)?;
    let fast = &models.fast;
    let chunk = fast.framing().chunk;
    let ps = plan.period_steps;
    let period_len = ps * chunk;
    let bf = plan.binaural.as_ref().and(models.beamformer.as_ref());
    let (mix_delay, self_delay) = slow_input_delays(bf);
    let slow = slow_with_period(&models.slow, ps)?;
    let slow: &SlowModel = &slow;

    let mailbox = EmbeddingMailbox::new();
    let started = Instant::now();
    let (tx, rx) = mpsc::channel::<SlowJob>();

    std::thread::scope(|scope| {
        let mailbox = &mailbox;
        let worker = scope.spawn(move || {
            let mut runner = SlowRunner::new(slow);
            let mut times = Vec::new();
            for job in rx {
                let t = Instant::now();
                match runner.run(&job.mixture, &job.selfspeech) {
                    Ok(e) => {
                        let us = t.elapsed().as_secs_f64() * 1e6;
                        times.push(StageRecord {
                            stage: Stage::Slow,
                            chunk_index: job.period,
                            wall_us: us,
                            peak_rss_bytes: peak_rss_bytes(),
                        });
                        mailbox.post(job.period + 1, Arc::new(e));
                    }
                    Err(e) => {
                        mailbox.fail(e.to_string());
                        break;
                    }
                }
            }
            times
        });

        let result = (|| -> Result<(Vec<f32>, Vec<StageRecord>, usize), RuntimeError> {
            let mut records = Vec::with_capacity(plan.chunks * 2);
            let mut out = Vec::with_capacity(plan.chunks * chunk);
            let mut fast_state = fast.new_state();
            let mut bf_state = bf.map(|b| b.new_state());
            let bf_chunk = bf.map_or(0, |b| b.framing().chunk);
            let mut bf_pending = [Vec::new(), Vec::new()];
            let mut bf_index = 0;
            let mut mix_stream = vec![0.0f32; mix_delay];
            let mut self_stream = vec![0.0f32; self_delay];
            let mut current = Posted {
                index: 0,
                embedding: Arc::new(Embedding::zeros(ps, fast.freqs(), fast.latent_dim(), ps)),
            };
            let mut stale = 0;
            let mut rss = peak_rss_bytes();

            for c in 0..plan.chunks {
                let span = c * chunk..(c + 1) * chunk;
                if let (Some(b), Some(st), Some(x)) = (bf, bf_state.as_mut(), plan.binaural.as_ref()) {
                    bf_pending[0].extend_from_slice(&x[0][span.clone()]);
                    bf_pending[1].extend_from_slice(&x[1][span.clone()]);
                    while bf_pending[0].len() >= bf_chunk {
                        let t = Instant::now();
                        let y = b.process_chunk(&bf_pending[0][..bf_chunk], &bf_pending[1][..bf_chunk], st)?;
                        records.push(StageRecord {
                            stage: Stage::Beamformer,
                            chunk_index: bf_index,
                            wall_us: t.elapsed().as_secs_f64() * 1e6,
                            peak_rss_bytes: rss,
                        });
                        bf_index += 1;
                        self_stream.extend_from_slice(&y);
                        bf_pending.iter_mut().for_each(|p| drop(p.drain(..bf_chunk)));
                    }
                } else if let Some(s) = plan.selfspeech.as_ref() {
                    self_stream.extend_from_slice(&s[span.clone()]);
                }
                mix_stream.extend_from_slice(&plan.mixture[span.clone()]);

                let slab = c / ps;
                if current.index < slab {
                    match config.clock {
                        ClockMode::Virtual => current = mailbox.wait_for(slab)?,
                        ClockMode::Real => {
                            if let Some(p) = mailbox.latest().filter(|p| p.index > current.index) {
                                current = p;
                            }
                        }
                    }
                }
                if current.index < slab {
                    stale += 1;
                }
                let t = Instant::now();
                let y = fast.process_chunk(&plan.mixture[span], current.embedding.slice(c % ps), &mut fast_state)?;
                rss = peak_rss_bytes();
                records.push(StageRecord {
                    stage: Stage::Fast,
                    chunk_index: c,
                    wall_us: t.elapsed().as_secs_f64() * 1e6,
                    peak_rss_bytes: rss,
                });
                out.extend_from_slice(&y);

                if (c + 1) % ps == 0 && (c + 1) / ps <= plan.periods {
                    let job = SlowJob {
                        period: c / ps,
                        mixture: mix_stream.drain(..period_len).collect(),
                        selfspeech: self_stream.drain(..period_len).collect(),
                    };
                    if tx.send(job).is_err() {
                        return Err(RuntimeError::Worker("slow worker exited early".into()));
                    }
                }
            }
            Ok((out, records, stale))
        })();
        drop(tx);
        let slow_records = worker.join().map_err(|_| RuntimeError::Worker("slow worker panicked".into()))?;
        let (out, mut records, stale) = result?;
        records.extend(slow_records);
        let report = RuntimeReport {
            records,
            tau_s: PipelineConfig::tau_s(),
            period_s: config.period_s,
            stale_embeddings: stale,
            stream_delay_samples: fast.framing().stream_delay() - plan.align,
            total_wall_s: started.elapsed().as_secs_f64(),
        };
        Ok((finish(out, &plan)?, report))
    })
}

/// Single-threaded reference: beamform the whole input, run the slow model
/// over every period at once, then the fast model offline. Matches
/// [`process_stream`] under the virtual clock.
pub fn process_sequential(
    input: &AudioBuffer,
    selfspeech: Option<&[f32]>,
    models: &PipelineModels,
    config: &PipelineConfig,
) -> Result<AudioBuffer, RuntimeError> {
    let plan = plan(input, selfspeech, models, config)?;
    let fast = &models.fast;
    let fr = fast.framing();
    let ps = plan.period_steps;
    let padded = plan.chunks * fr.chunk;
    let bf = plan.binaural.as_ref().and(models.beamformer.as_ref());
    let (mix_delay, self_delay) = slow_input_delays(bf);
    let zeros = |n: usize| vec![0.0f32; n];

    let selfspeech = match (bf, plan.binaural.as_ref()) {
        (Some(b), Some(x)) => {
            // streamed beamformer output == offline output on the delayed input
            let d = b.framing().stream_delay();
            let left = [zeros(d), x[0].clone()].concat();
            let right = [zeros(d), x[1].clone()].concat();
            b.process_offline(&AudioBuffer::new(vec![left, right], SAMPLE_RATE)?)?
        }
        _ => plan.selfspeech.clone().expect("plan guarantees a self-speech source"),
    };
    let mix_d = [zeros(mix_delay), plan.mixture.clone()].concat();
    let self_d = [zeros(self_delay), selfspeech].concat();

    let slow = slow_with_period(&models.slow, ps)?;
    let mut embedding = Embedding::zeros(ps, fast.freqs(), fast.latent_dim(), ps);
    if plan.periods > 0 {
        let steps = plan.periods * ps;
        let n = steps * fr.chunk;
        let look = slow.framing().stream_delay();
        let spec = |x: &[f32]| -> Result<crate::audio::TfRep, RuntimeError> {
            let y = [zeros(look), x[..n].to_vec()].concat();
            let tf = stft_analyze(&AudioBuffer::mono(y)?, slow.framing())?;
            let keep: Vec<Complex32> = (0..tf.bins())
                .flat_map(|f| (0..steps).map(move |l| (f, l)))
                .map(|(f, l)| tf.get(0, f, l))
                .collect();
            Ok(crate::audio::TfRep::from_parts(keep, 1, steps, slow.framing())?)
        };
        let e = slow.forward(&spec(&mix_d)?, &spec(&self_d)?, &mut slow.new_state())?;
        embedding.append(&e);
    }
    // the offline fast pass on the delayed mixture has one extra step
    let extra = plan.chunks + 1 - embedding.steps.min(plan.chunks + 1);
    embedding.append(&Embedding::zeros(extra, fast.freqs(), fast.latent_dim(), ps));
    let delayed = [zeros(fr.stream_delay()), plan.mixture.clone()].concat();
    let mut raw = fast.process_offline(&delayed, &embedding)?;
    raw.truncate(padded);
    finish(raw, &plan)
}

/// Timing samples from [`bench`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    /// One row per stage per repeat: the mean unit time of that repeat.
    pub samples: Vec<StageRecord>,
    /// Every individual chunk / period time, for the latency CDF.
    pub unit_times: Vec<(Stage, f64)>,
    pub tau_s: f64,
    pub period_s: f64,
    pub duration_s: f64,
    pub repeats: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: Stage,
    pub units: usize,
    pub mean_us: f64,
    pub p95_us: f64,
    pub peak_rss_bytes: u64,
}

impl BenchReport {
    fn units(&self, stage: Stage) -> Vec<f64> {
        self.unit_times.iter().filter(|(s, _)| *s == stage).map(|(_, t)| *t).collect()
    }

    pub fn summary(&self, stage: Stage) -> StageSummary {
        let u = self.units(stage);
        let peaks: Vec<f64> =
            self.samples.iter().filter(|r| r.stage == stage).map(|r| r.peak_rss_bytes as f64).collect();
        StageSummary {
            stage,
            units: u.len(),
            mean_us: mean(&u),
            p95_us: percentile(&u, 0.95),
            peak_rss_bytes: mean(&peaks).round() as u64,
        }
    }

    /// Mean fast-model chunk time over `tau`.
    pub fn rtf(&self) -> f64 {
        self.summary(Stage::Fast).mean_us * 1e-6 / self.tau_s
    }

    pub fn to_csv(&self) -> String {
        RuntimeReport {
            records: self.samples.clone(),
            ..Default::default()
        }
        .to_csv()
    }

    /// Empirical CDF of unit times, one row per 5% step, one column per stage.
    pub fn cdf_table(&self) -> String {
        let stages = [Stage::Fast, Stage::Slow, Stage::Beamformer];
        let mut s = String::from("cdf");
        for st in stages {
            let _ = write!(s, ",{}_us", st.name());
        }
        s.push('\n');
        let units: Vec<Vec<f64>> = stages.iter().map(|&st| self.units(st)).collect();
        for i in 1..=20 {
            let q = i as f64 / 20.0;
            let _ = write!(s, "{q:.2}");
            for u in &units {
                let _ = write!(s, ",{:.1}", percentile(u, q));
            }
            s.push('\n');
        }
        s
    }
}

/// Times each model on its own over `duration_s` of noise, `repeats` times.
/// Peak memory is reset before every stage when the kernel allows it.
pub fn bench(
    models: &PipelineModels,
    config: &PipelineConfig,
    duration_s: f64,
    repeats: usize,
    seed: u64,
) -> Result<BenchReport, RuntimeError> {
    let ps = config.period_steps()?;
    let fast = &models.fast;
    let chunk = fast.framing().chunk;
    let chunks = ((duration_s * f64::from(SAMPLE_RATE)) as usize / chunk).max(1);
    let periods = (chunks / ps).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(seed, "bench", 0));
    let n = chunks.max(periods * ps) * chunk;
    let noise: Vec<f32> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
    let noise2: Vec<f32> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
    let embedding = vec![0.5f32; fast.freqs() * fast.latent_dim()];

    let mut report = BenchReport {
        tau_s: PipelineConfig::tau_s(),
        period_s: config.period_s,
        duration_s,
        repeats,
        ..Default::default()
    };
    let record = |report: &mut BenchReport, stage: Stage, repeat: usize, times: Vec<f64>| {
        report.samples.push(StageRecord {
            stage,
            chunk_index: repeat,
            wall_us: mean(&times),
            peak_rss_bytes: peak_rss_bytes(),
        });
        report.unit_times.extend(times.into_iter().map(|t| (stage, t)));
    };

    for r in 0..repeats {
        reset_peak_rss();
        let mut st = fast.new_state();
        let mut times = Vec::with_capacity(chunks);
        for c in noise[..chunks * chunk].chunks_exact(chunk) {
            let t = Instant::now();
            fast.process_chunk(c, &embedding, &mut st)?;
            times.push(t.elapsed().as_secs_f64() * 1e6);
        }
        record(&mut report, Stage::Fast, r, times);

        reset_peak_rss();
        let slow = slow_with_period(&models.slow, ps)?;
        let mut runner = SlowRunner::new(&slow);
        let mut times = Vec::with_capacity(periods);
        let plen = ps * chunk;
        for p in 0..periods {
            let t = Instant::now();
            runner.run(&noise[p * plen..(p + 1) * plen], &noise2[p * plen..(p + 1) * plen])?;
            times.push(t.elapsed().as_secs_f64() * 1e6);
        }
        record(&mut report, Stage::Slow, r, times);

        if let (true, Some(b)) = (config.enable_beamformer, models.beamformer.as_ref()) {
            reset_peak_rss();
            let bc = b.framing().chunk;
            let mut st = b.new_state();
            let mut times = Vec::new();
            for (l, rr) in noise.chunks_exact(bc).zip(noise2.chunks_exact(bc)) {
                let t = Instant::now();
                b.process_chunk(l, rr, &mut st)?;
                times.push(t.elapsed().as_secs_f64() * 1e6);
            }
            record(&mut report, Stage::Beamformer, r, times);
        }
    }
    Ok(report)
}
