//! Separation scores, per-turn selection rates, training losses and
//! turn-taking statistics.

use crate::synth::{ConversationScript, Utterance};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Scores are clamped to this many dB either way.
pub const DB_LIMIT: f64 = 60.0;
/// Silences longer than this split inter-pausal units.
pub const IPU_GAP_S: f64 = 0.2;
/// Turns shorter than this are too short to score reliably.
pub const MIN_TURN_S: f64 = 0.5;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricError {
    #[error("reference signal is silent")]
    ZeroReference,
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("{0}")]
    Structure(String),
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum()
}

fn clamp_db(ratio_num: f64, ratio_den: f64) -> f64 {
    if ratio_num <= 0.0 {
        return -DB_LIMIT;
    }
    if ratio_den <= 0.0 {
        return DB_LIMIT;
    }
    (10.0 * (ratio_num / ratio_den).log10()).clamp(-DB_LIMIT, DB_LIMIT)
}

/// Scale-invariant SDR of `estimate` against `reference`, in dB.
pub fn si_sdr(estimate: &[f32], reference: &[f32]) -> Result<f64, MetricError> {
    if estimate.len() != reference.len() {
        return Err(MetricError::Length(estimate.len(), reference.len()));
    }
    let rr = dot(reference, reference);
    if rr <= 0.0 {
        return Err(MetricError::ZeroReference);
    }
    let alpha = dot(estimate, reference) / rr;
    let (mut target, mut resid) = (0.0, 0.0);
    for (e, r) in estimate.iter().zip(reference) {
        let t = alpha * f64::from(*r);
        target += t * t;
        resid += (f64::from(*e) - t).powi(2);
    }
    Ok(clamp_db(target, resid))
}

pub fn sisdr_improvement(output: &[f32], mixture: &[f32], reference: &[f32]) -> Result<f64, MetricError> {
    Ok(si_sdr(output, reference)? - si_sdr(mixture, reference)?)
}

/// Negative SNR in dB, clamped to +-60.
pub fn neg_snr_loss(estimate: &[f32], reference: &[f32]) -> Result<f64, MetricError> {
    if estimate.len() != reference.len() {
        return Err(MetricError::Length(estimate.len(), reference.len()));
    }
    let rr = dot(reference, reference);
    let err: f64 = estimate.iter().zip(reference).map(|(e, r)| (f64::from(*r) - f64::from(*e)).powi(2)).sum();
    Ok(-clamp_db(rr, err))
}

/// One STFT resolution of the multi-resolution loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Resolution {
    pub fft: usize,
    pub hop: usize,
    pub win: usize,
}

pub const MR_RESOLUTIONS: [Resolution; 3] = [
    Resolution { fft: 1024, hop: 120, win: 600 },
    Resolution { fft: 2048, hop: 240, win: 1200 },
    Resolution { fft: 512, hop: 50, win: 240 },
];
pub const MR_WEIGHTS: MrWeights = MrWeights {
    spectral_convergence: 1.0,
    log_magnitude: 1.0,
    linear_magnitude: 4.0,
};
pub const L1_WEIGHT: f64 = 10.0;
const MAG_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MrWeights {
    pub spectral_convergence: f64,
    pub log_magnitude: f64,
    pub linear_magnitude: f64,
}

/// Symmetric Hann window of length `n`.
pub fn hann(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Frames of `win` samples every `hop`, zero-padded at the end so the last
/// sample is covered.
pub fn frame_count(len: usize, res: Resolution) -> usize {
    if len <= res.win {
        1
    } else {
        (len - res.win).div_ceil(res.hop) + 1
    }
}

/// `|STFT|` with frames laid out one after another, `fft / 2 + 1` bins each.
fn magnitudes(x: &[f32], res: Resolution, planner: &mut FftPlanner<f64>) -> Vec<f64> {
    let fft = planner.plan_fft_forward(res.fft);
    let w = hann(res.win);
    let bins = res.fft / 2 + 1;
    let frames = frame_count(x.len(), res);
    let mut out = Vec::with_capacity(frames * bins);
    let mut buf = vec![Complex64::new(0.0, 0.0); res.fft];
    for f in 0..frames {
        buf.fill(Complex64::new(0.0, 0.0));
        for (i, wv) in w.iter().enumerate() {
            if let Some(&s) = x.get(f * res.hop + i) {
                buf[i] = Complex64::new(f64::from(s) * wv, 0.0);
            }
        }
        fft.process(&mut buf);
        out.extend(buf[..bins].iter().map(|c| c.norm()));
    }
    out
}

/// Multi-resolution STFT loss averaged over `MR_RESOLUTIONS`, plus
/// `L1_WEIGHT` times the mean absolute sample error when `with_l1`.
pub fn multires_stft_loss(estimate: &[f32], reference: &[f32], with_l1: bool) -> Result<f64, MetricError> {
    if estimate.len() != reference.len() {
        return Err(MetricError::Length(estimate.len(), reference.len()));
    }
    if estimate.is_empty() {
        return Ok(0.0);
    }
    let mut planner = FftPlanner::new();
    let mut total = 0.0;
    for res in MR_RESOLUTIONS {
        let e = magnitudes(estimate, res, &mut planner);
        let r = magnitudes(reference, res, &mut planner);
        let n = r.len() as f64;
        let diff2: f64 = e.iter().zip(&r).map(|(a, b)| (b - a).powi(2)).sum();
        let ref2: f64 = r.iter().map(|b| b * b).sum();
        let sc = if diff2 == 0.0 { 0.0 } else { (diff2 / ref2.max(f64::MIN_POSITIVE)).sqrt() };
        let log_mag = e
            .iter()
            .zip(&r)
            .map(|(a, b)| (b.max(MAG_FLOOR).ln() - a.max(MAG_FLOOR).ln()).abs())
            .sum::<f64>()
            / n;
        let lin_mag = e.iter().zip(&r).map(|(a, b)| (b - a).abs()).sum::<f64>() / n;
        total += MR_WEIGHTS.spectral_convergence * sc + MR_WEIGHTS.log_magnitude * log_mag + MR_WEIGHTS.linear_magnitude * lin_mag;
    }
    let mut loss = total / MR_RESOLUTIONS.len() as f64;
    if with_l1 {
        let l1 = estimate.iter().zip(reference).map(|(a, b)| f64::from((a - b).abs())).sum::<f64>() / estimate.len() as f64;
        loss += L1_WEIGHT * l1;
    }
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Target,
    Interference,
}

/// A labelled stretch of one speaker's speech.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnLabel {
    pub speaker: String,
    pub start: f64,
    pub end: f64,
    pub role: Role,
}

/// Every target and interference turn of `script`, in time order.
pub fn labels_from_script(script: &ConversationScript) -> Vec<TurnLabel> {
    let lab = |u: &Utterance, role| TurnLabel {
        speaker: u.speaker_id.clone(),
        start: u.start,
        end: u.end,
        role,
    };
    let mut v: Vec<TurnLabel> = script
        .target
        .iter()
        .map(|u| lab(u, Role::Target))
        .chain(script.interference.iter().map(|u| lab(u, Role::Interference)))
        .collect();
    v.sort_by(|a, b| a.start.total_cmp(&b.start));
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Accurate,
    Confused,
    Neutral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub turn_id: usize,
    pub speaker: String,
    pub start: f64,
    pub end: f64,
    /// SISDRi of the output against each speaker audible in the turn.
    pub sisdri: BTreeMap<String, f64>,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnSelection {
    pub acc: f64,
    pub cr: f64,
    pub neutral: f64,
    pub turns: Vec<TurnRecord>,
}

fn span(start: f64, end: f64, n: usize) -> Result<std::ops::Range<usize>, MetricError> {
    let sr = f64::from(crate::audio::SAMPLE_RATE);
    let (a, b) = ((start * sr).round() as i64, (end * sr).round() as i64);
    if a < 0 || b as usize > n || a >= b {
        return Err(MetricError::Structure(format!("turn [{start}, {end}] s outside {n} samples")));
    }
    Ok(a as usize..b as usize)
}

/// Scores every partner turn (target role, not `wearer`) of at least
/// `MIN_TURN_S`. Accurate: the partner's SISDRi is positive and beats every
/// interferer's. Confused: some interferer's SISDRi beats the partner's.
/// Anything else is neutral; all three share one denominator.
pub fn turn_selection_stats(
    output: &[f32],
    stems: &BTreeMap<String, Vec<f32>>,
    mixture: &[f32],
    turns: &[TurnLabel],
    wearer: &str,
) -> Result<TurnSelection, MetricError> {
    if output.len() != mixture.len() {
        return Err(MetricError::Length(output.len(), mixture.len()));
    }
    for s in stems.values() {
        if s.len() != output.len() {
            return Err(MetricError::Length(s.len(), output.len()));
        }
    }
    let interferers: Vec<&String> = {
        let mut v: Vec<&String> = turns.iter().filter(|t| t.role == Role::Interference).map(|t| &t.speaker).collect();
        v.sort();
        v.dedup();
        v
    };
    let mut records = Vec::new();
    for (id, t) in turns.iter().enumerate() {
        if t.role != Role::Target || t.speaker == wearer || t.end - t.start < MIN_TURN_S {
            continue;
        }
        let r = span(t.start, t.end, output.len())?;
        let stem = stems
            .get(&t.speaker)
            .ok_or_else(|| MetricError::Structure(format!("no reference for {}", t.speaker)))?;
        let score = |reference: &[f32]| sisdr_improvement(&output[r.clone()], &mixture[r.clone()], reference);
        let partner = match score(&stem[r.clone()]) {
            Ok(v) => v,
            Err(MetricError::ZeroReference) => continue,
            Err(e) => return Err(e),
        };
        let mut sisdri = BTreeMap::from([(t.speaker.clone(), partner)]);
        for i in &interferers {
            let Some(s) = stems.get(*i) else { continue };
            match score(&s[r.clone()]) {
                Ok(v) => {
                    sisdri.insert((*i).clone(), v);
                }
                // silent during this turn
                Err(MetricError::ZeroReference) => {}
                Err(e) => return Err(e),
            }
        }
        let others = interferers.iter().filter_map(|i| sisdri.get(*i));
        let best_other = others.copied().fold(f64::NEG_INFINITY, f64::max);
        let outcome = if partner > 0.0 && partner > best_other {
            Outcome::Accurate
        } else if best_other > partner {
            Outcome::Confused
        } else {
            Outcome::Neutral
        };
        records.push(TurnRecord {
            turn_id: id,
            speaker: t.speaker.clone(),
            start: t.start,
            end: t.end,
            sisdri,
            outcome,
        });
    }
    let n = records.len().max(1) as f64;
    let rate = |o: Outcome| records.iter().filter(|r| r.outcome == o).count() as f64 / n;
    Ok(TurnSelection {
        acc: rate(Outcome::Accurate),
        cr: rate(Outcome::Confused),
        neutral: rate(Outcome::Neutral),
        turns: records,
    })
}

/// A speaker's activity interval, seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Activity {
    pub speaker: String,
    pub start: f64,
    pub end: f64,
}

impl From<&Utterance> for Activity {
    fn from(u: &Utterance) -> Self {
        Activity {
            speaker: u.speaker_id.clone(),
            start: u.start,
            end: u.end,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnStats {
    /// Speaker changes per minute.
    pub turn_change_freq: f64,
    pub turn_durations: Vec<f64>,
    pub overlap_ratio: f64,
    pub ipu_durations: Vec<f64>,
    /// Next turn's start minus the previous turn's end at each change;
    /// negative on overlap.
    pub fto: Vec<f64>,
}

/// Turn-taking statistics over `[0, duration_s]` (default: the last end).
/// Each speaker's activity is merged into inter-pausal units across
/// silences of at most `IPU_GAP_S`; consecutive units of one speaker, in
/// start order, form a turn.
pub fn conversation_stats(activity: &[Activity], duration_s: Option<f64>) -> TurnStats {
    let mut by_speaker: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for a in activity.iter().filter(|a| a.end > a.start) {
        by_speaker.entry(a.speaker.as_str()).or_default().push((a.start, a.end));
    }
    let mut ipus: Vec<(f64, f64, &str)> = Vec::new();
    for (s, mut v) in by_speaker {
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut cur = v[0];
        for &(a, b) in &v[1..] {
            if a - cur.1 > IPU_GAP_S {
                ipus.push((cur.0, cur.1, s));
                cur = (a, b);
            } else {
                cur.1 = cur.1.max(b);
            }
        }
        ipus.push((cur.0, cur.1, s));
    }
    ipus.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut turns: Vec<(f64, f64, &str)> = Vec::new();
    for &(a, b, s) in &ipus {
        match turns.last_mut() {
            Some(t) if t.2 == s => t.1 = t.1.max(b),
            _ => turns.push((a, b, s)),
        }
    }
    let fto: Vec<f64> = turns.windows(2).map(|w| w[1].0 - w[0].1).collect();

    let end = ipus.iter().map(|i| i.1).fold(0.0, f64::max);
    let duration = duration_s.unwrap_or(end);
    // time with two or more speakers talking
    let mut events: Vec<(f64, i32)> = ipus.iter().flat_map(|&(a, b, _)| [(a, 1), (b, -1)]).collect();
    events.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let (mut active, mut last, mut overlap) = (0, 0.0, 0.0);
    for (t, d) in events {
        if active >= 2 {
            overlap += t - last;
        }
        active += d;
        last = t;
    }
    TurnStats {
        turn_change_freq: if duration > 0.0 { fto.len() as f64 / (duration / 60.0) } else { 0.0 },
        turn_durations: turns.iter().map(|t| t.1 - t.0).collect(),
        overlap_ratio: if duration > 0.0 { (overlap / duration).clamp(0.0, 1.0) } else { 0.0 },
        ipu_durations: ipus.iter().map(|i| i.1 - i.0).collect(),
        fto,
    }
}

pub const NOT_COMPUTED: &str = "external: not computed";

/// Everything `eval` reports for one processed conversation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub sisdr_in: f64,
    pub sisdr_out: f64,
    pub sisdri: f64,
    pub acc: f64,
    pub cr: f64,
    pub neutral: f64,
    pub n_turns: usize,
    pub turns: Vec<TurnRecord>,
    pub delta_pesq: String,
    pub dnsmos: String,
}

impl MetricReport {
    /// `output` and `mixture` mono, `target` the mono target conversation.
    pub fn compute(
        output: &[f32],
        mixture: &[f32],
        target: &[f32],
        stems: &BTreeMap<String, Vec<f32>>,
        script: &ConversationScript,
    ) -> Result<Self, MetricError> {
        let sisdr_in = si_sdr(mixture, target)?;
        let sisdr_out = si_sdr(output, target)?;
        let sel = turn_selection_stats(output, stems, mixture, &labels_from_script(script), &script.wearer_id)?;
        Ok(MetricReport {
            sisdr_in,
            sisdr_out,
            sisdri: sisdr_out - sisdr_in,
            acc: sel.acc,
            cr: sel.cr,
            neutral: sel.neutral,
            n_turns: sel.turns.len(),
            turns: sel.turns,
            delta_pesq: NOT_COMPUTED.into(),
            dnsmos: NOT_COMPUTED.into(),
        })
    }
}
