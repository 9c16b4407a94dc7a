//! Stand-ins for corpora that cannot ship: speech-like harmonic signals per
//! speaker and conversational turn timings.

use super::{ClipProvider, SynthError, Turn, Utterance, WavClips, SYNTHETIC_SOURCE};
use crate::audio::SAMPLE_RATE;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

/// Deterministic voiced "speech": a glottal-like harmonic stack shaped by two
/// resonances, with vibrato and a syllable-rate envelope. Pitch and timbre
/// depend only on the speaker id and `seed`, so each speaker sounds stable
/// across utterances and distinct from the others.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticVoices {
    pub seed: u64,
}

fn hash(s: &str, seed: u64) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for b in s.bytes() {
        h = (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3);
    }
    h
}

struct Voice {
    f0: f64,
    formants: [(f64, f64); 2],
}

impl SyntheticVoices {
    fn voice(&self, speaker: &str) -> Voice {
        let mut rng = ChaCha8Rng::seed_from_u64(hash(speaker, self.seed));
        Voice {
            f0: rng.random_range(85.0..250.0),
            formants: [(rng.random_range(300.0..900.0), 120.0), (rng.random_range(900.0..2600.0), 200.0)],
        }
    }

    /// `len` samples of `speaker`, varied by `salt`.
    pub fn render(&self, speaker: &str, len: usize, salt: u64) -> Vec<f32> {
        let v = self.voice(speaker);
        let mut rng = ChaCha8Rng::seed_from_u64(hash(speaker, self.seed ^ salt.rotate_left(17)));
        let sr = f64::from(SAMPLE_RATE);
        let harmonics = ((3800.0 / v.f0) as usize).max(1);
        let gain: Vec<f64> = (1..=harmonics)
            .map(|k| {
                let f = k as f64 * v.f0;
                let env: f64 = v
                    .formants
                    .iter()
                    .map(|&(c, bw)| 1.0 / (1.0 + ((f - c) / bw).powi(2)))
                    .sum();
                (0.15 + env) / k as f64
            })
            .collect();
        let syll_rate = rng.random_range(3.0..5.5);
        let syll_phase = rng.random_range(0.0..2.0 * PI);
        let vib_phase = rng.random_range(0.0..2.0 * PI);
        let mut phase = 0.0f64;
        let mut out = Vec::with_capacity(len);
        for i in 0..len {
            let t = i as f64 / sr;
            let f0 = v.f0 * (1.0 + 0.03 * (2.0 * PI * 5.0 * t + vib_phase).sin());
            phase = (phase + 2.0 * PI * f0 / sr) % (2.0 * PI);
            let mut s = 0.0;
            for (k, g) in gain.iter().enumerate() {
                s += g * ((k + 1) as f64 * phase).sin();
            }
            let env = (PI * syll_rate * t + syll_phase).sin().abs().powf(0.6);
            let breath = rng.random_range(-1.0..1.0) * 0.02;
            out.push((0.08 * (env * s + breath)) as f32);
        }
        out
    }
}

impl ClipProvider for SyntheticVoices {
    fn clip(&self, utt: &Utterance) -> Result<Vec<f32>, SynthError> {
        let len = ((utt.end - utt.start) * f64::from(SAMPLE_RATE)).round().max(0.0) as usize;
        Ok(self.render(&utt.speaker_id, len, utt.start.to_bits()))
    }
}

/// Real clips where an utterance names one, synthetic voices elsewhere.
#[derive(Debug, Clone)]
pub struct MixedClips {
    pub wav: Option<WavClips>,
    pub voices: SyntheticVoices,
}

impl ClipProvider for MixedClips {
    fn clip(&self, utt: &Utterance) -> Result<Vec<f32>, SynthError> {
        match &self.wav {
            Some(w) if utt.source != SYNTHETIC_SOURCE => w.clip(utt),
            _ => self.voices.clip(utt),
        }
    }
}

/// Random conversational turn timings over `duration_s`: turns of 1 to 9 s,
/// small gaps or overlaps between them, opening with a turn long enough to
/// carry the wearer anchor. Redrawn until at least `min_long` turns after the
/// first one last 5 s or more.
pub fn synthetic_turns(rng: &mut impl Rng, duration_s: f64, min_long: usize) -> Vec<Turn> {
    loop {
        let mut turns = vec![Turn::new(0.0, rng.random_range(5.2..8.0))];
        loop {
            let prev = turns.last().expect("seeded with one turn");
            let start = (prev.end + rng.random_range(-0.5..1.2)).max(prev.start + 0.2);
            if start >= duration_s - 0.5 {
                break;
            }
            let end = (start + rng.random_range(1.0..9.0)).min(duration_s);
            turns.push(Turn::new(start, end));
        }
        let long = turns[1..].iter().filter(|t| t.duration() >= 5.0).count();
        if long >= min_long {
            return turns;
        }
    }
}
