use super::{ConversationScript, SynthError, Utterance};
use crate::audio::{read_wav, write_wav, AudioBuffer, WavEncoding, SAMPLE_RATE};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Supplies mono 16 kHz audio for an utterance.
pub trait ClipProvider {
    fn clip(&self, utt: &Utterance) -> Result<Vec<f32>, SynthError>;
}

/// Clips read from WAV files named relative to `root`.
#[derive(Debug, Clone)]
pub struct WavClips {
    pub root: PathBuf,
}

impl ClipProvider for WavClips {
    fn clip(&self, utt: &Utterance) -> Result<Vec<f32>, SynthError> {
        let missing = |reason: String| SynthError::MissingClip {
            speaker: utt.speaker_id.clone(),
            start: utt.start,
            reason,
        };
        let path = self.root.join(&utt.source);
        let audio = read_wav(&path).map_err(|e| missing(format!("{}: {e}", path.display())))?;
        if audio.num_channels() != 1 {
            return Err(missing(format!("{} has {} channels, clips must be mono", path.display(), audio.num_channels())));
        }
        Ok(audio.into_channels().swap_remove(0))
    }
}

/// A rendered conversation mixture with everything needed to score it.
#[derive(Debug, Clone, PartialEq)]
pub struct MixturePackage {
    pub mixture: AudioBuffer,
    pub target_sum: AudioBuffer,
    pub interference_sum: AudioBuffer,
    /// Every speaker's contribution to the mixture, interference already
    /// scaled. A leaving speaker's stem holds both of their roles.
    pub stems: BTreeMap<String, AudioBuffer>,
    pub noise: Option<AudioBuffer>,
    pub script: ConversationScript,
    /// `None` when there is no interference.
    pub snr_db: Option<f64>,
    /// Monaural ground truth, kept once the package has been spatialized.
    pub dry: Option<DryReference>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DryReference {
    pub target_sum: Vec<f32>,
    pub stems: BTreeMap<String, Vec<f32>>,
}

fn to_samples(t: f64) -> usize {
    (t * f64::from(SAMPLE_RATE)).round().max(0.0) as usize
}

fn span(u: &Utterance, n: usize) -> std::ops::Range<usize> {
    let a = to_samples(u.start).min(n);
    let b = to_samples(u.end).min(n);
    a..b.max(a)
}

/// Mean power over the samples covered by `utts`.
pub(crate) fn active_power(x: &[f32], utts: &[Utterance]) -> Option<f64> {
    let mut mask = vec![false; x.len()];
    for u in utts {
        mask[span(u, x.len())].fill(true);
    }
    let (sum, count) = x
        .iter()
        .zip(&mask)
        .filter(|(_, &m)| m)
        .fold((0.0f64, 0usize), |(s, c), (&v, _)| (s + f64::from(v) * f64::from(v), c + 1));
    (count > 0).then(|| sum / count as f64)
}

fn place(buf: &mut [f32], u: &Utterance, clip: &[f32]) {
    let r = span(u, buf.len());
    for (dst, src) in buf[r].iter_mut().zip(clip) {
        *dst += *src;
    }
}

/// Renders `script` with clips from `provider`. Interference is scaled so
/// target-to-interference power over each side's active samples equals
/// `snr_db`. Optional `noise` is added at `noise_gain`.
pub fn render_mixture(
    script: &ConversationScript,
    provider: &dyn ClipProvider,
    snr_db: f64,
    noise: Option<&AudioBuffer>,
    noise_gain: f32,
) -> Result<MixturePackage, SynthError> {
    if !(-10.0..=10.0).contains(&snr_db) {
        return Err(SynthError::Input(format!("snr {snr_db} dB outside [-10, 10]")));
    }
    let n = to_samples(script.duration_s);
    let mut target_parts: BTreeMap<String, Vec<f32>> = BTreeMap::new();
    let mut interf_parts: BTreeMap<String, Vec<f32>> = BTreeMap::new();
    for (utts, parts) in [(&script.target, &mut target_parts), (&script.interference, &mut interf_parts)] {
        for u in utts {
            let clip = provider.clip(u)?;
            place(parts.entry(u.speaker_id.clone()).or_insert_with(|| vec![0.0; n]), u, &clip);
        }
    }
    let sum = |parts: &BTreeMap<String, Vec<f32>>| {
        let mut s = vec![0.0f32; n];
        for p in parts.values() {
            s.iter_mut().zip(p).for_each(|(a, b)| *a += b);
        }
        s
    };
    let target_sum = sum(&target_parts);
    let p_target = active_power(&target_sum, &script.target)
        .filter(|p| *p > 0.0)
        .ok_or_else(|| SynthError::Degenerate("target conversation is silent".into()))?;

    let snr = if script.interference.is_empty() {
        None
    } else {
        let raw = sum(&interf_parts);
        let p_interf = active_power(&raw, &script.interference).unwrap_or(0.0);
        if p_interf <= 0.0 {
            return Err(SynthError::Degenerate(format!(
                "interference has zero power, cannot reach {snr_db} dB"
            )));
        }
        let gain = (p_target / (p_interf * 10f64.powf(snr_db / 10.0))).sqrt() as f32;
        interf_parts.values_mut().for_each(|p| p.iter_mut().for_each(|v| *v *= gain));
        Some(snr_db)
    };
    let interference_sum = sum(&interf_parts);

    let noise = match noise {
        Some(nz) => {
            if nz.num_channels() != 1 {
                return Err(SynthError::Input("noise must be mono".into()));
            }
            let mut v = nz.channel(0).to_vec();
            v.resize(n, 0.0);
            v.iter_mut().for_each(|x| *x *= noise_gain);
            Some(v)
        }
        None => None,
    };
    let mut mixture: Vec<f32> = target_sum.iter().zip(&interference_sum).map(|(a, b)| a + b).collect();
    if let Some(nz) = &noise {
        mixture.iter_mut().zip(nz).for_each(|(m, x)| *m += x);
    }

    let mut stems: BTreeMap<String, AudioBuffer> = BTreeMap::new();
    let speakers: std::collections::BTreeSet<&String> = target_parts.keys().chain(interf_parts.keys()).collect();
    for s in speakers {
        let mut v = vec![0.0f32; n];
        for parts in [&target_parts, &interf_parts] {
            if let Some(p) = parts.get(s) {
                v.iter_mut().zip(p).for_each(|(a, b)| *a += b);
            }
        }
        stems.insert(s.clone(), AudioBuffer::mono(v)?);
    }
    Ok(MixturePackage {
        mixture: AudioBuffer::mono(mixture)?,
        target_sum: AudioBuffer::mono(target_sum)?,
        interference_sum: AudioBuffer::mono(interference_sum)?,
        stems,
        noise: noise.map(AudioBuffer::mono).transpose()?,
        script: script.clone(),
        snr_db: snr,
        dry: None,
    })
}

/// On-disk description of a package: the script plus where its audio lives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackageManifest {
    pub script: ConversationScript,
    pub snr_db: Option<f64>,
    pub seed: u64,
    pub channels: usize,
    pub mixture: String,
    pub target_sum: String,
    pub interference_sum: String,
    pub stems: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dry_target_sum: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub dry_stems: BTreeMap<String, String>,
    /// Free-form provenance added by later stages (scene, stage seeds).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, serde_json::Value>,
}

pub const PACKAGE_MANIFEST: &str = "manifest.json";

fn stem_file(prefix: &str, speaker: &str) -> String {
    let safe: String = speaker
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("{prefix}/{safe}.wav")
}

impl MixturePackage {
    /// Per-speaker references for scoring: dry stems when spatialized,
    /// otherwise the stems themselves (downmixed if needed).
    pub fn reference_stems(&self) -> BTreeMap<String, Vec<f32>> {
        match &self.dry {
            Some(d) => d.stems.clone(),
            None => self.stems.iter().map(|(k, v)| (k.clone(), v.downmix())).collect(),
        }
    }

    pub fn reference_target(&self) -> Vec<f32> {
        match &self.dry {
            Some(d) => d.target_sum.clone(),
            None => self.target_sum.downmix(),
        }
    }

    /// Writes float32 WAVs and `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path, seed: u64, extra: BTreeMap<String, serde_json::Value>) -> Result<PackageManifest, SynthError> {
        std::fs::create_dir_all(dir.join("stems"))?;
        let w = |name: &str, a: &AudioBuffer| -> Result<String, SynthError> {
            write_wav(dir.join(name), a, WavEncoding::Float32)?;
            Ok(name.to_string())
        };
        let mut m = PackageManifest {
            script: self.script.clone(),
            snr_db: self.snr_db,
            seed,
            channels: self.mixture.num_channels(),
            mixture: w("mixture.wav", &self.mixture)?,
            target_sum: w("target.wav", &self.target_sum)?,
            interference_sum: w("interference.wav", &self.interference_sum)?,
            stems: BTreeMap::new(),
            noise: self.noise.as_ref().map(|n| w("noise.wav", n)).transpose()?,
            dry_target_sum: None,
            dry_stems: BTreeMap::new(),
            extra,
        };
        for (s, a) in &self.stems {
            m.stems.insert(s.clone(), w(&stem_file("stems", s), a)?);
        }
        if let Some(d) = &self.dry {
            std::fs::create_dir_all(dir.join("dry"))?;
            m.dry_target_sum = Some(w("dry/target.wav", &AudioBuffer::mono(d.target_sum.clone())?)?);
            for (s, v) in &d.stems {
                m.dry_stems.insert(s.clone(), w(&stem_file("dry", s), &AudioBuffer::mono(v.clone())?)?);
            }
        }
        let text = serde_json::to_string_pretty(&m).map_err(|e| SynthError::Input(e.to_string()))?;
        std::fs::write(dir.join(PACKAGE_MANIFEST), text + "\n")?;
        Ok(m)
    }

    /// Reads a package from its manifest; audio paths are relative to it.
    pub fn load(manifest_path: &Path) -> Result<(Self, PackageManifest), SynthError> {
        let text = std::fs::read_to_string(manifest_path)?;
        let m: PackageManifest = serde_json::from_str(&text)
            .map_err(|e| SynthError::Input(format!("{}: {e}", manifest_path.display())))?;
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let r = |name: &str| read_wav(dir.join(name));
        let mut stems = BTreeMap::new();
        for (s, f) in &m.stems {
            stems.insert(s.clone(), r(f)?);
        }
        let dry = match &m.dry_target_sum {
            Some(t) => {
                let mut ds = BTreeMap::new();
                for (s, f) in &m.dry_stems {
                    ds.insert(s.clone(), r(f)?.downmix());
                }
                Some(DryReference {
                    target_sum: r(t)?.downmix(),
                    stems: ds,
                })
            }
            None => None,
        };
        let pkg = MixturePackage {
            mixture: r(&m.mixture)?,
            target_sum: r(&m.target_sum)?,
            interference_sum: r(&m.interference_sum)?,
            stems,
            noise: m.noise.as_deref().map(r).transpose()?,
            script: m.script.clone(),
            snr_db: m.snr_db,
            dry,
        };
        Ok((pkg, m))
    }
}

#[cfg(test)]
mod tests {
    use super::super::{Policy, SyntheticVoices};
    use super::*;

    fn u(s: &str, a: f64, b: f64) -> Utterance {
        Utterance {
            speaker_id: s.into(),
            start: a,
            end: b,
            source: "synthetic".into(),
        }
    }

    fn script(interference: Vec<Utterance>) -> ConversationScript {
        ConversationScript {
            policy: Policy::TwoSpk,
            wearer_id: "w".into(),
            duration_s: 4.0,
            target: vec![u("w", 0.0, 1.5), u("p", 1.6, 3.5)],
            interference,
            mover: None,
            transition_s: None,
        }
    }

    fn snr_of(p: &MixturePackage) -> f64 {
        let t = active_power(p.target_sum.channel(0), &p.script.target).unwrap();
        let i = active_power(p.interference_sum.channel(0), &p.script.interference).unwrap();
        10.0 * (t / i).log10()
    }

    #[test]
    fn requested_snr_is_met() {
        let s = script(vec![u("a", 0.2, 1.0), u("b", 1.2, 3.9)]);
        let voices = SyntheticVoices { seed: 4 };
        for snr in [-10.0, -3.3, 0.0, 7.5, 10.0] {
            let p = render_mixture(&s, &voices, snr, None, 0.0).unwrap();
            assert!((snr_of(&p) - snr).abs() < 0.01, "{snr} vs {}", snr_of(&p));
        }
    }

    #[test]
    fn stems_sum_to_mixture() {
        let s = script(vec![u("a", 0.2, 1.0), u("b", 1.2, 3.9)]);
        let noise = AudioBuffer::mono((0..64000).map(|i| ((i % 17) as f32 - 8.0) * 1e-3).collect()).unwrap();
        let p = render_mixture(&s, &SyntheticVoices { seed: 1 }, 2.0, Some(&noise), 0.5).unwrap();
        let nz = p.noise.as_ref().unwrap().channel(0);
        for i in 0..p.mixture.len() {
            let stems: f32 = p.stems.values().map(|a| a.channel(0)[i]).sum();
            assert!((p.mixture.channel(0)[i] - stems - nz[i]).abs() <= 1e-6);
        }
    }

    #[test]
    fn no_interference_means_target_only() {
        let p = render_mixture(&script(vec![]), &SyntheticVoices { seed: 1 }, 0.0, None, 0.0).unwrap();
        assert_eq!(p.mixture, p.target_sum);
        assert_eq!(p.snr_db, None);
    }

    #[test]
    fn errors() {
        struct Silent;
        impl ClipProvider for Silent {
            fn clip(&self, u: &Utterance) -> Result<Vec<f32>, SynthError> {
                Ok(if u.speaker_id == "a" { vec![0.0; 10] } else { vec![0.1; 100_000] })
            }
        }
        let s = script(vec![u("a", 0.2, 1.0)]);
        assert!(matches!(render_mixture(&s, &Silent, 0.0, None, 0.0), Err(SynthError::Degenerate(_))));
        assert!(matches!(render_mixture(&s, &Silent, 11.0, None, 0.0), Err(SynthError::Input(_))));
        let clips = WavClips { root: "/nonexistent".into() };
        assert!(matches!(render_mixture(&s, &clips, 0.0, None, 0.0), Err(SynthError::MissingClip { .. })));
    }

    #[test]
    fn short_clips_are_padded_long_ones_cropped() {
        struct Fixed;
        impl ClipProvider for Fixed {
            fn clip(&self, u: &Utterance) -> Result<Vec<f32>, SynthError> {
                Ok(vec![1.0; if u.speaker_id == "w" { 8000 } else { 100_000 }])
            }
        }
        let p = render_mixture(&script(vec![]), &Fixed, 0.0, None, 0.0).unwrap();
        let w = p.stems["w"].channel(0);
        assert_eq!(w[7999], 1.0);
        assert_eq!(w[8000], 0.0);
        let pp = p.stems["p"].channel(0);
        assert_eq!(pp[25599], 0.0);
        assert_eq!(pp[25600], 1.0);
        assert_eq!(pp[55999], 1.0);
        assert_eq!(pp[56000], 0.0);
    }

    #[test]
    fn save_load_round_trip() {
        let s = script(vec![u("a", 0.2, 1.0), u("b", 1.2, 3.9)]);
        let p = render_mixture(&s, &SyntheticVoices { seed: 2 }, 1.0, None, 0.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let m = p.save(dir.path(), 9, BTreeMap::new()).unwrap();
        let (q, m2) = MixturePackage::load(&dir.path().join(PACKAGE_MANIFEST)).unwrap();
        assert_eq!(p, q);
        assert_eq!(m, m2);
    }
}
