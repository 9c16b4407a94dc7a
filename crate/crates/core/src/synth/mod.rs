//! Conversation mixtures from turn timestamps: speaker assignment under the
//! dataset policies, rendering at a target SNR, and silence perturbation.

mod perturb;
mod render;
mod timeline;
mod validate;
mod voices;

pub use perturb::perturb_silences;
pub use render::{render_mixture, ClipProvider, DryReference, MixturePackage, PackageManifest, WavClips, PACKAGE_MANIFEST};
pub use timeline::{build_timeline, SpeakerPool, MAX_RETRIES};
pub use validate::{validate_script, Violation};
pub use voices::{synthetic_turns, MixedClips, SyntheticVoices};

use crate::audio::AudioError;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::BufRead;
use std::path::Path;
use std::str::FromStr;
use thiserror::Error;

/// Length of every generated conversation, in seconds.
pub const DEFAULT_DURATION_S: f64 = 60.0;
/// Clip reference for utterances rendered with [`SyntheticVoices`].
pub const SYNTHETIC_SOURCE: &str = "synthetic";
/// Minimum partner turn length that counts as participation.
pub const LONG_TURN_S: f64 = 5.0;
/// Leaving policy: the mover must be active before this time...
pub const LEAVE_ACTIVE_BEFORE_S: f64 = 20.0;
/// ...and must join the interference before this one.
pub const LEAVE_JOIN_BEFORE_S: f64 = 40.0;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("infeasible timeline after {attempts} attempts: {constraint}")]
    Infeasible { constraint: String, attempts: usize },
    #[error("bad input: {0}")]
    Input(String),
    #[error("no clip for utterance of {speaker} at {start:.2}s: {reason}")]
    MissingClip { speaker: String, start: f64, reason: String },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Policy {
    #[serde(rename = "2spk")]
    TwoSpk,
    #[serde(rename = "3spk")]
    ThreeSpk,
    #[serde(rename = "4spk")]
    FourSpk,
    #[serde(rename = "5spk")]
    FiveSpk,
    #[serde(rename = "leaving")]
    Leaving,
    #[serde(rename = "passthrough")]
    Passthrough,
}

impl Policy {
    pub const ALL: [Policy; 6] = [
        Policy::TwoSpk,
        Policy::ThreeSpk,
        Policy::FourSpk,
        Policy::FiveSpk,
        Policy::Leaving,
        Policy::Passthrough,
    ];

    /// Target speakers at the start of the conversation, wearer included.
    /// `None` when the timestamps carry their own labels.
    pub fn target_speakers(self) -> Option<usize> {
        match self {
            Policy::TwoSpk => Some(2),
            Policy::ThreeSpk | Policy::Leaving => Some(3),
            Policy::FourSpk => Some(4),
            Policy::FiveSpk => Some(5),
            Policy::Passthrough => None,
        }
    }

    /// Seconds of wearer speech that must open the target conversation.
    pub fn anchor_s(self) -> f64 {
        match self {
            Policy::Passthrough => 3.0,
            _ => 5.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Policy::TwoSpk => "2spk",
            Policy::ThreeSpk => "3spk",
            Policy::FourSpk => "4spk",
            Policy::FiveSpk => "5spk",
            Policy::Leaving => "leaving",
            Policy::Passthrough => "passthrough",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, SynthError> {
        Policy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| SynthError::Input(format!("unknown policy {s:?} (expected 2spk, 3spk, 4spk, 5spk, leaving or passthrough)")))
    }
}

/// A source turn: timing, plus a label and clip when the corpus has them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub start: f64,
    pub end: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip: Option<String>,
}

impl Turn {
    pub fn new(start: f64, end: f64) -> Self {
        Self {
            start,
            end,
            speaker: None,
            clip: None,
        }
    }

    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker_id: String,
    pub start: f64,
    pub end: f64,
    /// Clip reference handed to the [`ClipProvider`].
    pub source: String,
}

impl Utterance {
    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversationScript {
    pub policy: Policy,
    pub wearer_id: String,
    pub duration_s: f64,
    pub target: Vec<Utterance>,
    pub interference: Vec<Utterance>,
    /// Leaving policy: who switches conversations, and when they first speak
    /// in the interference.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mover: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transition_s: Option<f64>,
}

impl ConversationScript {
    /// Distinct target speakers in order of first appearance.
    pub fn target_speakers(&self) -> Vec<String> {
        distinct(&self.target)
    }

    pub fn interference_speakers(&self) -> Vec<String> {
        distinct(&self.interference)
    }

    /// Target utterances by anyone but the wearer.
    pub fn partner_turns(&self) -> impl Iterator<Item = &Utterance> {
        self.target.iter().filter(move |u| u.speaker_id != self.wearer_id)
    }
}

fn distinct(us: &[Utterance]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for u in us {
        if !out.contains(&u.speaker_id) {
            out.push(u.speaker_id.clone());
        }
    }
    out
}

/// One line of the neutral timestamp format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimestampRecord {
    /// Groups turns into conversations; a missing id means conversation "0".
    #[serde(default)]
    pub conversation: Option<String>,
    pub speaker: String,
    pub start: f64,
    pub end: f64,
    #[serde(default)]
    pub clip: Option<String>,
}

/// Reads JSON-lines timestamps, grouped by conversation id in file order,
/// turns sorted by start.
pub fn load_timestamps(path: &Path) -> Result<Vec<(String, Vec<Turn>)>, SynthError> {
    let file = std::fs::File::open(path)?;
    let mut groups: Vec<(String, Vec<Turn>)> = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: TimestampRecord = serde_json::from_str(&line)
            .map_err(|e| SynthError::Input(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if !(r.start.is_finite() && r.end.is_finite() && r.start >= 0.0 && r.end > r.start) {
            return Err(SynthError::Input(format!(
                "{}:{}: turn [{}, {}] is not a valid interval",
                path.display(),
                i + 1,
                r.start,
                r.end
            )));
        }
        let id = r.conversation.clone().unwrap_or_else(|| "0".into());
        let turn = Turn {
            start: r.start,
            end: r.end,
            speaker: Some(r.speaker),
            clip: r.clip,
        };
        match groups.iter_mut().find(|(g, _)| *g == id) {
            Some((_, v)) => v.push(turn),
            None => groups.push((id, vec![turn])),
        }
    }
    for (_, v) in &mut groups {
        v.sort_by(|a, b| a.start.total_cmp(&b.start));
    }
    Ok(groups)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policy_names_round_trip() {
        for p in Policy::ALL {
            assert_eq!(p.name().parse::<Policy>().unwrap(), p);
            assert_eq!(serde_json::to_string(&p).unwrap(), format!("\"{p}\""));
        }
        assert!("6spk".parse::<Policy>().is_err());
    }

    #[test]
    fn timestamps_group_and_sort() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ts.jsonl");
        std::fs::write(
            &p,
            "{\"conversation\":\"a\",\"speaker\":\"x\",\"start\":3,\"end\":4}\n\n\
             {\"conversation\":\"b\",\"speaker\":\"y\",\"start\":0,\"end\":1,\"clip\":\"y.wav\"}\n\
             {\"conversation\":\"a\",\"speaker\":\"z\",\"start\":1,\"end\":2}\n",
        )
        .unwrap();
        let g = load_timestamps(&p).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g[0].0, "a");
        assert_eq!(g[0].1[0].start, 1.0);
        assert_eq!(g[1].1[0].clip.as_deref(), Some("y.wav"));
        std::fs::write(&p, "{\"speaker\":\"x\",\"start\":3,\"end\":2}\n").unwrap();
        assert!(matches!(load_timestamps(&p), Err(SynthError::Input(_))));
    }
}
