use super::{
    ConversationScript, Policy, SynthError, Turn, Utterance, DEFAULT_DURATION_S, LEAVE_ACTIVE_BEFORE_S,
    LEAVE_JOIN_BEFORE_S, LONG_TURN_S,
};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Fresh random reassignments tried before giving up on a timeline.
pub const MAX_RETRIES: usize = 100;

/// Speakers available to one mixture. `target[0]` is the wearer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerPool {
    pub target: Vec<String>,
    pub interference: Vec<String>,
    /// Clip references per speaker; speakers without clips get synthetic audio.
    #[serde(default)]
    pub clips: BTreeMap<String, Vec<String>>,
}

impl SpeakerPool {
    /// Placeholder names: `wearer`, `partner1`.., `interferer1`, `interferer2`.
    pub fn named(policy: Policy) -> Self {
        let n = policy.target_speakers().unwrap_or(2);
        let mut target = vec!["wearer".to_string()];
        target.extend((1..n).map(|i| format!("partner{i}")));
        Self {
            target,
            interference: vec!["interferer1".into(), "interferer2".into()],
            clips: BTreeMap::new(),
        }
    }

    /// Draws distinct speakers from `dir/<speaker>/*.wav`. Clip references
    /// are relative to `dir`.
    pub fn from_clip_dir(dir: &Path, policy: Policy, rng: &mut impl Rng) -> Result<Self, SynthError> {
        let mut speakers: Vec<(String, Vec<String>)> = Vec::new();
        let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<Result<_, _>>()?;
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            if !e.file_type()?.is_dir() {
                continue;
            }
            let name = e.file_name().to_string_lossy().into_owned();
            let mut clips: Vec<String> = std::fs::read_dir(e.path())?
                .filter_map(Result::ok)
                .map(|f| f.file_name().to_string_lossy().into_owned())
                .filter(|f| f.ends_with(".wav"))
                .map(|f| format!("{name}/{f}"))
                .collect();
            clips.sort();
            if !clips.is_empty() {
                speakers.push((name, clips));
            }
        }
        let n = policy.target_speakers().unwrap_or(2) + 2;
        if speakers.len() < n {
            return Err(SynthError::Input(format!(
                "{} has {} speaker folders with clips, policy {policy} needs {n}",
                dir.display(),
                speakers.len()
            )));
        }
        let picked: Vec<(String, Vec<String>)> = speakers.choose_multiple(rng, n).cloned().collect();
        let nt = n - 2;
        Ok(Self {
            target: picked[..nt].iter().map(|(s, _)| s.clone()).collect(),
            interference: picked[nt..].iter().map(|(s, _)| s.clone()).collect(),
            clips: picked.into_iter().collect(),
        })
    }

    fn source(&self, speaker: &str, rng: &mut impl Rng) -> String {
        self.clips
            .get(speaker)
            .and_then(|c| c.choose(rng))
            .cloned()
            .unwrap_or_else(|| super::SYNTHETIC_SOURCE.into())
    }
}

/// Sorted, clipped to the conversation length, empty turns dropped.
fn prepare(turns: &[Turn], duration: f64) -> Vec<Turn> {
    let mut v: Vec<Turn> = turns
        .iter()
        .filter(|t| t.start < duration && t.end > t.start)
        .map(|t| Turn {
            start: t.start.max(0.0),
            end: t.end.min(duration),
            ..t.clone()
        })
        .collect();
    v.sort_by(|a, b| a.start.total_cmp(&b.start));
    v
}

/// Opening turns go to speaker 0 until the anchor is covered; the rest are
/// drawn uniformly from `speakers`.
fn assign_target(turns: &[Turn], speakers: usize, anchor: f64, rng: &mut impl Rng) -> Result<Vec<usize>, String> {
    let mut who = Vec::with_capacity(turns.len());
    let mut acc = 0.0;
    for t in turns {
        if acc < anchor {
            who.push(0);
            acc += t.duration();
        } else {
            who.push(rng.random_range(0..speakers));
        }
    }
    if acc < anchor {
        return Err(format!("wearer anchor: the turns hold only {acc:.2} s of the required {anchor} s"));
    }
    Ok(who)
}

fn has_long_turn(turns: &[Turn], who: &[usize], speaker: usize) -> bool {
    turns.iter().zip(who).any(|(t, &w)| w == speaker && t.duration() >= LONG_TURN_S)
}

struct Draft {
    target: Vec<(usize, Turn)>,
    interference: Vec<(usize, Turn)>,
    mover: Option<usize>,
    transition: Option<f64>,
}

fn attempt_plain(target: &[Turn], interference: &[Turn], n: usize, anchor: f64, rng: &mut impl Rng) -> Result<Draft, String> {
    let who = assign_target(target, n, anchor, rng)?;
    for p in 1..n {
        if !has_long_turn(target, &who, p) {
            return Err(format!("partner {p} has no turn of at least {LONG_TURN_S} s"));
        }
    }
    let iw: Vec<usize> = interference.iter().map(|_| rng.random_range(0..2)).collect();
    if !interference.is_empty() && !(iw.contains(&0) && iw.contains(&1)) {
        return Err("interference must contain both of its speakers".into());
    }
    Ok(Draft {
        target: who.into_iter().zip(target.iter().cloned()).collect(),
        interference: iw.into_iter().map(|w| w + n).zip(interference.iter().cloned()).collect(),
        mover: None,
        transition: None,
    })
}

/// Speakers 0..3 are the target trio, 3 and 4 the interferers.
fn attempt_leaving(target: &[Turn], interference: &[Turn], anchor: f64, rng: &mut impl Rng) -> Result<Draft, String> {
    let mut who = assign_target(target, 3, anchor, rng)?;
    let early: Vec<usize> = (1..3)
        .filter(|&p| target.iter().zip(&who).any(|(t, &w)| w == p && t.end <= LEAVE_ACTIVE_BEFORE_S))
        .collect();
    let &mover = early
        .choose(rng)
        .ok_or_else(|| format!("leaving: no partner speaks in the first {LEAVE_ACTIVE_BEFORE_S} s"))?;
    let stayer = 3 - mover;
    // after leaving, the mover's later target turns go to the two who stay
    for (t, w) in target.iter().zip(who.iter_mut()) {
        if *w == mover && t.end > LEAVE_ACTIVE_BEFORE_S {
            *w = if rng.random_bool(0.5) { 0 } else { stayer };
        }
    }
    if !has_long_turn(target, &who, stayer) {
        return Err(format!("leaving: remaining partner has no turn of at least {LONG_TURN_S} s"));
    }
    let last = target
        .iter()
        .zip(&who)
        .filter(|(_, &w)| w == mover)
        .map(|(t, _)| t.end)
        .fold(f64::NEG_INFINITY, f64::max);
    let joins: Vec<usize> = interference
        .iter()
        .enumerate()
        .filter(|(_, t)| t.start > last && t.start < LEAVE_JOIN_BEFORE_S && t.duration() >= LONG_TURN_S)
        .map(|(i, _)| i)
        .collect();
    let &j = joins.choose(rng).ok_or_else(|| {
        format!("leaving: no interference turn of {LONG_TURN_S} s starts between {last:.2} s and {LEAVE_JOIN_BEFORE_S} s")
    })?;
    let iw: Vec<usize> = (0..interference.len())
        .map(|i| match i.cmp(&j) {
            std::cmp::Ordering::Less => 3 + rng.random_range(0..2),
            std::cmp::Ordering::Equal => mover,
            std::cmp::Ordering::Greater => [3, 4, mover][rng.random_range(0..3)],
        })
        .collect();
    if !(iw.contains(&3) && iw.contains(&4)) {
        return Err("leaving: interference must contain both original speakers".into());
    }
    Ok(Draft {
        target: who.into_iter().zip(target.iter().cloned()).collect(),
        interference: iw.into_iter().zip(interference.iter().cloned()).collect(),
        mover: Some(mover),
        transition: Some(interference[j].start),
    })
}

fn passthrough(target: &[Turn], interference: &[Turn], anchor: f64, pool: &SpeakerPool, rng: &mut impl Rng) -> Result<ConversationScript, SynthError> {
    let label = |t: &Turn| {
        t.speaker
            .clone()
            .ok_or_else(|| SynthError::Input("passthrough needs a speaker label on every turn".into()))
    };
    let wearer = label(target.first().ok_or_else(|| SynthError::Input("no target turns".into()))?)?;
    let mut acc = 0.0;
    for t in target {
        if acc >= anchor {
            break;
        }
        if label(t)? != wearer {
            return Err(SynthError::Infeasible {
                constraint: format!("wearer anchor: {wearer} does not open with {anchor} s of speech"),
                attempts: 1,
            });
        }
        acc += t.duration();
    }
    if acc < anchor {
        return Err(SynthError::Infeasible {
            constraint: format!("wearer anchor: only {acc:.2} s of opening speech"),
            attempts: 1,
        });
    }
    let utt = |t: &Turn, rng: &mut ChaCha8Rng| -> Result<Utterance, SynthError> {
        let speaker_id = label(t)?;
        let source = t.clip.clone().unwrap_or_else(|| pool.source(&speaker_id, rng));
        Ok(Utterance {
            speaker_id,
            start: t.start,
            end: t.end,
            source,
        })
    };
    let mut rng = ChaCha8Rng::seed_from_u64(rng.random());
    let script = ConversationScript {
        policy: Policy::Passthrough,
        wearer_id: wearer,
        duration_s: DEFAULT_DURATION_S,
        target: target.iter().map(|t| utt(t, &mut rng)).collect::<Result<_, _>>()?,
        interference: interference.iter().map(|t| utt(t, &mut rng)).collect::<Result<_, _>>()?,
        mover: None,
        transition_s: None,
    };
    let ts = script.target_speakers();
    if let Some(s) = script.interference_speakers().iter().find(|s| ts.contains(s)) {
        return Err(SynthError::Input(format!("speaker {s} appears in both conversations")));
    }
    Ok(script)
}

/// Assigns speakers from `pool` to the target and interference turns under
/// `policy`. Random reassignment is retried up to [`MAX_RETRIES`] times.
pub fn build_timeline(
    target: &[Turn],
    interference: &[Turn],
    policy: Policy,
    pool: &SpeakerPool,
    seed: u64,
) -> Result<ConversationScript, SynthError> {
    let duration = DEFAULT_DURATION_S;
    let target = prepare(target, duration);
    let interference = prepare(interference, duration);
    let anchor = policy.anchor_s();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let Some(n) = policy.target_speakers() else {
        return passthrough(&target, &interference, anchor, pool, &mut rng);
    };
    if pool.target.len() != n || pool.interference.len() != 2 {
        return Err(SynthError::Input(format!(
            "policy {policy} needs {n} target and 2 interference speakers, pool has {} and {}",
            pool.target.len(),
            pool.interference.len()
        )));
    }
    let names: Vec<&String> = pool.target.iter().chain(&pool.interference).collect();
    if (1..names.len()).any(|i| names[..i].contains(&names[i])) {
        return Err(SynthError::Input("speaker pool has duplicate names".into()));
    }
    let mut last = String::new();
    for _ in 0..MAX_RETRIES {
        let draft = match policy {
            Policy::Leaving => attempt_leaving(&target, &interference, anchor, &mut rng),
            _ => attempt_plain(&target, &interference, n, anchor, &mut rng),
        };
        match draft {
            Ok(d) => {
                let mut to_utt = |(w, t): (usize, Turn)| Utterance {
                    speaker_id: names[w].clone(),
                    start: t.start,
                    end: t.end,
                    source: pool.source(names[w], &mut rng),
                };
                let target = d.target.into_iter().map(&mut to_utt).collect();
                let interference = d.interference.into_iter().map(&mut to_utt).collect();
                return Ok(ConversationScript {
                    policy,
                    wearer_id: names[0].clone(),
                    duration_s: duration,
                    target,
                    interference,
                    mover: d.mover.map(|m| names[m].clone()),
                    transition_s: d.transition,
                });
            }
            Err(c) => last = c,
        }
    }
    Err(SynthError::Infeasible {
        constraint: last,
        attempts: MAX_RETRIES,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn turns(spans: &[(f64, f64)]) -> Vec<Turn> {
        spans.iter().map(|&(a, b)| Turn::new(a, b)).collect()
    }

    #[test]
    fn two_speaker_example() {
        let t = turns(&[(0.0, 6.0), (7.0, 13.0), (14.0, 20.0)]);
        let i = turns(&[(0.0, 3.0), (4.0, 8.0), (9.0, 12.0)]);
        let pool = SpeakerPool::named(Policy::TwoSpk);
        for seed in 0..20 {
            let s = build_timeline(&t, &i, Policy::TwoSpk, &pool, seed).unwrap();
            assert_eq!(s.target[0].speaker_id, "wearer");
            assert_eq!((s.target[0].start, s.target[0].end), (0.0, 6.0));
            assert!(s.partner_turns().any(|u| u.duration() >= 5.0));
            assert_eq!(s.interference_speakers().len(), 2);
        }
    }

    #[test]
    fn anchor_spans_several_short_turns() {
        let t = turns(&[(0.0, 2.0), (2.5, 4.0), (4.5, 6.5), (7.0, 13.0), (14.0, 20.0)]);
        let s = build_timeline(&t, &[], Policy::TwoSpk, &SpeakerPool::named(Policy::TwoSpk), 3).unwrap();
        assert!(s.target[..3].iter().all(|u| u.speaker_id == "wearer"));
    }

    #[test]
    fn infeasible_names_the_constraint() {
        let t = turns(&[(0.0, 6.0), (7.0, 9.0), (10.0, 12.0)]);
        let e = build_timeline(&t, &[], Policy::TwoSpk, &SpeakerPool::named(Policy::TwoSpk), 1).unwrap_err();
        match e {
            SynthError::Infeasible { constraint, attempts } => {
                assert!(constraint.contains("partner"), "{constraint}");
                assert_eq!(attempts, MAX_RETRIES);
            }
            other => panic!("{other}"),
        }
        let e = build_timeline(&turns(&[(0.0, 2.0)]), &[], Policy::ThreeSpk, &SpeakerPool::named(Policy::ThreeSpk), 1);
        assert!(matches!(e, Err(SynthError::Infeasible { constraint, .. }) if constraint.contains("anchor")));
    }

    #[test]
    fn leaving_moves_an_early_partner() {
        let t = turns(&[
            (0.0, 5.5),
            (6.0, 11.0),
            (11.5, 17.0),
            (17.5, 19.5),
            (21.0, 27.0),
            (28.0, 35.0),
            (36.0, 44.0),
            (45.0, 52.0),
        ]);
        let i = turns(&[(0.0, 4.0), (5.0, 9.0), (10.0, 16.0), (20.0, 27.0), (28.0, 34.0), (35.0, 41.0), (42.0, 50.0)]);
        let pool = SpeakerPool::named(Policy::Leaving);
        for seed in 0..50 {
            let s = build_timeline(&t, &i, Policy::Leaving, &pool, seed).unwrap();
            let mover = s.mover.clone().unwrap();
            let last = s.target.iter().filter(|u| u.speaker_id == mover).map(|u| u.end).fold(0.0, f64::max);
            assert!(last <= 20.0);
            let first = s.interference.iter().find(|u| u.speaker_id == mover).unwrap();
            assert!(first.start > last && first.start < 40.0 && first.duration() >= 5.0);
            assert_eq!(Some(first.start), s.transition_s);
        }
    }

    #[test]
    fn passthrough_keeps_labels() {
        let mut t = turns(&[(0.0, 4.0), (4.5, 8.0)]);
        t[0].speaker = Some("me".into());
        t[1].speaker = Some("you".into());
        t[1].clip = Some("you.wav".into());
        let mut i = turns(&[(1.0, 2.0), (3.0, 4.0)]);
        i[0].speaker = Some("a".into());
        i[1].speaker = Some("b".into());
        let s = build_timeline(&t, &i, Policy::Passthrough, &SpeakerPool::named(Policy::TwoSpk), 0).unwrap();
        assert_eq!(s.wearer_id, "me");
        assert_eq!(s.target[1].source, "you.wav");
        t[0].end = 2.0;
        assert!(build_timeline(&t, &i, Policy::Passthrough, &SpeakerPool::named(Policy::TwoSpk), 0).is_err());
    }

    #[test]
    fn clip_dir_pool() {
        let dir = tempfile::tempdir().unwrap();
        for s in ["a", "b", "c", "d", "e"] {
            std::fs::create_dir(dir.path().join(s)).unwrap();
            std::fs::write(dir.path().join(s).join("1.wav"), b"").unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = SpeakerPool::from_clip_dir(dir.path(), Policy::ThreeSpk, &mut rng).unwrap();
        assert_eq!((p.target.len(), p.interference.len()), (3, 2));
        assert!(p.clips[&p.target[0]][0].ends_with("/1.wav"));
        assert!(SpeakerPool::from_clip_dir(dir.path(), Policy::FiveSpk, &mut rng).is_err());
    }
}
