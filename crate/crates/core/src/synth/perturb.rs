use super::{ConversationScript, Utterance};
use crate::audio::SAMPLE_RATE;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn to_samples(t: f64) -> i64 {
    (t * f64::from(SAMPLE_RATE)).round() as i64
}

fn to_secs(s: i64) -> f64 {
    s as f64 / f64::from(SAMPLE_RATE)
}

/// Jitters every silence between successive utterances of one track by
/// `N(0, sd)`, keeps each at least one sample, then rescales them so the
/// track's total silence is unchanged. Overlapping transitions (no silence)
/// keep their offsets; utterance durations never change.
fn perturb_track(utts: &[Utterance], sd_samples: f64, rng: &mut ChaCha8Rng) -> Vec<Utterance> {
    let mut order: Vec<usize> = (0..utts.len()).collect();
    order.sort_by(|&a, &b| utts[a].start.total_cmp(&utts[b].start));
    let spans: Vec<(i64, i64)> = order
        .iter()
        .map(|&i| (to_samples(utts[i].start), to_samples(utts[i].end)))
        .collect();
    if spans.len() < 2 {
        return utts.to_vec();
    }
    // gap before each utterance, measured from the furthest end so far
    let mut gaps = vec![0i64; spans.len()];
    let mut frontier = spans[0].1;
    for (k, &(s, e)) in spans.iter().enumerate().skip(1) {
        gaps[k] = s - frontier;
        frontier = frontier.max(e);
    }
    let silent: Vec<usize> = (1..spans.len()).filter(|&k| gaps[k] > 0).collect();
    if silent.is_empty() {
        return utts.to_vec();
    }
    let normal = Normal::new(0.0, sd_samples).expect("sd is finite and non-negative");
    let jittered: Vec<f64> = silent
        .iter()
        .map(|&k| (gaps[k] as f64 + normal.sample(rng)).round().max(1.0))
        .collect();
    let total: i64 = silent.iter().map(|&k| gaps[k]).sum();
    let jtotal: f64 = jittered.iter().sum();
    let mut fixed: Vec<i64> = jittered
        .iter()
        .map(|&g| ((g * total as f64 / jtotal).round() as i64).max(1))
        .collect();
    // rounding leftovers, one sample at a time
    let mut rest = total - fixed.iter().sum::<i64>();
    let mut k = 0;
    let n = fixed.len();
    while rest != 0 {
        let g = &mut fixed[k % n];
        if rest > 0 {
            *g += 1;
            rest -= 1;
        } else if *g > 1 {
            *g -= 1;
            rest += 1;
        }
        k += 1;
    }
    for (&k, &g) in silent.iter().zip(&fixed) {
        gaps[k] = g;
    }

    // everything lands on the sample grid, the first utterance included
    let mut out = utts.to_vec();
    out[order[0]].start = to_secs(spans[0].0);
    out[order[0]].end = to_secs(spans[0].1);
    let mut frontier = spans[0].1;
    for (k, &(s, e)) in spans.iter().enumerate().skip(1) {
        let start = frontier + gaps[k];
        let end = start + (e - s);
        let u = &mut out[order[k]];
        u.start = to_secs(start);
        u.end = to_secs(end);
        frontier = frontier.max(end);
    }
    out
}

/// Silence-perturbation augmentation applied to the target and the
/// interference tracks independently. `sd_seconds == 0` is the identity.
pub fn perturb_silences(script: &ConversationScript, sd_seconds: f64, seed: u64) -> ConversationScript {
    if !(sd_seconds > 0.0) {
        return script.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = sd_seconds * f64::from(SAMPLE_RATE);
    let mut out = script.clone();
    out.target = perturb_track(&script.target, sd, &mut rng);
    out.interference = perturb_track(&script.interference, sd, &mut rng);
    if let Some(m) = &out.mover {
        out.transition_s = out
            .interference
            .iter()
            .filter(|u| &u.speaker_id == m)
            .map(|u| u.start)
            .min_by(f64::total_cmp);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::super::Policy;
    use super::*;
    use proptest::prelude::*;

    fn u(s: &str, a: f64, b: f64) -> Utterance {
        Utterance {
            speaker_id: s.into(),
            start: a,
            end: b,
            source: String::new(),
        }
    }

    fn script(target: Vec<Utterance>) -> ConversationScript {
        ConversationScript {
            policy: Policy::TwoSpk,
            wearer_id: "w".into(),
            duration_s: 60.0,
            target,
            interference: vec![],
            mover: None,
            transition_s: None,
        }
    }

    fn silence_total(us: &[Utterance]) -> i64 {
        let mut v: Vec<(i64, i64)> = us.iter().map(|u| (to_samples(u.start), to_samples(u.end))).collect();
        v.sort();
        let mut frontier = v[0].1;
        let mut total = 0;
        for &(s, e) in &v[1..] {
            total += (s - frontier).max(0);
            frontier = frontier.max(e);
        }
        total
    }

    #[test]
    fn zero_sd_is_identity() {
        let s = script(vec![u("w", 0.0, 5.0), u("p", 5.5, 9.0)]);
        assert_eq!(perturb_silences(&s, 0.0, 3), s);
    }

    #[test]
    fn overlaps_keep_their_offsets() {
        let s = script(vec![u("w", 0.0, 5.0), u("p", 4.5, 9.0), u("w", 10.0, 12.0), u("p", 13.0, 15.0)]);
        let p = perturb_silences(&s, 1.0, 5);
        assert_eq!(p.target[1].start - p.target[0].end, -0.5);
        assert_eq!(p.target[0], s.target[0]);
        assert_eq!(p.target[3].end, 15.0);
        assert_eq!(silence_total(&p.target), silence_total(&s.target));
    }

    proptest! {
        #[test]
        fn conserves_silence_and_order(
            durs in prop::collection::vec((0.2f64..6.0, -0.4f64..2.0), 2..20),
            sd in 0.0f64..3.0,
            seed in any::<u64>(),
        ) {
            let mut t = 0.0;
            let mut utts = Vec::new();
            for (i, (d, g)) in durs.iter().enumerate() {
                let start: f64 = if i == 0 { 0.0 } else { (t + g).max(utts.last().map_or(0.0, |u: &Utterance| u.start + 0.01)) };
                utts.push(u(if i % 2 == 0 { "w" } else { "p" }, start, start + d));
                t = start + d;
            }
            let s = script(utts);
            let p = perturb_silences(&s, sd, seed);
            prop_assert_eq!(silence_total(&p.target), silence_total(&s.target));
            for who in ["w", "p"] {
                let starts: Vec<f64> = p.target.iter().filter(|u| u.speaker_id == who).map(|u| u.start).collect();
                prop_assert!(starts.windows(2).all(|w| w[0] <= w[1]));
            }
            for (a, b) in s.target.iter().zip(&p.target) {
                prop_assert_eq!(to_samples(a.end) - to_samples(a.start), to_samples(b.end) - to_samples(b.start));
            }
        }
    }
}
