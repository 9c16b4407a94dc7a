//! Rule checker for emitted scripts. Deliberately shares no code with the
//! timeline builder: it only looks at the finished script.

use super::{ConversationScript, Policy, Utterance, LEAVE_ACTIVE_BEFORE_S, LEAVE_JOIN_BEFORE_S, LONG_TURN_S};
use std::collections::BTreeSet;

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub rule: &'static str,
    pub detail: String,
}

fn v(rule: &'static str, detail: impl Into<String>) -> Violation {
    Violation {
        rule,
        detail: detail.into(),
    }
}

fn speakers(us: &[Utterance]) -> BTreeSet<&str> {
    us.iter().map(|u| u.speaker_id.as_str()).collect()
}

fn by_start(us: &[Utterance]) -> Vec<&Utterance> {
    let mut s: Vec<&Utterance> = us.iter().collect();
    s.sort_by(|a, b| a.start.total_cmp(&b.start));
    s
}

/// Every violated rule; empty means the script is valid.
pub fn validate_script(s: &ConversationScript) -> Vec<Violation> {
    let mut out = Vec::new();
    for u in s.target.iter().chain(&s.interference) {
        if !(u.start >= 0.0 && u.start < u.end && u.end <= s.duration_s) {
            out.push(v("span", format!("{} [{}, {}] outside [0, {}]", u.speaker_id, u.start, u.end, s.duration_s)));
        }
    }

    let t = by_start(&s.target);
    let tset = speakers(&s.target);
    let iset = speakers(&s.interference);
    let shared: Vec<&str> = tset.intersection(&iset).copied().collect();
    let allowed_shared: Vec<&str> = match (s.policy, &s.mover) {
        (Policy::Leaving, Some(m)) => vec![m.as_str()],
        _ => vec![],
    };
    if shared != allowed_shared {
        out.push(v("disjoint", format!("shared speakers {shared:?}")));
    }

    // wearer opens, and owns every turn until the anchor is reached
    match t.first() {
        None => out.push(v("anchor", "no target speech")),
        Some(first) if first.speaker_id != s.wearer_id => {
            out.push(v("anchor", format!("conversation opens with {}", first.speaker_id)))
        }
        Some(_) => {
            let anchor = s.policy.anchor_s();
            let mut acc = 0.0;
            let mut k = 0;
            while k < t.len() && acc < anchor {
                acc += t[k].end - t[k].start;
                k += 1;
            }
            if acc < anchor {
                out.push(v("anchor", format!("only {acc:.3} s of target speech")));
            } else if let Some(u) = t[..k].iter().find(|u| u.speaker_id != s.wearer_id) {
                out.push(v("anchor", format!("{} speaks at {} inside the wearer anchor", u.speaker_id, u.start)));
            }
        }
    }

    let long = |who: &str, us: &[Utterance]| us.iter().any(|u| u.speaker_id == who && u.end - u.start >= LONG_TURN_S);
    let partners: Vec<&str> = tset.iter().copied().filter(|p| *p != s.wearer_id).collect();

    match s.policy {
        Policy::TwoSpk | Policy::ThreeSpk | Policy::FourSpk | Policy::FiveSpk => {
            let n = s.policy.target_speakers().unwrap_or(0);
            if tset.len() != n {
                out.push(v("target-size", format!("{} target speakers, policy needs {n}", tset.len())));
            }
            for p in &partners {
                if !long(p, &s.target) {
                    out.push(v("partner-long-turn", format!("{p} never speaks {LONG_TURN_S} s in one turn")));
                }
            }
            if !(iset.is_empty() || iset.len() == 2) {
                out.push(v("interference-size", format!("{} interference speakers", iset.len())));
            }
        }
        Policy::Passthrough => {
            if !(iset.is_empty() || iset.len() == 2) {
                out.push(v("interference-size", format!("{} interference speakers", iset.len())));
            }
        }
        Policy::Leaving => out.extend(check_leaving(s, &tset, &iset, &partners, &long)),
    }
    out
}

fn check_leaving(
    s: &ConversationScript,
    tset: &BTreeSet<&str>,
    iset: &BTreeSet<&str>,
    partners: &[&str],
    long: &dyn Fn(&str, &[Utterance]) -> bool,
) -> Vec<Violation> {
    let mut out = Vec::new();
    let Some(m) = s.mover.as_deref() else {
        return vec![v("leaving", "no mover recorded")];
    };
    if tset.len() != 3 {
        out.push(v("target-size", format!("{} target speakers before leaving, need 3", tset.len())));
    }
    if !partners.contains(&m) {
        out.push(v("leaving", format!("mover {m} is not a target partner")));
    }
    let m_target: Vec<&Utterance> = s.target.iter().filter(|u| u.speaker_id == m).collect();
    let last_target = m_target.iter().map(|u| u.end).fold(f64::NEG_INFINITY, f64::max);
    if !m_target.iter().any(|u| u.end <= LEAVE_ACTIVE_BEFORE_S) {
        out.push(v("leaving", format!("mover has no target turn ending by {LEAVE_ACTIVE_BEFORE_S} s")));
    }
    let i = by_start(&s.interference);
    match i.iter().position(|u| u.speaker_id == m) {
        None => out.push(v("leaving", "mover never joins the interference")),
        Some(j) => {
            let first = i[j];
            if !(first.start > last_target && first.start < LEAVE_JOIN_BEFORE_S) {
                out.push(v(
                    "leaving",
                    format!("mover joins at {} s, outside ({last_target}, {LEAVE_JOIN_BEFORE_S})", first.start),
                ));
            }
            if first.end - first.start < LONG_TURN_S {
                out.push(v("leaving", format!("mover's first interference turn lasts {} s", first.end - first.start)));
            }
            if s.transition_s != Some(first.start) {
                out.push(v("leaving", "recorded transition time disagrees with the script"));
            }
            let before: BTreeSet<&str> = i[..j].iter().map(|u| u.speaker_id.as_str()).collect();
            if before.len() > 2 {
                out.push(v("interference-size", format!("{} speakers before the transition", before.len())));
            }
        }
    }
    if iset.len() != 3 {
        out.push(v("interference-size", format!("{} interference speakers after leaving, need 3", iset.len())));
    }
    for p in partners.iter().filter(|p| **p != m) {
        if !long(p, &s.target) {
            out.push(v("partner-long-turn", format!("{p} never speaks {LONG_TURN_S} s in one turn")));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn u(s: &str, a: f64, b: f64) -> Utterance {
        Utterance {
            speaker_id: s.into(),
            start: a,
            end: b,
            source: String::new(),
        }
    }

    fn script(policy: Policy, target: Vec<Utterance>, interference: Vec<Utterance>) -> ConversationScript {
        ConversationScript {
            policy,
            wearer_id: "w".into(),
            duration_s: 60.0,
            target,
            interference,
            mover: None,
            transition_s: None,
        }
    }

    fn rules(s: &ConversationScript) -> Vec<&'static str> {
        validate_script(s).into_iter().map(|v| v.rule).collect()
    }

    #[test]
    fn accepts_a_valid_two_speaker_script() {
        let s = script(
            Policy::TwoSpk,
            vec![u("w", 0.0, 6.0), u("p", 7.0, 13.0)],
            vec![u("a", 0.0, 3.0), u("b", 3.0, 5.0)],
        );
        assert!(validate_script(&s).is_empty());
    }

    #[test]
    fn catches_each_rule() {
        let s = script(Policy::TwoSpk, vec![u("p", 0.0, 6.0), u("w", 7.0, 13.0)], vec![]);
        assert!(rules(&s).contains(&"anchor"));
        let s = script(Policy::TwoSpk, vec![u("w", 0.0, 3.0), u("p", 3.0, 9.0)], vec![]);
        assert!(rules(&s).contains(&"anchor"));
        let s = script(Policy::TwoSpk, vec![u("w", 0.0, 6.0), u("p", 7.0, 11.0)], vec![]);
        assert_eq!(rules(&s), vec!["partner-long-turn"]);
        let s = script(Policy::ThreeSpk, vec![u("w", 0.0, 6.0), u("p", 7.0, 13.0)], vec![]);
        assert!(rules(&s).contains(&"target-size"));
        let s = script(Policy::TwoSpk, vec![u("w", 0.0, 6.0), u("p", 7.0, 13.0)], vec![u("p", 1.0, 2.0), u("a", 3.0, 4.0)]);
        assert!(rules(&s).contains(&"disjoint"));
        let s = script(Policy::TwoSpk, vec![u("w", 0.0, 6.0), u("p", 7.0, 61.0)], vec![u("a", 1.0, 2.0)]);
        let r = rules(&s);
        assert!(r.contains(&"span") && r.contains(&"interference-size"));
    }

    #[test]
    fn leaving_rules() {
        let mut s = script(
            Policy::Leaving,
            vec![u("w", 0.0, 6.0), u("m", 7.0, 12.0), u("q", 13.0, 19.0), u("w", 21.0, 30.0)],
            vec![u("a", 0.0, 5.0), u("b", 6.0, 10.0), u("m", 25.0, 31.0), u("a", 32.0, 40.0)],
        );
        s.mover = Some("m".into());
        s.transition_s = Some(25.0);
        assert!(validate_script(&s).is_empty(), "{:?}", validate_script(&s));
        s.interference[2].start = 41.0;
        s.interference[2].end = 47.0;
        assert!(rules(&s).contains(&"leaving"));
    }
}
