//! Egocentric binaural spatialization: shoebox rooms, image-source RIRs and
//! FFT convolution of each speaker's stem to the wearer's two ear mics.

use crate::audio::{AudioBuffer, AudioError, SAMPLE_RATE};
use crate::synth::{DryReference, MixturePackage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::PI;

pub const SPEED_OF_SOUND: f64 = 343.0;
pub const MAX_DRAWS: usize = 1000;

const ROOM_LW: (f64, f64) = (5.0, 10.0);
const ROOM_H: (f64, f64) = (3.0, 4.0);
const RT60: (f64, f64) = (0.15, 1.0);
const WEARER_FROM_CENTER: f64 = 1.0;
const OTHERS_FROM_WEARER: (f64, f64) = (0.5, 1.5);
// (mean, sd) in metres
const HEIGHT: (f64, f64) = (1.75, 0.07);
const HEAD_WIDTH: (f64, f64) = (0.15, 0.02);
const MOUTH_DOWN: (f64, f64) = (0.18, 0.02);
const MOUTH_FORWARD: (f64, f64) = (0.1075, 0.02);
// every point keeps at least this far from the walls
const WALL_MARGIN: f64 = 0.01;

pub type Point = [f64; 3];

#[derive(Debug, thiserror::Error)]
pub enum RoomError {
    #[error("no valid scene after {draws} draws: {what}")]
    Infeasible { draws: usize, what: String },
    #[error("degenerate geometry: {0}")]
    Degenerate(String),
    #[error("{0}")]
    Structure(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
}

/// One person in the room. `head` is the head centre; its z is the height.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Person {
    pub head: Point,
    pub height_m: f64,
    /// Raw head-width draw; ears sit half of it either side of the head.
    pub head_width_m: f64,
    /// Azimuth the person faces, radians.
    pub facing: f64,
    pub mouth: Point,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    /// (L, W, H) in metres.
    pub room: Point,
    pub rt60: f64,
    pub wearer: Person,
    /// Everyone except the wearer.
    pub speakers: Vec<Person>,
    /// Wearer's left and right ear mics.
    pub mics: [Point; 2],
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RirPair {
    pub left: Vec<f32>,
    pub right: Vec<f32>,
    pub source: String,
}

fn inside(room: &Point, p: &Point) -> bool {
    (0..3).all(|i| p[i] > WALL_MARGIN && p[i] < room[i] - WALL_MARGIN)
}

fn dist(a: &Point, b: &Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

impl SceneConfig {
    pub fn mouths(&self) -> Vec<Point> {
        std::iter::once(&self.wearer).chain(&self.speakers).map(|p| p.mouth).collect()
    }

    /// Checks every documented range; returns the first broken one.
    pub fn check(&self) -> Result<(), String> {
        let [l, w, h] = self.room;
        if !((ROOM_LW.0..=ROOM_LW.1).contains(&l) && (ROOM_LW.0..=ROOM_LW.1).contains(&w)) {
            return Err(format!("floor {l} x {w} m"));
        }
        if !(ROOM_H.0..=ROOM_H.1).contains(&h) {
            return Err(format!("height {h} m"));
        }
        if !(RT60.0..=RT60.1).contains(&self.rt60) {
            return Err(format!("rt60 {} s", self.rt60));
        }
        let c = [l / 2.0, w / 2.0];
        let hd = |a: &Point, b: &[f64]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        if hd(&self.wearer.head, &c) > WEARER_FROM_CENTER + 1e-9 {
            return Err("wearer too far from the room centre".into());
        }
        for p in &self.speakers {
            let d = hd(&p.head, &self.wearer.head);
            if !(OTHERS_FROM_WEARER.0 - 1e-9..=OTHERS_FROM_WEARER.1 + 1e-9).contains(&d) {
                return Err(format!("speaker {d:.3} m from the wearer"));
            }
        }
        let people = std::iter::once(&self.wearer).chain(&self.speakers);
        for p in people.flat_map(|p| [p.head, p.mouth]).chain(self.mics) {
            if !inside(&self.room, &p) {
                return Err(format!("point {p:?} outside the room"));
            }
        }
        Ok(())
    }
}

/// One draw of body measurements at `xy`; `None` when a value is
/// non-physical or a point falls outside the room.
fn try_person(rng: &mut ChaCha8Rng, room: &Point, xy: [f64; 2], facing: f64) -> Option<(Person, [Point; 2])> {
    let mut n = |(m, s): (f64, f64)| Normal::new(m, s).expect("positive sd").sample(rng);
    let (height, width, down, forward) = (n(HEIGHT), n(HEAD_WIDTH), n(MOUTH_DOWN), n(MOUTH_FORWARD));
    if height <= 0.0 || width <= 0.0 || down <= 0.0 || forward <= 0.0 {
        return None;
    }
    let head = [xy[0], xy[1], height];
    let (fx, fy) = (facing.cos(), facing.sin());
    let mouth = [head[0] + forward * fx, head[1] + forward * fy, height - down];
    // left ear is to the left of the facing direction
    let half = width / 2.0;
    let ears = [
        [head[0] - half * fy, head[1] + half * fx, height],
        [head[0] + half * fy, head[1] - half * fx, height],
    ];
    [head, mouth, ears[0], ears[1]].iter().all(|p| inside(room, p)).then_some((
        Person {
            head,
            height_m: height,
            head_width_m: width,
            facing,
            mouth,
        },
        ears,
    ))
}

/// Random scene with the wearer plus `n_speakers` other people. Room size,
/// RT60 and horizontal placements are uniform; body measurements are
/// Gaussian. A person whose draw lands outside the room or turns
/// non-physical is drawn again, at most `MAX_DRAWS` times per scene.
pub fn sample_scene(n_speakers: usize, seed: u64) -> Result<SceneConfig, RoomError> {
    if n_speakers == 0 {
        return Err(RoomError::Structure("a scene needs at least one speaker besides the wearer".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let room = [
        rng.random_range(ROOM_LW.0..=ROOM_LW.1),
        rng.random_range(ROOM_LW.0..=ROOM_LW.1),
        rng.random_range(ROOM_H.0..=ROOM_H.1),
    ];
    let rt60 = rng.random_range(RT60.0..=RT60.1);
    let mut draws = 0;
    let mut spend = |what: &str| {
        draws += 1;
        if draws > MAX_DRAWS {
            return Err(RoomError::Infeasible {
                draws: MAX_DRAWS,
                what: what.to_string(),
            });
        }
        Ok(())
    };

    let (wearer, mics) = loop {
        spend("wearer placement")?;
        let r = rng.random_range(0.0..=WEARER_FROM_CENTER);
        let a = rng.random_range(0.0..2.0 * PI);
        let xy = [room[0] / 2.0 + r * a.cos(), room[1] / 2.0 + r * a.sin()];
        let facing = rng.random_range(0.0..2.0 * PI);
        if let Some(p) = try_person(&mut rng, &room, xy, facing) {
            break p;
        }
    };
    let w = [wearer.head[0], wearer.head[1]];
    let mut speakers = Vec::with_capacity(n_speakers);
    while speakers.len() < n_speakers {
        spend("speaker placement")?;
        let r = rng.random_range(OTHERS_FROM_WEARER.0..=OTHERS_FROM_WEARER.1);
        let a = rng.random_range(0.0..2.0 * PI);
        let xy = [w[0] + r * a.cos(), w[1] + r * a.sin()];
        // everyone else faces the wearer
        let facing = (w[1] - xy[1]).atan2(w[0] - xy[0]);
        if let Some((p, _)) = try_person(&mut rng, &room, xy, facing) {
            speakers.push(p);
        }
    }
    Ok(SceneConfig {
        room,
        rt60,
        wearer,
        speakers,
        mics,
        seed,
    })
}

/// Wall absorption coefficient giving `rt60` under Sabine's formula, capped
/// at 1.
pub fn sabine_absorption(room: &Point, rt60: f64) -> f64 {
    let [l, w, h] = *room;
    let volume = l * w * h;
    let surface = 2.0 * (l * w + l * h + w * h);
    let k = 24.0 * std::f64::consts::LN_10 / SPEED_OF_SOUND;
    (k * volume / (surface * rt60)).min(1.0)
}

/// Calls `f(distance, reflections, image)` for every image of `source`
/// mirrored in the shoebox walls that lies within `reach` of `mic`.
pub fn for_each_image(room: &Point, source: &Point, mic: &Point, reach: f64, mut f: impl FnMut(f64, usize, Point)) {
    // per axis: each image coordinate with its reflection count
    let axis = |i: usize| -> Vec<(f64, usize)> {
        let n = (reach / (2.0 * room[i])).ceil() as i64 + 1;
        let mut v = Vec::new();
        for m in -n..=n {
            for u in 0..=1i64 {
                let pos = (1 - 2 * u) as f64 * source[i] + 2.0 * m as f64 * room[i];
                if (pos - mic[i]).abs() <= reach {
                    v.push((pos, ((m - u).abs() + m.abs()) as usize));
                }
            }
        }
        v
    };
    let (ax, ay, az) = (axis(0), axis(1), axis(2));
    let reach2 = reach * reach;
    for &(x, rx) in &ax {
        let dx = x - mic[0];
        for &(y, ry) in &ay {
            let dy = y - mic[1];
            let dxy = dx * dx + dy * dy;
            if dxy > reach2 {
                continue;
            }
            for &(z, rz) in &az {
                let dz = z - mic[2];
                let d2 = dxy + dz * dz;
                if d2 <= reach2 {
                    f(d2.sqrt(), rx + ry + rz, [x, y, z]);
                }
            }
        }
    }
}

/// Image-source RIR with the same `absorption` on every wall, truncated at
/// `length` samples. Each image contributes `beta^reflections / (4 pi d)`
/// at delay `d / c`, split over the two neighbouring taps.
pub fn image_source_rir(
    room: &Point,
    absorption: f64,
    source: &Point,
    mic: &Point,
    length: usize,
) -> Result<Vec<f32>, RoomError> {
    if dist(source, mic) < 1e-6 {
        return Err(RoomError::Degenerate("source and mic coincide".into()));
    }
    if !inside(room, source) || !inside(room, mic) {
        return Err(RoomError::Degenerate("point outside the room".into()));
    }
    let beta = (1.0 - absorption.clamp(0.0, 1.0)).sqrt();
    let fs = f64::from(SAMPLE_RATE);
    let reach = length as f64 / fs * SPEED_OF_SOUND;
    // beta^k up to the most reflections for_each_image can report
    let max_refl: usize = (0..3).map(|i| 2 * ((reach / (2.0 * room[i])).ceil() as usize + 1) + 1).sum();
    let pows: Vec<f64> = (0..=max_refl).map(|k| beta.powi(k as i32)).collect();
    let mut h = vec![0.0f64; length + 1];

    for_each_image(room, source, mic, reach, |d, refl, _| {
        let t = d / SPEED_OF_SOUND * fs;
        let k = t as usize;
        if k >= length {
            return;
        }
        let amp = pows[refl] / (4.0 * PI * d);
        let frac = t - k as f64;
        h[k] += amp * (1.0 - frac);
        h[k + 1] += amp * frac;
    });
    h.truncate(length);
    Ok(h.into_iter().map(|x| x as f32).collect())
}

/// Decay time extrapolated to 60 dB from a straight-line fit to the
/// backward-integrated energy between -5 and -25 dB. `None` when the
/// response never decays that far.
pub fn decay_time(h: &[f32]) -> Option<f64> {
    let mut tail = 0.0f64;
    let mut edc: Vec<f64> = h
        .iter()
        .rev()
        .map(|&x| {
            tail += f64::from(x) * f64::from(x);
            tail
        })
        .collect();
    edc.reverse();
    let total = *edc.first()?;
    if total <= 0.0 {
        return None;
    }
    let fs = f64::from(SAMPLE_RATE);
    let pts: Vec<(f64, f64)> = edc
        .iter()
        .enumerate()
        .map(|(i, &e)| (i as f64 / fs, 10.0 * (e / total).log10()))
        .filter(|&(_, db)| (-25.0..=-5.0).contains(&db))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let (mx, my) = pts.iter().fold((0.0, 0.0), |(a, b), &(x, y)| (a + x / n, b + y / n));
    let sxy: f64 = pts.iter().map(|&(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|&(x, _)| (x - mx) * (x - mx)).sum();
    let slope = sxy / sxx;
    (slope < 0.0).then(|| -60.0 / slope)
}

const CALIBRATION_STEPS: usize = 8;

/// Wall absorption for `rt60`. Sabine's value is the starting point; a
/// specular shoebox decays slower than Sabine assumes because grazing paths
/// meet few walls, so the per-reflection loss is rescaled until a probe RIR
/// between two fixed interior points decays in `rt60`.
pub fn wall_absorption(room: &Point, rt60: f64) -> f64 {
    let src = [0.3 * room[0], 0.35 * room[1], 0.4 * room[2]];
    let mic = [0.7 * room[0], 0.6 * room[1], 0.55 * room[2]];
    let fs = f64::from(SAMPLE_RATE);
    let len = ((dist(&src, &mic) / SPEED_OF_SOUND + 1.5 * rt60) * fs).ceil() as usize;
    let mut alpha = sabine_absorption(room, rt60).min(0.999);
    for _ in 0..CALIBRATION_STEPS {
        let Ok(h) = image_source_rir(room, alpha, &src, &mic, len) else { break };
        let Some(t) = decay_time(&h) else { break };
        let ratio = t / rt60;
        if (ratio - 1.0).abs() < 0.02 {
            break;
        }
        // energy loss per reflection is -ln(1 - alpha); decay time goes as its inverse
        let loss = -(1.0 - alpha).ln() * ratio;
        alpha = (1.0 - (-loss).exp()).clamp(1e-4, 0.999);
    }
    alpha
}

/// RIR long enough for the reverberant tail to fall 60 dB below the direct
/// sound.
pub fn compute_rir(scene: &SceneConfig, source: &Point, mic: &Point) -> Result<Vec<f32>, RoomError> {
    rir_with(scene, wall_absorption(&scene.room, scene.rt60), source, mic)
}

fn rir_with(scene: &SceneConfig, alpha: f64, source: &Point, mic: &Point) -> Result<Vec<f32>, RoomError> {
    let fs = f64::from(SAMPLE_RATE);
    let direct = dist(source, mic) / SPEED_OF_SOUND;
    let length = ((direct + scene.rt60) * fs).ceil() as usize + 1;
    image_source_rir(&scene.room, alpha, source, mic, length)
}

/// Left and right RIRs from every mouth, wearer first.
pub fn scene_rirs(scene: &SceneConfig) -> Result<Vec<RirPair>, RoomError> {
    let alpha = wall_absorption(&scene.room, scene.rt60);
    let people = std::iter::once(("wearer".to_string(), &scene.wearer))
        .chain(scene.speakers.iter().enumerate().map(|(i, p)| (format!("speaker{i}"), p)));
    people
        .map(|(name, p)| {
            Ok(RirPair {
                left: rir_with(scene, alpha, &p.mouth, &scene.mics[0])?,
                right: rir_with(scene, alpha, &p.mouth, &scene.mics[1])?,
                source: name,
            })
        })
        .collect()
}

/// Linear convolution of `x` with each filter, truncated to `x.len()`.
pub fn fft_convolve(x: &[f32], filters: &[&[f32]]) -> Vec<Vec<f32>> {
    let longest = filters.iter().map(|h| h.len()).max().unwrap_or(0);
    if x.is_empty() || longest == 0 {
        return vec![vec![0.0; x.len()]; filters.len()];
    }
    let n = (x.len() + longest - 1).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let spectrum = |s: &[f32]| {
        let mut b: Vec<Complex64> = s.iter().map(|&v| Complex64::new(f64::from(v), 0.0)).collect();
        b.resize(n, Complex64::new(0.0, 0.0));
        fwd.process(&mut b);
        b
    };
    let xf = spectrum(x);
    filters
        .iter()
        .map(|h| {
            let mut y = spectrum(h);
            y.iter_mut().zip(&xf).for_each(|(a, b)| *a *= b);
            inv.process(&mut y);
            y[..x.len()].iter().map(|c| (c.re / n as f64) as f32).collect()
        })
        .collect()
}

fn binaural(x: &[f32], rirs: &RirPair) -> Result<AudioBuffer, RoomError> {
    let ch = fft_convolve(x, &[&rirs.left, &rirs.right]);
    Ok(AudioBuffer::new(ch, SAMPLE_RATE)?)
}

fn add_into(acc: &mut AudioBuffer, x: &AudioBuffer) {
    for c in 0..acc.num_channels() {
        acc.channel_mut(c).iter_mut().zip(x.channel(c)).for_each(|(a, b)| *a += b);
    }
}

/// Renders a monaural package at the wearer's ears. The wearer's stem goes
/// through the wearer's own mouth-to-ear RIRs; the other stems, in sorted
/// speaker order, take the scene's other people in order. Mono references
/// are kept for scoring.
pub fn spatialize(package: &MixturePackage, scene: &SceneConfig) -> Result<MixturePackage, RoomError> {
    if package.mixture.num_channels() != 1 || package.dry.is_some() {
        return Err(RoomError::Structure("package is already spatialized".into()));
    }
    let script = &package.script;
    if !package.stems.contains_key(&script.wearer_id) {
        return Err(RoomError::Structure(format!("no stem for wearer {}", script.wearer_id)));
    }
    let others: Vec<&String> = package.stems.keys().filter(|k| **k != script.wearer_id).collect();
    if others.len() != scene.speakers.len() {
        return Err(RoomError::Structure(format!(
            "package has {} speakers besides the wearer, scene has {}",
            others.len(),
            scene.speakers.len()
        )));
    }
    let rirs = scene_rirs(scene)?;
    let rir_of = |speaker: &str| -> &RirPair {
        if speaker == script.wearer_id {
            &rirs[0]
        } else {
            &rirs[1 + others.iter().position(|o| *o == speaker).expect("speaker listed")]
        }
    };

    let n = package.mixture.len();
    let targets = script.target_speakers();
    let mut target_sum = AudioBuffer::zeros(2, n);
    let mut interference_sum = AudioBuffer::zeros(2, n);
    let mut stems = BTreeMap::new();
    for (speaker, stem) in &package.stems {
        let dry = stem.channel(0);
        let wet = binaural(dry, rir_of(speaker))?;
        let is_target = targets.contains(speaker);
        let is_interf = script.interference.iter().any(|u| &u.speaker_id == speaker);
        match (is_target, is_interf) {
            (true, true) => {
                // a leaving speaker: target speech strictly before the switch
                let cut = script
                    .transition_s
                    .map(|t| ((t * f64::from(SAMPLE_RATE)).round() as usize).min(n))
                    .ok_or_else(|| RoomError::Structure(format!("{speaker} has both roles but no transition")))?;
                let mut before = dry.to_vec();
                before[cut..].fill(0.0);
                let wet_t = binaural(&before, rir_of(speaker))?;
                add_into(&mut target_sum, &wet_t);
                let mut wet_i = wet.clone();
                for c in 0..2 {
                    wet_i.channel_mut(c).iter_mut().zip(wet_t.channel(c)).for_each(|(a, b)| *a -= b);
                }
                add_into(&mut interference_sum, &wet_i);
            }
            (true, false) => add_into(&mut target_sum, &wet),
            _ => add_into(&mut interference_sum, &wet),
        }
        stems.insert(speaker.clone(), wet);
    }
    let mut mixture = target_sum.clone();
    add_into(&mut mixture, &interference_sum);
    let noise = package.noise.as_ref().map(|nz| {
        let m = nz.downmix();
        AudioBuffer::new(vec![m.clone(), m], SAMPLE_RATE).expect("equal channel lengths")
    });
    if let Some(nz) = &noise {
        add_into(&mut mixture, nz);
    }
    Ok(MixturePackage {
        mixture,
        target_sum,
        interference_sum,
        stems,
        noise,
        script: script.clone(),
        snr_db: package.snr_db,
        dry: Some(DryReference {
            target_sum: package.reference_target(),
            stems: package.reference_stems(),
        }),
    })
}
