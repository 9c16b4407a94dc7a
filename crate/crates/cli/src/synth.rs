use crate::manifest::{package_manifests, Context, RUN_MANIFEST};
use crate::usage;
use anyhow::Context as _;
use clap::Args;
use egoconv::audio::read_wav;
use egoconv::room::{sample_scene, spatialize as spatialize_package};
use egoconv::synth::{
    build_timeline, load_timestamps, perturb_silences, render_mixture, synthetic_turns, MixedClips, MixturePackage,
    Policy, SpeakerPool, SynthError, SyntheticVoices, Turn, WavClips, DEFAULT_DURATION_S, PACKAGE_MANIFEST,
};
use rand::Rng;
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    /// Mixing policy: 2spk, 3spk, 4spk, 5spk, leaving or passthrough.
    #[arg(long)]
    policy: Policy,
    /// Number of mixtures to generate.
    #[arg(long, default_value_t = 1)]
    n: usize,
    /// Output directory; one sub-directory per mixture.
    #[arg(long)]
    out: PathBuf,
    /// JSON-lines speaker timestamps ({"conversation", "speaker", "start",
    /// "end", "clip"}); random turn timings when omitted.
    #[arg(long)]
    timestamps: Option<PathBuf>,
    /// Clip corpus laid out as <dir>/<speaker>/*.wav; synthetic voices when
    /// omitted.
    #[arg(long)]
    clips: Option<PathBuf>,
    /// Fixed target-to-interference SNR in dB; drawn from [-10, 10] when
    /// omitted.
    #[arg(long, allow_hyphen_values = true)]
    snr: Option<f64>,
    /// Silence-perturbation standard deviation in seconds (0 disables).
    #[arg(long, default_value_t = 0.0)]
    silence_sd: f64,
    /// Mono background noise added to every mixture.
    #[arg(long)]
    noise: Option<PathBuf>,
    /// Gain applied to --noise.
    #[arg(long, default_value_t = 1.0)]
    noise_gain: f32,
}

fn turns_for(
    args: &SynthArgs,
    corpus: &Option<Vec<(String, Vec<Turn>)>>,
    index: usize,
    attempt: usize,
    rng: &mut impl Rng,
) -> (Vec<Turn>, Vec<Turn>) {
    match corpus {
        Some(convs) => {
            let k = convs.len();
            let t = convs[(index + attempt) % k].1.clone();
            let i = if k > 1 { convs[(index + attempt + 1) % k].1.clone() } else { Vec::new() };
            (t, i)
        }
        None => {
            let min_long = args.policy.target_speakers().unwrap_or(2) + 1;
            (
                synthetic_turns(rng, DEFAULT_DURATION_S, min_long),
                synthetic_turns(rng, DEFAULT_DURATION_S, 0),
            )
        }
    }
}

/// One mixture: draw turns and speakers until the policy is satisfiable.
fn make_sample(
    args: &SynthArgs,
    corpus: &Option<Vec<(String, Vec<Turn>)>>,
    noise: Option<&egoconv::audio::AudioBuffer>,
    index: usize,
    ctx: &mut Context,
) -> anyhow::Result<MixturePackage> {
    let i = index as u64;
    let mut rng = ctx.seeds.rng("synth/turns", i);
    let pool = match &args.clips {
        Some(dir) if args.policy != Policy::Passthrough => {
            SpeakerPool::from_clip_dir(dir, args.policy, &mut ctx.seeds.rng("synth/speakers", i))?
        }
        _ => SpeakerPool::named(args.policy),
    };
    let timeline_seed = ctx.seed("synth/timeline", i);
    let attempts = if corpus.is_some() { corpus.as_ref().map_or(1, Vec::len) } else { 10 };
    let mut last_err = None;
    let mut script = None;
    for attempt in 0..attempts {
        let (target, interference) = turns_for(args, corpus, index, attempt, &mut rng);
        match build_timeline(&target, &interference, args.policy, &pool, timeline_seed.wrapping_add(attempt as u64)) {
            Ok(s) => {
                script = Some(s);
                break;
            }
            Err(e @ SynthError::Infeasible { .. }) => last_err = Some(e),
            Err(e) => return Err(e.into()),
        }
    }
    let Some(mut script) = script else {
        return Err(last_err.expect("at least one attempt").into());
    };
    if args.silence_sd > 0.0 {
        script = perturb_silences(&script, args.silence_sd, ctx.seed("synth/perturb", i));
    }
    let snr = match args.snr {
        Some(s) => s,
        None => ctx.seeds.rng("synth/snr", i).random_range(-10.0..=10.0),
    };
    let provider = MixedClips {
        wav: args.clips.clone().map(|root| WavClips { root }),
        voices: SyntheticVoices {
            seed: ctx.seed("synth/voices", i),
        },
    };
    Ok(render_mixture(&script, &provider, snr, noise, args.noise_gain)?)
}

pub fn synth(args: SynthArgs, mut ctx: Context) -> anyhow::Result<()> {
    if args.n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    if let Some(s) = args.snr {
        if !(-10.0..=10.0).contains(&s) {
            return Err(usage(format!("--snr {s} is outside [-10, 10] dB")));
        }
    }
    if !(args.silence_sd >= 0.0) {
        return Err(usage("--silence-sd must be non-negative"));
    }
    if args.policy == Policy::Passthrough && args.timestamps.is_none() {
        return Err(usage("--policy passthrough needs --timestamps with speaker labels"));
    }
    let corpus = args.timestamps.as_deref().map(load_timestamps).transpose()?;
    if corpus.as_ref().is_some_and(Vec::is_empty) {
        anyhow::bail!("{} holds no turns", args.timestamps.as_ref().expect("checked").display());
    }
    let noise = args.noise.as_deref().map(read_wav).transpose()?;

    let mut outputs = Vec::new();
    for index in 0..args.n {
        let pkg = make_sample(&args, &corpus, noise.as_ref(), index, &mut ctx)
            .with_context(|| format!("mixture {index}"))?;
        let dir = args.out.join(format!("sample_{index:04}"));
        let seeds: BTreeMap<String, serde_json::Value> = ctx
            .seeds
            .stages
            .iter()
            .filter(|(k, _)| k.rsplit_once('/').is_some_and(|(_, n)| n == index.to_string()))
            .map(|(k, v)| (k.clone(), (*v).into()))
            .collect();
        let extra = BTreeMap::from([("stage_seeds".to_string(), serde_json::to_value(seeds)?)]);
        pkg.save(&dir, ctx.seeds.root, extra)?;
        outputs.push(dir.join(PACKAGE_MANIFEST));
    }
    let mut inputs: Vec<&Path> = Vec::new();
    inputs.extend(args.timestamps.as_deref());
    inputs.extend(args.clips.as_deref());
    inputs.extend(args.noise.as_deref());
    let outs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    println!("wrote {} mixture(s) to {}", outputs.len(), args.out.display());
    ctx.finish("synth", &args.out.join(RUN_MANIFEST), &args, &inputs, &outs)
}

#[derive(Debug, Args, Serialize)]
pub struct SpatializeArgs {
    /// Package manifest, package directory, or directory of packages.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output directory (one sub-directory per package when several).
    #[arg(long)]
    out: PathBuf,
}

pub fn spatialize(args: SpatializeArgs, mut ctx: Context) -> anyhow::Result<()> {
    let manifests = package_manifests(&args.input)?;
    let several = manifests.len() > 1;
    let mut outputs = Vec::new();
    for (i, path) in manifests.iter().enumerate() {
        let (pkg, m) = MixturePackage::load(path).with_context(|| format!("loading {}", path.display()))?;
        let others = pkg.stems.len().saturating_sub(1);
        let scene = sample_scene(others, ctx.seed("scene", i as u64))?;
        let wet = spatialize_package(&pkg, &scene).with_context(|| format!("spatializing {}", path.display()))?;
        let dir = if several {
            let name = path.parent().and_then(Path::file_name).map_or_else(|| format!("sample_{i:04}").into(), |n| n.to_owned());
            args.out.join(name)
        } else {
            args.out.clone()
        };
        let mut extra = m.extra.clone();
        extra.insert("scene".into(), serde_json::to_value(&scene)?);
        extra.insert("source_manifest".into(), path.display().to_string().into());
        wet.save(&dir, m.seed, extra)?;
        outputs.push(dir.join(PACKAGE_MANIFEST));
    }
    println!("spatialized {} package(s) into {}", outputs.len(), args.out.display());
    let ins: Vec<&Path> = manifests.iter().map(PathBuf::as_path).collect();
    let outs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    ctx.finish("spatialize", &args.out.join(RUN_MANIFEST), &args, &ins, &outs)
}
