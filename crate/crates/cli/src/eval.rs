use crate::manifest::{package_manifests, sidecar, write_json, Context};
use crate::usage;
use anyhow::Context as _;
use clap::Args;
use egoconv::audio::read_wav;
use egoconv::metrics::{conversation_stats, Activity, MetricReport, TurnStats};
use egoconv::synth::{load_timestamps, MixturePackage, PackageManifest};
use serde::Serialize;
use std::path::{Path, PathBuf};

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    /// Processed output WAV (as written by `run`).
    #[arg(long)]
    out: PathBuf,
    /// Package manifest.json the output was produced from.
    #[arg(long)]
    manifest: PathBuf,
    /// Report JSON path.
    #[arg(long)]
    report: PathBuf,
}

const NEUTRAL_NOTE: &str = "turns that are neither accurate nor confused count in both denominators";

#[derive(Serialize)]
struct EvalReport<'a> {
    #[serde(flatten)]
    metrics: &'a MetricReport,
    turn_stats: TurnStats,
    policy: String,
    snr_db: Option<f64>,
    note: &'static str,
}

fn target_activity(script: &egoconv::synth::ConversationScript) -> Vec<Activity> {
    script.target.iter().map(Activity::from).collect()
}

pub fn eval(args: EvalArgs, ctx: Context) -> anyhow::Result<()> {
    let (pkg, _) = MixturePackage::load(&args.manifest).with_context(|| format!("loading {}", args.manifest.display()))?;
    let output = read_wav(&args.out).with_context(|| format!("reading {}", args.out.display()))?.downmix();
    let mixture = pkg.mixture.downmix();
    let target = pkg.reference_target();
    if output.len() != mixture.len() {
        anyhow::bail!(
            "output has {} samples, mixture {}; run without --no-align so they line up",
            output.len(),
            mixture.len()
        );
    }
    let metrics = MetricReport::compute(&output, &mixture, &target, &pkg.reference_stems(), &pkg.script)?;
    let report = EvalReport {
        metrics: &metrics,
        turn_stats: conversation_stats(&target_activity(&pkg.script), Some(pkg.script.duration_s)),
        policy: pkg.script.policy.to_string(),
        snr_db: pkg.snr_db,
        note: NEUTRAL_NOTE,
    };
    write_json(&args.report, &report)?;
    println!(
        "SI-SDR in {:.2} dB, out {:.2} dB, SISDRi {:.2} dB; acc {:.3}, cr {:.3} over {} turns",
        metrics.sisdr_in, metrics.sisdr_out, metrics.sisdri, metrics.acc, metrics.cr, metrics.n_turns
    );
    ctx.finish(
        "eval",
        &sidecar(&args.report),
        &args,
        &[args.out.as_path(), args.manifest.as_path()],
        &[args.report.as_path()],
    )
}

#[derive(Debug, Args, Serialize)]
pub struct StatsArgs {
    /// Package manifest, package directory, or directory of packages; the
    /// target conversation of each script is analysed.
    #[arg(long, conflicts_with = "timestamps", required_unless_present = "timestamps")]
    manifest: Option<PathBuf>,
    /// JSON-lines timestamps; each conversation id is analysed.
    #[arg(long)]
    timestamps: Option<PathBuf>,
    /// Report JSON path.
    #[arg(long)]
    report: PathBuf,
}

#[derive(Serialize)]
struct Summary {
    mean: f64,
    std: f64,
}

fn summary(xs: &[f64]) -> Summary {
    if xs.is_empty() {
        return Summary { mean: 0.0, std: 0.0 };
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Summary { mean, std: var.sqrt() }
}

#[derive(Serialize)]
struct StatsReport {
    conversations: Vec<(String, TurnStats)>,
    turn_change_freq: Summary,
    turn_duration: Summary,
    overlap_ratio: Summary,
    ipu_duration: Summary,
    fto: Summary,
}

pub fn stats(args: StatsArgs, ctx: Context) -> anyhow::Result<()> {
    let mut inputs: Vec<PathBuf> = Vec::new();
    let conversations: Vec<(String, TurnStats)> = match (&args.manifest, &args.timestamps) {
        (Some(m), None) => {
            inputs = package_manifests(m)?;
            let mut out = Vec::new();
            for path in &inputs {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                let pm: PackageManifest =
                    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
                let st = conversation_stats(&target_activity(&pm.script), Some(pm.script.duration_s));
                out.push((path.display().to_string(), st));
            }
            out
        }
        (None, Some(ts)) => {
            inputs.push(ts.clone());
            load_timestamps(ts)?
                .into_iter()
                .map(|(id, turns)| {
                    let act: Vec<Activity> = turns
                        .iter()
                        .map(|t| Activity {
                            speaker: t.speaker.clone().unwrap_or_default(),
                            start: t.start,
                            end: t.end,
                        })
                        .collect();
                    (id, conversation_stats(&act, None))
                })
                .collect()
        }
        _ => return Err(usage("give exactly one of --manifest or --timestamps")),
    };
    let all = |f: fn(&TurnStats) -> Vec<f64>| -> Vec<f64> { conversations.iter().flat_map(|(_, s)| f(s)).collect() };
    let report = StatsReport {
        turn_change_freq: summary(&all(|s| vec![s.turn_change_freq])),
        turn_duration: summary(&all(|s| s.turn_durations.clone())),
        overlap_ratio: summary(&all(|s| vec![s.overlap_ratio])),
        ipu_duration: summary(&all(|s| s.ipu_durations.clone())),
        fto: summary(&all(|s| s.fto.clone())),
        conversations,
    };
    write_json(&args.report, &report)?;
    println!(
        "{} conversation(s): {:.2} turn changes/min, turn {:.2} s, overlap {:.3}, IPU {:.2} s, FTO {:.2} s",
        report.conversations.len(),
        report.turn_change_freq.mean,
        report.turn_duration.mean,
        report.overlap_ratio.mean,
        report.ipu_duration.mean,
        report.fto.mean
    );
    let ins: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    ctx.finish("stats", &sidecar(&args.report), &args, &ins, &[args.report.as_path()])
}
