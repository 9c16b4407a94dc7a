use crate::manifest::{sidecar, write_json, Context, RUN_MANIFEST};
use crate::{usage, ModelArgs};
use anyhow::Context as _;
use clap::Args;
use egoconv::audio::{read_wav, write_wav, AudioBuffer, WavEncoding};
use egoconv::models::count_parameters;
use egoconv::runtime::{bench as bench_models, process_sequential, process_stream, ClockMode, PipelineConfig, PipelineModels, Stage};
use egoconv::synth::MixturePackage;
use serde::Serialize;
use std::path::{Path, PathBuf};

const WEIGHT_STAGES: [&str; 3] = ["weights/fast", "weights/slow", "weights/beamformer"];

impl ModelArgs {
    fn config(&self, clock: ClockMode, align: bool) -> anyhow::Result<PipelineConfig> {
        let config = PipelineConfig {
            period_s: self.period,
            enable_beamformer: !self.no_beamformer,
            clock,
            align,
            weights_dir: self.weights_dir.clone(),
        };
        config.period_steps().map_err(|e| usage(format!("--T: {e}")))?;
        Ok(config)
    }

    fn load(&self, ctx: &mut Context) -> anyhow::Result<PipelineModels> {
        match &self.weights_dir {
            Some(dir) => Ok(PipelineModels::load_dir(dir, !self.no_beamformer)?),
            None => {
                for stage in WEIGHT_STAGES {
                    ctx.seed(stage, 0);
                }
                let mut m = PipelineModels::random(ctx.seeds.root)?;
                if self.no_beamformer {
                    m.beamformer = None;
                }
                Ok(m)
            }
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct RunArgs {
    /// Input WAV (mono or binaural, 16 kHz) or a package manifest.json.
    #[arg(long)]
    input: PathBuf,
    /// Output WAV (mono, float32).
    #[arg(long)]
    out: PathBuf,
    /// Per-chunk timing CSV: stage, chunk_index, wall_us, peak_rss_bytes.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Mono self-speech WAV used instead of the beamformer. A mono package
    /// supplies the wearer's stem automatically.
    #[arg(long)]
    selfspeech: Option<PathBuf>,
    #[command(flatten)]
    models: ModelArgs,
    /// Keep the streaming delay instead of aligning output to input.
    #[arg(long)]
    no_align: bool,
    /// Deliver chunks on the wall clock; late embeddings are reused.
    #[arg(long)]
    real_clock: bool,
    /// Offline single-threaded reference instead of the streaming runtime.
    #[arg(long, conflicts_with = "real_clock")]
    sequential: bool,
}

fn is_package(path: &Path) -> bool {
    path.is_dir() || path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

/// Input audio plus the wearer stem when the input is a mono package.
fn load_input(path: &Path) -> anyhow::Result<(AudioBuffer, Option<Vec<f32>>)> {
    if !is_package(path) {
        return Ok((read_wav(path).with_context(|| format!("reading {}", path.display()))?, None));
    }
    let manifest = if path.is_dir() { path.join(egoconv::synth::PACKAGE_MANIFEST) } else { path.to_path_buf() };
    let (pkg, _) = MixturePackage::load(&manifest).with_context(|| format!("loading {}", manifest.display()))?;
    let own = match pkg.mixture.num_channels() {
        1 => pkg.stems.get(&pkg.script.wearer_id).map(AudioBuffer::downmix),
        _ => None,
    };
    Ok((pkg.mixture, own))
}

pub fn run(args: RunArgs, mut ctx: Context) -> anyhow::Result<()> {
    let clock = if args.real_clock { ClockMode::Real } else { ClockMode::Virtual };
    let config = args.models.config(clock, !args.no_align)?;
    let (input, package_self) = load_input(&args.input)?;
    let selfspeech = match &args.selfspeech {
        Some(p) => {
            let a = read_wav(p).with_context(|| format!("reading {}", p.display()))?;
            if a.num_channels() != 1 {
                return Err(usage("--selfspeech must be a mono WAV"));
            }
            Some(a.into_channels().swap_remove(0))
        }
        None => package_self,
    };
    let beamformed = input.num_channels() == 2 && !args.models.no_beamformer;
    if !beamformed && selfspeech.is_none() {
        return Err(usage("mono input or --no-beamformer needs --selfspeech"));
    }
    let models = args.models.load(&mut ctx)?;

    let (output, report) = if args.sequential {
        let started = std::time::Instant::now();
        let out = process_sequential(&input, selfspeech.as_deref(), &models, &config)?;
        println!("processed {:.2} s in {:.2} s (sequential)", input.duration_secs(), started.elapsed().as_secs_f64());
        (out, None)
    } else {
        let (out, report) = process_stream(&input, selfspeech.as_deref(), &models, &config)?;
        println!(
            "processed {:.2} s: rtf {:.3} (fast path {:.3}), fast mean {:.0} us p95 {:.0} us, stale embeddings {}",
            input.duration_secs(),
            report.rtf(),
            report.rtf_fast_path(),
            report.mean_us(Stage::Fast),
            report.p95_us(Stage::Fast),
            report.stale_embeddings
        );
        (out, Some(report))
    };

    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_wav(&args.out, &output, WavEncoding::Float32).with_context(|| format!("writing {}", args.out.display()))?;
    let mut outputs = vec![args.out.as_path()];
    if let Some(path) = &args.report {
        let csv = report.as_ref().map(|r| r.to_csv()).ok_or_else(|| usage("--report needs the streaming runtime (drop --sequential)"))?;
        std::fs::write(path, csv).with_context(|| format!("writing {}", path.display()))?;
        outputs.push(path);
    }
    let mut inputs = vec![args.input.as_path()];
    inputs.extend(args.selfspeech.as_deref());
    inputs.extend(args.models.weights_dir.as_deref());
    let manifest_path = sidecar(&args.out);
    ctx.finish("run", &manifest_path, (&args, &config), &inputs, &outputs)
}

#[derive(Debug, Args, Serialize)]
pub struct BenchArgs {
    /// Seconds of noise fed to each model per repeat.
    #[arg(long, default_value_t = 10.0)]
    duration: f64,
    /// Repeats per stage.
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    /// Per-repeat CSV: stage, chunk_index, wall_us, peak_rss_bytes.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Empirical CDF of unit times per stage.
    #[arg(long)]
    cdf: Option<PathBuf>,
    #[command(flatten)]
    models: ModelArgs,
}

pub fn bench(args: BenchArgs, mut ctx: Context) -> anyhow::Result<()> {
    if !(args.duration > 0.0) || args.repeats == 0 {
        return Err(usage("--duration must be positive and --repeats at least 1"));
    }
    let config = args.models.config(ClockMode::Real, true)?;
    let models = args.models.load(&mut ctx)?;
    let seed = ctx.seed("bench", 0);
    let report = bench_models(&models, &config, args.duration, args.repeats, seed)?;
    println!("{:<11} {:>6} {:>11} {:>11} {:>12}", "stage", "units", "mean_us", "p95_us", "peak_rss_mb");
    for stage in [Stage::Fast, Stage::Slow, Stage::Beamformer] {
        let s = report.summary(stage);
        if s.units == 0 {
            continue;
        }
        println!(
            "{:<11} {:>6} {:>11.1} {:>11.1} {:>12.1}",
            stage.name(),
            s.units,
            s.mean_us,
            s.p95_us,
            s.peak_rss_bytes as f64 / 1048576.0
        );
    }
    println!("rtf (fast chunk / tau): {:.3}", report.rtf());
    let mut outputs = Vec::new();
    if let Some(path) = &args.report {
        std::fs::write(path, report.to_csv()).with_context(|| format!("writing {}", path.display()))?;
        outputs.push(path.as_path());
    }
    if let Some(path) = &args.cdf {
        std::fs::write(path, report.cdf_table()).with_context(|| format!("writing {}", path.display()))?;
        outputs.push(path.as_path());
    }
    let manifest_path = match outputs.first() {
        Some(p) => sidecar(p),
        None => PathBuf::from(RUN_MANIFEST),
    };
    let inputs: Vec<&Path> = args.models.weights_dir.as_deref().into_iter().collect();
    ctx.finish("bench", &manifest_path, &args, &inputs, &outputs)
}

#[derive(Debug, Args, Serialize)]
pub struct InitArgs {
    /// Directory for fast.egsw, slow.egsw, beamformer.egsw and manifests.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct ParameterCounts {
    fast: usize,
    slow: usize,
    beamformer: usize,
}

pub fn init_weights(args: InitArgs, mut ctx: Context) -> anyhow::Result<()> {
    for stage in WEIGHT_STAGES {
        ctx.seed(stage, 0);
    }
    let models = PipelineModels::random(ctx.seeds.root)?;
    models.save_dir(&args.out).with_context(|| format!("writing {}", args.out.display()))?;
    let bf = models.beamformer.as_ref().expect("random models include the beamformer");
    let counts = ParameterCounts {
        fast: count_parameters(models.fast.manifest())?,
        slow: count_parameters(models.slow.manifest())?,
        beamformer: count_parameters(bf.manifest())?,
    };
    println!(
        "parameters: fast {}, slow {}, beamformer {}",
        counts.fast, counts.slow, counts.beamformer
    );
    write_json(&args.out.join("parameters.json"), &counts)?;
    ctx.finish("init-weights", &args.out.join(RUN_MANIFEST), &args, &[], &[args.out.as_path()])
}
