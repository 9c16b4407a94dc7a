use anyhow::Context as _;
use egoconv::seed::SeedPlan;
use egoconv::synth::PACKAGE_MANIFEST;
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const RUN_MANIFEST: &str = "run_manifest.json";

/// Per-invocation state: seeds handed out so far and the start time.
pub struct Context {
    pub seeds: SeedPlan,
    argv: Vec<String>,
    started: Instant,
}

/// What one command did, written next to its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub seed: u64,
    pub stage_seeds: std::collections::BTreeMap<String, u64>,
    pub config: serde_json::Value,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub version: String,
    pub wall_time_s: f64,
}

impl Context {
    pub fn new(seed: u64, argv: &[String]) -> Self {
        Self {
            seeds: SeedPlan::new(seed),
            argv: argv.to_vec(),
            started: Instant::now(),
        }
    }

    pub fn seed(&mut self, stage: &str, index: u64) -> u64 {
        self.seeds.seed(stage, index)
    }

    /// Writes the run manifest to `path`.
    pub fn finish(
        self,
        command: &str,
        path: &Path,
        config: impl Serialize,
        inputs: &[&Path],
        outputs: &[&Path],
    ) -> anyhow::Result<()> {
        let shown = |p: &&Path| p.display().to_string();
        let m = RunManifest {
            command: command.into(),
            args: self.argv.iter().skip(1).cloned().collect(),
            seed: self.seeds.root,
            stage_seeds: self.seeds.stages,
            config: serde_json::to_value(config)?,
            inputs: inputs.iter().map(shown).collect(),
            outputs: outputs.iter().map(shown).collect(),
            version: env!("CARGO_PKG_VERSION").into(),
            wall_time_s: self.started.elapsed().as_secs_f64(),
        };
        write_json(path, &m)
    }
}

pub fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Sidecar manifest for a single output file: `out.wav` -> `out.wav.run.json`.
pub fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".run.json");
    PathBuf::from(s)
}

/// Package manifests named by `input`: a manifest file, a package
/// directory, or a directory of package directories (sorted).
pub fn package_manifests(input: &Path) -> anyhow::Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    if input.join(PACKAGE_MANIFEST).is_file() {
        return Ok(vec![input.join(PACKAGE_MANIFEST)]);
    }
    let entries = std::fs::read_dir(input).with_context(|| format!("reading {}", input.display()))?;
    let mut found: Vec<PathBuf> = entries
        .filter_map(Result::ok)
        .map(|e| e.path().join(PACKAGE_MANIFEST))
        .filter(|p| p.is_file())
        .collect();
    found.sort();
    if found.is_empty() {
        anyhow::bail!("no {PACKAGE_MANIFEST} under {}", input.display());
    }
    Ok(found)
}
