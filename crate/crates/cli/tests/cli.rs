use serde_json::Value;
use std::path::Path;
use std::process::{Command, Output};

fn egoconv(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_egoconv"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> Output {
    let out = egoconv(args, cwd);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn synth_2spk(cwd: &Path, out: &str) {
    ok(&["synth", "--policy", "2spk", "--n", "1", "--seed", "1", "--out", out], cwd);
}

#[test]
fn synth_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth_2spk(d, "a");
    synth_2spk(d, "b");
    let pkg = |root: &str| d.join(root).join("sample_0000");
    assert_eq!(
        std::fs::read(pkg("a").join("manifest.json")).unwrap(),
        std::fs::read(pkg("b").join("manifest.json")).unwrap()
    );
    let mut wavs = 0;
    for entry in walk(&pkg("a")) {
        if entry.extension().is_some_and(|e| e == "wav") {
            let rel = entry.strip_prefix(pkg("a")).unwrap();
            assert_eq!(std::fs::read(&entry).unwrap(), std::fs::read(pkg("b").join(rel)).unwrap(), "{rel:?}");
            wavs += 1;
        }
    }
    assert!(wavs >= 4, "only {wavs} WAVs");

    // run manifests agree on everything but the wall time and output root
    let strip = |root: &str| {
        let mut v = json(&d.join(root).join("run_manifest.json"));
        let m = v.as_object_mut().unwrap();
        assert!(m["wall_time_s"].as_f64().unwrap() >= 0.0);
        for k in ["wall_time_s", "args", "outputs", "config"] {
            m.remove(k);
        }
        v
    };
    assert_eq!(strip("a"), strip("b"));
    let v = json(&d.join("a").join("run_manifest.json"));
    assert_eq!(v["seed"], 1);
    assert!(v["stage_seeds"]["synth/timeline/0"].is_u64());

    // another seed, another conversation
    ok(&["synth", "--policy", "2spk", "--seed", "2", "--out", "c"], d);
    assert_ne!(
        std::fs::read(pkg("a").join("mixture.wav")).unwrap(),
        std::fs::read(pkg("c").join("mixture.wav")).unwrap()
    );
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(egoconv(&["--help"], d).status.code(), Some(0));
    assert_eq!(egoconv(&["--version"], d).status.code(), Some(0));

    let typo = egoconv(&["synth", "--polcy", "2spk", "--out", "x"], d);
    assert_eq!(typo.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&typo.stderr).contains("--policy"), "no suggestion offered");
    assert_eq!(egoconv(&["synth", "--policy", "7spk", "--out", "x"], d).status.code(), Some(1));
    assert_eq!(egoconv(&["synth", "--policy", "2spk", "--snr", "15", "--out", "x"], d).status.code(), Some(1));
    assert_eq!(egoconv(&["synth", "--policy", "passthrough", "--out", "x"], d).status.code(), Some(1));
    assert_eq!(egoconv(&["run", "--input", "x.wav", "--out", "y.wav", "--T", "0.013"], d).status.code(), Some(1));
    assert_eq!(egoconv(&["frobnicate"], d).status.code(), Some(1));

    // well-formed invocations on bad data
    assert_eq!(egoconv(&["run", "--input", "missing.wav", "--out", "y.wav"], d).status.code(), Some(2));
    std::fs::write(d.join("junk.wav"), b"not a wav").unwrap();
    assert_eq!(
        egoconv(&["run", "--input", "junk.wav", "--out", "y.wav", "--selfspeech", "junk.wav"], d).status.code(),
        Some(2)
    );
    assert_eq!(egoconv(&["eval", "--out", "junk.wav", "--manifest", "nope.json", "--report", "r.json"], d).status.code(), Some(2));
    std::fs::write(d.join("ts.jsonl"), "{\"speaker\":\"a\",\"start\":3,\"end\":1}\n").unwrap();
    assert_eq!(
        egoconv(&["synth", "--policy", "2spk", "--timestamps", "ts.jsonl", "--out", "x"], d).status.code(),
        Some(2)
    );
}

#[test]
fn every_subcommand_documents_its_flags() {
    let dir = tempfile::tempdir().unwrap();
    for (cmd, flags) in [
        ("synth", &["--policy", "--n", "--out", "--timestamps", "--clips", "--snr", "--silence-sd", "--noise"][..]),
        ("spatialize", &["--in", "--out"][..]),
        ("run", &["--input", "--out", "--report", "--weights-dir", "--T", "--selfspeech"][..]),
        ("eval", &["--out", "--manifest", "--report"][..]),
        ("stats", &["--manifest", "--timestamps", "--report"][..]),
        ("bench", &["--duration", "--repeats", "--report", "--cdf"][..]),
        ("init-weights", &["--out"][..]),
    ] {
        let out = ok(&[cmd, "--help"], dir.path());
        let text = String::from_utf8_lossy(&out.stdout);
        assert!(text.contains("--seed"), "{cmd} help lacks --seed");
        for f in flags {
            let line = text.lines().find(|l| l.trim_start().starts_with(&format!("{f} ")) || l.contains(&format!("{f} <")));
            let line = line.unwrap_or_else(|| panic!("{cmd} help lacks {f}"));
            assert!(line.trim().len() > f.len() + 12, "{cmd} {f} undocumented: {line:?}");
        }
    }
}

#[test]
fn eval_of_the_clean_target_is_all_accurate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth_2spk(d, "s");
    let m = "s/sample_0000/manifest.json";
    let target = format!("s/sample_0000/{}", json(&d.join(m))["target_sum"].as_str().unwrap());
    ok(&["eval", "--out", &target, "--manifest", m, "--report", "r.json"], d);
    let r = json(&d.join("r.json"));
    assert!(r["n_turns"].as_u64().unwrap() > 0);
    assert_eq!(r["acc"], 1.0);
    assert_eq!(r["cr"], 0.0);
    assert_eq!(r["sisdr_out"], 60.0);
    assert_eq!(r["delta_pesq"], "external: not computed");
    assert!(r["turn_stats"]["turn_change_freq"].as_f64().unwrap() > 0.0);
    assert!(d.join("r.json.run.json").is_file());

    // the unprocessed mixture improves on nothing
    let mix = "s/sample_0000/mixture.wav";
    ok(&["eval", "--out", mix, "--manifest", m, "--report", "m.json"], d);
    assert_eq!(json(&d.join("m.json"))["sisdri"], 0.0);
}

#[test]
fn stats_over_packages_and_timestamps() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("ts.jsonl"),
        "{\"conversation\":\"x\",\"speaker\":\"a\",\"start\":0,\"end\":2}\n\
         {\"conversation\":\"x\",\"speaker\":\"b\",\"start\":2.5,\"end\":4}\n\
         {\"conversation\":\"x\",\"speaker\":\"a\",\"start\":3.5,\"end\":6}\n",
    )
    .unwrap();
    ok(&["stats", "--timestamps", "ts.jsonl", "--report", "t.json"], d);
    let r = json(&d.join("t.json"));
    let fto = &r["conversations"][0][1]["fto"];
    assert_eq!(fto.as_array().unwrap().len(), 2);
    assert!((fto[0].as_f64().unwrap() - 0.5).abs() < 1e-12);
    assert!((fto[1].as_f64().unwrap() + 0.5).abs() < 1e-12);
    assert!((r["conversations"][0][1]["turn_change_freq"].as_f64().unwrap() - 20.0).abs() < 1e-9);

    synth_2spk(d, "s");
    ok(&["stats", "--manifest", "s", "--report", "p.json"], d);
    assert_eq!(json(&d.join("p.json"))["conversations"].as_array().unwrap().len(), 1);
    assert_eq!(egoconv(&["stats", "--report", "q.json"], d).status.code(), Some(1));
}

#[test]
fn init_weights_reports_parameter_counts_and_reloads() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = ok(&["init-weights", "--seed", "4", "--out", "w"], d);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("fast 449314") && text.contains("slow 987854") && text.contains("beamformer 173988"), "{text}");
    for f in ["fast.egsw", "slow.egsw", "beamformer.egsw", "run_manifest.json"] {
        assert!(d.join("w").join(f).is_file(), "{f}");
    }
    let b = ok(&["bench", "--weights-dir", "w", "--duration", "1", "--repeats", "1", "--report", "b.csv", "--cdf", "c.csv"], d);
    assert!(String::from_utf8_lossy(&b.stdout).contains("rtf"));
    let csv = std::fs::read_to_string(d.join("b.csv")).unwrap();
    assert!(csv.starts_with("stage,chunk_index,wall_us,peak_rss_bytes"));
    assert_eq!(std::fs::read_to_string(d.join("c.csv")).unwrap().lines().count(), 21);
}

#[test]
fn spatialize_records_its_scene() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["synth", "--policy", "3spk", "--n", "2", "--seed", "5", "--out", "s"], d);
    ok(&["spatialize", "--in", "s", "--seed", "5", "--out", "a"], d);
    ok(&["spatialize", "--in", "s", "--seed", "5", "--out", "b"], d);
    for sample in ["sample_0000", "sample_0001"] {
        let m = json(&d.join("a").join(sample).join("manifest.json"));
        assert_eq!(m["channels"], 2);
        assert_eq!(m["extra"]["scene"]["speakers"].as_array().unwrap().len(), 4);
        assert!(m["dry_target_sum"].is_string());
        assert_eq!(
            std::fs::read(d.join("a").join(sample).join("mixture.wav")).unwrap(),
            std::fs::read(d.join("b").join(sample).join("mixture.wav")).unwrap()
        );
    }
    // already binaural
    let again = egoconv(&["spatialize", "--in", "a/sample_0000", "--out", "c"], d);
    assert_eq!(again.status.code(), Some(2));
}
