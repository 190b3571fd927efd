use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use crackedge::harness::{synth_image, SynthConfig};
use crackedge::model_io::write_image;
use crackedge::Label;

fn crackedge(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crackedge"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn find(dir: &Path, suffix: &str) -> PathBuf {
    let mut hits: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.to_string_lossy().ends_with(suffix))
        .collect();
    hits.sort();
    assert_eq!(hits.len(), 1, "expected one *{suffix} in {}: {hits:?}", dir.display());
    hits.remove(0)
}

#[test]
fn check_flags_the_softmax_head_until_stripped() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    assert!(crackedge(out, &["reference"]).status.success());
    let graph = find(out, ".json");

    let check = crackedge(out, &["check", "--graph", graph.to_str().unwrap()]);
    assert_eq!(check.status.code(), Some(1), "{}", stdout(&check));
    assert!(stdout(&check).contains("1 violation"), "{}", stdout(&check));

    let strip = crackedge(out, &["strip", "--graph", graph.to_str().unwrap()]);
    assert!(strip.status.success(), "{}", String::from_utf8_lossy(&strip.stderr));
    let stripped = find(out, "_stripped.json");
    let recheck = crackedge(out, &["check", "--graph", stripped.to_str().unwrap()]);
    assert_eq!(recheck.status.code(), Some(0), "{}", stdout(&recheck));
    assert!(stdout(&recheck).contains("0 violation"), "{}", stdout(&recheck));
}

#[test]
fn pipeline_writes_archive_and_report_then_runs_it() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let report = out.join("report.json");
    let o = crackedge(out, &["--report", report.to_str().unwrap(), "pipeline", "--n-per-class", "10"]);
    assert!(o.status.success(), "{}\n{}", stdout(&o), String::from_utf8_lossy(&o.stderr));

    let enef = find(out, ".enef");
    assert_eq!(&fs::read(&enef).unwrap()[..4], b"ENEF");
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let total: u64 = ["tp", "fp", "fn", "tn"].iter().map(|k| json[k].as_u64().unwrap()).sum();
    assert_eq!(total, 20);
    assert!(json["latency"]["mean_ms"].as_f64().unwrap() > 0.0);

    let cfg = SynthConfig::default();
    for (label, name) in [(Label::Positive, "Positive"), (Label::Negative, "Negative")] {
        let img = out.join(format!("{name}.ppm"));
        write_image(&synth_image(&cfg, 3, label), &img).unwrap();
        let run = crackedge(out, &["run", "--enef", enef.to_str().unwrap(), img.to_str().unwrap()]);
        assert!(run.status.success());
        let text = stdout(&run);
        assert!(text.contains(&format!("label: {name}")), "{text}");
        assert!(text.contains("p(positive) ="), "{text}");
    }
}

#[test]
fn errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let missing = crackedge(out, &["run", out.join("nope.ppm").to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("error:"));

    let junk = out.join("junk.enef");
    fs::write(&junk, b"not an archive").unwrap();
    let img = out.join("x.ppm");
    write_image(&synth_image(&SynthConfig::default(), 0, Label::Negative), &img).unwrap();
    let bad = crackedge(out, &["run", "--enef", junk.to_str().unwrap(), img.to_str().unwrap()]);
    assert_eq!(bad.status.code(), Some(2));
}
