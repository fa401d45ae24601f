use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use georewrite_cli::artifacts::sha256_file;
use georewrite_cli::config::ExperimentConfig;
use georewrite_cli::pipeline::{Drop, Layout, Pipeline, StageId};
use georewrite_core::Error;

fn small_config() -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/small.toml");
    ExperimentConfig::load(&path).unwrap()
}

fn pipeline(cfg: ExperimentConfig, dir: &Path, strict: bool) -> Pipeline {
    Pipeline::new(cfg, Layout::new(dir), strict).unwrap()
}

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_georewrite"));
    c.env("RUST_LOG", "warn");
    c
}

fn error_category(stderr: &[u8]) -> String {
    let line = String::from_utf8_lossy(stderr);
    let last = line.lines().last().unwrap_or_default();
    let v: serde_json::Value =
        serde_json::from_str(last).unwrap_or_else(|_| panic!("not JSON: {line}"));
    v["error"]["category"].as_str().unwrap().to_string()
}

#[test]
fn cache_hits_and_dependency_driven_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let first = pipeline(small_config(), dir.path(), false).run().unwrap();
    assert_eq!(first.ran().len(), 7);
    let report = fs::read(dir.path().join("report/metrics.csv")).unwrap();

    let again = pipeline(small_config(), dir.path(), false).run().unwrap();
    assert!(again.ran().is_empty(), "{:?}", again.stages);
    assert_eq!(again.report, first.report);
    assert_eq!(
        fs::read(dir.path().join("report/metrics.csv")).unwrap(),
        report
    );

    let mut eval_only = small_config();
    eval_only.eval.correlation_pairs = 150;
    assert_eq!(
        pipeline(eval_only, dir.path(), false).run().unwrap().ran(),
        vec!["eval"]
    );

    let upstream: Vec<String> = ["world.json", "index.bin", "encoder.ckpt"]
        .iter()
        .map(|f| sha256_file(&dir.path().join(f)).unwrap())
        .collect();
    fs::remove_file(dir.path().join("policy.ckpt")).unwrap();
    let rerun = pipeline(small_config(), dir.path(), false).run().unwrap();
    assert_eq!(rerun.ran(), vec!["sft", "align", "eval"]);
    assert_eq!(rerun.report, first.report);
    // Downstream stages never touch upstream artifacts.
    for (f, sum) in ["world.json", "index.bin", "encoder.ckpt"]
        .iter()
        .zip(&upstream)
    {
        assert_eq!(&sha256_file(&dir.path().join(f)).unwrap(), sum);
    }

    // A tampered artifact is rebuilt too.
    fs::write(dir.path().join("aligned.ckpt"), b"junk").unwrap();
    assert_eq!(
        pipeline(small_config(), dir.path(), false)
            .run()
            .unwrap()
            .ran(),
        vec!["align", "eval"]
    );
}

#[test]
fn strict_mode_refuses_stale_artifacts_with_a_diff() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(small_config(), dir.path(), false).run().unwrap();
    let mut changed = small_config();
    changed.sft.lr = 5e-3;
    match pipeline(changed.clone(), dir.path(), true).run() {
        Err(Error::HashMismatch { stage, diff }) => {
            assert_eq!(stage, "sft");
            assert!(diff.contains("sft.lr"), "{diff}");
        }
        other => panic!("expected a hash mismatch, got {other:?}"),
    }
    // Running a single stage against a stale upstream is refused as well.
    match pipeline(changed, dir.path(), false).run_stage(StageId::Align) {
        Err(Error::HashMismatch { stage, .. }) => assert_eq!(stage, "sft"),
        other => panic!("expected a hash mismatch, got {other:?}"),
    }
}

#[test]
fn single_stages_need_their_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let p = pipeline(small_config(), dir.path(), false);
    assert!(matches!(
        p.run_stage(StageId::Data),
        Err(Error::InvalidArgument(_))
    ));
    p.run_stage(StageId::World).unwrap();
    p.run_stage(StageId::Data).unwrap();
    assert!(matches!(
        p.run_stage(StageId::Sft),
        Err(Error::InvalidArgument(_))
    ));
}

#[test]
fn ablation_variants_follow_their_definitions() {
    let dir = tempfile::tempdir().unwrap();
    let p = pipeline(small_config(), dir.path(), false);
    assert!(p.ablate(&[Drop::Oa]).is_err(), "needs base artifacts");
    p.run().unwrap();
    let (rows, log) = p.ablate(&[Drop::Rag, Drop::Oa, Drop::Sft]).unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r.metrics.variant.as_str()).collect();
    assert_eq!(names, ["full", "w/o SFT", "w/o OA", "w/o RAG"]);
    let sft_sum = sha256_file(&dir.path().join("policy.ckpt")).unwrap();
    assert_eq!(rows[2].policy_checksum, sft_sum);
    assert_eq!(
        rows[0].policy_checksum,
        sha256_file(&dir.path().join("aligned.ckpt")).unwrap()
    );
    assert_eq!(rows[3].related_per_rewriting_prompt, 0.0);
    assert!(rows[0].related_per_rewriting_prompt > 0.0);
    assert!(log
        .iter()
        .all(|(_, o)| *o == georewrite_cli::pipeline::Outcome::Ran));
    let table = fs::read_to_string(dir.path().join("ablate/metrics.csv")).unwrap();
    assert_eq!(table.lines().count(), 5);
    let (_, again) = p.ablate(&[Drop::Rag, Drop::Oa, Drop::Sft]).unwrap();
    assert!(again
        .iter()
        .all(|(_, o)| *o == georewrite_cli::pipeline::Outcome::Cached));
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("cfg.toml");
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn binary_reports_machine_readable_errors() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), "schema_version = 1\nseed = 1\nmystery = 3\n");
    let out = bin()
        .args(["data-gen", "--config"])
        .arg(&bad)
        .arg("--workdir")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_category(&out.stderr), "config");

    let out = bin().args(["run", "--no-such-flag"]).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_category(&out.stderr), "invalid-argument");

    let out = bin()
        .args(["eval", "--world", "/nonexistent/world.json"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(5));
    assert_eq!(error_category(&out.stderr), "io");
}

#[test]
fn binary_world_gen_score_and_explicit_eval() {
    let dir = tempfile::tempdir().unwrap();
    let small = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/small.toml");
    let world = dir.path().join("w.json");
    let out = bin()
        .args(["world-gen", "--seed", "3", "--config"])
        .arg(&small)
        .arg("--out")
        .arg(&world)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(dir.path().join("w.meta.json").exists());

    let w = georewrite_core::world::World::load(&world).unwrap();
    let r = &w.records[5];
    let out = bin()
        .args(["score", "--world"])
        .arg(&world)
        .args(["--input", &r.canonical_text, "--rewrite", &r.canonical_text])
        .args(["--coord", &format!("{},{}", r.coordinate.x, r.coordinate.y)])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let b: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(b["geo"], 1.0);
    assert_eq!(b["seman"], 1.0);

    let work = dir.path().join("work");
    let run = bin()
        .args(["run", "--config"])
        .arg(&small)
        .arg("--workdir")
        .arg(&work)
        .output()
        .unwrap();
    assert!(
        run.status.success(),
        "{}",
        String::from_utf8_lossy(&run.stderr)
    );
    let report = dir.path().join("sft-report");
    let out = bin()
        .args(["eval", "--config"])
        .arg(&small)
        .arg("--workdir")
        .arg(&work)
        .arg("--policy")
        .arg(work.join("policy.ckpt"))
        .arg("--out")
        .arg(&report)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(report.join("metrics.csv").exists());
    // The same artifacts checked against another config are refused.
    let other = write_config(dir.path(), "schema_version = 1\nseed = 12\n");
    let out = bin()
        .args(["eval", "--config"])
        .arg(&other)
        .arg("--workdir")
        .arg(&work)
        .arg("--out")
        .arg(&report)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(6));
    assert_eq!(error_category(&out.stderr), "hash-mismatch");
}
