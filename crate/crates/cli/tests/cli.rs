use std::process::Command;

use detlab_cli::config::{parse_fraction, DatasetSpec, ExperimentConfig, SplitRecipe, StageConfig};
use detlab_cli::presets::{table_config, trend_matrix};
use detlab_cli::report::render_record;
use detlab_cli::runner::{eval_stage, load_run_record, run_config, run_matrix, run_single_stage};
use detlab_core::error::Error;

fn tiny_dataset() -> DatasetSpec {
    DatasetSpec {
        kind: "shapes".into(),
        root: None,
        train_split: None,
        val_split: None,
        train_images: 16,
        val_images: 6,
        image_size: 64,
        shapes_min: 1,
        shapes_max: 2,
        seed: 41,
    }
}

fn tiny_config(name: &str) -> ExperimentConfig {
    let mut teacher = StageConfig::new("teacher-half", "teacher", "prefix-1of2", 1);
    teacher.batch_size = 4;
    let mut student = StageConfig::new("self-full", "self", "full", 1);
    student.batch_size = 4;
    student.teacher = Some("teacher-half".into());
    student.label = Some("Self-trained (full)".into());
    ExperimentConfig {
        name: name.into(),
        seed: 5,
        scale: "desk".into(),
        output_dir: None,
        dataset: tiny_dataset(),
        splits: SplitRecipe {
            fractions: vec!["1/2".into()],
            complements: false,
            det_fraction: None,
        },
        stages: vec![teacher, student],
    }
}

#[test]
fn config_round_trips_through_toml() {
    let cfg = tiny_config("round-trip");
    let text = cfg.to_toml().unwrap();
    let back = ExperimentConfig::from_toml(&text).unwrap();
    assert_eq!(cfg, back);
    assert_eq!(cfg.hash().unwrap(), back.hash().unwrap());
}

#[test]
fn invalid_op_error_names_the_field() {
    let mut cfg = tiny_config("bad-op");
    cfg.stages[0].op = "warp".into();
    let err = cfg.validate().unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("op"), "missing field name: {msg}");
    assert!(msg.contains("warp"), "missing offending value: {msg}");
    assert_eq!(detlab_cli::exit_code(&err), 2);
}

#[test]
fn stage_references_must_point_backwards() {
    let mut cfg = tiny_config("fwd-ref");
    cfg.stages[0].op = "self".into();
    cfg.stages[0].teacher = Some("self-full".into());
    let msg = cfg.validate().unwrap_err().to_string();
    assert!(msg.contains("earlier stage"), "{msg}");
}

#[test]
fn fractions_reject_malformed_text() {
    for bad in ["x", "3", "1/0", "one/two"] {
        assert!(parse_fraction(bad).is_err(), "{bad} should not parse");
    }
    assert_eq!(parse_fraction(" 1/2 ").unwrap(), parse_fraction("2/4").unwrap());
}

#[test]
fn table_presets_validate_and_carry_the_paper_rows() {
    for n in 1..=5 {
        let cfg = table_config(n, 7).unwrap();
        cfg.validate().unwrap();
    }
    assert!(table_config(0, 7).is_err());
    assert!(table_config(6, 7).is_err());

    let labels = |n| -> Vec<String> {
        table_config(n, 7)
            .unwrap()
            .stages
            .iter()
            .map(|s| s.label().to_string())
            .collect()
    };
    let t1 = labels(1);
    assert!(t1.iter().any(|l| l.starts_with("Supervised")));
    assert!(t1.iter().any(|l| l.starts_with("Self-trained")));
    let t5 = labels(5);
    for want in ["Supervised", "Self-trained", "Multitask", "Multitask+selftrain(+PDF)"] {
        assert!(t5.iter().any(|l| l == want), "table 5 missing row {want}");
    }
}

#[test]
fn trend_matrix_uses_three_distinct_seeds() {
    let configs = trend_matrix();
    assert_eq!(configs.len(), 3);
    let mut seeds: Vec<u64> = configs.iter().map(|c| c.seed).collect();
    seeds.dedup();
    assert_eq!(seeds.len(), 3);
    for cfg in &configs {
        cfg.validate().unwrap();
    }
}

#[test]
fn run_config_resumes_without_retraining() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config("resume");
    let first = run_config(&cfg, dir.path()).unwrap();
    assert_eq!(first.stages.len(), 2);
    let ckpt = dir.path().join("teacher-half/checkpoint.ckpt");
    let stamp = std::fs::metadata(&ckpt).unwrap().modified().unwrap();

    let second = run_config(&cfg, dir.path()).unwrap();
    assert_eq!(std::fs::metadata(&ckpt).unwrap().modified().unwrap(), stamp);
    for (a, b) in first.stages.iter().zip(&second.stages) {
        assert_eq!(a.val_map, b.val_map);
        assert_eq!(a.report, b.report);
    }

    let record = load_run_record(dir.path()).unwrap();
    assert_eq!(record.config_hash, cfg.hash().unwrap());
    let rendered = render_record(&record);
    assert!(rendered.contains("Self-trained (full)"), "{rendered}");

    let (map, report, _) = eval_stage(&cfg, dir.path(), "teacher-half").unwrap();
    assert_eq!(map, record.stages[0].val_map);
    assert_eq!(report, record.stages[0].report);
}

#[test]
fn changing_the_config_invalidates_finished_stages() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config("invalidate");
    run_config(&cfg, dir.path()).unwrap();
    let ckpt = dir.path().join("teacher-half/checkpoint.ckpt");
    let stamp = std::fs::metadata(&ckpt).unwrap().modified().unwrap();

    cfg.stages[0].lr *= 0.5;
    run_config(&cfg, dir.path()).unwrap();
    assert_ne!(std::fs::metadata(&ckpt).unwrap().modified().unwrap(), stamp);
}

#[test]
fn matrix_isolates_a_failing_config() {
    let dir = tempfile::tempdir().unwrap();
    let good = tiny_config("good");
    let mut bad = tiny_config("bad");
    bad.dataset.kind = "voc".into();
    bad.dataset.root = Some("/nonexistent-voc-root".into());
    let entries = run_matrix(&[bad, good], dir.path()).unwrap();
    assert!(entries[0].outcome.is_err());
    assert!(entries[1].outcome.is_ok());
}

#[test]
fn single_stage_needs_its_dependencies_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config("dangling");
    let err = match run_single_stage(&cfg, dir.path(), "self-full") {
        Err(e) => e,
        Ok(_) => panic!("self stage ran without its teacher"),
    };
    assert!(matches!(err, Error::Data(_)), "{err}");
    assert_eq!(detlab_cli::exit_code(&err), 1);
}

// ---------------------------------------------------------------------------
// binary-level contract

fn detlab() -> Command {
    Command::new(env!("CARGO_BIN_EXE_detlab"))
}

#[test]
fn unknown_flag_exits_2() {
    let out = detlab().arg("--bogus").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_subcommand_exits_2() {
    let out = detlab().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_table_number_exits_2_and_names_the_field() {
    let out = detlab().args(["reproduce", "--table", "9"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("table"), "{msg}");
}

#[test]
fn invalid_config_value_exits_2_and_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    let cfg = tiny_config("bad-op").to_toml().unwrap().replace(
        "op = \"teacher\"",
        "op = \"warp\"",
    );
    std::fs::write(&path, cfg).unwrap();
    let out = detlab()
        .args(["train", "--config"])
        .arg(&path)
        .args(["--stage", "teacher-half"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("op") && msg.contains("warp"), "{msg}");
}

#[test]
fn split_subcommand_writes_nested_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("splits");
    let out = detlab()
        .args(["split", "--fractions", "1/2,1/4,1/8", "--count", "64", "--seed", "3", "--out"])
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    for name in ["prefix-1of2", "prefix-1of4", "prefix-1of8"] {
        let m = detlab_core::split::load_manifest(&out_dir.join(format!("{name}.split"))).unwrap();
        assert_eq!(m.name, name);
    }
    let half = detlab_core::split::load_manifest(&out_dir.join("prefix-1of2.split")).unwrap();
    let quarter = detlab_core::split::load_manifest(&out_dir.join("prefix-1of4.split")).unwrap();
    assert_eq!(half.len(), 32);
    assert_eq!(quarter.len(), 16);
    quarter.verify_parent(&half).unwrap();
}

#[test]
fn split_requires_an_id_source() {
    let out = detlab()
        .args(["split", "--fractions", "1/2"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
