//! Prebuilt experiment configs: the toy-scale table matrices behind
//! `reproduce`, and the smaller trend suite used to check that the headline
//! comparisons point the right way.

use detlab_core::error::{Error, Result};

use crate::config::{DatasetSpec, ExperimentConfig, SplitRecipe, StageConfig};

/// Pinned dataset for `reproduce --scale toy`.
pub fn toy_dataset() -> DatasetSpec {
    DatasetSpec {
        kind: "shapes".into(),
        root: None,
        train_split: None,
        val_split: None,
        train_images: 2000,
        val_images: 400,
        image_size: 128,
        shapes_min: 1,
        shapes_max: 3,
        seed: 90125,
    }
}

/// Smaller pool for the trend suite; sized so all comparisons fit in one
/// unattended session.
pub fn trend_dataset() -> DatasetSpec {
    DatasetSpec {
        kind: "shapes".into(),
        root: None,
        train_split: None,
        val_split: None,
        train_images: 480,
        val_images: 120,
        image_size: 96,
        shapes_min: 1,
        shapes_max: 3,
        seed: 1301,
    }
}

const TOY_EPOCHS: usize = 4;
const TOY_BATCH: usize = 8;
const TOY_LR: f64 = 0.004;

const TREND_EPOCHS: usize = 10;
const TREND_BATCH: usize = 8;
const TREND_LR: f64 = 0.004;

pub const TREND_SEEDS: [u64; 3] = [31, 32, 33];

fn toy_stage(name: &str, label: &str, op: &str, train: &str) -> StageConfig {
    let mut s = StageConfig::new(name, op, train, TOY_EPOCHS);
    s.label = Some(label.into());
    s.batch_size = TOY_BATCH;
    s.lr = TOY_LR;
    s
}

fn with_teacher(mut s: StageConfig, teacher: &str) -> StageConfig {
    s.teacher = Some(teacher.into());
    s
}

fn with_kd(mut s: StageConfig, kd: &str) -> StageConfig {
    s.kd = kd.into();
    s
}

fn with_seg(mut s: StageConfig, seg: &str) -> StageConfig {
    s.seg = Some(seg.into());
    s
}

fn table_skeleton(name: String, seed: u64, fractions: &[&str], complements: bool) -> ExperimentConfig {
    ExperimentConfig {
        name,
        seed,
        scale: "desk".into(),
        output_dir: None,
        dataset: toy_dataset(),
        splits: SplitRecipe {
            fractions: fractions.iter().map(|s| s.to_string()).collect(),
            complements,
            det_fraction: None,
        },
        stages: Vec::new(),
    }
}

/// Toy-scale matrix for one paper table; `table` must be in 1..=5.
pub fn table_config(table: u8, seed: u64) -> Result<ExperimentConfig> {
    let cfg = match table {
        1 => {
            let mut cfg = table_skeleton(format!("table1-seed{seed}"), seed, &["1/2"], false);
            cfg.stages = vec![
                toy_stage("teacher-half", "Teacher (1/2)", "teacher", "prefix-1of2"),
                toy_stage("sup-half", "Supervised (1/2)", "supervised", "prefix-1of2"),
                with_teacher(
                    toy_stage("self-full", "Self-trained (full)", "self", "full"),
                    "teacher-half",
                ),
            ];
            cfg
        }
        2 => {
            let mut cfg = table_skeleton(
                format!("table2-seed{seed}"),
                seed,
                &["1/2", "1/4", "1/8"],
                false,
            );
            for (frac, short) in [("1/2", "half"), ("1/4", "quarter"), ("1/8", "eighth")] {
                let split = format!("prefix-1of{}", &frac[2..]);
                cfg.stages.push(toy_stage(
                    &format!("teacher-{short}"),
                    &format!("Teacher ({frac})"),
                    "teacher",
                    &split,
                ));
                cfg.stages.push(toy_stage(
                    &format!("sup-{short}"),
                    &format!("Supervised ({frac})"),
                    "supervised",
                    &split,
                ));
                cfg.stages.push(with_teacher(
                    toy_stage(
                        &format!("self-t-{short}"),
                        &format!("Self-trained (full, teacher {frac})"),
                        "self",
                        "full",
                    ),
                    &format!("teacher-{short}"),
                ));
            }
            cfg
        }
        3 => {
            let mut cfg = table_skeleton(
                format!("table3-seed{seed}"),
                seed,
                &["1/2", "1/4", "1/8"],
                true,
            );
            for (frac, short) in [("1/2", "half"), ("1/4", "quarter"), ("1/8", "eighth")] {
                cfg.stages.push(toy_stage(
                    &format!("teacher-{short}"),
                    &format!("Teacher ({frac})"),
                    "teacher",
                    &format!("prefix-1of{}", &frac[2..]),
                ));
            }
            cfg.stages.push(toy_stage(
                "sup-half",
                "Supervised (1/2)",
                "supervised",
                "prefix-1of2",
            ));
            for (frac, short) in [("1/2", "half"), ("1/4", "quarter"), ("1/8", "eighth")] {
                cfg.stages.push(with_teacher(
                    toy_stage(
                        &format!("self-c-{short}"),
                        &format!("Self-trained (second half, teacher {frac})"),
                        "self",
                        "prefix-1of2-complement",
                    ),
                    &format!("teacher-{short}"),
                ));
            }
            for kd in ["mse", "pdf", "defeat"] {
                cfg.stages.push(with_kd(
                    with_teacher(
                        toy_stage(
                            &format!("self-c-half-{kd}"),
                            &format!("+{} (second half, teacher 1/2)", kd_label(kd)),
                            "self",
                            "prefix-1of2-complement",
                        ),
                        "teacher-half",
                    ),
                    kd,
                ));
            }
            cfg
        }
        4 => {
            let mut cfg = table_skeleton(
                format!("table4-seed{seed}"),
                seed,
                &["1/2", "1/4"],
                true,
            );
            cfg.stages = vec![
                toy_stage(
                    "seg-teacher",
                    "Seg teacher (seg half)",
                    "segmentation",
                    "prefix-1of2-complement",
                ),
                toy_stage(
                    "sup-quarter",
                    "Supervised (det 1/4)",
                    "supervised",
                    "prefix-1of4",
                ),
                with_kd(
                    with_teacher(
                        toy_stage("crosstask-mse", "+MSE", "crosstask", "prefix-1of4"),
                        "seg-teacher",
                    ),
                    "mse",
                ),
                with_kd(
                    with_teacher(
                        toy_stage("crosstask-defeat", "+DeFeat", "crosstask", "prefix-1of4"),
                        "seg-teacher",
                    ),
                    "defeat",
                ),
            ];
            cfg
        }
        5 => {
            let mut cfg = table_skeleton(
                format!("table5-seed{seed}"),
                seed,
                &["1/2", "1/4"],
                true,
            );
            cfg.stages = vec![
                toy_stage(
                    "teacher-det",
                    "Teacher (det 1/4)",
                    "teacher",
                    "prefix-1of4",
                ),
                toy_stage("sup", "Supervised", "supervised", "prefix-1of4"),
                with_teacher(
                    toy_stage("self", "Self-trained", "self", "prefix-1of2"),
                    "teacher-det",
                ),
                with_seg(
                    toy_stage("multitask", "Multitask", "multitask", "prefix-1of4"),
                    "prefix-1of2-complement",
                ),
                with_kd(
                    with_seg(
                        with_teacher(
                            toy_stage(
                                "multitask-selftrain-pdf",
                                "Multitask+selftrain(+PDF)",
                                "multitask_selftrain",
                                "prefix-1of2",
                            ),
                            "teacher-det",
                        ),
                        "prefix-1of2-complement",
                    ),
                    "pdf",
                ),
            ];
            cfg
        }
        n => {
            return Err(Error::Config(format!(
                "table `{n}` is not one of 1|2|3|4|5"
            )));
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

fn kd_label(kd: &str) -> &'static str {
    match kd {
        "mse" => "MSE",
        "pdf" => "PDF",
        _ => "DeFeat",
    }
}

fn trend_stage(name: &str, label: &str, op: &str, train: &str) -> StageConfig {
    let mut s = StageConfig::new(name, op, train, TREND_EPOCHS);
    s.label = Some(label.into());
    s.batch_size = TREND_BATCH;
    s.lr = TREND_LR;
    s
}

/// One seed's worth of the trend suite. Stage roles:
/// `sup-half` is the shared supervised baseline; `self-t-*` are students of
/// teachers trained on shrinking fractions; `multitask` adds segmentation
/// images at the same detection budget; `crosstask-mse` distills from a
/// segmentation teacher at the same detection budget.
pub fn trend_config(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        name: format!("trend-seed{seed}"),
        seed,
        scale: "desk".into(),
        output_dir: None,
        dataset: trend_dataset(),
        splits: SplitRecipe {
            fractions: vec!["1/2".into(), "1/4".into(), "1/8".into()],
            complements: true,
            det_fraction: None,
        },
        stages: Vec::new(),
    };
    for (frac, short) in [("1/2", "half"), ("1/4", "quarter"), ("1/8", "eighth")] {
        cfg.stages.push(trend_stage(
            &format!("teacher-{short}"),
            &format!("Teacher ({frac})"),
            "teacher",
            &format!("prefix-1of{}", &frac[2..]),
        ));
    }
    cfg.stages.push(trend_stage(
        "sup-half",
        "Supervised (1/2)",
        "supervised",
        "prefix-1of2",
    ));
    for (frac, short) in [("1/2", "half"), ("1/4", "quarter"), ("1/8", "eighth")] {
        cfg.stages.push(with_teacher(
            trend_stage(
                &format!("self-t-{short}"),
                &format!("Self-trained (full, teacher {frac})"),
                "self",
                "full",
            ),
            &format!("teacher-{short}"),
        ));
    }
    cfg.stages.push(with_seg(
        trend_stage("multitask", "Multitask (det 1/2 + seg)", "multitask", "prefix-1of2"),
        "prefix-1of2-complement",
    ));
    cfg.stages.push(trend_stage(
        "seg-teacher",
        "Seg teacher (seg half)",
        "segmentation",
        "prefix-1of2-complement",
    ));
    cfg.stages.push(with_kd(
        with_teacher(
            trend_stage("crosstask-mse", "+MSE (seg teacher)", "crosstask", "prefix-1of2"),
            "seg-teacher",
        ),
        "mse",
    ));
    cfg
}

pub fn trend_matrix() -> Vec<ExperimentConfig> {
    TREND_SEEDS.iter().map(|&s| trend_config(s)).collect()
}
