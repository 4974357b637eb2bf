mod common;

use std::fs;

use common::tiny_config;
use sfodlab::config::Matching;
use sfodlab::dump::{import_prediction_dump, write_dump};
use sfodlab::pipeline::{run, Division, Layout, Options, Stage};
use sfodlab::variance::{image_variance, AlignedPasses, PassEntry};
use sfodlab::Error;

const REPORTS: [&str; 5] = [
    "reports/metrics.json",
    "reports/correlation.json",
    "reports/correlation.csv",
    "reports/ablation.json",
    "reports/ablation.csv",
];

#[test]
fn run_all_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let summary = run(Stage::RunAll, &cfg, &Options { ablation: true }).unwrap();
    for rel in [
        "config.resolved.json",
        "data/source/manifest.json",
        "data/target/manifest.json",
        "checkpoints/pretrain.json",
        "checkpoints/align.json",
        "checkpoints/align_teacher.json",
        "checkpoints/finetune.json",
        "checkpoints/finetune_teacher.json",
        "checkpoints/ablation_mt.json",
        "division/passes.jsonl",
        "division/records.json",
        "logs/pretrain.jsonl",
        "logs/align.jsonl",
        "logs/finetune.jsonl",
    ]
    .iter()
    .chain(REPORTS.iter())
    {
        assert!(dir.path().join(rel).is_file(), "{rel} missing");
    }
    let ablation = summary.ablation.unwrap();
    assert_eq!(ablation.rows.len(), 3);
    assert_eq!(ablation.mc_sweep.len(), 1);
    let log = fs::read_to_string(dir.path().join("logs/align.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 12);
    assert!(log.lines().next().unwrap().contains("\"L_local\""));
}

#[test]
fn stages_after_pretraining_never_open_source_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let summary = run(Stage::RunAll, &cfg, &Options { ablation: true }).unwrap();
    let source = cfg.source_dir();
    let late: Vec<_> = summary
        .reads
        .iter()
        .filter(|a| !a.stage.may_read_source())
        .collect();
    assert!(!late.is_empty());
    for a in late {
        assert!(
            !a.path.starts_with(&source),
            "{} read {}",
            a.stage,
            a.path.display()
        );
    }
    assert!(summary
        .reads
        .iter()
        .any(|a| a.stage == Stage::Pretrain && a.path.starts_with(&source)));
}

#[test]
fn guard_rejects_target_dir_pointing_at_source() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    run(Stage::GenData, &cfg, &Options::default()).unwrap();
    run(Stage::Pretrain, &cfg, &Options::default()).unwrap();
    cfg.data.target_dir = Some(cfg.source_dir());
    for stage in [
        Stage::Divide,
        Stage::Align,
        Stage::Finetune,
        Stage::Eval,
        Stage::Correlate,
    ] {
        match run(stage, &cfg, &Options::default()) {
            Err(Error::SourceFree { stage: s, .. }) => assert_eq!(s, stage.name()),
            other => panic!("{stage}: expected guard violation, got {other:?}"),
        }
    }
}

#[test]
fn guard_rejects_a_copied_source_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    run(Stage::GenData, &cfg, &Options::default()).unwrap();
    run(Stage::Pretrain, &cfg, &Options::default()).unwrap();
    let copy = dir.path().join("elsewhere");
    fs::create_dir_all(copy.join("images")).unwrap();
    for entry in walk(&cfg.source_dir()) {
        let rel = entry.strip_prefix(cfg.source_dir()).unwrap();
        fs::copy(&entry, copy.join(rel)).unwrap();
    }
    cfg.data.target_dir = Some(copy);
    assert!(matches!(
        run(Stage::Divide, &cfg, &Options::default()),
        Err(Error::SourceFree { .. })
    ));
}

fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
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
fn missing_prerequisites_name_the_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    match run(Stage::Pretrain, &cfg, &Options::default()) {
        Err(Error::Prerequisite { path, .. }) => assert!(path.ends_with("dataset.json")),
        other => panic!("{other:?}"),
    }
    run(Stage::GenData, &cfg, &Options::default()).unwrap();
    match run(Stage::Divide, &cfg, &Options::default()) {
        Err(Error::Prerequisite { path, .. }) => {
            assert!(path.ends_with("checkpoints/pretrain.json"))
        }
        other => panic!("{other:?}"),
    }
    run(Stage::Pretrain, &cfg, &Options::default()).unwrap();
    match run(Stage::Align, &cfg, &Options::default()) {
        Err(Error::Prerequisite { path, .. }) => assert!(path.ends_with("division/records.json")),
        other => panic!("{other:?}"),
    }
    match run(Stage::Finetune, &cfg, &Options::default()) {
        Err(Error::Prerequisite { path, .. }) => assert!(path.ends_with("checkpoints/align.json")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn single_threaded_reruns_are_byte_identical() {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        pool.install(|| {
            run(
                Stage::RunAll,
                &tiny_config(d.path()),
                &Options { ablation: true },
            )
        })
        .unwrap();
    }
    for rel in REPORTS.iter().chain(
        [
            "checkpoints/finetune.json",
            "division/records.json",
            "logs/finetune.jsonl",
        ]
        .iter(),
    ) {
        assert_eq!(
            fs::read(a.path().join(rel)).unwrap(),
            fs::read(b.path().join(rel)).unwrap(),
            "{rel}"
        );
    }
}

#[test]
fn reports_do_not_depend_on_worker_count() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for (d, n) in [(&a, 1), (&b, 3)] {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .unwrap();
        pool.install(|| run(Stage::RunAll, &tiny_config(d.path()), &Options::default()))
            .unwrap();
    }
    for rel in [
        "reports/metrics.json",
        "reports/correlation.json",
        "division/records.json",
    ] {
        assert_eq!(
            fs::read(a.path().join(rel)).unwrap(),
            fs::read(b.path().join(rel)).unwrap(),
            "{rel}"
        );
    }
}

fn read_division(out: &std::path::Path) -> Division {
    serde_json::from_str(&fs::read_to_string(Layout::new(out).division()).unwrap()).unwrap()
}

#[test]
fn dumped_passes_reimport_losslessly() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.division.tau_det = 0.0;
    for s in [Stage::GenData, Stage::Pretrain, Stage::Divide] {
        run(s, &cfg, &Options::default()).unwrap();
    }
    let division = read_division(dir.path());
    let imported =
        import_prediction_dump(&Layout::new(dir.path()).passes(), Matching::Anchor).unwrap();
    assert!(imported.duplicated.is_empty());
    assert!(imported.images.iter().any(|p| !p.passes[0].is_empty()));
    for p in &imported.images {
        let v = image_variance(p, cfg.division.combine).unwrap();
        let rec = division.records.iter().find(|r| r.id == p.id).unwrap();
        assert!(
            (v.v_b - rec.v_b).abs() <= 1e-12
                && (v.v_c - rec.v_c).abs() <= 1e-12
                && (v.v - rec.v).abs() <= 1e-12
        );
    }
}

#[test]
fn divide_accepts_an_external_dump() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    run(Stage::GenData, &cfg, &Options::default()).unwrap();
    // No pretrained checkpoint is needed: the dump stands in for the passes.
    let dump: Vec<AlignedPasses> = (0..cfg.data.n_target as u64)
        .map(|id| AlignedPasses {
            id,
            passes: (0..3)
                .map(|m| {
                    vec![PassEntry {
                        anchor_id: None,
                        bbox: [1.0 + (id * m) as f64 * 0.1, 2.0, 20.0, 22.0],
                        scores: vec![0.5, 0.25, 0.25],
                    }]
                })
                .collect(),
        })
        .collect();
    let path = dir.path().join("external.jsonl");
    write_dump(&path, &dump).unwrap();
    cfg.division.dump = Some(path);
    assert!(matches!(
        run(Stage::Divide, &cfg, &Options::default()),
        Err(Error::Dump { line: 1, .. })
    ));
    cfg.division.matching = Matching::IouGreedy;
    run(Stage::Divide, &cfg, &Options::default()).unwrap();
    let division = read_division(dir.path());
    assert_eq!(division.records.len(), cfg.data.n_target);
    assert_eq!(division.mc_passes, 3);
    // Image 0 has identical passes, so its variance is the smallest.
    assert_eq!(division.records[0].id, 0);
    assert_eq!(division.records[0].v, 0.0);
}
