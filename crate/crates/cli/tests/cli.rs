mod common;

use std::fs;

use common::{mvlift, tiny, write_config};
use mvlift::config::PipelineConfig;
use mvlift::pipeline::{self, Artifacts, EvalPaths, LiftMode};
use mvlift::CliError;
use mvlift_core::denoiser::load_checkpoint;
use mvlift_core::lift3d::{strict_consistency_residual, MVDataset, STRICT_CONSISTENCY_TOL};
use mvlift_core::metrics::{j2d, j2d_centered, mpjpe, pa_mpjpe, t_root};
use mvlift_core::motion::{load_dataset, load_dataset_3d, project_sequence, Pose3DSequence, Record3D};
use ndarray::Array3;
use tempfile::tempdir;

fn max_abs_diff(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn empty_synthetic_dataset_is_written() {
    let dir = tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.synth.train_sequences = 0;
    cfg.synth.test_sequences = 0;
    pipeline::gen_synth(&cfg).unwrap();
    let a = Artifacts::new(&cfg);
    assert!(load_dataset(a.train2d()).unwrap().is_empty());
    assert!(load_dataset_3d(a.test3d()).unwrap().is_empty());
    let err = pipeline::train_lcdm(&cfg, false).unwrap_err();
    assert!(err.to_string().contains("no sequences"), "{err}");
}

#[test]
fn synthetic_generation_is_seeded() {
    let (d1, d2) = (tempdir().unwrap(), tempdir().unwrap());
    let (c1, c2) = (tiny(d1.path()), tiny(d2.path()));
    let m1 = pipeline::gen_synth(&c1).unwrap();
    let m2 = pipeline::gen_synth(&c2).unwrap();
    assert_eq!(m1, m2);
    let a1 = Artifacts::new(&c1);
    let a2 = Artifacts::new(&c2);
    assert_eq!(fs::read(a1.train2d()).unwrap(), fs::read(a2.train2d()).unwrap());
    let mut c3 = tiny(d2.path());
    c3.seed += 1;
    let m3 = pipeline::gen_synth(&c3).unwrap();
    assert_ne!(m1.outputs, m3.outputs);
}

#[test]
fn emitted_2d_matches_projection_of_3d_source() {
    let dir = tempdir().unwrap();
    let cfg = tiny(dir.path());
    pipeline::gen_synth(&cfg).unwrap();
    let a = Artifacts::new(&cfg);
    let rig = cfg.six_view_rig().unwrap();
    for (p3, p2) in [(a.train3d(), a.train2d()), (a.test3d(), a.test2d())] {
        let r3 = load_dataset_3d(p3).unwrap();
        let r2 = load_dataset(p2).unwrap();
        assert_eq!(r3.len(), r2.len());
        for (x3, x2) in r3.iter().zip(&r2) {
            assert_eq!(x3.id, x2.id);
            let tag = x2.view.as_ref().unwrap();
            assert_eq!(tag.rig, rig.identifier());
            let proj = project_sequence(&x3.seq, &rig, tag.view).unwrap();
            assert!(max_abs_diff(proj.array(), x2.seq.array()) < 1e-9);
        }
    }
    let views: Vec<usize> = load_dataset(a.train2d())
        .unwrap()
        .iter()
        .map(|r| r.view.as_ref().unwrap().view)
        .collect();
    assert!(views.iter().any(|&v| v != views[0]), "training views are not randomized: {views:?}");
}

#[test]
fn one_step_training_writes_loadable_checkpoint() {
    let dir = tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.stage1.train.steps = 1;
    pipeline::gen_synth(&cfg).unwrap();
    pipeline::train_lcdm(&cfg, false).unwrap();
    let a = Artifacts::new(&cfg);
    let ck = load_checkpoint(&a.stage1_checkpoint()).unwrap();
    assert_eq!(ck.train_step, 1);
    ck.expect_config(&cfg.stage1_model()).unwrap();
    let rows = pipeline::read_train_log(&a.train_log("train-lcdm")).unwrap();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].total > 0.0 && rows[0].line > 0.0 && rows[0].recon > 0.0);
    assert!((rows[0].total - rows[0].recon - cfg.stage1.train.lambda_line * rows[0].line).abs() < 1e-9 * rows[0].total);
}

#[test]
fn resumed_training_continues_the_uninterrupted_log() {
    let (d1, d2) = (tempdir().unwrap(), tempdir().unwrap());
    let mut full = tiny(d1.path());
    full.stage1.train.steps = 8;
    pipeline::gen_synth(&full).unwrap();
    pipeline::train_lcdm(&full, false).unwrap();

    let mut part = tiny(d2.path());
    part.stage1.train.steps = 3;
    pipeline::gen_synth(&part).unwrap();
    pipeline::train_lcdm(&part, false).unwrap();
    part.stage1.train.steps = 8;
    pipeline::train_lcdm(&part, true).unwrap();

    let l1 = pipeline::read_train_log(&Artifacts::new(&full).train_log("train-lcdm")).unwrap();
    let l2 = pipeline::read_train_log(&Artifacts::new(&part).train_log("train-lcdm")).unwrap();
    assert_eq!(l1, l2);
    let totals: Vec<f64> = l2.iter().map(|r| r.total).collect();
    let mean = totals[..3].iter().sum::<f64>() / 3.0;
    let sd = (totals[..3].iter().map(|t| (t - mean).powi(2)).sum::<f64>() / 3.0).sqrt();
    assert!((totals[3] - totals[2]).abs() <= 2.0 * sd.max(1e-12) || totals[3] == l1[3].total);
    let a1 = Artifacts::new(&full);
    let a2 = Artifacts::new(&part);
    assert_eq!(fs::read(a1.stage1_checkpoint()).unwrap(), fs::read(a2.stage1_checkpoint()).unwrap());
}

#[test]
fn stage_dependencies_fail_fast_with_named_artifacts() {
    let dir = tempdir().unwrap();
    let cfg = tiny(dir.path());
    let err = pipeline::train_lcdm(&cfg, false).unwrap_err();
    assert!(matches!(&err, CliError::MissingArtifact { producer, .. } if producer == "gen-synth"), "{err}");
    pipeline::gen_synth(&cfg).unwrap();
    let err = pipeline::lift(&cfg, LiftMode::Stage2, None).unwrap_err();
    assert!(err.to_string().contains("Stage-1 checkpoint"), "{err}");
    assert!(err.to_string().contains("stage1.ckpt"), "{err}");
    let err = pipeline::optimize_mv(&cfg, None).unwrap_err();
    assert!(err.to_string().contains("train-lcdm"), "{err}");
    let err = pipeline::build_mvdataset(&cfg).unwrap_err();
    assert!(err.to_string().contains("Stage-2 views of train00000"), "{err}");
    let err = pipeline::train_mvdm(&cfg, false).unwrap_err();
    assert!(err.to_string().contains("multi-view dataset"), "{err}");
    let err = pipeline::lift(&cfg, LiftMode::Full, None).unwrap_err();
    assert!(err.to_string().contains("Stage-4 checkpoint"), "{err}");
    let err = pipeline::eval(&cfg, LiftMode::Full, &EvalPaths::default()).unwrap_err();
    assert!(err.to_string().contains("lift --mode full"), "{err}");
    assert!(!Artifacts::new(&cfg).lift_dir(LiftMode::Full).exists());
}

#[test]
fn stage1_mode_needs_only_the_stage1_checkpoint() {
    let dir = tempdir().unwrap();
    let cfg = tiny(dir.path());
    pipeline::gen_synth(&cfg).unwrap();
    pipeline::train_lcdm(&cfg, false).unwrap();
    let (_, lifted) = pipeline::lift(&cfg, LiftMode::Stage1, None).unwrap();
    assert_eq!(lifted.len(), cfg.synth.test_sequences);
    assert!(lifted.iter().all(|l| l.views.len() == 6));
    let (_, again) = pipeline::lift(&cfg, LiftMode::Stage1, None).unwrap();
    for (x, y) in lifted.iter().zip(&again) {
        assert_eq!(x.pose, y.pose);
    }
}

#[test]
fn full_pipeline_runs_and_input_view_is_untouched() {
    let dir = tempdir().unwrap();
    let cfg = tiny(dir.path());
    pipeline::gen_synth(&cfg).unwrap();
    pipeline::train_lcdm(&cfg, false).unwrap();
    pipeline::optimize_mv(&cfg, None).unwrap();
    let a = Artifacts::new(&cfg);
    let inputs = load_dataset(a.train2d()).unwrap();
    let refined = load_dataset(a.stage2_views("train00000")).unwrap();
    assert_eq!(refined.len(), 6);
    assert_eq!(refined[0].seq, inputs[0].seq);

    let m = pipeline::build_mvdataset(&cfg).unwrap();
    let ds = MVDataset::from_records(&load_dataset(a.mvdataset()).unwrap(), cfg.four_view_rig().unwrap()).unwrap();
    assert_eq!(ds.entries.len(), 2 * (cfg.stage3.yaw_copies + 1));
    for e in &ds.entries {
        assert!(strict_consistency_residual(&e.views, &ds.rig).unwrap() < STRICT_CONSISTENCY_TOL);
    }
    assert!(m.metrics["max_consistency_residual"].as_f64().unwrap() < STRICT_CONSISTENCY_TOL);

    pipeline::train_mvdm(&cfg, false).unwrap();
    let (_, lifted) = pipeline::lift(&cfg, LiftMode::Full, None).unwrap();
    let tests = load_dataset(a.test2d()).unwrap();
    for (l, t) in lifted.iter().zip(&tests) {
        assert_eq!(l.views.len(), 4);
        assert_eq!(l.views[0], t.seq);
    }
    let (_, report) = pipeline::eval(&cfg, LiftMode::Full, &EvalPaths::default()).unwrap();
    assert_eq!(report.per_sequence.len(), tests.len());
    pipeline::render_predictions(&cfg, LiftMode::Full, Some("test00001"), None).unwrap();
    let svg = fs::read_to_string(a.render_dir(LiftMode::Full).join("test00001.svg")).unwrap();
    roxmltree::Document::parse(&svg).unwrap();
}

#[test]
fn eval_of_ground_truth_is_zero_and_matches_metric_calls() {
    let dir = tempdir().unwrap();
    let cfg = tiny(dir.path());
    pipeline::gen_synth(&cfg).unwrap();
    let a = Artifacts::new(&cfg);
    let paths = EvalPaths {
        predictions: Some(a.test3d()),
        ..EvalPaths::default()
    };
    let (_, report) = pipeline::eval(&cfg, LiftMode::Full, &paths).unwrap();
    for s in &report.per_sequence {
        assert_eq!(s.mpjpe, Some(0.0));
        assert_eq!(s.t_root, Some(0.0));
        assert!(s.pa_mpjpe.unwrap() < 1e-9);
        assert!(s.j2d < 1e-9 && s.j2d_centered < 1e-9);
    }

    let (_, naive) = pipeline::lift(&cfg, LiftMode::Naive, None).unwrap();
    let (_, report) = pipeline::eval(&cfg, LiftMode::Naive, &EvalPaths::default()).unwrap();
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.eval_dir(LiftMode::Naive).join("report.json")).unwrap()).unwrap();
    let gt = load_dataset_3d(a.test3d()).unwrap();
    let obs = load_dataset(a.test2d()).unwrap();
    let rig = cfg.six_view_rig().unwrap();
    for (k, l) in naive.iter().enumerate() {
        let row = &json["per_sequence"][k];
        assert_eq!(row["id"], l.id.as_str());
        let direct = [
            ("mpjpe", mpjpe(&l.pose, &gt[k].seq).unwrap()),
            ("pa_mpjpe", pa_mpjpe(&l.pose, &gt[k].seq).unwrap()),
            ("t_root", t_root(&l.pose, &gt[k].seq).unwrap()),
            ("j2d", j2d(&l.pose, &obs[k].seq, &rig, 0).unwrap()),
            ("j2d_centered", j2d_centered(&l.pose, &obs[k].seq, &rig, 0).unwrap()),
        ];
        for (name, v) in direct {
            let r = row[name].as_f64().unwrap();
            assert!((r - 1000.0 * v).abs() <= 1e-12 * (1.0 + r.abs()), "{name}: {r} vs {v}");
        }
    }
    assert_eq!(report.per_sequence.len(), naive.len());
}

#[test]
fn eval_lists_every_id_mismatch() {
    let dir = tempdir().unwrap();
    let cfg = tiny(dir.path());
    pipeline::gen_synth(&cfg).unwrap();
    let a = Artifacts::new(&cfg);
    let mut gt = load_dataset_3d(a.test3d()).unwrap();
    gt.remove(0);
    gt.remove(0);
    let extra = Record3D {
        id: "stray".into(),
        ..gt[0].clone()
    };
    gt.push(extra);
    let pred_path = dir.path().join("pred.jsonl");
    mvlift_core::motion::save_dataset_3d(&pred_path, &gt).unwrap();
    let paths = EvalPaths {
        predictions: Some(pred_path),
        ..EvalPaths::default()
    };
    let err = pipeline::eval(&cfg, LiftMode::Full, &paths).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, CliError::IdMismatch(_)));
    for id in ["missing prediction: test00000", "missing prediction: test00001", "no ground truth: stray"] {
        assert!(msg.contains(id), "{msg}");
    }
}

#[test]
fn render_of_two_frames_is_valid_svg() {
    let dir = tempdir().unwrap();
    let cfg = tiny(dir.path());
    let seq = Pose3DSequence::new(Array3::from_shape_fn((2, 8, 3), |(t, j, c)| 0.1 * (t + j + c) as f64), 0).unwrap();
    let rig = cfg.six_view_rig().unwrap();
    let (svg, overlay) =
        mvlift::render::render_sequence("a<b", &seq, None, &cfg.skeleton.parent, &rig, 0).unwrap();
    assert!(!svg.is_empty());
    let doc = roxmltree::Document::parse(&svg).unwrap();
    assert_eq!(doc.root_element().tag_name().name(), "svg");
    assert_eq!(doc.descendants().filter(|n| n.has_tag_name("polyline")).count(), 3);
    let v: serde_json::Value = serde_json::from_str(&overlay).unwrap();
    assert_eq!(v["frames"].as_array().unwrap().len(), 2);
    assert_eq!(v["edges"].as_array().unwrap().len(), 7);
}

#[test]
fn config_round_trips_and_rejects_unknown_keys() {
    let cfg = PipelineConfig::default();
    let back = PipelineConfig::from_toml(&cfg.to_toml()).unwrap();
    assert_eq!(cfg, back);
    assert_eq!(PipelineConfig::from_toml("").unwrap(), cfg);
    let err = PipelineConfig::from_toml("[stage2]\nbogus = 1\n").unwrap_err();
    assert!(err.to_string().contains("bogus"), "{err}");
    let err = PipelineConfig::from_toml("[stage1.model]\nmax_t = 8\n").unwrap_err();
    assert!(err.to_string().contains("max_t"), "{err}");
}

#[test]
fn binary_exit_codes() {
    let dir = tempdir().unwrap();
    let cfg_path = write_config(dir.path(), &tiny(dir.path()));
    let cfg = cfg_path.to_str().unwrap();
    assert_eq!(mvlift(&["--help"]).status.code(), Some(0));
    assert_eq!(mvlift(&[]).status.code(), Some(1));
    assert_eq!(mvlift(&["gen-synth", "--bogus"]).status.code(), Some(1));
    assert_eq!(mvlift(&["lift", "--mode", "stage9"]).status.code(), Some(1));
    assert_eq!(mvlift(&["gen-synth", "--config", cfg, "--mode", "full"]).status.code(), Some(1));
    assert_eq!(mvlift(&["gen-synth", "--config", cfg, "--threads", "0"]).status.code(), Some(1));
    let missing = dir.path().join("nope.toml");
    assert_eq!(mvlift(&["gen-synth", "--config", missing.to_str().unwrap()]).status.code(), Some(2));

    let out = mvlift(&["lift", "--config", cfg, "--mode", "stage1"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("test2d.jsonl") && err.contains("gen-synth"), "{err}");

    let shown = mvlift(&["--config", cfg, "--show-config", "--seed", "99"]);
    assert_eq!(shown.status.code(), Some(0));
    let parsed = PipelineConfig::from_toml(&String::from_utf8(shown.stdout).unwrap()).unwrap();
    assert_eq!(parsed.seed, 99);
    assert_eq!(parsed.synth.train_sequences, 10);

    assert_eq!(mvlift(&["gen-synth", "--config", cfg]).status.code(), Some(0));
    let a = Artifacts::new(&tiny(dir.path()));
    fs::write(a.train2d(), "{\"id\": 3}\n").unwrap();
    let out = mvlift(&["train-lcdm", "--config", cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));
}

#[test]
fn output_root_follows_environment() {
    let dir = tempdir().unwrap();
    let mut cfg = PipelineConfig::default();
    cfg.synth.train_sequences = 1;
    cfg.synth.test_sequences = 1;
    cfg.paths.root = dir.path().join("configured");
    let cfg_path = write_config(dir.path(), &cfg);
    let target = dir.path().join("from-env");
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_mvlift"))
        .args(["gen-synth", "--config", cfg_path.to_str().unwrap()])
        .env("MVLIFT_OUT", &target)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(target.join("datasets").join("train2d.jsonl").is_file());
    assert!(target.join("outputs").join("manifests").join("gen-synth.json").is_file());
    assert!(!dir.path().join("configured").exists());
}
