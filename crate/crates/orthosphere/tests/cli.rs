mod common;

use std::fs;
use std::path::Path;

use common::{assert_ok, run, stderr, tiny_config, write_tiny};
use orthosphere::checkpoint::Checkpoint;
use orthosphere::commands::{self, load_data, CALIBRATION_CSV, CHECKPOINT, CORRELATION_CSV, PRUNE_CSV, TRAIN_LOG};
use orthosphere::core::analysis::{calibration, channel_correlation, prune_sweep, split_halves};
use orthosphere::core::train::evaluate;
use orthosphere::pnm::{self, PnmKind};
use orthosphere::tables;

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Trains the tiny run into `<dir>/run` and returns the config path.
fn trained(dir: &Path) -> std::path::PathBuf {
    let cfg = write_tiny(dir, &dir.join("run"));
    assert_ok(&run(&["train", "--config", s(&cfg)], &[]));
    cfg
}

#[test]
fn train_is_reproducible_and_matches_the_library() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = trained(tmp.path());
    let out = tmp.path().join("run");
    let log = fs::read(out.join(TRAIN_LOG)).unwrap();
    let ckpt = fs::read(out.join(CHECKPOINT)).unwrap();
    let resolved = fs::read(out.join("resolved_config.toml")).unwrap();

    let text = String::from_utf8(log.clone()).unwrap();
    assert!(text.starts_with("epoch,ce,consistency,aux,os,w_t,lr_factor,eval_acc\n"), "{text}");
    assert_eq!(text.lines().count(), 3);

    // the resolved config, fed back, reproduces every output
    let resolved_path = tmp.path().join("resolved.toml");
    fs::write(&resolved_path, &resolved).unwrap();
    assert_ok(&run(&["train", "--config", s(&resolved_path)], &[]));
    assert_eq!(fs::read(out.join(TRAIN_LOG)).unwrap(), log);
    assert_eq!(fs::read(out.join(CHECKPOINT)).unwrap(), ckpt);
    assert_eq!(fs::read(out.join("resolved_config.toml")).unwrap(), resolved);

    // direct library call into another directory
    let lib_out = tmp.path().join("lib");
    let mut lib_cfg = tiny_config(&lib_out);
    lib_cfg.out_dir = lib_out.clone();
    commands::cmd_train(&lib_cfg, None).unwrap();
    assert_eq!(fs::read(lib_out.join(TRAIN_LOG)).unwrap(), log);
    assert_eq!(fs::read(lib_out.join(CHECKPOINT)).unwrap(), ckpt);
    let _ = cfg;
}

#[test]
fn analyze_and_prune_match_direct_library_calls() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = trained(tmp.path());
    let out = tmp.path().join("run");
    assert_ok(&run(&["analyze", "--config", s(&cfg)], &[]));
    assert_ok(&run(&["prune", "--config", s(&cfg), "--rates", "0,50,75"], &[]));

    let rc = tiny_config(&out);
    let ck = Checkpoint::<f32>::load(&out.join(CHECKPOINT)).unwrap();
    let (_, test_raw) = load_data(&rc).unwrap();
    let test = ck.norm.as_ref().unwrap().apply(&test_raw).unwrap();
    let layer = ck.model.config().final_layer();

    let ev = evaluate(&ck.model, &test, 10).unwrap();
    let cal = calibration(&ev.probs, test.labels(), 15).unwrap();
    assert_eq!(fs::read(out.join(CALIBRATION_CSV)).unwrap(), tables::calibration_csv(&cal).unwrap());

    let idx: Vec<usize> = (0..20).collect();
    let maps = ck.model.infer(&test.batch(&idx)).unwrap().feature_maps.remove(&layer).unwrap();
    let corr = channel_correlation(&maps, 40, Default::default(), &layer).unwrap();
    assert_eq!(fs::read(out.join(CORRELATION_CSV)).unwrap(), tables::correlation_csv(&corr).unwrap());
    let m = 8u64;
    assert_eq!(corr.counts.iter().sum::<u64>(), 20 * m * (m - 1) / 2);

    let (val, held) = split_halves(test.len(), 3);
    let rows = prune_sweep(&ck.model, &test, &val, &held, &layer, &[0.0, 50.0, 75.0], 10).unwrap();
    assert_eq!(fs::read(out.join(PRUNE_CSV)).unwrap(), tables::prune_csv(&rows).unwrap());
    // the unpruned row is plain evaluation of the held-out half
    assert_eq!(rows[0].accuracy, evaluate(&ck.model, &test.subset(&held), 10).unwrap().accuracy);

    // reruns reproduce
    let first = fs::read(out.join(PRUNE_CSV)).unwrap();
    assert_ok(&run(&["prune", "--config", s(&cfg), "--rates", "0,50,75", "--threads", "2"], &[]));
    assert_eq!(fs::read(out.join(PRUNE_CSV)).unwrap(), first);
}

#[test]
fn prediction_file_calibration() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny(tmp.path(), &tmp.path().join("run"));
    let preds = tmp.path().join("preds.csv");
    fs::write(&preds, "label,p0,p1\n0,0.9,0.1\n0,0.9,0.1\n1,0.9,0.1\n1,0.9,0.1\n").unwrap();
    let o =
        run(&["analyze", "--config", s(&cfg), "--predictions", s(&preds), "--set", "analysis.calibration_bins=1"], &[]);
    assert_ok(&o);
    let bytes = fs::read(tmp.path().join("run").join(CALIBRATION_CSV)).unwrap();
    let scalars = tables::calibration_scalars(&bytes).unwrap();
    let get = |k: &str| scalars.iter().find(|(n, _)| n == k).unwrap().1;
    assert!((get("ece") - 0.4).abs() < 1e-12);
    assert!((get("oe") - 0.36).abs() < 1e-12);
    assert_eq!(get("n"), 4.0);
}

#[test]
fn gradcam_outputs_parse_with_declared_dimensions() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = trained(tmp.path());
    let out = tmp.path().join("run");
    assert_ok(&run(&["gradcam", "--config", s(&cfg), "--image", "4"], &[]));
    let gray = pnm::parse(&fs::read(out.join(commands::HEATMAP_PGM)).unwrap()).unwrap();
    assert_eq!((gray.kind, gray.width, gray.height, gray.maxval), (PnmKind::Gray, 32, 32, 255));
    let rgb = pnm::parse(&fs::read(out.join(commands::OVERLAY_PPM)).unwrap()).unwrap();
    assert_eq!((rgb.kind, rgb.width, rgb.height, rgb.data.len()), (PnmKind::Rgb, 32, 32, 3 * 1024));

    // with most of the final layer pruned
    assert_ok(&run(&["gradcam", "--config", s(&cfg), "--image", "4", "--prune-rate", "77"], &[]));
    assert!(pnm::parse(&fs::read(out.join(commands::HEATMAP_PGM)).unwrap()).is_ok());

    // a record file instead of a test index
    let rec = tmp.path().join("one.bin");
    let (_, test) = load_data(&tiny_config(&out)).unwrap();
    orthosphere::cifar::write(&rec, &test.subset(&[2])).unwrap();
    assert_ok(&run(&["gradcam", "--config", s(&cfg), "--image-file", s(&rec)], &[]));

    for bad in [vec!["--class", "3"], vec!["--layer", "conv9_9"], vec!["--image", "30"]] {
        let mut args = vec!["gradcam", "--config", s(&cfg)];
        args.extend(bad.iter().copied());
        let o = run(&args, &[]);
        assert_eq!(o.status.code(), Some(2), "{bad:?}: {}", stderr(&o));
    }
}

#[test]
fn constant_head_gives_black_heatmap() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = trained(tmp.path());
    let out = tmp.path().join("run");
    let mut ck = Checkpoint::<f32>::load(&out.join(CHECKPOINT)).unwrap();
    ck.model.param_mut("head.weight").unwrap().data_mut().fill(0.0);
    let frozen = tmp.path().join("frozen.ckpt");
    ck.save(&frozen).unwrap();
    assert_ok(&run(&["gradcam", "--config", s(&cfg), "--checkpoint", s(&frozen)], &[]));
    let gray = pnm::parse(&fs::read(out.join(commands::HEATMAP_PGM)).unwrap()).unwrap();
    assert!(gray.data.iter().all(|&b| b == 0));
}

/// Arguments, environment, key expected in the message.
type Case<'a> = (&'a [&'a str], &'a [(&'a str, &'a str)], &'a str);

#[test]
fn configuration_errors_exit_2_and_name_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny(tmp.path(), &tmp.path().join("run"));
    let cases: [Case; 6] = [
        (&["--set", "data.source=\"cifar10\""], &[], "data.cifar_dir"),
        (
            &[],
            &[("ORTHOSPHERE_DATA__SOURCE", "cifar10"), ("ORTHOSPHERE_DATA__CIFAR_DIR", "/nonexistent/cifar")],
            "data.cifar_dir",
        ),
        (&["--set", "train.loss.weight=2"], &[], "train.loss"),
        (&["--set", "model.classes=4"], &[], "model.classes"),
        (&["--set", "train.loss.blocks=3"], &[], "blocks"),
        (&["--preset", "no-such-preset"], &[], "preset"),
    ];
    for (extra, env, key) in cases {
        let mut args = vec!["train", "--config", s(&cfg)];
        args.extend(extra.iter().copied());
        let o = run(&args, env);
        assert_eq!(o.status.code(), Some(2), "{extra:?}: {}", stderr(&o));
        assert!(stderr(&o).contains(key), "{key} missing from {}", stderr(&o));
    }
    assert_eq!(run(&["train"], &[]).status.code(), Some(2));
}

#[test]
fn prune_rate_of_100_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny(tmp.path(), &tmp.path().join("run"));
    let o = run(&["prune", "--config", s(&cfg), "--rates", "22,100"], &[]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("analysis.prune_rates"));
}

#[test]
fn incompatible_checkpoint_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = trained(tmp.path());
    let o = run(&["analyze", "--config", s(&cfg), "--set", "data.classes=4", "--set", "model.classes=4"], &[]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn divergence_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny(tmp.path(), &tmp.path().join("run"));
    let o = run(&["train", "--config", s(&cfg), "--set", "train.base_learning_rate=1e38"], &[]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"), "{}", stderr(&o));
}

#[test]
fn environment_overrides_apply() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny(tmp.path(), &tmp.path().join("run"));
    let o = run(&["config", "--config", s(&cfg)], &[("ORTHOSPHERE_TRAIN__EPOCHS", "7"), ("ORTHOSPHERE_SEED", "11")]);
    assert_ok(&o);
    let text = String::from_utf8(o.stdout).unwrap();
    let back: orthosphere::config::RunConfig = toml::from_str(&text).unwrap();
    assert_eq!(back.train.epochs, 7);
    assert_eq!((back.seed, back.train.seed), (11, 11));
}

#[test]
fn synthetic_export_reads_back_as_cifar() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny(tmp.path(), &tmp.path().join("run"));
    assert_ok(&run(&["synth", "--config", s(&cfg)], &[]));
    let dir = tmp.path().join("run").join("cifar");
    let (train, test) = orthosphere::cifar::read_dir(&dir).unwrap();
    assert_eq!((train.len(), test.len()), (60, 30));
    let o = run(
        &["train", "--config", s(&cfg), "--set", "train.epochs=1"],
        &[("ORTHOSPHERE_DATA__SOURCE", "cifar10"), ("ORTHOSPHERE_DATA__CIFAR_DIR", s(&dir))],
    );
    assert_ok(&o);
}
