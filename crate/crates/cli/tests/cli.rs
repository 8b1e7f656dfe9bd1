use std::fs;
use std::path::Path;

use sarcasm_cli::{run, RunConfig, EXIT_DATA, EXIT_OK, EXIT_USAGE, EXIT_VERIFICATION};

fn call(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("sarcasm").chain(args.iter().copied());
    let code = run(argv, &mut out, &mut err);
    (
        code,
        String::from_utf8(out).unwrap(),
        String::from_utf8(err).unwrap(),
    )
}

const SMALL: [&str; 9] = [
    "--model.d=8",
    "--model.heads=2",
    "--model.regions=4",
    "--model.region_dim=8",
    "--encoder.text_len=6",
    "--encoder.caption_len=4",
    "--train.epochs=2",
    "--train.learning_rate=1e-2",
    "--train.seed=7",
];

fn synth(dir: &Path) -> String {
    let data = dir.join("data");
    let (code, out, _) = call(&["synth", "--out", data.to_str().unwrap(), "--n", "40"]);
    assert_eq!(code, EXIT_OK);
    assert!(
        out.contains("split totals (train / dev / test): 32 / 4 / 4"),
        "{out}"
    );
    data.join("manifest.jsonl").to_str().unwrap().to_string()
}

fn train(dir: &Path, manifest: &str, extra: &[&str]) -> (i32, String, String) {
    let out = dir.join("run");
    let mut args = vec![
        "train",
        "--manifest",
        manifest,
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend(SMALL);
    args.extend(extra);
    call(&args)
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let (code, _, err) = call(&["fly"]);
    assert_eq!(code, EXIT_USAGE);
    assert!(err.contains("Usage"), "{err}");
    let (code, _, _) = call(&[]);
    assert_eq!(code, EXIT_USAGE);
}

#[test]
fn help_exits_cleanly() {
    let (code, out, _) = call(&["--help"]);
    assert_eq!(code, EXIT_OK);
    for sub in [
        "train",
        "eval",
        "predict",
        "gradcheck",
        "ablate",
        "synth",
        "stats",
    ] {
        assert!(out.contains(sub), "{sub} missing from help");
    }
}

#[test]
fn overrides_outside_training_are_rejected() {
    let (code, _, err) = call(&["stats", "--manifest", "m.jsonl", "--model.d=4"]);
    assert_eq!(code, EXIT_USAGE);
    assert!(err.contains("overrides"), "{err}");
    let (code, _, _) = call(&["train", "--optimizer.lr=1"]);
    assert_eq!(code, EXIT_USAGE);
}

#[test]
fn invalid_config_exits_2_before_touching_data() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, err) = call(&[
        "train",
        "--manifest",
        "missing.jsonl",
        "--out",
        "x",
        "--model.heads=3",
    ]);
    assert_eq!(code, EXIT_USAGE, "{err}");
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[model]\nwidth = 3\n").unwrap();
    let (code, _, err) = call(&[
        "train",
        "--config",
        bad.to_str().unwrap(),
        "--manifest",
        "m",
        "--out",
        "x",
    ]);
    assert_eq!(code, EXIT_USAGE);
    assert!(err.contains("width"), "{err}");
}

#[test]
fn missing_or_malformed_data_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, _) = call(&[
        "stats",
        "--manifest",
        dir.path().join("none.jsonl").to_str().unwrap(),
    ]);
    assert_eq!(code, EXIT_DATA);

    let manifest = dir.path().join("m.jsonl");
    fs::write(
        &manifest,
        "{\"id\":\"a\",\"text\":\"x\",\"label\":1,\"split\":\"train\"}\n{oops\n",
    )
    .unwrap();
    let (code, _, err) = call(&["stats", "--manifest", manifest.to_str().unwrap()]);
    assert_eq!(code, EXIT_DATA);
    assert!(err.contains("line 2"), "{err}");

    // regions are required but absent
    fs::write(
        &manifest,
        "{\"id\":\"a\",\"text\":\"x\",\"label\":1,\"split\":\"train\"}\n",
    )
    .unwrap();
    let (code, _, err) = train(dir.path(), manifest.to_str().unwrap(), &[]);
    assert_eq!(code, EXIT_DATA);
    assert!(err.contains("sample a"), "{err}");
}

#[test]
fn train_writes_a_reproducible_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    let (code, out, err) = train(dir.path(), &manifest, &[]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(out.contains("best epoch = "), "{out}");
    let run = dir.path().join("run");
    for file in ["checkpoint.bin", "history.csv", "config.toml", "vocab.txt"] {
        assert!(run.join(file).is_file(), "{file} missing");
    }
    let history = fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);

    // the echoed config alone reproduces the run
    let echoed = RunConfig::resolve(Some(&run.join("config.toml")), &[]).unwrap();
    assert_eq!(
        (echoed.model.d, echoed.train.seed, echoed.train.epochs),
        (8, 7, 2)
    );
    let again = dir.path().join("again");
    let (code, _, err) = call(&[
        "train",
        "--config",
        run.join("config.toml").to_str().unwrap(),
        "--out",
        again.to_str().unwrap(),
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert_eq!(
        fs::read(again.join("history.csv")).unwrap(),
        history.as_bytes()
    );
    assert_eq!(
        fs::read(again.join("checkpoint.bin")).unwrap(),
        fs::read(run.join("checkpoint.bin")).unwrap()
    );
}

#[test]
fn eval_and_predict_read_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    assert_eq!(train(dir.path(), &manifest, &[]).0, EXIT_OK);
    let ckpt = dir.path().join("run/checkpoint.bin");
    let ckpt = ckpt.to_str().unwrap();

    let (code, out, err) = call(&[
        "eval",
        "--checkpoint",
        ckpt,
        "--manifest",
        &manifest,
        "--split",
        "dev",
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    for key in [
        "accuracy = ",
        "precision = ",
        "recall = ",
        "f1 = ",
        "tp = ",
        "fp = ",
        "fn = ",
        "tn = ",
    ] {
        assert!(out.contains(key), "{key} missing:\n{out}");
    }
    assert!(out.contains("samples = 4"));
    let (code, _, _) = call(&[
        "eval",
        "--checkpoint",
        ckpt,
        "--manifest",
        &manifest,
        "--average",
        "macro",
    ]);
    assert_eq!(code, EXIT_OK);
    let (code, _, _) = call(&[
        "eval",
        "--checkpoint",
        ckpt,
        "--manifest",
        &manifest,
        "--split",
        "val",
    ]);
    assert_eq!(code, EXIT_USAGE);

    let csv_path = dir.path().join("pred.csv");
    let (code, _, _) = call(&[
        "predict",
        "--checkpoint",
        ckpt,
        "--manifest",
        &manifest,
        "--output",
        csv_path.to_str().unwrap(),
    ]);
    assert_eq!(code, EXIT_OK);
    let csv = fs::read_to_string(&csv_path).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("id,label,p_sarcastic"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 4);
    for row in rows {
        let cells: Vec<&str> = row.split(',').collect();
        let p: f64 = cells[2].parse().unwrap();
        assert!((0.0..=1.0).contains(&p));
        assert_eq!(cells[1] == "1", p > 0.5, "{row}");
    }

    let tampered = dir.path().join("bad.bin");
    let bytes = fs::read(ckpt).unwrap();
    fs::write(&tampered, &bytes[..bytes.len() - 3]).unwrap();
    let (code, _, _) = call(&[
        "eval",
        "--checkpoint",
        tampered.to_str().unwrap(),
        "--manifest",
        &manifest,
    ]);
    assert_eq!(code, EXIT_DATA);
}

#[test]
fn ablate_emits_four_rows() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    let out_dir = dir.path().join("abl");
    let mut args = vec![
        "ablate",
        "--manifest",
        &manifest,
        "--out",
        out_dir.to_str().unwrap(),
    ];
    args.extend(SMALL);
    let (code, out, err) = call(&args);
    assert_eq!(code, EXIT_OK, "{err}");
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "variant,accuracy,precision,recall,f1");
    let names: Vec<&str> = lines[1..]
        .iter()
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(
        names,
        ["full", "no_visual_attention", "no_tau_si", "no_tau_sc"]
    );
    assert_eq!(
        fs::read_to_string(out_dir.join("ablation.csv")).unwrap(),
        out
    );
    assert!(out_dir.join("config.toml").is_file());
}

#[test]
fn gradcheck_exit_codes() {
    let (code, out, _) = call(&["gradcheck", "--max-entries", "4"]);
    assert_eq!(code, EXIT_OK);
    assert!(out.contains("model/full"));
    let (code, _, err) = call(&["gradcheck", "--max-entries", "4", "--tolerance", "1e-30"]);
    assert_eq!(code, EXIT_VERIFICATION);
    assert!(err.contains("gradient check failed"), "{err}");
}

#[test]
fn stats_reports_unmatched_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    let (code, out, _) = call(&["stats", "--manifest", &manifest]);
    assert_eq!(code, EXIT_OK);
    assert!(out.contains("matches reference: none"));
}
