use std::path::Path;
use std::process::{Command, Output};

use freqmrn::data::{read_sequence, SequenceDataset};

fn freqmrn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_freqmrn"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = r#"
seed = 5

[data]
train_dir = "ds"

[model]
history = 20
query = 5
future = 5
stages = 2
residual_pairs = 1
latent = 8

[train]
epochs = 2
batch_size = 8

[eval]
frames_ms = [40, 200]
stride = 5

[synth]
count = 3
frames = 40
"#;

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), SMALL).unwrap();
    let o = freqmrn(dir.path(), &["--config", "run.toml", "--out", "ds", "gen-synth"]);
    assert!(o.status.success(), "{}", stderr(&o));
    dir
}

#[test]
fn gen_synth_writes_a_loadable_dataset() {
    let dir = workspace();
    let ds = SequenceDataset::load(dir.path().join("ds")).unwrap();
    assert_eq!(ds.len(), 3);
    assert!(ds.sequences.iter().all(|s| s.frames() == 40));
    let echoed = std::fs::read_to_string(dir.path().join("ds/config.toml")).unwrap();
    assert!(echoed.contains("seed = 5"));
}

#[test]
fn gen_synth_is_reproducible_per_seed() {
    let dir = workspace();
    let o = freqmrn(dir.path(), &["--config", "run.toml", "--out", "again", "gen-synth"]);
    assert!(o.status.success());
    let o = freqmrn(
        dir.path(),
        &["--config", "run.toml", "--seed", "6", "--out", "other", "gen-synth"],
    );
    assert!(o.status.success());
    let read = |d: &str, n: usize| std::fs::read(dir.path().join(format!("{d}/seq{n:04}.mseq"))).unwrap();
    assert_eq!(read("ds", 0), read("again", 0));
    // sequence i uses seed + i
    assert_eq!(read("ds", 1), read("other", 0));
    assert_ne!(read("ds", 0), read("other", 0));
}

#[test]
fn gen_synth_count_zero_writes_only_the_skeleton() {
    let dir = tempfile::tempdir().unwrap();
    let o = freqmrn(dir.path(), &["--out", "empty", "gen-synth", "--count", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ds = SequenceDataset::load(dir.path().join("empty")).unwrap();
    assert!(ds.is_empty());
}

#[test]
fn train_predict_eval_round() {
    let dir = workspace();
    let o = freqmrn(dir.path(), &["--config", "run.toml", "--out", "run", "train"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = std::fs::read_to_string(dir.path().join("run/metrics.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = metrics.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[1]["epoch"], 2);
    assert!(lines[0]["val_mpjpe"].is_number());
    assert!(dir.path().join("run/config.toml").exists());

    let o = freqmrn(
        dir.path(),
        &[
            "--out",
            "pred",
            "predict",
            "--checkpoint",
            "run/checkpoint.fmrn",
            "--input",
            "ds/seq0000.mseq",
            "--horizon",
            "12",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("3 refinement passes"));
    let pred = read_sequence(dir.path().join("pred/prediction.mseq")).unwrap();
    assert_eq!((pred.frames(), pred.joints()), (12, 4));

    let o = freqmrn(
        dir.path(),
        &[
            "--config",
            "run.toml",
            "--out",
            "ev",
            "eval",
            "--checkpoint",
            "run/checkpoint.fmrn",
            "--data",
            "ds",
            "--stages",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("stage 2"));
    let record: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("ev/eval.json")).unwrap()).unwrap();
    assert_eq!(record["table"]["frames"], serde_json::json!([1, 5]));
    assert_eq!(record["stages_used"], 2);

    let o = freqmrn(
        dir.path(),
        &[
            "--config",
            "run.toml",
            "--out",
            "ab",
            "eval",
            "--checkpoint",
            "run/checkpoint.fmrn",
            "--data",
            "ds",
            "--ablation",
            "stages=1,use_velocity=false",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let ablated: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("ab/eval.json")).unwrap()).unwrap();
    assert_eq!(ablated["stages_used"], 1);
    assert_ne!(ablated["loss"], record["loss"]);

    // resuming a finished run trains nothing more
    let o = freqmrn(
        dir.path(),
        &[
            "--config",
            "run.toml",
            "--out",
            "run",
            "train",
            "--resume",
            "run/checkpoint.fmrn",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("already at epoch 2"));
}

#[test]
fn dry_run_prints_config_and_parameter_count() {
    let dir = workspace();
    let o = freqmrn(
        dir.path(),
        &["--config", "run.toml", "--out", "run", "--dry-run", "train"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("[model]") && text.contains("latent = 8"));
    assert!(text.contains("parameters: "));
    assert!(!dir.path().join("run").exists());
}

#[test]
fn config_problems_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = freqmrn(dir.path(), &["train"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("data.train_dir"));

    std::fs::write(dir.path().join("bad.toml"), "[model]\nlatnet = 3\n").unwrap();
    let o = freqmrn(dir.path(), &["--config", "bad.toml", "gen-synth"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("latnet"));

    std::fs::write(dir.path().join("short.toml"), "[model]\nhistory = 5\n").unwrap();
    let o = freqmrn(dir.path(), &["--config", "short.toml", "train", "--data", "x"]);
    assert_eq!(o.status.code(), Some(2));

    let o = freqmrn(dir.path(), &["gen-synth", "--kind", "wobble"]);
    assert_eq!(o.status.code(), Some(2));

    let o = freqmrn(dir.path(), &["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn runtime_problems_exit_with_code_one() {
    let dir = workspace();
    let o = freqmrn(
        dir.path(),
        &[
            "predict",
            "--checkpoint",
            "missing.fmrn",
            "--input",
            "ds/seq0000.mseq",
            "--horizon",
            "3",
        ],
    );
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn predict_reports_skeleton_mismatch() {
    let dir = workspace();
    let o = freqmrn(dir.path(), &["--config", "run.toml", "--out", "run", "train"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = freqmrn(dir.path(), &["--out", "h36m", "gen-synth", "--count", "1"]);
    assert!(o.status.success());
    std::fs::write(
        dir.path().join("h.toml"),
        "[synth]\nskeleton = \"h36m\"\ncount = 1\nframes = 30\n",
    )
    .unwrap();
    let o = freqmrn(dir.path(), &["--config", "h.toml", "--out", "h36m", "gen-synth"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = freqmrn(
        dir.path(),
        &[
            "predict",
            "--checkpoint",
            "run/checkpoint.fmrn",
            "--input",
            "h36m/seq0000.mseq",
            "--horizon",
            "3",
        ],
    );
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("skeleton mismatch"), "{err}");
}

#[test]
fn overfit_config_trains_below_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let config = r#"
seed = 0

[data]
train_dir = "ds"

[model]
history = 20
query = 5
future = 5
stages = 2
residual_pairs = 1
latent = 32

[train]
epochs = 10
batch_size = 4
lr = 0.005
lr_decay = 0.97
val_fraction = 0.0

[synth]
count = 8
frames = 40
"#;
    std::fs::write(dir.path().join("overfit.toml"), config).unwrap();
    let o = freqmrn(dir.path(), &["--config", "overfit.toml", "--out", "ds", "gen-synth"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = freqmrn(dir.path(), &["--config", "overfit.toml", "--out", "run", "train"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = std::fs::read_to_string(dir.path().join("run/metrics.jsonl")).unwrap();
    let last: serde_json::Value = serde_json::from_str(metrics.lines().last().unwrap()).unwrap();
    let mpjpe = last["train_mpjpe"].as_f64().unwrap();
    assert!(mpjpe < 5.0, "final train MPJPE {mpjpe}");
}

#[test]
fn predict_is_deterministic_and_single_pass_at_horizon_f() {
    let dir = workspace();
    let o = freqmrn(dir.path(), &["--config", "run.toml", "--out", "run", "train"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = |name: &str| {
        let o = freqmrn(
            dir.path(),
            &[
                "predict",
                "--checkpoint",
                "run/checkpoint.fmrn",
                "--input",
                "ds/seq0001.mseq",
                "--horizon",
                "5",
                "--output",
                name,
            ],
        );
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).contains("(1 refinement passes)"), "{}", stdout(&o));
        std::fs::read(dir.path().join(name)).unwrap()
    };
    let (a, b) = (run("p/a.mseq"), run("p/b.mseq"));
    assert_eq!(a, b);
    assert_eq!(read_sequence(dir.path().join("p/a.mseq")).unwrap().frames(), 5);
    assert!(dir.path().join("p/config.toml").exists());
}

#[test]
fn eval_record_round_trips_and_has_one_column_per_time() {
    let dir = workspace();
    let o = freqmrn(dir.path(), &["--config", "run.toml", "--out", "run", "train"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = freqmrn(
        dir.path(),
        &[
            "--config",
            "run.toml",
            "--out",
            "ev",
            "eval",
            "--checkpoint",
            "run/checkpoint.fmrn",
            "--data",
            "ds",
            "--frames-ms",
            "40,80,120,200",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let header = stdout(&o).lines().next().unwrap().to_string();
    assert_eq!(header.matches("ms").count(), 4, "{header}");
    let text = std::fs::read_to_string(dir.path().join("ev/eval.json")).unwrap();
    let record: serde_json::Value = serde_json::from_str(&text).unwrap();
    let table: freqmrn::trainer::EvalTable = serde_json::from_value(record["table"].clone()).unwrap();
    assert_eq!(table.overall.len(), 4);
    assert_eq!(serde_json::to_value(&table).unwrap(), record["table"]);
}

#[test]
fn gen_synth_reports_unwritable_path() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("blocker"), "not a directory").unwrap();
    let o = freqmrn(dir.path(), &["--out", "blocker/ds", "gen-synth", "--count", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("blocker/ds"), "{}", stderr(&o));
}
