use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

const RUN: &str = r#"[model]
variant = "aila2"
num_layers = 2
hidden = 6

[train]
epochs = 2
batch_size = 16
seeds = [3]

[data]
kind = "long_memory"
num_examples = 60
window = 5
lag = 2
"#;

fn aila(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aila"))
        .args(args)
        .current_dir(cwd)
        .env_remove("AILA_OUTPUT_ROOT")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn setup(config: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    fs::write(&path, config).unwrap();
    (dir, path)
}

fn summary_record(run_dir: &Path) -> serde_json::Value {
    let text = fs::read_to_string(run_dir.join("report.jsonl")).unwrap();
    let last = text.lines().last().unwrap();
    let v: serde_json::Value = serde_json::from_str(last).unwrap();
    assert_eq!(v["record"], "summary");
    v
}

#[test]
fn train_writes_a_complete_run_directory() {
    let (tmp, _) = setup(RUN);
    let o = aila(&["train", "run.toml", "--out", "out", "--run-name", "a"], tmp.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let run = tmp.path().join("out/a");
    for f in ["config.toml", "summary.json", "seed-3/report.jsonl", "seed-3/timings.json", "seed-3/model.ckpt"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let v = summary_record(&run.join("seed-3"));
    assert_eq!(v["schema_version"], 1);
    assert_eq!(v["seed"], 3);

    // The config echo alone reproduces the run.
    let o = aila(&["train", "out/a/config.toml", "--out", "out", "--run-name", "b"], tmp.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let a = fs::read(run.join("seed-3/model.ckpt")).unwrap();
    let b = fs::read(tmp.path().join("out/b/seed-3/model.ckpt")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn same_config_and_seed_give_identical_files() {
    let (tmp, _) = setup(RUN);
    for name in ["x", "y"] {
        let o = aila(&["train", "run.toml", "--out", "out", "--run-name", name, "--seed", "11"], tmp.path());
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for f in ["model.ckpt", "report.jsonl"] {
        let x = fs::read(tmp.path().join("out/x/seed-11").join(f)).unwrap();
        let y = fs::read(tmp.path().join("out/y/seed-11").join(f)).unwrap();
        assert_eq!(x, y, "{f} differs");
    }
}

#[test]
fn timestamped_directories_never_collide() {
    let (tmp, _) = setup(RUN);
    for _ in 0..2 {
        let o = aila(&["train", "run.toml", "--out", "out"], tmp.path());
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let mut names: Vec<String> = fs::read_dir(tmp.path().join("out"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names.len(), 2);
    assert!(names.iter().all(|n| n.starts_with("run-")), "{names:?}");
}

#[test]
fn existing_run_name_needs_overwrite() {
    let (tmp, _) = setup(RUN);
    let args = ["train", "run.toml", "--out", "out", "--run-name", "r"];
    assert_eq!(code(&aila(&args, tmp.path())), 0);
    let o = aila(&args, tmp.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--overwrite"));
    let mut with = args.to_vec();
    with.push("--overwrite");
    assert_eq!(code(&aila(&with, tmp.path())), 0);
}

#[test]
fn output_root_precedence() {
    let config = format!("{RUN}\n[output]\ndir = \"from-config\"\n");
    let (tmp, _) = setup(&config);
    let run = |extra: &[&str], env: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_aila"));
        cmd.args(["train", "run.toml", "--run-name", "r", "--overwrite"])
            .args(extra)
            .current_dir(tmp.path())
            .env_remove("AILA_OUTPUT_ROOT");
        if let Some(v) = env {
            cmd.env("AILA_OUTPUT_ROOT", v);
        }
        assert!(cmd.output().unwrap().status.success());
    };
    run(&[], None);
    assert!(tmp.path().join("from-config/r").is_dir());
    run(&[], Some("from-env"));
    assert!(tmp.path().join("from-env/r").is_dir());
    run(&["--out", "from-flag"], Some("from-env"));
    assert!(tmp.path().join("from-flag/r").is_dir());
}

#[test]
fn config_errors_name_key_and_line() {
    let (tmp, _) = setup(&RUN.replace("[model]", "[modle]"));
    let o = aila(&["train", "run.toml"], tmp.path());
    assert_eq!(code(&o), 3);
    let err = stderr(&o);
    assert!(err.contains("modle") && err.contains("line 1"), "{err}");

    let (tmp, _) = setup(&RUN.replace("hidden = 6", "hidden = 6\nwidht = 2"));
    let o = aila(&["train", "run.toml"], tmp.path());
    assert_eq!(code(&o), 3);
    let err = stderr(&o);
    assert!(err.contains("widht") && err.contains("line 5"), "{err}");

    let (tmp, _) = setup(&RUN.replace("hidden = 6", "hidden = 6\nheads = 4"));
    assert_eq!(code(&aila(&["train", "run.toml"], tmp.path())), 3);
}

#[test]
fn missing_files_and_divergence_have_their_own_codes() {
    let (tmp, _) = setup(RUN);
    assert_eq!(code(&aila(&["train", "nope.toml"], tmp.path())), 4);
    let o = aila(&["train", "run.toml", "--out", "out", "--lr", "1e200"], tmp.path());
    assert_eq!(code(&o), 6, "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"));
    assert_eq!(code(&aila(&["train", "run.toml", "--epochs", "0"], tmp.path())), 3);
    assert_eq!(code(&aila(&["frobnicate"], tmp.path())), 2);
}

#[test]
fn eval_reproduces_the_report_and_knocks_out_layers() {
    let (tmp, _) = setup(RUN);
    assert_eq!(code(&aila(&["train", "run.toml", "--out", "out", "--run-name", "a"], tmp.path())), 0);
    let ckpt = "out/a/seed-3/model.ckpt";
    let report = summary_record(&tmp.path().join("out/a/seed-3"));

    let o = aila(&["eval", ckpt, "--data", "run.toml"], tmp.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rec: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    let (got, want) = (rec["value"].as_f64().unwrap(), report["test_metric"]["value"].as_f64().unwrap());
    assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
    assert!(rec["knockout"].is_null());

    let o = aila(&["eval", ckpt, "--data", "run.toml", "--knockout", "all"], tmp.path());
    assert_eq!(code(&o), 0);
    let layers: Vec<u64> = stdout(&o)
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["knockout"].as_u64().unwrap())
        .collect();
    assert_eq!(layers, vec![1, 2]);

    let o = aila(&["eval", ckpt, "--data", "run.toml", "--knockout", "2"], tmp.path());
    assert_eq!(stdout(&o).lines().count(), 1);
    assert_eq!(code(&aila(&["eval", ckpt, "--data", "run.toml", "--knockout", "0"], tmp.path())), 2);
    assert_eq!(code(&aila(&["eval", ckpt, "--data", "run.toml", "--knockout", "3"], tmp.path())), 2);
}

#[test]
fn eval_reports_shape_diff_on_mismatch() {
    let (tmp, _) = setup(RUN);
    assert_eq!(code(&aila(&["train", "run.toml", "--out", "out", "--run-name", "a"], tmp.path())), 0);
    fs::write(tmp.path().join("wide.toml"), RUN.replace("hidden = 6", "hidden = 8")).unwrap();
    let o = aila(&["eval", "out/a/seed-3/model.ckpt", "--data", "wide.toml"], tmp.path());
    assert_eq!(code(&o), 7);
    assert!(stderr(&o).contains("layer1.ln.gain: expected [8], found [6]"), "{}", stderr(&o));
    assert_eq!(code(&aila(&["eval", "missing.ckpt", "--data", "run.toml"], tmp.path())), 4);
}

#[test]
fn ablate_writes_one_directory_per_cell() {
    let plan = format!("{RUN}\n[ablation]\naxis = \"knockout\"\nvalues = [1, 2]\n");
    let (tmp, _) = setup(&plan);
    let o = aila(&["ablate", "run.toml", "--out", "out", "--run-name", "p"], tmp.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let dir = tmp.path().join("out/p");
    for cell in ["base", "knockout=1", "knockout=2"] {
        assert!(dir.join(cell).is_dir(), "missing {cell}");
    }
    for f in ["ablation_report.json", "summary.txt", "config.toml"] {
        assert!(dir.join(f).is_file(), "missing {f}");
    }
    assert!(stdout(&o).contains("knockout=2"));

    let depth = format!("{RUN}\n[ablation]\naxis = \"depth\"\nvalues = [1, 3]\n");
    fs::write(tmp.path().join("depth.toml"), depth).unwrap();
    let o = aila(&["ablate", "depth.toml", "--out", "out", "--run-name", "d"], tmp.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for cell in ["base", "depth=1", "depth=3"] {
        assert!(tmp.path().join("out/d").join(cell).join("seed-3/model.ckpt").is_file(), "missing {cell}");
    }
}

#[test]
fn ablate_rejects_empty_values() {
    let plan = format!("{RUN}\n[ablation]\naxis = \"depth\"\nvalues = []\n");
    let (tmp, _) = setup(&plan);
    let o = aila(&["ablate", "run.toml", "--out", "out"], tmp.path());
    assert_eq!(code(&o), 3);
    assert!(!tmp.path().join("out").exists() || fs::read_dir(tmp.path().join("out")).unwrap().count() == 0);
}

#[test]
fn gradcheck_small_passes_quickly() {
    let tmp = tempfile::tempdir().unwrap();
    let started = Instant::now();
    let o = aila(&["gradcheck", "--scale", "small"], tmp.path());
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(started.elapsed().as_secs_f64() < 60.0);
    let out = stdout(&o);
    assert!(out.contains("model aila1 N=2 d=4 H=2") && out.contains("max relative error over op checks"));
    assert!(!out.contains("FAIL"));
}

#[test]
fn compare_checks_parameter_ordering() {
    let (tmp, _) = setup(RUN);
    let o = aila(&["compare", "run.toml", "--out", "out", "--run-name", "c", "--epochs", "1"], tmp.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("parameter ordering plain <= residual_sum < aila1, aila2: ok"), "{out}");
    for v in ["aila1", "aila2", "plain", "residual_sum", "dense_concat"] {
        assert!(out.contains(&format!("variant={v}")));
        assert!(tmp.path().join("out/c").join(format!("variant={v}")).is_dir());
    }
}

#[test]
fn csv_data_resolves_relative_to_the_config() {
    let tmp = tempfile::tempdir().unwrap();
    let data_dir = tmp.path().join("cfg");
    fs::create_dir(&data_dir).unwrap();
    let mut csv = String::from("date,close\n");
    for i in 0..80 {
        let day = chrono::NaiveDate::from_ymd_opt(2020, 1, 1).unwrap() + chrono::Days::new(i);
        csv.push_str(&format!("{day},{}\n", 100.0 + (i as f64 * 0.3).sin() * 5.0 + i as f64 * 0.1));
    }
    fs::write(data_dir.join("prices.csv"), csv).unwrap();
    let config = RUN.replace(
        "[data]\nkind = \"long_memory\"\nnum_examples = 60\nwindow = 5\nlag = 2\n",
        "[data]\nkind = \"csv\"\npath = \"prices.csv\"\ncache = \"prices.cache\"\nvalue_column = \"close\"\nwindow = 6\nhorizon = 1\n",
    );
    fs::write(data_dir.join("run.toml"), config).unwrap();
    let o = aila(&["train", "cfg/run.toml", "--out", "out", "--run-name", "csv"], tmp.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(data_dir.join("prices.cache").is_file());
    // Second run reads the cache and sees the same data.
    let o2 = aila(&["train", "cfg/run.toml", "--out", "out", "--run-name", "csv2"], tmp.path());
    assert_eq!(code(&o2), 0, "{}", stderr(&o2));
    let fp = |name: &str| summary_record(&tmp.path().join("out").join(name).join("seed-3"))["dataset_fingerprint"].clone();
    assert_eq!(fp("csv"), fp("csv2"));
}
