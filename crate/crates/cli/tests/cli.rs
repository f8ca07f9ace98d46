use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;
use voxseg::data::{load_labels, nifti, vox};

const SMOKE: &str = include_str!("../../../configs/smoke.toml");

fn voxseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_voxseg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

/// A finished smoke run and a 10-case synthetic dataset at the same grid.
struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn run(&self) -> PathBuf {
        self.dir.path().join("run")
    }

    fn data(&self) -> PathBuf {
        self.dir.path().join("data")
    }

    fn manifest(&self) -> PathBuf {
        self.data().join("manifest.json")
    }

    fn best(&self) -> PathBuf {
        self.run().join("checkpoint_best.ckpt")
    }
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let f = Fixture {
            dir: tempfile::tempdir().unwrap(),
        };
        let config = write_config(f.dir.path(), "smoke.toml", SMOKE);
        let out = voxseg(&["train", "--config", s(&config), "--out-dir", s(&f.run())]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let out = voxseg(&[
            "synth", "--out-dir", s(&f.data()), "--n", "10", "--seed", "3", "--dims", "16,16,16",
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        f
    })
}

fn history_lines(run: &Path) -> Vec<String> {
    fs::read_to_string(run.join("history.jsonl"))
        .unwrap()
        .lines()
        .map(str::to_string)
        .collect()
}

#[test]
fn missing_config_field_exits_2_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let text: String = SMOKE
        .lines()
        .filter(|l| !l.starts_with("plateau_patience"))
        .map(|l| format!("{l}\n"))
        .collect();
    let config = write_config(dir.path(), "c.toml", &text);
    let out = voxseg(&["train", "--config", s(&config), "--out-dir", s(&dir.path().join("o"))]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("plateau_patience"), "{}", stderr(&out));

    let config = write_config(dir.path(), "d.toml", &format!("{SMOKE}\n[extra]\nkey = 1\n"));
    let out = voxseg(&["train", "--config", s(&config), "--out-dir", s(&dir.path().join("o"))]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("extra"), "{}", stderr(&out));

    let out = voxseg(&["train", "--config", s(&dir.path().join("absent.toml")), "--out-dir", "x"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn fold_out_of_range_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "c.toml", SMOKE);
    let out = voxseg(&["train", "--config", s(&config), "--out-dir", s(&dir.path().join("o")), "--fold", "9"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("0..=8"), "{}", stderr(&out));
}

#[test]
fn smoke_run_writes_five_records_and_a_manifest() {
    let f = fixture();
    let lines = history_lines(&f.run());
    assert_eq!(lines.len(), 5);
    for (i, line) in lines.iter().enumerate() {
        let rec: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(rec["epoch"], i);
        assert_eq!(rec["lr"], 5e-4);
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(f.run().join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["rng_algorithm"], voxseg::rng::RNG_ALGORITHM);
    assert_eq!(manifest["config"]["train"]["epochs"], 5);
    assert_eq!(manifest["split"]["folds"].as_array().unwrap().len(), 9);
    assert_eq!(manifest["labels"][1]["name"], "head");
    for name in ["checkpoint_last.ckpt", "checkpoint_best.ckpt", "val_metrics.jsonl"] {
        assert!(f.run().join(name).exists(), "{name}");
    }
    assert!(!f.run().join(".voxseg.lock").exists());
}

#[test]
fn identical_runs_are_byte_identical() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "c.toml", SMOKE);
    let again = dir.path().join("again");
    let out = voxseg(&["train", "--config", s(&config), "--out-dir", s(&again)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for name in ["history.jsonl", "checkpoint_last.ckpt", "checkpoint_best.ckpt", "run_manifest.json"] {
        assert!(fs::read(f.run().join(name)).unwrap() == fs::read(again.join(name)).unwrap(), "{name} differs");
    }
}

#[test]
fn resuming_reproduces_the_uninterrupted_history() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let short = write_config(dir.path(), "short.toml", &SMOKE.replace("epochs = 5", "epochs = 3"));
    let full = write_config(dir.path(), "full.toml", SMOKE);
    let first = dir.path().join("first");
    let out = voxseg(&["train", "--config", s(&short), "--out-dir", s(&first)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(history_lines(&first).len(), 3);
    let out = voxseg(&[
        "train",
        "--config",
        s(&full),
        "--out-dir",
        s(&first),
        "--checkpoint",
        s(&first.join("checkpoint_last.ckpt")),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(history_lines(&first), history_lines(&f.run()));
    assert!(fs::read(first.join("checkpoint_last.ckpt")).unwrap() == fs::read(f.run().join("checkpoint_last.ckpt")).unwrap());
}

#[test]
fn empty_case_list_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_config(dir.path(), "empty.json", "{\"cases\": []}");
    let out = voxseg(&[
        "eval",
        "--predictions-dir",
        s(dir.path()),
        "--data-manifest",
        s(&manifest),
        "--out-dir",
        s(&dir.path().join("e")),
    ]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    let config = write_config(dir.path(), "c.toml", SMOKE);
    let out = voxseg(&[
        "train",
        "--config",
        s(&config),
        "--data-manifest",
        s(&manifest),
        "--out-dir",
        s(&dir.path().join("t")),
    ]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn predictions_equal_to_ground_truth_score_one() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = voxseg(&[
        "eval",
        "--predictions-dir",
        s(&f.data().join("labels")),
        "--data-manifest",
        s(&f.manifest()),
        "--out-dir",
        s(dir.path()),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 11);
    for case in &lines[..10] {
        for m in case["per_class"].as_object().unwrap().values().chain([&case["mean_foreground"]]) {
            assert_eq!((m["dsc"].as_f64(), m["ji"].as_f64(), m["nsd"].as_f64()), (Some(1.0), Some(1.0), Some(1.0)));
        }
    }
    assert_eq!(lines[10]["cases"], 10);
    assert_eq!(lines[10]["aggregate"]["dsc"], 1.0);
}

#[test]
fn predict_then_eval_reproduces_direct_eval() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let preds = dir.path().join("preds");
    let out = voxseg(&["predict", "--checkpoint", s(&f.best()), "--data-manifest", s(&f.manifest()), "--out-dir", s(&preds)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for entry in fs::read_dir(f.data().join("labels")).unwrap() {
        let gt = load_labels(&entry.unwrap().path()).unwrap();
        let pred = load_labels(&preds.join(format!("{}.vox", gt.id))).unwrap();
        assert_eq!((pred.dims, pred.spacing), (gt.dims, gt.spacing));
        assert!(pred.labels.iter().all(|&c| c <= 2));
    }
    let via_files = dir.path().join("a");
    let direct = dir.path().join("b");
    let out = voxseg(&[
        "eval",
        "--predictions-dir",
        s(&preds),
        "--data-manifest",
        s(&f.manifest()),
        "--out-dir",
        s(&via_files),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = voxseg(&["eval", "--checkpoint", s(&f.best()), "--data-manifest", s(&f.manifest()), "--out-dir", s(&direct)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(
        fs::read_to_string(via_files.join("metrics.jsonl")).unwrap(),
        fs::read_to_string(direct.join("metrics.jsonl")).unwrap()
    );
}

#[test]
fn architecture_mismatch_exits_5() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = voxseg(&[
        "eval",
        "--checkpoint",
        s(&f.best()),
        "--arch",
        "unet3d",
        "--data-manifest",
        s(&f.manifest()),
        "--out-dir",
        s(dir.path()),
    ]);
    assert_eq!(code(&out), 5, "{}", stderr(&out));
    let other = write_config(dir.path(), "c.toml", &SMOKE.replace("base_channels = 8", "base_channels = 4"));
    let out = voxseg(&["eval", "--checkpoint", s(&f.best()), "--config", s(&other), "--out-dir", s(&dir.path().join("e"))]);
    assert_eq!(code(&out), 5, "{}", stderr(&out));
}

#[test]
fn nifti_input_gets_a_nifti_output_with_its_geometry() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let dims = [20, 18, 17];
    let data: Vec<f32> = (0..dims.iter().product::<usize>()).map(|i| (i % 29) as f32 * 3.0).collect();
    let bytes = nifti::encode(dims, [1.5, 0.8, 1.1], nifti::Payload::F32(&data), None).unwrap();
    let input = dir.path().join("scan_7.nii.gz");
    nifti::write_file(&input, &bytes).unwrap();
    let out_dir = dir.path().join("out");
    let out = voxseg(&["predict", "--checkpoint", s(&f.best()), "--input", s(&input), "--out-dir", s(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let src = nifti::read_file(&input).unwrap();
    let pred = nifti::read_file(&out_dir.join("scan_7.nii.gz")).unwrap();
    assert_eq!((pred.dims, pred.spacing), (src.dims, src.spacing));
    assert_eq!(pred.header[40..70], src.header[40..70]);
    assert_eq!(pred.header[76..108], src.header[76..108]);
    assert_eq!(pred.header[252..344], src.header[252..344]);
    assert!(pred.data.iter().all(|&v| v == 0.0 || v == 1.0 || v == 2.0));
    let (meta, labels) = vox::read_file(&out_dir.join("scan_7.vox")).unwrap();
    assert_eq!(meta.dims, dims);
    assert_eq!(labels, pred.data);

    let out = voxseg(&[
        "predict",
        "--checkpoint",
        s(&f.best()),
        "--input",
        s(&dir.path().join("missing.vox")),
        "--out-dir",
        s(&dir.path().join("o2")),
    ]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for target in [&a, &b] {
        let out = voxseg(&["synth", "--n", "10", "--seed", "7", "--out-dir", s(target)]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let mut names: Vec<PathBuf> = Vec::new();
    for sub in ["images", "labels"] {
        for e in fs::read_dir(a.join(sub)).unwrap() {
            names.push(PathBuf::from(sub).join(e.unwrap().file_name()));
        }
    }
    names.push("manifest.json".into());
    assert_eq!(names.len(), 21);
    for n in &names {
        assert!(fs::read(a.join(n)).unwrap() == fs::read(b.join(n)).unwrap(), "{}", n.display());
    }
}

fn colours(dir: &Path) -> (usize, [usize; 3]) {
    let mut counts = [0; 3];
    let mut files = 0;
    for e in fs::read_dir(dir).unwrap() {
        let img = image::open(e.unwrap().path()).unwrap().to_rgb8();
        files += 1;
        for p in img.pixels() {
            match p.0 {
                [255, 0, 0] => counts[0] += 1,
                [0, 255, 255] => counts[1] += 1,
                [255, 255, 0] => counts[2] += 1,
                _ => {}
            }
        }
    }
    (files, counts)
}

#[test]
fn overlay_contours_coincide_when_prediction_equals_ground_truth() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let image = f.data().join("images/synth_000.vox");
    let gt = f.data().join("labels/synth_000.vox");
    let same = dir.path().join("same");
    let out = voxseg(&["overlay", "--image", s(&image), "--gt", s(&gt), "--pred", s(&gt), "--out-dir", s(&same)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let (files, [red, cyan, yellow]) = colours(&same);
    assert!(files > 0);
    assert_eq!((red, cyan), (0, 0));
    assert!(yellow > 0);

    let other = f.data().join("labels/synth_001.vox");
    let differ = dir.path().join("differ");
    let out = voxseg(&["overlay", "--image", s(&image), "--gt", s(&gt), "--pred", s(&other), "--out-dir", s(&differ)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let (_, [red, cyan, _]) = colours(&differ);
    assert!(red > 0 && cyan > 0);
}

#[test]
fn a_locked_output_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join(".voxseg.lock"), "1\n").unwrap();
    let out = voxseg(&["synth", "--n", "1", "--out-dir", s(dir.path())]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("in use"), "{}", stderr(&out));
    assert!(dir.path().join(".voxseg.lock").exists());
}

#[test]
fn quick_gradcheck_passes() {
    let out = voxseg(&["gradcheck", "--instances", "2", "--conv-configs", "8", "--nsd-pairs", "10"]);
    assert_eq!(code(&out), 0, "{}{}", String::from_utf8_lossy(&out.stdout), stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).contains("checks passed"));
}
