use std::path::{Path, PathBuf};
use std::sync::Mutex;

use medoe::cli::{run, DirLock};
use medoe::formats::{read_checkpoint, read_dataset};

// Commands read MEDOE_SEED, so runs in this file are serialized.
static ENV: Mutex<()> = Mutex::new(());

const SMALL: [&str; 7] = [
    "height=24",
    "width=24",
    "train_scenes=6",
    "test_scenes=3",
    "iters=8",
    "moe_iters=8",
    "seed=2",
];

fn medoe(args: &[&str]) -> i32 {
    let mut v = vec!["medoe".to_string()];
    v.extend(args.iter().map(|s| s.to_string()));
    run(v)
}

fn small(args: &[&str]) -> i32 {
    let mut v: Vec<&str> = args.to_vec();
    for s in SMALL {
        v.push("--set");
        v.push(s);
    }
    medoe(&v)
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

struct Workspace {
    _tmp: tempfile::TempDir,
    dir: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().to_path_buf();
        Workspace { _tmp: tmp, dir }
    }

    fn p(&self, name: &str) -> String {
        s(&self.dir.join(name))
    }

    fn trained(&self) {
        assert_eq!(small(&["gen", "--split", "train", "--out", &self.p("train.meds")]), 0);
        assert_eq!(small(&["gen", "--split", "test", "--out", &self.p("test.meds")]), 0);
        assert_eq!(small(&["train", "--data", &self.p("train.meds"), "--out", &self.p("m.medc")]), 0);
    }
}

#[test]
fn usage_and_validation_errors_exit_1() {
    let _g = ENV.lock().unwrap();
    let ws = Workspace::new();
    assert_eq!(medoe(&["frobnicate"]), 1);
    assert_eq!(medoe(&["gen", "--out", &ws.p("x.meds"), "--set", "no_such_key=1"]), 1);
    assert_eq!(medoe(&["gen", "--out", &ws.p("x.meds"), "--set", "iters=0"]), 1);
    assert_eq!(medoe(&["gen", "--out", &ws.p("x.meds"), "--split", "validation"]), 1);
    assert!(!ws.dir.join("x.meds").exists());
}

#[test]
fn missing_input_exits_3() {
    let _g = ENV.lock().unwrap();
    let ws = Workspace::new();
    assert_eq!(small(&["train", "--data", &ws.p("absent.meds"), "--out", &ws.p("m.medc")]), 3);
    assert_eq!(small(&["freq", "--data", &ws.p("absent.meds")]), 3);
}

#[test]
fn held_lock_exits_3() {
    let _g = ENV.lock().unwrap();
    let ws = Workspace::new();
    let lock = DirLock::acquire(&ws.dir).unwrap();
    assert_eq!(small(&["gen", "--out", &ws.p("train.meds")]), 3);
    drop(lock);
    assert!(!ws.dir.join(DirLock::FILE).exists());
    assert_eq!(small(&["gen", "--out", &ws.p("train.meds")]), 0);
    assert!(!ws.dir.join(DirLock::FILE).exists());
}

#[test]
fn seed_from_environment_and_override() {
    let _g = ENV.lock().unwrap();
    let ws = Workspace::new();
    std::env::set_var("MEDOE_SEED", "9");
    let env_code = medoe(&["gen", "--out", &ws.p("a.meds"), "--set", "train_scenes=2", "--set", "height=24", "--set", "width=24"]);
    let set_code = small(&["gen", "--out", &ws.p("b.meds")]);
    std::env::set_var("MEDOE_SEED", "not-a-number");
    let bad_code = medoe(&["gen", "--out", &ws.p("c.meds")]);
    std::env::remove_var("MEDOE_SEED");
    assert_eq!((env_code, set_code, bad_code), (0, 0, 1));
    assert_eq!(read_dataset(&ws.dir.join("a.meds")).unwrap().seed, 9);
    assert_eq!(read_dataset(&ws.dir.join("b.meds")).unwrap().seed, 2);
}

#[test]
fn full_pipeline_and_error_paths() {
    let _g = ENV.lock().unwrap();
    let ws = Workspace::new();
    ws.trained();
    assert!(ws.dir.join("m.medc.trace.csv").exists());
    assert_eq!(small(&["freq", "--data", &ws.p("train.meds")]), 0);

    // The moe combiner needs a calibrated checkpoint.
    let eval = |combiner: &str, out: &str| {
        small(&["eval", "--data", &ws.p("test.meds"), "--checkpoint", &ws.p("m.medc"), "--combiner", combiner, "--out-dir", &ws.p(out)])
    };
    assert_eq!(eval("moe", "e0"), 1);
    assert_eq!(eval("oracle", "e0"), 0);
    assert_eq!(eval("single:4", "e0"), 1);

    assert_eq!(small(&["train-moe", "--data", &ws.p("train.meds"), "--checkpoint", &ws.p("m.medc")]), 0);
    assert!(read_checkpoint(&ws.dir.join("m.medc")).unwrap().calibration.is_some());
    for (i, c) in ["moe", "uniform-avg", "softmax", "argmax", "group-avg", "single:1", "single:3"].iter().enumerate() {
        assert_eq!(eval(c, &format!("e{}", i + 1)), 0, "{c}");
    }
    for f in ["report.json", "confusion.csv", "plot.csv"] {
        assert!(ws.dir.join("e1").join(f).exists());
    }
    assert_eq!(
        small(&[
            "eval", "--data", &ws.p("test.meds"), "--checkpoint", &ws.p("m.medc"), "--distribution", "uniform",
            "--out-dir", &ws.p("u"), "--dump-probs", &ws.p("p.medp"),
        ]),
        0
    );
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(ws.dir.join("u/report.json")).unwrap()).unwrap();
    let counts: Vec<u64> = report["per_category"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["gt_count"].as_u64().unwrap())
        .filter(|&n| n > 0)
        .collect();
    assert!(counts.windows(2).all(|w| w[0] == w[1]));
    assert!(ws.dir.join("p.medp").exists());

    assert_eq!(medoe(&["diag", "--baseline", &ws.p("e6/report.json"), "--improved", &ws.p("e1/report.json"), "--out", &ws.p("d.json")]), 0);
    std::fs::write(ws.dir.join("bare.json"), "{\"overall\": {}}").unwrap();
    assert_eq!(medoe(&["diag", "--baseline", &ws.p("bare.json"), "--improved", &ws.p("e1/report.json")]), 3);

    assert_eq!(small(&["train", "--data", &ws.p("train.meds"), "--out", &ws.p("m2.medc"), "--set", "seed=3"]), 0);
    assert_eq!(
        small(&[
            "bias", "--data", &ws.p("test.meds"), "--checkpoint", &ws.p("m.medc"), "--checkpoint", &ws.p("m2.medc"),
            "--combiner", "oracle", "--out", &ws.p("bias.json"),
        ]),
        0
    );
    assert_eq!(small(&["bias", "--data", &ws.p("test.meds"), "--checkpoint", &ws.p("m.medc")]), 1);
}

#[test]
fn divergence_exits_2() {
    let _g = ENV.lock().unwrap();
    let ws = Workspace::new();
    assert_eq!(small(&["gen", "--out", &ws.p("train.meds")]), 0);
    assert_eq!(small(&["train", "--data", &ws.p("train.meds"), "--out", &ws.p("m.medc"), "--set", "lr=1e300"]), 2);
    assert!(!ws.dir.join("m.medc").exists());
}

#[test]
fn report_writes_every_combiner() {
    let _g = ENV.lock().unwrap();
    let ws = Workspace::new();
    assert_eq!(small(&["report", "--out-dir", &ws.p("run")]), 0);
    for f in ["config.txt", "train.meds", "test.meds", "model.medc", "model.trace.csv", "eval-moe/report.json", "eval-oracle/report.json", "eval-single1/report.json"] {
        assert!(ws.dir.join("run").join(f).exists(), "{f}");
    }
    let text = std::fs::read_to_string(ws.dir.join("run/config.txt")).unwrap();
    assert!(text.contains("seed = 2") || text.contains("seed=2"));
}
