use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use hesam_phantom::load_dataset;

fn hesam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hesam")).args(args).output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn phantom_is_seeded_and_prints_its_config() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = hesam(&["phantom", "--out", p(out), "--n-train", "4", "--n-test", "2", "--channels", "3", "--seed", "9"]);
        assert!(o.status.success());
        let text = stdout(&o);
        assert!(text.contains("\"command\":\"phantom\""));
        assert!(text.contains("seed=9"));
    }
    for f in ["train.nodv", "test.nodv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
    }
    let train = load_dataset(&a.join("train.nodv")).unwrap();
    assert_eq!(train.len(), 4);
    assert_eq!(train[0].volume.shape(), &[3, 32, 32]);
    assert_eq!(load_dataset(&a.join("test.nodv")).unwrap().len(), 2);
}

#[test]
fn default_phantom_counts() {
    let dir = tempfile::tempdir().unwrap();
    let o = hesam(&["phantom", "--out", p(dir.path()), "--channels", "1"]);
    assert!(o.status.success());
    let train = load_dataset(&dir.path().join("train.nodv")).unwrap();
    let test = load_dataset(&dir.path().join("test.nodv")).unwrap();
    assert_eq!((train.len(), test.len()), (916, 229));
    assert_eq!(test[0].volume.shape(), &[1, 32, 32]);
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(hesam(&["phantom", "--out", "x", "--bogus"]).status.code(), Some(2));
    assert_eq!(hesam(&["nonsense"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let o = hesam(&["phantom", "--out", p(dir.path()), "--channels", "5"]);
    assert_eq!(o.status.code(), Some(2));
    let o = hesam(&["ablate", "--grid", "table3", "--channels", "7"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn data_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.nodv");
    let o = hesam(&["eval", "--model", p(&missing), "--data", p(&missing)]);
    assert_eq!(o.status.code(), Some(3));
    let junk = dir.path().join("junk.nodv");
    fs::write(&junk, b"not a dataset").unwrap();
    let o = hesam(&["train", "--train", p(&junk), "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(3));
    let nums = dir.path().join("n.txt");
    fs::write(&nums, "0.1 x").unwrap();
    assert_eq!(hesam(&["stats", "--a", p(&nums), "--b", p(&nums)]).status.code(), Some(3));
}

#[test]
fn gradcheck_exit_codes() {
    let o = hesam(&["gradcheck", "--skip-model", "--instances", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let o = hesam(&["gradcheck", "--skip-model", "--instances", "1", "--tol", "1e-20"]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn stats_reports_statistic_and_degenerate_input() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.txt"), dir.path().join("b.txt"));
    fs::write(&a, "0.9 0.8\n0.7").unwrap();
    fs::write(&b, "0.1 0.2 0.3\n").unwrap();
    let o = hesam(&["stats", "--a", p(&a), "--b", p(&b)]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("n=3 w_plus=6 w_minus=0"), "{text}");
    assert!(text.contains("p_value=2.500000e-1"), "{text}");
    let o = hesam(&["stats", "--a", p(&a), "--b", p(&a)]);
    assert!(stdout(&o).contains("p_value=undefined"));
}

#[test]
fn train_eval_map_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    assert!(hesam(&["phantom", "--out", p(&data), "--n-train", "4", "--n-test", "3", "--channels", "1"])
        .status
        .success());
    let o = hesam(&[
        "train",
        "--train",
        p(&data.join("train.nodv")),
        "--test",
        p(&data.join("test.nodv")),
        "--out",
        p(&run),
        "--head",
        "sam",
        "--epochs",
        "1",
        "--batch-size",
        "2",
        "--seed",
        "4",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["model.hsmd", "checkpoint.nack", "record.json", "epochs.jsonl"] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert_eq!(fs::read_to_string(run.join("epochs.jsonl")).unwrap().lines().count(), 1);

    let probs = dir.path().join("p.txt");
    let o = hesam(&["eval", "--model", p(&run.join("model.hsmd")), "--data", p(&data.join("test.nodv")), "--probs-out", p(&probs)]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("accuracy="));
    assert_eq!(fs::read_to_string(&probs).unwrap().split_whitespace().count(), 3);

    let maps = dir.path().join("maps");
    let o = hesam(&[
        "map",
        "--model",
        p(&run.join("model.hsmd")),
        "--data",
        p(&data.join("test.nodv")),
        "--method",
        "sam",
        "--class",
        "1",
        "--out",
        p(&maps),
    ]);
    assert!(o.status.success());
    let mut names: Vec<String> = fs::read_dir(&maps)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["0_sam_1.pgm", "1_sam_1.pgm", "2_sam_1.pgm"]);
    let bytes = fs::read(maps.join("0_sam_1.pgm")).unwrap();
    assert!(bytes.starts_with(b"P5\n32 32\n255\n"));
    assert_eq!(bytes.len(), 13 + 32 * 32);

    // A SAM model has no HESAM maps.
    let o = hesam(&[
        "map",
        "--model",
        p(&run.join("model.hsmd")),
        "--data",
        p(&data.join("test.nodv")),
        "--method",
        "hesam",
        "--out",
        p(&maps),
    ]);
    assert_eq!(o.status.code(), Some(2));
}
