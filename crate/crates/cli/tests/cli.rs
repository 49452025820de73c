use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn sedtk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sedtk"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

const OVERFIT_CONFIG: &str = "\
[train]
learning_rate = 0.003
max_epochs = 400
patience = 400
sequence_length = 32

[model]
dropout = 0.0

[corpus]
n_sequences = 4
frames = 32
split = [0.5, 0.25, 0.25]
";

#[test]
fn generate_is_reproducible_and_lists_split_counts() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = sedtk(&["generate", "--kind", "structured", "--out", s(out), "--seed", "7"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(tree(&a), tree(&b));
    let manifest = fs::read_to_string(a.join("manifest.tsv")).unwrap();
    assert!(manifest.contains("# counts train=60 val=20 test=20"), "{manifest}");
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = sedtk(&["generate", "--kind", "melodic", "--out", s(dir.path()), "--seed", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("melodic"));

    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let o = sedtk(&["generate", "--kind", "structured", "--out", s(&blocker.join("sub")), "--seed", "1"]);
    assert_eq!(o.status.code(), Some(2));

    let o = sedtk(&["eval", "--checkpoint", s(&dir.path().join("none.ckpt")), "--data", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));

    let o = sedtk(&["schedule", "--pmin", "0.8", "--pmax", "0.2"]);
    assert_eq!(o.status.code(), Some(2));

    let o = sedtk(&["ab", "--seeds", "2", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));

    let o = sedtk(&["train", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn schedule_curve_starts_at_p_max_and_decays() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("curve.txt");
    let o = sedtk(&["schedule", "--gamma", "0.0833333333333333", "--nb", "44", "--updates", "4400", "--out", s(&out)]);
    assert!(o.status.success());
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().next(), Some("0 0.9"));
    let values: Vec<f64> = text
        .lines()
        .map(|l| l.split(' ').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(values.len(), 4401);
    assert!(values.windows(2).all(|w| w[1] <= w[0]));
    // One epoch is 44 updates: still near the top after 25 epochs, at the floor by 100.
    assert!(values[25 * 44] > 0.2 && values[25 * 44] < 0.9);
    assert!((values[4400] - 0.05).abs() < 1e-12);

    let o = sedtk(&["schedule", "--updates", "3"]);
    assert_eq!(String::from_utf8_lossy(&o.stdout).lines().next(), Some("0 0.9"));
}

#[test]
fn help_documents_the_default_configuration() {
    let o = sedtk(&["--help"]);
    let text = String::from_utf8_lossy(&o.stdout);
    for key in ["learning_rate = 0.001", "batch_size = 8", "patience = 50", "p_max = 0.9", "noise_level"] {
        assert!(text.contains(key), "missing {key}");
    }
}

#[test]
fn train_then_eval_memorizes_a_tiny_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("overfit.toml");
    fs::write(&config, OVERFIT_CONFIG).unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let o = sedtk(&["generate", "--kind", "structured", "--out", s(&data), "--seed", "3", "--config", s(&config)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = sedtk(&["train", "--config", s(&config), "--data", s(&data), "--out", s(&run), "--lr", "5e-4", "--clip", "0.5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let log = fs::read_to_string(run.join("training.log")).unwrap();
    let header: Vec<&str> = log.lines().take_while(|l| l.starts_with('#')).collect();
    assert!(header.iter().any(|l| l.contains("learning_rate=0.0005") && l.contains("grad_clip=0.5")), "{header:?}");

    let o = sedtk(&["train", "--config", s(&config), "--data", s(&data), "--out", s(&run)]);
    assert!(o.status.success());
    let o = sedtk(&["eval", "--checkpoint", s(&run.join("best.ckpt")), "--data", s(&data), "--split", "train"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = String::from_utf8_lossy(&o.stdout);
    let f1: f64 = report
        .lines()
        .find_map(|l| l.strip_prefix("f1="))
        .expect("f1 line")
        .parse()
        .unwrap();
    assert!(f1 > 0.95, "{report}");
    assert!(report.contains("er=") && report.contains("tp="));

    // A six-class checkpoint against a three-class model configuration.
    let mismatched = dir.path().join("three.toml");
    fs::write(&mismatched, "[model]\nn_classes = 3\n").unwrap();
    let o = sedtk(&[
        "eval",
        "--checkpoint",
        s(&run.join("best.ckpt")),
        "--data",
        s(&data),
        "--config",
        s(&mismatched),
    ]);
    assert_eq!(o.status.code(), Some(2));
}
