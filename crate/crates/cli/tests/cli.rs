use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "\
model.n_layers=3
model.share_threshold=1
model.d_model=16
model.n_heads=2
model.d_ff=32
model.vocab_size=256
codec.k_bins=64
train.steps=4
train.batch_size=2
data.gui_samples=8
data.robot_episodes=2
eval.episodes=3
analysis.layers=0,2
analysis.samples=2
";

struct Run {
    dir: tempfile::TempDir,
}

impl Run {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("tiny.txt"), TINY).unwrap();
        Self { dir }
    }

    fn root(&self) -> PathBuf {
        self.dir.path().join("runs")
    }

    fn cmd(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_layerhet"))
            .arg("--config")
            .arg(self.dir.path().join("tiny.txt"))
            .args(args)
            .env("OMNI_RUN_DIR", self.root())
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.cmd(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn gen_data_is_byte_reproducible() {
    let run = Run::new();
    let file = run.root().join("data/gui_seed3/samples.tsv");
    run.ok(&["gen-data", "--family", "gui", "--n", "5", "--seed", "3"]);
    let first = read(&file);
    run.ok(&["gen-data", "--family", "gui", "--n", "5", "--seed", "3"]);
    assert_eq!(first, read(&file));
    assert_eq!(String::from_utf8(first).unwrap().lines().count(), 5);
    assert!(run.root().join("data/gui_seed3/manifest.txt").exists());
}

#[test]
fn robot_data_has_one_sample_per_step() {
    let run = Run::new();
    let out = run.ok(&["gen-data", "--family", "robot", "--episodes", "2", "--seed", "1"]);
    let n: usize = out.split_whitespace().next().unwrap().parse().unwrap();
    assert!(n > 2, "{out}");
    let text = String::from_utf8(read(&run.root().join("data/robot_seed1/samples.tsv"))).unwrap();
    assert_eq!(text.lines().count(), n);
}

#[test]
fn invalid_family_is_a_usage_error() {
    let run = Run::new();
    let out = run.cmd(&["gen-data", "--family", "audio"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("audio"));
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let run = Run::new();
    let out = run.cmd(&["--set", "train.nonsense=1", "gen-data", "--family", "gui"]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let run = Run::new();
    let out = run.cmd(&["eval", "--checkpoint", "/nonexistent/x.bin", "--family", "gui"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn corrupt_checkpoint_is_a_mismatch() {
    let run = Run::new();
    let bad = run.dir.path().join("bad.bin");
    std::fs::write(&bad, b"not a checkpoint").unwrap();
    let out = run.cmd(&["eval", "--checkpoint", bad.to_str().unwrap(), "--family", "gui"]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn reference_table_reproduces_the_worked_example() {
    let run = Run::new();
    let table = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/fixtures/reference_table.tsv");
    let out = run.ok(&[
        "codec",
        "encode-embodied",
        "0.043,-0.075,-0.579,0.0,-0.147,-0.080,1.0",
        "--table",
        table,
    ]);
    assert_eq!(out.trim(), "151510 151500 151482 151515 151515 151516 151642");
    // The shared id cannot be decoded back to one bin.
    let out = run.cmd(&["codec", "decode-embodied", "151510 151500 151482 151515 151515 151516 151642", "--table", table]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn codec_round_trips() {
    let run = Run::new();
    let ids = run.ok(&["codec", "encode-embodied", "0.5,-0.5,0,0.25,-1,1,1"]);
    let vals = run.ok(&["codec", "decode-embodied", ids.trim()]);
    let back: Vec<f32> = vals.trim().split(',').map(|v| v.parse().unwrap()).collect();
    for (a, b) in [0.5, -0.5, 0.0, 0.25, -1.0, 1.0, 1.0].iter().zip(&back) {
        assert!((a - b).abs() <= 1.0 / 64.0, "{a} vs {b}");
    }
    let ids = run.ok(&["codec", "encode-gui", "click(x=0.25,y=0.75)"]);
    assert_eq!(run.ok(&["codec", "decode-gui", ids.trim()]).trim(), "click(x=0.250,y=0.750)");
}

#[test]
fn train_eval_and_analyze() {
    let run = Run::new();
    run.ok(&["train", "--variant", "mixed_shared", "--seed", "0", "--name", "base"]);
    let base = run.root().join("train/base/final.bin");
    let base_s = base.to_str().unwrap();
    for d in ["config.txt", "init.bin", "final.bin", "train_log.csv"] {
        assert!(run.root().join("train/base").join(d).exists(), "{d}");
    }

    // Evaluation is deterministic.
    let a = run.ok(&["eval", "--checkpoint", base_s, "--family", "robot", "--seed", "2"]);
    let b = run.ok(&["eval", "--checkpoint", base_s, "--family", "robot", "--seed", "2"]);
    assert_eq!(a, b);
    let csv = String::from_utf8(read(&run.root().join("eval/results.csv"))).unwrap();
    assert_eq!(csv.lines().count(), 3);

    // Two identical continuations give unit cosines everywhere.
    run.ok(&["train", "--variant", "mixed_shared", "--init", base_s, "--name", "g"]);
    run.ok(&["train", "--variant", "mixed_shared", "--init", base_s, "--name", "r"]);
    let g = run.root().join("train/g/final.bin");
    let r = run.root().join("train/r/final.bin");
    run.ok(&[
        "analyze",
        "updates",
        "--base",
        base_s,
        "--gui",
        g.to_str().unwrap(),
        "--robot",
        r.to_str().unwrap(),
        "--svg",
    ]);
    let dir = run.root().join("analysis/updates");
    let rows = String::from_utf8(read(&dir.join("update_similarity.csv"))).unwrap();
    for line in rows.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f[3] == "0" {
            let c: f64 = f[2].parse().unwrap();
            assert!((c - 1.0).abs() < 1e-6, "{line}");
        }
    }
    assert!(read(&dir.join("update_similarity.svg")).starts_with(b"<svg"));

    // A run that did not start from the base is rejected.
    let out = run.cmd(&[
        "analyze",
        "updates",
        "--base",
        g.to_str().unwrap(),
        "--gui",
        g.to_str().unwrap(),
        "--robot",
        r.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(4));

    let out = run.ok(&[
        "analyze",
        "features",
        "--gui-model",
        g.to_str().unwrap(),
        "--robot-model",
        r.to_str().unwrap(),
    ]);
    assert_eq!(out.lines().count(), 2);
    assert!(run.root().join("analysis/features/feature_similarity_L2.csv").exists());
}

#[test]
fn ablation_writes_results() {
    let run = Run::new();
    let out = run.ok(&["--set", "ablation.variants=gui_only,layer_het", "ablation", "--seeds", "0"]);
    assert!(out.starts_with("variant,gui,robot,avg,complete"), "{out}");
    let res = String::from_utf8(read(&run.root().join("ablation/ablation_results.csv"))).unwrap();
    // gui_only has no robot row.
    assert_eq!(res.lines().count(), 1 + 1 + 2);
    assert!(!res.contains("gui_only,robot"));
}
