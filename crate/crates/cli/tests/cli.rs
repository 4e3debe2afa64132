use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use clipforge_core::eval::EvalReport;
use clipforge_core::train::{StepLog, STEP_LOG};

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    fn new() -> Self {
        let env = Env {
            dir: tempfile::tempdir().unwrap(),
        };
        fs::write(
            env.path("spec.toml"),
            "num_classes = 4\nsamples_per_class = 6\nholdout_per_class = 2\nimage_size = 32\nseed = 3\n",
        )
        .unwrap();
        let manifest = env.path("data").join("manifest.toml");
        fs::write(
            env.path("train.toml"),
            format!(
                "image_size_px = 32\npatch_size_px = 8\nimage_layers = 1\ntext_layers = 1\n\
                 batch_size = 8\ntotal_steps = 6\nwarmup_steps = 2\ncheckpoint_interval_steps = 3\n\
                 image_peak_lr = 1e-3\ntext_peak_lr = 1e-3\nablation_prior_steps = 2\n\
                 ablation_wallclock_secs = 0.5\ndata_manifest = {:?}\n",
                manifest.display().to_string()
            ),
        )
        .unwrap();
        env
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_clipforge"))
            .args(args)
            .env("CLIPFORGE_RUN_ROOT", self.path("runs"))
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed:\n{}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn gen_data(&self) {
        let spec = self.path("spec.toml");
        let out = self.path("data");
        self.ok(&["gen-data", "--spec", s(&spec), "--out", s(&out)]);
    }

    fn runs(&self, kind: &str) -> Vec<PathBuf> {
        let mut v: Vec<PathBuf> = fs::read_dir(self.path("runs"))
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.file_name().unwrap().to_str().unwrap().starts_with(kind))
            .collect();
        v.sort();
        v
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_train_eval_pipeline() {
    let env = Env::new();
    env.gen_data();
    let cfg = env.path("train.toml");
    env.ok(&["train", "--config", s(&cfg), "--set", "mask_ratio=0.25"]);
    let run = &env.runs("train")[0];
    let resolved = fs::read_to_string(run.join("resolved_config.toml")).unwrap();
    assert!(resolved.contains("# override: mask_ratio=0.25"));
    assert!(resolved.contains("mask_ratio = 0.25"));
    assert_eq!(StepLog::read(&run.join(STEP_LOG)).unwrap().len(), 6);
    let ckpt = run.join("checkpoints/final.cfck");
    assert!(ckpt.exists());

    let data = env.path("data");
    env.ok(&[
        "eval",
        "--ckpt",
        s(&ckpt),
        "--classes",
        s(&data.join("classes.txt")),
        "--templates",
        s(&data.join("templates.txt")),
    ]);
    let eval_run = &env.runs("eval")[0];
    let text = fs::read_to_string(eval_run.join("report.json")).unwrap();
    let report = EvalReport::from_json(&text, Path::new("report.json")).unwrap();
    assert!(report.benchmarks.contains_key("holdout"));
    assert!(report.retrieval.is_some() && report.video.is_some());
    assert!(fs::read_to_string(eval_run.join("report.csv"))
        .unwrap()
        .starts_with("benchmark,metric,value"));

    // a second run gets its own directory
    env.ok(&["train", "--config", s(&cfg), "--seed", "9"]);
    let runs = env.runs("train");
    assert_eq!(runs.len(), 2);
    assert!(fs::read_to_string(runs[1].join("resolved_config.toml"))
        .unwrap()
        .contains("seed = 9"));
}

#[test]
fn resume_continues_bit_exactly() {
    let env = Env::new();
    env.gen_data();
    let cfg = env.path("train.toml");
    env.ok(&["train", "--config", s(&cfg)]);
    let first = env.runs("train")[0].clone();
    let mid = first.join("checkpoints/step_00000003.cfck");
    env.ok(&["train", "--config", s(&cfg), "--resume", s(&mid)]);
    let second = env.runs("train")[1].clone();
    let full = StepLog::read(&first.join(STEP_LOG)).unwrap();
    let tail = StepLog::read(&second.join(STEP_LOG)).unwrap();
    assert_eq!(tail.len(), 3);
    for (a, b) in full[3..].iter().zip(&tail) {
        assert_eq!(a.deterministic(), b.deterministic());
    }
    assert_eq!(
        fs::read(first.join("checkpoints/final.cfck")).unwrap(),
        fs::read(second.join("checkpoints/final.cfck")).unwrap()
    );
}

#[test]
fn bench_and_ablate_write_reports() {
    let env = Env::new();
    env.gen_data();
    let cfg = env.path("train.toml");
    let out = env.ok(&["bench", "--config", s(&cfg), "--steps", "7"]);
    assert!(out.contains("ratio"));
    assert!(env.runs("bench")[0].join("bench.json").exists());
    let out = env.ok(&["ablate", "--config", s(&cfg), "--set", "total_steps=3"]);
    for arm in ["scratch/adamw", "init/adamw", "init/lamb", "init/lamb/mask"] {
        assert!(out.contains(arm), "{out}");
    }
    let run = &env.runs("ablate")[0];
    assert!(run.join("ablation.md").exists() && run.join("ablation.json").exists());
}

#[test]
fn errors_exit_nonzero_with_diagnostics() {
    let env = Env::new();
    let out = env.run(&["train", "--bogus"]);
    assert!(!out.status.success());

    let out = env.run(&["train", "--config", s(&env.path("missing.toml"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.toml"));

    let bad = env.path("bad.toml");
    fs::write(&bad, "batch_size = 0\n").unwrap();
    let out = env.run(&["train", "--config", s(&bad)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("batch_size"));

    let out = env.run(&["train", "--config", s(&env.path("train.toml")), "--set", "warmup_stepz=3"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("warmup_stepz"));
}
