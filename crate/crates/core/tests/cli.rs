use std::fs;

use longact::cli::{self, RunDir, SaliencyAxis, SaliencySource};
use longact::model::ModelConfig;
use longact::perturb::{PerturbSpec, Side, Target};
use longact::saliency::PolicyKind;
use longact::tasks::{SeedRange, SplitConfig};
use longact::{Overrides, RunConfig};

fn small(root: &std::path::Path, name: &str) -> RunConfig {
    let mut c = RunConfig {
        name: name.into(),
        out: Some(root.to_path_buf()),
        model: ModelConfig {
            d_model: 16,
            n_layers: 1,
            n_heads_q: 2,
            n_heads_kv: 1,
            head_dim: 8,
            mlp_hidden: 32,
            max_seq: 96,
            ..ModelConfig::default()
        },
        split: SplitConfig {
            sft: SeedRange::new(0, 64),
            rl: SeedRange::new(1000, 16),
            eval: SeedRange::new(2000, 8),
            ..SplitConfig::default()
        },
        ..RunConfig::default()
    };
    c.task.context_len = 32;
    c.train.sft_steps = 4;
    c.train.sft_target_acc = None;
    c.train.sft_val_size = 4;
    c.train.rl_steps = 2;
    c.train.rl_batch = 2;
    c.train.group_size = 2;
    c.train.max_new_tokens = 8;
    c.train.eval_every = 1;
    c.train.checkpoint_every = 1;
    c.train.calib_size = 2;
    c.eval.max_new = 8;
    c
}

#[test]
fn config_file_then_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("run.toml");
    fs::write(&path, "name = \"a\"\nseed = 4\ntrain.lambda = 0.2\ntrain.policy = \"min\"\n").unwrap();
    let c = RunConfig::resolve(Some(&path), &Overrides::default()).unwrap();
    assert_eq!((c.name.as_str(), c.seed, c.train.lambda, c.train.policy), ("a", 4, 0.2, PolicyKind::Min));
    let ov = Overrides {
        seed: Some(9),
        lambda: Some(0.5),
        ..Overrides::default()
    };
    let c = RunConfig::resolve(Some(&path), &ov).unwrap();
    assert_eq!((c.seed, c.train.seed, c.train.lambda), (9, 9, 0.5));
    fs::write(&path, "train.lambda = 1.5\n").unwrap();
    assert!(RunConfig::resolve(Some(&path), &Overrides::default()).is_err());
}

#[test]
fn pipeline_lays_out_the_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small(tmp.path(), "p");
    let r = cli::pipeline(&cfg).unwrap();
    let dir = RunDir { root: cfg.run_dir() };
    for p in [
        dir.root.join("config.resolved"),
        dir.data("sft"),
        dir.data("rl"),
        dir.data("eval"),
        dir.metrics(),
        dir.checkpoint("sft.ckpt"),
        dir.checkpoint("rl_step00001.ckpt"),
        dir.checkpoint("rl_final.ckpt"),
        dir.report("sft_eval.json"),
        dir.report("rl_eval.json"),
        dir.report("masks.json"),
    ] {
        assert!(p.exists(), "missing {}", p.display());
    }
    assert_eq!(r.rl.checkpoint, dir.checkpoint("rl_final.ckpt"));
    let resolved = fs::read_to_string(dir.root.join("config.resolved")).unwrap();
    assert_eq!(RunConfig::from_toml(&resolved).unwrap(), cfg);

    let phases: Vec<String> = fs::read_to_string(dir.metrics())
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["phase"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(phases.first().map(String::as_str), Some("sft"));
    assert_eq!(phases.iter().filter(|p| *p == "rl").count(), 2);
    assert_eq!(phases.last().map(String::as_str), Some("rl_eval"));

    let rep = cli::cmd_eval(&cfg, &r.rl.checkpoint).unwrap();
    assert_eq!(rep.n, 8);
    assert!(dir.report("eval_rl_final.json").exists());

    let files = cli::cmd_saliency(&cfg, &SaliencySource::Checkpoint(r.rl.checkpoint.clone()), SaliencyAxis::HeadDim).unwrap();
    assert_eq!(files.len(), 4);
    let files = cli::cmd_saliency(&cfg, &SaliencySource::Checkpoint(r.rl.checkpoint.clone()), SaliencyAxis::Sequence).unwrap();
    assert!(files.iter().all(|f| f.to_string_lossy().ends_with("_sequence.csv")));

    let spec = PerturbSpec::new(Target::Both, 0.25, Side::Top).unwrap();
    let rows = cli::cmd_perturb(&cfg, &r.rl.checkpoint, &spec).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].label, "none");
    assert!(rows[0].divergence.abs() < 1e-9);
    assert!(dir.report(&format!("perturb_{}.txt", spec.label())).exists());
}

#[test]
fn rl_refuses_a_missing_or_mismatched_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small(tmp.path(), "m");
    assert!(cli::cmd_rl(&cfg, None).is_err());
    let sft = cli::cmd_sft(&cfg).unwrap();
    let mut other = cfg.clone();
    other.model.mlp_hidden = 48;
    assert!(cli::cmd_eval(&other, &sft.checkpoint).is_err());
}

#[test]
fn saliency_on_a_hand_written_matrix() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small(tmp.path(), "s");
    cfg.train.lambda = 0.3;
    let m = tmp.path().join("grid.csv");
    fs::write(&m, "head,d0,d1,d2,d3\nh0,0.8,0.2,0.9,0.5\nh1,0.3,0.7,0.6,0.4\n").unwrap();
    let files = cli::cmd_saliency(&cfg, &SaliencySource::Matrix(m), SaliencyAxis::HeadDim).unwrap();
    let mask = fs::read_to_string(files.iter().find(|p| p.extension().unwrap() == "mask").unwrap()).unwrap();
    assert_eq!(mask, "head 0: 2\nhead 1: 1\nrows: 2 5\n");
    let grid = longact::saliency::read_saliency_csv(&files[0]).unwrap();
    assert_eq!(grid.data(), &[0.8, 0.2, 0.9, 0.5, 0.3, 0.7, 0.6, 0.4]);
}

#[test]
fn binary_parses_every_subcommand() {
    let bin = env!("CARGO_BIN_EXE_longact");
    let out = std::process::Command::new(bin).arg("--help").output().unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    for sub in ["gen", "sft", "rl", "eval", "saliency", "perturb", "pipeline"] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
    let tmp = tempfile::tempdir().unwrap();
    let status = std::process::Command::new(bin)
        .args(["eval", "--checkpoint", "nope.ckpt", "--out"])
        .arg(tmp.path())
        .status()
        .unwrap();
    assert!(!status.success());
}
