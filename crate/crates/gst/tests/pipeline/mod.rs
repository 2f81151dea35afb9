//! A pipeline small enough to train in milliseconds: 8×8 renders, 4×4
//! token grids and a one-layer transformer.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use gst::config::{Config, DataConfig, EvalConfig, ModelShape, TokenizerTrainConfig, TrainConfig};
use gst::data::{generate, Dataset, GenParams};
use gst::tokenizer::TokenizerConfig;
use gst_core::geometry::Intrinsics;
use gst_core::scenes::CameraSampler;

pub fn tiny_config() -> Config {
    let mut c = Config::fast();
    c.data = DataConfig { resolution: 8, num_scenes: 12, views_per_scene: 3 };
    let shrink = |t: TokenizerConfig| TokenizerConfig {
        base_channels: 4,
        channel_mult: vec![1, 2],
        num_downsamples: 1,
        codebook_size: 16,
        codebook_dim: 4,
        ..t
    };
    c.image_tokenizer = shrink(TokenizerConfig::image(8, 8));
    c.camera_tokenizer = shrink(TokenizerConfig::camera(8, 8));
    let tt = TokenizerTrainConfig {
        steps: 8,
        batch_size: 2,
        restart_every: 2,
        restart_until: 1.0,
        log_every: 2,
        warmup_steps: 2,
        ..TokenizerTrainConfig::default()
    };
    c.image_tokenizer_train = tt.clone();
    c.camera_tokenizer_train = tt;
    c.model = ModelShape { num_layers: 1, model_dim: 16, num_heads: 2, ..ModelShape::default() };
    c.train = TrainConfig {
        steps: 8,
        batch_size: 2,
        log_every: 2,
        checkpoint_every: 0,
        warmup_steps: 2,
        lr: 1e-3,
        lr_final: 1e-4,
        ..TrainConfig::default()
    };
    c.eval = EvalConfig { max_pairs: 4, baseline_draws: 200, prior_samples: 4 };
    c
}

pub fn gen_params(c: &Config) -> GenParams {
    GenParams {
        num_scenes: c.data.num_scenes,
        views_per_scene: c.data.views_per_scene,
        seed: c.seed,
        sampler: CameraSampler::default().into(),
        intrinsics: Intrinsics::default_for(c.data.resolution, c.data.resolution).into(),
    }
}

pub fn tiny_dataset(c: &Config) -> Dataset {
    generate(&gen_params(c)).unwrap()
}

/// Runs the `gst` binary with quiet logging.
pub fn gst(args: &[&str]) -> std::process::Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_gst"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

/// Runs the binary and panics with its output unless it succeeds.
pub fn gst_ok(args: &[&str]) -> String {
    let out = gst(args);
    assert!(
        out.status.success(),
        "gst {args:?} failed\nstdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every file under `root`, keyed by relative path.
pub fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

/// Writes the tiny config into `dir` and renders its dataset with the CLI.
pub fn cli_setup(dir: &Path) -> (PathBuf, PathBuf) {
    let cfg = dir.join("tiny.toml");
    std::fs::write(&cfg, tiny_config().to_toml()).unwrap();
    let data = dir.join("data");
    gst_ok(&["--config", s(&cfg), "gen-data", "--out", s(&data)]);
    (cfg, data)
}

/// Trains both tokenizers and the sequence model into `run`.
pub fn cli_train_all(cfg: &Path, data: &Path, run: &Path, metrics: &Path) {
    let c = s(cfg);
    let (d, r) = (s(data), s(run));
    gst_ok(&["--config", c, "train-image-tokenizer", "--data", d, "--run", r]);
    gst_ok(&["--config", c, "train-camera-tokenizer", "--data", d, "--run", r]);
    gst_ok(&["--config", c, "--metrics-out", s(metrics), "train-gst", "--data", d, "--run", r]);
}
