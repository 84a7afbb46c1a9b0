//! Shared fixtures for the heavier integration tests.
//!
//! Pretraining even the desk-scale backbones takes minutes, so trained
//! artifacts are cached on disk under `target/desk-fixture/v{N}` and reused
//! across test binaries (cargo runs binaries sequentially; within a binary a
//! `OnceLock` serializes construction). Bump `FIXTURE_VERSION` whenever a
//! change invalidates cached artifacts.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use mvdiff::backbones::{
    pretrain_pose_mlp, pretrain_semantic_encoder, pretrain_vae, EncoderPretrainConfig,
    FrozenEncoder, FrozenPose, FrozenVae, PosePretrainConfig, VaePretrainConfig,
};
use mvdiff::runlog;
use mvdiff::synthdata::dataset::{load_dataset, make_dataset, LoadedDataset};

pub const FIXTURE_VERSION: u32 = 2;

/// Seed shared by every fixture artifact.
pub const SEED: u64 = 1001;
/// Training corpus size (the desk-run scale the criteria reference).
pub const N_SUBJECTS: usize = 200;
pub const K_VIEWS: usize = 4;

pub fn dir() -> PathBuf {
    let target = std::env::var_os("CARGO_TARGET_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| {
            Path::new(env!("CARGO_MANIFEST_DIR"))
                .join("..")
                .join("..")
                .join("target")
        });
    let dir = target.join(format!("desk-fixture/v{FIXTURE_VERSION}"));
    std::fs::create_dir_all(&dir).expect("create fixture dir");
    dir
}

/// Build-or-load the desk dataset (200 subjects, 4 views each).
pub fn dataset() -> &'static LoadedDataset {
    static CELL: OnceLock<LoadedDataset> = OnceLock::new();
    CELL.get_or_init(|| {
        let path = dir().join("dataset");
        if !path.join("dataset.json").exists() {
            let tmp = dir().join("dataset.tmp");
            let _ = std::fs::remove_dir_all(&tmp);
            make_dataset(&tmp, SEED, N_SUBJECTS, K_VIEWS).expect("generate fixture dataset");
            std::fs::rename(&tmp, &path).expect("publish fixture dataset");
        }
        load_dataset(&path).expect("load fixture dataset")
    })
}

fn load_or_build<T>(
    file: &str,
    load: impl Fn(&Path) -> mvdiff::Result<T>,
    build: impl FnOnce(&Path) -> T,
) -> T {
    let path = dir().join(file);
    if path.exists() {
        if let Ok(v) = load(&path) {
            return v;
        }
        // Stale or truncated artifact: rebuild it.
        let _ = std::fs::remove_file(&path);
    }
    build(&path)
}

/// Atomically publish a checkpoint produced by `save(tmp)`.
pub fn publish(path: &Path, save: impl FnOnce(&Path) -> mvdiff::Result<()>) {
    let tmp = path.with_extension("tmp");
    save(&tmp).expect("save fixture artifact");
    std::fs::rename(&tmp, path).expect("publish fixture artifact");
}

pub fn encoder() -> &'static FrozenEncoder {
    static CELL: OnceLock<FrozenEncoder> = OnceLock::new();
    CELL.get_or_init(|| {
        load_or_build("encoder.ckpt", FrozenEncoder::load, |path| {
            let cfg = EncoderPretrainConfig {
                seed: SEED,
                ..EncoderPretrainConfig::default()
            };
            let (enc, log) = pretrain_semantic_encoder(dataset(), &cfg).expect("pretrain encoder");
            runlog::write_jsonl(&dir().join("encoder-log.jsonl"), &log).expect("write log");
            publish(path, |p| enc.save(p));
            enc
        })
    })
}

pub fn vae() -> &'static FrozenVae {
    static CELL: OnceLock<FrozenVae> = OnceLock::new();
    CELL.get_or_init(|| {
        load_or_build("vae.ckpt", FrozenVae::load, |path| {
            let cfg = VaePretrainConfig {
                seed: SEED,
                ..VaePretrainConfig::default()
            };
            let (vae, log) = pretrain_vae(dataset(), &cfg).expect("pretrain vae");
            runlog::write_jsonl(&dir().join("vae-log.jsonl"), &log).expect("write log");
            publish(path, |p| vae.save(p));
            vae
        })
    })
}

pub fn pose() -> &'static FrozenPose {
    static CELL: OnceLock<FrozenPose> = OnceLock::new();
    CELL.get_or_init(|| {
        load_or_build("pose.ckpt", FrozenPose::load, |path| {
            let cfg = PosePretrainConfig {
                seed: SEED,
                ..PosePretrainConfig::default()
            };
            let (pose, log) = pretrain_pose_mlp(&cfg).expect("pretrain pose mlp");
            runlog::write_jsonl(&dir().join("pose-log.jsonl"), &log).expect("write log");
            publish(path, |p| pose.save(p));
            pose
        })
    })
}
