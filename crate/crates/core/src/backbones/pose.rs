//! Pose MLP: sinusoidally encoded keypoints to a fixed-width pose feature.
//!
//! Pretrained on freshly sampled synthetic skeletons with a
//! keypoint-reconstruction head, so the feature provably retains the pose; the
//! head is kept in the checkpoint but ignored at use time.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, ArrayD};

use crate::ckpt;
use crate::nn::layers::Linear;
use crate::nn::optim::{AdamW, AdamWConfig, LrSchedule};
use crate::nn::{clip_global_norm, collect_grads, Bound, Params};
use crate::rng;
use crate::runlog;
use crate::scalar::Scalar;
use crate::synthdata::{self, NUM_KEYPOINTS};
use crate::tensor::{Graph, Var};
use crate::{Error, Result};

use super::sinusoidal_pose_encoding;

/// Pose feature width used by conditioning paths.
pub const POSE_FEATURE_DIM: usize = 64;
/// Per-coordinate sinusoidal width (so the MLP input is `20 * this`).
pub const POSE_ENC_PER_COORD: usize = 8;

const ENC_DIM: usize = 2 * NUM_KEYPOINTS * POSE_ENC_PER_COORD;
const COORD_DIM: usize = 2 * NUM_KEYPOINTS;

/// MLP architecture: parameter handles only.
pub struct PoseArch {
    fc1: Linear,
    fc2: Linear,
    head: Linear,
    pub dim: usize,
}

impl PoseArch {
    pub fn build<E: Scalar>(p: &mut Params<E>, dim: usize) -> Self {
        PoseArch {
            fc1: Linear::new(p, "pose.fc1", ENC_DIM, 128),
            fc2: Linear::new(p, "pose.fc2", 128, dim),
            head: Linear::new(p, "pose.head", dim, COORD_DIM),
            dim,
        }
    }

    /// `[N, ENC_DIM] -> [N, dim]` pose features.
    pub fn feature<E: Scalar>(&self, g: &mut Graph<E>, bound: &Bound, x: Var) -> Var {
        let h = self.fc1.forward(g, bound, x);
        let h = g.silu(h);
        self.fc2.forward(g, bound, h)
    }

    /// Reconstruction readout used only during pretraining.
    pub fn reconstruct<E: Scalar>(&self, g: &mut Graph<E>, bound: &Bound, feature: Var) -> Var {
        let h = g.silu(feature);
        self.head.forward(g, bound, h)
    }
}

/// A pretrained pose MLP that only runs forward passes.
pub struct FrozenPose {
    pub params: Params<f32>,
    pub arch: PoseArch,
    pub train_steps: u64,
}

impl std::fmt::Debug for FrozenPose {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FrozenPose")
            .field("dim", &self.arch.dim)
            .field("train_steps", &self.train_steps)
            .finish_non_exhaustive()
    }
}

impl FrozenPose {
    pub fn dim(&self) -> usize {
        self.arch.dim
    }

    /// Feature for one normalized keypoint set.
    pub fn embed(&self, kps: &[[f32; 2]; NUM_KEYPOINTS]) -> ArrayD<f32> {
        let batch = self.embed_batch(std::slice::from_ref(kps));
        batch.index_axis(ndarray::Axis(0), 0).to_owned().into_dyn()
    }

    /// Features for a batch of normalized keypoint sets: `[N, dim]`.
    pub fn embed_batch(&self, kps: &[[[f32; 2]; NUM_KEYPOINTS]]) -> ArrayD<f32> {
        assert!(!kps.is_empty(), "embed_batch needs at least one pose");
        let x = encode_batch(kps);
        let mut g = Graph::new();
        let bound = self.params.bind_frozen(&mut g);
        let x = g.constant(x.into_dyn());
        let f = self.arch.feature(&mut g, &bound, x);
        g.value(f).clone()
    }

    pub fn checksum(&self) -> String {
        ckpt::params_checksum(&self.params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let hyper = serde_json::json!({
            "dim": self.arch.dim,
            "per_coord": POSE_ENC_PER_COORD,
        });
        ckpt::save(
            path,
            "pose",
            self.params.seed(),
            self.train_steps,
            hyper,
            &self.params,
            BTreeMap::new(),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = ckpt::load(path)?;
        if ck.header.kind != "pose" {
            return Err(Error::Format(format!(
                "expected a pose checkpoint, found kind `{}`",
                ck.header.kind
            )));
        }
        let dim = ck.header.hyper["dim"]
            .as_u64()
            .ok_or_else(|| Error::Format("pose checkpoint missing `dim`".into()))?
            as usize;
        let mut params = Params::new(ck.header.seed);
        let arch = PoseArch::build(&mut params, dim);
        ck.restore_into(&mut params)?;
        Ok(FrozenPose {
            params,
            arch,
            train_steps: ck.header.train_steps,
        })
    }
}

fn encode_batch(kps: &[[[f32; 2]; NUM_KEYPOINTS]]) -> Array2<f32> {
    let mut x = Array2::zeros((kps.len(), ENC_DIM));
    for (i, kp) in kps.iter().enumerate() {
        x.row_mut(i).assign(&sinusoidal_pose_encoding(kp, POSE_ENC_PER_COORD));
    }
    x
}

#[derive(Clone, Debug)]
pub struct PosePretrainConfig {
    pub dim: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PosePretrainConfig {
    fn default() -> Self {
        PosePretrainConfig {
            dim: POSE_FEATURE_DIM,
            steps: 500,
            batch: 32,
            lr: 2e-3,
            seed: 0,
        }
    }
}

/// Pretrain against keypoint reconstruction on freshly sampled skeletons.
pub fn pretrain_pose_mlp(cfg: &PosePretrainConfig) -> Result<(FrozenPose, Vec<runlog::Entry>)> {
    if cfg.batch == 0 || cfg.steps == 0 {
        return Err(Error::argument("pose pretraining needs steps and a batch"));
    }
    let mut params = Params::new(rng::derive_seed(cfg.seed, "backbones.pose.init", 0));
    let arch = PoseArch::build(&mut params, cfg.dim);
    let schedule = LrSchedule {
        base_lr: cfg.lr,
        warmup_steps: 25.min(cfg.steps / 4),
        total_steps: cfg.steps,
        min_frac: 0.05,
    };
    let mut opt = AdamW::new(&params, AdamWConfig::new(schedule));
    let mut log = Vec::new();

    for step in 0..cfg.steps {
        let mut rng = rng::derive(cfg.seed, "backbones.pose.batch", step as u64);
        let mut kps = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let subject = synthdata::sample_subject(&mut rng);
            let pose = synthdata::sample_pose(&mut rng);
            let k = synthdata::fk_keypoints(&subject, &pose);
            kps.push(synthdata::normalized_keypoints(&k));
        }
        let x = encode_batch(&kps);
        let mut target = Array2::zeros((cfg.batch, COORD_DIM));
        for (i, kp) in kps.iter().enumerate() {
            for (j, p) in kp.iter().enumerate() {
                target[[i, 2 * j]] = p[0];
                target[[i, 2 * j + 1]] = p[1];
            }
        }

        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let x = g.constant(x.into_dyn());
        let target = g.constant(target.into_dyn());
        let f = arch.feature(&mut g, &bound, x);
        let recon = arch.reconstruct(&mut g, &bound, f);
        let loss = g.mse(recon, target);
        let loss_value = g.scalar_value(loss).to_f64();

        let store = g.backward(loss);
        let mut grads = collect_grads(&params, &bound, &store);
        clip_global_norm(&mut grads, 1.0);
        opt.step(&mut params, &grads);

        if step % 25 == 0 || step + 1 == cfg.steps {
            log.push(runlog::Entry::new(step as u64, "loss", loss_value));
        }
    }

    let frozen = FrozenPose {
        params,
        arch,
        train_steps: cfg.steps as u64,
    };
    Ok((frozen, log))
}
