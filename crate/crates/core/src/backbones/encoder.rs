//! Contrastive semantic image encoder (the frozen CLIP stand-in).
//!
//! A three-stage strided conv stack pools to a single unit-normalized vector
//! per image. Pretraining pulls two views of the same subject together and
//! pushes different subjects apart (symmetric InfoNCE over in-batch
//! negatives), which is exactly the structure the appearance prior needs:
//! identity lives in the embedding, pose does not.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::ckpt;
use crate::nn::layers::{Conv2d, GroupNorm, Linear};
use crate::nn::optim::{AdamW, AdamWConfig, LrSchedule};
use crate::nn::{clip_global_norm, collect_grads, Bound, Params};
use crate::rng;
use crate::runlog;
use crate::scalar::Scalar;
use crate::synthdata::dataset::LoadedDataset;
use crate::tensor::{Graph, Var};
use crate::{Error, Result};

use super::stack_images;

/// Embedding width shared by the APM and all conditioning paths.
pub const SEMANTIC_DIM: usize = 64;

/// Encoder architecture: parameter handles only; weights live in `Params`.
pub struct EncoderArch {
    conv1: Conv2d,
    gn1: GroupNorm,
    conv2: Conv2d,
    gn2: GroupNorm,
    conv3: Conv2d,
    gn3: GroupNorm,
    fc: Linear,
    pub dim: usize,
}

impl EncoderArch {
    pub fn build<E: Scalar>(p: &mut Params<E>, dim: usize) -> Self {
        EncoderArch {
            conv1: Conv2d::new(p, "enc.conv1", 3, 16, 3, 2, 1),
            gn1: GroupNorm::new(p, "enc.gn1", 16, 4),
            conv2: Conv2d::new(p, "enc.conv2", 16, 32, 3, 2, 1),
            gn2: GroupNorm::new(p, "enc.gn2", 32, 8),
            conv3: Conv2d::new(p, "enc.conv3", 32, 64, 3, 2, 1),
            gn3: GroupNorm::new(p, "enc.gn3", 64, 8),
            fc: Linear::new(p, "enc.fc", 64, dim),
            dim,
        }
    }

    /// `[N, 3, H, W] -> [N, dim]`, rows unit-normalized.
    pub fn forward<E: Scalar>(&self, g: &mut Graph<E>, bound: &Bound, x: Var) -> Var {
        let x = self.conv1.forward(g, bound, x);
        let x = self.gn1.forward(g, bound, x);
        let x = g.silu(x);
        let x = self.conv2.forward(g, bound, x);
        let x = self.gn2.forward(g, bound, x);
        let x = g.silu(x);
        let x = self.conv3.forward(g, bound, x);
        let x = self.gn3.forward(g, bound, x);
        let x = g.silu(x);
        let x = g.global_avg_pool(x);
        let x = self.fc.forward(g, bound, x);
        g.l2_normalize_rows(x, 1e-8)
    }
}

/// A pretrained encoder that only runs forward passes.
pub struct FrozenEncoder {
    pub params: Params<f32>,
    pub arch: EncoderArch,
    pub train_steps: u64,
}

impl std::fmt::Debug for FrozenEncoder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FrozenEncoder")
            .field("dim", &self.arch.dim)
            .field("train_steps", &self.train_steps)
            .finish_non_exhaustive()
    }
}

impl FrozenEncoder {
    pub fn dim(&self) -> usize {
        self.arch.dim
    }

    /// Embed a `[N, 3, H, W]` batch into `[N, dim]` unit rows.
    pub fn embed(&self, images: &ArrayD<f32>) -> ArrayD<f32> {
        embed_with(&self.params, &self.arch, images)
    }

    /// Embed a single `[3, H, W]` image.
    pub fn embed_one(&self, image: &ArrayD<f32>) -> ArrayD<f32> {
        let batch = stack_images(&[image]);
        let z = self.embed(&batch);
        z.index_axis(ndarray::Axis(0), 0).to_owned().into_dyn()
    }

    pub fn checksum(&self) -> String {
        ckpt::params_checksum(&self.params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let hyper = serde_json::json!({ "dim": self.arch.dim });
        ckpt::save(
            path,
            "encoder",
            self.params.seed(),
            self.train_steps,
            hyper,
            &self.params,
            BTreeMap::new(),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = ckpt::load(path)?;
        if ck.header.kind != "encoder" {
            return Err(Error::Format(format!(
                "expected an encoder checkpoint, found kind `{}`",
                ck.header.kind
            )));
        }
        let dim = ck.header.hyper["dim"]
            .as_u64()
            .ok_or_else(|| Error::Format("encoder checkpoint missing `dim`".into()))?
            as usize;
        let mut params = Params::new(ck.header.seed);
        let arch = EncoderArch::build(&mut params, dim);
        ck.restore_into(&mut params)?;
        Ok(FrozenEncoder {
            params,
            arch,
            train_steps: ck.header.train_steps,
        })
    }
}

#[derive(Clone, Debug)]
pub struct EncoderPretrainConfig {
    pub dim: usize,
    pub steps: usize,
    pub batch_pairs: usize,
    pub lr: f64,
    pub temperature: f64,
    pub seed: u64,
    pub eval_interval: usize,
}

impl Default for EncoderPretrainConfig {
    fn default() -> Self {
        EncoderPretrainConfig {
            dim: SEMANTIC_DIM,
            steps: 800,
            batch_pairs: 16,
            lr: 3e-3,
            temperature: 0.1,
            seed: 0,
            eval_interval: 100,
        }
    }
}

/// Pretrain the encoder with symmetric InfoNCE over same-subject view pairs.
pub fn pretrain_semantic_encoder(
    data: &LoadedDataset,
    cfg: &EncoderPretrainConfig,
) -> Result<(FrozenEncoder, Vec<runlog::Entry>)> {
    let train = &data.header.train_subjects;
    if train.len() < 2 {
        return Err(Error::Train(
            "contrastive pretraining needs at least two training subjects".into(),
        ));
    }
    if data.header.k_views < 2 {
        return Err(Error::Train(
            "contrastive pretraining needs at least two views per subject".into(),
        ));
    }
    if cfg.temperature <= 0.0 {
        return Err(Error::argument("temperature must be positive"));
    }

    let mut params = Params::new(rng::derive_seed(cfg.seed, "backbones.encoder.init", 0));
    let arch = EncoderArch::build(&mut params, cfg.dim);
    let schedule = LrSchedule {
        base_lr: cfg.lr,
        warmup_steps: 50.min(cfg.steps / 4),
        total_steps: cfg.steps,
        min_frac: 0.1,
    };
    let mut opt = AdamW::new(&params, AdamWConfig::new(schedule));
    let mut log = Vec::new();

    let batch = cfg.batch_pairs.min(train.len());
    let k = data.header.k_views;
    for step in 0..cfg.steps {
        let mut rng = rng::derive(cfg.seed, "backbones.encoder.batch", step as u64);
        let mut ids = train.clone();
        let (picked, _) = ids.partial_shuffle(&mut rng, batch);
        let mut side_a = Vec::with_capacity(batch);
        let mut side_b = Vec::with_capacity(batch);
        for &subject in picked.iter() {
            let va = rng.gen_range(0..k);
            let vb = (va + rng.gen_range(1..k)) % k;
            side_a.push(&data.view(subject, va).image);
            side_b.push(&data.view(subject, vb).image);
        }
        let xa = stack_images(&side_a);
        let xb = stack_images(&side_b);

        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let xa = g.constant(xa);
        let xb = g.constant(xb);
        let za = arch.forward(&mut g, &bound, xa);
        let zb = arch.forward(&mut g, &bound, xb);
        let loss = info_nce(&mut g, za, zb, cfg.temperature);
        let loss_value = g.scalar_value(loss).to_f64();

        let store = g.backward(loss);
        let mut grads = collect_grads(&params, &bound, &store);
        clip_global_norm(&mut grads, 1.0);
        opt.step(&mut params, &grads);

        if step % 25 == 0 || step + 1 == cfg.steps {
            log.push(runlog::Entry::new(step as u64, "loss", loss_value));
        }
        if (step + 1) % cfg.eval_interval == 0 || step + 1 == cfg.steps {
            let (intra, inter) = separability(&params, &arch, data);
            log.push(runlog::Entry::new(step as u64, "intra_cosine", intra));
            log.push(runlog::Entry::new(step as u64, "inter_cosine", inter));
        }
    }

    let frozen = FrozenEncoder {
        params,
        arch,
        train_steps: cfg.steps as u64,
    };
    Ok((frozen, log))
}

/// Symmetric InfoNCE over `[B, D]` unit-row embeddings.
fn info_nce<E: Scalar>(g: &mut Graph<E>, za: Var, zb: Var, temperature: f64) -> Var {
    let dir = |g: &mut Graph<E>, q: Var, kjs: Var| {
        let logits = g.matmul_tb(q, kjs);
        let logits = g.scale(logits, 1.0 / temperature);
        let lse = g.log_sum_exp_last(logits);
        let diag = g.take_diag(logits);
        let gap = g.sub(lse, diag);
        g.mean_all(gap)
    };
    let ab = dir(g, za, zb);
    let ba = dir(g, zb, za);
    let sum = g.add(ab, ba);
    g.scale(sum, 0.5)
}

/// Embed a `[N, 3, H, W]` batch into `[N, dim]` unit rows without touching
/// gradients; chunked so activation memory stays bounded for large sets.
fn embed_with(params: &Params<f32>, arch: &EncoderArch, images: &ArrayD<f32>) -> ArrayD<f32> {
    assert_eq!(images.ndim(), 4, "embed expects [N, C, H, W]");
    let n = images.shape()[0];
    let mut out = ArrayD::zeros(IxDyn(&[n, arch.dim]));
    let chunk = 64;
    let mut row = 0;
    while row < n {
        let hi = (row + chunk).min(n);
        let part = images
            .slice_axis(ndarray::Axis(0), ndarray::Slice::from(row..hi))
            .to_owned();
        let mut g = Graph::new();
        let bound = params.bind_frozen(&mut g);
        let x = g.constant(part);
        let z = arch.forward(&mut g, &bound, x);
        out.slice_axis_mut(ndarray::Axis(0), ndarray::Slice::from(row..hi))
            .assign(g.value(z));
        row = hi;
    }
    out
}

/// Mean same-subject vs cross-subject cosine over an evaluation pool
/// (held-out subjects when there are at least two, else training subjects).
pub fn separability(params: &Params<f32>, arch: &EncoderArch, data: &LoadedDataset) -> (f64, f64) {
    let pool: Vec<u32> = if data.header.held_out_subjects.len() >= 2 {
        data.header.held_out_subjects.iter().copied().take(8).collect()
    } else {
        data.header.train_subjects.iter().copied().take(8).collect()
    };
    let k = data.header.k_views;
    let images: Vec<&ArrayD<f32>> = pool
        .iter()
        .flat_map(|&s| (0..k).map(move |v| (s, v)))
        .map(|(s, v)| &data.view(s, v).image)
        .collect();
    let z = embed_with(params, arch, &stack_images(&images));
    let z = z.into_dimensionality::<ndarray::Ix2>().expect("2-d embed");
    let (mut intra, mut n_intra) = (0.0f64, 0usize);
    let (mut inter, mut n_inter) = (0.0f64, 0usize);
    let n = pool.len() * k;
    for a in 0..n {
        for b in (a + 1)..n {
            let dot: f32 = z.row(a).dot(&z.row(b));
            if a / k == b / k {
                intra += dot as f64;
                n_intra += 1;
            } else {
                inter += dot as f64;
                n_inter += 1;
            }
        }
    }
    (intra / n_intra.max(1) as f64, inter / n_inter.max(1) as f64)
}
