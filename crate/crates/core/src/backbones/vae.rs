//! Conv VAE over sprites: `[3, 32, 32]` images to `[4, 8, 8]` latents.
//!
//! The encoder returns posterior moments; downstream code always uses the
//! posterior mean scaled by a post-training calibration factor so latents
//! land near unit variance for diffusion. The latent of an all-black image
//! (`e_black`) is computed once after pretraining and stored in the
//! checkpoint — it is the filler the joint-canvas assembly puts into masked
//! slots, so every training batch also contains one black image to keep that
//! corner of the data manifold in-distribution.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;

use crate::ckpt;
use crate::nn::layers::{Conv2d, GroupNorm};
use crate::nn::optim::{AdamW, AdamWConfig, LrSchedule};
use crate::nn::{clip_global_norm, collect_grads, Bound, Params};
use crate::rng;
use crate::runlog;
use crate::scalar::Scalar;
use crate::synthdata::dataset::LoadedDataset;
use crate::synthdata::SPRITE_SIZE;
use crate::tensor::{Graph, Var};
use crate::{Error, Result};

use super::stack_images;

/// Latent channel count (fixed: the nine-channel input depends on it).
pub const LATENT_CHANNELS: usize = 4;
/// Latent side length for one sprite.
pub const LATENT_HW: usize = 8;

/// VAE architecture: parameter handles only.
pub struct VaeArch {
    e1: Conv2d,
    eg1: GroupNorm,
    e2: Conv2d,
    eg2: GroupNorm,
    mu_head: Conv2d,
    logvar_head: Conv2d,
    d1: Conv2d,
    dg1: GroupNorm,
    d2: Conv2d,
    dg2: GroupNorm,
    d3: Conv2d,
    dg3: GroupNorm,
    refine: Conv2d,
    rg: GroupNorm,
    out: Conv2d,
}

impl VaeArch {
    pub fn build<E: Scalar>(p: &mut Params<E>) -> Self {
        VaeArch {
            e1: Conv2d::new(p, "vae.e1", 3, 24, 3, 2, 1),
            eg1: GroupNorm::new(p, "vae.eg1", 24, 8),
            e2: Conv2d::new(p, "vae.e2", 24, 64, 3, 2, 1),
            eg2: GroupNorm::new(p, "vae.eg2", 64, 8),
            mu_head: Conv2d::new(p, "vae.mu", 64, LATENT_CHANNELS, 3, 1, 1),
            logvar_head: Conv2d::new(p, "vae.logvar", 64, LATENT_CHANNELS, 3, 1, 1),
            d1: Conv2d::new(p, "vae.d1", LATENT_CHANNELS, 64, 3, 1, 1),
            dg1: GroupNorm::new(p, "vae.dg1", 64, 8),
            d2: Conv2d::new(p, "vae.d2", 64, 32, 3, 1, 1),
            dg2: GroupNorm::new(p, "vae.dg2", 32, 8),
            d3: Conv2d::new(p, "vae.d3", 32, 24, 3, 1, 1),
            dg3: GroupNorm::new(p, "vae.dg3", 24, 8),
            refine: Conv2d::new(p, "vae.refine", 24, 16, 3, 1, 1),
            rg: GroupNorm::new(p, "vae.rg", 16, 4),
            out: Conv2d::new(p, "vae.out", 16, 3, 3, 1, 1),
        }
    }

    /// `[N, 3, 32, 32] -> (mu, logvar)`, each `[N, 4, 8, 8]`.
    pub fn encode_moments<E: Scalar>(
        &self,
        g: &mut Graph<E>,
        bound: &Bound,
        x: Var,
    ) -> (Var, Var) {
        let h = self.e1.forward(g, bound, x);
        let h = self.eg1.forward(g, bound, h);
        let h = g.silu(h);
        let h = self.e2.forward(g, bound, h);
        let h = self.eg2.forward(g, bound, h);
        let h = g.silu(h);
        let mu = self.mu_head.forward(g, bound, h);
        let logvar = self.logvar_head.forward(g, bound, h);
        (mu, logvar)
    }

    /// `[N, 4, 8, 8] -> [N, 3, 32, 32]`, sigmoid range.
    pub fn decode<E: Scalar>(&self, g: &mut Graph<E>, bound: &Bound, z: Var) -> Var {
        let h = self.d1.forward(g, bound, z);
        let h = self.dg1.forward(g, bound, h);
        let h = g.silu(h);
        let h = g.upsample2x(h);
        let h = self.d2.forward(g, bound, h);
        let h = self.dg2.forward(g, bound, h);
        let h = g.silu(h);
        let h = g.upsample2x(h);
        let h = self.d3.forward(g, bound, h);
        let h = self.dg3.forward(g, bound, h);
        let h = g.silu(h);
        // Full-resolution refinement: sprites are flat fills with hard
        // edges, and edge sharpness is what decides reconstruction quality.
        let h = self.refine.forward(g, bound, h);
        let h = self.rg.forward(g, bound, h);
        let h = g.silu(h);
        let h = self.out.forward(g, bound, h);
        g.sigmoid(h)
    }
}

/// A pretrained VAE plus its latent calibration.
pub struct FrozenVae {
    pub params: Params<f32>,
    pub arch: VaeArch,
    pub latent_scale: f32,
    /// Scaled latent of the all-black image, `[4, 8, 8]`.
    pub e_black: ArrayD<f32>,
    pub train_steps: u64,
}

impl std::fmt::Debug for FrozenVae {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FrozenVae")
            .field("latent_scale", &self.latent_scale)
            .field("train_steps", &self.train_steps)
            .finish_non_exhaustive()
    }
}

impl FrozenVae {
    /// Posterior-mean encoding, scaled: `[N, 3, 32, 32] -> [N, 4, 8, 8]`.
    pub fn encode(&self, images: &ArrayD<f32>) -> Result<ArrayD<f32>> {
        let want = [images.shape()[0], 3, SPRITE_SIZE, SPRITE_SIZE];
        if images.ndim() != 4 || images.shape() != want {
            return Err(Error::shape(format!(
                "vae encode expects [N, 3, {SPRITE_SIZE}, {SPRITE_SIZE}], got {:?}",
                images.shape()
            )));
        }
        let n = images.shape()[0];
        let mut out = ArrayD::zeros(IxDyn(&[n, LATENT_CHANNELS, LATENT_HW, LATENT_HW]));
        let chunk = 32;
        let mut row = 0;
        while row < n {
            let hi = (row + chunk).min(n);
            let part = images
                .slice_axis(ndarray::Axis(0), ndarray::Slice::from(row..hi))
                .to_owned();
            let mut g = Graph::new();
            let bound = self.params.bind_frozen(&mut g);
            let x = g.constant(part);
            let (mu, _) = self.arch.encode_moments(&mut g, &bound, x);
            let mu = g.scale(mu, self.latent_scale as f64);
            out.slice_axis_mut(ndarray::Axis(0), ndarray::Slice::from(row..hi))
                .assign(g.value(mu));
            row = hi;
        }
        Ok(out)
    }

    /// `[N, 4, 8, 8] -> [N, 3, 32, 32]`.
    pub fn decode(&self, latents: &ArrayD<f32>) -> Result<ArrayD<f32>> {
        let want = [latents.shape()[0], LATENT_CHANNELS, LATENT_HW, LATENT_HW];
        if latents.ndim() != 4 || latents.shape() != want {
            return Err(Error::shape(format!(
                "vae decode expects [N, {LATENT_CHANNELS}, {LATENT_HW}, {LATENT_HW}], got {:?}",
                latents.shape()
            )));
        }
        let n = latents.shape()[0];
        let mut out = ArrayD::zeros(IxDyn(&[n, 3, SPRITE_SIZE, SPRITE_SIZE]));
        let chunk = 32;
        let mut row = 0;
        while row < n {
            let hi = (row + chunk).min(n);
            let part = latents
                .slice_axis(ndarray::Axis(0), ndarray::Slice::from(row..hi))
                .to_owned();
            let mut g = Graph::new();
            let bound = self.params.bind_frozen(&mut g);
            let z = g.constant(part);
            let z = g.scale(z, 1.0 / self.latent_scale as f64);
            let x = self.arch.decode(&mut g, &bound, z);
            out.slice_axis_mut(ndarray::Axis(0), ndarray::Slice::from(row..hi))
                .assign(g.value(x));
            row = hi;
        }
        Ok(out)
    }

    /// Encode a single `[3, 32, 32]` image to `[4, 8, 8]`.
    pub fn encode_one(&self, image: &ArrayD<f32>) -> Result<ArrayD<f32>> {
        let z = self.encode(&stack_images(&[image]))?;
        Ok(z.index_axis(ndarray::Axis(0), 0).to_owned().into_dyn())
    }

    /// Decode a single `[4, 8, 8]` latent to `[3, 32, 32]`.
    pub fn decode_one(&self, latent: &ArrayD<f32>) -> Result<ArrayD<f32>> {
        let mut batch = ArrayD::zeros(IxDyn(&[1, LATENT_CHANNELS, LATENT_HW, LATENT_HW]));
        if latent.shape() != &batch.shape()[1..] {
            return Err(Error::shape(format!(
                "vae decode_one expects [{LATENT_CHANNELS}, {LATENT_HW}, {LATENT_HW}], got {:?}",
                latent.shape()
            )));
        }
        batch.index_axis_mut(ndarray::Axis(0), 0).assign(latent);
        let x = self.decode(&batch)?;
        Ok(x.index_axis(ndarray::Axis(0), 0).to_owned().into_dyn())
    }

    pub fn checksum(&self) -> String {
        ckpt::params_checksum(&self.params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let hyper = serde_json::json!({
            "latent_channels": LATENT_CHANNELS,
            "latent_hw": LATENT_HW,
            "image_hw": SPRITE_SIZE,
        });
        let mut extras = BTreeMap::new();
        extras.insert("latent_scale".to_string(), vec![self.latent_scale]);
        extras.insert(
            "e_black".to_string(),
            self.e_black.iter().copied().collect(),
        );
        ckpt::save(
            path,
            "vae",
            self.params.seed(),
            self.train_steps,
            hyper,
            &self.params,
            extras,
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = ckpt::load(path)?;
        if ck.header.kind != "vae" {
            return Err(Error::Format(format!(
                "expected a vae checkpoint, found kind `{}`",
                ck.header.kind
            )));
        }
        let mut params = Params::new(ck.header.seed);
        let arch = VaeArch::build(&mut params);
        ck.restore_into(&mut params)?;
        let latent_scale = ck
            .extra("latent_scale")
            .and_then(|v| v.first().copied())
            .ok_or_else(|| Error::Format("vae checkpoint missing `latent_scale`".into()))?;
        let e_black = ck
            .extra("e_black")
            .ok_or_else(|| Error::Format("vae checkpoint missing `e_black`".into()))?;
        let e_black =
            ArrayD::from_shape_vec(IxDyn(&[LATENT_CHANNELS, LATENT_HW, LATENT_HW]), e_black.to_vec())
                .map_err(|e| Error::Format(format!("e_black shape: {e}")))?;
        Ok(FrozenVae {
            params,
            arch,
            latent_scale,
            e_black,
            train_steps: ck.header.train_steps,
        })
    }
}

#[derive(Clone, Debug)]
pub struct VaePretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub kl_weight: f64,
    pub seed: u64,
    pub eval_interval: usize,
}

impl Default for VaePretrainConfig {
    fn default() -> Self {
        VaePretrainConfig {
            steps: 2600,
            batch: 8,
            lr: 2e-3,
            kl_weight: 1e-4,
            seed: 0,
            eval_interval: 200,
        }
    }
}

/// Pretrain the VAE on the training split (plus one black image per batch).
pub fn pretrain_vae(
    data: &LoadedDataset,
    cfg: &VaePretrainConfig,
) -> Result<(FrozenVae, Vec<runlog::Entry>)> {
    let train = &data.header.train_subjects;
    if train.is_empty() {
        return Err(Error::Train("vae pretraining needs training subjects".into()));
    }
    if cfg.batch < 2 {
        return Err(Error::argument("vae batch must be at least 2"));
    }
    let k = data.header.k_views;

    let mut params = Params::new(rng::derive_seed(cfg.seed, "backbones.vae.init", 0));
    let arch = VaeArch::build(&mut params);
    let schedule = LrSchedule {
        base_lr: cfg.lr,
        warmup_steps: 100.min(cfg.steps / 4),
        total_steps: cfg.steps,
        min_frac: 0.05,
    };
    let mut opt = AdamW::new(&params, AdamWConfig::new(schedule));
    let mut log = Vec::new();

    let black = ArrayD::zeros(IxDyn(&[3, SPRITE_SIZE, SPRITE_SIZE]));
    for step in 0..cfg.steps {
        let mut rng = rng::derive(cfg.seed, "backbones.vae.batch", step as u64);
        let mut batch_images: Vec<&ArrayD<f32>> = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch - 1 {
            let s = train[rng.gen_range(0..train.len())];
            let v = rng.gen_range(0..k);
            batch_images.push(&data.view(s, v).image);
        }
        batch_images.push(&black);
        let x = stack_images(&batch_images);
        let noise_shape = [cfg.batch, LATENT_CHANNELS, LATENT_HW, LATENT_HW];
        let mut noise = ArrayD::<f32>::zeros(IxDyn(&noise_shape));
        for v in noise.iter_mut() {
            *v = f32::standard_normal(&mut rng);
        }

        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let x = g.constant(x);
        let (mu, logvar) = arch.encode_moments(&mut g, &bound, x);
        // Reparameterized sample: z = mu + exp(logvar / 2) * eps.
        let half = g.scale(logvar, 0.5);
        let std = g.exp(half);
        let eps = g.constant(noise);
        let scaled_noise = g.mul(std, eps);
        let z = g.add(mu, scaled_noise);
        let xhat = arch.decode(&mut g, &bound, z);
        let recon = g.mse(xhat, x);
        // KL(q || N(0, I)) per element: (mu^2 + e^logvar - 1 - logvar) / 2.
        let mu2 = g.mul(mu, mu);
        let ev = g.exp(logvar);
        let t = g.add(mu2, ev);
        let t = g.sub(t, logvar);
        let t = g.add_scalar(t, -1.0);
        let kl_sum = g.mean_all(t);
        let kl = g.scale(kl_sum, 0.5);
        let kl_term = g.scale(kl, cfg.kl_weight);
        let loss = g.add(recon, kl_term);
        let loss_value = g.scalar_value(loss).to_f64();
        let recon_value = g.scalar_value(recon).to_f64();

        let store = g.backward(loss);
        let mut grads = collect_grads(&params, &bound, &store);
        clip_global_norm(&mut grads, 1.0);
        opt.step(&mut params, &grads);

        if step % 25 == 0 || step + 1 == cfg.steps {
            log.push(runlog::Entry::new(step as u64, "loss", loss_value));
            log.push(runlog::Entry::new(step as u64, "recon_mse", recon_value));
        }
        if (step + 1) % cfg.eval_interval == 0 || step + 1 == cfg.steps {
            let psnr = heldout_psnr(&params, &arch, data);
            log.push(runlog::Entry::new(step as u64, "heldout_psnr", psnr));
        }
    }

    // Calibrate the latent scale on posterior means of training images,
    // then record the scaled black latent as a reusable fixture.
    let mut calib_images: Vec<&ArrayD<f32>> = Vec::new();
    'outer: for &s in train {
        for v in 0..k {
            calib_images.push(&data.view(s, v).image);
            if calib_images.len() >= 128 {
                break 'outer;
            }
        }
    }
    let mu = posterior_mean(&params, &arch, &stack_images(&calib_images));
    let n = mu.len() as f64;
    let mean: f64 = mu.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var: f64 = mu.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let latent_scale = if std > 1e-6 { (1.0 / std) as f32 } else { 1.0 };

    let black_mu = posterior_mean(&params, &arch, &stack_images(&[&black]));
    let e_black = black_mu
        .index_axis(ndarray::Axis(0), 0)
        .mapv(|v| v * latent_scale)
        .into_dyn();

    let frozen = FrozenVae {
        params,
        arch,
        latent_scale,
        e_black,
        train_steps: cfg.steps as u64,
    };
    Ok((frozen, log))
}

fn posterior_mean(params: &Params<f32>, arch: &VaeArch, images: &ArrayD<f32>) -> ArrayD<f32> {
    let mut g = Graph::new();
    let bound = params.bind_frozen(&mut g);
    let x = g.constant(images.clone());
    let (mu, _) = arch.encode_moments(&mut g, &bound, x);
    g.value(mu).clone()
}

/// Mean round-trip PSNR over a small held-out pool (train pool fallback).
fn heldout_psnr(params: &Params<f32>, arch: &VaeArch, data: &LoadedDataset) -> f64 {
    let pool: Vec<u32> = if !data.header.held_out_subjects.is_empty() {
        data.header.held_out_subjects.iter().copied().take(8).collect()
    } else {
        data.header.train_subjects.iter().copied().take(8).collect()
    };
    let k = data.header.k_views;
    let images: Vec<&ArrayD<f32>> = pool
        .iter()
        .flat_map(|&s| (0..k).map(move |v| &data.view(s, v).image))
        .collect();
    let x = stack_images(&images);
    let mut g = Graph::new();
    let bound = params.bind_frozen(&mut g);
    let xv = g.constant(x.clone());
    let (mu, _) = arch.encode_moments(&mut g, &bound, xv);
    let xhat = arch.decode(&mut g, &bound, mu);
    let xhat = g.value(xhat);
    let mse: f64 = x
        .iter()
        .zip(xhat.iter())
        .map(|(a, b)| ((a - b) as f64).powi(2))
        .sum::<f64>()
        / x.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}
