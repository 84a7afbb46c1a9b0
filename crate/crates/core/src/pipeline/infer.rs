//! Joint inference: one appearance-prior pass, then a guided DDIM loop
//! over the masked joint canvas, reference restoration, and decoding.

use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;

use crate::apm::apm_infer;
use crate::diffusion::{self, ScheduleTable};
use crate::jci::{build_mask_channel, concat_input, ConditionBundle, SlotLayout, SlotRole};
use crate::rng;
use crate::scalar::Scalar;
use crate::synthdata::{normalized_keypoints, Keypoints};
use crate::{Error, Result};

use super::{InferenceRequest, Models, RefView, TargetSpec};

/// Per-slot conditioning tokens shared by both the APM pass and the UNet
/// bundle: reference embeddings and pose features for every slot.
struct SlotTokens {
    ref_slots: Vec<usize>,
    target_slots: Vec<usize>,
    ref_embed: Array2<f32>,
    pose: Array2<f32>,
}

fn slot_tokens(req: &InferenceRequest, models: &Models, s: usize) -> Result<SlotTokens> {
    let enc = &models.backbones.encoder;
    let d = enc.dim();
    let mut ref_slots: Vec<usize> = req.references.iter().map(|r| r.slot).collect();
    ref_slots.sort_unstable();
    let mut target_slots: Vec<usize> = req.targets.iter().map(|t| t.slot).collect();
    target_slots.sort_unstable();

    let mut by_slot: Vec<Option<&RefView>> = vec![None; s];
    for r in &req.references {
        by_slot[r.slot] = Some(r);
    }
    let images: Vec<&ArrayD<f32>> = ref_slots
        .iter()
        .map(|&slot| &by_slot[slot].expect("validated").image)
        .collect();
    let z = enc.embed(&crate::backbones::stack_images(&images));
    let mut ref_embed = Array2::<f32>::zeros((ref_slots.len(), d));
    for (i, _) in ref_slots.iter().enumerate() {
        for j in 0..d {
            ref_embed[[i, j]] = z[[i, j]];
        }
    }

    let mut kps: Vec<[[f32; 2]; crate::synthdata::NUM_KEYPOINTS]> = Vec::with_capacity(s);
    let mut targets_by_slot: Vec<Option<&TargetSpec>> = vec![None; s];
    for t in &req.targets {
        targets_by_slot[t.slot] = Some(t);
    }
    for slot in 0..s {
        let k = if let Some(r) = by_slot[slot] {
            r.keypoints
        } else {
            targets_by_slot[slot].expect("slots partition").keypoints
        };
        kps.push(normalized_keypoints(&k));
    }
    let pose = models
        .backbones
        .pose
        .embed_batch(&kps)
        .into_dimensionality::<ndarray::Ix2>()
        .map_err(|e| Error::shape(format!("pose output: {e}")))?;

    Ok(SlotTokens {
        ref_slots,
        target_slots,
        ref_embed,
        pose,
    })
}

/// Run the appearance prior once and keep the rows for the target slots.
fn appearance_prior(
    req: &InferenceRequest,
    models: &Models,
    tokens: &SlotTokens,
) -> Result<Option<(Array2<f32>, Vec<usize>)>> {
    if !models.unet.model.cfg.flags.use_apm_prior {
        return Ok(None);
    }
    let apm = models.apm.as_ref().ok_or_else(|| {
        Error::MissingArtifact(std::path::PathBuf::from(
            "apm checkpoint (this denoiser was trained with the prior)",
        ))
    })?;
    let visible: Vec<(usize, Vec<f32>)> = tokens
        .ref_slots
        .iter()
        .enumerate()
        .map(|(i, &slot)| (slot, tokens.ref_embed.row(i).to_vec()))
        .collect();
    let table = ScheduleTable::new(apm.schedule, apm.t_total)?;
    let full = apm_infer(
        apm,
        &visible,
        &tokens.pose,
        &table,
        req.n_steps,
        rng::derive(req.seed, "infer.apm", 0).gen(),
    )?;
    let mut rows = Array2::<f32>::zeros((tokens.target_slots.len(), full.ncols()));
    for (i, &slot) in tokens.target_slots.iter().enumerate() {
        rows.row_mut(i).assign(&full.row(slot));
    }
    Ok(Some((rows, tokens.target_slots.clone())))
}

fn guided_ddim(
    models: &Models,
    mut x: ArrayD<f32>,
    z_m: Option<&ArrayD<f32>>,
    mask: Option<&ArrayD<f32>>,
    bundle: &ConditionBundle,
    layout: &SlotLayout,
    n_steps: usize,
    w: f32,
) -> Result<ArrayD<f32>> {
    let unet = &models.unet;
    let t_total = unet.t_total;
    let table = ScheduleTable::new(unet.schedule, t_total)?;
    let ts = diffusion::ddim_timesteps(t_total, n_steps)?;
    let null_bundle = ConditionBundle {
        null_condition: true,
        ..bundle.clone()
    };
    for (i, &t) in ts.iter().enumerate() {
        let z_in = match (z_m, mask) {
            (Some(z_m), Some(mask)) => concat_input(&x, z_m, mask)?,
            _ => x.clone(),
        };
        // Skip whichever branch the guidance weight zeroes out exactly.
        let eps = if w == 1.0 {
            unet.predict(&z_in, bundle, layout, t, t_total)?
        } else if w == 0.0 {
            unet.predict(&z_in, &null_bundle, layout, t, t_total)?
        } else {
            let cond = unet.predict(&z_in, bundle, layout, t, t_total)?;
            let uncond = unet.predict(&z_in, &null_bundle, layout, t, t_total)?;
            diffusion::cfg_combine(&cond, &uncond, f64::from(w))
        };
        x = diffusion::ddim_step(&x, &eps, t, ts.get(i + 1).copied(), &table);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                step: t,
                message: "non-finite latent during guided sampling".into(),
            });
        }
    }
    Ok(x)
}

/// §-style joint inference: the appearance prior runs once, the denoiser
/// loops under classifier-free guidance, reference slots are restored from
/// the masked latent, and target slots decode to images (ascending slot
/// order).
pub fn infer(req: &InferenceRequest, models: &Models) -> Result<Vec<ArrayD<f32>>> {
    let cfg = &models.unet.model.cfg;
    if cfg.flags.use_jci {
        infer_joint(req, models)
    } else {
        infer_single(req, models)
    }
}

fn infer_joint(req: &InferenceRequest, models: &Models) -> Result<Vec<ArrayD<f32>>> {
    let cfg = &models.unet.model.cfg;
    let s = cfg.s_slots;
    let layout = req.validate(s)?;
    let tokens = slot_tokens(req, models, s)?;
    let v_pred = appearance_prior(req, models, &tokens)?;

    let vae = &models.backbones.vae;
    let refs: Vec<(usize, &ArrayD<f32>)> = {
        let mut v: Vec<(usize, &ArrayD<f32>)> = req
            .references
            .iter()
            .map(|r| (r.slot, &r.image))
            .collect();
        v.sort_by_key(|(slot, _)| *slot);
        v
    };
    let z_m = crate::jci::assemble_masked_latent(&refs, &layout, vae)?;
    let hw = z_m.shape()[1] / layout.grid().0;
    let mask = build_mask_channel(&layout, (hw, hw));

    let mut x_t = seeded_canvas(req, z_m.shape(), &layout, hw);
    let bundle = ConditionBundle {
        v_pred,
        f_i: tokens.ref_embed.clone(),
        f_i_slots: tokens.ref_slots.clone(),
        f_p: tokens.pose.clone(),
        f_p_slots: (0..s).collect(),
        w: req.w,
        null_condition: false,
    };
    x_t = guided_ddim(
        models,
        x_t,
        Some(&z_m),
        Some(&mask),
        &bundle,
        &layout,
        req.n_steps,
        req.w,
    )?;

    // Reference slots are preserved, not re-generated: restore them from
    // the masked latent before decoding.
    for &slot in &tokens.ref_slots {
        let (r0, c0) = layout.block_origin(slot, hw, hw);
        for c in 0..4 {
            for i in 0..hw {
                for j in 0..hw {
                    x_t[[c, r0 + i, c0 + j]] = z_m[[c, r0 + i, c0 + j]];
                }
            }
        }
    }
    let mut out = Vec::with_capacity(tokens.target_slots.len());
    for &slot in &tokens.target_slots {
        let block = crate::jci::read_block(&x_t, &layout, slot, hw, hw);
        out.push(vae.decode_one(&block)?);
    }
    Ok(out)
}

/// Seed-keyed Gaussian canvas; under `shared_slot_noise` every target slot
/// receives the same block so the padded targets start identically.
fn seeded_canvas(
    req: &InferenceRequest,
    shape: &[usize],
    layout: &SlotLayout,
    hw: usize,
) -> ArrayD<f32> {
    let mut r = rng::derive(req.seed, "infer.x_t", 0);
    let mut x = ArrayD::from_shape_fn(IxDyn(shape), |_| f32::standard_normal(&mut r));
    if req.shared_slot_noise {
        let mut rb = rng::derive(req.seed, "infer.x_t.shared", 0);
        let block = ArrayD::<f32>::from_shape_fn(IxDyn(&[4, hw, hw]), |_| {
            f32::standard_normal(&mut rb)
        });
        for slot in 0..layout.s() {
            if layout.role(slot) == SlotRole::Target {
                let (r0, c0) = layout.block_origin(slot, hw, hw);
                for c in 0..4 {
                    for i in 0..hw {
                        for j in 0..hw {
                            x[[c, r0 + i, c0 + j]] = block[[c, i, j]];
                        }
                    }
                }
            }
        }
    }
    x
}

/// The no-JCI (B0) path: each target samples independently on a one-slot
/// canvas conditioned on the first reference's embedding and its own pose.
fn infer_single(req: &InferenceRequest, models: &Models) -> Result<Vec<ArrayD<f32>>> {
    if req.references.is_empty() {
        return Err(Error::argument(
            "inference needs at least one reference view",
        ));
    }
    if req.targets.is_empty() {
        return Err(Error::argument("inference needs at least one target slot"));
    }
    let vae = &models.backbones.vae;
    let enc = &models.backbones.encoder;
    let hw = vae.e_black.shape()[1];
    let layout = SlotLayout::new(1, 1, vec![SlotRole::Target])?;
    let r0 = &req.references[0];
    let z = enc.embed_one(&r0.image);
    let f_i = Array2::from_shape_fn((1, enc.dim()), |(_, j)| z[[j]]);

    let mut targets: Vec<&TargetSpec> = req.targets.iter().collect();
    targets.sort_by_key(|t| t.slot);
    let mut out = Vec::with_capacity(targets.len());
    for t in targets {
        let f_p = models
            .backbones
            .pose
            .embed(&normalized_keypoints(&t.keypoints));
        let f_p = Array2::from_shape_fn((1, models.backbones.pose.dim()), |(_, j)| f_p[[j]]);
        let bundle = ConditionBundle {
            v_pred: None,
            f_i: f_i.clone(),
            f_i_slots: vec![0],
            f_p,
            f_p_slots: vec![0],
            w: req.w,
            null_condition: false,
        };
        let mut r = rng::derive(req.seed, "infer.x_t", t.slot as u64);
        let x_t = ArrayD::from_shape_fn(IxDyn(&[4, hw, hw]), |_| f32::standard_normal(&mut r));
        let x0 = guided_ddim(
            models, x_t, None, None, &bundle, &layout, req.n_steps, req.w,
        )?;
        out.push(vae.decode_one(&x0)?);
    }
    Ok(out)
}

/// Output of the single-reference padding protocol: all three generated
/// targets plus the seeded selection among them.
#[derive(Debug)]
pub struct ProtocolResult {
    pub images: Vec<ArrayD<f32>>,
    pub chosen: usize,
}

impl ProtocolResult {
    pub fn selected(&self) -> &ArrayD<f32> {
        &self.images[self.chosen]
    }
}

/// The padding protocol for a single reference: the masked layout is
/// padded with three black (target) slots, the target pose repeats three
/// times, and one of the three generations is selected at a seeded-random
/// index.
pub fn single_target_protocol(
    reference: &RefView,
    target_pose: &Keypoints,
    models: &Models,
    n_steps: usize,
    w: f32,
    seed: u64,
) -> Result<ProtocolResult> {
    let reference = RefView {
        slot: 0,
        image: reference.image.clone(),
        keypoints: reference.keypoints,
    };
    let targets = (1..4)
        .map(|slot| TargetSpec {
            slot,
            keypoints: *target_pose,
        })
        .collect();
    let mut req = InferenceRequest::new(vec![reference], targets, seed);
    req.n_steps = n_steps;
    req.w = w;
    let images = infer(&req, models)?;
    let chosen = rng::derive(seed, "protocol.pick", 0).gen_range(0..images.len());
    Ok(ProtocolResult { images, chosen })
}
