//! Appearance Prior Module: a transformer diffusion denoiser over per-view
//! semantic embeddings.
//!
//! Each view contributes one token built from the feature-axis concatenation
//! `[V_n | V_h | mask bit | P]`, projected to model width, tagged with a
//! learnable view-index embedding, and shifted by a timestep embedding.
//! Blocks stack self-attention over all tokens, cross-attention whose keys
//! are the visible view tokens plus per-view pose tokens, and an MLP. The
//! head regresses the clean embeddings (x0-prediction): training minimizes
//! the squared error against targets on masked positions only, and inference
//! runs DDIM in embedding space with visible rows passed through untouched.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayD, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::backbones::{POSE_FEATURE_DIM, SEMANTIC_DIM};
use crate::ckpt;
use crate::diffusion::{self, ScheduleKind, ScheduleTable};
use crate::nn::layers::{Embedding, LayerNorm, Linear, Mlp, MultiHeadAttention};
use crate::nn::{embed, Bound, Params};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Var};
use crate::{Error, Result};

/// Per-sequence view mask: `true` marks a position to be inferred.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ViewMask {
    flags: Vec<bool>,
}

impl ViewMask {
    /// At least one masked and one visible position are required.
    pub fn new(flags: Vec<bool>) -> Result<Self> {
        let masked = flags.iter().filter(|&&f| f).count();
        if masked == 0 || masked == flags.len() {
            return Err(Error::range(format!(
                "view mask needs between 1 and K-1 masked views, got {masked} of {}",
                flags.len()
            )));
        }
        Ok(ViewMask { flags })
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn k(&self) -> usize {
        self.flags.len()
    }

    pub fn masked_count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.k()).filter(|&i| self.flags[i]).collect()
    }

    pub fn visible_indices(&self) -> Vec<usize> {
        (0..self.k()).filter(|&i| !self.flags[i]).collect()
    }
}

/// Randomly mask exactly `k` of the `K` view rows; masked rows are replaced
/// by the mask embedding (all-zeros by this artifact's convention).
pub fn mask_views(
    views: &Array2<f32>,
    k: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<(Array2<f32>, ViewMask)> {
    let total = views.nrows();
    if k == 0 || k >= total {
        return Err(Error::range(format!(
            "mask count must lie in 1..={}, got {k}",
            total.saturating_sub(1)
        )));
    }
    let mut order: Vec<usize> = (0..total).collect();
    let (chosen, _) = order.partial_shuffle(rng, k);
    let mut flags = vec![false; total];
    for &i in chosen.iter() {
        flags[i] = true;
    }
    let mut masked = views.clone();
    for (i, &f) in flags.iter().enumerate() {
        if f {
            masked.row_mut(i).fill(0.0);
        }
    }
    Ok((masked, ViewMask { flags }))
}

#[derive(Clone, Debug)]
pub struct ApmConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    /// View-index table size = the largest K the model supports.
    pub k_max: usize,
    pub d_embed: usize,
    pub d_pose: usize,
}

impl Default for ApmConfig {
    fn default() -> Self {
        ApmConfig {
            depth: 4,
            width: 128,
            heads: 4,
            k_max: 4,
            d_embed: SEMANTIC_DIM,
            d_pose: POSE_FEATURE_DIM,
        }
    }
}

struct ApmBlock {
    ln1: LayerNorm,
    self_attn: MultiHeadAttention,
    ln2: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln3: LayerNorm,
    mlp: Mlp,
}

/// APM architecture: parameter handles only; weights live in `Params`.
pub struct ApmArch {
    token_in: Linear,
    pose_proj: Linear,
    view_embed: Embedding,
    t_fc1: Linear,
    t_fc2: Linear,
    blocks: Vec<ApmBlock>,
    out_ln: LayerNorm,
    head: Linear,
    pub cfg: ApmConfig,
}

impl ApmArch {
    pub fn build<E: Scalar>(p: &mut Params<E>, cfg: &ApmConfig) -> Self {
        let w = cfg.width;
        let token_dim = 2 * cfg.d_embed + 1 + cfg.d_pose;
        let blocks = (0..cfg.depth)
            .map(|i| ApmBlock {
                ln1: LayerNorm::new(p, &format!("apm.blk{i}.ln1"), w),
                self_attn: MultiHeadAttention::new(p, &format!("apm.blk{i}.self"), w, cfg.heads, false),
                ln2: LayerNorm::new(p, &format!("apm.blk{i}.ln2"), w),
                cross_attn: MultiHeadAttention::new(p, &format!("apm.blk{i}.cross"), w, cfg.heads, false),
                ln3: LayerNorm::new(p, &format!("apm.blk{i}.ln3"), w),
                mlp: Mlp::new(p, &format!("apm.blk{i}.mlp"), w, 2 * w),
            })
            .collect();
        ApmArch {
            token_in: Linear::new(p, "apm.token_in", token_dim, w),
            pose_proj: Linear::new(p, "apm.pose_proj", cfg.d_pose, w),
            view_embed: Embedding::new(p, "apm.view_embed", cfg.k_max, w),
            t_fc1: Linear::new(p, "apm.t_fc1", w, w),
            t_fc2: Linear::new(p, "apm.t_fc2", w, w),
            blocks,
            out_ln: LayerNorm::new(p, "apm.out_ln", w),
            head: Linear::new(p, "apm.head", w, cfg.d_embed),
            cfg: cfg.clone(),
        }
    }

    /// Core forward pass (panics on malformed shapes; see [`apm_forward`]
    /// for the validating wrapper). Shapes: `v_n`/`v_h` `[B, K, D]`, `pose`
    /// `[B, K, D_p]`, one mask and timestep per example, `view_ids[K]`
    /// selecting rows of the view-index table.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<E: Scalar>(
        &self,
        g: &mut Graph<E>,
        bound: &Bound,
        v_n: Var,
        v_h: Var,
        pose: Var,
        masks: &[ViewMask],
        t: &[usize],
        t_total: usize,
        view_ids: &[usize],
    ) -> Var {
        let (b, k) = (g.shape(v_n)[0], g.shape(v_n)[1]);
        assert_eq!(masks.len(), b, "one view mask per example");
        assert_eq!(t.len(), b, "one timestep per example");
        assert_eq!(view_ids.len(), k, "one view id per position");
        let w = self.cfg.width;

        // Mask bit feature channel [B, K, 1].
        let mut mask_bits = ArrayD::<E>::zeros(IxDyn(&[b, k, 1]));
        for (bi, m) in masks.iter().enumerate() {
            assert_eq!(m.k(), k, "mask length matches K");
            for (ki, &f) in m.flags().iter().enumerate() {
                mask_bits[[bi, ki, 0]] = E::from_f64(if f { 1.0 } else { 0.0 });
            }
        }
        let mask_bits = g.constant(mask_bits);

        let tokens = g.concat(&[v_n, v_h, mask_bits, pose], 2);
        let mut x = self.token_in.forward(g, bound, tokens);

        // View-index embeddings, shared by the token and pose streams.
        let view_rows = self.view_embed.forward(g, bound, view_ids);
        x = g.add_suffix(x, view_rows);

        // Per-example timestep features tiled across the K tokens.
        let positions: Vec<f64> = t
            .iter()
            .map(|&ti| {
                assert!(ti < t_total, "timestep {ti} outside schedule {t_total}");
                ti as f64
            })
            .collect();
        let t_table = embed::sinusoidal::<E>(&positions, w, 10_000.0);
        let t_feat = g.constant(t_table.into_dyn());
        let t_feat = self.t_fc1.forward(g, bound, t_feat);
        let t_feat = g.silu(t_feat);
        let t_feat = self.t_fc2.forward(g, bound, t_feat);
        let tile_idx: Vec<usize> = (0..b).flat_map(|bi| std::iter::repeat(bi).take(k)).collect();
        let t_tiled = g.gather_rows(t_feat, &tile_idx);
        let t_tiled = g.reshape(t_tiled, &[b, k, w]);
        x = g.add(x, t_tiled);

        // Pose context tokens (fixed across blocks).
        let mut pose_tokens = self.pose_proj.forward(g, bound, pose);
        pose_tokens = g.add_suffix(pose_tokens, view_rows);

        // Cross-attention keys: the K view tokens (visible ones only) then
        // the K pose tokens (always attendable).
        let mut cross_mask = Array3::<E>::zeros((b, k, 2 * k));
        for (bi, m) in masks.iter().enumerate() {
            for (ki, &f) in m.flags().iter().enumerate() {
                if f {
                    for q in 0..k {
                        cross_mask[[bi, q, ki]] = E::from_f64(-1e4);
                    }
                }
            }
        }

        for blk in &self.blocks {
            let h = blk.ln1.forward(g, bound, x);
            let sa = blk.self_attn.forward(g, bound, h, h, None);
            x = g.add(x, sa);

            let h = blk.ln2.forward(g, bound, x);
            let kv = g.concat(&[h, pose_tokens], 1);
            let ca = blk.cross_attn.forward(g, bound, h, kv, Some(&cross_mask));
            x = g.add(x, ca);

            let h = blk.ln3.forward(g, bound, x);
            let m = blk.mlp.forward(g, bound, h);
            x = g.add(x, m);
        }

        let h = self.out_ln.forward(g, bound, x);
        self.head.forward(g, bound, h)
    }
}

/// Validating wrapper around [`ApmArch::forward`]: K must agree across all
/// inputs and the view ids must fit the embedding table.
#[allow(clippy::too_many_arguments)]
pub fn apm_forward<E: Scalar>(
    arch: &ApmArch,
    g: &mut Graph<E>,
    bound: &Bound,
    v_n: Var,
    v_h: Var,
    pose: Var,
    masks: &[ViewMask],
    t: &[usize],
    t_total: usize,
    view_ids: &[usize],
) -> Result<Var> {
    let sn = g.shape(v_n).to_vec();
    let sh = g.shape(v_h).to_vec();
    let sp = g.shape(pose).to_vec();
    if sn.len() != 3 || sh.len() != 3 || sp.len() != 3 {
        return Err(Error::shape("apm_forward expects [B, K, D] inputs"));
    }
    let (b, k) = (sn[0], sn[1]);
    if sh != [b, k, arch.cfg.d_embed]
        || sn[2] != arch.cfg.d_embed
        || sp != [b, k, arch.cfg.d_pose]
        || masks.len() != b
        || masks.iter().any(|m| m.k() != k)
        || t.len() != b
        || view_ids.len() != k
    {
        return Err(Error::shape(format!(
            "apm_forward: K/D mismatch across inputs (v_n {sn:?}, v_h {sh:?}, pose {sp:?}, \
             {} masks, {} timesteps, {} view ids)",
            masks.len(),
            t.len(),
            view_ids.len()
        )));
    }
    if view_ids.iter().any(|&v| v >= arch.cfg.k_max) {
        return Err(Error::range(format!(
            "view id outside the index table (k_max {})",
            arch.cfg.k_max
        )));
    }
    if let Some(&bad) = t.iter().find(|&&ti| ti >= t_total) {
        return Err(Error::range(format!(
            "timestep {bad} outside schedule of length {t_total}"
        )));
    }
    Ok(arch.forward(g, bound, v_n, v_h, pose, masks, t, t_total, view_ids))
}

/// Squared-error x0-regression loss averaged over masked positions only:
/// `sum over masked rows of ||pred - target||^2 / (number of masked rows)`.
pub fn masked_x0_loss<E: Scalar>(
    g: &mut Graph<E>,
    pred: Var,
    target: Var,
    masks: &[ViewMask],
) -> Var {
    let shape = g.shape(pred).to_vec();
    assert_eq!(shape.len(), 3, "masked_x0_loss expects [B, K, D]");
    let (b, k, d) = (shape[0], shape[1], shape[2]);
    assert_eq!(masks.len(), b, "one mask per example");
    let mut weights = ArrayD::<E>::zeros(IxDyn(&[b, k, d]));
    let mut count = 0usize;
    for (bi, m) in masks.iter().enumerate() {
        for (ki, &f) in m.flags().iter().enumerate() {
            if f {
                count += 1;
                for di in 0..d {
                    weights[[bi, ki, di]] = E::one();
                }
            }
        }
    }
    assert!(count > 0, "masked_x0_loss needs at least one masked row");
    let w = g.constant(weights);
    let diff = g.sub(pred, target);
    let sq = g.mul(diff, diff);
    let masked = g.mul(sq, w);
    let total = g.sum_all(masked);
    g.scale(total, 1.0 / count as f64)
}

/// Deterministic per-step draws behind [`apm_loss`]: timesteps, mask counts,
/// mask layouts, and the diffusion noise, all from seed-keyed streams.
#[derive(Debug)]
pub struct ApmLossDraw {
    pub t: Vec<usize>,
    pub masks: Vec<ViewMask>,
    pub noise: Array3<f32>,
}

pub fn apm_loss_draw(
    b: usize,
    k: usize,
    d: usize,
    t_total: usize,
    seed: u64,
    step: u64,
) -> ApmLossDraw {
    let mut rng = rng::derive(seed, "apm.loss.draw", step);
    let mut t = Vec::with_capacity(b);
    let mut masks = Vec::with_capacity(b);
    let mut noise = Array3::<f32>::zeros((b, k, d));
    for bi in 0..b {
        t.push(rng.gen_range(0..t_total));
        let masked = rng.gen_range(1..k);
        let mut order: Vec<usize> = (0..k).collect();
        let (chosen, _) = order.partial_shuffle(&mut rng, masked);
        let mut flags = vec![false; k];
        for &i in chosen.iter() {
            flags[i] = true;
        }
        masks.push(ViewMask { flags });
        for ki in 0..k {
            for di in 0..d {
                noise[[bi, ki, di]] = f32::standard_normal(&mut rng);
            }
        }
    }
    ApmLossDraw { t, masks, noise }
}

/// Eq.-2 training loss. `v_t` are the clean targets; `v_h_source` is the
/// visible-stream source (equal to `v_t` in training) whose masked rows are
/// replaced by the mask embedding before the model ever sees them, so
/// corrupting those rows cannot change the loss. Returns the loss node and
/// the draw that produced it.
#[allow(clippy::too_many_arguments)]
pub fn apm_loss<E: Scalar>(
    arch: &ApmArch,
    g: &mut Graph<E>,
    bound: &Bound,
    v_t: &Array3<f32>,
    v_h_source: &Array3<f32>,
    pose: &Array3<f32>,
    table: &ScheduleTable,
    seed: u64,
    step: u64,
) -> Result<(Var, ApmLossDraw)> {
    let (b, k, d) = v_t.dim();
    if b == 0 {
        return Err(Error::argument("apm_loss: empty batch"));
    }
    if k < 2 {
        return Err(Error::argument("apm_loss: needs K >= 2 views"));
    }
    if v_h_source.dim() != (b, k, d) {
        return Err(Error::shape("apm_loss: v_h_source shape mismatch"));
    }
    if pose.dim().0 != b || pose.dim().1 != k {
        return Err(Error::shape("apm_loss: pose shape mismatch"));
    }
    let draw = apm_loss_draw(b, k, d, table.len(), seed, step);

    // Assemble V_n (forward-diffused targets, per-example t) and V_h
    // (visible rows of the source, zeros at masked rows).
    let mut v_n = Array3::<f32>::zeros((b, k, d));
    let mut v_h = Array3::<f32>::zeros((b, k, d));
    for bi in 0..b {
        let ab = table.alpha_bar(draw.t[bi]);
        let (c0, ce) = ((ab.sqrt()) as f32, ((1.0 - ab).sqrt()) as f32);
        for ki in 0..k {
            let masked = draw.masks[bi].flags()[ki];
            for di in 0..d {
                v_n[[bi, ki, di]] = c0 * v_t[[bi, ki, di]] + ce * draw.noise[[bi, ki, di]];
                if !masked {
                    v_h[[bi, ki, di]] = v_h_source[[bi, ki, di]];
                }
            }
        }
    }

    let to_e = |a: &Array3<f32>| -> ArrayD<E> { a.mapv(|v| E::from_f64(v as f64)).into_dyn() };
    let v_n = g.constant(to_e(&v_n));
    let v_h = g.constant(to_e(&v_h));
    let pose_var = g.constant(to_e(pose));
    let target = g.constant(to_e(v_t));
    let view_ids: Vec<usize> = (0..k).collect();
    let pred = apm_forward(
        arch, g, bound, v_n, v_h, pose_var, &draw.masks, &draw.t, table.len(), &view_ids,
    )?;
    let loss = masked_x0_loss(g, pred, target, &draw.masks);
    Ok((loss, draw))
}

/// A trained APM that only runs forward passes.
pub struct FrozenApm {
    pub params: Params<f32>,
    pub arch: ApmArch,
    pub train_steps: u64,
    /// Noise schedule the model was trained against; sampling must reuse it.
    pub schedule: ScheduleKind,
    pub t_total: usize,
}

impl std::fmt::Debug for FrozenApm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FrozenApm")
            .field("cfg", &self.arch.cfg)
            .field("train_steps", &self.train_steps)
            .finish_non_exhaustive()
    }
}

impl FrozenApm {
    pub fn checksum(&self) -> String {
        ckpt::params_checksum(&self.params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let c = &self.arch.cfg;
        let hyper = serde_json::json!({
            "depth": c.depth, "width": c.width, "heads": c.heads,
            "k_max": c.k_max, "d_embed": c.d_embed, "d_pose": c.d_pose,
            "schedule": self.schedule.as_str(), "t_total": self.t_total,
        });
        ckpt::save(
            path,
            "apm",
            self.params.seed(),
            self.train_steps,
            hyper,
            &self.params,
            BTreeMap::new(),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = ckpt::load(path)?;
        if ck.header.kind != "apm" {
            return Err(Error::Format(format!(
                "expected an apm checkpoint, found kind `{}`",
                ck.header.kind
            )));
        }
        let grab = |key: &str| -> Result<usize> {
            ck.header.hyper[key]
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| Error::Format(format!("apm checkpoint missing `{key}`")))
        };
        let cfg = ApmConfig {
            depth: grab("depth")?,
            width: grab("width")?,
            heads: grab("heads")?,
            k_max: grab("k_max")?,
            d_embed: grab("d_embed")?,
            d_pose: grab("d_pose")?,
        };
        let schedule = ck.header.hyper["schedule"]
            .as_str()
            .ok_or_else(|| Error::Format("apm checkpoint missing `schedule`".into()))
            .and_then(ScheduleKind::parse)?;
        let t_total = grab("t_total")?;
        let mut params = Params::new(ck.header.seed);
        let arch = ApmArch::build(&mut params, &cfg);
        ck.restore_into(&mut params)?;
        Ok(FrozenApm {
            params,
            arch,
            train_steps: ck.header.train_steps,
            schedule,
            t_total,
        })
    }
}

/// DDIM inference in embedding space (§-style: masked rows start from unit
/// Gaussian noise; visible rows are re-noised to each step's level with one
/// fixed draw and pass through to the output bitwise unchanged).
pub fn apm_infer(
    apm: &FrozenApm,
    visible: &[(usize, Vec<f32>)],
    pose: &Array2<f32>,
    table: &ScheduleTable,
    n_steps: usize,
    seed: u64,
) -> Result<Array2<f32>> {
    apm_infer_with(&apm.arch, &apm.params, visible, pose, table, n_steps, seed)
}

/// `apm_infer` against an explicit (arch, params) pair — the form training
/// loops use to evaluate mid-run without freezing a copy.
pub fn apm_infer_with(
    arch: &ApmArch,
    params: &Params<f32>,
    visible: &[(usize, Vec<f32>)],
    pose: &Array2<f32>,
    table: &ScheduleTable,
    n_steps: usize,
    seed: u64,
) -> Result<Array2<f32>> {
    let k = pose.nrows();
    let d = arch.cfg.d_embed;
    if visible.is_empty() {
        return Err(Error::argument("apm_infer needs at least one visible view"));
    }
    if k > arch.cfg.k_max {
        return Err(Error::range(format!(
            "K={k} exceeds the model's view-index table ({})",
            arch.cfg.k_max
        )));
    }
    if pose.ncols() != arch.cfg.d_pose {
        return Err(Error::shape("apm_infer: pose feature width mismatch"));
    }
    let mut is_visible = vec![false; k];
    let mut clean = Array2::<f32>::zeros((k, d));
    for (idx, row) in visible {
        if *idx >= k {
            return Err(Error::range(format!("visible index {idx} out of range {k}")));
        }
        if is_visible[*idx] {
            return Err(Error::argument(format!("visible index {idx} repeated")));
        }
        if row.len() != d {
            return Err(Error::shape("apm_infer: embedding width mismatch"));
        }
        is_visible[*idx] = true;
        for (di, &v) in row.iter().enumerate() {
            clean[[*idx, di]] = v;
        }
    }
    // Nothing masked: the request is a pure pass-through.
    if is_visible.iter().all(|&v| v) {
        return Ok(clean);
    }
    let mask = ViewMask::new(is_visible.iter().map(|&v| !v).collect())?;

    let mut init_rng = rng::derive(seed, "apm.infer.init", 0);
    let mut renoise_rng = rng::derive(seed, "apm.infer.renoise", 0);
    let mut state = clean.clone();
    let mut eps_vis = Array2::<f32>::zeros((k, d));
    for ki in 0..k {
        for di in 0..d {
            let init = f32::standard_normal(&mut init_rng);
            let re = f32::standard_normal(&mut renoise_rng);
            if !is_visible[ki] {
                state[[ki, di]] = init;
            }
            eps_vis[[ki, di]] = re;
        }
    }

    let ts = diffusion::ddim_timesteps(table.len(), n_steps)?;
    let view_ids: Vec<usize> = (0..k).collect();
    for (i, &t) in ts.iter().enumerate() {
        // V_n: current noisy state at masked rows, re-noised clean rows at
        // visible ones (matching the training-time noise level).
        let mut v_n = state.clone();
        let ab = table.alpha_bar(t);
        let (c0, ce) = ((ab.sqrt()) as f32, ((1.0 - ab).sqrt()) as f32);
        let mut v_h = Array2::<f32>::zeros((k, d));
        for ki in 0..k {
            if is_visible[ki] {
                for di in 0..d {
                    v_n[[ki, di]] = c0 * clean[[ki, di]] + ce * eps_vis[[ki, di]];
                    v_h[[ki, di]] = clean[[ki, di]];
                }
            }
        }

        let mut g = Graph::new();
        let bound = params.bind_frozen(&mut g);
        let shape3 = |a: &Array2<f32>| -> ArrayD<f32> {
            a.clone().insert_axis(Axis(0)).into_dyn()
        };
        let v_n_var = g.constant(shape3(&v_n));
        let v_h_var = g.constant(shape3(&v_h));
        let pose_var = g.constant(shape3(pose));
        let pred = apm_forward(
            arch,
            &mut g,
            &bound,
            v_n_var,
            v_h_var,
            pose_var,
            std::slice::from_ref(&mask),
            &[t],
            table.len(),
            &view_ids,
        )?;
        let pred = g.value(pred);
        let pred2 = pred
            .index_axis(Axis(0), 0)
            .to_owned()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("pred is [1, K, D]");

        // DDIM update the masked rows only: visible rows stay clean.
        let x_t = v_n.into_dyn();
        let eps_hat = diffusion::eps_from_pred_x0(&x_t, &pred2.clone().into_dyn(), t, table);
        let t_prev = ts.get(i + 1).copied();
        let next = diffusion::ddim_step(&x_t, &eps_hat, t, t_prev, table);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                step: t,
                message: "non-finite embedding state during APM inference".into(),
            });
        }
        for ki in 0..k {
            if !is_visible[ki] {
                for di in 0..d {
                    state[[ki, di]] = next[[ki, di]];
                }
            }
        }
    }

    // Targets are unit-normalized; project the inferred rows back onto the
    // sphere. Visible rows are untouched.
    for ki in 0..k {
        if !is_visible[ki] {
            let norm: f32 = state.row(ki).iter().map(|v| v * v).sum::<f32>().sqrt();
            if norm > 1e-8 {
                state.row_mut(ki).mapv_inplace(|v| v / norm);
            }
        }
    }
    Ok(state)
}
