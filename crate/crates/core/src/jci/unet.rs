//! The joint-canvas denoising UNet.
//!
//! Three resolution levels over the tiled latent canvas. Every level, on
//! both the encoder and decoder paths, applies cross-attention against the
//! conditioning token set `[V_pred | F_I | F_P]` (each row tagged with its
//! slot-index embedding), followed — when the ablation flag enables it — by
//! cross-view attention that treats the S slot blocks as a pseudo sequence
//! per spatial position. View-attention output projections start at zero so
//! enabling the module is initially a no-op, and parameter initialization is
//! keyed by name alone, which makes the ablation ladder's shared layers
//! start from identical weights.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::{AblationFlags, ConditionBundle, SlotLayout};
use crate::ckpt;
use crate::diffusion::ScheduleKind;
use crate::nn::layers::{Conv2d, Embedding, GroupNorm, LayerNorm, Linear, MultiHeadAttention};
use crate::nn::{embed, Bound, Init, ParamId, Params};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Var};
use crate::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UnetConfig {
    /// Channels per resolution level, highest resolution first.
    pub channels: Vec<usize>,
    pub res_blocks: usize,
    pub heads: usize,
    pub d_embed: usize,
    pub d_pose: usize,
    pub s_slots: usize,
    pub flags: AblationFlags,
}

impl Default for UnetConfig {
    fn default() -> Self {
        UnetConfig {
            channels: vec![64, 128, 256],
            res_blocks: 2,
            heads: 4,
            d_embed: crate::backbones::SEMANTIC_DIM,
            d_pose: crate::backbones::POSE_FEATURE_DIM,
            s_slots: 4,
            flags: AblationFlags::full(),
        }
    }
}

impl UnetConfig {
    /// Nine channels with the joint conditional injection, four without.
    pub fn in_channels(&self) -> usize {
        if self.flags.use_jci {
            9
        } else {
            4
        }
    }
}

struct ResBlock {
    gn1: GroupNorm,
    conv1: Conv2d,
    t_proj: Linear,
    gn2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new<E: Scalar>(
        p: &mut Params<E>,
        name: &str,
        c_in: usize,
        c_out: usize,
        t_dim: usize,
    ) -> Self {
        ResBlock {
            gn1: GroupNorm::new(p, &format!("{name}.gn1"), c_in, 8),
            conv1: Conv2d::new(p, &format!("{name}.conv1"), c_in, c_out, 3, 1, 1),
            t_proj: Linear::new(p, &format!("{name}.t"), t_dim, c_out),
            gn2: GroupNorm::new(p, &format!("{name}.gn2"), c_out, 8),
            conv2: Conv2d::new(p, &format!("{name}.conv2"), c_out, c_out, 3, 1, 1),
            skip: (c_in != c_out)
                .then(|| Conv2d::new(p, &format!("{name}.skip"), c_in, c_out, 1, 1, 0)),
        }
    }

    fn forward<E: Scalar>(&self, g: &mut Graph<E>, bound: &Bound, x: Var, t_feat: Var) -> Var {
        let h = self.gn1.forward(g, bound, x);
        let h = g.silu(h);
        let h = self.conv1.forward(g, bound, h);
        let tb = self.t_proj.forward(g, bound, t_feat);
        let h = g.add_hw_bias(h, tb);
        let h = self.gn2.forward(g, bound, h);
        let h = g.silu(h);
        let h = self.conv2.forward(g, bound, h);
        let sk = match &self.skip {
            Some(c) => c.forward(g, bound, x),
            None => x,
        };
        g.add(h, sk)
    }
}

/// One cross-attention injection site: image positions attend over the
/// conditioning token set (or the learned null token under CFG dropout).
struct AttnSite {
    ln: LayerNorm,
    attn: MultiHeadAttention,
    tok_i: Linear,
    tok_p: Linear,
    tok_v: Option<Linear>,
    slot_emb: Embedding,
    null_tok: ParamId,
    c: usize,
}

impl AttnSite {
    fn new<E: Scalar>(p: &mut Params<E>, name: &str, c: usize, cfg: &UnetConfig) -> Self {
        AttnSite {
            ln: LayerNorm::new(p, &format!("{name}.ln"), c),
            attn: MultiHeadAttention::new(p, &format!("{name}.cross"), c, cfg.heads, false),
            tok_i: Linear::new(p, &format!("{name}.tok_i"), cfg.d_embed, c),
            tok_p: Linear::new(p, &format!("{name}.tok_p"), cfg.d_pose, c),
            tok_v: cfg
                .flags
                .use_apm_prior
                .then(|| Linear::new(p, &format!("{name}.tok_v"), cfg.d_embed, c)),
            slot_emb: Embedding::new(p, &format!("{name}.slot_emb"), cfg.s_slots, c),
            null_tok: p.add(&format!("{name}.null"), &[1, c], Init::Normal { std: 0.02 }),
            c,
        }
    }

    /// Build the `[1, T, C]` token set for this site.
    fn tokens<E: Scalar>(&self, g: &mut Graph<E>, bound: &Bound, bundle: &ConditionBundle) -> Var {
        if bundle.null_condition {
            let null = bound.var(self.null_tok);
            return g.reshape(null, &[1, 1, self.c]);
        }
        let to_e = |a: &ndarray::Array2<f32>| -> ArrayD<E> {
            a.mapv(|v| E::from_f64(v as f64)).into_dyn()
        };
        let mut groups: Vec<Var> = Vec::new();
        let tag = |g: &mut Graph<E>, rows: Var, slots: &[usize], arch: &Self| -> Var {
            let emb = arch.slot_emb.forward(g, bound, slots);
            g.add(rows, emb)
        };
        if let (Some(proj), Some((v, slots))) = (&self.tok_v, bundle.v_pred.as_ref()) {
            if v.nrows() > 0 {
                let rows = g.constant(to_e(v));
                let rows = proj.forward(g, bound, rows);
                groups.push(tag(g, rows, slots, self));
            }
        }
        if bundle.f_i.nrows() > 0 {
            let rows = g.constant(to_e(&bundle.f_i));
            let rows = self.tok_i.forward(g, bound, rows);
            groups.push(tag(g, rows, &bundle.f_i_slots, self));
        }
        if bundle.f_p.nrows() > 0 {
            let rows = g.constant(to_e(&bundle.f_p));
            let rows = self.tok_p.forward(g, bound, rows);
            groups.push(tag(g, rows, &bundle.f_p_slots, self));
        }
        assert!(!groups.is_empty(), "validated upstream: non-null bundles carry tokens");
        let all = if groups.len() == 1 {
            groups[0]
        } else {
            g.concat(&groups, 0)
        };
        let t = g.shape(all)[0];
        g.reshape(all, &[1, t, self.c])
    }

    fn forward<E: Scalar>(
        &self,
        g: &mut Graph<E>,
        bound: &Bound,
        x: Var,
        bundle: &ConditionBundle,
    ) -> Var {
        let (c, h, w) = (g.shape(x)[1], g.shape(x)[2], g.shape(x)[3]);
        let kv = self.tokens(g, bound, bundle);
        let q = g.permute(x, &[0, 2, 3, 1]);
        let q = g.reshape(q, &[1, h * w, c]);
        let q = self.ln.forward(g, bound, q);
        let out = self.attn.forward(g, bound, q, kv, None);
        let out = g.reshape(out, &[1, h, w, c]);
        let out = g.permute(out, &[0, 3, 1, 2]);
        g.add(x, out)
    }
}

/// Cross-view ("temporal") attention over the S slot blocks, applied per
/// spatial position, residual added. Output projection starts at zero.
pub struct ViewAttn {
    ln: LayerNorm,
    attn: MultiHeadAttention,
}

impl ViewAttn {
    pub fn new<E: Scalar>(p: &mut Params<E>, name: &str, c: usize, heads: usize) -> Self {
        ViewAttn {
            ln: LayerNorm::new(p, &format!("{name}.ln"), c),
            attn: MultiHeadAttention::new(p, &format!("{name}.attn"), c, heads, true),
        }
    }
}

/// Attention across the S per-slot feature vectors at each spatial
/// position of a `[1, C, H, W]` canvas partitioned by `layout`'s grid.
pub fn view_attention<E: Scalar>(
    va: &ViewAttn,
    g: &mut Graph<E>,
    bound: &Bound,
    x: Var,
    layout: &SlotLayout,
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 4 || shape[0] != 1 {
        return Err(Error::shape(format!(
            "view_attention expects [1, C, H, W], got {shape:?}"
        )));
    }
    let (c, hh, ww) = (shape[1], shape[2], shape[3]);
    let (rows, cols) = layout.grid();
    if hh % rows != 0 || ww % cols != 0 {
        return Err(Error::shape(format!(
            "canvas {hh}x{ww} does not partition into a {rows}x{cols} grid"
        )));
    }
    let (bh, bw) = (hh / rows, ww / cols);
    let s = layout.s();
    // [1,C,H,W] -> [C, rows, bh, cols, bw] -> [rows, cols, bh, bw, C]
    // -> [S, bh*bw, C] -> [bh*bw (batch), S (tokens), C].
    let r = g.reshape(x, &[c, rows, bh, cols, bw]);
    let p = g.permute(r, &[1, 3, 2, 4, 0]);
    let seq = g.reshape(p, &[s, bh * bw, c]);
    let seq = g.permute(seq, &[1, 0, 2]);
    let qn = va.ln.forward(g, bound, seq);
    let out = va.attn.forward(g, bound, qn, qn, None);
    // Invert the rearrangement and add the residual.
    let out = g.permute(out, &[1, 0, 2]);
    let out = g.reshape(out, &[rows, cols, bh, bw, c]);
    let out = g.permute(out, &[4, 0, 2, 1, 3]);
    let out = g.reshape(out, &[1, c, hh, ww]);
    Ok(g.add(x, out))
}

struct EncLevel {
    rbs: Vec<ResBlock>,
    cross: AttnSite,
    view: Option<ViewAttn>,
    down: Option<Conv2d>,
}

struct DecLevel {
    up: Conv2d,
    rbs: Vec<ResBlock>,
    cross: AttnSite,
    view: Option<ViewAttn>,
}

/// The denoising UNet over the joint latent canvas.
pub struct JciUnet {
    pub cfg: UnetConfig,
    t_in: Linear,
    t_out: Linear,
    stem: Conv2d,
    enc: Vec<EncLevel>,
    dec: Vec<DecLevel>,
    out_gn: GroupNorm,
    out_conv: Conv2d,
}

impl JciUnet {
    pub fn build<E: Scalar>(p: &mut Params<E>, cfg: &UnetConfig) -> Self {
        assert!(
            cfg.channels.len() >= 2,
            "the UNet needs at least two resolution levels"
        );
        assert!(cfg.res_blocks >= 1);
        let levels = cfg.channels.len();
        let t_dim = *cfg.channels.last().unwrap();
        let c0 = cfg.channels[0];
        let use_va = cfg.flags.use_view_attention;

        let mut enc = Vec::with_capacity(levels);
        for l in 0..levels {
            let c = cfg.channels[l];
            // The stem (l = 0) and the previous level's strided conv both
            // deliver this level's channel width already.
            let mut rbs = Vec::with_capacity(cfg.res_blocks);
            for j in 0..cfg.res_blocks {
                rbs.push(ResBlock::new(p, &format!("unet.enc{l}.rb{j}"), c, c, t_dim));
            }
            enc.push(EncLevel {
                rbs,
                cross: AttnSite::new(p, &format!("unet.enc{l}"), c, cfg),
                view: use_va.then(|| ViewAttn::new(p, &format!("unet.enc{l}.view"), c, cfg.heads)),
                down: (l + 1 < levels).then(|| {
                    Conv2d::new(
                        p,
                        &format!("unet.enc{l}.down"),
                        c,
                        cfg.channels[l + 1],
                        3,
                        2,
                        1,
                    )
                }),
            });
        }

        let mut dec = Vec::new();
        for l in (0..levels - 1).rev() {
            let c = cfg.channels[l];
            let c_below = cfg.channels[l + 1];
            let mut rbs = Vec::with_capacity(cfg.res_blocks);
            for j in 0..cfg.res_blocks {
                let cin = if j == 0 { 2 * c } else { c };
                rbs.push(ResBlock::new(p, &format!("unet.dec{l}.rb{j}"), cin, c, t_dim));
            }
            dec.push(DecLevel {
                up: Conv2d::new(p, &format!("unet.dec{l}.up"), c_below, c, 3, 1, 1),
                rbs,
                cross: AttnSite::new(p, &format!("unet.dec{l}"), c, cfg),
                view: use_va.then(|| ViewAttn::new(p, &format!("unet.dec{l}.view"), c, cfg.heads)),
            });
        }

        JciUnet {
            t_in: Linear::new(p, "unet.t_in", c0, t_dim),
            t_out: Linear::new(p, "unet.t_out", t_dim, t_dim),
            stem: Conv2d::new(p, "unet.stem", cfg.in_channels(), c0, 3, 1, 1),
            enc,
            dec,
            out_gn: GroupNorm::new(p, "unet.out_gn", c0, 8),
            out_conv: Conv2d::new(p, "unet.out", c0, 4, 3, 1, 1),
            cfg: cfg.clone(),
        }
    }
}

/// ε-prediction over the x_t channels of the joint canvas.
///
/// `z_in` is `[9, H, W]` (or `[4, H, W]` for the B0 variant), `t` the
/// denoising timestep in `[0, t_total)`. The output is `[4, H, W]`.
pub fn unet_forward<E: Scalar>(
    model: &JciUnet,
    g: &mut Graph<E>,
    bound: &Bound,
    z_in: &ArrayD<f32>,
    bundle: &ConditionBundle,
    layout: &SlotLayout,
    t: usize,
    t_total: usize,
) -> Result<Var> {
    let cfg = &model.cfg;
    if z_in.ndim() != 3 || z_in.shape()[0] != cfg.in_channels() {
        return Err(Error::shape(format!(
            "z_in must be [{}, H, W] for this model, got {:?}",
            cfg.in_channels(),
            z_in.shape()
        )));
    }
    let (h, w) = (z_in.shape()[1], z_in.shape()[2]);
    if layout.s() != cfg.s_slots {
        return Err(Error::shape(format!(
            "layout has {} slots but the model expects {}",
            layout.s(),
            cfg.s_slots
        )));
    }
    let (rows, cols) = layout.grid();
    let down = 1usize << (cfg.channels.len() - 1);
    if h % (rows * down) != 0 || w % (cols * down) != 0 {
        return Err(Error::shape(format!(
            "canvas {h}x{w} must divide by the {rows}x{cols} grid at every level"
        )));
    }
    if t >= t_total {
        return Err(Error::range(format!(
            "timestep {t} outside schedule of length {t_total}"
        )));
    }
    bundle.validate(cfg.s_slots, cfg.d_embed, cfg.d_pose)?;
    if !bundle.null_condition {
        let has_v = cfg.flags.use_apm_prior
            && bundle.v_pred.as_ref().map_or(false, |(v, _)| v.nrows() > 0);
        if !has_v && bundle.f_i.nrows() == 0 && bundle.f_p.nrows() == 0 {
            return Err(Error::argument(
                "conditioning bundle is empty; use null_condition for the CFG branch",
            ));
        }
    }

    let c0 = cfg.channels[0];
    let t_table = embed::sinusoidal::<E>(&[t as f64], c0, 10_000.0);
    let t_feat = g.constant(t_table.into_dyn());
    let t_feat = model.t_in.forward(g, bound, t_feat);
    let t_feat = g.silu(t_feat);
    let t_feat = model.t_out.forward(g, bound, t_feat);

    let x = z_in.mapv(|v| E::from_f64(v as f64));
    let x = x
        .into_shape_with_order(IxDyn(&[1, cfg.in_channels(), h, w]))
        .expect("batch axis insert");
    let x = g.constant(x);
    let mut hcur = model.stem.forward(g, bound, x);

    let mut skips: Vec<Var> = Vec::new();
    for (l, level) in model.enc.iter().enumerate() {
        for rb in &level.rbs {
            hcur = rb.forward(g, bound, hcur, t_feat);
        }
        hcur = level.cross.forward(g, bound, hcur, bundle);
        if let Some(va) = &level.view {
            hcur = view_attention(va, g, bound, hcur, layout)?;
        }
        if let Some(downc) = &level.down {
            skips.push(hcur);
            hcur = downc.forward(g, bound, hcur);
        }
        let _ = l;
    }

    for level in &model.dec {
        hcur = g.upsample2x(hcur);
        hcur = level.up.forward(g, bound, hcur);
        let skip = skips.pop().expect("one skip per decoder level");
        hcur = g.concat(&[hcur, skip], 1);
        for rb in &level.rbs {
            hcur = rb.forward(g, bound, hcur, t_feat);
        }
        hcur = level.cross.forward(g, bound, hcur, bundle);
        if let Some(va) = &level.view {
            hcur = view_attention(va, g, bound, hcur, layout)?;
        }
    }

    let out = model.out_gn.forward(g, bound, hcur);
    let out = g.silu(out);
    let out = model.out_conv.forward(g, bound, out);
    Ok(g.reshape(out, &[4, h, w]))
}

/// A trained denoiser that only runs forward passes.
pub struct FrozenUnet {
    pub params: Params<f32>,
    pub model: JciUnet,
    pub train_steps: u64,
    /// Noise schedule the model was trained against; sampling must reuse it.
    pub schedule: ScheduleKind,
    pub t_total: usize,
}

impl std::fmt::Debug for FrozenUnet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FrozenUnet")
            .field("cfg", &self.model.cfg)
            .field("train_steps", &self.train_steps)
            .finish_non_exhaustive()
    }
}

impl FrozenUnet {
    pub fn checksum(&self) -> String {
        ckpt::params_checksum(&self.params)
    }

    /// One frozen ε-prediction (convenience wrapper over [`unet_forward`]).
    pub fn predict(
        &self,
        z_in: &ArrayD<f32>,
        bundle: &ConditionBundle,
        layout: &SlotLayout,
        t: usize,
        t_total: usize,
    ) -> Result<ArrayD<f32>> {
        let mut g = Graph::new();
        let bound = self.params.bind_frozen(&mut g);
        let out = unet_forward(&self.model, &mut g, &bound, z_in, bundle, layout, t, t_total)?;
        Ok(g.value(out).to_owned())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut hyper = serde_json::to_value(&self.model.cfg)
            .map_err(|e| Error::Format(format!("serializing the UNet config: {e}")))?;
        hyper["schedule"] = serde_json::Value::String(self.schedule.as_str().into());
        hyper["t_total"] = serde_json::Value::from(self.t_total as u64);
        ckpt::save(
            path,
            "jcdm",
            self.params.seed(),
            self.train_steps,
            hyper,
            &self.params,
            BTreeMap::new(),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = ckpt::load(path)?;
        if ck.header.kind != "jcdm" {
            return Err(Error::Format(format!(
                "expected a jcdm checkpoint, found kind `{}`",
                ck.header.kind
            )));
        }
        let cfg: UnetConfig = serde_json::from_value(ck.header.hyper.clone())
            .map_err(|e| Error::Format(format!("reading the UNet config: {e}")))?;
        let schedule = ck.header.hyper["schedule"]
            .as_str()
            .ok_or_else(|| Error::Format("jcdm checkpoint missing `schedule`".into()))
            .and_then(ScheduleKind::parse)?;
        let t_total = ck.header.hyper["t_total"]
            .as_u64()
            .ok_or_else(|| Error::Format("jcdm checkpoint missing `t_total`".into()))?
            as usize;
        let mut params = Params::new(ck.header.seed);
        let model = JciUnet::build(&mut params, &cfg);
        ck.restore_into(&mut params)?;
        Ok(FrozenUnet {
            params,
            model,
            train_steps: ck.header.train_steps,
            schedule,
            t_total,
        })
    }
}
