//! Joint Conditional Injection: tiles per-view images into one canvas,
//! builds the nine-channel denoiser input `z_in = [x_t | z_m | M]`, and
//! carries the cross-attention conditioning bundle. The denoising UNet
//! itself lives in [`unet`].

pub mod unet;

pub use unet::{unet_forward, view_attention, FrozenUnet, JciUnet, UnetConfig, ViewAttn};

use ndarray::{ArrayD, Axis, IxDyn, Slice};
use serde::{Deserialize, Serialize};

use crate::backbones::{FrozenVae, LATENT_CHANNELS};
use crate::{Error, Result};

/// Role of one canvas slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotRole {
    Reference,
    Target,
}

/// Fixed tiling of S slots onto a rows x cols grid, slot index row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotLayout {
    rows: usize,
    cols: usize,
    roles: Vec<SlotRole>,
}

impl SlotLayout {
    pub fn new(rows: usize, cols: usize, roles: Vec<SlotRole>) -> Result<Self> {
        if rows == 0 || cols == 0 || rows * cols != roles.len() {
            return Err(Error::Layout(format!(
                "grid {rows}x{cols} does not hold {} slots",
                roles.len()
            )));
        }
        if roles.len() > 9 {
            return Err(Error::Layout(format!(
                "at most 9 slots are supported, got {}",
                roles.len()
            )));
        }
        Ok(SlotLayout { rows, cols, roles })
    }

    /// The desk default: a 2x2 grid whose reference slots are listed in
    /// `reference_slots` and every other slot is a target.
    pub fn two_by_two(reference_slots: &[usize]) -> Result<Self> {
        let mut roles = vec![SlotRole::Target; 4];
        for &r in reference_slots {
            if r >= 4 {
                return Err(Error::Layout(format!("reference slot {r} outside 2x2 grid")));
            }
            roles[r] = SlotRole::Reference;
        }
        SlotLayout::new(2, 2, roles)
    }

    pub fn s(&self) -> usize {
        self.roles.len()
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn role(&self, slot: usize) -> SlotRole {
        self.roles[slot]
    }

    pub fn roles(&self) -> &[SlotRole] {
        &self.roles
    }

    pub fn reference_slots(&self) -> Vec<usize> {
        (0..self.s())
            .filter(|&i| self.roles[i] == SlotRole::Reference)
            .collect()
    }

    pub fn target_slots(&self) -> Vec<usize> {
        (0..self.s())
            .filter(|&i| self.roles[i] == SlotRole::Target)
            .collect()
    }

    /// Top-left corner of `slot`'s block for per-slot dimensions `(h, w)`.
    pub fn block_origin(&self, slot: usize, h: usize, w: usize) -> (usize, usize) {
        ((slot / self.cols) * h, (slot % self.cols) * w)
    }

    /// Inference requires something to generate.
    pub fn require_targets(&self) -> Result<()> {
        if self.target_slots().is_empty() {
            return Err(Error::Layout(
                "layout has no target slots; nothing to generate".into(),
            ));
        }
        Ok(())
    }
}

/// Copy `block` into `canvas` at `slot`'s position (shared by all assembly
/// ops; `canvas` is `[C, rows*h, cols*w]`, `block` is `[C, h, w]`).
fn place_block(canvas: &mut ArrayD<f32>, block: &ArrayD<f32>, layout: &SlotLayout, slot: usize) {
    let (h, w) = (block.shape()[1], block.shape()[2]);
    let (r0, c0) = layout.block_origin(slot, h, w);
    let mut dst = canvas.slice_axis_mut(Axis(1), Slice::from(r0..r0 + h));
    let mut dst = dst.slice_axis_mut(Axis(2), Slice::from(c0..c0 + w));
    dst.assign(block);
}

/// Read `slot`'s `[C, h, w]` block back out of a tiled canvas.
pub fn read_block(canvas: &ArrayD<f32>, layout: &SlotLayout, slot: usize, h: usize, w: usize) -> ArrayD<f32> {
    let (r0, c0) = layout.block_origin(slot, h, w);
    canvas
        .slice_axis(Axis(1), Slice::from(r0..r0 + h))
        .slice_axis(Axis(2), Slice::from(c0..c0 + w))
        .to_owned()
}

/// Spatially concatenate per-slot images into one joint image. `None`
/// entries are black placeholders. Every image must be `[3, h, w]` with the
/// given per-slot dimensions.
pub fn assemble_joint_image(
    views: &[Option<&ArrayD<f32>>],
    layout: &SlotLayout,
    hw: (usize, usize),
) -> Result<ArrayD<f32>> {
    if views.len() != layout.s() {
        return Err(Error::argument(format!(
            "expected {} views for the layout, got {}",
            layout.s(),
            views.len()
        )));
    }
    let (h, w) = hw;
    let mut canvas = ArrayD::<f32>::zeros(IxDyn(&[3, layout.rows * h, layout.cols * w]));
    for (slot, view) in views.iter().enumerate() {
        if let Some(img) = view {
            if img.shape() != [3, h, w] {
                return Err(Error::shape(format!(
                    "slot {slot}: expected [3, {h}, {w}], got {:?}",
                    img.shape()
                )));
            }
            place_block(&mut canvas, img, layout, slot);
        }
    }
    Ok(canvas)
}

/// VAE-encode reference views into their slots and fill target slots with
/// the black-image latent `e_black`. References must cover exactly the
/// layout's reference slots.
pub fn assemble_masked_latent(
    references: &[(usize, &ArrayD<f32>)],
    layout: &SlotLayout,
    vae: &FrozenVae,
) -> Result<ArrayD<f32>> {
    let ref_slots = layout.reference_slots();
    for &(slot, _) in references {
        if slot >= layout.s() {
            return Err(Error::Layout(format!("reference slot {slot} out of range")));
        }
        if layout.role(slot) != SlotRole::Reference {
            return Err(Error::Layout(format!(
                "slot {slot} is a target slot; references belong in reference slots"
            )));
        }
    }
    let mut provided: Vec<usize> = references.iter().map(|&(s, _)| s).collect();
    provided.sort_unstable();
    provided.dedup();
    if provided.len() != references.len() || provided != ref_slots {
        return Err(Error::Layout(format!(
            "references must cover the layout's reference slots exactly ({ref_slots:?})"
        )));
    }

    let (lh, lw) = (vae.e_black.shape()[1], vae.e_black.shape()[2]);
    let mut z_m =
        ArrayD::<f32>::zeros(IxDyn(&[LATENT_CHANNELS, layout.rows * lh, layout.cols * lw]));
    for slot in 0..layout.s() {
        if layout.role(slot) == SlotRole::Target {
            place_block(&mut z_m, &vae.e_black, layout, slot);
        }
    }
    for &(slot, img) in references {
        let z = vae.encode_one(img)?;
        place_block(&mut z_m, &z, layout, slot);
    }
    Ok(z_m)
}

/// Binary spatial mask over the latent canvas: 1 on target-slot blocks,
/// 0 on reference-slot blocks. `latent_hw` is the per-slot latent size.
pub fn build_mask_channel(layout: &SlotLayout, latent_hw: (usize, usize)) -> ArrayD<f32> {
    let (h, w) = latent_hw;
    let mut mask = ArrayD::<f32>::zeros(IxDyn(&[1, layout.rows * h, layout.cols * w]));
    let ones = ArrayD::<f32>::from_elem(IxDyn(&[1, h, w]), 1.0);
    for slot in layout.target_slots() {
        place_block(&mut mask, &ones, layout, slot);
    }
    mask
}

/// Eq. 1: `z_in = Concat_channel(x_t, z_m, M)` — channel order exactly
/// `[x_t(4) | z_m(4) | mask(1)]`, nine channels.
pub fn concat_input(x_t: &ArrayD<f32>, z_m: &ArrayD<f32>, mask: &ArrayD<f32>) -> Result<ArrayD<f32>> {
    if x_t.ndim() != 3 || x_t.shape()[0] != LATENT_CHANNELS {
        return Err(Error::shape(format!(
            "x_t must be [{LATENT_CHANNELS}, H, W], got {:?}",
            x_t.shape()
        )));
    }
    let (h, w) = (x_t.shape()[1], x_t.shape()[2]);
    if z_m.shape() != [LATENT_CHANNELS, h, w] {
        return Err(Error::shape(format!(
            "z_m must match x_t spatially, got {:?}",
            z_m.shape()
        )));
    }
    if mask.shape() != [1, h, w] {
        return Err(Error::shape(format!(
            "mask must be [1, {h}, {w}], got {:?}",
            mask.shape()
        )));
    }
    let mut z_in = ArrayD::<f32>::zeros(IxDyn(&[9, h, w]));
    z_in.slice_axis_mut(Axis(0), Slice::from(0..4)).assign(x_t);
    z_in.slice_axis_mut(Axis(0), Slice::from(4..8)).assign(z_m);
    z_in.slice_axis_mut(Axis(0), Slice::from(8..9)).assign(mask);
    Ok(z_in)
}

/// The nine-channel joint latent of Eq. 1 with its ingredients.
#[derive(Clone, Debug)]
pub struct JointLatent {
    pub x_t: ArrayD<f32>,
    pub z_m: ArrayD<f32>,
    pub mask: ArrayD<f32>,
    pub z_in: ArrayD<f32>,
}

impl JointLatent {
    pub fn new(x_t: ArrayD<f32>, z_m: ArrayD<f32>, mask: ArrayD<f32>) -> Result<Self> {
        if mask.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::argument("mask channel must be binary"));
        }
        let z_in = concat_input(&x_t, &z_m, &mask)?;
        Ok(JointLatent { x_t, z_m, mask, z_in })
    }
}

/// Table 2's ablation ladder. Each flag gates exactly one code path:
/// `use_jci` the nine-channel joint input (off: 4-channel single-latent
/// path), `use_view_attention` the cross-view attention blocks, and
/// `use_apm_prior` the V_pred rows of the conditioning token set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub use_jci: bool,
    pub use_view_attention: bool,
    pub use_apm_prior: bool,
}

impl AblationFlags {
    pub fn b0() -> Self {
        AblationFlags { use_jci: false, use_view_attention: false, use_apm_prior: false }
    }

    pub fn b1() -> Self {
        AblationFlags { use_jci: true, use_view_attention: false, use_apm_prior: false }
    }

    pub fn b2() -> Self {
        AblationFlags { use_jci: true, use_view_attention: true, use_apm_prior: false }
    }

    pub fn full() -> Self {
        AblationFlags { use_jci: true, use_view_attention: true, use_apm_prior: true }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "B0" | "b0" => Ok(Self::b0()),
            "B1" | "b1" => Ok(Self::b1()),
            "B2" | "b2" => Ok(Self::b2()),
            "full" | "FULL" => Ok(Self::full()),
            other => Err(Error::argument(format!(
                "unknown ablation config `{other}` (expected B0|B1|B2|full)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match (self.use_jci, self.use_view_attention, self.use_apm_prior) {
            (false, false, false) => "B0",
            (true, false, false) => "B1",
            (true, true, false) => "B2",
            (true, true, true) => "full",
            _ => "custom",
        }
    }
}

/// Cross-attention conditioning for one canvas: the APM appearance prior,
/// reference-view semantic embeddings, and per-slot pose features, each row
/// tagged with the slot it belongs to.
#[derive(Clone, Debug)]
pub struct ConditionBundle {
    /// `K x D` appearance prior rows and their slots (None outside `full`).
    pub v_pred: Option<(ndarray::Array2<f32>, Vec<usize>)>,
    /// Reference-view embeddings, one row per reference, with slots.
    pub f_i: ndarray::Array2<f32>,
    pub f_i_slots: Vec<usize>,
    /// Pose features for every slot's wanted pose, with slots.
    pub f_p: ndarray::Array2<f32>,
    pub f_p_slots: Vec<usize>,
    /// Guidance scale carried to the sampler.
    pub w: f32,
    /// CFG null branch: the token set is replaced by a learned null token.
    pub null_condition: bool,
}

impl ConditionBundle {
    /// Internal consistency: one slot per row, slots within range.
    pub fn validate(&self, s: usize, d_embed: usize, d_pose: usize) -> Result<()> {
        if self.f_i.nrows() != self.f_i_slots.len()
            || self.f_p.nrows() != self.f_p_slots.len()
        {
            return Err(Error::argument("bundle rows and slot tags disagree"));
        }
        if self.f_i.nrows() > 0 && self.f_i.ncols() != d_embed {
            return Err(Error::shape(format!(
                "F_I width {} but the encoder dimension is {d_embed}",
                self.f_i.ncols()
            )));
        }
        if self.f_p.nrows() > 0 && self.f_p.ncols() != d_pose {
            return Err(Error::shape(format!(
                "F_P width {} but the pose dimension is {d_pose}",
                self.f_p.ncols()
            )));
        }
        if let Some((v, slots)) = &self.v_pred {
            if v.nrows() != slots.len() {
                return Err(Error::argument("V_pred rows and slot tags disagree"));
            }
            if v.ncols() != d_embed {
                return Err(Error::shape(format!(
                    "V_pred width {} but the encoder dimension is {d_embed}",
                    v.ncols()
                )));
            }
            if slots.iter().any(|&sl| sl >= s) {
                return Err(Error::range("V_pred slot tag out of range".to_string()));
            }
        }
        if self
            .f_i_slots
            .iter()
            .chain(self.f_p_slots.iter())
            .any(|&sl| sl >= s)
        {
            return Err(Error::range("bundle slot tag out of range".to_string()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout_1r3t() -> SlotLayout {
        SlotLayout::two_by_two(&[0]).unwrap()
    }

    #[test]
    fn layout_arithmetic_and_roles() {
        let l = layout_1r3t();
        assert_eq!(l.s(), 4);
        assert_eq!(l.grid(), (2, 2));
        assert_eq!(l.reference_slots(), vec![0]);
        assert_eq!(l.target_slots(), vec![1, 2, 3]);
        // Row-major block origins for 8x8 blocks.
        assert_eq!(l.block_origin(0, 8, 8), (0, 0));
        assert_eq!(l.block_origin(1, 8, 8), (0, 8));
        assert_eq!(l.block_origin(2, 8, 8), (8, 0));
        assert_eq!(l.block_origin(3, 8, 8), (8, 8));
        assert!(SlotLayout::new(2, 2, vec![SlotRole::Target; 3]).is_err());
        assert!(SlotLayout::new(2, 5, vec![SlotRole::Target; 10]).is_err());
    }

    #[test]
    fn joint_image_tiling_round_trips() {
        let l = layout_1r3t();
        let mk = |fill: f32| ArrayD::<f32>::from_elem(IxDyn(&[3, 4, 4]), fill);
        let (a, b) = (mk(0.25), mk(0.75));
        let canvas =
            assemble_joint_image(&[Some(&a), None, Some(&b), None], &l, (4, 4)).unwrap();
        assert_eq!(canvas.shape(), &[3, 8, 8]);
        assert_eq!(read_block(&canvas, &l, 0, 4, 4), a);
        assert_eq!(read_block(&canvas, &l, 2, 4, 4), b);
        assert!(read_block(&canvas, &l, 1, 4, 4).iter().all(|&v| v == 0.0));
        // Count mismatch is an argument error.
        assert!(matches!(
            assemble_joint_image(&[Some(&a)], &l, (4, 4)).unwrap_err(),
            Error::Argument(_)
        ));
        // All-black inputs give an all-black canvas.
        let black = assemble_joint_image(&[None, None, None, None], &l, (4, 4)).unwrap();
        assert!(black.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mask_channel_area_ratios() {
        let all_ref = SlotLayout::new(2, 2, vec![SlotRole::Reference; 4]).unwrap();
        assert!(build_mask_channel(&all_ref, (8, 8)).iter().all(|&v| v == 0.0));
        let all_tgt = SlotLayout::new(2, 2, vec![SlotRole::Target; 4]).unwrap();
        assert!(build_mask_channel(&all_tgt, (8, 8)).iter().all(|&v| v == 1.0));
        let m = build_mask_channel(&layout_1r3t(), (8, 8));
        let mean: f32 = m.iter().sum::<f32>() / m.len() as f32;
        assert_eq!(mean, 0.75);
    }

    #[test]
    fn concat_input_is_bitwise_sliceable() {
        let mut x_t = ArrayD::<f32>::zeros(IxDyn(&[4, 6, 6]));
        let mut z_m = ArrayD::<f32>::zeros(IxDyn(&[4, 6, 6]));
        let mut mask = ArrayD::<f32>::zeros(IxDyn(&[1, 6, 6]));
        for (i, v) in x_t.iter_mut().enumerate() {
            *v = (i as f32).sin();
        }
        for (i, v) in z_m.iter_mut().enumerate() {
            *v = (i as f32).cos();
        }
        for (i, v) in mask.iter_mut().enumerate() {
            *v = (i % 2) as f32;
        }
        let z_in = concat_input(&x_t, &z_m, &mask).unwrap();
        assert_eq!(z_in.shape(), &[9, 6, 6]);
        assert_eq!(z_in.slice_axis(Axis(0), Slice::from(0..4)), x_t.view());
        assert_eq!(z_in.slice_axis(Axis(0), Slice::from(4..8)), z_m.view());
        assert_eq!(z_in.slice_axis(Axis(0), Slice::from(8..9)), mask.view());
        // Spatial mismatch is a shape error.
        let bad = ArrayD::<f32>::zeros(IxDyn(&[4, 5, 6]));
        assert!(matches!(
            concat_input(&bad, &z_m, &mask).unwrap_err(),
            Error::Shape(_)
        ));
    }

    #[test]
    fn ablation_flag_presets_and_names() {
        assert_eq!(AblationFlags::parse("B0").unwrap(), AblationFlags::b0());
        assert_eq!(AblationFlags::parse("full").unwrap(), AblationFlags::full());
        assert!(AblationFlags::parse("B7").is_err());
        assert_eq!(AblationFlags::b2().name(), "B2");
        assert!(!AblationFlags::b1().use_view_attention);
        assert!(AblationFlags::b2().use_view_attention && !AblationFlags::b2().use_apm_prior);
    }
}
