//! Layered sprite rasteriser.
//!
//! Every pixel is computed independently (the pixel loop parallelises
//! over disjoint outputs), and every primitive is evaluated with the
//! sign-symmetric arithmetic described in the module docs, so
//! `render(mirror(pose))` equals `flip_x(render(pose))` bitwise.

use ndarray::{ArrayD, IxDyn};

use super::{fk_skeleton, is_front_facing, Pose, Subject, SPRITE_SIZE};
use crate::par;

/// Fixed background colour.
pub const BACKGROUND: [f32; 3] = [0.085, 0.09, 0.115];

/// Distance from `(px, py)` to segment `a..b`.
#[inline]
fn seg_dist(px: f32, py: f32, a: [f32; 2], b: [f32; 2]) -> f32 {
    let ex = b[0] - a[0];
    let ey = b[1] - a[1];
    let dx = px - a[0];
    let dy = py - a[1];
    let len2 = ex * ex + ey * ey;
    let t = if len2 > 0.0 {
        ((dx * ex + dy * ey) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let qx = px - (a[0] + t * ex);
    let qy = py - (a[1] + t * ey);
    (qx * qx + qy * qy).sqrt()
}

/// Anti-aliased capsule coverage with a one-pixel ramp.
#[inline]
fn capsule(px: f32, py: f32, a: [f32; 2], b: [f32; 2], radius: f32) -> f32 {
    (radius + 0.5 - seg_dist(px, py, a, b)).clamp(0.0, 1.0)
}

/// Commutative coverage union (`a + b - a*b` is symmetric bitwise).
#[inline]
fn union(a: f32, b: f32) -> f32 {
    a + b - a * b
}

#[inline]
fn blend(dst: &mut [f32; 3], cov: f32, color: [f32; 3]) {
    for c in 0..3 {
        dst[c] = dst[c] + cov * (color[c] - dst[c]);
    }
}

/// Rasterise a subject in a pose to `[3, 32, 32]` RGB in [0,1].
pub fn render_sprite(subject: &Subject, pose: &Pose) -> ArrayD<f32> {
    let sk = fk_skeleton(subject, pose);
    let kp = &sk.kp.pts;
    let pr = &subject.proportions;
    let pal = &subject.palette;
    let front = is_front_facing(pose);

    let torso_r = pr.torso_w * (0.55 + 0.45 * sk.orient_c.abs());
    let garment_r = torso_r * 1.12;
    let neck = kp[super::KP_NECK];
    let pelvis = kp[super::KP_PELVIS];
    // Garment segment: a sub-span of the torso axis.
    let g_top = [
        neck[0] + 0.22 * (pelvis[0] - neck[0]),
        neck[1] + 0.22 * (pelvis[1] - neck[1]),
    ];
    let g_bot = [
        neck[0] + 0.88 * (pelvis[0] - neck[0]),
        neck[1] + 0.88 * (pelvis[1] - neck[1]),
    ];
    let gy_top = g_top[1].min(g_bot[1]) - garment_r;
    let gy_bot = g_top[1].max(g_bot[1]) + garment_r;
    let band_h = (gy_bot - gy_top) / subject.stripe_count as f32;
    let back_garment = [
        pal.garment[0] * 0.72,
        pal.garment[1] * 0.72,
        pal.garment[2] * 0.72,
    ];

    let half = SPRITE_SIZE as f32 / 2.0;
    let mut pixels = vec![[0.0f32; 3]; SPRITE_SIZE * SPRITE_SIZE];
    par::for_each_indexed(&mut pixels, |idx, out| {
        let iy = idx / SPRITE_SIZE;
        let ix = idx % SPRITE_SIZE;
        let px = ix as f32 + 0.5 - half;
        let py = iy as f32 + 0.5 - half;
        let mut rgb = BACKGROUND;

        // Fixed z-order: legs, torso, garment, arms, head.
        let legs = union(
            capsule(px, py, sk.hip_l, kp[super::KP_FOOT_L], pr.limb_w),
            capsule(px, py, sk.hip_r, kp[super::KP_FOOT_R], pr.limb_w),
        );
        blend(&mut rgb, legs, pal.limb);

        let torso = capsule(px, py, neck, pelvis, torso_r);
        blend(&mut rgb, torso, pal.torso);

        let garment = capsule(px, py, g_top, g_bot, garment_r);
        let gcolor = if front {
            // Horizontal stripes: a function of y only.
            let band = ((py - gy_top) / band_h).floor();
            let band = (band.max(0.0) as usize).min(subject.stripe_count as usize - 1);
            if band % 2 == 0 {
                pal.stripe
            } else {
                pal.garment
            }
        } else {
            back_garment
        };
        blend(&mut rgb, garment, gcolor);

        let arm_r = pr.limb_w * 0.9;
        let arms = union(
            capsule(px, py, kp[super::KP_SHOULDER_L], kp[super::KP_HAND_L], arm_r),
            capsule(px, py, kp[super::KP_SHOULDER_R], kp[super::KP_HAND_R], arm_r),
        );
        blend(&mut rgb, arms, pal.skin);

        let head = capsule(px, py, kp[super::KP_HEAD], kp[super::KP_HEAD], pr.head_r);
        blend(&mut rgb, head, pal.skin);

        *out = rgb;
    });

    let mut img = ArrayD::<f32>::zeros(IxDyn(&[3, SPRITE_SIZE, SPRITE_SIZE]));
    for iy in 0..SPRITE_SIZE {
        for ix in 0..SPRITE_SIZE {
            let p = pixels[iy * SPRITE_SIZE + ix];
            for c in 0..3 {
                img[[c, iy, ix]] = p[c];
            }
        }
    }
    img
}

/// Horizontal flip of a `[C, H, W]` image.
pub fn flip_x(img: &ArrayD<f32>) -> ArrayD<f32> {
    let s = img.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = ArrayD::<f32>::zeros(IxDyn(&[c, h, w]));
    for ci in 0..c {
        for iy in 0..h {
            for ix in 0..w {
                out[[ci, iy, ix]] = img[[ci, iy, w - 1 - ix]];
            }
        }
    }
    out
}
