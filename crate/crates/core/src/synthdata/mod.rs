//! Procedural sprite corpus: articulated stick-figure characters with
//! per-subject appearance, rendered at 32x32.
//!
//! The geometry pipeline is built so that mirroring is *exact*: negating
//! the pose (and swapping left/right) produces a raster that equals the
//! horizontal flip of the original bit-for-bit. Two ingredients make that
//! hold in f32: trig goes through [`odd_sin`]/[`even_cos`] (odd/even by
//! construction, not by libm's grace), and every pixel/keypoint x
//! coordinate is measured from the canvas centre so mirroring is exact
//! sign flip.

pub mod dataset;
pub mod render;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Canvas edge length in pixels.
pub const SPRITE_SIZE: usize = 32;
/// Skeleton keypoint count.
pub const NUM_KEYPOINTS: usize = 10;
/// Pose degrees of freedom.
pub const NUM_ANGLES: usize = 6;

/// Keypoint indices.
pub const KP_HEAD: usize = 0;
pub const KP_NECK: usize = 1;
pub const KP_SHOULDER_L: usize = 2;
pub const KP_SHOULDER_R: usize = 3;
pub const KP_HAND_L: usize = 4;
pub const KP_HAND_R: usize = 5;
pub const KP_PELVIS: usize = 6;
pub const KP_FOOT_L: usize = 7;
pub const KP_FOOT_R: usize = 8;
pub const KP_GARMENT: usize = 9;

/// Angle indices.
pub const ANG_ARM_L: usize = 0;
pub const ANG_ARM_R: usize = 1;
pub const ANG_LEG_L: usize = 2;
pub const ANG_LEG_R: usize = 3;
pub const ANG_ORIENT: usize = 4;
pub const ANG_TILT: usize = 5;

/// Joint angles in radians. Orientation spans the full turn; the figure
/// faces the camera whenever `even_cos(orient) >= 0`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Pose {
    pub angles: [f32; NUM_ANGLES],
}

/// Skeleton keypoints in centre-origin pixel coordinates (y grows down).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keypoints {
    pub pts: [[f32; 2]; NUM_KEYPOINTS],
}

/// Per-subject body proportions, in pixels.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct Proportions {
    pub head_r: f32,
    pub neck_len: f32,
    pub torso_len: f32,
    pub torso_w: f32,
    pub arm_len: f32,
    pub leg_len: f32,
    pub shoulder_span: f32,
    pub hip_span: f32,
    pub limb_w: f32,
}

/// Per-subject colours, linear RGB in [0,1].
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct Palette {
    pub skin: [f32; 3],
    pub torso: [f32; 3],
    pub garment: [f32; 3],
    pub stripe: [f32; 3],
    pub limb: [f32; 3],
}

/// A character identity: everything except the pose.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct Subject {
    pub proportions: Proportions,
    pub palette: Palette,
    /// Number of horizontal garment stripes (front views only).
    pub stripe_count: u8,
}

/// Odd-symmetric sine: `odd_sin(-a)` is bitwise `-odd_sin(a)`.
#[inline]
pub fn odd_sin(a: f32) -> f32 {
    let s = a.abs().sin();
    if a < 0.0 {
        -s
    } else {
        s
    }
}

/// Even-symmetric cosine: `even_cos(-a)` is bitwise `even_cos(a)`.
#[inline]
pub fn even_cos(a: f32) -> f32 {
    a.abs().cos()
}

/// Mirror a pose: swap left/right joints and negate every angle.
pub fn mirror_pose(p: &Pose) -> Pose {
    let a = &p.angles;
    Pose {
        angles: [
            -a[ANG_ARM_R],
            -a[ANG_ARM_L],
            -a[ANG_LEG_R],
            -a[ANG_LEG_L],
            -a[ANG_ORIENT],
            -a[ANG_TILT],
        ],
    }
}

/// Mirror keypoints: negate x and swap the left/right pairs.
pub fn mirror_keypoints(k: &Keypoints) -> Keypoints {
    let mut pts = k.pts;
    for p in &mut pts {
        p[0] = -p[0];
    }
    pts.swap(KP_SHOULDER_L, KP_SHOULDER_R);
    pts.swap(KP_HAND_L, KP_HAND_R);
    pts.swap(KP_FOOT_L, KP_FOOT_R);
    Keypoints { pts }
}

/// Full skeleton: public keypoints plus the internal joints the renderer
/// needs (hips) and the foreshortening scale.
#[derive(Clone, Copy, Debug)]
pub struct Skeleton {
    pub kp: Keypoints,
    pub hip_l: [f32; 2],
    pub hip_r: [f32; 2],
    /// `even_cos(orientation)` — negative means the figure shows its back.
    pub orient_c: f32,
}

/// Forward kinematics: keypoint positions for a subject in a pose.
pub fn fk_keypoints(subject: &Subject, pose: &Pose) -> Keypoints {
    fk_skeleton(subject, pose).kp
}

/// Forward kinematics with renderer internals exposed.
pub fn fk_skeleton(subject: &Subject, pose: &Pose) -> Skeleton {
    let pr = &subject.proportions;
    let a = &pose.angles;
    let orient_c = even_cos(a[ANG_ORIENT]);
    let orient_s = odd_sin(a[ANG_ORIENT]);
    // Foreshortened horizontal spans (even in the orientation angle).
    let span_scale = 0.35 + 0.65 * orient_c.abs();
    let shoulder_half = 0.5 * pr.shoulder_span * span_scale;
    let hip_half = 0.5 * pr.hip_span * span_scale;
    let lean = 1.8 * orient_s;

    let pelvis = [0.0f32, 2.5];
    let neck = [pelvis[0] + lean, pelvis[1] - pr.torso_len];
    let head = [
        neck[0] + 1.1 * odd_sin(a[ANG_TILT]),
        neck[1] - pr.neck_len - pr.head_r,
    ];
    let sh_l = [neck[0] - shoulder_half, neck[1] + 0.6];
    let sh_r = [neck[0] + shoulder_half, neck[1] + 0.6];
    let hand_l = [
        sh_l[0] + pr.arm_len * odd_sin(a[ANG_ARM_L]),
        sh_l[1] + pr.arm_len * even_cos(a[ANG_ARM_L]),
    ];
    let hand_r = [
        sh_r[0] + pr.arm_len * odd_sin(a[ANG_ARM_R]),
        sh_r[1] + pr.arm_len * even_cos(a[ANG_ARM_R]),
    ];
    let hip_l = [pelvis[0] - hip_half, pelvis[1]];
    let hip_r = [pelvis[0] + hip_half, pelvis[1]];
    let foot_l = [
        hip_l[0] + pr.leg_len * odd_sin(a[ANG_LEG_L]),
        hip_l[1] + pr.leg_len * even_cos(a[ANG_LEG_L]),
    ];
    let foot_r = [
        hip_r[0] + pr.leg_len * odd_sin(a[ANG_LEG_R]),
        hip_r[1] + pr.leg_len * even_cos(a[ANG_LEG_R]),
    ];
    let garment = [
        0.5 * (neck[0] + pelvis[0]),
        0.5 * (neck[1] + pelvis[1]) + 0.15 * pr.torso_len,
    ];

    Skeleton {
        kp: Keypoints {
            pts: [
                head, neck, sh_l, sh_r, hand_l, hand_r, pelvis, foot_l, foot_r, garment,
            ],
        },
        hip_l,
        hip_r,
        orient_c,
    }
}

/// True when the figure shows its front (garment pattern visible).
pub fn is_front_facing(pose: &Pose) -> bool {
    even_cos(pose.angles[ANG_ORIENT]) >= 0.0
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = (h.fract() + 1.0).fract() * 6.0;
    let i = h.floor();
    let f = h - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Draw a random subject from an RNG stream.
pub fn sample_subject(rng: &mut ChaCha8Rng) -> Subject {
    let proportions = Proportions {
        head_r: rng.gen_range(2.2..3.2),
        neck_len: rng.gen_range(0.7..1.5),
        torso_len: rng.gen_range(6.0..9.0),
        torso_w: rng.gen_range(2.4..3.8),
        arm_len: rng.gen_range(4.5..6.5),
        leg_len: rng.gen_range(5.0..7.5),
        shoulder_span: rng.gen_range(4.5..7.0),
        hip_span: rng.gen_range(2.5..4.5),
        limb_w: rng.gen_range(0.85..1.35),
    };
    let skin_h = rng.gen_range(0.05..0.11);
    let skin = hsv_to_rgb(skin_h, rng.gen_range(0.25..0.55), rng.gen_range(0.75..0.95));
    let torso_h = rng.gen_range(0.0..1.0);
    let torso = hsv_to_rgb(torso_h, rng.gen_range(0.55..0.9), rng.gen_range(0.45..0.85));
    // Garment hue offset keeps it distinguishable from the torso.
    let garment_h = torso_h + rng.gen_range(0.25..0.75);
    let garment = hsv_to_rgb(garment_h, rng.gen_range(0.6..0.95), rng.gen_range(0.5..0.9));
    let stripe = hsv_to_rgb(
        garment_h + rng.gen_range(0.4..0.6),
        rng.gen_range(0.2..0.5),
        rng.gen_range(0.85..1.0),
    );
    let limb = hsv_to_rgb(torso_h + rng.gen_range(-0.08..0.08), rng.gen_range(0.4..0.8), rng.gen_range(0.2..0.5));
    Subject {
        proportions,
        palette: Palette {
            skin,
            torso,
            garment,
            stripe,
            limb,
        },
        stripe_count: rng.gen_range(2..=5),
    }
}

/// Draw a random pose from an RNG stream.
pub fn sample_pose(rng: &mut ChaCha8Rng) -> Pose {
    Pose {
        angles: [
            rng.gen_range(-0.9..0.9f32),
            rng.gen_range(-0.9..0.9f32),
            rng.gen_range(-0.55..0.55f32),
            rng.gen_range(-0.55..0.55f32),
            rng.gen_range(-std::f32::consts::PI..std::f32::consts::PI),
            rng.gen_range(-0.4..0.4f32),
        ],
    }
}

/// Keypoints scaled to roughly [-1, 1] for encoder inputs.
pub fn normalized_keypoints(k: &Keypoints) -> [[f32; 2]; NUM_KEYPOINTS] {
    let inv = 1.0 / (SPRITE_SIZE as f32 / 2.0);
    let mut out = k.pts;
    for p in &mut out {
        p[0] *= inv;
        p[1] *= inv;
    }
    out
}
