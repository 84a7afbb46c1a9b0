//! Frozen feature extractors pretrained once on the synthetic corpus.
//!
//! Three small networks stand in for the large pretrained backbones the
//! diffusion stages presume: a contrastive semantic image encoder (unit-norm
//! vector per image), a conv VAE mapping sprites to 4-channel latents, and a
//! pose MLP over sinusoidally encoded keypoints. Each is pretrained by the
//! functions here, then wrapped in a `Frozen*` handle that only ever runs
//! forward passes; training stages assert their checksums never change.

mod encoder;
mod pose;
mod vae;

pub use encoder::{
    pretrain_semantic_encoder, separability, EncoderArch, EncoderPretrainConfig, FrozenEncoder,
    SEMANTIC_DIM,
};
pub use pose::{
    pretrain_pose_mlp, FrozenPose, PoseArch, PosePretrainConfig, POSE_ENC_PER_COORD,
    POSE_FEATURE_DIM,
};
pub use vae::{
    pretrain_vae, FrozenVae, VaeArch, VaePretrainConfig, LATENT_CHANNELS, LATENT_HW,
};

use ndarray::{Array1, ArrayD, IxDyn};

use crate::nn::embed;
use crate::synthdata::NUM_KEYPOINTS;
use crate::{Error, Result};

/// Standard sinusoidal timestep embedding: interleaved `sin`/`cos` of `t`
/// at geometrically spaced frequencies (period cap 10000).
pub fn timestep_embedding(t: usize, t_total: usize, dim: usize) -> Result<Array1<f32>> {
    if t >= t_total {
        return Err(Error::range(format!(
            "timestep {t} outside schedule of length {t_total}"
        )));
    }
    let table = embed::sinusoidal::<f32>(&[t as f64], dim, 10_000.0);
    Ok(table.row(0).to_owned())
}

/// Sinusoidal encoding of one keypoint set: the timestep encoding applied
/// per coordinate, concatenated in keypoint order (x then y). Coordinates
/// are expected in the normalized `[-1, 1]` range and are stretched by a
/// fixed factor so the higher frequencies actually turn over.
pub fn sinusoidal_pose_encoding(
    kps: &[[f32; 2]; NUM_KEYPOINTS],
    per_coord_dim: usize,
) -> Array1<f32> {
    assert!(
        per_coord_dim >= 2 && per_coord_dim % 2 == 0,
        "per-coordinate encoding width must be even and >= 2"
    );
    const STRETCH: f64 = 8.0;
    let mut coords = Vec::with_capacity(NUM_KEYPOINTS * 2);
    for kp in kps {
        coords.push(kp[0] as f64 * STRETCH);
        coords.push(kp[1] as f64 * STRETCH);
    }
    let table = embed::sinusoidal::<f32>(&coords, per_coord_dim, 100.0);
    let mut out = Array1::zeros(coords.len() * per_coord_dim);
    for (i, row) in table.outer_iter().enumerate() {
        out.slice_mut(ndarray::s![i * per_coord_dim..(i + 1) * per_coord_dim])
            .assign(&row);
    }
    out
}

/// Stack `[3, H, W]` images into one `[N, 3, H, W]` batch.
pub fn stack_images(images: &[&ArrayD<f32>]) -> ArrayD<f32> {
    assert!(!images.is_empty(), "cannot stack an empty image list");
    let shape = images[0].shape();
    assert_eq!(shape.len(), 3, "expected [C, H, W] images");
    let mut out = ArrayD::zeros(IxDyn(&[images.len(), shape[0], shape[1], shape[2]]));
    for (i, img) in images.iter().enumerate() {
        assert_eq!(img.shape(), shape, "mixed image shapes in batch");
        out.index_axis_mut(ndarray::Axis(0), i).assign(img);
    }
    out
}
