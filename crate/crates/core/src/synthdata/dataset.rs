//! Dataset materialisation: deterministic generation, PNG + JSONL
//! manifest output with checksums, and verified loading.
//!
//! Every random draw comes from a stream derived from
//! `(seed, purpose, subject-or-view index)`, so any record can be
//! regenerated in isolation and the corpus is byte-stable across runs
//! and thread counts.

use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use sha2::{Digest, Sha256};

use super::render::render_sprite;
use super::{
    fk_keypoints, sample_pose, sample_subject, Keypoints, Pose, Subject, NUM_KEYPOINTS,
    SPRITE_SIZE,
};
use crate::rng;
use crate::{Error, Result};

/// Quantise unit-range floats onto the 8-bit grid the PNG round trip
/// preserves exactly.
pub fn quantize_unit(img: &ArrayD<f32>) -> ArrayD<f32> {
    img.mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

/// One generated view held in memory.
#[derive(Clone, Debug)]
pub struct GeneratedView {
    pub pose: Pose,
    pub keypoints: Keypoints,
    /// `[3, 32, 32]`, already quantised to the 8-bit grid.
    pub image: ArrayD<f32>,
}

/// All views of one subject.
#[derive(Clone, Debug)]
pub struct SubjectViews {
    pub subject_id: u32,
    pub subject: Subject,
    pub views: Vec<GeneratedView>,
}

pub fn generate_subject(seed: u64, id: u32) -> Subject {
    let mut r = rng::derive(seed, "subject", id as u64);
    sample_subject(&mut r)
}

pub fn generate_view(seed: u64, id: u32, view: u32, subject: &Subject) -> GeneratedView {
    let mut r = rng::derive(seed, "pose", ((id as u64) << 16) | view as u64);
    let pose = sample_pose(&mut r);
    let keypoints = fk_keypoints(subject, &pose);
    let image = quantize_unit(&render_sprite(subject, &pose));
    GeneratedView {
        pose,
        keypoints,
        image,
    }
}

pub fn generate_subject_views(seed: u64, id: u32, k_views: usize) -> SubjectViews {
    let subject = generate_subject(seed, id);
    let views = (0..k_views)
        .map(|v| generate_view(seed, id, v as u32, &subject))
        .collect();
    SubjectViews {
        subject_id: id,
        subject,
        views,
    }
}

/// Deterministic subject split: `max(1, n/10)` subjects held out.
pub fn split_subjects(seed: u64, n_subjects: usize) -> (Vec<u32>, Vec<u32>) {
    use rand::seq::SliceRandom;
    let mut ids: Vec<u32> = (0..n_subjects as u32).collect();
    let mut r = rng::derive(seed, "split", 0);
    ids.shuffle(&mut r);
    let n_held = (n_subjects / 10).max(1).min(n_subjects.saturating_sub(1).max(1));
    let mut held: Vec<u32> = ids[..n_held].to_vec();
    let mut train: Vec<u32> = ids[n_held..].to_vec();
    held.sort_unstable();
    train.sort_unstable();
    (train, held)
}

/// Top-level dataset descriptor (`dataset.json`).
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct DatasetHeader {
    pub seed: u64,
    pub n_subjects: usize,
    pub k_views: usize,
    pub sprite_size: usize,
    pub train_subjects: Vec<u32>,
    pub held_out_subjects: Vec<u32>,
}

/// One `manifest.jsonl` line.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct ManifestRecord {
    pub subject: u32,
    pub view: u32,
    pub pose: [f32; 6],
    pub keypoints: [[f32; 2]; NUM_KEYPOINTS],
    pub image: String,
    pub sha256: String,
}

fn image_to_png_bytes(img: &ArrayD<f32>) -> Result<Vec<u8>> {
    let s = SPRITE_SIZE as u32;
    let mut raw = Vec::with_capacity((s * s * 3) as usize);
    for iy in 0..SPRITE_SIZE {
        for ix in 0..SPRITE_SIZE {
            for c in 0..3 {
                raw.push((img[[c, iy, ix]].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    let buf: image::RgbImage =
        image::ImageBuffer::from_raw(s, s, raw).expect("buffer sized to dims");
    let mut bytes = Vec::new();
    buf.write_to(
        &mut std::io::Cursor::new(&mut bytes),
        image::ImageFormat::Png,
    )
    .map_err(|e| Error::Format(format!("png encode: {e}")))?;
    Ok(bytes)
}

fn png_bytes_to_image(bytes: &[u8]) -> Result<ArrayD<f32>> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Format(format!("png decode: {e}")))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    if (w as usize, h as usize) != (SPRITE_SIZE, SPRITE_SIZE) {
        return Err(Error::Format(format!(
            "unexpected image size {w}x{h}, want {SPRITE_SIZE}x{SPRITE_SIZE}"
        )));
    }
    let mut out = ArrayD::<f32>::zeros(IxDyn(&[3, SPRITE_SIZE, SPRITE_SIZE]));
    for iy in 0..SPRITE_SIZE {
        for ix in 0..SPRITE_SIZE {
            let p = img.get_pixel(ix as u32, iy as u32);
            for c in 0..3 {
                out[[c, iy, ix]] = p.0[c] as f32 / 255.0;
            }
        }
    }
    Ok(out)
}

fn hex_sha256(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let d = h.finalize();
    d.iter().map(|b| format!("{b:02x}")).collect()
}

/// Generate and write the full corpus. Returns the header.
pub fn make_dataset(
    out_dir: &Path,
    seed: u64,
    n_subjects: usize,
    k_views: usize,
) -> Result<DatasetHeader> {
    if n_subjects < 2 {
        return Err(Error::argument("need at least 2 subjects"));
    }
    if k_views == 0 {
        return Err(Error::argument("k_views must be positive"));
    }
    let images_dir = out_dir.join("images");
    fs::create_dir_all(&images_dir)?;
    let (train_subjects, held_out_subjects) = split_subjects(seed, n_subjects);
    let header = DatasetHeader {
        seed,
        n_subjects,
        k_views,
        sprite_size: SPRITE_SIZE,
        train_subjects,
        held_out_subjects,
    };

    let manifest_path = out_dir.join("manifest.jsonl");
    let mut manifest = std::io::BufWriter::new(fs::File::create(&manifest_path)?);
    for id in 0..n_subjects as u32 {
        let sv = generate_subject_views(seed, id, k_views);
        for (v, view) in sv.views.iter().enumerate() {
            let rel = format!("images/s{id:04}_v{v:02}.png");
            let png = image_to_png_bytes(&view.image)?;
            fs::write(out_dir.join(&rel), &png)?;
            let rec = ManifestRecord {
                subject: id,
                view: v as u32,
                pose: view.pose.angles,
                keypoints: view.keypoints.pts,
                image: rel,
                sha256: hex_sha256(&png),
            };
            let line = serde_json::to_string(&rec)
                .map_err(|e| Error::Format(format!("manifest encode: {e}")))?;
            manifest.write_all(line.as_bytes())?;
            manifest.write_all(b"\n")?;
        }
    }
    manifest.flush()?;

    let header_json = serde_json::to_string_pretty(&header)
        .map_err(|e| Error::Format(format!("header encode: {e}")))?;
    fs::write(out_dir.join("dataset.json"), header_json)?;
    Ok(header)
}

/// One loaded view.
#[derive(Clone, Debug)]
pub struct LoadedView {
    pub pose: Pose,
    pub keypoints: Keypoints,
    pub image: ArrayD<f32>,
}

/// Fully loaded, checksum-verified dataset grouped by subject.
#[derive(Debug)]
pub struct LoadedDataset {
    pub header: DatasetHeader,
    /// Indexed `[subject][view]`.
    pub subjects: Vec<Vec<LoadedView>>,
}

impl LoadedDataset {
    pub fn view(&self, subject: u32, view: usize) -> &LoadedView {
        &self.subjects[subject as usize][view]
    }
}

/// Write a `[3, 32, 32]` unit-range raster as PNG.
pub fn save_image_png(path: &Path, img: &ArrayD<f32>) -> Result<()> {
    if img.shape() != [3, SPRITE_SIZE, SPRITE_SIZE] {
        return Err(Error::shape(format!(
            "expected a [3, {SPRITE_SIZE}, {SPRITE_SIZE}] raster, got {:?}",
            img.shape()
        )));
    }
    fs::write(path, image_to_png_bytes(img)?)?;
    Ok(())
}

/// Read a sprite PNG back as a `[3, H, W]` unit-range raster.
pub fn load_image_png(path: &Path) -> Result<ArrayD<f32>> {
    if !path.is_file() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    png_bytes_to_image(&fs::read(path)?)
}

/// Hex digest of `manifest.jsonl` — the corpus identity a run records so
/// results can be tied to the exact images they were computed on.
pub fn manifest_digest(dir: &Path) -> Result<String> {
    let path = dir.join("manifest.jsonl");
    if !path.is_file() {
        return Err(Error::MissingArtifact(path));
    }
    use sha2::Digest;
    let mut h = sha2::Sha256::new();
    h.update(fs::read(&path)?);
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Read a dataset directory back, verifying every image checksum.
pub fn load_dataset(dir: &Path) -> Result<LoadedDataset> {
    let header_path = dir.join("dataset.json");
    if !header_path.is_file() {
        return Err(Error::MissingArtifact(header_path));
    }
    let header: DatasetHeader = serde_json::from_str(&fs::read_to_string(&header_path)?)
        .map_err(|e| Error::Format(format!("dataset.json: {e}")))?;
    let manifest_path = dir.join("manifest.jsonl");
    if !manifest_path.is_file() {
        return Err(Error::MissingArtifact(manifest_path));
    }

    let mut subjects: Vec<Vec<Option<LoadedView>>> =
        vec![vec![None; header.k_views]; header.n_subjects];
    let reader = std::io::BufReader::new(fs::File::open(&manifest_path)?);
    for (ln, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("manifest line {}: {e}", ln + 1)))?;
        let img_path: PathBuf = dir.join(&rec.image);
        if !img_path.is_file() {
            return Err(Error::MissingArtifact(img_path));
        }
        let bytes = fs::read(&img_path)?;
        let digest = hex_sha256(&bytes);
        if digest != rec.sha256 {
            return Err(Error::Format(format!(
                "checksum mismatch for {}: manifest {} file {}",
                rec.image, rec.sha256, digest
            )));
        }
        let image = png_bytes_to_image(&bytes)?;
        let slot = subjects
            .get_mut(rec.subject as usize)
            .and_then(|s| s.get_mut(rec.view as usize))
            .ok_or_else(|| {
                Error::Format(format!(
                    "record ({}, {}) outside dataset bounds",
                    rec.subject, rec.view
                ))
            })?;
        *slot = Some(LoadedView {
            pose: Pose { angles: rec.pose },
            keypoints: Keypoints { pts: rec.keypoints },
            image,
        });
    }

    let mut out = Vec::with_capacity(header.n_subjects);
    for (sid, views) in subjects.into_iter().enumerate() {
        let mut vs = Vec::with_capacity(views.len());
        for (vid, v) in views.into_iter().enumerate() {
            vs.push(v.ok_or_else(|| {
                Error::Format(format!("manifest missing record for ({sid}, {vid})"))
            })?);
        }
        out.push(vs);
    }
    Ok(LoadedDataset {
        header,
        subjects: out,
    })
}
