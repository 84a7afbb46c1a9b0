//! Evaluation metrics: exact SSIM and PSNR on images, embedding cosine
//! similarity, a proxy Fréchet feature distance over the frozen semantic
//! encoder ("proxy-FID" — the features are ours, not Inception's), and a
//! cross-view consistency score. All statistics run in f64 regardless of
//! the image dtype.

mod linalg;
pub mod plot;

pub use linalg::{sqrt_psd, sym_eigen, trace_sqrt_product};

use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayD, Axis};
use serde::{Deserialize, Serialize};

use crate::backbones::FrozenEncoder;
use crate::{Error, Result};

/// SSIM constants per the standard formulation with dynamic range L = 1:
/// an 11×11 Gaussian window with σ = 1.5, C1 = (0.01 L)², C2 = (0.03 L)².
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Diagonal ridge applied to covariance estimates from fewer than D + 1
/// samples, where the sample covariance is rank-deficient.
pub const FID_EPS: f64 = 1e-6;

fn gaussian_window() -> Array2<f64> {
    let n = SSIM_WINDOW as isize;
    let half = (n / 2) as f64;
    let mut w = Array2::<f64>::zeros((SSIM_WINDOW, SSIM_WINDOW));
    for i in 0..SSIM_WINDOW {
        for j in 0..SSIM_WINDOW {
            let dy = i as f64 - half;
            let dx = j as f64 - half;
            w[[i, j]] = (-(dx * dx + dy * dy) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        }
    }
    let sum = w.sum();
    w.mapv_inplace(|v| v / sum);
    w
}

/// Grayscale conversion: the channel average ("luma average") of a
/// `[3, H, W]` image; `[H, W]` inputs pass through.
fn to_luma(img: &ArrayD<f32>) -> Result<Array2<f64>> {
    match img.shape() {
        [h, w] => {
            let (h, w) = (*h, *w);
            Ok(Array2::from_shape_fn((h, w), |(i, j)| img[[i, j]] as f64))
        }
        [3, h, w] => {
            let (h, w) = (*h, *w);
            Ok(Array2::from_shape_fn((h, w), |(i, j)| {
                (img[[0, i, j]] as f64 + img[[1, i, j]] as f64 + img[[2, i, j]] as f64) / 3.0
            }))
        }
        other => Err(Error::shape(format!(
            "image must be [H, W] or [3, H, W], got {other:?}"
        ))),
    }
}

/// Mean local SSIM over all valid (fully interior) window positions.
pub fn ssim(a: &ArrayD<f32>, b: &ArrayD<f32>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "ssim inputs must match: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let la = to_luma(a)?;
    let lb = to_luma(b)?;
    let (h, w) = la.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(format!(
            "ssim needs at least a {SSIM_WINDOW}x{SSIM_WINDOW} image, got {h}x{w}"
        )));
    }
    let win = gaussian_window();
    let mut total = 0.0f64;
    let mut count = 0usize;
    for y in 0..=(h - SSIM_WINDOW) {
        for x in 0..=(w - SSIM_WINDOW) {
            let (mut mu_a, mut mu_b) = (0.0f64, 0.0f64);
            let (mut aa, mut bb, mut ab) = (0.0f64, 0.0f64, 0.0f64);
            for i in 0..SSIM_WINDOW {
                for j in 0..SSIM_WINDOW {
                    let g = win[[i, j]];
                    let va = la[[y + i, x + j]];
                    let vb = lb[[y + i, x + j]];
                    mu_a += g * va;
                    mu_b += g * vb;
                    aa += g * (va * va);
                    bb += g * (vb * vb);
                    // Associate the symmetric product first so swapping the
                    // arguments reproduces the identical rounding sequence.
                    ab += g * (va * vb);
                }
            }
            let var_a = aa - mu_a * mu_a;
            let var_b = bb - mu_b * mu_b;
            let cov = ab - mu_a * mu_b;
            let s = ((2.0 * (mu_a * mu_b) + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2));
            total += s;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Peak signal-to-noise ratio in decibels with dynamic range L = 1.
/// Identical images report the `+inf` sentinel.
pub fn psnr(a: &ArrayD<f32>, b: &ArrayD<f32>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "psnr inputs must match: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mse = a
        .iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Cosine similarity `dot(u, v) / (‖u‖ ‖v‖)`, accumulated in f64.
pub fn cosine_similarity(u: &[f32], v: &[f32]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape(format!(
            "cosine inputs must match: {} vs {}",
            u.len(),
            v.len()
        )));
    }
    let (mut dot, mut nu, mut nv) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in u.iter().zip(v.iter()) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        nu += x * x;
        nv += y * y;
    }
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::argument("cosine similarity of a zero vector"));
    }
    Ok(dot / (nu.sqrt() * nv.sqrt()))
}

/// Mean and sample covariance (denominator n − 1) of the feature rows,
/// with the diagonal ridge applied when n < D + 1.
pub fn feature_moments(rows: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let (n, d) = rows.dim();
    let mu = rows.mean_axis(Axis(0)).expect("n > 0 checked by callers");
    let mut cov = Array2::<f64>::zeros((d, d));
    if n >= 2 {
        for row in rows.rows() {
            let c = &row.to_owned() - &mu;
            for i in 0..d {
                for j in 0..d {
                    cov[[i, j]] += c[i] * c[j];
                }
            }
        }
        cov.mapv_inplace(|v| v / (n - 1) as f64);
    }
    if n < d + 1 {
        for i in 0..d {
            cov[[i, i]] += FID_EPS;
        }
    }
    (mu, cov)
}

/// Fréchet distance between two Gaussians given by their moments:
/// `‖μ_a − μ_b‖² + tr(Σ_a + Σ_b − 2 (Σ_a Σ_b)^½)`, clamped at zero against
/// round-off.
pub fn frechet_from_moments(
    mu_a: &Array1<f64>,
    cov_a: &Array2<f64>,
    mu_b: &Array1<f64>,
    cov_b: &Array2<f64>,
) -> Result<f64> {
    if mu_a.len() != mu_b.len() || cov_a.dim() != cov_b.dim() || cov_a.nrows() != mu_a.len() {
        return Err(Error::shape("Fréchet moments must share one dimension"));
    }
    let mean_term = mu_a
        .iter()
        .zip(mu_b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>();
    let tr_a = (0..cov_a.nrows()).map(|i| cov_a[[i, i]]).sum::<f64>();
    let tr_b = (0..cov_b.nrows()).map(|i| cov_b[[i, i]]).sum::<f64>();
    let cross = trace_sqrt_product(cov_a, cov_b);
    let d = mean_term + tr_a + tr_b - 2.0 * cross;
    if !d.is_finite() {
        return Err(Error::Numeric {
            step: 0,
            message: "Fréchet distance is not finite".into(),
        });
    }
    Ok(d.max(0.0))
}

fn embed_set(images: &[ArrayD<f32>], encoder: &FrozenEncoder) -> Result<Array2<f64>> {
    let refs: Vec<&ArrayD<f32>> = images.iter().collect();
    let z = encoder.embed(&crate::backbones::stack_images(&refs));
    let z = z
        .into_dimensionality::<ndarray::Ix2>()
        .map_err(|e| Error::shape(format!("encoder output must be [N, D]: {e}")))?;
    Ok(z.mapv(|v| v as f64))
}

/// Proxy Fréchet feature distance between two image sets under the frozen
/// semantic encoder. Reported as "proxy-FID": same formula as FID,
/// different feature space.
pub fn frechet_feature_distance(
    set_a: &[ArrayD<f32>],
    set_b: &[ArrayD<f32>],
    encoder: &FrozenEncoder,
) -> Result<f64> {
    if set_a.is_empty() || set_b.is_empty() {
        return Err(Error::argument("proxy-FID needs non-empty image sets"));
    }
    let za = embed_set(set_a, encoder)?;
    let zb = embed_set(set_b, encoder)?;
    let (mu_a, cov_a) = feature_moments(&za);
    let (mu_b, cov_b) = feature_moments(&zb);
    frechet_from_moments(&mu_a, &cov_a, &mu_b, &cov_b)
}

/// Mean pairwise cosine similarity of the frozen-encoder embeddings of
/// same-subject generations. Order-invariant by construction.
pub fn cross_view_consistency(images: &[ArrayD<f32>], encoder: &FrozenEncoder) -> Result<f64> {
    if images.len() < 2 {
        return Err(Error::argument(
            "cross-view consistency needs at least two images",
        ));
    }
    let z = embed_set(images, encoder)?;
    let rows: Vec<Vec<f32>> = z
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|&v| v as f32).collect())
        .collect();
    let mut total = 0.0f64;
    let mut pairs = 0usize;
    for i in 0..rows.len() {
        for j in (i + 1)..rows.len() {
            total += cosine_similarity(&rows[i], &rows[j])?;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// One named metric over a sample set, tagged with the digest of the
/// configuration that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub name: String,
    pub value: f64,
    pub n_samples: usize,
    pub config_digest: String,
}

impl MetricReport {
    pub fn new(
        name: impl Into<String>,
        value: f64,
        n_samples: usize,
        config_digest: impl Into<String>,
    ) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::argument("metric value must be finite"));
        }
        if n_samples == 0 {
            return Err(Error::argument("metric needs n_samples > 0"));
        }
        Ok(MetricReport {
            name: name.into(),
            value,
            n_samples,
            config_digest: config_digest.into(),
        })
    }
}

/// Append-free JSONL writer: one report per line.
pub fn write_reports(path: &Path, reports: &[MetricReport]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in reports {
        serde_json::to_writer(&mut f, r).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(f)?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_reports(path: &Path) -> Result<Vec<MetricReport>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format(e.to_string()))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn gaussian_window_is_normalized_and_symmetric() {
        let w = gaussian_window();
        assert!((w.sum() - 1.0).abs() < 1e-12);
        assert!((w[[0, 3]] - w[[3, 0]]).abs() < 1e-15);
        assert!(w[[5, 5]] > w[[0, 0]]);
    }

    #[test]
    fn psnr_arithmetic() {
        // Constant squared error of 0.01 → exactly 20 dB.
        let a = ArrayD::<f32>::zeros(IxDyn(&[3, 4, 4]));
        let b = a.mapv(|_| 0.1f32);
        let db = psnr(&a, &b).unwrap();
        assert!((db - 20.0).abs() < 1e-6, "{db}");
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
    }

    #[test]
    fn cosine_contract() {
        assert!((cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!(cosine_similarity(&[1.0, 0.0], &[0.0, 2.0]).unwrap().abs() < 1e-12);
        let half = std::f32::consts::FRAC_1_SQRT_2;
        let c = cosine_similarity(&[1.0, 0.0], &[half, half]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-7);
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn frechet_closed_forms() {
        use ndarray::arr1;
        let eye = Array2::<f64>::eye(4);
        let zero = arr1(&[0.0; 4]);
        let ones = arr1(&[1.0; 4]);
        let d = frechet_from_moments(&zero, &eye, &ones, &eye).unwrap();
        assert!((d - 4.0).abs() < 1e-9, "{d}");
        let d0 = frechet_from_moments(&ones, &eye, &ones, &eye).unwrap();
        assert!(d0.abs() < 1e-9);
        // diag(1,4) vs diag(4,1): 2(1+4) − 2·tr(diag(2,2)) = 10 − 8 = 2.
        let a = Array2::from_diag(&arr1(&[1.0, 4.0]));
        let b = Array2::from_diag(&arr1(&[4.0, 1.0]));
        let m = arr1(&[0.0, 0.0]);
        let d = frechet_from_moments(&m, &a, &m, &b).unwrap();
        assert!((d - 2.0).abs() < 1e-9, "{d}");
    }

    #[test]
    fn report_invariants_enforced() {
        assert!(MetricReport::new("ssim", f64::NAN, 3, "d").is_err());
        assert!(MetricReport::new("ssim", 0.5, 0, "d").is_err());
        let r = MetricReport::new("ssim", 0.5, 3, "d").unwrap();
        assert_eq!(r.name, "ssim");
    }

    #[test]
    fn reports_round_trip_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        let reports = vec![
            MetricReport::new("ssim", 0.93, 20, "abc").unwrap(),
            MetricReport::new("proxy_fid", 1.25, 20, "abc").unwrap(),
        ];
        write_reports(&path, &reports).unwrap();
        assert_eq!(read_reports(&path).unwrap(), reports);
    }
}
