//! The lifecycle commands. Each consumes its config keys, resolves input
//! artifacts from previous runs, executes, and closes its run directory
//! with a resolved-config snapshot and a manifest.

use ndarray::ArrayD;

use mvdiff::apm::FrozenApm;
use mvdiff::backbones::{pretrain_pose_mlp, pretrain_semantic_encoder, pretrain_vae};
use mvdiff::config::{self, Config};
use mvdiff::evalkit::{self, plot, MetricReport};
use mvdiff::jci::{AblationFlags, FrozenUnet};
use mvdiff::pipeline::{
    infer, train_apm, train_jcdm, Backbones, InferenceRequest, Models, RefView, Stage, TargetSpec,
};
use mvdiff::synthdata::dataset::{
    load_dataset, load_image_png, make_dataset, manifest_digest, save_image_png, LoadedDataset,
};
use mvdiff::{rng, runlog, Error, Result};

use crate::run::{ArtifactRecord, Workspace};

/// One generated image inside `samples.json`: its canvas slot and the
/// dataset view whose pose it was asked to take (identical by the
/// canonical view-to-slot mapping).
#[derive(serde::Serialize, serde::Deserialize)]
pub struct SampleEntry {
    pub slot: usize,
    pub view: usize,
    pub file: String,
}

#[derive(serde::Serialize, serde::Deserialize)]
pub struct SampleCase {
    pub subject: u32,
    pub ref_views: Vec<usize>,
    pub entries: Vec<SampleEntry>,
}

/// The index a `sample` run writes and `eval` consumes.
#[derive(serde::Serialize, serde::Deserialize)]
pub struct SamplesFile {
    pub dataset_digest: String,
    pub seed: u64,
    pub steps: usize,
    pub w: f32,
    pub cases: Vec<SampleCase>,
}

pub fn gen_data(ws: &Workspace, mut cfg: Config) -> Result<()> {
    let seed: u64 = cfg.get_or("seed", 7)?;
    let n: usize = cfg.get_or("data.subjects", 200)?;
    let k: usize = cfg.get_or("data.views", 4)?;
    let run = ws.begin("gen-data", &cfg)?;

    let out = run.path("dataset");
    let header = make_dataset(&out, seed, n, k)?;
    let digest = manifest_digest(&out)?;
    println!(
        "dataset: {} subjects ({} train / {} held out), {} views each",
        n,
        header.train_subjects.len(),
        header.held_out_subjects.len(),
        k
    );
    run.finish(&cfg, Some(digest), vec![ArtifactRecord::plain("dataset")])
}

pub fn pretrain_backbones(ws: &Workspace, mut cfg: Config) -> Result<()> {
    let seed: u64 = cfg.get_or("seed", 7)?;
    let ds_dir = ws.dataset_dir(&mut cfg)?;
    let (ecfg, vcfg, pcfg) = config::backbone_pretrain_configs(&mut cfg, seed)?;
    let run = ws.begin("pretrain-backbones", &cfg)?;

    let ds = load_dataset(&ds_dir)?;
    let (enc, log) = pretrain_semantic_encoder(&ds, &ecfg)?;
    enc.save(&run.path("encoder.ckpt"))?;
    runlog::write_jsonl(&run.path("encoder-log.jsonl"), &log)?;
    println!("encoder: {} steps, checksum {}", ecfg.steps, enc.checksum());

    let (vae, log) = pretrain_vae(&ds, &vcfg)?;
    vae.save(&run.path("vae.ckpt"))?;
    runlog::write_jsonl(&run.path("vae-log.jsonl"), &log)?;
    println!("vae: {} steps, checksum {}", vcfg.steps, vae.checksum());

    let (pose, log) = pretrain_pose_mlp(&pcfg)?;
    pose.save(&run.path("pose.ckpt"))?;
    runlog::write_jsonl(&run.path("pose-log.jsonl"), &log)?;
    println!("pose: {} steps, checksum {}", pcfg.steps, pose.checksum());

    let digest = manifest_digest(&ds_dir)?;
    run.finish(
        &cfg,
        Some(digest),
        vec![
            ArtifactRecord::summed("encoder.ckpt", enc.checksum()),
            ArtifactRecord::summed("vae.ckpt", vae.checksum()),
            ArtifactRecord::summed("pose.ckpt", pose.checksum()),
        ],
    )
}

pub fn train_apm_cmd(ws: &Workspace, mut cfg: Config) -> Result<()> {
    let ds_dir = ws.dataset_dir(&mut cfg)?;
    let bb_dir = ws.backbones_dir(&mut cfg)?;
    let model_cfg = config::apm_model_config(&mut cfg)?;
    let tcfg = config::train_config(&mut cfg, Stage::Apm)?;
    let run = ws.begin("train-apm", &cfg)?;

    let ds = load_dataset(&ds_dir)?;
    let backbones = Backbones::load(&bb_dir)?;
    let (apm, log) = train_apm(&ds, &backbones, &model_cfg, &tcfg)?;
    apm.save(&run.path("apm.ckpt"))?;
    runlog::write_jsonl(&run.path("metrics.jsonl"), &log)?;
    if let Some((step, value)) = runlog::series(&log, "heldout_cosine").last() {
        println!("heldout_cosine: {value:.4} at step {step}");
    }
    println!("apm: {} steps, checksum {}", tcfg.steps, apm.checksum());

    let digest = manifest_digest(&ds_dir)?;
    run.finish(
        &cfg,
        Some(digest),
        vec![ArtifactRecord::summed("apm.ckpt", apm.checksum())],
    )
}

pub fn train_jcdm_cmd(ws: &Workspace, mut cfg: Config) -> Result<()> {
    let ds_dir = ws.dataset_dir(&mut cfg)?;
    let bb_dir = ws.backbones_dir(&mut cfg)?;
    let tcfg = config::train_config(&mut cfg, Stage::Jcdm)?;
    let model_cfg = config::unet_model_config(&mut cfg, tcfg.flags)?;
    let apm = load_apm_if_needed(ws, &mut cfg, tcfg.flags)?;
    let run = ws.begin("train-jcdm", &cfg)?;

    let ds = load_dataset(&ds_dir)?;
    let backbones = Backbones::load(&bb_dir)?;
    let (unet, log) = train_jcdm(&ds, &backbones, apm.as_ref(), &model_cfg, &tcfg)?;
    unet.save(&run.path("unet.ckpt"))?;
    runlog::write_jsonl(&run.path("metrics.jsonl"), &log)?;
    println!(
        "unet[{}]: {} steps, checksum {}",
        tcfg.flags.name(),
        tcfg.steps,
        unet.checksum()
    );

    let digest = manifest_digest(&ds_dir)?;
    run.finish(
        &cfg,
        Some(digest),
        vec![ArtifactRecord::summed("unet.ckpt", unet.checksum())],
    )
}

/// The appearance prior is loaded only for variants that condition on it;
/// an explicitly pinned path is tolerated (and ignored) otherwise.
fn load_apm_if_needed(
    ws: &Workspace,
    cfg: &mut Config,
    flags: AblationFlags,
) -> Result<Option<FrozenApm>> {
    if flags.use_apm_prior {
        let path = ws.apm_ckpt(cfg)?;
        Ok(Some(FrozenApm::load(&path)?))
    } else {
        let _ = cfg.get::<String>("paths.apm")?;
        Ok(None)
    }
}

/// Build the joint request for one subject: reference views occupy their
/// own slots, target slots ask for the subject's ground-truth poses.
fn case_request(
    ds: &LoadedDataset,
    subject: u32,
    ref_views: &[usize],
    target_views: &[usize],
    steps: usize,
    w: f32,
    seed: u64,
) -> InferenceRequest {
    let references = ref_views
        .iter()
        .map(|&v| {
            let lv = ds.view(subject, v);
            RefView {
                slot: v,
                image: lv.image.clone(),
                keypoints: lv.keypoints,
            }
        })
        .collect();
    let targets = target_views
        .iter()
        .map(|&v| TargetSpec {
            slot: v,
            keypoints: ds.view(subject, v).keypoints,
        })
        .collect();
    let mut req = InferenceRequest::new(references, targets, seed);
    req.n_steps = steps;
    req.w = w;
    req
}

/// Synthesize one case; returns `(view, image)` in ascending view order.
fn synthesize_case(
    models: &Models,
    ds: &LoadedDataset,
    subject: u32,
    ref_views: &[usize],
    target_views: &[usize],
    steps: usize,
    w: f32,
    seed: u64,
) -> Result<Vec<(usize, ArrayD<f32>)>> {
    let req = case_request(ds, subject, ref_views, target_views, steps, w, seed);
    let images = infer(&req, models)?;
    let mut views = target_views.to_vec();
    views.sort_unstable();
    Ok(views.into_iter().zip(images).collect())
}

pub fn sample_cmd(ws: &Workspace, mut cfg: Config) -> Result<()> {
    let seed: u64 = cfg.get_or("seed", 7)?;
    let ds_dir = ws.dataset_dir(&mut cfg)?;
    let bb_dir = ws.backbones_dir(&mut cfg)?;
    let unet_path = ws.unet_ckpt(&mut cfg)?;
    let unet = FrozenUnet::load(&unet_path)?;
    let apm = load_apm_if_needed(ws, &mut cfg, unet.model.cfg.flags)?;

    let n_refs: usize = cfg.get_or("sample.refs", 1)?;
    let n_targets: usize = cfg.get_or("sample.targets", 3)?;
    let steps: usize = cfg.get_or("sample.steps", 30)?;
    let w: f32 = cfg.get_or("sample.w", 2.0)?;
    let cases: usize = cfg.get_or("sample.cases", 1)?;
    let subject_pin = cfg.get::<u32>("sample.subject")?;

    let ds = load_dataset(&ds_dir)?;
    let k = ds.header.k_views;
    if n_refs == 0 || n_targets == 0 || n_refs + n_targets > k {
        return Err(Error::config(
            "sample.targets",
            format!("need refs >= 1, targets >= 1, refs + targets <= {k} views"),
        ));
    }
    if unet.model.cfg.flags.use_jci && n_refs + n_targets != unet.model.cfg.s_slots {
        return Err(Error::config(
            "sample.targets",
            format!(
                "this joint model fills a {}-slot canvas: refs + targets must equal it",
                unet.model.cfg.s_slots
            ),
        ));
    }
    if let Some(id) = subject_pin {
        if (id as usize) >= ds.header.n_subjects {
            return Err(Error::config(
                "sample.subject",
                format!("subject {id} outside the {}-subject corpus", ds.header.n_subjects),
            ));
        }
    }
    let run = ws.begin("sample", &cfg)?;

    let models = Models {
        backbones: Backbones::load(&bb_dir)?,
        apm,
        unet,
    };
    let ref_views: Vec<usize> = (0..n_refs).collect();
    let target_views: Vec<usize> = (n_refs..n_refs + n_targets).collect();
    let held = &ds.header.held_out_subjects;
    let mut out_cases = Vec::with_capacity(cases);
    let mut written = 0usize;
    for case in 0..cases {
        let subject = subject_pin.unwrap_or(held[case % held.len()]);
        let case_seed = rng::derive_seed(seed, "cli.sample.case", case as u64);
        let generated = synthesize_case(
            &models, &ds, subject, &ref_views, &target_views, steps, w, case_seed,
        )?;
        let mut entries = Vec::with_capacity(generated.len());
        for (view, image) in &generated {
            let file = format!("case{case:02}-view{view}.png");
            save_image_png(&run.path(&file), image)?;
            written += 1;
            entries.push(SampleEntry {
                slot: *view,
                view: *view,
                file,
            });
        }
        out_cases.push(SampleCase {
            subject,
            ref_views: ref_views.clone(),
            entries,
        });
    }

    let digest = manifest_digest(&ds_dir)?;
    let samples = SamplesFile {
        dataset_digest: digest.clone(),
        seed,
        steps,
        w,
        cases: out_cases,
    };
    let body = serde_json::to_string_pretty(&samples)
        .map_err(|e| Error::Format(format!("samples.json: {e}")))?;
    std::fs::write(run.path("samples.json"), body + "\n")?;
    println!("wrote {written} images over {cases} case(s)");
    run.finish(&cfg, Some(digest), vec![ArtifactRecord::plain("samples.json")])
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// One synthesized case ready for scoring.
struct CaseImages {
    subject: u32,
    generated: Vec<(usize, ArrayD<f32>)>,
}

/// Score generated cases against ground truth: mean SSIM/PSNR per image,
/// mean cross-view consistency per multi-target case, and the proxy
/// Fréchet distance between the generated pool and its ground-truth
/// counterpart. Report names get `prefix` prepended (ablation variants).
fn score_cases(
    cases: &[CaseImages],
    ds: &LoadedDataset,
    backbones: &Backbones,
    prefix: &str,
    digest: &str,
) -> Result<Vec<MetricReport>> {
    let mut ssim_vals = Vec::new();
    let mut psnr_vals = Vec::new();
    let mut cons_vals = Vec::new();
    let mut gen_pool: Vec<ArrayD<f32>> = Vec::new();
    let mut gt_pool: Vec<ArrayD<f32>> = Vec::new();
    for case in cases {
        let imgs: Vec<ArrayD<f32>> = case.generated.iter().map(|(_, i)| i.clone()).collect();
        if imgs.len() >= 2 {
            cons_vals.push(evalkit::cross_view_consistency(&imgs, &backbones.encoder)?);
        }
        for (view, img) in &case.generated {
            let gt = &ds.view(case.subject, *view).image;
            ssim_vals.push(evalkit::ssim(img, gt)?);
            // PSNR saturates at 99 dB so a bit-exact copy stays reportable.
            psnr_vals.push(evalkit::psnr(img, gt)?.min(99.0));
            gen_pool.push(img.clone());
            gt_pool.push(gt.clone());
        }
    }
    let mut reports = Vec::new();
    let mut push = |name: &str, value: f64, n: usize| -> Result<()> {
        reports.push(MetricReport::new(format!("{prefix}{name}"), value, n, digest)?);
        Ok(())
    };
    if !ssim_vals.is_empty() {
        push("ssim_to_gt", mean(&ssim_vals), ssim_vals.len())?;
        push("psnr_to_gt", mean(&psnr_vals), psnr_vals.len())?;
    }
    if !cons_vals.is_empty() {
        push("cross_view_consistency", mean(&cons_vals), cons_vals.len())?;
    }
    if gen_pool.len() >= 2 {
        let fid = evalkit::frechet_feature_distance(&gen_pool, &gt_pool, &backbones.encoder)?;
        push("proxy_fid", fid, gen_pool.len())?;
    }
    Ok(reports)
}

pub fn eval_cmd(ws: &Workspace, mut cfg: Config) -> Result<()> {
    let _seed: u64 = cfg.get_or("seed", 7)?;
    let ds_dir = ws.dataset_dir(&mut cfg)?;
    let bb_dir = ws.backbones_dir(&mut cfg)?;
    let samples_dir = ws.samples_dir(&mut cfg)?;
    let plots: bool = cfg.get_or("eval.plots", false)?;
    let curves = cfg.get::<String>("eval.curves")?;
    let run = ws.begin("eval", &cfg)?;

    let ds = load_dataset(&ds_dir)?;
    let backbones = Backbones::load(&bb_dir)?;
    let text = std::fs::read_to_string(samples_dir.join("samples.json"))?;
    let samples: SamplesFile =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("samples.json: {e}")))?;
    let digest = manifest_digest(&ds_dir)?;
    if samples.dataset_digest != digest {
        return Err(Error::argument(
            "sample run was produced from a different dataset (manifest digest mismatch)",
        ));
    }

    let mut cases = Vec::with_capacity(samples.cases.len());
    for case in &samples.cases {
        let mut generated = Vec::with_capacity(case.entries.len());
        for entry in &case.entries {
            let img = load_image_png(&samples_dir.join(&entry.file))?;
            generated.push((entry.view, img));
        }
        cases.push(CaseImages {
            subject: case.subject,
            generated,
        });
    }
    let reports = score_cases(&cases, &ds, &backbones, "", &run.digest)?;
    evalkit::write_reports(&run.path("reports.jsonl"), &reports)?;
    for r in &reports {
        println!("{} = {:.4} (n = {})", r.name, r.value, r.n_samples);
    }

    let mut artifacts = vec![ArtifactRecord::plain("reports.jsonl")];
    if plots {
        let values: Vec<f64> = reports.iter().map(|r| r.value).collect();
        plot::bar_chart(&run.path("metrics.png"), &values)?;
        artifacts.push(ArtifactRecord::plain("metrics.png"));
    }
    if let Some(log_path) = curves {
        let entries = runlog::read_jsonl(std::path::Path::new(&log_path))?;
        let mut names: Vec<String> = Vec::new();
        for e in &entries {
            if !names.contains(&e.name) {
                names.push(e.name.clone());
            }
        }
        let series: Vec<(&str, Vec<(f64, f64)>)> = names
            .iter()
            .map(|n| {
                let pts = runlog::series(&entries, n)
                    .into_iter()
                    .map(|(s, v)| (s as f64, v))
                    .collect();
                (n.as_str(), pts)
            })
            .collect();
        plot::line_chart(&run.path("curves.png"), &series)?;
        artifacts.push(ArtifactRecord::plain("curves.png"));
    }
    run.finish(&cfg, Some(digest), artifacts)
}

pub fn ablate_cmd(ws: &Workspace, mut cfg: Config, flag_names: &[String]) -> Result<()> {
    let variants: Vec<AblationFlags> = if flag_names.is_empty() {
        vec![
            AblationFlags::b0(),
            AblationFlags::b1(),
            AblationFlags::b2(),
            AblationFlags::full(),
        ]
    } else {
        flag_names
            .iter()
            .map(|n| AblationFlags::parse(n))
            .collect::<Result<_>>()?
    };

    let ds_dir = ws.dataset_dir(&mut cfg)?;
    let bb_dir = ws.backbones_dir(&mut cfg)?;
    let base = config::train_config(&mut cfg, Stage::Jcdm)?;
    // Consume the architecture keys once up front; per-variant configs
    // re-read them (the slot count follows each variant's flags).
    let _ = config::unet_model_config(&mut cfg, AblationFlags::full())?;
    let needs_prior = variants.iter().any(|f| f.use_apm_prior);
    let apm_path = if needs_prior {
        Some(ws.apm_ckpt(&mut cfg)?)
    } else {
        let _ = cfg.get::<String>("paths.apm")?;
        None
    };
    let cases: usize = cfg.get_or("sample.cases", 4)?;
    let steps: usize = cfg.get_or("sample.steps", 30)?;
    let w: f32 = cfg.get_or("sample.w", 2.0)?;
    let run = ws.begin("ablate", &cfg)?;

    let ds = load_dataset(&ds_dir)?;
    let digest = manifest_digest(&ds_dir)?;
    let held = &ds.header.held_out_subjects;
    let ref_views = vec![0usize];
    let target_views: Vec<usize> = (1..ds.header.k_views).collect();

    let mut reports = Vec::new();
    let mut artifacts = Vec::new();
    for flags in &variants {
        let name = flags.name();
        let mut tcfg = base.clone();
        tcfg.flags = *flags;
        let model_cfg = config::unet_model_config(&mut cfg, *flags)?;
        let backbones = Backbones::load(&bb_dir)?;
        // Frozen models carry no Clone; the checkpoint reload per variant
        // is cheap and bit-identical.
        let apm = match (&apm_path, flags.use_apm_prior) {
            (Some(p), true) => Some(FrozenApm::load(p)?),
            _ => None,
        };
        let (unet, log) = train_jcdm(&ds, &backbones, apm.as_ref(), &model_cfg, &tcfg)?;
        let ckpt = format!("unet-{name}.ckpt");
        unet.save(&run.path(&ckpt))?;
        runlog::write_jsonl(&run.path(&format!("metrics-{name}.jsonl")), &log)?;
        artifacts.push(ArtifactRecord::summed(ckpt, unet.checksum()));

        let models = Models {
            backbones,
            apm,
            unet,
        };
        let mut scored = Vec::with_capacity(cases);
        for case in 0..cases {
            let subject = held[case % held.len()];
            // The case seed ignores the variant, so every ladder rung
            // denoises from identical initial noise.
            let case_seed = rng::derive_seed(base.seed, "cli.ablate.case", case as u64);
            let generated = synthesize_case(
                &models, &ds, subject, &ref_views, &target_views, steps, w, case_seed,
            )?;
            for (view, image) in &generated {
                save_image_png(&run.path(&format!("{name}-case{case:02}-view{view}.png")), image)?;
            }
            scored.push(CaseImages { subject, generated });
        }
        let variant_reports =
            score_cases(&scored, &ds, &models.backbones, &format!("{name}."), &run.digest)?;
        for r in &variant_reports {
            println!("{} = {:.4} (n = {})", r.name, r.value, r.n_samples);
        }
        reports.extend(variant_reports);
    }
    evalkit::write_reports(&run.path("reports.jsonl"), &reports)?;
    artifacts.push(ArtifactRecord::plain("reports.jsonl"));
    run.finish(&cfg, Some(digest), artifacts)
}
