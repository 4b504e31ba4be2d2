use std::fs;
use std::path::{Path, PathBuf};

use bilagrid::fit::{self, FitConfig};
use bilagrid::io::{self, GridFile, SequenceManifest};
use bilagrid::isp;
use bilagrid::metrics;
use bilagrid::model::{self, ModelConfig, ModelParams};
use bilagrid::recon::{self, ReconConfig};
use bilagrid::selfcheck;
use bilagrid::train::{self, AugmentConfig, Dataset, TrainConfig};
use bilagrid::{grid, Image};
use serde::Serialize;
use serde_json::json;

use crate::{Command, ModelSize};

type CmdResult = Result<(), Box<dyn std::error::Error>>;

fn print_config(command: &str, config: &impl Serialize) -> CmdResult {
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({ "command": command, "config": config }))?
    );
    Ok(())
}

fn create_dir(path: &Path) -> CmdResult {
    fs::create_dir_all(path).map_err(|e| format!("cannot create {}: {e}", path.display()))?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> CmdResult {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .map_err(|e| format!("cannot write {}: {e}", path.display()))?;
    Ok(())
}

pub fn run(command: Command) -> CmdResult {
    match command {
        Command::Simulate {
            out,
            seed,
            frames,
            severity,
            size,
        } => simulate(&out, seed, frames, severity, size),
        Command::FitGrid {
            source,
            target,
            out,
            steps,
            lr,
            lambda_tv,
            dims,
            corrected,
        } => {
            let cfg = FitConfig {
                steps,
                lr,
                lambda_tv,
                grid_dims: dims,
            };
            fit_grid(&source, &target, &out, &cfg, corrected.as_deref())
        }
        Command::Train {
            data,
            out,
            iters,
            seed,
            alpha,
            lambda_tv,
            lr,
            weight_decay,
            frames,
            severity,
            scenes,
            model,
            log,
            no_augment,
            log_every,
        } => {
            let cfg = TrainConfig {
                alpha,
                lambda_tv,
                lr,
                weight_decay,
                iterations: iters,
                frames_per_batch: frames,
                seed,
                severity,
                augment: if no_augment {
                    AugmentConfig::none()
                } else {
                    AugmentConfig::default()
                },
                ..TrainConfig::default()
            };
            let log = log.unwrap_or_else(|| out.with_extension("csv"));
            train_cmd(&data, &out, &log, &cfg, model, scenes, log_every)
        }
        Command::Harmonize { manifest, ckpt, out } => harmonize(&manifest, &ckpt, &out),
        Command::ReconDemo {
            manifest,
            ckpt,
            iters,
            out,
            report,
            fraction,
        } => {
            let cfg = ReconConfig {
                iterations: iters,
                weighted_fraction: fraction,
                ..ReconConfig::default()
            };
            recon_demo(&manifest, &ckpt, &cfg, &out, &report)
        }
        Command::Eval { renders, gt, out } => eval(&renders, &gt, &out),
        Command::Selfcheck { seed } => run_selfcheck(seed),
    }
}

fn frame_name(i: usize) -> String {
    format!("frame_{i:03}.png")
}

fn simulate(out: &Path, seed: u64, frames: usize, severity: f64, size: (usize, usize)) -> CmdResult {
    print_config(
        "simulate",
        &json!({ "out": out, "seed": seed, "frames": frames, "severity": severity, "size": [size.0, size.1] }),
    )?;
    let scene = isp::synth_scene(seed, frames, size.0, size.1)?;
    let pair = isp::generate_training_pair(&scene, seed, severity)?;
    create_dir(&out.join("frames"))?;
    create_dir(&out.join("gt"))?;
    let mut frame_paths = Vec::new();
    let mut gt_paths = Vec::new();
    for (i, img) in pair.inputs.iter().enumerate() {
        let name = frame_name(i);
        io::save_image(img, out.join("frames").join(&name))?;
        // The reference look is the target appearance for every frame.
        let gt = if i == 0 { img } else { &pair.targets[i - 1] };
        io::save_image(gt, out.join("gt").join(&name))?;
        frame_paths.push(format!("frames/{name}"));
        gt_paths.push(format!("gt/{name}"));
    }
    write_json(&out.join("params.json"), &pair.params)?;
    let manifest = SequenceManifest {
        scene_id: format!("synthetic-{seed}"),
        reference_index: 0,
        frame_paths,
        ground_truth_paths: Some(gt_paths),
    };
    manifest.save(out.join("manifest.json"))?;
    println!("wrote {} frames to {}", frames, out.display());
    Ok(())
}

fn fit_grid(source: &Path, target: &Path, out: &Path, cfg: &FitConfig, corrected: Option<&Path>) -> CmdResult {
    print_config(
        "fit-grid",
        &json!({ "source": source, "target": target, "out": out, "fit": cfg, "corrected": corrected }),
    )?;
    let src = io::load_image(source)?;
    let tgt = io::load_image(target)?;
    let result = fit::fit_grid_pair(&src, &tgt, cfg)?;
    let sliced = grid::slice_affine(&result.grid, &src)?;
    let mask = fit::unsaturated_mask(&src, &tgt);
    println!("initial loss {:.6e}", result.initial_loss());
    println!("final loss {:.6e}", result.final_loss());
    println!("masked MAE {:.6e}", fit::masked_mae(&sliced, &tgt, &mask));
    io::write_grid(&GridFile::Affine(result.grid), out)?;
    if let Some(path) = corrected {
        io::save_image(&sliced, path)?;
    }
    Ok(())
}

fn load_dataset(data: &str, cfg: &ModelConfig, tc: &TrainConfig, scenes: usize) -> Result<Dataset, Box<dyn std::error::Error>> {
    if data == "synthetic" {
        let frames = tc.frames_per_batch.max(16);
        return Ok(Dataset::synthetic(scenes, frames, cfg.image_size, tc.seed)?);
    }
    let dir = Path::new(data);
    let mut manifests: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| format!("cannot read data directory {data}: {e}"))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    manifests.sort();
    if manifests.is_empty() {
        return Err(format!("no *.json manifests in {data}").into());
    }
    let sequences = manifests
        .iter()
        .map(|m| io::load_sequence(m).map(|s| s.frames))
        .collect::<bilagrid::Result<Vec<_>>>()?;
    Ok(Dataset::new(sequences, cfg.image_size)?)
}

fn train_cmd(
    data: &str,
    out: &Path,
    log: &Path,
    cfg: &TrainConfig,
    size: ModelSize,
    scenes: usize,
    log_every: usize,
) -> CmdResult {
    let model_cfg = match size {
        ModelSize::Desk => ModelConfig::default(),
        ModelSize::Tiny => ModelConfig::tiny(),
    };
    print_config(
        "train",
        &json!({ "data": data, "out": out, "log": log, "model": model_cfg, "size": size, "scenes": scenes, "train": cfg }),
    )?;
    cfg.validate()?;
    let dataset = load_dataset(data, &model_cfg, cfg, scenes)?;
    let mut params = ModelParams::init(model_cfg, cfg.seed)?;
    let rows = train::train(&mut params, &dataset, cfg, |r| {
        if log_every > 0 && (r.step % log_every == 0 || r.step + 1 == cfg.iterations) {
            eprintln!(
                "step {:>6}  loss {:.5}  conf {:.5}  tv {:.5}  |g| {:.4}",
                r.step, r.loss, r.conf_loss, r.tv_loss, r.grad_norm
            );
        }
    })?;
    model::write_checkpoint(out, &params)?;
    train::write_log_csv(log, &rows)?;
    if let (Some(first), Some(last)) = (rows.first(), rows.last()) {
        println!("loss {:.6} -> {:.6} over {} steps", first.loss, last.loss, rows.len());
    }
    println!("checkpoint written to {}", out.display());
    Ok(())
}

struct Harmonization {
    sequence: io::LoadedSequence,
    sources: Vec<usize>,
    result: model::Harmonized,
}

fn harmonize_manifest(manifest: &Path, ckpt: &Path) -> Result<Harmonization, Box<dyn std::error::Error>> {
    let params = model::read_checkpoint(ckpt)?;
    let sequence = io::load_sequence(manifest)?;
    let sources = sequence.source_indices();
    if sources.is_empty() {
        return Err("manifest has no source frames besides the reference".into());
    }
    let frames: Vec<Image> = sources.iter().map(|&i| sequence.frames[i].clone()).collect();
    let result = model::harmonize_sequence(&params, sequence.reference(), &frames)?;
    Ok(Harmonization {
        sequence,
        sources,
        result,
    })
}

fn harmonize(manifest: &Path, ckpt: &Path, out: &Path) -> CmdResult {
    print_config("harmonize", &json!({ "manifest": manifest, "ckpt": ckpt, "out": out }))?;
    let h = harmonize_manifest(manifest, ckpt)?;
    create_dir(out)?;
    let normalized = recon::normalize_confidences(&h.result.confidences)?;
    for (k, &i) in h.sources.iter().enumerate() {
        let conf = &h.result.confidences[k];
        io::save_image(&h.result.images[k], out.join(format!("harmonized_{i:03}.png")))?;
        io::save_gray(conf.height(), conf.width(), &normalized[k], out.join(format!("confidence_{i:03}.png")))?;
        io::write_grid(&GridFile::Affine(h.result.grids[k].clone()), out.join(format!("grid_{i:03}.bgrd")))?;
        io::write_grid(
            &GridFile::Confidence(h.result.confidence_grids[k].clone()),
            out.join(format!("confidence_grid_{i:03}.bgrd")),
        )?;
    }
    println!("harmonized {} frames into {}", h.sources.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct ReconReport {
    iterations: usize,
    weighted_steps: usize,
    frames: usize,
    final_loss: Option<f64>,
    /// Mean MAE against the ground truth of every source frame.
    stage1_mae: Option<f64>,
    final_mae: Option<f64>,
}

fn recon_demo(manifest: &Path, ckpt: &Path, cfg: &ReconConfig, out: &Path, report: &Path) -> CmdResult {
    print_config(
        "recon-demo",
        &json!({ "manifest": manifest, "ckpt": ckpt, "out": out, "report": report, "recon": cfg }),
    )?;
    let h = harmonize_manifest(manifest, ckpt)?;
    let result = recon::toy_reconstruct(&h.result.images, Some(&h.result.confidences), cfg)?;
    let mae_vs_gt = |latent: &Image| -> Option<f64> {
        let gt = h.sequence.ground_truth.as_ref()?;
        let maes: Vec<f64> = h
            .sources
            .iter()
            .map(|&i| recon::mae(latent, &gt[i]))
            .collect::<bilagrid::Result<_>>()
            .ok()?;
        Some(maes.iter().sum::<f64>() / maes.len() as f64)
    };
    let rep = ReconReport {
        iterations: cfg.iterations,
        weighted_steps: cfg.weighted_steps().min(cfg.iterations),
        frames: h.sources.len(),
        final_loss: result.loss_history.last().copied(),
        stage1_mae: mae_vs_gt(&result.stage1),
        final_mae: mae_vs_gt(&result.latent),
    };
    io::save_image(&result.latent, out)?;
    write_json(report, &rep)?;
    println!("{}", serde_json::to_string_pretty(&rep)?);
    Ok(())
}

fn png_names(dir: &Path) -> Result<Vec<String>, Box<dyn std::error::Error>> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(|e| format!("cannot read {}: {e}", dir.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.to_ascii_lowercase().ends_with(".png"))
        .collect();
    names.sort();
    Ok(names)
}

fn eval(renders: &Path, gt: &Path, out: &Path) -> CmdResult {
    print_config("eval", &json!({ "renders": renders, "gt": gt, "out": out }))?;
    let names = png_names(renders)?;
    if names.is_empty() {
        return Err(format!("no PNG renders in {}", renders.display()).into());
    }
    let mut r = Vec::with_capacity(names.len());
    let mut g = Vec::with_capacity(names.len());
    for n in &names {
        let gt_path = gt.join(n);
        if !gt_path.exists() {
            return Err(format!("no ground truth for {n} in {}", gt.display()).into());
        }
        r.push(io::load_image(renders.join(n))?);
        g.push(io::load_image(gt_path)?);
    }
    let report = metrics::evaluate_sequence(&r, &g)?;
    write_json(out, &json!({ "files": names, "report": report }))?;
    println!(
        "{} frames: PSNR {:.3} dB, SSIM {:.4}, PSNR-CC {:.3} dB, SSIM-CC {:.4}",
        report.frame_count, report.mean_psnr, report.mean_ssim, report.mean_psnr_cc, report.mean_ssim_cc
    );
    Ok(())
}

fn run_selfcheck(seed: u64) -> CmdResult {
    print_config("selfcheck", &json!({ "seed": seed }))?;
    let results = selfcheck::run_all(seed)?;
    let mut failed = 0;
    for c in &results {
        println!(
            "[{}] {}: {:.3e} (< {:.0e})",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.value,
            c.threshold
        );
        failed += usize::from(!c.passed);
    }
    if failed > 0 {
        return Err(format!("{failed} self-check(s) failed").into());
    }
    Ok(())
}
