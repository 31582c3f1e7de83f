//! One function per CLI subcommand. Each returns the run directory holding
//! its outputs; a finished run with the same config is returned unchanged.

use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::Result;
use log::info;
use pcnet::metrics::{Aggregator, Metric};
use pcnet::net::{BaselineKind, Hyper};
use pcnet::stimuli::{write_image_files, ImageFormat, StimulusClass};
use serde_json::json;

use crate::output::{open_run, write_metric_csvs, RunDir, RunStatus};
use crate::pipeline::{evaluate_networks, Context, EvalPlan, Network, PretrainData, Variant};

/// The coefficients used when probing pretrained-only networks.
pub fn probe_hyper() -> Hyper {
    Hyper {
        beta: 0.1,
        lambda: 0.2,
        alpha: 0.0,
    }
}

/// Full model followed by each single-coefficient override.
pub fn ablations(base: Hyper, large_alpha: f32) -> Vec<(String, Hyper)> {
    vec![
        ("full".into(), base),
        ("beta0".into(), Hyper { beta: 0.0, ..base }),
        ("lambda0".into(), Hyper { lambda: 0.0, ..base }),
        ("alpha0".into(), Hyper { alpha: 0.0, ..base }),
        (format!("alpha{large_alpha}"), Hyper { alpha: large_alpha, ..base }),
    ]
}

macro_rules! claim {
    ($ctx:expr, $name:expr) => {
        match open_run(&$ctx.cfg, $name)? {
            RunStatus::New(run) => run,
            RunStatus::Complete(path) => {
                info!("{} already complete", path.display());
                return Ok(path);
            }
        }
    };
}

fn summary(agg: &Aggregator, noise: f32, timesteps: usize) -> serde_json::Value {
    let mut classes = BTreeMap::new();
    for class in StimulusClass::ALL {
        let at = |m, t| agg.mean(m, None, class, noise, t);
        classes.insert(
            class.label(),
            json!({
                "p_square_t1": at(Metric::PSquare, 1),
                "p_square_final": at(Metric::PSquare, timesteps),
                "fg_t1": at(Metric::Fg, 1),
                "fg_final": at(Metric::Fg, timesteps),
            }),
        );
    }
    json!({"noise_sigma": noise, "timesteps": timesteps, "classes": classes})
}

/// Evaluates one arm and writes its CSVs and summary under `prefix`.
fn evaluate_arm(
    ctx: &mut Context,
    run: &mut RunDir,
    prefix: &str,
    nets: &[Network],
    plan: &EvalPlan,
    tag: Option<&str>,
    save_recon: bool,
) -> Result<()> {
    run.record_checkpoints(nets.iter().map(|n| &n.checkpoint));
    let test = ctx.test_specs()?;
    let recon = if save_recon {
        Some(run.path.join(format!("{prefix}recon")))
    } else {
        None
    };
    let agg = evaluate_networks(nets, &test, plan, ctx.cfg.batch_size, recon.as_deref())?;
    let steps = nets.iter().map(|n| plan.steps_for(&n.model)).max().unwrap_or(1);
    write_metric_csvs(run, prefix, &agg, &plan.noise_levels, steps, tag)?;
    let s = summary(&agg, plan.noise_levels[0], steps);
    info!("{prefix}summary: {s}");
    std::fs::write(run.output(&format!("{prefix}summary.json"))?, serde_json::to_vec_pretty(&s)?)?;
    Ok(())
}

/// Generates the shapes dataset, optionally with one image file per entry.
pub fn gen_stimuli(ctx: &mut Context, images: Option<ImageFormat>) -> Result<PathBuf> {
    let shapes = ctx.shapes()?;
    let dir = ctx.shapes_dir();
    if let Some(format) = images {
        let img_dir = dir.join("images");
        write_image_files(&img_dir, &shapes.entries, format)?;
        info!("wrote {} images to {}", shapes.len(), img_dir.display());
    }
    Ok(dir)
}

pub fn pretrain(ctx: &mut Context) -> Result<PathBuf> {
    let mut run = claim!(ctx, "pretrain");
    let variant = Variant::standard(&ctx.cfg);
    let nets = ctx.pretrained(&variant)?;
    run.record_checkpoints(nets.iter().map(|(_, t)| &t.path));
    run.finish()
}

pub fn finetune(ctx: &mut Context) -> Result<PathBuf> {
    let mut run = claim!(ctx, "finetune");
    let variant = Variant::standard(&ctx.cfg);
    let nets = ctx.finetuned(&variant)?;
    run.record_checkpoints(nets.iter().map(|n| &n.checkpoint));
    run.finish()
}

pub fn evaluate(ctx: &mut Context) -> Result<PathBuf> {
    let mut run = claim!(ctx, "evaluate");
    let nets = ctx.finetuned(&Variant::standard(&ctx.cfg))?;
    let plan = EvalPlan::new(&ctx.cfg, ctx.cfg.hyper);
    evaluate_arm(ctx, &mut run, "", &nets, &plan, None, true)?;
    run.finish()
}

/// Test-time overrides on the standard networks.
pub fn ablate(ctx: &mut Context) -> Result<PathBuf> {
    let mut run = claim!(ctx, "ablate");
    let nets = ctx.finetuned(&Variant::standard(&ctx.cfg))?;
    for (tag, hyper) in ablations(ctx.cfg.hyper, ctx.cfg.large_alpha) {
        let plan = EvalPlan::new(&ctx.cfg, hyper);
        evaluate_arm(ctx, &mut run, &format!("{tag}/"), &nets, &plan, Some(&tag), false)?;
    }
    run.finish()
}

/// The same overrides applied during training as well as testing.
pub fn train_restricted(ctx: &mut Context) -> Result<PathBuf> {
    let mut run = claim!(ctx, "train-restricted");
    for (tag, hyper) in ablations(ctx.cfg.hyper, ctx.cfg.large_alpha) {
        let variant = Variant {
            hyper,
            ..Variant::standard(&ctx.cfg)
        };
        let nets = ctx.finetuned(&variant)?;
        let plan = EvalPlan::new(&ctx.cfg, hyper);
        evaluate_arm(ctx, &mut run, &format!("{tag}/"), &nets, &plan, Some(&tag), false)?;
    }
    run.finish()
}

/// Feedforward baselines, evaluated at the single step they have.
pub fn baselines(ctx: &mut Context) -> Result<PathBuf> {
    let mut run = claim!(ctx, "baselines");
    for kind in BaselineKind::ALL {
        let nets = ctx.baselines(kind)?;
        let plan = EvalPlan::new(&ctx.cfg, ctx.cfg.hyper);
        evaluate_arm(ctx, &mut run, &format!("{}/", kind.label()), &nets, &plan, Some(kind.label()), false)?;
    }
    run.finish()
}

/// Pretrained-only networks, shapes-only training and noise-free finetuning,
/// with the standard networks evaluated alongside on clean and noisy input.
pub fn dataset_studies(ctx: &mut Context) -> Result<PathBuf> {
    let mut run = claim!(ctx, "dataset-studies");
    let standard = Variant::standard(&ctx.cfg);
    let clean_and_noisy = vec![0.0, 0.1];

    let pretrained: Vec<Network> = ctx
        .pretrained(&standard)?
        .into_iter()
        .map(|(id, t)| Network {
            id,
            model: t.model,
            checkpoint: t.path,
        })
        .collect();
    let plan = EvalPlan {
        noise_levels: vec![0.0],
        ..EvalPlan::new(&ctx.cfg, probe_hyper())
    };
    evaluate_arm(ctx, &mut run, "pretrain_only/", &pretrained, &plan, Some("pretrain_only"), false)?;

    let shapes_only = ctx.finetuned(&Variant {
        pretrain_data: PretrainData::Shapes,
        ..standard.clone()
    })?;
    let plan = EvalPlan::new(&ctx.cfg, ctx.cfg.hyper);
    evaluate_arm(ctx, &mut run, "shapes_only/", &shapes_only, &plan, Some("shapes_only"), false)?;

    let plan = EvalPlan {
        noise_levels: clean_and_noisy,
        ..EvalPlan::new(&ctx.cfg, ctx.cfg.hyper)
    };
    let noise_free = ctx.finetuned(&Variant {
        noise_free_finetune: true,
        ..standard.clone()
    })?;
    evaluate_arm(ctx, &mut run, "noise_free/", &noise_free, &plan, Some("noise_free"), false)?;
    let full = ctx.finetuned(&standard)?;
    evaluate_arm(ctx, &mut run, "full/", &full, &plan, Some("full"), false)?;
    run.finish()
}

/// Alternative training unroll lengths, and the parameter-free regime
/// probed on clean shapes.
pub fn timestep_study(ctx: &mut Context) -> Result<PathBuf> {
    let mut run = claim!(ctx, "timestep-study");
    for t in ctx.cfg.timestep_variants.clone() {
        let variant = Variant {
            train_timesteps: t,
            ..Variant::standard(&ctx.cfg)
        };
        let nets = ctx.finetuned(&variant)?;
        let tag = format!("T{t}");
        let plan = EvalPlan::new(&ctx.cfg, ctx.cfg.hyper);
        evaluate_arm(ctx, &mut run, &format!("{tag}/"), &nets, &plan, Some(&tag), false)?;
    }
    let mut nets = Vec::new();
    for p in ctx.cfg.pretrain_seeds.clone() {
        let t = ctx.parameter_free(p)?;
        nets.push(Network {
            id: format!("p{p}"),
            model: t.model,
            checkpoint: t.path,
        });
    }
    let plan = EvalPlan {
        noise_levels: vec![0.0],
        ..EvalPlan::new(&ctx.cfg, probe_hyper())
    };
    evaluate_arm(ctx, &mut run, "parameter_free/", &nets, &plan, Some("parameter_free"), false)?;
    run.finish()
}
