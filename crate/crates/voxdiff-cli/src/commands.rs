//! Implementations of the five subcommands.

use std::path::{Path, PathBuf};

use voxdiff::checkpoint::{self, Checkpoint, Variant};
use voxdiff::classifier::{train_classifier, ClassifierTrainConfig};
use voxdiff::conditioning::{parse_prompt, Task};
use voxdiff::counterfactual::{evaluation_protocol, generate_pair, write_pair, write_protocol};
use voxdiff::diffusion::{Guidance, SamplerMethod, SamplerSpec};
use voxdiff::error::{Error, Result};
use voxdiff::optim::ParamStore;
use voxdiff::phantoms::PhantomDataset;
use voxdiff::report::{
    evaluate, run_guidance_ablation, write_ablation_csv, write_metrics_csv, write_report_txt,
    EvalConfig,
};
use voxdiff::trainer::{train, TrainConfig};

use crate::data_io::{dataset_meta, load_dataset, write_dataset};
use crate::pgm::write_slice_grid;
use crate::runconfig::RunConfig;

fn prepare_out_dir(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        let non_empty = std::fs::read_dir(out)?.next().is_some();
        if non_empty && !force {
            return Err(Error::data(format!(
                "output directory {} exists and is not empty (use --force to overwrite)",
                out.display()
            )));
        }
    }
    std::fs::create_dir_all(out)?;
    Ok(())
}

pub struct GenDataArgs {
    pub task: String,
    pub subjects: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub force: bool,
    pub config: Option<PathBuf>,
}

pub fn cmd_gen_data(args: &GenDataArgs) -> Result<()> {
    let mut cfg = RunConfig::new(&[
        ("task", args.task.clone()),
        ("subjects", args.subjects.to_string()),
        ("seed", args.seed.to_string()),
    ]);
    if let Some(path) = &args.config {
        cfg.load_file(path)?;
    }
    let task = Task::parse(cfg.get("task"))?;
    let subjects = cfg.get_usize("subjects")?;
    let seed = cfg.get_u64("seed")?;
    let dataset = PhantomDataset::generate(subjects, task, seed)?;
    prepare_out_dir(&args.out, args.force)?;
    write_dataset(&dataset, &args.out)?;
    cfg.write(&args.out.join("run.config"))?;
    println!(
        "wrote {} phantoms ({} train / {} val / {} test) to {}",
        dataset.examples.len(),
        dataset.split.train.len(),
        dataset.split.val.len(),
        dataset.split.test.len(),
        args.out.display()
    );
    Ok(())
}

pub struct TrainArgs {
    pub variant: String,
    pub data: PathBuf,
    pub steps: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub learning_rate: f64,
    pub null_prompt_prob: f64,
    pub base_channels: usize,
    pub bottleneck_extra_blocks: usize,
    pub ae_steps: usize,
    pub checkpoint_every: usize,
    pub log_every: usize,
    pub resume: Option<PathBuf>,
    pub force: bool,
    pub config: Option<PathBuf>,
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::new(&[
        ("variant", args.variant.clone()),
        ("data", args.data.display().to_string()),
        ("steps", args.steps.to_string()),
        ("seed", args.seed.to_string()),
        ("learning_rate", args.learning_rate.to_string()),
        ("null_prompt_prob", args.null_prompt_prob.to_string()),
        ("batch_size", "1".to_string()),
        ("base_channels", args.base_channels.to_string()),
        (
            "bottleneck_extra_blocks",
            args.bottleneck_extra_blocks.to_string(),
        ),
        ("ae_steps", args.ae_steps.to_string()),
        ("checkpoint_every", args.checkpoint_every.to_string()),
        ("log_every", args.log_every.to_string()),
    ]);
    if let Some(path) = &args.config {
        cfg.load_file(path)?;
    }
    let variant = Variant::parse(cfg.get("variant"))?;
    let data_dir = PathBuf::from(cfg.get("data"));
    let (task, data_seed) = dataset_meta(&data_dir)?;
    let dataset = load_dataset(&data_dir, task, data_seed)?;

    let train_config = TrainConfig {
        variant,
        steps: cfg.get_usize("steps")?,
        batch_size: cfg.get_usize("batch_size")?,
        learning_rate: cfg.get_f64("learning_rate")?,
        null_prompt_prob: cfg.get_f64("null_prompt_prob")?,
        seed: cfg.get_u64("seed")?,
        checkpoint_every: cfg.get_usize("checkpoint_every")?,
        log_every: cfg.get_usize("log_every")?,
        ae_steps: cfg.get_usize("ae_steps")?,
        base_channels: cfg.get_usize("base_channels")?,
        bottleneck_extra_blocks: cfg.get_usize("bottleneck_extra_blocks")?,
        ..TrainConfig::new(variant)
    };

    let resume = match &args.resume {
        Some(path) => {
            let ckpt = checkpoint::load(path)?;
            if ckpt.task != task {
                return Err(Error::data(format!(
                    "checkpoint task {} does not match dataset task {}",
                    ckpt.task.name(),
                    task.name()
                )));
            }
            Some(ckpt)
        }
        None => None,
    };

    prepare_out_dir(&args.out, args.force)?;
    cfg.write(&args.out.join("run.config"))?;
    let outcome = train(&train_config, &dataset, Some(&args.out), resume)?;
    println!(
        "trained {} ({}) for {} steps; operating space {:?}; final val loss {:.6}",
        variant.name(),
        variant.operating_space(),
        outcome.steps_run,
        outcome.checkpoint.model_space_shape(),
        outcome.loss_rows.last().map(|r| r.val_loss).unwrap_or(f64::NAN)
    );
    println!("checkpoint: {}", args.out.join("checkpoint.ckpt").display());
    Ok(())
}

fn sampler_for(
    ckpt: &Checkpoint,
    method_flag: Option<&str>,
    steps: usize,
    guidance: Option<f64>,
    deterministic_required: bool,
) -> Result<SamplerSpec> {
    let (default_method, default_steps) = ckpt.variant.default_sampler();
    let mut method = match method_flag {
        Some(m) => SamplerMethod::parse(m)?,
        None => default_method,
    };
    // Counterfactual work needs a deterministic sampler; the latent-linear
    // default (ddpm) falls back to ddim at the same schedule.
    if deterministic_required && method_flag.is_none() && !method.is_deterministic() {
        method = SamplerMethod::Ddim;
    }
    let num_steps = if steps == 0 {
        if method == SamplerMethod::Ddpm {
            default_steps
        } else {
            25
        }
    } else {
        steps
    };
    let guidance = match guidance {
        Some(w) => {
            if w < 0.0 {
                return Err(Error::invalid(format!("guidance scale {w} must be >= 0")));
            }
            Guidance::Scale(w)
        }
        None => Guidance::Off,
    };
    Ok(SamplerSpec {
        method,
        num_steps,
        guidance,
    })
}

pub struct CounterfactualArgs {
    pub checkpoint: PathBuf,
    pub prompt_a: String,
    pub prompt_b: String,
    pub noise_seed: u64,
    pub steps: usize,
    pub guidance: Option<f64>,
    pub sampler: Option<String>,
    pub out: PathBuf,
    pub force: bool,
}

pub fn cmd_counterfactual(args: &CounterfactualArgs) -> Result<()> {
    let ckpt = checkpoint::load(&args.checkpoint)?;
    let class_a = parse_prompt(&args.prompt_a)?;
    let class_b = parse_prompt(&args.prompt_b)?;
    let sampler = sampler_for(&ckpt, args.sampler.as_deref(), args.steps, args.guidance, true)?;
    let pair = generate_pair(&ckpt, class_a, class_b, args.noise_seed, &sampler)?;

    prepare_out_dir(&args.out, args.force)?;
    let cfg = RunConfig::new(&[
        ("checkpoint", args.checkpoint.display().to_string()),
        ("prompt_a", pair.prompt_a.clone()),
        ("prompt_b", pair.prompt_b.clone()),
        ("noise_seed", args.noise_seed.to_string()),
        ("sampler", sampler.method.name().to_string()),
        ("steps", sampler.num_steps.to_string()),
        ("guidance", sampler.guidance.label()),
    ]);
    cfg.write(&args.out.join("run.config"))?;
    write_pair(&pair, &sampler, &args.out)?;
    write_slice_grid(
        &[
            (&pair.volume_a, false),
            (&pair.volume_b, false),
            (&pair.diff, true),
        ],
        &args.out.join("grid.pgm"),
    )?;
    let mean_abs_diff = pair.diff.data().iter().map(|v| v.abs()).sum::<f64>()
        / pair.diff.numel() as f64;
    println!(
        "counterfactual pair written to {} (mean |diff| = {:.6})",
        args.out.display(),
        mean_abs_diff
    );
    Ok(())
}

fn obtain_classifier(
    classifier_path: Option<&Path>,
    dataset: &PhantomDataset,
    seed: u64,
    out_dir: &Path,
) -> Result<ParamStore> {
    if let Some(path) = classifier_path {
        return checkpoint::load_params(path);
    }
    eprintln!("notice: no classifier provided; training one on the real dataset");
    let trained = train_classifier(
        dataset,
        &ClassifierTrainConfig {
            seed,
            ..ClassifierTrainConfig::default()
        },
    )?;
    eprintln!(
        "notice: classifier held-out accuracy {:.4}",
        trained.held_out_accuracy
    );
    checkpoint::save_params(&trained.params, &out_dir.join("classifier.prms"))?;
    Ok(trained.params)
}

pub struct EvaluateArgs {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub n_per_prompt: usize,
    pub noise_seed: u64,
    pub guidance: Option<f64>,
    pub sampler: Option<String>,
    pub steps: usize,
    pub classifier: Option<PathBuf>,
    pub out: PathBuf,
    pub force: bool,
    pub save_volumes: bool,
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let ckpt = checkpoint::load(&args.checkpoint)?;
    let (task, data_seed) = dataset_meta(&args.data)?;
    if task != ckpt.task {
        return Err(Error::data(format!(
            "dataset task {} does not match checkpoint task {}",
            task.name(),
            ckpt.task.name()
        )));
    }
    let dataset = load_dataset(&args.data, task, data_seed)?;
    let sampler = sampler_for(&ckpt, args.sampler.as_deref(), args.steps, args.guidance, true)?;

    prepare_out_dir(&args.out, args.force)?;
    let cfg = RunConfig::new(&[
        ("checkpoint", args.checkpoint.display().to_string()),
        ("data", args.data.display().to_string()),
        ("n_per_prompt", args.n_per_prompt.to_string()),
        ("noise_seed", args.noise_seed.to_string()),
        ("sampler", sampler.method.name().to_string()),
        ("steps", sampler.num_steps.to_string()),
        ("guidance", sampler.guidance.label()),
    ]);
    cfg.write(&args.out.join("run.config"))?;

    let classifier = obtain_classifier(
        args.classifier.as_deref(),
        &dataset,
        data_seed ^ 0xC1A55,
        &args.out,
    )?;
    let protocol = evaluation_protocol(&ckpt, args.n_per_prompt, args.noise_seed, &sampler)?;
    if args.save_volumes {
        write_protocol(&protocol, &args.out.join("protocol"))?;
    }
    let report = evaluate(&protocol, &classifier, &dataset, &EvalConfig::default())?;
    write_metrics_csv(&report, &args.out.join("report.csv"))?;
    write_report_txt(&report, &args.out.join("report.txt"))?;
    println!(
        "fid {:.4} | diversity ms-ssim {:.4} | subject ms-ssim {:.4} | subject psnr {:.2} dB | alignment {:.4}",
        report.fid,
        report.diversity_msssim,
        report.subject_msssim,
        report.subject_psnr_db,
        report.alignment_accuracy
    );
    Ok(())
}

pub struct AblateArgs {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub scales: String,
    pub n_per_prompt: usize,
    pub noise_seed: u64,
    pub sampler: Option<String>,
    pub steps: usize,
    pub classifier: Option<PathBuf>,
    pub out: PathBuf,
    pub force: bool,
}

pub fn cmd_ablate_guidance(args: &AblateArgs) -> Result<()> {
    let ckpt = checkpoint::load(&args.checkpoint)?;
    let (task, data_seed) = dataset_meta(&args.data)?;
    if task != ckpt.task {
        return Err(Error::data(format!(
            "dataset task {} does not match checkpoint task {}",
            task.name(),
            ckpt.task.name()
        )));
    }
    let dataset = load_dataset(&args.data, task, data_seed)?;
    let scales: Vec<f64> = args
        .scales
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::invalid(format!("bad guidance scale {s:?}")))
        })
        .collect::<Result<_>>()?;
    if scales.is_empty() {
        return Err(Error::invalid("no guidance scales given"));
    }
    let sampler = sampler_for(&ckpt, args.sampler.as_deref(), args.steps, None, true)?;

    prepare_out_dir(&args.out, args.force)?;
    let cfg = RunConfig::new(&[
        ("checkpoint", args.checkpoint.display().to_string()),
        ("data", args.data.display().to_string()),
        ("scales", args.scales.clone()),
        ("n_per_prompt", args.n_per_prompt.to_string()),
        ("noise_seed", args.noise_seed.to_string()),
        ("sampler", sampler.method.name().to_string()),
        ("steps", sampler.num_steps.to_string()),
    ]);
    cfg.write(&args.out.join("run.config"))?;

    let classifier = obtain_classifier(
        args.classifier.as_deref(),
        &dataset,
        data_seed ^ 0xC1A55,
        &args.out,
    )?;
    let rows = run_guidance_ablation(
        &ckpt,
        &classifier,
        &scales,
        args.n_per_prompt,
        args.noise_seed,
        &sampler,
        &EvalConfig::default(),
    )?;
    write_ablation_csv(&rows, &args.out.join("ablation.csv"))?;
    for row in &rows {
        println!(
            "guidance {:>6} | alignment {:.4} | subject ms-ssim {:.4} | subject psnr {:.2} dB",
            row.guidance.label(),
            row.alignment,
            row.subject_msssim,
            row.subject_psnr
        );
    }
    Ok(())
}
