//! Counterfactual pair generation and the evaluation sampling protocol.
//!
//! A pair decodes the same terminal noise under two prompts with a
//! deterministic sampler, so the two volumes share a subject identity and
//! differ only through the condition. The protocol samples n volumes per
//! level and, for every low-level sample, regenerates medium- and high-level
//! counterfactuals from that sample's own terminal noise.

use std::path::Path;

use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::conditioning::{
    build_prompt, encode, null_condition, ConditionEmbedding, Level, PromptClass,
};
use crate::diffusion::{sample, Guidance, SamplerSpec};
use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::tensor::Tensor;
use crate::unet::TEXT_EMBED;
use crate::volfile;

const STREAM_NOISE: u64 = 0x4E4F4953; // "NOIS"

/// Two volumes decoded from identical terminal noise under two prompts,
/// with their signed difference map.
#[derive(Clone, Debug)]
pub struct CounterfactualPair {
    pub noise_seed: u64,
    pub noise_stream: u64,
    pub prompt_a: String,
    pub prompt_b: String,
    pub volume_a: Tensor,
    pub volume_b: Tensor,
    /// volume_b - volume_a
    pub diff: Tensor,
    /// The shared terminal noise, recorded for pairing audits.
    pub x_terminal: Tensor,
}

/// Terminal noise for a given (seed, stream) position, in the checkpoint's
/// operating space.
pub fn draw_terminal_noise(ckpt: &Checkpoint, noise_seed: u64, stream: u64) -> Tensor {
    let mut rng = CounterRng::new(noise_seed).split(STREAM_NOISE).split(stream);
    Tensor::randn(&ckpt.model_space_shape(), &mut rng)
}

fn embeddings_for(
    ckpt: &Checkpoint,
    class: PromptClass,
) -> Result<(ConditionEmbedding, ConditionEmbedding)> {
    let table = ckpt
        .params
        .get(TEXT_EMBED)
        .ok_or_else(|| Error::data("checkpoint missing text embedding table"))?;
    let tokens = ckpt.vocab.tokenize(&build_prompt(class))?;
    Ok((encode(table, &tokens)?, null_condition(table)?))
}

/// Run the full reverse process for one prompt from the given terminal
/// noise, returning the decoded voxel volume.
pub fn sample_volume(
    ckpt: &Checkpoint,
    class: PromptClass,
    x_terminal: &Tensor,
    sampler: &SamplerSpec,
) -> Result<Tensor> {
    let model = ckpt.denoiser()?;
    let schedule = ckpt.schedule()?;
    let (cond, null) = embeddings_for(ckpt, class)?;
    // Deterministic samplers never touch this stream.
    let mut rng = CounterRng::new(0);
    let out = sample(
        &model, &ckpt.params, &schedule, sampler, &cond, &null, x_terminal, &mut rng,
    )?;
    ckpt.decode_to_volume(&out)
}

/// Generate one counterfactual pair from shared terminal noise. Requires a
/// deterministic sampler.
pub fn generate_pair(
    ckpt: &Checkpoint,
    class_a: PromptClass,
    class_b: PromptClass,
    noise_seed: u64,
    sampler: &SamplerSpec,
) -> Result<CounterfactualPair> {
    if !sampler.method.is_deterministic() {
        return Err(Error::invalid(
            "counterfactual pairs need a deterministic sampler (ddim or rflow-euler): \
             the ddpm sampler injects fresh noise at every step, so the two volumes \
             would no longer share a subject identity",
        ));
    }
    if class_a.task != ckpt.task || class_b.task != ckpt.task {
        return Err(Error::invalid(format!(
            "prompt task does not match the checkpoint's task ({})",
            ckpt.task.name()
        )));
    }
    let x_terminal = draw_terminal_noise(ckpt, noise_seed, 0);
    let volume_a = sample_volume(ckpt, class_a, &x_terminal, sampler)?;
    let volume_b = sample_volume(ckpt, class_b, &x_terminal, sampler)?;
    let diff = volume_b.sub(&volume_a)?;
    Ok(CounterfactualPair {
        noise_seed,
        noise_stream: 0,
        prompt_a: build_prompt(class_a),
        prompt_b: build_prompt(class_b),
        volume_a,
        volume_b,
        diff,
        x_terminal,
    })
}

/// One primary sample of the evaluation protocol.
#[derive(Clone, Debug)]
pub struct ProtocolSample {
    pub level: Level,
    pub index: usize,
    pub noise_stream: u64,
    pub volume: Tensor,
}

#[derive(Clone, Debug)]
pub struct ProtocolOutput {
    pub n_per_prompt: usize,
    pub base_noise_seed: u64,
    pub sampler: SamplerSpec,
    /// 3 * n_per_prompt primary samples, grouped by level.
    pub samples: Vec<ProtocolSample>,
    /// 2 * n_per_prompt pairs: (low -> medium) and (low -> high) from every
    /// low-level sample's terminal noise.
    pub counterfactuals: Vec<CounterfactualPair>,
}

/// The sampling plan: which (level, stream) pairs the protocol will run.
/// Separated from execution so the arithmetic is checkable at any n.
pub fn protocol_plan(n_per_prompt: usize) -> (Vec<(Level, usize, u64)>, Vec<(usize, u64, Level)>) {
    let mut primaries = Vec::with_capacity(3 * n_per_prompt);
    for (li, level) in Level::all().into_iter().enumerate() {
        for i in 0..n_per_prompt {
            primaries.push((level, i, (li * n_per_prompt + i) as u64));
        }
    }
    let mut counterfactuals = Vec::with_capacity(2 * n_per_prompt);
    for i in 0..n_per_prompt {
        let low_stream = i as u64; // level index 0
        counterfactuals.push((i, low_stream, Level::Medium));
        counterfactuals.push((i, low_stream, Level::High));
    }
    (primaries, counterfactuals)
}

/// Execute the full protocol. Sampling fans out over a worker pool; results
/// are keyed by their plan position, so the output is independent of the
/// thread count.
pub fn evaluation_protocol(
    ckpt: &Checkpoint,
    n_per_prompt: usize,
    base_noise_seed: u64,
    sampler: &SamplerSpec,
) -> Result<ProtocolOutput> {
    if n_per_prompt == 0 {
        return Err(Error::invalid("protocol needs n_per_prompt >= 1"));
    }
    if !sampler.method.is_deterministic() {
        return Err(Error::invalid(
            "the evaluation protocol generates counterfactual pairs and needs a \
             deterministic sampler (ddim or rflow-euler)",
        ));
    }
    let task = ckpt.task;
    let (primary_plan, cf_plan) = protocol_plan(n_per_prompt);

    let samples: Vec<ProtocolSample> = primary_plan
        .par_iter()
        .map(|&(level, index, stream)| {
            let x_t = draw_terminal_noise(ckpt, base_noise_seed, stream);
            let volume = sample_volume(ckpt, PromptClass::new(task, level), &x_t, sampler)?;
            Ok(ProtocolSample {
                level,
                index,
                noise_stream: stream,
                volume,
            })
        })
        .collect::<Result<_>>()?;

    let counterfactuals: Vec<CounterfactualPair> = cf_plan
        .par_iter()
        .map(|&(index, stream, target)| {
            let x_t = draw_terminal_noise(ckpt, base_noise_seed, stream);
            // The low-level primary was generated from this same stream.
            let low = &samples[index];
            debug_assert_eq!(low.level, Level::Low);
            debug_assert_eq!(low.noise_stream, stream);
            let volume_b =
                sample_volume(ckpt, PromptClass::new(task, target), &x_t, sampler)?;
            let diff = volume_b.sub(&low.volume)?;
            Ok(CounterfactualPair {
                noise_seed: base_noise_seed,
                noise_stream: stream,
                prompt_a: build_prompt(PromptClass::new(task, Level::Low)),
                prompt_b: build_prompt(PromptClass::new(task, target)),
                volume_a: low.volume.clone(),
                volume_b,
                diff,
                x_terminal: x_t,
            })
        })
        .collect::<Result<_>>()?;

    Ok(ProtocolOutput {
        n_per_prompt,
        base_noise_seed,
        sampler: *sampler,
        samples,
        counterfactuals,
    })
}

fn guidance_json(g: Guidance) -> String {
    match g {
        Guidance::Off => "null".to_string(),
        Guidance::Scale(w) => format!("{w}"),
    }
}

/// Persist one pair: a.vol, b.vol, diff.vol and a small JSON manifest with
/// the seeds and prompts.
pub fn write_pair(pair: &CounterfactualPair, sampler: &SamplerSpec, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    volfile::save(&pair.volume_a, &dir.join("a.vol"))?;
    volfile::save(&pair.volume_b, &dir.join("b.vol"))?;
    volfile::save(&pair.diff, &dir.join("diff.vol"))?;
    let meta = format!(
        "{{\n  \"noise_seed\": {},\n  \"noise_stream\": {},\n  \"prompt_a\": \"{}\",\n  \"prompt_b\": \"{}\",\n  \"sampler\": \"{}\",\n  \"num_steps\": {},\n  \"guidance\": {}\n}}\n",
        pair.noise_seed,
        pair.noise_stream,
        pair.prompt_a,
        pair.prompt_b,
        sampler.method.name(),
        sampler.num_steps,
        guidance_json(sampler.guidance),
    );
    std::fs::write(dir.join("meta.json"), meta)?;
    Ok(())
}

/// Persist a protocol run: samples/<level>/<idx>.vol plus
/// counterfactuals/<pair-id>/{a,b,diff}.vol with manifests.
pub fn write_protocol(out: &ProtocolOutput, dir: &Path) -> Result<()> {
    for s in &out.samples {
        let level_dir = dir.join("samples").join(s.level.name());
        std::fs::create_dir_all(&level_dir)?;
        volfile::save(&s.volume, &level_dir.join(format!("{:04}.vol", s.index)))?;
    }
    for (k, pair) in out.counterfactuals.iter().enumerate() {
        let target = if k % 2 == 0 { "medium" } else { "high" };
        let pair_dir = dir
            .join("counterfactuals")
            .join(format!("{:04}-low-to-{target}", k / 2));
        write_pair(pair, &out.sampler, &pair_dir)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::Task;
    use crate::diffusion::SamplerMethod;
    use crate::phantoms::PhantomDataset;
    use crate::trainer::{train, TrainConfig};

    fn tiny_checkpoint() -> Checkpoint {
        let ds = PhantomDataset::generate(12, Task::LesionLoad, 21).unwrap();
        let cfg = TrainConfig {
            steps: 2,
            base_channels: 4,
            bottleneck_extra_blocks: 0,
            ae_steps: 10,
            ae_hidden: 8,
            seed: 3,
            ..TrainConfig::new(crate::checkpoint::Variant::LatentRflow)
        };
        train(&cfg, &ds, None, None).unwrap().checkpoint
    }

    fn fast_sampler() -> SamplerSpec {
        SamplerSpec {
            method: SamplerMethod::RflowEuler,
            num_steps: 2,
            guidance: Guidance::Off,
        }
    }

    #[test]
    fn identical_prompts_give_identical_volumes() {
        let ckpt = tiny_checkpoint();
        let class = PromptClass::new(Task::LesionLoad, Level::Low);
        let pair = generate_pair(&ckpt, class, class, 7, &fast_sampler()).unwrap();
        assert!(pair.volume_a.bit_eq(&pair.volume_b));
        assert!(pair.diff.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn distinct_noise_seeds_give_distinct_volumes() {
        let ckpt = tiny_checkpoint();
        let class = PromptClass::new(Task::LesionLoad, Level::Low);
        let a = generate_pair(&ckpt, class, class, 1, &fast_sampler()).unwrap();
        let b = generate_pair(&ckpt, class, class, 2, &fast_sampler()).unwrap();
        assert!(a.volume_a.max_abs_diff(&b.volume_a) > 0.0);
    }

    #[test]
    fn ddpm_sampler_rejected_for_pairs() {
        let ckpt = tiny_checkpoint();
        let class = PromptClass::new(Task::LesionLoad, Level::Low);
        let err = generate_pair(
            &ckpt,
            class,
            class,
            1,
            &SamplerSpec {
                method: SamplerMethod::Ddpm,
                num_steps: 1000,
                guidance: Guidance::Off,
            },
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("deterministic"), "{err}");
    }

    #[test]
    fn protocol_arithmetic() {
        let (p, c) = protocol_plan(333);
        assert_eq!(p.len(), 999);
        assert_eq!(c.len(), 666);
        let (p, c) = protocol_plan(1);
        assert_eq!(p.len(), 3);
        assert_eq!(c.len(), 2);
        // streams are fixed offsets from the base
        assert_eq!(p[0].2, 0);
        assert_eq!(p[1].2, 1);
    }

    #[test]
    fn protocol_executes_and_pairs_share_noise() {
        let ckpt = tiny_checkpoint();
        let out = evaluation_protocol(&ckpt, 2, 99, &fast_sampler()).unwrap();
        assert_eq!(out.samples.len(), 6);
        assert_eq!(out.counterfactuals.len(), 4);
        for pair in &out.counterfactuals {
            let regen = draw_terminal_noise(&ckpt, 99, pair.noise_stream);
            assert!(pair.x_terminal.bit_eq(&regen), "x_T not reproducible");
        }
        // identical base seed twice -> identical artifacts
        let out2 = evaluation_protocol(&ckpt, 2, 99, &fast_sampler()).unwrap();
        for (a, b) in out.samples.iter().zip(out2.samples.iter()) {
            assert!(a.volume.bit_eq(&b.volume));
        }
    }

    #[test]
    fn protocol_is_thread_count_invariant() {
        let ckpt = tiny_checkpoint();
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| evaluation_protocol(&ckpt, 2, 5, &fast_sampler()).unwrap())
        };
        let a = run(1);
        let b = run(4);
        for (x, y) in a.samples.iter().zip(b.samples.iter()) {
            assert!(x.volume.bit_eq(&y.volume));
        }
        for (x, y) in a.counterfactuals.iter().zip(b.counterfactuals.iter()) {
            assert!(x.volume_b.bit_eq(&y.volume_b));
        }
    }
}
