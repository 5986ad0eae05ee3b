//! Full-protocol evaluation: FID over learned features, diversity and
//! subject-preservation MS-SSIM, PSNR, prompt alignment, and the
//! guidance-scale ablation. Emits a CSV with the fixed column order
//! (fid, diversity_msssim, subject_msssim, subject_psnr_db,
//! alignment_accuracy) plus a human-readable summary.

use std::path::Path;

use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::classifier::Classifier;
use crate::counterfactual::{evaluation_protocol, CounterfactualPair, ProtocolOutput};
use crate::diffusion::{Guidance, SamplerSpec};
use crate::error::{Error, Result};
use crate::metrics::{frechet_distance, ms_ssim3d, psnr};
use crate::optim::ParamStore;
use crate::phantoms::PhantomDataset;
use crate::rng::CounterRng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct EvalConfig {
    pub data_range: f64,
    pub msssim_scales: usize,
    /// Diversity MS-SSIM is estimated over at most this many random pairs.
    pub max_diversity_pairs: usize,
    pub pair_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            data_range: 1.0,
            msssim_scales: 3,
            max_diversity_pairs: 1000,
            pair_seed: 0x9A17,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub fid: f64,
    /// Mean pairwise MS-SSIM over the generated set (lower = more varied).
    pub diversity_msssim: f64,
    /// Mean MS-SSIM between factual samples and their counterfactuals.
    pub subject_msssim: f64,
    /// Mean PSNR (dB) over counterfactual pairs with finite PSNR.
    pub subject_psnr_db: f64,
    pub alignment_accuracy: f64,
    pub n_samples: usize,
    pub n_pairs: usize,
    pub base_noise_seed: u64,
    pub infinite_psnr_pairs: usize,
}

impl MetricsReport {
    pub fn validate(&self) -> Result<()> {
        let finite = self.fid.is_finite()
            && self.diversity_msssim.is_finite()
            && self.subject_msssim.is_finite()
            && (self.subject_psnr_db.is_finite() || self.infinite_psnr_pairs > 0);
        if !finite {
            return Err(Error::numeric("metrics report contains non-finite values"));
        }
        if !(0.0..=1.0).contains(&self.alignment_accuracy) {
            return Err(Error::numeric(format!(
                "alignment accuracy {} outside [0,1]",
                self.alignment_accuracy
            )));
        }
        Ok(())
    }
}

/// Mean subject-preservation metrics over counterfactual pairs.
pub fn subject_preservation(
    pairs: &[CounterfactualPair],
    cfg: &EvalConfig,
) -> Result<(f64, f64, usize)> {
    if pairs.is_empty() {
        return Err(Error::invalid("no counterfactual pairs to evaluate"));
    }
    let per: Vec<(f64, f64)> = pairs
        .par_iter()
        .map(|p| {
            let ms = ms_ssim3d(&p.volume_a, &p.volume_b, cfg.data_range, cfg.msssim_scales)?;
            let ps = psnr(&p.volume_a, &p.volume_b, cfg.data_range)?;
            Ok((ms, ps))
        })
        .collect::<Result<_>>()?;
    let ms_mean = per.iter().map(|(m, _)| m).sum::<f64>() / per.len() as f64;
    let infinite = per.iter().filter(|(_, p)| p.is_infinite()).count();
    let finite: Vec<f64> = per
        .iter()
        .map(|(_, p)| *p)
        .filter(|p| p.is_finite())
        .collect();
    let psnr_mean = if finite.is_empty() {
        f64::INFINITY
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    };
    Ok((ms_mean, psnr_mean, infinite))
}

/// Mean pairwise MS-SSIM over a volume set, subsampled deterministically
/// when the full pair count exceeds the configured cap.
pub fn diversity_msssim(volumes: &[&Tensor], cfg: &EvalConfig) -> Result<f64> {
    let n = volumes.len();
    if n < 2 {
        return Err(Error::invalid("diversity needs >= 2 volumes"));
    }
    let total_pairs = n * (n - 1) / 2;
    let pairs: Vec<(usize, usize)> = if total_pairs <= cfg.max_diversity_pairs {
        (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .collect()
    } else {
        let mut rng = CounterRng::new(cfg.pair_seed);
        (0..cfg.max_diversity_pairs)
            .map(|_| {
                let i = rng.uniform_int(n as u64) as usize;
                let mut j = rng.uniform_int(n as u64 - 1) as usize;
                if j >= i {
                    j += 1;
                }
                (i.min(j), i.max(j))
            })
            .collect()
    };
    let values: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| ms_ssim3d(volumes[i], volumes[j], cfg.data_range, cfg.msssim_scales))
        .collect::<Result<_>>()?;
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Alignment of generated primaries against their requested levels.
pub fn protocol_alignment(protocol: &ProtocolOutput, classifier: &ParamStore) -> Result<f64> {
    let hits: Vec<bool> = protocol
        .samples
        .par_iter()
        .map(|s| Ok(Classifier::predict(classifier, &s.volume)? == s.level))
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}

/// Full evaluation of a protocol run against the real dataset's test split.
pub fn evaluate(
    protocol: &ProtocolOutput,
    classifier: &ParamStore,
    real: &PhantomDataset,
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    if protocol.samples.is_empty() {
        return Err(Error::invalid("protocol has no samples"));
    }
    let real_features: Vec<Vec<f64>> = real
        .split
        .test
        .par_iter()
        .map(|&i| Classifier::extract_features(classifier, &real.examples[i].volume))
        .collect::<Result<_>>()?;
    let gen_features: Vec<Vec<f64>> = protocol
        .samples
        .par_iter()
        .map(|s| Classifier::extract_features(classifier, &s.volume))
        .collect::<Result<_>>()?;
    let fid = frechet_distance(&real_features, &gen_features)?;

    let volumes: Vec<&Tensor> = protocol.samples.iter().map(|s| &s.volume).collect();
    let diversity = diversity_msssim(&volumes, cfg)?;
    let (subject_msssim, subject_psnr_db, infinite_psnr_pairs) =
        subject_preservation(&protocol.counterfactuals, cfg)?;
    let alignment_accuracy = protocol_alignment(protocol, classifier)?;

    let report = MetricsReport {
        fid,
        diversity_msssim: diversity,
        subject_msssim,
        subject_psnr_db,
        alignment_accuracy,
        n_samples: protocol.samples.len(),
        n_pairs: protocol.counterfactuals.len(),
        base_noise_seed: protocol.base_noise_seed,
        infinite_psnr_pairs,
    };
    report.validate()?;
    Ok(report)
}

fn fmt_psnr(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.6}")
    }
}

/// CSV in the fixed column order.
pub fn write_metrics_csv(report: &MetricsReport, path: &Path) -> Result<()> {
    let body = format!(
        "fid,diversity_msssim,subject_msssim,subject_psnr_db,alignment_accuracy\n{:.6},{:.6},{:.6},{},{:.6}\n",
        report.fid,
        report.diversity_msssim,
        report.subject_msssim,
        fmt_psnr(report.subject_psnr_db),
        report.alignment_accuracy
    );
    std::fs::write(path, body)?;
    Ok(())
}

pub fn write_report_txt(report: &MetricsReport, path: &Path) -> Result<()> {
    let mut s = String::new();
    s.push_str("evaluation report\n");
    s.push_str("=================\n");
    s.push_str(&format!(
        "samples: {} primaries, {} counterfactual pairs (base noise seed {})\n",
        report.n_samples, report.n_pairs, report.base_noise_seed
    ));
    s.push_str(&format!("fid (learned features):     {:.6}\n", report.fid));
    s.push_str(&format!(
        "diversity ms-ssim (lower = more varied): {:.6}\n",
        report.diversity_msssim
    ));
    s.push_str(&format!(
        "subject ms-ssim:            {:.6}\n",
        report.subject_msssim
    ));
    s.push_str(&format!(
        "subject psnr (dB):          {}{}\n",
        fmt_psnr(report.subject_psnr_db),
        if report.infinite_psnr_pairs > 0 {
            format!("  ({} identical pairs reported as infinite)", report.infinite_psnr_pairs)
        } else {
            String::new()
        }
    ));
    s.push_str(&format!(
        "alignment accuracy:         {:.6}\n",
        report.alignment_accuracy
    ));
    std::fs::write(path, s)?;
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub struct AblationRow {
    pub guidance: Guidance,
    pub alignment: f64,
    pub subject_msssim: f64,
    pub subject_psnr: f64,
}

/// Run the protocol at each guidance setting (a no-guidance row first, then
/// the requested scales) and collect alignment plus subject preservation.
pub fn run_guidance_ablation(
    ckpt: &Checkpoint,
    classifier: &ParamStore,
    scales: &[f64],
    n_per_prompt: usize,
    base_noise_seed: u64,
    base_sampler: &SamplerSpec,
    cfg: &EvalConfig,
) -> Result<Vec<AblationRow>> {
    let mut settings = vec![Guidance::Off];
    for &w in scales {
        if w < 0.0 {
            return Err(Error::invalid(format!("guidance scale {w} must be >= 0")));
        }
        settings.push(Guidance::Scale(w));
    }
    let mut rows = Vec::with_capacity(settings.len());
    for guidance in settings {
        let sampler = SamplerSpec {
            guidance,
            ..*base_sampler
        };
        let protocol = evaluation_protocol(ckpt, n_per_prompt, base_noise_seed, &sampler)?;
        let alignment = protocol_alignment(&protocol, classifier)?;
        let (subject_msssim, subject_psnr, _) =
            subject_preservation(&protocol.counterfactuals, cfg)?;
        rows.push(AblationRow {
            guidance,
            alignment,
            subject_msssim,
            subject_psnr,
        });
    }
    Ok(rows)
}

/// Ablation CSV: one row per guidance setting, "no-cfg" first.
pub fn write_ablation_csv(rows: &[AblationRow], path: &Path) -> Result<()> {
    let mut s = String::from("guidance,alignment,subject_msssim,subject_psnr\n");
    for r in rows {
        s.push_str(&format!(
            "{},{:.6},{:.6},{}\n",
            r.guidance.label(),
            r.alignment,
            r.subject_msssim,
            fmt_psnr(r.subject_psnr)
        ));
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Spearman rank correlation between two equally long sequences.
pub fn spearman_rho(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let rank = |v: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    };
    let rx = rank(xs);
    let ry = rank(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..xs.len() {
        cov += (rx[i] - mx) * (ry[i] - my);
        vx += (rx[i] - mx) * (rx[i] - mx);
        vy += (ry[i] - my) * (ry[i] - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}
