use std::time::Instant;
use voxdiff::checkpoint::Variant;
use voxdiff::classifier::{train_classifier, ClassifierTrainConfig};
use voxdiff::conditioning::Task;
use voxdiff::diffusion::{Guidance, SamplerMethod, SamplerSpec};
use voxdiff::phantoms::PhantomDataset;
use voxdiff::report::{protocol_alignment, subject_preservation, EvalConfig};
use voxdiff::counterfactual::evaluation_protocol;
use voxdiff::trainer::{train, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1500);
    let base_channels: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(8);
    let ds = PhantomDataset::generate(100, Task::LesionLoad, 42).unwrap();

    let t0 = Instant::now();
    let cfg = TrainConfig {
        steps,
        base_channels,
        ae_steps: 500,
        seed: 5,
        log_every: 250,
        checkpoint_every: 10_000,
        ..TrainConfig::new(Variant::LatentRflow)
    };
    let out = train(&cfg, &ds, None, None).unwrap();
    eprintln!("train {:.0}s; loss rows:", t0.elapsed().as_secs_f64());
    for r in &out.loss_rows {
        eprintln!("  step {:5}: train {:?} val {:.4}", r.step, r.train_loss, r.val_loss);
    }

    let t1 = Instant::now();
    let clf = train_classifier(&ds, &ClassifierTrainConfig { steps: 2000, ..Default::default() }).unwrap();
    eprintln!("classifier {:.0}s, held-out {:.3}", t1.elapsed().as_secs_f64(), clf.held_out_accuracy);

    let sampler = SamplerSpec { method: SamplerMethod::RflowEuler, num_steps: 25, guidance: Guidance::Off };
    let eval_cfg = EvalConfig::default();
    for g in [Guidance::Off, Guidance::Scale(0.5), Guidance::Scale(1.0), Guidance::Scale(2.0), Guidance::Scale(3.0)] {
        let t2 = Instant::now();
        let s = SamplerSpec { guidance: g, ..sampler };
        let proto = evaluation_protocol(&out.checkpoint, 8, 100, &s).unwrap();
        let align = protocol_alignment(&proto, &clf.params).unwrap();
        let (msssim, psnr, _) = subject_preservation(&proto.counterfactuals, &eval_cfg).unwrap();
        eprintln!("guidance {:>6}: alignment {:.3} subject-msssim {:.4} psnr {:.2} ({:.0}s)",
                 g.label(), align, msssim, psnr, t2.elapsed().as_secs_f64());
    }
}
