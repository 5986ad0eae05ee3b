//! Rough timing probe used during development; ignored by default.

use std::time::Instant;

use voxdiff::conditioning::Vocabulary;
use voxdiff::rng::CounterRng;
use voxdiff::tape::Tape;
use voxdiff::tensor::Tensor;
use voxdiff::unet::{DenoiserModel, UNetConfig, TEXT_EMBED};

#[test]
#[ignore]
fn time_training_step_shapes() {
    for (label, cfg, shape) in [
        (
            "wdm base16 16^3x8",
            UNetConfig::wavelet_space(1),
            [1usize, 8, 16, 16, 16],
        ),
        (
            "latent base16 8^3x4",
            UNetConfig::latent_space(4),
            [1, 4, 8, 8, 8],
        ),
        (
            "wdm base8 16^3x8",
            UNetConfig {
                base_channels: 8,
                ..UNetConfig::wavelet_space(1)
            },
            [1, 8, 16, 16, 16],
        ),
    ] {
        let m = DenoiserModel::new(cfg, Vocabulary::standard()).unwrap();
        let params = m.init_params(1);
        let mut rng = CounterRng::new(2);
        let x = Tensor::randn(&shape, &mut rng);
        let n = 10;
        let start = Instant::now();
        for step in 0..n {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let xid = tape.leaf(x.clone());
            let cond = tape.gather_rows(bound.id(TEXT_EMBED), &[3, 4, 5, 6, 7]).unwrap();
            let mut r = CounterRng::new(step as u64);
            let out = m
                .unet
                .forward(&mut tape, &bound, xid, 0.5, cond, true, &mut r, None)
                .unwrap();
            let target = tape.leaf(Tensor::zeros(&shape));
            let loss = tape.mse(out, target).unwrap();
            let _ = tape.backward(loss).unwrap();
        }
        let dt = start.elapsed().as_secs_f64() / n as f64;
        eprintln!("{label}: {:.1} ms/step ({} params)", dt * 1e3, m.unet.param_count());
    }
}
