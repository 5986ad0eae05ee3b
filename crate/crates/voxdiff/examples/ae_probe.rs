use std::time::Instant;
use voxdiff::conditioning::Task;
use voxdiff::optim::{adam_step, AdamConfig, AdamState};
use voxdiff::phantoms::PhantomDataset;
use voxdiff::rng::CounterRng;
use voxdiff::tape::Tape;
use voxdiff::tensor::Tensor;
use voxdiff::trainer::WeightedSampler;
use voxdiff::unet::{Autoencoder, AutoencoderConfig};

fn bright(v: &voxdiff::Tensor) -> usize { v.data().iter().filter(|&&x| x >= 0.76).count() }

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let ae_steps: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1200);
    let lambda: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(30.0);
    let ds = PhantomDataset::generate(100, Task::LesionLoad, 42).unwrap();
    let ae = Autoencoder::new(AutoencoderConfig::default());
    let mut params = ae.init_params(9);
    let mut adam = AdamState::default();
    let cfg = AdamConfig { lr: 1e-3, ..AdamConfig::default() };
    let sampler = WeightedSampler::class_balanced(&ds, &ds.split.train).unwrap();
    let base = CounterRng::new(9).split(0xAE);
    let t0 = Instant::now();
    for step in 0..ae_steps as u64 {
        let idx = sampler.draw(&mut base.split(step));
        let vol = &ds.examples[idx].volume;
        let w = vol.map(|v| 1.0 + if v >= 0.75 { lambda } else { 0.0 } + if v > 0.001 && v < 0.15 { 4.0 } else { 0.0 });
        let wsum = w.sum();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x = tape.leaf(vol.unsqueeze0());
        let wid = tape.leaf(w.unsqueeze0());
        let z = ae.encode_on_tape(&mut tape, &bound, x).unwrap();
        let xr = ae.decode_on_tape(&mut tape, &bound, z).unwrap();
        let d = tape.sub(xr, x).unwrap();
        let sq = tape.mul(d, d).unwrap();
        let wsq = tape.mul(sq, wid).unwrap();
        let sum = tape.sum(wsq);
        let loss = tape.scale(sum, 1.0 / wsum);
        let grads = tape.backward(loss).unwrap();
        adam_step(&mut params, &bound, &grads, &tape, &mut adam, &cfg).unwrap();
        if (step + 1) % 400 == 0 {
            eprintln!("ae step {}: wloss {:.5} ({:.0}s)", step + 1, tape.value(loss).item(), t0.elapsed().as_secs_f64());
        }
    }
    let mut per_class: Vec<Vec<(usize, usize)>> = vec![vec![]; 3];
    let mut plain_mse = 0.0;
    for &i in &ds.split.val {
        let ex = &ds.examples[i];
        let z = ae.encode(&params, &ex.volume.unsqueeze0()).unwrap();
        let rec = ae.decode(&params, &z).unwrap().squeeze0().unwrap().map(|v| v.clamp(0.0, 1.0));
        plain_mse += rec.mse(&ex.volume).unwrap();
        per_class[ex.class.level.index()].push((bright(&ex.volume), bright(&rec)));
    }
    eprintln!("val plain mse {:.5}", plain_mse / ds.split.val.len() as f64);
    for (c, pairs) in per_class.iter().enumerate() {
        eprintln!("class {c}: (real, recon) bright = {pairs:?}");
    }
    let _ = Tensor::zeros(&[1]);
}
