//! The text-alignment classifier: a small 3D CNN (three stride-2 conv
//! stages, global average pooling, linear head over the three levels).
//! Its penultimate 64-wide activations double as the feature extractor for
//! the Fréchet distance, which keeps the whole evaluation self-contained.

use crate::conditioning::Level;
use crate::error::{Error, Result};
use crate::optim::{adam_step, AdamConfig, AdamState, BoundParams, ParamStore};
use crate::phantoms::PhantomDataset;
use crate::rng::CounterRng;
use crate::tape::{Tape, ValueId};
use crate::trainer::WeightedSampler;
use crate::tensor::Tensor;
use crate::unet::{init_params, Init, ParamSpec};

pub const FEATURE_WIDTH: usize = 64;
pub const NUM_CLASSES: usize = 3;
const BIN_CHANNELS: usize = 8;
const INTENSITY_GAIN: f64 = 50.0;
const TOP_THRESHOLD: f64 = 0.78;

pub struct Classifier;

impl Classifier {
    pub fn param_specs() -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        // Stage 0 is a pointwise intensity-binning layer: constant-gain
        // 1x1x1 weights with a ladder of biases put one soft threshold per
        // channel across the intensity range, so pooled counts of bright
        // voxels are linearly available from the first step. Trainable like
        // everything else.
        specs.push(ParamSpec {
            name: "clf.stage0.conv.w".into(),
            shape: vec![BIN_CHANNELS, 1, 1, 1, 1],
            init: Init::Const(INTENSITY_GAIN),
        });
        specs.push(ParamSpec {
            name: "clf.stage0.conv.b".into(),
            shape: vec![BIN_CHANNELS],
            init: Init::PairedThresholdLadder {
                gain: INTENSITY_GAIN,
                top: TOP_THRESHOLD,
            },
        });
        let mut cin = BIN_CHANNELS;
        for (i, cout) in [(1usize, 16usize), (2, FEATURE_WIDTH)] {
            specs.push(ParamSpec {
                name: format!("clf.stage{i}.conv.w"),
                shape: vec![cout, cin, 3, 3, 3],
                init: if i == 1 {
                    Init::ConvBoxCount
                } else {
                    Init::ConvBoxPassthrough
                },
            });
            specs.push(ParamSpec {
                name: format!("clf.stage{i}.conv.b"),
                shape: vec![cout],
                init: Init::Zeros,
            });
            cin = cout;
        }
        specs.push(ParamSpec {
            name: "clf.head.w".into(),
            shape: vec![FEATURE_WIDTH, NUM_CLASSES],
            init: Init::Proj,
        });
        specs.push(ParamSpec {
            name: "clf.head.b".into(),
            shape: vec![NUM_CLASSES],
            init: Init::Zeros,
        });
        specs
    }

    pub fn init(seed: u64) -> ParamStore {
        init_params(&Self::param_specs(), seed)
    }

    /// Returns (features [B, 64], logits [B, 3]).
    pub fn forward_on_tape(
        tape: &mut Tape,
        bound: &BoundParams,
        x: ValueId,
    ) -> Result<(ValueId, ValueId)> {
        let (_, c, ..) = tape.value(x).dims5()?;
        if c != 1 {
            return Err(Error::shape(format!(
                "classifier expects single-channel volumes, got {c}"
            )));
        }
        let mut h = x;
        // stage 0: pointwise intensity binning at full resolution
        h = tape.conv3d(h, bound.id("clf.stage0.conv.w"), 1, 0)?;
        h = tape.add_channel_bias(h, bound.id("clf.stage0.conv.b"))?;
        h = tape.relu(h);
        // stages 1-2: strided aggregation
        for i in [1usize, 2] {
            let p = |s: &str| bound.id(&format!("clf.stage{i}.{s}"));
            h = tape.conv3d(h, p("conv.w"), 2, 1)?;
            h = tape.add_channel_bias(h, p("conv.b"))?;
            h = tape.relu(h);
        }
        let features = tape.mean_spatial(h)?;
        let logits = tape.linear(features, bound.id("clf.head.w"), bound.id("clf.head.b"))?;
        Ok((features, logits))
    }

    /// Penultimate activations for one volume ([C,D,H,W] or [B,C,D,H,W]).
    pub fn extract_features(params: &ParamStore, volume: &Tensor) -> Result<Vec<f64>> {
        let v5 = as_batched(volume)?;
        let mut tape = Tape::new();
        let bound = params.bind_frozen(&mut tape);
        let x = tape.leaf(v5);
        let (features, _) = Self::forward_on_tape(&mut tape, &bound, x)?;
        Ok(tape.value(features).data().to_vec())
    }

    /// Argmax class for one volume.
    pub fn predict(params: &ParamStore, volume: &Tensor) -> Result<Level> {
        let v5 = as_batched(volume)?;
        let mut tape = Tape::new();
        let bound = params.bind_frozen(&mut tape);
        let x = tape.leaf(v5);
        let (_, logits) = Self::forward_on_tape(&mut tape, &bound, x)?;
        let row = tape.value(logits).data();
        let mut best = 0;
        for k in 1..NUM_CLASSES {
            if row[k] > row[best] {
                best = k;
            }
        }
        Level::from_index(best)
    }
}

fn as_batched(volume: &Tensor) -> Result<Tensor> {
    match volume.shape().len() {
        4 => Ok(volume.unsqueeze0()),
        5 => Ok(volume.clone()),
        _ => Err(Error::shape(format!(
            "expected a volume, got {:?}",
            volume.shape()
        ))),
    }
}

/// Same-extent separable Gaussian blur with clamped borders; the training
/// augmentation that keeps the classifier usable on softer generated volumes.
pub fn gaussian_blur_same(volume: &Tensor, sigma: f64) -> Result<Tensor> {
    if sigma <= 0.0 {
        return Ok(volume.clone());
    }
    let shape = volume.shape().to_vec();
    let (d, h, w) = match shape.as_slice() {
        [1, d, h, w] => (*d, *h, *w),
        [d, h, w] => (*d, *h, *w),
        other => return Err(Error::shape(format!("blur expects one volume, got {other:?}"))),
    };
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    let mut sum = 0.0;
    for i in -radius..=radius {
        let v = (-(i as f64) * (i as f64) / (2.0 * sigma * sigma)).exp();
        kernel.push(v);
        sum += v;
    }
    for v in &mut kernel {
        *v /= sum;
    }
    let mut cur = volume.data().to_vec();
    for axis in 0..3 {
        let mut next = vec![0.0; cur.len()];
        let ext = [d, h, w][axis];
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (j, &kv) in kernel.iter().enumerate() {
                        let off = j as isize - radius;
                        let (mut zz, mut yy, mut xx) = (z as isize, y as isize, x as isize);
                        match axis {
                            0 => zz += off,
                            1 => yy += off,
                            _ => xx += off,
                        }
                        let clamp = |v: isize| v.clamp(0, ext as isize - 1) as usize;
                        let (cz, cy, cx) = match axis {
                            0 => (clamp(zz), y, x),
                            1 => (z, clamp(yy), x),
                            _ => (z, y, clamp(xx)),
                        };
                        acc += kv * cur[(cz * h + cy) * w + cx];
                    }
                    next[(z * h + y) * w + x] = acc;
                }
            }
        }
        cur = next;
    }
    Tensor::new(&shape, cur)
}

#[derive(Clone, Debug)]
pub struct ClassifierTrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Randomly blur/noise training volumes so the decision rule tolerates
    /// the softer textures of generated samples.
    pub augment: bool,
    /// Additional phantom subjects drawn from the generator (balanced over
    /// classes) to widen the classifier's training pool. Held-out accuracy
    /// is always measured on the original dataset's test split.
    pub extra_subjects: usize,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        ClassifierTrainConfig {
            steps: 3000,
            learning_rate: 1e-3,
            seed: 7,
            augment: true,
            extra_subjects: 200,
        }
    }
}

pub struct TrainedClassifier {
    pub params: ParamStore,
    pub held_out_accuracy: f64,
}

/// Cross-entropy training with class-balanced example draws from the train
/// split; accuracy reported on the held-out test split. Deterministic for a
/// fixed config.
pub fn train_classifier(
    dataset: &PhantomDataset,
    config: &ClassifierTrainConfig,
) -> Result<TrainedClassifier> {
    let mut params = Classifier::init(config.seed);
    let mut adam = AdamState::default();
    // Training pool: the dataset's train split plus freshly drawn subjects.
    let mut pool: Vec<(Tensor, usize)> = dataset
        .split
        .train
        .iter()
        .map(|&i| {
            let ex = &dataset.examples[i];
            (ex.volume.clone(), ex.class.level.index())
        })
        .collect();
    if config.extra_subjects > 0 {
        let extra_seed = CounterRng::new(dataset.seed).split(0x45585452).key();
        let extra = PhantomDataset::generate_with_imbalance(
            config.extra_subjects,
            dataset.task,
            extra_seed,
            [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
        )?;
        pool.extend(
            extra
                .examples
                .iter()
                .map(|ex| (ex.volume.clone(), ex.class.level.index())),
        );
    }
    let mut class_counts = [0usize; 3];
    for (_, label) in &pool {
        class_counts[*label] += 1;
    }
    let weights: Vec<f64> = pool
        .iter()
        .map(|(_, label)| 1.0 / class_counts[*label].max(1) as f64)
        .collect();
    let sampler = WeightedSampler::new((0..pool.len()).collect(), &weights)?;
    let base = CounterRng::new(config.seed).split(0x434C4652);
    for step in 0..config.steps as u64 {
        // Linear decay to a tenth of the base rate steadies the batch-1 end
        // game.
        let frac = step as f64 / config.steps.max(1) as f64;
        let adam_cfg = AdamConfig {
            lr: config.learning_rate * (1.0 - 0.9 * frac),
            ..AdamConfig::default()
        };
        let step_rng = base.split(step);
        let pos = sampler.draw(&mut step_rng.split(1));
        let (raw_volume, label) = &pool[pos];
        let volume = if config.augment {
            augment(raw_volume, &mut step_rng.split(2))?
        } else {
            raw_volume.clone()
        };
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x = tape.leaf(volume.unsqueeze0());
        let (_, logits) = Classifier::forward_on_tape(&mut tape, &bound, x)?;
        let loss = tape.cross_entropy(logits, &[*label])?;
        if !tape.value(loss).item().is_finite() {
            return Err(Error::numeric(format!(
                "classifier training diverged at step {step}"
            )));
        }
        let grads = tape.backward(loss)?;
        adam_step(&mut params, &bound, &grads, &tape, &mut adam, &adam_cfg)?;
    }
    let held_out_accuracy = split_accuracy(&params, dataset, &dataset.split.test)?;
    Ok(TrainedClassifier {
        params,
        held_out_accuracy,
    })
}

fn augment(volume: &Tensor, rng: &mut CounterRng) -> Result<Tensor> {
    let sigma = if rng.uniform_int(4) == 3 { 0.4 } else { 0.0 };
    let blurred = gaussian_blur_same(volume, sigma)?;
    let noise_amp = 0.02 * rng.uniform();
    let noise = Tensor::randn(blurred.shape(), rng);
    blurred.affine(1.0, &noise, noise_amp)
}

/// Accuracy of the classifier over the given example indices.
pub fn split_accuracy(
    params: &ParamStore,
    dataset: &PhantomDataset,
    indices: &[usize],
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::invalid("accuracy over an empty index set"));
    }
    let mut correct = 0;
    for &i in indices {
        let ex = &dataset.examples[i];
        if Classifier::predict(params, &ex.volume)? == ex.class.level {
            correct += 1;
        }
    }
    Ok(correct as f64 / indices.len() as f64)
}

/// Fraction of generated volumes whose predicted class matches the prompted
/// one. Equivalent to the trace of the confusion matrix over its total.
pub fn alignment_accuracy(params: &ParamStore, samples: &[(Tensor, Level)]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("alignment over an empty sample set"));
    }
    let mut correct = 0;
    for (volume, requested) in samples {
        if Classifier::predict(params, volume)? == *requested {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::Task;

    #[test]
    fn logits_shape_and_feature_width() {
        let params = Classifier::init(1);
        let mut tape = Tape::new();
        let bound = params.bind_frozen(&mut tape);
        let x = tape.leaf(Tensor::zeros(&[2, 1, 32, 32, 32]));
        let (features, logits) = Classifier::forward_on_tape(&mut tape, &bound, x).unwrap();
        assert_eq!(tape.value(features).shape(), &[2, FEATURE_WIDTH]);
        assert_eq!(tape.value(logits).shape(), &[2, NUM_CLASSES]);
    }

    #[test]
    fn untrained_accuracy_is_near_chance_on_balanced_set() {
        let params = Classifier::init(2);
        let ds = PhantomDataset::generate_with_imbalance(
            30,
            Task::LesionLoad,
            5,
            [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
        )
        .unwrap();
        let all: Vec<usize> = (0..30).collect();
        let acc = split_accuracy(&params, &ds, &all).unwrap();
        // An untrained net predicts nearly constantly; on a balanced set that
        // pins accuracy near 1/3.
        assert!(acc <= 0.5, "untrained accuracy {acc}");
    }

    #[test]
    fn features_deterministic() {
        let params = Classifier::init(3);
        let ds = PhantomDataset::generate(10, Task::LesionLoad, 6).unwrap();
        let f1 = Classifier::extract_features(&params, &ds.examples[0].volume).unwrap();
        let f2 = Classifier::extract_features(&params, &ds.examples[0].volume).unwrap();
        assert_eq!(f1.len(), FEATURE_WIDTH);
        assert!(f1.iter().zip(f2.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn identical_volumes_with_three_labels_cap_alignment_at_third() {
        let params = Classifier::init(4);
        let vol = Tensor::full(&[1, 32, 32, 32], 0.4);
        let samples: Vec<(Tensor, Level)> = Level::all()
            .into_iter()
            .map(|l| (vol.clone(), l))
            .collect();
        let acc = alignment_accuracy(&params, &samples).unwrap();
        assert!(acc <= 1.0 / 3.0 + 1e-12, "pigeonhole on argmax: {acc}");
    }

    #[test]
    fn blur_preserves_mass_roughly() {
        let ds = PhantomDataset::generate(10, Task::LesionLoad, 8).unwrap();
        let v = &ds.examples[0].volume;
        let b = gaussian_blur_same(v, 1.0).unwrap();
        assert_eq!(b.shape(), v.shape());
        let (ms, mb) = (v.mean(), b.mean());
        assert!((ms - mb).abs() < 0.01, "{ms} vs {mb}");
    }
}
